mod common;

use kgprompt_core::predictors::ScorerKind;

#[test]
fn every_op_matches_central_differences() {
    let errs = common::op_errors();
    assert!(errs.len() >= 30);
    for (name, e) in errs {
        assert!(e < 1e-4, "{name}: relative error {e:e}");
    }
}

#[test]
fn five_entity_model_end_to_end() {
    for kind in [ScorerKind::DistMult, ScorerKind::TransE] {
        let errs = common::end_to_end_errors(kind, 12);
        let names: Vec<&str> = errs.iter().map(|(n, _)| n.as_str()).collect();
        for expected in ["proj.w_in", "text.w_o", "struct.w_p2s", "ent_comp", "rel_emb", "fusion.log_sigma"] {
            assert!(names.contains(&expected), "{expected} not trainable: {names:?}");
        }
        assert!(!names.iter().any(|n| n.starts_with("enc.") || *n == "text.entity_table"));
        for (name, e) in errs {
            assert!(e < 1e-3, "{kind}: {name}: relative error {e:e}");
        }
    }
}

#[test]
fn gradient_check_catches_a_wrong_derivative() {
    // relu evaluated right at its kink: the one-sided tape derivative disagrees with the symmetric difference
    let x = kgprompt_core::Tensor::vector(vec![0.0, 0.0, 0.0]);
    let e = common::grad_check(&[x], |t, v| Ok(t.relu(v[0])));
    assert!(e > 1e-2, "{e}");
}
