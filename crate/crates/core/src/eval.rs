//! Filtered ranking evaluation, degree buckets and per-query explanations.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kg::{FilterIndex, KnowledgeGraph, NeighborIndex, Split, Triple};
use crate::model::{Model, QueryScores};
use crate::tensor::ParamStore;

/// 1-based filtered rank of `gold`. Entities in `exclusions` are skipped and ties
/// count against the gold entity.
pub fn filtered_rank(scores: &[f64], gold: usize, exclusions: &BTreeSet<usize>) -> Result<usize> {
    if gold >= scores.len() {
        return Err(Error::index(format!("gold {gold} outside {} scores", scores.len())));
    }
    if exclusions.contains(&gold) {
        return Err(Error::contract(format!("gold entity {gold} is excluded")));
    }
    let g = scores[gold];
    if g.is_nan() {
        return Err(Error::Numeric(format!("score of gold entity {gold} is NaN")));
    }
    let above = scores
        .iter()
        .enumerate()
        .filter(|&(i, &s)| i != gold && !exclusions.contains(&i) && s >= g)
        .count();
    Ok(above + 1)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankingReport {
    pub count: usize,
    pub mrr: f64,
    pub hits1: f64,
    pub hits3: f64,
    pub hits10: f64,
    pub ranks: Vec<usize>,
}

pub fn aggregate(ranks: &[usize]) -> Result<RankingReport> {
    if ranks.is_empty() {
        return Err(Error::contract("cannot aggregate zero ranks"));
    }
    if ranks.contains(&0) {
        return Err(Error::contract("ranks are 1-based"));
    }
    let n = ranks.len() as f64;
    let hits = |k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n;
    Ok(RankingReport {
        count: ranks.len(),
        mrr: ranks.iter().map(|&r| 1.0 / r as f64).sum::<f64>() / n,
        hits1: hits(1),
        hits3: hits(3),
        hits10: hits(10),
        ranks: ranks.to_vec(),
    })
}

/// Expected MRR of uniformly random scores: mean over queries of `H(N)/N`, where `N` is the
/// number of candidates left after filtering.
pub fn random_chance_mrr(candidate_counts: &[usize]) -> f64 {
    let per: f64 = candidate_counts
        .iter()
        .map(|&n| (1..=n).map(|r| 1.0 / r as f64).sum::<f64>() / n as f64)
        .sum();
    per / candidate_counts.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lower: usize,
    /// Exclusive upper bound; `None` for the last bucket.
    pub upper: Option<usize>,
    pub count: usize,
    pub mrr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DegreeBucketReport {
    pub boundaries: Vec<usize>,
    pub buckets: Vec<Bucket>,
}

/// Groups `(degree, rank)` pairs into `[b_i, b_{i+1})` intervals with the last one open.
/// Degrees below the first boundary fall into the first bucket.
pub fn degree_buckets(pairs: &[(usize, usize)], boundaries: &[usize]) -> Result<DegreeBucketReport> {
    if boundaries.is_empty() || boundaries.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::config("bucket boundaries must be strictly increasing"));
    }
    let mut sums = vec![(0usize, 0.0f64); boundaries.len()];
    for &(deg, rank) in pairs {
        let b = boundaries.iter().rposition(|&lo| deg >= lo).unwrap_or(0);
        sums[b].0 += 1;
        sums[b].1 += 1.0 / rank as f64;
    }
    let buckets = sums
        .iter()
        .enumerate()
        .map(|(i, &(count, s))| Bucket {
            lower: boundaries[i],
            upper: boundaries.get(i + 1).copied(),
            count,
            mrr: (count > 0).then(|| s / count as f64),
        })
        .collect();
    Ok(DegreeBucketReport {
        boundaries: boundaries.to_vec(),
        buckets,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictorBuckets {
    pub textual: Option<DegreeBucketReport>,
    pub structural: DegreeBucketReport,
    pub ensemble: Option<DegreeBucketReport>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub seed: u64,
    pub split: Split,
    pub queries: usize,
    pub random_chance_mrr: f64,
    pub textual: Option<RankingReport>,
    pub structural: RankingReport,
    pub ensemble: Option<RankingReport>,
    pub buckets: Option<PredictorBuckets>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    /// Aligned-column text table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "split {:?}  queries {}  seed {}", self.split, self.queries, self.seed);
        let _ = writeln!(s, "config {}", self.config_hash);
        let _ = writeln!(s, "random-chance MRR {:.4}", self.random_chance_mrr);
        let _ = writeln!(s, "{:<6} {:>8} {:>8} {:>8} {:>8}", "pred", "MRR", "H@1", "H@3", "H@10");
        for (tag, r) in self.predictors() {
            let _ = writeln!(
                s,
                "{:<6} {:>8.4} {:>8.4} {:>8.4} {:>8.4}",
                tag, r.mrr, r.hits1, r.hits3, r.hits10
            );
        }
        if let Some(b) = &self.buckets {
            let _ = writeln!(s, "\ndegree buckets");
            let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>8} {:>8}", "degree", "count", "[T]", "[S]", "[C]");
            let fmt = |r: Option<&DegreeBucketReport>, i: usize| {
                r.and_then(|r| r.buckets[i].mrr)
                    .map(|m| format!("{m:.4}"))
                    .unwrap_or_else(|| "-".into())
            };
            for (i, bk) in b.structural.buckets.iter().enumerate() {
                let range = match bk.upper {
                    Some(u) => format!("[{}, {})", bk.lower, u),
                    None => format!("[{}, inf)", bk.lower),
                };
                let _ = writeln!(
                    s,
                    "{:<12} {:>6} {:>8} {:>8} {:>8}",
                    range,
                    bk.count,
                    fmt(b.textual.as_ref(), i),
                    fmt(Some(&b.structural), i),
                    fmt(b.ensemble.as_ref(), i)
                );
            }
        }
        s
    }

    /// `[T]`, `[S]`, `[C]` reports that are present.
    pub fn predictors(&self) -> Vec<(&'static str, &RankingReport)> {
        let mut v = Vec::new();
        if let Some(t) = &self.textual {
            v.push(("[T]", t));
        }
        v.push(("[S]", &self.structural));
        if let Some(c) = &self.ensemble {
            v.push(("[C]", c));
        }
        v
    }
}

/// Ranks of one predictor over `queries`.
fn ranks_of(
    queries: &[Triple],
    scores: &[QueryScores],
    filter: &FilterIndex,
    pick: impl Fn(&QueryScores) -> Option<&Vec<f64>>,
) -> Result<Option<Vec<usize>>> {
    let mut ranks = Vec::with_capacity(queries.len());
    for (t, s) in queries.iter().zip(scores) {
        let Some(v) = pick(s) else { return Ok(None) };
        ranks.push(filtered_rank(v, t.tail, &filter.exclusions(t.head, t.relation, t.tail))?);
    }
    Ok(Some(ranks))
}

/// Scores every triple of `split` as a tail query and ranks the gold tail.
/// Returns the report and the raw scores in split order.
pub fn evaluate(
    model: &Model,
    store: &ParamStore,
    graph: &KnowledgeGraph,
    split: Split,
    buckets: bool,
) -> Result<(EvalReport, Vec<QueryScores>)> {
    let queries = graph.split(split);
    if queries.is_empty() {
        return Err(Error::contract(format!("split {split:?} has no triples")));
    }
    let filter = FilterIndex::build(graph);
    let pairs: Vec<(usize, usize)> = queries.iter().map(|t| (t.head, t.relation)).collect();
    let scores = model.score_queries(store, &pairs)?;
    let t = ranks_of(queries, &scores, &filter, |s| s.textual.as_ref())?;
    let s = ranks_of(queries, &scores, &filter, |s| Some(&s.structural))?.expect("structural scores");
    let c = ranks_of(queries, &scores, &filter, |s| s.ensemble.as_ref())?;
    let counts: Vec<usize> = queries
        .iter()
        .map(|q| graph.num_entities() - filter.exclusions(q.head, q.relation, q.tail).len())
        .collect();
    let bucket_report = if buckets {
        let by = |ranks: &[usize]| {
            let pairs: Vec<(usize, usize)> = queries
                .iter()
                .zip(ranks)
                .map(|(q, &r)| (model.neighbors.degree(q.head), r))
                .collect();
            degree_buckets(&pairs, &model.cfg.buckets)
        };
        Some(PredictorBuckets {
            textual: t.as_deref().map(by).transpose()?,
            structural: by(&s)?,
            ensemble: c.as_deref().map(by).transpose()?,
        })
    } else {
        None
    };
    let report = EvalReport {
        config_hash: model.cfg.hash(),
        seed: model.cfg.seed,
        split,
        queries: queries.len(),
        random_chance_mrr: random_chance_mrr(&counts),
        textual: t.as_deref().map(aggregate).transpose()?,
        structural: aggregate(&s)?,
        ensemble: c.as_deref().map(aggregate).transpose()?,
        buckets: bucket_report,
    };
    Ok((report, scores))
}

/// Writes every score as TSV. The first line is a `#` comment carrying the config hash and seed;
/// missing predictors are written as `NaN`.
pub fn write_score_dump(path: &Path, scores: &[QueryScores], config_hash: &str, seed: u64) -> Result<()> {
    let mut out = Vec::new();
    writeln!(out, "# config_hash={config_hash} seed={seed}").map_err(|e| Error::io(path, e))?;
    writeln!(out, "query_id\tentity_id\tQ_T\tQ_S\tensemble").map_err(|e| Error::io(path, e))?;
    for (q, s) in scores.iter().enumerate() {
        for e in 0..s.structural.len() {
            let t = s.textual.as_ref().map_or(f64::NAN, |v| v[e]);
            let c = s.ensemble.as_ref().map_or(f64::NAN, |v| v[e]);
            writeln!(out, "{q}\t{e}\t{t:?}\t{:?}\t{c:?}", s.structural[e]).map_err(|e| Error::io(path, e))?;
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// -- explanations --------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeighborWeight {
    pub entity: String,
    pub relation: String,
    pub alpha: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentExplanation {
    pub component: usize,
    pub beta: f64,
    pub neighbors: Vec<NeighborWeight>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub entity: String,
    pub score: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Explanation {
    pub config_hash: String,
    pub seed: u64,
    pub head: String,
    pub relation: String,
    pub components: Vec<ComponentExplanation>,
    pub top_textual: Option<Vec<Prediction>>,
    pub top_structural: Vec<Prediction>,
    pub top_ensemble: Option<Vec<Prediction>>,
}

fn relation_label(graph: &KnowledgeGraph, index: &NeighborIndex, r: usize) -> String {
    if r == index.self_loop_relation() {
        "self".to_string()
    } else {
        graph.relations[r].key.clone()
    }
}

fn top(graph: &KnowledgeGraph, scores: &[f64], j: usize) -> Vec<Prediction> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.into_iter()
        .take(j)
        .map(|e| Prediction {
            entity: graph.entities[e].key.clone(),
            score: scores[e],
        })
        .collect()
}

/// β of the components fed to the encoder, their `top_m` neighbors by attention and the
/// `top_j` predictions of each predictor for the query `(head, relation, ?)`.
pub fn explain(
    model: &Model,
    store: &ParamStore,
    graph: &KnowledgeGraph,
    head: usize,
    relation: usize,
    top_m: usize,
    top_j: usize,
) -> Result<Explanation> {
    let snap = model.snapshot(store)?;
    let q = model.score_query(store, &snap, head, relation)?;
    let view = model.attention_view(&snap);
    let components = q
        .selected
        .iter()
        .zip(&q.beta)
        .map(|(&k, &beta)| {
            let mut w = view.weights_for(head, k);
            w.sort_by(|a, b| b.2.total_cmp(&a.2));
            ComponentExplanation {
                component: k,
                beta,
                neighbors: w
                    .into_iter()
                    .take(top_m)
                    .map(|(j, r, alpha)| NeighborWeight {
                        entity: graph.entities[j].key.clone(),
                        relation: relation_label(graph, &model.neighbors, r),
                        alpha,
                    })
                    .collect(),
            }
        })
        .collect();
    Ok(Explanation {
        config_hash: model.cfg.hash(),
        seed: model.cfg.seed,
        head: graph.entities[head].key.clone(),
        relation: graph.relations[relation].key.clone(),
        components,
        top_textual: q.textual.as_ref().map(|s| top(graph, s, top_j)),
        top_structural: top(graph, &q.structural, top_j),
        top_ensemble: q.ensemble.as_ref().map(|s| top(graph, s, top_j)),
    })
}

impl Explanation {
    /// Human-readable per-component neighbor table.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "query ({}, {}, ?)", self.head, self.relation);
        for c in &self.components {
            let _ = writeln!(s, "component {}  beta {:.4}", c.component, c.beta);
            for n in &c.neighbors {
                let _ = writeln!(s, "  {:<24} {:<16} {:.4}", n.relation, n.entity, n.alpha);
            }
        }
        let lists = [
            ("[T]", self.top_textual.as_ref()),
            ("[S]", Some(&self.top_structural)),
            ("[C]", self.top_ensemble.as_ref()),
        ];
        for (tag, list) in lists {
            if let Some(l) = list {
                let names: Vec<String> = l.iter().map(|p| format!("{} ({:.3})", p.entity, p.score)).collect();
                let _ = writeln!(s, "{tag} {}", names.join(", "));
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rank_examples() {
        let none = BTreeSet::new();
        assert_eq!(filtered_rank(&[0.1, 0.9, 0.3], 1, &none).unwrap(), 1);
        assert_eq!(filtered_rank(&[0.5; 5], 2, &none).unwrap(), 5);
        let ex: BTreeSet<usize> = [1].into();
        assert_eq!(filtered_rank(&[0.1, 0.9, 0.3], 2, &ex).unwrap(), 1);
        assert!(matches!(filtered_rank(&[0.1, 0.9], 1, &ex), Err(Error::Contract(_))));
    }

    #[test]
    fn aggregate_examples() {
        let r = aggregate(&[1, 1, 1]).unwrap();
        assert_eq!((r.mrr, r.hits1, r.hits3, r.hits10), (1.0, 1.0, 1.0, 1.0));
        let r = aggregate(&[1, 2]).unwrap();
        assert_eq!((r.mrr, r.hits1), (0.75, 0.5));
        assert!(aggregate(&[]).is_err());
    }

    #[test]
    fn buckets_cover_everything() {
        let pairs = [(0, 1), (3, 2), (7, 4), (60, 1), (500, 10)];
        let b = degree_buckets(&pairs, &[0, 5, 10, 20, 50, 100]).unwrap();
        let counts: Vec<usize> = b.buckets.iter().map(|b| b.count).collect();
        assert_eq!(counts, vec![2, 1, 0, 0, 1, 1]);
        assert_eq!(b.buckets[0].mrr, Some(0.75));
        let one = degree_buckets(&pairs, &[0]).unwrap();
        let global = aggregate(&[1, 2, 4, 1, 10]).unwrap().mrr;
        assert!((one.buckets[0].mrr.unwrap() - global).abs() < 1e-15);
        assert!(degree_buckets(&pairs, &[0, 0]).is_err());
    }

    #[test]
    fn random_chance_small_case() {
        assert!((random_chance_mrr(&[2]) - 0.75).abs() < 1e-15);
        assert!((random_chance_mrr(&[1, 2]) - 0.875).abs() < 1e-15);
    }

    #[test]
    fn report_json_round_trip() {
        let r = EvalReport {
            config_hash: "abc".into(),
            seed: 3,
            split: Split::Valid,
            queries: 2,
            random_chance_mrr: 0.1,
            textual: None,
            structural: aggregate(&[1, 3]).unwrap(),
            ensemble: Some(aggregate(&[2, 2]).unwrap()),
            buckets: None,
        };
        assert_eq!(EvalReport::from_json(&r.to_json().unwrap()).unwrap(), r);
        assert!(r.to_text().contains("[C]"));
    }

    proptest! {
        #[test]
        fn filtered_never_exceeds_raw(scores in proptest::collection::vec(-5.0f64..5.0, 2..30), g in 0usize..30, ex in proptest::collection::btree_set(0usize..30, 0..5)) {
            let g = g % scores.len();
            let ex: BTreeSet<usize> = ex.into_iter().filter(|&e| e != g && e < scores.len()).collect();
            let f = filtered_rank(&scores, g, &ex).unwrap();
            let raw = filtered_rank(&scores, g, &BTreeSet::new()).unwrap();
            prop_assert!(f <= raw);
            prop_assert!(f >= 1 && f <= scores.len());
        }

        #[test]
        fn hits_monotone(ranks in proptest::collection::vec(1usize..50, 1..40)) {
            let r = aggregate(&ranks).unwrap();
            prop_assert!(r.hits1 <= r.hits3 && r.hits3 <= r.hits10);
            prop_assert!(r.mrr > 0.0 && r.mrr <= 1.0);
        }
    }
}
