use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use kgprompt_core::config::RunConfig;
use kgprompt_core::encoder::ENCODER_PREFIX;
use kgprompt_core::eval::{evaluate, explain, write_score_dump};
use kgprompt_core::kg::toy::write_toy;
use kgprompt_core::kg::{KnowledgeGraph, Split, TokenVocab};
use kgprompt_core::model::Model;
use kgprompt_core::train::{log_to_jsonl, train_with, TrainError};
use kgprompt_core::{Checkpoint, Error};

#[derive(Parser)]
#[command(name = "kgprompt", version, about = "Knowledge graph completion with structure prompts")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Write the toy dataset, or augment a raw dataset with inverse triples.
    Prepare {
        /// Raw dataset directory to augment.
        src: Option<PathBuf>,
        /// Output directory for the augmented dump.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Write the deterministic toy dataset and a matching config into this directory.
        #[arg(long, value_name = "DIR", conflicts_with_all = ["src", "out"])]
        make_toy: Option<PathBuf>,
    },
    /// Pretrain and freeze the encoder, then train the prompts and heads.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set epochs=10`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Filtered ranking report for the textual, structural and ensemble scores.
    Eval {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Add the degree-bucket breakdown.
        #[arg(long)]
        buckets: bool,
        /// Also dump every score as TSV.
        #[arg(long)]
        scores: Option<PathBuf>,
        /// JSON report path; defaults to `<output_dir>/report_<split>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Component weights, top neighbors and top predictions for one query.
    Explain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Head entity key.
        #[arg(long)]
        head: String,
        /// Relation key; inverse relations end in `__reverse`.
        #[arg(long)]
        relation: String,
        #[arg(long, default_value_t = 2)]
        top_m: usize,
        #[arg(long, default_value_t = 5)]
        top_j: usize,
        /// JSON output path; defaults to `<output_dir>/explain_<head>_<relation>.json`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::Checkpoint(_)) => 2,
        Some(
            Error::Parse { .. } | Error::Integrity(_) | Error::Contract(_) | Error::Index(_) | Error::Io { .. },
        ) => 3,
        Some(Error::Numeric(_)) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Prepare { src, out, make_toy } => prepare(src, out, make_toy),
        Cmd::Train { config, overrides } => train(&load_config(&config, &overrides)?),
        Cmd::Eval {
            config,
            overrides,
            checkpoint,
            split,
            buckets,
            scores,
            out,
        } => eval(&load_config(&config, &overrides)?, &checkpoint, split, buckets, scores, out),
        Cmd::Explain {
            config,
            overrides,
            checkpoint,
            head,
            relation,
            top_m,
            top_j,
            out,
        } => {
            let cfg = load_config(&config, &overrides)?;
            explain_cmd(&cfg, &checkpoint, &head, &relation, top_m, top_j, out)
        }
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(path)?;
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io { path: dir.to_path_buf(), source: e })?;
    }
    fs::write(path, contents).map_err(|e| Error::Io { path: path.to_path_buf(), source: e })?;
    Ok(())
}

fn prepare(src: Option<PathBuf>, out: Option<PathBuf>, make_toy: Option<PathBuf>) -> Result<()> {
    if let Some(dir) = make_toy {
        let m = write_toy(&dir)?;
        let cfg = RunConfig {
            data_dir: PathBuf::from("."),
            output_dir: PathBuf::from("out"),
            ..RunConfig::toy()
        };
        write(&dir.join("toy.conf"), format!("# toy preset\n{}", cfg.to_text()))?;
        println!(
            "toy dataset in {}: {} entities, {} relations, {}/{}/{} triples",
            dir.display(),
            m.entities,
            m.relations,
            m.train,
            m.valid,
            m.test
        );
        return Ok(());
    }
    let src = src.ok_or_else(|| Error::Config("prepare needs a dataset directory or --make-toy".into()))?;
    let out = out.ok_or_else(|| Error::Config("prepare needs --out".into()))?;
    let g = KnowledgeGraph::load_dir(&src)?;
    let src_manifest = kgprompt_core::kg::read_manifest(&src)?;
    let g = g.add_inverse_triples()?;
    let mut m = g.manifest();
    if let Some(sm) = src_manifest {
        m.generator_seed = sm.generator_seed;
        m.text_embedding_norm_range = sm.text_embedding_norm_range;
    }
    g.write_dir(&out, &m)?;
    TokenVocab::for_graph(&g).write(&out.join("vocab.txt"))?;
    println!("{}", serde_json::to_string_pretty(&m)?);
    Ok(())
}

fn load_graph(cfg: &RunConfig) -> Result<(KnowledgeGraph, TokenVocab)> {
    let g = KnowledgeGraph::load_augmented(&cfg.data_dir)
        .with_context(|| format!("loading {}", cfg.data_dir.display()))?;
    let vocab = TokenVocab::for_graph(&g);
    Ok((g, vocab))
}

fn train(cfg: &RunConfig) -> Result<()> {
    let (g, vocab) = load_graph(cfg)?;
    let out = &cfg.output_dir;
    write(&out.join("config.txt"), cfg.to_text())?;
    let outcome = match train_with(cfg, &g, &vocab, |e| {
        println!("epoch {:>3}  loss {:.5}  valid MRR {:.4}", e.epoch, e.loss, e.valid_mrr)
    }) {
        Ok(o) => o,
        Err(TrainError::Numeric(d)) => {
            let path = out.join("diagnostics.json");
            let dump = serde_json::json!({ "config_hash": cfg.hash(), "seed": cfg.seed, "diagnostics": d });
            write(&path, serde_json::to_string_pretty(&dump)?)?;
            eprintln!("diagnostics written to {}", path.display());
            return Err(Error::from(TrainError::Numeric(d)).into());
        }
        Err(e) => return Err(Error::from(e).into()),
    };
    let model = &outcome.model;
    let stamp = |c: Checkpoint| c.with_meta("config_hash", cfg.hash()).with_meta("seed", cfg.seed.to_string());
    outcome.best.write(&out.join("best.ckpt"))?;
    model
        .checkpoint(&outcome.store)
        .with_meta("epoch", cfg.epochs.to_string())
        .write(&out.join("last.ckpt"))?;
    stamp(Checkpoint::from_store_filtered(&outcome.store, |n| n.starts_with(ENCODER_PREFIX)))
        .write(&out.join("encoder.ckpt"))?;
    write(&out.join("train_log.jsonl"), log_to_jsonl(&outcome.log, &cfg.hash(), cfg.seed)?)?;
    let summary = serde_json::json!({
        "config_hash": cfg.hash(),
        "seed": cfg.seed,
        "epochs": cfg.epochs,
        "initial_valid_mrr": outcome.initial_valid_mrr,
        "best_epoch": outcome.best_epoch,
        "best_valid_mrr": outcome.best_valid_mrr,
        "encoder_checksum": outcome.build.encoder_checksum,
        "pretrain_losses": outcome.build.pretrain_losses,
    });
    write(&out.join("train_summary.json"), serde_json::to_string_pretty(&summary)?)?;
    println!(
        "best valid MRR {:.4} at epoch {}; checkpoints in {}",
        outcome.best_valid_mrr,
        outcome.best_epoch,
        out.display()
    );
    Ok(())
}

fn load_model(cfg: &RunConfig, checkpoint: &Path) -> Result<(Model, kgprompt_core::ParamStore, KnowledgeGraph)> {
    let (g, vocab) = load_graph(cfg)?;
    let ck = Checkpoint::read(checkpoint)?;
    let (model, store) = Model::from_checkpoint(cfg, &g, &vocab, &ck)?;
    Ok((model, store, g))
}

fn eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    split: Split,
    buckets: bool,
    scores: Option<PathBuf>,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, store, g) = load_model(cfg, checkpoint)?;
    let (report, raw) = evaluate(&model, &store, &g, split, buckets)?;
    let name = format!("{split:?}").to_lowercase();
    let json = out.unwrap_or_else(|| cfg.output_dir.join(format!("report_{name}.json")));
    write(&json, report.to_json()?)?;
    write(&json.with_extension("txt"), report.to_text())?;
    if let Some(p) = scores {
        write_score_dump(&p, &raw, &cfg.hash(), cfg.seed)?;
    }
    print!("{}", report.to_text());
    Ok(())
}

fn explain_cmd(
    cfg: &RunConfig,
    checkpoint: &Path,
    head: &str,
    relation: &str,
    top_m: usize,
    top_j: usize,
    out: Option<PathBuf>,
) -> Result<()> {
    let (model, store, g) = load_model(cfg, checkpoint)?;
    let h = g
        .entity_id(head)
        .ok_or_else(|| Error::Index(format!("unknown entity {head:?}")))?;
    let r = g
        .relation_id(relation)
        .ok_or_else(|| Error::Index(format!("unknown relation {relation:?}")))?;
    let x = explain(&model, &store, &g, h, r, top_m, top_j)?;
    let path = out.unwrap_or_else(|| cfg.output_dir.join(format!("explain_{head}_{relation}.json")));
    write(&path, serde_json::to_string_pretty(&x)?)?;
    write(&path.with_extension("txt"), x.to_text())?;
    print!("{}", x.to_text());
    Ok(())
}
