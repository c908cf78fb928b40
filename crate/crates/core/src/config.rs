//! Flat `key = value` run configuration.
//!
//! Blank lines and lines starting with `#` are ignored. Unknown keys are
//! rejected. Relative paths are resolved against the config file's directory.
//!
//! | key | default |
//! |-----|---------|
//! | `data_dir` | `data` |
//! | `output_dir` | `out` |
//! | `seed` | `7` |
//! | `enc_layers`, `enc_hidden`, `enc_heads`, `enc_ffn` | `4`, `64`, `4`, `256` |
//! | `prompt_len` (n), `proj_hidden` (d_h) | `10`, `64` |
//! | `max_text_tokens` | `72` |
//! | `components` (K), `dim` (d), `graph_layers`, `composition` | `2`, `32`, `1`, `multiply` |
//! | `scorer`, `gamma` | `conve`, `9.0` |
//! | `conve_rows`, `conve_kernels`, `conve_kernel_size` | `4`, `8`, `3` |
//! | `lambda`, `epsilon`, `mode` | `0.1`, `0.1`, `full` |
//! | `lr`, `batch_size`, `epochs` | `0.0001`, `64`, `50` |
//! | `pretrain_steps`, `pretrain_batch`, `pretrain_lr` | `200`, `16`, `0.001` |
//! | `buckets` | `0,5,10,20,50,100` |
//! | `frozen_encoder` | empty (pretrain in-process) |

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use sha2::{Digest, Sha256};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::graph_learner::{Composition, GraphLearnerConfig};
use crate::kg::MAX_TEXT_TOKENS;
use crate::predictors::{AblationMode, ConvEConfig, ScorerKind};

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_dir: PathBuf,
    pub output_dir: PathBuf,
    pub seed: u64,
    pub enc_layers: usize,
    pub enc_hidden: usize,
    pub enc_heads: usize,
    pub enc_ffn: usize,
    pub prompt_len: usize,
    pub proj_hidden: usize,
    pub max_text_tokens: usize,
    pub components: usize,
    pub dim: usize,
    pub graph_layers: usize,
    pub composition: Composition,
    pub scorer: ScorerKind,
    pub gamma: f64,
    pub conve_rows: usize,
    pub conve_kernels: usize,
    pub conve_kernel_size: usize,
    pub lambda: f64,
    pub epsilon: f64,
    pub mode: AblationMode,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub pretrain_steps: usize,
    pub pretrain_batch: usize,
    pub pretrain_lr: f64,
    pub buckets: Vec<usize>,
    pub frozen_encoder: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_dir: PathBuf::from("data"),
            output_dir: PathBuf::from("out"),
            seed: 7,
            enc_layers: 4,
            enc_hidden: 64,
            enc_heads: 4,
            enc_ffn: 256,
            prompt_len: 10,
            proj_hidden: 64,
            max_text_tokens: MAX_TEXT_TOKENS,
            components: 2,
            dim: 32,
            graph_layers: 1,
            composition: Composition::Multiply,
            scorer: ScorerKind::ConvE,
            gamma: 9.0,
            conve_rows: 4,
            conve_kernels: 8,
            conve_kernel_size: 3,
            lambda: 0.1,
            epsilon: 0.1,
            mode: AblationMode::Full,
            lr: 1e-4,
            batch_size: 64,
            epochs: 50,
            pretrain_steps: 200,
            pretrain_batch: 16,
            pretrain_lr: 1e-3,
            buckets: vec![0, 5, 10, 20, 50, 100],
            frozen_encoder: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_enum<T: FromStr<Err = Error>>(v: &str) -> Result<T> {
    v.parse()
}

impl RunConfig {
    /// Small and fast settings for the bundled toy graph.
    pub fn toy() -> Self {
        Self {
            enc_layers: 2,
            enc_hidden: 32,
            enc_heads: 2,
            enc_ffn: 64,
            prompt_len: 4,
            proj_hidden: 32,
            scorer: ScorerKind::DistMult,
            lr: 1e-2,
            batch_size: 64,
            epochs: 50,
            pretrain_steps: 200,
            ..Self::default()
        }
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (no, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::config(format!("line {}: expected key = value", no + 1)))?;
            cfg.set(k.trim(), v.trim())
                .map_err(|e| Error::config(format!("line {}: {e}", no + 1)))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Reads a config file, resolves relative paths against its directory and
    /// checks that referenced paths exist.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse_str(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let resolve = |p: &Path| if p.is_relative() { base.join(p) } else { p.to_path_buf() };
        cfg.data_dir = resolve(&cfg.data_dir);
        cfg.output_dir = resolve(&cfg.output_dir);
        cfg.frozen_encoder = cfg.frozen_encoder.as_deref().map(resolve);
        if !cfg.data_dir.is_dir() {
            return Err(Error::config(format!("data_dir {} does not exist", cfg.data_dir.display())));
        }
        if let Some(p) = &cfg.frozen_encoder {
            if !p.is_file() {
                return Err(Error::config(format!("frozen_encoder {} does not exist", p.display())));
            }
        }
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "data_dir" => self.data_dir = PathBuf::from(v),
            "output_dir" => self.output_dir = PathBuf::from(v),
            "seed" => self.seed = parse(key, v)?,
            "enc_layers" => self.enc_layers = parse(key, v)?,
            "enc_hidden" => self.enc_hidden = parse(key, v)?,
            "enc_heads" => self.enc_heads = parse(key, v)?,
            "enc_ffn" => self.enc_ffn = parse(key, v)?,
            "prompt_len" => self.prompt_len = parse(key, v)?,
            "proj_hidden" => self.proj_hidden = parse(key, v)?,
            "max_text_tokens" => self.max_text_tokens = parse(key, v)?,
            "components" => self.components = parse(key, v)?,
            "dim" => self.dim = parse(key, v)?,
            "graph_layers" => self.graph_layers = parse(key, v)?,
            "composition" => self.composition = parse_enum(v)?,
            "scorer" => self.scorer = parse_enum(v)?,
            "gamma" => self.gamma = parse(key, v)?,
            "conve_rows" => self.conve_rows = parse(key, v)?,
            "conve_kernels" => self.conve_kernels = parse(key, v)?,
            "conve_kernel_size" => self.conve_kernel_size = parse(key, v)?,
            "lambda" => self.lambda = parse(key, v)?,
            "epsilon" => self.epsilon = parse(key, v)?,
            "mode" => self.mode = parse_enum(v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch_size" => self.batch_size = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "buckets" => {
                self.buckets = v
                    .split(',')
                    .map(|s| parse(key, s.trim()))
                    .collect::<Result<_>>()?
            }
            "frozen_encoder" => {
                self.frozen_encoder = if v.is_empty() { None } else { Some(PathBuf::from(v)) }
            }
            _ => return Err(Error::config(format!("unknown key {key}"))),
        }
        Ok(())
    }

    /// Components actually used by the graph learner; `no_disen` forces one.
    pub fn effective_components(&self) -> usize {
        if self.mode == AblationMode::NoDisen {
            1
        } else {
            self.components
        }
    }

    pub fn encoder(&self) -> EncoderConfig {
        EncoderConfig {
            layers: self.enc_layers,
            hidden: self.enc_hidden,
            heads: self.enc_heads,
            ffn: self.enc_ffn,
            max_positions: self.max_text_tokens + 5,
        }
    }

    pub fn graph(&self) -> GraphLearnerConfig {
        GraphLearnerConfig {
            components: self.effective_components(),
            dim: self.dim,
            layers: self.graph_layers,
            composition: self.composition,
        }
    }

    pub fn conve(&self) -> ConvEConfig {
        ConvEConfig {
            rows: self.conve_rows,
            kernels: self.conve_kernels,
            kernel_size: self.conve_kernel_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder().validate()?;
        self.graph().validate()?;
        let positive = [
            ("prompt_len", self.prompt_len),
            ("proj_hidden", self.proj_hidden),
            ("max_text_tokens", self.max_text_tokens),
            ("batch_size", self.batch_size),
            ("pretrain_batch", self.pretrain_batch),
        ];
        for (k, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("{k} must be positive")));
            }
        }
        if !(0.0..1.0).contains(&self.epsilon) {
            return Err(Error::config("epsilon must lie in [0, 1)"));
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::config("lambda must be a finite non-negative number"));
        }
        if !(self.lr > 0.0 && self.pretrain_lr > 0.0) {
            return Err(Error::config("learning rates must be positive"));
        }
        if !self.gamma.is_finite() {
            return Err(Error::config("gamma must be finite"));
        }
        if self.scorer == ScorerKind::ConvE {
            let c = self.conve();
            if c.rows == 0 || !self.dim.is_multiple_of(c.rows) {
                return Err(Error::config(format!("dim {} is not divisible by conve_rows {}", self.dim, c.rows)));
            }
            let cols = self.dim / c.rows;
            if c.kernels == 0 || c.kernel_size == 0 || c.kernel_size > cols || c.kernel_size > 2 * c.rows {
                return Err(Error::config("conve kernels do not fit the reshaped input"));
            }
        }
        if self.buckets.is_empty() || self.buckets.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("bucket boundaries must be strictly increasing"));
        }
        Ok(())
    }

    /// Canonical text form; parsing it yields an equal config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let buckets = self.buckets.iter().map(|b| b.to_string()).collect::<Vec<_>>().join(",");
        let frozen = self
            .frozen_encoder
            .as_ref()
            .map(|p| p.display().to_string())
            .unwrap_or_default();
        let rows: [(&str, String); 30] = [
            ("data_dir", self.data_dir.display().to_string()),
            ("output_dir", self.output_dir.display().to_string()),
            ("seed", self.seed.to_string()),
            ("enc_layers", self.enc_layers.to_string()),
            ("enc_hidden", self.enc_hidden.to_string()),
            ("enc_heads", self.enc_heads.to_string()),
            ("enc_ffn", self.enc_ffn.to_string()),
            ("prompt_len", self.prompt_len.to_string()),
            ("proj_hidden", self.proj_hidden.to_string()),
            ("max_text_tokens", self.max_text_tokens.to_string()),
            ("components", self.components.to_string()),
            ("dim", self.dim.to_string()),
            ("graph_layers", self.graph_layers.to_string()),
            ("composition", self.composition.to_string()),
            ("scorer", self.scorer.to_string()),
            ("gamma", format!("{:?}", self.gamma)),
            ("conve_rows", self.conve_rows.to_string()),
            ("conve_kernels", self.conve_kernels.to_string()),
            ("conve_kernel_size", self.conve_kernel_size.to_string()),
            ("lambda", format!("{:?}", self.lambda)),
            ("epsilon", format!("{:?}", self.epsilon)),
            ("mode", self.mode.to_string()),
            ("lr", format!("{:?}", self.lr)),
            ("batch_size", self.batch_size.to_string()),
            ("epochs", self.epochs.to_string()),
            ("pretrain_steps", self.pretrain_steps.to_string()),
            ("pretrain_batch", self.pretrain_batch.to_string()),
            ("pretrain_lr", format!("{:?}", self.pretrain_lr)),
            ("buckets", buckets),
            ("frozen_encoder", frozen),
        ];
        for (k, v) in rows {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }

    /// SHA-256 of the canonical text, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_text().as_bytes()))
    }

    /// Hash of the settings that determine parameter shapes; checkpoints must agree on it.
    pub fn architecture_hash(&self) -> String {
        let arch = format!(
            "{} {} {} {} {} {} {} {} {} {} {} {} {} {}",
            self.enc_layers,
            self.enc_hidden,
            self.enc_heads,
            self.enc_ffn,
            self.prompt_len,
            self.proj_hidden,
            self.max_text_tokens,
            self.effective_components(),
            self.dim,
            self.graph_layers,
            self.scorer,
            self.conve_rows,
            self.conve_kernels,
            self.conve_kernel_size
        );
        hex::encode(Sha256::digest(arch.as_bytes()))
    }
}
