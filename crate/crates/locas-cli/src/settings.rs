//! Run settings: defaults, flat key=value config files with section
//! headers, and the resolved-config snapshot written beside every run's
//! outputs. Unknown sections or keys are rejected.

use std::fmt::Write as _;
use std::path::Path;

use locas_core::backbone::{FfnKind, ModelConfig};
use locas_core::error::{LocasError, Result};
use locas_core::harness::{Method, RunConfig};
use locas_core::memory::{InitStrategy, MemOptimizer};
use locas_core::nlsvd::{Cadence, CyclePolicy};

#[derive(Clone, Debug)]
pub struct Settings {
    // [backbone]
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub ffn_kind: FfnKind,
    pub max_seq: usize,
    pub train_steps: usize,
    pub train_lr: f64,
    // [harness]
    pub chunk_size: usize,
    pub window: usize,
    pub method: Method,
    pub strategy: InitStrategy,
    pub r: usize,
    /// None = per-method harness default.
    pub lr: Option<f64>,
    pub steps_per_chunk: usize,
    pub checkpoint_every: usize,
    pub optimizer: String,
    pub reinit_per_chunk: bool,
    pub n_docs: usize,
    pub doc_len: usize,
    pub vocab_skew: f64,
    // [memory]
    /// None = per-method harness default.
    pub epsilon: Option<f64>,
    // [nlsvd]
    pub n_target: usize,
    pub n_capacity: usize,
    pub cadence: Cadence,
    pub drop_threshold: f64,
    // [cli]
    pub seed: u64,
    pub deterministic: bool,
}

impl Default for Settings {
    fn default() -> Self {
        Settings {
            layers: 2,
            d_model: 64,
            d_ff: 192,
            heads: 4,
            vocab: locas_core::backbone::DEFAULT_VOCAB,
            ffn_kind: FfnKind::Glu,
            max_seq: 512,
            train_steps: 1200,
            train_lr: 3e-3,
            chunk_size: 256,
            window: 256,
            method: Method::LocasGlu,
            strategy: InitStrategy::TopK,
            r: 16,
            lr: None,
            steps_per_chunk: 1,
            checkpoint_every: 1024,
            optimizer: "default".into(),
            reinit_per_chunk: false,
            n_docs: 8,
            doc_len: 16384,
            vocab_skew: 1.0,
            epsilon: None,
            n_target: 32,
            n_capacity: 64,
            cadence: Cadence::PerSpan,
            drop_threshold: 1e-8,
            seed: 0,
            deterministic: false,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| LocasError::Format(format!("invalid value '{value}' for key '{key}'")))
}

impl Settings {
    pub fn ffn_kind_parse(s: &str) -> Result<FfnKind> {
        match s {
            "mlp" => Ok(FfnKind::Mlp),
            "glu" => Ok(FfnKind::Glu),
            other => Err(LocasError::Format(format!("unknown ffn kind '{other}'"))),
        }
    }

    pub fn cadence_parse(s: &str) -> Result<Cadence> {
        match s {
            "per-token" => Ok(Cadence::PerToken),
            "per-span" => Ok(Cadence::PerSpan),
            other => Err(LocasError::Format(format!("unknown cadence '{other}'"))),
        }
    }

    pub fn apply_file(&mut self, path: &Path) -> Result<()> {
        let text = std::fs::read_to_string(path)?;
        self.apply_config_text(&text)
    }

    pub fn apply_config_text(&mut self, text: &str) -> Result<()> {
        let mut section = String::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(name) = line.strip_prefix('[').and_then(|s| s.strip_suffix(']')) {
                section = name.trim().to_string();
                match section.as_str() {
                    "backbone" | "harness" | "memory" | "nlsvd" | "cli" => {}
                    other => {
                        return Err(LocasError::Format(format!(
                            "unknown config section '[{other}]' (line {})",
                            lineno + 1
                        )))
                    }
                }
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                LocasError::Format(format!("expected key=value at line {}", lineno + 1))
            })?;
            let key = key.trim();
            let value = value.trim();
            self.set(&section, key, value)?;
        }
        Ok(())
    }

    fn set(&mut self, section: &str, key: &str, value: &str) -> Result<()> {
        match (section, key) {
            ("backbone", "layers") => self.layers = parse(key, value)?,
            ("backbone", "d_model") => self.d_model = parse(key, value)?,
            ("backbone", "d_ff") => self.d_ff = parse(key, value)?,
            ("backbone", "heads") => self.heads = parse(key, value)?,
            ("backbone", "vocab") => self.vocab = parse(key, value)?,
            ("backbone", "ffn_kind") => self.ffn_kind = Self::ffn_kind_parse(value)?,
            ("backbone", "max_seq") => self.max_seq = parse(key, value)?,
            ("backbone", "train_steps") => self.train_steps = parse(key, value)?,
            ("backbone", "train_lr") => self.train_lr = parse(key, value)?,
            ("harness", "chunk_size") => self.chunk_size = parse(key, value)?,
            ("harness", "window") => self.window = parse(key, value)?,
            ("harness", "method") => self.method = Method::parse(value)?,
            ("harness", "strategy") => self.strategy = InitStrategy::parse(value)?,
            ("harness", "r") => self.r = parse(key, value)?,
            ("harness", "lr") => self.lr = Some(parse(key, value)?),
            ("harness", "steps_per_chunk") => self.steps_per_chunk = parse(key, value)?,
            ("harness", "checkpoint_every") => self.checkpoint_every = parse(key, value)?,
            ("harness", "optimizer") => match value {
                "sgd" | "adam" | "default" => self.optimizer = value.to_string(),
                other => {
                    return Err(LocasError::Format(format!("unknown optimizer '{other}'")))
                }
            },
            ("harness", "reinit_per_chunk") => self.reinit_per_chunk = parse(key, value)?,
            ("harness", "n_docs") => self.n_docs = parse(key, value)?,
            ("harness", "doc_len") => self.doc_len = parse(key, value)?,
            ("harness", "vocab_skew") => self.vocab_skew = parse(key, value)?,
            ("memory", "epsilon") => self.epsilon = Some(parse(key, value)?),
            ("nlsvd", "n_target") => self.n_target = parse(key, value)?,
            ("nlsvd", "n_capacity") => self.n_capacity = parse(key, value)?,
            ("nlsvd", "cadence") => self.cadence = Self::cadence_parse(value)?,
            ("nlsvd", "drop_threshold") => self.drop_threshold = parse(key, value)?,
            ("cli", "seed") => self.seed = parse(key, value)?,
            ("cli", "deterministic") => self.deterministic = parse(key, value)?,
            _ => {
                return Err(LocasError::Format(format!(
                    "unknown config key '{key}' in section '[{section}]'"
                )))
            }
        }
        Ok(())
    }

    /// Full resolved snapshot; loadable back via `--config`.
    pub fn to_config_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "[backbone]");
        let _ = writeln!(s, "layers = {}", self.layers);
        let _ = writeln!(s, "d_model = {}", self.d_model);
        let _ = writeln!(s, "d_ff = {}", self.d_ff);
        let _ = writeln!(s, "heads = {}", self.heads);
        let _ = writeln!(s, "vocab = {}", self.vocab);
        let _ = writeln!(
            s,
            "ffn_kind = {}",
            if self.ffn_kind == FfnKind::Glu { "glu" } else { "mlp" }
        );
        let _ = writeln!(s, "max_seq = {}", self.max_seq);
        let _ = writeln!(s, "train_steps = {}", self.train_steps);
        let _ = writeln!(s, "train_lr = {}", self.train_lr);
        let _ = writeln!(s, "\n[harness]");
        let _ = writeln!(s, "chunk_size = {}", self.chunk_size);
        let _ = writeln!(s, "window = {}", self.window);
        let _ = writeln!(s, "method = {}", self.method.label());
        let _ = writeln!(s, "strategy = {}", self.strategy.label());
        let _ = writeln!(s, "r = {}", self.r);
        let _ = writeln!(s, "lr = {}", self.resolved_lr());
        let _ = writeln!(s, "steps_per_chunk = {}", self.steps_per_chunk);
        let _ = writeln!(s, "checkpoint_every = {}", self.checkpoint_every);
        let _ = writeln!(s, "optimizer = {}", self.optimizer);
        let _ = writeln!(s, "reinit_per_chunk = {}", self.reinit_per_chunk);
        let _ = writeln!(s, "n_docs = {}", self.n_docs);
        let _ = writeln!(s, "doc_len = {}", self.doc_len);
        let _ = writeln!(s, "vocab_skew = {}", self.vocab_skew);
        let _ = writeln!(s, "\n[memory]");
        let _ = writeln!(s, "epsilon = {}", self.resolved_epsilon());
        let _ = writeln!(s, "\n[nlsvd]");
        let _ = writeln!(s, "n_target = {}", self.n_target);
        let _ = writeln!(s, "n_capacity = {}", self.n_capacity);
        let _ = writeln!(
            s,
            "cadence = {}",
            if self.cadence == Cadence::PerToken { "per-token" } else { "per-span" }
        );
        let _ = writeln!(s, "drop_threshold = {}", self.drop_threshold);
        let _ = writeln!(s, "\n[cli]");
        let _ = writeln!(s, "seed = {}", self.seed);
        let _ = writeln!(s, "deterministic = {}", self.deterministic);
        s
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            layers: self.layers,
            d_model: self.d_model,
            d_ff: self.d_ff,
            heads: self.heads,
            vocab: self.vocab,
            ffn_kind: self.ffn_kind,
            max_seq: self.max_seq,
        }
    }

    pub fn resolved_lr(&self) -> f64 {
        self.lr.unwrap_or_else(|| RunConfig::desk_default(self.method, self.seed).lr)
    }

    pub fn resolved_epsilon(&self) -> f64 {
        self.epsilon.unwrap_or_else(|| RunConfig::desk_default(self.method, self.seed).epsilon)
    }

    pub fn run_config(&self) -> RunConfig {
        RunConfig {
            chunk_size: self.chunk_size,
            window: self.window,
            method: self.method,
            strategy: self.strategy,
            r: self.r,
            lr: self.resolved_lr(),
            steps_per_chunk: self.steps_per_chunk,
            seed: self.seed,
            checkpoint_every: self.checkpoint_every,
            epsilon: self.resolved_epsilon(),
            optimizer: match self.optimizer.as_str() {
                "sgd" => MemOptimizer::Sgd,
                "adam" => MemOptimizer::adam_default(),
                _ => RunConfig::desk_default(self.method, self.seed).optimizer,
            },
            reinit_per_chunk: self.reinit_per_chunk,
        }
    }

    pub fn cycle_policy(&self) -> CyclePolicy {
        CyclePolicy { n_capacity: self.n_capacity, n_target: self.n_target, cadence: self.cadence }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_config_text() {
        let mut s = Settings::default();
        s.r = 7;
        s.method = Method::LowRank;
        s.cadence = Cadence::PerToken;
        s.seed = 99;
        let text = s.to_config_text();
        let mut t = Settings::default();
        t.apply_config_text(&text).unwrap();
        assert_eq!(t.r, 7);
        assert_eq!(t.method, Method::LowRank);
        assert_eq!(t.cadence, Cadence::PerToken);
        assert_eq!(t.seed, 99);
        assert_eq!(t.to_config_text(), text);
    }

    #[test]
    fn unknown_keys_rejected() {
        let mut s = Settings::default();
        assert!(s.apply_config_text("[harness]\nbogus = 1\n").is_err());
        assert!(s.apply_config_text("[nonsense]\nr = 1\n").is_err());
        assert!(s.apply_config_text("r = 1\n").is_err(), "key before any section");
    }
}
