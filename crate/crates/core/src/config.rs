//! Experiment configuration: flat `key = value` files with `#` comments.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adversarial::AdversarialMode;
use crate::backbone::PretrainConfig;
use crate::cluster::{KMeansConfig, DEFAULT_K_MAX};
use crate::cmoe::{CategoryRepr, CmoeConfig};
use crate::data::{SplitFractions, SynthConfig, MAX_SEQ_LEN};
use crate::error::{AcktError, Result};
use crate::transfer::TransferConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Csv(PathBuf),
    Synthetic(SynthConfig),
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ablation {
    pub no_gan: bool,
    pub no_moe: bool,
    pub no_prefer: bool,
    pub no_gate: bool,
}

impl Ablation {
    pub const VARIANTS: [&'static str; 5] = ["full", "no_gan", "no_moe", "no_prefer", "no_gate"];

    /// A single named variant (`full` has no switches).
    pub fn named(name: &str) -> Result<Self> {
        let mut a = Ablation::default();
        match name {
            "full" => {}
            "no_gan" => a.no_gan = true,
            "no_moe" => a.no_moe = true,
            "no_prefer" => a.no_prefer = true,
            "no_gate" => a.no_gate = true,
            other => return Err(AcktError::Config(format!("unknown ablation `{other}`"))),
        }
        Ok(a)
    }

    pub fn label(&self) -> String {
        let on: Vec<&str> = [
            (self.no_gan, "no_gan"),
            (self.no_moe, "no_moe"),
            (self.no_prefer, "no_prefer"),
            (self.no_gate, "no_gate"),
        ]
        .iter()
        .filter(|(f, _)| *f)
        .map(|(_, n)| *n)
        .collect();
        if on.is_empty() {
            "full".into()
        } else {
            on.join("+")
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub data: DataSource,
    pub source: String,
    pub target: String,
    pub seed: u64,
    pub dim: usize,
    pub pretrain_epochs: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub dropout: f64,
    pub patience: usize,
    pub max_seq_len: usize,
    pub experts: usize,
    pub attention_dim: usize,
    pub n_samples: usize,
    pub lambda: f64,
    pub k_max: usize,
    pub splits: SplitFractions,
    pub ablation: Ablation,
    pub adversarial_mode: AdversarialMode,
    pub category_repr: CategoryRepr,
    pub freeze_source_embed: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            data: DataSource::Synthetic(SynthConfig::default()),
            source: "source".into(),
            target: "target".into(),
            seed: 0,
            dim: 64,
            pretrain_epochs: 100,
            epochs: 100,
            batch_size: 64,
            lr: 0.001,
            dropout: 0.2,
            patience: 10,
            max_seq_len: MAX_SEQ_LEN,
            experts: 24,
            attention_dim: 64,
            n_samples: 16,
            lambda: 200.0,
            k_max: DEFAULT_K_MAX,
            splits: SplitFractions::default(),
            ablation: Ablation::default(),
            adversarial_mode: AdversarialMode::Joint,
            category_repr: CategoryRepr::Centroid,
            freeze_source_embed: false,
        }
    }
}

pub const MAX_EPOCHS: usize = 100;

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| AcktError::Config(format!("`{key}`: cannot parse `{value}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(AcktError::Config(format!("`{key}`: expected true or false, got `{value}`"))),
    }
}

/// Independent stream seed derived from a run seed.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    /// Parses `key = value` lines over the defaults; unknown keys and
    /// conflicting data sources are errors.
    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut synth = SynthConfig::default();
        let mut synth_seed = None;
        let mut saw_synth = false;
        let mut csv: Option<PathBuf> = None;
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| AcktError::Config(format!("line {}: expected `key = value`", no + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if let Some(field) = key.strip_prefix("synth.") {
                saw_synth = true;
                if field == "seed" {
                    synth_seed = Some(parse(key, value)?);
                } else {
                    set_synth(&mut synth, field, key, value)?;
                }
                continue;
            }
            match key {
                "data" => csv = Some(PathBuf::from(value)),
                _ => cfg.set(key, value)?,
            }
        }
        match (csv, saw_synth) {
            (Some(_), true) => {
                return Err(AcktError::Config("both `data` and `synth.*` keys given; pick one data source".into()))
            }
            (Some(path), false) => cfg.data = DataSource::Csv(path),
            (None, _) => {
                synth.seed = synth_seed.unwrap_or(cfg.seed);
                cfg.data = DataSource::Synthetic(synth);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Sets one non-data key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "source" => self.source = value.to_string(),
            "target" => self.target = value.to_string(),
            "seed" => self.seed = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "pretrain_epochs" => self.pretrain_epochs = parse(key, value)?,
            "epochs" => self.epochs = parse(key, value)?,
            "batch_size" => self.batch_size = parse(key, value)?,
            "lr" => self.lr = parse(key, value)?,
            "dropout" => self.dropout = parse(key, value)?,
            "patience" => self.patience = parse(key, value)?,
            "max_seq_len" => self.max_seq_len = parse(key, value)?,
            "experts" => self.experts = parse(key, value)?,
            "attention_dim" => self.attention_dim = parse(key, value)?,
            "n_samples" => self.n_samples = parse(key, value)?,
            "lambda" => self.lambda = parse(key, value)?,
            "k_max" => self.k_max = parse(key, value)?,
            "overlap_frac" => self.splits.overlap = parse(key, value)?,
            "pretrain_frac" => self.splits.pretrain = parse(key, value)?,
            "validation_frac" => self.splits.validation = parse(key, value)?,
            "test_frac" => self.splits.test = parse(key, value)?,
            "no_gan" => self.ablation.no_gan = parse_bool(key, value)?,
            "no_moe" => self.ablation.no_moe = parse_bool(key, value)?,
            "no_prefer" => self.ablation.no_prefer = parse_bool(key, value)?,
            "no_gate" => self.ablation.no_gate = parse_bool(key, value)?,
            "adversarial_mode" => self.adversarial_mode = value.parse()?,
            "category_repr" => {
                self.category_repr = match value {
                    "centroid" => CategoryRepr::Centroid,
                    "learned" => CategoryRepr::Learned,
                    other => return Err(AcktError::Config(format!("unknown category_repr `{other}`"))),
                }
            }
            "freeze_source_embed" => self.freeze_source_embed = parse_bool(key, value)?,
            other => return Err(AcktError::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(AcktError::Config(msg));
        if self.dim == 0 || self.batch_size == 0 || self.attention_dim == 0 {
            return fail("dim, batch_size and attention_dim must be positive".into());
        }
        if self.epochs > MAX_EPOCHS || self.pretrain_epochs > MAX_EPOCHS {
            return fail(format!("epochs are capped at {MAX_EPOCHS}"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must be in [0,1), got {}", self.dropout));
        }
        if self.max_seq_len == 0 || self.max_seq_len > MAX_SEQ_LEN {
            return fail(format!("max_seq_len must be in [1,{MAX_SEQ_LEN}]"));
        }
        if self.experts == 0 || self.n_samples == 0 {
            return fail("experts and n_samples must be at least 1".into());
        }
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return fail(format!("lambda must be non-negative, got {}", self.lambda));
        }
        if self.k_max < 2 {
            return fail(format!("k_max must be at least 2, got {}", self.k_max));
        }
        if self.source == self.target {
            return fail("source and target disciplines must differ".into());
        }
        if let DataSource::Synthetic(s) = &self.data {
            s.validate()?;
        }
        Ok(())
    }

    /// `key = value` text that parses back to this configuration.
    pub fn to_config_string(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(out, "{k} = {v}");
        };
        match &self.data {
            DataSource::Csv(p) => kv("data", p.display().to_string()),
            DataSource::Synthetic(s) => {
                kv("synth.n_students", s.n_students.to_string());
                kv("synth.n_questions", s.n_questions.to_string());
                kv("synth.n_concepts", s.n_concepts.to_string());
                kv("synth.ability_dim", s.ability_dim.to_string());
                kv("synth.cross_corr", s.cross_corr.to_string());
                kv("synth.overlap_frac", s.overlap_frac.to_string());
                kv("synth.seq_len", s.seq_len.to_string());
                kv("synth.n_clusters", s.n_clusters.to_string());
                kv("synth.center_sd", s.center_sd.to_string());
                kv("synth.within_sd", s.within_sd.to_string());
                kv("synth.difficulty_sd", s.difficulty_sd.to_string());
                kv("synth.general_loading", s.general_loading.to_string());
                kv("synth.seed", s.seed.to_string());
            }
        }
        kv("source", self.source.clone());
        kv("target", self.target.clone());
        kv("seed", self.seed.to_string());
        kv("dim", self.dim.to_string());
        kv("pretrain_epochs", self.pretrain_epochs.to_string());
        kv("epochs", self.epochs.to_string());
        kv("batch_size", self.batch_size.to_string());
        kv("lr", self.lr.to_string());
        kv("dropout", self.dropout.to_string());
        kv("patience", self.patience.to_string());
        kv("max_seq_len", self.max_seq_len.to_string());
        kv("experts", self.experts.to_string());
        kv("attention_dim", self.attention_dim.to_string());
        kv("n_samples", self.n_samples.to_string());
        kv("lambda", self.lambda.to_string());
        kv("k_max", self.k_max.to_string());
        kv("overlap_frac", self.splits.overlap.to_string());
        kv("pretrain_frac", self.splits.pretrain.to_string());
        kv("validation_frac", self.splits.validation.to_string());
        kv("test_frac", self.splits.test.to_string());
        kv("no_gan", self.ablation.no_gan.to_string());
        kv("no_moe", self.ablation.no_moe.to_string());
        kv("no_prefer", self.ablation.no_prefer.to_string());
        kv("no_gate", self.ablation.no_gate.to_string());
        let mode = match self.adversarial_mode {
            AdversarialMode::Joint => "joint",
            AdversarialMode::Alternating => "alternating",
        };
        kv("adversarial_mode", mode.into());
        let repr = match self.category_repr {
            CategoryRepr::Centroid => "centroid",
            CategoryRepr::Learned => "learned",
        };
        kv("category_repr", repr.into());
        kv("freeze_source_embed", self.freeze_source_embed.to_string());
        out
    }

    pub fn pretrain_config(&self) -> PretrainConfig {
        PretrainConfig {
            epochs: self.pretrain_epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: self.dropout,
            patience: self.patience,
            max_seq_len: self.max_seq_len,
            dim: self.dim,
            seed: derive_seed(self.seed, 1),
        }
    }

    pub fn kmeans_config(&self) -> KMeansConfig {
        KMeansConfig {
            seed: derive_seed(self.seed, 2),
            ..KMeansConfig::default()
        }
    }

    /// Stage-2 settings with ablation switches applied.
    pub fn transfer_config(&self) -> TransferConfig {
        let a = self.ablation;
        TransferConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            dropout: self.dropout,
            patience: self.patience,
            lambda: if a.no_gan { 0.0 } else { self.lambda },
            n_samples: self.n_samples,
            mode: self.adversarial_mode,
            no_gan: a.no_gan,
            freeze_source_embed: self.freeze_source_embed,
            max_seq_len: self.max_seq_len,
            cmoe: CmoeConfig {
                experts: if a.no_moe { 1 } else { self.experts },
                attention_dim: self.attention_dim,
                category_repr: self.category_repr,
                no_prefer: a.no_prefer,
                no_gate: a.no_gate,
            },
            seed: derive_seed(self.seed, 3),
        }
    }
}

fn set_synth(s: &mut SynthConfig, field: &str, key: &str, value: &str) -> Result<()> {
    match field {
        "n_students" => s.n_students = parse(key, value)?,
        "n_questions" => s.n_questions = parse(key, value)?,
        "n_concepts" => s.n_concepts = parse(key, value)?,
        "ability_dim" => s.ability_dim = parse(key, value)?,
        "cross_corr" => s.cross_corr = parse(key, value)?,
        "overlap_frac" => s.overlap_frac = parse(key, value)?,
        "seq_len" => s.seq_len = parse(key, value)?,
        "n_clusters" => s.n_clusters = parse(key, value)?,
        "center_sd" => s.center_sd = parse(key, value)?,
        "within_sd" => s.within_sd = parse(key, value)?,
        "difficulty_sd" => s.difficulty_sd = parse(key, value)?,
        "general_loading" => s.general_loading = parse(key, value)?,
        _ => return Err(AcktError::Config(format!("unknown config key `{key}`"))),
    }
    Ok(())
}
