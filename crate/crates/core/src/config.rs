//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]`
//! and `[eval]` sections that fully determines a run.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{LabeledAmount, SplitSpec};
use crate::error::{ensure, EvilError, Result};
use crate::eval::EmptyMaskPolicy;
use crate::nn::BackboneConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrainMode {
    /// Joint E-Net/S-Net training with cross supervision on unlabeled data.
    Evil,
    /// S-Net alone on the labeled data, the baseline.
    SupervisedOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Directory with `slices/`, list files and `splits/`.
    pub root: PathBuf,
    /// Working slice size; slices are resized on load.
    pub size: usize,
    pub labeled_ratio: f64,
    /// Overrides `labeled_ratio` when nonzero.
    pub labeled_patients: usize,
    pub split_seed: u64,
    pub train_list: String,
    pub val_list: String,
    pub test_list: String,
    pub augment: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub mode: TrainMode,
    pub total_iters: u64,
    pub batch_labeled: usize,
    pub batch_unlabeled: usize,
    #[serde(rename = "learning_rate")]
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub lam_max: f64,
    /// Weight of the certain-part dice term in the E-Net loss.
    pub gamma: f64,
    pub t_mask: f64,
    pub seed_enet: u64,
    pub seed_snet: u64,
    /// Seeds batch order and augmentation draws.
    pub data_seed: u64,
    pub eval_every: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    pub empty_mask: EmptyMaskPolicy,
    pub mc_rate: f64,
    pub mc_seed: u64,
    pub boundary_radius: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: BackboneConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

/// Named starting points for a config file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// Synthetic 64x64 slices, 2000 iterations, batch 4 + 4.
    Desk,
    /// Reduced synthetic run used by the automated acceptance suite.
    Acceptance,
    /// ACDC slices at 256x256, 30000 iterations, batch 12 + 12.
    FullScale,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Desk, Preset::Acceptance, Preset::FullScale];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Acceptance => "acceptance",
            Preset::FullScale => "full-scale",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| {
                let names: Vec<_> = Self::ALL.iter().map(|p| p.name()).collect();
                EvilError::Config(format!("unknown preset `{name}`, expected one of {}", names.join(", ")))
            })
    }
}

impl RunConfig {
    pub fn preset(p: Preset) -> Self {
        let mut cfg = RunConfig {
            data: DataConfig {
                root: PathBuf::from("data/synthetic"),
                size: 64,
                labeled_ratio: 0.10,
                labeled_patients: 0,
                split_seed: 0,
                train_list: "train.list".into(),
                val_list: "val.list".into(),
                test_list: "test.list".into(),
                augment: true,
            },
            model: BackboneConfig::default(),
            train: TrainConfig {
                mode: TrainMode::Evil,
                total_iters: 2000,
                batch_labeled: 4,
                batch_unlabeled: 4,
                lr0: 0.01,
                momentum: 0.9,
                weight_decay: 1e-4,
                lam_max: 0.1,
                gamma: 1.0,
                t_mask: 0.2,
                seed_enet: 1,
                seed_snet: 2,
                data_seed: 0,
                eval_every: 200,
            },
            eval: EvalConfig {
                empty_mask: EmptyMaskPolicy::Skip,
                mc_rate: 0.5,
                mc_seed: 0,
                boundary_radius: 2,
            },
        };
        match p {
            Preset::Desk => {}
            Preset::Acceptance => {
                cfg.data.size = 32;
                cfg.model.base_width = 8;
                cfg.model.depth = 3;
                cfg.train.total_iters = 1200;
                cfg.train.eval_every = 200;
            }
            Preset::FullScale => {
                cfg.data.root = PathBuf::from("data/ACDC");
                cfg.data.size = 256;
                cfg.train.total_iters = 30000;
                cfg.train.batch_labeled = 12;
                cfg.train.batch_unlabeled = 12;
                cfg.train.eval_every = 1000;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let t = &self.train;
        ensure!(t.total_iters > 0, Config, "train.total_iters must be positive");
        ensure!(t.batch_labeled >= 1, Config, "train.batch_labeled must be at least 1");
        ensure!(t.batch_unlabeled >= 1, Config, "train.batch_unlabeled must be at least 1");
        ensure!(t.lr0 > 0.0 && t.lr0.is_finite(), Config, "train.learning_rate must be positive");
        ensure!((0.0..1.0).contains(&t.momentum), Config, "train.momentum must lie in [0, 1)");
        ensure!(t.weight_decay >= 0.0, Config, "train.weight_decay must be nonnegative");
        ensure!(t.lam_max >= 0.0, Config, "train.lam_max must be nonnegative");
        ensure!(t.gamma >= 0.0, Config, "train.gamma must be nonnegative");
        ensure!(t.t_mask > 0.0 && t.t_mask <= 1.0, Config, "train.t_mask must lie in (0, 1]");
        ensure!(
            t.seed_enet != t.seed_snet,
            Config,
            "train.seed_enet and train.seed_snet must differ"
        );
        ensure!(t.eval_every >= 1, Config, "train.eval_every must be at least 1");
        let d = &self.data;
        ensure!(
            d.size > 0 && d.size % self.model.size_multiple() == 0,
            Config,
            "data.size {} must be divisible by 2^depth = {}",
            d.size,
            self.model.size_multiple()
        );
        if d.labeled_patients == 0 {
            ensure!(
                d.labeled_ratio > 0.0 && d.labeled_ratio <= 1.0,
                Config,
                "data.labeled_ratio must lie in (0, 1]"
            );
        }
        let e = &self.eval;
        ensure!(e.mc_rate > 0.0 && e.mc_rate < 1.0, Config, "eval.mc_rate must lie in (0, 1)");
        Ok(())
    }

    pub fn split_spec(&self) -> SplitSpec {
        let labeled = if self.data.labeled_patients > 0 {
            LabeledAmount::Patients(self.data.labeled_patients)
        } else {
            LabeledAmount::Ratio(self.data.labeled_ratio)
        };
        SplitSpec {
            labeled,
            seed: self.data.split_seed,
        }
    }

    /// Parses and validates; unknown keys are all reported at once, each
    /// with the closest valid key.
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let table: toml::Table = text
            .parse()
            .map_err(|e: toml::de::Error| EvilError::Config(e.message().to_string()))?;
        let reference = toml::Table::try_from(RunConfig::preset(Preset::Desk)).expect("config serializes");
        let mut problems = Vec::new();
        unknown_keys(&table, &reference, "", &mut problems);
        ensure!(problems.is_empty(), Config, "{}", problems.join("; "));
        let cfg: RunConfig = table
            .try_into()
            .map_err(|e: toml::de::Error| EvilError::Config(e.message().trim().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| EvilError::io(path, e))?;
        Self::from_toml_str(&text).map_err(|e| match e {
            EvilError::Config(m) => EvilError::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Applies a `section.key=value` override, as used by command-line flags.
    pub fn set(&mut self, assignment: &str) -> Result<()> {
        let (key, value) = assignment
            .split_once('=')
            .ok_or_else(|| EvilError::Config(format!("expected section.key=value, got `{assignment}`")))?;
        let (section, field) = key
            .trim()
            .split_once('.')
            .ok_or_else(|| EvilError::Config(format!("key `{key}` must be of the form section.key")))?;
        let value: toml::Value = format!("v = {}", value.trim())
            .parse::<toml::Table>()
            .ok()
            .and_then(|mut t| t.remove("v"))
            .unwrap_or_else(|| toml::Value::String(value.trim().to_string()));
        let mut table = toml::Table::try_from(&*self).expect("config serializes");
        let sec = table
            .entry(section.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        if let toml::Value::Table(t) = sec {
            t.insert(field.to_string(), value);
        }
        *self = Self::from_toml_str(&toml::to_string(&table).expect("table serializes"))?;
        Ok(())
    }
}

fn unknown_keys(table: &toml::Table, reference: &toml::Table, prefix: &str, out: &mut Vec<String>) {
    for (key, value) in table {
        let path = format!("{prefix}{key}");
        match reference.get(key) {
            Some(toml::Value::Table(sub)) => {
                if let toml::Value::Table(given) = value {
                    unknown_keys(given, sub, &format!("{path}."), out);
                }
            }
            Some(_) => {}
            None => {
                let nearest = reference
                    .keys()
                    .max_by(|a, b| {
                        strsim::jaro_winkler(key, a)
                            .total_cmp(&strsim::jaro_winkler(key, b))
                            .then(b.cmp(a))
                    })
                    .map(|k| format!(" (did you mean `{prefix}{k}`?)"))
                    .unwrap_or_default();
                out.push(format!("unknown key `{path}`{nearest}"));
            }
        }
    }
}
