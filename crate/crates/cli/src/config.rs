//! Flat `key = value` config files with `#` comments and dotted section
//! keys, plus command-line overrides. Parsing is strict: every key must be
//! recognized by the command that consumes the file.

use dca_core::data::{CorruptionKind, SyntheticSpec};
use dca_core::error::{DcaError, Result};
use dca_core::harness::{AblationAxis, AggregationKind, EvalConfig, Method};
use dca_core::metrics::OodScoreKind;
use dca_core::model::{Granularity, ModelSpec};
use dca_core::trainer::{LossKind, LrSchedule, TrainConfig};
use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

/// Raw key-value view of a config file, tracking which keys were consumed.
#[derive(Debug, Clone)]
pub struct ConfigMap {
    values: BTreeMap<String, String>,
    consumed: RefCell<BTreeSet<String>>,
}

impl ConfigMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut values = BTreeMap::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                DcaError::Config(format!(
                    "line {}: expected 'key = value', got '{}'",
                    lineno + 1,
                    line
                ))
            })?;
            let key = key.trim();
            if key.is_empty() {
                return Err(DcaError::Config(format!("line {}: empty key", lineno + 1)));
            }
            if values.insert(key.to_string(), value.trim().to_string()).is_some() {
                return Err(DcaError::Config(format!(
                    "line {}: duplicate key '{}'",
                    lineno + 1,
                    key
                )));
            }
        }
        Ok(ConfigMap { values, consumed: RefCell::new(BTreeSet::new()) })
    }

    /// Load from a config file, or from the `config` object of a previously
    /// written manifest.json (detected by a leading `{`).
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| DcaError::Config(format!("cannot read config {}: {}", path.display(), e)))?;
        if text.trim_start().starts_with('{') {
            let manifest: serde_json::Value = serde_json::from_str(&text)
                .map_err(|e| DcaError::Config(format!("bad manifest JSON: {}", e)))?;
            let obj = manifest
                .get("config")
                .and_then(|c| c.as_object())
                .ok_or_else(|| DcaError::Config("manifest has no config object".into()))?;
            let mut values = BTreeMap::new();
            for (k, v) in obj {
                let s = v
                    .as_str()
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| v.to_string());
                values.insert(k.clone(), s);
            }
            return Ok(ConfigMap { values, consumed: RefCell::new(BTreeSet::new()) });
        }
        Self::parse(&text)
    }

    /// Apply `key=value` command-line overrides on top of the file values.
    pub fn apply_overrides(&mut self, overrides: &[String]) -> Result<()> {
        for item in overrides {
            let (key, value) = item.split_once('=').ok_or_else(|| {
                DcaError::Config(format!("override '{}' is not key=value", item))
            })?;
            self.values.insert(key.trim().to_string(), value.trim().to_string());
        }
        Ok(())
    }

    /// Seed override of last resort: applies the DCA_SEED environment
    /// variable unless an explicit `seed=` override was given.
    pub fn apply_env_seed(&mut self, explicit_overrides: &[String]) -> Result<()> {
        let overridden = explicit_overrides.iter().any(|o| {
            o.split_once('=').map(|(k, _)| k.trim() == "seed").unwrap_or(false)
        });
        if overridden {
            return Ok(());
        }
        if let Ok(v) = std::env::var("DCA_SEED") {
            v.parse::<u64>().map_err(|_| {
                DcaError::Config(format!("DCA_SEED must be an integer, got '{}'", v))
            })?;
            self.values.insert("seed".to_string(), v);
        }
        Ok(())
    }

    pub fn values(&self) -> &BTreeMap<String, String> {
        &self.values
    }

    fn raw(&self, key: &str) -> Option<&str> {
        let v = self.values.get(key).map(|s| s.as_str());
        if v.is_some() {
            self.consumed.borrow_mut().insert(key.to_string());
        }
        v
    }

    pub fn get_str(&self, key: &str, default: &str) -> String {
        self.raw(key).unwrap_or(default).to_string()
    }

    pub fn get_opt_str(&self, key: &str) -> Option<String> {
        self.raw(key).map(|s| s.to_string())
    }

    pub fn get_parsed<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T> {
        match self.raw(key) {
            None => Ok(default),
            Some(s) => s.parse::<T>().map_err(|_| {
                DcaError::Config(format!(
                    "key '{}': cannot parse '{}' as {}",
                    key,
                    s,
                    std::any::type_name::<T>()
                ))
            }),
        }
    }

    pub fn get_bool(&self, key: &str, default: bool) -> Result<bool> {
        match self.raw(key) {
            None => Ok(default),
            Some("true") => Ok(true),
            Some("false") => Ok(false),
            Some(other) => Err(DcaError::Config(format!(
                "key '{}': expected true/false, got '{}'",
                key, other
            ))),
        }
    }

    pub fn get_list<T: std::str::FromStr>(&self, key: &str, default: &[T]) -> Result<Vec<T>>
    where
        T: Clone,
    {
        match self.raw(key) {
            None => Ok(default.to_vec()),
            Some(s) => s
                .split(',')
                .map(|item| {
                    item.trim().parse::<T>().map_err(|_| {
                        DcaError::Config(format!("key '{}': cannot parse item '{}'", key, item))
                    })
                })
                .collect(),
        }
    }

    /// Fails if any key in the file was never consumed by the command.
    pub fn reject_unknown(&self) -> Result<()> {
        let consumed = self.consumed.borrow();
        let unknown: Vec<&String> =
            self.values.keys().filter(|k| !consumed.contains(*k)).collect();
        if unknown.is_empty() {
            Ok(())
        } else {
            Err(DcaError::Config(format!(
                "unknown config key(s): {}",
                unknown.iter().map(|s| s.as_str()).collect::<Vec<_>>().join(", ")
            )))
        }
    }
}

/// Where a run's datasets come from.
#[derive(Debug, Clone)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    Idx {
        train_images: PathBuf,
        train_labels: PathBuf,
        test_images: PathBuf,
        test_labels: PathBuf,
    },
}

/// Fully resolved run configuration shared by the run-style subcommands.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub name: String,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub data: DataSource,
    pub standardize: bool,
    pub model: ModelSpec,
    pub method: Method,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub eval_checkpoint: Option<PathBuf>,
    pub ood_source: SyntheticSpec,
    pub shift_kinds: Vec<CorruptionKind>,
    pub shift_severities: Vec<usize>,
    pub ablate_axis: AblationAxis,
    pub harness_methods: Vec<Method>,
    pub harness_seeds: Vec<u64>,
    pub dca_n: usize,
    pub granularity: Granularity,
}

fn parse_method(map: &ConfigMap, granularity: Granularity, loss: LossKind, n: usize) -> Result<Method> {
    let name = map.get_str("method", "dca");
    method_from_name(&name, granularity, loss, n)
}

fn method_from_name(name: &str, granularity: Granularity, loss: LossKind, n: usize) -> Result<Method> {
    match name {
        "standard" => Ok(Method::Standard),
        "deep_ensemble" => Ok(Method::DeepEnsemble { n }),
        "dca" => Ok(Method::Dca { granularity, loss, n }),
        "dcwa" => Ok(Method::Dcwa { granularity, loss, n }),
        other => Err(DcaError::Config(format!("unknown method '{}'", other))),
    }
}

pub fn resolve(map: &ConfigMap) -> Result<RunConfig> {
    let name = map.get_str("run.name", "run");
    let out_dir = PathBuf::from(map.get_str("run.out_dir", "out"));
    let seed: u64 = map.get_parsed("seed", 0)?;

    let classes: usize = map.get_parsed("data.classes", 4)?;
    let data_kind = map.get_str("data.kind", "gaussian_clusters");
    let data = match data_kind.as_str() {
        "gaussian_clusters" => DataSource::Synthetic(SyntheticSpec::GaussianClusters {
            classes,
            per_class_train: map.get_parsed("data.per_class_train", 200)?,
            per_class_test: map.get_parsed("data.per_class_test", 250)?,
            noise: map.get_parsed("data.noise", 1.0)?,
        }),
        "two_spirals" => DataSource::Synthetic(SyntheticSpec::TwoSpirals {
            per_class_train: map.get_parsed("data.per_class_train", 200)?,
            per_class_test: map.get_parsed("data.per_class_test", 250)?,
            noise: map.get_parsed("data.noise", 0.05)?,
        }),
        "ring_uniform" => DataSource::Synthetic(SyntheticSpec::RingUniform {
            classes,
            samples_train: map.get_parsed("data.samples_train", 400)?,
            samples_test: map.get_parsed("data.samples_test", 400)?,
            inner: map.get_parsed("data.inner", 0.0)?,
            outer: map.get_parsed("data.outer", 0.8)?,
        }),
        "idx" => {
            let need = |key: &str| -> Result<PathBuf> {
                map.get_opt_str(key)
                    .map(PathBuf::from)
                    .ok_or_else(|| DcaError::Config(format!("data.kind=idx requires {}", key)))
            };
            DataSource::Idx {
                train_images: need("data.train_images")?,
                train_labels: need("data.train_labels")?,
                test_images: need("data.test_images")?,
                test_labels: need("data.test_labels")?,
            }
        }
        other => return Err(DcaError::Config(format!("unknown data.kind '{}'", other))),
    };
    let standardize = map.get_bool("data.standardize", true)?;

    let input_dim = match &data {
        DataSource::Synthetic(_) => 2,
        // resolved after loading; placeholder validated at load time
        DataSource::Idx { .. } => map.get_parsed("model.input_dim", 0)?,
    };
    let model = ModelSpec {
        input_dim,
        class_count: classes,
        hidden_width: map.get_parsed("model.width", 32)?,
        trunks: map.get_list("model.trunks", &[2usize, 2])?,
    };

    let loss = LossKind::parse(&map.get_str("train.loss", "cel"))?;
    let schedule = match map.get_str("train.lr_schedule", "step").as_str() {
        "constant" => LrSchedule::Constant,
        "step" => LrSchedule::StepDecay {
            milestones: map.get_list("train.lr_milestones", &[0.5, 0.75])?,
            factor: map.get_parsed("train.lr_decay_factor", 0.1)?,
        },
        other => {
            return Err(DcaError::Config(format!(
                "train.lr_schedule must be step or constant, got '{}'",
                other
            )))
        }
    };
    let inner_passes = match map.get_opt_str("train.inner_passes") {
        None => None,
        Some(s) => Some(s.parse::<usize>().map_err(|_| {
            DcaError::Config(format!("train.inner_passes: cannot parse '{}'", s))
        })?),
    };
    let train = TrainConfig {
        base_epochs: map.get_parsed("train.base_epochs", 40)?,
        lr: map.get_parsed("train.lr", 0.05)?,
        momentum: map.get_parsed("train.momentum", 0.9)?,
        batch_size: map.get_parsed("train.batch_size", 32)?,
        loss,
        inner_passes,
        kl_weight: map.get_parsed("train.kl_weight", 1.0)?,
        lr_schedule: schedule,
        average_gradients: map.get_bool("train.average_gradients", true)?,
        seed,
    };

    let granularity = Granularity::parse(&map.get_str("dca.granularity", "modelwise"))?;
    let dca_n: usize = map.get_parsed("dca.n", 5)?;
    let method = parse_method(map, granularity, loss, dca_n)?;
    if matches!(method, Method::Dca { .. } | Method::Dcwa { .. }) && dca_n < 2 {
        return Err(DcaError::Config(format!(
            "dca.n = {} but DCA needs n >= 2 component instances",
            dca_n
        )));
    }

    let score = match map.get_str("eval.score", "max_prob").as_str() {
        "max_prob" => OodScoreKind::MaxProb,
        "neg_entropy" => OodScoreKind::NegEntropy,
        other => return Err(DcaError::Config(format!("unknown eval.score '{}'", other))),
    };
    let aggregate = match map.get_str("eval.aggregate", "probs").as_str() {
        "probs" => AggregationKind::Probs,
        "logits" => AggregationKind::Logits,
        other => return Err(DcaError::Config(format!("unknown eval.aggregate '{}'", other))),
    };
    let eval = EvalConfig {
        proposals: map.get_parsed("eval.proposals", 30)?,
        ece_bins: map.get_parsed("eval.ece_bins", 15)?,
        score,
        aggregate,
    };
    let eval_checkpoint = map.get_opt_str("eval.checkpoint").map(PathBuf::from);

    let ood_source = SyntheticSpec::RingUniform {
        classes,
        samples_train: 16,
        samples_test: map.get_parsed("ood.samples", 1000)?,
        inner: map.get_parsed("ood.inner", 0.0)?,
        outer: map.get_parsed("ood.outer", 0.8)?,
    };

    let shift_kind_names: Vec<String> = map.get_list(
        "shift.kinds",
        &[
            "gaussian_noise".to_string(),
            "input_blur".to_string(),
            "pixel_dropout".to_string(),
        ],
    )?;
    let shift_kinds: Result<Vec<CorruptionKind>> =
        shift_kind_names.iter().map(|s| CorruptionKind::parse(s)).collect();
    let shift_severities: Vec<usize> =
        map.get_list("shift.severities", &[0usize, 1, 2, 3, 4, 5])?;
    if let Some(&bad) = shift_severities.iter().find(|&&s| s > 5) {
        return Err(DcaError::Config(format!("shift severity {} outside [0, 5]", bad)));
    }

    let ablate_axis = AblationAxis::parse(&map.get_str("ablate.axis", "granularity"))?;

    let method_names: Vec<String> = map.get_list(
        "harness.methods",
        &[
            "standard".to_string(),
            "deep_ensemble".to_string(),
            "dca".to_string(),
            "dcwa".to_string(),
        ],
    )?;
    let harness_methods: Result<Vec<Method>> = method_names
        .iter()
        .map(|name| match name.as_str() {
            "dcwa" => method_from_name(name, Granularity::Layerwise, loss, dca_n),
            _ => method_from_name(name, granularity, loss, dca_n),
        })
        .collect();
    let harness_seeds: Vec<u64> = map.get_list("harness.seeds", &[101u64, 102, 103, 104, 105])?;
    if harness_seeds.is_empty() {
        return Err(DcaError::Config("harness.seeds must name at least one seed".into()));
    }

    Ok(RunConfig {
        name,
        out_dir,
        seed,
        data,
        standardize,
        model,
        method,
        train,
        eval,
        eval_checkpoint,
        ood_source,
        shift_kinds: shift_kinds?,
        shift_severities,
        ablate_axis,
        harness_methods: harness_methods?,
        harness_seeds,
        dca_n,
        granularity,
    })
}
