//! Subcommand implementations: wiring config + data + harness into the
//! fixed output layout `out/<run-name>/{manifest.json, checkpoints/,
//! metrics/, logs/}`.

use crate::config::{ConfigMap, DataSource, RunConfig};
use crate::manifest::Manifest;
use dca_core::checkpoint::{self, CheckpointData};
use dca_core::data::{load_idx, make_synthetic, Dataset, Standardizer};
use dca_core::error::{DcaError, Result};
use dca_core::harness::{
    analyze_members, evaluate_indomain, predict, run_ablations, run_ood, run_shift,
    train_method, train_methods, TrainedModel,
};
use dca_core::metrics::report;
use dca_core::model::Granularity;
use std::fs;
use std::path::{Path, PathBuf};

/// Exclusive marker guarding an output directory against concurrent runs.
/// Removed on drop.
pub struct DirLock {
    path: PathBuf,
}

impl DirLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(".lock");
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(DirLock { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => {
                Err(DcaError::Config(format!(
                    "output directory {} is locked by another run; remove {} if stale",
                    run_dir.display(),
                    path.display()
                )))
            }
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for DirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

pub struct RunDirs {
    pub root: PathBuf,
    pub checkpoints: PathBuf,
    pub metrics: PathBuf,
    pub logs: PathBuf,
    _lock: DirLock,
}

pub fn prepare_dirs(cfg: &RunConfig) -> Result<RunDirs> {
    let root = cfg.out_dir.join(&cfg.name);
    fs::create_dir_all(&root)?;
    let lock = DirLock::acquire(&root)?;
    let checkpoints = root.join("checkpoints");
    let metrics = root.join("metrics");
    let logs = root.join("logs");
    for d in [&checkpoints, &metrics, &logs] {
        fs::create_dir_all(d)?;
    }
    Ok(RunDirs { root, checkpoints, metrics, logs, _lock: lock })
}

/// Loaded, standardized train/test/OOD datasets.
pub struct LoadedData {
    pub train: Dataset,
    pub test: Dataset,
    pub ood_test: Dataset,
}

pub fn load_data(cfg: &mut RunConfig) -> Result<LoadedData> {
    let (train_raw, test_raw) = match &cfg.data {
        DataSource::Synthetic(spec) => make_synthetic(spec, cfg.seed)?,
        DataSource::Idx { train_images, train_labels, test_images, test_labels } => {
            let mut train = load_idx(train_images, train_labels)?;
            let mut test = load_idx(test_images, test_labels)?;
            test.split = dca_core::data::SplitTag::Test;
            // the model's input width comes from the file contents
            if cfg.model.input_dim == 0 {
                cfg.model.input_dim = train.dim;
            }
            if train.dim != cfg.model.input_dim || test.dim != train.dim {
                return Err(DcaError::Dimension(format!(
                    "IDX features {} do not match model.input_dim {}",
                    train.dim, cfg.model.input_dim
                )));
            }
            let classes = train.classes.max(test.classes).max(cfg.model.class_count);
            train.classes = classes;
            test.classes = classes;
            cfg.model.class_count = classes;
            (train, test)
        }
    };
    let (_, ood_raw) = make_synthetic(&cfg.ood_source, cfg.seed)?;
    if cfg.standardize {
        let st = Standardizer::fit(&train_raw);
        let ood_test = if ood_raw.dim == train_raw.dim {
            st.apply(&ood_raw)?
        } else {
            ood_raw
        };
        Ok(LoadedData { train: st.apply(&train_raw)?, test: st.apply(&test_raw)?, ood_test })
    } else {
        Ok(LoadedData { train: train_raw, test: test_raw, ood_test: ood_raw })
    }
}

fn new_manifest(command: &str, cfg: &RunConfig, map: &ConfigMap) -> Manifest {
    Manifest::new(command, cfg.seed, map.values().clone())
}

fn write_artifact(
    manifest: &mut Manifest,
    dirs: &RunDirs,
    path: &Path,
    bytes: &[u8],
) -> Result<()> {
    fs::write(path, bytes)?;
    manifest.record(&dirs.root, path)
}

pub fn cmd_train(map: &ConfigMap, cfg: &mut RunConfig) -> Result<()> {
    let dirs = prepare_dirs(cfg)?;
    let data = load_data(cfg)?;
    let mut manifest = new_manifest("train", cfg, map);
    let trained = train_method(&cfg.model, &cfg.method, &data.train, &cfg.train, cfg.seed)?;

    match &trained.model {
        TrainedModel::Single(params) => {
            let path = dirs.checkpoints.join("model.dca");
            let bytes = CheckpointData::from_single_model(params.clone()).encode();
            write_artifact(&mut manifest, &dirs, &path, &bytes)?;
        }
        TrainedModel::Ensemble(members) => {
            let path = dirs.checkpoints.join("ensemble.dca");
            let bytes = CheckpointData::from_ensemble(members.clone())?.encode();
            write_artifact(&mut manifest, &dirs, &path, &bytes)?;
        }
        TrainedModel::Bank(bank) => {
            let path = dirs.checkpoints.join("bank.dca");
            let bytes = CheckpointData::from_bank(bank).encode();
            write_artifact(&mut manifest, &dirs, &path, &bytes)?;
        }
        TrainedModel::Averaged { params, bank, coarse_grain_warning } => {
            let bank_path = dirs.checkpoints.join("bank.dca");
            write_artifact(&mut manifest, &dirs, &bank_path, &CheckpointData::from_bank(bank).encode())?;
            let avg_path = dirs.checkpoints.join("dcwa.dca");
            let bytes = CheckpointData::from_single_model(params.clone()).encode();
            write_artifact(&mut manifest, &dirs, &avg_path, &bytes)?;
            if *coarse_grain_warning {
                eprintln!(
                    "warning: DCWA over {} components is coarse-grain; averaged weights degrade",
                    trained
                        .method
                        .desc()
                        .granularity
                        .unwrap_or_default()
                );
            }
        }
    }

    for (i, log) in trained.logs.iter().enumerate() {
        let name = if trained.logs.len() == 1 {
            "train_log.csv".to_string()
        } else {
            format!("train_log_member_{}.csv", i)
        };
        // wall-time column varies run to run; logs are not hashed into the
        // manifest so manifest-replays stay bit-comparable
        fs::write(dirs.logs.join(name), log.to_csv())?;
    }

    manifest.write(&dirs.root)?;
    println!("trained {} into {}", trained.method.label(), dirs.root.display());
    Ok(())
}

/// Rebuild an evaluable model from a checkpoint, validating against the
/// configured architecture.
fn model_from_checkpoint(
    data: CheckpointData,
    cfg: &RunConfig,
) -> Result<TrainedModel> {
    if data.is_single_model() {
        let params = data.single_model()?;
        if params.len() != cfg.model.param_count() {
            return Err(DcaError::Dimension(format!(
                "checkpoint has {} parameters, model wants {}",
                params.len(),
                cfg.model.param_count()
            )));
        }
        return Ok(TrainedModel::Single(params));
    }
    if data.granularity == Granularity::Modelwise {
        // a modelwise checkpoint is an ensemble of full models
        let members = data.components.into_iter().next().unwrap();
        if members.iter().any(|m| m.len() != cfg.model.param_count()) {
            return Err(DcaError::Dimension(format!(
                "checkpoint member size does not match model ({} parameters)",
                cfg.model.param_count()
            )));
        }
        return Ok(TrainedModel::Ensemble(members));
    }
    Ok(TrainedModel::Bank(data.into_bank(&cfg.model, cfg.seed)?))
}

pub fn cmd_eval(map: &ConfigMap, cfg: &mut RunConfig) -> Result<()> {
    let checkpoint_path = cfg
        .eval_checkpoint
        .clone()
        .ok_or_else(|| DcaError::Config("eval needs eval.checkpoint = <path>".into()))?;
    let dirs = prepare_dirs(cfg)?;
    let data = load_data(cfg)?;
    let mut manifest = new_manifest("eval", cfg, map);

    let ckpt = checkpoint::load(&checkpoint_path)?;
    let model = model_from_checkpoint(ckpt, cfg)?;
    let batch = predict(&cfg.model, &model, &data.test, &cfg.eval, cfg.seed)?;
    let rep = report(&batch, cfg.eval.ece_bins)?;

    let json = serde_json::to_string_pretty(&rep)
        .map_err(|e| DcaError::Data(format!("report serialize: {}", e)))?;
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("metrics.json"), json.as_bytes())?;
    let (header, row) = rep.to_csv();
    write_artifact(
        &mut manifest,
        &dirs,
        &dirs.metrics.join("metrics.csv"),
        format!("{}\n{}\n", header, row).as_bytes(),
    )?;
    manifest.write(&dirs.root)?;
    println!(
        "eval of {}: accuracy {:.4}, nll {:.4}, ece {:.4}, brier {:.4}",
        checkpoint_path.display(),
        rep.accuracy,
        rep.nll,
        rep.ece,
        rep.brier
    );
    Ok(())
}

fn harness_cells(
    cfg: &RunConfig,
    data: &LoadedData,
) -> Result<Vec<dca_core::harness::TrainedMethod>> {
    let (trained, errors) =
        train_methods(&cfg.model, &cfg.harness_methods, &data.train, &cfg.train, &cfg.harness_seeds);
    for e in &errors {
        eprintln!("cell {:?} seed {}: {}", e.method, e.seed, e.error);
    }
    if trained.is_empty() {
        return Err(DcaError::Numeric("every harness cell failed to train".into()));
    }
    Ok(trained)
}

pub fn cmd_shift(map: &ConfigMap, cfg: &mut RunConfig) -> Result<()> {
    let dirs = prepare_dirs(cfg)?;
    let data = load_data(cfg)?;
    let mut manifest = new_manifest("shift", cfg, map);
    let trained = harness_cells(cfg, &data)?;

    let indomain = evaluate_indomain(&cfg.model, &trained, &data.test, &cfg.eval);
    let result = run_shift(
        &cfg.model,
        &trained,
        &data.test,
        &cfg.shift_kinds,
        &cfg.shift_severities,
        &cfg.eval,
        cfg.seed,
    );
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("indomain.csv"), indomain.to_csv().as_bytes())?;
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("shift.csv"), result.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| DcaError::Data(format!("shift serialize: {}", e)))?;
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("shift.json"), json.as_bytes())?;
    manifest.write(&dirs.root)?;
    println!("shift table: {} rows, {} errors", result.rows.len(), result.errors.len());
    Ok(())
}

pub fn cmd_ood(map: &ConfigMap, cfg: &mut RunConfig) -> Result<()> {
    let dirs = prepare_dirs(cfg)?;
    let data = load_data(cfg)?;
    let mut manifest = new_manifest("ood", cfg, map);
    let trained = harness_cells(cfg, &data)?;

    let result = run_ood(&cfg.model, &trained, &data.test, &data.ood_test, &cfg.eval);
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("ood.csv"), result.metrics_csv().as_bytes())?;
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("ood_roc.csv"), result.roc_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| DcaError::Data(format!("ood serialize: {}", e)))?;
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("ood.json"), json.as_bytes())?;
    manifest.write(&dirs.root)?;
    println!("ood table: {} rows, {} errors", result.rows.len(), result.errors.len());
    Ok(())
}

pub fn cmd_ablate(map: &ConfigMap, cfg: &mut RunConfig) -> Result<()> {
    let dirs = prepare_dirs(cfg)?;
    let data = load_data(cfg)?;
    let mut manifest = new_manifest("ablate", cfg, map);

    let result = run_ablations(
        &cfg.model,
        cfg.ablate_axis,
        &data.train,
        &data.test,
        &cfg.train,
        &cfg.eval,
        &cfg.harness_seeds,
        cfg.dca_n,
    );
    for e in &result.errors {
        eprintln!("cell {:?} seed {}: {}", e.method, e.seed, e.error);
    }
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("ablation.csv"), result.to_csv().as_bytes())?;
    let json = serde_json::to_string_pretty(&result)
        .map_err(|e| DcaError::Data(format!("ablation serialize: {}", e)))?;
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("ablation.json"), json.as_bytes())?;
    manifest.write(&dirs.root)?;
    println!(
        "ablation over {:?}: {} rows, {} errors",
        cfg.ablate_axis,
        result.rows.len(),
        result.errors.len()
    );
    Ok(())
}

pub fn cmd_diversity(map: &ConfigMap, cfg: &mut RunConfig) -> Result<()> {
    let dirs = prepare_dirs(cfg)?;
    let data = load_data(cfg)?;
    let mut manifest = new_manifest("diversity", cfg, map);

    // train modelwise banks under both losses at each seed and compare the
    // per-member behavior
    let mut analyses = Vec::new();
    for &seed in &cfg.harness_seeds {
        let mut nll_cfg = cfg.train.clone();
        nll_cfg.seed = seed;
        nll_cfg.loss = dca_core::trainer::LossKind::Nll;
        let mut nll_bank =
            dca_core::bank::DcaParameterBank::init(&cfg.model, Granularity::Modelwise, cfg.dca_n, seed)?;
        dca_core::trainer::train_dca(&mut nll_bank, &data.train, &nll_cfg)?;

        let mut cel_cfg = cfg.train.clone();
        cel_cfg.seed = seed;
        cel_cfg.loss = dca_core::trainer::LossKind::Cel;
        let mut cel_bank =
            dca_core::bank::DcaParameterBank::init(&cfg.model, Granularity::Modelwise, cfg.dca_n, seed)?;
        dca_core::trainer::train_dca(&mut cel_bank, &data.train, &cel_cfg)?;

        analyses.push(analyze_members(&cfg.model, &nll_bank, &cel_bank, &data.test, &cfg.eval, seed)?);
    }

    let mut csv = String::from("seed,loss,pairwise_kl,classwise_variance,js_divergence\n");
    for a in &analyses {
        for arm in [&a.nll, &a.cel] {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                a.seed,
                arm.loss,
                arm.diversity.pairwise_kl,
                arm.diversity.classwise_variance,
                arm.diversity.js_divergence
            ));
        }
    }
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("diversity.csv"), csv.as_bytes())?;
    let json = serde_json::to_string_pretty(&analyses)
        .map_err(|e| DcaError::Data(format!("diversity serialize: {}", e)))?;
    write_artifact(&mut manifest, &dirs, &dirs.metrics.join("diversity.json"), json.as_bytes())?;
    manifest.write(&dirs.root)?;
    println!("diversity analysis over {} seeds written", analyses.len());
    Ok(())
}

pub fn cmd_inspect(path: &Path) -> Result<()> {
    let bytes = fs::read(path)?;
    let header = checkpoint::inspect(&bytes)?;
    println!("checkpoint: {}", path.display());
    println!("  magic:            DCA1");
    println!("  version:          {}", header.version);
    println!("  granularity:      {}", header.granularity.as_str());
    println!("  instances (n):    {}", header.n);
    println!("  components:       {}", header.component_count);
    let preview: Vec<String> =
        header.component_slots.iter().take(8).map(|s| s.to_string()).collect();
    let suffix = if header.component_slots.len() > 8 { ", ..." } else { "" };
    println!("  component slots:  [{}{}]", preview.join(", "), suffix);
    let total: usize = header.component_slots.iter().sum();
    println!("  slots total:      {}", total);
    println!(
        "  crc32:            {:#010x} ({})",
        header.stored_crc,
        if header.crc_ok { "ok" } else { "MISMATCH" }
    );
    if !header.crc_ok {
        return Err(DcaError::Format(format!(
            "checkpoint CRC mismatch: stored {:#010x}, computed {:#010x}",
            header.stored_crc, header.computed_crc
        )));
    }
    Ok(())
}

/// A method needs n >= 2 before the bank code is ever reached; surface the
/// constraint as a config error up front.
pub fn preflight(cfg: &RunConfig) -> Result<()> {
    cfg.model.validate()?;
    cfg.train.validate()?;
    Ok(())
}
