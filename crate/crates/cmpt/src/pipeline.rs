//! The steps behind each command, operating on a run directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use cmpt_core::data::{apply_protocol, generate, Dataset, MissingProtocol, Sample};
use cmpt_core::encoder::Modality;
use cmpt_core::eval::{
    ablation_cell, attention_dump, evaluate, per_class_delta, sweep_point, sweep_points, AblationGrid, AblationSetup,
    SweepResult,
};
use cmpt_core::fusion::PresenceMask;
use cmpt_core::model::{gradcheck_model, randomize_adapters, CmptModel, Pretrained};
use cmpt_core::train::{pretrain_unimodal, train_cmpt, EpochLog, PretrainOutcome};

use crate::checkpoint;
use crate::config::RunConfig;
use crate::dataset_io;
use crate::error::{CliError, CliResult};
use crate::report::{Report, ReportBody};

/// File locations inside a run directory.
#[derive(Debug, Clone)]
pub struct RunPaths {
    pub root: PathBuf,
}

impl RunPaths {
    pub fn new(root: &Path) -> Self {
        Self { root: root.to_path_buf() }
    }

    pub fn dataset(&self) -> PathBuf {
        self.root.join("dataset")
    }

    pub fn pretrained(&self, m: Modality) -> PathBuf {
        self.root.join("pretrain").join(format!("{}.ckpt", m.name()))
    }

    pub fn model(&self) -> PathBuf {
        self.root.join("train").join("model.ckpt")
    }

    pub fn epoch_log(&self) -> PathBuf {
        self.root.join("train").join("epochs.jsonl")
    }

    pub fn reports(&self) -> PathBuf {
        self.root.join("reports")
    }
}

/// Runs `f(0..n)` on up to `jobs` threads and returns results in index
/// order; the first failing index decides the error.
pub fn parallel_map<T, F>(n: usize, jobs: usize, f: F) -> CliResult<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> CliResult<T> + Sync,
{
    let jobs = jobs.clamp(1, n.max(1));
    if jobs == 1 {
        return (0..n).map(f).collect();
    }
    let next = AtomicUsize::new(0);
    let slots: Mutex<Vec<Option<CliResult<T>>>> = Mutex::new((0..n).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..jobs {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                let r = f(i);
                slots.lock().expect("result lock")[i] = Some(r);
            });
        }
    });
    slots
        .into_inner()
        .expect("result lock")
        .into_iter()
        .map(|r| r.expect("every index ran"))
        .collect()
}

pub fn gen_data(cfg: &RunConfig) -> CliResult<Dataset> {
    let data = generate(&cfg.data)?;
    let dir = RunPaths::new(&cfg.out_dir).dataset();
    dataset_io::save_dataset(&dir, &data)?;
    log::info!("wrote dataset to {}", dir.display());
    Ok(data)
}

pub fn load_data(cfg: &RunConfig) -> CliResult<Dataset> {
    dataset_io::load_dataset(&RunPaths::new(&cfg.out_dir).dataset())
}

/// Pretrains both encoders on the complete training split.
pub fn pretrain_bases(cfg: &RunConfig, data: &Dataset) -> CliResult<[PretrainOutcome; 2]> {
    let run = |m: Modality| -> CliResult<PretrainOutcome> {
        let out = pretrain_unimodal(m, data, &cfg.model.encoder, &cfg.pretrain)?;
        log::info!("pretrained {} encoder, unimodal test accuracy {:.4}", m.name(), out.test_accuracy);
        Ok(out)
    };
    Ok([run(Modality::M1)?, run(Modality::M2)?])
}

pub fn pretrain(cfg: &RunConfig) -> CliResult<[PretrainOutcome; 2]> {
    let data = load_data(cfg)?;
    let outcomes = pretrain_bases(cfg, &data)?;
    let paths = RunPaths::new(&cfg.out_dir);
    for o in &outcomes {
        let path = paths.pretrained(o.encoder.modality);
        checkpoint::save_pretrained(&path, &o.encoder, cfg.pretrain.seed, cfg.pretrain.epochs)?;
        log::info!("wrote {}", path.display());
    }
    Ok(outcomes)
}

pub fn load_bases(cfg: &RunConfig) -> CliResult<[Pretrained; 2]> {
    let paths = RunPaths::new(&cfg.out_dir);
    let load = |m: Modality| {
        let path = paths.pretrained(m);
        if !path.exists() {
            return Err(CliError::Data(format!(
                "missing checkpoint {} (run pretrain first)",
                path.display()
            )));
        }
        checkpoint::load_pretrained(&path)
    };
    Ok([load(Modality::M1)?, load(Modality::M2)?])
}

/// The training split masked by the configured training protocol.
pub fn train_split(cfg: &RunConfig, data: &Dataset) -> CliResult<Vec<Sample>> {
    let (split, stats) = apply_protocol(&data.train, &cfg.protocols.train, cfg.seeds().train_protocol)?;
    log::info!(
        "training protocol {}: {} complete, {} m1-only, {} m2-only",
        cfg.protocols.train,
        stats.n_complete,
        stats.n_m1_only,
        stats.n_m2_only
    );
    Ok(split)
}

/// Builds a model from the bases and trains it; `on_epoch` sees each log.
pub fn train_model(
    cfg: &RunConfig,
    data: &Dataset,
    bases: [&Pretrained; 2],
    on_epoch: impl FnMut(&EpochLog),
) -> CliResult<(CmptModel, Vec<EpochLog>)> {
    let split = train_split(cfg, data)?;
    let mut model = CmptModel::from_pretrained(&cfg.model_spec(), bases, cfg.seeds().model)?;
    let logs = train_cmpt(&mut model, &split, &cfg.train, on_epoch)?;
    Ok((model, logs))
}

/// The `train` command: writes the checkpoint and a JSON line per epoch,
/// echoing each line to `sink`.
pub fn train(cfg: &RunConfig, sink: &mut dyn std::io::Write) -> CliResult<(CmptModel, Vec<EpochLog>)> {
    let data = load_data(cfg)?;
    let bases = load_bases(cfg)?;
    let paths = RunPaths::new(&cfg.out_dir);
    let log_path = paths.epoch_log();
    if let Some(dir) = log_path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    let mut lines = String::new();
    let mut sink_err = None;
    let (model, logs) = train_model(cfg, &data, [&bases[0], &bases[1]], |log| {
        let line = serde_json::to_string(log).expect("epoch log serializes");
        log::debug!("epoch {} total {:.5}", log.epoch, log.total);
        if let Err(e) = writeln!(sink, "{line}") {
            sink_err.get_or_insert(e);
        }
        lines.push_str(&line);
        lines.push('\n');
    })?;
    if let Some(e) = sink_err {
        return Err(CliError::io(Path::new("<stdout>"), e));
    }
    fs::write(&log_path, lines).map_err(|e| CliError::io(&log_path, e))?;
    let path = paths.model();
    checkpoint::save_model(&path, &model, cfg.seed, cfg.train.epochs)?;
    log::info!("wrote {}", path.display());
    Ok((model, logs))
}

pub fn load_trained(cfg: &RunConfig) -> CliResult<CmptModel> {
    let path = RunPaths::new(&cfg.out_dir).model();
    if !path.exists() {
        return Err(CliError::Data(format!("missing checkpoint {} (run train first)", path.display())));
    }
    Ok(checkpoint::load_model(&path)?.0)
}

/// Evaluates `model` under each protocol. With `compare`, per-class F1
/// deltas against that model under the first protocol are attached.
pub fn eval_report(
    cfg: &RunConfig,
    model: &CmptModel,
    test: &[Sample],
    protocols: &[MissingProtocol],
    compare: Option<&CmptModel>,
) -> CliResult<Report> {
    if protocols.is_empty() {
        return Err(CliError::Config("no evaluation protocols".into()));
    }
    let seed = cfg.seeds().eval;
    let results = protocols
        .iter()
        .map(|p| evaluate(model, test, p, seed).map_err(CliError::from))
        .collect::<CliResult<Vec<_>>>()?;
    let deltas = match compare {
        Some(other) => {
            let theirs = evaluate(other, test, &protocols[0], seed)?;
            Some(per_class_delta(&results[0], &theirs)?)
        }
        None => None,
    };
    let attention = if cfg.dump_attention {
        Some(
            test.iter()
                .take(4)
                .map(|s| attention_dump(model, s).map_err(CliError::from))
                .collect::<CliResult<Vec<_>>>()?,
        )
    } else {
        None
    };
    Ok(Report::new(
        cfg.seed,
        ReportBody::Eval {
            mode: model.arch.spec.mode,
            results,
            deltas,
            attention,
        },
    ))
}

pub fn sweep_report(cfg: &RunConfig, model: &CmptModel, test: &[Sample], jobs: usize) -> CliResult<Report> {
    let sweep = &cfg.protocols.sweep;
    let xs = sweep_points(&sweep.x_values)?;
    let seed = cfg.seeds().eval;
    let rows = parallel_map(xs.len(), jobs, |i| {
        sweep_point(model, test, sweep.varying, xs[i], seed).map_err(CliError::from)
    })?;
    Ok(Report::new(
        cfg.seed,
        ReportBody::Sweep {
            mode: model.arch.spec.mode,
            sweep: SweepResult {
                varying: sweep.varying,
                rows,
            },
        },
    ))
}

pub fn ablation_report(cfg: &RunConfig, data: &Dataset, bases: [&Pretrained; 2], jobs: usize) -> CliResult<Report> {
    let train = train_split(cfg, data)?;
    let setup = AblationSetup {
        spec: cfg.model_spec(),
        bases,
        train: &train,
        test: &data.test,
        train_cfg: cfg.train.clone(),
        model_seed: cfg.seeds().model,
        eval_seed: cfg.seeds().eval,
    };
    let axis = &cfg.ablation;
    let cells = parallel_map(axis.len(), jobs, |i| {
        log::info!("ablation cell {}={}", axis.name(), axis.label(i));
        ablation_cell(&setup, axis, i).map_err(CliError::from)
    })?;
    Ok(Report::new(
        cfg.seed,
        ReportBody::Ablation {
            grid: AblationGrid {
                axis: axis.clone(),
                cells,
            },
        },
    ))
}

/// Every frozen tensor contributes each `FROZEN_STRIDE`-th coordinate to the
/// gradient check; adapters, proxy tokens and the head contribute all of them.
pub const FROZEN_STRIDE: usize = 23;

/// Finite-difference check of the full model on two samples drawn from the
/// configured generator. Every tensor is unfrozen so gradients reach the
/// encoders too; returns the largest relative error.
pub fn gradcheck(cfg: &RunConfig) -> CliResult<f64> {
    let mut data_cfg = cfg.data.clone();
    data_cfg.train_size = 2;
    data_cfg.val_size = 0;
    data_cfg.test_size = 1;
    let data = generate(&data_cfg)?;
    let mut model = CmptModel::build(&cfg.model_spec(), cfg.seeds().model)?;
    randomize_adapters(&mut model, cfg.seed, 0.1);
    let trainable: Vec<String> = model
        .store
        .iter()
        .filter(|(_, p)| p.trainable)
        .map(|(_, p)| p.name.clone())
        .collect();
    let ids: Vec<_> = model.store.ids().collect();
    for id in ids {
        model.store.set_trainable(id, true);
    }
    let batch = [
        (&data.train[0], PresenceMask::M2_ONLY),
        (&data.train[1], PresenceMask::BOTH),
    ];
    let report = gradcheck_model(&mut model, &batch, cfg.train.lambda, 1e-6, |name, i| {
        i % FROZEN_STRIDE == 0 || trainable.iter().any(|t| t == name)
    })?;
    log::info!(
        "checked {} coordinates, worst at {:?}",
        report.coordinates,
        report.worst
    );
    Ok(report.max_rel_error)
}
