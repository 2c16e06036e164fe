//! Stage training loop, metric ledger and the run driver used by the CLI.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::{Precision, RunConfig, Split, TrainConfig};
use crate::error::{Error, Result};
use crate::evg::PathwayTerms;
use crate::model::GamsiModel;
use crate::objective::{batch_objective, evaluate_loss, Example, LossReport, ObjectiveConfig};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::synth::{generate, mix_seed, SynthSample};

pub const METRICS_HEADER: [&str; 10] = [
    "step", "stage", "L_LM", "L_MSE_m", "L_CL_m", "L_MSE_s", "L_CL_s", "L_Align", "L_total", "ans_acc",
];

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub stage: u8,
    pub report: LossReport,
}

/// One parsed CSV row; pathway columns are empty for absent pathways.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub stage: u8,
    #[serde(rename = "L_LM")]
    pub l_lm: f64,
    #[serde(rename = "L_MSE_m")]
    pub l_mse_m: Option<f64>,
    #[serde(rename = "L_CL_m")]
    pub l_cl_m: Option<f64>,
    #[serde(rename = "L_MSE_s")]
    pub l_mse_s: Option<f64>,
    #[serde(rename = "L_CL_s")]
    pub l_cl_s: Option<f64>,
    #[serde(rename = "L_Align")]
    pub l_align: f64,
    #[serde(rename = "L_total")]
    pub l_total: f64,
    pub ans_acc: f64,
}

impl From<&StepRecord> for MetricsRow {
    fn from(r: &StepRecord) -> Self {
        let m = r.report.metric;
        let s = r.report.structural;
        Self {
            step: r.step,
            stage: r.stage,
            l_lm: r.report.l_lm,
            l_mse_m: m.map(|t| t.mse),
            l_cl_m: m.map(|t| t.cl),
            l_mse_s: s.map(|t| t.mse),
            l_cl_s: s.map(|t| t.cl),
            l_align: r.report.l_align,
            l_total: r.report.l_total,
            ans_acc: r.report.ans_acc,
        }
    }
}

/// Append-only CSV of per-step losses.
pub struct MetricsLog<W: Write> {
    writer: csv::Writer<W>,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(inner: W, header: bool) -> Result<Self> {
        let mut writer = csv::WriterBuilder::new().has_headers(false).from_writer(inner);
        if header {
            writer.write_record(METRICS_HEADER)?;
        }
        Ok(Self { writer })
    }

    pub fn append(&mut self, r: &StepRecord) -> Result<()> {
        self.writer.serialize(MetricsRow::from(r))?;
        Ok(())
    }

    pub fn flush(&mut self) -> Result<()> {
        self.writer.flush()?;
        Ok(())
    }
}

impl MetricsLog<File> {
    /// Opens `path` for appending, writing the header only to a new file.
    pub fn open(path: &Path) -> Result<Self> {
        let fresh = !path.exists() || std::fs::metadata(path)?.len() == 0;
        let f = OpenOptions::new().create(true).append(true).open(path)?;
        Self::new(f, fresh)
    }
}

pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let header: Vec<String> = r.headers()?.iter().map(String::from).collect();
    if header != METRICS_HEADER {
        return Err(Error::Compat(format!("unexpected metrics header {header:?}")));
    }
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

fn objective(cfg: &TrainConfig, joint_negatives: bool) -> ObjectiveConfig {
    ObjectiveConfig {
        lambda: cfg.lambda,
        align: cfg.align,
        joint_negatives,
    }
}

fn breakdown(r: &LossReport) -> String {
    let t = |p: Option<PathwayTerms>| p.map_or("-".to_string(), |t| format!("{}/{}", t.mse, t.cl));
    format!(
        "L_LM={} metric(mse/cl)={} structural(mse/cl)={} L_Align={} L_total={}",
        r.l_lm,
        t(r.metric),
        t(r.structural),
        r.l_align,
        r.l_total
    )
}

/// Runs `cfg.epochs` epochs of shuffled minibatch AdamW over `data`.
/// `on_step` sees every record as it is produced.
pub fn train_stage<T: Scalar>(
    model: &mut GamsiModel<T>,
    opt: &mut AdamW<T>,
    cfg: &TrainConfig,
    stage: u8,
    data: &[Example<T>],
    mut on_step: impl FnMut(&StepRecord) -> Result<()>,
) -> Result<Vec<StepRecord>> {
    cfg.validate()?;
    if data.is_empty() && cfg.epochs > 0 {
        return Err(Error::Contract("training data is empty".into()));
    }
    opt.config.lr = cfg.learning_rate;
    opt.config.weight_decay = cfg.weight_decay;
    let obj = objective(cfg, model.config().heads.joint_negatives);
    let mut records = Vec::new();
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(cfg.seed, epoch as u64));
        order.sort_unstable();
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&Example<T>> = chunk.iter().map(|&i| &data[i]).collect();
            let step = opt.step + 1;
            model.store.zero_grad();
            let (report, grads) =
                batch_objective(&model.arch, &model.store, &batch, obj, true).map_err(|e| match e {
                    Error::Numeric(_) | Error::NonFiniteActivation { .. } => Error::Numeric(format!(
                        "{e} at step {step}; previous step: {}",
                        records.last().map_or("none".into(), |r: &StepRecord| breakdown(&r.report))
                    )),
                    e => e,
                })?;
            if !report.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss at step {step}: {}",
                    breakdown(&report)
                )));
            }
            for g in &grads {
                model.store.accumulate(g);
            }
            if !model.store.grads_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite gradient at step {step}: {}",
                    breakdown(&report)
                )));
            }
            opt.step(&mut model.store)?;
            let rec = StepRecord { step, stage, report };
            on_step(&rec)?;
            records.push(rec);
        }
    }
    model.store.zero_grad();
    Ok(records)
}

/// Training samples of a stage.
pub fn stage_samples(cfg: &RunConfig, stage: u8) -> Result<Vec<SynthSample>> {
    let t = cfg.train.get(stage)?;
    let split = if stage == 1 { Split::Stage1 } else { Split::Stage2 };
    Ok(generate(
        &cfg.data.synth(),
        cfg.heads.visual_queries,
        cfg.heads.expert_dim,
        t.mixture,
        t.samples,
        cfg.data.split_seed(split),
    ))
}

/// Held-out samples drawn from the stage's mixture with a disjoint seed.
pub fn heldout_samples(cfg: &RunConfig, stage: u8) -> Result<Vec<SynthSample>> {
    let t = cfg.train.get(stage)?;
    let split = if stage == 1 { Split::Heldout1 } else { Split::Heldout2 };
    Ok(generate(
        &cfg.data.synth(),
        cfg.heads.visual_queries,
        cfg.heads.expert_dim,
        t.mixture,
        cfg.data.heldout_samples,
        cfg.data.split_seed(split),
    ))
}

pub fn to_examples<T: Scalar>(model: &GamsiModel<T>, samples: &[SynthSample]) -> Result<Vec<Example<T>>> {
    samples.iter().map(|s| Example::from_sample(&model.arch, s)).collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct StageSummary {
    pub stage: u8,
    pub variant: String,
    pub steps: usize,
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub initial_heldout: LossReport,
    pub final_heldout: LossReport,
    pub seconds: f64,
}

/// Inputs of one `train` invocation.
#[derive(Clone, Debug)]
pub struct TrainJob {
    pub config: RunConfig,
    pub stage: u8,
    /// Checkpoint to start from; its directory may hold optimizer state.
    pub resume: Option<PathBuf>,
    /// Manifest of a generated dataset; otherwise samples are generated
    /// from the config.
    pub data: Option<PathBuf>,
    pub out: PathBuf,
}

pub const CHECKPOINT_FILE: &str = "model.gams";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CONFIG_FILE: &str = "config.json";
pub const SUMMARY_FILE: &str = "summary.json";

pub fn optimizer_file(stage: u8) -> String {
    format!("optim.stage{stage}.gams")
}

/// Runs a job in the configured precision and writes the checkpoint,
/// optimizer state, metrics CSV, resolved config and summary into `out`.
pub fn run_job(job: &TrainJob) -> Result<StageSummary> {
    match job.config.model.precision {
        Precision::F32 => run_job_as::<f32>(job),
        Precision::F64 => run_job_as::<f64>(job),
    }
}

fn run_job_as<T: Scalar>(job: &TrainJob) -> Result<StageSummary> {
    let start = Instant::now();
    let cfg = &job.config;
    cfg.validate()?;
    let tcfg = cfg.train.get(job.stage)?;
    let mut model = GamsiModel::<T>::new(&cfg.model_config())?;
    let mut opt = AdamW::new(&model.store, AdamWConfig::new(tcfg.learning_rate, tcfg.weight_decay));
    if let Some(ckpt) = &job.resume {
        load_checkpoint(&mut model.store, ckpt)?;
        let state = ckpt.parent().unwrap_or(Path::new(".")).join(optimizer_file(job.stage));
        if state.exists() {
            opt = AdamW::load(&model.store, opt.config, &state)?;
        }
    }
    let train = match &job.data {
        Some(manifest) => crate::synth::load_dataset(&cfg.data.synth(), manifest)?,
        None => stage_samples(cfg, job.stage)?,
    };
    let train = to_examples(&model, &train)?;
    let heldout = to_examples(&model, &heldout_samples(cfg, job.stage)?)?;
    let obj = objective(tcfg, cfg.heads.joint_negatives);
    let eval_batch = tcfg.batch_size;
    let initial = if heldout.is_empty() {
        LossReport::default()
    } else {
        evaluate_loss(&model.arch, &model.store, &heldout, eval_batch, obj)?
    };

    std::fs::create_dir_all(&job.out)?;
    let mut log = MetricsLog::open(&job.out.join(METRICS_FILE))?;
    let records = train_stage(&mut model, &mut opt, tcfg, job.stage, &train, |r| log.append(r));
    log.flush()?;
    let records = records?;

    let final_heldout = if heldout.is_empty() {
        LossReport::default()
    } else {
        evaluate_loss(&model.arch, &model.store, &heldout, eval_batch, obj)?
    };
    save_checkpoint(&model.store, job.out.join(CHECKPOINT_FILE))?;
    opt.save(&model.store, job.out.join(optimizer_file(job.stage)))?;
    std::fs::write(job.out.join(CONFIG_FILE), cfg.to_json())?;
    let summary = StageSummary {
        stage: job.stage,
        variant: cfg.model.variant.name(),
        steps: records.len(),
        train_samples: train.len(),
        heldout_samples: heldout.len(),
        initial_heldout: initial,
        final_heldout,
        seconds: start.elapsed().as_secs_f64(),
    };
    let mut f = File::create(job.out.join(SUMMARY_FILE))?;
    serde_json::to_writer_pretty(&mut f, &summary)?;
    f.write_all(b"\n")?;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_epochs_leave_initialization_untouched() {
        let mut cfg = RunConfig::micro();
        cfg.train.stage1.epochs = 0;
        let mut model = GamsiModel::<f64>::new(&cfg.model_config()).unwrap();
        let init = model.store.clone();
        let mut opt = AdamW::new(&model.store, AdamWConfig::new(1e-3, 0.0));
        let data = to_examples(&model, &stage_samples(&cfg, 1).unwrap()).unwrap();
        let recs = train_stage(&mut model, &mut opt, &cfg.train.stage1, 1, &data, |_| Ok(())).unwrap();
        assert!(recs.is_empty());
        assert_eq!(model.store, init);
    }

    #[test]
    fn training_is_reproducible_and_ledger_balances() {
        let cfg = RunConfig::micro();
        let run = || {
            let mut model = GamsiModel::<f64>::new(&cfg.model_config()).unwrap();
            let mut opt = AdamW::new(&model.store, AdamWConfig::new(1e-3, 0.0));
            let data = to_examples(&model, &stage_samples(&cfg, 1).unwrap()).unwrap();
            let mut buf = Vec::new();
            {
                let mut log = MetricsLog::new(&mut buf, true).unwrap();
                train_stage(&mut model, &mut opt, &cfg.train.stage1, 1, &data, |r| log.append(r)).unwrap();
                log.flush().unwrap();
            }
            (crate::checkpoint::encode_store(&model.store), buf)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(a, b);
        assert_eq!(la, lb);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.csv");
        std::fs::write(&p, &la).unwrap();
        let rows = read_metrics(&p).unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert!((r.l_total - r.l_lm - r.l_align).abs() <= 1e-6);
            let recomputed = r.l_mse_m.unwrap() + 0.01 * r.l_cl_m.unwrap() + r.l_mse_s.unwrap() + 0.01 * r.l_cl_s.unwrap();
            assert!((recomputed - r.l_align).abs() <= 1e-6);
        }
    }
}
