//! Self-checks run against a model: mask rule, pathway isolation, gradient
//! soundness and loss identities.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::cross_entropy_logits;
use crate::backbone::BackboneConfig;
use crate::error::Result;
use crate::evg::{infonce_loss, mse_loss, HeadConfig};
use crate::gradcheck::{grad_check, GradCheckConfig, GradCheckReport};
use crate::mask::{verify_mask, SequenceLayout};
use crate::model::{contamination_metric, random_probes, GamsiModel, ModelConfig, Variant};
use crate::objective::{batch_objective, Example, ObjectiveConfig};
use crate::scalar::Scalar;
use crate::synth::TaskType;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Serialize)]
pub struct DiagCheck {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

#[derive(Clone, Debug, Serialize)]
pub struct DiagReport {
    pub checks: Vec<DiagCheck>,
    pub passed: bool,
}

impl DiagReport {
    pub fn table(&self) -> String {
        let w = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
        let mut s = String::new();
        for c in &self.checks {
            let tag = if c.passed { "PASS" } else { "FAIL" };
            s.push_str(&format!("{tag}  {:w$}  {}\n", c.name, c.detail));
        }
        s
    }
}

/// The gradient-check model: C=16, one layer, P=4, K=2, K_v=2, D_e=3, V=16.
pub fn micro_config(variant: Variant, seed: u64) -> ModelConfig {
    ModelConfig {
        backbone: BackboneConfig {
            width: 16,
            heads: 2,
            layers: 1,
            patches_per_frame: 4,
            patch_dim: 12,
            vocab: 16,
            max_len: 24,
            queries: 2,
        },
        heads: HeadConfig {
            visual_queries: 2,
            expert_dim: 3,
            heads: 2,
            joint_negatives: false,
        },
        variant,
        init_seed: seed,
    }
}

/// Random two-frame examples shaped for `cfg`, with two-token answers.
pub fn random_examples<T: Scalar>(cfg: &ModelConfig, count: usize, seed: u64) -> Vec<Example<T>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let b = &cfg.backbone;
    let h = &cfg.heads;
    let frames = |rng: &mut ChaCha8Rng, shape: &[usize], std| (0..2).map(|_| Tensor::randn(shape, std, rng)).collect::<Vec<_>>();
    (0..count)
        .map(|i| Example {
            task: TaskType::ALL[i % TaskType::ALL.len()],
            patches: frames(&mut rng, &[b.patches_per_frame, b.patch_dim], 0.5),
            question: vec![1 + i % (b.vocab - 1), 1 + (3 * i + 2) % (b.vocab - 1), 1 + (5 * i + 1) % (b.vocab - 1)],
            answer: vec![(7 * i + 3) % b.vocab, (2 * i + 5) % b.vocab],
            metric_targets: frames(&mut rng, &[h.visual_queries, h.expert_dim], 1.0),
            structural_targets: frames(&mut rng, &[h.visual_queries, h.expert_dim], 1.0),
        })
        .collect()
}

/// Central-difference check of the full objective (answer loss plus both
/// alignment terms) on the micro model in 64-bit.
pub fn micro_grad_check(seed: u64, samples: usize) -> Result<GradCheckReport> {
    let cfg = micro_config(Variant::FULL, seed);
    let mut model = GamsiModel::<f64>::new(&cfg)?;
    let data = random_examples::<f64>(&cfg, 3, seed ^ 0xD1A6);
    let batch: Vec<&Example<f64>> = data.iter().collect();
    let obj = ObjectiveConfig {
        lambda: 0.01,
        align: true,
        joint_negatives: false,
    };
    let arch = model.arch.clone();
    let check = GradCheckConfig {
        samples,
        seed,
        must_include: ["log_tau", "latents", "query.metric", "query.structural"]
            .map(String::from)
            .to_vec(),
        ..Default::default()
    };
    grad_check(
        &mut model.store,
        |store| {
            let (report, grads) = batch_objective(&arch, store, &batch, obj, true)?;
            for g in &grads {
                store.accumulate(g);
            }
            Ok(report.l_total)
        },
        &check,
    )
}

fn check(name: &str, passed: bool, detail: String) -> DiagCheck {
    DiagCheck {
        name: name.into(),
        passed,
        detail,
    }
}

/// Runs every diagnostic against `model`. `n_frames` shapes the probe
/// layouts.
pub fn run_diagnostics<T: Scalar>(model: &GamsiModel<T>, n_frames: usize, seed: u64) -> Result<DiagReport> {
    let cfg = model.config();
    let b = &cfg.backbone;
    let mut checks = Vec::new();

    let v = cfg.variant;
    let k = b.queries;
    let layout = SequenceLayout::with_banks(
        n_frames,
        b.patches_per_frame,
        if v.metric { k } else { 0 },
        if v.structural { k } else { 0 },
        3,
        1,
    )?;
    let rep = verify_mask(&model.arch.mask(&layout), &layout);
    let detail = match rep.violations.first() {
        None => format!("{} entries checked", rep.checked_entries),
        Some(first) => format!("{} violations, first: {first}", rep.violations.len()),
    };
    checks.push(check("mask", rep.passed, detail));

    if v.metric && v.structural {
        let probes = random_probes(&model.arch, n_frames, 8, seed);
        let c = contamination_metric(model, &probes)?;
        checks.push(check("contamination", c == 0.0, format!("metric={c:e}")));
    } else {
        checks.push(check("contamination", true, "not applicable: single or no query bank".into()));
    }

    let gc = micro_grad_check(seed, 200)?;
    let worst = gc
        .worst()
        .map(|p| format!(" (worst {}[{}])", p.param, p.coordinate))
        .unwrap_or_default();
    checks.push(check(
        "grad_check",
        gc.passed,
        format!("max rel err {:.3e} over {} coordinates{worst}", gc.max_rel_err, gc.probes.len()),
    ));

    checks.push(loss_identities(model)?);
    let passed = checks.iter().all(|c| c.passed);
    Ok(DiagReport { checks, passed })
}

fn loss_identities<T: Scalar>(model: &GamsiModel<T>) -> Result<DiagCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut errs: Vec<(String, f64)> = Vec::new();
    let x: Vec<Tensor<f64>> = (0..4).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
    errs.push(("mse(x,x)".into(), mse_loss(&x, &x)?.abs()));
    for n in [2usize, 4, 8] {
        // identical predictions and identical targets: every similarity is 1
        let same = vec![Tensor::<f64>::filled(&[1, 3], 1.0); n];
        let l = infonce_loss(&same, &same, 0.07)?;
        errs.push((format!("infonce uniform |B|={n}"), (l - (n as f64).ln()).abs()));
    }
    let v = model.config().backbone.vocab;
    let ce = cross_entropy_logits(&vec![0.0f64; v], 0)?;
    errs.push(("cross-entropy uniform".into(), (ce - (v as f64).ln()).abs()));

    let cfg = model.config();
    let data = random_examples::<T>(cfg, 2, 5);
    let batch: Vec<&Example<T>> = data.iter().collect();
    let (r, _) = batch_objective(
        &model.arch,
        &model.store,
        &batch,
        ObjectiveConfig {
            lambda: 0.01,
            align: true,
            joint_negatives: cfg.heads.joint_negatives,
        },
        false,
    )?;
    errs.push(("L_total - L_LM - L_Align".into(), (r.l_total - r.l_lm - r.l_align).abs()));
    let worst = errs.iter().max_by(|a, b| a.1.total_cmp(&b.1)).expect("nonempty");
    Ok(check(
        "loss_identities",
        worst.1 <= 1e-6,
        format!("{} identities, worst {} off by {:.1e}", errs.len(), worst.0, worst.1),
    ))
}
