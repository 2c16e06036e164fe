//! Answer likelihood plus alignment, evaluated over a batch.
//!
//! Each sample is forwarded on its own tape. The per-frame grounded
//! predictions and the per-sample language loss are then copied as input
//! leaves onto a small batch tape, where the batch-level terms (MSE over all
//! frames, InfoNCE with in-batch negatives, mean LM loss) are formed and
//! differentiated. The resulting leaf gradients seed the backward pass of
//! every sample tape. Gradients are accumulated in a fixed order (batch tape,
//! then samples by index) so parallel execution stays bit-deterministic.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::evg::{alignment_on_tape, Pathway, PathwayBatch, PathwayTerms};
use crate::model::{argmax, Architecture};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::synth::{SynthSample, TaskType};
use crate::tensor::Tensor;

/// Model-ready sample.
#[derive(Clone, Debug)]
pub struct Example<T> {
    pub task: TaskType,
    /// One P×patch_dim matrix per frame.
    pub patches: Vec<Tensor<T>>,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
    pub metric_targets: Vec<Tensor<T>>,
    pub structural_targets: Vec<Tensor<T>>,
}

impl<T: Scalar> Example<T> {
    pub fn from_sample(arch: &Architecture, s: &SynthSample) -> Result<Self> {
        let heads = &arch.config.heads;
        for set in [&s.metric, &s.structural] {
            if set.visual_queries != heads.visual_queries || set.expert_dim != heads.expert_dim {
                return Err(Error::Compat(format!(
                    "{} expert features are {}×{}, model expects {}×{}",
                    set.pathway.name(),
                    set.visual_queries,
                    set.expert_dim,
                    heads.visual_queries,
                    heads.expert_dim
                )));
            }
            if set.len() != s.scene.frames.len() {
                return Err(Error::Compat(format!(
                    "{} expert features cover {} frames, scene has {}",
                    set.pathway.name(),
                    set.len(),
                    s.scene.frames.len()
                )));
            }
        }
        Ok(Self {
            task: s.qa.task,
            patches: arch.patchify(&s.scene.frames)?,
            question: s.qa.question.clone(),
            answer: s.qa.answer.clone(),
            metric_targets: s.metric.frames_as(),
            structural_targets: s.structural.frames_as(),
        })
    }

    pub fn targets(&self, p: Pathway) -> &[Tensor<T>] {
        match p {
            Pathway::Metric => &self.metric_targets,
            Pathway::Structural => &self.structural_targets,
        }
    }
}

/// Mean cross-entropy over answer positions.
pub fn lm_loss<T: Scalar>(tape: &mut Tape<'_, T>, answer_logits: Var, answer: &[usize]) -> Result<Var> {
    if answer.is_empty() {
        return Err(Error::Contract("language loss needs at least one answer token".into()));
    }
    tape.cross_entropy(answer_logits, answer)
}

/// Untaped [`lm_loss`].
pub fn lm_loss_value<T: Scalar>(answer_logits: &Tensor<T>, answer: &[usize]) -> Result<T> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let l = tape.constant(answer_logits.clone());
    let v = lm_loss(&mut tape, l, answer)?;
    Ok(tape.scalar_value(v))
}

pub fn total_loss<T: Scalar>(lm: T, align: T) -> Result<T> {
    if !lm.is_finite() || !align.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss term: L_LM={lm}, L_Align={align}")));
    }
    Ok(lm + align)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub l_lm: f64,
    pub metric: Option<PathwayTerms>,
    pub structural: Option<PathwayTerms>,
    pub l_align: f64,
    pub l_total: f64,
    /// Fraction of answer tokens whose teacher-forced argmax is correct.
    pub ans_acc: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        let terms = [self.metric, self.structural]
            .into_iter()
            .flatten()
            .all(|t| t.mse.is_finite() && t.cl.is_finite());
        terms && self.l_lm.is_finite() && self.l_align.is_finite() && self.l_total.is_finite()
    }

    pub fn terms(&self, p: Pathway) -> Option<PathwayTerms> {
        match p {
            Pathway::Metric => self.metric,
            Pathway::Structural => self.structural,
        }
    }

    /// Sample-weighted mean of several reports.
    pub fn weighted_mean(parts: &[(LossReport, usize)]) -> LossReport {
        let n: usize = parts.iter().map(|(_, w)| w).sum();
        let mut out = LossReport::default();
        if n == 0 {
            return out;
        }
        let avg = |f: &dyn Fn(&LossReport) -> f64| {
            parts.iter().map(|(r, w)| f(r) * *w as f64).sum::<f64>() / n as f64
        };
        let avg_terms = |p: Pathway| {
            parts.iter().all(|(r, _)| r.terms(p).is_some()).then(|| PathwayTerms {
                mse: avg(&|r| r.terms(p).map_or(0.0, |t| t.mse)),
                cl: avg(&|r| r.terms(p).map_or(0.0, |t| t.cl)),
            })
        };
        out.l_lm = avg(&|r| r.l_lm);
        out.metric = avg_terms(Pathway::Metric);
        out.structural = avg_terms(Pathway::Structural);
        out.l_align = avg(&|r| r.l_align);
        out.l_total = avg(&|r| r.l_total);
        out.ans_acc = avg(&|r| r.ans_acc);
        out
    }
}

impl std::fmt::Display for LossReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "L_LM={:.6}", self.l_lm)?;
        for (tag, t) in [("m", self.metric), ("s", self.structural)] {
            if let Some(t) = t {
                write!(f, " L_MSE_{tag}={:.6} L_CL_{tag}={:.6}", t.mse, t.cl)?;
            }
        }
        write!(f, " L_Align={:.6} L_total={:.6} ans_acc={:.4}", self.l_align, self.l_total, self.ans_acc)
    }
}

/// Switches of the batch objective.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ObjectiveConfig {
    pub lambda: f64,
    /// Include Σ_pathways alignment in the loss. Off reproduces the
    /// answer-only baseline.
    pub align: bool,
    pub joint_negatives: bool,
}

struct SampleTape<'p, T: Scalar> {
    tape: Tape<'p, T>,
    lm: Var,
    lm_value: T,
    correct: usize,
    grounded: Vec<(Pathway, Vec<Var>)>,
}

fn sample_forward<'p, T: Scalar>(
    arch: &Architecture,
    store: &'p ParamStore<T>,
    ex: &Example<T>,
    ground: bool,
) -> Result<SampleTape<'p, T>> {
    let mut tape = Tape::new(store);
    let fwd = arch.forward(&mut tape, &ex.patches, &ex.question, &ex.answer, ground)?;
    let logits = fwd
        .outputs
        .answer_logits
        .ok_or_else(|| Error::Contract("training sample without answer tokens".into()))?;
    let lm = lm_loss(&mut tape, logits, &ex.answer)?;
    let lt = tape.tensor(logits);
    let correct = ex
        .answer
        .iter()
        .enumerate()
        .filter(|&(r, &tok)| argmax(lt.row(r)) == tok)
        .count();
    Ok(SampleTape {
        lm_value: tape.scalar_value(lm),
        lm,
        correct,
        grounded: fwd.grounded,
        tape,
    })
}

/// Loss of one batch and, when `with_grads` is set, the gradient
/// contributions in accumulation order.
pub fn batch_objective<T: Scalar>(
    arch: &Architecture,
    store: &ParamStore<T>,
    batch: &[&Example<T>],
    cfg: ObjectiveConfig,
    with_grads: bool,
) -> Result<(LossReport, Vec<Gradients<T>>)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let ground = cfg.align && !arch.heads.is_empty();
    let samples: Vec<SampleTape<'_, T>> = batch
        .par_iter()
        .map(|ex| sample_forward(arch, store, ex, ground))
        .collect::<Result<_>>()?;

    // Batch tape: copies of the per-sample outputs as differentiable leaves.
    let mut bt = Tape::new(store);
    let lm_leaves: Vec<Var> = samples
        .iter()
        .map(|s| bt.input(Tensor::scalar(s.lm_value)))
        .collect();
    let mut pred_leaves: Vec<Vec<Vec<Var>>> = Vec::with_capacity(samples.len());
    for s in &samples {
        let per_path = s
            .grounded
            .iter()
            .map(|(_, preds)| preds.iter().map(|&p| bt.input(s.tape.tensor(p))).collect())
            .collect();
        pred_leaves.push(per_path);
    }
    let lm_parts = lm_leaves
        .iter()
        .map(|&v| bt.reshape(v, &[1, 1]))
        .collect::<Result<Vec<_>>>()?;
    let lm_stack = bt.concat_rows(&lm_parts)?;
    let l_lm = bt.mean(lm_stack);

    let mut pathway_batches = Vec::new();
    if ground {
        for (k, head) in arch.heads.iter().enumerate() {
            let mut preds = Vec::new();
            let mut targets = Vec::new();
            for (s, ex) in batch.iter().enumerate() {
                preds.extend_from_slice(&pred_leaves[s][k]);
                targets.extend(ex.targets(head.pathway).iter().cloned());
            }
            pathway_batches.push(PathwayBatch { head, preds, targets });
        }
    }
    let (align, terms) = alignment_on_tape(&mut bt, &pathway_batches, T::c(cfg.lambda), cfg.joint_negatives)?;
    let total = match align {
        Some(a) => bt.add(l_lm, a)?,
        None => l_lm,
    };

    let val = |bt: &Tape<'_, T>, v: Var| bt.scalar_value(v).to_f64_lossy();
    let mut report = LossReport {
        l_lm: val(&bt, l_lm),
        l_align: align.map_or(0.0, |a| val(&bt, a)),
        l_total: val(&bt, total),
        ans_acc: samples.iter().map(|s| s.correct).sum::<usize>() as f64
            / batch.iter().map(|e| e.answer.len()).sum::<usize>() as f64,
        ..Default::default()
    };
    for &(p, mse, cl) in &terms {
        let t = Some(PathwayTerms {
            mse: val(&bt, mse),
            cl: val(&bt, cl),
        });
        match p {
            Pathway::Metric => report.metric = t,
            Pathway::Structural => report.structural = t,
        }
    }
    if !report.is_finite() {
        return Ok((report, Vec::new()));
    }
    if !with_grads {
        return Ok((report, Vec::new()));
    }

    let batch_grads = bt.backward(total)?;
    let seeds: Vec<Vec<(Var, Vec<T>)>> = samples
        .iter()
        .enumerate()
        .map(|(s, st)| {
            let mut seeds = vec![(st.lm, grad_or_zero(&batch_grads, lm_leaves[s], 1))];
            for (k, (_, preds)) in st.grounded.iter().enumerate() {
                for (f, &p) in preds.iter().enumerate() {
                    let leaf = pred_leaves[s][k][f];
                    seeds.push((p, grad_or_zero(&batch_grads, leaf, st.tape.value(p).len())));
                }
            }
            seeds
        })
        .collect();
    let sample_grads: Vec<Gradients<T>> = samples
        .into_par_iter()
        .zip(seeds.into_par_iter())
        .map(|(st, seeds)| st.tape.backward_seeded(&seeds))
        .collect::<Result<_>>()?;
    let mut grads = Vec::with_capacity(sample_grads.len() + 1);
    grads.push(batch_grads);
    grads.extend(sample_grads);
    Ok((report, grads))
}

fn grad_or_zero<T: Scalar>(g: &Gradients<T>, leaf: Var, len: usize) -> Vec<T> {
    g.input(leaf).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
}

/// Loss report over a dataset split into consecutive batches.
pub fn evaluate_loss<T: Scalar>(
    arch: &Architecture,
    store: &ParamStore<T>,
    data: &[Example<T>],
    batch_size: usize,
    cfg: ObjectiveConfig,
) -> Result<LossReport> {
    let mut parts = Vec::new();
    for chunk in data.chunks(batch_size.max(1)) {
        let refs: Vec<&Example<T>> = chunk.iter().collect();
        let (r, _) = batch_objective(arch, store, &refs, cfg, false)?;
        parts.push((r, chunk.len()));
    }
    Ok(LossReport::weighted_mean(&parts))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;
    use crate::evg::HeadConfig;
    use crate::model::{GamsiModel, ModelConfig, Variant};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lm_loss_examples() {
        let sat = Tensor::<f64>::from_f64(&[1, 3], &[40.0, 0.0, 0.0]).unwrap();
        assert!(lm_loss_value(&sat, &[0]).unwrap() <= 1e-9);
        let uni = Tensor::<f64>::zeros(&[1, 4]);
        assert!((lm_loss_value(&uni, &[2]).unwrap() - 4f64.ln()).abs() < 1e-12);
        // two tokens whose individual losses are 0.2 and 0.4
        let row = |l: f64| {
            // logits [a, 0] with -ln σ(a) = l
            let a = -((l.exp() - 1.0).ln());
            [a, 0.0]
        };
        let (r0, r1) = (row(0.2), row(0.4));
        let two = Tensor::<f64>::from_f64(&[2, 2], &[r0[0], r0[1], r1[0], r1[1]]).unwrap();
        assert!((lm_loss_value(&two, &[0, 0]).unwrap() - 0.3).abs() < 1e-12);
        assert!(lm_loss_value(&Tensor::<f64>::zeros(&[0, 4]), &[]).is_err());
    }

    #[test]
    fn total_loss_examples() {
        assert_eq!(total_loss(1.0, 0.5).unwrap(), 1.5);
        assert_eq!(total_loss(0.0, 0.0).unwrap(), 0.0);
        assert!(matches!(total_loss(f64::NAN, 0.0), Err(Error::Numeric(_))));
    }

    fn micro() -> (GamsiModel<f64>, Vec<Example<f64>>) {
        let cfg = ModelConfig {
            backbone: BackboneConfig {
                width: 8,
                heads: 2,
                layers: 1,
                patches_per_frame: 4,
                patch_dim: 3,
                vocab: 10,
                max_len: 32,
                queries: 2,
            },
            heads: HeadConfig {
                visual_queries: 2,
                expert_dim: 3,
                heads: 1,
                joint_negatives: false,
            },
            variant: Variant::FULL,
            init_seed: 1,
        };
        let m = GamsiModel::new(&cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ex = (0..3)
            .map(|i| Example {
                task: TaskType::ALL[i],
                patches: vec![Tensor::randn(&[4, 3], 1.0, &mut rng), Tensor::randn(&[4, 3], 1.0, &mut rng)],
                question: vec![1 + i, 2],
                answer: vec![3 + i],
                metric_targets: vec![Tensor::randn(&[2, 3], 1.0, &mut rng), Tensor::randn(&[2, 3], 1.0, &mut rng)],
                structural_targets: vec![Tensor::randn(&[2, 3], 1.0, &mut rng), Tensor::randn(&[2, 3], 1.0, &mut rng)],
            })
            .collect();
        (m, ex)
    }

    #[test]
    fn split_backward_matches_single_tape() {
        let (m, ex) = micro();
        let refs: Vec<&Example<f64>> = ex.iter().collect();
        let cfg = ObjectiveConfig {
            lambda: 0.01,
            align: true,
            joint_negatives: false,
        };
        let (report, grads) = batch_objective(&m.arch, &m.store, &refs, cfg, true).unwrap();
        assert!((report.l_total - report.l_lm - report.l_align).abs() < 1e-12);
        let mut split = m.store.clone();
        for g in &grads {
            split.accumulate(g);
        }

        // Reference: every sample on one tape.
        let mut tape = Tape::new(&m.store);
        let mut lms = Vec::new();
        let mut per_path: Vec<Vec<Var>> = vec![Vec::new(); m.arch.heads.len()];
        for e in &ex {
            let fwd = m.arch.forward(&mut tape, &e.patches, &e.question, &e.answer, true).unwrap();
            let l = lm_loss(&mut tape, fwd.outputs.answer_logits.unwrap(), &e.answer).unwrap();
            lms.push(tape.reshape(l, &[1, 1]).unwrap());
            for (k, (_, preds)) in fwd.grounded.iter().enumerate() {
                per_path[k].extend_from_slice(preds);
            }
        }
        let stack = tape.concat_rows(&lms).unwrap();
        let lm = tape.mean(stack);
        let batches: Vec<PathwayBatch<'_, f64>> = m
            .arch
            .heads
            .iter()
            .zip(per_path)
            .map(|(h, preds)| PathwayBatch {
                head: h,
                preds,
                targets: ex.iter().flat_map(|e| e.targets(h.pathway).to_vec()).collect(),
            })
            .collect();
        let (align, _) = alignment_on_tape(&mut tape, &batches, 0.01, false).unwrap();
        let total = tape.add(lm, align.unwrap()).unwrap();
        assert!((tape.scalar_value(total) - report.l_total).abs() < 1e-12);
        let g = tape.backward(total).unwrap();
        let mut whole = m.store.clone();
        whole.accumulate(&g);
        for ((_, a), (_, b)) in split.iter().zip(whole.iter()) {
            assert!(a.grad.max_abs_diff(&b.grad) < 1e-12, "{}", a.name);
        }
    }

    #[test]
    fn alignment_switch_leaves_language_loss_only() {
        let (m, ex) = micro();
        let refs: Vec<&Example<f64>> = ex.iter().collect();
        let cfg = ObjectiveConfig {
            lambda: 0.01,
            align: false,
            joint_negatives: false,
        };
        let (r, grads) = batch_objective(&m.arch, &m.store, &refs, cfg, true).unwrap();
        assert_eq!(r.l_align, 0.0);
        assert_eq!(r.l_total, r.l_lm);
        assert!(r.metric.is_none());
        let mut s = m.store.clone();
        for g in &grads {
            s.accumulate(g);
        }
        assert!(s.by_name("evg.metric.out.w").unwrap().grad.max_abs() == 0.0);
    }
}
