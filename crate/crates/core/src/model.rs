//! Backbone, query banks and grounding heads assembled into one model.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{patchify, BackboneConfig, BackboneOutputs, BackboneParams, QueryBank};
use crate::error::{Error, Result};
use crate::evg::{GroundingHead, HeadConfig, Pathway};
use crate::mask::{build_mask_with, AttentionMask, SequenceLayout};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::synth::mix_seed;
use crate::tensor::Tensor;

/// Which query banks exist and whether the decoupling rule is applied.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Variant {
    pub metric: bool,
    pub structural: bool,
    pub decouple_mask: bool,
}

impl Variant {
    pub const NO_QUERIES: Variant = Variant {
        metric: false,
        structural: false,
        decouple_mask: false,
    };
    pub const STRUCTURAL_ONLY: Variant = Variant {
        metric: false,
        structural: true,
        decouple_mask: false,
    };
    pub const DUAL_NO_MASK: Variant = Variant {
        metric: true,
        structural: true,
        decouple_mask: false,
    };
    pub const FULL: Variant = Variant {
        metric: true,
        structural: true,
        decouple_mask: true,
    };

    pub const ALL: [(&'static str, Variant); 4] = [
        ("no-queries", Variant::NO_QUERIES),
        ("structural-only", Variant::STRUCTURAL_ONLY),
        ("dual-no-mask", Variant::DUAL_NO_MASK),
        ("full", Variant::FULL),
    ];

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Config(format!("unknown variant {name}")))
    }

    pub fn name(&self) -> String {
        Self::ALL
            .iter()
            .find(|(_, v)| v == self)
            .map_or_else(
                || format!("m{}s{}d{}", self.metric as u8, self.structural as u8, self.decouple_mask as u8),
                |(n, _)| n.to_string(),
            )
    }

    pub fn has(&self, p: Pathway) -> bool {
        match p {
            Pathway::Metric => self.metric,
            Pathway::Structural => self.structural,
        }
    }
}

impl Default for Variant {
    fn default() -> Self {
        Variant::FULL
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub heads: HeadConfig,
    pub variant: Variant,
    pub init_seed: u64,
}

/// Parameter handles of a model; weights live in a separate store so the
/// same architecture can be evaluated against perturbed copies.
#[derive(Clone, Debug)]
pub struct Architecture {
    pub config: ModelConfig,
    pub backbone: BackboneParams,
    pub bank: QueryBank,
    pub heads: Vec<GroundingHead>,
}

/// Everything one forward pass produced that later stages read.
pub struct Forward {
    pub layout: SequenceLayout,
    pub outputs: BackboneOutputs,
    /// Per enabled pathway, one K_v×D_e prediction per frame.
    pub grounded: Vec<(Pathway, Vec<Var>)>,
}

impl Architecture {
    /// Registers all parameters. Each component draws from its own stream
    /// so variants share the initial values of the parameters they have in
    /// common.
    pub fn register<T: Scalar>(config: &ModelConfig, store: &mut ParamStore<T>) -> Result<Self> {
        let b = &config.backbone;
        let v = config.variant;
        let stream = |i| ChaCha8Rng::seed_from_u64(mix_seed(config.init_seed, i));
        let backbone = BackboneParams::register(b, store, &mut stream(0))?;
        let bank = QueryBank::register(store, b.queries, b.width, v.metric, v.structural, &mut stream(1))?;
        let mut heads = Vec::new();
        for (i, p) in Pathway::ALL.into_iter().enumerate() {
            let mut rng = stream(2 + i as u64);
            if v.has(p) {
                heads.push(GroundingHead::register(store, p, b.width, &config.heads, &mut rng)?);
            }
        }
        Ok(Self {
            config: config.clone(),
            backbone,
            bank,
            heads,
        })
    }

    pub fn head(&self, p: Pathway) -> Option<&GroundingHead> {
        self.heads.iter().find(|h| h.pathway == p)
    }

    pub fn bank_id(&self, p: Pathway) -> Option<ParamId> {
        match p {
            Pathway::Metric => self.bank.metric,
            Pathway::Structural => self.bank.structural,
        }
    }

    pub fn mask(&self, layout: &SequenceLayout) -> AttentionMask {
        build_mask_with(layout, self.config.variant.decouple_mask)
    }

    /// Patchifies H×W×3 frames for this model's patch grid.
    pub fn patchify<T: Scalar>(&self, frames: &[Tensor<f32>]) -> Result<Vec<Tensor<T>>> {
        frames
            .iter()
            .map(|f| patchify(&f.cast::<T>(), self.config.backbone.patches_per_frame))
            .collect()
    }

    /// Runs the backbone over `[F_v, Q_m, Q_s, question, answer]` and, unless
    /// `ground` is false, the grounding heads over every frame.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        patches: &[Tensor<T>],
        question: &[usize],
        answer: &[usize],
        ground: bool,
    ) -> Result<Forward> {
        let cfg = &self.config.backbone;
        let vocab = cfg.vocab;
        if let Some(&t) = question.iter().chain(answer).find(|&&t| t >= vocab) {
            return Err(Error::Index { index: t, extent: vocab });
        }
        let scene = self.backbone.encode_frames(tape, cfg, patches)?;
        let (x, layout) = self.backbone.assemble(tape, cfg, &scene, &self.bank, question, answer)?;
        let mask = self.mask(&layout);
        let hidden = self.backbone.forward(tape, cfg, x, &mask)?;
        let outputs = self.backbone.extract(tape, hidden, &layout)?;
        let mut grounded = Vec::new();
        if ground {
            for head in &self.heads {
                let q = match head.pathway {
                    Pathway::Metric => outputs.metric,
                    Pathway::Structural => outputs.structural,
                }
                .expect("head registered without its bank");
                let mut preds = Vec::with_capacity(outputs.frames.len());
                for &f in &outputs.frames {
                    preds.push(head.ground(tape, self.config.heads.heads, f, q)?);
                }
                grounded.push((head.pathway, preds));
            }
        }
        Ok(Forward {
            layout,
            outputs,
            grounded,
        })
    }

    /// Greedy decoding of `max_tokens` answer tokens, optionally restricted
    /// to the tokens in `allowed`.
    pub fn generate<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patches: &[Tensor<T>],
        question: &[usize],
        max_tokens: usize,
        allowed: Option<&[usize]>,
    ) -> Result<Vec<usize>> {
        let vocab = self.config.backbone.vocab;
        if let Some(a) = allowed {
            if a.is_empty() {
                return Err(Error::Contract("empty answer set".into()));
            }
            if let Some(&t) = a.iter().find(|&&t| t >= vocab) {
                return Err(Error::Index { index: t, extent: vocab });
            }
        }
        let mut answer = Vec::with_capacity(max_tokens);
        for _ in 0..max_tokens {
            let mut tape = Tape::new(store);
            let logits = self.next_token_logits(&mut tape, patches, question, &answer)?;
            let next = match allowed {
                None => argmax(&logits),
                // ties go to the lower token id, as in argmax
                Some(a) => *a
                    .iter()
                    .reduce(|b, t| if logits[*t] > logits[*b] || (logits[*t] == logits[*b] && t < b) { t } else { b })
                    .expect("nonempty"),
            };
            answer.push(next);
        }
        Ok(answer)
    }

    fn next_token_logits<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        patches: &[Tensor<T>],
        question: &[usize],
        answer: &[usize],
    ) -> Result<Vec<T>> {
        let cfg = &self.config.backbone;
        let scene = self.backbone.encode_frames(tape, cfg, patches)?;
        let (x, layout) = self.backbone.assemble(tape, cfg, &scene, &self.bank, question, answer)?;
        let mask = self.mask(&layout);
        let hidden = self.backbone.forward(tape, cfg, x, &mask)?;
        let logits = self.backbone.logits_at(tape, hidden, layout.total_len() - 1, 1)?;
        Ok(tape.value(logits).to_vec())
    }

    /// Query-bank outputs Q̂ of one pathway for a prompt.
    pub fn query_outputs<T: Scalar>(
        &self,
        store: &ParamStore<T>,
        patches: &[Tensor<T>],
        question: &[usize],
        pathway: Pathway,
    ) -> Result<Tensor<T>> {
        let mut tape = Tape::new(store);
        let fwd = self.forward(&mut tape, patches, question, &[], false)?;
        let v = match pathway {
            Pathway::Metric => fwd.outputs.metric,
            Pathway::Structural => fwd.outputs.structural,
        }
        .ok_or_else(|| Error::Config(format!("model has no {} queries", pathway.name())))?;
        Ok(tape.tensor(v))
    }
}

pub fn argmax<T: Scalar>(xs: &[T]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Architecture plus weights.
#[derive(Clone, Debug)]
pub struct GamsiModel<T: Scalar> {
    pub arch: Architecture,
    pub store: ParamStore<T>,
}

impl<T: Scalar> GamsiModel<T> {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        let mut store = ParamStore::new();
        let arch = Architecture::register(config, &mut store)?;
        Ok(Self { arch, store })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.arch.config
    }

    pub fn generate(&self, patches: &[Tensor<T>], question: &[usize], max_tokens: usize) -> Result<Vec<usize>> {
        self.arch.generate(&self.store, patches, question, max_tokens, None)
    }

    /// Greedy decoding restricted to `allowed` tokens.
    pub fn generate_among(
        &self,
        patches: &[Tensor<T>],
        question: &[usize],
        max_tokens: usize,
        allowed: &[usize],
    ) -> Result<Vec<usize>> {
        self.arch.generate(&self.store, patches, question, max_tokens, Some(allowed))
    }
}

/// What a sensitivity probe perturbs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Perturbation {
    Bank(Pathway),
    Visual,
}

/// One contamination probe: a prompt and the noise added under perturbation.
#[derive(Clone, Debug)]
pub struct Probe<T> {
    pub patches: Vec<Tensor<T>>,
    pub question: Vec<usize>,
    pub seed: u64,
}

/// ‖Q̂_observed(perturbed) − Q̂_observed(original)‖∞ / ‖Q̂_observed(original)‖∞.
pub fn query_sensitivity<T: Scalar>(
    model: &GamsiModel<T>,
    probe: &Probe<T>,
    perturb: Perturbation,
    observed: Pathway,
) -> Result<f64> {
    let arch = &model.arch;
    let base = arch.query_outputs(&model.store, &probe.patches, &probe.question, observed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(probe.seed);
    let (store, patches) = match perturb {
        Perturbation::Bank(p) => {
            let id = arch
                .bank_id(p)
                .ok_or_else(|| Error::Config(format!("model has no {} queries", p.name())))?;
            let mut store = model.store.clone();
            let v = store.value_mut(id);
            let noise = Tensor::<T>::randn(v.shape(), 1.0, &mut rng);
            for (x, n) in v.data_mut().iter_mut().zip(noise.data()) {
                *x = *x + *n;
            }
            (store, probe.patches.clone())
        }
        Perturbation::Visual => {
            let patches = probe
                .patches
                .iter()
                .map(|p| {
                    let noise = Tensor::<T>::randn(p.shape(), 0.5, &mut rng);
                    let data = p.data().iter().zip(noise.data()).map(|(a, b)| *a + *b).collect();
                    Tensor::new(p.shape(), data)
                })
                .collect::<Result<Vec<_>>>()?;
            (model.store.clone(), patches)
        }
    };
    let moved = arch.query_outputs(&store, &patches, &probe.question, observed)?;
    let denom = base.max_abs().to_f64_lossy();
    Ok(moved.max_abs_diff(&base).to_f64_lossy() / denom.max(f64::MIN_POSITIVE))
}

/// Mean sensitivity of Q̂_s to perturbations of the Q_m bank.
pub fn contamination_metric<T: Scalar>(model: &GamsiModel<T>, probes: &[Probe<T>]) -> Result<f64> {
    let v = model.config().variant;
    if !(v.metric && v.structural) {
        return Err(Error::Config("contamination needs both query banks".into()));
    }
    if probes.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for p in probes {
        total += query_sensitivity(model, p, Perturbation::Bank(Pathway::Metric), Pathway::Structural)?;
    }
    Ok(total / probes.len() as f64)
}

/// Random-pixel probes shaped for `arch`.
pub fn random_probes<T: Scalar>(arch: &Architecture, n_frames: usize, count: usize, seed: u64) -> Vec<Probe<T>> {
    let cfg = &arch.config.backbone;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|i| {
            let patches = (0..n_frames)
                .map(|_| Tensor::randn(&[cfg.patches_per_frame, cfg.patch_dim], 0.5, &mut rng))
                .collect();
            let question = (0..2).map(|j| (i * 7 + j * 3 + 1) % cfg.vocab).collect();
            Probe {
                patches,
                question,
                seed: mix_seed(seed, i as u64),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    pub(crate) fn tiny(variant: Variant) -> ModelConfig {
        ModelConfig {
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
            variant,
            init_seed: 5,
        }
    }

    fn names(v: Variant) -> BTreeSet<String> {
        let m = GamsiModel::<f64>::new(&tiny(v)).unwrap();
        m.store.names().map(String::from).collect()
    }

    #[test]
    fn variants_differ_by_exactly_their_pathway_parameters() {
        let base = names(Variant::NO_QUERIES);
        let s_only = names(Variant::STRUCTURAL_ONLY);
        let dual = names(Variant::DUAL_NO_MASK);
        let full = names(Variant::FULL);
        assert!(base.iter().all(|n| !n.starts_with("query.") && !n.starts_with("evg.")));
        let added: Vec<_> = s_only.difference(&base).collect();
        assert!(added.iter().all(|n| *n == "query.structural" || n.starts_with("evg.structural.")));
        assert!(base.is_subset(&s_only));
        let added: Vec<_> = dual.difference(&s_only).collect();
        assert!(added.iter().all(|n| *n == "query.metric" || n.starts_with("evg.metric.")));
        assert!(!added.is_empty());
        assert_eq!(dual, full);
    }

    #[test]
    fn shared_parameters_start_identical_across_variants() {
        let a = GamsiModel::<f64>::new(&tiny(Variant::NO_QUERIES)).unwrap();
        let b = GamsiModel::<f64>::new(&tiny(Variant::FULL)).unwrap();
        for (_, p) in a.store.iter() {
            assert_eq!(&p.value, &b.store.by_name(&p.name).unwrap().value, "{}", p.name);
        }
    }

    #[test]
    fn greedy_decoding_matches_teacher_forced_argmax() {
        let m = GamsiModel::<f64>::new(&tiny(Variant::FULL)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let patches = vec![Tensor::randn(&[4, 3], 1.0, &mut rng)];
        let q = [1, 2];
        let out = m.generate(&patches, &q, 2).unwrap();
        let mut tape = Tape::new(&m.store);
        let fwd = m.arch.forward(&mut tape, &patches, &q, &out, false).unwrap();
        let logits = tape.tensor(fwd.outputs.answer_logits.unwrap());
        assert_eq!(argmax(logits.row(0)), out[0]);
        assert_eq!(argmax(logits.row(1)), out[1]);
    }

    #[test]
    fn masked_model_has_zero_contamination() {
        let full = GamsiModel::<f64>::new(&tiny(Variant::FULL)).unwrap();
        let probes = random_probes(&full.arch, 2, 4, 9);
        assert_eq!(contamination_metric(&full, &probes).unwrap(), 0.0);
        let open = GamsiModel::<f64>::new(&tiny(Variant::DUAL_NO_MASK)).unwrap();
        assert!(contamination_metric(&open, &probes).unwrap() > 0.0);
        let s_only = GamsiModel::<f64>::new(&tiny(Variant::STRUCTURAL_ONLY)).unwrap();
        assert!(contamination_metric(&s_only, &probes).is_err());
    }
}
