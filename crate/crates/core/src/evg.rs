//! Expert-guided visual grounding: per-pathway heads that fuse refined patch
//! states with the pathway's query outputs, resample them through learnable
//! visual latents, and are scored against expert features with MSE plus a
//! temperature-scaled InfoNCE term.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::backbone::{attention, mlp, randn, register_attention, register_mlp, AttentionParams, MlpParams};
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Default weight of the contrastive term.
pub const DEFAULT_LAMBDA: f64 = 0.01;
/// Initial temperature; stored as its logarithm.
pub const INIT_TAU: f64 = 0.07;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pathway {
    Metric,
    Structural,
}

impl Pathway {
    pub const ALL: [Pathway; 2] = [Pathway::Metric, Pathway::Structural];

    pub fn code(self) -> u8 {
        match self {
            Pathway::Metric => 0,
            Pathway::Structural => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Pathway::Metric),
            1 => Some(Pathway::Structural),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Pathway::Metric => "metric",
            Pathway::Structural => "structural",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadConfig {
    /// Learnable visual latents K_v.
    pub visual_queries: usize,
    /// Expert feature width D_e.
    pub expert_dim: usize,
    /// Heads of the perceiver cross-attention.
    pub heads: usize,
    /// Draw InfoNCE negatives from both pathways' targets instead of only
    /// the pathway's own.
    #[serde(default)]
    pub joint_negatives: bool,
}

#[derive(Clone, Copy, Debug)]
pub struct GroundingHead {
    pub pathway: Pathway,
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    /// Q_v, K_v×C.
    pub latents: ParamId,
    pub attn: AttentionParams,
    pub mlp: MlpParams,
    pub out_w: ParamId,
    pub out_b: ParamId,
    pub log_tau: ParamId,
}

impl GroundingHead {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        pathway: Pathway,
        width: usize,
        cfg: &HeadConfig,
        rng: &mut R,
    ) -> Result<Self> {
        if cfg.heads == 0 || width % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "grounding heads {} must divide width {width}",
                cfg.heads
            )));
        }
        if cfg.visual_queries == 0 || cfg.expert_dim == 0 {
            return Err(Error::Config("K_v and D_e must be positive".into()));
        }
        let p = format!("evg.{}", pathway.name());
        let c = width;
        Ok(Self {
            pathway,
            fuse_w: store.register(format!("{p}.fuse.w"), randn(&[c, c], rng))?,
            fuse_b: store.register(format!("{p}.fuse.b"), Tensor::zeros(&[c]))?,
            latents: store.register(format!("{p}.latents"), randn(&[cfg.visual_queries, c], rng))?,
            attn: register_attention(store, &format!("{p}.perceiver.attn"), c, rng)?,
            mlp: register_mlp(store, &format!("{p}.perceiver.mlp"), c, rng)?,
            out_w: store.register(format!("{p}.out.w"), randn(&[c, cfg.expert_dim], rng))?,
            out_b: store.register(format!("{p}.out.b"), Tensor::zeros(&[cfg.expert_dim]))?,
            log_tau: store.register(format!("{p}.log_tau"), Tensor::scalar(T::c(INIT_TAU.ln())))?,
        })
    }

    /// τ = exp(log_tau).
    pub fn tau<T: Scalar>(&self, store: &ParamStore<T>) -> T {
        store.value(self.log_tau).data()[0].exp()
    }

    /// Token-wise fusion of `[f̂_v^i ; Q̂]` followed by one perceiver block
    /// (latents attend over `[fused ; latents]`, residual, MLP with residual)
    /// and the output projection. Returns K_v×D_e.
    pub fn ground<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        heads: usize,
        frame_hat: Var,
        query_hat: Var,
    ) -> Result<Var> {
        let tokens = tape.concat_rows(&[frame_hat, query_hat])?;
        self.ground_tokens(tape, heads, tokens)
    }

    fn ground_tokens<T: Scalar>(&self, tape: &mut Tape<'_, T>, heads: usize, tokens: Var) -> Result<Var> {
        let fw = tape.param(self.fuse_w);
        let fb = tape.param(self.fuse_b);
        let fused = tape.matmul(tokens, fw)?;
        let fused = tape.add_row(fused, fb)?;
        let latents = tape.param(self.latents);
        let kv = tape.concat_rows(&[fused, latents])?;
        let a = attention(tape, latents, kv, self.attn, heads, None)?;
        let h = tape.add(latents, a)?;
        let m = mlp(tape, h, self.mlp)?;
        let h = tape.add(h, m)?;
        let ow = tape.param(self.out_w);
        let ob = tape.param(self.out_b);
        let out = tape.matmul(h, ow)?;
        tape.add_row(out, ob)
    }
}

/// Per-frame expert targets for one pathway, each K_v×D_e.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpertFeatureSet {
    pub pathway: Pathway,
    pub visual_queries: usize,
    pub expert_dim: usize,
    pub frames: Vec<Tensor<f32>>,
}

impl ExpertFeatureSet {
    pub fn new(
        pathway: Pathway,
        visual_queries: usize,
        expert_dim: usize,
        frames: Vec<Tensor<f32>>,
    ) -> Result<Self> {
        for f in &frames {
            if f.shape() != [visual_queries, expert_dim] {
                return Err(Error::dim("expert features", &[visual_queries, expert_dim], f.shape()));
            }
            if !f.is_finite() {
                return Err(Error::Numeric("non-finite expert feature".into()));
            }
        }
        Ok(Self {
            pathway,
            visual_queries,
            expert_dim,
            frames,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frames_as<T: Scalar>(&self) -> Vec<Tensor<T>> {
        self.frames.iter().map(|f| f.cast()).collect()
    }
}

fn stack_rows<T: Scalar>(tape: &mut Tape<'_, T>, preds: &[Var]) -> Result<Var> {
    let mut flat = Vec::with_capacity(preds.len());
    for &p in preds {
        let n = tape.value(p).len();
        flat.push(tape.reshape(p, &[1, n])?);
    }
    tape.concat_rows(&flat)
}

fn stack_targets<T: Scalar>(targets: &[Tensor<T>]) -> Result<Tensor<T>> {
    let d = targets.first().map_or(0, |t| t.len());
    let mut data = Vec::with_capacity(targets.len() * d);
    for t in targets {
        if t.len() != d {
            return Err(Error::dim("expert targets", &[d], &[t.len()]));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(&[targets.len(), d], data)
}

/// (1/N) Σᵢ ‖flatten(predᵢ) − flatten(targetᵢ)‖².
pub fn mse_on_tape<T: Scalar>(tape: &mut Tape<'_, T>, preds: &[Var], targets: &[Tensor<T>]) -> Result<Var> {
    if preds.is_empty() {
        return Err(Error::Contract("mse over an empty frame list".into()));
    }
    if preds.len() != targets.len() {
        return Err(Error::dim("mse", &[preds.len()], &[targets.len()]));
    }
    for (&p, t) in preds.iter().zip(targets) {
        if tape.shape(p) != t.shape() {
            return Err(Error::dim("mse", tape.shape(p), t.shape()));
        }
    }
    let p = stack_rows(tape, preds)?;
    let t = tape.constant(stack_targets(targets)?);
    let d = tape.sub(p, t)?;
    let sq = tape.square(d);
    let s = tape.sum(sq);
    Ok(tape.scale(s, T::one() / T::from_usize_lossy(preds.len())))
}

/// InfoNCE with cosine similarity on flattened features. Row i's positive is
/// `pool[positives[i]]`; every pool row is a candidate. The temperature is
/// `exp(log_tau)`.
pub fn infonce_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    preds: &[Var],
    pool: &[Tensor<T>],
    positives: &[usize],
    log_tau: Var,
) -> Result<Var> {
    if preds.is_empty() || pool.is_empty() {
        return Err(Error::Contract("InfoNCE needs at least one prediction and candidate".into()));
    }
    if positives.len() != preds.len() {
        return Err(Error::dim("infonce", &[preds.len()], &[positives.len()]));
    }
    let p = stack_rows(tape, preds)?;
    let g = stack_targets(pool)?;
    if g.cols() != tape.shape(p)[1] {
        return Err(Error::dim("infonce", tape.shape(p), g.shape()));
    }
    let g = tape.constant(g);
    let pn = tape.row_normalize(p)?;
    let gn = tape.row_normalize(g)?;
    let sim = tape.matmul_bt(pn, gn)?;
    let neg = tape.scale(log_tau, -T::one());
    let inv_tau = tape.exp(neg);
    let logits = tape.mul_scalar(sim, inv_tau)?;
    tape.cross_entropy(logits, positives)
}

/// Untaped MSE term.
pub fn mse_loss<T: Scalar>(f_vq: &[Tensor<T>], f_gt: &[Tensor<T>]) -> Result<T> {
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let preds: Vec<Var> = f_vq.iter().map(|t| tape.constant(t.clone())).collect();
    let l = mse_on_tape(&mut tape, &preds, f_gt)?;
    Ok(tape.scalar_value(l))
}

/// Untaped InfoNCE term with the targets themselves as the candidate pool.
pub fn infonce_loss<T: Scalar>(f_vq: &[Tensor<T>], f_gt: &[Tensor<T>], tau: T) -> Result<T> {
    if tau <= T::zero() {
        return Err(Error::Contract("temperature must be positive".into()));
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let preds: Vec<Var> = f_vq.iter().map(|t| tape.constant(t.clone())).collect();
    let lt = tape.constant(Tensor::scalar(tau.ln()));
    let positives: Vec<usize> = (0..f_vq.len()).collect();
    let l = infonce_on_tape(&mut tape, &preds, f_gt, &positives, lt)?;
    Ok(tape.scalar_value(l))
}

/// mse + λ·cl.
pub fn align_loss<T: Scalar>(mse: T, cl: T, lambda: T) -> Result<T> {
    if lambda < T::zero() {
        return Err(Error::Contract("λ must be non-negative".into()));
    }
    Ok(mse + lambda * cl)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PathwayTerms {
    pub mse: f64,
    pub cl: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct AlignReport {
    pub metric: Option<PathwayTerms>,
    pub structural: Option<PathwayTerms>,
    pub align: f64,
}

impl AlignReport {
    pub fn terms(&self, p: Pathway) -> Option<PathwayTerms> {
        match p {
            Pathway::Metric => self.metric,
            Pathway::Structural => self.structural,
        }
    }
}

/// Predictions and targets of one pathway over a set of frames.
pub struct PathwayBatch<'a, T: Scalar> {
    pub head: &'a GroundingHead,
    pub preds: Vec<Var>,
    pub targets: Vec<Tensor<T>>,
}

/// Taped alignment loss Σ_pathways (mse + λ·cl). Returns the loss node and the
/// per-term nodes for reporting.
pub fn alignment_on_tape<T: Scalar>(
    tape: &mut Tape<'_, T>,
    batches: &[PathwayBatch<'_, T>],
    lambda: T,
    joint_negatives: bool,
) -> Result<(Option<Var>, Vec<(Pathway, Var, Var)>)> {
    let joint_pool: Vec<Tensor<T>> = if joint_negatives {
        batches.iter().flat_map(|b| b.targets.iter().cloned()).collect()
    } else {
        Vec::new()
    };
    let mut total: Option<Var> = None;
    let mut terms = Vec::new();
    let mut offset = 0;
    for b in batches {
        let mse = mse_on_tape(tape, &b.preds, &b.targets)?;
        let lt = tape.param(b.head.log_tau);
        let cl = if joint_negatives {
            let pos: Vec<usize> = (offset..offset + b.preds.len()).collect();
            infonce_on_tape(tape, &b.preds, &joint_pool, &pos, lt)?
        } else {
            let pos: Vec<usize> = (0..b.preds.len()).collect();
            infonce_on_tape(tape, &b.preds, &b.targets, &pos, lt)?
        };
        offset += b.preds.len();
        let weighted = tape.scale(cl, lambda);
        let term = tape.add(mse, weighted)?;
        total = Some(match total {
            None => term,
            Some(t) => tape.add(t, term)?,
        });
        terms.push((b.head.pathway, mse, cl));
    }
    Ok((total, terms))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    fn head_cfg(kv: usize, de: usize) -> HeadConfig {
        HeadConfig {
            visual_queries: kv,
            expert_dim: de,
            heads: 1,
            joint_negatives: false,
        }
    }

    #[test]
    fn ground_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = GroundingHead::register(&mut store, Pathway::Metric, 8, &head_cfg(3, 5), &mut rng).unwrap();
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let q = tape.constant(Tensor::randn(&[2, 8], 1.0, &mut rng));
        let out = head.ground(&mut tape, 1, f, q).unwrap();
        assert_eq!(tape.shape(out), &[3, 5]);
        let bad = tape.constant(Tensor::zeros(&[2, 7]));
        assert!(head.ground(&mut tape, 1, f, bad).is_err());
    }

    #[test]
    fn zero_output_projection_returns_bias() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let head = GroundingHead::register(&mut store, Pathway::Structural, 8, &head_cfg(3, 5), &mut rng).unwrap();
        *store.value_mut(head.out_w) = Tensor::zeros(&[8, 5]);
        *store.value_mut(head.out_b) = t(&[5], &[1., -2., 3., 0.5, 0.]);
        let mut tape = Tape::new(&store);
        let f = tape.constant(Tensor::randn(&[4, 8], 1.0, &mut rng));
        let q = tape.constant(Tensor::randn(&[2, 8], 1.0, &mut rng));
        let out = head.ground(&mut tape, 1, f, q).unwrap();
        for r in 0..3 {
            assert_eq!(&tape.value(out)[r * 5..(r + 1) * 5], &[1., -2., 3., 0.5, 0.]);
        }
    }

    #[test]
    fn uniform_attention_averages_value_rows() {
        // C = D_e = 4, identity value/output/out projections, zero query
        // projection so every logit is 0.
        let c = 4;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let head = GroundingHead::register(&mut store, Pathway::Metric, c, &head_cfg(2, c), &mut rng).unwrap();
        *store.value_mut(head.attn.wq) = Tensor::zeros(&[c, c]);
        *store.value_mut(head.attn.wv) = Tensor::eye(c);
        *store.value_mut(head.attn.wo) = Tensor::eye(c);
        *store.value_mut(head.out_w) = Tensor::eye(c);
        let f = Tensor::<f64>::randn(&[3, c], 1.0, &mut rng);
        let q = Tensor::<f64>::randn(&[1, c], 1.0, &mut rng);

        // Hand computation of the same block.
        let fuse_w = store.value(head.fuse_w).clone();
        let mut tokens = f.data().to_vec();
        tokens.extend_from_slice(q.data());
        let fused = Tensor::new(&[4, c], tokens).unwrap().matmul(&fuse_w).unwrap();
        let lat = store.value(head.latents).clone();
        let n_kv = 4 + 2;
        let mut avg = vec![0.0; c];
        for r in 0..4 {
            for j in 0..c {
                avg[j] += fused.get2(r, j) / n_kv as f64;
            }
        }
        for r in 0..2 {
            for j in 0..c {
                avg[j] += lat.get2(r, j) / n_kv as f64;
            }
        }
        let mut h = lat.data().to_vec();
        for r in 0..2 {
            for j in 0..c {
                h[r * c + j] += avg[j];
            }
        }
        let h = Tensor::new(&[2, c], h).unwrap();
        let w1 = store.value(head.mlp.w1);
        let w2 = store.value(head.mlp.w2);
        let pre = h.matmul(w1).unwrap();
        let gelu = |x: f64| {
            0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
        };
        let act = Tensor::new(pre.shape(), pre.data().iter().map(|&x| gelu(x)).collect()).unwrap();
        let m = act.matmul(w2).unwrap();
        let expect: Vec<f64> = h.data().iter().zip(m.data()).map(|(a, b)| a + b).collect();

        let mut tape = Tape::new(&store);
        let fv = tape.constant(f);
        let qv = tape.constant(q);
        let out = head.ground(&mut tape, 1, fv, qv).unwrap();
        for (a, b) in tape.value(out).iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn mse_examples() {
        let x = vec![t(&[2, 2], &[1., 2., 3., 4.])];
        assert_eq!(mse_loss(&x, &x).unwrap(), 0.0);
        let a = vec![t(&[1, 3], &[1., 0., 0.])];
        let z = vec![t(&[1, 3], &[0., 0., 0.])];
        assert_eq!(mse_loss(&a, &z).unwrap(), 1.0);
        // squared norms 2 and 4 → mean 3
        let p = vec![t(&[1, 2], &[1., 1.]), t(&[1, 2], &[2., 0.])];
        let g = vec![t(&[1, 2], &[0., 0.]), t(&[1, 2], &[0., 0.])];
        assert_eq!(mse_loss(&p, &g).unwrap(), 3.0);
        assert!(matches!(mse_loss::<f64>(&[], &[]), Err(Error::Contract(_))));
    }

    #[test]
    fn infonce_examples() {
        let a = vec![t(&[1, 2], &[0.3, -1.0])];
        assert!(infonce_loss(&a, &a, 0.07).unwrap().abs() < 1e-12);

        // Orthonormal targets, predictions identical (equal sims in each row).
        let gt: Vec<_> = (0..4)
            .map(|i| {
                let mut v = [0.0; 4];
                v[i] = 1.0;
                t(&[1, 4], &v)
            })
            .collect();
        let pred = vec![t(&[1, 4], &[1., 1., 1., 1.]); 4];
        let l = infonce_loss(&pred, &gt, 0.5).unwrap();
        assert!((l - 4f64.ln()).abs() < 1e-12);

        // |B|=2, sim(pos)=1, sim(neg)=0, τ=1
        let gt = vec![t(&[1, 2], &[1., 0.]), t(&[1, 2], &[0., 1.])];
        let pred = vec![t(&[1, 2], &[2., 0.]), t(&[1, 2], &[0., 3.])];
        let e = std::f64::consts::E;
        let l = infonce_loss(&pred, &gt, 1.0).unwrap();
        assert!((l + (e / (e + 1.0)).ln()).abs() < 1e-12);
        assert!((l - 0.3133).abs() < 1e-3);

        let zero = vec![t(&[1, 2], &[0., 0.])];
        assert!(matches!(infonce_loss(&zero, &gt[..1], 1.0), Err(Error::DegenerateSimilarity { .. })));
    }

    #[test]
    fn align_examples() {
        let v = align_loss(1.0, 1.3863, DEFAULT_LAMBDA).unwrap();
        assert!((v - 1.013863).abs() < 1e-12);
        assert_eq!(align_loss(2.0, 5.0, 0.0).unwrap(), 2.0);
        assert_eq!(align_loss(0.0, 0.0, 0.01).unwrap(), 0.0);
        assert!(align_loss(0.0, 0.0, -1.0).is_err());
    }

    proptest! {
        #[test]
        fn infonce_scale_free_mse_not(seed in 0u64..1000, c in 0.1f64..10.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
            let gt: Vec<Tensor<f64>> = (0..3).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
            let scaled: Vec<Tensor<f64>> = gt.iter().map(|g| {
                Tensor::new(g.shape(), g.data().iter().map(|v| v * c).collect()).unwrap()
            }).collect();
            let l1 = infonce_loss(&pred, &gt, 0.2).unwrap();
            let l2 = infonce_loss(&pred, &scaled, 0.2).unwrap();
            prop_assert!(l1 >= 0.0);
            prop_assert!((l1 - l2).abs() < 1e-9);
            if (c - 1.0).abs() > 1e-3 {
                prop_assert!(mse_loss(&pred, &gt).unwrap() != mse_loss(&pred, &scaled).unwrap());
            }
        }

        #[test]
        fn mse_permutation_invariant(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
            let gt: Vec<Tensor<f64>> = (0..2).map(|_| Tensor::randn(&[2, 3], 1.0, &mut rng)).collect();
            let mut perm: Vec<usize> = (0..6).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let apply = |v: &[Tensor<f64>]| -> Vec<Tensor<f64>> {
                v.iter().map(|x| Tensor::new(x.shape(), perm.iter().map(|&i| x.data()[i]).collect()).unwrap()).collect()
            };
            let a = mse_loss(&pred, &gt).unwrap();
            let b = mse_loss(&apply(&pred), &apply(&gt)).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
