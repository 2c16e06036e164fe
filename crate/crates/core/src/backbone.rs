//! Toy vision encoder and decoder-only transformer carrying the two query
//! banks.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::mask::{AttentionMask, SequenceLayout};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-5;
pub const MLP_EXPANSION: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    /// Model width C.
    pub width: usize,
    pub heads: usize,
    pub layers: usize,
    /// Patches per frame P.
    pub patches_per_frame: usize,
    /// Raw values per patch (H·W·3 / P).
    pub patch_dim: usize,
    pub vocab: usize,
    /// Positional table size; bounds the sequence length.
    pub max_len: usize,
    /// Queries per pathway K.
    pub queries: usize,
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || self.width % self.heads != 0 {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.queries == 0 {
            return Err(Error::Config("queries K must be at least 1".into()));
        }
        if self.patches_per_frame == 0 || self.patch_dim == 0 || self.vocab == 0 || self.max_len == 0 {
            return Err(Error::Config("patch, vocab and positional sizes must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
pub struct LayerNormParams {
    pub gain: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct MlpParams {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

/// Learnable query banks; `None` for a pathway disabled by an ablation.
#[derive(Clone, Copy, Debug)]
pub struct QueryBank {
    pub metric: Option<ParamId>,
    pub structural: Option<ParamId>,
}

#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub patch_proj: ParamId,
    pub patch_pos: ParamId,
    pub tok_emb: ParamId,
    pub pos_emb: ParamId,
    pub blocks: Vec<BlockParams>,
    pub ln_f: LayerNormParams,
    pub unembed: ParamId,
}

pub(crate) fn randn<T: Scalar, R: Rng + ?Sized>(shape: &[usize], rng: &mut R) -> Tensor<T> {
    Tensor::randn(shape, INIT_STD, rng)
}

pub(crate) fn register_ln<T: Scalar>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
) -> Result<LayerNormParams> {
    Ok(LayerNormParams {
        gain: store.register(format!("{prefix}.g"), Tensor::filled(&[c], T::one()))?,
        bias: store.register(format!("{prefix}.b"), Tensor::zeros(&[c]))?,
    })
}

pub(crate) fn register_attention<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<AttentionParams> {
    Ok(AttentionParams {
        wq: store.register(format!("{prefix}.wq"), randn(&[c, c], rng))?,
        wk: store.register(format!("{prefix}.wk"), randn(&[c, c], rng))?,
        wv: store.register(format!("{prefix}.wv"), randn(&[c, c], rng))?,
        wo: store.register(format!("{prefix}.wo"), randn(&[c, c], rng))?,
    })
}

pub(crate) fn register_mlp<T: Scalar, R: Rng + ?Sized>(
    store: &mut ParamStore<T>,
    prefix: &str,
    c: usize,
    rng: &mut R,
) -> Result<MlpParams> {
    let h = c * MLP_EXPANSION;
    Ok(MlpParams {
        w1: store.register(format!("{prefix}.w1"), randn(&[c, h], rng))?,
        b1: store.register(format!("{prefix}.b1"), Tensor::zeros(&[h]))?,
        w2: store.register(format!("{prefix}.w2"), randn(&[h, c], rng))?,
        b2: store.register(format!("{prefix}.b2"), Tensor::zeros(&[c]))?,
    })
}

impl BackboneParams {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        cfg: &BackboneConfig,
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.width;
        let patch_proj = store.register("encoder.patch_proj", randn(&[cfg.patch_dim, c], rng))?;
        let patch_pos = store.register("encoder.patch_pos", randn(&[cfg.patches_per_frame, c], rng))?;
        let tok_emb = store.register("backbone.tok_emb", randn(&[cfg.vocab, c], rng))?;
        let pos_emb = store.register("backbone.pos_emb", randn(&[cfg.max_len, c], rng))?;
        let mut blocks = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let p = format!("backbone.block{l}");
            blocks.push(BlockParams {
                ln1: register_ln(store, &format!("{p}.ln1"), c)?,
                attn: register_attention(store, &format!("{p}.attn"), c, rng)?,
                ln2: register_ln(store, &format!("{p}.ln2"), c)?,
                mlp: register_mlp(store, &format!("{p}.mlp"), c, rng)?,
            });
        }
        let ln_f = register_ln(store, "backbone.ln_f", c)?;
        let unembed = store.register("backbone.unembed", randn(&[c, cfg.vocab], rng))?;
        Ok(Self {
            patch_proj,
            patch_pos,
            tok_emb,
            pos_emb,
            blocks,
            ln_f,
            unembed,
        })
    }
}

impl QueryBank {
    pub fn register<T: Scalar, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        k: usize,
        c: usize,
        metric: bool,
        structural: bool,
        rng: &mut R,
    ) -> Result<Self> {
        // Both banks are always drawn so that ablation variants share the
        // random stream of the full model up to this point.
        let qm = randn::<T, _>(&[k, c], rng);
        let qs = randn::<T, _>(&[k, c], rng);
        Ok(Self {
            metric: if metric {
                Some(store.register("query.metric", qm)?)
            } else {
                None
            },
            structural: if structural {
                Some(store.register("query.structural", qs)?)
            } else {
                None
            },
        })
    }
}

/// Per-frame patch embeddings f_v^i, each P×C.
#[derive(Clone, Debug)]
pub struct EncodedScene {
    pub frames: Vec<Var>,
}

/// Hidden states read back at the positions recorded in the layout.
#[derive(Clone, Debug)]
pub struct BackboneOutputs {
    pub metric: Option<Var>,
    pub structural: Option<Var>,
    pub frames: Vec<Var>,
    /// L_a×V; `None` when the layout has no answer tokens.
    pub answer_logits: Option<Var>,
}

/// Splits an H×W×3 frame into a square grid of P patches, each flattened in
/// (row, column, channel) order.
pub fn patchify<T: Scalar>(frame: &Tensor<T>, patches: usize) -> Result<Tensor<T>> {
    let s = frame.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::Config(format!("frame must be H×W×3, got {s:?}")));
    }
    let (h, w) = (s[0], s[1]);
    let g = (patches as f64).sqrt().round() as usize;
    if g * g != patches || h % g != 0 || w % g != 0 {
        return Err(Error::Config(format!(
            "frame {h}×{w} cannot be divided into {patches} patches"
        )));
    }
    let (ph, pw) = (h / g, w / g);
    let dim = ph * pw * 3;
    let x = frame.data();
    let mut out = Vec::with_capacity(patches * dim);
    for gr in 0..g {
        for gc in 0..g {
            for y in gr * ph..(gr + 1) * ph {
                let start = (y * w + gc * pw) * 3;
                out.extend_from_slice(&x[start..start + pw * 3]);
            }
        }
    }
    Tensor::new(&[patches, dim], out)
}

fn layer_norm<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: LayerNormParams) -> Result<Var> {
    let g = tape.param(p.gain);
    let b = tape.param(p.bias);
    tape.layer_norm(x, g, b, T::c(LN_EPS))
}

/// Multi-head attention of `queries` over `keys_values`, optional additive mask.
pub(crate) fn attention<T: Scalar>(
    tape: &mut Tape<'_, T>,
    queries: Var,
    keys_values: Var,
    p: AttentionParams,
    heads: usize,
    mask: Option<&[T]>,
) -> Result<Var> {
    let wq = tape.param(p.wq);
    let wk = tape.param(p.wk);
    let wv = tape.param(p.wv);
    let wo = tape.param(p.wo);
    let q = tape.matmul(queries, wq)?;
    let k = tape.matmul(keys_values, wk)?;
    let v = tape.matmul(keys_values, wv)?;
    let c = tape.shape(q)[1];
    let d = c / heads;
    let scale = T::one() / T::from_usize_lossy(d).sqrt();
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * d, d)?,
                tape.slice_cols(k, h * d, d)?,
                tape.slice_cols(v, h * d, d)?,
            )
        };
        let scores = tape.matmul_bt(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let probs = match mask {
            Some(m) => tape.masked_softmax(scores, m)?,
            None => tape.softmax(scores)?,
        };
        outs.push(tape.matmul(probs, vh)?);
    }
    let merged = if heads == 1 {
        outs[0]
    } else {
        tape.concat_cols(&outs)?
    };
    tape.matmul(merged, wo)
}

pub(crate) fn mlp<T: Scalar>(tape: &mut Tape<'_, T>, x: Var, p: MlpParams) -> Result<Var> {
    let w1 = tape.param(p.w1);
    let b1 = tape.param(p.b1);
    let w2 = tape.param(p.w2);
    let b2 = tape.param(p.b2);
    let h = tape.matmul(x, w1)?;
    let h = tape.add_row(h, b1)?;
    let h = tape.gelu(h);
    let o = tape.matmul(h, w2)?;
    tape.add_row(o, b2)
}

impl BackboneParams {
    /// Patchified frames (each P×patch_dim) → per-patch projection plus the
    /// learned per-patch position rows.
    pub fn encode_frames<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &BackboneConfig,
        patches: &[Tensor<T>],
    ) -> Result<EncodedScene> {
        let proj = tape.param(self.patch_proj);
        let pos = tape.param(self.patch_pos);
        let mut frames = Vec::with_capacity(patches.len());
        for p in patches {
            if p.shape() != [cfg.patches_per_frame, cfg.patch_dim] {
                return Err(Error::Config(format!(
                    "patchified frame has shape {:?}, expected [{}, {}]",
                    p.shape(),
                    cfg.patches_per_frame,
                    cfg.patch_dim
                )));
            }
            let x = tape.constant(p.clone());
            let e = tape.matmul(x, proj)?;
            frames.push(tape.add(e, pos)?);
        }
        Ok(EncodedScene { frames })
    }

    /// Builds the `[F_v, Q_m, Q_s, question, answer]` embeddings with
    /// sequence position rows added over the full length.
    pub fn assemble<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &BackboneConfig,
        scene: &EncodedScene,
        bank: &QueryBank,
        question: &[usize],
        answer: &[usize],
    ) -> Result<(Var, SequenceLayout)> {
        let k_m = bank.metric.map_or(0, |_| cfg.queries);
        let k_s = bank.structural.map_or(0, |_| cfg.queries);
        let layout = SequenceLayout::with_banks(
            scene.frames.len(),
            cfg.patches_per_frame,
            k_m,
            k_s,
            question.len(),
            answer.len(),
        )?;
        let t = layout.total_len();
        if t > cfg.max_len {
            return Err(Error::Capacity {
                len: t,
                max: cfg.max_len,
            });
        }
        let mut parts = scene.frames.clone();
        if let Some(id) = bank.metric {
            parts.push(tape.param(id));
        }
        if let Some(id) = bank.structural {
            parts.push(tape.param(id));
        }
        let emb = tape.param(self.tok_emb);
        let text: Vec<usize> = question.iter().chain(answer).copied().collect();
        parts.push(tape.gather(emb, &text)?);
        let x = tape.concat_rows(&parts)?;
        let pos = tape.param(self.pos_emb);
        let pos = tape.slice_rows(pos, 0, t)?;
        Ok((tape.add(x, pos)?, layout))
    }

    /// Pre-norm transformer stack with the same mask at every layer,
    /// followed by the final layer norm.
    pub fn forward<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        cfg: &BackboneConfig,
        embeds: Var,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let t = tape.shape(embeds)[0];
        if mask.size() != t {
            return Err(Error::dim("forward mask", &[t, t], &[mask.size(), mask.size()]));
        }
        let additive = mask.additive::<T>();
        let mut x = embeds;
        for (l, block) in self.blocks.iter().enumerate() {
            let h = layer_norm(tape, x, block.ln1)?;
            let a = attention(tape, h, h, block.attn, cfg.heads, Some(&additive))?;
            x = tape.add(x, a)?;
            let h = layer_norm(tape, x, block.ln2)?;
            let m = mlp(tape, h, block.mlp)?;
            x = tape.add(x, m)?;
            if tape.value(x).iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFiniteActivation { layer: l });
            }
        }
        layer_norm(tape, x, self.ln_f)
    }

    /// Slices query outputs and per-frame patch states; answer logits come
    /// from the rows one position earlier (next-token prediction).
    pub fn extract<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        hidden: Var,
        layout: &SequenceLayout,
    ) -> Result<BackboneOutputs> {
        let mut frames = Vec::with_capacity(layout.n_frames);
        for i in 0..layout.n_frames {
            frames.push(tape.slice_rows(hidden, i * layout.patches_per_frame, layout.patches_per_frame)?);
        }
        let metric = if layout.metric_queries > 0 {
            Some(tape.slice_rows(hidden, layout.metric().start, layout.metric_queries)?)
        } else {
            None
        };
        let structural = if layout.structural_queries > 0 {
            Some(tape.slice_rows(hidden, layout.structural().start, layout.structural_queries)?)
        } else {
            None
        };
        let answer_logits = if layout.answer_len > 0 {
            Some(self.logits_at(tape, hidden, layout.answer().start - 1, layout.answer_len)?)
        } else {
            None
        };
        Ok(BackboneOutputs {
            metric,
            structural,
            frames,
            answer_logits,
        })
    }

    /// Next-token logits from `len` hidden rows starting at `start`.
    pub fn logits_at<T: Scalar>(
        &self,
        tape: &mut Tape<'_, T>,
        hidden: Var,
        start: usize,
        len: usize,
    ) -> Result<Var> {
        let rows = tape.slice_rows(hidden, start, len)?;
        let u = tape.param(self.unembed);
        tape.matmul(rows, u)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn patchify_orders_rows_then_columns() {
        // 4×4×3 frame, 4 patches of 2×2×3
        let data: Vec<f64> = (0..48).map(|v| v as f64).collect();
        let f = Tensor::<f64>::new(&[4, 4, 3], data).unwrap();
        let p = patchify(&f, 4).unwrap();
        assert_eq!(p.shape(), &[4, 12]);
        // patch (0,1): pixels (0,2),(0,3),(1,2),(1,3)
        assert_eq!(&p.row(1)[..3], &[6., 7., 8.]);
        assert_eq!(&p.row(1)[6..9], &[18., 19., 20.]);
        assert!(patchify(&f, 3).is_err());
        assert!(patchify(&Tensor::<f64>::zeros(&[6, 6, 3]), 16).is_err());
    }

    #[test]
    fn config_rejects_indivisible_heads() {
        let cfg = BackboneConfig {
            width: 10,
            heads: 4,
            layers: 1,
            patches_per_frame: 4,
            patch_dim: 3,
            vocab: 8,
            max_len: 32,
            queries: 2,
        };
        assert!(cfg.validate().is_err());
    }
}
