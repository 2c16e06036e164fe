//! EVGF expert feature files.
//!
//! Layout (little-endian): magic `EVGF`, u32 version = 1, u8 pathway
//! (0 metric, 1 structural), u32 frame_count, u32 K_v, u32 D_e, then
//! frame_count·K_v·D_e f32 values in row-major order.

use std::path::Path;

use crate::binio::Reader;
use crate::error::{Error, Result};
use crate::evg::{ExpertFeatureSet, Pathway};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"EVGF";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 1 + 4 + 4 + 4;

pub fn encode(set: &ExpertFeatureSet) -> Vec<u8> {
    let n = set.frames.len() * set.visual_queries * set.expert_dim;
    let mut out = Vec::with_capacity(HEADER_LEN + 4 * n);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(set.pathway.code());
    out.extend_from_slice(&(set.frames.len() as u32).to_le_bytes());
    out.extend_from_slice(&(set.visual_queries as u32).to_le_bytes());
    out.extend_from_slice(&(set.expert_dim as u32).to_le_bytes());
    for f in &set.frames {
        for v in f.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<ExpertFeatureSet> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    r.version(VERSION)?;
    let at = r.pos();
    let code = r.u8("pathway")?;
    let pathway = Pathway::from_code(code).ok_or_else(|| Error::Parse {
        offset: at,
        msg: format!("unknown pathway {code}"),
    })?;
    let frames = r.u32("frame_count")? as usize;
    let kv = r.u32("K_v")? as usize;
    let de = r.u32("D_e")? as usize;
    if kv == 0 || de == 0 {
        return Err(Error::Parse {
            offset: r.pos() - 8,
            msg: format!("empty feature shape {kv}x{de}"),
        });
    }
    let per = kv * de;
    let mut out = Vec::with_capacity(frames.min(r.remaining() / (4 * per) + 1));
    for _ in 0..frames {
        let start = r.pos();
        let raw = r.take(per * 4, "payload")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(k) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Parse {
                offset: start + 4 * k,
                msg: "non-finite payload value".into(),
            });
        }
        out.push(Tensor::new(&[kv, de], data)?);
    }
    r.finish()?;
    ExpertFeatureSet::new(pathway, kv, de, out)
}

pub fn write_expert_file(set: &ExpertFeatureSet, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, encode(set))?;
    Ok(())
}

pub fn read_expert_file(path: impl AsRef<Path>) -> Result<ExpertFeatureSet> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> ExpertFeatureSet {
        let frames = vec![
            Tensor::new(&[2, 3], vec![1.0, -2.5, 0.0, 3.25, 1e-7, -0.0]).unwrap(),
            Tensor::new(&[2, 3], vec![9.0; 6]).unwrap(),
        ];
        ExpertFeatureSet::new(Pathway::Structural, 2, 3, frames).unwrap()
    }

    #[test]
    fn golden_header_bytes() {
        let bytes = encode(&sample());
        assert_eq!(&bytes[..4], b"EVGF");
        assert_eq!(&bytes[4..8], &[1, 0, 0, 0]);
        assert_eq!(bytes[8], 1);
        assert_eq!(&bytes[9..13], &[2, 0, 0, 0]);
        assert_eq!(&bytes[13..17], &[2, 0, 0, 0]);
        assert_eq!(&bytes[17..21], &[3, 0, 0, 0]);
        assert_eq!(&bytes[21..25], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 21 + 12 * 4);
    }

    #[test]
    fn corrupt_inputs_report_offsets() {
        let mut bytes = encode(&sample());
        bytes[0] = b'X';
        assert_eq!(decode(&bytes).unwrap_err().to_string(), "bad magic at offset 0");

        let mut bytes = encode(&sample());
        bytes[4] = 2;
        assert!(matches!(decode(&bytes), Err(Error::Parse { offset: 4, .. })));

        let bytes = encode(&sample());
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Parse { offset: 45, .. })));

        let mut bytes = encode(&sample());
        bytes[25..29].copy_from_slice(&f32::NAN.to_le_bytes());
        assert!(matches!(decode(&bytes), Err(Error::Parse { offset: 25, .. })));

        let mut bytes = encode(&sample());
        bytes[8] = 7;
        assert!(matches!(decode(&bytes), Err(Error::Parse { offset: 8, .. })));
    }

    #[test]
    fn empty_set_is_accepted() {
        let set = ExpertFeatureSet::new(Pathway::Metric, 4, 16, vec![]).unwrap();
        let back = decode(&encode(&set)).unwrap();
        assert!(back.is_empty());
        assert_eq!((back.visual_queries, back.expert_dim), (4, 16));
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(frames in 0usize..4, kv in 1usize..5, de in 1usize..6,
                                   seed in any::<u64>(), metric in any::<bool>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let data: Vec<Tensor<f32>> = (0..frames)
                .map(|_| Tensor::new(&[kv, de], (0..kv * de).map(|_| rng.random::<f32>() * 8.0 - 4.0).collect()).unwrap())
                .collect();
            let p = if metric { Pathway::Metric } else { Pathway::Structural };
            let set = ExpertFeatureSet::new(p, kv, de, data).unwrap();
            let bytes = encode(&set);
            let back = decode(&bytes).unwrap();
            prop_assert_eq!(&back, &set);
            prop_assert_eq!(encode(&back), bytes);
        }
    }
}
