//! Token layout `[visual frames | metric queries | structural queries |
//! question | answer]` and the task-decoupled causal attention mask.
//!
//! Ranges are half-open internally. [`MaskSummary`] reports the query ranges
//! as closed intervals `[S, E]`.

use std::fmt::Write as _;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceLayout {
    pub n_frames: usize,
    pub patches_per_frame: usize,
    pub metric_queries: usize,
    pub structural_queries: usize,
    pub question_len: usize,
    pub answer_len: usize,
}

/// Layout with `k` queries in each bank.
pub fn build_layout(
    n_frames: usize,
    patches_per_frame: usize,
    k: usize,
    question_len: usize,
    answer_len: usize,
) -> Result<SequenceLayout> {
    if k == 0 {
        return Err(Error::Config("query count K must be at least 1".into()));
    }
    SequenceLayout::with_banks(n_frames, patches_per_frame, k, k, question_len, answer_len)
}

impl SequenceLayout {
    /// General form allowing an empty bank, as used by the ablation variants.
    pub fn with_banks(
        n_frames: usize,
        patches_per_frame: usize,
        metric_queries: usize,
        structural_queries: usize,
        question_len: usize,
        answer_len: usize,
    ) -> Result<Self> {
        if n_frames == 0 {
            return Err(Error::Config("at least one frame is required".into()));
        }
        if patches_per_frame == 0 {
            return Err(Error::Config("at least one patch per frame is required".into()));
        }
        if question_len == 0 {
            return Err(Error::Config("question must be nonempty".into()));
        }
        Ok(Self {
            n_frames,
            patches_per_frame,
            metric_queries,
            structural_queries,
            question_len,
            answer_len,
        })
    }

    pub fn visual_len(&self) -> usize {
        self.n_frames * self.patches_per_frame
    }

    pub fn frame(&self, i: usize) -> Range<usize> {
        let p = self.patches_per_frame;
        i * p..(i + 1) * p
    }

    pub fn visual(&self) -> Range<usize> {
        0..self.visual_len()
    }

    pub fn metric(&self) -> Range<usize> {
        let s = self.visual_len();
        s..s + self.metric_queries
    }

    pub fn structural(&self) -> Range<usize> {
        let s = self.metric().end;
        s..s + self.structural_queries
    }

    pub fn question(&self) -> Range<usize> {
        let s = self.structural().end;
        s..s + self.question_len
    }

    pub fn answer(&self) -> Range<usize> {
        let s = self.question().end;
        s..s + self.answer_len
    }

    pub fn total_len(&self) -> usize {
        self.answer().end
    }

    /// Same layout without answer tokens.
    pub fn prompt_only(&self) -> Self {
        Self {
            answer_len: 0,
            ..self.clone()
        }
    }
}

fn closed(r: &Range<usize>) -> Option<[usize; 2]> {
    (!r.is_empty()).then(|| [r.start, r.end - 1])
}

/// Square T×T mask; `true` entries are blocked (additive −∞).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    size: usize,
    blocked: Vec<bool>,
}

/// Causal mask plus the structural→metric block.
pub fn build_mask(layout: &SequenceLayout) -> AttentionMask {
    build_mask_with(layout, true)
}

/// `decouple = false` gives the plain causal mask (the no-mask ablation).
pub fn build_mask_with(layout: &SequenceLayout, decouple: bool) -> AttentionMask {
    let t = layout.total_len();
    let mut blocked = vec![false; t * t];
    for i in 0..t {
        for j in i + 1..t {
            blocked[i * t + j] = true;
        }
    }
    if decouple {
        for i in layout.structural() {
            for j in layout.metric() {
                blocked[i * t + j] = true;
            }
        }
    }
    AttentionMask { size: t, blocked }
}

impl AttentionMask {
    pub fn from_blocked(size: usize, blocked: Vec<bool>) -> Result<Self> {
        if blocked.len() != size * size {
            return Err(Error::dim("attention mask", &[size, size], &[blocked.len()]));
        }
        Ok(Self { size, blocked })
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn is_blocked(&self, i: usize, j: usize) -> bool {
        self.blocked[i * self.size + j]
    }

    pub fn set_blocked(&mut self, i: usize, j: usize, blocked: bool) {
        self.blocked[i * self.size + j] = blocked;
    }

    pub fn blocked_count(&self) -> usize {
        self.blocked.iter().filter(|b| **b).count()
    }

    /// Additive form: 0 where allowed, the sentinel where blocked.
    pub fn additive<T: Scalar>(&self) -> Vec<T> {
        let s = T::mask_sentinel();
        self.blocked
            .iter()
            .map(|&b| if b { s } else { T::zero() })
            .collect()
    }

    /// Text grid, '.' allowed and 'X' blocked, one line per query row,
    /// prefixed by the segment the row belongs to.
    pub fn render(&self, layout: &SequenceLayout) -> String {
        let mut out = String::new();
        let s = summarize(self, layout);
        let _ = writeln!(out, "T = {}", s.total_len);
        for (i, r) in s.ranges.visual.iter().enumerate() {
            let _ = writeln!(out, "frame {i}: [{}, {}]", r[0], r[1]);
        }
        for (name, r) in [
            ("metric", s.ranges.metric),
            ("structural", s.ranges.structural),
            ("question", s.ranges.question),
            ("answer", s.ranges.answer),
        ] {
            if let Some(r) = r {
                let _ = writeln!(out, "{name}: [{}, {}]", r[0], r[1]);
            }
        }
        let _ = writeln!(out, "blocked pairs: {}", s.blocked_pairs_count);
        for i in 0..self.size {
            let tag = segment_tag(layout, i);
            let _ = write!(out, "{tag} {i:>4} ");
            for j in 0..self.size {
                out.push(if self.is_blocked(i, j) { 'X' } else { '.' });
            }
            out.push('\n');
        }
        out
    }
}

fn segment_tag(layout: &SequenceLayout, i: usize) -> char {
    if layout.visual().contains(&i) {
        'v'
    } else if layout.metric().contains(&i) {
        'm'
    } else if layout.structural().contains(&i) {
        's'
    } else if layout.question().contains(&i) {
        'q'
    } else {
        'a'
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClosedRanges {
    pub visual: Vec<[usize; 2]>,
    pub metric: Option<[usize; 2]>,
    pub structural: Option<[usize; 2]>,
    pub question: Option<[usize; 2]>,
    pub answer: Option<[usize; 2]>,
}

/// JSON export of a mask: `{T, ranges, blocked_pairs_count}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSummary {
    #[serde(rename = "T")]
    pub total_len: usize,
    pub ranges: ClosedRanges,
    pub blocked_pairs_count: usize,
}

pub fn summarize(mask: &AttentionMask, layout: &SequenceLayout) -> MaskSummary {
    MaskSummary {
        total_len: layout.total_len(),
        ranges: ClosedRanges {
            visual: (0..layout.n_frames)
                .filter_map(|i| closed(&layout.frame(i)))
                .collect(),
            metric: closed(&layout.metric()),
            structural: closed(&layout.structural()),
            question: closed(&layout.question()),
            answer: closed(&layout.answer()),
        },
        blocked_pairs_count: mask.blocked_count(),
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub enum MaskViolation {
    SizeMismatch { mask: usize, layout: usize },
    /// An allowed entry with j > i.
    Acausal { i: usize, j: usize },
    /// Structural row i may see metric column j.
    DecouplingMissing { i: usize, j: usize },
    /// Row without any allowed entry (or with its diagonal blocked).
    SelfBlocked { i: usize },
}

impl std::fmt::Display for MaskViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::SizeMismatch { mask, layout } => {
                write!(f, "mask size {mask} does not match layout length {layout}")
            }
            Self::Acausal { i, j } => write!(f, "acausal entry ({i},{j}): j > i is allowed"),
            Self::DecouplingMissing { i, j } => write!(
                f,
                "structural row {i} attends metric column {j} in [S_s,E_s]x[S_m,E_m]"
            ),
            Self::SelfBlocked { i } => write!(f, "row {i} blocks its own position"),
        }
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct MaskReport {
    pub passed: bool,
    pub checked_entries: usize,
    pub violations: Vec<MaskViolation>,
}

/// Exhaustively checks causality, the structural→metric block, and that
/// every row keeps its diagonal.
pub fn verify_mask(mask: &AttentionMask, layout: &SequenceLayout) -> MaskReport {
    let t = layout.total_len();
    if mask.size() != t {
        return MaskReport {
            passed: false,
            checked_entries: 0,
            violations: vec![MaskViolation::SizeMismatch {
                mask: mask.size(),
                layout: t,
            }],
        };
    }
    let metric = layout.metric();
    let structural = layout.structural();
    let mut violations = Vec::new();
    for i in 0..t {
        if mask.is_blocked(i, i) {
            violations.push(MaskViolation::SelfBlocked { i });
        }
        for j in 0..t {
            if mask.is_blocked(i, j) {
                continue;
            }
            if j > i {
                violations.push(MaskViolation::Acausal { i, j });
            }
            if structural.contains(&i) && metric.contains(&j) {
                violations.push(MaskViolation::DecouplingMissing { i, j });
            }
        }
    }
    MaskReport {
        passed: violations.is_empty(),
        checked_entries: t * t,
        violations,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_examples() {
        let l = build_layout(1, 3, 1, 1, 1).unwrap();
        assert_eq!(l.visual(), 0..3);
        assert_eq!(closed(&l.metric()), Some([3, 3]));
        assert_eq!(closed(&l.structural()), Some([4, 4]));
        assert_eq!(l.question(), 5..6);
        assert_eq!(l.answer(), 6..7);
        assert_eq!(l.total_len(), 7);

        let l = build_layout(2, 2, 2, 3, 0).unwrap();
        assert_eq!(l.visual(), 0..4);
        assert_eq!(l.metric(), 4..6);
        assert_eq!(l.structural(), 6..8);
        assert_eq!(l.question(), 8..11);
        assert_eq!(l.total_len(), 11);

        assert_eq!(build_layout(1, 16, 40, 8, 4).unwrap().total_len(), 108);
    }

    #[test]
    fn zero_frames_or_queries_rejected() {
        assert!(matches!(build_layout(0, 3, 1, 1, 0), Err(Error::Config(_))));
        assert!(matches!(build_layout(1, 3, 0, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn mask_rows_for_small_layout() {
        let l = build_layout(1, 3, 1, 1, 0).unwrap();
        let m = build_mask(&l);
        let allowed = |i: usize| (0..l.total_len()).filter(|&j| !m.is_blocked(i, j)).collect::<Vec<_>>();
        assert_eq!(allowed(4), vec![0, 1, 2, 4]);
        assert_eq!(allowed(3), vec![0, 1, 2, 3]);
        assert_eq!(allowed(5), vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn verify_catches_violations() {
        let l = build_layout(2, 2, 2, 2, 1).unwrap();
        let m = build_mask(&l);
        assert!(verify_mask(&m, &l).passed);

        let no_block = build_mask_with(&l, false);
        let r = verify_mask(&no_block, &l);
        assert!(!r.passed);
        assert!(r
            .violations
            .iter()
            .all(|v| matches!(v, MaskViolation::DecouplingMissing { i, j }
                if l.structural().contains(i) && l.metric().contains(j))));
        assert_eq!(r.violations.len(), 4);

        let mut acausal = m.clone();
        acausal.set_blocked(0, 5, false);
        let r = verify_mask(&acausal, &l);
        assert_eq!(r.violations, vec![MaskViolation::Acausal { i: 0, j: 5 }]);
    }

    #[test]
    fn summary_reports_closed_intervals() {
        let l = build_layout(1, 3, 1, 1, 0).unwrap();
        let s = summarize(&build_mask(&l), &l);
        let json = serde_json::to_value(&s).unwrap();
        assert_eq!(json["T"], 6);
        assert_eq!(json["ranges"]["metric"], serde_json::json!([3, 3]));
        assert_eq!(json["ranges"]["answer"], serde_json::Value::Null);
        // 15 causal + 1 decoupling
        assert_eq!(s.blocked_pairs_count, 16);
        let back: MaskSummary = serde_json::from_value(json).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn render_marks_blocked_entries() {
        let l = build_layout(1, 3, 1, 1, 0).unwrap();
        let text = build_mask(&l).render(&l);
        assert!(text.contains("s    4 ...X.X"), "{text}");
        assert!(text.contains("metric: [3, 3]"));
    }

    proptest! {
        #[test]
        fn random_layouts_verify(n in 1usize..=3, p in 1usize..=8, k in 1usize..=8,
                                 lq in 1usize..=6, la in 0usize..=4) {
            let l = build_layout(n, p, k, lq, la).unwrap();
            prop_assert_eq!(l.total_len(), n * p + 2 * k + lq + la);
            let m = build_mask(&l);
            prop_assert!(verify_mask(&m, &l).passed);
            // Each query row sees all visual columns and only its own bank among queries.
            for i in l.metric().chain(l.structural()) {
                let own = if l.metric().contains(&i) { l.metric() } else { l.structural() };
                for j in 0..l.question().start {
                    let expect = l.visual().contains(&j) || (own.contains(&j) && j <= i);
                    prop_assert_eq!(!m.is_blocked(i, j), expect);
                }
            }
        }
    }
}
