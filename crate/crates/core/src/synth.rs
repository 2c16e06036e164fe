//! Deterministic synthetic scenes, spatial QA, and linear stand-in experts.
//!
//! A scene is a G×G grid of cells. Depths lie in [0.5, 5.0] and follow a
//! randomly tilted plane with per-cell jitter; 2–4 objects of distinct
//! classes occupy distinct cells. Frame 0 is the
//! centre view and later frames may be shifted one cell left or right. Pixels
//! carry the depth as brightness in channel 0 and the object class as a
//! coloured glyph in channels 1–2, dimmer for smaller size tiers; cells shifted out of view are black.

use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evg::{ExpertFeatureSet, Pathway};
use crate::expert_file::{read_expert_file, write_expert_file};
use crate::tensor::Tensor;

pub const DEPTH_MIN: f32 = 0.5;
pub const DEPTH_MAX: f32 = 5.0;
/// Upper edges of the first two depth bins; the last bin is [3.5, 5].
pub const DEPTH_BIN_EDGES: [f32; 2] = [2.0, 3.5];
pub const N_CLASSES: usize = 6;
pub const MIN_OBJECTS: usize = 2;
pub const MAX_OBJECTS: usize = 4;
/// Depth gap that keeps relative-distance questions unambiguous.
pub const MIN_DEPTH_GAP: f32 = 0.5;
/// Standard deviation of the expert projection entries.
pub const EXPERT_MAP_STD: f64 = 0.1;

const PALETTE: [[f32; 2]; N_CLASSES] = [
    [1.0, 0.0],
    [0.0, 1.0],
    [1.0, 1.0],
    [1.0, 0.4],
    [0.4, 1.0],
    [0.7, 0.3],
];

/// Per-class pixel mask inside a cell: block, top bar, left bar, checker,
/// ring, cross.
fn glyph(class: usize, y: usize, x: usize, n: usize) -> bool {
    let edge = |v: usize| v == 0 || v + 1 == n;
    match class {
        0 => true,
        1 => 2 * y < n,
        2 => 2 * x < n,
        3 => (y + x) % 2 == 0,
        4 => edge(y) || edge(x),
        _ => y == x || y + x + 1 == n,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthConfig {
    /// Cells per side G; frames hold G² patches.
    pub grid: usize,
    pub cell_px: usize,
    pub frames: usize,
    pub expert_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            grid: 4,
            cell_px: 4,
            frames: 2,
            expert_seed: 1234,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if !(2..=5).contains(&self.grid) {
            return Err(Error::Config(format!("grid {} outside 2..=5", self.grid)));
        }
        if self.cell_px == 0 || self.frames == 0 {
            return Err(Error::Config("cell_px and frames must be positive".into()));
        }
        Ok(())
    }

    pub fn image_side(&self) -> usize {
        self.grid * self.cell_px
    }

    pub fn patches(&self) -> usize {
        self.grid * self.grid
    }

    pub fn patch_dim(&self) -> usize {
        self.cell_px * self.cell_px * 3
    }

    pub fn vocab(&self) -> Vocab {
        Vocab { grid: self.grid }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TaskType {
    AbsoluteDepthBin,
    RelativeDistance,
    RelativeDirection,
    ObjectCount,
    ViewChange,
}

impl TaskType {
    pub const ALL: [TaskType; 5] = [
        TaskType::AbsoluteDepthBin,
        TaskType::RelativeDistance,
        TaskType::RelativeDirection,
        TaskType::ObjectCount,
        TaskType::ViewChange,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TaskType::AbsoluteDepthBin => "absolute-depth-bin",
            TaskType::RelativeDistance => "relative-distance",
            TaskType::RelativeDirection => "relative-direction",
            TaskType::ObjectCount => "object-count",
            TaskType::ViewChange => "view-change",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Config(format!("unsupported task type {s}")))
    }

    pub fn index(self) -> usize {
        self as usize
    }

    /// Number of distinct answers.
    pub fn choices(self) -> usize {
        match self {
            TaskType::AbsoluteDepthBin => 3,
            TaskType::RelativeDistance => 2,
            TaskType::RelativeDirection => 4,
            TaskType::ObjectCount => MAX_OBJECTS - MIN_OBJECTS + 1,
            TaskType::ViewChange => 3,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Viewpoint {
    Left,
    Center,
    Right,
}

impl Viewpoint {
    /// Image column offset of scene content: moving the camera left shifts
    /// the content right.
    pub fn offset(self) -> isize {
        match self {
            Viewpoint::Left => 1,
            Viewpoint::Center => 0,
            Viewpoint::Right => -1,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Viewpoint::Left => 0,
            Viewpoint::Center => 1,
            Viewpoint::Right => 2,
        }
    }
}

/// Micro-vocabulary (< 64 tokens for grids up to 5×5).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Vocab {
    pub grid: usize,
}

impl Vocab {
    pub const PAD: usize = 0;

    pub fn task(&self, t: TaskType) -> usize {
        1 + t.index()
    }

    pub fn cell(&self, row: usize, col: usize) -> usize {
        6 + row * self.grid + col
    }

    fn after_cells(&self) -> usize {
        6 + self.grid * self.grid
    }

    pub fn object(&self, class: usize) -> usize {
        self.after_cells() + class
    }

    pub fn bin(&self, b: usize) -> usize {
        self.after_cells() + N_CLASSES + b
    }

    fn words(&self) -> usize {
        self.after_cells() + N_CLASSES + 3
    }

    pub fn first(&self) -> usize {
        self.words()
    }
    pub fn second(&self) -> usize {
        self.words() + 1
    }
    pub fn left(&self) -> usize {
        self.words() + 2
    }
    pub fn right(&self) -> usize {
        self.words() + 3
    }
    pub fn above(&self) -> usize {
        self.words() + 4
    }
    pub fn below(&self) -> usize {
        self.words() + 5
    }
    pub fn none(&self) -> usize {
        self.words() + 6
    }
    pub fn yes(&self) -> usize {
        self.words() + 7
    }
    pub fn no(&self) -> usize {
        self.words() + 8
    }

    pub fn count(&self, n: usize) -> usize {
        self.words() + 9 + n
    }

    /// Every answer token a task can produce.
    pub fn answers(&self, task: TaskType) -> Vec<usize> {
        match task {
            TaskType::AbsoluteDepthBin => (0..3).map(|b| self.bin(b)).collect(),
            TaskType::RelativeDistance => vec![self.first(), self.second()],
            TaskType::RelativeDirection => vec![self.left(), self.right(), self.above(), self.below()],
            TaskType::ObjectCount => (MIN_OBJECTS..=MAX_OBJECTS).map(|n| self.count(n)).collect(),
            TaskType::ViewChange => vec![self.left(), self.none(), self.right()],
        }
    }

    pub fn size(&self) -> usize {
        self.count(MAX_OBJECTS) + 1
    }

    pub fn name(&self, id: usize) -> String {
        let g2 = self.grid * self.grid;
        let w = self.words();
        match id {
            0 => "<pad>".into(),
            1..=5 => TaskType::ALL[id - 1].name().into(),
            i if i < 6 + g2 => format!("cell({},{})", (i - 6) / self.grid, (i - 6) % self.grid),
            i if i < self.after_cells() + N_CLASSES => format!("obj{}", i - self.after_cells()),
            i if i < w => format!("bin{}", i - self.after_cells() - N_CLASSES),
            i if i < w + 9 => ["first", "second", "left", "right", "above", "below", "none", "yes", "no"]
                [i - w]
                .into(),
            i if i < self.size() => format!("{}", i - w - 9),
            i => format!("<unk {i}>"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SceneObject {
    pub class: usize,
    pub row: usize,
    pub col: usize,
    /// 1..=3; scales the glyph colour.
    pub size: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthScene {
    pub seed: u64,
    pub grid: usize,
    /// Row-major G×G depths in metres.
    pub depth: Vec<f32>,
    pub objects: Vec<SceneObject>,
    pub views: Vec<Viewpoint>,
    /// Each H×W×3 with values in [0, 1].
    pub frames: Vec<Tensor<f32>>,
}

impl SynthScene {
    pub fn depth_at(&self, row: usize, col: usize) -> f32 {
        self.depth[row * self.grid + col]
    }

    /// Scene column shown at image column `col` under `view`.
    pub fn source_col(&self, view: Viewpoint, col: usize) -> Option<usize> {
        let c = col as isize - view.offset();
        (0..self.grid as isize).contains(&c).then_some(c as usize)
    }

    pub fn object_at(&self, row: usize, col: usize) -> Option<&SceneObject> {
        self.objects.iter().find(|o| o.row == row && o.col == col)
    }

    /// Depth grid as seen from `view`; out-of-view cells are 0.
    pub fn view_depth(&self, view: Viewpoint) -> Vec<f32> {
        let g = self.grid;
        let mut out = vec![0.0; g * g];
        for r in 0..g {
            for c in 0..g {
                if let Some(sc) = self.source_col(view, c) {
                    out[r * g + c] = self.depth_at(r, sc);
                }
            }
        }
        out
    }
}

fn brightness(depth: f32) -> f32 {
    0.2 + 0.8 * (DEPTH_MAX - depth) / (DEPTH_MAX - DEPTH_MIN)
}

fn render(scene: &SynthScene, view: Viewpoint, cell_px: usize) -> Tensor<f32> {
    let g = scene.grid;
    let side = g * cell_px;
    let mut img = vec![0.0f32; side * side * 3];
    for r in 0..g {
        for c in 0..g {
            let Some(sc) = scene.source_col(view, c) else {
                continue;
            };
            let b = brightness(scene.depth_at(r, sc));
            let obj = scene.object_at(r, sc);
            for y in 0..cell_px {
                for x in 0..cell_px {
                    let px = ((r * cell_px + y) * side + c * cell_px + x) * 3;
                    img[px] = b;
                    if let Some(o) = obj.filter(|o| glyph(o.class, y, x, cell_px)) {
                        let tone = (3 + o.size) as f32 / 6.0;
                        img[px + 1] = tone * PALETTE[o.class][0];
                        img[px + 2] = tone * PALETTE[o.class][1];
                    }
                }
            }
        }
    }
    Tensor::new(&[side, side, 3], img).expect("image shape")
}

/// Renders the scene described by `seed`.
pub fn gen_scene(seed: u64, cfg: &SynthConfig) -> SynthScene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = cfg.grid;
    // tilted ground plane plus per-cell jitter
    let base = rng.random_range(1.0f32..=4.5);
    let tilt = rng.random_range(-0.8f32..=0.8);
    let mid = (g as f32 - 1.0) / 2.0;
    let depth: Vec<f32> = (0..g * g)
        .map(|i| {
            let d = base + tilt * (i / g) as f32 - tilt * mid + rng.random_range(-0.6f32..=0.6);
            d.clamp(DEPTH_MIN, DEPTH_MAX)
        })
        .collect();
    let n_obj = rng.random_range(MIN_OBJECTS..=MAX_OBJECTS).min(g * g);
    let mut cells: Vec<usize> = (0..g * g).collect();
    cells.shuffle(&mut rng);
    let mut classes: Vec<usize> = (0..N_CLASSES).collect();
    classes.shuffle(&mut rng);
    let objects = (0..n_obj)
        .map(|i| SceneObject {
            class: classes[i],
            row: cells[i] / g,
            col: cells[i] % g,
            size: rng.random_range(1..=3),
        })
        .collect();
    let mut views = vec![Viewpoint::Center];
    for _ in 1..cfg.frames {
        views.push([Viewpoint::Left, Viewpoint::Center, Viewpoint::Right][rng.random_range(0..3)]);
    }
    let mut scene = SynthScene {
        seed,
        grid: g,
        depth,
        objects,
        views,
        frames: Vec::new(),
    };
    scene.frames = scene
        .views
        .iter()
        .map(|&v| render(&scene, v, cfg.cell_px))
        .collect();
    scene
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QASample {
    pub scene_seed: u64,
    pub task: TaskType,
    pub question: Vec<usize>,
    pub answer: Vec<usize>,
}

pub fn depth_bin(depth: f32) -> usize {
    DEPTH_BIN_EDGES.iter().filter(|&&e| depth >= e).count()
}

/// Draws a question of the given type about `scene` and answers it from the
/// latent description.
pub fn gen_qa<R: Rng + ?Sized>(scene: &SynthScene, task: TaskType, rng: &mut R) -> QASample {
    let v = Vocab { grid: scene.grid };
    let g = scene.grid;
    let (question, answer) = match task {
        TaskType::AbsoluteDepthBin => {
            let (r, c) = (rng.random_range(0..g), rng.random_range(0..g));
            (
                vec![v.task(task), v.cell(r, c)],
                v.bin(depth_bin(scene.depth_at(r, c))),
            )
        }
        TaskType::RelativeDistance => {
            let mut pairs = Vec::new();
            for a in 0..g * g {
                for b in 0..g * g {
                    if a != b && (scene.depth[a] - scene.depth[b]).abs() >= MIN_DEPTH_GAP {
                        pairs.push((a, b));
                    }
                }
            }
            // A grid where every depth sits within the gap is vanishingly
            // unlikely; fall back to any distinct pair.
            let (a, b) = pairs
                .choose(rng)
                .copied()
                .unwrap_or((0, 1.min(g * g - 1)));
            let ans = if scene.depth[a] < scene.depth[b] {
                v.first()
            } else {
                v.second()
            };
            (
                vec![v.task(task), v.cell(a / g, a % g), v.cell(b / g, b % g)],
                ans,
            )
        }
        TaskType::RelativeDirection => {
            let n = scene.objects.len();
            let i = rng.random_range(0..n);
            let j = (i + rng.random_range(1..n)) % n;
            let (a, b) = (scene.objects[i], scene.objects[j]);
            let dr = a.row as isize - b.row as isize;
            let dc = a.col as isize - b.col as isize;
            let ans = if dc.abs() >= dr.abs() {
                if dc < 0 {
                    v.left()
                } else {
                    v.right()
                }
            } else if dr < 0 {
                v.above()
            } else {
                v.below()
            };
            (vec![v.task(task), v.object(a.class), v.object(b.class)], ans)
        }
        TaskType::ObjectCount => (vec![v.task(task)], v.count(scene.objects.len())),
        TaskType::ViewChange => {
            let ans = match scene.views.last().copied().unwrap_or(Viewpoint::Center) {
                Viewpoint::Left => v.left(),
                Viewpoint::Center => v.none(),
                Viewpoint::Right => v.right(),
            };
            (vec![v.task(task)], ans)
        }
    };
    QASample {
        scene_seed: scene.seed,
        task,
        question,
        answer: vec![answer],
    }
}

fn expert_map(seed: u64, pathway: Pathway, rows: usize, inputs: usize) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9E37_79B9_7F4A_7C15u64.wrapping_mul(1 + pathway.code() as u64)));
    let normal = Normal::new(0.0, EXPERT_MAP_STD).expect("valid std");
    (0..rows * inputs).map(|_| normal.sample(&mut rng) as f32).collect()
}

fn project(map: &[f32], x: &[f32], kv: usize, de: usize) -> Tensor<f32> {
    let n = x.len();
    let out: Vec<f32> = (0..kv * de)
        .map(|r| {
            map[r * n..(r + 1) * n]
                .iter()
                .zip(x)
                .fold(0.0f32, |s, (w, v)| s + w * v)
        })
        .collect();
    Tensor::new(&[kv, de], out).expect("expert shape")
}

/// Metric stand-in: fixed seeded linear map of each frame's view-adjusted
/// depth grid (metres / 5). Depends on depth only.
pub fn synth_metric_expert(scene: &SynthScene, kv: usize, de: usize, expert_seed: u64) -> ExpertFeatureSet {
    let g2 = scene.grid * scene.grid;
    let map = expert_map(expert_seed, Pathway::Metric, kv * de, g2);
    let frames = scene
        .views
        .iter()
        .map(|&view| {
            let x: Vec<f32> = scene.view_depth(view).iter().map(|d| d / DEPTH_MAX).collect();
            project(&map, &x, kv, de)
        })
        .collect();
    ExpertFeatureSet::new(Pathway::Metric, kv, de, frames).expect("finite projection")
}

/// Structural stand-in: fixed seeded linear map of the visible layout,
/// each object contributing a cell one-hot and a class one-hot, plus the
/// viewpoint one-hot. Depends on layout only.
pub fn synth_struct_expert(scene: &SynthScene, kv: usize, de: usize, expert_seed: u64) -> ExpertFeatureSet {
    let g = scene.grid;
    let n = g * g + N_CLASSES + 3;
    let map = expert_map(expert_seed, Pathway::Structural, kv * de, n);
    let frames = scene
        .views
        .iter()
        .map(|&view| {
            let mut x = vec![0.0f32; n];
            for c in 0..g {
                let Some(sc) = scene.source_col(view, c) else {
                    continue;
                };
                for r in 0..g {
                    if let Some(o) = scene.object_at(r, sc) {
                        x[r * g + c] = 1.0;
                        x[g * g + o.class] = 1.0;
                    }
                }
            }
            x[g * g + N_CLASSES + view.index()] = 1.0;
            project(&map, &x, kv, de)
        })
        .collect();
    ExpertFeatureSet::new(Pathway::Structural, kv, de, frames).expect("finite projection")
}

/// Task proportions of a dataset.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mixture {
    /// Depth-bin and relative-distance heavy.
    Perception,
    Balanced,
}

impl Mixture {
    pub fn weights(self) -> [f64; 5] {
        match self {
            Mixture::Perception => [0.3, 0.3, 0.15, 0.1, 0.15],
            Mixture::Balanced => [0.2; 5],
        }
    }
}

/// splitmix64 step; decorrelates per-sample seeds.
pub fn mix_seed(base: u64, index: u64) -> u64 {
    let mut z = base
        .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(index.wrapping_add(1)));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One fully materialized sample.
#[derive(Clone, Debug)]
pub struct SynthSample {
    pub qa: QASample,
    pub scene: SynthScene,
    pub metric: ExpertFeatureSet,
    pub structural: ExpertFeatureSet,
}

pub fn choose_task<R: Rng + ?Sized>(mixture: Mixture, rng: &mut R) -> TaskType {
    let w = mixture.weights();
    let total: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (t, wt) in TaskType::ALL.iter().zip(w) {
        if u < wt {
            return *t;
        }
        u -= wt;
    }
    TaskType::ViewChange
}

pub fn make_sample(cfg: &SynthConfig, kv: usize, de: usize, scene_seed: u64, task: TaskType) -> SynthSample {
    let scene = gen_scene(scene_seed, cfg);
    let mut qa_rng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x0051_A5ED);
    let qa = gen_qa(&scene, task, &mut qa_rng);
    let metric = synth_metric_expert(&scene, kv, de, cfg.expert_seed);
    let structural = synth_struct_expert(&scene, kv, de, cfg.expert_seed);
    SynthSample {
        qa,
        scene,
        metric,
        structural,
    }
}

/// `count` samples drawn from `mixture`, fully determined by `seed`.
pub fn generate(cfg: &SynthConfig, kv: usize, de: usize, mixture: Mixture, count: usize, seed: u64) -> Vec<SynthSample> {
    (0..count)
        .map(|i| {
            let scene_seed = mix_seed(seed, i as u64);
            let mut trng = ChaCha8Rng::seed_from_u64(scene_seed ^ 0x7A5C);
            let task = choose_task(mixture, &mut trng);
            make_sample(cfg, kv, de, scene_seed, task)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertFiles {
    pub metric: String,
    pub structural: String,
}

/// One JSON line of a dataset manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub seed: u64,
    pub task_type: TaskType,
    pub question_tokens: Vec<usize>,
    pub answer_tokens: Vec<usize>,
    pub expert_files: ExpertFiles,
}

/// Writes `manifest.jsonl` plus one EVGF file per sample and pathway under
/// `dir`. Expert paths in the manifest are relative to `dir`.
pub fn write_dataset(dir: &Path, samples: &[SynthSample]) -> Result<PathBuf> {
    let experts = dir.join("experts");
    std::fs::create_dir_all(&experts)?;
    let manifest = dir.join("manifest.jsonl");
    let mut out = std::io::BufWriter::new(std::fs::File::create(&manifest)?);
    for (i, s) in samples.iter().enumerate() {
        let m = format!("experts/{i:06}_metric.evgf");
        let st = format!("experts/{i:06}_structural.evgf");
        write_expert_file(&s.metric, dir.join(&m))?;
        write_expert_file(&s.structural, dir.join(&st))?;
        let entry = ManifestEntry {
            seed: s.qa.scene_seed,
            task_type: s.qa.task,
            question_tokens: s.qa.question.clone(),
            answer_tokens: s.qa.answer.clone(),
            expert_files: ExpertFiles {
                metric: m,
                structural: st,
            },
        };
        serde_json::to_writer(&mut out, &entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(manifest)
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}

/// Rebuilds samples from a manifest: scenes are re-rendered from their seeds
/// and expert targets are read from the referenced files.
pub fn load_dataset(cfg: &SynthConfig, manifest: &Path) -> Result<Vec<SynthSample>> {
    let base = manifest.parent().unwrap_or(Path::new("."));
    read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            let scene = gen_scene(e.seed, cfg);
            let metric = read_expert_file(base.join(&e.expert_files.metric))?;
            let structural = read_expert_file(base.join(&e.expert_files.structural))?;
            if metric.pathway != Pathway::Metric || structural.pathway != Pathway::Structural {
                return Err(Error::Compat("expert file pathway does not match manifest slot".into()));
            }
            Ok(SynthSample {
                qa: QASample {
                    scene_seed: e.seed,
                    task: e.task_type,
                    question: e.question_tokens,
                    answer: e.answer_tokens,
                },
                scene,
                metric,
                structural,
            })
        })
        .collect()
}

pub fn task_counts(samples: &[SynthSample]) -> [usize; 5] {
    let mut c = [0; 5];
    for s in samples {
        c[s.qa.task.index()] += 1;
    }
    c
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> SynthConfig {
        SynthConfig::default()
    }

    #[test]
    fn scenes_are_deterministic_and_in_range() {
        let a = gen_scene(0, &cfg());
        let b = gen_scene(0, &cfg());
        assert_eq!(a, b);
        for seed in 0..200 {
            let s = gen_scene(seed, &cfg());
            assert!(s.depth.iter().all(|d| (DEPTH_MIN..=DEPTH_MAX).contains(d)));
            for (i, o) in s.objects.iter().enumerate() {
                for p in &s.objects[i + 1..] {
                    assert!((o.row, o.col) != (p.row, p.col));
                    assert_ne!(o.class, p.class);
                }
            }
            assert!((MIN_OBJECTS..=MAX_OBJECTS).contains(&s.objects.len()));
            assert_eq!(s.views[0], Viewpoint::Center);
            assert!(s.frames.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        }
    }

    #[test]
    fn vocab_fits_in_64_and_is_injective() {
        let v = cfg().vocab();
        assert!(v.size() <= 64);
        let names: std::collections::BTreeSet<String> = (0..v.size()).map(|i| v.name(i)).collect();
        assert_eq!(names.len(), v.size());
    }

    fn scene_with(depth_27_at: (usize, usize)) -> SynthScene {
        let mut s = gen_scene(3, &cfg());
        s.depth[depth_27_at.0 * 4 + depth_27_at.1] = 2.7;
        s
    }

    #[test]
    fn qa_rule_examples() {
        let v = cfg().vocab();
        assert_eq!(v.bin(depth_bin(2.7)), v.bin(1));
        assert_eq!(depth_bin(0.5), 0);
        assert_eq!(depth_bin(2.0), 1);
        assert_eq!(depth_bin(5.0), 2);
        let s = scene_with((1, 2));
        assert_eq!(depth_bin(s.depth_at(1, 2)), 1);

        let mut s = gen_scene(5, &cfg());
        s.objects = vec![
            SceneObject { class: 0, row: 1, col: 1, size: 1 },
            SceneObject { class: 3, row: 1, col: 2, size: 2 },
            SceneObject { class: 4, row: 3, col: 0, size: 3 },
        ];
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let q = gen_qa(&s, TaskType::ObjectCount, &mut rng);
        assert_eq!(q.answer, vec![v.count(3)]);
        // A (class 0) is one cell left of B (class 3).
        loop {
            let q = gen_qa(&s, TaskType::RelativeDirection, &mut rng);
            if q.question[1..] == [v.object(0), v.object(3)] {
                assert_eq!(q.answer, vec![v.left()]);
                break;
            }
        }
    }

    /// Recomputes an answer from the scene and the question tokens alone.
    fn oracle(s: &SynthScene, task: TaskType, q: &[usize]) -> usize {
        let v = Vocab { grid: s.grid };
        let g = s.grid;
        let cell = |t: usize| {
            let i = t - v.cell(0, 0);
            (i / g, i % g)
        };
        let obj = |t: usize| *s.objects.iter().find(|o| v.object(o.class) == t).unwrap();
        match task {
            TaskType::AbsoluteDepthBin => {
                let (r, c) = cell(q[1]);
                let d = s.depth_at(r, c);
                v.bin(if d < 2.0 { 0 } else if d < 3.5 { 1 } else { 2 })
            }
            TaskType::RelativeDistance => {
                let (a, b) = (cell(q[1]), cell(q[2]));
                let (da, db) = (s.depth_at(a.0, a.1), s.depth_at(b.0, b.1));
                assert!((da - db).abs() >= MIN_DEPTH_GAP);
                if da < db { v.first() } else { v.second() }
            }
            TaskType::RelativeDirection => {
                let (a, b) = (obj(q[1]), obj(q[2]));
                let horizontal = a.col.abs_diff(b.col) >= a.row.abs_diff(b.row);
                match (horizontal, a.col < b.col, a.row < b.row) {
                    (true, true, _) => v.left(),
                    (true, false, _) => v.right(),
                    (false, _, true) => v.above(),
                    (false, _, false) => v.below(),
                }
            }
            TaskType::ObjectCount => v.count(s.objects.len()),
            TaskType::ViewChange => match s.views[s.views.len() - 1] {
                Viewpoint::Left => v.left(),
                Viewpoint::Center => v.none(),
                Viewpoint::Right => v.right(),
            },
        }
    }

    #[test]
    fn answers_match_an_independent_oracle() {
        let v = cfg().vocab();
        for i in 0..2000u64 {
            let task = TaskType::ALL[i as usize % 5];
            let smp = make_sample(&cfg(), 4, 16, mix_seed(17, i), task);
            assert_eq!(smp.qa.answer.len(), 1);
            let a = smp.qa.answer[0];
            assert_eq!(a, oracle(&smp.scene, task, &smp.qa.question), "seed {i} {task:?}");
            assert!(v.answers(task).contains(&a));
            assert_eq!(v.answers(task).len(), task.choices());
        }
    }

    #[test]
    fn metric_expert_ignores_classes_struct_ignores_depth() {
        let s = gen_scene(11, &cfg());
        let m = synth_metric_expert(&s, 4, 16, 7);
        let st = synth_struct_expert(&s, 4, 16, 7);
        assert_eq!(m, synth_metric_expert(&s, 4, 16, 7));

        let mut relabeled = s.clone();
        for o in &mut relabeled.objects {
            o.class = (o.class + 1) % N_CLASSES;
        }
        assert_eq!(synth_metric_expert(&relabeled, 4, 16, 7), m);
        assert_ne!(synth_struct_expert(&relabeled, 4, 16, 7), st);

        let mut deeper = s.clone();
        deeper.depth[5] = if deeper.depth[5] > 2.0 { 1.0 } else { 4.0 };
        assert_ne!(synth_metric_expert(&deeper, 4, 16, 7), m);
        assert_eq!(synth_struct_expert(&deeper, 4, 16, 7), st);

        let mut moved = s.clone();
        moved.views[1] = match s.views[1] {
            Viewpoint::Left => Viewpoint::Right,
            _ => Viewpoint::Left,
        };
        assert_ne!(synth_struct_expert(&moved, 4, 16, 7).frames[1], st.frames[1]);
    }

    #[test]
    fn generation_partitions_counts() {
        let samples = generate(&cfg(), 4, 16, Mixture::Balanced, 50, 7);
        assert_eq!(task_counts(&samples).iter().sum::<usize>(), 50);
        let again = generate(&cfg(), 4, 16, Mixture::Balanced, 50, 7);
        assert!(samples.iter().zip(&again).all(|(a, b)| a.qa == b.qa));
    }

    #[test]
    fn dataset_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate(&cfg(), 4, 16, Mixture::Perception, 6, 3);
        let manifest = write_dataset(dir.path(), &samples).unwrap();
        let back = load_dataset(&cfg(), &manifest).unwrap();
        assert_eq!(back.len(), 6);
        for (a, b) in samples.iter().zip(&back) {
            assert_eq!(a.qa, b.qa);
            assert_eq!(a.scene, b.scene);
            assert_eq!(a.metric, b.metric);
            assert_eq!(a.structural, b.structural);
        }
    }
}
