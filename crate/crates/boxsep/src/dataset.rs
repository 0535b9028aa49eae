//! Synthetic audio-visual scenes and a loader for real frame/audio pairs.
//!
//! Each of the seven categories owns a glyph (unique shape and color) and a
//! timbre (a stack of partials at category-specific multiples of a
//! category-band fundamental, with a category-specific amplitude profile
//! and decay). The partial frequencies of all categories are laid out on a
//! 140 Hz grid with distinct slots, so cross-category mixtures separate
//! almost perfectly under ideal binary masks. Everything is a pure
//! function of `(category, seed)`.

use std::path::Path;

use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::audio::{self, AudioClip};
use crate::img;
use crate::proposals::BoundingBox;
use crate::rng::seeded_rng;

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("category {0} out of range (have {1})")]
    BadCategory(usize, usize),
    #[error("invalid generator config: {0}")]
    BadConfig(String),
    #[error("duet categories must differ, got {0} twice")]
    DuplicateCategory(usize),
    #[error("no usable samples in the requested split under {0}")]
    EmptySplit(String),
    #[error("audio: {0}")]
    Audio(#[from] audio::AudioError),
    #[error("image: {0}")]
    Img(#[from] img::ImgError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Manifest(#[from] serde_json::Error),
}

/// Number of categories with defined glyphs and timbres.
pub const MAX_CATEGORIES: usize = 7;

#[derive(Debug, Clone, Copy, PartialEq)]
enum GlyphShape {
    Square,
    Circle,
    Triangle,
    Diamond,
    Plus,
    Ring,
    HBar,
}

/// Silent objects use shapes from a disjoint set, so a selector that picks
/// one is always wrong.
#[derive(Debug, Clone, Copy)]
enum DistractorShape {
    OutlineSquare,
    OutlineCircle,
    LShape,
    TShape,
}

const DISTRACTOR_SHAPES: [DistractorShape; 4] = [
    DistractorShape::OutlineSquare,
    DistractorShape::OutlineCircle,
    DistractorShape::LShape,
    DistractorShape::TShape,
];

struct CategorySpec {
    /// Center of the fundamental band in Hz; samples jitter within ±1%.
    fundamental: f64,
    /// Harmonic multipliers of the partial stack.
    multipliers: &'static [f64],
    /// Relative partial amplitudes (same length as `multipliers`).
    amplitudes: &'static [f64],
    /// Amplitude decay rate in 1/s.
    decay: f64,
    color: [f32; 3],
    shape: GlyphShape,
}

/// All partials land on a 140 Hz grid at distinct slots:
/// 280(2) 560(4) 840(6) | 420(3) 1260(9) | 700(5) 1400(10) | 980(7) 1960(14)
/// | 1120(8) 2240(16) | 1540(11) 3080(22) | 1680(12) 3360(24).
const CATEGORIES: [CategorySpec; MAX_CATEGORIES] = [
    CategorySpec {
        fundamental: 280.0,
        multipliers: &[1.0, 2.0, 3.0],
        amplitudes: &[1.0, 0.55, 0.30],
        decay: 1.5,
        color: [0.95, 0.30, 0.25],
        shape: GlyphShape::Square,
    },
    CategorySpec {
        fundamental: 420.0,
        multipliers: &[1.0, 3.0],
        amplitudes: &[1.0, 0.45],
        decay: 2.5,
        color: [0.15, 0.80, 0.20],
        shape: GlyphShape::Circle,
    },
    CategorySpec {
        fundamental: 700.0,
        multipliers: &[1.0, 2.0],
        amplitudes: &[1.0, 0.60],
        decay: 2.0,
        color: [0.35, 0.55, 0.95],
        shape: GlyphShape::Triangle,
    },
    CategorySpec {
        fundamental: 980.0,
        multipliers: &[1.0, 2.0],
        amplitudes: &[1.0, 0.35],
        decay: 3.5,
        color: [0.95, 0.85, 0.10],
        shape: GlyphShape::Diamond,
    },
    CategorySpec {
        fundamental: 1120.0,
        multipliers: &[1.0, 2.0],
        // Second partial dominates: a distinct spectral signature.
        amplitudes: &[0.70, 1.0],
        decay: 1.8,
        color: [0.85, 0.20, 0.80],
        shape: GlyphShape::Plus,
    },
    CategorySpec {
        fundamental: 1540.0,
        multipliers: &[1.0, 2.0],
        amplitudes: &[1.0, 0.50],
        decay: 4.5,
        color: [0.10, 0.80, 0.85],
        shape: GlyphShape::Ring,
    },
    CategorySpec {
        fundamental: 1680.0,
        multipliers: &[1.0, 2.0],
        amplitudes: &[1.0, 0.25],
        decay: 3.0,
        color: [0.95, 0.55, 0.10],
        shape: GlyphShape::HBar,
    },
];

/// The partial each category concentrates most energy in (category center
/// fundamental times the multiplier with the largest amplitude).
pub fn dominant_frequency(category_id: usize) -> f64 {
    let spec = &CATEGORIES[category_id];
    let k = spec
        .amplitudes
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap();
    spec.fundamental * spec.multipliers[k]
}

/// Generator knobs. The defaults are the desk-scale preset used throughout
/// the test suites; larger presets only change sizes, not structure.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GenConfig {
    pub image_size: usize,
    pub sample_rate: u32,
    pub num_samples: usize,
    pub num_categories: usize,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            image_size: 64,
            sample_rate: 8000,
            num_samples: 2016,
            num_categories: MAX_CATEGORIES,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<(), DatasetError> {
        if self.num_categories < 2 || self.num_categories > MAX_CATEGORIES {
            return Err(DatasetError::BadConfig(format!(
                "num_categories {} must be in [2, {MAX_CATEGORIES}]",
                self.num_categories
            )));
        }
        if self.image_size < 64 {
            return Err(DatasetError::BadConfig(format!(
                "image_size {} must be at least 64",
                self.image_size
            )));
        }
        if self.sample_rate < 4000 || self.num_samples < 256 {
            return Err(DatasetError::BadConfig(
                "audio must be at least 256 samples at 4 kHz or more".into(),
            ));
        }
        Ok(())
    }
}

/// One training scene: a single sounding object plus silent distractors.
#[derive(Debug, Clone)]
pub struct SceneSample {
    pub image: Array3<f32>,
    pub audio: AudioClip,
    pub gt_box: BoundingBox,
    pub category_id: usize,
    pub distractor_boxes: Vec<BoundingBox>,
    pub seed: u64,
}

/// One inference scene: two sounding objects; the mixture is the exact sum
/// of the retained per-source references.
#[derive(Debug, Clone)]
pub struct DuetSample {
    pub image: Array3<f32>,
    pub audio: AudioClip,
    pub gt_boxes: [BoundingBox; 2],
    pub category_ids: [usize; 2],
    pub references: [AudioClip; 2],
    pub seed: u64,
}

// --- Audio synthesis -------------------------------------------------------

/// Synthesizes one clip of the category's timbre: jittered fundamental,
/// jittered partial amplitudes, random phases, attack/decay envelope with a
/// slow tremolo, peak-normalized into mixing headroom.
fn synth_tone(cfg: &GenConfig, category_id: usize, rng: &mut ChaCha8Rng) -> AudioClip {
    let spec = &CATEGORIES[category_id];
    let sr = cfg.sample_rate as f64;
    let n = cfg.num_samples;
    let nyquist_guard = 0.45 * sr;

    let f0 = spec.fundamental * (1.0 + rng.random_range(-0.01..0.01));
    let partials: Vec<(f64, f64, f64)> = spec
        .multipliers
        .iter()
        .zip(spec.amplitudes)
        .map(|(&m, &a)| {
            (
                f0 * m,
                a * (1.0 + rng.random_range(-0.08..0.08)),
                rng.random_range(0.0..std::f64::consts::TAU),
            )
        })
        .filter(|&(f, _, _)| f < nyquist_guard)
        .collect();

    let attack = (rng.random_range(0.005..0.03) * sr) as usize;
    let attack = attack.clamp(1, n / 4);
    let decay = spec.decay * (1.0 + rng.random_range(-0.2..0.2));
    let trem_freq = rng.random_range(2.0..6.0);
    let trem_depth = rng.random_range(0.08..0.2);
    let trem_phase = rng.random_range(0.0..std::f64::consts::TAU);

    let mut samples = vec![0.0f64; n];
    for (i, s) in samples.iter_mut().enumerate() {
        let t = i as f64 / sr;
        let mut v = 0.0;
        for &(f, a, ph) in &partials {
            v += a * (std::f64::consts::TAU * f * t + ph).sin();
        }
        let env = if i < attack {
            (i + 1) as f64 / attack as f64
        } else {
            (-decay * (i - attack) as f64 / sr).exp()
        };
        let trem = 1.0 + trem_depth * (std::f64::consts::TAU * trem_freq * t + trem_phase).sin();
        *s = v * env * trem;
    }

    let peak = samples.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    let target = rng.random_range(0.5..0.8);
    let scale = if peak > 0.0 { target / peak } else { 0.0 };
    AudioClip {
        samples: samples.into_iter().map(|v| (v * scale) as f32).collect(),
        sample_rate: cfg.sample_rate,
    }
}

// --- Image rendering -------------------------------------------------------

fn render_background(size: usize, rng: &mut ChaCha8Rng) -> Array3<f32> {
    let mut img = Array3::<f32>::zeros((size, size, 3));
    for y in 0..size {
        for x in 0..size {
            let g: f32 = 0.24 + rng.random_range(-0.015..0.015);
            let tint: f32 = rng.random_range(-0.004..0.004);
            img[[y, x, 0]] = (g + tint).clamp(0.0, 1.0);
            img[[y, x, 1]] = g.clamp(0.0, 1.0);
            img[[y, x, 2]] = (g - tint).clamp(0.0, 1.0);
        }
    }
    img
}

fn inside_glyph(shape: GlyphShape, nx: f32, ny: f32) -> bool {
    let r2 = nx * nx + ny * ny;
    match shape {
        GlyphShape::Square => true, // the bounding box itself
        GlyphShape::Circle => r2 <= 1.0,
        GlyphShape::Triangle => nx.abs() <= (ny + 1.0) / 2.0,
        GlyphShape::Diamond => nx.abs() + ny.abs() <= 1.0,
        GlyphShape::Plus => nx.abs() <= 0.34 || ny.abs() <= 0.34,
        GlyphShape::Ring => (0.3025..=1.0).contains(&r2), // inner radius 0.55
        GlyphShape::HBar => nx.abs() >= 0.55 || ny.abs() <= 0.25,
    }
}

fn inside_distractor(shape: DistractorShape, nx: f32, ny: f32) -> bool {
    match shape {
        DistractorShape::OutlineSquare => nx.abs().max(ny.abs()) >= 0.62,
        DistractorShape::OutlineCircle => {
            let r2 = nx * nx + ny * ny;
            (0.3844..=1.0).contains(&r2) // radii 0.62..1
        }
        DistractorShape::LShape => nx <= -0.45 || ny >= 0.45,
        DistractorShape::TShape => ny <= -0.45 || nx.abs() <= 0.30,
    }
}

/// Paints a glyph whose tight bounding box is `bx` (exclusive ends).
fn draw<F: Fn(f32, f32) -> bool>(
    img: &mut Array3<f32>,
    bx: &BoundingBox,
    color: [f32; 3],
    member: F,
) {
    let (h, w) = (bx.y1 - bx.y0, bx.x1 - bx.x0);
    for y in bx.y0..bx.y1 {
        for x in bx.x0..bx.x1 {
            // Normalized coordinates in [-1, 1] at pixel centers.
            let ny = ((y - bx.y0) as f32 + 0.5) / h as f32 * 2.0 - 1.0;
            let nx = ((x - bx.x0) as f32 + 0.5) / w as f32 * 2.0 - 1.0;
            if member(nx, ny) {
                for c in 0..3 {
                    img[[y, x, c]] = color[c];
                }
            }
        }
    }
}

fn jitter_color(base: [f32; 3], rng: &mut ChaCha8Rng) -> [f32; 3] {
    let b = 1.0 + rng.random_range(-0.06..0.06);
    [
        (base[0] * b).clamp(0.0, 1.0),
        (base[1] * b).clamp(0.0, 1.0),
        (base[2] * b).clamp(0.0, 1.0),
    ]
}

/// Random box with side `side` whose center stays inside
/// `[x_lo + side/2 + 2, x_hi - side/2 - 2]` horizontally (full range
/// vertically). `x_lo..x_hi` confines duet glyphs to half-images.
fn random_box(
    rng: &mut ChaCha8Rng,
    size: usize,
    side: usize,
    x_lo: usize,
    x_hi: usize,
) -> BoundingBox {
    let margin = 2usize;
    let x0 = rng.random_range(x_lo + margin..=x_hi - side - margin);
    let y0 = rng.random_range(margin..=size - side - margin);
    BoundingBox {
        x0,
        y0,
        x1: x0 + side,
        y1: y0 + side,
        objectness: 1.0,
    }
}

fn place_distractors(
    img: &mut Array3<f32>,
    rng: &mut ChaCha8Rng,
    size: usize,
    count: usize,
    keep_clear: &[BoundingBox],
) -> Vec<BoundingBox> {
    let mut placed = Vec::new();
    for _ in 0..count {
        let side = (size as f32 * rng.random_range(0.16..0.28)) as usize;
        let shape = DISTRACTOR_SHAPES[rng.random_range(0..DISTRACTOR_SHAPES.len())];
        let g: f32 = 0.50 + rng.random_range(-0.06..0.06);
        let tint: f32 = rng.random_range(-0.03..0.03);
        let color = [
            (g + tint).clamp(0.0, 1.0),
            g.clamp(0.0, 1.0),
            (g - tint).clamp(0.0, 1.0),
        ];
        for _attempt in 0..40 {
            let bx = random_box(rng, size, side, 0, size);
            let clear = keep_clear.iter().all(|k| bx.iou(k) < 0.2)
                && placed.iter().all(|p: &BoundingBox| bx.iou(p) < 0.3);
            if clear {
                draw(img, &bx, color, |nx, ny| inside_distractor(shape, nx, ny));
                placed.push(bx);
                break;
            }
        }
    }
    placed
}

/// Deterministically generates one single-source scene.
pub fn generate_solo(
    cfg: &GenConfig,
    category_id: usize,
    seed: u64,
) -> Result<SceneSample, DatasetError> {
    cfg.validate()?;
    if category_id >= cfg.num_categories {
        return Err(DatasetError::BadCategory(category_id, cfg.num_categories));
    }
    let size = cfg.image_size;
    let mut rng_img = seeded_rng(seed, "scene-solo-img", category_id as u64);
    let mut rng_audio = seeded_rng(seed, "scene-solo-audio", category_id as u64);

    let mut image = render_background(size, &mut rng_img);
    let side = (size as f32 * rng_img.random_range(0.25..0.40)) as usize;
    let gt_box = random_box(&mut rng_img, size, side, 0, size);

    let count = rng_img.random_range(1..=3);
    let distractor_boxes =
        place_distractors(&mut image, &mut rng_img, size, count, &[gt_box]);

    let spec = &CATEGORIES[category_id];
    let color = jitter_color(spec.color, &mut rng_img);
    draw(&mut image, &gt_box, color, |nx, ny| {
        inside_glyph(spec.shape, nx, ny)
    });

    let audio = synth_tone(cfg, category_id, &mut rng_audio);
    Ok(SceneSample {
        image,
        audio,
        gt_box,
        category_id,
        distractor_boxes,
        seed,
    })
}

/// Deterministically generates one two-source scene. The two ground-truth
/// boxes are confined to opposite half-images, so they never overlap.
pub fn generate_duet(
    cfg: &GenConfig,
    cat_a: usize,
    cat_b: usize,
    seed: u64,
) -> Result<DuetSample, DatasetError> {
    cfg.validate()?;
    for c in [cat_a, cat_b] {
        if c >= cfg.num_categories {
            return Err(DatasetError::BadCategory(c, cfg.num_categories));
        }
    }
    if cat_a == cat_b {
        return Err(DatasetError::DuplicateCategory(cat_a));
    }
    let size = cfg.image_size;
    let pair_index = (cat_a * MAX_CATEGORIES + cat_b) as u64;
    let mut rng_img = seeded_rng(seed, "scene-duet-img", pair_index);

    let mut image = render_background(size, &mut rng_img);
    let half = size / 2;
    let max_side = |range_w: usize| ((range_w as f32) * 0.76) as usize;
    let side_a = ((size as f32 * rng_img.random_range(0.25..0.38)) as usize)
        .min(max_side(half));
    let box_a = random_box(&mut rng_img, size, side_a, 0, half);
    let side_b = ((size as f32 * rng_img.random_range(0.25..0.38)) as usize)
        .min(max_side(size - half));
    let box_b = random_box(&mut rng_img, size, side_b, half, size);
    debug_assert_eq!(box_a.iou(&box_b), 0.0);

    let count = rng_img.random_range(1..=2);
    place_distractors(&mut image, &mut rng_img, size, count, &[box_a, box_b]);

    for (cat, bx) in [(cat_a, &box_a), (cat_b, &box_b)] {
        let spec = &CATEGORIES[cat];
        let color = jitter_color(spec.color, &mut rng_img);
        draw(&mut image, bx, color, |nx, ny| inside_glyph(spec.shape, nx, ny));
    }

    let mut rng_a = seeded_rng(seed, "scene-duet-audio-a", pair_index);
    let mut rng_b = seeded_rng(seed, "scene-duet-audio-b", pair_index);
    let ref_a = synth_tone(cfg, cat_a, &mut rng_a);
    let ref_b = synth_tone(cfg, cat_b, &mut rng_b);
    let audio = audio::mix(&ref_a, &ref_b)?;

    Ok(DuetSample {
        image,
        audio,
        gt_boxes: [box_a, box_b],
        category_ids: [cat_a, cat_b],
        references: [ref_a, ref_b],
        seed,
    })
}

// --- Disk cache and manifests ----------------------------------------------

/// One line of a solo-dataset manifest.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SoloRecord {
    pub id: String,
    pub category_id: usize,
    pub seed: u64,
    pub image_path: String,
    pub audio_path: String,
    pub gt_box: [usize; 4],
    pub distractor_boxes: Vec<[usize; 4]>,
}

fn box_array(b: &BoundingBox) -> [usize; 4] {
    [b.x0, b.y0, b.x1, b.y1]
}

/// Renders `count` solo scenes to `dir` as PNG + WAV plus a JSON-lines
/// manifest. Categories rotate round-robin, so proportions stay within one
/// sample of each other; sample seeds derive from `base_seed + index`.
pub fn write_solo_dataset(
    dir: &Path,
    cfg: &GenConfig,
    count: usize,
    base_seed: u64,
) -> Result<Vec<SoloRecord>, DatasetError> {
    std::fs::create_dir_all(dir)?;
    let mut records = Vec::with_capacity(count);
    let mut manifest = String::new();
    for idx in 0..count {
        let category_id = idx % cfg.num_categories;
        let seed = base_seed.wrapping_add(idx as u64);
        let sample = generate_solo(cfg, category_id, seed)?;
        let id = format!("solo-{idx:05}");
        let image_path = format!("{id}.png");
        let audio_path = format!("{id}.wav");
        img::save_rgb_png(&dir.join(&image_path), &sample.image)?;
        audio::write_wav_f32(&dir.join(&audio_path), &sample.audio)?;
        let rec = SoloRecord {
            id,
            category_id,
            seed,
            image_path,
            audio_path,
            gt_box: box_array(&sample.gt_box),
            distractor_boxes: sample.distractor_boxes.iter().map(box_array).collect(),
        };
        manifest.push_str(&serde_json::to_string(&rec)?);
        manifest.push('\n');
        records.push(rec);
    }
    std::fs::write(dir.join("manifest.jsonl"), manifest)?;
    Ok(records)
}

/// Reads a manifest written by [`write_solo_dataset`].
pub fn read_manifest(dir: &Path) -> Result<Vec<SoloRecord>, DatasetError> {
    let text = std::fs::read_to_string(dir.join("manifest.jsonl"))?;
    let mut out = Vec::new();
    for line in text.lines() {
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(line)?);
        }
    }
    Ok(out)
}

// --- Train/val split --------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

/// Pure hash-based split that preserves category proportions within one
/// sample: within each category, ids are ranked by hash and the first
/// `round(n * val_ratio)` become validation.
pub fn assign_splits(ids: &[(String, usize)], val_ratio: f64) -> Vec<Split> {
    let mut out = vec![Split::Train; ids.len()];
    let mut by_cat: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for (i, (_, cat)) in ids.iter().enumerate() {
        by_cat.entry(*cat).or_default().push(i);
    }
    for (_, mut idxs) in by_cat {
        idxs.sort_by_key(|&i| (crate::rng::fnv1a(ids[i].0.as_bytes()), ids[i].0.clone()));
        let n_val = ((idxs.len() as f64) * val_ratio).round() as usize;
        for &i in idxs.iter().take(n_val) {
            out[i] = Split::Val;
        }
    }
    out
}

// --- Real data loader --------------------------------------------------------

/// One externally recorded sample: a video frame and its audio.
pub struct RealPair {
    pub category: String,
    pub clip_id: String,
    pub image: Array3<f32>,
    pub audio: AudioClip,
}

fn center_crop_square(image: Array3<f32>) -> Array3<f32> {
    let (h, w, _) = image.dim();
    let side = h.min(w);
    if h == w {
        return image;
    }
    let y0 = (h - side) / 2;
    let x0 = (w - side) / 2;
    img::crop_rgb(&image, x0, y0, x0 + side, y0 + side).expect("crop within bounds")
}

/// Loads `root/<category>/<clip_id>/frame.png` + `audio.wav` pairs for one
/// split. Ordering is deterministic (sorted by category then clip id);
/// missing or unreadable files are skipped with a warning; audio is
/// resampled to `target_sr` and frames center-cropped square.
pub fn load_real_pairs(
    root: &Path,
    split: Split,
    val_ratio: f64,
    target_sr: u32,
) -> Result<Vec<RealPair>, DatasetError> {
    let mut clip_dirs: Vec<(String, String, std::path::PathBuf)> = Vec::new();
    let mut categories: Vec<_> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .collect();
    categories.sort();
    for cat in &categories {
        let mut clips: Vec<_> = std::fs::read_dir(root.join(cat))?
            .filter_map(|e| e.ok())
            .filter(|e| e.path().is_dir())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .collect();
        clips.sort();
        for clip in clips {
            let dir = root.join(cat).join(&clip);
            clip_dirs.push((cat.clone(), clip, dir));
        }
    }

    let cat_index: std::collections::BTreeMap<&str, usize> = categories
        .iter()
        .enumerate()
        .map(|(i, c)| (c.as_str(), i))
        .collect();
    let ids: Vec<(String, usize)> = clip_dirs
        .iter()
        .map(|(cat, clip, _)| (format!("{cat}/{clip}"), cat_index[cat.as_str()]))
        .collect();
    let splits = assign_splits(&ids, val_ratio);

    let mut out = Vec::new();
    for ((cat, clip, dir), s) in clip_dirs.into_iter().zip(splits) {
        if s != split {
            continue;
        }
        let frame = dir.join("frame.png");
        let wav = dir.join("audio.wav");
        let image = match img::load_rgb_png(&frame) {
            Ok(i) => i,
            Err(e) => {
                log::warn!("skipping {cat}/{clip}: cannot read frame: {e}");
                continue;
            }
        };
        let audio = match audio::read_wav(&wav) {
            Ok(a) => a,
            Err(e) => {
                log::warn!("skipping {cat}/{clip}: cannot read audio: {e}");
                continue;
            }
        };
        out.push(RealPair {
            category: cat,
            clip_id: clip,
            image: center_crop_square(image),
            audio: audio::resample_linear(&audio, target_sr),
        });
    }
    if out.is_empty() {
        return Err(DatasetError::EmptySplit(root.display().to_string()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::num_complex::Complex;
    use rustfft::FftPlanner;

    fn cfg() -> GenConfig {
        GenConfig::default()
    }

    /// Magnitude spectrum of a clip via one zero-padded FFT, returning
    /// (bin resolution in Hz, magnitudes).
    fn spectrum(clip: &AudioClip) -> (f64, Vec<f64>) {
        let n = clip.samples.len().next_power_of_two();
        let mut buf: Vec<Complex<f64>> = clip
            .samples
            .iter()
            .map(|&v| Complex::new(v as f64, 0.0))
            .collect();
        buf.resize(n, Complex::new(0.0, 0.0));
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        (clip.sample_rate as f64 / n as f64, mags)
    }

    fn peak_hz(clip: &AudioClip) -> f64 {
        let (res, mags) = spectrum(clip);
        let (bin, _) = mags
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        bin as f64 * res
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_solo(&cfg(), 3, 42).unwrap();
        let b = generate_solo(&cfg(), 3, 42).unwrap();
        assert_eq!(a.image, b.image, "images must be bit-identical");
        assert_eq!(a.audio.samples, b.audio.samples, "audio must be bit-identical");
        assert_eq!(a.gt_box, b.gt_box);
        assert_eq!(a.distractor_boxes, b.distractor_boxes);

        let c = generate_solo(&cfg(), 3, 43).unwrap();
        assert_ne!(a.image, c.image, "a different seed must change the scene");

        let d1 = generate_duet(&cfg(), 1, 4, 7).unwrap();
        let d2 = generate_duet(&cfg(), 1, 4, 7).unwrap();
        assert_eq!(d1.image, d2.image);
        assert_eq!(d1.audio.samples, d2.audio.samples);
    }

    #[test]
    fn invalid_categories_are_rejected() {
        assert!(matches!(
            generate_solo(&cfg(), 7, 0),
            Err(DatasetError::BadCategory(7, 7))
        ));
        assert!(matches!(
            generate_duet(&cfg(), 0, 9, 0),
            Err(DatasetError::BadCategory(9, 7))
        ));
        assert!(matches!(
            generate_duet(&cfg(), 2, 2, 0),
            Err(DatasetError::DuplicateCategory(2))
        ));
        let bad = GenConfig { num_categories: 1, ..cfg() };
        assert!(matches!(
            generate_solo(&bad, 0, 0),
            Err(DatasetError::BadConfig(_))
        ));
    }

    #[test]
    fn gt_box_stays_in_bounds_and_clear_of_distractors() {
        for seed in 0..30u64 {
            let s = generate_solo(&cfg(), (seed % 7) as usize, 1000 + seed).unwrap();
            let size = cfg().image_size;
            assert!(s.gt_box.x1 <= size && s.gt_box.y1 <= size);
            assert!(s.gt_box.x0 < s.gt_box.x1 && s.gt_box.y0 < s.gt_box.y1);
            assert!(!s.distractor_boxes.is_empty(), "at least one distractor");
            for d in &s.distractor_boxes {
                assert!(d.x1 <= size && d.y1 <= size);
                assert!(
                    s.gt_box.iou(d) < 0.2,
                    "distractor must not overlap the sounding object (IoU {})",
                    s.gt_box.iou(d)
                );
            }
        }
    }

    #[test]
    fn glyph_pixels_differ_from_background() {
        let s = generate_solo(&cfg(), 0, 5).unwrap();
        // Category 0 paints its full (square) box in saturated red.
        let cx = (s.gt_box.x0 + s.gt_box.x1) / 2;
        let cy = (s.gt_box.y0 + s.gt_box.y1) / 2;
        let r = s.image[[cy, cx, 0]];
        let g = s.image[[cy, cx, 1]];
        assert!(r > 0.7 && g < 0.3, "box center must be glyph-colored: r={r} g={g}");
    }

    #[test]
    fn every_category_peaks_within_its_headroom() {
        for cat in 0..7 {
            for seed in [1u64, 99, 12345] {
                let s = generate_solo(&cfg(), cat, seed).unwrap();
                let peak = s
                    .audio
                    .samples
                    .iter()
                    .fold(0.0f32, |m, &v| m.max(v.abs()));
                assert!(
                    (0.3..=0.9).contains(&peak),
                    "category {cat} peak {peak} outside mixing headroom"
                );
            }
        }
    }

    #[test]
    fn spectral_signatures_are_category_specific() {
        let mut peaks = Vec::new();
        for cat in 0..7 {
            let s = generate_solo(&cfg(), cat, 11).unwrap();
            let peak = peak_hz(&s.audio);
            let expected = dominant_frequency(cat);
            assert!(
                (peak - expected).abs() <= expected * 0.02 + 8.0,
                "category {cat}: dominant peak {peak:.0} Hz, expected about {expected:.0}"
            );
            peaks.push(peak);
        }
        for i in 0..peaks.len() {
            for j in i + 1..peaks.len() {
                assert!(
                    (peaks[i] - peaks[j]).abs() > 100.0,
                    "categories {i} and {j} share a dominant peak"
                );
            }
        }
        // Category 4 is the one whose second partial dominates.
        let f4 = dominant_frequency(4);
        assert!((f4 - 2240.0).abs() < 1.0);
    }

    #[test]
    fn duet_audio_is_the_exact_sum_of_its_references() {
        let d = generate_duet(&cfg(), 0, 5, 21).unwrap();
        for (i, &v) in d.audio.samples.iter().enumerate() {
            assert_eq!(
                v,
                d.references[0].samples[i] + d.references[1].samples[i],
                "sample {i} must be the exact sum"
            );
        }
    }

    #[test]
    fn duet_boxes_never_overlap() {
        for seed in 0..25u64 {
            let a = (seed % 7) as usize;
            let b = ((seed + 3) % 7) as usize;
            if a == b {
                continue;
            }
            let d = generate_duet(&cfg(), a, b, seed).unwrap();
            assert_eq!(d.gt_boxes[0].iou(&d.gt_boxes[1]), 0.0);
            let ix0 = d.gt_boxes[0].x1.min(d.gt_boxes[1].x1);
            let ix1 = d.gt_boxes[0].x0.max(d.gt_boxes[1].x0);
            assert!(ix1 >= ix0, "boxes must not share columns");
        }
    }

    #[test]
    fn duet_spectrum_contains_both_signatures() {
        let d = generate_duet(&cfg(), 1, 6, 33).unwrap();
        let (res, mags) = spectrum(&d.audio);
        let mut sorted = mags.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        for cat in [1usize, 6] {
            let f = dominant_frequency(cat);
            let bin = (f / res).round() as usize;
            let local = mags[bin.saturating_sub(2)..(bin + 3).min(mags.len())]
                .iter()
                .fold(0.0f64, |m, &v| m.max(v));
            assert!(
                local > 5.0 * median.max(1e-12),
                "category {cat} peak at {f:.0} Hz missing from the duet spectrum"
            );
        }
    }

    #[test]
    fn split_preserves_category_proportions() {
        let ids: Vec<(String, usize)> = (0..70)
            .map(|i| (format!("clip-{i:03}"), i % 7))
            .collect();
        let splits = assign_splits(&ids, 0.2);
        assert_eq!(splits, assign_splits(&ids, 0.2), "split must be pure");
        for cat in 0..7 {
            let val = ids
                .iter()
                .zip(&splits)
                .filter(|((_, c), s)| *c == cat && **s == Split::Val)
                .count();
            assert_eq!(val, 2, "category {cat} must put exactly 2 of 10 in val");
        }
    }

    #[test]
    fn written_dataset_round_trips_through_the_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let records = write_solo_dataset(dir.path(), &cfg(), 14, 77).unwrap();
        assert_eq!(records.len(), 14);
        for cat in 0..7 {
            assert_eq!(
                records.iter().filter(|r| r.category_id == cat).count(),
                2,
                "round-robin must balance categories"
            );
        }
        let back = read_manifest(dir.path()).unwrap();
        assert_eq!(back.len(), 14);
        assert_eq!(back[3].id, records[3].id);
        assert_eq!(back[3].gt_box, records[3].gt_box);

        // Cached artifacts load: PNG pixels match to 8-bit quantization,
        // float WAV samples match exactly.
        let sample = generate_solo(&cfg(), back[3].category_id, back[3].seed).unwrap();
        let image = img::load_rgb_png(&dir.path().join(&back[3].image_path)).unwrap();
        let max_err = image
            .iter()
            .zip(sample.image.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
        let audio = audio::read_wav(&dir.path().join(&back[3].audio_path)).unwrap();
        assert_eq!(audio.samples, sample.audio.samples);
    }

    #[test]
    fn real_loader_skips_corrupt_clips_and_errors_on_empty() {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path();
        let mk_clip = |cat: &str, clip: &str, good: bool| {
            let d = root.join(cat).join(clip);
            std::fs::create_dir_all(&d).unwrap();
            let image = Array3::from_elem((20, 30, 3), 0.5f32);
            img::save_rgb_png(&d.join("frame.png"), &image).unwrap();
            if good {
                let clip_audio = AudioClip {
                    samples: (0..400).map(|i| ((i as f32) * 0.05).sin() * 0.4).collect(),
                    sample_rate: 16000,
                };
                audio::write_wav_i16(&d.join("audio.wav"), &clip_audio).unwrap();
            } else {
                std::fs::write(d.join("audio.wav"), b"not a wave file").unwrap();
            }
        };
        mk_clip("flute", "c1", true);
        mk_clip("flute", "c2", false);
        mk_clip("drum", "c1", true);
        mk_clip("drum", "c2", true);

        let train = load_real_pairs(root, Split::Train, 0.0, 8000).unwrap();
        assert_eq!(train.len(), 3, "the corrupt clip must be skipped");
        for p in &train {
            assert_eq!(p.audio.sample_rate, 8000);
            let (h, w, _) = p.image.dim();
            assert_eq!(h, w, "frames must be center-cropped square");
        }
        assert!(matches!(
            load_real_pairs(root, Split::Val, 0.0, 8000),
            Err(DatasetError::EmptySplit(_))
        ));
    }
}
