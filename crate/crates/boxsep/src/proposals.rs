//! Class-agnostic bounding-box proposals from edge density.
//!
//! Boxes are enumerated by sliding windows over a geometric scale/aspect
//! grid, scored by how much edge mass they enclose away from their border
//! (boxes whose border cuts through contours are penalized), deduplicated
//! with non-maximum suppression, and padded from fixed fallback grids when
//! an image yields too few scored boxes. Everything is deterministic for a
//! fixed image and configuration.

use ndarray::{Array2, Array3};
use std::io::Write as IoWrite;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ProposalError {
    #[error("degenerate image: {0}")]
    DegenerateImage(String),
    #[error("invalid proposal request: {0}")]
    BadRequest(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Axis-aligned box with inclusive-exclusive pixel bounds.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
    pub objectness: f32,
}

impl BoundingBox {
    pub fn width(&self) -> usize {
        self.x1 - self.x0
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    /// Intersection-over-union with another box.
    pub fn iou(&self, other: &BoundingBox) -> f32 {
        let ix0 = self.x0.max(other.x0);
        let iy0 = self.y0.max(other.y0);
        let ix1 = self.x1.min(other.x1);
        let iy1 = self.y1.min(other.y1);
        if ix0 >= ix1 || iy0 >= iy1 {
            return 0.0;
        }
        let inter = ((ix1 - ix0) * (iy1 - iy0)) as f32;
        let union = (self.area() + other.area()) as f32 - inter;
        inter / union
    }
}

/// Fixed-size, objectness-sorted list of proposals for one image.
#[derive(Debug, Clone)]
pub struct ProposalSet {
    pub boxes: Vec<BoundingBox>,
    pub source_image_id: String,
}

/// Tuning knobs for enumeration, scoring, and suppression.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ProposalConfig {
    /// Smallest window side (before aspect shaping).
    pub min_box: usize,
    /// Multiplicative step between window scales.
    pub scale_step: f32,
    /// Slide stride as a fraction of window size (stride = size / divisor).
    pub stride_divisor: usize,
    /// Greedy NMS keeps a box only if its IoU with every kept box is below
    /// this threshold.
    pub nms_iou: f32,
    /// Penalty weight on edge mass inside the 2-px border band.
    pub lambda: f32,
    /// Perimeter normalization exponent.
    pub kappa: f32,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self {
            min_box: 16,
            scale_step: 1.25,
            stride_divisor: 8,
            nms_iou: 0.7,
            lambda: 1.0,
            kappa: 1.5,
        }
    }
}

/// Width of the border band that separates a box's interior from its edge.
const BAND: usize = 2;

/// Per-pixel edge magnitude: central-difference gradient magnitude computed
/// per channel, reduced by max over channels (border values replicated).
/// The channel max keeps chromatic contours visible — a boundary between
/// equal-luminance colors still registers — while matching the luminance
/// gradient exactly on monochrome images. Constant images map to zero.
pub fn compute_edge_map(image: &Array3<f32>) -> Result<Array2<f32>, ProposalError> {
    let (h, w, c) = image.dim();
    if h < 16 || w < 16 {
        return Err(ProposalError::DegenerateImage(format!(
            "image must be at least 16x16, got {h}x{w}"
        )));
    }
    if c != 3 {
        return Err(ProposalError::DegenerateImage(format!(
            "expected 3 channels, got {c}"
        )));
    }
    let mut edges = Array2::<f32>::zeros((h, w));
    for i in 0..h {
        for j in 0..w {
            let mut mag = 0.0f32;
            for ch in 0..3 {
                let up = image[[i.saturating_sub(1), j, ch]];
                let down = image[[(i + 1).min(h - 1), j, ch]];
                let left = image[[i, j.saturating_sub(1), ch]];
                let right = image[[i, (j + 1).min(w - 1), ch]];
                let gy = 0.5 * (down - up);
                let gx = 0.5 * (right - left);
                mag = mag.max((gx * gx + gy * gy).sqrt());
            }
            edges[[i, j]] = mag;
        }
    }
    Ok(edges)
}

/// Summed-area table: `sat[[i, j]]` holds the sum over `[0, i) x [0, j)`.
struct IntegralImage {
    sat: Array2<f64>,
}

impl IntegralImage {
    fn new(map: &Array2<f32>) -> Self {
        let (h, w) = map.dim();
        let mut sat = Array2::<f64>::zeros((h + 1, w + 1));
        for i in 0..h {
            for j in 0..w {
                sat[[i + 1, j + 1]] =
                    map[[i, j]] as f64 + sat[[i, j + 1]] + sat[[i + 1, j]] - sat[[i, j]];
            }
        }
        Self { sat }
    }

    /// Sum over rows `[y0, y1)` and columns `[x0, x1)`.
    fn sum(&self, y0: usize, x0: usize, y1: usize, x1: usize) -> f64 {
        self.sat[[y1, x1]] - self.sat[[y0, x1]] - self.sat[[y1, x0]] + self.sat[[y0, x0]]
    }
}

fn score_box_integral(ii: &IntegralImage, b: &BoundingBox, cfg: &ProposalConfig) -> f32 {
    let total = ii.sum(b.y0, b.x0, b.y1, b.x1);
    let core = if b.width() > 2 * BAND && b.height() > 2 * BAND {
        ii.sum(b.y0 + BAND, b.x0 + BAND, b.y1 - BAND, b.x1 - BAND)
    } else {
        0.0
    };
    let band = total - core;
    let perimeter = 2.0 * (b.width() + b.height()) as f64;
    let raw = (core - cfg.lambda as f64 * band) / perimeter.powf(cfg.kappa as f64);
    raw.max(0.0) as f32
}

/// Edge-density score of a single box: interior mass (excluding a 2-px
/// border band) minus `lambda` times the band mass, normalized by
/// perimeter^kappa and clamped at zero.
pub fn score_box(edge_map: &Array2<f32>, b: &BoundingBox, cfg: &ProposalConfig) -> f32 {
    let (h, w) = edge_map.dim();
    assert!(
        b.x1 <= w && b.y1 <= h && b.x0 < b.x1 && b.y0 < b.y1,
        "box {:?} out of bounds for {h}x{w} edge map",
        b
    );
    score_box_integral(&IntegralImage::new(edge_map), b, cfg)
}

/// Enumerate sliding windows over the scale/aspect grid, flush positions
/// included so every scale reaches the image borders.
fn candidate_boxes(h: usize, w: usize, cfg: &ProposalConfig) -> Vec<BoundingBox> {
    let mut out = Vec::new();
    let mut scale = cfg.min_box as f32;
    let max_side = h.max(w) as f32;
    while scale <= max_side {
        for aspect in [0.5f32, 1.0, 2.0] {
            let bw = (scale * aspect.sqrt()).round() as usize;
            let bh = (scale / aspect.sqrt()).round() as usize;
            if bw < 4 || bh < 4 || bw > w || bh > h {
                continue;
            }
            let sx = (bw / cfg.stride_divisor).max(1);
            let sy = (bh / cfg.stride_divisor).max(1);
            let mut ys: Vec<usize> = (0..=h - bh).step_by(sy).collect();
            if *ys.last().unwrap() != h - bh {
                ys.push(h - bh);
            }
            let mut xs: Vec<usize> = (0..=w - bw).step_by(sx).collect();
            if *xs.last().unwrap() != w - bw {
                xs.push(w - bw);
            }
            for &y0 in &ys {
                for &x0 in &xs {
                    out.push(BoundingBox {
                        x0,
                        y0,
                        x1: x0 + bw,
                        y1: y0 + bh,
                        objectness: 0.0,
                    });
                }
            }
        }
        scale *= cfg.scale_step;
    }
    out
}

/// Centered fallback boxes: a 4x4 grid of cells, then successively finer
/// grids (8x8, 16x16, ...) when more padding is needed. Same-level cells are
/// disjoint and cross-level cells overlap by at most a quarter of the larger
/// cell, so the NMS invariant survives padding.
fn fallback_boxes(h: usize, w: usize, needed: usize, kept: &[BoundingBox], nms_iou: f32) -> Vec<BoundingBox> {
    let mut out: Vec<BoundingBox> = Vec::new();
    let mut level = 2u32; // 2^2 = 4x4 grid
    while out.len() < needed {
        let n = 1usize << level;
        if h / n < 2 || w / n < 2 {
            break; // cells would degenerate below 2 px
        }
        for gy in 0..n {
            for gx in 0..n {
                let b = BoundingBox {
                    x0: gx * w / n,
                    y0: gy * h / n,
                    x1: (gx + 1) * w / n,
                    y1: (gy + 1) * h / n,
                    objectness: 0.0,
                };
                if b.x0 >= b.x1 || b.y0 >= b.y1 {
                    continue;
                }
                let clashes = kept
                    .iter()
                    .chain(out.iter())
                    .any(|k| k.iou(&b) > nms_iou);
                if !clashes {
                    out.push(b);
                    if out.len() == needed {
                        return out;
                    }
                }
            }
        }
        level += 1;
    }
    out
}

/// Proposes exactly `count` boxes for the image, sorted by descending
/// objectness, NMS-deduplicated, padded from fallback grids when the scene
/// is too plain to yield enough scored boxes.
pub fn propose_boxes(
    image: &Array3<f32>,
    count: usize,
    image_id: &str,
    cfg: &ProposalConfig,
) -> Result<ProposalSet, ProposalError> {
    if count == 0 {
        return Err(ProposalError::BadRequest("count must be >= 1".into()));
    }
    let edges = compute_edge_map(image)?;
    let (h, w) = edges.dim();
    let ii = IntegralImage::new(&edges);

    let mut scored: Vec<BoundingBox> = candidate_boxes(h, w, cfg)
        .into_iter()
        .filter_map(|mut b| {
            let s = score_box_integral(&ii, &b, cfg);
            if s > 0.0 {
                b.objectness = s;
                Some(b)
            } else {
                None
            }
        })
        .collect();
    // Deterministic order: descending score, geometric tie-break.
    scored.sort_by(|a, b| {
        b.objectness
            .partial_cmp(&a.objectness)
            .unwrap()
            .then_with(|| (a.y0, a.x0, a.y1, a.x1).cmp(&(b.y0, b.x0, b.y1, b.x1)))
    });

    let mut kept: Vec<BoundingBox> = Vec::with_capacity(count);
    for b in scored {
        if kept.len() == count {
            break;
        }
        if kept.iter().all(|k| k.iou(&b) <= cfg.nms_iou) {
            kept.push(b);
        }
    }
    if kept.len() < count {
        let pad = fallback_boxes(h, w, count - kept.len(), &kept, cfg.nms_iou);
        kept.extend(pad);
    }
    if kept.len() < count {
        return Err(ProposalError::BadRequest(format!(
            "cannot produce {count} boxes for a {h}x{w} image"
        )));
    }
    Ok(ProposalSet {
        boxes: kept,
        source_image_id: image_id.to_string(),
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct ProposalRecord<'a> {
    image_id: &'a str,
    x0: usize,
    y0: usize,
    x1: usize,
    y1: usize,
    objectness: f32,
}

/// Appends one JSON object per box, one per line.
pub fn write_proposals_jsonl(path: &Path, sets: &[ProposalSet]) -> Result<(), ProposalError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for set in sets {
        for b in &set.boxes {
            let rec = ProposalRecord {
                image_id: &set.source_image_id,
                x0: b.x0,
                y0: b.y0,
                x1: b.x1,
                y1: b.y1,
                objectness: b.objectness,
            };
            let line = serde_json::to_string(&rec)
                .map_err(|e| ProposalError::BadRequest(format!("encode: {e}")))?;
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}
