//! Differentiable sound-source box selection.
//!
//! Each proposed box is cropped, encoded to a C-dimensional feature, and
//! scored by a small MLP for "likelihood of producing sound". During
//! training a pair of boxes (one per source image) is sampled from the
//! outer-product distribution of the two score vectors with a
//! straight-through Gumbel-softmax, so the sampling stays differentiable.
//! At inference the best-scoring non-overlapping pair is found by
//! exhaustive search.

use ndarray::{Array2, Array3};
use rand::Rng;

use crate::img;
use crate::nn::{conv2d, linear, register_conv2d, register_linear, Ctx, ParamStore};
use crate::proposals::BoundingBox;
use crate::tensor::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum SelectorError {
    #[error("invalid crop: {0}")]
    BadCrop(#[from] img::ImgError),
    #[error("dimension mismatch: {0}")]
    DimMismatch(String),
    #[error("need at least two boxes, got {0}")]
    TooFewBoxes(usize),
}

/// Architecture and sampling knobs for the selector.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SelectorConfig {
    /// Feature dimension C.
    pub feature_dim: usize,
    /// Hidden width of the scoring MLP.
    pub hidden_dim: usize,
    /// Gumbel-softmax temperature, constant over training.
    pub temperature: f32,
    /// Side length crops are resized to before encoding.
    pub encoder_input: usize,
    /// Non-overlap tolerance: a pair is admissible when the intersection
    /// area is at most epsilon times the smaller box area. Zero means
    /// strictly disjoint.
    pub overlap_epsilon: f32,
}

impl Default for SelectorConfig {
    fn default() -> Self {
        Self {
            feature_dim: 32,
            hidden_dim: 128,
            temperature: 1.0,
            encoder_input: 224,
            overlap_epsilon: 0.0,
        }
    }
}

/// Channel widths of the four stride-2 encoder stages.
const ENC_CHANNELS: [usize; 4] = [16, 32, 64, 64];

/// Crop encoder + score MLP with parameters in a shared store.
pub struct Selector {
    pub cfg: SelectorConfig,
}

impl Selector {
    pub fn new(cfg: SelectorConfig) -> Self {
        assert!(
            cfg.encoder_input >= 16 && cfg.encoder_input % 16 == 0,
            "encoder input must be a multiple of 16 (four stride-2 stages)"
        );
        Self { cfg }
    }

    /// Registers every tensor the selector forward pass binds.
    pub fn register_params(&self, store: &mut ParamStore) {
        let mut c_in = 3;
        for (i, &c_out) in ENC_CHANNELS.iter().enumerate() {
            register_conv2d(store, &format!("sel.enc.conv{i}"), c_in, c_out, 3);
            c_in = c_out;
        }
        register_linear(store, "sel.enc.fc", c_in, self.cfg.feature_dim);
        register_linear(store, "sel.score.fc1", self.cfg.feature_dim, self.cfg.hidden_dim);
        register_linear(store, "sel.score.fc2", self.cfg.hidden_dim, 1);
        // The score head ends in a ReLU, so a default-initialized output
        // layer kills roughly half of all initial scores, and when one
        // image's scores all die the pair distribution degenerates to the
        // gradient-free uniform fallback — an absorbing state, since the
        // fallback is constant and feeds no gradient back. Shrinking the
        // output weights and lifting the bias starts every score near +0.5:
        // the initial pair distribution is close to uniform (the pair
        // probabilities are scale-invariant, so the absolute level is free),
        // every scoring-path parameter receives gradient from the first step
        // on, and the distance to the all-dead boundary is large enough that
        // early training noise does not random-walk the head into it.
        let w2 = store
            .get("sel.score.fc2.w")
            .expect("just registered")
            .mapv(|v| v * 0.01);
        store.set("sel.score.fc2.w", w2);
        store.set(
            "sel.score.fc2.b",
            ndarray::ArrayD::from_elem(ndarray::IxDyn(&[1]), 0.5),
        );
    }

    /// Encodes one cropped region to a C-vector on the tape.
    ///
    /// The crop is resized to the configured encoder input, passed through
    /// four stride-2 conv+ReLU stages, average-pooled, and projected to C.
    pub fn encode_crop(&self, ctx: &mut Ctx, crop: &Array3<f32>) -> Result<Var, SelectorError> {
        let (h, w, c) = crop.dim();
        if h == 0 || w == 0 {
            return Err(SelectorError::BadCrop(img::ImgError::EmptyCrop));
        }
        if c != 3 {
            return Err(SelectorError::DimMismatch(format!(
                "crop must have 3 channels, got {c}"
            )));
        }
        let s = self.cfg.encoder_input;
        let resized = img::resize_rgb(crop, s, s);
        // HWC -> [1, 3, s, s]
        let mut chw = ndarray::Array4::<f32>::zeros((1, 3, s, s));
        for i in 0..s {
            for j in 0..s {
                for ch in 0..3 {
                    chw[[0, ch, i, j]] = resized[[i, j, ch]];
                }
            }
        }
        let mut x = ctx.tape.leaf(chw.into_dyn());
        for i in 0..ENC_CHANNELS.len() {
            x = conv2d(ctx, x, &format!("sel.enc.conv{i}"), 3, 2, 1);
            x = ctx.tape.relu(x);
        }
        let pooled = ctx.tape.global_avg_pool(x); // [1, c_last]
        let feat = linear(ctx, pooled, "sel.enc.fc", self.cfg.feature_dim); // [1, C]
        Ok(ctx.tape.reshape(feat, &[self.cfg.feature_dim]))
    }

    /// Crops and encodes every box of one image, stacking the features into
    /// an `[N, C]` matrix on the tape.
    pub fn encode_boxes(
        &self,
        ctx: &mut Ctx,
        image: &Array3<f32>,
        boxes: &[BoundingBox],
    ) -> Result<Var, SelectorError> {
        let mut rows = Vec::with_capacity(boxes.len());
        for b in boxes {
            let crop = img::crop_rgb(image, b.x0, b.y0, b.x1, b.y1)?;
            rows.push(self.encode_crop(ctx, &crop)?);
        }
        Ok(ctx.tape.stack_rows(&rows))
    }

    /// Scores features `[N, C] -> [N]`: ReLU(FC(ReLU(FC(v)))) per row, so
    /// every score is nonnegative.
    pub fn score_features(&self, ctx: &mut Ctx, features: Var) -> Var {
        let n = ctx.tape.value(features).shape()[0];
        let h = linear(ctx, features, "sel.score.fc1", self.cfg.hidden_dim);
        let h = ctx.tape.relu(h);
        let s = linear(ctx, h, "sel.score.fc2", 1); // [N, 1]
        let s = ctx.tape.relu(s);
        ctx.tape.reshape(s, &[n])
    }
}

/// Joint pair distribution from two nonnegative score vectors:
/// `P[i, j] = s1[i] * s2[j] / sum(outer product)`.
///
/// When every product is zero the distribution is undefined; a uniform
/// constant (without gradient) is substituted and a warning logged.
pub fn pair_probabilities(tape: &mut Tape, s1: Var, s2: Var) -> Var {
    let n1 = tape.value(s1).len();
    let n2 = tape.value(s2).len();
    debug_assert!(
        tape.value(s1).iter().chain(tape.value(s2).iter()).all(|&v| v >= 0.0),
        "pair_probabilities expects nonnegative scores"
    );
    let col = tape.reshape(s1, &[n1, 1]);
    let row = tape.reshape(s2, &[1, n2]);
    let outer = tape.matmul(col, row); // [n1, n2]
    let total = tape.sum(outer);
    if tape.scalar(total) <= 0.0 {
        log::warn!("all score products are zero; falling back to a uniform pair distribution");
        let uniform = Array2::from_elem((n1, n2), 1.0 / (n1 * n2) as f32);
        return tape.leaf(uniform.into_dyn());
    }
    let inv = tape.recip(total);
    tape.mul_scalar_var(outer, inv)
}

/// Draws an `n x m` matrix of standard Gumbel noise: `-ln(-ln(U))`.
pub fn sample_gumbel(rng: &mut impl Rng, n: usize, m: usize) -> Array2<f32> {
    Array2::from_shape_fn((n, m), |_| {
        // Open interval keeps both logs finite.
        let u: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        (-(-u.ln()).ln()) as f32
    })
}

/// Straight-through Gumbel-softmax over the flattened cells of `p`.
///
/// Forward: exactly one-hot at `argmax (ln p + g) / temperature` (ties to
/// the lowest flat index). Backward: gradients flow as if the output were
/// the soft softmax relaxation of the same logits. Zero-probability cells
/// get a floor of 1e-30 before the log, so they are never sampled and
/// contribute no gradient.
pub fn st_gumbel_sample(tape: &mut Tape, p: Var, temperature: f32, gumbel: &Array2<f32>) -> Var {
    assert!(temperature > 0.0, "temperature must be positive");
    let shape = tape.value(p).shape().to_vec();
    assert_eq!(shape.len(), 2, "expected a probability matrix");
    assert_eq!(
        (shape[0], shape[1]),
        gumbel.dim(),
        "noise shape must match the distribution"
    );
    let cells = shape[0] * shape[1];

    let floored = tape.clamp_min(p, 1e-30);
    let logp = tape.ln(floored);
    let noise = tape.leaf(gumbel.clone().into_dyn());
    let pert = tape.add(logp, noise);
    let z = tape.scale(pert, 1.0 / temperature);

    let zflat = tape.reshape(z, &[1, cells]);
    let soft = tape.softmax_rows(zflat);

    let zvals = tape.value(zflat);
    let mut best = 0usize;
    let mut best_v = f32::NEG_INFINITY;
    for (i, &v) in zvals.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    let mut hard = Array2::<f32>::zeros((1, cells));
    hard[[0, best]] = 1.0;
    let hard = tape.leaf(hard.into_dyn());

    let st = tape.straight_through(hard, soft);
    tape.reshape(st, &[shape[0], shape[1]])
}

/// Weighted feature gathers driven by the selection matrix:
/// `v1 = Σ_i f1[i] · (Σ_j D[i,j])` and `v2 = Σ_j f2[j] · (Σ_i D[i,j])`.
/// With a one-hot `D` this reproduces plain row indexing, and it stays
/// differentiable for soft `D`.
pub fn gather_selected_features(
    tape: &mut Tape,
    features1: Var,
    features2: Var,
    d: Var,
) -> (Var, Var) {
    let dim = tape.value(d).shape().to_vec();
    let (n1, n2) = (dim[0], dim[1]);
    assert_eq!(tape.value(features1).shape()[0], n1, "features1 rows must match D");
    assert_eq!(tape.value(features2).shape()[0], n2, "features2 rows must match D");

    let ones_col = tape.leaf(Array2::from_elem((n2, 1), 1.0f32).into_dyn());
    let row_w = tape.matmul(d, ones_col); // [n1, 1]
    let row_w = tape.reshape(row_w, &[n1]);
    let v1 = tape.weighted_row_sum(row_w, features1);

    let ones_row = tape.leaf(Array2::from_elem((1, n1), 1.0f32).into_dyn());
    let col_w = tape.matmul(ones_row, d); // [1, n2]
    let col_w = tape.reshape(col_w, &[n2]);
    let v2 = tape.weighted_row_sum(col_w, features2);
    (v1, v2)
}

/// Outcome of the inference-time pair search.
#[derive(Debug, Clone)]
pub struct PairSelection {
    /// Chosen box indices `(i, j)` with `i < j`.
    pub indices: (usize, usize),
    /// All admissible non-overlapping pairs that were considered.
    pub no_set: Vec<(usize, usize)>,
    /// True when no admissible pair existed and the overlap constraint was
    /// relaxed.
    pub used_fallback: bool,
}

fn pair_overlaps(a: &BoundingBox, b: &BoundingBox, epsilon: f32) -> bool {
    let ix0 = a.x0.max(b.x0);
    let iy0 = a.y0.max(b.y0);
    let ix1 = a.x1.min(b.x1);
    let iy1 = a.y1.min(b.y1);
    if ix0 >= ix1 || iy0 >= iy1 {
        return false;
    }
    let inter = ((ix1 - ix0) * (iy1 - iy0)) as f32;
    inter > epsilon * a.area().min(b.area()) as f32
}

/// Exhaustive argmax of the score product over non-overlapping pairs
/// `i < j`, ties broken lexicographically.
///
/// If every pair overlaps, the overlap constraint is dropped: among the
/// maximum-product pairs the one with the smallest IoU is returned and a
/// warning is logged.
pub fn select_pair_inference(
    scores: &[f32],
    boxes: &[BoundingBox],
    epsilon: f32,
) -> Result<PairSelection, SelectorError> {
    let m = scores.len();
    if m != boxes.len() {
        return Err(SelectorError::DimMismatch(format!(
            "{m} scores vs {} boxes",
            boxes.len()
        )));
    }
    if m < 2 {
        return Err(SelectorError::TooFewBoxes(m));
    }

    let mut no_set = Vec::new();
    for i in 0..m {
        for j in i + 1..m {
            if !pair_overlaps(&boxes[i], &boxes[j], epsilon) {
                no_set.push((i, j));
            }
        }
    }

    if !no_set.is_empty() {
        let mut best = no_set[0];
        let mut best_p = scores[best.0] * scores[best.1];
        for &(i, j) in &no_set[1..] {
            let p = scores[i] * scores[j];
            if p > best_p {
                best_p = p;
                best = (i, j);
            }
        }
        return Ok(PairSelection {
            indices: best,
            no_set,
            used_fallback: false,
        });
    }

    log::warn!(
        "no non-overlapping box pair exists; relaxing the overlap constraint \
         to the minimum-IoU pair among the top-scoring pairs"
    );
    let mut max_p = f32::NEG_INFINITY;
    for i in 0..m {
        for j in i + 1..m {
            max_p = max_p.max(scores[i] * scores[j]);
        }
    }
    let mut best: Option<(usize, usize)> = None;
    let mut best_iou = f32::INFINITY;
    for i in 0..m {
        for j in i + 1..m {
            if scores[i] * scores[j] < max_p {
                continue;
            }
            let iou = boxes[i].iou(&boxes[j]);
            if iou < best_iou {
                best_iou = iou;
                best = Some((i, j));
            }
        }
    }
    Ok(PairSelection {
        indices: best.expect("m >= 2 guarantees at least one pair"),
        no_set,
        used_fallback: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::seeded_rng;
    use ndarray::{arr1, arr2, ArrayD};

    fn desk_selector() -> Selector {
        Selector::new(SelectorConfig {
            feature_dim: 32,
            hidden_dim: 128,
            temperature: 1.0,
            encoder_input: 32,
            overlap_epsilon: 0.0,
        })
    }

    fn bx(x0: usize, y0: usize, x1: usize, y1: usize) -> BoundingBox {
        BoundingBox { x0, y0, x1, y1, objectness: 0.0 }
    }

    #[test]
    fn identical_crops_encode_to_identical_features() {
        let sel = desk_selector();
        let mut store = ParamStore::new(5);
        sel.register_params(&mut store);
        let crop = Array3::from_shape_fn((20, 24, 3), |(i, j, c)| {
            ((i * 31 + j * 7 + c * 3) % 11) as f32 / 11.0
        });
        let f = |crop: &Array3<f32>| -> Vec<f32> {
            let mut ctx = Ctx::new(&store);
            let v = sel.encode_crop(&mut ctx, crop).unwrap();
            ctx.tape.value(v).iter().copied().collect()
        };
        assert_eq!(f(&crop), f(&crop.clone()));
    }

    #[test]
    fn random_encoder_produces_finite_c_vectors() {
        let sel = desk_selector();
        let mut store = ParamStore::new(6);
        sel.register_params(&mut store);
        let crop = Array3::from_shape_fn((17, 13, 3), |(i, j, _)| {
            ((i as f32).sin() + (j as f32).cos()).abs() / 2.0
        });
        let mut ctx = Ctx::new(&store);
        let v = sel.encode_crop(&mut ctx, &crop).unwrap();
        let vals = ctx.tape.value(v);
        assert_eq!(vals.len(), 32, "feature dimension must be C");
        assert!(vals.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn zero_crop_encodes_to_zero_through_fresh_biases() {
        // Biases initialize to zero, so a black crop stays zero through
        // every conv/ReLU stage and the final projection.
        let sel = desk_selector();
        let mut store = ParamStore::new(7);
        sel.register_params(&mut store);
        let crop = Array3::zeros((16, 16, 3));
        let mut ctx = Ctx::new(&store);
        let v = sel.encode_crop(&mut ctx, &crop).unwrap();
        assert!(
            ctx.tape.value(v).iter().all(|&x| x == 0.0),
            "zero input through zero biases must give a zero feature"
        );
    }

    #[test]
    fn empty_crop_is_rejected() {
        let sel = desk_selector();
        let mut store = ParamStore::new(8);
        sel.register_params(&mut store);
        let mut ctx = Ctx::new(&store);
        let empty = Array3::zeros((0, 5, 3));
        assert!(sel.encode_crop(&mut ctx, &empty).is_err());
    }

    #[test]
    fn scores_match_a_hand_computed_two_layer_mlp() {
        let sel = Selector::new(SelectorConfig {
            feature_dim: 2,
            hidden_dim: 2,
            encoder_input: 32,
            ..SelectorConfig::default()
        });
        let mut store = ParamStore::new(0);
        sel.register_params(&mut store);
        // W1 = identity, b1 = 0, W2 = [1, 1]^T, b2 = 0.
        store.set("sel.score.fc1.w", arr2(&[[1.0f32, 0.0], [0.0, 1.0]]).into_dyn());
        store.set("sel.score.fc1.b", arr1(&[0.0f32, 0.0]).into_dyn());
        store.set("sel.score.fc2.w", arr2(&[[1.0f32], [1.0]]).into_dyn());
        store.set("sel.score.fc2.b", arr1(&[0.0f32]).into_dyn());
        let mut ctx = Ctx::new(&store);
        let v = ctx.tape.leaf(arr2(&[[2.0f32, -3.0]]).into_dyn());
        let s = sel.score_features(&mut ctx, v);
        // ReLU([2, -3]) = [2, 0]; sum -> 2; final ReLU keeps 2.
        assert_eq!(ctx.tape.value(s).as_slice().unwrap(), &[2.0]);
    }

    #[test]
    fn zero_parameters_give_zero_scores() {
        let sel = desk_selector();
        let mut store = ParamStore::new(0);
        sel.register_params(&mut store);
        store.set("sel.score.fc1.w", Array2::zeros((32, 128)).into_dyn());
        store.set("sel.score.fc2.w", Array2::zeros((128, 1)).into_dyn());
        store.set("sel.score.fc2.b", ArrayD::zeros(ndarray::IxDyn(&[1])));
        let mut ctx = Ctx::new(&store);
        let v = ctx.tape.leaf(
            Array2::from_shape_fn((4, 32), |(i, j)| (i + j) as f32 * 0.1).into_dyn(),
        );
        let s = sel.score_features(&mut ctx, v);
        assert!(ctx.tape.value(s).iter().all(|&x| x == 0.0));
    }

    #[test]
    fn fresh_parameters_give_live_nearly_uniform_scores() {
        // The default initialization must not start inside the all-zero
        // degenerate case: every score positive, none dominating, so the
        // scoring path receives gradient from the very first step.
        for seed in [0u64, 7, 1234] {
            let sel = desk_selector();
            let mut store = ParamStore::new(seed);
            sel.register_params(&mut store);
            let mut ctx = Ctx::new(&store);
            let v = ctx.tape.leaf(
                Array2::from_shape_fn((6, 32), |(i, j)| {
                    (((i * 31 + j * 17) % 23) as f32 / 23.0 - 0.5) * 2.0
                })
                .into_dyn(),
            );
            let s = sel.score_features(&mut ctx, v);
            let scores: Vec<f32> = ctx.tape.value(s).iter().copied().collect();
            let (lo, hi) = scores
                .iter()
                .fold((f32::INFINITY, 0.0f32), |(l, h), &x| (l.min(x), h.max(x)));
            assert!(lo > 0.0, "a fresh score died: {scores:?}");
            assert!(hi < 4.0 * lo, "initial scores too spread: {scores:?}");
        }
    }

    #[test]
    fn scores_are_nonnegative_and_positively_homogeneous() {
        // With bias-free parameters the ReLU-FC chain is positively
        // homogeneous: score(alpha * v) = alpha * score(v).
        let sel = desk_selector();
        let mut store = ParamStore::new(11);
        sel.register_params(&mut store);
        store.set("sel.score.fc2.b", ArrayD::zeros(ndarray::IxDyn(&[1])));
        let v0 = Array2::from_shape_fn((3, 32), |(i, j)| ((i * 37 + j * 13) % 19) as f32 / 19.0 - 0.4);
        let score_of = |vals: &Array2<f32>| -> Vec<f32> {
            let mut ctx = Ctx::new(&store);
            let v = ctx.tape.leaf(vals.clone().into_dyn());
            let s = sel.score_features(&mut ctx, v);
            ctx.tape.value(s).iter().copied().collect()
        };
        let s1 = score_of(&v0);
        let s2 = score_of(&v0.mapv(|x| 2.0 * x));
        for (a, b) in s1.iter().zip(&s2) {
            assert!(*a >= 0.0, "scores must be nonnegative");
            assert!(
                (2.0 * a - b).abs() <= 1e-5 * b.abs().max(1.0),
                "homogeneity violated: 2*{a} vs {b}"
            );
        }
    }

    #[test]
    fn pair_probabilities_match_direct_arithmetic() {
        let mut tape = Tape::new();
        let s1 = tape.leaf(arr1(&[3.0f32, 1.0]).into_dyn());
        let s2 = tape.leaf(arr1(&[2.0f32, 2.0]).into_dyn());
        let p = pair_probabilities(&mut tape, s1, s2);
        let got = tape.value(p);
        let expect = [0.375f32, 0.375, 0.125, 0.125];
        for (g, e) in got.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-6, "P mismatch: {g} vs {e}");
        }
    }

    #[test]
    fn uniform_scores_give_uniform_pairs_and_one_hots_concentrate() {
        let mut tape = Tape::new();
        let u = tape.leaf(arr1(&[1.0f32, 1.0, 1.0]).into_dyn());
        let p = pair_probabilities(&mut tape, u, u);
        for &v in tape.value(p).iter() {
            assert!((v - 1.0 / 9.0).abs() < 1e-6);
        }

        let a = tape.leaf(arr1(&[0.0f32, 2.0, 0.0]).into_dyn());
        let b = tape.leaf(arr1(&[0.0f32, 0.0, 5.0]).into_dyn());
        let p = pair_probabilities(&mut tape, a, b);
        let pv = tape.value(p);
        for i in 0..3 {
            for j in 0..3 {
                let expect = if (i, j) == (1, 2) { 1.0 } else { 0.0 };
                assert!((pv[[i, j]] - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn all_zero_scores_fall_back_to_uniform() {
        let mut tape = Tape::new();
        let z = tape.leaf(arr1(&[0.0f32, 0.0]).into_dyn());
        let p = pair_probabilities(&mut tape, z, z);
        for &v in tape.value(p).iter() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn st_sample_is_one_hot() {
        let mut tape = Tape::new();
        let s1 = tape.leaf(arr1(&[1.0f32, 2.0, 0.5]).into_dyn());
        let s2 = tape.leaf(arr1(&[0.3f32, 0.9, 1.1]).into_dyn());
        let p = pair_probabilities(&mut tape, s1, s2);
        let g = sample_gumbel(&mut seeded_rng(3, "gumbel-test", 0), 3, 3);
        let d = st_gumbel_sample(&mut tape, p, 1.0, &g);
        let dv = tape.value(d);
        let ones = dv.iter().filter(|&&v| v == 1.0).count();
        let zeros = dv.iter().filter(|&&v| v == 0.0).count();
        assert_eq!(ones, 1, "exactly one cell must be selected");
        assert_eq!(zeros, 8, "all other cells must be zero");
    }

    #[test]
    fn zero_noise_selects_the_argmax_of_p() {
        let mut tape = Tape::new();
        let s1 = tape.leaf(arr1(&[3.0f32, 1.0]).into_dyn());
        let s2 = tape.leaf(arr1(&[1.0f32, 2.0]).into_dyn());
        let p = pair_probabilities(&mut tape, s1, s2);
        let zero_noise = Array2::zeros((2, 2));
        let d = st_gumbel_sample(&mut tape, p, 1.0, &zero_noise);
        let dv = tape.value(d);
        // P ∝ [[3, 6], [1, 2]] -> argmax at (0, 1).
        assert_eq!(dv[[0, 1]], 1.0);
        assert_eq!(dv.iter().filter(|&&v| v != 0.0).count(), 1);
    }

    #[test]
    fn sample_frequencies_follow_the_distribution() {
        // P = [[0.375, 0.375], [0.125, 0.125]] from s1=[3,1], s2=[2,2].
        let draws = 10_000usize;
        let mut counts = [0usize; 4];
        let mut rng = seeded_rng(1234, "gumbel-mc", 0);
        for _ in 0..draws {
            let mut tape = Tape::new();
            let s1 = tape.leaf(arr1(&[3.0f32, 1.0]).into_dyn());
            let s2 = tape.leaf(arr1(&[2.0f32, 2.0]).into_dyn());
            let p = pair_probabilities(&mut tape, s1, s2);
            let g = sample_gumbel(&mut rng, 2, 2);
            let d = st_gumbel_sample(&mut tape, p, 1.0, &g);
            let dv = tape.value(d);
            for k in 0..4 {
                if dv[[k / 2, k % 2]] == 1.0 {
                    counts[k] += 1;
                }
            }
        }
        let probs = [0.375f64, 0.375, 0.125, 0.125];
        for k in 0..4 {
            let freq = counts[k] as f64 / draws as f64;
            let sigma = (probs[k] * (1.0 - probs[k]) / draws as f64).sqrt();
            assert!(
                (freq - probs[k]).abs() <= 4.0 * sigma,
                "cell {k}: frequency {freq} vs probability {} (4 sigma = {})",
                probs[k],
                4.0 * sigma
            );
        }
    }

    #[test]
    fn zero_probability_cells_are_never_sampled() {
        let mut rng = seeded_rng(99, "gumbel-zero", 0);
        for _ in 0..500 {
            let mut tape = Tape::new();
            let s1 = tape.leaf(arr1(&[1.0f32, 0.0]).into_dyn());
            let s2 = tape.leaf(arr1(&[1.0f32, 1.0]).into_dyn());
            let p = pair_probabilities(&mut tape, s1, s2);
            let g = sample_gumbel(&mut rng, 2, 2);
            let d = st_gumbel_sample(&mut tape, p, 1.0, &g);
            let dv = tape.value(d);
            assert_eq!(dv[[1, 0]], 0.0, "row with zero score must never win");
            assert_eq!(dv[[1, 1]], 0.0, "row with zero score must never win");
        }
    }

    #[test]
    fn straight_through_gradient_matches_soft_finite_differences() {
        // With a linear loss sum(c ⊙ D), the straight-through gradient is by
        // construction the gradient of the same loss through the SOFT
        // relaxation. The reference is an independent f64 implementation of
        // the soft path, differentiated by central differences.
        let s1v = [0.7f64, 1.3, 0.4];
        let s2v = [1.1f64, 0.5, 0.9];
        let tau = 1.0f64;
        let g = sample_gumbel(&mut seeded_rng(2024, "gumbel-grad", 0), 3, 3);
        let c = Array2::from_shape_fn((3, 3), |(i, j)| ((i * 3 + j) as f32 * 0.37).sin());

        let soft_loss = |s1: &[f64], s2: &[f64]| -> f64 {
            let mut outer = [[0.0f64; 3]; 3];
            let mut total = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    outer[i][j] = s1[i] * s2[j];
                    total += outer[i][j];
                }
            }
            let mut z = [[0.0f64; 3]; 3];
            let mut zmax = f64::NEG_INFINITY;
            for i in 0..3 {
                for j in 0..3 {
                    let p = (outer[i][j] / total).max(1e-30);
                    z[i][j] = (p.ln() + g[[i, j]] as f64) / tau;
                    zmax = zmax.max(z[i][j]);
                }
            }
            let mut denom = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    denom += (z[i][j] - zmax).exp();
                }
            }
            let mut loss = 0.0;
            for i in 0..3 {
                for j in 0..3 {
                    let soft = (z[i][j] - zmax).exp() / denom;
                    loss += c[[i, j]] as f64 * soft;
                }
            }
            loss
        };

        // Analytic gradient through the tape (straight-through path).
        let mut tape = Tape::new();
        let s1 = tape.leaf(arr1(&[s1v[0] as f32, s1v[1] as f32, s1v[2] as f32]).into_dyn());
        let s2 = tape.leaf(arr1(&[s2v[0] as f32, s2v[1] as f32, s2v[2] as f32]).into_dyn());
        let p = pair_probabilities(&mut tape, s1, s2);
        let d = st_gumbel_sample(&mut tape, p, tau as f32, &g);
        let cv = tape.leaf(c.clone().into_dyn());
        let prod = tape.mul(d, cv);
        let loss = tape.sum(prod);
        let grads = tape.backward(loss);
        let gs1 = grads[s1.0].clone().unwrap();
        let gs2 = grads[s2.0].clone().unwrap();

        let h = 1e-6;
        for k in 0..3 {
            let mut up = s1v;
            up[k] += h;
            let mut dn = s1v;
            dn[k] -= h;
            let fd = (soft_loss(&up, &s2v) - soft_loss(&dn, &s2v)) / (2.0 * h);
            let ana = gs1.as_slice().unwrap()[k] as f64;
            assert!(
                (ana - fd).abs() <= 1e-3 * fd.abs().max(1e-3),
                "d loss/d s1[{k}]: straight-through {ana} vs soft finite-diff {fd}"
            );
        }
        for k in 0..3 {
            let mut up = s2v;
            up[k] += h;
            let mut dn = s2v;
            dn[k] -= h;
            let fd = (soft_loss(&s1v, &up) - soft_loss(&s1v, &dn)) / (2.0 * h);
            let ana = gs2.as_slice().unwrap()[k] as f64;
            assert!(
                (ana - fd).abs() <= 1e-3 * fd.abs().max(1e-3),
                "d loss/d s2[{k}]: straight-through {ana} vs soft finite-diff {fd}"
            );
        }
    }

    #[test]
    fn pair_probabilities_are_scale_invariant() {
        let p_of = |a: f32, b: f32| -> Vec<f32> {
            let mut tape = Tape::new();
            let s1 = tape.leaf(arr1(&[0.2f32 * a, 1.7 * a, 0.9 * a]).into_dyn());
            let s2 = tape.leaf(arr1(&[1.1f32 * b, 0.4 * b, 0.6 * b]).into_dyn());
            let p = pair_probabilities(&mut tape, s1, s2);
            tape.value(p).iter().copied().collect()
        };
        let base = p_of(1.0, 1.0);
        let scaled = p_of(3.5, 0.25);
        for (x, y) in base.iter().zip(&scaled) {
            assert!((x - y).abs() < 1e-6, "P must not depend on joint rescaling");
        }
    }

    #[test]
    fn gather_reproduces_indexing_for_one_hot_selections() {
        let n = 6;
        let c = 4;
        let f1v = Array2::from_shape_fn((n, c), |(i, j)| (i * 10 + j) as f32);
        let f2v = Array2::from_shape_fn((n, c), |(i, j)| -((i * 10 + j) as f32));
        let mut d = Array2::<f32>::zeros((n, n));
        d[[2, 5]] = 1.0;

        let mut tape = Tape::new();
        let f1 = tape.leaf(f1v.clone().into_dyn());
        let f2 = tape.leaf(f2v.clone().into_dyn());
        let dv = tape.leaf(d.into_dyn());
        let (v1, v2) = gather_selected_features(&mut tape, f1, f2, dv);
        assert_eq!(
            tape.value(v1).as_slice().unwrap(),
            f1v.row(2).as_slice().unwrap()
        );
        assert_eq!(
            tape.value(v2).as_slice().unwrap(),
            f2v.row(5).as_slice().unwrap()
        );
    }

    #[test]
    fn gather_with_soft_weights_is_a_convex_combination() {
        let f1v = arr2(&[[1.0f32, 0.0], [0.0, 1.0]]);
        let f2v = arr2(&[[2.0f32, 2.0], [4.0, 4.0]]);
        let d = arr2(&[[0.25f32, 0.25], [0.1, 0.4]]);
        let mut tape = Tape::new();
        let f1 = tape.leaf(f1v.into_dyn());
        let f2 = tape.leaf(f2v.into_dyn());
        let dv = tape.leaf(d.into_dyn());
        let (v1, v2) = gather_selected_features(&mut tape, f1, f2, dv);
        // Row sums of d: [0.5, 0.5]; column sums: [0.35, 0.65].
        assert_eq!(tape.value(v1).as_slice().unwrap(), &[0.5, 0.5]);
        let v2v = tape.value(v2).as_slice().unwrap().to_vec();
        let expect = [0.35 * 2.0 + 0.65 * 4.0, 0.35 * 2.0 + 0.65 * 4.0];
        for (g, e) in v2v.iter().zip(expect.iter()) {
            assert!((g - e).abs() < 1e-6, "soft gather mismatch: {g} vs {e}");
        }
    }

    #[test]
    fn gather_is_invariant_when_all_features_are_identical() {
        let f = Array2::from_elem((3, 2), 7.5f32);
        let d = arr2(&[[0.0f32, 0.5, 0.0], [0.25, 0.0, 0.0], [0.0, 0.25, 0.0]]);
        let mut tape = Tape::new();
        let f1 = tape.leaf(f.clone().into_dyn());
        let f2 = tape.leaf(f.into_dyn());
        let dv = tape.leaf(d.into_dyn());
        let (v1, v2) = gather_selected_features(&mut tape, f1, f2, dv);
        for &x in tape.value(v1).iter().chain(tape.value(v2).iter()) {
            assert!((x - 7.5).abs() < 1e-6);
        }
    }

    #[test]
    fn inference_picks_the_best_non_overlapping_pair() {
        // Box 0 overlaps box 1; boxes 0/2 and 1/2 are disjoint.
        let boxes = [bx(0, 0, 10, 10), bx(5, 5, 15, 15), bx(20, 20, 30, 30)];
        let scores = [3.0f32, 2.0, 1.0];
        let sel = select_pair_inference(&scores, &boxes, 0.0).unwrap();
        assert_eq!(sel.indices, (0, 2), "3*1 beats 2*1 in the admissible set");
        assert_eq!(sel.no_set, vec![(0, 2), (1, 2)]);
        assert!(!sel.used_fallback);
    }

    #[test]
    fn two_disjoint_boxes_select_the_only_pair() {
        let boxes = [bx(0, 0, 8, 8), bx(16, 16, 24, 24)];
        let sel = select_pair_inference(&[0.5, 0.5], &boxes, 0.0).unwrap();
        assert_eq!(sel.indices, (0, 1));
        assert!(!sel.used_fallback);
    }

    #[test]
    fn fully_overlapping_boxes_trigger_the_fallback() {
        let boxes = [bx(0, 0, 10, 10), bx(2, 2, 12, 12), bx(1, 1, 11, 11)];
        let sel = select_pair_inference(&[1.0, 1.0, 1.0], &boxes, 0.0).unwrap();
        assert!(sel.used_fallback, "an empty admissible set must fall back");
        assert!(sel.no_set.is_empty());
        // Equal scores: every pair is top-score; the minimum-IoU pair wins.
        let (i, j) = sel.indices;
        let iou = boxes[i].iou(&boxes[j]);
        for a in 0..3 {
            for b in a + 1..3 {
                assert!(iou <= boxes[a].iou(&boxes[b]) + 1e-6);
            }
        }
    }

    #[test]
    fn inference_selection_ignores_score_rescaling() {
        let boxes = [bx(0, 0, 8, 8), bx(16, 0, 24, 8), bx(0, 16, 8, 24)];
        let scores = [0.9f32, 0.7, 0.3];
        let a = select_pair_inference(&scores, &boxes, 0.0).unwrap();
        let scaled: Vec<f32> = scores.iter().map(|s| s * 37.5).collect();
        let b = select_pair_inference(&scaled, &boxes, 0.0).unwrap();
        assert_eq!(a.indices, b.indices);
    }

    #[test]
    fn too_few_boxes_are_rejected() {
        let boxes = [bx(0, 0, 8, 8)];
        assert!(select_pair_inference(&[1.0], &boxes, 0.0).is_err());
    }
}
