//! Conditioned U-Net mask predictor.
//!
//! A single U-Net maps the mixture magnitude spectrogram to a mask logit
//! map, conditioned on one visual feature vector that is tiled across the
//! bottleneck and concatenated with the encoder output. Training runs the
//! same network twice per mixture — once per selected box feature — and
//! compares the activated masks against binary ideal masks with a
//! per-pixel cross-entropy loss, the only loss in the system.

use ndarray::{Array2, Array4};

use crate::nn::{conv2d, register_conv2d, Ctx, ParamStore};
use crate::tensor::{Tape, Var};

#[derive(Debug, thiserror::Error)]
pub enum SeparatorError {
    #[error("invalid input: {0}")]
    DimMismatch(String),
}

/// Final activation converting the two logit maps to masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskHead {
    /// Independent per-source masks, `M = sigmoid(U)`.
    Sigmoid,
    /// Jointly normalized masks, `(M1, M2) = softmax(U1, U2)` per pixel,
    /// so the two masks sum to one everywhere.
    Softmax,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct SeparatorConfig {
    pub head: MaskHead,
    /// Number of down/up sampling stages.
    pub depth: usize,
    /// Channels of the first stage; stage i has `base << i`, capped at
    /// eight times the base.
    pub base_channels: usize,
    /// Length C of the conditioning feature vector.
    pub feature_dim: usize,
    /// Square side of the input spectrogram and of the output mask.
    pub input_size: usize,
}

impl Default for SeparatorConfig {
    fn default() -> Self {
        Self {
            head: MaskHead::Softmax,
            depth: 7,
            base_channels: 32,
            feature_dim: 32,
            input_size: 256,
        }
    }
}

/// The conditioned U-Net. All parameters live in a shared store; the same
/// weights serve both conditioned forward passes.
pub struct Separator {
    pub cfg: SeparatorConfig,
}

impl Separator {
    pub fn new(cfg: SeparatorConfig) -> Self {
        assert!(cfg.depth >= 1, "need at least one stage");
        assert!(
            cfg.input_size % (1 << cfg.depth) == 0 && cfg.input_size >> cfg.depth >= 1,
            "input size {} must be divisible by 2^depth = {}",
            cfg.input_size,
            1 << cfg.depth
        );
        Self { cfg }
    }

    fn channels(&self) -> Vec<usize> {
        (0..self.cfg.depth)
            .map(|i| (self.cfg.base_channels << i).min(self.cfg.base_channels * 8))
            .collect()
    }

    /// Registers every tensor the U-Net forward pass binds.
    pub fn register_params(&self, store: &mut ParamStore) {
        let ch = self.channels();
        let mut c_in = 1;
        for (i, &c) in ch.iter().enumerate() {
            register_conv2d(store, &format!("sep.enc.conv{i}"), c_in, c, 3);
            c_in = c;
        }
        let c_last = *ch.last().unwrap();
        register_conv2d(store, "sep.mid.conv", c_last + self.cfg.feature_dim, c_last, 3);
        for i in 0..self.cfg.depth {
            let c_out = if i == 0 { ch[0] } else { ch[i - 1] };
            register_conv2d(store, &format!("sep.dec.conv{i}"), 2 * ch[i], c_out, 3);
        }
        register_conv2d(store, "sep.out.conv", ch[0], 1, 3);
    }

    /// One conditioned forward pass: mixture spectrogram + feature vector
    /// to a logit map at input resolution (activation applied separately).
    pub fn unet_forward(
        &self,
        ctx: &mut Ctx,
        spec_input: &Array2<f32>,
        feature: Var,
    ) -> Result<Var, SeparatorError> {
        let (h, w) = spec_input.dim();
        let s = self.cfg.input_size;
        if h != s || w != s {
            return Err(SeparatorError::DimMismatch(format!(
                "spectrogram is {h}x{w}, expected {s}x{s}"
            )));
        }
        let flen = ctx.tape.value(feature).len();
        if flen != self.cfg.feature_dim {
            return Err(SeparatorError::DimMismatch(format!(
                "feature has length {flen}, expected {}",
                self.cfg.feature_dim
            )));
        }
        debug_assert!(spec_input.iter().all(|v| v.is_finite()));

        let depth = self.cfg.depth;
        let mut x = {
            let mut a = Array4::<f32>::zeros((1, 1, s, s));
            a.index_axis_mut(ndarray::Axis(0), 0)
                .index_axis_mut(ndarray::Axis(0), 0)
                .assign(spec_input);
            ctx.tape.leaf(a.into_dyn())
        };

        // Encoder: conv + leaky ReLU at each resolution, pool between.
        let mut skips = Vec::with_capacity(depth);
        for i in 0..depth {
            x = conv2d(ctx, x, &format!("sep.enc.conv{i}"), 3, 1, 1);
            x = ctx.tape.leaky_relu(x, 0.2);
            skips.push(x);
            x = ctx.tape.maxpool2x(x);
        }

        // Bottleneck: tile the feature over the coarsest grid and fuse.
        let hb = s >> depth;
        let c = self.cfg.feature_dim;
        let col = ctx.tape.reshape(feature, &[c, 1]);
        let ones = ctx
            .tape
            .leaf(Array2::from_elem((1, hb * hb), 1.0f32).into_dyn());
        let tiled = ctx.tape.matmul(col, ones);
        let tiled = ctx.tape.reshape(tiled, &[1, c, hb, hb]);
        x = ctx.tape.concat_c(x, tiled);
        x = conv2d(ctx, x, "sep.mid.conv", 3, 1, 1);
        x = ctx.tape.leaky_relu(x, 0.2);

        // Decoder: upsample, concatenate the skip, convolve.
        for i in (0..depth).rev() {
            x = ctx.tape.upsample2x(x);
            x = ctx.tape.concat_c(x, skips[i]);
            x = conv2d(ctx, x, &format!("sep.dec.conv{i}"), 3, 1, 1);
            x = ctx.tape.leaky_relu(x, 0.2);
        }
        let out = conv2d(ctx, x, "sep.out.conv", 3, 1, 1);
        Ok(ctx.tape.reshape(out, &[s, s]))
    }
}

/// `M = sigmoid(U)` elementwise.
pub fn sigmoid_head(tape: &mut Tape, u: Var) -> Var {
    tape.sigmoid(u)
}

/// Per-pixel two-way softmax over the pair of logit maps.
///
/// Computed as a sigmoid of the logit difference, which is algebraically
/// the max-subtracted softmax: `M1 = sigmoid(U1 - U2)`, `M2 = sigmoid(U2 -
/// U1)`, so the masks sum to one by construction.
pub fn softmax_head(tape: &mut Tape, u1: Var, u2: Var) -> (Var, Var) {
    assert_eq!(
        tape.value(u1).shape(),
        tape.value(u2).shape(),
        "softmax head needs matching logit shapes"
    );
    let d12 = tape.sub(u1, u2);
    let d21 = tape.sub(u2, u1);
    (tape.sigmoid(d12), tape.sigmoid(d21))
}

/// Clamp floor applied to predictions and their complements before logs.
pub const CE_EPS: f32 = 1e-7;

/// Mean binary cross-entropy over pixels, averaged over the given sources:
/// `-(1/K) Σ_k mean(t·ln p + (1-t)·ln(1-p))` with predictions clamped to
/// `[CE_EPS, 1 - CE_EPS]`.
pub fn per_pixel_cross_entropy(tape: &mut Tape, preds: &[Var], targets: &[&Array2<f32>]) -> Var {
    assert!(!preds.is_empty(), "need at least one prediction");
    assert_eq!(preds.len(), targets.len(), "one target per prediction");
    let mut total: Option<Var> = None;
    for (&p, t) in preds.iter().zip(targets) {
        let shape = tape.value(p).shape().to_vec();
        assert_eq!(&shape[..], &[t.nrows(), t.ncols()], "prediction/target shape mismatch");
        debug_assert!(t.iter().all(|&v| v == 0.0 || v == 1.0), "targets must be binary");

        let t_pos = tape.leaf((*t).clone().into_dyn());
        let t_neg = tape.leaf(t.mapv(|v| 1.0 - v).into_dyn());
        let p_floor = tape.clamp_min(p, CE_EPS);
        let ln_p = tape.ln(p_floor);
        let p_neg = tape.neg(p);
        let q = tape.add_scalar(p_neg, 1.0);
        let q_floor = tape.clamp_min(q, CE_EPS);
        let ln_q = tape.ln(q_floor);

        let pos = tape.mul(t_pos, ln_p);
        let neg = tape.mul(t_neg, ln_q);
        let s = tape.add(pos, neg);
        let m = tape.mean(s);
        total = Some(match total {
            Some(acc) => tape.add(acc, m),
            None => m,
        });
    }
    let sum = total.unwrap();
    let avg = tape.scale(sum, 1.0 / preds.len() as f32);
    tape.neg(avg)
}
