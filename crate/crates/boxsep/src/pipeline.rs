//! End-to-end orchestration: training on mixed solo scenes, duet inference,
//! quantitative evaluation, and checkpointing.
//!
//! Training follows the mix-and-separate recipe: two solo scenes of
//! different categories are drawn, their audio tracks summed, and the
//! separator must recover each source's ideal binary mask conditioned on a
//! box feature sampled (straight-through Gumbel-Softmax) from the joint
//! score distribution over the two scenes' box proposals. Inference on a
//! duet frame instead searches the non-overlapping pair of proposals with
//! the maximum score product.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::{Array2, Array3, ArrayD, Ix2};

use crate::audio::{self, AudioClip, Mask, Spectrogram, Stft, StftConfig};
use crate::dataset::{self, assign_splits, GenConfig, Split};
use crate::img;
use crate::metrics::{self, bss_eval, EvalRow};
use crate::nn::{self, accumulate_grads, Adam, Ctx, ParamStore};
use crate::proposals::{self, propose_boxes, BoundingBox, ProposalConfig};
use crate::rng::seeded_rng;
use crate::selector::{
    self, gather_selected_features, pair_probabilities, sample_gumbel, select_pair_inference,
    st_gumbel_sample, PairSelection, Selector, SelectorConfig,
};
use crate::separator::{
    self, per_pixel_cross_entropy, sigmoid_head, softmax_head, MaskHead, Separator,
    SeparatorConfig,
};
use crate::tensor::Var;

#[derive(Debug, thiserror::Error)]
pub enum PipelineError {
    #[error("config: {0}")]
    BadConfig(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Audio(#[from] audio::AudioError),
    #[error(transparent)]
    Dataset(#[from] dataset::DatasetError),
    #[error(transparent)]
    Proposals(#[from] proposals::ProposalError),
    #[error(transparent)]
    Selector(#[from] selector::SelectorError),
    #[error(transparent)]
    Separator(#[from] separator::SeparatorError),
    #[error(transparent)]
    Metrics(#[from] metrics::MetricsError),
    #[error(transparent)]
    Img(#[from] img::ImgError),
    #[error(transparent)]
    Nn(#[from] nn::NnError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("config file: {0}")]
    Toml(#[from] toml::de::Error),
}

impl PipelineError {
    /// True for errors caused by an invalid configuration (as opposed to
    /// missing or corrupt data). The CLI maps these to distinct exit codes.
    pub fn is_config_error(&self) -> bool {
        match self {
            Self::BadConfig(_) | Self::Toml(_) => true,
            Self::Dataset(dataset::DatasetError::BadConfig(_)) => true,
            Self::Dataset(dataset::DatasetError::BadCategory(..)) => true,
            _ => false,
        }
    }
}

/// Everything a run needs, serializable to/from TOML. Unspecified fields
/// take the defaults, which form the small preset exercised by the test
/// suites end to end.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct RunConfig {
    /// Scene generator settings (image size, sample rate, clip length).
    pub dataset: GenConfig,
    /// STFT analysis window (even) and hop, in samples.
    pub stft_window: usize,
    pub stft_hop: usize,
    /// Mask head: independent sigmoids or jointly normalized softmax.
    pub head: MaskHead,
    /// U-Net depth (pool/upsample stages) and stem width.
    pub unet_depth: usize,
    pub unet_base_channels: usize,
    /// Box feature dimension C shared by selector and separator.
    pub feature_dim: usize,
    /// Hidden width of the selector's scoring MLP.
    pub hidden_dim: usize,
    /// Square side of the separator's input/mask grid.
    pub mask_size: usize,
    /// Square side selector crops are resized to (multiple of 16).
    pub encoder_input: usize,
    /// Gumbel-Softmax temperature.
    pub temperature: f32,
    /// Proposals per image during training (N) and inference (M).
    pub train_proposals: usize,
    pub infer_proposals: usize,
    /// Pair admissibility: intersection at most epsilon times the smaller
    /// box area.
    pub overlap_epsilon: f32,
    pub learning_rate: f32,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Steps between checkpoint writes (also written at the end).
    pub checkpoint_every: usize,
    /// Size of the solo scene pool the run draws from.
    pub num_solos: usize,
    /// Fraction of each category held out for validation.
    pub val_ratio: f64,
    /// Mixture pairs scored by `evaluate`.
    pub eval_pairs: usize,
    /// bss_eval distortion filter length.
    pub eval_filter_len: usize,
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            dataset: GenConfig::default(),
            stft_window: 128,
            stft_hop: 32,
            head: MaskHead::Softmax,
            unet_depth: 4,
            unet_base_channels: 12,
            feature_dim: 32,
            hidden_dim: 128,
            mask_size: 64,
            encoder_input: 32,
            temperature: 1.0,
            train_proposals: 10,
            infer_proposals: 32,
            overlap_epsilon: 0.0,
            learning_rate: 1e-3,
            train_steps: 1500,
            batch_size: 4,
            checkpoint_every: 500,
            num_solos: 2000,
            val_ratio: 0.1,
            eval_pairs: 200,
            eval_filter_len: 32,
            seed: 17,
        }
    }
}

impl RunConfig {
    /// Full-scale preset mirroring the sizes the architecture was designed
    /// around (256x256 frames, ~6 s of 11 kHz audio, a depth-7 U-Net).
    /// Orders of magnitude slower than the default; provided for real-data
    /// runs, not exercised by the test suites.
    pub fn full_scale() -> Self {
        Self {
            dataset: GenConfig {
                image_size: 256,
                sample_rate: 11025,
                num_samples: 65280,
                num_categories: 7,
            },
            stft_window: 1022,
            stft_hop: 256,
            unet_depth: 7,
            unet_base_channels: 32,
            mask_size: 256,
            encoder_input: 224,
            infer_proposals: 80,
            learning_rate: 1e-4,
            train_steps: 30000,
            batch_size: 8,
            checkpoint_every: 1000,
            num_solos: 10000,
            eval_filter_len: 512,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.dataset.validate().map_err(PipelineError::Dataset)?;
        let err = |m: String| Err(PipelineError::BadConfig(m));
        if self.mask_size == 0 || self.mask_size % (1 << self.unet_depth) != 0 {
            return err(format!(
                "mask_size {} must be a positive multiple of 2^depth = {}",
                self.mask_size,
                1 << self.unet_depth
            ));
        }
        if self.encoder_input == 0 || self.encoder_input % 16 != 0 {
            return err(format!(
                "encoder_input {} must be a positive multiple of 16",
                self.encoder_input
            ));
        }
        if self.stft_window == 0 || self.stft_window % 2 != 0 {
            return err(format!("stft_window {} must be even", self.stft_window));
        }
        if self.stft_hop == 0 || self.stft_hop > self.stft_window {
            return err(format!(
                "stft_hop {} must be in [1, window {}]",
                self.stft_hop, self.stft_window
            ));
        }
        if self.batch_size == 0 || self.train_steps == 0 || self.checkpoint_every == 0 {
            return err("batch_size, train_steps, checkpoint_every must be positive".into());
        }
        if self.train_proposals < 1 || self.infer_proposals < 2 {
            return err("need at least 1 training and 2 inference proposals".into());
        }
        if !(self.learning_rate > 0.0) || !(self.temperature > 0.0) {
            return err("learning_rate and temperature must be positive".into());
        }
        if !(0.0..=0.9).contains(&self.val_ratio) {
            return err(format!("val_ratio {} outside [0, 0.9]", self.val_ratio));
        }
        if self.num_solos < 2 * self.dataset.num_categories {
            return err(format!(
                "num_solos {} too small for {} categories",
                self.num_solos, self.dataset.num_categories
            ));
        }
        if self.eval_filter_len == 0 || self.eval_filter_len > self.dataset.num_samples {
            return err(format!(
                "eval_filter_len {} must be in [1, clip length {}]",
                self.eval_filter_len, self.dataset.num_samples
            ));
        }
        Ok(())
    }

    /// Parses a TOML document; unspecified keys keep their defaults.
    pub fn from_toml_str(text: &str) -> Result<Self, PipelineError> {
        let cfg: Self = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn stft_config(&self) -> StftConfig {
        StftConfig {
            sample_rate: self.dataset.sample_rate,
            window_len: self.stft_window,
            hop: self.stft_hop,
        }
    }

    pub fn stft(&self) -> Result<Stft, PipelineError> {
        Ok(Stft::new(self.stft_config())?)
    }

    pub fn models(&self) -> Models {
        Models {
            selector: Selector::new(SelectorConfig {
                feature_dim: self.feature_dim,
                hidden_dim: self.hidden_dim,
                temperature: self.temperature,
                encoder_input: self.encoder_input,
                overlap_epsilon: self.overlap_epsilon,
            }),
            separator: Separator::new(SeparatorConfig {
                head: self.head,
                depth: self.unet_depth,
                base_channels: self.unet_base_channels,
                feature_dim: self.feature_dim,
                input_size: self.mask_size,
            }),
        }
    }

    /// A fresh parameter store with both networks registered.
    pub fn build_store(&self) -> ParamStore {
        let models = self.models();
        let mut store = ParamStore::new(self.seed);
        models.selector.register_params(&mut store);
        models.separator.register_params(&mut store);
        store
    }
}

pub struct Models {
    pub selector: Selector,
    pub separator: Separator,
}

/// True when two configs describe the same training trajectory, ignoring
/// runtime knobs (how far to train, checkpoint cadence, evaluation and
/// inference settings). Resuming is legal exactly between such configs.
fn same_trajectory(a: &RunConfig, b: &RunConfig) -> bool {
    let strip = |c: &RunConfig| RunConfig {
        train_steps: 0,
        checkpoint_every: 1,
        eval_pairs: 0,
        eval_filter_len: 1,
        infer_proposals: 2,
        overlap_epsilon: 0.0,
        ..c.clone()
    };
    strip(a) == strip(b)
}

// --- Solo pool ---------------------------------------------------------------

/// A regenerable solo scene: everything needed to materialize it in memory.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SoloSpec {
    pub category_id: usize,
    pub seed: u64,
}

impl SoloSpec {
    pub fn generate(&self, cfg: &GenConfig) -> Result<dataset::SceneSample, PipelineError> {
        Ok(dataset::generate_solo(cfg, self.category_id, self.seed)?)
    }
}

/// The run's deterministic solo pool, already split. Entry `i` has category
/// `i % K` and scene seed `run seed + i`, matching what `gen-data` writes
/// to disk for the same seed.
pub fn solo_pool(cfg: &RunConfig) -> (Vec<SoloSpec>, Vec<SoloSpec>) {
    let k = cfg.dataset.num_categories;
    let ids: Vec<(String, usize)> = (0..cfg.num_solos)
        .map(|i| (format!("solo-{i:05}"), i % k))
        .collect();
    let splits = assign_splits(&ids, cfg.val_ratio);
    let mut train = Vec::new();
    let mut val = Vec::new();
    for (i, split) in splits.iter().enumerate() {
        let spec = SoloSpec {
            category_id: i % k,
            seed: cfg.seed.wrapping_add(i as u64),
        };
        match split {
            Split::Train => train.push(spec),
            Split::Val => val.push(spec),
        }
    }
    (train, val)
}

/// The training pairs consumed at one step, keyed only by the step index.
pub fn training_batch(cfg: &RunConfig, train: &[SoloSpec], step: u64) -> Vec<(SoloSpec, SoloSpec)> {
    let mut rng = seeded_rng(cfg.seed, "batch-pairs", step);
    let mut out = Vec::with_capacity(cfg.batch_size);
    for _ in 0..cfg.batch_size {
        use rand::Rng;
        loop {
            let a = train[rng.random_range(0..train.len())];
            let b = train[rng.random_range(0..train.len())];
            if a.category_id != b.category_id {
                out.push((a, b));
                break;
            }
        }
    }
    out
}

// --- Training ----------------------------------------------------------------

/// Box proposals are a pure function of the image, and solo scenes are
/// regenerated deterministically from their spec, so training caches the
/// proposal set per (scene, count) instead of re-running enumeration and
/// non-maximum suppression every time the same scene is drawn into a batch.
#[derive(Default)]
pub struct ProposalCache {
    map: std::collections::HashMap<(usize, u64, usize), Vec<BoundingBox>>,
}

impl ProposalCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn boxes_for(
        &mut self,
        spec: &SoloSpec,
        image: &ndarray::Array3<f32>,
        count: usize,
        tag: &str,
    ) -> Result<Vec<BoundingBox>, PipelineError> {
        let key = (spec.category_id, spec.seed, count);
        if let Some(boxes) = self.map.get(&key) {
            return Ok(boxes.clone());
        }
        let boxes = propose_boxes(image, count, tag, &ProposalConfig::default())?.boxes;
        self.map.insert(key, boxes.clone());
        Ok(boxes)
    }
}

#[derive(Debug, Clone)]
pub struct StepStats {
    pub loss: f32,
    pub grad_l2: f64,
    /// Per-parameter gradient L2 norms for the step's averaged batch
    /// gradient, keyed by parameter name.
    pub grad_norms: BTreeMap<String, f64>,
}

fn scalar(tape: &crate::tensor::Tape, v: Var) -> f32 {
    tape.value(v).iter().next().copied().unwrap_or(f32::NAN)
}

fn to_2d(value: &ArrayD<f32>) -> Array2<f32> {
    value
        .clone()
        .into_dimensionality::<Ix2>()
        .expect("mask variables are 2-d")
}

/// The separator's input image: log-compressed mixture magnitude resized to
/// the mask grid.
fn mixture_input(cfg: &RunConfig, spec: &Spectrogram) -> Array2<f32> {
    img::resize_nearest(
        &audio::compress_magnitude(&spec.magnitude),
        cfg.mask_size,
        cfg.mask_size,
    )
}

fn apply_head(
    cfg: &RunConfig,
    tape: &mut crate::tensor::Tape,
    u1: Var,
    u2: Var,
) -> (Var, Var) {
    match cfg.head {
        MaskHead::Sigmoid => (sigmoid_head(tape, u1), sigmoid_head(tape, u2)),
        MaskHead::Softmax => softmax_head(tape, u1, u2),
    }
}

/// One optimizer update on the batch for `step`. All randomness is keyed by
/// the step index, so an interrupted and resumed run replays the identical
/// trajectory.
pub fn train_step(
    cfg: &RunConfig,
    models: &Models,
    stft: &Stft,
    store: &mut ParamStore,
    adam: &mut Adam,
    cache: &mut ProposalCache,
    train: &[SoloSpec],
    step: u64,
) -> Result<StepStats, PipelineError> {
    let batch = training_batch(cfg, train, step);
    let mut acc: BTreeMap<String, ArrayD<f32>> = BTreeMap::new();
    let mut loss_sum = 0.0f32;

    for (k, (spec_a, spec_b)) in batch.iter().enumerate() {
        let a = spec_a.generate(&cfg.dataset)?;
        let b = spec_b.generate(&cfg.dataset)?;

        let mixture = audio::mix(&a.audio, &b.audio)?;
        let spec_mix = stft.forward(&mixture);
        let input = mixture_input(cfg, &spec_mix);
        let sa = stft.forward(&a.audio);
        let sb = stft.forward(&b.audio);
        let (m1, m2) = audio::binary_target_masks(&sa, &sb)?;
        let t1 = img::resize_nearest(&m1.values, cfg.mask_size, cfg.mask_size);
        let t2 = img::resize_nearest(&m2.values, cfg.mask_size, cfg.mask_size);

        let boxes_a = cache.boxes_for(spec_a, &a.image, cfg.train_proposals, "train-a")?;
        let boxes_b = cache.boxes_for(spec_b, &b.image, cfg.train_proposals, "train-b")?;

        let mut ctx = Ctx::new(store);
        let feats_a = models.selector.encode_boxes(&mut ctx, &a.image, &boxes_a)?;
        let feats_b = models.selector.encode_boxes(&mut ctx, &b.image, &boxes_b)?;
        let scores_a = models.selector.score_features(&mut ctx, feats_a);
        let scores_b = models.selector.score_features(&mut ctx, feats_b);
        let p = pair_probabilities(&mut ctx.tape, scores_a, scores_b);

        let example = step * cfg.batch_size as u64 + k as u64;
        let mut grng = seeded_rng(cfg.seed, "gumbel", example);
        let noise = sample_gumbel(&mut grng, boxes_a.len(), boxes_b.len());
        let d = st_gumbel_sample(&mut ctx.tape, p, cfg.temperature, &noise);
        let (f1, f2) = gather_selected_features(&mut ctx.tape, feats_a, feats_b, d);

        let u1 = models.separator.unet_forward(&mut ctx, &input, f1)?;
        let u2 = models.separator.unet_forward(&mut ctx, &input, f2)?;
        let (p1, p2) = apply_head(cfg, &mut ctx.tape, u1, u2);
        let loss = per_pixel_cross_entropy(&mut ctx.tape, &[p1, p2], &[&t1, &t2]);

        loss_sum += scalar(&ctx.tape, loss);
        let grads = ctx.tape.backward(loss);
        let param_grads = ctx.param_grads(&grads);
        accumulate_grads(&mut acc, &param_grads);
    }

    let inv = 1.0 / batch.len() as f32;
    let mut grad_sq = 0.0f64;
    let mut grad_norms = BTreeMap::new();
    for (name, g) in acc.iter_mut() {
        *g *= inv;
        let sq = g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
        grad_norms.insert(name.clone(), sq.sqrt());
        grad_sq += sq;
    }
    adam.step(store, &acc);
    Ok(StepStats {
        loss: loss_sum * inv,
        grad_l2: grad_sq.sqrt(),
        grad_norms,
    })
}

#[derive(Debug, Clone)]
pub struct TrainReport {
    /// Step the run started at (nonzero when resumed).
    pub start_step: u64,
    pub end_step: u64,
    /// `(step, batch loss)` for every step run.
    pub losses: Vec<(u64, f32)>,
}

/// Runs (or resumes) training, checkpointing into `out_dir`. The loss track
/// is appended to `out_dir/train_log.csv`.
pub fn train(cfg: &RunConfig, out_dir: &Path, resume: bool) -> Result<TrainReport, PipelineError> {
    cfg.validate()?;
    let models = cfg.models();
    let stft = cfg.stft()?;
    let (train_pool, _) = solo_pool(cfg);
    if train_pool.iter().map(|s| s.category_id).collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(PipelineError::BadConfig(
            "training pool must span at least two categories".into(),
        ));
    }

    let manifest = out_dir.join("run.json");
    let (mut store, mut adam, start_step) = if resume && manifest.exists() {
        let (saved_cfg, store, adam, step) = load_checkpoint(out_dir)?;
        if !same_trajectory(&saved_cfg, cfg) {
            return Err(PipelineError::Checkpoint(
                "checkpoint was trained with a different config".into(),
            ));
        }
        log::info!("resuming from step {step}");
        (store, adam, step)
    } else {
        std::fs::create_dir_all(out_dir)?;
        (cfg.build_store(), Adam::new(cfg.learning_rate), 0)
    };

    let mut losses = Vec::new();
    let mut cache = ProposalCache::new();
    for step in start_step..cfg.train_steps as u64 {
        let stats = train_step(
            cfg,
            &models,
            &stft,
            &mut store,
            &mut adam,
            &mut cache,
            &train_pool,
            step,
        )?;
        losses.push((step, stats.loss));
        if (step + 1) % 25 == 0 || step == start_step {
            log::info!(
                "step {:>6}: loss {:.4}, grad l2 {:.3e}",
                step,
                stats.loss,
                stats.grad_l2
            );
        }
        let done = step + 1 == cfg.train_steps as u64;
        if (step + 1) % cfg.checkpoint_every as u64 == 0 || done {
            save_checkpoint(out_dir, cfg, &store, &adam, step + 1)?;
        }
    }

    let mut log_text = String::new();
    if !out_dir.join("train_log.csv").exists() {
        log_text.push_str("step,loss\n");
    }
    for (step, loss) in &losses {
        log_text.push_str(&format!("{step},{loss:.6}\n"));
    }
    use std::io::Write as _;
    let mut f = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(out_dir.join("train_log.csv"))?;
    f.write_all(log_text.as_bytes())?;

    Ok(TrainReport {
        start_step,
        end_step: cfg.train_steps as u64,
        losses,
    })
}

// --- Checkpoints --------------------------------------------------------------

#[derive(serde::Serialize, serde::Deserialize)]
struct RunManifest {
    config: RunConfig,
    step: u64,
}

/// Writes parameters and optimizer state into one tensor archive plus a
/// JSON manifest carrying the config and step count.
pub fn save_checkpoint(
    dir: &Path,
    cfg: &RunConfig,
    store: &ParamStore,
    adam: &Adam,
    step: u64,
) -> Result<(), PipelineError> {
    std::fs::create_dir_all(dir)?;
    let mut all = BTreeMap::new();
    for (name, tensor) in store.tensors() {
        all.insert(format!("p.{name}"), tensor.clone());
    }
    for (name, tensor) in adam.export_state() {
        all.insert(format!("o.{name}"), tensor);
    }
    nn::save_tensor_archive(&dir.join("model.bxsp"), &all)?;
    let manifest = RunManifest {
        config: cfg.clone(),
        step,
    };
    std::fs::write(
        dir.join("run.json"),
        serde_json::to_string_pretty(&manifest)?,
    )?;
    Ok(())
}

/// Restores a checkpoint written by [`save_checkpoint`].
pub fn load_checkpoint(dir: &Path) -> Result<(RunConfig, ParamStore, Adam, u64), PipelineError> {
    let manifest: RunManifest =
        serde_json::from_str(&std::fs::read_to_string(dir.join("run.json"))?)?;
    let cfg = manifest.config;
    cfg.validate()?;

    let archive = nn::load_tensor_archive(&dir.join("model.bxsp"))?;
    let mut params = BTreeMap::new();
    let mut opt = BTreeMap::new();
    for (key, tensor) in archive {
        if let Some(name) = key.strip_prefix("p.") {
            params.insert(name.to_string(), tensor);
        } else if let Some(name) = key.strip_prefix("o.") {
            opt.insert(name.to_string(), tensor);
        }
    }

    let mut store = cfg.build_store();
    let expected: Vec<String> = store.names().map(str::to_string).collect();
    for name in &expected {
        if !params.contains_key(name) {
            return Err(PipelineError::Checkpoint(format!(
                "archive is missing parameter {name}"
            )));
        }
    }
    if params.len() != expected.len() {
        return Err(PipelineError::Checkpoint(format!(
            "archive has {} parameters, model needs {}",
            params.len(),
            expected.len()
        )));
    }
    store.load_tensors(params);

    let mut adam = Adam::new(cfg.learning_rate);
    adam.import_state(&opt);
    Ok((cfg, store, adam, manifest.step))
}

// --- Inference -----------------------------------------------------------------

/// Result of separating a two-source frame.
pub struct DuetSeparation {
    /// Per-source estimates, same length and rate as the input clip.
    pub estimates: [AudioClip; 2],
    /// Predicted masks on the STFT grid, in [0, 1].
    pub stft_masks: [Array2<f32>; 2],
    /// The chosen boxes (selection.indices into `proposals`).
    pub boxes: [BoundingBox; 2],
    pub selection: PairSelection,
    pub proposals: Vec<BoundingBox>,
    pub scores: Vec<f32>,
    /// Mixture magnitude, for rendering.
    pub mix_magnitude: Array2<f32>,
}

/// Runs the separator on a mixture spectrogram conditioned on two box
/// features and reconstructs both sources with the mixture phase.
fn separate_features(
    cfg: &RunConfig,
    models: &Models,
    ctx: &mut Ctx,
    stft: &Stft,
    spec_mix: &Spectrogram,
    f1: Var,
    f2: Var,
) -> Result<([AudioClip; 2], [Array2<f32>; 2]), PipelineError> {
    let input = mixture_input(cfg, spec_mix);
    let u1 = models.separator.unet_forward(ctx, &input, f1)?;
    let u2 = models.separator.unet_forward(ctx, &input, f2)?;
    let (p1, p2) = apply_head(cfg, &mut ctx.tape, u1, u2);
    let (bins, frames) = spec_mix.magnitude.dim();
    let m1 = img::resize_nearest(&to_2d(ctx.tape.value(p1)), bins, frames);
    let m2 = img::resize_nearest(&to_2d(ctx.tape.value(p2)), bins, frames);
    let e1 = audio::apply_mask_reconstruct(stft, spec_mix, &Mask::new(m1.clone()))?;
    let e2 = audio::apply_mask_reconstruct(stft, spec_mix, &Mask::new(m2.clone()))?;
    Ok(([e1, e2], [m1, m2]))
}

/// Separates a duet: proposes boxes on the single frame, picks the
/// non-overlapping pair with the maximum score product, and splits the
/// audio conditioned on the two boxes.
pub fn separate_duet(
    cfg: &RunConfig,
    models: &Models,
    store: &ParamStore,
    stft: &Stft,
    image: &Array3<f32>,
    clip: &AudioClip,
) -> Result<DuetSeparation, PipelineError> {
    let set = propose_boxes(image, cfg.infer_proposals, "duet", &ProposalConfig::default())?;
    let boxes = set.boxes;

    let mut ctx = Ctx::new(store);
    let feats = models.selector.encode_boxes(&mut ctx, image, &boxes)?;
    let scores_var = models.selector.score_features(&mut ctx, feats);
    let scores: Vec<f32> = ctx.tape.value(scores_var).iter().copied().collect();
    let selection = select_pair_inference(&scores, &boxes, cfg.overlap_epsilon)?;
    let (i, j) = selection.indices;

    let mut d = Array2::<f32>::zeros((boxes.len(), boxes.len()));
    d[[i, j]] = 1.0;
    let d = ctx.tape.leaf(d.into_dyn());
    let (f1, f2) = gather_selected_features(&mut ctx.tape, feats, feats, d);

    let spec_mix = stft.forward(clip);
    let (estimates, stft_masks) =
        separate_features(cfg, models, &mut ctx, stft, &spec_mix, f1, f2)?;
    Ok(DuetSeparation {
        estimates,
        stft_masks,
        boxes: [boxes[i], boxes[j]],
        selection,
        proposals: boxes,
        scores,
        mix_magnitude: spec_mix.magnitude,
    })
}

/// Proposes on one frame and returns the boxes, their selector scores, and
/// the argmax index.
pub fn top_scoring_box(
    cfg: &RunConfig,
    models: &Models,
    store: &ParamStore,
    image: &Array3<f32>,
) -> Result<(Vec<BoundingBox>, Vec<f32>, usize), PipelineError> {
    let set = propose_boxes(image, cfg.infer_proposals, "frame", &ProposalConfig::default())?;
    let mut ctx = Ctx::new(store);
    let feats = models.selector.encode_boxes(&mut ctx, image, &set.boxes)?;
    let scores_var = models.selector.score_features(&mut ctx, feats);
    let scores: Vec<f32> = ctx.tape.value(scores_var).iter().copied().collect();
    let best = scores
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(i, _)| i)
        .unwrap_or(0);
    Ok((set.boxes, scores, best))
}

/// Mix-and-separate inference: two solo frames, one summed clip. Each
/// frame's top-scoring box conditions one separator pass; the estimates
/// come back in frame order.
pub fn separate_mixture_with_frames(
    cfg: &RunConfig,
    models: &Models,
    store: &ParamStore,
    stft: &Stft,
    frame_a: &Array3<f32>,
    frame_b: &Array3<f32>,
    mixture: &AudioClip,
) -> Result<([AudioClip; 2], [BoundingBox; 2]), PipelineError> {
    let prop_cfg = ProposalConfig::default();
    let set_a = propose_boxes(frame_a, cfg.infer_proposals, "mix-a", &prop_cfg)?;
    let set_b = propose_boxes(frame_b, cfg.infer_proposals, "mix-b", &prop_cfg)?;

    let mut ctx = Ctx::new(store);
    let feats_a = models.selector.encode_boxes(&mut ctx, frame_a, &set_a.boxes)?;
    let feats_b = models.selector.encode_boxes(&mut ctx, frame_b, &set_b.boxes)?;
    let scores_a = models.selector.score_features(&mut ctx, feats_a);
    let scores_b = models.selector.score_features(&mut ctx, feats_b);
    let argmax = |v: &[f32]| {
        v.iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
            .unwrap_or(0)
    };
    let ia = argmax(&ctx.tape.value(scores_a).iter().copied().collect::<Vec<_>>());
    let ib = argmax(&ctx.tape.value(scores_b).iter().copied().collect::<Vec<_>>());

    let mut d = Array2::<f32>::zeros((set_a.boxes.len(), set_b.boxes.len()));
    d[[ia, ib]] = 1.0;
    let d = ctx.tape.leaf(d.into_dyn());
    let (f1, f2) = gather_selected_features(&mut ctx.tape, feats_a, feats_b, d);

    let spec_mix = stft.forward(mixture);
    let (estimates, _) = separate_features(cfg, models, &mut ctx, stft, &spec_mix, f1, f2)?;
    Ok((estimates, [set_a.boxes[ia], set_b.boxes[ib]]))
}

// --- Evaluation -----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct EvalReport {
    /// Two rows per evaluated pair (ordered by reference), no summary row.
    pub rows: Vec<EvalRow>,
    pub mean_sdr: f64,
    pub mean_sir: f64,
    pub mean_sar: f64,
    /// Ideal-binary-mask upper bound on the same pairs.
    pub oracle_mean_sdr: f64,
    /// "Estimate = mixture" lower bound on the same pairs.
    pub mixture_mean_sdr: f64,
    /// Fraction of validation solos whose top-scoring box overlaps the
    /// sounding object with IoU >= 0.3.
    pub localization_accuracy: f64,
    pub localization_count: usize,
}

/// Draws one cross-category validation pair, deterministically per index.
fn eval_pair(cfg: &RunConfig, val: &[SoloSpec], index: u64) -> (SoloSpec, SoloSpec) {
    use rand::Rng;
    let mut rng = seeded_rng(cfg.seed, "eval-pair", index);
    loop {
        let a = val[rng.random_range(0..val.len())];
        let b = val[rng.random_range(0..val.len())];
        if a.category_id != b.category_id {
            return (a, b);
        }
    }
}

/// Mix-and-separate scoring over validation pairs, plus oracle and
/// trivial-estimate baselines and selector localization accuracy.
pub fn evaluate(
    cfg: &RunConfig,
    models: &Models,
    store: &ParamStore,
    stft: &Stft,
    val: &[SoloSpec],
    num_pairs: usize,
) -> Result<EvalReport, PipelineError> {
    if val.iter().map(|s| s.category_id).collect::<std::collections::BTreeSet<_>>().len() < 2 {
        return Err(PipelineError::BadConfig(
            "validation pool must span at least two categories".into(),
        ));
    }
    let mut rows = Vec::with_capacity(num_pairs * 2);
    let mut oracle_sum = 0.0f64;
    let mut mixture_sum = 0.0f64;

    for index in 0..num_pairs {
        let (spec_a, spec_b) = eval_pair(cfg, val, index as u64);
        let a = spec_a.generate(&cfg.dataset)?;
        let b = spec_b.generate(&cfg.dataset)?;
        let mixture = audio::mix(&a.audio, &b.audio)?;
        let refs = [a.audio.clone(), b.audio.clone()];

        let spec_mix = stft.forward(&mixture);
        let sa = stft.forward(&a.audio);
        let sb = stft.forward(&b.audio);
        let (om1, om2) = audio::binary_target_masks(&sa, &sb)?;
        let oe1 = audio::apply_mask_reconstruct(stft, &spec_mix, &om1)?;
        let oe2 = audio::apply_mask_reconstruct(stft, &spec_mix, &om2)?;
        let oracle = bss_eval(&refs, &[oe1, oe2], cfg.eval_filter_len)?;
        oracle_sum += oracle.scores.iter().map(|s| s.sdr).sum::<f64>() / 2.0;

        let trivial = bss_eval(
            &refs,
            &[mixture.clone(), mixture.clone()],
            cfg.eval_filter_len,
        )?;
        mixture_sum += trivial.scores.iter().map(|s| s.sdr).sum::<f64>() / 2.0;

        let (estimates, _) = separate_mixture_with_frames(
            cfg, models, store, stft, &a.image, &b.image, &mixture,
        )?;
        let result = bss_eval(&refs, &estimates, cfg.eval_filter_len)?;
        for (source_idx, s) in result.scores.iter().enumerate() {
            rows.push(EvalRow {
                sample_id: format!("pair-{index:04}"),
                source_idx,
                sdr: s.sdr,
                sir: s.sir,
                sar: s.sar,
            });
        }
    }

    let n = rows.len().max(1) as f64;
    let mean_sdr = rows.iter().map(|r| r.sdr).sum::<f64>() / n;
    let mean_sir = rows.iter().map(|r| r.sir).sum::<f64>() / n;
    let mean_sar = rows.iter().map(|r| r.sar).sum::<f64>() / n;

    let mut hits = 0usize;
    for spec in val {
        let sample = spec.generate(&cfg.dataset)?;
        let (boxes, _, best) = top_scoring_box(cfg, models, store, &sample.image)?;
        if boxes[best].iou(&sample.gt_box) >= 0.3 {
            hits += 1;
        }
    }

    Ok(EvalReport {
        rows,
        mean_sdr,
        mean_sir,
        mean_sar,
        oracle_mean_sdr: oracle_sum / num_pairs.max(1) as f64,
        mixture_mean_sdr: mixture_sum / num_pairs.max(1) as f64,
        localization_accuracy: hits as f64 / val.len().max(1) as f64,
        localization_count: val.len(),
    })
}

// --- Rendering helpers -----------------------------------------------------------

/// Log-compresses and max-normalizes a magnitude for display, flipping the
/// frequency axis so low frequencies sit at the bottom.
pub fn magnitude_image(mag: &Array2<f32>) -> Array2<f32> {
    let compressed = audio::compress_magnitude(mag);
    let max = compressed.iter().fold(0.0f32, |m, &v| m.max(v));
    let scale = if max > 0.0 { 1.0 / max } else { 0.0 };
    let (h, w) = compressed.dim();
    Array2::from_shape_fn((h, w), |(y, x)| compressed[[h - 1 - y, x]] * scale)
}

/// Paints a one-pixel box outline onto an image, clamped to bounds.
pub fn draw_box_outline(image: &mut Array3<f32>, b: &BoundingBox, color: [f32; 3]) {
    let (h, w, _) = image.dim();
    if b.x0 >= w || b.y0 >= h {
        return;
    }
    let x1 = b.x1.min(w).max(b.x0 + 1);
    let y1 = b.y1.min(h).max(b.y0 + 1);
    let mut paint = |y: usize, x: usize| {
        for c in 0..3 {
            image[[y, x, c]] = color[c];
        }
    };
    for x in b.x0..x1 {
        paint(b.y0, x);
        paint(y1 - 1, x);
    }
    for y in b.y0..y1 {
        paint(y, b.x0);
        paint(y, x1 - 1);
    }
}
