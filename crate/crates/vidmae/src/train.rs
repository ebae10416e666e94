//! Pretraining (reconstruction + sampler REINFORCE, separate optimizers),
//! fine-tuning with layer-wise lr decay, clip-to-video aggregation, metrics,
//! and patient-wise k-fold orchestration.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::Path;

use ndarray::Axis;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::Tape;
use crate::checkpoint::{Checkpoint, CHECKPOINT_VERSION};
use crate::corpus::{Label, VideoSample};
use crate::error::{Result, VidmaeError};
use crate::model::{
    classify, decode, encode, recon_loss, soft_target_ce, ModelConfig, ReconBatch, ReconVariant,
};
use crate::nn::{lr_schedule, AdamW, Bindings, Gradients, ParamStore};
use crate::par::parallel_map;
use crate::pipeline::{augment_clip, resize_clip, subsample_and_clip, Clip, ClipMode, ClipProfile};
use crate::priors::{build_pi, clip_region_union, group_boxes_by_frame, RegionProviderKind};
use crate::sampler::{
    baseline_mask, boost, sample_visible, sampler_forward, sampling_loss, MaskPlan, MaskStrategy,
};
use crate::tokenizer::{make_targets, tokenize};

/// AdamW hyperparameters plus run-length knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OptimSpec {
    pub lr: f64,
    #[serde(default = "OptimSpec::default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "OptimSpec::default_layer_decay")]
    pub layer_decay: f64,
    #[serde(default = "OptimSpec::default_warmup_epochs")]
    pub warmup_epochs: usize,
    pub epochs: usize,
    #[serde(default = "OptimSpec::default_batch_size")]
    pub batch_size: usize,
}

impl OptimSpec {
    fn default_weight_decay() -> f64 {
        0.05
    }
    fn default_layer_decay() -> f64 {
        0.75
    }
    fn default_warmup_epochs() -> usize {
        3
    }
    fn default_batch_size() -> usize {
        4
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(VidmaeError::Config(format!("lr must be > 0, got {}", self.lr)));
        }
        if !(0.0 < self.layer_decay && self.layer_decay <= 1.0) {
            return Err(VidmaeError::Config(format!(
                "layer_decay must be in (0,1], got {}",
                self.layer_decay
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(VidmaeError::Config("epochs and batch_size must be >= 1".into()));
        }
        Ok(())
    }
}

/// One logged training step.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: u64,
    pub loss_recon: f64,
    pub loss_sample: Option<f64>,
    pub lr: f64,
}

/// Curve CSV: `epoch,step,loss_recon,loss_sample,lr`, empty cell when the
/// sampler loss does not exist (baseline strategies).
pub fn write_curve(path: &Path, records: &[StepRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| VidmaeError::Io {
            path: dir.to_path_buf(),
            source: e,
        })?;
    }
    let mut out = String::from("epoch,step,loss_recon,loss_sample,lr\n");
    for r in records {
        let ls = r.loss_sample.map(|v| format!("{v:.17e}")).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{:.17e},{},{:.17e}\n",
            r.epoch, r.step, r.loss_recon, ls, r.lr
        ));
    }
    fs::write(path, out).map_err(|e| VidmaeError::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

pub fn read_curve(path: &Path) -> Result<Vec<StepRecord>> {
    let text = fs::read_to_string(path).map_err(|e| VidmaeError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        if ln == 0 {
            if line != "epoch,step,loss_recon,loss_sample,lr" {
                return Err(VidmaeError::Parse {
                    path: path.to_path_buf(),
                    line: 1,
                    message: format!("unexpected curve header `{line}`"),
                });
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 5 {
            return Err(VidmaeError::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                message: format!("expected 5 fields, got {}", parts.len()),
            });
        }
        let bad = |message: String| VidmaeError::Parse {
            path: path.to_path_buf(),
            line: ln + 1,
            message,
        };
        out.push(StepRecord {
            epoch: parts[0].parse().map_err(|e| bad(format!("epoch: {e}")))?,
            step: parts[1].parse().map_err(|e| bad(format!("step: {e}")))?,
            loss_recon: parts[2].parse().map_err(|e| bad(format!("loss_recon: {e}")))?,
            loss_sample: if parts[3].is_empty() {
                None
            } else {
                Some(parts[3].parse().map_err(|e| bad(format!("loss_sample: {e}")))?)
            },
            lr: parts[4].parse().map_err(|e| bad(format!("lr: {e}")))?,
        });
    }
    Ok(out)
}

/// Everything the pretraining loop needs beyond the data.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub model: ModelConfig,
    pub optim: OptimSpec,
    /// Sampler optimizer lr (constant; the REINFORCE objective is too noisy
    /// for a long cosine tail at desk scale).
    #[serde(default = "PretrainConfig::default_sampler_lr")]
    pub sampler_lr: f64,
    pub strategy: MaskStrategy,
    pub provider: RegionProviderKind,
    #[serde(default = "PretrainConfig::default_pi_value")]
    pub pi_value: f64,
    #[serde(default = "PretrainConfig::default_recon")]
    pub recon: ReconVariant,
    #[serde(default = "PretrainConfig::default_stride")]
    pub stride: usize,
    #[serde(default = "PretrainConfig::default_clips_per_video")]
    pub clips_per_video: usize,
    #[serde(default = "PretrainConfig::default_augment")]
    pub augment: bool,
    /// Checkpoint every k epochs (0 = only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
}

impl PretrainConfig {
    fn default_sampler_lr() -> f64 {
        1e-4
    }
    fn default_pi_value() -> f64 {
        0.1
    }
    fn default_recon() -> ReconVariant {
        ReconVariant::Mse
    }
    fn default_stride() -> usize {
        4
    }
    fn default_clips_per_video() -> usize {
        1
    }
    fn default_augment() -> bool {
        true
    }

    pub fn profile(&self) -> ClipProfile {
        ClipProfile {
            stride: self.stride,
            clip_len: self.model.clip_len,
            clips_per_video: self.clips_per_video,
            mode: ClipMode::Pretrain,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.profile().validate()?;
        if !(self.sampler_lr > 0.0) {
            return Err(VidmaeError::Config(format!(
                "sampler_lr must be > 0, got {}",
                self.sampler_lr
            )));
        }
        Ok(())
    }
}

pub struct PretrainOutput {
    pub checkpoint: Checkpoint,
    pub curve: Vec<StepRecord>,
}

/// Deterministic per-site seed derivation (splitmix-style), independent of
/// scheduling order.
pub fn derive_seed(base: u64, parts: &[u64]) -> u64 {
    let mut x = base;
    for &p in parts {
        x = x.wrapping_add(p).wrapping_add(0x9E3779B97F4A7C15);
        let mut z = x;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
        x = z ^ (z >> 31);
    }
    x
}

/// Extract, resize to the model input, attach region boxes, and (optionally)
/// augment the clips of one video.
fn prepare_clips(
    video: &VideoSample,
    profile: &ClipProfile,
    model: &ModelConfig,
    boxes_by_frame: &BTreeMap<usize, Vec<crate::corpus::BBox>>,
    augment: bool,
    seed: u64,
) -> Result<Vec<Clip>> {
    let clips = subsample_and_clip(video, profile, seed)?;
    let mut out = Vec::with_capacity(clips.len());
    for (ci, mut clip) in clips.into_iter().enumerate() {
        clip.boxes = clip_region_union(boxes_by_frame, &clip.source_frames);
        if augment {
            clip = augment_clip(&clip, derive_seed(seed, &[ci as u64, 1]));
        }
        let clip = resize_clip(
            &clip,
            (model.input_h, model.input_w),
            (model.patch_h, model.patch_w),
        )?;
        out.push(clip);
    }
    Ok(out)
}

/// Per-clip forward/backward for both pretraining objectives. Pure in the
/// parameters: safe to run batch-parallel.
struct ClipStep {
    loss_recon: f64,
    loss_sample: Option<f64>,
    grads_mae: Gradients,
    grads_sampler: Option<Gradients>,
    #[allow(dead_code)] // inspected by tests and diagnostics
    plan: MaskPlan,
}

fn pretrain_clip_step(
    store: &ParamStore,
    cfg: &PretrainConfig,
    clip: &Clip,
    seed: u64,
) -> Result<ClipStep> {
    let m = &cfg.model;
    let mut tape_a = Tape::new();
    let mut bind_a = Bindings::new(store);
    let grid = tokenize(&mut tape_a, &mut bind_a, clip, m.patch(), m.d)?;
    let geom = grid.geom;
    let targets = make_targets(clip, &geom);

    // sampler runs on its own tape: embeddings enter as a fresh constant leaf,
    // so neither loss can reach the other network's parameters
    let mut sampler_tape = None;
    let plan = if cfg.strategy == MaskStrategy::Focused {
        let mut tape_b = Tape::new();
        let mut bind_b = Bindings::new(store);
        let tok_const = tape_b.leaf(tape_a.value(grid.embeddings).clone());
        let p = sampler_forward(&mut tape_b, &mut bind_b, tok_const, m.sampler_heads)?;
        let pi = build_pi(&clip.boxes, &geom, cfg.pi_value)?;
        let p_hat = boost(&mut tape_b, p, &pi)?;
        let p_hat_vals: Vec<f64> = tape_b.value(p_hat).column(0).to_vec();
        let mut plan = sample_visible(&p_hat_vals, m.rho, seed)?;
        plan.p = tape_b.value(p).column(0).to_vec();
        sampler_tape = Some((tape_b, bind_b, p_hat));
        plan
    } else {
        baseline_mask(cfg.strategy, &geom, m.rho, seed)?
    };

    let vis = tape_a.gather_rows(grid.embeddings, &plan.visible);
    let (enc, _) = encode(&mut tape_a, &mut bind_a, vis, m)?;
    let pred = decode(&mut tape_a, &mut bind_a, enc, &plan, &geom, m)?;
    let target_masked = targets
        .normalized
        .select(Axis(0), &plan.masked);
    let l_rec = recon_loss(&mut tape_a, pred, &target_masked, cfg.recon)?;
    let loss_recon = tape_a.scalar(l_rec);
    if !loss_recon.is_finite() {
        return Err(VidmaeError::Numeric(format!(
            "non-finite reconstruction loss on clip of video {}",
            clip.video_id
        )));
    }
    let errors = ReconBatch::from_values(tape_a.value(pred), &target_masked)?.per_token_error;
    let grads_mae = bind_a.grads(&tape_a, tape_a.backward(l_rec));

    let (loss_sample, grads_sampler) = match sampler_tape {
        Some((mut tape_b, bind_b, p_hat)) => {
            let l_samp = sampling_loss(&mut tape_b, p_hat, &plan.masked, &errors)?;
            let v = tape_b.scalar(l_samp);
            if !v.is_finite() {
                return Err(VidmaeError::Numeric(format!(
                    "non-finite sampling loss on clip of video {}",
                    clip.video_id
                )));
            }
            let g = bind_b.grads(&tape_b, tape_b.backward(l_samp));
            (Some(v), Some(g))
        }
        None => (None, None),
    };

    Ok(ClipStep {
        loss_recon,
        loss_sample,
        grads_mae,
        grads_sampler,
        plan,
    })
}

/// Full pretraining loop. Bit-deterministic for a fixed seed: clip choice,
/// augmentation, and mask draws all use seeds derived from (seed, epoch,
/// video index, clip index), and batch gradients are reduced sequentially in
/// input order even when the forward passes run in parallel.
pub fn pretrain(videos: &[VideoSample], cfg: &PretrainConfig, seed: u64) -> Result<PretrainOutput> {
    cfg.validate()?;
    if videos.is_empty() {
        return Err(VidmaeError::Contract("pretrain called with no videos".into()));
    }
    let mut store = cfg.model.init_params(seed)?;
    let profile = cfg.profile();
    let boxes_by_video: Vec<BTreeMap<usize, Vec<crate::corpus::BBox>>> = videos
        .iter()
        .map(|v| Ok(group_boxes_by_frame(&cfg.provider.boxes(v)?)))
        .collect::<Result<_>>()?;

    let clips_per_epoch = videos.len() * cfg.clips_per_video;
    let steps_per_epoch = clips_per_epoch.div_ceil(cfg.optim.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.optim.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.optim.warmup_epochs as u64;

    let mut opt_mae = AdamW::new(cfg.optim.lr, cfg.optim.weight_decay);
    let mut opt_sampler = AdamW::new(cfg.sampler_lr, 0.0);
    let mut curve = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.optim.epochs {
        // per-epoch clip pool in a seed-determined order
        let mut pool: Vec<Clip> = Vec::with_capacity(clips_per_epoch);
        for (vi, video) in videos.iter().enumerate() {
            pool.extend(prepare_clips(
                video,
                &profile,
                &cfg.model,
                &boxes_by_video[vi],
                cfg.augment,
                derive_seed(seed, &[epoch as u64, vi as u64]),
            )?);
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, u64::MAX])));

        for batch in order.chunks(cfg.optim.batch_size) {
            let lr_now = lr_schedule(step, total_steps, warmup_steps, cfg.optim.lr);
            let jobs: Vec<(usize, u64)> = batch
                .iter()
                .map(|&ci| (ci, derive_seed(seed, &[epoch as u64, ci as u64, 2])))
                .collect();
            let results = parallel_map(&jobs, |&(ci, s)| pretrain_clip_step(&store, cfg, &pool[ci], s));
            let mut steps = Vec::with_capacity(results.len());
            for r in results {
                steps.push(r.map_err(|e| match e {
                    VidmaeError::Numeric(msg) => VidmaeError::Numeric(format!(
                        "{msg} (epoch {epoch}, step {step}, lr {lr_now:.3e})"
                    )),
                    other => other,
                })?);
            }

            let inv = 1.0 / steps.len() as f64;
            let mut g_mae = Gradients::default();
            let mut g_samp = Gradients::default();
            let mut loss_recon = 0.0;
            let mut loss_sample_sum = 0.0;
            let mut n_sample = 0usize;
            for s in &steps {
                g_mae.accumulate(&s.grads_mae);
                loss_recon += s.loss_recon * inv;
                if let (Some(ls), Some(gs)) = (s.loss_sample, s.grads_sampler.as_ref()) {
                    g_samp.accumulate(gs);
                    loss_sample_sum += ls;
                    n_sample += 1;
                }
            }
            g_mae.scale(inv);
            if !g_mae.max_abs().is_finite() {
                return Err(VidmaeError::Numeric(format!(
                    "non-finite reconstruction gradient (epoch {epoch}, step {step}, lr {lr_now:.3e}, |g|_max {})",
                    g_mae.max_abs()
                )));
            }
            opt_mae.update(&mut store, &g_mae, lr_now)?;
            let loss_sample = if n_sample > 0 {
                g_samp.scale(1.0 / n_sample as f64);
                opt_sampler.update(&mut store, &g_samp, cfg.sampler_lr)?;
                Some(loss_sample_sum / n_sample as f64)
            } else {
                None
            };

            curve.push(StepRecord {
                epoch,
                step,
                loss_recon,
                loss_sample,
                lr: lr_now,
            });
            step += 1;
        }
    }

    Ok(PretrainOutput {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            model: cfg.model.clone(),
            params: store,
            opt_mae: Some(opt_mae),
            opt_sampler: Some(opt_sampler),
            epoch: cfg.optim.epochs,
            seed,
            stage: "pretrain".into(),
        },
        curve,
    })
}

/// Layer-wise lr multipliers for fine-tuning: head = group 0, final encoder
/// norm = 1, encoder blocks from deepest (1) to shallowest (L), patch
/// embedding = L + 1; multiplier = layer_decay^group. Decoder and sampler
/// parameters are excluded (frozen in fine-tuning).
pub fn layer_lr_scales(store: &ParamStore, enc_depth: usize, layer_decay: f64) -> indexmap::IndexMap<String, f64> {
    let mut out = indexmap::IndexMap::new();
    for name in store.names() {
        let group = if name.starts_with("head.") {
            0
        } else if name.starts_with("enc.ln.") {
            1
        } else if let Some(rest) = name.strip_prefix("enc.blk") {
            let i: usize = rest.split('.').next().unwrap().parse().unwrap();
            enc_depth - i // deepest block -> 1, shallowest -> L
        } else if name.starts_with("embed.") {
            enc_depth + 1
        } else {
            continue; // decoder / sampler: frozen
        };
        out.insert(name.clone(), layer_decay.powi(group as i32));
    }
    out
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FinetuneConfig {
    pub model: ModelConfig,
    pub optim: OptimSpec,
    #[serde(default = "FinetuneConfig::default_smoothing")]
    pub label_smoothing: f64,
    #[serde(default = "FinetuneConfig::default_stride")]
    pub stride: usize,
    #[serde(default = "FinetuneConfig::default_clips_per_video")]
    pub clips_per_video: usize,
    #[serde(default)]
    pub augment: bool,
}

impl FinetuneConfig {
    fn default_smoothing() -> f64 {
        0.1
    }
    fn default_stride() -> usize {
        3
    }
    fn default_clips_per_video() -> usize {
        5
    }

    pub fn profile(&self) -> ClipProfile {
        ClipProfile {
            stride: self.stride,
            clip_len: self.model.clip_len,
            clips_per_video: self.clips_per_video,
            mode: ClipMode::Finetune,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.optim.validate()?;
        self.profile().validate()?;
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(VidmaeError::Config(format!(
                "label_smoothing must be in [0,1), got {}",
                self.label_smoothing
            )));
        }
        Ok(())
    }
}

pub struct FinetuneOutput {
    /// Parameters at the best validation accuracy (last epoch wins ties).
    pub checkpoint: Checkpoint,
    pub train_loss_per_epoch: Vec<f64>,
    pub val_acc_per_epoch: Vec<f64>,
}

fn finetune_clip_step(
    store: &ParamStore,
    cfg: &FinetuneConfig,
    clip: &Clip,
    label: Label,
) -> Result<(f64, Gradients)> {
    let mut tape = Tape::new();
    let mut b = Bindings::new(store);
    let (logits, _, _) = classify(&mut tape, &mut b, clip, &cfg.model)?;
    let loss = soft_target_ce(&mut tape, logits, label.index(), cfg.label_smoothing);
    let v = tape.scalar(loss);
    if !v.is_finite() {
        return Err(VidmaeError::Numeric(format!(
            "non-finite classification loss on clip of video {}",
            clip.video_id
        )));
    }
    let mut grads = b.grads(&tape, tape.backward(loss));
    // sampler and decoder stay frozen
    grads
        .grads
        .retain(|name, _| !name.starts_with("sampler.") && !name.starts_with("dec."));
    Ok((v, grads))
}

/// Fine-tune the encoder + classifier from a pretrained checkpoint.
pub fn finetune(
    init: &Checkpoint,
    train_videos: &[VideoSample],
    val_videos: &[VideoSample],
    cfg: &FinetuneConfig,
    seed: u64,
) -> Result<FinetuneOutput> {
    cfg.validate()?;
    if init.model.d != cfg.model.d
        || init.model.enc_depth != cfg.model.enc_depth
        || init.model.patch() != cfg.model.patch()
    {
        return Err(VidmaeError::Version(format!(
            "checkpoint architecture (d={}, depth={}) does not match config (d={}, depth={})",
            init.model.d, init.model.enc_depth, cfg.model.d, cfg.model.enc_depth
        )));
    }
    if train_videos.is_empty() {
        return Err(VidmaeError::Contract("finetune called with no training videos".into()));
    }
    let mut store = init.params.clone();
    let profile = cfg.profile();
    let empty = BTreeMap::new();

    let mut pool: Vec<(Clip, Label)> = Vec::new();
    for (vi, video) in train_videos.iter().enumerate() {
        for clip in prepare_clips(
            video,
            &profile,
            &cfg.model,
            &empty,
            cfg.augment,
            derive_seed(seed, &[vi as u64, 3]),
        )? {
            pool.push((clip, video.label));
        }
    }

    let steps_per_epoch = pool.len().div_ceil(cfg.optim.batch_size) as u64;
    let total_steps = steps_per_epoch * cfg.optim.epochs as u64;
    let warmup_steps = steps_per_epoch * cfg.optim.warmup_epochs as u64;
    let mut opt = AdamW::new(cfg.optim.lr, cfg.optim.weight_decay);
    opt.lr_scale = layer_lr_scales(&store, cfg.model.enc_depth, cfg.optim.layer_decay);

    let mut best_acc = f64::NEG_INFINITY;
    let mut best_params = store.clone();
    let mut train_loss_per_epoch = Vec::new();
    let mut val_acc_per_epoch = Vec::new();
    let mut step: u64 = 0;

    for epoch in 0..cfg.optim.epochs {
        let mut order: Vec<usize> = (0..pool.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, &[epoch as u64, 4])));
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.optim.batch_size) {
            let lr_now = lr_schedule(step, total_steps, warmup_steps, cfg.optim.lr);
            let results = parallel_map(batch, |&ci| {
                let (clip, label) = &pool[ci];
                finetune_clip_step(&store, cfg, clip, *label)
            });
            let mut g = Gradients::default();
            let mut loss = 0.0;
            let inv = 1.0 / batch.len() as f64;
            for r in results {
                let (v, gr) = r?;
                loss += v * inv;
                g.accumulate(&gr);
            }
            g.scale(inv);
            opt.update(&mut store, &g, lr_now)?;
            epoch_loss += loss;
            step += 1;
        }
        train_loss_per_epoch.push(epoch_loss / steps_per_epoch as f64);

        let acc = if val_videos.is_empty() {
            // no validation split: keep the final parameters
            f64::NEG_INFINITY
        } else {
            evaluate_videos(&store, cfg, val_videos)?.0
        };
        val_acc_per_epoch.push(if acc.is_finite() { acc } else { f64::NAN });
        if acc >= best_acc || val_videos.is_empty() {
            best_acc = acc;
            best_params = store.clone();
        }
    }

    Ok(FinetuneOutput {
        checkpoint: Checkpoint {
            version: CHECKPOINT_VERSION,
            model: cfg.model.clone(),
            params: best_params,
            opt_mae: Some(opt),
            opt_sampler: None,
            epoch: cfg.optim.epochs,
            seed,
            stage: "finetune".into(),
        },
        train_loss_per_epoch,
        val_acc_per_epoch,
    })
}

/// Video label = malignant iff any clip is predicted malignant.
pub fn aggregate_video(clip_preds: &[Label]) -> Result<Label> {
    if clip_preds.is_empty() {
        return Err(VidmaeError::Contract(
            "aggregate_video called with no clip predictions".into(),
        ));
    }
    Ok(if clip_preds.contains(&Label::Malignant) {
        Label::Malignant
    } else {
        Label::Benign
    })
}

/// Per-clip class predictions for one video (finetune clip profile).
pub fn predict_video(
    store: &ParamStore,
    cfg: &FinetuneConfig,
    video: &VideoSample,
) -> Result<Vec<Label>> {
    let empty = BTreeMap::new();
    let clips = prepare_clips(video, &cfg.profile(), &cfg.model, &empty, false, 0)?;
    let preds = parallel_map(&clips, |clip| -> Result<Label> {
        let mut tape = Tape::new();
        let mut b = Bindings::new(store);
        let (logits, _, _) = classify(&mut tape, &mut b, clip, &cfg.model)?;
        let l = tape.value(logits);
        Ok(if l[[0, 1]] > l[[0, 0]] {
            Label::Malignant
        } else {
            Label::Benign
        })
    });
    preds.into_iter().collect()
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub tn: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.tn + self.fp + self.fn_
    }

    pub fn record(&mut self, truth: Label, pred: Label) {
        match (truth, pred) {
            (Label::Malignant, Label::Malignant) => self.tp += 1,
            (Label::Benign, Label::Benign) => self.tn += 1,
            (Label::Benign, Label::Malignant) => self.fp += 1,
            (Label::Malignant, Label::Benign) => self.fn_ += 1,
        }
    }

    /// (accuracy, specificity, sensitivity); `None` when the denominator is
    /// zero — reported as JSON null, never as 0.
    pub fn metrics(&self) -> (Option<f64>, Option<f64>, Option<f64>) {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                None
            } else {
                Some(num as f64 / den as f64)
            }
        };
        (
            ratio(self.tp + self.tn, self.total()),
            ratio(self.tn, self.tn + self.fp),
            ratio(self.tp, self.tp + self.fn_),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub acc: Option<f64>,
    pub spec: Option<f64>,
    pub sens: Option<f64>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct SummaryMetrics {
    pub acc: Option<f64>,
    pub spec: Option<f64>,
    pub sens: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub folds: Vec<FoldMetrics>,
    pub mean: SummaryMetrics,
    pub sd: SummaryMetrics,
}

fn mean_sd(values: &[Option<f64>]) -> (Option<f64>, Option<f64>) {
    let defined: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if defined.is_empty() {
        return (None, None);
    }
    let n = defined.len() as f64;
    let mean = defined.iter().sum::<f64>() / n;
    let var = defined.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (Some(mean), Some(var.sqrt()))
}

impl EvalReport {
    pub fn from_folds(folds: Vec<FoldMetrics>) -> EvalReport {
        let accs: Vec<_> = folds.iter().map(|f| f.acc).collect();
        let specs: Vec<_> = folds.iter().map(|f| f.spec).collect();
        let senss: Vec<_> = folds.iter().map(|f| f.sens).collect();
        let (acc_m, acc_s) = mean_sd(&accs);
        let (spec_m, spec_s) = mean_sd(&specs);
        let (sens_m, sens_s) = mean_sd(&senss);
        EvalReport {
            folds,
            mean: SummaryMetrics {
                acc: acc_m,
                spec: spec_m,
                sens: sens_m,
            },
            sd: SummaryMetrics {
                acc: acc_s,
                spec: spec_s,
                sens: sens_s,
            },
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(|e| VidmaeError::Io {
                path: dir.to_path_buf(),
                source: e,
            })?;
        }
        let mut f = fs::File::create(path).map_err(|e| VidmaeError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        let json = serde_json::to_string_pretty(self)
            .map_err(|e| VidmaeError::Format(format!("metrics serialization: {e}")))?;
        f.write_all(json.as_bytes()).map_err(|e| VidmaeError::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }
}

/// Accuracy plus full confusion over a set of videos.
pub fn evaluate_videos(
    store: &ParamStore,
    cfg: &FinetuneConfig,
    videos: &[VideoSample],
) -> Result<(f64, Confusion)> {
    if videos.is_empty() {
        return Err(VidmaeError::Contract("evaluate called with no videos".into()));
    }
    let mut confusion = Confusion::default();
    for video in videos {
        let preds = predict_video(store, cfg, video)?;
        confusion.record(video.label, aggregate_video(&preds)?);
    }
    let acc = (confusion.tp + confusion.tn) as f64 / confusion.total() as f64;
    Ok((acc, confusion))
}

pub fn fold_metrics(
    store: &ParamStore,
    cfg: &FinetuneConfig,
    videos: &[VideoSample],
    fold: usize,
) -> Result<FoldMetrics> {
    let (_, confusion) = evaluate_videos(store, cfg, videos)?;
    let (acc, spec, sens) = confusion.metrics();
    Ok(FoldMetrics {
        fold,
        acc,
        spec,
        sens,
        confusion,
    })
}

pub struct CrossValidateOutput {
    pub report: EvalReport,
    pub fold_checkpoints: Vec<Checkpoint>,
}

/// Patient-wise k-fold: per fold, pretrain (or reuse a shared label-free
/// pretrain), fine-tune on the other folds, evaluate on the held-out fold.
pub fn cross_validate(
    videos: &[VideoSample],
    fold_of: &[usize],
    pre_cfg: &PretrainConfig,
    ft_cfg: &FinetuneConfig,
    k: usize,
    seed: u64,
    shared_pretrain: bool,
) -> Result<CrossValidateOutput> {
    if videos.len() != fold_of.len() {
        return Err(VidmaeError::Shape(format!(
            "{} videos but {} fold assignments",
            videos.len(),
            fold_of.len()
        )));
    }
    if k < 2 {
        return Err(VidmaeError::Config(format!("k must be >= 2, got {k}")));
    }
    let shared = if shared_pretrain {
        Some(pretrain(videos, pre_cfg, seed)?.checkpoint)
    } else {
        None
    };
    let mut folds = Vec::new();
    let mut fold_checkpoints = Vec::new();
    for fold in 0..k {
        let train: Vec<VideoSample> = videos
            .iter()
            .zip(fold_of)
            .filter(|(_, &f)| f != fold)
            .map(|(v, _)| v.clone())
            .collect();
        let val: Vec<VideoSample> = videos
            .iter()
            .zip(fold_of)
            .filter(|(_, &f)| f == fold)
            .map(|(v, _)| v.clone())
            .collect();
        if val.is_empty() {
            return Err(VidmaeError::Contract(format!("fold {fold} has no videos")));
        }
        let base = match &shared {
            Some(c) => c.clone(),
            None => pretrain(&train, pre_cfg, derive_seed(seed, &[fold as u64, 5]))?.checkpoint,
        };
        let ft = finetune(&base, &train, &val, ft_cfg, derive_seed(seed, &[fold as u64, 6]))?;
        folds.push(fold_metrics(&ft.checkpoint.params, ft_cfg, &val, fold)?);
        fold_checkpoints.push(ft.checkpoint);
    }
    Ok(CrossValidateOutput {
        report: EvalReport::from_folds(folds),
        fold_checkpoints,
    })
}
