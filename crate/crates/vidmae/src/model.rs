//! The space-time ViT encoder over visible tokens, the reconstructing
//! decoder with a shared learnable mask token, the reconstruction loss, the
//! classification head, and attention rollout.

use ndarray::{Array2, Array3};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, VidmaeError};
use crate::nn::{self, Bindings, ParamStore};
use crate::pipeline::Clip;
use crate::sampler::{self, MaskPlan};
use crate::tokenizer::{positional_encoding, tokenize, PatchSize, TokenGeometry, TokenGrid};

fn default_dec_dim() -> usize {
    0 // resolved to d/2 in validate()
}

/// Architecture hyperparameters. Desk defaults keep a full pretrain+finetune
/// run on the synthetic corpus in CPU minutes; the paper-scale shape
/// (d=384, depths 12/10, 224x224, patch 16x16) stays expressible.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "ModelConfig::default_d")]
    pub d: usize,
    #[serde(default = "ModelConfig::default_depth")]
    pub enc_depth: usize,
    #[serde(default = "ModelConfig::default_heads")]
    pub enc_heads: usize,
    #[serde(default = "ModelConfig::default_depth")]
    pub dec_depth: usize,
    /// Decoder width; 0 means d/2.
    #[serde(default = "default_dec_dim")]
    pub dec_dim: usize,
    #[serde(default = "ModelConfig::default_patch_t")]
    pub patch_t: usize,
    #[serde(default = "ModelConfig::default_patch_hw")]
    pub patch_h: usize,
    #[serde(default = "ModelConfig::default_patch_hw")]
    pub patch_w: usize,
    #[serde(default = "ModelConfig::default_input_hw")]
    pub input_h: usize,
    #[serde(default = "ModelConfig::default_input_hw")]
    pub input_w: usize,
    #[serde(default = "ModelConfig::default_clip_len")]
    pub clip_len: usize,
    #[serde(default = "ModelConfig::default_rho")]
    pub rho: f64,
    #[serde(default = "ModelConfig::default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "ModelConfig::default_sampler_heads")]
    pub sampler_heads: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d: Self::default_d(),
            enc_depth: Self::default_depth(),
            enc_heads: Self::default_heads(),
            dec_depth: Self::default_depth(),
            dec_dim: 0,
            patch_t: Self::default_patch_t(),
            patch_h: Self::default_patch_hw(),
            patch_w: Self::default_patch_hw(),
            input_h: Self::default_input_hw(),
            input_w: Self::default_input_hw(),
            clip_len: Self::default_clip_len(),
            rho: Self::default_rho(),
            mlp_ratio: Self::default_mlp_ratio(),
            sampler_heads: Self::default_sampler_heads(),
        }
    }
}

impl ModelConfig {
    fn default_d() -> usize {
        48
    }
    fn default_depth() -> usize {
        2
    }
    fn default_heads() -> usize {
        2
    }
    fn default_patch_t() -> usize {
        2
    }
    fn default_patch_hw() -> usize {
        16
    }
    fn default_input_hw() -> usize {
        64
    }
    fn default_clip_len() -> usize {
        16
    }
    fn default_rho() -> f64 {
        0.95
    }
    fn default_mlp_ratio() -> usize {
        4
    }
    fn default_sampler_heads() -> usize {
        2
    }

    /// Paper-scale shape: ViT-S encoder, depth-10 decoder, 224x224 input.
    pub fn paper_scale() -> Self {
        ModelConfig {
            d: 384,
            enc_depth: 12,
            enc_heads: 6,
            dec_depth: 10,
            dec_dim: 192,
            patch_t: 2,
            patch_h: 16,
            patch_w: 16,
            input_h: 224,
            input_w: 224,
            clip_len: 16,
            rho: 0.95,
            mlp_ratio: 4,
            sampler_heads: 6,
        }
    }

    pub fn patch(&self) -> PatchSize {
        PatchSize {
            pt: self.patch_t,
            ph: self.patch_h,
            pw: self.patch_w,
        }
    }

    pub fn dec_dim(&self) -> usize {
        if self.dec_dim == 0 {
            self.d / 2
        } else {
            self.dec_dim
        }
    }

    pub fn geometry(&self) -> Result<TokenGeometry> {
        TokenGeometry::for_clip(self.clip_len, self.input_h, self.input_w, self.patch())
    }

    pub fn validate(&self) -> Result<()> {
        if self.d % self.enc_heads != 0 {
            return Err(VidmaeError::Config(format!(
                "d = {} not divisible by enc_heads = {}",
                self.d, self.enc_heads
            )));
        }
        if self.d % 6 != 0 || self.dec_dim() % 6 != 0 {
            return Err(VidmaeError::Config(format!(
                "d = {} and dec_dim = {} must be divisible by 6 for the positional encoding",
                self.d,
                self.dec_dim()
            )));
        }
        if self.dec_dim() % self.enc_heads != 0 {
            return Err(VidmaeError::Config(format!(
                "dec_dim = {} not divisible by enc_heads = {}",
                self.dec_dim(),
                self.enc_heads
            )));
        }
        if self.d % self.sampler_heads != 0 {
            return Err(VidmaeError::Config(format!(
                "d = {} not divisible by sampler_heads = {}",
                self.d, self.sampler_heads
            )));
        }
        if !(0.0 < self.rho && self.rho < 1.0) {
            return Err(VidmaeError::Config(format!("rho must be in (0,1), got {}", self.rho)));
        }
        self.geometry()?;
        Ok(())
    }

    /// Initialize all parameters (tokenizer, encoder, decoder, head, sampler).
    pub fn init_params(&self, seed: u64) -> Result<ParamStore> {
        self.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cube = self.patch().cube_len();
        nn::init_linear(&mut store, "embed", cube, self.d, &mut rng);
        for i in 0..self.enc_depth {
            nn::init_transformer_block(&mut store, &format!("enc.blk{i}"), self.d, self.mlp_ratio, &mut rng);
        }
        nn::init_layernorm(&mut store, "enc.ln", self.d);
        let dd = self.dec_dim();
        nn::init_linear(&mut store, "dec.proj", self.d, dd, &mut rng);
        store.init_weight("dec.mask_token", 1, dd, &mut rng);
        for i in 0..self.dec_depth {
            nn::init_transformer_block(&mut store, &format!("dec.blk{i}"), dd, self.mlp_ratio, &mut rng);
        }
        nn::init_layernorm(&mut store, "dec.ln", dd);
        nn::init_linear(&mut store, "dec.head", dd, cube, &mut rng);
        nn::init_layernorm(&mut store, "head.norm", self.d);
        nn::init_linear(&mut store, "head.fc", self.d, 2, &mut rng);
        sampler::init_sampler(&mut store, self.d, self.sampler_heads, &mut rng);
        Ok(store)
    }
}

/// Parameter names belonging to the MAE (everything but the sampler).
pub fn mae_param_names(store: &ParamStore) -> Vec<String> {
    store
        .names()
        .filter(|n| !n.starts_with(sampler::SAMPLER_PREFIX))
        .cloned()
        .collect()
}

/// Joint space-time attention transformer over whatever tokens are passed in.
/// Returns the final-norm output and per-layer head attention vars.
pub fn encode(
    tape: &mut Tape,
    b: &mut Bindings,
    tokens: Var,
    cfg: &ModelConfig,
) -> Result<(Var, Vec<Vec<Var>>)> {
    tape.check_finite(tokens, "encoder input")?;
    let mut x = tokens;
    let mut attn_layers = Vec::with_capacity(cfg.enc_depth);
    for i in 0..cfg.enc_depth {
        let (nx, attns) = nn::transformer_block(tape, b, x, &format!("enc.blk{i}"), cfg.enc_heads);
        x = nx;
        attn_layers.push(attns);
    }
    let out = nn::layernorm(tape, b, x, "enc.ln");
    Ok((out, attn_layers))
}

/// Decoder: project encoded visible tokens, insert the shared mask token at
/// every masked index, add positional encodings by original index, run the
/// decoder blocks, and map the masked positions to pixel cubes.
pub fn decode(
    tape: &mut Tape,
    b: &mut Bindings,
    encoded: Var,
    plan: &MaskPlan,
    geom: &TokenGeometry,
    cfg: &ModelConfig,
) -> Result<Var> {
    let n = geom.n_tokens();
    if plan.n_tokens() != n {
        return Err(VidmaeError::Shape(format!(
            "mask plan covers {} tokens, geometry has {n}",
            plan.n_tokens()
        )));
    }
    if tape.value(encoded).nrows() != plan.visible.len() {
        return Err(VidmaeError::Shape(format!(
            "{} encoded tokens for {} visible positions",
            tape.value(encoded).nrows(),
            plan.visible.len()
        )));
    }
    let dd = cfg.dec_dim();
    let proj = nn::linear(tape, b, encoded, "dec.proj");
    let placed = tape.scatter_rows(proj, &plan.visible, n);
    // broadcast the shared mask token into the masked rows
    let mut indicator = Array2::zeros((n, 1));
    for &i in &plan.masked {
        indicator[[i, 0]] = 1.0;
    }
    let ind = tape.leaf(indicator);
    let mask_tok = b.var(tape, "dec.mask_token");
    let mask_rows = tape.matmul(ind, mask_tok);
    let mut x = tape.add(placed, mask_rows);
    let pos = positional_encoding(geom, dd)?;
    x = tape.add_const(x, &pos);
    for i in 0..cfg.dec_depth {
        let (nx, _) = nn::transformer_block(tape, b, x, &format!("dec.blk{i}"), cfg.enc_heads);
        x = nx;
    }
    let x = nn::layernorm(tape, b, x, "dec.ln");
    let cubes = nn::linear(tape, b, x, "dec.head");
    Ok(tape.gather_rows(cubes, &plan.masked))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReconVariant {
    Mse,
    L1,
}

/// Predicted and ground-truth normalized cubes for the masked positions.
#[derive(Debug, Clone)]
pub struct ReconBatch {
    pub pred: Array2<f64>,
    pub target: Array2<f64>,
    /// Per-token L2 residual norms (non-squared), the sampler reward.
    pub per_token_error: Vec<f64>,
}

impl ReconBatch {
    pub fn from_values(pred: &Array2<f64>, target: &Array2<f64>) -> Result<ReconBatch> {
        if pred.dim() != target.dim() {
            return Err(VidmaeError::Shape(format!(
                "pred {:?} vs target {:?}",
                pred.dim(),
                target.dim()
            )));
        }
        let per_token_error = pred
            .outer_iter()
            .zip(target.outer_iter())
            .map(|(p, t)| {
                (&p - &t).iter().map(|v| v * v).sum::<f64>().sqrt()
            })
            .collect();
        Ok(ReconBatch {
            pred: pred.clone(),
            target: target.clone(),
            per_token_error,
        })
    }
}

/// Reconstruction loss over masked tokens: mean squared residual (mse) or
/// mean absolute residual (l1 ablation).
pub fn recon_loss(
    tape: &mut Tape,
    pred: Var,
    target: &Array2<f64>,
    variant: ReconVariant,
) -> Result<Var> {
    if tape.value(pred).nrows() == 0 {
        return Err(VidmaeError::Contract("empty masked set in recon loss".into()));
    }
    if tape.value(pred).dim() != target.dim() {
        return Err(VidmaeError::Shape(format!(
            "pred {:?} vs target {:?}",
            tape.value(pred).dim(),
            target.dim()
        )));
    }
    let neg = tape.scale(pred, -1.0);
    let resid = tape.add_const(neg, target); // target - pred
    match variant {
        ReconVariant::Mse => {
            let sq = tape.mul(resid, resid);
            Ok(tape.mean_all(sq))
        }
        ReconVariant::L1 => {
            let a = tape.abs(resid);
            Ok(tape.mean_all(a))
        }
    }
}

/// Mean-pool encoder outputs, layer-norm, linear d -> 2. Fine-tune mode: all
/// N tokens, no masking.
pub fn classify(
    tape: &mut Tape,
    b: &mut Bindings,
    clip: &Clip,
    cfg: &ModelConfig,
) -> Result<(Var, TokenGrid, Vec<Vec<Var>>)> {
    let grid = tokenize(tape, b, clip, cfg.patch(), cfg.d)?;
    let (encoded, attns) = encode(tape, b, grid.embeddings, cfg)?;
    let pooled = tape.mean_rows(encoded);
    let normed = nn::layernorm(tape, b, pooled, "head.norm");
    let logits = nn::linear(tape, b, normed, "head.fc");
    Ok((logits, grid, attns))
}

/// Soft-target cross entropy with label smoothing.
pub fn soft_target_ce(tape: &mut Tape, logits: Var, true_class: usize, smoothing: f64) -> Var {
    let probs = tape.softmax_rows(logits);
    let safe = tape.clamp(probs, 1e-12, 1.0);
    let logp = tape.log(safe);
    let mut target = Array2::from_elem((1, 2), smoothing / 2.0);
    target[[0, true_class]] = 1.0 - smoothing / 2.0;
    let weighted = tape.mul_const(logp, &target);
    let s = tape.sum_all(weighted);
    tape.scale(s, -1.0)
}

/// Smoothed target distribution for a two-class label.
pub fn smoothed_target(true_class: usize, smoothing: f64) -> (f64, f64) {
    let off = smoothing / 2.0;
    if true_class == 1 {
        (off, 1.0 - off)
    } else {
        (1.0 - off, off)
    }
}

/// Attention rollout: per layer, average attention over heads, add identity,
/// renormalize rows, and multiply across layers. Reduced to per-token
/// saliency by column-averaging, reshaped to (nt, nh, nw).
pub fn attention_rollout(
    tape: &Tape,
    attn_layers: &[Vec<Var>],
    geom: &TokenGeometry,
) -> Array3<f64> {
    let n = geom.n_tokens();
    let mut rollout = Array2::eye(n);
    for layer in attn_layers {
        let mut avg = Array2::<f64>::zeros((n, n));
        for &a in layer {
            avg += tape.value(a);
        }
        avg /= layer.len() as f64;
        avg += &Array2::eye(n);
        for mut row in avg.outer_iter_mut() {
            let s = row.sum();
            row.mapv_inplace(|v| v / s);
        }
        rollout = avg.dot(&rollout);
    }
    // column mean: how much total attention flows into each input token
    let col_mean = rollout.mean_axis(ndarray::Axis(0)).unwrap();
    let mut out = Array3::zeros((geom.nt, geom.nh, geom.nw));
    for i in 0..n {
        let (t, h, w) = geom.coords(i);
        out[[t, h, w]] = col_mean[i];
    }
    out
}
