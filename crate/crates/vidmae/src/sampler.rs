//! Adaptive mask sampling: the sampling network (MHA + linear + softmax),
//! region-prior boosting, weighted visible-token sampling without
//! replacement, the REINFORCE-style sampling loss, and the random baseline
//! masking strategies.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, VidmaeError};
use crate::nn::{self, Bindings, ParamStore};
use crate::tokenizer::TokenGeometry;

pub const PHAT_CLAMP_LO: f64 = 1e-6;
pub const PHAT_CLAMP_HI: f64 = 1.0 - 1e-6;

/// Parameter-name prefix of the sampling network; its parameters are owned by
/// a separate optimizer from the MAE.
pub const SAMPLER_PREFIX: &str = "sampler";

pub fn init_sampler(store: &mut ParamStore, d: usize, heads: usize, rng: &mut ChaCha8Rng) {
    assert!(d % heads == 0);
    nn::init_mha(store, &format!("{SAMPLER_PREFIX}.attn"), d, rng);
    nn::init_linear(store, &format!("{SAMPLER_PREFIX}.score"), d, 1, rng);
}

pub fn sampler_param_names(store: &ParamStore) -> Vec<String> {
    store
        .names()
        .filter(|n| n.starts_with(SAMPLER_PREFIX))
        .cloned()
        .collect()
}

/// p = softmax(Linear(MHA(x))) over the token axis. `tokens` is treated as a
/// constant at this boundary: callers pass embeddings via a fresh leaf so no
/// gradient reaches the tokenizer or encoder.
pub fn sampler_forward(tape: &mut Tape, b: &mut Bindings, tokens: Var, heads: usize) -> Result<Var> {
    let n = tape.value(tokens).nrows();
    if n < 2 {
        return Err(VidmaeError::Contract(format!(
            "sampler needs at least 2 tokens, got {n}"
        )));
    }
    tape.check_finite(tokens, "sampler input embeddings")?;
    let (z, _) = nn::multi_head_attention(tape, b, tokens, &format!("{SAMPLER_PREFIX}.attn"), heads);
    let scores = nn::linear(tape, b, z, &format!("{SAMPLER_PREFIX}.score"));
    // softmax over the N axis of the N x 1 score column
    let row = tape.transpose(scores);
    let sm = tape.softmax_rows(row);
    Ok(tape.transpose(sm))
}

/// p_hat_i = p_i + pi_i, clamped to [1e-6, 1 - 1e-6]. No renormalization.
pub fn boost(tape: &mut Tape, p: Var, pi: &[f64]) -> Result<Var> {
    let n = tape.value(p).nrows();
    if pi.len() != n {
        return Err(VidmaeError::Shape(format!(
            "pi length {} does not match p length {n}",
            pi.len()
        )));
    }
    let pi_col = Array2::from_shape_vec((n, 1), pi.to_vec()).unwrap();
    let sum = tape.add_const(p, &pi_col);
    Ok(tape.clamp(sum, PHAT_CLAMP_LO, PHAT_CLAMP_HI))
}

/// Sampler outputs for one clip.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskPlan {
    pub p: Vec<f64>,
    pub p_hat: Vec<f64>,
    pub rho: f64,
    /// Visible token indices, |V| = floor((1 - rho) * N), ascending.
    pub visible: Vec<usize>,
    /// Masked token indices, the complement of `visible`, ascending.
    pub masked: Vec<usize>,
}

impl MaskPlan {
    pub fn n_tokens(&self) -> usize {
        self.visible.len() + self.masked.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_tokens();
        let mut all: Vec<usize> = self.visible.iter().chain(&self.masked).cloned().collect();
        all.sort_unstable();
        if all != (0..n).collect::<Vec<_>>() {
            return Err(VidmaeError::Contract(
                "visible and masked sets do not partition the token set".into(),
            ));
        }
        Ok(())
    }
}

pub fn n_visible(n: usize, rho: f64) -> usize {
    ((1.0 - rho) * n as f64).floor() as usize
}

/// Draw the visible set without replacement with per-token weight
/// w_i = 1 - p_hat_i, each draw proportional to the remaining weights.
/// Implemented as Gumbel-top-k over log w_i with a seeded RNG.
pub fn sample_visible(p_hat: &[f64], rho: f64, seed: u64) -> Result<MaskPlan> {
    let n = p_hat.len();
    if !(0.0 < rho && rho < 1.0) {
        return Err(VidmaeError::Config(format!("rho must be in (0,1), got {rho}")));
    }
    let nv = n_visible(n, rho);
    if nv < 1 || n - nv < 1 {
        return Err(VidmaeError::Config(format!(
            "rho {rho} with N = {n} leaves no visible or no masked tokens"
        )));
    }
    let weights: Vec<f64> = p_hat.iter().map(|&p| 1.0 - p).collect();
    if weights.iter().all(|&w| w <= 0.0) {
        return Err(VidmaeError::Numeric(
            "degenerate sampling distribution: all weights zero".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keyed: Vec<(f64, usize)> = weights
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let key = if w <= 0.0 {
                f64::NEG_INFINITY
            } else {
                let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                w.ln() - (-u.ln()).ln()
            };
            (key, i)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut visible: Vec<usize> = keyed[..nv].iter().map(|&(_, i)| i).collect();
    visible.sort_unstable();
    let masked: Vec<usize> = (0..n).filter(|i| !visible.contains(i)).collect();
    Ok(MaskPlan {
        p: p_hat.to_vec(),
        p_hat: p_hat.to_vec(),
        rho,
        visible,
        masked,
    })
}

/// L_sample = -sum_{i in M} log(p_hat_i) * e_i with detached, non-negative
/// per-token reconstruction errors e_i. Gradient flows only through
/// log(p_hat) into the sampler parameters.
pub fn sampling_loss(
    tape: &mut Tape,
    p_hat: Var,
    masked: &[usize],
    per_token_error: &[f64],
) -> Result<Var> {
    if per_token_error.len() != masked.len() {
        return Err(VidmaeError::Shape(format!(
            "{} errors for {} masked tokens",
            per_token_error.len(),
            masked.len()
        )));
    }
    if per_token_error.iter().any(|&e| !(e >= 0.0) || !e.is_finite()) {
        return Err(VidmaeError::Contract(
            "per-token reconstruction errors must be non-negative and finite".into(),
        ));
    }
    let pm = tape.gather_rows(p_hat, masked);
    let logp = tape.log(pm);
    let e = Array2::from_shape_vec((masked.len(), 1), per_token_error.to_vec()).unwrap();
    let weighted = tape.mul_const(logp, &e);
    let total = tape.sum_all(weighted);
    Ok(tape.scale(total, -1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskStrategy {
    RandomPatch,
    Frame,
    Tube,
    Focused,
}

impl MaskStrategy {
    pub fn parse(s: &str) -> Result<MaskStrategy> {
        match s {
            "random_patch" => Ok(MaskStrategy::RandomPatch),
            "frame" => Ok(MaskStrategy::Frame),
            "tube" => Ok(MaskStrategy::Tube),
            "focused" => Ok(MaskStrategy::Focused),
            other => Err(VidmaeError::Config(format!(
                "unknown masking strategy `{other}`"
            ))),
        }
    }
}

fn uniform_plan(geom: &TokenGeometry, rho: f64, masked: Vec<usize>) -> MaskPlan {
    let n = geom.n_tokens();
    let mask_set: std::collections::BTreeSet<usize> = masked.iter().cloned().collect();
    let visible: Vec<usize> = (0..n).filter(|i| !mask_set.contains(i)).collect();
    MaskPlan {
        p: vec![1.0 / n as f64; n],
        p_hat: vec![1.0 / n as f64; n],
        rho,
        visible,
        masked,
    }
}

/// Random patch / whole-frame / tube masking baselines with uniform weights.
pub fn baseline_mask(
    strategy: MaskStrategy,
    geom: &TokenGeometry,
    rho: f64,
    seed: u64,
) -> Result<MaskPlan> {
    if !(0.0 < rho && rho < 1.0) {
        return Err(VidmaeError::Config(format!("rho must be in (0,1), got {rho}")));
    }
    let n = geom.n_tokens();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    use rand::seq::SliceRandom;
    match strategy {
        MaskStrategy::RandomPatch => {
            let nv = n_visible(n, rho);
            if nv < 1 || n - nv < 1 {
                return Err(VidmaeError::Config(format!(
                    "rho {rho} infeasible for N = {n}"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            let mut masked: Vec<usize> = idx[..n - nv].to_vec();
            masked.sort_unstable();
            Ok(uniform_plan(geom, rho, masked))
        }
        MaskStrategy::Frame => {
            let k = (rho * geom.nt as f64).round() as usize;
            if k < 1 || k >= geom.nt {
                let ratios: Vec<String> = (1..geom.nt)
                    .map(|j| format!("{:.3}", j as f64 / geom.nt as f64))
                    .collect();
                return Err(VidmaeError::Config(format!(
                    "rho {rho} unreachable with {} temporal slices; achievable ratios: {}",
                    geom.nt,
                    ratios.join(", ")
                )));
            }
            let mut slices: Vec<usize> = (0..geom.nt).collect();
            slices.shuffle(&mut rng);
            slices.truncate(k);
            let mut masked = Vec::new();
            for &t in &slices {
                for h in 0..geom.nh {
                    for w in 0..geom.nw {
                        masked.push(geom.index(t, h, w));
                    }
                }
            }
            masked.sort_unstable();
            Ok(uniform_plan(geom, rho, masked))
        }
        MaskStrategy::Tube => {
            let cells = geom.nh * geom.nw;
            let k = (rho * cells as f64).round() as usize;
            if k < 1 || k >= cells {
                let ratios: Vec<String> = (1..cells)
                    .map(|j| format!("{:.3}", j as f64 / cells as f64))
                    .collect();
                return Err(VidmaeError::Config(format!(
                    "rho {rho} unreachable with {cells} spatial cells; achievable ratios: {}",
                    ratios.join(", ")
                )));
            }
            let mut cell_idx: Vec<usize> = (0..cells).collect();
            cell_idx.shuffle(&mut rng);
            cell_idx.truncate(k);
            let mut masked = Vec::new();
            for &cell in &cell_idx {
                let (h, w) = (cell / geom.nw, cell % geom.nw);
                for t in 0..geom.nt {
                    masked.push(geom.index(t, h, w));
                }
            }
            masked.sort_unstable();
            Ok(uniform_plan(geom, rho, masked))
        }
        MaskStrategy::Focused => Err(VidmaeError::Config(
            "focused masking is produced by the sampler, not baseline_mask".into(),
        )),
    }
}
