//! Parameter storage, transformer building blocks, and the AdamW optimizer.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Result, VidmaeError};

pub const LN_EPS: f64 = 1e-6;

/// Named parameter tensors with deterministic iteration order.
#[derive(Clone, Default, Serialize, Deserialize)]
pub struct ParamStore {
    params: IndexMap<String, Array2<f64>>,
}

impl ParamStore {
    pub fn new() -> Self {
        ParamStore::default()
    }

    pub fn insert(&mut self, name: &str, value: Array2<f64>) {
        self.params.insert(name.to_string(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.params.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<f64>)> {
        self.params.iter()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn n_scalars(&self) -> usize {
        self.params.values().map(|a| a.len()).sum()
    }

    /// Random init: normal(0, 0.02) weights.
    pub fn init_weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut ChaCha8Rng) {
        let mut w = Array2::zeros((rows, cols));
        for v in w.iter_mut() {
            // Box-Muller; two uniforms per draw keeps the stream simple
            let u1: f64 = rng.gen_range(1e-12..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = 0.02 * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        self.insert(name, w);
    }

    pub fn init_zeros(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::zeros((rows, cols)));
    }

    pub fn init_ones(&mut self, name: &str, rows: usize, cols: usize) {
        self.insert(name, Array2::ones((rows, cols)));
    }
}

/// Binds parameters into a tape for one forward pass and maps leaf vars back
/// to names so gradients can be collected after `backward`.
pub struct Bindings<'a> {
    pub store: &'a ParamStore,
    vars: IndexMap<String, Var>,
}

impl<'a> Bindings<'a> {
    pub fn new(store: &'a ParamStore) -> Self {
        Bindings {
            store,
            vars: IndexMap::new(),
        }
    }

    pub fn var(&mut self, tape: &mut Tape, name: &str) -> Var {
        if let Some(&v) = self.vars.get(name) {
            return v;
        }
        let v = tape.leaf(self.store.get(name).clone());
        self.vars.insert(name.to_string(), v);
        v
    }

    /// Collect gradients for every bound parameter; unbound or untouched
    /// parameters get zero gradients.
    pub fn grads(&self, tape: &Tape, all: Vec<Option<Array2<f64>>>) -> Gradients {
        let mut out = IndexMap::new();
        for (name, &v) in &self.vars {
            let g = all[v]
                .clone()
                .unwrap_or_else(|| Array2::zeros(tape.value(v).dim()));
            out.insert(name.clone(), g);
        }
        Gradients { grads: out }
    }
}

#[derive(Clone, Default)]
pub struct Gradients {
    pub grads: IndexMap<String, Array2<f64>>,
}

impl Gradients {
    pub fn zeros_like(store: &ParamStore, names: &[String]) -> Self {
        let mut grads = IndexMap::new();
        for n in names {
            grads.insert(n.clone(), Array2::zeros(store.get(n).dim()));
        }
        Gradients { grads }
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (name, g) in &other.grads {
            match self.grads.get_mut(name) {
                Some(acc) => *acc += g,
                None => {
                    self.grads.insert(name.clone(), g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for g in self.grads.values_mut() {
            *g *= c;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|g| g.iter())
            .fold(0.0f64, |m, &v| m.max(v.abs()))
    }
}

/// y = x W + b with W named `{prefix}.w` (in x out) and b `{prefix}.b` (1 x out).
pub fn linear(tape: &mut Tape, b: &mut Bindings, x: Var, prefix: &str) -> Var {
    let w = b.var(tape, &format!("{prefix}.w"));
    let bias = b.var(tape, &format!("{prefix}.b"));
    let xw = tape.matmul(x, w);
    tape.add_row(xw, bias)
}

pub fn layernorm(tape: &mut Tape, b: &mut Bindings, x: Var, prefix: &str) -> Var {
    let gamma = b.var(tape, &format!("{prefix}.gamma"));
    let beta = b.var(tape, &format!("{prefix}.beta"));
    tape.layernorm_rows(x, gamma, beta, LN_EPS)
}

pub fn init_linear(store: &mut ParamStore, prefix: &str, din: usize, dout: usize, rng: &mut ChaCha8Rng) {
    store.init_weight(&format!("{prefix}.w"), din, dout, rng);
    store.init_zeros(&format!("{prefix}.b"), 1, dout);
}

pub fn init_layernorm(store: &mut ParamStore, prefix: &str, d: usize) {
    store.init_ones(&format!("{prefix}.gamma"), 1, d);
    store.init_zeros(&format!("{prefix}.beta"), 1, d);
}

/// Multi-head self-attention over all rows of `x` (n x d). Returns the output
/// and the per-head attention matrices (softmax node values can be read from
/// the tape by the caller, e.g. for attention rollout).
pub fn multi_head_attention(
    tape: &mut Tape,
    b: &mut Bindings,
    x: Var,
    prefix: &str,
    heads: usize,
) -> (Var, Vec<Var>) {
    let d = tape.value(x).ncols();
    assert!(d % heads == 0, "embed dim {d} not divisible by {heads} heads");
    let dh = d / heads;
    let q = linear(tape, b, x, &format!("{prefix}.q"));
    let k = linear(tape, b, x, &format!("{prefix}.k"));
    let v = linear(tape, b, x, &format!("{prefix}.v"));
    let mut head_outs = Vec::with_capacity(heads);
    let mut attns = Vec::with_capacity(heads);
    for h in 0..heads {
        let qh = tape.col_slice(q, h * dh, dh);
        let kh = tape.col_slice(k, h * dh, dh);
        let vh = tape.col_slice(v, h * dh, dh);
        let kt = tape.transpose(kh);
        let scores = tape.matmul(qh, kt);
        let scaled = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        let attn = tape.softmax_rows(scaled);
        attns.push(attn);
        head_outs.push(tape.matmul(attn, vh));
    }
    let cat = tape.concat_cols(&head_outs);
    let out = linear(tape, b, cat, &format!("{prefix}.o"));
    (out, attns)
}

pub fn init_mha(store: &mut ParamStore, prefix: &str, d: usize, rng: &mut ChaCha8Rng) {
    for part in ["q", "k", "v", "o"] {
        init_linear(store, &format!("{prefix}.{part}"), d, d, rng);
    }
}

/// Pre-norm transformer block: x + MHA(LN(x)), then x + MLP(LN(x)).
/// Returns the block output and the head attention vars of its MHA.
pub fn transformer_block(
    tape: &mut Tape,
    b: &mut Bindings,
    x: Var,
    prefix: &str,
    heads: usize,
) -> (Var, Vec<Var>) {
    let n1 = layernorm(tape, b, x, &format!("{prefix}.ln1"));
    let (att, attns) = multi_head_attention(tape, b, n1, &format!("{prefix}.attn"), heads);
    let x = tape.add(x, att);
    let n2 = layernorm(tape, b, x, &format!("{prefix}.ln2"));
    let h = linear(tape, b, n2, &format!("{prefix}.mlp1"));
    let h = tape.gelu(h);
    let h = linear(tape, b, h, &format!("{prefix}.mlp2"));
    let x = tape.add(x, h);
    (x, attns)
}

pub fn init_transformer_block(
    store: &mut ParamStore,
    prefix: &str,
    d: usize,
    mlp_ratio: usize,
    rng: &mut ChaCha8Rng,
) {
    init_layernorm(store, &format!("{prefix}.ln1"), d);
    init_mha(store, &format!("{prefix}.attn"), d, rng);
    init_layernorm(store, &format!("{prefix}.ln2"), d);
    init_linear(store, &format!("{prefix}.mlp1"), d, d * mlp_ratio, rng);
    init_linear(store, &format!("{prefix}.mlp2"), d * mlp_ratio, d, rng);
}

/// Adam with decoupled weight decay.
#[derive(Clone, Serialize, Deserialize)]
pub struct AdamW {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: IndexMap<String, Array2<f64>>,
    v: IndexMap<String, Array2<f64>>,
    /// Per-parameter lr multipliers (layer-wise decay); 1.0 when absent.
    pub lr_scale: IndexMap<String, f64>,
}

impl AdamW {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        AdamW {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
            lr_scale: IndexMap::new(),
        }
    }

    /// One update over exactly the parameters named in `grads`. `lr_now` is the
    /// scheduled base learning rate for this step.
    pub fn update(&mut self, store: &mut ParamStore, grads: &Gradients, lr_now: f64) -> Result<()> {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in &grads.grads {
            if !g.iter().all(|x| x.is_finite()) {
                return Err(VidmaeError::Numeric(format!(
                    "non-finite gradient for parameter {name}"
                )));
            }
            let scale = *self.lr_scale.get(name).unwrap_or(&1.0);
            let lr = lr_now * scale;
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *m = &*m * self.beta1 + &(g * (1.0 - self.beta1));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            *v = &*v * self.beta2 + &(g.mapv(|x| x * x) * (1.0 - self.beta2));
            let mhat = &*self.m.get(name).unwrap() / bc1;
            let vhat = self.v.get(name).unwrap() / bc2;
            let p = store.get_mut(name);
            let update = &mhat / &vhat.mapv(|x| x.sqrt() + self.eps) + &(&*p * self.weight_decay);
            *p -= &(update * lr);
        }
        Ok(())
    }
}

/// Linear warm-up to `base_lr` over `warmup_steps`, then cosine decay to zero
/// at `total_steps`. Continuous at the boundary.
pub fn lr_schedule(step: u64, total_steps: u64, warmup_steps: u64, base_lr: f64) -> f64 {
    if total_steps == 0 {
        return base_lr;
    }
    if step < warmup_steps {
        base_lr * (step + 1) as f64 / warmup_steps as f64
    } else {
        let span = (total_steps.saturating_sub(warmup_steps)).max(1) as f64;
        let frac = (step - warmup_steps) as f64 / span;
        base_lr * 0.5 * (1.0 + (std::f64::consts::PI * frac.min(1.0)).cos())
    }
}
