//! Reverse-mode automatic differentiation over `Array2<f64>` values.
//!
//! A [`Tape`] records every operation of one forward pass; [`Tape::backward`]
//! walks the records in reverse and accumulates gradients. All model code in
//! this crate (tokenizer embedding, sampler network, encoder, decoder, losses)
//! is expressed through these ops, so finite-difference checks can be run
//! against any parameter without special cases.

use ndarray::{Array2, Axis};

use crate::error::{Result, VidmaeError};

pub type Var = usize;

type BackFn = Box<dyn Fn(&Array2<f64>) -> Array2<f64>>;

struct Node {
    value: Array2<f64>,
    parents: Vec<(Var, BackFn)>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v].value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, parents: Vec<(Var, BackFn)>) -> Var {
        self.nodes.push(Node { value, parents });
        self.nodes.len() - 1
    }

    /// A leaf holds an input or parameter; gradients accumulate on it but it
    /// has no parents.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, vec![])
    }

    pub fn check_finite(&self, v: Var, what: &str) -> Result<()> {
        if self.nodes[v].value.iter().all(|x| x.is_finite()) {
            Ok(())
        } else {
            Err(VidmaeError::Numeric(format!("non-finite values in {what}")))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let value = av.dot(&bv);
        let bv2 = bv.clone();
        let av2 = av.clone();
        self.push(
            value,
            vec![
                (a, Box::new(move |g| g.dot(&bv2.t()))),
                (b, Box::new(move |g| av2.t().dot(g))),
            ],
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[b].value;
        self.push(
            value,
            vec![
                (a, Box::new(|g| g.clone())),
                (b, Box::new(|g| g.clone())),
            ],
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a].value - &self.nodes[b].value;
        self.push(
            value,
            vec![
                (a, Box::new(|g| g.clone())),
                (b, Box::new(|g| -g)),
            ],
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a].value.clone();
        let bv = self.nodes[b].value.clone();
        let value = &av * &bv;
        self.push(
            value,
            vec![
                (a, Box::new(move |g| g * &bv)),
                (b, Box::new(move |g| g * &av)),
            ],
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a].value * c;
        self.push(value, vec![(a, Box::new(move |g| g * c))])
    }

    /// Adds a 1 x d bias row to every row of an n x d matrix.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let value = &self.nodes[a].value + &self.nodes[bias].value;
        self.push(
            value,
            vec![
                (a, Box::new(|g| g.clone())),
                (
                    bias,
                    Box::new(|g| g.sum_axis(Axis(0)).insert_axis(Axis(0))),
                ),
            ],
        )
    }

    pub fn add_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let value = &self.nodes[a].value + c;
        self.push(value, vec![(a, Box::new(|g| g.clone()))])
    }

    pub fn mul_const(&mut self, a: Var, c: &Array2<f64>) -> Var {
        let value = &self.nodes[a].value * c;
        let c2 = c.clone();
        self.push(value, vec![(a, Box::new(move |g| g * &c2))])
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.nodes[a].value.t().to_owned();
        self.push(value, vec![(a, Box::new(|g| g.t().to_owned()))])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a].value;
        let mut s = x.clone();
        for mut row in s.axis_iter_mut(Axis(0)) {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            row.mapv_inplace(|v| (v - m).exp());
            let z: f64 = row.sum();
            row.mapv_inplace(|v| v / z);
        }
        let s2 = s.clone();
        self.push(
            s,
            vec![(
                a,
                Box::new(move |g| {
                    let dot = (g * &s2).sum_axis(Axis(1)).insert_axis(Axis(1));
                    &s2 * &(g - &dot)
                }),
            )],
        )
    }

    pub fn log(&mut self, a: Var) -> Var {
        let x = self.nodes[a].value.clone();
        let value = x.mapv(f64::ln);
        self.push(value, vec![(a, Box::new(move |g| g / &x))])
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let x = self.nodes[a].value.clone();
        let value = x.mapv(f64::abs);
        self.push(
            value,
            vec![(a, Box::new(move |g| g * &x.mapv(f64::signum)))],
        )
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let x = self.nodes[a].value.clone();
        let value = x.mapv(|v| v.clamp(lo, hi));
        self.push(
            value,
            vec![(
                a,
                Box::new(move |g| g * &x.mapv(|v| if v > lo && v < hi { 1.0 } else { 0.0 })),
            )],
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        const K: f64 = 0.7978845608028654; // sqrt(2/pi)
        const C: f64 = 0.044715;
        let x = self.nodes[a].value.clone();
        let value = x.mapv(|v| 0.5 * v * (1.0 + (K * (v + C * v * v * v)).tanh()));
        self.push(
            value,
            vec![(
                a,
                Box::new(move |g| {
                    let d = x.mapv(|v| {
                        let t = (K * (v + C * v * v * v)).tanh();
                        0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * K * (1.0 + 3.0 * C * v * v)
                    });
                    g * &d
                }),
            )],
        )
    }

    /// Row-wise layer normalization with learnable gain and shift (each 1 x d).
    pub fn layernorm_rows(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let x = &self.nodes[a].value;
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centered = x - &mean;
        let var = centered.mapv(|v| v * v).mean_axis(Axis(1)).unwrap();
        let inv_sigma = var.mapv(|v| 1.0 / (v + eps).sqrt()).insert_axis(Axis(1));
        let xhat = &centered * &inv_sigma;
        let g_row = self.nodes[gamma].value.clone();
        let value = &xhat * &g_row + &self.nodes[beta].value;

        let xhat_a = xhat.clone();
        let inv_a = inv_sigma.clone();
        let g_a = g_row.clone();
        let xhat_g = xhat.clone();
        self.push(
            value,
            vec![
                (
                    a,
                    Box::new(move |g| {
                        let gy = g * &g_a;
                        let m1 = gy.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
                        let m2 = (&gy * &xhat_a)
                            .mean_axis(Axis(1))
                            .unwrap()
                            .insert_axis(Axis(1));
                        let _ = d;
                        (&gy - &m1 - &(&xhat_a * &m2)) * &inv_a
                    }),
                ),
                (
                    gamma,
                    Box::new(move |g| (g * &xhat_g).sum_axis(Axis(0)).insert_axis(Axis(0))),
                ),
                (beta, Box::new(|g| g.sum_axis(Axis(0)).insert_axis(Axis(0)))),
            ],
        )
    }

    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let x = &self.nodes[a].value;
        let (n, d) = (x.nrows(), x.ncols());
        let mut out = Array2::zeros((idx.len(), d));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).assign(&x.row(i));
        }
        let idx2 = idx.to_vec();
        self.push(
            out,
            vec![(
                a,
                Box::new(move |g| {
                    let mut ga = Array2::zeros((n, g.ncols()));
                    for (r, &i) in idx2.iter().enumerate() {
                        let mut row = ga.row_mut(i);
                        row += &g.row(r);
                    }
                    ga
                }),
            )],
        )
    }

    /// Places the rows of `a` at positions `idx` of an `n_total`-row matrix,
    /// zeros elsewhere.
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], n_total: usize) -> Var {
        let x = &self.nodes[a].value;
        let d = x.ncols();
        let mut out = Array2::zeros((n_total, d));
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(i).assign(&x.row(r));
        }
        let idx2 = idx.to_vec();
        self.push(
            out,
            vec![(
                a,
                Box::new(move |g| {
                    let mut ga = Array2::zeros((idx2.len(), g.ncols()));
                    for (r, &i) in idx2.iter().enumerate() {
                        ga.row_mut(r).assign(&g.row(i));
                    }
                    ga
                }),
            )],
        )
    }

    pub fn col_slice(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = &self.nodes[a].value;
        let (n, d) = (x.nrows(), x.ncols());
        let value = x.slice(ndarray::s![.., start..start + len]).to_owned();
        self.push(
            value,
            vec![(
                a,
                Box::new(move |g| {
                    let mut ga = Array2::zeros((n, d));
                    ga.slice_mut(ndarray::s![.., start..start + len]).assign(g);
                    ga
                }),
            )],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let n = self.nodes[parts[0]].value.nrows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.nodes[p].value.ncols()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Array2::zeros((n, total));
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            value
                .slice_mut(ndarray::s![.., off..off + w])
                .assign(&self.nodes[p].value);
            off += w;
        }
        let mut parents: Vec<(Var, BackFn)> = Vec::with_capacity(parts.len());
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let start = off;
            parents.push((
                p,
                Box::new(move |g: &Array2<f64>| {
                    g.slice(ndarray::s![.., start..start + w]).to_owned()
                }),
            ));
            off += w;
        }
        self.push(value, parents)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a].value;
        let (n, d) = (x.nrows(), x.ncols());
        let value = Array2::from_elem((1, 1), x.sum());
        self.push(
            value,
            vec![(
                a,
                Box::new(move |g| Array2::from_elem((n, d), g[[0, 0]])),
            )],
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let x = &self.nodes[a].value;
        let (n, d) = (x.nrows(), x.ncols());
        let count = (n * d) as f64;
        let value = Array2::from_elem((1, 1), x.sum() / count);
        self.push(
            value,
            vec![(
                a,
                Box::new(move |g| Array2::from_elem((n, d), g[[0, 0]] / count)),
            )],
        )
    }

    /// Column-wise mean: n x d -> 1 x d.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let x = &self.nodes[a].value;
        let n = x.nrows();
        let value = x.mean_axis(Axis(0)).unwrap().insert_axis(Axis(0));
        self.push(
            value,
            vec![(
                a,
                Box::new(move |g| {
                    let mut ga = Array2::zeros((n, g.ncols()));
                    for mut row in ga.axis_iter_mut(Axis(0)) {
                        row.assign(&(g.row(0).to_owned() / n as f64));
                    }
                    ga
                }),
            )],
        )
    }

    /// Gradients of a scalar-valued node w.r.t. every tape variable.
    /// Returns `None` for variables the loss does not depend on.
    pub fn backward(&self, loss: Var) -> Vec<Option<Array2<f64>>> {
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        let shape = self.nodes[loss].value.dim();
        assert_eq!(shape, (1, 1), "backward expects a scalar (1x1) loss node");
        grads[loss] = Some(Array2::ones((1, 1)));
        for v in (0..=loss).rev() {
            let Some(g) = grads[v].take() else { continue };
            for (parent, back) in &self.nodes[v].parents {
                let contrib = back(&g);
                match &mut grads[*parent] {
                    Some(acc) => *acc += &contrib,
                    slot => *slot = Some(contrib),
                }
            }
            // keep the grad for leaves so callers can read it
            if self.nodes[v].parents.is_empty() {
                grads[v] = Some(g);
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr2;

    /// Central finite differences on a scalar function of one leaf entry.
    fn finite_diff(
        mut f: impl FnMut(&Array2<f64>) -> f64,
        at: &Array2<f64>,
        i: usize,
        j: usize,
    ) -> f64 {
        let eps = 1e-6;
        let mut plus = at.clone();
        plus[[i, j]] += eps;
        let mut minus = at.clone();
        minus[[i, j]] -= eps;
        (f(&plus) - f(&minus)) / (2.0 * eps)
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / (a.abs() + b.abs()).max(1e-8)
    }

    #[test]
    fn matmul_chain_gradients_match_finite_differences() {
        let a0 = arr2(&[[0.3, -1.2], [0.7, 0.4], [-0.5, 1.1]]);
        let b0 = arr2(&[[0.9, -0.2, 0.4], [-0.6, 0.8, 1.3]]);
        let run = |a: &Array2<f64>, b: &Array2<f64>| {
            let mut t = Tape::new();
            let va = t.leaf(a.clone());
            let vb = t.leaf(b.clone());
            let m = t.matmul(va, vb);
            let g = t.gelu(m);
            let l = t.mean_all(g);
            (t, va, vb, l)
        };
        let (t, va, vb, l) = run(&a0, &b0);
        let grads = t.backward(l);
        let ga = grads[va].as_ref().unwrap();
        let gb = grads[vb].as_ref().unwrap();
        for i in 0..3 {
            for j in 0..2 {
                let num = finite_diff(|a| { let (t, _, _, l) = run(a, &b0); t.scalar(l) }, &a0, i, j);
                assert!(rel_err(ga[[i, j]], num) < 1e-6, "dA[{i},{j}]");
            }
        }
        for i in 0..2 {
            for j in 0..3 {
                let num = finite_diff(|b| { let (t, _, _, l) = run(&a0, b); t.scalar(l) }, &b0, i, j);
                assert!(rel_err(gb[[i, j]], num) < 1e-6, "dB[{i},{j}]");
            }
        }
    }

    #[test]
    fn softmax_rows_sums_to_one_and_grad_checks() {
        let x0 = arr2(&[[1.0, -2.0, 0.5, 3.0], [0.1, 0.2, 0.3, 0.4]]);
        let run = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let s = t.softmax_rows(v);
            let w = t.mul(s, s); // nonlinear readout so the grad is nontrivial
            let l = t.sum_all(w);
            (t, v, s, l)
        };
        let (t, v, s, l) = run(&x0);
        for row in t.value(s).axis_iter(Axis(0)) {
            assert!((row.sum() - 1.0).abs() < 1e-12);
        }
        let grads = t.backward(l);
        let g = grads[v].as_ref().unwrap();
        for i in 0..2 {
            for j in 0..4 {
                let num = finite_diff(|x| { let (t, _, _, l) = run(x); t.scalar(l) }, &x0, i, j);
                assert!(rel_err(g[[i, j]], num) < 1e-6, "dX[{i},{j}]");
            }
        }
    }

    #[test]
    fn layernorm_grad_checks_against_finite_differences() {
        let x0 = arr2(&[[1.0, -2.0, 0.5], [0.3, 0.9, -1.4]]);
        let gamma0 = arr2(&[[1.2, 0.8, -0.5]]);
        let beta0 = arr2(&[[0.1, -0.2, 0.3]]);
        let run = |x: &Array2<f64>, gm: &Array2<f64>, bt: &Array2<f64>| {
            let mut t = Tape::new();
            let vx = t.leaf(x.clone());
            let vg = t.leaf(gm.clone());
            let vb = t.leaf(bt.clone());
            let y = t.layernorm_rows(vx, vg, vb, 1e-6);
            let y2 = t.mul(y, y);
            let l = t.mean_all(y2);
            (t, vx, vg, vb, l)
        };
        let (t, vx, vg, vb, l) = run(&x0, &gamma0, &beta0);
        let grads = t.backward(l);
        for i in 0..2 {
            for j in 0..3 {
                let num = finite_diff(
                    |x| { let (t, ..) = run(x, &gamma0, &beta0); let l = t.nodes.len() - 1; t.scalar(l) },
                    &x0, i, j,
                );
                assert!(rel_err(grads[vx].as_ref().unwrap()[[i, j]], num) < 1e-5, "dX[{i},{j}]");
            }
        }
        for j in 0..3 {
            let num = finite_diff(
                |gm| { let (t, ..) = run(&x0, gm, &beta0); let l = t.nodes.len() - 1; t.scalar(l) },
                &gamma0, 0, j,
            );
            assert!(rel_err(grads[vg].as_ref().unwrap()[[0, j]], num) < 1e-5, "dGamma[{j}]");
            let num = finite_diff(
                |bt| { let (t, ..) = run(&x0, &gamma0, bt); let l = t.nodes.len() - 1; t.scalar(l) },
                &beta0, 0, j,
            );
            assert!(rel_err(grads[vb].as_ref().unwrap()[[0, j]], num) < 1e-5, "dBeta[{j}]");
        }
    }

    #[test]
    fn gather_scatter_are_adjoint() {
        let x0 = arr2(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0], [7.0, 8.0]]);
        let mut t = Tape::new();
        let v = t.leaf(x0.clone());
        let g = t.gather_rows(v, &[2, 0]);
        let s = t.scatter_rows(g, &[1, 3], 5);
        assert_eq!(t.value(s).row(1).to_vec(), vec![5.0, 6.0]);
        assert_eq!(t.value(s).row(3).to_vec(), vec![1.0, 2.0]);
        assert_eq!(t.value(s).row(0).sum(), 0.0);
        let l = t.sum_all(s);
        let grads = t.backward(l);
        let gv = grads[v].as_ref().unwrap();
        assert_eq!(gv[[0, 0]], 1.0);
        assert_eq!(gv[[2, 1]], 1.0);
        assert_eq!(gv[[1, 0]], 0.0);
    }

    #[test]
    fn clamp_blocks_gradient_outside_bounds() {
        let x0 = arr2(&[[0.5, 2.0, -1.0]]);
        let mut t = Tape::new();
        let v = t.leaf(x0);
        let c = t.clamp(v, 0.0, 1.0);
        let l = t.sum_all(c);
        let grads = t.backward(l);
        let g = grads[v].as_ref().unwrap();
        assert_eq!(g[[0, 0]], 1.0);
        assert_eq!(g[[0, 1]], 0.0);
        assert_eq!(g[[0, 2]], 0.0);
    }
}
