//! Reverse-mode automatic differentiation over `f64` matrices.
//!
//! A [`Tape`] records every operation performed on [`Var`] handles; calling
//! [`Tape::backward`] walks the record in reverse and accumulates gradients.
//! All values are dense `T x D` matrices (scalars are `1 x 1`), which is
//! enough for the per-utterance training graphs built elsewhere in the crate.

use std::cell::RefCell;

use ndarray::{concatenate, s, Array2, Axis};

type BackwardFn = Box<dyn Fn(&Array2<f64>, &[&Array2<f64>], &Array2<f64>) -> Vec<Array2<f64>>>;

struct Node {
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
}

/// Operation record. Values live separately from node metadata so the
/// backward pass can borrow them while mutating gradients.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    values: RefCell<Vec<Array2<f64>>>,
}

/// Handle to a value on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var<'_>) -> Option<&Array2<f64>> {
        self.grads.get(v.id).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Array2<f64>, parents: Vec<usize>, backward: Option<BackwardFn>) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        let mut values = self.values.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { parents, backward });
        values.push(value);
        Var { tape: self, id }
    }

    /// Leaf value. Gradients accumulate here but nothing flows past it.
    pub fn var(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, vec![], None)
    }

    /// Leaf value whose gradient nobody reads. Same mechanics as `var`.
    pub fn constant(&self, value: Array2<f64>) -> Var<'_> {
        self.push(value, vec![], None)
    }

    pub fn scalar(&self, x: f64) -> Var<'_> {
        self.var(Array2::from_elem((1, 1), x))
    }

    /// Custom node for operations with bespoke gradients (e.g. CTC).
    pub fn custom(
        &self,
        parents: &[Var<'_>],
        value: Array2<f64>,
        backward: impl Fn(&Array2<f64>, &[&Array2<f64>], &Array2<f64>) -> Vec<Array2<f64>> + 'static,
    ) -> Var<'_> {
        let ids = parents.iter().map(|p| p.id).collect();
        self.push(value, ids, Some(Box::new(backward)))
    }

    /// Backpropagate from `root`, which must be `1 x 1`.
    pub fn backward(&self, root: Var<'_>) -> Gradients {
        let nodes = self.nodes.borrow();
        let values = self.values.borrow();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; nodes.len()];
        assert_eq!(values[root.id].dim(), (1, 1), "backward root must be scalar");
        grads[root.id] = Some(Array2::from_elem((1, 1), 1.0));

        for id in (0..=root.id).rev() {
            let Some(grad) = grads[id].take() else { continue };
            let node = &nodes[id];
            if let Some(backward) = &node.backward {
                let parent_vals: Vec<&Array2<f64>> =
                    node.parents.iter().map(|&p| &values[p]).collect();
                let parent_grads = backward(&grad, &parent_vals, &values[id]);
                debug_assert_eq!(parent_grads.len(), node.parents.len());
                for (&p, pg) in node.parents.iter().zip(parent_grads) {
                    match &mut grads[p] {
                        Some(acc) => *acc += &pg,
                        slot => *slot = Some(pg),
                    }
                }
            }
            grads[id] = Some(grad);
        }
        Gradients { grads }
    }
}

impl<'t> Var<'t> {
    pub fn value(&self) -> Array2<f64> {
        self.tape.values.borrow()[self.id].clone()
    }

    pub fn shape(&self) -> (usize, usize) {
        self.tape.values.borrow()[self.id].dim()
    }

    pub fn scalar_value(&self) -> f64 {
        let v = self.tape.values.borrow();
        assert_eq!(v[self.id].dim(), (1, 1));
        v[self.id][[0, 0]]
    }

    fn same_tape(&self, other: &Var<'t>) {
        assert!(std::ptr::eq(self.tape, other.tape), "vars from different tapes");
    }

    pub fn add(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value() + other.value();
        self.tape.custom(&[self, other], v, |g, _, _| vec![g.clone(), g.clone()])
    }

    pub fn sub(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value() - other.value();
        self.tape
            .custom(&[self, other], v, |g, _, _| vec![g.clone(), -g])
    }

    pub fn mul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value() * other.value();
        self.tape
            .custom(&[self, other], v, |g, p, _| vec![g * p[1], g * p[0]])
    }

    pub fn div(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value() / other.value();
        self.tape.custom(&[self, other], v, |g, p, out| {
            vec![g / p[1], -(g * out / p[1])]
        })
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        let v = self.value() * c;
        self.tape.custom(&[self], v, move |g, _, _| vec![g * c])
    }

    pub fn add_scalar(self, c: f64) -> Var<'t> {
        let v = self.value() + c;
        self.tape.custom(&[self], v, |g, _, _| vec![g.clone()])
    }

    /// Broadcast-add a `1 x D` row to every row of a `T x D` matrix.
    pub fn add_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let v = self.value() + &row.value().row(0);
        self.tape.custom(&[self, row], v, |g, _, _| {
            vec![g.clone(), g.sum_axis(Axis(0)).insert_axis(Axis(0))]
        })
    }

    /// Broadcast-multiply by a `1 x D` row.
    pub fn mul_row(self, row: Var<'t>) -> Var<'t> {
        self.same_tape(&row);
        let v = self.value() * &row.value().row(0);
        self.tape.custom(&[self, row], v, |g, p, _| {
            let da = g * &p[1].row(0);
            let db = (g * p[0]).sum_axis(Axis(0)).insert_axis(Axis(0));
            vec![da, db]
        })
    }

    /// Broadcast-multiply a `T x D` matrix by a `T x 1` column.
    pub fn mul_col(self, col: Var<'t>) -> Var<'t> {
        self.same_tape(&col);
        let v = self.value() * &col.value().column(0).insert_axis(Axis(1));
        self.tape.custom(&[self, col], v, |g, p, _| {
            let da = g * &p[1].column(0).insert_axis(Axis(1));
            let db = (g * p[0]).sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![da, db]
        })
    }

    /// Broadcast-multiply by a `1 x 1` scalar variable.
    pub fn mul_scalar_var(self, sc: Var<'t>) -> Var<'t> {
        self.same_tape(&sc);
        let v = self.value() * sc.scalar_value();
        self.tape.custom(&[self, sc], v, |g, p, _| {
            let da = g * p[1][[0, 0]];
            let ds = Array2::from_elem((1, 1), (g * p[0]).sum());
            vec![da, ds]
        })
    }

    pub fn matmul(self, other: Var<'t>) -> Var<'t> {
        self.same_tape(&other);
        let v = self.value().dot(&other.value());
        self.tape.custom(&[self, other], v, |g, p, _| {
            vec![g.dot(&p[1].t()), p[0].t().dot(g)]
        })
    }

    pub fn transpose(self) -> Var<'t> {
        let v = self.value().t().to_owned();
        self.tape
            .custom(&[self], v, |g, _, _| vec![g.t().to_owned()])
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().mapv(|x| x.max(0.0));
        self.tape.custom(&[self], v, |g, p, _| {
            vec![g * &p[0].mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })]
        })
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().mapv(|x| 1.0 / (1.0 + (-x).exp()));
        self.tape
            .custom(&[self], v, |g, _, out| vec![g * out * &out.mapv(|y| 1.0 - y)])
    }

    pub fn tanh(self) -> Var<'t> {
        let v = self.value().mapv(f64::tanh);
        self.tape
            .custom(&[self], v, |g, _, out| vec![g * &out.mapv(|y| 1.0 - y * y)])
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().mapv(f64::exp);
        self.tape.custom(&[self], v, |g, _, out| vec![g * out])
    }

    pub fn ln(self) -> Var<'t> {
        let v = self.value().mapv(f64::ln);
        self.tape.custom(&[self], v, |g, p, _| vec![g / p[0]])
    }

    pub fn sqrt(self) -> Var<'t> {
        let v = self.value().mapv(f64::sqrt);
        self.tape
            .custom(&[self], v, |g, _, out| vec![g / &(out * 2.0)])
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self)
    }

    pub fn sum_all(self) -> Var<'t> {
        let v = Array2::from_elem((1, 1), self.value().sum());
        self.tape.custom(&[self], v, |g, p, _| {
            vec![Array2::from_elem(p[0].dim(), g[[0, 0]])]
        })
    }

    pub fn mean_all(self) -> Var<'t> {
        let n = {
            let (r, c) = self.shape();
            (r * c) as f64
        };
        self.sum_all().scale(1.0 / n)
    }

    /// Sum over columns: `T x D -> T x 1`.
    pub fn sum_cols(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(1)).insert_axis(Axis(1));
        self.tape.custom(&[self], v, |g, p, _| {
            let col = g.column(0).insert_axis(Axis(1));
            vec![Array2::zeros(p[0].dim()) + &col]
        })
    }

    /// Sum over rows: `T x D -> 1 x D`.
    pub fn sum_rows(self) -> Var<'t> {
        let v = self.value().sum_axis(Axis(0)).insert_axis(Axis(0));
        self.tape.custom(&[self], v, |g, p, _| {
            vec![Array2::zeros(p[0].dim()) + &g.row(0)]
        })
    }

    /// Row-wise softmax.
    pub fn softmax_rows(self) -> Var<'t> {
        let v = softmax_rows_value(&self.value());
        self.tape.custom(&[self], v, |g, _, out| {
            let dot = (g * out).sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![out * &(g - &dot)]
        })
    }

    /// Row-wise log-softmax.
    pub fn log_softmax_rows(self) -> Var<'t> {
        let x = self.value();
        let sm = softmax_rows_value(&x);
        let v = &x
            - &x.map_axis(Axis(1), |row| {
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                m + row.mapv(|z| (z - m).exp()).sum().ln()
            })
            .insert_axis(Axis(1));
        self.tape.custom(&[self], v, move |g, _, _| {
            let gsum = g.sum_axis(Axis(1)).insert_axis(Axis(1));
            vec![g - &(&sm * &gsum)]
        })
    }

    /// Row-wise normalization `(x - mean) / sqrt(var + eps)` (no affine part).
    pub fn layer_norm_rows(self, eps: f64) -> Var<'t> {
        let x = self.value();
        let d = x.ncols() as f64;
        let mean = x.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let centered = &x - &mean;
        let var = centered.mapv(|c| c * c).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
        let inv_std = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let y = &centered * &inv_std;
        let inv_std_c = inv_std.clone();
        self.tape.custom(&[self], y, move |g, _, out| {
            let gm = g.mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
            let gy = (g * out).mean_axis(Axis(1)).unwrap().insert_axis(Axis(1));
            let _ = d;
            vec![&inv_std_c * &(g - &gm - &(out * &gy))]
        })
    }

    /// Value copy with no gradient flow.
    pub fn stop_gradient(self) -> Var<'t> {
        self.tape.constant(self.value())
    }

    /// Forward is `hard`, backward is the identity onto `self` (the soft path).
    pub fn straight_through(self, hard: Array2<f64>) -> Var<'t> {
        assert_eq!(self.shape(), hard.dim());
        self.tape.custom(&[self], hard, |g, _, _| vec![g.clone()])
    }

    pub fn concat_cols(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Array2<f64>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols shape mismatch");
        let widths: Vec<usize> = vals.iter().map(|v| v.ncols()).collect();
        tape.custom(parts, v, move |g, _, _| {
            let mut out = Vec::with_capacity(widths.len());
            let mut start = 0;
            for &w in &widths {
                out.push(g.slice(s![.., start..start + w]).to_owned());
                start += w;
            }
            out
        })
    }

    pub fn concat_rows(parts: &[Var<'t>]) -> Var<'t> {
        assert!(!parts.is_empty());
        let tape = parts[0].tape;
        let vals: Vec<Array2<f64>> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = vals.iter().map(|v| v.view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows shape mismatch");
        let heights: Vec<usize> = vals.iter().map(|v| v.nrows()).collect();
        tape.custom(parts, v, move |g, _, _| {
            let mut out = Vec::with_capacity(heights.len());
            let mut start = 0;
            for &h in &heights {
                out.push(g.slice(s![start..start + h, ..]).to_owned());
                start += h;
            }
            out
        })
    }

    pub fn slice_cols(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice(s![.., start..end]).to_owned();
        self.tape.custom(&[self], v, move |g, p, _| {
            let mut full = Array2::zeros(p[0].dim());
            full.slice_mut(s![.., start..end]).assign(g);
            vec![full]
        })
    }

    pub fn slice_rows(self, start: usize, end: usize) -> Var<'t> {
        let v = self.value().slice(s![start..end, ..]).to_owned();
        self.tape.custom(&[self], v, move |g, p, _| {
            let mut full = Array2::zeros(p[0].dim());
            full.slice_mut(s![start..end, ..]).assign(g);
            vec![full]
        })
    }

    /// Pick rows by index (duplicates allowed); backward scatter-adds.
    pub fn gather_rows(self, indices: &[usize]) -> Var<'t> {
        let x = self.value();
        let mut v = Array2::zeros((indices.len(), x.ncols()));
        for (i, &idx) in indices.iter().enumerate() {
            v.row_mut(i).assign(&x.row(idx));
        }
        let idx: Vec<usize> = indices.to_vec();
        self.tape.custom(&[self], v, move |g, p, _| {
            let mut full: Array2<f64> = Array2::zeros(p[0].dim());
            for (i, &j) in idx.iter().enumerate() {
                let mut row = full.row_mut(j);
                row += &g.row(i);
            }
            vec![full]
        })
    }

    /// Unfold a `T x C` sequence into conv patches of `T_out x (k*C)` with
    /// stride `stride` and `pad` zeros on each end of the time axis.
    pub fn im2col(self, kernel: usize, stride: usize, pad: usize) -> Var<'t> {
        let x = self.value();
        let (t, c) = x.dim();
        let padded = t + 2 * pad;
        assert!(padded >= kernel, "sequence shorter than kernel");
        let t_out = (padded - kernel) / stride + 1;
        let mut v = Array2::zeros((t_out, kernel * c));
        for o in 0..t_out {
            for k in 0..kernel {
                let src = (o * stride + k) as isize - pad as isize;
                if src >= 0 && (src as usize) < t {
                    for ch in 0..c {
                        v[[o, k * c + ch]] = x[[src as usize, ch]];
                    }
                }
            }
        }
        self.tape.custom(&[self], v, move |g, p, _| {
            let (t, c) = p[0].dim();
            let t_out = g.nrows();
            let mut full = Array2::zeros((t, c));
            for o in 0..t_out {
                for k in 0..kernel {
                    let src = (o * stride + k) as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        for ch in 0..c {
                            full[[src as usize, ch]] += g[[o, k * c + ch]];
                        }
                    }
                }
            }
            vec![full]
        })
    }
}

pub(crate) fn softmax_rows_value(x: &Array2<f64>) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|z| (z - m).exp());
        let s = row.sum();
        row.mapv_inplace(|z| z / s);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar-valued function of one matrix.
    fn finite_diff(
        f: &dyn Fn(&Array2<f64>) -> f64,
        x: &Array2<f64>,
        h: f64,
    ) -> Array2<f64> {
        let mut g = Array2::zeros(x.dim());
        for i in 0..x.nrows() {
            for j in 0..x.ncols() {
                let mut xp = x.clone();
                xp[[i, j]] += h;
                let mut xm = x.clone();
                xm[[i, j]] -= h;
                g[[i, j]] = (f(&xp) - f(&xm)) / (2.0 * h);
            }
        }
        g
    }

    fn check_grad<F>(f: F, x: Array2<f64>, tol: f64)
    where
        F: for<'t> Fn(&'t Tape, Var<'t>) -> Var<'t>,
    {
        let tape = Tape::new();
        let v = tape.var(x.clone());
        let root = f(&tape, v);
        let grads = tape.backward(root);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Array2::zeros(x.dim()));
        let numeric = finite_diff(
            &|xp: &Array2<f64>| {
                let t = Tape::new();
                let vv = t.var(xp.clone());
                f(&t, vv).scalar_value()
            },
            &x,
            1e-6,
        );
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            let denom = a.abs().max(n.abs()).max(1e-8);
            assert!(
                (a - n).abs() / denom < tol,
                "gradient mismatch: analytic {a} vs numeric {n}"
            );
        }
    }

    fn rand_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn matmul_softmax_layernorm_grads_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_matrix(&mut rng, 3, 4);
        check_grad(
            |_t, v| v.softmax_rows().square().mean_all(),
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| v.log_softmax_rows().square().mean_all(),
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| v.layer_norm_rows(1e-5).square().mean_all(),
            x.clone(),
            1e-4,
        );
        let w = rand_matrix(&mut rng, 4, 2);
        check_grad(
            move |t, v| {
                let wv = t.var(w.clone());
                v.matmul(wv).relu().sum_all()
            },
            x.clone(),
            1e-5,
        );
    }

    #[test]
    fn elementwise_and_reduction_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_matrix(&mut rng, 4, 3).mapv(|v| v + 2.5); // keep positive for ln/sqrt
        check_grad(|_t, v| v.ln().sum_all(), x.clone(), 1e-5);
        check_grad(|_t, v| v.sqrt().sum_all(), x.clone(), 1e-5);
        check_grad(|_t, v| v.sigmoid().square().sum_all(), x.clone(), 1e-5);
        check_grad(|_t, v| v.tanh().mean_all(), x.clone(), 1e-5);
        check_grad(
            |_t, v| v.sum_cols().square().sum_all(),
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| v.sum_rows().square().sum_all(),
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| v.transpose().exp().mean_all(),
            x.clone(),
            1e-5,
        );
    }

    #[test]
    fn broadcast_slice_gather_im2col_grads() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_matrix(&mut rng, 5, 4);
        let row = rand_matrix(&mut rng, 1, 4);
        let col = rand_matrix(&mut rng, 5, 1);
        check_grad(
            {
                let row = row.clone();
                move |t, v| {
                    let r = t.var(row.clone());
                    v.add_row(r).square().sum_all()
                }
            },
            x.clone(),
            1e-5,
        );
        check_grad(
            {
                let row = row.clone();
                move |t, v| {
                    let r = t.var(row.clone());
                    v.mul_row(r).square().sum_all()
                }
            },
            x.clone(),
            1e-5,
        );
        check_grad(
            {
                let col = col.clone();
                move |t, v| {
                    let c = t.var(col.clone());
                    v.mul_col(c).square().sum_all()
                }
            },
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| v.slice_cols(1, 3).square().sum_all(),
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| v.slice_rows(0, 3).square().sum_all(),
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| {
                v.gather_rows(&[0, 2, 2, 4])
                    .square()
                    .sum_all()
                    
            },
            x.clone(),
            1e-5,
        );
        check_grad(
            |_t, v| v.im2col(3, 2, 1).square().sum_all(),
            x.clone(),
            1e-5,
        );
    }

    #[test]
    fn straight_through_passes_gradient_to_soft_path() {
        let tape = Tape::new();
        let x = tape.var(array![[0.2, 0.8]]);
        let soft = x.softmax_rows();
        let hard = array![[0.0, 1.0]];
        let st = soft.straight_through(hard.clone());
        assert_eq!(st.value(), hard);
        let loss = st.square().sum_all();
        let grads = tape.backward(loss);
        let gx = grads.get(x).unwrap();
        assert!(gx.iter().any(|&g| g.abs() > 1e-8));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = tape.var(array![[1.0, 2.0]]);
        let loss = x.stop_gradient().square().sum_all();
        let grads = tape.backward(loss);
        assert!(grads.get(x).is_none());
    }

    #[test]
    fn gradient_accumulates_over_reuse() {
        let tape = Tape::new();
        let x = tape.var(array![[3.0]]);
        let y = x.mul(x); // x^2, grad 2x = 6
        let grads = tape.backward(y);
        assert!((grads.get(x).unwrap()[[0, 0]] - 6.0).abs() < 1e-12);
    }
}
