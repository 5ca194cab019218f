//! Parameter storage, the Adam optimizer, and layer builders shared by the
//! encoder backbone, code predictor, and fusion network.

use indexmap::IndexMap;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};

/// Row-major matrix in serializable form (checkpoints, feature export).
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct TensorData {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl TensorData {
    pub fn from_array(a: &Array2<f64>) -> Self {
        TensorData {
            rows: a.nrows(),
            cols: a.ncols(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> Array2<f64> {
        Array2::from_shape_vec((self.rows, self.cols), self.data.clone())
            .expect("tensor shape/data mismatch")
    }
}

/// Named parameter tensors. Names are dot-separated paths, e.g.
/// `backbone.transformer.0.attn.wq`.
#[derive(Debug, Clone, Default)]
pub struct ParamSet {
    params: IndexMap<String, Array2<f64>>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<f64>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> &Array2<f64> {
        self.params
            .get(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<f64> {
        self.params
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing parameter {name}"))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(|s| s.as_str())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Array2<f64>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Register every parameter on a tape so one backward pass yields all
    /// gradients.
    pub fn bind<'t>(&self, tape: &'t Tape) -> BoundParams<'t> {
        let vars = self
            .params
            .iter()
            .map(|(k, v)| (k.clone(), tape.var(v.clone())))
            .collect();
        BoundParams { vars }
    }

    pub fn to_data(&self) -> IndexMap<String, TensorData> {
        self.params
            .iter()
            .map(|(k, v)| (k.clone(), TensorData::from_array(v)))
            .collect()
    }

    pub fn from_data(data: &IndexMap<String, TensorData>) -> Self {
        ParamSet {
            params: data.iter().map(|(k, v)| (k.clone(), v.to_array())).collect(),
        }
    }
}

/// Tape handles for every parameter of a [`ParamSet`] during one forward pass.
pub struct BoundParams<'t> {
    vars: IndexMap<String, Var<'t>>,
}

impl<'t> BoundParams<'t> {
    pub fn get(&self, name: &str) -> Var<'t> {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("missing bound parameter {name}"))
    }

    /// Collect gradients by parameter name. Parameters untouched by the loss
    /// get zero gradients.
    pub fn grads(&self, grads: &Gradients) -> IndexMap<String, Array2<f64>> {
        self.vars
            .iter()
            .map(|(k, v)| {
                let g = grads
                    .get(*v)
                    .cloned()
                    .unwrap_or_else(|| Array2::zeros(v.shape()));
                (k.clone(), g)
            })
            .collect()
    }
}

/// Adam state, serializable for checkpointing.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: IndexMap<String, TensorData>,
    v: IndexMap<String, TensorData>,
}

impl Adam {
    pub fn new(beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            beta1,
            beta2,
            eps,
            step: 0,
            m: IndexMap::new(),
            v: IndexMap::new(),
        }
    }

    /// Adam with (0.9, 0.98, 1e-6), the convention used by the trainer.
    pub fn standard() -> Self {
        Adam::new(0.9, 0.98, 1e-6)
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over every (name, grad) pair. Names absent from `grads`
    /// (e.g. frozen parameters) are left untouched, including their moments.
    pub fn step(
        &mut self,
        params: &mut ParamSet,
        grads: &IndexMap<String, Array2<f64>>,
        lr: f64,
    ) {
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.beta1.powi(t);
        let bc2 = 1.0 - self.beta2.powi(t);
        for (name, g) in grads {
            let p = params.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| TensorData::from_array(&Array2::zeros(g.dim())));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| TensorData::from_array(&Array2::zeros(g.dim())));
            let mut ma = m.to_array();
            let mut va = v.to_array();
            ma = &ma * self.beta1 + &(g * (1.0 - self.beta1));
            va = &va * self.beta2 + &g.mapv(|x| x * x * (1.0 - self.beta2));
            let mhat = &ma / bc1;
            let vhat = &va / bc2;
            let update = &mhat / &vhat.mapv(|x| x.sqrt() + self.eps) * lr;
            *p -= &update;
            *m = TensorData::from_array(&ma);
            *v = TensorData::from_array(&va);
        }
    }
}

pub fn randn(rng: &mut ChaCha8Rng, rows: usize, cols: usize, std: f64) -> Array2<f64> {
    // Box-Muller; two uniforms per normal draw, deterministic per rng stream.
    Array2::from_shape_fn((rows, cols), |_| {
        let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std
    })
}

pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    randn(rng, rows, cols, (2.0 / (rows + cols) as f64).sqrt())
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

pub fn linear_init(
    params: &mut ParamSet,
    prefix: &str,
    in_dim: usize,
    out_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(format!("{prefix}.w"), xavier(rng, in_dim, out_dim));
    params.insert(format!("{prefix}.b"), Array2::zeros((1, out_dim)));
}

pub fn linear<'t>(bound: &BoundParams<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.matmul(bound.get(&format!("{prefix}.w")))
        .add_row(bound.get(&format!("{prefix}.b")))
}

pub fn layer_norm_init(params: &mut ParamSet, prefix: &str, dim: usize) {
    params.insert(format!("{prefix}.g"), Array2::ones((1, dim)));
    params.insert(format!("{prefix}.b"), Array2::zeros((1, dim)));
}

pub fn layer_norm<'t>(bound: &BoundParams<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    x.layer_norm_rows(LAYER_NORM_EPS)
        .mul_row(bound.get(&format!("{prefix}.g")))
        .add_row(bound.get(&format!("{prefix}.b")))
}

/// 1-D convolution over the time axis of a `T x C_in` sequence.
/// Weight layout is `(kernel * C_in) x C_out`, matching [`Var::im2col`].
pub fn conv1d_init(
    params: &mut ParamSet,
    prefix: &str,
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    rng: &mut ChaCha8Rng,
) {
    params.insert(format!("{prefix}.w"), xavier(rng, kernel * in_ch, out_ch));
    params.insert(format!("{prefix}.b"), Array2::zeros((1, out_ch)));
}

pub fn conv1d<'t>(
    bound: &BoundParams<'t>,
    prefix: &str,
    x: Var<'t>,
    kernel: usize,
    stride: usize,
    pad: usize,
) -> Var<'t> {
    x.im2col(kernel, stride, pad)
        .matmul(bound.get(&format!("{prefix}.w")))
        .add_row(bound.get(&format!("{prefix}.b")))
}

pub fn mha_init(params: &mut ParamSet, prefix: &str, dim: usize, rng: &mut ChaCha8Rng) {
    for name in ["wq", "wk", "wv", "wo"] {
        linear_init(params, &format!("{prefix}.{name}"), dim, dim, rng);
    }
}

/// Multi-head self-attention over a `T x D` sequence. `D` must divide by
/// `heads`.
pub fn mha<'t>(bound: &BoundParams<'t>, prefix: &str, x: Var<'t>, heads: usize) -> Var<'t> {
    let (_, d) = x.shape();
    assert_eq!(d % heads, 0, "embed dim not divisible by head count");
    let dh = d / heads;
    let q = linear(bound, &format!("{prefix}.wq"), x);
    let k = linear(bound, &format!("{prefix}.wk"), x);
    let v = linear(bound, &format!("{prefix}.wv"), x);
    let mut outs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dh, (h + 1) * dh);
        let qh = q.slice_cols(a, b);
        let kh = k.slice_cols(a, b);
        let vh = v.slice_cols(a, b);
        let scores = qh
            .matmul(kh.transpose())
            .scale(1.0 / (dh as f64).sqrt())
            .softmax_rows();
        outs.push(scores.matmul(vh));
    }
    let merged = Var::concat_cols(&outs);
    linear(bound, &format!("{prefix}.wo"), merged)
}

pub fn ffn_init(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    hidden: usize,
    rng: &mut ChaCha8Rng,
) {
    linear_init(params, &format!("{prefix}.fc1"), dim, hidden, rng);
    linear_init(params, &format!("{prefix}.fc2"), hidden, dim, rng);
}

pub fn ffn<'t>(bound: &BoundParams<'t>, prefix: &str, x: Var<'t>) -> Var<'t> {
    linear(
        bound,
        &format!("{prefix}.fc2"),
        linear(bound, &format!("{prefix}.fc1"), x).relu(),
    )
}

pub fn transformer_block_init(
    params: &mut ParamSet,
    prefix: &str,
    dim: usize,
    ffn_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    mha_init(params, &format!("{prefix}.attn"), dim, rng);
    layer_norm_init(params, &format!("{prefix}.ln1"), dim);
    ffn_init(params, &format!("{prefix}.ffn"), dim, ffn_dim, rng);
    layer_norm_init(params, &format!("{prefix}.ln2"), dim);
}

/// Post-norm residual block: `H = LN(X + MHA(X)); X' = LN(H + FFN(H))`.
pub fn transformer_block<'t>(
    bound: &BoundParams<'t>,
    prefix: &str,
    x: Var<'t>,
    heads: usize,
) -> Var<'t> {
    let h = layer_norm(
        bound,
        &format!("{prefix}.ln1"),
        x.add(mha(bound, &format!("{prefix}.attn"), x, heads)),
    );
    layer_norm(
        bound,
        &format!("{prefix}.ln2"),
        h.add(ffn(bound, &format!("{prefix}.ffn"), h)),
    )
}

/// Fixed sinusoidal position encodings, `T x D`.
pub fn sinusoidal_positions(t: usize, d: usize) -> Array2<f64> {
    Array2::from_shape_fn((t, d), |(pos, i)| {
        let rate = 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
        let angle = pos as f64 / rate;
        if i % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Mean squared error over all elements.
pub fn mse<'t>(a: Var<'t>, b: Var<'t>) -> Var<'t> {
    a.sub(b).square().mean_all()
}
