//! Interactive feature fusion of the noisy representation and the restored
//! (code-retrieved) representation: bottleneck channels, residual conv
//! blocks, separable self-attention, cross-branch interaction, and a gated
//! merge. Also hosts the simpler fusion baselines used by the ablations.

use ndarray::Array2;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BoundParams, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct IFFConfig {
    pub bottleneck_dim: usize,
    pub repeats: usize,
    pub resnet_kernel: usize,
    pub resnet_layers: usize,
    pub share_interaction_mask: bool,
}

impl Default for IFFConfig {
    fn default() -> Self {
        IFFConfig {
            bottleneck_dim: 16,
            repeats: 4,
            resnet_kernel: 3,
            resnet_layers: 4,
            share_interaction_mask: false,
        }
    }
}

impl IFFConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.bottleneck_dim >= embed_dim {
            return Err(Error::invalid_argument(
                "bottleneck_dim must be smaller than the representation dim",
            ));
        }
        if self.repeats == 0 {
            return Err(Error::invalid_argument("repeats must be >= 1"));
        }
        if self.resnet_kernel % 2 == 0 {
            return Err(Error::invalid_argument("resnet kernel must be odd"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    None,
    Concat,
    Iffnet,
}

impl FusionKind {
    pub fn name(self) -> &'static str {
        match self {
            FusionKind::None => "none",
            FusionKind::Concat => "concat",
            FusionKind::Iffnet => "iffnet",
        }
    }
}

impl std::str::FromStr for FusionKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(FusionKind::None),
            "concat" => Ok(FusionKind::Concat),
            "iffnet" => Ok(FusionKind::Iffnet),
            other => Err(Error::Config(format!("unknown fusion kind: {other}"))),
        }
    }
}

/// Register fusion parameters. Branch blocks are siamese (shared between the
/// noisy and restored branch) but distinct per repeat.
pub fn init_params(
    params: &mut ParamSet,
    kind: FusionKind,
    cfg: &IFFConfig,
    embed_dim: usize,
    rng: &mut ChaCha8Rng,
) {
    match kind {
        FusionKind::None => {}
        FusionKind::Concat => {
            nn::linear_init(params, "fusion.concat", 2 * embed_dim, embed_dim, rng);
        }
        FusionKind::Iffnet => {
            let dp = cfg.bottleneck_dim;
            nn::linear_init(params, "iffnet.enc", embed_dim, dp, rng);
            nn::linear_init(params, "iffnet.dec", dp, embed_dim, rng);
            for r in 0..cfg.repeats {
                for l in 0..cfg.resnet_layers {
                    nn::conv1d_init(
                        params,
                        &format!("iffnet.rep{r}.resnet.conv{l}"),
                        dp,
                        dp,
                        cfg.resnet_kernel,
                        rng,
                    );
                }
                nn::linear_init(params, &format!("iffnet.rep{r}.ssa.proj"), 3 * dp, dp, rng);
                nn::linear_init(params, &format!("iffnet.rep{r}.interact.conv_a"), 2 * dp, dp, rng);
                nn::linear_init(params, &format!("iffnet.rep{r}.interact.conv_b"), 2 * dp, dp, rng);
            }
            nn::linear_init(params, "iffnet.merge.conv", 2 * embed_dim, embed_dim, rng);
            nn::mha_init(params, "iffnet.merge.attn", embed_dim, rng);
        }
    }
}

/// Channel compression `T x D -> T x D'`.
pub fn bottleneck_encode<'t>(bound: &BoundParams<'t>, z: Var<'t>) -> Var<'t> {
    nn::linear(bound, "iffnet.enc", z)
}

/// Channel recovery `T x D' -> T x D`.
pub fn bottleneck_decode<'t>(bound: &BoundParams<'t>, s: Var<'t>) -> Var<'t> {
    nn::linear(bound, "iffnet.dec", s)
}

/// Residual conv stack: `H + Conv_k(...Conv_1(H))` with same padding; ReLU
/// between layers, linear at the last.
pub fn resnet_block<'t>(
    bound: &BoundParams<'t>,
    prefix: &str,
    h: Var<'t>,
    kernel: usize,
    layers: usize,
) -> Var<'t> {
    let pad = kernel / 2;
    let mut x = h;
    for l in 0..layers {
        x = nn::conv1d(bound, &format!("{prefix}.conv{l}"), x, kernel, 1, pad);
        if l + 1 < layers {
            x = x.relu();
        }
    }
    h.add(x)
}

/// Temporal self-attention branch: `H + softmax(H H^T / sqrt(D')) H`.
pub fn ssa_temporal<'t>(h: Var<'t>) -> Var<'t> {
    let dp = h.shape().1 as f64;
    let scores = h.matmul(h.transpose()).scale(1.0 / dp.sqrt()).softmax_rows();
    h.add(scores.matmul(h))
}

/// Embedding self-attention branch: `H + H softmax(H^T H / sqrt(T))` with the
/// softmax over each row of the `D' x D'` score matrix.
pub fn ssa_embedding<'t>(h: Var<'t>) -> Var<'t> {
    let t = h.shape().0 as f64;
    let scores = h.transpose().matmul(h).scale(1.0 / t.sqrt()).softmax_rows();
    h.add(h.matmul(scores))
}

/// Separable self-attention: project the concatenation
/// `H || H_temp || H_embd` back to `D'` with a 1x1 conv.
pub fn ssa<'t>(bound: &BoundParams<'t>, prefix: &str, h: Var<'t>) -> Var<'t> {
    let cat = Var::concat_cols(&[h, ssa_temporal(h), ssa_embedding(h)]);
    nn::linear(bound, &format!("{prefix}.proj"), cat)
}

/// Cross-branch interaction: sigmoid masks from the concatenated branches
/// gate how much of the other branch is mixed in.
pub fn interact<'t>(
    bound: &BoundParams<'t>,
    prefix: &str,
    s_n: Var<'t>,
    s_q: Var<'t>,
    share_mask: bool,
) -> Result<(Var<'t>, Var<'t>)> {
    if s_n.shape() != s_q.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            s_n.shape(),
            s_q.shape()
        )));
    }
    let cat = Var::concat_cols(&[s_n, s_q]);
    let m_a = nn::linear(bound, &format!("{prefix}.conv_a"), cat).sigmoid();
    let m_b = if share_mask {
        m_a
    } else {
        nn::linear(bound, &format!("{prefix}.conv_b"), cat).sigmoid()
    };
    Ok((s_n.add(m_a.mul(s_q)), s_q.add(m_b.mul(s_n))))
}

/// Gated merge: `M = sigmoid(SelfAttn(Conv(Z_ni || Z_qi)))`, then
/// `Z_f = Z_ni (x) M + Z_qi (x) (1 - M)`. Returns the fused representation
/// and the gate (strictly inside (0,1)).
pub fn merge<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    z_ni: Var<'t>,
    z_qi: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if z_ni.shape() != z_qi.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            z_ni.shape(),
            z_qi.shape()
        )));
    }
    let cat = Var::concat_cols(&[z_ni, z_qi]);
    let projected = nn::linear(bound, "iffnet.merge.conv", cat);
    let mask = nn::mha(bound, "iffnet.merge.attn", projected, 1).sigmoid();
    let ones = tape.constant(Array2::ones(z_ni.shape()));
    let z_f = z_ni.mul(mask).add(z_qi.mul(ones.sub(mask)));
    Ok((z_f, mask))
}

/// One repeat of the branch pipeline: resnet -> ssa -> interact.
fn branch_repeat<'t>(
    bound: &BoundParams<'t>,
    cfg: &IFFConfig,
    r: usize,
    s_n: Var<'t>,
    s_q: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let resnet = format!("iffnet.rep{r}.resnet");
    let s_n = resnet_block(bound, &resnet, s_n, cfg.resnet_kernel, cfg.resnet_layers);
    let s_q = resnet_block(bound, &resnet, s_q, cfg.resnet_kernel, cfg.resnet_layers);
    let ssa_prefix = format!("iffnet.rep{r}.ssa");
    let s_n = ssa(bound, &ssa_prefix, s_n);
    let s_q = ssa(bound, &ssa_prefix, s_q);
    interact(
        bound,
        &format!("iffnet.rep{r}.interact"),
        s_n,
        s_q,
        cfg.share_interaction_mask,
    )
}

/// Full fusion pipeline: encode both branches, run `repeats` rounds of
/// resnet/ssa/interaction, decode, and merge.
pub fn iffnet_forward<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &IFFConfig,
    z_n: Var<'t>,
    z_q: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    if z_n.shape() != z_q.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            z_n.shape(),
            z_q.shape()
        )));
    }
    let mut s_n = bottleneck_encode(bound, z_n);
    let mut s_q = bottleneck_encode(bound, z_q);
    for r in 0..cfg.repeats {
        let (n2, q2) = branch_repeat(bound, cfg, r, s_n, s_q)?;
        s_n = n2;
        s_q = q2;
    }
    let z_ni = bottleneck_decode(bound, s_n);
    let z_qi = bottleneck_decode(bound, s_q);
    merge(tape, bound, z_ni, z_qi)
}

/// Fuse the noisy and restored representations per the configured strategy.
pub fn fuse<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    kind: FusionKind,
    cfg: &IFFConfig,
    z_n: Var<'t>,
    z_q: Var<'t>,
) -> Result<Var<'t>> {
    match kind {
        // no fusion: the restored representation goes downstream on its own
        FusionKind::None => Ok(z_q),
        FusionKind::Concat => Ok(nn::linear(
            bound,
            "fusion.concat",
            Var::concat_cols(&[z_n, z_q]),
        )),
        FusionKind::Iffnet => Ok(iffnet_forward(tape, bound, cfg, z_n, z_q)?.0),
    }
}
