//! Code predictor: maps noisy contextual representations to distributions
//! over codebook entries, samples discrete codes differentiably, retrieves
//! the matching entries, and assembles the finetune objective.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codebook::{CodeSequence, Codebook};
use crate::error::{Error, Result};
use crate::nn::{self, BoundParams, ParamSet};

pub const DEFAULT_LAMBDA_PRED: f64 = 0.1;
pub const DEFAULT_LAMBDA_RES: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Transformer,
    Cnn,
    NnMatching,
}

impl PredictorKind {
    pub fn name(self) -> &'static str {
        match self {
            PredictorKind::Transformer => "transformer",
            PredictorKind::Cnn => "cnn",
            PredictorKind::NnMatching => "nn_matching",
        }
    }
}

impl std::str::FromStr for PredictorKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "transformer" => Ok(PredictorKind::Transformer),
            "cnn" => Ok(PredictorKind::Cnn),
            "nn_matching" => Ok(PredictorKind::NnMatching),
            other => Err(Error::Config(format!("unknown predictor kind: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub kind: PredictorKind,
    pub blocks: usize,
    pub proj_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub tau: f64,
    pub hard_select: bool,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            kind: PredictorKind::Transformer,
            blocks: 2,
            proj_dim: 32,
            heads: 4,
            ffn_dim: 128,
            tau: 1.0,
            hard_select: true,
        }
    }
}

impl PredictorConfig {
    pub fn validate(&self, embed_dim: usize) -> Result<()> {
        if self.proj_dim >= embed_dim {
            return Err(Error::invalid_argument(
                "predictor proj_dim must be smaller than the representation dim",
            ));
        }
        if self.blocks == 0 {
            return Err(Error::invalid_argument("predictor needs at least one block"));
        }
        if self.tau <= 0.0 {
            return Err(Error::invalid_argument("gumbel temperature must be > 0"));
        }
        if self.kind == PredictorKind::Transformer && self.proj_dim % self.heads != 0 {
            return Err(Error::invalid_argument("proj_dim must divide by heads"));
        }
        Ok(())
    }
}

/// Per-frame distributions over the `N` codebook entries.
pub struct CodeLogits<'t> {
    pub logits: Var<'t>,
    pub probs: Var<'t>,
}

/// Discrete selections with the straight-through one-hot on the gradient
/// path.
pub struct PredictedCodes<'t> {
    pub ids: Vec<usize>,
    pub one_hot_st: Var<'t>,
}

/// Register predictor parameters under `predictor.` for a representation of
/// width `embed_dim` and a codebook of `entries` codes.
pub fn init_params(
    params: &mut ParamSet,
    cfg: &PredictorConfig,
    embed_dim: usize,
    entries: usize,
    rng: &mut ChaCha8Rng,
) {
    if cfg.kind == PredictorKind::NnMatching {
        return; // parameter-free: distances against the codebook
    }
    nn::linear_init(params, "predictor.proj", embed_dim, cfg.proj_dim, rng);
    match cfg.kind {
        PredictorKind::Transformer => {
            for m in 0..cfg.blocks {
                nn::transformer_block_init(
                    params,
                    &format!("predictor.block.{m}"),
                    cfg.proj_dim,
                    cfg.ffn_dim,
                    rng,
                );
            }
        }
        PredictorKind::Cnn => {
            for m in 0..cfg.blocks {
                nn::conv1d_init(
                    params,
                    &format!("predictor.conv.{m}"),
                    cfg.proj_dim,
                    cfg.proj_dim,
                    3,
                    rng,
                );
            }
        }
        PredictorKind::NnMatching => unreachable!(),
    }
    nn::linear_init(params, "predictor.out", cfg.proj_dim, entries, rng);
}

/// Pre-softmax code logits, `T x N`.
pub fn predict_logits<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &PredictorConfig,
    z_n: Var<'t>,
    codebook: &Codebook,
) -> Result<Var<'t>> {
    let (t, d) = z_n.shape();
    if cfg.kind == PredictorKind::NnMatching {
        // logits = -||z - e||^2, expanded so gradients reach the encoder
        let entries = tape.constant(codebook.entries.clone());
        let n = codebook.n();
        let z_sq = z_n.square().sum_cols(); // T x 1
        let e_sq_row = &codebook.entries.map_axis(ndarray::Axis(1), |r| {
            r.iter().map(|x| x * x).sum::<f64>()
        });
        let e_sq = tape.constant(
            Array2::from_shape_vec((1, n), e_sq_row.to_vec()).expect("entry norms"),
        );
        let ones_row = tape.constant(Array2::ones((1, n)));
        let cross = z_n.matmul(entries.transpose()).scale(2.0);
        let dists = z_sq.matmul(ones_row).sub(cross).add_row(e_sq);
        return Ok(dists.neg());
    }
    cfg.validate(d)?;
    let mut x = nn::linear(bound, "predictor.proj", z_n);
    match cfg.kind {
        PredictorKind::Transformer => {
            x = x.add(tape.constant(nn::sinusoidal_positions(t, cfg.proj_dim)));
            for m in 0..cfg.blocks {
                x = nn::transformer_block(bound, &format!("predictor.block.{m}"), x, cfg.heads);
            }
        }
        PredictorKind::Cnn => {
            for m in 0..cfg.blocks {
                x = nn::conv1d(bound, &format!("predictor.conv.{m}"), x, 3, 1, 1).relu();
            }
        }
        PredictorKind::NnMatching => unreachable!(),
    }
    Ok(nn::linear(bound, "predictor.out", x))
}

/// Row-stochastic code probabilities.
pub fn predict_codes<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &PredictorConfig,
    z_n: Var<'t>,
    codebook: &Codebook,
) -> Result<CodeLogits<'t>> {
    let logits = predict_logits(tape, bound, cfg, z_n, codebook)?;
    Ok(CodeLogits {
        logits,
        probs: logits.softmax_rows(),
    })
}

/// Gumbel selection: `y_t = softmax(logits_t / tau + g_t)` with standard
/// Gumbel noise `g`; the temperature sharpens the distribution while the
/// noise supplies the categorical sample (gumbel-max at tau = 1). With
/// `hard`, the forward value is the one-hot argmax of `y_t` and gradients
/// follow the soft sample.
pub fn gumbel_select<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    tau: f64,
    hard: bool,
    seed: u64,
) -> Result<PredictedCodes<'t>> {
    if tau <= 0.0 {
        return Err(Error::invalid_argument("gumbel temperature must be > 0"));
    }
    let (t, n) = logits.shape();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7365_6c65_6374);
    let noise = Array2::from_shape_fn((t, n), |_| {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -(-u.ln()).ln()
    });
    let soft = logits.scale(1.0 / tau).add(tape.constant(noise)).softmax_rows();
    let y = soft.value();
    let mut ids = Vec::with_capacity(t);
    let mut one_hot = Array2::zeros((t, n));
    for (i, row) in y.rows().into_iter().enumerate() {
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        ids.push(argmax);
        one_hot[[i, argmax]] = 1.0;
    }
    let one_hot_st = if hard { soft.straight_through(one_hot) } else { soft };
    Ok(PredictedCodes { ids, one_hot_st })
}

/// Retrieve the selected codebook rows: `one_hot_st · entries`. Hard forward
/// yields exact codebook rows; gradients flow through the soft selection.
pub fn retrieve<'t>(
    tape: &'t Tape,
    codes: &PredictedCodes<'t>,
    codebook: &Codebook,
) -> Result<Var<'t>> {
    let n = codebook.n();
    if codes.one_hot_st.shape().1 != n {
        return Err(Error::ShapeMismatch(format!(
            "selection width {} vs codebook size {n}",
            codes.one_hot_st.shape().1
        )));
    }
    if let Some(&bad) = codes.ids.iter().find(|&&i| i >= n) {
        return Err(Error::invalid_state(format!("code id {bad} out of range")));
    }
    let entries = tape.constant(codebook.entries.clone());
    Ok(codes.one_hot_st.matmul(entries))
}

/// Cross-entropy against the ground-truth code sequence: mean over frames of
/// `-log probs[t, e_t]`.
pub fn pred_loss<'t>(
    tape: &'t Tape,
    probs: Var<'t>,
    truth: &CodeSequence,
) -> Result<Var<'t>> {
    let (t, n) = probs.shape();
    if truth.ids.len() != t {
        return Err(Error::ShapeMismatch(format!(
            "{} frames vs {} ground-truth codes",
            t,
            truth.ids.len()
        )));
    }
    let mut pick = Array2::zeros((t, n));
    for (i, &e) in truth.ids.iter().enumerate() {
        if e >= n {
            return Err(Error::invalid_argument(format!("code id {e} out of range")));
        }
        pick[[i, e]] = 1.0;
    }
    Ok(probs
        .add_scalar(1e-300)
        .ln()
        .mul(tape.constant(pick))
        .sum_all()
        .neg()
        .scale(1.0 / t as f64))
}

/// Restoration loss `mean((Z_q - sg(Z_c))^2)`; gradients reach only the
/// predicted branch.
pub fn res_loss<'t>(z_q: Var<'t>, z_c: Var<'t>) -> Result<Var<'t>> {
    if z_q.shape() != z_c.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            z_q.shape(),
            z_c.shape()
        )));
    }
    Ok(nn::mse(z_q, z_c.stop_gradient()))
}

/// Finetune objective `L_ctc + lambda_pred L_pred + lambda_res L_res`.
pub fn finetune_loss<'t>(
    l_ctc: Var<'t>,
    l_pred: Var<'t>,
    l_res: Var<'t>,
    lambda_pred: f64,
    lambda_res: f64,
) -> Var<'t> {
    l_ctc.add(l_pred.scale(lambda_pred)).add(l_res.scale(lambda_res))
}
