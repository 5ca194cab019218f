//! Encoder backbone: convolutional feature encoder over raw waveforms, span
//! masking, Transformer contextualizer, gumbel product-quantized clean
//! targets, and the four-term contrastive pre-training objective.

use std::collections::BTreeSet;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BoundParams, ParamSet};

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub conv_channels: Vec<usize>,
    pub strides: Vec<usize>,
    pub kernels: Vec<usize>,
    pub transformer_layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    /// Product-quantizer groups and entries-per-group for the clean targets.
    pub vq_groups: usize,
    pub vq_entries: usize,
    pub use_positions: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig::desk_scale()
    }
}

impl EncoderConfig {
    /// CPU-minutes scale: 4 conv layers, D=64, 2 Transformer layers.
    pub fn desk_scale() -> Self {
        EncoderConfig {
            conv_channels: vec![64, 64, 64, 64],
            strides: vec![5, 4, 2, 2],
            kernels: vec![10, 8, 4, 4],
            transformer_layers: 2,
            embed_dim: 64,
            heads: 4,
            ffn_dim: 128,
            vq_groups: 2,
            vq_entries: 64,
            use_positions: true,
        }
    }

    /// Full-size configuration (selectable, not trained here).
    pub fn paper_scale() -> Self {
        EncoderConfig {
            conv_channels: vec![512; 7],
            strides: vec![5, 2, 2, 2, 2, 2, 2],
            kernels: vec![10, 3, 3, 3, 3, 2, 2],
            transformer_layers: 12,
            embed_dim: 768,
            heads: 12,
            ffn_dim: 2048,
            vq_groups: 2,
            vq_entries: 320,
            use_positions: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.strides.len() != self.kernels.len()
            || self.strides.len() != self.conv_channels.len()
        {
            return Err(Error::invalid_argument(
                "strides, kernels, conv_channels must have equal length",
            ));
        }
        if self.embed_dim % self.heads != 0 {
            return Err(Error::invalid_argument("embed_dim must divide by heads"));
        }
        if self.embed_dim % self.vq_groups != 0 {
            return Err(Error::invalid_argument("embed_dim must divide by vq_groups"));
        }
        if *self.conv_channels.last().unwrap() != self.embed_dim {
            return Err(Error::invalid_argument("last conv channel must equal embed_dim"));
        }
        Ok(())
    }

    pub fn frame_shift_ms(&self) -> f64 {
        let total: usize = self.strides.iter().product();
        total as f64 / crate::corpus::SAMPLE_RATE as f64 * 1000.0
    }

    /// Per-layer length recurrence `T_{l+1} = floor((T_l - k_l)/s_l) + 1`.
    pub fn output_len(&self, input_len: usize) -> Option<usize> {
        let mut t = input_len;
        for (&k, &s) in self.kernels.iter().zip(&self.strides) {
            if t < k {
                return None;
            }
            t = (t - k) / s + 1;
        }
        Some(t)
    }
}

#[derive(Debug, Clone)]
pub struct MaskPlan {
    pub start_prob: f64,
    pub span_len: usize,
    pub masked: BTreeSet<usize>,
}

impl MaskPlan {
    pub fn empty() -> Self {
        MaskPlan {
            start_prob: 0.0,
            span_len: 1,
            masked: BTreeSet::new(),
        }
    }

    pub fn indices(&self) -> Vec<usize> {
        self.masked.iter().copied().collect()
    }
}

/// Span masking: every frame is a span start with probability `p`; spans of
/// `span_len` frames are unioned and clipped to `[0, T)`.
pub fn sample_mask(t: usize, p: f64, span_len: usize, seed: u64) -> Result<MaskPlan> {
    if t == 0 {
        return Err(Error::invalid_argument("cannot mask an empty sequence"));
    }
    if !(0.0 < p && p < 1.0) {
        return Err(Error::invalid_argument("start probability must be in (0,1)"));
    }
    if span_len == 0 {
        return Err(Error::invalid_argument("span_len must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d61_736b);
    let mut masked = BTreeSet::new();
    for start in 0..t {
        if rng.gen::<f64>() < p {
            for i in start..(start + span_len).min(t) {
                masked.insert(i);
            }
        }
    }
    Ok(MaskPlan {
        start_prob: p,
        span_len,
        masked,
    })
}

/// Register all backbone parameters under `backbone.`.
pub fn init_params(params: &mut ParamSet, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) {
    let mut in_ch = 1;
    for (l, &out_ch) in cfg.conv_channels.iter().enumerate() {
        nn::conv1d_init(params, &format!("backbone.conv{l}"), in_ch, out_ch, cfg.kernels[l], rng);
        in_ch = out_ch;
    }
    nn::layer_norm_init(params, "backbone.feat_ln", cfg.embed_dim);
    params.insert("backbone.mask_emb", nn::randn(rng, 1, cfg.embed_dim, 0.1));
    for l in 0..cfg.transformer_layers {
        nn::transformer_block_init(
            params,
            &format!("backbone.transformer.{l}"),
            cfg.embed_dim,
            cfg.ffn_dim,
            rng,
        );
    }
    // product quantizer for clean targets
    let group_dim = cfg.embed_dim / cfg.vq_groups;
    nn::linear_init(
        params,
        "backbone.vq.proj",
        cfg.embed_dim,
        cfg.vq_groups * cfg.vq_entries,
        rng,
    );
    for g in 0..cfg.vq_groups {
        params.insert(
            format!("backbone.vq.codevecs{g}"),
            nn::randn(rng, cfg.vq_entries, group_dim, 0.5),
        );
    }
}

/// Convolutional feature encoder: waveform -> `T x D` frame features with a
/// final per-frame layer norm.
pub fn encode_features<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &EncoderConfig,
    waveform: &[f64],
) -> Result<Var<'t>> {
    if cfg.output_len(waveform.len()).is_none() {
        return Err(Error::invalid_argument(format!(
            "waveform of {} samples is shorter than the conv receptive field",
            waveform.len()
        )));
    }
    let input = Array2::from_shape_vec((waveform.len(), 1), waveform.to_vec())
        .expect("waveform reshape");
    let mut x = tape.constant(input);
    for l in 0..cfg.kernels.len() {
        x = nn::conv1d(
            bound,
            &format!("backbone.conv{l}"),
            x,
            cfg.kernels[l],
            cfg.strides[l],
            0,
        )
        .relu();
    }
    Ok(nn::layer_norm(bound, "backbone.feat_ln", x))
}

/// Replace masked frames with the shared learnable mask embedding, add
/// positions, and run the Transformer encoder.
pub fn contextualize<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &EncoderConfig,
    features: Var<'t>,
    mask: &MaskPlan,
) -> Result<Var<'t>> {
    let (t, d) = features.shape();
    if let Some(&max) = mask.masked.iter().next_back() {
        if max >= t {
            return Err(Error::invalid_argument("mask index out of range"));
        }
    }
    let mut keep = Array2::ones((t, 1));
    let mut drop = Array2::zeros((t, 1));
    for &i in &mask.masked {
        keep[[i, 0]] = 0.0;
        drop[[i, 0]] = 1.0;
    }
    let keep = tape.constant(keep);
    let drop = tape.constant(drop);
    let ones = tape.constant(Array2::ones((t, 1)));
    let mask_rows = ones.matmul(bound.get("backbone.mask_emb"));
    let mut x = features.mul_col(keep).add(mask_rows.mul_col(drop));
    if cfg.use_positions {
        x = x.add(tape.constant(nn::sinusoidal_positions(t, d)));
    }
    for l in 0..cfg.transformer_layers {
        x = nn::transformer_block(bound, &format!("backbone.transformer.{l}"), x, cfg.heads);
    }
    Ok(x)
}

/// Gumbel product quantization of the masked clean frames. Returns the
/// `T' x D` quantized targets plus per-group soft selection probabilities
/// (for the diversity loss).
pub fn quantize_targets<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &EncoderConfig,
    clean_features: Var<'t>,
    mask: &MaskPlan,
    temperature: f64,
    hard: bool,
    seed: u64,
) -> Result<(Var<'t>, Vec<Var<'t>>, Vec<usize>)> {
    if temperature <= 0.0 {
        return Err(Error::invalid_argument("gumbel temperature must be > 0"));
    }
    let indices = mask.indices();
    if indices.is_empty() {
        let d = clean_features.shape().1;
        let empty = tape.constant(Array2::zeros((0, d)));
        return Ok((empty, vec![], indices));
    }
    let masked = clean_features.gather_rows(&indices);
    let logits_all = nn::linear(bound, "backbone.vq.proj", masked);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7671);
    let mut group_vecs = Vec::with_capacity(cfg.vq_groups);
    let mut soft_probs = Vec::with_capacity(cfg.vq_groups);
    for g in 0..cfg.vq_groups {
        let logits = logits_all.slice_cols(g * cfg.vq_entries, (g + 1) * cfg.vq_entries);
        let soft = logits.softmax_rows();
        soft_probs.push(soft);
        let selection = gumbel_softmax(tape, logits, temperature, hard, &mut rng);
        group_vecs.push(selection.matmul(bound.get(&format!("backbone.vq.codevecs{g}"))));
    }
    Ok((Var::concat_cols(&group_vecs), soft_probs, indices))
}

/// Gumbel-softmax sample over rows of `logits`; with `hard` the forward pass
/// is one-hot (straight-through gradients).
pub fn gumbel_softmax<'t>(
    tape: &'t Tape,
    logits: Var<'t>,
    temperature: f64,
    hard: bool,
    rng: &mut ChaCha8Rng,
) -> Var<'t> {
    let (t, n) = logits.shape();
    let noise = Array2::from_shape_fn((t, n), |_| {
        let u: f64 = rng.gen_range(f64::EPSILON..1.0);
        -(-u.ln()).ln()
    });
    let soft = logits
        .add(tape.constant(noise))
        .scale(1.0 / temperature)
        .softmax_rows();
    if !hard {
        return soft;
    }
    let y = soft.value();
    let mut one_hot = Array2::zeros((t, n));
    for (i, row) in y.rows().into_iter().enumerate() {
        let argmax = row
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .map(|(j, _)| j)
            .unwrap();
        one_hot[[i, argmax]] = 1.0;
    }
    soft.straight_through(one_hot)
}

/// Contrastive loss over masked frames: the model must pick the true
/// quantized clean target among `K` distractors drawn from other masked
/// frames, under cosine similarity at temperature `kappa`.
pub fn contrastive_loss<'t>(
    tape: &'t Tape,
    z_masked: Var<'t>,
    targets: Var<'t>,
    k: usize,
    kappa: f64,
    seed: u64,
) -> Result<Var<'t>> {
    let (t_len, _) = z_masked.shape();
    if targets.shape().0 != t_len {
        return Err(Error::ShapeMismatch("masked frames vs targets".into()));
    }
    if t_len < 2 {
        return Err(Error::invalid_argument("need at least 2 masked frames"));
    }
    let k = k.min(t_len - 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6e74);
    let mut total: Option<Var<'t>> = None;
    for t in 0..t_len {
        // positive first, then K distractors without replacement
        let mut pool: Vec<usize> = (0..t_len).filter(|&i| i != t).collect();
        let mut ids = vec![t];
        for _ in 0..k {
            let pick = rng.gen_range(0..pool.len());
            ids.push(pool.swap_remove(pick));
        }
        let cand = targets.gather_rows(&ids);
        let z_t = z_masked.slice_rows(t, t + 1);
        let dots = cand.matmul(z_t.transpose());
        let cand_norms = cand.mul(cand).sum_cols().sqrt().add_scalar(1e-8);
        let z_norm = z_t.mul(z_t).sum_all().sqrt().add_scalar(1e-8);
        let inv_z = tape.scalar(1.0).div(z_norm);
        let sims = dots.div(cand_norms).mul_scalar_var(inv_z);
        let log_probs = sims.scale(1.0 / kappa).transpose().log_softmax_rows();
        let mut pick_positive = Array2::zeros((1, k + 1));
        pick_positive[[0, 0]] = 1.0;
        let loss_t = log_probs
            .mul(tape.constant(pick_positive))
            .sum_all()
            .neg();
        total = Some(match total {
            Some(acc) => acc.add(loss_t),
            None => loss_t,
        });
    }
    Ok(total.unwrap().scale(1.0 / t_len as f64))
}

/// Diversity loss `(GV - sum_g exp(H(p_bar_g))) / (GV)` over the quantizer's
/// batch-averaged soft selections.
pub fn diversity_loss<'t>(tape: &'t Tape, soft_probs: &[Var<'t>]) -> Var<'t> {
    assert!(!soft_probs.is_empty());
    let g = soft_probs.len() as f64;
    let v = soft_probs[0].shape().1 as f64;
    let mut acc: Option<Var<'t>> = None;
    for &probs in soft_probs {
        let t = probs.shape().0 as f64;
        let p_bar = probs.sum_rows().scale(1.0 / t);
        let entropy = p_bar
            .mul(p_bar.add_scalar(1e-12).ln())
            .sum_all()
            .neg();
        let term = tape.scalar(v).sub(entropy.exp());
        acc = Some(match acc {
            Some(a) => a.add(term),
            None => term,
        });
    }
    acc.unwrap().scale(1.0 / (g * v))
}

/// L2 penalty over feature-encoder outputs.
pub fn feature_penalty(features: Var<'_>) -> Var<'_> {
    features.square().mean_all()
}

/// Mean over frames of the squared Euclidean distance between noisy and
/// clean features. Computed over all frames; symmetric.
pub fn consistency_loss<'t>(f_n: Var<'t>, f_c: Var<'t>) -> Result<Var<'t>> {
    if f_n.shape() != f_c.shape() {
        return Err(Error::ShapeMismatch(format!(
            "{:?} vs {:?}",
            f_n.shape(),
            f_c.shape()
        )));
    }
    Ok(f_n.sub(f_c).square().sum_cols().mean_all())
}

/// Weighted pre-training objective `L_m + alpha L_d + beta_w L_f + gamma L_c`.
pub fn ew2_loss<'t>(
    l_m: Var<'t>,
    l_d: Var<'t>,
    l_f: Var<'t>,
    l_c: Var<'t>,
    alpha: f64,
    beta_w: f64,
    gamma: f64,
) -> Var<'t> {
    l_m.add(l_d.scale(alpha))
        .add(l_f.scale(beta_w))
        .add(l_c.scale(gamma))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainHyper {
    pub mask_prob: f64,
    pub mask_span: usize,
    pub distractors: usize,
    pub kappa: f64,
    pub alpha: f64,
    pub beta_w: f64,
    pub gamma: f64,
    pub gumbel_temp_start: f64,
    pub gumbel_temp_end: f64,
}

impl Default for PretrainHyper {
    fn default() -> Self {
        PretrainHyper {
            mask_prob: 0.065,
            mask_span: 10,
            distractors: 100,
            kappa: 0.1,
            alpha: 0.1,
            beta_w: 10.0,
            gamma: 1.0,
            gumbel_temp_start: 2.0,
            gumbel_temp_end: 0.5,
        }
    }
}

impl PretrainHyper {
    /// Linear anneal of the quantizer temperature over training progress in
    /// `[0, 1]`.
    pub fn gumbel_temperature(&self, progress: f64) -> f64 {
        let p = progress.clamp(0.0, 1.0);
        self.gumbel_temp_start + (self.gumbel_temp_end - self.gumbel_temp_start) * p
    }
}

/// Full pre-training loss for one (clean, noisy) pair. Returns the scalar
/// loss variable; masking is deterministic given `seed` and retried with a
/// seed offset until non-empty.
#[allow(clippy::too_many_arguments)]
pub fn pretrain_loss<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &EncoderConfig,
    hyper: &PretrainHyper,
    clean: &[f64],
    noisy: &[f64],
    progress: f64,
    seed: u64,
) -> Result<Var<'t>> {
    let f_n = encode_features(tape, bound, cfg, noisy)?;
    let f_c = encode_features(tape, bound, cfg, clean)?;
    let t = f_n.shape().0;
    let mut mask = MaskPlan::empty();
    for retry in 0..64 {
        mask = sample_mask(t, hyper.mask_prob, hyper.mask_span, seed.wrapping_add(retry))?;
        if mask.masked.len() >= 2 {
            break;
        }
    }
    if mask.masked.len() < 2 {
        return Err(Error::invalid_state("failed to sample a non-trivial mask"));
    }
    let z_n = contextualize(tape, bound, cfg, f_n, &mask)?;
    let temp = hyper.gumbel_temperature(progress);
    let (targets, soft_probs, indices) =
        quantize_targets(tape, bound, cfg, f_c, &mask, temp, true, seed)?;
    let z_masked = z_n.gather_rows(&indices);
    let l_m = contrastive_loss(tape, z_masked, targets, hyper.distractors, hyper.kappa, seed)?;
    let l_d = diversity_loss(tape, &soft_probs);
    let l_f = feature_penalty(f_n).add(feature_penalty(f_c)).scale(0.5);
    let l_c = consistency_loss(f_n, f_c)?;
    Ok(ew2_loss(l_m, l_d, l_f, l_c, hyper.alpha, hyper.beta_w, hyper.gamma))
}

/// Encode a waveform to its contextual representation with no masking.
pub fn represent<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    cfg: &EncoderConfig,
    waveform: &[f64],
) -> Result<Var<'t>> {
    let features = encode_features(tape, bound, cfg, waveform)?;
    contextualize(tape, bound, cfg, features, &MaskPlan::empty())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn toy_cfg() -> EncoderConfig {
        EncoderConfig {
            conv_channels: vec![8, 8],
            strides: vec![5, 4],
            kernels: vec![10, 8],
            transformer_layers: 1,
            embed_dim: 8,
            heads: 2,
            ffn_dim: 16,
            vq_groups: 2,
            vq_entries: 6,
            use_positions: true,
        }
    }

    fn setup(cfg: &EncoderConfig, seed: u64) -> ParamSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        init_params(&mut params, cfg, &mut rng);
        params
    }

    #[test]
    fn length_recurrence_paper_scale() {
        let cfg = EncoderConfig::paper_scale();
        // iterate floor((L-k)/s)+1 through (10,5),(3,2)x4,(2,2)x2 by hand
        let mut t = 16000usize;
        for (k, s) in [(10, 5), (3, 2), (3, 2), (3, 2), (3, 2), (2, 2), (2, 2)] {
            t = (t - k) / s + 1;
        }
        assert_eq!(cfg.output_len(16000), Some(t));
        assert!((cfg.frame_shift_ms() - 20.0).abs() < 1e-9);
    }

    #[test]
    fn length_recurrence_matches_actual_output_on_random_configs() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..50 {
            let layers = rng.gen_range(1..4);
            let kernels: Vec<usize> = (0..layers).map(|_| rng.gen_range(2..8)).collect();
            let strides: Vec<usize> = (0..layers).map(|_| rng.gen_range(1..4)).collect();
            let cfg = EncoderConfig {
                conv_channels: vec![4; layers],
                strides,
                kernels,
                transformer_layers: 0,
                embed_dim: 4,
                heads: 1,
                ffn_dim: 4,
                vq_groups: 2,
                vq_entries: 4,
                use_positions: false,
            };
            let len = rng.gen_range(50..300);
            let params = setup(&cfg, 1);
            let tape = Tape::new();
            let bound = params.bind(&tape);
            let wave: Vec<f64> = (0..len).map(|i| (i as f64 * 0.1).sin()).collect();
            match cfg.output_len(len) {
                Some(t_expect) => {
                    let f = encode_features(&tape, &bound, &cfg, &wave).unwrap();
                    assert_eq!(f.shape().0, t_expect);
                }
                None => {
                    assert!(encode_features(&tape, &bound, &cfg, &wave).is_err());
                }
            }
        }
    }

    #[test]
    fn silence_encodes_to_finite_values() {
        let cfg = toy_cfg();
        let params = setup(&cfg, 2);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let f = encode_features(&tape, &bound, &cfg, &vec![0.0; 400]).unwrap();
        assert!(f.value().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn too_short_waveform_rejected() {
        let cfg = toy_cfg();
        let params = setup(&cfg, 2);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        assert!(matches!(
            encode_features(&tape, &bound, &cfg, &[0.1; 5]),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn mask_determinism_and_range() {
        let a = sample_mask(50, 0.2, 5, 9).unwrap();
        let b = sample_mask(50, 0.2, 5, 9).unwrap();
        assert_eq!(a.masked, b.masked);
        assert!(a.masked.iter().all(|&i| i < 50));
        assert!(sample_mask(0, 0.2, 5, 9).is_err());
        assert!(sample_mask(10, 0.0, 5, 9).is_err());
        assert!(sample_mask(10, 1.0, 5, 9).is_err());
    }

    #[test]
    fn mask_saturates_at_high_probability_and_full_span() {
        let t = 20;
        let plan = sample_mask(t, 0.9999, t, 123).unwrap();
        assert_eq!(plan.masked.len(), t);
    }

    /// Monte-Carlo oracle: the masked fraction must match the analytic union
    /// coverage 1 - (1-p)^(number of starts covering the frame).
    #[test]
    fn mask_fraction_matches_union_process() {
        let (t, p, span) = (100usize, 0.065f64, 10usize);
        let analytic: f64 = (0..t)
            .map(|i| {
                let starts = i - i.saturating_sub(span - 1) + 1;
                1.0 - (1.0 - p).powi(starts as i32)
            })
            .sum::<f64>()
            / t as f64;
        for seed_base in [0u64, 500_000] {
            let mean: f64 = (0..10_000)
                .map(|s| sample_mask(t, p, span, seed_base + s).unwrap().masked.len() as f64)
                .sum::<f64>()
                / (10_000.0 * t as f64);
            assert!(
                (mean - analytic).abs() < 0.02,
                "mc {mean} vs analytic {analytic}"
            );
        }
    }

    #[test]
    fn contextualize_empty_mask_preserves_shape() {
        let cfg = toy_cfg();
        let params = setup(&cfg, 3);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let f = tape.constant(nn::randn(&mut ChaCha8Rng::seed_from_u64(1), 7, 8, 1.0));
        let z = contextualize(&tape, &bound, &cfg, f, &MaskPlan::empty()).unwrap();
        assert_eq!(z.shape(), (7, 8));
    }

    #[test]
    fn masked_positions_share_one_embedding() {
        let cfg = toy_cfg();
        let params = setup(&cfg, 3);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let a = nn::randn(&mut rng, 6, 8, 1.0);
        let mut b = a.clone();
        // differ only at masked rows
        b.row_mut(2).fill(9.0);
        b.row_mut(3).fill(-9.0);
        let mask = MaskPlan {
            start_prob: 0.1,
            span_len: 2,
            masked: [2usize, 3].into_iter().collect(),
        };
        let za = contextualize(&tape, &bound, &cfg, tape.constant(a), &mask).unwrap();
        let zb = contextualize(&tape, &bound, &cfg, tape.constant(b), &mask).unwrap();
        let diff = (&za.value() - &zb.value()).mapv(f64::abs).sum();
        assert!(diff < 1e-12);
    }

    #[test]
    fn transformer_is_permutation_equivariant_without_positions() {
        let mut cfg = toy_cfg();
        cfg.use_positions = false;
        let params = setup(&cfg, 4);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let x = nn::randn(&mut ChaCha8Rng::seed_from_u64(6), 5, 8, 1.0);
        let perm = [3usize, 0, 4, 1, 2];
        let mut xp = Array2::zeros((5, 8));
        for (i, &j) in perm.iter().enumerate() {
            xp.row_mut(i).assign(&x.row(j));
        }
        let z = contextualize(&tape, &bound, &cfg, tape.constant(x), &MaskPlan::empty())
            .unwrap()
            .value();
        let zp = contextualize(&tape, &bound, &cfg, tape.constant(xp), &MaskPlan::empty())
            .unwrap()
            .value();
        for (i, &j) in perm.iter().enumerate() {
            let diff = (&zp.row(i) - &z.row(j)).mapv(f64::abs).sum();
            assert!(diff < 1e-9, "row {i} not a permutation of row {j}");
        }
    }

    #[test]
    fn quantize_targets_cardinality_and_dimension() {
        let cfg = toy_cfg();
        let params = setup(&cfg, 7);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let f = tape.constant(nn::randn(&mut ChaCha8Rng::seed_from_u64(2), 9, 8, 1.0));
        let mask = MaskPlan {
            start_prob: 0.1,
            span_len: 1,
            masked: [0usize, 2, 4, 6, 8].into_iter().collect(),
        };
        let (q, probs, idx) =
            quantize_targets(&tape, &bound, &cfg, f, &mask, 1.0, true, 3).unwrap();
        assert_eq!(q.shape(), (5, 8)); // T' x D via group concatenation
        assert_eq!(probs.len(), 2);
        assert_eq!(idx, vec![0, 2, 4, 6, 8]);
        // empty mask allowed at eval
        let (q0, _, _) =
            quantize_targets(&tape, &bound, &cfg, f, &MaskPlan::empty(), 1.0, true, 3).unwrap();
        assert_eq!(q0.shape(), (0, 8));
    }

    #[test]
    fn low_temperature_gumbel_selection_equals_argmax() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        // dominant margin (50 nats) so gumbel noise cannot flip the winner
        let logits = Array2::from_shape_fn((64, 6), |(i, j)| if j == i % 6 { 50.0 } else { 0.0 });
        let l = tape.constant(logits.clone());
        let sel = gumbel_softmax(&tape, l, 1e-3, true, &mut rng).value();
        for i in 0..64 {
            assert_eq!(sel[[i, i % 6]], 1.0, "row {i} did not pick the dominant logit");
            assert_eq!(sel.row(i).sum(), 1.0);
        }
    }

    #[test]
    fn contrastive_loss_uniform_similarities_is_ln_k_plus_1() {
        let tape = Tape::new();
        // identical target rows -> every candidate has identical similarity
        let z = tape.constant(Array2::from_elem((12, 4), 0.5));
        let q = tape.constant(Array2::from_elem((12, 4), 1.0));
        for k in [2usize, 5, 100] {
            let loss = contrastive_loss(&tape, z, q, k, 0.1, 0).unwrap();
            let expect = ((k.min(11) + 1) as f64).ln();
            assert!((loss.scalar_value() - expect).abs() < 1e-9);
        }
        // K=100 with enough frames: ln(101)
        let z = tape.constant(Array2::from_elem((120, 4), 0.5));
        let q = tape.constant(Array2::from_elem((120, 4), 1.0));
        let loss = contrastive_loss(&tape, z, q, 100, 0.1, 0).unwrap();
        assert!((loss.scalar_value() - 101f64.ln()).abs() < 1e-9);
        assert!((101f64.ln() - 4.615).abs() < 1e-3);
    }

    #[test]
    fn contrastive_loss_saturates_when_positive_dominates() {
        let tape = Tape::new();
        let z2 = tape.constant(ndarray::array![[1.0, 0.0], [1.0, 0.0]]);
        let q2 = tape.constant(ndarray::array![[1.0, 0.0], [-1.0, 0.0]]);
        let l2 = contrastive_loss(&tape, z2, q2, 1, 0.1, 0).unwrap();
        // frame 0: positive sim 1 vs distractor -1 at kappa=0.1 -> ~0 loss
        // frame 1: reversed -> ~20; mean ~10. Check frame-0-style saturation
        // by isolating it: loss for a frame whose positive dominates is tiny.
        // frame 0: positive sim ~1 vs distractor ~-1 at kappa=0.1 -> ~0 loss;
        // frame 1: reversed -> ~20. Mean ~10, so the frame-0 residual is tiny.
        let per_frame0 = l2.scalar_value() - 10.0;
        assert!(per_frame0.abs() < 1e-6, "saturated softmax per-frame loss: {per_frame0}");
    }

    /// Independent scalar-loop re-implementation of the contrastive objective
    /// for a small random case.
    #[test]
    fn contrastive_loss_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let z = nn::randn(&mut rng, 3, 4, 1.0);
        let q = nn::randn(&mut rng, 3, 4, 1.0);
        let (k, kappa, seed) = (2usize, 0.1f64, 5u64);
        let tape = Tape::new();
        let loss = contrastive_loss(
            &tape,
            tape.constant(z.clone()),
            tape.constant(q.clone()),
            k,
            kappa,
            seed,
        )
        .unwrap()
        .scalar_value();

        // oracle: replay the same candidate draw, then scalar math
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x636f_6e74);
        let cos = |a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>| {
            let dot: f64 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
            let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-8;
            let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt() + 1e-8;
            dot / (na * nb)
        };
        let mut expect = 0.0;
        for t in 0..3usize {
            let mut pool: Vec<usize> = (0..3).filter(|&i| i != t).collect();
            let mut ids = vec![t];
            for _ in 0..k {
                let pick = rng.gen_range(0..pool.len());
                ids.push(pool.swap_remove(pick));
            }
            let sims: Vec<f64> = ids.iter().map(|&j| cos(z.row(t), q.row(j)) / kappa).collect();
            let m = sims.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + sims.iter().map(|s| (s - m).exp()).sum::<f64>().ln();
            expect += lse - sims[0];
        }
        expect /= 3.0;
        assert!((loss - expect).abs() < 1e-9, "{loss} vs {expect}");
    }

    #[test]
    fn diversity_loss_limits() {
        let tape = Tape::new();
        let v = 8;
        // uniform -> 0
        let uniform = tape.constant(Array2::from_elem((10, v), 1.0 / v as f64));
        let l = diversity_loss(&tape, &[uniform, uniform]);
        assert!(l.scalar_value().abs() < 1e-6);
        // one-hot for every group -> (V-1)/V
        let mut one_hot = Array2::zeros((10, v));
        for i in 0..10 {
            one_hot[[i, 3]] = 1.0;
        }
        let oh = tape.constant(one_hot);
        let l = diversity_loss(&tape, &[oh, oh]);
        assert!((l.scalar_value() - (v as f64 - 1.0) / v as f64).abs() < 1e-6);
    }

    #[test]
    fn consistency_loss_definition_and_symmetry() {
        let tape = Tape::new();
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let a = tape.constant(nn::randn(&mut rng, 4, 6, 1.0));
        let b = tape.constant(nn::randn(&mut rng, 4, 6, 1.0));
        assert_eq!(consistency_loss(a, a).unwrap().scalar_value(), 0.0);
        let lab = consistency_loss(a, b).unwrap().scalar_value();
        let lba = consistency_loss(b, a).unwrap().scalar_value();
        assert!((lab - lba).abs() < 1e-12);
        // all-ones difference with D dims -> D
        let ones = tape.constant(Array2::ones((4, 6)));
        let zeros = tape.constant(Array2::zeros((4, 6)));
        assert!((consistency_loss(ones, zeros).unwrap().scalar_value() - 6.0).abs() < 1e-12);
        let bad = tape.constant(Array2::zeros((3, 6)));
        assert!(consistency_loss(a, bad).is_err());
    }

    #[test]
    fn ew2_loss_weighted_sum() {
        let tape = Tape::new();
        let one = tape.scalar(1.0);
        let zero = tape.scalar(0.0);
        assert_eq!(ew2_loss(one, zero, zero, zero, 0.1, 10.0, 1.0).scalar_value(), 1.0);
        let l = ew2_loss(one, one, one, one, 0.1, 10.0, 1.0).scalar_value();
        assert!((l - 12.1).abs() < 1e-12);
    }

    /// Finite-difference gradient check of the full pre-training objective on
    /// a random parameter subset at toy dims.
    #[test]
    fn pretrain_loss_gradient_matches_finite_differences() {
        let cfg = toy_cfg();
        let params = setup(&cfg, 8);
        let clean: Vec<f64> = (0..400).map(|i| (i as f64 * 0.05).sin() * 0.5).collect();
        let noisy: Vec<f64> = clean.iter().enumerate().map(|(i, c)| c + 0.1 * (i as f64 * 0.21).cos()).collect();
        // soft VQ so the loss is differentiable where we probe
        fn build_loss<'t>(
            tape: &'t Tape,
            bound: &BoundParams<'t>,
            cfg: &EncoderConfig,
            clean: &[f64],
            noisy: &[f64],
        ) -> Var<'t> {
            let f_n = encode_features(tape, bound, cfg, noisy).unwrap();
            let f_c = encode_features(tape, bound, cfg, clean).unwrap();
            let t = f_n.shape().0;
            let mask = sample_mask(t, 0.3, 3, 5).unwrap();
            let z_n = contextualize(tape, bound, cfg, f_n, &mask).unwrap();
            let (targets, probs, idx) =
                quantize_targets(tape, bound, cfg, f_c, &mask, 1.0, false, 5).unwrap();
            let z_masked = z_n.gather_rows(&idx);
            let l_m = contrastive_loss(tape, z_masked, targets, 3, 0.1, 5).unwrap();
            let l_d = diversity_loss(tape, &probs);
            let l_f = feature_penalty(f_n);
            let l_c = consistency_loss(f_n, f_c).unwrap();
            ew2_loss(l_m, l_d, l_f, l_c, 0.1, 10.0, 1.0)
        }
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let loss = build_loss(&tape, &bound, &cfg, &clean, &noisy);
        let grads = tape.backward(loss);
        let by_name = bound.grads(&grads);
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let names: Vec<String> = params.names().map(String::from).collect();
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..6 {
            let name = &names[rng.gen_range(0..names.len())];
            let arr = params.get(name).clone();
            let i = rng.gen_range(0..arr.nrows());
            let j = rng.gen_range(0..arr.ncols());
            let perturb = |delta: f64| {
                let mut p2 = params.clone();
                p2.get_mut(name)[[i, j]] += delta;
                let t2 = Tape::new();
                let b2 = p2.bind(&t2);
                build_loss(&t2, &b2, &cfg, &clean, &noisy).scalar_value()
            };
            let num = (perturb(h) - perturb(-h)) / (2.0 * h);
            let ana = by_name[name][[i, j]];
            let denom = ana.abs().max(num.abs());
            if denom < 1e-7 {
                continue;
            }
            assert!(
                (ana - num).abs() / denom < 1e-3,
                "{name}[{i},{j}]: analytic {ana} vs numeric {num}"
            );
            checked += 1;
        }
        assert!(checked >= 3, "too few informative probes");
    }
}
