//! Training orchestration: the three-stage recipe (backbone pre-train ->
//! codebook pre-train -> finetune), learning-rate schedule, augmentation,
//! checkpointing, evaluation, the ablation runner, and feature export.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::asr_eval::{self, ConditionMetrics, MetricsReport, Vocab};
use crate::autodiff::{Tape, Var};
use crate::backbone::{self, EncoderConfig, MaskPlan, PretrainHyper};
use crate::codebook::{self, CodeSequence, Codebook};
use crate::corpus::{self, CorpusConfig, Manifest, ManifestEntry, NoisyPair, Split};
use crate::error::{Error, Result};
use crate::iffnet::{self, FusionKind, IFFConfig};
use crate::nn::{self, Adam, BoundParams, ParamSet, TensorData};
use crate::predictor::{self, PredictorConfig};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CodebookConfig {
    pub entries: usize,
    pub beta_commit: f64,
    /// Run the codebook pre-training stage (ablation: no -> random codebook).
    pub pretrained: bool,
    /// Keep the codebook fixed during finetuning.
    pub frozen: bool,
    /// Dead-code reset cadence in steps during codebook pre-training.
    pub reset_interval: usize,
}

impl Default for CodebookConfig {
    fn default() -> Self {
        CodebookConfig {
            entries: 64,
            beta_commit: codebook::DEFAULT_BETA_COMMIT,
            pretrained: true,
            frozen: true,
            reset_interval: 100,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub kind: FusionKind,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig { kind: FusionKind::Iffnet }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentSpec {
    pub time_mask_prob: f64,
    pub time_span: usize,
    pub freq_mask_prob: f64,
    pub freq_span: usize,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec {
            time_mask_prob: 0.065,
            time_span: 10,
            freq_mask_prob: 0.05,
            freq_span: 8,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub backbone_steps: usize,
    pub codebook_steps: usize,
    pub finetune_steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    pub allow_random_codebook: bool,
    pub lambda_pred: f64,
    pub lambda_res: f64,
    pub augment: AugmentSpec,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            backbone_steps: 2000,
            codebook_steps: 1000,
            finetune_steps: 2000,
            peak_lr: 5e-4,
            warmup_frac: 0.2,
            batch_size: 1,
            seed: 7,
            freeze_encoder: false,
            allow_random_codebook: false,
            lambda_pred: predictor::DEFAULT_LAMBDA_PRED,
            lambda_res: predictor::DEFAULT_LAMBDA_RES,
            augment: AugmentSpec::default(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// SNR grid for code-accuracy remixing.
    pub snr_grid_db: Vec<f64>,
    /// Cap on evaluated utterances per split (0 = all).
    pub max_utts: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            max_utts: 0,
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub corpus: CorpusConfig,
    pub backbone: EncoderConfig,
    pub pretrain: PretrainHyper,
    pub codebook: CodebookConfig,
    pub predictor: PredictorConfig,
    pub iffnet: IFFConfig,
    pub fusion: FusionConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        match path.extension().and_then(|e| e.to_str()) {
            Some("json") => {
                serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))
            }
            _ => toml::from_str(&text).map_err(|e| Error::Config(e.to_string())),
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        self.predictor.validate(self.backbone.embed_dim)?;
        self.iffnet.validate(self.backbone.embed_dim)?;
        if !(0.0 < self.train.warmup_frac && self.train.warmup_frac < 1.0) {
            return Err(Error::Config("train.warmup_frac must be in (0,1)".into()));
        }
        if self.codebook.entries < 2 {
            return Err(Error::Config("codebook.entries must be >= 2".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Stages and schedule
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    PretrainBackbone,
    PretrainCodebook,
    Finetune,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::PretrainBackbone => "pretrain_backbone",
            Stage::PretrainCodebook => "pretrain_codebook",
            Stage::Finetune => "finetune",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: Stage,
    pub steps: usize,
    pub peak_lr: f64,
    pub warmup_frac: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze: BTreeSet<String>,
}

/// Derive the per-stage settings from the pipeline config. Finetuning
/// freezes the codebook unless explicitly released.
pub fn stage_config(cfg: &PipelineConfig, stage: Stage) -> StageConfig {
    let mut freeze = BTreeSet::new();
    let steps = match stage {
        Stage::PretrainBackbone => cfg.train.backbone_steps,
        Stage::PretrainCodebook => {
            freeze.insert("encoder".to_string());
            cfg.train.codebook_steps
        }
        Stage::Finetune => {
            if cfg.codebook.frozen {
                freeze.insert("codebook".to_string());
            }
            if cfg.train.freeze_encoder {
                freeze.insert("encoder".to_string());
            }
            cfg.train.finetune_steps
        }
    };
    StageConfig {
        stage,
        steps,
        peak_lr: cfg.train.peak_lr,
        warmup_frac: cfg.train.warmup_frac,
        batch_size: cfg.train.batch_size,
        seed: cfg.train.seed ^ (stage as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15),
        freeze,
    }
}

/// Linear warmup to `peak_lr` over `warmup_frac * total` steps, then linear
/// (power-1 polynomial) decay to zero at `total`.
pub fn schedule_lr(step: usize, total: usize, peak_lr: f64, warmup_frac: f64) -> Result<f64> {
    if step > total {
        return Err(Error::invalid_argument("step past the end of the schedule"));
    }
    if !(0.0 < warmup_frac && warmup_frac < 1.0) {
        return Err(Error::invalid_argument("warmup_frac must be in (0,1)"));
    }
    if total == 0 {
        return Ok(0.0);
    }
    let warm = warmup_frac * total as f64;
    let s = step as f64;
    Ok(if s <= warm {
        peak_lr * s / warm
    } else {
        peak_lr * (total as f64 - s) / (total as f64 - warm)
    })
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default)]
pub struct AugmentPlan {
    pub time_rows: BTreeSet<usize>,
    pub freq_cols: BTreeSet<usize>,
}

impl AugmentPlan {
    pub fn is_empty(&self) -> bool {
        self.time_rows.is_empty() && self.freq_cols.is_empty()
    }
}

/// Sample the time/frequency mask unions for a `t x d` feature matrix.
pub fn augment_plan(t: usize, d: usize, spec: &AugmentSpec, seed: u64) -> Result<AugmentPlan> {
    for p in [spec.time_mask_prob, spec.freq_mask_prob] {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::invalid_argument("mask probabilities must be in [0,1]"));
        }
    }
    if spec.time_mask_prob > 0.0 && (spec.time_span == 0 || spec.time_span > t) {
        return Err(Error::invalid_argument("time_span must be in [1, T]"));
    }
    if spec.freq_mask_prob > 0.0 && (spec.freq_span == 0 || spec.freq_span > d) {
        return Err(Error::invalid_argument("freq_span must be in [1, D]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6175_676d);
    let mut plan = AugmentPlan::default();
    for start in 0..t {
        if rng.gen::<f64>() < spec.time_mask_prob {
            for i in start..(start + spec.time_span).min(t) {
                plan.time_rows.insert(i);
            }
        }
    }
    for start in 0..d {
        if rng.gen::<f64>() < spec.freq_mask_prob {
            for i in start..(start + spec.freq_span).min(d) {
                plan.freq_cols.insert(i);
            }
        }
    }
    Ok(plan)
}

/// Apply a mask plan to frame features: masked time frames are replaced with
/// the shared mask embedding, then masked channels are zeroed.
pub fn apply_augment<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    features: Var<'t>,
    plan: &AugmentPlan,
) -> Var<'t> {
    let (t, d) = features.shape();
    let mut x = features;
    if !plan.time_rows.is_empty() {
        let mut keep = Array2::ones((t, 1));
        let mut drop = Array2::zeros((t, 1));
        for &i in &plan.time_rows {
            keep[[i, 0]] = 0.0;
            drop[[i, 0]] = 1.0;
        }
        let ones = tape.constant(Array2::ones((t, 1)));
        let mask_rows = ones.matmul(bound.get("backbone.mask_emb"));
        x = x
            .mul_col(tape.constant(keep))
            .add(mask_rows.mul_col(tape.constant(drop)));
    }
    if !plan.freq_cols.is_empty() {
        let mut keep = Array2::ones((1, d));
        for &j in &plan.freq_cols {
            keep[[0, j]] = 0.0;
        }
        x = x.mul_row(tape.constant(keep));
    }
    x
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub stage: Stage,
    pub step: usize,
    pub completed_stages: Vec<Stage>,
    pub params: IndexMap<String, TensorData>,
    pub adam: Adam,
    pub rng: ChaCha8Rng,
    pub config: PipelineConfig,
    pub loss_curve: Vec<f64>,
    /// CTC term alone, recorded during finetuning (empty otherwise).
    pub ctc_curve: Vec<f64>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        let json = serde_json::to_string(self).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn param_set(&self) -> ParamSet {
        ParamSet::from_data(&self.params)
    }

    pub fn has_completed(&self, stage: Stage) -> bool {
        self.completed_stages.contains(&stage)
    }
}

// ---------------------------------------------------------------------------
// Parameter initialization
// ---------------------------------------------------------------------------

fn component_rng(seed: u64, component: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in component.bytes() {
        h = (h ^ b as u64).wrapping_mul(0x1000_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(seed ^ h)
}

fn init_backbone_params(cfg: &PipelineConfig) -> ParamSet {
    let mut params = ParamSet::new();
    let mut rng = component_rng(cfg.train.seed, "backbone");
    backbone::init_params(&mut params, &cfg.backbone, &mut rng);
    params
}

/// Add the finetune-time parameter groups (predictor, fusion, CTC head, and
/// a random codebook if none was pre-trained). Each component draws from its
/// own seeded stream so earlier checkpoints stay reusable across ablations.
fn ensure_finetune_params(params: &mut ParamSet, cfg: &PipelineConfig) {
    let d = cfg.backbone.embed_dim;
    if !params.contains("predictor.proj.w")
        && cfg.predictor.kind != predictor::PredictorKind::NnMatching
    {
        let mut rng = component_rng(cfg.train.seed, "predictor");
        predictor::init_params(&mut params_scope(params), &cfg.predictor, d, cfg.codebook.entries, &mut rng);
    }
    match cfg.fusion.kind {
        FusionKind::None => {}
        FusionKind::Concat => {
            if !params.contains("fusion.concat.w") {
                let mut rng = component_rng(cfg.train.seed, "fusion");
                iffnet::init_params(&mut params_scope(params), cfg.fusion.kind, &cfg.iffnet, d, &mut rng);
            }
        }
        FusionKind::Iffnet => {
            if !params.contains("iffnet.enc.w") {
                let mut rng = component_rng(cfg.train.seed, "fusion");
                iffnet::init_params(&mut params_scope(params), cfg.fusion.kind, &cfg.iffnet, d, &mut rng);
            }
        }
    }
    if !params.contains("ctc.out.w") {
        let mut rng = component_rng(cfg.train.seed, "ctc");
        nn::linear_init(params, "ctc.out", d, Vocab::default().size(), &mut rng);
    }
    if !params.contains("codebook.entries") {
        let mut rng = component_rng(cfg.train.seed, "codebook");
        params.insert("codebook.entries", nn::randn(&mut rng, cfg.codebook.entries, d, 0.5));
    }
}

// helper so the borrow in the match arms above reads cleanly
fn params_scope(params: &mut ParamSet) -> &mut ParamSet {
    params
}

// ---------------------------------------------------------------------------
// Forward passes shared by training and evaluation
// ---------------------------------------------------------------------------

struct FinetuneGraph<'t> {
    loss: Var<'t>,
    l_ctc: f64,
    truth: CodeSequence,
    pred_ids: Vec<usize>,
}

#[allow(clippy::too_many_arguments)]
fn finetune_graph<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ParamSet,
    cfg: &PipelineConfig,
    vocab: &Vocab,
    pair: &NoisyPair,
    step_seed: u64,
    train: bool,
) -> Result<FinetuneGraph<'t>> {
    let f_n = backbone::encode_features(tape, bound, &cfg.backbone, &pair.noisy_samples)?;
    let f_n = if train {
        let (t, d) = f_n.shape();
        let plan = augment_plan(t, d, &cfg.train.augment, step_seed)?;
        apply_augment(tape, bound, f_n, &plan)
    } else {
        f_n
    };
    let z_n = backbone::contextualize(tape, bound, &cfg.backbone, f_n, &MaskPlan::empty())?;
    let z_c = backbone::represent(tape, bound, &cfg.backbone, &pair.clean.samples)?;

    let entries_value = params.get("codebook.entries").clone();
    let cb = Codebook::new(entries_value)?;
    let (_, truth) = codebook::nn_lookup(&z_c.value(), &cb)?;

    let logits = predictor::predict_logits(tape, bound, &cfg.predictor, z_n, &cb)?;
    let probs = logits.softmax_rows();
    let l_pred = predictor::pred_loss(tape, probs, &truth)?;

    let (codes, pred_ids) = if train {
        let codes = predictor::gumbel_select(
            tape,
            logits,
            cfg.predictor.tau,
            cfg.predictor.hard_select,
            step_seed,
        )?;
        let ids = codes.ids.clone();
        (codes, ids)
    } else {
        // deterministic evaluation: plain argmax selection
        let p = probs.value();
        let (t, n) = p.dim();
        let mut ids = Vec::with_capacity(t);
        let mut one_hot = Array2::zeros((t, n));
        for (i, row) in p.rows().into_iter().enumerate() {
            let argmax = row
                .iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(j, _)| j)
                .unwrap();
            ids.push(argmax);
            one_hot[[i, argmax]] = 1.0;
        }
        let selection = tape.constant(one_hot);
        (
            predictor::PredictedCodes { ids: ids.clone(), one_hot_st: selection },
            ids,
        )
    };
    // route gradients into the codebook only when it is not frozen
    let z_q = if cfg.codebook.frozen {
        predictor::retrieve(tape, &codes, &cb)?
    } else {
        codes.one_hot_st.matmul(bound.get("codebook.entries"))
    };
    let l_res = predictor::res_loss(z_q, z_c)?;

    let z_f = iffnet::fuse(tape, bound, cfg.fusion.kind, &cfg.iffnet, z_n, z_q)?;
    let ctc_logits = nn::linear(bound, "ctc.out", z_f);
    let log_probs = ctc_logits.log_softmax_rows();
    let target = vocab.encode(&pair.clean.transcript);
    let l_ctc = asr_eval::ctc_loss(tape, log_probs, &target, vocab.blank_id)?;
    let l_ctc_value = l_ctc.scalar_value();

    let loss = predictor::finetune_loss(l_ctc, l_pred, l_res, cfg.train.lambda_pred, cfg.train.lambda_res);
    Ok(FinetuneGraph {
        loss,
        l_ctc: l_ctc_value,
        truth,
        pred_ids,
    })
}

/// Build the full finetuning objective (CTC + code prediction + restoration)
/// for one clean/noisy pair as a differentiable graph. With `train = false`
/// the code selection is plain argmax and no augmentation is applied.
pub fn finetune_step_loss<'t>(
    tape: &'t Tape,
    bound: &BoundParams<'t>,
    params: &ParamSet,
    cfg: &PipelineConfig,
    pair: &NoisyPair,
    step_seed: u64,
    train: bool,
) -> Result<Var<'t>> {
    let vocab = Vocab::default();
    let g = finetune_graph(tape, bound, params, cfg, &vocab, pair, step_seed, train)?;
    Ok(g.loss)
}

// ---------------------------------------------------------------------------
// Stage runner
// ---------------------------------------------------------------------------

fn train_entries(manifest: &Manifest) -> Result<Vec<&ManifestEntry>> {
    let entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Train)
        .collect();
    if entries.is_empty() {
        return Err(Error::invalid_argument("manifest has no training entries"));
    }
    Ok(entries)
}

fn check_dependencies(
    cfg: &PipelineConfig,
    stage: Stage,
    resume: Option<&Checkpoint>,
) -> Result<()> {
    let completed =
        |s: Stage| resume.map(|c| c.has_completed(s)).unwrap_or(false);
    match stage {
        Stage::PretrainBackbone => Ok(()),
        Stage::PretrainCodebook => {
            if !completed(Stage::PretrainBackbone) {
                return Err(Error::invalid_state(
                    "pretrain_codebook requires a pretrain_backbone checkpoint",
                ));
            }
            Ok(())
        }
        Stage::Finetune => {
            if !completed(Stage::PretrainBackbone) {
                return Err(Error::invalid_state(
                    "finetune requires a pretrain_backbone checkpoint",
                ));
            }
            if cfg.codebook.pretrained
                && !completed(Stage::PretrainCodebook)
                && !cfg.train.allow_random_codebook
            {
                return Err(Error::invalid_state(
                    "finetune requires a pretrain_codebook checkpoint (or allow_random_codebook)",
                ));
            }
            Ok(())
        }
    }
}

/// Run (or resume) one training stage. Deterministic given the seed; the
/// returned checkpoint carries everything needed to resume bit-exactly.
pub fn run_stage(
    cfg: &PipelineConfig,
    stage: Stage,
    manifest: &Manifest,
    base_dir: &Path,
    resume: Option<&Checkpoint>,
) -> Result<Checkpoint> {
    run_stage_until(cfg, stage, manifest, base_dir, resume, None)
}

/// Like [`run_stage`] but optionally stops after `stop_at` steps while
/// keeping the full-length learning-rate schedule, yielding a mid-stage
/// checkpoint that resumes bit-exactly.
pub fn run_stage_until(
    cfg: &PipelineConfig,
    stage: Stage,
    manifest: &Manifest,
    base_dir: &Path,
    resume: Option<&Checkpoint>,
    stop_at: Option<usize>,
) -> Result<Checkpoint> {
    cfg.validate()?;
    let vocab = Vocab::default();
    let sc = stage_config(cfg, stage);
    let entries = train_entries(manifest)?;

    let mid_stage = resume
        .map(|c| c.stage == stage && !c.has_completed(stage))
        .unwrap_or(false);
    if !mid_stage {
        check_dependencies(cfg, stage, resume)?;
    }

    let (mut params, mut adam, mut rng, mut curve, mut ctc_curve, start_step, completed) =
        if mid_stage {
        let c = resume.unwrap();
        (
            c.param_set(),
            c.adam.clone(),
            c.rng.clone(),
            c.loss_curve.clone(),
            c.ctc_curve.clone(),
            c.step,
            c.completed_stages.clone(),
        )
    } else {
        let params = match (stage, resume) {
            (Stage::PretrainBackbone, _) => init_backbone_params(cfg),
            (_, Some(c)) => c.param_set(),
            (_, None) => unreachable!("dependency check rejects this"),
        };
        let completed = resume.map(|c| c.completed_stages.clone()).unwrap_or_default();
        (
            params,
            Adam::standard(),
            ChaCha8Rng::seed_from_u64(sc.seed),
            Vec::new(),
            Vec::new(),
            0,
            completed,
        )
    };

    // stage-entry setup
    if stage == Stage::PretrainCodebook && start_step == 0 {
        let frames = collect_clean_frames(cfg, &params, &entries, base_dir, 8)?;
        let cb = Codebook::init_from_frames(&frames, cfg.codebook.entries, sc.seed ^ 0x6b6d)?;
        params.insert("codebook.entries", cb.entries);
    }
    if stage == Stage::Finetune && start_step == 0 {
        ensure_finetune_params(&mut params, cfg);
    }

    // cache clean representations while the encoder is frozen
    let mut z_c_cache: HashMap<String, Array2<f64>> = HashMap::new();

    let end_step = stop_at.unwrap_or(sc.steps).min(sc.steps);
    for step in start_step..end_step {
        let step_seed: u64 = rng.gen();
        let entry = entries[step % entries.len()];
        let pair = corpus::load_pair(entry, base_dir)?;
        let lr = schedule_lr(step + 1, sc.steps, sc.peak_lr, sc.warmup_frac)?;

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let (loss_value, grads) = match stage {
            Stage::PretrainBackbone => {
                let progress = step as f64 / sc.steps.max(1) as f64;
                let loss = backbone::pretrain_loss(
                    &tape,
                    &bound,
                    &cfg.backbone,
                    &cfg.pretrain,
                    &pair.clean.samples,
                    &pair.noisy_samples,
                    progress,
                    step_seed,
                )?;
                (loss.scalar_value(), tape.backward(loss))
            }
            Stage::PretrainCodebook => {
                let z_c = match z_c_cache.get(&entry.id) {
                    Some(z) => z.clone(),
                    None => {
                        let z = backbone::represent(&tape, &bound, &cfg.backbone, &pair.clean.samples)?
                            .value();
                        z_c_cache.insert(entry.id.clone(), z.clone());
                        z
                    }
                };
                let cb = Codebook::new(params.get("codebook.entries").clone())?;
                let (_, codes) = codebook::nn_lookup(&z_c, &cb)?;
                let mut one_hot = Array2::zeros((codes.ids.len(), cb.n()));
                for (t, &id) in codes.ids.iter().enumerate() {
                    one_hot[[t, id]] = 1.0;
                }
                let z_q = tape.constant(one_hot).matmul(bound.get("codebook.entries"));
                let loss =
                    codebook::codebook_pretrain_loss(tape.constant(z_c.clone()), z_q, cfg.codebook.beta_commit);
                let value = loss.scalar_value();
                let grads = tape.backward(loss);
                // periodic dead-code reset against the current batch
                if cfg.codebook.reset_interval > 0
                    && step > 0
                    && step % cfg.codebook.reset_interval == 0
                {
                    let usage = codebook::usage_histogram(&codes, cb.n());
                    let mut live = Codebook::new(params.get("codebook.entries").clone())?;
                    live.reset_dead_codes(&usage, &z_c, step_seed)?;
                    params.insert("codebook.entries", live.entries);
                }
                (value, grads)
            }
            Stage::Finetune => {
                let g = finetune_graph(&tape, &bound, &params, cfg, &vocab, &pair, step_seed, true)?;
                ctc_curve.push(g.l_ctc);
                (g.loss.scalar_value(), tape.backward(g.loss))
            }
        };

        let mut by_name = bound.grads(&grads);
        restrict_grads(&mut by_name, stage, &sc.freeze);
        adam.step(&mut params, &by_name, lr);
        curve.push(loss_value);
    }

    let mut completed_stages = completed;
    if end_step == sc.steps && !completed_stages.contains(&stage) {
        completed_stages.push(stage);
    }
    Ok(Checkpoint {
        stage,
        step: end_step,
        completed_stages,
        params: params.to_data(),
        adam,
        rng,
        config: cfg.clone(),
        loss_curve: curve,
        ctc_curve,
    })
}

/// Limit updates to the parameter groups a stage owns and honor the freeze
/// set (dropping a name from the grads map leaves it untouched).
fn restrict_grads(
    grads: &mut IndexMap<String, Array2<f64>>,
    stage: Stage,
    freeze: &BTreeSet<String>,
) {
    grads.retain(|name, _| match stage {
        Stage::PretrainBackbone => name.starts_with("backbone."),
        Stage::PretrainCodebook => name == "codebook.entries",
        Stage::Finetune => true,
    });
    if freeze.contains("codebook") {
        grads.retain(|name, _| name != "codebook.entries");
    }
    if freeze.contains("encoder") {
        grads.retain(|name, _| !name.starts_with("backbone."));
    }
}

fn collect_clean_frames(
    cfg: &PipelineConfig,
    params: &ParamSet,
    entries: &[&ManifestEntry],
    base_dir: &Path,
    max_utts: usize,
) -> Result<Array2<f64>> {
    let mut rows: Vec<f64> = Vec::new();
    let mut count = 0usize;
    for entry in entries.iter().take(max_utts.max(1)) {
        let pair = corpus::load_pair(entry, base_dir)?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let z = backbone::represent(&tape, &bound, &cfg.backbone, &pair.clean.samples)?.value();
        count += z.nrows();
        rows.extend(z.iter());
    }
    Array2::from_shape_vec((count, cfg.backbone.embed_dim), rows)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))
}

/// Convenience: run whichever of the three stages are still missing and
/// return the final finetuned checkpoint.
pub fn run_pipeline(
    cfg: &PipelineConfig,
    manifest: &Manifest,
    base_dir: &Path,
) -> Result<Checkpoint> {
    let ck1 = run_stage(cfg, Stage::PretrainBackbone, manifest, base_dir, None)?;
    let ck2 = if cfg.codebook.pretrained {
        run_stage(cfg, Stage::PretrainCodebook, manifest, base_dir, Some(&ck1))?
    } else {
        let mut cfg2 = cfg.clone();
        cfg2.train.allow_random_codebook = true;
        return run_stage(&cfg2, Stage::Finetune, manifest, base_dir, Some(&ck1));
    };
    run_stage(cfg, Stage::Finetune, manifest, base_dir, Some(&ck2))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Evaluate a finetuned checkpoint: per-condition WER (character-level on the
/// synthetic token alphabet) and code accuracy, plus code accuracy at every
/// grid SNR via deterministic remixing (rows with `n_utts = 0`).
pub fn evaluate(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    base_dir: &Path,
    split: Split,
) -> Result<MetricsReport> {
    let cfg = &ckpt.config;
    let params = ckpt.param_set();
    let vocab = Vocab::default();
    let mut entries: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split == split)
        .collect();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    if cfg.eval.max_utts > 0 {
        entries.truncate(cfg.eval.max_utts);
    }
    if entries.is_empty() {
        return Err(Error::invalid_argument("no utterances in the requested split"));
    }

    // (noise_type, snr) -> (wer_sum, acc_sum, n)
    let mut conditions: IndexMap<(String, u64), (f64, f64, usize)> = IndexMap::new();
    // grid snr -> (acc_sum, n)
    let mut remix: IndexMap<u64, (f64, usize)> = IndexMap::new();

    for entry in &entries {
        let pair = corpus::load_pair(entry, base_dir)?;
        let (wer, acc) = eval_one(cfg, &params, &vocab, &pair)?;
        let key = (
            entry
                .noise_type
                .map(|n| n.name().to_string())
                .unwrap_or_else(|| "clean".into()),
            entry.snr_db.unwrap_or(f64::INFINITY).to_bits(),
        );
        let slot = conditions.entry(key).or_insert((0.0, 0.0, 0));
        slot.0 += wer;
        slot.1 += acc;
        slot.2 += 1;

        if let Some(noise_type) = entry.noise_type {
            for &snr in &cfg.eval.snr_grid_db {
                let remixed = corpus::make_noisy_pair(&pair.clean, noise_type, snr, entry.seed)?;
                let (_, racc) = eval_one(cfg, &params, &vocab, &remixed)?;
                let slot = remix.entry(snr.to_bits()).or_insert((0.0, 0));
                slot.0 += racc;
                slot.1 += 1;
            }
        }
    }

    let mut report = MetricsReport::default();
    for ((noise_type, snr_bits), (wer_sum, acc_sum, n)) in conditions {
        report.conditions.push(ConditionMetrics {
            noise_type,
            snr_db: f64::from_bits(snr_bits),
            wer: wer_sum / n as f64,
            code_acc: Some(acc_sum / n as f64),
            n_utts: n,
        });
    }
    for (snr_bits, (acc_sum, n)) in remix {
        report.conditions.push(ConditionMetrics {
            noise_type: "all".into(),
            snr_db: f64::from_bits(snr_bits),
            wer: 0.0,
            code_acc: Some(acc_sum / n as f64),
            n_utts: 0,
        });
    }
    report
        .loss_curves
        .insert(ckpt.stage.name().to_string(), ckpt.loss_curve.clone());
    Ok(report)
}

/// One utterance: (character error rate, code accuracy).
fn eval_one(
    cfg: &PipelineConfig,
    params: &ParamSet,
    vocab: &Vocab,
    pair: &NoisyPair,
) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let g = finetune_graph(&tape, &bound, params, cfg, vocab, pair, pair.seed, false)?;
    let pred = CodeSequence { ids: g.pred_ids.clone() };
    let acc = asr_eval::code_accuracy(&pred, &g.truth)?;
    // decode from the fused CTC head
    let f_n = backbone::encode_features(&tape, &bound, &cfg.backbone, &pair.noisy_samples)?;
    let z_n = backbone::contextualize(&tape, &bound, &cfg.backbone, f_n, &MaskPlan::empty())?;
    let entries_value = params.get("codebook.entries").clone();
    let cb = Codebook::new(entries_value)?;
    let mut one_hot = Array2::zeros((g.pred_ids.len(), cb.n()));
    for (t, &id) in g.pred_ids.iter().enumerate() {
        one_hot[[t, id]] = 1.0;
    }
    let z_q = tape.constant(one_hot).matmul(tape.constant(cb.entries.clone()));
    let z_f = iffnet::fuse(&tape, &bound, cfg.fusion.kind, &cfg.iffnet, z_n, z_q)?;
    let log_probs = nn::linear(&bound, "ctc.out", z_f).log_softmax_rows().value();
    let hyp = asr_eval::greedy_decode(&log_probs, vocab);
    let wer = asr_eval::cer(&pair.clean.transcript, &hyp.text)?;
    Ok((wer, acc))
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman_rho(xs: &[f64], ys: &[f64]) -> f64 {
    assert_eq!(xs.len(), ys.len());
    let rank = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].partial_cmp(&v[b]).unwrap());
        let mut ranks = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                ranks[k] = avg;
            }
            i = j + 1;
        }
        ranks
    };
    let rx = rank(xs);
    let ry = rank(ys);
    let n = xs.len() as f64;
    let mx = rx.iter().sum::<f64>() / n;
    let my = ry.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for i in 0..xs.len() {
        cov += (rx[i] - mx) * (ry[i] - my);
        vx += (rx[i] - mx).powi(2);
        vy += (ry[i] - my).powi(2);
    }
    if vx == 0.0 || vy == 0.0 {
        return 0.0;
    }
    cov / (vx * vy).sqrt()
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct AblationGrid {
    pub axes: IndexMap<String, Vec<String>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AblationRow {
    pub settings: IndexMap<String, String>,
    pub seeds: Vec<u64>,
    pub mean_wer: Option<f64>,
    pub mean_code_acc: Option<f64>,
    pub error: Option<String>,
}

/// Apply one `key = value` override from the ablation grid to a config.
pub fn apply_setting(cfg: &mut PipelineConfig, key: &str, value: &str) -> Result<()> {
    let bad = |what: &str| Error::Config(format!("invalid value {what:?} for {key}"));
    match key {
        "predictor.kind" => cfg.predictor.kind = value.parse()?,
        "predictor.blocks" => cfg.predictor.blocks = value.parse().map_err(|_| bad(value))?,
        "predictor.proj_dim" => cfg.predictor.proj_dim = value.parse().map_err(|_| bad(value))?,
        "predictor.tau" => cfg.predictor.tau = value.parse().map_err(|_| bad(value))?,
        "codebook.entries" => cfg.codebook.entries = value.parse().map_err(|_| bad(value))?,
        "codebook.pretrained" => {
            cfg.codebook.pretrained = parse_flag(value).ok_or_else(|| bad(value))?
        }
        "codebook.frozen" => cfg.codebook.frozen = parse_flag(value).ok_or_else(|| bad(value))?,
        "fusion.kind" => cfg.fusion.kind = value.parse()?,
        "iffnet.repeats" => cfg.iffnet.repeats = value.parse().map_err(|_| bad(value))?,
        "iffnet.bottleneck_dim" => {
            cfg.iffnet.bottleneck_dim = value.parse().map_err(|_| bad(value))?
        }
        other => return Err(Error::Config(format!("unknown ablation axis: {other}"))),
    }
    Ok(())
}

fn parse_flag(value: &str) -> Option<bool> {
    match value {
        "yes" | "true" | "1" => Some(true),
        "no" | "false" | "0" => Some(false),
        _ => None,
    }
}

fn grid_cells(grid: &AblationGrid) -> Vec<IndexMap<String, String>> {
    let mut cells: Vec<IndexMap<String, String>> = vec![IndexMap::new()];
    for (axis, values) in &grid.axes {
        let mut next = Vec::with_capacity(cells.len() * values.len());
        for cell in &cells {
            for v in values {
                let mut c = cell.clone();
                c.insert(axis.clone(), v.clone());
                next.push(c);
            }
        }
        cells = next;
    }
    cells
}

fn stage1_cache_key(cfg: &PipelineConfig) -> String {
    serde_json::to_string(&(
        &cfg.backbone,
        &cfg.pretrain,
        cfg.train.backbone_steps,
        cfg.train.peak_lr,
        cfg.train.warmup_frac,
        cfg.train.seed,
        cfg.corpus.seed,
    ))
    .expect("cache key")
}

fn stage2_cache_key(cfg: &PipelineConfig) -> String {
    format!(
        "{}|{}",
        stage1_cache_key(cfg),
        serde_json::to_string(&(&cfg.codebook, cfg.train.codebook_steps)).expect("cache key")
    )
}

/// Run one full pipeline per grid cell per seed, sharing stage-1/2
/// checkpoints between cells that do not change them. Per-cell failures are
/// recorded in the row and the run continues.
pub fn run_ablation(
    base: &PipelineConfig,
    grid: &AblationGrid,
    manifest: &Manifest,
    base_dir: &Path,
    seeds: &[u64],
) -> Result<(Vec<AblationRow>, String)> {
    if seeds.is_empty() {
        return Err(Error::invalid_argument("need at least one seed"));
    }
    let cells = grid_cells(grid);
    let mut cache: HashMap<String, Checkpoint> = HashMap::new();
    let mut rows = Vec::with_capacity(cells.len());

    for cell in &cells {
        let mut wers = Vec::new();
        let mut accs = Vec::new();
        let mut error = None;
        for &seed in seeds {
            let mut cfg = base.clone();
            cfg.train.seed = seed;
            let applied: Result<()> = cell
                .iter()
                .try_for_each(|(k, v)| apply_setting(&mut cfg, k, v));
            let outcome = applied.and_then(|_| {
                let ckpt = run_cached_pipeline(&cfg, manifest, base_dir, &mut cache)?;
                let report = evaluate(&ckpt, manifest, base_dir, Split::Test)?;
                let acc_curve = report.code_accuracy_by_snr();
                let mean_acc = if acc_curve.is_empty() {
                    0.0
                } else {
                    acc_curve.iter().map(|(_, a)| a).sum::<f64>() / acc_curve.len() as f64
                };
                Ok((report.mean_wer(), mean_acc))
            });
            match outcome {
                Ok((w, a)) => {
                    wers.push(w);
                    accs.push(a);
                }
                Err(e) => {
                    error = Some(e.to_string());
                    break;
                }
            }
        }
        let mean = |v: &[f64]| {
            if v.is_empty() {
                None
            } else {
                Some(v.iter().sum::<f64>() / v.len() as f64)
            }
        };
        rows.push(AblationRow {
            settings: cell.clone(),
            seeds: seeds.to_vec(),
            mean_wer: if error.is_none() { mean(&wers) } else { None },
            mean_code_acc: if error.is_none() { mean(&accs) } else { None },
            error,
        });
    }

    let mut csv = String::from("cell");
    for axis in grid.axes.keys() {
        csv.push(',');
        csv.push_str(axis);
    }
    csv.push_str(",seeds,mean_wer,mean_code_acc,status\n");
    for (i, row) in rows.iter().enumerate() {
        csv.push_str(&i.to_string());
        for axis in grid.axes.keys() {
            csv.push(',');
            csv.push_str(row.settings.get(axis).map(String::as_str).unwrap_or(""));
        }
        let seeds_field = row
            .seeds
            .iter()
            .map(u64::to_string)
            .collect::<Vec<_>>()
            .join("|");
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        csv.push_str(&format!(
            ",{},{},{},{}\n",
            seeds_field,
            fmt(row.mean_wer),
            fmt(row.mean_code_acc),
            row.error.as_deref().unwrap_or("ok"),
        ));
    }
    Ok((rows, csv))
}

fn run_cached_pipeline(
    cfg: &PipelineConfig,
    manifest: &Manifest,
    base_dir: &Path,
    cache: &mut HashMap<String, Checkpoint>,
) -> Result<Checkpoint> {
    let k1 = stage1_cache_key(cfg);
    let ck1 = match cache.get(&k1) {
        Some(c) => c.clone(),
        None => {
            let c = run_stage(cfg, Stage::PretrainBackbone, manifest, base_dir, None)?;
            cache.insert(k1, c.clone());
            c
        }
    };
    let ck2 = if cfg.codebook.pretrained {
        let k2 = stage2_cache_key(cfg);
        match cache.get(&k2) {
            Some(c) => c.clone(),
            None => {
                let c = run_stage(cfg, Stage::PretrainCodebook, manifest, base_dir, Some(&ck1))?;
                cache.insert(k2, c.clone());
                c
            }
        }
    } else {
        let mut cfg2 = cfg.clone();
        cfg2.train.allow_random_codebook = true;
        return run_stage(&cfg2, Stage::Finetune, manifest, base_dir, Some(&ck1));
    };
    run_stage(cfg, Stage::Finetune, manifest, base_dir, Some(&ck2))
}

// ---------------------------------------------------------------------------
// Feature export
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureKind {
    ZN,
    ZC,
    ZQ,
    ZF,
    Codebook,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::ZN => "z_n",
            FeatureKind::ZC => "z_c",
            FeatureKind::ZQ => "z_q",
            FeatureKind::ZF => "z_f",
            FeatureKind::Codebook => "codebook",
        }
    }
}

impl std::str::FromStr for FeatureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "z_n" => Ok(FeatureKind::ZN),
            "z_c" => Ok(FeatureKind::ZC),
            "z_q" => Ok(FeatureKind::ZQ),
            "z_f" => Ok(FeatureKind::ZF),
            "codebook" => Ok(FeatureKind::Codebook),
            other => Err(Error::invalid_argument(format!("unknown feature kind: {other}"))),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FeatureHeader {
    pub format: String,
    pub version: u32,
    pub which: String,
    pub rows: usize,
    pub cols: usize,
    pub ids: Vec<String>,
}

/// Export a feature matrix for external plotting: one JSON header line, then
/// row-major little-endian f64 data. A companion `<path>.pca.csv` holds a
/// 2-D PCA projection.
pub fn export_features(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    base_dir: &Path,
    which: FeatureKind,
    out_path: &Path,
) -> Result<()> {
    let (matrix, ids) = collect_features(ckpt, manifest, base_dir, which)?;
    write_feature_file(out_path, which, &matrix, &ids)?;
    let (proj, _) = pca_2d(&matrix)?;
    let mut csv = String::from("id,pc1,pc2\n");
    for (i, id) in ids.iter().enumerate() {
        csv.push_str(&format!("{id},{:.9},{:.9}\n", proj[[i, 0]], proj[[i, 1]]));
    }
    fs::write(pca_path(out_path), csv)?;
    Ok(())
}

pub fn pca_path(out_path: &Path) -> std::path::PathBuf {
    let mut os = out_path.as_os_str().to_owned();
    os.push(".pca.csv");
    std::path::PathBuf::from(os)
}

fn collect_features(
    ckpt: &Checkpoint,
    manifest: &Manifest,
    base_dir: &Path,
    which: FeatureKind,
) -> Result<(Array2<f64>, Vec<String>)> {
    let cfg = &ckpt.config;
    let params = ckpt.param_set();
    if which == FeatureKind::Codebook {
        let entries = params.get("codebook.entries").clone();
        let ids = (0..entries.nrows()).map(|i| format!("code{i}")).collect();
        return Ok((entries, ids));
    }
    let vocab = Vocab::default();
    let mut test: Vec<&ManifestEntry> = manifest
        .entries
        .iter()
        .filter(|e| e.split == Split::Test)
        .collect();
    test.sort_by(|a, b| a.id.cmp(&b.id));
    let take = if cfg.eval.max_utts > 0 { cfg.eval.max_utts } else { 4 };
    let mut rows: Vec<f64> = Vec::new();
    let mut ids: Vec<String> = Vec::new();
    let mut count = 0usize;
    for entry in test.iter().take(take) {
        let pair = corpus::load_pair(entry, base_dir)?;
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let z_n = backbone::represent(&tape, &bound, &cfg.backbone, &pair.noisy_samples)?;
        let value = match which {
            FeatureKind::ZN => z_n.value(),
            FeatureKind::ZC => {
                backbone::represent(&tape, &bound, &cfg.backbone, &pair.clean.samples)?.value()
            }
            FeatureKind::ZQ | FeatureKind::ZF => {
                let g = finetune_graph(&tape, &bound, &params, cfg, &vocab, &pair, pair.seed, false)?;
                let cb = Codebook::new(params.get("codebook.entries").clone())?;
                let mut one_hot = Array2::zeros((g.pred_ids.len(), cb.n()));
                for (t, &id) in g.pred_ids.iter().enumerate() {
                    one_hot[[t, id]] = 1.0;
                }
                let z_q = tape.constant(one_hot).matmul(tape.constant(cb.entries.clone()));
                if which == FeatureKind::ZQ {
                    z_q.value()
                } else {
                    iffnet::fuse(&tape, &bound, cfg.fusion.kind, &cfg.iffnet, z_n, z_q)?.value()
                }
            }
            FeatureKind::Codebook => unreachable!(),
        };
        for t in 0..value.nrows() {
            ids.push(format!("{}:{t}", entry.id));
        }
        count += value.nrows();
        rows.extend(value.iter());
    }
    if count == 0 {
        return Err(Error::invalid_argument("no test utterances to export"));
    }
    let matrix = Array2::from_shape_vec((count, ckpt.config.backbone.embed_dim), rows)
        .map_err(|e| Error::ShapeMismatch(e.to_string()))?;
    Ok((matrix, ids))
}

pub fn write_feature_file(
    path: &Path,
    which: FeatureKind,
    matrix: &Array2<f64>,
    ids: &[String],
) -> Result<()> {
    if ids.len() != matrix.nrows() {
        return Err(Error::invalid_argument("one id per row required"));
    }
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let header = FeatureHeader {
        format: "w2c-features".into(),
        version: 1,
        which: which.name().into(),
        rows: matrix.nrows(),
        cols: matrix.ncols(),
        ids: ids.to_vec(),
    };
    let mut file = fs::File::create(path)?;
    let header_json = serde_json::to_string(&header).map_err(|e| Error::Format(e.to_string()))?;
    file.write_all(header_json.as_bytes())?;
    file.write_all(b"\n")?;
    for &v in matrix.iter() {
        file.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

pub fn read_feature_file(path: &Path) -> Result<(FeatureHeader, Array2<f64>)> {
    let mut file = fs::File::open(path)?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)?;
    let newline = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Format("missing feature header".into()))?;
    let header: FeatureHeader = serde_json::from_slice(&bytes[..newline])
        .map_err(|e| Error::Format(e.to_string()))?;
    let mut cursor = std::io::Cursor::new(&bytes[newline + 1..]);
    let mut data = Vec::with_capacity(header.rows * header.cols);
    for _ in 0..header.rows * header.cols {
        data.push(cursor.read_f64::<LittleEndian>()?);
    }
    let matrix = Array2::from_shape_vec((header.rows, header.cols), data)
        .map_err(|e| Error::Format(e.to_string()))?;
    Ok((header, matrix))
}

/// 2-D PCA by power iteration with deflation. Returns the projections and
/// the two leading eigenvalues (variances), largest first.
pub fn pca_2d(data: &Array2<f64>) -> Result<(Array2<f64>, [f64; 2])> {
    let (n, d) = data.dim();
    if n == 0 || d < 2 {
        return Err(Error::invalid_argument("need at least 1 row and 2 columns"));
    }
    let mean = data.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let centered = data - &mean.insert_axis(ndarray::Axis(0));
    let mut cov = centered.t().dot(&centered) / n.max(1) as f64;
    let mut components = Array2::zeros((d, 2));
    let mut variances = [0.0; 2];
    for c in 0..2 {
        // deterministic start vector
        let mut v: Vec<f64> = (0..d).map(|i| 1.0 + (i as f64 + c as f64) * 1e-3).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        let mut v = ndarray::Array1::from_vec(v);
        let mut lambda = 0.0;
        for _ in 0..200 {
            let w = cov.dot(&v);
            let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm < 1e-14 {
                break;
            }
            let w = w / norm;
            lambda = w.dot(&cov.dot(&w));
            v = w;
        }
        variances[c] = lambda;
        components.column_mut(c).assign(&v);
        // deflate
        let vv = v
            .clone()
            .insert_axis(ndarray::Axis(1))
            .dot(&v.clone().insert_axis(ndarray::Axis(0)));
        cov = &cov - &(vv * lambda);
    }
    Ok((centered.dot(&components), variances))
}

#[cfg(test)]
mod tests {
    use super::*;
    use tempfile::TempDir;

    fn tiny_config() -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.corpus = CorpusConfig {
            alphabet_size: 4,
            tokens_min: 2,
            tokens_max: 3,
            train_count: 3,
            valid_count: 1,
            test_count: 2,
            snr_grid_db: vec![0.0, 20.0],
            noise_types: vec![corpus::NoiseType::Fan, corpus::NoiseType::Babble],
            seed: 11,
        };
        cfg.backbone = EncoderConfig {
            conv_channels: vec![8, 8],
            strides: vec![10, 8],
            kernels: vec![20, 16],
            transformer_layers: 1,
            embed_dim: 8,
            heads: 2,
            ffn_dim: 16,
            vq_groups: 2,
            vq_entries: 6,
            use_positions: true,
        };
        cfg.pretrain.distractors = 5;
        cfg.pretrain.mask_prob = 0.2;
        cfg.pretrain.mask_span = 4;
        cfg.codebook.entries = 8;
        cfg.codebook.reset_interval = 4;
        cfg.predictor.proj_dim = 4;
        cfg.predictor.heads = 2;
        cfg.predictor.ffn_dim = 8;
        cfg.predictor.blocks = 1;
        cfg.iffnet.bottleneck_dim = 4;
        cfg.iffnet.repeats = 1;
        cfg.train.backbone_steps = 3;
        cfg.train.codebook_steps = 3;
        cfg.train.finetune_steps = 3;
        cfg.train.augment.freq_span = 2;
        cfg.train.augment.time_span = 3;
        cfg.eval.snr_grid_db = vec![0.0, 20.0];
        cfg
    }

    fn tiny_setup() -> (PipelineConfig, Manifest, TempDir) {
        let cfg = tiny_config();
        let dir = TempDir::new().unwrap();
        let manifest = corpus::build_manifest(&cfg.corpus, dir.path()).unwrap();
        (cfg, manifest, dir)
    }

    #[test]
    fn schedule_endpoints_and_peak() {
        assert_eq!(schedule_lr(0, 1000, 5e-4, 0.2).unwrap(), 0.0);
        assert_eq!(schedule_lr(1000, 1000, 5e-4, 0.2).unwrap(), 0.0);
        assert!((schedule_lr(200, 1000, 5e-4, 0.2).unwrap() - 5e-4).abs() < 1e-15);
        assert!(schedule_lr(1001, 1000, 5e-4, 0.2).is_err());
        assert!(schedule_lr(10, 100, 5e-4, 0.0).is_err());
    }

    #[test]
    fn schedule_is_continuous_with_one_peak() {
        let total = 500;
        let values: Vec<f64> = (0..=total)
            .map(|s| schedule_lr(s, total, 5e-4, 0.2).unwrap())
            .collect();
        let peak_idx = values
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
            .unwrap()
            .0;
        assert_eq!(peak_idx, 100);
        for w in values.windows(2) {
            assert!((w[1] - w[0]).abs() <= 5e-4 / 100.0 + 1e-12, "jump in schedule");
        }
        // strictly increasing then strictly decreasing
        assert!(values[..100].windows(2).all(|w| w[0] < w[1]));
        assert!(values[100..].windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn augment_zero_probability_is_identity() {
        let spec = AugmentSpec {
            time_mask_prob: 0.0,
            freq_mask_prob: 0.0,
            ..AugmentSpec::default()
        };
        let plan = augment_plan(20, 8, &spec, 1).unwrap();
        assert!(plan.is_empty());
    }

    #[test]
    fn augment_full_span_saturates_channels() {
        let spec = AugmentSpec {
            time_mask_prob: 0.0,
            time_span: 1,
            freq_mask_prob: 0.9999,
            freq_span: 8,
        };
        let plan = augment_plan(10, 8, &spec, 3).unwrap();
        assert_eq!(plan.freq_cols.len(), 8);
    }

    #[test]
    fn augment_fraction_matches_union_oracle() {
        let spec = AugmentSpec {
            time_mask_prob: 0.065,
            time_span: 10,
            freq_mask_prob: 0.0,
            freq_span: 1,
        };
        let (t, p, span) = (100usize, 0.065f64, 10usize);
        let analytic: f64 = (0..t)
            .map(|i| {
                let starts = i - i.saturating_sub(span - 1) + 1;
                1.0 - (1.0 - p).powi(starts as i32)
            })
            .sum::<f64>()
            / t as f64;
        let mean: f64 = (0..10_000u64)
            .map(|s| augment_plan(t, 8, &spec, s).unwrap().time_rows.len() as f64)
            .sum::<f64>()
            / (10_000.0 * t as f64);
        assert!((mean - analytic).abs() < 0.02, "mc {mean} vs analytic {analytic}");
    }

    #[test]
    fn apply_augment_replaces_and_zeroes() {
        let cfg = tiny_config();
        let params = init_backbone_params(&cfg);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let f = tape.constant(nn::randn(&mut ChaCha8Rng::seed_from_u64(4), 6, 8, 1.0));
        let plan = AugmentPlan {
            time_rows: [1usize, 4].into_iter().collect(),
            freq_cols: [0usize, 7].into_iter().collect(),
        };
        let out = apply_augment(&tape, &bound, f, &plan).value();
        let emb = params.get("backbone.mask_emb");
        for &r in &[1usize, 4] {
            for c in 1..7 {
                assert!((out[[r, c]] - emb[[0, c]]).abs() < 1e-12);
            }
        }
        for r in 0..6 {
            assert_eq!(out[[r, 0]], 0.0);
            assert_eq!(out[[r, 7]], 0.0);
        }
        // untouched cells
        assert_eq!(out[[0, 3]], f.value()[[0, 3]]);
    }

    #[test]
    fn config_roundtrips_toml_and_json() {
        let cfg = tiny_config();
        let toml_text = toml::to_string(&cfg).unwrap();
        let back: PipelineConfig = toml::from_str(&toml_text).unwrap();
        assert_eq!(
            serde_json::to_string(&cfg).unwrap(),
            serde_json::to_string(&back).unwrap()
        );
        let dir = TempDir::new().unwrap();
        let p = dir.path().join("cfg.toml");
        fs::write(&p, &toml_text).unwrap();
        let loaded = PipelineConfig::load(&p).unwrap();
        assert_eq!(
            serde_json::to_string(&cfg).unwrap(),
            serde_json::to_string(&loaded).unwrap()
        );
    }

    #[test]
    fn finetune_dependency_errors_name_missing_stage() {
        let (cfg, manifest, dir) = tiny_setup();
        let err = run_stage(&cfg, Stage::Finetune, &manifest, dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("pretrain_backbone"), "{err}");
        let ck1 = run_stage(&cfg, Stage::PretrainBackbone, &manifest, dir.path(), None).unwrap();
        let err =
            run_stage(&cfg, Stage::Finetune, &manifest, dir.path(), Some(&ck1)).unwrap_err();
        assert!(err.to_string().contains("pretrain_codebook"), "{err}");
        let mut cfg2 = cfg.clone();
        cfg2.train.allow_random_codebook = true;
        assert!(run_stage(&cfg2, Stage::Finetune, &manifest, dir.path(), Some(&ck1)).is_ok());
        let err =
            run_stage(&cfg, Stage::PretrainCodebook, &manifest, dir.path(), None).unwrap_err();
        assert!(err.to_string().contains("pretrain_backbone"), "{err}");
    }

    #[test]
    fn pipeline_is_deterministic_and_resumable() {
        let (cfg, manifest, dir) = tiny_setup();
        let ck_a = run_pipeline(&cfg, &manifest, dir.path()).unwrap();
        let ck_b = run_pipeline(&cfg, &manifest, dir.path()).unwrap();
        assert_eq!(ck_a.loss_curve.len(), cfg.train.finetune_steps);
        for (a, b) in ck_a.loss_curve.iter().zip(&ck_b.loss_curve) {
            assert!((a - b).abs() <= 1e-6, "loss curves diverge: {a} vs {b}");
        }
        for (name, ta) in &ck_a.params {
            assert_eq!(ta, &ck_b.params[name], "param {name} differs between reruns");
        }

        // resume continuity: k steps, save, 1 more == k+1 straight
        let ck1 = run_stage(&cfg, Stage::PretrainBackbone, &manifest, dir.path(), None).unwrap();
        let ck2 = run_stage(&cfg, Stage::PretrainCodebook, &manifest, dir.path(), Some(&ck1)).unwrap();
        let mid =
            run_stage_until(&cfg, Stage::Finetune, &manifest, dir.path(), Some(&ck2), Some(2))
                .unwrap();
        assert_eq!(mid.step, 2);
        assert!(!mid.has_completed(Stage::Finetune));
        // checkpoint roundtrip through disk
        let path = dir.path().join("ck.json");
        mid.save(&path).unwrap();
        let mid = Checkpoint::load(&path).unwrap();
        let resumed =
            run_stage(&cfg, Stage::Finetune, &manifest, dir.path(), Some(&mid)).unwrap();
        let straight = run_stage(&cfg, Stage::Finetune, &manifest, dir.path(), Some(&ck2)).unwrap();
        for (name, ta) in &straight.params {
            let a = ta.to_array();
            let b = resumed.params[name].to_array();
            let drift = (&a - &b).mapv(f64::abs).iter().fold(0.0f64, |m, &v| m.max(v));
            assert!(drift <= 1e-7, "param {name} drifted {drift} after resume");
        }
    }

    #[test]
    fn freeze_contract_keeps_codebook_bit_identical() {
        let (cfg, manifest, dir) = tiny_setup();
        let ck1 = run_stage(&cfg, Stage::PretrainBackbone, &manifest, dir.path(), None).unwrap();
        let ck2 = run_stage(&cfg, Stage::PretrainCodebook, &manifest, dir.path(), Some(&ck1)).unwrap();
        let before = ck2.params["codebook.entries"].clone();
        let ck3 = run_stage(&cfg, Stage::Finetune, &manifest, dir.path(), Some(&ck2)).unwrap();
        assert_eq!(before, ck3.params["codebook.entries"]);
        // and the backbone stays fixed during codebook pre-training
        for (name, t) in &ck1.params {
            if name.starts_with("backbone.") {
                assert_eq!(t, &ck2.params[name], "{name} changed during codebook stage");
            }
        }
    }

    #[test]
    fn evaluate_produces_conditions_and_remix_rows() {
        let (cfg, manifest, dir) = tiny_setup();
        let ckpt = run_pipeline(&cfg, &manifest, dir.path()).unwrap();
        let report = evaluate(&ckpt, &manifest, dir.path(), Split::Test).unwrap();
        assert!(!report.conditions.is_empty());
        for c in &report.conditions {
            assert!(c.wer >= 0.0);
            if let Some(a) = c.code_acc {
                assert!((0.0..=1.0).contains(&a));
            }
        }
        let by_snr = report.code_accuracy_by_snr();
        assert!(!by_snr.is_empty());
        assert!(report.to_csv().starts_with("noise_type,snr_db,wer,code_acc,n_utts"));
        // twice -> identical
        let again = evaluate(&ckpt, &manifest, dir.path(), Split::Test).unwrap();
        assert_eq!(
            serde_json::to_string(&report.conditions).unwrap(),
            serde_json::to_string(&again.conditions).unwrap()
        );
    }

    #[test]
    fn ablation_grid_rows_and_determinism() {
        let (mut cfg, manifest, dir) = tiny_setup();
        cfg.train.backbone_steps = 2;
        cfg.train.codebook_steps = 2;
        cfg.train.finetune_steps = 2;
        let mut grid = AblationGrid::default();
        grid.axes
            .insert("fusion.kind".into(), vec!["none".into(), "concat".into()]);
        let (rows, csv) = run_ablation(&cfg, &grid, &manifest, dir.path(), &[5]).unwrap();
        assert_eq!(rows.len(), 2);
        assert!(rows.iter().all(|r| r.error.is_none()), "{csv}");
        let (_, csv2) = run_ablation(&cfg, &grid, &manifest, dir.path(), &[5]).unwrap();
        assert_eq!(csv, csv2);
        assert!(csv.starts_with("cell,fusion.kind,seeds,mean_wer,mean_code_acc,status"));

        // empty grid -> one base row; bad axis -> recorded failure
        let (rows, _) = run_ablation(&cfg, &AblationGrid::default(), &manifest, dir.path(), &[5])
            .unwrap();
        assert_eq!(rows.len(), 1);
        let mut bad = AblationGrid::default();
        bad.axes.insert("nope.axis".into(), vec!["1".into()]);
        let (rows, csv) = run_ablation(&cfg, &bad, &manifest, dir.path(), &[5]).unwrap();
        assert_eq!(rows.len(), 1);
        assert!(rows[0].error.is_some());
        assert!(csv.contains("unknown ablation axis"));
    }

    #[test]
    fn export_roundtrip_and_pca_ordering() {
        let (cfg, manifest, dir) = tiny_setup();
        let ckpt = run_pipeline(&cfg, &manifest, dir.path()).unwrap();
        let out = dir.path().join("features.bin");
        export_features(&ckpt, &manifest, dir.path(), FeatureKind::Codebook, &out).unwrap();
        let (header, matrix) = read_feature_file(&out).unwrap();
        assert_eq!(header.which, "codebook");
        assert_eq!(matrix.dim(), (cfg.codebook.entries, cfg.backbone.embed_dim));
        // byte-identical on re-export
        let bytes1 = fs::read(&out).unwrap();
        export_features(&ckpt, &manifest, dir.path(), FeatureKind::Codebook, &out).unwrap();
        assert_eq!(bytes1, fs::read(&out).unwrap());
        assert!(pca_path(&out).exists());

        let out2 = dir.path().join("zn.bin");
        export_features(&ckpt, &manifest, dir.path(), FeatureKind::ZN, &out2).unwrap();
        let (header, matrix) = read_feature_file(&out2).unwrap();
        assert_eq!(header.rows, matrix.nrows());
        assert_eq!(header.ids.len(), header.rows);

        // PCA: variance of PC1 >= PC2, against a known anisotropic cloud
        let mut rng = ChaCha8Rng::seed_from_u64(30);
        let mut data = nn::randn(&mut rng, 300, 5, 1.0);
        for mut row in data.rows_mut() {
            row[0] *= 6.0; // dominant axis
        }
        let (proj, vars) = pca_2d(&data).unwrap();
        assert!(vars[0] >= vars[1]);
        assert!(vars[0] > 20.0, "dominant axis variance {}", vars[0]);
        let sample_var = |col: usize| {
            let c = proj.column(col);
            let m = c.mean().unwrap();
            c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / c.len() as f64
        };
        assert!(sample_var(0) >= sample_var(1));
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman_rho(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        assert_eq!(spearman_rho(&[1.0, 2.0, 3.0], &[5.0, 5.0, 5.0]), 0.0);
    }

    #[test]
    fn training_curve_descends_on_longer_finetune() {
        let (mut cfg, manifest, dir) = tiny_setup();
        cfg.train.backbone_steps = 5;
        cfg.train.codebook_steps = 5;
        cfg.train.finetune_steps = 40;
        let ckpt = run_pipeline(&cfg, &manifest, dir.path()).unwrap();
        let curve = &ckpt.loss_curve;
        let head: f64 = curve[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = curve[curve.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "finetune loss did not descend: {head} -> {tail}");
    }
}
