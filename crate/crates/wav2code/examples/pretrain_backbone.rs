//! Stage 1: contrastive pre-training of the backbone on masked frames.
//!
//! Run with: cargo run --release --example pretrain_backbone

use wav2code::backbone::EncoderConfig;
use wav2code::corpus::{self, CorpusConfig, NoiseType};
use wav2code::harness::{self, PipelineConfig, Stage};

fn main() -> wav2code::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.corpus = CorpusConfig {
        alphabet_size: 4,
        tokens_min: 2,
        tokens_max: 3,
        train_count: 4,
        valid_count: 1,
        test_count: 2,
        snr_grid_db: vec![5.0, 15.0],
        noise_types: vec![NoiseType::Fan, NoiseType::Babble],
        seed: 7,
    };
    cfg.backbone = EncoderConfig {
        conv_channels: vec![16, 16],
        strides: vec![10, 8],
        kernels: vec![20, 16],
        transformer_layers: 1,
        embed_dim: 16,
        heads: 4,
        ffn_dim: 32,
        vq_groups: 2,
        vq_entries: 8,
        use_positions: true,
    };
    cfg.predictor.proj_dim = 8;
    cfg.predictor.ffn_dim = 16;
    cfg.iffnet.bottleneck_dim = 8;
    cfg.pretrain.distractors = 10;
    cfg.pretrain.mask_prob = 0.15;
    cfg.pretrain.mask_span = 5;
    cfg.train.backbone_steps = 30;

    let out = std::env::temp_dir().join("wav2code-example-backbone");
    let manifest = corpus::build_manifest(&cfg.corpus, &out)?;
    println!("pre-training on {} utterances...", cfg.corpus.train_count);
    let ckpt = harness::run_stage(&cfg, Stage::PretrainBackbone, &manifest, &out, None)?;

    for (step, loss) in ckpt.loss_curve.iter().enumerate() {
        if step % 5 == 0 || step + 1 == ckpt.loss_curve.len() {
            println!("step {step:>3}  loss {loss:.4}");
        }
    }
    let head: f64 = ckpt.loss_curve[..5].iter().sum::<f64>() / 5.0;
    let n = ckpt.loss_curve.len();
    let tail: f64 = ckpt.loss_curve[n - 5..].iter().sum::<f64>() / 5.0;
    println!("mean loss, first 5 steps: {head:.4}, last 5 steps: {tail:.4}");
    println!("{} parameters trained", ckpt.params.len());
    Ok(())
}
