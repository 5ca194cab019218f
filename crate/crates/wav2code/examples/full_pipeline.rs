//! End to end at toy scale: synthesize the corpus, run all three training
//! stages, then evaluate WER and code accuracy across the SNR grid.
//!
//! Run with: cargo run --release --example full_pipeline

use wav2code::backbone::EncoderConfig;
use wav2code::corpus::{self, CorpusConfig, NoiseType, Split};
use wav2code::harness::{self, PipelineConfig};

fn main() -> wav2code::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.corpus = CorpusConfig {
        alphabet_size: 4,
        tokens_min: 2,
        tokens_max: 3,
        train_count: 4,
        valid_count: 1,
        test_count: 3,
        snr_grid_db: vec![0.0, 10.0, 20.0],
        noise_types: vec![NoiseType::Fan, NoiseType::Babble],
        seed: 13,
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
    cfg.predictor.proj_dim = 4;
    cfg.predictor.heads = 2;
    cfg.predictor.ffn_dim = 8;
    cfg.predictor.blocks = 1;
    cfg.iffnet.bottleneck_dim = 4;
    cfg.iffnet.repeats = 1;
    cfg.train.backbone_steps = 10;
    cfg.train.codebook_steps = 10;
    cfg.train.finetune_steps = 20;
    cfg.train.augment.time_span = 3;
    cfg.train.augment.freq_span = 2;
    cfg.eval.snr_grid_db = vec![0.0, 10.0, 20.0];

    let out = std::env::temp_dir().join("wav2code-example-pipeline");
    let manifest = corpus::build_manifest(&cfg.corpus, &out)?;
    println!("corpus: {} utterances", manifest.entries.len());

    println!("running pretrain_backbone -> pretrain_codebook -> finetune...");
    let ckpt = harness::run_pipeline(&cfg, &manifest, &out)?;
    println!(
        "finetune loss {:.3} -> {:.3} over {} steps",
        ckpt.loss_curve.first().unwrap(),
        ckpt.loss_curve.last().unwrap(),
        ckpt.loss_curve.len(),
    );

    let report = harness::evaluate(&ckpt, &manifest, &out, Split::Test)?;
    println!("mean WER: {:.4}", report.mean_wer());
    for (snr, acc) in report.code_accuracy_by_snr() {
        println!("code accuracy @ {snr:>5.1} dB: {acc:.4}");
    }
    print!("{}", report.to_csv());
    Ok(())
}
