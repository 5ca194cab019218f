//! Sweep fusion strategies over a shared toy pipeline and print the
//! resulting comparison table.
//!
//! Run with: cargo run --release --example ablation_sweep

use wav2code::backbone::EncoderConfig;
use wav2code::corpus::{self, CorpusConfig, NoiseType};
use wav2code::harness::{self, AblationGrid, PipelineConfig};

fn main() -> wav2code::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.corpus = CorpusConfig {
        alphabet_size: 4,
        tokens_min: 2,
        tokens_max: 3,
        train_count: 3,
        valid_count: 1,
        test_count: 2,
        snr_grid_db: vec![5.0, 15.0],
        noise_types: vec![NoiseType::Fan, NoiseType::Babble],
        seed: 23,
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
    cfg.train.backbone_steps = 5;
    cfg.train.codebook_steps = 5;
    cfg.train.finetune_steps = 10;
    cfg.train.augment.time_span = 3;
    cfg.train.augment.freq_span = 2;
    cfg.eval.snr_grid_db = vec![5.0, 15.0];

    let out = std::env::temp_dir().join("wav2code-example-ablation");
    let manifest = corpus::build_manifest(&cfg.corpus, &out)?;

    let mut grid = AblationGrid::default();
    grid.axes.insert(
        "fusion.kind".into(),
        vec!["none".into(), "concat".into(), "iffnet".into()],
    );
    grid.axes
        .insert("predictor.kind".into(), vec!["transformer".into(), "nn_matching".into()]);

    println!("running {} cells (stage-1/2 checkpoints are shared)...", 6);
    let (rows, csv) = harness::run_ablation(&cfg, &grid, &manifest, &out, &[1, 2])?;
    print!("{csv}");
    let failed = rows.iter().filter(|r| r.error.is_some()).count();
    println!("{} cells, {} failed", rows.len(), failed);
    Ok(())
}
