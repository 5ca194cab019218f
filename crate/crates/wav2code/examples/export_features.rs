//! Train a toy model, export its codebook and fused features to the binary
//! container, and read them back alongside the PCA companion CSV.
//!
//! Run with: cargo run --release --example export_features

use wav2code::backbone::EncoderConfig;
use wav2code::corpus::{self, CorpusConfig, NoiseType};
use wav2code::harness::{self, FeatureKind, PipelineConfig};

fn main() -> wav2code::Result<()> {
    let mut cfg = PipelineConfig::default();
    cfg.corpus = CorpusConfig {
        alphabet_size: 4,
        tokens_min: 2,
        tokens_max: 3,
        train_count: 3,
        valid_count: 1,
        test_count: 2,
        snr_grid_db: vec![10.0],
        noise_types: vec![NoiseType::Fan],
        seed: 31,
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
    cfg.train.backbone_steps = 3;
    cfg.train.codebook_steps = 3;
    cfg.train.finetune_steps = 3;
    cfg.train.augment.time_span = 3;
    cfg.train.augment.freq_span = 2;

    let out = std::env::temp_dir().join("wav2code-example-export");
    let manifest = corpus::build_manifest(&cfg.corpus, &out)?;
    let ckpt = harness::run_pipeline(&cfg, &manifest, &out)?;

    for which in [FeatureKind::Codebook, FeatureKind::ZN, FeatureKind::ZF] {
        let path = out.join(format!("features_{}.bin", which.name()));
        harness::export_features(&ckpt, &manifest, &out, which, &path)?;
        let (header, matrix) = harness::read_feature_file(&path)?;
        println!(
            "{:8} -> {} ({} x {}), first id {:?}",
            which.name(),
            path.display(),
            matrix.nrows(),
            matrix.ncols(),
            header.ids.first(),
        );
        let pca = std::fs::read_to_string(harness::pca_path(&path))?;
        let mut lines = pca.lines();
        println!("  pca: {}", lines.next().unwrap_or(""));
        println!("       {}", lines.next().unwrap_or(""));
    }
    Ok(())
}
