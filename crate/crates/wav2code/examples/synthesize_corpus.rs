//! Build a small synthetic corpus and check the SNR of every mixture.
//!
//! Run with: cargo run --example synthesize_corpus

use wav2code::corpus::{self, CorpusConfig, NoiseType};

fn main() -> wav2code::Result<()> {
    let cfg = CorpusConfig {
        alphabet_size: 6,
        tokens_min: 2,
        tokens_max: 4,
        train_count: 6,
        valid_count: 2,
        test_count: 4,
        snr_grid_db: vec![0.0, 10.0, 20.0],
        noise_types: vec![NoiseType::Fan, NoiseType::Babble, NoiseType::Clatter],
        seed: 42,
    };
    let out = std::env::temp_dir().join("wav2code-example-corpus");
    let manifest = corpus::build_manifest(&cfg, &out)?;
    println!("wrote {} utterances under {}", manifest.entries.len(), out.display());

    for entry in &manifest.entries {
        let pair = corpus::load_pair(entry, &out)?;
        let achieved = corpus::achieved_snr_db(&pair.clean.samples, &pair.noisy_samples);
        println!(
            "{:12} {:>8} target {:>5.1} dB achieved {:>6.2} dB  \"{}\"",
            entry.id,
            entry.noise_type.map(|n| n.name()).unwrap_or("clean"),
            entry.snr_db.unwrap_or(f64::INFINITY),
            achieved,
            entry.transcript,
        );
    }

    // remixing the same clean utterance at several SNRs is deterministic
    let entry = &manifest.entries[0];
    let pair = corpus::load_pair(entry, &out)?;
    for snr in [0.0, 5.0, 10.0] {
        let remixed =
            corpus::make_noisy_pair(&pair.clean, entry.noise_type.unwrap(), snr, entry.seed)?;
        let achieved = corpus::achieved_snr_db(&remixed.clean.samples, &remixed.noisy_samples);
        println!("remix {} at {snr:>4.1} dB -> achieved {achieved:.3} dB", entry.id);
    }
    Ok(())
}
