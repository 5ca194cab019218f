//! Stage 2: k-means-seeded codebook learning over clean representations,
//! with usage tracking and dead-code resets.
//!
//! Run with: cargo run --release --example learn_codebook

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wav2code::codebook::{self, Codebook};
use wav2code::nn;

fn main() -> wav2code::Result<()> {
    // three well-separated clusters of "frames"
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut frames = Array2::zeros((90, 4));
    for i in 0..90 {
        let center = (i / 30) as f64 * 10.0;
        let noise = nn::randn(&mut rng, 1, 4, 0.3);
        for j in 0..4 {
            frames[[i, j]] = center + noise[[0, j]];
        }
    }

    let cb = Codebook::init_from_frames(&frames, 8, 17)?;
    println!("initialized {} codes of dim {}", cb.n(), cb.dim());

    let (quantized, codes) = codebook::nn_lookup(&frames, &cb)?;
    let usage = codebook::usage_histogram(&codes, cb.n());
    println!("usage histogram: {usage:?}");

    let mse = (&frames - &quantized.values)
        .mapv(|v| v * v)
        .mean()
        .unwrap();
    println!("quantization MSE after k-means init: {mse:.4}");

    // codes that never fire get re-seeded from the data
    let mut cb = cb;
    let reset = cb.reset_dead_codes(&usage, &frames, 99)?;
    println!("reset {reset} dead codes");
    let (_, codes) = codebook::nn_lookup(&frames, &cb)?;
    println!("usage after reset: {:?}", codebook::usage_histogram(&codes, cb.n()));

    // the training objective: pull codes to frames, commit frames to codes
    let tape = wav2code::autodiff::Tape::new();
    let z_c = tape.constant(frames.clone());
    let z_q = tape.constant(quantized.values.clone());
    let loss = codebook::codebook_pretrain_loss(z_c, z_q, 0.25);
    println!("codebook pre-train loss: {:.4}", loss.scalar_value());
    Ok(())
}
