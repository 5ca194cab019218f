//! Predict discrete clean-speech codes from noisy representations with the
//! three predictor heads, and sample through the straight-through Gumbel
//! estimator.
//!
//! Run with: cargo run --example predict_codes

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wav2code::autodiff::Tape;
use wav2code::codebook::{self, Codebook};
use wav2code::nn::{self, ParamSet};
use wav2code::predictor::{self, PredictorConfig, PredictorKind};

fn main() -> wav2code::Result<()> {
    let (t, d, n) = (12usize, 8usize, 16usize);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let codebook = Codebook::new(nn::randn(&mut rng, n, d, 1.0))?;

    // noisy representations = codebook rows plus perturbation, so the ground
    // truth codes are known
    let mut z = nn::randn(&mut rng, t, d, 0.15);
    let mut truth_ids = Vec::new();
    for i in 0..t {
        let id = (i * 3) % n;
        truth_ids.push(id);
        for j in 0..d {
            z[[i, j]] += codebook.entries[[id, j]];
        }
    }
    let truth = codebook::CodeSequence { ids: truth_ids };

    for kind in [PredictorKind::NnMatching, PredictorKind::Cnn, PredictorKind::Transformer] {
        let cfg = PredictorConfig {
            kind,
            blocks: 1,
            proj_dim: 4,
            heads: 2,
            ffn_dim: 8,
            ..PredictorConfig::default()
        };
        let mut params = ParamSet::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        predictor::init_params(&mut params, &cfg, d, n, &mut rng);

        let tape = Tape::new();
        let bound = params.bind(&tape);
        let z_n = tape.constant(z.clone());
        let logits = predictor::predict_logits(&tape, &bound, &cfg, z_n, &codebook)?;
        let probs = logits.softmax_rows();
        let loss = predictor::pred_loss(&tape, probs, &truth)?;

        let codes = predictor::gumbel_select(&tape, logits, 0.01, true, 123)?;
        let pred = codebook::CodeSequence { ids: codes.ids.clone() };
        let acc = wav2code::asr_eval::code_accuracy(&pred, &truth)?;
        println!(
            "{:12}  pred_loss {:>7.4}  untrained accuracy {:.2} ({} params)",
            kind.name(),
            loss.scalar_value(),
            acc,
            params.len(),
        );

        // straight-through retrieval: hard code vectors, soft gradients
        let z_q = predictor::retrieve(&tape, &codes, &codebook)?;
        println!("             retrieved quantized features: {:?}", z_q.shape());
    }
    println!("(nn_matching reads the codebook directly, so it wins before any training)");
    Ok(())
}
