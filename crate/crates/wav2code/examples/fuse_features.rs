//! Interactive feature fusion: bottleneck both branches, exchange sigmoid
//! masks, then merge with a learned convex gate.
//!
//! Run with: cargo run --example fuse_features

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use wav2code::autodiff::Tape;
use wav2code::iffnet::{self, FusionKind, IFFConfig};
use wav2code::nn::{self, ParamSet};

fn main() -> wav2code::Result<()> {
    let (t, d) = (10usize, 8usize);
    let cfg = IFFConfig {
        bottleneck_dim: 4,
        repeats: 2,
        ..IFFConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let z_n = nn::randn(&mut rng, t, d, 1.0); // noisy branch
    let z_q = nn::randn(&mut rng, t, d, 1.0); // quantized clean branch

    for kind in [FusionKind::None, FusionKind::Concat, FusionKind::Iffnet] {
        let mut params = ParamSet::new();
        let mut init_rng = ChaCha8Rng::seed_from_u64(4);
        iffnet::init_params(&mut params, kind, &cfg, d, &mut init_rng);
        let tape = Tape::new();
        let bound = params.bind(&tape);
        let fused = iffnet::fuse(
            &tape,
            &bound,
            kind,
            &cfg,
            tape.constant(z_n.clone()),
            tape.constant(z_q.clone()),
        )?;
        println!("{:8} -> fused {:?} ({} params)", kind.name(), fused.shape(), params.len());
    }

    // the merge gate keeps every fused element between its two inputs
    let mut params = ParamSet::new();
    let mut init_rng = ChaCha8Rng::seed_from_u64(4);
    iffnet::init_params(&mut params, FusionKind::Iffnet, &cfg, d, &mut init_rng);
    let tape = Tape::new();
    let bound = params.bind(&tape);
    let a = tape.constant(z_n.clone());
    let b = tape.constant(z_q.clone());
    let (fused, mask) = iffnet::merge(&tape, &bound, a, b)?;
    let f = fused.value();
    let m = mask.value();
    let mut violations = 0;
    for i in 0..t {
        for j in 0..d {
            let (lo, hi) = (z_n[[i, j]].min(z_q[[i, j]]), z_n[[i, j]].max(z_q[[i, j]]));
            if f[[i, j]] < lo - 1e-12 || f[[i, j]] > hi + 1e-12 {
                violations += 1;
            }
        }
    }
    println!(
        "merge gate: mean {:.3}, range [{:.3}, {:.3}], convexity violations {}",
        m.mean().unwrap(),
        m.iter().cloned().fold(f64::INFINITY, f64::min),
        m.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        violations,
    );
    Ok(())
}
