//! Discrete codebook storing the clean-speech prior: nearest-neighbor lookup
//! and the bi-directional pre-training loss with stop-gradient routing.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::nn::TensorData;

pub const DEFAULT_BETA_COMMIT: f64 = 0.25;

#[derive(Debug, Clone)]
pub struct Codebook {
    /// `N x D` entry matrix.
    pub entries: Array2<f64>,
    pub frozen: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSequence {
    pub ids: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantSource {
    NnLookup,
    Predicted,
}

#[derive(Debug, Clone)]
pub struct QuantizedRepr {
    pub values: Array2<f64>,
    pub source: QuantSource,
}

impl Codebook {
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        if entries.nrows() < 2 {
            return Err(Error::invalid_argument("codebook needs at least 2 entries"));
        }
        if entries.iter().any(|e| !e.is_finite()) {
            return Err(Error::invalid_argument("codebook entries must be finite"));
        }
        Ok(Codebook { entries, frozen: false })
    }

    pub fn n(&self) -> usize {
        self.entries.nrows()
    }

    pub fn dim(&self) -> usize {
        self.entries.ncols()
    }

    pub fn freeze(&mut self) {
        self.frozen = true;
    }

    pub fn to_data(&self) -> (TensorData, bool) {
        (TensorData::from_array(&self.entries), self.frozen)
    }

    pub fn from_data(data: &TensorData, frozen: bool) -> Self {
        Codebook {
            entries: data.to_array(),
            frozen,
        }
    }

    /// k-means++ style seeding from a warm-up batch of frames, followed by a
    /// few Lloyd iterations. Avoids dead codes at initialization.
    pub fn init_from_frames(frames: &Array2<f64>, n: usize, seed: u64) -> Result<Self> {
        if frames.nrows() == 0 {
            return Err(Error::invalid_argument("empty warm-up batch"));
        }
        if n < 2 {
            return Err(Error::invalid_argument("codebook needs at least 2 entries"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = frames.ncols();
        let mut centers: Vec<usize> = vec![rng.gen_range(0..frames.nrows())];
        while centers.len() < n.min(frames.nrows()) {
            // distance-squared weighted choice of the next seed
            let dists: Vec<f64> = (0..frames.nrows())
                .map(|i| {
                    centers
                        .iter()
                        .map(|&c| sq_dist(frames.row(i), frames.row(c)))
                        .fold(f64::INFINITY, f64::min)
                })
                .collect();
            let total: f64 = dists.iter().sum();
            if total <= 0.0 {
                centers.push(rng.gen_range(0..frames.nrows()));
                continue;
            }
            let mut pick = rng.gen_range(0.0..total);
            let mut chosen = frames.nrows() - 1;
            for (i, &w) in dists.iter().enumerate() {
                if pick < w {
                    chosen = i;
                    break;
                }
                pick -= w;
            }
            centers.push(chosen);
        }
        let mut entries = Array2::zeros((n, d));
        for (k, &c) in centers.iter().enumerate() {
            entries.row_mut(k).assign(&frames.row(c));
        }
        // fill any remainder (n > batch size) with jittered copies
        for k in centers.len()..n {
            let base = k % frames.nrows();
            let noise = Array2::from_shape_fn((1, d), |_| rng.gen_range(-0.01..0.01));
            entries
                .row_mut(k)
                .assign(&(&frames.row(base) + &noise.row(0)));
        }
        let mut cb = Codebook::new(entries)?;
        for _ in 0..3 {
            cb.lloyd_iteration(frames);
        }
        Ok(cb)
    }

    fn lloyd_iteration(&mut self, frames: &Array2<f64>) {
        let (_, codes) = nn_lookup(frames, self).expect("dims agree");
        let mut sums = Array2::<f64>::zeros(self.entries.dim());
        let mut counts = vec![0usize; self.n()];
        for (i, &k) in codes.ids.iter().enumerate() {
            let mut row = sums.row_mut(k);
            row += &frames.row(i);
            counts[k] += 1;
        }
        for k in 0..self.n() {
            if counts[k] > 0 {
                let mean = sums.row(k).mapv(|s| s / counts[k] as f64);
                self.entries.row_mut(k).assign(&mean);
            }
        }
    }

    /// Re-seed entries unused for the configured span to random in-batch
    /// frames. Returns the number of reset entries.
    pub fn reset_dead_codes(
        &mut self,
        usage: &[usize],
        frames: &Array2<f64>,
        seed: u64,
    ) -> Result<usize> {
        if self.frozen {
            return Err(Error::invalid_state("cannot reset codes in a frozen codebook"));
        }
        if usage.len() != self.n() {
            return Err(Error::ShapeMismatch("usage length != codebook size".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut resets = 0;
        for (k, &u) in usage.iter().enumerate() {
            if u == 0 && frames.nrows() > 0 {
                let pick = rng.gen_range(0..frames.nrows());
                self.entries.row_mut(k).assign(&frames.row(pick));
                resets += 1;
            }
        }
        Ok(resets)
    }
}

fn sq_dist(a: ndarray::ArrayView1<f64>, b: ndarray::ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Per frame, the nearest codebook entry by Euclidean distance, ties broken
/// by lowest index.
pub fn nn_lookup(z: &Array2<f64>, codebook: &Codebook) -> Result<(QuantizedRepr, CodeSequence)> {
    if z.ncols() != codebook.dim() {
        return Err(Error::ShapeMismatch(format!(
            "frame dim {} vs codebook dim {}",
            z.ncols(),
            codebook.dim()
        )));
    }
    let mut ids = Vec::with_capacity(z.nrows());
    let mut values = Array2::zeros((z.nrows(), codebook.dim()));
    for (t, frame) in z.rows().into_iter().enumerate() {
        let mut best = 0usize;
        let mut best_d = f64::INFINITY;
        for (k, entry) in codebook.entries.rows().into_iter().enumerate() {
            let d: f64 = frame
                .iter()
                .zip(entry.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = k;
            }
        }
        ids.push(best);
        values.row_mut(t).assign(&codebook.entries.row(best));
    }
    Ok((
        QuantizedRepr {
            values,
            source: QuantSource::NnLookup,
        },
        CodeSequence { ids },
    ))
}

/// Bi-directional pre-training loss:
/// `||sg(Z_c) - Z_q||^2 + beta_commit * ||Z_c - sg(Z_q)||^2`, mean over all
/// elements. The first term reaches only the codebook entries behind `z_q`,
/// the second only the encoder behind `z_c`.
pub fn codebook_pretrain_loss<'t>(z_c: Var<'t>, z_q: Var<'t>, beta_commit: f64) -> Var<'t> {
    let reconstruction = z_c.stop_gradient().sub(z_q).square().mean_all();
    let commitment = z_c.sub(z_q.stop_gradient()).square().mean_all();
    reconstruction.add(commitment.scale(beta_commit))
}

/// Mean usage histogram of a code sequence over a codebook of size `n`.
pub fn usage_histogram(codes: &CodeSequence, n: usize) -> Vec<usize> {
    let mut usage = vec![0usize; n];
    for &id in &codes.ids {
        usage[id] += 1;
    }
    usage
}
