//! Synthetic speech-like corpus: deterministic formant-burst utterances,
//! parametric noise generators, exact-SNR mixing, and JSON manifests.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

/// Samples per token burst and per inter-token gap, at 16 kHz.
pub const TOKEN_SAMPLES: usize = 1280;
pub const GAP_SAMPLES: usize = 320;

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    pub samples: Vec<f64>,
    pub transcript: String,
    pub duration_s: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, PartialOrd, Ord)]
#[serde(rename_all = "snake_case")]
pub enum NoiseType {
    // stationary
    Hum,
    Fan,
    Engine,
    // non-stationary
    Babble,
    Crowd,
    Appliance,
    Clatter,
}

impl NoiseType {
    pub const ALL: [NoiseType; 7] = [
        NoiseType::Hum,
        NoiseType::Fan,
        NoiseType::Engine,
        NoiseType::Babble,
        NoiseType::Crowd,
        NoiseType::Appliance,
        NoiseType::Clatter,
    ];

    pub fn is_stationary(self) -> bool {
        matches!(self, NoiseType::Hum | NoiseType::Fan | NoiseType::Engine)
    }

    pub fn name(self) -> &'static str {
        match self {
            NoiseType::Hum => "hum",
            NoiseType::Fan => "fan",
            NoiseType::Engine => "engine",
            NoiseType::Babble => "babble",
            NoiseType::Crowd => "crowd",
            NoiseType::Appliance => "appliance",
            NoiseType::Clatter => "clatter",
        }
    }
}

#[derive(Debug, Clone)]
pub struct NoiseClip {
    pub id: String,
    pub noise_type: NoiseType,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NoisyPair {
    pub clean: Utterance,
    pub noisy_samples: Vec<f64>,
    pub snr_db: f64,
    pub noise_id: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub path: String,
    pub transcript: String,
    pub split: Split,
    pub snr_db: Option<f64>,
    pub noise_type: Option<NoiseType>,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub corpus_seed: u64,
    pub entries: Vec<ManifestEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusConfig {
    /// Number of distinct tokens; tokens are the first `alphabet_size`
    /// lowercase letters.
    pub alphabet_size: usize,
    pub tokens_min: usize,
    pub tokens_max: usize,
    pub train_count: usize,
    pub valid_count: usize,
    pub test_count: usize,
    pub snr_grid_db: Vec<f64>,
    pub noise_types: Vec<NoiseType>,
    pub seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            alphabet_size: 8,
            tokens_min: 3,
            tokens_max: 5,
            train_count: 24,
            valid_count: 4,
            test_count: 8,
            snr_grid_db: vec![0.0, 5.0, 10.0, 15.0, 20.0, 25.0],
            noise_types: NoiseType::ALL.to_vec(),
            seed: 17,
        }
    }
}

/// Sinusoidal "formant" frequencies assigned to a token. Even token indices
/// carry three formants, odd ones two.
pub fn token_formants(token_index: usize) -> Vec<f64> {
    let i = token_index as f64;
    let mut f = vec![250.0 + 60.0 * i, 1000.0 + 90.0 * i];
    if token_index % 2 == 0 {
        f.push(2400.0 + 120.0 * i);
    }
    f
}

fn token_char(token_index: usize) -> char {
    (b'a' + token_index as u8) as char
}

pub fn char_token_index(c: char) -> Option<usize> {
    if c.is_ascii_lowercase() {
        Some((c as u8 - b'a') as usize)
    } else {
        None
    }
}

/// Render the waveform for a known transcript. Pure function of its inputs.
pub fn render_transcript(transcript: &str) -> Result<Vec<f64>> {
    let mut samples = Vec::new();
    let formant_amps = [1.0, 0.6, 0.35];
    for c in transcript.chars() {
        let idx = char_token_index(c)
            .ok_or_else(|| Error::invalid_argument(format!("non-token character {c:?}")))?;
        let formants = token_formants(idx);
        for n in 0..TOKEN_SAMPLES {
            let t = n as f64 / SAMPLE_RATE as f64;
            // raised-cosine envelope over the burst
            let env = 0.5 * (1.0 - (2.0 * std::f64::consts::PI * n as f64 / TOKEN_SAMPLES as f64).cos());
            let mut s = 0.0;
            for (f, a) in formants.iter().zip(formant_amps.iter()) {
                s += a * (2.0 * std::f64::consts::PI * f * t).sin();
            }
            samples.push(0.25 * env * s);
        }
        samples.extend(std::iter::repeat(0.0).take(GAP_SAMPLES));
    }
    Ok(samples)
}

/// Deterministic synthetic utterance: `token_count` formant bursts whose
/// token identities are drawn from the first `alphabet_size` letters.
pub fn synth_clean_cfg(token_count: usize, seed: u64, alphabet_size: usize) -> Result<Utterance> {
    if token_count == 0 {
        return Err(Error::invalid_argument("token_count must be >= 1"));
    }
    if alphabet_size == 0 || alphabet_size > 26 {
        return Err(Error::invalid_argument("alphabet_size must be in 1..=26"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let transcript: String = (0..token_count)
        .map(|_| token_char(rng.gen_range(0..alphabet_size)))
        .collect();
    let samples = render_transcript(&transcript)?;
    let duration_s = samples.len() as f64 / SAMPLE_RATE as f64;
    Ok(Utterance {
        id: format!("synth-{seed}-{token_count}"),
        samples,
        transcript,
        duration_s,
    })
}

pub fn synth_clean(token_count: usize, seed: u64) -> Result<Utterance> {
    synth_clean_cfg(token_count, seed, 26)
}

/// Parametric noise generator; deterministic given (noise_type, seed, len).
pub fn synth_noise(noise_type: NoiseType, len: usize, seed: u64) -> NoiseClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6e6f_6973);
    let sr = SAMPLE_RATE as f64;
    let tau = 2.0 * std::f64::consts::PI;
    let mut samples = vec![0.0f64; len];
    match noise_type {
        NoiseType::Hum => {
            let f0 = rng.gen_range(48.0..52.0);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / sr;
                *s = (tau * f0 * t).sin()
                    + 0.5 * (tau * 2.0 * f0 * t).sin()
                    + 0.25 * (tau * 3.0 * f0 * t).sin()
                    + 0.05 * rng.gen_range(-1.0..1.0);
            }
        }
        NoiseType::Fan => {
            // low-passed white noise (single-pole smoothing)
            let mut state = 0.0;
            for s in samples.iter_mut() {
                state = 0.95 * state + 0.05 * rng.gen_range(-1.0f64..1.0);
                *s = state * 8.0;
            }
        }
        NoiseType::Engine => {
            let f0 = rng.gen_range(80.0..120.0);
            let mut state = 0.0;
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / sr;
                state = 0.9 * state + 0.1 * rng.gen_range(-1.0f64..1.0);
                *s = (tau * f0 * t).sin() + 0.4 * (tau * 2.0 * f0 * t).sin() + 2.0 * state;
            }
        }
        NoiseType::Babble => {
            // several slowly modulated tones in the speech band
            let voices: Vec<(f64, f64, f64)> = (0..6)
                .map(|_| {
                    (
                        rng.gen_range(200.0..2800.0),
                        rng.gen_range(0.5..3.0),
                        rng.gen_range(0.0..tau),
                    )
                })
                .collect();
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / sr;
                for &(f, m, phase) in &voices {
                    let env = 0.5 * (1.0 + (tau * m * t + phase).sin());
                    *s += env * (tau * f * t).sin() / 6.0;
                }
            }
        }
        NoiseType::Crowd => {
            let m = rng.gen_range(0.8..2.0);
            let phase = rng.gen_range(0.0..tau);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / sr;
                let env = 0.55 + 0.45 * (tau * m * t + phase).sin();
                *s = env * rng.gen_range(-1.0..1.0);
            }
        }
        NoiseType::Appliance => {
            // gated broadband bursts with a tonal floor
            let gate_hz = rng.gen_range(1.5..4.0);
            let f0 = rng.gen_range(300.0..600.0);
            for (n, s) in samples.iter_mut().enumerate() {
                let t = n as f64 / sr;
                let on = ((tau * gate_hz * t).sin() > 0.0) as u8 as f64;
                *s = on * rng.gen_range(-1.0..1.0) + 0.2 * (tau * f0 * t).sin();
            }
        }
        NoiseType::Clatter => {
            // sparse impulsive events over a quiet floor
            for s in samples.iter_mut() {
                *s = 0.05 * rng.gen_range(-1.0..1.0);
            }
            let events = (len / 1600).max(1);
            for _ in 0..events {
                let start = rng.gen_range(0..len);
                let decay = rng.gen_range(30.0..120.0);
                let amp = rng.gen_range(0.8..1.5);
                for k in 0..800.min(len - start) {
                    let t = k as f64 / sr;
                    samples[start + k] += amp * (-decay * t).exp() * rng.gen_range(-1.0..1.0);
                }
            }
        }
    }
    NoiseClip {
        id: format!("{}-{seed}", noise_type.name()),
        noise_type,
        samples,
    }
}

pub fn rms(samples: &[f64]) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// SNR of a mixture relative to its known clean component, in dB.
pub fn achieved_snr_db(clean: &[f64], mixed: &[f64]) -> f64 {
    let noise: Vec<f64> = mixed.iter().zip(clean).map(|(m, c)| m - c).collect();
    20.0 * (rms(clean) / rms(&noise)).log10()
}

/// Mix noise into clean speech at an exact RMS-defined SNR. The noise is
/// tiled/cropped to the clean length with a seed-derived offset.
pub fn mix_at_snr(clean: &[f64], noise: &[f64], snr_db: f64, seed: u64) -> Result<Vec<f64>> {
    if rms(clean) == 0.0 {
        return Err(Error::DegenerateInput("clean signal has zero power".into()));
    }
    if noise.is_empty() || rms(noise) == 0.0 {
        return Err(Error::DegenerateInput("noise signal has zero power".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d69_78);
    let offset = rng.gen_range(0..noise.len());
    let segment: Vec<f64> = (0..clean.len())
        .map(|i| noise[(offset + i) % noise.len()])
        .collect();
    let seg_rms = rms(&segment);
    if seg_rms == 0.0 {
        return Err(Error::DegenerateInput("noise segment has zero power".into()));
    }
    let gain = rms(clean) / (seg_rms * 10f64.powf(snr_db / 20.0));
    Ok(clean
        .iter()
        .zip(&segment)
        .map(|(c, n)| c + gain * n)
        .collect())
}

/// Build a [`NoisyPair`] with a freshly generated noise clip.
pub fn make_noisy_pair(
    clean: &Utterance,
    noise_type: NoiseType,
    snr_db: f64,
    seed: u64,
) -> Result<NoisyPair> {
    let clip = synth_noise(noise_type, clean.samples.len().max(SAMPLE_RATE as usize), seed);
    let noisy_samples = mix_at_snr(&clean.samples, &clip.samples, snr_db, seed)?;
    Ok(NoisyPair {
        clean: clean.clone(),
        noisy_samples,
        snr_db,
        noise_id: clip.id,
        seed,
    })
}

fn split_plan(cfg: &CorpusConfig) -> Vec<(Split, usize)> {
    vec![
        (Split::Train, cfg.train_count),
        (Split::Valid, cfg.valid_count),
        (Split::Test, cfg.test_count),
    ]
}

/// Generate the corpus on disk: noisy wav per entry plus one manifest JSON
/// per split. Deterministic given `cfg.seed`.
pub fn build_manifest(cfg: &CorpusConfig, out_dir: &Path) -> Result<Manifest> {
    if cfg.noise_types.is_empty() || cfg.snr_grid_db.is_empty() {
        return Err(Error::invalid_argument("noise_types and snr_grid_db must be non-empty"));
    }
    fs::create_dir_all(out_dir)?;
    let mut entries = Vec::new();
    let mut counter = 0u64;
    for (split, count) in split_plan(cfg) {
        for i in 0..count {
            let utt_seed = cfg
                .seed
                .wrapping_mul(0x9e37_79b9_7f4a_7c15)
                .wrapping_add(counter);
            counter += 1;
            let mut rng = ChaCha8Rng::seed_from_u64(utt_seed);
            let token_count = rng.gen_range(cfg.tokens_min..=cfg.tokens_max);
            let mut clean = synth_clean_cfg(token_count, utt_seed, cfg.alphabet_size)?;
            clean.id = format!("{}-{i:04}", split.name());
            // round-robin over conditions keeps every (noise, snr) cell populated
            let noise_type = cfg.noise_types[i % cfg.noise_types.len()];
            let snr_db = cfg.snr_grid_db[(i / cfg.noise_types.len()) % cfg.snr_grid_db.len()];
            let pair = make_noisy_pair(&clean, noise_type, snr_db, utt_seed)?;
            let rel_path = format!("{}.wav", clean.id);
            write_wav(&out_dir.join(&rel_path), &pair.noisy_samples)?;
            entries.push(ManifestEntry {
                id: clean.id.clone(),
                path: rel_path,
                transcript: clean.transcript.clone(),
                split,
                snr_db: Some(snr_db),
                noise_type: Some(noise_type),
                seed: utt_seed,
            });
        }
    }
    let manifest = Manifest {
        corpus_seed: cfg.seed,
        entries,
    };
    for (split, _) in split_plan(cfg) {
        let split_manifest = Manifest {
            corpus_seed: cfg.seed,
            entries: manifest
                .entries
                .iter()
                .filter(|e| e.split == split)
                .cloned()
                .collect(),
        };
        let json = serde_json::to_string_pretty(&split_manifest).expect("manifest serializes");
        fs::write(out_dir.join(format!("{}.json", split.name())), json)?;
    }
    Ok(manifest)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("manifest parse: {e}")))
}

/// 16-bit PCM mono wav at 16 kHz.
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer =
        hound::WavWriter::create(path, spec).map_err(|e| Error::Wav(e.to_string()))?;
    for &s in samples {
        let q = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer.write_sample(q).map_err(|e| Error::Wav(e.to_string()))?;
    }
    writer.finalize().map_err(|e| Error::Wav(e.to_string()))?;
    Ok(())
}

/// Read a 16-bit PCM wav, resampling to 16 kHz if needed (linear
/// interpolation), and validate it into the internal form.
pub fn ingest_wav(path: &Path) -> Result<Utterance> {
    let mut reader = hound::WavReader::open(path).map_err(|e| Error::Wav(e.to_string()))?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "unsupported wav encoding: {} bits {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let channels = spec.channels as usize;
    let raw: Vec<f64> = reader
        .samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| Error::Wav(e.to_string()))?
        .chunks(channels)
        .map(|frame| frame.iter().map(|&s| s as f64).sum::<f64>() / channels as f64 / i16::MAX as f64)
        .collect();
    let samples = if spec.sample_rate == SAMPLE_RATE {
        raw
    } else {
        resample_linear(&raw, spec.sample_rate, SAMPLE_RATE)
    };
    let duration_s = samples.len() as f64 / SAMPLE_RATE as f64;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "ingested".into());
    Ok(Utterance {
        id,
        samples,
        transcript: String::new(),
        duration_s,
    })
}

pub fn resample_linear(samples: &[f64], from_rate: u32, to_rate: u32) -> Vec<f64> {
    if samples.is_empty() || from_rate == to_rate {
        return samples.to_vec();
    }
    let ratio = to_rate as f64 / from_rate as f64;
    let out_len = (samples.len() as f64 * ratio).round() as usize;
    (0..out_len)
        .map(|i| {
            let src = i as f64 / ratio;
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(samples.len() - 1);
            let frac = src - lo as f64;
            samples[lo.min(samples.len() - 1)] * (1.0 - frac) + samples[hi] * frac
        })
        .collect()
}

/// Resolve a manifest entry back into a (clean, noisy) pair. Clean audio is
/// re-rendered from the transcript; noisy audio is read from disk.
pub fn load_pair(entry: &ManifestEntry, base_dir: &Path) -> Result<NoisyPair> {
    let clean_samples = render_transcript(&entry.transcript)?;
    let duration_s = clean_samples.len() as f64 / SAMPLE_RATE as f64;
    let clean = Utterance {
        id: entry.id.clone(),
        samples: clean_samples,
        transcript: entry.transcript.clone(),
        duration_s,
    };
    let noisy = ingest_wav(&base_dir.join(&entry.path))?;
    Ok(NoisyPair {
        clean,
        noisy_samples: noisy.samples,
        snr_db: entry.snr_db.unwrap_or(f64::INFINITY),
        noise_id: entry
            .noise_type
            .map(|n| n.name().to_string())
            .unwrap_or_else(|| "none".into()),
        seed: entry.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rustfft::{num_complex::Complex, FftPlanner};

    #[test]
    fn synth_clean_is_deterministic() {
        let a = synth_clean(3, 7).unwrap();
        let b = synth_clean(3, 7).unwrap();
        assert_eq!(a.transcript.len(), 3);
        assert_eq!(a.samples, b.samples);
        assert_eq!(a.transcript, b.transcript);
    }

    #[test]
    fn synth_clean_rejects_zero_tokens() {
        assert!(matches!(
            synth_clean(0, 0),
            Err(Error::InvalidArgument(_))
        ));
    }

    #[test]
    fn synth_clean_length_matches_duration() {
        let u = synth_clean(4, 123).unwrap();
        assert_eq!(u.samples.len(), (u.duration_s * SAMPLE_RATE as f64).round() as usize);
        assert!(u.samples.iter().all(|s| s.is_finite() && s.abs() <= 1.0));
    }

    /// FFT peak-pick oracle: the burst's dominant spectral peaks must land
    /// within one bin of the token's assigned formants.
    #[test]
    fn single_token_spectrum_peaks_at_assigned_formants() {
        let u = synth_clean_cfg(1, 0, 1).unwrap(); // token 'a' = index 0
        let formants = token_formants(0);
        let n = 1024;
        // steady-state window from the middle of the burst
        let start = TOKEN_SAMPLES / 2 - n / 2;
        let mut buf: Vec<Complex<f64>> = u.samples[start..start + n]
            .iter()
            .map(|&s| Complex::new(s, 0.0))
            .collect();
        FftPlanner::new().plan_fft_forward(n).process(&mut buf);
        let mags: Vec<f64> = buf[..n / 2].iter().map(|c| c.norm()).collect();
        let bin_hz = SAMPLE_RATE as f64 / n as f64;
        for f in formants {
            let expect_bin = (f / bin_hz).round() as usize;
            // local peak within +-1 bin of the formant
            let local_peak = (expect_bin.saturating_sub(1)..=expect_bin + 1)
                .map(|b| mags[b])
                .fold(0.0, f64::max);
            let global_peak = mags.iter().cloned().fold(0.0, f64::max);
            assert!(
                local_peak > 0.1 * global_peak,
                "no spectral peak near {f} Hz"
            );
            // the highest bin among neighbors must dominate its surroundings
            let far = mags[expect_bin + 8];
            assert!(local_peak > far, "peak at {f} Hz not prominent");
        }
    }

    #[test]
    fn mix_at_zero_db_uses_unit_gain_for_equal_rms() {
        // clean and noise with identical rms: 0 dB means the noise segment is
        // added unscaled
        let clean: Vec<f64> = (0..1600).map(|i| 0.1 * ((i % 2) as f64 * 2.0 - 1.0)).collect();
        let noise = clean.clone();
        let mixed = mix_at_snr(&clean, &noise, 0.0, 1).unwrap();
        let g_noise: Vec<f64> = mixed.iter().zip(&clean).map(|(m, c)| m - c).collect();
        assert!((rms(&g_noise) - rms(&clean)).abs() < 1e-12);
    }

    #[test]
    fn mix_snr_accurate_across_grid() {
        let clean = synth_clean(3, 5).unwrap();
        for (k, &snr) in [0.0, 5.0, 10.0, 15.0, 20.0, 25.0].iter().enumerate() {
            for noise_type in NoiseType::ALL {
                let clip = synth_noise(noise_type, clean.samples.len(), 40 + k as u64);
                let mixed = mix_at_snr(&clean.samples, &clip.samples, snr, 7).unwrap();
                let got = achieved_snr_db(&clean.samples, &mixed);
                assert!((got - snr).abs() <= 0.1, "{noise_type:?} at {snr} dB got {got}");
            }
        }
    }

    #[test]
    fn mix_rejects_silent_inputs() {
        let clean = vec![0.0; 100];
        let noise = vec![0.1; 100];
        assert!(matches!(
            mix_at_snr(&clean, &noise, 0.0, 0),
            Err(Error::DegenerateInput(_))
        ));
        assert!(matches!(
            mix_at_snr(&noise, &clean, 0.0, 0),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn noise_types_have_power_and_match_taxonomy() {
        for nt in NoiseType::ALL {
            let clip = synth_noise(nt, 16000, 3);
            assert!(rms(&clip.samples) > 0.0, "{nt:?} silent");
        }
        assert!(NoiseType::Hum.is_stationary());
        assert!(!NoiseType::Babble.is_stationary());
        assert_eq!(
            NoiseType::ALL.iter().filter(|n| n.is_stationary()).count(),
            3
        );
    }

    #[test]
    fn manifest_build_counts_and_determinism() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            train_count: 10,
            valid_count: 2,
            test_count: 2,
            ..CorpusConfig::default()
        };
        let m1 = build_manifest(&cfg, dir.path()).unwrap();
        assert_eq!(m1.entries.len(), 14);
        let train_json_1 = std::fs::read(dir.path().join("train.json")).unwrap();
        // ids disjoint across splits
        let mut ids: Vec<&str> = m1.entries.iter().map(|e| e.id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 14);

        let dir2 = tempfile::tempdir().unwrap();
        build_manifest(&cfg, dir2.path()).unwrap();
        let train_json_2 = std::fs::read(dir2.path().join("train.json")).unwrap();
        assert_eq!(train_json_1, train_json_2, "same seed must give byte-identical manifests");
    }

    #[test]
    fn load_pair_roundtrips_clean_and_noisy() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CorpusConfig {
            train_count: 2,
            valid_count: 1,
            test_count: 1,
            ..CorpusConfig::default()
        };
        let m = build_manifest(&cfg, dir.path()).unwrap();
        let pair = load_pair(&m.entries[0], dir.path()).unwrap();
        assert_eq!(pair.clean.transcript, m.entries[0].transcript);
        assert_eq!(pair.noisy_samples.len(), pair.clean.samples.len());
        // wav quantization is 16-bit; the stored mixture matches re-mixing
        // within quantization error
        let got = achieved_snr_db(&pair.clean.samples, &pair.noisy_samples);
        assert!((got - m.entries[0].snr_db.unwrap()).abs() < 0.2, "snr after wav roundtrip: {got}");
    }

    #[test]
    fn resample_doubles_length_from_8k() {
        let samples: Vec<f64> = (0..8000).map(|i| (i as f64 * 0.01).sin() * 0.5).collect();
        let up = resample_linear(&samples, 8000, 16000);
        assert!((up.len() as i64 - 16000).abs() <= 1);
    }

    #[test]
    fn ingest_rejects_unsupported_encoding() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f32.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert!(matches!(ingest_wav(&path), Err(Error::Format(_))));
    }
}
