//! CTC output head utilities: vocabulary, forward-algorithm CTC loss with
//! analytic gradients, greedy decoding, WER, code accuracy, and the metrics
//! report emitted by evaluation runs.

use indexmap::IndexMap;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::codebook::CodeSequence;
use crate::error::{Error, Result};

const LOG_FLOOR: f64 = -1e30;

/// 30-symbol CTC vocabulary: blank, word boundary, apostrophe, unknown, plus
/// the 26 letters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Vocab {
    pub symbols: Vec<String>,
    pub blank_id: usize,
}

impl Default for Vocab {
    fn default() -> Self {
        let mut symbols = vec!["<blank>".into(), "|".into(), "'".into(), "<unk>".into()];
        symbols.extend(('a'..='z').map(|c| c.to_string()));
        Vocab { symbols, blank_id: 0 }
    }
}

impl Vocab {
    pub fn size(&self) -> usize {
        self.symbols.len()
    }

    pub fn id_of(&self, c: char) -> usize {
        let s = match c {
            ' ' => "|".to_string(),
            other => other.to_string(),
        };
        self.symbols
            .iter()
            .position(|sym| *sym == s)
            .unwrap_or(3) // <unk>
    }

    pub fn encode(&self, text: &str) -> Vec<usize> {
        text.chars().map(|c| self.id_of(c)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| match self.symbols[i].as_str() {
                "|" => " ".to_string(),
                s => s.to_string(),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub text: String,
    pub frame_ids: Vec<usize>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConditionMetrics {
    pub noise_type: String,
    pub snr_db: f64,
    pub wer: f64,
    pub code_acc: Option<f64>,
    pub n_utts: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub conditions: Vec<ConditionMetrics>,
    pub loss_curves: IndexMap<String, Vec<f64>>,
}

impl MetricsReport {
    pub fn mean_wer(&self) -> f64 {
        let n: usize = self.conditions.iter().map(|c| c.n_utts).sum();
        if n == 0 {
            return 0.0;
        }
        self.conditions
            .iter()
            .map(|c| c.wer * c.n_utts as f64)
            .sum::<f64>()
            / n as f64
    }

    /// Code accuracy averaged over noise types, per SNR, sorted by SNR.
    pub fn code_accuracy_by_snr(&self) -> Vec<(f64, f64)> {
        let mut by_snr: IndexMap<u64, (f64, usize)> = IndexMap::new();
        let mut order: Vec<f64> = Vec::new();
        for c in &self.conditions {
            let Some(acc) = c.code_acc else { continue };
            let key = c.snr_db.to_bits();
            if !by_snr.contains_key(&key) {
                order.push(c.snr_db);
            }
            let e = by_snr.entry(key).or_insert((0.0, 0));
            e.0 += acc;
            e.1 += 1;
        }
        order.sort_by(|a, b| a.partial_cmp(b).unwrap());
        order
            .into_iter()
            .map(|snr| {
                let (sum, n) = by_snr[&snr.to_bits()];
                (snr, sum / n as f64)
            })
            .collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("noise_type,snr_db,wer,code_acc,n_utts\n");
        for c in &self.conditions {
            let acc = c
                .code_acc
                .map(|a| format!("{a:.6}"))
                .unwrap_or_default();
            out.push_str(&format!(
                "{},{},{:.6},{},{}\n",
                c.noise_type, c.snr_db, c.wer, acc, c.n_utts
            ));
        }
        out
    }
}

fn extend_with_blanks(target: &[usize], blank: usize) -> Vec<usize> {
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(blank);
    for &t in target {
        ext.push(t);
        ext.push(blank);
    }
    ext
}

/// Minimum frame count needed to emit `target` (repeats require a separating
/// blank).
pub fn min_frames_for(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn log_add(a: f64, b: f64) -> f64 {
    if a <= LOG_FLOOR {
        return b;
    }
    if b <= LOG_FLOOR {
        return a;
    }
    let m = a.max(b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

fn ctc_alpha(log_probs: &Array2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let t_len = log_probs.nrows();
    let s_len = ext.len();
    let mut alpha = Array2::from_elem((t_len, s_len), LOG_FLOOR);
    alpha[[0, 0]] = log_probs[[0, ext[0]]];
    if s_len > 1 {
        alpha[[0, 1]] = log_probs[[0, ext[1]]];
    }
    for t in 1..t_len {
        for s in 0..s_len {
            let mut acc = alpha[[t - 1, s]];
            if s >= 1 {
                acc = log_add(acc, alpha[[t - 1, s - 1]]);
            }
            if s >= 2 && ext[s] != blank && ext[s] != ext[s - 2] {
                acc = log_add(acc, alpha[[t - 1, s - 2]]);
            }
            alpha[[t, s]] = acc + log_probs[[t, ext[s]]];
        }
    }
    alpha
}

fn ctc_beta(log_probs: &Array2<f64>, ext: &[usize], blank: usize) -> Array2<f64> {
    let t_len = log_probs.nrows();
    let s_len = ext.len();
    let mut beta = Array2::from_elem((t_len, s_len), LOG_FLOOR);
    beta[[t_len - 1, s_len - 1]] = 0.0;
    if s_len > 1 {
        beta[[t_len - 1, s_len - 2]] = 0.0;
    }
    for t in (0..t_len - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[[t + 1, s]] + log_probs[[t + 1, ext[s]]];
            if s + 1 < s_len {
                acc = log_add(acc, beta[[t + 1, s + 1]] + log_probs[[t + 1, ext[s + 1]]]);
            }
            if s + 2 < s_len && ext[s + 2] != blank && ext[s + 2] != ext[s] {
                acc = log_add(acc, beta[[t + 1, s + 2]] + log_probs[[t + 1, ext[s + 2]]]);
            }
            beta[[t, s]] = acc;
        }
    }
    beta
}

/// CTC loss value: `-log` total probability over all valid alignments.
/// `log_probs` rows must be log-softmax distributions over the vocabulary.
pub fn ctc_loss_value(log_probs: &Array2<f64>, target: &[usize], blank: usize) -> Result<f64> {
    let t_len = log_probs.nrows();
    if t_len == 0 {
        return Err(Error::invalid_argument("empty log_probs"));
    }
    if min_frames_for(target) > t_len {
        return Err(Error::Infeasible(format!(
            "target needs {} frames, have {t_len}",
            min_frames_for(target)
        )));
    }
    let ext = extend_with_blanks(target, blank);
    let alpha = ctc_alpha(log_probs, &ext, blank);
    let s_len = ext.len();
    let mut total = alpha[[t_len - 1, s_len - 1]];
    if s_len > 1 {
        total = log_add(total, alpha[[t_len - 1, s_len - 2]]);
    }
    Ok(-total)
}

/// CTC loss as a tape node; the gradient w.r.t. `log_probs` comes from the
/// forward-backward posteriors.
pub fn ctc_loss<'t>(
    tape: &'t Tape,
    log_probs: Var<'t>,
    target: &[usize],
    blank: usize,
) -> Result<Var<'t>> {
    let lp = log_probs.value();
    let loss = ctc_loss_value(&lp, target, blank)?;
    let ext = extend_with_blanks(target, blank);
    let alpha = ctc_alpha(&lp, &ext, blank);
    let beta = ctc_beta(&lp, &ext, blank);
    let log_p = -loss;
    let (t_len, v) = lp.dim();
    let mut grad = Array2::zeros((t_len, v));
    for t in 0..t_len {
        for (s, &lab) in ext.iter().enumerate() {
            let g = alpha[[t, s]] + beta[[t, s]] - log_p;
            if g > LOG_FLOOR / 2.0 {
                grad[[t, lab]] -= g.exp();
            }
        }
    }
    Ok(tape.custom(
        &[log_probs],
        Array2::from_elem((1, 1), loss),
        move |g, _, _| vec![&grad * g[[0, 0]]],
    ))
}

/// Per-frame argmax, collapse repeats, drop blanks.
pub fn greedy_decode(log_probs: &Array2<f64>, vocab: &Vocab) -> Hypothesis {
    let frame_ids: Vec<usize> = log_probs
        .rows()
        .into_iter()
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|(_, a), (_, b)| a.partial_cmp(b).unwrap())
                .map(|(i, _)| i)
                .unwrap_or(vocab.blank_id)
        })
        .collect();
    let text = collapse(&frame_ids, vocab);
    Hypothesis { text, frame_ids }
}

pub fn collapse(frame_ids: &[usize], vocab: &Vocab) -> String {
    let mut out = Vec::new();
    let mut prev = None;
    for &id in frame_ids {
        if Some(id) != prev && id != vocab.blank_id {
            out.push(id);
        }
        prev = Some(id);
    }
    vocab.decode(&out)
}

/// Word error rate: Levenshtein distance over words divided by reference
/// length.
pub fn wer(reference: &[&str], hypothesis: &[&str]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::invalid_argument("empty reference"));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

fn levenshtein(a: &[&str], b: &[&str]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0usize; b.len() + 1];
    for (i, wa) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, wb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(wa != wb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// Character error rate used by the toy evaluation: every character is
/// treated as one "word".
pub fn cer(reference: &str, hypothesis: &str) -> Result<f64> {
    let r: Vec<String> = reference.chars().map(String::from).collect();
    let h: Vec<String> = hypothesis.chars().map(String::from).collect();
    let rr: Vec<&str> = r.iter().map(String::as_str).collect();
    let hh: Vec<&str> = h.iter().map(String::as_str).collect();
    wer(&rr, &hh)
}

/// Fraction of frames whose predicted code matches the reference code.
pub fn code_accuracy(pred: &CodeSequence, truth: &CodeSequence) -> Result<f64> {
    if pred.ids.len() != truth.ids.len() {
        return Err(Error::ShapeMismatch(format!(
            "code sequences of length {} vs {}",
            pred.ids.len(),
            truth.ids.len()
        )));
    }
    if pred.ids.is_empty() {
        return Ok(0.0);
    }
    let hits = pred
        .ids
        .iter()
        .zip(&truth.ids)
        .filter(|(a, b)| a == b)
        .count();
    Ok(hits as f64 / pred.ids.len() as f64)
}
