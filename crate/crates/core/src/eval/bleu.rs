use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    #[default]
    None,
    /// Zero n-gram matches count as `0.1` matches.
    Method1,
}

fn ngrams(words: &[&str], n: usize) -> HashMap<Vec<String>, usize> {
    let mut out = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *out.entry(w.iter().map(|s| s.to_string()).collect()).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus BLEU-4 with uniform weights and brevity penalty, on a 0–100 scale.
pub fn bleu(candidates: &[String], references: &[String], smoothing: Smoothing) -> Result<f64> {
    if candidates.len() != references.len() {
        return Err(Error::Eval(format!(
            "{} candidates for {} references",
            candidates.len(),
            references.len()
        )));
    }
    if candidates.is_empty() {
        return Err(Error::Eval("BLEU over an empty corpus".into()));
    }
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut cand_len, mut ref_len) = (0usize, 0usize);
    for (c, r) in candidates.iter().zip(references) {
        let cw: Vec<&str> = c.split_whitespace().collect();
        let rw: Vec<&str> = r.split_whitespace().collect();
        cand_len += cw.len();
        ref_len += rw.len();
        for n in 1..=4 {
            let cg = ngrams(&cw, n);
            let rg = ngrams(&rw, n);
            for (g, k) in &cg {
                matched[n - 1] += (*k).min(rg.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    if cand_len == 0 {
        return Ok(0.0);
    }
    let mut log_sum = 0.0;
    for n in 0..4 {
        if total[n] == 0 {
            return Ok(0.0);
        }
        let m = match (matched[n], smoothing) {
            (0, Smoothing::None) => return Ok(0.0),
            (0, Smoothing::Method1) => 0.1,
            (k, _) => k as f64,
        };
        log_sum += (m / total[n] as f64).ln() / 4.0;
    }
    let bp = if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    };
    Ok(100.0 * bp * log_sum.exp())
}
