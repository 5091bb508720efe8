//! Corpus caption metrics: BLEU@1–4, ROUGE-L and CIDEr-D.
//!
//! All scorers take tokenized candidates and, per candidate, one or more
//! tokenized references. Corpus means are summed in sorted order so that
//! segment order cannot change a score.

mod report;
mod tokenize;

pub use report::{read_eval_jsonl, EvalRecord, MetricReport};
pub use tokenize::tokenize;

use std::collections::{BTreeMap, BTreeSet};

use crate::error::{Error, Result};

pub type Tokens = Vec<String>;

const ROUGE_BETA: f64 = 1.2;
const CIDER_SIGMA: f64 = 6.0;

fn check_corpus(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<()> {
    if cands.is_empty() {
        return Err(Error::arg("empty candidate corpus"));
    }
    if cands.len() != refs.len() {
        return Err(Error::arg(format!("{} candidates but {} reference sets", cands.len(), refs.len())));
    }
    if let Some(i) = refs.iter().position(|r| r.is_empty()) {
        return Err(Error::arg(format!("segment {i} has no reference")));
    }
    Ok(())
}

fn ngrams(tokens: &[String], n: usize) -> BTreeMap<&[String], usize> {
    let mut m = BTreeMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

fn sorted_mean(mut xs: Vec<f64>) -> f64 {
    let n = xs.len() as f64;
    xs.sort_by(f64::total_cmp);
    xs.iter().sum::<f64>() / n
}

/// Corpus BLEU for N = 1..4, no smoothing.
pub fn bleu(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<[f64; 4]> {
    check_corpus(cands, refs)?;
    let mut matched = [0usize; 4];
    let mut total = [0usize; 4];
    let (mut c_len, mut r_len) = (0usize, 0usize);
    for (cand, rs) in cands.iter().zip(refs) {
        c_len += cand.len();
        r_len += rs
            .iter()
            .map(|r| r.len())
            .min_by_key(|&l| (l.abs_diff(cand.len()), l))
            .expect("checked non-empty");
        for n in 1..=4 {
            let mut max_ref: BTreeMap<&[String], usize> = BTreeMap::new();
            for r in rs {
                for (g, k) in ngrams(r, n) {
                    let e = max_ref.entry(g).or_insert(0);
                    *e = (*e).max(k);
                }
            }
            for (g, k) in ngrams(cand, n) {
                matched[n - 1] += k.min(max_ref.get(g).copied().unwrap_or(0));
                total[n - 1] += k;
            }
        }
    }
    let bp = if c_len > r_len {
        1.0
    } else if c_len == 0 {
        0.0
    } else {
        (1.0 - r_len as f64 / c_len as f64).exp()
    };
    let mut out = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if matched[n] == 0 {
            break;
        }
        log_sum += (matched[n] as f64 / total[n] as f64).ln();
        out[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    Ok(out)
}

fn lcs(a: &[String], b: &[String]) -> usize {
    let mut row = vec![0usize; b.len() + 1];
    for x in a {
        let mut diag = 0;
        for (j, y) in b.iter().enumerate() {
            let up = row[j + 1];
            row[j + 1] = if x == y { diag + 1 } else { up.max(row[j]) };
            diag = up;
        }
    }
    row[b.len()]
}

fn rouge_segment(cand: &[String], rs: &[Tokens]) -> f64 {
    let b2 = ROUGE_BETA * ROUGE_BETA;
    rs.iter()
        .map(|r| {
            let l = lcs(cand, r) as f64;
            if l == 0.0 {
                return 0.0;
            }
            let rec = l / r.len() as f64;
            let prec = l / cand.len() as f64;
            (1.0 + b2) * rec * prec / (rec + b2 * prec)
        })
        .fold(0.0, f64::max)
}

/// Mean over segments of the best LCS F-measure against any reference.
pub fn rouge_l(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    check_corpus(cands, refs)?;
    Ok(sorted_mean(cands.iter().zip(refs).map(|(c, r)| rouge_segment(c, r)).collect()))
}

type TfIdf<'a> = BTreeMap<&'a [String], f64>;

fn tfidf<'a>(tokens: &'a [String], n: usize, df: &BTreeMap<&[String], usize>, m: f64) -> (TfIdf<'a>, f64) {
    let v: TfIdf = ngrams(tokens, n)
        .into_iter()
        .map(|(g, k)| {
            // n-grams absent from every reference set count as df = 1
            let d = df.get(g).copied().unwrap_or(0).max(1) as f64;
            (g, k as f64 * (m / d).ln())
        })
        .collect();
    let norm = v.values().map(|x| x * x).sum::<f64>().sqrt();
    (v, norm)
}

/// Per-segment CIDEr-D scores.
pub fn cider_d_segments(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<Vec<f64>> {
    check_corpus(cands, refs)?;
    if cands.len() < 2 {
        return Err(Error::arg("CIDEr-D needs at least 2 segments for document frequencies"));
    }
    let m = cands.len() as f64;
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut df: BTreeMap<&[String], usize> = BTreeMap::new();
        for rs in refs {
            let set: BTreeSet<&[String]> = rs.iter().flat_map(|r| ngrams(r, n).into_keys()).collect();
            for g in set {
                *df.entry(g).or_insert(0) += 1;
            }
        }
        for (i, (cand, rs)) in cands.iter().zip(refs).enumerate() {
            let (vc, nc) = tfidf(cand, n, &df, m);
            let mut acc = 0.0;
            for r in rs {
                let (vr, nr) = tfidf(r, n, &df, m);
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = vc
                    .iter()
                    .filter_map(|(g, &x)| vr.get(g).map(|&y| x.min(y) * y))
                    .sum();
                let gap = cand.len() as f64 - r.len() as f64;
                acc += dot / (nc * nr) * (-gap * gap / (2.0 * CIDER_SIGMA * CIDER_SIGMA)).exp();
            }
            scores[i] += 10.0 / rs.len() as f64 * acc / 4.0;
        }
    }
    Ok(scores)
}

/// Corpus CIDEr-D: mean of the per-segment scores.
pub fn cider_d(cands: &[Tokens], refs: &[Vec<Tokens>]) -> Result<f64> {
    Ok(sorted_mean(cider_d_segments(cands, refs)?))
}
