//! Slow, direct metric implementations and toy-corpus generators shared by
//! the integration tests.

#![allow(dead_code)]

use rand::Rng;

pub type Sent = Vec<String>;

fn grams(s: &[String], n: usize) -> Vec<Vec<String>> {
    if s.len() < n {
        return Vec::new();
    }
    (0..=s.len() - n).map(|i| s[i..i + n].to_vec()).collect()
}

fn count(list: &[Vec<String>], g: &[String]) -> usize {
    list.iter().filter(|x| x.as_slice() == g).count()
}

fn distinct(list: &[Vec<String>]) -> Vec<Vec<String>> {
    let mut out: Vec<Vec<String>> = Vec::new();
    for g in list {
        if !out.contains(g) {
            out.push(g.clone());
        }
    }
    out
}

pub fn bleu(cands: &[Sent], refs: &[Vec<Sent>]) -> [f64; 4] {
    let mut p = [0.0; 4];
    for n in 1..=4 {
        let (mut num, mut den) = (0usize, 0usize);
        for (c, rs) in cands.iter().zip(refs) {
            let cg = grams(c, n);
            den += cg.len();
            for g in distinct(&cg) {
                let best = rs.iter().map(|r| count(&grams(r, n), &g)).max().unwrap();
                num += count(&cg, &g).min(best);
            }
        }
        p[n - 1] = if den == 0 { 0.0 } else { num as f64 / den as f64 };
    }
    let c: usize = cands.iter().map(Vec::len).sum();
    let mut r = 0usize;
    for (cand, rs) in cands.iter().zip(refs) {
        let mut best = rs[0].len();
        for x in rs {
            let (d, db) = (x.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < db || (d == db && x.len() < best) {
                best = x.len();
            }
        }
        r += best;
    }
    let bp = if c > r {
        1.0
    } else if c == 0 {
        0.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };
    let mut out = [0.0; 4];
    for n in 1..=4 {
        if p[..n].iter().all(|&x| x > 0.0) {
            let geo: f64 = p[..n].iter().map(|x| x.ln()).sum::<f64>() / n as f64;
            out[n - 1] = bp * geo.exp();
        }
    }
    out
}

fn is_subsequence(sub: &[&String], of: &[String]) -> bool {
    let mut it = of.iter();
    sub.iter().all(|w| it.any(|x| x == *w))
}

/// LCS length by enumerating every subsequence of `a`.
pub fn lcs_exhaustive(a: &[String], b: &[String]) -> usize {
    assert!(a.len() <= 16);
    let mut best = 0;
    for mask in 0u32..(1 << a.len()) {
        let sub: Vec<&String> = (0..a.len()).filter(|i| mask >> i & 1 == 1).map(|i| &a[i]).collect();
        if sub.len() > best && is_subsequence(&sub, b) {
            best = sub.len();
        }
    }
    best
}

pub fn rouge_l(cands: &[Sent], refs: &[Vec<Sent>]) -> f64 {
    let beta2 = 1.2f64 * 1.2;
    let mut total = 0.0;
    for (c, rs) in cands.iter().zip(refs) {
        let mut best = 0.0f64;
        for r in rs {
            let l = lcs_exhaustive(c, r) as f64;
            if l > 0.0 {
                let (rec, prec) = (l / r.len() as f64, l / c.len() as f64);
                best = best.max((1.0 + beta2) * rec * prec / (rec + beta2 * prec));
            }
        }
        total += best;
    }
    total / cands.len() as f64
}

pub fn cider_d_segments(cands: &[Sent], refs: &[Vec<Sent>]) -> Vec<f64> {
    let m = cands.len() as f64;
    let mut scores = vec![0.0; cands.len()];
    for n in 1..=4 {
        let mut vocab: Vec<Vec<String>> = Vec::new();
        for s in cands.iter().chain(refs.iter().flatten()) {
            for g in grams(s, n) {
                if !vocab.contains(&g) {
                    vocab.push(g);
                }
            }
        }
        let df: Vec<f64> = vocab
            .iter()
            .map(|g| {
                let k = refs.iter().filter(|rs| rs.iter().any(|r| count(&grams(r, n), g) > 0)).count();
                k.max(1) as f64
            })
            .collect();
        let vec_of = |s: &Sent| -> Vec<f64> {
            let gs = grams(s, n);
            vocab
                .iter()
                .zip(&df)
                .map(|(g, d)| count(&gs, g) as f64 * (m / d).ln())
                .collect()
        };
        for (i, (c, rs)) in cands.iter().zip(refs).enumerate() {
            let vc = vec_of(c);
            let nc = vc.iter().map(|x| x * x).sum::<f64>().sqrt();
            let mut acc = 0.0;
            for r in rs {
                let vr = vec_of(r);
                let nr = vr.iter().map(|x| x * x).sum::<f64>().sqrt();
                if nc == 0.0 || nr == 0.0 {
                    continue;
                }
                let dot: f64 = vc.iter().zip(&vr).map(|(x, y)| x.min(*y) * y).sum();
                let delta = c.len() as f64 - r.len() as f64;
                acc += dot / (nc * nr) * (-delta * delta / 72.0).exp();
            }
            scores[i] += 10.0 * acc / (4.0 * rs.len() as f64);
        }
    }
    scores
}

pub fn cider_d(cands: &[Sent], refs: &[Vec<Sent>]) -> f64 {
    cider_d_segments(cands, refs).iter().sum::<f64>() / cands.len() as f64
}

/// Random corpus over a five-word alphabet: 2–6 segments, 1–3 references each.
pub fn toy_corpus<R: Rng>(rng: &mut R) -> (Vec<Sent>, Vec<Vec<Sent>>) {
    let words = ["a", "b", "c", "d", "e"];
    let sent = |rng: &mut R, lo: usize| -> Sent {
        let len = rng.random_range(lo..=8);
        (0..len).map(|_| words[rng.random_range(0..words.len())].to_string()).collect()
    };
    let segs = rng.random_range(2..=6);
    let mut cands = Vec::new();
    let mut refs = Vec::new();
    for _ in 0..segs {
        cands.push(sent(rng, 1));
        let k = rng.random_range(1..=3);
        refs.push((0..k).map(|_| sent(rng, 1)).collect());
    }
    (cands, refs)
}
