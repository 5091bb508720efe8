//! End-to-end acceptance run: one PASS/FAIL line per criterion.

mod support;

use std::io::Write;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use audiocap::decoder::{
    attend, beam_search, decode_step, greedy_decode, initial_state, teacher_forced_loss, DecoderConfig, DecoderVars,
    Memory, BOS, EOS,
};
use audiocap::dsp::{log_mel, MelConfig, MelFilterbank, Waveform, LOG_FLOOR};
use audiocap::encoder::{EmbeddingSequence, EncoderConfig};
use audiocap::metrics::{bleu, cider_d, cider_d_segments, rouge_l, MetricReport};
use audiocap::numerics::gradcheck::check;
use audiocap::numerics::{gru_cell, Graph, GruVars, NormMode, ParamStore, Tape, Tensor, Var};
use audiocap::pipeline::{
    caption_clips, finetune_loop, load_clips, pretrain_loop, score_captions, synth_generate, Checkpoint, Clip,
    SynthSpec, TrainConfig, TrainLog,
};
use audiocap::pretrain::{transfer_encoder, Task};
use audiocap::Error;

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn report(n: usize, name: &str, started: Instant, v: &Verdict) {
    let line = format!(
        "criterion {n} [{}] {name}: {} ({:.1} s)",
        if v.pass { "PASS" } else { "FAIL" },
        v.detail,
        started.elapsed().as_secs_f64()
    );
    let mut out = std::io::stdout().lock();
    writeln!(out, "{line}").unwrap();
    out.flush().unwrap();
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
}

// ---------------------------------------------------------------- criterion 1

type Probe = Box<dyn Fn(&mut Tape<f64>, &[Var]) -> audiocap::Result<Var>>;

/// Weighted sum of every output element, so no output coordinate is left unchecked.
fn project(t: &mut Tape<f64>, y: Var, seed: u64) -> audiocap::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = t.shape(y).to_vec();
    let w = t.constant(rand_tensor(&mut rng, &shape, -1.0, 1.0));
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn gradient_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut r = |shape: &[usize]| rand_tensor(&mut rng, shape, -1.0, 1.0);
    let positive = |t: Tensor<f64>| t.map(|x| x.abs() + 0.5);
    let away_from_zero = |t: Tensor<f64>| t.map(|x| if x >= 0.0 { x + 0.2 } else { x - 0.2 });

    let mut cases: Vec<(&str, Vec<Tensor<f64>>, Probe)> = vec![
        ("matmul", vec![r(&[3, 4]), r(&[4, 2])], Box::new(|t, v| { let y = t.matmul(v[0], v[1])?; project(t, y, 1) })),
        ("transpose", vec![r(&[3, 4])], Box::new(|t, v| { let y = t.transpose(v[0])?; project(t, y, 2) })),
        ("linear", vec![r(&[3, 4]), r(&[2, 4]), r(&[2])], Box::new(|t, v| { let y = t.linear(v[0], v[1], Some(v[2]))?; project(t, y, 3) })),
        ("add (broadcast)", vec![r(&[2, 3, 4]), r(&[3, 1])], Box::new(|t, v| { let y = t.add(v[0], v[1])?; project(t, y, 4) })),
        ("sub (broadcast)", vec![r(&[2, 3]), r(&[3])], Box::new(|t, v| { let y = t.sub(v[0], v[1])?; project(t, y, 5) })),
        ("mul (broadcast)", vec![r(&[2, 3, 4]), r(&[2, 1, 4])], Box::new(|t, v| { let y = t.mul(v[0], v[1])?; project(t, y, 6) })),
        ("div (broadcast)", vec![r(&[3, 4]), positive(r(&[4]))], Box::new(|t, v| { let y = t.div(v[0], v[1])?; project(t, y, 7) })),
        ("affine", vec![r(&[5])], Box::new(|t, v| { let y = t.affine(v[0], -1.3, 0.4); project(t, y, 8) })),
        ("scale", vec![r(&[5])], Box::new(|t, v| { let y = t.scale(v[0], 2.5); project(t, y, 9) })),
        ("relu", vec![away_from_zero(r(&[3, 4]))], Box::new(|t, v| { let y = t.relu(v[0]); project(t, y, 10) })),
        ("tanh", vec![r(&[3, 4])], Box::new(|t, v| { let y = t.tanh(v[0]); project(t, y, 11) })),
        ("sigmoid", vec![r(&[3, 4])], Box::new(|t, v| { let y = t.sigmoid(v[0]); project(t, y, 12) })),
        ("exp", vec![r(&[3, 4])], Box::new(|t, v| { let y = t.exp(v[0]); project(t, y, 13) })),
        ("ln", vec![positive(r(&[3, 4]))], Box::new(|t, v| { let y = t.ln(v[0]); project(t, y, 14) })),
        ("sum", vec![r(&[3, 4])], Box::new(|t, v| { let s = t.sum(v[0]); let y = t.mul(s, s)?; Ok(t.sum(y)) })),
        ("mean", vec![r(&[3, 4])], Box::new(|t, v| { let s = t.mean(v[0]); let y = t.mul(s, s)?; Ok(t.sum(y)) })),
        ("sum_axis", vec![r(&[2, 3, 4])], Box::new(|t, v| { let y = t.sum_axis(v[0], 1)?; project(t, y, 15) })),
        ("mean_axis", vec![r(&[2, 3, 4])], Box::new(|t, v| { let y = t.mean_axis(v[0], 2)?; project(t, y, 16) })),
        ("reshape", vec![r(&[2, 6])], Box::new(|t, v| { let y = t.reshape(v[0], &[3, 4])?; project(t, y, 17) })),
        ("permute", vec![r(&[2, 3, 4])], Box::new(|t, v| { let y = t.permute(v[0], &[2, 0, 1])?; project(t, y, 18) })),
        ("concat", vec![r(&[2, 3]), r(&[2, 2])], Box::new(|t, v| { let y = t.concat(&[v[0], v[1]], 1)?; project(t, y, 19) })),
        ("slice", vec![r(&[4, 5])], Box::new(|t, v| { let y = t.slice(v[0], 1, 1, 3)?; project(t, y, 20) })),
        ("softmax", vec![r(&[3, 5])], Box::new(|t, v| { let y = t.softmax(v[0], 1)?; project(t, y, 21) })),
        ("log_softmax", vec![r(&[3, 5])], Box::new(|t, v| { let y = t.log_softmax(v[0], 0)?; project(t, y, 22) })),
        ("masked_softmax", vec![r(&[3, 5])], Box::new(|t, v| { let y = t.masked_softmax(v[0], &[5, 1, 3])?; project(t, y, 23) })),
        ("cross_entropy", vec![r(&[4, 5])], Box::new(|t, v| t.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)]))),
        ("binary_cross_entropy", vec![r(&[3, 4])], Box::new(|t, v| {
            let y = Tensor::new(vec![3, 4], (0..12).map(|i| ((i * 7) % 3 == 0) as u8 as f64).collect())?;
            t.binary_cross_entropy(v[0], &y)
        })),
        ("conv2d", vec![r(&[2, 2, 3, 4]), r(&[3, 2, 3, 3])], Box::new(|t, v| { let y = t.conv2d(v[0], v[1])?; project(t, y, 24) })),
        ("avgpool2d", vec![r(&[1, 2, 4, 6])], Box::new(|t, v| { let y = t.avgpool2d(v[0], 2, 3)?; project(t, y, 25) })),
        ("batchnorm (train)", vec![r(&[3, 2, 2, 3]), positive(r(&[2])), r(&[2])], Box::new(|t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], NormMode::Train)?;
            project(t, y, 26)
        })),
        ("batchnorm (eval)", vec![r(&[3, 2, 2, 3]), positive(r(&[2])), r(&[2])], Box::new(|t, v| {
            let (y, _) = t.batchnorm(v[0], v[1], v[2], NormMode::Eval { mean: &[0.2, -0.1], var: &[0.7, 1.4] })?;
            project(t, y, 27)
        })),
        ("embedding", vec![r(&[5, 3])], Box::new(|t, v| { let y = t.embedding(v[0], &[4, 0, 4, 2])?; project(t, y, 28) })),
    ];
    let gru_inputs: Vec<Tensor<f64>> = {
        let (d_in, d_h) = (3, 2);
        let mut v = vec![r(&[2, d_in]), r(&[2, d_h])];
        for _ in 0..3 {
            v.extend([r(&[d_h, d_in]), r(&[d_h, d_h]), r(&[d_h])]);
        }
        v
    };
    cases.push((
        "gru_cell",
        gru_inputs,
        Box::new(|t, v| {
            let p = GruVars {
                w_r: v[2], u_r: v[3], b_r: v[4],
                w_z: v[5], u_z: v[6], b_z: v[7],
                w_n: v[8], u_n: v[9], b_n: v[10],
            };
            let h = gru_cell(t, v[0], v[1], &p)?;
            project(t, h, 29)
        }),
    ));

    let dec = DecoderConfig {
        vocab_size: 5,
        context_dim: 3,
        word_dim: 2,
        hidden_dim: 3,
        attention_dim: 2,
    };
    let mut prng = ChaCha8Rng::seed_from_u64(2);
    let p: ParamStore<f64> = dec.init_params(&mut prng);
    let mut dec_inputs: Vec<Tensor<f64>> = DecoderVars::NAMES
        .iter()
        .map(|n| rand_tensor(&mut prng, p.get(n).unwrap().shape(), -0.8, 0.8))
        .collect();
    dec_inputs.push(rand_tensor(&mut prng, &[2, 3, 3], -1.0, 1.0));
    cases.push((
        "teacher_forced_loss",
        dec_inputs,
        Box::new(|t, v| {
            let vars = DecoderVars::from_slice(&v[..14]);
            let mem = Memory::new(t, &vars, v[14], &[3, 2])?;
            teacher_forced_loss(t, &vars, &mem, &[vec![BOS, 4, 3, EOS], vec![BOS, 4, EOS]])
        }),
    ));

    let mut worst = (0.0f64, "");
    let mut failures = Vec::new();
    for (name, inputs, f) in &cases {
        if let Some(big) = inputs.iter().find(|t| t.len() > 64) {
            failures.push(format!("{name}: input of {} elements", big.len()));
            continue;
        }
        match check(inputs, 1e-6, f) {
            Ok(g) => {
                if g.max_rel_error > worst.0 {
                    worst = (g.max_rel_error, name);
                }
                if !(g.max_rel_error < 1e-4) {
                    failures.push(format!("{name}: {:.2e}", g.max_rel_error));
                }
            }
            Err(e) => failures.push(format!("{name}: {e}")),
        }
    }
    verdict(
        failures.is_empty(),
        format!(
            "{} checks, worst relative error {:.2e} ({}){}",
            cases.len(),
            worst.0,
            worst.1,
            if failures.is_empty() { String::new() } else { format!("; failing: {}", failures.join(", ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 2

fn random_decoder(rng: &mut ChaCha8Rng, v: usize, d: usize) -> ParamStore<f64> {
    let cfg = DecoderConfig {
        vocab_size: v,
        context_dim: d,
        word_dim: 3,
        hidden_dim: 4,
        attention_dim: 3,
    };
    let mut p: ParamStore<f64> = cfg.init_params(rng);
    for (_, t) in p.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.5..1.5));
    }
    p
}

fn attention(p: &ParamStore<f64>, e: &Tensor<f64>, h: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (t, d) = (e.shape()[0], e.shape()[1]);
    let mut g = Graph::new(p, false);
    let vars = DecoderVars::load(&mut g).unwrap();
    let seq = g.input(e.clone().reshape(vec![1, t, d]).unwrap());
    let mem = Memory::new(&mut g.tape, &vars, seq, &[t]).unwrap();
    let hv = g.input(Tensor::new(vec![1, h.len()], h.to_vec()).unwrap());
    let (a, c) = attend(&mut g.tape, &vars, &mem, hv).unwrap();
    (g.tape.value(a).data().to_vec(), g.tape.value(c).data().to_vec())
}

fn attention_suite() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst_sum = 0.0f64;
    let mut worst_hull = 0.0f64;
    let mut problems = Vec::new();
    for _ in 0..1000 {
        let (t, d) = (rng.random_range(1..8), rng.random_range(1..5));
        let p = random_decoder(&mut rng, 5, d);
        let e = rand_tensor(&mut rng, &[t, d], -3.0, 3.0);
        let h: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (a, c) = attention(&p, &e, &h);
        worst_sum = worst_sum.max((a.iter().sum::<f64>() - 1.0).abs());
        if a.iter().any(|&x| !(0.0..=1.0).contains(&x)) {
            problems.push("alpha outside [0, 1]".to_string());
        }
        for j in 0..d {
            let col: Vec<f64> = (0..t).map(|s| e.data()[s * d + j]).collect();
            let mix: f64 = a.iter().zip(&col).map(|(x, y)| x * y).sum();
            worst_hull = worst_hull.max((mix - c[j]).abs());
            let (lo, hi) = col.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
            if c[j] < lo - 1e-12 || c[j] > hi + 1e-12 {
                problems.push(format!("context outside the hull of the memory ({} not in [{lo}, {hi}])", c[j]));
            }
        }
        if t == 1 && (a[0] != 1.0 || c != e.data()) {
            problems.push(format!("singleton memory gave alpha {a:?}"));
        }
        let same = Tensor::new(vec![t, d], (0..t).flat_map(|_| e.data()[..d].to_vec()).collect()).unwrap();
        let (a2, c2) = attention(&p, &same, &h);
        if a2.iter().any(|&x| (x - 1.0 / t as f64).abs() > 1e-12)
            || c2.iter().zip(&e.data()[..d]).any(|(x, y)| (x - y).abs() > 1e-12)
        {
            problems.push("equal embeddings did not give uniform attention".into());
        }
    }
    if worst_sum > 1e-12 {
        problems.push(format!("sum of alpha off by {worst_sum:.2e}"));
    }
    if worst_hull > 1e-12 {
        problems.push(format!("context differs from the alpha-weighted mix by {worst_hull:.2e}"));
    }
    problems.dedup();
    verdict(
        problems.is_empty(),
        format!(
            "1000 instances, max |sum alpha - 1| = {worst_sum:.1e}, max hull residual = {worst_hull:.1e}{}",
            if problems.is_empty() { String::new() } else { format!("; {}", problems.join("; ")) }
        ),
    )
}

// ---------------------------------------------------------------- criterion 3

/// Log-probabilities of every next token after `prefix` (which starts with bos).
fn next_log_probs(p: &ParamStore<f64>, e: &EmbeddingSequence<f64>, prefix: &[usize]) -> Vec<f64> {
    let mut g = Graph::new(p, false);
    let vars = DecoderVars::load(&mut g).unwrap();
    let seq = g.input(e.values.clone().reshape(vec![1, e.len(), e.dim()]).unwrap());
    let mem = Memory::new(&mut g.tape, &vars, seq, &[e.len()]).unwrap();
    let mut h = initial_state(&mut g.tape, &vars, 1);
    let mut logits = Vec::new();
    for &tok in prefix {
        let s = decode_step(&mut g.tape, &vars, &mem, &[tok], h).unwrap();
        h = s.h;
        logits = g.tape.value(s.logits).data().to_vec();
    }
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    logits.iter().map(|z| z - lse).collect()
}

/// Best complete sequence by brute force: every continuation up to `max_len`
/// tokens, stopping at eos.
fn exhaustive(p: &ParamStore<f64>, e: &EmbeddingSequence<f64>, v: usize, max_len: usize) -> (Vec<usize>, f64) {
    let mut best: Option<(Vec<usize>, f64)> = None;
    let mut stack = vec![(vec![BOS], 0.0)];
    while let Some((prefix, score)) = stack.pop() {
        let lp = next_log_probs(p, e, &prefix);
        for tok in 0..v {
            let mut seq = prefix.clone();
            seq.push(tok);
            let s = score + lp[tok];
            if tok == EOS || seq.len() - 1 == max_len {
                let better = match &best {
                    None => true,
                    Some((bs, bv)) => s > *bv || (s == *bv && seq < *bs),
                };
                if better {
                    best = Some((seq, s));
                }
            } else {
                stack.push((seq, s));
            }
        }
    }
    best.unwrap()
}

fn beam_oracle() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut mismatches = Vec::new();
    for i in 0..100 {
        let p = random_decoder(&mut rng, 4, 2);
        let t = rng.random_range(1..5);
        let e = EmbeddingSequence {
            values: rand_tensor(&mut rng, &[t, 2], -2.0, 2.0),
            source_frames: 4 * t,
        };
        let (want, score) = exhaustive(&p, &e, 4, 3);
        let got = beam_search(&e, &p, 64, 3).unwrap();
        if got.tokens != want || (got.log_prob - score).abs() > 1e-12 {
            mismatches.push(format!("oracle instance {i}: beam {:?} vs exhaustive {want:?}", got.tokens));
        }
    }
    for i in 0..100 {
        let v = rng.random_range(4..9);
        let p = random_decoder(&mut rng, v, 3);
        let t = rng.random_range(1..7);
        let e = EmbeddingSequence {
            values: rand_tensor(&mut rng, &[t, 3], -2.0, 2.0),
            source_frames: 4 * t,
        };
        let g = greedy_decode(&e, &p, 10).unwrap();
        let b = beam_search(&e, &p, 1, 10).unwrap();
        if g.tokens != b.tokens {
            mismatches.push(format!("greedy instance {i}: {:?} vs {:?}", g.tokens, b.tokens));
        }
    }
    verdict(
        mismatches.is_empty(),
        if mismatches.is_empty() {
            "beam 64 = exhaustive on 100 decoders, beam 1 = greedy on 100".to_string()
        } else {
            format!("{} mismatches, first: {}", mismatches.len(), mismatches[0])
        },
    )
}

// ---------------------------------------------------------------- criterion 4

fn metric_oracles() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (c, r) = support::toy_corpus(&mut rng);
        let b = bleu(&c, &r).unwrap();
        let bw = support::bleu(&c, &r);
        for n in 0..4 {
            worst = worst.max((b[n] - bw[n]).abs());
        }
        worst = worst.max((rouge_l(&c, &r).unwrap() - support::rouge_l(&c, &r)).abs());
        for (x, y) in cider_d_segments(&c, &r).unwrap().iter().zip(support::cider_d_segments(&c, &r)) {
            worst = worst.max((x - y).abs());
        }
        worst = worst.max((cider_d(&c, &r).unwrap() - support::cider_d(&c, &r)).abs());
    }
    let same = MetricReport::from_text(
        &["a dog barks in the rain", "water runs over stones"],
        &[vec!["a dog barks in the rain"], vec!["water runs over stones"]],
    )
    .unwrap();
    let disjoint = MetricReport::from_text(&["x y z w", "p q r s"], &[vec!["a b c d"], vec!["e f g h"]]).unwrap();
    let identities = [same.b1, same.b2, same.b3, same.b4, same.rouge_l] == [1.0; 5]
        && (same.cider_d - 10.0).abs() < 1e-12
        && [disjoint.b1, disjoint.b2, disjoint.b3, disjoint.b4, disjoint.rouge_l, disjoint.cider_d] == [0.0; 6];
    verdict(
        worst < 1e-10 && identities,
        format!(
            "50 random corpora, max deviation from brute force {worst:.1e}; identical/disjoint identities {}",
            if identities { "hold" } else { "BROKEN" }
        ),
    )
}

// ---------------------------------------------------------------- criterion 5

fn transfer_exactness() -> Verdict {
    let cfg = EncoderConfig {
        channels: vec![4, 4, 8, 8],
        embed_dim: 16,
        ..Default::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut src: ParamStore<f64> = cfg.init_params(&mut rng).unwrap();
    for (_, t) in src.iter_mut() {
        t.data_mut().iter_mut().for_each(|x| *x = rng.random_range(-1.0..1.0));
    }
    src.insert("head.w", rand_tensor(&mut rng, &[8, 16], -1.0, 1.0));
    src.insert("head.b", rand_tensor(&mut rng, &[8], -1.0, 1.0));
    src.insert("dec.out.b", rand_tensor(&mut rng, &[9], -1.0, 1.0));
    let mut notes = Vec::new();
    match transfer_encoder(&src, &cfg) {
        Ok(dst) => {
            for (name, t) in src.iter().filter(|(n, _)| n.starts_with("enc.")) {
                let exact = dst.get(name).is_some_and(|u| {
                    u.shape() == t.shape() && u.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                });
                if !exact {
                    notes.push(format!("{name} not copied exactly"));
                }
            }
            if dst.iter().any(|(n, _)| !n.starts_with("enc.")) {
                notes.push("non-encoder tensors transferred".into());
            }
        }
        Err(e) => notes.push(format!("transfer failed: {e}")),
    }
    let narrow = EncoderConfig {
        embed_dim: 8,
        ..cfg.clone()
    };
    match transfer_encoder(&src, &narrow) {
        Err(Error::Transfer(m)) if m.contains("[16]") && m.contains("[8]") => {}
        other => notes.push(format!("shape mismatch gave {other:?}")),
    }
    let mut missing = src.clone();
    missing.remove("enc.block1.conv1.w");
    match transfer_encoder(&missing, &cfg) {
        Err(Error::Transfer(m)) if m.contains("enc.block1.conv1.w") => {}
        Err(e) => notes.push(format!("missing tensor gave {e}")),
        Ok(_) => notes.push("missing tensor was not reported".into()),
    }
    let n_enc = src.iter().filter(|(n, _)| n.starts_with("enc.")).count();
    verdict(
        notes.is_empty(),
        if notes.is_empty() {
            format!("{n_enc} encoder tensors bit-identical, head/decoder excluded, mismatch and missing-name errors fire")
        } else {
            notes.join("; ")
        },
    )
}

// ------------------------------------------------------- criteria 6, 7 and 8

const SEEDS: [u64; 5] = [0, 1, 2, 3, 4];
const DEV_CLIPS: usize = 240;
const TEST_CLIPS: usize = 40;

fn study_encoder() -> EncoderConfig {
    EncoderConfig {
        channels: vec![4, 4, 8, 8],
        embed_dim: 16,
        ..Default::default()
    }
}

fn pretrain_config(task: Task, seed: u64) -> TrainConfig {
    let mut c = TrainConfig::pretrain(task);
    c.encoder = study_encoder();
    c.val_fraction = 40.0 / 240.0;
    c.max_epochs = 50;
    c.seed = seed;
    c
}

fn finetune_config(seed: u64) -> TrainConfig {
    let mut c = TrainConfig::finetune();
    c.encoder = study_encoder();
    c.val_fraction = 40.0 / 240.0;
    c.max_epochs = 30;
    c.word_dim = 32;
    c.hidden_dim = 64;
    c.attention_dim = 64;
    c.seed = seed;
    c
}

#[derive(Clone, Debug, PartialEq)]
struct Run {
    label: String,
    log: TrainLog,
    best_epoch: usize,
    val_loss: f64,
}

impl Run {
    fn of(label: String, ck: &Checkpoint, log: TrainLog) -> Self {
        Run {
            label,
            log,
            best_epoch: ck.best_epoch,
            val_loss: ck.val_loss,
        }
    }

    fn bits(&self) -> Vec<u64> {
        let mut b = vec![self.best_epoch as u64, self.val_loss.to_bits(), self.log.initial_val_loss.to_bits()];
        for e in &self.log.epochs {
            b.extend([e.epoch as u64, e.train_loss.to_bits(), e.val_loss.to_bits()]);
        }
        b
    }
}

#[derive(Clone, Debug, PartialEq)]
struct Study {
    /// Test B1 per seed for (AT, ASC, scratch).
    b1: Vec<[f64; 3]>,
    reports: Vec<[MetricReport; 3]>,
    runs: Vec<Run>,
}

fn run_seed(seed: u64, runs: &mut Vec<Run>) -> [MetricReport; 3] {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_generate(&SynthSpec::default(), DEV_CLIPS + TEST_CLIPS, seed, dir.path()).unwrap();
    let clips: Vec<Clip> = load_clips(&m, None).unwrap();
    let (dev, test) = clips.split_at(DEV_CLIPS);
    let mut inits = Vec::new();
    for task in [Task::At, Task::Asc] {
        let o = pretrain_loop(dev, &pretrain_config(task, seed)).unwrap();
        runs.push(Run::of(format!("seed {seed} pretrain {task}"), &o.checkpoint, o.log));
        inits.push(Some(o.checkpoint));
    }
    inits.push(None);
    let mut reports = Vec::new();
    for (init, name) in inits.iter().zip(["at", "asc", "scratch"]) {
        let cfg = finetune_config(seed);
        let o = finetune_loop(dev, &cfg, init.as_ref()).unwrap();
        let out = caption_clips(test, &o.checkpoint.params, &cfg.encoder, &o.vocab, 3, 22).unwrap();
        reports.push(score_captions(&out, test).unwrap());
        runs.push(Run::of(format!("seed {seed} finetune from {name}"), &o.checkpoint, o.log));
    }
    reports.try_into().unwrap()
}

fn run_study() -> Study {
    let mut runs = Vec::new();
    let mut reports = Vec::new();
    for seed in SEEDS {
        let r = run_seed(seed, &mut runs);
        let mut out = std::io::stdout().lock();
        writeln!(out, "  seed {seed}: test B1 AT {:.4}  ASC {:.4}  scratch {:.4}", r[0].b1, r[1].b1, r[2].b1).unwrap();
        reports.push(r);
    }
    Study {
        b1: reports.iter().map(|r| [r[0].b1, r[1].b1, r[2].b1]).collect(),
        reports,
        runs,
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

fn directional(study: &Study) -> Verdict {
    let m: Vec<f64> = (0..3).map(|k| median(study.b1.iter().map(|r| r[k]).collect())).collect();
    let (at, asc, scratch) = (m[0], m[1], m[2]);
    let pass = at >= asc && asc >= scratch && at - scratch >= 0.02;
    verdict(
        pass,
        format!(
            "median test B1 over {} seeds: AT {at:.4}, ASC {asc:.4}, scratch {scratch:.4}; AT - scratch = {:.4}",
            SEEDS.len(),
            at - scratch
        ),
    )
}

fn early_stopping(study: &Study) -> Verdict {
    let bad: Vec<String> = study
        .runs
        .iter()
        .filter(|r| {
            let min = r.log.epochs.iter().map(|e| e.val_loss).fold(f64::INFINITY, f64::min);
            let at_best = r.log.epochs.iter().find(|e| e.epoch == r.best_epoch).map(|e| e.val_loss);
            r.val_loss != min || at_best != Some(min)
        })
        .map(|r| r.label.clone())
        .collect();
    verdict(
        bad.is_empty(),
        if bad.is_empty() {
            format!("returned val loss = minimum logged val loss in all {} runs", study.runs.len())
        } else {
            format!("violated in {}", bad.join(", "))
        },
    )
}

fn determinism(a: &Study, b: &Study) -> Verdict {
    let runs_equal = a.runs.len() == b.runs.len()
        && a.runs.iter().zip(&b.runs).all(|(x, y)| x.label == y.label && x.bits() == y.bits());
    let bits = |s: &Study| -> Vec<u64> {
        s.reports
            .iter()
            .flatten()
            .flat_map(|r| [r.b1, r.b2, r.b3, r.b4, r.rouge_l, r.cider_d].map(f64::to_bits))
            .collect()
    };
    let metrics_equal = bits(a) == bits(b);
    let logged: usize = a.runs.iter().map(|r| r.log.epochs.len()).sum();
    verdict(
        runs_equal && metrics_equal,
        format!(
            "rerun of {} training runs ({logged} logged epochs) and {} metric reports: losses {}, metrics {}",
            a.runs.len(),
            a.reports.len() * 3,
            if runs_equal { "bit-identical" } else { "DIFFER" },
            if metrics_equal { "bit-identical" } else { "DIFFER" }
        ),
    )
}

// ---------------------------------------------------------------- criterion 9

fn dsp_suite() -> Verdict {
    let cfg = MelConfig::default();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut notes = Vec::new();
    for _ in 0..200 {
        let n = rng.random_range(640..40_000);
        let w = Waveform::new((0..n).map(|_| rng.random_range(-0.5..0.5)).collect(), 16_000).unwrap();
        let x = log_mel::<f64>(&w, &cfg).unwrap();
        let want = 1 + (n - 640) / 320;
        if x.frames() != want || cfg.num_frames(n) != Some(want) || x.bands() != 64 {
            notes.push(format!("{n} samples gave {} frames, want {want}", x.frames()));
        }
    }
    let short = Waveform::new(vec![0.0; 639], 16_000).unwrap();
    if !matches!(log_mel::<f64>(&short, &cfg), Err(Error::InputTooShort { .. })) {
        notes.push("639 samples were accepted".into());
    }
    let zero = log_mel::<f64>(&Waveform::new(vec![0.0; 32_000], 16_000).unwrap(), &cfg).unwrap();
    let floor = LOG_FLOOR.ln();
    if zero.values.data().iter().any(|&v| v != floor) {
        notes.push("zero signal is not constant ln(1e-10)".into());
    }
    let tone: Vec<f64> = (0..32_000)
        .map(|i| 0.5 * (2.0 * std::f64::consts::PI * 1000.0 * i as f64 / 16_000.0).sin())
        .collect();
    let x = log_mel::<f64>(&Waveform::new(tone, 16_000).unwrap(), &cfg).unwrap();
    let band = MelFilterbank::new(&cfg).nearest_band(1000.0);
    for t in 0..x.frames() {
        let f = x.frame(t);
        let arg = (0..f.len()).fold(0, |a, i| if f[i] > f[a] { i } else { a });
        if arg != band {
            notes.push(format!("frame {t} peaks in band {arg}, want {band}"));
            break;
        }
    }
    verdict(
        notes.is_empty(),
        if notes.is_empty() {
            format!("frame law on 200 lengths, zero signal = ln(1e-10) everywhere, 1 kHz tone peaks in band {band}")
        } else {
            notes.join("; ")
        },
    )
}

fn main() {
    // `cargo test` passes harness flags such as --nocapture or a name filter;
    // a filter that does not match "acceptance" skips the run.
    let args: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if args.iter().any(|f| !"acceptance".contains(f.as_str())) {
        return;
    }
    let mut verdicts = Vec::new();
    let mut run = |n: usize, name: &str, f: &mut dyn FnMut() -> Verdict| {
        let t = Instant::now();
        let v = f();
        report(n, name, t, &v);
        verdicts.push(v.pass);
    };
    run(1, "gradient suite", &mut gradient_suite);
    run(2, "attention contracts", &mut attention_suite);
    run(3, "beam-search oracle", &mut beam_oracle);
    run(4, "metric oracles", &mut metric_oracles);
    run(5, "transfer exactness", &mut transfer_exactness);

    let t = Instant::now();
    let study = run_study();
    let first = t.elapsed();
    run(6, "AT >= ASC >= scratch", &mut || {
        let mut v = directional(&study);
        v.detail += &format!("; study took {:.0} s", first.as_secs_f64());
        v
    });
    run(7, "early-stopping contract", &mut || early_stopping(&study));
    run(8, "determinism", &mut || determinism(&study, &run_study()));
    run(9, "DSP suite", &mut dsp_suite);

    let failed = verdicts.iter().filter(|p| !**p).count();
    println!("acceptance: {} of {} criteria passed", verdicts.len() - failed, verdicts.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
