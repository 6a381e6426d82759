//! Acceptance criteria 1 through 12, one PASS/FAIL line each.
//!
//! Runs without the libtest harness so every line reaches the output even
//! when all criteria pass. The process exits non-zero if any criterion fails.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use captionforge::attention::{multi_head_attention, scaled_dot_product_attention, AttentionMask, MultiHeadParams};
use captionforge::corpus::{split_sentences, synth_corpus, SynthSpec, VideoRecord, Vocabulary, SEP_TOKEN};
use captionforge::decoding::greedy_decode;
use captionforge::evaluation::{corpus_bleu, modified_precision, paragraph_bleu, EvalPair};
use captionforge::features::{
    decode_feature_bytes, encode_feature_bytes, expected_rows, pca_fit, FeatureError, FeatureMatrix,
};
use captionforge::gradsuite;
use captionforge::model::{param_count, ActConfig, Model, ModelConfig, Variant};
use captionforge::numerics::{Graph, Tensor};
use captionforge::training::{evaluate_teacher_forced, lr_cosine_restarts, lr_decay, train, Schedule, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn check(cond: bool, what: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(what.into())
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let suite = gradsuite::full_suite().map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let (worst_name, worst) = suite
        .iter()
        .map(|e| (e.name.as_str(), e.report.max_relative_error))
        .fold(("", 0.0f64), |acc, x| if x.1 > acc.1 { x } else { acc });
    check(suite.iter().any(|e| e.name == "model_vanilla_1_layer"), "tiny vanilla model missing from suite")?;
    check(worst < 1e-5, format!("{worst_name}: max relative error {worst:.3e} >= 1e-5"))?;
    check(elapsed < Duration::from_secs(60), format!("suite took {elapsed:?}"))?;
    Ok(format!("{} checks, max relative error {worst:.2e} ({worst_name}), {:.1}s", suite.len(), elapsed.as_secs_f64()))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut worst_sum, mut worst_causal, mut worst_heads) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..1000 {
        // Row sums under an optional key-padding mask.
        let (tq, tk, dk) = (rng.gen_range(1..6), rng.gen_range(1..7), rng.gen_range(1..5));
        let mut g = Graph::new();
        let q = g.constant(random(&[tq, dk], &mut rng).map(|v| 4.0 * v));
        let k = g.constant(random(&[tk, dk], &mut rng).map(|v| 4.0 * v));
        let v = g.constant(random(&[tk, dk], &mut rng));
        let mask = rng.gen_bool(0.5).then(|| AttentionMask::key_padding(rng.gen_range(1..=tk), tq, tk).unwrap());
        let (_, w) = scaled_dot_product_attention(&mut g, q, k, v, mask.as_ref(), None).map_err(|e| e.to_string())?;
        for row in g.value(w).rows() {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }

        // Causal self-attention: changing rows after j leaves rows up to j untouched.
        let t = rng.gen_range(2..7);
        let heads = rng.gen_range(1..4);
        let d = heads * rng.gen_range(1..4);
        let x = random(&[t, d], &mut rng);
        let ws: Vec<Tensor> = (0..4).map(|_| random(&[d, d], &mut rng)).collect();
        let j = rng.gen_range(0..t - 1);
        let mut x2 = x.clone();
        for r in j + 1..t {
            for c in 0..d {
                x2.set(&[r, c], rng.gen_range(-3.0..3.0));
            }
        }
        let run = |x: &Tensor, n_heads: usize| -> Result<Tensor, String> {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let w: Vec<_> = ws.iter().map(|w| g.constant(w.clone())).collect();
            let p = MultiHeadParams { w_q: w[0], w_k: w[1], w_v: w[2], w_o: w[3], n_heads };
            let mask = AttentionMask::causal(x.shape()[0]).map_err(|e| e.to_string())?;
            let y = multi_head_attention(&mut g, xv, xv, &p, Some(&mask), None).map_err(|e| e.to_string())?;
            Ok(g.value(y).clone())
        };
        let (y1, y2) = (run(&x, heads)?, run(&x2, heads)?);
        for r in 0..=j {
            for (a, b) in y1.row(r).iter().zip(y2.row(r)) {
                worst_causal = worst_causal.max((a - b).abs());
            }
        }

        // One head through the multi-head path equals plain attention.
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let w: Vec<_> = ws.iter().map(|w| g.constant(w.clone())).collect();
        let qp = g.matmul(xv, w[0]).unwrap();
        let kp = g.matmul(xv, w[1]).unwrap();
        let vp = g.matmul(xv, w[2]).unwrap();
        let (single, _) = scaled_dot_product_attention(&mut g, qp, kp, vp, None, None).map_err(|e| e.to_string())?;
        let single = g.matmul(single, w[3]).unwrap();
        let p = MultiHeadParams { w_q: w[0], w_k: w[1], w_v: w[2], w_o: w[3], n_heads: 1 };
        let multi = multi_head_attention(&mut g, xv, xv, &p, None, None).map_err(|e| e.to_string())?;
        worst_heads = worst_heads.max(g.value(single).max_abs_diff(g.value(multi)));
    }
    check(worst_sum <= 1e-10, format!("row sum off by {worst_sum:e}"))?;
    check(worst_causal <= 1e-12, format!("causal leak {worst_causal:e}"))?;
    check(worst_heads <= 1e-12, format!("single-head mismatch {worst_heads:e}"))?;
    Ok(format!("1000 cases: row sums {worst_sum:.1e}, causal {worst_causal:.1e}, N=1 heads {worst_heads:.1e}"))
}

fn tiny(variant: Variant, layers: usize) -> ModelConfig {
    let mut c = ModelConfig::with_width(variant, layers, 8, 2, 11, 6);
    c.dropout = 0.0;
    c.feature_dim = 5;
    c
}

fn criterion_3() -> Outcome {
    let counts: Vec<usize> = [1, 4, 8].iter().map(|&n| param_count(&tiny(Variant::Universal, n))).collect();
    check(counts.windows(2).all(|w| w[0] == w[1]), format!("param counts differ: {counts:?}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let m = Model::build(tiny(Variant::Universal, 2), 4).map_err(|e| e.to_string())?;
    let f = random(&[4, 5], &mut rng);
    let via_encode = m.encode_features(&f).map_err(|e| e.to_string())?;
    let mut g = Graph::new();
    let p = m.bind_frozen(&mut g);
    let mut h = m.encoder_input(&mut g, &p, &f).map_err(|e| e.to_string())?;
    for step in 0..2 {
        h = m.add_step_embedding(&mut g, &p, "enc", step, h).map_err(|e| e.to_string())?;
        h = m.encoder_layer(&mut g, &p, "enc.shared", h, None, None).map_err(|e| e.to_string())?;
    }
    let manual = g.value(h).reshape(&[4, 8]).map_err(|e| e.to_string())?;
    let diff = via_encode.max_abs_diff(&manual);
    check(diff <= 1e-12, format!("two-step output differs from manual application by {diff:e}"))?;
    Ok(format!("param_count {} for 1/4/8 steps; two-step difference {diff:.1e}", counts[0]))
}

fn act_model(max_steps: usize, seed: u64) -> Result<Model, String> {
    let mut c = tiny(Variant::Universal, 2);
    c.act = Some(ActConfig { epsilon: 0.01, max_steps, ponder_weight: 0.01 });
    Model::build(c, seed).map_err(|e| e.to_string())
}

fn act_trace(m: &Model, f: &Tensor, lengths: &[usize]) -> Result<(Vec<usize>, Vec<f64>, Vec<Vec<f64>>), String> {
    let mut g = Graph::new();
    let p = m.bind_frozen(&mut g);
    let enc = m.encode(&mut g, &p, f, lengths, None).map_err(|e| e.to_string())?;
    let t = enc.act.ok_or("no halting trace")?;
    Ok((t.steps_used, t.remainders, t.weights))
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut positions = 0;
    let mut worst = 0.0f64;
    let mut seed = 100;
    while positions < 500 {
        seed += 1;
        let mut m = act_model(rng.gen_range(2..9), seed)?;
        m.params_mut().get_mut("enc.halt.b").unwrap().data_mut()[0] = rng.gen_range(-3.0..3.0);
        let t = rng.gen_range(2..8);
        let f = random(&[2, t, 5], &mut rng).map(|v| 2.0 * v);
        let (steps, remainders, weights) = act_trace(&m, &f, &[t, t])?;
        for i in 0..2 * t {
            let n = steps[i];
            let probs: f64 = weights[..n - 1].iter().map(|w| w[i]).sum();
            worst = worst.max((probs + remainders[i] - 1.0).abs());
            positions += 1;
        }
    }
    check(worst <= 1e-9, format!("halting mass off by {worst:e}"))?;

    let mut high = act_model(8, 11)?;
    high.params_mut().get_mut("enc.halt.b").unwrap().data_mut()[0] = 20.0;
    let (steps, _, _) = act_trace(&high, &random(&[2, 6, 5], &mut rng), &[6, 6])?;
    check(steps.iter().all(|&s| s == 1), format!("+20 bias steps {steps:?}"))?;
    let mut low = act_model(4, 13)?;
    low.params_mut().get_mut("enc.halt.b").unwrap().data_mut()[0] = -20.0;
    let (steps, _, _) = act_trace(&low, &random(&[1, 5, 5], &mut rng), &[5])?;
    check(steps.iter().all(|&s| s == 4), format!("-20 bias steps {steps:?}"))?;
    Ok(format!("{positions} positions, halting mass error {worst:.1e}; saturated biases halt at 1 and max_steps"))
}

struct Smoke {
    token_accuracy: f64,
    bleu4: f64,
    multi_sentence: f64,
    steps: usize,
    elapsed: Duration,
}

fn smoke(variant: Variant, dense: bool) -> Result<Smoke, String> {
    let start = Instant::now();
    let spec = SynthSpec {
        dense,
        templates_per_class: if dense { 4 } else { 3 },
        ..SynthSpec::default()
    };
    let corpus = synth_corpus(&spec, 0).map_err(|e| e.to_string())?;
    let records = corpus.records;
    let vocab = Vocabulary::build(records.iter().flat_map(|r| r.captions.iter().map(Vec::as_slice)), 1).map_err(|e| e.to_string())?;
    let max_len = if dense { 80 } else { 20 };
    let mut mc = ModelConfig::with_width(variant, 2, 32, 2, vocab.len(), max_len);
    mc.dropout = 0.0;
    mc.feature_dim = spec.feature_dim;
    let tc = TrainConfig {
        batch_size: 16,
        lr0: 1e-3,
        schedule: Schedule::Decay,
        epochs: 1000,
        max_steps: Some(2000),
        max_len,
        seed: 0,
        ..TrainConfig::default()
    };
    let outcome = train(&records, &vocab, &mc, &tc).map_err(|e| e.to_string())?;
    let model = &outcome.best;
    let refs: Vec<&VideoRecord> = records.iter().collect();
    let tf = evaluate_teacher_forced(model, &refs, &vocab, max_len).map_err(|e| e.to_string())?;

    let decoded: Vec<Vec<String>> = records
        .iter()
        .map(|r| greedy_decode(model, &r.features.values).map(|ids| vocab.decode(&ids)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (bleu4, multi_sentence) = if dense {
        let predictions: BTreeMap<String, Vec<Vec<String>>> =
            records.iter().zip(&decoded).map(|(r, d)| (r.video_id.clone(), split_sentences(d))).collect();
        let references: BTreeMap<String, Vec<Vec<Vec<String>>>> = records
            .iter()
            .map(|r| (r.video_id.clone(), r.captions.iter().map(|c| split_sentences(c)).collect()))
            .collect();
        let multi = predictions.values().filter(|s| s.len() >= 2).count() as f64 / predictions.len() as f64;
        (paragraph_bleu(&predictions, &references).map_err(|e| e.to_string())?.bleu[3], multi)
    } else {
        let pairs: Vec<EvalPair> = records
            .iter()
            .zip(&decoded)
            .map(|(r, d)| EvalPair::new(d.iter().filter(|t| *t != SEP_TOKEN).cloned().collect(), r.captions.clone()))
            .collect();
        (corpus_bleu(&pairs, 4).map_err(|e| e.to_string())?.bleu[3], 1.0)
    };
    Ok(Smoke {
        token_accuracy: tf.token_accuracy,
        bleu4,
        multi_sentence,
        steps: outcome.steps,
        elapsed: start.elapsed(),
    })
}

fn criterion_5() -> Outcome {
    let s = smoke(Variant::Vanilla, false)?;
    check(s.steps <= 2000, format!("{} steps", s.steps))?;
    check(s.token_accuracy >= 0.99, format!("token accuracy {:.4}", s.token_accuracy))?;
    check(s.bleu4 >= 0.90, format!("BLEU-4 {:.4}", s.bleu4))?;
    check(s.elapsed < Duration::from_secs(300), format!("took {:?}", s.elapsed))?;
    Ok(format!("token accuracy {:.4}, BLEU-4 {:.4}, {} steps, {:.0}s", s.token_accuracy, s.bleu4, s.steps, s.elapsed.as_secs_f64()))
}

fn criterion_6() -> Outcome {
    let s = smoke(Variant::Universal, false)?;
    check(s.steps <= 2000, format!("{} steps", s.steps))?;
    check(s.bleu4 >= 0.85, format!("BLEU-4 {:.4}", s.bleu4))?;
    Ok(format!("BLEU-4 {:.4}, token accuracy {:.4}, {} steps, {:.0}s", s.bleu4, s.token_accuracy, s.steps, s.elapsed.as_secs_f64()))
}

fn criterion_7() -> Outcome {
    let s = smoke(Variant::Vanilla, true)?;
    check(s.bleu4 >= 0.80, format!("paragraph BLEU-4 {:.4}", s.bleu4))?;
    check(s.multi_sentence >= 0.90, format!("only {:.0}% of paragraphs have 2+ sentences", 100.0 * s.multi_sentence))?;
    Ok(format!(
        "paragraph BLEU-4 {:.4}, {:.0}% with 2+ sentences, {:.0}s",
        s.bleu4,
        100.0 * s.multi_sentence,
        s.elapsed.as_secs_f64()
    ))
}

/// Reference BLEU written from the definitions with plain loops.
fn brute_bleu(pairs: &[(Vec<String>, Vec<Vec<String>>)], max_n: usize) -> Vec<f64> {
    let count = |toks: &[String], gram: &[String]| toks.windows(gram.len()).filter(|w| *w == gram).count();
    let mut matches = vec![0usize; max_n];
    let mut totals = vec![0usize; max_n];
    let (mut c, mut r) = (0usize, 0usize);
    for (cand, refs) in pairs {
        for n in 1..=max_n {
            if cand.len() < n {
                continue;
            }
            let mut seen: Vec<&[String]> = Vec::new();
            for gram in cand.windows(n) {
                totals[n - 1] += 1;
                if seen.contains(&gram) {
                    continue;
                }
                seen.push(gram);
                let max_ref = refs.iter().map(|rf| count(rf, gram)).max().unwrap_or(0);
                matches[n - 1] += count(cand, gram).min(max_ref);
            }
        }
        c += cand.len();
        let mut best = refs[0].len();
        for rf in refs {
            let (d, bd) = (rf.len().abs_diff(cand.len()), best.abs_diff(cand.len()));
            if d < bd || (d == bd && rf.len() < best) {
                best = rf.len();
            }
        }
        r += best;
    }
    let bp = if c == 0 { 0.0 } else if c > r { 1.0 } else { (1.0 - r as f64 / c as f64).exp() };
    (1..=max_n)
        .map(|n| {
            let ps: Vec<f64> = (0..n)
                .map(|i| if totals[i] == 0 { 0.0 } else { matches[i] as f64 / totals[i] as f64 })
                .collect();
            if ps.iter().any(|&p| p == 0.0) {
                0.0
            } else {
                bp * (ps.iter().map(|p| p.ln()).sum::<f64>() / n as f64).exp()
            }
        })
        .collect()
}

fn criterion_8() -> Outcome {
    let words: Vec<String> = ["a", "man", "dog", "is", "running", "the", "cat", "on", "mat"].iter().map(|s| s.to_string()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut sentence = |rng: &mut ChaCha8Rng| -> Vec<String> {
        (0..rng.gen_range(1..10)).map(|_| words[rng.gen_range(0..words.len())].clone()).collect()
    };
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let pairs: Vec<(Vec<String>, Vec<Vec<String>>)> = (0..rng.gen_range(1..6))
            .map(|_| {
                let cand = sentence(&mut rng);
                let refs = (0..rng.gen_range(1..4)).map(|_| sentence(&mut rng)).collect();
                (cand, refs)
            })
            .collect();
        let expected = brute_bleu(&pairs, 4);
        let eval: Vec<EvalPair> = pairs.iter().map(|(c, r)| EvalPair::new(c.clone(), r.clone())).collect();
        let got = corpus_bleu(&eval, 4).map_err(|e| e.to_string())?;
        for (a, b) in got.bleu.iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    check(worst <= 1e-12, format!("oracle difference {worst:e}"))?;
    let the7 = EvalPair::new(vec!["the".to_string(); 7], vec!["the cat is on the mat".split(' ').map(String::from).collect()]);
    let (m, t) = modified_precision(&[the7], 1);
    check((m, t) == (2, 7), format!("the x7 clipping gave {m}/{t}"))?;
    Ok(format!("100 randomized corpora within {worst:.1e}; the x7 precision {m}/{t}"))
}

fn matrix(rows: Vec<Vec<f64>>) -> FeatureMatrix {
    FeatureMatrix::new("v", Tensor::from_rows(&rows).unwrap(), "test").unwrap()
}

fn criterion_9() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let d = 6;
    let data: Vec<Vec<f64>> = (0..40).map(|_| (0..d).map(|j| rng.gen_range(-1.0..1.0) * (j + 1) as f64).collect()).collect();
    let full = pca_fit(&[matrix(data.clone())], d).map_err(|e| e.to_string())?;
    let model = pca_fit(&[matrix(data.clone())], 3).map_err(|e| e.to_string())?;

    let c = &model.components;
    let cct = c.matmul(&c.transpose()).map_err(|e| e.to_string())?;
    let ortho = cct.max_abs_diff(&Tensor::identity(3));
    check(ortho < 1e-8, format!("orthonormality error {ortho:e}"))?;

    // Data inside a 3-dimensional affine subspace.
    let basis: Vec<Vec<f64>> = (0..3).map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect();
    let offset: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let sub: Vec<Vec<f64>> = (0..30)
        .map(|_| {
            let coef: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
            (0..d).map(|j| offset[j] + (0..3).map(|b| coef[b] * basis[b][j]).sum::<f64>()).collect()
        })
        .collect();
    let sub_m = matrix(sub);
    let sub_model = pca_fit(std::slice::from_ref(&sub_m), 3).map_err(|e| e.to_string())?;
    let back = sub_model
        .reconstruct(&sub_model.project(&sub_m.values).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let recon = back.max_abs_diff(&sub_m.values);
    check(recon < 1e-8, format!("subspace reconstruction error {recon:e}"))?;

    let x = matrix(data);
    let back = model.reconstruct(&model.project(&x.values).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let sq: f64 = back.data().iter().zip(x.values.data()).map(|(a, b)| (a - b).powi(2)).sum();
    let per_sample = sq / (x.rows() - 1) as f64;
    let discarded: f64 = full.eigenvalues[3..].iter().sum();
    let rel = (per_sample - discarded).abs() / discarded;
    check(rel < 1e-6, format!("reconstruction error {per_sample} vs discarded eigenvalues {discarded} (relative {rel:e})"))?;
    Ok(format!("orthonormality {ortho:.1e}, subspace reconstruction {recon:.1e}, eigenvalue bookkeeping {rel:.1e}"))
}

fn criterion_10() -> Outcome {
    let c3d = expected_rows(500, 500, 16).map_err(|e| e.to_string())?;
    let i3d = expected_rows(400, 400, 8).map_err(|e| e.to_string())?;
    check(c3d == 31 && i3d == 50, format!("expected_rows gave {c3d} and {i3d}"))?;

    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let values: Vec<f64> = (0..31 * 64).map(|_| rng.gen_range(-5.0f32..5.0) as f64).collect();
    let m = FeatureMatrix::new("vid", Tensor::new(&[31, 64], values).unwrap(), "c3d").unwrap();
    let bytes = encode_feature_bytes(&m);
    let back = decode_feature_bytes(&bytes, "vid", "mem").map_err(|e| e.to_string())?;
    let exact = back.values.shape() == m.values.shape()
        && back.values.data().iter().zip(m.values.data()).all(|(a, b)| a.to_bits() == b.to_bits());
    check(exact, "round trip changed values")?;
    check(encode_feature_bytes(&back) == bytes, "re-encoding changed bytes")?;
    let mut corrupt = bytes.clone();
    corrupt[30] ^= 1;
    let rejected = matches!(decode_feature_bytes(&corrupt, "vid", "mem"), Err(FeatureError::Checksum { .. }));
    check(rejected, "payload corruption not caught by checksum")?;
    Ok(format!("expected_rows 31 and 50; {}-byte file round trips bit-exact, checksum verified", bytes.len()))
}

fn criterion_11() -> Outcome {
    let lr0 = 3e-4;
    let (warmup, period) = (400, 1000);
    let mut worst = 0.0f64;
    for s in 0..10_000 {
        let decay = lr0 * 0.98f64.powf(s as f64);
        let cosine = if s < warmup {
            lr0 * (s + 1) as f64 / warmup as f64
        } else {
            lr0 * 0.5 * (1.0 + (std::f64::consts::PI * ((s - warmup) % period) as f64 / period as f64).cos())
        };
        worst = worst.max((lr_decay(lr0, s) - decay).abs());
        worst = worst.max((lr_cosine_restarts(lr0, s, warmup, period) - cosine).abs());
    }
    check(worst <= 1e-12, format!("schedule difference {worst:e}"))?;
    let presets = [
        ("6/512/8", ModelConfig::msvd_vanilla(100), 6, 512, 8),
        ("8/512/8", ModelConfig::msvd_universal(100), 8, 512, 8),
        ("8/500/10", ModelConfig::activitynet_universal(100), 8, 500, 10),
    ];
    for (name, cfg, layers, width, heads) in presets {
        check((cfg.n_layers, cfg.d_model, cfg.n_heads) == (layers, width, heads), format!("preset {name} has wrong shape"))?;
        Model::build(cfg, 0).map_err(|e| format!("preset {name}: {e}"))?;
    }
    Ok(format!("10,000 steps within {worst:.1e}; presets 6/512/8, 8/512/8, 8/500/10 build"))
}

fn cli(args: &[&str]) -> Result<(), String> {
    let argv = std::iter::once("captionforge").chain(args.iter().copied());
    match captionforge_cli::run(argv) {
        0 => Ok(()),
        code => Err(format!("`{}` exited with {code}", args.join(" "))),
    }
}

fn pipeline(dir: &Path) -> Result<HashMap<&'static str, Vec<u8>>, String> {
    let p = |rel: &str| dir.join(rel).to_string_lossy().into_owned();
    cli(&["synth", "--seed", "0", "--out", &p("data")])?;
    cli(&["train", "--config", &p("data/smoke.cfg"), "--max-steps", "60", "--out", &p("model")])?;
    cli(&["decode", "--manifest", &p("data/manifest.json"), "--model", &p("model"), "--out", &p("decoded.tsv")])?;
    cli(&["eval", "--manifest", &p("data/manifest.json"), "--decoded", &p("decoded.tsv"), "--out", &p("report.json")])?;
    let mut out = HashMap::new();
    for (key, rel) in [("checkpoint", "model/model.ckpt"), ("metrics", "model/metrics.csv"), ("decoded", "decoded.tsv"), ("report", "report.json")] {
        out.insert(key, fs::read(dir.join(rel)).map_err(|e| format!("{rel}: {e}"))?);
    }
    Ok(out)
}

fn criterion_12() -> Outcome {
    let (a, b) = (tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?);
    let first = pipeline(a.path())?;
    let second = pipeline(b.path())?;
    let mut keys: Vec<_> = first.keys().copied().collect();
    keys.sort();
    for k in &keys {
        check(first[k] == second[k], format!("{k} differs between runs"))?;
    }
    Ok(format!("identical {} across two seed-0 runs", keys.join(", ")))
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 12] = [
        ("gradient suite", criterion_1),
        ("attention invariants", criterion_2),
        ("universal sharing", criterion_3),
        ("halting bookkeeping", criterion_4),
        ("overfit smoke, vanilla", criterion_5),
        ("overfit smoke, universal", criterion_6),
        ("dense-mode smoke", criterion_7),
        ("BLEU oracle", criterion_8),
        ("PCA", criterion_9),
        ("feature accounting", criterion_10),
        ("scheduler closed forms", criterion_11),
        ("determinism", criterion_12),
    ];
    let only: Option<usize> = std::env::var("ACCEPTANCE_ONLY").ok().and_then(|v| v.parse().ok());
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        let n = i + 1;
        if only.is_some_and(|o| o != n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("criterion {n:>2} PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("criterion {n:>2} FAIL  {name}: {why}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}
