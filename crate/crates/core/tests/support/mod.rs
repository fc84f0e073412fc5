//! Explicit-loop oracles shared by the integration tests and the
//! acceptance report.
#![allow(dead_code)]

use hero_core::{
    decode_span, loss_cl, loss_tsgv, total_loss, BranchOutput, ClDivergence, Hem, HemConfig, LossConfig, Sgvf, Span,
};
use hero_tensor::{ParamStore, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Softmax attention of one frame over the kept tokens, then a sigmoid gate.
fn sgvf_loop(v: &[f64], q: &[f64], keep: &[bool], t: usize, l: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; t * d];
    for i in 0..t {
        let mut scores = vec![f64::NEG_INFINITY; l];
        for j in 0..l {
            if keep[j] {
                let mut dot = 0.0;
                for c in 0..d {
                    dot += v[i * d + c] * q[j * d + c];
                }
                scores[j] = dot / (d as f64).sqrt();
            }
        }
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let weights: Vec<f64> = scores.iter().map(|s| if s.is_finite() { (s - max).exp() } else { 0.0 }).collect();
        let z: f64 = weights.iter().sum();
        for c in 0..d {
            let mut att = 0.0;
            for j in 0..l {
                att += weights[j] / z * q[j * d + c];
            }
            let gate = 1.0 / (1.0 + (-att).exp());
            out[i * d + c] = v[i * d + c] * gate;
        }
    }
    out
}

/// Largest deviation of the filter from the loop version over `n` random
/// instances with T ≤ 16, L ≤ 8, d ≤ 32.
pub fn sgvf_max_error(n: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let store = ParamStore::new();
    let mut worst: f64 = 0.0;
    for _ in 0..n {
        let t = rng.gen_range(2..=16);
        let l = rng.gen_range(1..=8);
        let d = rng.gen_range(1..=32);
        let v = rand_tensor(&mut rng, &[1, t, d]);
        let q = rand_tensor(&mut rng, &[1, l, d]);
        let mut keep: Vec<bool> = (0..l).map(|_| rng.gen_bool(0.7)).collect();
        keep[rng.gen_range(0..l)] = true;

        let mut tape = Tape::new();
        let (vv, qv) = (tape.constant(v.clone()), tape.constant(q.clone()));
        let out = Sgvf::new(d).forward(&mut tape, &store, vv, qv, &keep).unwrap();
        let expected = sgvf_loop(v.data(), q.data(), &keep, t, l, d);
        for (a, b) in tape.value(out.v_hat).iter().zip(&expected) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn brute_force(p_s: &[f64], p_e: &[f64]) -> Span {
    let mut best = (f64::NEG_INFINITY, Span::new(0, 0));
    for s in 0..p_s.len() {
        for e in s..p_e.len() {
            let score = p_s[s] * p_e[e];
            if score > best.0 {
                best = (score, Span::new(s, e));
            }
        }
    }
    best.1
}

fn random_distribution(rng: &mut ChaCha8Rng, t: usize) -> Vec<f64> {
    // coarse values so that ties actually occur
    let raw: Vec<f64> = (0..t).map(|_| rng.gen_range(0..5) as f64).collect();
    let z: f64 = raw.iter().sum();
    if z == 0.0 {
        vec![1.0 / t as f64; t]
    } else {
        raw.iter().map(|x| x / z).collect()
    }
}

/// Number of disagreements with exhaustive search over `n` random pairs.
pub fn decode_mismatches(n: usize) -> usize {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut bad = 0;
    for _ in 0..n {
        let t = rng.gen_range(1..=40);
        let (p_s, p_e) = if rng.gen_bool(0.5) {
            (random_distribution(&mut rng, t), random_distribution(&mut rng, t))
        } else {
            let a: Vec<f64> = (0..t).map(|_| rng.gen::<f64>()).collect();
            let b: Vec<f64> = (0..t).map(|_| rng.gen::<f64>()).collect();
            (a, b)
        };
        bad += (decode_span(&p_s, &p_e) != brute_force(&p_s, &p_e)) as usize;
    }
    bad
}

/// Largest deviation from `0.5·V` when the query is all zeros.
pub fn zero_query_deviation() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let store = ParamStore::new();
    let mut tape = Tape::new();
    let v = rand_tensor(&mut rng, &[2, 7, 8]);
    let vv = tape.constant(v.clone());
    let q = tape.constant(Tensor::zeros(&[2, 3, 8]));
    let out = Sgvf::new(8).forward(&mut tape, &store, vv, q, &[true; 6]).unwrap();
    tape.value(out.v_hat).iter().zip(v.data()).map(|(h, x)| (h - 0.5 * x).abs()).fold(0.0, f64::max)
}

/// Whether the first hierarchy level is bitwise the input embedding.
pub fn first_level_is_embedding() -> bool {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut store = ParamStore::new();
    let cfg = HemConfig {
        hidden: 16,
        ff: 32,
        ..HemConfig::default()
    };
    let hem = Hem::new(&mut store, cfg, &mut rng).unwrap();
    let q0 = rand_tensor(&mut rng, &[2, 5, 16]);
    let mut tape = Tape::new();
    let v = tape.constant(q0.clone());
    let keep = [true, true, true, false, false, true, true, true, true, true];
    let set = hem.encode(&mut tape, &store, v, &keep).unwrap();
    set.levels.len() == 4 && tape.value(set.levels[0]) == q0.data()
}

fn score_rows(tape: &mut Tape, rows: &[&[f64]]) -> hero_tensor::Var {
    let t = rows[0].len();
    let data = rows.iter().flat_map(|r| r.iter().copied()).collect();
    tape.constant(Tensor::new(vec![rows.len(), t], data).unwrap())
}

/// KL(RS‖RS) on random relevance scores.
pub fn self_kl() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let a: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..0.95)).collect();
    let b: Vec<f64> = (0..16).map(|_| rng.gen_range(0.05..0.95)).collect();
    let mut tape = Tape::new();
    let x = score_rows(&mut tape, &[&a, &b]);
    let y = score_rows(&mut tape, &[&a, &b]);
    let kl = loss_cl(&mut tape, x, y, ClDivergence::Temporal).unwrap();
    tape.scalar(kl)
}

/// `(total, L_TSGV)` with both weights at zero, on random branch outputs
/// whose auxiliary losses are nonzero.
pub fn zero_lambda_losses() -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let gts = [Span::new(1, 4), Span::new(6, 9)];
    let mut tape = Tape::new();
    let mut row = |tape: &mut Tape, softmax: bool| {
        let v = tape.constant(rand_tensor(&mut rng, &[2, 10]));
        if softmax {
            tape.softmax(v, 1).unwrap()
        } else {
            tape.sigmoid(v)
        }
    };
    let out = BranchOutput {
        p_s: row(&mut tape, true),
        p_e: row(&mut tape, true),
        rs: row(&mut tape, false),
        rs_m: Some(row(&mut tape, false)),
    };
    let cfg = LossConfig {
        lambda1: 0.0,
        lambda2: 0.0,
        ..LossConfig::default()
    };
    let (total, parts) = total_loss(&mut tape, &out, &gts, &cfg).unwrap();
    assert!(parts.l_rs > 0.0 && parts.l_cl > 0.0);
    let tsgv = loss_tsgv(&mut tape, out.p_s, out.p_e, &gts).unwrap();
    (tape.scalar(total), tape.scalar(tsgv))
}
