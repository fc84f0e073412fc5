//! Finite-difference checks shared by the autograd tests and the
//! acceptance report.

use hero_tensor::gradcheck::gradcheck;
use hero_tensor::{bce, kl_divergence, Result, Tape, Tensor, Var, LOG_CLAMP};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const TOL: f64 = 1e-4;
const H: f64 = 1e-5;
const FLOOR: f64 = 1e-4;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// Contracts an arbitrary-shaped output against fixed random weights so that
/// sums which are identically constant (softmax) still carry signal.
fn project(tape: &mut Tape, y: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = tape.shape(y).to_vec();
    let w = rand_tensor(&mut rng, &shape);
    let yw = tape.mul_const(y, &w)?;
    Ok(tape.sum(yw))
}

fn check(errors: &mut Vec<(&'static str, f64)>, name: &'static str, inputs: &[Tensor], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) {
    let r = gradcheck(inputs, H, FLOOR, |t, v| {
        let y = f(t, v)?;
        project(t, y, 99)
    })
    .unwrap();
    errors.push((name, r.max_rel_err));
}

/// Worst relative error per differentiable operation.
pub fn op_errors() -> Vec<(&'static str, f64)> {
    let mut errors = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut r = |s: &[usize]| rand_tensor(&mut rng, s);
    let (a, b) = (r(&[3, 4]), r(&[3, 4]));
    check(&mut errors, "add", &[a.clone(), b.clone()], |t, v| t.add(v[0], v[1]));
    check(&mut errors, "sub", &[a.clone(), b.clone()], |t, v| t.sub(v[0], v[1]));
    check(&mut errors, "mul", &[a.clone(), b.clone()], |t, v| t.mul(v[0], v[1]));
    let pos = Tensor::new(vec![3, 4], b.data().iter().map(|x| x.abs() + 0.5).collect()).unwrap();
    check(&mut errors, "div", &[a.clone(), pos.clone()], |t, v| t.div(v[0], v[1]));
    check(&mut errors, "add_bias", &[a.clone(), r(&[4])], |t, v| t.add_bias(v[0], v[1]));
    check(&mut errors, "scale", &[a.clone()], |t, v| Ok(t.scale(v[0], -2.5)));
    check(&mut errors, "add_scalar", &[a.clone()], |t, v| Ok(t.add_scalar(v[0], 0.3)));
    check(&mut errors, "scale_by", &[a.clone(), r(&[1])], |t, v| t.scale_by(v[0], v[1]));
    check(&mut errors, "matmul", &[r(&[2, 3, 4]), r(&[4, 5])], |t, v| t.matmul(v[0], v[1]));
    check(&mut errors, "bmm", &[r(&[2, 3, 4]), r(&[2, 4, 5])], |t, v| t.bmm(v[0], v[1], false));
    check(&mut errors, "bmm_t", &[r(&[2, 3, 4]), r(&[2, 5, 4])], |t, v| t.bmm(v[0], v[1], true));
    check(&mut errors, "transpose", &[a.clone()], |t, v| t.transpose(v[0]));
    check(&mut errors, "reshape", &[a.clone()], |t, v| t.reshape(v[0], &[2, 6]));
    for axis in 0..3 {
        check(&mut errors, "softmax", &[r(&[2, 3, 4])], move |t, v| t.softmax(v[0], axis));
    }
    let keep = vec![true, false, true, true, true, false, false, true];
    check(&mut errors, "masked_softmax", &[r(&[2, 3, 4])], move |t, v| t.masked_softmax(v[0], &keep));
    check(&mut errors, "sigmoid", &[a.clone()], |t, v| Ok(t.sigmoid(v[0])));
    check(&mut errors, "tanh", &[a.clone()], |t, v| Ok(t.tanh(v[0])));
    check(&mut errors, "gelu", &[a.clone()], |t, v| Ok(t.gelu(v[0])));
    check(&mut errors, "exp", &[a.clone()], |t, v| Ok(t.exp(v[0])));
    check(&mut errors, "ln", &[pos.clone()], |t, v| Ok(t.ln(v[0])));
    check(&mut errors, "clamp_min", &[pos.clone()], |t, v| Ok(t.clamp_min(v[0], 0.1)));
    check(&mut errors, "sum", &[a.clone()], |t, v| Ok(t.sum(v[0])));
    check(&mut errors, "mean", &[a.clone()], |t, v| Ok(t.mean(v[0])));
    check(&mut errors, "sum_last", &[a.clone()], |t, v| Ok(t.sum_last(v[0])));
    check(&mut errors, "div_last", &[a.clone(), r(&[3])], |t, v| {
        let s = t.add_scalar(v[1], 3.0);
        t.div_last(v[0], s)
    });
    check(&mut errors, "layer_norm", &[r(&[3, 5]), r(&[5]), r(&[5])], |t, v| {
        t.layer_norm(v[0], v[1], v[2], 1e-5)
    });
    check(&mut errors, "temporal_conv", &[r(&[2, 5, 3]), r(&[3, 3])], |t, v| t.temporal_conv(v[0], v[1]));
    check(&mut errors, "gather_rows", &[r(&[4, 3])], |t, v| t.gather_rows(v[0], &[2, 0, 2, 3]));
    check(&mut errors, "slice_last", &[a.clone()], |t, v| t.slice_last(v[0], 1, 2));
    check(&mut errors, "concat_last", &[a.clone(), r(&[3, 2])], |t, v| t.concat_last(&[v[0], v[1]]));
    check(&mut errors, "narrow0", &[r(&[4, 3])], |t, v| t.narrow0(v[0], 1, 2));
    check(&mut errors, "concat0", &[a.clone(), r(&[2, 4])], |t, v| t.concat0(&[v[0], v[1]]));
    check(&mut errors, "gather", &[a.clone()], |t, v| t.gather(v[0], &[0, 5, 5, 11]));
    check(&mut errors, "mul_const", &[a.clone()], |t, v| t.mul_const(v[0], &pos));
    let target = Tensor::new(vec![3, 4], (0..12).map(|i| (i % 2) as f64).collect()).unwrap();
    check(&mut errors, "bce", &[a.clone()], |t, v| {
        let p = t.sigmoid(v[0]);
        bce(t, p, &target, LOG_CLAMP)
    });
    check(&mut errors, "kl", &[a.clone(), b.clone()], |t, v| {
        let p = t.softmax(v[0], 1)?;
        let q = t.softmax(v[1], 1)?;
        kl_divergence(t, p, q, LOG_CLAMP)
    });
    errors
}

/// Random graph of up to six chained operations over a pool of 4x4 nodes.
fn random_graph(tape: &mut Tape, inputs: &[Var], plan: &[(u8, usize, usize)]) -> Result<Var> {
    let mut pool: Vec<Var> = inputs.to_vec();
    for &(op, i, j) in plan {
        let a = pool[i % pool.len()];
        let b = pool[j % pool.len()];
        let y = match op % 10 {
            0 => tape.add(a, b)?,
            1 => tape.mul(a, b)?,
            2 => tape.matmul(a, b)?,
            3 => tape.sigmoid(a),
            4 => tape.tanh(a),
            5 => tape.gelu(a),
            6 => tape.softmax(a, 1)?,
            7 => {
                let s = tape.scale(a, 0.5);
                let e = tape.exp(s);
                tape.sub(e, b)?
            }
            8 => {
                let bt = tape.transpose(b)?;
                tape.matmul(a, bt)?
            }
            _ => tape.softmax(a, 0)?,
        };
        pool.push(y);
    }
    Ok(*pool.last().unwrap())
}

/// Worst relative error of each of `n` random composite graphs.
pub fn graph_errors(n: usize) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut errors = Vec::with_capacity(n);
    for g in 0..n as u64 {
        let depth = rng.gen_range(1..=6);
        let plan: Vec<(u8, usize, usize)> = (0..depth)
            .map(|_| (rng.gen_range(0..10), rng.gen_range(0..8), rng.gen_range(0..8)))
            .collect();
        let inputs = vec![rand_tensor(&mut rng, &[4, 4]), rand_tensor(&mut rng, &[4, 4])];
        let r = gradcheck(&inputs, H, FLOOR, |t, v| {
            let y = random_graph(t, v, &plan)?;
            project(t, y, g)
        })
        .unwrap();
        errors.push(r.max_rel_err);
    }
    errors
}
