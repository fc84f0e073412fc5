//! Small parameterised building blocks shared by the model modules.

use hero_tensor::{ParamId, ParamStore, Tape, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::Result;

pub(crate) fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], limit: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches data")
}

/// Affine map over the last axis, Xavier-uniform weights and zero bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn new(store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let weight = store.add(format!("{name}.weight"), uniform(rng, &[fan_in, fan_out], limit));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[fan_out]));
        Self { weight, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        let y = tape.matmul(x, w)?;
        Ok(tape.add_bias(y, b)?)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub const EPS: f64 = 1e-5;

    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        let gain = store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0));
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[dim]));
        Self { gain, bias }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gain);
        let b = tape.param(store, self.bias);
        Ok(tape.layer_norm(x, g, b, Self::EPS)?)
    }
}

/// Two-layer perceptron `d_in -> hidden -> d_out` with a GELU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub hidden: Linear,
    pub out: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        Self {
            hidden: Linear::new(store, &format!("{name}.0"), d_in, hidden, rng),
            out: Linear::new(store, &format!("{name}.1"), hidden, d_out, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, store, x)?;
        let h = tape.gelu(h);
        self.out.forward(tape, store, h)
    }
}
