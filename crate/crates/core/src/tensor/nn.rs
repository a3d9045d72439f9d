//! Dense layers and small MLPs with softplus hidden activations.
//!
//! Every net exposes two forward paths over the same parameters: a tape path
//! for training and a plain f64 path for gradient-free rendering.

use rand::Rng;

use crate::error::Result;
use crate::tensor::tape::{softplus, Tape, Var};
use crate::tensor::{HasParams, Param, ParamIds, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// Glorot uniform weights, zero bias.
    Glorot,
    /// All-zero weights and bias (identity-like outputs at start).
    Zero,
}

#[derive(Debug, Clone)]
pub struct Dense {
    pub weight: Param, // [out, in] row-major
    pub bias: Param,   // [out]
}

impl Dense {
    pub fn new(ids: &mut ParamIds, rng: &mut impl Rng, n_in: usize, n_out: usize, init: Init) -> Dense {
        let data = match init {
            Init::Glorot => {
                let a = (6.0 / (n_in + n_out) as f64).sqrt() as f32;
                (0..n_in * n_out).map(|_| rng.gen_range(-a..a)).collect()
            }
            Init::Zero => vec![0.0; n_in * n_out],
        };
        Dense {
            weight: Param::new(ids, Tensor::from_vec(&[n_out, n_in], data).unwrap()),
            bias: Param::new(ids, Tensor::zeros(&[n_out])),
        }
    }

    pub fn n_in(&self) -> usize {
        self.weight.value.shape[1]
    }

    pub fn n_out(&self) -> usize {
        self.weight.value.shape[0]
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.param(&self.weight);
        let b = tape.param(&self.bias);
        tape.linear(w, b, x)
    }

    pub fn forward_f64(&self, x: &[f64], out: &mut Vec<f64>) {
        let (n_out, n_in) = (self.n_out(), self.n_in());
        debug_assert_eq!(x.len(), n_in);
        out.clear();
        let w = &self.weight.value.data;
        let b = &self.bias.value.data;
        for i in 0..n_out {
            let row = &w[i * n_in..(i + 1) * n_in];
            let mut acc = b[i] as f64;
            for j in 0..n_in {
                acc += row[j] as f64 * x[j];
            }
            out.push(acc);
        }
    }
}

/// Reusable scratch buffers for [`Mlp::forward_f64`].
#[derive(Debug, Default, Clone)]
pub struct MlpBuf {
    a: Vec<f64>,
    b: Vec<f64>,
    /// Last hidden activation of the most recent forward pass.
    pub feature: Vec<f64>,
    /// Output of the most recent forward pass.
    pub out: Vec<f64>,
}

/// Fully connected net: softplus after every layer but the last, raw output.
/// Output nonlinearities (sigmoid, scaled tanh) are applied by the caller.
#[derive(Debug, Clone)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    name: String,
}

impl Mlp {
    /// `dims` lists layer widths input-first, e.g. `[63, 128, 128, 1]`.
    /// `zero_last` zero-initializes the final layer.
    pub fn new(
        ids: &mut ParamIds,
        rng: &mut impl Rng,
        name: &str,
        dims: &[usize],
        zero_last: bool,
    ) -> Mlp {
        assert!(dims.len() >= 2, "mlp needs at least one layer");
        let layers = (0..dims.len() - 1)
            .map(|i| {
                let init = if zero_last && i == dims.len() - 2 {
                    Init::Zero
                } else {
                    Init::Glorot
                };
                Dense::new(ids, rng, dims[i], dims[i + 1], init)
            })
            .collect();
        Mlp {
            layers,
            name: name.to_string(),
        }
    }

    pub fn n_in(&self) -> usize {
        self.layers[0].n_in()
    }

    pub fn n_out(&self) -> usize {
        self.layers.last().unwrap().n_out()
    }

    pub fn forward_tape(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        Ok(self.forward_tape_with_feature(tape, x)?.0)
    }

    /// Returns `(output, last_hidden_activation)`.
    pub fn forward_tape_with_feature(&self, tape: &mut Tape, x: Var) -> Result<(Var, Var)> {
        let mut h = x;
        for layer in &self.layers[..self.layers.len() - 1] {
            let z = layer.forward_tape(tape, h)?;
            h = tape.softplus(z);
        }
        let out = self.layers.last().unwrap().forward_tape(tape, h)?;
        Ok((out, h))
    }

    /// Plain forward; result in `buf.out`, last hidden activation in `buf.feature`.
    pub fn forward_f64(&self, x: &[f64], buf: &mut MlpBuf) {
        buf.a.clear();
        buf.a.extend_from_slice(x);
        for layer in &self.layers[..self.layers.len() - 1] {
            layer.forward_f64(&buf.a, &mut buf.b);
            buf.a.clear();
            buf.a.extend(buf.b.iter().map(|&z| softplus(z)));
        }
        buf.feature.clear();
        buf.feature.extend_from_slice(&buf.a);
        self.layers.last().unwrap().forward_f64(&buf.a, &mut buf.out);
    }
}

impl HasParams for Mlp {
    fn visit(&self, f: &mut dyn FnMut(&str, &Param)) {
        for (i, layer) in self.layers.iter().enumerate() {
            f(&format!("{}.{}.weight", self.name, i), &layer.weight);
            f(&format!("{}.{}.bias", self.name, i), &layer.bias);
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            f(&format!("{}.{}.weight", self.name, i), &mut layer.weight);
            f(&format!("{}.{}.bias", self.name, i), &mut layer.bias);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn tape_and_plain_forward_agree() {
        let mut ids = ParamIds::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = Mlp::new(&mut ids, &mut rng, "t", &[3, 16, 16, 2], false);

        let x = [0.2, -0.4, 0.9];
        let mut buf = MlpBuf::default();
        mlp.forward_f64(&x, &mut buf);

        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let (y, feat) = mlp.forward_tape_with_feature(&mut tape, xv).unwrap();
        assert_eq!(tape.value(y), &buf.out[..]);
        assert_eq!(tape.value(feat), &buf.feature[..]);
    }

    #[test]
    fn zero_last_layer_outputs_zero() {
        let mut ids = ParamIds::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut ids, &mut rng, "z", &[4, 8, 3], true);
        let mut buf = MlpBuf::default();
        mlp.forward_f64(&[0.5, -1.0, 2.0, 0.1], &mut buf);
        assert_eq!(buf.out, vec![0.0; 3]);
    }

    #[test]
    fn visit_order_is_stable_and_named() {
        let mut ids = ParamIds::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mlp = Mlp::new(&mut ids, &mut rng, "net", &[2, 4, 1], false);
        let mut names = Vec::new();
        mlp.visit(&mut |n, _| names.push(n.to_string()));
        assert_eq!(
            names,
            vec!["net.0.weight", "net.0.bias", "net.1.weight", "net.1.bias"]
        );
        assert_eq!(mlp.param_count(), 2 * 4 + 4 + 4 + 1);
    }

    #[test]
    fn flatten_load_roundtrip() {
        let mut ids = ParamIds::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut mlp = Mlp::new(&mut ids, &mut rng, "r", &[2, 3, 1], false);
        let flat = mlp.flatten();
        let mut changed = flat.clone();
        changed[0] += 1.0;
        mlp.load_flat(&changed);
        assert_eq!(mlp.flatten(), changed);
    }
}
