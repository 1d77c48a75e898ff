use rand::Rng;
use serde::{Deserialize, Serialize};

use super::tape::{Grads, Tape, Var};
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Tanh,
    /// softplus
    SmoothRelu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "block", rename_all = "snake_case", deny_unknown_fields)]
pub enum InputBlock {
    State { dim: usize },
    Denoised { dim: usize },
    Time { width: usize },
}

impl InputBlock {
    pub fn width(&self) -> usize {
        match *self {
            InputBlock::State { dim } | InputBlock::Denoised { dim } => dim,
            InputBlock::Time { width } => width,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "head", rename_all = "snake_case", deny_unknown_fields)]
pub enum OutputHead {
    Regression { dim: usize },
    Logits { classes: usize },
}

impl OutputHead {
    pub fn width(&self) -> usize {
        match *self {
            OutputHead::Regression { dim } => dim,
            OutputHead::Logits { classes } => classes,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub inputs: Vec<InputBlock>,
    pub hidden_widths: Vec<usize>,
    pub activation: Activation,
    pub output: OutputHead,
    pub init_seed: u64,
    #[serde(default = "default_true")]
    pub zero_init_output: bool,
}

fn default_true() -> bool {
    true
}

impl NetworkSpec {
    pub fn validate(&self) -> Result<()> {
        if self.inputs.is_empty() {
            return Err(Error::Config("network needs at least one input block".into()));
        }
        let zero_input = self.inputs.iter().any(|b| b.width() == 0);
        if zero_input || self.hidden_widths.contains(&0) || self.output.width() == 0 {
            return Err(Error::Config("all network widths must be >= 1".into()));
        }
        if let Some(InputBlock::Time { width }) =
            self.inputs.iter().find(|b| matches!(b, InputBlock::Time { .. }))
        {
            if width % 2 != 0 {
                return Err(Error::Config(format!("time embedding width {width} must be even")));
            }
        }
        Ok(())
    }

    pub fn input_width(&self) -> usize {
        self.inputs.iter().map(InputBlock::width).sum()
    }

    /// `(fan_in, fan_out)` of every dense layer.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = vec![self.input_width()];
        dims.extend(&self.hidden_widths);
        dims.push(self.output.width());
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_shapes().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Dense feed-forward network with parameters in one flat vector.
///
/// Layout per layer: weight `fan_in x fan_out` (column-major), then bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: NetworkSpec,
    params: Vec<f64>,
}

pub struct TapedNet {
    pub output: Var,
    pub params: Vec<Var>,
}

impl Mlp {
    pub fn new(spec: NetworkSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = rng::substream(spec.init_seed, &[rng::tag::INIT]);
        let shapes = spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut params = Vec::with_capacity(spec.parameter_count());
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let zero = l == last && spec.zero_init_output;
            let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
            for _ in 0..fan_in * fan_out {
                params.push(if zero { 0.0 } else { rng.random_range(-a..a) });
            }
            params.extend(std::iter::repeat_n(0.0, fan_out));
        }
        Ok(Mlp { spec, params })
    }

    pub fn from_parameters(spec: NetworkSpec, params: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if params.len() != spec.parameter_count() {
            return Err(Error::Shape(format!(
                "spec expects {} parameters, got {}",
                spec.parameter_count(),
                params.len()
            )));
        }
        Ok(Mlp { spec, params })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    fn check_inputs(&self, shapes: &[(usize, usize)]) -> Result<usize> {
        if shapes.len() != self.spec.inputs.len() {
            return Err(Error::Shape(format!(
                "network takes {} input blocks, got {}",
                self.spec.inputs.len(),
                shapes.len()
            )));
        }
        let rows = shapes[0].0;
        for (block, &(r, c)) in self.spec.inputs.iter().zip(shapes) {
            if r != rows || c != block.width() {
                return Err(Error::Shape(format!(
                    "input block {block:?} expects {rows}x{}, got {r}x{c}",
                    block.width()
                )));
            }
        }
        Ok(rows)
    }

    /// Records the forward pass on `tape`. Parameters become leaves so their
    /// gradients can be read back with [`Mlp::flat_grad`].
    pub fn forward_tape<'a>(&self, tape: &mut Tape<'a>, inputs: &[Var]) -> Result<TapedNet> {
        let shapes: Vec<_> = inputs.iter().map(|&v| tape.value(v).shape()).collect();
        self.check_inputs(&shapes)?;
        let mut h = if inputs.len() == 1 {
            inputs[0]
        } else {
            tape.concat(inputs)
        };
        let shapes = self.spec.layer_shapes();
        let last = shapes.len() - 1;
        let mut params = Vec::with_capacity(2 * shapes.len());
        let mut off = 0;
        for (l, &(fan_in, fan_out)) in shapes.iter().enumerate() {
            let w = Matrix::from_column_slice(fan_in, fan_out, &self.params[off..off + fan_in * fan_out]);
            off += fan_in * fan_out;
            let b = Matrix::from_row_slice(1, fan_out, &self.params[off..off + fan_out]);
            off += fan_out;
            let wv = tape.leaf(w);
            let bv = tape.leaf(b);
            params.push(wv);
            params.push(bv);
            h = tape.matmul(h, wv);
            h = tape.add_bias(h, bv);
            if l != last {
                h = match self.spec.activation {
                    Activation::Tanh => tape.tanh(h),
                    Activation::SmoothRelu => tape.softplus(h),
                };
            }
        }
        Ok(TapedNet { output: h, params })
    }

    pub fn forward(&self, inputs: &[&Matrix]) -> Result<Matrix> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.leaf((*m).clone())).collect();
        let net = self.forward_tape(&mut tape, &vars)?;
        Ok(tape.value(net.output).clone())
    }

    /// Flattens parameter gradients in storage order.
    pub fn flat_grad(&self, grads: &Grads, net: &TapedNet, tape: &Tape) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.params.len());
        for &p in &net.params {
            match grads.get(p) {
                Some(g) if g.nrows() == 1 => out.extend(g.iter()),
                Some(g) => out.extend_from_slice(g.as_slice()),
                None => out.extend(std::iter::repeat_n(0.0, tape.value(p).len())),
            }
        }
        out
    }
}

/// Sinusoidal embedding of continuous time, evaluated on the 0..999 scale.
pub fn time_embedding(t: &[f64], width: usize) -> Matrix {
    let half = width / 2;
    let denom = (half.max(2) - 1) as f64;
    let step = (10_000f64).ln() / denom;
    Matrix::from_fn(t.len(), width, |i, j| {
        let k = j % half;
        let arg = 999.0 * t[i] * (-step * k as f64).exp();
        if j < half {
            arg.sin()
        } else {
            arg.cos()
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(zero: bool) -> NetworkSpec {
        NetworkSpec {
            inputs: vec![InputBlock::State { dim: 2 }, InputBlock::Time { width: 8 }],
            hidden_widths: vec![5, 4],
            activation: Activation::Tanh,
            output: OutputHead::Logits { classes: 3 },
            init_seed: 3,
            zero_init_output: zero,
        }
    }

    #[test]
    fn parameter_count_follows_spec() {
        let s = spec(true);
        assert_eq!(s.parameter_count(), 10 * 5 + 5 + 5 * 4 + 4 + 4 * 3 + 3);
        assert_eq!(Mlp::new(s).unwrap().params().len(), 94);
    }

    #[test]
    fn zero_output_layer_gives_zero_logits() {
        let net = Mlp::new(spec(true)).unwrap();
        let x = Matrix::from_row_slice(2, 2, &[1.0, -1.0, 0.5, 2.0]);
        let e = time_embedding(&[0.1, 0.9], 8);
        let out = net.forward(&[&x, &e]).unwrap();
        assert!(out.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn shape_mismatch_is_an_error() {
        let net = Mlp::new(spec(false)).unwrap();
        let x = Matrix::zeros(2, 3);
        let e = time_embedding(&[0.1, 0.9], 8);
        assert!(matches!(net.forward(&[&x, &e]), Err(Error::Shape(_))));
        assert!(matches!(net.forward(&[&e]), Err(Error::Shape(_))));
        assert!(Mlp::from_parameters(spec(false), vec![0.0; 3]).is_err());
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let mut s = spec(false);
        s.hidden_widths = vec![0];
        assert!(Mlp::new(s).is_err());
        let mut s = spec(false);
        s.inputs[1] = InputBlock::Time { width: 7 };
        assert!(Mlp::new(s).is_err());
    }

    #[test]
    fn embedding_is_injective_on_integer_grid() {
        let t: Vec<f64> = (0..1000).map(|i| i as f64 / 999.0).collect();
        let e = time_embedding(&t, 32);
        let mut min = f64::INFINITY;
        for i in 0..1000 {
            for j in (i + 1)..1000 {
                let d = (e.row(i) - e.row(j)).norm();
                min = min.min(d);
            }
        }
        assert!(min > 1e-6, "closest pair at distance {min}");
    }
}
