use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Layer widths of a feedforward control network.
///
/// The input is the time point prepended to the state, every hidden layer is
/// followed by an ELU, and the output layer is affine.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
}

impl MlpSpec {
    /// Network mapping `(t, x)` with `x` in R^state_dim to R^output_dim,
    /// with three hidden layers of width `state_dim + 10`.
    pub fn control(state_dim: usize, output_dim: usize) -> Self {
        Self {
            input_dim: state_dim + 1,
            hidden_dims: vec![state_dim + 10; 3],
            output_dim,
        }
    }

    pub fn with_hidden(mut self, hidden_dims: Vec<usize>) -> Self {
        self.hidden_dims = hidden_dims;
        self
    }

    /// Number of affine layers.
    pub fn depth(&self) -> usize {
        self.hidden_dims.len() + 1
    }

    /// `(out, in)` for each affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim];
        widths.extend(&self.hidden_dims);
        widths.push(self.output_dim);
        widths.windows(2).map(|w| (w[1], w[0])).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim < 2 {
            return Err(Error::config(
                "input_dim",
                "needs the time input plus at least one state component",
            ));
        }
        if self.output_dim == 0 {
            return Err(Error::config("output_dim", "layer width must be positive"));
        }
        if let Some(i) = self.hidden_dims.iter().position(|&w| w == 0) {
            return Err(Error::config(
                format!("hidden_dims[{i}]"),
                "layer width must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    /// `[out, in]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

/// Weights and biases of one network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub spec: MlpSpec,
    pub layers: Vec<Layer>,
}

impl MlpParams {
    /// Glorot-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(spec: &MlpSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| {
                let limit = (6.0 / (inp + out) as f64).sqrt();
                let data = (0..out * inp)
                    .map(|_| rng.random_range(-limit..=limit))
                    .collect();
                Layer {
                    weight: Tensor::matrix(out, inp, data).expect("layer size"),
                    bias: Tensor::zeros(&[out]),
                }
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    /// All-zero parameters; the network outputs zero everywhere.
    pub fn zeros(spec: &MlpSpec) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_dims()
            .into_iter()
            .map(|(out, inp)| Layer {
                weight: Tensor::zeros(&[out, inp]),
                bias: Tensor::zeros(&[out]),
            })
            .collect();
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.len() + l.bias.len())
            .sum()
    }

    /// Parameter tensors in `[w1, b1, w2, b2, ...]` order.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.is_finite())
    }

    /// Records the parameters on `tape`, trainable or frozen.
    pub fn bind<'t>(&self, tape: &'t Tape, trainable: bool) -> BoundMlp<'t> {
        let leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        BoundMlp {
            input_dim: self.spec.input_dim,
            layers: self
                .layers
                .iter()
                .map(|l| (leaf(&l.weight), leaf(&l.bias)))
                .collect(),
        }
    }

    /// Output at a single point `(t, x)`.
    pub fn eval(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let tape = Tape::new();
        let net = self.bind(&tape, false);
        let x = tape.constant(Tensor::repeat_row(x, 1));
        Ok(net.forward(t, x)?.to_tensor().into_data())
    }
}

/// Network parameters recorded on a tape.
#[derive(Debug, Clone)]
pub struct BoundMlp<'t> {
    input_dim: usize,
    layers: Vec<(Var<'t>, Var<'t>)>,
}

impl<'t> BoundMlp<'t> {
    /// Evaluates the network on a batch of states `x[M, n]` at time `t`.
    pub fn forward(&self, t: f64, x: Var<'t>) -> Result<Var<'t>> {
        let shape = x.shape();
        if shape.len() != 2 || shape[1] + 1 != self.input_dim {
            return Err(Error::Dimension {
                context: "network input",
                expected: self.input_dim - 1,
                got: shape.last().copied().unwrap_or(0),
            });
        }
        let time = x.tape().constant(Tensor::full(&[shape[0], 1], t));
        let mut h = time.concat_last(x)?;
        let last = self.layers.len() - 1;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            h = h.affine(w, b)?;
            if i < last {
                h = h.elu();
            }
        }
        Ok(h)
    }

    /// Handles in the same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var<'t>> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
