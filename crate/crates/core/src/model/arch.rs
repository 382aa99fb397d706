use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pointwise nonlinearity applied after each hidden layer.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    /// Leaky ReLU with the given negative slope.
    LeakyRelu(f64),
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    x
                } else {
                    slope * x
                }
            }
            Activation::Tanh => x.tanh(),
        }
    }

    #[inline]
    pub fn derivative(&self, x: f64) -> f64 {
        match self {
            Activation::LeakyRelu(slope) => {
                if x > 0.0 {
                    1.0
                } else {
                    *slope
                }
            }
            Activation::Tanh => {
                let t = x.tanh();
                1.0 - t * t
            }
        }
    }
}

/// One hidden layer: dense map, optional layer norm on the pre-activations,
/// then the activation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HiddenSpec {
    pub width: usize,
    pub bias: bool,
    pub layer_norm: bool,
    /// Learnable gamma/beta after the normalisation. Only meaningful when
    /// `layer_norm` is set.
    pub ln_affine: bool,
}

/// Declarative MLP description. The final layer is always dense and never
/// normalised.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<HiddenSpec>,
    pub activation: Activation,
    pub final_bias: bool,
}

impl Architecture {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 {
            return Err(Error::Config("input_dim and output_dim must be positive".into()));
        }
        for (i, h) in self.hidden.iter().enumerate() {
            if h.width == 0 {
                return Err(Error::Config(format!("hidden layer {i} has width 0")));
            }
            if h.layer_norm && h.width < 2 {
                return Err(Error::Config(format!(
                    "hidden layer {i} applies layer norm with width {} < 2",
                    h.width
                )));
            }
        }
        Ok(())
    }

    /// A fully normalised configuration has layer norm after every hidden
    /// layer and carries no hidden biases or affine norm parameters. This is
    /// the regime in which the dense-final-layer cancellation is exact.
    pub fn is_fully_normalised(&self) -> bool {
        !self.hidden.is_empty()
            && self
                .hidden
                .iter()
                .all(|h| h.layer_norm && !h.bias && !h.ln_affine)
    }

    /// Width of the penultimate representation (input to the final layer).
    pub fn penultimate_dim(&self) -> usize {
        self.hidden.last().map(|h| h.width).unwrap_or(self.input_dim)
    }

    pub fn num_params(&self) -> usize {
        let mut n = 0;
        let mut fan_in = self.input_dim;
        for h in &self.hidden {
            n += h.width * fan_in;
            if h.bias {
                n += h.width;
            }
            if h.layer_norm && h.ln_affine {
                n += 2 * h.width;
            }
            fan_in = h.width;
        }
        n += self.output_dim * fan_in;
        if self.final_bias {
            n += self.output_dim;
        }
        n
    }

    /// Layer-norm MLP with the given hidden widths, no hidden biases and no
    /// affine norm parameters.
    pub fn fully_normalised_mlp(
        input_dim: usize,
        widths: &[usize],
        output_dim: usize,
        activation: Activation,
        final_bias: bool,
    ) -> Architecture {
        Architecture {
            input_dim,
            output_dim,
            hidden: widths
                .iter()
                .map(|&w| HiddenSpec { width: w, bias: false, layer_norm: true, ln_affine: false })
                .collect(),
            activation,
            final_bias,
        }
    }

    /// Plain MLP without normalisation.
    pub fn plain_mlp(
        input_dim: usize,
        widths: &[usize],
        output_dim: usize,
        activation: Activation,
        bias: bool,
    ) -> Architecture {
        Architecture {
            input_dim,
            output_dim,
            hidden: widths
                .iter()
                .map(|&w| HiddenSpec { width: w, bias, layer_norm: false, ln_affine: false })
                .collect(),
            activation,
            final_bias: bias,
        }
    }
}
