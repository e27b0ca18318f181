use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "function", rename_all = "snake_case")]
pub enum Activation {
    LeakyRelu { slope: f64 },
    Relu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConvPadding {
    #[default]
    Valid,
    Same,
}

fn one() -> usize {
    1
}

fn yes() -> bool {
    true
}

fn bn_momentum() -> f64 {
    0.99
}

fn bn_epsilon() -> f64 {
    1e-5
}

/// One layer of a feed-forward stack. Shapes exclude the batch axis.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// `[d] -> [units]`
    FullyConnected {
        units: usize,
        #[serde(default = "yes")]
        use_bias: bool,
    },
    /// `[channels, len] -> [filters, len']`
    Conv1d {
        filters: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: ConvPadding,
        #[serde(default = "yes")]
        use_bias: bool,
    },
    /// Normalizes each channel (axis 0 of the per-sample shape).
    BatchNorm {
        #[serde(default = "bn_momentum")]
        momentum: f64,
        #[serde(default = "bn_epsilon")]
        epsilon: f64,
    },
    Dropout { rate: f64 },
    Activation(Activation),
    /// Unit Euclidean norm along the last axis.
    L2Normalize,
    Reshape { shape: Vec<usize> },
    /// `[d] -> [latent_dim]`: two dense heads `mu` and `v`, each followed by
    /// LeakyReLU, combined as `mu + softplus(v) * eps` with `eps ~ N(0, 1)`.
    Sampling { latent_dim: usize, slope: f64 },
}

impl LayerSpec {
    pub fn kind(&self) -> &'static str {
        match self {
            LayerSpec::FullyConnected { .. } => "fully_connected",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Activation(_) => "activation",
            LayerSpec::L2Normalize => "l2_normalize",
            LayerSpec::Reshape { .. } => "reshape",
            LayerSpec::Sampling { .. } => "sampling",
        }
    }

    fn validate(&self) -> std::result::Result<(), String> {
        match *self {
            LayerSpec::FullyConnected { units, .. } if units == 0 => Err("units must be >= 1".into()),
            LayerSpec::Conv1d {
                filters,
                kernel,
                stride,
                ..
            } if filters == 0 || kernel == 0 || stride == 0 => {
                Err("filters, kernel and stride must be >= 1".into())
            }
            LayerSpec::Dropout { rate } if !(0.0..1.0).contains(&rate) => {
                Err(format!("dropout rate {rate} outside [0, 1)"))
            }
            LayerSpec::BatchNorm { momentum, epsilon }
                if !(0.0..=1.0).contains(&momentum) || epsilon <= 0.0 =>
            {
                Err("batch norm needs momentum in [0, 1] and epsilon > 0".into())
            }
            LayerSpec::Sampling { latent_dim, .. } if latent_dim == 0 => {
                Err("latent_dim must be >= 1".into())
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output shape for a per-sample input shape.
    pub fn output_shape(&self, input: &[usize]) -> std::result::Result<Vec<usize>, String> {
        self.validate()?;
        match self {
            LayerSpec::FullyConnected { units, .. } => match input {
                [_] => Ok(vec![*units]),
                _ => Err(format!("fully_connected needs a flat input, got {input:?}")),
            },
            LayerSpec::Sampling { latent_dim, .. } => match input {
                [_] => Ok(vec![*latent_dim]),
                _ => Err(format!("sampling needs a flat input, got {input:?}")),
            },
            LayerSpec::Conv1d {
                filters,
                kernel,
                stride,
                padding,
                ..
            } => match input {
                [_, len] => {
                    let out = match padding {
                        ConvPadding::Same => len.div_ceil(*stride),
                        ConvPadding::Valid if len >= kernel => (len - kernel) / stride + 1,
                        ConvPadding::Valid => {
                            return Err(format!("kernel {kernel} longer than input length {len}"))
                        }
                    };
                    Ok(vec![*filters, out])
                }
                _ => Err(format!("conv1d needs [channels, length], got {input:?}")),
            },
            LayerSpec::BatchNorm { .. } => match input.len() {
                1 | 2 => Ok(input.to_vec()),
                _ => Err(format!("batch_norm needs 1 or 2 axes, got {input:?}")),
            },
            LayerSpec::Reshape { shape } => {
                if shape.iter().product::<usize>() == input.iter().product::<usize>() && !shape.is_empty() {
                    Ok(shape.clone())
                } else {
                    Err(format!("cannot reshape {input:?} to {shape:?}"))
                }
            }
            LayerSpec::Dropout { .. } | LayerSpec::Activation(_) | LayerSpec::L2Normalize => {
                Ok(input.to_vec())
            }
        }
    }
}

/// Named layer stack with its per-sample input shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Per-sample shapes: the input followed by every layer's output.
    pub fn shapes(&self) -> Result<Vec<Vec<usize>>> {
        if self.input_shape.is_empty() || self.input_shape.contains(&0) {
            return Err(Error::Spec(format!("{}: bad input shape {:?}", self.name, self.input_shape)));
        }
        let mut shapes = vec![self.input_shape.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            let next = layer
                .output_shape(shapes.last().unwrap())
                .map_err(|e| Error::Spec(format!("{} layer {i} ({}): {e}", self.name, layer.kind())))?;
            shapes.push(next);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shapes()?.pop().unwrap())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_layers_are_rejected() {
        let bad = [
            LayerSpec::FullyConnected { units: 0, use_bias: true },
            LayerSpec::Dropout { rate: 1.0 },
            LayerSpec::Conv1d {
                filters: 1,
                kernel: 0,
                stride: 1,
                padding: ConvPadding::Valid,
                use_bias: true,
            },
        ];
        for layer in bad {
            let spec = ModelSpec {
                name: "m".into(),
                input_shape: vec![4],
                layers: vec![LayerSpec::Reshape { shape: vec![1, 4] }, layer],
            };
            assert!(spec.shapes().is_err());
        }
    }

    #[test]
    fn shapes_compose() {
        let spec = ModelSpec {
            name: "m".into(),
            input_shape: vec![12],
            layers: vec![
                LayerSpec::Reshape { shape: vec![1, 12] },
                LayerSpec::Conv1d {
                    filters: 3,
                    kernel: 5,
                    stride: 1,
                    padding: ConvPadding::Valid,
                    use_bias: true,
                },
                LayerSpec::Reshape { shape: vec![24] },
                LayerSpec::FullyConnected { units: 2, use_bias: true },
            ],
        };
        assert_eq!(spec.output_shape().unwrap(), vec![2]);
        let mut broken = spec.clone();
        broken.layers.remove(2);
        assert!(broken.shapes().is_err());
    }

    #[test]
    fn serde_defaults_fill_in() {
        let spec: ModelSpec = toml::from_str(
            r#"
            name = "x"
            input_shape = [8]
            [[layers]]
            kind = "batch_norm"
            [[layers]]
            kind = "activation"
            function = "leaky_relu"
            slope = 0.1
            "#,
        )
        .unwrap();
        assert_eq!(
            spec.layers[0],
            LayerSpec::BatchNorm {
                momentum: 0.99,
                epsilon: 1e-5
            }
        );
        assert_eq!(spec.layers[1], LayerSpec::Activation(Activation::LeakyRelu { slope: 0.1 }));
    }
}
