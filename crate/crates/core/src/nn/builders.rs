//! The five network layouts used by the system.

use serde::{Deserialize, Serialize};

use super::spec::{Activation, ConvPadding, LayerSpec, ModelSpec};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvStage {
    pub filters: usize,
    pub kernel: usize,
}

/// Generator layout after the sampling layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorSchedule {
    pub latent_dim: usize,
    /// Hidden fully connected widths; a last layer of `output_bins` follows.
    pub dense_widths: Vec<usize>,
    /// "Same"-padded conv stages; the last one must have a single filter.
    pub conv_stages: Vec<ConvStage>,
}

impl Default for GeneratorSchedule {
    fn default() -> Self {
        GeneratorSchedule {
            latent_dim: 3,
            dense_widths: vec![32, 128],
            conv_stages: vec![
                ConvStage { filters: 8, kernel: 5 },
                ConvStage { filters: 8, kernel: 5 },
                ConvStage { filters: 1, kernel: 5 },
            ],
        }
    }
}

/// Hidden widths of the critic and triplet encoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DenseSchedule {
    pub critic_hidden: Vec<usize>,
    pub encoder_hidden: Vec<usize>,
    pub embedding_dim: usize,
}

impl Default for DenseSchedule {
    fn default() -> Self {
        DenseSchedule {
            critic_hidden: vec![128, 64, 32, 16, 8],
            encoder_hidden: vec![128; 5],
            embedding_dim: 4,
        }
    }
}

const GEN_SLOPE: f64 = 0.001;
const NET_SLOPE: f64 = 0.1;

fn leaky(slope: f64) -> LayerSpec {
    LayerSpec::Activation(Activation::LeakyRelu { slope })
}

fn bn() -> LayerSpec {
    LayerSpec::BatchNorm {
        momentum: 0.99,
        epsilon: 1e-5,
    }
}

fn dense(units: usize) -> LayerSpec {
    LayerSpec::FullyConnected { units, use_bias: true }
}

fn conv(filters: usize, kernel: usize, padding: ConvPadding) -> LayerSpec {
    LayerSpec::Conv1d {
        filters,
        kernel,
        stride: 1,
        padding,
        use_bias: true,
    }
}

/// Class code (one scalar) to an `output_bins` signature.
pub fn build_generator(num_fault_classes: usize, output_bins: usize, schedule: &GeneratorSchedule) -> Result<ModelSpec> {
    if num_fault_classes == 0 {
        return Err(Error::Spec("generator needs at least one fault class".into()));
    }
    let mut prev = schedule.latent_dim;
    for &w in &schedule.dense_widths {
        if w <= prev || w >= output_bins {
            return Err(Error::Spec(format!(
                "generator widths {:?} do not widen from {} to {output_bins}",
                schedule.dense_widths, schedule.latent_dim
            )));
        }
        prev = w;
    }
    if schedule.conv_stages.last().map(|s| s.filters) != Some(1) {
        return Err(Error::Spec("generator conv stack must end in a single filter".into()));
    }
    let mut layers = vec![LayerSpec::Sampling {
        latent_dim: schedule.latent_dim,
        slope: GEN_SLOPE,
    }];
    for &w in schedule.dense_widths.iter().chain(std::iter::once(&output_bins)) {
        layers.push(LayerSpec::FullyConnected {
            units: w,
            use_bias: false,
        });
        layers.push(leaky(GEN_SLOPE));
        layers.push(bn());
    }
    layers.push(LayerSpec::Reshape {
        shape: vec![1, output_bins],
    });
    for stage in &schedule.conv_stages {
        layers.push(conv(stage.filters, stage.kernel, ConvPadding::Same));
        layers.push(leaky(GEN_SLOPE));
        layers.push(bn());
    }
    layers.push(LayerSpec::Reshape {
        shape: vec![output_bins],
    });
    let spec = ModelSpec {
        name: "generator".into(),
        input_shape: vec![1],
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}

fn dense_stack(hidden: &[usize], rate: f64, out: usize) -> Vec<LayerSpec> {
    let mut layers = Vec::new();
    for &w in hidden {
        layers.push(dense(w));
        layers.push(leaky(NET_SLOPE));
        layers.push(LayerSpec::Dropout { rate });
    }
    layers.push(dense(out));
    layers
}

/// Wasserstein critic: hidden dense layers with dropout 0.1, linear scalar output.
pub fn build_discriminator(input_bins: usize, hidden: &[usize]) -> Result<ModelSpec> {
    let spec = ModelSpec {
        name: "discriminator".into(),
        input_shape: vec![input_bins],
        layers: dense_stack(hidden, 0.1, 1),
    };
    spec.shapes()?;
    Ok(spec)
}

/// Dense layers with dropout 0.4 and an L2-normalized embedding.
pub fn build_triplet_encoder(input_bins: usize, hidden: &[usize], embedding_dim: usize) -> Result<ModelSpec> {
    let mut layers = dense_stack(hidden, 0.4, embedding_dim);
    layers.push(LayerSpec::L2Normalize);
    let spec = ModelSpec {
        name: "triplet_encoder".into(),
        input_shape: vec![input_bins],
        layers,
    };
    spec.shapes()?;
    Ok(spec)
}

fn conv_classifier(
    name: &str,
    num_classes: usize,
    input_bins: usize,
    stages: usize,
    filters: usize,
    kernel: usize,
    act: Activation,
    rate: f64,
) -> Result<ModelSpec> {
    if num_classes < 2 {
        return Err(Error::Spec(format!("{name} needs at least two classes")));
    }
    let mut layers = vec![LayerSpec::Reshape {
        shape: vec![1, input_bins],
    }];
    for _ in 0..stages {
        layers.push(conv(filters, kernel, ConvPadding::Valid));
        layers.push(LayerSpec::Activation(act));
        layers.push(LayerSpec::Dropout { rate });
    }
    let mut spec = ModelSpec {
        name: name.into(),
        input_shape: vec![input_bins],
        layers,
    };
    let flat: usize = spec.output_shape()?.iter().product();
    spec.layers.push(LayerSpec::Reshape { shape: vec![flat] });
    spec.layers.push(dense(num_classes));
    Ok(spec)
}

/// Early-stopping classifier: four conv layers of 8 filters, kernel 3.
pub fn build_aux_classifier(num_classes: usize, input_bins: usize) -> Result<ModelSpec> {
    conv_classifier(
        "aux_classifier",
        num_classes,
        input_bins,
        4,
        8,
        3,
        Activation::LeakyRelu { slope: NET_SLOPE },
        0.1,
    )
}

/// Evaluation classifier: three conv layers of 10 filters with ReLU.
pub fn build_eval_classifier(num_classes: usize, kernel: usize, input_bins: usize) -> Result<ModelSpec> {
    conv_classifier("eval_classifier", num_classes, input_bins, 3, 10, kernel, Activation::Relu, 0.4)
}
