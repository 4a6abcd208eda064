//! The waveform generator and the MPD/MSD discriminator stacks.

mod discriminator;
mod generator;

pub use discriminator::{
    discriminator_forward, mpd_forward, msd_forward, BlockOutput, DiscriminatorConfig, DiscriminatorOutput,
    MsdLayer,
};
pub use generator::{generator_forward, mrf_forward, GeneratorConfig};

use rand::Rng;

use crate::tensor::{ParamSet, Tensor};

/// Standard deviation of the normal weight initialiser.
pub const INIT_STD: f64 = 0.01;

/// Shape of one learnable layer: a weight tensor plus an optional bias.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerSpec {
    pub name: String,
    pub weight: Vec<usize>,
    pub bias: Option<usize>,
}

impl LayerSpec {
    pub(crate) fn new(name: impl Into<String>, weight: impl Into<Vec<usize>>, bias: usize) -> Self {
        LayerSpec { name: name.into(), weight: weight.into(), bias: Some(bias) }
    }

    pub fn param_count(&self) -> usize {
        self.weight.iter().product::<usize>() + self.bias.unwrap_or(0)
    }
}

pub fn count_layer_params(layers: &[LayerSpec]) -> usize {
    layers.iter().map(LayerSpec::param_count).sum()
}

/// Weights from N(0, 0.01²), biases zero. Weight `name.w`, bias `name.b`.
pub fn init_params<R: Rng + ?Sized>(layers: &[LayerSpec], rng: &mut R) -> ParamSet {
    let mut params = ParamSet::new();
    for l in layers {
        params.insert(format!("{}.w", l.name), Tensor::randn(l.weight.clone(), INIT_STD, rng));
        if let Some(b) = l.bias {
            params.insert(format!("{}.b", l.name), Tensor::zeros([b]));
        }
    }
    params
}

/// All-zero parameters with the given layout.
pub fn zero_params(layers: &[LayerSpec]) -> ParamSet {
    let mut params = ParamSet::new();
    for l in layers {
        params.insert(format!("{}.w", l.name), Tensor::zeros(l.weight.clone()));
        if let Some(b) = l.bias {
            params.insert(format!("{}.b", l.name), Tensor::zeros([b]));
        }
    }
    params
}
