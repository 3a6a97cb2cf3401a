//! The backbone classifier: `conv -> relu -> 2×2 max-pool` blocks, a global
//! average pool and one linear layer. With this head, Grad-CAM coincides
//! with CAM, so the saliency map is a first-order function of the weights.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Tape, Tensor, Var};

pub const HEAD_WEIGHT: &str = "head.weight";
pub const HEAD_BIAS: &str = "head.bias";

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub widths: Vec<usize>,
    pub kernel_sizes: Vec<usize>,
    pub num_classes: usize,
}

impl BackboneConfig {
    /// Three blocks of widths 16/32/64 with 3×3 kernels.
    pub fn new(in_channels: usize, height: usize, width: usize, num_classes: usize) -> Self {
        BackboneConfig {
            in_channels,
            height,
            width,
            widths: vec![16, 32, 64],
            kernel_sizes: vec![3, 3, 3],
            num_classes,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.len() != self.kernel_sizes.len() {
            return Err(Error::InvalidArgument(format!(
                "{} block widths but {} kernel sizes",
                self.widths.len(),
                self.kernel_sizes.len()
            )));
        }
        if let Some(k) = self.kernel_sizes.iter().find(|&&k| k % 2 == 0) {
            return Err(Error::InvalidArgument(format!("kernel size {k} must be odd")));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::InvalidArgument(
                "need at least two classes and one input channel".into(),
            ));
        }
        let (h, w) = self.feature_size();
        if h < 4 || w < 4 {
            return Err(Error::InvalidArgument(format!(
                "final feature map {h}×{w} is smaller than 4×4"
            )));
        }
        Ok(())
    }

    /// Spatial extent of the activations feeding the global average pool.
    pub fn feature_size(&self) -> (usize, usize) {
        let blocks = self.widths.len() as u32;
        (self.height >> blocks, self.width >> blocks)
    }

    pub fn feature_channels(&self) -> usize {
        *self.widths.last().unwrap_or(&0)
    }
}

/// Named parameter tensors, iterated in name order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelParams {
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Parameters whose name starts with `prefix`.
    pub fn with_prefix(&self, prefix: &str) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn without_prefix(&self, prefix: &str) -> ModelParams {
        ModelParams {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| !k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ModelParams) {
        self.tensors.extend(other.tensors);
    }

    /// Record every tensor as a leaf of `tape`.
    pub fn bind(&self, tape: &mut Tape, requires_grad: bool) -> BoundParams {
        BoundParams {
            vars: self
                .tensors
                .iter()
                .map(|(k, v)| (k.clone(), tape.leaf(v.clone(), requires_grad)))
                .collect(),
        }
    }
}

/// Parameters registered on a tape.
#[derive(Clone, Debug)]
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn from_vars(vars: impl IntoIterator<Item = (String, Var)>) -> Self {
        BoundParams {
            vars: vars.into_iter().collect(),
        }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter {name}")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Collect accumulated gradients keyed by parameter name; parameters
    /// the loss did not reach get zeros.
    pub fn gradients(&self, tape: &Tape) -> BTreeMap<String, Vec<f64>> {
        self.vars
            .iter()
            .map(|(k, &v)| {
                let g = tape
                    .grad(v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; tape.value(v).len()]);
                (k.clone(), g)
            })
            .collect()
    }
}

fn conv_names(block: usize) -> (String, String) {
    (
        format!("conv{}.weight", block + 1),
        format!("conv{}.bias", block + 1),
    )
}

/// Fan-in scaled uniform draw with standard deviation `sqrt(2 / fan_in)`.
pub(crate) fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = libm::sqrt(6.0 / fan_in as f64);
    Tensor::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

pub fn init_params(config: &BackboneConfig, seed: u64) -> Result<ModelParams> {
    config.validate()?;
    let mut rng = rng::stream(seed, rng::tags::BACKBONE_INIT, 0);
    let mut params = ModelParams::new();
    let mut c_in = config.in_channels;
    for (i, (&c_out, &k)) in config.widths.iter().zip(&config.kernel_sizes).enumerate() {
        let (w, b) = conv_names(i);
        params.insert(w, kaiming_uniform(&[c_out, c_in, k, k], c_in * k * k, &mut rng));
        params.insert(b, Tensor::zeros(&[c_out]));
        c_in = c_out;
    }
    params.insert(
        HEAD_WEIGHT.to_string(),
        kaiming_uniform(&[config.num_classes, c_in], c_in, &mut rng),
    );
    params.insert(HEAD_BIAS.to_string(), Tensor::zeros(&[config.num_classes]));
    Ok(params)
}

pub struct ForwardOutput {
    /// `N×num_classes`.
    pub logits: Var,
    /// `N×K×h×w`, the tensor fed to the global average pool.
    pub activations: Var,
}

pub fn forward(
    tape: &mut Tape,
    config: &BackboneConfig,
    params: &BoundParams,
    batch: Var,
) -> Result<ForwardOutput> {
    let shape = tape.shape(batch);
    if shape.len() != 4 || shape[1..] != [config.in_channels, config.height, config.width] {
        return Err(Error::shape(
            "forward",
            format!(
                "batch {:?} does not match input {}×{}×{}",
                shape, config.in_channels, config.height, config.width
            ),
        ));
    }
    let mut h = batch;
    for (i, &k) in config.kernel_sizes.iter().enumerate() {
        let (w, b) = conv_names(i);
        h = tape.conv2d(h, params.get(&w)?, Some(params.get(&b)?), 1, k / 2)?;
        h = tape.relu(h);
        h = tape.max_pool2d(h, 2)?;
    }
    let pooled = tape.global_avg_pool(h)?;
    let logits = tape.linear(pooled, params.get(HEAD_WEIGHT)?, params.get(HEAD_BIAS)?)?;
    Ok(ForwardOutput {
        logits,
        activations: h,
    })
}

/// Mean softmax cross-entropy.
pub fn prediction_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Result<Var> {
    tape.softmax_cross_entropy(logits, labels)
}

/// Row-wise argmax of a logits tensor (first index on ties).
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let c = logits.shape().get(1).copied().unwrap_or(1).max(1);
    logits
        .data()
        .chunks_exact(c)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
