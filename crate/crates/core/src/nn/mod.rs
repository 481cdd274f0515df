//! Layer-sequence models with named feature taps.

mod checkpoint;
mod gradcam;

pub use checkpoint::{checkpoint_bytes, load_checkpoint, model_from_bytes, save_checkpoint, CHECKPOINT_MAGIC};
pub use gradcam::{cam_from_gradients, grad_cam, grad_cam_batch};

use std::collections::BTreeMap;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{rng_for, stream};
use crate::tensor::{Scalar, Tape, Tensor, Var};

pub const TAP_CONV1: &str = "conv1";
pub const TAP_CONV2: &str = "conv2";
pub const TAP_PENULTIMATE: &str = "penultimate";
pub const TAP_LOGITS: &str = "logits";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Relu,
    MaxPool2d {
        window: usize,
        stride: usize,
    },
    Dropout {
        p: f64,
    },
    Flatten,
    Linear {
        in_features: usize,
        out_features: usize,
    },
}

impl LayerSpec {
    /// Shapes of the layer's weight and bias, if it has parameters.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                ..
            } => vec![vec![out_channels, in_channels, kernel, kernel], vec![out_channels]],
            LayerSpec::Linear {
                in_features,
                out_features,
            } => vec![vec![out_features, in_features], vec![out_features]],
            _ => vec![],
        }
    }

    fn fan_in(&self) -> usize {
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                kernel,
                ..
            } => in_channels * kernel * kernel,
            LayerSpec::Linear { in_features, .. } => in_features,
            _ => 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// An ordered stack of layers plus a registry of named taps, each pointing
/// at the layer whose output it exposes.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T: Scalar = f32> {
    layers: Vec<LayerSpec>,
    params: Vec<Vec<Tensor<T>>>,
    taps: BTreeMap<String, usize>,
    input_shape: [usize; 3],
    num_classes: usize,
    seed: u64,
    mode: Mode,
}

/// Logits plus requested intermediate features from a single forward pass.
#[derive(Clone, Debug)]
pub struct Activations<V> {
    pub logits: V,
    pub features: BTreeMap<String, V>,
}

impl<V> Activations<V> {
    pub fn feature(&self, tap: &str) -> Result<&V> {
        self.features
            .get(tap)
            .ok_or_else(|| Error::Lookup(format!("tap `{tap}` was not requested")))
    }
}

/// A model's parameters recorded on a tape for one forward pass.
pub struct BoundParams<'t, T: Scalar> {
    vars: Vec<Vec<Var<'t, T>>>,
}

impl<'t, T: Scalar> BoundParams<'t, T> {
    pub fn flat(&self) -> impl Iterator<Item = &Var<'t, T>> {
        self.vars.iter().flatten()
    }
}

/// The reference MNIST network:
/// `Conv(32) → ReLU → Conv(64) → ReLU → MaxPool(2) → Dropout(0.25) →
/// Linear(9216, 128) → ReLU → Dropout(0.5) → Linear(128, classes)`.
///
/// Taps: `conv1` and `conv2` (post-ReLU conv outputs, `conv2` before
/// pooling), `penultimate` (128-d post-ReLU) and `logits`.
pub fn build_mnist_net(in_channels: usize, num_classes: usize, seed: u64) -> Result<Model<f32>> {
    if num_classes < 2 {
        return Err(Error::Parameter(format!(
            "num_classes must be >= 2, got {num_classes}"
        )));
    }
    if in_channels != 1 && in_channels != 3 {
        return Err(Error::Parameter(format!(
            "the MNIST network takes 1 or 3 input channels, got {in_channels}"
        )));
    }
    let layers = vec![
        LayerSpec::Conv2d {
            in_channels,
            out_channels: 32,
            kernel: 3,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::Conv2d {
            in_channels: 32,
            out_channels: 64,
            kernel: 3,
            stride: 1,
            padding: 0,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool2d {
            window: 2,
            stride: 2,
        },
        LayerSpec::Dropout { p: 0.25 },
        LayerSpec::Flatten,
        LayerSpec::Linear {
            in_features: 64 * 12 * 12,
            out_features: 128,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout { p: 0.5 },
        LayerSpec::Linear {
            in_features: 128,
            out_features: num_classes,
        },
    ];
    let taps = [
        (TAP_CONV1, 1),
        (TAP_CONV2, 3),
        (TAP_PENULTIMATE, 8),
        (TAP_LOGITS, 10),
    ];
    Model::new(layers, &taps, [in_channels, 28, 28], num_classes, seed)
}

impl<T: Scalar> Model<T> {
    /// Creates a model with He-uniform weights (`U(±√(6/fan_in))`) and zero
    /// biases drawn from `seed`.
    pub fn new(
        layers: Vec<LayerSpec>,
        taps: &[(&str, usize)],
        input_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
    ) -> Result<Self> {
        let mut tap_map = BTreeMap::new();
        for &(name, idx) in taps {
            if idx >= layers.len() {
                return Err(Error::Parameter(format!(
                    "tap `{name}` points past the last layer"
                )));
            }
            if tap_map.insert(name.to_string(), idx).is_some() {
                return Err(Error::Parameter(format!("duplicate tap name `{name}`")));
            }
        }
        let params = layers
            .iter()
            .enumerate()
            .map(|(i, layer)| {
                let shapes = layer.param_shapes();
                if shapes.is_empty() {
                    return Vec::new();
                }
                let bound = (6.0 / layer.fan_in() as f64).sqrt();
                let mut rng = rng_for(seed, &[stream::INIT, i as u64]);
                let weight_len: usize = shapes[0].iter().product();
                let weights = (0..weight_len)
                    .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
                    .collect();
                vec![
                    Tensor::new(shapes[0].clone(), weights).expect("weight shape"),
                    Tensor::zeros(shapes[1].clone()),
                ]
            })
            .collect();
        let model = Model {
            layers,
            params,
            taps: tap_map,
            input_shape,
            num_classes,
            seed,
            mode: Mode::Eval,
        };
        model.check_output_shape()?;
        Ok(model)
    }

    fn check_output_shape(&self) -> Result<()> {
        let probe = Tensor::<T>::zeros([1, self.input_shape[0], self.input_shape[1], self.input_shape[2]]);
        let logits = self.forward(&probe)?;
        if logits.shape() != [1, self.num_classes] {
            return Err(Error::dim(
                "model",
                "logits",
                format!("[1, {}]", self.num_classes),
                format!("{:?}", logits.shape()),
            ));
        }
        Ok(())
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn params(&self) -> &[Vec<Tensor<T>>] {
        &self.params
    }

    /// Mutable access to every parameter tensor, in layer order.
    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut Tensor<T>> {
        self.params.iter_mut().flatten()
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().flatten().map(Tensor::len).sum()
    }

    pub fn taps(&self) -> &BTreeMap<String, usize> {
        &self.taps
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.input_shape
    }

    pub fn in_channels(&self) -> usize {
        self.input_shape[0]
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: Mode) {
        self.mode = mode;
    }

    pub(crate) fn from_parts(
        layers: Vec<LayerSpec>,
        params: Vec<Vec<Tensor<T>>>,
        taps: BTreeMap<String, usize>,
        input_shape: [usize; 3],
        num_classes: usize,
        seed: u64,
    ) -> Self {
        Model {
            layers,
            params,
            taps,
            input_shape,
            num_classes,
            seed,
            mode: Mode::Eval,
        }
    }

    /// Records the parameters on `tape`, as differentiable leaves when
    /// `requires_grad` is set.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> BoundParams<'t, T> {
        BoundParams {
            vars: self
                .params
                .iter()
                .map(|ps| {
                    ps.iter()
                        .map(|p| tape.leaf(p.clone(), requires_grad))
                        .collect()
                })
                .collect(),
        }
    }

    fn tap_index(&self, name: &str) -> Result<usize> {
        self.taps
            .get(name)
            .copied()
            .ok_or_else(|| Error::Lookup(format!("unknown tap `{name}`")))
    }

    /// Runs the layer stack on `input`, collecting the requested taps. In
    /// train mode dropout masks are drawn from `dropout_seed`; in eval mode
    /// dropout is the identity and the seed is ignored.
    pub fn forward_tape<'t>(
        &self,
        bound: &BoundParams<'t, T>,
        input: Var<'t, T>,
        taps: &[&str],
        dropout_seed: u64,
    ) -> Result<Activations<Var<'t, T>>> {
        let wanted: Vec<(usize, &str)> = taps
            .iter()
            .map(|&t| self.tap_index(t).map(|i| (i, t)))
            .collect::<Result<_>>()?;
        let shape = input.shape();
        if shape.len() != 4 || shape[1..] != self.input_shape {
            return Err(Error::dim(
                "forward",
                "input",
                format!("[B, {:?}]", self.input_shape),
                format!("{shape:?}"),
            ));
        }
        let mut x = input;
        let mut features = BTreeMap::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let p = &bound.vars[i];
            x = match *layer {
                LayerSpec::Conv2d {
                    stride, padding, ..
                } => x.conv2d(p[0], Some(p[1]), stride, padding)?,
                LayerSpec::Relu => x.relu(),
                LayerSpec::MaxPool2d { window, stride } => x.maxpool2d(window, stride)?,
                LayerSpec::Dropout { p } => match self.mode {
                    Mode::Train => {
                        let mut rng = rng_for(dropout_seed, &[stream::DROPOUT, i as u64]);
                        x.dropout(p, &mut rng)?
                    }
                    Mode::Eval => x,
                },
                LayerSpec::Flatten => x.flatten()?,
                LayerSpec::Linear { .. } => x.matmul_t(p[0])?.add_bias(p[1])?,
            };
            for &(idx, name) in &wanted {
                if idx == i {
                    features.insert(name.to_string(), x);
                }
            }
        }
        Ok(Activations {
            logits: x,
            features,
        })
    }

    /// Forward pass on a fresh tape returning owned logits and features.
    pub fn forward_with_taps(&self, batch: &Tensor<T>, taps: &[&str]) -> Result<Activations<Tensor<T>>> {
        let tape = Tape::new();
        let bound = self.bind(&tape, false);
        let x = tape.constant(batch.clone());
        let acts = self.forward_tape(&bound, x, taps, 0)?;
        Ok(Activations {
            logits: (*acts.logits.value()).clone(),
            features: acts
                .features
                .into_iter()
                .map(|(k, v)| (k, (*v.value()).clone()))
                .collect(),
        })
    }

    pub fn forward(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward_with_taps(batch, &[])?.logits)
    }

    /// Logits for a large image tensor, evaluated in chunks of `chunk` items.
    pub fn logits_chunked(&self, images: &Tensor<T>, chunk: usize) -> Result<Tensor<T>> {
        let n = images.shape()[0];
        let mut data = Vec::with_capacity(n * self.num_classes);
        for start in (0..n).step_by(chunk.max(1)) {
            let idx: Vec<usize> = (start..(start + chunk).min(n)).collect();
            data.extend_from_slice(self.forward(&images.gather(&idx))?.data());
        }
        Tensor::new([n, self.num_classes], data)
    }

    pub fn predict(&self, images: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(self.logits_chunked(images, 256)?.argmax_rows())
    }
}
