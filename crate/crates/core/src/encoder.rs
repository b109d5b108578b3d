//! Convolutional encoder: 3×64×64 image → 8×8 grid of annotation vectors.
//!
//! Three stages of 3×3 convolution (padding 1), ReLU and 2×2 max-pooling
//! halve the spatial size each time, so a 64×64 input ends as an 8×8 map
//! with one D-dimensional feature per cell. Row `i` of the annotation
//! matrix belongs to cell `(i / 8, i % 8)`.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::IMAGE_SIZE;
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

pub const GRID_SIDE: usize = 8;
pub const NUM_ANNOTATIONS: usize = GRID_SIDE * GRID_SIDE;
pub const DEFAULT_CHANNELS: [usize; 3] = [16, 32, 64];
const KERNEL: usize = 3;

#[derive(Debug, Clone, PartialEq)]
pub struct ConvStage<T = Tensor> {
    /// out × in × 3 × 3
    pub kernel: T,
    pub bias: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams<T = Tensor> {
    pub stages: Vec<ConvStage<T>>,
}

/// Encoder output: L = 64 annotation vectors of dimension D.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationGrid {
    pub features: Tensor,
    pub grid_side: usize,
}

impl EncoderParams {
    /// Glorot-uniform kernels, zero biases. `channels` lists the output
    /// channels of each stage; the image supplies 3 input channels.
    pub fn init<R: Rng>(channels: &[usize], rng: &mut R) -> Self {
        let mut c_in = 3;
        let stages = channels
            .iter()
            .map(|&c_out| {
                let fan_in = c_in * KERNEL * KERNEL;
                let fan_out = c_out * KERNEL * KERNEL;
                let stage = ConvStage {
                    kernel: Tensor::glorot_uniform(&[c_out, c_in, KERNEL, KERNEL], fan_in, fan_out, rng),
                    bias: Tensor::zeros(&[c_out]),
                };
                c_in = c_out;
                stage
            })
            .collect();
        Self { stages }
    }

    pub fn feature_dim(&self) -> usize {
        self.stages.last().map_or(3, |s| s.kernel.shape()[0])
    }
}

/// Default 16/32/64-channel encoder from a seed.
pub fn init_encoder(seed: u64) -> EncoderParams {
    EncoderParams::init(&DEFAULT_CHANNELS, &mut ChaCha8Rng::seed_from_u64(seed))
}

impl<T> EncoderParams<T> {
    pub fn map<U>(&self, mut f: impl FnMut(&str, &T) -> U) -> EncoderParams<U> {
        EncoderParams {
            stages: self
                .stages
                .iter()
                .enumerate()
                .map(|(i, s)| ConvStage {
                    kernel: f(&format!("encoder.conv{}.kernel", i + 1), &s.kernel),
                    bias: f(&format!("encoder.conv{}.bias", i + 1), &s.bias),
                })
                .collect(),
        }
    }

    pub fn values_mut(&mut self) -> Vec<&mut T> {
        self.stages
            .iter_mut()
            .flat_map(|s| [&mut s.kernel, &mut s.bias])
            .collect()
    }

    pub fn for_each_mut(&mut self, mut f: impl FnMut(&str, &mut T)) {
        for (i, s) in self.stages.iter_mut().enumerate() {
            f(&format!("encoder.conv{}.kernel", i + 1), &mut s.kernel);
            f(&format!("encoder.conv{}.bias", i + 1), &mut s.bias);
        }
    }
}

/// Annotation matrix (64 × D) for a 3×64×64 image already on the tape.
pub fn encode_on(tape: &mut Tape, params: &EncoderParams<Var>, image: Var) -> Result<Var> {
    let shape = tape.shape(image);
    if shape != [3, IMAGE_SIZE, IMAGE_SIZE] {
        return Err(Error::dim(
            "encode",
            format!("expected a 3×{IMAGE_SIZE}×{IMAGE_SIZE} image, got {shape:?}"),
        ));
    }
    let mut x = image;
    for stage in &params.stages {
        x = tape.conv2d(x, stage.kernel, Some(stage.bias), 1, 1)?;
        x = tape.relu(x);
        x = tape.max_pool2d(x, 2)?;
    }
    let (d, h, w) = match tape.shape(x) {
        [d, h, w] => (*d, *h, *w),
        s => unreachable!("conv stack yields C×H×W, got {s:?}"),
    };
    if h != GRID_SIDE || w != GRID_SIDE {
        return Err(Error::dim(
            "encode",
            format!("encoder produced a {h}×{w} grid, expected {GRID_SIDE}×{GRID_SIDE}"),
        ));
    }
    let flat = tape.reshape(x, &[d, h * w])?;
    tape.transpose(flat)
}

/// Forward-only encoding outside of any training graph.
pub fn encode(params: &EncoderParams, image: &Tensor) -> Result<AnnotationGrid> {
    let mut tape = Tape::new();
    let bound = params.map(|_, t| tape.constant(t.clone()));
    let img = tape.constant(image.clone());
    let out = encode_on(&mut tape, &bound, img)?;
    Ok(AnnotationGrid {
        features: tape.value(out).clone(),
        grid_side: GRID_SIDE,
    })
}
