//! Training data: brightness degradation, synthetic scenes, manifest I/O.

mod io;
mod scene;

pub use io::{
    decode_png, encode_png, export_corpus, load_coco_style, load_image, png_to_model_input, rgb_to_tensor, tensor_to_rgb,
    ManifestEntry,
};
pub use scene::{
    generate_scene, Color, ObjectLayout, Region, Relation, SceneLayout, SceneObject, SceneSpec, ShapeKind, CELL,
    COLORS, GRID, RELATIONS, SHAPES, TEMPLATE_WORDS,
};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IMAGE_SIZE: usize = 64;
pub const DEFAULT_DARK_FACTOR: f64 = 0.2;
pub const MAX_CAPTIONS: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct CaptionedImage {
    /// 3×H×W, values in [0, 1].
    pub pixels: Tensor,
    pub captions: Vec<String>,
    pub meta: Option<SceneLayout>,
}

impl CaptionedImage {
    pub fn new(pixels: Tensor, captions: Vec<String>) -> Result<Self> {
        if captions.is_empty() {
            return Err(Error::Data("an image needs at least one caption".into()));
        }
        if pixels.shape().len() != 3 || pixels.shape()[0] != 3 {
            return Err(Error::dim("image", format!("expected 3×H×W pixels, got {:?}", pixels.shape())));
        }
        if pixels.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Data("pixel values must lie in [0, 1]".into()));
        }
        Ok(Self {
            pixels,
            captions,
            meta: None,
        })
    }

    /// Mean Rec. 601 luma over all pixels.
    pub fn mean_luminance(&self) -> f64 {
        mean_luminance(&self.pixels)
    }
}

pub fn mean_luminance(pixels: &Tensor) -> f64 {
    let plane = pixels.len() / 3;
    let d = pixels.data();
    let total: f64 = (0..plane)
        .map(|i| 0.299 * d[i] + 0.587 * d[plane + i] + 0.114 * d[2 * plane + i])
        .sum();
    total / plane as f64
}

fn check_factor(factor: f64) -> Result<()> {
    if !(factor > 0.0 && factor <= 1.0) {
        return Err(Error::Parameter(format!("brightness factor must be in (0, 1], got {factor}")));
    }
    Ok(())
}

/// Multiply every pixel by `factor` and clamp to [0, 1]; captions and
/// layout metadata are untouched.
pub fn degrade_brightness(img: &CaptionedImage, factor: f64) -> Result<CaptionedImage> {
    Ok(CaptionedImage {
        pixels: scale_brightness(&img.pixels, factor)?,
        ..img.clone()
    })
}

/// The pixel transform behind [`degrade_brightness`], for bare images.
pub fn scale_brightness(pixels: &Tensor, factor: f64) -> Result<Tensor> {
    check_factor(factor)?;
    let mut out = pixels.clone();
    out.data_mut().iter_mut().for_each(|v| *v = (*v * factor).clamp(0.0, 1.0));
    Ok(out)
}

/// [`degrade_brightness`] followed by additive Gaussian sensor noise of
/// standard deviation `sigma`, seeded for reproducibility.
pub fn degrade_brightness_noisy(img: &CaptionedImage, factor: f64, sigma: f64, seed: u64) -> Result<CaptionedImage> {
    check_factor(factor)?;
    let normal = Normal::new(0.0, sigma).map_err(|e| Error::Parameter(format!("noise sigma {sigma}: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = img.clone();
    out.pixels
        .data_mut()
        .iter_mut()
        .for_each(|v| *v = (*v * factor + normal.sample(&mut rng)).clamp(0.0, 1.0));
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "factor")]
pub enum Darkness {
    Bright,
    Dark(f64),
    /// Every odd-indexed scene is darkened.
    Mixed(f64),
}

impl Darkness {
    pub fn label(&self) -> &'static str {
        match self {
            Darkness::Bright => "bright",
            Darkness::Dark(_) => "dark",
            Darkness::Mixed(_) => "mixed",
        }
    }
}

/// `n` synthetic scenes from seeds `seed..seed + n` under one lighting regime.
pub fn make_corpus(n: usize, darkness: Darkness, seed: u64) -> Result<Vec<CaptionedImage>> {
    build_corpus(n, darkness, seed, None)
}

/// [`make_corpus`] with Gaussian sensor noise of standard deviation `sigma`
/// added to every darkened scene.
pub fn make_noisy_corpus(n: usize, darkness: Darkness, seed: u64, sigma: f64) -> Result<Vec<CaptionedImage>> {
    build_corpus(n, darkness, seed, Some(sigma))
}

fn build_corpus(n: usize, darkness: Darkness, seed: u64, sigma: Option<f64>) -> Result<Vec<CaptionedImage>> {
    if n == 0 {
        return Err(Error::Parameter("corpus size must be at least 1".into()));
    }
    (0..n)
        .map(|i| {
            let scene_seed = seed + i as u64;
            let scene = generate_scene(&SceneSpec::from_seed(scene_seed))?;
            let darken = |f: f64| match sigma {
                Some(s) => degrade_brightness_noisy(&scene, f, s, scene_seed),
                None => degrade_brightness(&scene, f),
            };
            match darkness {
                Darkness::Bright => Ok(scene.clone()),
                Darkness::Dark(f) => darken(f),
                Darkness::Mixed(f) if i % 2 == 1 => darken(f),
                Darkness::Mixed(f) => check_factor(f).map(|_| scene.clone()),
            }
        })
        .collect()
}
