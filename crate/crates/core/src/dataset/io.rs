use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use image::imageops::FilterType;
use image::{DynamicImage, ImageFormat, Rgb32FImage, RgbImage};
use serde::{Deserialize, Serialize};

use super::{CaptionedImage, IMAGE_SIZE, MAX_CAPTIONS};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One line of a JSON-lines manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image: String,
    pub captions: Vec<String>,
}

/// 8-bit RGB → 3×H×W tensor in [0, 1].
pub fn rgb_to_tensor(img: &RgbImage) -> Tensor {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let plane = w * h;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in img.enumerate_pixels() {
        let i = y as usize * w + x as usize;
        for c in 0..3 {
            data[c * plane + i] = px[c] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data).expect("consistent image shape")
}

/// 3×H×W tensor → 8-bit RGB, rounding to the nearest level.
pub fn tensor_to_rgb(pixels: &Tensor) -> RgbImage {
    let (h, w) = (pixels.shape()[1], pixels.shape()[2]);
    let plane = h * w;
    let d = pixels.data();
    RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let i = y as usize * w + x as usize;
        image::Rgb([0, 1, 2].map(|c| (d[c * plane + i].clamp(0.0, 1.0) * 255.0).round() as u8))
    })
}

fn to_model_input(img: DynamicImage) -> Tensor {
    if img.width() as usize == IMAGE_SIZE && img.height() as usize == IMAGE_SIZE {
        return rgb_to_tensor(&img.to_rgb8());
    }
    let src: Rgb32FImage = img.to_rgb32f();
    let resized = image::imageops::resize(&src, IMAGE_SIZE as u32, IMAGE_SIZE as u32, FilterType::Triangle);
    let plane = IMAGE_SIZE * IMAGE_SIZE;
    let mut data = vec![0.0; 3 * plane];
    for (x, y, px) in resized.enumerate_pixels() {
        let i = y as usize * IMAGE_SIZE + x as usize;
        for c in 0..3 {
            data[c * plane + i] = (px[c] as f64).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![3, IMAGE_SIZE, IMAGE_SIZE], data).expect("fixed shape")
}

/// Read an image file and bring it to the 3×64×64 model input (bilinear
/// resize when needed).
pub fn load_image(path: &Path) -> Result<Tensor> {
    let img = image::open(path).map_err(|source| match source {
        image::ImageError::IoError(e) => Error::io(path, e),
        source => Error::Image {
            path: path.to_path_buf(),
            source,
        },
    })?;
    Ok(to_model_input(img))
}

/// Decode PNG bytes at their native size.
pub fn decode_png(bytes: &[u8]) -> Result<RgbImage> {
    image::load_from_memory_with_format(bytes, ImageFormat::Png)
        .map(|img| img.to_rgb8())
        .map_err(|source| Error::Image {
            path: "<memory>".into(),
            source,
        })
}

pub fn encode_png(img: &RgbImage) -> Vec<u8> {
    let mut buf = std::io::Cursor::new(Vec::new());
    img.write_to(&mut buf, ImageFormat::Png).expect("PNG encoding to memory");
    buf.into_inner()
}

/// Decode PNG bytes into a 3×64×64 model input.
pub fn png_to_model_input(bytes: &[u8]) -> Result<Tensor> {
    let img = decode_png(bytes)?;
    Ok(to_model_input(DynamicImage::ImageRgb8(img)))
}

/// Load a JSON-lines manifest of `{"image": <relative path>, "captions": [...]}`
/// records. Paths resolve against the manifest's directory; at most five
/// captions per image are kept.
pub fn load_coco_style(manifest_path: &Path) -> Result<Vec<CaptionedImage>> {
    let file = fs::File::open(manifest_path).map_err(|e| Error::io(manifest_path, e))?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let mut items = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line_no = i + 1;
        let line = line.map_err(|e| Error::io(manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{}: line {line_no}: malformed record: {e}", manifest_path.display())))?;
        if entry.captions.is_empty() {
            return Err(Error::Data(format!(
                "{}: line {line_no}: captions list is empty",
                manifest_path.display()
            )));
        }
        let image_path = base.join(&entry.image);
        if !image_path.is_file() {
            return Err(Error::Data(format!(
                "{}: line {line_no}: image file {} does not exist",
                manifest_path.display(),
                image_path.display()
            )));
        }
        let pixels = load_image(&image_path)?;
        let captions = entry.captions.into_iter().take(MAX_CAPTIONS).collect();
        items.push(CaptionedImage::new(pixels, captions)?);
    }
    Ok(items)
}

/// Write each item as `NNNNN.png` plus a `manifest.jsonl` referencing them.
pub fn export_corpus(items: &[CaptionedImage], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest_path = dir.join("manifest.jsonl");
    let mut manifest = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    for (i, item) in items.iter().enumerate() {
        let name = format!("{i:05}.png");
        let path = dir.join(&name);
        fs::write(&path, encode_png(&tensor_to_rgb(&item.pixels))).map_err(|e| Error::io(&path, e))?;
        let entry = ManifestEntry {
            image: name,
            captions: item.captions.clone(),
        };
        let line = serde_json::to_string(&entry).expect("manifest entry serializes");
        writeln!(manifest, "{line}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate_scene, SceneSpec};

    fn write_png(path: &Path, size: u32) {
        let img = RgbImage::from_fn(size, size, |x, y| image::Rgb([(x * 2) as u8, (y * 2) as u8, 128]));
        img.save(path).unwrap();
    }

    #[test]
    fn loads_manifest_and_resizes() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 64);
        write_png(&dir.path().join("big.png"), 128);
        let manifest = dir.path().join("m.jsonl");
        fs::write(
            &manifest,
            "{\"image\":\"a.png\",\"captions\":[\"a dog\"]}\n\n{\"image\":\"big.png\",\"captions\":[\"1\",\"2\",\"3\",\"4\",\"5\",\"6\"]}\n",
        )
        .unwrap();
        let items = load_coco_style(&manifest).unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].captions, vec!["a dog".to_string()]);
        assert_eq!(items[1].pixels.shape(), &[3, 64, 64]);
        assert_eq!(items[1].captions.len(), 5);
        assert!(items[1].pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn manifest_errors_name_line_and_path() {
        let dir = tempfile::tempdir().unwrap();
        write_png(&dir.path().join("a.png"), 64);
        let manifest = dir.path().join("m.jsonl");

        fs::write(&manifest, "{\"image\":\"a.png\",\"captions\":[]}\n").unwrap();
        let msg = load_coco_style(&manifest).unwrap_err().to_string();
        assert!(msg.contains("line 1") && msg.contains("empty"), "{msg}");

        fs::write(&manifest, "{\"image\":\"a.png\",\"captions\":[\"x\"]}\nnot json\n").unwrap();
        let msg = load_coco_style(&manifest).unwrap_err().to_string();
        assert!(msg.contains("line 2"), "{msg}");

        fs::write(&manifest, "{\"image\":\"missing.png\",\"captions\":[\"x\"]}\n").unwrap();
        let msg = load_coco_style(&manifest).unwrap_err().to_string();
        assert!(msg.contains("missing.png"), "{msg}");
    }

    #[test]
    fn export_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let items: Vec<_> = (0..3).map(|s| generate_scene(&SceneSpec::from_seed(s)).unwrap()).collect();
        export_corpus(&items, dir.path()).unwrap();
        let back = load_coco_style(&dir.path().join("manifest.jsonl")).unwrap();
        assert_eq!(back.len(), 3);
        for (a, b) in items.iter().zip(&back) {
            assert_eq!(a.captions, b.captions);
            assert!(a.pixels.max_abs_diff(&b.pixels) <= 0.5 / 255.0 + 1e-12);
        }
    }

    #[test]
    fn png_round_trip_is_lossless_for_8bit_content() {
        let img = RgbImage::from_fn(5, 3, |x, y| image::Rgb([x as u8 * 40, y as u8 * 70, 9]));
        let t = rgb_to_tensor(&img);
        assert_eq!(tensor_to_rgb(&t), img);
        assert_eq!(decode_png(&encode_png(&img)).unwrap(), img);
    }
}
