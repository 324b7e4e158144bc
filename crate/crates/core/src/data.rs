//! Labeled image data. The training-facing type intentionally exposes only
//! images and labels — pose metadata written by the synthetic renderer lives
//! in dataset manifests for evaluation and never enters this interface.

use std::path::Path;

use image::{imageops, ImageReader, RgbImage};
use ndarray::{Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Decode a pixel image into `[3, H, W]` in [-1, 1].
pub fn image_to_tensor(img: &RgbImage) -> Array3<f64> {
    let (w, h) = img.dimensions();
    let mut t = Array3::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            t[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0 * 2.0 - 1.0;
        }
    }
    t
}

/// Quantize `[3, H, W]` in [-1, 1] back to an 8-bit image (clamped).
pub fn tensor_to_image(t: &Array3<f64>) -> RgbImage {
    let (_, h, w) = t.dim();
    let mut img = RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                let v = (t[[c, y, x]].clamp(-1.0, 1.0) + 1.0) / 2.0;
                (v * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img
}

/// The only data surface training sees: images and 1-based labels.
#[derive(Clone, Debug, Default)]
pub struct LabeledImages {
    images: Vec<Array3<f64>>,
    labels: Vec<usize>,
    n_classes: usize,
}

impl LabeledImages {
    pub fn new(n_classes: usize) -> Self {
        Self {
            images: Vec::new(),
            labels: Vec::new(),
            n_classes,
        }
    }

    pub fn push(&mut self, image: Array3<f64>, label: usize) -> Result<()> {
        if label == 0 || label > self.n_classes {
            return Err(Error::Label {
                label,
                n_classes: self.n_classes,
            });
        }
        if let Some(first) = self.images.first() {
            if first.dim() != image.dim() {
                return Err(Error::shape(format!(
                    "image {:?} does not match dataset {:?}",
                    image.dim(),
                    first.dim()
                )));
            }
        }
        self.images.push(image);
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn resolution(&self) -> Option<(usize, usize)> {
        self.images.first().map(|t| (t.dim().1, t.dim().2))
    }

    pub fn image(&self, i: usize) -> &Array3<f64> {
        &self.images[i]
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn label_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.n_classes];
        for &l in &self.labels {
            counts[l - 1] += 1;
        }
        counts
    }

    /// Uniform batch with replacement: `([B,3,H,W], labels)`.
    pub fn sample_batch(
        &self,
        rng: &mut ChaCha8Rng,
        batch: usize,
    ) -> Result<(Array4<f64>, Vec<usize>)> {
        if self.is_empty() {
            return Err(Error::config("dataset is empty"));
        }
        let (h, w) = self.resolution().expect("non-empty");
        let mut out = Array4::zeros((batch, 3, h, w));
        let mut labels = Vec::with_capacity(batch);
        for b in 0..batch {
            let i = rng.random_range(0..self.len());
            out.index_axis_mut(ndarray::Axis(0), b)
                .assign(&self.images[i]);
            labels.push(self.labels[i]);
        }
        Ok((out, labels))
    }
}

/// Load `root/<class_name>/*.png` (labels from sorted subfolder names),
/// center-crop to square, bilinearly resize, map to [-1, 1]. Undecodable
/// files are skipped and counted.
pub fn load_image_folder(
    root: &Path,
    resolution: usize,
) -> Result<(LabeledImages, Vec<String>, usize)> {
    if !root.is_dir() {
        return Err(Error::data(format!("{} is not a directory", root.display())));
    }
    let mut class_dirs: Vec<(String, std::path::PathBuf)> = std::fs::read_dir(root)?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    class_dirs.sort();
    if class_dirs.is_empty() {
        return Err(Error::data(format!(
            "{} has no class subfolders",
            root.display()
        )));
    }
    let mut data = LabeledImages::new(class_dirs.len());
    let mut class_names = Vec::new();
    let mut skipped = 0usize;
    for (label0, (name, dir)) in class_dirs.into_iter().enumerate() {
        class_names.push(name);
        let mut files: Vec<std::path::PathBuf> = std::fs::read_dir(&dir)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.is_file() && p.extension().is_some_and(|e| e != "json"))
            .collect();
        files.sort();
        for f in files {
            let img = match ImageReader::open(&f).and_then(|r| {
                r.decode()
                    .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
            }) {
                Ok(img) => img.to_rgb8(),
                Err(_) => {
                    skipped += 1;
                    continue;
                }
            };
            let prepared = crop_and_resize(&img, resolution);
            data.push(image_to_tensor(&prepared), label0 + 1)?;
        }
    }
    if data.is_empty() {
        return Err(Error::data(format!(
            "no decodable images under {}",
            root.display()
        )));
    }
    Ok((data, class_names, skipped))
}

/// Center-crop to a square of the short side, then bilinear resize.
pub fn crop_and_resize(img: &RgbImage, resolution: usize) -> RgbImage {
    let (w, h) = img.dimensions();
    let side = w.min(h);
    let x0 = (w - side) / 2;
    let y0 = (h - side) / 2;
    let cropped = imageops::crop_imm(img, x0, y0, side, side).to_image();
    if side == resolution as u32 {
        cropped
    } else {
        imageops::resize(
            &cropped,
            resolution as u32,
            resolution as u32,
            imageops::FilterType::Triangle,
        )
    }
}
