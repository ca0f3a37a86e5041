//! Images, preprocessing, manifests and the synthetic morph benchmark.

mod manifest;
pub mod synth;

pub use manifest::{ManifestEntry, SampleManifest};

use std::path::Path;

use image::{GrayImage, RgbImage};
use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::label::Label;
use crate::tensor::Tensor;

/// Channel-major image with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Image {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || height == 0 || width == 0 {
            return Err(Error::format(
                "image",
                format!("degenerate size {channels}x{height}x{width}"),
            ));
        }
        if !matches!(channels, 1 | 3) {
            return Err(Error::format("image", format!("{channels} channels unsupported")));
        }
        if data.len() != channels * height * width {
            return Err(Error::format("image", "pixel count does not match size"));
        }
        Ok(Image {
            channels,
            height,
            width,
            data,
        })
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.height + y) * self.width + x]
    }

    /// 8-bit PNG; one channel is stored as grayscale.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        let (w, h) = (self.width as u32, self.height as u32);
        let result = if self.channels == 1 {
            GrayImage::from_fn(w, h, |x, y| image::Luma([q(self.at(0, y as usize, x as usize))]))
                .save(path)
        } else {
            RgbImage::from_fn(w, h, |x, y| {
                let (x, y) = (x as usize, y as usize);
                image::Rgb([q(self.at(0, y, x)), q(self.at(1, y, x)), q(self.at(2, y, x))])
            })
            .save(path)
        };
        result.map_err(|e| Error::format(path.display().to_string(), e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let img = image::open(path).map_err(|e| match e {
            image::ImageError::IoError(io) => Error::io(path, io),
            other => Error::format(path.display().to_string(), other.to_string()),
        })?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let gray = matches!(
            img.color(),
            image::ColorType::L8 | image::ColorType::L16 | image::ColorType::La8 | image::ColorType::La16
        );
        if gray {
            let g = img.to_luma8();
            let data = g.pixels().map(|p| p.0[0] as f64 / 255.0).collect();
            Image::new(1, h, w, data)
        } else {
            let rgb = img.to_rgb8();
            let mut data = vec![0.0; 3 * h * w];
            for (x, y, p) in rgb.enumerate_pixels() {
                for c in 0..3 {
                    data[(c * h + y as usize) * w + x as usize] = p.0[c] as f64 / 255.0;
                }
            }
            Image::new(3, h, w, data)
        }
    }

    /// Same image after an 8-bit round trip.
    pub fn quantized(&self) -> Image {
        Image {
            data: self
                .data
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
                .collect(),
            ..self.clone()
        }
    }
}

/// Center-crop to a square, bilinear resize to `resolution`, convert to
/// `channels` and map `[0, 1]` to `[-1, 1]`. Returns a `C×R×R` tensor.
pub fn preprocess(image: &Image, resolution: usize, channels: usize) -> Result<Tensor> {
    if resolution == 0 {
        return Err(Error::format("resolution", "must be positive"));
    }
    let side = image.height.min(image.width);
    let (oy, ox) = ((image.height - side) / 2, (image.width - side) / 2);
    let scale = side as f64 / resolution as f64;
    let src_coord = |i: usize| {
        let s = (i as f64 + 0.5) * scale - 0.5;
        let s = s.clamp(0.0, (side - 1) as f64);
        let lo = s.floor() as usize;
        let hi = (lo + 1).min(side - 1);
        (lo, hi, s - lo as f64)
    };
    let cols: Vec<_> = (0..resolution).map(src_coord).collect();
    let mut resized = vec![0.0; image.channels * resolution * resolution];
    for c in 0..image.channels {
        for y in 0..resolution {
            let (y0, y1, fy) = src_coord(y);
            for (x, &(x0, x1, fx)) in cols.iter().enumerate() {
                let p = |yy: usize, xx: usize| image.at(c, oy + yy, ox + xx);
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bottom = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                resized[(c * resolution + y) * resolution + x] = top * (1.0 - fy) + bottom * fy;
            }
        }
    }
    let plane = resolution * resolution;
    let data: Vec<f64> = match (image.channels, channels) {
        (a, b) if a == b => resized,
        (1, 3) => resized.repeat(3),
        (3, 1) => (0..plane)
            .map(|i| (resized[i] + resized[plane + i] + resized[2 * plane + i]) / 3.0)
            .collect(),
        (a, b) => {
            return Err(Error::format(
                "channels",
                format!("cannot convert {a} channels to {b}"),
            ))
        }
    };
    Tensor::new(
        vec![channels, resolution, resolution],
        data.into_iter().map(|v| v * 2.0 - 1.0).collect(),
    )
}

/// A preprocessed, labelled model input.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub image: Tensor,
    pub label: Label,
    pub subset: String,
}

/// Loads and preprocesses every manifest entry, in manifest order.
pub fn load_examples(manifest: &SampleManifest, resolution: usize, channels: usize) -> Result<Vec<Example>> {
    manifest
        .entries
        .par_iter()
        .map(|e| {
            Ok(Example {
                image: preprocess(&Image::load(&manifest.resolve(e))?, resolution, channels)?,
                label: e.label,
                subset: e.subset.clone(),
            })
        })
        .collect()
}

/// Mirrors the columns of a `C×H×W` tensor.
pub fn flip_horizontal(image: &Tensor) -> Tensor {
    let w = image.cols();
    let mut out = image.clone();
    for (dst, src) in out.data_mut().chunks_mut(w).zip(image.data().chunks(w)) {
        for (d, s) in dst.iter_mut().zip(src.iter().rev()) {
            *d = *s;
        }
    }
    out
}

/// Flips with probability `p`.
pub fn augment_flip<R: Rng + ?Sized>(image: &Tensor, rng: &mut R, p: f64) -> Tensor {
    if rng.random::<f64>() < p {
        flip_horizontal(image)
    } else {
        image.clone()
    }
}
