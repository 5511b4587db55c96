//! Images in `[-1, 1]` and integer segmentation maps, with lossless PNG I/O.

use std::path::Path;

use image::imageops::FilterType;
use image::{GrayImage, RgbImage};
use thiserror::Error;

use crate::tensor::{Float, Tensor};

#[derive(Debug, Error)]
pub enum ImageError {
    #[error("{path}: {source}")]
    Codec {
        path: String,
        #[source]
        source: image::ImageError,
    },
    #[error("{0}")]
    Shape(String),
}

/// Three-channel image stored channel-major (`[3, H, W]`), values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), 3 * height * width, "image buffer size mismatch");
        Image { height, width, data }
    }

    pub fn filled(height: usize, width: usize, rgb: [f32; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(std::iter::repeat_n(c, height * width));
        }
        Image { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.get(0, y, x), self.get(1, y, x), self.get(2, y, x)]
    }

    pub fn set_pixel(&mut self, y: usize, x: usize, rgb: [f32; 3]) {
        for (c, v) in rgb.into_iter().enumerate() {
            self.set(c, y, x, v);
        }
    }

    pub fn in_range(&self) -> bool {
        self.data.iter().all(|v| (-1.0..=1.0).contains(v))
    }

    pub fn to_rgb8(&self) -> RgbImage {
        RgbImage::from_fn(self.width as u32, self.height as u32, |x, y| {
            let p = self.pixel(y as usize, x as usize);
            image::Rgb(p.map(quantize))
        })
    }

    pub fn from_rgb8(img: &RgbImage) -> Self {
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::filled(h, w, [0.0; 3]);
        for (x, y, p) in img.enumerate_pixels() {
            out.set_pixel(y as usize, x as usize, p.0.map(dequantize));
        }
        out
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        self.to_rgb8()
            .save(path)
            .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })?;
        Ok(Image::from_rgb8(&img.to_rgb8()))
    }

    /// Center crop to a square, then scale to `size x size`.
    pub fn center_crop_resize(&self, size: usize) -> Image {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let rgb = self.to_rgb8();
        let (x0, y0, side) = center_square(self.width, self.height);
        let cropped = image::imageops::crop_imm(&rgb, x0, y0, side, side).to_image();
        let resized = image::imageops::resize(&cropped, size as u32, size as u32, FilterType::Triangle);
        Image::from_rgb8(&resized)
    }

    /// Stack equally sized images into a `[N, 3, H, W]` tensor.
    pub fn batch<T: Float>(images: &[&Image]) -> Tensor<T> {
        assert!(!images.is_empty(), "empty image batch");
        let (h, w) = (images[0].height, images[0].width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for img in images {
            assert!(img.height == h && img.width == w, "images in a batch must share a size");
            data.extend(img.data.iter().map(|&v| T::of(v as f64)));
        }
        Tensor::from_vec(&[images.len(), 3, h, w], data)
    }

    /// Split a `[N, 3, H, W]` tensor back into images.
    pub fn unbatch<T: Float>(t: &Tensor<T>) -> Vec<Image> {
        let s = t.shape();
        assert!(s.len() == 4 && s[1] == 3, "expected [N, 3, H, W], got {s:?}");
        t.data()
            .chunks(3 * s[2] * s[3])
            .map(|c| Image::new(s[2], s[3], c.iter().map(|v| v.to_f64_lossy() as f32).collect()))
            .collect()
    }
}

fn center_square(w: usize, h: usize) -> (u32, u32, u32) {
    let side = w.min(h);
    (((w - side) / 2) as u32, ((h - side) / 2) as u32, side as u32)
}

pub fn quantize(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn dequantize(v: u8) -> f32 {
    v as f32 / 127.5 - 1.0
}

/// Per-pixel class labels aligned with an [`Image`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegmentationMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl SegmentationMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), height * width, "label buffer size mismatch");
        SegmentationMap { height, width, labels }
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        SegmentationMap { height, width, labels: vec![label; height * width] }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, label: u8) {
        self.labels[y * self.width + x] = label;
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    pub fn save_png(&self, path: &Path) -> Result<(), ImageError> {
        GrayImage::from_raw(self.width as u32, self.height as u32, self.labels.clone())
            .expect("buffer matches dimensions")
            .save(path)
            .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })
    }

    pub fn load_png(path: &Path) -> Result<Self, ImageError> {
        let img = image::open(path)
            .map_err(|source| ImageError::Codec { path: path.display().to_string(), source })?;
        if img.color().channel_count() != 1 {
            return Err(ImageError::Shape(format!(
                "{}: segmentation maps must be single-channel, found {:?}",
                path.display(),
                img.color()
            )));
        }
        let g = img.to_luma8();
        Ok(SegmentationMap::new(g.height() as usize, g.width() as usize, g.into_raw()))
    }

    /// Center crop to a square, then nearest-neighbour scale to `size x size`.
    pub fn center_crop_resize(&self, size: usize) -> SegmentationMap {
        if self.height == size && self.width == size {
            return self.clone();
        }
        let (x0, y0, side) = center_square(self.width, self.height);
        let (x0, y0, side) = (x0 as usize, y0 as usize, side as usize);
        let mut out = SegmentationMap::filled(size, size, 0);
        for r in 0..size {
            let sy = y0 + ((2 * r + 1) * side) / (2 * size);
            for c in 0..size {
                let sx = x0 + ((2 * c + 1) * side) / (2 * size);
                out.set(r, c, self.get(sy, sx));
            }
        }
        out
    }
}
