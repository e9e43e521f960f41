//! RGB images with an explicit value domain, PNG I/O and conversion to and
//! from network tensors.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Domain {
    /// Storage domain, `[0, 1]`.
    Unit,
    /// Network domain, `[-1, 1]`.
    Signed,
}

/// `H x W x 3` image, interleaved row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageBuffer {
    width: usize,
    height: usize,
    data: Vec<f64>,
    domain: Domain,
}

impl ImageBuffer {
    pub const CHANNELS: usize = 3;

    pub fn new(width: usize, height: usize, data: Vec<f64>, domain: Domain) -> Result<Self> {
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} values, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
            domain,
        })
    }

    pub fn filled(width: usize, height: usize, value: f64, domain: Domain) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height * 3],
            domain,
        }
    }

    /// Build from `f(y, x, c)`.
    pub fn from_fn(
        width: usize,
        height: usize,
        domain: Domain,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                for c in 0..3 {
                    data.push(f(y, x, c));
                }
            }
        }
        Self {
            width,
            height,
            data,
            domain,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn domain(&self) -> Domain {
        self.domain
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * 3 + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * 3 + c] = v;
    }

    pub fn same_size(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Convert into `domain` (a copy when the domain already matches).
    pub fn to_domain(&self, domain: Domain) -> Self {
        let data = match (self.domain, domain) {
            (Domain::Unit, Domain::Signed) => self.data.iter().map(|v| 2.0 * v - 1.0).collect(),
            (Domain::Signed, Domain::Unit) => self.data.iter().map(|v| 0.5 * (v + 1.0)).collect(),
            _ => self.data.clone(),
        };
        Self {
            data,
            domain,
            ..*self
        }
    }

    /// `[0, 1]` copy with every value clamped into range.
    pub fn to_unit_clamped(&self) -> Self {
        let mut out = self.to_domain(Domain::Unit);
        out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        out
    }

    pub fn check_range(&self) -> Result<()> {
        let (lo, hi) = match self.domain {
            Domain::Unit => (0.0, 1.0),
            Domain::Signed => (-1.0, 1.0),
        };
        match self.data.iter().find(|v| !(lo..=hi).contains(*v)) {
            Some(v) => Err(Error::Domain(format!(
                "pixel value {v} outside the {:?} domain [{lo}, {hi}]",
                self.domain
            ))),
            None => Ok(()),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Result<Self> {
        if x0 + w > self.width || y0 + h > self.height || w == 0 || h == 0 {
            return Err(Error::Shape(format!(
                "crop {w}x{h} at ({x0}, {y0}) exceeds {}x{} image",
                self.width, self.height
            )));
        }
        Ok(Self::from_fn(w, h, self.domain, |y, x, c| {
            self.get(y0 + y, x0 + x, c)
        }))
    }

    pub fn flip_horizontal(&self) -> Self {
        Self::from_fn(self.width, self.height, self.domain, |y, x, c| {
            self.get(y, self.width - 1 - x, c)
        })
    }

    /// Mirror-pad (without repeating the edge pixel) on the bottom and right
    /// to `width x height`. Padding wider than the image keeps reflecting.
    pub fn reflect_pad(&self, width: usize, height: usize) -> Result<Self> {
        if width < self.width || height < self.height {
            return Err(Error::Shape("reflect_pad cannot shrink an image".into()));
        }
        let reflect = |i: usize, n: usize| {
            if n == 1 {
                return 0;
            }
            let r = i % (2 * (n - 1));
            if r < n { r } else { 2 * (n - 1) - r }
        };
        Ok(Self::from_fn(width, height, self.domain, |y, x, c| {
            self.get(reflect(y, self.height), reflect(x, self.width), c)
        }))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })?
            .to_rgb8();
        let (w, h) = img.dimensions();
        let data = img.as_raw().iter().map(|&b| f64::from(b) / 255.0).collect();
        Self::new(w as usize, h as usize, data, Domain::Unit)
    }

    /// 8-bit RGB bytes after clamping to `[0, 1]` and rounding.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.to_unit_clamped()
            .data
            .iter()
            .map(|v| (v * 255.0).round() as u8)
            .collect()
    }

    /// Round-trip through 8-bit quantization.
    pub fn quantized(&self) -> Self {
        let data = self.to_rgb8().into_iter().map(|b| f64::from(b) / 255.0).collect();
        Self {
            data,
            domain: Domain::Unit,
            ..*self
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        if let Some(parent) = path.parent() {
            if !parent.as_os_str().is_empty() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
        }
        let buf = image::RgbImage::from_raw(self.width as u32, self.height as u32, self.to_rgb8())
            .expect("buffer size matches dimensions");
        buf.save_with_format(path, image::ImageFormat::Png)
            .map_err(|source| Error::Image {
                path: path.to_path_buf(),
                source,
            })
    }

    /// `(1, 3, H, W)` tensor of the values as stored.
    pub fn to_tensor<T: Element>(&self) -> Tensor<T> {
        let (w, h) = (self.width, self.height);
        Tensor::from_fn(&[1, 3, h, w], |i| {
            let (c, rest) = (i / (h * w), i % (h * w));
            T::from_f64_lossy(self.data[rest * 3 + c])
        })
    }

    /// Stack same-sized images into an `(N, 3, H, W)` batch.
    pub fn batch_to_tensor<T: Element>(images: &[&Self]) -> Result<Tensor<T>> {
        let first = images
            .first()
            .ok_or_else(|| Error::Shape("empty image batch".into()))?;
        let parts: Vec<Tensor<T>> = images
            .iter()
            .map(|im| {
                if im.same_size(first) {
                    Ok(im.to_tensor())
                } else {
                    Err(Error::Shape("images in a batch must share a size".into()))
                }
            })
            .collect::<Result<_>>()?;
        let (h, w) = (first.height, first.width);
        let mut data = Vec::with_capacity(images.len() * 3 * h * w);
        for p in parts {
            data.extend(p.into_data());
        }
        Tensor::new(&[images.len(), 3, h, w], data)
    }

    /// Sample `index` of an `(N, 3, H, W)` tensor, tagged with `domain`.
    pub fn from_tensor<T: Element>(t: &Tensor<T>, index: usize, domain: Domain) -> Result<Self> {
        let (n, c, h, w) = t.dims4()?;
        if c != 3 || index >= n {
            return Err(Error::Shape(format!(
                "cannot take RGB image {index} from tensor {:?}",
                t.shape()
            )));
        }
        let plane = h * w;
        let base = index * 3 * plane;
        let d = t.data();
        Ok(Self::from_fn(w, h, domain, |y, x, ch| {
            d[base + ch * plane + y * w + x].to_f64_lossy()
        }))
    }
}
