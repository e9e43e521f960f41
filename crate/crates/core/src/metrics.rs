//! PSNR and SSIM on `[0, 1]` RGB images.
//!
//! Inputs are converted to the `[0, 1]` domain and clamped before either
//! metric is evaluated, so network outputs can be passed directly.
//!
//! SSIM is the standard single-scale form: an 11x11 Gaussian window with
//! sigma 1.5, `K1 = 0.01`, `K2 = 0.03`, dynamic range 1, evaluated on the
//! valid (unpadded) window positions of each channel, and averaged over
//! positions and then channels.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::ImageBuffer;

/// PSNR reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;

pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;

fn prepared(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<(ImageBuffer, ImageBuffer)> {
    if !pred.same_size(gt) {
        return Err(Error::Shape(format!(
            "metric inputs differ in size: {}x{} vs {}x{}",
            pred.width(),
            pred.height(),
            gt.width(),
            gt.height()
        )));
    }
    Ok((pred.to_unit_clamped(), gt.to_unit_clamped()))
}

pub fn mse(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    let (p, g) = prepared(pred, gt)?;
    let sum: f64 = p.data().iter().zip(g.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sum / p.data().len() as f64)
}

/// `10 log10(1 / MSE)`, capped at [`PSNR_CAP_DB`].
pub fn psnr(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    let e = mse(pred, gt)?;
    Ok(if e == 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / e).log10()).min(PSNR_CAP_DB)
    })
}

fn gaussian_window() -> [f64; SSIM_WINDOW] {
    let mut w = [0.0; SSIM_WINDOW];
    let half = (SSIM_WINDOW / 2) as f64;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - half;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
    }
    let s: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= s);
    w
}

/// Separable valid-mode filtering of an `h x w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, g: &[f64; SSIM_WINDOW]) -> Vec<f64> {
    let (ho, wo) = (h - SSIM_WINDOW + 1, w - SSIM_WINDOW + 1);
    let mut rows = vec![0.0; h * wo];
    for y in 0..h {
        for x in 0..wo {
            rows[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * src[y * w + x + k]).sum();
        }
    }
    let mut out = vec![0.0; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = (0..SSIM_WINDOW).map(|k| g[k] * rows[(y + k) * wo + x]).sum();
        }
    }
    out
}

pub fn ssim(pred: &ImageBuffer, gt: &ImageBuffer) -> Result<f64> {
    let (p, g) = prepared(pred, gt)?;
    let (h, w) = (p.height(), p.width());
    if h.min(w) < SSIM_WINDOW {
        return Err(Error::Shape(format!(
            "SSIM needs images of at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {w}x{h}"
        )));
    }
    let win = gaussian_window();
    let channel = |img: &ImageBuffer, c: usize| -> Vec<f64> {
        img.data().iter().skip(c).step_by(3).copied().collect()
    };
    let mut total = 0.0;
    for c in 0..3 {
        let (x, y) = (channel(&p, c), channel(&g, c));
        let xx: Vec<f64> = x.iter().map(|v| v * v).collect();
        let yy: Vec<f64> = y.iter().map(|v| v * v).collect();
        let xy: Vec<f64> = x.iter().zip(&y).map(|(a, b)| a * b).collect();
        let [mx, my, sxx, syy, sxy] = [&x, &y, &xx, &yy, &xy].map(|v| filter_valid(v, h, w, &win));
        let mut acc = 0.0;
        for i in 0..mx.len() {
            let (ux, uy) = (mx[i], my[i]);
            let vx = sxx[i] - ux * ux;
            let vy = syy[i] - uy * uy;
            let cov = sxy[i] - ux * uy;
            acc += ((2.0 * ux * uy + SSIM_C1) * (2.0 * cov + SSIM_C2))
                / ((ux * ux + uy * uy + SSIM_C1) * (vx + vy + SSIM_C2));
        }
        total += acc / mx.len() as f64;
    }
    Ok(total / 3.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub name: String,
    pub psnr_db: f64,
    pub ssim: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_psnr_db: f64,
    pub mean_ssim: f64,
    pub count: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub per_image: Vec<ImageMetrics>,
}

#[derive(Serialize)]
#[serde(tag = "record", rename_all = "snake_case")]
enum ReportLine<'a> {
    Image(&'a ImageMetrics),
    Aggregate(&'a Aggregate),
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, pred: &ImageBuffer, gt: &ImageBuffer) -> Result<()> {
        self.per_image.push(ImageMetrics {
            name: name.into(),
            psnr_db: psnr(pred, gt)?,
            ssim: ssim(pred, gt)?,
        });
        Ok(())
    }

    pub fn aggregate(&self) -> Aggregate {
        let n = self.per_image.len();
        let mean = |f: fn(&ImageMetrics) -> f64| {
            if n == 0 {
                0.0
            } else {
                self.per_image.iter().map(f).sum::<f64>() / n as f64
            }
        };
        Aggregate {
            mean_psnr_db: mean(|m| m.psnr_db),
            mean_ssim: mean(|m| m.ssim),
            count: n,
        }
    }

    pub fn to_table(&self) -> String {
        let width = self
            .per_image
            .iter()
            .map(|m| m.name.len())
            .chain(["image".len(), "mean".len()])
            .max()
            .unwrap_or(5);
        let mut s = format!("{:<width$}  {:>9}  {:>7}\n", "image", "PSNR(dB)", "SSIM");
        for m in &self.per_image {
            s += &format!("{:<width$}  {:>9.3}  {:>7.4}\n", m.name, m.psnr_db, m.ssim);
        }
        let a = self.aggregate();
        s += &format!("{:<width$}  {:>9.3}  {:>7.4}\n", "mean", a.mean_psnr_db, a.mean_ssim);
        s
    }

    /// One `{"record":"image",...}` line per image, then the aggregate.
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = Vec::new();
        for m in &self.per_image {
            serde_json::to_writer(&mut out, &ReportLine::Image(m))?;
            out.push(b'\n');
        }
        serde_json::to_writer(&mut out, &ReportLine::Aggregate(&self.aggregate()))?;
        out.push(b'\n');
        Ok(String::from_utf8(out).expect("JSON is UTF-8"))
    }

    pub fn write(&self, table_path: &Path, jsonl_path: &Path) -> Result<()> {
        for (path, text) in [(table_path, self.to_table()), (jsonl_path, self.to_jsonl()?)] {
            let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
            f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}
