//! Synthetic haze from the atmospheric scattering model
//! `I = J t + A (1 - t)`, `t = exp(-beta d)`, with procedural depth maps,
//! the analytic inverse used as a test oracle, and the paired-dataset
//! builder.
//!
//! # Manifest format
//!
//! `manifest.jsonl` holds one JSON object per line, ordered by `index`:
//!
//! | key           | meaning                                              |
//! |---------------|------------------------------------------------------|
//! | `index`       | sample number, also the file stem (`00042.png`)      |
//! | `clean_path`  | clean crop, relative to the dataset directory        |
//! | `hazy_path`   | hazy crop, relative to the dataset directory         |
//! | `depth_kind`  | `ramp`, `radial` or `smooth-noise`                   |
//! | `beta_s`      | scattering coefficient                               |
//! | `airlight`    | global airlight `A`                                  |
//! | `seed`        | per-sample seed; regenerates the depth map           |
//! | `crop_x/y/w/h`| crop window inside the source image                  |
//! | `source_path` | source clean image the crop was taken from           |

use std::fmt;
use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::{Domain, ImageBuffer};

/// Transmission below which `invert_haze` refuses to divide.
pub const DEFAULT_T_MIN: f64 = 0.05;

/// Single-channel `H x W` field (depth or transmission), row-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

pub type DepthMap = Plane;

impl Plane {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::Shape(format!(
                "{width}x{height} plane needs {} values, got {}",
                width * height,
                data.len()
            )));
        }
        Ok(Self { width, height, data })
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Self {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(y, x));
            }
        }
        Self { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    /// Affinely rescale to `[0, 1]`; a constant plane becomes all zeros.
    fn normalized(mut self) -> Self {
        let (lo, hi) = (self.min(), self.max());
        let span = hi - lo;
        for v in &mut self.data {
            *v = if span > 0.0 { (*v - lo) / span } else { 0.0 };
        }
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DepthKind {
    Ramp,
    Radial,
    SmoothNoise,
}

impl DepthKind {
    pub const ALL: [DepthKind; 3] = [DepthKind::Ramp, DepthKind::Radial, DepthKind::SmoothNoise];

    pub fn as_str(self) -> &'static str {
        match self {
            DepthKind::Ramp => "ramp",
            DepthKind::Radial => "radial",
            DepthKind::SmoothNoise => "smooth-noise",
        }
    }
}

impl fmt::Display for DepthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DepthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        DepthKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown depth kind `{s}` (expected ramp, radial or smooth-noise)"
                ))
            })
    }
}

/// Procedural relative depth in `[0, 1]`, deterministic in `seed`.
pub fn make_depth(kind: DepthKind, height: usize, width: usize, seed: u64) -> Result<DepthMap> {
    if height == 0 || width == 0 {
        return Err(Error::Shape(format!("depth map needs H, W >= 1, got {height}x{width}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(match kind {
        DepthKind::Ramp => {
            // Axis-aligned: 0 on one edge, 1 on the opposite one.
            let dir: u8 = rng.gen_range(0..4);
            let (hm, wm) = ((height - 1).max(1) as f64, (width - 1).max(1) as f64);
            Plane::from_fn(width, height, |y, x| match dir {
                0 => x as f64 / wm,
                1 => 1.0 - x as f64 / wm,
                2 => y as f64 / hm,
                _ => 1.0 - y as f64 / hm,
            })
        }
        DepthKind::Radial => {
            let cy = rng.gen_range(0.0..=(height - 1) as f64);
            let cx = rng.gen_range(0.0..=(width - 1) as f64);
            radial_depth(height, width, cy, cx)
        }
        DepthKind::SmoothNoise => smooth_noise(height, width, &mut rng),
    })
}

/// Distance from `(cy, cx)` divided by the distance to the farthest corner.
pub fn radial_depth(height: usize, width: usize, cy: f64, cx: f64) -> DepthMap {
    let corners = [
        (0.0, 0.0),
        (0.0, (width - 1) as f64),
        ((height - 1) as f64, 0.0),
        ((height - 1) as f64, (width - 1) as f64),
    ];
    let far = corners
        .iter()
        .map(|&(y, x): &(f64, f64)| (y - cy).hypot(x - cx))
        .fold(0.0, f64::max);
    Plane::from_fn(width, height, |y, x| {
        if far > 0.0 {
            (y as f64 - cy).hypot(x as f64 - cx) / far
        } else {
            0.0
        }
    })
}

/// Value noise on a coarse lattice with smoothstep interpolation.
fn smooth_noise(height: usize, width: usize, rng: &mut ChaCha8Rng) -> DepthMap {
    const CELLS: usize = 3;
    let lattice: Vec<f64> = (0..(CELLS + 1) * (CELLS + 1)).map(|_| rng.gen()).collect();
    let node = |i: usize, j: usize| lattice[i * (CELLS + 1) + j];
    let smooth = |t: f64| t * t * (3.0 - 2.0 * t);
    let coord = |v: usize, n: usize| {
        let u = if n > 1 { v as f64 / (n - 1) as f64 } else { 0.0 } * CELLS as f64;
        let i = (u.floor() as usize).min(CELLS - 1);
        (i, smooth(u - i as f64))
    };
    Plane::from_fn(width, height, |y, x| {
        let (i, ty) = coord(y, height);
        let (j, tx) = coord(x, width);
        let top = node(i, j) * (1.0 - tx) + node(i, j + 1) * tx;
        let bottom = node(i + 1, j) * (1.0 - tx) + node(i + 1, j + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    })
    .normalized()
}

pub fn transmission_from_depth(depth: &DepthMap, beta_s: f64) -> Result<Plane> {
    if !(beta_s > 0.0 && beta_s.is_finite()) {
        return Err(Error::Domain(format!("beta_s must be > 0, got {beta_s}")));
    }
    if let Some(d) = depth.data.iter().find(|d| d.is_nan() || **d < 0.0) {
        return Err(Error::Domain(format!("depth must be >= 0, got {d}")));
    }
    Ok(Plane {
        data: depth.data.iter().map(|d| (-beta_s * d).exp()).collect(),
        ..*depth
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct HazeSample {
    pub clean: ImageBuffer,
    pub hazy: ImageBuffer,
    pub depth: DepthMap,
    pub beta_s: f64,
    pub airlight: f64,
}

fn check_airlight(a: f64) -> Result<()> {
    if a > 0.0 && a <= 1.0 {
        Ok(())
    } else {
        Err(Error::Domain(format!("airlight must lie in (0, 1], got {a}")))
    }
}

fn check_unit_image(img: &ImageBuffer, what: &str) -> Result<()> {
    if img.domain() != Domain::Unit {
        return Err(Error::Domain(format!("{what} image must be in the [0, 1] domain")));
    }
    img.check_range()
}

fn check_plane_matches(img: &ImageBuffer, plane: &Plane) -> Result<()> {
    if img.width() != plane.width || img.height() != plane.height {
        return Err(Error::Shape(format!(
            "image is {}x{} but depth map is {}x{}",
            img.width(),
            img.height(),
            plane.width,
            plane.height
        )));
    }
    Ok(())
}

pub fn apply_haze(clean: &ImageBuffer, depth: &DepthMap, beta_s: f64, airlight: f64) -> Result<HazeSample> {
    check_unit_image(clean, "clean")?;
    check_airlight(airlight)?;
    check_plane_matches(clean, depth)?;
    let t = transmission_from_depth(depth, beta_s)?;
    let hazy = ImageBuffer::from_fn(clean.width(), clean.height(), Domain::Unit, |y, x, c| {
        let tv = t.get(y, x);
        clean.get(y, x, c) * tv + airlight * (1.0 - tv)
    });
    Ok(HazeSample {
        clean: clean.clone(),
        hazy,
        depth: depth.clone(),
        beta_s,
        airlight,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Inversion {
    /// Recovered scene, clamped to `[0, 1]`. Flagged pixels keep the hazy value.
    pub clean: ImageBuffer,
    /// Row-major mask of pixels with `t < t_min`.
    pub flagged: Vec<bool>,
}

impl Inversion {
    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().filter(|f| **f).count()
    }
}

/// `J = (I - A (1 - t)) / t`, clamped to `[0, 1]`, wherever `t >= t_min`.
pub fn invert_haze(
    hazy: &ImageBuffer,
    depth: &DepthMap,
    beta_s: f64,
    airlight: f64,
    t_min: f64,
) -> Result<Inversion> {
    check_unit_image(hazy, "hazy")?;
    check_airlight(airlight)?;
    check_plane_matches(hazy, depth)?;
    let t = transmission_from_depth(depth, beta_s)?;
    let flagged: Vec<bool> = t.data.iter().map(|&tv| tv < t_min).collect();
    let w = hazy.width();
    let clean = ImageBuffer::from_fn(w, hazy.height(), Domain::Unit, |y, x, c| {
        let (tv, iv) = (t.get(y, x), hazy.get(y, x, c));
        if flagged[y * w + x] {
            iv
        } else {
            ((iv - airlight * (1.0 - tv)) / tv).clamp(0.0, 1.0)
        }
    });
    Ok(Inversion { clean, flagged })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub index: usize,
    pub clean_path: PathBuf,
    pub hazy_path: PathBuf,
    pub depth_kind: DepthKind,
    pub beta_s: f64,
    pub airlight: f64,
    pub seed: u64,
    pub crop_x: usize,
    pub crop_y: usize,
    pub crop_w: usize,
    pub crop_h: usize,
    pub source_path: PathBuf,
}

/// Parsed manifest; relative paths resolve against `root`.
#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub root: PathBuf,
    pub records: Vec<ManifestRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.jsonl";

impl Manifest {
    /// Accepts the manifest file itself or the dataset directory holding it.
    pub fn load(path: &Path) -> Result<Self> {
        let file = if path.is_dir() { path.join(MANIFEST_FILE) } else { path.to_path_buf() };
        let root = file.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = std::fs::File::open(&file).map_err(|e| Error::io(&file, e))?;
        let mut records = Vec::new();
        for (lineno, line) in std::io::BufReader::new(f).lines().enumerate() {
            let line = line.map_err(|e| Error::io(&file, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let rec: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::format(&file, format!("line {}: {e}", lineno + 1)))?;
            records.push(rec);
        }
        if records.is_empty() {
            return Err(Error::format(&file, "manifest has no records"));
        }
        Ok(Self { root, records })
    }

    pub fn write(&self) -> Result<()> {
        let file = self.root.join(MANIFEST_FILE);
        let f = std::fs::File::create(&file).map_err(|e| Error::io(&file, e))?;
        let mut w = BufWriter::new(f);
        for rec in &self.records {
            serde_json::to_writer(&mut w, rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&file, e))?;
        }
        w.flush().map_err(|e| Error::io(&file, e))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn resolve(&self, rel: &Path) -> PathBuf {
        self.root.join(rel)
    }

    /// Load the `(hazy, clean)` pair of a record.
    pub fn load_pair(&self, rec: &ManifestRecord) -> Result<(ImageBuffer, ImageBuffer)> {
        let hazy = ImageBuffer::load_png(&self.resolve(&rec.hazy_path))?;
        let clean = ImageBuffer::load_png(&self.resolve(&rec.clean_path))?;
        if !hazy.same_size(&clean) {
            return Err(Error::Shape(format!(
                "sample {}: hazy and clean images differ in size",
                rec.index
            )));
        }
        Ok((hazy, clean))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub count: usize,
    pub beta_range: (f64, f64),
    pub airlight_range: (f64, f64),
    pub depth_kinds: Vec<DepthKind>,
    /// Square crop side; `None` keeps whole source images.
    pub crop: Option<usize>,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            count: 200,
            beta_range: (0.4, 1.6),
            airlight_range: (0.7, 1.0),
            depth_kinds: DepthKind::ALL.to_vec(),
            crop: Some(64),
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (b0, b1) = self.beta_range;
        if !(b0 > 0.0 && b0 <= b1 && b1.is_finite()) {
            return Err(Error::Config(format!(
                "beta range must satisfy 0 < low <= high, got {b0},{b1}"
            )));
        }
        let (a0, a1) = self.airlight_range;
        if !(a0 > 0.0 && a0 <= a1 && a1 <= 1.0) {
            return Err(Error::Config(format!(
                "airlight range must satisfy 0 < low <= high <= 1, got {a0},{a1}"
            )));
        }
        if self.depth_kinds.is_empty() {
            return Err(Error::Config("at least one depth kind is required".into()));
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop size must be positive".into()));
        }
        Ok(())
    }
}

/// Per-sample seed, a SplitMix64 mix of the run seed and the index.
pub fn sample_seed(seed: u64, index: usize) -> u64 {
    let mut z = seed ^ (index as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Sorted `*.png` files of a directory.
pub fn list_pngs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .and_then(|e| e.to_str())
                    .is_some_and(|e| e.eq_ignore_ascii_case("png"))
        })
        .collect();
    files.sort();
    Ok(files)
}

/// Write `count` hazy/clean pairs under `out_dir/{hazy,clean}/` plus the
/// manifest. Sample `i` uses source image `i mod #sources`.
pub fn build_dataset(clean_dir: &Path, out_dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let sources = list_pngs(clean_dir)?;
    if sources.is_empty() {
        return Err(Error::Config(format!(
            "no PNG images found in {}",
            clean_dir.display()
        )));
    }
    for sub in ["clean", "hazy"] {
        let d = out_dir.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut records = Vec::with_capacity(cfg.count);
    for index in 0..cfg.count {
        let source = &sources[index % sources.len()];
        let image = ImageBuffer::load_png(source)?;
        let seed = sample_seed(cfg.seed, index);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (crop_w, crop_h) = match cfg.crop {
            Some(c) => (c, c),
            None => (image.width(), image.height()),
        };
        if crop_w > image.width() || crop_h > image.height() {
            return Err(Error::Shape(format!(
                "{} is {}x{}, smaller than the {crop_w}x{crop_h} crop",
                source.display(),
                image.width(),
                image.height()
            )));
        }
        let crop_x = rng.gen_range(0..=image.width() - crop_w);
        let crop_y = rng.gen_range(0..=image.height() - crop_h);
        let clean = image.crop(crop_x, crop_y, crop_w, crop_h)?;
        let depth_kind = cfg.depth_kinds[rng.gen_range(0..cfg.depth_kinds.len())];
        let beta_s = sample_range(&mut rng, cfg.beta_range);
        let airlight = sample_range(&mut rng, cfg.airlight_range);
        let depth = make_depth(depth_kind, crop_h, crop_w, seed)?;
        let sample = apply_haze(&clean, &depth, beta_s, airlight)?;

        let name = format!("{index:05}.png");
        let rec = ManifestRecord {
            index,
            clean_path: Path::new("clean").join(&name),
            hazy_path: Path::new("hazy").join(&name),
            depth_kind,
            beta_s,
            airlight,
            seed,
            crop_x,
            crop_y,
            crop_w,
            crop_h,
            source_path: source.clone(),
        };
        sample.clean.save_png(&out_dir.join(&rec.clean_path))?;
        sample.hazy.save_png(&out_dir.join(&rec.hazy_path))?;
        records.push(rec);
    }
    let manifest = Manifest {
        root: out_dir.to_path_buf(),
        records,
    };
    manifest.write()?;
    Ok(manifest)
}

/// Largest deviation of a stored hazy image from the scattering model
/// re-evaluated on its stored clean image with the record's parameters.
pub fn verify_record(manifest: &Manifest, rec: &ManifestRecord) -> Result<f64> {
    let (hazy, clean) = manifest.load_pair(rec)?;
    let depth = make_depth(rec.depth_kind, rec.crop_h, rec.crop_w, rec.seed)?;
    let expected = apply_haze(&clean, &depth, rec.beta_s, rec.airlight)?;
    Ok(hazy
        .data()
        .iter()
        .zip(expected.hazy.data())
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max))
}

/// Procedural clean scene: a two-colour gradient sky over a ground plane,
/// covered with random rectangles, discs and stripe patches.
pub fn render_scene(width: usize, height: usize, seed: u64) -> ImageBuffer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let color = |rng: &mut ChaCha8Rng| [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
    let (top, bottom, ground) = (color(&mut rng), color(&mut rng), color(&mut rng));
    let horizon = rng.gen_range(0.3..0.7) * height as f64;
    let mut img = ImageBuffer::from_fn(width, height, Domain::Unit, |y, _, c| {
        if (y as f64) < horizon {
            let t = y as f64 / horizon.max(1.0);
            top[c] * (1.0 - t) + bottom[c] * t
        } else {
            ground[c]
        }
    });
    let (wf, hf) = (width as f64, height as f64);
    let shapes = rng.gen_range(8..16);
    for _ in 0..shapes {
        let col = color(&mut rng);
        let cx = rng.gen_range(0.0..wf);
        let cy = rng.gen_range(0.0..hf);
        let rx = rng.gen_range(0.04..0.25) * wf;
        let ry = rng.gen_range(0.04..0.25) * hf;
        let kind: u8 = rng.gen_range(0..3);
        let period = rng.gen_range(2.0..8.0);
        let alt = color(&mut rng);
        let (x0, x1) = ((cx - rx).max(0.0) as usize, ((cx + rx).ceil() as usize).min(width));
        let (y0, y1) = ((cy - ry).max(0.0) as usize, ((cy + ry).ceil() as usize).min(height));
        for y in y0..y1 {
            for x in x0..x1 {
                let (dx, dy) = ((x as f64 - cx) / rx, (y as f64 - cy) / ry);
                let inside = match kind {
                    0 => dx.abs() <= 1.0 && dy.abs() <= 1.0,
                    _ => dx * dx + dy * dy <= 1.0,
                };
                if !inside {
                    continue;
                }
                let striped = kind == 2 && ((x + y) as f64 / period).floor() as i64 % 2 == 0;
                let c = if striped { alt } else { col };
                for (ch, v) in c.iter().enumerate() {
                    img.set(y, x, ch, *v);
                }
            }
        }
    }
    // 8-bit so the stored PNG is exact.
    img.quantized()
}

/// Write `count` procedural scenes as `scene_{i:05}.png`.
pub fn write_scenes(out_dir: &Path, count: usize, size: usize, seed: u64) -> Result<Vec<PathBuf>> {
    if size == 0 {
        return Err(Error::Config("scene size must be positive".into()));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    (0..count)
        .map(|i| {
            let path = out_dir.join(format!("scene_{i:05}.png"));
            render_scene(size, size, sample_seed(seed, i)).save_png(&path)?;
            Ok(path)
        })
        .collect()
}
