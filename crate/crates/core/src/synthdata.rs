//! Synthetic cell images with controllable scale and appearance, and a plain
//! directory format for image/label datasets.
//!
//! A sample is a textured background with non-overlapping filled ellipses.
//! Each ellipse is one instance; its label covers exactly the pixels whose
//! centres fall inside it.

use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgeom::Image;
use crate::segnet::InstanceLabelMap;

/// Appearance and geometry of one image domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainSpec {
    pub height: usize,
    pub width: usize,
    /// 1 (gray) or 3 (RGB).
    pub channels: usize,
    /// Range of the long semi-axis in pixels.
    pub cell_radius_range: (f64, f64),
    pub cell_count_range: (usize, usize),
    /// Mean and spread of the per-cell intensity.
    pub foreground_intensity: (f64, f64),
    /// Mean and spread of the per-image background level.
    pub background_intensity: (f64, f64),
    /// Spatial frequency of the sinusoidal texture in cycles per pixel.
    pub texture_frequency: f64,
    pub texture_amplitude: f64,
    /// Per-channel gain applied to the intensity image (RGB only).
    pub color_tint: [f64; 3],
    pub noise_std: f64,
    /// Instances smaller than this after clipping are discarded.
    pub min_area: usize,
    pub seed: u64,
}

impl DomainSpec {
    /// Bright cells on a dark background, radius 8 to 12, 48x48 RGB.
    pub fn cells_a() -> Self {
        Self {
            height: 48,
            width: 48,
            channels: 3,
            cell_radius_range: (8.0, 12.0),
            cell_count_range: (3, 6),
            foreground_intensity: (0.75, 0.08),
            background_intensity: (0.15, 0.04),
            texture_frequency: 0.08,
            texture_amplitude: 0.06,
            color_tint: [0.55, 1.0, 0.45],
            noise_std: 0.03,
            min_area: 9,
            seed: 0,
        }
    }

    /// Smaller, dimmer, differently tinted cells with finer texture and more
    /// noise.
    pub fn cells_b() -> Self {
        Self {
            cell_radius_range: (4.0, 6.0),
            cell_count_range: (8, 16),
            foreground_intensity: (0.6, 0.08),
            background_intensity: (0.3, 0.04),
            texture_frequency: 0.3,
            texture_amplitude: 0.08,
            color_tint: [1.0, 0.55, 0.8],
            noise_std: 0.05,
            ..Self::cells_a()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("domain spec: {m}")));
        if self.height == 0 || self.width == 0 {
            return bad("image size must be positive");
        }
        if self.channels != 1 && self.channels != 3 {
            return bad("channels must be 1 or 3");
        }
        let (r0, r1) = self.cell_radius_range;
        if !(r0 > 0.0 && r0 <= r1 && r1.is_finite()) {
            return bad("cell_radius_range must satisfy 0 < min <= max");
        }
        if self.cell_count_range.0 > self.cell_count_range.1 {
            return bad("cell_count_range must satisfy min <= max");
        }
        for (name, (m, s)) in [
            ("foreground_intensity", self.foreground_intensity),
            ("background_intensity", self.background_intensity),
        ] {
            if !(0.0..=1.0).contains(&m) || !(s >= 0.0 && s.is_finite()) {
                return Err(Error::Config(format!(
                    "domain spec: {name} needs a mean in [0, 1] and a finite non-negative spread"
                )));
            }
        }
        let nonneg = [self.texture_frequency, self.texture_amplitude, self.noise_std];
        if nonneg.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("texture and noise parameters must be finite and non-negative");
        }
        if self.color_tint.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("color_tint entries must be finite and non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Image,
    pub labels: InstanceLabelMap,
}

/// Filled ellipse in pixel coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ellipse {
    pub cy: f64,
    pub cx: f64,
    /// Long semi-axis.
    pub a: f64,
    /// Short semi-axis, at least `a / 2`.
    pub b: f64,
    pub theta: f64,
}

impl Ellipse {
    /// Whether the centre of pixel `(y, x)` lies inside.
    pub fn contains(&self, y: usize, x: usize) -> bool {
        let dy = y as f64 + 0.5 - self.cy;
        let dx = x as f64 + 0.5 - self.cx;
        let (s, c) = self.theta.sin_cos();
        let u = dx * c + dy * s;
        let v = -dx * s + dy * c;
        (u / self.a).powi(2) + (v / self.b).powi(2) <= 1.0
    }

    fn pixels(&self, h: usize, w: usize) -> Vec<usize> {
        let r = self.a.ceil() as isize + 1;
        let (y0, x0) = (self.cy.floor() as isize, self.cx.floor() as isize);
        let mut out = Vec::new();
        for y in (y0 - r).max(0)..(y0 + r + 1).min(h as isize) {
            for x in (x0 - r).max(0)..(x0 + r + 1).min(w as isize) {
                if self.contains(y as usize, x as usize) {
                    out.push(y as usize * w + x as usize);
                }
            }
        }
        out
    }
}

/// Placement attempts per requested cell before giving up on it.
const PLACEMENT_TRIES: usize = 60;

/// Scene geometry and noiseless intensity before tint and noise.
#[derive(Clone, Debug)]
pub struct Scene {
    pub cells: Vec<Ellipse>,
    pub labels: InstanceLabelMap,
    /// Single-channel intensity without noise, unclamped.
    pub clean: Vec<f64>,
}

fn sample_seed(base: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a combined key
    let mut z = base
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED03));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Places cells and renders the noiseless intensity image.
pub fn generate_scene(spec: &DomainSpec, seed: u64) -> Result<(Scene, ChaCha8Rng)> {
    spec.validate()?;
    let (h, w) = (spec.height, spec.width);
    let mut rng = ChaCha8Rng::seed_from_u64(sample_seed(spec.seed, 0, seed));
    let count = rng.gen_range(spec.cell_count_range.0..=spec.cell_count_range.1);
    let mut owner = vec![0u32; h * w];
    let mut cells = Vec::new();
    for _ in 0..count {
        for _ in 0..PLACEMENT_TRIES {
            let (r0, r1) = spec.cell_radius_range;
            let a = if r1 > r0 { rng.gen_range(r0..=r1) } else { r0 };
            let ecc = rng.gen_range(1.0..=2.0);
            let e = Ellipse {
                cy: rng.gen_range(0.0..h as f64),
                cx: rng.gen_range(0.0..w as f64),
                a,
                b: a / ecc,
                theta: rng.gen_range(0.0..std::f64::consts::PI),
            };
            let px = e.pixels(h, w);
            if px.len() < spec.min_area.max(1) || px.iter().any(|&i| owner[i] != 0) {
                continue;
            }
            let id = cells.len() as u32 + 1;
            for i in px {
                owner[i] = id;
            }
            cells.push(e);
            break;
        }
    }
    let normal = |m: f64, s: f64| Normal::new(m, s).expect("validated spread");
    let bg = normal(spec.background_intensity.0, spec.background_intensity.1).sample(&mut rng);
    let fg: Vec<f64> = (0..cells.len())
        .map(|_| normal(spec.foreground_intensity.0, spec.foreground_intensity.1).sample(&mut rng))
        .collect();
    let angle = rng.gen_range(0.0..std::f64::consts::PI);
    let phase = rng.gen_range(0.0..std::f64::consts::TAU);
    let (s, c) = angle.sin_cos();
    let mut clean = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let base = if owner[i] == 0 { bg } else { fg[owner[i] as usize - 1] };
            let t = (std::f64::consts::TAU * spec.texture_frequency * (x as f64 * c + y as f64 * s) + phase).sin();
            clean[i] = base + spec.texture_amplitude * t;
        }
    }
    let (labels, _) = InstanceLabelMap::from_raw(h, w, owner)?;
    Ok((Scene { cells, labels, clean }, rng))
}

/// One image and its instance labels. Pixel values are quantised to the
/// 8-bit grid so the sample survives a save/load round trip unchanged.
pub fn generate_sample(spec: &DomainSpec, seed: u64) -> Result<Sample> {
    let (scene, mut rng) = generate_scene(spec, seed)?;
    let n = spec.height * spec.width;
    let noise = Normal::new(0.0, spec.noise_std).expect("validated noise");
    let gains: Vec<f64> = if spec.channels == 1 {
        vec![1.0]
    } else {
        spec.color_tint.to_vec()
    };
    let mut data = Vec::with_capacity(spec.channels * n);
    for gain in gains {
        for &v in &scene.clean {
            let jitter = if spec.noise_std > 0.0 { noise.sample(&mut rng) } else { 0.0 };
            data.push((gain * v + jitter) as f32);
        }
    }
    let image = Image::new(spec.channels, spec.height, spec.width, data)?.quantized();
    Ok(Sample {
        image,
        labels: scene.labels,
    })
}

/// `n` samples from stream `stream` of `seed`; sample `i` depends only on
/// `(spec, seed, stream, i)`.
pub fn generate_many(spec: &DomainSpec, n: usize, seed: u64, stream: u64) -> Result<Vec<Sample>> {
    (0..n as u64)
        .into_par_iter()
        .map(|i| generate_sample(spec, sample_seed(seed, stream + 1, i)))
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub train: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Training and test sets drawn from disjoint seed streams.
pub fn make_split(
    spec_train: &DomainSpec,
    spec_test: &DomainSpec,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<Split> {
    Ok(Split {
        train: generate_many(spec_train, n_train, seed, 0)?,
        test: generate_many(spec_test, n_test, seed, 1)?,
    })
}

/// A sample with its manifest fields.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetEntry {
    pub id: String,
    pub split: String,
    pub domain: String,
    pub sample: Sample,
}

pub const MANIFEST: &str = "manifest.csv";

#[derive(Serialize, Deserialize)]
struct ManifestRow {
    id: String,
    split: String,
    domain: String,
}

/// Writes `images/<id>.png`, `labels/<id>.png` and `manifest.csv`.
pub fn save_dataset(dir: &Path, entries: &[DatasetEntry]) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    fs::create_dir_all(dir.join("labels"))?;
    let mut w = csv::Writer::from_path(dir.join(MANIFEST))?;
    for e in entries {
        e.sample.image.save_png(&dir.join("images").join(format!("{}.png", e.id)))?;
        e.sample.labels.save_png(&dir.join("labels").join(format!("{}.png", e.id)))?;
        w.serialize(ManifestRow {
            id: e.id.clone(),
            split: e.split.clone(),
            domain: e.domain.clone(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads a dataset directory. Without a manifest every `images/*.png` with a
/// matching label file is loaded with empty split and domain tags. Label ids
/// that are not contiguous are renumbered with a warning.
pub fn load_dataset(dir: &Path) -> Result<Vec<DatasetEntry>> {
    let manifest = dir.join(MANIFEST);
    let rows: Vec<ManifestRow> = if manifest.is_file() {
        csv::Reader::from_path(&manifest)?
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                path: manifest.clone(),
                reason: e.to_string(),
            })?
    } else {
        let images = dir.join("images");
        if !images.is_dir() {
            return Ok(Vec::new());
        }
        let mut ids: Vec<String> = fs::read_dir(&images)?
            .filter_map(|e| e.ok())
            .map(|e| e.path())
            .filter(|p| p.extension().is_some_and(|x| x == "png"))
            .filter_map(|p| p.file_stem().map(|s| s.to_string_lossy().into_owned()))
            .collect();
        ids.sort();
        ids.into_iter()
            .map(|id| ManifestRow {
                id,
                split: String::new(),
                domain: String::new(),
            })
            .collect()
    };
    rows.into_iter()
        .map(|row| {
            let ipath = dir.join("images").join(format!("{}.png", row.id));
            let lpath = dir.join("labels").join(format!("{}.png", row.id));
            let image = Image::load_png(&ipath)?;
            let (labels, relabelled) = InstanceLabelMap::load_png(&lpath)?;
            if relabelled {
                log::warn!("{}: instance ids renumbered to 1..{}", lpath.display(), labels.count());
            }
            if labels.dims() != image.dims() {
                return Err(Error::Malformed {
                    path: lpath,
                    reason: format!(
                        "label map is {}x{} but the image is {}x{}",
                        labels.height(),
                        labels.width(),
                        image.height(),
                        image.width()
                    ),
                });
            }
            Ok(DatasetEntry {
                id: row.id,
                split: row.split,
                domain: row.domain,
                sample: Sample { image, labels },
            })
        })
        .collect()
}
