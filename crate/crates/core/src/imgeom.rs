//! Image raster plus lossless right-angle rotation and bilinear rescaling.
//!
//! Rotations turn counterclockwise with the row axis pointing up (array
//! coordinates read as a math plot): one quarter turn maps the pixel at
//! `(y, x)` of an `H x W` image to `(x, H - 1 - y)` of the `W x H` result,
//! so the column `[[a], [b]]` becomes the row `[[b, a]]`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Real, Tensor};

/// Planar `C x H x W` raster with values in `[0, 1]`, `C` in {1, 3}.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    /// Builds an image from planar data, clamping every value into `[0, 1]`.
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "images have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} values for a {channels}x{height}x{width} image",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("image contains non-finite values".into()));
        }
        Ok(Self::from_raw(channels, height, width, data))
    }

    /// Clamps without validating shape; callers guarantee the length.
    pub(crate) fn from_raw(channels: usize, height: usize, width: usize, mut data: Vec<f32>) -> Self {
        debug_assert_eq!(data.len(), channels * height * width);
        for v in &mut data {
            *v = if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        }
        Self {
            height,
            width,
            channels,
            data,
        }
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f32) -> Self {
        Self::from_raw(channels, height, width, vec![value; channels * height * width])
    }

    /// Builds an image from interleaved `H x W x C` samples.
    pub fn from_interleaved(channels: usize, height: usize, width: usize, hwc: &[f32]) -> Result<Self> {
        if hwc.len() != channels * height * width {
            return Err(Error::ShapeMismatch(format!(
                "{} interleaved values for {height}x{width}x{channels}",
                hwc.len()
            )));
        }
        let mut planar = vec![0.0; hwc.len()];
        for c in 0..channels {
            for i in 0..height * width {
                planar[c * height * width + i] = hwc[i * channels + c];
            }
        }
        Self::new(channels, height, width, planar)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    /// Per-pixel map, result clamped.
    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self::from_raw(
            self.channels,
            self.height,
            self.width,
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        Tensor::from_vec(
            &[self.channels, self.height, self.width],
            self.data.iter().map(|&v| T::from_f64c(v as f64)).collect(),
        )
    }

    /// Converts a `C x H x W` tensor back into an image, clamping to `[0, 1]`.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        let (c, h, w) = t.chw();
        Self::from_raw(c, h, w, t.data().iter().map(|v| v.to_f64c() as f32).collect())
    }

    /// Mean absolute difference per pixel per channel.
    pub fn mean_abs_diff(&self, other: &Image) -> Result<f64> {
        if self.dims() != other.dims() || self.channels != other.channels {
            return Err(Error::ShapeMismatch(format!(
                "{}x{}x{} vs {}x{}x{}",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        let s: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| (a as f64 - b as f64).abs())
            .sum();
        Ok(s / self.data.len() as f64)
    }

    /// Rounds every value to the nearest multiple of 1/255, the grid an
    /// 8-bit file can hold exactly.
    pub fn quantized(&self) -> Self {
        self.map(|v| (v * 255.0).round() / 255.0)
    }

    fn to_u8(&self) -> Vec<u8> {
        let n = self.height * self.width;
        let mut out = Vec::with_capacity(self.data.len());
        for i in 0..n {
            for c in 0..self.channels {
                out.push((self.data[c * n + i] * 255.0).round() as u8);
            }
        }
        out
    }

    /// Writes an 8-bit grayscale or RGB PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let color = if self.channels == 1 {
            image::ExtendedColorType::L8
        } else {
            image::ExtendedColorType::Rgb8
        };
        image::save_buffer(path, &self.to_u8(), self.width as u32, self.height as u32, color)?;
        Ok(())
    }

    /// Reads an 8-bit PNG. Gray and gray-alpha load as one channel, anything
    /// else as RGB; alpha is dropped.
    pub fn load_png(path: &Path) -> Result<Self> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let img = image::open(path).map_err(|e| malformed(e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let (channels, raw) = match img.color() {
            image::ColorType::L8 | image::ColorType::La8 => (1, img.into_luma8().into_raw()),
            image::ColorType::Rgb8 | image::ColorType::Rgba8 => (3, img.into_rgb8().into_raw()),
            other => return Err(malformed(format!("expected an 8-bit image, found {other:?}"))),
        };
        let hwc: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
        Self::from_interleaved(channels, h, w, &hwc)
    }
}

/// Counterclockwise rotation by a multiple of 90 degrees.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct RotationAngle(u8);

impl RotationAngle {
    pub const R0: RotationAngle = RotationAngle(0);
    pub const R90: RotationAngle = RotationAngle(1);
    pub const R180: RotationAngle = RotationAngle(2);
    pub const R270: RotationAngle = RotationAngle(3);
    pub const ALL: [RotationAngle; 4] = [Self::R0, Self::R90, Self::R180, Self::R270];

    pub fn new(quarter_turns: u8) -> Result<Self> {
        if quarter_turns > 3 {
            return Err(Error::InvalidArgument(format!(
                "rotation must be 0..=3 quarter turns, got {quarter_turns}"
            )));
        }
        Ok(Self(quarter_turns))
    }

    pub fn quarter_turns(self) -> u8 {
        self.0
    }

    pub fn degrees(self) -> u32 {
        self.0 as u32 * 90
    }

    pub fn inverse(self) -> Self {
        Self((4 - self.0) % 4)
    }
}

/// Source coordinate in the unrotated `h x w` grid for output pixel `(y, x)`
/// after `k` counterclockwise quarter turns.
fn rotation_source(k: u8, h: usize, w: usize, y: usize, x: usize) -> (usize, usize) {
    match k {
        0 => (y, x),
        1 => (h - 1 - x, y),
        2 => (h - 1 - y, w - 1 - x),
        _ => (x, w - 1 - y),
    }
}

fn rotated_dims(k: u8, h: usize, w: usize) -> (usize, usize) {
    if k % 2 == 1 {
        (w, h)
    } else {
        (h, w)
    }
}

/// Rotates planar `C x H x W` data.
pub(crate) fn rotate_planar<T: Copy>(data: &[T], c: usize, h: usize, w: usize, k: RotationAngle) -> (Vec<T>, usize, usize) {
    let k = k.0;
    let (oh, ow) = rotated_dims(k, h, w);
    let mut out = Vec::with_capacity(data.len());
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            for x in 0..ow {
                let (sy, sx) = rotation_source(k, h, w, y, x);
                out.push(plane[sy * w + sx]);
            }
        }
    }
    (out, oh, ow)
}

/// Pixel-exact counterclockwise rotation; odd turns swap height and width.
pub fn rotate(img: &Image, k: RotationAngle) -> Image {
    if k == RotationAngle::R0 {
        return img.clone();
    }
    let (data, h, w) = rotate_planar(&img.data, img.channels, img.height, img.width, k);
    Image {
        height: h,
        width: w,
        channels: img.channels,
        data,
    }
}

/// Output size for a resize ratio, rejecting zero-size results.
pub fn scaled_dims(h: usize, w: usize, ratio: f64) -> Result<(usize, usize)> {
    if !(ratio.is_finite() && ratio > 0.0) {
        return Err(Error::InvalidArgument(format!("resize ratio must be positive, got {ratio}")));
    }
    let oh = (h as f64 * ratio).round() as usize;
    let ow = (w as f64 * ratio).round() as usize;
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument(format!(
            "ratio {ratio} maps {h}x{w} to an empty image"
        )));
    }
    Ok((oh, ow))
}

struct Taps {
    lo: Vec<usize>,
    hi: Vec<usize>,
    frac: Vec<f64>,
}

fn bilinear_taps(input: usize, output: usize) -> Taps {
    let step = input as f64 / output as f64;
    let mut taps = Taps {
        lo: Vec::with_capacity(output),
        hi: Vec::with_capacity(output),
        frac: Vec::with_capacity(output),
    };
    for d in 0..output {
        let src = ((d as f64 + 0.5) * step - 0.5).clamp(0.0, (input - 1) as f64);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(input - 1);
        taps.lo.push(lo);
        taps.hi.push(hi);
        taps.frac.push(src - lo as f64);
    }
    taps
}

/// Bilinear resampling of planar data to `oh x ow` with half-pixel centres.
///
/// The four corner contributions are summed as two diagonal pairs, which
/// makes the result invariant to the order the corners are visited in; a
/// rotated input therefore gives the rotated output bit-for-bit whenever the
/// tap weights are exact (e.g. ratio 2).
pub(crate) fn resize_planar(data: &[f32], c: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f32> {
    let ty = bilinear_taps(h, oh);
    let tx = bilinear_taps(w, ow);
    let mut out = Vec::with_capacity(c * oh * ow);
    for ch in 0..c {
        let plane = &data[ch * h * w..(ch + 1) * h * w];
        for y in 0..oh {
            let (y0, y1, fy) = (ty.lo[y], ty.hi[y], ty.frac[y]);
            let gy = 1.0 - fy;
            for x in 0..ow {
                let (x0, x1, fx) = (tx.lo[x], tx.hi[x], tx.frac[x]);
                let gx = 1.0 - fx;
                let p00 = (gy * gx) * plane[y0 * w + x0] as f64;
                let p01 = (gy * fx) * plane[y0 * w + x1] as f64;
                let p10 = (fy * gx) * plane[y1 * w + x0] as f64;
                let p11 = (fy * fx) * plane[y1 * w + x1] as f64;
                out.push(((p00 + p11) + (p01 + p10)) as f32);
            }
        }
    }
    out
}

/// Bilinear rescale by `ratio`; output is `round(H * ratio) x round(W * ratio)`.
pub fn resize(img: &Image, ratio: f64) -> Result<Image> {
    let (oh, ow) = scaled_dims(img.height, img.width, ratio)?;
    resize_to(img, oh, ow)
}

/// Bilinear rescale to an explicit size.
pub fn resize_to(img: &Image, oh: usize, ow: usize) -> Result<Image> {
    if oh == 0 || ow == 0 {
        return Err(Error::InvalidArgument("resize target must be non-empty".into()));
    }
    if (oh, ow) == (img.height, img.width) {
        return Ok(img.clone());
    }
    let data = resize_planar(&img.data, img.channels, img.height, img.width, oh, ow);
    Ok(Image::from_raw(img.channels, oh, ow, data))
}

/// Nearest-neighbour resampling of an integer raster (used for label maps).
pub(crate) fn resize_nearest<T: Copy>(data: &[T], h: usize, w: usize, oh: usize, ow: usize) -> Vec<T> {
    let sy: Vec<usize> = (0..oh)
        .map(|y| (((y as f64 + 0.5) * h as f64 / oh as f64).floor() as usize).min(h - 1))
        .collect();
    let sx: Vec<usize> = (0..ow)
        .map(|x| (((x as f64 + 0.5) * w as f64 / ow as f64).floor() as usize).min(w - 1))
        .collect();
    let mut out = Vec::with_capacity(oh * ow);
    for &y in &sy {
        for &x in &sx {
            out.push(data[y * w + x]);
        }
    }
    out
}
