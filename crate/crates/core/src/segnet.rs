//! Three-class (background / interior / boundary) U-Net segmenter, instance
//! label maps, instance decoding and rotation-aggregated prediction.

use std::collections::VecDeque;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgeom::{resize_nearest, resize_planar, rotate_planar, Image, RotationAngle};
use crate::nn::{conv_params, Checkpoint, Graph, ParamSet, Real, Tensor, Var};
use crate::styletx::Padding;

pub const NUM_CLASSES: usize = 3;
pub const CLASS_BACKGROUND: u8 = 0;
pub const CLASS_INTERIOR: u8 = 1;
pub const CLASS_BOUNDARY: u8 = 2;
pub const DEFAULT_MIN_AREA: usize = 9;

/// Clamp applied to probabilities before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Per-pixel class probabilities, planar `[3, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ProbMap {
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl ProbMap {
    /// Validates shape and that each pixel is a distribution within 1e-5.
    pub fn new(height: usize, width: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != NUM_CLASSES * height * width {
            return Err(Error::ShapeMismatch(format!(
                "prob map {height}x{width} needs {} values, got {}",
                NUM_CLASSES * height * width,
                data.len()
            )));
        }
        let map = Self { height, width, data };
        let n = height * width;
        for i in 0..n {
            let mut s = 0.0f64;
            for c in 0..NUM_CLASSES {
                let p = map.data[c * n + i];
                if !(0.0..=1.0).contains(&p) {
                    return Err(Error::InvalidArgument(format!("probability {p} out of range")));
                }
                s += p as f64;
            }
            if (s - 1.0).abs() > 1e-5 {
                return Err(Error::InvalidArgument(format!("pixel {i} sums to {s}")));
            }
        }
        Ok(map)
    }

    /// Softmax over the class axis of `[3, H, W]` logits.
    pub fn from_logits<T: Real>(logits: &Tensor<T>) -> Self {
        let (k, h, w) = logits.chw();
        assert_eq!(k, NUM_CLASSES, "expected {NUM_CLASSES} logit channels");
        let n = h * w;
        let mut data = vec![0f32; k * n];
        for i in 0..n {
            let v: Vec<f64> = (0..k).map(|c| logits.data()[c * n + i].to_f64c()).collect();
            let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for c in 0..k {
                data[c * n + i] = (e[c] / z) as f32;
            }
        }
        Self { height: h, width: w, data }
    }

    /// Every pixel set to the same distribution.
    pub fn constant(height: usize, width: usize, probs: [f32; NUM_CLASSES]) -> Self {
        let n = height * width;
        let mut data = Vec::with_capacity(NUM_CLASSES * n);
        for p in probs {
            data.extend(std::iter::repeat(p).take(n));
        }
        Self { height, width, data }
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

    pub fn class(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn rotate(&self, k: RotationAngle) -> Self {
        let (data, h, w) = rotate_planar(&self.data, NUM_CLASSES, self.height, self.width, k);
        Self { height: h, width: w, data }
    }

    /// Bilinear resize of every class plane followed by per-pixel
    /// renormalisation.
    pub fn resize_to(&self, oh: usize, ow: usize) -> Self {
        if (oh, ow) == (self.height, self.width) {
            return self.clone();
        }
        let mut data = resize_planar(&self.data, NUM_CLASSES, self.height, self.width, oh, ow);
        normalize_planar(&mut data, oh * ow);
        Self { height: oh, width: ow, data }
    }

    /// Pixelwise mean of equally sized maps, renormalised.
    pub fn average(maps: &[ProbMap]) -> Result<Self> {
        let first = maps
            .first()
            .ok_or_else(|| Error::InvalidArgument("cannot average zero probability maps".into()))?;
        let mut acc = vec![0f64; first.data.len()];
        for m in maps {
            if (m.height, m.width) != (first.height, first.width) {
                return Err(Error::ShapeMismatch(format!(
                    "averaging {}x{} with {}x{}",
                    first.height, first.width, m.height, m.width
                )));
            }
            for (a, &v) in acc.iter_mut().zip(&m.data) {
                *a += v as f64;
            }
        }
        let k = maps.len() as f64;
        let mut data: Vec<f32> = acc.iter().map(|a| (a / k) as f32).collect();
        normalize_planar(&mut data, first.height * first.width);
        Ok(Self {
            height: first.height,
            width: first.width,
            data,
        })
    }

    /// Most probable class per pixel; ties resolve to the lower class index.
    pub fn argmax(&self) -> Vec<u8> {
        let n = self.height * self.width;
        (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..NUM_CLASSES {
                    if self.data[c * n + i] > self.data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect()
    }

    /// Semantic foreground: pixels whose most probable class is not background.
    pub fn foreground(&self) -> Vec<bool> {
        self.argmax().into_iter().map(|c| c != CLASS_BACKGROUND).collect()
    }
}

fn normalize_planar(data: &mut [f32], n: usize) {
    for i in 0..n {
        let s: f64 = (0..NUM_CLASSES).map(|c| data[c * n + i] as f64).sum();
        for c in 0..NUM_CLASSES {
            let v = &mut data[c * n + i];
            *v = if s > 0.0 {
                (*v as f64 / s) as f32
            } else {
                1.0 / NUM_CLASSES as f32
            };
        }
    }
}

/// Instance raster: 0 is background, instances are numbered `1..=K`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InstanceLabelMap {
    height: usize,
    width: usize,
    labels: Vec<u32>,
    count: u32,
}

impl InstanceLabelMap {
    pub fn empty(height: usize, width: usize) -> Self {
        Self {
            height,
            width,
            labels: vec![0; height * width],
            count: 0,
        }
    }

    /// Accepts arbitrary ids and renumbers them to `1..=K` preserving their
    /// order. The flag reports whether any id changed.
    pub fn from_raw(height: usize, width: usize, labels: Vec<u32>) -> Result<(Self, bool)> {
        if labels.len() != height * width {
            return Err(Error::ShapeMismatch(format!(
                "label map {height}x{width} needs {} values, got {}",
                height * width,
                labels.len()
            )));
        }
        let mut ids: Vec<u32> = labels.iter().copied().filter(|&l| l != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        let contiguous = ids.iter().enumerate().all(|(i, &id)| id == i as u32 + 1);
        let map = if contiguous {
            Self {
                height,
                width,
                count: ids.len() as u32,
                labels,
            }
        } else {
            let relabelled = labels
                .iter()
                .map(|&l| {
                    if l == 0 {
                        0
                    } else {
                        ids.binary_search(&l).expect("id present") as u32 + 1
                    }
                })
                .collect();
            Self {
                height,
                width,
                count: ids.len() as u32,
                labels: relabelled,
            }
        };
        Ok((map, !contiguous))
    }

    /// Like [`from_raw`](Self::from_raw) but rejects non-contiguous ids.
    pub fn new(height: usize, width: usize, labels: Vec<u32>) -> Result<Self> {
        let (map, changed) = Self::from_raw(height, width, labels)?;
        if changed {
            return Err(Error::InvalidArgument("instance ids are not contiguous 1..K".into()));
        }
        Ok(map)
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.labels[y * self.width + x]
    }

    /// Number of instances `K`.
    pub fn count(&self) -> usize {
        self.count as usize
    }

    /// Pixel count per instance, index `i` holding instance `i + 1`.
    pub fn areas(&self) -> Vec<usize> {
        let mut a = vec![0; self.count()];
        for &l in &self.labels {
            if l > 0 {
                a[l as usize - 1] += 1;
            }
        }
        a
    }

    pub fn foreground(&self) -> Vec<bool> {
        self.labels.iter().map(|&l| l != 0).collect()
    }

    pub fn rotate(&self, k: RotationAngle) -> Self {
        let (labels, h, w) = rotate_planar(&self.labels, 1, self.height, self.width, k);
        Self {
            height: h,
            width: w,
            labels,
            count: self.count,
        }
    }

    /// Nearest-neighbour resampling; instances that vanish are dropped and
    /// the rest renumbered.
    pub fn resize_nearest(&self, oh: usize, ow: usize) -> Self {
        if (oh, ow) == (self.height, self.width) {
            return self.clone();
        }
        let labels = resize_nearest(&self.labels, self.height, self.width, oh, ow);
        Self::from_raw(oh, ow, labels).expect("size matches").0
    }

    /// Three-class target: an instance pixel with a 4-neighbour outside its
    /// instance is boundary, other instance pixels are interior. Pixels on
    /// the image border count as interior unless a neighbour differs.
    pub fn class_targets(&self) -> Vec<u8> {
        let (h, w) = (self.height, self.width);
        let mut out = vec![CLASS_BACKGROUND; h * w];
        for y in 0..h {
            for x in 0..w {
                let l = self.labels[y * w + x];
                if l == 0 {
                    continue;
                }
                let edge = neighbours4(y, x, h, w).any(|(ny, nx)| self.labels[ny * w + nx] != l);
                out[y * w + x] = if edge { CLASS_BOUNDARY } else { CLASS_INTERIOR };
            }
        }
        out
    }

    /// Writes a 16-bit grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        if self.count > u16::MAX as u32 {
            return Err(Error::InvalidArgument(format!(
                "{} instances do not fit a 16-bit label image",
                self.count
            )));
        }
        let buf: image::ImageBuffer<image::Luma<u16>, Vec<u16>> = image::ImageBuffer::from_raw(
            self.width as u32,
            self.height as u32,
            self.labels.iter().map(|&l| l as u16).collect(),
        )
        .expect("buffer size matches");
        buf.save(path)?;
        Ok(())
    }

    /// Reads a single-channel 8- or 16-bit PNG. The flag reports whether ids
    /// had to be renumbered.
    pub fn load_png(path: &Path) -> Result<(Self, bool)> {
        let malformed = |reason: String| Error::Malformed {
            path: path.to_path_buf(),
            reason,
        };
        let img = image::open(path).map_err(|e| malformed(e.to_string()))?;
        let (w, h) = (img.width() as usize, img.height() as usize);
        let labels: Vec<u32> = match img {
            image::DynamicImage::ImageLuma16(b) => b.into_raw().into_iter().map(u32::from).collect(),
            image::DynamicImage::ImageLuma8(b) => b.into_raw().into_iter().map(u32::from).collect(),
            other => {
                return Err(malformed(format!(
                    "label image must be single-channel, found {:?}",
                    other.color()
                )))
            }
        };
        Self::from_raw(h, w, labels)
    }
}

fn neighbours4(y: usize, x: usize, h: usize, w: usize) -> impl Iterator<Item = (usize, usize)> {
    let cand = [
        (y.wrapping_sub(1), x),
        (y + 1, x),
        (y, x.wrapping_sub(1)),
        (y, x + 1),
    ];
    cand.into_iter().filter(move |&(ny, nx)| ny < h && nx < w)
}

/// Converts a probability map into instances.
///
/// Pixels with interior probability above 0.5 form seeds, grouped into
/// 4-connected components. Each component then grows breadth-first into
/// adjacent pixels whose most probable class is boundary, so a boundary pixel
/// goes to the nearest seed. Components smaller than `min_area` after growth
/// are dropped and the survivors renumbered in raster order.
pub fn decode_instances(pred: &ProbMap, min_area: usize) -> InstanceLabelMap {
    let (h, w) = (pred.height, pred.width);
    let n = h * w;
    let interior = pred.class(CLASS_INTERIOR as usize);
    let classes = pred.argmax();
    let mut labels = vec![0u32; n];
    let mut next = 0u32;
    let mut queue = VecDeque::new();
    for start in 0..n {
        if labels[start] != 0 || interior[start] <= 0.5 {
            continue;
        }
        next += 1;
        labels[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            for (ny, nx) in neighbours4(i / w, i % w, h, w) {
                let j = ny * w + nx;
                if labels[j] == 0 && interior[j] > 0.5 {
                    labels[j] = next;
                    queue.push_back(j);
                }
            }
        }
    }
    // multi-source growth into boundary pixels, seeds in raster order
    let mut frontier: VecDeque<usize> = (0..n).filter(|&i| labels[i] != 0).collect();
    while let Some(i) = frontier.pop_front() {
        for (ny, nx) in neighbours4(i / w, i % w, h, w) {
            let j = ny * w + nx;
            if labels[j] == 0 && classes[j] == CLASS_BOUNDARY {
                labels[j] = labels[i];
                frontier.push_back(j);
            }
        }
    }
    let mut area = vec![0usize; next as usize + 1];
    for &l in &labels {
        area[l as usize] += 1;
    }
    let mut remap = vec![0u32; next as usize + 1];
    let mut k = 0;
    for &l in &labels {
        if l != 0 && remap[l as usize] == 0 && area[l as usize] >= min_area {
            k += 1;
            remap[l as usize] = k;
        }
    }
    InstanceLabelMap {
        height: h,
        width: w,
        labels: labels.iter().map(|&l| remap[l as usize]).collect(),
        count: k,
    }
}

/// Mean per-pixel cross-entropy of a probability map against the three-class
/// target derived from `labels`.
pub fn seg_loss(pred: &ProbMap, labels: &InstanceLabelMap) -> Result<f64> {
    if (pred.height, pred.width) != labels.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {}x{} vs labels {}x{}",
            pred.height,
            pred.width,
            labels.height(),
            labels.width()
        )));
    }
    let n = pred.height * pred.width;
    let targets = labels.class_targets();
    let total: f64 = targets
        .iter()
        .enumerate()
        .map(|(i, &t)| -(pred.data[t as usize * n + i] as f64).max(PROB_FLOOR).ln())
        .sum();
    Ok(total / n.max(1) as f64)
}

/// Anything that turns an image into class probabilities of the same size.
pub trait Segmenter {
    fn probs(&self, img: &Image) -> Result<ProbMap>;
}

/// U-Net shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegArch {
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of pooling steps.
    pub levels: usize,
}

impl SegArch {
    pub fn standard(in_channels: usize) -> Self {
        Self {
            in_channels,
            base_width: 16,
            levels: 3,
        }
    }

    pub fn size_multiple(&self) -> usize {
        1 << self.levels
    }

    fn enc_widths(&self) -> Vec<usize> {
        (0..self.levels).map(|i| self.base_width << i).collect()
    }
}

/// U-shaped network: per level conv + ReLU then pool; a bottleneck conv; per
/// level upsample, concatenate the skip, conv + ReLU; a 1x1 head to logits.
#[derive(Clone, Debug, PartialEq)]
pub struct SegNet<T> {
    pub arch: SegArch,
    pub params: ParamSet<T>,
}

impl<T: Real> SegNet<T> {
    pub fn new(arch: &SegArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let enc = arch.enc_widths();
        let mut ci = arch.in_channels;
        for (i, &co) in enc.iter().enumerate() {
            conv_params(&mut params, &format!("down{i}"), ci, co, 3, &mut rng);
            ci = co;
        }
        let bottleneck = *enc.last().expect("at least one level");
        conv_params(&mut params, "bottleneck", ci, bottleneck, 3, &mut rng);
        let mut below = bottleneck;
        for i in (0..arch.levels).rev() {
            let co = if i == 0 { arch.base_width } else { enc[i - 1] };
            conv_params(&mut params, &format!("up{i}"), below + enc[i], co, 3, &mut rng);
            below = co;
        }
        conv_params(&mut params, "head", below, NUM_CLASSES, 1, &mut rng);
        Self {
            arch: arch.clone(),
            params,
        }
    }

    /// Logits for an input whose size is a multiple of
    /// [`SegArch::size_multiple`].
    pub fn forward_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Var {
        let levels = self.arch.levels;
        let mut skips = Vec::with_capacity(levels);
        let mut h = x;
        let mut k = 0;
        let mut conv = |g: &mut Graph<T>, h: Var, relu: bool| {
            let out = g.conv2d(h, p[k], p[k + 1]);
            k += 2;
            if relu {
                g.relu(out)
            } else {
                out
            }
        };
        for _ in 0..levels {
            h = conv(g, h, true);
            skips.push(h);
            h = g.avg_pool2(h);
        }
        h = conv(g, h, true);
        for i in (0..levels).rev() {
            h = g.upsample2(h);
            h = g.concat(h, skips[i]);
            h = conv(g, h, true);
        }
        conv(g, h, false)
    }

    pub fn check_input(&self, img: &Image) -> Result<Padding> {
        let m = self.arch.size_multiple();
        if img.height() < m || img.width() < m {
            return Err(Error::TooSmall {
                height: img.height(),
                width: img.width(),
                min: m,
            });
        }
        if img.channels() != self.arch.in_channels {
            return Err(Error::ShapeMismatch(format!(
                "segmenter expects {} channels, image has {}",
                self.arch.in_channels,
                img.channels()
            )));
        }
        Ok(Padding::to_multiple(img.height(), img.width(), m))
    }

    /// Builds padded-input logits cropped back to `h x w` on an existing graph.
    pub fn logits_graph(&self, g: &mut Graph<T>, p: &[Var], x: Var, pad: Padding) -> Var {
        let (_, h, w) = g.value(x).chw();
        let xp = if pad.is_zero() {
            x
        } else {
            g.pad_reflect(x, pad.top, pad.bottom, pad.left, pad.right)
        };
        let logits = self.forward_graph(g, p, xp);
        if pad.is_zero() {
            logits
        } else {
            g.crop(logits, pad.top, pad.left, h, w)
        }
    }

    pub fn logits(&self, img: &Image) -> Result<Tensor<T>> {
        let pad = self.check_input(img)?;
        let mut g = Graph::new();
        let p = self.params.bind(&mut g, false);
        let x = g.constant(img.to_tensor());
        let out = self.logits_graph(&mut g, &p, x, pad);
        Ok(g.value(out).clone())
    }

    pub fn forward(&self, img: &Image) -> Result<ProbMap> {
        Ok(ProbMap::from_logits(&self.logits(img)?))
    }

    pub fn cast<U: Real>(&self) -> SegNet<U> {
        SegNet {
            arch: self.arch.clone(),
            params: self.params.cast(),
        }
    }
}

impl<T: Real> Segmenter for SegNet<T> {
    fn probs(&self, img: &Image) -> Result<ProbMap> {
        self.forward(img)
    }
}

pub const CHECKPOINT_KIND: &str = "segnet";

impl SegNet<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "arch": self.arch,
        }))
        .with_group("segnet", self.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Format("checkpoint is not a segmentation checkpoint".into()));
        }
        let arch: SegArch = serde_json::from_value(ck.metadata["arch"].clone())
            .map_err(|e| Error::Format(format!("segmentation architecture: {e}")))?;
        let reference = SegNet::<f32>::new(&arch, 0);
        let set = ck
            .group("segnet")
            .ok_or_else(|| Error::Format("missing parameter group segnet".into()))?;
        crate::styletx::check_layout(set, &reference.params)?;
        Ok(Self {
            arch,
            params: set.clone(),
        })
    }
}

/// Runs the segmenter on every variant of a bundle, rotates each map back,
/// averages, and resizes the mean to `original` (renormalised).
pub fn aggregate_bundle<S: Segmenter + ?Sized>(
    seg: &S,
    bundle: &crate::augment::AugmentedBundle,
) -> Result<ProbMap> {
    let maps = rotated_back_probs(seg, bundle)?;
    let mean = ProbMap::average(&maps)?;
    let (h, w) = bundle.original_size;
    Ok(mean.resize_to(h, w))
}

/// Per-variant probability maps in the bundle's unrotated frame.
pub fn rotated_back_probs<S: Segmenter + ?Sized>(
    seg: &S,
    bundle: &crate::augment::AugmentedBundle,
) -> Result<Vec<ProbMap>> {
    bundle
        .angles
        .iter()
        .zip(&bundle.variants)
        .map(|(&k, v)| Ok(seg.probs(v)?.rotate(k.inverse())))
        .collect()
}

/// Plain prediction: one forward pass and decoding.
pub fn predict_plain<S: Segmenter + ?Sized>(seg: &S, img: &Image, min_area: usize) -> Result<InstanceLabelMap> {
    Ok(decode_instances(&seg.probs(img)?, min_area))
}

/// Selective test-time augmentation: build a bundle per policy, pick the most
/// rotation-consistent one, aggregate its rotations and decode.
pub fn predict_s3tta<A, S>(
    img: &Image,
    ops: &A,
    seg: &S,
    policies: &[crate::augment::AugmentationPolicy],
    angles: &[RotationAngle],
    min_area: usize,
) -> Result<(InstanceLabelMap, crate::selector::Selection)>
where
    A: crate::augment::Augmenter + ?Sized,
    S: Segmenter + ?Sized,
{
    let bundles = crate::augment::build_bundles(img, ops, policies, angles)?;
    predict_from_bundles(&bundles, seg, min_area)
}

/// The selection and aggregation half of [`predict_s3tta`] for bundles that
/// are already built.
pub fn predict_from_bundles<S: Segmenter + ?Sized>(
    bundles: &[crate::augment::AugmentedBundle],
    seg: &S,
    min_area: usize,
) -> Result<(InstanceLabelMap, crate::selector::Selection)> {
    let selection = crate::selector::select(bundles)?;
    let probs = aggregate_bundle(seg, &bundles[selection.winner])?;
    Ok((decode_instances(&probs, min_area), selection))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn probmap_from_classes(h: usize, w: usize, classes: &[u8]) -> ProbMap {
        let n = h * w;
        let mut data = vec![0.0; 3 * n];
        for (i, &c) in classes.iter().enumerate() {
            data[c as usize * n + i] = 1.0;
        }
        ProbMap::new(h, w, data).unwrap()
    }

    #[test]
    fn forward_rows_sum_to_one_and_is_deterministic() {
        let net = SegNet::<f32>::new(&SegArch::standard(1), 3);
        let img = Image::new(
            1,
            13,
            19,
            (0..13 * 19).map(|i| ((i * 37) % 101) as f32 / 100.0).collect(),
        )
        .unwrap();
        let a = net.forward(&img).unwrap();
        assert_eq!((a.height(), a.width()), (13, 19));
        for i in 0..13 * 19 {
            let s: f32 = (0..3).map(|c| a.class(c)[i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
        assert_eq!(a, net.forward(&img).unwrap());
    }

    #[test]
    fn forward_rejects_tiny_input() {
        let net = SegNet::<f32>::new(&SegArch::standard(1), 3);
        assert!(matches!(
            net.forward(&Image::filled(1, 4, 20, 0.5)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn uniform_prediction_costs_ln3() {
        let p = ProbMap::constant(4, 5, [1.0 / 3.0; 3]);
        let mut raw = vec![0; 20];
        raw[7] = 1;
        let (labels, _) = InstanceLabelMap::from_raw(4, 5, raw).unwrap();
        let l = seg_loss(&p, &labels).unwrap();
        assert!((l - 3f64.ln()).abs() < 1e-6);
    }

    #[test]
    fn one_hot_correct_prediction_costs_nothing() {
        let (labels, _) = InstanceLabelMap::from_raw(3, 3, vec![0, 0, 0, 0, 1, 0, 0, 0, 0]).unwrap();
        let p = probmap_from_classes(3, 3, &labels.class_targets());
        assert!(seg_loss(&p, &labels).unwrap().abs() < 1e-12);
    }

    #[test]
    fn seg_loss_rejects_size_mismatch() {
        let p = ProbMap::constant(4, 5, [1.0 / 3.0; 3]);
        assert!(seg_loss(&p, &InstanceLabelMap::empty(5, 4)).is_err());
    }

    #[test]
    fn relabels_to_contiguous_ids() {
        let (m, changed) = InstanceLabelMap::from_raw(1, 5, vec![0, 7, 7, 3, 9]).unwrap();
        assert!(changed);
        assert_eq!(m.labels(), &[0, 2, 2, 1, 3]);
        assert_eq!(m.count(), 3);
        assert!(InstanceLabelMap::new(1, 2, vec![2, 0]).is_err());
    }

    #[test]
    fn class_targets_mark_inner_boundary() {
        let mut raw = vec![0u32; 25];
        for y in 1..4 {
            for x in 1..4 {
                raw[y * 5 + x] = 1;
            }
        }
        let (m, _) = InstanceLabelMap::from_raw(5, 5, raw).unwrap();
        let t = m.class_targets();
        assert_eq!(t[2 * 5 + 2], CLASS_INTERIOR);
        assert_eq!(t[5 + 1], CLASS_BOUNDARY);
        assert_eq!(t[0], CLASS_BACKGROUND);
        assert_eq!(t.iter().filter(|&&c| c == CLASS_BOUNDARY).count(), 8);
    }

    #[test]
    fn all_background_decodes_to_nothing() {
        let p = ProbMap::constant(6, 6, [0.9, 0.05, 0.05]);
        assert_eq!(decode_instances(&p, 1).count(), 0);
    }

    #[test]
    fn single_blob_covers_its_boundary_ring() {
        // 3x3 interior block inside a one-pixel boundary ring
        let (h, w) = (7, 7);
        let mut classes = vec![CLASS_BACKGROUND; h * w];
        for y in 1..6 {
            for x in 1..6 {
                let ring = y == 1 || y == 5 || x == 1 || x == 5;
                classes[y * w + x] = if ring { CLASS_BOUNDARY } else { CLASS_INTERIOR };
            }
        }
        let m = decode_instances(&probmap_from_classes(h, w, &classes), DEFAULT_MIN_AREA);
        assert_eq!(m.count(), 1);
        assert_eq!(m.areas(), vec![25]);
        for (i, &c) in classes.iter().enumerate() {
            assert_eq!(m.labels()[i] != 0, c != CLASS_BACKGROUND);
        }
    }

    #[test]
    fn touching_blobs_split_along_boundary() {
        // two 3x3 interiors separated by a shared boundary column
        let (h, w) = (5, 9);
        let mut classes = vec![CLASS_BOUNDARY; h * w];
        for y in 1..4 {
            for x in 1..4 {
                classes[y * w + x] = CLASS_INTERIOR;
                classes[y * w + x + 4] = CLASS_INTERIOR;
            }
        }
        let m = decode_instances(&probmap_from_classes(h, w, &classes), 1);
        assert_eq!(m.count(), 2);
        // hand-derived expectation: nearest seed wins; the middle column is
        // equidistant and goes to the left blob, which is earlier in raster order
        let mut want = vec![0u32; h * w];
        for y in 0..h {
            for x in 0..w {
                want[y * w + x] = if x <= 4 { 1 } else { 2 };
            }
        }
        assert_eq!(m.labels(), &want[..]);
    }

    #[test]
    fn small_components_are_removed_and_ids_stay_contiguous() {
        let (h, w) = (6, 12);
        let mut classes = vec![CLASS_BACKGROUND; h * w];
        classes[0] = CLASS_INTERIOR;
        for y in 1..5 {
            for x in 4..8 {
                classes[y * w + x] = CLASS_INTERIOR;
            }
        }
        let m = decode_instances(&probmap_from_classes(h, w, &classes), DEFAULT_MIN_AREA);
        assert_eq!(m.count(), 1);
        assert_eq!(m.get(0, 0), 0);
        assert_eq!(m.get(2, 5), 1);
    }

    #[test]
    fn probmap_resize_and_rotation_keep_normalisation() {
        let net = SegNet::<f32>::new(&SegArch::standard(1), 1);
        let img = Image::new(1, 16, 24, (0..384).map(|i| (i % 7) as f32 / 7.0).collect()).unwrap();
        let p = net.forward(&img).unwrap().rotate(RotationAngle::R90).resize_to(11, 37);
        let n = 11 * 37;
        for i in 0..n {
            let s: f32 = (0..3).map(|c| p.data()[c * n + i]).sum();
            assert!((s - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn label_png_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("l.png");
        let labels: Vec<u32> = (0..40).map(|i| if i % 3 == 0 { 0 } else { 1 + i % 300 }).collect();
        let (m, _) = InstanceLabelMap::from_raw(5, 8, labels).unwrap();
        m.save_png(&path).unwrap();
        let (back, changed) = InstanceLabelMap::load_png(&path).unwrap();
        assert!(!changed);
        assert_eq!(back, m);
    }

    #[test]
    fn checkpoint_round_trip() {
        let net = SegNet::<f32>::new(&SegArch::standard(3), 9);
        let ck = Checkpoint::from_bytes(&net.to_checkpoint().to_bytes()).unwrap();
        assert_eq!(SegNet::from_checkpoint(&ck).unwrap(), net);
    }
}
