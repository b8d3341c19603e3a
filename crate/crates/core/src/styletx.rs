//! AdaIN style transfer: a four-stage convolutional encoder, channel-wise
//! feature renormalisation, a mirrored decoder, and the content/style losses
//! used to train the decoder.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgeom::Image;
use crate::nn::{conv_params, Checkpoint, Graph, ParamSet, Real, Tensor, Var, STATS_EPS};

/// Encoder/decoder shape.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StyleArch {
    pub in_channels: usize,
    /// One entry per encoder stage; stage `i > 0` runs at `1 / 2^i` resolution.
    pub encoder_widths: Vec<usize>,
}

impl StyleArch {
    pub fn standard(in_channels: usize) -> Self {
        Self {
            in_channels,
            encoder_widths: vec![16, 32, 64, 128],
        }
    }

    pub fn depth(&self) -> usize {
        self.encoder_widths.len()
    }

    /// Inputs are reflect-padded to a multiple of this value.
    pub fn size_multiple(&self) -> usize {
        1 << self.depth()
    }

    pub fn deepest_width(&self) -> usize {
        *self.encoder_widths.last().expect("non-empty encoder")
    }
}

/// Reflect padding applied around an image so every pooling stage sees even
/// dimensions.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct Padding {
    pub top: usize,
    pub bottom: usize,
    pub left: usize,
    pub right: usize,
}

impl Padding {
    pub fn to_multiple(h: usize, w: usize, m: usize) -> Self {
        let split = |n: usize| {
            let total = (m - n % m) % m;
            (total / 2, total - total / 2)
        };
        let (top, bottom) = split(h);
        let (left, right) = split(w);
        Self {
            top,
            bottom,
            left,
            right,
        }
    }

    pub fn is_zero(&self) -> bool {
        *self == Self::default()
    }

    pub fn padded_dims(&self, h: usize, w: usize) -> (usize, usize) {
        (h + self.top + self.bottom, w + self.left + self.right)
    }
}

/// Per-channel mean and stabilised standard deviation over spatial positions.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn of<T: Real>(map: &Tensor<T>) -> Self {
        let (c, h, w) = map.chw();
        let n = (h * w) as f64;
        let mut mean = Vec::with_capacity(c);
        let mut std = Vec::with_capacity(c);
        for ch in 0..c {
            let plane = map.channel(ch);
            let m = plane.iter().map(|v| v.to_f64c()).sum::<f64>() / n;
            let var = plane.iter().map(|v| (v.to_f64c() - m).powi(2)).sum::<f64>() / n;
            mean.push(m);
            std.push((var + STATS_EPS * STATS_EPS).sqrt());
        }
        Self { mean, std }
    }

    pub fn channels(&self) -> usize {
        self.mean.len()
    }

    /// `[2, C]` tensor laid out like [`Graph::channel_stats`].
    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        let data = self
            .mean
            .iter()
            .chain(&self.std)
            .map(|&v| T::from_f64c(v))
            .collect();
        Tensor::from_vec(&[2, self.channels()], data)
    }
}

/// Renormalises each content channel to the style channel's mean and
/// deviation: `sigma_s * (x - mu_c) / sigma_c + mu_s`.
pub fn adain<T: Real>(content: &Tensor<T>, style: &FeatureStats) -> Result<Tensor<T>> {
    let (c, h, w) = content.chw();
    if style.channels() != c {
        return Err(Error::ShapeMismatch(format!(
            "adain: content has {c} channels, style has {}",
            style.channels()
        )));
    }
    let cs = FeatureStats::of(content);
    let n = h * w;
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let gain = style.std[ch] / cs.std[ch];
        let (mc, ms) = (cs.mean[ch], style.mean[ch]);
        out.extend(
            content
                .channel(ch)
                .iter()
                .map(|v| T::from_f64c(gain * (v.to_f64c() - mc) + ms)),
        );
    }
    Ok(Tensor::from_vec(&[c, h, w], out))
}

/// Same as [`adain`] with the style given as a feature map.
pub fn adain_maps<T: Real>(content: &Tensor<T>, style: &Tensor<T>) -> Result<Tensor<T>> {
    adain(content, &FeatureStats::of(style))
}

/// Frozen-after-pretraining feature extractor. Stage 1 is conv + ReLU at full
/// resolution; each later stage average-pools by 2 then applies conv + ReLU.
/// The stage outputs are the features used by the style loss.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub arch: StyleArch,
    pub params: ParamSet<T>,
}

impl<T: Real> Encoder<T> {
    pub fn new(arch: &StyleArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let mut ci = arch.in_channels;
        for (i, &co) in arch.encoder_widths.iter().enumerate() {
            conv_params(&mut params, &format!("enc{i}"), ci, co, 3, &mut rng);
            ci = co;
        }
        // centre the [0, 1] input: bias = -0.5 * sum of the kernel taps
        let w = params.get(0).clone();
        let (co0, kk) = (w.dims()[0], w.len() / w.dims()[0]);
        let bias: Vec<T> = (0..co0)
            .map(|o| {
                let s: T = w.data()[o * kk..(o + 1) * kk].iter().copied().sum();
                s * T::from_f64c(-0.5)
            })
            .collect();
        *params.get_mut(1) = Tensor::from_vec(&[co0], bias);
        Self {
            arch: arch.clone(),
            params,
        }
    }

    /// Runs the stages on a padded input already on the graph.
    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], x: Var) -> Vec<Var> {
        let mut feats = Vec::with_capacity(self.arch.depth());
        let mut h = x;
        for i in 0..self.arch.depth() {
            if i > 0 {
                h = g.avg_pool2(h);
            }
            h = g.conv2d(h, p[2 * i], p[2 * i + 1]);
            h = g.relu(h);
            feats.push(h);
        }
        feats
    }

    /// Averages every kernel over its four right-angle rotations, making the
    /// encoder exactly rotation-equivariant. Test helper.
    pub fn symmetrize_rotations(&mut self) {
        for i in 0..self.arch.depth() {
            let w = self.params.get_mut(2 * i);
            let (co, ci) = (w.dims()[0], w.dims()[1]);
            for o in 0..co * ci {
                let k = &mut w.data_mut()[o * 9..(o + 1) * 9];
                let mut acc = [T::zero(); 9];
                for turn in 0..4 {
                    for y in 0..3 {
                        for x in 0..3 {
                            let (mut sy, mut sx) = (y, x);
                            for _ in 0..turn {
                                (sy, sx) = (2 - sx, sy);
                            }
                            acc[y * 3 + x] += k[sy * 3 + sx];
                        }
                    }
                }
                for (d, a) in k.iter_mut().zip(acc) {
                    *d = a * T::from_f64c(0.25);
                }
            }
        }
    }
}

/// Mirror of the encoder: conv + ReLU + 2x upsample per stage, then a final
/// conv with a sigmoid so the image lands in `(0, 1)`.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoder<T> {
    pub arch: StyleArch,
    pub params: ParamSet<T>,
}

impl<T: Real> Decoder<T> {
    pub fn new(arch: &StyleArch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let widths = &arch.encoder_widths;
        for i in (1..widths.len()).rev() {
            conv_params(&mut params, &format!("dec{i}"), widths[i], widths[i - 1], 3, &mut rng);
        }
        conv_params(&mut params, "dec_out", widths[0], arch.in_channels, 3, &mut rng);
        Self {
            arch: arch.clone(),
            params,
        }
    }

    pub fn forward(&self, g: &mut Graph<T>, p: &[Var], feature: Var) -> Var {
        let mut h = feature;
        let ups = self.arch.depth() - 1;
        for i in 0..ups {
            h = g.conv2d(h, p[2 * i], p[2 * i + 1]);
            h = g.relu(h);
            h = g.upsample2(h);
        }
        h = g.conv2d(h, p[2 * ups], p[2 * ups + 1]);
        g.sigmoid(h)
    }
}

/// Encoder features of one image plus the padding used to compute them.
#[derive(Clone, Debug)]
pub struct FeatureMaps<T> {
    pub layers: Vec<Tensor<T>>,
    pub padding: Padding,
}

impl<T: Real> FeatureMaps<T> {
    pub fn deepest(&self) -> &Tensor<T> {
        self.layers.last().expect("at least one layer")
    }
}

/// Style image with its cached per-layer statistics.
#[derive(Clone, Debug)]
pub struct PreparedStyle {
    pub image: Image,
    pub layer_stats: Vec<FeatureStats>,
}

impl PreparedStyle {
    pub fn deepest(&self) -> &FeatureStats {
        self.layer_stats.last().expect("at least one layer")
    }
}

/// Encoder + decoder pair.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleTransfer<T> {
    pub encoder: Encoder<T>,
    pub decoder: Decoder<T>,
}

impl<T: Real> StyleTransfer<T> {
    pub fn new(arch: &StyleArch, seed: u64) -> Self {
        Self {
            encoder: Encoder::new(arch, seed),
            decoder: Decoder::new(arch, seed.wrapping_add(0x5eed)),
        }
    }

    pub fn arch(&self) -> &StyleArch {
        &self.encoder.arch
    }

    pub(crate) fn check_input(&self, img: &Image) -> Result<Padding> {
        let m = self.arch().size_multiple();
        if img.height() < m || img.width() < m {
            return Err(Error::TooSmall {
                height: img.height(),
                width: img.width(),
                min: m,
            });
        }
        if img.channels() != self.arch().in_channels {
            return Err(Error::ShapeMismatch(format!(
                "network expects {} channels, image has {}",
                self.arch().in_channels,
                img.channels()
            )));
        }
        Ok(Padding::to_multiple(img.height(), img.width(), m))
    }

    /// All stage outputs for an image (reflect-padded to the size multiple).
    pub fn encode(&self, img: &Image) -> Result<FeatureMaps<T>> {
        let pad = self.check_input(img)?;
        let x = img.to_tensor::<T>().pad_reflect(pad.top, pad.bottom, pad.left, pad.right);
        Ok(FeatureMaps {
            layers: self.encode_tensor(&x),
            padding: pad,
        })
    }

    pub(crate) fn encode_tensor(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        let mut g = Graph::new();
        let p = self.encoder.params.bind(&mut g, false);
        let xv = g.constant(x.clone());
        let feats = self.encoder.forward(&mut g, &p, xv);
        feats.iter().map(|&f| g.value(f).clone()).collect()
    }

    pub fn prepare_style(&self, style: &Image) -> Result<PreparedStyle> {
        let feats = self.encode(style)?;
        Ok(PreparedStyle {
            image: style.clone(),
            layer_stats: feats.layers.iter().map(FeatureStats::of).collect(),
        })
    }

    /// Decodes a deepest-layer feature and crops the padding away.
    pub fn decode(&self, feature: &Tensor<T>, pad: Padding) -> Image {
        let mut g = Graph::new();
        let p = self.decoder.params.bind(&mut g, false);
        let f = g.constant(feature.clone());
        let out = self.decoder.forward(&mut g, &p, f);
        let full = g.value(out);
        let (_, h, w) = full.chw();
        Image::from_tensor(&full.crop(
            pad.top,
            pad.left,
            h - pad.top - pad.bottom,
            w - pad.left - pad.right,
        ))
    }

    /// AdaIN target for a content image under a style.
    pub fn target(&self, content: &Image, style: &PreparedStyle) -> Result<(Tensor<T>, Padding)> {
        let feats = self.encode(content)?;
        Ok((adain(feats.deepest(), style.deepest())?, feats.padding))
    }

    /// Returns the stylised image and the AdaIN target feature it was decoded from.
    pub fn stylize(&self, content: &Image, style: &PreparedStyle) -> Result<(Image, Tensor<T>)> {
        let (t, pad) = self.target(content, style)?;
        Ok((self.decode(&t, pad), t))
    }

    pub fn stylize_with(&self, content: &Image, style: &Image) -> Result<(Image, Tensor<T>)> {
        let prepared = self.prepare_style(style)?;
        self.stylize(content, &prepared)
    }

    /// Mean squared error between the deepest feature of `stylized` and `t`.
    pub fn content_loss(&self, stylized: &Image, t: &Tensor<T>) -> Result<f64> {
        let feats = self.encode(stylized)?;
        content_distance(feats.deepest(), t)
    }

    /// Sum over layers of the squared mean and deviation mismatches.
    pub fn style_loss(&self, stylized: &Image, style: &Image) -> Result<f64> {
        let a = self.encode(stylized)?;
        let b = self.prepare_style(style)?;
        style_distance(&a.layers, &b.layer_stats)
    }

    /// Encoder stage outputs for an image node of any size, reflect-padded
    /// on the graph first.
    pub fn encode_graph(&self, g: &mut Graph<T>, enc_p: &[Var], img: Var) -> Vec<Var> {
        let (_, h, w) = g.value(img).chw();
        let pad = Padding::to_multiple(h, w, self.arch().size_multiple());
        let x = if pad.is_zero() {
            img
        } else {
            g.pad_reflect(img, pad.top, pad.bottom, pad.left, pad.right)
        };
        self.encoder.forward(g, enc_p, x)
    }

    /// Decoder applied to a deepest-layer feature node, cropped by `pad`.
    pub fn decode_graph(&self, g: &mut Graph<T>, dec_p: &[Var], feature: Var, pad: Padding) -> Var {
        let full = self.decoder.forward(g, dec_p, feature);
        if pad.is_zero() {
            return full;
        }
        let (_, h, w) = g.value(full).chw();
        g.crop(full, pad.top, pad.left, h - pad.top - pad.bottom, w - pad.left - pad.right)
    }

    pub fn cast<U: Real>(&self) -> StyleTransfer<U> {
        StyleTransfer {
            encoder: Encoder {
                arch: self.encoder.arch.clone(),
                params: self.encoder.params.cast(),
            },
            decoder: Decoder {
                arch: self.decoder.arch.clone(),
                params: self.decoder.params.cast(),
            },
        }
    }
}

/// Mean squared difference between two feature maps of equal shape.
pub fn content_distance<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch(format!(
            "content loss: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let s: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to_f64c() - y.to_f64c()).powi(2))
        .sum();
    Ok(s / a.len().max(1) as f64)
}

/// Per layer, the channel-averaged squared difference of means plus that of
/// deviations, summed over layers. A single channel with stats (0.2, 0.1)
/// against (0.5, 0.3) gives 0.3^2 + 0.2^2.
pub fn style_distance<T: Real>(layers: &[Tensor<T>], style: &[FeatureStats]) -> Result<f64> {
    if layers.len() != style.len() {
        return Err(Error::ShapeMismatch(format!(
            "style loss: {} layers vs {} style layers",
            layers.len(),
            style.len()
        )));
    }
    let mut total = 0.0;
    for (map, s) in layers.iter().zip(style) {
        let a = FeatureStats::of(map);
        if a.channels() != s.channels() {
            return Err(Error::ShapeMismatch("style loss: channel mismatch".into()));
        }
        let c = a.channels() as f64;
        let dm: f64 = a.mean.iter().zip(&s.mean).map(|(x, y)| (x - y).powi(2)).sum();
        let ds: f64 = a.std.iter().zip(&s.std).map(|(x, y)| (x - y).powi(2)).sum();
        total += (dm + ds) / c;
    }
    Ok(total)
}

/// Graph form of [`content_distance`] against a fixed target.
pub fn content_loss_graph<T: Real>(g: &mut Graph<T>, deepest: Var, t: &Tensor<T>) -> Var {
    g.mse(deepest, t.clone())
}

/// Graph form of [`style_distance`] against fixed style statistics.
pub fn style_loss_graph<T: Real>(g: &mut Graph<T>, layers: &[Var], style: &[FeatureStats]) -> Var {
    assert_eq!(layers.len(), style.len(), "one style entry per layer");
    let terms: Vec<(Var, T)> = layers
        .iter()
        .zip(style)
        .map(|(&layer, s)| {
            let stats = g.channel_stats(layer);
            let c = T::from_usize(s.channels()).expect("channel count");
            (g.sq_dist(stats, s.to_tensor(), T::one() / c), T::one())
        })
        .collect();
    g.lincomb(&terms)
}

pub const CHECKPOINT_KIND: &str = "styletx";

impl StyleTransfer<f32> {
    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint::new(serde_json::json!({
            "kind": CHECKPOINT_KIND,
            "arch": self.arch(),
        }))
        .with_group("encoder", self.encoder.params.clone())
        .with_group("decoder", self.decoder.params.clone())
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.metadata.get("kind").and_then(|k| k.as_str()) != Some(CHECKPOINT_KIND) {
            return Err(Error::Format("checkpoint is not a style-transfer checkpoint".into()));
        }
        let arch: StyleArch = serde_json::from_value(ck.metadata["arch"].clone())
            .map_err(|e| Error::Format(format!("style architecture: {e}")))?;
        let reference = StyleTransfer::<f32>::new(&arch, 0);
        let take = |name: &str, like: &ParamSet<f32>| -> Result<ParamSet<f32>> {
            let set = ck
                .group(name)
                .ok_or_else(|| Error::Format(format!("missing parameter group {name}")))?;
            check_layout(set, like)?;
            Ok(set.clone())
        };
        Ok(Self {
            encoder: Encoder {
                arch: arch.clone(),
                params: take("encoder", &reference.encoder.params)?,
            },
            decoder: Decoder {
                arch,
                params: take("decoder", &reference.decoder.params)?,
            },
        })
    }
}

pub(crate) fn check_layout(set: &ParamSet<f32>, like: &ParamSet<f32>) -> Result<()> {
    if set.len() != like.len() {
        return Err(Error::Format(format!(
            "expected {} tensors, found {}",
            like.len(),
            set.len()
        )));
    }
    for ((n1, t1), (n2, t2)) in set.iter().zip(like.iter()) {
        if n1 != n2 || t1.dims() != t2.dims() {
            return Err(Error::Format(format!(
                "parameter {n1} {:?} does not match expected {n2} {:?}",
                t1.dims(),
                t2.dims()
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::imgeom::{rotate, RotationAngle};
    use rand::Rng;

    fn random_image(c: usize, h: usize, w: usize, seed: u64) -> Image {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Image::new(c, h, w, (0..c * h * w).map(|_| rng.gen()).collect()).unwrap()
    }

    fn small_arch() -> StyleArch {
        StyleArch {
            in_channels: 1,
            encoder_widths: vec![4, 6, 8, 8],
        }
    }

    #[test]
    fn adain_with_matching_stats_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let content = Tensor::<f64>::from_vec(&[4, 5, 5], (0..100).map(|_| rng.gen::<f64>()).collect());
        let out = adain(&content, &FeatureStats::of(&content)).unwrap();
        for (a, b) in out.data().iter().zip(content.data()) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn adain_with_constant_style_collapses_to_style_mean() {
        // style deviation floors at eps; content deviation is sqrt(2/3 + eps^2)
        let content = Tensor::<f64>::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]);
        let style = Tensor::<f64>::from_vec(&[1, 1, 3], vec![10.0; 3]);
        let out = adain_maps(&content, &style).unwrap();
        let gain = STATS_EPS / (2.0f64 / 3.0 + STATS_EPS * STATS_EPS).sqrt();
        let want = [10.0 - gain, 10.0, 10.0 + gain];
        for (a, b) in out.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
            assert!((a - 10.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adain_rejects_channel_mismatch() {
        let a = Tensor::<f32>::zeros(&[2, 2, 2]);
        let b = Tensor::<f32>::zeros(&[3, 2, 2]);
        assert!(adain_maps(&a, &b).is_err());
    }

    #[test]
    fn encode_is_finite_and_deterministic() {
        let st = StyleTransfer::<f32>::new(&StyleArch::standard(3), 7);
        let zero = Image::filled(3, 16, 16, 0.0);
        let f = st.encode(&zero).unwrap();
        assert_eq!(f.layers.len(), 4);
        assert!(f.layers.iter().all(|l| l.all_finite()));
        let img = random_image(3, 20, 18, 1);
        let a = st.encode(&img).unwrap();
        let b = st.encode(&img).unwrap();
        for (x, y) in a.layers.iter().zip(&b.layers) {
            assert_eq!(x, y);
        }
        // spatial size halves from stage to stage
        let sizes: Vec<_> = a.layers.iter().map(|l| l.chw().1).collect();
        assert_eq!(sizes, vec![32, 16, 8, 4]);
    }

    #[test]
    fn encode_rejects_tiny_images() {
        let st = StyleTransfer::<f32>::new(&StyleArch::standard(1), 7);
        assert!(matches!(
            st.encode(&Image::filled(1, 15, 40, 0.5)),
            Err(Error::TooSmall { .. })
        ));
    }

    #[test]
    fn symmetric_encoder_is_rotation_equivariant() {
        let mut enc = Encoder::<f32>::new(&StyleArch::standard(1), 11);
        enc.symmetrize_rotations();
        let st = StyleTransfer {
            encoder: enc,
            decoder: Decoder::new(&StyleArch::standard(1), 1),
        };
        let img = random_image(1, 32, 32, 5);
        let base = st.encode(&img).unwrap();
        for k in RotationAngle::ALL {
            let rot = st.encode(&rotate(&img, k)).unwrap();
            for (fr, fb) in rot.layers.iter().zip(&base.layers) {
                let (c, h, w) = fb.chw();
                let (data, _, _) = crate::imgeom::rotate_planar(fb.data(), c, h, w, k);
                for (a, b) in fr.data().iter().zip(&data) {
                    assert!((a - b).abs() <= 1e-4, "k={k:?}: {a} vs {b}");
                }
            }
        }
    }

    #[test]
    fn stylize_preserves_shape_and_is_deterministic() {
        let st = StyleTransfer::<f32>::new(&small_arch(), 2);
        let c = random_image(1, 21, 17, 8);
        let (out, t) = st.stylize_with(&c, &c).unwrap();
        assert_eq!(out.dims(), (21, 17));
        assert!(out.data().iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)));
        let (out2, t2) = st.stylize_with(&c, &c).unwrap();
        assert_eq!(out, out2);
        assert_eq!(t, t2);
    }

    #[test]
    fn content_loss_zero_at_own_features_and_delta_squared_under_shift() {
        let st = StyleTransfer::<f32>::new(&small_arch(), 2);
        let img = random_image(1, 16, 16, 9);
        let t = st.encode(&img).unwrap().deepest().clone();
        assert_eq!(st.content_loss(&img, &t).unwrap(), 0.0);
        let delta = 0.25f32;
        let shifted = t.map(|v| v + delta);
        let l = content_distance(&t, &shifted).unwrap();
        assert!((l - (delta as f64).powi(2)).abs() < 1e-9);
    }

    #[test]
    fn style_loss_zero_on_itself() {
        let st = StyleTransfer::<f32>::new(&small_arch(), 2);
        let img = random_image(1, 16, 24, 4);
        assert_eq!(st.style_loss(&img, &img).unwrap(), 0.0);
    }

    #[test]
    fn style_distance_with_identity_encoder_matches_hand_value() {
        // one layer, one channel; stats chosen exactly: mean 0.2 / std 0.1
        // and mean 0.5 / std 0.3 (std built with the eps already removed)
        let build = |mean: f64, std: f64| {
            let s = (std * std - STATS_EPS * STATS_EPS).sqrt();
            Tensor::<f64>::from_vec(&[1, 1, 2], vec![mean - s, mean + s])
        };
        let a = build(0.2, 0.1);
        let b = build(0.5, 0.3);
        let l = style_distance(&[a], &[FeatureStats::of(&b)]).unwrap();
        assert!((l - 0.13).abs() < 1e-12, "{l}");
    }

    #[test]
    fn style_distance_ignores_pixel_order_for_pointwise_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let vals: Vec<f64> = (0..36).map(|_| rng.gen()).collect();
        let mut shuffled = vals.clone();
        shuffled.reverse();
        shuffled.swap(3, 17);
        let pointwise = |v: &[f64]| Tensor::from_vec(&[1, 6, 6], v.iter().map(|x| x * x + 0.1).collect());
        let probe = Tensor::<f64>::from_vec(&[1, 6, 6], (0..36).map(|i| i as f64 / 36.0).collect());
        let s1 = style_distance(&[probe.clone()], &[FeatureStats::of(&pointwise(&vals))]).unwrap();
        let s2 = style_distance(&[probe], &[FeatureStats::of(&pointwise(&shuffled))]).unwrap();
        assert!((s1 - s2).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trip() {
        let st = StyleTransfer::<f32>::new(&StyleArch::standard(3), 4);
        let ck = st.to_checkpoint();
        let back = StyleTransfer::from_checkpoint(&Checkpoint::from_bytes(&ck.to_bytes()).unwrap()).unwrap();
        assert_eq!(back, st);
        assert_eq!(back.encoder.params.digest(), st.encoder.params.digest());
    }
}
