//! Style-transfer pretraining and joint decoder/segmenter training with the
//! consistency selector in the loop.
//!
//! The encoder stays fixed throughout; only decoder and segmenter weights
//! receive updates.

use std::collections::HashMap;
use std::io::Write;
use std::path::PathBuf;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{check_angles, enumerate_policies, AugmentationPolicy, AugmentedBundle, StyleBank};
use crate::error::{Error, Result};
use crate::imgeom::{self, Image, RotationAngle};
use crate::nn::{clip_grad_norm, grad_norm, Adam, Graph, ParamSet, Real, Tensor, Var};
use crate::segnet::SegNet;
use crate::selector::select;
use crate::styletx::{adain, content_loss_graph, style_loss_graph, FeatureStats, Padding, PreparedStyle, StyleTransfer};
use crate::synthdata::Sample;

/// Weights of the content, style and segmentation terms.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub content: f64,
    pub style: f64,
    pub seg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            content: 1.0,
            style: 2.0,
            seg: 5.0,
        }
    }
}

/// `seg * w_seg + (content * w_c + style * w_s)`.
pub fn total_loss(seg: f64, content: f64, style: f64, w: &LossWeights) -> f64 {
    seg * w.seg + (content * w.content + style * w.style)
}

/// How the style bank is drawn from the training images.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BankMethod {
    FarthestPoint,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub seed: u64,
    pub pretrain_lr: f64,
    pub joint_lr: f64,
    pub batch_size: usize,
    pub pretrain_steps: usize,
    pub joint_steps: usize,
    pub scales: Vec<f64>,
    pub style_count: usize,
    pub bank_method: BankMethod,
    pub include_identity: bool,
    /// Rotation angles in degrees; must contain 0.
    pub angles: Vec<u32>,
    pub weights: LossWeights,
    pub min_area: usize,
    pub encoder_widths: Vec<usize>,
    pub seg_base_width: usize,
    pub seg_levels: usize,
    /// Write intermediate checkpoints every this many joint steps (0: never).
    pub checkpoint_every: usize,
    pub checkpoint_dir: Option<PathBuf>,
    /// Cap on the global gradient norm of each optimiser step (0: no cap).
    pub max_grad_norm: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            pretrain_lr: 1e-3,
            joint_lr: 5e-4,
            batch_size: 4,
            pretrain_steps: 500,
            joint_steps: 2000,
            scales: vec![0.7, 1.0, 1.5, 2.0],
            style_count: 3,
            bank_method: BankMethod::FarthestPoint,
            include_identity: false,
            angles: vec![0, 90, 180, 270],
            weights: LossWeights::default(),
            min_area: crate::segnet::DEFAULT_MIN_AREA,
            encoder_widths: vec![16, 32, 64, 128],
            seg_base_width: 16,
            seg_levels: 3,
            checkpoint_every: 0,
            checkpoint_dir: None,
            max_grad_norm: 20.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        for (name, lr) in [("pretrain_lr", self.pretrain_lr), ("joint_lr", self.joint_lr)] {
            if !(lr.is_finite() && lr > 0.0) {
                return bad(format!("{name} must be positive"));
            }
        }
        if !(self.max_grad_norm.is_finite() && self.max_grad_norm >= 0.0) {
            return bad("max_grad_norm must be finite and non-negative".into());
        }
        let w = self.weights;
        if [w.content, w.style, w.seg].iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return bad("loss weights must be finite and non-negative".into());
        }
        if self.encoder_widths.is_empty() || self.encoder_widths.contains(&0) {
            return bad("encoder_widths must be non-empty and positive".into());
        }
        if self.seg_base_width == 0 || self.seg_levels == 0 {
            return bad("segmenter width and levels must be positive".into());
        }
        enumerate_policies(&self.scales, self.style_count, self.include_identity)
            .map_err(|e| Error::Config(e.to_string()))?;
        let angles = self.rotation_angles()?;
        if !angles.contains(&RotationAngle::R0) {
            return bad("angles must include 0".into());
        }
        Ok(())
    }

    pub fn rotation_angles(&self) -> Result<Vec<RotationAngle>> {
        let angles = self
            .angles
            .iter()
            .map(|&d| {
                if d % 90 != 0 || d >= 360 {
                    Err(Error::Config(format!("angle {d} is not one of 0, 90, 180, 270")))
                } else {
                    RotationAngle::new((d / 90) as u8)
                }
            })
            .collect::<Result<Vec<_>>>()?;
        check_angles(&angles).map_err(|e| Error::Config(e.to_string()))?;
        Ok(angles)
    }

    pub fn policies(&self, bank_len: usize) -> Result<Vec<AugmentationPolicy>> {
        enumerate_policies(&self.scales, bank_len, self.include_identity)
    }

    pub fn style_arch(&self, in_channels: usize) -> crate::styletx::StyleArch {
        crate::styletx::StyleArch {
            in_channels,
            encoder_widths: self.encoder_widths.clone(),
        }
    }

    pub fn seg_arch(&self, in_channels: usize) -> crate::segnet::SegArch {
        crate::segnet::SegArch {
            in_channels,
            base_width: self.seg_base_width,
            levels: self.seg_levels,
        }
    }
}

fn check_finite(value: f64, what: &str, step: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::Diverged(format!("{what} became {value} at step {step}")))
    }
}

/// Gradients for every entry of `params` (zeros where no path exists).
fn collect_grads<T: Real>(grads: &crate::nn::Gradients<T>, vars: &[Var], params: &ParamSet<T>) -> Vec<Tensor<T>> {
    vars.iter()
        .enumerate()
        .map(|(i, &v)| {
            grads
                .get(v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(params.get(i).dims()))
        })
        .collect()
}

fn accumulate<T: Real>(acc: &mut Option<Vec<Tensor<T>>>, add: Vec<Tensor<T>>) {
    match acc {
        None => *acc = Some(add),
        Some(a) => {
            for (x, y) in a.iter_mut().zip(&add) {
                x.add_assign(y);
            }
        }
    }
}

fn averaged<T: Real>(acc: Option<Vec<Tensor<T>>>, n: usize) -> Vec<Tensor<T>> {
    let mut v = acc.expect("at least one sample per step");
    let s = T::one() / T::from_usize(n).expect("batch size");
    for t in &mut v {
        t.scale(s);
    }
    v
}

/// Style-transfer loss of one decoded feature, as graph nodes.
pub struct StyleLossNodes {
    pub stylized: Var,
    pub content: Var,
    pub style: Var,
}

/// Decodes `target` on the graph and attaches the content and style losses.
pub fn style_loss_nodes<T: Real>(
    g: &mut Graph<T>,
    st: &StyleTransfer<T>,
    enc_p: &[Var],
    dec_p: &[Var],
    target: &Tensor<T>,
    pad: Padding,
    style: &[FeatureStats],
) -> StyleLossNodes {
    let t = g.constant(target.clone());
    let stylized = st.decode_graph(g, dec_p, t, pad);
    let layers = st.encode_graph(g, enc_p, stylized);
    let content = content_loss_graph(g, *layers.last().expect("layers"), target);
    let style = style_loss_graph(g, &layers, style);
    StyleLossNodes {
        stylized,
        content,
        style,
    }
}

/// One row of the pretraining history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct PretrainRecord {
    pub step: usize,
    pub content: f64,
    pub style: f64,
    pub total: f64,
}

/// Trains the decoder on random (content, style) pairs drawn from `images`.
///
/// Content images are randomly rotated and rescaled with the configured
/// angles and scales so the decoder sees the sizes used later on. Returns one
/// record per step with batch-mean losses.
pub fn pretrain_style(images: &[Image], st: &mut StyleTransfer<f32>, cfg: &TrainConfig) -> Result<Vec<PretrainRecord>> {
    cfg.validate()?;
    if images.len() < 2 {
        return Err(Error::InvalidArgument("pretraining needs at least two images".into()));
    }
    let angles = cfg.rotation_angles()?;
    let mut scales = cfg.scales.clone();
    scales.sort_by(f64::total_cmp);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5052_4554_5241_494e);
    let mut opt = Adam::new(cfg.pretrain_lr);
    let prepared: Vec<PreparedStyle> = images.iter().map(|i| st.prepare_style(i)).collect::<Result<_>>()?;
    let mut history = Vec::with_capacity(cfg.pretrain_steps);
    for step in 0..cfg.pretrain_steps {
        let mut acc = None;
        let (mut lc, mut ls) = (0.0, 0.0);
        for _ in 0..cfg.batch_size {
            let ci = rng.gen_range(0..images.len());
            let si = rng.gen_range(0..images.len());
            let k = angles[rng.gen_range(0..angles.len())];
            let scale = scales[rng.gen_range(0..scales.len())];
            let content = imgeom::resize(&imgeom::rotate(&images[ci], k), scale)?;
            let (target, pad) = st.target(&content, &prepared[si])?;
            let mut g = Graph::new();
            let enc_p = st.encoder.params.bind(&mut g, false);
            let dec_p = st.decoder.params.bind(&mut g, true);
            let nodes = style_loss_nodes(&mut g, st, &enc_p, &dec_p, &target, pad, &prepared[si].layer_stats);
            let w = cfg.weights;
            let loss = g.lincomb(&[(nodes.content, w.content as f32), (nodes.style, w.style as f32)]);
            lc += g.value(nodes.content).item() as f64;
            ls += g.value(nodes.style).item() as f64;
            check_finite(g.value(loss).item() as f64, "pretraining loss", step)?;
            let grads = g.backward(loss);
            accumulate(&mut acc, collect_grads(&grads, &dec_p, &st.decoder.params));
        }
        let mut grads = averaged(acc, cfg.batch_size);
        clip_grad_norm(&mut grads, cfg.max_grad_norm);
        opt.step(&mut st.decoder.params, &grads);
        let b = cfg.batch_size as f64;
        let (content, style) = (lc / b, ls / b);
        history.push(PretrainRecord {
            step,
            content,
            style,
            total: cfg.weights.content * content + cfg.weights.style * style,
        });
        if step % 50 == 0 {
            log::info!("pretrain step {step}: content {content:.4} style {style:.4}");
        }
    }
    Ok(history)
}

/// One row of the joint-training log, one per optimised sample.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct JointRecord {
    pub step: usize,
    pub l_seg: f64,
    pub l_c: f64,
    pub l_s: f64,
    pub l_total: f64,
    pub selected_scale: f64,
    pub selected_style: i64,
    /// Gradient norms of this sample's loss, before any clipping.
    pub dec_grad_norm: f64,
    pub seg_grad_norm: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct JointReport {
    pub records: Vec<JointRecord>,
    pub encoder_digest_before: String,
    pub encoder_digest_after: String,
    /// Number of augmented variants that entered a loss; one per sample.
    pub optimised_variants: usize,
}

/// Frozen-encoder products for one (image, scale, angle): the rotated and
/// resized input, its deepest feature and the padding used.
struct CachedView {
    image: Image,
    deepest: Tensor<f32>,
    pad: Padding,
}

/// Per-image cache of encoder outputs; valid because the encoder never
/// changes during joint training.
struct ViewCache {
    views: HashMap<(usize, usize, usize), CachedView>,
}

impl ViewCache {
    fn get(
        &mut self,
        st: &StyleTransfer<f32>,
        img: &Image,
        key: (usize, usize, usize),
        scale: f64,
        angle: RotationAngle,
    ) -> Result<&CachedView> {
        if !self.views.contains_key(&key) {
            let image = imgeom::resize(&imgeom::rotate(img, angle), scale)?;
            let feats = st.encode(&image)?;
            let pad = feats.padding;
            let deepest = feats.layers.into_iter().last().expect("layers");
            self.views.insert(key, CachedView { image, deepest, pad });
        }
        Ok(&self.views[&key])
    }
}

/// Joint training of decoder and segmenter.
///
/// Each sample builds one bundle per policy with the current decoder, keeps
/// only the selector's winner, and optimises its upright variant under the
/// weighted sum of segmentation, content and style losses. Labels follow the
/// winner's scale by nearest-neighbour resizing. Log rows go to `log` when
/// given.
pub fn joint_train<W: Write>(
    samples: &[Sample],
    st: &mut StyleTransfer<f32>,
    seg: &mut SegNet<f32>,
    bank: &StyleBank,
    cfg: &TrainConfig,
    mut log: Option<&mut csv::Writer<W>>,
) -> Result<JointReport> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("joint training needs at least one sample".into()));
    }
    let angles = cfg.rotation_angles()?;
    let policies = cfg.policies(bank.len())?;
    let mut scales = cfg.scales.clone();
    scales.sort_by(f64::total_cmp);
    scales.dedup();
    let styles: Vec<PreparedStyle> = bank.images().map(|i| st.prepare_style(i)).collect::<Result<_>>()?;
    let digest_before = st.encoder.params.digest();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x4a4f_494e_5454_524e);
    let mut dec_opt = Adam::new(cfg.joint_lr);
    let mut seg_opt = Adam::new(cfg.joint_lr);
    let mut cache = ViewCache { views: HashMap::new() };
    let mut records = Vec::new();
    let mut optimised = 0usize;
    let r0 = angles.iter().position(|&a| a == RotationAngle::R0).expect("validated");
    for step in 0..cfg.joint_steps {
        let (mut dec_acc, mut seg_acc) = (None, None);
        for _ in 0..cfg.batch_size {
            let idx = rng.gen_range(0..samples.len());
            let sample = &samples[idx];
            // candidate bundles with the current decoder
            let mut bundles = Vec::with_capacity(policies.len());
            for &policy in &policies {
                let si = scales.iter().position(|&s| s == policy.scale).expect("policy scale");
                let mut variants = Vec::with_capacity(angles.len());
                for (ai, &angle) in angles.iter().enumerate() {
                    let view = cache.get(st, &sample.image, (idx, si, ai), policy.scale, angle)?;
                    variants.push(match policy.style {
                        None => view.image.clone(),
                        Some(j) => st.decode(&adain(&view.deepest, styles[j].deepest())?, view.pad),
                    });
                }
                bundles.push(AugmentedBundle {
                    policy,
                    angles: angles.clone(),
                    variants,
                    original_size: sample.image.dims(),
                });
            }
            let selection = select(&bundles)?;
            let winner = selection.policy;
            let si = scales.iter().position(|&s| s == winner.scale).expect("policy scale");
            let view = cache.get(st, &sample.image, (idx, si, r0), winner.scale, RotationAngle::R0)?;
            let (h, w) = view.image.dims();
            let labels = sample.labels.resize_nearest(h, w);
            let targets = labels.class_targets();

            let mut g = Graph::new();
            let enc_p = st.encoder.params.bind(&mut g, false);
            let dec_p = st.decoder.params.bind(&mut g, true);
            let seg_p = seg.params.bind(&mut g, true);
            let wts = cfg.weights;
            let (input, style_terms) = match winner.style {
                None => (g.constant(view.image.to_tensor()), None),
                Some(j) => {
                    let target = adain(&view.deepest, styles[j].deepest())?;
                    let nodes = style_loss_nodes(&mut g, st, &enc_p, &dec_p, &target, view.pad, &styles[j].layer_stats);
                    (nodes.stylized, Some((nodes.content, nodes.style)))
                }
            };
            let seg_pad = seg.check_input(&view.image)?;
            let logits = seg.logits_graph(&mut g, &seg_p, input, seg_pad);
            let l_seg = g.softmax_cross_entropy(logits, &targets);
            let mut terms = vec![(l_seg, wts.seg as f32)];
            let (mut lc, mut ls) = (0.0, 0.0);
            if let Some((c, s)) = style_terms {
                terms.push((c, wts.content as f32));
                terms.push((s, wts.style as f32));
                lc = g.value(c).item() as f64;
                ls = g.value(s).item() as f64;
            }
            let loss = g.lincomb(&terms);
            let lseg = g.value(l_seg).item() as f64;
            let ltotal = g.value(loss).item() as f64;
            check_finite(ltotal, "joint loss", step)?;
            let grads = g.backward(loss);
            let dec_grads = collect_grads(&grads, &dec_p, &st.decoder.params);
            let seg_grads = collect_grads(&grads, &seg_p, &seg.params);
            let (dec_norm, seg_norm) = (grad_norm(&dec_grads), grad_norm(&seg_grads));
            accumulate(&mut dec_acc, dec_grads);
            accumulate(&mut seg_acc, seg_grads);
            optimised += 1;
            let rec = JointRecord {
                step,
                l_seg: lseg,
                l_c: lc,
                l_s: ls,
                l_total: ltotal,
                selected_scale: winner.scale,
                selected_style: winner.style_code(),
                dec_grad_norm: dec_norm,
                seg_grad_norm: seg_norm,
            };
            if let Some(w) = log.as_deref_mut() {
                w.serialize(rec)?;
            }
            records.push(rec);
        }
        let mut dec_step = averaged(dec_acc, cfg.batch_size);
        let mut seg_step = averaged(seg_acc, cfg.batch_size);
        clip_grad_norm(&mut dec_step, cfg.max_grad_norm);
        clip_grad_norm(&mut seg_step, cfg.max_grad_norm);
        dec_opt.step(&mut st.decoder.params, &dec_step);
        seg_opt.step(&mut seg.params, &seg_step);
        if step % 50 == 0 {
            let r = records.last().expect("record");
            log::info!(
                "joint step {step}: seg {:.4} content {:.4} style {:.4} picked scale {} style {}",
                r.l_seg,
                r.l_c,
                r.l_s,
                r.selected_scale,
                r.selected_style
            );
        }
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                st.to_checkpoint().save(&dir.join(format!("styletx_step{:06}.ckpt", step + 1)))?;
                seg.to_checkpoint().save(&dir.join(format!("segnet_step{:06}.ckpt", step + 1)))?;
            }
        }
    }
    if let Some(w) = log {
        w.flush()?;
    }
    Ok(JointReport {
        records,
        encoder_digest_before: digest_before,
        encoder_digest_after: st.encoder.params.digest(),
        optimised_variants: optimised,
    })
}

/// Trains a segmenter on the unaugmented training images alone, with the
/// joint stage's step count, batch size and learning rate. This is the
/// reference model for plain prediction. Returns the batch-mean loss per step.
pub fn train_plain_segnet(samples: &[Sample], seg: &mut SegNet<f32>, cfg: &TrainConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::InvalidArgument("segmenter training needs at least one sample".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x504c_4149_4e53_4547);
    let mut opt = Adam::new(cfg.joint_lr);
    let mut history = Vec::with_capacity(cfg.joint_steps);
    for step in 0..cfg.joint_steps {
        let mut acc = None;
        let mut total = 0.0;
        for _ in 0..cfg.batch_size {
            let sample = &samples[rng.gen_range(0..samples.len())];
            let mut g = Graph::new();
            let seg_p = seg.params.bind(&mut g, true);
            let pad = seg.check_input(&sample.image)?;
            let x = g.constant(sample.image.to_tensor());
            let logits = seg.logits_graph(&mut g, &seg_p, x, pad);
            let loss = g.softmax_cross_entropy(logits, &sample.labels.class_targets());
            let value = g.value(loss).item() as f64;
            check_finite(value, "segmenter loss", step)?;
            total += value;
            let grads = g.backward(loss);
            accumulate(&mut acc, collect_grads(&grads, &seg_p, &seg.params));
        }
        let mut grads = averaged(acc, cfg.batch_size);
        clip_grad_norm(&mut grads, cfg.max_grad_norm);
        opt.step(&mut seg.params, &grads);
        history.push(total / cfg.batch_size as f64);
        if step % 50 == 0 {
            log::info!("plain segmenter step {step}: loss {:.4}", history[step]);
        }
    }
    Ok(history)
}
