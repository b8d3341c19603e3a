//! Scale-style augmentation policies, the style bank, and bundle construction
//! (rotate, then resize, then stylize).

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imgeom::{self, Image, RotationAngle};
use crate::styletx::{PreparedStyle, StyleTransfer};

/// One scale ratio combined with one style, or with no style transfer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentationPolicy {
    pub scale: f64,
    /// Index into the style bank; `None` skips style transfer.
    pub style: Option<usize>,
}

impl AugmentationPolicy {
    pub fn new(scale: f64, style: Option<usize>) -> Self {
        Self { scale, style }
    }

    /// Style index with `-1` standing for "no style".
    pub fn style_code(&self) -> i64 {
        self.style.map_or(-1, |s| s as i64)
    }

    /// Enumeration order: scale ascending, then no-style, then style index.
    pub fn order_cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.scale
            .total_cmp(&other.scale)
            .then(self.style.cmp(&other.style))
    }
}

impl fmt::Display for AugmentationPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "scale={} style={}", self.scale, self.style_code())
    }
}

/// Cartesian product of `scales` with the bank's style indices, plus the
/// no-style option when `include_identity` is set. Scales are sorted and
/// deduplicated.
pub fn enumerate_policies(scales: &[f64], bank_len: usize, include_identity: bool) -> Result<Vec<AugmentationPolicy>> {
    if scales.is_empty() {
        return Err(Error::InvalidArgument("scale set is empty".into()));
    }
    if let Some(bad) = scales.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
        return Err(Error::InvalidArgument(format!("scale {bad} is not a positive ratio")));
    }
    let mut sorted = scales.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    let mut styles: Vec<Option<usize>> = Vec::new();
    if include_identity {
        styles.push(None);
    }
    styles.extend((0..bank_len).map(Some));
    if styles.is_empty() {
        return Err(Error::InvalidArgument(
            "no styles in the bank and the no-style policy is disabled".into(),
        ));
    }
    Ok(sorted
        .iter()
        .flat_map(|&scale| styles.iter().map(move |&style| AugmentationPolicy { scale, style }))
        .collect())
}

/// Ordered style images with identifiers.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct StyleBank {
    entries: Vec<(String, Image)>,
}

pub const BANK_MANIFEST: &str = "manifest.csv";

#[derive(Serialize, Deserialize)]
struct BankRow {
    index: usize,
    id: String,
    file: String,
}

impl StyleBank {
    pub fn new(entries: Vec<(String, Image)>) -> Self {
        Self { entries }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn id(&self, i: usize) -> &str {
        &self.entries[i].0
    }

    pub fn image(&self, i: usize) -> &Image {
        &self.entries[i].1
    }

    pub fn ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(id, _)| id.as_str())
    }

    pub fn images(&self) -> impl Iterator<Item = &Image> {
        self.entries.iter().map(|(_, img)| img)
    }

    /// First `n` entries.
    pub fn truncated(&self, n: usize) -> Self {
        Self {
            entries: self.entries.iter().take(n).cloned().collect(),
        }
    }

    /// Greedy farthest-point sampling over per-layer encoder statistics.
    ///
    /// The first pick is the candidate farthest from the mean descriptor;
    /// each later pick maximises the distance to its nearest already chosen
    /// style. Ties go to the lower candidate index.
    pub fn farthest_point(
        candidates: &[(String, Image)],
        n: usize,
        st: &StyleTransfer<f32>,
    ) -> Result<Self> {
        check_bank_request(candidates.len(), n)?;
        let desc: Vec<Vec<f64>> = candidates
            .iter()
            .map(|(_, img)| style_descriptor(st, img))
            .collect::<Result<_>>()?;
        let dim = desc[0].len();
        let mut centre = vec![0.0; dim];
        for d in &desc {
            for (c, v) in centre.iter_mut().zip(d) {
                *c += v / desc.len() as f64;
            }
        }
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>();
        let argmax = |score: &dyn Fn(usize) -> f64, taken: &[usize]| {
            let mut best: Option<(usize, f64)> = None;
            for i in 0..desc.len() {
                if taken.contains(&i) {
                    continue;
                }
                let s = score(i);
                if best.map_or(true, |(_, b)| s > b) {
                    best = Some((i, s));
                }
            }
            best.expect("candidates remain").0
        };
        let mut chosen = vec![argmax(&|i| dist(&desc[i], &centre), &[])];
        while chosen.len() < n {
            let next = argmax(
                &|i| {
                    chosen
                        .iter()
                        .map(|&j| dist(&desc[i], &desc[j]))
                        .fold(f64::INFINITY, f64::min)
                },
                &chosen,
            );
            chosen.push(next);
        }
        Ok(Self {
            entries: chosen.into_iter().map(|i| candidates[i].clone()).collect(),
        })
    }

    /// Uniform sample without replacement under a fixed seed.
    pub fn random(candidates: &[(String, Image)], n: usize, seed: u64) -> Result<Self> {
        check_bank_request(candidates.len(), n)?;
        let mut idx: Vec<usize> = (0..candidates.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        Ok(Self {
            entries: idx[..n].iter().map(|&i| candidates[i].clone()).collect(),
        })
    }

    /// Writes `<id>.png` per style plus a manifest listing the order. Images
    /// are stored at 8 bits per channel.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join(BANK_MANIFEST))?;
        for (index, (id, img)) in self.entries.iter().enumerate() {
            let file = format!("{id}.png");
            img.save_png(&dir.join(&file))?;
            w.serialize(BankRow {
                index,
                id: id.clone(),
                file,
            })?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest = dir.join(BANK_MANIFEST);
        if !manifest.is_file() {
            return Err(Error::MissingArtifact(format!("{}", manifest.display())));
        }
        let mut rows: Vec<BankRow> = csv::Reader::from_path(&manifest)?
            .deserialize()
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Malformed {
                path: manifest.clone(),
                reason: e.to_string(),
            })?;
        rows.sort_by_key(|r| r.index);
        let entries = rows
            .into_iter()
            .map(|r| Ok((r.id, Image::load_png(&dir.join(&r.file))?)))
            .collect::<Result<_>>()?;
        Ok(Self { entries })
    }
}

fn check_bank_request(available: usize, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::InvalidArgument("style bank size must be positive".into()));
    }
    if n > available {
        return Err(Error::InvalidArgument(format!(
            "asked for {n} styles from {available} candidates"
        )));
    }
    Ok(())
}

/// Concatenated means and deviations of every encoder layer.
pub fn style_descriptor(st: &StyleTransfer<f32>, img: &Image) -> Result<Vec<f64>> {
    let prepared = st.prepare_style(img)?;
    Ok(prepared
        .layer_stats
        .iter()
        .flat_map(|s| s.mean.iter().chain(&s.std).copied())
        .collect())
}

/// Variants of one image under one policy, one per rotation angle.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentedBundle {
    pub policy: AugmentationPolicy,
    pub angles: Vec<RotationAngle>,
    /// `variants[i]` was produced from the input rotated by `angles[i]`.
    pub variants: Vec<Image>,
    pub original_size: (usize, usize),
}

impl AugmentedBundle {
    /// Each variant turned back to the input's orientation.
    pub fn rotated_back(&self) -> Vec<Image> {
        self.angles
            .iter()
            .zip(&self.variants)
            .map(|(&k, v)| imgeom::rotate(v, k.inverse()))
            .collect()
    }

    /// The variant made from the unrotated input, if present.
    pub fn upright(&self) -> Option<&Image> {
        self.angles
            .iter()
            .position(|&k| k == RotationAngle::R0)
            .map(|i| &self.variants[i])
    }
}

/// The three augmentation steps. Rotation and resizing default to the
/// geometry module; implementors supply stylisation.
pub trait Augmenter {
    fn rotate(&self, img: &Image, k: RotationAngle) -> Image {
        imgeom::rotate(img, k)
    }

    fn resize(&self, img: &Image, scale: f64) -> Result<Image> {
        imgeom::resize(img, scale)
    }

    fn stylize(&self, img: &Image, style: usize) -> Result<Image>;

    fn bank_len(&self) -> usize;
}

/// Style transfer network with a prepared bank.
pub struct StyleEngine<'a> {
    pub st: &'a StyleTransfer<f32>,
    pub styles: Vec<PreparedStyle>,
}

impl<'a> StyleEngine<'a> {
    pub fn new(st: &'a StyleTransfer<f32>, bank: &StyleBank) -> Result<Self> {
        let styles = bank.images().map(|img| st.prepare_style(img)).collect::<Result<_>>()?;
        Ok(Self { st, styles })
    }
}

impl Augmenter for StyleEngine<'_> {
    fn stylize(&self, img: &Image, style: usize) -> Result<Image> {
        let prepared = self.styles.get(style).ok_or_else(|| {
            Error::InvalidArgument(format!("style {style} outside a bank of {}", self.styles.len()))
        })?;
        Ok(self.st.stylize(img, prepared)?.0)
    }

    fn bank_len(&self) -> usize {
        self.styles.len()
    }
}

/// Geometry only; any styled policy is an error.
pub struct GeometryOnly;

impl Augmenter for GeometryOnly {
    fn stylize(&self, _img: &Image, style: usize) -> Result<Image> {
        Err(Error::InvalidArgument(format!("no style bank loaded (asked for style {style})")))
    }

    fn bank_len(&self) -> usize {
        0
    }
}

pub(crate) fn check_angles(angles: &[RotationAngle]) -> Result<()> {
    if angles.is_empty() {
        return Err(Error::InvalidArgument("angle set is empty".into()));
    }
    for (i, a) in angles.iter().enumerate() {
        if angles[..i].contains(a) {
            return Err(Error::InvalidArgument(format!("angle {} listed twice", a.degrees())));
        }
    }
    Ok(())
}

/// For each angle: rotate, resize by the policy's scale, then stylize unless
/// the policy has no style.
pub fn apply_policy<A: Augmenter + ?Sized>(
    img: &Image,
    policy: AugmentationPolicy,
    angles: &[RotationAngle],
    ops: &A,
) -> Result<AugmentedBundle> {
    check_angles(angles)?;
    let variants = angles
        .iter()
        .map(|&k| {
            let rotated = ops.rotate(img, k);
            let resized = ops.resize(&rotated, policy.scale)?;
            match policy.style {
                Some(s) => ops.stylize(&resized, s),
                None => Ok(resized),
            }
        })
        .collect::<Result<_>>()?;
    Ok(AugmentedBundle {
        policy,
        angles: angles.to_vec(),
        variants,
        original_size: img.dims(),
    })
}

/// One bundle per policy, in the given order.
pub fn build_bundles<A: Augmenter + ?Sized>(
    img: &Image,
    ops: &A,
    policies: &[AugmentationPolicy],
    angles: &[RotationAngle],
) -> Result<Vec<AugmentedBundle>> {
    policies.iter().map(|&p| apply_policy(img, p, angles, ops)).collect()
}
