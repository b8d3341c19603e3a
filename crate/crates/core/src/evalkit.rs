//! Instance and semantic overlap metrics, the aggregate-everything TTA
//! baseline, and a principal-component embedding of encoder features.

use std::collections::HashMap;
use std::io::Write;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;

use crate::augment::AugmentedBundle;
use crate::error::{Error, Result};
use crate::imgeom::Image;
use crate::segnet::{decode_instances, rotated_back_probs, InstanceLabelMap, ProbMap, Segmenter};
use crate::styletx::StyleTransfer;

pub const DEFAULT_THRESHOLDS: [f64; 3] = [0.5, 0.6, 0.7];

/// `K_pred x K_gt` intersection-over-union matrix.
pub fn iou_matrix(pred: &InstanceLabelMap, gt: &InstanceLabelMap) -> Result<Vec<Vec<f64>>> {
    if pred.dims() != gt.dims() {
        return Err(Error::ShapeMismatch(format!(
            "prediction {:?} vs ground truth {:?}",
            pred.dims(),
            gt.dims()
        )));
    }
    let (pa, ga) = (pred.areas(), gt.areas());
    let mut inter: HashMap<(u32, u32), usize> = HashMap::new();
    for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
        if p != 0 && g != 0 {
            *inter.entry((p, g)).or_default() += 1;
        }
    }
    let mut m = vec![vec![0.0; ga.len()]; pa.len()];
    for ((p, g), n) in inter {
        let (i, j) = (p as usize - 1, g as usize - 1);
        m[i][j] = n as f64 / (pa[i] + ga[j] - n) as f64;
    }
    Ok(m)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MatchCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

impl MatchCounts {
    /// `2 tp / (2 tp + fp + fn)`, with nothing-versus-nothing scoring 1.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            1.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

/// Size of a maximum one-to-one matching between rows and columns joined
/// where `iou >= tau` (augmenting paths).
pub fn max_matching(iou: &[Vec<f64>], cols: usize, tau: f64) -> usize {
    fn augment(
        r: usize,
        iou: &[Vec<f64>],
        tau: f64,
        seen: &mut [bool],
        owner: &mut [Option<usize>],
    ) -> bool {
        for c in 0..owner.len() {
            if iou[r][c] >= tau && !seen[c] {
                seen[c] = true;
                if owner[c].map_or(true, |o| augment(o, iou, tau, seen, owner)) {
                    owner[c] = Some(r);
                    return true;
                }
            }
        }
        false
    }
    let mut owner = vec![None; cols];
    let mut size = 0;
    for r in 0..iou.len() {
        let mut seen = vec![false; cols];
        if augment(r, iou, tau, &mut seen, &mut owner) {
            size += 1;
        }
    }
    size
}

/// One-to-one matching of predicted to true instances at IoU threshold `tau`.
pub fn match_instances(pred: &InstanceLabelMap, gt: &InstanceLabelMap, tau: f64) -> Result<MatchCounts> {
    let iou = iou_matrix(pred, gt)?;
    let tp = max_matching(&iou, gt.count(), tau);
    Ok(MatchCounts {
        tp,
        fp: pred.count() - tp,
        fn_: gt.count() - tp,
    })
}

pub fn f1_at(pred: &InstanceLabelMap, gt: &InstanceLabelMap, tau: f64) -> Result<f64> {
    Ok(match_instances(pred, gt, tau)?.f1())
}

/// Dice and Jaccard of two binary masks; two empty masks score `(1, 1)`.
pub fn dice_jaccard(a: &[bool], b: &[bool]) -> Result<(f64, f64)> {
    if a.len() != b.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} pixels", a.len(), b.len())));
    }
    let (mut inter, mut na, mut nb) = (0usize, 0usize, 0usize);
    for (&x, &y) in a.iter().zip(b) {
        na += x as usize;
        nb += y as usize;
        inter += (x && y) as usize;
    }
    if na + nb == 0 {
        return Ok((1.0, 1.0));
    }
    let union = na + nb - inter;
    Ok((2.0 * inter as f64 / (na + nb) as f64, inter as f64 / union as f64))
}

/// Mean probability map over every variant of every bundle, each rotated and
/// resized back to the input frame.
pub fn aggregate_all_probs<S: Segmenter + ?Sized>(bundles: &[AugmentedBundle], seg: &S) -> Result<ProbMap> {
    let mut maps = Vec::new();
    for b in bundles {
        let (h, w) = b.original_size;
        for m in rotated_back_probs(seg, b)? {
            maps.push(m.resize_to(h, w));
        }
    }
    ProbMap::average(&maps)
}

/// The aggregate-everything TTA baseline.
pub fn baseline_aggregate_all<S: Segmenter + ?Sized>(
    bundles: &[AugmentedBundle],
    seg: &S,
    min_area: usize,
) -> Result<InstanceLabelMap> {
    Ok(decode_instances(&aggregate_all_probs(bundles, seg)?, min_area))
}

/// Global-average-pooled deepest encoder feature.
pub fn pooled_feature(st: &StyleTransfer<f32>, img: &Image) -> Result<Vec<f64>> {
    let feats = st.encode(img)?;
    let deepest = feats.deepest();
    let (c, h, w) = deepest.chw();
    Ok((0..c)
        .map(|ch| deepest.channel(ch).iter().map(|&v| v as f64).sum::<f64>() / (h * w) as f64)
        .collect())
}

/// Projects row vectors onto their two leading principal axes.
pub fn pca_2d(rows: &[Vec<f64>]) -> Result<Vec<(f64, f64)>> {
    if rows.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "projection needs at least 3 points, got {}",
            rows.len()
        )));
    }
    let d = rows[0].len();
    let n = rows.len();
    let mut mean = vec![0.0; d];
    for r in rows {
        for (m, v) in mean.iter_mut().zip(r) {
            *m += v / n as f64;
        }
    }
    let x = DMatrix::from_fn(n, d, |i, j| rows[i][j] - mean[j]);
    let cov = x.transpose() * &x / n as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let axis = |k: usize| {
        let mut v = eig.eigenvectors.column(order[k]).into_owned();
        // fix the sign so the largest-magnitude component is positive
        let imax = v.iamax();
        if v[imax] < 0.0 {
            v = -v;
        }
        v
    };
    let (a0, a1) = (axis(0), axis(1.min(d - 1)));
    let p0 = &x * a0;
    let p1 = &x * a1;
    Ok((0..n).map(|i| (p0[i], if d > 1 { p1[i] } else { 0.0 })).collect())
}

/// Encoder embedding of images projected to 2-D.
pub fn embed_project(images: &[Image], st: &StyleTransfer<f32>) -> Result<Vec<(f64, f64)>> {
    if images.len() < 3 {
        return Err(Error::InvalidArgument(format!(
            "embedding needs at least 3 images, got {}",
            images.len()
        )));
    }
    let rows = images.iter().map(|img| pooled_feature(st, img)).collect::<Result<Vec<_>>>()?;
    pca_2d(&rows)
}

/// Mean Euclidean distance over all unordered pairs.
pub fn mean_pairwise_distance(points: &[(f64, f64)]) -> f64 {
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            total += ((points[i].0 - points[j].0).powi(2) + (points[i].1 - points[j].1).powi(2)).sqrt();
            pairs += 1;
        }
    }
    if pairs == 0 {
        0.0
    } else {
        total / pairs as f64
    }
}

/// Per-image metrics for one method.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub method: String,
    /// `(tau, f1)` per threshold.
    pub f1: Vec<(f64, f64)>,
    pub dice: f64,
    pub jaccard: f64,
}

impl ImageMetrics {
    pub fn compute(
        image_id: &str,
        method: &str,
        pred: &InstanceLabelMap,
        gt: &InstanceLabelMap,
        thresholds: &[f64],
    ) -> Result<Self> {
        let f1 = thresholds
            .iter()
            .map(|&t| Ok((t, f1_at(pred, gt, t)?)))
            .collect::<Result<_>>()?;
        let (dice, jaccard) = dice_jaccard(&pred.foreground(), &gt.foreground())?;
        Ok(Self {
            image_id: image_id.into(),
            method: method.into(),
            f1,
            dice,
            jaccard,
        })
    }

    pub fn f1_at(&self, tau: f64) -> Option<f64> {
        self.f1.iter().find(|(t, _)| (*t - tau).abs() < 1e-12).map(|&(_, f)| f)
    }
}

/// Method-level means, in the order methods first appear.
pub fn summarize(rows: &[ImageMetrics]) -> Vec<ImageMetrics> {
    let mut methods: Vec<&str> = Vec::new();
    for r in rows {
        if !methods.contains(&r.method.as_str()) {
            methods.push(&r.method);
        }
    }
    methods
        .into_iter()
        .map(|m| {
            let sel: Vec<&ImageMetrics> = rows.iter().filter(|r| r.method == m).collect();
            let n = sel.len() as f64;
            let f1 = sel[0]
                .f1
                .iter()
                .enumerate()
                .map(|(k, &(t, _))| (t, sel.iter().map(|r| r.f1[k].1).sum::<f64>() / n))
                .collect();
            ImageMetrics {
                image_id: "mean".into(),
                method: m.into(),
                f1,
                dice: sel.iter().map(|r| r.dice).sum::<f64>() / n,
                jaccard: sel.iter().map(|r| r.jaccard).sum::<f64>() / n,
            }
        })
        .collect()
}

#[derive(Serialize)]
struct ReportRow<'a> {
    image_id: &'a str,
    method: &'a str,
    tau: String,
    f1: String,
    dice: String,
    jaccard: String,
}

fn pct(v: f64) -> String {
    format!("{:.1}", 100.0 * v)
}

/// Percentages with one decimal: one row per image, method and threshold,
/// followed by the per-method mean rows (image id `mean`).
pub fn write_report<W: Write>(w: W, rows: &[ImageMetrics]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    let summary = summarize(rows);
    for r in rows.iter().chain(&summary) {
        for &(tau, f1) in &r.f1 {
            out.serialize(ReportRow {
                image_id: &r.image_id,
                method: &r.method,
                tau: format!("{tau:.1}"),
                f1: pct(f1),
                dice: pct(r.dice),
                jaccard: pct(r.jaccard),
            })?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EmbeddingRow<'a> {
    image_id: &'a str,
    set: &'a str,
    x: f64,
    y: f64,
}

/// `(image_id, set, x, y)` rows.
pub fn write_embedding<W: Write>(w: W, rows: &[(String, String, (f64, f64))]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    for (id, set, (x, y)) in rows {
        out.serialize(EmbeddingRow {
            image_id: id,
            set,
            x: *x,
            y: *y,
        })?;
    }
    out.flush()?;
    Ok(())
}
