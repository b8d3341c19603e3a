//! Rotational self-consistency scoring and single-policy selection.

use std::io::Write;

use serde::Serialize;

use crate::augment::{AugmentationPolicy, AugmentedBundle};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConsistencyScore {
    pub policy: AugmentationPolicy,
    /// Mean over unordered angle pairs of the per-pixel, per-channel mean
    /// absolute difference between rotated-back variants.
    pub mae: f64,
}

/// Scores a bundle; needs at least two variants.
pub fn consistency_score(bundle: &AugmentedBundle) -> Result<ConsistencyScore> {
    if bundle.variants.len() < 2 {
        return Err(Error::InvalidArgument(
            "consistency needs at least two rotation variants".into(),
        ));
    }
    let back = bundle.rotated_back();
    let mut total = 0.0;
    let mut pairs = 0usize;
    for i in 0..back.len() {
        for j in i + 1..back.len() {
            total += back[i].mean_abs_diff(&back[j])?;
            pairs += 1;
        }
    }
    Ok(ConsistencyScore {
        policy: bundle.policy,
        mae: total / pairs as f64,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Selection {
    /// Index of the winning bundle in the input list.
    pub winner: usize,
    pub policy: AugmentationPolicy,
    /// One score per input bundle, in input order.
    pub scores: Vec<ConsistencyScore>,
}

/// Picks the bundle with the lowest score. Equal scores go to the policy that
/// comes first in enumeration order, whatever the input order.
pub fn select(bundles: &[AugmentedBundle]) -> Result<Selection> {
    let first = bundles
        .first()
        .ok_or_else(|| Error::InvalidArgument("no bundles to select from".into()))?;
    if let Some(b) = bundles.iter().find(|b| b.angles != first.angles) {
        return Err(Error::InvalidArgument(format!(
            "bundle for {} uses a different angle set",
            b.policy
        )));
    }
    let scores = bundles.iter().map(consistency_score).collect::<Result<Vec<_>>>()?;
    let winner = (0..scores.len())
        .min_by(|&a, &b| {
            scores[a]
                .mae
                .total_cmp(&scores[b].mae)
                .then(scores[a].policy.order_cmp(&scores[b].policy))
        })
        .expect("non-empty");
    Ok(Selection {
        winner,
        policy: scores[winner].policy,
        scores,
    })
}

#[derive(Serialize)]
struct ScoreRow<'a> {
    image_id: &'a str,
    scale: f64,
    style_id: i64,
    mae: f64,
    selected: u8,
}

/// Appends one row per scored policy.
pub fn write_scores<W: Write>(w: &mut csv::Writer<W>, image_id: &str, selection: &Selection) -> Result<()> {
    for (i, s) in selection.scores.iter().enumerate() {
        w.serialize(ScoreRow {
            image_id,
            scale: s.policy.scale,
            style_id: s.policy.style_code(),
            mae: s.mae,
            selected: (i == selection.winner) as u8,
        })?;
    }
    Ok(())
}
