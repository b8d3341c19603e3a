//! End-to-end pipeline shared by the command line and the acceptance run:
//! synthetic split, style bank, pretraining, joint training, and evaluation
//! of plain prediction against both test-time augmentation strategies.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::augment::{build_bundles, StyleBank, StyleEngine};
use crate::error::Result;
use crate::evalkit::{baseline_aggregate_all, embed_project, mean_pairwise_distance, ImageMetrics};
use crate::imgeom::Image;
use crate::nn::Checkpoint;
use crate::segnet::{predict_from_bundles, predict_plain, SegNet};
use crate::selector::Selection;
use crate::styletx::StyleTransfer;
use crate::synthdata::{make_split, DomainSpec, Sample};
use crate::trainer::{joint_train, pretrain_style, train_plain_segnet, BankMethod, JointReport, PretrainRecord, TrainConfig};

pub const METHOD_BASELINE: &str = "baseline";
pub const METHOD_AGGREGATE_ALL: &str = "aggregate_all";
pub const METHOD_S3TTA: &str = "s3tta";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub train_domain: DomainSpec,
    pub test_domain: DomainSpec,
    pub n_train: usize,
    pub n_test: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            train_domain: DomainSpec::cells_a(),
            test_domain: DomainSpec::cells_b(),
            n_train: 200,
            n_test: 50,
        }
    }
}

/// Style bank drawn from training images with the configured method.
pub fn build_bank(train: &[Sample], st: &StyleTransfer<f32>, cfg: &TrainConfig) -> Result<StyleBank> {
    let candidates: Vec<(String, Image)> = train
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("train{i:04}"), s.image.clone()))
        .collect();
    match cfg.bank_method {
        BankMethod::FarthestPoint => StyleBank::farthest_point(&candidates, cfg.style_count, st),
        BankMethod::Random => StyleBank::random(&candidates, cfg.style_count, cfg.seed),
    }
}

/// Trained models plus their training histories.
pub struct Trained {
    pub st: StyleTransfer<f32>,
    pub seg: SegNet<f32>,
    /// Segmenter trained on unaugmented images only, used for plain prediction.
    pub plain: SegNet<f32>,
    pub bank: StyleBank,
    pub pretrain: Vec<PretrainRecord>,
    pub joint: JointReport,
}

/// Builds the bank, pretrains style transfer, trains jointly, and trains the
/// plain reference segmenter from the same initialisation.
pub fn train_models(train: &[Sample], cfg: &TrainConfig, joint_log: Option<&mut csv::Writer<std::fs::File>>) -> Result<Trained> {
    let channels = train
        .first()
        .map(|s| s.image.channels())
        .ok_or_else(|| crate::Error::InvalidArgument("empty training set".into()))?;
    let st = StyleTransfer::<f32>::new(&cfg.style_arch(channels), cfg.seed);
    train_from(train, st, true, cfg, joint_log)
}

/// [`train_models`] starting from a given style-transfer network, which is
/// pretrained first only when `pretrain` is set.
pub fn train_from(
    train: &[Sample],
    mut st: StyleTransfer<f32>,
    pretrain: bool,
    cfg: &TrainConfig,
    joint_log: Option<&mut csv::Writer<std::fs::File>>,
) -> Result<Trained> {
    let channels = train
        .first()
        .map(|s| s.image.channels())
        .ok_or_else(|| crate::Error::InvalidArgument("empty training set".into()))?;
    if st.arch().in_channels != channels {
        return Err(crate::Error::ShapeMismatch(format!(
            "style transfer expects {} channels, training images have {channels}",
            st.arch().in_channels
        )));
    }
    let bank = build_bank(train, &st, cfg)?;
    let pretrain = if pretrain {
        let images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
        pretrain_style(&images, &mut st, cfg)?
    } else {
        Vec::new()
    };
    let mut seg = SegNet::<f32>::new(&cfg.seg_arch(channels), cfg.seed.wrapping_add(0x5e9));
    let mut plain = seg.clone();
    train_plain_segnet(train, &mut plain, cfg)?;
    let joint = joint_train(train, &mut st, &mut seg, &bank, cfg, joint_log)?;
    Ok(Trained {
        st,
        seg,
        plain,
        bank,
        pretrain,
        joint,
    })
}

/// Per-image metrics for the three methods plus the selector's decisions.
pub struct Evaluation {
    pub metrics: Vec<ImageMetrics>,
    pub selections: Vec<(String, Selection)>,
}

impl Evaluation {
    pub fn mean_f1(&self, method: &str, tau: f64) -> f64 {
        let v: Vec<f64> = self
            .metrics
            .iter()
            .filter(|m| m.method == method)
            .filter_map(|m| m.f1_at(tau))
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    }

    /// Share of images whose winning policy has the given scale.
    pub fn scale_share(&self, scale: f64) -> f64 {
        let hits = self.selections.iter().filter(|(_, s)| s.policy.scale == scale).count();
        hits as f64 / self.selections.len().max(1) as f64
    }
}

/// Evaluates plain prediction with `plain`, and aggregate-all TTA and
/// selective TTA with `seg`, on `(id, sample)` pairs. Bundles are built once
/// per image and shared.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    test: &[(String, Sample)],
    st: &StyleTransfer<f32>,
    seg: &SegNet<f32>,
    plain: &SegNet<f32>,
    bank: &StyleBank,
    cfg: &TrainConfig,
    thresholds: &[f64],
) -> Result<Evaluation> {
    let engine = StyleEngine::new(st, bank)?;
    let policies = cfg.policies(bank.len())?;
    let angles = cfg.rotation_angles()?;
    let mut metrics = Vec::new();
    let mut selections = Vec::new();
    for (id, sample) in test {
        let base = predict_plain(plain, &sample.image, cfg.min_area)?;
        let bundles = build_bundles(&sample.image, &engine, &policies, &angles)?;
        let all = baseline_aggregate_all(&bundles, seg, cfg.min_area)?;
        let (ours, selection) = predict_from_bundles(&bundles, seg, cfg.min_area)?;
        for (method, pred) in [(METHOD_BASELINE, &base), (METHOD_AGGREGATE_ALL, &all), (METHOD_S3TTA, &ours)] {
            metrics.push(ImageMetrics::compute(id, method, pred, &sample.labels, thresholds)?);
        }
        selections.push((id.clone(), selection));
    }
    Ok(Evaluation { metrics, selections })
}

/// Test samples tagged with sequential ids.
pub fn tag(samples: Vec<Sample>, prefix: &str) -> Vec<(String, Sample)> {
    samples
        .into_iter()
        .enumerate()
        .map(|(i, s)| (format!("{prefix}{i:04}"), s))
        .collect()
}

/// Generates the split described by `data`.
pub fn make_data(data: &DataConfig, seed: u64) -> Result<(Vec<Sample>, Vec<Sample>)> {
    let split = make_split(&data.train_domain, &data.test_domain, data.n_train, data.n_test, seed)?;
    Ok((split.train, split.test))
}

pub const STYLETX_FILE: &str = "styletx.ckpt";
pub const SEGNET_FILE: &str = "segnet.ckpt";
pub const BASELINE_SEGNET_FILE: &str = "baseline_segnet.ckpt";
pub const BANK_DIR: &str = "bank";
pub const TRAIN_CONFIG_FILE: &str = "train.toml";

/// The artifacts needed for prediction, with the configuration they were
/// trained under.
pub struct Models {
    pub st: StyleTransfer<f32>,
    pub seg: SegNet<f32>,
    pub plain: SegNet<f32>,
    pub bank: StyleBank,
    pub cfg: TrainConfig,
}

impl Trained {
    pub fn models(&self, cfg: &TrainConfig) -> Models {
        Models {
            st: self.st.clone(),
            seg: self.seg.clone(),
            plain: self.plain.clone(),
            bank: self.bank.clone(),
            cfg: cfg.clone(),
        }
    }
}

impl Models {
    /// Writes checkpoints and the style bank into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        self.st.to_checkpoint().save(&dir.join(STYLETX_FILE))?;
        self.seg.to_checkpoint().save(&dir.join(SEGNET_FILE))?;
        self.plain.to_checkpoint().save(&dir.join(BASELINE_SEGNET_FILE))?;
        let cfg = TrainConfig {
            checkpoint_dir: None,
            ..self.cfg.clone()
        };
        let text = toml::to_string(&cfg).map_err(|e| crate::Error::Config(e.to_string()))?;
        std::fs::write(dir.join(TRAIN_CONFIG_FILE), text)?;
        self.bank.save(&dir.join(BANK_DIR))
    }

    /// Loads a directory written by [`Models::save`]. A missing
    /// `train.toml` falls back to the default configuration.
    pub fn load(dir: &Path) -> Result<Self> {
        let cfg_path = dir.join(TRAIN_CONFIG_FILE);
        let cfg = if cfg_path.is_file() {
            let text = std::fs::read_to_string(&cfg_path)?;
            toml::from_str(&text).map_err(|e| crate::Error::Config(format!("{}: {e}", cfg_path.display())))?
        } else {
            TrainConfig::default()
        };
        let models = Self {
            st: StyleTransfer::from_checkpoint(&Checkpoint::load(&dir.join(STYLETX_FILE))?)?,
            seg: SegNet::from_checkpoint(&Checkpoint::load(&dir.join(SEGNET_FILE))?)?,
            plain: SegNet::from_checkpoint(&Checkpoint::load(&dir.join(BASELINE_SEGNET_FILE))?)?,
            bank: StyleBank::load(&dir.join(BANK_DIR))?,
            cfg,
        };
        let channels = models.st.arch().in_channels;
        if models.seg.arch.in_channels != channels || models.plain.arch.in_channels != channels {
            return Err(crate::Error::ShapeMismatch(format!(
                "{}: checkpoints disagree on input channels",
                dir.display()
            )));
        }
        Ok(models)
    }

    pub fn evaluate(&self, test: &[(String, Sample)], cfg: &TrainConfig, thresholds: &[f64]) -> Result<Evaluation> {
        evaluate(test, &self.st, &self.seg, &self.plain, &self.bank, cfg, thresholds)
    }
}

/// Embedding rows `(image_id, set, point)` plus the spread of each set.
pub struct EmbeddingResult {
    pub rows: Vec<(String, String, (f64, f64))>,
    pub original_spread: f64,
    pub stylized_spread: f64,
}

pub const SET_ORIGINAL: &str = "original";
pub const SET_STYLIZED: &str = "stylized";

/// Projects the corpus and its renderings in every bank style into one 2-D
/// space and measures how spread out each set is.
pub fn embedding_experiment(corpus: &[(String, Image)], st: &StyleTransfer<f32>, bank: &StyleBank) -> Result<EmbeddingResult> {
    let styles = bank.images().map(|i| st.prepare_style(i)).collect::<Result<Vec<_>>>()?;
    let mut ids = Vec::new();
    let mut images = Vec::new();
    for (id, img) in corpus {
        ids.push((id.clone(), SET_ORIGINAL.to_string()));
        images.push(img.clone());
    }
    for (id, img) in corpus {
        for (j, style) in styles.iter().enumerate() {
            ids.push((format!("{id}@{}", bank.id(j)), SET_STYLIZED.to_string()));
            images.push(st.stylize(img, style)?.0);
        }
    }
    let points = embed_project(&images, st)?;
    let spread = |set: &str| {
        let pts: Vec<(f64, f64)> = ids.iter().zip(&points).filter(|((_, s), _)| s == set).map(|(_, &p)| p).collect();
        mean_pairwise_distance(&pts)
    };
    let (original_spread, stylized_spread) = (spread(SET_ORIGINAL), spread(SET_STYLIZED));
    let rows = ids.into_iter().zip(points).map(|((id, set), p)| (id, set, p)).collect();
    Ok(EmbeddingResult {
        rows,
        original_spread,
        stylized_spread,
    })
}

/// Scale sets and style counts of the ablation grid.
pub const ABLATION_SCALES: [&[f64]; 4] = [&[1.0], &[1.0, 2.0], &[1.0, 1.5, 2.0], &[0.7, 1.0, 1.5, 2.0]];
pub const ABLATION_STYLES: [usize; 2] = [1, 3];

/// One cell of the ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub style_count: usize,
    pub scales: Vec<f64>,
    /// Mean selective-TTA F1 per threshold.
    pub f1: Vec<(f64, f64)>,
}

/// Retrains and evaluates selective TTA for every grid cell.
pub fn ablate(train: &[Sample], test: &[(String, Sample)], base: &TrainConfig, thresholds: &[f64]) -> Result<Vec<AblationRow>> {
    let mut rows = Vec::new();
    for &style_count in &ABLATION_STYLES {
        for scales in ABLATION_SCALES {
            let cfg = TrainConfig {
                scales: scales.to_vec(),
                style_count,
                ..base.clone()
            };
            log::info!("ablation cell: {style_count} styles, scales {scales:?}");
            let trained = train_models(train, &cfg, None)?;
            let ev = trained.models(&cfg).evaluate(test, &cfg, thresholds)?;
            rows.push(AblationRow {
                style_count,
                scales: scales.to_vec(),
                f1: thresholds.iter().map(|&t| (t, ev.mean_f1(METHOD_S3TTA, t))).collect(),
            });
        }
    }
    Ok(rows)
}

/// Writes the ablation table: one row per cell, F1 in percent per threshold.
pub fn write_ablation<W: std::io::Write>(w: W, rows: &[AblationRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["style_count".to_string(), "scales".to_string()];
    if let Some(first) = rows.first() {
        header.extend(first.f1.iter().map(|(t, _)| format!("f1@{t}")));
    }
    w.write_record(&header)?;
    for r in rows {
        let mut rec = vec![
            r.style_count.to_string(),
            r.scales.iter().map(|s| s.to_string()).collect::<Vec<_>>().join(";"),
        ];
        rec.extend(r.f1.iter().map(|(_, f)| format!("{:.1}", 100.0 * f)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}
