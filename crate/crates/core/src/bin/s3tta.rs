//! `s3tta` command line: data generation, training, prediction, evaluation,
//! the ablation sweep and the embedding plot.
//!
//! Experiment settings come from a TOML file; flags only name paths, the
//! seed and the command. Each run writes into `<out>/<command>/<run-id>/`
//! together with the resolved configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use s3tta_core::augment::StyleEngine;
use s3tta_core::evalkit::{summarize, write_embedding, write_report, ImageMetrics, DEFAULT_THRESHOLDS};
use s3tta_core::experiment::{
    ablate, build_bank, embedding_experiment, make_data, tag, train_from, write_ablation, DataConfig, EmbeddingResult,
    Models, METHOD_AGGREGATE_ALL, METHOD_BASELINE, METHOD_S3TTA, SET_ORIGINAL,
};
use s3tta_core::imgeom::Image;
use s3tta_core::nn::Checkpoint;
use s3tta_core::segnet::{predict_plain, predict_s3tta, InstanceLabelMap};
use s3tta_core::selector::write_scores;
use s3tta_core::styletx::StyleTransfer;
use s3tta_core::synthdata::{load_dataset, save_dataset, DatasetEntry, Sample};
use s3tta_core::trainer::{pretrain_style, TrainConfig};
use s3tta_core::{Error, Result};

const EXIT_USAGE: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_MISSING: u8 = 4;
const EXIT_RUNTIME: u8 = 5;

const CONFIG_FILE: &str = "config.toml";

#[derive(Parser)]
#[command(name = "s3tta", version, about = "Scale-style selective test-time augmentation", arg_required_else_help = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic train/test dataset.
    GenData(Common),
    /// Pretrain the style-transfer decoder and build the style bank.
    PretrainSt {
        #[command(flatten)]
        common: Common,
        /// Dataset directory; generated from the config when absent.
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Jointly train decoder and segmenter, plus the plain baseline segmenter.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Pretrained style-transfer checkpoint; pretraining runs when absent.
        #[arg(long)]
        styletx: Option<PathBuf>,
    },
    /// Predict instance labels for one image or a directory of images.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train`.
        #[arg(long)]
        models: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Score predictions against ground truth, or run all methods on a test set.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long, conflicts_with_all = ["pred", "gt"])]
        models: Option<PathBuf>,
        #[arg(long, requires = "models")]
        data: Option<PathBuf>,
        /// Directory of predicted label maps.
        #[arg(long, requires = "gt")]
        pred: Option<PathBuf>,
        /// Directory of ground-truth label maps.
        #[arg(long, requires = "pred")]
        gt: Option<PathBuf>,
    },
    /// Retrain and evaluate over the scale-set by style-count grid.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Project original and stylized images into a 2-D feature embedding.
    VisualizeEmbedding {
        #[command(flatten)]
        common: Common,
        /// Directory written by `train` or `pretrain-st`; pretrains when absent.
        #[arg(long)]
        models: Option<PathBuf>,
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML experiment configuration.
    #[arg(long)]
    config: PathBuf,
    /// Output root; results go to `<out>/<command>/<run-id>/`.
    #[arg(long, default_value = "runs")]
    out: PathBuf,
    /// Overrides `train.seed`.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Method {
    Baseline,
    AggregateAll,
    S3tta,
}

impl Method {
    fn name(self) -> &'static str {
        match self {
            Method::Baseline => METHOD_BASELINE,
            Method::AggregateAll => METHOD_AGGREGATE_ALL,
            Method::S3tta => METHOD_S3TTA,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
struct RunConfig {
    method: Method,
    thresholds: Vec<f64>,
    data: DataConfig,
    train: TrainConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::S3tta,
            thresholds: DEFAULT_THRESHOLDS.to_vec(),
            data: DataConfig::default(),
            train: TrainConfig::default(),
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = fs::read_to_string(&common.config)
        .map_err(|e| Error::Config(format!("{}: {e}", common.config.display())))?;
    let mut cfg: RunConfig =
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", common.config.display())))?;
    if let Some(seed) = common.seed {
        cfg.train.seed = seed;
    }
    cfg.train.validate().map_err(|e| Error::Config(e.to_string()))?;
    cfg.data.train_domain.validate().map_err(|e| Error::Config(e.to_string()))?;
    cfg.data.test_domain.validate().map_err(|e| Error::Config(e.to_string()))?;
    if cfg.thresholds.is_empty() || cfg.thresholds.iter().any(|t| !(0.0..=1.0).contains(t)) {
        return Err(Error::Config("thresholds must be a non-empty list in [0, 1]".into()));
    }
    Ok(cfg)
}

/// A run directory with its resolved configuration written.
struct Run {
    dir: PathBuf,
    cfg: RunConfig,
}

impl Run {
    /// The run id combines the seed with a hash of the resolved config and of
    /// every input path, so identical invocations land in the same place.
    fn start(command: &str, common: &Common, inputs: &[Option<&Path>]) -> Result<Self> {
        let cfg = load_config(common)?;
        let resolved = toml::to_string(&cfg).map_err(|e| Error::Config(e.to_string()))?;
        let mut h = Sha256::new();
        h.update(command.as_bytes());
        h.update(resolved.as_bytes());
        for p in inputs {
            h.update(p.map_or(String::new(), |p| p.display().to_string()).as_bytes());
            h.update([0]);
        }
        let id = format!("s{}-{}", cfg.train.seed, &hex::encode(h.finalize())[..12]);
        let dir = common.out.join(command).join(id);
        fs::create_dir_all(&dir)?;
        fs::write(dir.join(CONFIG_FILE), resolved)?;
        log::info!("{command}: writing to {}", dir.display());
        Ok(Self { dir, cfg })
    }

    fn train_cfg(&self) -> TrainConfig {
        let mut t = self.cfg.train.clone();
        if t.checkpoint_every > 0 && t.checkpoint_dir.is_none() {
            t.checkpoint_dir = Some(self.dir.join("checkpoints"));
        }
        t
    }

    fn csv(&self, name: &str) -> Result<csv::Writer<fs::File>> {
        Ok(csv::Writer::from_path(self.dir.join(name))?)
    }

    fn file(&self, name: &str) -> Result<fs::File> {
        Ok(fs::File::create(self.dir.join(name))?)
    }
}

fn require_dir(path: &Path) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::MissingArtifact(format!("{} is not a directory", path.display())))
    }
}

/// Train and test samples from a dataset directory, or generated from the
/// config. Untagged datasets serve every entry to both roles.
fn dataset(data: Option<&Path>, cfg: &RunConfig) -> Result<(Vec<Sample>, Vec<(String, Sample)>)> {
    let Some(dir) = data else {
        let (train, test) = make_data(&cfg.data, cfg.train.seed)?;
        return Ok((train, tag(test, "test")));
    };
    require_dir(dir)?;
    let entries = load_dataset(dir)?;
    if entries.is_empty() {
        return Err(Error::MissingArtifact(format!("no images found in {}", dir.display())));
    }
    let tagged = entries.iter().any(|e| !e.split.is_empty());
    let pick = |split: &str| -> Vec<&DatasetEntry> {
        entries.iter().filter(|e| !tagged || e.split == split).collect()
    };
    let train: Vec<Sample> = pick("train").into_iter().map(|e| e.sample.clone()).collect();
    let test = pick("test").into_iter().map(|e| (e.id.clone(), e.sample.clone())).collect();
    Ok((train, test))
}

fn gen_data(common: &Common) -> Result<()> {
    let run = Run::start("gen-data", common, &[])?;
    let (train, test) = make_data(&run.cfg.data, run.cfg.train.seed)?;
    let mut entries = Vec::with_capacity(train.len() + test.len());
    for (split, domain, samples) in [("train", "source", train), ("test", "target", test)] {
        for (i, sample) in samples.into_iter().enumerate() {
            entries.push(DatasetEntry {
                id: format!("{split}{i:04}"),
                split: split.into(),
                domain: domain.into(),
                sample,
            });
        }
    }
    save_dataset(&run.dir.join("dataset"), &entries)?;
    println!("{}", run.dir.display());
    Ok(())
}

fn pretrain_st(common: &Common, data: Option<&Path>) -> Result<()> {
    let run = Run::start("pretrain-st", common, &[data])?;
    let cfg = run.train_cfg();
    let (train, _) = dataset(data, &run.cfg)?;
    let channels = train[0].image.channels();
    let mut st = StyleTransfer::<f32>::new(&cfg.style_arch(channels), cfg.seed);
    let bank = build_bank(&train, &st, &cfg)?;
    let images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
    let history = pretrain_style(&images, &mut st, &cfg)?;
    let mut log = run.csv("pretrain_log.csv")?;
    for rec in &history {
        log.serialize(rec)?;
    }
    log.flush()?;
    st.to_checkpoint().save(&run.dir.join(s3tta_core::experiment::STYLETX_FILE))?;
    bank.save(&run.dir.join(s3tta_core::experiment::BANK_DIR))?;
    println!("{}", run.dir.display());
    Ok(())
}

fn train(common: &Common, data: Option<&Path>, styletx: Option<&Path>) -> Result<()> {
    let run = Run::start("train", common, &[data, styletx])?;
    let cfg = run.train_cfg();
    let (train, _) = dataset(data, &run.cfg)?;
    let (st, pretrain) = match styletx {
        Some(path) => (StyleTransfer::from_checkpoint(&Checkpoint::load(path)?)?, false),
        None => (StyleTransfer::new(&cfg.style_arch(train[0].image.channels()), cfg.seed), true),
    };
    let mut joint_log = run.csv("joint_log.csv")?;
    let trained = train_from(&train, st, pretrain, &cfg, Some(&mut joint_log))?;
    if pretrain {
        let mut log = run.csv("pretrain_log.csv")?;
        for rec in &trained.pretrain {
            log.serialize(rec)?;
        }
        log.flush()?;
    }
    trained.models(&cfg).save(&run.dir)?;
    println!("{}", run.dir.display());
    Ok(())
}

/// `(id, path)` for a single PNG or every PNG in a directory (or its
/// `images/` subdirectory), sorted by id.
fn png_inputs(path: &Path) -> Result<Vec<(String, PathBuf)>> {
    if path.is_file() {
        let id = path.file_stem().map_or("image".into(), |s| s.to_string_lossy().into_owned());
        return Ok(vec![(id, path.to_path_buf())]);
    }
    require_dir(path)?;
    let dir = if path.join("images").is_dir() { path.join("images") } else { path.to_path_buf() };
    let mut out: Vec<(String, PathBuf)> = fs::read_dir(&dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .filter_map(|p| Some((p.file_stem()?.to_string_lossy().into_owned(), p.clone())))
        .collect();
    out.sort();
    if out.is_empty() {
        return Err(Error::MissingArtifact(format!("no PNG files in {}", dir.display())));
    }
    Ok(out)
}

fn predict(common: &Common, models: &Path, input: &Path) -> Result<()> {
    let run = Run::start("predict", common, &[Some(models), Some(input)])?;
    let cfg = run.train_cfg();
    require_dir(models)?;
    let m = Models::load(models)?;
    let inputs = png_inputs(input)?;
    let engine = StyleEngine::new(&m.st, &m.bank)?;
    let policies = cfg.policies(m.bank.len())?;
    let angles = cfg.rotation_angles()?;
    let out = run.dir.join("labels");
    fs::create_dir_all(&out)?;
    let mut scores = (run.cfg.method == Method::S3tta).then(|| run.csv("selection.csv")).transpose()?;
    for (id, path) in &inputs {
        let img = Image::load_png(path)?;
        let pred = match run.cfg.method {
            Method::Baseline => predict_plain(&m.plain, &img, cfg.min_area)?,
            Method::AggregateAll => {
                let bundles = s3tta_core::augment::build_bundles(&img, &engine, &policies, &angles)?;
                s3tta_core::evalkit::baseline_aggregate_all(&bundles, &m.seg, cfg.min_area)?
            }
            Method::S3tta => {
                let (pred, selection) = predict_s3tta(&img, &engine, &m.seg, &policies, &angles, cfg.min_area)?;
                if let Some(w) = scores.as_mut() {
                    write_scores(w, id, &selection)?;
                }
                pred
            }
        };
        pred.save_png(&out.join(format!("{id}.png")))?;
    }
    if let Some(mut w) = scores {
        w.flush()?;
    }
    println!("{}", run.dir.display());
    Ok(())
}

fn label_dir(path: &Path) -> PathBuf {
    if path.join("labels").is_dir() {
        path.join("labels")
    } else {
        path.to_path_buf()
    }
}

fn evaluate(common: &Common, models: Option<&Path>, data: Option<&Path>, pred: Option<&Path>, gt: Option<&Path>) -> Result<()> {
    let run = Run::start("evaluate", common, &[models, data, pred, gt])?;
    let thresholds = &run.cfg.thresholds;
    let rows = match (models, pred, gt) {
        (Some(models), _, _) => {
            require_dir(models)?;
            let m = Models::load(models)?;
            let (_, test) = dataset(data, &run.cfg)?;
            let ev = m.evaluate(&test, &run.train_cfg(), thresholds)?;
            let mut w = run.csv("selection.csv")?;
            for (id, selection) in &ev.selections {
                write_scores(&mut w, id, selection)?;
            }
            w.flush()?;
            ev.metrics
        }
        (None, Some(pred), Some(gt)) => {
            let (pred, gt) = (label_dir(pred), label_dir(gt));
            require_dir(&pred)?;
            let mut rows = Vec::new();
            for (id, gt_path) in png_inputs(&gt)? {
                let p = pred.join(format!("{id}.png"));
                if !p.is_file() {
                    return Err(Error::MissingArtifact(format!("no prediction for {id} in {}", pred.display())));
                }
                let (g, _) = InstanceLabelMap::load_png(&gt_path)?;
                let (q, _) = InstanceLabelMap::load_png(&p)?;
                rows.push(ImageMetrics::compute(&id, run.cfg.method.name(), &q, &g, thresholds)?);
            }
            rows
        }
        _ => return Err(Error::InvalidArgument("evaluate needs --models or both --pred and --gt".into())),
    };
    write_report(run.file("metrics.csv")?, &rows)?;
    for s in summarize(&rows) {
        let f1: Vec<String> = s.f1.iter().map(|(t, f)| format!("F1@{t} {:.1}", 100.0 * f)).collect();
        println!("{}: {} dice {:.1} jaccard {:.1}", s.method, f1.join(" "), 100.0 * s.dice, 100.0 * s.jaccard);
    }
    println!("{}", run.dir.display());
    Ok(())
}

fn run_ablate(common: &Common, data: Option<&Path>) -> Result<()> {
    let run = Run::start("ablate", common, &[data])?;
    let (train, test) = dataset(data, &run.cfg)?;
    let rows = ablate(&train, &test, &run.train_cfg(), &run.cfg.thresholds)?;
    write_ablation(run.file("ablation.csv")?, &rows)?;
    println!("{}", run.dir.display());
    Ok(())
}

/// Scatter plot of the embedding: originals in blue, stylized in orange.
fn render_scatter(result: &EmbeddingResult, path: &Path) -> Result<()> {
    const SIZE: usize = 400;
    const MARGIN: f64 = 20.0;
    let (mut lo, mut hi) = ((f64::MAX, f64::MAX), (f64::MIN, f64::MIN));
    for (_, _, (x, y)) in &result.rows {
        lo = (lo.0.min(*x), lo.1.min(*y));
        hi = (hi.0.max(*x), hi.1.max(*y));
    }
    let span = (hi.0 - lo.0).max(hi.1 - lo.1).max(1e-12);
    let scale = (SIZE as f64 - 2.0 * MARGIN) / span;
    let mut data = vec![1.0f32; 3 * SIZE * SIZE];
    for (_, set, (x, y)) in &result.rows {
        let color = if set == SET_ORIGINAL { [0.12, 0.47, 0.71] } else { [1.0, 0.5, 0.05] };
        let cx = (MARGIN + (x - lo.0) * scale).round() as isize;
        let cy = (SIZE as f64 - MARGIN - (y - lo.1) * scale).round() as isize;
        for dy in -2..=2 {
            for dx in -2..=2 {
                let (px, py) = (cx + dx, cy + dy);
                if (0..SIZE as isize).contains(&px) && (0..SIZE as isize).contains(&py) {
                    for (c, v) in color.iter().enumerate() {
                        data[(c * SIZE + py as usize) * SIZE + px as usize] = *v;
                    }
                }
            }
        }
    }
    Image::new(3, SIZE, SIZE, data)?.save_png(path)
}

fn visualize_embedding(common: &Common, models: Option<&Path>, data: Option<&Path>) -> Result<()> {
    let run = Run::start("visualize-embedding", common, &[models, data])?;
    let cfg = run.train_cfg();
    let (train, test) = dataset(data, &run.cfg)?;
    let (st, bank) = match models {
        Some(dir) => {
            require_dir(dir)?;
            let st = StyleTransfer::from_checkpoint(&Checkpoint::load(&dir.join(s3tta_core::experiment::STYLETX_FILE))?)?;
            let bank = s3tta_core::augment::StyleBank::load(&dir.join(s3tta_core::experiment::BANK_DIR))?;
            (st, bank)
        }
        None => {
            let mut st = StyleTransfer::<f32>::new(&cfg.style_arch(train[0].image.channels()), cfg.seed);
            let bank = build_bank(&train, &st, &cfg)?;
            let images: Vec<Image> = train.iter().map(|s| s.image.clone()).collect();
            pretrain_style(&images, &mut st, &cfg)?;
            (st, bank)
        }
    };
    let mut corpus: Vec<(String, Image)> = train
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("train{i:04}"), s.image.clone()))
        .collect();
    corpus.extend(test.iter().map(|(id, s)| (id.clone(), s.image.clone())));
    let result = embedding_experiment(&corpus, &st, &bank)?;
    write_embedding(run.file("embedding.csv")?, &result.rows)?;
    let mut w = run.csv("spread.csv")?;
    w.write_record(["set", "mean_pairwise_distance"])?;
    w.write_record(["original", &format!("{}", result.original_spread)])?;
    w.write_record(["stylized", &format!("{}", result.stylized_spread)])?;
    w.flush()?;
    render_scatter(&result, &run.dir.join("embedding.png"))?;
    println!(
        "mean pairwise distance: original {:.4} stylized {:.4}",
        result.original_spread, result.stylized_spread
    );
    println!("{}", run.dir.display());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(c) => gen_data(c),
        Command::PretrainSt { common, data } => pretrain_st(common, data.as_deref()),
        Command::Train { common, data, styletx } => train(common, data.as_deref(), styletx.as_deref()),
        Command::Predict { common, models, input } => predict(common, models, input),
        Command::Evaluate {
            common,
            models,
            data,
            pred,
            gt,
        } => evaluate(common, models.as_deref(), data.as_deref(), pred.as_deref(), gt.as_deref()),
        Command::Ablate { common, data } => run_ablate(common, data.as_deref()),
        Command::VisualizeEmbedding { common, models, data } => visualize_embedding(common, models.as_deref(), data.as_deref()),
    }
}

fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Config(_) => EXIT_CONFIG,
        Error::MissingArtifact(_) => EXIT_MISSING,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(EXIT_USAGE),
            };
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
