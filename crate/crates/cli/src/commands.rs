//! `train`, `infer` and `analyze`, generic over the run precision.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tinr_core::analysis::{
    ablation_csv, attention_maps, eval_image_regression, eval_scenes, export_masks, mean, predict_image, predict_view,
    psnr, scene_eval_csv, SceneEval,
};
use tinr_core::data::{gen_images, gen_scenes, load_image_folder, ImageDataset, SceneDataset, Split};
use tinr_core::train::{infer_views, tto, TrainData, TtoTarget};
use tinr_core::{Image, MetaLearner, Observation, Real, Trainer};

use crate::checkpoint::Checkpoint;
use crate::config::{Config, DataSource, Task};
use crate::error::{CliError, Result};

pub const LOG_FILE: &str = "train_log.csv";
pub const LOG_HEADER: &str = "step,loss,lr,val_psnr";
pub const FINAL_CHECKPOINT: &str = "checkpoint.bin";

pub fn step_checkpoint_name(step: usize) -> String {
    format!("checkpoint_step{step}.bin")
}

pub enum Data {
    Images(ImageDataset),
    Scenes(SceneDataset),
}

impl Data {
    pub fn as_train(&self) -> TrainData<'_> {
        match self {
            Data::Images(ds) => TrainData::Images(ds),
            Data::Scenes(ds) => TrainData::Scenes(ds),
        }
    }

    pub fn count(&self, split: Split) -> usize {
        match self {
            Data::Images(ds) => ds.indices(split).len(),
            Data::Scenes(ds) => ds.indices(split).len(),
        }
    }

    fn write_manifest(&self, path: &Path) -> Result<()> {
        let m = match self {
            Data::Images(ds) => ds.manifest(),
            Data::Scenes(ds) => ds.manifest(),
        };
        Ok(m.write(path)?)
    }
}

/// Regenerates (or loads) the dataset a config describes.
pub fn build_data(cfg: &Config) -> Result<Data> {
    let res = cfg.resolution;
    Ok(match cfg.source()? {
        DataSource::Generated(spec) => Data::Images(gen_images(spec, cfg.splits(), res, res, cfg.data_seed)),
        DataSource::Folder(path) => {
            let mut ds = load_image_folder(&path, res)?;
            // the last images of the sorted listing are held out
            let n = ds.len();
            let test = cfg.n_test.min(n.saturating_sub(1));
            let val = cfg.n_val.min(n - 1 - test);
            for (i, s) in ds.splits.iter_mut().enumerate() {
                *s = if i >= n - test {
                    Split::Test
                } else if i >= n - test - val {
                    Split::Val
                } else {
                    Split::Train
                };
            }
            Data::Images(ds)
        }
        DataSource::Spheres => Data::Scenes(gen_scenes(cfg.splits(), &cfg.scene(), cfg.data_seed)?),
    })
}

/// Mean feed-forward PSNR on a split: reconstruction for images, novel views
/// for scenes. `None` when the split is empty.
pub fn split_psnr<T: Real>(ml: &MetaLearner<T>, data: &Data, cfg: &Config, split: Split) -> Result<Option<f64>> {
    if data.count(split) == 0 {
        return Ok(None);
    }
    Ok(Some(match data {
        Data::Images(ds) => eval_image_regression(ml, &ds.split(split))?.mean(),
        Data::Scenes(ds) => {
            let rows = eval_scenes(ml, ds, split, &cfg.protocol()?, 0, cfg.tto_lr)?;
            mean(&rows.iter().map(|r| r.novel_psnr).collect::<Vec<_>>())
        }
    }))
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    pub resume: Option<PathBuf>,
    pub max_steps: Option<usize>,
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
}

#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub steps: usize,
    pub final_loss: Option<f64>,
    pub test_psnr: Option<f64>,
    pub test_baseline: Option<f64>,
    pub checkpoint: PathBuf,
}

fn new_trainer<T: Real>(cfg: &Config) -> Result<Trainer<T>> {
    let ml = MetaLearner::<T>::init(cfg.hypernet(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    Ok(Trainer::new(ml, cfg.train())?)
}

/// Keeps the header and rows up to `step` of an existing log.
fn truncated_log(path: &Path, step: usize) -> Result<Vec<String>> {
    let mut keep = vec![LOG_HEADER.to_string()];
    if let Ok(f) = File::open(path) {
        for line in BufReader::new(f).lines().skip(1) {
            let line = line.map_err(CliError::io(path))?;
            match line.split(',').next().and_then(|s| s.parse::<usize>().ok()) {
                Some(s) if s <= step => keep.push(line),
                _ => break,
            }
        }
    }
    Ok(keep)
}

/// Runs (or resumes) meta-training and writes the log, checkpoints and the
/// test-split evaluation into the output directory.
pub fn train<T: Real>(cfg: Option<Config>, opts: &TrainOptions) -> Result<TrainSummary> {
    let (mut cfg, resumed) = match &opts.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            (ck.header.config.clone(), Some((ck, path.clone())))
        }
        None => (
            cfg.ok_or_else(|| CliError::Usage("train needs a config file or --resume".into()))?,
            None,
        ),
    };
    if let Some(n) = opts.max_steps {
        cfg.max_steps = n;
    }
    if let Some(dir) = &opts.out_dir {
        cfg.out_dir = dir.clone();
    }
    if let Some(seed) = opts.seed {
        if resumed.is_some() && seed != cfg.seed {
            return Err(CliError::Usage("--seed cannot change the seed of a resumed run".into()));
        }
        cfg.seed = seed;
    }
    cfg.validate()?;

    let out = cfg.out_dir.clone();
    std::fs::create_dir_all(&out).map_err(CliError::io(&out))?;
    std::fs::write(out.join("config.toml"), cfg.to_toml()).map_err(CliError::io(&out))?;
    let data = build_data(&cfg)?;
    data.write_manifest(&out.join("manifest.json"))?;

    let mut trainer: Trainer<T> = match &resumed {
        Some((ck, path)) => {
            let mut tr = ck.trainer::<T>(path)?;
            tr.cfg.max_steps = cfg.max_steps;
            tr
        }
        None => new_trainer(&cfg)?,
    };
    log::info!(
        "{} meta-learner, {} parameters, starting at step {}",
        T::PRECISION,
        trainer.learner.params.num_scalars(),
        trainer.step
    );

    let log_path = out.join(LOG_FILE);
    let previous = truncated_log(&log_path, if resumed.is_some() { trainer.step } else { 0 })?;
    let mut log = BufWriter::new(File::create(&log_path).map_err(CliError::io(&log_path))?);
    for line in previous {
        writeln!(log, "{line}").map_err(CliError::io(&log_path))?;
    }

    let mut last = None;
    while trainer.step < cfg.max_steps {
        let r = trainer.step(data.as_train())?;
        last = Some(r.loss);
        let mut row = format!("{},{},{},", r.step, r.loss, r.lr);
        if cfg.log_every > 0 && r.step % cfg.log_every == 0 {
            if let Some(p) = split_psnr(&trainer.learner, &data, &cfg, Split::Val)? {
                write!(row, "{p}").unwrap();
            }
            log::info!("step {} loss {:.6} lr {:.2e} {}", r.step, r.loss, r.lr, row.rsplit(',').next().unwrap());
        }
        writeln!(log, "{row}").map_err(CliError::io(&log_path))?;
        if cfg.checkpoint_every > 0 && r.step % cfg.checkpoint_every == 0 {
            log.flush().map_err(CliError::io(&log_path))?;
            Checkpoint::capture(&cfg, &trainer).save(&out.join(step_checkpoint_name(r.step)))?;
        }
    }
    log.flush().map_err(CliError::io(&log_path))?;
    let final_path = out.join(FINAL_CHECKPOINT);
    Checkpoint::capture(&cfg, &trainer).save(&final_path)?;

    let mut summary = TrainSummary {
        steps: trainer.step,
        final_loss: last,
        test_psnr: None,
        test_baseline: None,
        checkpoint: final_path,
    };
    if data.count(Split::Test) > 0 {
        match &data {
            Data::Images(ds) => {
                let rep = eval_image_regression(&trainer.learner, &ds.split(Split::Test))?;
                write_file(&out.join("eval_test.csv"), &rep.to_csv())?;
                summary.test_psnr = Some(rep.mean());
                summary.test_baseline = Some(rep.baseline_mean());
            }
            Data::Scenes(ds) => {
                let rows = eval_scenes(&trainer.learner, ds, Split::Test, &cfg.protocol()?, cfg.tto_steps, cfg.tto_lr)?;
                write_file(&out.join("eval_test.csv"), &scene_eval_csv(&rows))?;
                summary.test_psnr = Some(mean(&rows.iter().map(|r| r.novel_psnr).collect::<Vec<_>>()));
            }
        }
    }
    Ok(summary)
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(CliError::io(path))
}

fn learner_from<T: Real>(path: &Path) -> Result<(Config, MetaLearner<T>)> {
    let ck = Checkpoint::load(path)?;
    let ml = ck.learner::<T>(path)?;
    Ok((ck.header.config, ml))
}

/// What `infer` reads.
#[derive(Clone, Debug, Default)]
pub struct InferArgs {
    pub checkpoint: PathBuf,
    /// Image PNGs, for image checkpoints.
    pub inputs: Vec<PathBuf>,
    /// Scene of the checkpoint's dataset, for view-synthesis checkpoints.
    pub scene: Option<usize>,
    pub views: Vec<usize>,
    pub novel: Vec<usize>,
    pub tto_steps: usize,
    pub tto_lr: Option<f64>,
    pub out: PathBuf,
}

/// One PSNR per written PNG, in output order.
#[derive(Clone, Debug, PartialEq)]
pub struct InferReport {
    pub rows: Vec<(String, f64)>,
}

impl InferReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("output,psnr\n");
        for (name, p) in &self.rows {
            writeln!(s, "{name},{p:.6}").unwrap();
        }
        s
    }
}

pub fn infer<T: Real>(args: &InferArgs) -> Result<InferReport> {
    let (cfg, ml) = learner_from::<T>(&args.checkpoint)?;
    let lr = args.tto_lr.unwrap_or(cfg.tto_lr);
    std::fs::create_dir_all(&args.out).map_err(CliError::io(&args.out))?;
    let mut rows = Vec::new();
    match cfg.task {
        Task::Image => {
            if args.scene.is_some() || args.inputs.is_empty() {
                return Err(CliError::Usage(
                    "image checkpoints take --input PNG files, not --scene".into(),
                ));
            }
            for path in &args.inputs {
                let img = Image::load_png(path)?;
                if (img.height(), img.width()) != (cfg.resolution, cfg.resolution) {
                    return Err(CliError::Usage(format!(
                        "{} is {}x{}, the checkpoint expects {}x{}",
                        path.display(),
                        img.height(),
                        img.width(),
                        cfg.resolution,
                        cfg.resolution
                    )));
                }
                let (ws, _) = ml.generate_weights(Observation::Image(&img))?;
                let ws = tto(&ws, TtoTarget::Image(&img), args.tto_steps, lr)?.weights;
                let pred = predict_image(&ws, img.height(), img.width())?;
                let stem = path.file_stem().map_or("input".into(), |s| s.to_string_lossy().into_owned());
                let name = format!("recon_{stem}.png");
                pred.save_png(&args.out.join(&name))?;
                rows.push((name, psnr(&pred, &img)?));
            }
        }
        Task::ViewSynthesis => {
            if !args.inputs.is_empty() {
                return Err(CliError::Usage(
                    "view-synthesis checkpoints take --scene with --views, not --input images".into(),
                ));
            }
            let index = args
                .scene
                .ok_or_else(|| CliError::Usage("view-synthesis inference needs --scene".into()))?;
            let Data::Scenes(ds) = build_data(&cfg)? else {
                unreachable!("view-synthesis configs build scene data")
            };
            let scene = ds
                .scenes
                .get(index)
                .ok_or_else(|| CliError::Usage(format!("scene {index} out of range ({} scenes)", ds.len())))?;
            let protocol = cfg.protocol()?;
            let views = if args.views.is_empty() { protocol.inputs.clone() } else { args.views.clone() };
            let novel = if args.novel.is_empty() { protocol.novel.clone() } else { args.novel.clone() };
            if let Some(v) = views.iter().chain(&novel).find(|&&v| v >= scene.views.len()) {
                return Err(CliError::Usage(format!("view {v} out of range ({} views)", scene.views.len())));
            }
            let inputs: Vec<_> = views.iter().map(|&v| scene.views[v].clone()).collect();
            let sc = &ds.config;
            let ws = infer_views(&ml, &inputs, sc, args.tto_steps, lr)?.weights;
            for (kind, list) in [("input", &views), ("novel", &novel)] {
                for &v in list {
                    let view = &scene.views[v];
                    let pred = predict_view(&ws, &view.camera, sc.near, sc.far, &sc.render)?;
                    let name = format!("{kind}_view{v}.png");
                    pred.save_png(&args.out.join(&name))?;
                    rows.push((name, psnr(&pred, &view.rgb)?));
                }
            }
        }
    }
    let report = InferReport { rows };
    write_file(&args.out.join("infer.csv"), &report.to_csv())?;
    Ok(report)
}

#[derive(Clone, Debug)]
pub enum AnalyzeCommand {
    Psnr { split: Split, tto_steps: Option<usize> },
    Ablate { groups: Vec<usize>, steps: Option<usize>, seed: Option<u64> },
    Attn { index: Option<usize>, image: Option<PathBuf>, tokens: Vec<usize> },
}

/// Paths of everything `analyze` wrote.
pub fn analyze<T: Real>(checkpoint: &Path, cmd: &AnalyzeCommand, out: &Path) -> Result<Vec<PathBuf>> {
    let (cfg, ml) = learner_from::<T>(checkpoint)?;
    std::fs::create_dir_all(out).map_err(CliError::io(out))?;
    match cmd {
        AnalyzeCommand::Psnr { split, tto_steps } => {
            let data = build_data(&cfg)?;
            let path = out.join("psnr_report.csv");
            let csv = match &data {
                Data::Images(ds) => eval_image_regression(&ml, &ds.split(*split))?.to_csv(),
                Data::Scenes(ds) => {
                    let rows: Vec<SceneEval> = eval_scenes(
                        &ml,
                        ds,
                        *split,
                        &cfg.protocol()?,
                        tto_steps.unwrap_or(cfg.tto_steps),
                        cfg.tto_lr,
                    )?;
                    scene_eval_csv(&rows)
                }
            };
            write_file(&path, &csv)?;
            Ok(vec![path])
        }
        AnalyzeCommand::Ablate { groups, steps, seed } => {
            let data = build_data(&cfg)?;
            let mut rows = Vec::with_capacity(groups.len());
            for &g in groups {
                let mut c = Config { groups: g, ..cfg.clone() };
                if let Some(s) = steps {
                    c.max_steps = *s;
                }
                if let Some(s) = seed {
                    c.seed = *s;
                }
                c.validate()?;
                let mut tr = new_trainer::<T>(&c)?;
                while tr.step < c.max_steps {
                    tr.step(data.as_train())?;
                }
                let p = split_psnr(&tr.learner, &data, &c, Split::Test)?
                    .ok_or_else(|| CliError::Usage("ablation needs a non-empty test split".into()))?;
                log::info!("G={g}: test PSNR {p:.3}");
                rows.push((g, p));
            }
            let path = out.join("ablation.csv");
            write_file(&path, &ablation_csv(&rows))?;
            Ok(vec![path])
        }
        AnalyzeCommand::Attn { index, image, tokens } => {
            if cfg.task != Task::Image {
                return Err(CliError::Usage("attention masks are exported for image checkpoints".into()));
            }
            let img = match (index, image) {
                (_, Some(path)) => Image::load_png(path)?,
                (i, None) => {
                    let Data::Images(ds) = build_data(&cfg)? else {
                        unreachable!("image configs build image data")
                    };
                    let pool = ds.indices(Split::Test);
                    let pool = if pool.is_empty() { (0..ds.len()).collect() } else { pool };
                    let i = i.unwrap_or(0);
                    let k = *pool
                        .get(i)
                        .ok_or_else(|| CliError::Usage(format!("index {i} out of range ({} images)", pool.len())))?;
                    ds.images[k].clone()
                }
            };
            let maps = attention_maps(&ml, &img)?;
            let maps: Vec<_> = if tokens.is_empty() {
                maps
            } else {
                maps.into_iter().filter(|m| tokens.contains(&m.token)).collect()
            };
            img.save_png(&out.join("attn_input.png"))?;
            Ok(export_masks(out, &img, &maps, cfg.patch, cfg.pad)?)
        }
    }
}
