//! Meta-training, the reconstruction loss and test-time optimization.

use std::borrow::Cow;
use std::collections::VecDeque;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_crop, ImageDataset, SceneConfig, SceneDataset, Split};
use crate::diff::{Adam, AdamConfig, Graph, Real, Tensor, Var};
use crate::hypernet::{generate, MetaLearner, Observation};
use crate::inr::{self, pixel_centers, InrMode, WeightSet};
use crate::raster::Image;
use crate::render::{adaptive_pixel_sample, rays_from_camera, volume_render, Ray, RenderConfig};
use crate::tokenizer::ViewObservation;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    /// Score the generated INR on the observations it was generated from.
    #[default]
    Reconstruct,
    /// Score it on a different view of the same object.
    Generalize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    /// Steps without a new best smoothed loss before the single decay.
    pub patience: usize,
    pub decay: f64,
    /// Moving-average window for the plateau test.
    pub smoothing: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub mode: LossMode,
    pub seed: u64,
    /// Pixels (or rays) scored per observation and step; 0 scores all.
    pub pixels_per_step: usize,
    /// Upper bound on input views per scene task; each step draws 1..=this.
    pub input_views: usize,
    /// RandomCrop augmentation for image tasks: reflect-pad by this many
    /// pixels and crop back to size. 0 disables it.
    pub crop_pad: usize,
    pub tto_steps: usize,
    pub tto_lr: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            patience: 2000,
            decay: 10.0,
            smoothing: 100,
            batch_size: 8,
            max_steps: 1000,
            mode: LossMode::Reconstruct,
            seed: 0,
            pixels_per_step: 0,
            input_views: 2,
            crop_pad: 0,
            tto_steps: 100,
            tto_lr: 1e-3,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |field: &str, msg: String| Err(Error::invalid("train config", format!("{field}: {msg}")));
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return bad("lr", format!("must be positive, got {}", self.lr));
        }
        if !(self.tto_lr.is_finite() && self.tto_lr > 0.0) {
            return bad("tto_lr", format!("must be positive, got {}", self.tto_lr));
        }
        if !(self.decay.is_finite() && self.decay >= 1.0) {
            return bad("decay", format!("must be at least 1, got {}", self.decay));
        }
        if self.smoothing == 0 {
            return bad("smoothing", "must be positive".into());
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be positive".into());
        }
        if self.input_views == 0 {
            return bad("input_views", "must be positive".into());
        }
        Ok(())
    }
}

/// Drops the learning rate once by `decay` after `patience` steps without a
/// new best moving-average loss.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrSchedule {
    pub base: f64,
    pub patience: usize,
    pub decay: f64,
    pub window: usize,
    recent: VecDeque<f64>,
    /// `None` until the first observation, so a fresh schedule serializes.
    best: Option<f64>,
    since_best: usize,
    decayed: bool,
}

impl LrSchedule {
    pub fn new(base: f64, patience: usize, decay: f64, window: usize) -> Self {
        LrSchedule {
            base,
            patience,
            decay,
            window: window.max(1),
            recent: VecDeque::new(),
            best: None,
            since_best: 0,
            decayed: false,
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Self::new(cfg.lr, cfg.patience, cfg.decay, cfg.smoothing)
    }

    pub fn lr(&self) -> f64 {
        if self.decayed {
            self.base / self.decay
        } else {
            self.base
        }
    }

    pub fn decayed(&self) -> bool {
        self.decayed
    }

    /// Records a step loss and returns the learning rate for the next step.
    pub fn observe(&mut self, loss: f64) -> f64 {
        self.recent.push_back(loss);
        if self.recent.len() > self.window {
            self.recent.pop_front();
        }
        let smoothed = self.recent.iter().sum::<f64>() / self.recent.len() as f64;
        let improved = match self.best {
            Some(b) => smoothed < b,
            None => true,
        };
        if improved {
            self.best = Some(smoothed);
            self.since_best = 0;
        } else {
            self.since_best += 1;
            if !self.decayed && self.since_best >= self.patience {
                self.decayed = true;
                log::info!("loss plateaued; learning rate {} -> {}", self.base, self.lr());
            }
        }
        self.lr()
    }
}

/// Sum of squared channel errors averaged over observations.
pub fn loss_eq1<T: Real>(g: &mut Graph<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    let n = g.shape(pred)[0];
    if n == 0 || target.is_empty() {
        return Err(Error::invalid("loss", "empty observation set"));
    }
    let t = g.constant(target.clone());
    let se = g.squared_error(pred, t)?;
    g.scale(se, T::of(1.0 / n as f64))
}

/// Pixel coordinates and RGB targets at `indices` (all pixels when `None`).
pub fn pixel_targets<T: Real>(img: &Image, indices: Option<&[usize]>) -> Result<(Vec<f64>, Tensor<T>)> {
    let centres = pixel_centers(img.height(), img.width());
    let all: Vec<usize>;
    let idx = match indices {
        Some(i) => i,
        None => {
            all = (0..img.num_pixels()).collect();
            &all
        }
    };
    let mut coords = Vec::with_capacity(idx.len() * 2);
    let mut rgb = Vec::with_capacity(idx.len() * 3);
    for &i in idx {
        coords.extend_from_slice(&centres[2 * i..2 * i + 2]);
        rgb.extend_from_slice(img.pixel(i));
    }
    Ok((coords, Tensor::from_f64([idx.len(), 3], &rgb)?))
}

/// Rays and RGB targets of selected pixels of a view.
pub fn ray_targets<T: Real>(view: &ViewObservation, indices: Option<&[usize]>, near: f64, far: f64) -> Result<(Vec<Ray>, Tensor<T>)> {
    let rays = rays_from_camera(&view.camera, near, far)?;
    let idx: Vec<usize> = match indices {
        Some(i) => i.to_vec(),
        None => (0..rays.len()).collect(),
    };
    let mut rgb = Vec::with_capacity(idx.len() * 3);
    let mut picked = Vec::with_capacity(idx.len());
    for &i in &idx {
        picked.push(rays[i].clone());
        rgb.extend_from_slice(view.rgb.pixel(i));
    }
    Ok((picked, Tensor::from_f64([idx.len(), 3], &rgb)?))
}

/// Input and scored views of one object for a scene meta-step.
#[derive(Clone, Debug)]
pub struct SceneTask<'a> {
    pub inputs: Vec<ViewObservation>,
    pub targets: Vec<&'a ViewObservation>,
    /// Pixel indices per target (all pixels when `None`).
    pub pixels: Vec<Option<Vec<usize>>>,
}

/// One observation batch for [`meta_step`].
#[derive(Clone, Debug)]
pub enum Batch<'a> {
    Images(Vec<(Cow<'a, Image>, Option<Vec<usize>>)>),
    Scenes {
        tasks: Vec<SceneTask<'a>>,
        near: f64,
        far: f64,
        render: RenderConfig,
    },
}

fn batch_loss<T: Real>(g: &mut Graph<T>, ml: &MetaLearner<T>, batch: &Batch<'_>, trainable: bool) -> Result<(Var, crate::hypernet::Bound)> {
    let bound = ml.bind(g, trainable)?;
    let arch = &ml.config.inr;
    let mut losses = Vec::new();
    match batch {
        Batch::Images(items) => {
            for (img, px) in items {
                let gen = generate(g, &ml.config, &bound, Observation::Image(img))?;
                let (coords, target) = pixel_targets(img, px.as_deref())?;
                let pred = inr::forward(g, arch, &gen.weights, &coords, None)?;
                losses.push(loss_eq1(g, pred, &target)?);
            }
        }
        Batch::Scenes { tasks, near, far, render } => {
            for task in tasks {
                let gen = generate(g, &ml.config, &bound, Observation::Views(&task.inputs))?;
                let mut rays = Vec::new();
                let mut rgb = Vec::new();
                for (view, px) in task.targets.iter().zip(&task.pixels) {
                    let (r, t) = ray_targets::<T>(view, px.as_deref(), *near, *far)?;
                    rays.extend(r);
                    rgb.extend(t.to_f64());
                }
                let target = Tensor::from_f64([rays.len(), 3], &rgb)?;
                let pred = volume_render::<T, ChaCha8Rng>(g, arch, &gen.weights, &rays, render, None)?;
                losses.push(loss_eq1(g, pred, &target)?);
            }
        }
    }
    if losses.is_empty() {
        return Err(Error::invalid("meta_step", "empty batch"));
    }
    let mut total = losses[0];
    for &l in &losses[1..] {
        total = g.add(total, l)?;
    }
    let loss = g.scale(total, T::of(1.0 / losses.len() as f64))?;
    Ok((loss, bound))
}

/// Loss of a batch without updating anything.
pub fn evaluate_batch<T: Real>(ml: &MetaLearner<T>, batch: &Batch<'_>) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, _) = batch_loss(&mut g, ml, batch, false)?;
    Ok(g.value(loss).data()[0].f64())
}

/// One Adam update of every meta-learner parameter; returns the batch loss.
/// A non-finite loss aborts the step before any parameter changes.
pub fn meta_step<T: Real>(ml: &mut MetaLearner<T>, adam: &mut Adam<T>, batch: &Batch<'_>, lr: f64) -> Result<f64> {
    let mut g = Graph::new();
    let (loss, bound) = batch_loss(&mut g, ml, batch, true)?;
    let value = g.value(loss).data()[0].f64();
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss {value}")));
    }
    let grads = g.backward(loss)?;
    let named = bound.named_grads(&g, &grads);
    adam.cfg.lr = lr;
    adam.step(&mut ml.params, &named)?;
    Ok(value)
}

/// Observations a WeightSet is optimized against at test time.
#[derive(Clone, Copy, Debug)]
pub enum TtoTarget<'a> {
    Image(&'a Image),
    Views {
        views: &'a [ViewObservation],
        near: f64,
        far: f64,
        render: &'a RenderConfig,
    },
}

fn tto_loss<T: Real>(g: &mut Graph<T>, ws: &WeightSet<T>, target: &TtoTarget<'_>, prepared: &Prepared<T>) -> Result<(Var, Vec<Var>)> {
    let w = ws.bind(g, true);
    let pred = match (target, prepared) {
        (TtoTarget::Image(_), Prepared::Pixels(coords, _)) => inr::forward(g, &ws.arch, &w, coords, None)?,
        (TtoTarget::Views { render, .. }, Prepared::Rays(rays, _)) => {
            volume_render::<T, ChaCha8Rng>(g, &ws.arch, &w, rays, render, None)?
        }
        _ => unreachable!("prepared targets follow the target kind"),
    };
    let t = match prepared {
        Prepared::Pixels(_, t) | Prepared::Rays(_, t) => t,
    };
    Ok((loss_eq1(g, pred, t)?, w))
}

enum Prepared<T> {
    Pixels(Vec<f64>, Tensor<T>),
    Rays(Vec<Ray>, Tensor<T>),
}

fn prepare<T: Real>(target: &TtoTarget<'_>) -> Result<Prepared<T>> {
    Ok(match target {
        TtoTarget::Image(img) => {
            let (c, t) = pixel_targets(img, None)?;
            Prepared::Pixels(c, t)
        }
        TtoTarget::Views { views, near, far, .. } => {
            if views.is_empty() {
                return Err(Error::invalid("tto", "no views"));
            }
            let mut rays = Vec::new();
            let mut rgb = Vec::new();
            for v in views.iter() {
                let (r, t) = ray_targets::<T>(v, None, *near, *far)?;
                rays.extend(r);
                rgb.extend(t.to_f64());
            }
            let n = rays.len();
            Prepared::Rays(rays, Tensor::from_f64([n, 3], &rgb)?)
        }
    })
}

#[derive(Clone, Debug)]
pub struct TtoResult<T> {
    pub weights: WeightSet<T>,
    /// Loss before each step plus the final loss: `steps + 1` entries.
    pub losses: Vec<f64>,
}

/// Adam on the INR weights alone against `target`.
pub fn tto<T: Real>(theta0: &WeightSet<T>, target: TtoTarget<'_>, steps: usize, lr: f64) -> Result<TtoResult<T>> {
    let expected = match target {
        TtoTarget::Image(_) => InrMode::Image,
        TtoTarget::Views { .. } => InrMode::RadianceField,
    };
    if theta0.arch.mode != expected {
        return Err(Error::invalid("tto", "observation kind does not match the INR"));
    }
    let prepared = prepare::<T>(&target)?;
    let mut ws = theta0.clone();
    let mut states: Vec<_> = ws.matrices.iter().map(|m| crate::diff::AdamState::new(m.len())).collect();
    let cfg = AdamConfig {
        lr,
        ..AdamConfig::default()
    };
    let mut losses = Vec::with_capacity(steps + 1);
    for step in 0..=steps {
        let mut g = Graph::new();
        let (loss, w) = tto_loss(&mut g, &ws, &target, &prepared)?;
        let value = g.value(loss).data()[0].f64();
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("test-time loss at step {step}")));
        }
        losses.push(value);
        if step == steps {
            break;
        }
        let grads = g.backward(loss)?;
        for ((m, &v), st) in ws.matrices.iter_mut().zip(&w).zip(&mut states) {
            let gr = grads.get_or_zeros(v, m.shape());
            if !gr.is_finite() {
                return Err(Error::NonFinite(format!("test-time gradient at step {step}")));
            }
            crate::diff::adam_step(m.data_mut(), gr.data(), st, &cfg);
        }
    }
    Ok(TtoResult { weights: ws, losses })
}

/// Everything that evolves during meta-training.
#[derive(Clone, Debug)]
pub struct Trainer<T> {
    pub cfg: TrainConfig,
    pub learner: MetaLearner<T>,
    pub adam: Adam<T>,
    pub schedule: LrSchedule,
    pub rng: ChaCha8Rng,
    pub step: usize,
}

/// What one training step did.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepReport {
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
}

/// Training data for [`Trainer::step`].
#[derive(Clone, Copy, Debug)]
pub enum TrainData<'a> {
    Images(&'a ImageDataset),
    Scenes(&'a SceneDataset),
}

impl<T: Real> Trainer<T> {
    pub fn new(learner: MetaLearner<T>, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        // keep batch sampling independent of the stream used to initialize
        rng.set_stream(0x7261_696e);
        Ok(Trainer {
            adam: Adam::new(AdamConfig {
                lr: cfg.lr,
                ..AdamConfig::default()
            }),
            schedule: LrSchedule::from_config(&cfg),
            learner,
            rng,
            step: 0,
            cfg,
        })
    }

    fn pixel_subset(&mut self, n: usize) -> Option<Vec<usize>> {
        let k = self.cfg.pixels_per_step;
        if k == 0 || k >= n {
            None
        } else {
            Some((0..k).map(|_| self.rng.random_range(0..n)).collect())
        }
    }

    /// Samples a batch from the train split.
    pub fn sample_batch<'a>(&mut self, data: TrainData<'a>) -> Result<Batch<'a>> {
        match data {
            TrainData::Images(ds) => {
                if self.learner.config.inr.mode != InrMode::Image {
                    return Err(Error::invalid("train", "image data needs an image meta-learner"));
                }
                let pool = ds.indices(Split::Train);
                if pool.is_empty() {
                    return Err(Error::invalid("train", "empty train split"));
                }
                let mut items = Vec::with_capacity(self.cfg.batch_size);
                for _ in 0..self.cfg.batch_size {
                    let img = &ds.images[pool[self.rng.random_range(0..pool.len())]];
                    let img = if self.cfg.crop_pad > 0 {
                        Cow::Owned(random_crop(img, self.cfg.crop_pad, &mut self.rng))
                    } else {
                        Cow::Borrowed(img)
                    };
                    let px = self.pixel_subset(img.num_pixels());
                    items.push((img, px));
                }
                Ok(Batch::Images(items))
            }
            TrainData::Scenes(ds) => {
                if self.learner.config.inr.mode != InrMode::RadianceField {
                    return Err(Error::invalid("train", "scene data needs a radiance-field meta-learner"));
                }
                let pool = ds.indices(Split::Train);
                if pool.is_empty() {
                    return Err(Error::invalid("train", "empty train split"));
                }
                let nv = ds.config.views;
                let need = self.cfg.input_views + usize::from(self.cfg.mode == LossMode::Generalize);
                if nv < need {
                    return Err(Error::invalid("train", format!("{need} views per task but scenes have {nv}")));
                }
                let epoch = self.step * self.cfg.batch_size / pool.len();
                let mut tasks = Vec::with_capacity(self.cfg.batch_size);
                for _ in 0..self.cfg.batch_size {
                    let scene = &ds.scenes[pool[self.rng.random_range(0..pool.len())]];
                    let k = self.rng.random_range(1..=self.cfg.input_views);
                    let picked = rand::seq::index::sample(&mut self.rng, nv, k + usize::from(self.cfg.mode == LossMode::Generalize));
                    let picked: Vec<usize> = picked.into_iter().collect();
                    let inputs: Vec<ViewObservation> = picked[..k].iter().map(|&i| scene.views[i].clone()).collect();
                    let targets: Vec<&ViewObservation> = match self.cfg.mode {
                        LossMode::Reconstruct => picked[..k].iter().map(|&i| &scene.views[i]).collect(),
                        LossMode::Generalize => vec![&scene.views[picked[k]]],
                    };
                    let pixels = targets
                        .iter()
                        .map(|v| {
                            let n = v.rgb.num_pixels();
                            let k = self.cfg.pixels_per_step;
                            if k == 0 || k >= n {
                                None
                            } else {
                                Some(adaptive_pixel_sample(&v.rgb, k, 0.5, epoch, &mut self.rng).indices)
                            }
                        })
                        .collect();
                    tasks.push(SceneTask { inputs, targets, pixels });
                }
                Ok(Batch::Scenes {
                    tasks,
                    near: ds.config.near,
                    far: ds.config.far,
                    render: ds.config.render.clone(),
                })
            }
        }
    }

    pub fn step(&mut self, data: TrainData<'_>) -> Result<StepReport> {
        let batch = self.sample_batch(data)?;
        let lr = self.schedule.lr();
        let loss = meta_step(&mut self.learner, &mut self.adam, &batch, lr)?;
        self.schedule.observe(loss);
        self.step += 1;
        Ok(StepReport {
            step: self.step,
            loss,
            lr,
        })
    }
}

/// Feed-forward generation followed by `steps` of test-time optimization on
/// the input views of a scene.
pub fn infer_views<T: Real>(
    ml: &MetaLearner<T>,
    inputs: &[ViewObservation],
    scene: &SceneConfig,
    steps: usize,
    lr: f64,
) -> Result<TtoResult<T>> {
    let (ws, _) = ml.generate_weights(Observation::Views(inputs))?;
    tto(
        &ws,
        TtoTarget::Views {
            views: inputs,
            near: scene.near,
            far: scene.far,
            render: &scene.render,
        },
        steps,
        lr,
    )
}
