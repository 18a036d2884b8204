//! Flat TOML run configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use tinr_core::analysis::ViewProtocol;
use tinr_core::data::{ImageSpec, SceneConfig, SplitSizes};
use tinr_core::render::RenderConfig;
use tinr_core::{Error, HypernetConfig, InrArch, LossMode, TrainConfig};

use crate::error::{CliError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Image,
    ViewSynthesis,
}

/// Every key of a run. Missing keys take the [`Default`] values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub task: Task,
    pub out_dir: PathBuf,

    pub inr_depth: usize,
    pub inr_width: usize,
    pub coord_bands: usize,
    pub dir_bands: usize,

    pub groups: usize,
    pub dim: usize,
    pub encoder_layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub pad: usize,

    /// `gradient`, `blobs`, `checker-noise` or `folder` for images,
    /// `spheres` for view synthesis.
    pub dataset: String,
    pub dataset_path: Option<PathBuf>,
    pub resolution: usize,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub data_seed: u64,
    pub views: usize,
    pub samples: usize,
    /// Evaluation views of each scene; both empty picks a default spread.
    pub eval_inputs: Vec<usize>,
    pub eval_novel: Vec<usize>,

    pub lr: f64,
    pub patience: usize,
    pub decay: f64,
    pub smoothing: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub mode: LossMode,
    pub seed: u64,
    pub pixels_per_step: usize,
    pub input_views: usize,
    pub crop_pad: usize,
    pub tto_steps: usize,
    pub tto_lr: f64,

    /// Validation PSNR every this many steps; 0 disables it.
    pub log_every: usize,
    /// Extra checkpoint every this many steps; 0 keeps only the final one.
    pub checkpoint_every: usize,
}

impl Default for Config {
    fn default() -> Self {
        let t = TrainConfig::default();
        Config {
            task: Task::Image,
            out_dir: PathBuf::from("runs/default"),
            inr_depth: 3,
            inr_width: 32,
            coord_bands: 4,
            dir_bands: 0,
            groups: 8,
            dim: 64,
            encoder_layers: 2,
            heads: 4,
            ffn_dim: 128,
            patch: 4,
            pad: 0,
            dataset: "blobs".to_string(),
            dataset_path: None,
            resolution: 16,
            n_train: 64,
            n_val: 8,
            n_test: 16,
            data_seed: 0,
            views: 25,
            samples: 24,
            eval_inputs: Vec::new(),
            eval_novel: Vec::new(),
            lr: t.lr,
            patience: t.patience,
            decay: t.decay,
            smoothing: t.smoothing,
            batch_size: t.batch_size,
            max_steps: t.max_steps,
            mode: t.mode,
            seed: t.seed,
            pixels_per_step: t.pixels_per_step,
            input_views: t.input_views,
            crop_pad: t.crop_pad,
            tto_steps: t.tto_steps,
            tto_lr: t.tto_lr,
            log_every: 100,
            checkpoint_every: 0,
        }
    }
}

/// Where the training data comes from.
#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Generated(ImageSpec),
    Folder(PathBuf),
    Spheres,
}

impl Config {
    pub fn load(path: &Path) -> Result<Config> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
        Config::parse(&text).map_err(|e| match e {
            CliError::Usage(msg) => CliError::Usage(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    /// Parses and validates a TOML document.
    pub fn parse(text: &str) -> Result<Config> {
        let cfg: Config = toml::from_str(text).map_err(|e| CliError::Usage(format!("invalid config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn inr_arch(&self) -> InrArch {
        match self.task {
            Task::Image => InrArch::image(self.inr_depth, self.inr_width, self.coord_bands),
            Task::ViewSynthesis => InrArch::radiance(self.inr_depth, self.inr_width, self.coord_bands, self.dir_bands),
        }
    }

    pub fn hypernet(&self) -> HypernetConfig {
        HypernetConfig {
            inr: self.inr_arch(),
            groups: self.groups,
            dim: self.dim,
            layers: self.encoder_layers,
            heads: self.heads,
            ffn_dim: self.ffn_dim,
            patch: self.patch,
            pad: self.pad,
            height: self.resolution,
            width: self.resolution,
        }
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            lr: self.lr,
            patience: self.patience,
            decay: self.decay,
            smoothing: self.smoothing,
            batch_size: self.batch_size,
            max_steps: self.max_steps,
            mode: self.mode,
            seed: self.seed,
            pixels_per_step: self.pixels_per_step,
            input_views: self.input_views,
            crop_pad: self.crop_pad,
            tto_steps: self.tto_steps,
            tto_lr: self.tto_lr,
        }
    }

    pub fn scene(&self) -> SceneConfig {
        let base = SceneConfig::default();
        SceneConfig {
            resolution: self.resolution,
            views: self.views,
            render: RenderConfig {
                samples: self.samples,
                ..base.render.clone()
            },
            ..base
        }
    }

    pub fn protocol(&self) -> Result<ViewProtocol> {
        if self.eval_inputs.is_empty() && self.eval_novel.is_empty() {
            Ok(ViewProtocol::spread(self.views)?)
        } else {
            Ok(ViewProtocol {
                inputs: self.eval_inputs.clone(),
                novel: self.eval_novel.clone(),
            })
        }
    }

    pub fn splits(&self) -> SplitSizes {
        SplitSizes {
            train: self.n_train,
            val: self.n_val,
            test: self.n_test,
        }
    }

    pub fn source(&self) -> Result<DataSource> {
        match (self.task, self.dataset.as_str()) {
            (Task::Image, "folder") => match &self.dataset_path {
                Some(p) => Ok(DataSource::Folder(p.clone())),
                None => Err(CliError::config("dataset_path", "required when dataset = \"folder\"")),
            },
            (Task::Image, name) => name
                .parse::<ImageSpec>()
                .map(DataSource::Generated)
                .map_err(|_| {
                    CliError::config(
                        "dataset",
                        format!("`{name}` is not an image dataset (gradient, blobs, checker-noise or folder)"),
                    )
                }),
            (Task::ViewSynthesis, "spheres") => Ok(DataSource::Spheres),
            (Task::ViewSynthesis, name) => Err(CliError::config(
                "dataset",
                format!("`{name}` is not a view-synthesis dataset (spheres)"),
            )),
        }
    }

    /// Checks every field before any work starts.
    pub fn validate(&self) -> Result<()> {
        self.source()?;
        if self.resolution == 0 {
            return Err(CliError::config("resolution", "must be positive"));
        }
        if self.n_train == 0 {
            return Err(CliError::config("n_train", "must be positive"));
        }
        if self.inr_depth < 2 {
            return Err(CliError::config("inr_depth", format!("must be at least 2, got {}", self.inr_depth)));
        }
        if self.inr_width == 0 {
            return Err(CliError::config("inr_width", "must be positive"));
        }
        if self.groups == 0 {
            return Err(CliError::config("groups", "must be positive"));
        }
        let hn = self.hypernet();
        if let Err(e @ Error::Layout { .. }) = hn.layout() {
            return Err(CliError::config("groups", e.to_string()));
        }
        if self.encoder_layers == 0 {
            return Err(CliError::config("encoder_layers", "must be positive"));
        }
        if self.ffn_dim == 0 {
            return Err(CliError::config("ffn_dim", "must be positive"));
        }
        if self.heads == 0 || self.dim == 0 || !self.dim.is_multiple_of(self.heads) {
            return Err(CliError::config(
                "heads",
                format!("dim {} is not divisible into {} heads", self.dim, self.heads),
            ));
        }
        let side = self.resolution + 2 * self.pad;
        if self.patch == 0 || !side.is_multiple_of(self.patch) {
            return Err(CliError::config(
                "patch",
                format!(
                    "resolution {} with pad {} does not tile into {}-pixel patches",
                    self.resolution, self.pad, self.patch
                ),
            ));
        }
        hn.validate()?;
        if let Err(Error::InvalidArgument { msg, .. }) = self.train().validate() {
            let (field, msg) = msg.split_once(": ").unwrap_or(("train", msg.as_str()));
            return Err(CliError::config(field, msg));
        }
        if self.crop_pad >= self.resolution {
            return Err(CliError::config(
                "crop_pad",
                format!("must be smaller than the resolution {}", self.resolution),
            ));
        }
        if self.task == Task::ViewSynthesis {
            if self.samples < 2 {
                return Err(CliError::config("samples", "need at least 2 samples per ray"));
            }
            let need = self.input_views + usize::from(self.mode == LossMode::Generalize);
            if self.views < need {
                return Err(CliError::config("views", format!("tasks need {need} views per scene")));
            }
            let protocol = self
                .protocol()
                .map_err(|e| CliError::config("views", e.to_string()))?;
            protocol
                .validate(self.views)
                .map_err(|e| CliError::config("eval_inputs", e.to_string()))?;
        }
        Ok(())
    }
}
