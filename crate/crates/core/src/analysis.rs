//! PSNR evaluation, the weight-group ablation harness and attention masks.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Scene, SceneConfig, SceneDataset, Split};
use crate::diff::{Graph, Real};
use crate::hypernet::{MetaLearner, Observation};
use crate::inr::{pixel_centers, InrMode, WeightSet};
use crate::raster::Image;
use crate::render::{rays_from_camera, volume_render, Camera, RenderConfig};
use crate::tokenizer::ViewObservation;
use crate::train::{tto, TtoTarget};
use crate::{Error, Result};

/// Reported in place of +inf for identical images.
pub const PSNR_CAP: f64 = 99.0;

pub fn mse(pred: &Image, gt: &Image) -> Result<f64> {
    if (pred.height(), pred.width(), pred.channels()) != (gt.height(), gt.width(), gt.channels()) {
        return Err(Error::shape(
            "psnr",
            &[pred.height(), pred.width(), pred.channels()],
            &[gt.height(), gt.width(), gt.channels()],
        ));
    }
    let n = pred.data().len() as f64;
    Ok(pred.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// `10 log10(1 / MSE)` over all pixels and channels, capped at [`PSNR_CAP`].
pub fn psnr(pred: &Image, gt: &Image) -> Result<f64> {
    let m = mse(pred, gt)?;
    if m == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (1.0 / m).log10()).min(PSNR_CAP))
}

/// PSNR of the best constant colour (the per-channel mean) for `img`.
pub fn best_constant_psnr(img: &Image) -> Result<f64> {
    let mean = img.mean_color();
    let flat = Image::from_fn(img.height(), img.width(), img.channels(), |_, _, k| mean[k]);
    psnr(&flat, img)
}

/// Evaluates an image INR on the full pixel grid.
pub fn predict_image<T: Real>(ws: &WeightSet<T>, height: usize, width: usize) -> Result<Image> {
    if ws.arch.mode != InrMode::Image {
        return Err(Error::invalid("predict_image", "INR is not an image INR"));
    }
    let out = ws.eval(&pixel_centers(height, width), None)?;
    Image::new(height, width, 3, out.to_f64())
}

/// Volume-renders a radiance-field INR from `camera`.
pub fn predict_view<T: Real>(ws: &WeightSet<T>, camera: &Camera, near: f64, far: f64, render: &RenderConfig) -> Result<Image> {
    let rays = rays_from_camera(camera, near, far)?;
    let mut g = Graph::new();
    let w = ws.bind(&mut g, false);
    let rgb = volume_render::<T, rand_chacha::ChaCha8Rng>(&mut g, &ws.arch, &w, &rays, render, None)?;
    Image::new(camera.height, camera.width, 3, g.value(rgb).to_f64())
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub psnr: Vec<f64>,
    pub baseline: Vec<f64>,
}

impl EvalReport {
    pub fn mean(&self) -> f64 {
        mean(&self.psnr)
    }

    pub fn baseline_mean(&self) -> f64 {
        mean(&self.baseline)
    }

    /// CSV with one row per image and a final mean row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("image,psnr,constant_baseline\n");
        for (i, (p, b)) in self.psnr.iter().zip(&self.baseline).enumerate() {
            s.push_str(&format!("{i},{p:.6},{b:.6}\n"));
        }
        s.push_str(&format!("mean,{:.6},{:.6}\n", self.mean(), self.baseline_mean()));
        s
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Generates an INR per image and scores the full reconstruction.
pub fn eval_image_regression<T: Real>(ml: &MetaLearner<T>, images: &[&Image]) -> Result<EvalReport> {
    let mut report = EvalReport {
        psnr: Vec::with_capacity(images.len()),
        baseline: Vec::with_capacity(images.len()),
    };
    for img in images {
        let (ws, _) = ml.generate_weights(Observation::Image(img))?;
        let pred = predict_image(&ws, img.height(), img.width())?;
        report.psnr.push(psnr(&pred, img)?);
        report.baseline.push(best_constant_psnr(img)?);
    }
    Ok(report)
}

/// Runs `run(G)` for every group count; `run` trains and evaluates one model.
pub fn ablate_groups(groups: &[usize], mut run: impl FnMut(usize) -> Result<f64>) -> Result<Vec<(usize, f64)>> {
    groups.iter().map(|&g| Ok((g, run(g)?))).collect()
}

pub fn ablation_csv(rows: &[(usize, f64)]) -> String {
    let mut s = String::from("groups,psnr\n");
    for (g, p) in rows {
        s.push_str(&format!("{g},{p:.6}\n"));
    }
    s
}

/// Which views of a scene are given to the meta-learner and which are held out.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewProtocol {
    pub inputs: Vec<usize>,
    pub novel: Vec<usize>,
}

impl ViewProtocol {
    /// Two inputs half the lattice apart and four novel views between them.
    pub fn spread(views: usize) -> Result<Self> {
        if views < 6 {
            return Err(Error::invalid("view protocol", format!("need at least 6 views, got {views}")));
        }
        let half = views / 2;
        let mut novel: Vec<usize> = [1, 3].iter().flat_map(|&q| [q * half / 4, half + q * (views - half) / 4]).collect();
        novel.sort_unstable();
        Ok(ViewProtocol {
            inputs: vec![0, half],
            novel,
        })
    }

    pub fn validate(&self, views: usize) -> Result<()> {
        if self.inputs.is_empty() || self.novel.is_empty() {
            return Err(Error::invalid("view protocol", "inputs and novel views must be non-empty"));
        }
        if let Some(v) = self.inputs.iter().chain(&self.novel).find(|&&v| v >= views) {
            return Err(Error::invalid("view protocol", format!("view {v} out of range for {views} views")));
        }
        if let Some(v) = self.novel.iter().find(|v| self.inputs.contains(v)) {
            return Err(Error::invalid("view protocol", format!("view {v} is both input and novel")));
        }
        Ok(())
    }
}

/// Scores of one scene under a [`ViewProtocol`].
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SceneEval {
    pub scene: usize,
    /// Feed-forward PSNR on the input views.
    pub input_psnr: f64,
    pub novel_psnr: f64,
    /// The same after test-time optimization on the input views.
    pub tto_input_psnr: f64,
    pub tto_novel_psnr: f64,
    /// Feed-forward novel-view PSNR from the first input view alone.
    pub one_view_novel_psnr: f64,
    /// Input-view loss after TTO from the generated weights.
    pub tto_loss: f64,
    /// Input-view loss after the same TTO from random weights.
    pub random_init_tto_loss: f64,
}

fn mean_view_psnr<T: Real>(ws: &WeightSet<T>, scene: &Scene, cfg: &SceneConfig, views: &[usize]) -> Result<f64> {
    let mut acc = Vec::with_capacity(views.len());
    for &i in views {
        let v = &scene.views[i];
        acc.push(psnr(&predict_view(ws, &v.camera, cfg.near, cfg.far, &cfg.render)?, &v.rgb)?);
    }
    Ok(mean(&acc))
}

/// Feed-forward, TTO, one-view and random-init scores for one scene.
///
/// The random initialization is drawn from `seed`.
#[allow(clippy::too_many_arguments)]
pub fn eval_scene<T: Real>(
    ml: &MetaLearner<T>,
    scene: &Scene,
    index: usize,
    cfg: &SceneConfig,
    protocol: &ViewProtocol,
    tto_steps: usize,
    tto_lr: f64,
    seed: u64,
) -> Result<SceneEval> {
    protocol.validate(scene.views.len())?;
    let inputs: Vec<ViewObservation> = protocol.inputs.iter().map(|&i| scene.views[i].clone()).collect();
    let target = |views| TtoTarget::Views {
        views,
        near: cfg.near,
        far: cfg.far,
        render: &cfg.render,
    };
    let (generated, _) = ml.generate_weights(Observation::Views(&inputs))?;
    let tuned = tto(&generated, target(&inputs), tto_steps, tto_lr)?;
    let (single, _) = ml.generate_weights(Observation::Views(&inputs[..1]))?;
    let random = WeightSet::<T>::random(ml.config.inr.clone(), &mut ChaCha8Rng::seed_from_u64(seed))?;
    let random = tto(&random, target(&inputs), tto_steps, tto_lr)?;
    Ok(SceneEval {
        scene: index,
        input_psnr: mean_view_psnr(&generated, scene, cfg, &protocol.inputs)?,
        novel_psnr: mean_view_psnr(&generated, scene, cfg, &protocol.novel)?,
        tto_input_psnr: mean_view_psnr(&tuned.weights, scene, cfg, &protocol.inputs)?,
        tto_novel_psnr: mean_view_psnr(&tuned.weights, scene, cfg, &protocol.novel)?,
        one_view_novel_psnr: mean_view_psnr(&single, scene, cfg, &protocol.novel)?,
        tto_loss: tuned.losses[tto_steps],
        random_init_tto_loss: random.losses[tto_steps],
    })
}

/// [`eval_scene`] over a split, in parallel over scenes.
pub fn eval_scenes<T: Real>(
    ml: &MetaLearner<T>,
    ds: &SceneDataset,
    split: Split,
    protocol: &ViewProtocol,
    tto_steps: usize,
    tto_lr: f64,
) -> Result<Vec<SceneEval>> {
    ds.indices(split)
        .into_par_iter()
        .map(|i| eval_scene(ml, &ds.scenes[i], i, &ds.config, protocol, tto_steps, tto_lr, ds.seed ^ i as u64))
        .collect()
}

pub fn scene_eval_csv(rows: &[SceneEval]) -> String {
    let mut s = String::from(
        "scene,input_psnr,novel_psnr,tto_input_psnr,tto_novel_psnr,one_view_novel_psnr,tto_loss,random_init_tto_loss\n",
    );
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.8},{:.8}\n",
            r.scene,
            r.input_psnr,
            r.novel_psnr,
            r.tto_input_psnr,
            r.tto_novel_psnr,
            r.one_view_novel_psnr,
            r.tto_loss,
            r.random_init_tto_loss
        ));
    }
    s
}

/// Final-layer attention of one weight token.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMap {
    pub layer: usize,
    /// Index within the layer's tokens.
    pub token: usize,
    pub rows: usize,
    pub cols: usize,
    /// Attention to each data token in patch-grid order (not renormalized).
    pub grid: Vec<f64>,
    /// Full row over data and weight tokens.
    pub row: Vec<f64>,
}

/// Head-averaged final-layer attention from every weight token to the patches
/// of `img`.
pub fn attention_maps<T: Real>(ml: &MetaLearner<T>, img: &Image) -> Result<Vec<AttentionMap>> {
    if ml.config.inr.mode != InrMode::Image {
        return Err(Error::invalid("attention", "attention masks are defined for image meta-learners"));
    }
    let (_, gen) = ml.generate_weights(Observation::Image(img))?;
    let layout = ml.config.layout()?;
    let (rows, cols) = ml.config.grid();
    let n_data = gen.data_tokens;
    let att = &gen.last_attention;
    let mut maps = Vec::with_capacity(layout.total_tokens());
    for (li, lg) in layout.layers.iter().enumerate() {
        for (j, t) in lg.tokens.clone().enumerate() {
            let row: Vec<f64> = att.row(n_data + t).iter().map(|x| x.f64()).collect();
            maps.push(AttentionMap {
                layer: li,
                token: j,
                rows,
                cols,
                grid: row[..n_data].to_vec(),
                row,
            });
        }
    }
    Ok(maps)
}

/// Bilinear upsampling of a patch-grid map to image resolution (undoing the
/// padding), divided by its maximum so values lie in `[0, 1]`.
pub fn upsample_mask(map: &AttentionMap, patch: usize, pad: usize, height: usize, width: usize) -> Image {
    let at = |r: usize, c: usize| map.grid[r * map.cols + c];
    let coord = |p: usize, n: usize| -> (usize, usize, f64) {
        let u = ((p + pad) as f64 + 0.5) / patch as f64 - 0.5;
        let u = u.clamp(0.0, (n - 1) as f64);
        let i0 = u.floor() as usize;
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, u - i0 as f64)
    };
    let mut mask = Image::from_fn(height, width, 1, |y, x, _| {
        let (r0, r1, fy) = coord(y, map.rows);
        let (c0, c1, fx) = coord(x, map.cols);
        let top = at(r0, c0) * (1.0 - fx) + at(r0, c1) * fx;
        let bot = at(r1, c0) * (1.0 - fx) + at(r1, c1) * fx;
        top * (1.0 - fy) + bot * fy
    });
    let max = mask.data().iter().cloned().fold(0.0, f64::max);
    if max > 0.0 {
        for v in mask.data_mut() {
            *v = (*v / max).clamp(0.0, 1.0);
        }
    }
    mask
}

/// `img` scaled pixelwise by a one-channel mask.
pub fn apply_mask(img: &Image, mask: &Image) -> Image {
    Image::from_fn(img.height(), img.width(), img.channels(), |r, c, k| img.get(r, c, k) * mask.get(r, c, 0))
}

/// Writes `attn_layer{i}_token{j}.png` for the chosen maps.
pub fn export_masks(dir: &Path, img: &Image, maps: &[AttentionMap], patch: usize, pad: usize) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })?;
    let mut out = Vec::with_capacity(maps.len());
    for m in maps {
        let mask = upsample_mask(m, patch, pad, img.height(), img.width());
        let path = dir.join(format!("attn_layer{}_token{}.png", m.layer, m.token));
        apply_mask(img, &mask).save_png(&path)?;
        out.push(path);
    }
    Ok(out)
}
