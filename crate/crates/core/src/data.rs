//! Procedural image sets, analytic sphere scenes with rendered views, and PNG
//! folder ingestion.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::raster::Image;
use crate::render::{rays_from_camera, render_field, Camera, Field, RenderConfig, Vec3};
use crate::tokenizer::ViewObservation;
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ImageSpec {
    /// Two-tone linear gradient in a random direction.
    Gradient,
    /// A few soft Gaussian blobs over a flat background.
    Blobs,
    /// Two-colour checkerboard with additive noise.
    CheckerNoise,
}

impl FromStr for ImageSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gradient" => Ok(ImageSpec::Gradient),
            "blobs" => Ok(ImageSpec::Blobs),
            "checker-noise" => Ok(ImageSpec::CheckerNoise),
            _ => Err(Error::invalid(
                "image_spec",
                format!("unknown generator `{s}` (expected gradient, blobs or checker-noise)"),
            )),
        }
    }
}

impl fmt::Display for ImageSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ImageSpec::Gradient => "gradient",
            ImageSpec::Blobs => "blobs",
            ImageSpec::CheckerNoise => "checker-noise",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Item counts per split; items are laid out train, then val, then test.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }

    fn labels(&self) -> Vec<Split> {
        let mut v = vec![Split::Train; self.train];
        v.extend(std::iter::repeat_n(Split::Val, self.val));
        v.extend(std::iter::repeat_n(Split::Test, self.test));
        v
    }
}

/// Item `i` draws from its own stream so items never share randomness.
fn item_rng(seed: u64, i: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(i as u64 + 1);
    rng
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageDataset {
    pub generator: Option<ImageSpec>,
    pub seed: u64,
    pub images: Vec<Image>,
    pub splits: Vec<Split>,
    /// Source files for folder datasets.
    pub files: Vec<PathBuf>,
}

impl ImageDataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn split(&self, split: Split) -> Vec<&Image> {
        self.indices(split).into_iter().map(|i| &self.images[i]).collect()
    }

    pub fn manifest(&self) -> Manifest {
        let (h, w) = self.images.first().map_or((0, 0), |im| (im.height(), im.width()));
        Manifest {
            kind: DatasetKind::Images,
            generator: self.generator.map(|g| g.to_string()),
            seed: self.seed,
            height: h,
            width: w,
            items: (0..self.len())
                .map(|i| ManifestItem {
                    index: i,
                    split: self.splits[i],
                    file: self.files.get(i).map(|p| p.display().to_string()),
                    poses: Vec::new(),
                    field: None,
                })
                .collect(),
        }
    }
}

fn lerp3(a: Vec3, b: Vec3, t: f64) -> Vec3 {
    [a[0] + (b[0] - a[0]) * t, a[1] + (b[1] - a[1]) * t, a[2] + (b[2] - a[2]) * t]
}

fn random_color<R: Rng>(rng: &mut R) -> Vec3 {
    [rng.random(), rng.random(), rng.random()]
}

fn gen_one<R: Rng>(spec: ImageSpec, h: usize, w: usize, rng: &mut R) -> Image {
    // pixel centres in [0, 1]
    let y = |r: usize| (r as f64 + 0.5) / h as f64;
    let x = |c: usize| (c as f64 + 0.5) / w as f64;
    match spec {
        ImageSpec::Gradient => {
            let (c0, c1) = (random_color(rng), random_color(rng));
            let angle = rng.random_range(0.0..std::f64::consts::TAU);
            let (dy, dx) = angle.sin_cos();
            let proj = |r: usize, c: usize| x(c) * dx + y(r) * dy;
            let corners = [proj(0, 0), proj(0, w - 1), proj(h - 1, 0), proj(h - 1, w - 1)];
            let lo = corners.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = corners.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let span = (hi - lo).max(1e-12);
            Image::from_fn(h, w, 3, |r, c, k| lerp3(c0, c1, (proj(r, c) - lo) / span)[k])
        }
        ImageSpec::Blobs => {
            let bg = random_color(rng);
            let n = rng.random_range(2..=4);
            let blobs: Vec<(f64, f64, f64, Vec3)> = (0..n)
                .map(|_| {
                    (
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.1..0.9),
                        rng.random_range(0.08..0.25),
                        random_color(rng),
                    )
                })
                .collect();
            let mut img = Image::filled(h, w, 3, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let mut px = bg;
                    for &(by, bx, s, col) in &blobs {
                        let d2 = (y(r) - by).powi(2) + (x(c) - bx).powi(2);
                        px = lerp3(px, col, (-d2 / (2.0 * s * s)).exp());
                    }
                    let i = (r * w + c) * 3;
                    img.data_mut()[i..i + 3].copy_from_slice(&px);
                }
            }
            img
        }
        ImageSpec::CheckerNoise => {
            let (c0, c1) = (random_color(rng), random_color(rng));
            let cell = rng.random_range(2..=5usize);
            let (oy, ox) = (rng.random_range(0..cell), rng.random_range(0..cell));
            let mut img = Image::filled(h, w, 3, 0.0);
            for r in 0..h {
                for c in 0..w {
                    let base = if ((r + oy) / cell + (c + ox) / cell) % 2 == 0 { c0 } else { c1 };
                    for (k, b) in base.iter().enumerate() {
                        let v = b + rng.random_range(-0.05..0.05);
                        img.data_mut()[(r * w + c) * 3 + k] = v.clamp(0.0, 1.0);
                    }
                }
            }
            img
        }
    }
}

/// Deterministic procedural images with values in `[0, 1]`.
pub fn gen_images(spec: ImageSpec, sizes: SplitSizes, height: usize, width: usize, seed: u64) -> ImageDataset {
    let images = (0..sizes.total())
        .into_par_iter()
        .map(|i| gen_one(spec, height, width, &mut item_rng(seed, i)))
        .collect();
    ImageDataset {
        generator: Some(spec),
        seed,
        images,
        splits: sizes.labels(),
        files: Vec::new(),
    }
}

/// PNG files in lexicographic order, bilinearly resized to
/// `resolution x resolution`. Unreadable files are skipped with a warning.
pub fn load_image_folder(path: &Path, resolution: usize) -> Result<ImageDataset> {
    let io = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let mut files: Vec<PathBuf> = std::fs::read_dir(path)
        .map_err(io)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("png")))
        .collect();
    files.sort();
    let mut images = Vec::new();
    let mut kept = Vec::new();
    for f in files {
        match image::open(&f) {
            Ok(img) => {
                let r = resolution as u32;
                let resized = img.resize_exact(r, r, image::imageops::FilterType::Triangle);
                images.push(Image::from_dynamic(&resized));
                kept.push(f);
            }
            Err(e) => log::warn!("skipping {}: {e}", f.display()),
        }
    }
    if images.is_empty() {
        return Err(Error::invalid(
            "load_image_folder",
            format!("no readable PNG files in {}", path.display()),
        ));
    }
    Ok(ImageDataset {
        generator: None,
        seed: 0,
        splits: vec![Split::Train; images.len()],
        images,
        files: kept,
    })
}

/// RandomCrop augmentation: reflect-pad by `pad` pixels, then cut a window of
/// the original size at a uniformly random offset.
pub fn random_crop<R: Rng + ?Sized>(img: &Image, pad: usize, rng: &mut R) -> Image {
    if pad == 0 {
        return img.clone();
    }
    let (h, w) = (img.height() as isize, img.width() as isize);
    let reflect = |i: isize, n: isize| -> usize {
        let period = 2 * (n - 1).max(1);
        let m = i.rem_euclid(period);
        (if m < n { m } else { period - m }) as usize
    };
    let dy = rng.random_range(0..=2 * pad) as isize - pad as isize;
    let dx = rng.random_range(0..=2 * pad) as isize - pad as isize;
    Image::from_fn(img.height(), img.width(), img.channels(), |r, c, k| {
        img.get(reflect(r as isize + dy, h), reflect(c as isize + dx, w), k)
    })
}

/// Emissive-absorbing sphere with a smoothstep falloff over its outer shell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sphere {
    pub center: Vec3,
    pub radius: f64,
    pub density: f64,
    pub color: Vec3,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SphereField {
    pub spheres: Vec<Sphere>,
    /// Shell thickness as a fraction of the radius.
    pub softness: f64,
}

fn smoothstep(e0: f64, e1: f64, x: f64) -> f64 {
    let t = ((x - e0) / (e1 - e0)).clamp(0.0, 1.0);
    t * t * (3.0 - 2.0 * t)
}

impl Field for SphereField {
    fn query(&self, p: Vec3, _dir: Vec3) -> (f64, Vec3) {
        let mut sigma = 0.0;
        let mut col = [0.0; 3];
        for s in &self.spheres {
            let d = ((p[0] - s.center[0]).powi(2) + (p[1] - s.center[1]).powi(2) + (p[2] - s.center[2]).powi(2)).sqrt();
            let inner = s.radius * (1.0 - self.softness);
            let w = s.density * (1.0 - smoothstep(inner, s.radius, d));
            sigma += w;
            for (c, sc) in col.iter_mut().zip(s.color) {
                *c += w * sc;
            }
        }
        if sigma > 0.0 {
            for c in &mut col {
                *c /= sigma;
            }
            (sigma, col)
        } else {
            (0.0, [1.0; 3])
        }
    }
}

/// Viewing setup shared by every scene of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub resolution: usize,
    pub views: usize,
    /// Camera distance from the origin.
    pub distance: f64,
    /// Focal length in units of the image width.
    pub focal: f64,
    pub near: f64,
    pub far: f64,
    pub render: RenderConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            resolution: 16,
            views: 25,
            distance: 4.0,
            focal: 1.5,
            near: 2.5,
            far: 5.5,
            render: RenderConfig {
                bound: 2.5,
                ..RenderConfig::default()
            },
        }
    }
}

impl SceneConfig {
    /// Cameras on a Fibonacci lattice over the sphere of radius `distance`,
    /// all looking at the origin.
    pub fn cameras(&self) -> Vec<Camera> {
        let n = self.views;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        (0..n)
            .map(|i| {
                let z = 1.0 - (2.0 * i as f64 + 1.0) / n as f64;
                let r = (1.0 - z * z).sqrt();
                let phi = golden * i as f64;
                let eye = [self.distance * r * phi.cos(), self.distance * r * phi.sin(), self.distance * z];
                Camera::look_at(
                    eye,
                    [0.0; 3],
                    [0.0, 0.0, 1.0],
                    self.focal * self.resolution as f64,
                    self.resolution,
                    self.resolution,
                )
            })
            .collect()
    }

    pub fn render_view(&self, field: &impl Field, camera: &Camera) -> Result<Image> {
        let rays = rays_from_camera(camera, self.near, self.far)?;
        let comps = render_field(field, &rays, &self.render);
        let data = comps.iter().flat_map(|c| c.color).collect();
        Image::new(camera.height, camera.width, 3, data)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scene {
    pub field: SphereField,
    pub views: Vec<ViewObservation>,
}

impl Scene {
    /// Renders every view again from the stored field and poses.
    pub fn rerender(&self, cfg: &SceneConfig) -> Result<Vec<Image>> {
        self.views.iter().map(|v| cfg.render_view(&self.field, &v.camera)).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneDataset {
    pub config: SceneConfig,
    pub seed: u64,
    pub scenes: Vec<Scene>,
    pub splits: Vec<Split>,
}

impl SceneDataset {
    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    pub fn indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn manifest(&self) -> Manifest {
        Manifest {
            kind: DatasetKind::Scenes,
            generator: Some("spheres".to_string()),
            seed: self.seed,
            height: self.config.resolution,
            width: self.config.resolution,
            items: self
                .scenes
                .iter()
                .enumerate()
                .map(|(i, s)| ManifestItem {
                    index: i,
                    split: self.splits[i],
                    file: None,
                    poses: s.views.iter().map(|v| v.camera.pose_row_major().to_vec()).collect(),
                    field: Some(s.field.clone()),
                })
                .collect(),
        }
    }
}

fn random_field<R: Rng>(rng: &mut R) -> SphereField {
    let n = rng.random_range(1..=3);
    let spheres = (0..n)
        .map(|_| {
            let c: Vec3 = [
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
                rng.random_range(-0.5..0.5),
            ];
            Sphere {
                center: c,
                radius: rng.random_range(0.35..0.7),
                density: rng.random_range(10.0..30.0),
                color: [
                    rng.random_range(0.05..0.9),
                    rng.random_range(0.05..0.9),
                    rng.random_range(0.05..0.9),
                ],
            }
        })
        .collect();
    SphereField { spheres, softness: 0.2 }
}

pub fn scene_from_field(field: SphereField, cfg: &SceneConfig) -> Result<Scene> {
    let views = cfg
        .cameras()
        .into_iter()
        .map(|camera| {
            Ok(ViewObservation {
                rgb: cfg.render_view(&field, &camera)?,
                camera,
            })
        })
        .collect::<Result<_>>()?;
    Ok(Scene { field, views })
}

/// Random sphere scenes, each with `cfg.views` rendered views on white.
pub fn gen_scenes(sizes: SplitSizes, cfg: &SceneConfig, seed: u64) -> Result<SceneDataset> {
    cfg.render.validate()?;
    if cfg.views == 0 || cfg.resolution == 0 {
        return Err(Error::invalid("gen_scenes", "need at least one view of positive resolution"));
    }
    let scenes = (0..sizes.total())
        .into_par_iter()
        .map(|i| scene_from_field(random_field(&mut item_rng(seed, i)), cfg))
        .collect::<Result<Vec<_>>>()?;
    Ok(SceneDataset {
        config: cfg.clone(),
        seed,
        scenes,
        splits: sizes.labels(),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Images,
    Scenes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestItem {
    pub index: usize,
    pub split: Split,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub file: Option<String>,
    /// Row-major `[R | t]` per view.
    #[serde(skip_serializing_if = "Vec::is_empty", default)]
    pub poses: Vec<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub field: Option<SphereField>,
}

/// JSON description of a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kind: DatasetKind,
    pub generator: Option<String>,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub items: Vec<ManifestItem>,
}

impl Manifest {
    pub fn write(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::invalid("manifest", e.to_string()))?;
        std::fs::write(path, json).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })
    }

    pub fn read(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        serde_json::from_str(&text).map_err(|e| Error::Decode {
            path: path.to_path_buf(),
            msg: e.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SIZES: SplitSizes = SplitSizes {
        train: 6,
        val: 1,
        test: 2,
    };

    #[test]
    fn generators_are_deterministic_and_in_range() {
        for spec in [ImageSpec::Gradient, ImageSpec::Blobs, ImageSpec::CheckerNoise] {
            let a = gen_images(spec, SIZES, 16, 16, 7);
            let b = gen_images(spec, SIZES, 16, 16, 7);
            assert_eq!(a, b);
            assert_eq!(a.len(), 9);
            assert_eq!(a.indices(Split::Test), vec![7, 8]);
            for img in &a.images {
                assert!(img.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            }
            assert_ne!(gen_images(spec, SIZES, 16, 16, 8), a);
            assert_ne!(a.images[0], a.images[1]);
        }
    }

    #[test]
    fn sixty_four_images() {
        let d = gen_images(
            ImageSpec::Blobs,
            SplitSizes {
                train: 64,
                val: 0,
                test: 0,
            },
            16,
            16,
            0,
        );
        assert_eq!(d.len(), 64);
        assert_eq!(d.images[0].height(), 16);
    }

    #[test]
    fn gradient_rows_are_monotone() {
        let d = gen_images(ImageSpec::Gradient, SIZES, 12, 10, 3);
        for img in &d.images {
            for r in 0..12 {
                let row: Vec<f64> = (0..10).map(|c| (0..3).map(|k| img.get(r, c, k)).sum::<f64>()).collect();
                let up = row.windows(2).all(|w| w[1] >= w[0] - 1e-12);
                let down = row.windows(2).all(|w| w[1] <= w[0] + 1e-12);
                assert!(up || down, "{row:?}");
            }
        }
    }

    #[test]
    fn random_crop_is_a_reflected_shift() {
        let img = Image::from_fn(6, 5, 3, |r, c, k| (r * 100 + c * 10 + k) as f64);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert_eq!(random_crop(&img, 0, &mut rng), img);
        let mut seen = std::collections::HashSet::new();
        for _ in 0..200 {
            let out = random_crop(&img, 2, &mut rng);
            assert_eq!((out.height(), out.width()), (6, 5));
            // every output pixel is some input pixel of the same channel
            assert!(out.data().iter().enumerate().all(|(i, &v)| (v as usize) % 10 == i % 3));
            // interior pixel shifted by (dy, dx) with |dy|, |dx| <= 2
            let v = out.get(2, 2, 0) as usize;
            let (r, c) = (v / 100, (v / 10) % 10);
            assert!(r.abs_diff(2) <= 2 && c.abs_diff(2) <= 2);
            seen.insert((r, c));
        }
        assert_eq!(seen.len(), 25);
    }

    #[test]
    fn spec_names_round_trip() {
        for spec in [ImageSpec::Gradient, ImageSpec::Blobs, ImageSpec::CheckerNoise] {
            assert_eq!(spec.to_string().parse::<ImageSpec>().unwrap(), spec);
        }
        assert!("celeba".parse::<ImageSpec>().is_err());
    }

    fn small_cfg() -> SceneConfig {
        SceneConfig {
            resolution: 12,
            views: 25,
            render: RenderConfig {
                samples: 64,
                ..RenderConfig::default()
            },
            ..SceneConfig::default()
        }
    }

    #[test]
    fn empty_scene_renders_white() {
        let cfg = small_cfg();
        let s = scene_from_field(
            SphereField {
                spheres: vec![],
                softness: 0.2,
            },
            &cfg,
        )
        .unwrap();
        for v in &s.views {
            assert!(v.rgb.data().iter().all(|&x| x == 1.0));
        }
    }

    #[test]
    fn poses_are_distinct_and_look_at_origin() {
        let cfg = small_cfg();
        let cams = cfg.cameras();
        assert_eq!(cams.len(), 25);
        for (i, a) in cams.iter().enumerate() {
            let d = (a.position.iter().map(|x| x * x).sum::<f64>()).sqrt();
            assert!((d - cfg.distance).abs() < 1e-12);
            // backward axis points from the origin to the eye
            for k in 0..3 {
                assert!((a.rotation[k][2] - a.position[k] / d).abs() < 1e-12);
            }
            for b in &cams[i + 1..] {
                assert_ne!(a.pose_row_major(), b.pose_row_major());
            }
        }
    }

    #[test]
    fn centred_sphere_silhouette_is_view_independent() {
        // Opaque sphere of radius r at distance d: the silhouette's angular
        // radius is asin(r / d), i.e. f * tan(asin(r / d)) pixels.
        let cfg = SceneConfig {
            resolution: 32,
            views: 25,
            render: RenderConfig {
                samples: 256,
                ..RenderConfig::default()
            },
            ..SceneConfig::default()
        };
        let r = 0.8;
        let field = SphereField {
            spheres: vec![Sphere {
                center: [0.0; 3],
                radius: r,
                density: 200.0,
                color: [0.0; 3],
            }],
            softness: 0.01,
        };
        let f = cfg.focal * cfg.resolution as f64;
        let expected = f * (r / cfg.distance).asin().tan();
        let scene = scene_from_field(field, &cfg).unwrap();
        for v in &scene.views {
            let covered = v.rgb.data().chunks(3).filter(|p| p[0] < 0.5).count() as f64;
            let radius = (covered / std::f64::consts::PI).sqrt();
            assert!((radius - expected).abs() < 1.0, "{radius} vs {expected}");
        }
    }

    #[test]
    fn scenes_regenerate_from_stored_parameters() {
        let cfg = SceneConfig {
            resolution: 8,
            views: 4,
            ..SceneConfig::default()
        };
        let d = gen_scenes(SIZES, &cfg, 5).unwrap();
        assert_eq!(d, gen_scenes(SIZES, &cfg, 5).unwrap());
        let m = d.manifest();
        assert_eq!(m.items[0].poses[0].len(), 12);
        for (item, scene) in m.items.iter().zip(&d.scenes) {
            let cams: Vec<Camera> = item
                .poses
                .iter()
                .zip(&scene.views)
                .map(|(p, v)| v.camera.with_pose_row_major(&p.clone().try_into().unwrap()))
                .collect();
            let rebuilt = Scene {
                field: item.field.clone().unwrap(),
                views: cams
                    .into_iter()
                    .map(|camera| ViewObservation {
                        rgb: Image::filled(8, 8, 3, 0.0),
                        camera,
                    })
                    .collect(),
            };
            let imgs = rebuilt.rerender(&cfg).unwrap();
            for (a, b) in imgs.iter().zip(&scene.views) {
                assert_eq!(a, &b.rgb);
            }
        }
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.json");
        m.write(&p).unwrap();
        assert_eq!(Manifest::read(&p).unwrap(), m);
    }

    #[test]
    fn folder_loading() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_image_folder(dir.path(), 8).is_err());
        Image::filled(4, 4, 3, 0.0).save_png(&dir.path().join("b.png")).unwrap();
        Image::filled(4, 4, 3, 1.0).save_png(&dir.path().join("a.png")).unwrap();
        Image::filled(6, 6, 3, 0.5).save_png(&dir.path().join("c.png")).unwrap();
        std::fs::write(dir.path().join("d.png"), b"not a png").unwrap();
        std::fs::write(dir.path().join("notes.txt"), b"ignored").unwrap();
        let d = load_image_folder(dir.path(), 8).unwrap();
        assert_eq!(d.len(), 3);
        assert!(d.images[0].data().iter().all(|&x| x == 1.0));
        assert!(d.images[1].data().iter().all(|&x| x == 0.0));
        assert_eq!(d.images[2].height(), 8);
        assert_eq!(d, load_image_folder(dir.path(), 8).unwrap());
    }
}
