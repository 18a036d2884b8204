//! Pinhole cameras, stratified ray sampling and volumetric compositing.
//!
//! Compositing uses the usual quadrature: `alpha_j = 1 - exp(-sigma_j delta_j)`,
//! `T_j = prod_{l<j} (1 - alpha_l)`, color `= sum_j T_j alpha_j c_j + T_N * bg`.
//! The graph version evaluates `T_j` as `exp(-sum_{l<j} sigma_l delta_l)`; the
//! plain version multiplies survival factors. The two are cross-checked in tests.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::inr::{self, InrArch, InrMode};
use crate::raster::Image;
use crate::{Error, Result};

pub type Vec3 = [f64; 3];

/// Length of the last quadrature interval.
pub const TERMINAL_DELTA: f64 = 1e10;

/// A pixel is background when every channel is at least this bright.
pub const WHITE_THRESHOLD: f64 = 0.99;

fn norm(v: Vec3) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

fn normalize(v: Vec3) -> Vec3 {
    let n = norm(v);
    [v[0] / n, v[1] / n, v[2] / n]
}

fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

/// Pinhole camera. `rotation` maps camera axes to world axes (columns are the
/// camera's right, up and backward vectors); the camera looks along its -z.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Camera {
    pub rotation: [[f64; 3]; 3],
    pub position: Vec3,
    pub focal: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Camera {
    /// Camera with the principal point at the image centre.
    pub fn new(rotation: [[f64; 3]; 3], position: Vec3, focal: f64, width: usize, height: usize) -> Self {
        Camera {
            rotation,
            position,
            focal,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
            width,
            height,
        }
    }

    pub fn look_at(eye: Vec3, target: Vec3, up: Vec3, focal: f64, width: usize, height: usize) -> Self {
        let back = normalize([eye[0] - target[0], eye[1] - target[1], eye[2] - target[2]]);
        let mut right = cross(up, back);
        if norm(right) < 1e-9 {
            right = cross([0.0, 1.0, 0.0], back);
        }
        let right = normalize(right);
        let true_up = cross(back, right);
        let rotation = [
            [right[0], true_up[0], back[0]],
            [right[1], true_up[1], back[1]],
            [right[2], true_up[2], back[2]],
        ];
        Camera::new(rotation, eye, focal, width, height)
    }

    /// Row-major `[R | t]`, 12 numbers.
    pub fn pose_row_major(&self) -> [f64; 12] {
        let r = &self.rotation;
        let t = &self.position;
        [
            r[0][0], r[0][1], r[0][2], t[0], r[1][0], r[1][1], r[1][2], t[1], r[2][0], r[2][1], r[2][2], t[2],
        ]
    }

    pub fn with_pose_row_major(&self, pose: &[f64; 12]) -> Camera {
        let mut c = self.clone();
        for i in 0..3 {
            for j in 0..3 {
                c.rotation[i][j] = pose[i * 4 + j];
            }
            c.position[i] = pose[i * 4 + 3];
        }
        c
    }

    fn validate(&self) -> Result<()> {
        if !(self.focal.is_finite() && self.focal > 0.0) {
            return Err(Error::invalid("camera", format!("focal length must be positive, got {}", self.focal)));
        }
        if self.width == 0 || self.height == 0 {
            return Err(Error::invalid("camera", "image size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub direction: Vec3,
    pub near: f64,
    pub far: f64,
}

impl Ray {
    pub fn at(&self, t: f64) -> Vec3 {
        [
            self.origin[0] + t * self.direction[0],
            self.origin[1] + t * self.direction[1],
            self.origin[2] + t * self.direction[2],
        ]
    }
}

/// One ray per pixel, row-major, through pixel centres.
pub fn rays_from_camera(cam: &Camera, near: f64, far: f64) -> Result<Vec<Ray>> {
    cam.validate()?;
    if !(near > 0.0 && near < far) {
        return Err(Error::invalid("rays_from_camera", format!("need 0 < near < far, got {near}, {far}")));
    }
    let r = &cam.rotation;
    let mut rays = Vec::with_capacity(cam.width * cam.height);
    for row in 0..cam.height {
        for col in 0..cam.width {
            let d = [
                (col as f64 + 0.5 - cam.cx) / cam.focal,
                -(row as f64 + 0.5 - cam.cy) / cam.focal,
                -1.0,
            ];
            let world = [
                r[0][0] * d[0] + r[0][1] * d[1] + r[0][2] * d[2],
                r[1][0] * d[0] + r[1][1] * d[1] + r[1][2] * d[2],
                r[2][0] * d[0] + r[2][1] * d[1] + r[2][2] * d[2],
            ];
            rays.push(Ray {
                origin: cam.position,
                direction: normalize(world),
                near,
                far,
            });
        }
    }
    Ok(rays)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RenderConfig {
    pub samples: usize,
    pub background: Vec3,
    /// Uniform jitter inside each stratum instead of stratum midpoints.
    pub jitter: bool,
    pub seed: u64,
    /// World-space half extent mapped onto the INR's `[-1, 1]` domain.
    pub bound: f64,
}

impl Default for RenderConfig {
    fn default() -> Self {
        RenderConfig {
            samples: 32,
            background: [1.0, 1.0, 1.0],
            jitter: false,
            seed: 0,
            bound: 1.0,
        }
    }
}

impl RenderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::invalid("render", format!("need at least 2 samples per ray, got {}", self.samples)));
        }
        if !(self.bound.is_finite() && self.bound > 0.0) {
            return Err(Error::invalid("render", format!("bound must be positive, got {}", self.bound)));
        }
        Ok(())
    }
}

/// Stratified depths in `[near, far]` and their quadrature intervals.
pub fn sample_depths<R: Rng + ?Sized>(ray: &Ray, samples: usize, jitter: Option<&mut R>) -> (Vec<f64>, Vec<f64>) {
    let step = (ray.far - ray.near) / samples as f64;
    let t: Vec<f64> = match jitter {
        Some(rng) => (0..samples)
            .map(|j| ray.near + (j as f64 + rng.random::<f64>()) * step)
            .collect(),
        None => (0..samples).map(|j| ray.near + (j as f64 + 0.5) * step).collect(),
    };
    let mut deltas: Vec<f64> = t.windows(2).map(|w| w[1] - w[0]).collect();
    deltas.push(TERMINAL_DELTA);
    (t, deltas)
}

/// Per-ray compositing result of [`composite_values`].
#[derive(Clone, Debug)]
pub struct Composite {
    pub color: Vec3,
    /// `T_j * alpha_j` for every sample.
    pub weights: Vec<f64>,
    /// `T_j` for every sample.
    pub transmittance: Vec<f64>,
    /// Survival probability past the last sample.
    pub final_transmittance: f64,
}

/// Product-form compositing of one ray.
pub fn composite_values(sigmas: &[f64], colors: &[Vec3], deltas: &[f64], background: Vec3) -> Composite {
    let mut t = 1.0;
    let mut color = [0.0; 3];
    let mut weights = Vec::with_capacity(sigmas.len());
    let mut transmittance = Vec::with_capacity(sigmas.len());
    for j in 0..sigmas.len() {
        let alpha = 1.0 - (-sigmas[j] * deltas[j]).exp();
        let w = t * alpha;
        for k in 0..3 {
            color[k] += w * colors[j][k];
        }
        transmittance.push(t);
        weights.push(w);
        t *= 1.0 - alpha;
    }
    for k in 0..3 {
        color[k] += t * background[k];
    }
    Composite {
        color,
        weights,
        transmittance,
        final_transmittance: t,
    }
}

/// Differentiable compositing of `n` rays with `s` samples each.
///
/// `sigma` is `n x s`, `rgb` is `(n*s) x 3` in ray-major order, `deltas` is
/// `n x s`. Returns `n x 3`.
pub fn composite<T: Real>(g: &mut Graph<T>, sigma: Var, rgb: Var, deltas: &Tensor<T>, background: Vec3) -> Result<Var> {
    let (n, s) = g
        .value(sigma)
        .dims2()
        .ok_or_else(|| Error::invalid("composite", "sigma must be 2-D"))?;
    let d = g.constant(deltas.clone());
    let tau = g.mul(sigma, d)?;
    let neg = g.scale(tau, -T::one())?;
    let surv = g.exp(neg)?;
    let alpha = g.scale(surv, -T::one())?;
    let alpha = g.shift(alpha, T::one())?;

    let strict_lower = Tensor::from_fn([s, s], |i| if i / s < i % s { T::one() } else { T::zero() });
    let lower = g.constant(strict_lower);
    let optical = g.matmul(tau, lower)?;
    let optical = g.scale(optical, -T::one())?;
    let trans = g.exp(optical)?;
    let weights = g.mul(trans, alpha)?;

    let total = g.sum_axis(tau, 1)?;
    let total = g.scale(total, -T::one())?;
    let t_final = g.exp(total)?;

    let mut channels = Vec::with_capacity(3);
    for k in 0..3 {
        let ck = g.slice(rgb, 1, k, k + 1)?;
        let ck = g.reshape(ck, &[n, s])?;
        let wk = g.mul(weights, ck)?;
        channels.push(g.sum_axis(wk, 1)?);
    }
    let color = g.concat(&channels, 1)?;
    let bg = g.constant(Tensor::new([1, 3], background.iter().map(|&v| T::of(v)).collect())?);
    let bg = g.matmul(t_final, bg)?;
    g.add(color, bg)
}

/// Renders rays through a radiance-field INR whose weights live in `g`.
pub fn volume_render<T: Real, R: Rng + ?Sized>(
    g: &mut Graph<T>,
    arch: &InrArch,
    weights: &[Var],
    rays: &[Ray],
    cfg: &RenderConfig,
    rng: Option<&mut R>,
) -> Result<Var> {
    cfg.validate()?;
    if arch.mode != InrMode::RadianceField {
        return Err(Error::invalid("volume_render", "INR is not a radiance field"));
    }
    if rays.is_empty() {
        return Err(Error::invalid("volume_render", "no rays"));
    }
    let s = cfg.samples;
    let n = rays.len();
    let mut points = Vec::with_capacity(n * s * 3);
    let mut dirs = Vec::with_capacity(n * s * 3);
    let mut deltas = Vec::with_capacity(n * s);
    let mut rng = rng;
    for ray in rays {
        let (ts, ds) = match (cfg.jitter, rng.as_deref_mut()) {
            (true, Some(r)) => sample_depths(ray, s, Some(r)),
            _ => sample_depths::<R>(ray, s, None),
        };
        for &t in &ts {
            points.extend(ray.at(t).iter().map(|x| x / cfg.bound));
            dirs.extend_from_slice(&ray.direction);
        }
        deltas.extend(ds.into_iter().map(T::of));
    }
    let out = inr::forward(g, arch, weights, &points, Some(&dirs))?;
    let sigma = g.slice(out, 1, 0, 1)?;
    if let Some(i) = g.value(sigma).data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("density along ray {}", i / s)));
    }
    let sigma = g.reshape(sigma, &[n, s])?;
    let rgb = g.slice(out, 1, 1, 4)?;
    composite(g, sigma, rgb, &Tensor::new([n, s], deltas)?, cfg.background)
}

/// Analytic radiance field queried point by point.
pub trait Field {
    fn query(&self, point: Vec3, direction: Vec3) -> (f64, Vec3);
}

/// Plain rendering of an analytic field with stratum midpoints.
pub fn render_field(field: &impl Field, rays: &[Ray], cfg: &RenderConfig) -> Vec<Composite> {
    rays.iter()
        .map(|ray| {
            let (ts, deltas) = sample_depths::<rand_chacha::ChaCha8Rng>(ray, cfg.samples, None);
            let mut sig = Vec::with_capacity(ts.len());
            let mut col = Vec::with_capacity(ts.len());
            for &t in &ts {
                let (s, c) = field.query(ray.at(t), ray.direction);
                sig.push(s);
                col.push(c);
            }
            composite_values(&sig, &col, &deltas, cfg.background)
        })
        .collect()
}

/// Pixel indices chosen for one loss evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelSample {
    pub indices: Vec<usize>,
    /// Set when foreground sampling was requested but no foreground exists.
    pub fell_back: bool,
}

/// Pixel indices with replacement. During epoch 0, `foreground_fraction` of
/// them come from non-white pixels; afterwards sampling is uniform.
pub fn adaptive_pixel_sample<R: Rng + ?Sized>(
    rgb: &Image,
    count: usize,
    foreground_fraction: f64,
    epoch: usize,
    rng: &mut R,
) -> PixelSample {
    let n = rgb.num_pixels();
    let uniform = |rng: &mut R, k: usize| -> Vec<usize> { (0..k).map(|_| rng.random_range(0..n)).collect() };
    if epoch > 0 {
        return PixelSample {
            indices: uniform(rng, count),
            fell_back: false,
        };
    }
    let foreground: Vec<usize> = (0..n)
        .filter(|&i| rgb.pixel(i).iter().take(3).any(|&v| v < WHITE_THRESHOLD))
        .collect();
    if foreground.is_empty() {
        log::warn!("no foreground pixels; falling back to uniform sampling");
        return PixelSample {
            indices: uniform(rng, count),
            fell_back: true,
        };
    }
    let fg_count = (count as f64 * foreground_fraction).round() as usize;
    let mut indices: Vec<usize> = (0..fg_count)
        .map(|_| foreground[rng.random_range(0..foreground.len())])
        .collect();
    indices.extend(uniform(rng, count - fg_count));
    PixelSample {
        indices,
        fell_back: false,
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::inr::WeightSet;

    const IDENTITY: [[f64; 3]; 3] = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];

    #[test]
    fn principal_point_ray_follows_optical_axis() {
        let cam = Camera::new(IDENTITY, [0.0; 3], 4.0, 5, 5);
        let rays = rays_from_camera(&cam, 0.5, 3.0).unwrap();
        let centre = &rays[2 * 5 + 2];
        assert_eq!(centre.direction, [0.0, 0.0, -1.0]);
        assert!(rays.iter().all(|r| r.origin == [0.0; 3]));
        for r in &rays {
            assert!((norm(r.direction) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn rays_reach_their_image_plane_point() {
        // Axis-aligned camera: the ray through (row, col) hits the plane
        // z = -f at the pixel's metric position.
        let f = 3.0;
        let cam = Camera::new(IDENTITY, [1.0, 2.0, 3.0], f, 4, 6);
        for (i, ray) in rays_from_camera(&cam, 0.1, 10.0).unwrap().iter().enumerate() {
            let (row, col) = (i / 4, i % 4);
            let target = [col as f64 + 0.5 - cam.cx, -(row as f64 + 0.5 - cam.cy), -f];
            let t = -f / ray.direction[2];
            let p = ray.at(t);
            for k in 0..3 {
                assert!((p[k] - cam.position[k] - target[k]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_focal_rejected() {
        let cam = Camera::new(IDENTITY, [0.0; 3], 0.0, 4, 4);
        assert!(rays_from_camera(&cam, 0.5, 2.0).is_err());
    }

    #[test]
    fn half_opacity_sample() {
        let c = composite_values(&[std::f64::consts::LN_2], &[[1.0, 0.0, 0.0]], &[1.0], [0.0; 3]);
        assert!((c.weights[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn empty_medium_shows_background() {
        let c = composite_values(&[0.0; 8], &[[0.2, 0.3, 0.4]; 8], &[0.1; 8], [1.0, 0.5, 0.25]);
        assert_eq!(c.color, [1.0, 0.5, 0.25]);
    }

    #[test]
    fn graph_compositing_matches_product_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (n, s) = (3, 7);
        let sig: Vec<f64> = (0..n * s).map(|_| rng.random_range(0.0..4.0)).collect();
        let col: Vec<f64> = (0..n * s * 3).map(|_| rng.random::<f64>()).collect();
        let del: Vec<f64> = (0..n * s).map(|_| rng.random_range(0.05..0.3)).collect();
        let bg = [0.9, 0.8, 0.7];
        let mut g = Graph::<f64>::new();
        let sv = g.constant(Tensor::new([n, s], sig.clone()).unwrap());
        let cv = g.constant(Tensor::new([n * s, 3], col.clone()).unwrap());
        let out = composite(&mut g, sv, cv, &Tensor::new([n, s], del.clone()).unwrap(), bg).unwrap();
        for i in 0..n {
            let colors: Vec<Vec3> = (0..s)
                .map(|j| {
                    let b = (i * s + j) * 3;
                    [col[b], col[b + 1], col[b + 2]]
                })
                .collect();
            let c = composite_values(&sig[i * s..(i + 1) * s], &colors, &del[i * s..(i + 1) * s], bg);
            for k in 0..3 {
                assert!((g.value(out).at2(i, k) - c.color[k]).abs() < 1e-12);
            }
            let total: f64 = c.weights.iter().sum::<f64>() + c.final_transmittance;
            assert!((total - 1.0).abs() < 1e-12);
            assert!(c.transmittance.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    #[test]
    fn inr_rendering_is_deterministic_without_jitter() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let arch = InrArch::radiance(3, 8, 2, 0);
        let ws = WeightSet::<f64>::random(arch.clone(), &mut rng).unwrap();
        let cam = Camera::look_at([0.0, -3.0, 0.5], [0.0; 3], [0.0, 0.0, 1.0], 4.0, 4, 4);
        let rays = rays_from_camera(&cam, 1.5, 4.5).unwrap();
        let cfg = RenderConfig {
            samples: 8,
            ..Default::default()
        };
        let render = || {
            let mut g = Graph::new();
            let w = ws.bind(&mut g, false);
            let out = volume_render::<f64, ChaCha8Rng>(&mut g, &arch, &w, &rays, &cfg, None).unwrap();
            g.value(out).clone()
        };
        let a = render();
        assert_eq!(a, render());
        assert!(a.data().iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
    }

    #[test]
    fn adaptive_sampling_rules() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let white = Image::filled(8, 8, 3, 1.0);
        let s = adaptive_pixel_sample(&white, 16, 0.5, 0, &mut rng);
        assert!(s.fell_back);
        assert_eq!(s.indices.len(), 16);

        let mut img = Image::filled(8, 8, 3, 1.0);
        let fg: Vec<usize> = (0..10).map(|i| i * 6 + 1).collect();
        for &i in &fg {
            img.data_mut()[i * 3] = 0.2;
        }
        let s = adaptive_pixel_sample(&img, 8, 0.5, 0, &mut rng);
        assert!(!s.fell_back);
        assert!(s.indices.iter().filter(|i| fg.contains(i)).count() >= 4);

        let mut a = ChaCha8Rng::seed_from_u64(4);
        let mut b = ChaCha8Rng::seed_from_u64(4);
        let later = adaptive_pixel_sample(&img, 8, 0.5, 1, &mut a);
        let uniform: Vec<usize> = (0..8).map(|_| b.random_range(0..64)).collect();
        assert_eq!(later.indices, uniform);
    }
}
