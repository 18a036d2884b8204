//! Observations to data tokens.
//!
//! Images (or 9-channel extended views) are zero padded, cut into `P x P`
//! patches and flattened; the i-th data token is `FC(p_i + e_i)` with a
//! learnable positional embedding `e_i` added in patch space.

use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::raster::Image;
use crate::render::{rays_from_camera, Camera};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenRole {
    Data,
    Init,
    Weight,
}

/// Equal-width token set living in a graph as an `n x D` node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TokenBatch {
    pub var: Var,
    pub role: TokenRole,
}

impl TokenBatch {
    pub fn count<T: Real>(&self, g: &Graph<T>) -> usize {
        g.shape(self.var)[0]
    }

    pub fn width<T: Real>(&self, g: &Graph<T>) -> usize {
        g.shape(self.var)[1]
    }
}

/// Flattened patches of a padded image, in row-major grid order.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchGrid {
    pub patch: usize,
    pub pad: usize,
    pub rows: usize,
    pub cols: usize,
    pub channels: usize,
    /// `n_patches x (patch * patch * channels)`; within a patch, pixels are
    /// row-major with interleaved channels.
    pub values: Vec<f64>,
}

impl PatchGrid {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.patch * self.patch * self.channels
    }

    pub fn patch_values(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim()..(i + 1) * self.dim()]
    }

    pub fn to_tensor<T: Real>(&self) -> Result<Tensor<T>> {
        Tensor::from_f64([self.len(), self.dim()], &self.values)
    }
}

fn pad_suggestion(h: usize, w: usize, patch: usize) -> String {
    match (0..patch).find(|p| (h + 2 * p).is_multiple_of(patch) && (w + 2 * p).is_multiple_of(patch)) {
        Some(p) => format!("use pad {p}"),
        None => "no symmetric pad works; resize the image".to_string(),
    }
}

pub fn patchify(image: &Image, patch: usize, pad: usize) -> Result<PatchGrid> {
    if patch == 0 {
        return Err(Error::invalid("patchify", "patch size must be positive"));
    }
    let (h, w) = (image.height() + 2 * pad, image.width() + 2 * pad);
    if h % patch != 0 || w % patch != 0 {
        return Err(Error::invalid(
            "patchify",
            format!(
                "padded size {h}x{w} is not divisible by patch size {patch}; {}",
                pad_suggestion(image.height(), image.width(), patch)
            ),
        ));
    }
    let padded = image.padded(pad);
    let (rows, cols, ch) = (h / patch, w / patch, image.channels());
    let mut values = Vec::with_capacity(h * w * ch);
    for gr in 0..rows {
        for gc in 0..cols {
            for dy in 0..patch {
                for dx in 0..patch {
                    for k in 0..ch {
                        values.push(padded.get(gr * patch + dy, gc * patch + dx, k));
                    }
                }
            }
        }
    }
    Ok(PatchGrid {
        patch,
        pad,
        rows,
        cols,
        channels: ch,
        values,
    })
}

/// Reassembles the padded image.
pub fn unpatchify(grid: &PatchGrid) -> Image {
    let p = grid.patch;
    Image::from_fn(grid.rows * p, grid.cols * p, grid.channels, |r, c, k| {
        let idx = (r / p) * grid.cols + c / p;
        grid.patch_values(idx)[((r % p) * p + c % p) * grid.channels + k]
    })
}

/// `FC(p_i + e_i)` for every patch.
///
/// `pos` is `n_patches x dim`, `fc_w` is `dim x D` and `fc_b` has `D` entries.
pub fn embed<T: Real>(g: &mut Graph<T>, grid: &PatchGrid, pos: Var, fc_w: Var, fc_b: Var) -> Result<TokenBatch> {
    let patches = g.constant(grid.to_tensor()?);
    if g.shape(pos) != g.shape(patches) {
        return Err(Error::shape("embed", g.shape(patches), g.shape(pos)));
    }
    let x = g.add(patches, pos)?;
    let x = g.matmul(x, fc_w)?;
    let x = g.add_row(x, fc_b)?;
    Ok(TokenBatch {
        var: x,
        role: TokenRole::Data,
    })
}

/// A posed RGB view.
#[derive(Clone, Debug, PartialEq)]
pub struct ViewObservation {
    pub rgb: Image,
    pub camera: Camera,
}

/// Per-pixel `[rgb, ray origin, ray direction]`: a 9-channel image.
pub fn extend_view(view: &ViewObservation) -> Result<Image> {
    let cam = &view.camera;
    if view.rgb.height() != cam.height || view.rgb.width() != cam.width || view.rgb.channels() != 3 {
        return Err(Error::invalid(
            "extend_view",
            format!(
                "{}x{}x{} image does not match a {}x{} camera",
                view.rgb.height(),
                view.rgb.width(),
                view.rgb.channels(),
                cam.height,
                cam.width
            ),
        ));
    }
    // The bounds only affect near/far, which are not part of the channels.
    let rays = rays_from_camera(cam, 1.0, 2.0)?;
    let mut data = Vec::with_capacity(rays.len() * 9);
    for (i, ray) in rays.iter().enumerate() {
        data.extend_from_slice(view.rgb.pixel(i));
        data.extend_from_slice(&ray.origin);
        data.extend_from_slice(&ray.direction);
    }
    Image::new(cam.height, cam.width, 9, data)
}

/// Union of token sets; no per-view index is added.
pub fn merge_views<T: Real>(g: &mut Graph<T>, views: &[TokenBatch]) -> Result<TokenBatch> {
    let first = views.first().ok_or_else(|| Error::invalid("merge_views", "no token sets"))?;
    let width = first.width(g);
    for v in views {
        if v.width(g) != width {
            return Err(Error::shape("merge_views", g.shape(first.var), g.shape(v.var)));
        }
    }
    if views.len() == 1 {
        return Ok(*first);
    }
    let vars: Vec<Var> = views.iter().map(|v| v.var).collect();
    Ok(TokenBatch {
        var: g.concat(&vars, 0)?,
        role: first.role,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ramp(h: usize, w: usize, c: usize) -> Image {
        Image::from_fn(h, w, c, |r, col, k| ((r * w + col) * c + k) as f64 / (h * w * c) as f64)
    }

    #[test]
    fn padded_178_image_gives_400_patches() {
        let g = patchify(&ramp(178, 178, 3), 9, 1).unwrap();
        assert_eq!(g.len(), 400);
        assert_eq!(g.dim(), 243);
        let g = patchify(&ramp(16, 16, 3), 8, 0).unwrap();
        assert_eq!(g.len(), 4);
    }

    #[test]
    fn constant_image_gives_identical_patches() {
        let g = patchify(&Image::filled(16, 16, 3, 0.3), 4, 0).unwrap();
        for i in 1..g.len() {
            assert_eq!(g.patch_values(i), g.patch_values(0));
        }
    }

    #[test]
    fn indivisible_size_suggests_pad() {
        let err = patchify(&ramp(14, 14, 3), 8, 0).unwrap_err().to_string();
        assert!(err.contains("use pad 1"), "{err}");
        let err = patchify(&ramp(15, 15, 3), 8, 0).unwrap_err().to_string();
        assert!(err.contains("no symmetric pad"), "{err}");
    }

    #[test]
    fn unpatchify_restores_padded_image() {
        let img = ramp(10, 14, 9);
        let grid = patchify(&img, 4, 1).unwrap();
        assert_eq!(unpatchify(&grid), img.padded(1));
    }

    #[test]
    fn embedding_shapes_and_position_sensitivity() {
        let grid = patchify(&Image::filled(8, 8, 3, 0.5), 4, 0).unwrap();
        let mut g = Graph::<f64>::new();
        let pos = g.constant(Tensor::from_fn([4, 48], |i| (i / 48) as f64 * 0.1));
        let w = g.constant(Tensor::from_fn([48, 16], |i| ((i * 7) % 11) as f64 / 11.0 - 0.5));
        let b = g.constant(Tensor::zeros([16]));
        let t = embed(&mut g, &grid, pos, w, b).unwrap();
        assert_eq!(g.shape(t.var), &[4, 16]);
        let v = g.value(t.var);
        assert_ne!(v.row(0), v.row(1));

        let zeros = patchify(&Image::filled(8, 8, 3, 0.0), 4, 0).unwrap();
        let zpos = g.constant(Tensor::zeros([4, 48]));
        let t = embed(&mut g, &zeros, zpos, w, b).unwrap();
        assert!(g.value(t.var).data().iter().all(|&x| x == 0.0));

        let bad = g.constant(Tensor::zeros([4, 47]));
        assert!(embed(&mut g, &grid, bad, w, b).is_err());
    }

    #[test]
    fn extended_view_channels() {
        let cam = Camera::new([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [0.0; 3], 2.0, 3, 3);
        let view = ViewObservation {
            rgb: Image::filled(3, 3, 3, 0.25),
            camera: cam.clone(),
        };
        let ext = extend_view(&view).unwrap();
        assert_eq!(ext.channels(), 9);
        let centre = ext.pixel(4);
        assert_eq!(&centre[..3], &[0.25; 3]);
        assert_eq!(&centre[3..6], &[0.0; 3]);
        assert_eq!(&centre[6..9], &[0.0, 0.0, -1.0]);
        for i in 0..9 {
            let d = &ext.pixel(i)[6..9];
            assert!(((d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt() - 1.0).abs() < 1e-6);
        }

        let t = [0.5, -2.0, 3.25];
        let mut moved = view.clone();
        moved.camera.position = t;
        let ext2 = extend_view(&moved).unwrap();
        for i in 0..9 {
            for (k, tk) in t.iter().enumerate() {
                assert_eq!(ext2.pixel(i)[3 + k] - ext.pixel(i)[3 + k], *tk);
            }
            assert_eq!(&ext2.pixel(i)[6..9], &ext.pixel(i)[6..9]);
        }

        let rays = rays_from_camera(&cam, 0.5, 4.0).unwrap();
        for (i, r) in rays.iter().enumerate() {
            assert_eq!(&ext.pixel(i)[3..6], &r.origin);
            assert_eq!(&ext.pixel(i)[6..9], &r.direction);
        }
    }

    #[test]
    fn merging_views() {
        let mut g = Graph::<f64>::new();
        let a = TokenBatch {
            var: g.constant(Tensor::ones([256, 8])),
            role: TokenRole::Data,
        };
        let b = TokenBatch {
            var: g.constant(Tensor::zeros([256, 8])),
            role: TokenRole::Data,
        };
        assert_eq!(merge_views(&mut g, &[a]).unwrap(), a);
        let m = merge_views(&mut g, &[a, b]).unwrap();
        assert_eq!(m.count(&g), 512);
        let c = TokenBatch {
            var: g.constant(Tensor::zeros([4, 7])),
            role: TokenRole::Data,
        };
        assert!(merge_views(&mut g, &[a, c]).is_err());
    }
}
