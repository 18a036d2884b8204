//! Functional coordinate MLPs evaluated with externally supplied weights.
//!
//! Biases are merged into the weight matrices: every layer input gets a
//! trailing constant-1 feature, so `W_i` has shape `(in_i + 1) x out_i` and
//! its last row is the bias.

use std::f64::consts::PI;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{Graph, Real, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InrMode {
    /// 2-D pixel coordinate to RGB.
    Image,
    /// 3-D location plus view direction to density and RGB.
    RadianceField,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InrArch {
    pub mode: InrMode,
    /// Number of weight matrices.
    pub depth: usize,
    pub width: usize,
    /// Frequency bands for the coordinate (location) encoding.
    pub coord_bands: usize,
    /// Frequency bands for the view-direction encoding (radiance mode only).
    pub dir_bands: usize,
}

impl InrArch {
    pub fn image(depth: usize, width: usize, bands: usize) -> Self {
        InrArch {
            mode: InrMode::Image,
            depth,
            width,
            coord_bands: bands,
            dir_bands: 0,
        }
    }

    pub fn radiance(depth: usize, width: usize, loc_bands: usize, dir_bands: usize) -> Self {
        InrArch {
            mode: InrMode::RadianceField,
            depth,
            width,
            coord_bands: loc_bands,
            dir_bands,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::invalid("inr", format!("depth must be at least 2, got {}", self.depth)));
        }
        if self.width == 0 {
            return Err(Error::invalid("inr", "width must be positive"));
        }
        Ok(())
    }

    pub fn coord_dim(&self) -> usize {
        match self.mode {
            InrMode::Image => 2,
            InrMode::RadianceField => 3,
        }
    }

    pub fn out_dim(&self) -> usize {
        match self.mode {
            InrMode::Image => 3,
            InrMode::RadianceField => 4,
        }
    }

    pub fn encoded_dim(&self) -> usize {
        self.coord_dim() * (2 * self.coord_bands + 1)
    }

    pub fn dir_encoded_dim(&self) -> usize {
        match self.mode {
            InrMode::Image => 0,
            InrMode::RadianceField => 3 * (2 * self.dir_bands + 1),
        }
    }

    /// Layer whose input carries the encoded view direction: the penultimate one.
    pub fn dir_layer(&self) -> Option<usize> {
        match self.mode {
            InrMode::Image => None,
            InrMode::RadianceField => Some(self.depth - 2),
        }
    }

    /// `(rows, cols)` of every weight matrix, bias row included in `rows`.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        (0..self.depth)
            .map(|i| {
                let mut rows = if i == 0 { self.encoded_dim() } else { self.width };
                if Some(i) == self.dir_layer() {
                    rows += self.dir_encoded_dim();
                }
                let cols = if i + 1 == self.depth { self.out_dim() } else { self.width };
                (rows + 1, cols)
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.layer_shapes().iter().map(|(r, c)| r * c).sum()
    }
}

/// Frequency encoding `[x, sin(2^k pi x), cos(2^k pi x)]` for `k < bands`.
///
/// Output layout: the raw coordinates, then for each band the sines of every
/// coordinate followed by the cosines.
pub fn encode_coords(x: &[f64], bands: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(x.len() * (2 * bands + 1));
    out.extend_from_slice(x);
    for k in 0..bands {
        let f = (1u64 << k) as f64 * PI;
        out.extend(x.iter().map(|&v| (f * v).sin()));
        out.extend(x.iter().map(|&v| (f * v).cos()));
    }
    out
}

/// Encodes every row of a row-major `n x c` coordinate buffer.
pub fn encode_batch<T: Real>(points: &[f64], c: usize, bands: usize) -> Result<Tensor<T>> {
    if c == 0 || !points.len().is_multiple_of(c) || points.is_empty() {
        return Err(Error::invalid(
            "encode_coords",
            format!("{} values do not form rows of {c}", points.len()),
        ));
    }
    let n = points.len() / c;
    let width = c * (2 * bands + 1);
    let mut data = Vec::with_capacity(n * width);
    for row in points.chunks(c) {
        data.extend(encode_coords(row, bands).into_iter().map(T::of));
    }
    Tensor::new([n, width], data)
}

/// Pixel-centre coordinates in `[-1, 1]^2`, row-major, as `(y, x)` pairs.
pub fn pixel_centers(height: usize, width: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(height * width * 2);
    for r in 0..height {
        let y = -1.0 + (2 * r + 1) as f64 / height as f64;
        for c in 0..width {
            let x = -1.0 + (2 * c + 1) as f64 / width as f64;
            out.push(y);
            out.push(x);
        }
    }
    out
}

/// Evaluates the INR with weight matrices already recorded in `g`.
///
/// `coords` is `n x c` (raw, unencoded); `dirs` is `n x 3` unit directions and
/// is required in radiance mode. Image mode returns `n x 3` sigmoid RGB;
/// radiance mode returns `n x 4` as `(relu density, sigmoid RGB)`.
pub fn forward<T: Real>(
    g: &mut Graph<T>,
    arch: &InrArch,
    weights: &[Var],
    coords: &[f64],
    dirs: Option<&[f64]>,
) -> Result<Var> {
    let shapes = arch.layer_shapes();
    if weights.len() != shapes.len() {
        return Err(Error::invalid(
            "inr_forward",
            format!("{} weight matrices for an arch of depth {}", weights.len(), shapes.len()),
        ));
    }
    for (i, (&w, &(r, c))) in weights.iter().zip(&shapes).enumerate() {
        if g.shape(w) != [r, c] {
            return Err(Error::invalid(
                "inr_forward",
                format!("layer {i} expects a {r}x{c} matrix, got {:?}", g.shape(w)),
            ));
        }
    }
    let c = arch.coord_dim();
    if coords.is_empty() || !coords.len().is_multiple_of(c) {
        return Err(Error::invalid(
            "inr_forward",
            format!("{} coordinate values are not rows of dimension {c}", coords.len()),
        ));
    }
    let n = coords.len() / c;
    let dir_feats = match (arch.mode, dirs) {
        (InrMode::Image, _) => None,
        (InrMode::RadianceField, Some(d)) => {
            if d.len() != n * 3 {
                return Err(Error::invalid(
                    "inr_forward",
                    format!("{} direction values for {n} points", d.len()),
                ));
            }
            Some(g.constant(encode_batch(d, 3, arch.dir_bands)?))
        }
        (InrMode::RadianceField, None) => {
            return Err(Error::invalid("inr_forward", "radiance mode needs view directions"));
        }
    };

    let ones = g.constant(Tensor::ones([n, 1]));
    let mut feats = g.constant(encode_batch(coords, c, arch.coord_bands)?);
    let last = weights.len() - 1;
    for (i, &w) in weights.iter().enumerate() {
        let input = match dir_feats {
            Some(d) if Some(i) == arch.dir_layer() => g.concat(&[feats, d, ones], 1)?,
            _ => g.concat(&[feats, ones], 1)?,
        };
        let z = g.matmul(input, w)?;
        if i < last {
            feats = g.relu(z)?;
        } else {
            feats = match arch.mode {
                InrMode::Image => g.sigmoid(z)?,
                InrMode::RadianceField => {
                    let sigma = g.slice(z, 1, 0, 1)?;
                    let sigma = g.relu(sigma)?;
                    let rgb = g.slice(z, 1, 1, 4)?;
                    let rgb = g.sigmoid(rgb)?;
                    g.concat(&[sigma, rgb], 1)?
                }
            };
        }
    }
    Ok(feats)
}

/// Concrete INR parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightSet<T> {
    pub arch: InrArch,
    pub matrices: Vec<Tensor<T>>,
}

impl<T: Real> WeightSet<T> {
    pub fn new(arch: InrArch, matrices: Vec<Tensor<T>>) -> Result<Self> {
        arch.validate()?;
        let shapes = arch.layer_shapes();
        if matrices.len() != shapes.len() {
            return Err(Error::invalid(
                "weight_set",
                format!("{} matrices for depth {}", matrices.len(), shapes.len()),
            ));
        }
        for (m, &(r, c)) in matrices.iter().zip(&shapes) {
            if m.shape() != [r, c] {
                return Err(Error::shape("weight_set", m.shape(), &[r, c]));
            }
        }
        Ok(WeightSet { arch, matrices })
    }

    pub fn zeros(arch: InrArch) -> Result<Self> {
        let m = arch.layer_shapes().into_iter().map(|(r, c)| Tensor::zeros([r, c])).collect();
        Self::new(arch, m)
    }

    /// He-uniform weight rows and zero bias rows: the "train from scratch"
    /// starting point.
    pub fn random<R: Rng + ?Sized>(arch: InrArch, rng: &mut R) -> Result<Self> {
        let mut m = Vec::new();
        for (r, c) in arch.layer_shapes() {
            let fan_in = (r - 1) as f64;
            let bound = (6.0 / fan_in).sqrt();
            let mut t = Tensor::<T>::uniform([r, c], bound, rng);
            for v in &mut t.data_mut()[(r - 1) * c..] {
                *v = T::zero();
            }
            m.push(t);
        }
        Self::new(arch, m)
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.matrices.iter().map(|m| g.leaf(m.clone(), trainable)).collect()
    }

    /// Evaluates the INR outside of any training graph.
    pub fn eval(&self, coords: &[f64], dirs: Option<&[f64]>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let w = self.bind(&mut g, false);
        let out = forward(&mut g, &self.arch, &w, coords, dirs)?;
        Ok(g.value(out).clone())
    }

    pub fn max_abs_diff(&self, other: &WeightSet<T>) -> Option<f64> {
        if self.matrices.len() != other.matrices.len() {
            return None;
        }
        self.matrices
            .iter()
            .zip(&other.matrices)
            .map(|(a, b)| a.max_abs_diff(b))
            .try_fold(0.0f64, |acc, d| d.map(|d| acc.max(d)))
    }
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::diff::GradCheck;

    #[test]
    fn encoding_examples() {
        assert_eq!(encode_coords(&[0.5, -0.5], 0), vec![0.5, -0.5]);
        assert_eq!(encode_coords(&[0.0], 1), vec![0.0, 0.0, 1.0]);
        assert_eq!(encode_coords(&[0.1, 0.2], 2).len(), 10);
    }

    #[test]
    fn layer_shapes_merge_bias() {
        let a = InrArch::image(5, 64, 6);
        let s = a.layer_shapes();
        assert_eq!(s[0], (2 * 13 + 1, 64));
        assert_eq!(s[1], (65, 64));
        assert_eq!(s[4], (65, 3));
        for i in 0..4 {
            assert_eq!(s[i].1, s[i + 1].0 - 1);
        }

        let r = InrArch::radiance(6, 64, 6, 0);
        let s = r.layer_shapes();
        assert_eq!(s[0], (3 * 13 + 1, 64));
        // direction features enter the penultimate layer
        assert_eq!(s[4], (64 + 3 + 1, 64));
        assert_eq!(s[5], (65, 4));
    }

    #[test]
    fn zero_network_is_half_grey() {
        let ws = WeightSet::<f64>::zeros(InrArch::image(3, 8, 2)).unwrap();
        let out = ws.eval(&[0.3, -0.9, 0.0, 0.0], None).unwrap();
        assert_eq!(out.shape(), &[2, 3]);
        assert!(out.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn hand_built_identity_on_one_coordinate() {
        // Depth 2, width 2, no encoding: h = relu([x, -x]), out = h0 - h1 = x
        // before the sigmoid, for the first channel.
        let arch = InrArch::image(2, 2, 0);
        let w0 = Tensor::new([3, 2], vec![1.0, -1.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let w1 = Tensor::new([3, 3], vec![1.0, 0.0, 0.0, -1.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let ws = WeightSet::<f64>::new(arch, vec![w0, w1]).unwrap();
        for y in [-0.7, 0.25, 0.9] {
            let out = ws.eval(&[y, 0.4], None).unwrap();
            let expect = 1.0 / (1.0 + (-y).exp());
            assert!((out.data()[0] - expect).abs() < 1e-15);
            assert_eq!(out.data()[1], 0.5);
        }
    }

    #[test]
    fn rejects_wrong_coordinate_dimension() {
        let ws = WeightSet::<f64>::zeros(InrArch::image(3, 8, 2)).unwrap();
        assert!(ws.eval(&[0.1, 0.2, 0.3], None).is_err());
        let rf = WeightSet::<f64>::zeros(InrArch::radiance(3, 8, 2, 0)).unwrap();
        assert!(rf.eval(&[0.1, 0.2, 0.3], None).is_err());
    }

    #[test]
    fn random_outputs_stay_in_unit_cube() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let ws = WeightSet::<f64>::random(InrArch::image(5, 32, 6), &mut rng).unwrap();
        let coords: Vec<f64> = (0..2000).map(|_| rng.random_range(-1.0..1.0)).collect();
        let out = ws.eval(&coords, None).unwrap();
        assert_eq!(out.shape(), &[1000, 3]);
        assert!(out.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn batched_equals_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let ws = WeightSet::<f64>::random(InrArch::radiance(4, 16, 3, 1), &mut rng).unwrap();
        let pts: Vec<f64> = (0..30).map(|_| rng.random_range(-1.0..1.0)).collect();
        let dirs: Vec<f64> = pts
            .chunks(3)
            .flat_map(|p| {
                let n = (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt();
                p.iter().map(move |v| v / n).collect::<Vec<_>>()
            })
            .collect();
        let batch = ws.eval(&pts, Some(&dirs)).unwrap();
        for i in 0..10 {
            let one = ws.eval(&pts[i * 3..i * 3 + 3], Some(&dirs[i * 3..i * 3 + 3])).unwrap();
            for j in 0..4 {
                assert!((one.data()[j] - batch.at2(i, j)).abs() < 1e-6);
            }
            assert!(batch.at2(i, 0) >= 0.0);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let arch = InrArch::image(3, 8, 2);
        let ws = WeightSet::<f64>::random(arch.clone(), &mut rng).unwrap();
        let coords = pixel_centers(4, 4);
        let target = Tensor::<f64>::uniform([16, 3], 0.5, &mut rng).map(|v| v + 0.5);
        let report = GradCheck::with_tol(1e-3)
            .run(&ws.matrices, |g, w| {
                let out = forward(g, &arch, w, &coords, None)?;
                let t = g.constant(target.clone());
                let se = g.squared_error(out, t)?;
                g.scale(se, 1.0 / 16.0)
            })
            .unwrap();
        assert!(report.passed(), "{report:?}");
    }
}
