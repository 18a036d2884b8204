use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, Tensor, Var};
use crate::{Error, Result};

/// Settings for a central-difference gradient check.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub step: f64,
    pub tol: f64,
    /// Check at most this many randomly chosen coordinates in total.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheck {
    fn default() -> Self {
        GradCheck {
            step: 1e-4,
            tol: 1e-5,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Outcome of a gradient check.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Largest relative error seen for each input.
    pub max_rel_err: Vec<f64>,
    /// `(input, element, analytic, numeric)` for the worst coordinate overall.
    pub worst: Option<(usize, usize, f64, f64)>,
    pub coords_checked: usize,
    pub tol: f64,
    /// Set when the function produced a non-finite value.
    pub failure: Option<String>,
}

impl GradCheckReport {
    pub fn max(&self) -> f64 {
        self.max_rel_err.iter().copied().fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.failure.is_none() && self.max() <= self.tol
    }
}

// Denominator floor: differences below this magnitude count as absolute.
const REL_FLOOR: f64 = 1e-6;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

impl GradCheck {
    pub fn with_tol(tol: f64) -> Self {
        GradCheck {
            tol,
            ..Default::default()
        }
    }

    /// Compares reverse-mode gradients of the scalar `f` at `point` against
    /// central differences, one coordinate at a time.
    pub fn run<F>(&self, point: &[Tensor<f64>], f: F) -> Result<GradCheckReport>
    where
        F: Fn(&mut Graph<f64>, &[Var]) -> Result<Var>,
    {
        let eval = |values: &[Tensor<f64>], track: bool| -> Result<(Graph<f64>, Vec<Var>, Var)> {
            let mut g = Graph::new();
            let vars: Vec<Var> = values.iter().map(|t| g.leaf(t.clone(), track)).collect();
            let out = f(&mut g, &vars)?;
            if g.value(out).len() != 1 {
                return Err(Error::NonScalarLoss(g.shape(out).to_vec()));
            }
            Ok((g, vars, out))
        };

        let mut report = GradCheckReport {
            max_rel_err: vec![0.0; point.len()],
            worst: None,
            coords_checked: 0,
            tol: self.tol,
            failure: None,
        };

        let (g, vars, out) = eval(point, true)?;
        let f0 = g.scalar(out);
        if !f0.is_finite() {
            report.failure = Some(format!("f is {f0} at the base point"));
            return Ok(report);
        }
        let grads = g.backward(out)?;
        let analytic: Vec<Tensor<f64>> = vars
            .iter()
            .zip(point)
            .map(|(&v, t)| grads.get_or_zeros(v, t.shape()))
            .collect();
        drop(g);

        let mut coords: Vec<(usize, usize)> = point
            .iter()
            .enumerate()
            .flat_map(|(i, t)| (0..t.len()).map(move |j| (i, j)))
            .collect();
        if let Some(limit) = self.max_coords {
            if limit < coords.len() {
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                let mut picked: Vec<usize> = sample(&mut rng, coords.len(), limit).into_vec();
                picked.sort_unstable();
                coords = picked.into_iter().map(|k| coords[k]).collect();
            }
        }

        let mut worst = -1.0;
        let mut values = point.to_vec();
        for (i, j) in coords {
            let orig = values[i].data()[j];
            values[i].data_mut()[j] = orig + self.step;
            let (g, _, o) = eval(&values, false)?;
            let fp = g.scalar(o);
            values[i].data_mut()[j] = orig - self.step;
            let (g, _, o) = eval(&values, false)?;
            let fm = g.scalar(o);
            values[i].data_mut()[j] = orig;
            if !fp.is_finite() || !fm.is_finite() {
                report.failure = Some(format!("f is non-finite when perturbing input {i} element {j}"));
                return Ok(report);
            }
            let numeric = (fp - fm) / (2.0 * self.step);
            let a = analytic[i].data()[j];
            let err = relative_error(a, numeric);
            report.coords_checked += 1;
            if err > report.max_rel_err[i] {
                report.max_rel_err[i] = err;
            }
            if err > worst {
                worst = err;
                report.worst = Some((i, j, a, numeric));
            }
        }
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let r = GradCheck::default()
            .run(&[Tensor::scalar(3.0)], |g, v| {
                let sq = g.mul(v[0], v[0])?;
                g.sum(sq)
            })
            .unwrap();
        let (_, _, a, n) = r.worst.unwrap();
        assert_eq!(a, 6.0);
        assert!((n - 6.0).abs() < 1e-8);
        assert!(r.passed());
    }

    #[test]
    fn sine_at_zero() {
        let r = GradCheck::default()
            .run(&[Tensor::scalar(0.0)], |g, v| {
                let s = g.sin(v[0])?;
                g.sum(s)
            })
            .unwrap();
        let (_, _, a, n) = r.worst.unwrap();
        assert_eq!(a, 1.0);
        assert!((n - 1.0).abs() < 1e-8);
        assert!(r.passed());
    }

    #[test]
    fn non_finite_is_reported() {
        let r = GradCheck::default()
            .run(&[Tensor::scalar(800.0)], |g, v| {
                let e = g.exp(v[0])?;
                g.sum(e)
            })
            .unwrap();
        assert!(!r.passed());
        assert!(r.failure.unwrap().contains("base point"));
    }

    #[test]
    fn wrong_gradient_is_caught() {
        // relu at exactly the kink: the analytic rule picks 0, the centered
        // difference sees a slope of 1/2.
        let r = GradCheck::default()
            .run(&[Tensor::scalar(0.0)], |g, v| {
                let s = g.relu(v[0])?;
                g.sum(s)
            })
            .unwrap();
        assert!(!r.passed());
    }
}
