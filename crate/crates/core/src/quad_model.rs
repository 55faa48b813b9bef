//! The noisy quadratic objective.
//!
//! Each step observes `½ Σ hᵢ (θᵢ − cᵢ)²` with a freshly drawn minimum
//! `cᵢ ~ N(0, σᵢ²)`. The true optimum is fixed at the origin and never stored.

use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::dynamics::MomentState;
use crate::error::{check_dim, NqmError, Result};

/// Diagonal curvatures and per-dimension noise variances.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticProblem {
    h: Vec<f64>,
    sigma2: Vec<f64>,
}

impl QuadraticProblem {
    pub fn new(h: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        check_dim(h.len(), sigma2.len())?;
        if h.is_empty() {
            return Err(NqmError::arg("problem must have at least one dimension"));
        }
        if let Some((i, x)) = h.iter().enumerate().find(|(_, x)| !(**x > 0.0 && x.is_finite())) {
            return Err(NqmError::arg(format!("curvature h[{i}] = {x} must be positive")));
        }
        if let Some((i, x)) = sigma2
            .iter()
            .enumerate()
            .find(|(_, x)| !(**x >= 0.0 && x.is_finite()))
        {
            return Err(NqmError::arg(format!("noise variance sigma2[{i}] = {x} must be >= 0")));
        }
        Ok(QuadraticProblem { h, sigma2 })
    }

    /// Noise variances set to `1/hᵢ`.
    pub fn with_default_noise(h: Vec<f64>) -> Result<Self> {
        let sigma2 = default_sigma2(&h)?;
        Self::new(h, sigma2)
    }

    /// Zero-noise problem with the given curvatures.
    pub fn deterministic(h: Vec<f64>) -> Result<Self> {
        let d = h.len();
        Self::new(h, vec![0.0; d])
    }

    pub fn dim(&self) -> usize {
        self.h.len()
    }

    pub fn h(&self) -> &[f64] {
        &self.h
    }

    pub fn sigma2(&self) -> &[f64] {
        &self.sigma2
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma2.iter().all(|&s| s == 0.0)
    }

    /// The irreducible part of the expected loss, `½ Σ hᵢ σᵢ²`.
    pub fn noise_floor(&self) -> f64 {
        0.5 * self.h.iter().zip(&self.sigma2).map(|(h, s)| h * s).sum::<f64>()
    }

    /// Per-dimension expected loss `½ hᵢ (E[θᵢ]² + V[θᵢ] + σᵢ²)`.
    #[inline]
    pub fn dim_loss(&self, i: usize, e_theta: f64, v_theta: f64) -> f64 {
        0.5 * self.h[i] * (e_theta * e_theta + v_theta + self.sigma2[i])
    }

    /// Expected loss of a distribution of iterates summarized by its moments.
    pub fn expected_loss(&self, state: &MomentState) -> Result<f64> {
        check_dim(self.dim(), state.dim())?;
        Ok((0..self.dim())
            .map(|i| self.dim_loss(i, state.e_theta[i], state.v_theta[i]))
            .sum())
    }

    /// Exact expected loss at a single point `θ`.
    pub fn loss_at(&self, theta: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        Ok((0..self.dim()).map(|i| self.dim_loss(i, theta[i], 0.0)).sum())
    }

    /// Loss observed for one sampled minimum `c`.
    pub fn sampled_loss(&self, theta: &[f64], c: &[f64]) -> Result<f64> {
        check_dim(self.dim(), theta.len())?;
        check_dim(self.dim(), c.len())?;
        Ok(0.5
            * self
                .h
                .iter()
                .zip(theta.iter().zip(c))
                .map(|(h, (t, c))| h * (t - c) * (t - c))
                .sum::<f64>())
    }

    /// Draws a stochastic minimum `cᵢ ~ N(0, σᵢ²)`.
    pub fn sample_minimum<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<f64> {
        self.sigma2
            .iter()
            .map(|s| {
                let z: f64 = rng.sample(StandardNormal);
                s.sqrt() * z
            })
            .collect()
    }

    /// Gradient of the sampled loss for a given minimum.
    pub fn gradient_at(&self, theta: &[f64], c: &[f64]) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        check_dim(self.dim(), c.len())?;
        Ok(self
            .h
            .iter()
            .zip(theta.iter().zip(c))
            .map(|(h, (t, c))| h * (t - c))
            .collect())
    }

    /// Stochastic gradient `h ⊙ (θ − c)` with a fresh minimum drawn from `rng`.
    pub fn sample_gradient<R: Rng + ?Sized>(&self, theta: &[f64], rng: &mut R) -> Result<Vec<f64>> {
        check_dim(self.dim(), theta.len())?;
        let c = self.sample_minimum(rng);
        self.gradient_at(theta, &c)
    }

    /// Same problem with dimensions reordered so that new index `j` is old index `perm[j]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dim(self.dim(), perm.len())?;
        Self::new(
            perm.iter().map(|&p| self.h[p]).collect(),
            perm.iter().map(|&p| self.sigma2[p]).collect(),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SpectrumKind {
    LogUniform,
    Uniform,
    Custom,
}

impl std::str::FromStr for SpectrumKind {
    type Err = NqmError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "loguniform" | "log-uniform" | "log_uniform" => Ok(SpectrumKind::LogUniform),
            "uniform" => Ok(SpectrumKind::Uniform),
            "custom" => Ok(SpectrumKind::Custom),
            _ => Err(NqmError::arg(format!("unknown spectrum kind '{s}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectrumSpec {
    pub kind: SpectrumKind,
    pub dim: usize,
    /// Ratio `h_max / h_min`; ignored for `Custom`.
    pub kappa: f64,
    pub values: Option<Vec<f64>>,
}

impl SpectrumSpec {
    pub fn log_uniform(dim: usize, kappa: f64) -> Self {
        SpectrumSpec {
            kind: SpectrumKind::LogUniform,
            dim,
            kappa,
            values: None,
        }
    }

    pub fn uniform(dim: usize, kappa: f64) -> Self {
        SpectrumSpec {
            kind: SpectrumKind::Uniform,
            dim,
            kappa,
            values: None,
        }
    }

    pub fn custom(values: Vec<f64>) -> Self {
        SpectrumSpec {
            kind: SpectrumKind::Custom,
            dim: values.len(),
            kappa: f64::NAN,
            values: Some(values),
        }
    }
}

/// Builds a curvature vector in `[1/kappa, 1]`, sorted descending.
pub fn make_spectrum(spec: &SpectrumSpec) -> Result<Vec<f64>> {
    match spec.kind {
        SpectrumKind::Custom => {
            let values = spec
                .values
                .as_ref()
                .ok_or_else(|| NqmError::arg("custom spectrum requires explicit values"))?;
            if values.is_empty() {
                return Err(NqmError::arg("custom spectrum is empty"));
            }
            if let Some(x) = values.iter().find(|x| !(**x > 0.0 && x.is_finite())) {
                return Err(NqmError::arg(format!("custom curvature {x} must be positive")));
            }
            let mut h = values.clone();
            h.sort_by(|a, b| b.total_cmp(a));
            Ok(h)
        }
        kind => {
            if !(spec.kappa > 1.0 && spec.kappa.is_finite()) {
                return Err(NqmError::arg(format!("kappa = {} must be > 1", spec.kappa)));
            }
            if spec.dim == 0 {
                return Err(NqmError::arg("spectrum dimension must be >= 1"));
            }
            if spec.dim == 1 {
                return Ok(vec![1.0]);
            }
            let last = (spec.dim - 1) as f64;
            let h_min = 1.0 / spec.kappa;
            let h = (0..spec.dim)
                .map(|j| {
                    let frac = j as f64 / last;
                    match kind {
                        SpectrumKind::LogUniform => spec.kappa.powf(-frac),
                        _ if j + 1 == spec.dim => h_min,
                        _ => 1.0 - frac * (1.0 - h_min),
                    }
                })
                .collect();
            Ok(h)
        }
    }
}

/// Noise variances matching the Fisher-equals-Hessian assumption, `σᵢ² = 1/hᵢ`.
pub fn default_sigma2(h: &[f64]) -> Result<Vec<f64>> {
    h.iter()
        .enumerate()
        .map(|(i, &x)| {
            if x > 0.0 && x.is_finite() {
                Ok(1.0 / x)
            } else {
                Err(NqmError::arg(format!("curvature h[{i}] = {x} must be positive")))
            }
        })
        .collect()
}

/// Reads one curvature per line. Blank lines and `#` comments are skipped.
pub fn load_spectrum(path: impl AsRef<Path>) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| NqmError::io(path, e))?;
    let mut values = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let parse_err = |msg: String| NqmError::Parse {
            path: path.to_path_buf(),
            line: lineno + 1,
            msg,
        };
        let x: f64 = line
            .parse()
            .map_err(|e| parse_err(format!("bad curvature '{line}': {e}")))?;
        if !(x > 0.0 && x.is_finite()) {
            return Err(parse_err(format!("curvature {x} must be positive")));
        }
        values.push(x);
    }
    if values.is_empty() {
        return Err(NqmError::arg(format!("{}: no curvatures found", path.display())));
    }
    Ok(values)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(e: &[f64], v: &[f64]) -> MomentState {
        let d = e.len();
        MomentState {
            e_theta: e.to_vec(),
            e_v: vec![0.0; d],
            v_theta: v.to_vec(),
            v_v: vec![0.0; d],
            cov: vec![0.0; d],
        }
    }

    #[test]
    fn expected_loss_examples() {
        let p = QuadraticProblem::new(vec![1.0], vec![0.0]).unwrap();
        assert_eq!(p.expected_loss(&state(&[0.0], &[0.0])).unwrap(), 0.0);
        let p = QuadraticProblem::new(vec![1.0], vec![1.0]).unwrap();
        assert_eq!(p.expected_loss(&state(&[0.0], &[0.0])).unwrap(), 0.5);
        let p = QuadraticProblem::new(vec![1.0, 2.0], vec![1.0, 0.5]).unwrap();
        assert_eq!(p.expected_loss(&state(&[1.0, 0.0], &[0.0, 0.0])).unwrap(), 1.5);
    }

    #[test]
    fn expected_loss_rejects_mismatch() {
        let p = QuadraticProblem::new(vec![1.0, 2.0], vec![1.0, 0.5]).unwrap();
        assert!(matches!(
            p.expected_loss(&state(&[1.0], &[0.0])),
            Err(NqmError::DimensionMismatch { expected: 2, got: 1 })
        ));
    }

    #[test]
    fn problem_validation() {
        assert!(QuadraticProblem::new(vec![0.0], vec![1.0]).is_err());
        assert!(QuadraticProblem::new(vec![1.0], vec![-1.0]).is_err());
        assert!(QuadraticProblem::new(vec![1.0, 2.0], vec![1.0]).is_err());
        assert!(QuadraticProblem::new(vec![], vec![]).is_err());
    }

    #[test]
    fn noiseless_gradient_is_exact() {
        let p = QuadraticProblem::deterministic(vec![1.0, 2.0, 0.5]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let g = p.sample_gradient(&[1.0, -1.0, 4.0], &mut rng).unwrap();
        assert_eq!(g, vec![1.0, -2.0, 2.0]);
    }

    #[test]
    fn gradient_noise_moments() {
        let p = QuadraticProblem::new(vec![1.0], vec![1.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let n = 100_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..n {
            let g = p.sample_gradient(&[0.0], &mut rng).unwrap()[0];
            s += g;
            s2 += g * g;
        }
        let mean = s / n as f64;
        let var = s2 / n as f64 - mean * mean;
        let se_mean = (1.0 / n as f64).sqrt();
        // variance of the sample variance of a unit normal is 2/n
        let se_var = (2.0 / n as f64).sqrt();
        assert!(mean.abs() < 4.0 * se_mean, "mean {mean}");
        assert!((var - 1.0).abs() < 4.0 * se_var, "var {var}");
    }

    #[test]
    fn gradient_is_deterministic_under_seed() {
        let p = QuadraticProblem::with_default_noise(vec![1.0, 0.1]).unwrap();
        let a = p
            .sample_gradient(&[0.3, 0.2], &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        let b = p
            .sample_gradient(&[0.3, 0.2], &mut ChaCha8Rng::seed_from_u64(5))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spectrum_examples() {
        let h = make_spectrum(&SpectrumSpec::log_uniform(3, 100.0)).unwrap();
        assert!((h[0] - 1.0).abs() < 1e-15 && (h[1] - 0.1).abs() < 1e-15 && (h[2] - 0.01).abs() < 1e-15);
        assert_eq!(make_spectrum(&SpectrumSpec::uniform(2, 10.0)).unwrap(), vec![1.0, 0.1]);
        assert_eq!(
            make_spectrum(&SpectrumSpec::custom(vec![2.0, 1.0, 3.0])).unwrap(),
            vec![3.0, 2.0, 1.0]
        );
    }

    #[test]
    fn spectrum_errors() {
        assert!(make_spectrum(&SpectrumSpec::log_uniform(3, 1.0)).is_err());
        assert!(make_spectrum(&SpectrumSpec::uniform(3, 0.5)).is_err());
        assert!(make_spectrum(&SpectrumSpec::custom(vec![1.0, 0.0])).is_err());
        assert!(make_spectrum(&SpectrumSpec::custom(vec![1.0, -2.0])).is_err());
    }

    #[test]
    fn default_sigma2_examples() {
        assert_eq!(default_sigma2(&[1.0, 2.0, 4.0]).unwrap(), vec![1.0, 0.5, 0.25]);
        assert_eq!(default_sigma2(&[1.0]).unwrap(), vec![1.0]);
        assert!((default_sigma2(&[0.01]).unwrap()[0] - 100.0).abs() < 1e-12);
        assert!(default_sigma2(&[1.0, 0.0]).is_err());
    }

    #[test]
    fn spectrum_file_roundtrip() {
        let dir = std::env::temp_dir().join(format!("nqm-spec-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("h.txt");
        std::fs::write(&path, "# curvatures\n0.5\n2\n\n1e-3\n").unwrap();
        assert_eq!(load_spectrum(&path).unwrap(), vec![0.5, 2.0, 1e-3]);
        std::fs::write(&path, "1\n-1\n").unwrap();
        assert!(matches!(load_spectrum(&path), Err(NqmError::Parse { line: 2, .. })));
        assert!(matches!(load_spectrum(dir.join("missing")), Err(NqmError::Io { .. })));
    }
}
