//! Analytic denoisers standing in for a trained noise-prediction network.
//!
//! The Gaussian and mixture oracles treat every latent element as an
//! independent draw from a one-dimensional prior and return the exact
//! posterior quantities for the corruption `x = alpha * x0 + sigma * eps`:
//!
//! ```text
//! eps_hat = -sigma * d/dx log p_t(x)
//! x0_hat  = E[x0 | x]
//! ```
//!
//! Both are evaluated in closed forms that never divide by `alpha` or
//! `sigma`, so the oracles stay finite at either end of a schedule.

use std::sync::Arc;

use ndarray::Zip;

use crate::error::{Error, Result};
use crate::schedule::NoiseLevel;
use crate::tensor::LatentTensor;

/// Which quantity an oracle returns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Convention {
    /// The noise `eps`.
    Epsilon,
    /// The straight-line flow velocity `eps - x0`.
    Velocity,
}

/// A prior mean that is either shared by all elements or given per element.
#[derive(Debug, Clone, PartialEq)]
pub enum Mean {
    Scalar(f64),
    Field(Arc<LatentTensor>),
}

impl Mean {
    fn at(&self, flat: usize) -> f64 {
        match self {
            Mean::Scalar(m) => *m,
            Mean::Field(t) => t.as_slice()[flat],
        }
    }

    fn check_shape(&self, x: &LatentTensor) -> Result<()> {
        if let Mean::Field(t) = self {
            x.ensure_same_shape(t, "oracle prior mean")?;
        }
        Ok(())
    }
}

impl From<f64> for Mean {
    fn from(m: f64) -> Self {
        Mean::Scalar(m)
    }
}

impl From<LatentTensor> for Mean {
    fn from(t: LatentTensor) -> Self {
        Mean::Field(Arc::new(t))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: Mean,
    pub variance: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum OracleKind {
    /// Returns the same value everywhere, in the oracle's own convention.
    ConstantEps(f64),
    IsotropicGaussian { mean: Mean, variance: f64 },
    GaussianMixture(Vec<MixtureComponent>),
    /// A perfect denoiser: its `x0` estimate is always the stored target.
    TabulatedVideoTarget(Arc<LatentTensor>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserOracle {
    kind: OracleKind,
    convention: Convention,
}

impl DenoiserOracle {
    pub fn new(kind: OracleKind, convention: Convention) -> Result<Self> {
        match &kind {
            OracleKind::ConstantEps(c) if !c.is_finite() => {
                return Err(Error::InvalidInput("constant prediction must be finite".into()))
            }
            OracleKind::IsotropicGaussian { mean, variance } => {
                check_component(mean, *variance)?;
            }
            OracleKind::GaussianMixture(components) => {
                if components.is_empty() {
                    return Err(Error::InvalidInput("mixture needs at least one component".into()));
                }
                let total: f64 = components.iter().map(|c| c.weight).sum();
                if components.iter().any(|c| !(c.weight > 0.0)) || (total - 1.0).abs() > 1e-12 {
                    return Err(Error::InvalidInput(format!(
                        "mixture weights must be positive and sum to 1 (sum = {total})"
                    )));
                }
                for c in components {
                    check_component(&c.mean, c.variance)?;
                }
            }
            _ => {}
        }
        Ok(Self { kind, convention })
    }

    pub fn constant(value: f64, convention: Convention) -> Result<Self> {
        Self::new(OracleKind::ConstantEps(value), convention)
    }

    pub fn gaussian(mean: impl Into<Mean>, variance: f64, convention: Convention) -> Result<Self> {
        Self::new(
            OracleKind::IsotropicGaussian {
                mean: mean.into(),
                variance,
            },
            convention,
        )
    }

    pub fn mixture(components: Vec<MixtureComponent>, convention: Convention) -> Result<Self> {
        Self::new(OracleKind::GaussianMixture(components), convention)
    }

    pub fn perfect(target: LatentTensor, convention: Convention) -> Self {
        Self {
            kind: OracleKind::TabulatedVideoTarget(Arc::new(target)),
            convention,
        }
    }

    pub fn kind(&self) -> &OracleKind {
        &self.kind
    }

    pub fn convention(&self) -> Convention {
        self.convention
    }

    /// The same prior answering in another convention. `None` for constant
    /// oracles, whose output is only defined in their own convention.
    pub fn in_convention(&self, convention: Convention) -> Option<Self> {
        if convention == self.convention {
            return Some(self.clone());
        }
        match self.kind {
            OracleKind::ConstantEps(_) => None,
            _ => Some(Self {
                kind: self.kind.clone(),
                convention,
            }),
        }
    }

    /// Evaluates the oracle at `x`, corrupted at `level`, in its convention.
    pub fn evaluate(&self, x: &LatentTensor, level: NoiseLevel) -> Result<LatentTensor> {
        let out = match &self.kind {
            OracleKind::ConstantEps(c) => LatentTensor::full(x.shape(), *c),
            _ => {
                let (x0, eps) = self.posterior(x, level)?;
                match self.convention {
                    Convention::Epsilon => eps,
                    Convention::Velocity => eps.lincomb(1.0, &x0, -1.0),
                }
            }
        };
        if !out.is_finite() {
            return Err(Error::NonFiniteOracle);
        }
        Ok(out)
    }

    /// Posterior mean of `x0` and the matching noise estimate. Not defined for
    /// constant oracles.
    pub fn posterior(&self, x: &LatentTensor, level: NoiseLevel) -> Result<(LatentTensor, LatentTensor)> {
        let NoiseLevel { alpha, sigma } = level;
        match &self.kind {
            OracleKind::ConstantEps(_) => Err(Error::Incompatible(
                "a constant oracle has no posterior".into(),
            )),
            OracleKind::IsotropicGaussian { mean, variance } => {
                mean.check_shape(x)?;
                let shape = x.shape();
                let mut x0 = Vec::with_capacity(x.len());
                let mut eps = Vec::with_capacity(x.len());
                for (i, &xi) in x.as_slice().iter().enumerate() {
                    let m = mean.at(i);
                    let denom = alpha * alpha * variance + sigma * sigma;
                    let r = (xi - alpha * m) / denom;
                    x0.push(m + alpha * variance * r);
                    eps.push(sigma * r);
                }
                Ok((
                    LatentTensor::from_shape_vec(shape, x0).map_err(|_| Error::NonFiniteOracle)?,
                    LatentTensor::from_shape_vec(shape, eps).map_err(|_| Error::NonFiniteOracle)?,
                ))
            }
            OracleKind::GaussianMixture(components) => {
                for c in components {
                    c.mean.check_shape(x)?;
                }
                let shape = x.shape();
                let k = components.len();
                let mut logw = vec![0.0; k];
                let mut x0 = Vec::with_capacity(x.len());
                let mut eps = Vec::with_capacity(x.len());
                for (i, &xi) in x.as_slice().iter().enumerate() {
                    for (j, c) in components.iter().enumerate() {
                        let d = alpha * alpha * c.variance + sigma * sigma;
                        let r = xi - alpha * c.mean.at(i);
                        logw[j] = c.weight.ln() - 0.5 * d.ln() - 0.5 * r * r / d;
                    }
                    let top = logw.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let z: f64 = logw.iter().map(|l| (l - top).exp()).sum();
                    let (mut mx0, mut meps) = (0.0, 0.0);
                    for (j, c) in components.iter().enumerate() {
                        let resp = (logw[j] - top).exp() / z;
                        let d = alpha * alpha * c.variance + sigma * sigma;
                        let m = c.mean.at(i);
                        let r = (xi - alpha * m) / d;
                        mx0 += resp * (m + alpha * c.variance * r);
                        meps += resp * sigma * r;
                    }
                    x0.push(mx0);
                    eps.push(meps);
                }
                Ok((
                    LatentTensor::from_shape_vec(shape, x0).map_err(|_| Error::NonFiniteOracle)?,
                    LatentTensor::from_shape_vec(shape, eps).map_err(|_| Error::NonFiniteOracle)?,
                ))
            }
            OracleKind::TabulatedVideoTarget(target) => {
                x.ensure_same_shape(target, "tabulated oracle target")?;
                let mut eps = ndarray::Array4::zeros(x.as_array().raw_dim());
                // At sigma = 0 the noise term carries no weight; report zero.
                if sigma > 0.0 {
                    Zip::from(&mut eps)
                        .and(x.as_array())
                        .and(target.as_array())
                        .for_each(|e, &xi, &ti| *e = (xi - alpha * ti) / sigma);
                }
                let eps = LatentTensor::new(eps).map_err(|_| Error::NonFiniteOracle)?;
                Ok(((**target).clone(), eps))
            }
        }
    }
}

fn check_component(mean: &Mean, variance: f64) -> Result<()> {
    if !(variance > 0.0 && variance.is_finite()) {
        return Err(Error::InvalidInput(format!("variance {variance} must be positive")));
    }
    if let Mean::Scalar(m) = mean {
        if !m.is_finite() {
            return Err(Error::InvalidInput("mean must be finite".into()));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lvl(alpha: f64, sigma: f64) -> NoiseLevel {
        NoiseLevel { alpha, sigma }
    }

    #[test]
    fn gaussian_eps_is_scaled_score() {
        // p_t = N(alpha m, alpha^2 v + sigma^2), score by central differences.
        let (m, v, a, s) = (0.3, 0.5, 0.6, 0.7);
        let oracle = DenoiserOracle::gaussian(m, v, Convention::Epsilon).unwrap();
        let logp = |x: f64| {
            let d = a * a * v + s * s;
            -0.5 * (x - a * m).powi(2) / d
        };
        for &x in &[-1.3, 0.0, 0.4, 2.2] {
            let h = 1e-5;
            let score = (logp(x + h) - logp(x - h)) / (2.0 * h);
            let eps = oracle
                .evaluate(&LatentTensor::from_vec(vec![x]).unwrap(), lvl(a, s))
                .unwrap();
            assert!((eps.get([0, 0, 0, 0]) + s * score).abs() < 1e-8);
        }
    }

    #[test]
    fn mixture_weights_validated() {
        let c = |w: f64| MixtureComponent {
            weight: w,
            mean: Mean::Scalar(0.0),
            variance: 1.0,
        };
        assert!(DenoiserOracle::mixture(vec![c(0.5), c(0.5)], Convention::Epsilon).is_ok());
        assert!(DenoiserOracle::mixture(vec![c(0.5), c(0.6)], Convention::Epsilon).is_err());
        assert!(DenoiserOracle::mixture(vec![c(1.5), c(-0.5)], Convention::Epsilon).is_err());
    }

    #[test]
    fn mixture_posterior_recomposes_x() {
        let comps = vec![
            MixtureComponent {
                weight: 0.3,
                mean: Mean::Scalar(-1.0),
                variance: 0.05,
            },
            MixtureComponent {
                weight: 0.7,
                mean: Mean::Scalar(0.8),
                variance: 0.1,
            },
        ];
        let oracle = DenoiserOracle::mixture(comps, Convention::Epsilon).unwrap();
        let x = LatentTensor::from_vec(vec![-2.0, -0.1, 0.0, 0.9, 3.0]).unwrap();
        for &(a, s) in &[(1.0, 0.0), (0.5, 0.5), (0.0, 1.0), (0.3, 0.9)] {
            let (x0, eps) = oracle.posterior(&x, lvl(a, s)).unwrap();
            let back = x0.lincomb(a, &eps, s);
            assert!(back.max_abs_diff(&x) < 1e-12, "a={a} s={s}");
        }
    }

    #[test]
    fn single_component_mixture_matches_gaussian() {
        let g = DenoiserOracle::gaussian(0.2, 0.4, Convention::Velocity).unwrap();
        let m = DenoiserOracle::mixture(
            vec![MixtureComponent {
                weight: 1.0,
                mean: Mean::Scalar(0.2),
                variance: 0.4,
            }],
            Convention::Velocity,
        )
        .unwrap();
        let x = LatentTensor::from_vec(vec![-1.0, 0.5, 2.0]).unwrap();
        let l = lvl(0.4, 0.6);
        assert!(g.evaluate(&x, l).unwrap().max_abs_diff(&m.evaluate(&x, l).unwrap()) < 1e-14);
    }

    #[test]
    fn constant_has_no_other_convention() {
        let c = DenoiserOracle::constant(0.0, Convention::Epsilon).unwrap();
        assert!(c.in_convention(Convention::Velocity).is_none());
        assert!(c.in_convention(Convention::Epsilon).is_some());
    }
}
