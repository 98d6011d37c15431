//! Synthetic generators for the distribution families the estimators target.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erf;

use crate::data::{dot, Dataset, Provenance};
use crate::error::{invalid, HptrError, Result};
use crate::linalg::{self, inv_sqrt_pd, to_mat};
use crate::scores::{Reference, Task};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum NoiseSpec {
    Gaussian { gamma: f64 },
    StudentT { nu: f64, gamma: f64 },
    /// eta = gamma (|z|^2 - d) / sqrt(2d) with z = sigma_x^{-1/2} x: a deterministic, even
    /// function of x, so E[x eta] = 0 while eta is far from independent of x.
    Dependent { gamma: f64 },
}

impl NoiseSpec {
    pub fn gamma(&self) -> f64 {
        match self {
            NoiseSpec::Gaussian { gamma } | NoiseSpec::StudentT { gamma, .. } | NoiseSpec::Dependent { gamma } => *gamma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "kebab-case")]
pub enum FamilySpec {
    Gaussian { mu: Vec<f64>, sigma: Vec<Vec<f64>> },
    /// Coordinates are standard normals truncated to [-truncation, truncation], rescaled to unit
    /// variance, then mapped through sigma^{1/2}.
    SubGaussianBounded { mu: Vec<f64>, sigma: Vec<Vec<f64>>, truncation: f64 },
    /// Zero-mean multivariate t scaled to covariance sigma.
    StudentT { nu: f64, sigma: Vec<Vec<f64>> },
    LinearModel { beta: Vec<f64>, sigma_x: Vec<Vec<f64>>, noise: NoiseSpec },
    /// Multivariate t with 3 degrees of freedom scaled to covariance sigma (only second
    /// moments exist).
    CovBounded { mu: Vec<f64>, sigma: Vec<Vec<f64>> },
    HardPair { alpha: f64, k: u32, side: u8 },
}

impl FamilySpec {
    pub fn name(&self) -> &'static str {
        match self {
            FamilySpec::Gaussian { .. } => "gaussian",
            FamilySpec::SubGaussianBounded { .. } => "sub-gaussian-bounded",
            FamilySpec::StudentT { .. } => "student-t",
            FamilySpec::LinearModel { .. } => "linear-model",
            FamilySpec::CovBounded { .. } => "cov-bounded",
            FamilySpec::HardPair { .. } => "hard-pair",
        }
    }

    pub fn dim(&self) -> usize {
        match self {
            FamilySpec::Gaussian { mu, .. }
            | FamilySpec::SubGaussianBounded { mu, .. }
            | FamilySpec::CovBounded { mu, .. } => mu.len(),
            FamilySpec::StudentT { sigma, .. } => sigma.len(),
            FamilySpec::LinearModel { beta, .. } => beta.len(),
            FamilySpec::HardPair { .. } => 1,
        }
    }

    fn covariance(&self) -> Result<DMatrix<f64>> {
        match self {
            FamilySpec::Gaussian { sigma, .. }
            | FamilySpec::SubGaussianBounded { sigma, .. }
            | FamilySpec::StudentT { sigma, .. }
            | FamilySpec::CovBounded { sigma, .. } => to_mat(sigma),
            FamilySpec::LinearModel { sigma_x, .. } => to_mat(sigma_x),
            FamilySpec::HardPair { alpha, k, side } => {
                let p = hard_pair(*alpha, *k, *side)?;
                Ok(DMatrix::from_element(1, 1, p.variance()))
            }
        }
    }

    fn mean(&self) -> Result<Vec<f64>> {
        Ok(match self {
            FamilySpec::Gaussian { mu, .. }
            | FamilySpec::SubGaussianBounded { mu, .. }
            | FamilySpec::CovBounded { mu, .. } => mu.clone(),
            FamilySpec::StudentT { sigma, .. } => vec![0.0; sigma.len()],
            FamilySpec::LinearModel { beta, .. } => vec![0.0; beta.len()],
            FamilySpec::HardPair { alpha, k, side } => vec![hard_pair(*alpha, *k, *side)?.mean()],
        })
    }

    pub fn validate(&self) -> Result<()> {
        let domain = |m: &str| Err(HptrError::Domain(m.to_string()));
        let d = self.dim();
        if d == 0 {
            return domain("dimension must be positive");
        }
        if !matches!(self, FamilySpec::HardPair { .. }) {
            let s = self.covariance()?;
            if s.shape() != (d, d) {
                return domain("covariance size does not match the dimension");
            }
            if !linalg::is_positive_definite(&s) {
                return domain("covariance must be symmetric positive definite");
            }
        }
        match self {
            FamilySpec::SubGaussianBounded { truncation, .. } if !(*truncation > 0.0) => {
                domain("truncation must be positive")
            }
            FamilySpec::StudentT { nu, .. } if !(*nu > 2.0) => domain("student-t needs nu > 2"),
            FamilySpec::CovBounded { sigma, .. } if linalg::max_eigen(&to_mat(sigma)?).0 > 1.0 + 1e-12 => {
                domain("cov-bounded family needs spectral norm at most 1")
            }
            FamilySpec::LinearModel { noise, .. } => match noise {
                NoiseSpec::StudentT { nu, .. } if !(*nu > 2.0) => domain("student-t noise needs nu > 2"),
                n if !(n.gamma() > 0.0) => domain("noise scale must be positive"),
                _ => Ok(()),
            },
            FamilySpec::HardPair { alpha, k, side } => hard_pair(*alpha, *k, *side).map(|_| ()),
            _ => Ok(()),
        }
    }

    /// Population truth for a task.
    pub fn reference(&self, task: Task) -> Result<Reference> {
        self.validate()?;
        let sigma = linalg::from_mat(&self.covariance()?);
        let unsupported = || invalid(format!("{} has no {} reference", self.name(), task.name()));
        match task {
            Task::Mean => match self {
                FamilySpec::LinearModel { .. } => Err(unsupported()),
                _ => Ok(Reference::Mean { mu: self.mean()?, sigma }),
            },
            Task::EuclideanMean => match self {
                FamilySpec::LinearModel { .. } => Err(unsupported()),
                _ => Ok(Reference::EuclideanMean { mu: self.mean()? }),
            },
            Task::Regression => match self {
                FamilySpec::LinearModel { beta, sigma_x, noise } => Ok(Reference::Regression {
                    beta: beta.clone(),
                    sigma: sigma_x.clone(),
                    gamma: noise.gamma(),
                }),
                _ => Err(unsupported()),
            },
            Task::Covariance => match self {
                FamilySpec::Gaussian { mu, .. } if mu.iter().all(|m| *m == 0.0) => {
                    Ok(Reference::Covariance { sigma, psi: None })
                }
                _ => Err(unsupported()),
            },
            Task::Pca => match self {
                FamilySpec::LinearModel { .. } | FamilySpec::HardPair { .. } => Err(unsupported()),
                _ if self.mean()?.iter().any(|m| *m != 0.0) => Err(unsupported()),
                _ => Ok(Reference::Pca { sigma }),
            },
        }
    }
}

/// Three-atom law on the line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RealPmf {
    pub atoms: Vec<(f64, f64)>,
}

impl RealPmf {
    pub fn mean(&self) -> f64 {
        self.atoms.iter().map(|(x, p)| x * p).sum()
    }

    pub fn variance(&self) -> f64 {
        let m = self.mean();
        self.atoms.iter().map(|(x, p)| p * (x - m).powi(2)).sum()
    }

    pub fn total_variation(&self, other: &RealPmf) -> f64 {
        let mut support: Vec<f64> = self.atoms.iter().chain(&other.atoms).map(|a| a.0).collect();
        support.sort_by(f64::total_cmp);
        support.dedup();
        let mass = |p: &RealPmf, x: f64| p.atoms.iter().filter(|a| a.0 == x).map(|a| a.1).sum::<f64>();
        0.5 * support.iter().map(|&x| (mass(self, x) - mass(other, x)).abs()).sum::<f64>()
    }

    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        for (x, p) in &self.atoms {
            acc += p;
            if u < acc {
                return *x;
            }
        }
        self.atoms.last().expect("non-empty").0
    }
}

/// Two laws at total variation alpha whose means differ by 2 alpha^{1-1/k}: mass (1-alpha)/2 at
/// each of -1 and +1 and mass alpha at -alpha^{-1/k} (side 1) or +alpha^{-1/k} (side 2).
pub fn hard_pair(alpha: f64, k: u32, side: u8) -> Result<RealPmf> {
    if !(alpha > 0.0 && alpha < 0.5) {
        return Err(invalid(format!("alpha must lie in (0, 1/2), got {alpha}")));
    }
    if k < 3 {
        return Err(invalid("moment order k must be at least 3"));
    }
    let far = alpha.powf(-1.0 / k as f64);
    let third = match side {
        1 => -far,
        2 => far,
        _ => return Err(invalid("side must be 1 or 2")),
    };
    let half = (1.0 - alpha) / 2.0;
    Ok(RealPmf { atoms: vec![(-1.0, half), (1.0, half), (third, alpha)] })
}

const BLOCK_ROWS: usize = 4096;

pub(crate) fn block_seed(seed: u64, block: usize) -> u64 {
    // splitmix64 finalizer over (seed, block)
    let mut z = seed ^ (block as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn truncated_normal<R: Rng + ?Sized>(c: f64, rng: &mut R) -> f64 {
    loop {
        let z: f64 = rng.sample(StandardNormal);
        if z.abs() <= c {
            return z;
        }
    }
}

/// Variance of a standard normal truncated to [-c, c].
fn truncated_variance(c: f64) -> f64 {
    let phi = (-0.5 * c * c).exp() / (2.0 * std::f64::consts::PI).sqrt();
    let mass = erf(c / 2f64.sqrt());
    1.0 - 2.0 * c * phi / mass
}

pub fn generate(spec: &FamilySpec, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(invalid("n must be at least 1"));
    }
    spec.validate()?;
    let d = spec.dim();
    let root = match spec {
        FamilySpec::HardPair { .. } => DMatrix::identity(1, 1),
        _ => linalg::sqrt_pd(&spec.covariance()?)?,
    };
    let mean = spec.mean()?;
    let whiten = match spec {
        FamilySpec::LinearModel { noise: NoiseSpec::Dependent { .. }, .. } => Some(inv_sqrt_pd(&spec.covariance()?)?),
        _ => None,
    };
    let pair = match spec {
        FamilySpec::HardPair { alpha, k, side } => Some(hard_pair(*alpha, *k, *side)?),
        _ => None,
    };
    let trunc_sd = match spec {
        FamilySpec::SubGaussianBounded { truncation, .. } => truncated_variance(*truncation).sqrt(),
        _ => 1.0,
    };
    let blocks = n.div_ceil(BLOCK_ROWS);
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = ChaCha20Rng::seed_from_u64(block_seed(seed, b));
            let rows = BLOCK_ROWS.min(n - b * BLOCK_ROWS);
            let mut x = Vec::with_capacity(rows * d);
            let mut y = Vec::new();
            for _ in 0..rows {
                if let Some(p) = &pair {
                    x.push(p.sample(&mut rng));
                    continue;
                }
                let z: Vec<f64> = match spec {
                    FamilySpec::SubGaussianBounded { truncation, .. } => {
                        (0..d).map(|_| truncated_normal(*truncation, &mut rng) / trunc_sd).collect()
                    }
                    FamilySpec::StudentT { .. } | FamilySpec::CovBounded { .. } => {
                        let nu = match spec {
                            FamilySpec::StudentT { nu, .. } => *nu,
                            _ => 3.0,
                        };
                        let g: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
                        let chi: f64 = ChiSquared::new(nu).expect("nu > 0").sample(&mut rng);
                        let s = ((nu - 2.0) / chi).sqrt();
                        g.into_iter().map(|v| v * s).collect()
                    }
                    _ => (0..d).map(|_| rng.sample(StandardNormal)).collect(),
                };
                let zv = DVector::from_vec(z);
                let xi = &root * &zv;
                for j in 0..d {
                    x.push(mean[j] + xi[j]);
                }
                if let FamilySpec::LinearModel { beta, noise, .. } = spec {
                    let xs: Vec<f64> = xi.iter().copied().collect();
                    let eta = match noise {
                        NoiseSpec::Gaussian { gamma } => gamma * rng.sample::<f64, _>(StandardNormal),
                        NoiseSpec::StudentT { nu, gamma } => {
                            let g: f64 = rng.sample(StandardNormal);
                            let chi: f64 = ChiSquared::new(*nu).expect("nu > 0").sample(&mut rng);
                            gamma * g * ((nu - 2.0) / chi).sqrt()
                        }
                        NoiseSpec::Dependent { gamma } => {
                            let w = whiten.as_ref().expect("whitening computed") * &xi;
                            gamma * (w.norm_squared() - d as f64) / (2.0 * d as f64).sqrt()
                        }
                    };
                    y.push(dot(&xs, beta) + eta);
                }
            }
            (x, y)
        })
        .collect();
    let mut x = Vec::with_capacity(n * d);
    let mut y = Vec::new();
    for (bx, by) in parts {
        x.extend(bx);
        y.extend(by);
    }
    let labels = matches!(spec, FamilySpec::LinearModel { .. }).then_some(y);
    let mut ds = Dataset::new(d, x, labels)?;
    ds.seed = seed;
    ds.provenance = Provenance::Clean;
    Ok(ds)
}

/// Sidecar metadata written next to a generated CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Sidecar {
    pub spec: FamilySpec,
    pub seed: u64,
    pub n: usize,
    pub d: usize,
}
