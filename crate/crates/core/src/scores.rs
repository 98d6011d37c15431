//! Surrogate scores built from trimmed one-dimensional statistics over a direction net,
//! and the closed-form error metrics they stand in for.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{dot, Dataset};
use crate::error::{invalid, HptrError, Result};
use crate::linalg::{self, flatten, inv_pd, inv_sqrt_pd, sqrt_pd, symmetric_basis, to_mat};
use crate::net::{DirectionNet, NetKind};
use crate::robust1d::{
    mean_of_smallest, one_sided_keep, tail_count, trimmed_moments, TWO_SIDED_TAIL_FRACTION,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Mean,
    EuclideanMean,
    #[serde(rename = "lr")]
    Regression,
    #[serde(rename = "cov")]
    Covariance,
    Pca,
}

impl Task {
    /// Dimension of the candidate grid for records of dimension d.
    pub fn param_dim(self, d: usize) -> usize {
        match self {
            Task::Covariance => d * (d + 1) / 2,
            _ => d,
        }
    }

    pub fn net_kind(self) -> NetKind {
        match self {
            Task::Covariance => NetKind::SymmetricMatrix,
            _ => NetKind::Vector,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Mean => "mean",
            Task::EuclideanMean => "euclidean-mean",
            Task::Regression => "lr",
            Task::Covariance => "cov",
            Task::Pca => "pca",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", content = "value", rename_all = "kebab-case")]
pub enum TaskParameter {
    Mean(Vec<f64>),
    EuclideanMean(Vec<f64>),
    #[serde(rename = "lr")]
    Regression(Vec<f64>),
    #[serde(rename = "cov")]
    Covariance(Vec<Vec<f64>>),
    Pca(Vec<f64>),
}

impl TaskParameter {
    pub fn task(&self) -> Task {
        match self {
            TaskParameter::Mean(_) => Task::Mean,
            TaskParameter::EuclideanMean(_) => Task::EuclideanMean,
            TaskParameter::Regression(_) => Task::Regression,
            TaskParameter::Covariance(_) => Task::Covariance,
            TaskParameter::Pca(_) => Task::Pca,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            TaskParameter::Pca(u) => {
                let n = u.iter().map(|x| x * x).sum::<f64>().sqrt();
                if (n - 1.0).abs() > 1e-10 {
                    return Err(HptrError::Domain(format!("direction has norm {n}")));
                }
            }
            TaskParameter::Covariance(s) => {
                if !linalg::is_positive_definite(&to_mat(s)?) {
                    return Err(HptrError::Domain("covariance candidate is not positive definite".into()));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

/// Ground truth an estimate is measured against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "kebab-case")]
pub enum Reference {
    Mean { mu: Vec<f64>, sigma: Vec<Vec<f64>> },
    EuclideanMean { mu: Vec<f64> },
    #[serde(rename = "lr")]
    Regression { beta: Vec<f64>, sigma: Vec<Vec<f64>>, gamma: f64 },
    #[serde(rename = "cov")]
    Covariance { sigma: Vec<Vec<f64>>, psi: Option<Vec<Vec<f64>>> },
    Pca { sigma: Vec<Vec<f64>> },
}

impl Reference {
    pub fn task(&self) -> Task {
        match self {
            Reference::Mean { .. } => Task::Mean,
            Reference::EuclideanMean { .. } => Task::EuclideanMean,
            Reference::Regression { .. } => Task::Regression,
            Reference::Covariance { .. } => Task::Covariance,
            Reference::Pca { .. } => Task::Pca,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrueDistance {
    pub value: f64,
    pub witness: Option<Vec<f64>>,
}

fn check_net(net: &DirectionNet, kind: NetKind, d: usize) -> Result<()> {
    if net.kind() != kind || net.dim() != d {
        return Err(invalid(format!(
            "net is {:?} of dimension {}, expected {kind:?} of dimension {d}",
            net.kind(),
            net.dim()
        )));
    }
    Ok(())
}

fn two_sided_tail(n: usize, alpha: f64) -> Result<usize> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1/2), got {alpha}")));
    }
    let t = tail_count(n, alpha, TWO_SIDED_TAIL_FRACTION);
    if n < 2 * t + 1 {
        return Err(HptrError::InsufficientData { needed: 2 * t + 1, got: n });
    }
    Ok(t)
}

/// Per-direction trimmed location and spread of projected features; the common core of the
/// mean, euclidean-mean and covariance scores.
#[derive(Clone, Debug)]
pub struct LocationScorer {
    pub dirs: Vec<Vec<f64>>,
    /// Projections of every record onto every direction, one row per direction.
    pub projections: Vec<Vec<f64>>,
    pub center: Vec<f64>,
    /// Trimmed standard deviation (normalized scores) or 1.
    pub scale: Vec<f64>,
    pub spread: Vec<f64>,
    pub tail: usize,
    pub normalized: bool,
}

impl LocationScorer {
    fn build(dirs: Vec<Vec<f64>>, projections: Vec<Vec<f64>>, tail: usize, normalized: bool) -> Result<Self> {
        let n = projections.first().map_or(0, |p| p.len());
        if n < 2 * tail + 1 {
            return Err(HptrError::InsufficientData { needed: 2 * tail + 1, got: n });
        }
        let mut center = Vec::with_capacity(dirs.len());
        let mut spread = Vec::with_capacity(dirs.len());
        let mut buf = vec![0.0; n];
        for (k, z) in projections.iter().enumerate() {
            buf.copy_from_slice(z);
            let (m, v) = trimmed_moments(&mut buf, tail);
            if normalized && !(v > 0.0) {
                return Err(HptrError::DegenerateDirection { index: k });
            }
            center.push(m);
            spread.push(v.sqrt());
        }
        let scale = if normalized { spread.clone() } else { vec![1.0; dirs.len()] };
        Ok(LocationScorer { dirs, projections, center, scale, spread, tail, normalized })
    }

    pub fn per_direction(&self, theta: &[f64]) -> Vec<f64> {
        self.dirs
            .iter()
            .zip(self.center.iter().zip(&self.scale))
            .map(|(v, (c, s))| (dot(v, theta) - c) / s)
            .collect()
    }

    pub fn score(&self, theta: &[f64]) -> f64 {
        let mut best = f64::NEG_INFINITY;
        for (v, (c, s)) in self.dirs.iter().zip(self.center.iter().zip(&self.scale)) {
            let r = (dot(v, theta) - c) / s;
            if r > best {
                best = r;
            }
        }
        best
    }
}

pub struct MeanScorer(pub LocationScorer);

impl MeanScorer {
    pub fn with_tail(ds: &Dataset, tail: usize, net: &DirectionNet, normalized: bool) -> Result<Self> {
        check_net(net, NetKind::Vector, ds.d)?;
        let dirs = net.elements().to_vec();
        let proj = dirs.iter().map(|v| ds.project(v)).collect();
        Ok(MeanScorer(LocationScorer::build(dirs, proj, tail, normalized)?))
    }

    pub fn new(ds: &Dataset, alpha: f64, net: &DirectionNet, normalized: bool) -> Result<Self> {
        Self::with_tail(ds, two_sided_tail(ds.n, alpha)?, net, normalized)
    }

    pub fn score(&self, mu: &[f64]) -> f64 {
        self.0.score(mu)
    }
}

/// max over the net of (<v, mu> - trimmed mean) / trimmed sd.
pub fn mean_score(ds: &Dataset, mu: &[f64], alpha: f64, net: &DirectionNet) -> Result<f64> {
    check_len(mu, ds.d)?;
    Ok(MeanScorer::new(ds, alpha, net, true)?.score(mu))
}

/// max over the net of <v, mu> - trimmed mean.
pub fn mean_score_euclidean(ds: &Dataset, mu: &[f64], alpha: f64, net: &DirectionNet) -> Result<f64> {
    check_len(mu, ds.d)?;
    Ok(MeanScorer::new(ds, alpha, net, false)?.score(mu))
}

fn check_len(v: &[f64], d: usize) -> Result<()> {
    if v.len() != d {
        return Err(HptrError::Shape(format!("parameter of length {} for dimension {d}", v.len())));
    }
    Ok(())
}

pub struct CovScorer(pub LocationScorer);

impl CovScorer {
    pub fn with_tail(ds: &Dataset, tail: usize, net: &DirectionNet) -> Result<Self> {
        check_net(net, NetKind::SymmetricMatrix, ds.d)?;
        let d = ds.d;
        let dirs = net.elements().to_vec();
        let proj = dirs
            .iter()
            .map(|v| {
                (0..ds.n)
                    .map(|i| {
                        let x = ds.row(i);
                        let mut acc = 0.0;
                        for a in 0..d {
                            for b in 0..d {
                                acc += v[d * a + b] * x[a] * x[b];
                            }
                        }
                        acc
                    })
                    .collect()
            })
            .collect();
        Ok(CovScorer(LocationScorer::build(dirs, proj, tail, true)?))
    }

    pub fn new(ds: &Dataset, alpha: f64, net: &DirectionNet) -> Result<Self> {
        Self::with_tail(ds, two_sided_tail(ds.n, alpha)?, net)
    }

    pub fn score(&self, sigma_hat: &DMatrix<f64>) -> Result<f64> {
        if !linalg::is_positive_definite(sigma_hat) {
            return Err(HptrError::Domain("candidate is not positive definite".into()));
        }
        Ok(self.0.score(&flatten(sigma_hat)))
    }
}

pub fn cov_score(ds: &Dataset, sigma_hat: &DMatrix<f64>, alpha: f64, net: &DirectionNet) -> Result<f64> {
    if sigma_hat.nrows() != ds.d || sigma_hat.ncols() != ds.d {
        return Err(HptrError::Shape("candidate covariance has the wrong size".into()));
    }
    if !linalg::is_positive_definite(sigma_hat) {
        return Err(HptrError::Domain("candidate is not positive definite".into()));
    }
    CovScorer::new(ds, alpha, net)?.score(sigma_hat)
}

/// Regression score: trimmed mean of <v, x_i (y_i - x_i' beta)> over its own middle block,
/// divided by the trimmed second moment of <v, x_i> and by gamma_hat.
pub struct LrScorer {
    pub dirs: Vec<Vec<f64>>,
    pub inputs: Vec<Vec<f64>>,
    /// Trimmed root second moment of <v, x> about zero.
    pub scale: Vec<f64>,
    pub gamma_hat: f64,
    pub tail: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    d: usize,
}

impl LrScorer {
    pub fn with_tail(ds: &Dataset, tail: usize, gamma_hat: f64, net: &DirectionNet) -> Result<Self> {
        check_net(net, NetKind::Vector, ds.d)?;
        let y = ds.labels_required()?.to_vec();
        if !(gamma_hat > 0.0) {
            return Err(HptrError::DegenerateNoise);
        }
        if ds.n < 2 * tail + 1 {
            return Err(HptrError::InsufficientData { needed: 2 * tail + 1, got: ds.n });
        }
        let dirs = net.elements().to_vec();
        let inputs: Vec<Vec<f64>> = dirs.iter().map(|v| ds.project(v)).collect();
        let mut scale = Vec::with_capacity(dirs.len());
        let mut buf = vec![0.0; ds.n];
        for (k, a) in inputs.iter().enumerate() {
            buf.copy_from_slice(a);
            let mid = crate::robust1d::middle_block(&mut buf, tail);
            let second = mid.iter().map(|v| v * v).sum::<f64>() / mid.len() as f64;
            if !(second > 0.0) {
                return Err(HptrError::DegenerateDirection { index: k });
            }
            scale.push(second.sqrt());
        }
        Ok(LrScorer { dirs, inputs, scale, gamma_hat, tail, x: ds.x.clone(), y, d: ds.d })
    }

    pub fn new(ds: &Dataset, alpha: f64, gamma_hat: f64, net: &DirectionNet) -> Result<Self> {
        Self::with_tail(ds, two_sided_tail(ds.n, alpha)?, gamma_hat, net)
    }

    pub fn residuals(&self, beta: &[f64]) -> Vec<f64> {
        self.y
            .iter()
            .enumerate()
            .map(|(i, yi)| yi - dot(&self.x[i * self.d..(i + 1) * self.d], beta))
            .collect()
    }

    /// Gradient-like values <v, x_i> r_i for direction k, written into `out`.
    pub fn gradient_values(&self, k: usize, residuals: &[f64], out: &mut [f64]) {
        for ((o, a), r) in out.iter_mut().zip(&self.inputs[k]).zip(residuals) {
            *o = a * r;
        }
    }

    pub fn per_direction(&self, beta: &[f64]) -> Vec<f64> {
        let r = self.residuals(beta);
        let mut buf = vec![0.0; r.len()];
        (0..self.dirs.len())
            .map(|k| {
                self.gradient_values(k, &r, &mut buf);
                let (m, _) = trimmed_moments(&mut buf, self.tail);
                m / (self.scale[k] * self.gamma_hat)
            })
            .collect()
    }

    pub fn score(&self, beta: &[f64]) -> f64 {
        self.per_direction(beta).into_iter().fold(f64::NEG_INFINITY, f64::max)
    }
}

pub fn lr_score(ds: &Dataset, beta: &[f64], alpha: f64, gamma_hat: f64, net: &DirectionNet) -> Result<f64> {
    check_len(beta, ds.d)?;
    Ok(LrScorer::new(ds, alpha, gamma_hat, net)?.score(beta))
}

/// PCA score 1 - q(u) / max_v q(v), q being the mean of the smallest kept squared projections.
pub struct PcaScorer {
    pub dirs: Vec<Vec<f64>>,
    pub quad: Vec<f64>,
    pub denominator: f64,
    pub keep: usize,
    ds: Dataset,
}

pub fn one_sided_quadratic(ds: &Dataset, u: &[f64], keep: usize) -> f64 {
    let mut w: Vec<f64> = (0..ds.n).map(|i| dot(ds.row(i), u).powi(2)).collect();
    mean_of_smallest(&mut w, keep)
}

impl PcaScorer {
    pub fn with_keep(ds: &Dataset, keep: usize, net: &DirectionNet) -> Result<Self> {
        check_net(net, NetKind::Vector, ds.d)?;
        if keep < 1 || keep > ds.n {
            return Err(HptrError::InsufficientData { needed: 1, got: keep });
        }
        let dirs = net.elements().to_vec();
        let quad: Vec<f64> = dirs.iter().map(|v| one_sided_quadratic(ds, v, keep)).collect();
        let denominator = quad.iter().copied().fold(0.0, f64::max);
        if !(denominator > 0.0) {
            return Err(HptrError::DegenerateData("all trimmed projections vanish".into()));
        }
        Ok(PcaScorer { dirs, quad, denominator, keep, ds: ds.clone() })
    }

    pub fn new(ds: &Dataset, alpha: f64, net: &DirectionNet) -> Result<Self> {
        if !(0.0..0.5).contains(&alpha) {
            return Err(invalid(format!("alpha must lie in [0, 1/2), got {alpha}")));
        }
        Self::with_keep(ds, one_sided_keep(ds.n, alpha), net)
    }

    pub fn score_index(&self, k: usize) -> f64 {
        1.0 - self.quad[k] / self.denominator
    }

    pub fn score(&self, u: &[f64]) -> f64 {
        1.0 - one_sided_quadratic(&self.ds, u, self.keep) / self.denominator
    }
}

pub fn pca_score(ds: &Dataset, u: &[f64], alpha: f64, net: &DirectionNet) -> Result<f64> {
    check_len(u, ds.d)?;
    Ok(PcaScorer::new(ds, alpha, net)?.score(u))
}

/// Closed-form error of an estimate against the truth.
pub fn true_distance(param: &TaskParameter, reference: &Reference) -> Result<TrueDistance> {
    if param.task() != reference.task() {
        return Err(invalid(format!(
            "{} estimate against {} reference",
            param.task().name(),
            reference.task().name()
        )));
    }
    match (param, reference) {
        (TaskParameter::Mean(mu_hat), Reference::Mean { mu, sigma }) => {
            check_len(mu_hat, mu.len())?;
            let s = to_mat(sigma)?;
            let a = DVector::from_iterator(mu.len(), mu_hat.iter().zip(mu).map(|(x, y)| x - y));
            let value = (inv_sqrt_pd(&s)? * &a).norm();
            let w = inv_pd(&s)? * &a;
            let witness = (w.norm() > 0.0).then(|| (w.clone() / w.norm()).iter().copied().collect());
            Ok(TrueDistance { value, witness })
        }
        (TaskParameter::EuclideanMean(mu_hat), Reference::EuclideanMean { mu }) => {
            check_len(mu_hat, mu.len())?;
            let a: Vec<f64> = mu_hat.iter().zip(mu).map(|(x, y)| x - y).collect();
            let value = a.iter().map(|x| x * x).sum::<f64>().sqrt();
            let witness = (value > 0.0).then(|| a.iter().map(|x| x / value).collect());
            Ok(TrueDistance { value, witness })
        }
        (TaskParameter::Regression(b_hat), Reference::Regression { beta, sigma, gamma }) => {
            check_len(b_hat, beta.len())?;
            if !(*gamma > 0.0) {
                return Err(HptrError::Domain("noise scale must be positive".into()));
            }
            let s = to_mat(sigma)?;
            let a = DVector::from_iterator(beta.len(), b_hat.iter().zip(beta).map(|(x, y)| x - y));
            Ok(TrueDistance { value: (sqrt_pd(&s)? * a).norm() / gamma, witness: None })
        }
        (TaskParameter::Covariance(s_hat), Reference::Covariance { sigma, psi }) => {
            let s = to_mat(sigma)?;
            let sh = to_mat(s_hat)?;
            if sh.shape() != s.shape() {
                return Err(HptrError::Shape("covariance sizes differ".into()));
            }
            let value = match psi {
                None => {
                    let r = inv_sqrt_pd(&s)?;
                    let d = s.nrows();
                    ((&r * &sh * &r) - DMatrix::identity(d, d)).norm() / 2f64.sqrt()
                }
                Some(psi) => {
                    let psi = to_mat(psi)?;
                    let d = s.nrows();
                    if psi.shape() != (d * d, d * d) {
                        return Err(HptrError::Shape("fourth-moment operator has the wrong size".into()));
                    }
                    let b = symmetric_basis(d);
                    let restricted = b.transpose() * psi * &b;
                    let diff = DVector::from_vec(flatten(&(sh - &s)));
                    let x = b.transpose() * diff;
                    (x.transpose() * inv_pd(&restricted)? * &x)[(0, 0)].max(0.0).sqrt()
                }
            };
            Ok(TrueDistance { value, witness: None })
        }
        (TaskParameter::Pca(u), Reference::Pca { sigma }) => {
            let s = to_mat(sigma)?;
            check_len(u, s.nrows())?;
            if !linalg::is_symmetric(&s) {
                return Err(HptrError::Domain("covariance is not symmetric".into()));
            }
            let (top, vec) = linalg::max_eigen(&s);
            if !(top > 0.0) {
                return Err(HptrError::Domain("covariance has no positive eigenvalue".into()));
            }
            let uu = DVector::from_column_slice(u);
            let q = (uu.transpose() * &s * &uu)[(0, 0)];
            Ok(TrueDistance { value: (1.0 - q / top).max(0.0), witness: Some(vec.iter().copied().collect()) })
        }
        _ => unreachable!("task tags already matched"),
    }
}
