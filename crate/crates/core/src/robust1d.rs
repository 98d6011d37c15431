//! One-dimensional trimmed statistics and the trimmed-residual noise scale.

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{dot, Dataset};
use crate::error::{invalid, HptrError, Result};

/// Fraction of alpha*n removed from each tail by the two-sided trim.
pub const TWO_SIDED_TAIL_FRACTION: f64 = 2.0 / 5.5;
/// Fraction of alpha*n removed from the top by the one-sided trim on squared projections.
pub const ONE_SIDED_TRIM_FRACTION: f64 = 2.0 / 3.5;

// Guards floor() against products like (2/5.5)*0.11*100 landing at 3.9999999.
const ROUNDING_SLACK: f64 = 1e-9;

fn check_alpha(alpha: f64) -> Result<()> {
    if !(0.0..0.5).contains(&alpha) {
        return Err(invalid(format!("alpha must lie in [0, 1/2), got {alpha}")));
    }
    Ok(())
}

pub fn tail_count(n: usize, alpha: f64, tail_fraction: f64) -> usize {
    (tail_fraction * alpha * n as f64 + ROUNDING_SLACK).floor() as usize
}

pub fn one_sided_keep(n: usize, alpha: f64) -> usize {
    n.saturating_sub((ONE_SIDED_TRIM_FRACTION * alpha * n as f64 + ROUNDING_SLACK).floor() as usize)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrimPartition {
    pub bottom: Vec<usize>,
    pub middle: Vec<usize>,
    pub top: Vec<usize>,
    pub tail_count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RobustMoments {
    pub mean: f64,
    pub var: f64,
    pub kept: Vec<usize>,
}

fn stable_order(values: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    idx
}

pub fn partition_with_tail(values: &[f64], tail: usize) -> Result<TrimPartition> {
    let n = values.len();
    if n < 2 * tail + 1 {
        return Err(HptrError::InsufficientData { needed: 2 * tail + 1, got: n });
    }
    let order = stable_order(values);
    Ok(TrimPartition {
        bottom: order[..tail].to_vec(),
        middle: order[tail..n - tail].to_vec(),
        top: order[n - tail..].to_vec(),
        tail_count: tail,
    })
}

pub fn partition_two_sided(values: &[f64], alpha: f64, tail_fraction: f64) -> Result<TrimPartition> {
    check_alpha(alpha)?;
    if !(tail_fraction >= 0.0) {
        return Err(invalid("tail fraction must be non-negative"));
    }
    partition_with_tail(values, tail_count(values.len(), alpha, tail_fraction))
}

fn moments_of(values: &[f64], idx: &[usize]) -> (f64, f64) {
    let m = idx.len() as f64;
    let mean = idx.iter().map(|&i| values[i]).sum::<f64>() / m;
    let var = idx.iter().map(|&i| (values[i] - mean).powi(2)).sum::<f64>() / m;
    (mean, var)
}

pub fn trimmed_mean_var_with_tail(values: &[f64], tail: usize) -> Result<RobustMoments> {
    let part = partition_with_tail(values, tail)?;
    let (mean, var) = moments_of(values, &part.middle);
    Ok(RobustMoments { mean, var, kept: part.middle })
}

pub fn trimmed_mean_var(values: &[f64], alpha: f64) -> Result<RobustMoments> {
    check_alpha(alpha)?;
    trimmed_mean_var_with_tail(values, tail_count(values.len(), alpha, TWO_SIDED_TAIL_FRACTION))
}

/// Moves the middle block (ranks tail..n-tail) into `buf[tail..n-tail]` and returns it.
pub fn middle_block(buf: &mut [f64], tail: usize) -> &mut [f64] {
    let n = buf.len();
    debug_assert!(n > 2 * tail);
    if tail > 0 {
        buf.select_nth_unstable_by(tail, f64::total_cmp);
        let m = n - 2 * tail;
        buf[tail..].select_nth_unstable_by(m, f64::total_cmp);
    }
    &mut buf[tail..n - tail]
}

/// Trimmed (mean, population variance) of a scratch buffer, reordering it in place.
/// Matches [`trimmed_mean_var_with_tail`] without allocating index sets.
pub fn trimmed_moments(buf: &mut [f64], tail: usize) -> (f64, f64) {
    let mid = middle_block(buf, tail);
    let m = mid.len() as f64;
    let mean = mid.iter().sum::<f64>() / m;
    let var = mid.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / m;
    (mean, var)
}

/// Mean of the `keep` smallest values of a scratch buffer.
pub fn mean_of_smallest(buf: &mut [f64], keep: usize) -> f64 {
    debug_assert!(keep >= 1 && keep <= buf.len());
    if keep < buf.len() {
        buf.select_nth_unstable_by(keep, f64::total_cmp);
    }
    buf[..keep].iter().sum::<f64>() / keep as f64
}

pub fn partition_one_sided_sq(sq_values: &[f64], alpha: f64) -> Result<Vec<usize>> {
    check_alpha(alpha)?;
    let keep = one_sided_keep(sq_values.len(), alpha);
    if keep < 1 {
        return Err(HptrError::InsufficientData { needed: 1, got: keep });
    }
    let mut order = stable_order(sq_values);
    order.truncate(keep);
    Ok(order)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NoiseMode {
    Heuristic,
    Bruteforce,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseScale {
    pub gamma_hat: f64,
    pub beta_bar: Vec<f64>,
    pub kept: Vec<usize>,
    /// Set when the best kept design was rank deficient and a minimum-norm fit was used.
    pub degenerate_design: bool,
}

pub const NOISE_MULTISTARTS: usize = 8;

struct Fit {
    beta: Vec<f64>,
    objective: f64,
    kept: Vec<usize>,
    degenerate: bool,
}

/// Least squares on the given rows; minimum-norm solution when the normal matrix is singular.
fn least_squares(ds: &Dataset, y: &[f64], rows: &[usize]) -> (Vec<f64>, bool) {
    let d = ds.d;
    let mut xtx = DMatrix::<f64>::zeros(d, d);
    let mut xty = DVector::<f64>::zeros(d);
    for &i in rows {
        let r = ds.row(i);
        for a in 0..d {
            xty[a] += r[a] * y[i];
            for b in 0..=a {
                xtx[(a, b)] += r[a] * r[b];
            }
        }
    }
    for a in 0..d {
        for b in 0..a {
            xtx[(b, a)] = xtx[(a, b)];
        }
    }
    let scale = (0..d).map(|a| xtx[(a, a)]).fold(0.0, f64::max).max(f64::MIN_POSITIVE);
    let svd = xtx.clone().svd(true, true);
    let smin = svd.singular_values.min();
    let degenerate = smin <= 1e-10 * scale;
    if !degenerate {
        if let Some(ch) = xtx.cholesky() {
            return (ch.solve(&xty).iter().copied().collect(), false);
        }
    }
    let sol = svd
        .solve(&xty, 1e-10 * scale)
        .unwrap_or_else(|_| DVector::zeros(d));
    (sol.iter().copied().collect(), degenerate)
}

fn squared_residuals(ds: &Dataset, y: &[f64], beta: &[f64]) -> Vec<f64> {
    (0..ds.n).map(|i| (y[i] - dot(ds.row(i), beta)).powi(2)).collect()
}

fn fit_on(ds: &Dataset, y: &[f64], rows: Vec<usize>) -> Fit {
    let (beta, degenerate) = least_squares(ds, y, &rows);
    let objective = rows.iter().map(|&i| (y[i] - dot(ds.row(i), &beta)).powi(2)).sum::<f64>()
        / rows.len() as f64;
    Fit { beta, objective, kept: rows, degenerate }
}

fn concentration_steps(ds: &Dataset, y: &[f64], start: Vec<usize>, keep: usize) -> Fit {
    let mut fit = fit_on(ds, y, start);
    for _ in 0..200 {
        let res = squared_residuals(ds, y, &fit.beta);
        let mut kept = stable_order(&res);
        kept.truncate(keep);
        kept.sort_unstable();
        let mut current = fit.kept.clone();
        current.sort_unstable();
        if kept == current {
            break;
        }
        let next = fit_on(ds, y, kept);
        if fit.kept.len() == keep && next.objective >= fit.objective {
            break;
        }
        fit = next;
    }
    fit
}

/// gamma_hat^2 = min over beta of the mean of the squared residuals left after removing the
/// largest floor((2/5.5) alpha n) of them.
pub fn robust_noise_scale<R: Rng + ?Sized>(
    ds: &Dataset,
    alpha: f64,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<NoiseScale> {
    check_alpha(alpha)?;
    robust_noise_scale_removing(ds, tail_count(ds.n, alpha, TWO_SIDED_TAIL_FRACTION), mode, rng)
}

/// [`robust_noise_scale`] with an explicit number of removed residuals.
pub fn robust_noise_scale_removing<R: Rng + ?Sized>(
    ds: &Dataset,
    removed: usize,
    mode: NoiseMode,
    rng: &mut R,
) -> Result<NoiseScale> {
    let y = ds.labels_required()?;
    let n = ds.n;
    if n < ds.d + removed + 1 {
        return Err(HptrError::InsufficientData { needed: ds.d + removed + 1, got: n });
    }
    let keep = n - removed;
    let best = match mode {
        NoiseMode::Bruteforce => {
            if n > 12 {
                return Err(invalid("bruteforce noise scale is limited to n <= 12"));
            }
            let mut best: Option<Fit> = None;
            for drop in combinations(n, removed) {
                let rows: Vec<usize> = (0..n).filter(|i| !drop.contains(i)).collect();
                let fit = fit_on(ds, y, rows);
                if best.as_ref().is_none_or(|b| fit.objective < b.objective) {
                    best = Some(fit);
                }
            }
            best.expect("at least one kept set")
        }
        NoiseMode::Heuristic => {
            let mut best = concentration_steps(ds, y, (0..n).collect(), keep);
            let start_size = (ds.d + 1).min(keep);
            for _ in 1..NOISE_MULTISTARTS {
                let start = sample(rng, n, start_size).into_vec();
                let fit = concentration_steps(ds, y, start, keep);
                if fit.objective < best.objective {
                    best = fit;
                }
            }
            if best.kept.len() != keep {
                let res = squared_residuals(ds, y, &best.beta);
                let mut kept = stable_order(&res);
                kept.truncate(keep);
                best = fit_on(ds, y, kept);
            }
            best
        }
    };
    let mut kept = best.kept;
    kept.sort_unstable();
    Ok(NoiseScale {
        gamma_hat: best.objective.max(0.0).sqrt(),
        beta_bar: best.beta,
        kept,
        degenerate_design: best.degenerate,
    })
}

/// All k-subsets of 0..n in lexicographic order.
pub(crate) fn combinations(n: usize, k: usize) -> Vec<Vec<usize>> {
    let mut out = Vec::new();
    let mut cur: Vec<usize> = (0..k).collect();
    if k > n {
        return out;
    }
    loop {
        out.push(cur.clone());
        let mut i = k;
        loop {
            if i == 0 {
                return out;
            }
            i -= 1;
            if cur[i] < n - k + i {
                cur[i] += 1;
                for j in i + 1..k {
                    cur[j] = cur[j - 1] + 1;
                }
                break;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    #[test]
    fn partition_examples() {
        let p = partition_with_tail(&[5.0, 1.0, 3.0, 2.0, 4.0], 1).unwrap();
        assert_eq!(p.bottom, vec![1]);
        assert_eq!(p.top, vec![0]);
        assert_eq!(p.middle, vec![3, 2, 4]);
        let p = partition_with_tail(&[1.0, 1.0, 1.0], 1).unwrap();
        assert_eq!((p.bottom, p.middle, p.top), (vec![0], vec![1], vec![2]));
        let vals: Vec<f64> = (0..100).map(|i| i as f64).collect();
        let p = partition_two_sided(&vals, 0.11, TWO_SIDED_TAIL_FRACTION).unwrap();
        assert_eq!(p.tail_count, 4);
        assert_eq!(p.middle.len(), 92);
        assert!(matches!(
            partition_with_tail(&[1.0, 2.0], 1),
            Err(HptrError::InsufficientData { .. })
        ));
    }

    #[test]
    fn moments_examples() {
        let m = trimmed_mean_var_with_tail(&[-2.0, -1.0, 0.0, 1.0, 2.0], 1).unwrap();
        assert_eq!(m.mean, 0.0);
        assert!((m.var - 2.0 / 3.0).abs() < 1e-15);
        let m = trimmed_mean_var_with_tail(&[3.5; 6], 1).unwrap();
        assert_eq!((m.mean, m.var), (3.5, 0.0));
        let m = trimmed_mean_var_with_tail(&[0.0, 0.0, 0.0, 0.0, 100.0], 1).unwrap();
        assert_eq!((m.mean, m.var), (0.0, 0.0));
        assert_eq!(m.kept.len(), 3);
        assert!(!m.kept.contains(&4));
    }

    #[test]
    fn one_sided_examples() {
        // floor((2/3.5) * 0.4375 * 4) = 1
        assert_eq!(partition_one_sided_sq(&[0.0, 1.0, 4.0, 9.0], 0.4375).unwrap(), vec![0, 1, 2]);
        assert_eq!(partition_one_sided_sq(&[9.0, 1.0, 4.0], 0.0).unwrap(), vec![1, 2, 0]);
        assert_eq!(partition_one_sided_sq(&[2.0; 4], 0.4375).unwrap(), vec![0, 1, 2]);
    }

    #[test]
    fn combinations_count() {
        assert_eq!(combinations(5, 2).len(), 10);
        assert_eq!(combinations(4, 0), vec![Vec::<usize>::new()]);
        assert_eq!(combinations(3, 3), vec![vec![0, 1, 2]]);
    }

    fn labeled(x: Vec<f64>, d: usize, y: Vec<f64>) -> Dataset {
        Dataset::new(d, x, Some(y)).unwrap()
    }

    #[test]
    fn noise_scale_exact_linear_is_zero() {
        let x: Vec<f64> = (0..10).map(|i| i as f64 - 4.0).collect();
        let y: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let ds = labeled(x, 1, y);
        let mut rng = ChaCha20Rng::seed_from_u64(0);
        for mode in [NoiseMode::Heuristic, NoiseMode::Bruteforce] {
            let r = robust_noise_scale(&ds, 0.3, mode, &mut rng).unwrap();
            assert!(r.gamma_hat < 1e-7, "{mode:?} {}", r.gamma_hat);
        }
    }

    #[test]
    fn noise_scale_hand_instance() {
        let ds = labeled(vec![1.0; 5], 1, vec![1.0, -1.0, 1.0, -1.0, 10.0]);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let b = robust_noise_scale_removing(&ds, 1, NoiseMode::Bruteforce, &mut rng).unwrap();
        assert!((b.gamma_hat - 1.0).abs() < 1e-12);
        assert_eq!(b.kept, vec![0, 1, 2, 3]);
        let h = robust_noise_scale_removing(&ds, 1, NoiseMode::Heuristic, &mut rng).unwrap();
        assert!(h.gamma_hat >= b.gamma_hat - 1e-12);
        assert!((h.gamma_hat - 1.0).abs() < 1e-12);
    }

    #[test]
    fn noise_scale_flags_rank_deficiency() {
        let ds = labeled(vec![1.0, 2.0, 1.0, 2.0, 1.0, 2.0, 1.0, 2.0], 2, vec![1.0, 2.0, 3.0, 4.0]);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let r = robust_noise_scale(&ds, 0.0, NoiseMode::Heuristic, &mut rng).unwrap();
        assert!(r.degenerate_design);
        assert!((r.gamma_hat - 1.25f64.sqrt()).abs() < 1e-9);
    }

    #[test]
    fn noise_scale_requires_labels_and_rows() {
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let ds = Dataset::new(1, vec![1.0, 2.0], None).unwrap();
        assert!(robust_noise_scale(&ds, 0.1, NoiseMode::Heuristic, &mut rng).is_err());
        let ds = labeled(vec![1.0; 13], 1, vec![0.0; 13]);
        assert!(robust_noise_scale(&ds, 0.1, NoiseMode::Bruteforce, &mut rng).is_err());
    }

    proptest! {
        #[test]
        fn partition_invariants(vals in prop::collection::vec(-5i32..5, 1..40), t in 0usize..6) {
            let vals: Vec<f64> = vals.into_iter().map(f64::from).collect();
            prop_assume!(vals.len() > 2 * t);
            let p = partition_with_tail(&vals, t).unwrap();
            let mut all: Vec<usize> = p.bottom.iter().chain(&p.middle).chain(&p.top).copied().collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..vals.len()).collect::<Vec<_>>());
            prop_assert_eq!(p.bottom.len(), t);
            prop_assert_eq!(p.top.len(), t);
            let mid_min = p.middle.iter().map(|&i| vals[i]).fold(f64::INFINITY, f64::min);
            let mid_max = p.middle.iter().map(|&i| vals[i]).fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(p.bottom.iter().all(|&i| vals[i] <= mid_min));
            prop_assert!(p.top.iter().all(|&i| vals[i] >= mid_max));
            let m = trimmed_mean_var_with_tail(&vals, t).unwrap();
            prop_assert!(m.var >= 0.0);
            prop_assert!(m.mean >= mid_min - 1e-12 && m.mean <= mid_max + 1e-12);
            let mut buf = vals.clone();
            let (fm, fv) = trimmed_moments(&mut buf, t);
            prop_assert!((fm - m.mean).abs() < 1e-12 && (fv - m.var).abs() < 1e-12);
        }

        #[test]
        fn trimmed_mean_monotone(vals in prop::collection::vec(-100.0f64..100.0, 5..40),
                                 which in 0usize..40, bump in 0.0f64..50.0) {
            let t = vals.len() / 5;
            let base = trimmed_mean_var_with_tail(&vals, t).unwrap().mean;
            let mut up = vals.clone();
            let k = which % vals.len();
            up[k] += bump;
            let after = trimmed_mean_var_with_tail(&up, t).unwrap().mean;
            prop_assert!(after >= base - 1e-12);
        }

        #[test]
        fn one_swap_sensitivity(vals in prop::collection::vec(-10.0f64..10.0, 12..60),
                                which in 0usize..60, new in -1000.0f64..1000.0) {
            let n = vals.len();
            let t = n / 8;
            prop_assume!(t >= 1);
            let mut sorted = vals.clone();
            sorted.sort_by(f64::total_cmp);
            // certified range: middle plus the nearest tail point on each side
            let r = sorted[n - t] - sorted[t - 1];
            let m = (n - 2 * t) as f64;
            let a = trimmed_mean_var_with_tail(&vals, t).unwrap();
            let mut swapped = vals.clone();
            swapped[which % n] = new;
            let b = trimmed_mean_var_with_tail(&swapped, t).unwrap();
            prop_assert!((a.mean - b.mean).abs() <= r / m + 1e-9);
            prop_assert!((a.var - b.var).abs() <= 4.0 * r * r / m + 1e-9);
        }
    }
}
