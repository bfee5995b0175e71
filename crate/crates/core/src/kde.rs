//! Univariate Gaussian kernel density estimation, mode counting, the
//! critical (smallest unimodal) bandwidth, and the smoothed-bootstrap
//! sampler built on it.

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Beyond this many bandwidths `exp(-u^2/2)` underflows to exactly zero,
/// so skipping those points leaves every density value unchanged.
const KERNEL_CUTOFF: f64 = 38.7;

/// Grid resolution used by [`KdeModel::mode_count`].
pub const MODE_GRID_POINTS: usize = 2048;

/// Bisection stops once the bracket is narrower than this fraction of
/// the data range.
pub const BANDWIDTH_REL_TOLERANCE: f64 = 1e-4;

/// Fraction of the data range used as the (multimodal) lower bracket.
const LOWER_BRACKET_FRACTION: f64 = 1e-6;

/// A Gaussian KDE of one feature.
#[derive(Debug, Clone, PartialEq)]
pub struct KdeModel {
    sorted: Vec<f64>,
    bandwidth: f64,
}

impl KdeModel {
    pub fn new(points: &[f64], bandwidth: f64) -> Result<Self> {
        if points.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "kde needs at least 2 points, got {}",
                points.len()
            )));
        }
        if let Some(i) = points.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite { row: i, col: 0 });
        }
        if !(bandwidth > 0.0 && bandwidth.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be positive, got {bandwidth}"
            )));
        }
        let mut sorted = points.to_vec();
        sorted.sort_by(f64::total_cmp);
        Ok(KdeModel { sorted, bandwidth })
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Points in ascending order.
    pub fn points(&self) -> &[f64] {
        &self.sorted
    }

    pub fn density(&self, t: f64) -> f64 {
        let h = self.bandwidth;
        let lo = self.sorted.partition_point(|&x| x < t - KERNEL_CUTOFF * h);
        let hi = self.sorted.partition_point(|&x| x <= t + KERNEL_CUTOFF * h);
        let sum: f64 = self.sorted[lo..hi]
            .iter()
            .map(|&x| {
                let u = (t - x) / h;
                (-0.5 * u * u).exp()
            })
            .sum();
        sum * (INV_SQRT_2PI / (self.sorted.len() as f64 * h))
    }

    /// Grid `[min - 3h, max + 3h]` with [`MODE_GRID_POINTS`] points.
    pub fn mode_grid(&self) -> Vec<f64> {
        let h = self.bandwidth;
        let lo = self.sorted[0] - 3.0 * h;
        let hi = self.sorted[self.sorted.len() - 1] + 3.0 * h;
        let step = (hi - lo) / (MODE_GRID_POINTS - 1) as f64;
        (0..MODE_GRID_POINTS).map(|i| lo + step * i as f64).collect()
    }

    /// Density on an ascending grid, sliding the kernel window along.
    fn density_on_sorted_grid(&self, grid: &[f64]) -> Vec<f64> {
        let h = self.bandwidth;
        let norm = INV_SQRT_2PI / (self.sorted.len() as f64 * h);
        let reach = KERNEL_CUTOFF * h;
        let (mut lo, mut hi) = (0usize, 0usize);
        grid.iter()
            .map(|&t| {
                while lo < self.sorted.len() && self.sorted[lo] < t - reach {
                    lo += 1;
                }
                if hi < lo {
                    hi = lo;
                }
                while hi < self.sorted.len() && self.sorted[hi] <= t + reach {
                    hi += 1;
                }
                let sum: f64 = self.sorted[lo..hi]
                    .iter()
                    .map(|&x| {
                        let u = (t - x) / h;
                        (-0.5 * u * u).exp()
                    })
                    .sum();
                sum * norm
            })
            .collect()
    }

    /// Number of strict local maxima on the mode grid; runs of equal
    /// values count once.
    pub fn mode_count(&self) -> usize {
        self.grid_modes().0
    }

    /// Grid location of the highest density value.
    pub fn mode_location(&self) -> f64 {
        self.grid_modes().1
    }

    fn grid_modes(&self) -> (usize, f64) {
        let grid = self.mode_grid();
        let dens = self.density_on_sorted_grid(&grid);
        let (count, argmax) = count_modes(&dens);
        (count, grid[argmax])
    }
}

/// Counts plateau-collapsed strict local maxima; also returns the index
/// of the first global maximum.
fn count_modes(values: &[f64]) -> (usize, usize) {
    let mut argmax = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[argmax] {
            argmax = i;
        }
    }
    let mut count = 0;
    let mut prev = f64::NEG_INFINITY;
    let mut i = 0;
    while i < values.len() {
        let v = values[i];
        let mut end = i;
        while end + 1 < values.len() && values[end + 1] == v {
            end += 1;
        }
        let next = values.get(end + 1).copied().unwrap_or(f64::NEG_INFINITY);
        if v > prev && v > next {
            count += 1;
        }
        prev = v;
        i = end + 1;
    }
    (count, argmax)
}

/// Result of the critical-bandwidth search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CriticalBandwidth {
    /// Smallest bandwidth found with a unimodal KDE (upper bracket end).
    pub h1: f64,
    /// Location of the KDE's mode at `h1`.
    pub mode_location: f64,
    /// Final bracket width: the KDE at `h1 - search_tolerance` is
    /// multimodal.
    pub search_tolerance: f64,
}

/// Smallest Gaussian bandwidth with a single mode, by bisection on the
/// (monotone) grid mode count.
pub fn critical_bandwidth(points: &[f64]) -> Result<CriticalBandwidth> {
    if points.len() < 2 {
        return Err(Error::InvalidInput(format!(
            "critical bandwidth needs at least 2 points, got {}",
            points.len()
        )));
    }
    if let Some(i) = points.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite { row: i, col: 0 });
    }
    let (min, max) = points
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let range = max - min;
    if !(range > 0.0) {
        return Err(Error::DegenerateFeature(String::new()));
    }

    let modes_at = |h: f64| -> Result<usize> { Ok(KdeModel::new(points, h)?.mode_count()) };

    let tolerance = BANDWIDTH_REL_TOLERANCE * range;
    let mut lo = LOWER_BRACKET_FRACTION * range;
    let mut hi = range;
    let mut doublings = 0;
    while modes_at(hi)? > 1 {
        lo = hi;
        hi *= 2.0;
        doublings += 1;
        if doublings > 60 {
            return Err(Error::InvalidInput(
                "no unimodal bandwidth found while doubling".into(),
            ));
        }
    }
    while hi - lo >= tolerance {
        let mid = 0.5 * (lo + hi);
        if modes_at(mid)? <= 1 {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    let model = KdeModel::new(points, hi)?;
    Ok(CriticalBandwidth {
        h1: hi,
        mode_location: model.mode_location(),
        search_tolerance: hi - lo,
    })
}

/// Draws from the KDE at bandwidth `h1`, rescaled about the point mean
/// so the sampling distribution has variance `target_variance`.
///
/// The KDE's own variance is `v + h1^2`, with `v` the mean squared
/// deviation of the points, so every draw is
/// `mean + sqrt(target / (v + h1^2)) * (x_I - mean + h1 * eps)`.
/// For centered points with `v == target` this is exactly
/// `(1 + h1^2/target)^(-1/2) * (x_I + h1 * eps)`.
#[derive(Debug, Clone, PartialEq)]
pub struct NullFeatureSampler {
    points: Vec<f64>,
    mean: f64,
    bandwidth: f64,
    multiplier: f64,
}

impl NullFeatureSampler {
    pub fn new(points: &[f64], h1: f64, target_variance: f64) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::InvalidInput("no points to resample".into()));
        }
        if !(h1 >= 0.0 && h1.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "bandwidth must be nonnegative, got {h1}"
            )));
        }
        if !(target_variance >= 0.0 && target_variance.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "target variance must be nonnegative, got {target_variance}"
            )));
        }
        let n = points.len() as f64;
        let mean = points.iter().sum::<f64>() / n;
        let spread = points.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let kde_variance = spread + h1 * h1;
        let multiplier = if kde_variance > 0.0 {
            (target_variance / kde_variance).sqrt()
        } else {
            1.0
        };
        Ok(NullFeatureSampler {
            points: points.to_vec(),
            mean,
            bandwidth: h1,
            multiplier,
        })
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn draw<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let i = rng.random_range(0..self.points.len());
        let eps: f64 = rng.sample(StandardNormal);
        self.mean + self.multiplier * (self.points[i] - self.mean + self.bandwidth * eps)
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, m: usize) -> Vec<f64> {
        (0..m).map(|_| self.draw(rng)).collect()
    }

    pub fn fill<R: Rng + ?Sized>(&self, rng: &mut R, out: &mut [f64]) {
        for v in out {
            *v = self.draw(rng);
        }
    }
}

/// `m` smoothed-bootstrap draws; see [`NullFeatureSampler`].
pub fn sample_null_feature<R: Rng + ?Sized>(
    points: &[f64],
    h1: f64,
    target_variance: f64,
    m: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    Ok(NullFeatureSampler::new(points, h1, target_variance)?.sample(rng, m))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Substream;
    use approx::assert_abs_diff_eq;
    use rand_distr::{Distribution, Normal};

    /// Independent grid oracle: counts sign changes of the density
    /// derivative from + to - on a dense uniform grid, evaluating every
    /// kernel term.
    fn oracle_modes(points: &[f64], h: f64) -> usize {
        let lo = points.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * h;
        let hi = points.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;
        let m = 20_000;
        let f = |t: f64| -> f64 {
            points
                .iter()
                .map(|x| (-0.5 * ((t - x) / h).powi(2)).exp())
                .sum::<f64>()
        };
        let vals: Vec<f64> = (0..=m).map(|i| f(lo + (hi - lo) * i as f64 / m as f64)).collect();
        vals.windows(3)
            .filter(|w| w[1] > w[0] && w[1] >= w[2])
            .count()
    }

    #[test]
    fn density_single_point() {
        let k = KdeModel::new(&[0.0, 0.0], 1.0).unwrap();
        assert_abs_diff_eq!(k.density(0.0), INV_SQRT_2PI, epsilon = 1e-15);
        assert_abs_diff_eq!(k.density(0.0), 0.398_94, epsilon = 1e-5);
    }

    #[test]
    fn density_two_points() {
        let k = KdeModel::new(&[-1.0, 1.0], 1.0).unwrap();
        let phi1 = INV_SQRT_2PI * (-0.5f64).exp();
        assert_abs_diff_eq!(k.density(0.0), phi1, epsilon = 1e-15);
        assert_abs_diff_eq!(k.density(0.0), 0.241_97, epsilon = 1e-5);
    }

    #[test]
    fn density_symmetric() {
        let k = KdeModel::new(&[-2.5, 2.5], 0.7).unwrap();
        for t in [0.1, 0.9, 2.5, 4.0, 11.0] {
            assert_abs_diff_eq!(k.density(t), k.density(-t), epsilon = 1e-16);
        }
    }

    #[test]
    fn density_integrates_to_one() {
        let k = KdeModel::new(&[-3.0, 0.2, 0.5, 4.0], 0.4).unwrap();
        let (lo, hi, m) = (-10.0, 11.0, 200_000);
        let dt = (hi - lo) / m as f64;
        let integral: f64 = (0..m).map(|i| k.density(lo + (i as f64 + 0.5) * dt)).sum::<f64>() * dt;
        assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-9);
    }

    #[test]
    fn truncated_kernel_matches_full_sum() {
        let pts = [-50.0, -1.0, 0.0, 0.3, 70.0];
        let k = KdeModel::new(&pts, 0.5).unwrap();
        for t in [-50.0, -20.0, 0.1, 35.0, 69.0] {
            let full: f64 = pts
                .iter()
                .map(|x| (-0.5 * ((t - x) / 0.5f64).powi(2)).exp())
                .sum::<f64>()
                * INV_SQRT_2PI
                / (pts.len() as f64 * 0.5);
            approx::assert_relative_eq!(k.density(t), full, max_relative = 1e-14);
        }
        let grid = k.mode_grid();
        let on_grid = k.density_on_sorted_grid(&grid);
        for (t, d) in grid.iter().zip(&on_grid) {
            assert_eq!(k.density(*t), *d);
        }
    }

    #[test]
    fn mode_count_examples() {
        assert_eq!(KdeModel::new(&[-5.0, 5.0], 0.5).unwrap().mode_count(), 2);
        assert_eq!(oracle_modes(&[-5.0, 5.0], 0.5), 2);
        assert_eq!(KdeModel::new(&[-5.0, 5.0], 20.0).unwrap().mode_count(), 1);
        assert_eq!(KdeModel::new(&[3.0; 6], 0.01).unwrap().mode_count(), 1);
        assert_eq!(KdeModel::new(&[3.0; 6], 100.0).unwrap().mode_count(), 1);
    }

    #[test]
    fn mode_count_agrees_with_dense_oracle() {
        let mut rng = Substream::new(11).rng();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..20 {
            let pts: Vec<f64> = (0..15).map(|_| normal.sample(&mut rng)).collect();
            for h in [0.05, 0.2, 0.6, 1.5] {
                let k = KdeModel::new(&pts, h).unwrap();
                assert_eq!(k.mode_count(), oracle_modes(&pts, h), "h={h} pts={pts:?}");
            }
        }
    }

    #[test]
    fn plateau_counts_once() {
        assert_eq!(count_modes(&[0.0, 1.0, 1.0, 1.0, 0.0]).0, 1);
        assert_eq!(count_modes(&[0.0, 1.0, 1.0, 2.0, 0.0]).0, 1);
        assert_eq!(count_modes(&[0.0, 2.0, 1.0, 1.0, 2.0, 0.0]).0, 2);
        assert_eq!(count_modes(&[3.0, 3.0, 3.0]).0, 1);
    }

    #[test]
    fn critical_bandwidth_two_points() {
        // Two equal Gaussians 2 apart merge into one mode exactly at h = 1.
        assert_eq!(oracle_modes(&[-1.0, 1.0], 0.999), 2);
        assert_eq!(oracle_modes(&[-1.0, 1.0], 1.0), 1);
        let cb = critical_bandwidth(&[-1.0, 1.0]).unwrap();
        assert_abs_diff_eq!(cb.h1, 1.0, epsilon = 1e-3);
        assert_abs_diff_eq!(cb.mode_location, 0.0, epsilon = 5e-3);

        let cb2 = critical_bandwidth(&[-2.0, 2.0]).unwrap();
        assert_abs_diff_eq!(cb2.h1, 2.0, epsilon = 2e-3);
    }

    #[test]
    fn critical_bandwidth_bracket_invariant() {
        let mut rng = Substream::new(5).rng();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..10 {
            let pts: Vec<f64> = (0..40).map(|_| normal.sample(&mut rng)).collect();
            let cb = critical_bandwidth(&pts).unwrap();
            assert_eq!(KdeModel::new(&pts, cb.h1).unwrap().mode_count(), 1);
            let below = cb.h1 - cb.search_tolerance;
            assert!(KdeModel::new(&pts, below).unwrap().mode_count() >= 2);
        }
    }

    #[test]
    fn critical_bandwidth_errors() {
        assert_eq!(
            critical_bandwidth(&[0.0, 0.0, 0.0]).unwrap_err(),
            Error::DegenerateFeature(String::new())
        );
        assert!(critical_bandwidth(&[1.0]).is_err());
        assert!(critical_bandwidth(&[1.0, f64::NAN]).is_err());
    }

    #[test]
    fn sampler_zero_bandwidth_is_plain_bootstrap() {
        let pts = [-1.5, 0.25, 1.25];
        let v = pts.iter().map(|x| x * x).sum::<f64>() / 3.0;
        let s = NullFeatureSampler::new(&pts, 0.0, v).unwrap();
        assert_abs_diff_eq!(s.multiplier(), 1.0, epsilon = 1e-15);
        let mut rng = Substream::new(3).rng();
        for x in s.sample(&mut rng, 200) {
            assert!(pts.iter().any(|p| (p - x).abs() < 1e-12), "{x}");
        }
    }

    #[test]
    fn sampler_matches_eq3_multiplier() {
        let s = NullFeatureSampler::new(&[-1.0, 1.0], 1.0, 1.0).unwrap();
        assert_abs_diff_eq!(s.multiplier(), (1.0f64 + 1.0).powf(-0.5), epsilon = 1e-15);
    }

    #[test]
    fn sampler_two_point_moments() {
        let mut rng = Substream::new(99).rng();
        let draws = sample_null_feature(&[-1.0, 1.0], 1.0, 1.0, 1_000_000, &mut rng).unwrap();
        let n = draws.len() as f64;
        let mean = draws.iter().sum::<f64>() / n;
        let var = draws.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        assert_abs_diff_eq!(mean, 0.0, epsilon = 0.005);
        assert_abs_diff_eq!(var, 1.0, epsilon = 0.005);
    }

    #[test]
    fn sampler_is_deterministic_per_stream() {
        let s = NullFeatureSampler::new(&[0.3, -0.2, 1.1], 0.4, 1.0).unwrap();
        let a = s.sample(&mut Substream::new(1).child(4).rng(), 10);
        let b = s.sample(&mut Substream::new(1).child(4).rng(), 10);
        assert_eq!(a, b);
    }

    #[test]
    fn generating_mixture_unimodal() {
        let mut rng = Substream::new(21).rng();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for _ in 0..10 {
            let mut pts: Vec<f64> = (0..30).map(|_| normal.sample(&mut rng)).collect();
            pts.iter_mut().take(10).for_each(|x| *x += 4.0);
            let cb = critical_bandwidth(&pts).unwrap();
            assert_eq!(KdeModel::new(&pts, cb.h1).unwrap().mode_count(), 1);
        }
    }
}
