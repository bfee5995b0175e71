//! Simulation scenarios and a replicate harness that counts how often the
//! test rejects at the 5% level.
//!
//! Every scenario has full-size defaults; [`ScenarioSpec::scaled`]
//! shrinks or grows `n` and `p` (and the parameters tied to them) for
//! desk-scale runs. Any field can also be overridden directly.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use ndarray::Array2;
use rand::Rng;
use rand_distr::{ChiSquared, Distribution, Normal, StandardNormal, StudentT};
use rayon::prelude::*;
use serde::Serialize;

use crate::clustering::ClusterMethod;
use crate::covariance::cholesky_root;
use crate::data::DataMatrix;
use crate::error::{Error, Result};
use crate::rng::{tag, Substream};
use crate::unpci::{run_unpci, CovarianceChoice, UnpciConfig};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;
/// Fresh data sets tried per replicate before giving up on a scenario
/// whose clusterings keep collapsing.
pub const MAX_ATTEMPTS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Scenario {
    Sphere5d,
    NullNormal,
    NullCorrelated,
    NullT,
    NormalClustered,
    TClustered,
    CorrelatedClusters,
    ElongatedClusters,
    HdNullNormal,
    HdNullCorrelated,
    HdNullT,
    HdNormalClustered,
    HdTClustered,
    HierNull,
    HierTwoClusters,
}

impl Scenario {
    pub const ALL: [Scenario; 15] = [
        Scenario::Sphere5d,
        Scenario::NullNormal,
        Scenario::NullCorrelated,
        Scenario::NullT,
        Scenario::NormalClustered,
        Scenario::TClustered,
        Scenario::CorrelatedClusters,
        Scenario::ElongatedClusters,
        Scenario::HdNullNormal,
        Scenario::HdNullCorrelated,
        Scenario::HdNullT,
        Scenario::HdNormalClustered,
        Scenario::HdTClustered,
        Scenario::HierNull,
        Scenario::HierTwoClusters,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Scenario::Sphere5d => "5d_sphere",
            Scenario::NullNormal => "null_normal",
            Scenario::NullCorrelated => "null_correlated",
            Scenario::NullT => "null_t",
            Scenario::NormalClustered => "normal_clustered",
            Scenario::TClustered => "t_clustered",
            Scenario::CorrelatedClusters => "correlated_clusters",
            Scenario::ElongatedClusters => "elongated_clusters",
            Scenario::HdNullNormal => "hd_null_normal",
            Scenario::HdNullCorrelated => "hd_null_correlated",
            Scenario::HdNullT => "hd_null_t",
            Scenario::HdNormalClustered => "hd_normal_clustered",
            Scenario::HdTClustered => "hd_t_clustered",
            Scenario::HierNull => "hier_null",
            Scenario::HierTwoClusters => "hier_two_clusters",
        }
    }

    /// Whether the generator plants two clusters.
    pub fn is_clustered(self) -> bool {
        matches!(
            self,
            Scenario::NormalClustered
                | Scenario::TClustered
                | Scenario::CorrelatedClusters
                | Scenario::ElongatedClusters
                | Scenario::HdNormalClustered
                | Scenario::HdTClustered
                | Scenario::HierTwoClusters
        )
    }

    pub fn is_high_dimensional(self) -> bool {
        matches!(
            self,
            Scenario::HdNullNormal
                | Scenario::HdNullCorrelated
                | Scenario::HdNullT
                | Scenario::HdNormalClustered
                | Scenario::HdTClustered
        )
    }

    fn id(self) -> u64 {
        Scenario::ALL.iter().position(|s| *s == self).expect("listed") as u64
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Scenario {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .iter()
            .copied()
            .find(|sc| sc.name() == s)
            .ok_or_else(|| Error::UnknownScenario(s.to_string()))
    }
}

/// Dimensions and parameters of one scenario. Fields that a scenario
/// does not use are ignored.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ScenarioSpec {
    #[serde(serialize_with = "serialize_scenario")]
    pub scenario: Scenario,
    pub n: usize,
    pub p: usize,
    /// Size of the shifted group (first cluster for the hierarchical and
    /// elongated generators). Those observations come first.
    pub cluster_size: usize,
    /// Number of shifted features.
    pub signal_features: usize,
    /// Index of the first shifted feature.
    pub signal_offset: usize,
    /// Mean shift, or noncentrality for the t scenarios.
    pub shift: f64,
    /// Leading features sharing the covariance `block_cov`.
    pub block_features: usize,
    pub block_cov: f64,
    /// AR(1) coefficient and band width of the banded covariance.
    pub ar: f64,
    pub band: usize,
    pub noise_sd: f64,
    pub cluster_method: ClusterMethod,
    pub dimension_reduction: bool,
    /// Off for the hierarchical scenarios: linkage runs on the raw
    /// distances, where the arcs dominate the noise features.
    pub scale_before_clustering: bool,
    /// Graphical lasso for the hierarchical and high-dimensional settings,
    /// sample covariance otherwise.
    pub covariance: CovarianceChoice,
}

fn serialize_scenario<S: serde::Serializer>(s: &Scenario, ser: S) -> std::result::Result<S::Ok, S::Error> {
    ser.serialize_str(s.name())
}

impl ScenarioSpec {
    /// Full-size defaults.
    pub fn new(scenario: Scenario) -> Self {
        let base = ScenarioSpec {
            scenario,
            n: 200,
            p: 100,
            cluster_size: 0,
            signal_features: 0,
            signal_offset: 0,
            shift: 0.0,
            block_features: 0,
            block_cov: 0.0,
            ar: 0.0,
            band: 0,
            noise_sd: 0.0,
            cluster_method: ClusterMethod::Kmeans,
            dimension_reduction: scenario.is_high_dimensional(),
            scale_before_clustering: true,
            covariance: if scenario.is_high_dimensional() {
                CovarianceChoice::Glasso
            } else {
                CovarianceChoice::Sample
            },
        };
        let hd = ScenarioSpec { n: 100, p: 10_000, ..base.clone() };
        match scenario {
            Scenario::Sphere5d => ScenarioSpec { n: 1000, p: 5, ..base },
            Scenario::NullNormal | Scenario::NullT => base,
            Scenario::NullCorrelated => ScenarioSpec {
                block_features: 40,
                block_cov: 0.20,
                ..base
            },
            Scenario::NormalClustered => ScenarioSpec {
                cluster_size: 50,
                signal_features: 30,
                shift: 2.0,
                ..base
            },
            Scenario::TClustered => ScenarioSpec {
                cluster_size: 40,
                signal_features: 30,
                shift: 12.0,
                ..base
            },
            Scenario::CorrelatedClusters => ScenarioSpec {
                cluster_size: 50,
                signal_features: 30,
                signal_offset: 44,
                shift: 2.0,
                block_features: 40,
                block_cov: 0.20,
                ..base
            },
            Scenario::ElongatedClusters => ScenarioSpec {
                n: 202,
                p: 3,
                cluster_size: 101,
                shift: 4.0,
                noise_sd: 0.10,
                ..base
            },
            Scenario::HdNullNormal | Scenario::HdNullT => hd,
            Scenario::HdNullCorrelated => ScenarioSpec { ar: 0.80, band: 42, ..hd },
            Scenario::HdNormalClustered => ScenarioSpec {
                cluster_size: 30,
                signal_features: 50,
                shift: 2.0,
                ..hd
            },
            Scenario::HdTClustered => ScenarioSpec {
                cluster_size: 30,
                signal_features: 100,
                shift: 12.0,
                ..hd
            },
            Scenario::HierNull => ScenarioSpec {
                n: 500,
                p: 75,
                cluster_method: ClusterMethod::Ward,
                scale_before_clustering: false,
                covariance: CovarianceChoice::Glasso,
                ..base
            },
            Scenario::HierTwoClusters => ScenarioSpec {
                n: 1200,
                p: 75,
                cluster_size: 500,
                noise_sd: 0.2,
                cluster_method: ClusterMethod::Single,
                scale_before_clustering: false,
                covariance: CovarianceChoice::Glasso,
                ..base
            },
        }
    }

    /// Multiplies `n` (and the group size) by `scale_n` and `p` (and the
    /// feature counts tied to it) by `scale_p`, rounding to integers.
    pub fn scaled(mut self, scale_n: f64, scale_p: f64) -> Self {
        let by = |v: usize, s: f64| (v as f64 * s).round() as usize;
        let n = by(self.n, scale_n).max(2);
        let p = by(self.p, scale_p).max(1);
        self.cluster_size = by(self.cluster_size, scale_n).min(n);
        self.signal_features = by(self.signal_features, scale_p);
        self.signal_offset = by(self.signal_offset, scale_p);
        self.block_features = by(self.block_features, scale_p).min(p);
        if self.scenario == Scenario::ElongatedClusters {
            self.cluster_size = n / 2;
        }
        self.n = n;
        self.p = p;
        self
    }

    /// Number of sin/cos (or uniform) feature pairs of the hierarchical
    /// generators: a third of the features, as in the 75-feature design.
    pub fn arc_pairs(&self) -> usize {
        ((self.p as f64 / 3.0).round() as usize).min(self.p / 2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 || self.p < 1 {
            return Err(Error::InvalidInput(format!("need n >= 2 and p >= 1, got {}x{}", self.n, self.p)));
        }
        if self.scenario.is_clustered() && (self.cluster_size == 0 || self.cluster_size >= self.n) {
            return Err(Error::InvalidInput(format!(
                "cluster size {} must lie in 1..{}",
                self.cluster_size, self.n
            )));
        }
        if self.signal_offset + self.signal_features > self.p {
            return Err(Error::InvalidInput(format!(
                "signal features {}..{} exceed p = {}",
                self.signal_offset,
                self.signal_offset + self.signal_features,
                self.p
            )));
        }
        if self.block_features > self.p {
            return Err(Error::InvalidInput("correlated block larger than p".into()));
        }
        if !(self.noise_sd >= 0.0) || !self.shift.is_finite() {
            return Err(Error::InvalidInput("noise sd and shift must be finite, sd >= 0".into()));
        }
        if self.scenario == Scenario::HdNullCorrelated && !(self.ar.abs() < 1.0) {
            return Err(Error::InvalidInput(format!("AR coefficient must lie in (-1, 1), got {}", self.ar)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generated {
    pub data: DataMatrix,
    /// Planted labels: 0 for the first group, 1 for the rest. `None` for
    /// null scenarios.
    pub labels: Option<Vec<u8>>,
}

pub fn gen_scenario<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Result<Generated> {
    spec.validate()?;
    let (n, p) = (spec.n, spec.p);
    let group = |i: usize| u8::from(i >= spec.cluster_size);
    let mut x = match spec.scenario {
        Scenario::Sphere5d => {
            let mut x = normal_matrix(n, p, rng);
            for mut row in x.rows_mut() {
                let norm = row.dot(&row).sqrt();
                row.mapv_inplace(|v| v / norm);
            }
            x
        }
        Scenario::NullNormal | Scenario::HdNullNormal | Scenario::NormalClustered | Scenario::HdNormalClustered => {
            normal_matrix(n, p, rng)
        }
        Scenario::NullT | Scenario::HdNullT => t2_matrix(n, p, rng),
        Scenario::NullCorrelated | Scenario::CorrelatedClusters => {
            let mut x = normal_matrix(n, p, rng);
            correlate_block(&mut x, spec.block_features, spec.block_cov)?;
            x
        }
        Scenario::TClustered | Scenario::HdTClustered => {
            let mut x = t2_matrix(n, p, rng);
            let chi = ChiSquared::<f64>::new(2.0).expect("valid df");
            for i in 0..spec.cluster_size {
                for j in spec.signal_offset..spec.signal_offset + spec.signal_features {
                    let z: f64 = rng.sample(StandardNormal);
                    x[[i, j]] = (z + spec.shift) / (chi.sample(rng) / 2.0).sqrt();
                }
            }
            x
        }
        Scenario::ElongatedClusters => elongated(spec, rng),
        Scenario::HdNullCorrelated => banded_ar(n, p, spec.ar, spec.band, rng)?,
        Scenario::HierNull => {
            let mut x = normal_matrix(n, p, rng);
            for i in 0..n {
                for j in 0..spec.arc_pairs() {
                    x[[i, 2 * j]] = 5.0 + 5.0 * rng.random::<f64>();
                    x[[i, 2 * j + 1]] = -2.0 + 5.0 * rng.random::<f64>();
                }
            }
            x
        }
        Scenario::HierTwoClusters => hier_arcs(spec, rng),
    };
    if matches!(
        spec.scenario,
        Scenario::NormalClustered | Scenario::CorrelatedClusters | Scenario::HdNormalClustered
    ) {
        for i in 0..spec.cluster_size {
            for j in spec.signal_offset..spec.signal_offset + spec.signal_features {
                x[[i, j]] += spec.shift;
            }
        }
    }
    let labels = spec.scenario.is_clustered().then(|| (0..n).map(group).collect());
    Ok(Generated {
        data: DataMatrix::with_default_ids(x)?,
        labels,
    })
}

fn normal_matrix<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((n, p), || rng.sample(StandardNormal))
}

fn t2_matrix<R: Rng + ?Sized>(n: usize, p: usize, rng: &mut R) -> Array2<f64> {
    let t = StudentT::new(2.0).expect("valid df");
    Array2::from_shape_simple_fn((n, p), || t.sample(rng))
}

/// Gives the leading `k` columns unit variance and pairwise covariance
/// `c` via the Cholesky root of that block.
fn correlate_block(x: &mut Array2<f64>, k: usize, c: f64) -> Result<()> {
    if k < 2 {
        return Ok(());
    }
    let sigma = Array2::from_shape_fn((k, k), |(i, j)| if i == j { 1.0 } else { c });
    let l = cholesky_root(sigma.view())?;
    let block = x.slice(ndarray::s![.., ..k]).dot(&l.t());
    x.slice_mut(ndarray::s![.., ..k]).assign(&block);
    Ok(())
}

fn elongated<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Array2<f64> {
    let noise = Normal::new(0.0, spec.noise_sd).expect("sd checked");
    let half = spec.cluster_size;
    let pos = |k: usize, m: usize| if m > 1 { -0.5 + k as f64 / (m - 1) as f64 } else { 0.0 };
    Array2::from_shape_fn((spec.n, spec.p), |(i, _)| {
        let (t, offset) = if i < half {
            (pos(i, half), 0.0)
        } else {
            (pos(i - half, spec.n - half), spec.shift)
        };
        t + offset + noise.sample(rng)
    })
}

/// Rows of `N(0, Sigma)` with `Sigma_ij = ar^|i-j|` for `|i-j| < band`,
/// zero beyond, through a banded Cholesky factor.
fn banded_ar<R: Rng + ?Sized>(n: usize, p: usize, ar: f64, band: usize, rng: &mut R) -> Result<Array2<f64>> {
    let w = band.saturating_sub(1);
    let cov = |d: usize| if d < band { ar.powi(d as i32) } else { 0.0 };
    // l[i][k] holds L[i, i - w + k]
    let mut l = vec![vec![0.0; w + 1]; p];
    let at = |l: &Vec<Vec<f64>>, i: usize, j: usize| -> f64 {
        if j + w < i || j > i { 0.0 } else { l[i][j + w - i] }
    };
    for i in 0..p {
        let start = i.saturating_sub(w);
        for j in start..=i {
            let mut s = 0.0;
            for k in start.max(j.saturating_sub(w))..j {
                s += at(&l, i, k) * at(&l, j, k);
            }
            if i == j {
                let d = cov(0) - s;
                if !(d > 0.0) {
                    return Err(Error::NotPositiveDefinite { index: i + 1 });
                }
                l[i][w] = d.sqrt();
            } else {
                l[i][j + w - i] = (cov(i - j) - s) / l[j][w];
            }
        }
    }
    let z = normal_matrix(n, p, rng);
    Ok(Array2::from_shape_fn((n, p), |(r, i)| {
        let start = i.saturating_sub(w);
        (start..=i).map(|j| l[i][j + w - i] * z[[r, j]]).sum()
    }))
}

fn hier_arcs<R: Rng + ?Sized>(spec: &ScenarioSpec, rng: &mut R) -> Array2<f64> {
    let eps = Normal::new(0.0, spec.noise_sd).expect("sd checked");
    let mut x = normal_matrix(spec.n, spec.p, rng);
    for i in 0..spec.n {
        let first = i < spec.cluster_size;
        let theta = PI * rng.random::<f64>() + if first { 0.0 } else { PI };
        let e = eps.sample(rng);
        let (cx, cy) = if first { (5.0, -2.0) } else { (0.0, 0.0) };
        for j in 0..spec.arc_pairs() {
            x[[i, 2 * j]] = cx + 5.0 * theta.cos() + e;
            x[[i, 2 * j + 1]] = cy + 5.0 * theta.sin() + e;
        }
    }
    x
}

/// One replicate of one scenario.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepRow {
    pub scenario: String,
    pub rep: usize,
    /// Data sets generated before a usable clustering was found.
    pub attempts: usize,
    pub seed: u64,
    pub ci_data: f64,
    pub p_perm: f64,
    pub z: Option<f64>,
    pub p_normal: Option<f64>,
    pub n_selected: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TableRow {
    pub scenario: String,
    pub n: usize,
    pub p: usize,
    pub reps: usize,
    /// Replicates with `p_perm < 0.05`.
    pub significant: usize,
    pub mean_selected: f64,
    #[serde(skip)]
    pub rows: Vec<RepRow>,
}

fn run_rep(spec: &ScenarioSpec, rep: usize, cfg: &UnpciConfig) -> Result<RepRow> {
    let cfg = UnpciConfig {
        cluster_method: spec.cluster_method,
        dimension_reduction: spec.dimension_reduction,
        scale_before_clustering: spec.scale_before_clustering,
        covariance: spec.covariance,
        ..cfg.clone()
    };
    let root = Substream::new(cfg.seed).path(&[tag::TABLE_REP, spec.scenario.id(), rep as u64]);
    for attempt in 0..MAX_ATTEMPTS {
        let stream = root.child(attempt as u64);
        let generated = gen_scenario(spec, &mut stream.child(0).rng())?;
        let run_cfg = UnpciConfig {
            seed: stream.child(1).seed(),
            ..cfg.clone()
        };
        match run_unpci(&generated.data, None, &run_cfg) {
            Ok(r) if !r.singleton_cluster => {
                return Ok(RepRow {
                    scenario: spec.scenario.name().to_string(),
                    rep,
                    attempts: attempt + 1,
                    seed: run_cfg.seed,
                    ci_data: r.ci_data,
                    p_perm: r.p_perm,
                    z: r.z,
                    p_normal: r.p_normal,
                    n_selected: r.selected_features.len(),
                })
            }
            Ok(_) => log::info!("{} rep {rep}: one-observation cluster, regenerating", spec.scenario),
            Err(e @ (Error::DegenerateClustering(_) | Error::EmptyCluster)) => {
                log::info!("{} rep {rep}: {e}, regenerating", spec.scenario)
            }
            Err(e) => return Err(e),
        }
    }
    Err(Error::DegenerateClustering(format!(
        "{} rep {rep}: no usable clustering in {MAX_ATTEMPTS} data sets",
        spec.scenario
    )))
}

/// Runs `reps` replicates of each scenario and counts `p_perm < 0.05`.
/// A replicate whose data clustering is degenerate or has a
/// one-observation cluster is regenerated from a fresh substream.
pub fn run_table(specs: &[ScenarioSpec], reps: usize, cfg: &UnpciConfig) -> Result<Vec<TableRow>> {
    if reps < 1 {
        return Err(Error::InvalidInput("reps must be at least 1".into()));
    }
    cfg.validate()?;
    let inner = UnpciConfig { threads: None, ..cfg.clone() };
    let run = || {
        specs
            .iter()
            .map(|spec| {
                spec.validate()?;
                let rows = (0..reps)
                    .into_par_iter()
                    .map(|rep| run_rep(spec, rep, &inner))
                    .collect::<Result<Vec<_>>>()?;
                let significant = rows.iter().filter(|r| r.p_perm < SIGNIFICANCE_LEVEL).count();
                let mean_selected = rows.iter().map(|r| r.n_selected as f64).sum::<f64>() / reps as f64;
                Ok(TableRow {
                    scenario: spec.scenario.name().to_string(),
                    n: spec.n,
                    p: spec.p,
                    reps,
                    significant,
                    mean_selected,
                    rows,
                })
            })
            .collect::<Result<Vec<_>>>()
    };
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Per-replicate rows of every scenario as CSV.
pub fn write_rep_csv<W: Write>(table: &[TableRow], writer: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(writer);
    for row in table.iter().flat_map(|t| &t.rows) {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Rand index between two labelings.
pub fn rand_index(a: &[u8], b: &[u8]) -> f64 {
    assert_eq!(a.len(), b.len());
    let n = a.len();
    let mut agree = 0usize;
    for i in 0..n {
        for j in i + 1..n {
            if (a[i] == a[j]) == (b[i] == b[j]) {
                agree += 1;
            }
        }
    }
    agree as f64 / (n * (n - 1) / 2) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clustering::kmeans2;
    use crate::data::{center, mean, sample_variance, scale_unit_variance};
    use approx::assert_abs_diff_eq;

    fn generate(spec: &ScenarioSpec, seed: u64) -> Generated {
        gen_scenario(spec, &mut Substream::new(seed).rng()).unwrap()
    }

    #[test]
    fn names_round_trip() {
        for s in Scenario::ALL {
            assert_eq!(s.name().parse::<Scenario>().unwrap(), s);
        }
        assert!(matches!("6d_cube".parse::<Scenario>(), Err(Error::UnknownScenario(_))));
    }

    #[test]
    fn default_shapes() {
        let expect = [
            (Scenario::Sphere5d, 1000, 5),
            (Scenario::NullNormal, 200, 100),
            (Scenario::ElongatedClusters, 202, 3),
            (Scenario::HdTClustered, 100, 10_000),
            (Scenario::HierNull, 500, 75),
            (Scenario::HierTwoClusters, 1200, 75),
        ];
        for (s, n, p) in expect {
            let spec = ScenarioSpec::new(s);
            assert_eq!((spec.n, spec.p), (n, p), "{s}");
        }
        for s in Scenario::ALL.into_iter().filter(|s| !s.is_high_dimensional()) {
            let spec = ScenarioSpec::new(s);
            let g = generate(&spec, 1);
            assert_eq!((g.data.n(), g.data.p()), (spec.n, spec.p), "{s}");
            assert_eq!(g.labels.is_some(), s.is_clustered());
        }
    }

    #[test]
    fn sphere_rows_have_unit_norm() {
        let g = generate(&ScenarioSpec::new(Scenario::Sphere5d), 2);
        for row in g.data.values().rows() {
            assert_abs_diff_eq!(row.dot(&row).sqrt(), 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn elongated_mean_difference() {
        let g = generate(&ScenarioSpec::new(Scenario::ElongatedClusters), 3);
        let x = g.data.values();
        for j in 0..3 {
            let col = x.column(j);
            let d = mean(col.slice(ndarray::s![101..])) - mean(col.slice(ndarray::s![..101]));
            assert!((d - 4.0).abs() < 0.1, "feature {j}: {d}");
        }
    }

    #[test]
    fn banded_lag_one_covariance() {
        let spec = ScenarioSpec {
            n: 100,
            p: 200,
            ..ScenarioSpec::new(Scenario::HdNullCorrelated)
        };
        let g = generate(&spec, 4);
        let c = center(&g.data);
        let x = c.values();
        let mut lag1 = 0.0;
        let mut var = 0.0;
        for j in 0..199 {
            lag1 += x.column(j).dot(&x.column(j + 1)) / 99.0;
            var += sample_variance(x.column(j));
        }
        lag1 /= 199.0;
        var /= 199.0;
        assert!((lag1 / 0.8 - 1.0).abs() < 0.10, "lag-1 covariance {lag1}");
        assert!((var - 1.0).abs() < 0.1, "variance {var}");
    }

    #[test]
    fn banded_factor_reproduces_covariance() {
        let (p, band, ar) = (12, 4, 0.5);
        let z = {
            let mut rng = Substream::new(0).rng();
            banded_ar(20_000, p, ar, band, &mut rng).unwrap()
        };
        let dm = DataMatrix::with_default_ids(z).unwrap();
        let s = crate::covariance::sample_covariance_matrix(&dm);
        for i in 0..p {
            for j in 0..p {
                let d = i.abs_diff(j);
                let target = if d < band { ar.powi(d as i32) } else { 0.0 };
                assert!((s[[i, j]] - target).abs() < 0.05, "({i},{j}) {} vs {target}", s[[i, j]]);
            }
        }
        // truncating 0.8^d after lag 3 leaves an indefinite matrix
        let mut rng = Substream::new(0).rng();
        assert!(matches!(
            banded_ar(5, 12, 0.8, 4, &mut rng),
            Err(Error::NotPositiveDefinite { .. })
        ));
    }

    #[test]
    fn correlated_block_covariance() {
        let spec = ScenarioSpec {
            n: 20_000,
            p: 8,
            block_features: 4,
            ..ScenarioSpec::new(Scenario::NullCorrelated)
        };
        let g = generate(&spec, 5);
        let s = crate::covariance::sample_covariance_matrix(&g.data);
        assert!((s[[0, 1]] - 0.2).abs() < 0.03);
        assert!((s[[2, 3]] - 0.2).abs() < 0.03);
        assert!(s[[0, 5]].abs() < 0.03);
        assert!((s[[3, 3]] - 1.0).abs() < 0.05);
    }

    #[test]
    fn seed_determinism() {
        for s in [Scenario::TClustered, Scenario::HierTwoClusters, Scenario::HdNullCorrelated] {
            let spec = ScenarioSpec::new(s).scaled(0.5, 0.05);
            assert_eq!(generate(&spec, 9), generate(&spec, 9));
            assert_ne!(generate(&spec, 9).data, generate(&spec, 10).data);
        }
    }

    #[test]
    fn kmeans_recovers_planted_clusters() {
        for s in [
            Scenario::NormalClustered,
            Scenario::TClustered,
            Scenario::CorrelatedClusters,
            Scenario::ElongatedClusters,
        ] {
            let g = generate(&ScenarioSpec::new(s), 6);
            let xs = scale_unit_variance(&center(&g.data)).unwrap();
            let cl = kmeans2(xs.values().view(), &mut Substream::new(1).rng(), 10).unwrap();
            let ri = rand_index(cl.labels(), g.labels.as_ref().unwrap());
            assert!(ri > 0.95, "{s}: Rand index {ri}");
        }
    }

    #[test]
    fn single_linkage_recovers_arcs() {
        let spec = ScenarioSpec::new(Scenario::HierTwoClusters).scaled(0.25, 1.0 / 3.0);
        let g = generate(&spec, 7);
        let c = center(&g.data);
        let cl = crate::clustering::hierarchical2(c.values().view(), crate::clustering::Linkage::Single).unwrap();
        let ri = rand_index(cl.labels(), g.labels.as_ref().unwrap());
        assert!(ri > 0.95, "Rand index {ri}");
    }

    #[test]
    fn scaling_tracks_parameters() {
        let spec = ScenarioSpec::new(Scenario::CorrelatedClusters).scaled(0.5, 0.2);
        assert_eq!((spec.n, spec.p), (100, 20));
        assert_eq!(spec.cluster_size, 25);
        assert_eq!(spec.block_features, 8);
        assert_eq!((spec.signal_offset, spec.signal_features), (9, 6));
        let g = generate(&spec, 8);
        assert_eq!((g.data.n(), g.data.p()), (100, 20));

        let e = ScenarioSpec::new(Scenario::ElongatedClusters).scaled(0.5, 1.0);
        assert_eq!((e.n, e.cluster_size), (101, 50));
    }

    #[test]
    fn invalid_specs_rejected() {
        let bad = ScenarioSpec {
            signal_features: 200,
            ..ScenarioSpec::new(Scenario::NormalClustered)
        };
        assert!(gen_scenario(&bad, &mut Substream::new(0).rng()).is_err());
        let bad = ScenarioSpec {
            cluster_size: 200,
            ..ScenarioSpec::new(Scenario::NormalClustered)
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn rand_index_values() {
        assert_eq!(rand_index(&[0, 0, 1, 1], &[1, 1, 0, 0]), 1.0);
        assert_abs_diff_eq!(rand_index(&[0, 0, 1, 1], &[0, 1, 0, 1]), 2.0 / 6.0, epsilon = 1e-15);
    }

    #[test]
    fn single_rep_table() {
        let spec = ScenarioSpec::new(Scenario::NormalClustered).scaled(0.3, 0.1);
        let cfg = UnpciConfig {
            replicates: 20,
            seed: 3,
            ..UnpciConfig::default()
        };
        let table = run_table(&[spec], 1, &cfg).unwrap();
        assert_eq!(table.len(), 1);
        assert!(table[0].significant <= 1);
        assert_eq!(table[0].rows.len(), 1);
        assert_eq!(table, run_table(&[ScenarioSpec::new(Scenario::NormalClustered).scaled(0.3, 0.1)], 1, &cfg).unwrap());

        let mut buf = Vec::new();
        write_rep_csv(&table, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("scenario,rep,attempts,seed,ci_data,p_perm,z,p_normal,n_selected\n"));
        assert_eq!(text.lines().count(), 2);
    }
}
