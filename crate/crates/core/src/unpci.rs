//! The cluster significance test.
//!
//! Given an `n x p` matrix and a two-way clustering (computed here or
//! supplied), the test compares the observed cluster index against the
//! indices of `B` reference data sets drawn from a unimodal null:
//! each feature is resampled from its Gaussian KDE at the critical
//! (smallest unimodal) bandwidth, then the independent columns are
//! recolored with the Cholesky root of the estimated covariance.
//!
//! Scale conventions:
//! - clustering runs on the centered, unit-variance matrix (or on the
//!   centered raw matrix when `scale_before_clustering` is off);
//! - the cluster index and the covariance estimate use the centered,
//!   unscaled matrix, so recolored null data and the observed data are
//!   on the same scale;
//! - the KDE sampling runs on the unit-variance columns.

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal, StudentsT};

use crate::clustering::{self, cluster_index, cluster_sizes, CiVariant, ClusterMethod, Clustering};
use crate::covariance::{self, CovarianceMethod, CovarianceModel, GraphicalLasso};
use crate::data::{center, mean, sample_variance, scale_unit_variance, DataMatrix, ScaledMatrix};
use crate::error::{Error, Result};
use crate::kde::{critical_bandwidth, CriticalBandwidth, NullFeatureSampler};
use crate::rng::{tag, Substream};

pub const DEFAULT_REPLICATES: usize = 1000;
pub const DEFAULT_ALPHA_SCREEN: f64 = 0.10;

/// How the covariance of the working matrix is estimated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CovarianceChoice {
    /// Sample covariance when `n > p`, graphical lasso otherwise.
    #[default]
    Auto,
    Sample,
    Glasso,
}

impl std::str::FromStr for CovarianceChoice {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "auto" => Ok(CovarianceChoice::Auto),
            "sample" => Ok(CovarianceChoice::Sample),
            "glasso" => Ok(CovarianceChoice::Glasso),
            other => Err(Error::InvalidInput(format!("unknown covariance choice '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnpciConfig {
    /// Number of null replicates `B`.
    pub replicates: usize,
    /// t-test level for feature screening.
    pub alpha_screen: f64,
    /// Graphical lasso penalty.
    pub rho: f64,
    pub cluster_method: ClusterMethod,
    pub dimension_reduction: bool,
    pub seed: u64,
    pub ci_variant: CiVariant,
    pub covariance: CovarianceChoice,
    /// 2-means restarts per clustering.
    pub restarts: usize,
    /// Use `(#{CI_b <= CI_data} + 1) / (B + 1)` instead of the plain
    /// Monte Carlo fraction.
    pub add_one: bool,
    /// Worker threads for the replicates; `None` uses the global pool.
    pub threads: Option<usize>,
    /// Cluster the unit-variance matrix (the default) rather than the
    /// centered raw one. Applies to the data and to every null replicate.
    pub scale_before_clustering: bool,
}

impl Default for UnpciConfig {
    fn default() -> Self {
        UnpciConfig {
            replicates: DEFAULT_REPLICATES,
            alpha_screen: DEFAULT_ALPHA_SCREEN,
            rho: covariance::DEFAULT_RHO,
            cluster_method: ClusterMethod::Kmeans,
            dimension_reduction: false,
            seed: 0,
            ci_variant: CiVariant::SquaredL2,
            covariance: CovarianceChoice::Auto,
            restarts: clustering::DEFAULT_RESTARTS,
            add_one: false,
            threads: None,
            scale_before_clustering: true,
        }
    }
}

impl UnpciConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 1 {
            return Err(Error::InvalidInput("replicate count must be at least 1".into()));
        }
        if !(self.alpha_screen > 0.0 && self.alpha_screen < 1.0) && self.alpha_screen != 1.0 {
            return Err(Error::InvalidInput(format!(
                "screening level must lie in (0, 1], got {}",
                self.alpha_screen
            )));
        }
        if !(self.rho >= 0.0 && self.rho.is_finite()) {
            return Err(Error::InvalidInput(format!("rho must be >= 0, got {}", self.rho)));
        }
        if self.restarts < 1 {
            return Err(Error::InvalidInput("restarts must be at least 1".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::InvalidInput("thread count must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UnpciResult {
    pub ci_data: f64,
    /// Null cluster indices, indexed by replicate.
    pub null_cis: Vec<f64>,
    pub p_perm: f64,
    /// `(ci_data - mu_ci) / sigma_ci`; `None` when the null spread is zero
    /// or `B < 2`.
    pub z: Option<f64>,
    /// Lower-tail normal probability of `z`.
    pub p_normal: Option<f64>,
    pub mu_ci: f64,
    pub sigma_ci: f64,
    pub selected_features: Vec<String>,
    /// Cluster labels (0/1) used for `ci_data`.
    pub labels: Vec<u8>,
    /// Screening found nothing below the level and kept the single best
    /// feature.
    pub screening_fallback: bool,
    /// The data clustering has a one-observation cluster.
    pub singleton_cluster: bool,
    pub covariance_method: CovarianceMethod,
    /// Critical bandwidths of the working features (unit-variance scale).
    pub bandwidths: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Screening {
    /// Selected feature ids, in column order.
    pub selected: Vec<String>,
    /// Two-sided Welch p-value per input feature.
    pub p_values: Vec<f64>,
    pub fallback: bool,
}

/// Two-sided Welch two-sample t-test p-value.
pub fn welch_p_value(a: &[f64], b: &[f64]) -> f64 {
    let av = ndarray::ArrayView1::from(a);
    let bv = ndarray::ArrayView1::from(b);
    let (n1, n2) = (a.len() as f64, b.len() as f64);
    let (m1, m2) = (mean(av), mean(bv));
    let (q1, q2) = (sample_variance(av) / n1, sample_variance(bv) / n2);
    let se2 = q1 + q2;
    if !(se2 > 0.0) {
        return if m1 == m2 { 1.0 } else { 0.0 };
    }
    let t = (m1 - m2) / se2.sqrt();
    let df = se2 * se2 / (q1 * q1 / (n1 - 1.0) + q2 * q2 / (n2 - 1.0));
    match StudentsT::new(0.0, 1.0, df) {
        Ok(dist) => (2.0 * dist.sf(t.abs())).min(1.0),
        Err(_) => Normal::standard().sf(t.abs()) * 2.0,
    }
}

/// Keeps features whose Welch t-test between the two label groups has
/// p-value below `alpha` (all features when `alpha >= 1`).
pub fn screen_features(x: &DataMatrix, labels: &[u8], alpha: f64) -> Result<Screening> {
    if labels.len() != x.n() {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {} observations",
            labels.len(),
            x.n()
        )));
    }
    let sizes = cluster_sizes(labels);
    if sizes[0] < 2 || sizes[1] < 2 {
        return Err(Error::DegenerateClustering(format!(
            "screening needs two observations per group, got sizes {sizes:?}"
        )));
    }
    let mut p_values = Vec::with_capacity(x.p());
    let mut g0 = Vec::with_capacity(sizes[0]);
    let mut g1 = Vec::with_capacity(sizes[1]);
    for col in x.values().columns() {
        g0.clear();
        g1.clear();
        for (v, &l) in col.iter().zip(labels) {
            if l == 0 { g0.push(*v) } else { g1.push(*v) }
        }
        p_values.push(welch_p_value(&g0, &g1));
    }
    let ids = x.feature_ids();
    let mut selected: Vec<String> = if alpha >= 1.0 {
        ids.to_vec()
    } else {
        ids.iter()
            .zip(&p_values)
            .filter(|(_, &p)| p < alpha)
            .map(|(id, _)| id.clone())
            .collect()
    };
    let mut fallback = false;
    if selected.is_empty() {
        let best = p_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .map(|(j, _)| j)
            .expect("p >= 1");
        log::warn!(
            "no feature passed screening at level {alpha}; keeping '{}' (p = {:.3e})",
            ids[best],
            p_values[best]
        );
        selected.push(ids[best].clone());
        fallback = true;
    }
    Ok(Screening {
        selected,
        p_values,
        fallback,
    })
}

/// Per-feature KDE samplers plus the recoloring root: everything needed
/// to draw null replicates of one working matrix.
#[derive(Debug, Clone)]
pub struct NullModel {
    samplers: Vec<NullFeatureSampler>,
    bandwidths: Vec<CriticalBandwidth>,
    covariance: CovarianceModel,
    n: usize,
}

impl NullModel {
    /// `scaled` must be the centered unit-variance working matrix.
    pub fn fit(scaled: &ScaledMatrix, covariance: CovarianceModel) -> Result<Self> {
        let x = scaled.matrix();
        if covariance.p() != x.p() {
            return Err(Error::DimensionMismatch(format!(
                "{}-feature covariance for {} features",
                covariance.p(),
                x.p()
            )));
        }
        let mut samplers = Vec::with_capacity(x.p());
        let mut bandwidths = Vec::with_capacity(x.p());
        for (j, col) in x.values().columns().into_iter().enumerate() {
            let points = col.to_vec();
            let cb = critical_bandwidth(&points).map_err(|e| match e {
                Error::DegenerateFeature(_) => Error::DegenerateFeature(x.feature_ids()[j].clone()),
                other => other,
            })?;
            let target = sample_variance(col);
            samplers.push(NullFeatureSampler::new(&points, cb.h1, target)?);
            bandwidths.push(cb);
        }
        Ok(NullModel {
            samplers,
            bandwidths,
            covariance,
            n: x.n(),
        })
    }

    pub fn bandwidths(&self) -> &[CriticalBandwidth] {
        &self.bandwidths
    }

    pub fn covariance(&self) -> &CovarianceModel {
        &self.covariance
    }

    /// One `n x p` null data set. Feature `j` draws from `stream.child(j)`.
    pub fn generate(&self, stream: Substream) -> Array2<f64> {
        let p = self.samplers.len();
        let mut z = Array2::<f64>::zeros((self.n, p));
        let mut buf = vec![0.0; self.n];
        for (j, sampler) in self.samplers.iter().enumerate() {
            let mut rng = stream.child(j as u64).rng();
            sampler.fill(&mut rng, &mut buf);
            z.column_mut(j).iter_mut().zip(&buf).for_each(|(d, s)| *d = *s);
        }
        z.dot(&self.covariance.cholesky().t())
    }
}

/// One null replicate from explicit critical bandwidths and root.
pub fn generate_null_replicate(
    scaled: &ScaledMatrix,
    bandwidths: &[f64],
    cholesky: ArrayView2<'_, f64>,
    stream: Substream,
) -> Result<Array2<f64>> {
    let x = scaled.matrix();
    if bandwidths.len() != x.p() || cholesky.nrows() != x.p() {
        return Err(Error::DimensionMismatch(format!(
            "{} bandwidths and {}x{} root for {} features",
            bandwidths.len(),
            cholesky.nrows(),
            cholesky.ncols(),
            x.p()
        )));
    }
    let mut z = Array2::<f64>::zeros((x.n(), x.p()));
    for (j, col) in x.values().columns().into_iter().enumerate() {
        let sampler = NullFeatureSampler::new(&col.to_vec(), bandwidths[j], sample_variance(col))?;
        let draws = sampler.sample(&mut stream.child(j as u64).rng(), x.n());
        z.column_mut(j).iter_mut().zip(draws).for_each(|(d, s)| *d = s);
    }
    covariance::recolor(z.view(), cholesky)
}

/// Center, scale to unit variance (when configured) and cluster, as done
/// for the data.
fn label_matrix(x: ArrayView2<'_, f64>, cfg: &UnpciConfig, stream: Substream) -> Result<Clustering> {
    let dm = DataMatrix::with_default_ids(x.to_owned())?;
    let mut prepared = center(&dm);
    if cfg.scale_before_clustering {
        prepared = scale_unit_variance(&prepared)?;
    }
    clustering::cluster(prepared.values().view(), cfg.cluster_method, &mut stream.rng(), cfg.restarts)
}

/// Cluster indices of replicates `0..B`, each computed from its own
/// substreams, in replicate order.
pub fn null_replicate_cis(model: &NullModel, cfg: &UnpciConfig) -> Result<Vec<f64>> {
    let root = Substream::new(cfg.seed);
    let one = |b: usize| -> Result<f64> {
        let x0 = model.generate(root.path(&[tag::NULL_FEATURE, b as u64]));
        let labels = label_matrix(x0.view(), cfg, root.path(&[tag::NULL_CLUSTERING, b as u64]))?;
        Ok(cluster_index(x0.view(), labels.labels(), cfg.ci_variant)?.value())
    };
    let run = || (0..cfg.replicates).into_par_iter().map(one).collect::<Result<Vec<f64>>>();
    match cfg.threads {
        Some(t) => rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build()
            .map_err(|e| Error::InvalidInput(e.to_string()))?
            .install(run),
        None => run(),
    }
}

/// Monte Carlo p-value: the fraction of null indices strictly below the
/// observed one (smaller index means tighter clusters).
pub fn permutation_p_value(ci_data: f64, null_cis: &[f64], add_one: bool) -> f64 {
    let b = null_cis.len() as f64;
    if add_one {
        let at_most = null_cis.iter().filter(|&&c| c <= ci_data).count() as f64;
        (at_most + 1.0) / (b + 1.0)
    } else {
        null_cis.iter().filter(|&&c| c < ci_data).count() as f64 / b
    }
}

/// Mean, standard deviation (`B - 1` denominator), z-score and its
/// lower-tail normal probability.
pub fn normal_approximation(ci_data: f64, null_cis: &[f64]) -> (f64, f64, Option<f64>, Option<f64>) {
    let b = null_cis.len() as f64;
    let mu = null_cis.iter().sum::<f64>() / b;
    let sigma = if null_cis.len() > 1 {
        (null_cis.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / (b - 1.0)).sqrt()
    } else {
        0.0
    };
    if sigma > 0.0 {
        let z = (ci_data - mu) / sigma;
        (mu, sigma, Some(z), Some(Normal::standard().cdf(z)))
    } else {
        (mu, sigma, None, None)
    }
}

fn estimate_covariance(working: &DataMatrix, cfg: &UnpciConfig) -> Result<CovarianceModel> {
    let use_glasso = match cfg.covariance {
        CovarianceChoice::Auto => working.p() >= working.n(),
        CovarianceChoice::Sample => false,
        CovarianceChoice::Glasso => true,
    };
    if use_glasso {
        let s = covariance::sample_covariance_matrix(working);
        Ok(GraphicalLasso::new(cfg.rho).fit(s.view())?.model)
    } else {
        covariance::sample_covariance(working)
    }
}

/// Runs the full test. With `labels == None` the data are clustered with
/// `cfg.cluster_method` (and re-clustered after screening); supplied
/// labels (0/1, one per observation) are used as given throughout.
pub fn run_unpci(x: &DataMatrix, labels: Option<&[u8]>, cfg: &UnpciConfig) -> Result<UnpciResult> {
    cfg.validate()?;
    let root = Substream::new(cfg.seed);
    let centered = center(x);
    let scaled = scale_unit_variance(&centered)?;

    let cluster_working = |c: &ScaledMatrix, s: &ScaledMatrix, step: u64| -> Result<Vec<u8>> {
        let target = if cfg.scale_before_clustering { s } else { c };
        Ok(clustering::cluster(
            target.values().view(),
            cfg.cluster_method,
            &mut root.path(&[tag::DATA_CLUSTERING, step]).rng(),
            cfg.restarts,
        )?
        .labels()
        .to_vec())
    };

    let supplied = labels.is_some();
    let mut labels: Vec<u8> = match labels {
        Some(l) => {
            if l.len() != x.n() {
                return Err(Error::DimensionMismatch(format!(
                    "{} labels for {} observations",
                    l.len(),
                    x.n()
                )));
            }
            Clustering::from_labels(scaled.values().view(), l, cfg.cluster_method)?
                .labels()
                .to_vec()
        }
        None => cluster_working(&centered, &scaled, 0)?,
    };

    let mut screening_fallback = false;
    let (working, working_scaled) = if cfg.dimension_reduction {
        let screening = screen_features(centered.matrix(), &labels, cfg.alpha_screen)?;
        screening_fallback = screening.fallback;
        let subset = crate::data::subset_features(x, &screening.selected)?;
        let wc = center(&subset);
        let ws = scale_unit_variance(&wc)?;
        if !supplied {
            labels = cluster_working(&wc, &ws, 1)?;
        }
        (wc, ws)
    } else {
        (centered, scaled)
    };
    let working_matrix = working.matrix();
    let singleton_cluster = cluster_sizes(&labels).contains(&1);
    if singleton_cluster {
        log::warn!("the data clustering has a one-observation cluster");
    }

    let ci_data = cluster_index(working.values().view(), &labels, cfg.ci_variant)?.value();
    let cov = estimate_covariance(working_matrix, cfg)?;
    let covariance_method = cov.method();
    let model = NullModel::fit(&working_scaled, cov)?;
    let null_cis = null_replicate_cis(&model, cfg)?;

    let p_perm = permutation_p_value(ci_data, &null_cis, cfg.add_one);
    let (mu_ci, sigma_ci, z, p_normal) = normal_approximation(ci_data, &null_cis);
    Ok(UnpciResult {
        ci_data,
        null_cis,
        p_perm,
        z,
        p_normal,
        mu_ci,
        sigma_ci,
        selected_features: working_matrix.feature_ids().to_vec(),
        labels,
        screening_fallback,
        singleton_cluster,
        covariance_method,
        bandwidths: model.bandwidths().iter().map(|b| b.h1).collect(),
    })
}
