//! Two-way clustering (2-means and hierarchical cuts) and the cluster
//! index statistic.

use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView1, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_RESTARTS: usize = 10;
pub const MAX_LLOYD_ITERATIONS: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClusterMethod {
    Kmeans,
    Single,
    Ward,
}

impl ClusterMethod {
    pub fn linkage(self) -> Option<Linkage> {
        match self {
            ClusterMethod::Kmeans => None,
            ClusterMethod::Single => Some(Linkage::Single),
            ClusterMethod::Ward => Some(Linkage::Ward),
        }
    }
}

impl fmt::Display for ClusterMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ClusterMethod::Kmeans => "kmeans",
            ClusterMethod::Single => "single",
            ClusterMethod::Ward => "ward",
        })
    }
}

impl FromStr for ClusterMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "kmeans" => Ok(ClusterMethod::Kmeans),
            "single" => Ok(ClusterMethod::Single),
            "ward" => Ok(ClusterMethod::Ward),
            other => Err(Error::InvalidInput(format!("unknown clustering method '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Linkage {
    Single,
    Ward,
}

/// Distance used inside the cluster index.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CiVariant {
    /// Within/total sum of squared Euclidean distances.
    #[default]
    SquaredL2,
    /// Unsquared Euclidean distances about the means.
    L2,
    /// Manhattan distances about the means.
    L1,
}

impl fmt::Display for CiVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CiVariant::SquaredL2 => "squared_l2",
            CiVariant::L2 => "l2",
            CiVariant::L1 => "l1",
        })
    }
}

impl FromStr for CiVariant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squared_l2" | "squared-l2" => Ok(CiVariant::SquaredL2),
            "l2" => Ok(CiVariant::L2),
            "l1" => Ok(CiVariant::L1),
            other => Err(Error::InvalidInput(format!("unknown CI variant '{other}'"))),
        }
    }
}

/// A two-way partition. Labels are 0 and 1, with observation 0 always
/// in cluster 0.
#[derive(Debug, Clone, PartialEq)]
pub struct Clustering {
    labels: Vec<u8>,
    cluster_means: Array2<f64>,
    wss: f64,
    method: ClusterMethod,
}

impl Clustering {
    pub fn from_labels(x: ArrayView2<'_, f64>, labels: &[u8], method: ClusterMethod) -> Result<Self> {
        let (means, sizes) = cluster_means(x, labels)?;
        if sizes[0] == 0 || sizes[1] == 0 {
            return Err(Error::EmptyCluster);
        }
        let wss = within_ss(x, labels, &means);
        Ok(Clustering {
            labels: canonical(labels),
            cluster_means: if labels[0] == 0 { means } else { swap_rows(means) },
            wss,
            method,
        })
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// `2 x p` matrix of cluster means.
    pub fn cluster_means(&self) -> &Array2<f64> {
        &self.cluster_means
    }

    pub fn wss(&self) -> f64 {
        self.wss
    }

    pub fn method(&self) -> ClusterMethod {
        self.method
    }

    pub fn sizes(&self) -> [usize; 2] {
        cluster_sizes(&self.labels)
    }

    /// Whether either cluster holds a single observation.
    pub fn has_singleton(&self) -> bool {
        self.sizes().contains(&1)
    }
}

fn swap_rows(mut m: Array2<f64>) -> Array2<f64> {
    for j in 0..m.ncols() {
        m.swap((0, j), (1, j));
    }
    m
}

fn canonical(labels: &[u8]) -> Vec<u8> {
    if labels.first() == Some(&1) {
        labels.iter().map(|&l| 1 - l).collect()
    } else {
        labels.to_vec()
    }
}

pub fn cluster_sizes(labels: &[u8]) -> [usize; 2] {
    let ones = labels.iter().filter(|&&l| l == 1).count();
    [labels.len() - ones, ones]
}

fn cluster_means(x: ArrayView2<'_, f64>, labels: &[u8]) -> Result<(Array2<f64>, [usize; 2])> {
    let (n, p) = x.dim();
    if labels.len() != n {
        return Err(Error::DimensionMismatch(format!(
            "{} labels for {n} observations",
            labels.len()
        )));
    }
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {bad} is not 0 or 1")));
    }
    let mut means = Array2::<f64>::zeros((2, p));
    let mut sizes = [0usize; 2];
    for (row, &l) in x.rows().into_iter().zip(labels) {
        let l = l as usize;
        sizes[l] += 1;
        let mut m = means.row_mut(l);
        m += &row;
    }
    for k in 0..2 {
        if sizes[k] > 0 {
            let mut m = means.row_mut(k);
            m /= sizes[k] as f64;
        }
    }
    Ok((means, sizes))
}

#[inline]
fn sq_dist(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn within_ss(x: ArrayView2<'_, f64>, labels: &[u8], means: &Array2<f64>) -> f64 {
    x.rows()
        .into_iter()
        .zip(labels)
        .map(|(row, &l)| sq_dist(row, means.row(l as usize)))
        .sum()
}

/// Ratio of within-cluster to total variation. In `[0, 1]` for the
/// squared-L2 variant.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClusterIndex(pub f64);

impl ClusterIndex {
    pub fn value(self) -> f64 {
        self.0
    }
}

pub fn cluster_index(x: ArrayView2<'_, f64>, labels: &[u8], variant: CiVariant) -> Result<ClusterIndex> {
    let (means, sizes) = cluster_means(x, labels)?;
    if sizes[0] == 0 || sizes[1] == 0 {
        return Err(Error::EmptyCluster);
    }
    let n = x.nrows() as f64;
    let grand = (&means.row(0) * sizes[0] as f64 + &means.row(1) * sizes[1] as f64) / n;

    let dist = |a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>| -> f64 {
        match variant {
            CiVariant::SquaredL2 => sq_dist(a, b),
            CiVariant::L2 => sq_dist(a, b).sqrt(),
            CiVariant::L1 => a.iter().zip(b.iter()).map(|(x, y)| (x - y).abs()).sum(),
        }
    };
    let mut within = 0.0;
    let mut total = 0.0;
    let mut raw = 0.0;
    for (row, &l) in x.rows().into_iter().zip(labels) {
        within += dist(row, means.row(l as usize));
        total += dist(row, grand.view());
        raw += row.iter().map(|v| v * v).sum::<f64>();
    }
    let floor = match variant {
        CiVariant::SquaredL2 => f64::EPSILON * f64::EPSILON * raw,
        _ => f64::EPSILON * raw.sqrt(),
    };
    if !(total > floor) {
        return Err(Error::ZeroTotalVariation);
    }
    Ok(ClusterIndex(within / total))
}

/// Best-of-`restarts` Lloyd's 2-means with k-means++ seeding.
///
/// Restarts ending with a cluster of fewer than two observations are
/// discarded; if every restart is discarded the clustering is
/// degenerate. Ties in assignment go to cluster 0.
pub fn kmeans2<R: Rng + ?Sized>(x: ArrayView2<'_, f64>, rng: &mut R, restarts: usize) -> Result<Clustering> {
    let n = x.nrows();
    if n < 4 {
        return Err(Error::InvalidInput(format!("2-means needs at least 4 observations, got {n}")));
    }
    if restarts == 0 {
        return Err(Error::InvalidInput("restarts must be at least 1".into()));
    }
    let mut best: Option<(f64, Vec<u8>, Array2<f64>)> = None;
    for _ in 0..restarts {
        let centers = kmeanspp_init(x, rng);
        if let Some((wss, labels, means)) = lloyd(x, centers) {
            if best.as_ref().is_none_or(|(b, _, _)| wss < *b) {
                best = Some((wss, labels, means));
            }
        }
    }
    let (wss, labels, means) = best.ok_or_else(|| {
        Error::DegenerateClustering(format!(
            "all {restarts} 2-means restarts produced a cluster with fewer than two observations"
        ))
    })?;
    let swapped = labels[0] == 1;
    Ok(Clustering {
        labels: canonical(&labels),
        cluster_means: if swapped { swap_rows(means) } else { means },
        wss,
        method: ClusterMethod::Kmeans,
    })
}

fn kmeanspp_init<R: Rng + ?Sized>(x: ArrayView2<'_, f64>, rng: &mut R) -> Array2<f64> {
    let (n, p) = x.dim();
    let first = rng.random_range(0..n);
    let d2: Vec<f64> = x.rows().into_iter().map(|r| sq_dist(r, x.row(first))).collect();
    let total: f64 = d2.iter().sum();
    let second = if total > 0.0 {
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = n - 1;
        for (i, d) in d2.iter().enumerate() {
            acc += d;
            if acc > target && *d > 0.0 {
                pick = i;
                break;
            }
        }
        if d2[pick] == 0.0 {
            // Roundoff pushed the draw past the last positive weight.
            pick = d2.iter().rposition(|&d| d > 0.0).unwrap_or(pick);
        }
        pick
    } else {
        rng.random_range(0..n)
    };
    let mut centers = Array2::zeros((2, p));
    centers.row_mut(0).assign(&x.row(first));
    centers.row_mut(1).assign(&x.row(second));
    centers
}

/// Lloyd iterations from the given centers. `None` when a cluster ends
/// up with fewer than two observations.
fn lloyd(x: ArrayView2<'_, f64>, mut centers: Array2<f64>) -> Option<(f64, Vec<u8>, Array2<f64>)> {
    let n = x.nrows();
    let mut labels = vec![u8::MAX; n];
    for _ in 0..MAX_LLOYD_ITERATIONS {
        let mut changed = false;
        for (i, row) in x.rows().into_iter().enumerate() {
            let d0 = sq_dist(row, centers.row(0));
            let d1 = sq_dist(row, centers.row(1));
            let l = if d1 < d0 { 1 } else { 0 };
            if labels[i] != l {
                labels[i] = l;
                changed = true;
            }
        }
        let (means, sizes) = cluster_means(x, &labels).ok()?;
        if sizes[0] == 0 || sizes[1] == 0 {
            return None;
        }
        centers = means;
        if !changed {
            break;
        }
    }
    let sizes = cluster_sizes(&labels);
    if sizes[0] < 2 || sizes[1] < 2 {
        return None;
    }
    let wss = within_ss(x, &labels, &centers);
    Some((wss, labels, centers))
}

/// One agglomeration step: clusters `a` and `b` (indices of their
/// representative observations) joined at `height`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub a: usize,
    pub b: usize,
    /// Linkage value at the merge, in squared Euclidean units.
    pub height: f64,
    pub size: usize,
}

struct Condensed {
    n: usize,
    d: Vec<f64>,
}

impl Condensed {
    fn squared_euclidean(x: ArrayView2<'_, f64>) -> Self {
        let n = x.nrows();
        let mut d = Vec::with_capacity(n * (n - 1) / 2);
        for i in 0..n {
            let ri = x.row(i);
            for j in (i + 1)..n {
                d.push(sq_dist(ri, x.row(j)));
            }
        }
        Condensed { n, d }
    }

    #[inline]
    fn idx(&self, i: usize, j: usize) -> usize {
        let (i, j) = if i < j { (i, j) } else { (j, i) };
        i * self.n - i * (i + 1) / 2 + (j - i - 1)
    }

    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[self.idx(i, j)]
    }

    #[inline]
    fn set(&mut self, i: usize, j: usize, v: f64) {
        let k = self.idx(i, j);
        self.d[k] = v;
    }
}

/// Nearest-neighbor-chain agglomeration on squared Euclidean distances,
/// stopping once `stop_at` clusters remain. Returns the merges in the
/// order performed and the representative of each observation.
fn nn_chain(x: ArrayView2<'_, f64>, linkage: Linkage, stop_at: usize) -> (Vec<Merge>, Vec<usize>) {
    let n = x.nrows();
    let mut dist = Condensed::squared_euclidean(x);
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut parent: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n.saturating_sub(stop_at));
    let mut chain: Vec<usize> = Vec::with_capacity(n);
    let mut remaining = n;

    while remaining > stop_at.max(1) {
        if chain.is_empty() {
            chain.push(active.iter().position(|&a| a).expect("an active cluster"));
        }
        let (a, b) = loop {
            let top = *chain.last().unwrap();
            let prev = if chain.len() >= 2 { Some(chain[chain.len() - 2]) } else { None };
            let mut best = prev;
            let mut best_d = prev.map_or(f64::INFINITY, |p| dist.get(top, p));
            for k in 0..n {
                if k == top || !active[k] {
                    continue;
                }
                let d = dist.get(top, k);
                if d < best_d {
                    best_d = d;
                    best = Some(k);
                }
            }
            let nb = best.expect("at least two active clusters");
            if Some(nb) == prev {
                chain.pop();
                chain.pop();
                break (top, nb);
            }
            chain.push(nb);
        };

        let (keep, gone) = if a < b { (a, b) } else { (b, a) };
        let d_ab = dist.get(a, b);
        let (sa, sb) = (size[a] as f64, size[b] as f64);
        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let dka = dist.get(k, a);
            let dkb = dist.get(k, b);
            let updated = match linkage {
                Linkage::Single => dka.min(dkb),
                Linkage::Ward => {
                    let sk = size[k] as f64;
                    ((sk + sa) * dka + (sk + sb) * dkb - sk * d_ab) / (sk + sa + sb)
                }
            };
            dist.set(k, keep, updated);
        }
        active[gone] = false;
        size[keep] += size[gone];
        parent[gone] = keep;
        merges.push(Merge {
            a: keep,
            b: gone,
            height: d_ab,
            size: size[keep],
        });
        remaining -= 1;
    }

    let mut rep = vec![0usize; n];
    for i in 0..n {
        let mut r = i;
        while parent[r] != r {
            r = parent[r];
        }
        rep[i] = r;
    }
    (merges, rep)
}

/// Full merge sequence, ordered by height (stable for ties).
pub fn linkage_tree(x: ArrayView2<'_, f64>, linkage: Linkage) -> Result<Vec<Merge>> {
    if x.nrows() < 2 {
        return Err(Error::InvalidInput("need at least 2 observations".into()));
    }
    let (mut merges, _) = nn_chain(x, linkage, 1);
    merges.sort_by(|m1, m2| m1.height.total_cmp(&m2.height));
    Ok(merges)
}

/// Agglomerative clustering cut at the final merge. A singleton side is
/// allowed; check [`Clustering::has_singleton`].
pub fn hierarchical2(x: ArrayView2<'_, f64>, linkage: Linkage) -> Result<Clustering> {
    let n = x.nrows();
    if n < 4 {
        return Err(Error::InvalidInput(format!(
            "hierarchical clustering needs at least 4 observations, got {n}"
        )));
    }
    let (_, rep) = nn_chain(x, linkage, 2);
    let root0 = rep[0];
    let labels: Vec<u8> = rep.iter().map(|&r| u8::from(r != root0)).collect();
    let method = match linkage {
        Linkage::Single => ClusterMethod::Single,
        Linkage::Ward => ClusterMethod::Ward,
    };
    let clustering = Clustering::from_labels(x, &labels, method)?;
    if clustering.has_singleton() {
        log::debug!("{method} linkage cut produced a singleton cluster");
    }
    Ok(clustering)
}

/// Dispatches to [`kmeans2`] or [`hierarchical2`].
pub fn cluster<R: Rng + ?Sized>(
    x: ArrayView2<'_, f64>,
    method: ClusterMethod,
    rng: &mut R,
    restarts: usize,
) -> Result<Clustering> {
    match method.linkage() {
        None => kmeans2(x, rng, restarts),
        Some(linkage) => hierarchical2(x, linkage),
    }
}
