//! k-means over per-voxel multiscale feature vectors.
//!
//! Squared-Euclidean k-means is the Gaussian mixture restricted to identity
//! covariances and hard assignments, which is the wavelet-domain family the
//! marginal GMM is compared against.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mixture::derive_seed;
use crate::par::{chunked_reduce, CHUNK};
use crate::starlet::WaveletDecomposition;
use crate::volume::{Dims, LabelVolume};

pub const DEFAULT_MAX_ITER: usize = 300;
pub const DEFAULT_RESTARTS: usize = 5;

/// Voxel-aligned feature vectors, stored row-major (`n` rows of `m`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureField {
    dims: Dims,
    m: usize,
    vectors: Vec<f64>,
    names: Vec<String>,
    /// Per-dimension (offset, scale) applied: stored = (raw - offset) / scale.
    standardization: Vec<(f64, f64)>,
    /// Per-dimension mean and population std of the stored vectors.
    moments: Vec<(f64, f64)>,
    warnings: Vec<String>,
}

impl FeatureField {
    /// Wrap raw vectors without standardization.
    pub fn new(dims: Dims, m: usize, vectors: Vec<f64>, names: Vec<String>) -> Result<Self> {
        if m == 0 {
            return Err(Error::validation("feature dimension must be positive"));
        }
        if vectors.len() != dims.len() * m {
            return Err(Error::validation(format!(
                "expected {} x {m} feature values, got {}",
                dims.len(),
                vectors.len()
            )));
        }
        if names.len() != m {
            return Err(Error::validation(format!(
                "expected {m} feature names, got {}",
                names.len()
            )));
        }
        if let Some(i) = vectors.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i / m));
        }
        let moments = column_moments(&vectors, m);
        Ok(FeatureField {
            dims,
            m,
            vectors,
            names,
            standardization: vec![(0.0, 1.0); m],
            moments,
            warnings: Vec::new(),
        })
    }

    /// Points in `m` dimensions with no spatial layout (dims `n x 1 x 1`).
    pub fn from_points(m: usize, vectors: Vec<f64>) -> Result<Self> {
        let n = if m == 0 { 0 } else { vectors.len() / m };
        let names = (1..=m).map(|i| format!("f{i}")).collect();
        Self::new(Dims::new(n, 1, 1), m, vectors, names)
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn len(&self) -> usize {
        self.dims.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dim(&self) -> usize {
        self.m
    }

    pub fn vectors(&self) -> &[f64] {
        &self.vectors
    }

    pub fn vector(&self, i: usize) -> &[f64] {
        &self.vectors[i * self.m..(i + 1) * self.m]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn standardization(&self) -> &[(f64, f64)] {
        &self.standardization
    }

    pub fn is_standardized(&self) -> bool {
        self.standardization.iter().any(|&(o, s)| o != 0.0 || s != 1.0)
    }

    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    /// Map a point in this field's coordinates to per-dimension z-scores of
    /// the field. Identity (up to rounding) on an already standardized field.
    pub fn to_standard(&self, point: &[f64]) -> Vec<f64> {
        point
            .iter()
            .zip(&self.moments)
            .map(|(&x, &(mean, sd))| if sd > 0.0 { (x - mean) / sd } else { x - mean })
            .collect()
    }

    /// Z-score every dimension in place. A dimension with zero variance is
    /// centred with scale 1 and a warning is recorded.
    fn standardize(&mut self) {
        for (j, &(mean, sd)) in self.moments.clone().iter().enumerate() {
            let scale = if sd > 0.0 {
                sd
            } else {
                self.warnings.push(format!(
                    "feature `{}` has zero variance; scale set to 1",
                    self.names[j]
                ));
                1.0
            };
            for row in self.vectors.chunks_exact_mut(self.m) {
                row[j] = (row[j] - mean) / scale;
            }
            self.standardization[j] = (mean, scale);
        }
        self.moments = column_moments(&self.vectors, self.m);
    }
}

fn column_moments(vectors: &[f64], m: usize) -> Vec<(f64, f64)> {
    let n = (vectors.len() / m) as f64;
    if n == 0.0 {
        return vec![(0.0, 0.0); m];
    }
    let mut mean = vec![0.0; m];
    for row in vectors.chunks_exact(m) {
        for (a, x) in mean.iter_mut().zip(row) {
            *a += x;
        }
    }
    for a in &mut mean {
        *a /= n;
    }
    let mut var = vec![0.0; m];
    for row in vectors.chunks_exact(m) {
        for j in 0..m {
            var[j] += (row[j] - mean[j]).powi(2);
        }
    }
    mean.into_iter()
        .zip(var)
        .map(|(mu, v)| (mu, (v / n).sqrt()))
        .collect()
}

/// Stack wavelet scales (and optionally the continuum) into per-voxel vectors.
pub fn build_features(
    d: &WaveletDecomposition,
    include_continuum: bool,
    standardize: bool,
) -> Result<FeatureField> {
    let levels: Vec<_> = if include_continuum {
        d.levels().collect()
    } else {
        d.scales().iter().collect()
    };
    if levels.is_empty() {
        return Err(Error::validation("decomposition has no levels to use as features"));
    }
    let m = levels.len();
    let n = d.dims().len();
    let mut vectors = vec![0.0; n * m];
    for (j, level) in levels.iter().enumerate() {
        for (row, &x) in vectors.chunks_exact_mut(m).zip(level.data()) {
            row[j] = x;
        }
    }
    let mut names: Vec<String> = (1..=d.num_scales()).map(|s| format!("scale_{s}")).collect();
    names.truncate(m);
    if include_continuum {
        names.push("continuum".into());
    }
    let mut field = FeatureField::new(d.dims(), m, vectors, names)?;
    if standardize {
        field.standardize();
    }
    Ok(field)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KMeansOptions {
    pub seed: u64,
    pub max_iter: usize,
    pub restarts: usize,
}

impl Default for KMeansOptions {
    fn default() -> Self {
        KMeansOptions {
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            restarts: DEFAULT_RESTARTS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KMeansModel {
    pub k: usize,
    pub centroids: Vec<Vec<f64>>,
    pub counts: Vec<usize>,
    pub inertia: f64,
    /// Inertia after each Lloyd iteration of the winning restart.
    pub inertia_trace: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Empty clusters reseeded during the winning restart.
    pub reseeds: usize,
}

impl KMeansModel {
    /// CSV rows `cluster,count,<centroid coordinates>`.
    pub fn to_csv(&self, names: &[String]) -> String {
        let mut out = String::from("cluster,count");
        for n in names {
            out.push(',');
            out.push_str(n);
        }
        out.push('\n');
        for (i, (c, n)) in self.centroids.iter().zip(&self.counts).enumerate() {
            out.push_str(&format!("{i},{n}"));
            for x in c {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
        out
    }
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest centroid; ties go to the lowest index.
#[inline]
fn nearest(p: &[f64], centroids: &[f64], m: usize) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, c) in centroids.chunks_exact(m).enumerate() {
        let d = sq_dist(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

/// Draw an index with probability proportional to `weights` (uniform if all zero).
fn draw(rng: &mut ChaCha8Rng, weights: &[f64]) -> usize {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return rng.gen_range(0..weights.len());
    }
    let target = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if acc > target {
            return i;
        }
    }
    weights.len() - 1
}

fn kmeans_pp(points: &[f64], m: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let n = points.len() / m;
    let mut centroids = Vec::with_capacity(k * m);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&points[first * m..(first + 1) * m]);
    let mut d2: Vec<f64> = points
        .par_chunks_exact(m)
        .map(|p| sq_dist(p, &centroids[..m]))
        .collect();
    for _ in 1..k {
        let i = draw(rng, &d2);
        let c = points[i * m..(i + 1) * m].to_vec();
        d2.par_iter_mut()
            .zip(points.par_chunks_exact(m))
            .for_each(|(d, p)| *d = d.min(sq_dist(p, &c)));
        centroids.extend_from_slice(&c);
    }
    centroids
}

#[derive(Default)]
struct Sums {
    counts: Vec<usize>,
    sums: Vec<f64>,
}

fn cluster_sums(points: &[f64], labels: &[usize], m: usize, k: usize) -> Sums {
    chunked_reduce(
        points,
        m,
        |chunk, offset| {
            let mut s = Sums {
                counts: vec![0; k],
                sums: vec![0.0; k * m],
            };
            for (i, p) in chunk.chunks_exact(m).enumerate() {
                let l = labels[offset + i];
                s.counts[l] += 1;
                for (a, x) in s.sums[l * m..(l + 1) * m].iter_mut().zip(p) {
                    *a += x;
                }
            }
            s
        },
        |acc, part| {
            if acc.counts.is_empty() {
                *acc = part;
            } else {
                for (a, b) in acc.counts.iter_mut().zip(&part.counts) {
                    *a += b;
                }
                for (a, b) in acc.sums.iter_mut().zip(&part.sums) {
                    *a += b;
                }
            }
        },
    )
}

fn inertia_of(points: &[f64], labels: &[usize], centroids: &[f64], m: usize) -> f64 {
    chunked_reduce(
        points,
        m,
        |chunk, offset| {
            chunk
                .chunks_exact(m)
                .enumerate()
                .map(|(i, p)| {
                    let l = labels[offset + i];
                    sq_dist(p, &centroids[l * m..(l + 1) * m])
                })
                .sum::<f64>()
        },
        |acc: &mut f64, part| *acc += part,
    )
}

struct Run {
    centroids: Vec<f64>,
    labels: Vec<usize>,
    counts: Vec<usize>,
    trace: Vec<f64>,
    iterations: usize,
    converged: bool,
    reseeds: usize,
}

fn lloyd(points: &[f64], m: usize, k: usize, max_iter: usize, rng: &mut ChaCha8Rng) -> Run {
    let mut centroids = kmeans_pp(points, m, k, rng);
    let n = points.len() / m;
    let mut labels = vec![usize::MAX; n];
    let mut counts = vec![0; k];
    let mut trace = Vec::new();
    let mut reseeds = 0;
    let mut converged = false;
    let mut iterations = 0;

    while iterations < max_iter.max(1) {
        iterations += 1;
        let changed: usize = labels
            .par_chunks_mut(CHUNK)
            .zip(points.par_chunks(CHUNK * m))
            .map(|(ls, ps)| {
                let mut changed = 0;
                for (l, p) in ls.iter_mut().zip(ps.chunks_exact(m)) {
                    let (j, _) = nearest(p, &centroids, m);
                    if *l != j {
                        *l = j;
                        changed += 1;
                    }
                }
                changed
            })
            .sum();

        let mut sums = cluster_sums(points, &labels, m, k);
        let mut reseeded = false;
        while let Some(empty) = sums.counts.iter().position(|&c| c == 0) {
            // Move the point farthest from its centroid (among clusters that
            // can spare one) into the empty cluster.
            let current = centroids_from(&sums, &centroids, m);
            let donor = (0..n)
                .filter(|&i| sums.counts[labels[i]] > 1)
                .map(|i| {
                    let l = labels[i];
                    (i, sq_dist(&points[i * m..(i + 1) * m], &current[l * m..(l + 1) * m]))
                })
                .fold(None::<(usize, f64)>, |best, (i, d)| match best {
                    Some((_, bd)) if d <= bd => best,
                    _ => Some((i, d)),
                });
            let Some((p, _)) = donor else { break };
            let old = labels[p];
            labels[p] = empty;
            let point = &points[p * m..(p + 1) * m];
            sums.counts[old] -= 1;
            sums.counts[empty] += 1;
            for j in 0..m {
                sums.sums[old * m + j] -= point[j];
                sums.sums[empty * m + j] += point[j];
            }
            reseeds += 1;
            reseeded = true;
        }
        if reseeded {
            // Rebuild sums exactly rather than trusting the running updates.
            sums = cluster_sums(points, &labels, m, k);
        }
        centroids = centroids_from(&sums, &centroids, m);
        counts = sums.counts;
        trace.push(inertia_of(points, &labels, &centroids, m));

        if changed == 0 && !reseeded {
            converged = true;
            break;
        }
    }

    Run {
        centroids,
        labels,
        counts,
        trace,
        iterations,
        converged,
        reseeds,
    }
}

fn centroids_from(s: &Sums, previous: &[f64], m: usize) -> Vec<f64> {
    let mut out = previous.to_vec();
    for (j, &c) in s.counts.iter().enumerate() {
        if c > 0 {
            for d in 0..m {
                out[j * m + d] = s.sums[j * m + d] / c as f64;
            }
        }
    }
    out
}

/// Best-of-restarts Lloyd k-means. Returned labels are renumbered by
/// descending cluster size (ties keep the earlier cluster first).
pub fn kmeans_fit(f: &FeatureField, k: usize, opts: KMeansOptions) -> Result<(KMeansModel, LabelVolume)> {
    let n = f.len();
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if n < k {
        return Err(Error::validation(format!(
            "k-means with k = {k} needs at least {k} vectors, got {n}"
        )));
    }
    let m = f.dim();
    let mut best: Option<Run> = None;
    for r in 0..opts.restarts.max(1) {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, k, r));
        let run = lloyd(f.vectors(), m, k, opts.max_iter, &mut rng);
        let better = best.as_ref().map_or(true, |b| {
            run.trace.last().copied().unwrap_or(f64::INFINITY)
                < b.trace.last().copied().unwrap_or(f64::INFINITY)
        });
        if better {
            best = Some(run);
        }
    }
    let run = best.expect("at least one restart");

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| run.counts[b].cmp(&run.counts[a]).then(a.cmp(&b)));
    let mut rank = vec![0usize; k];
    for (new, &old) in order.iter().enumerate() {
        rank[old] = new;
    }
    let centroids: Vec<Vec<f64>> = order
        .iter()
        .map(|&j| run.centroids[j * m..(j + 1) * m].to_vec())
        .collect();
    let counts: Vec<usize> = order.iter().map(|&j| run.counts[j]).collect();
    let labels: Vec<u16> = run.labels.iter().map(|&l| rank[l] as u16).collect();

    let model = KMeansModel {
        k,
        inertia: *run.trace.last().expect("at least one iteration"),
        centroids: centroids.clone(),
        counts,
        inertia_trace: run.trace,
        iterations: run.iterations,
        converged: run.converged,
        reseeds: run.reseeds,
    };
    let lv = LabelVolume::new(f.dims(), labels, k, centroids)?;
    Ok((model, lv))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::starlet::starlet_forward;
    use crate::synth::normal_volume;
    use crate::volume::Volume;

    #[test]
    fn constant_volume_features_are_zero() {
        let v = Volume::filled(Dims::cube(12), 7.0).unwrap();
        let d = starlet_forward(&v, 2).unwrap();
        let f = build_features(&d, false, false).unwrap();
        assert_eq!(f.dim(), 2);
        assert!(f.vectors().iter().all(|x| x.abs() < 1e-12));
    }

    #[test]
    fn continuum_adds_a_dimension() {
        let v = normal_volume(Dims::cube(20), 1.0, 1).unwrap();
        let d = starlet_forward(&v, 3).unwrap();
        let f = build_features(&d, true, true).unwrap();
        assert_eq!(f.dim(), 4);
        assert_eq!(f.names(), &["scale_1", "scale_2", "scale_3", "continuum"]);
        for j in 0..4 {
            let col: Vec<f64> = (0..f.len()).map(|i| f.vector(i)[j]).collect();
            let (mean, sd) = crate::volume::mean_std(&col);
            assert!(mean.abs() < 1e-9);
            assert!((sd * sd - 1.0).abs() < 1e-9);
        }
        assert!(f.warnings().is_empty());
    }

    #[test]
    fn zero_variance_dimension_warns() {
        let v = Volume::filled(Dims::cube(12), 3.0).unwrap();
        let d = starlet_forward(&v, 1).unwrap();
        let f = build_features(&d, true, true).unwrap();
        assert_eq!(f.warnings().len(), 2);
        assert!(f.standardization().iter().all(|&(_, s)| s == 1.0));
    }

    #[test]
    fn two_points() {
        let f = FeatureField::from_points(2, vec![0.0, 0.0, 3.0, 4.0]).unwrap();
        let (m, lv) = kmeans_fit(&f, 2, KMeansOptions::default()).unwrap();
        assert_eq!(m.inertia, 0.0);
        let mut cs = m.centroids.clone();
        cs.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(cs, vec![vec![0.0, 0.0], vec![3.0, 4.0]]);
        assert_ne!(lv.labels()[0], lv.labels()[1]);
    }

    #[test]
    fn k_equals_n_gives_zero_inertia() {
        let pts: Vec<f64> = (0..10).map(|i| (i * i) as f64).collect();
        let f = FeatureField::from_points(1, pts).unwrap();
        let (m, _) = kmeans_fit(&f, 10, KMeansOptions::default()).unwrap();
        assert_eq!(m.inertia, 0.0);
        assert!(m.counts.iter().all(|&c| c == 1));
    }

    #[test]
    fn identical_points_reseed_and_finish() {
        let f = FeatureField::from_points(2, vec![1.0; 40]).unwrap();
        let opts = KMeansOptions { max_iter: 20, restarts: 1, ..Default::default() };
        let (m, lv) = kmeans_fit(&f, 2, opts).unwrap();
        assert!(m.reseeds > 0);
        assert!(m.counts.iter().all(|&c| c > 0));
        assert_eq!(m.counts.iter().sum::<usize>(), 20);
        assert_eq!(lv.k(), 2);
    }

    #[test]
    fn labels_ordered_by_descending_count() {
        let mut pts = vec![0.0; 30];
        pts.extend(vec![50.0; 10]);
        pts.extend(vec![100.0; 20]);
        let f = FeatureField::from_points(1, pts).unwrap();
        let (m, lv) = kmeans_fit(&f, 3, KMeansOptions::default()).unwrap();
        assert_eq!(m.counts, vec![30, 20, 10]);
        assert_eq!(m.centroids, vec![vec![0.0], vec![100.0], vec![50.0]]);
        assert_eq!(lv.labels()[0], 0);
        assert_eq!(lv.labels()[35], 2);
        assert_eq!(lv.labels()[45], 1);
        assert!(m.to_csv(f.names()).starts_with("cluster,count,f1\n0,30,0\n"));
    }

    #[test]
    fn rejects_bad_k() {
        let f = FeatureField::from_points(1, vec![1.0, 2.0]).unwrap();
        assert!(kmeans_fit(&f, 3, KMeansOptions::default()).is_err());
        assert!(kmeans_fit(&f, 0, KMeansOptions::default()).is_err());
    }
}
