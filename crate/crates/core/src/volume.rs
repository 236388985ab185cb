//! Dense 3D scalar grids and voxel-aligned label grids.
//!
//! Voxels are stored x-fastest: the linear index of `(x, y, z)` is
//! `x + nx * (y + ny * z)`, matching the FITS axis order.

use serde::Serialize;

use crate::error::{Error, Result};

/// Grid extent `(nx, ny, nz)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.nx * (y + self.ny * z)
    }

    pub fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    fn check_positive(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 || self.nz == 0 {
            return Err(Error::validation(format!(
                "volume dimensions must be positive, got {}x{}x{}",
                self.nx, self.ny, self.nz
            )));
        }
        Ok(())
    }
}

impl std::fmt::Display for Dims {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ValueKind {
    Intensity,
    WaveletCoefficient,
    Continuum,
}

/// A 3D scalar volume. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    dims: Dims,
    data: Vec<f64>,
    kind: ValueKind,
}

impl Volume {
    pub fn new(dims: Dims, data: Vec<f64>) -> Result<Self> {
        Self::with_kind(dims, data, ValueKind::Intensity)
    }

    pub fn with_kind(dims: Dims, data: Vec<f64>, kind: ValueKind) -> Result<Self> {
        dims.check_positive()?;
        if data.len() != dims.len() {
            return Err(Error::validation(format!(
                "data length {} does not match dims {} ({} voxels)",
                data.len(),
                dims,
                dims.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Volume { dims, data, kind })
    }

    pub fn filled(dims: Dims, value: f64) -> Result<Self> {
        Self::new(dims, vec![value; dims.len()])
    }

    /// Builder for internal producers whose output is finite by construction.
    pub(crate) fn from_parts(dims: Dims, data: Vec<f64>, kind: ValueKind) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        Volume { dims, data, kind }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn kind(&self) -> ValueKind {
        self.kind
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, x: usize, y: usize, z: usize) -> f64 {
        self.data[self.dims.index(x, y, z)]
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, v| m.max(v.abs()))
    }

    /// Population mean and standard deviation of the voxel values.
    pub fn mean_std(&self) -> (f64, f64) {
        mean_std(&self.data)
    }
}

pub(crate) fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-cluster summary row.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClusterSummary {
    pub count: usize,
    /// Mean intensity (length 1) or mean feature vector. Empty when unknown,
    /// e.g. for a label volume read back from disk.
    pub mean: Vec<f64>,
}

/// Voxel-aligned cluster assignments with a per-cluster summary.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    labels: Vec<u16>,
    k: usize,
    summary: Vec<ClusterSummary>,
}

impl LabelVolume {
    /// Labels with the summary counts tallied from the labels and the
    /// supplied per-cluster means (one entry per cluster, or empty).
    pub fn new(dims: Dims, labels: Vec<u16>, k: usize, means: Vec<Vec<f64>>) -> Result<Self> {
        dims.check_positive()?;
        if labels.len() != dims.len() {
            return Err(Error::validation(format!(
                "label count {} does not match dims {}",
                labels.len(),
                dims
            )));
        }
        if k == 0 || k > i16::MAX as usize + 1 {
            return Err(Error::validation(format!(
                "cluster count must be in 1..={}, got {k}",
                i16::MAX as usize + 1
            )));
        }
        if !means.is_empty() && means.len() != k {
            return Err(Error::validation(format!(
                "expected {k} cluster means, got {}",
                means.len()
            )));
        }
        let mut counts = vec![0usize; k];
        for (i, &l) in labels.iter().enumerate() {
            let l = l as usize;
            if l >= k {
                return Err(Error::validation(format!(
                    "label {l} at voxel {i} outside [0, {k})"
                )));
            }
            counts[l] += 1;
        }
        let mut means = means;
        means.resize(k, Vec::new());
        let summary = counts
            .into_iter()
            .zip(means)
            .map(|(count, mean)| ClusterSummary { count, mean })
            .collect();
        Ok(LabelVolume {
            dims,
            labels,
            k,
            summary,
        })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn summary(&self) -> &[ClusterSummary] {
        &self.summary
    }

    /// Per-cluster mean of `values` over the voxels carrying each label.
    /// Clusters with no voxels yield `None`.
    pub fn cluster_means(&self, values: &[f64]) -> Vec<Option<f64>> {
        let mut sums = vec![0.0; self.k];
        for (&l, &v) in self.labels.iter().zip(values) {
            sums[l as usize] += v;
        }
        sums.into_iter()
            .zip(&self.summary)
            .map(|(s, c)| (c.count > 0).then(|| s / c.count as f64))
            .collect()
    }

    /// Summary as CSV: `cluster,count,<value columns>`.
    pub fn summary_csv(&self, value_names: &[String]) -> String {
        let mut out = String::from("cluster,count");
        for name in value_names {
            out.push(',');
            out.push_str(name);
        }
        out.push('\n');
        for (i, row) in self.summary.iter().enumerate() {
            out.push_str(&format!("{i},{}", row.count));
            for v in &row.mean {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_length_mismatch_and_nan() {
        let d = Dims::new(2, 2, 2);
        assert!(Volume::new(d, vec![0.0; 7]).is_err());
        let mut v = vec![0.0; 8];
        v[3] = f64::NAN;
        assert!(matches!(Volume::new(d, v), Err(Error::NonFinite(3))));
        assert!(Volume::new(Dims::new(0, 2, 2), vec![]).is_err());
    }

    #[test]
    fn x_fastest_indexing() {
        let d = Dims::new(3, 4, 5);
        assert_eq!(d.index(1, 0, 0), 1);
        assert_eq!(d.index(0, 1, 0), 3);
        assert_eq!(d.index(0, 0, 1), 12);
        assert_eq!(d.index(2, 3, 4), d.len() - 1);
    }

    #[test]
    fn label_summary_counts_sum_to_voxels() {
        let d = Dims::new(2, 2, 1);
        let lv = LabelVolume::new(d, vec![0, 1, 1, 2], 4, vec![]).unwrap();
        let counts: Vec<_> = lv.summary().iter().map(|s| s.count).collect();
        assert_eq!(counts, vec![1, 2, 1, 0]);
        assert_eq!(counts.iter().sum::<usize>(), d.len());
        assert!(LabelVolume::new(d, vec![0, 1, 1, 4], 4, vec![]).is_err());
    }
}
