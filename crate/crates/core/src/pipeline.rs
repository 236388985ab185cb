//! End-to-end protocol: marginal-GMM segmentation, wavelet k-means
//! segmentation, and their comparison by Renyi quadratic entropy.
//!
//! BIC ranks models only within one family, so the cross-family comparison
//! reduces each segmentation to a Gaussian covering (cluster means with a
//! shared isotropic scale) in z-scored coordinates and compares their
//! pairwise entropies. Smaller entropy is the more parsimonious covering.

use std::fmt::Write as _;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::entropy::{renyi_quadratic_covering, renyi_quadratic_multiscale, GaussianCovering};
use crate::error::{Error, Result};
use crate::fits::save_fits;
use crate::kmeans::{build_features, kmeans_fit, FeatureField, KMeansModel, KMeansOptions};
use crate::mixture::{
    bic_scan, fit_best_of, label_by_posterior, FitReport, MixtureModel, ScanOptions, ScanResult,
    BINNED_THRESHOLD, DEFAULT_BINS,
};
use crate::starlet::{starlet_forward, WaveletDecomposition};
use crate::volume::{ClusterSummary, LabelVolume, Volume};

pub const DEFAULT_SIGMA: f64 = 1.0;
pub const DEFAULT_SIGMA_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

/// `<prefix>_segm_marg<k>.fits`
pub fn marginal_labels_path(prefix: &Path, k: usize) -> PathBuf {
    with_suffix(prefix, &format!("_segm_marg{k}.fits"))
}

/// `<prefix>_segm_kmean<k>.fits`
pub fn kmeans_labels_path(prefix: &Path, k: usize) -> PathBuf {
    with_suffix(prefix, &format!("_segm_kmean{k}.fits"))
}

/// `<prefix>_bic_scan.csv`
pub fn bic_scan_path(prefix: &Path) -> PathBuf {
    with_suffix(prefix, "_bic_scan.csv")
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

#[derive(Debug, Clone)]
pub struct MarginalResult {
    /// Present when more than one k was scanned.
    pub scan: Option<ScanResult>,
    pub fit: FitReport,
    pub labels: LabelVolume,
}

impl MarginalResult {
    pub fn k(&self) -> usize {
        self.fit.model.k()
    }

    /// Label FITS, cluster summary CSV, and the BIC table when a scan ran.
    pub fn save(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        let fits_path = marginal_labels_path(prefix, self.k());
        save_fits(&self.labels, &fits_path)?;
        let csv_path = fits_path.with_extension("csv");
        write_text(&csv_path, &self.labels.summary_csv(&["mean_intensity".into()]))?;
        let mut out = vec![fits_path, csv_path];
        if let Some(scan) = &self.scan {
            let p = bic_scan_path(prefix);
            write_text(&p, &scan.to_csv())?;
            out.push(p);
        }
        Ok(out)
    }
}

/// Scan `k_range` by BIC (or fit the single k directly), then label voxels
/// by maximum posterior. Volumes above [`BINNED_THRESHOLD`] voxels are fit on
/// a histogram of the marginal unless `opts.bins` is already set.
pub fn run_marginal_family(
    v: &Volume,
    k_range: RangeInclusive<usize>,
    opts: ScanOptions,
) -> Result<MarginalResult> {
    let stage = |e: Error| e.in_stage("marginal family");
    let mut opts = opts;
    if opts.bins.is_none() && v.len() > BINNED_THRESHOLD {
        opts.bins = Some(DEFAULT_BINS);
    }
    let (lo, hi) = (*k_range.start(), *k_range.end());
    let (scan, fit) = if lo == hi {
        (None, fit_best_of(v.data(), lo, opts).map_err(stage)?)
    } else {
        let scan = bic_scan(v.data(), k_range, opts).map_err(stage)?;
        let fit = scan.selected().clone();
        (Some(scan), fit)
    };
    let labels = label_by_posterior(v, &fit.model).map_err(stage)?;
    Ok(MarginalResult { scan, fit, labels })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveletOptions {
    pub scales: usize,
    pub k: usize,
    pub standardize: bool,
    pub include_continuum: bool,
    pub kmeans: KMeansOptions,
}

impl Default for WaveletOptions {
    fn default() -> Self {
        WaveletOptions {
            scales: crate::starlet::DEFAULT_SCALES,
            k: 6,
            standardize: true,
            include_continuum: true,
            kmeans: KMeansOptions::default(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct WaveletResult {
    pub decomposition: WaveletDecomposition,
    pub features: FeatureField,
    pub model: KMeansModel,
    pub labels: LabelVolume,
}

impl WaveletResult {
    pub fn k(&self) -> usize {
        self.model.k
    }

    /// Level files, label FITS, and the centroid CSV.
    pub fn save(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        let mut out = self.decomposition.save_levels(prefix)?;
        let fits_path = kmeans_labels_path(prefix, self.k());
        save_fits(&self.labels, &fits_path)?;
        let csv_path = fits_path.with_extension("csv");
        write_text(&csv_path, &self.model.to_csv(self.features.names()))?;
        out.push(fits_path);
        out.push(csv_path);
        Ok(out)
    }
}

/// Starlet transform, feature stacking, then k-means.
pub fn run_wavelet_family(v: &Volume, opts: WaveletOptions) -> Result<WaveletResult> {
    let stage = |e: Error| e.in_stage("wavelet family");
    let decomposition = starlet_forward(v, opts.scales).map_err(stage)?;
    let features =
        build_features(&decomposition, opts.include_continuum, opts.standardize).map_err(stage)?;
    let (model, labels) = kmeans_fit(&features, opts.k, opts.kmeans).map_err(stage)?;
    Ok(WaveletResult {
        decomposition,
        features,
        model,
        labels,
    })
}

/// The marginal segmentation to compare. Without a model the covering is
/// built from per-cluster mean intensities of `labels`.
#[derive(Debug, Clone, Copy)]
pub struct MarginalSegmentation<'a> {
    pub model: Option<&'a MixtureModel>,
    pub labels: &'a LabelVolume,
    pub bic: Option<f64>,
}

/// The wavelet segmentation to compare. Without a model the covering is
/// built from per-cluster mean feature vectors of `labels`.
#[derive(Debug, Clone, Copy)]
pub struct WaveletSegmentation<'a> {
    pub model: Option<&'a KMeansModel>,
    pub features: &'a FeatureField,
    pub labels: &'a LabelVolume,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareOptions {
    /// Shared covering scale for the verdict.
    pub sigma: f64,
    /// Scales for the sensitivity table.
    pub sigma_grid: Vec<f64>,
    /// Sum one covering per wavelet scale instead of one feature-space covering.
    pub multiscale: bool,
}

impl Default for CompareOptions {
    fn default() -> Self {
        CompareOptions {
            sigma: DEFAULT_SIGMA,
            sigma_grid: DEFAULT_SIGMA_GRID.to_vec(),
            multiscale: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Marginal,
    Kmeans,
    Tie,
}

impl Verdict {
    pub fn from_entropies(marginal: f64, kmeans: f64) -> Self {
        if marginal < kmeans {
            Verdict::Marginal
        } else if kmeans < marginal {
            Verdict::Kmeans
        } else {
            Verdict::Tie
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Verdict::Marginal => "marginal",
            Verdict::Kmeans => "kmeans",
            Verdict::Tie => "tie",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FamilyBlock {
    pub family: String,
    pub k: usize,
    pub bic: Option<f64>,
    pub renyi_quadratic: f64,
    /// Covering coordinates, e.g. `intensity (z-score)`.
    pub space: String,
    pub standardized: bool,
    pub clusters: Vec<ClusterSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SensitivityRow {
    pub sigma: f64,
    pub marginal: f64,
    pub kmeans: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    /// Echo of the run configuration, printed first.
    pub config: Vec<(String, String)>,
    pub sigma: f64,
    pub multiscale: bool,
    pub marginal: FamilyBlock,
    pub kmeans: FamilyBlock,
    pub verdict: Verdict,
    pub sensitivity: Vec<SensitivityRow>,
}

/// Means of nonempty clusters of `labels` over row-major `m`-vectors.
fn label_means(labels: &LabelVolume, vectors: &[f64], m: usize) -> Vec<Vec<f64>> {
    let k = labels.k();
    let mut sums = vec![0.0; k * m];
    let mut counts = vec![0usize; k];
    for (&l, row) in labels.labels().iter().zip(vectors.chunks_exact(m)) {
        let l = l as usize;
        counts[l] += 1;
        for (s, x) in sums[l * m..(l + 1) * m].iter_mut().zip(row) {
            *s += x;
        }
    }
    (0..k)
        .filter(|&j| counts[j] > 0)
        .map(|j| sums[j * m..(j + 1) * m].iter().map(|s| s / counts[j] as f64).collect())
        .collect()
}

/// Coverings (one per scale in multiscale mode, otherwise one) for each family.
struct Coverings {
    marginal: Vec<Vec<Vec<f64>>>,
    kmeans: Vec<Vec<Vec<f64>>>,
    marginal_space: String,
    kmeans_space: String,
}

fn build_coverings(
    v: &Volume,
    marginal: &MarginalSegmentation<'_>,
    wavelet: &WaveletSegmentation<'_>,
    multiscale: bool,
) -> Result<Coverings> {
    let f = wavelet.features;
    if marginal.labels.dims() != v.dims() || wavelet.labels.dims() != v.dims() || f.dims() != v.dims()
    {
        return Err(Error::validation(
            "segmentations and features must share the volume's dims",
        ));
    }
    let (mean, sd) = v.mean_std();
    let sd = if sd > 0.0 { sd } else { 1.0 };

    if !multiscale {
        let marginal_means: Vec<Vec<f64>> = match marginal.model {
            Some(model) => model.means_1d().into_iter().map(|m| vec![(m - mean) / sd]).collect(),
            None => label_means(marginal.labels, v.data(), 1)
                .into_iter()
                .map(|m| vec![(m[0] - mean) / sd])
                .collect(),
        };
        let raw_centroids = match wavelet.model {
            Some(model) => model.centroids.clone(),
            None => label_means(wavelet.labels, f.vectors(), f.dim()),
        };
        let kmeans_means = raw_centroids.iter().map(|c| f.to_standard(c)).collect();
        return Ok(Coverings {
            marginal: vec![marginal_means],
            kmeans: vec![kmeans_means],
            marginal_space: "intensity (z-score)".into(),
            kmeans_space: format!("features [{}] (z-score)", f.names().join(" ")),
        });
    }

    // Per wavelet scale: each family's segments reduced to their mean
    // z-scored coefficient at that scale.
    let scale_dims: Vec<usize> = f
        .names()
        .iter()
        .enumerate()
        .filter(|(_, n)| n.starts_with("scale_"))
        .map(|(j, _)| j)
        .collect();
    if scale_dims.is_empty() {
        return Err(Error::validation("multiscale comparison needs wavelet-scale features"));
    }
    let standard: Vec<f64> = (0..f.len()).flat_map(|i| f.to_standard(f.vector(i))).collect();
    let per_scale = |labels: &LabelVolume| -> Vec<Vec<Vec<f64>>> {
        let means = label_means(labels, &standard, f.dim());
        scale_dims
            .iter()
            .map(|&j| means.iter().map(|m| vec![m[j]]).collect())
            .collect()
    };
    let names: Vec<&str> = scale_dims.iter().map(|&j| f.names()[j].as_str()).collect();
    let space = format!("per-scale [{}] (z-score)", names.join(" "));
    Ok(Coverings {
        marginal: per_scale(marginal.labels),
        kmeans: per_scale(wavelet.labels),
        marginal_space: space.clone(),
        kmeans_space: space,
    })
}

fn entropy_at(means: &[Vec<Vec<f64>>], sigma: f64) -> Result<f64> {
    let coverings = means
        .iter()
        .map(|m| GaussianCovering::new(m.clone(), sigma))
        .collect::<Result<Vec<_>>>()?;
    if coverings.len() == 1 {
        renyi_quadratic_covering(&coverings[0])
    } else {
        renyi_quadratic_multiscale(&coverings)
    }
}

/// Compare the two segmentations of `v` by Renyi quadratic entropy at
/// `opts.sigma`, plus a sensitivity table over `opts.sigma_grid`.
pub fn compare_families(
    v: &Volume,
    marginal: MarginalSegmentation<'_>,
    wavelet: WaveletSegmentation<'_>,
    opts: &CompareOptions,
) -> Result<ComparisonReport> {
    let k_marg = marginal.model.map_or(marginal.labels.k(), MixtureModel::k);
    let k_kmeans = wavelet.model.map_or(wavelet.labels.k(), |m| m.k);
    if k_marg < 2 || k_kmeans < 2 {
        return Err(Error::validation(format!(
            "both segmentations need at least 2 clusters (marginal k = {k_marg}, k-means k = {k_kmeans})"
        )));
    }
    if opts.sigma_grid.is_empty() {
        return Err(Error::validation("sigma grid is empty"));
    }
    let cov = build_coverings(v, &marginal, &wavelet, opts.multiscale)?;
    let h_marg = entropy_at(&cov.marginal, opts.sigma).map_err(|e| e.in_stage("marginal covering"))?;
    let h_kmeans = entropy_at(&cov.kmeans, opts.sigma).map_err(|e| e.in_stage("k-means covering"))?;

    let sensitivity = opts
        .sigma_grid
        .iter()
        .map(|&s| {
            let m = entropy_at(&cov.marginal, s)?;
            let k = entropy_at(&cov.kmeans, s)?;
            Ok(SensitivityRow {
                sigma: s,
                marginal: m,
                kmeans: k,
                verdict: Verdict::from_entropies(m, k),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(ComparisonReport {
        config: Vec::new(),
        sigma: opts.sigma,
        multiscale: opts.multiscale,
        marginal: FamilyBlock {
            family: "marginal".into(),
            k: k_marg,
            bic: marginal.bic,
            renyi_quadratic: h_marg,
            space: cov.marginal_space,
            standardized: true,
            clusters: marginal.labels.summary().to_vec(),
        },
        kmeans: FamilyBlock {
            family: "kmeans".into(),
            k: k_kmeans,
            bic: None,
            renyi_quadratic: h_kmeans,
            space: cov.kmeans_space,
            standardized: wavelet.features.is_standardized(),
            clusters: wavelet.labels.summary().to_vec(),
        },
        verdict: Verdict::from_entropies(h_marg, h_kmeans),
        sensitivity,
    })
}

impl ComparisonReport {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in &self.config {
            let _ = writeln!(s, "# {k} = {v}");
        }
        let _ = writeln!(s, "Renyi quadratic entropy comparison (sigma = {})", self.sigma);
        for b in [&self.marginal, &self.kmeans] {
            let _ = writeln!(s);
            let _ = writeln!(s, "[{}]", b.family);
            let _ = writeln!(s, "  k               {}", b.k);
            if let Some(bic) = b.bic {
                let _ = writeln!(s, "  bic             {bic:.6}");
            }
            let _ = writeln!(s, "  renyi_quadratic {:.6}", b.renyi_quadratic);
            let _ = writeln!(s, "  space           {}", b.space);
            let _ = writeln!(s, "  clusters (id, count, mean)");
            for (i, c) in b.clusters.iter().enumerate() {
                let mean: Vec<String> = c.mean.iter().map(|x| format!("{x:.6}")).collect();
                let _ = writeln!(s, "    {i:>3} {:>10} [{}]", c.count, mean.join(", "));
            }
        }
        let _ = writeln!(s);
        let _ = writeln!(s, "verdict: {}", self.verdict.as_str());
        let _ = writeln!(s);
        let _ = writeln!(s, "sigma sensitivity");
        let _ = writeln!(s, "  {:>10} {:>14} {:>14}  verdict", "sigma", "marginal", "kmeans");
        for r in &self.sensitivity {
            let _ = writeln!(
                s,
                "  {:>10} {:>14.6} {:>14.6}  {}",
                r.sigma,
                r.marginal,
                r.kmeans,
                r.verdict.as_str()
            );
        }
        s
    }

    /// Sensitivity table as CSV, `sigma,marginal,kmeans,verdict`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("sigma,marginal,kmeans,verdict\n");
        for r in &self.sensitivity {
            let _ = writeln!(s, "{},{},{},{}", r.sigma, r.marginal, r.kmeans, r.verdict.as_str());
        }
        s
    }

    /// One JSON object per line: config, each family, the verdict, then one
    /// line per sensitivity row.
    pub fn to_json_lines(&self) -> String {
        let mut lines = Vec::new();
        let config: serde_json::Map<String, serde_json::Value> = self
            .config
            .iter()
            .map(|(k, v)| (k.clone(), serde_json::Value::String(v.clone())))
            .collect();
        lines.push(serde_json::json!({"record": "config", "values": config}));
        for b in [&self.marginal, &self.kmeans] {
            let mut v = serde_json::to_value(b).expect("serializable");
            v["record"] = "family".into();
            lines.push(v);
        }
        lines.push(serde_json::json!({
            "record": "verdict",
            "sigma": self.sigma,
            "multiscale": self.multiscale,
            "marginal": self.marginal.renyi_quadratic,
            "kmeans": self.kmeans.renyi_quadratic,
            "verdict": self.verdict,
        }));
        for r in &self.sensitivity {
            let mut v = serde_json::to_value(r).expect("serializable");
            v["record"] = "sensitivity".into();
            lines.push(v);
        }
        lines.iter().map(|l| format!("{l}\n")).collect()
    }
}

/// Everything `compare` needs to run both families from scratch.
#[derive(Debug, Clone)]
pub struct CompareConfig {
    pub k_range: RangeInclusive<usize>,
    /// Force this k for both families (skips the BIC scan).
    pub k: Option<usize>,
    pub scan: ScanOptions,
    pub wavelet: WaveletOptions,
    pub compare: CompareOptions,
}

#[derive(Debug, Clone)]
pub struct CompareRun {
    pub marginal: MarginalResult,
    pub wavelet: WaveletResult,
    pub report: ComparisonReport,
}

/// Run the marginal family, then the wavelet family with the same k, then
/// compare them.
pub fn run_compare(v: &Volume, cfg: &CompareConfig) -> Result<CompareRun> {
    let k_range = match cfg.k {
        Some(k) => k..=k,
        None => cfg.k_range.clone(),
    };
    let marginal = run_marginal_family(v, k_range, cfg.scan)?;
    let wavelet_opts = WaveletOptions {
        k: marginal.k(),
        ..cfg.wavelet
    };
    let wavelet = run_wavelet_family(v, wavelet_opts)?;
    let report = compare_families(
        v,
        MarginalSegmentation {
            model: Some(&marginal.fit.model),
            labels: &marginal.labels,
            bic: Some(marginal.fit.bic),
        },
        WaveletSegmentation {
            model: Some(&wavelet.model),
            features: &wavelet.features,
            labels: &wavelet.labels,
        },
        &cfg.compare,
    )?;
    Ok(CompareRun {
        marginal,
        wavelet,
        report,
    })
}
