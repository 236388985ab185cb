//! Entropy and information measures, all in nats.
//!
//! Histogram (Shannon) entropy, the positive-image entropies of Burg,
//! Frieden and Gull-Skilling, the multiscale wavelet information, and the
//! closed-form Renyi quadratic entropy of a Gaussian covering.

use std::f64::consts::PI;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::starlet::{ScaleNoise, WaveletDecomposition};

/// Counts over `N_b` bins with strictly increasing edges.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    counts: Vec<u64>,
    edges: Vec<f64>,
    total: u64,
}

impl Histogram {
    pub fn from_counts(counts: Vec<u64>, edges: Vec<f64>) -> Result<Self> {
        if counts.is_empty() {
            return Err(Error::validation("histogram needs at least one bin"));
        }
        if edges.len() != counts.len() + 1 {
            return Err(Error::validation(format!(
                "{} bins need {} edges, got {}",
                counts.len(),
                counts.len() + 1,
                edges.len()
            )));
        }
        if edges.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::validation("histogram edges must be strictly increasing"));
        }
        let total = counts.iter().sum();
        Ok(Histogram {
            counts,
            edges,
            total,
        })
    }

    /// Unit-width bins `[i, i + 1)`.
    pub fn from_raw_counts(counts: Vec<u64>) -> Result<Self> {
        let edges = (0..=counts.len()).map(|i| i as f64).collect();
        Self::from_counts(counts, edges)
    }

    /// `bins` equal-width bins spanning the data range.
    pub fn from_data(data: &[f64], bins: usize) -> Result<Self> {
        if bins == 0 {
            return Err(Error::validation("bin count must be positive"));
        }
        if data.is_empty() {
            return Err(Error::validation("cannot histogram empty data"));
        }
        let (lo, hi) = data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
        if !(lo.is_finite() && hi.is_finite()) {
            return Err(Error::validation("data contain non-finite values"));
        }
        let hi = if hi > lo { hi } else { lo + 1.0 };
        let width = (hi - lo) / bins as f64;
        let mut counts = vec![0u64; bins];
        for &x in data {
            let b = (((x - lo) / width) as usize).min(bins - 1);
            counts[b] += 1;
        }
        let edges = (0..=bins).map(|i| lo + i as f64 * width).collect();
        Self::from_counts(counts, edges)
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn edges(&self) -> &[f64] {
        &self.edges
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    pub fn num_bins(&self) -> usize {
        self.counts.len()
    }

    pub fn probabilities(&self) -> Vec<f64> {
        let n = self.total as f64;
        self.counts.iter().map(|&c| c as f64 / n).collect()
    }
}

/// `-sum p_k ln p_k` over nonempty bins.
pub fn shannon_entropy(h: &Histogram) -> Result<f64> {
    if h.total == 0 {
        return Err(Error::validation("histogram is empty"));
    }
    let n = h.total as f64;
    Ok(-h
        .counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / n;
            p * p.ln()
        })
        .sum::<f64>())
}

fn check_positive(name: &str, g: &[f64]) -> Result<()> {
    match g.iter().position(|&x| !(x > 0.0 && x.is_finite())) {
        Some(i) => Err(Error::validation(format!(
            "{name}: entry {i} is {} but must be positive",
            g[i]
        ))),
        None => Ok(()),
    }
}

/// Burg entropy `-sum ln g_k`.
pub fn burg_entropy(g: &[f64]) -> Result<f64> {
    check_positive("burg", g)?;
    Ok(-g.iter().map(|x| x.ln()).sum::<f64>())
}

/// Frieden entropy `-sum g_k ln g_k`.
pub fn frieden_entropy(g: &[f64]) -> Result<f64> {
    check_positive("frieden", g)?;
    Ok(-g.iter().map(|x| x * x.ln()).sum::<f64>())
}

/// Gull-Skilling entropy `sum (g_k - M_k - g_k ln(g_k / M_k))` against a
/// model image `M`, usually flat. Never positive; zero iff `g = M`.
pub fn gull_skilling_entropy(g: &[f64], model: &[f64]) -> Result<f64> {
    if g.len() != model.len() {
        return Err(Error::validation(format!(
            "image has {} entries but model has {}",
            g.len(),
            model.len()
        )));
    }
    check_positive("gull-skilling image", g)?;
    check_positive("gull-skilling model", model)?;
    Ok(g.iter()
        .zip(model)
        .map(|(&gk, &mk)| gk - mk - gk * (gk / mk).ln())
        .sum())
}

/// Multiscale information `sum_j sum_k w_{j,k}^2 / (2 sigma_j^2)` over the
/// wavelet scales (the continuum carries no information term).
pub fn wavelet_information(d: &WaveletDecomposition, noise: &ScaleNoise) -> Result<f64> {
    if noise.sigma.len() != d.num_scales() {
        return Err(Error::validation(format!(
            "{} noise levels for {} wavelet scales",
            noise.sigma.len(),
            d.num_scales()
        )));
    }
    if let Some(&j) = noise.degenerate_scales().first() {
        return Err(Error::validation(format!(
            "noise level of scale {} is {}; must be positive",
            j + 1,
            noise.sigma[j]
        )));
    }
    Ok(d.scales()
        .iter()
        .zip(&noise.sigma)
        .map(|(w, s)| w.data().iter().map(|x| x * x).sum::<f64>() / (2.0 * s * s))
        .sum())
}

/// `ln` of [`gauss_cross_term`], finite for any separation.
pub fn log_gauss_cross_term(mu_i: &[f64], mu_j: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    if mu_i.len() != mu_j.len() {
        return Err(Error::validation(format!(
            "means have different dimensions ({} and {})",
            mu_i.len(),
            mu_j.len()
        )));
    }
    let m = mu_i.len() as f64;
    let d2: f64 = mu_i.iter().zip(mu_j).map(|(a, b)| (a - b) * (a - b)).sum();
    let v = 2.0 * sigma * sigma;
    Ok(-0.5 * m * (2.0 * PI * v).ln() - d2 / (2.0 * v))
}

/// Overlap integral of two isotropic Gaussians with common `sigma`:
/// the normal density with variance `2 sigma^2` per axis at `mu_i - mu_j`,
/// `(4 pi sigma^2)^(-m/2) exp(-|mu_i - mu_j|^2 / (4 sigma^2))`.
pub fn gauss_cross_term(mu_i: &[f64], mu_j: &[f64], sigma: f64) -> Result<f64> {
    log_gauss_cross_term(mu_i, mu_j, sigma).map(f64::exp)
}

/// Component means sharing one isotropic scale.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GaussianCovering {
    dim: usize,
    means: Vec<Vec<f64>>,
    sigma: f64,
    weights: Vec<f64>,
}

impl GaussianCovering {
    /// Equiweighted covering (all weights 1).
    pub fn new(means: Vec<Vec<f64>>, sigma: f64) -> Result<Self> {
        let k = means.len();
        Self::weighted(means, sigma, vec![1.0; k])
    }

    pub fn weighted(means: Vec<Vec<f64>>, sigma: f64, weights: Vec<f64>) -> Result<Self> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
        }
        let dim = means.first().map_or(0, Vec::len);
        if dim == 0 {
            return Err(Error::validation("covering needs at least one nonempty mean"));
        }
        if means.iter().any(|m| m.len() != dim) {
            return Err(Error::validation("covering means have inconsistent dimensions"));
        }
        if means.iter().flatten().any(|x| !x.is_finite()) {
            return Err(Error::validation("covering means must be finite"));
        }
        if weights.len() != means.len() {
            return Err(Error::validation(format!(
                "{} weights for {} means",
                weights.len(),
                means.len()
            )));
        }
        if weights.iter().any(|&w| !(w > 0.0 && w.is_finite())) {
            return Err(Error::validation("covering weights must be positive"));
        }
        Ok(GaussianCovering {
            dim,
            means,
            sigma,
            weights,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn k(&self) -> usize {
        self.means.len()
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Same means and weights at a different scale.
    pub fn with_sigma(&self, sigma: f64) -> Result<Self> {
        Self::weighted(self.means.clone(), sigma, self.weights.clone())
    }

    fn log_pair_terms(&self, include_diagonal: bool) -> Vec<f64> {
        let k = self.k();
        let mut terms = Vec::with_capacity(k * k);
        for i in 0..k {
            for j in 0..k {
                if i == j && !include_diagonal {
                    continue;
                }
                let t = log_gauss_cross_term(&self.means[i], &self.means[j], self.sigma)
                    .expect("covering validated at construction");
                terms.push(self.weights[i].ln() + self.weights[j].ln() + t);
            }
        }
        terms
    }
}

fn log_sum_exp(terms: &[f64]) -> f64 {
    let max = terms.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + terms.iter().map(|t| (t - max).exp()).sum::<f64>().ln()
}

/// Quadratic Renyi entropy of a covering from distinct-pair interactions:
/// `-ln sum_{i != j} w_i w_j G(mu_i - mu_j; 0, 2 sigma^2 I)`, summed over
/// ordered pairs. Evaluated in the log domain so widely separated means do
/// not underflow.
pub fn renyi_quadratic_covering(c: &GaussianCovering) -> Result<f64> {
    if c.k() < 2 {
        return Err(Error::validation(format!(
            "pairwise entropy needs at least 2 means, got {}",
            c.k()
        )));
    }
    Ok(-log_sum_exp(&c.log_pair_terms(false)))
}

/// `-ln integral f^2` for the unnormalized mixture `f = sum w_i N(mu_i, sigma^2 I)`,
/// i.e. the pair sum including the `i = j` terms.
pub fn renyi_quadratic_full(c: &GaussianCovering) -> f64 {
    -log_sum_exp(&c.log_pair_terms(true))
}

/// Sum of per-covering entropies (one covering per wavelet scale).
pub fn renyi_quadratic_multiscale(coverings: &[GaussianCovering]) -> Result<f64> {
    if coverings.is_empty() {
        return Err(Error::validation("multiscale entropy needs at least one covering"));
    }
    coverings
        .iter()
        .enumerate()
        .map(|(s, c)| renyi_quadratic_covering(c).map_err(|e| e.in_stage(format!("scale {}", s + 1))))
        .sum()
}

/// Named entropy values with the parameters that produced them.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct EntropyReport {
    pub shannon: Option<f64>,
    pub burg: Option<f64>,
    pub frieden: Option<f64>,
    pub gull_skilling: Option<f64>,
    pub wavelet_information: Option<f64>,
    pub renyi_quadratic: Option<f64>,
    pub sigma: Option<f64>,
    pub bins: Option<usize>,
    /// Description of the Gull-Skilling model image, e.g. `flat:<level>`.
    pub model: Option<String>,
    pub scales: Option<usize>,
}

impl EntropyReport {
    fn fields(&self) -> Vec<(&'static str, String)> {
        fn opt<T: ToString>(v: &Option<T>) -> String {
            v.as_ref().map(ToString::to_string).unwrap_or_default()
        }
        vec![
            ("shannon", opt(&self.shannon)),
            ("burg", opt(&self.burg)),
            ("frieden", opt(&self.frieden)),
            ("gull_skilling", opt(&self.gull_skilling)),
            ("wavelet_information", opt(&self.wavelet_information)),
            ("renyi_quadratic", opt(&self.renyi_quadratic)),
            ("sigma", opt(&self.sigma)),
            ("bins", opt(&self.bins)),
            ("model", opt(&self.model)),
            ("scales", opt(&self.scales)),
        ]
    }

    /// `key=value` lines for every present entry.
    pub fn to_key_values(&self) -> String {
        self.fields()
            .into_iter()
            .filter(|(_, v)| !v.is_empty())
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn csv_header() -> String {
        EntropyReport::default()
            .fields()
            .iter()
            .map(|(k, _)| *k)
            .collect::<Vec<_>>()
            .join(",")
    }

    /// One CSV row in [`csv_header`](Self::csv_header) order; absent values are empty.
    pub fn to_csv_row(&self) -> String {
        self.fields()
            .into_iter()
            .map(|(_, v)| v)
            .collect::<Vec<_>>()
            .join(",")
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::starlet::WaveletDecomposition;
    use crate::volume::{Dims, Volume};

    #[test]
    fn shannon_cases() {
        let h = Histogram::from_raw_counts(vec![0, 10, 0]).unwrap();
        assert_eq!(shannon_entropy(&h).unwrap(), 0.0);
        let h = Histogram::from_raw_counts(vec![50, 50]).unwrap();
        assert!((shannon_entropy(&h).unwrap() - 2f64.ln()).abs() < 1e-15);
        let h = Histogram::from_raw_counts(vec![75, 25]).unwrap();
        let expect = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln());
        assert!((shannon_entropy(&h).unwrap() - expect).abs() < 1e-15);
        assert!((expect - 0.562335).abs() < 1e-6);
        assert!(shannon_entropy(&Histogram::from_raw_counts(vec![0, 0]).unwrap()).is_err());
    }

    #[test]
    fn histogram_validation() {
        assert!(Histogram::from_counts(vec![1, 2], vec![0.0, 1.0]).is_err());
        assert!(Histogram::from_counts(vec![1, 2], vec![0.0, 1.0, 1.0]).is_err());
        let h = Histogram::from_data(&[0.0, 0.5, 1.0, 1.0], 2).unwrap();
        assert_eq!(h.counts(), &[1, 3]);
        assert_eq!(h.total(), 4);
        let h = Histogram::from_data(&[2.0; 5], 4).unwrap();
        assert_eq!(h.counts(), &[5, 0, 0, 0]);
    }

    #[test]
    fn burg_frieden_cases() {
        let e = std::f64::consts::E;
        assert_eq!(burg_entropy(&[1.0, 1.0, 1.0]).unwrap(), 0.0);
        assert!((burg_entropy(&[e, e]).unwrap() + 2.0).abs() < 1e-15);
        assert!(burg_entropy(&[2.0, 0.5]).unwrap().abs() < 1e-15);
        assert!(burg_entropy(&[1.0, 0.0]).is_err());
        assert_eq!(frieden_entropy(&[1.0, 1.0]).unwrap(), 0.0);
        assert!((frieden_entropy(&[e]).unwrap() + e).abs() < 1e-15);
        assert!((frieden_entropy(&[0.5, 0.5]).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(frieden_entropy(&[-1.0]).is_err());
    }

    #[test]
    fn gull_skilling_cases() {
        assert_eq!(gull_skilling_entropy(&[3.0, 0.2], &[3.0, 0.2]).unwrap(), 0.0);
        let v = gull_skilling_entropy(&[2.0], &[1.0]).unwrap();
        assert!((v - (1.0 - 2.0 * 2f64.ln())).abs() < 1e-15);
        assert!((v + 0.386294).abs() < 1e-6);
        assert!(gull_skilling_entropy(&[1.0], &[1.0, 2.0]).is_err());
        assert!(gull_skilling_entropy(&[1.0], &[0.0]).is_err());
    }

    #[test]
    fn wavelet_information_cases() {
        let dims = Dims::new(3, 1, 1);
        let zero = Volume::filled(dims, 0.0).unwrap();
        let d = WaveletDecomposition::new(vec![zero.clone()], zero.clone()).unwrap();
        let noise = ScaleNoise::new(vec![1.0]);
        assert_eq!(wavelet_information(&d, &noise).unwrap(), 0.0);

        let w = Volume::new(dims, vec![0.0, 2.0, 0.0]).unwrap();
        let d = WaveletDecomposition::new(vec![w], zero).unwrap();
        assert_eq!(wavelet_information(&d, &noise).unwrap(), 2.0);
        assert!(wavelet_information(&d, &ScaleNoise::new(vec![0.0])).is_err());
        assert!(wavelet_information(&d, &ScaleNoise::new(vec![1.0, 1.0])).is_err());
    }

    #[test]
    fn cross_term_cases() {
        let v = gauss_cross_term(&[0.0], &[0.0], 1.0).unwrap();
        assert!((v - 1.0 / (2.0 * PI.sqrt())).abs() < 1e-15);
        let v = gauss_cross_term(&[1.0, 1.0], &[1.0, 1.0], 1.0).unwrap();
        assert!((v - 1.0 / (4.0 * PI)).abs() < 1e-15);
        let a = gauss_cross_term(&[0.3, -1.0], &[2.0, 0.5], 0.7).unwrap();
        let b = gauss_cross_term(&[2.0, 0.5], &[0.3, -1.0], 0.7).unwrap();
        assert_eq!(a, b);
        assert!(gauss_cross_term(&[0.0], &[0.0], 0.0).is_err());
        assert!(gauss_cross_term(&[0.0], &[0.0, 1.0], 1.0).is_err());
    }

    #[test]
    fn renyi_cases() {
        let c = GaussianCovering::new(vec![vec![0.0], vec![0.0]], 1.0).unwrap();
        let h = renyi_quadratic_covering(&c).unwrap();
        assert!((h - PI.sqrt().ln()).abs() < 1e-12);
        assert!((h - 0.572365).abs() < 1e-6);
        // Including the diagonal doubles the pair sum.
        assert!((renyi_quadratic_full(&c) - (h - 2f64.ln())).abs() < 1e-12);

        let single = GaussianCovering::new(vec![vec![0.0]], 1.0).unwrap();
        assert!(renyi_quadratic_covering(&single).is_err());

        let coincident = GaussianCovering::new(vec![vec![1.0]; 3], 1.0).unwrap();
        let spread = GaussianCovering::new(vec![vec![0.0], vec![1.0], vec![2.0]], 1.0).unwrap();
        assert!(
            renyi_quadratic_covering(&coincident).unwrap()
                < renyi_quadratic_covering(&spread).unwrap()
        );
    }

    #[test]
    fn renyi_survives_extreme_separation() {
        let c = GaussianCovering::new(vec![vec![0.0], vec![1e4]], 0.1).unwrap();
        let h = renyi_quadratic_covering(&c).unwrap();
        assert!(h.is_finite());
        let expected = 0.5 * (4.0 * PI * 0.01f64).ln() + 1e8 / (4.0 * 0.01) - 2f64.ln();
        assert!((h - expected).abs() < 1e-6 * expected);
    }

    #[test]
    fn multiscale_is_additive() {
        let c = GaussianCovering::new(vec![vec![0.0], vec![1.5], vec![-0.5]], 0.8).unwrap();
        let one = renyi_quadratic_covering(&c).unwrap();
        assert_eq!(renyi_quadratic_multiscale(std::slice::from_ref(&c)).unwrap(), one);
        assert_eq!(renyi_quadratic_multiscale(&[c.clone(), c]).unwrap(), 2.0 * one);
        assert!(renyi_quadratic_multiscale(&[]).is_err());
    }

    #[test]
    fn covering_validation() {
        assert!(GaussianCovering::new(vec![vec![0.0], vec![0.0, 1.0]], 1.0).is_err());
        assert!(GaussianCovering::new(vec![vec![0.0], vec![f64::NAN]], 1.0).is_err());
        assert!(GaussianCovering::new(vec![vec![0.0]], -1.0).is_err());
        assert!(GaussianCovering::weighted(vec![vec![0.0]], 1.0, vec![0.0]).is_err());
    }

    #[test]
    fn report_serialization() {
        let r = EntropyReport {
            shannon: Some(0.5),
            renyi_quadratic: Some(1.25),
            sigma: Some(1.0),
            ..Default::default()
        };
        assert_eq!(r.to_key_values(), "shannon=0.5\nrenyi_quadratic=1.25\nsigma=1\n");
        assert_eq!(
            EntropyReport::csv_header(),
            "shannon,burg,frieden,gull_skilling,wavelet_information,renyi_quadratic,sigma,bins,model,scales"
        );
        assert_eq!(r.to_csv_row(), "0.5,,,,,1.25,1,,,");
    }
}
