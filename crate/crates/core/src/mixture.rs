//! Isotropic Gaussian mixtures: EM fitting on the voxel marginal, BIC model
//! selection, and maximum-posterior labeling.

use std::f64::consts::PI;
use std::ops::RangeInclusive;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::par::chunked_reduce;
use crate::volume::{mean_std, LabelVolume, Volume};

/// Volumes with more voxels than this are fit on a histogram of the marginal.
pub const BINNED_THRESHOLD: usize = 1_000_000;
pub const DEFAULT_BINS: usize = 1024;
pub const DEFAULT_RESTARTS: usize = 5;
pub const DEFAULT_MAX_ITER: usize = 500;
pub const DEFAULT_TOL: f64 = 1e-7;

/// Iterations at the variance floor before a component counts as collapsed.
const FLOOR_PATIENCE: usize = 5;
/// Collapsed components are reseeded at most this many times per component.
const MAX_REINIT_PER_COMPONENT: usize = 10;

/// Isotropic normal density in `x.len()` dimensions.
pub fn gaussian_pdf(x: &[f64], mu: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::validation(format!("sigma must be positive, got {sigma}")));
    }
    if x.len() != mu.len() {
        return Err(Error::validation(format!(
            "dimension mismatch: x has {} entries, mu has {}",
            x.len(),
            mu.len()
        )));
    }
    let m = x.len() as f64;
    let d2: f64 = x.iter().zip(mu).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok((2.0 * PI * sigma * sigma).powf(-m / 2.0) * (-d2 / (2.0 * sigma * sigma)).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Component {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub sigma: f64,
}

/// Weighted isotropic Gaussian components, `V_i = sigma_i^2 I`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MixtureModel {
    pub dim: usize,
    pub components: Vec<Component>,
    pub loglik: f64,
    pub n: usize,
}

impl MixtureModel {
    pub fn k(&self) -> usize {
        self.components.len()
    }

    /// Means of a 1D model.
    pub fn means_1d(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.mean[0]).collect()
    }

    /// Free parameters of a 1D isotropic mixture: k means, k sigmas, k-1 weights.
    pub fn free_params(&self) -> usize {
        free_params_1d(self.k())
    }
}

pub fn free_params_1d(k: usize) -> usize {
    3 * k - 1
}

/// Log-likelihood of 1D data under `model`.
pub fn loglik_1d(data: &[f64], model: &MixtureModel) -> f64 {
    Params::from_model(model).e_step(&Samples::raw(data)).0
}

#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub model: MixtureModel,
    pub bic: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Log-likelihood evaluated at the start of each iteration and at the end.
    pub loglik_trace: Vec<f64>,
    /// Trace positions whose parameters followed a component reseed; the
    /// likelihood may drop across those steps.
    pub reinit_at: Vec<usize>,
    pub reinitializations: usize,
    /// Whether the fit ran on a histogram of the data instead of the raw values.
    pub binned: bool,
}

impl FitReport {
    /// Largest decrease between consecutive trace entries, ignoring steps
    /// that followed a reseed. Zero or negative means monotone.
    pub fn max_loglik_drop(&self) -> f64 {
        let mut worst = f64::NEG_INFINITY;
        for t in 1..self.loglik_trace.len() {
            if self.reinit_at.contains(&t) {
                continue;
            }
            worst = worst.max(self.loglik_trace[t - 1] - self.loglik_trace[t]);
        }
        worst
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub seed: u64,
    pub max_iter: usize,
    /// Relative log-likelihood change below which EM stops.
    pub tol: f64,
}

impl Default for EmOptions {
    fn default() -> Self {
        EmOptions {
            seed: 0,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
        }
    }
}

/// `-loglik + (k_params / 2) ln n`; smaller is better.
pub fn bic(loglik: f64, k_params: usize, n: usize) -> Result<f64> {
    if k_params == 0 || n == 0 {
        return Err(Error::validation(format!(
            "BIC needs k_params >= 1 and n >= 1 (got k_params={k_params}, n={n})"
        )));
    }
    if !loglik.is_finite() {
        return Err(Error::validation("log-likelihood is not finite"));
    }
    Ok(-loglik + 0.5 * k_params as f64 * (n as f64).ln())
}

/// Observations with optional multiplicities (histogram counts).
struct Samples<'a> {
    x: &'a [f64],
    w: Option<&'a [f64]>,
    total: f64,
}

impl<'a> Samples<'a> {
    fn raw(x: &'a [f64]) -> Self {
        Samples {
            x,
            w: None,
            total: x.len() as f64,
        }
    }

    fn weighted(x: &'a [f64], w: &'a [f64]) -> Self {
        Samples {
            x,
            w: Some(w),
            total: w.iter().sum(),
        }
    }

    #[inline]
    fn weight(&self, i: usize) -> f64 {
        self.w.map_or(1.0, |w| w[i])
    }

    /// Index drawn with probability proportional to `weight * score`.
    /// Falls back to weight alone when every score is zero.
    fn draw(&self, rng: &mut ChaCha8Rng, score: impl Fn(usize) -> f64) -> usize {
        let mut total: f64 = (0..self.x.len()).map(|i| self.weight(i) * score(i)).sum();
        let use_score = total > 0.0;
        if !use_score {
            total = self.total;
        }
        let mass = |i: usize| if use_score { self.weight(i) * score(i) } else { self.weight(i) };
        let target = rng.gen::<f64>() * total;
        let mut acc = 0.0;
        for i in 0..self.x.len() {
            acc += mass(i);
            if acc > target {
                return i;
            }
        }
        self.x.len() - 1
    }
}

/// Working 1D parameters.
#[derive(Debug, Clone)]
struct Params {
    weight: Vec<f64>,
    mean: Vec<f64>,
    sigma: Vec<f64>,
}

/// Per-component sufficient statistics: sum r, sum r x, sum r (x - old mean)^2.
#[derive(Debug, Clone, Default)]
struct Stats {
    ll: f64,
    acc: Vec<[f64; 3]>,
}

impl Params {
    fn from_model(model: &MixtureModel) -> Self {
        Params {
            weight: model.components.iter().map(|c| c.weight).collect(),
            mean: model.components.iter().map(|c| c.mean[0]).collect(),
            sigma: model.components.iter().map(|c| c.sigma).collect(),
        }
    }

    fn k(&self) -> usize {
        self.mean.len()
    }

    /// Log-likelihood of the current parameters and the statistics for the
    /// next M-step.
    fn e_step(&self, s: &Samples<'_>) -> (f64, Vec<[f64; 3]>) {
        let k = self.k();
        let log_norm: Vec<f64> = (0..k)
            .map(|i| self.weight[i].ln() - self.sigma[i].ln() - 0.5 * (2.0 * PI).ln())
            .collect();
        let half_prec: Vec<f64> = self.sigma.iter().map(|s| 0.5 / (s * s)).collect();
        let stats: Stats = chunked_reduce(
            s.x,
            1,
            |xs, offset| {
                let mut st = Stats {
                    ll: 0.0,
                    acc: vec![[0.0; 3]; k],
                };
                let mut a = vec![0.0; k];
                for (j, &x) in xs.iter().enumerate() {
                    let wj = s.weight(offset + j);
                    let mut best = f64::NEG_INFINITY;
                    for i in 0..k {
                        let d = x - self.mean[i];
                        a[i] = log_norm[i] - half_prec[i] * d * d;
                        best = best.max(a[i]);
                    }
                    let mut total = 0.0;
                    for ai in a.iter_mut() {
                        *ai = (*ai - best).exp();
                        total += *ai;
                    }
                    st.ll += wj * (best + total.ln());
                    let scale = wj / total;
                    for i in 0..k {
                        let r = a[i] * scale;
                        let d = x - self.mean[i];
                        let acc = &mut st.acc[i];
                        acc[0] += r;
                        acc[1] += r * x;
                        acc[2] += r * d * d;
                    }
                }
                st
            },
            |acc, part| {
                if acc.acc.is_empty() {
                    *acc = part;
                } else {
                    acc.ll += part.ll;
                    for (a, p) in acc.acc.iter_mut().zip(&part.acc) {
                        for c in 0..3 {
                            a[c] += p[c];
                        }
                    }
                }
            },
        );
        let acc = if stats.acc.is_empty() {
            vec![[0.0; 3]; k]
        } else {
            stats.acc
        };
        (stats.ll, acc)
    }

    fn m_step(&mut self, acc: &[[f64; 3]], total: f64, floor: f64) {
        for (i, a) in acc.iter().enumerate() {
            let r = a[0];
            self.weight[i] = r / total;
            if r > 0.0 {
                let new_mean = a[1] / r;
                let shift = new_mean - self.mean[i];
                let var = (a[2] / r - shift * shift).max(0.0);
                self.mean[i] = new_mean;
                self.sigma[i] = var.sqrt().max(floor);
            }
        }
    }
}

/// Variance floor: a millionth of the data standard deviation, or of the
/// data magnitude when the data are constant.
fn sigma_floor(s: &Samples<'_>) -> f64 {
    let (mean, sd) = weighted_mean_std(s);
    if sd > 0.0 {
        1e-6 * sd
    } else {
        1e-6 * mean.abs().max(1.0)
    }
}

fn weighted_mean_std(s: &Samples<'_>) -> (f64, f64) {
    if s.w.is_none() {
        return mean_std(s.x);
    }
    let mean = (0..s.x.len()).map(|i| s.weight(i) * s.x[i]).sum::<f64>() / s.total;
    let var = (0..s.x.len())
        .map(|i| s.weight(i) * (s.x[i] - mean).powi(2))
        .sum::<f64>()
        / s.total;
    (mean, var.sqrt())
}

/// k-means++ seeds followed by one hard-assignment M-step.
fn initialize(s: &Samples<'_>, k: usize, rng: &mut ChaCha8Rng, floor: f64) -> Params {
    let mut seeds = Vec::with_capacity(k);
    seeds.push(s.x[s.draw(rng, |_| 1.0)]);
    let mut d2: Vec<f64> = s.x.iter().map(|x| (x - seeds[0]).powi(2)).collect();
    while seeds.len() < k {
        let c = s.x[s.draw(rng, |i| d2[i])];
        seeds.push(c);
        for (d, x) in d2.iter_mut().zip(s.x) {
            *d = d.min((x - c).powi(2));
        }
    }

    let mut acc = vec![[0.0f64; 3]; k];
    for (i, &x) in s.x.iter().enumerate() {
        let mut best = 0;
        for j in 1..k {
            if (x - seeds[j]).abs() < (x - seeds[best]).abs() {
                best = j;
            }
        }
        let w = s.weight(i);
        acc[best][0] += w;
        acc[best][1] += w * x;
        acc[best][2] += w * x * x;
    }
    let (_, sd) = weighted_mean_std(s);
    let spread = sd.max(floor);
    let mut p = Params {
        weight: vec![0.0; k],
        mean: seeds,
        sigma: vec![spread; k],
    };
    for (i, a) in acc.iter().enumerate() {
        if a[0] > 0.0 {
            let m = a[1] / a[0];
            p.mean[i] = m;
            p.sigma[i] = (a[2] / a[0] - m * m).max(0.0).sqrt().max(floor);
            p.weight[i] = a[0] / s.total;
        } else {
            p.weight[i] = 1.0 / s.total;
        }
    }
    normalize(&mut p.weight);
    p
}

fn normalize(w: &mut [f64]) {
    let t: f64 = w.iter().sum();
    for x in w {
        *x /= t;
    }
}

fn check_fit_inputs(n_obs: usize, k: usize) -> Result<()> {
    if k == 0 {
        return Err(Error::validation("number of components must be at least 1"));
    }
    if n_obs <= 3 * k {
        return Err(Error::validation(format!(
            "{k} components need more than {} observations, got {n_obs}",
            3 * k
        )));
    }
    Ok(())
}

fn check_finite(data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(Error::NonFinite(i)),
        None => Ok(()),
    }
}

/// Fit a `k`-component 1D mixture to raw observations by EM.
pub fn fit_gmm_em(data: &[f64], k: usize, opts: EmOptions) -> Result<FitReport> {
    check_fit_inputs(data.len(), k)?;
    check_finite(data)?;
    run_em(&Samples::raw(data), data.len(), k, opts, false)
}

/// Weighted EM on a `bins`-bin histogram of `data`: each nonempty bin is one
/// observation at its center with multiplicity equal to its count. An
/// approximation for very large marginals.
pub fn fit_gmm_em_binned(data: &[f64], k: usize, bins: usize, opts: EmOptions) -> Result<FitReport> {
    check_fit_inputs(data.len(), k)?;
    check_finite(data)?;
    let (centers, counts) = bin_marginal(data, bins)?;
    if counts.len() <= k {
        // Too few distinct bins to constrain k components; fall back.
        return fit_gmm_em(data, k, opts);
    }
    let (_, raw_sd) = mean_std(data);
    let mut report = run_em(
        &Samples::weighted(&centers, &counts),
        data.len(),
        k,
        opts,
        true,
    )?;
    // Floor relative to the raw spread rather than the binned one.
    let floor = if raw_sd > 0.0 { 1e-6 * raw_sd } else { 0.0 };
    for c in &mut report.model.components {
        c.sigma = c.sigma.max(floor);
    }
    Ok(report)
}

/// Nonempty bin centers and counts over `[min, max]`.
fn bin_marginal(data: &[f64], bins: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if bins == 0 {
        return Err(Error::validation("bin count must be positive"));
    }
    let (lo, hi) = data
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(l, h), &x| (l.min(x), h.max(x)));
    if hi == lo {
        return Ok((vec![lo], vec![data.len() as f64]));
    }
    let width = (hi - lo) / bins as f64;
    let mut counts = vec![0.0; bins];
    for &x in data {
        let b = (((x - lo) / width) as usize).min(bins - 1);
        counts[b] += 1.0;
    }
    let (centers, counts): (Vec<f64>, Vec<f64>) = counts
        .into_iter()
        .enumerate()
        .filter(|(_, c)| *c > 0.0)
        .map(|(b, c)| (lo + (b as f64 + 0.5) * width, c))
        .unzip();
    Ok((centers, counts))
}

fn run_em(s: &Samples<'_>, n: usize, k: usize, opts: EmOptions, binned: bool) -> Result<FitReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let floor = sigma_floor(s);
    let (_, data_sd) = weighted_mean_std(s);
    let can_reseed = k > 1 && data_sd > 0.0;

    let mut p = initialize(s, k, &mut rng, floor);
    let mut trace: Vec<f64> = Vec::new();
    let mut reinit_at = Vec::new();
    let mut at_floor = vec![0usize; k];
    let mut reseeds = vec![0usize; k];
    let mut iterations = 0;
    let mut converged = false;
    let mut just_reseeded = false;

    loop {
        let (ll, acc) = p.e_step(s);
        if !ll.is_finite() {
            return Err(Error::validation(format!(
                "log-likelihood became non-finite after {iterations} iterations"
            )));
        }
        if let Some(&prev) = trace.last() {
            if !just_reseeded && (ll - prev).abs() < opts.tol * prev.abs() {
                trace.push(ll);
                converged = true;
                break;
            }
        }
        trace.push(ll);
        if iterations >= opts.max_iter {
            break;
        }
        p.m_step(&acc, s.total, floor);
        iterations += 1;

        just_reseeded = false;
        if can_reseed {
            for i in 0..k {
                at_floor[i] = if p.sigma[i] <= floor { at_floor[i] + 1 } else { 0 };
                let starved = p.weight[i] < 1.0 / n as f64;
                let collapsed = at_floor[i] >= FLOOR_PATIENCE;
                if (starved || collapsed) && reseeds[i] < MAX_REINIT_PER_COMPONENT {
                    p.mean[i] = s.x[s.draw(&mut rng, |_| 1.0)];
                    p.sigma[i] = data_sd;
                    p.weight[i] = 1.0 / k as f64;
                    normalize(&mut p.weight);
                    at_floor[i] = 0;
                    reseeds[i] += 1;
                    just_reseeded = true;
                }
            }
            if just_reseeded {
                reinit_at.push(trace.len());
            }
        }
    }

    let loglik = *trace.last().expect("at least one E-step");
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| p.mean[a].total_cmp(&p.mean[b]));
    let components = order
        .iter()
        .map(|&i| Component {
            weight: p.weight[i],
            mean: vec![p.mean[i]],
            sigma: p.sigma[i],
        })
        .collect();
    let model = MixtureModel {
        dim: 1,
        components,
        loglik,
        n,
    };
    let bic = bic(loglik, model.free_params(), n)?;
    Ok(FitReport {
        model,
        bic,
        iterations,
        converged,
        loglik_trace: trace,
        reinit_at,
        reinitializations: reseeds.iter().sum(),
        binned,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScanOptions {
    pub seed: u64,
    pub restarts: usize,
    pub max_iter: usize,
    pub tol: f64,
    /// Fit on a histogram with this many bins instead of the raw values.
    pub bins: Option<usize>,
}

impl Default for ScanOptions {
    fn default() -> Self {
        ScanOptions {
            seed: 0,
            restarts: DEFAULT_RESTARTS,
            max_iter: DEFAULT_MAX_ITER,
            tol: DEFAULT_TOL,
            bins: None,
        }
    }
}

/// Seed for restart `r` of the `k`-component fit.
pub(crate) fn derive_seed(seed: u64, k: usize, r: usize) -> u64 {
    // splitmix64 finalizer over the packed inputs
    let mut z = seed ^ ((k as u64) << 32) ^ (r as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Best-of-`restarts` fit (by log-likelihood) of a `k`-component model.
pub fn fit_best_of(data: &[f64], k: usize, opts: ScanOptions) -> Result<FitReport> {
    let mut best: Option<FitReport> = None;
    for r in 0..opts.restarts.max(1) {
        let em = EmOptions {
            seed: derive_seed(opts.seed, k, r),
            max_iter: opts.max_iter,
            tol: opts.tol,
        };
        let report = match opts.bins {
            Some(b) => fit_gmm_em_binned(data, k, b, em)?,
            None => fit_gmm_em(data, k, em)?,
        };
        if best
            .as_ref()
            .map_or(true, |b| report.model.loglik > b.model.loglik)
        {
            best = Some(report);
        }
    }
    Ok(best.expect("at least one restart"))
}

#[derive(Debug, Clone, Serialize)]
pub struct ScanResult {
    pub fits: Vec<(usize, FitReport)>,
    pub selected_k: usize,
}

impl ScanResult {
    pub fn selected(&self) -> &FitReport {
        &self
            .fits
            .iter()
            .find(|(k, _)| *k == self.selected_k)
            .expect("selected k is in the scan")
            .1
    }

    /// `k,loglik,bic,converged` table, one row per scanned k.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("k,loglik,bic,converged\n");
        for (k, r) in &self.fits {
            out.push_str(&format!("{k},{},{},{}\n", r.model.loglik, r.bic, r.converged));
        }
        out
    }
}

/// Fit every k in `k_range` and select the one with the smallest BIC
/// (ties go to the smaller k).
pub fn bic_scan(data: &[f64], k_range: RangeInclusive<usize>, opts: ScanOptions) -> Result<ScanResult> {
    if k_range.is_empty() {
        return Err(Error::validation("k range is empty"));
    }
    let mut fits = Vec::new();
    for k in k_range {
        let report = fit_best_of(data, k, opts).map_err(|e| e.in_stage(format!("k = {k}")))?;
        fits.push((k, report));
    }
    let selected_k = fits
        .iter()
        .fold(None::<(usize, f64)>, |best, (k, r)| match best {
            Some((_, b)) if r.bic >= b => best,
            _ => Some((*k, r.bic)),
        })
        .expect("nonempty scan")
        .0;
    Ok(ScanResult { fits, selected_k })
}

/// Label each voxel with the component maximizing `weight * density`.
/// Components are taken in ascending-mean order, so label 0 is the darkest
/// class; exact ties go to the lower-mean component.
pub fn label_by_posterior(v: &Volume, model: &MixtureModel) -> Result<LabelVolume> {
    if model.dim != 1 {
        return Err(Error::validation(format!(
            "posterior labeling needs a 1D model, got dimension {}",
            model.dim
        )));
    }
    let k = model.k();
    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| {
        model.components[a].mean[0]
            .total_cmp(&model.components[b].mean[0])
            .then(a.cmp(&b))
    });
    let comps: Vec<(f64, f64, f64)> = order
        .iter()
        .map(|&i| {
            let c = &model.components[i];
            (c.weight.ln() - c.sigma.ln(), c.mean[0], 0.5 / (c.sigma * c.sigma))
        })
        .collect();

    let labels: Vec<u16> = v
        .data()
        .iter()
        .map(|&x| {
            let mut best = 0;
            let mut best_score = f64::NEG_INFINITY;
            for (i, &(lw, mu, hp)) in comps.iter().enumerate() {
                let score = lw - hp * (x - mu) * (x - mu);
                if score > best_score {
                    best_score = score;
                    best = i;
                }
            }
            best as u16
        })
        .collect();

    let provisional = LabelVolume::new(v.dims(), labels, k, Vec::new())?;
    let means = provisional
        .cluster_means(v.data())
        .into_iter()
        .zip(&comps)
        .map(|(m, c)| vec![m.unwrap_or(c.1)])
        .collect();
    LabelVolume::new(v.dims(), provisional.labels().to_vec(), k, means)
}
