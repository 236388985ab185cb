//! Generalized Gaussian density and deterministic synthetic volumes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::volume::{Dims, Volume};

/// Generalized Gaussian parameters: `alpha` is the scale, `beta` the shape
/// (2 is Gaussian, 1 is Laplace, below 2 heavy-tailed).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GgdParams {
    alpha: f64,
    beta: f64,
}

impl GgdParams {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite() && beta > 0.0 && beta.is_finite()) {
            return Err(Error::validation(format!(
                "GGD parameters must be positive and finite, got alpha={alpha}, beta={beta}"
            )));
        }
        Ok(GgdParams { alpha, beta })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }
}

/// `beta / (2 alpha Gamma(1/beta)) * exp(-(|x|/alpha)^beta)`.
pub fn ggd_density(x: f64, p: GgdParams) -> f64 {
    let norm = p.beta / (2.0 * p.alpha * libm::tgamma(1.0 / p.beta));
    norm * (-(x.abs() / p.alpha).powf(p.beta)).exp()
}

/// One component of a 1D generating mixture. `sigma` may be zero here
/// (a point mass), unlike in fitted models.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixtureComponent {
    pub weight: f64,
    pub mean: f64,
    pub sigma: f64,
}

impl MixtureComponent {
    pub fn new(weight: f64, mean: f64, sigma: f64) -> Self {
        MixtureComponent {
            weight,
            mean,
            sigma,
        }
    }
}

fn validate_components(components: &[MixtureComponent]) -> Result<()> {
    if components.is_empty() {
        return Err(Error::validation("at least one mixture component required"));
    }
    for (i, c) in components.iter().enumerate() {
        if !(c.weight > 0.0) || !c.mean.is_finite() || !(c.sigma >= 0.0) || !c.sigma.is_finite()
        {
            return Err(Error::validation(format!(
                "component {i}: weight must be positive and sigma nonnegative (got {c:?})"
            )));
        }
    }
    let total: f64 = components.iter().map(|c| c.weight).sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "component weights must sum to 1, got {total}"
        )));
    }
    Ok(())
}

/// Draw `n` i.i.d. samples from the mixture, returning values and the index
/// of the component each was drawn from.
pub fn sample_mixture(
    n: usize,
    components: &[MixtureComponent],
    seed: u64,
) -> Result<(Vec<f64>, Vec<usize>)> {
    validate_components(components)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut values = Vec::with_capacity(n);
    let mut which = Vec::with_capacity(n);
    for _ in 0..n {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut idx = components.len() - 1;
        for (i, c) in components.iter().enumerate() {
            acc += c.weight;
            if u < acc {
                idx = i;
                break;
            }
        }
        let c = components[idx];
        let z: f64 = rng.sample(StandardNormal);
        values.push(c.mean + c.sigma * z);
        which.push(idx);
    }
    Ok((values, which))
}

/// Volume whose voxels are i.i.d. draws from a 1D Gaussian mixture.
pub fn synth_mixture_volume(dims: Dims, components: &[MixtureComponent], seed: u64) -> Result<Volume> {
    synth_mixture_labeled(dims, components, seed).map(|(v, _)| v)
}

/// As [`synth_mixture_volume`], also returning each voxel's generating component.
pub fn synth_mixture_labeled(
    dims: Dims,
    components: &[MixtureComponent],
    seed: u64,
) -> Result<(Volume, Vec<usize>)> {
    let (values, which) = sample_mixture(dims.len(), components, seed)?;
    Ok((Volume::new(dims, values)?, which))
}

/// Two half-volumes split along x (`x < nx/2` is `low`, the rest `high`),
/// plus i.i.d. Gaussian noise. Returns the volume and the region of each voxel.
pub fn synth_two_region_volume(
    dims: Dims,
    low: f64,
    high: f64,
    noise_sigma: f64,
    seed: u64,
) -> Result<(Volume, Vec<usize>)> {
    if !(noise_sigma >= 0.0) {
        return Err(Error::validation("noise sigma must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(dims.len());
    let mut region = Vec::with_capacity(dims.len());
    for _z in 0..dims.nz {
        for _y in 0..dims.ny {
            for x in 0..dims.nx {
                let r = usize::from(x >= dims.nx / 2);
                let base = if r == 0 { low } else { high };
                let z: f64 = rng.sample(StandardNormal);
                data.push(base + noise_sigma * z);
                region.push(r);
            }
        }
    }
    Ok((Volume::new(dims, data)?, region))
}

/// Standard normal draws, for noise volumes in tests and demos.
pub fn normal_volume(dims: Dims, sigma: f64, seed: u64) -> Result<Volume> {
    synth_mixture_volume(dims, &[MixtureComponent::new(1.0, 0.0, sigma)], seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Composite Simpson rule on [a, b] with `n` (even) panels.
    fn simpson(f: impl Fn(f64) -> f64, a: f64, b: f64, n: usize) -> f64 {
        let h = (b - a) / n as f64;
        let mut s = f(a) + f(b);
        for i in 1..n {
            let w = if i % 2 == 1 { 4.0 } else { 2.0 };
            s += w * f(a + i as f64 * h);
        }
        s * h / 3.0
    }

    #[test]
    fn ggd_peak_values() {
        let gauss = GgdParams::new(1.0, 2.0).unwrap();
        assert!((ggd_density(0.0, gauss) - 1.0 / std::f64::consts::PI.sqrt()).abs() < 1e-12);
        assert!((ggd_density(0.0, gauss) - 0.564190).abs() < 1e-6);
        let laplace = GgdParams::new(1.0, 1.0).unwrap();
        assert!((ggd_density(0.0, laplace) - 0.5).abs() < 1e-12);
        for x in [0.3, 1.7, 42.0] {
            assert_eq!(ggd_density(x, laplace), ggd_density(-x, laplace));
        }
    }

    #[test]
    fn ggd_integrates_to_one() {
        for beta in [0.5, 1.0, 2.0, 4.0] {
            for alpha in [0.5, 1.0, 3.0] {
                let p = GgdParams::new(alpha, beta).unwrap();
                // x = u^2 removes the cusp at 0; the density is symmetric.
                let half = |lim: f64| {
                    2.0 * simpson(|u| 2.0 * u * ggd_density(u * u, p), 0.0, lim.sqrt(), 200_000)
                };
                let window = half(50.0 * alpha);
                if beta >= 1.0 {
                    assert!((window - 1.0).abs() < 1e-6, "alpha={alpha} beta={beta}: {window}");
                } else {
                    // Heavy tail: mass outside +-50 alpha is Gamma(2, sqrt 50) / Gamma(2).
                    let r = 50f64.sqrt();
                    let inside = 1.0 - (-r).exp() * (1.0 + r);
                    assert!((window - inside).abs() < 1e-6, "alpha={alpha}: {window} vs {inside}");
                    let whole = half(1000.0 * alpha);
                    assert!((whole - 1.0).abs() < 1e-6, "alpha={alpha}: {whole}");
                }
            }
        }
        assert!(GgdParams::new(0.0, 1.0).is_err());
        assert!(GgdParams::new(1.0, -1.0).is_err());
    }

    #[test]
    fn degenerate_component_is_constant() {
        let v = synth_mixture_volume(Dims::cube(8), &[MixtureComponent::new(1.0, 3.0, 0.0)], 1)
            .unwrap();
        assert!(v.data().iter().all(|&x| x == 3.0));
    }

    #[test]
    fn deterministic_for_seed() {
        let comps = [
            MixtureComponent::new(0.3, 0.0, 1.0),
            MixtureComponent::new(0.7, 5.0, 2.0),
        ];
        let a = synth_mixture_volume(Dims::cube(6), &comps, 99).unwrap();
        let b = synth_mixture_volume(Dims::cube(6), &comps, 99).unwrap();
        let c = synth_mixture_volume(Dims::cube(6), &comps, 100).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn weight_sum_violation() {
        let comps = [
            MixtureComponent::new(0.5, 0.0, 1.0),
            MixtureComponent::new(0.6, 5.0, 1.0),
        ];
        assert!(matches!(
            synth_mixture_volume(Dims::cube(2), &comps, 0),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn sample_mean_of_symmetric_mixture() {
        let comps = [
            MixtureComponent::new(0.5, 0.0, 1.0),
            MixtureComponent::new(0.5, 10.0, 1.0),
        ];
        let v = synth_mixture_volume(Dims::cube(32), &comps, 7).unwrap();
        let mean = v.data().iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 5.0).abs() < 0.1, "{mean}");
    }

    #[test]
    fn component_proportions_within_three_standard_errors() {
        let comps = [
            MixtureComponent::new(0.2, -3.0, 1.0),
            MixtureComponent::new(0.5, 0.0, 0.5),
            MixtureComponent::new(0.3, 4.0, 2.0),
        ];
        let n = 100_000;
        let (_, which) = sample_mixture(n, &comps, 2024).unwrap();
        for (i, c) in comps.iter().enumerate() {
            let p = which.iter().filter(|&&w| w == i).count() as f64 / n as f64;
            let se = (c.weight * (1.0 - c.weight) / n as f64).sqrt();
            assert!((p - c.weight).abs() < 3.0 * se, "component {i}: {p}");
        }
    }
}
