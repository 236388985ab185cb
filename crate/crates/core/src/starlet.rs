//! Isotropic undecimated B3-spline ("a trous") wavelet transform of 3D volumes.
//!
//! Step `s` smooths `c_{s-1}` with the separable kernel `[1, 4, 6, 4, 1] / 16`
//! dilated by `2^(s-1)` along each axis, giving `c_s`; the wavelet scale is
//! `w_s = c_{s-1} - c_s` and the continuum is `c_S`. The input is therefore
//! exactly the sum of all scales plus the continuum. Borders are mirrored
//! without repeating the edge sample. Axes of length 1 are left unsmoothed,
//! so 2D images are handled as `nz = 1`.

use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::fits;
use crate::volume::{Dims, ValueKind, Volume};

/// B3-spline taps at offsets -2, -1, 0, 1, 2 (in units of the hole spacing).
pub const B3_TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];

/// Scales used when the caller does not choose (three wavelet scales plus
/// the continuum, i.e. four levels).
pub const DEFAULT_SCALES: usize = 3;

/// MAD-to-sigma factor for Gaussian data: the 0.75 quantile of N(0, 1).
const MAD_TO_SIGMA: f64 = 0.674_489_750_196_081_7;

/// Wavelet scales `w_1..w_S` (finest first) and the continuum `w_{S+1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WaveletDecomposition {
    scales: Vec<Volume>,
    continuum: Volume,
}

impl WaveletDecomposition {
    pub fn new(scales: Vec<Volume>, continuum: Volume) -> Result<Self> {
        let dims = continuum.dims();
        if let Some((i, v)) = scales.iter().enumerate().find(|(_, v)| v.dims() != dims) {
            return Err(Error::validation(format!(
                "scale {} has dims {} but continuum has {}",
                i + 1,
                v.dims(),
                dims
            )));
        }
        Ok(WaveletDecomposition { scales, continuum })
    }

    pub fn num_scales(&self) -> usize {
        self.scales.len()
    }

    pub fn dims(&self) -> Dims {
        self.continuum.dims()
    }

    pub fn scales(&self) -> &[Volume] {
        &self.scales
    }

    /// Detail level `s`, counted from 1 (finest) to `num_scales()`.
    pub fn scale(&self, s: usize) -> &Volume {
        assert!(
            (1..=self.scales.len()).contains(&s),
            "scale {s} out of range 1..={}",
            self.scales.len()
        );
        &self.scales[s - 1]
    }

    pub fn continuum(&self) -> &Volume {
        &self.continuum
    }

    /// All levels in file order: scales then continuum.
    pub fn levels(&self) -> impl Iterator<Item = &Volume> {
        self.scales.iter().chain(std::iter::once(&self.continuum))
    }

    /// Write one FITS file per level: `<prefix>_1.fits .. <prefix>_{S+1}.fits`.
    pub fn save_levels(&self, prefix: &Path) -> Result<Vec<PathBuf>> {
        let mut paths = Vec::with_capacity(self.scales.len() + 1);
        for (i, level) in self.levels().enumerate() {
            let path = level_path(prefix, i + 1);
            fits::save_fits(level, &path)?;
            paths.push(path);
        }
        Ok(paths)
    }

    /// Read back the `num_scales + 1` files written by [`save_levels`](Self::save_levels).
    pub fn load_levels(prefix: &Path, num_scales: usize) -> Result<Self> {
        let mut scales = Vec::with_capacity(num_scales);
        for s in 1..=num_scales {
            let v = fits::load_fits(level_path(prefix, s))?;
            scales.push(Volume::from_parts(v.dims(), v.into_data(), ValueKind::WaveletCoefficient));
        }
        let c = fits::load_fits(level_path(prefix, num_scales + 1))?;
        let continuum = Volume::from_parts(c.dims(), c.into_data(), ValueKind::Continuum);
        Self::new(scales, continuum)
    }
}

/// `<prefix>_<level>.fits`.
pub fn level_path(prefix: &Path, level: usize) -> PathBuf {
    let mut name = prefix.as_os_str().to_owned();
    name.push(format!("_{level}.fits"));
    PathBuf::from(name)
}

/// Check that `num_scales` dilated kernels fit inside every non-singleton axis.
pub fn check_scales(dims: Dims, num_scales: usize) -> Result<()> {
    if num_scales == 0 {
        return Err(Error::validation("number of wavelet scales must be at least 1"));
    }
    let support = if num_scales < 60 {
        4usize << (num_scales - 1)
    } else {
        usize::MAX
    };
    for n in dims.as_array() {
        if n > 1 && support >= n {
            return Err(Error::validation(format!(
                "{num_scales} scales need every axis longer than 4 * 2^(S-1) = {support} voxels, \
                 volume is {dims}"
            )));
        }
    }
    Ok(())
}

/// Decompose `v` into `num_scales` wavelet scales plus the continuum.
pub fn starlet_forward(v: &Volume, num_scales: usize) -> Result<WaveletDecomposition> {
    let dims = v.dims();
    check_scales(dims, num_scales)?;
    let mut current = v.data().to_vec();
    let mut scales = Vec::with_capacity(num_scales);
    for s in 0..num_scales {
        let smooth = smooth_b3(&current, dims, 1 << s);
        let detail: Vec<f64> = current.iter().zip(&smooth).map(|(a, b)| a - b).collect();
        scales.push(Volume::from_parts(dims, detail, ValueKind::WaveletCoefficient));
        current = smooth;
    }
    Ok(WaveletDecomposition {
        scales,
        continuum: Volume::from_parts(dims, current, ValueKind::Continuum),
    })
}

/// Elementwise sum of all scales and the continuum.
pub fn starlet_reconstruct(d: &WaveletDecomposition) -> Result<Volume> {
    let dims = d.dims();
    let mut out = d.continuum.data().to_vec();
    for w in &d.scales {
        if w.dims() != dims {
            return Err(Error::validation("decomposition levels have mismatched dims"));
        }
        for (o, x) in out.iter_mut().zip(w.data()) {
            *o += x;
        }
    }
    Volume::new(dims, out)
}

/// Robust per-scale noise level.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaleNoise {
    pub sigma: Vec<f64>,
}

impl ScaleNoise {
    pub fn new(sigma: Vec<f64>) -> Self {
        ScaleNoise { sigma }
    }

    /// Indices of scales whose estimate is not a positive finite number.
    pub fn degenerate_scales(&self) -> Vec<usize> {
        self.sigma
            .iter()
            .enumerate()
            .filter(|(_, s)| !(s.is_finite() && **s > 0.0))
            .map(|(i, _)| i)
            .collect()
    }
}

/// `sigma_s = median(|w_s - median(w_s)|) / 0.6745` for each wavelet scale.
pub fn estimate_scale_noise(d: &WaveletDecomposition) -> ScaleNoise {
    ScaleNoise::new(d.scales.iter().map(|w| mad_sigma(w.data())).collect())
}

pub(crate) fn mad_sigma(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let mut buf = values.to_vec();
    let med = median_in_place(&mut buf);
    for (b, v) in buf.iter_mut().zip(values) {
        *b = (v - med).abs();
    }
    median_in_place(&mut buf) / MAD_TO_SIGMA
}

fn median_in_place(buf: &mut [f64]) -> f64 {
    let n = buf.len();
    let mid = n / 2;
    let (lower, m, _) = buf.select_nth_unstable_by(mid, f64::total_cmp);
    let m = *m;
    if n % 2 == 1 {
        m
    } else {
        let below = lower.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (below + m)
    }
}

/// Reflect index `i` into `[0, n)` about the end samples (no edge repeat).
#[inline]
fn reflect(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let m = i.rem_euclid(period);
    if m >= n as isize {
        (period - m) as usize
    } else {
        m as usize
    }
}

/// For each position along an axis of length `n`, the five source indices
/// of the dilated kernel.
fn tap_indices(n: usize, hole: usize) -> Vec<[usize; 5]> {
    let h = hole as isize;
    (0..n as isize)
        .map(|i| {
            [
                reflect(i - 2 * h, n),
                reflect(i - h, n),
                i as usize,
                reflect(i + h, n),
                reflect(i + 2 * h, n),
            ]
        })
        .collect()
}

/// One separable B3 smoothing step with hole spacing `hole`.
fn smooth_b3(input: &[f64], dims: Dims, hole: usize) -> Vec<f64> {
    let Dims { nx, ny, nz } = dims;
    let plane = nx * ny;
    let [t0, t1, t2, t3, t4] = B3_TAPS;
    let mut a = input.to_vec();
    let mut b = vec![0.0; input.len()];

    if nx > 1 {
        let idx = tap_indices(nx, hole);
        b.par_chunks_mut(nx)
            .zip(a.par_chunks(nx))
            .for_each(|(out, row)| {
                for (o, t) in out.iter_mut().zip(&idx) {
                    *o = t0 * row[t[0]] + t1 * row[t[1]] + t2 * row[t[2]] + t3 * row[t[3]]
                        + t4 * row[t[4]];
                }
            });
        std::mem::swap(&mut a, &mut b);
    }

    if ny > 1 {
        let idx = tap_indices(ny, hole);
        b.par_chunks_mut(plane)
            .zip(a.par_chunks(plane))
            .for_each(|(out, src)| {
                for (y, t) in idx.iter().enumerate() {
                    let rows = t.map(|r| &src[r * nx..(r + 1) * nx]);
                    let dst = &mut out[y * nx..(y + 1) * nx];
                    for x in 0..nx {
                        dst[x] = t0 * rows[0][x]
                            + t1 * rows[1][x]
                            + t2 * rows[2][x]
                            + t3 * rows[3][x]
                            + t4 * rows[4][x];
                    }
                }
            });
        std::mem::swap(&mut a, &mut b);
    }

    if nz > 1 {
        let idx = tap_indices(nz, hole);
        let src = &a;
        b.par_chunks_mut(plane).enumerate().for_each(|(z, dst)| {
            let t = idx[z];
            let planes = t.map(|p| &src[p * plane..(p + 1) * plane]);
            for i in 0..plane {
                dst[i] = t0 * planes[0][i]
                    + t1 * planes[1][i]
                    + t2 * planes[2][i]
                    + t3 * planes[3][i]
                    + t4 * planes[4][i];
            }
        });
        std::mem::swap(&mut a, &mut b);
    }

    a
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::normal_volume;

    #[test]
    fn reflect_without_edge_repeat() {
        let got: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(got, vec![3, 2, 1, 0, 1, 2, 3, 4, 3, 2, 1]);
        assert_eq!(reflect(-7, 1), 0);
    }

    /// Direct 3D convolution with the outer-product kernel, one voxel at a time.
    fn smooth_direct(v: &Volume, hole: usize) -> Vec<f64> {
        let d = v.dims();
        let offs = [-2isize, -1, 0, 1, 2];
        let mut out = vec![0.0; d.len()];
        for z in 0..d.nz {
            for y in 0..d.ny {
                for x in 0..d.nx {
                    let mut acc = 0.0;
                    for (a, oz) in offs.iter().enumerate() {
                        for (b, oy) in offs.iter().enumerate() {
                            for (c, ox) in offs.iter().enumerate() {
                                let h = hole as isize;
                                let sz = reflect(z as isize + oz * h, d.nz);
                                let sy = reflect(y as isize + oy * h, d.ny);
                                let sx = reflect(x as isize + ox * h, d.nx);
                                let w = if d.nz > 1 { B3_TAPS[a] } else { (a == 2) as u8 as f64 }
                                    * if d.ny > 1 { B3_TAPS[b] } else { (b == 2) as u8 as f64 }
                                    * if d.nx > 1 { B3_TAPS[c] } else { (c == 2) as u8 as f64 };
                                acc += w * v.get(sx, sy, sz);
                            }
                        }
                    }
                    out[d.index(x, y, z)] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn separable_matches_direct_convolution() {
        for dims in [Dims::new(9, 10, 11), Dims::new(12, 9, 1)] {
            let v = normal_volume(dims, 1.0, 3).unwrap();
            for hole in [1, 2] {
                let fast = smooth_b3(v.data(), dims, hole);
                let slow = smooth_direct(&v, hole);
                for (a, b) in fast.iter().zip(&slow) {
                    assert!((a - b).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn impulse_response_at_center() {
        let dims = Dims::cube(9);
        let mut data = vec![0.0; dims.len()];
        data[dims.index(4, 4, 4)] = 1.0;
        let v = Volume::new(dims, data).unwrap();
        let d = starlet_forward(&v, 1).unwrap();
        let expected = 1.0 - (6.0f64 / 16.0).powi(3);
        assert!((d.scale(1).get(4, 4, 4) - expected).abs() < 1e-15);
    }

    #[test]
    fn constant_volume() {
        let v = Volume::filled(Dims::new(20, 18, 19), 2.5).unwrap();
        let d = starlet_forward(&v, 2).unwrap();
        for w in d.scales() {
            assert!(w.data().iter().all(|x| x.abs() < 1e-12));
        }
        assert!(d.continuum().data().iter().all(|&x| (x - 2.5).abs() < 1e-12));
    }

    #[test]
    fn scale_bound() {
        let v = Volume::filled(Dims::cube(16), 0.0).unwrap();
        assert!(starlet_forward(&v, 2).is_ok()); // support 8 < 16
        let err = starlet_forward(&v, 3).unwrap_err(); // support 16
        assert!(err.to_string().contains("16"), "{err}");
        assert!(starlet_forward(&v, 0).is_err());
        // Singleton axes do not constrain the bound.
        let flat = Volume::filled(Dims::new(40, 40, 1), 1.0).unwrap();
        assert!(starlet_forward(&flat, 3).is_ok());
    }

    #[test]
    fn reconstruct_edge_cases() {
        let dims = Dims::cube(4);
        let zero = || Volume::filled(dims, 0.0).unwrap();
        let d = WaveletDecomposition::new(vec![zero(), zero()], zero()).unwrap();
        assert!(starlet_reconstruct(&d).unwrap().data().iter().all(|&x| x == 0.0));

        let c = normal_volume(dims, 1.0, 5).unwrap();
        let d = WaveletDecomposition::new(vec![zero()], c.clone()).unwrap();
        assert_eq!(starlet_reconstruct(&d).unwrap().data(), c.data());

        let other = Volume::filled(Dims::cube(3), 0.0).unwrap();
        assert!(WaveletDecomposition::new(vec![other], zero()).is_err());
    }

    #[test]
    fn noise_estimates() {
        let dims = Dims::new(3, 3, 3);
        let zero = Volume::filled(dims, 0.0).unwrap();
        let pattern: Vec<f64> = (0..27).map(|i| [-1.0, 0.0, 1.0][i % 3]).collect();
        let tiled = Volume::new(dims, pattern).unwrap();
        let d = WaveletDecomposition::new(vec![zero.clone(), tiled], zero).unwrap();
        let noise = estimate_scale_noise(&d);
        assert_eq!(noise.sigma[0], 0.0);
        assert!((noise.sigma[1] - 1.0 / MAD_TO_SIGMA).abs() < 1e-12);
        assert!((noise.sigma[1] - 1.4826).abs() < 1e-4);
        assert_eq!(noise.degenerate_scales(), vec![0]);
    }

    #[test]
    fn mad_sigma_tracks_sample_std() {
        let v = normal_volume(Dims::cube(32), 2.0, 11).unwrap();
        let (_, sd) = v.mean_std();
        let est = mad_sigma(v.data());
        assert!((est - 2.0).abs() < 0.05 * 2.0, "{est}");
        assert!((est - sd).abs() < 0.05 * sd);
    }

    #[test]
    fn even_length_median() {
        let mut v = vec![4.0, 1.0, 3.0, 2.0];
        assert_eq!(median_in_place(&mut v), 2.5);
    }

    #[test]
    fn level_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let prefix = dir.path().join("t");
        let v = normal_volume(Dims::cube(12), 1.0, 8).unwrap();
        let d = starlet_forward(&v, 2).unwrap();
        let paths = d.save_levels(&prefix).unwrap();
        let names: Vec<_> = paths
            .iter()
            .map(|p| p.file_name().unwrap().to_string_lossy().into_owned())
            .collect();
        assert_eq!(names, vec!["t_1.fits", "t_2.fits", "t_3.fits"]);
        let back = WaveletDecomposition::load_levels(&prefix, 2).unwrap();
        for (a, b) in back.levels().zip(d.levels()) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}
