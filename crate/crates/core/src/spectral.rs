//! Discrete Fourier transforms of arbitrary length and FFT-based Gaussian
//! kernel density estimation.
//!
//! Power-of-two lengths use an iterative radix-2 transform. Every other
//! length goes through Bluestein's chirp-z reformulation, which turns the
//! length-N DFT into a circular convolution of power-of-two size M >= 2N-1.
//! The input itself is never zero-padded, so bin `n` always means frequency
//! `n / N` of the original signal.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{Error, Result};

/// A complex spectrum. Real and imaginary parts always have equal length.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVector(Vec<Complex64>);

impl ComplexVector {
    pub fn new(values: Vec<Complex64>) -> Self {
        Self(values)
    }

    pub fn from_parts(re: &[f64], im: &[f64]) -> Result<Self> {
        if re.len() != im.len() {
            return Err(Error::InvalidShape(format!(
                "real part has {} entries, imaginary part {}",
                re.len(),
                im.len()
            )));
        }
        Ok(Self(
            re.iter().zip(im).map(|(&a, &b)| Complex64::new(a, b)).collect(),
        ))
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn re(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.re).collect()
    }

    pub fn im(&self) -> Vec<f64> {
        self.0.iter().map(|c| c.im).collect()
    }

    pub fn as_slice(&self) -> &[Complex64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<Complex64> {
        self.0
    }
}

/// Reference O(N^2) DFT: `X(n) = sum_m x(m) exp(-2 pi i m n / N)`.
pub fn dft_naive(x: &[f64]) -> ComplexVector {
    let n = x.len();
    // exp(-2 pi i k / N) for k < N; the exponent m*n is reduced mod N so the
    // angle never loses precision for large products.
    let roots: Vec<Complex64> = (0..n)
        .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
        .collect();
    let out = (0..n)
        .map(|bin| x.iter().enumerate().map(|(m, &v)| roots[(m * bin) % n] * v).sum())
        .collect();
    ComplexVector(out)
}

/// Forward DFT of a real signal of any length.
pub fn fft(x: &[f64]) -> ComplexVector {
    if x.is_empty() {
        return ComplexVector(Vec::new());
    }
    FftPlan::new(x.len()).forward_real(x)
}

pub fn magnitudes(spectrum: &ComplexVector) -> Vec<f64> {
    spectrum.0.iter().map(|c| c.norm()).collect()
}

/// Precomputed state for transforms of one length.
#[derive(Debug, Clone)]
pub struct FftPlan {
    len: usize,
    kind: PlanKind,
}

#[derive(Debug, Clone)]
enum PlanKind {
    Trivial,
    Radix2(Radix2),
    Bluestein {
        inner: Radix2,
        chirp: Vec<Complex64>,
        kernel_spectrum: Vec<Complex64>,
    },
}

impl FftPlan {
    pub fn new(len: usize) -> Self {
        assert!(len >= 1, "FFT length must be positive");
        let kind = if len == 1 {
            PlanKind::Trivial
        } else if len.is_power_of_two() {
            PlanKind::Radix2(Radix2::new(len))
        } else {
            let m = (2 * len - 1).next_power_of_two();
            let inner = Radix2::new(m);
            let two_n = 2 * len as u64;
            let chirp: Vec<Complex64> = (0..len as u64)
                .map(|j| {
                    let q = (j * j) % two_n;
                    Complex64::from_polar(1.0, -PI * q as f64 / len as f64)
                })
                .collect();
            let mut kernel = vec![Complex64::new(0.0, 0.0); m];
            kernel[0] = chirp[0].conj();
            for j in 1..len {
                kernel[j] = chirp[j].conj();
                kernel[m - j] = chirp[j].conj();
            }
            inner.forward(&mut kernel);
            PlanKind::Bluestein {
                inner,
                chirp,
                kernel_spectrum: kernel,
            }
        };
        Self { len, kind }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn forward_real(&self, x: &[f64]) -> ComplexVector {
        let mut buf: Vec<Complex64> = x.iter().map(|&v| Complex64::new(v, 0.0)).collect();
        self.forward(&mut buf);
        ComplexVector(buf)
    }

    /// In-place forward transform.
    pub fn forward(&self, buf: &mut [Complex64]) {
        assert_eq!(buf.len(), self.len, "buffer length does not match plan");
        match &self.kind {
            PlanKind::Trivial => {}
            PlanKind::Radix2(r) => r.forward(buf),
            PlanKind::Bluestein {
                inner,
                chirp,
                kernel_spectrum,
            } => {
                let m = kernel_spectrum.len();
                let mut work = vec![Complex64::new(0.0, 0.0); m];
                for (j, (w, &x)) in work.iter_mut().zip(buf.iter()).enumerate() {
                    *w = x * chirp[j];
                }
                inner.forward(&mut work);
                for (w, &k) in work.iter_mut().zip(kernel_spectrum) {
                    *w *= k;
                }
                inner.inverse(&mut work);
                for (j, out) in buf.iter_mut().enumerate() {
                    *out = work[j] * chirp[j];
                }
            }
        }
    }

    /// In-place inverse transform, normalized by 1/N.
    pub fn inverse(&self, buf: &mut [Complex64]) {
        for c in buf.iter_mut() {
            *c = c.conj();
        }
        self.forward(buf);
        let scale = 1.0 / self.len as f64;
        for c in buf.iter_mut() {
            *c = c.conj() * scale;
        }
    }
}

#[derive(Debug, Clone)]
struct Radix2 {
    n: usize,
    twiddles: Vec<Complex64>,
    bit_rev: Vec<usize>,
}

impl Radix2 {
    fn new(n: usize) -> Self {
        debug_assert!(n.is_power_of_two());
        let twiddles = (0..n / 2)
            .map(|k| Complex64::from_polar(1.0, -2.0 * PI * k as f64 / n as f64))
            .collect();
        let bits = n.trailing_zeros();
        let bit_rev = (0..n)
            .map(|i| {
                if bits == 0 {
                    0
                } else {
                    i.reverse_bits() >> (usize::BITS - bits)
                }
            })
            .collect();
        Self { n, twiddles, bit_rev }
    }

    fn forward(&self, buf: &mut [Complex64]) {
        let n = self.n;
        for i in 0..n {
            let j = self.bit_rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let stride = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let t = self.twiddles[k * stride] * buf[start + k + half];
                    let u = buf[start + k];
                    buf[start + k] = u + t;
                    buf[start + k + half] = u - t;
                }
            }
            len <<= 1;
        }
    }

    fn inverse(&self, buf: &mut [Complex64]) {
        for c in buf.iter_mut() {
            *c = c.conj();
        }
        self.forward(buf);
        let scale = 1.0 / self.n as f64;
        for c in buf.iter_mut() {
            *c = c.conj() * scale;
        }
    }
}

/// Gaussian kernel density estimate sampled on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    pub grid: Vec<f64>,
    pub density: Vec<f64>,
    pub bandwidth: f64,
}

impl DensityEstimate {
    /// Grid index of the highest density, lowest index on ties.
    pub fn mode_index(&self) -> usize {
        let mut best = 0;
        for (j, &d) in self.density.iter().enumerate() {
            if d > self.density[best] {
                best = j;
            }
        }
        best
    }

    pub fn mode(&self) -> f64 {
        self.grid[self.mode_index()]
    }

    /// Trapezoidal integral of the density over the grid.
    pub fn integral(&self) -> f64 {
        self.grid
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(g, d)| 0.5 * (g[1] - g[0]) * (d[0] + d[1]))
            .sum()
    }

    pub fn spacing(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }
}

pub const DEFAULT_GRID_SIZE: usize = 256;

/// Silverman's rule of thumb `0.9 * min(sd, IQR / 1.34) * n^(-1/5)`.
///
/// When one of the two spread measures is zero (e.g. most of the sample is
/// tied) the other one is used. Returns 0 only for a constant sample.
pub fn silverman_bandwidth(sample: &[f64]) -> f64 {
    let n = sample.len();
    if n < 2 {
        return 0.0;
    }
    let mut sorted = sample.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mean = sorted.iter().sum::<f64>() / n as f64;
    let var = sorted.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    let sd = var.sqrt();
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = match (sd > 0.0, iqr > 0.0) {
        (true, true) => sd.min(iqr / 1.34),
        (true, false) => sd,
        (false, true) => iqr / 1.34,
        (false, false) => 0.0,
    };
    0.9 * spread * (n as f64).powf(-0.2)
}

/// Linear-interpolation quantile of an ascending sample.
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub(crate) fn gaussian_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// Grid and linear-binning weights shared by [`kde_density`] and its direct-sum check.
#[derive(Debug, Clone)]
pub struct BinnedSample {
    pub grid: Vec<f64>,
    pub weights: Vec<f64>,
    pub bandwidth: f64,
    pub count: usize,
}

/// Lays a `grid_size`-point grid over `[min - 3h, max + 3h]` and spreads each
/// sample point over its two neighbouring grid nodes (linear binning).
pub fn bin_sample(sample: &[f64], grid_size: usize) -> Result<BinnedSample> {
    if grid_size < 2 {
        return Err(Error::InvalidConfig(format!(
            "KDE grid needs at least 2 points, got {grid_size}"
        )));
    }
    if sample.len() < 2 {
        return Err(Error::DegenerateSample);
    }
    let (min, max) = sample
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    if min == max {
        return Err(Error::DegenerateSample);
    }
    let h = silverman_bandwidth(sample);
    let lo = min - 3.0 * h;
    let hi = max + 3.0 * h;
    let step = (hi - lo) / (grid_size - 1) as f64;
    let grid: Vec<f64> = (0..grid_size).map(|j| lo + j as f64 * step).collect();
    let mut weights = vec![0.0; grid_size];
    for &x in sample {
        let pos = (x - lo) / step;
        let j = (pos.floor().max(0.0) as usize).min(grid_size - 2);
        let frac = (pos - j as f64).clamp(0.0, 1.0);
        weights[j] += 1.0 - frac;
        weights[j + 1] += frac;
    }
    Ok(BinnedSample {
        grid,
        weights,
        bandwidth: h,
        count: sample.len(),
    })
}

/// Gaussian KDE with Silverman bandwidth, evaluated on `grid_size` points by
/// FFT convolution of the linearly binned sample with the sampled kernel.
pub fn kde_density(sample: &[f64], grid_size: usize) -> Result<DensityEstimate> {
    let binned = bin_sample(sample, grid_size)?;
    let g = grid_size;
    let h = binned.bandwidth;
    let step = binned.grid[1] - binned.grid[0];
    let norm = 1.0 / (binned.count as f64 * h);

    // Linear (not circular) convolution: offsets span -(G-1)..=(G-1), so a
    // transform of size >= 2G-1 avoids wrap-around.
    let m = (2 * g - 1).next_power_of_two();
    let plan = FftPlan::new(m);
    let mut data = vec![Complex64::new(0.0, 0.0); m];
    for (d, &w) in data.iter_mut().zip(&binned.weights) {
        d.re = w;
    }
    let mut kernel = vec![Complex64::new(0.0, 0.0); m];
    kernel[0].re = gaussian_pdf(0.0) * norm;
    for d in 1..g {
        let k = gaussian_pdf(d as f64 * step / h) * norm;
        kernel[d].re = k;
        kernel[m - d].re = k;
    }
    plan.forward(&mut data);
    plan.forward(&mut kernel);
    for (a, b) in data.iter_mut().zip(&kernel) {
        *a *= b;
    }
    plan.inverse(&mut data);
    let density = data[..g].iter().map(|c| c.re.max(0.0)).collect();
    Ok(DensityEstimate {
        grid: binned.grid,
        density,
        bandwidth: h,
    })
}
