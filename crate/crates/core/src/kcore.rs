//! Complex grids and centered, orthonormal 2D Fourier transforms.
//!
//! Grids are row-major. Rows run along the frequency-encode direction and
//! columns along phase-encode. `fft2c` places DC at `(height / 2, width / 2)`
//! and scales by `1 / sqrt(height * width)`, so the transform is unitary and
//! image-domain and k-space L2 norms agree.

use std::cell::RefCell;
use std::sync::Arc;

use num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Modulus below which a spectral entry is treated as empty.
pub const PHASE_EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Image,
    #[serde(rename = "kspace")]
    KSpace,
}

impl Domain {
    pub fn flipped(self) -> Domain {
        match self {
            Domain::Image => Domain::KSpace,
            Domain::KSpace => Domain::Image,
        }
    }
}

/// Real-valued row-major grid.
#[derive(Clone, Debug, PartialEq)]
pub struct RealGrid {
    pub height: usize,
    pub width: usize,
    pub data: Vec<f64>,
}

impl RealGrid {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("grid dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(RealGrid {
            height,
            width,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        RealGrid {
            height,
            width,
            data: vec![0.0; height * width],
        }
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        RealGrid {
            height,
            width,
            data: vec![value; height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.width + col]
    }

    pub fn same_shape(&self, other: &RealGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_shape(&self, other: &RealGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> RealGrid {
        RealGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Embeds the grid as a complex grid with zero imaginary part.
    pub fn to_complex(&self, domain: Domain) -> ComplexGrid {
        ComplexGrid {
            height: self.height,
            width: self.width,
            domain,
            data: self.data.iter().map(|&v| Complex64::new(v, 0.0)).collect(),
        }
    }
}

/// Complex row-major grid tagged with the domain it lives in.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexGrid {
    pub height: usize,
    pub width: usize,
    pub domain: Domain,
    pub data: Vec<Complex64>,
}

impl ComplexGrid {
    pub fn new(height: usize, width: usize, domain: Domain, data: Vec<Complex64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::shape("grid dimensions must be positive"));
        }
        if data.len() != height * width {
            return Err(Error::shape(format!(
                "data length {} does not match {}x{}",
                data.len(),
                height,
                width
            )));
        }
        Ok(ComplexGrid {
            height,
            width,
            domain,
            data,
        })
    }

    pub fn zeros(height: usize, width: usize, domain: Domain) -> Self {
        ComplexGrid {
            height,
            width,
            domain,
            data: vec![Complex64::new(0.0, 0.0); height * width],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.width + col]
    }

    #[inline]
    pub fn set(&mut self, row: usize, col: usize, value: Complex64) {
        self.data[row * self.width + col] = value;
    }

    pub fn same_shape(&self, other: &ComplexGrid) -> bool {
        self.height == other.height && self.width == other.width
    }

    pub fn check_shape(&self, other: &ComplexGrid) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "{}x{} vs {}x{}",
                self.height, self.width, other.height, other.width
            )))
        }
    }

    pub fn expect_domain(&self, expected: Domain) -> Result<()> {
        if self.domain == expected {
            Ok(())
        } else {
            Err(Error::Domain {
                expected,
                found: self.domain,
            })
        }
    }

    pub fn energy(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn abs(&self) -> RealGrid {
        RealGrid {
            height: self.height,
            width: self.width,
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }

    pub fn scale(&self, factor: Complex64) -> ComplexGrid {
        ComplexGrid {
            data: self.data.iter().map(|&z| z * factor).collect(),
            ..self.clone()
        }
    }

    /// `a * self + b * other`, keeping `self`'s domain.
    pub fn axpby(&self, a: Complex64, other: &ComplexGrid, b: Complex64) -> Result<ComplexGrid> {
        self.check_shape(other)?;
        Ok(ComplexGrid {
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&x, &y)| a * x + b * y)
                .collect(),
            ..self.clone()
        })
    }

    pub fn max_abs_diff(&self, other: &ComplexGrid) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// Magnitude and unit-phase factorisation of a spectrum.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralPair {
    pub magnitude: RealGrid,
    pub phase: ComplexGrid,
}

impl SpectralPair {
    pub fn recompose(&self) -> ComplexGrid {
        ComplexGrid {
            data: self
                .phase
                .data
                .iter()
                .zip(&self.magnitude.data)
                .map(|(&p, &m)| p * m)
                .collect(),
            ..self.phase.clone()
        }
    }
}

thread_local! {
    static PLANNER: RefCell<FftPlanner<f64>> = RefCell::new(FftPlanner::new());
}

fn plan(len: usize, inverse: bool) -> Arc<dyn Fft<f64>> {
    PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        if inverse {
            p.plan_fft_inverse(len)
        } else {
            p.plan_fft_forward(len)
        }
    })
}

/// Unnormalised in-place 2D DFT of a row-major buffer.
fn dft2(height: usize, width: usize, data: &mut [Complex64], inverse: bool) {
    let row_fft = plan(width, inverse);
    row_fft.process(data);

    let col_fft = plan(height, inverse);
    let mut column = vec![Complex64::new(0.0, 0.0); height];
    let mut scratch = vec![Complex64::new(0.0, 0.0); col_fft.get_inplace_scratch_len()];
    for c in 0..width {
        for (r, v) in column.iter_mut().enumerate() {
            *v = data[r * width + c];
        }
        col_fft.process_with_scratch(&mut column, &mut scratch);
        for (r, v) in column.iter().enumerate() {
            data[r * width + c] = *v;
        }
    }
}

/// Circular shift moving index 0 to `n / 2` along both axes (`fftshift`).
fn fftshift(height: usize, width: usize, data: &[Complex64]) -> Vec<Complex64> {
    roll(height, width, data, height / 2, width / 2)
}

/// Inverse of [`fftshift`], also correct for odd sizes.
fn ifftshift(height: usize, width: usize, data: &[Complex64]) -> Vec<Complex64> {
    roll(height, width, data, height - height / 2, width - width / 2)
}

fn roll(height: usize, width: usize, data: &[Complex64], dr: usize, dc: usize) -> Vec<Complex64> {
    let mut out = vec![Complex64::new(0.0, 0.0); data.len()];
    for r in 0..height {
        let rr = (r + dr) % height;
        for c in 0..width {
            out[rr * width + (c + dc) % width] = data[r * width + c];
        }
    }
    out
}

fn transform(g: &ComplexGrid, inverse: bool) -> ComplexGrid {
    let (h, w) = (g.height, g.width);
    let mut data = ifftshift(h, w, &g.data);
    dft2(h, w, &mut data, inverse);
    let norm = 1.0 / ((h * w) as f64).sqrt();
    let mut data = fftshift(h, w, &data);
    for v in &mut data {
        *v *= norm;
    }
    ComplexGrid {
        height: h,
        width: w,
        domain: g.domain.flipped(),
        data,
    }
}

/// Centered orthonormal forward transform, image → k-space.
pub fn fft2c(g: &ComplexGrid) -> Result<ComplexGrid> {
    g.expect_domain(Domain::Image)?;
    Ok(transform(g, false))
}

/// Centered orthonormal inverse transform, k-space → image.
pub fn ifft2c(g: &ComplexGrid) -> Result<ComplexGrid> {
    g.expect_domain(Domain::KSpace)?;
    Ok(transform(g, true))
}

/// Spectrum of a real image.
pub fn fft2c_real(x: &RealGrid) -> ComplexGrid {
    transform(&x.to_complex(Domain::Image), false)
}

/// Adjoint of [`fft2c_real`]: `Re(ifft2c(g))` for a k-space grid.
///
/// Used to pull k-space gradients back onto real images.
pub fn fft2c_real_adjoint(g: &ComplexGrid) -> RealGrid {
    debug_assert_eq!(g.domain, Domain::KSpace);
    real_part_unchecked(&transform(g, true))
}

pub fn spectral_decompose(y: &ComplexGrid) -> SpectralPair {
    let zero = Complex64::new(0.0, 0.0);
    let mut magnitude = Vec::with_capacity(y.len());
    let mut phase = Vec::with_capacity(y.len());
    for &z in &y.data {
        let m = z.norm();
        magnitude.push(m);
        phase.push(if m > PHASE_EPS { z / m } else { zero });
    }
    SpectralPair {
        magnitude: RealGrid {
            height: y.height,
            width: y.width,
            data: magnitude,
        },
        phase: ComplexGrid {
            data: phase,
            ..y.clone()
        },
    }
}

pub fn real_part(g: &ComplexGrid) -> Result<RealGrid> {
    g.expect_domain(Domain::Image)?;
    Ok(real_part_unchecked(g))
}

fn real_part_unchecked(g: &ComplexGrid) -> RealGrid {
    RealGrid {
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|z| z.re).collect(),
    }
}
