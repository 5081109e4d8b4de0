//! Seeded synthetic phantoms with values in [0, 1].

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcore::{fft2c_real, ComplexGrid, RealGrid};
use crate::rng::{self, stream, Rng};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PhantomKind {
    /// Nested Shepp-Logan-style ellipses.
    Ellipses,
    /// Sum of 5 to 15 Gaussian bumps with widths of 1.5% to 6% of the image.
    Blobs,
}

impl std::str::FromStr for PhantomKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ellipses" => Ok(PhantomKind::Ellipses),
            "blobs" => Ok(PhantomKind::Blobs),
            other => Err(Error::Config(format!("unknown phantom kind '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhantomSpec {
    pub kind: PhantomKind,
    pub height: usize,
    pub width: usize,
    pub count: usize,
    pub seed: u64,
    /// Relative intensity jitter applied per structure.
    pub contrast_jitter: f64,
}

impl PhantomSpec {
    pub fn new(kind: PhantomKind, size: usize, count: usize, seed: u64) -> Self {
        PhantomSpec {
            kind,
            height: size,
            width: size,
            count,
            seed,
            contrast_jitter: 0.1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(format!(
                "phantom dims must be positive multiples of 8, got {}x{}",
                self.height, self.width
            )));
        }
        if self.count == 0 {
            return Err(Error::Config("phantom count must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.contrast_jitter) {
            return Err(Error::Config(format!(
                "contrast jitter must lie in [0, 1), got {}",
                self.contrast_jitter
            )));
        }
        Ok(())
    }
}

/// Intensity, semi-axes, centre and rotation (degrees) in the unit square
/// `[-1, 1]^2`, x to the right and y upwards.
const SHEPP_LOGAN: [[f64; 6]; 10] = [
    [1.0, 0.69, 0.92, 0.0, 0.0, 0.0],
    [-0.8, 0.6624, 0.874, 0.0, -0.0184, 0.0],
    [-0.2, 0.11, 0.31, 0.22, 0.0, -18.0],
    [-0.2, 0.16, 0.41, -0.22, 0.0, 18.0],
    [0.1, 0.21, 0.25, 0.0, 0.35, 0.0],
    [0.1, 0.046, 0.046, 0.0, 0.1, 0.0],
    [0.1, 0.046, 0.046, 0.0, -0.1, 0.0],
    [0.1, 0.046, 0.023, -0.08, -0.605, 0.0],
    [0.1, 0.023, 0.023, 0.0, -0.606, 0.0],
    [0.1, 0.023, 0.046, 0.06, -0.605, 0.0],
];

fn jitter(r: &mut Rng, amount: f64) -> f64 {
    1.0 + amount * (2.0 * r.random::<f64>() - 1.0)
}

fn ellipses(h: usize, w: usize, contrast: f64, r: &mut Rng) -> RealGrid {
    let shapes: Vec<[f64; 6]> = SHEPP_LOGAN
        .iter()
        .map(|&[a, ax, ay, x0, y0, phi]| {
            [
                a * jitter(r, contrast),
                ax * jitter(r, 0.05),
                ay * jitter(r, 0.05),
                x0 + 0.02 * (2.0 * r.random::<f64>() - 1.0),
                y0 + 0.02 * (2.0 * r.random::<f64>() - 1.0),
                (phi + 5.0 * (2.0 * r.random::<f64>() - 1.0)).to_radians(),
            ]
        })
        .collect();
    let mut img = RealGrid::zeros(h, w);
    for row in 0..h {
        let y = 1.0 - (2.0 * row as f64 + 1.0) / h as f64;
        for col in 0..w {
            let x = (2.0 * col as f64 + 1.0) / w as f64 - 1.0;
            let mut v = 0.0;
            for &[a, ax, ay, x0, y0, phi] in &shapes {
                let (s, c) = phi.sin_cos();
                let (dx, dy) = (x - x0, y - y0);
                let u = dx * c + dy * s;
                let t = -dx * s + dy * c;
                if (u / ax).powi(2) + (t / ay).powi(2) <= 1.0 {
                    v += a;
                }
            }
            img.data[row * w + col] = v.clamp(0.0, 1.0);
        }
    }
    img
}

fn blobs(h: usize, w: usize, contrast: f64, r: &mut Rng) -> RealGrid {
    let n = r.random_range(5..=15);
    let size = h.min(w) as f64;
    let bumps: Vec<[f64; 4]> = (0..n)
        .map(|_| {
            [
                (0.3 + 0.7 * r.random::<f64>()) * jitter(r, contrast),
                (0.15 + 0.7 * r.random::<f64>()) * h as f64,
                (0.15 + 0.7 * r.random::<f64>()) * w as f64,
                (0.015 + 0.045 * r.random::<f64>()) * size,
            ]
        })
        .collect();
    let mut img = RealGrid::zeros(h, w);
    for row in 0..h {
        for col in 0..w {
            img.data[row * w + col] = bumps
                .iter()
                .map(|&[a, cy, cx, s]| {
                    let d2 = (row as f64 + 0.5 - cy).powi(2) + (col as f64 + 0.5 - cx).powi(2);
                    a * (-d2 / (2.0 * s * s)).exp()
                })
                .sum();
        }
    }
    let (_, hi) = img.min_max();
    img.map(|v| (v / hi).clamp(0.0, 1.0))
}

/// Phantom `i` depends only on `(seed, i)`, not on `count`.
pub fn make_phantoms(spec: &PhantomSpec) -> Result<Vec<RealGrid>> {
    spec.validate()?;
    Ok((0..spec.count)
        .map(|i| {
            let mut r = rng::seeded_item(spec.seed, stream::PHANTOM, i as u64);
            match spec.kind {
                PhantomKind::Ellipses => {
                    ellipses(spec.height, spec.width, spec.contrast_jitter, &mut r)
                }
                PhantomKind::Blobs => blobs(spec.height, spec.width, spec.contrast_jitter, &mut r),
            }
        })
        .collect())
}

/// Fully sampled k-space of a real image.
pub fn to_kspace(x: &RealGrid) -> ComplexGrid {
    fft2c_real(x)
}
