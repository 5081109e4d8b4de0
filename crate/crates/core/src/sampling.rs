//! Undersampling masks and the noisy acquisition model `y = M ⊙ (F x + n)`.
//!
//! Variable-density masks draw a fixed budget of k-space locations without
//! replacement, weighting each candidate by a Gaussian centered at DC. The
//! auto-calibration (ACS) block is always sampled first, so retained counts
//! are exact rather than Bernoulli-distributed.

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcore::{ComplexGrid, Domain};
use crate::rng::{self, stream};

/// Gaussian density width as a fraction of the grid extent.
pub const DENSITY_SIGMA_FRACTION: f64 = 0.15;
/// Default ACS size as a fraction of the phase-encode extent.
pub const DEFAULT_ACS_FRACTION: f64 = 0.08;
pub const MIN_ACS_LINES: usize = 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pattern {
    /// Whole phase-encode columns, Gaussian-weighted.
    Gauss1D,
    /// Individual k-space points, Gaussian-weighted.
    Gauss2D,
    /// Variable-density Poisson-disc points.
    Poisson2D,
    /// Every `accel`-th column (lattice through the DC column) plus ACS.
    Uniform,
}

impl Pattern {
    pub fn is_one_dimensional(self) -> bool {
        matches!(self, Pattern::Gauss1D | Pattern::Uniform)
    }
}

impl std::str::FromStr for Pattern {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "gauss1d" => Ok(Pattern::Gauss1D),
            "gauss2d" => Ok(Pattern::Gauss2D),
            "poisson2d" => Ok(Pattern::Poisson2D),
            "uniform" => Ok(Pattern::Uniform),
            other => Err(Error::Config(format!("unknown mask pattern {other:?}"))),
        }
    }
}

/// Size of the centered, fully sampled calibration block.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AcsSize {
    /// Fraction of each extent, never fewer than [`MIN_ACS_LINES`] lines.
    Fraction(f64),
    /// Exact number of phase-encode lines.
    Lines(usize),
}

impl Default for AcsSize {
    fn default() -> Self {
        AcsSize::Fraction(DEFAULT_ACS_FRACTION)
    }
}

impl AcsSize {
    /// Lines along an axis of length `extent`.
    pub fn lines(self, extent: usize) -> usize {
        let n = match self {
            AcsSize::Fraction(f) => ((f * extent as f64).round() as usize).max(MIN_ACS_LINES),
            AcsSize::Lines(n) => n,
        };
        n.min(extent)
    }
}

/// Centered rectangle of `rows x cols` entries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AcsRegion {
    pub rows: usize,
    pub cols: usize,
}

impl AcsRegion {
    /// `(row_start, row_end, col_start, col_end)` within a `height x width`
    /// grid, end-exclusive.
    pub fn bounds(&self, height: usize, width: usize) -> (usize, usize, usize, usize) {
        let r0 = height / 2 - self.rows.min(height) / 2;
        let c0 = width / 2 - self.cols.min(width) / 2;
        (r0, r0 + self.rows, c0, c0 + self.cols)
    }

    pub fn contains(&self, height: usize, width: usize, row: usize, col: usize) -> bool {
        let (r0, r1, c0, c1) = self.bounds(height, width);
        (r0..r1).contains(&row) && (c0..c1).contains(&col)
    }

    pub fn count(&self) -> usize {
        self.rows * self.cols
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mask {
    pub height: usize,
    pub width: usize,
    /// Row-major, `true` = sampled.
    pub keep: Vec<bool>,
    pub acs: AcsRegion,
    pub pattern: Pattern,
    pub seed: u64,
    pub target_fraction: f64,
}

impl Mask {
    pub fn full(height: usize, width: usize) -> Mask {
        Mask {
            height,
            width,
            keep: vec![true; height * width],
            acs: AcsRegion {
                rows: height,
                cols: width,
            },
            pattern: Pattern::Uniform,
            seed: 0,
            target_fraction: 1.0,
        }
    }

    /// Uniform 1D mask: columns `c` with `(c - width/2) % accel == 0`, plus
    /// `acs_cols` central columns.
    pub fn uniform(height: usize, width: usize, accel: usize, acs_cols: usize) -> Result<Mask> {
        if accel == 0 {
            return Err(Error::Config("acceleration must be positive".into()));
        }
        if acs_cols > width {
            return Err(Error::Budget(format!(
                "{acs_cols} ACS columns exceed width {width}"
            )));
        }
        let acs = AcsRegion {
            rows: height,
            cols: acs_cols,
        };
        let phase = lattice_phase(width, accel);
        let (_, _, c0, c1) = acs.bounds(height, width);
        let columns: Vec<bool> = (0..width)
            .map(|c| c % accel == phase || (c0..c1).contains(&c))
            .collect();
        let keep = (0..height * width)
            .map(|i| columns[i % width])
            .collect::<Vec<_>>();
        let retained = columns.iter().filter(|&&k| k).count() as f64 / width as f64;
        Ok(Mask {
            height,
            width,
            keep,
            acs,
            pattern: Pattern::Uniform,
            seed: 0,
            target_fraction: retained,
        })
    }

    #[inline]
    pub fn is_sampled(&self, row: usize, col: usize) -> bool {
        self.keep[row * self.width + col]
    }

    pub fn sampled_count(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }

    /// True when every column is either fully sampled or fully empty.
    pub fn is_column_constant(&self) -> bool {
        (0..self.width).all(|c| {
            let first = self.keep[c];
            (0..self.height).all(|r| self.keep[r * self.width + c] == first)
        })
    }

    pub fn column_sampled(&self, col: usize) -> bool {
        (0..self.height).all(|r| self.keep[r * self.width + col])
    }

    pub fn sampled_columns(&self) -> Vec<usize> {
        (0..self.width)
            .filter(|&c| self.column_sampled(c))
            .collect()
    }

    pub fn acceleration(&self) -> f64 {
        1.0 / retention_fraction(self)
    }

    pub fn check_shape(&self, g: &ComplexGrid) -> Result<()> {
        if g.height == self.height && g.width == self.width {
            Ok(())
        } else {
            Err(Error::shape(format!(
                "mask {}x{} vs grid {}x{}",
                self.height, self.width, g.height, g.width
            )))
        }
    }

    /// Mean distance of sampled points from the DC location, in pixels.
    pub fn mean_center_distance(&self) -> f64 {
        let (cr, cc) = ((self.height / 2) as f64, (self.width / 2) as f64);
        let mut total = 0.0;
        let mut n = 0usize;
        for r in 0..self.height {
            for c in 0..self.width {
                if self.is_sampled(r, c) {
                    total += ((r as f64 - cr).powi(2) + (c as f64 - cc).powi(2)).sqrt();
                    n += 1;
                }
            }
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

/// Column index (mod `accel`) of the acquisition lattice that includes DC.
pub fn lattice_phase(width: usize, accel: usize) -> usize {
    (width / 2) % accel
}

/// Recipe for a variable-density mask.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub pattern: Pattern,
    pub height: usize,
    pub width: usize,
    pub target_fraction: f64,
    #[serde(default)]
    pub acs: AcsSize,
    pub seed: u64,
}

impl MaskSpec {
    pub fn generate(&self) -> Result<Mask> {
        gen_mask(
            self.pattern,
            self.height,
            self.width,
            self.target_fraction,
            self.acs,
            self.seed,
        )
    }
}

pub fn gen_mask(
    pattern: Pattern,
    height: usize,
    width: usize,
    target_fraction: f64,
    acs: AcsSize,
    seed: u64,
) -> Result<Mask> {
    if height < 8 || width < 8 {
        return Err(Error::Config(format!(
            "mask dimensions must be at least 8, got {height}x{width}"
        )));
    }
    if !(target_fraction > 0.0 && target_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "target fraction must lie in (0, 1], got {target_fraction}"
        )));
    }
    if let AcsSize::Fraction(f) = acs {
        if !(0.0..=1.0).contains(&f) {
            return Err(Error::Config(format!("ACS fraction {f} outside [0, 1]")));
        }
        if f > target_fraction {
            return Err(Error::Budget(format!(
                "ACS fraction {f} exceeds target fraction {target_fraction}"
            )));
        }
    }

    let acs_cols = acs.lines(width);
    let region = if pattern.is_one_dimensional() {
        AcsRegion {
            rows: height,
            cols: acs_cols,
        }
    } else {
        let rows = match acs {
            AcsSize::Lines(n) => {
                ((n as f64 * height as f64 / width as f64).round() as usize).max(1)
            }
            AcsSize::Fraction(_) => acs.lines(height),
        };
        AcsRegion {
            rows: rows.min(height),
            cols: acs_cols,
        }
    };

    let mut mask = Mask {
        height,
        width,
        keep: vec![false; height * width],
        acs: region,
        pattern,
        seed,
        target_fraction,
    };

    if target_fraction >= 1.0 {
        mask.keep.iter_mut().for_each(|k| *k = true);
        return Ok(mask);
    }

    match pattern {
        Pattern::Gauss1D => fill_gauss_1d(&mut mask)?,
        Pattern::Gauss2D => fill_gauss_2d(&mut mask)?,
        Pattern::Poisson2D => fill_poisson_2d(&mut mask)?,
        Pattern::Uniform => {
            let accel = (1.0 / target_fraction).round().max(1.0) as usize;
            let uniform = Mask::uniform(height, width, accel, acs_cols)?;
            mask.keep = uniform.keep;
        }
    }
    Ok(mask)
}

fn gaussian_weight(offset: f64, extent: usize) -> f64 {
    let sigma = DENSITY_SIGMA_FRACTION * extent as f64;
    (-(offset * offset) / (2.0 * sigma * sigma)).exp()
}

fn density_2d(height: usize, width: usize, row: usize, col: usize) -> f64 {
    gaussian_weight(row as f64 - (height / 2) as f64, height)
        * gaussian_weight(col as f64 - (width / 2) as f64, width)
}

/// Weighted sampling of `k` items without replacement (Efraimidis–Spirakis):
/// each candidate gets the key `ln(u) / w` and the `k` largest keys win.
fn weighted_choice(
    candidates: &[usize],
    weights: &[f64],
    k: usize,
    rng: &mut rng::Rng,
) -> Vec<usize> {
    debug_assert_eq!(candidates.len(), weights.len());
    let mut keyed: Vec<(f64, usize)> = candidates
        .iter()
        .zip(weights)
        .map(|(&idx, &w)| {
            let u: f64 = rng.random::<f64>().max(f64::MIN_POSITIVE);
            (u.ln() / w.max(f64::MIN_POSITIVE), idx)
        })
        .collect();
    keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    keyed.into_iter().take(k).map(|(_, idx)| idx).collect()
}

fn fill_gauss_1d(mask: &mut Mask) -> Result<()> {
    let (h, w) = (mask.height, mask.width);
    let budget = (mask.target_fraction * w as f64).round() as usize;
    let (_, _, c0, c1) = mask.acs.bounds(h, w);
    let acs_cols = c1 - c0;
    if acs_cols > budget {
        return Err(Error::Budget(format!(
            "{acs_cols} ACS columns exceed the budget of {budget} columns"
        )));
    }
    let candidates: Vec<usize> = (0..w).filter(|c| !(c0..c1).contains(c)).collect();
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&c| gaussian_weight(c as f64 - (w / 2) as f64, w))
        .collect();
    let mut rng = rng::seeded(mask.seed, stream::MASK);
    let mut columns = vec![false; w];
    columns[c0..c1].iter_mut().for_each(|k| *k = true);
    for c in weighted_choice(&candidates, &weights, budget - acs_cols, &mut rng) {
        columns[c] = true;
    }
    for (i, k) in mask.keep.iter_mut().enumerate() {
        *k = columns[i % w];
    }
    Ok(())
}

fn force_acs(mask: &mut Mask) -> usize {
    let (h, w) = (mask.height, mask.width);
    let (r0, r1, c0, c1) = mask.acs.bounds(h, w);
    for r in r0..r1 {
        for c in c0..c1 {
            mask.keep[r * w + c] = true;
        }
    }
    (r1 - r0) * (c1 - c0)
}

fn point_budget(mask: &Mask) -> Result<usize> {
    let budget = (mask.target_fraction * (mask.height * mask.width) as f64).round() as usize;
    if mask.acs.count() > budget {
        return Err(Error::Budget(format!(
            "{} ACS points exceed the budget of {budget} points",
            mask.acs.count()
        )));
    }
    Ok(budget)
}

fn fill_gauss_2d(mask: &mut Mask) -> Result<()> {
    let (h, w) = (mask.height, mask.width);
    let budget = point_budget(mask)?;
    let forced = force_acs(mask);
    let candidates: Vec<usize> = (0..h * w).filter(|&i| !mask.keep[i]).collect();
    let weights: Vec<f64> = candidates
        .iter()
        .map(|&i| density_2d(h, w, i / w, i % w))
        .collect();
    let mut rng = rng::seeded(mask.seed, stream::MASK);
    for i in weighted_choice(&candidates, &weights, budget - forced, &mut rng) {
        mask.keep[i] = true;
    }
    Ok(())
}

/// Dart throwing over a fixed candidate order with exclusion radius
/// `scale / sqrt(density)`. Returns the accepted set (ACS included).
fn poisson_pass(mask: &Mask, order: &[usize], density: &[f64], scale: f64) -> Vec<bool> {
    let (h, w) = (mask.height as isize, mask.width as isize);
    let mut taken = mask.keep.clone();
    let mut points: Vec<(isize, isize)> = (0..taken.len())
        .filter(|&i| taken[i])
        .map(|i| (i as isize / w, i as isize % w))
        .collect();
    for &idx in order {
        if taken[idx] {
            continue;
        }
        let radius = scale / density[idx].sqrt();
        let reach = radius.ceil().min((h.max(w)) as f64) as isize;
        let (r, c) = ((idx as isize) / w, (idx as isize) % w);
        let r2 = radius * radius;
        let near = |rr: isize, cc: isize| {
            let (dr, dc) = ((rr - r) as f64, (cc - c) as f64);
            dr * dr + dc * dc < r2
        };
        // scan whichever is smaller: the neighbourhood or the accepted set
        let free = if ((2 * reach + 1) * (2 * reach + 1)) as usize > points.len() {
            !points.iter().any(|&(rr, cc)| near(rr, cc))
        } else {
            !((r - reach).max(0)..=(r + reach).min(h - 1)).any(|rr| {
                ((c - reach).max(0)..=(c + reach).min(w - 1))
                    .any(|cc| taken[(rr * w + cc) as usize] && near(rr, cc))
            })
        };
        if free {
            taken[idx] = true;
            points.push((r, c));
        }
    }
    taken
}

fn fill_poisson_2d(mask: &mut Mask) -> Result<()> {
    let (h, w) = (mask.height, mask.width);
    let budget = point_budget(mask)?;
    force_acs(mask);

    let density: Vec<f64> = (0..h * w).map(|i| density_2d(h, w, i / w, i % w)).collect();
    let mut rng = rng::seeded(mask.seed, stream::MASK_POISSON);
    let mut order: Vec<usize> = (0..h * w).filter(|&i| !mask.keep[i]).collect();
    order.shuffle(&mut rng);

    let count = |taken: &[bool]| taken.iter().filter(|&&t| t).count();
    // Accepted count decreases with the radius scale; bisect for the budget.
    let (mut lo, mut hi) = (0.0f64, (h.max(w)) as f64);
    let mut best = poisson_pass(mask, &order, &density, lo);
    let mut best_gap = count(&best).abs_diff(budget);
    for _ in 0..24 {
        let mid = 0.5 * (lo + hi);
        let taken = poisson_pass(mask, &order, &density, mid);
        let n = count(&taken);
        let gap = n.abs_diff(budget);
        if gap < best_gap {
            best = taken;
            best_gap = gap;
        }
        if n > budget {
            lo = mid;
        } else {
            hi = mid;
        }
        if gap == 0 {
            break;
        }
    }

    // Trim or top up to the exact budget.
    let n = count(&best);
    let (r0, r1, c0, c1) = mask.acs.bounds(h, w);
    let in_acs = |i: usize| (r0..r1).contains(&(i / w)) && (c0..c1).contains(&(i % w));
    if n > budget {
        let mut removable: Vec<usize> = (0..h * w).filter(|&i| best[i] && !in_acs(i)).collect();
        removable.shuffle(&mut rng);
        for &i in removable.iter().take(n - budget) {
            best[i] = false;
        }
    } else if n < budget {
        let candidates: Vec<usize> = (0..h * w).filter(|&i| !best[i]).collect();
        let weights: Vec<f64> = candidates.iter().map(|&i| density[i]).collect();
        for i in weighted_choice(&candidates, &weights, budget - n, &mut rng) {
            best[i] = true;
        }
    }
    mask.keep = best;
    Ok(())
}

pub fn retention_fraction(m: &Mask) -> f64 {
    m.sampled_count() as f64 / (m.height * m.width) as f64
}

/// Complex Gaussian acquisition noise with `sigma` per real component.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionNoise {
    pub sigma: f64,
    pub seed: u64,
}

impl AcquisitionNoise {
    pub fn none() -> Self {
        AcquisitionNoise {
            sigma: 0.0,
            seed: 0,
        }
    }
}

/// `m ⊙ (y + n)`: zeros at unsampled locations.
pub fn undersample(y: &ComplexGrid, m: &Mask, noise: AcquisitionNoise) -> Result<ComplexGrid> {
    y.expect_domain(Domain::KSpace)?;
    m.check_shape(y)?;
    if !(noise.sigma >= 0.0 && noise.sigma.is_finite()) {
        return Err(Error::Config(format!(
            "noise sigma {} is invalid",
            noise.sigma
        )));
    }
    let zero = Complex64::new(0.0, 0.0);
    let data = if noise.sigma == 0.0 {
        y.data
            .iter()
            .zip(&m.keep)
            .map(|(&v, &k)| if k { v } else { zero })
            .collect()
    } else {
        let mut rng = rng::seeded(noise.seed, stream::NOISE);
        y.data
            .iter()
            .zip(&m.keep)
            .map(|(&v, &k)| {
                let re: f64 = StandardNormal.sample(&mut rng);
                let im: f64 = StandardNormal.sample(&mut rng);
                if k {
                    v + Complex64::new(re, im) * noise.sigma
                } else {
                    zero
                }
            })
            .collect()
    };
    Ok(ComplexGrid { data, ..y.clone() })
}
