//! GRAPPA kernel estimation and missing-line interpolation.
//!
//! Undersampling is uniform along phase-encode (columns): the acquired
//! lattice is every `accel`-th column through the DC column (see
//! [`lattice_phase`]). A column at offset `o` (1 ≤ o < accel) past lattice
//! column `a` is predicted from `source_lines` lattice columns
//! `a + (k - source_lines/2 + 1)·accel` and `taps` rows around the target row,
//! across all coils. Sources falling outside the grid read as zero.
//!
//! Kernels are fit on the ACS block, using every window whose sources sit on
//! the acquisition lattice and lie fully inside the block.

use num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kcore::{ifft2c, ComplexGrid, Domain};
use crate::rng::{self, stream};
use crate::sampling::{lattice_phase, AcsRegion, Mask};

pub const DEFAULT_RIDGE: f64 = 1e-6;

const ZERO: Complex64 = Complex64::new(0.0, 0.0);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelGeometry {
    pub source_lines: usize,
    pub taps: usize,
    pub accel: usize,
    pub coils: usize,
}

impl Default for KernelGeometry {
    fn default() -> Self {
        KernelGeometry {
            source_lines: 4,
            taps: 5,
            accel: 2,
            coils: 1,
        }
    }
}

impl KernelGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.source_lines == 0 || self.source_lines % 2 != 0 {
            return Err(Error::Config(format!(
                "source_lines must be positive and even, got {}",
                self.source_lines
            )));
        }
        if self.taps % 2 == 0 {
            return Err(Error::Config(format!(
                "taps must be odd, got {}",
                self.taps
            )));
        }
        if self.accel < 2 {
            return Err(Error::Config(format!(
                "accel must be at least 2, got {}",
                self.accel
            )));
        }
        if self.coils == 0 {
            return Err(Error::Config("coils must be positive".into()));
        }
        Ok(())
    }

    /// Unknown weights per (offset, target coil).
    pub fn unknowns(&self) -> usize {
        self.coils * self.source_lines * self.taps
    }

    pub fn weight_len(&self) -> usize {
        (self.accel - 1) * self.coils * self.unknowns()
    }

    /// Column offset of source `k` relative to the lattice base column.
    fn source_offset(&self, k: usize) -> isize {
        (k as isize - self.source_lines as isize / 2 + 1) * self.accel as isize
    }

    fn half_taps(&self) -> isize {
        (self.taps / 2) as isize
    }

    /// Flat index of the weight for (offset, target coil, source coil, source line, tap).
    #[inline]
    fn index(&self, offset: usize, target: usize, source: usize, line: usize, tap: usize) -> usize {
        (((offset - 1) * self.coils + target) * self.coils + source) * self.source_lines * self.taps
            + line * self.taps
            + tap
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GrappaKernel {
    pub geometry: KernelGeometry,
    /// Layout `[accel-1][coils][coils × source_lines × taps]`.
    pub weights: Vec<Complex64>,
    pub fit_residual: f64,
}

impl GrappaKernel {
    pub fn new(
        geometry: KernelGeometry,
        weights: Vec<Complex64>,
        fit_residual: f64,
    ) -> Result<Self> {
        geometry.validate()?;
        if weights.len() != geometry.weight_len() {
            return Err(Error::shape(format!(
                "kernel has {} weights, geometry needs {}",
                weights.len(),
                geometry.weight_len()
            )));
        }
        if weights
            .iter()
            .any(|w| !w.re.is_finite() || !w.im.is_finite())
        {
            return Err(Error::Config("kernel weights must be finite".into()));
        }
        Ok(GrappaKernel {
            geometry,
            weights,
            fit_residual,
        })
    }

    pub fn weight(
        &self,
        offset: usize,
        target: usize,
        source: usize,
        line: usize,
        tap: usize,
    ) -> Complex64 {
        self.weights[self.geometry.index(offset, target, source, line, tap)]
    }

    pub fn max_abs_diff(&self, other: &GrappaKernel) -> f64 {
        self.weights
            .iter()
            .zip(&other.weights)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max)
    }
}

/// One k-space (or image) grid per receiver coil.
#[derive(Clone, Debug, PartialEq)]
pub struct CoilStack {
    pub coils: Vec<ComplexGrid>,
}

impl CoilStack {
    pub fn new(coils: Vec<ComplexGrid>) -> Result<Self> {
        let first = coils
            .first()
            .ok_or_else(|| Error::shape("coil stack needs at least one coil"))?;
        for c in &coils[1..] {
            first.check_shape(c)?;
            if c.domain != first.domain {
                return Err(Error::Domain {
                    expected: first.domain,
                    found: c.domain,
                });
            }
        }
        Ok(CoilStack { coils })
    }

    pub fn single(grid: ComplexGrid) -> Self {
        CoilStack { coils: vec![grid] }
    }

    pub fn len(&self) -> usize {
        self.coils.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coils.is_empty()
    }

    pub fn height(&self) -> usize {
        self.coils[0].height
    }

    pub fn width(&self) -> usize {
        self.coils[0].width
    }

    pub fn domain(&self) -> Domain {
        self.coils[0].domain
    }

    pub fn map(&self, f: impl Fn(&ComplexGrid) -> ComplexGrid) -> CoilStack {
        CoilStack {
            coils: self.coils.iter().map(f).collect(),
        }
    }

    pub fn energy(&self) -> f64 {
        self.coils.iter().map(ComplexGrid::energy).sum()
    }

    /// `‖self − reference‖ / ‖reference‖`.
    pub fn nrmse(&self, reference: &CoilStack) -> f64 {
        let err: f64 = self
            .coils
            .iter()
            .zip(&reference.coils)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(x, y)| (x - y).norm_sqr()))
            .sum();
        (err / reference.energy()).sqrt()
    }
}

#[inline]
fn sample(grid: &ComplexGrid, row: isize, col: isize) -> Complex64 {
    if row < 0 || col < 0 || row >= grid.height as isize || col >= grid.width as isize {
        ZERO
    } else {
        grid.data[row as usize * grid.width + col as usize]
    }
}

/// Solves `(A^H A + λI) X = A^H B` in place by Gaussian elimination with
/// partial pivoting. `normal` is `n × n` row-major, `rhs` is `n × m`.
/// Returns `None` when a pivot vanishes.
fn solve_dense(n: usize, normal: &mut [Complex64], rhs: &mut [Complex64], m: usize) -> Option<()> {
    let scale = (0..n).map(|i| normal[i * n + i].norm()).fold(0.0, f64::max);
    if scale == 0.0 {
        return None;
    }
    let tol = scale * 1e-14 * n as f64;
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&a, &b| {
                normal[a * n + col]
                    .norm()
                    .total_cmp(&normal[b * n + col].norm())
            })
            .unwrap();
        if normal[pivot_row * n + col].norm() <= tol {
            return None;
        }
        if pivot_row != col {
            for j in 0..n {
                normal.swap(col * n + j, pivot_row * n + j);
            }
            for j in 0..m {
                rhs.swap(col * m + j, pivot_row * m + j);
            }
        }
        let inv = normal[col * n + col].inv();
        for row in col + 1..n {
            let factor = normal[row * n + col] * inv;
            if factor == ZERO {
                continue;
            }
            for j in col..n {
                let v = normal[col * n + j];
                normal[row * n + j] -= factor * v;
            }
            for j in 0..m {
                let v = rhs[col * m + j];
                rhs[row * m + j] -= factor * v;
            }
        }
    }
    for col in (0..n).rev() {
        let inv = normal[col * n + col].inv();
        for j in 0..m {
            let mut acc = rhs[col * m + j];
            for k in col + 1..n {
                acc -= normal[col * n + k] * rhs[k * m + j];
            }
            rhs[col * m + j] = acc * inv;
        }
    }
    Some(())
}

/// Fits GRAPPA weights on the ACS block of `kspace`.
///
/// `ridge` scales a Tikhonov term by the mean diagonal of the normal matrix.
pub fn estimate_kernel(
    kspace: &CoilStack,
    acs: &AcsRegion,
    geom: &KernelGeometry,
    ridge: f64,
) -> Result<GrappaKernel> {
    geom.validate()?;
    kspace.domain_is(Domain::KSpace)?;
    if kspace.len() != geom.coils {
        return Err(Error::Geometry(format!(
            "{} coils supplied for a {}-coil kernel",
            kspace.len(),
            geom.coils
        )));
    }
    if !(ridge >= 0.0 && ridge.is_finite()) {
        return Err(Error::Config(format!(
            "ridge must be nonnegative, got {ridge}"
        )));
    }
    let (h, w) = (kspace.height(), kspace.width());
    let (r0, r1, c0, c1) = acs.bounds(h, w);
    let half = geom.half_taps();
    let phase = lattice_phase(w, geom.accel);
    let lo = geom.source_offset(0);
    let hi = geom.source_offset(geom.source_lines - 1);

    let bases: Vec<isize> = (c0 as isize..c1 as isize)
        .filter(|&a| a as usize % geom.accel == phase)
        .filter(|&a| a + lo >= c0 as isize && a + hi < c1 as isize)
        .collect();
    let rows: Vec<isize> = (r0 as isize + half..r1 as isize - half).collect();
    let unknowns = geom.unknowns();
    let equations = bases.len() * rows.len();
    if equations < 2 * unknowns {
        return Err(Error::AcsTooSmall {
            equations,
            unknowns,
            required: 2 * unknowns,
        });
    }

    // Design matrix is shared by all offsets; only the targets move.
    let mut design = vec![ZERO; equations * unknowns];
    for (e, (&a, &r)) in bases
        .iter()
        .flat_map(|a| rows.iter().map(move |r| (a, r)))
        .enumerate()
    {
        let row = &mut design[e * unknowns..(e + 1) * unknowns];
        let mut u = 0;
        for coil in &kspace.coils {
            for k in 0..geom.source_lines {
                let col = a + geom.source_offset(k);
                for t in 0..geom.taps as isize {
                    row[u] = sample(coil, r + t - half, col);
                    u += 1;
                }
            }
        }
    }

    let mut normal = vec![ZERO; unknowns * unknowns];
    for e in 0..equations {
        let row = &design[e * unknowns..(e + 1) * unknowns];
        for i in 0..unknowns {
            let ai = row[i].conj();
            if ai == ZERO {
                continue;
            }
            for j in 0..unknowns {
                normal[i * unknowns + j] += ai * row[j];
            }
        }
    }
    let trace: f64 = (0..unknowns).map(|i| normal[i * unknowns + i].re).sum();
    let lambda = ridge * trace / unknowns as f64;
    for i in 0..unknowns {
        normal[i * unknowns + i] += lambda;
    }

    let coils = geom.coils;
    let mut weights = vec![ZERO; geom.weight_len()];
    let (mut res_num, mut res_den) = (0.0, 0.0);
    for offset in 1..geom.accel {
        let mut targets = vec![ZERO; equations * coils];
        for (e, (&a, &r)) in bases
            .iter()
            .flat_map(|a| rows.iter().map(move |r| (a, r)))
            .enumerate()
        {
            for (c, coil) in kspace.coils.iter().enumerate() {
                targets[e * coils + c] = sample(coil, r, a + offset as isize);
            }
        }
        let mut rhs = vec![ZERO; unknowns * coils];
        for e in 0..equations {
            let row = &design[e * unknowns..(e + 1) * unknowns];
            for i in 0..unknowns {
                let ai = row[i].conj();
                for c in 0..coils {
                    rhs[i * coils + c] += ai * targets[e * coils + c];
                }
            }
        }
        let mut system = normal.clone();
        solve_dense(unknowns, &mut system, &mut rhs, coils)
            .ok_or(Error::SingularFit { offset, coil: 0 })?;
        for c in 0..coils {
            for u in 0..unknowns {
                let v = rhs[u * coils + c];
                if !v.re.is_finite() || !v.im.is_finite() {
                    return Err(Error::SingularFit { offset, coil: c });
                }
                weights[((offset - 1) * coils + c) * unknowns + u] = v;
            }
        }
        for e in 0..equations {
            let row = &design[e * unknowns..(e + 1) * unknowns];
            for c in 0..coils {
                let pred: Complex64 = (0..unknowns).map(|u| row[u] * rhs[u * coils + c]).sum();
                let target = targets[e * coils + c];
                res_num += (pred - target).norm_sqr();
                res_den += target.norm_sqr();
            }
        }
    }
    let fit_residual = if res_den > 0.0 {
        (res_num / res_den).sqrt()
    } else {
        0.0
    };
    GrappaKernel::new(*geom, weights, fit_residual)
}

impl CoilStack {
    fn domain_is(&self, domain: Domain) -> Result<()> {
        self.coils.iter().try_for_each(|c| c.expect_domain(domain))
    }
}

/// Checks that `m` carries the kernel's acquisition lattice and returns the
/// columns that need filling. A fully sampled mask yields no columns.
fn missing_columns(m: &Mask, geom: &KernelGeometry, h: usize, w: usize) -> Result<Vec<usize>> {
    if m.height != h || m.width != w {
        return Err(Error::shape(format!(
            "mask {}x{} vs k-space {}x{}",
            m.height, m.width, h, w
        )));
    }
    if !m.is_column_constant() {
        return Err(Error::Geometry(
            "GRAPPA needs whole phase-encode columns; mask is not column-constant".into(),
        ));
    }
    let phase = lattice_phase(w, geom.accel);
    if let Some(c) = (phase..w)
        .step_by(geom.accel)
        .find(|&c| !m.column_sampled(c))
    {
        return Err(Error::Geometry(format!(
            "lattice column {c} (accel {}) is not sampled",
            geom.accel
        )));
    }
    Ok((0..w).filter(|&c| !m.column_sampled(c)).collect())
}

/// Visits every (missing column, offset, base column).
fn for_missing(
    columns: &[usize],
    geom: &KernelGeometry,
    w: usize,
    mut f: impl FnMut(usize, usize, isize),
) {
    let phase = lattice_phase(w, geom.accel);
    for &j in columns {
        let offset = (j + geom.accel - phase) % geom.accel;
        f(j, offset, j as isize - offset as isize);
    }
}

/// Fills unsampled columns of `y_u` with the kernel; sampled entries are
/// copied unchanged.
pub fn apply_kernel(y_u: &CoilStack, m: &Mask, k: &GrappaKernel) -> Result<CoilStack> {
    let geom = &k.geometry;
    y_u.domain_is(Domain::KSpace)?;
    if y_u.len() != geom.coils {
        return Err(Error::Geometry(format!(
            "{} coils supplied for a {}-coil kernel",
            y_u.len(),
            geom.coils
        )));
    }
    let (h, w) = (y_u.height(), y_u.width());
    let missing = missing_columns(m, geom, h, w)?;
    let mut out = y_u.clone();
    if missing.is_empty() {
        return Ok(out);
    }
    let half = geom.half_taps();
    for_missing(&missing, geom, w, |j, offset, base| {
        for (tc, target) in out.coils.iter_mut().enumerate() {
            for r in 0..h as isize {
                let mut acc = ZERO;
                for (sc, source) in y_u.coils.iter().enumerate() {
                    for line in 0..geom.source_lines {
                        let col = base + geom.source_offset(line);
                        if col < 0 || col >= w as isize {
                            continue;
                        }
                        for t in 0..geom.taps {
                            acc += k.weight(offset, tc, sc, line, t)
                                * sample(source, r + t as isize - half, col);
                        }
                    }
                }
                target.data[r as usize * w + j] = acc;
            }
        }
    });
    Ok(out)
}

/// Adjoint of [`apply_kernel`] as a complex-linear map of the sampled data.
///
/// Unsampled entries of the result are zero.
pub fn apply_kernel_adjoint(g: &CoilStack, m: &Mask, k: &GrappaKernel) -> Result<CoilStack> {
    let geom = &k.geometry;
    let (h, w) = (g.height(), g.width());
    let missing = missing_columns(m, geom, h, w)?;
    let mut out = g.clone();
    for coil in &mut out.coils {
        for &j in &missing {
            for r in 0..h {
                coil.data[r * w + j] = ZERO;
            }
        }
    }
    let half = geom.half_taps();
    for_missing(&missing, geom, w, |j, offset, base| {
        for tc in 0..geom.coils {
            for r in 0..h as isize {
                let upstream = g.coils[tc].data[r as usize * w + j];
                if upstream == ZERO {
                    continue;
                }
                for sc in 0..geom.coils {
                    for line in 0..geom.source_lines {
                        let col = base + geom.source_offset(line);
                        if col < 0 || col >= w as isize {
                            continue;
                        }
                        for t in 0..geom.taps {
                            let row = r + t as isize - half;
                            if row < 0 || row >= h as isize {
                                continue;
                            }
                            out.coils[sc].data[row as usize * w + col as usize] +=
                                k.weight(offset, tc, sc, line, t).conj() * upstream;
                        }
                    }
                }
            }
        }
    });
    Ok(out)
}

/// Root-sum-of-squares coil combination. A single coil is returned as is,
/// which keeps its phase.
pub fn combine_coils(images: &CoilStack) -> ComplexGrid {
    if images.len() == 1 {
        return images.coils[0].clone();
    }
    let first = &images.coils[0];
    let data = (0..first.len())
        .map(|i| {
            let ss: f64 = images.coils.iter().map(|c| c.data[i].norm_sqr()).sum();
            Complex64::new(ss.sqrt(), 0.0)
        })
        .collect();
    ComplexGrid {
        data,
        ..first.clone()
    }
}

/// Estimate on the mask's ACS, fill, transform and combine.
pub fn grappa_reconstruct(
    y_u: &CoilStack,
    m: &Mask,
    geom: &KernelGeometry,
    ridge: f64,
) -> Result<ComplexGrid> {
    let (h, w) = (y_u.height(), y_u.width());
    let filled = if missing_columns(m, geom, h, w)?.is_empty() {
        y_u.clone()
    } else {
        let kernel = estimate_kernel(y_u, &m.acs, geom, ridge)?;
        apply_kernel(y_u, m, &kernel)?
    };
    let images = CoilStack {
        coils: filled
            .coils
            .iter()
            .map(ifft2c)
            .collect::<Result<Vec<_>>>()?,
    };
    Ok(combine_coils(&images))
}

/// Recipe for synthetic k-space that a known kernel reproduces exactly.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LinearDataSpec {
    pub height: usize,
    pub width: usize,
    pub geometry: KernelGeometry,
    pub seed: u64,
    /// Conjugate-symmetric data, i.e. a real image per coil.
    pub hermitian: bool,
}

impl LinearDataSpec {
    pub fn new(height: usize, width: usize, geometry: KernelGeometry, seed: u64) -> Self {
        LinearDataSpec {
            height,
            width,
            geometry,
            seed,
            hermitian: false,
        }
    }
}

/// Generates fully sampled k-space whose non-lattice columns are exactly the
/// truth kernel applied to the lattice columns.
///
/// Lattice columns hold complex Gaussian samples. In Hermitian mode the
/// kernel is symmetrised and a guard band of lattice data next to the grid
/// edges is zeroed, so that zero-padded and circular neighbourhoods agree and
/// conjugate symmetry survives the fill.
pub fn make_linear_data(spec: &LinearDataSpec) -> Result<(CoilStack, GrappaKernel)> {
    let geom = spec.geometry;
    geom.validate()?;
    let (h, w) = (spec.height, spec.width);
    if spec.hermitian && w % geom.accel != 0 {
        return Err(Error::Config(format!(
            "Hermitian data needs width divisible by accel ({w} vs {})",
            geom.accel
        )));
    }
    let mut rng = rng::seeded(spec.seed, stream::LINEAR_DATA);
    let mut normal = || -> Complex64 {
        Complex64::new(
            StandardNormal.sample(&mut rng),
            StandardNormal.sample(&mut rng),
        )
    };

    let scale = 1.0 / (geom.unknowns() as f64).sqrt();
    let mut weights: Vec<Complex64> = (0..geom.weight_len()).map(|_| normal() * scale).collect();
    if spec.hermitian {
        let mirrored = weights.clone();
        for o in 1..geom.accel {
            for tc in 0..geom.coils {
                for sc in 0..geom.coils {
                    for k in 0..geom.source_lines {
                        for t in 0..geom.taps {
                            let here = geom.index(o, tc, sc, k, t);
                            let there = geom.index(
                                geom.accel - o,
                                tc,
                                sc,
                                geom.source_lines - 1 - k,
                                geom.taps - 1 - t,
                            );
                            weights[here] = 0.5 * (mirrored[here] + mirrored[there].conj());
                        }
                    }
                }
            }
        }
    }
    let truth = GrappaKernel::new(geom, weights, 0.0)?;

    let phase = lattice_phase(w, geom.accel);
    let row_guard = geom.taps / 2;
    let col_guard = (geom.source_lines / 2 + 1) * geom.accel;
    let mut lattice = Vec::with_capacity(geom.coils);
    for _ in 0..geom.coils {
        let mut g = ComplexGrid::zeros(h, w, Domain::KSpace);
        for r in 0..h {
            for c in (phase..w).step_by(geom.accel) {
                g.set(r, c, normal());
            }
        }
        if spec.hermitian {
            let src = g.clone();
            for r in 0..h {
                for c in (phase..w).step_by(geom.accel) {
                    let guarded = r <= row_guard
                        || r + row_guard >= h
                        || c <= col_guard
                        || c + col_guard >= w;
                    let v = if guarded {
                        ZERO
                    } else {
                        0.5 * (src.get(r, c) + src.get(h - r, w - c).conj())
                    };
                    g.set(r, c, v);
                }
            }
        }
        lattice.push(g);
    }
    let lattice = CoilStack { coils: lattice };
    let lattice_mask = Mask::uniform(h, w, geom.accel, 0)?;
    let full = apply_kernel(&lattice, &lattice_mask, &truth)?;
    Ok((full, truth))
}
