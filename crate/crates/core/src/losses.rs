//! Multi-domain training losses with gradients with respect to the real
//! generator output `xhat`.
//!
//! Every term is a half squared norm. Spectral terms differentiate through
//! `fft2c` of a real image, whose adjoint is `Re(ifft2c(.))`.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grappa::{apply_kernel, apply_kernel_adjoint, CoilStack, GrappaKernel};
use crate::kcore::{
    fft2c_real, fft2c_real_adjoint, ifft2c, ComplexGrid, Domain, RealGrid, PHASE_EPS,
};
use crate::nn::ops::{leaky_relu, leaky_relu_backward, Conv2d};
use crate::nn::{ParamStore, Tensor};
use crate::rng::{self, stream};
use crate::sampling::{undersample, AcquisitionNoise, Mask};

/// Probability clamp for the adversarial log.
pub const ADVERSARIAL_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub delta: f64,
    pub zeta: f64,
    pub kappa: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 15.0,
            beta: 0.1,
            gamma: 0.05,
            delta: 0.01,
            zeta: 0.00025,
            kappa: 1e-3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha, self.beta, self.gamma, self.delta, self.zeta, self.kappa,
        ];
        if all.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(Error::Config(format!(
                "loss weights must be finite and nonnegative: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Component values and the weighted total.
///
/// `grad` is d total / d xhat without the adversarial path, which runs
/// through the discriminator and is added by the caller using
/// `adversarial_grad` (d adversarial / d score).
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub imse: f64,
    pub fmag: f64,
    pub fphase: f64,
    pub grappa_s: f64,
    pub grappa_k: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
    #[serde(skip)]
    pub grad: RealGrid,
    #[serde(skip)]
    pub adversarial_grad: f64,
}

impl LossReport {
    pub fn weighted_total(&self, w: &LossWeights) -> f64 {
        w.alpha * self.imse
            + w.beta * self.fmag
            + w.gamma * self.fphase
            + w.delta * self.grappa_s
            + w.zeta * self.grappa_k
            + w.kappa * self.perceptual
            + self.adversarial
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

fn half_sq(v: impl Iterator<Item = f64>) -> f64 {
    0.5 * v.map(|d| d * d).sum::<f64>()
}

pub fn loss_imse(xhat: &RealGrid, xt: &RealGrid) -> Result<(f64, RealGrid)> {
    xhat.check_shape(xt)?;
    let grad = RealGrid {
        data: xhat.data.iter().zip(&xt.data).map(|(a, b)| a - b).collect(),
        ..xhat.clone()
    };
    Ok((half_sq(grad.data.iter().copied()), grad))
}

/// Modulus-spectrum loss. Entries with `|Y| <= tau0` get no gradient.
pub fn loss_fmag(xhat: &RealGrid, xt: &RealGrid) -> Result<(f64, RealGrid)> {
    xhat.check_shape(xt)?;
    let y = fft2c_real(xhat);
    let t = fft2c_real(xt);
    let mut value = 0.0;
    let g: Vec<Complex64> = y
        .data
        .iter()
        .zip(&t.data)
        .map(|(&z, &tz)| {
            let m = z.norm();
            let d = m - tz.norm();
            value += 0.5 * d * d;
            if m > PHASE_EPS {
                z * (d / m)
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let g = ComplexGrid { data: g, ..y };
    Ok((value, fft2c_real_adjoint(&g)))
}

fn unit(z: Complex64) -> Complex64 {
    let m = z.norm();
    if m > PHASE_EPS {
        z / m
    } else {
        Complex64::new(0.0, 0.0)
    }
}

/// Unit-phasor spectrum loss.
pub fn loss_fphase(xhat: &RealGrid, xt: &RealGrid) -> Result<(f64, RealGrid)> {
    xhat.check_shape(xt)?;
    let y = fft2c_real(xhat);
    let t = fft2c_real(xt);
    let mut value = 0.0;
    let g: Vec<Complex64> = y
        .data
        .iter()
        .zip(&t.data)
        .map(|(&z, &tz)| {
            let u = unit(z);
            let gp = u - unit(tz);
            value += 0.5 * gp.norm_sqr();
            let m = z.norm();
            if m > PHASE_EPS {
                // d(z/|z|) projects out the radial component
                (gp - u * (u.conj() * gp).re) / m
            } else {
                Complex64::new(0.0, 0.0)
            }
        })
        .collect();
    let g = ComplexGrid { data: g, ..y };
    Ok((value, fft2c_real_adjoint(&g)))
}

/// Fixed ingredients of the GRAPPA consistency loss.
#[derive(Clone, Debug)]
pub struct GrappaLossConfig {
    /// Uniform resampling mask with ACS, independent of the training mask.
    pub mask: Mask,
    pub kernel: GrappaKernel,
    pub noise: AcquisitionNoise,
}

/// Both GRAPPA terms and their separate image gradients.
#[derive(Clone, Debug, PartialEq)]
pub struct GrappaLoss {
    pub value_s: f64,
    pub value_k: f64,
    pub grad_s: RealGrid,
    pub grad_k: RealGrid,
}

impl GrappaLoss {
    /// `delta * grad_s + zeta * grad_k`.
    pub fn weighted_grad(&self, delta: f64, zeta: f64) -> RealGrid {
        RealGrid {
            data: self
                .grad_s
                .data
                .iter()
                .zip(&self.grad_k.data)
                .map(|(s, k)| delta * s + zeta * k)
                .collect(),
            ..self.grad_s.clone()
        }
    }
}

/// Resamples `fft2c(xhat)` on the uniform mask, fills it with the fixed
/// kernel and compares against the truth in both domains. The kernel is a
/// constant here; gradients flow through masking, fill and transforms only.
pub fn loss_grappa(
    xhat: &RealGrid,
    xt: &RealGrid,
    yt: &ComplexGrid,
    cfg: &GrappaLossConfig,
) -> Result<GrappaLoss> {
    xhat.check_shape(xt)?;
    yt.expect_domain(Domain::KSpace)?;
    if (yt.height, yt.width) != (xt.height, xt.width) {
        return Err(Error::shape(
            "GRAPPA loss target k-space does not match the image",
        ));
    }
    let y = fft2c_real(xhat);
    let y_gu = undersample(&y, &cfg.mask, cfg.noise)?;
    let filled = apply_kernel(&CoilStack::single(y_gu), &cfg.mask, &cfg.kernel)?;
    let filled = &filled.coils[0];

    let diff_k = filled.axpby(Complex64::new(1.0, 0.0), yt, Complex64::new(-1.0, 0.0))?;
    let value_k = 0.5 * diff_k.energy();

    let image = ifft2c(filled)?;
    let residual = RealGrid {
        data: image
            .data
            .iter()
            .zip(&xt.data)
            .map(|(z, t)| z.re - t)
            .collect(),
        ..xt.clone()
    };
    let value_s = half_sq(residual.data.iter().copied());
    let g_s = fft2c_real(&residual);

    let pull_back = |g: ComplexGrid| -> Result<RealGrid> {
        let back = apply_kernel_adjoint(&CoilStack::single(g), &cfg.mask, &cfg.kernel)?;
        let masked = mask_grid(&back.coils[0], &cfg.mask);
        Ok(fft2c_real_adjoint(&masked))
    };
    Ok(GrappaLoss {
        value_s,
        value_k,
        grad_s: pull_back(g_s)?,
        grad_k: pull_back(diff_k)?,
    })
}

fn mask_grid(g: &ComplexGrid, m: &Mask) -> ComplexGrid {
    ComplexGrid {
        data: g
            .data
            .iter()
            .zip(&m.keep)
            .map(|(&z, &k)| if k { z } else { Complex64::new(0.0, 0.0) })
            .collect(),
        ..g.clone()
    }
}

pub const PERCEPTUAL_WIDTHS: [usize; 3] = [8, 16, 32];
const PERCEPTUAL_SLOPE: f64 = 0.2;

/// Frozen three-stage feature pyramid standing in for a pretrained extractor.
#[derive(Clone, Debug)]
pub struct PerceptualExtractor {
    stages: Vec<Conv2d>,
    params: ParamStore,
}

impl PerceptualExtractor {
    pub fn new(seed: u64) -> Self {
        let mut rng = rng::seeded(seed, stream::INIT_PERCEPTUAL);
        let mut params = ParamStore::new();
        let mut cin = 1;
        let stages = PERCEPTUAL_WIDTHS
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let c = Conv2d::new(&mut params, &format!("p{i}"), cin, w, 3, 2, 1, &mut rng);
                cin = w;
                c
            })
            .collect();
        PerceptualExtractor { stages, params }
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    /// Replaces the weights, e.g. with an externally trained extractor.
    pub fn load(&mut self, store: &ParamStore) -> Result<()> {
        self.params
            .load_values(&store.manifest, store.values.clone())
    }

    fn check(&self, x: &RealGrid) -> Result<()> {
        let f = 1 << self.stages.len();
        if x.height % f != 0 || x.width % f != 0 || x.is_empty() {
            return Err(Error::shape(format!(
                "perceptual features need dims divisible by {f}, got {}x{}",
                x.height, x.width
            )));
        }
        Ok(())
    }

    /// Pre-activation and activation of every stage.
    fn run(&self, x: &RealGrid) -> Result<Vec<(Tensor, Tensor, Tensor)>> {
        let p = &self.params.values;
        let mut cur = Tensor::from_image(x);
        let mut out = Vec::with_capacity(self.stages.len());
        for conv in &self.stages {
            let a = conv.forward(p, &cur)?;
            let f = leaky_relu(&a, PERCEPTUAL_SLOPE);
            out.push((cur, a, f.clone()));
            cur = f;
        }
        Ok(out)
    }

    /// Feature maps of every stage.
    pub fn features(&self, x: &RealGrid) -> Result<Vec<Tensor>> {
        self.check(x)?;
        Ok(self.run(x)?.into_iter().map(|(_, _, f)| f).collect())
    }
}

pub fn loss_perceptual(
    xhat: &RealGrid,
    xt: &RealGrid,
    ex: &PerceptualExtractor,
) -> Result<(f64, RealGrid)> {
    xhat.check_shape(xt)?;
    ex.check(xhat)?;
    let a = ex.run(xhat)?;
    let b = ex.features(xt)?;
    let p = &ex.params.values;
    let mut scratch = vec![0.0; p.len()];
    let mut value = 0.0;
    let mut upstream: Option<Tensor> = None;
    for (i, conv) in ex.stages.iter().enumerate().rev() {
        let (input, pre, feat) = &a[i];
        let mut d = Tensor {
            shape: feat.shape,
            data: feat
                .data
                .iter()
                .zip(&b[i].data)
                .map(|(x, y)| x - y)
                .collect(),
        };
        value += half_sq(d.data.iter().copied());
        if let Some(u) = upstream.take() {
            d.add_assign(&u);
        }
        let dpre = leaky_relu_backward(pre, &d, PERCEPTUAL_SLOPE);
        upstream = Some(conv.backward(p, input, &dpre, &mut scratch));
    }
    let grad = upstream.expect("at least one stage").image(0);
    Ok((value, grad))
}

/// Generator adversarial term `-log d` with `d` clamped away from 0 and 1.
pub fn loss_adversarial(d_out: f64) -> (f64, f64) {
    let d = d_out.clamp(ADVERSARIAL_CLAMP, 1.0 - ADVERSARIAL_CLAMP);
    (-d.ln(), -1.0 / d)
}

/// Critic-style alternative on the raw discriminator logit: `-logit`.
pub fn loss_adversarial_critic(logit: f64) -> (f64, f64) {
    (-logit, -1.0)
}

/// Everything [`total_loss`] compares. Absent optional parts contribute zero.
#[derive(Clone, Copy, Debug)]
pub struct LossInputs<'a> {
    pub xhat: &'a RealGrid,
    pub xt: &'a RealGrid,
    /// Truth k-space, needed with `grappa`.
    pub yt: Option<&'a ComplexGrid>,
    pub grappa: Option<&'a GrappaLossConfig>,
    pub perceptual: Option<&'a PerceptualExtractor>,
    /// Discriminator score of `xhat`.
    pub d_out: Option<f64>,
}

pub fn total_loss(inputs: &LossInputs<'_>, w: &LossWeights) -> Result<LossReport> {
    w.validate()?;
    let (xhat, xt) = (inputs.xhat, inputs.xt);
    let (imse, g_imse) = loss_imse(xhat, xt)?;
    let (fmag, g_fmag) = loss_fmag(xhat, xt)?;
    let (fphase, g_fphase) = loss_fphase(xhat, xt)?;
    let mut grad = RealGrid {
        data: (0..xhat.len())
            .map(|i| {
                w.alpha * g_imse.data[i] + w.beta * g_fmag.data[i] + w.gamma * g_fphase.data[i]
            })
            .collect(),
        ..xhat.clone()
    };
    let mut add = |g: &RealGrid, scale: f64| {
        for (a, b) in grad.data.iter_mut().zip(&g.data) {
            *a += scale * b;
        }
    };
    let (mut grappa_s, mut grappa_k) = (0.0, 0.0);
    if let Some(cfg) = inputs.grappa {
        let yt = inputs
            .yt
            .ok_or_else(|| Error::Config("GRAPPA loss needs the truth k-space".into()))?;
        let g = loss_grappa(xhat, xt, yt, cfg)?;
        grappa_s = g.value_s;
        grappa_k = g.value_k;
        add(&g.weighted_grad(w.delta, w.zeta), 1.0);
    }
    let mut perceptual = 0.0;
    if let Some(ex) = inputs.perceptual {
        let (v, g) = loss_perceptual(xhat, xt, ex)?;
        perceptual = v;
        add(&g, w.kappa);
    }
    let (adversarial, adversarial_grad) = inputs.d_out.map(loss_adversarial).unwrap_or((0.0, 0.0));
    let mut report = LossReport {
        imse,
        fmag,
        fphase,
        grappa_s,
        grappa_k,
        perceptual,
        adversarial,
        total: 0.0,
        grad,
        adversarial_grad,
    };
    report.total = report.weighted_total(w);
    Ok(report)
}
