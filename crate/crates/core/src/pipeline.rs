//! Baseline reconstructions, the k-space correction block, adversarial
//! training and evaluation.

use std::path::Path;

use num_complex::Complex64;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grappa::{
    estimate_kernel, grappa_reconstruct, CoilStack, KernelGeometry, DEFAULT_RIDGE,
};
use crate::io;
use crate::kcore::{fft2c, fft2c_real, fft2c_real_adjoint, ifft2c, ComplexGrid, Domain, RealGrid};
use crate::losses::{
    loss_adversarial_critic, total_loss, GrappaLossConfig, LossInputs, LossReport, LossWeights,
    PerceptualExtractor,
};
use crate::metrics::{quality, MetricConfig};
use crate::nn::{
    adam_step, commit_bn_updates, AdamConfig, BnMode, Discriminator, ParamStore, RemUNet,
    RemUNetConfig, Tensor, BN_MOMENTUM,
};
use crate::rng::{self, stream};
use crate::sampling::{undersample, AcquisitionNoise, AcsSize, Mask, MaskSpec, Pattern};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    ZeroFill,
    Grappa,
    Net,
    NetCorrected,
}

impl Method {
    pub const ALL: [Method; 4] = [
        Method::ZeroFill,
        Method::Grappa,
        Method::Net,
        Method::NetCorrected,
    ];
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReconResult {
    /// Magnitude image.
    pub image: RealGrid,
    /// Complex image before taking the magnitude; `kspace = fft2c(complex_image)`.
    pub complex_image: ComplexGrid,
    pub kspace: ComplexGrid,
    pub method: Method,
    pub metrics: Option<(f64, f64)>,
    /// The GRAPPA path was unavailable and zero-fill was used instead.
    pub fallback: bool,
}

impl ReconResult {
    fn from_image(complex_image: ComplexGrid, method: Method, fallback: bool) -> Result<Self> {
        let kspace = fft2c(&complex_image)?;
        Ok(ReconResult {
            image: complex_image.abs(),
            complex_image,
            kspace,
            method,
            metrics: None,
            fallback,
        })
    }

    fn from_kspace(kspace: ComplexGrid, method: Method, fallback: bool) -> Result<Self> {
        let complex_image = ifft2c(&kspace)?;
        Ok(ReconResult {
            image: complex_image.abs(),
            complex_image,
            kspace,
            method,
            metrics: None,
            fallback,
        })
    }

    /// Attaches PSNR and SSIM against `reference`.
    pub fn with_metrics(mut self, reference: &RealGrid, cfg: &MetricConfig) -> Result<Self> {
        self.metrics = Some(quality(reference, &self.image, cfg)?);
        Ok(self)
    }
}

pub fn zero_fill_recon(y_u: &ComplexGrid) -> Result<ReconResult> {
    y_u.expect_domain(Domain::KSpace)?;
    ReconResult::from_kspace(y_u.clone(), Method::ZeroFill, false)
}

/// Single-coil GRAPPA on a uniformly undersampled acquisition.
pub fn grappa_recon(
    y_u: &ComplexGrid,
    m: &Mask,
    geom: &KernelGeometry,
    ridge: f64,
) -> Result<ReconResult> {
    let img = grappa_reconstruct(&CoilStack::single(y_u.clone()), m, geom, ridge)?;
    ReconResult::from_image(img, Method::Grappa, false)
}

/// Generator input image: GRAPPA when the mask admits it, else zero-fill.
/// Returns the complex image and whether the fallback was taken.
pub fn generator_input(y_u: &ComplexGrid, m: &Mask) -> Result<(ComplexGrid, bool)> {
    y_u.expect_domain(Domain::KSpace)?;
    m.check_shape(y_u)?;
    if m.is_column_constant() {
        match grappa_reconstruct(
            &CoilStack::single(y_u.clone()),
            m,
            &KernelGeometry::default(),
            DEFAULT_RIDGE,
        ) {
            Ok(img) => return Ok((img, false)),
            Err(Error::Geometry(_) | Error::AcsTooSmall { .. } | Error::SingularFit { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok((ifft2c(y_u)?, true))
}

/// Keeps the spectrum of `x_g` on the sampled set and takes the generator's
/// spectrum elsewhere.
pub fn kspace_correct(gen_img: &ComplexGrid, x_g: &ComplexGrid, m: &Mask) -> Result<ComplexGrid> {
    gen_img.check_shape(x_g)?;
    m.check_shape(x_g)?;
    let observed = fft2c(x_g)?;
    let generated = fft2c(gen_img)?;
    Ok(ComplexGrid {
        data: observed
            .data
            .iter()
            .zip(&generated.data)
            .zip(&m.keep)
            .map(|((&o, &g), &k)| if k { o } else { g })
            .collect(),
        ..observed
    })
}

/// `sqrt(sum |(a - b)|^2)` over the sampled set.
pub fn observed_residual(a: &ComplexGrid, b: &ComplexGrid, m: &Mask) -> f64 {
    a.data
        .iter()
        .zip(&b.data)
        .zip(&m.keep)
        .filter(|(_, &k)| k)
        .map(|((x, y), _)| (x - y).norm_sqr())
        .sum::<f64>()
        .sqrt()
}

/// Generator layout and weights.
#[derive(Clone, Debug)]
pub struct GeneratorState {
    pub net: RemUNet,
    pub params: ParamStore,
}

impl GeneratorState {
    pub fn new(config: RemUNetConfig, seed: u64) -> Result<Self> {
        let (net, params) = RemUNet::new(config, seed)?;
        Ok(GeneratorState { net, params })
    }

    /// Runs the generator on a `[0, 1]` image and returns a `[0, 1]` image.
    pub fn infer(&self, x: &RealGrid) -> Result<RealGrid> {
        let input = Tensor::from_image(&normalize(x));
        let (out, _) = self
            .net
            .forward(&self.params.values, &input, BnMode::Running)?;
        Ok(denormalize(&out.image(0)))
    }

    pub fn save(&self, stem: &Path) -> Result<()> {
        io::save_params(stem, &self.params, &self.net.config)
    }

    pub fn load(stem: &Path) -> Result<Self> {
        let (header, values) = io::load_params(stem)?;
        let config: RemUNetConfig = serde_json::from_value(header.config)
            .map_err(|e| Error::format(stem, e.to_string()))?;
        let mut state = GeneratorState::new(config, 0)?;
        state.params.load_values(&header.layers, values)?;
        state.params.step = header.step;
        Ok(state)
    }
}

/// `[0, 1]` to `[-1, 1]`.
fn normalize(x: &RealGrid) -> RealGrid {
    x.map(|v| 2.0 * v - 1.0)
}

fn denormalize(x: &RealGrid) -> RealGrid {
    x.map(|v| 0.5 * (v + 1.0))
}

/// Generator reconstruction, optionally passed through [`kspace_correct`].
pub fn net_recon(
    y_u: &ComplexGrid,
    m: &Mask,
    gen: &GeneratorState,
    correct: bool,
) -> Result<ReconResult> {
    let (x_g, fallback) = generator_input(y_u, m)?;
    let out = gen.infer(&x_g.abs())?;
    net_output_recon(&out, &x_g, m, correct, fallback)
}

fn net_output_recon(
    out: &RealGrid,
    x_g: &ComplexGrid,
    m: &Mask,
    correct: bool,
    fallback: bool,
) -> Result<ReconResult> {
    let gen_img = out.to_complex(Domain::Image);
    if correct {
        let k = kspace_correct(&gen_img, x_g, m)?;
        ReconResult::from_kspace(k, Method::NetCorrected, fallback)
    } else {
        ReconResult::from_image(gen_img, Method::Net, fallback)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialMode {
    /// `-log D(xhat)` with a logistic discriminator.
    Log,
    /// Raw-logit critic objective; experimental.
    Critic,
}

/// Mask recipe whose dimensions come from the data.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MaskRecipe {
    pub pattern: Pattern,
    pub target_fraction: f64,
    #[serde(default)]
    pub acs: AcsSize,
    pub seed: u64,
}

impl MaskRecipe {
    pub fn spec(&self, height: usize, width: usize) -> MaskSpec {
        MaskSpec {
            pattern: self.pattern,
            height,
            width,
            target_fraction: self.target_fraction,
            acs: self.acs,
            seed: self.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weights: LossWeights,
    pub mask: MaskRecipe,
    pub noise_sigma: f64,
    pub seed: u64,
    /// Re-estimate each image's GRAPPA-loss kernel every this many epochs.
    pub kernel_refresh_epochs: usize,
    /// Apply the correction block inside the training graph.
    pub correct_in_training: bool,
    pub adversarial: AdversarialMode,
    pub generator: RemUNetConfig,
    pub grappa_ridge: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 1,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            weights: LossWeights::default(),
            mask: MaskRecipe {
                pattern: Pattern::Gauss1D,
                target_fraction: 0.3,
                acs: AcsSize::default(),
                seed: 1,
            },
            noise_sigma: 0.0,
            seed: 0,
            kernel_refresh_epochs: 1,
            correct_in_training: true,
            adversarial: AdversarialMode::Log,
            generator: RemUNetConfig::default(),
            grappa_ridge: DEFAULT_RIDGE,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.kernel_refresh_epochs == 0 {
            return Err(Error::Config(
                "epochs, batch_size and kernel_refresh_epochs must be positive".into(),
            ));
        }
        let adam = [self.lr, self.beta1, self.beta2];
        if adam.iter().any(|v| !v.is_finite() || *v < 0.0) || self.beta1 >= 1.0 || self.beta2 >= 1.0
        {
            return Err(Error::Config(format!(
                "invalid optimiser settings lr {} beta1 {} beta2 {}",
                self.lr, self.beta1, self.beta2
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "invalid noise sigma {}",
                self.noise_sigma
            )));
        }
        self.weights.validate()?;
        self.generator.validate()
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
        }
    }
}

/// Per-epoch means of the generator loss terms plus the discriminator loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub imse: f64,
    pub fmag: f64,
    pub fphase: f64,
    pub grappa_s: f64,
    pub grappa_k: f64,
    pub perceptual: f64,
    pub adversarial: f64,
    pub total: f64,
    pub discriminator: f64,
}

impl EpochReport {
    fn accumulate(&mut self, r: &LossReport, d_loss: f64) {
        self.imse += r.imse;
        self.fmag += r.fmag;
        self.fphase += r.fphase;
        self.grappa_s += r.grappa_s;
        self.grappa_k += r.grappa_k;
        self.perceptual += r.perceptual;
        self.adversarial += r.adversarial;
        self.total += r.total;
        self.discriminator += d_loss;
    }

    fn scale(&mut self, n: usize) {
        let s = 1.0 / n as f64;
        for v in [
            &mut self.imse,
            &mut self.fmag,
            &mut self.fphase,
            &mut self.grappa_s,
            &mut self.grappa_k,
            &mut self.perceptual,
            &mut self.adversarial,
            &mut self.total,
            &mut self.discriminator,
        ] {
            *v *= s;
        }
    }
}

/// Everything [`train`] produces.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub generator: GeneratorState,
    pub discriminator: ParamStore,
    pub history: Vec<EpochReport>,
    pub mask: Mask,
}

/// Per-image fixed training data.
struct Sample {
    xt: RealGrid,
    yt: ComplexGrid,
    x_g: ComplexGrid,
    input: RealGrid,
    kernel: Option<GrappaLossConfig>,
}

fn real_of(g: &ComplexGrid) -> RealGrid {
    RealGrid {
        height: g.height,
        width: g.width,
        data: g.data.iter().map(|z| z.re).collect(),
    }
}

/// Correction block on real images: `Re(F^-1(M F x_g + (1 - M) F g))`.
fn correct_real(g: &RealGrid, observed: &ComplexGrid, m: &Mask) -> RealGrid {
    let fg = fft2c_real(g);
    let merged = ComplexGrid {
        data: observed
            .data
            .iter()
            .zip(&fg.data)
            .zip(&m.keep)
            .map(|((&o, &f), &k)| if k { o } else { f })
            .collect(),
        ..fg
    };
    fft2c_real_adjoint(&merged)
}

/// Gradient of [`correct_real`] with respect to `g`.
fn correct_real_backward(grad: &RealGrid, m: &Mask) -> RealGrid {
    let fg = fft2c_real(grad);
    let zero = Complex64::new(0.0, 0.0);
    let kept = ComplexGrid {
        data: fg
            .data
            .iter()
            .zip(&m.keep)
            .map(|(&f, &k)| if k { zero } else { f })
            .collect(),
        ..fg
    };
    fft2c_real_adjoint(&kept)
}

fn grappa_loss_config(
    spectrum: &ComplexGrid,
    sub: &Mask,
    cfg: &TrainConfig,
    noise_seed: u64,
) -> Option<GrappaLossConfig> {
    let geom = KernelGeometry::default();
    let kernel = estimate_kernel(
        &CoilStack::single(spectrum.clone()),
        &sub.acs,
        &geom,
        cfg.grappa_ridge,
    )
    .ok()?;
    Some(GrappaLossConfig {
        mask: sub.clone(),
        kernel,
        noise: AcquisitionNoise {
            sigma: cfg.noise_sigma,
            seed: noise_seed,
        },
    })
}

/// Adversarial training of the generator against a discriminator.
///
/// Each step updates the discriminator on the current batch, then the
/// generator on the total loss. Deterministic for a fixed configuration.
pub fn train(dataset: &[RealGrid], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let first = dataset
        .first()
        .ok_or_else(|| Error::Config("training needs at least one image".into()))?;
    let (h, w) = (first.height, first.width);
    if dataset.iter().any(|x| !x.same_shape(first)) {
        return Err(Error::Config(
            "training images must share dimensions".into(),
        ));
    }
    cfg.generator.check_dims(h, w)?;
    let mask = cfg.mask.spec(h, w).generate()?;
    let sub = Mask::uniform(h, w, 2, mask.acs.cols)?;

    let mut samples = Vec::with_capacity(dataset.len());
    for (i, xt) in dataset.iter().enumerate() {
        let yt = fft2c_real(xt);
        let noise = AcquisitionNoise {
            sigma: cfg.noise_sigma,
            seed: item_seed(cfg.seed, stream::TRAIN_NOISE, i as u64),
        };
        let y_u = undersample(&yt, &mask, noise)?;
        let (x_g, _) = generator_input(&y_u, &mask)?;
        samples.push(Sample {
            xt: xt.clone(),
            input: normalize(&real_of(&x_g)),
            yt,
            x_g,
            kernel: None,
        });
    }
    let observed: Vec<ComplexGrid> = samples
        .iter()
        .map(|s| fft2c(&s.x_g))
        .collect::<Result<_>>()?;

    let mut gen = GeneratorState::new(cfg.generator.clone(), cfg.seed)?;
    let (disc, mut dparams) = Discriminator::new(cfg.seed, cfg.generator.leaky_slope);
    let extractor = PerceptualExtractor::new(cfg.seed);
    let adam = cfg.adam();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut order: Vec<usize> = (0..samples.len()).collect();

    for epoch in 0..cfg.epochs {
        let mut shuffle_rng = rng::seeded_item(cfg.seed, stream::SHUFFLE, epoch as u64);
        order.shuffle(&mut shuffle_rng);
        let refresh = epoch % cfg.kernel_refresh_epochs == 0;
        let mut summary = EpochReport {
            epoch: epoch + 1,
            ..Default::default()
        };
        for batch in order.chunks(cfg.batch_size) {
            let n = batch.len();
            let inputs: Vec<&RealGrid> = batch.iter().map(|&i| &samples[i].input).collect();
            let x = Tensor::from_images(&inputs)?;
            let (out, gcache) = gen.net.forward(&gen.params.values, &x, BnMode::Batch)?;
            let gen_imgs: Vec<RealGrid> = (0..n).map(|b| denormalize(&out.image(b))).collect();
            let xhats: Vec<RealGrid> = batch
                .iter()
                .zip(&gen_imgs)
                .map(|(&i, g)| {
                    if cfg.correct_in_training {
                        correct_real(g, &observed[i], &mask)
                    } else {
                        g.clone()
                    }
                })
                .collect();

            // discriminator step
            let real_t =
                Tensor::from_images(&batch.iter().map(|&i| &samples[i].xt).collect::<Vec<_>>())?
                    .map(|v| 2.0 * v.abs() - 1.0);
            let fake_t = Tensor::from_images(&xhats.iter().collect::<Vec<_>>())?
                .map(|v| 2.0 * v.abs() - 1.0);
            let mut dgrads = dparams.zero_grads();
            let real_c = disc.forward(&dparams.values, &real_t, BnMode::Batch)?;
            let fake_c = disc.forward(&dparams.values, &fake_t, BnMode::Batch)?;
            let (d_loss, dl_real, dl_fake) = match cfg.adversarial {
                AdversarialMode::Log => {
                    let clamp = |s: f64| s.clamp(1e-7, 1.0 - 1e-7);
                    let loss = real_c.scores.iter().map(|&s| -clamp(s).ln()).sum::<f64>()
                        + fake_c
                            .scores
                            .iter()
                            .map(|&s| -(1.0 - clamp(s)).ln())
                            .sum::<f64>();
                    let dr: Vec<f64> = real_c.scores.iter().map(|s| -(1.0 - s)).collect();
                    let df: Vec<f64> = fake_c.scores.clone();
                    (loss, dr, df)
                }
                AdversarialMode::Critic => {
                    let loss =
                        fake_c.logits.iter().sum::<f64>() - real_c.logits.iter().sum::<f64>();
                    (loss, vec![-1.0; n], vec![1.0; n])
                }
            };
            if !d_loss.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    what: "discriminator loss".into(),
                });
            }
            disc.backward_logits(&dparams.values, &real_c, &dl_real, &mut dgrads);
            disc.backward_logits(&dparams.values, &fake_c, &dl_fake, &mut dgrads);
            adam_step(&mut dparams, &dgrads, &adam)?;
            commit_bn_updates(&mut dparams, &real_c.bn_updates, BN_MOMENTUM);
            commit_bn_updates(&mut dparams, &fake_c.bn_updates, BN_MOMENTUM);

            // generator step
            let score_c = disc.forward(&dparams.values, &fake_t, BnMode::Batch)?;
            let mut dscore = vec![0.0; n];
            let mut dout = Tensor::zeros(out.shape);
            let mut reports = Vec::with_capacity(n);
            for (b, &i) in batch.iter().enumerate() {
                let s = &mut samples[i];
                if refresh || s.kernel.is_none() {
                    let spectrum = fft2c_real(&xhats[b]);
                    let seed = item_seed(
                        cfg.seed,
                        stream::TRAIN_NOISE,
                        ((epoch + 1) * dataset.len() + i) as u64,
                    );
                    s.kernel = grappa_loss_config(&spectrum, &sub, cfg, seed);
                }
                let inputs = LossInputs {
                    xhat: &xhats[b],
                    xt: &s.xt,
                    yt: Some(&s.yt),
                    grappa: s.kernel.as_ref(),
                    perceptual: Some(&extractor),
                    d_out: match cfg.adversarial {
                        AdversarialMode::Log => Some(score_c.scores[b]),
                        AdversarialMode::Critic => None,
                    },
                };
                let mut report = total_loss(&inputs, &cfg.weights)?;
                match cfg.adversarial {
                    AdversarialMode::Log => dscore[b] = report.adversarial_grad,
                    AdversarialMode::Critic => {
                        let (v, g) = loss_adversarial_critic(score_c.logits[b]);
                        report.adversarial = v;
                        report.adversarial_grad = g;
                        report.total = report.weighted_total(&cfg.weights);
                        dscore[b] = g;
                    }
                }
                if !report.total.is_finite() {
                    return Err(Error::Divergence {
                        epoch: epoch + 1,
                        what: "generator loss".into(),
                    });
                }
                reports.push(report);
            }
            let mut scratch = dparams.zero_grads();
            let dfake = match cfg.adversarial {
                AdversarialMode::Log => {
                    disc.backward(&dparams.values, &score_c, &dscore, &mut scratch)
                }
                AdversarialMode::Critic => {
                    disc.backward_logits(&dparams.values, &score_c, &dscore, &mut scratch)
                }
            };
            for (b, report) in reports.iter().enumerate() {
                let xhat = &xhats[b];
                let plane = h * w;
                let mut grad = report.grad.clone();
                for (p, gval) in grad.data.iter_mut().enumerate() {
                    let v = xhat.data[p];
                    let sign = if v > 0.0 {
                        1.0
                    } else if v < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    *gval += 2.0 * sign * dfake.data[b * plane + p];
                }
                let grad = if cfg.correct_in_training {
                    correct_real_backward(&grad, &mask)
                } else {
                    grad
                };
                for (o, gval) in dout.data[b * plane..(b + 1) * plane]
                    .iter_mut()
                    .zip(&grad.data)
                {
                    *o = 0.5 * gval;
                }
                summary.accumulate(report, d_loss / n as f64);
            }
            let mut ggrads = gen.params.zero_grads();
            gen.net
                .backward(&gen.params.values, &gcache, &dout, &mut ggrads)?;
            if ggrads.iter().any(|g| !g.is_finite()) {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    what: "generator gradient".into(),
                });
            }
            adam_step(&mut gen.params, &ggrads, &adam)?;
            commit_bn_updates(&mut gen.params, &gcache.bn_updates, BN_MOMENTUM);
        }
        summary.scale(samples.len());
        history.push(summary);
    }
    Ok(TrainOutcome {
        generator: gen,
        discriminator: dparams,
        history,
        mask,
    })
}

fn item_seed(seed: u64, stream: u64, index: u64) -> u64 {
    rand::RngCore::next_u64(&mut rng::seeded_item(seed, stream, index))
}

/// Metrics of one reconstruction.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub index: usize,
    pub method: Method,
    pub psnr: f64,
    pub ssim: f64,
    /// Norm of the k-space mismatch with the acquisition on the sampled set.
    pub dc_residual: f64,
    pub fallback: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub method: Method,
    pub count: usize,
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalTable {
    pub rows: Vec<EvalRow>,
    pub summary: Vec<EvalSummary>,
}

impl EvalTable {
    pub fn summary_for(&self, method: Method) -> Option<&EvalSummary> {
        self.summary.iter().find(|s| s.method == method)
    }

    /// Per-image rows followed by one summary line per method.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for r in &self.rows {
            out.push_str(&serde_json::to_string(r).expect("row serializes"));
            out.push('\n');
        }
        for s in &self.summary {
            out.push_str(&serde_json::to_string(s).expect("summary serializes"));
            out.push('\n');
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub metrics: MetricConfig,
    pub noise: AcquisitionNoise,
    pub methods: Vec<Method>,
    /// Worker threads; `None` uses `KSPACE_LAB_THREADS` or all cores.
    pub threads: Option<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            metrics: MetricConfig::default(),
            noise: AcquisitionNoise::none(),
            methods: Method::ALL.to_vec(),
            threads: None,
        }
    }
}

/// Thread cap from `KSPACE_LAB_THREADS`, if set to a positive integer.
pub fn env_threads() -> Option<usize> {
    std::env::var("KSPACE_LAB_THREADS")
        .ok()
        .and_then(|v| v.trim().parse::<usize>().ok())
        .filter(|&n| n > 0)
}

fn mean_std(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn evaluate_one(
    index: usize,
    truth: &RealGrid,
    gen: Option<&GeneratorState>,
    m: &Mask,
    cfg: &EvalConfig,
) -> Result<Vec<EvalRow>> {
    let y = fft2c_real(truth);
    let noise = AcquisitionNoise {
        sigma: cfg.noise.sigma,
        seed: cfg.noise.seed.wrapping_add(index as u64),
    };
    let y_u = undersample(&y, m, noise)?;
    let (x_g, fallback) = generator_input(&y_u, m)?;
    let net_out = match gen {
        Some(g)
            if cfg
                .methods
                .iter()
                .any(|m| matches!(m, Method::Net | Method::NetCorrected)) =>
        {
            Some(g.infer(&x_g.abs())?)
        }
        _ => None,
    };
    let mut rows = Vec::new();
    for &method in &cfg.methods {
        let recon = match method {
            Method::ZeroFill => zero_fill_recon(&y_u)?,
            Method::Grappa => {
                let mut r = ReconResult::from_image(x_g.clone(), Method::Grappa, fallback)?;
                r.method = Method::Grappa;
                r
            }
            Method::Net | Method::NetCorrected => match &net_out {
                Some(out) => {
                    net_output_recon(out, &x_g, m, method == Method::NetCorrected, fallback)?
                }
                None => continue,
            },
        };
        let (psnr, ssim) = quality(truth, &recon.image, &cfg.metrics)?;
        rows.push(EvalRow {
            index,
            method,
            psnr,
            ssim,
            dc_residual: observed_residual(&recon.kspace, &y_u, m),
            fallback: recon.fallback,
        });
    }
    Ok(rows)
}

/// PSNR/SSIM of every requested method on every image. `masks` holds one
/// mask shared by all images or one per image. Results do not depend on the
/// thread count.
pub fn evaluate(
    dataset: &[RealGrid],
    gen: Option<&GeneratorState>,
    masks: &[Mask],
    cfg: &EvalConfig,
) -> Result<EvalTable> {
    if dataset.is_empty() {
        return Err(Error::Config("evaluation needs at least one image".into()));
    }
    if masks.len() != 1 && masks.len() != dataset.len() {
        return Err(Error::Config(format!(
            "{} masks for {} images; pass one or one per image",
            masks.len(),
            dataset.len()
        )));
    }
    let mask_for = |i: usize| {
        if masks.len() == 1 {
            &masks[0]
        } else {
            &masks[i]
        }
    };
    let threads = cfg.threads.or_else(env_threads).unwrap_or(0);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let per_image: Vec<Vec<EvalRow>> = pool.install(|| {
        dataset
            .par_iter()
            .enumerate()
            .map(|(i, x)| evaluate_one(i, x, gen, mask_for(i), cfg))
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<EvalRow> = per_image.into_iter().flatten().collect();
    let summary = Method::ALL
        .iter()
        .filter_map(|&method| {
            let psnr: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.psnr)
                .collect();
            if psnr.is_empty() {
                return None;
            }
            let ssim: Vec<f64> = rows
                .iter()
                .filter(|r| r.method == method)
                .map(|r| r.ssim)
                .collect();
            let (psnr_mean, psnr_std) = mean_std(&psnr);
            let (ssim_mean, ssim_std) = mean_std(&ssim);
            Some(EvalSummary {
                method,
                count: psnr.len(),
                psnr_mean,
                psnr_std,
                ssim_mean,
                ssim_std,
            })
        })
        .collect();
    Ok(EvalTable { rows, summary })
}
