//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any criterion fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use num_complex::Complex64;

use kspace_lab::grappa::{
    apply_kernel, estimate_kernel, make_linear_data, KernelGeometry, LinearDataSpec,
};
use kspace_lab::kcore::{fft2c, ifft2c, real_part, ComplexGrid, Domain, RealGrid};
use kspace_lab::losses::{
    loss_adversarial, loss_fmag, loss_fphase, loss_grappa, loss_imse, loss_perceptual,
    GrappaLossConfig, PerceptualExtractor,
};
use kspace_lab::metrics::{psnr, ssim, MetricConfig, PSNR_SENTINEL};
use kspace_lab::nn::gradcheck::{
    check_input_grad, check_param_grad, finite_difference, max_relative_error, random_tensor,
    random_vec,
};
use kspace_lab::nn::ops::{
    global_avg_pool, global_avg_pool_backward, leaky_relu, leaky_relu_backward, tanh_backward,
    BatchNorm, Conv2d, ConvTranspose2d, Linear,
};
use kspace_lab::nn::{
    BnMode, Discriminator, ParamStore, RemUNet, RemUNetConfig, RemnantBlock, Tensor,
};
use kspace_lab::phantom::{make_phantoms, PhantomKind, PhantomSpec};
use kspace_lab::pipeline::{
    evaluate, kspace_correct, observed_residual, train, EvalConfig, Method, TrainConfig,
};
use kspace_lab::rng;
use kspace_lab::sampling::{undersample, AcquisitionNoise, AcsSize, Mask, MaskSpec, Pattern};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_complex(h: usize, w: usize, domain: Domain, seed: u64) -> ComplexGrid {
    let v = random_vec(2 * h * w, seed);
    let data = v
        .chunks_exact(2)
        .map(|c| Complex64::new(c[0], c[1]))
        .collect();
    ComplexGrid::new(h, w, domain, data).unwrap()
}

fn random_image(n: usize, seed: u64) -> RealGrid {
    RealGrid::new(n, n, random_vec(n * n, seed)).unwrap()
}

fn fft_contracts() -> Outcome {
    let mut worst_round: f64 = 0.0;
    let mut worst_parseval: f64 = 0.0;
    for seed in 0..10 {
        let x = random_complex(64, 64, Domain::Image, seed);
        let y = fft2c(&x).map_err(|e| e.to_string())?;
        let back = ifft2c(&y).map_err(|e| e.to_string())?;
        worst_round = worst_round.max(back.max_abs_diff(&x));
        worst_parseval = worst_parseval.max((y.energy() - x.energy()).abs() / x.energy());
    }
    ensure(worst_round < 1e-12, || {
        format!("roundtrip error {worst_round:e}")
    })?;
    ensure(worst_parseval < 1e-10, || {
        format!("Parseval error {worst_parseval:e}")
    })?;
    Ok(format!(
        "roundtrip {worst_round:.1e}, Parseval {worst_parseval:.1e}"
    ))
}

fn grappa_oracle() -> Outcome {
    let mut report = Vec::new();
    for coils in [1, 2] {
        let geom = KernelGeometry {
            coils,
            ..Default::default()
        };
        let (full, truth) =
            make_linear_data(&LinearDataSpec::new(64, 64, geom, 40 + coils as u64)).unwrap();
        let mask = Mask::uniform(64, 64, 2, 16).unwrap();
        let y_u = full.map(|g| undersample(g, &mask, AcquisitionNoise::none()).unwrap());
        let kernel = estimate_kernel(&y_u, &mask.acs, &geom, 1e-9).map_err(|e| e.to_string())?;
        let kerr = kernel.max_abs_diff(&truth);
        let filled = apply_kernel(&y_u, &mask, &kernel).map_err(|e| e.to_string())?;
        let nrmse = filled.nrmse(&full);
        ensure(kerr < 1e-8, || {
            format!("{coils} coil(s): kernel error {kerr:e}")
        })?;
        ensure(nrmse < 1e-6, || {
            format!("{coils} coil(s): fill NRMSE {nrmse:e}")
        })?;
        report.push(format!("Nc={coils}: kernel {kerr:.1e}, NRMSE {nrmse:.1e}"));
    }
    Ok(report.join("; "))
}

fn correction_contract() -> Outcome {
    let patterns = [
        Pattern::Gauss1D,
        Pattern::Gauss2D,
        Pattern::Poisson2D,
        Pattern::Uniform,
    ];
    let mut worst_idem: f64 = 0.0;
    let mut worst_identity: f64 = 0.0;
    for i in 0..100u64 {
        let n = 32;
        let m = MaskSpec {
            pattern: patterns[i as usize % patterns.len()],
            height: n,
            width: n,
            target_fraction: 0.3 + 0.05 * (i % 5) as f64,
            acs: AcsSize::default(),
            seed: i,
        }
        .generate()
        .unwrap();
        let gen = random_image(n, 1000 + i).to_complex(Domain::Image);
        let x_g = random_complex(n, n, Domain::Image, 2000 + i);
        let y = kspace_correct(&gen, &x_g, &m).unwrap();
        let observed = fft2c(&x_g).unwrap();
        let residual = observed_residual(&y, &observed, &m);
        ensure(residual == 0.0, || {
            format!("triple {i}: observed residual {residual:e}")
        })?;
        let again = kspace_correct(&ifft2c(&y).unwrap(), &x_g, &m).unwrap();
        worst_idem = worst_idem.max(again.max_abs_diff(&y));
        let identity = ifft2c(&kspace_correct(&x_g, &x_g, &m).unwrap()).unwrap();
        worst_identity = worst_identity.max(identity.max_abs_diff(&x_g));
    }
    ensure(worst_idem < 1e-12, || {
        format!("idempotence error {worst_idem:e}")
    })?;
    ensure(worst_identity < 1e-12, || {
        format!("identity error {worst_identity:e}")
    })?;
    Ok(format!(
        "residual 0 on all 100; idempotence {worst_idem:.1e}; identity {worst_identity:.1e}"
    ))
}

const GRAD_TOL: f64 = 1e-4;

fn grid_check(
    name: &str,
    f: &dyn Fn(&RealGrid) -> f64,
    x: &RealGrid,
    analytic: &RealGrid,
) -> Result<f64, String> {
    let coords: Vec<usize> = (0..x.len()).collect();
    let fd = finite_difference(
        |v| f(&RealGrid::new(x.height, x.width, v.to_vec()).unwrap()),
        &x.data,
        &coords,
    );
    let err = max_relative_error(&analytic.data, &fd);
    ensure(err < GRAD_TOL, || format!("{name}: relative error {err:e}"))?;
    Ok(err)
}

fn guarded(name: &str, f: impl FnOnce() -> f64) -> Result<f64, String> {
    catch_unwind(AssertUnwindSafe(f)).map_err(|e| {
        let msg = e
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_default();
        format!("{name}: {msg}")
    })
}

fn dot(a: &Tensor, b: &Tensor) -> f64 {
    a.data.iter().zip(&b.data).map(|(x, y)| x * y).sum()
}

fn layer_check(
    name: &str,
    p: &[f64],
    trainable: &[usize],
    x: &Tensor,
    loss: &dyn Fn(&[f64], &Tensor) -> f64,
    back: &dyn Fn(&[f64], &Tensor, &mut [f64]) -> Tensor,
) -> Result<f64, String> {
    guarded(name, || {
        let a = check_input_grad(p, x, loss, back, GRAD_TOL);
        let b = check_param_grad(p, trainable, x, loss, back, GRAD_TOL);
        a.max(b)
    })
}

fn gradient_suite() -> Outcome {
    let n = 16;
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut note = |e: f64| {
        worst = worst.max(e);
        checked += 1;
    };

    // loss terms
    let (x, t) = (random_image(n, 1), random_image(n, 2));
    note(grid_check(
        "imse",
        &|v| loss_imse(v, &t).unwrap().0,
        &x,
        &loss_imse(&x, &t).unwrap().1,
    )?);
    note(grid_check(
        "fmag",
        &|v| loss_fmag(v, &t).unwrap().0,
        &x,
        &loss_fmag(&x, &t).unwrap().1,
    )?);
    note(grid_check(
        "fphase",
        &|v| loss_fphase(v, &t).unwrap().0,
        &x,
        &loss_fphase(&x, &t).unwrap().1,
    )?);
    let spec = LinearDataSpec {
        hermitian: true,
        ..LinearDataSpec::new(n, n, KernelGeometry::default(), 3)
    };
    let (full, kernel) = make_linear_data(&spec).unwrap();
    let yt = full.coils[0].clone();
    let xt = real_part(&ifft2c(&yt).unwrap()).unwrap();
    let cfg = GrappaLossConfig {
        mask: Mask::uniform(n, n, 2, 8).unwrap(),
        kernel,
        noise: AcquisitionNoise::none(),
    };
    let g = loss_grappa(&x, &xt, &yt, &cfg).unwrap();
    note(grid_check(
        "grappa_s",
        &|v| loss_grappa(v, &xt, &yt, &cfg).unwrap().value_s,
        &x,
        &g.grad_s,
    )?);
    note(grid_check(
        "grappa_k",
        &|v| loss_grappa(v, &xt, &yt, &cfg).unwrap().value_k,
        &x,
        &g.grad_k,
    )?);
    let ex = PerceptualExtractor::new(4);
    note(grid_check(
        "perceptual",
        &|v| loss_perceptual(v, &t, &ex).unwrap().0,
        &x,
        &loss_perceptual(&x, &t, &ex).unwrap().1,
    )?);
    for d in [0.1, 0.5, 0.9] {
        let fd = finite_difference(|v| loss_adversarial(v[0]).0, &[d], &[0]);
        let err = max_relative_error(&[loss_adversarial(d).1], &fd);
        ensure(err < GRAD_TOL, || format!("adversarial at {d}: {err:e}"))?;
        note(err);
    }

    // operators
    let mut r = rng::seeded(5, 0);
    for (k, stride, pad) in [(3, 1, 1), (3, 2, 1), (1, 1, 0)] {
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, k, stride, pad, &mut r);
        let x = random_tensor([1, 2, n, n], 6);
        let (oh, ow) = conv.out_dims(n, n);
        let probe = random_tensor([1, 3, oh, ow], 7);
        let loss = |p: &[f64], x: &Tensor| dot(&conv.forward(p, x).unwrap(), &probe);
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| conv.backward(p, x, &probe, g);
        note(layer_check(
            "conv",
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
        )?);
    }
    {
        let mut store = ParamStore::new();
        let up = ConvTranspose2d::upsample2(&mut store, "u", 2, 2, &mut r);
        let x = random_tensor([1, 2, n / 2, n / 2], 8);
        let probe = random_tensor([1, 2, n, n], 9);
        let loss = |p: &[f64], x: &Tensor| dot(&up.forward(p, x).unwrap(), &probe);
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| up.backward(p, x, &probe, g);
        note(layer_check(
            "conv_transpose",
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
        )?);
    }
    for mode in [BnMode::Batch, BnMode::Running, BnMode::PassThrough] {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2);
        let p: Vec<f64> = store
            .values
            .iter()
            .enumerate()
            .map(|(i, v)| v + 0.1 * (i as f64 + 1.0).sin())
            .collect();
        let x = random_tensor([2, 2, n, n], 10);
        let probe = random_tensor([2, 2, n, n], 11);
        let loss = |p: &[f64], x: &Tensor| {
            let (y, _) = bn.forward(p, x, mode, &mut Vec::new()).unwrap();
            y.data
                .iter()
                .zip(&probe.data)
                .map(|(a, b)| a * b + 0.5 * a * a)
                .sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let (y, cache) = bn.forward(p, x, mode, &mut Vec::new()).unwrap();
            let dy = Tensor {
                shape: y.shape,
                data: y.data.iter().zip(&probe.data).map(|(a, b)| a + b).collect(),
            };
            bn.backward(p, &cache, &dy, g)
        };
        note(layer_check(
            "batch_norm",
            &p,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
        )?);
    }
    {
        let x = random_tensor([1, 2, n, n], 12);
        let probe = random_tensor([1, 2, n, n], 13);
        let loss = |_: &[f64], x: &Tensor| dot(&leaky_relu(x, 0.2), &probe);
        let back = |_: &[f64], x: &Tensor, _: &mut [f64]| leaky_relu_backward(x, &probe, 0.2);
        note(layer_check("leaky_relu", &[], &[], &x, &loss, &back)?);
        let loss = |_: &[f64], x: &Tensor| dot(&x.map(f64::tanh), &probe);
        let back = |_: &[f64], x: &Tensor, _: &mut [f64]| tanh_backward(&x.map(f64::tanh), &probe);
        note(layer_check("tanh", &[], &[], &x, &loss, &back)?);
    }
    {
        let mut store = ParamStore::new();
        let lin = Linear::new(&mut store, "fc", 2, 3, &mut r);
        let x = random_tensor([2, 2, n, n], 14);
        let probe = [0.4, -0.9, 1.3, 0.2, -0.5, 0.8];
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            lin.forward(p, &global_avg_pool(x))
                .iter()
                .zip(&probe)
                .map(|(a, b)| a * b)
                .sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let pooled = global_avg_pool(x);
            global_avg_pool_backward(x.shape, &lin.backward(p, &pooled, &probe, g))
        };
        note(layer_check(
            "linear_pool",
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
        )?);
    }
    {
        let mut store = ParamStore::new();
        let block = RemnantBlock::new(&mut store, "rb", [2, 3, 4], &mut r);
        let x = random_tensor([1, 1, n, n], 15);
        let probe = random_tensor([1, 1, n, n], 16);
        let loss = |p: &[f64], x: &Tensor| {
            let (y, _) = block
                .forward(p, x, BnMode::Batch, 0.2, &mut Vec::new())
                .unwrap();
            dot(&y, &probe)
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let (_, cache) = block
                .forward(p, x, BnMode::Batch, 0.2, &mut Vec::new())
                .unwrap();
            block.backward(p, &cache, &probe, 0.2, g)
        };
        note(layer_check(
            "remnant_block",
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
        )?);
    }
    {
        let config = RemUNetConfig {
            levels: 2,
            base_width: 2,
            remnant_widths: [2, 3, 4],
            leaky_slope: 0.2,
        };
        let (net, store) = RemUNet::new(config, 17).unwrap();
        let x = random_tensor([1, 1, n, n], 18);
        let probe = random_tensor([1, 1, n, n], 19);
        let loss =
            |p: &[f64], x: &Tensor| dot(&net.forward(p, x, BnMode::Batch).unwrap().0, &probe);
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let (_, cache) = net.forward(p, x, BnMode::Batch).unwrap();
            net.backward(p, &cache, &probe, g).unwrap()
        };
        note(layer_check(
            "generator",
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
        )?);
    }
    {
        let (d, store) = Discriminator::new(20, 0.2);
        let x = random_tensor([2, 1, n, n], 21);
        let weights = [0.6, -1.1];
        let loss = |p: &[f64], x: &Tensor| -> f64 {
            let c = d.forward(p, x, BnMode::Batch).unwrap();
            c.scores.iter().zip(&weights).map(|(s, w)| w * s).sum()
        };
        let back = |p: &[f64], x: &Tensor, g: &mut [f64]| {
            let c = d.forward(p, x, BnMode::Batch).unwrap();
            d.backward(p, &c, &weights, g)
        };
        note(layer_check(
            "discriminator",
            &store.values,
            &store.trainable_indices(),
            &x,
            &loss,
            &back,
        )?);
    }
    Ok(format!(
        "{checked} checks, worst relative error {worst:.1e}"
    ))
}

fn mask_contracts() -> Outcome {
    let (h, w) = (128, 128);
    let mut masks = 0;
    let mut worst_poisson: f64 = 0.0;
    for pattern in [Pattern::Gauss1D, Pattern::Gauss2D, Pattern::Poisson2D] {
        for frac in [0.1, 0.2, 0.3, 0.4, 0.5] {
            for seed in 0..10 {
                let spec = MaskSpec {
                    pattern,
                    height: h,
                    width: w,
                    target_fraction: frac,
                    acs: AcsSize::default(),
                    seed,
                };
                let m = spec
                    .generate()
                    .map_err(|e| format!("{pattern:?} {frac} {seed}: {e}"))?;
                let again = spec.generate().unwrap();
                ensure(m == again, || {
                    format!("{pattern:?} {frac} {seed}: not deterministic")
                })?;
                let tag = || format!("{pattern:?} fraction {frac} seed {seed}");
                match pattern {
                    Pattern::Gauss1D => {
                        ensure(m.is_column_constant(), || {
                            format!("{}: not column-constant", tag())
                        })?;
                        let want = (frac * w as f64).round() as usize;
                        let got = m.sampled_columns().len();
                        ensure(got == want, || {
                            format!("{}: {got} columns, want {want}", tag())
                        })?;
                    }
                    Pattern::Gauss2D => {
                        let want = (frac * (h * w) as f64).round() as usize;
                        let got = m.sampled_count();
                        ensure(got == want, || {
                            format!("{}: {got} samples, want {want}", tag())
                        })?;
                    }
                    _ => {
                        let want = frac * (h * w) as f64;
                        let rel = (m.sampled_count() as f64 - want).abs() / want;
                        worst_poisson = worst_poisson.max(rel);
                        ensure(rel <= 0.02, || {
                            format!("{}: off by {:.2}%", tag(), 100.0 * rel)
                        })?;
                    }
                }
                let (r0, r1, c0, c1) = m.acs.bounds(h, w);
                ensure(
                    (r0..r1).all(|r| (c0..c1).all(|c| m.is_sampled(r, c))),
                    || format!("{}: ACS not fully sampled", tag()),
                )?;
                masks += 1;
            }
        }
    }
    Ok(format!(
        "{masks} masks; worst Poisson deviation {:.2}%",
        100.0 * worst_poisson
    ))
}

fn metric_cases() -> Outcome {
    let cfg = MetricConfig::default();
    let x = RealGrid::new(
        64,
        64,
        random_vec(64 * 64, 30)
            .iter()
            .map(|v| 127.5 + 100.0 * v)
            .collect(),
    )
    .unwrap();
    let y = RealGrid::new(
        64,
        64,
        random_vec(64 * 64, 31)
            .iter()
            .map(|v| 127.5 + 100.0 * v)
            .collect(),
    )
    .unwrap();
    let p_same = psnr(&x, &x, &cfg).unwrap();
    let s_same = ssim(&x, &x, &cfg).unwrap();
    ensure(p_same == PSNR_SENTINEL, || {
        format!("identical PSNR {p_same}")
    })?;
    ensure((s_same - 1.0).abs() < 1e-9, || {
        format!("identical SSIM {s_same}")
    })?;
    let p1 = psnr(&x, &x.map(|v| v + 1.0), &cfg).unwrap();
    ensure((p1 - 48.1308).abs() < 1e-3, || {
        format!("offset-1 PSNR {p1}")
    })?;
    let dp = (psnr(&x, &y, &cfg).unwrap() - psnr(&y, &x, &cfg).unwrap()).abs();
    let ds = (ssim(&x, &y, &cfg).unwrap() - ssim(&y, &x, &cfg).unwrap()).abs();
    ensure(dp < 1e-12 && ds < 1e-12, || {
        format!("asymmetry psnr {dp:e} ssim {ds:e}")
    })?;
    Ok(format!(
        "offset-1 PSNR {p1:.4} dB, symmetry {:.1e}",
        dp.max(ds)
    ))
}

fn training_run() -> Outcome {
    let all = make_phantoms(&PhantomSpec::new(PhantomKind::Blobs, 64, 220, 11)).unwrap();
    let (train_set, held_out) = all.split_at(200);
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 1,
        lr: 1e-4,
        ..Default::default()
    };
    ensure(
        cfg.mask.pattern == Pattern::Gauss1D && cfg.mask.target_fraction == 0.3,
        || "unexpected default mask".into(),
    )?;
    let first = train(train_set, &cfg).map_err(|e| e.to_string())?;
    let (l1, l30) = (first.history[0].total, first.history[29].total);
    let table = evaluate(
        held_out,
        Some(&first.generator),
        std::slice::from_ref(&first.mask),
        &EvalConfig {
            methods: vec![Method::ZeroFill, Method::NetCorrected],
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let zf = table.summary_for(Method::ZeroFill).unwrap().psnr_mean;
    let net = table.summary_for(Method::NetCorrected).unwrap().psnr_mean;
    let second = train(train_set, &cfg).map_err(|e| e.to_string())?;
    let identical = second.generator.params.values == first.generator.params.values
        && second.discriminator.values == first.discriminator.values
        && second.history == first.history;
    let summary = format!(
        "loss {l1:.2} -> {l30:.2} (ratio {:.3}); held-out PSNR NetCorrected {net:.2} vs ZeroFill {zf:.2} dB (+{:.2}); rerun identical: {identical}",
        l30 / l1,
        net - zf
    );
    ensure(l30 < 0.5 * l1, || format!("loss did not halve: {summary}"))?;
    ensure(net - zf >= 1.0, || format!("margin below 1 dB: {summary}"))?;
    ensure(identical, || format!("rerun differs: {summary}"))?;
    Ok(summary)
}

fn baseline_ordering() -> Outcome {
    let images = make_phantoms(&PhantomSpec::new(PhantomKind::Ellipses, 64, 20, 21)).unwrap();
    let m = Mask::uniform(64, 64, 2, 16).unwrap();
    let table = evaluate(
        &images,
        None,
        std::slice::from_ref(&m),
        &EvalConfig {
            methods: vec![Method::ZeroFill, Method::Grappa],
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    ensure(table.rows.iter().all(|r| !r.fallback), || {
        "GRAPPA path fell back to zero-fill".into()
    })?;
    let zf = table.summary_for(Method::ZeroFill).unwrap().psnr_mean;
    let gr = table.summary_for(Method::Grappa).unwrap().psnr_mean;
    ensure(gr > zf, || {
        format!("Grappa {gr:.2} dB <= ZeroFill {zf:.2} dB")
    })?;
    Ok(format!("Grappa {gr:.2} dB > ZeroFill {zf:.2} dB"))
}

struct Criterion {
    name: &'static str,
    limit: Duration,
    run: fn() -> Outcome,
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            name: "1 fft contracts",
            limit: Duration::from_secs(1),
            run: fft_contracts,
        },
        Criterion {
            name: "2 grappa oracle",
            limit: Duration::from_secs(5),
            run: grappa_oracle,
        },
        Criterion {
            name: "3 k-space correction contract",
            limit: Duration::from_secs(10),
            run: correction_contract,
        },
        Criterion {
            name: "4 gradient suite",
            limit: Duration::from_secs(120),
            run: gradient_suite,
        },
        Criterion {
            name: "5 mask contracts",
            limit: Duration::from_secs(30),
            run: mask_contracts,
        },
        Criterion {
            name: "6 metrics",
            limit: Duration::from_secs(5),
            run: metric_cases,
        },
        Criterion {
            name: "7 desk-scale training",
            limit: Duration::from_secs(15 * 60),
            run: training_run,
        },
        Criterion {
            name: "8 baseline ordering",
            limit: Duration::from_secs(60),
            run: baseline_ordering,
        },
    ];
    let only: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    for c in &criteria {
        if !only.is_empty() && !only.iter().any(|o| c.name.contains(o.as_str())) {
            continue;
        }
        let start = Instant::now();
        let outcome = catch_unwind(c.run).unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= c.limit {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, limit {:?}", c.limit))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS  {} ({elapsed:.2?}): {detail}", c.name),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {} ({elapsed:.2?}): {detail}", c.name);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
