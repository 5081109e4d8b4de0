//! `kspace-lab`: batch front end for the reconstruction toolkit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::{Deserialize, Serialize};

use kspace_lab::grappa::{KernelGeometry, DEFAULT_RIDGE};
use kspace_lab::io;
use kspace_lab::kcore::{fft2c, fft2c_real, ifft2c, real_part, ComplexGrid, Domain, RealGrid};
use kspace_lab::losses::{
    total_loss, GrappaLossConfig, LossInputs, LossWeights, PerceptualExtractor,
};
use kspace_lab::metrics::MetricConfig;
use kspace_lab::phantom::{make_phantoms, PhantomKind, PhantomSpec};
use kspace_lab::pipeline::{
    evaluate, generator_input, grappa_recon, net_recon, observed_residual, train, zero_fill_recon,
    EvalConfig, GeneratorState, Method, TrainConfig,
};
use kspace_lab::sampling::{undersample, AcquisitionNoise, AcsSize, Mask, MaskSpec, Pattern};
use kspace_lab::{Error, Result};

/// Relative tolerance of `--verify-dc`.
const DC_TOLERANCE: f64 = 1e-9;

#[derive(Parser, Debug)]
#[command(
    name = "kspace-lab",
    version,
    about = "Undersampled MRI reconstruction toolkit"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate synthetic phantoms as CGRID images with PGM previews.
    Phantom(PhantomArgs),
    /// Generate a sampling mask.
    Mask(MaskArgs),
    /// Undersample an image or k-space grid with a mask.
    Undersample(UndersampleArgs),
    /// Reconstruct an image from undersampled k-space.
    Recon(ReconArgs),
    /// Train the generator adversarially.
    Train(TrainArgs),
    /// Score reconstructions on a dataset as JSON lines.
    Evaluate(EvaluateArgs),
    /// Report every loss term for an image against a reference.
    Losses(LossesArgs),
}

#[derive(Args, Debug)]
struct PhantomArgs {
    #[arg(long, value_parser = parse_kind, default_value = "ellipses")]
    kind: PhantomKind,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 1)]
    count: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the fully sampled k-space of each phantom.
    #[arg(long)]
    kspace: bool,
    /// Output directory.
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct MaskArgs {
    #[arg(long, value_parser = parse_pattern)]
    pattern: Pattern,
    /// Square size; overridden by --height/--width.
    #[arg(long)]
    size: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    fraction: f64,
    /// Calibration lines; defaults to 8% of the extent, at least 8.
    #[arg(long)]
    acs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct UndersampleArgs {
    /// Image or k-space CGRID.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum MethodArg {
    Zerofill,
    Grappa,
    Net,
}

#[derive(Args, Debug)]
struct ReconArgs {
    #[arg(long, value_enum)]
    method: MethodArg,
    /// Undersampled k-space CGRID.
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long)]
    mask: PathBuf,
    /// Generator checkpoint stem, for `--method net`.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Apply the k-space correction block to the network output.
    #[arg(long)]
    correct: bool,
    /// Reference image CGRID; adds psnr/ssim to the report.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Fail unless the result reproduces the observed samples.
    #[arg(long)]
    verify_dc: bool,
    /// PGM preview, or a complex image if the extension is `.cgrid`.
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// JSON job file: training settings plus a `data` source.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Loss weights JSON, overriding the job file.
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Checkpoint directory.
    #[arg(short = 'o', long = "output")]
    output: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Directory of image CGRIDs; phantoms are generated when absent.
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long, value_parser = parse_kind, default_value = "ellipses")]
    kind: PhantomKind,
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 20)]
    count: usize,
    /// Shared mask PGM; otherwise one is generated from the flags below.
    #[arg(long)]
    mask: Option<PathBuf>,
    #[arg(long, value_parser = parse_pattern, default_value = "uniform")]
    pattern: Pattern,
    #[arg(long, default_value_t = 0.5)]
    fraction: f64,
    #[arg(long)]
    acs: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    /// Generator checkpoint stem; enables the network rows.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write the JSON lines here.
    #[arg(short = 'o', long = "output")]
    output: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct LossesArgs {
    /// Candidate image CGRID.
    #[arg(long = "in")]
    input: PathBuf,
    /// Reference image CGRID.
    #[arg(long = "ref")]
    reference: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long, default_value_t = 0.0)]
    noise_sigma: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_kind(s: &str) -> std::result::Result<PhantomKind, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_pattern(s: &str) -> std::result::Result<Pattern, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn acs_size(lines: Option<usize>) -> AcsSize {
    lines.map(AcsSize::Lines).unwrap_or_default()
}

fn print_json(v: &impl Serialize) {
    println!("{}", serde_json::to_string(v).expect("serializable"));
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    serde_json::from_str(&text).map_err(|e| Error::Format {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Real image from an image- or k-space-domain CGRID.
fn read_image(path: &Path) -> Result<RealGrid> {
    let g = io::read_cgrid(path)?;
    match g.domain {
        Domain::Image => real_part(&g),
        Domain::KSpace => real_part(&ifft2c(&g)?),
    }
}

fn run_phantom(a: PhantomArgs) -> Result<()> {
    let spec = PhantomSpec::new(a.kind, a.size, a.count, a.seed);
    let images = make_phantoms(&spec)?;
    create_dir(&a.output)?;
    for (i, x) in images.iter().enumerate() {
        let stem = a.output.join(format!("phantom_{i:04}"));
        io::write_cgrid(&stem.with_extension("cgrid"), &x.to_complex(Domain::Image))?;
        io::export_image(&stem.with_extension("pgm"), x, None)?;
        if a.kspace {
            io::write_cgrid(
                &a.output.join(format!("kspace_{i:04}.cgrid")),
                &fft2c_real(x),
            )?;
        }
    }
    print_json(&serde_json::json!({ "written": images.len(), "dir": a.output }));
    Ok(())
}

fn run_mask(a: MaskArgs) -> Result<()> {
    let height = a.height.or(a.size);
    let width = a.width.or(a.size);
    let (Some(height), Some(width)) = (height, width) else {
        return Err(Error::Config(
            "give --size or both --height and --width".into(),
        ));
    };
    let m = MaskSpec {
        pattern: a.pattern,
        height,
        width,
        target_fraction: a.fraction,
        acs: acs_size(a.acs),
        seed: a.seed,
    }
    .generate()?;
    io::write_mask(&a.output, &m)?;
    let columns = m.is_column_constant().then(|| m.sampled_columns().len());
    print_json(&serde_json::json!({
        "sampled": m.sampled_count(),
        "columns": columns,
        "fraction": m.sampled_count() as f64 / (height * width) as f64,
        "acs_rows": m.acs.rows,
        "acs_cols": m.acs.cols,
    }));
    Ok(())
}

fn run_undersample(a: UndersampleArgs) -> Result<()> {
    let g = io::read_cgrid(&a.input)?;
    let y = match g.domain {
        Domain::KSpace => g,
        Domain::Image => fft2c(&g)?,
    };
    let m = io::read_mask(&a.mask)?;
    let noise = AcquisitionNoise {
        sigma: a.noise_sigma,
        seed: a.seed,
    };
    io::write_cgrid(&a.output, &undersample(&y, &m, noise)?)
}

fn run_recon(a: ReconArgs) -> Result<()> {
    let y_u = io::read_cgrid(&a.input)?;
    let m = io::read_mask(&a.mask)?;
    m.check_shape(&y_u)?;
    let (recon, dc_target) = match a.method {
        MethodArg::Zerofill => (zero_fill_recon(&y_u)?, y_u.clone()),
        MethodArg::Grappa => (
            grappa_recon(&y_u, &m, &KernelGeometry::default(), DEFAULT_RIDGE)?,
            y_u.clone(),
        ),
        MethodArg::Net => {
            let stem = a
                .checkpoint
                .as_deref()
                .ok_or_else(|| Error::Config("--method net needs --checkpoint".into()))?;
            let gen = GeneratorState::load(stem)?;
            let r = net_recon(&y_u, &m, &gen, a.correct)?;
            // the correction block copies the spectrum of the generator input
            let (x_g, _) = generator_input(&y_u, &m)?;
            (r, fft2c(&x_g)?)
        }
    };
    let residual = observed_residual(&recon.kspace, &dc_target, &m);
    let scale = observed_residual(
        &dc_target,
        &ComplexGrid::zeros(m.height, m.width, Domain::KSpace),
        &m,
    );
    let mut recon = recon;
    if let Some(ref_path) = &a.metrics {
        recon = recon.with_metrics(&read_image(ref_path)?, &MetricConfig::default())?;
    }
    if a.output.extension().is_some_and(|e| e == "cgrid") {
        io::write_cgrid(&a.output, &recon.complex_image)?;
    } else {
        io::export_image(&a.output, &recon.image, None)?;
    }
    let mut report = serde_json::json!({
        "method": recon.method,
        "fallback": recon.fallback,
        "dc_residual": residual,
    });
    if let Some((psnr, ssim)) = recon.metrics {
        report["psnr"] = psnr.into();
        report["ssim"] = ssim.into();
    }
    print_json(&report);
    if a.verify_dc {
        let exact = matches!(recon.method, Method::ZeroFill | Method::NetCorrected);
        let allowed = if exact {
            0.0
        } else {
            DC_TOLERANCE * scale.max(1.0)
        };
        if residual > allowed {
            return Err(Error::Config(format!(
                "observed samples not reproduced: residual {residual:e} exceeds {allowed:e}"
            )));
        }
    }
    Ok(())
}

/// Where training images come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum DataSource {
    Phantoms {
        kind: PhantomKind,
        size: usize,
        count: usize,
        seed: u64,
    },
    /// Directory of image CGRIDs, read in file-name order.
    Dir(PathBuf),
}

impl Default for DataSource {
    fn default() -> Self {
        DataSource::Phantoms {
            kind: PhantomKind::Blobs,
            size: 64,
            count: 200,
            seed: 0,
        }
    }
}

impl DataSource {
    fn load(&self) -> Result<Vec<RealGrid>> {
        match self {
            DataSource::Phantoms {
                kind,
                size,
                count,
                seed,
            } => make_phantoms(&PhantomSpec::new(*kind, *size, *count, *seed)),
            DataSource::Dir(dir) => {
                let entries = fs::read_dir(dir).map_err(|e| Error::Io {
                    path: dir.clone(),
                    source: e,
                })?;
                let mut paths: Vec<PathBuf> = entries
                    .filter_map(|e| e.ok().map(|e| e.path()))
                    .filter(|p| p.extension().is_some_and(|e| e == "cgrid"))
                    .collect();
                paths.sort();
                if paths.is_empty() {
                    return Err(Error::Config(format!(
                        "no .cgrid files in {}",
                        dir.display()
                    )));
                }
                paths.iter().map(|p| read_image(p)).collect()
            }
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct TrainJob {
    data: DataSource,
    #[serde(flatten)]
    train: TrainConfig,
}

fn run_train(a: TrainArgs) -> Result<()> {
    let mut job: TrainJob = match &a.config {
        Some(p) => read_json(p)?,
        None => TrainJob::default(),
    };
    if let Some(p) = &a.weights {
        job.train.weights = read_json(p)?;
    }
    if let Some(e) = a.epochs {
        job.train.epochs = e;
    }
    if let Some(s) = a.seed {
        job.train.seed = s;
    }
    job.train.validate()?;
    let data = job.data.load()?;
    let out = train(&data, &job.train)?;
    create_dir(&a.output)?;
    out.generator.save(&a.output.join("generator"))?;
    io::save_params(
        &a.output.join("discriminator"),
        &out.discriminator,
        &serde_json::Value::Null,
    )?;
    io::write_mask(&a.output.join("mask.pgm"), &out.mask)?;
    let history_path = a.output.join("history.jsonl");
    let mut lines = String::new();
    for h in &out.history {
        lines.push_str(&serde_json::to_string(h).expect("serializable"));
        lines.push('\n');
    }
    fs::write(&history_path, lines).map_err(|e| Error::Io {
        path: history_path,
        source: e,
    })?;
    let job_path = a.output.join("job.json");
    fs::write(
        &job_path,
        serde_json::to_string_pretty(&job).expect("serializable"),
    )
    .map_err(|e| Error::Io {
        path: job_path,
        source: e,
    })?;
    if let Some(last) = out.history.last() {
        print_json(last);
    }
    Ok(())
}

fn run_evaluate(a: EvaluateArgs) -> Result<()> {
    let data = match &a.data {
        Some(dir) => DataSource::Dir(dir.clone()).load()?,
        None => make_phantoms(&PhantomSpec::new(a.kind, a.size, a.count, a.seed))?,
    };
    let first = &data[0];
    let m = match &a.mask {
        Some(p) => io::read_mask(p)?,
        None => MaskSpec {
            pattern: a.pattern,
            height: first.height,
            width: first.width,
            target_fraction: a.fraction,
            acs: acs_size(a.acs),
            seed: a.seed,
        }
        .generate()?,
    };
    let gen = a
        .checkpoint
        .as_deref()
        .map(GeneratorState::load)
        .transpose()?;
    let cfg = EvalConfig {
        noise: AcquisitionNoise {
            sigma: a.noise_sigma,
            seed: a.seed,
        },
        ..Default::default()
    };
    let table = evaluate(&data, gen.as_ref(), std::slice::from_ref(&m), &cfg)?;
    let text = table.to_json_lines();
    std::io::stdout()
        .write_all(text.as_bytes())
        .map_err(|e| Error::Io {
            path: PathBuf::from("<stdout>"),
            source: e,
        })?;
    if let Some(p) = &a.output {
        fs::write(p, text).map_err(|e| Error::Io {
            path: p.clone(),
            source: e,
        })?;
    }
    Ok(())
}

fn run_losses(a: LossesArgs) -> Result<()> {
    let xhat = read_image(&a.input)?;
    let xt = read_image(&a.reference)?;
    xhat.check_shape(&xt)?;
    let weights: LossWeights = match &a.weights {
        Some(p) => read_json(p)?,
        None => LossWeights::default(),
    };
    let yt = fft2c_real(&xt);
    // GRAPPA terms need an R=2 lattice with room for calibration.
    let grappa = Mask::uniform(xt.height, xt.width, 2, AcsSize::default().lines(xt.width))
        .ok()
        .and_then(|mask| {
            let k = kspace_lab::grappa::estimate_kernel(
                &kspace_lab::grappa::CoilStack::single(yt.clone()),
                &mask.acs,
                &KernelGeometry::default(),
                DEFAULT_RIDGE,
            )
            .ok()?;
            Some(GrappaLossConfig {
                mask,
                kernel: k,
                noise: AcquisitionNoise {
                    sigma: a.noise_sigma,
                    seed: a.seed,
                },
            })
        });
    let extractor =
        (xt.height % 8 == 0 && xt.width % 8 == 0).then(|| PerceptualExtractor::new(a.seed));
    let report = total_loss(
        &LossInputs {
            xhat: &xhat,
            xt: &xt,
            yt: Some(&yt),
            grappa: grappa.as_ref(),
            perceptual: extractor.as_ref(),
            d_out: None,
        },
        &weights,
    )?;
    println!("{}", report.to_json());
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(a) => run_phantom(a),
        Command::Mask(a) => run_mask(a),
        Command::Undersample(a) => run_undersample(a),
        Command::Recon(a) => run_recon(a),
        Command::Train(a) => run_train(a),
        Command::Evaluate(a) => run_evaluate(a),
        Command::Losses(a) => run_losses(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
