use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use imagerep_core::analysis::{analyze, default_phase, AnalysisMethod, AnalysisOptions, RepresentativityReport};
use imagerep_core::harness::{emit_report, run_coverage, CoverageConfig, MaterialSource, Method, ReportFormat};
use imagerep_core::image::{binarize, encode_png, encode_tiff, load_path, FormatHint};
use imagerep_core::synthgen::{
    calibrate_error_model, cell_seed, generate, BooleanSpec, CalibrationConfig, Grain, TruthSource,
};
use imagerep_core::tpc::{dump_tpc, periodic_tpc};
use imagerep_core::uncertainty::CalibrationModel;
use imagerep_core::{Error, Result};
use imagerep_service::ServiceConfig;

#[derive(Parser)]
#[command(name = "imagerep", version, about = "Phase-fraction representativity of segmented images")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Confidence bounds on the phase fraction of one image.
    Analyze(AnalyzeArgs),
    /// Fit the model-error curve on synthetic Boolean ensembles.
    Calibrate(CalibrateArgs),
    /// Measure bound coverage on a synthetic or user-supplied material.
    Validate(ValidateArgs),
    /// Run the HTTP API.
    Serve(ServeArgs),
    /// Write one synthetic Boolean-model image.
    Generate(GenerateArgs),
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    input: PathBuf,
    /// Shape for raw input, slowest axis first, e.g. 256,256,256.
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    phase: Option<u8>,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// Target relative deviation in percent; adds a required-size recommendation.
    #[arg(long)]
    target: Option<f64>,
    #[arg(long, default_value = "imagerep")]
    method: AnalysisMethod,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    dump_tpc: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args)]
struct CalibrateArgs {
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value_t = 20)]
    per_cell: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// `exact`, or `ensemble:N` for an N-image empirical std per cell.
    #[arg(long, default_value = "exact")]
    truth: String,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Also write the per-size error summary as JSON.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Write each calibration ensemble as a multi-page TIFF into this directory.
    #[arg(long)]
    dump_ensembles: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    /// `circles`, or a path to a large segmented image.
    #[arg(long, default_value = "circles")]
    source: String,
    /// Dimension of the synthetic source.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, value_delimiter = ',')]
    dims: Option<Vec<usize>>,
    #[arg(long)]
    phase: Option<u8>,
    #[arg(long, default_value_t = 0.95)]
    confidence: f64,
    /// Samples per size.
    #[arg(long, default_value_t = 100)]
    samples: usize,
    #[arg(long, value_delimiter = ',')]
    sizes: Option<Vec<usize>>,
    #[arg(long, default_value = "imagerep,imagerep-no-correction,subdivision", value_delimiter = ',')]
    methods: Vec<Method>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    min_spacing: Option<usize>,
    #[arg(long)]
    calibration: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, default_value = "json")]
    format: ReportFormat,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1")]
    host: String,
    #[arg(long, default_value_t = 8080)]
    port: u16,
    #[arg(long)]
    calibration_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 256)]
    max_body_mib: usize,
    #[arg(long, default_value_t = 120)]
    timeout_secs: u64,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long)]
    edge: usize,
    #[arg(long, default_value_t = 3.0)]
    radius: f64,
    /// Ellipsoidal grains instead of balls, one semi-axis per dimension.
    #[arg(long, value_delimiter = ',')]
    semi_axes: Option<Vec<f64>>,
    #[arg(long, default_value_t = 0.5)]
    phi: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output path; `.png`, `.tif` or `.raw` chooses the encoding.
    #[arg(long)]
    out: PathBuf,
}

fn load_model(path: Option<&Path>, dim: usize) -> Result<CalibrationModel> {
    match path {
        Some(p) => CalibrationModel::from_json(&std::fs::read_to_string(p)?),
        None => CalibrationModel::builtin(dim),
    }
}

fn write_or_print(out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => Ok(std::fs::write(p, text)?),
        None => {
            println!("{text}");
            Ok(())
        }
    }
}

fn human(report: &RepresentativityReport) -> String {
    let mut s = format!("{}\n", report.statement);
    s += &format!("  phase {} in {:?}, dims {:?}\n", report.phase, report.phases, report.dims);
    s += &format!("  sigma {:.5}, characteristic length {:.2}", report.sigma_tilde, report.cls);
    if let Some(r0) = report.r0 {
        s += &format!(", r0 {r0}{}", if report.r0_capped { " (capped)" } else { "" });
    }
    s += &format!("\n  model error {:.4}\n", report.sigma_mod);
    if let Some(r) = &report.required_size {
        s += &format!(
            "  for {:.1}% at {:.1}% confidence: edge {} ({:.2}x the current volume)\n",
            r.target_relative_pct,
            100.0 * r.confidence,
            r.required_edge,
            r.growth_factor
        );
    }
    for w in &report.warnings {
        s += &format!("  warning: {w}\n");
    }
    s.trim_end().to_string()
}

fn cmd_analyze(a: AnalyzeArgs) -> Result<()> {
    let img = load_path(&a.input, a.dims.as_deref())?;
    let model = load_model(a.calibration.as_deref(), img.domain().ndim())?;
    let options = AnalysisOptions {
        phase: a.phase,
        confidence: a.confidence,
        target_pct: a.target,
        method: a.method,
        ..Default::default()
    };
    let report = analyze(&img, &options, &model)?;
    if let Some(path) = &a.dump_tpc {
        let bin = binarize(&img, a.phase.unwrap_or_else(|| default_phase(&img)))?;
        dump_tpc(&periodic_tpc(&bin)?, report.r0, path)?;
    }
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report)?);
    } else {
        println!("{}", human(&report));
    }
    Ok(())
}

fn cmd_calibrate(a: CalibrateArgs) -> Result<()> {
    let mut config = CalibrationConfig::default_for(a.dim)?;
    if let Some(s) = a.sizes {
        config.sizes = s;
    }
    config.per_cell = a.per_cell;
    config.base_seed = a.seed;
    config.truth = match a.truth.as_str() {
        "exact" => TruthSource::Exact,
        t => match t.strip_prefix("ensemble:").and_then(|n| n.parse().ok()) {
            Some(n) => TruthSource::Ensemble(n),
            None => return Err(Error::InvalidArgument(format!("bad truth source '{t}'"))),
        },
    };
    let report = calibrate_error_model(&config)?;
    for s in &report.per_size {
        eprintln!("edge {:>5}: {} samples, PE mean {:+.4}, sigma_mod {:.4}", s.edge, s.samples, s.pe_mean, s.pe_std);
    }
    eprintln!("a = {:.6}, b = {:.6}", report.model.a, report.model.b);
    if let Some(dir) = &a.dump_ensembles {
        dump_ensembles(&config, dir)?;
    }
    if let Some(p) = &a.summary {
        std::fs::write(p, serde_json::to_string_pretty(&report.per_size)?)?;
    }
    write_or_print(a.out.as_deref(), &report.model.to_json()?)
}

/// 2D ensembles become one page per image, 3D ones one page per slice.
fn dump_ensembles(config: &CalibrationConfig, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    for (si, &edge) in config.sizes.iter().enumerate() {
        for (ti, template) in config.templates.iter().enumerate() {
            let spec = template.with_edge(edge);
            let first = cell_seed(config, si, ti);
            let mut labels = Vec::new();
            for i in 0..config.per_cell as u64 {
                labels.extend(generate(&spec.with_seed(first.wrapping_add(i)))?.to_labels(255));
            }
            let pages = config.per_cell * if config.dim == 3 { edge } else { 1 };
            let bytes = encode_tiff(&[pages, edge, edge], &labels)?;
            std::fs::write(dir.join(format!("size{edge}_template{ti:02}.tif")), bytes)?;
        }
    }
    Ok(())
}

/// Circle materials used by `--source circles`.
fn circle_templates(dim: usize) -> Vec<BooleanSpec> {
    let mut out = Vec::new();
    for &phi in &[0.3, 0.5] {
        for r in 2..=6 {
            out.push(BooleanSpec::circles(dim, 0, r as f64, phi, 0));
        }
    }
    out
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let (source, dim, default_sizes) = if a.source == "circles" {
        let sizes = match a.dim {
            2 => vec![200, 250, 300, 400, 500],
            3 => vec![40, 50, 60, 70, 80],
            d => return Err(Error::InvalidArgument(format!("dim {d} must be 2 or 3"))),
        };
        (MaterialSource::Synthetic { templates: circle_templates(a.dim) }, a.dim, sizes)
    } else {
        let path = PathBuf::from(&a.source);
        let img = load_path(&path, a.dims.as_deref())?;
        let bin = binarize(&img, a.phase.unwrap_or_else(|| default_phase(&img)))?;
        let edge = bin.domain().min_edge();
        let sizes = [5, 4, 3].iter().map(|k| edge / k).filter(|&e| e >= 8).collect();
        let dim = bin.domain().ndim();
        (MaterialSource::LargeImage { image: bin, name: a.source.clone() }, dim, sizes)
    };
    let model = load_model(a.calibration.as_deref(), dim)?;
    let config = CoverageConfig {
        sizes: a.sizes.unwrap_or(default_sizes),
        samples_per_size: a.samples,
        methods: a.methods,
        confidence: a.confidence,
        seed: a.seed,
        min_spacing: a.min_spacing,
        predict: Default::default(),
    };
    let report = run_coverage(&source, &config, &model)?;
    for r in &report.results {
        eprintln!("{:<24} {}/{} = {:.4}", r.method.name(), r.hits, r.total, r.rate);
    }
    write_or_print(a.out.as_deref(), &emit_report(&report, a.format)?)
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let addr: SocketAddr = format!("{}:{}", a.host, a.port)
        .parse()
        .map_err(|e| Error::InvalidArgument(format!("bad address: {e}")))?;
    let config = ServiceConfig {
        calibration_dir: a.calibration_dir,
        max_body_bytes: a.max_body_mib * 1024 * 1024,
        request_timeout: Duration::from_secs(a.timeout_secs),
    };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    eprintln!("listening on http://{addr}");
    Ok(rt.block_on(imagerep_service::serve(addr, config))?)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let grain = match a.semi_axes {
        Some(semi_axes) => Grain::Ellipse { semi_axes },
        None => Grain::Ball { radius: a.radius },
    };
    let spec = BooleanSpec { dim: a.dim, edge: a.edge, grain, target_phi: a.phi, seed: a.seed };
    let img = generate(&spec)?;
    let labels = img.to_labels(255);
    let dims = img.domain().dims();
    let bytes = match FormatHint::from_path(&a.out) {
        FormatHint::Png => encode_png(dims, &labels)?,
        FormatHint::Tiff => encode_tiff(dims, &labels)?,
        FormatHint::Raw => labels,
        FormatHint::Auto => {
            return Err(Error::UnsupportedFormat(format!("cannot infer an encoding from {}", a.out.display())))
        }
    };
    Ok(std::fs::write(&a.out, bytes)?)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Analyze(a) => cmd_analyze(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::Validate(a) => cmd_validate(a),
        Command::Serve(a) => cmd_serve(a),
        Command::Generate(a) => cmd_generate(a),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error[{}]: {e}", e.code());
            match e {
                Error::Io(_) | Error::Numerical(_) => ExitCode::from(1),
                _ => ExitCode::from(2),
            }
        }
    }
}
