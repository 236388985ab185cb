use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use voxseg::fits::{load_fits, load_labels};
use voxseg::kmeans::{build_features, KMeansOptions};
use voxseg::mixture::{bic_scan, ScanOptions, BINNED_THRESHOLD, DEFAULT_BINS};
use voxseg::pipeline::{
    bic_scan_path, compare_families, kmeans_labels_path, marginal_labels_path, run_compare,
    run_marginal_family, run_wavelet_family, CompareConfig, CompareOptions, ComparisonReport,
    MarginalSegmentation, WaveletOptions, WaveletSegmentation, DEFAULT_SIGMA,
};
use voxseg::starlet::{starlet_forward, DEFAULT_SCALES};
use voxseg::Volume;

const DEFAULT_SEED: u64 = 42;

const BIC_CSV_HELP: &str = "\
Output: <prefix>_bic_scan.csv with columns
  k          number of mixture components
  loglik     maximized log-likelihood (nats)
  bic        -loglik + (3k-1)/2 ln n; smaller is better
  converged  whether EM met the tolerance before --max-iter";

const SEGMENT_CSV_HELP: &str = "\
Outputs:
  <prefix>_segm_marg<k>.fits   16-bit label volume (marginal)
  <prefix>_segm_marg<k>.csv    cluster,count,mean_intensity
  <prefix>_segm_kmean<k>.fits  16-bit label volume (k-means)
  <prefix>_segm_kmean<k>.csv   cluster,count,<one column per feature>
  <prefix>_1.fits .. <prefix>_<S+1>.fits  wavelet levels (k-means only)";

const COMPARE_CSV_HELP: &str = "\
Outputs:
  <prefix>_compare.txt    human-readable report
  <prefix>_compare.csv    sigma,marginal,kmeans,verdict (sensitivity table)
  <prefix>_compare.jsonl  one JSON record per line: config, family x2,
                          verdict, sensitivity rows";

/// Gaussian-covering segmentation of 3D FITS volumes.
#[derive(Debug, Parser)]
#[command(name = "voxseg", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Starlet transform; writes <prefix>_1.fits .. <prefix>_<S+1>.fits.
    Wavelet(WaveletArgs),
    /// Fit the marginal GMM for each k in a range and tabulate BIC.
    #[command(after_help = BIC_CSV_HELP)]
    BicScan(ScanArgs),
    /// Segment a volume with one model family.
    #[command(subcommand)]
    Segment(SegmentCommand),
    /// Run both families and compare them by Renyi quadratic entropy.
    #[command(after_help = COMPARE_CSV_HELP)]
    Compare(CompareArgs),
}

#[derive(Debug, Subcommand)]
enum SegmentCommand {
    /// Marginal GMM (BIC-selected over --k-range, or fixed --k), posterior labels.
    #[command(after_help = SEGMENT_CSV_HELP)]
    Marginal(MarginalArgs),
    /// k-means on per-voxel starlet coefficients.
    #[command(after_help = SEGMENT_CSV_HELP)]
    Kmeans(KmeansArgs),
}

#[derive(Debug, Args)]
struct IoArgs {
    /// Input FITS volume.
    #[arg(long = "in", value_name = "FILE")]
    input: PathBuf,
    /// Prefix for output files (default: input path without .fits).
    #[arg(long)]
    out_prefix: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Random restarts per fit; the best is kept.
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    restarts: u64,
    /// Iteration cap for EM and Lloyd (defaults 500 and 300).
    #[arg(long)]
    max_iter: Option<usize>,
    /// Relative log-likelihood tolerance for EM.
    #[arg(long, default_value_t = 1e-7)]
    tol: f64,
}

#[derive(Debug, Args)]
struct FeatureArgs {
    /// Number of wavelet scales S (S+1 levels with the continuum).
    #[arg(long, default_value_t = DEFAULT_SCALES as u64, value_parser = clap::value_parser!(u64).range(1..))]
    scales: u64,
    /// Cluster raw wavelet coefficients instead of z-scored ones.
    #[arg(long)]
    no_standardize: bool,
    /// Leave the continuum out of the feature vector.
    #[arg(long)]
    no_continuum: bool,
}

#[derive(Debug, Args)]
struct WaveletArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long, default_value_t = DEFAULT_SCALES as u64, value_parser = clap::value_parser!(u64).range(1..))]
    scales: u64,
}

#[derive(Debug, Args)]
struct ScanArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Inclusive range of component counts, e.g. 1..8.
    #[arg(long, default_value = "1..8", value_parser = parse_k_range)]
    k_range: RangeInclusive<usize>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args)]
struct MarginalArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Fixed number of components (skips the BIC scan).
    #[arg(long, conflicts_with = "k_range", value_parser = clap::value_parser!(u64).range(1..))]
    k: Option<u64>,
    /// Range scanned by BIC when --k is not given.
    #[arg(long, value_parser = parse_k_range)]
    k_range: Option<RangeInclusive<usize>>,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args)]
struct KmeansArgs {
    #[command(flatten)]
    io: IoArgs,
    #[arg(long, default_value_t = 6, value_parser = clap::value_parser!(u64).range(1..))]
    k: u64,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    io: IoArgs,
    /// Fixed k for both families (otherwise BIC picks k for the marginal
    /// family and k-means uses the same k).
    #[arg(long, conflicts_with = "k_range", value_parser = clap::value_parser!(u64).range(2..))]
    k: Option<u64>,
    #[arg(long, value_parser = parse_k_range)]
    k_range: Option<RangeInclusive<usize>>,
    #[command(flatten)]
    features: FeatureArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Shared covering scale for the verdict.
    #[arg(long, default_value_t = DEFAULT_SIGMA)]
    sigma: f64,
    /// Comma-separated scales for the sensitivity table.
    #[arg(long, value_delimiter = ',', default_value = "0.25,0.5,1,2,4")]
    sigma_grid: Vec<f64>,
    /// Sum one covering per wavelet scale instead of one feature-space covering.
    #[arg(long)]
    multiscale_renyi: bool,
    /// Compare existing <prefix>_segm_marg<k>.fits and <prefix>_segm_kmean<k>.fits
    /// instead of recomputing them (requires --k).
    #[arg(long, requires = "k")]
    reuse: bool,
}

fn parse_k_range(s: &str) -> std::result::Result<RangeInclusive<usize>, String> {
    let (a, b) = s
        .split_once("..")
        .ok_or_else(|| format!("expected A..B, got `{s}`"))?;
    let a: usize = a.trim().parse().map_err(|_| format!("bad range start `{a}`"))?;
    let b: usize = b
        .trim()
        .trim_start_matches('=')
        .parse()
        .map_err(|_| format!("bad range end `{b}`"))?;
    if a == 0 || a > b {
        return Err(format!("range `{s}` is empty or starts at 0"));
    }
    Ok(a..=b)
}

fn out_prefix(io: &IoArgs) -> PathBuf {
    io.out_prefix.clone().unwrap_or_else(|| {
        let p = &io.input;
        match p.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("fits") || e.eq_ignore_ascii_case("fit") => {
                p.with_extension("")
            }
            _ => p.clone(),
        }
    })
}

fn load(io: &IoArgs) -> Result<Volume> {
    Ok(load_fits(&io.input)?)
}

fn scan_options(fit: &FitArgs, n_voxels: usize) -> ScanOptions {
    ScanOptions {
        seed: fit.seed,
        restarts: fit.restarts as usize,
        max_iter: fit.max_iter.unwrap_or(voxseg::mixture::DEFAULT_MAX_ITER),
        tol: fit.tol,
        bins: (n_voxels > BINNED_THRESHOLD).then_some(DEFAULT_BINS),
    }
}

fn kmeans_options(fit: &FitArgs) -> KMeansOptions {
    KMeansOptions {
        seed: fit.seed,
        max_iter: fit.max_iter.unwrap_or(voxseg::kmeans::DEFAULT_MAX_ITER),
        restarts: fit.restarts as usize,
    }
}

fn validate_fit(fit: &FitArgs) -> Result<()> {
    if !(fit.tol > 0.0 && fit.tol.is_finite()) {
        bail!("--tol must be positive");
    }
    if fit.max_iter == Some(0) {
        bail!("--max-iter must be positive");
    }
    Ok(())
}

fn report_written(paths: &[PathBuf]) {
    for p in paths {
        println!("wrote {}", p.display());
    }
}

fn write(path: &Path, text: &str) -> Result<PathBuf> {
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))?;
    Ok(path.to_path_buf())
}

fn with_suffix(prefix: &Path, suffix: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn cmd_wavelet(args: &WaveletArgs) -> Result<()> {
    let v = load(&args.io)?;
    let d = starlet_forward(&v, args.scales as usize)?;
    let paths = d.save_levels(&out_prefix(&args.io))?;
    report_written(&paths);
    Ok(())
}

fn cmd_bic_scan(args: &ScanArgs) -> Result<()> {
    validate_fit(&args.fit)?;
    let v = load(&args.io)?;
    let scan = bic_scan(v.data(), args.k_range.clone(), scan_options(&args.fit, v.len()))?;
    let path = write(&bic_scan_path(&out_prefix(&args.io)), &scan.to_csv())?;
    print!("{}", scan.to_csv());
    println!("selected k = {}", scan.selected_k);
    report_written(&[path]);
    Ok(())
}

fn cmd_segment_marginal(args: &MarginalArgs) -> Result<()> {
    validate_fit(&args.fit)?;
    let range = match (args.k, &args.k_range) {
        (Some(k), _) => k as usize..=k as usize,
        (None, Some(r)) => r.clone(),
        (None, None) => 1..=8,
    };
    let v = load(&args.io)?;
    let r = run_marginal_family(&v, range, scan_options(&args.fit, v.len()))?;
    if r.fit.reinitializations > 0 {
        eprintln!("note: {} collapsed components were reseeded", r.fit.reinitializations);
    }
    println!("marginal k = {}, bic = {}", r.k(), r.fit.bic);
    report_written(&r.save(&out_prefix(&args.io))?);
    Ok(())
}

fn wavelet_options(features: &FeatureArgs, k: usize, fit: &FitArgs) -> WaveletOptions {
    WaveletOptions {
        scales: features.scales as usize,
        k,
        standardize: !features.no_standardize,
        include_continuum: !features.no_continuum,
        kmeans: kmeans_options(fit),
    }
}

fn cmd_segment_kmeans(args: &KmeansArgs) -> Result<()> {
    validate_fit(&args.fit)?;
    let v = load(&args.io)?;
    let r = run_wavelet_family(&v, wavelet_options(&args.features, args.k as usize, &args.fit))?;
    for w in r.features.warnings() {
        eprintln!("warning: {w}");
    }
    if r.model.reseeds > 0 {
        eprintln!("note: {} empty clusters were reseeded", r.model.reseeds);
    }
    println!("k-means k = {}, inertia = {}", r.k(), r.model.inertia);
    report_written(&r.save(&out_prefix(&args.io))?);
    Ok(())
}

fn config_echo(args: &CompareArgs, prefix: &Path) -> Vec<(String, String)> {
    let grid: Vec<String> = args.sigma_grid.iter().map(|s| s.to_string()).collect();
    let k = match (args.k, &args.k_range) {
        (Some(k), _) => k.to_string(),
        (None, Some(r)) => format!("bic over {}..{}", r.start(), r.end()),
        (None, None) => "bic over 1..8".into(),
    };
    [
        ("command", "compare".to_string()),
        ("input", args.io.input.display().to_string()),
        ("out_prefix", prefix.display().to_string()),
        ("k", k),
        ("scales", args.features.scales.to_string()),
        ("standardize", (!args.features.no_standardize).to_string()),
        ("include_continuum", (!args.features.no_continuum).to_string()),
        ("seed", args.fit.seed.to_string()),
        ("restarts", args.fit.restarts.to_string()),
        ("max_iter", args.fit.max_iter.map_or("default".into(), |m| m.to_string())),
        ("tol", args.fit.tol.to_string()),
        ("sigma", args.sigma.to_string()),
        ("sigma_grid", grid.join(",")),
        ("multiscale_renyi", args.multiscale_renyi.to_string()),
        ("reuse", args.reuse.to_string()),
    ]
    .into_iter()
    .map(|(k, v)| (k.to_string(), v))
    .collect()
}

fn compare_reused(args: &CompareArgs, v: &Volume, prefix: &Path, opts: &CompareOptions) -> Result<ComparisonReport> {
    let k = args.k.expect("clap enforces --k with --reuse") as usize;
    let marg_path = marginal_labels_path(prefix, k);
    let kmeans_path = kmeans_labels_path(prefix, k);
    for p in [&marg_path, &kmeans_path] {
        if !p.exists() {
            bail!("--reuse: segmentation {} not found", p.display());
        }
    }
    let marg = load_labels(&marg_path).with_context(|| format!("reading {}", marg_path.display()))?;
    let kmeans =
        load_labels(&kmeans_path).with_context(|| format!("reading {}", kmeans_path.display()))?;
    let d = starlet_forward(v, args.features.scales as usize)?;
    let features = build_features(&d, !args.features.no_continuum, !args.features.no_standardize)?;
    Ok(compare_families(
        v,
        MarginalSegmentation { model: None, labels: &marg, bic: None },
        WaveletSegmentation { model: None, features: &features, labels: &kmeans },
        opts,
    )?)
}

fn cmd_compare(args: &CompareArgs) -> Result<()> {
    validate_fit(&args.fit)?;
    if !(args.sigma > 0.0) || args.sigma_grid.iter().any(|s| !(*s > 0.0)) {
        bail!("--sigma and every --sigma-grid entry must be positive");
    }
    let prefix = out_prefix(&args.io);
    let v = load(&args.io)?;
    let compare = CompareOptions {
        sigma: args.sigma,
        sigma_grid: args.sigma_grid.clone(),
        multiscale: args.multiscale_renyi,
    };
    let mut paths = Vec::new();
    let mut report = if args.reuse {
        compare_reused(args, &v, &prefix, &compare)?
    } else {
        let cfg = CompareConfig {
            k_range: args.k_range.clone().unwrap_or(1..=8),
            k: args.k.map(|k| k as usize),
            scan: scan_options(&args.fit, v.len()),
            wavelet: wavelet_options(&args.features, 0, &args.fit),
            compare,
        };
        let run = run_compare(&v, &cfg)?;
        paths.extend(run.marginal.save(&prefix)?);
        paths.extend(run.wavelet.save(&prefix)?);
        run.report
    };
    report.config = config_echo(args, &prefix);
    let text = report.to_text();
    paths.push(write(&with_suffix(&prefix, "_compare.txt"), &text)?);
    paths.push(write(&with_suffix(&prefix, "_compare.csv"), &report.to_csv())?);
    paths.push(write(&with_suffix(&prefix, "_compare.jsonl"), &report.to_json_lines())?);
    print!("{text}");
    report_written(&paths);
    Ok(())
}

/// Joins the error chain, dropping causes already spelled out by their parent.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = String::new();
    let mut prev = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if prev.contains(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
        prev = msg;
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Wavelet(a) => cmd_wavelet(a),
        Command::BicScan(a) => cmd_bic_scan(a),
        Command::Segment(SegmentCommand::Marginal(a)) => cmd_segment_marginal(a),
        Command::Segment(SegmentCommand::Kmeans(a)) => cmd_segment_kmeans(a),
        Command::Compare(a) => cmd_compare(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}
