//! `looc` command-line harness.
//!
//! Every command takes `--seed`, and every output file is a pure function of
//! the flags. Exit codes: 0 success, 2 usage or configuration error, 3 I/O or
//! file-format error, 4 numeric divergence during training.

use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};

use crate::codebook::{fit_codebook, AnchorMode, Codebook, FitConfig, ReactivationPolicy};
use crate::cost::{
    read_codebook, read_grid, storage_cost, write_codebook, write_grid, CodebookFile,
};
use crate::data::{gen_correlated_map, gen_mixture, load_pgm, patchify, save_pgm, unpatchify};
use crate::enhancement::{enhanced_dequantize, enhanced_quantize};
use crate::error::{LoocError, Result};
use crate::metrics::{
    l1, mse, overall_usage, psnr_from_mse, segment_usage, sharing_histogram, ssim, ssim_channels,
    StatsReport, DEFAULT_SSIM_WINDOW,
};
use crate::quantizers::{looc_quantize_counted, pq_quantize_counted, PqCodebookSet};
use crate::trainer::{
    init_codebook_from_encoder, train, BatchLayout, CodebookLearning, LinearAe, LossRecord,
    TrainConfig,
};
use crate::types::{CodeGrid, FeatureMap, Metric, QuantConfig};

/// Dataset used by `train` when no `--input` is given.
pub const BUNDLED_TRAIN_SPEC: &str = "mixture:n=64,d=4,c=2";

const DEFAULT_SPREAD: f64 = 0.05;
const DEFAULT_PATCH: usize = 4;

pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_DIVERGED: i32 = 4;

#[derive(Debug, Parser)]
#[command(
    name = "looc",
    version,
    about = "Compositional vector quantization with a shared low-dimensional codebook"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a shared codebook with the assign / EMA / reactivate loop.
    Fit(FitArgs),
    /// Quantize an input through the interpolate, quantize, pool pipeline.
    Quantize(QuantizeArgs),
    /// Reconstruct a feature map from a stored code grid.
    Dequantize(DequantizeArgs),
    /// Train a linear autoencoder with a quantized bottleneck.
    Train(TrainArgs),
    /// Print storage and compute costs for codebook configurations.
    Cost(CostArgs),
    /// Time VQ, PQ and LooC quantization at matched capacity.
    Bench(BenchArgs),
}

#[derive(Debug, Args)]
struct InputArgs {
    /// PGM path, or an inline spec such as `mixture:n=1000,d=8,c=16` or
    /// `correlated:h=32,w=32,d=16,s=2`.
    #[arg(long, visible_alias = "synthetic")]
    input: String,
    /// Patch size for PGM input.
    #[arg(long)]
    patch: Option<usize>,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long = "K")]
    k: usize,
    #[arg(long)]
    dstar: usize,
    /// Segments per vector; defaults to d / dstar.
    #[arg(long)]
    m: Option<usize>,
    #[arg(long, default_value = "l2")]
    metric: Metric,
    /// Replace dead codevectors with feature anchors.
    #[arg(long)]
    reactivate: bool,
    #[arg(long, default_value_t = AnchorChoice::Random, value_enum)]
    anchors: AnchorChoice,
    #[arg(long, default_value_t = 50)]
    rounds: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
enum AnchorChoice {
    Random,
    Farthest,
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[arg(long)]
    cb: PathBuf,
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 1)]
    beta: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    stats: Option<PathBuf>,
    /// Signal peak for PSNR and SSIM.
    #[arg(long, default_value_t = 1.0)]
    peak: f64,
    #[arg(long, default_value_t = DEFAULT_SSIM_WINDOW)]
    window: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct DequantizeArgs {
    #[arg(long)]
    cb: PathBuf,
    #[arg(long)]
    grid: PathBuf,
    #[arg(long, default_value_t = 1)]
    beta: usize,
    /// `.pgm` writes an image (patch size taken from the channel count);
    /// anything else writes a raw feature-map file.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Original input, in `--input` syntax; prints the reconstruction MSE.
    #[arg(long)]
    reference: Option<String>,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[arg(long, visible_alias = "synthetic", default_value = BUNDLED_TRAIN_SPEC)]
    input: String,
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long = "K", default_value_t = 4)]
    k: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    /// Latent width; defaults to the input width.
    #[arg(long)]
    dlat: Option<usize>,
    #[arg(long, default_value_t = 1)]
    beta: usize,
    #[arg(long, default_value_t = 0.25)]
    mu: f64,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 200)]
    steps: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    /// Learn codevectors by EMA instead of the codebook loss term.
    #[arg(long)]
    ema: bool,
    #[arg(long, default_value_t = 0)]
    reactivate_every: usize,
    #[arg(long, default_value = "l2")]
    metric: Metric,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Loss log CSV.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Trained codebook.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct CostArgs {
    /// `KxD` or `KxD:m=M`, repeatable.
    #[arg(long, required = true)]
    config: Vec<String>,
    #[arg(long, default_value = "1x1")]
    hw: String,
    #[arg(long)]
    json: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct BenchArgs {
    #[arg(long = "K", default_value_t = 16)]
    k: usize,
    #[arg(long, default_value_t = 4)]
    dstar: usize,
    #[arg(long, default_value_t = 2)]
    m: usize,
    #[arg(long, default_value = "64x64")]
    hw: String,
    #[arg(long, default_value_t = 3)]
    reps: usize,
    /// Largest codebook the matched-capacity VQ baseline may use.
    #[arg(long, default_value_t = 65_536)]
    max_vq: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Parses `std::env::args`, runs the command and returns the exit code.
pub fn run() -> i32 {
    run_from(std::env::args_os())
}

pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let stdout = std::io::stdout();
    let mut out = stdout.lock();
    let result = match cli.command {
        Command::Fit(a) => cmd_fit(&a, &mut out),
        Command::Quantize(a) => cmd_quantize(&a, &mut out),
        Command::Dequantize(a) => cmd_dequantize(&a, &mut out),
        Command::Train(a) => cmd_train(&a, &mut out),
        Command::Cost(a) => cmd_cost(&a, &mut out),
        Command::Bench(a) => cmd_bench(&a, &mut out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &LoocError) -> i32 {
    match e {
        LoocError::Io(_)
        | LoocError::TruncatedStream { .. }
        | LoocError::MalformedHeader(_)
        | LoocError::TruncatedPixels { .. }
        | LoocError::UnsupportedMaxval(_) => EXIT_IO,
        LoocError::NonFiniteLoss { .. } => EXIT_DIVERGED,
        _ => EXIT_CONFIG,
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Source {
    Mixture {
        n: usize,
        d: usize,
        c: usize,
        spread: f64,
        seed: Option<u64>,
    },
    Correlated {
        h: usize,
        w: usize,
        d: usize,
        s: f64,
        seed: Option<u64>,
    },
    Pgm(PathBuf),
}

fn parse_source(spec: &str) -> Result<Source> {
    let Some((kind, rest)) = spec.split_once(':') else {
        return Ok(Source::Pgm(PathBuf::from(spec)));
    };
    if kind != "mixture" && kind != "correlated" {
        return Ok(Source::Pgm(PathBuf::from(spec)));
    }
    let mut fields = std::collections::BTreeMap::new();
    for part in rest.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part.split_once('=').ok_or_else(|| {
            LoocError::InvalidConfig(format!("expected key=value in {spec:?}, got {part:?}"))
        })?;
        fields.insert(key.trim(), value.trim());
    }
    let mut take = |key: &str| fields.remove(key);
    let int = |v: Option<&str>, key: &str| -> Result<usize> {
        let v = v.ok_or_else(|| LoocError::InvalidConfig(format!("{kind} spec needs {key}=")))?;
        v.parse()
            .map_err(|_| LoocError::InvalidConfig(format!("bad integer {key}={v}")))
    };
    let real = |v: Option<&str>, key: &str, default: f64| -> Result<f64> {
        v.map_or(Ok(default), |v| {
            v.parse()
                .map_err(|_| LoocError::InvalidConfig(format!("bad number {key}={v}")))
        })
    };
    let seed = |v: Option<&str>| -> Result<Option<u64>> {
        v.map(|v| {
            v.parse()
                .map_err(|_| LoocError::InvalidConfig(format!("bad seed={v}")))
        })
        .transpose()
    };
    let source = if kind == "mixture" {
        Source::Mixture {
            n: int(take("n"), "n")?,
            d: int(take("d"), "d")?,
            c: int(take("c"), "c")?,
            spread: real(take("spread"), "spread", DEFAULT_SPREAD)?,
            seed: seed(take("seed"))?,
        }
    } else {
        Source::Correlated {
            h: int(take("h"), "h")?,
            w: int(take("w"), "w")?,
            d: int(take("d"), "d")?,
            s: real(take("s"), "s", 0.0)?,
            seed: seed(take("seed"))?,
        }
    };
    if let Some(key) = fields.keys().next() {
        return Err(LoocError::InvalidConfig(format!(
            "unknown key {key:?} in {spec:?}"
        )));
    }
    Ok(source)
}

/// An input as a feature map. PGM images are patchified, and the cropped
/// image is kept alongside for image-space SSIM.
struct Loaded {
    map: FeatureMap,
    image: Option<(FeatureMap, usize)>,
}

fn load_input(spec: &str, patch: Option<usize>, seed: u64) -> Result<Loaded> {
    match parse_source(spec)? {
        Source::Mixture {
            n,
            d,
            c,
            spread,
            seed: s,
        } => {
            let samples = gen_mixture(n, d, c, spread, s.unwrap_or(seed))?;
            let map = FeatureMap::from_vec(1, n, d, samples.concat())?;
            Ok(Loaded { map, image: None })
        }
        Source::Correlated {
            h,
            w,
            d,
            s,
            seed: sd,
        } => Ok(Loaded {
            map: gen_correlated_map(h, w, d, s, sd.unwrap_or(seed))?,
            image: None,
        }),
        Source::Pgm(path) => {
            let p = patch.unwrap_or(DEFAULT_PATCH);
            let map = patchify(&load_pgm(&path)?, p)?;
            let image = unpatchify(&map, p)?;
            Ok(Loaded {
                map,
                image: Some((image, p)),
            })
        }
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

fn cmd_fit(a: &FitArgs, out: &mut impl Write) -> Result<()> {
    let input = load_input(&a.input.input, a.input.patch, a.seed)?;
    let d = input.map.d();
    if a.dstar == 0 || d % a.dstar != 0 {
        return Err(LoocError::IndivisibleDimension { dim: d, m: a.dstar });
    }
    let m = a.m.unwrap_or(d / a.dstar);
    if m * a.dstar != d {
        return Err(LoocError::InvalidConfig(format!(
            "m={m} times dstar={} does not equal the input dimension {d}",
            a.dstar
        )));
    }
    let segments: Vec<&[f32]> = input.map.data().chunks_exact(a.dstar).collect();
    let cfg = FitConfig {
        rounds: a.rounds,
        metric: a.metric,
        reactivation: a.reactivate.then(|| ReactivationPolicy {
            anchor_mode: match a.anchors {
                AnchorChoice::Random => AnchorMode::RandomFeature,
                AnchorChoice::Farthest => AnchorMode::FarthestFeature,
            },
            ..Default::default()
        }),
        seed: a.seed,
        ..Default::default()
    };
    let (codebook, report) = fit_codebook(&segments, a.k, a.dstar, &cfg)?;
    let mut w = create(&a.out)?;
    write_codebook(
        &mut w,
        &CodebookFile {
            codebook,
            m,
            metric: a.metric,
        },
    )?;
    w.flush()?;
    writeln!(out, "usage={:.3}", report.usage)?;
    writeln!(out, "final_pass_usage={:.3}", report.final_pass_usage)?;
    writeln!(out, "distortion={:.8}", report.distortion)?;
    writeln!(out, "reactivated={}", report.reactivated)?;
    Ok(())
}

fn quant_config(file: &CodebookFile, beta: usize) -> QuantConfig {
    QuantConfig {
        m: file.m,
        beta,
        metric: file.metric,
        ..Default::default()
    }
}

fn cmd_quantize(a: &QuantizeArgs, out: &mut impl Write) -> Result<()> {
    let file = read_codebook(open(&a.cb)?)?;
    let input = load_input(&a.input.input, a.input.patch, a.seed)?;
    let cfg = quant_config(&file, a.beta);
    let cb = &file.codebook;
    let expected = file.m * cb.dim();
    if input.map.d() != expected {
        return Err(LoocError::DimensionMismatch {
            expected,
            actual: input.map.d(),
        });
    }
    let enhanced = enhanced_quantize(&input.map, cb, &cfg)?;
    let grid = &enhanced.grid;
    let mut w = create(&a.out)?;
    write_grid(&mut w, grid)?;
    w.flush()?;

    let err = mse(&input.map, &enhanced.smoothed)?;
    let ssim_value = match &input.image {
        Some((image, p)) => {
            let recon = unpatchify(&enhanced.smoothed, *p)?;
            optional_ssim(ssim(image, &recon, a.window, a.peak))?
        }
        None => optional_ssim(ssim_channels(
            &input.map,
            &enhanced.smoothed,
            a.window,
            a.peak,
        ))?,
    };
    let psnr = psnr_from_mse(err, a.peak);
    let cost = storage_cost(cb.k(), cb.dim(), file.m, grid.h(), grid.w());
    let grids = std::slice::from_ref(grid);
    let report = StatsReport {
        mse: err,
        l1: l1(&input.map, &enhanced.smoothed)?,
        psnr_db: psnr.is_finite().then_some(psnr),
        ssim: ssim_value,
        usage: overall_usage(grids, cb.k())?,
        per_segment_usage: segment_usage(grids, cb.k())?,
        sharing: sharing_histogram(grids, cb.k())?,
        codebook_bits: cost.codebook_bits,
        index_bits: cost.index_bits,
        total_bits: cost.total_bits,
        multiplications: cost.multiplications,
    };
    if let Some(path) = &a.stats {
        fs::write(path, report.to_json() + "\n")?;
    }
    write!(out, "{}", report.to_key_values())?;
    Ok(())
}

/// Inputs smaller than the SSIM window simply have no SSIM.
fn optional_ssim(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(LoocError::WindowTooLarge { .. }) => Ok(None),
        Err(e) => Err(e),
    }
}

const MAP_MAGIC: &[u8; 4] = b"LOOF";

/// Raw feature map: magic, version u16, h/w/d u32, then f32 values, all
/// little-endian.
fn write_feature_map(path: &Path, map: &FeatureMap) -> Result<()> {
    let mut buf = Vec::with_capacity(18 + map.data().len() * 4);
    buf.extend_from_slice(MAP_MAGIC);
    buf.extend_from_slice(&1u16.to_le_bytes());
    for v in [map.h(), map.w(), map.d()] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for v in map.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn cmd_dequantize(a: &DequantizeArgs, out: &mut impl Write) -> Result<()> {
    let file = read_codebook(open(&a.cb)?)?;
    let grid: CodeGrid = read_grid(open(&a.grid)?)?;
    if grid.m() != file.m {
        return Err(LoocError::DimensionMismatch {
            expected: file.m,
            actual: grid.m(),
        });
    }
    quant_config(&file, a.beta).validate()?;
    let recon = enhanced_dequantize(&grid, &file.codebook, a.beta)?;
    if let Some(path) = &a.out {
        if path
            .extension()
            .is_some_and(|e| e.eq_ignore_ascii_case("pgm"))
        {
            let p = (recon.d() as f64).sqrt().round() as usize;
            save_pgm(&unpatchify(&recon, p)?, path)?;
        } else {
            write_feature_map(path, &recon)?;
        }
    }
    if let Some(spec) = &a.reference {
        let reference = load_input(spec, a.patch, a.seed)?;
        writeln!(out, "mse={:.8}", mse(&reference.map, &recon)?)?;
    }
    writeln!(out, "shape={}x{}x{}", recon.h(), recon.w(), recon.d())?;
    Ok(())
}

fn cmd_train(a: &TrainArgs, out: &mut impl Write) -> Result<()> {
    let input = load_input(&a.input, a.patch, a.seed)?;
    let map = &input.map;
    let d = map.d();
    let layout = if a.beta > 1 {
        if matches!(parse_source(&a.input)?, Source::Mixture { .. }) {
            return Err(LoocError::InvalidConfig(
                "beta > 1 needs spatial input (correlated spec or PGM)".into(),
            ));
        }
        BatchLayout::Grid {
            h: map.h(),
            w: map.w(),
        }
    } else {
        BatchLayout::Independent
    };
    let data: Vec<&[f32]> = map.vectors().collect();
    let cfg = TrainConfig {
        lr: a.lr,
        steps: a.steps,
        batch: a.batch,
        seed: a.seed,
        codebook_learning: if a.ema {
            CodebookLearning::Ema
        } else {
            CodebookLearning::GradientLoss
        },
        reactivate_every: a.reactivate_every,
        quant: QuantConfig {
            m: a.m,
            beta: a.beta,
            metric: a.metric,
            mu: a.mu,
        },
        ..Default::default()
    };
    cfg.validate()?;
    let mut ae = LinearAe::random(d, a.dlat.unwrap_or(d), a.seed)?;
    let mut cb = init_codebook_from_encoder(&ae, &data, a.k, a.m, a.seed)?;
    let log = train(&mut ae, &mut cb, &data, layout, &cfg)?;
    if let Some(path) = &a.log {
        let mut w = create(path)?;
        writeln!(w, "{}", LossRecord::CSV_HEADER)?;
        for r in &log {
            writeln!(w, "{}", r.csv_line())?;
        }
        w.flush()?;
    }
    if let Some(path) = &a.out {
        let mut w = create(path)?;
        write_codebook(
            &mut w,
            &CodebookFile {
                codebook: cb.clone(),
                m: a.m,
                metric: a.metric,
            },
        )?;
        w.flush()?;
    }
    let (first, last) = (&log[0], &log[log.len() - 1]);
    writeln!(out, "initial_total={:.8}", first.total)?;
    writeln!(out, "final_total={:.8}", last.total)?;
    writeln!(out, "reduction={:.4}", 1.0 - last.total / first.total)?;
    writeln!(out, "usage={:.3}", last.usage)?;
    Ok(())
}

fn parse_hw(s: &str) -> Result<(usize, usize)> {
    let bad = || LoocError::InvalidConfig(format!("expected HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// `KxD` or `KxD:m=M`.
fn parse_cost_config(s: &str) -> Result<(usize, usize, usize)> {
    let bad = || LoocError::InvalidConfig(format!("expected KxD or KxD:m=M, got {s:?}"));
    let (kd, m) = match s.split_once(':') {
        Some((kd, rest)) => {
            let m = rest.trim().strip_prefix("m=").ok_or_else(bad)?;
            (kd, m.parse::<usize>().map_err(|_| bad())?)
        }
        None => (s, 1),
    };
    let (k, d) = parse_hw(kd).map_err(|_| bad())?;
    if m == 0 {
        return Err(bad());
    }
    Ok((k, d, m))
}

#[derive(serde::Serialize)]
struct CostRow {
    config: String,
    #[serde(rename = "K")]
    k: usize,
    #[serde(rename = "dStar")]
    dstar: usize,
    m: usize,
    #[serde(flatten)]
    cost: crate::cost::CostReport,
}

fn cmd_cost(a: &CostArgs, out: &mut impl Write) -> Result<()> {
    let (h, w) = parse_hw(&a.hw)?;
    let mut rows = Vec::with_capacity(a.config.len());
    for c in &a.config {
        let (k, dstar, m) = parse_cost_config(c)?;
        rows.push(CostRow {
            config: c.clone(),
            k,
            dstar,
            m,
            cost: storage_cost(k, dstar, m, h, w),
        });
    }
    if a.json {
        writeln!(
            out,
            "{}",
            serde_json::to_string_pretty(&rows).expect("cost rows serialize")
        )?;
        return Ok(());
    }
    let base = rows[0].cost.codebook_bits as f64;
    writeln!(
        out,
        "{:<16} {:>8} {:>6} {:>5} {:>14} {:>12} {:>14} {:>16} {:>10}",
        "config",
        "K",
        "dStar",
        "m",
        "codebookBits",
        "indexBits",
        "totalBits",
        "multiplications",
        "cb_ratio"
    )?;
    for r in &rows {
        writeln!(
            out,
            "{:<16} {:>8} {:>6} {:>5} {:>14} {:>12} {:>14} {:>16} {:>10.4}",
            r.config,
            r.k,
            r.dstar,
            r.m,
            r.cost.codebook_bits,
            r.cost.index_bits,
            r.cost.total_bits,
            r.cost.multiplications,
            base / r.cost.codebook_bits as f64,
        )?;
    }
    Ok(())
}

fn cmd_bench(a: &BenchArgs, out: &mut impl Write) -> Result<()> {
    let (h, w) = parse_hw(&a.hw)?;
    if a.reps == 0 || a.k == 0 || a.dstar == 0 || a.m == 0 {
        return Err(LoocError::InvalidConfig(
            "K, dstar, m and reps must be positive".into(),
        ));
    }
    let d = a.dstar * a.m;
    let z = gen_correlated_map(h, w, d, 1.0, a.seed)?;
    let segments: Vec<&[f32]> = z.data().chunks_exact(a.dstar).collect();
    let looc_cb = Codebook::init(a.k, a.dstar, &segments, a.seed)?;
    let pq = PqCodebookSet::new(
        (0..a.m)
            .map(|q| {
                let own: Vec<&[f32]> = segments.iter().skip(q).step_by(a.m).copied().collect();
                Codebook::init(a.k, a.dstar, &own, a.seed.wrapping_add(q as u64 + 1))
            })
            .collect::<Result<Vec<_>>>()?,
    )?;
    let vq_k = (a.k as u128)
        .checked_pow(a.m as u32)
        .filter(|&c| c <= a.max_vq as u128);
    let vq_cb = match vq_k {
        Some(k) => {
            let vectors: Vec<&[f32]> = z.vectors().collect();
            Some(Codebook::init(k as usize, d, &vectors, a.seed)?)
        }
        None => None,
    };

    writeln!(
        out,
        "{:<6} {:>8} {:>6} {:>4} {:>14} {:>16} {:>16} {:>6}",
        "method", "K", "dim", "m", "vectors/sec", "measured_mults", "predicted_mults", "match"
    )?;
    if vq_cb.is_none() {
        writeln!(out, "vq     skipped: K^m exceeds --max-vq {}", a.max_vq)?;
    }
    let mut row = |name: &str,
                   k: usize,
                   dim: usize,
                   m: usize,
                   f: &dyn Fn(&mut u64) -> Result<CodeGrid>|
     -> Result<()> {
        let mut mults = 0u64;
        let start = Instant::now();
        for _ in 0..a.reps {
            mults = 0;
            f(&mut mults)?;
        }
        let secs = start.elapsed().as_secs_f64().max(1e-9);
        let rate = (h * w * a.reps) as f64 / secs;
        let predicted = storage_cost(k, dim, m, h, w).multiplications;
        writeln!(
            out,
            "{:<6} {:>8} {:>6} {:>4} {:>14.0} {:>16} {:>16} {:>6}",
            name,
            k,
            dim,
            m,
            rate,
            mults,
            predicted,
            if mults == predicted { "yes" } else { "no" }
        )?;
        Ok(())
    };
    if let Some(cb) = &vq_cb {
        row("vq", cb.k(), d, 1, &|c| {
            looc_quantize_counted(&z, cb, 1, Metric::L2, c)
        })?;
    }
    row("pq", a.k, a.dstar, a.m, &|c| {
        pq_quantize_counted(&z, &pq, Metric::L2, c)
    })?;
    row("looc", a.k, a.dstar, a.m, &|c| {
        looc_quantize_counted(&z, &looc_cb, a.m, Metric::L2, c)
    })?;
    Ok(())
}
