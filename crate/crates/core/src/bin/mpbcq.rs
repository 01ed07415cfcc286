//! `mpbcq`: quantize, refine, execute, benchmark and inspect multi-precision BCQ models.
//!
//! Exit codes: 0 success, 2 bad flags or shapes, 3 I/O or corrupt files,
//! 4 numeric failure. Diagnostics go to stderr only.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mpbcq::calib::{refine_scales, Solver, DEFAULT_EPOCHS, DEFAULT_LEARNING_RATE};
use mpbcq::gemv::{bench, gemv, ExecOptions, GemvPath, LLM_LAYER_SHAPES};
use mpbcq::model_format::{self, model_footprint};
use mpbcq::progressive::build_multiprecision;
use mpbcq::tensor_io::{load_matrix, random_gaussian, save_matrix};
use mpbcq::{Error, ErrorClass, Matrix, Mode, MultiPrecisionModel, QuantConfig};

const THREADS_ENV: &str = "ANYBCQ_THREADS";

#[derive(Parser)]
#[command(name = "mpbcq", version, about = "Multi-precision binary-coded quantization toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a model at one precision or over a range L:H and write an ABCQ file.
    Quantize(QuantizeArgs),
    /// Refit one precision's scales against calibration activations.
    Refine(RefineArgs),
    /// Run y = Ŵ·x for every row of an FMAT input at a chosen precision.
    Gemv(GemvArgs),
    /// Time the GEMV paths per precision.
    Bench(BenchArgs),
    /// Print a model's shape and memory footprint per precision.
    Inspect(InspectArgs),
    /// Write a seeded standard-normal FMAT matrix.
    Generate(GenerateArgs),
}

#[derive(Clone, Copy, ValueEnum, PartialEq, Eq)]
enum Format {
    Text,
    Csv,
}

#[derive(Args)]
struct WeightSource {
    /// FMAT weight matrix.
    #[arg(long, conflicts_with = "random")]
    input: Option<PathBuf>,
    /// Generate seeded Gaussian weights of shape NxK instead of reading a file.
    #[arg(long, value_name = "NxK")]
    random: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
}

#[derive(Args)]
struct QuantizeArgs {
    #[command(flatten)]
    weights: WeightSource,
    /// Precision `p` (fixed) or range `L:H` (progressive).
    #[arg(long, default_value = "2:4")]
    bits: String,
    #[arg(long, default_value_t = 128)]
    group: usize,
    #[arg(long, default_value_t = 20)]
    cycles: usize,
    #[arg(long, default_value = "asym")]
    mode: String,
    #[arg(long)]
    out: PathBuf,
    /// Also write the weights used (handy with --random).
    #[arg(long)]
    save_weights: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct RefineArgs {
    #[arg(long)]
    model: PathBuf,
    /// Full-precision weights the model was fitted to (FMAT).
    #[arg(long, conflicts_with = "random")]
    weights: Option<PathBuf>,
    /// Regenerate the weights as in `quantize --random NxK --seed N`.
    #[arg(long, value_name = "NxK")]
    random: Option<String>,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Calibration activations, one sample per row (FMAT).
    #[arg(long)]
    calib: PathBuf,
    #[arg(long)]
    bits: usize,
    #[arg(long, default_value = "exact")]
    solver: String,
    #[arg(long, default_value_t = DEFAULT_EPOCHS)]
    epochs: usize,
    #[arg(long, default_value_t = DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Output path; defaults to overwriting --model.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct GemvArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    bits: usize,
    /// Input vectors, one per row (FMAT, S×K).
    #[arg(long)]
    x: PathBuf,
    /// Output vectors (FMAT, S×N).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "lut")]
    path: String,
    #[arg(long, default_value_t = 8)]
    chunk_bits: usize,
}

#[derive(Args)]
struct BenchArgs {
    #[arg(long, conflicts_with = "shapes")]
    model: Option<PathBuf>,
    /// Synthetic models instead of --model: `llm` for the standard layer
    /// shapes, or a comma-separated list of NxK.
    #[arg(long)]
    shapes: Option<String>,
    /// `all`, a precision `p`, or a range `L:H`.
    #[arg(long, default_value = "all")]
    bits: String,
    #[arg(long, default_value_t = 32)]
    repeats: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Comma-separated subset of lut,naive.
    #[arg(long, default_value = "lut,naive")]
    paths: String,
    /// Skip the dense f32 baseline.
    #[arg(long)]
    no_dense: bool,
    /// Run rows on a single thread.
    #[arg(long)]
    serial: bool,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    model: PathBuf,
    /// Bytes per stored scale used in the footprint table (2 or 4).
    #[arg(long, default_value_t = 2)]
    scale_width: u64,
    #[arg(long, value_enum, default_value_t = Format::Text)]
    format: Format,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

fn parse_shape(s: &str) -> Result<(usize, usize), Error> {
    let (n, k) = s.split_once(['x', 'X']).ok_or_else(|| usage(format!("shape {s:?} is not NxK")))?;
    let parse = |v: &str| usize::from_str(v.trim()).map_err(|_| usage(format!("shape {s:?} is not NxK")));
    Ok((parse(n)?, parse(k)?))
}

fn parse_bits(s: &str) -> Result<(usize, usize), Error> {
    let parse = |v: &str| usize::from_str(v.trim()).map_err(|_| usage(format!("bad --bits {s:?}")));
    let (lo, hi) = match s.split_once(':') {
        Some((l, h)) => (parse(l)?, parse(h)?),
        None => {
            let p = parse(s)?;
            (p, p)
        }
    };
    if lo == 0 || lo > hi || hi > mpbcq::bcq::MAX_PLANES {
        return Err(usage(format!("--bits {s}: need 1 <= L <= H <= {}", mpbcq::bcq::MAX_PLANES)));
    }
    Ok((lo, hi))
}

fn load_weights(input: Option<&PathBuf>, random: Option<&str>, seed: u64) -> Result<Matrix, Error> {
    match (input, random) {
        (Some(path), None) => load_matrix(path),
        (None, Some(shape)) => {
            let (n, k) = parse_shape(shape)?;
            random_gaussian(n, k, seed)
        }
        _ => Err(usage("give exactly one of --input/--weights or --random")),
    }
}

fn cmd_quantize(a: QuantizeArgs) -> Result<(), Error> {
    let (lo, hi) = parse_bits(&a.bits)?;
    let mode = Mode::from_str(&a.mode)?;
    let cfg = QuantConfig::new(a.group, mode, a.cycles);
    cfg.validate()?;
    let w = load_weights(a.weights.input.as_ref(), a.weights.random.as_deref(), a.weights.seed)?;
    if let Some(path) = &a.save_weights {
        save_matrix(&w, path)?;
    }
    let model = build_multiprecision(&w, lo, hi, &cfg)?;
    model_format::serialize(&model, &a.out)?;
    let errors = model.relative_errors(&w)?;
    match a.format {
        Format::Text => {
            println!("model {}x{} g={} mode={} cycles={} bits={lo}:{hi}", w.rows(), w.cols(), a.group, mode, a.cycles);
            println!("{:>4} {:>16} {:>16}", "p", "rel_error", "sq_error");
            let norm = w.frobenius_sq();
            for (p, e) in errors {
                println!("{p:>4} {e:>16.8} {:>16.6}", e * norm);
            }
        }
        Format::Csv => {
            println!("p,rel_error");
            for (p, e) in errors {
                println!("{p},{e:.10}");
            }
        }
    }
    Ok(())
}

fn cmd_refine(a: RefineArgs) -> Result<(), Error> {
    let mut model = model_format::deserialize(&a.model)?;
    let w = load_weights(a.weights.as_ref(), a.random.as_deref(), a.seed)?;
    let x = load_matrix(&a.calib)?;
    if w.rows() != model.rows() || w.cols() != model.cols() {
        return Err(Error::Shape(format!(
            "weights {}x{} do not match model {}x{}",
            w.rows(),
            w.cols(),
            model.rows(),
            model.cols()
        )));
    }
    if x.cols() != w.cols() {
        return Err(Error::Shape(format!("calibration batch has {} columns, model {}", x.cols(), w.cols())));
    }
    let solver = match a.solver.as_str() {
        "exact" => Solver::Exact,
        "gd" => {
            println!("solver=gd epochs={} lr={}", a.epochs, a.lr);
            Solver::GradientDescent { epochs: a.epochs, learning_rate: a.lr }
        }
        other => return Err(usage(format!("unknown solver {other:?} (expected exact|gd)"))),
    };
    let out = refine_scales(&w, &model, &x, a.bits, solver)?;
    model.replace_scale_set(a.bits, out.scales)?;
    model_format::serialize(&model, a.out.as_ref().unwrap_or(&a.model))?;
    match a.format {
        Format::Text => {
            println!("p={} loss_before={:.9e} loss_after={:.9e}", a.bits, out.loss_before, out.loss_after);
            if out.ridge_rows > 0 {
                println!("ridge fallback on {} rows (fewer samples than unknowns or singular)", out.ridge_rows);
            }
        }
        Format::Csv => {
            println!("p,loss_before,loss_after,ridge_rows");
            println!("{},{:.12e},{:.12e},{}", a.bits, out.loss_before, out.loss_after, out.ridge_rows);
        }
    }
    Ok(())
}

fn cmd_gemv(a: GemvArgs) -> Result<(), Error> {
    let model = model_format::deserialize(&a.model)?;
    let path = GemvPath::from_str(&a.path)?;
    let x = load_matrix(&a.x)?;
    let opts = ExecOptions { chunk_bits: a.chunk_bits, parallel: true };
    let mut data = Vec::with_capacity(x.rows() * model.rows());
    let mut plane_bytes = 0u64;
    for s in 0..x.rows() {
        let (y, stats) = gemv(&model, a.bits, x.row(s), path, opts)?;
        plane_bytes += stats.plane_bytes_fetched;
        data.extend(y);
    }
    let y = Matrix::new(x.rows(), model.rows(), data).map_err(|_| Error::NonFinite(0))?;
    save_matrix(&y, &a.out)?;
    let bytes = y.to_bytes();
    let sum: f64 = y.data().iter().map(|&v| v as f64).sum();
    println!(
        "p={} path={} rows={} crc32={:08x} sum={:.9e} plane_bytes={}",
        a.bits,
        path,
        y.rows(),
        crc32fast::hash(&bytes[mpbcq::tensor_io::FMAT_HEADER_LEN..]),
        sum,
        plane_bytes
    );
    Ok(())
}

fn bench_precisions(spec: &str, model: &MultiPrecisionModel) -> Result<Vec<usize>, Error> {
    if spec == "all" {
        return Ok(model.precisions().collect());
    }
    let (lo, hi) = parse_bits(spec)?;
    if lo < model.p_low() || hi > model.p_high() {
        return Err(Error::PrecisionOutOfRange {
            p: if lo < model.p_low() { lo } else { hi },
            low: model.p_low(),
            high: model.p_high(),
        });
    }
    Ok((lo..=hi).collect())
}

fn cmd_bench(a: BenchArgs) -> Result<(), Error> {
    let paths = a.paths.split(',').map(GemvPath::from_str).collect::<Result<Vec<_>, _>>()?;
    let opts = if a.serial { ExecOptions::serial() } else { ExecOptions::default() };
    let models: Vec<MultiPrecisionModel> = match (&a.model, &a.shapes) {
        (Some(path), None) => vec![model_format::deserialize(path)?],
        (None, Some(spec)) => {
            let shapes = if spec == "llm" {
                LLM_LAYER_SHAPES.to_vec()
            } else {
                spec.split(',').map(parse_shape).collect::<Result<_, _>>()?
            };
            let cfg = QuantConfig::new(128, Mode::Asymmetric, 0);
            shapes
                .into_iter()
                .map(|(n, k)| MultiPrecisionModel::synthetic(n, k, 2, 4, cfg, a.seed))
                .collect::<Result<_, _>>()?
        }
        _ => return Err(usage("give exactly one of --model or --shapes")),
    };
    let mut report = mpbcq::gemv::BenchReport::default();
    for model in &models {
        let ps = bench_precisions(&a.bits, model)?;
        let x: Vec<f32> = random_gaussian(1, model.cols(), a.seed.wrapping_add(7))?.into_data();
        // Dense baselines above 512 MiB of weights are skipped.
        let dense = !a.no_dense && model.rows() * model.cols() * 4 <= 512 << 20;
        let r = bench(model, &ps, &x, a.repeats, &paths, dense, opts)?;
        report.entries.extend(r.entries);
    }
    match a.format {
        Format::Text => print!("{}", report.to_table()),
        Format::Csv => print!("{}", report.to_csv()),
    }
    Ok(())
}

fn cmd_inspect(a: InspectArgs) -> Result<(), Error> {
    if !matches!(a.scale_width, 2 | 4) {
        return Err(usage("--scale-width must be 2 or 4"));
    }
    let model = model_format::deserialize(&a.model)?;
    let cfg = model.config();
    let fp = model_footprint(&model, a.scale_width);
    match a.format {
        Format::Text => {
            println!(
                "model {}x{} g={} mode={} bits={}:{} scale_width={}B",
                model.rows(),
                model.cols(),
                cfg.group_size,
                cfg.mode,
                model.p_low(),
                model.p_high(),
                a.scale_width
            );
            print!("{}", fp.to_table());
        }
        Format::Csv => print!("{}", fp.to_csv()),
    }
    Ok(())
}

fn cmd_generate(a: GenerateArgs) -> Result<(), Error> {
    let m = random_gaussian(a.rows, a.cols, a.seed)?;
    save_matrix(&m, &a.out)?;
    Ok(())
}

fn configure_threads() -> Result<(), Error> {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n = usize::from_str(raw.trim()).map_err(|_| usage(format!("{THREADS_ENV}={raw:?} is not a count")))?;
    if n > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("thread pool: {e}")))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = configure_threads().and_then(|_| match cli.command {
        Command::Quantize(a) => cmd_quantize(a),
        Command::Refine(a) => cmd_refine(a),
        Command::Gemv(a) => cmd_gemv(a),
        Command::Bench(a) => cmd_bench(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Generate(a) => cmd_generate(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(match e.class() {
                ErrorClass::Usage => 2,
                ErrorClass::Io => 3,
                ErrorClass::Numeric => 4,
            })
        }
    }
}
