use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use cvmac_core::cost::{cost_report, table_reports, CostRow};
use cvmac_core::cvconv::{weight_histogram, ApproxEngine};
use cvmac_core::fixture::{generate_fixture, DEFAULT_SEED};
use cvmac_core::io::{digest, load_dataset, load_model, load_weights, write_csv, Dataset};
use cvmac_core::perforation::PerforationConfig;
use cvmac_core::quant::{evaluate, AccurateEngine, ConvFilter, MacEngine, Patches, QTensor, QuantModel};
use cvmac_core::stats::{exhaustive_conv_error, mc_conv_error, ActivationDist, CMode};
use cvmac_core::systolic::{simulate_model, simulate_products, ArrayConfig, CycleReport, LayerCycles, TraceEvent};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

/// Approximate MAC experiments: perforated multipliers with control-variate
/// correction, a MAC array simulator and a full-adder cost model.
///
/// Exit codes: 0 success, 1 a self-check (--assert, digest comparison)
/// failed, 2 usage, file format or evaluation error.
#[derive(Parser, Debug)]
#[command(name = "cvmac", version)]
struct Cli {
    /// Worker threads for batch inference and Monte Carlo runs.
    #[arg(long, global = true, env = "CVMAC_JOBS")]
    jobs: Option<usize>,

    /// Print tables as Markdown instead of CSV.
    #[arg(long, global = true)]
    markdown: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Top-1 accuracy of a model on a dataset for each perforation setting.
    Infer(InferArgs),
    /// Full-adder savings of the MAC* array against the MAC+ column overhead.
    Cost(CostArgs),
    /// Empirical convolution error moments against the closed forms.
    Stats(StatsArgs),
    /// Cycle-level MAC array simulation of a model or a random layer.
    Simulate(SimulateArgs),
    /// Weight histogram of one filter.
    Histogram(HistogramArgs),
    /// Writes the synthetic fixture model, dataset and manifest.
    Fixture(FixtureArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Switch {
    On,
    Off,
}

impl Switch {
    fn on(self) -> bool {
        self == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CvChoice {
    On,
    Off,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum EngineKind {
    Functional,
    Systolic,
}

#[derive(Args, Debug)]
struct InferArgs {
    /// Model JSON file.
    #[arg(long)]
    model: PathBuf,
    /// Dataset file.
    #[arg(long)]
    data: PathBuf,
    /// Perforation depths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
    m: Vec<u32>,
    /// Control variate setting; `both` emits one row for each.
    #[arg(long, value_enum, default_value_t = CvChoice::Both)]
    cv: CvChoice,
    #[arg(long, value_enum, default_value_t = EngineKind::Functional)]
    engine: EngineKind,
    /// Array dimension for the systolic engine.
    #[arg(long, default_value_t = 16)]
    n: usize,
    /// Write the table to this file instead of stdout.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CostArgs {
    /// Array dimension.
    #[arg(long, required_unless_present = "table1", conflicts_with = "table1")]
    n: Option<u64>,
    /// Perforation depth.
    #[arg(long, required_unless_present = "table1", conflicts_with = "table1")]
    m: Option<u32>,
    /// Emit the eight reference configurations (N in 16..64, m in 1..2).
    #[arg(long)]
    table1: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum CModeArg {
    Exact,
    Quantized,
}

impl From<CModeArg> for CMode {
    fn from(c: CModeArg) -> Self {
        match c {
            CModeArg::Exact => CMode::ExactRational,
            CModeArg::Quantized => CMode::Quantized8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum DistArg {
    Uniform,
    Dataset,
}

#[derive(Args, Debug)]
struct StatsArgs {
    /// Number of random i8 weights drawn from --seed.
    #[arg(long, required_unless_present = "weights_file", conflicts_with = "weights_file")]
    k: Option<usize>,
    /// JSON file `{"weights":[...]}`.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    #[arg(long, default_value_t = 2)]
    m: u32,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    cv: Switch,
    /// Control constant: exact rational weight mean or its 8-bit rounding.
    #[arg(long, value_enum, default_value_t = CModeArg::Exact)]
    c_mode: CModeArg,
    #[arg(long, default_value_t = 1_000_000)]
    trials: u64,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Activation source.
    #[arg(long, value_enum, default_value_t = DistArg::Uniform)]
    dist: DistArg,
    /// Dataset for `--dist dataset`.
    #[arg(long, required_if_eq("dist", "dataset"))]
    data: Option<PathBuf>,
    /// Enumerate every dropped-bit tuple instead of sampling.
    #[arg(long, conflicts_with_all = ["trials", "dist"])]
    exhaustive: bool,
    /// Exit 1 when the empirical moments miss the documented bounds.
    #[arg(long = "assert")]
    check: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Model JSON file.
    #[arg(long, required_unless_present = "layer_spec", conflicts_with = "layer_spec")]
    model: Option<PathBuf>,
    /// Random layer `k=<weights>,filters=<rows>,windows=<count>`.
    #[arg(long)]
    layer_spec: Option<String>,
    /// Dataset supplying the model input; a random input is used otherwise.
    #[arg(long, requires = "model")]
    data: Option<PathBuf>,
    /// Sample index within --data.
    #[arg(long, default_value_t = 0)]
    sample: usize,
    #[arg(long, default_value_t = 16)]
    n: usize,
    #[arg(long, default_value_t = 2)]
    m: u32,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    cv: Switch,
    /// Seed for random inputs and layers.
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
    /// Write every unit update as CSV to this file.
    #[arg(long)]
    trace: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct HistogramArgs {
    /// Model JSON file.
    #[arg(long, required_unless_present = "weights_file", conflicts_with = "weights_file")]
    model: Option<PathBuf>,
    /// JSON file `{"weights":[...]}`.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    /// Layer index within the model.
    #[arg(long, default_value_t = 0)]
    layer: usize,
    /// Filter index within the layer.
    #[arg(long, default_value_t = 0)]
    filter: usize,
    #[arg(long, default_value_t = 1)]
    bin_width: u32,
}

#[derive(Args, Debug)]
struct FixtureArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    seed: u64,
}

/// Successful run, or a failed self-check.
enum Status {
    Ok,
    CheckFailed,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(jobs) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(jobs).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(2);
        }
    }
    match run(&cli) {
        Ok(Status::Ok) => ExitCode::SUCCESS,
        Ok(Status::CheckFailed) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: &Cli) -> Result<Status> {
    match &cli.command {
        Command::Infer(args) => infer(args, cli.markdown),
        Command::Cost(args) => cost(args, cli.markdown),
        Command::Stats(args) => stats(args),
        Command::Simulate(args) => simulate(args),
        Command::Histogram(args) => histogram(args, cli.markdown),
        Command::Fixture(args) => fixture(args),
    }
}

fn table<T: Serialize>(rows: &[T], markdown: bool) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(&mut buf, rows)?;
    let text = String::from_utf8(buf)?;
    Ok(if markdown { csv_to_markdown(&text) } else { text })
}

/// Our CSV fields never contain commas or quotes, so a plain split suffices.
fn csv_to_markdown(text: &str) -> String {
    let mut out = String::new();
    for (i, line) in text.lines().enumerate() {
        let cells: Vec<&str> = line.split(',').collect();
        out += &format!("| {} |\n", cells.join(" | "));
        if i == 0 {
            out += &format!("|{}\n", "---|".repeat(cells.len()));
        }
    }
    out
}

fn emit(text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            std::io::stdout().write_all(text.as_bytes())?;
            Ok(())
        }
    }
}

fn emit_json<T: Serialize>(value: &T) -> Result<()> {
    emit(&(serde_json::to_string_pretty(value)? + "\n"), None)
}

fn load_inputs(model: &Path, data: &Path) -> Result<(QuantModel, Dataset)> {
    let model = load_model(model).with_context(|| format!("loading model {}", model.display()))?;
    let data = load_dataset(data).with_context(|| format!("loading dataset {}", data.display()))?;
    Ok((model, data))
}

#[derive(Serialize)]
struct InferRow {
    engine: EngineKind,
    m: u32,
    cv: &'static str,
    samples: usize,
    top1_accuracy: f64,
    accuracy_loss_vs_accurate: f64,
}

fn infer(args: &InferArgs, markdown: bool) -> Result<Status> {
    let (model, data) = load_inputs(&args.model, &args.data)?;
    let cvs: &[bool] = match args.cv {
        CvChoice::On => &[true],
        CvChoice::Off => &[false],
        CvChoice::Both => &[false, true],
    };
    let base = evaluate(&model, &data, &AccurateEngine)?;
    let mut rows = Vec::new();
    for &m in &args.m {
        for &cv in cvs {
            let cfg = PerforationConfig::new(m, cv)?;
            let eval = match args.engine {
                EngineKind::Functional => evaluate(&model, &data, &ApproxEngine { cfg })?,
                EngineKind::Systolic => {
                    let engine = cvmac_core::systolic::SystolicEngine {
                        cfg: ArrayConfig::for_perforation(args.n, cfg)?,
                    };
                    evaluate(&model, &data, &engine)?
                }
            };
            rows.push(InferRow {
                engine: args.engine,
                m,
                cv: if cv { "on" } else { "off" },
                samples: eval.samples(),
                top1_accuracy: eval.top1(),
                accuracy_loss_vs_accurate: (base.correct as f64 - eval.correct as f64) / eval.samples() as f64,
            });
        }
    }
    emit(&table(&rows, markdown)?, args.report.as_deref())?;
    Ok(Status::Ok)
}

fn cost(args: &CostArgs, markdown: bool) -> Result<Status> {
    let rows: Vec<CostRow> = if args.table1 {
        table_reports().iter().map(|r| r.row()).collect()
    } else {
        let (n, m) = (args.n.context("--n is required")?, args.m.context("--m is required")?);
        vec![cost_report(n, m)?.row()]
    };
    emit(&table(&rows, markdown)?, None)?;
    Ok(Status::Ok)
}

fn random_weights(seed: u64, k: usize) -> Vec<i8> {
    // A stream the Monte Carlo chunks never use.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::MAX);
    (0..k).map(|_| rng.random()).collect()
}

fn stats(args: &StatsArgs) -> Result<Status> {
    let weights = match (&args.weights_file, args.k) {
        (Some(path), _) => load_weights(path).with_context(|| format!("loading weights {}", path.display()))?,
        (None, Some(k)) if k > 0 => random_weights(args.seed, k),
        _ => bail!("--k must be at least 1"),
    };
    let cfg = PerforationConfig::new(args.m, args.cv.on())?;
    let c_mode = CMode::from(args.c_mode);
    let dataset = match (args.dist, &args.data) {
        (DistArg::Dataset, Some(path)) => Some(load_dataset(path)?),
        _ => None,
    };
    let stats = if args.exhaustive {
        exhaustive_conv_error(&weights, cfg, c_mode)?
    } else {
        let dist = dataset
            .as_ref()
            .map_or(ActivationDist::Uniform, ActivationDist::FromDataset);
        mc_conv_error(&weights, 0, cfg, c_mode, dist, args.trials, args.seed)?
    };
    emit_json(&stats.report(&weights, cfg, c_mode))?;
    if !args.check {
        return Ok(Status::Ok);
    }
    let failures = match &stats.exact {
        Some(exact) if exact.mean != stats.predicted_mean || exact.variance != stats.predicted_variance => {
            vec!["exhaustive moments differ from the closed form".to_string()]
        }
        Some(_) => Vec::new(),
        None => stats.check_bounds(),
    };
    for failure in &failures {
        eprintln!("assertion failed: {failure}");
    }
    Ok(if failures.is_empty() {
        Status::Ok
    } else {
        Status::CheckFailed
    })
}

#[derive(Debug, PartialEq)]
struct LayerSpec {
    k: usize,
    filters: usize,
    windows: usize,
}

fn parse_layer_spec(spec: &str) -> Result<LayerSpec> {
    let mut parsed = LayerSpec {
        k: 0,
        filters: 0,
        windows: 1,
    };
    for part in spec.split(',').filter(|p| !p.is_empty()) {
        let (key, value) = part
            .split_once('=')
            .with_context(|| format!("layer spec entry `{part}` is not key=value"))?;
        let value: usize = value
            .trim()
            .parse()
            .with_context(|| format!("layer spec value `{value}` is not a count"))?;
        match key.trim() {
            "k" => parsed.k = value,
            "filters" => parsed.filters = value,
            "windows" => parsed.windows = value,
            other => bail!("unknown layer spec key `{other}` (expected k, filters, windows)"),
        }
    }
    if parsed.k == 0 || parsed.filters == 0 || parsed.windows == 0 {
        bail!("layer spec needs k, filters and windows >= 1");
    }
    Ok(parsed)
}

#[derive(Serialize)]
struct SimulateReport {
    n: usize,
    m: u32,
    cv: bool,
    mode: cvmac_core::systolic::ArrayMode,
    cycles: u64,
    overhead_cycles: u64,
    layers: Vec<LayerCycles>,
    functional_digest: String,
    systolic_digest: String,
    digests_match: bool,
}

fn digest_i32(values: &[i32]) -> String {
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_le_bytes()).collect();
    digest(&bytes)
}

fn simulate(args: &SimulateArgs) -> Result<Status> {
    let pcfg = PerforationConfig::new(args.m, args.cv.on())?;
    let acfg = ArrayConfig::for_perforation(args.n, pcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut trace = args.trace.as_ref().map(|_| Vec::<TraceEvent>::new());

    let (functional, systolic, layers) = if let Some(spec) = &args.layer_spec {
        let spec = parse_layer_spec(spec)?;
        let filters = (0..spec.filters)
            .map(|_| {
                ConvFilter::new(
                    (0..spec.k).map(|_| rng.random()).collect(),
                    rng.random_range(-32768..=32767),
                )
            })
            .collect::<cvmac_core::Result<Vec<_>>>()?;
        let data = (0..spec.k * spec.windows).map(|_| rng.random()).collect();
        let patches = Patches::new(spec.k, data)?;
        let functional = ApproxEngine { cfg: pcfg }.compute(&filters, &patches)?;
        let (systolic, report) = simulate_products(&acfg, &filters, &patches, trace.as_mut())?;
        let layer = LayerCycles {
            index: 0,
            kind: "dense",
            report,
        };
        (functional, systolic, vec![layer])
    } else {
        let path = args.model.as_ref().context("--model or --layer-spec is required")?;
        let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
        let bytes = match &args.data {
            Some(data) => {
                let data = load_dataset(data)?;
                let sample = data
                    .samples()
                    .get(args.sample)
                    .with_context(|| format!("sample {} out of range ({} samples)", args.sample, data.len()))?;
                sample.data.clone()
            }
            None => (0..model.input_shape().iter().product())
                .map(|_| rng.random())
                .collect(),
        };
        let input = QTensor::from_activations(model.input_shape().to_vec(), &bytes)?;
        let functional = cvmac_core::cvconv::run_model_approx(&model, &input, pcfg)?;
        let (systolic, layers) = simulate_model(&acfg, &model, &input, trace.as_mut())?;
        (functional.logits, systolic.logits, layers)
    };

    if let (Some(path), Some(events)) = (&args.trace, &trace) {
        let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
        write_csv(std::io::BufWriter::new(file), events)?;
    }
    let total = layers.iter().fold(
        CycleReport {
            cycles: 0,
            overhead_cycles: 0,
            tiles: 0,
        },
        |acc, l| CycleReport {
            cycles: acc.cycles + l.report.cycles,
            overhead_cycles: acc.overhead_cycles + l.report.overhead_cycles,
            tiles: acc.tiles + l.report.tiles,
        },
    );
    let report = SimulateReport {
        n: acfg.n(),
        m: acfg.m(),
        cv: pcfg.control_variate(),
        mode: acfg.mode(),
        cycles: total.cycles,
        overhead_cycles: total.overhead_cycles,
        layers,
        functional_digest: digest_i32(&functional),
        systolic_digest: digest_i32(&systolic),
        digests_match: functional == systolic,
    };
    emit_json(&report)?;
    if !report.digests_match {
        eprintln!("assertion failed: systolic output differs from the functional engine");
        return Ok(Status::CheckFailed);
    }
    Ok(Status::Ok)
}

fn histogram(args: &HistogramArgs, markdown: bool) -> Result<Status> {
    let filter = match (&args.weights_file, &args.model) {
        (Some(path), _) => ConvFilter::new(load_weights(path)?, 0)?,
        (None, Some(path)) => {
            let model = load_model(path).with_context(|| format!("loading model {}", path.display()))?;
            let layer = model
                .layers()
                .get(args.layer)
                .with_context(|| format!("layer {} out of range ({} layers)", args.layer, model.layers().len()))?;
            let filters = layer
                .filters()
                .with_context(|| format!("layer {} ({}) has no filters", args.layer, layer.kind()))?;
            filters
                .get(args.filter)
                .with_context(|| format!("filter {} out of range ({} filters)", args.filter, filters.len()))?
                .clone()
        }
        (None, None) => bail!("--model or --weights-file is required"),
    };
    emit(&table(&weight_histogram(&filter, args.bin_width)?, markdown)?, None)?;
    Ok(Status::Ok)
}

fn fixture(args: &FixtureArgs) -> Result<Status> {
    let fx = generate_fixture(args.seed)?;
    let paths = fx.write_to(&args.out)?;
    for path in &paths {
        eprintln!("wrote {}", path.display());
    }
    emit(&fx.manifest_json(), None)?;
    Ok(Status::Ok)
}
