use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use laptsne::affinity::{joint_affinities, AffinityOptions};
use laptsne::io::{self, Dataset, DatasetFingerprint, LabelColumn, RunManifest};
use laptsne::metrics::{self, class_count};
use laptsne::objective::KernelKind;
use laptsne::optimizer::{self, default_batch_size, Mode, MomentumSchedule, RunConfig};
use laptsne::scale::{self, FitOptions};
use laptsne::spectral::{self, build_laplacian, LaplacianOptions};
use laptsne::{Error, Result};
use serde::{Deserialize, Serialize};
use serde_json::json;

/// Landmark count used when `--landmarks` is not given (capped at N).
const DEFAULT_LANDMARKS: usize = 10_000;

#[derive(Parser, Debug)]
#[command(
    name = "laptsne",
    version,
    about = "Cluster-contractive t-SNE embeddings",
    args_override_self = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Compute an embedding and write it with a manifest and plots.
    Embed(EmbedArgs),
    /// Print the eigengap estimate of the cluster count.
    EstimateK(EstimateArgs),
    /// Score a saved embedding against its labels.
    Evaluate(EvaluateArgs),
    /// Render a scatter plot of an embedding or an eigenvalue chart.
    Plot(PlotArgs),
}

#[derive(Args, Debug)]
struct InputArgs {
    /// CSV file, or raw little-endian f64 file with a `.json` sidecar.
    #[arg(long)]
    input: PathBuf,
    /// Label column: `last`, a zero-based index or a header name.
    #[arg(long)]
    labels_col: Option<LabelColumn>,
    /// Treat the first CSV line as data even if it is not numeric.
    #[arg(long)]
    no_header: bool,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum KernelArg {
    Tstudent,
    Gaussian,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum ModeArg {
    Full,
    Minibatch,
    Landmark,
}

#[derive(Args, Debug)]
#[command(allow_negative_numbers = true)]
struct EmbedArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 25.0)]
    perplexity: f64,
    /// Number of Laplacian eigenvalues penalized; estimated from the eigengap if absent.
    #[arg(long)]
    khat: Option<usize>,
    #[arg(long, default_value_t = 1e-4)]
    lambda: f64,
    #[arg(long, default_value_t = 500)]
    iters: usize,
    /// Step size; defaults to max(100, 2N).
    #[arg(long)]
    lr: Option<f64>,
    /// `beta` for a constant momentum or `early,late` switching at iteration 100.
    #[arg(long)]
    momentum: Option<String>,
    #[arg(long, value_enum, default_value_t = KernelArg::Tstudent)]
    kernel: KernelArg,
    /// Width of the Gaussian kernel.
    #[arg(long, default_value_t = 1.0)]
    sigma: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Full)]
    mode: ModeArg,
    /// Mini-batch size; defaults to ceil(N/10).
    #[arg(long)]
    batch_size: Option<usize>,
    /// Neighbours added per batch point in mini-batch mode.
    #[arg(long, default_value_t = 5)]
    kappa: usize,
    /// Landmark count in landmark mode; defaults to min(10000, N).
    #[arg(long)]
    landmarks: Option<usize>,
    /// Embedding dimension.
    #[arg(long, default_value_t = 2)]
    dim: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "laptsne-out")]
    out_dir: PathBuf,
    /// Z-score input features before computing affinities.
    #[arg(long)]
    standardize: bool,
    /// Drop the constant eigenvector from the spectral initialization.
    #[arg(long)]
    skip_trivial_eigvec: bool,
    /// Write the per-iteration loss trace.
    #[arg(long)]
    trace: bool,
    #[arg(long, default_value_t = 1)]
    eig_refresh_every: usize,
    /// Reuse the configuration recorded in a previous manifest; other
    /// embedding flags are ignored.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EstimateArgs {
    #[command(flatten)]
    input: InputArgs,
    #[arg(long, default_value_t = 25.0)]
    perplexity: f64,
    #[arg(long)]
    standardize: bool,
    /// Eigenvalues scanned; defaults to min(50, N-1).
    #[arg(long)]
    scan: Option<usize>,
    #[arg(long, default_value = "laptsne-out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    /// Embedding CSV with a header, as written by `embed`.
    #[arg(long)]
    embedding: PathBuf,
    #[arg(long, default_value = "label")]
    labels_col: LabelColumn,
    /// Neighbour counts for k-NN accuracy.
    #[arg(long, value_delimiter = ',', default_value = "10")]
    knn: Vec<usize>,
    /// Clusters for k-means; defaults to the number of classes.
    #[arg(long)]
    kmeans_k: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "laptsne-out")]
    out_dir: PathBuf,
}

#[derive(Args, Debug)]
struct PlotArgs {
    /// Embedding CSV to draw as a scatter plot.
    #[arg(long, conflicts_with = "eigenvalues", required_unless_present = "eigenvalues")]
    embedding: Option<PathBuf>,
    /// Label column of the embedding CSV, if any.
    #[arg(long)]
    labels_col: Option<LabelColumn>,
    /// One-value-per-line eigenvalue file to draw.
    #[arg(long)]
    eigenvalues: Option<PathBuf>,
    /// Position of the marker on the eigenvalue chart; defaults to the largest gap.
    #[arg(long)]
    khat: Option<usize>,
    #[arg(long, default_value = "laptsne-out")]
    out_dir: PathBuf,
}

/// Everything needed to reproduce an embedding, as recorded in the manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct EmbedConfig {
    run: RunConfig,
    landmarks: Option<usize>,
}

fn config_err(msg: impl Into<String>) -> Error {
    Error::Config(msg.into())
}

fn io_err(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// A CSV file has a header when some cell of its first line is not a number.
fn sniff_header(path: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
    Ok(first.split(',').any(|c| c.trim().parse::<f64>().is_err()))
}

fn load_input(args: &InputArgs) -> Result<Dataset> {
    let is_csv = matches!(
        args.input.extension().and_then(|e| e.to_str()),
        Some("csv") | Some("txt")
    );
    let header = is_csv && !args.no_header && sniff_header(&args.input)?;
    let ds = io::load_dataset(&args.input, header, args.labels_col.as_ref())?;
    log::info!("loaded {}: N={}, D={}", ds.name, ds.data.nrows(), ds.data.ncols());
    Ok(ds)
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))
}

fn parse_momentum(text: &str) -> Result<MomentumSchedule> {
    let vals: Vec<f64> = text
        .split(',')
        .map(|s| s.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| config_err(format!("momentum {text:?} is not a number or a pair")))?;
    match vals[..] {
        [b] => Ok(MomentumSchedule::constant(b)),
        [early, late] => Ok(MomentumSchedule {
            early,
            late,
            ..MomentumSchedule::default()
        }),
        _ => Err(config_err(format!("momentum {text:?} must have one or two values"))),
    }
}

fn embed_config(args: &EmbedArgs) -> Result<EmbedConfig> {
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path).map_err(|e| io_err(path, e))?;
        let v: serde_json::Value =
            serde_json::from_str(&text).map_err(|e| config_err(format!("{}: {e}", path.display())))?;
        let cfg = v.get("config").cloned().unwrap_or(v);
        return serde_json::from_value(cfg)
            .map_err(|e| config_err(format!("{}: not an embed configuration: {e}", path.display())));
    }
    let kernel = match args.kernel {
        KernelArg::Tstudent => KernelKind::TStudent,
        KernelArg::Gaussian => KernelKind::Gaussian { sigma: args.sigma },
    };
    let mode = match args.mode {
        ModeArg::Full => Mode::Full,
        ModeArg::Minibatch => Mode::Minibatch,
        ModeArg::Landmark => Mode::Landmark,
    };
    let momentum = match &args.momentum {
        Some(m) => parse_momentum(m)?,
        None => MomentumSchedule::default(),
    };
    if mode != Mode::Landmark && args.landmarks.is_some() {
        log::warn!("--landmarks is ignored outside landmark mode");
    }
    Ok(EmbedConfig {
        run: RunConfig {
            perplexity: args.perplexity,
            d: args.dim,
            k_hat: args.khat,
            lambda: args.lambda,
            step_size: args.lr,
            momentum,
            max_iter: args.iters,
            kernel,
            mode,
            batch_size: args.batch_size,
            knn_expand: args.kappa,
            seed: args.seed,
            standardize: args.standardize,
            skip_trivial_eigvec: args.skip_trivial_eigvec,
            eig_refresh_every: args.eig_refresh_every,
            record_eigenvalues: false,
            ..RunConfig::default()
        },
        landmarks: args.landmarks,
    })
}

fn ms_since(t: Instant) -> f64 {
    t.elapsed().as_secs_f64() * 1e3
}

fn record_output(manifest: &mut RunManifest, key: &str, path: &Path) {
    manifest.outputs.insert(key.into(), path.display().to_string());
}

/// Metrics for `y` when labels are known and there are at least two classes.
fn maybe_metrics(
    y: ndarray::ArrayView2<'_, f64>,
    labels: Option<&[usize]>,
    seed: u64,
) -> Result<Option<metrics::MetricReport>> {
    let Some(labels) = labels else { return Ok(None) };
    let c = class_count(labels);
    if c < 2 {
        return Ok(None);
    }
    let ks: Vec<usize> = [10].into_iter().filter(|&k| k < y.nrows()).collect();
    metrics::evaluate(y, labels, &ks, c, seed).map(Some)
}

fn cmd_embed(args: &EmbedArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let ec = embed_config(args)?;
    let mut cfg = ec.run.clone();
    cfg.record_eigenvalues = false;
    cfg.validate()?;
    let ds = load_input(&args.input)?;
    let n = ds.data.nrows();
    create_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("embed", argv);
    manifest.config = serde_json::to_value(&ec).expect("config serializes");
    manifest.dataset = Some(DatasetFingerprint::of(&ds));

    let t_opt = Instant::now();
    let (y, trace) = match cfg.mode {
        Mode::Full | Mode::Minibatch => {
            let prep = optimizer::prepare(&ds.data, &cfg)?;
            manifest.results.insert("k_hat".into(), json!(prep.k_hat));
            if let Some(gap) = &prep.eigengap {
                let path = args.out_dir.join("eigenvalues_x.csv");
                spectral::write_eigenvalues_csv(&gap.eigenvalues, &path)?;
                record_output(&mut manifest, "eigenvalues", &path);
                let svg = args.out_dir.join("eigenvalues_x.svg");
                io::plot_eigvals(&gap.eigenvalues, gap.khat, &svg)?;
                record_output(&mut manifest, "eigenvalues_plot", &svg);
            }
            let (emb, trace) = if cfg.mode == Mode::Full {
                optimizer::optimize_full(&prep, &cfg)?
            } else {
                manifest.results.insert(
                    "batch_size".into(),
                    json!(cfg.batch_size.unwrap_or_else(|| default_batch_size(n))),
                );
                optimizer::optimize_minibatch(&prep, &cfg)?
            };
            (emb.y, trace)
        }
        Mode::Landmark => {
            let s = ec.landmarks.unwrap_or(DEFAULT_LANDMARKS.min(n));
            let fit = FitOptions {
                seed: cfg.seed,
                ..FitOptions::default()
            };
            let out = scale::run_landmark(&ds.data, &cfg, s, &fit)?;
            manifest.results.insert("landmarks".into(), json!(s));
            manifest
                .results
                .insert("regressor_mse".into(), json!(out.model.final_loss));
            let model_path = args.out_dir.join("regressor.bin");
            out.model.save(&model_path)?;
            record_output(&mut manifest, "regressor", &model_path);
            let idx_path = args.out_dir.join("landmarks.txt");
            let idx: String = out.landmarks.indices.iter().map(|i| format!("{i}\n")).collect();
            std::fs::write(&idx_path, idx).map_err(|e| io_err(&idx_path, e))?;
            record_output(&mut manifest, "landmark_indices", &idx_path);
            (out.embedding, out.trace)
        }
    };
    manifest.timing_ms.insert("optimize".into(), ms_since(t_opt));
    if let Some(last) = trace.records.last() {
        manifest.results.insert("iterations".into(), json!(trace.len()));
        manifest.results.insert("kl".into(), json!(last.kl));
        manifest.results.insert("reg".into(), json!(last.reg));
        manifest.results.insert("total".into(), json!(last.total));
    }

    let labels = ds.labels.as_deref();
    let csv = io::embedding_csv(y.view(), labels)?;
    let emb_path = args.out_dir.join("embedding.csv");
    std::fs::write(&emb_path, &csv).map_err(|e| io_err(&emb_path, e))?;
    record_output(&mut manifest, "embedding", &emb_path);
    manifest
        .results
        .insert("embedding_sha256".into(), json!(io::sha256_hex(csv.as_bytes())));
    if y.ncols() == 2 {
        let svg = args.out_dir.join("embedding.svg");
        io::plot_scatter(y.view(), labels, &svg)?;
        record_output(&mut manifest, "embedding_plot", &svg);
    }
    if args.trace {
        let path = args.out_dir.join("trace.csv");
        trace.write_csv(&path)?;
        record_output(&mut manifest, "trace", &path);
    }

    let t_eval = Instant::now();
    manifest.metrics = maybe_metrics(y.view(), labels, cfg.seed)?;
    manifest.timing_ms.insert("evaluate".into(), ms_since(t_eval));
    manifest.timing_ms.insert("total".into(), ms_since(start));
    let mpath = args.out_dir.join("manifest.json");
    record_output(&mut manifest, "manifest", &mpath);
    manifest.write(&mpath)?;
    println!("{}", emb_path.display());
    Ok(())
}

fn cmd_estimate(args: &EstimateArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let ds = load_input(&args.input)?;
    let n = ds.data.nrows();
    if n < 3 {
        return Err(config_err(format!(
            "eigengap estimation needs at least 3 points, got {n}"
        )));
    }
    let scan = args.scan.unwrap_or_else(|| spectral::default_scan_limit(n));
    let opts = AffinityOptions {
        perplexity: args.perplexity,
        standardize: args.standardize,
        ..AffinityOptions::default()
    };
    let p = joint_affinities(&ds.data, &opts)?;
    let l = build_laplacian(p.view(), LaplacianOptions::default())?;
    let report = spectral::estimate_khat(&l, scan)?;

    create_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("estimate-k", argv);
    manifest.config = json!({
        "perplexity": args.perplexity,
        "standardize": args.standardize,
        "scan": scan,
    });
    manifest.dataset = Some(DatasetFingerprint::of(&ds));
    manifest.results.insert("k_hat".into(), json!(report.khat));
    manifest.results.insert("gap".into(), json!(report.gap(report.khat)));
    let csv = args.out_dir.join("eigenvalues_x.csv");
    spectral::write_eigenvalues_csv(&report.eigenvalues, &csv)?;
    record_output(&mut manifest, "eigenvalues", &csv);
    let svg = args.out_dir.join("eigenvalues_x.svg");
    io::plot_eigvals(&report.eigenvalues, report.khat, &svg)?;
    record_output(&mut manifest, "eigenvalues_plot", &svg);
    manifest.timing_ms.insert("total".into(), ms_since(start));
    let mpath = args.out_dir.join("manifest.json");
    record_output(&mut manifest, "manifest", &mpath);
    manifest.write(&mpath)?;
    println!("{}", report.khat);
    Ok(())
}

fn cmd_evaluate(args: &EvaluateArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    let ds = io::load_csv(&args.embedding, true, Some(&args.labels_col))?;
    let labels = ds.labels.as_deref().expect("label column requested");
    let kmeans_k = args.kmeans_k.unwrap_or_else(|| class_count(labels));
    let n = ds.data.nrows();
    if let Some(&k) = args.knn.iter().find(|&&k| k == 0 || k >= n) {
        return Err(config_err(format!("k-NN neighbour count {k} must lie in [1, {})", n)));
    }
    let report = metrics::evaluate(ds.data.view(), labels, &args.knn, kmeans_k, args.seed)?;

    create_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("evaluate", argv);
    manifest.config = json!({ "knn": args.knn, "kmeans_k": kmeans_k, "seed": args.seed });
    manifest.dataset = Some(DatasetFingerprint::of(&ds));
    println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    manifest.metrics = Some(report);
    manifest.timing_ms.insert("total".into(), ms_since(start));
    let mpath = args.out_dir.join("manifest.json");
    record_output(&mut manifest, "manifest", &mpath);
    manifest.write(&mpath)?;
    Ok(())
}

fn cmd_plot(args: &PlotArgs, argv: Vec<String>) -> Result<()> {
    let start = Instant::now();
    create_dir(&args.out_dir)?;
    let mut manifest = RunManifest::new("plot", argv);
    if let Some(path) = &args.embedding {
        let ds = io::load_csv(path, true, args.labels_col.as_ref())?;
        let svg = args.out_dir.join("embedding.svg");
        io::plot_scatter(ds.data.view(), ds.labels.as_deref(), &svg)?;
        manifest.dataset = Some(DatasetFingerprint::of(&ds));
        record_output(&mut manifest, "embedding_plot", &svg);
    } else if let Some(path) = &args.eigenvalues {
        let values = io::load_eigenvalues(path)?;
        let khat = match args.khat {
            Some(k) => k,
            None => spectral::EigengapReport::from_eigenvalues(&values)?.khat,
        };
        let svg = args.out_dir.join("eigenvalues.svg");
        io::plot_eigvals(&values, khat, &svg)?;
        manifest.config = json!({ "khat": khat });
        record_output(&mut manifest, "eigenvalues_plot", &svg);
    }
    manifest.timing_ms.insert("total".into(), ms_since(start));
    let mpath = args.out_dir.join("manifest.json");
    record_output(&mut manifest, "manifest", &mpath);
    manifest.write(&mpath)
}

/// Cap the rayon pool from `LAPTSNE_THREADS` when set.
fn init_threads() -> Result<()> {
    let Ok(text) = std::env::var("LAPTSNE_THREADS") else {
        return Ok(());
    };
    let threads: usize = text
        .trim()
        .parse()
        .ok()
        .filter(|&t| t > 0)
        .ok_or_else(|| config_err(format!("LAPTSNE_THREADS must be a positive integer, got {text:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| config_err(format!("cannot size thread pool: {e}")))
}

fn run(cli: &Cli, argv: Vec<String>) -> Result<()> {
    init_threads()?;
    match &cli.command {
        Command::Embed(a) => cmd_embed(a, argv),
        Command::EstimateK(a) => cmd_estimate(a, argv),
        Command::Evaluate(a) => cmd_evaluate(a, argv),
        Command::Plot(a) => cmd_plot(a, argv),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    match run(&cli, argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
