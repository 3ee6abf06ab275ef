//! `cliqueloc` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 bad input data, 3 no pose found.
//! `CLIQUELOC_THREADS` overrides the worker thread count.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use cliqueloc::harness::{
    self, ablation_to_csv, benchmark_scalability, csv_to_table, evaluate_matching, evaluate_pose,
    ground_truth_by_id, localization_json, rows_to_csv, AblationGrid, CandidateSource, DuplicateCluster,
    SUCCESS_THRESHOLD,
};
use cliqueloc::io::{read_embeddings, read_map, read_observation, write_embeddings, write_map, write_observation};
use cliqueloc::pipeline::{sub_seed, DEFAULT_TOP_N};
use cliqueloc::{
    generate_scene, localize, Error, Extractor, MatchingConfig, MatchingStrategy, PipelineConfig, SceneSpec,
    WalkMode, WeightMode,
};

const THREADS_ENV: &str = "CLIQUELOC_THREADS";

#[derive(Parser)]
#[command(name = "cliqueloc", version, about = "Object-map global localization via maximal cliques")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic map, observation and embedding files.
    Synth(SynthArgs),
    /// Localize an observation file against a map file.
    Localize(LocalizeArgs),
    /// Run an ablation grid over synthetic scenes.
    Ablate(AblateArgs),
    /// Time localization against maps of growing size.
    Bench(BenchArgs),
}

#[derive(Args, Clone)]
struct PipelineArgs {
    #[arg(long, default_value = "adaptive", value_parser = parse_strategy)]
    matching: MatchingStrategy,
    /// Candidates per observation for kNN matching.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Candidate pool for adaptive matching (default: max(2, ceil(N_map / 4))).
    #[arg(long)]
    top_m: Option<usize>,
    #[arg(long, default_value_t = 0.8)]
    d_adj: f64,
    #[arg(long, default_value_t = 0.3)]
    d_comp: f64,
    /// Weight of embedding similarity; 0 uses semantic histograms only.
    #[arg(long, default_value_t = 0.7)]
    alpha: f64,
    /// Walk length of semantic histograms.
    #[arg(long, default_value_t = 3)]
    steps: usize,
    /// Count only simple paths in semantic histograms.
    #[arg(long)]
    simple_paths: bool,
    #[arg(long, default_value_t = DEFAULT_TOP_N)]
    top_n: usize,
    #[arg(long, default_value_t = 10_000)]
    max_cliques: usize,
    #[arg(long, default_value = "clique", value_parser = parse_extractor)]
    extractor: Extractor,
    #[arg(long, default_value = "both", value_parser = parse_weights)]
    weights: WeightMode,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl PipelineArgs {
    fn config(&self) -> Result<PipelineConfig, Error> {
        for (name, v) in [("d-adj", self.d_adj), ("d-comp", self.d_comp)] {
            if v.is_nan() || v <= 0.0 {
                return Err(Error::InvalidConfig(format!("--{name} must be positive")));
            }
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::InvalidConfig("--alpha must lie in [0, 1]".into()));
        }
        let mut cfg = PipelineConfig {
            d_adj: self.d_adj,
            d_comp: self.d_comp,
            alpha: self.alpha,
            steps: self.steps,
            walk_mode: if self.simple_paths { WalkMode::SimplePaths } else { WalkMode::Walks },
            matching: MatchingConfig {
                strategy: self.matching,
                k: self.k,
                top_m: self.top_m,
            },
            extractor: self.extractor,
            top_n: self.top_n,
            max_cliques: self.max_cliques,
            weights: self.weights,
            seed: self.seed,
            ..PipelineConfig::default()
        };
        cfg.sac.inlier_threshold = self.d_comp;
        Ok(cfg)
    }
}

#[derive(Args, Clone)]
struct SceneArgs {
    #[arg(long, default_value_t = 30)]
    landmarks: usize,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long, default_value_t = 64)]
    embedding_dim: usize,
    /// Standard deviation of observed centres, meters.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    #[arg(long, default_value_t = 0.0)]
    corruption: f64,
    #[arg(long, default_value_t = 0.0)]
    dropout: f64,
    #[arg(long, default_value_t = 0.0)]
    partial: f64,
    /// Copy a cluster of this many landmarks 10 m away and observe only it.
    #[arg(long)]
    duplicate: Option<usize>,
}

impl SceneArgs {
    fn spec(&self, seed: u64) -> SceneSpec {
        SceneSpec {
            n_landmarks: self.landmarks,
            n_classes: self.classes,
            embedding_dim: self.embedding_dim,
            position_noise_sigma: self.noise,
            label_corruption_rate: self.corruption,
            dropout_rate: self.dropout,
            partial_observation_rate: self.partial,
            duplicate_cluster: self.duplicate.map(|size| DuplicateCluster {
                size,
                offset: [10.0, 0.0, 0.0],
            }),
            rng_seed: seed,
            ..SceneSpec::default()
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Number of scenes; each goes to its own `scene_<i>` directory when > 1.
    #[arg(long, default_value_t = 1)]
    scenes: usize,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LocalizeArgs {
    #[arg(long)]
    map: PathBuf,
    #[arg(long)]
    obs: PathBuf,
    /// Embedding header (`.json`, with the `.bin` payload next to it).
    #[arg(long)]
    embeddings: Option<PathBuf>,
    #[command(flatten)]
    pipeline: PipelineArgs,
    /// Write the result JSON here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Write every ranked clique hypothesis as JSON.
    #[arg(long)]
    dump_hypotheses: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    scene: SceneArgs,
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, default_value_t = 50)]
    scenes: usize,
    /// Comma-separated alphas, or `sweep` for 0.0, 0.1, …, 1.0.
    #[arg(long, default_value = "0,1,0.7")]
    alphas: String,
    #[arg(long, value_delimiter = ',', default_value = "clique", value_parser = parse_extractor)]
    extractors: Vec<Extractor>,
    #[arg(long = "weight-modes", value_delimiter = ',', default_value = "both", value_parser = parse_weights)]
    weight_modes: Vec<WeightMode>,
    #[arg(long = "matchings", value_delimiter = ',', default_value = "adaptive", value_parser = parse_strategy)]
    matchings: Vec<MatchingStrategy>,
    /// Replace descriptor matching by ground truth plus this share of random wrong pairs.
    #[arg(long)]
    outliers: Option<f64>,
    /// CSV output path; the aligned table always goes to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    pipeline: PipelineArgs,
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,300,400")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 5)]
    repeats: usize,
    /// Landmarks in the base scene that is tiled up to each size.
    #[arg(long, default_value_t = 50)]
    base_landmarks: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn parse_strategy(s: &str) -> Result<MatchingStrategy, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_extractor(s: &str) -> Result<Extractor, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_weights(s: &str) -> Result<WeightMode, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_alphas(s: &str) -> Result<Vec<f64>, Error> {
    if s == "sweep" {
        return Ok(AblationGrid::alpha_sweep());
    }
    s.split(',')
        .map(|a| {
            a.trim()
                .parse::<f64>()
                .ok()
                .filter(|v| (0.0..=1.0).contains(v))
                .ok_or_else(|| Error::InvalidConfig(format!("bad alpha {a:?}")))
        })
        .collect()
}

fn write_or_print(path: Option<&Path>, text: &str) -> Result<(), Error> {
    match path {
        Some(p) => fs::write(p, text).map_err(|e| Error::Io {
            path: p.display().to_string(),
            message: e.to_string(),
        }),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run_synth(args: &SynthArgs) -> Result<(), Error> {
    for i in 0..args.scenes {
        let seed = if args.scenes == 1 { args.seed } else { sub_seed(args.seed, &format!("scene/{i}")) };
        let scene = generate_scene(&args.scene.spec(seed))?;
        let dir = if args.scenes == 1 { args.out.clone() } else { args.out.join(format!("scene_{i}")) };
        fs::create_dir_all(&dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            message: e.to_string(),
        })?;
        write_map(&dir.join("map.json"), &scene.map)?;
        write_observation(&dir.join("obs.json"), &scene.observation, &format!("view_{i}"))?;
        write_embeddings(&dir.join("embeds.json"), &scene.embeddings)?;
        log::info!("wrote scene {i} to {}", dir.display());
    }
    Ok(())
}

fn run_localize(args: &LocalizeArgs) -> Result<(), Error> {
    let cfg = args.pipeline.config()?;
    let map = read_map(&args.map)?;
    let obs = read_observation(&args.obs)?;
    let embeddings = args.embeddings.as_deref().map(read_embeddings).transpose()?;
    if embeddings.is_none() && cfg.alpha > 0.0 {
        log::warn!("no embeddings given; the embedding term is zero for every pair");
    }
    let loc = localize(&map, &obs, embeddings.as_ref(), &cfg)?;

    let mut out: serde_json::Value = serde_json::from_str(&localization_json(&loc)).expect("valid json");
    if let Some(gt_pose) = &obs.source_pose_gt {
        let gt = ground_truth_by_id(&map, &obs);
        let matching = evaluate_matching(&loc.best().correspondences, &gt);
        let pose = evaluate_pose(&loc.estimates, gt_pose, SUCCESS_THRESHOLD)?;
        out["evaluation"] = serde_json::json!({
            "precision": matching.precision,
            "recall": matching.recall,
            "translation_error": pose.translation_error,
            "rotation_error": pose.rotation_error,
            "success_at_1": pose.success_at(1),
            "success_at_3": pose.success_at(3),
            "success_at_5": pose.success_at(5),
        });
    }
    if let Some(path) = &args.dump_hypotheses {
        let text = serde_json::to_string_pretty(&loc.hypotheses).expect("serializable");
        write_or_print(Some(path), &text)?;
    }
    let text = serde_json::to_string_pretty(&out).expect("serializable") + "\n";
    write_or_print(args.out.as_deref(), &text)
}

fn run_ablate(args: &AblateArgs) -> Result<(), Error> {
    let base_config = args.pipeline.config()?;
    let source = match args.outliers {
        Some(rate) => CandidateSource::Injected { outlier_rate: rate },
        None => CandidateSource::Matching,
    };
    let grid = AblationGrid {
        suites: vec![("synthetic".into(), args.scene.spec(0))],
        scenes_per_suite: args.scenes,
        base_seed: args.pipeline.seed,
        alphas: parse_alphas(&args.alphas)?,
        extractors: args.extractors.clone(),
        weights: args.weight_modes.clone(),
        matchings: args.matchings.clone(),
        source,
        stochastic_runs: 3,
        base_config,
    };
    let rows = harness::run_ablation(&grid)?;
    let csv = ablation_to_csv(&rows)?;
    print!("{}", csv_to_table(&csv));
    if let Some(path) = &args.out {
        write_or_print(Some(path), &csv)?;
    }
    Ok(())
}

fn run_bench(args: &BenchArgs) -> Result<(), Error> {
    let cfg = args.pipeline.config()?;
    let spec = SceneSpec {
        n_landmarks: args.base_landmarks,
        rng_seed: args.pipeline.seed,
        ..SceneSpec::default()
    };
    let report = benchmark_scalability(&spec, &args.sizes, args.repeats, &cfg)?;
    let csv = rows_to_csv(&report.rows)?;
    print!("{}", csv_to_table(&csv));
    println!("R² linear {:.4}, quadratic {:.4}", report.r2_linear, report.r2_quadratic);
    if let Some(path) = &args.out {
        write_or_print(Some(path), &csv)?;
    }
    Ok(())
}

fn configure_threads() -> Result<(), Error> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let threads: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Error::InvalidConfig(format!("{THREADS_ENV} must be a positive integer, got {value:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build_global()
        .map_err(|e| Error::InvalidConfig(e.to_string()))
}

fn exit_code(err: &Error) -> ExitCode {
    if err.is_data_error() {
        ExitCode::from(2)
    } else {
        ExitCode::from(3)
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = configure_threads().and_then(|()| match &cli.command {
        Command::Synth(a) => run_synth(a),
        Command::Localize(a) => run_localize(a),
        Command::Ablate(a) => run_ablate(a),
        Command::Bench(a) => run_bench(a),
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}
