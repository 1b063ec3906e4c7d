use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use mrfmap::bench::{self, ExperimentConfig, RunOptions};
use mrfmap::forward::{self, GenerateConfig, MaskConvention, Model};
use mrfmap::infer::{self, InferenceOptions, MaskEstimate, XUpdate};
use mrfmap::lattice::text;
use mrfmap::preproc::{self, SubjectMapOptions};
use mrfmap::{Error, LabelMap, LatticeDims, ModelParams};

#[derive(Parser)]
#[command(name = "mrfmap", version, about = "Group label-map estimation from subject maps")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a dataset and write it to a directory.
    Generate(GenerateArgs),
    /// Estimate the group map from subject maps.
    Infer(InferArgs),
    /// Run the benchmark grid from a JSON config.
    Grid(GridArgs),
    /// Turn a component directory into subject label maps.
    Preproc(PreprocArgs),
    /// Misclassification rate between two label maps.
    Eval(EvalArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ModelArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
}

impl From<ModelArg> for Model {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::One => Model::ModelI,
            ModelArg::Two => Model::ModelII,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ConventionArg {
    PropagateOnZero,
    PropagateOnOne,
}

#[derive(Args)]
struct GenerateArgs {
    #[arg(short = 'm', long = "subjects")]
    m: usize,
    #[arg(short = 'k', long = "labels")]
    k: usize,
    /// Lattice size as ROWSxCOLS or a single side.
    #[arg(long, default_value = "64x64")]
    dims: LatticeDims,
    #[arg(long, value_enum, default_value = "2")]
    model: ModelArg,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 100)]
    sweeps: usize,
    /// Model II noise level; omit to keep the default.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Draw the noise level from its Beta(1, 10) prior instead.
    #[arg(long, conflicts_with = "epsilon")]
    sample_epsilon: bool,
    #[arg(long, value_enum, default_value = "propagate-on-zero")]
    mask_convention: ConventionArg,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Algo {
    Icm,
    Vb,
}

#[derive(Clone, Copy, ValueEnum)]
enum InitArg {
    Random,
    Greedy,
    File,
}

#[derive(Clone, Copy, ValueEnum)]
enum XUpdateArg {
    Sequential,
    Simultaneous,
}

#[derive(Args)]
struct InferArgs {
    /// Directory holding Y_0.map, Y_1.map, ...
    #[arg(short, long)]
    data: PathBuf,
    #[arg(long, value_enum, default_value = "2")]
    model: ModelArg,
    #[arg(long, value_enum, default_value = "vb")]
    algo: Algo,
    #[arg(long, value_enum, default_value = "random")]
    init: InitArg,
    /// Starting map for `--init file`.
    #[arg(long, required_if_eq("init", "file"))]
    init_file: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long, default_value_t = 1e-6)]
    tol: f64,
    #[arg(long)]
    snapshot_every: Option<usize>,
    #[arg(long)]
    q_prior_coupling: bool,
    #[arg(long, value_enum, default_value = "sequential")]
    x_update: XUpdateArg,
    /// Keep the starting parameters fixed.
    #[arg(long)]
    fixed_theta: bool,
    /// Starting parameters as JSON (pi, epsilon, beta_x, beta_h).
    #[arg(long)]
    theta: Option<PathBuf>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum AlignArg {
    None,
    Hungarian,
}

#[derive(Args)]
struct GridArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's root seed.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    dims: Option<LatticeDims>,
    #[arg(long)]
    repeats: Option<usize>,
    /// Output directory; defaults to the config's, then `results`.
    #[arg(short, long)]
    out: Option<PathBuf>,
    /// Record per-run wall time (makes results.csv machine-dependent).
    #[arg(long)]
    timing: bool,
    #[arg(long, value_enum, default_value = "none")]
    align_labels: AlignArg,
}

#[derive(Args)]
struct PreprocArgs {
    /// Directory of comp_<subject>_<index>.smap / .tc files.
    #[arg(long)]
    components: PathBuf,
    #[arg(long)]
    clusters: usize,
    /// Label count of the output maps (default: clusters + 1).
    #[arg(short = 'k', long = "labels")]
    k: Option<usize>,
    #[arg(long, default_value_t = 0.05)]
    q: f64,
    #[arg(long, default_value_t = preproc::DEFAULT_SIGMA)]
    sigma: f64,
    /// Minimum distinct subjects per kept cluster (default: half the subjects).
    #[arg(long)]
    min_subjects: Option<usize>,
    #[arg(short, long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    estimate: PathBuf,
    truth: PathBuf,
    #[arg(long, value_enum, default_value = "none")]
    align_labels: AlignArg,
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
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 2 } else { 1 })
        }
    }
}

fn run(command: Command) -> mrfmap::Result<()> {
    match command {
        Command::Generate(a) => generate(a),
        Command::Infer(a) => infer_cmd(a),
        Command::Grid(a) => grid(a),
        Command::Preproc(a) => preproc_cmd(a),
        Command::Eval(a) => eval(a),
    }
}

fn generate(a: GenerateArgs) -> mrfmap::Result<()> {
    let mut cfg = GenerateConfig::new(a.m, a.k, a.dims, a.model.into(), a.seed);
    cfg.sweeps = a.sweeps;
    if a.sample_epsilon {
        cfg.epsilon = None;
    } else if let Some(e) = a.epsilon {
        cfg.epsilon = Some(e);
    }
    cfg.convention = match a.mask_convention {
        ConventionArg::PropagateOnZero => MaskConvention::PropagateOnZero,
        ConventionArg::PropagateOnOne => MaskConvention::PropagateOnOne,
    };
    let ds = forward::generate_dataset(&cfg)?;
    forward::save_dataset(&ds, &a.out)
}

fn read_subjects(dir: &Path) -> mrfmap::Result<Vec<LabelMap>> {
    let mut subjects = Vec::new();
    loop {
        let path = dir.join(format!("Y_{}.map", subjects.len()));
        if !path.exists() {
            break;
        }
        subjects.push(text::read_label_map(&path)?);
    }
    if subjects.is_empty() {
        return Err(Error::InvalidArgument(format!("no Y_0.map in {}", dir.display())));
    }
    Ok(subjects)
}

fn create_dir(dir: &Path) -> mrfmap::Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_file(path: &Path, body: String) -> mrfmap::Result<()> {
    fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn infer_cmd(a: InferArgs) -> mrfmap::Result<()> {
    let subjects = read_subjects(&a.data)?;
    let first = &subjects[0];
    let x0 = match a.init {
        InitArg::Random => infer::init_random(first.dims(), first.k(), a.seed)?,
        InitArg::Greedy => infer::init_greedy(&subjects)?,
        InitArg::File => {
            let path = a.init_file.as_deref().expect("clap requires --init-file");
            text::read_label_map(path)?
        }
    };
    let model: Model = a.model.into();
    let base = match a.algo {
        Algo::Icm => InferenceOptions::icm(model),
        Algo::Vb => InferenceOptions::vb(model),
    };
    let initial_params = match &a.theta {
        Some(path) => {
            let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
            let p: ModelParams = serde_json::from_str(&raw)?;
            Some(p)
        }
        None => None,
    };
    let options = InferenceOptions {
        max_iterations: a.max_iter.unwrap_or(base.max_iterations),
        convergence_tol: a.tol,
        estimate_theta: !a.fixed_theta,
        seed: a.seed,
        initial_params,
        q_prior_coupling: a.q_prior_coupling,
        x_update: match a.x_update {
            XUpdateArg::Sequential => XUpdate::Sequential,
            XUpdateArg::Simultaneous => XUpdate::Simultaneous,
        },
        snapshot_every: a.snapshot_every,
        ..base
    };
    let state = match a.algo {
        Algo::Icm => infer::run_icm(&subjects, &x0, &options)?,
        Algo::Vb => infer::run_vb(&subjects, &x0, &options)?,
    };

    create_dir(&a.out)?;
    text::write_label_map(&a.out.join("X_est.map"), &state.x)?;
    match &state.masks {
        MaskEstimate::Variational(q) => {
            for i in 0..q.m() {
                text::write_real_grid(&a.out.join(format!("q_{i}.probmap")), q.subject(i), q.dims())?;
            }
        }
        MaskEstimate::Hard(masks) => {
            for (i, h) in masks.iter().enumerate() {
                text::write_mask(&a.out.join(format!("H_{i}.map")), h)?;
            }
        }
    }
    write_file(
        &a.out.join("theta.json"),
        serde_json::to_string_pretty(&state.params)? + "\n",
    )?;
    let (name, trace) = match a.algo {
        Algo::Vb => ("elbo.csv", &state.elbo_trace),
        Algo::Icm => ("log_posterior.csv", &state.log_posterior_trace),
    };
    let mut body = String::from("iteration,F\n");
    for (i, f) in trace.iter().enumerate() {
        body.push_str(&format!("{},{f:.10}\n", i + 1));
    }
    write_file(&a.out.join(name), body)?;
    if !state.snapshots.is_empty() {
        let dir = a.out.join("trace");
        create_dir(&dir)?;
        for (it, x) in &state.snapshots {
            text::write_label_map(&dir.join(format!("X_iter{it}.map")), x)?;
        }
    }
    Ok(())
}

fn grid(a: GridArgs) -> mrfmap::Result<()> {
    let mut cfg = ExperimentConfig::from_json_file(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.root_seed = seed;
    }
    if let Some(dims) = a.dims {
        cfg.dims = dims;
    }
    if let Some(r) = a.repeats {
        cfg.repeats = r;
    }
    cfg.validate()?;
    let out = a
        .out
        .or_else(|| cfg.output_dir.clone())
        .unwrap_or_else(|| PathBuf::from("results"));
    let opts = RunOptions {
        timing: a.timing,
        align_labels: a.align_labels == AlignArg::Hungarian,
    };
    let rows = bench::run_grid(&cfg, opts)?;
    let summary = bench::write_outputs(&out, &rows)?;
    for s in &summary {
        println!(
            "M={:<3} K={:<3} {:<4} {}  mean {:.4}  median {:.4}",
            s.m, s.k, s.method.to_string(), s.init, s.mean, s.median
        );
    }
    Ok(())
}

fn preproc_cmd(a: PreprocArgs) -> mrfmap::Result<()> {
    let (dims, components) = preproc::read_components(&a.components)?;
    let num_subjects = components.iter().map(|c| c.subject_id).max().map_or(0, |m| m + 1);
    let dist = preproc::combined_distance_matrix(&components, dims, a.sigma)?;
    let assignment = preproc::average_link_cluster(&dist, a.clusters)?;
    let options = SubjectMapOptions {
        dims,
        k: a.k.unwrap_or(a.clusters + 1),
        q: a.q,
        min_subjects: a.min_subjects.unwrap_or(num_subjects.div_ceil(2)),
    };
    let maps = preproc::build_subject_maps(&components, &assignment, num_subjects, &options)?;
    create_dir(&a.out)?;
    for (i, y) in maps.iter().enumerate() {
        text::write_label_map(&a.out.join(format!("Y_{i}.map")), y)?;
    }
    Ok(())
}

fn eval(a: EvalArgs) -> mrfmap::Result<()> {
    let est = text::read_label_map(&a.estimate)?;
    let truth = text::read_label_map(&a.truth)?;
    let est = match a.align_labels {
        AlignArg::None => est,
        AlignArg::Hungarian => bench::align_labels(&est, &truth)?,
    };
    println!("{:.6}", bench::misclassification_rate(&est, &truth)?);
    Ok(())
}
