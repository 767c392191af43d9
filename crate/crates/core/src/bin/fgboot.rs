use std::net::{Ipv4Addr, SocketAddr};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use fgboot::bootstrap::{self, BootstrapState, BootstrapStore, Labeler, OracleLabeler};
use fgboot::data::{self, SyntheticSpec};
use fgboot::embednet::Sample;
use fgboot::labelsvc::{HumanLabeler, LabelService, DEFAULT_PORT};
use fgboot::trainer::{self, TrainConfig, TrainedModel};

#[derive(Parser)]
#[command(name = "fgboot", version, about = "Triplet metric learning with anchor soft voting and dataset bootstrapping")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-modal dataset (train, test, candidates, distractors).
    GenData(GenDataArgs),
    /// Train an embedding model and write a checkpoint.
    Train(TrainArgs),
    /// Mean per-class accuracy of a checkpoint on a labeled file.
    Eval(EvalArgs),
    /// Per-sample confidence vectors as CSV.
    Score(ScoreArgs),
    /// Run bootstrap rounds over a candidate pool.
    Bootstrap(BootstrapArgs),
    /// PCA projection of embeddings to 2-D, written as id,x,y.
    #[command(name = "export-2d")]
    Export2d(ExportArgs),
    /// Resume a bootstrap state directory with human labelers over HTTP.
    Serve(ServeArgs),
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 8)]
    categories: usize,
    #[arg(long, default_value_t = 3)]
    modes: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long, default_value_t = 20)]
    train_per_mode: usize,
    #[arg(long, default_value_t = 20)]
    test_per_mode: usize,
    #[arg(long, default_value_t = 20)]
    candidates_per_mode: usize,
    #[arg(long, default_value_t = 0.25)]
    spread: f64,
    #[arg(long, default_value_t = 4.0)]
    inter_mode_distance: f64,
    #[arg(long, default_value_t = 0.3)]
    overlap: f64,
    #[arg(long, default_value_t = 0.3)]
    distractor_fraction: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Training flags. Unset flags fall back to `--config`, then to the defaults.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// key=value file; flags given on the command line win.
    #[arg(long)]
    config: Option<PathBuf>,
    /// softmax | triplet-naive | triplet-hn | triplet-m | triplet-a [default: triplet-a]
    #[arg(long)]
    variant: Option<String>,
    /// Triplet margin [default: 0.2]
    #[arg(long)]
    margin: Option<f64>,
    /// Soft-vote sharpness [default: 5]
    #[arg(long)]
    gamma: Option<f64>,
    /// Triplet weight in the joint loss [default: 0.1]
    #[arg(long)]
    omega: Option<f64>,
    /// Anchors per category [default: 3]
    #[arg(long)]
    k: Option<usize>,
    /// Local positive fraction [default: 0.6]
    #[arg(long)]
    rho: Option<f64>,
    /// Embedding dimension [default: 64]
    #[arg(long)]
    embed_dim: Option<usize>,
    /// Comma-separated hidden layer widths [default: 64]
    #[arg(long)]
    hidden: Option<String>,
    /// Triplets per batch [default: 50]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Iterations between embedding refreshes [default: 1000]
    #[arg(long)]
    refresh_period: Option<usize>,
    /// [default: 10000]
    #[arg(long)]
    max_iterations: Option<usize>,
    /// [default: 0.05]
    #[arg(long)]
    learning_rate: Option<f64>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Bootstrap filter threshold [default: 0.5]
    #[arg(long)]
    confidence_threshold: Option<f64>,
    /// per-category | global [default: per-category]
    #[arg(long)]
    hard_negative_scope: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            cfg.apply_config_text(&text).with_context(|| format!("in {}", path.display()))?;
        }
        let pairs: [(&str, Option<String>); 15] = [
            ("variant", self.variant.clone()),
            ("margin", self.margin.map(|v| v.to_string())),
            ("gamma", self.gamma.map(|v| v.to_string())),
            ("omega", self.omega.map(|v| v.to_string())),
            ("k", self.k.map(|v| v.to_string())),
            ("rho", self.rho.map(|v| v.to_string())),
            ("embed_dim", self.embed_dim.map(|v| v.to_string())),
            ("hidden", self.hidden.clone()),
            ("batch_size", self.batch_size.map(|v| v.to_string())),
            ("refresh_period", self.refresh_period.map(|v| v.to_string())),
            ("max_iterations", self.max_iterations.map(|v| v.to_string())),
            ("learning_rate", self.learning_rate.map(|v| v.to_string())),
            ("seed", self.seed.map(|v| v.to_string())),
            ("confidence_threshold", self.confidence_threshold.map(|v| v.to_string())),
            ("hard_negative_scope", self.hard_negative_scope.clone()),
        ];
        for (k, v) in pairs {
            if let Some(v) = v {
                cfg.set(k, &v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    /// Hard-negative pool file (label column = rejected-for category).
    #[arg(long)]
    hard_pool: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Where to write the per-iteration training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    test: PathBuf,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Output CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum LabelerKind {
    Oracle,
    Human,
}

#[derive(Args)]
struct ServiceArgs {
    #[arg(long, env = "FGBOOT_PORT", default_value_t = DEFAULT_PORT)]
    port: u16,
    /// Directory with the built labeling UI, served at `/`.
    #[arg(long = "static")]
    static_dir: Option<PathBuf>,
    /// Task lease window in seconds.
    #[arg(long, default_value_t = 600)]
    lease_secs: u64,
}

#[derive(Args)]
struct BootstrapArgs {
    /// State directory; created on first use.
    #[arg(long)]
    state: PathBuf,
    /// Seed dataset S0 (required unless resuming).
    #[arg(long)]
    data: Option<PathBuf>,
    /// Candidate pool. With the oracle labeler the label column is the hidden truth.
    #[arg(long)]
    candidates: Option<PathBuf>,
    /// Extra unlabeled candidates that belong to no category.
    #[arg(long)]
    distractors: Option<PathBuf>,
    /// Held-out set evaluated after every round.
    #[arg(long)]
    test: Option<PathBuf>,
    #[arg(long, default_value_t = 1)]
    rounds: usize,
    #[arg(long, value_enum, default_value_t = LabelerKind::Oracle)]
    labeler: LabelerKind,
    /// Oracle flip probability.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Continue an existing state directory.
    #[arg(long)]
    resume: bool,
    #[command(flatten)]
    service: ServiceArgs,
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long)]
    state: PathBuf,
    #[arg(long)]
    test: Option<PathBuf>,
    #[command(flatten)]
    service: ServiceArgs,
}

fn config_hash(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(cfg.canonical().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

fn print_stanza(cfg: &TrainConfig) {
    println!("# fgboot {}", env!("CARGO_PKG_VERSION"));
    println!("# seed {}", cfg.seed);
    println!("# config_sha256 {}", config_hash(cfg));
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        n_categories: a.categories,
        modes_per_category: a.modes,
        input_dim: a.dim,
        samples_per_mode: a.train_per_mode,
        test_per_mode: a.test_per_mode,
        candidates_per_mode: a.candidates_per_mode,
        mode_spread: a.spread,
        inter_mode_distance: a.inter_mode_distance,
        overlap: a.overlap,
        distractor_fraction: a.distractor_fraction,
        seed: a.seed,
        ..SyntheticSpec::default()
    };
    let d = data::generate_synthetic(&spec)?;
    std::fs::create_dir_all(&a.out)?;
    for (name, ds) in [("train", &d.train), ("test", &d.test), ("candidates", &d.candidates), ("distractors", &d.distractors)] {
        data::save_dataset(ds, &a.out.join(format!("{name}.txt")))?;
    }
    println!("# fgboot {}", env!("CARGO_PKG_VERSION"));
    println!("# seed {}", a.seed);
    println!(
        "wrote {} train, {} test, {} candidates, {} distractors to {}",
        d.train.len(),
        d.test.len(),
        d.candidates.len(),
        d.distractors.len(),
        a.out.display()
    );
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let cfg = a.cfg.resolve()?;
    print_stanza(&cfg);
    let ds = data::load_dataset(&a.data)?;
    let pool = match &a.hard_pool {
        Some(p) => data::load_hard_pool(p)?,
        None => Vec::new(),
    };
    let model = trainer::train(&ds, &pool, &cfg)?;
    data::save_checkpoint(&model, &a.out)?;
    if let Some(log) = &a.log {
        data::write_atomic(log, model.log.to_text().as_bytes())?;
    }
    if let Some(e) = model.log.early_stop {
        println!("early stop at iteration {e}: no violating triplets");
    }
    println!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = data::load_checkpoint(&a.model)?;
    print_stanza(&model.config);
    let test = data::load_dataset(&a.test)?;
    let e = model.evaluate(&test.samples)?;
    println!("mean_accuracy {:.4}", e.mean_accuracy);
    for (c, acc) in e.per_class.iter().enumerate() {
        if let Some(acc) = acc {
            println!("class {c} {:.4}", acc);
        }
    }
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let model = data::load_checkpoint(&a.model)?;
    let ds = data::load_dataset(&a.data)?;
    let mut out = String::from("id,predicted,confidence");
    for c in 0..model.n_categories {
        out.push_str(&format!(",p{c}"));
    }
    out.push('\n');
    for s in &ds.samples {
        let p = model.score(&s.features)?;
        let top = p.argmax();
        out.push_str(&format!("{},{},{:?}", s.id, top, p.0[top]));
        for v in &p.0 {
            out.push_str(&format!(",{v:?}"));
        }
        out.push('\n');
    }
    match &a.out {
        Some(path) => data::write_atomic(path, out.as_bytes())?,
        None => print!("{out}"),
    }
    Ok(())
}

fn export_2d(a: ExportArgs) -> Result<()> {
    let model = data::load_checkpoint(&a.model)?;
    let ds = data::load_dataset(&a.data)?;
    let emb = model.embed_all(&ds.samples)?;
    let coords = data::project_2d(&emb)?;
    let ids: Vec<String> = ds.samples.iter().map(|s| s.id.clone()).collect();
    data::write_atomic(&a.out, data::format_projection(&ids, &coords).as_bytes())?;
    println!("wrote {} points to {}", ids.len(), a.out.display());
    Ok(())
}

fn start_service(svc: &LabelService, args: &ServiceArgs) -> Result<tokio::runtime::Runtime> {
    let rt = tokio::runtime::Runtime::new()?;
    let addr = SocketAddr::from((Ipv4Addr::UNSPECIFIED, args.port));
    let listener = rt.block_on(tokio::net::TcpListener::bind(addr)).with_context(|| format!("binding {addr}"))?;
    let router = svc.router(args.static_dir.clone());
    println!("labeling service on http://{}", listener.local_addr()?);
    rt.spawn(async move {
        if let Err(e) = axum::serve(listener, router).await {
            tracing::error!(error = %e, "labeling service stopped");
        }
    });
    Ok(rt)
}

fn load_test(path: Option<&Path>) -> Result<Option<Vec<Sample>>> {
    Ok(match path {
        Some(p) => Some(data::load_dataset(p)?.samples),
        None => None,
    })
}

fn drive(
    state: BootstrapState,
    store: &BootstrapStore,
    labeler: &mut dyn Labeler,
    log: &bootstrap::SharedDecisionLog,
    test: Option<&[Sample]>,
) -> Result<TrainedModel> {
    print_stanza(&state.config);
    let outcome = bootstrap::run_bootstrap(state, labeler, log, test, Some(store))?;
    for r in &outcome.state.records {
        let acc = r.test_accuracy.map(|a| format!(" test_accuracy {a:.4}")).unwrap_or_default();
        println!(
            "round {} filtered {} tp {} fp {}{acc}",
            r.round,
            r.filtered.len(),
            r.true_positives.len(),
            r.false_positives.len()
        );
    }
    println!("dataset {} samples, hard pool {}", outcome.state.dataset.len(), outcome.state.hard_pool.len());
    if let Some(a) = outcome.final_accuracy {
        println!("final mean_accuracy {a:.4}");
    }
    Ok(outcome.model)
}

fn run_bootstrap(a: BootstrapArgs) -> Result<()> {
    let store = BootstrapStore::new(&a.state);
    let state = if a.resume {
        if !store.exists() {
            bail!("no bootstrap state in {}", a.state.display());
        }
        store.load()?
    } else {
        if store.exists() {
            bail!("{} already holds a bootstrap state; pass --resume", a.state.display());
        }
        let s0 = data::load_dataset(a.data.as_deref().context("--data is required for a new bootstrap")?)?;
        let candidates = data::load_dataset(a.candidates.as_deref().context("--candidates is required")?)?;
        let mut pool = candidates.samples;
        if let Some(d) = &a.distractors {
            pool.extend(data::load_dataset(d)?.samples);
        }
        let state = BootstrapState::new(s0, &pool, a.rounds, a.cfg.resolve()?)?;
        store.init(&state)?;
        state
    };
    let test = load_test(a.test.as_deref())?;
    let log = store.open_log()?;
    match a.labeler {
        LabelerKind::Oracle => {
            let candidates = data::load_dataset(a.candidates.as_deref().context("the oracle needs --candidates")?)?;
            let distractors = match &a.distractors {
                Some(d) => data::load_dataset(d)?.samples,
                None => Vec::new(),
            };
            let mut oracle = OracleLabeler::from_pools(&candidates.samples, &distractors, a.noise, state.config.seed)?;
            drive(state, &store, &mut oracle, &log, test.as_deref())?;
        }
        LabelerKind::Human => {
            let svc = LabelService::new(log.clone(), std::time::Duration::from_secs(a.service.lease_secs));
            let _rt = start_service(&svc, &a.service)?;
            drive(state, &store, &mut HumanLabeler::new(svc), &log, test.as_deref())?;
        }
    }
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let store = BootstrapStore::new(&a.state);
    let state = store.load().with_context(|| format!("loading bootstrap state from {}", a.state.display()))?;
    let test = load_test(a.test.as_deref())?;
    let log = store.open_log()?;
    let svc = LabelService::new(log.clone(), std::time::Duration::from_secs(a.service.lease_secs));
    let _rt = start_service(&svc, &a.service)?;
    if state.is_complete() {
        println!("all rounds complete; nothing to label");
        return Ok(());
    }
    drive(state, &store, &mut HumanLabeler::new(svc), &log, test.as_deref())?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::from_env("FGBOOT_LOG"))
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Score(a) => score(a),
        Command::Bootstrap(a) => run_bootstrap(a),
        Command::Export2d(a) => export_2d(a),
        Command::Serve(a) => serve(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
