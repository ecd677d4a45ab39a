use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand, ValueEnum};

use hice::backends::WireClient;
use hice::embeddings::Metric;
use hice::memory::{ExemplarSelection, M2Selection};
use hice::pipeline::{self, RunConfig, Stamps, SWEEP_THRESHOLDS};
use hice::router::ContextOrder;
use hice::synthetic::{build_fixture, write_fixture, FixtureKind};

#[derive(Parser)]
#[command(name = "hice", version, about = "Hierarchical in-context editing and editing-metric harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Load manifests and make sure every feature file covers them.
    Ingest(Common),
    /// Record the unedited model's answers.
    BaselineEval(Common),
    /// Fit the scope classifier (projected and unprojected).
    FitClassifier(Seeded),
    /// Build the exemplar and hard-negative memories.
    BuildMemory(Seeded),
    /// Route and answer every probe of every test edit.
    Evaluate(Evaluate),
    /// Aggregate evidence into report.json and report.md.
    Report(Evaluate),
    /// Evaluate at several thresholds and write a trend table.
    Sweep(Sweep),
    /// Run the five component configurations.
    Ablate(Evaluate),
    /// Write a synthetic benchmark bundle with a ready-to-run config.
    Fixture(FixtureArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; `config.toml` is used when present.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Seeded {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, required = true)]
    seed: u64,
    #[command(flatten)]
    overrides: Overrides,
}

#[derive(Args)]
struct Evaluate {
    #[command(flatten)]
    common: Common,
    /// Swap the classifier's labels before routing.
    #[arg(long)]
    corrupt_classifier: bool,
}

#[derive(Args)]
struct Sweep {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_delimiter = ',', default_values_t = SWEEP_THRESHOLDS.to_vec())]
    thresholds: Vec<f64>,
}

#[derive(Args)]
struct FixtureArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = FixtureChoice::EndToEnd)]
    kind: FixtureChoice,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FixtureChoice {
    EndToEnd,
    Sweep,
}

#[derive(Clone, Copy, ValueEnum)]
enum GateMetric {
    L2,
    Cosine,
}

#[derive(Clone, Copy, ValueEnum)]
enum OrderChoice {
    MostSimilarLast,
    MostSimilarFirst,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectionChoice {
    NearestToCentroid,
    Random,
}

#[derive(Args, Default)]
struct Overrides {
    #[arg(long)]
    train_manifest: Option<PathBuf>,
    #[arg(long)]
    test_manifest: Option<PathBuf>,
    #[arg(long)]
    train_questions: Option<PathBuf>,
    #[arg(long)]
    train_demonstrations: Option<PathBuf>,
    #[arg(long)]
    test_questions: Option<PathBuf>,
    #[arg(long)]
    test_images: Option<PathBuf>,
    #[arg(long)]
    work_dir: Option<PathBuf>,
    #[arg(long)]
    memory_dir: Option<PathBuf>,
    #[arg(long)]
    report_dir: Option<PathBuf>,

    #[arg(long)]
    threshold: Option<f64>,
    #[arg(long)]
    k0: Option<usize>,
    #[arg(long)]
    use_m1: Option<bool>,
    #[arg(long)]
    use_projection: Option<bool>,
    #[arg(long)]
    use_m2: Option<bool>,
    #[arg(long, value_enum)]
    gate_metric: Option<GateMetric>,
    #[arg(long, value_enum)]
    context_order: Option<OrderChoice>,

    #[arg(long)]
    projection_dim: Option<usize>,
    #[arg(long, value_delimiter = ',')]
    lambda_grid: Option<Vec<f64>>,
    #[arg(long)]
    split_fraction: Option<f64>,

    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long, value_enum)]
    exemplar_selection: Option<SelectionChoice>,
    #[arg(long, conflicts_with_all = ["m2_fraction", "m2_margin_cutoff"])]
    m2_budget: Option<usize>,
    #[arg(long, conflicts_with = "m2_margin_cutoff")]
    m2_fraction: Option<f64>,
    #[arg(long)]
    m2_margin_cutoff: Option<f64>,

    /// Scripted backend behavior file.
    #[arg(long, conflicts_with = "url")]
    scripted: Option<PathBuf>,
    /// Inference server base URL.
    #[arg(long)]
    url: Option<String>,
    #[arg(long)]
    concurrency: Option<usize>,
    #[arg(long)]
    timeout_secs: Option<u64>,
    #[arg(long)]
    adapter_url: Option<String>,
}

fn absolute(p: PathBuf) -> PathBuf {
    if p.is_absolute() {
        p
    } else {
        std::env::current_dir().map(|d| d.join(&p)).unwrap_or(p)
    }
}

impl Overrides {
    fn apply(self, cfg: &mut RunConfig) {
        let p = &mut cfg.paths;
        for (slot, value) in [
            (&mut p.train_manifest, self.train_manifest),
            (&mut p.test_manifest, self.test_manifest),
            (&mut p.train_questions, self.train_questions),
            (&mut p.train_demonstrations, self.train_demonstrations),
            (&mut p.test_questions, self.test_questions),
            (&mut p.test_images, self.test_images),
            (&mut p.work_dir, self.work_dir),
            (&mut p.memory_dir, self.memory_dir),
            (&mut p.report_dir, self.report_dir),
        ] {
            if let Some(v) = value {
                *slot = absolute(v);
            }
        }
        let r = &mut cfg.router;
        if let Some(v) = self.threshold {
            r.threshold = v;
        }
        if let Some(v) = self.k0 {
            r.k0 = v;
        }
        if let Some(v) = self.use_m1 {
            r.use_m1 = v;
        }
        if let Some(v) = self.use_projection {
            r.use_projection = v;
        }
        if let Some(v) = self.use_m2 {
            r.use_m2 = v;
        }
        if let Some(v) = self.gate_metric {
            r.gate_metric = match v {
                GateMetric::L2 => Metric::L2,
                GateMetric::Cosine => Metric::Cosine,
            };
        }
        if let Some(v) = self.context_order {
            r.context_order = match v {
                OrderChoice::MostSimilarLast => ContextOrder::MostSimilarLast,
                OrderChoice::MostSimilarFirst => ContextOrder::MostSimilarFirst,
            };
        }
        let c = &mut cfg.classifier;
        if let Some(v) = self.projection_dim {
            c.projection_dim = v;
        }
        if let Some(v) = self.lambda_grid {
            c.lambda_grid = v;
        }
        if let Some(v) = self.split_fraction {
            c.split_fraction = v;
        }
        let s = &mut cfg.sampling;
        if let Some(v) = self.k {
            s.k = v;
        }
        if let Some(v) = self.ratio {
            s.ratio = v;
        }
        if let Some(v) = self.exemplar_selection {
            s.exemplar_selection = match v {
                SelectionChoice::NearestToCentroid => ExemplarSelection::NearestToCentroid,
                SelectionChoice::Random => ExemplarSelection::Random,
            };
        }
        if let Some(v) = self.m2_budget {
            s.m2_selection = M2Selection::Budget(v);
        }
        if let Some(v) = self.m2_fraction {
            s.m2_selection = M2Selection::Fraction(v);
        }
        if let Some(v) = self.m2_margin_cutoff {
            s.m2_selection = M2Selection::MarginCutoff(v);
        }
        let b = &mut cfg.backend;
        if let Some(v) = self.scripted {
            b.scripted = Some(absolute(v));
            b.url = None;
        }
        if let Some(v) = self.url {
            b.url = Some(v);
            b.scripted = None;
        }
        if let Some(v) = self.concurrency {
            b.concurrency = v;
        }
        if let Some(v) = self.timeout_secs {
            b.timeout_secs = v;
        }
        if let Some(v) = self.adapter_url {
            cfg.adapter_url = Some(v);
        }
    }
}

fn load_config(path: Option<PathBuf>, seed: Option<u64>, overrides: Overrides) -> hice::Result<RunConfig> {
    let default_path = Path::new("config.toml");
    let mut cfg = match path {
        Some(p) => RunConfig::load(&p)?,
        None if default_path.exists() => RunConfig::load(default_path)?,
        None => RunConfig {
            root: std::env::current_dir().unwrap_or_default(),
            ..RunConfig::default()
        },
    };
    overrides.apply(&mut cfg);
    if seed.is_some() {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

impl Common {
    fn config(self) -> hice::Result<RunConfig> {
        load_config(self.config, self.seed, self.overrides)
    }
}

fn run(cli: Cli) -> hice::Result<()> {
    match cli.command {
        Command::Ingest(c) => {
            let cfg = c.config()?;
            let client = cfg
                .adapter_url
                .as_deref()
                .map(|u| WireClient::new(u, cfg.backend.concurrency, Duration::from_secs(cfg.backend.timeout_secs)));
            let s = pipeline::ingest(&cfg, client.as_ref().map(|c| c as &dyn hice::backends::Encoder))?;
            println!("ingested {} train and {} test samples (stamp {})", s.train, s.test, &s.stamp[..12]);
        }
        Command::BaselineEval(c) => {
            let cfg = c.config()?;
            let backend = pipeline::make_backend(&cfg)?;
            let b = pipeline::baseline_eval(&cfg, backend.as_ref())?;
            let correct = b.bitmap.entries.values().filter(|e| e.correct).count();
            println!("baseline: {correct} of {} answered correctly", b.bitmap.entries.len());
        }
        Command::FitClassifier(s) => {
            let cfg = load_config(s.config, Some(s.seed), s.overrides)?;
            let c = pipeline::fit_classifiers(&cfg)?;
            println!(
                "projected: lambda {:e}, val acc {:.4}; unprojected: lambda {:e}, val acc {:.4}",
                c.projected.lambda, c.projected.val_accuracy, c.identity.lambda, c.identity.val_accuracy
            );
        }
        Command::BuildMemory(s) => {
            let cfg = load_config(s.config, Some(s.seed), s.overrides)?;
            let m = pipeline::build_memories(&cfg)?;
            println!(
                "M1: {} exemplars; M2: {} (projected) / {} (unprojected) hard negatives",
                m.m1.entries.len(),
                m.m2_projected.len(),
                m.m2_identity.len()
            );
        }
        Command::Evaluate(e) => {
            let cfg = e.common.config()?;
            let backend = pipeline::make_backend(&cfg)?;
            let out = pipeline::evaluate(&cfg, &cfg.router, backend.as_ref(), e.corrupt_classifier, &cfg.report_dir())?;
            println!(
                "evaluated {} edits: {} queries, {} routed edited",
                out.edit_ids.len(),
                out.decisions.len(),
                out.edited_routes()
            );
        }
        Command::Report(e) => {
            let cfg = e.common.config()?;
            let stamp = Stamps::compute(&cfg)?.evaluation(&cfg, &cfg.router, e.corrupt_classifier)?;
            let report = pipeline::report(&cfg, &cfg.report_dir(), &stamp)?;
            print!("{}", report.to_markdown());
        }
        Command::Sweep(s) => {
            let cfg = s.common.config()?;
            let backend = pipeline::make_backend(&cfg)?;
            let rows = pipeline::sweep(&cfg, backend.as_ref(), &s.thresholds)?;
            print!("{}", pipeline::sweep_table(&rows));
        }
        Command::Ablate(e) => {
            let cfg = e.common.config()?;
            let backend = pipeline::make_backend(&cfg)?;
            let rows = pipeline::ablation_matrix(&cfg, backend.as_ref(), e.corrupt_classifier)?;
            print!("{}", pipeline::ablation_table(&rows));
        }
        Command::Fixture(f) => {
            let kind = match f.kind {
                FixtureChoice::EndToEnd => FixtureKind::EndToEnd,
                FixtureChoice::Sweep => FixtureKind::Sweep,
            };
            let bundle = build_fixture(kind, f.seed)?;
            write_fixture(&bundle, &f.out, f.seed)?;
            println!("wrote {}", f.out.join("config.toml").display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let top = e.to_string();
            eprintln!("error: {top}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let msg = s.to_string();
                if !top.contains(&msg) {
                    eprintln!("  caused by: {msg}");
                }
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
