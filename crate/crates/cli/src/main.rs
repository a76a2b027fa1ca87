mod overrides;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use herman::descriptors::{fetch_descriptors, save_bank, FetchConfig, HttpChatClient, DEFAULT_DESCRIPTORS_PER_CLASS};
use herman::encoders::{generate_world, load_embedding_bank, save_embedding_bank, synthetic_text_encoder, Split};
use herman::harness::{ablation_suite, run_with_dataset, Dataset, RunConfig, RunOutcome, RunReport, Scorer, SweepRow, SweepSpec};
use herman::matching::{write_selection_rows, SELECTION_CSV_HEADER};
use serde_json::json;

#[derive(Parser)]
#[command(name = "herman", version, about = "Hierarchical representation matching for class-incremental learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic hierarchical world: features, descriptor bank and text-embedding map.
    GenWorld {
        /// Run config whose [world] section describes the world (defaults apply otherwise).
        #[arg(long)]
        config: Option<PathBuf>,
        /// Override a config key, e.g. `--set world.seed=7`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Ask a chat-completions endpoint for per-class hierarchical descriptors.
    FetchDescriptors {
        /// Text file with one class name per line.
        #[arg(long, conflicts_with = "from_bank")]
        classes: Option<PathBuf>,
        /// Take class names from an NDJSON embedding bank.
        #[arg(long)]
        from_bank: Option<PathBuf>,
        /// Base URL; requests go to `<endpoint>/chat/completions`.
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        model: String,
        /// Descriptors wanted per class.
        #[arg(long, default_value_t = DEFAULT_DESCRIPTORS_PER_CLASS)]
        per_class: usize,
        #[arg(long, default_value_t = 4)]
        max_parallel: usize,
        /// Raw completions are cached here so reruns need no network.
        #[arg(long)]
        cache_dir: Option<PathBuf>,
        /// Only use cached completions.
        #[arg(long)]
        offline: bool,
        /// Output descriptor bank (JSON).
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one class-incremental experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override a config key, e.g. `--set scoring.k=5`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        #[arg(long)]
        out: PathBuf,
        /// Also write the selected descriptors and weights for every test sample.
        #[arg(long)]
        dump_selections: bool,
    },
    /// Run a grid of experiments, each in its own subdirectory.
    Sweep {
        /// Base run config.
        #[arg(long)]
        config: PathBuf,
        /// Override a base config key. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        set: Vec<String>,
        /// TOML grid with optional lists: variant, k, lambda, rho, delta, root_seed, world_seed.
        #[arg(long)]
        spec: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Merge report.json files into one CSV comparing runs.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        runs: Vec<PathBuf>,
        /// Output CSV; stdout when omitted.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

enum Failure {
    /// Bad invocation or configuration: exit 1.
    Config(String),
    /// Anything that went wrong while doing the work: exit 2.
    Runtime(String),
}

type CliResult<T = ()> = Result<T, Failure>;

fn runtime(e: impl std::fmt::Display) -> Failure {
    Failure::Runtime(e.to_string())
}

fn config_help() -> String {
    format!(
        "Config keys and defaults (TOML; override with --set key=value):\n\n{}",
        RunConfig::default().to_toml_string()
    )
}

fn load_config(path: Option<&Path>, set: &[String]) -> CliResult<RunConfig> {
    let base = match path {
        Some(p) => {
            if !p.is_file() {
                return Err(Failure::Config(format!("config file not found: {}", p.display())));
            }
            RunConfig::load(p).map_err(|e| Failure::Config(e.to_string()))?
        }
        None => RunConfig::default(),
    };
    overrides::apply(&base, set).map_err(Failure::Config)
}

/// Records files written under one output directory.
struct Artifacts {
    dir: PathBuf,
    files: Vec<String>,
    started: Instant,
}

impl Artifacts {
    fn new(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir).map_err(|e| runtime(format!("cannot create {}: {e}", dir.display())))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            files: Vec::new(),
            started: Instant::now(),
        })
    }

    fn path(&mut self, name: &str) -> PathBuf {
        self.files.push(name.to_string());
        self.dir.join(name)
    }

    fn write(&mut self, name: &str, contents: impl AsRef<[u8]>) -> CliResult {
        let path = self.path(name);
        fs::write(&path, contents).map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }

    fn finish(mut self, command: &str) -> CliResult {
        self.files.push("manifest.json".into());
        let manifest = json!({
            "command": command,
            "artifacts": self.files,
            "wall_clock_seconds": self.started.elapsed().as_secs_f64(),
        });
        let path = self.dir.join("manifest.json");
        fs::write(&path, serde_json::to_string_pretty(&manifest).unwrap() + "\n")
            .map_err(|e| runtime(format!("cannot write {}: {e}", path.display())))
    }
}

fn write_run(art: &mut Artifacts, config: &RunConfig, outcome: &RunOutcome) -> CliResult {
    art.write("config.resolved.toml", config.to_toml_string())?;
    art.write("report.json", outcome.report.to_json())?;
    art.write("tasks.csv", outcome.report.task_csv())?;
    let checkpoint = json!({ "router": outcome.state, "replay_stats": outcome.replay_stats });
    art.write("checkpoint.json", serde_json::to_string(&checkpoint).map_err(runtime)?)
}

fn gen_world(config: Option<&Path>, set: &[String], out: &Path) -> CliResult {
    let config = load_config(config, set)?;
    let world = generate_world(&config.world).map_err(|e| Failure::Config(e.to_string()))?;
    let mut art = Artifacts::new(out)?;
    art.write("config.resolved.toml", config.to_toml_string())?;
    save_embedding_bank(&world.samples, &world.truth.class_names, art.path("samples.ndjson")).map_err(runtime)?;
    save_bank(&world.bank, art.path("descriptors.json")).map_err(runtime)?;
    synthetic_text_encoder(&world.truth)
        .save_json_file(art.path("encoder.json"))
        .map_err(runtime)?;
    println!(
        "wrote {} samples of {} classes to {}",
        world.samples.len(),
        world.truth.class_names.len(),
        out.display()
    );
    art.finish("gen-world")
}

#[allow(clippy::too_many_arguments)]
fn fetch(
    classes: Option<&Path>,
    from_bank: Option<&Path>,
    endpoint: &str,
    model: &str,
    per_class: usize,
    max_parallel: usize,
    cache_dir: Option<PathBuf>,
    offline: bool,
    out: &Path,
) -> CliResult {
    let names: Vec<String> = match (classes, from_bank) {
        (Some(p), _) => fs::read_to_string(p)
            .map_err(|e| Failure::Config(format!("cannot read {}: {e}", p.display())))?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(str::to_owned)
            .collect(),
        (None, Some(p)) => load_embedding_bank(p).map_err(|e| Failure::Config(e.to_string()))?.class_names,
        (None, None) => return Err(Failure::Config("one of --classes or --from-bank is required".into())),
    };
    if names.is_empty() {
        return Err(Failure::Config("no class names given".into()));
    }
    let mut cfg = FetchConfig::new(model);
    cfg.descriptors_per_class = per_class;
    cfg.max_parallel = max_parallel.max(1);
    cfg.cache_dir = cache_dir;
    cfg.offline = offline;
    let client = HttpChatClient::new(endpoint);
    let outcome = fetch_descriptors(&names, &client, &cfg).map_err(|e| Failure::Config(e.to_string()))?;
    save_bank(&outcome.bank, out).map_err(runtime)?;
    for f in &outcome.failures {
        eprintln!("failed: {}: {}", f.class, f.message);
    }
    println!(
        "{} of {} classes fetched into {}",
        outcome.bank.classes.len(),
        names.len(),
        out.display()
    );
    if outcome.failures.is_empty() {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("{} classes failed", outcome.failures.len())))
    }
}

fn dump_selections(config: &RunConfig, dataset: &Dataset, path: &Path) -> CliResult {
    let scorer = Scorer::for_variant(config, dataset).map_err(runtime)?;
    let all: Vec<usize> = (0..dataset.num_classes()).collect();
    let mut out = std::io::BufWriter::new(fs::File::create(path).map_err(runtime)?);
    writeln!(out, "{SELECTION_CSV_HEADER}").map_err(runtime)?;
    for s in dataset.samples.iter().filter(|s| s.split == Split::Test) {
        let h = scorer.hierarchy(s.features.layers(), &all).map_err(runtime)?;
        write_selection_rows(&mut out, &s.id, &h, &dataset.class_names).map_err(runtime)?;
    }
    out.flush().map_err(runtime)
}

fn run(config: &Path, set: &[String], out: &Path, selections: bool) -> CliResult {
    let config = load_config(Some(config), set)?;
    let dataset = Dataset::load(&config).map_err(runtime)?;
    let outcome = run_with_dataset(&config, &dataset).map_err(runtime)?;
    let mut art = Artifacts::new(out)?;
    write_run(&mut art, &config, &outcome)?;
    if selections {
        let path = art.path("selections.csv");
        dump_selections(&config, &dataset, &path)?;
    }
    let r = &outcome.report;
    println!(
        "{}: A_T {:.4}, average {:.4} over {} tasks",
        r.variant,
        r.final_accuracy,
        r.average_accuracy,
        r.tasks.len()
    );
    art.finish("run")
}

fn sweep(config: &Path, set: &[String], spec: &Path, out: &Path, jobs: usize) -> CliResult {
    let base = load_config(Some(config), set)?;
    let text = fs::read_to_string(spec).map_err(|e| Failure::Config(format!("cannot read {}: {e}", spec.display())))?;
    let spec: SweepSpec = toml::from_str(&text).map_err(|e| Failure::Config(format!("{}: {e}", spec.display())))?;
    for cell in spec.cells(&base) {
        cell.config
            .validate()
            .map_err(|e| Failure::Config(format!("sweep cell {}: {e}", cell.label())))?;
    }
    let results = ablation_suite(&base, &spec, jobs.max(1)).map_err(runtime)?;
    let mut art = Artifacts::new(out)?;
    let mut rows = Vec::new();
    for (cell, outcome) in &results {
        let label = cell.label();
        let mut sub = Artifacts::new(&out.join(&label))?;
        write_run(&mut sub, &cell.config, outcome)?;
        sub.finish("sweep-cell")?;
        art.files.push(format!("{label}/"));
        rows.push(SweepRow::from_outcome(&cell.config, outcome));
    }
    art.write("sweep.csv", SweepRow::csv(&rows))?;
    println!("{} cells written to {}", rows.len(), out.display());
    art.finish("sweep")
}

fn report(runs: &[PathBuf], out: Option<&Path>) -> CliResult {
    let mut csv = String::from("run,variant,tasks,final_accuracy,average_accuracy,final_routing_similarity\n");
    for path in runs {
        let text = fs::read_to_string(path).map_err(|e| Failure::Config(format!("cannot read {}: {e}", path.display())))?;
        let r: RunReport = serde_json::from_str(&text).map_err(|e| runtime(format!("{}: {e}", path.display())))?;
        let sim = r.tasks.last().map(|t| t.routing_similarity).unwrap_or(f64::NAN);
        csv.push_str(&format!(
            "{},{},{},{},{},{}\n",
            path.display(),
            r.variant,
            r.tasks.len(),
            r.final_accuracy,
            r.average_accuracy,
            sim
        ));
    }
    match out {
        Some(p) => fs::write(p, csv).map_err(|e| runtime(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{csv}");
            Ok(())
        }
    }
}

fn dispatch(command: Command) -> CliResult {
    match command {
        Command::GenWorld { config, set, out } => gen_world(config.as_deref(), &set, &out),
        Command::FetchDescriptors {
            classes,
            from_bank,
            endpoint,
            model,
            per_class,
            max_parallel,
            cache_dir,
            offline,
            out,
        } => fetch(
            classes.as_deref(),
            from_bank.as_deref(),
            &endpoint,
            &model,
            per_class,
            max_parallel,
            cache_dir,
            offline,
            &out,
        ),
        Command::Run {
            config,
            set,
            out,
            dump_selections,
        } => run(&config, &set, &out, dump_selections),
        Command::Sweep {
            config,
            set,
            spec,
            out,
            jobs,
        } => sweep(&config, &set, &spec, &out, jobs),
        Command::Report { runs, out } => report(&runs, out.as_deref()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let help = config_help();
    let mut cmd = Cli::command();
    for name in ["gen-world", "run", "sweep"] {
        cmd = cmd.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let matches = match cmd.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(1);
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
