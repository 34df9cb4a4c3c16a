use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use augsearch::bench::{
    evaluate, export_dataset, generate_benchmark, load_dataset, DomainData, MetricsTable,
};
use augsearch::golden::export_golden;
use augsearch::rng::SplitMix64;
use augsearch::search::{lodo_eval, predict_scores, run_mode, Mode, SearchConfig};
use augsearch::transform::{apply_policy_traced, Image, Policy};
use augsearch::Error;
use clap::{Args, Parser, Subcommand};
use serde_json::json;

/// Augmentation policy search for domain-generalized segmentation.
#[derive(Parser)]
#[command(name = "augsearch", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render the synthetic benchmark to PNGs plus a manifest.
    GenData(RunArgs),
    /// Adversarial search with the learned controller.
    Search(RunArgs),
    /// The same loop with uniformly drawn policies.
    SearchRadg(RunArgs),
    /// Apply a policy JSON to every PNG in a directory.
    ApplyPolicy {
        #[arg(long)]
        policy: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Leave-one-domain-out comparison of baseline, random and learned search.
    Eval {
        #[command(flatten)]
        run: RunArgs,
        /// Number of consecutive seeds starting at the run seed.
        #[arg(long, default_value_t = 1)]
        seeds: u64,
    },
    /// Write the transform conformance corpus.
    ExportGolden {
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// JSON config; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Dataset directory from `gen-data`; generated from the config otherwise.
    #[arg(long)]
    input: Option<PathBuf>,
}

enum Failure {
    User(String),
    Runtime(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_user_error() {
            Failure::User(e.to_string())
        } else {
            Failure::Runtime(e.to_string())
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

type CliResult<T> = std::result::Result<T, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match init_threads().and_then(|()| dispatch(cli.command)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::User(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

fn init_threads() -> CliResult<()> {
    let Ok(v) = std::env::var("AADG_THREADS") else {
        return Ok(());
    };
    let n: usize = v
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::User(format!("AADG_THREADS must be a positive integer, got {v:?}")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Runtime(e.to_string()))
}

fn threads() -> usize {
    rayon::current_num_threads()
}

fn dispatch(cmd: Command) -> CliResult<()> {
    match cmd {
        Command::GenData(a) => gen_data(&a),
        Command::Search(a) => search(&a, &Mode::Aadg),
        Command::SearchRadg(a) => search(&a, &Mode::Radg),
        Command::ApplyPolicy {
            policy,
            input,
            out,
            seed,
        } => apply(&policy, &input, &out, seed),
        Command::Eval { run, seeds } => eval(&run, seeds),
        Command::ExportGolden { out } => {
            std::fs::create_dir_all(&out)?;
            let m = export_golden(&out)?;
            println!("wrote {} pairs to {}", m.entries.len(), out.display());
            Ok(())
        }
    }
}

fn load_config(a: &RunArgs) -> CliResult<SearchConfig> {
    let mut cfg = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Failure::User(format!("cannot read config {}: {e}", p.display())))?;
            SearchConfig::from_json(&text)?
        }
        None => SearchConfig::default(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn load_data(a: &RunArgs, cfg: &SearchConfig) -> CliResult<Vec<DomainData>> {
    Ok(match &a.input {
        Some(dir) => load_dataset(dir)?,
        None => generate_benchmark(
            &cfg.data.specs(),
            cfg.data.train_per_domain,
            cfg.data.test_per_domain,
            cfg.data.image_size,
            cfg.seed,
        )?,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> CliResult<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    std::fs::write(path, text + "\n")?;
    Ok(())
}

fn write_timing(out: &Path, start: Instant) -> CliResult<()> {
    write_json(
        &out.join("timing.json"),
        &json!({ "wall_clock_seconds": start.elapsed().as_secs_f64(), "threads": threads() }),
    )
}

fn gen_data(a: &RunArgs) -> CliResult<()> {
    let cfg = load_config(a)?;
    let data = load_data(a, &cfg)?;
    std::fs::create_dir_all(&a.out)?;
    let m = export_dataset(&a.out, &data)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    println!("wrote {} samples to {}", m.samples.len(), a.out.display());
    Ok(())
}

fn search(a: &RunArgs, mode: &Mode) -> CliResult<()> {
    let start = Instant::now();
    let cfg = load_config(a)?;
    let data = load_data(a, &cfg)?;
    let pick = |id: usize| {
        data.iter()
            .find(|d| d.spec.domain_id == id)
            .ok_or_else(|| Failure::User(format!("data.source_domains: domain {id} not in dataset")))
    };
    let sources = cfg
        .data
        .source_domains
        .iter()
        .map(|&id| pick(id))
        .collect::<CliResult<Vec<_>>>()?;
    let heldout: Vec<&DomainData> = data
        .iter()
        .filter(|d| !cfg.data.source_domains.contains(&d.spec.domain_id))
        .collect();

    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &cfg)?;
    let mut outcome = run_mode(&cfg, &sources, mode)?;
    let rows = heldout
        .iter()
        .filter(|d| !d.test.is_empty())
        .map(|d| evaluate(&d.spec.name, &predict_scores(&outcome.seg, &d.test)?, &d.test))
        .collect::<augsearch::Result<Vec<_>>>()?;
    if !rows.is_empty() {
        outcome.report.heldout = Some(MetricsTable::from_rows(rows));
    }

    let r = &outcome.report;
    std::fs::write(a.out.join("report.json"), r.to_json()? + "\n")?;
    std::fs::write(a.out.join("report.csv"), r.to_csv())?;
    if let Some(doc) = &r.best_policy {
        doc.clone().into_policy()?.save(a.out.join("policy.json"))?;
    }
    outcome.seg.checkpoint().save(a.out.join("seg_model.json"))?;
    outcome.classifier.checkpoint().save(a.out.join("domain_classifier.json"))?;
    outcome.controller.checkpoint().save(a.out.join("controller.json"))?;
    write_timing(&a.out, start)?;
    if let Some(t) = &r.heldout {
        println!("held-out dice {:.4}", t.average().dice);
    }
    println!("wrote run to {}", a.out.display());
    Ok(())
}

fn apply(policy: &Path, input: &Path, out: &Path, seed: u64) -> CliResult<()> {
    let policy = Policy::load(policy).map_err(|e| match e {
        Error::Io(io) => Failure::User(format!("cannot read policy: {io}")),
        other => other.into(),
    })?;
    let mut files: Vec<PathBuf> = std::fs::read_dir(input)
        .map_err(|e| Failure::User(format!("cannot read input dir {}: {e}", input.display())))?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    files.retain(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")));
    files.sort();
    std::fs::create_dir_all(out)?;
    let mut trace = String::from("index,file,subpolicy,cutouts\n");
    for (i, path) in files.iter().enumerate() {
        let img = Image::load_png(path)?;
        let app = apply_policy_traced(&img, &policy, &mut SplitMix64::for_item(seed, i as u64));
        let name = path.file_name().expect("listed file").to_string_lossy().into_owned();
        app.image.save_png(out.join(&name))?;
        let cuts: Vec<String> = app
            .cutouts
            .iter()
            .map(|c| format!("{}:{}:{}:{}", c.y0, c.x0, c.y1, c.x1))
            .collect();
        trace.push_str(&format!("{i},{name},{},{}\n", app.subpolicy, cuts.join(";")));
    }
    std::fs::write(out.join("trace.csv"), trace)?;
    println!("augmented {} images into {}", files.len(), out.display());
    Ok(())
}

fn eval(a: &RunArgs, seeds: u64) -> CliResult<()> {
    if seeds == 0 {
        return Err(Failure::User("--seeds must be positive".into()));
    }
    let start = Instant::now();
    let base = load_config(a)?;
    std::fs::create_dir_all(&a.out)?;
    write_json(&a.out.join("config.json"), &base)?;
    let modes = [Mode::Baseline, Mode::Radg, Mode::Aadg];
    let mut tables: Vec<Vec<MetricsTable>> = vec![Vec::new(); modes.len()];
    let mut csv = String::from("seed,mode,mean_dice,mean_accuracy,mean_auc\n");
    for s in 0..seeds {
        let mut cfg = base.clone();
        cfg.seed = base.seed + s;
        let data = load_data(a, &cfg)?;
        for (j, mode) in modes.iter().enumerate() {
            let t = lodo_eval(&cfg, &data, mode)?;
            let avg = t.average();
            let auc = avg.auc.map_or(String::new(), |v| format!("{v:.6}"));
            csv.push_str(&format!(
                "{},{},{:.6},{:.6},{auc}\n",
                cfg.seed,
                mode.name(),
                avg.dice,
                avg.accuracy
            ));
            println!("seed {} {:<8} dice {:.4}", cfg.seed, mode.name(), avg.dice);
            tables[j].push(t);
        }
    }
    let summary: Vec<_> = modes
        .iter()
        .zip(&tables)
        .map(|(m, ts)| {
            let mean = ts.iter().map(|t| t.average().dice).sum::<f64>() / ts.len() as f64;
            json!({ "mode": m.name(), "mean_dice": mean, "tables": ts })
        })
        .collect();
    write_json(
        &a.out.join("eval.json"),
        &json!({ "seeds": (base.seed..base.seed + seeds).collect::<Vec<_>>(), "modes": summary }),
    )?;
    std::fs::write(a.out.join("eval.csv"), csv)?;
    write_timing(&a.out, start)?;
    Ok(())
}
