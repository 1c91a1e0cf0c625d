use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use sha2::{Digest, Sha256};

use dpcl_diff::corpus::synthetic::{novelty_mix, planted_period, NoveltyConfig};
use dpcl_diff::corpus::{
    build_periodic_index, extract_new_events, load_bundle, load_quads, load_split_files, save_bundle, CorpusError,
    QuadStore, Split,
};
use dpcl_diff::engine::{load_checkpoint, save_checkpoint, train, Checkpoint, TrainConfig};
use dpcl_diff::evaluate::{
    ablation_configs, evaluate_split, render_table, run_harness, sweep_configs, EvalOptions, EvalRow, Stratum,
    SweepParam,
};
use dpcl_diff::geometry::project_to_ball;
use dpcl_diff::numkit::NumError;
use dpcl_diff::ModelError;

#[derive(Parser)]
#[command(name = "dpcl-diff", version, about = "Temporal knowledge graph extrapolation: prepare, train, evaluate, ablate, sweep")]
struct Cli {
    /// Flat `key = value` config file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Override one config field; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory. Runs go to `<out>/run-<hash>-s<seed>/`.
    #[arg(long, global = true, value_name = "DIR", default_value = "runs")]
    out: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Build a dataset bundle in `--out` from TSV files or a synthetic generator.
    Prepare {
        /// One TSV file, split 80/10/10 by timestamp.
        #[arg(long, conflicts_with_all = ["train", "synthetic"])]
        input: Option<PathBuf>,
        #[arg(long, requires_all = ["valid", "test"], conflicts_with = "synthetic")]
        train: Option<PathBuf>,
        #[arg(long)]
        valid: Option<PathBuf>,
        #[arg(long)]
        test: Option<PathBuf>,
        #[arg(long, value_enum)]
        synthetic: Option<Synthetic>,
    },
    /// Train and write checkpoints plus metrics.jsonl into the run directory.
    Train {
        #[arg(long, value_name = "BUNDLE")]
        data: PathBuf,
    },
    /// Evaluate a checkpoint; defaults to the run directory's best checkpoint.
    Eval {
        #[arg(long, value_name = "BUNDLE")]
        data: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitArg,
        /// Extra strata besides `all`: new, periodic.
        #[arg(long, value_delimiter = ',', value_parser = parse_stratum)]
        strata: Vec<Stratum>,
        /// Add GNDiff-only and DPCL-only rows.
        #[arg(long)]
        components: bool,
        /// Keep per-query ranks in the JSON output.
        #[arg(long)]
        per_query: bool,
    },
    /// Full model, both single-component ablations, and the four mapping strategies.
    Ablate {
        #[arg(long, value_name = "BUNDLE")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', value_parser = parse_stratum)]
        strata: Vec<Stratum>,
    },
    /// Grid over alpha (0.1..0.9) or lambda (1..8); writes CSV.
    Sweep {
        #[arg(long, value_name = "BUNDLE")]
        data: PathBuf,
        #[arg(long, value_parser = parse_sweep)]
        param: SweepParam,
    },
    /// Keep the first occurrence of each (s, r, o) and write a new bundle to `--out`.
    ExtractNew {
        #[arg(long, value_name = "BUNDLE")]
        data: PathBuf,
    },
    /// Write `entity,space,x1..xd` rows in Euclidean and Poincaré coordinates.
    ExportEmbeddings {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Bundle providing the entity names.
        #[arg(long, value_name = "BUNDLE")]
        data: PathBuf,
        #[arg(long, value_delimiter = ',', required = true)]
        entities: Vec<String>,
        /// Destination file; stdout when omitted.
        #[arg(long)]
        csv: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Synthetic {
    Planted,
    Novelty,
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Valid,
    Test,
}

fn parse_stratum(s: &str) -> Result<Stratum, String> {
    Stratum::parse(s).ok_or_else(|| format!("unknown stratum `{s}` (expected all, new, periodic)"))
}

fn parse_sweep(s: &str) -> Result<SweepParam, String> {
    SweepParam::parse(s).ok_or_else(|| format!("unknown sweep parameter `{s}` (expected alpha or lambda)"))
}

/// Bad user input discovered after argument parsing.
#[derive(Debug)]
struct Usage(String);

impl fmt::Display for Usage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for Usage {}

const EXIT_USAGE: u8 = 2;
const EXIT_DATA: u8 = 3;
const EXIT_NUMERIC: u8 = 4;

fn classify(err: &anyhow::Error) -> (u8, &'static str) {
    for cause in err.chain() {
        if cause.is::<Usage>() {
            return (EXIT_USAGE, "usage");
        }
        if let Some(m) = cause.downcast_ref::<ModelError>() {
            return match m {
                ModelError::Config(_) => (EXIT_USAGE, "usage"),
                m if m.is_numeric() => (EXIT_NUMERIC, "numeric"),
                _ => continue,
            };
        }
        if let Some(CorpusError::Config(_)) = cause.downcast_ref::<CorpusError>() {
            return (EXIT_USAGE, "usage");
        }
        if cause.is::<NumError>() {
            return (EXIT_NUMERIC, "numeric");
        }
    }
    (EXIT_DATA, "data")
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error: usage: {first}");
            return ExitCode::from(EXIT_USAGE);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (code, kind) = classify(&e);
            eprintln!("error: {kind}: {}", one_line(&e));
            ExitCode::from(code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match &cli.command {
        Command::Prepare { input, train, valid, test, synthetic } => {
            let store = match (input, train, synthetic) {
                (Some(p), _, _) => load_quads(p)?,
                (_, Some(tr), _) => load_split_files(tr, valid.as_ref().unwrap(), test.as_ref().unwrap())?,
                (_, _, Some(Synthetic::Planted)) => planted_period(cli.seed.unwrap_or(0)).store,
                (_, _, Some(Synthetic::Novelty)) => novelty_mix(cli.seed.unwrap_or(0), &NoveltyConfig::default()).store,
                _ => return Err(Usage("prepare needs --input, --train/--valid/--test, or --synthetic".into()).into()),
            };
            write_bundle(&store, &cli.out)
        }
        Command::ExtractNew { data } => {
            let store = load_bundle(data)?;
            write_bundle(&extract_new_events(&store), &cli.out)
        }
        Command::Train { data } => {
            let store = load_bundle(data)?;
            let cfg = resolve_config(&cli, TrainConfig::default())?;
            let dir = run_dir(&cli.out, &cfg)?;
            train_into(&cfg, &store, &dir)
        }
        Command::Eval { data, checkpoint, split, strata, components, per_query } => {
            let store = load_bundle(data)?;
            let (cfg, ckpt) = match checkpoint {
                Some(p) => {
                    let ckpt = load_checkpoint(p)?;
                    (resolve_config(&cli, ckpt.config.clone())?, ckpt)
                }
                None => {
                    let cfg = resolve_config(&cli, TrainConfig::default())?;
                    let ckpt = default_checkpoint(&run_dir_path(&cli.out, &cfg))?;
                    (cfg, ckpt)
                }
            };
            let dir = run_dir(&cli.out, &cfg)?;
            let split = match split {
                SplitArg::Valid => Split::Valid,
                SplitArg::Test => Split::Test,
            };
            let index = build_periodic_index(&store, cfg.lambda, &Split::ALL)?;
            let opts = EvalOptions { strata: strata.clone(), components: *components, per_query: *per_query };
            let rows = evaluate_split(&ckpt.model, &cfg, &store, &index, split, &opts)?;
            write_json(&dir.join(format!("eval-{}.json", split.name())), &rows)?;
            print!("{}", render_table(&rows));
            Ok(())
        }
        Command::Ablate { data, strata } => {
            let store = load_bundle(data)?;
            let cfg = resolve_config(&cli, TrainConfig::default())?;
            let dir = run_dir(&cli.out, &cfg)?;
            let rows = run_harness(&ablation_configs(&cfg), &store, strata)?;
            let table = render_table(&rows);
            write_json(&dir.join("ablate.json"), &rows)?;
            write_file(&dir.join("ablate.txt"), &table)?;
            print!("{table}");
            Ok(())
        }
        Command::Sweep { data, param } => {
            let store = load_bundle(data)?;
            let cfg = resolve_config(&cli, TrainConfig::default())?;
            let dir = run_dir(&cli.out, &cfg)?;
            let rows = run_harness(&sweep_configs(&cfg, *param), &store, &[])?;
            let csv = sweep_csv(param.name(), &rows);
            write_file(&dir.join(format!("sweep-{}.csv", param.name())), &csv)?;
            print!("{csv}");
            Ok(())
        }
        Command::ExportEmbeddings { checkpoint, data, entities, csv } => {
            let ckpt = load_checkpoint(checkpoint)?;
            let store = load_bundle(data)?;
            let text = embeddings_csv(&ckpt, &store, entities)?;
            match csv {
                Some(p) => write_file(p, &text),
                None => {
                    print!("{text}");
                    Ok(())
                }
            }
        }
    }
}

/// The error chain on one line, skipping causes already quoted by their parent.
fn one_line(err: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in err.chain() {
        let text = cause.to_string();
        if !out.contains(&text) {
            if !out.is_empty() {
                out.push_str(": ");
            }
            out.push_str(&text);
        }
    }
    out.replace('\n', " ")
}

/// Defaults, then the config file, then `--set` overrides, then `--seed`.
fn resolve_config(cli: &Cli, base: TrainConfig) -> Result<TrainConfig> {
    let mut cfg = base;
    if let Some(p) = &cli.config {
        let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
        cfg.apply_text(&text)?;
    }
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
        cfg.set(k, v)?;
    }
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_dir_path(out: &Path, cfg: &TrainConfig) -> PathBuf {
    let digest = hex::encode(Sha256::digest(cfg.to_text().as_bytes()));
    out.join(format!("run-{}-s{}", &digest[..12], cfg.seed))
}

fn run_dir(out: &Path, cfg: &TrainConfig) -> Result<PathBuf> {
    let dir = run_dir_path(out, cfg);
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    write_file(&dir.join("config.txt"), &cfg.to_text())?;
    Ok(dir)
}

fn default_checkpoint(dir: &Path) -> Result<Checkpoint> {
    for name in ["best.ckpt", "last.ckpt"] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(load_checkpoint(&p)?);
        }
    }
    anyhow::bail!("no checkpoint in {} (run `train` with the same config first or pass --checkpoint)", dir.display())
}

fn train_into(cfg: &TrainConfig, store: &QuadStore, dir: &Path) -> Result<()> {
    let metrics_path = dir.join("metrics.jsonl");
    let mut metrics = fs::File::create(&metrics_path).with_context(|| format!("creating {}", metrics_path.display()))?;
    let mut write_err = None;
    let outcome = train(cfg, store, |m| {
        log::info!(
            "epoch {} loss {:.5} (ce {:.5} sup {:.5} diff {:.5}) val_mrr {}",
            m.epoch,
            m.loss_total,
            m.loss_ce,
            m.loss_sup,
            m.loss_diff,
            m.val_mrr.map_or("-".to_owned(), |v| format!("{v:.4}"))
        );
        let line = serde_json::to_string(m).expect("metrics serialize");
        if let Err(e) = writeln!(metrics, "{line}") {
            write_err.get_or_insert(e);
        }
    })?;
    if let Some(e) = write_err {
        return Err(e).with_context(|| format!("writing {}", metrics_path.display()));
    }
    save_checkpoint(&outcome.last, &dir.join("last.ckpt"))?;
    if let Some(best) = &outcome.best {
        save_checkpoint(best, &dir.join("best.ckpt"))?;
    }
    println!("{}", dir.display());
    Ok(())
}

fn write_bundle(store: &QuadStore, dir: &Path) -> Result<()> {
    save_bundle(store, dir)?;
    println!("{}", serde_json::to_string_pretty(&store.stats())?);
    Ok(())
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn write_json(path: &Path, rows: &[EvalRow]) -> Result<()> {
    write_file(path, &(serde_json::to_string_pretty(rows)? + "\n"))
}

fn sweep_csv(param: &str, rows: &[EvalRow]) -> String {
    let mut out = format!("{param},mrr,hits1,hits3,hits10\n");
    for row in rows {
        let r = &row.reports[0];
        out.push_str(&format!("{},{:.6},{:.6},{:.6},{:.6}\n", row.label, r.mrr, r.hits1, r.hits3, r.hits10));
    }
    out
}

fn embeddings_csv(ckpt: &Checkpoint, store: &QuadStore, entities: &[String]) -> Result<String> {
    let table = &ckpt.model.dpcl.entity;
    if table.rows() != store.num_entities() {
        return Err(Usage(format!(
            "checkpoint has {} entities but the bundle has {}",
            table.rows(),
            store.num_entities()
        ))
        .into());
    }
    let d = table.cols();
    let mut out = String::from("entity,space");
    for i in 1..=d {
        out.push_str(&format!(",x{i}"));
    }
    out.push('\n');
    for name in entities {
        let id = store.entities().id(name).ok_or_else(|| unknown_entity(name, store.entities().names()))?;
        let raw = table.row(id as usize);
        let ball = project_to_ball(raw);
        for (space, coords) in [("euclidean", raw), ("poincare", ball.coords())] {
            out.push_str(&csv_field(name));
            out.push(',');
            out.push_str(space);
            for x in coords {
                out.push_str(&format!(",{x}"));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

fn unknown_entity(name: &str, names: &[String]) -> anyhow::Error {
    let mut scored: Vec<(f64, &String)> = names.iter().map(|n| (strsim::jaro_winkler(name, n), n)).collect();
    scored.sort_by(|a, b| b.0.total_cmp(&a.0));
    let near: Vec<&str> = scored.iter().take(3).filter(|(s, _)| *s > 0.7).map(|(_, n)| n.as_str()).collect();
    let hint = if near.is_empty() { "no close matches".to_owned() } else { format!("did you mean {}?", near.join(", ")) };
    Usage(format!("unknown entity `{name}`; {hint}")).into()
}
