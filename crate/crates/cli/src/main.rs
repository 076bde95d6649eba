//! `kfs`: condense, evaluate, diagnose and export knowledge-factorized
//! synthetic datasets.

use std::fs;
use std::io::{self, Write};
use std::ops::Range;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use kfs::data::{Dataset, DatasetSource};
use kfs::diagnostics::{self, ComparisonRow, Toy, ToyConfig};
use kfs::factorization::published_settings;
use kfs::formats;
use kfs::matching::{self, EmbeddingMeanCache};
use kfs::nets::{DecoderSpec, FeatureNetConfig};
use kfs::pipeline::{self, CondenseConfig, Condenser, LogRow};
use kfs::{Error, Result};

const CACHE_ENV: &str = "KFS_CACHE_DIR";
const CONDENSED_FILE: &str = "condensed.kfs1";
const LOG_FILE: &str = "train_log.csv";
const CHECKPOINT_DIR: &str = "checkpoints";

#[derive(Parser)]
#[command(name = "kfs", version, about = "Knowledge-factorized dataset condensation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train codes and decoders; writes condensed.kfs1, train_log.csv and checkpoints/.
    Condense {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "kfs-out")]
        out: PathBuf,
        /// Continue from the last checkpoint in <out>/checkpoints.
        #[arg(long)]
        resume: bool,
    },
    /// Train fresh classifiers on a condensed set; CSV of test accuracies.
    Eval {
        #[arg(long)]
        condensed: PathBuf,
        /// Condensation config naming the dataset and the eval settings.
        #[arg(long)]
        config: PathBuf,
        /// Comma-separated optimizer step budgets, one CSV row each.
        #[arg(long, value_delimiter = ',')]
        budget_steps: Vec<usize>,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Closed-form versus exhaustive gradient statistics on a toy instance.
    Diagnose {
        what: Diagnosis,
        /// Toy instance as JSON; defaults apply to missing fields.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Also emit every covariance entry (variance only).
        #[arg(long)]
        matrix: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference checks of every primitive and the matching loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Precompute real-class embedding means for a range of seeds.
    CacheMeans {
        /// Dataset source JSON.
        #[arg(long)]
        dataset: PathBuf,
        /// Half-open seed range `a..b`.
        #[arg(long, value_parser = parse_range)]
        seeds: Range<u64>,
        #[arg(long, default_value_t = 64)]
        width: usize,
        #[arg(long, default_value_t = 3)]
        depth: usize,
    },
    /// One PPM grid per class.
    ExportImages {
        #[arg(long)]
        condensed: PathBuf,
        #[arg(long, value_enum, default_value_t = Layout::CodesByDecoders)]
        layout: Layout,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Diagnosis {
    Bias,
    Variance,
    Unbiased,
    Budget,
}

/// Rows are decoders, columns are codes.
#[derive(Clone, Copy, ValueEnum)]
enum Layout {
    CodesByDecoders,
}

fn parse_range(s: &str) -> std::result::Result<Range<u64>, String> {
    let (a, b) = s.split_once("..").ok_or("expected a..b")?;
    let a: u64 = a.trim().parse().map_err(|e| format!("{e}"))?;
    let b: u64 = b.trim().parse().map_err(|e| format!("{e}"))?;
    if a >= b {
        return Err(format!("empty range {a}..{b}"));
    }
    Ok(a..b)
}

fn cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV)
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(".kfs-cache"))
}

fn base_dir(config: &Path) -> PathBuf {
    config.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn load_condense(config: &Path) -> Result<(CondenseConfig, Dataset, Dataset)> {
    let cfg: CondenseConfig = formats::load_config(config)?;
    cfg.validate()?;
    let (train, test) = cfg.dataset.load(&base_dir(config))?;
    Ok((cfg, train, test))
}

fn at(path: &Path) -> impl FnOnce(io::Error) -> Error + '_ {
    move |source| Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(at(dir))
}

fn sink(out: Option<&Path>) -> Result<Box<dyn Write>> {
    Ok(match out {
        Some(p) => Box::new(fs::File::create(p).map_err(at(p))?),
        None => Box::new(io::stdout().lock()),
    })
}

fn io_err(e: io::Error) -> Error {
    Error::Invalid(format!("write failed: {e}"))
}

/// Log rows before `step` from an earlier run, header excluded.
fn log_prefix(path: &Path, step: usize) -> Result<Vec<String>> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(at(path)(e)),
    };
    Ok(text
        .lines()
        .skip(1)
        .filter(|l| {
            l.split(',')
                .next()
                .and_then(|s| s.parse::<usize>().ok())
                .is_some_and(|s| s < step)
        })
        .map(str::to_owned)
        .collect())
}

fn condense(config: &Path, out: &Path, resume: bool) -> Result<()> {
    let (cfg, train, _) = load_condense(config)?;
    let checkpoints = out.join(CHECKPOINT_DIR);
    create_dir(&checkpoints)?;
    let cache = EmbeddingMeanCache::new(cache_dir());
    let saved = if resume { pipeline::load_checkpoint(&checkpoints)? } else { None };
    let mut condenser = match saved {
        Some((model, opt)) => Condenser::resume(&cfg, &train, Some(&cache), model, Some(opt))?,
        None => Condenser::new(&cfg, &train, Some(&cache))?,
    };
    let log_path = out.join(LOG_FILE);
    let mut lines = log_prefix(&log_path, condenser.step())?;
    lines.insert(0, LogRow::HEADER.to_owned());
    let mut log = fs::File::create(&log_path).map_err(at(&log_path))?;
    for l in &lines {
        writeln!(log, "{l}").map_err(io_err)?;
    }
    let every = (cfg.steps / 20).max(1);
    condenser.run(Some(&checkpoints), |row| {
        if row.step % every == 0 {
            log::info!("step {} loss {:.6}", row.step, row.loss);
        }
        writeln!(log, "{}", row.csv()).map_err(io_err)
    })?;
    log.flush().map_err(io_err)?;
    formats::write_atomic(&out.join(CONDENSED_FILE), &formats::encode_condensed(condenser.model()))
}

fn eval(condensed: &Path, config: &Path, budgets: &[usize], runs: Option<usize>, out: Option<&Path>) -> Result<()> {
    let (cfg, _, test) = load_condense(config)?;
    let model = formats::decode_condensed::<f32>(&formats::read_file(condensed)?)?;
    if model.num_classes() != test.num_classes() || model.image_shape() != test.image_shape() {
        return Err(Error::Invalid("condensed set does not match the test split".into()));
    }
    let mut ecfg = cfg.eval.clone().unwrap_or_default();
    if let Some(r) = runs {
        ecfg.runs = r;
    }
    ecfg.validate()?;
    let set = model.synthesize_all()?;
    let rows = if budgets.is_empty() {
        let (total, _, _) = ecfg.schedule(set.len());
        vec![(total, pipeline::evaluate(&set, &test, &ecfg)?)]
    } else {
        pipeline::budget_sweep(&set, &test, &ecfg, budgets)?
    };
    let mut w = sink(out)?;
    writeln!(w, "budget_steps,mean,std,accuracies").map_err(io_err)?;
    for (steps, r) in rows {
        let accs: Vec<String> = r.accuracies.iter().map(f64::to_string).collect();
        writeln!(w, "{steps},{},{},{}", r.mean, r.std, accs.join(";")).map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn write_rows(w: &mut dyn Write, rows: &[ComparisonRow]) -> Result<()> {
    writeln!(w, "term,closed_form,exhaustive,abs_err,rel_err").map_err(io_err)?;
    for r in rows {
        writeln!(w, "{},{:e},{:e},{:e},{:e}", r.term, r.closed_form, r.exhaustive, r.abs_err, r.rel_err)
            .map_err(io_err)?;
    }
    Ok(())
}

fn diagnose(what: Diagnosis, config: Option<&Path>, matrix: bool, out: Option<&Path>) -> Result<()> {
    let mut w = sink(out)?;
    if let Diagnosis::Budget = what {
        writeln!(
            w,
            "dataset,images_per_class,decoder,codes_per_class,decoders,decoder_params,computed_pct,published_pct,consistent"
        )
        .map_err(io_err)?;
        for s in published_settings() {
            let r = s.report()?;
            let spec = DecoderSpec::new(s.decoder, s.code_shape, s.image_shape[0])?;
            writeln!(
                w,
                "{},{},{:?},{},{},{},{:.2},{:.2},{}",
                s.dataset,
                s.images_per_class,
                s.decoder,
                s.codes_per_class,
                s.decoders,
                spec.param_count(),
                r.overparam_pct,
                s.stated_overparam_pct,
                s.consistent()?
            )
            .map_err(io_err)?;
        }
        return w.flush().map_err(io_err);
    }
    let toy_cfg: ToyConfig = match config {
        Some(p) => formats::load_config(p)?,
        None => ToyConfig::default(),
    };
    let toy = Toy::build(&toy_cfg)?;
    let rows = match what {
        Diagnosis::Bias => diagnostics::bias_rows(&toy)?,
        Diagnosis::Unbiased => diagnostics::unbiased_rows(&toy)?,
        Diagnosis::Variance => diagnostics::variance_rows(&toy, matrix)?,
        Diagnosis::Budget => unreachable!(),
    };
    log::info!("{} rows, worst rel_err {:e}", rows.len(), diagnostics::worst(&rows));
    write_rows(&mut *w, &rows)?;
    w.flush().map_err(io_err)
}

fn gradcheck(seed: u64, out: Option<&Path>) -> Result<()> {
    let mut w = sink(out)?;
    writeln!(w, "check,rel_err,max_abs_err,analytic_norm,numeric_norm,evaluations").map_err(io_err)?;
    for c in diagnostics::gradcheck_suite(seed)? {
        let r = &c.report;
        writeln!(
            w,
            "{},{:e},{:e},{:e},{:e},{}",
            c.name, r.rel_err, r.max_abs_err, r.analytic_norm, r.numeric_norm, r.evaluations
        )
        .map_err(io_err)?;
    }
    w.flush().map_err(io_err)
}

fn cache_means(dataset: &Path, seeds: Range<u64>, width: usize, depth: usize) -> Result<()> {
    let text = fs::read_to_string(dataset).map_err(at(dataset))?;
    let source: DatasetSource = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
    let (train, _) = source.load(&base_dir(dataset))?;
    let cache = EmbeddingMeanCache::new(cache_dir());
    let feature = FeatureNetConfig::new(train.image_shape(), width, depth, 0);
    for seed in seeds {
        matching::compute_or_load_means(&train, &feature, seed, Some(&cache))?;
        log::info!("cached means for seed {seed}");
    }
    Ok(())
}

fn export_images(condensed: &Path, layout: Layout, out: &Path) -> Result<()> {
    let Layout::CodesByDecoders = layout;
    let model = formats::decode_condensed::<f32>(&formats::read_file(condensed)?)?;
    create_dir(out)?;
    for p in pipeline::export_grids(&model, out)? {
        log::info!("wrote {}", p.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Condense { config, out, resume } => condense(&config, &out, resume),
        Command::Eval {
            condensed,
            config,
            budget_steps,
            runs,
            out,
        } => eval(&condensed, &config, &budget_steps, runs, out.as_deref()),
        Command::Diagnose {
            what,
            config,
            matrix,
            out,
        } => diagnose(what, config.as_deref(), matrix, out.as_deref()),
        Command::Gradcheck { seed, out } => gradcheck(seed, out.as_deref()),
        Command::CacheMeans {
            dataset,
            seeds,
            width,
            depth,
        } => cache_means(&dataset, seeds, width, depth),
        Command::ExportImages { condensed, layout, out } => export_images(&condensed, layout, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line = serde_json::json!({ "error": e.kind(), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
