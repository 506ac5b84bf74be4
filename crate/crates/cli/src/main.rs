use std::fs;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use textguided::checkpoint;
use textguided::config::{RunConfig, StrategyKind};
use textguided::embeddings::{load_binary, load_text, EmbeddingError, EmbeddingTable};
use textguided::experiment::{pretrained_network, run_experiment, select_classes, ExperimentError};
use textguided::gradcheck::run_suite;
use textguided::multitask::{build_network, NetError};
use textguided::relevance::{
    parse_labels, rank_classes, select_top_m, tra_report, RelevanceError, Side,
};
use textguided::synth::{generate_world, write_world};
use textguided::train::{evaluate, train};

#[derive(Parser)]
#[command(name = "textguided", version, about = "Text-guided object selection for activity recognition")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone, Default)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory (overrides the config).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Seed override.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Auto,
    Binary,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Embedding table utilities.
    Embed {
        #[command(subcommand)]
        command: EmbedCommand,
    },
    /// Rank object classes by relevance to the activity labels.
    Tra {
        /// Activity labels, one per line.
        #[arg(long)]
        activities: Option<PathBuf>,
        /// Candidate object class labels, one per line.
        #[arg(long)]
        objects: Option<PathBuf>,
        /// Embedding table; `.txt` and `.vec` files are read as text.
        #[arg(long)]
        embeddings: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "auto")]
        format: Format,
        /// Number of classes to keep.
        #[arg(long)]
        m: Option<usize>,
        /// Rows per activity in the report.
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Generate a synthetic world and write it out.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Pretrain and finetune one strategy on the configured world.
    Train {
        #[arg(long, value_enum)]
        strategy: Option<StrategyArg>,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the configured world's test clips.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// All three strategies over the configured seeds.
    Experiment {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Subcommand)]
enum EmbedCommand {
    /// Report dimension, vocabulary size and token presence.
    Inspect {
        path: PathBuf,
        tokens: Vec<String>,
        #[arg(long, value_enum, default_value = "auto")]
        format: Format,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum StrategyArg {
    Baseline,
    ObjectIncorporated,
    TextGuided,
}

impl From<StrategyArg> for StrategyKind {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Baseline => StrategyKind::Baseline,
            StrategyArg::ObjectIncorporated => StrategyKind::ObjectIncorporated,
            StrategyArg::TextGuided => StrategyKind::TextGuided,
        }
    }
}

/// Exit status for a failed command.
fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        let (net, relevance) = match cause.downcast_ref::<ExperimentError>() {
            Some(ExperimentError::Net(e)) => (Some(e), None),
            Some(ExperimentError::Relevance(e)) => (None, Some(e)),
            _ => (cause.downcast_ref::<NetError>(), cause.downcast_ref::<RelevanceError>()),
        };
        if let Some(NetError::Divergence { .. }) = net {
            return 4;
        }
        if let Some(RelevanceError::Side { side: Side::Activity, .. }) = relevance {
            return 3;
        }
    }
    2
}

fn load_table(path: &Path, format: Format) -> Result<EmbeddingTable, EmbeddingError> {
    let text = match format {
        Format::Binary => false,
        Format::Text => true,
        Format::Auto => matches!(
            path.extension().and_then(|e| e.to_str()),
            Some("txt" | "vec")
        ),
    };
    if text {
        load_text(path)
    } else {
        load_binary(path)
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let cfg = match &common.config {
        Some(path) => RunConfig::load(path).with_context(|| format!("reading config {}", path.display()))?,
        None => RunConfig::default(),
    };
    let mut cfg = cfg;
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let dir = cfg
        .out_dir
        .clone()
        .context("no output directory: pass --out or set [output] dir")?;
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    Ok(dir)
}

fn create(path: &Path) -> Result<BufWriter<fs::File>> {
    Ok(BufWriter::new(
        fs::File::create(path).with_context(|| format!("creating {}", path.display()))?,
    ))
}

fn write_with(path: &Path, f: impl FnOnce(&mut BufWriter<fs::File>) -> io::Result<()>) -> Result<()> {
    let mut w = create(path)?;
    f(&mut w).with_context(|| format!("writing {}", path.display()))?;
    w.flush()?;
    Ok(())
}

fn echo_config(cfg: &RunConfig, dir: &Path) -> Result<()> {
    fs::write(dir.join("config.txt"), cfg.to_text())?;
    Ok(())
}

fn cmd_embed_inspect(path: &Path, tokens: &[String], format: Format) -> Result<()> {
    let table = load_table(path, format).with_context(|| format!("reading {}", path.display()))?;
    println!("dim\t{}", table.dim());
    println!("vocab\t{}", table.len());
    for t in tokens {
        match table.norm(t) {
            Some(n) => println!("{t}\tpresent\t{}", textguided::tsv::format_sig(n, 9)),
            None => println!("{t}\tabsent"),
        }
    }
    Ok(())
}

fn read_labels(path: &Path) -> Result<String> {
    fs::read_to_string(path).with_context(|| format!("reading labels {}", path.display()))
}

#[allow(clippy::too_many_arguments)]
fn cmd_tra(
    activities: Option<PathBuf>,
    objects: Option<PathBuf>,
    embeddings: Option<PathBuf>,
    format: Format,
    m: Option<usize>,
    k: Option<usize>,
    common: &Common,
) -> Result<()> {
    let cfg = load_config(common)?;
    let activities = activities.or(cfg.tra.activities.clone()).context("no activity label file")?;
    let objects = objects.or(cfg.tra.objects.clone()).context("no object label file")?;
    let embeddings = embeddings.or(cfg.tra.embeddings.clone()).context("no embedding file")?;
    let table = load_table(&embeddings, format).with_context(|| format!("reading {}", embeddings.display()))?;
    let acts_text = read_labels(&activities)?;
    let objs_text = read_labels(&objects)?;
    let acts = parse_labels(acts_text.lines())?;
    let objs = parse_labels(objs_text.lines())?;
    let ranking = rank_classes(&acts, &objs, &table)?;
    let m = m.or(cfg.experiment.m).unwrap_or(ranking.len());
    let refined = select_top_m(&ranking, m);
    let report = tra_report(&refined, &table, k.unwrap_or(cfg.tra.k))?;

    let dir = out_dir(&cfg)?;
    write_with(&dir.join("ranking.tsv"), |w| ranking.write_tsv(w))?;
    write_with(&dir.join("selection.txt"), |w| refined.write_selection(w))?;
    write_with(&dir.join("report.tsv"), |w| report.write_tsv(w))?;
    write_with(&dir.join("skipped.tsv"), |w| ranking.write_skipped(w))?;
    println!(
        "ranked {} classes, selected {}, skipped {}",
        ranking.len(),
        refined.selected().len(),
        ranking.skipped().len()
    );
    Ok(())
}

fn cmd_synth(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.experiment.world.seed = seed;
    }
    let dir = out_dir(&cfg)?;
    let world = generate_world(&cfg.experiment.world)?;
    write_world(&world, &dir)?;
    echo_config(&cfg, &dir)?;
    println!(
        "wrote {} train / {} test clips and {} + {} object images to {}",
        world.train_clips.len(),
        world.test_clips.len(),
        world.train_objects.images.len(),
        world.test_objects.len(),
        dir.display()
    );
    Ok(())
}

fn cmd_train(strategy: Option<StrategyArg>, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(s) = strategy {
        cfg.strategy = s.into();
    }
    let dir = out_dir(&cfg)?;
    let e = &cfg.experiment;
    let world = generate_world(&e.world)?;
    let refined = select_classes(&world, e.m())?;
    let strategy = cfg
        .strategy
        .with_classes(Some(refined.selected().to_vec()))
        .expect("classes supplied");
    let mut net = pretrained_network(&world, e, cfg.seed)?;
    let log = train(&mut net, &world.train_clips, &world.train_objects, &e.train_config(strategy, cfg.seed))?;
    checkpoint::save(&net.to_checkpoint(), &dir.join("checkpoint.bin"))?;
    write_with(&dir.join("metrics.tsv"), |w| log.write_tsv(w))?;
    write_with(&dir.join("selection.txt"), |w| refined.write_selection(w))?;
    echo_config(&cfg, &dir)?;
    let last = log.records.last().map_or(f64::NAN, |r| r.total);
    println!(
        "{}: {} iterations, final loss {}, {} activity epochs",
        cfg.strategy.name(),
        log.records.len(),
        textguided::tsv::format_sig(last, 6),
        log.activity_epochs
    );
    Ok(())
}

fn cmd_eval(checkpoint_path: &Path, common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.experiment.world.seed = seed;
    }
    let e = &cfg.experiment;
    let world = generate_world(&e.world)?;
    let mut net = build_network(
        world.activity_labels.len(),
        world.object_labels.len(),
        &e.trunk,
        0,
    )?;
    let params = checkpoint::load(checkpoint_path)
        .with_context(|| format!("reading checkpoint {}", checkpoint_path.display()))?;
    net.load_checkpoint(&params)?;
    let report = evaluate(&net, &world.test_clips, e.protocol, e.geometry.output_size)?;
    if let Some(dir) = &cfg.out_dir {
        fs::create_dir_all(dir)?;
        write_with(&dir.join("eval.tsv"), |w| report.write_tsv(w))?;
    }
    println!("accuracy\t{}", textguided::tsv::format_sig(report.accuracy(), 9));
    Ok(())
}

fn cmd_gradcheck(seed: u64) -> Result<bool> {
    const TOLERANCE: f64 = 1e-4;
    let reports = run_suite(seed)?;
    println!("op\tmax_rel_error\tchecked\tstatus");
    let mut ok = true;
    for r in &reports {
        let pass = r.passes(TOLERANCE);
        ok &= pass;
        println!(
            "{}\t{:.3e}\t{}\t{}",
            r.name,
            r.max_rel_error,
            r.checked,
            if pass { "pass" } else { "FAIL" }
        );
    }
    Ok(ok)
}

fn cmd_experiment(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    if let Some(seed) = common.seed {
        cfg.experiment.world.seed = seed;
    }
    let dir = out_dir(&cfg)?;
    echo_config(&cfg, &dir)?;
    let table = run_experiment(&cfg.experiment, |row| {
        eprintln!("{}\t{}\t{}", row.strategy, row.seed, textguided::tsv::format_sig(row.accuracy, 9));
    })?;
    write_with(&dir.join("results.tsv"), |w| table.write_tsv(w))?;
    table.write_tsv(&mut io::stdout().lock())?;
    Ok(())
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Embed {
            command: EmbedCommand::Inspect { path, tokens, format },
        } => cmd_embed_inspect(&path, &tokens, format)?,
        Command::Tra {
            activities,
            objects,
            embeddings,
            format,
            m,
            k,
            common,
        } => cmd_tra(activities, objects, embeddings, format, m, k, &common)?,
        Command::Synth { common } => cmd_synth(&common)?,
        Command::Train { strategy, common } => cmd_train(strategy, &common)?,
        Command::Eval { checkpoint, common } => cmd_eval(&checkpoint, &common)?,
        Command::Gradcheck { seed } => return cmd_gradcheck(seed),
        Command::Experiment { common } => cmd_experiment(&common)?,
    }
    Ok(true)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(exit_code(&err))
        }
    }
}
