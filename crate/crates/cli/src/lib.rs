//! Command-line front end: dataset ingestion, configuration, and the
//! pretrain / train / eval / flops / gradcheck / selftest commands.

pub mod config;
pub mod data;

use std::ffi::OsString;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand, ValueEnum};
use simnet_core::checkpoint::{header_len, read_checkpoint, to_bytes, write_checkpoint, Checkpoint};
use simnet_core::flops::{count_costs, CostModel};
use simnet_core::network::{network_forward, NetworkSpec, ParamGroup};
use simnet_core::pretrain::pretrain_network;
use simnet_core::selftest::{micro_input, micro_network, run_selftest};
use simnet_core::training::{grad_check, softmax_loss, train, EpochMetrics, GradCheckOptions, LabeledSet};

use config::RunConfig;

#[derive(Debug, Parser)]
#[command(name = "simnet", version, about = "Train and inspect similarity networks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct Common {
    /// Run configuration file.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Hold out the last N training records for validation.
    #[arg(long, default_value_t = 0)]
    holdout: usize,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Split {
    Train,
    Holdout,
    Test,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Group {
    W,
    Z,
    U,
    P,
    BetaPool,
    BetaClass,
    B,
    BetaGlobal,
}

impl From<Group> for ParamGroup {
    fn from(g: Group) -> Self {
        match g {
            Group::W => ParamGroup::Whiten,
            Group::Z => ParamGroup::Templates,
            Group::U => ParamGroup::Weights,
            Group::P => ParamGroup::Order,
            Group::BetaPool => ParamGroup::PoolBeta,
            Group::BetaClass => ParamGroup::ClassBeta,
            Group::B => ParamGroup::Offsets,
            Group::BetaGlobal => ParamGroup::GlobalBeta,
        }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Unsupervised layer-by-layer initialization.
    Pretrain {
        #[command(flatten)]
        common: Common,
        /// Checkpoint to write.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Text report to write.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Supervised training.
    Train {
        #[command(flatten)]
        common: Common,
        /// Start from this checkpoint instead of a random network.
        #[arg(long)]
        init: Option<PathBuf>,
        /// Checkpoint to write; defaults to the configured output.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Per-epoch metrics (TSV).
        #[arg(long)]
        metrics: Option<PathBuf>,
        /// Write 0 in the wall_seconds column so reruns are byte-identical.
        #[arg(long)]
        no_timing: bool,
    },
    /// Accuracy and mean loss of a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "test")]
        split: Split,
        /// Images per evaluation chunk; does not change the result.
        #[arg(long, default_value_t = 256)]
        batch_size: usize,
    },
    /// Static operation and parameter counts.
    Flops {
        #[arg(long, conflicts_with = "checkpoint", required_unless_present = "checkpoint")]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Tab-separated output.
        #[arg(long)]
        tsv: bool,
    },
    /// Finite-difference check of the analytic gradients on the micro network.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Scale one group's analytic gradient by 1.1 to exercise the check.
        #[arg(long, value_enum)]
        corrupt: Option<Group>,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Built-in property checks.
    Selftest {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let text = std::fs::read_to_string(&common.config)
        .with_context(|| format!("reading {}", common.config.display()))?;
    let mut cfg = RunConfig::parse(&text).with_context(|| format!("in {}", common.config.display()))?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Where the per-channel means come from.
enum Means {
    /// Computed on the training split if the config asks for it.
    FromConfig,
    /// Stored with a checkpoint.
    Stored(Option<Vec<f64>>),
}

/// Training split minus the holdout, the holdout, and the channel means used.
fn prepare(cfg: &RunConfig, holdout: usize, means: Means) -> Result<(LabeledSet, LabeledSet, Option<Vec<f64>>)> {
    let all = data::load_train(&cfg.data)?;
    let (train, held) = all.split_tail(holdout).context("--holdout")?;
    ensure!(!train.is_empty(), "no training records left after holding out {holdout}");
    let means = match means {
        Means::FromConfig => cfg.data.mean_subtraction.then(|| data::channel_means(&train)),
        Means::Stored(m) => m,
    };
    Ok(match &means {
        Some(m) => (data::subtract_means(train, m)?, data::subtract_means(held, m)?, means),
        None => (train, held, None),
    })
}

fn check_dims(spec: &NetworkSpec, set: &LabeledSet) -> Result<()> {
    if let Some(im) = set.images().first() {
        ensure!(
            im.dims() == spec.input_dims(),
            "data is {:?} but the network expects {:?}",
            im.dims(),
            spec.input_dims()
        );
    }
    Ok(())
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn cmd_pretrain(common: &Common, out_path: Option<PathBuf>, report_path: Option<PathBuf>, out: &mut dyn Write) -> Result<()> {
    let cfg = load_config(common)?;
    let (train_set, _, means) = prepare(&cfg, common.holdout, Means::FromConfig)?;
    let spec = cfg.build_network()?;
    check_dims(&spec, &train_set)?;
    let (spec, report) = pretrain_network(train_set.images(), spec, &cfg.pretrain_options())?;
    let ck = Checkpoint {
        spec,
        channel_means: means,
    };
    let ck_path = out_path.unwrap_or_else(|| cfg.output.checkpoint.clone());
    write_checkpoint(&ck_path, &ck)?;
    let text = report.render();
    let report_path = report_path.unwrap_or_else(|| cfg.output.report.clone());
    std::fs::write(&report_path, &text).with_context(|| format!("writing {}", report_path.display()))?;
    write!(out, "{text}")?;
    writeln!(out, "checkpoint written to {}", ck_path.display())?;
    Ok(())
}

fn cmd_train(
    common: &Common,
    init: Option<PathBuf>,
    out_path: Option<PathBuf>,
    metrics_path: Option<PathBuf>,
    no_timing: bool,
    out: &mut dyn Write,
) -> Result<()> {
    let cfg = load_config(common)?;
    // a checkpoint carries its own preprocessing
    let (spec, means) = match &init {
        Some(path) => {
            let ck = read_checkpoint(path)?;
            (ck.spec, Means::Stored(ck.channel_means))
        }
        None => (cfg.build_network()?, Means::FromConfig),
    };
    let (train_set, held, means) = prepare(&cfg, common.holdout, means)?;
    check_dims(&spec, &train_set)?;
    let metrics_path = metrics_path.unwrap_or_else(|| cfg.output.metrics.clone());
    let mut metrics = create(&metrics_path)?;
    writeln!(metrics, "{}", EpochMetrics::TSV_HEADER)?;
    writeln!(out, "{}", EpochMetrics::TSV_HEADER)?;
    let mut io_error = None;
    let val = (!held.is_empty()).then_some(&held);
    let outcome = train(spec, &train_set, val, &cfg.train_config(), |m, _| {
        let mut m = m.clone();
        if no_timing {
            m.wall_seconds = 0.0;
        }
        let line = m.tsv_line();
        let result = writeln!(metrics, "{line}").and_then(|_| metrics.flush()).and_then(|_| writeln!(out, "{line}"));
        if let (Err(e), None) = (result, &io_error) {
            io_error = Some(e);
        }
    })?;
    if let Some(e) = io_error {
        return Err(e).context("writing metrics");
    }
    metrics.flush()?;
    let ck_path = out_path.unwrap_or_else(|| cfg.output.checkpoint.clone());
    write_checkpoint(
        &ck_path,
        &Checkpoint {
            spec: outcome.spec,
            channel_means: means,
        },
    )?;
    writeln!(out, "checkpoint written to {}", ck_path.display())?;
    Ok(())
}

fn cmd_eval(common: &Common, ck_path: &Path, split: Split, batch_size: usize, out: &mut dyn Write) -> Result<()> {
    ensure!(batch_size > 0, "--batch-size must be positive");
    let cfg = load_config(common)?;
    let ck = read_checkpoint(ck_path)?;
    let set = match split {
        Split::Train | Split::Holdout => {
            let (t, h, _) = prepare(&cfg, common.holdout, Means::Stored(ck.channel_means.clone()))?;
            if matches!(split, Split::Train) { t } else { h }
        }
        Split::Test => {
            let test = data::load_test(&cfg.data)?;
            match &ck.channel_means {
                Some(m) => data::subtract_means(test, m)?,
                None => test,
            }
        }
    };
    ensure!(!set.is_empty(), "the {split:?} split is empty");
    check_dims(&ck.spec, &set)?;
    let (mut correct, mut loss) = (0usize, 0.0);
    let idx: Vec<usize> = (0..set.len()).collect();
    for chunk in idx.chunks(batch_size) {
        for &i in chunk {
            let (image, label) = set.get(i);
            let scores = network_forward(image, &ck.spec)?;
            loss += softmax_loss(&scores, label)?.0;
            let best = scores
                .iter()
                .enumerate()
                .fold(0, |b, (j, s)| if *s > scores[b] { j } else { b });
            correct += usize::from(best == label);
        }
    }
    let n = set.len() as f64;
    writeln!(out, "split\t{}", format!("{split:?}").to_lowercase())?;
    writeln!(out, "samples\t{}", set.len())?;
    writeln!(out, "accuracy\t{:.6}", correct as f64 / n)?;
    writeln!(out, "mean_loss\t{:.6}", loss / n)?;
    Ok(())
}

fn cmd_flops(config: Option<PathBuf>, checkpoint: Option<PathBuf>, tsv: bool, out: &mut dyn Write) -> Result<()> {
    let ck = match (config, checkpoint) {
        (_, Some(path)) => read_checkpoint(path)?,
        (Some(path), None) => {
            let text = std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
            let cfg = RunConfig::parse(&text).with_context(|| format!("in {}", path.display()))?;
            cfg.validate()?;
            Checkpoint::new(cfg.build_network()?)
        }
        (None, None) => bail!("pass --config or --checkpoint"),
    };
    let report = count_costs(&ck.spec, ck.spec.input_dims(), &CostModel::default())?;
    if tsv {
        write!(out, "{}", report.render_tsv())?;
    } else {
        write!(out, "{}", report.render_table())?;
        let bytes = to_bytes(&ck)?.len();
        writeln!(
            out,
            "checkpoint: {bytes} bytes = {} header + 8 x {} parameters",
            header_len(&ck),
            report.total_params
        )?;
    }
    Ok(())
}

fn cmd_gradcheck(seed: u64, corrupt: Option<Group>, tolerance: f64, out: &mut dyn Write) -> Result<()> {
    let options = GradCheckOptions {
        tolerance,
        corrupt: corrupt.map(ParamGroup::from),
        ..GradCheckOptions::default()
    };
    let label = (seed % 3) as usize;
    let report = grad_check(&micro_network(seed), &micro_input(seed), label, &options)?;
    write!(out, "{}", report.render())?;
    if !report.passed() {
        let names: Vec<String> = report.failing().iter().map(|g| g.id.to_string()).collect();
        bail!("gradient check failed for {}", names.join(", "));
    }
    writeln!(out, "all {} parameter blocks within {tolerance:e}", report.groups.len())?;
    Ok(())
}

fn cmd_selftest(seed: u64, out: &mut dyn Write) -> Result<()> {
    let checks = run_selftest(seed);
    for c in &checks {
        writeln!(out, "{:<18} {}  {}", c.name, if c.passed { "ok" } else { "FAIL" }, c.detail)?;
    }
    let failed = checks.iter().filter(|c| !c.passed).count();
    if failed > 0 {
        bail!("{failed} self-test check(s) failed");
    }
    Ok(())
}

/// Runs one command line; returns the process exit status
/// (0 success, 1 failure, 2 usage error).
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            let text = e.render().to_string();
            let _ = if code == 0 { write!(out, "{text}") } else { write!(err, "{text}") };
            return code;
        }
    };
    let result = match cli.command {
        Command::Pretrain { common, out: o, report } => cmd_pretrain(&common, o, report, out),
        Command::Train {
            common,
            init,
            out: o,
            metrics,
            no_timing,
        } => cmd_train(&common, init, o, metrics, no_timing, out),
        Command::Eval {
            common,
            checkpoint,
            split,
            batch_size,
        } => cmd_eval(&common, &checkpoint, split, batch_size, out),
        Command::Flops { config, checkpoint, tsv } => cmd_flops(config, checkpoint, tsv, out),
        Command::Gradcheck {
            seed,
            corrupt,
            tolerance,
        } => cmd_gradcheck(seed, corrupt, tolerance, out),
        Command::Selftest { seed } => cmd_selftest(seed, out),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e:#}");
            1
        }
    }
}
