use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use tips_core::backtest::CostModel;
use tips_core::config::{CostSetting, DataSource, RunConfig};
use tips_core::pipeline::{self, ModelRef};
use tips_core::priors::BiasGroup;
use tips_core::{Error, Result};

#[derive(Parser, Debug)]
#[command(
    name = "tips",
    version,
    about = "Bias-specialized teachers, distilled student, ranking backtests"
)]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(short, long, global = true)]
    config: Option<PathBuf>,
    /// Run directory for caches, checkpoints and reports.
    #[arg(short, long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated seed list.
    #[arg(long, global = true, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long, global = true)]
    workers: Option<usize>,
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate and cache the configured synthetic market.
    Synth,
    /// Load an OHLCV CSV (date,symbol,open,high,low,close,volume) and cache it.
    Ingest {
        csv: PathBuf,
        #[arg(long, default_value_t = 5)]
        horizon: usize,
    },
    /// Train the selected teachers for every seed, skipping up-to-date ones.
    TrainTeachers {
        #[command(flatten)]
        teachers: TeacherFlags,
    },
    /// Distill the teachers of every seed into a student.
    Distill {
        #[command(flatten)]
        teachers: TeacherFlags,
        #[command(flatten)]
        distill: DistillFlags,
    },
    /// Backtest a student tag, a teacher kind, or the teacher ensemble.
    Backtest {
        /// Student tag (default: the configured student) or teacher kind.
        #[arg(long)]
        model: Option<String>,
        /// Average the teachers' logits instead.
        #[arg(long, conflicts_with = "model")]
        ensemble: bool,
        /// Cost preset (csi, nikkei, none) or `buy,sell,days`.
        #[arg(long)]
        costs: Option<String>,
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        window: Option<usize>,
        #[command(flatten)]
        teachers: TeacherFlags,
        #[command(flatten)]
        distill: DistillFlags,
    },
    /// Attribution, similarity, alignment and inference-cost diagnostics.
    Analyze {
        #[command(flatten)]
        teachers: TeacherFlags,
        #[command(flatten)]
        distill: DistillFlags,
    },
    /// Seed-averaged table of every backtest in the run directory.
    Report,
    /// Synth, train-teachers, distill and backtest in one go.
    Run,
}

#[derive(Args, Debug, Default)]
struct TeacherFlags {
    /// Comma-separated bias families: causality, locality, periodicity, vanilla.
    #[arg(long, value_delimiter = ',')]
    subset: Option<Vec<String>>,
    #[arg(long)]
    teacher_epochs: Option<usize>,
}

#[derive(Args, Debug, Default)]
struct DistillFlags {
    #[arg(long)]
    temp: Option<f64>,
    #[arg(long)]
    smoothing: Option<f64>,
    #[arg(long)]
    no_ls: bool,
    #[arg(long)]
    no_swa: bool,
    /// Weight of the distillation term against the ranking loss.
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    student_epochs: Option<usize>,
    #[arg(long)]
    swa_epochs: Option<usize>,
}

fn parse_group(s: &str) -> Result<BiasGroup> {
    BiasGroup::ALL
        .into_iter()
        .find(|g| g.name() == s)
        .ok_or_else(|| Error::config(format!("unknown bias family `{s}`")))
}

fn parse_costs(s: &str) -> Result<CostSetting> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() == 3 {
        let num = |p: &str| {
            p.trim()
                .parse::<f64>()
                .map_err(|_| Error::config(format!("bad cost `{s}`")))
        };
        let days = parts[2]
            .trim()
            .parse()
            .map_err(|_| Error::config(format!("bad cost `{s}`")))?;
        return Ok(CostSetting::Custom(CostModel::new(
            num(parts[0])?,
            num(parts[1])?,
            days,
        )?));
    }
    CostModel::preset(s)?;
    Ok(CostSetting::Preset(s.to_string()))
}

impl TeacherFlags {
    fn apply(&self, cfg: &mut RunConfig) -> Result<()> {
        if let Some(groups) = &self.subset {
            cfg.teachers.groups = groups
                .iter()
                .map(|g| parse_group(g))
                .collect::<Result<_>>()?;
        }
        if let Some(e) = self.teacher_epochs {
            cfg.teachers.train.epochs = e;
        }
        Ok(())
    }
}

impl DistillFlags {
    fn apply(&self, cfg: &mut RunConfig) {
        let d = &mut cfg.distill;
        if let Some(t) = self.temp {
            d.temperature = t;
        }
        if let Some(e) = self.smoothing {
            d.smoothing = e;
        }
        if self.no_ls {
            d.use_ls = false;
        }
        if self.no_swa {
            d.use_swa = false;
        }
        if let Some(l) = self.lambda {
            d.lambda = l;
        }
        if let Some(n) = self.student_epochs {
            d.total_epochs = n;
            d.swa_epochs = d.swa_epochs.min(n);
        }
        if let Some(n) = self.swa_epochs {
            d.swa_epochs = n;
        }
    }
}

fn build_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    if let Some(o) = &cli.out {
        cfg.out_dir = o.clone();
    }
    if let Some(s) = &cli.seeds {
        cfg.seeds = s.clone();
    }
    if cli.workers.is_some() {
        cfg.workers = cli.workers;
    }
    match &cli.cmd {
        Cmd::Ingest { csv, horizon } => {
            cfg.data = DataSource::Csv {
                path: csv.clone(),
                horizon_q: *horizon,
            }
        }
        Cmd::TrainTeachers { teachers } => teachers.apply(&mut cfg)?,
        Cmd::Distill { teachers, distill } | Cmd::Analyze { teachers, distill } => {
            teachers.apply(&mut cfg)?;
            distill.apply(&mut cfg);
        }
        Cmd::Backtest {
            costs,
            k,
            window,
            teachers,
            distill,
            ..
        } => {
            teachers.apply(&mut cfg)?;
            distill.apply(&mut cfg);
            if let Some(c) = costs {
                cfg.backtest.costs = parse_costs(c)?;
            }
            if let Some(k) = k {
                cfg.backtest.k = *k;
            }
            if let Some(w) = window {
                cfg.backtest.window = *w;
            }
        }
        Cmd::Synth | Cmd::Report | Cmd::Run => {}
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    let cfg = build_config(&cli)?;
    pipeline::apply_workers(cfg.workers)?;
    match &cli.cmd {
        Cmd::Synth => {
            if !matches!(cfg.data, DataSource::Synthetic { .. }) {
                return Err(Error::config("synth needs a synthetic data source"));
            }
            let (_, s) = pipeline::prepare_data(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::Ingest { .. } => {
            let (_, s) = pipeline::prepare_data(&cfg)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
        Cmd::TrainTeachers { .. } => {
            let panel = pipeline::load_panel(&cfg)?;
            for &seed in &cfg.seeds {
                let r = pipeline::train_teachers_stage(&cfg, &panel, seed)?;
                let names = |v: &[tips_core::priors::PriorKind]| {
                    v.iter().map(|k| k.name()).collect::<Vec<_>>().join(",")
                };
                println!(
                    "seed {seed}: trained [{}] reused [{}]",
                    names(&r.trained),
                    names(&r.reused)
                );
            }
        }
        Cmd::Distill { .. } => {
            let panel = pipeline::load_panel(&cfg)?;
            for &seed in &cfg.seeds {
                let m = pipeline::distill_stage(&cfg, &panel, seed)?;
                println!(
                    "seed {seed}: student `{}` valid rho {:.4} ({} snapshots averaged)",
                    m.tag, m.report.final_valid_rho, m.report.snapshots_averaged
                );
            }
        }
        Cmd::Backtest {
            model, ensemble, ..
        } => {
            let panel = pipeline::load_panel(&cfg)?;
            let target = if *ensemble {
                ModelRef::Ensemble
            } else {
                ModelRef::parse(model.as_deref().unwrap_or(&pipeline::student_tag(&cfg)))
            };
            for &seed in &cfg.seeds {
                let r = pipeline::backtest_stage(&cfg, &panel, seed, &target)?;
                println!(
                    "seed {seed} {}: AR {:.4} SR {} CR {:.3} MDD {:.4} | net AR {:.4}",
                    r.model,
                    r.gross.annual_return,
                    r.gross.sharpe.map_or("n/a".into(), |s| format!("{s:.3}")),
                    r.gross.calmar,
                    r.gross.max_drawdown,
                    r.net.annual_return
                );
            }
        }
        Cmd::Analyze { .. } => {
            let panel = pipeline::load_panel(&cfg)?;
            let (a, cost) = pipeline::analyze(&cfg, &panel)?;
            if a.low_power {
                eprintln!(
                    "warning: {} of {} seeds available; low power",
                    a.seeds.len(),
                    cfg.seeds.len()
                );
            }
            println!("{}", serde_json::to_string_pretty(&a)?);
            println!(
                "inference: student {} pass(es) {:.4}s vs ensemble {} passes {:.4}s (ratio {:.3})",
                cost.student_passes,
                cost.student_secs,
                cost.ensemble_passes,
                cost.ensemble_secs,
                cost.ratio
            );
        }
        Cmd::Report => {
            print!(
                "{}",
                pipeline::render_report(&pipeline::collect_report(&cfg)?)
            );
        }
        Cmd::Run => {
            let path = pipeline::run_pipeline(&cfg)?;
            print!(
                "{}",
                pipeline::render_report(&pipeline::collect_report(&cfg)?)
            );
            println!("metrics: {}", path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
