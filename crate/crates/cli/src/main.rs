use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use soctrace::catalog::{load_catalog, Catalog, FlowSet};
use soctrace::lpn::EventLabel;
use soctrace::report::{sweep_table, AnalysisReport};
use soctrace::scenario::{check_compliance, AnalysisError, Limits, ViewLevel};
use soctrace::select::{evaluate, select_events, strategy_mask, Strategy};
use soctrace::sim::{inject_bug, simulate, BugSpec, GroundTruth, SimConfig};
use soctrace::trace::{Message, SelectionMask, SignalTrace};

#[derive(Parser)]
#[command(name = "soctrace", version, about = "Reconstruct SoC flow execution scenarios from signal traces")]
struct Cli {
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Args, Clone)]
struct CatalogArg {
    /// Catalog manifest or flow files; the bundled catalog when omitted.
    #[arg(long = "catalog")]
    catalog: Vec<PathBuf>,
}

impl CatalogArg {
    fn load(&self) -> Result<FlowSet> {
        let cat = if self.catalog.is_empty() {
            Catalog::bundled()
        } else {
            load_catalog(&self.catalog)?
        };
        Ok(FlowSet::new(cat)?)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ReportFormat {
    Text,
    Json,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate the SoC and write a trace plus ground truth.
    Simulate {
        #[command(flatten)]
        catalog: CatalogArg,
        #[arg(long)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        budget: usize,
        #[arg(long, default_value_t = 0.1)]
        probability: f64,
        /// Only these templates (comma separated).
        #[arg(long, value_delimiter = ',')]
        templates: Vec<String>,
        /// Only these initiating blocks (comma separated).
        #[arg(long, value_delimiter = ',')]
        blocks: Vec<String>,
        /// Allow several outstanding cached accesses per CPU.
        #[arg(long)]
        no_blocking_cache: bool,
        /// Replace one event occurrence, e.g. `swap:Mem:Bus:rd_resp=Cache_0:CPU_0:rd_resp@last`.
        #[arg(long)]
        inject_bug: Option<String>,
        #[arg(long, default_value = "trace.txt")]
        out: PathBuf,
        #[arg(long, default_value = "truth.txt")]
        truth: PathBuf,
    },
    /// Encode an event list (one step per line) as a trace.
    Encode {
        #[command(flatten)]
        catalog: CatalogArg,
        #[arg(long)]
        events: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a trace against the catalog and report scenarios.
    Analyze {
        #[command(flatten)]
        catalog: CatalogArg,
        #[arg(long)]
        trace: PathBuf,
        #[arg(long, conflicts_with = "strategy")]
        mask: Option<PathBuf>,
        /// Selection strategy; S1 when neither this nor --mask is given.
        #[arg(long)]
        strategy: Option<String>,
        #[arg(long, default_value_t = 1_000_000)]
        max_scenarios: usize,
        /// Seconds.
        #[arg(long)]
        time_limit: Option<f64>,
        #[arg(long = "type", default_value_t = 3, value_parser = clap::value_parser!(u8).range(1..=3))]
        level: u8,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
        /// Print wall time to stderr.
        #[arg(long)]
        timing: bool,
    },
    /// Write the selection mask of a strategy.
    Select {
        #[command(flatten)]
        catalog: CatalogArg,
        #[arg(long)]
        strategy: String,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also list the selected events per flow.
        #[arg(long)]
        events: bool,
    },
    /// Evaluate every strategy of the matrix on one trace.
    Sweep {
        #[command(flatten)]
        catalog: CatalogArg,
        #[arg(long)]
        trace: PathBuf,
        /// Ground-truth sidecar for the membership column.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = 1_000_000)]
        max_scenarios: usize,
        /// Seconds per cell.
        #[arg(long, default_value_t = 600.0)]
        time_limit: f64,
        #[arg(long, value_enum, default_value = "text")]
        report: ReportFormat,
        #[arg(long)]
        timing: bool,
    },
}

fn read(p: &Path) -> Result<String> {
    fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))
}

fn write(p: &Path, s: &str) -> Result<()> {
    fs::write(p, s).with_context(|| format!("writing {}", p.display()))
}

fn seconds(s: f64) -> Result<Duration> {
    if !(s.is_finite() && s > 0.0) {
        bail!("time limit must be a positive number of seconds");
    }
    Ok(Duration::from_secs_f64(s))
}

fn run(cli: Cli) -> Result<u8> {
    match cli.cmd {
        Command::Simulate {
            catalog,
            seed,
            budget,
            probability,
            templates,
            blocks,
            no_blocking_cache,
            inject_bug: bug,
            out,
            truth,
        } => {
            let fs = catalog.load()?;
            let cfg = SimConfig {
                seed,
                budget,
                probability,
                blocking_cache: !no_blocking_cache,
                templates,
                blocks,
                ..Default::default()
            };
            let (mut trace, gt) = simulate(&fs, &cfg)?;
            if let Some(spec) = bug {
                let spec = BugSpec::parse(&spec)?;
                let (t, step) = inject_bug(&fs, &trace, &spec)?;
                trace = t;
                println!("injected bug at step {step}");
            }
            write(&out, &trace.to_text())?;
            write(&truth, &gt.to_text())?;
            let mut per_block = std::collections::BTreeMap::new();
            for i in &gt.instances {
                let f = fs.flow_by_name(&i.flow).expect("simulated flow exists");
                *per_block.entry(fs.flows[f].initiator.clone()).or_insert(0) += 1;
            }
            println!("cycles: {}", trace.len());
            println!("instances: {}", gt.instances.len());
            for (b, n) in per_block {
                println!("  {b}: {n}");
            }
            Ok(0)
        }
        Command::Encode { catalog, events, out } => {
            let fs = catalog.load()?;
            let mut steps = Vec::new();
            for (i, raw) in read(&events)?.lines().enumerate() {
                let line = raw.split('#').next().unwrap_or("").trim();
                if line.is_empty() {
                    continue;
                }
                let mut msgs = Vec::new();
                if line != "-" {
                    for tok in line.split_whitespace() {
                        msgs.push(parse_message(tok).with_context(|| format!("line {}", i + 1))?);
                    }
                }
                steps.push(msgs);
            }
            let trace = SignalTrace::from_messages(&fs.enc, &steps)?;
            write(&out, &trace.to_text())?;
            println!("steps: {}", trace.len());
            Ok(0)
        }
        Command::Analyze {
            catalog,
            trace,
            mask,
            strategy,
            max_scenarios,
            time_limit,
            level,
            report,
            timing,
        } => {
            let fs = catalog.load()?;
            let trace = SignalTrace::parse(&read(&trace)?)?;
            let mask = match (mask, strategy) {
                (Some(p), _) => SelectionMask::parse(&read(&p)?, &fs.enc)?,
                (None, s) => strategy_mask(&fs, &s.as_deref().unwrap_or("S1").parse::<Strategy>()?),
            };
            let limits = Limits {
                max_scenarios: max_scenarios.max(1),
                time_limit: time_limit.map(seconds).transpose()?,
            };
            match check_compliance(&fs, &trace, &mask, &limits) {
                Ok(out) => {
                    let lvl = ViewLevel::from_number(level).expect("range checked");
                    let r = AnalysisReport::new(&fs, &out, lvl);
                    match report {
                        ReportFormat::Text => print!("{}", r.to_text()),
                        ReportFormat::Json => println!("{}", r.to_json()),
                    }
                    if timing {
                        eprintln!("wall time: {:.3}s", out.metrics.wall_time.as_secs_f64());
                    }
                    if let Some(h) = &out.halt {
                        eprintln!("inconsistent trace: halt at step {} on link {} ({})", h.step, h.link, h.link_name);
                        return Ok(2);
                    }
                    Ok(0)
                }
                Err(e @ (AnalysisError::ComplexityExceeded { .. } | AnalysisError::TimeLimit { .. })) => {
                    eprintln!("{e}");
                    Ok(3)
                }
                Err(e) => Err(e.into()),
            }
        }
        Command::Select {
            catalog,
            strategy,
            out,
            events,
        } => {
            let fs = catalog.load()?;
            let st: Strategy = strategy.parse()?;
            let mask = strategy_mask(&fs, &st);
            let text = mask.to_text(&fs.enc);
            match out {
                Some(p) => write(&p, &text)?,
                None => print!("{text}"),
            }
            if events {
                let sel = select_events(&fs, st.mode);
                for f in &sel.flows {
                    let flow = &fs.flows[f.flow];
                    let names: Vec<String> = f
                        .transitions
                        .keys()
                        .map(|&t| flow.lpn().transition(t).name.clone())
                        .collect();
                    println!("events {}: {}", flow.name, names.join(","));
                }
            }
            eprintln!("{st}: {} bits", mask.count());
            Ok(0)
        }
        Command::Sweep {
            catalog,
            trace,
            truth,
            max_scenarios,
            time_limit,
            report,
            timing,
        } => {
            let fs = catalog.load()?;
            let trace = SignalTrace::parse(&read(&trace)?)?;
            let gt = truth.map(|p| read(&p).map(|t| GroundTruth::parse(&t))).transpose()?.transpose()?;
            let limits = Limits {
                max_scenarios: max_scenarios.max(1),
                time_limit: Some(seconds(time_limit)?),
            };
            let rows = Strategy::matrix()
                .par_iter()
                .map(|s| evaluate(&fs, s, &trace, gt.as_ref(), &limits))
                .collect::<Result<Vec<_>, _>>()?;
            match report {
                ReportFormat::Text => print!("{}", sweep_table(&rows, timing)),
                ReportFormat::Json => println!("{}", serde_json::to_string_pretty(&rows)?),
            }
            Ok(0)
        }
    }
}

/// `src:dest:cmd[/tag[/sid]]`
fn parse_message(tok: &str) -> Result<Message> {
    let mut parts = tok.split('/');
    let ev = parts.next().unwrap_or_default();
    let event = EventLabel::parse(ev).with_context(|| format!("bad event `{ev}`"))?;
    let num = |p: Option<&str>| -> Result<u64> {
        match p {
            None => Ok(0),
            Some(s) => s.parse().with_context(|| format!("bad number `{s}`")),
        }
    };
    let tag = num(parts.next())?;
    let sid = num(parts.next())?;
    if parts.next().is_some() {
        bail!("bad message `{tok}`");
    }
    Ok(Message {
        event,
        tag,
        sid,
        addr: 0,
        data: 0,
    })
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
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
