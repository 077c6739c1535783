#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use lfsa_core::docs::{assign_document, cost_report, parse_scene, render_cost_table, to_json};
use lfsa_core::gradcheck::{run_scope, GradCheckOptions, Scope};
use lfsa_core::lfsa::{full_attention_macs, lfsa_attention_macs};
use lfsa_core::toy::{format_curve, train, window_means};
use lfsa_core::{lfsa_cost, lfsa_forward, Error, HeadVariant, LfsaParams, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use config::{Config, ReportFormat};

/// Exit status for failed checks and numeric failures.
const EXIT_CHECK: u8 = 1;
/// Exit status for usage, configuration and input errors.
const EXIT_USAGE: u8 = 2;
const WINDOW: usize = 25;

#[derive(Parser)]
#[command(name = "lfsa", version, about = "Row/column attention, detection head costs and label assignment")]
struct Cli {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ScopeArg {
    Primitive,
    Lfsa,
    End2end,
}

#[derive(Subcommand)]
enum Command {
    /// Finite-difference gradient checks.
    Gradcheck {
        #[arg(long, value_enum)]
        scope: ScopeArg,
        #[arg(long)]
        seed: Option<u64>,
        /// Relative bias added to analytic gradients.
        #[arg(long, hide = true, default_value_t = 0.0)]
        inject_fault: f64,
    },
    /// Parameter and MAC/FLOP costs of the coupled, decoupled and efficient heads.
    CostReport {
        #[arg(long, value_enum)]
        format: Option<ReportFormat>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Label assignment for a JSON scene document.
    Assign {
        scene: PathBuf,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Trains the toy detector and writes its loss curve.
    TrainToy {
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Times the attention layer and compares attention-stage MACs.
    Bench {
        /// `C,H,W`; repeatable.
        #[arg(long = "size", value_parser = parse_size)]
        sizes: Vec<(usize, usize, usize)>,
        #[arg(long, default_value_t = 3)]
        reps: usize,
    },
    /// Prints the default configuration as TOML.
    PrintConfig,
}

fn parse_size(s: &str) -> Result<(usize, usize, usize), String> {
    let parts: Vec<usize> =
        s.split(',').map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}"))).collect::<Result<_, _>>()?;
    match parts[..] {
        [c, h, w] if c > 0 && h > 0 && w > 0 => Ok((c, h, w)),
        _ => Err(format!("expected three positive integers C,H,W, got {s:?}")),
    }
}

fn emit(text: &str, output: Option<&Path>) -> anyhow::Result<()> {
    match output {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<bool> {
    let config = Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::Gradcheck { scope, seed, inject_fault } => {
            let scope = match scope {
                ScopeArg::Primitive => Scope::Primitive,
                ScopeArg::Lfsa => Scope::Lfsa,
                ScopeArg::End2end => Scope::End2end,
            };
            let opts =
                GradCheckOptions { seed: seed.unwrap_or(config.seed), fault: inject_fault, ..Default::default() };
            let report = run_scope(scope, &opts)?;
            for e in &report.entries {
                let tag = if e.rel_error <= report.tolerance { "ok" } else { "FAIL" };
                println!("{:<20} {:.3e} {tag}", e.name, e.rel_error);
            }
            let verdict = if report.passed() { "PASS" } else { "FAIL" };
            println!(
                "{} max relative error {:.3e} (tolerance {:.0e}) {verdict}",
                scope.name(),
                report.worst(),
                report.tolerance
            );
            Ok(report.passed())
        }
        Command::CostReport { format, output } => {
            let doc =
                cost_report(&config.levels, &config.head_spec(HeadVariant::Dh), &config.head_spec(HeadVariant::Edh))?;
            let text = match format.unwrap_or(config.report_format) {
                ReportFormat::Json => to_json(&doc)?,
                ReportFormat::Text => render_cost_table(&doc),
            };
            emit(&text, output.as_deref())?;
            Ok(true)
        }
        Command::Assign { scene, lambda, output } => {
            let text = std::fs::read_to_string(&scene).with_context(|| format!("reading {}", scene.display()))?;
            let doc = parse_scene(&text).map_err(|e| Error::Input(format!("{}: {e}", scene.display())))?;
            emit(&to_json(&assign_document(&doc, lambda)?)?, output.as_deref())?;
            Ok(true)
        }
        Command::TrainToy { steps, lr, seed, out } => {
            let toy = &config.toy;
            let steps = steps.unwrap_or(toy.steps);
            let lr = lr.unwrap_or(toy.lr);
            let (curve, _) = train(toy, steps, lr, seed.unwrap_or(toy.seed))?;
            std::fs::write(&out, format_curve(&curve)).with_context(|| format!("writing {}", out.display()))?;
            if curve.len() < 2 * WINDOW {
                println!("{} steps written; decrease criterion needs at least {} steps", curve.len(), 2 * WINDOW);
                return Ok(true);
            }
            let (first, last) = window_means(&curve, WINDOW);
            let pass = last <= 0.5 * first;
            println!("initial window mean {first:.6}");
            println!("final window mean {last:.6}");
            println!(
                "final/initial = {:.4} {} 0.5 {}",
                last / first,
                if pass { "<=" } else { ">" },
                if pass { "PASS" } else { "FAIL" }
            );
            Ok(pass)
        }
        Command::Bench { sizes, reps } => {
            let sizes =
                if sizes.is_empty() { vec![(1, 1, 1), (16, 20, 20), (32, 40, 40), (64, 40, 40)] } else { sizes };
            bench(&sizes, reps.max(1), config.seed)?;
            Ok(true)
        }
        Command::PrintConfig => {
            print!("{}", toml::to_string(&Config::default())?);
            Ok(true)
        }
    }
}

struct BenchRow {
    size: (usize, usize, usize),
    total_macs: u64,
    attention: u64,
    full: u64,
    millis: f64,
}

fn bench(sizes: &[(usize, usize, usize)], reps: usize, seed: u64) -> anyhow::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::with_capacity(sizes.len());
    for &(c, h, w) in sizes {
        let params = LfsaParams::random(c, 0.1, &mut rng);
        let x = Tensor::uniform(&[c, h, w], -1.0, 1.0, &mut rng);
        let start = Instant::now();
        for _ in 0..reps {
            lfsa_forward(&x, &params)?;
        }
        let millis = start.elapsed().as_secs_f64() * 1e3 / reps as f64;
        let (cu, hu, wu) = (c as u64, h as u64, w as u64);
        rows.push(BenchRow {
            size: (c, h, w),
            total_macs: lfsa_cost(c, h, w).macs,
            attention: lfsa_attention_macs(cu, hu, wu),
            full: full_attention_macs(cu, hu, wu),
            millis,
        });
    }
    rows.sort_by_key(|r| (r.total_macs, r.size));
    println!(
        "{:>14} {:>14} {:>16} {:>18} {:>8} {:>12}",
        "C,H,W", "total_macs", "attn_macs", "full_attn_macs", "ratio", "forward_ms"
    );
    for r in rows {
        let (c, h, w) = r.size;
        println!(
            "{:>14} {:>14} {:>16} {:>18} {:>8.4} {:>12.3}",
            format!("{c},{h},{w}"),
            r.total_macs,
            r.attention,
            r.full,
            r.attention as f64 / r.full as f64,
            r.millis
        );
    }
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Numeric(_) | Error::Contract(_)) => EXIT_CHECK,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(EXIT_CHECK),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
