use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use specrun_core::attacks::{Variant, WindowCase, DEFAULT_THRESHOLD};
use specrun_core::config::DefenseMode;
use specrun_sim::presets::{Preset, BENCH_LOADS, BENCH_SPACING};
use specrun_sim::*;

#[derive(Parser)]
#[command(name = "specrun-sim", version, about = "Out-of-order core simulator with runahead execution and speculative-attack experiments")]
struct Cli {
    /// Output directory; SPECRUN_SIM_OUT takes precedence.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct SimArgs {
    /// `key = value` config file applied over the defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Individual overrides, applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a source file into a program image.
    Asm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Simulate a program (source or .img), or run a named experiment.
    Run {
        #[arg(required_unless_present = "preset", conflicts_with = "preset")]
        program: Option<PathBuf>,
        /// fig7, fig11-micro, fig17 or fig22.
        #[arg(long)]
        preset: Option<Preset>,
        /// Also write events.csv.
        #[arg(long)]
        events: bool,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Generate and run a proof-of-concept attack.
    Attack {
        /// pht, btb, rsb_overwrite or rsb_flush.
        variant: Variant,
        /// Secret byte, or `all` for the 256-secret sweep.
        #[arg(value_parser = parse_secret)]
        secret: SecretArg,
        /// none, sl_cache or skip_inv_branch.
        #[arg(value_parser = parse_defense)]
        defense: DefenseMode,
        #[arg(long, default_value_t = 0)]
        nop_pad: usize,
        #[arg(long)]
        no_runahead: bool,
        #[arg(long, default_value_t = 1)]
        repeat_flush: u32,
        #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
        threshold: u64,
        /// auto, leak, none or any; a mismatch exits with 4.
        #[arg(long, default_value = "auto")]
        expect: Expect,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Measure a transient window by binary search.
    Window {
        /// 1 (ROB), 2 (runahead) or 3 (runahead with restarts).
        #[arg(long, value_parser = parse_case, required_unless_present = "all", conflicts_with = "all")]
        case: Option<WindowCase>,
        /// Measure all three and check N1 < N2 < N3.
        #[arg(long)]
        all: bool,
        #[arg(long, default_value_t = 0)]
        lo: usize,
        #[arg(long, default_value_t = 8192)]
        hi: usize,
        #[arg(long, default_value_t = 3)]
        repeat_flush: u32,
        #[command(flatten)]
        sim: SimArgs,
    },
    /// Memory-bound microbenchmark, runahead on vs off.
    Bench {
        #[arg(long, default_value_t = BENCH_LOADS)]
        loads: usize,
        #[arg(long, default_value_t = BENCH_SPACING)]
        spacing: usize,
        #[command(flatten)]
        sim: SimArgs,
    },
}

#[derive(Clone, Copy)]
struct SecretArg(Option<u8>);

fn parse_secret(s: &str) -> Result<SecretArg, String> {
    if s == "all" {
        return Ok(SecretArg(None));
    }
    s.parse().map(|v| SecretArg(Some(v))).map_err(|_| format!("`{s}` is not a byte or `all`"))
}

fn parse_defense(s: &str) -> Result<DefenseMode, String> {
    s.parse().map_err(|_| format!("unknown defense `{s}` (none, sl_cache, skip_inv_branch)"))
}

fn parse_case(s: &str) -> Result<WindowCase, String> {
    s.parse().ok().and_then(WindowCase::from_number).ok_or_else(|| format!("case must be 1, 2 or 3, got `{s}`"))
}

fn dispatch(cli: Cli) -> CliResult<String> {
    let out = || Output::create(resolve_out_dir(cli.out.as_deref()));
    let cfg = |s: &SimArgs| build_config(s.config.as_deref(), &s.sets);
    match &cli.cmd {
        Cmd::Asm { input, output } => cmd_asm(input, output.as_deref(), &out()?),
        Cmd::Run { program, preset, events, sim } => {
            let (c, o) = (cfg(sim)?, out()?);
            match (preset, program) {
                (Some(p), _) => cmd_preset(*p, c, &o),
                (None, Some(path)) => cmd_run(path, c, *events, &o),
                (None, None) => unreachable!("clap requires one of program or --preset"),
            }
        }
        Cmd::Attack { variant, secret, defense, nop_pad, no_runahead, repeat_flush, threshold, expect, sim } => {
            let mut c = cfg(sim)?;
            c.defense.mode = *defense;
            if *no_runahead {
                c.runahead.enabled = false;
            }
            let a = AttackArgs {
                variant: *variant,
                secret: secret.0,
                nop_pad: *nop_pad,
                repeat_flush: *repeat_flush,
                threshold: *threshold,
                expect: *expect,
            };
            cmd_attack(&a, c, &out()?)
        }
        Cmd::Window { case, all: _, lo, hi, repeat_flush, sim } => {
            let a = WindowArgs { case: *case, lo: *lo, hi: *hi, repeat_flush: *repeat_flush };
            cmd_window(&a, cfg(sim)?, &out()?)
        }
        Cmd::Bench { loads, spacing, sim } => cmd_bench(*loads, *spacing, cfg(sim)?, &out()?),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse()) {
        Ok(text) => {
            print!("{text}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("specrun-sim: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
