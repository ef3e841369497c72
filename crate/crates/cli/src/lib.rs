//! Command implementations behind the `specrun-sim` binary. Every command
//! writes its artifacts under one output directory and returns the text it
//! wants on stdout; errors carry their exit code.

pub mod presets;

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use specrun_core::attacks::{
    measure_window, run_poc, AttackError, AttackOutcome, ParamError, PocParams, SearchError, Variant, WindowCase,
};
use specrun_core::config::{ConfigError, DefenseMode, SimConfig};
use specrun_core::isa::{assemble, parse_image, write_image, AsmError, ImageError, ProgramImage};
use specrun_core::uarch::{format_events, run, RunResult, SimError};
use thiserror::Error;

use presets::{gen_mlp_bench, Preset};

pub const OUT_ENV: &str = "SPECRUN_SIM_OUT";
pub const DEFAULT_OUT: &str = "specrun-out";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: {source}", path.display())]
    Asm { path: PathBuf, source: AsmError },
    #[error("{}: {source}", path.display())]
    Image { path: PathBuf, source: ImageError },
    #[error("config: {0}")]
    Config(#[from] ConfigError),
    #[error("bad --set `{0}`: expected key=value")]
    SetSyntax(String),
    #[error(transparent)]
    Param(#[from] ParamError),
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("expectation not met: {0}")]
    Mismatch(String),
    #[error("window search failed: {0}")]
    Search(SearchError),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io { .. } => 1,
            CliError::Asm { .. } | CliError::Image { .. } => 2,
            CliError::Config(_) | CliError::SetSyntax(_) | CliError::Param(_) | CliError::Sim(_) => 3,
            CliError::Mismatch(_) => 4,
            CliError::Search(_) => 5,
        }
    }
}

impl From<AttackError> for CliError {
    fn from(e: AttackError) -> Self {
        match e {
            AttackError::Param(e) => CliError::Param(e),
            AttackError::Asm(source) => CliError::Asm { path: "<generated>".into(), source },
            AttackError::Sim(e) => CliError::Sim(e),
        }
    }
}

impl From<SearchError> for CliError {
    fn from(e: SearchError) -> Self {
        match e {
            SearchError::Attack(e) => e.into(),
            e => CliError::Search(e),
        }
    }
}

pub type CliResult<T> = Result<T, CliError>;

/// `SPECRUN_SIM_OUT`, else the flag, else `specrun-out`.
pub fn resolve_out_dir(flag: Option<&Path>) -> PathBuf {
    match std::env::var_os(OUT_ENV) {
        Some(v) if !v.is_empty() => PathBuf::from(v),
        _ => flag.map_or_else(|| PathBuf::from(DEFAULT_OUT), Path::to_path_buf),
    }
}

/// Where a command writes, plus the manifest describing the invocation.
#[derive(Clone, Debug)]
pub struct Output {
    pub dir: PathBuf,
}

impl Output {
    pub fn create(dir: PathBuf) -> CliResult<Output> {
        fs::create_dir_all(&dir).map_err(|source| CliError::Io { path: dir.clone(), source })?;
        Ok(Output { dir })
    }

    pub fn write(&self, name: &str, text: &str) -> CliResult<PathBuf> {
        let path = self.dir.join(name);
        fs::write(&path, text).map_err(|source| CliError::Io { path: path.clone(), source })?;
        Ok(path)
    }

    /// Tool version, command and effective configuration; no timestamps, so
    /// repeated runs produce identical bytes.
    pub fn manifest(&self, command: &str, cfg: &SimConfig) -> CliResult<()> {
        let text = format!("tool specrun-sim {}\ncommand {command}\n{}", env!("CARGO_PKG_VERSION"), cfg.to_text());
        self.write("manifest.txt", &text).map(|_| ())
    }
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|source| CliError::Io { path: path.to_path_buf(), source })
}

/// Defaults, then the config file, then each `key=value` override.
pub fn build_config(file: Option<&Path>, sets: &[String]) -> CliResult<SimConfig> {
    let mut cfg = match file {
        Some(p) => SimConfig::parse(&read(p)?)?,
        None => SimConfig::default(),
    };
    for s in sets {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::SetSyntax(s.clone()))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `.img` files are parsed as images, anything else is assembled.
pub fn load_program(path: &Path) -> CliResult<ProgramImage> {
    let text = read(path)?;
    if path.extension().is_some_and(|e| e == "img") {
        parse_image(&text).map_err(|source| CliError::Image { path: path.to_path_buf(), source })
    } else {
        assemble(&text).map_err(|source| CliError::Asm { path: path.to_path_buf(), source })
    }
}

pub fn cmd_asm(input: &Path, output: Option<&Path>, out: &Output) -> CliResult<String> {
    let program = load_program(input)?;
    let text = write_image(&program);
    let path = match output {
        Some(p) => {
            fs::write(p, &text).map_err(|source| CliError::Io { path: p.to_path_buf(), source })?;
            p.to_path_buf()
        }
        None => {
            let stem = input.file_stem().map_or_else(|| "program".into(), |s| s.to_string_lossy().into_owned());
            out.write(&format!("{stem}.img"), &text)?
        }
    };
    Ok(format!("{} instructions, {} data bytes -> {}\n", program.instructions.len(), program.data_init.len(), path.display()))
}

/// Runs one program, writing `stats.txt` and, on request, `events.csv`.
pub fn cmd_run(program: &Path, cfg: SimConfig, events: bool, out: &Output) -> CliResult<String> {
    let image = load_program(program)?;
    out.manifest(&format!("run {}", program.display()), &cfg)?;
    let r = run(&image, cfg)?;
    write_run(&r, "stats.txt", events.then_some("events.csv"), out)?;
    Ok(r.stats_text())
}

fn write_run(r: &RunResult, stats: &str, events: Option<&str>, out: &Output) -> CliResult<()> {
    out.write(stats, &r.stats_text())?;
    if let Some(name) = events {
        out.write(name, &format_events(&r.events))?;
    }
    Ok(())
}

/// What `attack` must observe to exit 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expect {
    /// Leak with no defense and runahead on; nothing under a defense or
    /// with runahead off and the gadget padded past the ROB; else `Any`.
    Auto,
    Leak,
    Nothing,
    Any,
}

impl std::str::FromStr for Expect {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "auto" => Ok(Expect::Auto),
            "leak" => Ok(Expect::Leak),
            "none" => Ok(Expect::Nothing),
            "any" => Ok(Expect::Any),
            _ => Err(format!("unknown expectation `{s}` (auto, leak, none, any)")),
        }
    }
}

impl Expect {
    fn resolve(self, cfg: &SimConfig, nop_pad: usize) -> Expect {
        match self {
            Expect::Auto if cfg.defense.mode != DefenseMode::None => Expect::Nothing,
            Expect::Auto if cfg.runahead.enabled => Expect::Leak,
            Expect::Auto if nop_pad >= cfg.rob_entries => Expect::Nothing,
            Expect::Auto => Expect::Any,
            e => e,
        }
    }

    fn check(self, secret: u8, recovered: Option<usize>) -> Result<(), String> {
        match (self, recovered) {
            (Expect::Leak, Some(r)) if r == secret as usize => Ok(()),
            (Expect::Leak, got) => Err(format!("secret {secret}: expected a leak, recovered {got:?}")),
            (Expect::Nothing, Some(r)) => Err(format!("secret {secret}: expected no leak, recovered {r}")),
            _ => Ok(()),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttackArgs {
    pub variant: Variant,
    /// `None` sweeps all 256 secrets.
    pub secret: Option<u8>,
    pub nop_pad: usize,
    pub repeat_flush: u32,
    pub threshold: u64,
    pub expect: Expect,
}

fn attack_name(a: &AttackArgs, cfg: &SimConfig) -> String {
    let secret = a.secret.map_or_else(|| "all".to_string(), |s| s.to_string());
    let mut name = format!("attack_{}_{secret}_{}", a.variant, cfg.defense.mode);
    if a.nop_pad > 0 {
        let _ = write!(name, "_pad{}", a.nop_pad);
    }
    if !cfg.runahead.enabled {
        name.push_str("_norunahead");
    }
    name
}

fn poc(a: &AttackArgs, secret: u8, cfg: SimConfig) -> CliResult<AttackOutcome> {
    let p = PocParams { secret, nop_pad: a.nop_pad, variant: a.variant, repeat_flush: a.repeat_flush, ..Default::default() };
    let o = run_poc(&p, cfg, a.threshold)?;
    if !o.classification_agrees() {
        return Err(CliError::Mismatch(format!("secret {secret}: RDCYCLE timings disagree with the cache state")));
    }
    Ok(o)
}

/// One PoC, or a parallel sweep over every secret. Writes the probe CSV
/// (single) or a `secret,recovered` table (sweep).
pub fn cmd_attack(a: &AttackArgs, cfg: SimConfig, out: &Output) -> CliResult<String> {
    let name = attack_name(a, &cfg);
    out.manifest(&name, &cfg)?;
    let expect = a.expect.resolve(&cfg, a.nop_pad);
    match a.secret {
        Some(secret) => {
            let o = poc(a, secret, cfg)?;
            let csv = o.report.to_csv();
            out.write(&format!("{name}.csv"), &csv)?;
            write_run(&o.run, &format!("{name}_stats.txt"), None, out)?;
            expect.check(secret, o.report.recovered).map_err(CliError::Mismatch)?;
            Ok(csv)
        }
        None => {
            let results: Vec<(u8, Option<usize>)> = (0..=255u8)
                .into_par_iter()
                .map(|s| poc(a, s, cfg).map(|o| (s, o.report.recovered)))
                .collect::<CliResult<_>>()?;
            let mut table = String::from("secret,recovered\n");
            for (s, r) in &results {
                let _ = writeln!(table, "{s},{}", r.map_or_else(|| "none".to_string(), |r| r.to_string()));
            }
            out.write(&format!("{name}.csv"), &table)?;
            let exact = results.iter().filter(|(s, r)| *r == Some(*s as usize)).count();
            let any = results.iter().filter(|(_, r)| r.is_some()).count();
            let summary = format!("secrets 256\nrecovered_exact {exact}\nrecovered_any {any}\n");
            let failures: Vec<String> = results.iter().filter_map(|&(s, r)| expect.check(s, r).err()).collect();
            if let Some(first) = failures.first() {
                return Err(CliError::Mismatch(format!("{} of 256 secrets; first: {first}", failures.len())));
            }
            Ok(summary)
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct WindowArgs {
    /// `None` measures all three cases.
    pub case: Option<WindowCase>,
    pub lo: usize,
    pub hi: usize,
    pub repeat_flush: u32,
}

/// Measures N for one case, or N1 < N2 < N3 with `--all`. Writes `window.txt`.
pub fn cmd_window(a: &WindowArgs, cfg: SimConfig, out: &Output) -> CliResult<String> {
    let cases: Vec<WindowCase> = a.case.map_or_else(|| WindowCase::ALL.to_vec(), |c| vec![c]);
    out.manifest(&format!("window {}", a.case.map_or_else(|| "all".to_string(), |c| c.to_string())), &cfg)?;
    let ns: Vec<usize> = cases
        .par_iter()
        .map(|&c| measure_window(c, cfg, a.lo, a.hi, a.repeat_flush).map(|m| m.n))
        .collect::<Result<_, _>>()?;
    let mut text = String::new();
    for (c, n) in cases.iter().zip(&ns) {
        let _ = writeln!(text, "N{c} {n}");
    }
    out.write("window.txt", &text)?;
    if a.case.is_none() && !ns.windows(2).all(|w| w[0] < w[1]) {
        return Err(CliError::Mismatch(format!("window sizes not strictly increasing: {ns:?}")));
    }
    if a.case.is_none_or(|c| c == WindowCase::Rob) && ns[0] != cfg.rob_entries - 1 {
        return Err(CliError::Mismatch(format!("N1 = {} but the ROB holds {}", ns[0], cfg.rob_entries)));
    }
    Ok(text)
}

/// IPC of the memory-bound microbenchmark with runahead on and off.
pub fn cmd_bench(loads: usize, spacing: usize, cfg: SimConfig, out: &Output) -> CliResult<String> {
    let image = assemble(&gen_mlp_bench(loads, spacing)).map_err(|source| CliError::Asm { path: "<bench>".into(), source })?;
    out.manifest(&format!("bench {loads} {spacing}"), &cfg)?;
    let runs: Vec<RunResult> = [true, false]
        .par_iter()
        .map(|&on| {
            let mut c = cfg;
            c.runahead.enabled = on;
            run(&image, c)
        })
        .collect::<Result<_, _>>()?;
    let (on, off) = (&runs[0], &runs[1]);
    write_run(on, "stats_runahead_on.txt", None, out)?;
    write_run(off, "stats_runahead_off.txt", None, out)?;
    let gain = 100.0 * (on.ipc() / off.ipc() - 1.0);
    let text = format!("loads {loads}\nspacing {spacing}\nipc_runahead {:.6}\nipc_baseline {:.6}\nimprovement_pct {gain:.2}\n", on.ipc(), off.ipc());
    out.write("bench.txt", &text)?;
    if on.ipc() <= off.ipc() {
        return Err(CliError::Mismatch(format!("runahead IPC {:.6} does not exceed baseline {:.6}", on.ipc(), off.ipc())));
    }
    Ok(text)
}

/// Expands a preset into its command(s) and runs them.
pub fn cmd_preset(preset: Preset, cfg: SimConfig, out: &Output) -> CliResult<String> {
    let attack = |secret, nop_pad| AttackArgs {
        variant: Variant::Pht,
        secret: Some(secret),
        nop_pad,
        repeat_flush: 1,
        threshold: specrun_core::attacks::DEFAULT_THRESHOLD,
        expect: Expect::Auto,
    };
    let mut none = cfg;
    none.defense.mode = DefenseMode::None;
    match preset {
        Preset::Fig7 => cmd_attack(&attack(86, 0), none, out),
        Preset::Fig11Micro => cmd_bench(presets::BENCH_LOADS, presets::BENCH_SPACING, cfg, out),
        Preset::Fig17 => {
            let a = WindowArgs { case: None, lo: 0, hi: 8192, repeat_flush: presets::WINDOW_REPEAT_FLUSH };
            cmd_window(&a, cfg, out)
        }
        Preset::Fig22 => {
            let mut text = String::new();
            for on in [true, false] {
                let mut c = none;
                c.runahead.enabled = on;
                let csv = cmd_attack(&attack(127, presets::BEYOND_ROB_PAD), c, out)?;
                let trailer = csv.lines().last().unwrap_or_default();
                let _ = writeln!(text, "runahead_{} {trailer}", if on { "on" } else { "off" });
            }
            Ok(text)
        }
    }
}
