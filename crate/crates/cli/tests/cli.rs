use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use specrun_core::attacks::{gen_poc, PocParams, ProbeReport, Variant};
use specrun_core::isa::{assemble, disassemble, write_image};
use tempfile::TempDir;

fn sim(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_specrun-sim"))
        .env_remove("SPECRUN_SIM_OUT")
        .arg("--out")
        .arg(out)
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stat(text: &str, key: &str) -> f64 {
    text.lines().find_map(|l| l.strip_prefix(key)?.strip_prefix(' ')?.parse().ok()).unwrap_or_else(|| panic!("{key} in {text}"))
}

fn write(dir: &TempDir, name: &str, text: &str) -> String {
    let p = dir.path().join(name);
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn asm_writes_an_image() {
    let d = TempDir::new().unwrap();
    let src = write(&d, "p.s", "li r1, 2\nli r2, 3\nadd r3, r1, r2\nhalt\n");
    let o = sim(d.path(), &["asm", &src]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let img = fs::read_to_string(d.path().join("p.img")).unwrap();
    assert_eq!(img, write_image(&assemble("li r1, 2\nli r2, 3\nadd r3, r1, r2\nhalt\n").unwrap()));
}

#[test]
fn undefined_label_exits_2_naming_label_and_line() {
    let d = TempDir::new().unwrap();
    let src = write(&d, "bad.s", "li r1, 2\n\njmp nowhere\nhalt\n");
    let o = sim(d.path(), &["asm", &src]);
    assert_eq!(o.status.code(), Some(2));
    let e = stderr(&o);
    assert!(e.contains("nowhere") && e.contains("line 3"), "{e}");
}

#[test]
fn missing_input_exits_1() {
    let d = TempDir::new().unwrap();
    assert_eq!(sim(d.path(), &["asm", "/nonexistent/x.s"]).status.code(), Some(1));
    assert_eq!(sim(d.path(), &["run", "/nonexistent/x.s"]).status.code(), Some(1));
}

#[test]
fn image_round_trips_through_disassembly() {
    let mut sources = vec!["li r1, 2\nli r2, 3\nadd r3, r1, r2\nhalt\n".to_string()];
    for v in Variant::ALL {
        sources.push(gen_poc(&PocParams { variant: v, ..Default::default() }).unwrap());
    }
    for src in sources {
        let a = assemble(&src).unwrap();
        let b = assemble(&disassemble(&a)).unwrap();
        assert_eq!(write_image(&a), write_image(&b));
    }
}

#[test]
fn run_reports_committed_count_and_accepts_images() {
    let d = TempDir::new().unwrap();
    let src = write(&d, "p.s", "li r1, 2\nli r2, 3\nadd r3, r1, r2\nhalt\n");
    let o = sim(d.path(), &["run", &src, "--events"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let stats = fs::read_to_string(d.path().join("stats.txt")).unwrap();
    assert_eq!(stat(&stats, "committed"), 4.0);
    for key in ["cycles", "ipc", "runahead_episodes", "pseudo_retired"] {
        stat(&stats, key);
    }
    assert!(d.path().join("events.csv").exists());

    sim(d.path(), &["asm", &src]);
    let img = d.path().join("p.img");
    let o = sim(d.path(), &["run", img.to_str().unwrap()]);
    assert_eq!(stat(&stdout(&o), "committed"), 4.0);
}

#[test]
fn poc_program_enters_runahead() {
    let d = TempDir::new().unwrap();
    let src = write(&d, "poc.s", &gen_poc(&PocParams::default()).unwrap());
    let o = sim(d.path(), &["run", &src]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stat(&stdout(&o), "runahead_episodes") >= 1.0);
}

#[test]
fn config_errors_exit_3() {
    let d = TempDir::new().unwrap();
    let src = write(&d, "p.s", "halt\n");
    let cfg = write(&d, "c.cfg", "# typo below\ncore.rob_entriez = 12\n");
    let o = sim(d.path(), &["run", &src, "--config", &cfg]);
    assert_eq!(o.status.code(), Some(3));
    assert!(stderr(&o).contains("rob_entriez"));
    assert_eq!(sim(d.path(), &["run", &src, "--set", "core.width"]).status.code(), Some(3));
}

#[test]
fn simulation_failure_exits_3() {
    let d = TempDir::new().unwrap();
    let src = write(&d, "p.s", "li r1, 1\nloop:\nbne r1, r0, loop\nhalt\n");
    let o = sim(d.path(), &["run", &src, "--set", "core.max_cycles=500"]);
    assert_eq!(o.status.code(), Some(3));
}

#[test]
fn attack_pht_86_leaks() {
    let d = TempDir::new().unwrap();
    let o = sim(d.path(), &["attack", "pht", "86", "none"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(d.path().join("attack_pht_86_none.csv")).unwrap();
    assert_eq!(csv, stdout(&o));
    assert_eq!(csv.lines().count(), 257);
    assert_eq!(csv.lines().last(), Some("recovered,86,threshold,50"));
    let r = ProbeReport::parse_csv(&csv).unwrap();
    assert_eq!(r.latencies.iter().filter(|&&l| l < 50).count(), 1);
}

#[test]
fn attack_expectations_drive_exit_code() {
    let d = TempDir::new().unwrap();
    assert_eq!(sim(d.path(), &["attack", "pht", "86", "none", "--expect", "none"]).status.code(), Some(4));
    let o = sim(d.path(), &["attack", "pht", "86", "sl_cache"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).ends_with("recovered,none,threshold,50\n"));
    assert_eq!(sim(d.path(), &["attack", "pht", "86", "sl_cache", "--expect", "leak"]).status.code(), Some(4));
}

#[test]
fn padded_gadget_without_runahead_recovers_nothing() {
    let d = TempDir::new().unwrap();
    let o = sim(d.path(), &["attack", "pht", "127", "none", "--nop-pad", "300", "--no-runahead"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).ends_with("recovered,none,threshold,50\n"));
    let o = sim(d.path(), &["attack", "pht", "127", "none", "--nop-pad", "300"]);
    assert!(stdout(&o).ends_with("recovered,127,threshold,50\n"));
}

#[test]
fn bad_attack_arguments_are_usage_errors() {
    let d = TempDir::new().unwrap();
    for args in [["attack", "spectre", "1", "none"], ["attack", "pht", "256", "none"], ["attack", "pht", "1", "magic"]] {
        let o = sim(d.path(), &args);
        assert_eq!(o.status.code(), Some(2), "{args:?}");
    }
}

#[test]
fn window_cases() {
    let d = TempDir::new().unwrap();
    let o = sim(d.path(), &["window", "--case", "1"]);
    assert_eq!(stdout(&o), "N1 255\n");
    assert_eq!(fs::read_to_string(d.path().join("window.txt")).unwrap(), "N1 255\n");
    let o = sim(d.path(), &["window", "--case", "1", "--set", "core.rob_entries=64"]);
    assert_eq!(stdout(&o), "N1 63\n");
    let o = sim(d.path(), &["window", "--all"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let ns: Vec<f64> = ["N1", "N2", "N3"].iter().map(|k| stat(&stdout(&o), k)).collect();
    assert!(ns[0] < ns[1] && ns[1] < ns[2], "{ns:?}");
}

#[test]
fn window_bad_bounds_exit_5() {
    let d = TempDir::new().unwrap();
    let o = sim(d.path(), &["window", "--case", "2", "--hi", "50"]);
    assert_eq!(o.status.code(), Some(5));
    assert!(stderr(&o).contains("bracket"));
}

#[test]
fn bench_runahead_beats_baseline() {
    let d = TempDir::new().unwrap();
    let o = sim(d.path(), &["bench"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let on = fs::read_to_string(d.path().join("stats_runahead_on.txt")).unwrap();
    let off = fs::read_to_string(d.path().join("stats_runahead_off.txt")).unwrap();
    assert!(stat(&on, "ipc") > stat(&off, "ipc"));
    assert_eq!(stat(&on, "committed"), stat(&off, "committed"));
    assert!(stat(&stdout(&o), "improvement_pct") > 0.0);
}

#[test]
fn presets_run() {
    for (preset, file) in [("fig7", "attack_pht_86_none.csv"), ("fig11-micro", "bench.txt"), ("fig17", "window.txt"), ("fig22", "attack_pht_127_none_pad300_norunahead.csv")] {
        let d = TempDir::new().unwrap();
        let o = sim(d.path(), &["run", "--preset", preset]);
        assert_eq!(o.status.code(), Some(0), "{preset}: {}", stderr(&o));
        assert!(d.path().join(file).exists(), "{preset}");
    }
    let d = TempDir::new().unwrap();
    let o = sim(d.path(), &["run", "--preset", "fig22"]);
    assert_eq!(stdout(&o), "runahead_on recovered,127,threshold,50\nrunahead_off recovered,none,threshold,50\n");
}

#[test]
fn outputs_are_byte_identical_across_runs() {
    let (a, b) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    for d in [&a, &b] {
        let src = write(d, "poc.s", &gen_poc(&PocParams { variant: Variant::Btb, ..Default::default() }).unwrap());
        assert_eq!(sim(d.path(), &["run", &src, "--events"]).status.code(), Some(0));
        assert_eq!(sim(d.path(), &["attack", "rsb_flush", "9", "none"]).status.code(), Some(0));
    }
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert!(names.len() >= 6);
    for n in names {
        assert_eq!(fs::read(a.path().join(&n)).unwrap(), fs::read(b.path().join(&n)).unwrap(), "{n:?}");
    }
}

#[test]
fn env_var_overrides_out_flag() {
    let (flag, env) = (TempDir::new().unwrap(), TempDir::new().unwrap());
    let o = Command::new(env!("CARGO_BIN_EXE_specrun-sim"))
        .env("SPECRUN_SIM_OUT", env.path())
        .args(["--out", flag.path().to_str().unwrap(), "window", "--case", "1", "--set", "core.rob_entries=32"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(env.path().join("window.txt").exists());
    assert!(!flag.path().join("window.txt").exists());
}
