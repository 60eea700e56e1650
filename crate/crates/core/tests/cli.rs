use std::path::{Path, PathBuf};
use std::process::Command;

use rdfcil::cli::{run_cli, EXIT_CONFIG, EXIT_OK, EXIT_RUNTIME};
use rdfcil::config::{load_config, ExperimentConfig};
use rdfcil::metrics::{aggregate_runs, RunReport};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_rdfcil"))
}

fn cli(args: &[&str]) -> i32 {
    run_cli(std::iter::once("rdfcil").chain(args.iter().copied()))
}

fn path_str(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// metrics.csv without the timestamp column.
fn metrics_body(dir: &Path) -> Vec<String> {
    std::fs::read_to_string(dir.join("metrics.csv"))
        .unwrap()
        .lines()
        .map(|l| l.rsplit_once(',').unwrap().0.to_string())
        .collect()
}

#[test]
fn toy_run_writes_one_metrics_row_per_phase() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(cli(&["run", "--set", "preset=toy", "--seeds", "0", "--out", path_str(&out)]), EXIT_OK);
    let seed = out.join("seed_0");
    let rows = metrics_body(&seed);
    assert_eq!(rows.len(), 1 + 2);
    for f in ["config.lock", "events.log", "report.json", "phase_1/checkpoint.json", "phase_2/checkpoint.json", "phase_2/generator.json"] {
        assert!(seed.join(f).exists(), "{}", f);
    }
    assert!(out.join("summary.txt").exists());
    let r = RunReport::load(&seed.join("report.json")).unwrap();
    assert!(r.is_complete());
}

#[test]
fn override_is_visible_in_the_lock() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(
        cli(&["run", "--set", "preset=toy", "--set", "trainer.ablation.no_hkd=true", "--out", path_str(&out)]),
        EXIT_OK
    );
    let lock = std::fs::read_to_string(out.join("seed_0/config.lock")).unwrap();
    assert!(lock.contains("no_hkd = true"), "{}", lock);
    let cfg = ExperimentConfig::from_lock(&lock).unwrap();
    assert!(cfg.trainer.ablation.no_hkd);
}

#[test]
fn reruns_are_identical_apart_from_timestamps() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        assert_eq!(cli(&["run", "--set", "preset=toy", "--out", path_str(out)]), EXIT_OK);
    }
    assert_eq!(metrics_body(&a.join("seed_0")), metrics_body(&b.join("seed_0")));
    let ra = RunReport::load(&a.join("seed_0/report.json")).unwrap();
    let rb = RunReport::load(&b.join("seed_0/report.json")).unwrap();
    assert_eq!(ra.accuracies, rb.accuracies);
}

#[test]
fn lock_alone_reproduces_the_configuration_and_run() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("orig");
    assert_eq!(
        cli(&["run", "--set", "preset=toy", "--set", "trainer.lr=0.05", "--out", path_str(&out)]),
        EXIT_OK
    );
    let lock = out.join("config.lock");
    let cfg = load_config(Some(&lock), &[]).unwrap();
    assert_eq!(cfg, ExperimentConfig::from_lock(&std::fs::read_to_string(&lock).unwrap()).unwrap());
    assert_eq!(cfg.trainer.lr, 0.05);
    // same lock, run elsewhere
    let again = dir.path().join("again");
    assert_eq!(cli(&["run", "--config", path_str(&lock), "--out", path_str(&again)]), EXIT_OK);
    assert_eq!(metrics_body(&out.join("seed_0")), metrics_body(&again.join("seed_0")));
}

#[test]
fn overrides_beat_file_beat_preset() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("exp.toml");
    std::fs::write(
        &file,
        "preset = \"toy\"\n[trainer]\nlr = 0.05\nchr_epochs = 3\n[protocol]\nseeds = [4, 5]\n",
    )
    .unwrap();
    let preset = ExperimentConfig::preset("toy").unwrap();
    let from_file = load_config(Some(&file), &[]).unwrap();
    assert_eq!(from_file.trainer.lr, 0.05);
    assert_eq!(from_file.trainer.chr_epochs, 3);
    assert_eq!(from_file.trainer.rrl_epochs, preset.trainer.rrl_epochs);
    assert_eq!(from_file.protocol.seeds, vec![4, 5]);
    let both = load_config(Some(&file), &["trainer.lr=0.01".into(), "trainer.lr=0.02".into()]).unwrap();
    assert_eq!(both.trainer.lr, 0.02);
    assert_eq!(both.trainer.chr_epochs, 3);
    // --seeds is an override too
    let common = rdfcil::cli::Common {
        config: Some(file.clone()),
        seeds: Some("7,8".into()),
        out: Some(PathBuf::from("x")),
        ..Default::default()
    };
    let c = rdfcil::cli::resolve(&common).unwrap();
    assert_eq!(c.protocol.seeds, vec![7, 8]);
    assert_eq!(c.out, PathBuf::from("x"));
    // no file, no overrides: the default preset
    assert_eq!(load_config(None, &[]).unwrap(), ExperimentConfig::preset("desk").unwrap());
}

#[test]
fn dataset_kind_change_replaces_the_table() {
    let cfg = load_config(
        None,
        &[
            "preset=toy".into(),
            "dataset={kind = \"digits\"}".into(),
        ],
    )
    .unwrap();
    assert_eq!(cfg.dataset, rdfcil::data::DatasetSpec::Digits);
}

#[test]
fn exit_codes_distinguish_config_and_runtime_failures() {
    let dir = tempfile::tempdir().unwrap();
    let o = bin().args(["run", "--set", "trainer.bogus=1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trainer"));
    let o = bin().args(["run", "--set", "trainer.lr=-1"]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    assert!(String::from_utf8_lossy(&o.stderr).contains("trainer.lr"));
    let o = bin().args(["run", "--set", "preset=nope"]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = bin().args(["run", "--seeds", "a,b"]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = bin().args(["frobnicate"]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_CONFIG));
    let o = bin().args(["--help"]).output().unwrap();
    assert_eq!(o.status.code(), Some(EXIT_OK));
    let missing = dir.path().join("missing");
    let o = bin()
        .args([
            "run",
            "--set",
            "preset=toy",
            "--set",
            &format!("dataset={{kind = \"directory\", path = \"{}\", normalization = \"cifar100\"}}", missing.display()),
            "--out",
            path_str(&dir.path().join("out")),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(EXIT_RUNTIME), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn changed_config_in_an_existing_run_dir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert_eq!(cli(&["run", "--set", "preset=toy", "--out", path_str(&out)]), EXIT_OK);
    assert_eq!(
        cli(&["run", "--set", "preset=toy", "--set", "trainer.lr=0.3", "--out", path_str(&out)]),
        EXIT_CONFIG
    );
}

#[test]
fn resume_continues_from_the_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let args = ["run", "--set", "preset=toy", "--set", "protocol.tasks=2", "--out", path_str(&out)];
    assert_eq!(cli(&args), EXIT_OK);
    let seed = out.join("seed_0");
    let full = metrics_body(&seed);
    std::fs::remove_dir_all(seed.join("phase_2")).unwrap();
    std::fs::remove_file(seed.join("report.json")).unwrap();
    assert_eq!(cli(&args), EXIT_OK);
    assert_eq!(metrics_body(&seed), full);
    let log = std::fs::read_to_string(seed.join("events.log")).unwrap();
    assert!(log.contains("resume seed=0 from phase=1"));
}

#[test]
fn ablate_report_and_preview() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("abl");
    assert_eq!(cli(&["ablate", "--set", "preset=toy", "--seeds", "0,1,2", "--out", path_str(&out)]), EXIT_OK);
    let table = std::fs::read_to_string(out.join("ablation.txt")).unwrap();
    let variants: Vec<&str> = table.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(variants, ["full", "no_rkd", "no_hkd", "no_chr"]);
    assert!(out.join("curves.svg").exists());

    // an unfinished run next to the finished ones
    let partial = out.join("full/seed_9");
    std::fs::create_dir_all(&partial).unwrap();
    std::fs::write(partial.join("metrics.csv"), "phase\n").unwrap();

    let rep = dir.path().join("rep");
    let r = rdfcil::experiment::report(&[out.join("full")], &rep).unwrap();
    assert_eq!(r.rows.len(), 1);
    assert_eq!(r.warnings.len(), 1);
    let reports: Vec<RunReport> = (0..3)
        .map(|s| RunReport::load(&out.join(format!("full/seed_{}/report.json", s))).unwrap())
        .collect();
    assert_eq!(r.rows[0], aggregate_runs(&reports).unwrap());
    let svg = std::fs::read_to_string(rep.join("curves.svg")).unwrap();
    assert!(svg.contains("<polyline") || svg.contains("<path"));
    let curves = std::fs::read_to_string(rep.join("curves.csv")).unwrap();
    assert_eq!(curves.lines().count(), 1 + 2);
    assert!(rep.join("report.csv").exists());
    assert_eq!(cli(&["report", path_str(&out), "--out", path_str(&rep)]), EXIT_OK);
    assert_eq!(cli(&["report", path_str(&dir.path().join("none")), "--out", path_str(&rep)]), EXIT_CONFIG);

    let run_dir = out.join("full/seed_0");
    assert_eq!(cli(&["synth-preview", "--run", path_str(&run_dir)]), EXIT_OK);
    let png = run_dir.join("phase_2/synth_preview.png");
    let decoder = png::Decoder::new(std::io::BufReader::new(std::fs::File::open(&png).unwrap()));
    let reader = decoder.read_info().unwrap();
    assert!(reader.info().width >= 8 * 32);
}
