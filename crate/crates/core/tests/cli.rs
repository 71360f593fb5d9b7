use std::path::Path;
use std::process::{Command, Output};

fn fuselab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuselab"))
        .args(args)
        .env_remove("FUSELAB_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn fuselab_env(args: &[&str], key: &str, value: &str) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fuselab"))
        .args(args)
        .env(key, value)
        .output()
        .expect("binary runs")
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn read(p: &Path) -> Vec<u8> {
    std::fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

fn data_rows(p: &Path) -> usize {
    String::from_utf8(read(p)).unwrap().lines().count() - 1
}

const FAST: [&str; 6] = ["--grid", "single", "--repeats", "2", "--set", "cm.max_epochs=20"];

#[test]
fn generate_fixed_days() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("data");
    let o = fuselab(&["-q", "generate", "--participants", "10", "--days", "14", "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert_eq!(data_rows(&out.join("phq2.csv")), 140);
    assert_eq!(data_rows(&out.join("demographics.csv")), 10);
    let manifest = String::from_utf8(read(&out.join("manifest.txt"))).unwrap();
    assert!(manifest.contains("phq2.csv = 140"));
}

#[test]
fn generate_defaults_to_131_participants() {
    let dir = tempfile::tempdir().unwrap();
    let o = fuselab(&["-q", "generate", "--out", path(dir.path())]);
    assert!(o.status.success());
    assert_eq!(data_rows(&dir.path().join("demographics.csv")), 131);
}

#[test]
fn generate_is_deterministic_and_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b, c) = (dir.path().join("a"), dir.path().join("b"), dir.path().join("c"));
    for (out, seed) in [(&a, "7"), (&b, "7"), (&c, "8")] {
        assert!(fuselab(&["-q", "generate", "--participants", "8", "--seed", seed, "--out", path(out)])
            .status
            .success());
    }
    for f in ["passive.csv", "demographics.csv", "phq9.csv", "phq2.csv", "manifest.txt"] {
        assert_eq!(read(&a.join(f)), read(&b.join(f)), "{f}");
    }
    assert_ne!(read(&a.join("phq2.csv")), read(&c.join("phq2.csv")));
}

#[test]
fn seed_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.cfg");
    std::fs::write(&cfg, "seed = 5\n").unwrap();
    let seed_of = |o: Output| {
        let text = String::from_utf8(o.stdout).unwrap();
        text.lines().find(|l| l.starts_with("seed = ")).unwrap().to_string()
    };
    assert_eq!(seed_of(fuselab(&["--dump-config"])), "seed = 42");
    assert_eq!(seed_of(fuselab_env(&["--dump-config"], "FUSELAB_SEED", "9")), "seed = 9");
    assert_eq!(
        seed_of(fuselab_env(&["--dump-config", "--config", path(&cfg)], "FUSELAB_SEED", "9")),
        "seed = 5"
    );
    assert_eq!(
        seed_of(fuselab_env(
            &["--dump-config", "--config", path(&cfg), "--seed", "3"],
            "FUSELAB_SEED",
            "9"
        )),
        "seed = 3"
    );
}

#[test]
fn dump_config_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let first = fuselab(&["--dump-config", "--seed", "11", "--set", "synth.days=21", "--leakage-safe"]);
    assert!(first.status.success());
    let cfg = dir.path().join("dumped.cfg");
    std::fs::write(&cfg, &first.stdout).unwrap();
    let second = fuselab(&["--dump-config", "--config", path(&cfg)]);
    assert!(second.status.success());
    assert_eq!(first.stdout, second.stdout);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(fuselab(&["--help"]).status.code(), Some(0));
    assert_eq!(fuselab(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(fuselab(&[]).status.code(), Some(2));
    assert_eq!(fuselab(&["run", "--model", "svm"]).status.code(), Some(2));

    let blocker = dir.path().join("file");
    std::fs::write(&blocker, "x").unwrap();
    let o = fuselab(&["-q", "generate", "--participants", "3", "--out", path(&blocker.join("sub"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = fuselab(&["-q", "run", "--in", path(&dir.path().join("missing"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = fuselab(&["-q", "run", "--paper-order", "--leakage-safe", "--out", path(&dir.path().join("r"))]);
    assert_eq!(o.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("paper-order"), "{stderr}");
    assert!(!dir.path().join("r").join("results.csv").exists());
}

#[test]
fn run_report_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("out");
    assert!(fuselab(&["-q", "generate", "--participants", "16", "--days", "42", "--out", path(&data)])
        .status
        .success());
    let mut args = vec!["-q", "run", "--in", path(&data), "--out", path(&out), "--train-weeks", "3"];
    args.extend(FAST);
    let o = fuselab(&args);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    assert_eq!(stdout.lines().count(), 3, "{stdout}");
    for m in ["CM", "RF", "LR"] {
        assert!(stdout.lines().any(|l| l.starts_with(m)), "{stdout}");
    }

    let results = String::from_utf8(read(&out.join("results.csv"))).unwrap();
    let rows: Vec<&str> = results.lines().skip(1).collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.iter().all(|r| r.split(',').nth(3) == Some("3")));
    let models: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(models, vec!["CM", "CM", "RF", "RF", "LR", "LR"]);

    let first = read(&out.join("results.csv"));
    assert!(fuselab(&args).status.success());
    assert_eq!(first, read(&out.join("results.csv")));

    let o = fuselab(&["-q", "report", path(&out.join("results.csv")), "--out", path(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let svg = String::from_utf8(read(&out.join("report.svg"))).unwrap();
    assert_eq!(svg.matches(r#"class="bar""#).count(), 6);
    assert_eq!(svg.matches(r#"class="legend""#).count(), 3);
    assert!(svg.contains("PF+BG+PHQ9 temporal 3w"));
    let md = String::from_utf8(read(&out.join("report.md"))).unwrap();
    assert!(md.contains("reference (BRIGHTEN, not reproducible here)"));
    assert!(md.contains("| CM | temporal | 0.4985 |"));
    assert!(md.contains("| RF | random | 0.6007 |"));
}

#[test]
fn single_model_run() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec![
        "-q",
        "run",
        "--model",
        "lr",
        "--out",
        path(dir.path()),
        "--set",
        "synth.participants=12",
    ];
    args.extend(FAST);
    assert!(fuselab(&args).status.success());
    let results = String::from_utf8(read(&dir.path().join("results.csv"))).unwrap();
    assert!(results.lines().skip(1).all(|l| l.starts_with("LR,")));
}

#[test]
fn report_rejects_empty_and_malformed_input() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("out");
    let empty = dir.path().join("empty.csv");
    std::fs::write(
        &empty,
        "model,modalities,split_mode,train_weeks,seed,train_mse,test_mse,train_r2,test_r2,chosen_hparams\n",
    )
    .unwrap();
    let o = fuselab(&["-q", "report", path(&empty), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(!out.join("report.svg").exists() && !out.join("report.md").exists());

    let bad = dir.path().join("bad.csv");
    std::fs::write(
        &bad,
        "model,modalities,split_mode,train_weeks,seed,train_mse,test_mse,train_r2,test_r2,chosen_hparams\n\
         CM,PF,temporal,4,1,0.1,0.2,0.3,0.4,x\n\
         CM,PF,temporal,4,2,0.1,oops,0.3,0.4,x\n",
    )
    .unwrap();
    let o = fuselab(&["-q", "report", path(&bad), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let stderr = String::from_utf8_lossy(&o.stderr);
    assert!(stderr.contains("line 3"), "{stderr}");
    assert!(!out.join("report.svg").exists());
}

#[test]
fn impute_writes_complete_tables_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = dir.path().join("imputed");
    assert!(fuselab(&["-q", "generate", "--participants", "10", "--days", "21", "--out", path(&data)])
        .status
        .success());
    let o = fuselab(&["-q", "impute", "--in", path(&data), "--out", path(&out), "--set", "impute.n_trees=10"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let passive = String::from_utf8(read(&out.join("passive.csv"))).unwrap();
    assert!(passive.lines().skip(1).all(|l| !l.split(',').any(str::is_empty)), "{passive}");
    let trace = String::from_utf8(read(&out.join("impute_trace.csv"))).unwrap();
    assert!(trace.starts_with("iteration,delta_continuous,delta_categorical"));
    assert!(trace.lines().count() >= 2);
}

#[test]
fn ablate_and_sweep_shapes() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["-q", "ablate", "--model", "lr", "--out", path(dir.path()), "--set", "synth.participants=30"];
    args.extend(FAST);
    assert!(fuselab(&args).status.success());
    let ablation = String::from_utf8(read(&dir.path().join("ablation.csv"))).unwrap();
    assert!(ablation.lines().next().unwrap().ends_with(",subset"));
    let subsets: std::collections::BTreeSet<&str> =
        ablation.lines().skip(1).map(|l| l.rsplit(',').next().unwrap()).collect();
    assert_eq!(subsets.len(), 4);

    let mut args = vec!["-q", "sweep", "--model", "lr", "--out", path(dir.path()), "--repeats", "1"];
    args.extend(["--set", "synth.participants=30", "--set", "impute.n_trees=10"]);
    args.extend(["--first-week", "1", "--last-week", "8"]);
    assert!(fuselab(&args).status.success());
    let sweep = String::from_utf8(read(&dir.path().join("sweep.csv"))).unwrap();
    assert!(sweep.lines().next().unwrap().ends_with(",week"));
    assert_eq!(sweep.lines().count() - 1, 8);
}
