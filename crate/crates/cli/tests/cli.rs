use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn spikefm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_spikefm")).args(args).env_remove("UNI_SEED").output().unwrap()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const SMALL: [&str; 12] = ["--set", "d_model=16", "--set", "n_heads=2", "--set", "n_layers=1", "--set", "d_ff=32", "--set", "d_text=16", "--set", "batch_size=4"];

#[test]
fn gen_writes_trials_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c");
    ok(&spikefm(&["gen", "--kind", "center-out", "--trials", "4", "--units", "70", "--seed", "1", "--out", p(&out)]));
    let manifest = fs::read_to_string(out.join("manifest.txt")).unwrap();
    assert_eq!(manifest.lines().count(), 4);
    assert_eq!(fs::read_dir(&out).unwrap().filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "spkt")).count(), 4);
}

#[test]
fn pretrain_one_epoch_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c");
    ok(&spikefm(&["gen", "--kind", "center-out", "--trials", "4", "--units", "70", "--seed", "1", "--out", p(&data)]));
    let cfg = dir.path().join("run.cfg");
    fs::write(&cfg, "# one pass\nepochs = 1\nbatch_size = 2\n").unwrap();
    let run = |name: &str, extra: &[&str]| {
        let ckpt = dir.path().join(name);
        let mut args = vec!["pretrain", "--data", p(&data), "--config", p(&cfg), "--out", p(&ckpt)];
        args.extend_from_slice(extra);
        ok(&spikefm(&args));
        ckpt
    };
    let a = run("a.ckpt", &[]);
    let b = run("b.ckpt", &[]);
    let loss = fs::read_to_string(dir.path().join("a.ckpt.loss.csv")).unwrap();
    assert_eq!(loss.lines().count(), 2);
    assert!(loss.starts_with("epoch,mean_loss\n1,"));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(loss, fs::read_to_string(dir.path().join("b.ckpt.loss.csv")).unwrap());

    // The persisted config replays the run exactly.
    let resolved = dir.path().join("a.ckpt.config");
    assert!(fs::read_to_string(&resolved).unwrap().contains("epochs = 1"));
    let c = dir.path().join("c.ckpt");
    ok(&spikefm(&["pretrain", "--data", p(&data), "--config", p(&resolved), "--out", p(&c)]));
    assert_eq!(fs::read(&a).unwrap(), fs::read(&c).unwrap());

    let d = run("d.ckpt", &["--seed", "5"]);
    assert_ne!(fs::read(&a).unwrap(), fs::read(&d).unwrap());
}

#[test]
fn seed_environment_variable_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c");
    ok(&spikefm(&["gen", "--kind", "center-out", "--trials", "2", "--out", p(&data)]));
    let train = |name: &str, env: Option<&str>, flag: Option<&str>| {
        let ckpt = dir.path().join(name);
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_spikefm"));
        cmd.args(["pretrain", "--data", p(&data), "--out", p(&ckpt), "--set", "epochs=1"]).args(SMALL).env_remove("UNI_SEED");
        if let Some(s) = env {
            cmd.env("UNI_SEED", s);
        }
        if let Some(s) = flag {
            cmd.args(["--seed", s]);
        }
        ok(&cmd.output().unwrap());
        fs::read_to_string(dir.path().join(format!("{name}.config"))).unwrap()
    };
    assert!(train("a.ckpt", None, None).contains("seed = 0\n"));
    assert!(train("b.ckpt", Some("9"), None).contains("seed = 9\n"));
    assert!(train("c.ckpt", Some("9"), Some("4")).contains("seed = 4\n"));
}

#[test]
fn finetune_and_eval_classification() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c");
    ok(&spikefm(&["gen", "--kind", "center-out", "--trials", "20", "--sessions", "2", "--out", p(&data)]));
    let pre = dir.path().join("pre.ckpt");
    let mut args = vec!["pretrain", "--data", p(&data), "--out", p(&pre), "--set", "epochs=1"];
    args.extend_from_slice(&SMALL);
    ok(&spikefm(&args));
    let tuned = dir.path().join("tuned.ckpt");
    let mut args = vec!["finetune", "--ckpt", p(&pre), "--data", p(&data), "--task", "cls", "--out", p(&tuned), "--split", "multi-day", "--set", "ft_epochs=2", "--set", "head_hidden=8"];
    args.extend_from_slice(&SMALL[10..]);
    ok(&spikefm(&args));
    let report = dir.path().join("report");
    let out = spikefm(&["eval", "--ckpt", p(&tuned), "--data", p(&data), "--split", "multi-day", "--out", p(&report)]);
    ok(&out);
    let metrics = fs::read_to_string(report.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("split,metric,value\n"));
    assert!(metrics.contains("train,balanced_accuracy,") && metrics.contains("test,weighted_f1,"));
    assert!(fs::read_to_string(report.join("confusion_test.csv")).unwrap().starts_with("true\\pred"));

    // A reconstruction checkpoint has no task head to evaluate.
    let out = spikefm(&["eval", "--ckpt", p(&pre), "--data", p(&data), "--split", "multi-day"]);
    assert_eq!(out.status.code(), Some(1));
    // Regression was requested on class labels.
    let out = spikefm(&["finetune", "--data", p(&data), "--task", "reg", "--out", p(&tuned)]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn finetune_and_eval_regression() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("k");
    ok(&spikefm(&["gen", "--kind", "kinematics", "--trials", "10", "--units", "20", "--out", p(&data)]));
    let tuned = dir.path().join("reg.ckpt");
    let mut args = vec!["finetune", "--data", p(&data), "--task", "reg", "--out", p(&tuned), "--split", "few-shot", "--set", "ft_epochs=1", "--set", "head_hidden=4", "--set", "head_input=mean_t"];
    args.extend_from_slice(&SMALL[..10]);
    ok(&spikefm(&args));
    let out = spikefm(&["eval", "--ckpt", p(&tuned), "--data", p(&data), "--split", "few-shot"]);
    ok(&out);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("test,r_squared,"), "{text}");
}

#[test]
fn gradcheck_passes_and_fails_with_exit_codes() {
    let out = spikefm(&["gradcheck", "--shape", "2,2,4,8", "--tol", "1e-5"]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("pass"));
    let out = spikefm(&["gradcheck", "--shape", "2,2,4,8", "--tol", "1e-12"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
    let out = spikefm(&["gradcheck", "--shape", "2,2,4"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn validation_errors_exit_one() {
    for args in [&["gen", "--kind", "bogus", "--out", "x"][..], &["pretrain", "--data", "/nonexistent", "--out", "x"], &["frobnicate"]] {
        let out = spikefm(args);
        assert_eq!(out.status.code(), Some(1), "{args:?}");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.starts_with("error: ") && err.lines().count() == 1, "{err}");
    }
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "no_such_key = 3\n").unwrap();
    let out = spikefm(&["pretrain", "--data", p(dir.path()), "--config", p(&cfg), "--out", "x"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn bench_emits_timing_csv() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("aswa.csv");
    let out = spikefm(&["bench", "--component", "aswa", "--sweep", "S", "--reps", "3", "--warmups", "1", "--emit-csv", p(&csv)]);
    ok(&out);
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("component,N,A,t,d,S,w,wall_ns,flops\n"));
    assert_eq!(text.lines().count(), 6);
    assert!(String::from_utf8_lossy(&out.stdout).starts_with("slope,aswa,S,"));
}

#[test]
fn expansion_diag_writes_report() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("c");
    ok(&spikefm(&["gen", "--kind", "center-out", "--trials", "8", "--sessions", "8", "--out", p(&data)]));
    let ckpt = dir.path().join("m.ckpt");
    let mut args = vec!["pretrain", "--data", p(&data), "--out", p(&ckpt), "--set", "epochs=1"];
    args.extend_from_slice(&SMALL);
    ok(&spikefm(&args));
    let report = dir.path().join("exp.csv");
    ok(&spikefm(&["diag", "expansion", "--data", p(&data), "--ckpt", p(&ckpt), "--out", p(&report)]));
    let text = fs::read_to_string(&report).unwrap();
    assert!(text.starts_with("key,value\nlogdet_spike,"));
    assert!(text.contains("logdet_joint,") && text.contains("effective_rank_joint,"));
}
