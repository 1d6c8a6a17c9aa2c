use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ncconv::network::read_metrics_csv;

const SMALL: &str = r#"
[model]
arch = "plain4"
widths = [8]
[train]
epochs = 2
[data]
source = { kind = "synthetic", train = 40, val = 20, shape = [3, 12, 12] }
"#;

fn ncconv(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ncconv"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("NCCONV_DATA_DIR")
        .output()
        .expect("spawn ncconv")
}

fn write_config(dir: &Path, name: &str, body: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

fn run(cmd: &str, config: &Path, out: &Path) -> Output {
    ncconv(&[cmd, "--config", config.to_str().unwrap(), "--out", out.to_str().unwrap()])
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

#[test]
fn unknown_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    for body in ["colour = 1", "[train]\nlearning_rate = 0.1"] {
        let cfg = write_config(dir.path(), "bad.toml", body);
        for cmd in ["gradcheck", "verify-theory", "train", "eval", "bench"] {
            let o = run(cmd, &cfg, &dir.path().join("out"));
            assert_eq!(code(&o), 2, "{cmd} with {body:?}: {}", String::from_utf8_lossy(&o.stderr));
        }
    }
}

#[test]
fn missing_config_and_bad_usage_exit_2() {
    assert_eq!(code(&ncconv(&["train", "--config", "/nonexistent/x.toml"])), 2);
    assert_eq!(code(&ncconv(&["train"])), 2);
    assert_eq!(code(&ncconv(&["frobnicate"])), 2);
}

#[test]
fn gradcheck_passes_and_fault_hook_fails() {
    let dir = tempfile::tempdir().unwrap();
    let good = write_config(dir.path(), "g.toml", "[gradcheck]\ncases_per_kind = 20\n");
    let o = run("gradcheck", &good, &dir.path().join("good"));
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("good/gradcheck.json")).unwrap()).unwrap();
    assert_eq!(report.as_array().unwrap().len(), 83);

    let bad = write_config(dir.path(), "b.toml", "[gradcheck]\nfault_injection = true\n");
    let o = run("gradcheck", &bad, &dir.path().join("bad"));
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stdout).contains("FAIL"));
}

#[test]
fn missing_dataset_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "c.toml", "[data]\nsource = { kind = \"cifar10\", dir = \"/nonexistent/cifar\" }\n");
    assert_eq!(code(&run("train", &cfg, &dir.path().join("o"))), 2);
    // no dir and no environment default
    let cfg = write_config(dir.path(), "d.toml", "[data]\nsource = { kind = \"mnist\" }\n");
    assert_eq!(code(&run("train", &cfg, &dir.path().join("o"))), 2);
}

#[test]
fn train_writes_all_outputs_and_reruns_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.toml", SMALL);
    let a = dir.path().join("a");
    assert_eq!(code(&run("train", &cfg, &a)), 0);
    for f in ["metrics.csv", "summary.json", "resolved_config.json", "checkpoints/epoch_0001.ckpt", "checkpoints/epoch_0002.ckpt"] {
        assert!(a.join(f).exists(), "{f}");
    }
    let header = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert!(header.starts_with("schema_version,epoch,step,lr,train_loss"));

    // the resolved config materializes every default and reproduces the run
    let resolved = a.join("resolved_config.json");
    let b = dir.path().join("b");
    assert_eq!(code(&run("train", &resolved, &b)), 0);
    assert_eq!(fs::read(a.join("metrics.csv")).unwrap(), fs::read(b.join("metrics.csv")).unwrap());
}

#[test]
fn zero_learning_rate_gives_flat_loss() {
    let dir = tempfile::tempdir().unwrap();
    let body = SMALL.replace("epochs = 2", "epochs = 3\nlr = 0.0\naugmentation = { hflip = false, shift_frac = 0.0 }");
    let cfg = write_config(dir.path(), "z.toml", &body);
    let out = dir.path().join("z");
    assert_eq!(code(&run("train", &cfg, &out)), 0);
    let rows = read_metrics_csv(out.join("metrics.csv")).unwrap();
    assert_eq!(rows.len(), 3);
    for r in &rows {
        // per-epoch shuffles change the f32 summation order only
        assert!((r.train_loss - rows[0].train_loss).abs() < 1e-6 * rows[0].train_loss);
        assert_eq!(r.val_loss, rows[0].val_loss);
    }
}

#[test]
fn resume_continues_the_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full = dir.path().join("full");
    let cfg = write_config(dir.path(), "f.toml", &SMALL.replace("epochs = 2", "epochs = 3"));
    assert_eq!(code(&run("train", &cfg, &full)), 0);

    let part = dir.path().join("part");
    let cfg1 = write_config(dir.path(), "p1.toml", &SMALL.replace("epochs = 2", "epochs = 1"));
    assert_eq!(code(&run("train", &cfg1, &part)), 0);
    let ckpt = part.join("checkpoints/epoch_0001.ckpt");
    let body = format!(
        "{}\n[resume]\ncheckpoint = {:?}\ncompleted_epochs = 1\n",
        SMALL.replace("epochs = 2", "epochs = 3"),
        ckpt.to_str().unwrap()
    );
    let cfg2 = write_config(dir.path(), "p2.toml", &body);
    assert_eq!(code(&run("train", &cfg2, &part)), 0);
    assert_eq!(
        fs::read_to_string(full.join("metrics.csv")).unwrap(),
        fs::read_to_string(part.join("metrics.csv")).unwrap()
    );
    assert_eq!(
        fs::read(full.join("checkpoints/epoch_0003.ckpt")).unwrap(),
        fs::read(part.join("checkpoints/epoch_0003.ckpt")).unwrap()
    );
}

#[test]
fn eval_reports_accuracy_and_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "t.toml", SMALL);
    let out = dir.path().join("t");
    assert_eq!(code(&run("train", &cfg, &out)), 0);
    let body = format!("{SMALL}\n[eval]\ncheckpoint = {:?}\n", out.join("checkpoints/epoch_0002.ckpt").to_str().unwrap());
    let ecfg = write_config(dir.path(), "e.toml", &body);
    let eout = dir.path().join("e");
    assert_eq!(code(&run("eval", &ecfg, &eout)), 0);
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(eout.join("eval.json")).unwrap()).unwrap();
    let acc = report["top1_acc"].as_f64().unwrap();
    let err = report["top1_err"].as_f64().unwrap();
    assert!((acc + err - 1.0).abs() < 1e-12);
    assert!(report["top5_acc"].as_f64().unwrap() >= acc);

    // final validation loss in the training log matches a fresh evaluation
    let rows = read_metrics_csv(out.join("metrics.csv")).unwrap();
    assert_eq!(rows.last().unwrap().val_loss, report["loss"].as_f64());

    // checkpoint of the wrong element type is rejected
    let f64_cfg = write_config(dir.path(), "e64.toml", &format!("dtype = \"f64\"\n{body}"));
    assert_eq!(code(&run("eval", &f64_cfg, &dir.path().join("e64"))), 2);
    // no checkpoint configured
    assert_eq!(code(&run("eval", &cfg, &dir.path().join("none"))), 2);
}

#[test]
fn verify_theory_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let body = format!("{SMALL}\n[theory]\ntrace_steps = 3\n");
    let cfg = write_config(dir.path(), "v.toml", &body);
    let out = dir.path().join("v");
    let o = run("verify-theory", &cfg, &out);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let ids: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("identities.json")).unwrap()).unwrap();
    assert_eq!(ids.as_array().unwrap().len(), 600);
    let trace = fs::read_to_string(out.join("grad_trace.csv")).unwrap();
    assert!(trace.starts_with("model,step,loss,loss_change,layer,input_grad_norm"));
    assert!(trace.lines().any(|l| l.starts_with("nc,")) && trace.lines().any(|l| l.starts_with("gn,")));
}

#[test]
fn bench_smoke_and_zero_size_geometry() {
    let dir = tempfile::tempdir().unwrap();
    let body = "[bench]\nrepeats = 1\ngeometries = [{ in_channels = 3, out_channels = 4, kernel = 3, padding = 1, size = 8 }]\n";
    let cfg = write_config(dir.path(), "b.toml", body);
    let out = dir.path().join("b");
    assert_eq!(code(&run("bench", &cfg, &out)), 0);
    let csv = fs::read_to_string(out.join("bench.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    for method in ["naive", "im2col", "nc"] {
        assert!(csv.contains(&format!(",{method},")));
    }

    for zero in ["in_channels = 0, out_channels = 4", "in_channels = 3, out_channels = 0"] {
        let body = format!("[bench]\nrepeats = 1\ngeometries = [{{ {zero}, kernel = 3, size = 8 }}]\n");
        let cfg = write_config(dir.path(), "z.toml", &body);
        assert_eq!(code(&run("bench", &cfg, &dir.path().join("z"))), 2, "{zero}");
    }
    let body = "[bench]\nrepeats = 1\ngeometries = [{ in_channels = 3, out_channels = 4, kernel = 3, size = 0 }]\n";
    let cfg = write_config(dir.path(), "s.toml", body);
    assert_eq!(code(&run("bench", &cfg, &dir.path().join("s"))), 2);
    let cfg = write_config(dir.path(), "k.toml", "[bench]\nrepeats = 0\n");
    assert_eq!(code(&run("bench", &cfg, &dir.path().join("k"))), 2);
}

#[test]
fn shipped_configs_parse() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        ncconv_cli::load_config(&path).unwrap_or_else(|e| panic!("{e}"));
        n += 1;
    }
    assert!(n >= 5);
}
