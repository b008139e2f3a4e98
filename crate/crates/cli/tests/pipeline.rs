use std::path::Path;
use std::process::{Command, Output};

const TINY: &str = "\
[model]
n_channels = 4
segment_size = 16
d_model = 8
latent_dim = 4
n_gcn_layers = 1
n_transformer_layers = 1
n_heads = 2
adapter_heads = 2

[train]
epochs = 2
batch_size = 8
seeds = 0
eval_every = 1
finetune_epochs = 2
probe_rounds = 10

[data]
n_subjects = 3
n_tasks = 2
epochs_per_cell = 8
synth_channels = 4
";

fn gcvase(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcvase"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = gcvase(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gradcheck_passes_on_defaults() {
    let out = ok(&["gradcheck"]);
    assert!(out.contains("PASS"), "{out}");
    assert!(out.contains("max relative error"));
}

#[test]
fn unknown_key_is_single_line_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "[model]\nwidth = 3\n").unwrap();
    let out = gcvase(&["synth", "-c", s(&cfg), "-o", s(&dir.path().join("x.gcvz"))]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    let lines: Vec<&str> = err.lines().filter(|l| l.starts_with("error:")).collect();
    assert_eq!(lines.len(), 1, "{err}");
    assert!(lines[0].starts_with("error: config: config line 2"), "{err}");
}

#[test]
fn missing_file_reports_io() {
    let out = gcvase(&["eval", "--checkpoint", "/nonexistent/ck.gcvc", "-d", "/nonexistent/d.gcvz"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: io: "));
}

#[test]
fn synth_train_eval_finetune_export() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY).unwrap();
    let data = d.join("data.gcvz");
    ok(&["synth", "-c", s(&cfg), "-o", s(&data)]);
    assert!(d.join("data.gcvz.config").exists());

    // synth is deterministic
    let again = d.join("again.gcvz");
    ok(&["synth", "-c", s(&cfg), "-o", s(&again)]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());

    let run = d.join("run");
    let out = ok(&["train", "-c", s(&cfg), "-d", s(&data), "-o", s(&run)]);
    assert!(out.starts_with("seed 0"), "{out}");
    assert!(out.contains("metric,mean,stddev,n_seeds"));
    let history = std::fs::read_to_string(run.join("seed0/history.csv")).unwrap();
    assert!(history.starts_with("step,total,rec,kl_S,kl_T,clip_S,clip_T,tau\n"));
    // resolved config reproduces itself
    let resolved = std::fs::read_to_string(run.join("config.txt")).unwrap();
    assert_eq!(gcvase::config::RunConfig::parse(&resolved).unwrap().to_text(), resolved);

    let ck = run.join("seed0/checkpoint.gcvc");
    let out = ok(&["eval", "--checkpoint", s(&ck), "-d", s(&data)]);
    for block in ["z_S,subject", "z_T,subject", "z_S,task", "z_T,task", "paradigm,balanced,closed_set", "average,"] {
        assert!(out.contains(block), "missing {block}:\n{out}");
    }
    assert_eq!(out, ok(&["eval", "--checkpoint", s(&ck), "-d", s(&data)]));

    let lat = d.join("lat.csv");
    ok(&["export-latents", "--checkpoint", s(&ck), "-d", s(&data), "-o", s(&lat)]);
    let text = std::fs::read_to_string(&lat).unwrap();
    let header = text.lines().next().unwrap();
    assert!(header.starts_with("epoch_index,subject,task,paradigm,z_S_0"));
    assert!(header.ends_with("z_T_3"));
    assert_eq!(text.lines().count(), 1 + 3 * 2 * 8);

    let ft = d.join("ft");
    let out = ok(&["finetune", "--checkpoint", s(&ck), "-d", s(&data), "-o", s(&ft)]);
    assert!(out.contains("subject_balanced_accuracy"), "{out}");
    assert!(ft.join("finetuned.gcvc").exists());
}

#[test]
fn ablate_emits_five_rows() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("tiny.cfg");
    std::fs::write(&cfg, TINY.replace("epochs = 2", "epochs = 1")).unwrap();
    let data = d.join("data.gcvz");
    ok(&["synth", "-c", s(&cfg), "-o", s(&data)]);
    let out = ok(&["ablate", "-c", s(&cfg), "-d", s(&data), "-o", s(&d.join("abl"))]);
    let rows: Vec<&str> = out.lines().skip(1).collect();
    assert_eq!(rows.len(), 5, "{out}");
    let names: Vec<&str> = rows.iter().map(|r| r.split(',').next().unwrap()).collect();
    assert_eq!(names, ["full", "-gcnn", "-contrastive", "-split", "ae-mode"]);
    assert!(rows[0].contains("+0.00"));
}

#[test]
fn preprocess_ingests_csv_epochs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut manifest = String::from("file,subject,task,paradigm\n");
    for i in 0..4 {
        let name = format!("e{i}.csv");
        let rows: Vec<String> = (0..3)
            .map(|c| (0..5).map(|t| format!("{}", (i * 15 + c * 5 + t) as f64 * 0.5)).collect::<Vec<_>>().join(","))
            .collect();
        std::fs::write(d.join(&name), rows.join("\n")).unwrap();
        manifest.push_str(&format!("{name},{},{},{}\n", i % 2, i / 2, i / 2));
    }
    std::fs::write(d.join("manifest.csv"), manifest).unwrap();
    let out_path = d.join("in.gcvz");
    let out = ok(&["preprocess", "--manifest", s(&d.join("manifest.csv")), "-o", s(&out_path)]);
    assert!(out.contains("4 epochs of 3x5"), "{out}");
    let ds = gcvase::dataset::read_dataset(&out_path).unwrap();
    assert_eq!(ds.epochs[3].data[14], 29.5);
    assert_eq!((ds.epochs[2].subject, ds.epochs[2].task), (0, 1));
}
