use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 7

[corpus]
utterances = 16
phonemes = 3
mean_len = 12
len_spread = 2
feature_dim = 4

[vaeve]
feature_dim = 4
phoneme_count = 3
latent_dim = 2
enc_cells = 4
dec_cells = 6
pool_radius = 1

[train]
pretrain_epochs = 1
epochs = 2

[classifier]
hidden = 8
epochs = 1
context_radius = 1

[retrain]
epochs = 1
context_radius = 1
"#;

fn vaeve(args: &[&Path]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vaeve"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(out: Output) -> Output {
    assert!(
        out.status.success(),
        "exit {:?}\n{}",
        out.status.code(),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(s: &str) -> &Path {
    Path::new(s)
}

fn tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_path_buf();
                out.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// Runs every subcommand once under `root`, returning both FER reports and the probe report.
fn pipeline(root: &Path, threads: &str) -> (Vec<u8>, Vec<u8>, Vec<u8>) {
    let cfg = root.join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let corpus = root.join("corpus");
    let t = ["--threads", threads].map(p);
    let with = |args: &[&Path]| {
        let mut v: Vec<&Path> = t.to_vec();
        v.extend_from_slice(args);
        ok(vaeve(&v))
    };
    with(&[p("gen-data"), &cfg, &corpus]);
    let (pre, ft) = (root.join("pre.vec"), root.join("ft.vec"));
    with(&[p("pretrain"), &cfg, &corpus, &pre]);
    with(&[p("train"), &cfg, &corpus, &pre, &ft]);
    with(&[p("encode"), &cfg, &ft, &corpus, &root.join("z")]);
    let (base, wide) = (root.join("base.vec"), root.join("wide.vec"));
    with(&[p("train-classifier"), &cfg, &corpus, &base]);
    with(&[p("retrain"), &cfg, &base, &ft, &corpus, &wide]);
    let eval_base = with(&[p("eval"), &cfg, &base, &corpus]).stdout;
    let eval_wide = with(&[p("eval"), &cfg, &wide, &ft, &corpus]).stdout;
    let probe = with(&[p("probe"), &cfg, &ft, &corpus]).stdout;
    (eval_base, eval_wide, probe)
}

#[test]
fn pipeline_is_reproducible_and_thread_count_independent() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ra = pipeline(a.path(), "1");
    let rb = pipeline(b.path(), "3");
    assert_eq!(ra, rb);
    assert_eq!(tree(a.path()), tree(b.path()));

    let report: serde_json::Value = serde_json::from_slice(&ra.1).unwrap();
    let fer = report["overall_fer"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&fer));
    let frames: u64 = report["stratum_frames"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v.as_u64().unwrap())
        .sum();
    assert_eq!(frames, report["total_frames"].as_u64().unwrap());
    let probe: serde_json::Value = serde_json::from_slice(&ra.2).unwrap();
    assert!(probe["variability"]["mean_r2"].as_f64().unwrap() <= 1.0);
    assert_eq!(
        tree(&a.path().join("z")).len(),
        16,
        "one encoding file per utterance"
    );
}

#[test]
fn gen_data_twice_gives_identical_trees() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let (x, y) = (d.path().join("x"), d.path().join("y"));
    ok(vaeve(&[p("gen-data"), &cfg, &x]));
    ok(vaeve(&[p("gen-data"), &cfg, &y]));
    assert_eq!(tree(&x), tree(&y));
}

#[test]
fn gradcheck_passes_and_reports_the_bound() {
    let out = ok(vaeve(&[p("gradcheck")]));
    let text = String::from_utf8(out.stdout).unwrap();
    let last = text.lines().last().unwrap();
    let value: f64 = last
        .split_whitespace()
        .nth(3)
        .and_then(|v| v.parse().ok())
        .unwrap_or_else(|| panic!("unexpected summary line `{last}`"));
    assert!(value < 1e-4, "{last}");
    assert!(text.contains("elbo") && text.contains("softmax_xent"));
}

#[test]
fn eval_with_mismatched_feature_dim_exits_2_naming_both() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let corpus = d.path().join("corpus");
    ok(vaeve(&[p("gen-data"), &cfg, &corpus]));
    let base = d.path().join("base.vec");
    ok(vaeve(&[p("train-classifier"), &cfg, &corpus, &base]));

    let wide_cfg = d.path().join("wide.toml");
    fs::write(
        &wide_cfg,
        TINY.replace("feature_dim = 4", "feature_dim = 5"),
    )
    .unwrap();
    let other = d.path().join("other");
    ok(vaeve(&[p("gen-data"), &wide_cfg, &other]));

    let out = vaeve(&[p("eval"), &cfg, &base, &other]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains('4') && err.contains('5'), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn exit_codes() {
    assert_eq!(vaeve(&[p("no-such-command")]).status.code(), Some(1));
    assert_eq!(vaeve(&[p("pretrain")]).status.code(), Some(1));
    assert_eq!(vaeve(&[p("--help")]).status.code(), Some(0));

    let d = tempfile::tempdir().unwrap();
    let bad = d.path().join("bad.toml");
    fs::write(&bad, "[train]\nbase_lrr = 1.0\n").unwrap();
    let out = vaeve(&[p("gen-data"), &bad, &d.path().join("c")]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("base_lrr"));

    let cfg = d.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let out = vaeve(&[
        p("pretrain"),
        &cfg,
        &d.path().join("missing"),
        &d.path().join("x.vec"),
    ]);
    assert_eq!(out.status.code(), Some(2));

    let garbage = d.path().join("garbage.vec");
    fs::write(&garbage, b"not a checkpoint").unwrap();
    let corpus = d.path().join("corpus");
    ok(vaeve(&[p("gen-data"), &cfg, &corpus]));
    let out = vaeve(&[p("probe"), &cfg, &garbage, &corpus]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("offset"));
}

#[test]
fn non_finite_features_exit_3() {
    let d = tempfile::tempdir().unwrap();
    let cfg = d.path().join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let corpus = d.path().join("corpus");
    ok(vaeve(&[p("gen-data"), &cfg, &corpus]));
    for e in fs::read_dir(corpus.join("features")).unwrap() {
        let victim = e.unwrap().path();
        let mut bytes = fs::read(&victim).unwrap();
        bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
        fs::write(&victim, bytes).unwrap();
    }
    let out = vaeve(&[p("pretrain"), &cfg, &corpus, &d.path().join("x.vec")]);
    assert_eq!(
        out.status.code(),
        Some(3),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
