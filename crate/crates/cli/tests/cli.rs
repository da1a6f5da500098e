use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use accent_core::manifest::save_manifest;
use accent_core::{Label, Manifest, Portion, UtteranceRecord, Waveform};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_accent-forge"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn error_line(o: &Output) -> String {
    stderr(o)
        .lines()
        .find(|l| l.starts_with("error class="))
        .unwrap_or_default()
        .to_string()
}

fn configs() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs")
}

fn small_manifest(dir: &Path, labels: &[Label]) -> PathBuf {
    let records = labels
        .iter()
        .enumerate()
        .map(|(i, &l)| {
            let lang = if i % 2 == 0 { "en" } else { "de" };
            UtteranceRecord::new(format!("u{i:03}"), format!("a/{i}.wav"), l, lang, "src", Portion::I)
        })
        .collect();
    let p = dir.join("m.jsonl");
    save_manifest(&Manifest::new("m", records).unwrap(), &p).unwrap();
    p
}

#[test]
fn summarize_prints_table() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), &[Label::BonaFide, Label::Spoof, Label::Spoof, Label::Spoof]);
    let o = run(&["manifest", "summarize", "--in", m.to_str().unwrap(), "--by", "language"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert_eq!(out, "language\tbona_fide\tspoof\ttotal\nde\t0\t2\t2\nen\t1\t1\t2\n");
}

#[test]
fn unknown_subcommand_exits_two() {
    let o = run(&["transmogrify"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(error_line(&o).starts_with("error class=usage kind=unknown_subcommand"));
}

#[test]
fn bad_group_key_is_validation() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), &[Label::BonaFide, Label::Spoof]);
    let o = run(&["manifest", "summarize", "--in", m.to_str().unwrap(), "--by", "colour"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).contains("kind=unknown_group_key"));
}

#[test]
fn missing_file_is_runtime() {
    let o = run(&["manifest", "summarize", "--in", "/nonexistent/m.jsonl"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(error_line(&o).starts_with("error class=runtime kind=io"));
}

#[test]
fn single_class_train_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let m = small_manifest(dir.path(), &[Label::Spoof; 6]);
    let out = dir.path().join("run");
    let o = run(&[
        "train",
        "--train",
        m.to_str().unwrap(),
        "--valid",
        m.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).contains("kind=class_balance"), "{}", stderr(&o));
    assert_eq!(stderr(&o).lines().filter(|l| l.starts_with("error")).count(), 1);
}

#[test]
fn unknown_config_key_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    std::fs::write(&cfg, "[trainer]\nlearnig_rate = 0.1\n").unwrap();
    let o = run(&["--config", cfg.to_str().unwrap(), "report"]);
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).contains("kind=config"));
}

#[test]
fn example_config_is_valid() {
    let text = std::fs::read_to_string(configs().join("run.example.toml")).unwrap();
    accent_forge::RunConfig::from_toml_str(&text).unwrap().resolve(None).unwrap();
}

#[test]
fn split_reruns_identically_and_records_provenance() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<Label> = (0..50).map(|i| if i % 5 == 0 { Label::BonaFide } else { Label::Spoof }).collect();
    let m = small_manifest(dir.path(), &labels);
    let go = |tag: &str| {
        let tr = dir.path().join(format!("{tag}-train.jsonl"));
        let va = dir.path().join(format!("{tag}-valid.jsonl"));
        let o = run(&[
            "--seed",
            "9",
            "manifest",
            "split",
            "--in",
            m.to_str().unwrap(),
            "--ratio",
            "4:1",
            "--out-train",
            tr.to_str().unwrap(),
            "--out-valid",
            va.to_str().unwrap(),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        (std::fs::read(&tr).unwrap(), std::fs::read(&va).unwrap(), tr)
    };
    let (a_tr, a_va, tr) = go("a");
    let (b_tr, b_va, _) = go("b");
    assert_eq!(a_tr, b_tr);
    assert_eq!(a_va, b_va);
    assert_eq!(String::from_utf8(a_tr).unwrap().lines().count(), 40);

    let prov: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(tr.with_file_name("a-train.jsonl.provenance.json")).unwrap())
            .unwrap();
    assert_eq!(prov["seed"], 9);
    assert_eq!(prov["command"], "manifest split");
    assert_eq!(prov["config_hash"].as_str().unwrap().len(), 64);
}

#[test]
fn report_lists_every_row() {
    let o = run(&["report"]);
    let out = String::from_utf8(o.stdout.clone()).unwrap();
    assert_eq!(out.lines().count(), 1 + 7 + 8);
    assert!(out.contains("cross_corpus_increase\tSENet-34\t28.80"));
    assert!(out.contains("avg_reduction\t6->7\t-28.50"));
    // exit status follows the table: 0 when every row agrees, 3 otherwise
    let any_fail = out.lines().any(|l| l.ends_with("FAIL"));
    assert_eq!(o.status.code(), Some(if any_fail { 3 } else { 0 }));
}

fn tone_manifest(dir: &Path) -> PathBuf {
    std::fs::create_dir_all(dir.join("bona")).unwrap();
    let records: Vec<UtteranceRecord> = (0..12)
        .map(|i| {
            let rel = PathBuf::from("bona").join(format!("{i}.wav"));
            let f = 150.0 + 20.0 * i as f64;
            let s = (0..16_000)
                .map(|k| (0.2 * (2.0 * std::f64::consts::PI * f * k as f64 / 16_000.0).sin()) as f32)
                .collect();
            Waveform::new(s, 16_000).write_wav(dir.join(&rel)).unwrap();
            UtteranceRecord::new(format!("b{i:02}"), rel, Label::BonaFide, "en", "read", Portion::I)
        })
        .collect();
    let p = dir.join("bona.jsonl");
    save_manifest(&Manifest::new("bona", records).unwrap(), &p).unwrap();
    p
}

#[test]
fn pipeline_end_to_end_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let cfg = d.join("run.toml");
    std::fs::write(
        &cfg,
        "[frontend]\nduration_sec = 1.0\n[augment]\nenabled = false\n\
         [model]\nwidth = [8]\ndepth = 1\n[trainer]\nbase_lr = 0.003\nwarmup_steps = 5\n\
         batch_size = 8\nmax_epochs = 2\npatience_epochs = 2\n[eval]\nbatch_size = 8\n",
    )
    .unwrap();
    let transcripts = d.join("transcripts.txt");
    std::fs::write(&transcripts, (0..12).map(|i| format!("sentence {i}\n")).collect::<String>()).unwrap();
    let bona = tone_manifest(d);

    let step = |args: Vec<String>| {
        let mut full = vec!["--config".to_string(), s(&cfg), "--deterministic".into()];
        full.extend(args);
        let o = bin().args(&full).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{full:?}\n{}", stderr(&o));
        o
    };
    let argv = |v: &[&str]| v.iter().map(|x| x.to_string()).collect::<Vec<_>>();

    let pass = |tag: &str| {
        let out = d.join(tag);
        let eng = configs().join("engines_eng.toml");
        step(argv(&[
            "expand",
            "--transcripts",
            &s(&transcripts),
            "--engines",
            &s(&eng),
            "--policy",
            "round_robin",
            "--out",
            &s(&out.join("accent")),
        ]));
        let merged = out.join("merged.jsonl");
        step(argv(&[
            "manifest",
            "merge",
            "--in",
            &s(&bona),
            "--in",
            &s(&out.join("accent/manifest.jsonl")),
            "--out",
            &s(&merged),
        ]));
        let (tr, va) = (out.join("train.jsonl"), out.join("valid.jsonl"));
        step(argv(&[
            "manifest",
            "split",
            "--in",
            &s(&merged),
            "--out-train",
            &s(&tr),
            "--out-valid",
            &s(&va),
        ]));
        step(argv(&["train", "--train", &s(&tr), "--valid", &s(&va), "--out", &s(&out.join("model"))]));
        let scores = out.join("scores.tsv");
        step(argv(&[
            "score",
            "--checkpoint",
            &s(&out.join("model/checkpoint.json")),
            "--manifest",
            &s(&merged),
            "--out",
            &s(&scores),
            "--model-id",
            "toy",
        ]));
        step(argv(&[
            "eval",
            "--scores",
            &s(&scores),
            "--manifest",
            &s(&merged),
            "--out",
            &s(&out.join("eval")),
        ]));
        [
            std::fs::read(&tr).unwrap(),
            std::fs::read(out.join("model/checkpoint.json")).unwrap(),
            std::fs::read(&scores).unwrap(),
            std::fs::read(out.join("eval/report.json")).unwrap(),
        ]
    };
    // same output location both times, since merged manifests carry absolute paths
    let a = pass("run");
    let b = pass("run");
    assert!(a == b, "pipeline outputs differ between runs");
    let report: serde_json::Value = serde_json::from_slice(&a[3]).unwrap();
    assert_eq!(report["model_id"], "toy");
    assert_eq!(report["overall"]["bona_fide"], 12);
    assert_eq!(report["overall"]["spoof"], 12);
}

#[test]
fn eval_against_reference_reports_changes() {
    let dir = tempfile::tempdir().unwrap();
    let labels: Vec<Label> = (0..8).map(|i| if i < 4 { Label::BonaFide } else { Label::Spoof }).collect();
    let m = small_manifest(dir.path(), &labels);
    let write = |name: &str, flip: usize| {
        let p = dir.path().join(name);
        let body: String = (0..8)
            .map(|i| {
                let mut s = if i < 4 { 1.0 } else { -1.0 };
                if i < flip {
                    s = -2.0;
                }
                format!("u{i:03} {s}\n")
            })
            .collect();
        std::fs::write(&p, body).unwrap();
        p
    };
    let worse = write("worse.tsv", 2);
    let better = write("better.tsv", 1);
    let ref_dir = dir.path().join("ref");
    let o = run(&[
        "eval",
        "--scores",
        worse.to_str().unwrap(),
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        ref_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let o = run(&[
        "eval",
        "--scores",
        better.to_str().unwrap(),
        "--manifest",
        m.to_str().unwrap(),
        "--out",
        dir.path().join("new").to_str().unwrap(),
        "--reference",
        ref_dir.join("report.json").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = String::from_utf8(o.stdout).unwrap();
    assert!(out.contains("change\toverall\t-50.00%"), "{out}");
}

#[test]
fn builders_write_balanced_manifests() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let bona = tone_manifest(d);
    let vc = d.join("vc");
    let o = run(&["--seed", "4", "build-vc-cl3", "--bona", bona.to_str().unwrap(), "--out", vc.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = accent_core::manifest::load_manifest(vc.join("manifest.jsonl")).unwrap();
    assert_eq!(m.count(Label::BonaFide), 12);
    assert_eq!(m.count(Label::Spoof), 12);

    let tdir = d.join("transcripts");
    std::fs::create_dir_all(&tdir).unwrap();
    std::fs::write(tdir.join("en.txt"), "one\ntwo\nthree\n").unwrap();
    let tts = d.join("tts");
    let o = run(&[
        "build-tts-cl",
        "--bona",
        bona.to_str().unwrap(),
        "--transcripts",
        tdir.to_str().unwrap(),
        "--engines",
        configs().join("engines_eng.toml").to_str().unwrap(),
        "--spoof-per-bona",
        "0.5",
        "--out",
        tts.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = accent_core::manifest::load_manifest(tts.join("manifest.jsonl")).unwrap();
    assert_eq!(m.count(Label::Spoof), 6);
    assert!(m.records().iter().filter(|r| r.label == Label::Spoof).all(|r| r.source.ends_with("/wavernn")));
}

#[test]
fn remote_backend_without_endpoint_is_validation() {
    let dir = tempfile::tempdir().unwrap();
    let t = dir.path().join("t.txt");
    std::fs::write(&t, "hello\n").unwrap();
    let o = bin()
        .env_remove("ACCENT_FORGE_TTS_ENDPOINT")
        .args([
            "expand",
            "--transcripts",
            t.to_str().unwrap(),
            "--engines",
            configs().join("engines_eng.toml").to_str().unwrap(),
            "--backend",
            "remote",
            "--out",
            dir.path().join("o").to_str().unwrap(),
        ])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(3));
    assert!(error_line(&o).contains("kind=backend_config"));
}
