use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use mixit_core::audio_io::{encode_pcm, read_wav, write_wav};
use mixit_core::postproc::remix;
use mixit_core::trainer::{enhance, load_model};
use mixit_core::AudioClip;

fn mixit(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mixit"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn tone(len: usize, freq: f64, amp: f64) -> AudioClip {
    AudioClip::from_samples(
        (0..len)
            .map(|t| amp * (2.0 * std::f64::consts::PI * freq * t as f64 / 16_000.0).sin())
            .collect(),
    )
    .unwrap()
}

fn simulate(dir: &Path, n: usize) -> PathBuf {
    let out = dir.join("corpus");
    let n = n.to_string();
    let o = mixit(&["simulate", "--out", s(&out), "--clean", &n, "--noise", &n, "--noisy", &n, "--seed", "3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    out
}

fn tiny_config(dir: &Path, corpus: &Path, extra_sampler: &str) -> PathBuf {
    let cfg = format!(
        r#"{{
  "model": {{"num_outputs": 3, "base_channels": 4, "enc_depth": 2, "tcn_repeats": 1, "tcn_blocks": 3}},
  "sampler": {{"chunk_len": 2000 {extra_sampler}}},
  "train": {{"epochs": 2, "steps_per_epoch": 2, "batch_size": 2, "val_examples": 2, "val_fraction": 0.25}},
  "manifests": ["{0}/clean.jsonl", "{0}/noise.jsonl", "{0}/noisy.jsonl"]
}}"#,
        corpus.display()
    );
    let path = dir.join("run.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn trained_checkpoint(dir: &Path) -> PathBuf {
    let corpus = simulate(dir, 4);
    let cfg = tiny_config(dir, &corpus, "");
    let run = dir.join("run");
    let o = mixit(&["train", s(&cfg), "--out", s(&run), "--seed", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    run.join("best.mxc")
}

#[test]
fn manifest_command() {
    let dir = tempfile::tempdir().unwrap();
    let audio = dir.path().join("audio");
    fs::create_dir(&audio).unwrap();
    write_wav(&tone(1600, 440.0, 0.5), audio.join("a.wav")).unwrap();
    write_wav(&tone(3200, 220.0, 0.5), audio.join("b.wav")).unwrap();
    let out = dir.path().join("clean.jsonl");
    let o = mixit(&["manifest", s(&audio), "--kind", "clean", "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 2);

    fs::write(audio.join("c.wav"), b"RIFF junk").unwrap();
    let o = mixit(&["manifest", s(&audio), "--kind", "clean", "--out", s(&out)]);
    assert!(o.status.success());
    assert!(stderr(&o).contains("1 skipped"), "{}", stderr(&o));

    let missing = dir.path().join("nope");
    let o = mixit(&["manifest", s(&missing), "--kind", "clean", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains(s(&missing)));

    let o = mixit(&["manifest", s(&audio), "--kind", "speech", "--out", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let ca = simulate(a.path(), 2);
    let cb = simulate(b.path(), 2);
    for kind in ["clean", "noise", "noisy"] {
        assert!(ca.join(format!("{kind}.jsonl")).is_file());
        for i in 0..2 {
            let rel = format!("{kind}/{kind}_{i:04}.wav");
            assert_eq!(fs::read(ca.join(&rel)).unwrap(), fs::read(cb.join(&rel)).unwrap());
        }
    }
}

#[test]
fn simulate_zero_counts() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = simulate(dir.path(), 0);
    for kind in ["clean", "noise", "noisy"] {
        assert_eq!(fs::read_to_string(corpus.join(format!("{kind}.jsonl"))).unwrap(), "");
    }
}

#[test]
fn train_writes_checkpoints_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let best = trained_checkpoint(dir.path());
    let run = best.parent().unwrap();
    assert!(best.is_file());
    assert!(run.join("best.json").is_file());
    let metrics = fs::read_to_string(run.join("metrics.jsonl")).unwrap();
    assert_eq!(metrics.lines().count(), 2);
    let resolved = fs::read_to_string(run.join("config.resolved.json")).unwrap();
    assert!(resolved.contains("\"clean_ratio\""));
}

#[test]
fn train_unsupervised_regime() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = simulate(dir.path(), 4);
    let cfg = tiny_config(dir.path(), &corpus, r#", "clean_ratio": 0.0"#);
    let run = dir.path().join("run");
    let o = mixit(&["train", s(&cfg), "--out", s(&run)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(run.join("best.mxc").is_file());
}

#[test]
fn train_rejects_unknown_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    fs::write(&cfg, r#"{"train": {"learning_rate": 0.1}}"#).unwrap();
    let o = mixit(&["train", s(&cfg), "--out", s(&dir.path().join("run"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("learning_rate"), "{}", stderr(&o));
}

#[test]
fn enhance_file_directory_and_remix() {
    let dir = tempfile::tempdir().unwrap();
    let best = trained_checkpoint(dir.path());
    let inputs = dir.path().join("in");
    fs::create_dir(&inputs).unwrap();
    let a = tone(5000, 300.0, 0.3).add_scaled(&tone(5000, 2100.0, 0.1), 1.0).unwrap();
    write_wav(&a, inputs.join("a.wav")).unwrap();
    write_wav(&tone(3000, 500.0, 0.2), inputs.join("b.wav")).unwrap();

    let single = dir.path().join("single");
    let o = mixit(&["enhance", "--checkpoint", s(&best), s(&inputs.join("a.wav")), "--out", s(&single)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_wav(single.join("a.wav")).unwrap().len(), 5000);

    let all = dir.path().join("all");
    let o = mixit(&["enhance", "--checkpoint", s(&best), s(&inputs), "--out", s(&all)]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(read_wav(all.join("b.wav")).unwrap().len(), 3000);
    assert_eq!(read_wav(all.join("a.wav")).unwrap(), read_wav(single.join("a.wav")).unwrap());

    let remixed = dir.path().join("remixed");
    let o = mixit(&[
        "enhance",
        "--checkpoint",
        s(&best),
        s(&inputs.join("a.wav")),
        "--out",
        s(&remixed),
        "--remix-beta",
        "0",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (params, meta) = load_model(&best).unwrap();
    let noisy = read_wav(inputs.join("a.wav")).unwrap();
    let y = enhance(&params, &meta.model, &meta.stft, &noisy).unwrap();
    let expected = encode_pcm(&remix(&y, &noisy, 0.0).unwrap());
    let got = encode_pcm(&read_wav(remixed.join("a.wav")).unwrap());
    assert_eq!(got, expected);
}

#[test]
fn eval_snr_report() {
    let dir = tempfile::tempdir().unwrap();
    let clean_dir = dir.path().join("clean");
    let noisy_dir = dir.path().join("noisy");
    fs::create_dir(&clean_dir).unwrap();
    fs::create_dir(&noisy_dir).unwrap();
    for (i, f) in [300.0, 450.0].iter().enumerate() {
        let c = tone(4000, *f, 0.3);
        let n = c.add_scaled(&tone(4000, 3000.0, 0.1 * (i + 1) as f64), 1.0).unwrap();
        write_wav(&c, clean_dir.join(format!("u{i}.wav"))).unwrap();
        write_wav(&n, noisy_dir.join(format!("u{i}.wav"))).unwrap();
    }
    let manifest = dir.path().join("clean.jsonl");
    assert!(mixit(&["manifest", s(&clean_dir), "--kind", "clean", "--out", s(&manifest)])
        .status
        .success());

    let csv_path = dir.path().join("same.csv");
    let o = mixit(&[
        "eval-snr",
        "--clean",
        s(&manifest),
        "--processed",
        s(&noisy_dir),
        "--noisy",
        s(&noisy_dir),
        "--out",
        s(&csv_path),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv_path).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("path,snr_in_db,snr_out_db,snri_db"));
    let rows: Vec<Vec<String>> = lines.map(|l| l.split(',').map(str::to_owned).collect()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r[3].parse::<f64>().unwrap(), 0.0);
    }

    let csv_path = dir.path().join("clean.csv");
    let o = mixit(&[
        "eval-snr",
        "--clean",
        s(&manifest),
        "--processed",
        s(&clean_dir),
        "--noisy",
        s(&noisy_dir),
        "--out",
        s(&csv_path),
    ]);
    assert!(o.status.success());
    for line in fs::read_to_string(&csv_path).unwrap().lines().skip(1) {
        let v: Vec<f64> = line.split(',').skip(1).map(|x| x.parse().unwrap()).collect();
        assert_eq!(v[1], 100.0);
        assert!((v[2] - (100.0 - v[0])).abs() < 1e-5);
    }
}

fn max_error_line(o: &Output) -> f64 {
    let out = stdout(o);
    let line = out
        .lines()
        .find(|l| l.starts_with("max relative error:"))
        .expect("summary line");
    line.rsplit(' ').next().unwrap().parse().unwrap()
}

#[test]
fn gradcheck_passes_and_repeats() {
    let a = mixit(&["gradcheck", "--seed", "5"]);
    assert_eq!(a.status.code(), Some(0), "{}", stderr(&a));
    assert!(max_error_line(&a) <= 1e-4);
    let b = mixit(&["gradcheck", "--seed", "5"]);
    assert_eq!(stdout(&a), stdout(&b));
}

#[test]
fn gradcheck_detects_broken_gradient() {
    let o = mixit(&["gradcheck", "--break-gradient"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(max_error_line(&o) > 1e-4);
}

#[test]
fn enum_mix_counts() {
    let o = mixit(&["enum-mix", "3"]);
    assert!(o.status.success());
    assert_eq!(
        stdout(&o).lines().collect::<Vec<_>>(),
        ["[[1,0,0],[0,1,1]]", "[[1,1,0],[0,0,1]]", "[[1,0,1],[0,1,0]]"]
    );
    let o = mixit(&["enum-mix", "2"]);
    assert_eq!(stdout(&o).lines().count(), 1);
    let o = mixit(&["enum-mix", "5"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn help_lists_flags() {
    for (cmd, flags) in [
        ("manifest", &["--kind", "--out"][..]),
        ("simulate", &["--out", "--clean", "--noise", "--noisy", "--seed"][..]),
        ("train", &["--out", "--seed"][..]),
        ("enhance", &["--checkpoint", "--out", "--remix-beta"][..]),
        ("eval-snr", &["--clean", "--processed", "--noisy", "--out"][..]),
        ("gradcheck", &["--seed", "--model", "--frames"][..]),
        ("enum-mix", &[][..]),
    ] {
        let o = mixit(&[cmd, "--help"]);
        assert!(o.status.success());
        let text = stdout(&o);
        for f in flags {
            assert!(text.contains(f), "{cmd} --help lacks {f}");
        }
    }
}
