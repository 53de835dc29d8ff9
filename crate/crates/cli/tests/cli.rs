mod common;

use clonetts_core::dataset::{load_manifest, parse_jsonl, QcStatus, UtteranceRecord};
use clonetts_core::text::is_pinyin_syllable;
use clonetts_core::eval::{ratings_to_jsonl, AbVote, RatingKind, RatingRecord, RatingValue};
use common::*;

fn rating(i: usize, value: RatingValue) -> RatingRecord {
    let kind = match value {
        RatingValue::Score(_) => RatingKind::Mos,
        RatingValue::Choice(_) => RatingKind::Ab,
    };
    RatingRecord {
        session: "s1".into(),
        listener: "l1".into(),
        item: i,
        kind,
        value,
        system: (kind == RatingKind::Mos).then(|| "VAENAR".to_string()),
        systems: (kind == RatingKind::Ab).then(|| ["VAENAR".to_string(), "Tacotron".to_string()]),
        scenario: None,
        timestamp: None,
    }
}

#[test]
fn usage_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(clonetts(dir.path(), &["frobnicate"]).status.code(), Some(1));
    assert_eq!(clonetts(dir.path(), &["train", "tokenizer"]).status.code(), Some(1));
    let o = clonetts(dir.path(), &["--set", "no.such.key=1", "preprocess"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("no.such.key"));
    assert_eq!(clonetts(dir.path(), &["--config", "missing.cfg", "preprocess"]).status.code(), Some(1));
    assert_eq!(clonetts(dir.path(), &["--help"]).status.code(), Some(0));
}

#[test]
fn data_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let o = clonetts(dir.path(), &["preprocess"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("transcripts"));
    let o = clonetts(dir.path(), &["train", "synth"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("speaker checkpoint required"), "{}", stderr(&o));
}

#[test]
fn preprocess_counts_isolates_and_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let ids = write_toy_workdir(dir.path(), 2, 5, 3);
    assert_eq!(ids.len(), 10);
    let o = clonetts(dir.path(), &["--config", "toy.cfg", "preprocess"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let manifest = load_manifest(&dir.path().join("manifest.jsonl")).unwrap();
    assert_eq!(manifest.len(), 10);
    let mels = std::fs::read_dir(dir.path().join("mels")).unwrap().count();
    assert_eq!(mels, 10);
    assert!(manifest.iter().all(|e| !e.text.is_empty() && e.text.split(' ').all(is_pinyin_syllable)));
    let sidecar = std::fs::read_to_string(dir.path().join("manifest.jsonl.run.cfg")).unwrap();
    assert!(sidecar.contains("seed = 7\n"));

    let first = std::fs::read(dir.path().join("manifest.jsonl")).unwrap();
    assert!(clonetts(dir.path(), &["--config", "toy.cfg", "preprocess"]).status.success());
    assert_eq!(std::fs::read(dir.path().join("manifest.jsonl")).unwrap(), first);

    // a corrupt WAV is recorded as removed; the rest still pass
    std::fs::write(dir.path().join("raw").join(format!("{}.wav", ids[3])), b"RIFF garbage").unwrap();
    let o = clonetts(dir.path(), &["--config", "toy.cfg", "preprocess"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let records: Vec<UtteranceRecord> = parse_jsonl(&std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap()).unwrap();
    assert_eq!(records.len(), 10);
    let bad = records.iter().find(|r| r.id == ids[3]).unwrap();
    assert_eq!(bad.qc_status, QcStatus::Removed);
    assert!(bad.note.as_deref().unwrap().contains("unreadable audio"));
    assert_eq!(records.iter().filter(|r| r.qc_status == QcStatus::Pass).count(), 9);
    assert_eq!(load_manifest(&dir.path().join("manifest.jsonl")).unwrap().len(), 9);
}

#[test]
fn preprocess_with_unreachable_asr_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_workdir(dir.path(), 2, 2, 3);
    // a port nothing listens on
    let port = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let url = format!("asr_url=http://127.0.0.1:{port}");
    let o = clonetts(dir.path(), &["--config", "toy.cfg", "--set", "asr=http", "--set", &url, "--set", "asr_timeout_secs=2", "preprocess"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    let records: Vec<UtteranceRecord> = parse_jsonl(&std::fs::read_to_string(dir.path().join("records.jsonl")).unwrap()).unwrap();
    assert!(records.iter().all(|r| r.qc_status == QcStatus::Pending && r.retry_count == 1));
}

#[test]
fn report_tables_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let mut recs: Vec<RatingRecord> = [3, 4, 5].iter().enumerate().map(|(i, &s)| rating(i, RatingValue::Score(s))).collect();
    let votes = [(AbVote::A, 103), (AbVote::B, 25), (AbVote::Same, 32)];
    for (v, n) in votes {
        for _ in 0..n {
            recs.push(rating(recs.len(), RatingValue::Choice(v)));
        }
    }
    std::fs::write(dir.path().join("ratings.jsonl"), ratings_to_jsonl(&recs)).unwrap();
    let o = clonetts(dir.path(), &["report"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("VAENAR → 4.00 ± 1.13"), "{out}");
    assert!(out.contains("64.375 / 15.625 / 20.000"), "{out}");
    let saved = std::fs::read_to_string(dir.path().join("report.txt")).unwrap();
    assert!(saved.starts_with("# "));
    assert!(saved.contains(&out));

    let ab_only = ratings_to_jsonl(&recs[3..]);
    std::fs::write(dir.path().join("ab.jsonl"), ab_only).unwrap();
    let o = clonetts(dir.path(), &["report", "--ratings", "ab.jsonl"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("MOS section omitted"));

    let mut text = ratings_to_jsonl(&recs[..2]);
    text.push_str("{\"session\": \"s1\"\n");
    std::fs::write(dir.path().join("bad.jsonl"), text).unwrap();
    let o = clonetts(dir.path(), &["report", "--ratings", "bad.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 3"), "{}", stderr(&o));
}

#[test]
fn bench_rtf_stub_and_runs_override() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("test_set.txt"), "你好\n今天天气很好\n\n").unwrap();
    let o = clonetts(dir.path(), &["--set", "bench.stub_rtf=0.05", "bench-rtf", "--stub-model", "--runs", "1"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("rtf_report.json")).unwrap()).unwrap();
    assert_eq!(report["runs"], 1);
    assert_eq!(report["per_run"].as_array().unwrap().len(), 1);
    assert_eq!(report["batch_size"], 1);
    assert_eq!(report["sentences"], 2);
    let rtf = report["rtf"].as_f64().unwrap();
    assert!((rtf - 0.05).abs() < 0.005, "{rtf}");
    assert!(report["run_config"].as_str().unwrap().contains("bench.stub_rtf = 0.05"));

    std::fs::write(dir.path().join("test_set.txt"), "\n").unwrap();
    let o = clonetts(dir.path(), &["bench-rtf", "--stub-model"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("empty test set"));
}

#[test]
fn trained_pipeline_clones_conditions_on_speaker_and_benchmarks() {
    let dir = tempfile::tempdir().unwrap();
    write_toy_workdir(dir.path(), 2, 12, 5);
    let cfg = ["--config", "toy.cfg", "--set", "synth.steps=60", "--set", "vocoder.steps=20"];
    let run = |extra: &[&str]| {
        let args: Vec<&str> = cfg.iter().chain(extra).copied().collect();
        let o = clonetts(dir.path(), &args);
        assert!(o.status.success(), "{extra:?}: {}", stderr(&o));
        o
    };
    run(&["preprocess"]);
    for c in ["speaker", "synth", "vocoder"] {
        run(&["train", c]);
    }
    let ck = std::fs::read(dir.path().join("checkpoints/synth.ckpt")).unwrap();
    assert!(String::from_utf8_lossy(&ck).contains("run_config"));

    write_reference(&dir.path().join("ref0.wav"), 0, "1234567890123456789", 1);
    write_reference(&dir.path().join("ref1.wav"), 1, "1234567890123456789", 1);
    write_reference(&dir.path().join("short.wav"), 0, "12", 1);
    run(&["clone", "--reference", "ref0.wav", "--text", "123", "--out", "out/a.wav"]);
    run(&["clone", "--reference", "ref1.wav", "--text", "123", "--out", "out/b.wav"]);
    let a = clonetts_core::dsp::load_waveform(&dir.path().join("out/a.wav")).unwrap();
    let b = clonetts_core::dsp::load_waveform(&dir.path().join("out/b.wav")).unwrap();
    let n = a.len().min(b.len());
    let diff = a.samples[..n].iter().zip(&b.samples[..n]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    assert!(diff > 0.0 || a.len() != b.len());

    let args: Vec<&str> = cfg.iter().copied().chain(["clone", "--reference", "short.wav", "--text", "123", "--out", "x.wav"]).collect();
    let o = clonetts(dir.path(), &args);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("reference too short"));

    std::fs::write(dir.path().join("test_set.txt"), "123\n4567\n").unwrap();
    run(&["--set", "bench.reference=ref0.wav", "bench-rtf", "--runs", "2"]);
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("rtf_report.json")).unwrap()).unwrap();
    assert_eq!(report["mode"], "model");
    assert_eq!(report["per_run"].as_array().unwrap().len(), 2);
    assert!(report["rtf"].as_f64().unwrap() > 0.0);
}
