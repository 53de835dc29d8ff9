#![allow(dead_code)]

use std::path::Path;
use std::process::{Command, Output};

use clonetts_core::dsp::{write_waveform, Waveform};
use clonetts_core::toy::{render_digits, toy_corpus, toy_speakers};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Small models that train on the toy corpus in seconds.
pub const TOY_CONFIG: &str = "\
seed = 7
speaker.hidden = 24
speaker.layers = 1
speaker.embed_dim = 16
speaker.partial_frames = 16
speaker.min_frames = 12
speaker.speakers_per_batch = 2
speaker.utterances_per_speaker = 4
speaker.steps = 60
synth.base_dim = 32
synth.latent_dim = 8
synth.hidden = 32
synth.flow_steps = 2
synth.alpha_warmup_steps = 150
synth.reduction_factors = 2,1
synth.reduction_boundaries = 150
synth.steps = 300
synth.batch_size = 4
synth.learning_rate = 0.003
vocoder.channels = 16,8,8
vocoder.segment_frames = 8
vocoder.steps = 200
vocoder.learning_rate = 0.002
";

pub fn clonetts(workdir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_clonetts"))
        .arg("--workdir")
        .arg(workdir)
        .args(args)
        .output()
        .expect("spawn clonetts")
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

/// Writes `raw/<id>.wav`, `raw/transcripts.tsv` and `toy.cfg`; returns the ids.
pub fn write_toy_workdir(dir: &Path, speakers: usize, per_speaker: usize, seed: u64) -> Vec<String> {
    let raw = dir.join("raw");
    std::fs::create_dir_all(&raw).unwrap();
    let mut tsv = String::new();
    let mut ids = Vec::new();
    for u in toy_corpus(speakers, per_speaker, seed) {
        write_waveform(&raw.join(format!("{}.wav", u.id)), &u.waveform).unwrap();
        tsv.push_str(&format!("{}\t{}\t{}\n", u.id, u.speaker, u.raw_text));
        ids.push(u.id);
    }
    std::fs::write(raw.join("transcripts.tsv"), tsv).unwrap();
    std::fs::write(dir.join("toy.cfg"), TOY_CONFIG).unwrap();
    ids
}

/// A long digit string read by toy speaker `index`.
pub fn write_reference(path: &Path, index: usize, digits: &str, seed: u64) -> Waveform {
    let spk = &toy_speakers(index + 1)[index];
    let w = render_digits(digits, spk, &mut ChaCha8Rng::seed_from_u64(seed));
    write_waveform(path, &w).unwrap();
    w
}

/// Writes one distinct WAV per (scenario, sentence, system) the plan needs.
pub fn write_listen_assets(dir: &Path, plan: &clonetts_core::listen::PlanConfig) {
    use clonetts_core::listen::asset_name;
    std::fs::create_dir_all(dir).unwrap();
    let mut k = 0;
    for (name, count) in &plan.scenarios {
        for i in 0..*count {
            for system in [&plan.mos_system, &plan.ab_systems[0], &plan.ab_systems[1]] {
                k += 1;
                let tone = Waveform::new((0..800).map(|n| 0.1 * ((n * k) as f64 * 0.01).sin()).collect(), 16000);
                write_waveform(&dir.join(asset_name(name, i, system)), &tone).unwrap();
            }
        }
    }
}

/// A `clonetts serve` child process on an ephemeral port.
pub struct Server {
    child: std::process::Child,
    pub base: String,
}

impl Server {
    pub fn start(workdir: &Path) -> Self {
        Self::start_with(workdir, &[])
    }

    /// Starts with extra global flags such as `--config`.
    pub fn start_with(workdir: &Path, flags: &[&str]) -> Self {
        use std::io::BufRead;
        let mut child = Command::new(env!("CARGO_BIN_EXE_clonetts"))
            .arg("--workdir")
            .arg(workdir)
            .args(flags)
            .args(["serve", "--addr", "127.0.0.1:0"])
            .stdout(std::process::Stdio::piped())
            .stderr(std::process::Stdio::inherit())
            .spawn()
            .expect("spawn server");
        let mut line = String::new();
        std::io::BufReader::new(child.stdout.take().unwrap()).read_line(&mut line).unwrap();
        let base = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected banner {line:?}")).to_string();
        Self { child, base }
    }

    pub fn url(&self, path: &str) -> String {
        format!("{}{path}", self.base)
    }

    /// SIGKILL: no shutdown code runs.
    pub fn crash(mut self) {
        self.child.kill().unwrap();
        self.child.wait().unwrap();
    }
}

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Answers the current item of `session` with a fixed valid value; returns
/// the item id and the acknowledgment.
pub fn answer_next(client: &reqwest::blocking::Client, server: &Server, session: &str) -> Option<(u64, serde_json::Value)> {
    let next: serde_json::Value = client.get(server.url(&format!("/sessions/{session}/next"))).send().unwrap().json().unwrap();
    if next["status"] == "complete" {
        return None;
    }
    let item = next["item_id"].as_u64().unwrap();
    let value = if next["kind"] == "mos" { serde_json::json!(1 + item % 5) } else { serde_json::json!(["A", "B", "Same"][item as usize % 3]) };
    let resp = client
        .post(server.url(&format!("/sessions/{session}/ratings")))
        .json(&serde_json::json!({ "item_id": item, "value": value }))
        .send()
        .unwrap();
    assert!(resp.status().is_success(), "{}", resp.text().unwrap());
    Some((item, resp.json().unwrap()))
}
