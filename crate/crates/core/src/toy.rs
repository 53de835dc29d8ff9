//! Synthetic Mandarin-digit corpus for smoke training and demos.
//!
//! Each utterance reads a random digit string. Every syllable is a harmonic
//! tone at the speaker's pitch, shaped by two formants tied to the syllable,
//! so text, speaker and spectrum are all learnably related.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::dsp::{Waveform, PIPELINE_RATE};

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeaker {
    pub name: String,
    pub f0: f64,
    /// Per-harmonic amplitude decay.
    pub tilt: f64,
}

pub fn toy_speakers(n: usize) -> Vec<ToySpeaker> {
    (0..n)
        .map(|i| ToySpeaker {
            name: format!("spk{i:02}"),
            f0: 110.0 + 100.0 * i as f64,
            tilt: if i % 2 == 0 { 0.92 } else { 0.78 },
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct ToyUtterance {
    pub id: String,
    pub speaker: String,
    pub raw_text: String,
    pub waveform: Waveform,
}

pub const SYLLABLE_SECS: f64 = 0.12;
pub const EDGE_SILENCE_SECS: f64 = 0.04;

/// (F1, F2) in Hz for the digit's reading.
fn formants(digit: u32) -> (f64, f64) {
    const TABLE: [(f64, f64); 10] = [
        (400.0, 2200.0),
        (300.0, 2300.0),
        (550.0, 1300.0),
        (750.0, 1200.0),
        (350.0, 1600.0),
        (320.0, 800.0),
        (450.0, 900.0),
        (280.0, 2500.0),
        (700.0, 1400.0),
        (380.0, 1000.0),
    ];
    TABLE[digit as usize % 10]
}

/// Renders a digit string for one speaker at 16 kHz.
pub fn render_digits<R: Rng + ?Sized>(digits: &str, speaker: &ToySpeaker, rng: &mut R) -> Waveform {
    let rate = f64::from(PIPELINE_RATE);
    let syl = (SYLLABLE_SECS * rate) as usize;
    let edge = (EDGE_SILENCE_SECS * rate) as usize;
    let f0 = speaker.f0 * rng.gen_range(0.97..1.03);
    let ramp = (0.01 * rate) as usize;
    let mut samples = vec![0.0; edge];
    let mut phase_t = 0usize;
    for d in digits.chars().filter_map(|c| c.to_digit(10)) {
        let (f1, f2) = formants(d);
        let harmonics: Vec<(f64, f64)> = (1..)
            .map(|h| (h as f64, h as f64 * f0))
            .take_while(|&(_, f)| f < 4000.0)
            .map(|(h, f)| {
                let bump = |c: f64, bw: f64| (-((f - c) / bw).powi(2)).exp();
                (f, speaker.tilt.powf(h) * (bump(f1, 150.0) + 0.7 * bump(f2, 250.0) + 0.05))
            })
            .collect();
        for i in 0..syl {
            let t = (phase_t + i) as f64 / rate;
            let env = (i.min(syl - 1 - i) as f64 / ramp as f64).min(1.0);
            let v: f64 = harmonics.iter().map(|&(f, a)| a * (2.0 * PI * f * t).sin()).sum();
            samples.push(env * v);
        }
        phase_t += syl;
    }
    samples.extend(std::iter::repeat(0.0).take(edge));
    let peak = samples.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
    if peak > 0.0 {
        for s in &mut samples {
            *s *= 0.5 / peak;
        }
    }
    Waveform::new(samples, PIPELINE_RATE)
}

/// `per_speaker` utterances for each of `n_speakers`, deterministic in `seed`.
pub fn toy_corpus(n_speakers: usize, per_speaker: usize, seed: u64) -> Vec<ToyUtterance> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for spk in toy_speakers(n_speakers) {
        for k in 0..per_speaker {
            let len = rng.gen_range(2..=4);
            let digits: String = (0..len).map(|_| char::from(b'0' + rng.gen_range(0..10u8))).collect();
            let waveform = render_digits(&digits, &spk, &mut rng);
            out.push(ToyUtterance { id: format!("{}_{k:03}", spk.name), speaker: spk.name.clone(), raw_text: digits, waveform });
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_and_sized() {
        let a = toy_corpus(2, 3, 7);
        let b = toy_corpus(2, 3, 7);
        assert_eq!(a.len(), 6);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.waveform, y.waveform);
            let n = x.raw_text.len();
            let expected = (2.0 * EDGE_SILENCE_SECS * 16000.0) as usize + n * (SYLLABLE_SECS * 16000.0) as usize;
            assert_eq!(x.waveform.len(), expected);
            assert!(x.waveform.samples.iter().all(|s| s.abs() <= 0.5 + 1e-12));
        }
    }
}
