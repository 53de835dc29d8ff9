//! Subjective and objective evaluation: MOS with 95% confidence intervals,
//! A/B preference with an exact sign test, real-time factor, seeded
//! presentation shuffles and the ratings record format.

use std::collections::BTreeMap;
use std::fmt;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autograd::logsumexp;

pub const Z_95: f64 = 1.96;
pub const DEFAULT_RTF_RUNS: usize = 10;

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error("rating {0} outside 1..=5")]
    RatingRange(i64),
    #[error("need at least 2 ratings for a confidence interval, got {0}")]
    TooFewRatings(usize),
    #[error("no votes")]
    NoVotes,
    #[error("empty test set")]
    EmptyTestSet,
    #[error("item {0} produced no audio")]
    ZeroDuration(usize),
    #[error("synthesis failed on item {item}: {reason}")]
    Synthesis { item: usize, reason: String },
    #[error("line {line}: {reason}")]
    Parse { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MosSummary {
    pub mean: f64,
    pub half_width: f64,
    pub n: usize,
}

impl fmt::Display for MosSummary {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:.2} ± {:.2}", self.mean, self.half_width)
    }
}

/// Mean and normal-approximation 95% half-width `1.96·s/√n`.
pub fn mos_summary(ratings: &[i64]) -> Result<MosSummary, EvalError> {
    if let Some(&bad) = ratings.iter().find(|r| !(1..=5).contains(*r)) {
        return Err(EvalError::RatingRange(bad));
    }
    let n = ratings.len();
    if n < 2 {
        return Err(EvalError::TooFewRatings(n));
    }
    let mean = ratings.iter().sum::<i64>() as f64 / n as f64;
    let var = ratings.iter().map(|&r| (r as f64 - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    Ok(MosSummary { mean, half_width: Z_95 * var.sqrt() / (n as f64).sqrt(), n })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum AbVote {
    A,
    B,
    Same,
}

impl AbVote {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "A" => Some(Self::A),
            "B" => Some(Self::B),
            "Same" => Some(Self::Same),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Self::A => "A",
            Self::B => "B",
            Self::Same => "Same",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbResult {
    pub count_a: usize,
    pub count_b: usize,
    pub count_same: usize,
    pub pct_a: f64,
    pub pct_b: f64,
    pub pct_same: f64,
    /// Two-sided exact sign test over non-tie votes; absent with all ties.
    pub p_value: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub p_absent_reason: Option<String>,
}

impl AbResult {
    /// `"64.375 / 15.625 / 20.000"`.
    pub fn percentages(&self) -> String {
        format!("{:.3} / {:.3} / {:.3}", self.pct_a, self.pct_b, self.pct_same)
    }
}

pub fn ab_preference(votes: &[AbVote]) -> Result<AbResult, EvalError> {
    if votes.is_empty() {
        return Err(EvalError::NoVotes);
    }
    let count = |v| votes.iter().filter(|&&x| x == v).count();
    let (a, b, s) = (count(AbVote::A), count(AbVote::B), count(AbVote::Same));
    let total = votes.len() as f64;
    let (p_value, p_absent_reason) = if a + b == 0 {
        (None, Some("no non-tie votes".to_string()))
    } else {
        (Some(sign_test_p(a as u64, (a + b) as u64)), None)
    };
    Ok(AbResult {
        count_a: a,
        count_b: b,
        count_same: s,
        pct_a: 100.0 * a as f64 / total,
        pct_b: 100.0 * b as f64 / total,
        pct_same: 100.0 * s as f64 / total,
        p_value,
        p_absent_reason,
    })
}

/// Two-sided exact binomial p-value for `k` successes in `n` fair-coin
/// trials: `min(1, 2·P(X ≤ min(k, n−k)))`, summed in log space.
pub fn sign_test_p(k: u64, n: u64) -> f64 {
    assert!(k <= n && n > 0);
    let tail = k.min(n - k);
    let ln2 = std::f64::consts::LN_2;
    let mut ln_c = 0.0; // ln C(n, 0)
    let mut terms = Vec::with_capacity(tail as usize + 1);
    for i in 0..=tail {
        terms.push(ln_c - n as f64 * ln2);
        ln_c += ((n - i) as f64).ln() - ((i + 1) as f64).ln();
    }
    (2.0 * logsumexp(&terms).exp()).min(1.0)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RtfReport {
    pub rtf: f64,
    pub runs: usize,
    pub per_run: Vec<f64>,
}

/// Times `synth` over the whole test set `runs` times after one untimed
/// warm-up pass. `synth` returns the produced audio duration in seconds;
/// each run's RTF is total wall time over total audio, and the report mean
/// averages the runs.
pub fn rtf_measure<T, E: fmt::Display>(
    test_set: &[T],
    runs: usize,
    mut synth: impl FnMut(&T) -> Result<f64, E>,
) -> Result<RtfReport, EvalError> {
    if test_set.is_empty() {
        return Err(EvalError::EmptyTestSet);
    }
    let runs = runs.max(1);
    let mut pass = |timed: bool| -> Result<f64, EvalError> {
        let mut wall = Duration::ZERO;
        let mut audio = 0.0;
        for (i, item) in test_set.iter().enumerate() {
            let t0 = Instant::now();
            let secs = synth(item).map_err(|e| EvalError::Synthesis { item: i, reason: e.to_string() })?;
            wall += t0.elapsed();
            if !(secs > 0.0) {
                return Err(EvalError::ZeroDuration(i));
            }
            audio += secs;
        }
        Ok(if timed { wall.as_secs_f64() / audio } else { 0.0 })
    };
    pass(false)?;
    let per_run = (0..runs).map(|_| pass(true)).collect::<Result<Vec<_>, _>>()?;
    Ok(RtfReport { rtf: per_run.iter().sum::<f64>() / runs as f64, runs, per_run })
}

/// Seeded permutation of `items`.
pub fn shuffle_samples<T: Clone>(items: &[T], seed: u64) -> Vec<T> {
    let mut out = items.to_vec();
    out.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RatingKind {
    Mos,
    Ab,
}

/// A MOS score or an A/B choice.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RatingValue {
    Score(i64),
    Choice(AbVote),
}

/// One line of the ratings dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RatingRecord {
    pub session: String,
    pub listener: String,
    /// Canonical (pre-shuffle) item id.
    pub item: usize,
    pub kind: RatingKind,
    pub value: RatingValue,
    /// System rated by a MOS item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub system: Option<String>,
    /// Systems behind choices A and B of an A/B item.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub systems: Option<[String; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenario: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<u64>,
}

impl RatingRecord {
    /// Value type matches the kind, and MOS scores are in range.
    pub fn validate(&self) -> Result<(), String> {
        match (self.kind, &self.value) {
            (RatingKind::Mos, RatingValue::Score(s)) if (1..=5).contains(s) => Ok(()),
            (RatingKind::Mos, RatingValue::Score(s)) => Err(format!("MOS score {s} outside 1..=5")),
            (RatingKind::Ab, RatingValue::Choice(_)) => Ok(()),
            (kind, value) => Err(format!("value {value:?} does not fit kind {kind:?}")),
        }
    }
}

pub fn parse_ratings(text: &str) -> Result<Vec<RatingRecord>, EvalError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: RatingRecord =
            serde_json::from_str(line).map_err(|e| EvalError::Parse { line: i + 1, reason: e.to_string() })?;
        rec.validate().map_err(|reason| EvalError::Parse { line: i + 1, reason })?;
        out.push(rec);
    }
    Ok(out)
}

pub fn ratings_to_jsonl(records: &[RatingRecord]) -> String {
    records.iter().map(|r| serde_json::to_string(r).expect("rating serializes") + "\n").collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MosRow {
    pub system: String,
    pub summary: MosSummary,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AbRow {
    pub system_a: String,
    pub system_b: String,
    pub result: AbResult,
}

/// Table-1/Table-2 shaped summary of a ratings dataset.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub mos: Vec<MosRow>,
    pub ab: Vec<AbRow>,
    pub notices: Vec<String>,
}

pub fn build_report(records: &[RatingRecord]) -> Result<EvalReport, EvalError> {
    let mut mos: BTreeMap<String, Vec<i64>> = BTreeMap::new();
    let mut ab: BTreeMap<(String, String), Vec<AbVote>> = BTreeMap::new();
    for r in records {
        match &r.value {
            RatingValue::Score(s) => mos.entry(r.system.clone().unwrap_or_else(|| "unlabeled".into())).or_default().push(*s),
            RatingValue::Choice(v) => {
                let [a, b] = r.systems.clone().unwrap_or_else(|| ["A".into(), "B".into()]);
                ab.entry((a, b)).or_default().push(*v);
            }
        }
    }
    let mut notices = Vec::new();
    if mos.is_empty() {
        notices.push("no MOS ratings; MOS section omitted".to_string());
    }
    if ab.is_empty() {
        notices.push("no A/B ratings; preference section omitted".to_string());
    }
    let mut mos_rows = Vec::new();
    for (system, ratings) in mos {
        match mos_summary(&ratings) {
            Ok(summary) => mos_rows.push(MosRow { system, summary }),
            Err(EvalError::TooFewRatings(n)) => notices.push(format!("{system}: {n} MOS rating(s), interval needs 2")),
            Err(e) => return Err(e),
        }
    }
    let ab_rows = ab
        .into_iter()
        .map(|((system_a, system_b), votes)| Ok(AbRow { system_a, system_b, result: ab_preference(&votes)? }))
        .collect::<Result<_, EvalError>>()?;
    Ok(EvalReport { mos: mos_rows, ab: ab_rows, notices })
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if !self.mos.is_empty() {
            writeln!(f, "MOS (95% CI)")?;
            for row in &self.mos {
                writeln!(f, "  {} → {}  (n={})", row.system, row.summary, row.summary.n)?;
            }
        }
        for row in &self.ab {
            let p = match row.result.p_value {
                Some(p) => format!("p = {p:.3e}"),
                None => format!("p absent ({})", row.result.p_absent_reason.as_deref().unwrap_or("")),
            };
            writeln!(f, "Preference % ({} / {} / Same)", row.system_a, row.system_b)?;
            writeln!(f, "  {}, {p}", row.result.percentages())?;
        }
        for n in &self.notices {
            writeln!(f, "note: {n}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use num_bigint::BigUint;
    use num_traits::{One, ToPrimitive};
    use proptest::prelude::*;
    use rand::Rng;

    pub(crate) fn table2_votes() -> Vec<AbVote> {
        let mut v = vec![AbVote::A; 103];
        v.extend(vec![AbVote::B; 25]);
        v.extend(vec![AbVote::Same; 32]);
        v
    }

    /// Exact rational `2·Σ_{i≤min(k,n−k)} C(n,i) / 2^n` with big integers.
    fn sign_test_oracle(k: u64, n: u64) -> f64 {
        let tail = k.min(n - k);
        let mut c = BigUint::one();
        let mut sum = BigUint::one();
        for i in 0..tail {
            c = c * BigUint::from(n - i) / BigUint::from(i + 1);
            sum += &c;
        }
        let num = sum * 2u32;
        let den = BigUint::one() << n;
        (ln_big(&num) - ln_big(&den)).exp().min(1.0)
    }

    /// Natural log of a big integer via its top 60 bits.
    fn ln_big(x: &BigUint) -> f64 {
        let shift = x.bits().saturating_sub(60);
        (x >> shift).to_f64().unwrap().ln() + shift as f64 * std::f64::consts::LN_2
    }

    #[test]
    fn mos_examples() {
        let s = mos_summary(&[4, 4, 4, 4]).unwrap();
        assert_eq!((s.mean, s.half_width), (4.0, 0.0));
        let s = mos_summary(&[3, 4, 5]).unwrap();
        assert_eq!(s.mean, 4.0);
        assert!((s.half_width - 1.96 / 3f64.sqrt()).abs() < 1e-12);
        assert!((s.half_width - 1.1316).abs() < 1e-4);
        assert_eq!(format!("{}", MosSummary { mean: 2.74, half_width: 0.09, n: 10 }), "2.74 ± 0.09");
        assert_eq!(mos_summary(&[6, 3]), Err(EvalError::RatingRange(6)));
        assert_eq!(mos_summary(&[3]), Err(EvalError::TooFewRatings(1)));
    }

    #[test]
    fn table2_reconstruction() {
        let r = ab_preference(&table2_votes()).unwrap();
        assert_eq!((r.pct_a, r.pct_b, r.pct_same), (64.375, 15.625, 20.0));
        assert_eq!(r.percentages(), "64.375 / 15.625 / 20.000");
        let p = r.p_value.unwrap();
        assert!(p < 0.01);
        let oracle = sign_test_oracle(103, 128);
        assert!((p - oracle).abs() <= 1e-9 * oracle, "{p} vs {oracle}");
        let ties = ab_preference(&[AbVote::Same; 5]).unwrap();
        assert_eq!((ties.pct_a, ties.pct_b, ties.pct_same), (0.0, 0.0, 100.0));
        assert!(ties.p_value.is_none() && ties.p_absent_reason.is_some());
        assert_eq!(ab_preference(&[]), Err(EvalError::NoVotes));
    }

    #[test]
    fn sign_test_against_big_integer_oracle() {
        for (k, n) in [(0, 1), (1, 1), (3, 6), (0, 10), (7, 20), (500, 1000), (1, 1500), (700, 1500)] {
            let (p, o) = (sign_test_p(k, n), sign_test_oracle(k, n));
            assert!((p - o).abs() <= 1e-9 * o.max(1e-300), "k={k} n={n}: {p} vs {o}");
        }
    }

    #[test]
    fn rtf_with_calibrated_stubs() {
        let items = [1.0, 0.5, 0.5];
        for factor in [0.02, 0.05, 0.1] {
            let r = rtf_measure(&items, DEFAULT_RTF_RUNS, |&secs: &f64| {
                std::thread::sleep(Duration::from_secs_f64(secs * factor));
                Ok::<_, String>(secs)
            })
            .unwrap();
            assert_eq!(r.per_run.len(), 10);
            assert!((r.rtf - factor).abs() <= 0.1 * factor, "factor {factor}: {}", r.rtf);
        }
        let fast = rtf_measure(&items, 3, |&s: &f64| Ok::<_, String>(s)).unwrap();
        assert!(fast.rtf < 1e-3 && fast.runs == 3);
        assert_eq!(rtf_measure(&[] as &[f64], 1, |&s: &f64| Ok::<_, String>(s)), Err(EvalError::EmptyTestSet));
        assert_eq!(rtf_measure(&[0.0], 1, |&s: &f64| Ok::<_, String>(s)), Err(EvalError::ZeroDuration(0)));
    }

    #[test]
    fn shuffle_is_uniform_permutation() {
        let items = [0usize, 1, 2, 3];
        let mut firsts = [0usize; 4];
        for seed in 0..1000 {
            let s = shuffle_samples(&items, seed);
            let mut sorted = s.clone();
            sorted.sort();
            assert_eq!(sorted, items);
            firsts[s[0]] += 1;
        }
        assert!(firsts.iter().all(|&c| (200..=300).contains(&c)), "{firsts:?}");
        assert_eq!(shuffle_samples(&items, 9), shuffle_samples(&items, 9));
    }

    #[test]
    fn half_width_shrinks_as_inverse_sqrt_n() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let sizes = [50usize, 200, 800, 3200, 12800];
        let pts: Vec<(f64, f64)> = sizes
            .iter()
            .map(|&n| {
                let r: Vec<i64> = (0..n).map(|_| rng.gen_range(1..=5)).collect();
                ((n as f64).ln(), mos_summary(&r).unwrap().half_width.ln())
            })
            .collect();
        let mx = pts.iter().map(|p| p.0).sum::<f64>() / pts.len() as f64;
        let my = pts.iter().map(|p| p.1).sum::<f64>() / pts.len() as f64;
        let slope = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum::<f64>()
            / pts.iter().map(|p| (p.0 - mx).powi(2)).sum::<f64>();
        assert!((slope + 0.5).abs() < 0.1, "{slope}");
    }

    #[test]
    fn ratings_parse_and_report() {
        let text = concat!(
            r#"{"session":"s1","listener":"l1","item":0,"kind":"mos","value":3,"system":"VAENAR"}"#, "\n",
            r#"{"session":"s1","listener":"l1","item":1,"kind":"mos","value":5,"system":"VAENAR"}"#, "\n",
            "\n",
            r#"{"session":"s1","listener":"l1","item":2,"kind":"ab","value":"A","systems":["VAENAR","Tacotron"]}"#, "\n",
        );
        let recs = parse_ratings(text).unwrap();
        assert_eq!(recs.len(), 3);
        assert_eq!(parse_ratings(&ratings_to_jsonl(&recs)).unwrap(), recs);
        let report = build_report(&recs).unwrap();
        assert_eq!(report.mos[0].summary, mos_summary(&[3, 5]).unwrap());
        assert_eq!(report.ab[0].result, ab_preference(&[AbVote::A]).unwrap());
        let bad = r#"{"session":"s","listener":"l","item":0,"kind":"mos","value":"A"}"#;
        assert!(matches!(parse_ratings(&format!("\n{bad}\n")), Err(EvalError::Parse { line: 2, .. })));
        let only_ab = build_report(&recs[2..]).unwrap();
        assert!(only_ab.mos.is_empty() && only_ab.notices.iter().any(|n| n.contains("MOS section omitted")));
    }

    proptest! {
        #[test]
        fn mos_permutation_invariant(mut r in proptest::collection::vec(1i64..=5, 2..40), seed in 0u64..1000) {
            let a = mos_summary(&r).unwrap();
            r.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let b = mos_summary(&r).unwrap();
            prop_assert!((a.mean - b.mean).abs() < 1e-12 && (a.half_width - b.half_width).abs() < 1e-12);
        }

        #[test]
        fn ab_invariances(votes in proptest::collection::vec(0u8..3, 1..80), seed in 0u64..1000) {
            let v: Vec<AbVote> = votes.iter().map(|&x| [AbVote::A, AbVote::B, AbVote::Same][x as usize]).collect();
            let r = ab_preference(&v).unwrap();
            prop_assert!((r.pct_a + r.pct_b + r.pct_same - 100.0).abs() < 1e-9);
            let shuffled = shuffle_samples(&v, seed);
            prop_assert_eq!(ab_preference(&shuffled).unwrap(), r.clone());
            let swapped: Vec<AbVote> = v.iter().map(|x| match x { AbVote::A => AbVote::B, AbVote::B => AbVote::A, s => *s }).collect();
            prop_assert_eq!(ab_preference(&swapped).unwrap().p_value, r.p_value);
            if let Some(p) = r.p_value {
                prop_assert!(p > 0.0 && p <= 1.0);
            }
        }
    }
}
