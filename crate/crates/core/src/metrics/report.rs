use std::fmt::Write as _;
use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use super::{f0_rmse_log, fwsnrseg, mcd};
use crate::dsp::{estimate_f0, extract_mcep, load_wav, resample, AudioBuffer};
use crate::error::{Error, Result};
use crate::SAMPLE_RATE;

pub const CSV_HEADER: &str = "utterance,mcd_db,fwsnrseg_db,rmse_logf0";

/// One target/converted file pair to score.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub name: String,
    pub target: PathBuf,
    pub converted: PathBuf,
}

#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceScores {
    pub name: String,
    pub mcd_db: f64,
    pub fwsnrseg_db: f64,
    pub rmse_logf0: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkippedUtterance {
    pub name: String,
    pub reason: String,
}

/// Per-utterance scores in input order, plus anything that could not be scored.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MetricReport {
    pub rows: Vec<UtteranceScores>,
    pub skipped: Vec<SkippedUtterance>,
}

impl MetricReport {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// Arithmetic means over the scored utterances.
    pub fn mean(&self) -> Option<UtteranceScores> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let avg = |f: fn(&UtteranceScores) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(UtteranceScores {
            name: "MEAN".into(),
            mcd_db: avg(|r| r.mcd_db),
            fwsnrseg_db: avg(|r| r.fwsnrseg_db),
            rmse_logf0: avg(|r| r.rmse_logf0),
        })
    }

    /// Header, one row per scored utterance, then a `MEAN` row.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER}\n");
        let nan = UtteranceScores { name: "MEAN".into(), mcd_db: f64::NAN, fwsnrseg_db: f64::NAN, rmse_logf0: f64::NAN };
        let mean = self.mean().unwrap_or(nan);
        for r in self.rows.iter().chain(std::iter::once(&mean)) {
            writeln!(out, "{},{:.6},{:.6},{:.6}", r.name, r.mcd_db, r.fwsnrseg_db, r.rmse_logf0).unwrap();
        }
        out
    }
}

fn to_eval_rate(buf: AudioBuffer) -> Result<AudioBuffer> {
    if buf.sample_rate == SAMPLE_RATE {
        Ok(buf)
    } else {
        resample(&buf, SAMPLE_RATE)
    }
}

/// All three measures for one pair of waveforms at any sample rates.
pub fn evaluate_pair(name: &str, target: &AudioBuffer, converted: &AudioBuffer) -> Result<UtteranceScores> {
    let t = to_eval_rate(target.clone())?;
    let c = to_eval_rate(converted.clone())?;
    Ok(UtteranceScores {
        name: name.to_string(),
        mcd_db: mcd(&extract_mcep(&t)?, &extract_mcep(&c)?)?,
        fwsnrseg_db: fwsnrseg(&t, &c)?,
        rmse_logf0: f0_rmse_log(&estimate_f0(&t)?, &estimate_f0(&c)?)?,
    })
}

fn score_files(pair: &EvalPair) -> Result<UtteranceScores> {
    let t = load_wav(&pair.target)?;
    let c = load_wav(&pair.converted)?;
    evaluate_pair(&pair.name, &t, &c)
}

/// Scores every pair, spreading utterances over the available cores.
/// Failures become named skip entries; the report keeps input order.
pub fn evaluate_corpus(pairs: &[EvalPair]) -> Result<MetricReport> {
    if pairs.is_empty() {
        return Err(Error::Contract("no utterance pairs to evaluate".into()));
    }
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(pairs.len());
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<UtteranceScores>>>> = Mutex::new((0..pairs.len()).map(|_| None).collect());
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(pair) = pairs.get(i) else { break };
                let r = score_files(pair);
                results.lock().expect("no poisoned workers")[i] = Some(r);
            });
        }
    });
    let mut report = MetricReport::default();
    for (pair, r) in pairs.iter().zip(results.into_inner().expect("no poisoned workers")) {
        match r.expect("every pair scored") {
            Ok(row) => report.rows.push(row),
            Err(e) => {
                log::warn!("skipping {}: {e}", pair.name);
                report.skipped.push(SkippedUtterance { name: pair.name.clone(), reason: e.to_string() });
            }
        }
    }
    Ok(report)
}
