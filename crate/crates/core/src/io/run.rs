//! The run loop: drive an [`Engine`] over a record stream, emit one JSON
//! line per sample and a summary.

use std::io::Write;
use crate::clock::Stopwatch;

use serde::{Deserialize, Serialize};

use super::format::SampleRecord;
use crate::caches::{CacheKind, CacheToggles, KindStats};
use crate::error::{Error, Result};
use crate::inference::{Engine, EngineConfig, TermToggles, WarningCounters};
use crate::tuning::LossToggles;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleLog {
    pub index: u64,
    pub label: Option<usize>,
    pub pred: usize,
    pub zero_shot_pred: usize,
    pub correct: Option<bool>,
    /// Running top-1 accuracy over labeled samples seen so far.
    pub running_accuracy: Option<f64>,
    pub zero_shot_entropy: f64,
    pub confidence: f64,
    pub entropy_stored: bool,
    pub align_stored: bool,
    pub reflected: bool,
    pub negative_stored: bool,
    pub reconsidered: bool,
    pub discarded: bool,
    pub occupancy: [usize; 3],
    pub loss: Option<f64>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CacheReport {
    pub occupancy: usize,
    pub capacity: usize,
    pub admitted: u64,
    pub replaced: u64,
    pub rejected: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RouteCounts {
    pub reflected: u64,
    pub reconsidered: u64,
    pub discarded: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub mode: String,
    pub samples: u64,
    pub labeled: u64,
    /// Top-1 accuracy in percent over labeled samples.
    pub accuracy: Option<f64>,
    pub zero_shot_accuracy: Option<f64>,
    pub entropy_cache: CacheReport,
    pub align_cache: CacheReport,
    pub negative_cache: CacheReport,
    pub routes: RouteCounts,
    /// Mean tuning loss before each step (MCP++ only).
    pub mean_loss: Option<f64>,
    pub caches: CacheToggles,
    pub losses: LossToggles,
    pub terms: TermToggles,
    pub warnings: WarningCounters,
    pub reader_warnings: u64,
    pub wall_time_s: f64,
    pub completed: bool,
    pub error: Option<String>,
}

impl RunSummary {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Debug, Default)]
struct Tally {
    samples: u64,
    labeled: u64,
    hits: u64,
    zs_hits: u64,
    routes: RouteCounts,
    loss_sum: f64,
    loss_count: u64,
}

impl Tally {
    fn accuracy(&self) -> Option<f64> {
        (self.labeled > 0).then(|| 100.0 * self.hits as f64 / self.labeled as f64)
    }
}

fn cache_report(engine: &Engine, kind: CacheKind) -> CacheReport {
    let bank = engine.bank();
    let KindStats {
        admitted,
        replaced,
        rejected,
    } = bank.stats(kind);
    let hp = &engine.config().hp;
    let per_class = match kind {
        CacheKind::Entropy => hp.m_entropy,
        CacheKind::Align => hp.m_align,
        CacheKind::Negative => hp.m_negative,
    };
    CacheReport {
        occupancy: bank.occupancy(kind),
        capacity: per_class * bank.classes(),
        admitted,
        replaced,
        rejected,
    }
}

/// Result of a run. `summary` is always filled (partially if the run
/// failed); `error` carries the failure.
#[derive(Debug)]
pub struct RunOutcome {
    pub summary: RunSummary,
    pub error: Option<Error>,
}

impl RunOutcome {
    pub fn into_result(self) -> Result<RunSummary> {
        match self.error {
            None => Ok(self.summary),
            Some(e) => Err(e),
        }
    }
}

/// Process `records` in order with `engine`. Per-sample logs go to `log`
/// (one JSON object per line) when given. The summary is built even if a
/// record or the engine fails midway.
pub fn run_engine<I>(engine: &mut Engine, records: I, mut log: Option<&mut dyn Write>) -> RunOutcome
where
    I: IntoIterator<Item = Result<SampleRecord>>,
{
    let start = Stopwatch::start();
    let mut tally = Tally::default();
    let mut error = None;
    for rec in records {
        if let Err(e) = step(engine, rec, &mut tally, &mut log) {
            error = Some(e);
            break;
        }
    }
    if let Some(w) = log.as_mut() {
        if let Err(e) = w.flush() {
            error.get_or_insert(e.into());
        }
    }
    let summary = RunSummary {
        mode: engine.config().mode.name().to_string(),
        samples: tally.samples,
        labeled: tally.labeled,
        accuracy: tally.accuracy(),
        zero_shot_accuracy: (tally.labeled > 0).then(|| 100.0 * tally.zs_hits as f64 / tally.labeled as f64),
        entropy_cache: cache_report(engine, CacheKind::Entropy),
        align_cache: cache_report(engine, CacheKind::Align),
        negative_cache: cache_report(engine, CacheKind::Negative),
        routes: tally.routes,
        mean_loss: (tally.loss_count > 0).then(|| tally.loss_sum / tally.loss_count as f64),
        caches: engine.config().caches,
        losses: engine.config().losses,
        terms: engine.config().terms,
        warnings: engine.warnings(),
        reader_warnings: 0,
        wall_time_s: start.seconds(),
        completed: error.is_none(),
        error: error.as_ref().map(ToString::to_string),
    };
    RunOutcome { summary, error }
}

fn step(engine: &mut Engine, rec: Result<SampleRecord>, tally: &mut Tally, log: &mut Option<&mut dyn Write>) -> Result<()> {
    let rec = rec?;
    if let Some(l) = rec.label {
        if l >= engine.classes() {
            return Err(Error::invalid(format!("label {l} out of range")));
        }
    }
    let p = engine.predict(&rec.views)?;
    let pred = p.breakdown.pred;
    let correct = rec.label.map(|l| l == pred);
    tally.samples += 1;
    if let Some(l) = rec.label {
        tally.labeled += 1;
        tally.hits += u64::from(l == pred);
        tally.zs_hits += u64::from(l == p.zero_shot_pred);
    }
    tally.routes.reflected += u64::from(p.route.reflected);
    tally.routes.reconsidered += u64::from(p.route.reconsidered);
    tally.routes.discarded += u64::from(p.route.discarded);
    if let Some(l) = p.loss {
        tally.loss_sum += l;
        tally.loss_count += 1;
    }
    if let Some(w) = log.as_mut() {
        let entry = SampleLog {
            index: tally.samples - 1,
            label: rec.label,
            pred,
            zero_shot_pred: p.zero_shot_pred,
            correct,
            running_accuracy: tally.accuracy(),
            zero_shot_entropy: p.zero_shot_entropy,
            confidence: p.breakdown.probs.as_slice()[pred],
            entropy_stored: p.route.entropy_stored,
            align_stored: p.route.align_stored,
            reflected: p.route.reflected,
            negative_stored: p.route.negative_stored,
            reconsidered: p.route.reconsidered,
            discarded: p.route.discarded,
            occupancy: crate::inference::occupancy(engine.bank()),
            loss: p.loss,
        };
        serde_json::to_writer(&mut **w, &entry).map_err(|e| Error::Io(e.into()))?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

/// Build an engine from prompts and run it over in-memory records; returns
/// the summary or the first error.
pub fn run_records(prompts: &[Vec<Vec<f64>>], cfg: &EngineConfig, records: &[SampleRecord]) -> Result<RunSummary> {
    let mut engine = Engine::from_prompts(prompts, cfg.clone())?;
    run_engine(&mut engine, records.iter().cloned().map(Ok), None).into_result()
}
