//! Iterative compression loop and its report.
//!
//! Each iteration measures accuracy, plans ranks, factorizes every layer the
//! plan selects, fine-tunes and measures again. An iteration is kept only if
//! both its own accuracy drop and the drop against the original model stay
//! below the threshold; otherwise it is discarded and the previous model is
//! returned.
//!
//! Reports are split in two. `report.json` and `report.txt` depend only on
//! seeds and inputs, so reruns reproduce them byte for byte. Wall-clock
//! forward times live in `timing.json`.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use log::info;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    count, decompose_conv, decompose_fc, fold_batchnorm, refactor_conv, refactor_fc, Layer,
    ModelGraph,
};
use crate::rank::{build_rank_plan, RankMode, RankPlan};
use crate::runtime::{evaluate_accuracy, time_forward, train_epochs, Dataset, TrainConfig};

pub const REPORT_JSON: &str = "report.json";
pub const REPORT_TXT: &str = "report.txt";
pub const TIMING_JSON: &str = "timing.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StopRule {
    pub max_iterations: usize,
    /// Absolute accuracy drop, so 0.01 is one percentage point.
    pub accuracy_drop_threshold: f64,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule {
            max_iterations: 4,
            accuracy_drop_threshold: 0.01,
        }
    }
}

impl StopRule {
    pub fn validate(&self) -> Result<()> {
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations must be at least 1"));
        }
        let t = self.accuracy_drop_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(Error::invalid(format!("drop threshold {t} is outside (0, 1)")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompressConfig {
    pub mode: RankMode,
    pub train: TrainConfig,
    pub stop: StopRule,
    /// Timed forward sweeps per measurement; the median is kept. Zero
    /// disables timing.
    pub timing_passes: usize,
}

impl Default for CompressConfig {
    fn default() -> Self {
        CompressConfig {
            mode: RankMode::Weakened(crate::rank::DEFAULT_WEAKENING),
            train: TrainConfig::default(),
            stop: StopRule::default(),
            timing_passes: 5,
        }
    }
}

impl CompressConfig {
    pub fn validate(&self) -> Result<()> {
        if let RankMode::Weakened(k) = self.mode {
            crate::rank::check_weakening_factor(k)?;
        }
        self.train.validate()?;
        self.stop.validate()
    }
}

/// Median forward time over the test split, before and after an iteration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Timing {
    pub seconds_before: f64,
    pub seconds_after: f64,
}

impl Timing {
    pub fn speedup(&self) -> Option<f64> {
        (self.seconds_after > 0.0 && self.seconds_before > 0.0)
            .then(|| self.seconds_before / self.seconds_after)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// Zero-based.
    pub iteration: usize,
    pub plans: Vec<RankPlan>,
    pub accuracy_before: f64,
    pub accuracy_after_decomp: f64,
    pub accuracy_after_finetune: f64,
    /// Accuracy lost against the original model.
    pub cumulative_drop: f64,
    pub params_before: u64,
    pub params_after: u64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub fine_tune_epochs: usize,
    /// False for the discarded final iteration.
    pub accepted: bool,
    #[serde(skip)]
    pub timing: Option<Timing>,
}

impl IterationRecord {
    pub fn drop(&self) -> f64 {
        self.accuracy_before - self.accuracy_after_finetune
    }
}

/// Where fine-tuning blew up, if it did.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Divergence {
    pub iteration: usize,
    pub epoch: usize,
}

#[derive(Debug, Clone)]
pub struct Compression {
    /// The last accepted model, or the BN-folded input if none was.
    pub model: ModelGraph,
    pub records: Vec<IterationRecord>,
    pub original_accuracy: f64,
    /// Set when fine-tuning diverged; `records` then ends before that iteration.
    pub diverged: Option<Divergence>,
}

impl Compression {
    pub fn accepted(&self) -> impl Iterator<Item = &IterationRecord> {
        self.records.iter().filter(|r| r.accepted)
    }

    pub fn total_fine_tune_epochs(&self) -> usize {
        self.accepted().map(|r| r.fine_tune_epochs).sum()
    }

    pub fn final_accuracy(&self) -> f64 {
        self.accepted()
            .last()
            .map_or(self.original_accuracy, |r| r.accuracy_after_finetune)
    }
}

/// Replaces every layer the plan selects by its factorized form at the
/// planned ranks. Already factorized layers are re-factorized in place.
pub fn apply_rank_plan(model: &ModelGraph, plans: &[RankPlan]) -> Result<ModelGraph> {
    let mut out = model.clone();
    for plan in plans.iter().filter(|p| p.decomposes()) {
        let rank = |mode| {
            plan.weakened(mode).ok_or_else(|| {
                Error::invalid(format!("plan for layer {} lacks mode {mode}", plan.layer_index))
            })
        };
        let layer = match &model.layers()[plan.layer_index] {
            Layer::Conv(c) => Layer::FactorizedConv(decompose_conv(c, rank(3)?, rank(4)?)?),
            Layer::FactorizedConv(f) => Layer::FactorizedConv(refactor_conv(f, rank(3)?, rank(4)?)?),
            Layer::Fc(f) => Layer::FactorizedFc(decompose_fc(f, rank(1)?)?),
            Layer::FactorizedFc(f) => Layer::FactorizedFc(refactor_fc(f, rank(1)?)?),
            other => {
                return Err(Error::invalid(format!(
                    "layer {} ({}) cannot be decomposed",
                    plan.layer_index,
                    other.kind()
                )))
            }
        };
        out.replace_layer(plan.layer_index, layer)?;
    }
    Ok(out)
}

fn timed(model: &ModelGraph, data: &Dataset, passes: usize) -> Result<f64> {
    if passes == 0 {
        return Ok(0.0);
    }
    time_forward(model, &data.test, passes)
}

/// Runs the iterative low-rank loop. A model with nothing worth
/// decomposing comes back unchanged (after batch-norm folding) with no
/// records.
pub fn compress(model: &ModelGraph, data: &Dataset, cfg: &CompressConfig) -> Result<Compression> {
    cfg.validate()?;
    let mut current = fold_batchnorm(model)?;
    let original_accuracy = evaluate_accuracy(&current, &data.test)?;
    let mut out = Compression {
        model: current.clone(),
        records: Vec::new(),
        original_accuracy,
        diverged: None,
    };
    let threshold = cfg.stop.accuracy_drop_threshold;
    let mut accuracy = original_accuracy;

    for iteration in 0..cfg.stop.max_iterations {
        let plans = match build_rank_plan(&current, cfg.mode) {
            Ok(p) => p,
            Err(Error::NothingToDo(_)) => break,
            Err(e) => return Err(e),
        };
        if !plans.iter().any(RankPlan::decomposes) {
            info!("iteration {iteration}: no layer is worth decomposing");
            break;
        }
        let before = count(&current)?;
        let decomposed = apply_rank_plan(&current, &plans)?;
        let after = count(&decomposed)?;
        let accuracy_after_decomp = evaluate_accuracy(&decomposed, &data.test)?;

        let train_cfg = TrainConfig {
            seed: cfg.train.seed.wrapping_add(iteration as u64),
            ..cfg.train.clone()
        };
        let tuned = match train_epochs(&decomposed, &data.train, Some(&data.test), &train_cfg) {
            Ok(t) => t,
            Err(Error::TrainingDiverged { epoch, .. }) => {
                out.diverged = Some(Divergence { iteration, epoch });
                return Ok(out);
            }
            Err(e) => return Err(e),
        };
        let accuracy_after_finetune = evaluate_accuracy(&tuned.model, &data.test)?;
        let timing = (cfg.timing_passes > 0)
            .then(|| -> Result<Timing> {
                Ok(Timing {
                    seconds_before: timed(&current, data, cfg.timing_passes)?,
                    seconds_after: timed(&tuned.model, data, cfg.timing_passes)?,
                })
            })
            .transpose()?;

        let drop = accuracy - accuracy_after_finetune;
        let cumulative_drop = original_accuracy - accuracy_after_finetune;
        let accepted = drop < threshold
            && cumulative_drop < threshold
            && after.total_params < before.total_params;
        info!(
            "iteration {iteration}: params {} -> {}, accuracy {accuracy:.4} -> {accuracy_after_decomp:.4} -> {accuracy_after_finetune:.4}{}",
            before.total_params,
            after.total_params,
            if accepted { "" } else { " (discarded)" }
        );
        out.records.push(IterationRecord {
            iteration,
            plans,
            accuracy_before: accuracy,
            accuracy_after_decomp,
            accuracy_after_finetune,
            cumulative_drop,
            params_before: before.total_params,
            params_after: after.total_params,
            macs_before: before.total_macs,
            macs_after: after.total_macs,
            fine_tune_epochs: tuned.epochs_run(),
            accepted,
            timing,
        });
        if !accepted {
            break;
        }
        current = tuned.model;
        current.revision += 1;
        accuracy = accuracy_after_finetune;
        out.model = current.clone();
    }
    Ok(out)
}

/// One row of the summary table: a single iteration or the cumulative total.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    /// `None` for the cumulative row.
    pub iteration: Option<usize>,
    pub accepted: bool,
    pub params_before: u64,
    pub params_after: u64,
    pub param_ratio: f64,
    pub macs_before: u64,
    pub macs_after: u64,
    pub mac_ratio: f64,
    #[serde(skip)]
    pub speedup: Option<f64>,
    pub accuracy_before: f64,
    pub accuracy_after_decomp: f64,
    pub accuracy_after: f64,
    /// After minus before; negative means accuracy was lost.
    pub accuracy_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub iterations: Vec<SummaryRow>,
    /// Product over accepted iterations.
    pub cumulative: SummaryRow,
}

fn ratio(before: u64, after: u64) -> f64 {
    if after == 0 {
        1.0
    } else {
        before as f64 / after as f64
    }
}

fn row(r: &IterationRecord) -> SummaryRow {
    SummaryRow {
        iteration: Some(r.iteration),
        accepted: r.accepted,
        params_before: r.params_before,
        params_after: r.params_after,
        param_ratio: ratio(r.params_before, r.params_after),
        macs_before: r.macs_before,
        macs_after: r.macs_after,
        mac_ratio: ratio(r.macs_before, r.macs_after),
        speedup: r.timing.and_then(|t| t.speedup()),
        accuracy_before: r.accuracy_before,
        accuracy_after_decomp: r.accuracy_after_decomp,
        accuracy_after: r.accuracy_after_finetune,
        accuracy_delta: r.accuracy_after_finetune - r.accuracy_before,
    }
}

/// Per-iteration and cumulative ratios. Cumulative figures multiply the
/// accepted iterations' ratios and sum their accuracy deltas.
pub fn report(records: &[IterationRecord]) -> Result<Summary> {
    let first = records
        .first()
        .ok_or_else(|| Error::invalid("report needs at least one iteration record"))?;
    let iterations: Vec<SummaryRow> = records.iter().map(row).collect();
    let accepted: Vec<&SummaryRow> = iterations.iter().filter(|r| r.accepted).collect();
    let last = accepted.last().copied();
    let speedup = accepted
        .iter()
        .map(|r| r.speedup)
        .try_fold(1.0, |acc, s| s.map(|s| acc * s));
    let cumulative = SummaryRow {
        iteration: None,
        accepted: !accepted.is_empty(),
        params_before: first.params_before,
        params_after: last.map_or(first.params_before, |r| r.params_after),
        param_ratio: accepted.iter().map(|r| r.param_ratio).product(),
        macs_before: first.macs_before,
        macs_after: last.map_or(first.macs_before, |r| r.macs_after),
        mac_ratio: accepted.iter().map(|r| r.mac_ratio).product(),
        speedup: if accepted.is_empty() { Some(1.0) } else { speedup },
        accuracy_before: first.accuracy_before,
        accuracy_after_decomp: last.map_or(first.accuracy_before, |r| r.accuracy_after_decomp),
        accuracy_after: last.map_or(first.accuracy_before, |r| r.accuracy_after),
        accuracy_delta: accepted.iter().map(|r| r.accuracy_delta).sum(),
    };
    Ok(Summary {
        iterations,
        cumulative,
    })
}

fn pct(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

impl Summary {
    /// Fixed-width table. Speedups are shown only when `with_timing` is set,
    /// since they vary between runs.
    pub fn to_table(&self, with_timing: bool) -> String {
        let mut s = String::new();
        let _ = write!(
            s,
            "{:>5} {:>9} {:>9} {:>7} {:>7} {:>9} {:>9} {:>9} {:>8}",
            "iter", "params", "->", "size", "MACs", "acc", "decomp", "tuned", "delta"
        );
        if with_timing {
            let _ = write!(s, " {:>8}", "speedup");
        }
        s.push('\n');
        for r in self.iterations.iter().chain(std::iter::once(&self.cumulative)) {
            let label = match r.iteration {
                Some(i) if r.accepted => format!("{}", i + 1),
                Some(i) => format!("{}*", i + 1),
                None => "total".to_string(),
            };
            let _ = write!(
                s,
                "{:>5} {:>9} {:>9} {:>6.2}x {:>6.2}x {:>9} {:>9} {:>9} {:>8}",
                label,
                r.params_before,
                r.params_after,
                r.param_ratio,
                r.mac_ratio,
                pct(r.accuracy_before),
                pct(r.accuracy_after_decomp),
                pct(r.accuracy_after),
                format!("{:+.2}", 100.0 * r.accuracy_delta),
            );
            if with_timing {
                match r.speedup {
                    Some(x) => {
                        let _ = write!(s, " {:>7.2}x", x);
                    }
                    None => {
                        let _ = write!(s, " {:>8}", "-");
                    }
                }
            }
            s.push('\n');
        }
        if self.iterations.iter().any(|r| !r.accepted) {
            s.push_str("* discarded: accuracy drop reached the threshold\n");
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }
}

#[derive(Serialize)]
struct ReportFile<'a, C: Serialize> {
    format: &'static str,
    format_version: u32,
    config: &'a C,
    original_accuracy: f64,
    final_accuracy: f64,
    /// How factorized layers are re-analyzed on later iterations.
    reanalysis: &'static str,
    diverged: Option<Divergence>,
    summary: Option<Summary>,
    records: &'a [IterationRecord],
}

#[derive(Serialize)]
struct TimingFile {
    timing_passes: usize,
    iterations: Vec<Option<Timing>>,
    speedups: Vec<Option<f64>>,
    cumulative_speedup: Option<f64>,
}

/// Writes `report.json`, `report.txt` and `timing.json` into `dir`.
/// `config` is echoed verbatim into the JSON report.
pub fn write_report(
    dir: impl AsRef<Path>,
    config: &impl Serialize,
    result: &Compression,
    timing_passes: usize,
) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let summary = report(&result.records).ok();
    let file = ReportFile {
        format: "lowrank-report",
        format_version: 1,
        config,
        original_accuracy: result.original_accuracy,
        final_accuracy: result.final_accuracy(),
        reanalysis: "factorized layers are re-analyzed on their orthogonalized core",
        diverged: result.diverged,
        summary: summary.clone(),
        records: &result.records,
    };
    let json = serde_json::to_string_pretty(&file)
        .map_err(|e| Error::invalid(format!("report serialization failed: {e}")))?;
    let write = |name: &str, text: String| {
        let path = dir.join(name);
        fs::write(&path, text).map_err(|e| Error::io(&path, e))
    };
    write(REPORT_JSON, json + "\n")?;

    let mut text = format!(
        "original accuracy {}\nfinal accuracy    {}\n\n",
        pct(result.original_accuracy),
        pct(result.final_accuracy())
    );
    match &summary {
        Some(s) => text.push_str(&s.to_table(false)),
        None => text.push_str("no iterations ran\n"),
    }
    if let Some(d) = result.diverged {
        let _ = writeln!(text, "fine-tuning diverged in iteration {} at epoch {}", d.iteration + 1, d.epoch);
    }
    write(REPORT_TXT, text)?;

    let timing = TimingFile {
        timing_passes,
        iterations: result.records.iter().map(|r| r.timing).collect(),
        speedups: summary
            .as_ref()
            .map(|s| s.iterations.iter().map(|r| r.speedup).collect())
            .unwrap_or_default(),
        cumulative_speedup: summary.as_ref().and_then(|s| s.cumulative.speedup),
    };
    let json = serde_json::to_string_pretty(&timing)
        .map_err(|e| Error::invalid(format!("timing serialization failed: {e}")))?;
    write(TIMING_JSON, json + "\n")
}
