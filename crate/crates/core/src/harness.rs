//! Benchmark harness: evaluation-time models, multi-trial simulated
//! experiments, progress traces, and relative-speedup analysis.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::controller::{SimController, TimeModel, TraceRow};
use crate::design::DesignKind;
use crate::error::{Error, Result};
use crate::problem::ProblemSpec;
use crate::rbf::KernelKind;
use crate::strategy::{Mode, SamplerKind, StrategyConfig};

/// Heavy-tailed evaluation-time model: density `alpha b^alpha / x^(alpha+1)`
/// on `[b, inf)`. Shapes above 1 keep the mean finite.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ParetoTimeModel {
    pub alpha: f64,
    pub scale: f64,
}

impl ParetoTimeModel {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 1.0) {
            return Err(Error::Config(format!(
                "Pareto shape must exceed 1 for a finite mean (got {alpha})"
            )));
        }
        Ok(ParetoTimeModel { alpha, scale: 1.0 })
    }

    /// Inverse-CDF draw `x = b * u^(-1/alpha)` with `u` uniform in (0, 1].
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u = 1.0 - rng.gen::<f64>();
        self.scale * u.powf(-1.0 / self.alpha)
    }

    /// Deterministic quantile: the sample obtained from uniform draw `u`.
    pub fn quantile(&self, u: f64) -> f64 {
        self.scale * u.powf(-1.0 / self.alpha)
    }

    pub fn mean(&self) -> f64 {
        self.alpha * self.scale / (self.alpha - 1.0)
    }

    /// Standard deviation; infinite for shapes at or below 2.
    pub fn std(&self) -> f64 {
        if self.alpha <= 2.0 {
            return f64::INFINITY;
        }
        let a = self.alpha;
        (a * self.scale * self.scale / ((a - 1.0) * (a - 1.0) * (a - 2.0))).sqrt()
    }
}

/// Configuration echo carried by every trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceConfig {
    pub problem: String,
    pub dim: usize,
    pub mode: String,
    pub workers: usize,
    /// Pareto shape; `None` means constant unit durations.
    pub alpha: Option<f64>,
    pub budget: usize,
    /// `None` when the run had no simulated-time bound (infinity does not
    /// survive a JSON round trip).
    pub t_max: Option<f64>,
    pub seed: u64,
    pub optimum: f64,
}

/// Per-trial record of every completed evaluation, in completion order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ProgressTrace {
    pub config: TraceConfig,
    pub trial: u32,
    pub rows: Vec<TraceRow>,
}

/// One benchmark experiment: a problem, an execution mode, a time model,
/// and a trial count.
#[derive(Debug, Clone)]
pub struct ExperimentSpec {
    pub problem: ProblemSpec,
    pub mode: Mode,
    pub alpha: Option<f64>,
    pub budget: usize,
    pub t_max: f64,
    pub trials: u32,
    pub base_seed: u64,
    pub sampler: SamplerKind,
    pub design: DesignKind,
    pub kernel: KernelKind,
    pub num_cand: Option<usize>,
}

impl ExperimentSpec {
    pub fn new(problem: ProblemSpec, mode: Mode, budget: usize, t_max: f64) -> Self {
        ExperimentSpec {
            problem,
            mode,
            alpha: None,
            budget,
            t_max,
            trials: 1,
            base_seed: 0,
            sampler: SamplerKind::Dycors,
            design: DesignKind::Slhd,
            kernel: KernelKind::Cubic,
            num_cand: None,
        }
    }

    fn mode_name(&self) -> String {
        match self.mode {
            Mode::Serial => "serial".into(),
            Mode::Sync { .. } => "sync".into(),
            Mode::Async { .. } => "async".into(),
        }
    }
}

/// Run one seeded trial of an experiment on the simulated-time controller.
pub fn run_trial(spec: &ExperimentSpec, trial: u32) -> Result<ProgressTrace> {
    let seed = spec.base_seed + trial as u64;
    let mut cfg = StrategyConfig::new(spec.problem.clone(), spec.mode, spec.budget, seed);
    cfg.sampler = spec.sampler;
    cfg.design = spec.design;
    cfg.kernel = spec.kernel;
    cfg.num_cand = spec.num_cand;
    let strategy = cfg.build()?;
    let time_model = match spec.alpha {
        Some(a) => TimeModel::pareto(a)?,
        None => TimeModel::Constant(1.0),
    };
    let mut c = SimController::new(
        strategy,
        spec.problem.clone(),
        spec.mode.workers(),
        time_model,
        spec.t_max,
        seed,
    )?;
    c.run()?;
    Ok(ProgressTrace {
        config: TraceConfig {
            problem: spec.problem.name.clone(),
            dim: spec.problem.dim,
            mode: spec.mode_name(),
            workers: spec.mode.workers(),
            alpha: spec.alpha,
            budget: spec.budget,
            t_max: spec.t_max.is_finite().then_some(spec.t_max),
            seed: spec.base_seed,
            optimum: spec.problem.optimum_value,
        },
        trial,
        rows: c.trace,
    })
}

/// Run all trials. Seeds are `base_seed + trial index`, so adding trials
/// never perturbs earlier ones; trials execute in parallel.
pub fn run_experiment(spec: &ExperimentSpec) -> Result<Vec<ProgressTrace>> {
    (0..spec.trials)
        .into_par_iter()
        .map(|t| run_trial(spec, t))
        .collect()
}

// ---------------------------------------------------------------------------
// Speedup analysis
// ---------------------------------------------------------------------------

/// Time-to-target statistics of one configuration at one target.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetStat {
    pub target: f64,
    pub mean_time: Option<f64>,
    pub std_error: Option<f64>,
    pub reached: u32,
    /// Trials that never got under the target; excluded from the mean.
    pub censored: u32,
    pub speedup: Option<f64>,
    pub speedup_se: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ConfigSpeedup {
    pub mode: String,
    pub workers: usize,
    pub alpha: Option<f64>,
    pub per_target: Vec<TargetStat>,
}

/// Relative speedup `S(p) = T(1)/T(p)` at error targets drawn from the
/// intersection of every configuration's achieved-error range.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SpeedupReport {
    /// Absolute-error targets, easiest (largest) first.
    pub targets: Vec<f64>,
    pub configs: Vec<ConfigSpeedup>,
}

fn trace_error(row: &TraceRow, optimum: f64) -> f64 {
    (row.best_so_far - optimum).max(0.0)
}

fn config_key(t: &ProgressTrace) -> (String, usize, String) {
    (
        t.config.mode.clone(),
        t.config.workers,
        format!("{:?}", t.config.alpha),
    )
}

/// First simulated time at which a trial's error drops to `target`, if ever.
fn time_to_target(trace: &ProgressTrace, target: f64) -> Option<f64> {
    let opt = trace.config.optimum;
    trace
        .rows
        .iter()
        .find(|r| trace_error(r, opt) <= target)
        .map(|r| r.t_end)
}

pub fn compute_speedup(traces: &[ProgressTrace], num_targets: usize) -> Result<SpeedupReport> {
    if num_targets == 0 {
        return Err(Error::Speedup("need at least one target".into()));
    }
    // group trials by configuration, preserving first-seen order
    let mut keys: Vec<(String, usize, String)> = Vec::new();
    let mut groups: Vec<Vec<&ProgressTrace>> = Vec::new();
    for t in traces {
        let k = config_key(t);
        match keys.iter().position(|q| *q == k) {
            Some(i) => groups[i].push(t),
            None => {
                keys.push(k);
                groups.push(vec![t]);
            }
        }
    }
    if groups.len() < 2 {
        return Err(Error::Speedup(
            "speedup needs a baseline and at least one parallel configuration".into(),
        ));
    }
    let baseline = groups
        .iter()
        .position(|g| g[0].config.workers == 1)
        .ok_or_else(|| Error::Speedup("no single-worker baseline among the inputs".into()))?;

    // intersection of achieved-error ranges: every configuration starts
    // above the target and has at least one trial that gets below it; trials
    // that stall above a target are censored rather than shrinking the range
    let mut lo = f64::NEG_INFINITY;
    let mut hi = f64::INFINITY;
    for g in &groups {
        let mut best_final = f64::INFINITY;
        for t in g {
            if t.rows.is_empty() {
                return Err(Error::Speedup("empty trace in speedup input".into()));
            }
            let opt = t.config.optimum;
            best_final = best_final.min(trace_error(t.rows.last().unwrap(), opt));
            hi = hi.min(trace_error(&t.rows[0], opt));
        }
        lo = lo.max(best_final);
    }
    let lo = lo.max(1e-12);
    if !(hi > lo) {
        return Err(Error::Speedup(format!(
            "empty error-range intersection (floor {lo:.3e}, ceiling {hi:.3e})"
        )));
    }
    // interior log-spaced targets, easiest first
    let (llo, lhi) = (lo.ln(), hi.ln());
    let targets: Vec<f64> = (1..=num_targets)
        .map(|i| (lhi - (lhi - llo) * i as f64 / (num_targets + 1) as f64).exp())
        .collect();

    let stats_for = |g: &[&ProgressTrace], target: f64| -> (Option<f64>, Option<f64>, u32, u32) {
        let times: Vec<f64> = g.iter().filter_map(|t| time_to_target(t, target)).collect();
        let reached = times.len() as u32;
        let censored = g.len() as u32 - reached;
        if times.is_empty() {
            return (None, None, reached, censored);
        }
        let mean = times.iter().sum::<f64>() / times.len() as f64;
        let se = if times.len() > 1 {
            let var = times.iter().map(|t| (t - mean).powi(2)).sum::<f64>()
                / (times.len() - 1) as f64;
            Some((var / times.len() as f64).sqrt())
        } else {
            Some(0.0)
        };
        (Some(mean), se, reached, censored)
    };

    let base_stats: Vec<_> = targets
        .iter()
        .map(|&t| stats_for(&groups[baseline], t))
        .collect();

    let mut configs = Vec::new();
    for (gi, g) in groups.iter().enumerate() {
        let sample = g[0];
        let mut per_target = Vec::new();
        for (ti, &target) in targets.iter().enumerate() {
            let (mean, se, reached, censored) = stats_for(g, target);
            let (bmean, bse, _, _) = base_stats[ti];
            let (speedup, speedup_se) = match (bmean, mean) {
                (Some(t1), Some(tp)) if tp > 0.0 => {
                    let s = t1 / tp;
                    let rel = [
                        bse.unwrap_or(0.0) / t1,
                        se.unwrap_or(0.0) / tp,
                    ];
                    (Some(s), Some(s * (rel[0] * rel[0] + rel[1] * rel[1]).sqrt()))
                }
                _ => (None, None),
            };
            per_target.push(TargetStat {
                target,
                mean_time: mean,
                std_error: se,
                reached,
                censored,
                speedup: if gi == baseline { Some(1.0) } else { speedup },
                speedup_se: if gi == baseline { Some(0.0) } else { speedup_se },
            });
        }
        configs.push(ConfigSpeedup {
            mode: sample.config.mode.clone(),
            workers: sample.config.workers,
            alpha: sample.config.alpha,
            per_target,
        });
    }
    Ok(SpeedupReport { targets, configs })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmitFormat {
    Csv,
    Json,
}

impl EmitFormat {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(EmitFormat::Csv),
            "json" => Ok(EmitFormat::Json),
            other => Err(Error::Config(format!("unknown format {other:?}"))),
        }
    }
}

/// Write traces as CSV: `trial,eval_index,t_start,t_end,worker,f,best_f`
/// plus `x0..x{d-1}` when `dump_points` is set. The header is always
/// present, even for empty traces.
pub fn write_traces_csv(traces: &[ProgressTrace], path: &Path, dump_points: bool) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    let dim = traces.first().map_or(0, |t| t.config.dim);
    let mut header = vec![
        "trial".to_string(),
        "eval_index".into(),
        "t_start".into(),
        "t_end".into(),
        "worker".into(),
        "f".into(),
        "best_f".into(),
    ];
    if dump_points {
        header.extend((0..dim).map(|i| format!("x{i}")));
    }
    w.write_record(&header).map_err(csv_err)?;
    for t in traces {
        for r in &t.rows {
            let mut rec = vec![
                t.trial.to_string(),
                r.eval_index.to_string(),
                r.t_start.to_string(),
                r.t_end.to_string(),
                r.worker.to_string(),
                r.value.to_string(),
                r.best_so_far.to_string(),
            ];
            if dump_points {
                rec.extend(r.point.iter().map(|v| v.to_string()));
            }
            w.write_record(&rec).map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_traces_json(traces: &[ProgressTrace], path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(traces)?)?;
    Ok(())
}

pub fn read_traces_json(path: &Path) -> Result<Vec<ProgressTrace>> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}

pub fn write_report_json(report: &SpeedupReport, path: &Path) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Flat CSV view of a speedup report, one row per (config, target).
pub fn write_report_csv(report: &SpeedupReport, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
    w.write_record([
        "mode", "workers", "alpha", "target", "mean_time", "std_error", "reached", "censored",
        "speedup", "speedup_se",
    ])
    .map_err(csv_err)?;
    let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
    for c in &report.configs {
        for s in &c.per_target {
            w.write_record([
                c.mode.clone(),
                c.workers.to_string(),
                opt(c.alpha),
                s.target.to_string(),
                opt(s.mean_time),
                opt(s.std_error),
                s.reached.to_string(),
                s.censored.to_string(),
                opt(s.speedup),
                opt(s.speedup_se),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}
