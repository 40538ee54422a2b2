//! The optimization strategies: serial / batch-synchronous / asynchronous
//! surrogate loop with an initial-design phase barrier, sampling-radius
//! adaptation, stagnation restarts, and failure retries.

use std::collections::{BTreeMap, VecDeque};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::aux::{
    self, acq_ei, acq_lcb, acq_pi, gen_dycors, gen_srbf, gen_uniform, select_candidates,
    GeneratorKind, RADIUS_TOL, WEIGHT_PATTERN,
};
use crate::controller::{Action, Proposal, Strategy};
use crate::design::{self, DesignKind};
use crate::error::{Error, Result};
use crate::gp::GpModel;
use crate::problem::{Point, ProblemSpec};
use crate::rbf::{median_cap, KernelKind, RbfSurrogate, TailKind};

pub const SIGMA_INIT: f64 = 0.1;
/// Six halvings below the initial radius.
pub const SIGMA_MIN: f64 = SIGMA_INIT * (1.0 / 64.0);
pub const DELTA_IMPROVE: f64 = 1e-3;
/// Absolute significance fallback when the incumbent is exactly zero.
pub const DELTA_ABS: f64 = 1e-8;
pub const DEFAULT_RETRIES: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Serial,
    Sync { workers: usize },
    Async { workers: usize },
}

impl Mode {
    pub fn workers(&self) -> usize {
        match self {
            Mode::Serial => 1,
            Mode::Sync { workers } | Mode::Async { workers } => *workers,
        }
    }

    /// Serial and synchronous modes refit only at batch boundaries.
    pub fn batched(&self) -> bool {
        !matches!(self, Mode::Async { .. })
    }

    pub fn parse(s: &str, workers: usize) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "serial" => Ok(Mode::Serial),
            "sync" => Ok(Mode::Sync { workers }),
            "async" => Ok(Mode::Async { workers }),
            other => Err(Error::Config(format!("unknown mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SamplerKind {
    Srbf,
    Dycors,
    Uniform,
    Ei,
    Pi,
    Lcb,
}

impl SamplerKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "srbf" => Ok(SamplerKind::Srbf),
            "dycors" => Ok(SamplerKind::Dycors),
            "uniform" => Ok(SamplerKind::Uniform),
            "ei" => Ok(SamplerKind::Ei),
            "pi" => Ok(SamplerKind::Pi),
            "lcb" => Ok(SamplerKind::Lcb),
            other => Err(Error::Config(format!("unknown strategy {other:?}"))),
        }
    }

    /// Acquisition samplers run on a GP; the rest on an RBF.
    pub fn uses_gp(&self) -> bool {
        matches!(self, SamplerKind::Ei | SamplerKind::Pi | SamplerKind::Lcb)
    }
}

/// Sampling-radius state and its success/failure counters.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingState {
    pub sigma: f64,
    pub sigma_init: f64,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub c_succ: u32,
    pub c_fail: u32,
    pub f_succ: u32,
    pub f_fail: u32,
    pub m_fail: u32,
    /// Relative significant-improvement tolerance.
    pub delta: f64,
    /// Bumped on every radius change or restart.
    pub radius_epoch: u64,
    pub f_best: f64,
    /// Unit-cube coordinates of the incumbent.
    pub x_best: Option<Vec<f64>>,
}

/// What one completed evaluation did to the sampling state.
#[derive(Debug, Clone, Copy)]
pub struct AdjustOutcome {
    pub significant: bool,
    pub counters_applied: bool,
    pub sigma_changed: bool,
}

impl SamplingState {
    /// Failure threshold scales with the worker count because evaluations,
    /// not batches, are counted.
    pub fn new(dim: usize, workers: usize) -> Self {
        let p = workers as f64;
        let f_fail = (workers as u32) * ((4.0 / p).max(dim as f64 / p).ceil() as u32);
        SamplingState {
            sigma: SIGMA_INIT,
            sigma_init: SIGMA_INIT,
            sigma_min: SIGMA_MIN,
            sigma_max: SIGMA_INIT,
            c_succ: 0,
            c_fail: 0,
            f_succ: 3,
            f_fail,
            m_fail: 4 * f_fail,
            delta: DELTA_IMPROVE,
            radius_epoch: 0,
            f_best: f64::INFINITY,
            x_best: None,
        }
    }

    /// Track the incumbent without touching any counters.
    pub fn observe_best(&mut self, value: f64, unit: &[f64]) {
        if !self.f_best.is_finite() || value < self.f_best {
            self.f_best = value;
            self.x_best = Some(unit.to_vec());
        }
    }

    fn is_significant(&self, value: f64) -> bool {
        if !self.f_best.is_finite() {
            return true;
        }
        let tol = if self.f_best == 0.0 {
            DELTA_ABS
        } else {
            self.delta * self.f_best.abs()
        };
        value < self.f_best - tol
    }

    /// Radius adjustment for one completed evaluation. The significance test
    /// runs against the pre-update incumbent; the incumbent itself is always
    /// updated. Counters are skipped for evaluations launched before the
    /// last radius change.
    pub fn adjust(&mut self, value: f64, unit: &[f64], launch_epoch: u64) -> AdjustOutcome {
        let significant = self.is_significant(value);
        let improved = !self.f_best.is_finite() || value < self.f_best;
        self.observe_best(value, unit);
        let counters_applied = launch_epoch >= self.radius_epoch;
        let mut sigma_changed = false;
        if counters_applied {
            if significant {
                self.c_succ += 1;
                self.c_fail = 0;
            } else if !improved {
                self.c_fail += 1;
                self.c_succ = 0;
            }
            // insignificant improvement: both counters left alone
            if self.c_succ >= self.f_succ {
                let next = (2.0 * self.sigma).min(self.sigma_max);
                self.c_succ = 0;
                self.c_fail = 0;
                if next != self.sigma {
                    self.sigma = next;
                    self.radius_epoch += 1;
                    sigma_changed = true;
                }
            } else if self.c_fail >= self.f_fail {
                let next = (self.sigma / 2.0).max(self.sigma_min);
                self.c_succ = 0;
                self.c_fail = 0;
                if next != self.sigma {
                    self.sigma = next;
                    self.radius_epoch += 1;
                    sigma_changed = true;
                }
            }
        }
        AdjustOutcome { significant, counters_applied, sigma_changed }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub problem: ProblemSpec,
    pub mode: Mode,
    pub budget: usize,
    pub design: DesignKind,
    /// Raised to the p+q-1 minimum if set too small; `None` means
    /// `max(2(d+1), p+q-1)`.
    pub design_size: Option<usize>,
    pub sampler: SamplerKind,
    pub kernel: KernelKind,
    pub tail: TailKind,
    pub num_cand: Option<usize>,
    pub eta: f64,
    pub retries: u32,
    /// PI/EI improvement margin.
    pub xi: f64,
    /// LCB deviation weight.
    pub kappa: f64,
    pub seed: u64,
}

impl StrategyConfig {
    pub fn new(problem: ProblemSpec, mode: Mode, budget: usize, seed: u64) -> Self {
        StrategyConfig {
            problem,
            mode,
            budget,
            design: DesignKind::Slhd,
            design_size: None,
            sampler: SamplerKind::Dycors,
            kernel: KernelKind::Cubic,
            tail: TailKind::Linear,
            num_cand: None,
            eta: 1e-8,
            retries: DEFAULT_RETRIES,
            xi: 0.0,
            kappa: 2.0,
            seed,
        }
    }

    pub fn build(self) -> Result<SurrogateStrategy> {
        SurrogateStrategy::new(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Initial,
    Adaptive,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QueuedPoint {
    unit: Vec<f64>,
    design: bool,
    retries_left: u32,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PendingInfo {
    unit: Vec<f64>,
    design: bool,
    retries_left: u32,
    run_id: u64,
    launch_epoch: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
enum SurrogateState {
    Rbf {
        model: RbfSurrogate,
        /// Raw values of the points actually inside the model (duplicates
        /// are skipped), before the median cap.
        raw: Vec<f64>,
        /// How many completed points have been offered to the model.
        absorbed: usize,
    },
    Gp {
        model: Option<GpModel>,
        absorbed: usize,
    },
}

/// The shipped surrogate strategy: initial design, then candidate-based
/// adaptive sampling (SRBF/DYCORS/uniform over an RBF, or PI/EI/LCB over a
/// GP), with radius adaptation and restarts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SurrogateStrategy {
    pub config: StrategyConfig,
    phase: Phase,
    rng: ChaCha20Rng,
    surrogate: SurrogateState,
    /// Completed (unit point, value) pairs of the current run.
    data_x: Vec<Vec<f64>>,
    data_f: Vec<f64>,
    queue: VecDeque<QueuedPoint>,
    awaiting: VecDeque<PendingInfo>,
    pending: BTreeMap<u64, PendingInfo>,
    pub sampling: SamplingState,
    run_id: u64,
    restarts: u64,
    n0: usize,
    design_outstanding: usize,
    proposed: usize,
    run_proposed: usize,
    weight_index: usize,
    stagnation: u32,
    terminate_sent: bool,
}

impl SurrogateStrategy {
    pub fn new(config: StrategyConfig) -> Result<Self> {
        let d = config.problem.dim;
        let p = config.mode.workers();
        if p == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        let q_min = config.tail.dim(d);
        let min_design = p + q_min - 1;
        let n0 = match config.design {
            DesignKind::Factorial2 => {
                let n = 1usize
                    .checked_shl(d as u32)
                    .filter(|_| d <= 20)
                    .ok_or_else(|| Error::Config("2-factorial design too large".into()))?;
                if n < min_design {
                    return Err(Error::Config(format!(
                        "2^{d} design points < required minimum {min_design}"
                    )));
                }
                n
            }
            _ => config.design_size.unwrap_or(2 * (d + 1)).max(min_design),
        };
        if config.budget < n0 {
            return Err(Error::Config(format!(
                "budget {} below the initial design size {n0}",
                config.budget
            )));
        }
        let rng = ChaCha20Rng::seed_from_u64(config.seed);
        let surrogate = if config.sampler.uses_gp() {
            SurrogateState::Gp { model: None, absorbed: 0 }
        } else {
            let mut model = RbfSurrogate::new(d, config.kernel, config.tail)?;
            model.regularize(config.eta)?;
            SurrogateState::Rbf { model, raw: Vec::new(), absorbed: 0 }
        };
        let sampling = SamplingState::new(d, p);
        let mut me = SurrogateStrategy {
            config,
            phase: Phase::Initial,
            rng,
            surrogate,
            data_x: Vec::new(),
            data_f: Vec::new(),
            queue: VecDeque::new(),
            awaiting: VecDeque::new(),
            pending: BTreeMap::new(),
            sampling,
            run_id: 0,
            restarts: 0,
            n0,
            design_outstanding: 0,
            proposed: 0,
            run_proposed: 0,
            weight_index: 0,
            stagnation: 0,
            terminate_sent: false,
        };
        me.queue_fresh_design()?;
        Ok(me)
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn design_size(&self) -> usize {
        self.n0
    }

    pub fn restarts(&self) -> u64 {
        self.restarts
    }

    pub fn run_id(&self) -> u64 {
        self.run_id
    }

    pub fn proposed(&self) -> usize {
        self.proposed
    }

    pub fn weight_index(&self) -> usize {
        self.weight_index
    }

    pub fn stagnation(&self) -> u32 {
        self.stagnation
    }

    /// Points currently inside the surrogate model.
    pub fn surrogate_points(&self) -> usize {
        match &self.surrogate {
            SurrogateState::Rbf { model, .. } => model.num_points(),
            SurrogateState::Gp { model, .. } => model.as_ref().map_or(0, |m| m.num_points()),
        }
    }

    fn queue_fresh_design(&mut self) -> Result<()> {
        let d = self.config.problem.dim;
        let des = design::generate(self.config.design, self.n0, d, &mut self.rng)?;
        let points = design::realize(&des, &self.config.problem, &mut self.rng)?;
        for pt in points {
            self.queue.push_back(QueuedPoint {
                unit: self.config.problem.to_unit(&pt.coords),
                design: true,
                retries_left: self.config.retries,
            });
        }
        self.design_outstanding = self.queue.len();
        Ok(())
    }

    fn check_phase(&mut self) {
        if self.phase == Phase::Initial && self.design_outstanding == 0 {
            self.phase = Phase::Adaptive;
        }
    }

    /// Bring the surrogate up to date with completed evaluations. Called
    /// lazily, right before points are generated.
    fn refit(&mut self) -> Result<()> {
        match &mut self.surrogate {
            SurrogateState::Rbf { model, raw, absorbed } => {
                let mut added = false;
                while *absorbed < self.data_x.len() {
                    let x = &self.data_x[*absorbed];
                    let f = self.data_f[*absorbed];
                    match model.add_points(std::slice::from_ref(x), &[f]) {
                        Ok(()) => {
                            raw.push(f);
                            added = true;
                        }
                        Err(Error::DuplicatePoint(_)) => {}
                        Err(e) => return Err(e),
                    }
                    *absorbed += 1;
                }
                if added && model.is_ready() {
                    model.set_values(&median_cap(raw))?;
                }
            }
            SurrogateState::Gp { model, absorbed } => {
                if *absorbed < self.data_x.len() && !self.data_x.is_empty() {
                    *model = Some(GpModel::fit(
                        self.data_x.clone(),
                        self.data_f.clone(),
                        &mut self.rng,
                    )?);
                    *absorbed = self.data_x.len();
                }
            }
        }
        Ok(())
    }

    /// Everything evaluated, in flight, or already queued: the exclusion set
    /// for candidate selection.
    fn occupied(&self) -> Vec<Vec<f64>> {
        let mut a: Vec<Vec<f64>> = self.data_x.clone();
        a.extend(self.pending.values().map(|i| i.unit.clone()));
        a.extend(self.awaiting.iter().map(|i| i.unit.clone()));
        a.extend(self.queue.iter().map(|q| q.unit.clone()));
        a
    }

    fn num_cand(&self) -> usize {
        self.config
            .num_cand
            .unwrap_or(aux::CANDIDATES_PER_DIM * self.config.problem.dim)
    }

    fn generate_candidates(&mut self) -> Result<Vec<Vec<f64>>> {
        let problem = self.config.problem.clone();
        let count = self.num_cand();
        let sigma = self.sampling.sigma;
        let x_best = self.sampling.x_best.clone();
        let set = match (self.config.sampler, x_best) {
            (SamplerKind::Srbf, Some(xb)) => {
                gen_srbf(&xb, sigma, &problem, &mut self.rng, count)
            }
            (SamplerKind::Dycors, Some(xb)) => {
                let n_max = self.config.budget.max(self.n0 + 2);
                gen_dycors(
                    &xb,
                    sigma,
                    self.run_proposed,
                    self.n0,
                    n_max,
                    &problem,
                    &mut self.rng,
                    count,
                )?
            }
            // uniform sampler, acquisition samplers, or no incumbent yet
            _ => gen_uniform(&problem, &mut self.rng, count),
        };
        debug_assert_eq!(
            set.generator == GeneratorKind::Uniform,
            matches!(self.config.sampler, SamplerKind::Uniform)
                || self.config.sampler.uses_gp()
                || self.sampling.x_best.is_none()
        );
        Ok(set.omega)
    }

    /// Solve the auxiliary problem for `k` new points and queue them.
    fn generate_batch(&mut self, k: usize) -> Result<()> {
        self.refit()?;
        let omega = self.generate_candidates()?;
        let mut occupied = self.occupied();
        if self.config.sampler.uses_gp() {
            self.pick_by_acquisition(&omega, &mut occupied, k);
        } else {
            let values: Vec<f64> = match &self.surrogate {
                SurrogateState::Rbf { model, .. } if model.is_ready() => omega
                    .iter()
                    .map(|x| model.predict(x))
                    .collect::<Result<_>>()?,
                _ => vec![0.0; omega.len()],
            };
            if occupied.is_empty() {
                // pathological: nothing evaluated or in flight; take as-is
                for x in omega.iter().take(k) {
                    self.push_adaptive(x.clone());
                }
                return Ok(());
            }
            let weights: Vec<f64> = (0..k)
                .map(|i| WEIGHT_PATTERN[(self.weight_index + i) % WEIGHT_PATTERN.len()])
                .collect();
            let picks = select_candidates(&omega, &values, &occupied, &weights, k, RADIUS_TOL)?;
            self.weight_index += picks.len();
            for idx in picks {
                self.push_adaptive(omega[idx].clone());
            }
        }
        Ok(())
    }

    fn pick_by_acquisition(&mut self, omega: &[Vec<f64>], occupied: &mut Vec<Vec<f64>>, k: usize) {
        let f_plus = self.data_f.iter().copied().fold(f64::INFINITY, f64::min);
        let mut picked: Vec<usize> = Vec::new();
        for _ in 0..k.min(omega.len()) {
            let dist = |x: &[f64]| -> f64 {
                occupied
                    .iter()
                    .map(|y| {
                        x.iter()
                            .zip(y)
                            .map(|(a, b)| (a - b) * (a - b))
                            .sum::<f64>()
                            .sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            };
            let eligible: Vec<usize> = (0..omega.len())
                .filter(|i| !picked.contains(i) && dist(&omega[*i]) >= RADIUS_TOL)
                .collect();
            let pool = if eligible.is_empty() {
                let far = (0..omega.len())
                    .filter(|i| !picked.contains(i))
                    .max_by(|&i, &j| dist(&omega[i]).total_cmp(&dist(&omega[j])));
                match far {
                    Some(i) => vec![i],
                    None => break,
                }
            } else {
                eligible
            };
            let score = |i: usize| -> f64 {
                let SurrogateState::Gp { model: Some(m), .. } = &self.surrogate else {
                    return 0.0;
                };
                let (mu, var) = m.predict_mv(&omega[i]);
                let sd = var.max(0.0).sqrt();
                match self.config.sampler {
                    SamplerKind::Ei => acq_ei(mu, sd, f_plus, self.config.xi),
                    SamplerKind::Pi => acq_pi(mu, sd, f_plus, self.config.xi),
                    SamplerKind::Lcb => -acq_lcb(mu, sd, self.config.kappa),
                    _ => unreachable!("acquisition sampler expected"),
                }
            };
            let mut best = pool[0];
            let mut best_score = f64::NEG_INFINITY;
            for &i in &pool {
                let s = score(i);
                if s > best_score {
                    best_score = s;
                    best = i;
                }
            }
            picked.push(best);
            occupied.push(omega[best].clone());
            self.push_adaptive(omega[best].clone());
        }
    }

    fn push_adaptive(&mut self, unit: Vec<f64>) {
        self.queue.push_back(QueuedPoint {
            unit,
            design: false,
            retries_left: self.config.retries,
        });
    }

    fn pop_proposal(&mut self) -> Proposal {
        let qp = self.queue.pop_front().expect("queue nonempty");
        let point = Point::new(self.config.problem.from_unit(&qp.unit));
        self.awaiting.push_back(PendingInfo {
            unit: qp.unit,
            design: qp.design,
            retries_left: qp.retries_left,
            run_id: self.run_id,
            launch_epoch: self.sampling.radius_epoch,
        });
        self.proposed += 1;
        self.run_proposed += 1;
        Proposal::new(Action::Eval(point))
    }

    fn handle_failure(&mut self, info: PendingInfo) {
        if info.run_id != self.run_id {
            return;
        }
        if info.retries_left > 0 {
            self.queue.push_back(QueuedPoint {
                unit: info.unit,
                design: info.design,
                retries_left: info.retries_left - 1,
            });
        } else if info.design {
            // permanently dropped design point no longer blocks the barrier
            self.design_outstanding -= 1;
            self.check_phase();
        }
    }

    /// Restart if the radius has bottomed out with prolonged stagnation and
    /// enough budget remains to seed a fresh design.
    fn maybe_restart(&mut self) -> Result<bool> {
        if self.phase != Phase::Adaptive {
            return Ok(false);
        }
        if self.sampling.sigma > self.sampling.sigma_min * (1.0 + 1e-9) {
            return Ok(false);
        }
        if self.stagnation < self.sampling.m_fail {
            return Ok(false);
        }
        if self.config.budget - self.proposed < self.n0 {
            return Ok(false);
        }
        self.restart()
    }

    fn restart(&mut self) -> Result<bool> {
        self.run_id += 1;
        self.restarts += 1;
        match &mut self.surrogate {
            SurrogateState::Rbf { model, raw, absorbed } => {
                model.reset();
                raw.clear();
                *absorbed = 0;
            }
            SurrogateState::Gp { model, absorbed } => {
                *model = None;
                *absorbed = 0;
            }
        }
        self.data_x.clear();
        self.data_f.clear();
        self.queue.clear();
        self.phase = Phase::Initial;
        self.sampling.sigma = self.sampling.sigma_init;
        self.sampling.c_succ = 0;
        self.sampling.c_fail = 0;
        self.sampling.radius_epoch += 1;
        self.stagnation = 0;
        self.run_proposed = 0;
        self.queue_fresh_design()?;
        Ok(true)
    }
}

impl Strategy for SurrogateStrategy {
    fn propose(&mut self) -> Result<Option<Proposal>> {
        if self.terminate_sent {
            return Ok(None);
        }
        if self.proposed >= self.config.budget {
            self.terminate_sent = true;
            return Ok(Some(Proposal::new(Action::Terminate)));
        }
        if self.queue.is_empty() {
            match self.phase {
                // barrier: adaptive sampling waits for the design to land
                Phase::Initial => return Ok(None),
                Phase::Adaptive => {
                    let in_flight = !self.pending.is_empty() || !self.awaiting.is_empty();
                    if self.config.mode.batched() && in_flight {
                        return Ok(None); // batch boundary not reached
                    }
                    let remaining = self.config.budget - self.proposed;
                    let k = if self.config.mode.batched() {
                        self.config.mode.workers().min(remaining)
                    } else {
                        1
                    };
                    self.generate_batch(k)?;
                    if self.queue.is_empty() {
                        return Ok(None);
                    }
                }
            }
        }
        Ok(Some(self.pop_proposal()))
    }

    fn on_dispatched(&mut self, id: u64) {
        if let Some(info) = self.awaiting.pop_front() {
            self.pending.insert(id, info);
        }
    }

    fn on_rejected(&mut self, action: &Action) {
        match action {
            Action::Eval(_) => {
                if let Some(info) = self.awaiting.pop_front() {
                    self.proposed -= 1;
                    self.run_proposed -= 1;
                    if info.design && info.run_id == self.run_id {
                        self.design_outstanding -= 1;
                        self.check_phase();
                    }
                }
            }
            Action::Terminate => {
                self.terminate_sent = false;
            }
            Action::Kill(_) => {}
        }
    }

    fn on_completed(&mut self, id: u64, value: f64) -> Result<()> {
        let info = self
            .pending
            .remove(&id)
            .ok_or(Error::UnknownRecord(id))?;
        if !value.is_finite() {
            self.handle_failure(info);
            return Ok(());
        }
        if info.run_id != self.run_id {
            // launched before a restart: best-value reporting only, never
            // the surrogate or the counters
            self.sampling.observe_best(value, &info.unit);
            return Ok(());
        }
        if info.design {
            self.sampling.observe_best(value, &info.unit);
            self.data_x.push(info.unit);
            self.data_f.push(value);
            self.design_outstanding -= 1;
            self.check_phase();
        } else {
            let out = self.sampling.adjust(value, &info.unit, info.launch_epoch);
            self.data_x.push(info.unit);
            self.data_f.push(value);
            if out.significant {
                self.stagnation = 0;
            } else {
                self.stagnation += 1;
            }
            self.maybe_restart()?;
        }
        Ok(())
    }

    fn on_failed(&mut self, id: u64) -> Result<()> {
        let info = self
            .pending
            .remove(&id)
            .ok_or(Error::UnknownRecord(id))?;
        self.handle_failure(info);
        Ok(())
    }

    fn on_killed(&mut self, id: u64) -> Result<()> {
        // killed work is never retried
        let info = self
            .pending
            .remove(&id)
            .ok_or(Error::UnknownRecord(id))?;
        if info.run_id == self.run_id && info.design {
            self.design_outstanding -= 1;
            self.check_phase();
        }
        Ok(())
    }

    fn best(&self) -> Option<(Point, f64)> {
        let x = self.sampling.x_best.as_ref()?;
        Some((
            Point::new(self.config.problem.from_unit(x)),
            self.sampling.f_best,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::controller::{SimController, TimeModel};
    use crate::problem::lookup;

    fn cfg(dim: usize, mode: Mode, budget: usize, seed: u64) -> StrategyConfig {
        StrategyConfig::new(lookup("sphere", dim).unwrap(), mode, budget, seed)
    }

    #[test]
    fn design_size_floor_and_auto_raise() {
        let s = cfg(10, Mode::Sync { workers: 4 }, 200, 0).build().unwrap();
        assert_eq!(s.design_size(), 22); // default 2(d+1) covers 4+11-1
        let s = cfg(10, Mode::Serial, 200, 0).build().unwrap();
        assert_eq!(s.design_size(), 22);
        let s = cfg(10, Mode::Async { workers: 32 }, 200, 0).build().unwrap();
        assert_eq!(s.design_size(), 42); // 32+11-1 beats 2(d+1)
    }

    #[test]
    fn budget_below_design_is_config_error() {
        assert!(cfg(10, Mode::Serial, 10, 0).build().is_err());
    }

    #[test]
    fn initial_phase_barrier() {
        let mut s = cfg(3, Mode::Async { workers: 4 }, 100, 1).build().unwrap();
        let n0 = s.design_size();
        for i in 0..n0 {
            let p = s.propose().unwrap().expect("design proposal");
            assert!(matches!(p.action, Action::Eval(_)));
            s.on_dispatched(i as u64);
        }
        // all design points in flight: no adaptive work may start
        assert!(s.propose().unwrap().is_none());
        assert_eq!(s.phase(), Phase::Initial);
        for i in 0..n0 {
            s.on_completed(i as u64, 1.0 + i as f64).unwrap();
        }
        assert_eq!(s.phase(), Phase::Adaptive);
        assert!(s.propose().unwrap().is_some());
    }

    #[test]
    fn sync_batch_discipline() {
        let mut s = cfg(2, Mode::Sync { workers: 2 }, 100, 2).build().unwrap();
        let n0 = s.design_size();
        for i in 0..n0 {
            s.propose().unwrap().unwrap();
            s.on_dispatched(i as u64);
            s.on_completed(i as u64, (i as f64 - 3.0).powi(2)).unwrap();
        }
        // first adaptive batch: exactly two proposals, then silence
        let id = n0 as u64;
        s.propose().unwrap().unwrap();
        s.on_dispatched(id);
        s.propose().unwrap().unwrap();
        s.on_dispatched(id + 1);
        assert!(s.propose().unwrap().is_none());
        // half-finished batch still blocks
        s.on_completed(id, 5.0).unwrap();
        assert!(s.propose().unwrap().is_none());
        s.on_completed(id + 1, 6.0).unwrap();
        assert!(s.propose().unwrap().is_some());
    }

    #[test]
    fn async_has_no_barrier_after_design() {
        let mut s = cfg(2, Mode::Async { workers: 2 }, 100, 3).build().unwrap();
        let n0 = s.design_size();
        for i in 0..n0 {
            s.propose().unwrap().unwrap();
            s.on_dispatched(i as u64);
            s.on_completed(i as u64, i as f64).unwrap();
        }
        let id = n0 as u64;
        s.propose().unwrap().unwrap();
        s.on_dispatched(id);
        // the other worker gets work immediately, nothing to wait on
        assert!(s.propose().unwrap().is_some());
        s.on_dispatched(id + 1);
        s.on_completed(id, 9.0).unwrap();
        assert!(s.propose().unwrap().is_some());
    }

    #[test]
    fn failed_point_retried_exactly_once() {
        let mut s = cfg(2, Mode::Serial, 100, 4).build().unwrap();
        let p0 = s.propose().unwrap().unwrap();
        let Action::Eval(ref first) = p0.action else { panic!() };
        let first = first.clone();
        s.on_dispatched(0);
        s.on_failed(0).unwrap();
        // the same point comes back once
        let mut seen = 0;
        let n0 = s.design_size();
        for i in 1..=n0 as u64 {
            let p = s.propose().unwrap().unwrap();
            let Action::Eval(ref pt) = p.action else { panic!() };
            if pt.coords == first.coords {
                seen += 1;
                s.on_dispatched(i);
                s.on_failed(i).unwrap(); // fails again: dropped for good
            } else {
                s.on_dispatched(i);
                s.on_completed(i, 1.0).unwrap();
            }
        }
        assert_eq!(seen, 1);
        // the drop released the barrier despite the missing design point
        assert_eq!(s.phase(), Phase::Adaptive);
    }

    #[test]
    fn radius_halves_at_failure_threshold() {
        let mut st = SamplingState::new(10, 1);
        assert_eq!(st.f_fail, 10);
        st.observe_best(1.0, &[0.5; 10]);
        for _ in 0..st.f_fail {
            st.adjust(2.0, &[0.4; 10], st.radius_epoch);
        }
        assert!((st.sigma - 0.05).abs() < 1e-15);
        assert_eq!(st.c_fail, 0);
        assert_eq!(st.radius_epoch, 1);
    }

    #[test]
    fn radius_capped_at_sigma_max() {
        let mut st = SamplingState::new(4, 1);
        st.observe_best(100.0, &[0.5; 4]);
        let mut v = 100.0;
        for _ in 0..st.f_succ {
            v *= 0.5; // clearly significant improvements
            st.adjust(v, &[0.4; 4], st.radius_epoch);
        }
        // sigma = sigma_max already: stays, counters reset, no epoch bump
        assert_eq!(st.sigma, st.sigma_max);
        assert_eq!(st.c_succ, 0);
        assert_eq!(st.radius_epoch, 0);
    }

    #[test]
    fn epoch_rule_skips_stale_counters() {
        let mut st = SamplingState::new(4, 1);
        st.observe_best(10.0, &[0.5; 4]);
        st.radius_epoch = 4;
        // launched at epoch 3 with a big improvement
        let out = st.adjust(1.0, &[0.2; 4], 3);
        assert!(out.significant);
        assert!(!out.counters_applied);
        assert_eq!(st.c_succ, 0);
        assert_eq!(st.f_best, 1.0); // best update always applied
    }

    #[test]
    fn insignificant_improvement_leaves_counters() {
        let mut st = SamplingState::new(4, 1);
        st.observe_best(100.0, &[0.5; 4]);
        st.c_fail = 2;
        st.c_succ = 1;
        // improves by far less than delta*|f_best|
        let out = st.adjust(99.9999, &[0.4; 4], st.radius_epoch);
        assert!(!out.significant);
        assert_eq!(st.c_fail, 2);
        assert_eq!(st.c_succ, 1);
        assert_eq!(st.f_best, 99.9999);
    }

    #[test]
    fn zero_incumbent_uses_absolute_tolerance() {
        let mut st = SamplingState::new(4, 1);
        st.observe_best(0.0, &[0.5; 4]);
        assert!(!st.is_significant(-0.5 * DELTA_ABS));
        assert!(st.is_significant(-2.0 * DELTA_ABS));
    }

    /// Drive a serial strategy to stagnation by returning the same value for
    /// every evaluation; the radius must walk down to its floor and restart.
    #[test]
    fn stagnation_triggers_restart() {
        let mut c = cfg(2, Mode::Serial, 500, 5);
        c.design_size = Some(6);
        let mut s = c.build().unwrap();
        assert_eq!(s.sampling.f_fail, 4);
        assert_eq!(s.sampling.m_fail, 16);
        let mut id = 0u64;
        let mut first_design: Vec<Vec<f64>> = Vec::new();
        while s.restarts() == 0 && id < 300 {
            let Some(p) = s.propose().unwrap() else { panic!("starved") };
            let Action::Eval(ref pt) = p.action else { panic!("terminated early") };
            if first_design.len() < 6 {
                first_design.push(pt.coords.clone());
            }
            s.on_dispatched(id);
            s.on_completed(id, 7.0).unwrap();
            id += 1;
        }
        assert_eq!(s.restarts(), 1, "no restart after {id} evals");
        assert_eq!(s.phase(), Phase::Initial);
        assert_eq!(s.surrogate_points(), 0);
        assert_eq!(s.sampling.sigma, SIGMA_INIT);
        assert_eq!(s.stagnation(), 0);
        // a fresh design comes out, different from the first one
        let p = s.propose().unwrap().unwrap();
        let Action::Eval(ref pt) = p.action else { panic!() };
        assert!(!first_design.contains(&pt.coords));
        // the incumbent survives the restart
        assert_eq!(s.best().unwrap().1, 7.0);
    }

    /// An evaluation launched before a restart must update the incumbent but
    /// neither the surrogate nor the stagnation bookkeeping.
    #[test]
    fn pre_restart_pending_updates_best_only() {
        let mut c = cfg(2, Mode::Async { workers: 2 }, 500, 6);
        c.design_size = Some(6);
        let mut s = c.build().unwrap();
        let mut id = 0u64;
        // land the design first
        for _ in 0..6 {
            s.propose().unwrap().unwrap();
            s.on_dispatched(id);
            s.on_completed(id, 7.0).unwrap();
            id += 1;
        }
        // park one adaptive evaluation in flight for the whole scenario
        s.propose().unwrap().unwrap();
        s.on_dispatched(999);
        while s.restarts() == 0 {
            let Some(p) = s.propose().unwrap() else {
                panic!("starved at id {id}")
            };
            assert!(matches!(p.action, Action::Eval(_)));
            s.on_dispatched(id);
            s.on_completed(id, 7.0).unwrap();
            id += 1;
        }
        let pts_after_restart = s.surrogate_points();
        let stag = s.stagnation();
        s.on_completed(999, -123.0).unwrap();
        assert_eq!(s.best().unwrap().1, -123.0);
        assert_eq!(s.surrogate_points(), pts_after_restart);
        assert_eq!(s.stagnation(), stag);
    }

    #[test]
    fn budget_respected_and_terminate_once() {
        let p = lookup("sphere", 2).unwrap();
        let s = cfg(2, Mode::Async { workers: 3 }, 30, 7).build().unwrap();
        let mut c = SimController::new(s, p, 3, TimeModel::Constant(1.0), 1e9, 7).unwrap();
        c.run().unwrap();
        assert_eq!(c.records.len(), 30);
        assert!(c.strategy.terminate_sent);
        assert!(c.strategy.propose().unwrap().is_none()); // stays silent
        for w in c.trace.windows(2) {
            assert!(w[1].best_so_far <= w[0].best_so_far);
        }
    }

    #[test]
    fn serial_equals_async_with_one_worker() {
        let p = lookup("ackley", 3).unwrap();
        let run = |mode: Mode| -> Vec<Vec<f64>> {
            let s = StrategyConfig::new(p.clone(), mode, 60, 11).build().unwrap();
            let mut c =
                SimController::new(s, p.clone(), 1, TimeModel::Constant(1.0), 1e9, 11).unwrap();
            c.run().unwrap();
            c.records.iter().map(|r| r.point.coords.clone()).collect()
        };
        let serial = run(Mode::Serial);
        let async1 = run(Mode::Async { workers: 1 });
        assert_eq!(serial, async1);
        assert_eq!(serial.len(), 60);
    }

    #[test]
    fn weight_pattern_cycles_across_proposals() {
        let mut s = cfg(2, Mode::Serial, 100, 8).build().unwrap();
        let n0 = s.design_size();
        for i in 0..n0 {
            s.propose().unwrap().unwrap();
            s.on_dispatched(i as u64);
            s.on_completed(i as u64, i as f64).unwrap();
        }
        for i in 0..6u64 {
            s.propose().unwrap().unwrap();
            s.on_dispatched(n0 as u64 + i);
            s.on_completed(n0 as u64 + i, 50.0 + i as f64).unwrap();
        }
        assert_eq!(s.weight_index(), 6);
    }

    #[test]
    fn gp_acquisition_strategy_runs() {
        let p = lookup("sphere", 2).unwrap();
        let mut c = cfg(2, Mode::Serial, 20, 9);
        c.sampler = SamplerKind::Ei;
        c.design_size = Some(8);
        let s = c.build().unwrap();
        let mut sim = SimController::new(s, p, 1, TimeModel::Constant(1.0), 1e9, 9).unwrap();
        sim.run().unwrap();
        assert_eq!(sim.records.len(), 20);
        let (_, best) = sim.best().unwrap();
        assert!(best < 10.0);
    }

    #[test]
    fn strategy_serializes_roundtrip() {
        let mut s = cfg(3, Mode::Sync { workers: 2 }, 80, 10).build().unwrap();
        for i in 0..5u64 {
            s.propose().unwrap().unwrap();
            s.on_dispatched(i);
            s.on_completed(i, i as f64).unwrap();
        }
        let json = serde_json::to_string(&s).unwrap();
        let back: SurrogateStrategy = serde_json::from_str(&json).unwrap();
        assert_eq!(json, serde_json::to_string(&back).unwrap());
    }
}
