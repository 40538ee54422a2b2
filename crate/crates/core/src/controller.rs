//! The mediation layer between strategies and workers: proposals,
//! evaluation records, the deterministic simulated-time controller, a serial
//! inline controller, a TCP worker controller, and checkpointing.

use std::collections::BTreeSet;
use std::io::{BufRead, BufReader, Write as IoWrite};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::sync::mpsc;
use std::time::Instant;

use rand_chacha::ChaCha20Rng;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ParetoTimeModel;
use crate::problem::{Point, ProblemSpec};

pub const CHECKPOINT_FORMAT_VERSION: u32 = 1;

/// What a strategy wants done.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum Action {
    Eval(Point),
    Kill(u64),
    Terminate,
}

/// How the controller answered a proposal.
#[derive(Debug, Clone)]
pub enum ProposalOutcome {
    Accepted { record_id: Option<u64> },
    Rejected { reason: String },
}

pub type ProposalCallback = Box<dyn FnOnce(&ProposalOutcome)>;

/// One action plus callbacks fired exactly once each when the controller
/// accepts or rejects it.
pub struct Proposal {
    pub action: Action,
    pub callbacks: Vec<ProposalCallback>,
}

impl Proposal {
    pub fn new(action: Action) -> Self {
        Proposal { action, callbacks: Vec::new() }
    }

    pub fn with_callback(mut self, cb: ProposalCallback) -> Self {
        self.callbacks.push(cb);
        self
    }

    fn resolve(self, outcome: &ProposalOutcome) {
        for cb in self.callbacks {
            cb(outcome);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecordStatus {
    Pending,
    Running,
    Completed,
    Killed,
    Failed,
}

impl RecordStatus {
    pub fn is_terminal(self) -> bool {
        matches!(self, RecordStatus::Completed | RecordStatus::Killed | RecordStatus::Failed)
    }
}

/// Controller-owned lifecycle object for one evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvaluationRecord {
    pub id: u64,
    pub point: Point,
    pub status: RecordStatus,
    pub value: Option<f64>,
    pub partial_value: Option<f64>,
    pub launch_epoch: u64,
    pub t_start: f64,
    pub t_end: Option<f64>,
    pub worker_id: Option<usize>,
}

impl EvaluationRecord {
    fn transition(&mut self, to: RecordStatus) -> Result<()> {
        let ok = match (self.status, to) {
            (RecordStatus::Pending, RecordStatus::Running) => true,
            (RecordStatus::Running, s) if s.is_terminal() => true,
            _ => false,
        };
        if !ok {
            return Err(Error::Protocol(format!(
                "record {} cannot move {:?} -> {:?}",
                self.id, self.status, to
            )));
        }
        self.status = to;
        Ok(())
    }
}

/// One completed evaluation in completion order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub eval_index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub worker: usize,
    pub point: Vec<f64>,
    pub value: f64,
    pub best_so_far: f64,
}

/// A strategy is a state machine driven from the controller's event loop:
/// it proposes actions when asked and digests record updates.
pub trait Strategy {
    /// Next action for an idle worker, or `None` to wait.
    fn propose(&mut self) -> Result<Option<Proposal>>;
    /// The last eval proposal was accepted and dispatched as record `id`.
    fn on_dispatched(&mut self, id: u64);
    /// The last proposal was rejected.
    fn on_rejected(&mut self, action: &Action);
    fn on_completed(&mut self, id: u64, value: f64) -> Result<()>;
    fn on_failed(&mut self, id: u64) -> Result<()>;
    fn on_killed(&mut self, id: u64) -> Result<()>;
    fn on_partial(&mut self, _id: u64, _value: f64) {}
    /// Best observed (point, value) so far, in original coordinates.
    fn best(&self) -> Option<(Point, f64)>;
}

/// Evaluation-duration model for the simulated-time controller.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum TimeModel {
    Constant(f64),
    Pareto(ParetoTimeModel),
    /// Fixed schedule, cycled; handy for hand-built scenarios.
    Cycle { durations: Vec<f64>, idx: usize },
}

impl TimeModel {
    pub fn pareto(alpha: f64) -> Result<Self> {
        Ok(TimeModel::Pareto(ParetoTimeModel::new(alpha)?))
    }

    fn sample(&mut self, rng: &mut ChaCha20Rng) -> Result<f64> {
        let d = match self {
            TimeModel::Constant(d) => *d,
            TimeModel::Pareto(m) => m.sample(rng),
            TimeModel::Cycle { durations, idx } => {
                let d = durations[*idx % durations.len()];
                *idx += 1;
                d
            }
        };
        if !(d > 0.0) {
            return Err(Error::Config(format!("evaluation duration must be positive, got {d}")));
        }
        Ok(d)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum KillPolicy {
    Honor,
    Ignore,
}

/// A scheduled completion inside the simulated clock.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SimEvent {
    time: f64,
    seq: u64,
    record: u64,
    worker: usize,
    value: f64,
}

/// Deterministic discrete-event controller: objective values are computed at
/// dispatch, completions are scheduled `duration` later on a simulated clock,
/// and simultaneous completions resolve in dispatch-sequence order. Fitting
/// and selection overhead costs no simulated time.
#[derive(Serialize, Deserialize)]
#[serde(bound(serialize = "S: Serialize", deserialize = "S: DeserializeOwned"))]
pub struct SimController<S> {
    pub strategy: S,
    problem: ProblemSpec,
    time_model: TimeModel,
    time_rng: ChaCha20Rng,
    kill_policy: KillPolicy,
    now: f64,
    t_max: f64,
    seq: u64,
    workers: BTreeSet<usize>,
    idle: BTreeSet<usize>,
    next_worker_id: usize,
    events: Vec<SimEvent>,
    pub records: Vec<EvaluationRecord>,
    pub trace: Vec<TraceRow>,
    best_f: Option<f64>,
    best_x: Option<Point>,
    terminated: bool,
    finished: bool,
    #[serde(skip)]
    snapshot_path: Option<PathBuf>,
}

impl<S: Strategy + Serialize + DeserializeOwned> SimController<S> {
    pub fn new(
        strategy: S,
        problem: ProblemSpec,
        workers: usize,
        time_model: TimeModel,
        t_max: f64,
        seed: u64,
    ) -> Result<Self> {
        if workers == 0 {
            return Err(Error::Config("need at least one worker".into()));
        }
        let ids: BTreeSet<usize> = (0..workers).collect();
        Ok(SimController {
            strategy,
            problem,
            time_model,
            // independent stream so strategy seeding does not shift durations
            time_rng: rand::SeedableRng::seed_from_u64(seed ^ 0x7061_7265_746f),
            kill_policy: KillPolicy::Honor,
            now: 0.0,
            t_max,
            seq: 0,
            idle: ids.clone(),
            workers: ids,
            next_worker_id: workers,
            events: Vec::new(),
            records: Vec::new(),
            trace: Vec::new(),
            best_f: None,
            best_x: None,
            terminated: false,
            finished: false,
            snapshot_path: None,
        })
    }

    pub fn kill_policy(mut self, policy: KillPolicy) -> Self {
        self.kill_policy = policy;
        self
    }

    /// Persist a snapshot after every state change.
    pub fn with_snapshots(mut self, path: impl Into<PathBuf>) -> Self {
        self.snapshot_path = Some(path.into());
        self
    }

    pub fn now(&self) -> f64 {
        self.now
    }

    pub fn best(&self) -> Option<(Point, f64)> {
        Some((self.best_x.clone()?, self.best_f?))
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    pub fn num_workers(&self) -> usize {
        self.workers.len()
    }

    pub fn add_worker(&mut self) -> usize {
        let id = self.next_worker_id;
        self.next_worker_id += 1;
        self.workers.insert(id);
        self.idle.insert(id);
        id
    }

    /// Remove a worker. A running evaluation is abandoned and surfaces as a
    /// failure; removing the last worker while work is in flight is refused.
    pub fn remove_worker(&mut self, id: usize) -> Result<()> {
        if !self.workers.contains(&id) {
            return Err(Error::Config(format!("no worker {id}")));
        }
        if self.workers.len() == 1 && !self.events.is_empty() {
            return Err(Error::Config(
                "refusing to remove the last worker while evaluations are pending".into(),
            ));
        }
        self.workers.remove(&id);
        self.idle.remove(&id);
        if let Some(pos) = self.events.iter().position(|e| e.worker == id) {
            let ev = self.events.remove(pos);
            let rec = &mut self.records[ev.record as usize];
            rec.transition(RecordStatus::Failed)?;
            rec.t_end = Some(self.now);
            self.strategy.on_failed(ev.record)?;
            self.maybe_snapshot()?;
        }
        Ok(())
    }

    fn apply_proposal(&mut self, proposal: Proposal) -> Result<()> {
        match proposal.action {
            Action::Eval(ref point) => {
                if let Err(e) = self.problem.validate(point) {
                    let outcome = ProposalOutcome::Rejected { reason: e.to_string() };
                    let action = proposal.action.clone();
                    proposal.resolve(&outcome);
                    self.strategy.on_rejected(&action);
                    return Ok(());
                }
                let worker = *self.idle.iter().next().expect("idle worker available");
                self.idle.remove(&worker);
                let id = self.records.len() as u64;
                let value = self.problem.evaluate(point)?;
                let duration = self.time_model.sample(&mut self.time_rng)?;
                let mut rec = EvaluationRecord {
                    id,
                    point: point.clone(),
                    status: RecordStatus::Pending,
                    value: None,
                    partial_value: None,
                    launch_epoch: 0,
                    t_start: self.now,
                    t_end: None,
                    worker_id: Some(worker),
                };
                rec.transition(RecordStatus::Running)?;
                self.records.push(rec);
                self.events.push(SimEvent {
                    time: self.now + duration,
                    seq: self.seq,
                    record: id,
                    worker,
                    value,
                });
                self.seq += 1;
                proposal.resolve(&ProposalOutcome::Accepted { record_id: Some(id) });
                self.strategy.on_dispatched(id);
                self.maybe_snapshot()?;
            }
            Action::Kill(rid) => {
                let idx = rid as usize;
                if idx >= self.records.len() {
                    return Err(Error::UnknownRecord(rid));
                }
                if self.records[idx].status == RecordStatus::Running
                    && self.kill_policy == KillPolicy::Honor
                {
                    let pos = self
                        .events
                        .iter()
                        .position(|e| e.record == rid)
                        .expect("running record has a scheduled event");
                    let ev = self.events.remove(pos);
                    let rec = &mut self.records[idx];
                    rec.transition(RecordStatus::Killed)?;
                    rec.t_end = Some(self.now);
                    self.idle.insert(ev.worker);
                    proposal.resolve(&ProposalOutcome::Accepted { record_id: Some(rid) });
                    self.strategy.on_killed(rid)?;
                    self.maybe_snapshot()?;
                } else {
                    // ignored kill or terminal record: acknowledged no-op
                    proposal.resolve(&ProposalOutcome::Accepted { record_id: Some(rid) });
                }
            }
            Action::Terminate => {
                self.terminated = true;
                proposal.resolve(&ProposalOutcome::Accepted { record_id: None });
            }
        }
        Ok(())
    }

    /// Hand work to every idle worker the strategy has proposals for.
    pub fn dispatch(&mut self) -> Result<()> {
        while !self.terminated && !self.idle.is_empty() {
            match self.strategy.propose()? {
                Some(p) => self.apply_proposal(p)?,
                None => break,
            }
        }
        Ok(())
    }

    /// Advance by one dispatch round plus one completion event.
    /// Returns `false` once the run is over.
    pub fn step(&mut self) -> Result<bool> {
        if self.finished {
            return Ok(false);
        }
        self.dispatch()?;
        let next = self
            .events
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| a.time.total_cmp(&b.time).then(a.seq.cmp(&b.seq)))
            .map(|(i, _)| i);
        let Some(pos) = next else {
            self.finished = true;
            return Ok(false);
        };
        if self.events[pos].time > self.t_max {
            // out of simulated time: abandon everything still in flight
            self.now = self.t_max;
            for ev in std::mem::take(&mut self.events) {
                let rec = &mut self.records[ev.record as usize];
                rec.transition(RecordStatus::Killed)?;
                rec.t_end = Some(self.t_max);
                self.idle.insert(ev.worker);
                self.strategy.on_killed(ev.record)?;
            }
            self.finished = true;
            self.maybe_snapshot()?;
            return Ok(false);
        }
        let ev = self.events.remove(pos);
        self.now = ev.time;
        let rec = &mut self.records[ev.record as usize];
        rec.transition(RecordStatus::Completed)?;
        rec.value = Some(ev.value);
        rec.t_end = Some(ev.time);
        if self.best_f.map_or(true, |b| ev.value < b) {
            self.best_f = Some(ev.value);
            self.best_x = Some(rec.point.clone());
        }
        let row = TraceRow {
            eval_index: self.trace.len(),
            t_start: rec.t_start,
            t_end: ev.time,
            worker: ev.worker,
            point: rec.point.coords.clone(),
            value: ev.value,
            best_so_far: self.best_f.unwrap(),
        };
        self.trace.push(row);
        self.idle.insert(ev.worker);
        self.strategy.on_completed(ev.record, ev.value)?;
        self.maybe_snapshot()?;
        Ok(true)
    }

    /// Drive the loop to completion.
    pub fn run(&mut self) -> Result<()> {
        while self.step()? {}
        Ok(())
    }

    /// Drive the loop until at most `completions` more evaluations finish.
    pub fn run_completions(&mut self, completions: usize) -> Result<()> {
        let target = self.trace.len() + completions;
        while self.trace.len() < target && self.step()? {}
        Ok(())
    }

    fn maybe_snapshot(&self) -> Result<()> {
        if let Some(path) = &self.snapshot_path {
            self.snapshot(path)?;
        }
        Ok(())
    }

    /// Atomically write a versioned snapshot of the full controller state.
    pub fn snapshot(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "format_version": CHECKPOINT_FORMAT_VERSION,
            "state": serde_json::to_value(self)?,
        });
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, serde_json::to_string(&doc)?)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    /// Reconstruct a controller from a snapshot. Fails loudly on corrupt
    /// files or a format-version mismatch.
    pub fn resume(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let doc: serde_json::Value = serde_json::from_str(&text)
            .map_err(|e| Error::Checkpoint(format!("corrupt snapshot: {e}")))?;
        let version = doc
            .get("format_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::Checkpoint("snapshot missing format_version".into()))?;
        if version != CHECKPOINT_FORMAT_VERSION as u64 {
            return Err(Error::Checkpoint(format!(
                "snapshot format_version {version} unsupported (want {CHECKPOINT_FORMAT_VERSION})"
            )));
        }
        let state = doc
            .get("state")
            .cloned()
            .ok_or_else(|| Error::Checkpoint("snapshot missing state".into()))?;
        serde_json::from_value(state)
            .map_err(|e| Error::Checkpoint(format!("corrupt snapshot state: {e}")))
    }
}

/// Inline controller: evaluates each accepted proposal immediately, one unit
/// of logical time apiece.
pub struct SerialController<S> {
    pub strategy: S,
    problem: ProblemSpec,
    pub records: Vec<EvaluationRecord>,
    pub trace: Vec<TraceRow>,
    best_f: Option<f64>,
    best_x: Option<Point>,
}

impl<S: Strategy> SerialController<S> {
    pub fn new(strategy: S, problem: ProblemSpec) -> Self {
        SerialController {
            strategy,
            problem,
            records: Vec::new(),
            trace: Vec::new(),
            best_f: None,
            best_x: None,
        }
    }

    pub fn best(&self) -> Option<(Point, f64)> {
        Some((self.best_x.clone()?, self.best_f?))
    }

    pub fn run(&mut self) -> Result<()> {
        loop {
            let Some(proposal) = self.strategy.propose()? else {
                // serial: nothing in flight, so a pass means we are done
                return Ok(());
            };
            match proposal.action {
                Action::Terminate => {
                    proposal.resolve(&ProposalOutcome::Accepted { record_id: None });
                    return Ok(());
                }
                Action::Kill(rid) => {
                    // nothing ever runs in the background here
                    proposal.resolve(&ProposalOutcome::Accepted { record_id: Some(rid) });
                }
                Action::Eval(ref point) => {
                    let point = point.clone();
                    if let Err(e) = self.problem.validate(&point) {
                        let action = proposal.action.clone();
                        proposal
                            .resolve(&ProposalOutcome::Rejected { reason: e.to_string() });
                        self.strategy.on_rejected(&action);
                        continue;
                    }
                    let id = self.records.len() as u64;
                    let t = self.records.len() as f64;
                    let value = self.problem.evaluate(&point)?;
                    let mut rec = EvaluationRecord {
                        id,
                        point: point.clone(),
                        status: RecordStatus::Pending,
                        value: None,
                        partial_value: None,
                        launch_epoch: 0,
                        t_start: t,
                        t_end: None,
                        worker_id: Some(0),
                    };
                    rec.transition(RecordStatus::Running)?;
                    proposal.resolve(&ProposalOutcome::Accepted { record_id: Some(id) });
                    self.strategy.on_dispatched(id);
                    rec.transition(RecordStatus::Completed)?;
                    rec.value = Some(value);
                    rec.t_end = Some(t + 1.0);
                    if self.best_f.map_or(true, |b| value < b) {
                        self.best_f = Some(value);
                        self.best_x = Some(point.clone());
                    }
                    self.trace.push(TraceRow {
                        eval_index: self.trace.len(),
                        t_start: t,
                        t_end: t + 1.0,
                        worker: 0,
                        point: point.coords.clone(),
                        value,
                        best_so_far: self.best_f.unwrap(),
                    });
                    self.records.push(rec);
                    self.strategy.on_completed(id, value)?;
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// TCP worker protocol: newline-delimited UTF-8 text frames.
// worker -> controller: HELLO <name> | RESULT <id> <f> | UPDATE <id> <f>
//                       | FAILED <id> <reason> | KILLED <id> | BYE
// controller -> worker: EVAL <id> <x1> ... <xd> | KILL <id> | TERMINATE
// ---------------------------------------------------------------------------

/// Shortest round-trippable decimal for a float.
pub fn format_float(v: f64) -> String {
    format!("{v}")
}

#[derive(Debug, Clone, PartialEq)]
enum WireFrame {
    Hello(String),
    Result(u64, f64),
    Update(u64, f64),
    Failed(u64, String),
    Killed(u64),
    Bye,
}

fn parse_frame(line: &str) -> Option<WireFrame> {
    let mut it = line.split_whitespace();
    match it.next()? {
        "HELLO" => Some(WireFrame::Hello(it.next()?.to_string())),
        "RESULT" => {
            let id = it.next()?.parse().ok()?;
            let v = it.next()?.parse().ok()?;
            if it.next().is_some() {
                return None;
            }
            Some(WireFrame::Result(id, v))
        }
        "UPDATE" => {
            let id = it.next()?.parse().ok()?;
            let v = it.next()?.parse().ok()?;
            Some(WireFrame::Update(id, v))
        }
        "FAILED" => {
            let id = it.next()?.parse().ok()?;
            Some(WireFrame::Failed(id, it.next().unwrap_or("unknown").to_string()))
        }
        "KILLED" => Some(WireFrame::Killed(it.next()?.parse().ok()?)),
        "BYE" => Some(WireFrame::Bye),
        _ => None,
    }
}

enum WorkerMsg {
    Frame(usize, WireFrame),
    /// Connection closed or produced garbage.
    Gone(usize),
}

struct TcpWorkerHandle {
    name: String,
    stream: TcpStream,
    in_flight: Option<u64>,
    alive: bool,
}

/// Controller that farms evaluations out to TCP workers. Timestamps are
/// wall-clock seconds since `run` start.
pub struct TcpController<S> {
    pub strategy: S,
    problem: ProblemSpec,
    listener: TcpListener,
    workers: Vec<TcpWorkerHandle>,
    rx: mpsc::Receiver<WorkerMsg>,
    tx: mpsc::Sender<WorkerMsg>,
    pub records: Vec<EvaluationRecord>,
    pub trace: Vec<TraceRow>,
    best_f: Option<f64>,
    best_x: Option<Point>,
}

impl<S: Strategy> TcpController<S> {
    pub fn bind(strategy: S, problem: ProblemSpec, addr: &str) -> Result<Self> {
        let listener = TcpListener::bind(addr)?;
        let (tx, rx) = mpsc::channel();
        Ok(TcpController {
            strategy,
            problem,
            listener,
            workers: Vec::new(),
            rx,
            tx,
            records: Vec::new(),
            trace: Vec::new(),
            best_f: None,
            best_x: None,
        })
    }

    pub fn local_addr(&self) -> Result<std::net::SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn best(&self) -> Option<(Point, f64)> {
        Some((self.best_x.clone()?, self.best_f?))
    }

    /// Accept `n` workers; each must open with a HELLO frame.
    pub fn accept_workers(&mut self, n: usize) -> Result<()> {
        for _ in 0..n {
            let (stream, _) = self.listener.accept()?;
            let mut reader = BufReader::new(stream.try_clone()?);
            let mut line = String::new();
            reader.read_line(&mut line)?;
            let name = match parse_frame(line.trim_end()) {
                Some(WireFrame::Hello(name)) => name,
                _ => {
                    return Err(Error::Protocol(format!(
                        "worker did not open with HELLO (got {:?})",
                        line.trim_end()
                    )))
                }
            };
            let idx = self.workers.len();
            let tx = self.tx.clone();
            std::thread::spawn(move || {
                for line in reader.lines() {
                    let Ok(line) = line else { break };
                    match parse_frame(line.trim_end()) {
                        Some(frame) => {
                            if tx.send(WorkerMsg::Frame(idx, frame)).is_err() {
                                return;
                            }
                        }
                        None => break, // unknown frame: drop the connection
                    }
                }
                let _ = tx.send(WorkerMsg::Gone(idx));
            });
            self.workers.push(TcpWorkerHandle {
                name,
                stream,
                in_flight: None,
                alive: true,
            });
        }
        Ok(())
    }

    pub fn worker_names(&self) -> Vec<String> {
        self.workers.iter().map(|w| w.name.clone()).collect()
    }

    fn send_frame(worker: &mut TcpWorkerHandle, frame: &str) -> bool {
        writeln!(worker.stream, "{frame}").is_ok()
    }

    fn fail_in_flight(&mut self, widx: usize, now: f64) -> Result<()> {
        if let Some(id) = self.workers[widx].in_flight.take() {
            let rec = &mut self.records[id as usize];
            if !rec.status.is_terminal() {
                rec.transition(RecordStatus::Failed)?;
                rec.t_end = Some(now);
                self.strategy.on_failed(id)?;
            }
        }
        Ok(())
    }

    /// Drive the event loop until the strategy terminates or all workers die.
    pub fn run(&mut self) -> Result<()> {
        let start = Instant::now();
        let mut terminated = false;
        loop {
            let now = start.elapsed().as_secs_f64();
            // dispatch to every idle live worker
            while !terminated {
                let Some(widx) = self
                    .workers
                    .iter()
                    .position(|w| w.alive && w.in_flight.is_none())
                else {
                    break;
                };
                match self.strategy.propose()? {
                    None => break,
                    Some(proposal) => match proposal.action {
                        Action::Terminate => {
                            terminated = true;
                            proposal.resolve(&ProposalOutcome::Accepted { record_id: None });
                        }
                        Action::Kill(rid) => {
                            let target = self
                                .workers
                                .iter_mut()
                                .find(|w| w.alive && w.in_flight == Some(rid));
                            if let Some(w) = target {
                                Self::send_frame(w, &format!("KILL {rid}"));
                            }
                            proposal.resolve(&ProposalOutcome::Accepted {
                                record_id: Some(rid),
                            });
                        }
                        Action::Eval(ref point) => {
                            if let Err(e) = self.problem.validate(point) {
                                let action = proposal.action.clone();
                                proposal.resolve(&ProposalOutcome::Rejected {
                                    reason: e.to_string(),
                                });
                                self.strategy.on_rejected(&action);
                                continue;
                            }
                            let id = self.records.len() as u64;
                            let coords: Vec<String> =
                                point.coords.iter().map(|&v| format_float(v)).collect();
                            let frame = format!("EVAL {id} {}", coords.join(" "));
                            let mut rec = EvaluationRecord {
                                id,
                                point: point.clone(),
                                status: RecordStatus::Pending,
                                value: None,
                                partial_value: None,
                                launch_epoch: 0,
                                t_start: now,
                                t_end: None,
                                worker_id: Some(widx),
                            };
                            rec.transition(RecordStatus::Running)?;
                            self.records.push(rec);
                            proposal.resolve(&ProposalOutcome::Accepted {
                                record_id: Some(id),
                            });
                            self.strategy.on_dispatched(id);
                            if Self::send_frame(&mut self.workers[widx], &frame) {
                                self.workers[widx].in_flight = Some(id);
                            } else {
                                self.workers[widx].alive = false;
                                let rec = &mut self.records[id as usize];
                                rec.transition(RecordStatus::Failed)?;
                                rec.t_end = Some(now);
                                self.strategy.on_failed(id)?;
                            }
                        }
                    },
                }
            }
            let in_flight = self.workers.iter().filter(|w| w.in_flight.is_some()).count();
            if terminated && in_flight == 0 {
                break;
            }
            if in_flight == 0 && self.workers.iter().all(|w| !w.alive) {
                return Err(Error::Protocol("all workers disconnected".into()));
            }
            if terminated && in_flight > 0 {
                // keep draining results below
            }
            let msg = self
                .rx
                .recv_timeout(std::time::Duration::from_secs(30))
                .map_err(|_| Error::Protocol("timed out waiting for workers".into()))?;
            let now = start.elapsed().as_secs_f64();
            match msg {
                WorkerMsg::Gone(widx) => {
                    self.workers[widx].alive = false;
                    self.fail_in_flight(widx, now)?;
                }
                WorkerMsg::Frame(widx, frame) => match frame {
                    WireFrame::Hello(_) => {
                        // HELLO after registration is a protocol violation
                        self.workers[widx].alive = false;
                        let _ = self.workers[widx].stream.shutdown(std::net::Shutdown::Both);
                        self.fail_in_flight(widx, now)?;
                    }
                    WireFrame::Result(id, value) => {
                        if self.workers[widx].in_flight != Some(id) {
                            return Err(Error::UnknownRecord(id));
                        }
                        self.workers[widx].in_flight = None;
                        let rec = &mut self.records[id as usize];
                        rec.transition(RecordStatus::Completed)?;
                        rec.value = Some(value);
                        rec.t_end = Some(now);
                        if self.best_f.map_or(true, |b| value < b) {
                            self.best_f = Some(value);
                            self.best_x = Some(rec.point.clone());
                        }
                        self.trace.push(TraceRow {
                            eval_index: self.trace.len(),
                            t_start: rec.t_start,
                            t_end: now,
                            worker: widx,
                            point: rec.point.coords.clone(),
                            value,
                            best_so_far: self.best_f.unwrap(),
                        });
                        self.strategy.on_completed(id, value)?;
                    }
                    WireFrame::Update(id, value) => {
                        if let Some(rec) = self.records.get_mut(id as usize) {
                            rec.partial_value = Some(value);
                        }
                        self.strategy.on_partial(id, value);
                    }
                    WireFrame::Failed(id, _reason) => {
                        if self.workers[widx].in_flight == Some(id) {
                            self.workers[widx].in_flight = None;
                        }
                        let rec = &mut self.records[id as usize];
                        if !rec.status.is_terminal() {
                            rec.transition(RecordStatus::Failed)?;
                            rec.t_end = Some(now);
                            self.strategy.on_failed(id)?;
                        }
                    }
                    WireFrame::Killed(id) => {
                        if self.workers[widx].in_flight == Some(id) {
                            self.workers[widx].in_flight = None;
                        }
                        let rec = &mut self.records[id as usize];
                        if !rec.status.is_terminal() {
                            rec.transition(RecordStatus::Killed)?;
                            rec.t_end = Some(now);
                            self.strategy.on_killed(id)?;
                        }
                    }
                    WireFrame::Bye => {
                        self.workers[widx].alive = false;
                        self.fail_in_flight(widx, now)?;
                    }
                },
            }
        }
        // polite shutdown
        for w in &mut self.workers {
            if w.alive {
                Self::send_frame(w, "TERMINATE");
            }
        }
        Ok(())
    }
}

/// Minimal worker client: connects, introduces itself, evaluates EVAL frames
/// with `eval`, and answers KILL/TERMINATE. Returns on TERMINATE.
pub fn run_tcp_worker(
    addr: &str,
    name: &str,
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
) -> Result<()> {
    let stream = TcpStream::connect(addr)?;
    let mut writer = stream.try_clone()?;
    writeln!(writer, "HELLO {name}")?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        let mut it = line.split_whitespace();
        match it.next() {
            Some("EVAL") => {
                let id: u64 = it
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| Error::Protocol(format!("bad EVAL frame: {line}")))?;
                let coords: std::result::Result<Vec<f64>, _> =
                    it.map(|s| s.parse::<f64>()).collect();
                let coords =
                    coords.map_err(|_| Error::Protocol(format!("bad EVAL frame: {line}")))?;
                match eval(&coords) {
                    Ok(v) => writeln!(writer, "RESULT {id} {}", format_float(v))?,
                    Err(_) => writeln!(writer, "FAILED {id} eval-error")?,
                }
            }
            Some("KILL") => {
                if let Some(id) = it.next() {
                    writeln!(writer, "KILLED {id}")?;
                }
            }
            Some("TERMINATE") => {
                writeln!(writer, "BYE")?;
                return Ok(());
            }
            _ => return Err(Error::Protocol(format!("unknown frame: {line}"))),
        }
    }
    Ok(())
}

/// Objective evaluated by spawning a subprocess: the `{x}` placeholder in any
/// argument expands to the space-separated coordinates, and the objective is
/// the last parseable float on standard output.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SubprocessEvaluator {
    pub program: String,
    pub args: Vec<String>,
}

impl SubprocessEvaluator {
    pub fn evaluate(&self, x: &[f64]) -> Result<f64> {
        let xs: Vec<String> = x.iter().map(|&v| format_float(v)).collect();
        let xs = xs.join(" ");
        let args: Vec<String> = self.args.iter().map(|a| a.replace("{x}", &xs)).collect();
        let out = std::process::Command::new(&self.program)
            .args(&args)
            .output()?;
        if !out.status.success() {
            return Err(Error::Protocol(format!(
                "subprocess exited with {:?}",
                out.status.code()
            )));
        }
        let stdout = String::from_utf8_lossy(&out.stdout);
        stdout
            .split_whitespace()
            .filter_map(|tok| tok.parse::<f64>().ok())
            .last()
            .ok_or_else(|| Error::Protocol("no float on subprocess stdout".into()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problem::lookup;
    use std::cell::RefCell;
    use std::collections::VecDeque;
    use std::rc::Rc;

    /// Plays back a fixed list of actions; counts every callback outcome.
    #[derive(Serialize, Deserialize)]
    struct Scripted {
        script: VecDeque<Action>,
        completions: Vec<(u64, f64)>,
        failures: Vec<u64>,
        kills: Vec<u64>,
        dispatches: Vec<u64>,
        rejections: usize,
        #[serde(skip)]
        outcomes: Option<Rc<RefCell<Vec<String>>>>,
    }

    impl Scripted {
        fn new(script: Vec<Action>) -> Self {
            Scripted {
                script: script.into(),
                completions: Vec::new(),
                failures: Vec::new(),
                kills: Vec::new(),
                dispatches: Vec::new(),
                rejections: 0,
                outcomes: Some(Rc::new(RefCell::new(Vec::new()))),
            }
        }
    }

    impl Strategy for Scripted {
        fn propose(&mut self) -> Result<Option<Proposal>> {
            let Some(action) = self.script.pop_front() else {
                return Ok(Some(Proposal::new(Action::Terminate)));
            };
            let log = self.outcomes.clone();
            Ok(Some(Proposal::new(action).with_callback(Box::new(
                move |o| {
                    if let Some(log) = log {
                        log.borrow_mut().push(match o {
                            ProposalOutcome::Accepted { .. } => "accept".into(),
                            ProposalOutcome::Rejected { .. } => "reject".into(),
                        });
                    }
                },
            ))))
        }
        fn on_dispatched(&mut self, id: u64) {
            self.dispatches.push(id);
        }
        fn on_rejected(&mut self, _action: &Action) {
            self.rejections += 1;
        }
        fn on_completed(&mut self, id: u64, value: f64) -> Result<()> {
            self.completions.push((id, value));
            Ok(())
        }
        fn on_failed(&mut self, id: u64) -> Result<()> {
            self.failures.push(id);
            Ok(())
        }
        fn on_killed(&mut self, id: u64) -> Result<()> {
            self.kills.push(id);
            Ok(())
        }
        fn best(&self) -> Option<(Point, f64)> {
            None
        }
    }

    fn pt(coords: &[f64]) -> Action {
        Action::Eval(Point::new(coords.to_vec()))
    }

    #[test]
    fn hand_simulated_two_worker_schedule() {
        let p = lookup("sphere", 2).unwrap();
        let s = Scripted::new(vec![pt(&[1.0, 0.0]), pt(&[0.0, 1.0]), pt(&[2.0, 2.0])]);
        let tm = TimeModel::Cycle { durations: vec![1.0, 2.0, 1.0], idx: 0 };
        let mut c = SimController::new(s, p, 2, tm, 100.0, 0).unwrap();
        c.run().unwrap();
        // first completion at t=1.0 on worker 0, third dispatch stamped 1.0
        assert_eq!(c.trace[0].t_end, 1.0);
        assert_eq!(c.trace[0].worker, 0);
        assert_eq!(c.records[2].t_start, 1.0);
        assert_eq!(c.trace.len(), 3);
        assert_eq!(c.best().unwrap().1, 1.0);
    }

    #[test]
    fn reject_path_fires_callback_once() {
        let p = lookup("sphere", 2).unwrap();
        let s = Scripted::new(vec![pt(&[99.0, 0.0]), pt(&[1.0, 1.0])]);
        let log = s.outcomes.clone().unwrap();
        let mut c = SimController::new(s, p, 1, TimeModel::Constant(1.0), 10.0, 0).unwrap();
        c.run().unwrap();
        let log = log.borrow();
        assert_eq!(log[0], "reject");
        assert_eq!(log.iter().filter(|o| *o == "reject").count(), 1);
        assert_eq!(c.strategy.rejections, 1);
        assert_eq!(c.trace.len(), 1);
    }

    #[test]
    fn kill_honored_and_ignored() {
        let p = lookup("sphere", 1).unwrap();
        // a second worker lets the kill be proposed while record 0 runs
        let s = Scripted::new(vec![pt(&[1.0]), Action::Kill(0)]);
        let mut c =
            SimController::new(s, p.clone(), 2, TimeModel::Constant(5.0), 100.0, 0).unwrap();
        c.run().unwrap();
        assert_eq!(c.records[0].status, RecordStatus::Killed);
        assert!(c.records[0].value.is_none());
        assert_eq!(c.strategy.kills, vec![0]);

        let s = Scripted::new(vec![pt(&[1.0]), Action::Kill(0)]);
        let mut c = SimController::new(s, p, 2, TimeModel::Constant(5.0), 100.0, 0)
            .unwrap()
            .kill_policy(KillPolicy::Ignore);
        c.run().unwrap();
        assert_eq!(c.records[0].status, RecordStatus::Completed);
        assert_eq!(c.records[0].value, Some(1.0));
    }

    #[test]
    fn kill_of_completed_record_is_noop() {
        let p = lookup("sphere", 1).unwrap();
        let s = Scripted::new(vec![pt(&[1.0]), pt(&[2.0]), Action::Kill(0)]);
        let mut c = SimController::new(s, p, 1, TimeModel::Constant(1.0), 100.0, 0).unwrap();
        c.run().unwrap();
        assert_eq!(c.records[0].status, RecordStatus::Completed);
        assert_eq!(c.records[1].status, RecordStatus::Completed);
    }

    #[test]
    fn kill_unknown_record_is_protocol_error() {
        let p = lookup("sphere", 1).unwrap();
        let s = Scripted::new(vec![Action::Kill(7)]);
        let mut c = SimController::new(s, p, 1, TimeModel::Constant(1.0), 100.0, 0).unwrap();
        assert!(matches!(c.run(), Err(Error::UnknownRecord(7))));
    }

    #[test]
    fn time_budget_kills_in_flight_work() {
        let p = lookup("sphere", 1).unwrap();
        let s = Scripted::new(vec![pt(&[1.0]), pt(&[2.0])]);
        let mut c = SimController::new(s, p, 2, TimeModel::Constant(5.0), 3.0, 0).unwrap();
        c.run().unwrap();
        assert!(c.trace.is_empty());
        assert!(c.records.iter().all(|r| r.status == RecordStatus::Killed));
        assert!(c.records.iter().all(|r| r.t_end == Some(3.0)));
    }

    #[test]
    fn worker_management_and_abandonment() {
        let p = lookup("sphere", 1).unwrap();
        let s = Scripted::new(vec![pt(&[1.0]), pt(&[2.0]), pt(&[3.0])]);
        let mut c = SimController::new(s, p, 1, TimeModel::Constant(1.0), 100.0, 0).unwrap();
        let w1 = c.add_worker();
        assert_eq!(c.num_workers(), 2);
        c.step().unwrap(); // dispatches 2, completes the first
        // worker w1 is mid-evaluation: removing it abandons the record
        c.remove_worker(w1).unwrap();
        assert_eq!(c.strategy.failures.len(), 1);
        c.run().unwrap();
        assert_eq!(c.num_workers(), 1);
        // the failed record is terminal, the rest completed
        assert!(c.records.iter().all(|r| r.status.is_terminal()));
    }

    #[test]
    fn last_worker_with_pending_work_is_protected() {
        let p = lookup("sphere", 1).unwrap();
        let s = Scripted::new(vec![pt(&[1.0])]);
        let mut c = SimController::new(s, p, 1, TimeModel::Constant(5.0), 100.0, 0).unwrap();
        c.dispatch().unwrap();
        assert_eq!(c.records.len(), 1);
        assert!(c.remove_worker(0).is_err());
    }

    #[test]
    fn remove_idle_worker_loses_nothing() {
        let p = lookup("sphere", 1).unwrap();
        let s = Scripted::new(vec![pt(&[1.0]), pt(&[2.0])]);
        let mut c = SimController::new(s, p, 3, TimeModel::Constant(1.0), 100.0, 0).unwrap();
        c.remove_worker(2).unwrap();
        c.run().unwrap();
        assert_eq!(c.trace.len(), 2);
        assert!(c.strategy.failures.is_empty());
    }

    #[test]
    fn snapshot_roundtrip_is_field_for_field() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        let p = lookup("sphere", 1).unwrap();
        let s = Scripted::new(vec![pt(&[1.0]), pt(&[2.0]), pt(&[3.0])]);
        let mut c = SimController::new(s, p, 1, TimeModel::Constant(1.0), 100.0, 0).unwrap();
        c.run_completions(1).unwrap();
        c.snapshot(&path).unwrap();
        let resumed: SimController<Scripted> = SimController::resume(&path).unwrap();
        assert_eq!(
            serde_json::to_string(&c).unwrap(),
            serde_json::to_string(&resumed).unwrap()
        );
    }

    #[test]
    fn snapshot_version_mismatch_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        std::fs::write(&path, r#"{"format_version": 99, "state": {}}"#).unwrap();
        let got = SimController::<Scripted>::resume(&path);
        assert!(matches!(got, Err(Error::Checkpoint(ref m)) if m.contains("99")));
    }

    #[test]
    fn corrupt_snapshot_fails_loudly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("snap.json");
        std::fs::write(&path, "{not json").unwrap();
        assert!(matches!(
            SimController::<Scripted>::resume(&path),
            Err(Error::Checkpoint(_))
        ));
    }

    #[test]
    fn serial_controller_runs_inline() {
        let p = lookup("sphere", 2).unwrap();
        let s = Scripted::new(vec![pt(&[1.0, 1.0]), pt(&[0.5, 0.5]), pt(&[2.0, 0.0])]);
        let mut c = SerialController::new(s, p);
        c.run().unwrap();
        assert_eq!(c.trace.len(), 3);
        assert_eq!(c.best().unwrap().1, 0.5);
        // monotone best
        for w in c.trace.windows(2) {
            assert!(w[1].best_so_far <= w[0].best_so_far);
        }
    }

    #[test]
    fn frame_parsing() {
        assert_eq!(parse_frame("HELLO w1"), Some(WireFrame::Hello("w1".into())));
        assert_eq!(parse_frame("RESULT 3 1.5"), Some(WireFrame::Result(3, 1.5)));
        assert_eq!(
            parse_frame("FAILED 2 oom"),
            Some(WireFrame::Failed(2, "oom".into()))
        );
        assert_eq!(parse_frame("BYE"), Some(WireFrame::Bye));
        assert_eq!(parse_frame("NONSENSE 1 2"), None);
        assert_eq!(parse_frame("RESULT 1 2 3"), None);
    }

    #[test]
    fn float_formatting_roundtrips() {
        for v in [0.1, 1.0 / 3.0, -1e-17, f64::MAX, 2.5] {
            assert_eq!(format_float(v).parse::<f64>().unwrap(), v);
        }
    }

    #[test]
    fn subprocess_evaluator_reads_last_float() {
        let ev = SubprocessEvaluator {
            program: "python3".into(),
            args: vec![
                "-c".into(),
                "import sys; xs=[float(t) for t in sys.argv[1].split()]; \
                 print('log line'); print(sum(v*v for v in xs))"
                    .into(),
                "{x}".into(),
            ],
        };
        let v = ev.evaluate(&[3.0, 4.0]).unwrap();
        assert!((v - 25.0).abs() < 1e-12);
    }

    #[test]
    fn subprocess_evaluator_no_float_is_error() {
        let ev = SubprocessEvaluator {
            program: "python3".into(),
            args: vec!["-c".into(), "print('nothing numeric here')".into()],
        };
        assert!(ev.evaluate(&[1.0]).is_err());
    }
}
