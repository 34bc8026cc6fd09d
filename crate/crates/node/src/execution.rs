//! One run on a node: the phase machine, pacing, and the execution loop that
//! drives a [`Simulation`] on its own thread.

use std::sync::mpsc::{Receiver, RecvTimeoutError, TryRecvError};
use std::time::{Duration, Instant};

use asa_core::engine::{ModelRegistry, RunOutcome, SetParam, Simulation};
use asa_core::protocol::ControlCommand;
use asa_core::scenario::ExecutionRequest;
use asa_core::StepRecord;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Initializing,
    Running,
    Paused,
    Stopping,
    Done,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("`{command}` is not allowed while {phase:?}")]
pub struct IllegalTransition {
    pub command: &'static str,
    pub phase: Phase,
}

/// How long to hold the next step so simulated time advances at
/// `speed_factor` times wall time.
///
/// `steps` counts steps since the pacing epoch including the one about to be
/// released and `elapsed` is wall time since that epoch, so lateness is never
/// accumulated. A factor of 0 never waits.
pub fn pace(speed_factor: f64, step_dt: f64, steps: u64, elapsed: Duration) -> Duration {
    // NaN counts as unpaced too.
    if speed_factor.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Duration::ZERO;
    }
    let due = Duration::try_from_secs_f64(steps as f64 * step_dt / speed_factor).unwrap_or(Duration::MAX);
    due.saturating_sub(elapsed)
}

/// Control-side state of a run.
#[derive(Debug, Clone)]
pub struct RunExecution {
    pub run_id: String,
    pub phase: Phase,
    pub speed_factor: f64,
    pending: Vec<SetParam>,
    epoch: Instant,
    epoch_step: u64,
}

impl RunExecution {
    pub fn new(run_id: impl Into<String>, now: Instant) -> Self {
        Self {
            run_id: run_id.into(),
            phase: Phase::Initializing,
            speed_factor: 0.0,
            pending: Vec::new(),
            epoch: now,
            epoch_step: 0,
        }
    }

    /// Applies a command at a step boundary (`step` is the last completed
    /// step). Returns the phases entered, in order. On error nothing changes.
    ///
    /// Stop on a run that was never played passes through RUNNING so the
    /// phase only ever moves along INITIALIZING→RUNNING⇄PAUSED→STOPPING→DONE.
    pub fn apply_control(
        &mut self,
        command: &ControlCommand,
        step: u64,
        now: Instant,
    ) -> Result<Vec<Phase>, IllegalTransition> {
        let illegal = IllegalTransition { command: command.name(), phase: self.phase };
        let entered = match (command, self.phase) {
            (ControlCommand::Play, Phase::Initializing) | (ControlCommand::Resume, Phase::Paused) => {
                self.rebase(step, now);
                vec![Phase::Running]
            }
            (ControlCommand::Pause, Phase::Running) => vec![Phase::Paused],
            (ControlCommand::Stop, Phase::Initializing) => vec![Phase::Running, Phase::Stopping],
            (ControlCommand::Stop, Phase::Running | Phase::Paused) => vec![Phase::Stopping],
            (ControlCommand::SetSpeed { factor }, Phase::Initializing | Phase::Running | Phase::Paused) => {
                if !(factor.is_finite() && *factor >= 0.0) {
                    return Err(illegal);
                }
                self.speed_factor = *factor;
                self.rebase(step, now);
                vec![]
            }
            (ControlCommand::SetParam(p), Phase::Initializing | Phase::Running | Phase::Paused) => {
                self.pending.push(p.clone());
                vec![]
            }
            _ => return Err(illegal),
        };
        if let Some(&last) = entered.last() {
            self.phase = last;
        }
        Ok(entered)
    }

    /// Moves a finished run to DONE through STOPPING. Returns the phases entered.
    pub fn finish(&mut self) -> Vec<Phase> {
        let entered = match self.phase {
            Phase::Done => vec![],
            Phase::Stopping => vec![Phase::Done],
            _ => vec![Phase::Stopping, Phase::Done],
        };
        self.phase = Phase::Done;
        entered
    }

    /// Parameter changes queued for the next boundary.
    pub fn take_params(&mut self) -> Vec<SetParam> {
        std::mem::take(&mut self.pending)
    }

    /// Wait before executing step `step + 1`.
    pub fn wait_before(&self, step_dt: f64, step: u64, now: Instant) -> Duration {
        pace(self.speed_factor, step_dt, step + 1 - self.epoch_step, now.saturating_duration_since(self.epoch))
    }

    fn rebase(&mut self, step: u64, now: Instant) {
        self.epoch = now;
        self.epoch_step = step;
    }
}

/// Messages from the handler to an execution thread.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Control(ControlCommand),
    /// Hold at the next boundary (unacknowledged records over the buffer limit).
    Hold(bool),
}

/// Messages from an execution thread to the handler.
#[derive(Debug, Clone, PartialEq)]
pub enum RunEvent {
    Phase(Phase),
    Records(Vec<StepRecord>),
    Rejected(IllegalTransition),
    Finished(RunOutcome),
}

/// Flushes are also forced once this many records are buffered, which keeps
/// frames far below the protocol maximum.
const FLUSH_RECORDS: usize = 20_000;

struct Loop<'a> {
    exec: RunExecution,
    buffer: Vec<StepRecord>,
    buffered_steps: u64,
    held: bool,
    emit: &'a mut dyn FnMut(RunEvent) -> bool,
}

/// The handler went away; the run is abandoned.
struct Abandoned;

impl Loop<'_> {
    fn send(&mut self, event: RunEvent) -> Result<(), Abandoned> {
        if (self.emit)(event) {
            Ok(())
        } else {
            Err(Abandoned)
        }
    }

    fn flush(&mut self) -> Result<(), Abandoned> {
        self.buffered_steps = 0;
        if self.buffer.is_empty() {
            return Ok(());
        }
        let records = std::mem::take(&mut self.buffer);
        self.send(RunEvent::Records(records))
    }

    fn enter(&mut self, phases: Vec<Phase>) -> Result<(), Abandoned> {
        if !phases.is_empty() {
            self.flush()?;
        }
        for p in phases {
            self.send(RunEvent::Phase(p))?;
        }
        Ok(())
    }

    fn handle(&mut self, msg: Inbound, step: u64) -> Result<(), Abandoned> {
        match msg {
            Inbound::Hold(h) => {
                if h && !self.held {
                    tracing::warn!(run_id = %self.exec.run_id, "record buffer full, holding");
                }
                self.held = h;
                Ok(())
            }
            Inbound::Control(cmd) => match self.exec.apply_control(&cmd, step, Instant::now()) {
                Ok(phases) => self.enter(phases),
                Err(e) => self.send(RunEvent::Rejected(e)),
            },
        }
    }

    fn blocked(&self) -> bool {
        matches!(self.exec.phase, Phase::Initializing | Phase::Paused)
            || (self.held && self.exec.phase == Phase::Running)
    }
}

/// Executes one request to the end, reporting through `emit`.
///
/// The run waits in INITIALIZING for Play. Records are flushed every
/// `flush_every` steps and at every phase change. Returns early, silently,
/// when `emit` reports that nobody is listening or the inbound queue closes.
pub fn execute(
    request: &ExecutionRequest,
    registry: &ModelRegistry,
    inbound: &Receiver<Inbound>,
    flush_every: u64,
    emit: &mut dyn FnMut(RunEvent) -> bool,
) {
    let run_id = &request.request_id;
    let mut sim = match Simulation::new(&request.scenario, registry, run_id, request.seed) {
        Ok(sim) => sim,
        Err(e) => {
            emit(RunEvent::Finished(RunOutcome::Failed { reason: e.to_string() }));
            return;
        }
    };
    let mut lp = Loop {
        exec: RunExecution::new(run_id.clone(), Instant::now()),
        buffer: sim.take_initial_records(),
        buffered_steps: 1,
        held: false,
        emit,
    };
    let dt = sim.clock().step_dt;
    let result = (|| -> Result<RunOutcome, Abandoned> {
        loop {
            let step = sim.clock().step;
            loop {
                match inbound.try_recv() {
                    Ok(msg) => lp.handle(msg, step)?,
                    Err(TryRecvError::Empty) => break,
                    Err(TryRecvError::Disconnected) => return Err(Abandoned),
                }
            }
            while lp.blocked() {
                lp.flush()?;
                let msg = inbound.recv().map_err(|_| Abandoned)?;
                lp.handle(msg, step)?;
            }
            if lp.exec.phase == Phase::Stopping {
                return Ok(RunOutcome::Stopped { step });
            }
            if sim.is_finished() {
                return Ok(RunOutcome::Completed { steps: step });
            }
            let wait = lp.exec.wait_before(dt, step, Instant::now());
            if !wait.is_zero() {
                match inbound.recv_timeout(wait) {
                    Ok(msg) => {
                        lp.handle(msg, step)?;
                        continue;
                    }
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => return Err(Abandoned),
                }
            }
            for p in lp.exec.take_params() {
                sim.set_param(p);
            }
            match sim.step() {
                Ok(report) => {
                    lp.buffer.extend(report.records);
                    lp.buffered_steps += 1;
                    if lp.buffered_steps >= flush_every || lp.buffer.len() >= FLUSH_RECORDS {
                        lp.flush()?;
                    }
                }
                Err(e) => return Ok(RunOutcome::Failed { reason: e.to_string() }),
            }
        }
    })();
    let Ok(outcome) = result else { return };
    let phases = lp.exec.finish();
    if lp.enter(phases).is_ok() {
        let _ = lp.send(RunEvent::Finished(outcome));
    }
}
