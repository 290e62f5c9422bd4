//! Worker state and the synchronous iteration loop.

use rayon::prelude::*;
use thiserror::Error;

use super::{combine, storm_update, HyperParamError, HyperParams};
use crate::diag::{self, MetricsRecord};
use crate::graph::{mix, GraphError, MixingMatrix};
use crate::linalg::{all_finite, mean_vector, norm};
use crate::problem::{global_accuracy, global_upper_loss, BilevelProblem, Split};
use crate::rng::{domain, draw_batch, StreamRng};

/// Tracker norms at or below this threshold freeze the normalized step
/// (the direction `p/|p|` is undefined at zero).
pub const EPS_NORM: f64 = 1e-12;

/// Everything worker `k` carries between iterations: the three variables,
/// the six stream estimators, the per-variable combined estimators, the
/// gossip-tracked gradients, and the previous copies the recursions need.
#[derive(Clone, Debug)]
pub struct WorkerState {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub prev_x: Vec<f64>,
    pub prev_y: Vec<f64>,
    pub prev_z: Vec<f64>,
    /// Estimator of `∇₁f(x,y)`.
    pub u1: Vec<f64>,
    /// Estimator of `∇₁g(x,y)`.
    pub u2: Vec<f64>,
    /// Estimator of `∇₁g(x,z)`.
    pub u3: Vec<f64>,
    /// Estimator of `∇₂f(x,y)`.
    pub v1: Vec<f64>,
    /// Estimator of `∇₂g(x,y)`.
    pub v2: Vec<f64>,
    /// Estimator of `∇₂g(x,z)`.
    pub w1: Vec<f64>,
    /// Combined estimator for `x`.
    pub cu: Vec<f64>,
    /// Combined estimator for `y`.
    pub cv: Vec<f64>,
    /// Combined estimator for `z`.
    pub cw: Vec<f64>,
    pub prev_cu: Vec<f64>,
    pub prev_cv: Vec<f64>,
    pub prev_cw: Vec<f64>,
    /// Tracked gradient for `x`.
    pub p: Vec<f64>,
    /// Tracked gradient for `y`.
    pub q: Vec<f64>,
    /// Tracked gradient for `z`.
    pub r: Vec<f64>,
}

impl WorkerState {
    fn new(x: Vec<f64>, y: Vec<f64>, z: Vec<f64>) -> Self {
        let dx = x.len();
        let dy = y.len();
        Self {
            prev_x: x.clone(),
            prev_y: y.clone(),
            prev_z: z.clone(),
            x,
            y,
            z,
            u1: vec![0.0; dx],
            u2: vec![0.0; dx],
            u3: vec![0.0; dx],
            v1: vec![0.0; dy],
            v2: vec![0.0; dy],
            w1: vec![0.0; dy],
            cu: vec![0.0; dx],
            cv: vec![0.0; dy],
            cw: vec![0.0; dy],
            prev_cu: vec![0.0; dx],
            prev_cv: vec![0.0; dy],
            prev_cw: vec![0.0; dy],
            p: vec![0.0; dx],
            q: vec![0.0; dy],
            r: vec![0.0; dy],
        }
    }
}

/// Frozen copy of one worker's state, for trajectory comparisons in tests.
#[derive(Clone, Debug)]
pub struct WorkerSnapshot {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u1: Vec<f64>,
    pub u2: Vec<f64>,
    pub u3: Vec<f64>,
    pub v1: Vec<f64>,
    pub v2: Vec<f64>,
    pub w1: Vec<f64>,
    pub cu: Vec<f64>,
    pub cv: Vec<f64>,
    pub cw: Vec<f64>,
    pub p: Vec<f64>,
    pub q: Vec<f64>,
    pub r: Vec<f64>,
}

impl From<&WorkerState> for WorkerSnapshot {
    fn from(st: &WorkerState) -> Self {
        Self {
            x: st.x.clone(),
            y: st.y.clone(),
            z: st.z.clone(),
            u1: st.u1.clone(),
            u2: st.u2.clone(),
            u3: st.u3.clone(),
            v1: st.v1.clone(),
            v2: st.v2.clone(),
            w1: st.w1.clone(),
            cu: st.cu.clone(),
            cv: st.cv.clone(),
            cw: st.cw.clone(),
            p: st.p.clone(),
            q: st.q.clone(),
            r: st.r.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TrackerKind {
    P,
    Q,
    R,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VarKind {
    X,
    Y,
    Z,
}

impl std::fmt::Display for VarKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            VarKind::X => "x",
            VarKind::Y => "y",
            VarKind::Z => "z",
        })
    }
}

/// Non-finite value detected mid-run.
#[derive(Clone, Debug, Error)]
#[error("iteration {iteration}, worker {worker}, {stage}: non-finite value")]
pub struct Divergence {
    pub iteration: usize,
    pub worker: usize,
    pub stage: &'static str,
}

#[derive(Debug, Error)]
pub enum InitError {
    #[error(transparent)]
    HyperParams(#[from] HyperParamError),
    #[error("initial batch size {batch} exceeds worker {worker}'s {which} shard of {shard} samples")]
    BatchExceedsShard { worker: usize, which: &'static str, batch: usize, shard: usize },
    #[error("mixing matrix has {matrix} workers but the problem has {problem}")]
    WorkerMismatch { matrix: usize, problem: usize },
}

/// Identical starting state on every worker; `z₀ = y₀`.
pub fn init(problem: &dyn BilevelProblem, hp: &HyperParams, seed: u64) -> Result<Vec<WorkerState>, InitError> {
    hp.validate()?;
    for k in 0..problem.workers() {
        if let Some(n) = problem.f_domain(k) {
            if hp.batch0 > n {
                return Err(InitError::BatchExceedsShard { worker: k, which: "validation", batch: hp.batch0, shard: n });
            }
        }
        if let Some(n) = problem.g_domain(k) {
            if hp.batch0 > n {
                return Err(InitError::BatchExceedsShard { worker: k, which: "training", batch: hp.batch0, shard: n });
            }
        }
    }
    let mut rng = StreamRng::from_path(seed, &[domain::INIT]);
    let (x0, y0) = problem.initial_point(&mut rng);
    assert_eq!(x0.len(), problem.dim_x());
    assert_eq!(y0.len(), problem.dim_y());
    let z0 = y0.clone();
    Ok((0..problem.workers()).map(|_| WorkerState::new(x0.clone(), y0.clone(), z0.clone())).collect())
}

/// Per-iteration context shared by all workers.
#[derive(Clone, Copy, Debug)]
pub struct IterationContext {
    pub seed: u64,
    pub t: usize,
    /// Reuse one lower-level batch for both the `(x,y)` and `(x,z)` streams.
    pub shared_zeta: bool,
    /// Every worker consumes worker 0's random streams (symmetry tests).
    pub clone_streams: bool,
    pub parallel: bool,
}

fn check_finite(t: usize, worker: usize, stage: &'static str, vectors: &[&[f64]]) -> Result<(), Divergence> {
    for v in vectors {
        if !all_finite(v) {
            return Err(Divergence { iteration: t, worker, stage });
        }
    }
    Ok(())
}

/// Phase 1+2 for one worker: fresh batches, the six recursive estimators,
/// and the per-variable combination.
fn estimators_and_combine(
    problem: &dyn BilevelProblem,
    st: &mut WorkerState,
    worker: usize,
    hp: &HyperParams,
    ctx: &IterationContext,
) -> Result<(), Divergence> {
    let stream_worker = if ctx.clone_streams { 0 } else { worker as u64 };
    let t = ctx.t as u64;
    let first = ctx.t == 0;
    let count = if first { hp.batch0 } else { hp.batch };
    let xi = draw_batch(ctx.seed, domain::BATCH_XI, stream_worker, t, problem.f_domain(worker), count);
    let zeta = draw_batch(ctx.seed, domain::BATCH_ZETA, stream_worker, t, problem.g_domain(worker), count);
    let zeta2 = if ctx.shared_zeta {
        zeta.clone()
    } else {
        draw_batch(ctx.seed, domain::BATCH_ZETA2, stream_worker, t, problem.g_domain(worker), count)
    };

    let g1f = problem.grad1_f(worker, &st.x, &st.y, &xi);
    let g2f = problem.grad2_f(worker, &st.x, &st.y, &xi);
    let g1gy = problem.grad1_g(worker, &st.x, &st.y, &zeta);
    let g2gy = problem.grad2_g(worker, &st.x, &st.y, &zeta);
    let g1gz = problem.grad1_g(worker, &st.x, &st.z, &zeta2);
    let g2gz = problem.grad2_g(worker, &st.x, &st.z, &zeta2);

    if first {
        st.u1 = g1f;
        st.u2 = g1gy;
        st.u3 = g1gz;
        st.v1 = g2f;
        st.v2 = g2gy;
        st.w1 = g2gz;
    } else {
        // Same batch, previous iterates.
        let p1f = problem.grad1_f(worker, &st.prev_x, &st.prev_y, &xi);
        let p2f = problem.grad2_f(worker, &st.prev_x, &st.prev_y, &xi);
        let p1gy = problem.grad1_g(worker, &st.prev_x, &st.prev_y, &zeta);
        let p2gy = problem.grad2_g(worker, &st.prev_x, &st.prev_y, &zeta);
        let p1gz = problem.grad1_g(worker, &st.prev_x, &st.prev_z, &zeta2);
        let p2gz = problem.grad2_g(worker, &st.prev_x, &st.prev_z, &zeta2);
        st.u1 = storm_update(&st.u1, &g1f, &p1f, hp.gamma_x, false);
        st.u2 = storm_update(&st.u2, &g1gy, &p1gy, hp.gamma_x, false);
        st.u3 = storm_update(&st.u3, &g1gz, &p1gz, hp.gamma_x, false);
        st.v1 = storm_update(&st.v1, &g2f, &p2f, hp.gamma_y, false);
        st.v2 = storm_update(&st.v2, &g2gy, &p2gy, hp.gamma_y, false);
        st.w1 = storm_update(&st.w1, &g2gz, &p2gz, hp.gamma_z, false);
    }

    let (cu, cv, cw) = combine(&st.u1, &st.u2, &st.u3, &st.v1, &st.v2, &st.w1, hp.delta);
    st.prev_cu = std::mem::replace(&mut st.cu, cu);
    st.prev_cv = std::mem::replace(&mut st.cv, cv);
    st.prev_cw = std::mem::replace(&mut st.cw, cw);

    check_finite(
        ctx.t,
        worker,
        "gradient estimators",
        &[&st.u1, &st.u2, &st.u3, &st.v1, &st.v2, &st.w1, &st.cu, &st.cv, &st.cw],
    )
}

/// Phase 3 for one tracker family: `p̃ = (p − u_prev)·[t>0] + u`, then a
/// gossip round. The worker mean of the mixed tracker equals the worker
/// mean of the current combined estimator, exactly in real arithmetic.
pub fn track_and_mix(
    states: &mut [WorkerState],
    which: TrackerKind,
    mixing: &MixingMatrix,
    is_first: bool,
) -> Result<(), GraphError> {
    let tildes: Vec<Vec<f64>> = states
        .iter()
        .map(|st| {
            let (tracker, prev_comb, comb) = match which {
                TrackerKind::P => (&st.p, &st.prev_cu, &st.cu),
                TrackerKind::Q => (&st.q, &st.prev_cv, &st.cv),
                TrackerKind::R => (&st.r, &st.prev_cw, &st.cw),
            };
            if is_first {
                comb.clone()
            } else {
                tracker.iter().zip(prev_comb).zip(comb).map(|((t, pc), c)| t - pc + c).collect()
            }
        })
        .collect();
    let mixed = mix(&tildes, mixing)?;
    for (st, new) in states.iter_mut().zip(mixed) {
        match which {
            TrackerKind::P => st.p = new,
            TrackerKind::Q => st.q = new,
            TrackerKind::R => st.r = new,
        }
    }
    Ok(())
}

/// Pre-mix displacement of one worker in phase 4.
#[derive(Clone, Copy, Debug)]
pub struct StepReport {
    pub worker: usize,
    pub tracker_norm: f64,
    pub step_norm: f64,
}

/// Phase 4 for one variable family: move each worker by exactly `eta` along
/// the normalized tracker (no movement if the tracker norm is below
/// [`EPS_NORM`]), or by the raw `−eta·tracker` when `normalized` is off,
/// then gossip-mix the variables. Returns the pre-mix displacements.
pub fn normalized_step_and_mix(
    states: &mut [WorkerState],
    which: VarKind,
    eta: f64,
    mixing: &MixingMatrix,
    normalized: bool,
) -> Result<Vec<StepReport>, GraphError> {
    let mut reports = Vec::with_capacity(states.len());
    let mut tildes = Vec::with_capacity(states.len());
    for (worker, st) in states.iter().enumerate() {
        let (var, tracker) = match which {
            VarKind::X => (&st.x, &st.p),
            VarKind::Y => (&st.y, &st.q),
            VarKind::Z => (&st.z, &st.r),
        };
        let tracker_norm = norm(tracker);
        let mut moved = var.clone();
        if normalized {
            if tracker_norm > EPS_NORM {
                let scale = eta / tracker_norm;
                for (m, t) in moved.iter_mut().zip(tracker) {
                    *m -= scale * t;
                }
            }
        } else {
            for (m, t) in moved.iter_mut().zip(tracker) {
                *m -= eta * t;
            }
        }
        let step_norm = moved.iter().zip(var).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        reports.push(StepReport { worker, tracker_norm, step_norm });
        tildes.push(moved);
    }
    let mixed = mix(&tildes, mixing)?;
    for (st, new) in states.iter_mut().zip(mixed) {
        match which {
            VarKind::X => st.prev_x = std::mem::replace(&mut st.x, new),
            VarKind::Y => st.prev_y = std::mem::replace(&mut st.y, new),
            VarKind::Z => st.prev_z = std::mem::replace(&mut st.z, new),
        }
    }
    Ok(reports)
}

/// One pre-mix step observed by [`Runner::run_with`].
#[derive(Clone, Copy, Debug)]
pub struct StepEvent {
    pub t: usize,
    pub worker: usize,
    pub var: VarKind,
    pub eta: f64,
    pub tracker_norm: f64,
    pub step_norm: f64,
}

/// Executes one full iteration (phases 1-4) on all workers. The
/// `after_tracking` callback sees the states at the measurement point of
/// the iteration: variables still at step `t`, trackers already at `t`.
pub fn run_iteration<F, G>(
    problem: &dyn BilevelProblem,
    states: &mut [WorkerState],
    mixing: &MixingMatrix,
    hp: &HyperParams,
    ctx: &IterationContext,
    after_tracking: F,
    on_step: &mut G,
) -> Result<(), Divergence>
where
    F: FnOnce(&[WorkerState]),
    G: FnMut(StepEvent),
{
    let results: Vec<Result<(), Divergence>> = if ctx.parallel && states.len() > 1 {
        states
            .par_iter_mut()
            .enumerate()
            .map(|(k, st)| estimators_and_combine(problem, st, k, hp, ctx))
            .collect()
    } else {
        states
            .iter_mut()
            .enumerate()
            .map(|(k, st)| estimators_and_combine(problem, st, k, hp, ctx))
            .collect()
    };
    for res in results {
        res?;
    }

    let first = ctx.t == 0;
    for which in [TrackerKind::P, TrackerKind::Q, TrackerKind::R] {
        track_and_mix(states, which, mixing, first).expect("states and mixing matrix agree by construction");
    }
    for (k, st) in states.iter().enumerate() {
        check_finite(ctx.t, k, "gradient tracking", &[&st.p, &st.q, &st.r])?;
    }

    after_tracking(states);

    for (which, eta) in [(VarKind::X, hp.eta_x), (VarKind::Y, hp.eta_y), (VarKind::Z, hp.eta_z)] {
        let reports = normalized_step_and_mix(states, which, eta, mixing, hp.normalized)
            .expect("states and mixing matrix agree by construction");
        for report in reports {
            on_step(StepEvent {
                t: ctx.t,
                worker: report.worker,
                var: which,
                eta,
                tracker_norm: report.tracker_norm,
                step_norm: report.step_norm,
            });
        }
    }
    for (k, st) in states.iter().enumerate() {
        check_finite(ctx.t, k, "variable update", &[&st.x, &st.y, &st.z])?;
    }
    Ok(())
}

/// Knobs of a single run that are not algorithm hyperparameters.
#[derive(Clone, Copy, Debug)]
pub struct RunOptions {
    pub seed: u64,
    /// Cadence of the full-batch gradient diagnostics; 0 disables them.
    pub diag_every: usize,
    /// Cadence of loss/accuracy evaluation; 0 disables it.
    pub eval_every: usize,
    pub parallel: bool,
    pub shared_zeta: bool,
    pub clone_streams: bool,
    pub record_trajectory: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            seed: 0,
            diag_every: 10,
            eval_every: 1,
            parallel: true,
            shared_zeta: false,
            clone_streams: false,
            record_trajectory: false,
        }
    }
}

/// Everything a finished (or aborted) run produced.
#[derive(Clone, Debug)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    /// Global validation loss at the final averaged iterate.
    pub final_loss: Option<f64>,
    /// Global test accuracy at the final averaged iterate.
    pub final_accuracy: Option<f64>,
    pub divergence: Option<Divergence>,
    /// Per-iteration snapshots when `record_trajectory` was set.
    pub trajectory: Option<Vec<Vec<WorkerSnapshot>>>,
}

/// Drives a full run of the configured algorithm over one problem instance.
pub struct Runner<'a> {
    problem: &'a dyn BilevelProblem,
    mixing: &'a MixingMatrix,
    hp: HyperParams,
    opts: RunOptions,
    states: Vec<WorkerState>,
}

impl<'a> Runner<'a> {
    /// Validates the configuration and initializes all workers.
    /// The stored hyperparameters are resolved: `variance_reduced = false`
    /// becomes `γ = 1`.
    pub fn new(
        problem: &'a dyn BilevelProblem,
        mixing: &'a MixingMatrix,
        hp: &HyperParams,
        opts: RunOptions,
    ) -> Result<Self, InitError> {
        if mixing.workers() != problem.workers() {
            return Err(InitError::WorkerMismatch { matrix: mixing.workers(), problem: problem.workers() });
        }
        let states = init(problem, hp, opts.seed)?;
        Ok(Self { problem, mixing, hp: hp.resolved(), opts, states })
    }

    pub fn states(&self) -> &[WorkerState] {
        &self.states
    }

    pub fn hyperparams(&self) -> &HyperParams {
        &self.hp
    }

    pub fn run(&mut self) -> RunOutput {
        self.run_with(|_| {})
    }

    /// Runs all configured iterations, reporting every pre-mix step to
    /// `on_step`. Emits one metrics record per iteration plus a final
    /// evaluation record, unless the run aborts on a non-finite value.
    pub fn run_with(&mut self, mut on_step: impl FnMut(StepEvent)) -> RunOutput {
        let iterations = self.hp.iterations;
        let mut records = Vec::with_capacity(iterations + 1);
        let mut trajectory = self.opts.record_trajectory.then(Vec::new);
        let mut divergence = None;
        for t in 0..iterations {
            let ctx = IterationContext {
                seed: self.opts.seed,
                t,
                shared_zeta: self.opts.shared_zeta,
                clone_streams: self.opts.clone_streams,
                parallel: self.opts.parallel,
            };
            let problem = self.problem;
            let hp = &self.hp;
            let opts = &self.opts;
            let mut record_slot = None;
            let result = run_iteration(
                problem,
                &mut self.states,
                self.mixing,
                hp,
                &ctx,
                |states| {
                    record_slot = Some(collect_metrics(problem, hp, opts, t, t + 1 == iterations, states));
                },
                &mut on_step,
            );
            if let Some(record) = record_slot {
                records.push(record);
            }
            match result {
                Ok(()) => {
                    if let Some(tr) = trajectory.as_mut() {
                        tr.push(self.states.iter().map(WorkerSnapshot::from).collect());
                    }
                }
                Err(div) => {
                    divergence = Some(div);
                    break;
                }
            }
        }
        let (final_loss, final_accuracy) = if divergence.is_none() {
            let final_record = final_evaluation(self.problem, &self.hp, iterations, &self.states);
            let out = (final_record.upper_loss, final_record.test_accuracy);
            records.push(final_record);
            out
        } else {
            (None, None)
        };
        RunOutput { records, final_loss, final_accuracy, divergence, trajectory }
    }
}

fn collect_metrics(
    problem: &dyn BilevelProblem,
    hp: &HyperParams,
    opts: &RunOptions,
    t: usize,
    is_last: bool,
    states: &[WorkerState],
) -> MetricsRecord {
    let mut record = MetricsRecord::new(t);
    fill_consensus(&mut record, states);
    let eval_due = opts.eval_every > 0 && (t % opts.eval_every == 0 || is_last);
    let diag_due = opts.diag_every > 0 && (t % opts.diag_every == 0 || is_last);
    if eval_due || diag_due {
        let mean_x = mean_vector(&states.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>());
        let mean_y = mean_vector(&states.iter().map(|s| s.y.as_slice()).collect::<Vec<_>>());
        let mean_z = mean_vector(&states.iter().map(|s| s.z.as_slice()).collect::<Vec<_>>());
        if eval_due {
            record.upper_loss = Some(global_upper_loss(problem, &mean_x, &mean_y, Split::Validation));
            record.test_accuracy = global_accuracy(problem, &mean_x, &mean_y, Split::Test);
        }
        if diag_due {
            for stream in diag::EstimatorStream::ALL {
                let err = diag::gradient_error(problem, states, stream);
                record.set_gradient_error(stream, err);
            }
            let (h_norm, gz_norm) = diag::surrogate_norms(problem, &mean_x, &mean_y, &mean_z, hp.delta);
            record.surrogate_h = Some(h_norm);
            record.surrogate_gz = Some(gz_norm);
            record.hypergrad_exact = problem.exact_hypergradient(&mean_x).map(|g| norm(&g));
        }
    }
    record
}

fn fill_consensus(record: &mut MetricsRecord, states: &[WorkerState]) {
    let gather = |f: fn(&WorkerState) -> &Vec<f64>| -> Vec<&[f64]> {
        states.iter().map(|s| f(s).as_slice()).collect()
    };
    record.consensus_x = diag::consensus_error(&gather(|s| &s.x));
    record.consensus_y = diag::consensus_error(&gather(|s| &s.y));
    record.consensus_z = diag::consensus_error(&gather(|s| &s.z));
    record.consensus_p = diag::consensus_error(&gather(|s| &s.p));
    record.consensus_q = diag::consensus_error(&gather(|s| &s.q));
    record.consensus_r = diag::consensus_error(&gather(|s| &s.r));
}

/// Post-loop record at `t = iterations`: consensus plus loss/accuracy of
/// the final iterate (no estimator-based entries; phase 1-3 did not run).
fn final_evaluation(
    problem: &dyn BilevelProblem,
    _hp: &HyperParams,
    iterations: usize,
    states: &[WorkerState],
) -> MetricsRecord {
    let mut record = MetricsRecord::new(iterations);
    fill_consensus(&mut record, states);
    let mean_x = mean_vector(&states.iter().map(|s| s.x.as_slice()).collect::<Vec<_>>());
    let mean_y = mean_vector(&states.iter().map(|s| s.y.as_slice()).collect::<Vec<_>>());
    record.upper_loss = Some(global_upper_loss(problem, &mean_x, &mean_y, Split::Validation));
    record.test_accuracy = global_accuracy(problem, &mean_x, &mean_y, Split::Test);
    record
}
