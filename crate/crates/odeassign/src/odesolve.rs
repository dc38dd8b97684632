//! Adaptive Dormand–Prince 5(4) integration over plain `&[f64]` states.
//!
//! This is the classic explicit embedded Runge–Kutta pair: seven stages, six
//! fresh RHS evaluations per attempted step thanks to first-same-as-last
//! (the seventh stage of an accepted step is the first stage of the next),
//! a fifth-order solution candidate, and a fourth-order embedded solution
//! whose difference drives the step controller.
//!
//! Everything here is deliberately dumb about what it integrates: the RHS is
//! a closure over raw slices, the solver owns no model state, and repeated
//! runs with the same inputs produce bit-identical outputs (wall-clock stats
//! aside). The taped replay in [`crate::nodelayer`] reuses [`tableau`] and
//! mirrors the exact accumulation order of [`dopri5_step`], so keep the two
//! in sync if the arithmetic here ever changes.

use std::io::Write as IoWrite;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Butcher tableau for the Dormand–Prince 5(4) pair.
///
/// `A` holds the stage combination rows (row `s` uses entries `0..s`), `C`
/// the abscissae, `B5` the fifth-order solution weights, and `E = B5 - B4`
/// the error weights. Row 6 of `A` equals `B5[..6]`, which is what makes the
/// last stage of an accepted step reusable as the next step's first stage.
pub mod tableau {
    pub const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];

    pub const A: [[f64; 6]; 7] = [
        [0.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];

    pub const B5: [f64; 7] =
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];

    /// Fifth-order minus fourth-order weights.
    pub const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
}

/// Step-size growth is capped per step at this factor, shrinkage at its
/// inverse counterpart; both are conventional choices for this pair.
pub const MAX_GROWTH: f64 = 5.0;
pub const MAX_SHRINK: f64 = 0.2;

// ── Configuration and bookkeeping ────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SolverConfig {
    /// Absolute error tolerance, must be positive.
    pub atol: f64,
    /// Relative error tolerance, must be nonnegative.
    pub rtol: f64,
    /// Initial step magnitude. `None` means 1e-2 of the interval length.
    /// Direction always follows the sign of `t_end - t_start`.
    pub h_init: Option<f64>,
    /// Smallest step magnitude the controller may use.
    pub h_min: f64,
    /// Largest step magnitude the controller may use.
    pub h_max: f64,
    /// Budget of attempted steps (accepted + rejected).
    pub max_steps: usize,
    /// Safety factor multiplied into every step-size update, in (0, 1).
    pub safety: f64,
    /// Default upper integration limit used by callers that integrate a
    /// model field from 0 (not consulted by [`integrate`] itself, whose
    /// interval is explicit).
    pub t_end: f64,
}

impl Default for SolverConfig {
    fn default() -> SolverConfig {
        SolverConfig {
            atol: 1e-2,
            rtol: 1e-2,
            h_init: None,
            h_min: 1e-12,
            h_max: 1e3,
            max_steps: 100_000,
            safety: 0.9,
            t_end: 1.5,
        }
    }
}

impl SolverConfig {
    /// A tight-tolerance variant of `self`, used by gradient-agreement
    /// checks where solver error must not mask autodiff error.
    pub fn with_tol(&self, atol: f64, rtol: f64) -> SolverConfig {
        SolverConfig { atol, rtol, ..self.clone() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.atol > 0.0) {
            return Err(Error::config(format!("atol must be > 0, got {}", self.atol)));
        }
        if !(self.rtol >= 0.0) {
            return Err(Error::config(format!("rtol must be >= 0, got {}", self.rtol)));
        }
        if !(self.h_min > 0.0 && self.h_min <= self.h_max) {
            return Err(Error::config(format!(
                "need 0 < h_min <= h_max, got h_min = {}, h_max = {}",
                self.h_min, self.h_max
            )));
        }
        if let Some(h) = self.h_init {
            if !(h > 0.0 && h.is_finite()) {
                return Err(Error::config(format!("h_init must be a positive magnitude, got {h}")));
            }
        }
        if !(self.safety > 0.0 && self.safety < 1.0) {
            return Err(Error::config(format!("safety must lie in (0, 1), got {}", self.safety)));
        }
        if self.max_steps == 0 {
            return Err(Error::config("max_steps must be at least 1"));
        }
        if !(self.t_end.is_finite() && self.t_end >= 0.0) {
            return Err(Error::config(format!("t_end must be finite and >= 0, got {}", self.t_end)));
        }
        Ok(())
    }
}

/// Counters for one integration run.
#[derive(Clone, Copy, Debug, Default, Serialize, Deserialize)]
pub struct SolveStats {
    /// RHS evaluations: 1 up front plus 6 per attempted step.
    pub nfe: usize,
    pub steps_accepted: usize,
    pub steps_rejected: usize,
    /// Wall-clock seconds. Excluded from all determinism guarantees.
    pub elapsed: f64,
}

/// Final state plus run counters.
#[derive(Clone, Debug)]
pub struct Solution {
    pub state: Vec<f64>,
    pub stats: SolveStats,
}

/// Accepted-step history: `times[0]` is the start time, the last entry the
/// end time, and `states[i]` the state at `times[i]`. Times are strictly
/// monotone, increasing or decreasing with the integration direction.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
}

impl Trajectory {
    /// CSV with header `t,x_0,...,x_{d-1}`, one row per recorded point, every
    /// value printed with 17 significant digits so parsing it back is exact.
    pub fn write_csv(&self, w: &mut impl IoWrite) -> std::io::Result<()> {
        let dim = self.states.first().map_or(0, |s| s.len());
        write!(w, "t")?;
        for j in 0..dim {
            write!(w, ",x_{j}")?;
        }
        writeln!(w)?;
        for (t, x) in self.times.iter().zip(&self.states) {
            write!(w, "{}", fmt_f64(*t))?;
            for v in x {
                write!(w, ",{}", fmt_f64(*v))?;
            }
            writeln!(w)?;
        }
        Ok(())
    }
}

/// 17 significant digits: enough to reproduce any f64 exactly on parse.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

// ── Single step ──────────────────────────────────────────────────────────

/// Result of one embedded step attempt.
pub struct StepOutput {
    /// Fifth-order candidate at `t + h`.
    pub x_new: Vec<f64>,
    /// Raw embedded error vector (already scaled by `h`).
    pub err: Vec<f64>,
    /// All seven stage derivatives, `stages[0]` being the `k1` passed in.
    pub stages: Vec<Vec<f64>>,
}

/// One Dormand–Prince step from `(t, x)` with signed step `h`, reusing the
/// caller's first stage `k1 = f(t, x)`. Performs exactly 6 RHS evaluations.
///
/// Per element, every combination accumulates as
/// `x[i] + (h*a_0)*k_0[i] + (h*a_1)*k_1[i] + ...` in stage order; the taped
/// replay in `nodelayer` matches this order term for term.
pub fn dopri5_step<F>(f: &mut F, t: f64, x: &[f64], h: f64, k1: &[f64]) -> Result<StepOutput>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let d = x.len();
    let mut stages: Vec<Vec<f64>> = Vec::with_capacity(7);
    stages.push(k1.to_vec());
    let mut xt = vec![0.0; d];

    // Stages 2..=6 (indices 1..=5).
    for s in 1..6 {
        for i in 0..d {
            let mut acc = x[i];
            for (j, k) in stages.iter().enumerate() {
                acc += (h * tableau::A[s][j]) * k[i];
            }
            xt[i] = acc;
        }
        let mut k = vec![0.0; d];
        f(t + tableau::C[s] * h, &xt, &mut k)?;
        ensure_finite(&k, t + tableau::C[s] * h)?;
        stages.push(k);
    }

    // Fifth-order candidate; B5 has a zero in slot 6, so six stages suffice.
    let mut x_new = vec![0.0; d];
    for i in 0..d {
        let mut acc = x[i];
        for (j, k) in stages.iter().enumerate() {
            acc += (h * tableau::B5[j]) * k[i];
        }
        x_new[i] = acc;
    }
    ensure_finite(&x_new, t + h)?;

    // Seventh stage, evaluated at the candidate: used by the error estimate
    // and recycled as the next step's first stage.
    let mut k7 = vec![0.0; d];
    f(t + h, &x_new, &mut k7)?;
    ensure_finite(&k7, t + h)?;
    stages.push(k7);

    let mut err = vec![0.0; d];
    for i in 0..d {
        let mut acc = 0.0;
        for (j, k) in stages.iter().enumerate() {
            acc += (h * tableau::E[j]) * k[i];
        }
        err[i] = acc;
    }

    Ok(StepOutput { x_new, err, stages })
}

/// Weighted RMS of the error vector: each component is scaled by
/// `1 / (atol + rtol * max(|x_old_i|, |x_new_i|))`, and acceptance means the
/// result is at most 1.
pub fn error_norm(err: &[f64], x_old: &[f64], x_new: &[f64], cfg: &SolverConfig) -> f64 {
    if err.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..err.len() {
        let sk = cfg.atol + cfg.rtol * x_old[i].abs().max(x_new[i].abs());
        let r = err[i] / sk;
        acc += r * r;
    }
    (acc / err.len() as f64).sqrt()
}

/// Next signed step size given the current one and the step's error norm:
/// `h * clamp(safety * err_norm^(-1/5), 0.2, 5.0)`, with the magnitude then
/// clamped into `[h_min, h_max]`. An exactly-zero error norm grows by the
/// maximum factor.
pub fn step_control(h: f64, err_norm: f64, cfg: &SolverConfig) -> f64 {
    let factor = if err_norm == 0.0 {
        MAX_GROWTH
    } else {
        (cfg.safety * err_norm.powf(-0.2)).clamp(MAX_SHRINK, MAX_GROWTH)
    };
    let magnitude = (h.abs() * factor).clamp(cfg.h_min, cfg.h_max);
    magnitude.copysign(h)
}

fn ensure_finite(x: &[f64], _t: f64) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite("ode right-hand side"))
    }
}

// ── Full integrations ────────────────────────────────────────────────────

/// Integrate `x' = f(t, x)` from `t0` to `t1` (either direction) and return
/// the final state. See [`integrate_traced`] for the accepted-step history.
pub fn integrate<F>(f: &mut F, x0: &[f64], t0: f64, t1: f64, cfg: &SolverConfig) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let (solution, _, _) = run(f, x0, t0, t1, cfg, false, false)?;
    Ok(solution)
}

/// Like [`integrate`], also recording every accepted step.
pub fn integrate_traced<F>(
    f: &mut F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Solution, Trajectory)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let (solution, traj, _) = run(f, x0, t0, t1, cfg, true, false)?;
    Ok((solution, traj.expect("trajectory requested")))
}

/// The exact `(t, h)` of one accepted step: starting time and the signed
/// step actually taken (for the last step, exactly `t1 - t`).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepRecord {
    pub t: f64,
    pub h: f64,
}

/// Like [`integrate`], also returning the accepted step sequence with the
/// exact step sizes used. Re-running those steps with the same field
/// reproduces the solution bit for bit, which is what lets a recording
/// replay of the solve double as its gradient graph.
pub fn integrate_recorded<F>(
    f: &mut F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Solution, Vec<StepRecord>)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    let (solution, _, steps) = run(f, x0, t0, t1, cfg, false, true)?;
    Ok((solution, steps))
}

fn run<F>(
    f: &mut F,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
    trace: bool,
    record_steps: bool,
) -> Result<(Solution, Option<Trajectory>, Vec<StepRecord>)>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    cfg.validate()?;
    ensure_finite(x0, t0).map_err(|_| Error::NonFinite("initial state"))?;
    let started = Instant::now();
    let mut traj = trace.then(|| Trajectory {
        times: vec![t0],
        states: vec![x0.to_vec()],
    });

    let mut steps_taken: Vec<StepRecord> = Vec::new();
    let mut stats = SolveStats::default();
    if t0 == t1 {
        // Degenerate interval: nothing to integrate, no RHS evaluations.
        stats.elapsed = started.elapsed().as_secs_f64();
        return Ok((Solution { state: x0.to_vec(), stats }, traj, steps_taken));
    }

    let span = t1 - t0;
    let dir = span.signum();
    let mut h = cfg.h_init.unwrap_or(1e-2 * span.abs());
    h = h.clamp(cfg.h_min, cfg.h_max) * dir;

    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; x.len()];
    f(t, &x, &mut k1)?;
    ensure_finite(&k1, t)?;
    stats.nfe = 1;

    loop {
        if (t1 - t) * dir <= 0.0 {
            break;
        }
        if stats.steps_accepted + stats.steps_rejected >= cfg.max_steps {
            return Err(Error::StepLimit { max_steps: cfg.max_steps, t });
        }
        // Never overshoot the endpoint; the final step lands on t1 exactly.
        let mut final_step = false;
        if (t + h - t1) * dir >= 0.0 {
            h = t1 - t;
            final_step = true;
        }

        let step = dopri5_step(f, t, &x, h, &k1)?;
        stats.nfe += 6;
        let err_norm = error_norm(&step.err, &x, &step.x_new, cfg);

        if err_norm <= 1.0 {
            stats.steps_accepted += 1;
            if record_steps {
                steps_taken.push(StepRecord { t, h });
            }
            t = if final_step { t1 } else { t + h };
            x = step.x_new;
            // First-same-as-last: the seventh stage is f at (t, x).
            k1 = step.stages.into_iter().next_back().expect("seven stages");
            if let Some(traj) = traj.as_mut() {
                traj.times.push(t);
                traj.states.push(x.clone());
            }
            h = step_control(h, err_norm, cfg);
        } else {
            stats.steps_rejected += 1;
            if h.abs() <= cfg.h_min * (1.0 + 1e-12) {
                return Err(Error::StepUnderflow { t, h: h.abs(), h_min: cfg.h_min });
            }
            h = step_control(h, err_norm, cfg);
        }
    }

    stats.elapsed = started.elapsed().as_secs_f64();
    Ok((Solution { state: x, stats }, traj, steps_taken))
}

/// Fixed-step integration: `n` equal Dormand–Prince steps, no error control.
/// Exists for convergence-order diagnostics; prefer [`integrate`] otherwise.
pub fn integrate_fixed<F>(f: &mut F, x0: &[f64], t0: f64, t1: f64, n: usize) -> Result<Solution>
where
    F: FnMut(f64, &[f64], &mut [f64]) -> Result<()>,
{
    if n == 0 {
        return Err(Error::config("fixed-step integration needs at least one step"));
    }
    let started = Instant::now();
    let h = (t1 - t0) / n as f64;
    let mut stats = SolveStats::default();
    let mut t = t0;
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; x.len()];
    f(t, &x, &mut k1)?;
    ensure_finite(&k1, t)?;
    stats.nfe = 1;
    for step_idx in 0..n {
        let step = dopri5_step(f, t, &x, h, &k1)?;
        stats.nfe += 6;
        stats.steps_accepted += 1;
        t = if step_idx + 1 == n { t1 } else { t0 + h * (step_idx + 1) as f64 };
        x = step.x_new;
        k1 = step.stages.into_iter().next_back().expect("seven stages");
    }
    stats.elapsed = started.elapsed().as_secs_f64();
    Ok(Solution { state: x, stats })
}

// ── Tests ────────────────────────────────────────────────────────────────
