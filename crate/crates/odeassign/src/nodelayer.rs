//! The neural ODE layer: a learned vector field `f(x, t)` (an MLP over the
//! concatenation of state and time), forward integration through the
//! adaptive solver, and two interchangeable gradient paths.
//!
//! * **Discretize** (backprop through the solver): run the solve untaped,
//!   record the accepted `(t, h)` sequence, then replay exactly those steps
//!   with recording ops. The replay reproduces the forward values bit for
//!   bit, so its reverse sweep is the exact gradient of the discrete
//!   computation. Default for training.
//! * **Adjoint**: integrate the augmented system `(x, a, g)` backward in
//!   time with `da/dt = -aᵀ ∂f/∂x` and `dg/dt = -aᵀ ∂f/∂θ`, one small
//!   scoped tape per right-hand-side evaluation. Constant memory in the
//!   step count, accuracy governed by the solver tolerance.
//!
//! The two paths agree to solver tolerance; the test suite pins this with
//! finite differences as a third referee.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_core::RngCore;
use serde::{Deserialize, Serialize};

use crate::odesolve::{self, tableau, SolveStats, SolverConfig};
use crate::tensor::{self, Activation, CustomVjp, ParamSet, Tensor};
use crate::{Error, Result};

// ── Gradient path selection ──────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GradMode {
    /// Exact reverse-mode through the recorded solver steps.
    Discretize,
    /// Continuous adjoint system integrated backward in time.
    Adjoint,
}

impl FromStr for GradMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<GradMode> {
        match s {
            "discretize" => Ok(GradMode::Discretize),
            "adjoint" => Ok(GradMode::Adjoint),
            other => Err(Error::parse(
                "grad mode",
                format!("expected 'discretize' or 'adjoint', got '{other}'"),
            )),
        }
    }
}

impl fmt::Display for GradMode {
    fn fmt(&self, f: &mut fmt::Formatter) -> fmt::Result {
        f.write_str(match self {
            GradMode::Discretize => "discretize",
            GradMode::Adjoint => "adjoint",
        })
    }
}

// ── Field definition ─────────────────────────────────────────────────────

/// Architecture of one vector field: an MLP mapping `concat(x, t)` (length
/// `state_dim + 1`) back to `state_dim` values.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OdeFuncCfg {
    pub state_dim: usize,
    /// Hidden layer widths; empty means a single linear map.
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_hidden() -> Vec<usize> {
    vec![64, 64]
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl OdeFuncCfg {
    pub fn new(state_dim: usize) -> OdeFuncCfg {
        OdeFuncCfg { state_dim, hidden: default_hidden(), activation: default_activation() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.state_dim == 0 {
            return Err(Error::config("state_dim must be at least 1"));
        }
        if self.hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("hidden widths must be at least 1"));
        }
        Ok(())
    }

    /// `(rows, cols)` of each layer's weight matrix, input to output.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut n = self.state_dim + 1;
        for &m in &self.hidden {
            dims.push((m, n));
            n = m;
        }
        dims.push((self.state_dim, n));
        dims
    }
}

/// A vector field whose parameters live in a shared [`ParamSet`] under
/// `{prefix}.w{i}` / `{prefix}.b{i}` names, so several fields and their
/// surrounding model coexist in one flat, serializable parameter space.
#[derive(Clone, Debug)]
pub struct OdeFunc {
    cfg: OdeFuncCfg,
    prefix: String,
}

/// Uniform draw in [0, 1) built from the top 53 bits of one `next_u64`, so
/// the value is identical on every platform for a given generator stream.
fn unit(rng: &mut impl RngCore) -> f64 {
    (rng.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
}

/// Row-major weight matrix drawn uniformly from ±√(6/(rows+cols)).
pub fn xavier_uniform(rng: &mut impl RngCore, rows: usize, cols: usize) -> Vec<f64> {
    let scale = (6.0 / (rows + cols) as f64).sqrt();
    (0..rows * cols).map(|_| (2.0 * unit(rng) - 1.0) * scale).collect()
}

impl OdeFunc {
    /// Create a field and insert its parameters. Hidden layers get scaled
    /// uniform weights; the output layer starts at exactly zero, so the
    /// untrained field is the zero field (the layer is an identity flow)
    /// while gradients still reach every layer.
    pub fn init(
        cfg: OdeFuncCfg,
        prefix: &str,
        rng: &mut impl RngCore,
        params: &mut ParamSet,
    ) -> Result<OdeFunc> {
        OdeFunc::init_scaled(cfg, prefix, rng, params, 0.0)
    }

    /// Like [`OdeFunc::init`] but with the output layer drawn at
    /// `output_scale` times the usual width — a deliberately non-zero field
    /// for gradient-path comparisons and stress tests.
    pub fn init_scaled(
        cfg: OdeFuncCfg,
        prefix: &str,
        rng: &mut impl RngCore,
        params: &mut ParamSet,
        output_scale: f64,
    ) -> Result<OdeFunc> {
        cfg.validate()?;
        let dims = cfg.layer_dims();
        let last = dims.len() - 1;
        for (i, &(m, n)) in dims.iter().enumerate() {
            let w = if i == last {
                xavier_uniform(rng, m, n).iter().map(|v| v * output_scale).collect()
            } else {
                xavier_uniform(rng, m, n)
            };
            params.insert(&format!("{prefix}.w{i}"), Tensor::from_vec(vec![m, n], w)?)?;
            params.insert(&format!("{prefix}.b{i}"), Tensor::from_vec(vec![m], vec![0.0; m])?)?;
        }
        Ok(OdeFunc { cfg, prefix: prefix.to_string() })
    }

    /// Bind to parameters that already exist (e.g. after loading a
    /// checkpoint), verifying every layer is present with the right shape.
    pub fn attach(cfg: OdeFuncCfg, prefix: &str, params: &ParamSet) -> Result<OdeFunc> {
        cfg.validate()?;
        for (i, &(m, n)) in cfg.layer_dims().iter().enumerate() {
            let w = params.get(&format!("{prefix}.w{i}"))?;
            if w.shape() != [m, n] {
                return Err(Error::config(format!(
                    "{prefix}.w{i} has shape {:?}, expected [{m}, {n}]",
                    w.shape()
                )));
            }
            let b = params.get(&format!("{prefix}.b{i}"))?;
            if b.shape() != [m] {
                return Err(Error::config(format!(
                    "{prefix}.b{i} has shape {:?}, expected [{m}]",
                    b.shape()
                )));
            }
        }
        Ok(OdeFunc { cfg, prefix: prefix.to_string() })
    }

    pub fn cfg(&self) -> &OdeFuncCfg {
        &self.cfg
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for i in 0..self.cfg.layer_dims().len() {
            names.push(format!("{}.w{i}", self.prefix));
            names.push(format!("{}.b{i}", self.prefix));
        }
        names
    }

    /// Clones of this field's entries (tape attachments included), as their
    /// own set.
    pub fn subset(&self, params: &ParamSet) -> Result<ParamSet> {
        let mut sub = ParamSet::new();
        for name in self.param_names() {
            sub.insert(&name, params.get(&name)?.clone())?;
        }
        Ok(sub)
    }

    /// `(name, element count)` in the canonical (lexicographic) order used
    /// everywhere a flat parameter vector appears.
    pub fn param_layout(&self, params: &ParamSet) -> Result<Vec<(String, usize)>> {
        let sub = self.subset(params)?;
        Ok(sub.iter().map(|(name, t)| (name.to_string(), t.numel())).collect())
    }

    /// Zero every parameter of this field, turning the layer into an
    /// identity flow. Used by the ablation that removes one ODE layer from
    /// a trained model.
    pub fn zero_params(&self, params: &mut ParamSet) -> Result<()> {
        for name in self.param_names() {
            let len = params.get(&name)?.numel();
            params.set_data(&name, &vec![0.0; len])?;
        }
        Ok(())
    }

    /// `f(x, t)` through recording ops: taped exactly when a tape is active
    /// and the inputs are tracked.
    pub fn eval(&self, params: &ParamSet, x: &Tensor, t: f64) -> Result<Tensor> {
        if x.shape() != [self.cfg.state_dim] {
            return Err(Error::Shape {
                op: "odefunc eval",
                detail: format!("state shape {:?}, field expects [{}]", x.shape(), self.cfg.state_dim),
            });
        }
        let t_in = Tensor::scalar(t);
        let mut z = tensor::concat(&[x, &t_in])?;
        let last = self.cfg.layer_dims().len() - 1;
        for i in 0..=last {
            let w = params.get(&format!("{}.w{i}", self.prefix))?;
            let b = params.get(&format!("{}.b{i}", self.prefix))?;
            z = tensor::linear(w, b, &z)?;
            if i < last {
                z = tensor::activation(self.cfg.activation, &z)?;
            }
        }
        Ok(z)
    }

    /// A reusable plain-float evaluator over the current parameter values.
    /// Produces bit-identical outputs to [`OdeFunc::eval`] (same kernels,
    /// same accumulation order) without any recording overhead — this is
    /// what the solver loop calls.
    pub fn evaluator<'a>(&self, params: &'a ParamSet) -> Result<FieldEval<'a>> {
        let dims = self.cfg.layer_dims();
        let mut layers = Vec::with_capacity(dims.len());
        for (i, &(m, n)) in dims.iter().enumerate() {
            let w = params.get(&format!("{}.w{i}", self.prefix))?;
            if w.shape() != [m, n] {
                return Err(Error::Shape {
                    op: "field evaluator",
                    detail: format!("{}.w{i} shape {:?}, expected [{m}, {n}]", self.prefix, w.shape()),
                });
            }
            let b = params.get(&format!("{}.b{i}", self.prefix))?;
            if b.shape() != [m] {
                return Err(Error::Shape {
                    op: "field evaluator",
                    detail: format!("{}.b{i} shape {:?}, expected [{m}]", self.prefix, b.shape()),
                });
            }
            layers.push(PlainLayer { w: w.data(), b: b.data(), m, n });
        }
        let width = dims.iter().map(|&(m, _)| m).max().unwrap_or(0).max(self.cfg.state_dim + 1);
        Ok(FieldEval {
            layers,
            activation: self.cfg.activation,
            state_dim: self.cfg.state_dim,
            buf_in: vec![0.0; width],
            buf_out: vec![0.0; width],
        })
    }
}

struct PlainLayer<'a> {
    w: &'a [f64],
    b: &'a [f64],
    m: usize,
    n: usize,
}

/// Plain-float twin of the recorded forward pass; see
/// [`OdeFunc::evaluator`].
pub struct FieldEval<'a> {
    layers: Vec<PlainLayer<'a>>,
    activation: Activation,
    state_dim: usize,
    buf_in: Vec<f64>,
    buf_out: Vec<f64>,
}

impl FieldEval<'_> {
    pub fn eval(&mut self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        if x.len() != self.state_dim || out.len() != self.state_dim {
            return Err(Error::Shape {
                op: "field eval",
                detail: format!(
                    "state {} / output {} values, field expects {}",
                    x.len(),
                    out.len(),
                    self.state_dim
                ),
            });
        }
        self.buf_in[..x.len()].copy_from_slice(x);
        self.buf_in[x.len()] = t;
        let mut len = x.len() + 1;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            debug_assert_eq!(layer.n, len);
            let target: &mut [f64] =
                if i == last { out } else { &mut self.buf_out[..layer.m] };
            for r in 0..layer.m {
                let row = &layer.w[r * layer.n..(r + 1) * layer.n];
                let mut acc = layer.b[r];
                for (wj, zj) in row.iter().zip(&self.buf_in[..layer.n]) {
                    acc += wj * zj;
                }
                target[r] = if i < last { self.activation.apply(acc) } else { acc };
            }
            if !target.iter().all(|v| v.is_finite()) {
                return Err(Error::NonFinite("field layer output"));
            }
            if i < last {
                self.buf_in[..layer.m].copy_from_slice(&self.buf_out[..layer.m]);
                len = layer.m;
            }
        }
        Ok(())
    }
}

// ── Forward integration ──────────────────────────────────────────────────

/// Integrate `x' = f(x, t)` from `t0` to `t1` without recording.
pub fn node_forward_span(
    func: &OdeFunc,
    params: &ParamSet,
    x0: &[f64],
    t0: f64,
    t1: f64,
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    let mut fe = func.evaluator(params)?;
    let mut f = |t: f64, x: &[f64], dx: &mut [f64]| fe.eval(t, x, dx);
    let sol = odesolve::integrate(&mut f, x0, t0, t1, cfg)?;
    Ok((sol.state, sol.stats))
}

/// Layer output at the configured horizon: `x(t_end)` from `x(0) = x0`.
pub fn node_forward(
    func: &OdeFunc,
    params: &ParamSet,
    x0: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, SolveStats)> {
    node_forward_span(func, params, x0, 0.0, cfg.t_end, cfg)
}

/// Forward pass that leaves a differentiable node on the active tape.
///
/// `Discretize` replays the accepted solver steps with recording ops; the
/// replayed output is bit-identical to [`node_forward`] and its reverse
/// sweep is the exact gradient of the discrete solve. `Adjoint` records a
/// single opaque node whose backward pass integrates the adjoint system.
/// Outside a tape both modes reduce to the plain forward solve.
pub fn node_forward_on_tape(
    func: &OdeFunc,
    params: &ParamSet,
    x0: &Tensor,
    cfg: &SolverConfig,
    mode: GradMode,
) -> Result<(Tensor, SolveStats)> {
    if x0.shape() != [func.cfg.state_dim] {
        return Err(Error::Shape {
            op: "node forward",
            detail: format!("x0 shape {:?}, field expects [{}]", x0.shape(), func.cfg.state_dim),
        });
    }
    match mode {
        GradMode::Discretize => {
            let (sol, steps) = {
                let mut fe = func.evaluator(params)?;
                let mut f = |t: f64, x: &[f64], dx: &mut [f64]| fe.eval(t, x, dx);
                odesolve::integrate_recorded(&mut f, x0.data(), 0.0, cfg.t_end, cfg)?
            };
            let mut x = x0.clone();
            for rec in &steps {
                let (t, h) = (rec.t, rec.h);
                let mut ks: Vec<Tensor> = vec![func.eval(params, &x, t)?];
                for s in 1..6 {
                    let y = {
                        let mut terms: Vec<(f64, &Tensor)> = vec![(1.0, &x)];
                        for (j, k) in ks.iter().enumerate() {
                            terms.push((h * tableau::A[s][j], k));
                        }
                        tensor::lincomb(&terms)?
                    };
                    ks.push(func.eval(params, &y, t + tableau::C[s] * h)?);
                }
                x = {
                    let mut terms: Vec<(f64, &Tensor)> = vec![(1.0, &x)];
                    for (j, k) in ks.iter().enumerate() {
                        terms.push((h * tableau::B5[j], k));
                    }
                    tensor::lincomb(&terms)?
                };
            }
            Ok((x, sol.stats))
        }
        GradMode::Adjoint => {
            let (state, stats) = node_forward(func, params, x0.data(), cfg)?;
            let sub = func.subset(params)?;
            let vjp = AdjointVjp {
                func: func.clone(),
                values: sub.detached(),
                x_end: state.clone(),
                cfg: cfg.clone(),
            };
            let out = tensor::custom_block(x0, &sub, state, Box::new(vjp))?;
            Ok((out, stats))
        }
    }
}

// ── Adjoint path ─────────────────────────────────────────────────────────

struct AdjointVjp {
    func: OdeFunc,
    /// Parameter values frozen at forward time.
    values: ParamSet,
    x_end: Vec<f64>,
    cfg: SolverConfig,
}

impl CustomVjp for AdjointVjp {
    fn vjp(&self, upstream: &[f64]) -> Result<(Vec<f64>, BTreeMap<String, Vec<f64>>)> {
        adjoint_sweep(&self.func, &self.values, &self.x_end, upstream, &self.cfg)
    }
}

/// Integrate the augmented system `z = (x, a, g)` from `t_end` back to 0:
///
/// ```text
///   dx/dt = f(x, t)        x(t_end) = x_end
///   da/dt = -aᵀ ∂f/∂x      a(t_end) = dL/dx(t_end)
///   dg/dt = -aᵀ ∂f/∂θ      g(t_end) = 0
/// ```
///
/// Every right-hand-side evaluation runs one scoped tape over the field and
/// reads the vector–Jacobian products from its reverse sweep. Returns
/// `a(0) = dL/dx(0)` and `g(0) = dL/dθ`, signs arranged to match reverse-
/// mode through the solver.
fn adjoint_sweep(
    func: &OdeFunc,
    params: &ParamSet,
    x_end: &[f64],
    dl_dxt: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, BTreeMap<String, Vec<f64>>)> {
    let d = func.cfg.state_dim;
    if x_end.len() != d || dl_dxt.len() != d {
        return Err(Error::Shape {
            op: "adjoint",
            detail: format!("state {} / seed {} values, field expects {d}", x_end.len(), dl_dxt.len()),
        });
    }
    let base = func.subset(params)?.detached();
    let layout = func.param_layout(params)?;
    let p_total: usize = layout.iter().map(|(_, len)| len).sum();

    let mut rhs = |t: f64, z: &[f64], dz: &mut [f64]| -> Result<()> {
        let (built, tape) = tensor::with_tape(|| -> Result<(Tensor, Tensor)> {
            let tracked = base.tracked();
            let xt = Tensor::vector(z[..d].to_vec()).tracked();
            let out = func.eval(&tracked, &xt, t)?;
            Ok((out, xt))
        });
        let (out, xt) = built?;
        let a = &z[d..2 * d];
        let grads = tape.backward_seeded(&[(&out, a)])?;
        dz[..d].copy_from_slice(out.data());
        let gx = grads.input(&xt)?;
        for i in 0..d {
            dz[d + i] = -gx.data()[i];
        }
        let mut off = 2 * d;
        for (name, len) in &layout {
            match grads.param(name) {
                Some(g) => {
                    for i in 0..*len {
                        dz[off + i] = -g.data()[i];
                    }
                }
                None => dz[off..off + len].fill(0.0),
            }
            off += len;
        }
        Ok(())
    };

    let mut z0 = Vec::with_capacity(2 * d + p_total);
    z0.extend_from_slice(x_end);
    z0.extend_from_slice(dl_dxt);
    z0.resize(2 * d + p_total, 0.0);
    let sol = odesolve::integrate(&mut rhs, &z0, cfg.t_end, 0.0, cfg)?;

    let dx0 = sol.state[d..2 * d].to_vec();
    let mut grads = BTreeMap::new();
    let mut off = 2 * d;
    for (name, len) in &layout {
        grads.insert(name.clone(), sol.state[off..off + len].to_vec());
        off += len;
    }
    Ok((dx0, grads))
}

/// Standalone adjoint gradients from a known terminal state: integrates
/// backward from `x(t_end) = x_t_end` and returns `(dL/dx0, dL/dθ)`.
pub fn node_backward_adjoint(
    func: &OdeFunc,
    params: &ParamSet,
    x_t_end: &[f64],
    dl_dxt: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, BTreeMap<String, Vec<f64>>)> {
    adjoint_sweep(func, params, x_t_end, dl_dxt, cfg)
}

/// Standalone backprop-through-solver gradients from the initial state:
/// forward solve, recorded replay, reverse sweep. Exact for the discrete
/// computation; the oracle the adjoint path is tested against.
pub fn node_backward_discretize(
    func: &OdeFunc,
    params: &ParamSet,
    x0: &[f64],
    dl_dxt: &[f64],
    cfg: &SolverConfig,
) -> Result<(Vec<f64>, BTreeMap<String, Vec<f64>>)> {
    let (built, tape) = tensor::with_tape(|| -> Result<(Tensor, Tensor)> {
        let tracked = func.subset(params)?.tracked();
        let x0t = Tensor::vector(x0.to_vec()).tracked();
        let (xt, _) = node_forward_on_tape(func, &tracked, &x0t, cfg, GradMode::Discretize)?;
        Ok((xt, x0t))
    });
    let (xt, x0t) = built?;
    let grads = tape.backward_seeded(&[(&xt, dl_dxt)])?;
    let dx0 = grads.input(&x0t)?.data().to_vec();
    let layout = func.param_layout(params)?;
    let mut map = BTreeMap::new();
    for (name, len) in layout {
        let g = match grads.param(&name) {
            Some(t) => t.data().to_vec(),
            None => vec![0.0; len],
        };
        map.insert(name, g);
    }
    Ok((dx0, map))
}

// ── Tests ────────────────────────────────────────────────────────────────

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::ChaCha8Rng;
    use rand_core::SeedableRng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn small_cfg(d: usize) -> OdeFuncCfg {
        OdeFuncCfg { state_dim: d, hidden: vec![6], activation: Activation::Tanh }
    }

    /// Random field with a non-zero output layer, for gradient checks.
    fn random_field(d: usize, seed: u64) -> (OdeFunc, ParamSet) {
        let mut params = ParamSet::new();
        let func =
            OdeFunc::init_scaled(small_cfg(d), "f", &mut rng(seed), &mut params, 0.5).unwrap();
        (func, params)
    }

    fn tol_cfg(tol: f64, t_end: f64) -> SolverConfig {
        let mut cfg = SolverConfig::default().with_tol(tol, tol);
        cfg.t_end = t_end;
        cfg
    }

    #[test]
    fn freshly_initialized_field_is_zero() {
        let mut params = ParamSet::new();
        let func =
            OdeFunc::init(OdeFuncCfg::new(5), "f", &mut rng(1), &mut params, ).unwrap();
        let out = func.eval(&params, &Tensor::vector(vec![0.3, -2.0, 1.0, 0.0, 7.5]), 0.7).unwrap();
        assert_eq!(out.data(), &[0.0; 5]);
    }

    #[test]
    fn single_linear_layer_reduces_to_matrix_action() {
        // No hidden layers, weight [[−1, 0]]: f([x], t) = −x regardless of t.
        let cfg = OdeFuncCfg { state_dim: 1, hidden: vec![], activation: Activation::Tanh };
        let mut params = ParamSet::new();
        params
            .insert("f.w0", Tensor::from_vec(vec![1, 2], vec![-1.0, 0.0]).unwrap())
            .unwrap();
        params.insert("f.b0", Tensor::from_vec(vec![1], vec![0.0]).unwrap()).unwrap();
        let func = OdeFunc::attach(cfg, "f", &params).unwrap();
        let out = func.eval(&params, &Tensor::vector(vec![0.8]), 123.0).unwrap();
        assert_eq!(out.data(), &[-0.8]);

        // x' = −x from 1: x(1) = e⁻¹ within 10× the tolerance.
        let cfg = tol_cfg(1e-6, 1.0);
        let (x1, _) = node_forward(&func, &params, &[1.0], &cfg).unwrap();
        assert!((x1[0] - (-1.0f64).exp()).abs() <= 1e-5);
    }

    #[test]
    fn eval_matches_a_hand_rolled_mlp() {
        let (func, params) = random_field(3, 7);
        let x = [0.4, -0.9, 0.2];
        let t = 0.65;
        let out = func.eval(&params, &Tensor::vector(x.to_vec()), t).unwrap();

        // Independent forward pass with explicit loops.
        let w0 = params.get("f.w0").unwrap().data();
        let b0 = params.get("f.b0").unwrap().data();
        let w1 = params.get("f.w1").unwrap().data();
        let b1 = params.get("f.b1").unwrap().data();
        let z: Vec<f64> = [x.as_slice(), &[t]].concat();
        let mut hid = vec![0.0; 6];
        for r in 0..6 {
            let mut acc = b0[r];
            for c in 0..4 {
                acc += w0[r * 4 + c] * z[c];
            }
            hid[r] = acc.tanh();
        }
        for r in 0..3 {
            let mut acc = b1[r];
            for c in 0..6 {
                acc += w1[r * 6 + c] * hid[c];
            }
            assert!((out.data()[r] - acc).abs() <= 1e-15, "row {r}");
        }
    }

    #[test]
    fn plain_evaluator_is_bit_identical_to_recorded_eval() {
        let (func, params) = random_field(4, 11);
        let mut fe = func.evaluator(&params).unwrap();
        for trial in 0..20 {
            let x: Vec<f64> =
                (0..4).map(|i| ((trial * 4 + i) as f64 * 0.37).sin()).collect();
            let t = trial as f64 * 0.11;
            let taped = func.eval(&params, &Tensor::vector(x.clone()), t).unwrap();
            let mut plain = vec![0.0; 4];
            fe.eval(t, &x, &mut plain).unwrap();
            for i in 0..4 {
                assert_eq!(taped.data()[i].to_bits(), plain[i].to_bits(), "trial {trial} coord {i}");
            }
        }
    }

    #[test]
    fn zero_field_forward_is_the_identity() {
        let mut params = ParamSet::new();
        let func = OdeFunc::init(OdeFuncCfg::new(3), "f", &mut rng(2), &mut params).unwrap();
        let x0 = [1.5, -0.25, 0.0];
        let (xt, stats) = node_forward(&func, &params, &x0, &tol_cfg(1e-2, 2.5)).unwrap();
        assert_eq!(xt, x0.to_vec());
        assert!(stats.nfe >= 7);
    }

    #[test]
    fn forward_nfe_stays_in_a_sane_band_at_default_tolerance() {
        let (func, params) = random_field(8, 3);
        let cfg = SolverConfig::default(); // atol = rtol = 1e-2, t_end = 1.5
        let (_, stats) = node_forward(&func, &params, &[0.1; 8], &cfg).unwrap();
        assert!(stats.nfe >= 7 && stats.nfe <= 200, "nfe = {}", stats.nfe);
    }

    #[test]
    fn recorded_replay_reproduces_the_forward_solve_bit_for_bit() {
        let (func, params) = random_field(4, 19);
        let cfg = tol_cfg(1e-4, 1.2);
        let x0 = vec![0.3, -0.6, 0.9, 0.05];
        let (plain, plain_stats) = node_forward(&func, &params, &x0, &cfg).unwrap();

        let ((replayed, stats), _tape) = tensor::with_tape(|| {
            let tracked = func.subset(&params).unwrap().tracked();
            let x0t = Tensor::vector(x0.clone()).tracked();
            node_forward_on_tape(&func, &tracked, &x0t, &cfg, GradMode::Discretize).unwrap()
        });
        assert_eq!(stats.nfe, plain_stats.nfe);
        for i in 0..4 {
            assert_eq!(plain[i].to_bits(), replayed.data()[i].to_bits(), "coord {i}");
        }
    }

    #[test]
    fn adjoint_block_value_matches_plain_forward() {
        let (func, params) = random_field(3, 23);
        let cfg = tol_cfg(1e-6, 0.9);
        let x0 = vec![0.2, 0.4, -0.8];
        let (plain, _) = node_forward(&func, &params, &x0, &cfg).unwrap();
        let ((out, _), _tape) = tensor::with_tape(|| {
            let tracked = func.subset(&params).unwrap().tracked();
            let x0t = Tensor::vector(x0.clone()).tracked();
            node_forward_on_tape(&func, &tracked, &x0t, &cfg, GradMode::Adjoint).unwrap()
        });
        assert_eq!(out.data(), plain.as_slice());
    }

    #[test]
    fn zero_seed_gives_zero_gradients_both_paths() {
        let (func, params) = random_field(3, 31);
        let cfg = tol_cfg(1e-8, 0.7);
        let x0 = [0.5, -0.1, 0.3];
        let (xt, _) = node_forward(&func, &params, &x0, &cfg).unwrap();
        let zero = [0.0; 3];
        let (dx0_a, gth_a) = node_backward_adjoint(&func, &params, &xt, &zero, &cfg).unwrap();
        let (dx0_d, gth_d) = node_backward_discretize(&func, &params, &x0, &zero, &cfg).unwrap();
        assert_eq!(dx0_a, vec![0.0; 3]);
        assert_eq!(dx0_d, vec![0.0; 3]);
        for g in gth_a.values().chain(gth_d.values()) {
            assert!(g.iter().all(|v| *v == 0.0));
        }
    }

    #[test]
    fn zero_field_passes_the_loss_seed_through_unchanged() {
        let mut params = ParamSet::new();
        let func = OdeFunc::init(small_cfg(2), "f", &mut rng(5), &mut params).unwrap();
        let cfg = tol_cfg(1e-8, 1.0);
        let x0 = [0.3, -0.7];
        let seed = [0.3, -0.7]; // dL/dxT for L = ½‖xT‖², xT = x0
        let (dx0_d, gd) = node_backward_discretize(&func, &params, &x0, &seed, &cfg).unwrap();
        let (dx0_a, ga) = node_backward_adjoint(&func, &params, &x0, &seed, &cfg).unwrap();
        assert_eq!(dx0_d, seed.to_vec());
        for i in 0..2 {
            assert!((dx0_a[i] - seed[i]).abs() <= 1e-9);
        }
        // Output-layer bias is the only parameter the zero field responds
        // to: dL/db_last = t_end · seed. Hidden weights see zero activity.
        for (name, g) in &gd {
            if name == "f.b1" {
                for i in 0..2 {
                    assert!((g[i] - 1.0 * seed[i]).abs() <= 1e-9, "{name}[{i}] = {}", g[i]);
                }
            } else if name != "f.w1" {
                assert!(g.iter().all(|v| v.abs() <= 1e-12), "{name} should be silent");
            }
        }
        for i in 0..2 {
            assert!((ga["f.b1"][i] - 1.0 * seed[i]).abs() <= 1e-6);
        }
    }

    #[test]
    fn scalar_linear_field_matches_the_exponential_closed_form() {
        // f = θx with θ = 0.8: x(T) = x0·e^(θT), dx(T)/dθ = x0·T·e^(θT).
        let cfg_arch = OdeFuncCfg { state_dim: 1, hidden: vec![], activation: Activation::Tanh };
        let mut params = ParamSet::new();
        let theta = 0.8;
        params.insert("f.w0", Tensor::from_vec(vec![1, 2], vec![theta, 0.0]).unwrap()).unwrap();
        params.insert("f.b0", Tensor::from_vec(vec![1], vec![0.0]).unwrap()).unwrap();
        let func = OdeFunc::attach(cfg_arch, "f", &params).unwrap();
        let cfg = tol_cfg(1e-10, 1.0);
        let x0 = [1.3];
        let (dx0, gth) = node_backward_discretize(&func, &params, &x0, &[1.0], &cfg).unwrap();
        let expect_dtheta = x0[0] * 1.0 * (theta * 1.0f64).exp();
        let expect_dx0 = (theta * 1.0f64).exp();
        assert!((gth["f.w0"][0] - expect_dtheta).abs() <= 1e-5, "got {}", gth["f.w0"][0]);
        assert!((dx0[0] - expect_dx0).abs() <= 1e-5);
    }

    #[test]
    fn gradient_paths_scale_linearly_in_the_seed() {
        let (func, params) = random_field(3, 41);
        let cfg = tol_cfg(1e-8, 0.6);
        let x0 = [0.2, -0.5, 0.9];
        let seed = [0.7, -1.1, 0.4];
        let twice: Vec<f64> = seed.iter().map(|v| 2.0 * v).collect();
        let (xt, _) = node_forward(&func, &params, &x0, &cfg).unwrap();

        let (dx1, g1) = node_backward_adjoint(&func, &params, &xt, &seed, &cfg).unwrap();
        let (dx2, g2) = node_backward_adjoint(&func, &params, &xt, &twice, &cfg).unwrap();
        for i in 0..3 {
            assert!((dx2[i] - 2.0 * dx1[i]).abs() <= 1e-7 * dx1[i].abs().max(1.0));
        }
        for (name, g) in &g1 {
            for (a, b) in g.iter().zip(&g2[name]) {
                assert!((b - 2.0 * a).abs() <= 1e-7 * a.abs().max(1.0));
            }
        }

        let (dx1, g1) = node_backward_discretize(&func, &params, &x0, &seed, &cfg).unwrap();
        let (dx2, g2) = node_backward_discretize(&func, &params, &x0, &twice, &cfg).unwrap();
        for i in 0..3 {
            assert!((dx2[i] - 2.0 * dx1[i]).abs() <= 1e-12 * dx1[i].abs().max(1.0));
        }
        for (name, g) in &g1 {
            for (a, b) in g.iter().zip(&g2[name]) {
                assert!((b - 2.0 * a).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }

    #[test]
    fn adjoint_agrees_with_discretize_on_random_instances() {
        for seed in [101, 102, 103] {
            let (func, params) = random_field(4, seed);
            let cfg = tol_cfg(1e-8, 0.8);
            let x0: Vec<f64> = (0..4).map(|i| ((seed + i as u64) as f64 * 0.31).sin()).collect();
            let dl: Vec<f64> = (0..4).map(|i| ((seed + i as u64) as f64 * 0.17).cos()).collect();
            let (xt, _) = node_forward(&func, &params, &x0, &cfg).unwrap();
            let (dx_a, g_a) = node_backward_adjoint(&func, &params, &xt, &dl, &cfg).unwrap();
            let (dx_d, g_d) = node_backward_discretize(&func, &params, &x0, &dl, &cfg).unwrap();
            let check = |a: &[f64], b: &[f64], what: &str| {
                for (x, y) in a.iter().zip(b) {
                    let mag = x.abs().max(y.abs());
                    if mag > 1e-6 {
                        assert!((x - y).abs() / mag <= 1e-4, "{what}: {x} vs {y} (seed {seed})");
                    }
                }
            };
            check(&dx_a, &dx_d, "dx0");
            for (name, g) in &g_a {
                check(g, &g_d[name], name);
            }
        }
    }

    #[test]
    fn discretize_matches_finite_differences_through_the_full_solve() {
        let (func, params) = random_field(3, 55);
        let cfg = tol_cfg(1e-9, 0.7);
        let x0 = vec![0.4, -0.2, 0.6];
        // L = c·x(T): seed is c, FD perturbs every parameter.
        let c = [0.9, -0.4, 0.7];
        let (_, grads) = node_backward_discretize(&func, &params, &x0, &c, &cfg).unwrap();

        let loss_at = |p: &ParamSet| -> f64 {
            let (xt, _) = node_forward(&func, p, &x0, &cfg).unwrap();
            xt.iter().zip(&c).map(|(x, ci)| x * ci).sum()
        };
        let step = 1e-5;
        for name in func.param_names() {
            let base = params.get(&name).unwrap().data().to_vec();
            for i in 0..base.len() {
                let mut plus = params.clone();
                let mut minus = params.clone();
                let mut v = base.clone();
                v[i] += step;
                plus.set_data(&name, &v).unwrap();
                v[i] = base[i] - step;
                minus.set_data(&name, &v).unwrap();
                let fd = (loss_at(&plus) - loss_at(&minus)) / (2.0 * step);
                let g = grads[&name][i];
                let mag = fd.abs().max(g.abs());
                if mag > 1e-6 {
                    assert!((fd - g).abs() / mag <= 1e-4, "{name}[{i}]: fd {fd} vs grad {g}");
                }
            }
        }
    }

    #[test]
    fn attach_rejects_missing_or_misshapen_parameters() {
        let mut params = ParamSet::new();
        let _ = OdeFunc::init(small_cfg(3), "f", &mut rng(9), &mut params).unwrap();
        assert!(OdeFunc::attach(small_cfg(3), "g", &params).is_err(), "wrong prefix");
        assert!(OdeFunc::attach(small_cfg(4), "f", &params).is_err(), "wrong state dim");
        assert!(OdeFunc::attach(small_cfg(3), "f", &params).is_ok());
    }

    #[test]
    fn zero_params_silences_a_trained_field() {
        let (func, mut params) = random_field(3, 77);
        let x = Tensor::vector(vec![0.5, 0.5, 0.5]);
        assert!(func.eval(&params, &x, 0.3).unwrap().data().iter().any(|v| *v != 0.0));
        func.zero_params(&mut params).unwrap();
        assert_eq!(func.eval(&params, &x, 0.3).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn grad_mode_round_trips_through_strings() {
        assert_eq!("discretize".parse::<GradMode>().unwrap(), GradMode::Discretize);
        assert_eq!("adjoint".parse::<GradMode>().unwrap(), GradMode::Adjoint);
        assert!("midpoint".parse::<GradMode>().is_err());
        assert_eq!(GradMode::Adjoint.to_string(), "adjoint");
    }
}
