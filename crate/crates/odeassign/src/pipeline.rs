//! Two-stage assignment model built around continuous-time state refinement.
//!
//! Objects and object pairs each get a small feedforward encoder whose output
//! is treated as the initial condition of a learned vector field; the solver
//! integrates that field for a fixed horizon and a linear readout turns the
//! final state into label logits. The object branch runs one trajectory per
//! object from its detector evidence (feature, box, scaled score row). The
//! predicate branch runs one trajectory per ordered pair from a fused
//! visual/semantic input, where the semantic half embeds the object labels
//! currently believed — annotated labels during training and under
//! `predcls`, the object branch's own argmax under `sgcls`.
//!
//! Training imitates the exact pairwise solver: cross-entropy targets are the
//! stored oracle assignments, not the annotation labels, so the model learns
//! the contextual flips that distinguish joint from greedy decoding. All
//! randomness (init, epoch shuffles) derives from counter-based generators
//! keyed by the seed, and optimizer updates walk parameters in sorted name
//! order, which makes whole training runs reproduce bit-for-bit; resuming
//! from a checkpoint only needs the epoch index because each epoch's shuffle
//! lives on its own stream.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ilp::{recall_topk, GtPair, ScoredPrediction};
use crate::nodelayer::{
    node_forward, node_forward_on_tape, node_forward_span, xavier_uniform, GradMode, OdeFunc,
    OdeFuncCfg,
};
use crate::odesolve::SolverConfig;
use crate::taskgen::{greedy_labels, Dataset, SyntheticScene, TaskConfig};
use crate::tensor::{
    activation, concat, lincomb, linear, row_select, softmax, softmax_cross_entropy, with_tape,
    Activation, Gradients, ParamSet, Tensor,
};

/// Detector score rows are log-likelihoods on a roughly ±40 scale; this
/// brings them onto the O(1) range of the other encoder inputs.
pub const ALPHA_SCALE: f64 = 0.1;

/// Self-weight of the one-hop mixing matrix used by the graph preprocessor;
/// the remaining mass is split evenly over the other pairs in the scene.
pub const GCNN_SELF_WEIGHT: f64 = 0.8;

/// Default evaluation horizons for [`sweep_tend`], bracketing the training
/// horizon from well short of it to twice past it.
pub const SWEEP_GRID: [f64; 8] = [0.05, 0.25, 0.5, 1.0, 1.5, 2.0, 2.5, 3.0];

/// Recall cutoffs reported by [`evaluate`].
pub const RECALL_CUTOFFS: [usize; 3] = [20, 50, 100];

/// How the pair branch fuses visual and semantic evidence into an initial
/// pair state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preproc {
    /// Two independent linear maps, one per modality, concatenated.
    Fc,
    /// One linear map applied after averaging each pair's input with every
    /// other pair in the scene (fixed row-stochastic mixing).
    Gcnn,
}

impl fmt::Display for Preproc {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Preproc::Fc => "fc",
            Preproc::Gcnn => "gcnn",
        })
    }
}

impl FromStr for Preproc {
    type Err = Error;

    fn from_str(s: &str) -> Result<Preproc> {
        match s {
            "fc" => Ok(Preproc::Fc),
            "gcnn" => Ok(Preproc::Gcnn),
            other => Err(Error::parse(
                "preproc",
                format!("expected fc or gcnn, got {other:?}"),
            )),
        }
    }
}

/// Which labels the evaluation conditions on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Setting {
    /// Object labels are given; only predicates are predicted. The object
    /// branch never runs, so the report is invariant to its parameters.
    Predcls,
    /// Object labels come from the object branch; pair scores multiply in
    /// the endpoint label confidences.
    Sgcls,
}

impl fmt::Display for Setting {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Setting::Predcls => "predcls",
            Setting::Sgcls => "sgcls",
        })
    }
}

impl FromStr for Setting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Setting> {
        match s {
            "predcls" => Ok(Setting::Predcls),
            "sgcls" => Ok(Setting::Sgcls),
            other => Err(Error::parse(
                "setting",
                format!("expected predcls or sgcls, got {other:?}"),
            )),
        }
    }
}

/// Layer widths. The defaults are sized for a single CPU core: one hidden
/// layer in each vector field and sub-50 state widths keep a full training
/// run in the minutes range without visibly hurting assignment quality.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelDims {
    /// Object trajectory width.
    pub obj_state: usize,
    /// Pair trajectory width. With the `fc` preprocessor this must equal
    /// `2 * preproc_width` because the two modality maps are concatenated.
    pub pair_state: usize,
    /// Label embedding width for the semantic half of pair inputs.
    pub embed_dim: usize,
    /// Hidden width of the predicate readout.
    pub pred_hidden: usize,
    /// Output width of each modality map in the `fc` preprocessor.
    pub preproc_width: usize,
    /// Hidden widths of both vector fields.
    pub ode_hidden: Vec<usize>,
}

impl Default for ModelDims {
    fn default() -> ModelDims {
        ModelDims {
            obj_state: 48,
            pair_state: 48,
            embed_dim: 8,
            pred_hidden: 32,
            preproc_width: 24,
            ode_hidden: vec![48],
        }
    }
}

impl ModelDims {
    pub fn validate(&self, preproc: Preproc) -> Result<()> {
        let positive = [
            ("obj_state", self.obj_state),
            ("pair_state", self.pair_state),
            ("embed_dim", self.embed_dim),
            ("pred_hidden", self.pred_hidden),
            ("preproc_width", self.preproc_width),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::config(format!("dims.{name} must be at least 1")));
            }
        }
        if self.ode_hidden.iter().any(|&h| h == 0) {
            return Err(Error::config("dims.ode_hidden widths must be at least 1"));
        }
        if preproc == Preproc::Fc && self.pair_state != 2 * self.preproc_width {
            return Err(Error::config(format!(
                "fc preprocessor concatenates two width-{} maps, so pair_state must be {}, not {}",
                self.preproc_width,
                2 * self.preproc_width,
                self.pair_state
            )));
        }
        Ok(())
    }
}

/// Everything needed to rebuild a model's structure without its weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub n_obj_labels: usize,
    pub n_pred_labels: usize,
    pub feat_dim: usize,
    pub preproc: Preproc,
    pub dims: ModelDims,
}

impl ModelMeta {
    pub fn for_task(task: &TaskConfig, preproc: Preproc, dims: ModelDims) -> ModelMeta {
        ModelMeta {
            n_obj_labels: task.n_obj_labels,
            n_pred_labels: task.n_pred_labels,
            feat_dim: task.feat_dim,
            preproc,
            dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_obj_labels < 2 || self.n_pred_labels < 2 {
            return Err(Error::config("model needs at least two labels per head"));
        }
        if self.feat_dim == 0 {
            return Err(Error::config("feat_dim must be at least 1"));
        }
        self.dims.validate(self.preproc)
    }

    /// Feature, box, and scaled score row, concatenated.
    pub fn obj_input_dim(&self) -> usize {
        self.feat_dim + 4 + self.n_obj_labels
    }

    /// Both endpoint features plus eight relative-geometry values.
    pub fn visual_dim(&self) -> usize {
        2 * self.feat_dim + 8
    }

    pub fn semantic_dim(&self) -> usize {
        2 * self.dims.embed_dim
    }

    fn ode_cfg(&self, state_dim: usize) -> OdeFuncCfg {
        let mut cfg = OdeFuncCfg::new(state_dim);
        cfg.hidden = self.dims.ode_hidden.clone();
        cfg.activation = Activation::Tanh;
        cfg
    }
}

/// A model: flat parameter store plus the two vector-field handles that
/// know their slice of it.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub meta: ModelMeta,
    pub params: ParamSet,
    pub o_ode: OdeFunc,
    pub p_ode: OdeFunc,
}

fn insert_linear(
    params: &mut ParamSet,
    rng: &mut ChaCha8Rng,
    w_name: &str,
    b_name: &str,
    rows: usize,
    cols: usize,
) -> Result<()> {
    let w = Tensor::from_vec(vec![rows, cols], xavier_uniform(rng, rows, cols))?;
    params.insert(w_name, w)?;
    params.insert(b_name, Tensor::zeros(vec![rows]))
}

fn expect_shape(params: &ParamSet, name: &str, want: &[usize]) -> Result<()> {
    let got = params.get(name)?.shape();
    if got != want {
        return Err(Error::config(format!(
            "parameter {name} has shape {got:?}, expected {want:?}"
        )));
    }
    Ok(())
}

impl ModelParams {
    /// Fresh Xavier-initialized parameters. The insertion order below is
    /// part of the model identity: it fixes how the init generator's stream
    /// is consumed, so reordering it would silently change every seed.
    pub fn init(meta: ModelMeta, seed: u64) -> Result<ModelParams> {
        meta.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamSet::new();
        let d = &meta.dims;

        insert_linear(
            &mut params,
            &mut rng,
            "obj_enc.w",
            "obj_enc.b",
            d.obj_state,
            meta.obj_input_dim(),
        )?;
        let o_ode = OdeFunc::init(meta.ode_cfg(d.obj_state), "o_ode", &mut rng, &mut params)?;
        insert_linear(
            &mut params,
            &mut rng,
            "obj_head.w",
            "obj_head.b",
            meta.n_obj_labels,
            d.obj_state,
        )?;
        params.insert(
            "label_embed",
            Tensor::from_vec(
                vec![meta.n_obj_labels, d.embed_dim],
                xavier_uniform(&mut rng, meta.n_obj_labels, d.embed_dim),
            )?,
        )?;
        match meta.preproc {
            Preproc::Fc => {
                insert_linear(
                    &mut params,
                    &mut rng,
                    "pre_fc.vw",
                    "pre_fc.vb",
                    d.preproc_width,
                    meta.visual_dim(),
                )?;
                insert_linear(
                    &mut params,
                    &mut rng,
                    "pre_fc.sw",
                    "pre_fc.sb",
                    d.preproc_width,
                    meta.semantic_dim(),
                )?;
            }
            Preproc::Gcnn => {
                insert_linear(
                    &mut params,
                    &mut rng,
                    "pre_gcnn.w",
                    "pre_gcnn.b",
                    d.pair_state,
                    meta.visual_dim() + meta.semantic_dim(),
                )?;
            }
        }
        let p_ode = OdeFunc::init(meta.ode_cfg(d.pair_state), "p_ode", &mut rng, &mut params)?;
        insert_linear(
            &mut params,
            &mut rng,
            "pred_head.w0",
            "pred_head.b0",
            d.pred_hidden,
            d.pair_state,
        )?;
        insert_linear(
            &mut params,
            &mut rng,
            "pred_head.w1",
            "pred_head.b1",
            meta.n_pred_labels,
            d.pred_hidden,
        )?;

        Ok(ModelParams {
            o_ode,
            p_ode,
            meta,
            params,
        })
    }

    /// Rebind structure to an existing parameter store (checkpoint load),
    /// validating every shape so a mismatched store fails loudly.
    pub fn attach(meta: ModelMeta, params: ParamSet) -> Result<ModelParams> {
        meta.validate()?;
        let d = &meta.dims;
        expect_shape(&params, "obj_enc.w", &[d.obj_state, meta.obj_input_dim()])?;
        expect_shape(&params, "obj_enc.b", &[d.obj_state])?;
        expect_shape(&params, "obj_head.w", &[meta.n_obj_labels, d.obj_state])?;
        expect_shape(&params, "obj_head.b", &[meta.n_obj_labels])?;
        expect_shape(&params, "label_embed", &[meta.n_obj_labels, d.embed_dim])?;
        match meta.preproc {
            Preproc::Fc => {
                expect_shape(&params, "pre_fc.vw", &[d.preproc_width, meta.visual_dim()])?;
                expect_shape(&params, "pre_fc.vb", &[d.preproc_width])?;
                expect_shape(&params, "pre_fc.sw", &[d.preproc_width, meta.semantic_dim()])?;
                expect_shape(&params, "pre_fc.sb", &[d.preproc_width])?;
            }
            Preproc::Gcnn => {
                let width = meta.visual_dim() + meta.semantic_dim();
                expect_shape(&params, "pre_gcnn.w", &[d.pair_state, width])?;
                expect_shape(&params, "pre_gcnn.b", &[d.pair_state])?;
            }
        }
        expect_shape(&params, "pred_head.w0", &[d.pred_hidden, d.pair_state])?;
        expect_shape(&params, "pred_head.b0", &[d.pred_hidden])?;
        expect_shape(&params, "pred_head.w1", &[meta.n_pred_labels, d.pred_hidden])?;
        expect_shape(&params, "pred_head.b1", &[meta.n_pred_labels])?;
        let o_ode = OdeFunc::attach(meta.ode_cfg(d.obj_state), "o_ode", &params)?;
        let p_ode = OdeFunc::attach(meta.ode_cfg(d.pair_state), "p_ode", &params)?;
        Ok(ModelParams {
            o_ode,
            p_ode,
            meta,
            params,
        })
    }
}

/// Convenience wrapper: build a fresh model sized for a task.
pub fn model_init(task: &TaskConfig, tc: &TrainConfig) -> Result<ModelParams> {
    task.validate()?;
    tc.validate()?;
    let meta = ModelMeta::for_task(task, tc.preproc, tc.dims.clone());
    ModelParams::init(meta, tc.seed)
}

// ---------------------------------------------------------------------------
// Forward pieces. Every function below takes the parameter store as an
// explicit argument so the same code serves the plain inference path and the
// recorded training path (where `ps` is the tape-registered copy).
// ---------------------------------------------------------------------------

fn object_input(meta: &ModelMeta, scene: &SyntheticScene, idx: usize) -> Tensor {
    let obj = &scene.objects[idx];
    let mut data = Vec::with_capacity(meta.obj_input_dim());
    data.extend_from_slice(&obj.feature);
    data.extend_from_slice(&obj.bbox);
    data.extend(obj.alpha.iter().map(|a| a * ALPHA_SCALE));
    Tensor::vector(data)
}

fn encode_object(ps: &ParamSet, meta: &ModelMeta, scene: &SyntheticScene, idx: usize) -> Result<Tensor> {
    linear(
        ps.get("obj_enc.w")?,
        ps.get("obj_enc.b")?,
        &object_input(meta, scene, idx),
    )
}

/// Relative-geometry description of an ordered pair: both features, the
/// union box, center offset, and log size ratios.
fn pair_visual(meta: &ModelMeta, scene: &SyntheticScene, subj: usize, obj: usize) -> Tensor {
    let s = &scene.objects[subj];
    let o = &scene.objects[obj];
    let mut data = Vec::with_capacity(meta.visual_dim());
    data.extend_from_slice(&s.feature);
    data.extend_from_slice(&o.feature);
    data.push(s.bbox[0].min(o.bbox[0]));
    data.push(s.bbox[1].min(o.bbox[1]));
    data.push(s.bbox[2].max(o.bbox[2]));
    data.push(s.bbox[3].max(o.bbox[3]));
    let (scx, scy) = ((s.bbox[0] + s.bbox[2]) / 2.0, (s.bbox[1] + s.bbox[3]) / 2.0);
    let (ocx, ocy) = ((o.bbox[0] + o.bbox[2]) / 2.0, (o.bbox[1] + o.bbox[3]) / 2.0);
    data.push(ocx - scx);
    data.push(ocy - scy);
    data.push(((o.bbox[2] - o.bbox[0]) / (s.bbox[2] - s.bbox[0])).ln());
    data.push(((o.bbox[3] - o.bbox[1]) / (s.bbox[3] - s.bbox[1])).ln());
    Tensor::vector(data)
}

fn pair_semantic(ps: &ParamSet, subj_label: usize, obj_label: usize) -> Result<Tensor> {
    let table = ps.get("label_embed")?;
    let s = row_select(table, subj_label)?;
    let o = row_select(table, obj_label)?;
    concat(&[&s, &o])
}

/// Per-modality linear maps, concatenated into the initial pair state.
pub fn preprocess_fc(ps: &ParamSet, visual: &Tensor, semantic: &Tensor) -> Result<Tensor> {
    let v = linear(ps.get("pre_fc.vw")?, ps.get("pre_fc.vb")?, visual)?;
    let s = linear(ps.get("pre_fc.sw")?, ps.get("pre_fc.sb")?, semantic)?;
    concat(&[&v, &s])
}

/// One-hop mixing across the scene's pairs followed by a shared linear map.
/// Each output row blends its own input (weight [`GCNN_SELF_WEIGHT`]) with
/// the scene's other pair inputs (the remaining mass, split evenly); a
/// single-pair scene therefore reduces to the plain linear map.
pub fn preprocess_gcnn(ps: &ParamSet, rows: &[Tensor]) -> Result<Vec<Tensor>> {
    let w = ps.get("pre_gcnn.w")?;
    let b = ps.get("pre_gcnn.b")?;
    let n = rows.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mixed = if n == 1 {
            lincomb(&[(1.0, &rows[i])])?
        } else {
            let off = (1.0 - GCNN_SELF_WEIGHT) / (n - 1) as f64;
            let mut terms = Vec::with_capacity(n);
            terms.push((GCNN_SELF_WEIGHT, &rows[i]));
            for (j, row) in rows.iter().enumerate() {
                if j != i {
                    terms.push((off, row));
                }
            }
            lincomb(&terms)?
        };
        out.push(linear(w, b, &mixed)?);
    }
    Ok(out)
}

/// Initial pair states for every ordered pair in the scene, conditioned on
/// the given object labels. Pair order matches `scene.pairs`.
fn pair_initial_states(
    ps: &ParamSet,
    meta: &ModelMeta,
    scene: &SyntheticScene,
    labels: &[usize],
) -> Result<Vec<Tensor>> {
    if labels.len() != scene.n_objects() {
        return Err(Error::config(format!(
            "got {} object labels for a scene with {} objects",
            labels.len(),
            scene.n_objects()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= meta.n_obj_labels) {
        return Err(Error::config(format!(
            "object label {bad} out of range for {} labels",
            meta.n_obj_labels
        )));
    }
    match meta.preproc {
        Preproc::Fc => scene
            .pairs
            .iter()
            .map(|p| {
                let visual = pair_visual(meta, scene, p.subj, p.obj);
                let semantic = pair_semantic(ps, labels[p.subj], labels[p.obj])?;
                preprocess_fc(ps, &visual, &semantic)
            })
            .collect(),
        Preproc::Gcnn => {
            let rows: Vec<Tensor> = scene
                .pairs
                .iter()
                .map(|p| {
                    let visual = pair_visual(meta, scene, p.subj, p.obj);
                    let semantic = pair_semantic(ps, labels[p.subj], labels[p.obj])?;
                    concat(&[&visual, &semantic])
                })
                .collect::<Result<_>>()?;
            preprocess_gcnn(ps, &rows)
        }
    }
}

fn object_logits(ps: &ParamSet, state: &Tensor) -> Result<Tensor> {
    linear(ps.get("obj_head.w")?, ps.get("obj_head.b")?, state)
}

fn predicate_logits(ps: &ParamSet, state: &Tensor) -> Result<Tensor> {
    let h = activation(
        Activation::Tanh,
        &linear(ps.get("pred_head.w0")?, ps.get("pred_head.b0")?, state)?,
    )?;
    linear(ps.get("pred_head.w1")?, ps.get("pred_head.b1")?, &h)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Object-branch outputs for one scene.
#[derive(Clone, Debug)]
pub struct ObjectOutputs {
    /// Per-object label distributions, rows summing to one.
    pub probs: Vec<Vec<f64>>,
    /// Row argmaxes (ties to the smaller label).
    pub labels: Vec<usize>,
    /// Field evaluations spent across the scene's object trajectories.
    pub nfe: usize,
}

/// Run the object branch: encode, integrate, read out.
pub fn classify_objects(
    model: &ModelParams,
    scene: &SyntheticScene,
    solver: &SolverConfig,
) -> Result<ObjectOutputs> {
    let n = scene.n_objects();
    let mut probs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    let mut nfe = 0;
    for idx in 0..n {
        let enc = encode_object(&model.params, &model.meta, scene, idx)?;
        let (end, stats) = node_forward(&model.o_ode, &model.params, enc.data(), solver)?;
        nfe += stats.nfe;
        let logits = object_logits(&model.params, &Tensor::vector(end))?;
        let p = softmax(logits.data());
        labels.push(argmax(&p));
        probs.push(p);
    }
    Ok(ObjectOutputs { probs, labels, nfe })
}

/// Predicate-branch outputs for one scene; row `k` corresponds to
/// `scene.pairs[k]`.
#[derive(Clone, Debug)]
pub struct PredicateOutputs {
    pub probs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub nfe: usize,
}

/// Run the predicate branch conditioned on the given object labels.
pub fn classify_predicates(
    model: &ModelParams,
    scene: &SyntheticScene,
    obj_labels: &[usize],
    solver: &SolverConfig,
) -> Result<PredicateOutputs> {
    let states = pair_initial_states(&model.params, &model.meta, scene, obj_labels)?;
    let mut probs = Vec::with_capacity(states.len());
    let mut labels = Vec::with_capacity(states.len());
    let mut nfe = 0;
    for state in &states {
        let (end, stats) = node_forward(&model.p_ode, &model.params, state.data(), solver)?;
        nfe += stats.nfe;
        let logits = predicate_logits(&model.params, &Tensor::vector(end))?;
        let p = softmax(logits.data());
        labels.push(argmax(&p));
        probs.push(p);
    }
    Ok(PredicateOutputs { probs, labels, nfe })
}

// ---------------------------------------------------------------------------
// Training.
// ---------------------------------------------------------------------------

/// Optimization settings. `lr = 0` is allowed so a smoke run can verify the
/// whole loop without moving parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub grad_path: GradMode,
    pub preproc: Preproc,
    pub seed: u64,
    pub dims: ModelDims,
    pub solver: SolverConfig,
}

impl Default for TrainConfig {
    fn default() -> TrainConfig {
        TrainConfig {
            epochs: 10,
            batch_size: 6,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            grad_path: GradMode::Discretize,
            preproc: Preproc::Fc,
            seed: 1,
            dims: ModelDims::default(),
            solver: SolverConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be at least 1"));
        }
        if !self.lr.is_finite() || self.lr < 0.0 {
            return Err(Error::config("lr must be finite and non-negative"));
        }
        for (name, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !b.is_finite() || !(0.0..1.0).contains(&b) {
                return Err(Error::config(format!("{name} must lie in [0, 1)")));
            }
        }
        if !self.eps.is_finite() || self.eps <= 0.0 {
            return Err(Error::config("eps must be finite and positive"));
        }
        self.dims.validate(self.preproc)?;
        self.solver.validate()
    }
}

/// First/second-moment accumulators, keyed by parameter name. Updates walk
/// names in sorted order so the arithmetic sequence is reproducible.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new() -> AdamState {
        AdamState::default()
    }

    fn apply(&mut self, params: &mut ParamSet, grads: &Gradients, tc: &TrainConfig) -> Result<()> {
        self.step += 1;
        let bc1 = 1.0 - tc.beta1.powi(self.step as i32);
        let bc2 = 1.0 - tc.beta2.powi(self.step as i32);
        let names: Vec<String> = params.names().map(str::to_owned).collect();
        for name in names {
            let len = params.get(&name)?.numel();
            let zero;
            let g = match grads.param(&name) {
                Some(t) => t.data(),
                None => {
                    zero = vec![0.0; len];
                    &zero
                }
            };
            let m = self.m.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            let v = self.v.entry(name.clone()).or_insert_with(|| vec![0.0; len]);
            let cur: Vec<f64> = params.get(&name)?.data().to_vec();
            let mut next = Vec::with_capacity(len);
            for i in 0..len {
                m[i] = tc.beta1 * m[i] + (1.0 - tc.beta1) * g[i];
                v[i] = tc.beta2 * v[i] + (1.0 - tc.beta2) * g[i] * g[i];
                let m_hat = m[i] / bc1;
                let v_hat = v[i] / bc2;
                let step = tc.lr * m_hat / (v_hat.sqrt() + tc.eps);
                // A vanishing step must leave the value bit-identical;
                // subtracting a signed zero would flip -0.0 entries to 0.0.
                next.push(if step == 0.0 { cur[i] } else { cur[i] - step });
            }
            params.set_data(&name, &next)?;
        }
        Ok(())
    }
}

/// A model mid-training: weights, optimizer moments, and how many epochs
/// have already run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub model: ModelParams,
    pub adam: AdamState,
    pub epoch: usize,
}

impl TrainState {
    pub fn new(model: ModelParams) -> TrainState {
        TrainState {
            model,
            adam: AdamState::new(),
            epoch: 0,
        }
    }
}

/// One line of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_obj_acc: f64,
    pub val_recall50: f64,
    /// Mean field evaluations per trajectory during this epoch's training
    /// passes (forward only; the replay-based backward reuses them).
    pub nfe_mean: f64,
}

/// Mean object cross-entropy plus mean predicate cross-entropy for one
/// scene, against the stored oracle assignments. Returns the scalar loss
/// plus field-evaluation and trajectory counts.
fn scene_loss(
    model: &ModelParams,
    ps: &ParamSet,
    scene: &SyntheticScene,
    solver: &SolverConfig,
    mode: GradMode,
) -> Result<(Tensor, usize, usize)> {
    let n = scene.n_objects();
    let mut nfe = 0;
    let mut solves = 0;
    let mut terms = Vec::new();

    let mut obj_losses = Vec::with_capacity(n);
    for idx in 0..n {
        let enc = encode_object(ps, &model.meta, scene, idx)?;
        let (end, stats) = node_forward_on_tape(&model.o_ode, ps, &enc, solver, mode)?;
        nfe += stats.nfe;
        solves += 1;
        let logits = object_logits(ps, &end)?;
        obj_losses.push(softmax_cross_entropy(&logits, scene.oracle_obj[idx])?);
    }
    for l in &obj_losses {
        terms.push((1.0 / n as f64, l));
    }

    // The semantic half conditions on annotated labels while training, the
    // same information the joint decoder sees; targets stay the oracle's.
    let gt: Vec<usize> = scene.objects.iter().map(|o| o.gt_label).collect();
    let states = pair_initial_states(ps, &model.meta, scene, &gt)?;
    let mut pred_losses = Vec::with_capacity(states.len());
    for (k, state) in states.iter().enumerate() {
        let (end, stats) = node_forward_on_tape(&model.p_ode, ps, state, solver, mode)?;
        nfe += stats.nfe;
        solves += 1;
        let logits = predicate_logits(ps, &end)?;
        pred_losses.push(softmax_cross_entropy(&logits, scene.oracle_pred[k])?);
    }
    let n_pairs = pred_losses.len();
    for l in &pred_losses {
        terms.push((1.0 / n_pairs as f64, l));
    }

    Ok((lincomb(&terms)?, nfe, solves))
}

fn train_batch(
    model: &ModelParams,
    scenes: &[&SyntheticScene],
    tc: &TrainConfig,
    epoch: usize,
    batch: usize,
) -> Result<(f64, Gradients, usize, usize)> {
    let (inner, tape) = with_tape(|| -> Result<(Tensor, usize, usize)> {
        let tracked = model.params.tracked();
        let mut nfe = 0;
        let mut solves = 0;
        let mut losses = Vec::with_capacity(scenes.len());
        for scene in scenes {
            let (l, f, s) = scene_loss(model, &tracked, scene, &tc.solver, tc.grad_path)?;
            nfe += f;
            solves += s;
            losses.push(l);
        }
        let coeff = 1.0 / scenes.len() as f64;
        let terms: Vec<(f64, &Tensor)> = losses.iter().map(|l| (coeff, l)).collect();
        Ok((lincomb(&terms)?, nfe, solves))
    });
    // Any non-finite value in the training pass — whether an op guard
    // tripped or the loss itself overflowed — reports as divergence with
    // the batch that caused it.
    let diverged = |e: Error| match e {
        Error::NonFinite(_) => Error::Diverged { epoch, batch },
        other => other,
    };
    let (loss, nfe, solves) = inner.map_err(diverged)?;
    let value = loss.item()?;
    if !value.is_finite() {
        return Err(Error::Diverged { epoch, batch });
    }
    let grads = tape.backward(&loss, 1.0).map_err(diverged)?;
    Ok((value, grads, nfe, solves))
}

fn shuffled_indices(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    // Stream 0 belongs to parameter init; each epoch's shuffle gets its own
    // stream so resuming mid-run replays the exact same batch order.
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1 + epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = (rng.next_u64() % (i as u64 + 1)) as usize;
        order.swap(i, j);
    }
    order
}

/// Advance training to `tc.epochs`, invoking `on_epoch` after each epoch
/// (checkpointing hook). Returns the log rows produced by this call; a
/// resumed run continues the row sequence where it stopped.
pub fn train_with<F>(
    st: &mut TrainState,
    ds: &Dataset,
    tc: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochRow>>
where
    F: FnMut(&TrainState, &EpochRow) -> Result<()>,
{
    tc.validate()?;
    if st.model.meta.preproc != tc.preproc || st.model.meta.dims != tc.dims {
        return Err(Error::config(
            "training config disagrees with the model's preprocessor or layer widths",
        ));
    }
    if ds.train.is_empty() {
        return Err(Error::config("training split is empty"));
    }
    let mut rows = Vec::new();
    while st.epoch < tc.epochs {
        let epoch = st.epoch;
        let order = shuffled_indices(ds.train.len(), tc.seed, epoch);
        let mut loss_sum = 0.0;
        let mut nfe_sum = 0usize;
        let mut solve_sum = 0usize;
        for (bi, chunk) in order.chunks(tc.batch_size).enumerate() {
            let scenes: Vec<&SyntheticScene> = chunk.iter().map(|&i| &ds.train[i]).collect();
            let (value, grads, nfe, solves) =
                train_batch(&st.model, &scenes, tc, epoch, bi)?;
            st.adam.apply(&mut st.model.params, &grads, tc)?;
            loss_sum += value * scenes.len() as f64;
            nfe_sum += nfe;
            solve_sum += solves;
        }
        let (val_obj_acc, val_recall50) = if ds.val.is_empty() {
            (0.0, 0.0)
        } else {
            let rep = evaluate(&st.model, &ds.val, Setting::Sgcls, &tc.solver)?;
            (rep.obj_accuracy, rep.recall[&50])
        };
        let row = EpochRow {
            epoch,
            train_loss: loss_sum / ds.train.len() as f64,
            val_obj_acc,
            val_recall50,
            nfe_mean: if solve_sum == 0 {
                0.0
            } else {
                nfe_sum as f64 / solve_sum as f64
            },
        };
        st.epoch += 1;
        on_epoch(st, &row)?;
        rows.push(row);
    }
    Ok(rows)
}

/// [`train_with`] without a checkpointing hook.
pub fn train(st: &mut TrainState, ds: &Dataset, tc: &TrainConfig) -> Result<Vec<EpochRow>> {
    train_with(st, ds, tc, |_, _| Ok(()))
}

// ---------------------------------------------------------------------------
// Checkpoints.
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    meta: ModelMeta,
    train: TrainConfig,
    epoch: usize,
}

/// Write `params.bin`, `optim.json`, and `meta.json` into `dir` (created if
/// missing). Everything needed to continue training bit-for-bit.
pub fn save_checkpoint(dir: &Path, st: &TrainState, tc: &TrainConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    st.model.params.save(&dir.join("params.bin"))?;
    let optim = serde_json::to_string(&st.adam)
        .map_err(|e| Error::parse("optimizer state", e.to_string()))?;
    std::fs::write(dir.join("optim.json"), optim)
        .map_err(|e| Error::io(&dir.join("optim.json"), e))?;
    let meta = CheckpointMeta {
        meta: st.model.meta.clone(),
        train: tc.clone(),
        epoch: st.epoch,
    };
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::parse("checkpoint manifest", e.to_string()))?;
    std::fs::write(dir.join("meta.json"), meta_json)
        .map_err(|e| Error::io(&dir.join("meta.json"), e))
}

/// Load a checkpoint directory back into a resumable state plus the training
/// config it was written under.
pub fn load_checkpoint(dir: &Path) -> Result<(TrainState, TrainConfig)> {
    let meta_path = dir.join("meta.json");
    let meta_json = std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let ck: CheckpointMeta = serde_json::from_str(&meta_json)
        .map_err(|e| Error::parse("checkpoint manifest", e.to_string()))?;
    let params = ParamSet::load(&dir.join("params.bin"))?;
    let model = ModelParams::attach(ck.meta, params)?;
    let optim_path = dir.join("optim.json");
    let optim_json = std::fs::read_to_string(&optim_path).map_err(|e| Error::io(&optim_path, e))?;
    let adam: AdamState = serde_json::from_str(&optim_json)
        .map_err(|e| Error::parse("optimizer state", e.to_string()))?;
    Ok((
        TrainState {
            model,
            adam,
            epoch: ck.epoch,
        },
        ck.train,
    ))
}

// ---------------------------------------------------------------------------
// Evaluation.
// ---------------------------------------------------------------------------

/// Aggregate metrics over a scene list. All fractions are means of
/// per-scene fractions, so scenes weigh equally regardless of size.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub setting: Setting,
    pub n_scenes: usize,
    /// Model labels vs annotation labels (1.0 under `predcls`, where the
    /// annotation is given).
    pub obj_accuracy: f64,
    /// Conditioning labels vs the exact joint solver's labels: the model's
    /// own under `sgcls`, the annotation's under `predcls`.
    pub oracle_agreement: f64,
    /// Per-object argmax of the score rows vs the joint solver — the
    /// context-free baseline the model should beat under `sgcls`.
    pub greedy_agreement: f64,
    /// Recall at each of [`RECALL_CUTOFFS`], averaged over scenes that have
    /// at least one annotated pair.
    pub recall: BTreeMap<usize, f64>,
    /// Mean field evaluations per trajectory.
    pub nfe_mean: f64,
    /// Mean wall-clock seconds per scene. Excluded from all determinism
    /// guarantees; comparisons should ignore it.
    pub time_mean: f64,
}

/// Score every scene under the given setting.
pub fn evaluate(
    model: &ModelParams,
    scenes: &[SyntheticScene],
    setting: Setting,
    solver: &SolverConfig,
) -> Result<EvalReport> {
    if scenes.is_empty() {
        return Err(Error::config("evaluate needs at least one scene"));
    }
    let mut obj_acc_sum = 0.0;
    let mut oracle_sum = 0.0;
    let mut greedy_sum = 0.0;
    let mut recall_sums: BTreeMap<usize, (f64, usize)> =
        RECALL_CUTOFFS.iter().map(|&k| (k, (0.0, 0))).collect();
    let mut nfe_sum = 0usize;
    let mut solve_sum = 0usize;
    let mut time_sum = 0.0;

    for scene in scenes {
        let started = Instant::now();
        let n = scene.n_objects();
        let gt: Vec<usize> = scene.objects.iter().map(|o| o.gt_label).collect();
        let greedy = greedy_labels(scene);

        let (labels, obj_probs) = match setting {
            Setting::Sgcls => {
                let out = classify_objects(model, scene, solver)?;
                nfe_sum += out.nfe;
                solve_sum += n;
                (out.labels, Some(out.probs))
            }
            Setting::Predcls => (gt.clone(), None),
        };

        let frac = |a: &[usize], b: &[usize]| {
            a.iter().zip(b).filter(|(x, y)| x == y).count() as f64 / n as f64
        };
        obj_acc_sum += frac(&labels, &gt);
        oracle_sum += frac(&labels, &scene.oracle_obj);
        greedy_sum += frac(&greedy, &scene.oracle_obj);

        if !scene.pairs.is_empty() {
            let pred = classify_predicates(model, scene, &labels, solver)?;
            nfe_sum += pred.nfe;
            solve_sum += scene.pairs.len();

            // One prediction per ordered pair: its best non-background
            // predicate, scored by that probability alone under `predcls`
            // and jointly with both endpoint confidences under `sgcls`.
            let mut predicted = Vec::with_capacity(scene.pairs.len());
            for (k, p) in scene.pairs.iter().enumerate() {
                let row = &pred.probs[k];
                let mut best = 1;
                for j in 2..row.len() {
                    if row[j] > row[best] {
                        best = j;
                    }
                }
                let mut score = row[best];
                if let Some(probs) = &obj_probs {
                    score *= probs[p.subj][labels[p.subj]] * probs[p.obj][labels[p.obj]];
                }
                predicted.push(ScoredPrediction {
                    pair: (p.subj, p.obj),
                    label: best,
                    score,
                });
            }
            let gt_pairs: Vec<GtPair> = scene
                .pairs
                .iter()
                .filter(|p| p.gt_predicate != 0)
                .map(|p| GtPair {
                    pair: (p.subj, p.obj),
                    label: p.gt_predicate,
                })
                .collect();
            for (&k, entry) in recall_sums.iter_mut() {
                let r = recall_topk(&predicted, &gt_pairs, k);
                if !r.empty_gt {
                    entry.0 += r.value;
                    entry.1 += 1;
                }
            }
        }
        time_sum += started.elapsed().as_secs_f64();
    }

    let n_scenes = scenes.len() as f64;
    Ok(EvalReport {
        setting,
        n_scenes: scenes.len(),
        obj_accuracy: obj_acc_sum / n_scenes,
        oracle_agreement: oracle_sum / n_scenes,
        greedy_agreement: greedy_sum / n_scenes,
        recall: recall_sums
            .into_iter()
            .map(|(k, (sum, cnt))| (k, if cnt == 0 { 0.0 } else { sum / cnt as f64 }))
            .collect(),
        nfe_mean: if solve_sum == 0 {
            0.0
        } else {
            nfe_sum as f64 / solve_sum as f64
        },
        time_mean: time_sum / n_scenes,
    })
}

// ---------------------------------------------------------------------------
// Horizon sweep and trajectory probe.
// ---------------------------------------------------------------------------

/// One sweep point: the full `sgcls` evaluation at an alternative horizon.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub t_end: f64,
    pub obj_accuracy: f64,
    pub oracle_agreement: f64,
    pub recall50: f64,
    pub nfe_mean: f64,
    pub time_mean: f64,
}

/// Re-evaluate the same weights while varying only the integration horizon.
/// A grid point equal to the training horizon reproduces [`evaluate`]
/// exactly, because this goes through the identical code path.
pub fn sweep_tend(
    model: &ModelParams,
    scenes: &[SyntheticScene],
    grid: &[f64],
    base: &SolverConfig,
) -> Result<Vec<SweepRow>> {
    if grid.is_empty() {
        return Err(Error::config("sweep needs at least one horizon"));
    }
    for pair in grid.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::config("sweep horizons must strictly increase"));
        }
    }
    if grid.iter().any(|&t| !t.is_finite() || t <= 0.0) {
        return Err(Error::config("sweep horizons must be finite and positive"));
    }
    let mut rows = Vec::with_capacity(grid.len());
    for &t_end in grid {
        let mut cfg = base.clone();
        cfg.t_end = t_end;
        cfg.validate()?;
        let rep = evaluate(model, scenes, Setting::Sgcls, &cfg)?;
        rows.push(SweepRow {
            t_end,
            obj_accuracy: rep.obj_accuracy,
            oracle_agreement: rep.oracle_agreement,
            recall50: rep.recall[&50],
            nfe_mean: rep.nfe_mean,
            time_mean: rep.time_mean,
        });
    }
    Ok(rows)
}

/// Model readouts at one intermediate time.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub time: f64,
    pub obj_labels: Vec<usize>,
    /// Raw predicate-head argmax per ordered pair (background included).
    pub pred_labels: Vec<usize>,
    /// How many `obj_labels` match the scene's annotation.
    pub objects_correct: usize,
}

/// Integrate each trajectory once and read the heads out at every requested
/// time. Times must be finite, non-negative, and strictly increasing; a
/// single time equal to the solver horizon reproduces the classify calls
/// exactly (one uninterrupted solve per trajectory). The pair branch
/// conditions on the object labels read at the final time.
pub fn trajectory_probe(
    model: &ModelParams,
    scene: &SyntheticScene,
    times: &[f64],
    solver: &SolverConfig,
) -> Result<Vec<ProbeRow>> {
    if times.is_empty() {
        return Err(Error::config("probe needs at least one time"));
    }
    if times.iter().any(|&t| !t.is_finite() || t < 0.0) {
        return Err(Error::config("probe times must be finite and non-negative"));
    }
    for pair in times.windows(2) {
        if !(pair[0] < pair[1]) {
            return Err(Error::config("probe times must strictly increase"));
        }
    }

    let n = scene.n_objects();
    let ps = &model.params;
    // Object trajectories, chained span by span.
    let mut obj_labels_at: Vec<Vec<usize>> = vec![Vec::with_capacity(n); times.len()];
    for idx in 0..n {
        let enc = encode_object(ps, &model.meta, scene, idx)?;
        let mut state = enc.data().to_vec();
        let mut prev = 0.0;
        for (ti, &t) in times.iter().enumerate() {
            if t > prev {
                let (next, _) = node_forward_span(&model.o_ode, ps, &state, prev, t, solver)?;
                state = next;
                prev = t;
            }
            let logits = object_logits(ps, &Tensor::vector(state.clone()))?;
            obj_labels_at[ti].push(argmax(&softmax(logits.data())));
        }
    }

    let final_labels = obj_labels_at[times.len() - 1].clone();
    let mut pred_labels_at: Vec<Vec<usize>> = vec![Vec::new(); times.len()];
    if !scene.pairs.is_empty() {
        let states = pair_initial_states(ps, &model.meta, scene, &final_labels)?;
        for state in &states {
            let mut cur = state.data().to_vec();
            let mut prev = 0.0;
            for (ti, &t) in times.iter().enumerate() {
                if t > prev {
                    let (next, _) = node_forward_span(&model.p_ode, ps, &cur, prev, t, solver)?;
                    cur = next;
                    prev = t;
                }
                let logits = predicate_logits(ps, &Tensor::vector(cur.clone()))?;
                pred_labels_at[ti].push(argmax(&softmax(logits.data())));
            }
        }
    }

    let gt: Vec<usize> = scene.objects.iter().map(|o| o.gt_label).collect();
    Ok(times
        .iter()
        .enumerate()
        .map(|(ti, &t)| {
            let obj_labels = obj_labels_at[ti].clone();
            let objects_correct = obj_labels.iter().zip(&gt).filter(|(a, b)| a == b).count();
            ProbeRow {
                time: t,
                obj_labels,
                pred_labels: pred_labels_at[ti].clone(),
                objects_correct,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::taskgen::{gen_dataset, gen_scene};

    fn tiny_task() -> TaskConfig {
        TaskConfig {
            n_obj_labels: 4,
            n_pred_labels: 3,
            feat_dim: 4,
            objects_min: 2,
            objects_max: 3,
            cluster_spread: 0.3,
            coupling_strength: 3.0,
            context_fraction: 0.3,
            background_prior: 0.5,
            seed: 11,
        }
    }

    fn tiny_dims() -> ModelDims {
        ModelDims {
            obj_state: 6,
            pair_state: 6,
            embed_dim: 3,
            pred_hidden: 5,
            preproc_width: 3,
            ode_hidden: vec![5],
        }
    }

    fn tiny_train(epochs: usize) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 4,
            lr: 5e-3,
            dims: tiny_dims(),
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_model() -> ModelParams {
        model_init(&tiny_task(), &tiny_train(1)).unwrap()
    }

    fn param_bits(ps: &ParamSet) -> Vec<(String, Vec<u64>)> {
        ps.iter()
            .map(|(n, t)| (n.to_owned(), t.data().iter().map(|v| v.to_bits()).collect()))
            .collect()
    }

    #[test]
    fn init_is_deterministic_and_shaped() {
        let a = tiny_model();
        let b = tiny_model();
        assert_eq!(param_bits(&a.params), param_bits(&b.params));

        let mut other_cfg = tiny_train(1);
        other_cfg.seed = 4;
        let c = model_init(&tiny_task(), &other_cfg).unwrap();
        assert_ne!(param_bits(&a.params), param_bits(&c.params));

        // feat 4 + bbox 4 + scores 4 on the encoder input side.
        assert_eq!(a.params.get("obj_enc.w").unwrap().shape(), &[6, 12]);
        assert_eq!(a.params.get("label_embed").unwrap().shape(), &[4, 3]);
        assert_eq!(a.params.get("pre_fc.vw").unwrap().shape(), &[3, 16]);
        assert_eq!(a.params.get("pred_head.w1").unwrap().shape(), &[3, 5]);
    }

    #[test]
    fn mismatched_dims_are_rejected() {
        let mut dims = tiny_dims();
        dims.pair_state = 7; // fc needs 2 * preproc_width
        assert!(dims.validate(Preproc::Fc).is_err());
        assert!(dims.validate(Preproc::Gcnn).is_ok());

        let model = tiny_model();
        let mut meta = model.meta.clone();
        meta.dims.obj_state = 9;
        assert!(ModelParams::attach(meta, model.params.clone()).is_err());
    }

    #[test]
    fn classify_objects_rows_are_distributions() {
        let model = tiny_model();
        let scene = gen_scene(&tiny_task(), 0).unwrap();
        let out = classify_objects(&model, &scene, &SolverConfig::default()).unwrap();
        assert_eq!(out.probs.len(), scene.n_objects());
        assert!(out.nfe > 0);
        for (row, &label) in out.probs.iter().zip(&out.labels) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&p| p > 0.0 && p < 1.0));
            assert!(label < 4);
            assert!(row.iter().all(|&p| p <= row[label]));
        }
    }

    #[test]
    fn zero_object_field_reads_the_encoder_directly() {
        let mut model = tiny_model();
        model.o_ode.zero_params(&mut model.params).unwrap();
        let scene = gen_scene(&tiny_task(), 1).unwrap();
        let out = classify_objects(&model, &scene, &SolverConfig::default()).unwrap();
        for idx in 0..scene.n_objects() {
            let enc = encode_object(&model.params, &model.meta, &scene, idx).unwrap();
            let logits = object_logits(&model.params, &enc).unwrap();
            let direct = softmax(logits.data());
            for (a, b) in out.probs[idx].iter().zip(&direct) {
                assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }

    #[test]
    fn zero_predicate_stack_gives_uniform_rows() {
        let mut model = tiny_model();
        model.p_ode.zero_params(&mut model.params).unwrap();
        for name in ["pred_head.w0", "pred_head.b0", "pred_head.w1", "pred_head.b1"] {
            let len = model.params.get(name).unwrap().numel();
            model.params.set_data(name, &vec![0.0; len]).unwrap();
        }
        let scene = gen_scene(&tiny_task(), 2).unwrap();
        let labels: Vec<usize> = scene.objects.iter().map(|o| o.gt_label).collect();
        let out =
            classify_predicates(&model, &scene, &labels, &SolverConfig::default()).unwrap();
        for row in &out.probs {
            for &p in row {
                assert!((p - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn single_pair_gcnn_reduces_to_its_linear_map() {
        let mut tc = tiny_train(1);
        tc.preproc = Preproc::Gcnn;
        let model = model_init(&tiny_task(), &tc).unwrap();
        let row = Tensor::vector((0..22).map(|i| 0.1 * i as f64).collect());
        let mixed = preprocess_gcnn(&model.params, std::slice::from_ref(&row)).unwrap();
        let direct = linear(
            model.params.get("pre_gcnn.w").unwrap(),
            model.params.get("pre_gcnn.b").unwrap(),
            &row,
        )
        .unwrap();
        assert_eq!(mixed.len(), 1);
        for (a, b) in mixed[0].data().iter().zip(direct.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn gcnn_mixing_preserves_identical_rows() {
        let mut tc = tiny_train(1);
        tc.preproc = Preproc::Gcnn;
        let model = model_init(&tiny_task(), &tc).unwrap();
        let row = Tensor::vector((0..22).map(|i| (i as f64 * 0.37).sin()).collect());
        let rows = vec![row.clone(), row.clone(), row.clone()];
        let mixed = preprocess_gcnn(&model.params, &rows).unwrap();
        let direct = linear(
            model.params.get("pre_gcnn.w").unwrap(),
            model.params.get("pre_gcnn.b").unwrap(),
            &row,
        )
        .unwrap();
        for out in &mixed {
            for (a, b) in out.data().iter().zip(direct.data()) {
                assert!((a - b).abs() < 1e-12, "{a} vs {b}");
            }
        }
    }

    // Full-model gradient check: differentiate the training loss of one
    // scene with both gradient paths and compare against central finite
    // differences at a tight solver tolerance (loose tolerances make the
    // finite-difference baseline itself unreliable near accept/reject
    // boundaries).
    #[test]
    fn training_loss_gradients_match_finite_differences() {
        let task = tiny_task();
        let scene = gen_scene(&task, 5).unwrap();
        let solver = SolverConfig {
            atol: 1e-9,
            rtol: 1e-9,
            t_end: 0.4,
            ..SolverConfig::default()
        };

        for mode in [GradMode::Discretize, GradMode::Adjoint] {
            let model = tiny_model();
            let (inner, tape) = with_tape(|| -> crate::Result<Tensor> {
                let tracked = model.params.tracked();
                let (loss, _, _) = scene_loss(&model, &tracked, &scene, &solver, mode)?;
                Ok(loss)
            });
            let loss = inner.unwrap();
            let grads = tape.backward(&loss, 1.0).unwrap();

            let names: Vec<String> = model.params.names().map(str::to_owned).collect();
            for name in names {
                let base = model.params.get(&name).unwrap().data().to_vec();
                let g = grads.param(&name).unwrap().data().to_vec();
                for i in 0..base.len() {
                    let h = 1e-5 * base[i].abs().max(1.0);
                    let mut probe = model.clone();
                    let mut bumped = base.clone();
                    bumped[i] = base[i] + h;
                    probe.params.set_data(&name, &bumped).unwrap();
                    let up = scene_loss(&probe, &probe.params, &scene, &solver, mode)
                        .unwrap()
                        .0
                        .item()
                        .unwrap();
                    bumped[i] = base[i] - h;
                    probe.params.set_data(&name, &bumped).unwrap();
                    let down = scene_loss(&probe, &probe.params, &scene, &solver, mode)
                        .unwrap()
                        .0
                        .item()
                        .unwrap();
                    let fd = (up - down) / (2.0 * h);
                    assert!(
                        (g[i] - fd).abs() <= 1e-4 * fd.abs().max(1.0),
                        "{mode:?} {name}[{i}]: ad {} vs fd {}",
                        g[i],
                        fd
                    );
                }
            }
        }
    }

    #[test]
    fn training_runs_reproduce_bit_for_bit() {
        let ds = gen_dataset(&tiny_task(), 10, [0.8, 0.2, 0.0]).unwrap();
        let tc = tiny_train(2);
        let mut a = TrainState::new(model_init(&tiny_task(), &tc).unwrap());
        let rows_a = train(&mut a, &ds, &tc).unwrap();
        let mut b = TrainState::new(model_init(&tiny_task(), &tc).unwrap());
        let rows_b = train(&mut b, &ds, &tc).unwrap();
        assert_eq!(rows_a, rows_b);
        assert_eq!(param_bits(&a.model.params), param_bits(&b.model.params));
    }

    #[test]
    fn zero_learning_rate_moves_nothing() {
        let ds = gen_dataset(&tiny_task(), 6, [1.0, 0.0, 0.0]).unwrap();
        let mut tc = tiny_train(2);
        tc.lr = 0.0;
        let mut st = TrainState::new(model_init(&tiny_task(), &tc).unwrap());
        let before = param_bits(&st.model.params);
        let rows = train(&mut st, &ds, &tc).unwrap();
        assert_eq!(rows.len(), 2);
        let after = param_bits(&st.model.params);
        for ((name, a), (_, b)) in before.iter().zip(&after) {
            if a != b {
                let i = a.iter().zip(b).position(|(x, y)| x != y).unwrap();
                panic!(
                    "{name}[{i}] moved: {} -> {}",
                    f64::from_bits(a[i]),
                    f64::from_bits(b[i])
                );
            }
        }
        assert!(st.adam.step > 0);
    }

    #[test]
    fn resumed_training_matches_an_uninterrupted_run() {
        let ds = gen_dataset(&tiny_task(), 10, [0.8, 0.2, 0.0]).unwrap();
        let tc4 = tiny_train(4);

        let mut full = TrainState::new(model_init(&tiny_task(), &tc4).unwrap());
        let rows_full = train(&mut full, &ds, &tc4).unwrap();

        let tc2 = tiny_train(2);
        let mut half = TrainState::new(model_init(&tiny_task(), &tc2).unwrap());
        let mut rows_half = train(&mut half, &ds, &tc2).unwrap();

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &half, &tc2).unwrap();
        let (mut resumed, stored_tc) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(stored_tc, tc2);
        assert_eq!(resumed.epoch, 2);
        rows_half.extend(train(&mut resumed, &ds, &tc4).unwrap());

        assert_eq!(rows_full, rows_half);
        assert_eq!(
            param_bits(&full.model.params),
            param_bits(&resumed.model.params)
        );
    }

    #[test]
    fn gradient_paths_level_off_together() {
        let ds = gen_dataset(&tiny_task(), 8, [1.0, 0.0, 0.0]).unwrap();
        let mut losses = Vec::new();
        for mode in [GradMode::Discretize, GradMode::Adjoint] {
            let mut tc = tiny_train(1);
            tc.grad_path = mode;
            tc.solver = SolverConfig {
                atol: 1e-8,
                rtol: 1e-8,
                t_end: 0.5,
                ..SolverConfig::default()
            };
            let mut st = TrainState::new(model_init(&tiny_task(), &tc).unwrap());
            let rows = train(&mut st, &ds, &tc).unwrap();
            losses.push(rows[0].train_loss);
        }
        let rel = (losses[0] - losses[1]).abs() / losses[0].abs();
        assert!(rel < 0.01, "paths drifted: {losses:?} (rel {rel})");
    }

    #[test]
    fn one_scene_overfits_to_a_small_loss() {
        let ds = gen_dataset(&tiny_task(), 1, [1.0, 0.0, 0.0]).unwrap();
        let mut tc = tiny_train(150);
        tc.batch_size = 1;
        tc.lr = 1e-2;
        let mut st = TrainState::new(model_init(&tiny_task(), &tc).unwrap());
        let rows = train(&mut st, &ds, &tc).unwrap();
        let first = rows.first().unwrap().train_loss;
        let last = rows.last().unwrap().train_loss;
        assert!(
            last < 0.05 && last < 0.1 * first,
            "loss stalled: {first} -> {last}"
        );
    }

    #[test]
    fn noiseless_decoupled_task_is_learned_almost_perfectly() {
        // Features sit exactly on their prototypes and no contextual terms
        // apply, so the object branch should become near-perfect.
        let mut task = tiny_task();
        task.cluster_spread = 0.0;
        task.context_fraction = 0.0;
        let ds = gen_dataset(&task, 50, [0.8, 0.2, 0.0]).unwrap();
        let mut tc = tiny_train(30);
        tc.lr = 1e-2;
        let mut st = TrainState::new(model_init(&task, &tc).unwrap());
        train(&mut st, &ds, &tc).unwrap();
        let rep = evaluate(&st.model, &ds.train, Setting::Sgcls, &tc.solver).unwrap();
        assert!(rep.obj_accuracy >= 0.99, "accuracy {}", rep.obj_accuracy);
        assert!(rep.oracle_agreement >= 0.99);
    }

    fn ignoring_time(mut rep: EvalReport) -> EvalReport {
        rep.time_mean = 0.0;
        rep
    }

    #[test]
    fn predcls_reports_ignore_the_object_branch() {
        let task = tiny_task();
        let model = model_init(&task, &tiny_train(1)).unwrap();
        let scenes: Vec<SyntheticScene> =
            (0..6).map(|i| gen_scene(&task, i).unwrap()).collect();
        let solver = SolverConfig::default();
        let base = evaluate(&model, &scenes, Setting::Predcls, &solver).unwrap();
        assert_eq!(base.obj_accuracy, 1.0);
        assert!(base.recall.keys().copied().eq([20, 50, 100]));
        for (&k, &v) in &base.recall {
            assert!((0.0..=1.0).contains(&v), "recall@{k} = {v}");
        }

        // Perturb every object-branch parameter; predcls cannot see it.
        let mut bent = model.clone();
        for name in ["obj_enc.w", "obj_enc.b", "obj_head.w", "obj_head.b"] {
            let data: Vec<f64> = bent.params.get(name).unwrap().data().to_vec();
            let moved: Vec<f64> = data.iter().map(|v| v + 0.75).collect();
            bent.params.set_data(name, &moved).unwrap();
        }
        let again = evaluate(&bent, &scenes, Setting::Predcls, &solver).unwrap();
        assert_eq!(ignoring_time(base), ignoring_time(again));

        let sg = evaluate(&model, &scenes, Setting::Sgcls, &solver).unwrap();
        let sg_bent = evaluate(&bent, &scenes, Setting::Sgcls, &solver).unwrap();
        assert_ne!(ignoring_time(sg), ignoring_time(sg_bent));
    }

    #[test]
    fn sweep_reproduces_evaluate_at_the_training_horizon() {
        let task = tiny_task();
        let model = model_init(&task, &tiny_train(1)).unwrap();
        let scenes: Vec<SyntheticScene> =
            (0..4).map(|i| gen_scene(&task, i).unwrap()).collect();
        let solver = SolverConfig::default();
        let rows = sweep_tend(&model, &scenes, &[0.75, solver.t_end], &solver).unwrap();
        let rep = evaluate(&model, &scenes, Setting::Sgcls, &solver).unwrap();
        assert_eq!(rows[1].obj_accuracy.to_bits(), rep.obj_accuracy.to_bits());
        assert_eq!(rows[1].recall50.to_bits(), rep.recall[&50].to_bits());
        assert_eq!(rows[1].nfe_mean.to_bits(), rep.nfe_mean.to_bits());
        assert!(rows[0].nfe_mean <= rows[1].nfe_mean);

        assert!(sweep_tend(&model, &scenes, &[1.0, 1.0], &solver).is_err());
        assert!(sweep_tend(&model, &scenes, &[], &solver).is_err());
    }

    #[test]
    fn probe_at_the_horizon_matches_classify() {
        let task = tiny_task();
        let model = model_init(&task, &tiny_train(1)).unwrap();
        let scene = gen_scene(&task, 3).unwrap();
        let solver = SolverConfig::default();
        let rows = trajectory_probe(&model, &scene, &[solver.t_end], &solver).unwrap();
        let obj = classify_objects(&model, &scene, &solver).unwrap();
        assert_eq!(rows[0].obj_labels, obj.labels);
        let pred = classify_predicates(&model, &scene, &obj.labels, &solver).unwrap();
        assert_eq!(rows[0].pred_labels, pred.labels);

        // Time zero never integrates: labels come straight from the
        // encoder readout.
        let at_zero = trajectory_probe(&model, &scene, &[0.0], &solver).unwrap();
        let mut direct = Vec::new();
        for idx in 0..scene.n_objects() {
            let enc = encode_object(&model.params, &model.meta, &scene, idx).unwrap();
            let logits = object_logits(&model.params, &enc).unwrap();
            direct.push(argmax(&softmax(logits.data())));
        }
        assert_eq!(at_zero[0].obj_labels, direct);

        assert!(trajectory_probe(&model, &scene, &[0.5, 0.5], &solver).is_err());
        assert!(trajectory_probe(&model, &scene, &[], &solver).is_err());
        assert!(trajectory_probe(&model, &scene, &[-0.1, 0.5], &solver).is_err());
    }

    #[test]
    fn divergent_loss_aborts_with_location() {
        let ds = gen_dataset(&tiny_task(), 4, [1.0, 0.0, 0.0]).unwrap();
        let tc = tiny_train(1);
        let mut st = TrainState::new(model_init(&tiny_task(), &tc).unwrap());
        // Saturating the readout overflows the logits, so the loss itself
        // goes non-finite while every trajectory stays integrable.
        let len = st.model.params.get("obj_head.w").unwrap().numel();
        st.model
            .params
            .set_data("obj_head.w", &vec![1e308; len])
            .unwrap();
        match train(&mut st, &ds, &tc) {
            Err(Error::Diverged { epoch: 0, .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
