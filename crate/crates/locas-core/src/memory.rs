//! Sideway parametric memory: a small FFN running in parallel with each
//! backbone FFN, its output added to the main pathway.
//!
//! Two variants. The MLP memory is a two-layer ReLU net whose slots are
//! written directly from activations and gradients (one slot per memorized
//! token). The GLU memory mirrors the gated FFN structure and is
//! initialized by cloning the backbone's own most-activated FFN rows, with
//! a zero value matrix so that at the initialization point the combined
//! model behaves exactly like the backbone.
//!
//! Orientation: gate/key matrices are d×r (column j = slot j's direction),
//! value matrices are r×d (row j = what slot j emits).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward_seq, forward_seq, ActivationTrace, Attachment, Backbone, FfnWeights,
    GradientTrace, GradWants, SeqCache, SiteLoss,
};
use crate::error::{LocasError, Result};
use crate::tensor::{axpy, global_normalize, l2_norm, scale as scale_slice, Activation, Matrix};
use crate::util::rng_for;

pub const DEFAULT_EPSILON: f64 = 1e-2;

/// Memory initialization strategies. The first three clone backbone FFN
/// rows chosen by activation importance; `Gaussian` draws random
/// directions; `NormalizedActivation` applies the MLP write rule to the
/// GLU key matrix.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum InitStrategy {
    TopK,
    BottomK,
    RandomSelection,
    Gaussian,
    NormalizedActivation,
}

impl InitStrategy {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "topk" => Ok(InitStrategy::TopK),
            "bottomk" => Ok(InitStrategy::BottomK),
            "random-selection" => Ok(InitStrategy::RandomSelection),
            "gaussian" => Ok(InitStrategy::Gaussian),
            "normalized-activation" => Ok(InitStrategy::NormalizedActivation),
            other => Err(LocasError::Format(format!("unknown init strategy '{other}'"))),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            InitStrategy::TopK => "topk",
            InitStrategy::BottomK => "bottomk",
            InitStrategy::RandomSelection => "random-selection",
            InitStrategy::Gaussian => "gaussian",
            InitStrategy::NormalizedActivation => "normalized-activation",
        }
    }
}

// ── MLP memory ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpMemoryLayer {
    /// d×r, column j is the key of slot j.
    pub keys: Matrix,
    /// r×d, row j is the value of slot j.
    pub values: Matrix,
}

impl MlpMemoryLayer {
    pub fn empty(d: usize) -> Self {
        MlpMemoryLayer { keys: Matrix::zeros(d, 0), values: Matrix::zeros(0, d) }
    }

    pub fn rank(&self) -> usize {
        self.keys.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocasMlpMemory {
    pub layers: Vec<MlpMemoryLayer>,
    /// Scale applied to value rows at write time.
    pub epsilon: f64,
}

impl LocasMlpMemory {
    pub fn empty(layers: usize, d: usize, epsilon: f64) -> Self {
        LocasMlpMemory {
            layers: (0..layers).map(|_| MlpMemoryLayer::empty(d)).collect(),
            epsilon,
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.keys.rows() * l.keys.cols() + l.values.rows() * l.values.cols())
            .sum()
    }

    /// Write one slot per layer from the site's activations and the
    /// globally normalized gradient. `acts[i]` and `grads[i]` are layer
    /// i's FFN input activation and hidden-output gradient at one token.
    pub fn append_slot(&mut self, acts: &[Vec<f64>], grads: &[Vec<f64>]) -> Result<()> {
        if acts.len() != self.layers.len() || grads.len() != self.layers.len() {
            return Err(LocasError::Shape("trace layer count != memory layer count".into()));
        }
        let norms: Vec<f64> = acts.iter().map(|a| l2_norm(a)).collect();
        if let Some(i) = norms.iter().position(|&n| n == 0.0) {
            return Err(LocasError::DegenerateActivation(format!(
                "zero activation norm at layer {i}"
            )));
        }
        let normalized = global_normalize(grads)?;
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let key: Vec<f64> = acts[i].iter().map(|v| v / norms[i]).collect();
            let value: Vec<f64> = normalized[i].iter().map(|v| v * self.epsilon).collect();
            layer.keys.push_col(&key);
            layer.values.push_row(&value);
        }
        Ok(())
    }

    pub fn clip_weight_norms(&mut self) {
        for layer in self.layers.iter_mut() {
            clip_columns(&mut layer.keys);
            clip_rows(&mut layer.values);
        }
    }

    /// Mutable parameter slices in update order (keys, values per layer).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(l.keys.data_mut());
            out.push(l.values.data_mut());
        }
        out
    }
}

/// Vᵀ·ReLU(Kᵀ𝒜) for one layer; an empty memory yields the zero vector.
pub fn mlp_forward(layer: &MlpMemoryLayer, a: &[f64]) -> Result<Vec<f64>> {
    if layer.rank() == 0 {
        return Ok(vec![0.0; a.len()]);
    }
    if a.len() != layer.keys.rows() {
        return Err(LocasError::Shape(format!(
            "input dim {} != memory dim {}",
            a.len(),
            layer.keys.rows()
        )));
    }
    let z = layer.keys.matvec_t(a);
    let h: Vec<f64> = z.iter().map(|&v| Activation::Relu.eval(v)).collect();
    Ok(layer.values.matvec_t(&h))
}

// ── GLU memory ───────────────────────────────────────────────────────

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GluMemoryLayer {
    /// d×r gate directions.
    pub gate: Matrix,
    /// d×r key directions.
    pub keys: Matrix,
    /// r×d value rows.
    pub values: Matrix,
    /// Output scale applied in the combined forward.
    pub tau: f64,
    /// Backbone FFN rows this layer cloned (empty for non-cloning inits).
    pub selection: Vec<usize>,
}

impl GluMemoryLayer {
    pub fn rank(&self) -> usize {
        self.keys.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocasGluMemory {
    pub layers: Vec<GluMemoryLayer>,
}

impl LocasGluMemory {
    pub fn rank(&self) -> usize {
        self.layers.first().map(|l| l.rank()).unwrap_or(0)
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.gate.rows() * l.gate.cols()
                    + l.keys.rows() * l.keys.cols()
                    + l.values.rows() * l.values.cols()
            })
            .sum()
    }

    pub fn clip_weight_norms(&mut self) {
        for layer in self.layers.iter_mut() {
            clip_columns(&mut layer.gate);
            clip_columns(&mut layer.keys);
            clip_rows(&mut layer.values);
        }
    }

    /// Mutable parameter slices in update order (gate, keys, values per layer).
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            out.push(l.gate.data_mut());
            out.push(l.keys.data_mut());
            out.push(l.values.data_mut());
        }
        out
    }
}

/// Vᵀ·(σ(Gᵀ𝒜) ⊙ Kᵀ𝒜) for one layer, *not* yet scaled by τ.
pub fn glu_forward(layer: &GluMemoryLayer, a: &[f64]) -> Result<Vec<f64>> {
    if layer.rank() == 0 {
        return Ok(vec![0.0; a.len()]);
    }
    if a.len() != layer.keys.rows() {
        return Err(LocasError::Shape(format!(
            "input dim {} != memory dim {}",
            a.len(),
            layer.keys.rows()
        )));
    }
    let zg = layer.gate.matvec_t(a);
    let zk = layer.keys.matvec_t(a);
    let m: Vec<f64> =
        zg.iter().zip(&zk).map(|(&g, &k)| Activation::Silu.eval(g) * k).collect();
    Ok(layer.values.matvec_t(&m))
}

// ── Norm clipping ────────────────────────────────────────────────────

/// w ← w / max(‖w‖₂, 1): vectors with norm above 1 are pulled back onto
/// the unit sphere, smaller vectors stay untouched.
fn clip_vec(norm: f64) -> Option<f64> {
    if norm > 1.0 {
        Some(1.0 / norm)
    } else {
        None
    }
}

fn clip_rows(m: &mut Matrix) {
    for i in 0..m.rows() {
        let n = l2_norm(m.row(i));
        if let Some(s) = clip_vec(n) {
            scale_slice(m.row_mut(i), s);
        }
    }
}

fn clip_columns(m: &mut Matrix) {
    for j in 0..m.cols() {
        let n: f64 = (0..m.rows()).map(|i| m.get(i, j) * m.get(i, j)).sum::<f64>().sqrt();
        if let Some(s) = clip_vec(n) {
            for i in 0..m.rows() {
                m.set(i, j, m.get(i, j) * s);
            }
        }
    }
}

// ── Activation importance and slot selection ────────────────────────

/// Mean absolute FFN intermediate activation per dimension over a chunk.
pub fn activation_importance(intermediate: &[Vec<f64>]) -> Result<Vec<f64>> {
    if intermediate.is_empty() {
        return Err(LocasError::Shape("activation importance needs at least one token".into()));
    }
    let m = intermediate[0].len();
    let mut alpha = vec![0.0; m];
    for row in intermediate {
        for (a, v) in alpha.iter_mut().zip(row) {
            *a += v.abs();
        }
    }
    let t = intermediate.len() as f64;
    for a in alpha.iter_mut() {
        *a /= t;
    }
    Ok(alpha)
}

fn select_slots(alpha: &[f64], r: usize, strategy: InitStrategy, seed: u64) -> Result<Vec<usize>> {
    let m = alpha.len();
    if r > m {
        return Err(LocasError::Capacity(format!("requested width {r} exceeds backbone width {m}")));
    }
    let mut selected = match strategy {
        InitStrategy::TopK => {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&i, &j| alpha[j].partial_cmp(&alpha[i]).unwrap().then(i.cmp(&j)));
            idx.truncate(r);
            idx
        }
        InitStrategy::BottomK => {
            let mut idx: Vec<usize> = (0..m).collect();
            idx.sort_by(|&i, &j| alpha[i].partial_cmp(&alpha[j]).unwrap().then(i.cmp(&j)));
            idx.truncate(r);
            idx
        }
        InitStrategy::RandomSelection => {
            let mut rng = rng_for(seed, 0x73656c656374);
            rand::seq::index::sample(&mut rng, m, r).into_vec()
        }
        other => {
            return Err(LocasError::Shape(format!(
                "{} is not a selection strategy",
                other.label()
            )))
        }
    };
    selected.sort_unstable();
    Ok(selected)
}

/// τ = (1/r)·(mean row norm of the backbone down-projection).
pub fn output_scale(down: &Matrix, r: usize) -> Result<f64> {
    if r == 0 {
        return Err(LocasError::Capacity("output scale undefined for width 0".into()));
    }
    let m = down.rows();
    let mean: f64 = (0..m).map(|j| l2_norm(down.row(j))).sum::<f64>() / m as f64;
    Ok(mean / r as f64)
}

/// Build one GLU memory layer from the backbone FFN weights at that layer.
///
/// Cloning strategies copy the selected rows of the backbone key/gate
/// matrices (row-normalized) into the memory's key/gate columns and zero
/// the value matrix. The Gaussian baseline draws directions from
/// N(0, 1/d) instead. An MLP backbone has no gate matrix; its key rows
/// stand in for both.
pub fn glu_init_from_backbone(
    ffn: &FfnWeights,
    alpha: &[f64],
    r: usize,
    strategy: InitStrategy,
    seed: u64,
) -> Result<GluMemoryLayer> {
    let (gate_src, key_src) = match ffn {
        FfnWeights::Glu { gate, key, .. } => (gate, key),
        FfnWeights::Mlp { key, .. } => (key, key),
    };
    let d = key_src.cols();
    let m = key_src.rows();
    if alpha.len() != m {
        return Err(LocasError::Shape("importance vector length != backbone width".into()));
    }
    let tau = output_scale(ffn.down_matrix(), r)?;
    match strategy {
        InitStrategy::TopK | InitStrategy::BottomK | InitStrategy::RandomSelection => {
            let selection = select_slots(alpha, r, strategy, seed)?;
            let mut gate = Matrix::zeros(d, r);
            let mut keys = Matrix::zeros(d, r);
            for (j, &src) in selection.iter().enumerate() {
                let mut grow = gate_src.row(src).to_vec();
                let mut krow = key_src.row(src).to_vec();
                let gn = l2_norm(&grow);
                let kn = l2_norm(&krow);
                if gn > 0.0 {
                    scale_slice(&mut grow, 1.0 / gn);
                }
                if kn > 0.0 {
                    scale_slice(&mut krow, 1.0 / kn);
                }
                for i in 0..d {
                    gate.set(i, j, grow[i]);
                    keys.set(i, j, krow[i]);
                }
            }
            Ok(GluMemoryLayer { gate, keys, values: Matrix::zeros(r, d), tau, selection })
        }
        InitStrategy::Gaussian => {
            if r > m {
                return Err(LocasError::Capacity(format!(
                    "requested width {r} exceeds backbone width {m}"
                )));
            }
            let mut rng = rng_for(seed, 0x676175737369616e);
            let std = (1.0 / d as f64).sqrt();
            let mut gate = Matrix::zeros(d, r);
            let mut keys = Matrix::zeros(d, r);
            for mat in [&mut gate, &mut keys] {
                for v in mat.data_mut().iter_mut() {
                    *v = gauss(&mut rng) * std;
                }
            }
            Ok(GluMemoryLayer { gate, keys, values: Matrix::zeros(r, d), tau, selection: Vec::new() })
        }
        InitStrategy::NormalizedActivation => Err(LocasError::Shape(
            "normalized-activation init needs activation/gradient traces".into(),
        )),
    }
}

fn gauss<R: Rng>(rng: &mut R) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Initialize a whole GLU memory from a forward (and, for the
/// normalized-activation strategy, backward) trace over an init chunk.
pub fn init_glu_memory(
    bb: &Backbone,
    trace: &ActivationTrace,
    grads: Option<&GradientTrace>,
    r: usize,
    strategy: InitStrategy,
    seed: u64,
    epsilon: f64,
) -> Result<LocasGluMemory> {
    if strategy == InitStrategy::NormalizedActivation {
        let grads = grads.ok_or_else(|| {
            LocasError::Shape("normalized-activation init needs a gradient trace".into())
        })?;
        return init_glu_normalized_activation(bb, trace, grads, r, epsilon);
    }
    let mut layers = Vec::with_capacity(bb.cfg.layers);
    for li in 0..bb.cfg.layers {
        let alpha = activation_importance(&trace.ffn_intermediate[li])?;
        let layer_seed = crate::util::splitmix64(seed ^ (li as u64).wrapping_add(1));
        layers.push(glu_init_from_backbone(
            &bb.weights.layers[li].ffn,
            &alpha,
            r,
            strategy,
            layer_seed,
        )?);
    }
    Ok(LocasGluMemory { layers })
}

/// Ablation baseline: keys from normalized activations of the first r
/// usable sites, value rows from the globally normalized gradients scaled
/// by epsilon (the MLP write rule applied to the GLU structure). The gate
/// matrix reuses the keys so the gate opens where the key fires.
fn init_glu_normalized_activation(
    bb: &Backbone,
    trace: &ActivationTrace,
    grads: &GradientTrace,
    r: usize,
    epsilon: f64,
) -> Result<LocasGluMemory> {
    let d = bb.cfg.d_model;
    let positions = trace.positions();
    let mut sites = Vec::with_capacity(r);
    for t in 0..positions {
        if sites.len() == r {
            break;
        }
        let acts: Vec<&Vec<f64>> = trace.ffn_inputs.iter().map(|l| &l[t]).collect();
        if acts.iter().any(|a| l2_norm(a) == 0.0) {
            continue;
        }
        let g = grads.at_position(t);
        if global_normalize(&g).is_err() {
            continue;
        }
        sites.push(t);
    }
    if sites.len() < r {
        return Err(LocasError::Capacity(format!(
            "only {} usable sites for width {r}",
            sites.len()
        )));
    }
    let mut layers = Vec::with_capacity(bb.cfg.layers);
    for li in 0..bb.cfg.layers {
        let tau = output_scale(bb.weights.layers[li].ffn.down_matrix(), r)?;
        let mut keys = Matrix::zeros(d, r);
        let mut values = Matrix::zeros(r, d);
        for (j, &t) in sites.iter().enumerate() {
            let a = &trace.ffn_inputs[li][t];
            let an = l2_norm(a);
            for i in 0..d {
                keys.set(i, j, a[i] / an);
            }
            let g = global_normalize(&grads.at_position(t))?;
            for i in 0..d {
                values.set(j, i, epsilon * g[li][i]);
            }
        }
        layers.push(GluMemoryLayer {
            gate: keys.clone(),
            keys,
            values,
            tau,
            selection: Vec::new(),
        });
    }
    Ok(LocasGluMemory { layers })
}

// ── Combined forward and gradient updates ────────────────────────────

/// Forward with memory attached: per layer the memory output (scaled by τ
/// for the GLU variant) is added to the FFN output before the residual.
pub fn combined_forward(
    bb: &Backbone,
    att: &Attachment,
    tokens: &[usize],
) -> Result<(Vec<Vec<f64>>, ActivationTrace)> {
    let cache = forward_seq(bb, att, tokens)?;
    let trace = cache.activation_trace();
    Ok((cache.logits, trace))
}

/// Mutable handle over either memory variant.
pub enum MemoryRefMut<'a> {
    Mlp(&'a mut LocasMlpMemory),
    Glu(&'a mut LocasGluMemory),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MemOptimizer {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl MemOptimizer {
    pub fn adam_default() -> Self {
        MemOptimizer::Adam { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment buffers for Adam, owned by the caller so state can
/// persist across chunks. Reset automatically if parameter shapes change.
#[derive(Clone, Debug, Default)]
pub struct MemOptState {
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    step: usize,
}

impl MemOptState {
    /// Shared Adam kernel used by both the memory and adapter update loops.
    pub(crate) fn adam_apply(
        &mut self,
        params: &mut [&mut [f64]],
        grads: &[Vec<f64>],
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
    ) {
        let shapes_match = self.m.len() == grads.len()
            && self.m.iter().zip(grads).all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            self.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.v = grads.iter().map(|g| vec![0.0; g.len()]).collect();
            self.step = 0;
        }
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - beta1.powi(t);
        let bc2 = 1.0 - beta2.powi(t);
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for i in 0..g.len() {
                m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
                v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
                p[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + eps);
            }
        }
    }
}

/// Gradient-descent updates of the memory parameters on the next-token
/// objective over `tokens[score_from..]`. The update gradient is taken on
/// the summed log-likelihood of the span (so the paper-scale learning
/// rates bite under plain SGD); the returned history reports the mean NLL
/// observed before each step. Backbone weights are never touched; weight
/// norms are clipped after every step.
pub fn memory_update_chunk(
    bb: &Backbone,
    mem: &mut MemoryRefMut,
    tokens: &[usize],
    score_from: usize,
    lr: f64,
    steps: usize,
    opt: MemOptimizer,
    mut state: Option<&mut MemOptState>,
) -> Result<Vec<f64>> {
    if steps == 0 {
        return Err(LocasError::Shape("steps must be >= 1".into()));
    }
    if score_from == 0 || score_from >= tokens.len() {
        return Err(LocasError::Shape("score_from must be inside the token span".into()));
    }
    let sites: Vec<SiteLoss> = (score_from - 1..tokens.len() - 1)
        .map(|p| SiteLoss { pos: p, target: tokens[p + 1] })
        .collect();
    let mut history = Vec::with_capacity(steps);
    for step in 0..steps {
        let (loss, grads) = {
            let att = match mem {
                MemoryRefMut::Mlp(m) => Attachment::Mlp(m),
                MemoryRefMut::Glu(m) => Attachment::Glu(m),
            };
            let cache = forward_seq(bb, &att, tokens)?;
            let loss = mean_site_loss(&cache, &sites);
            let grads = backward_seq(
                bb,
                &att,
                &cache,
                &sites,
                1.0,
                GradWants { memory: true, ..Default::default() },
            )?;
            (loss, grads)
        };
        if !loss.is_finite() {
            return Err(LocasError::Numerical(format!("non-finite loss at step {step}")));
        }
        history.push(loss);
        let mgrads = grads.memory.expect("memory gradients requested");
        let grad_slices: Vec<Vec<f64>> = {
            let mut out = Vec::new();
            for l in &mgrads.layers {
                if let Some(g) = &l.gate {
                    out.push(g.data().to_vec());
                }
                out.push(l.keys.data().to_vec());
                out.push(l.values.data().to_vec());
            }
            out
        };
        let mut params: Vec<&mut [f64]> = match mem {
            MemoryRefMut::Mlp(m) => m.param_slices_mut(),
            MemoryRefMut::Glu(m) => m.param_slices_mut(),
        };
        debug_assert_eq!(params.len(), grad_slices.len());
        match opt {
            MemOptimizer::Sgd => {
                for (p, g) in params.iter_mut().zip(&grad_slices) {
                    axpy(p, -lr, g);
                }
            }
            MemOptimizer::Adam { beta1, beta2, eps } => {
                let st = state.as_deref_mut().ok_or_else(|| {
                    LocasError::Shape("Adam updates need caller-owned optimizer state".into())
                })?;
                st.adam_apply(&mut params, &grad_slices, lr, beta1, beta2, eps);
            }
        }
        match mem {
            MemoryRefMut::Mlp(m) => m.clip_weight_norms(),
            MemoryRefMut::Glu(m) => m.clip_weight_norms(),
        }
    }
    Ok(history)
}

/// Plain-SGD memory update over a whole chunk (all positions scored).
pub fn memory_grad_step(
    bb: &Backbone,
    mem: &mut MemoryRefMut,
    tokens: &[usize],
    lr: f64,
    steps: usize,
) -> Result<Vec<f64>> {
    memory_update_chunk(bb, mem, tokens, 1, lr, steps, MemOptimizer::Sgd, None)
}

pub(crate) fn mean_site_loss(cache: &SeqCache, sites: &[SiteLoss]) -> f64 {
    let total: f64 =
        sites.iter().map(|s| crate::backbone::nll(&cache.logits[s.pos], s.target)).sum();
    total / sites.len() as f64
}
