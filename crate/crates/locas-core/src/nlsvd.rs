//! Non-linear SVD compression of a two-layer ReLU memory, plus the
//! expansion–compression cycle driver.
//!
//! The activation pattern of a ReLU FFN is dominated by the key
//! directions and the product of the per-slot key/value norms. Key
//! columns are normalized (norms αᵢ), value rows are normalized (norms
//! βᵢ), and each normalized key is weighted by sᵢ = αᵢβᵢ. An
//! eigendecomposition of the weighted key Gram matrix yields orthonormal
//! probe directions; feeding each probe through the original FFN
//! reconstructs the reduced value matrix, so the reduced net reproduces
//! the original output exactly at every probe.
//!
//! Everything here runs in double precision: the EVD step is the
//! numerically delicate part of the pipeline.

use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, FfnKind};
use crate::error::{LocasError, Result};
use crate::memory::LocasMlpMemory;
use crate::tensor::{l2_norm, symmetric_evd, Activation, Matrix};

pub const DEFAULT_DROP_THRESHOLD: f64 = 1e-8;

/// Diagnostics of one compression call.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CompressionReport {
    /// Width of the input memory (number of slots before compression).
    pub input_rank: usize,
    /// Requested width after compression.
    pub target_rank: usize,
    /// Width actually kept after the drop threshold.
    pub retained_rank: usize,
    /// Composed scalars sᵢ = αᵢ·βᵢ per input slot.
    pub composed_scalars: Vec<f64>,
    /// Largest `target_rank` eigenvalues of the weighted key Gram matrix.
    pub top_eigenvalues: Vec<f64>,
    /// Eigenvalue mass outside the retained directions (absolute).
    pub discarded_mass: f64,
    /// `discarded_mass` as a fraction of the total mass, in [0, 1].
    pub discarded_mass_fraction: f64,
    /// Max elementwise deviation between reduced and original FFN over
    /// the retained probes.
    pub probe_max_error: f64,
    /// Normalization reading applied to the inputs.
    pub normalization: String,
}

impl CompressionReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }
}

/// Evaluate the two-layer ReLU FFN (keys d×m, values m×d) at one input.
pub fn relu_ffn_eval(keys: &Matrix, values: &Matrix, x: &[f64]) -> Vec<f64> {
    let z = keys.matvec_t(x);
    let h: Vec<f64> = z.iter().map(|&v| Activation::Relu.eval(v)).collect();
    values.matvec_t(&h)
}

/// Compress (keys, values) to at most `n` slots.
///
/// `keys` is d×m with slot keys in columns, `values` is m×d with slot
/// values in rows. Probe directions whose singular value falls below
/// `drop_threshold` are discarded. Returns the reduced pair in the same
/// orientation (d×n', n'×d) plus a report.
pub fn nl_svd_compress(
    keys: &Matrix,
    values: &Matrix,
    n: usize,
    drop_threshold: f64,
) -> Result<(Matrix, Matrix, CompressionReport)> {
    let d = keys.rows();
    let m = keys.cols();
    if values.rows() != m || values.cols() != d {
        return Err(LocasError::Shape(format!(
            "values must be {m}x{d}, got {}x{}",
            values.rows(),
            values.cols()
        )));
    }
    if n > m {
        return Err(LocasError::Capacity(format!("target rank {n} exceeds input rank {m}")));
    }
    if n > d {
        return Err(LocasError::Capacity(format!("target rank {n} exceeds key dimension {d}")));
    }

    // Composed scalars from column norms of K and row norms of V.
    let mut alphas = vec![0.0; m];
    for j in 0..m {
        alphas[j] = (0..d).map(|i| keys.get(i, j) * keys.get(i, j)).sum::<f64>().sqrt();
    }
    let betas: Vec<f64> = (0..m).map(|j| l2_norm(values.row(j))).collect();
    let scalars: Vec<f64> = alphas.iter().zip(&betas).map(|(a, b)| a * b).collect();

    // Weighted key matrix: column i is sᵢ · (kᵢ / αᵢ).
    let mut weighted = Matrix::zeros(d, m);
    for j in 0..m {
        if alphas[j] > 0.0 {
            let w = scalars[j] / alphas[j];
            for i in 0..d {
                weighted.set(i, j, keys.get(i, j) * w);
            }
        }
    }
    let gram = weighted.gram_of_rows();
    let trace: f64 = (0..d).map(|i| gram.get(i, i)).sum();
    let (u, eigvals) = symmetric_evd(&gram, 1e-8)?;

    let top: Vec<f64> = eigvals.iter().take(n).cloned().collect();
    let retained: Vec<usize> = (0..n)
        .filter(|&j| eigvals[j].max(0.0).sqrt() >= drop_threshold)
        .collect();
    let n_ret = retained.len();

    let mut red_keys = Matrix::zeros(d, n_ret);
    for (jj, &j) in retained.iter().enumerate() {
        for i in 0..d {
            red_keys.set(i, jj, u.get(i, j));
        }
    }
    let mut red_values = Matrix::zeros(n_ret, d);
    for (jj, &j) in retained.iter().enumerate() {
        let probe = u.col(j);
        let out = relu_ffn_eval(keys, values, &probe);
        for i in 0..d {
            red_values.set(jj, i, out[i]);
        }
    }

    let retained_mass: f64 = top.iter().sum();
    let discarded = (trace - retained_mass).max(0.0);
    let fraction = if trace > 0.0 { (discarded / trace).clamp(0.0, 1.0) } else { 0.0 };
    let probe_err = probe_equivalence_check(keys, values, &red_keys, &red_values);
    let report = CompressionReport {
        input_rank: m,
        target_rank: n,
        retained_rank: n_ret,
        composed_scalars: scalars,
        top_eigenvalues: top,
        discarded_mass: discarded,
        discarded_mass_fraction: fraction,
        probe_max_error: probe_err,
        normalization: "key-columns/value-rows".to_string(),
    };
    Ok((red_keys, red_values, report))
}

/// Max elementwise deviation between the original and reduced FFN over
/// the reduced net's probe directions (columns of the reduced key
/// matrix). An empty reduced net yields 0 over the empty set.
pub fn probe_equivalence_check(
    orig_keys: &Matrix,
    orig_values: &Matrix,
    red_keys: &Matrix,
    red_values: &Matrix,
) -> f64 {
    let mut max_err: f64 = 0.0;
    for j in 0..red_keys.cols() {
        let probe = red_keys.col(j);
        let a = relu_ffn_eval(orig_keys, orig_values, &probe);
        let b = relu_ffn_eval(red_keys, red_values, &probe);
        for (x, y) in a.iter().zip(&b) {
            max_err = max_err.max((x - y).abs());
        }
    }
    max_err
}

// ── Expansion–compression cycle ──────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Cadence {
    PerToken,
    PerSpan,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct CyclePolicy {
    /// Tokens accumulated per expansion span (per-span cadence).
    pub n_capacity: usize,
    /// Post-compression width.
    pub n_target: usize,
    pub cadence: Cadence,
}

impl CyclePolicy {
    pub fn validate(&self) -> Result<()> {
        if self.n_target >= self.n_capacity {
            return Err(LocasError::Shape(format!(
                "n_target {} must be smaller than n_capacity {}",
                self.n_target, self.n_capacity
            )));
        }
        if self.n_capacity == 0 {
            return Err(LocasError::Shape("n_capacity must be positive".into()));
        }
        Ok(())
    }
}

/// One compression event in the cycle log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CycleEvent {
    /// Number of stream tokens processed when the compression fired.
    pub token_index: usize,
    pub layer: usize,
    pub r_before: usize,
    pub r_after: usize,
    pub report: CompressionReport,
}

/// Stream `tokens` through the backbone, appending one memory slot per
/// token (from that token's activation and gradient) and compressing on
/// the policy's cadence. Memory grows by exactly one slot per layer per
/// token between compressions.
///
/// The cycle maintains a fixed-width refreshed memory, so compression
/// here keeps all `n_target` directions (no drop threshold): correlated
/// activation keys routinely produce near-zero trailing singular values,
/// and dropping them would let the width drift below the target.
pub fn run_expansion_compression_cycle(
    bb: &Backbone,
    mem: &mut LocasMlpMemory,
    tokens: &[usize],
    policy: &CyclePolicy,
) -> Result<Vec<CycleEvent>> {
    if bb.cfg.ffn_kind != FfnKind::Mlp {
        return Err(LocasError::Shape(
            "expansion-compression cycle requires an MLP-FFN backbone".into(),
        ));
    }
    policy.validate()?;
    if mem.layers.len() != bb.cfg.layers {
        return Err(LocasError::Shape("memory layer count != model layers".into()));
    }
    let mut events = Vec::new();
    if tokens.is_empty() {
        return Ok(events);
    }

    let mut stream = crate::backbone::StreamState::new(bb);
    // BOS prefix so every stream token is predicted at some site.
    let mut prev =
        stream.push(bb, &crate::backbone::Attachment::Mlp(mem), crate::backbone::BOS_TOKEN)?;
    for (idx, &tok) in tokens.iter().enumerate() {
        let processed = idx + 1;
        {
            let att = crate::backbone::Attachment::Mlp(mem);
            let grads = stream.column_grads(bb, &att, &prev, tok);
            let acts = prev.ffn_inputs();
            mem.append_slot(&acts, &grads)?;
        }
        let compress_now = match policy.cadence {
            Cadence::PerToken => mem.layers.iter().any(|l| l.rank() > policy.n_target),
            Cadence::PerSpan => processed % policy.n_capacity == 0,
        };
        if compress_now {
            for li in 0..mem.layers.len() {
                let r_before = mem.layers[li].rank();
                let n = policy.n_target.min(r_before);
                if matches!(policy.cadence, Cadence::PerToken) && r_before <= policy.n_target {
                    continue;
                }
                let (keys, values, report) = nl_svd_compress(
                    &mem.layers[li].keys,
                    &mem.layers[li].values,
                    n,
                    0.0,
                )?;
                let r_after = keys.cols();
                mem.layers[li].keys = keys;
                mem.layers[li].values = values;
                events.push(CycleEvent { token_index: processed, layer: li, r_before, r_after, report });
            }
        }
        prev = stream.push(bb, &crate::backbone::Attachment::Mlp(mem), tok)?;
    }
    Ok(events)
}
