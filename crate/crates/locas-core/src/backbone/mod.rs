//! Tiny decoder-only transformer with a swappable FFN variant.
//!
//! Pre-norm RMS normalization, rotary position encoding, byte-level
//! tokenizer, no bias terms anywhere. The FFN is either a two-layer ReLU
//! MLP or a SiLU-gated GLU. Forward passes capture the per-layer FFN input
//! activations; a streaming engine produces per-token gradients of each
//! position's own log-likelihood at the layer hidden outputs.
//!
//! Weight orientation: attention projections are d×d; FFN matrices are
//! stored m×d with row j holding slot j (key/gate rows fire on the input,
//! value/down rows are what slot j emits).

pub mod engine;
pub mod stream;
pub mod train;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{LocasError, Result};
use crate::tensor::Matrix;
use crate::util::rng_for;

pub use engine::{backward_seq, forward_seq, Attachment, GradWants, SeqCache, SeqGrads, SiteLoss};
pub use stream::{hidden_gradient_trace, StepRecord, StreamState};
pub use train::{train_tiny_backbone, TrainOutcome};

/// Byte-level vocabulary: 256 byte values plus a BOS marker.
pub const BYTE_VOCAB: usize = 256;
pub const BOS_TOKEN: usize = 256;
pub const DEFAULT_VOCAB: usize = 257;

pub(crate) const RMS_EPS: f64 = 1e-6;
pub(crate) const ROPE_BASE: f64 = 10000.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FfnKind {
    Mlp,
    Glu,
}

/// Architecture hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_ff: usize,
    pub heads: usize,
    pub vocab: usize,
    pub ffn_kind: FfnKind,
    pub max_seq: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 1 {
            return Err(LocasError::Shape("layers must be >= 1".into()));
        }
        if self.d_ff < 1 {
            return Err(LocasError::Shape("d_ff must be >= 1".into()));
        }
        if self.heads == 0 || self.d_model % self.heads != 0 {
            return Err(LocasError::Shape(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.heads
    }

    /// Desk-scale MLP-FFN configuration.
    pub fn desk_mlp() -> Self {
        ModelConfig {
            layers: 2,
            d_model: 64,
            d_ff: 256,
            heads: 4,
            vocab: DEFAULT_VOCAB,
            ffn_kind: FfnKind::Mlp,
            max_seq: 512,
        }
    }

    /// Desk-scale GLU-FFN configuration.
    pub fn desk_glu() -> Self {
        ModelConfig { d_ff: 192, ffn_kind: FfnKind::Glu, ..ModelConfig::desk_mlp() }
    }
}

/// FFN weights for one layer. All matrices are m×d.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum FfnWeights {
    /// Two-layer ReLU MLP: row j of `key` decides when slot j fires,
    /// row j of `value` is what it emits.
    Mlp { key: Matrix, value: Matrix },
    /// SiLU-gated GLU: `down` rows are the per-slot output vectors.
    Glu { gate: Matrix, key: Matrix, down: Matrix },
}

impl FfnWeights {
    pub fn zeros_like(&self) -> FfnWeights {
        match self {
            FfnWeights::Mlp { key, value } => FfnWeights::Mlp {
                key: Matrix::zeros(key.rows(), key.cols()),
                value: Matrix::zeros(value.rows(), value.cols()),
            },
            FfnWeights::Glu { gate, key, down } => FfnWeights::Glu {
                gate: Matrix::zeros(gate.rows(), gate.cols()),
                key: Matrix::zeros(key.rows(), key.cols()),
                down: Matrix::zeros(down.rows(), down.cols()),
            },
        }
    }

    /// The m×d second-layer matrix (value/down), whose average row norm
    /// calibrates the memory output scale.
    pub fn down_matrix(&self) -> &Matrix {
        match self {
            FfnWeights::Mlp { value, .. } => value,
            FfnWeights::Glu { down, .. } => down,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
    pub norm_attn: Vec<f64>,
    pub norm_ffn: Vec<f64>,
    pub ffn: FfnWeights,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BackboneWeights {
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    pub norm_final: Vec<f64>,
    pub head: Matrix,
}

impl BackboneWeights {
    pub fn zeros_like(&self) -> BackboneWeights {
        BackboneWeights {
            embed: Matrix::zeros(self.embed.rows(), self.embed.cols()),
            layers: self
                .layers
                .iter()
                .map(|l| LayerWeights {
                    wq: Matrix::zeros(l.wq.rows(), l.wq.cols()),
                    wk: Matrix::zeros(l.wk.rows(), l.wk.cols()),
                    wv: Matrix::zeros(l.wv.rows(), l.wv.cols()),
                    wo: Matrix::zeros(l.wo.rows(), l.wo.cols()),
                    norm_attn: vec![0.0; l.norm_attn.len()],
                    norm_ffn: vec![0.0; l.norm_ffn.len()],
                    ffn: l.ffn.zeros_like(),
                })
                .collect(),
            norm_final: vec![0.0; self.norm_final.len()],
            head: Matrix::zeros(self.head.rows(), self.head.cols()),
        }
    }

    /// Mutable views of every parameter slice in a fixed declaration order.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        out.push(self.embed.data_mut());
        for l in self.layers.iter_mut() {
            out.push(l.wq.data_mut());
            out.push(l.wk.data_mut());
            out.push(l.wv.data_mut());
            out.push(l.wo.data_mut());
            out.push(&mut l.norm_attn);
            out.push(&mut l.norm_ffn);
            match &mut l.ffn {
                FfnWeights::Mlp { key, value } => {
                    out.push(key.data_mut());
                    out.push(value.data_mut());
                }
                FfnWeights::Glu { gate, key, down } => {
                    out.push(gate.data_mut());
                    out.push(key.data_mut());
                    out.push(down.data_mut());
                }
            }
        }
        out.push(&mut self.norm_final);
        out.push(self.head.data_mut());
        out
    }

    pub fn num_params(&self) -> usize {
        let mut clone = self.clone();
        clone.param_slices_mut().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        let mut clone = self.clone();
        clone.param_slices_mut().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

/// A configured model: hyperparameters plus dense weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Backbone {
    pub cfg: ModelConfig,
    pub weights: BackboneWeights,
}

impl Backbone {
    /// Random initialization. Output-side projections are scaled down by
    /// 1/sqrt(2·layers) to keep the residual stream tame at init.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = rng_for(seed, 0x6261636b626f6e65); // "backbone"
        let d = cfg.d_model;
        let m = cfg.d_ff;
        let std = 0.02;
        let out_std = std / ((2 * cfg.layers) as f64).sqrt();
        let mut gauss = |rows: usize, cols: usize, sd: f64| -> Matrix {
            let mut mat = Matrix::zeros(rows, cols);
            for v in mat.data_mut().iter_mut() {
                *v = gauss_sample(&mut rng) * sd;
            }
            mat
        };
        let layers = (0..cfg.layers)
            .map(|_| LayerWeights {
                wq: gauss(d, d, std),
                wk: gauss(d, d, std),
                wv: gauss(d, d, std),
                wo: gauss(d, d, out_std),
                norm_attn: vec![1.0; d],
                norm_ffn: vec![1.0; d],
                ffn: match cfg.ffn_kind {
                    FfnKind::Mlp => {
                        FfnWeights::Mlp { key: gauss(m, d, std), value: gauss(m, d, out_std) }
                    }
                    FfnKind::Glu => FfnWeights::Glu {
                        gate: gauss(m, d, std),
                        key: gauss(m, d, std),
                        down: gauss(m, d, out_std),
                    },
                },
            })
            .collect();
        let weights = BackboneWeights {
            embed: gauss(cfg.vocab, d, std),
            layers,
            norm_final: vec![1.0; d],
            head: gauss(cfg.vocab, d, std),
        };
        Ok(Backbone { cfg, weights })
    }
}

fn gauss_sample<R: Rng>(rng: &mut R) -> f64 {
    // Box-Muller; consumes two uniforms per sample.
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Per-layer, per-position FFN input activations captured during forward.
/// `ffn_intermediate` holds the m-dimensional intermediate (post-gate for
/// GLU, post-ReLU for MLP) used for activation-importance statistics.
#[derive(Clone, Debug)]
pub struct ActivationTrace {
    pub ffn_inputs: Vec<Vec<Vec<f64>>>,
    pub ffn_intermediate: Vec<Vec<Vec<f64>>>,
}

impl ActivationTrace {
    pub fn layers(&self) -> usize {
        self.ffn_inputs.len()
    }

    pub fn positions(&self) -> usize {
        self.ffn_inputs.first().map(|l| l.len()).unwrap_or(0)
    }
}

/// Per-layer, per-position gradient of each position's own next-token
/// log-likelihood, taken at the layer's FFN-block output. The final
/// position of a sequence has no target and carries a zero vector.
#[derive(Clone, Debug)]
pub struct GradientTrace {
    pub hidden: Vec<Vec<Vec<f64>>>,
}

impl GradientTrace {
    /// Gradient vectors of all layers at one position.
    pub fn at_position(&self, pos: usize) -> Vec<Vec<f64>> {
        self.hidden.iter().map(|layer| layer[pos].clone()).collect()
    }
}

/// Forward pass capturing logits and the activation trace.
pub fn forward_with_trace(
    bb: &Backbone,
    tokens: &[usize],
) -> Result<(Vec<Vec<f64>>, ActivationTrace)> {
    let cache = forward_seq(bb, &Attachment::None, tokens)?;
    let trace = cache.activation_trace();
    Ok((cache.logits, trace))
}

/// Mean next-token negative log-likelihood in nats. `logits[i]` is scored
/// against `targets[i]`; perplexity is `exp` of the result.
pub fn lm_loss(logits: &[Vec<f64>], targets: &[usize]) -> f64 {
    assert_eq!(logits.len(), targets.len(), "logits/targets length mismatch");
    if targets.is_empty() {
        return 0.0;
    }
    let total: f64 = logits.iter().zip(targets).map(|(l, &t)| nll(l, t)).sum();
    total / targets.len() as f64
}

/// −log softmax(logits)[target] for a single position.
pub fn nll(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
    lse - logits[target]
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let ex: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = ex.iter().sum();
    ex.iter().map(|v| v / sum).collect()
}
