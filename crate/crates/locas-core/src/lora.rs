//! Minimal low-rank adapter baseline: rank-r additive factors B·A on the
//! attention projections (Q, K, V, O) and the FFN projections, B
//! zero-initialized so the attached model starts behaviorally identical
//! to the backbone. A simplified comparison baseline, not a full
//! fine-tuning framework.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    backward_seq, forward_seq, Attachment, Backbone, FfnKind, GradWants, SiteLoss,
};
use crate::error::{LocasError, Result};
use crate::memory::{mean_site_loss, MemOptimizer, MemOptState};
use crate::tensor::{axpy, Matrix};
use crate::util::rng_for;

/// One adapted projection: y = Wx + b·(a·x), a: r×in, b: out×r.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraPair {
    pub a: Matrix,
    pub b: Matrix,
}

impl LoraPair {
    fn init(rank: usize, d_in: usize, d_out: usize, rng: &mut rand_chacha::ChaCha12Rng) -> Self {
        use rand::Rng;
        let std = (1.0 / d_in as f64).sqrt();
        let mut a = Matrix::zeros(rank, d_in);
        for v in a.data_mut().iter_mut() {
            let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            let u2: f64 = rng.gen_range(0.0..1.0);
            *v = std * (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        }
        LoraPair { a, b: Matrix::zeros(d_out, rank) }
    }

    fn zeros_like(&self) -> LoraPair {
        LoraPair {
            a: Matrix::zeros(self.a.rows(), self.a.cols()),
            b: Matrix::zeros(self.b.rows(), self.b.cols()),
        }
    }

    fn num_params(&self) -> usize {
        self.a.rows() * self.a.cols() + self.b.rows() * self.b.cols()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraLayer {
    pub q: LoraPair,
    pub k: LoraPair,
    pub v: LoraPair,
    pub o: LoraPair,
    /// FFN pairs in forward order: [gate, key, down] for GLU backbones,
    /// [key, value] for MLP backbones.
    pub ffn: Vec<LoraPair>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LoraAdapter {
    pub rank: usize,
    pub layers: Vec<LoraLayer>,
}

impl LoraAdapter {
    pub fn zeros_like(&self) -> LoraAdapter {
        LoraAdapter {
            rank: self.rank,
            layers: self
                .layers
                .iter()
                .map(|l| LoraLayer {
                    q: l.q.zeros_like(),
                    k: l.k.zeros_like(),
                    v: l.v.zeros_like(),
                    o: l.o.zeros_like(),
                    ffn: l.ffn.iter().map(|p| p.zeros_like()).collect(),
                })
                .collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| {
                l.q.num_params()
                    + l.k.num_params()
                    + l.v.num_params()
                    + l.o.num_params()
                    + l.ffn.iter().map(|p| p.num_params()).sum::<usize>()
            })
            .sum()
    }

    pub(crate) fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for l in self.layers.iter_mut() {
            for p in [&mut l.q, &mut l.k, &mut l.v, &mut l.o] {
                out.push(p.a.data_mut());
                out.push(p.b.data_mut());
            }
            for p in l.ffn.iter_mut() {
                out.push(p.a.data_mut());
                out.push(p.b.data_mut());
            }
        }
        out
    }
}

/// Attach a rank-r adapter to every linear projection of the backbone.
pub fn lowrank_baseline_attach(bb: &Backbone, rank: usize, seed: u64) -> Result<LoraAdapter> {
    if rank == 0 {
        return Err(LocasError::Shape("adapter rank must be >= 1".into()));
    }
    let d = bb.cfg.d_model;
    let m = bb.cfg.d_ff;
    let mut rng = rng_for(seed, 0x6c6f7261);
    let layers = (0..bb.cfg.layers)
        .map(|_| LoraLayer {
            q: LoraPair::init(rank, d, d, &mut rng),
            k: LoraPair::init(rank, d, d, &mut rng),
            v: LoraPair::init(rank, d, d, &mut rng),
            o: LoraPair::init(rank, d, d, &mut rng),
            ffn: match bb.cfg.ffn_kind {
                FfnKind::Glu => vec![
                    LoraPair::init(rank, d, m, &mut rng),
                    LoraPair::init(rank, d, m, &mut rng),
                    LoraPair::init(rank, m, d, &mut rng),
                ],
                FfnKind::Mlp => vec![
                    LoraPair::init(rank, d, m, &mut rng),
                    LoraPair::init(rank, m, d, &mut rng),
                ],
            },
        })
        .collect();
    Ok(LoraAdapter { rank, layers })
}

/// Gradient updates of the adapter on tokens[score_from..], mirroring the
/// memory update loop (same chunk protocol and summed-log-likelihood
/// gradient, no norm clipping).
pub fn lora_update_chunk(
    bb: &Backbone,
    adapter: &mut LoraAdapter,
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
            let att = Attachment::Lora(adapter);
            let cache = forward_seq(bb, &att, tokens)?;
            let loss = mean_site_loss(&cache, &sites);
            let grads = backward_seq(
                bb,
                &att,
                &cache,
                &sites,
                1.0,
                GradWants { lora: true, ..Default::default() },
            )?;
            (loss, grads)
        };
        if !loss.is_finite() {
            return Err(LocasError::Numerical(format!("non-finite loss at step {step}")));
        }
        history.push(loss);
        let mut lgrads = grads.lora.expect("adapter gradients requested");
        let grad_slices: Vec<Vec<f64>> =
            lgrads.param_slices_mut().iter().map(|s| s.to_vec()).collect();
        let mut params = adapter.param_slices_mut();
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
    }
    Ok(history)
}
