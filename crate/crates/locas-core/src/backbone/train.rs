//! Desk-scale backbone trainer: Adam with warmup and cosine decay over
//! random windows of a byte corpus.

use rand::Rng;

use crate::error::{LocasError, Result};
use crate::tensor::axpy;
use crate::util::rng_for;

use super::engine::{backward_seq, forward_seq, Attachment, GradWants, SiteLoss};
use super::{Backbone, ModelConfig, BOS_TOKEN};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.95;
const ADAM_EPS: f64 = 1e-8;
const BATCH: usize = 4;
const WARMUP: usize = 20;

/// Window lengths sampled during training. The long tail covers the whole
/// positional range the streaming harness evaluates at, otherwise scoring
/// with contexts longer than anything seen in training is out of
/// distribution for the rotary encoding.
const SEQ_CHOICES: [(usize, f64); 3] = [(96, 0.5), (256, 0.3), (512, 0.2)];

fn sample_seq_len<R: Rng>(rng: &mut R, max_seq: usize) -> usize {
    let u: f64 = rng.gen_range(0.0..1.0);
    let mut acc = 0.0;
    for (len, p) in SEQ_CHOICES {
        acc += p;
        if u < acc {
            return len.min(max_seq.saturating_sub(2));
        }
    }
    SEQ_CHOICES[SEQ_CHOICES.len() - 1].0.min(max_seq.saturating_sub(2))
}

pub struct TrainOutcome {
    pub backbone: Backbone,
    pub loss_curve: Vec<f64>,
}

/// Train a fresh backbone on a byte corpus. Deterministic for a fixed
/// seed; `steps = 0` returns the initialization unchanged.
pub fn train_tiny_backbone(
    corpus: &[Vec<u8>],
    cfg: ModelConfig,
    steps: usize,
    lr: f64,
    seed: u64,
) -> Result<TrainOutcome> {
    if corpus.is_empty() {
        return Err(LocasError::Shape("corpus must contain at least one document".into()));
    }
    let cfg_max_seq = cfg.max_seq;
    let mut bb = Backbone::init(cfg, seed)?;
    let mut rng = rng_for(seed, 0x747261696e);
    let mut loss_curve = Vec::with_capacity(steps);

    let mut m: Vec<Vec<f64>> = Vec::new();
    let mut v: Vec<Vec<f64>> = Vec::new();
    {
        let slices = bb.weights.param_slices_mut();
        for s in &slices {
            m.push(vec![0.0; s.len()]);
            v.push(vec![0.0; s.len()]);
        }
    }

    for step in 0..steps {
        // Cosine decay to 10% of the base rate, with a short linear warmup.
        let progress = step as f64 / steps.max(1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        let mut lr_t = lr * (0.1 + 0.9 * cos);
        if step < WARMUP {
            lr_t *= (step + 1) as f64 / WARMUP as f64;
        }

        let mut grad_acc: Option<Vec<Vec<f64>>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..BATCH {
            let doc = &corpus[rng.gen_range(0..corpus.len())];
            let seq_len = sample_seq_len(&mut rng, cfg_max_seq);
            let span = seq_len.min(doc.len().saturating_sub(1)).max(1);
            let max_off = doc.len().saturating_sub(span + 1);
            let off = if max_off == 0 { 0 } else { rng.gen_range(0..=max_off) };
            // BOS-prefixed window; every document byte in the window is a
            // prediction target.
            let mut tokens = Vec::with_capacity(span + 2);
            if off == 0 {
                tokens.push(BOS_TOKEN);
            }
            tokens.extend(doc[off..(off + span + 1).min(doc.len())].iter().map(|&b| b as usize));
            let sites: Vec<SiteLoss> = (0..tokens.len() - 1)
                .map(|p| SiteLoss { pos: p, target: tokens[p + 1] })
                .collect();
            let scale = 1.0 / (sites.len() * BATCH) as f64;
            let cache = forward_seq(&bb, &Attachment::None, &tokens)?;
            let site_loss: f64 = sites
                .iter()
                .map(|s| super::nll(&cache.logits[s.pos], s.target))
                .sum::<f64>()
                / sites.len() as f64;
            batch_loss += site_loss / BATCH as f64;
            let grads = backward_seq(
                &bb,
                &Attachment::None,
                &cache,
                &sites,
                scale,
                GradWants { backbone: true, ..Default::default() },
            )?;
            let mut bg = grads.backbone.expect("backbone gradients requested");
            let slices = bg.param_slices_mut();
            match grad_acc.as_mut() {
                None => grad_acc = Some(slices.iter().map(|s| s.to_vec()).collect()),
                Some(acc) => {
                    for (a, s) in acc.iter_mut().zip(&slices) {
                        axpy(a, 1.0, s);
                    }
                }
            }
        }
        if !batch_loss.is_finite() {
            return Err(LocasError::Numerical(format!(
                "training diverged (non-finite loss) at step {step}"
            )));
        }
        loss_curve.push(batch_loss);

        let grads = grad_acc.unwrap();
        let t = (step + 1) as i32;
        let bc1 = 1.0 - BETA1.powi(t);
        let bc2 = 1.0 - BETA2.powi(t);
        let mut params = bb.weights.param_slices_mut();
        for ((p, g), (mi, vi)) in params.iter_mut().zip(&grads).zip(m.iter_mut().zip(v.iter_mut()))
        {
            for i in 0..g.len() {
                mi[i] = BETA1 * mi[i] + (1.0 - BETA1) * g[i];
                vi[i] = BETA2 * vi[i] + (1.0 - BETA2) * g[i] * g[i];
                p[i] -= lr_t * (mi[i] / bc1) / ((vi[i] / bc2).sqrt() + ADAM_EPS);
            }
        }
    }
    Ok(TrainOutcome { backbone: bb, loss_curve })
}
