//! Incremental forward with a sliding key/value cache plus a column
//! backward that yields the gradient of one position's own next-token
//! log-likelihood at every layer's hidden output.
//!
//! The column backward is exact: a position's log-likelihood depends on
//! its own residual column only — cached keys/values from earlier
//! positions are constants with respect to it, while the position's own
//! key/value contribution (self-attention) is differentiated through.

use std::collections::VecDeque;

use crate::error::Result;

use crate::tensor::{axpy, dot, Activation};

use super::engine::{rmsnorm, rmsnorm_backward, rope_freqs, rope_inplace, Attachment};
use super::{softmax, ActivationTrace, Backbone, FfnWeights, GradientTrace};

/// Everything recorded while pushing one position, enough to run the
/// column backward for that position.
pub struct StepRecord {
    pub pos: usize,
    /// Per layer: residual input, norm stats, q, attention weights, head
    /// concat, post-attention residual, FFN input/intermediates, memory
    /// intermediates.
    layers: Vec<StepLayer>,
    x_final: Vec<f64>,
    invf: f64,
    pub logits: Vec<f64>,
}

struct StepLayer {
    x_in: Vec<f64>,
    inv1: f64,
    q: Vec<f64>,
    /// heads × ctx attention weights, head-major.
    aw: Vec<f64>,
    ctx: usize,
    x_mid: Vec<f64>,
    inv2: f64,
    n2: Vec<f64>,
    z1: Vec<f64>,
    z2: Vec<f64>,
    act: Vec<f64>,
    mz1: Vec<f64>,
    mz2: Vec<f64>,
}

impl StepRecord {
    /// FFN input activation (post-norm) per layer at this position.
    pub fn ffn_inputs(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.n2.clone()).collect()
    }

    pub fn ffn_intermediate(&self) -> Vec<Vec<f64>> {
        self.layers.iter().map(|l| l.act.clone()).collect()
    }
}

/// Sliding-window token stream over a fixed backbone. The attachment may
/// change between pushes (memory written online); cached keys/values from
/// earlier positions are kept as-is, which is the usual streaming
/// behavior for test-time training.
pub struct StreamState {
    window: usize,
    pos: usize,
    keys: Vec<VecDeque<Vec<f64>>>,
    vals: Vec<VecDeque<Vec<f64>>>,
}

impl StreamState {
    pub fn new(bb: &Backbone) -> Self {
        let window = bb.cfg.max_seq;
        StreamState {
            window,
            pos: 0,
            keys: (0..bb.cfg.layers).map(|_| VecDeque::new()).collect(),
            vals: (0..bb.cfg.layers).map(|_| VecDeque::new()).collect(),
        }
    }

    pub fn position(&self) -> usize {
        self.pos
    }

    /// Process one token and return the per-position record.
    pub fn push(&mut self, bb: &Backbone, att: &Attachment, token: usize) -> Result<StepRecord> {
        let cfg = &bb.cfg;
        if token >= cfg.vocab {
            return Err(crate::error::LocasError::Shape(format!(
                "token id {token} out of vocab {}",
                cfg.vocab
            )));
        }
        let d = cfg.d_model;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
        let freqs = rope_freqs(hd);
        let pos = self.pos;

        let mut x = bb.weights.embed.row(token).to_vec();
        let mut layers = Vec::with_capacity(cfg.layers);
        for (li, lw) in bb.weights.layers.iter().enumerate() {
            let x_in = x.clone();
            let (n1, inv1) = rmsnorm(&x_in, &lw.norm_attn);
            let mut q = lw.wq.matvec(&n1);
            let mut k = lw.wk.matvec(&n1);
            let v = lw.wv.matvec(&n1);
            rope_inplace(&mut q, pos, heads, hd, &freqs, false);
            rope_inplace(&mut k, pos, heads, hd, &freqs, false);
            if self.keys[li].len() == self.window {
                self.keys[li].pop_front();
                self.vals[li].pop_front();
            }
            self.keys[li].push_back(k);
            self.vals[li].push_back(v);
            let ctx = self.keys[li].len();

            let mut aw = vec![0.0; heads * ctx];
            let mut cat = vec![0.0; d];
            for h in 0..heads {
                let hs = h * hd;
                let q_h = &q[hs..hs + hd];
                let mut scores = vec![0.0; ctx];
                let mut max = f64::NEG_INFINITY;
                for (u, key) in self.keys[li].iter().enumerate() {
                    let s = dot(q_h, &key[hs..hs + hd]) * inv_sqrt_hd;
                    scores[u] = s;
                    if s > max {
                        max = s;
                    }
                }
                let mut sum = 0.0;
                for s in scores.iter_mut() {
                    *s = (*s - max).exp();
                    sum += *s;
                }
                let out = &mut cat[hs..hs + hd];
                for (u, val) in self.vals[li].iter().enumerate() {
                    let w = scores[u] / sum;
                    aw[h * ctx + u] = w;
                    axpy(out, w, &val[hs..hs + hd]);
                }
            }
            let ao = lw.wo.matvec(&cat);
            let mut x_mid = x_in.clone();
            axpy(&mut x_mid, 1.0, &ao);

            let (n2, inv2) = rmsnorm(&x_mid, &lw.norm_ffn);
            let (z1, z2, act, mut f) = match &lw.ffn {
                FfnWeights::Mlp { key, value } => {
                    let z = key.matvec(&n2);
                    let h: Vec<f64> = z.iter().map(|&v| Activation::Relu.eval(v)).collect();
                    let f = value.matvec_t(&h);
                    (z, Vec::new(), h, f)
                }
                FfnWeights::Glu { gate, key, down } => {
                    let zg = gate.matvec(&n2);
                    let zk = key.matvec(&n2);
                    let m: Vec<f64> = zg
                        .iter()
                        .zip(&zk)
                        .map(|(&g, &k)| Activation::Silu.eval(g) * k)
                        .collect();
                    let f = down.matvec_t(&m);
                    (zg, zk, m, f)
                }
            };
            let (mz1, mz2) = match att {
                Attachment::Mlp(mem) if mem.layers[li].rank() > 0 => {
                    let layer = &mem.layers[li];
                    let zm = layer.keys.matvec_t(&n2);
                    let hm: Vec<f64> = zm.iter().map(|&v| Activation::Relu.eval(v)).collect();
                    let fm = layer.values.matvec_t(&hm);
                    axpy(&mut f, 1.0, &fm);
                    (zm, Vec::new())
                }
                Attachment::Glu(mem) if mem.layers[li].rank() > 0 => {
                    let layer = &mem.layers[li];
                    let zg = layer.gate.matvec_t(&n2);
                    let zk = layer.keys.matvec_t(&n2);
                    let mm: Vec<f64> = zg
                        .iter()
                        .zip(&zk)
                        .map(|(&g, &k)| Activation::Silu.eval(g) * k)
                        .collect();
                    let fm = layer.values.matvec_t(&mm);
                    axpy(&mut f, layer.tau, &fm);
                    (zg, zk)
                }
                _ => (Vec::new(), Vec::new()),
            };
            let mut x_out = x_mid.clone();
            axpy(&mut x_out, 1.0, &f);

            layers.push(StepLayer {
                x_in,
                inv1,
                q,
                aw,
                ctx,
                x_mid,
                inv2,
                n2,
                z1,
                z2,
                act,
                mz1,
                mz2,
            });
            x = x_out;
        }

        let (nf, invf) = rmsnorm(&x, &bb.weights.norm_final);
        let logits = bb.weights.head.matvec(&nf);
        self.pos += 1;
        Ok(StepRecord { pos, layers, x_final: x, invf, logits })
    }

    /// Gradient of log p(target | context) at every layer's FFN-block
    /// output for the position held in `rec`. Must be called before the
    /// next `push` so the cache tail still corresponds to `rec`.
    pub fn column_grads(
        &self,
        bb: &Backbone,
        att: &Attachment,
        rec: &StepRecord,
        target: usize,
    ) -> Vec<Vec<f64>> {
        let cfg = &bb.cfg;
        let d = cfg.d_model;
        let heads = cfg.heads;
        let hd = cfg.head_dim();
        let inv_sqrt_hd = 1.0 / (hd as f64).sqrt();
        let freqs = rope_freqs(hd);

        // Ascent direction: d log p / d logits = onehot - softmax.
        let probs = softmax(&rec.logits);
        let mut dl: Vec<f64> = probs.iter().map(|&p| -p).collect();
        dl[target] += 1.0;
        let dnf = bb.weights.head.matvec_t(&dl);
        let mut dx =
            rmsnorm_backward(&dnf, &rec.x_final, rec.invf, &bb.weights.norm_final, None);

        let mut out = vec![Vec::new(); cfg.layers];
        for li in (0..cfg.layers).rev() {
            let lw = &bb.weights.layers[li];
            let sl = &rec.layers[li];
            // Gradient at the FFN-block output (hidden output).
            out[li] = dx.clone();

            // FFN + memory chain back to n2.
            let d_f = &out[li];
            let mut dn2 = vec![0.0; d];
            match att {
                Attachment::Mlp(mem) if mem.layers[li].rank() > 0 => {
                    let layer = &mem.layers[li];
                    let dhm = layer.values.matvec(d_f);
                    let dzm: Vec<f64> = dhm
                        .iter()
                        .zip(&sl.mz1)
                        .map(|(&g, &z)| g * Activation::Relu.grad(z))
                        .collect();
                    let back = layer.keys.matvec(&dzm);
                    axpy(&mut dn2, 1.0, &back);
                }
                Attachment::Glu(mem) if mem.layers[li].rank() > 0 => {
                    let layer = &mem.layers[li];
                    let dfm: Vec<f64> = d_f.iter().map(|&v| v * layer.tau).collect();
                    let dmm = layer.values.matvec(&dfm);
                    let dzg: Vec<f64> = dmm
                        .iter()
                        .zip(sl.mz1.iter().zip(&sl.mz2))
                        .map(|(&g, (&a, &b))| g * Activation::Silu.grad(a) * b)
                        .collect();
                    let dzk: Vec<f64> = dmm
                        .iter()
                        .zip(&sl.mz1)
                        .map(|(&g, &a)| g * Activation::Silu.eval(a))
                        .collect();
                    let back = layer.gate.matvec(&dzg);
                    axpy(&mut dn2, 1.0, &back);
                    let back = layer.keys.matvec(&dzk);
                    axpy(&mut dn2, 1.0, &back);
                }
                _ => {}
            }
            match &lw.ffn {
                FfnWeights::Mlp { key, value } => {
                    let dh = value.matvec(d_f);
                    let dz: Vec<f64> = dh
                        .iter()
                        .zip(&sl.z1)
                        .map(|(&g, &z)| g * Activation::Relu.grad(z))
                        .collect();
                    let back = key.matvec_t(&dz);
                    axpy(&mut dn2, 1.0, &back);
                }
                FfnWeights::Glu { gate, key, down } => {
                    let dmact = down.matvec(d_f);
                    let dzg: Vec<f64> = dmact
                        .iter()
                        .zip(sl.z1.iter().zip(&sl.z2))
                        .map(|(&g, (&a, &b))| g * Activation::Silu.grad(a) * b)
                        .collect();
                    let dzk: Vec<f64> = dmact
                        .iter()
                        .zip(&sl.z1)
                        .map(|(&g, &a)| g * Activation::Silu.eval(a))
                        .collect();
                    let back = gate.matvec_t(&dzg);
                    axpy(&mut dn2, 1.0, &back);
                    let back = key.matvec_t(&dzk);
                    axpy(&mut dn2, 1.0, &back);
                }
            }
            let dxm2 = rmsnorm_backward(&dn2, &sl.x_mid, sl.inv2, &lw.norm_ffn, None);
            // dx currently holds d/d x_out; x_out = x_mid + F.
            let mut dxm = dx.clone();
            axpy(&mut dxm, 1.0, &dxm2);

            // Attention column: earlier keys/values are constants, the
            // position's own k/v contribution is differentiated.
            let dcat = lw.wo.matvec_t(&dxm);
            let ctx = sl.ctx;
            let self_idx = ctx - 1;
            let mut dq = vec![0.0; d];
            let mut dk_self = vec![0.0; d];
            let mut dv_self = vec![0.0; d];
            for h in 0..heads {
                let hs = h * hd;
                let dout = &dcat[hs..hs + hd];
                let w = &sl.aw[h * ctx..(h + 1) * ctx];
                let mut da = vec![0.0; ctx];
                for (u, val) in self.vals[li].iter().enumerate() {
                    da[u] = dot(dout, &val[hs..hs + hd]);
                }
                axpy(&mut dv_self[hs..hs + hd], w[self_idx], dout);
                let mean: f64 = w.iter().zip(&da).map(|(&wu, &du)| wu * du).sum();
                for (u, key) in self.keys[li].iter().enumerate() {
                    let de = w[u] * (da[u] - mean) * inv_sqrt_hd;
                    axpy(&mut dq[hs..hs + hd], de, &key[hs..hs + hd]);
                    if u == self_idx {
                        axpy(&mut dk_self[hs..hs + hd], de, &sl.q[hs..hs + hd]);
                    }
                }
            }
            rope_inplace(&mut dq, rec.pos, heads, hd, &freqs, true);
            rope_inplace(&mut dk_self, rec.pos, heads, hd, &freqs, true);
            let mut dn1 = lw.wq.matvec_t(&dq);
            let tmp = lw.wk.matvec_t(&dk_self);
            axpy(&mut dn1, 1.0, &tmp);
            let tmp = lw.wv.matvec_t(&dv_self);
            axpy(&mut dn1, 1.0, &tmp);
            let dxi = rmsnorm_backward(&dn1, &sl.x_in, sl.inv1, &lw.norm_attn, None);
            dx = dxm;
            axpy(&mut dx, 1.0, &dxi);
        }
        out
    }
}

/// Per-position gradients of each position's own log-likelihood at every
/// layer hidden output, streamed over `tokens`. The final position has no
/// target and carries zero vectors. Also returns the activation trace so
/// callers get matched (activation, gradient) pairs.
pub fn hidden_gradient_trace(
    bb: &Backbone,
    att: &Attachment,
    tokens: &[usize],
) -> Result<(GradientTrace, ActivationTrace)> {
    let mut stream = StreamState::new(bb);
    let d = bb.cfg.d_model;
    let mut hidden: Vec<Vec<Vec<f64>>> = vec![Vec::new(); bb.cfg.layers];
    let mut acts: Vec<Vec<Vec<f64>>> = vec![Vec::new(); bb.cfg.layers];
    let mut inter: Vec<Vec<Vec<f64>>> = vec![Vec::new(); bb.cfg.layers];
    for (t, &tok) in tokens.iter().enumerate() {
        let rec = stream.push(bb, att, tok)?;
        let g = if t + 1 < tokens.len() {
            stream.column_grads(bb, att, &rec, tokens[t + 1])
        } else {
            vec![vec![0.0; d]; bb.cfg.layers]
        };
        for li in 0..bb.cfg.layers {
            hidden[li].push(g[li].clone());
            acts[li].push(rec.layers[li].n2.clone());
            inter[li].push(rec.layers[li].act.clone());
        }
    }
    Ok((
        GradientTrace { hidden },
        ActivationTrace { ffn_inputs: acts, ffn_intermediate: inter },
    ))
}
