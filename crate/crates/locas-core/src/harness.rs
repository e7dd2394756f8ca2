//! Streaming evaluation harness: truncation baselines, test-time-training
//! runs for both memory variants and the low-rank adapter baseline,
//! initialization/width ablations, parameter accounting, and the
//! synthetic corpus generator.
//!
//! Protocol per chunk: score first, then memorize, so no chunk is ever
//! scored by a memory that was trained on it. Every method (including the
//! truncation baseline) scores through the same combined-forward code
//! path, which makes the lr=0 degeneracy exact.

use serde::{Deserialize, Serialize};

use crate::backbone::{
    forward_seq, Attachment, Backbone, GradientTrace, ModelConfig, StreamState,
    BOS_TOKEN,
};
use crate::error::{LocasError, Result};
use crate::lora::{lora_update_chunk, lowrank_baseline_attach, LoraAdapter};
use crate::memory::{
    init_glu_memory, memory_update_chunk, InitStrategy, LocasGluMemory, LocasMlpMemory,
    MemOptState, MemOptimizer, MemoryRefMut,
};
use crate::nlsvd::{nl_svd_compress, DEFAULT_DROP_THRESHOLD};
use crate::util::fmt_sig6;

pub mod corpus;

// ── Run configuration ────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Trunc,
    LocasMlp,
    LocasGlu,
    LowRank,
}

impl Method {
    pub fn label(&self) -> &'static str {
        match self {
            Method::Trunc => "trunc",
            Method::LocasMlp => "locas-mlp",
            Method::LocasGlu => "locas-glu",
            Method::LowRank => "lowrank-baseline",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "trunc" => Ok(Method::Trunc),
            "locas-mlp" => Ok(Method::LocasMlp),
            "locas-glu" => Ok(Method::LocasGlu),
            "lowrank-baseline" | "lowrank" => Ok(Method::LowRank),
            other => Err(LocasError::Format(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct RunConfig {
    pub chunk_size: usize,
    pub window: usize,
    pub method: Method,
    pub strategy: InitStrategy,
    pub r: usize,
    pub lr: f64,
    pub steps_per_chunk: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub epsilon: f64,
    pub optimizer: MemOptimizer,
    /// Re-select the cloned basis at every chunk instead of once per document.
    pub reinit_per_chunk: bool,
}

impl RunConfig {
    pub fn desk_default(method: Method, seed: u64) -> Self {
        RunConfig {
            chunk_size: 256,
            window: 256,
            method,
            strategy: InitStrategy::TopK,
            r: 16,
            // The activation-keyed MLP route only tolerates tiny write and
            // update scales at this model size; the cloning-based GLU
            // route takes the paper-scale rate.
            lr: if method == Method::LocasMlp { 1e-5 } else { 4e-3 },
            steps_per_chunk: 1,
            seed,
            checkpoint_every: 1024,
            epsilon: if method == Method::LocasMlp {
                1e-3
            } else {
                crate::memory::DEFAULT_EPSILON
            },
            // The memory follows plain gradient descent; the adapter
            // baseline keeps Adam, which its update scale was tuned for.
            optimizer: if method == Method::LowRank {
                MemOptimizer::adam_default()
            } else {
                MemOptimizer::Sgd
            },
            reinit_per_chunk: false,
        }
    }

    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        if self.chunk_size == 0 {
            return Err(LocasError::Shape("chunk_size must be positive".into()));
        }
        if self.chunk_size > self.window || self.window > cfg.max_seq {
            return Err(LocasError::Shape(format!(
                "need chunk_size <= window <= max_seq, got {} / {} / {}",
                self.chunk_size, self.window, cfg.max_seq
            )));
        }
        if self.window + self.chunk_size > cfg.max_seq {
            return Err(LocasError::Shape(format!(
                "window {} + chunk {} exceeds max_seq {} for the scoring forward",
                self.window, self.chunk_size, cfg.max_seq
            )));
        }
        if self.checkpoint_every == 0 {
            return Err(LocasError::Shape("checkpoint_every must be positive".into()));
        }
        Ok(())
    }
}

/// One row of the streaming-evaluation output. `nll` is the cumulative
/// mean NLL in nats over everything scored so far; `ppl = exp(nll)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub method: String,
    pub doc_id: usize,
    pub position: usize,
    pub context_len: usize,
    pub nll: f64,
    pub ppl: f64,
}

#[derive(Clone, Debug)]
pub struct RunResult {
    pub records: Vec<EvalRecord>,
    /// Mean NLL of each chunk in document order.
    pub chunk_nlls: Vec<f64>,
    /// Token count of each chunk.
    pub chunk_lens: Vec<usize>,
    /// Mean NLL over the final quarter of the document.
    pub final_quarter_nll: f64,
    /// Extra trainable scalars actually allocated by the method.
    pub extra_params: usize,
    /// Final memory state for GLU runs (cross-document probes).
    pub final_glu_memory: Option<LocasGluMemory>,
}

// ── Streaming evaluation ─────────────────────────────────────────────

struct MethodState {
    glu: Option<LocasGluMemory>,
    mlp: Option<LocasMlpMemory>,
    lora: Option<LoraAdapter>,
    opt: MemOptState,
}

fn attachment<'a>(st: &'a MethodState) -> Attachment<'a> {
    if let Some(mem) = &st.glu {
        Attachment::Glu(mem)
    } else if let Some(mem) = &st.mlp {
        Attachment::Mlp(mem)
    } else if let Some(ad) = &st.lora {
        Attachment::Lora(ad)
    } else {
        Attachment::None
    }
}

/// Score a document chunk-by-chunk with at most `window` preceding tokens
/// of context; test-time-training methods update their memory on each
/// chunk after scoring it.
pub fn stream_eval(
    bb: &Backbone,
    run: &RunConfig,
    doc: &[u8],
    doc_id: usize,
) -> Result<RunResult> {
    run.validate(&bb.cfg)?;
    if doc.len() < 2 * run.chunk_size {
        return Err(LocasError::Shape(format!(
            "document length {} shorter than two chunks of {}",
            doc.len(),
            run.chunk_size
        )));
    }

    // BOS-prefixed token stream; chunk boundaries refer to document bytes.
    let mut full = Vec::with_capacity(doc.len() + 1);
    full.push(BOS_TOKEN);
    full.extend(doc.iter().map(|&b| b as usize));
    let n_doc = doc.len();

    let mut st = MethodState { glu: None, mlp: None, lora: None, opt: MemOptState::default() };
    if run.method == Method::LocasMlp {
        st.mlp = Some(LocasMlpMemory::empty(bb.cfg.layers, bb.cfg.d_model, run.epsilon));
    }
    if run.method == Method::LowRank {
        st.lora = Some(lowrank_baseline_attach(bb, run.r, run.seed)?);
    }

    let mut records = Vec::new();
    let mut chunk_nlls = Vec::new();
    let mut chunk_lens = Vec::new();
    let mut cum_sum = 0.0;
    let mut cum_tokens = 0usize;
    let mut next_ckpt = run.checkpoint_every;
    // Exact per-token accumulator for the final quarter of the document.
    let quarter_cutoff = (3 * n_doc) / 4;
    let mut quarter_sum = 0.0;
    let mut quarter_tokens = 0usize;

    let mut start = 0usize;
    while start < n_doc {
        let end = (start + run.chunk_size).min(n_doc);
        // Prefix: last `window` tokens before the chunk (in BOS coordinates
        // the chunk begins at start+1).
        let chunk_begin = start + 1;
        let p = run.window.min(chunk_begin);
        let input: Vec<usize> = full[chunk_begin - p..=end].to_vec();
        let n_chunk = end - start;
        debug_assert_eq!(input.len(), p + n_chunk);

        // Score.
        let (chunk_sum, chunk_q_sum, chunk_q_tokens) = {
            let att = attachment(&st);
            let cache = forward_seq(bb, &att, &input)?;
            let mut sum = 0.0;
            let mut q_sum = 0.0;
            let mut q_tokens = 0usize;
            for t in 0..n_chunk {
                let pos = p - 1 + t;
                let nll = crate::backbone::nll(&cache.logits[pos], input[pos + 1]);
                sum += nll;
                if start + t >= quarter_cutoff {
                    q_sum += nll;
                    q_tokens += 1;
                }
            }
            // Late GLU initialization wants this chunk's trace.
            if run.method == Method::LocasGlu
                && (st.glu.is_none() || run.reinit_per_chunk)
                && run.strategy != InitStrategy::NormalizedActivation
            {
                let trace = cache.activation_trace();
                let sub = slice_trace(&trace, p);
                st.glu = Some(init_glu_memory(
                    bb,
                    &sub,
                    None,
                    run.r,
                    run.strategy,
                    run.seed,
                    run.epsilon,
                )?);
            }
            (sum, q_sum, q_tokens)
        };
        if run.method == Method::LocasGlu
            && (st.glu.is_none() || run.reinit_per_chunk)
            && run.strategy == InitStrategy::NormalizedActivation
        {
            let att = attachment(&st);
            let (grads, acts) = crate::backbone::hidden_gradient_trace(bb, &att, &input)?;
            let sub_a = slice_trace(&acts, p);
            let sub_g = GradientTrace {
                hidden: grads.hidden.iter().map(|l| l[p..].to_vec()).collect(),
            };
            st.glu = Some(init_glu_memory(
                bb,
                &sub_a,
                Some(&sub_g),
                run.r,
                run.strategy,
                run.seed,
                run.epsilon,
            )?);
        }

        cum_sum += chunk_sum;
        cum_tokens += n_chunk;
        quarter_sum += chunk_q_sum;
        quarter_tokens += chunk_q_tokens;
        chunk_nlls.push(chunk_sum / n_chunk as f64);
        chunk_lens.push(n_chunk);

        // Memorize the scored chunk.
        match run.method {
            Method::Trunc => {}
            Method::LocasGlu => {
                if run.lr != 0.0 && run.steps_per_chunk > 0 {
                    let mem = st.glu.as_mut().expect("initialized above");
                    memory_update_chunk(
                        bb,
                        &mut MemoryRefMut::Glu(mem),
                        &input,
                        p,
                        run.lr,
                        run.steps_per_chunk,
                        run.optimizer,
                        Some(&mut st.opt),
                    )?;
                }
            }
            Method::LocasMlp => {
                let mem = st.mlp.as_mut().expect("created at start");
                if run.epsilon != 0.0 {
                    append_chunk_slots(bb, mem, &input, p)?;
                    for layer in 0..mem.layers.len() {
                        if mem.layers[layer].rank() > run.r {
                            let (k, v, _report) = nl_svd_compress(
                                &mem.layers[layer].keys,
                                &mem.layers[layer].values,
                                run.r,
                                DEFAULT_DROP_THRESHOLD,
                            )?;
                            mem.layers[layer].keys = k;
                            mem.layers[layer].values = v;
                        }
                    }
                }
                if run.lr != 0.0 && run.steps_per_chunk > 0 {
                    memory_update_chunk(
                        bb,
                        &mut MemoryRefMut::Mlp(mem),
                        &input,
                        p,
                        run.lr,
                        run.steps_per_chunk,
                        run.optimizer,
                        Some(&mut st.opt),
                    )?;
                }
            }
            Method::LowRank => {
                if run.lr != 0.0 && run.steps_per_chunk > 0 {
                    let ad = st.lora.as_mut().expect("attached at start");
                    lora_update_chunk(
                        bb,
                        ad,
                        &input,
                        p,
                        run.lr,
                        run.steps_per_chunk,
                        run.optimizer,
                        Some(&mut st.opt),
                    )?;
                }
            }
        }

        if cum_tokens >= next_ckpt {
            records.push(record_at(run, doc_id, cum_tokens, cum_sum));
            while next_ckpt <= cum_tokens {
                next_ckpt += run.checkpoint_every;
            }
        }
        start = end;
    }
    if records.last().map(|r| r.position) != Some(cum_tokens) {
        records.push(record_at(run, doc_id, cum_tokens, cum_sum));
    }

    let final_quarter_nll =
        if quarter_tokens > 0 { quarter_sum / quarter_tokens as f64 } else { f64::NAN };

    let extra_params = match run.method {
        Method::Trunc => 0,
        Method::LocasGlu => st.glu.as_ref().map(|m| m.num_params()).unwrap_or(0),
        Method::LocasMlp => st.mlp.as_ref().map(|m| m.num_params()).unwrap_or(0),
        Method::LowRank => st.lora.as_ref().map(|a| a.num_params()).unwrap_or(0),
    };
    Ok(RunResult {
        records,
        chunk_nlls,
        chunk_lens,
        final_quarter_nll,
        extra_params,
        final_glu_memory: st.glu,
    })
}

fn record_at(run: &RunConfig, doc_id: usize, position: usize, cum_sum: f64) -> EvalRecord {
    let nll = cum_sum / position as f64;
    EvalRecord {
        method: run.method.label().to_string(),
        doc_id,
        position,
        context_len: run.window.min(position),
        nll,
        ppl: nll.exp(),
    }
}

fn slice_trace(
    trace: &crate::backbone::ActivationTrace,
    from: usize,
) -> crate::backbone::ActivationTrace {
    crate::backbone::ActivationTrace {
        ffn_inputs: trace.ffn_inputs.iter().map(|l| l[from..].to_vec()).collect(),
        ffn_intermediate: trace.ffn_intermediate.iter().map(|l| l[from..].to_vec()).collect(),
    }
}

/// Online slot appends for every chunk site: stream the window, take each
/// site's activation/gradient under the current memory, append.
fn append_chunk_slots(
    bb: &Backbone,
    mem: &mut LocasMlpMemory,
    input: &[usize],
    score_from: usize,
) -> Result<()> {
    let mut stream = StreamState::new(bb);
    let mut prev = None;
    for (t, &tok) in input.iter().enumerate() {
        if let Some(rec) = prev.take() {
            // rec is at position t-1; its target is input[t].
            if t >= score_from {
                let att = Attachment::Mlp(mem);
                let grads = stream.column_grads(bb, &att, &rec, tok);
                let acts = crate::backbone::StepRecord::ffn_inputs(&rec);
                mem.append_slot(&acts, &grads)?;
            }
        }
        let att = Attachment::Mlp(mem);
        prev = Some(stream.push(bb, &att, tok)?);
    }
    Ok(())
}

/// Scoring-only pass of a document with a fixed GLU memory attached.
pub fn eval_with_fixed_memory(
    bb: &Backbone,
    run: &RunConfig,
    doc: &[u8],
    mem: &LocasGluMemory,
) -> Result<f64> {
    let mut frozen = run.clone();
    frozen.lr = 0.0;
    frozen.validate(&bb.cfg)?;
    if doc.len() < 2 * frozen.chunk_size {
        return Err(LocasError::Shape("document too short".into()));
    }
    let mut full = Vec::with_capacity(doc.len() + 1);
    full.push(BOS_TOKEN);
    full.extend(doc.iter().map(|&b| b as usize));
    let n_doc = doc.len();
    let cutoff = (3 * n_doc) / 4;
    let mut q_sum = 0.0;
    let mut q_tokens = 0usize;
    let mut start = 0usize;
    while start < n_doc {
        let end = (start + frozen.chunk_size).min(n_doc);
        let chunk_begin = start + 1;
        let p = frozen.window.min(chunk_begin);
        let input: Vec<usize> = full[chunk_begin - p..=end].to_vec();
        if end > cutoff {
            let cache = forward_seq(bb, &Attachment::Glu(mem), &input)?;
            for t in 0..end - start {
                if start + t >= cutoff {
                    let pos = p - 1 + t;
                    q_sum += crate::backbone::nll(&cache.logits[pos], input[pos + 1]);
                    q_tokens += 1;
                }
            }
        }
        start = end;
    }
    Ok(q_sum / q_tokens as f64)
}

// ── Ablations and sweeps ─────────────────────────────────────────────

#[derive(Clone, Debug)]
pub struct AblationRow {
    pub strategy: InitStrategy,
    pub final_quarter_nll: f64,
    pub rank: usize,
}

/// Run the GLU memory once per strategy on one document with a shared
/// seed and backbone; rows are ranked by final-quarter NLL (best first).
pub fn ablate_init(
    bb: &Backbone,
    doc: &[u8],
    strategies: &[InitStrategy],
    r: usize,
    seed: u64,
) -> Result<Vec<AblationRow>> {
    if strategies.is_empty() {
        return Err(LocasError::Shape("strategy list must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(strategies.len());
    for &strategy in strategies {
        let mut run = RunConfig::desk_default(Method::LocasGlu, seed);
        let span = 256.min(bb.cfg.max_seq / 2).max(1);
        run.chunk_size = span;
        run.window = span;
        run.r = r;
        run.strategy = strategy;
        // The normalized-activation baseline only converges with a far
        // smaller rate.
        if strategy == InitStrategy::NormalizedActivation {
            run.lr = 1e-6;
        }
        let result = stream_eval(bb, &run, doc, 0)?;
        rows.push(AblationRow { strategy, final_quarter_nll: result.final_quarter_nll, rank: 0 });
    }
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by(|&a, &b| {
        rows[a].final_quarter_nll.partial_cmp(&rows[b].final_quarter_nll).unwrap()
    });
    for (rank, idx) in order.into_iter().enumerate() {
        rows[idx].rank = rank + 1;
    }
    Ok(rows)
}

#[derive(Clone, Debug)]
pub struct SweepRow {
    pub r: usize,
    pub param_count: usize,
    pub final_quarter_nll: f64,
}

/// One GLU run per width; parameter counts from the accounting formula.
pub fn sweep_width(
    bb: &Backbone,
    doc: &[u8],
    r_values: &[usize],
    seed: u64,
) -> Result<Vec<SweepRow>> {
    if r_values.is_empty() {
        return Err(LocasError::Shape("r_values must be non-empty".into()));
    }
    let mut rows = Vec::with_capacity(r_values.len());
    for &r in r_values {
        if r > bb.cfg.d_ff {
            return Err(LocasError::Capacity(format!(
                "width {r} exceeds backbone intermediate size {}",
                bb.cfg.d_ff
            )));
        }
        let mut run = RunConfig::desk_default(Method::LocasGlu, seed);
        let span = 256.min(bb.cfg.max_seq / 2).max(1);
        run.chunk_size = span;
        run.window = span;
        run.r = r;
        let result = stream_eval(bb, &run, doc, 0)?;
        rows.push(SweepRow {
            r,
            param_count: param_count(&bb.cfg, Method::LocasGlu, r),
            final_quarter_nll: result.final_quarter_nll,
        });
    }
    Ok(rows)
}

/// Extra parameters introduced by a method at width/rank r.
pub fn param_count(cfg: &ModelConfig, method: Method, r: usize) -> usize {
    param_count_raw(method, cfg.layers, cfg.d_model, cfg.d_ff, r)
}

pub fn param_count_raw(method: Method, layers: usize, d: usize, m: usize, r: usize) -> usize {
    match method {
        Method::Trunc => 0,
        Method::LocasGlu => 3 * layers * d * r,
        Method::LocasMlp => 2 * layers * d * r,
        Method::LowRank => 8 * layers * d * r + 3 * layers * r * (d + m),
    }
}

// ── CSV output ───────────────────────────────────────────────────────

pub const CSV_HEADER: &str = "method,doc_id,position,context_len,nll,ppl";

pub fn records_to_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.method,
            r.doc_id,
            r.position,
            r.context_len,
            fmt_sig6(r.nll),
            fmt_sig6(r.ppl)
        ));
    }
    out
}

/// The same CSV with the method column blanked, for comparing runs that
/// must agree on every number but differ in the label.
pub fn csv_without_method(csv: &str) -> String {
    csv.lines()
        .map(|line| match line.find(',') {
            Some(i) => format!("_{}", &line[i..]),
            None => line.to_string(),
        })
        .collect::<Vec<_>>()
        .join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::FfnKind;

    fn tiny_bb(kind: FfnKind, seed: u64) -> Backbone {
        let cfg = ModelConfig {
            layers: 2,
            d_model: 16,
            d_ff: 24,
            heads: 2,
            vocab: crate::backbone::DEFAULT_VOCAB,
            ffn_kind: kind,
            max_seq: 64,
        };
        Backbone::init(cfg, seed).unwrap()
    }

    fn tiny_run(method: Method) -> RunConfig {
        let mut run = RunConfig::desk_default(method, 0);
        run.chunk_size = 16;
        run.window = 16;
        run.checkpoint_every = 32;
        run.r = 4;
        run
    }

    fn tiny_doc(len: usize, seed: u64) -> Vec<u8> {
        corpus::make_synthetic_corpus(seed, 1, len, 1.0).remove(0)
    }

    #[test]
    fn param_count_formulas() {
        // Accounting formulas, including the two published counts.
        assert_eq!(param_count_raw(Method::LocasGlu, 28, 2048, 6144, 64), 11_010_048);
        assert_eq!(param_count_raw(Method::LowRank, 28, 2048, 6144, 64), 73_400_320);
        assert_eq!(param_count_raw(Method::LocasMlp, 2, 64, 256, 8), 2 * 2 * 64 * 8);
        assert_eq!(param_count_raw(Method::LocasGlu, 3, 8, 16, 0), 0);
        assert_eq!(param_count_raw(Method::Trunc, 28, 2048, 6144, 64), 0);
    }

    #[test]
    fn stream_eval_rejects_short_documents() {
        let bb = tiny_bb(FfnKind::Glu, 1);
        let run = tiny_run(Method::Trunc);
        let doc = vec![b'a'; run.chunk_size * 2 - 1];
        assert!(stream_eval(&bb, &run, &doc, 0).is_err());
        let doc = vec![b'a'; run.chunk_size * 2];
        assert!(stream_eval(&bb, &run, &doc, 0).is_ok());
    }

    #[test]
    fn records_are_consistent_and_deterministic() {
        let bb = tiny_bb(FfnKind::Glu, 2);
        let run = tiny_run(Method::LocasGlu);
        let doc = tiny_doc(160, 5);
        let a = stream_eval(&bb, &run, &doc, 3).unwrap();
        let b = stream_eval(&bb, &run, &doc, 3).unwrap();
        assert_eq!(records_to_csv(&a.records), records_to_csv(&b.records));
        let mut last = 0;
        for rec in &a.records {
            assert!(rec.position > last, "positions strictly increasing");
            last = rec.position;
            assert!((rec.ppl - rec.nll.exp()).abs() < 1e-12 * rec.ppl.abs());
            assert_eq!(rec.doc_id, 3);
            assert_eq!(rec.method, "locas-glu");
        }
        assert_eq!(a.records.last().unwrap().position, 160);
        assert_eq!(a.extra_params, 3 * 2 * 16 * 4);
    }

    #[test]
    fn lr_zero_matches_truncation_baseline() {
        let bb = tiny_bb(FfnKind::Glu, 3);
        let doc = tiny_doc(128, 6);
        let trunc = stream_eval(&bb, &tiny_run(Method::Trunc), &doc, 0).unwrap();
        for method in [Method::LocasGlu, Method::LowRank] {
            let mut run = tiny_run(method);
            run.lr = 0.0;
            let out = stream_eval(&bb, &run, &doc, 0).unwrap();
            let a = csv_without_method(&records_to_csv(&trunc.records));
            let b = csv_without_method(&records_to_csv(&out.records));
            assert_eq!(a, b, "{method:?} with lr=0 must reproduce the baseline");
        }
        // The MLP memory also needs a zero write scale.
        let mut run = tiny_run(Method::LocasMlp);
        run.lr = 0.0;
        run.epsilon = 0.0;
        let out = stream_eval(&bb, &run, &doc, 0).unwrap();
        assert_eq!(
            csv_without_method(&records_to_csv(&trunc.records)),
            csv_without_method(&records_to_csv(&out.records))
        );
    }

    #[test]
    fn score_then_memorize_ordering() {
        // Perturbing chunk c+1 must not change chunk c's recorded NLL.
        let bb = tiny_bb(FfnKind::Glu, 4);
        let mut run = tiny_run(Method::LocasGlu);
        run.checkpoint_every = 16; // one record per chunk
        let doc = tiny_doc(96, 7);
        let base = stream_eval(&bb, &run, &doc, 0).unwrap();
        let mut perturbed_doc = doc.clone();
        for b in perturbed_doc[32..48].iter_mut() {
            *b = b'z';
        }
        let perturbed = stream_eval(&bb, &run, &perturbed_doc, 0).unwrap();
        // Chunks 0 and 1 (positions 16 and 32) are identical.
        assert_eq!(base.chunk_nlls[0], perturbed.chunk_nlls[0]);
        assert_eq!(base.chunk_nlls[1], perturbed.chunk_nlls[1]);
        assert_ne!(base.chunk_nlls[2], perturbed.chunk_nlls[2]);
    }

    #[test]
    fn locas_mlp_run_compresses_to_width() {
        let bb = tiny_bb(FfnKind::Mlp, 5);
        let mut run = tiny_run(Method::LocasMlp);
        run.lr = 0.0; // pure append+compress route
        let doc = tiny_doc(96, 8);
        let out = stream_eval(&bb, &run, &doc, 0).unwrap();
        assert!(out.extra_params <= 2 * 2 * 16 * run.r);
        assert!(out.final_quarter_nll.is_finite());
    }

    #[test]
    fn ablate_init_shapes() {
        let bb = tiny_bb(FfnKind::Glu, 6);
        let doc = tiny_doc(96, 9);
        let rows = ablate_init(&bb, &doc, &[InitStrategy::TopK], 4, 0).unwrap();
        assert_eq!(rows.len(), 1);
        assert_eq!(rows[0].rank, 1);
        // Identical seeds and strategy produce identical rows.
        let rows2 = ablate_init(&bb, &doc, &[InitStrategy::TopK], 4, 0).unwrap();
        assert_eq!(rows[0].final_quarter_nll, rows2[0].final_quarter_nll);
        assert!(ablate_init(&bb, &doc, &[], 4, 0).is_err());
    }

    #[test]
    fn sweep_width_boundaries() {
        let bb = tiny_bb(FfnKind::Glu, 7);
        let doc = tiny_doc(64, 10);
        let mut run_doc = doc.clone();
        run_doc.extend_from_slice(&doc);
        // r == d_ff allowed, r == d_ff + 1 rejected.
        let rows = sweep_width(&bb, &run_doc, &[2, 4], 0).unwrap();
        assert_eq!(rows.len(), 2);
        assert_eq!(rows[1].param_count, 2 * rows[0].param_count);
        assert!(sweep_width(&bb, &run_doc, &[bb.cfg.d_ff], 0).is_ok());
        let err = sweep_width(&bb, &run_doc, &[bb.cfg.d_ff + 1], 0).unwrap_err();
        assert_eq!(err.category(), "CapacityError");
        assert!(sweep_width(&bb, &run_doc, &[], 0).is_err());
    }

    #[test]
    fn short_document_truncation_equals_unbounded_context() {
        // With the window covering the whole document, chunked scoring
        // sees the full context, so it matches a single unbounded forward
        // pass (up to the summation order of the mean).
        let bb = tiny_bb(FfnKind::Glu, 8);
        let doc = tiny_doc(40, 11);
        let mut run = tiny_run(Method::Trunc);
        run.chunk_size = 16;
        run.window = 48; // window + chunk <= max_seq, window > doc length
        run.checkpoint_every = 1000;
        let out = stream_eval(&bb, &run, &doc, 0).unwrap();
        let mut tokens = vec![crate::backbone::BOS_TOKEN];
        tokens.extend(doc.iter().map(|&b| b as usize));
        let cache = forward_seq(&bb, &Attachment::None, &tokens).unwrap();
        let unbounded: f64 = (0..doc.len())
            .map(|t| crate::backbone::nll(&cache.logits[t], tokens[t + 1]))
            .sum::<f64>()
            / doc.len() as f64;
        let streamed = out.records.last().unwrap().nll;
        assert!((streamed - unbounded).abs() < 1e-13 * unbounded.abs());
    }

    #[test]
    fn csv_format() {
        let records = vec![EvalRecord {
            method: "trunc".into(),
            doc_id: 0,
            position: 1024,
            context_len: 256,
            nll: 5.545177444479562,
            ppl: 256.0,
        }];
        let csv = records_to_csv(&records);
        assert_eq!(csv, "method,doc_id,position,context_len,nll,ppl\ntrunc,0,1024,256,5.54518,256\n");
    }
}
