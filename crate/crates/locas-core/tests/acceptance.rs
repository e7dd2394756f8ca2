//! Acceptance suite: one test per shipping criterion, each printing a
//! `criterion N PASS` line (run with `-- --nocapture` to see them all).
//!
//! The heavy criteria share one fixture: a backbone trained on a held-out
//! corpus plus full streaming runs (truncation, top-k, gaussian) over the
//! eight evaluation documents.

use std::time::Instant;

use once_cell::sync::Lazy;
use rand::Rng;

use locas_core::backbone::{
    forward_seq, hidden_gradient_trace, lm_loss, train_tiny_backbone, Attachment, Backbone,
    FfnKind, GradWants, ModelConfig, SiteLoss,
};
use locas_core::harness::{
    self, corpus::make_synthetic_corpus, csv_without_method, eval_with_fixed_memory,
    param_count_raw, records_to_csv, Method, RunConfig, RunResult,
};
use locas_core::memory::{
    self, glu_forward, init_glu_memory, mlp_forward, InitStrategy, LocasGluMemory,
    LocasMlpMemory, MemoryRefMut,
};
use locas_core::nlsvd::{
    nl_svd_compress, probe_equivalence_check, relu_ffn_eval, run_expansion_compression_cycle,
    Cadence, CyclePolicy,
};
use locas_core::tensor::{dot, global_normalize, l2_norm, Matrix};
use locas_core::util::rng_for;

const EVAL_SEED: u64 = 0;
const EVAL_DOCS: usize = 8;
const EVAL_DOC_LEN: usize = 16384;
const TRAIN_SEED: u64 = 1000;
const TRAIN_DOCS: usize = 32;
const TRAIN_STEPS: usize = 800;

struct Fixture {
    backbone: Backbone,
    eval_docs: Vec<Vec<u8>>,
    trunc: Vec<RunResult>,
    topk: Vec<RunResult>,
    gaussian: Vec<RunResult>,
    /// Seconds spent training the backbone and producing the trunc+topk
    /// runs (the work criterion 8 budgets).
    c8_seconds: f64,
}

static FIXTURE: Lazy<Fixture> = Lazy::new(|| {
    let t0 = Instant::now();
    let train_corpus = make_synthetic_corpus(TRAIN_SEED, TRAIN_DOCS, EVAL_DOC_LEN, 1.0);
    let outcome =
        train_tiny_backbone(&train_corpus, ModelConfig::desk_glu(), TRAIN_STEPS, 3e-3, 42)
            .expect("training succeeds");
    let backbone = outcome.backbone;
    let eval_docs = make_synthetic_corpus(EVAL_SEED, EVAL_DOCS, EVAL_DOC_LEN, 1.0);

    let run_for = |method: Method, strategy: InitStrategy| {
        let mut run = RunConfig::desk_default(method, EVAL_SEED);
        run.strategy = strategy;
        run
    };
    let eval_all = |run: &RunConfig| -> Vec<RunResult> {
        eval_docs
            .iter()
            .enumerate()
            .map(|(id, doc)| harness::stream_eval(&backbone, run, doc, id).expect("run"))
            .collect()
    };
    let trunc = eval_all(&run_for(Method::Trunc, InitStrategy::TopK));
    let topk = eval_all(&run_for(Method::LocasGlu, InitStrategy::TopK));
    let c8_seconds = t0.elapsed().as_secs_f64();
    let gaussian = eval_all(&run_for(Method::LocasGlu, InitStrategy::Gaussian));
    Fixture { backbone, eval_docs, trunc, topk, gaussian, c8_seconds }
});

fn random_prompt(rng: &mut impl Rng, len: usize, vocab: usize) -> Vec<usize> {
    (0..len).map(|_| rng.gen_range(0..vocab)).collect()
}

#[test]
fn c01_zero_init_behavioral_identity() {
    let t0 = Instant::now();
    let bb = Backbone::init(ModelConfig::desk_glu(), 7).unwrap();
    let mut rng = rng_for(1, 0xc01);
    // Importance statistics from one forward pass, then a cloning init.
    let warm = random_prompt(&mut rng, 64, bb.cfg.vocab);
    let (_, trace) = locas_core::backbone::forward_with_trace(&bb, &warm).unwrap();
    for strategy in
        [InitStrategy::TopK, InitStrategy::BottomK, InitStrategy::RandomSelection]
    {
        let mem = init_glu_memory(&bb, &trace, None, 16, strategy, 3, 1e-2).unwrap();
        let mut worst: f64 = 0.0;
        for _ in 0..100 {
            let prompt = random_prompt(&mut rng, 48, bb.cfg.vocab);
            let base = forward_seq(&bb, &Attachment::None, &prompt).unwrap();
            let with = forward_seq(&bb, &Attachment::Glu(&mem), &prompt).unwrap();
            for (a, b) in base.logits.iter().flatten().zip(with.logits.iter().flatten()) {
                worst = worst.max((a - b).abs());
            }
        }
        assert_eq!(worst, 0.0, "{strategy:?}: zero-init memory must not move any logit");
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 10.0, "runtime bound: {secs:.1}s");
    println!("criterion 1 PASS: zero-init identity, max |Δlogit| = 0 over 100 prompts x 3 strategies ({secs:.1}s)");
}

#[test]
fn c02_nlsvd_probe_equivalence() {
    let mut rng = rng_for(2, 0xc02);
    let mut worst: f64 = 0.0;
    for case in 0..50 {
        let d = rng.gen_range(4..=64);
        let m = rng.gen_range(2..=128);
        let n = rng.gen_range(1..=m.min(d));
        let mut keys = Matrix::zeros(d, m);
        for v in keys.data_mut().iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        let mut values = Matrix::zeros(m, d);
        for v in values.data_mut().iter_mut() {
            *v = rng.gen_range(-1.5..1.5);
        }
        let (rk, rv, report) = nl_svd_compress(&keys, &values, n, 1e-8)
            .unwrap_or_else(|e| panic!("case {case} (d={d}, m={m}, n={n}): {e}"));
        let err = probe_equivalence_check(&keys, &values, &rk, &rv);
        worst = worst.max(err);
        assert!(err < 1e-9, "case {case} (d={d}, m={m}, n={n}): probe error {err}");
        assert!(report.retained_rank <= n);
    }
    println!("criterion 2 PASS: probe equivalence over 50 random memories, worst error {worst:.2e} < 1e-9");
}

#[test]
fn c03_rescaling_invariance() {
    let mut rng = rng_for(3, 0xc03);
    let d = 16;
    let m = 24;
    let n = 8;
    let mut keys = Matrix::zeros(d, m);
    for v in keys.data_mut().iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let mut values = Matrix::zeros(m, d);
    for v in values.data_mut().iter_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    let (rk0, rv0, rep0) = nl_svd_compress(&keys, &values, n, 1e-8).unwrap();
    let mut worst_fn: f64 = 0.0;
    let mut worst_cmp: f64 = 0.0;
    for c in [0.1, 10.0] {
        let col = 5;
        let mut keys2 = keys.clone();
        let mut values2 = values.clone();
        for i in 0..d {
            keys2.set(i, col, keys2.get(i, col) * c);
        }
        for j in 0..d {
            values2.set(col, j, values2.get(col, j) / c);
        }
        for _ in 0..1000 {
            let x: Vec<f64> = (0..d).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let a = relu_ffn_eval(&keys, &values, &x);
            let b = relu_ffn_eval(&keys2, &values2, &x);
            for (p, q) in a.iter().zip(&b) {
                worst_fn = worst_fn.max((p - q).abs());
            }
        }
        let (rk, rv, rep) = nl_svd_compress(&keys2, &values2, n, 1e-8).unwrap();
        assert_eq!(rep.retained_rank, rep0.retained_rank);
        for (a, b) in rk.data().iter().zip(rk0.data()) {
            worst_cmp = worst_cmp.max((a - b).abs());
        }
        for (a, b) in rv.data().iter().zip(rv0.data()) {
            worst_cmp = worst_cmp.max((a - b).abs());
        }
        for (a, b) in rep.composed_scalars.iter().zip(&rep0.composed_scalars) {
            worst_cmp = worst_cmp.max((a - b).abs());
        }
    }
    assert!(worst_fn < 1e-10, "function drift {worst_fn}");
    assert!(worst_cmp < 1e-9, "compression drift {worst_cmp}");
    println!("criterion 3 PASS: rescaling invariance, function drift {worst_fn:.2e} < 1e-10, compression drift {worst_cmp:.2e} < 1e-9");
}

#[test]
fn c04_memory_gradient_fidelity() {
    let t0 = Instant::now();
    let cfg = |kind| ModelConfig {
        layers: 2,
        d_model: 32,
        d_ff: 48,
        heads: 4,
        vocab: 64,
        ffn_kind: kind,
        max_seq: 64,
    };
    let tokens: Vec<usize> = {
        let mut rng = rng_for(4, 0xc04);
        (0..20).map(|_| rng.gen_range(0..64)).collect()
    };
    let sites: Vec<SiteLoss> =
        (0..tokens.len() - 1).map(|p| SiteLoss { pos: p, target: tokens[p + 1] }).collect();
    let scale = 1.0 / sites.len() as f64;
    let h = 1e-6;
    let r = 4;
    let mut rng = rng_for(4, 0xc04f);
    let mut checked = 0usize;
    let mut worst_rel: f64 = 0.0;

    // Both variants, every memory parameter.
    for kind in [FfnKind::Mlp, FfnKind::Glu] {
        let bb = Backbone::init(cfg(kind), 11).unwrap();
        let d = bb.cfg.d_model;
        let rnd = |rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize| {
            let mut m = Matrix::zeros(rows, cols);
            for v in m.data_mut().iter_mut() {
                *v = rng.gen_range(-0.4..0.4);
            }
            m
        };
        let mut mlp_mem = LocasMlpMemory::empty(2, d, 1e-2);
        let mut glu_mem = LocasGluMemory { layers: Vec::new() };
        match kind {
            FfnKind::Mlp => {
                for l in mlp_mem.layers.iter_mut() {
                    l.keys = rnd(&mut rng, d, r);
                    l.values = rnd(&mut rng, r, d);
                }
            }
            FfnKind::Glu => {
                for li in 0..2 {
                    glu_mem.layers.push(locas_core::memory::GluMemoryLayer {
                        gate: rnd(&mut rng, d, r),
                        keys: rnd(&mut rng, d, r),
                        values: rnd(&mut rng, r, d),
                        tau: 0.31 + 0.07 * li as f64,
                        selection: Vec::new(),
                    });
                }
            }
        }

        let analytic: Vec<Vec<f64>> = {
            let att = match kind {
                FfnKind::Mlp => Attachment::Mlp(&mlp_mem),
                FfnKind::Glu => Attachment::Glu(&glu_mem),
            };
            let cache = forward_seq(&bb, &att, &tokens).unwrap();
            let grads = locas_core::backbone::backward_seq(
                &bb,
                &att,
                &cache,
                &sites,
                scale,
                GradWants { memory: true, ..Default::default() },
            )
            .unwrap();
            grads
                .memory
                .unwrap()
                .layers
                .iter()
                .flat_map(|l| {
                    let mut out = Vec::new();
                    if let Some(g) = &l.gate {
                        out.push(g.data().to_vec());
                    }
                    out.push(l.keys.data().to_vec());
                    out.push(l.values.data().to_vec());
                    out
                })
                .collect()
        };

        let chunk_loss = |mlp: &LocasMlpMemory, glu: &LocasGluMemory| -> f64 {
            let att = match kind {
                FfnKind::Mlp => Attachment::Mlp(mlp),
                FfnKind::Glu => Attachment::Glu(glu),
            };
            let cache = forward_seq(&bb, &att, &tokens).unwrap();
            let logits: Vec<Vec<f64>> = sites.iter().map(|s| cache.logits[s.pos].clone()).collect();
            let targets: Vec<usize> = sites.iter().map(|s| s.target).collect();
            lm_loss(&logits, &targets)
        };

        for si in 0..analytic.len() {
            for ci in 0..analytic[si].len() {
                let orig = match kind {
                    FfnKind::Mlp => mlp_mem.param_slices_mut()[si][ci],
                    FfnKind::Glu => glu_mem.param_slices_mut()[si][ci],
                };
                let set = |mlp: &mut LocasMlpMemory, glu: &mut LocasGluMemory, v: f64| match kind {
                    FfnKind::Mlp => mlp.param_slices_mut()[si][ci] = v,
                    FfnKind::Glu => glu.param_slices_mut()[si][ci] = v,
                };
                set(&mut mlp_mem, &mut glu_mem, orig + h);
                let up = chunk_loss(&mlp_mem, &glu_mem);
                set(&mut mlp_mem, &mut glu_mem, orig - h);
                let down = chunk_loss(&mlp_mem, &glu_mem);
                set(&mut mlp_mem, &mut glu_mem, orig);
                let fd = (up - down) / (2.0 * h);
                let a = analytic[si][ci];
                let rel = (a - fd).abs() / fd.abs().max(a.abs()).max(1e-7);
                // Absolute escape covers coordinates below the central-
                // difference roundoff floor (~1e-9 on a loss of size ~4).
                assert!(
                    rel < 1e-5 || (a - fd).abs() < 1e-8,
                    "{kind:?} slice {si} coord {ci}: analytic {a} vs fd {fd}"
                );
                if (a - fd).abs() >= 1e-8 {
                    worst_rel = worst_rel.max(rel);
                }
                checked += 1;
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    assert!(secs < 60.0, "runtime bound: {secs:.1}s");
    println!("criterion 4 PASS: {checked} memory-parameter gradients match finite differences (worst rel {worst_rel:.2e} < 1e-5) in {secs:.1}s");
}

#[test]
fn c05_parameter_count_reproduction() {
    let glu = param_count_raw(Method::LocasGlu, 28, 2048, 6144, 64);
    assert_eq!(glu, 11_010_048);
    let lowrank = param_count_raw(Method::LowRank, 28, 2048, 6144, 64);
    assert_eq!(lowrank, 73_400_320);
    println!("criterion 5 PASS: published parameter counts reproduced exactly ({glu} and {lowrank})");
}

#[test]
fn c06_mlp_append_contract() {
    // Real traces from a streaming pass on an MLP backbone.
    let bb = Backbone::init(ModelConfig::desk_mlp(), 13).unwrap();
    let mut rng = rng_for(6, 0xc06);
    let tokens = random_prompt(&mut rng, 24, bb.cfg.vocab);
    let (grads, acts) = hidden_gradient_trace(&bb, &Attachment::None, &tokens).unwrap();
    let epsilon = 1e-2;
    let mut mem = LocasMlpMemory::empty(bb.cfg.layers, bb.cfg.d_model, epsilon);
    let mut worst: f64 = 0.0;
    for site in [0usize, 7, 15] {
        let a_site: Vec<Vec<f64>> =
            (0..bb.cfg.layers).map(|li| acts.ffn_inputs[li][site].clone()).collect();
        let g_site = grads.at_position(site);
        let before: Vec<Vec<f64>> = (0..bb.cfg.layers)
            .map(|li| mlp_forward(&mem.layers[li], &a_site[li]).unwrap())
            .collect();
        // The appended slot's contribution at any non-positive-inner-
        // product probe must be exactly zero: the before/after increment
        // at such probes is bitwise 0.
        let probes: Vec<Vec<Vec<f64>>> = (0..bb.cfg.layers)
            .map(|li| {
                let opposite: Vec<f64> = a_site[li].iter().map(|v| -v).collect();
                let mut orthogonal = vec![0.0; bb.cfg.d_model];
                // Orthogonal in the first two coordinates of A.
                orthogonal[0] = a_site[li][1];
                orthogonal[1] = -a_site[li][0];
                let shift = dot(&orthogonal, &a_site[li]);
                for i in 2..bb.cfg.d_model {
                    let _ = i;
                }
                let _ = shift;
                vec![opposite, vec![0.0; bb.cfg.d_model]]
            })
            .collect();
        let probe_before: Vec<Vec<Vec<f64>>> = (0..bb.cfg.layers)
            .map(|li| {
                probes[li]
                    .iter()
                    .map(|p| mlp_forward(&mem.layers[li], p).unwrap())
                    .collect()
            })
            .collect();
        mem.append_slot(&a_site, &g_site).unwrap();
        let gn = global_normalize(&g_site).unwrap();
        for li in 0..bb.cfg.layers {
            let after = mlp_forward(&mem.layers[li], &a_site[li]).unwrap();
            let norm = l2_norm(&a_site[li]);
            for i in 0..bb.cfg.d_model {
                let increment = after[i] - before[li][i];
                let expect = epsilon * norm * gn[li][i];
                worst = worst.max((increment - expect).abs());
            }
            for (p, pb) in probes[li].iter().zip(&probe_before[li]) {
                let pa = mlp_forward(&mem.layers[li], p).unwrap();
                for (x, y) in pa.iter().zip(pb) {
                    assert_eq!(x, y, "closed-gate probe must contribute exactly zero");
                }
            }
        }
    }
    assert!(worst < 1e-10, "append increment drift {worst}");
    println!("criterion 6 PASS: append increment matches eps*|A|*GlobalNormalize(G) (max drift {worst:.2e} < 1e-10), closed gates exactly zero");
}

#[test]
fn c07_clipping_bound() {
    let cfg = ModelConfig {
        layers: 2,
        d_model: 24,
        d_ff: 32,
        heads: 4,
        vocab: 48,
        ffn_kind: FfnKind::Glu,
        max_seq: 64,
    };
    let bb = Backbone::init(cfg, 17).unwrap();
    let mut rng = rng_for(7, 0xc07);
    let tokens = random_prompt(&mut rng, 16, bb.cfg.vocab);
    let r = 5;
    let mut mem = LocasGluMemory { layers: Vec::new() };
    for _ in 0..2 {
        let rnd = |rng: &mut rand_chacha::ChaCha12Rng, rows: usize, cols: usize| {
            let mut m = Matrix::zeros(rows, cols);
            for v in m.data_mut().iter_mut() {
                *v = rng.gen_range(-1.0..1.0);
            }
            m
        };
        mem.layers.push(locas_core::memory::GluMemoryLayer {
            gate: rnd(&mut rng, 24, r),
            keys: rnd(&mut rng, 24, r),
            values: rnd(&mut rng, r, 24),
            tau: 0.5,
            selection: Vec::new(),
        });
    }
    for _ in 0..100 {
        memory::memory_grad_step(&bb, &mut MemoryRefMut::Glu(&mut mem), &tokens, 0.1, 1).unwrap();
    }
    let mut worst: f64 = 0.0;
    for l in &mem.layers {
        for j in 0..l.rank() {
            let gn: f64 = (0..24).map(|i| l.gate.get(i, j).powi(2)).sum::<f64>().sqrt();
            let kn: f64 = (0..24).map(|i| l.keys.get(i, j).powi(2)).sum::<f64>().sqrt();
            worst = worst.max(gn).max(kn).max(l2_norm(l.values.row(j)));
        }
    }
    assert!(worst <= 1.0 + 1e-9, "norm bound violated: {worst}");
    println!("criterion 7 PASS: after 100 updates at lr=0.1 every designated vector norm <= 1+1e-9 (max {worst:.12})");
}

#[test]
fn c08_desk_scale_ttt_benefit() {
    let fx = &*FIXTURE;
    let mut wins = 0;
    for (doc, (t, g)) in fx.trunc.iter().zip(&fx.topk).enumerate() {
        let better = g.final_quarter_nll < t.final_quarter_nll;
        println!(
            "  doc {doc}: trunc {:.4}  locas-glu {:.4}  {}",
            t.final_quarter_nll,
            g.final_quarter_nll,
            if better { "improved" } else { "regressed" }
        );
        if better {
            wins += 1;
        }
    }
    assert!(
        wins >= 7,
        "locas-glu must beat truncation on >= 7 of 8 documents, got {wins}"
    );
    assert!(
        fx.c8_seconds < 900.0,
        "training + runs took {:.0}s, budget 900s",
        fx.c8_seconds
    );
    println!(
        "criterion 8 PASS: final-quarter NLL improved on {wins}/8 documents ({:.0}s for training + runs)",
        fx.c8_seconds
    );
}

#[test]
fn c09_ablation_ordering() {
    let fx = &*FIXTURE;
    let mut wins = 0;
    for (doc, (t, g)) in fx.topk.iter().zip(&fx.gaussian).enumerate() {
        let ok = t.final_quarter_nll <= g.final_quarter_nll;
        println!(
            "  doc {doc}: topk {:.4}  gaussian {:.4}  {}",
            t.final_quarter_nll,
            g.final_quarter_nll,
            if ok { "ordered" } else { "inverted" }
        );
        if ok {
            wins += 1;
        }
    }
    assert!(wins >= 6, "topk <= gaussian on >= 6 of 8 documents, got {wins}");
    println!("criterion 9 PASS: topk <= gaussian final-quarter NLL on {wins}/8 documents");
}

#[test]
fn c10_expansion_compression_cycle() {
    let bb = Backbone::init(ModelConfig::desk_mlp(), 19).unwrap();
    let doc = &make_synthetic_corpus(EVAL_SEED, 1, 2048, 1.0)[0];
    let tokens: Vec<usize> = doc[..1024].iter().map(|&b| b as usize).collect();

    // Per-token cadence: width pinned at the target after warm-up.
    let mut mem = LocasMlpMemory::empty(bb.cfg.layers, bb.cfg.d_model, 1e-3);
    let policy = CyclePolicy { n_capacity: 64, n_target: 32, cadence: Cadence::PerToken };
    let events = run_expansion_compression_cycle(&bb, &mut mem, &tokens, &policy).unwrap();
    // Every token after the warm-up (32 appends) fires one compression per
    // layer back to exactly the target width.
    let expected_events = (1024 - 32) * bb.cfg.layers;
    assert_eq!(events.len(), expected_events);
    for e in &events {
        assert_eq!(e.r_before, 33, "token {}", e.token_index);
        assert_eq!(e.r_after, 32, "token {}", e.token_index);
    }
    for l in &mem.layers {
        assert_eq!(l.rank(), 32);
    }

    // Per-span cadence: exactly floor(1024/64) compressions.
    let mut mem = LocasMlpMemory::empty(bb.cfg.layers, bb.cfg.d_model, 1e-3);
    let policy = CyclePolicy { n_capacity: 64, n_target: 32, cadence: Cadence::PerSpan };
    let events = run_expansion_compression_cycle(&bb, &mut mem, &tokens, &policy).unwrap();
    let rounds = events.len() / bb.cfg.layers;
    assert_eq!(rounds, 1024 / 64);
    let mut idx: Vec<usize> = events.iter().map(|e| e.token_index).collect();
    idx.dedup();
    assert_eq!(idx, (1..=16).map(|k| k * 64).collect::<Vec<_>>());
    for l in &mem.layers {
        assert!(l.rank() <= 32);
    }
    println!("criterion 10 PASS: per-token cadence holds r=32 after warm-up; per-span cadence compresses exactly 16 times");
}

#[test]
fn c11_degeneracy_and_determinism() {
    let fx = &*FIXTURE;
    // lr=0 with zero-init values reproduces the truncation records (the
    // method label column is the only difference by construction).
    let mut zero = RunConfig::desk_default(Method::LocasGlu, EVAL_SEED);
    zero.lr = 0.0;
    let trunc_run = RunConfig::desk_default(Method::Trunc, EVAL_SEED);
    for doc_id in 0..2 {
        let a = harness::stream_eval(&fx.backbone, &zero, &fx.eval_docs[doc_id], doc_id).unwrap();
        let b =
            harness::stream_eval(&fx.backbone, &trunc_run, &fx.eval_docs[doc_id], doc_id).unwrap();
        let csv_a = csv_without_method(&records_to_csv(&a.records));
        let csv_b = csv_without_method(&records_to_csv(&b.records));
        assert_eq!(csv_a, csv_b, "doc {doc_id}: lr=0 run must byte-match the baseline");
    }
    // Identical seeds byte-match across invocations.
    let run = RunConfig::desk_default(Method::LocasGlu, EVAL_SEED);
    let a = harness::stream_eval(&fx.backbone, &run, &fx.eval_docs[0], 0).unwrap();
    let b = harness::stream_eval(&fx.backbone, &run, &fx.eval_docs[0], 0).unwrap();
    assert_eq!(records_to_csv(&a.records), records_to_csv(&b.records));
    println!("criterion 11 PASS: lr=0 byte-matches the truncation CSV; repeated seeds byte-match");
}

#[test]
fn cross_document_memory_specificity() {
    // A held-out document scores worse under a memory built from a
    // different document than under its own.
    let fx = &*FIXTURE;
    let run = RunConfig::desk_default(Method::LocasGlu, EVAL_SEED);
    let mem0 = fx.topk[0].final_glu_memory.as_ref().unwrap();
    let mem1 = fx.topk[1].final_glu_memory.as_ref().unwrap();
    let own = eval_with_fixed_memory(&fx.backbone, &run, &fx.eval_docs[1], mem1).unwrap();
    let foreign = eval_with_fixed_memory(&fx.backbone, &run, &fx.eval_docs[1], mem0).unwrap();
    assert!(
        own < foreign,
        "doc 1 under its own memory ({own:.4}) must beat a foreign memory ({foreign:.4})"
    );
    println!("cross-memory check PASS: own {own:.4} < foreign {foreign:.4}");
}

#[test]
fn lowrank_baseline_improves_over_truncation() {
    let fx = &*FIXTURE;
    let run = RunConfig::desk_default(Method::LowRank, EVAL_SEED);
    let result = harness::stream_eval(&fx.backbone, &run, &fx.eval_docs[0], 0).unwrap();
    assert!(
        result.final_quarter_nll < fx.trunc[0].final_quarter_nll,
        "adapter TTT ({:.4}) must beat truncation ({:.4})",
        result.final_quarter_nll,
        fx.trunc[0].final_quarter_nll
    );
    assert_eq!(result.extra_params, param_count_raw(Method::LowRank, 2, 64, 192, run.r));
    println!(
        "lowrank baseline PASS: final-quarter {:.4} < trunc {:.4}",
        result.final_quarter_nll, fx.trunc[0].final_quarter_nll
    );
}

#[test]
fn accounting_matches_allocation() {
    let fx = &*FIXTURE;
    // GLU memory: 3*L*d*r scalars actually allocated.
    let mem = fx.topk[0].final_glu_memory.as_ref().unwrap();
    assert_eq!(mem.num_params(), param_count_raw(Method::LocasGlu, 2, 64, 192, 16));
    assert_eq!(fx.topk[0].extra_params, 3 * 2 * 64 * 16);
    println!("accounting PASS: reported counts equal allocated scalars");
}

#[test]
fn glu_single_slot_silu_oracle() {
    // Scalar sanity of the gated slot response used throughout.
    let layer = locas_core::memory::GluMemoryLayer {
        gate: Matrix::from_rows(&[vec![1.0]]).unwrap(),
        keys: Matrix::from_rows(&[vec![1.0]]).unwrap(),
        values: Matrix::from_rows(&[vec![1.0]]).unwrap(),
        tau: 1.0,
        selection: vec![0],
    };
    let out = glu_forward(&layer, &[1.0]).unwrap();
    let expect = 1.0 / (1.0 + (-1.0f64).exp());
    assert!((out[0] - expect).abs() < 1e-12);
}
