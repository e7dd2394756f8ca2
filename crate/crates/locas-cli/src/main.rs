//! Command-line entry point: backbone training, memorization, streaming
//! evaluation, ablations, compression, and parameter accounting. Every
//! run writes a resolved-config snapshot next to its outputs; all
//! randomness derives from the single `--seed`.

mod settings;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use locas_core::backbone::train_tiny_backbone;
use locas_core::ckpt;
use locas_core::error::{LocasError, Result};
use locas_core::harness::{self, corpus, records_to_csv, EvalRecord, Method};
use locas_core::memory::{InitStrategy, LocasMlpMemory};
use locas_core::nlsvd;
use locas_core::util::fmt_sig6;

use settings::Settings;

#[derive(Parser)]
#[command(name = "locas", version, about = "Locally-supported parametric memory for test-time training")]
struct Cli {
    /// Flat key=value config file with [section] headers; CLI flags win.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Master seed for all randomness in the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Pin single-threaded bit-reproducible execution (always on in this
    /// build; the flag is recorded in the resolved config).
    #[arg(long, global = true)]
    deterministic: bool,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic corpus as one .bin file per document.
    GenCorpus(GenCorpusArgs),
    /// Train a fresh backbone on a corpus directory and save a checkpoint.
    TrainBackbone(TrainArgs),
    /// Stream-evaluate documents, writing the eval CSV.
    Eval(EvalArgs),
    /// Build a memory over one document and save its checkpoint.
    Memorize(MemorizeArgs),
    /// Compare initialization strategies on one document.
    AblateInit(AblateArgs),
    /// Sweep the memory width on one document.
    SweepWidth(SweepArgs),
    /// Compress a saved MLP memory checkpoint.
    Compress(CompressArgs),
    /// Print the extra-parameter count for a method.
    ParamCount(ParamCountArgs),
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long)]
    n_docs: Option<usize>,
    #[arg(long)]
    doc_len: Option<usize>,
    #[arg(long)]
    vocab_skew: Option<f64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Directory of .bin documents to train on.
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    ffn_kind: Option<String>,
    #[arg(long)]
    layers: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_ff: Option<usize>,
    #[arg(long)]
    heads: Option<usize>,
    #[arg(long)]
    max_seq: Option<usize>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    backbone: PathBuf,
    /// Corpus directory (every .bin becomes one document).
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Single document file (alternative to --corpus).
    #[arg(long)]
    doc: Option<PathBuf>,
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps_per_chunk: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<usize>,
    #[arg(long)]
    optimizer: Option<String>,
    #[arg(long)]
    epsilon: Option<f64>,
}

#[derive(Args)]
struct MemorizeArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    doc: PathBuf,
    /// locas-mlp (expansion/compression cycle) or locas-glu (BP updates).
    #[arg(long)]
    method: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    r: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    steps_per_chunk: Option<usize>,
    #[arg(long)]
    chunk_size: Option<usize>,
    #[arg(long)]
    window: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    n_target: Option<usize>,
    #[arg(long)]
    n_capacity: Option<usize>,
    /// per-token or per-span.
    #[arg(long)]
    cadence: Option<String>,
    /// Number of stream tokens for the locas-mlp cycle (document prefix).
    #[arg(long)]
    stream_tokens: Option<usize>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    doc: PathBuf,
    /// Comma-separated strategy list.
    #[arg(long, default_value = "topk,bottomk,random-selection,gaussian")]
    strategies: String,
    #[arg(long)]
    r: Option<usize>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    backbone: PathBuf,
    #[arg(long)]
    doc: PathBuf,
    /// Comma-separated widths.
    #[arg(long, default_value = "4,8,16,32")]
    r_values: String,
}

#[derive(Args)]
struct CompressArgs {
    #[arg(long)]
    memory: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long)]
    threshold: Option<f64>,
}

#[derive(Args)]
struct ParamCountArgs {
    #[arg(long)]
    method: String,
    #[arg(long = "L")]
    layers: usize,
    #[arg(long)]
    d: usize,
    #[arg(long, default_value_t = 0)]
    m: usize,
    #[arg(long)]
    r: usize,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error [{}]: {e}", e.category());
            ExitCode::FAILURE
        }
    }
}

fn load_settings(cli: &Cli) -> Result<Settings> {
    let mut s = Settings::default();
    if let Some(path) = &cli.config {
        s.apply_file(path)?;
    }
    if let Some(seed) = cli.seed {
        s.seed = seed;
    }
    if cli.deterministic {
        s.deterministic = true;
    }
    Ok(s)
}

fn write_outputs(out: &Path, s: &Settings, files: &[(&str, String)]) -> Result<()> {
    std::fs::create_dir_all(out)?;
    std::fs::write(out.join("resolved.cfg"), s.to_config_text())?;
    for (name, content) in files {
        std::fs::write(out.join(name), content)?;
    }
    Ok(())
}

fn load_corpus_dir(dir: &Path) -> Result<Vec<Vec<u8>>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().map(|x| x == "bin").unwrap_or(false))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(LocasError::Format(format!("no .bin documents in {}", dir.display())));
    }
    paths.iter().map(|p| Ok(std::fs::read(p)?)).collect()
}

fn run(cli: Cli) -> Result<()> {
    let mut s = load_settings(&cli)?;
    match &cli.cmd {
        Cmd::GenCorpus(args) => {
            if let Some(v) = args.n_docs {
                s.n_docs = v;
            }
            if let Some(v) = args.doc_len {
                s.doc_len = v;
            }
            if let Some(v) = args.vocab_skew {
                s.vocab_skew = v;
            }
            let docs = corpus::make_synthetic_corpus(s.seed, s.n_docs, s.doc_len, s.vocab_skew);
            write_outputs(&cli.out, &s, &[])?;
            for (i, doc) in docs.iter().enumerate() {
                std::fs::write(cli.out.join(format!("doc_{i:04}.bin")), doc)?;
            }
            println!(
                "wrote {} documents of {} bytes to {}",
                s.n_docs,
                s.doc_len,
                cli.out.display()
            );
            Ok(())
        }
        Cmd::TrainBackbone(args) => {
            if let Some(v) = &args.ffn_kind {
                s.ffn_kind = Settings::ffn_kind_parse(v)?;
            }
            if let Some(v) = args.layers {
                s.layers = v;
            }
            if let Some(v) = args.d_model {
                s.d_model = v;
            }
            if let Some(v) = args.d_ff {
                s.d_ff = v;
            }
            if let Some(v) = args.heads {
                s.heads = v;
            }
            if let Some(v) = args.max_seq {
                s.max_seq = v;
            }
            if let Some(v) = args.steps {
                s.train_steps = v;
            }
            if let Some(v) = args.lr {
                s.train_lr = v;
            }
            let docs = load_corpus_dir(&args.corpus)?;
            let outcome =
                train_tiny_backbone(&docs, s.model_config(), s.train_steps, s.train_lr, s.seed)?;
            let mut curve = String::from("step,loss\n");
            for (i, loss) in outcome.loss_curve.iter().enumerate() {
                curve.push_str(&format!("{i},{}\n", fmt_sig6(*loss)));
            }
            write_outputs(&cli.out, &s, &[("train_loss.csv", curve)])?;
            ckpt::save_backbone(&outcome.backbone, &cli.out.join("backbone.ckpt"))?;
            println!(
                "trained {} steps; final loss {}; checkpoint {}",
                s.train_steps,
                outcome.loss_curve.last().map(|v| fmt_sig6(*v)).unwrap_or_else(|| "n/a".into()),
                cli.out.join("backbone.ckpt").display()
            );
            Ok(())
        }
        Cmd::Eval(args) => {
            apply_eval_flags(&mut s, args)?;
            let bb = ckpt::load_backbone(&args.backbone)?;
            let docs = match (&args.corpus, &args.doc) {
                (Some(dir), None) => load_corpus_dir(dir)?,
                (None, Some(file)) => vec![std::fs::read(file)?],
                _ => {
                    return Err(LocasError::Format(
                        "eval needs exactly one of --corpus or --doc".into(),
                    ))
                }
            };
            let run_cfg = s.run_config();
            let mut records: Vec<EvalRecord> = Vec::new();
            for (doc_id, doc) in docs.iter().enumerate() {
                let result = harness::stream_eval(&bb, &run_cfg, doc, doc_id)?;
                records.extend(result.records);
            }
            let csv = records_to_csv(&records);
            write_outputs(&cli.out, &s, &[("eval.csv", csv)])?;
            println!("wrote {} records to {}", records.len(), cli.out.join("eval.csv").display());
            Ok(())
        }
        Cmd::Memorize(args) => {
            apply_memorize_flags(&mut s, args)?;
            let bb = ckpt::load_backbone(&args.backbone)?;
            let doc = std::fs::read(&args.doc)?;
            match s.method {
                Method::LocasMlp => {
                    let n_stream = args.stream_tokens.unwrap_or(1024).min(doc.len());
                    let tokens: Vec<usize> =
                        doc[..n_stream].iter().map(|&b| b as usize).collect();
                    let mut mem =
                        LocasMlpMemory::empty(bb.cfg.layers, bb.cfg.d_model, s.resolved_epsilon());
                    let events = nlsvd::run_expansion_compression_cycle(
                        &bb,
                        &mut mem,
                        &tokens,
                        &s.cycle_policy(),
                    )?;
                    let mut log = String::new();
                    for e in &events {
                        log.push_str(&serde_json::to_string(e).expect("event serializes"));
                        log.push('\n');
                    }
                    write_outputs(&cli.out, &s, &[("compression_log.jsonl", log)])?;
                    ckpt::save_mlp_memory(&mem, &cli.out.join("memory.ckpt"))?;
                    println!(
                        "cycle over {} tokens, {} compressions; memory {}",
                        n_stream,
                        events.len(),
                        cli.out.join("memory.ckpt").display()
                    );
                }
                Method::LocasGlu => {
                    let run_cfg = s.run_config();
                    let result = harness::stream_eval(&bb, &run_cfg, &doc, 0)?;
                    let mem = result
                        .final_glu_memory
                        .ok_or_else(|| LocasError::Shape("run produced no memory".into()))?;
                    write_outputs(&cli.out, &s, &[])?;
                    ckpt::save_glu_memory(&mem, &cli.out.join("memory.ckpt"))?;
                    println!(
                        "memorized {} bytes (final-quarter NLL {}); memory {}",
                        doc.len(),
                        fmt_sig6(result.final_quarter_nll),
                        cli.out.join("memory.ckpt").display()
                    );
                }
                other => {
                    return Err(LocasError::Format(format!(
                        "memorize supports locas-mlp and locas-glu, not {}",
                        other.label()
                    )))
                }
            }
            Ok(())
        }
        Cmd::AblateInit(args) => {
            if let Some(v) = args.r {
                s.r = v;
            }
            let bb = ckpt::load_backbone(&args.backbone)?;
            let doc = std::fs::read(&args.doc)?;
            let strategies: Vec<InitStrategy> = args
                .strategies
                .split(',')
                .map(|t| InitStrategy::parse(t.trim()))
                .collect::<Result<_>>()?;
            let rows = harness::ablate_init(&bb, &doc, &strategies, s.r, s.seed)?;
            let mut csv = String::from("strategy,final_quarter_nll,rank\n");
            println!("strategy                 final-quarter NLL   rank");
            for row in &rows {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    row.strategy.label(),
                    fmt_sig6(row.final_quarter_nll),
                    row.rank
                ));
                println!(
                    "{:<24} {:>17} {:>6}",
                    row.strategy.label(),
                    fmt_sig6(row.final_quarter_nll),
                    row.rank
                );
            }
            write_outputs(&cli.out, &s, &[("ablation.csv", csv)])?;
            Ok(())
        }
        Cmd::SweepWidth(args) => {
            let bb = ckpt::load_backbone(&args.backbone)?;
            let doc = std::fs::read(&args.doc)?;
            let r_values: Vec<usize> = args
                .r_values
                .split(',')
                .map(|t| {
                    t.trim()
                        .parse()
                        .map_err(|_| LocasError::Format(format!("invalid width '{}'", t.trim())))
                })
                .collect::<Result<_>>()?;
            let rows = harness::sweep_width(&bb, &doc, &r_values, s.seed)?;
            let mut csv = String::from("r,param_count,final_quarter_nll\n");
            println!("r      extra params   final-quarter NLL");
            for row in &rows {
                csv.push_str(&format!(
                    "{},{},{}\n",
                    row.r,
                    row.param_count,
                    fmt_sig6(row.final_quarter_nll)
                ));
                println!(
                    "{:<6} {:>12} {:>19}",
                    row.r,
                    row.param_count,
                    fmt_sig6(row.final_quarter_nll)
                );
            }
            write_outputs(&cli.out, &s, &[("sweep.csv", csv)])?;
            Ok(())
        }
        Cmd::Compress(args) => {
            if let Some(v) = args.threshold {
                s.drop_threshold = v;
            }
            s.n_target = args.n;
            let mem = ckpt::load_memory(&args.memory)?;
            let mut mem = match mem {
                ckpt::MemoryCheckpoint::Mlp(m) => m,
                ckpt::MemoryCheckpoint::Glu(_) => {
                    return Err(LocasError::Capacity(
                        "compression applies to the MLP memory variant only".into(),
                    ))
                }
            };
            let mut log = String::new();
            for li in 0..mem.layers.len() {
                let (keys, values, report) = nlsvd::nl_svd_compress(
                    &mem.layers[li].keys,
                    &mem.layers[li].values,
                    args.n.min(mem.layers[li].rank()),
                    s.drop_threshold,
                )?;
                mem.layers[li].keys = keys;
                mem.layers[li].values = values;
                log.push_str(&report.to_json_line());
                log.push('\n');
                println!(
                    "layer {li}: {} -> {} slots (probe error {})",
                    report.input_rank,
                    report.retained_rank,
                    fmt_sig6(report.probe_max_error)
                );
            }
            write_outputs(&cli.out, &s, &[("compression_log.jsonl", log)])?;
            ckpt::save_mlp_memory(&mem, &cli.out.join("memory_compressed.ckpt"))?;
            Ok(())
        }
        Cmd::ParamCount(args) => {
            let method = Method::parse(&args.method)?;
            let count = harness::param_count_raw(method, args.layers, args.d, args.m, args.r);
            println!("{count}");
            Ok(())
        }
    }
}

fn apply_eval_flags(s: &mut Settings, args: &EvalArgs) -> Result<()> {
    if let Some(v) = &args.method {
        s.method = Method::parse(v)?;
    }
    if let Some(v) = &args.strategy {
        s.strategy = InitStrategy::parse(v)?;
    }
    if let Some(v) = args.r {
        s.r = v;
    }
    if let Some(v) = args.lr {
        s.lr = Some(v);
    }
    if let Some(v) = args.steps_per_chunk {
        s.steps_per_chunk = v;
    }
    if let Some(v) = args.chunk_size {
        s.chunk_size = v;
    }
    if let Some(v) = args.window {
        s.window = v;
    }
    if let Some(v) = args.checkpoint_every {
        s.checkpoint_every = v;
    }
    if let Some(v) = &args.optimizer {
        match v.as_str() {
            "sgd" | "adam" | "default" => s.optimizer = v.clone(),
            other => return Err(LocasError::Format(format!("unknown optimizer '{other}'"))),
        }
    }
    if let Some(v) = args.epsilon {
        s.epsilon = Some(v);
    }
    Ok(())
}

fn apply_memorize_flags(s: &mut Settings, args: &MemorizeArgs) -> Result<()> {
    if let Some(v) = &args.method {
        s.method = Method::parse(v)?;
    }
    if let Some(v) = &args.strategy {
        s.strategy = InitStrategy::parse(v)?;
    }
    if let Some(v) = args.r {
        s.r = v;
    }
    if let Some(v) = args.lr {
        s.lr = Some(v);
    }
    if let Some(v) = args.steps_per_chunk {
        s.steps_per_chunk = v;
    }
    if let Some(v) = args.chunk_size {
        s.chunk_size = v;
    }
    if let Some(v) = args.window {
        s.window = v;
    }
    if let Some(v) = args.epsilon {
        s.epsilon = Some(v);
    }
    if let Some(v) = args.n_target {
        s.n_target = v;
    }
    if let Some(v) = args.n_capacity {
        s.n_capacity = v;
    }
    if let Some(v) = &args.cadence {
        s.cadence = Settings::cadence_parse(v)?;
    }
    Ok(())
}
