use std::path::{Path, PathBuf};
use std::process::ExitCode;

use capgap::checkpoint::{load_checkpoint, save_checkpoint_with, Checkpoint};
use capgap::compute::{distillation_compute, format_e9_tflops, training_compute, LawConfig, COMPUTE_TABLE};
use capgap::data::{scoring_subset, tokenize, Corpus, Scheme, Split};
use capgap::evaluation::{evaluate, EvalOptions, EvalReport};
use capgap::model::{ModelConfig, Transformer};
use capgap::pruning::{accumulate_scores, build_plan, normalize_scores, prune, Priority, PruningPlan, PruningPlanSpec, ScoreSet};
use capgap::sweep::{analyze_law, distill_vs_direct, export_plot_data, read_rows, run_sweep, SweepSpec};
use capgap::synth::{generate, SynthConfig};
use capgap::trainer::{train, TrainConfig, TrainMode, TrainOptions};
use capgap::{Error, Result};
use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

/// Structured pruning and distillation lab for small decoder-only transformers.
#[derive(Parser)]
#[command(name = "capgap", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Pretrain a model from scratch (direct next-token training).
    Train(TrainArgs),
    /// Accumulate expressive scores of a checkpoint's heads, neurons and hidden dims.
    Score(ScoreArgs),
    /// Build a pruning plan from scores and apply it to a checkpoint.
    Prune(PruneArgs),
    /// Train a (pruned) student, distilling from a teacher or directly.
    Distill(DistillArgs),
    /// Perplexity and last-token accuracy on a corpus split.
    Eval(EvalArgs),
    /// Run a teacher × sparsity × seed grid.
    Sweep(SweepArgs),
    /// Analyze sweep results for the student-size buckets.
    Analyze(AnalyzeArgs),
    /// Training compute of a model (optionally distilled from a teacher).
    Estimate(EstimateArgs),
    /// Optimal teacher scale for a student, or student scale for a teacher.
    Law(LawArgs),
    /// Re-export sweep results as plot data.
    Export(ExportArgs),
}

/// Text corpus: a file, or generated text when no file is given.
#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct CorpusArgs {
    /// UTF-8 or raw-byte text file.
    #[arg(long)]
    corpus: Option<PathBuf>,
    /// Tokenizer scheme for new models: byte | char [default: char]
    #[arg(long)]
    scheme: Option<String>,
    /// Characters of generated text when no corpus file is given [default: 1000000]
    #[arg(long)]
    synthetic_chars: Option<usize>,
    /// Seed of the generated text [default: 7]
    #[arg(long)]
    synthetic_seed: Option<u64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct TrainArgs {
    /// JSON file with any of this command's options; flags take precedence.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data: CorpusArgs,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step training log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    /// [default: 4]
    #[arg(long)]
    layers: Option<usize>,
    /// [default: 64]
    #[arg(long)]
    hidden: Option<usize>,
    /// [default: 4]
    #[arg(long)]
    heads: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    head_dim: Option<usize>,
    /// FFN width [default: 4·hidden]
    #[arg(long)]
    ffn: Option<usize>,
    #[command(flatten)]
    #[serde(flatten)]
    opt: OptimArgs,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct OptimArgs {
    /// [default: 64]
    #[arg(long)]
    seq_len: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Peak learning rate [default: 3e-4]
    #[arg(long)]
    lr: Option<f64>,
    /// [default: 0.1]
    #[arg(long)]
    weight_decay: Option<f64>,
    /// [default: 0.01]
    #[arg(long)]
    warmup_fraction: Option<f64>,
    /// [default: 1.0]
    #[arg(long)]
    clip_norm: Option<f64>,
    /// [default: 1]
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer steps; overrides epochs.
    #[arg(long)]
    steps: Option<usize>,
    /// Steps between validation passes [default: 5% of the run]
    #[arg(long)]
    eval_interval: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
}

impl OptimArgs {
    fn train_config(&self, mode: TrainMode) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            peak_lr: self.lr.unwrap_or(d.peak_lr),
            weight_decay: self.weight_decay.unwrap_or(d.weight_decay),
            warmup_fraction: self.warmup_fraction.unwrap_or(d.warmup_fraction),
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(16),
            seq_len: self.seq_len.unwrap_or(64),
            clip_norm: self.clip_norm.unwrap_or(d.clip_norm),
            mode,
            seed: self.seed.unwrap_or(0),
            max_steps: self.steps,
            eval_interval: self.eval_interval,
            ..d
        }
    }
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct ScoreArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Checkpoint to score.
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data: CorpusArgs,
    /// Fraction of training windows used for scoring [default: 0.05]
    #[arg(long)]
    fraction: Option<f64>,
    /// [default: 64]
    #[arg(long)]
    seq_len: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Output score set (JSON).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct PruneArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Checkpoint to prune (left untouched).
    #[arg(long)]
    model: Option<PathBuf>,
    /// Score set from `score`.
    #[arg(long)]
    scores: Option<PathBuf>,
    /// Existing plan to replay instead of building one from scores.
    #[arg(long)]
    plan: Option<PathBuf>,
    /// Target parameter sparsity [default: 0.6]
    #[arg(long)]
    sparsity: Option<f64>,
    /// global | local [default: global]
    #[arg(long)]
    priority: Option<String>,
    /// Layers dropped in local priority (even) [default: ⌈L/4⌉ rounded down to even, lowered until feasible]
    #[arg(long)]
    layers_to_drop: Option<usize>,
    /// Pruned checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Where to write the plan (JSON).
    #[arg(long)]
    plan_out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct DistillArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Student checkpoint to start from (left untouched).
    #[arg(long)]
    student: Option<PathBuf>,
    /// Teacher checkpoint (distill mode).
    #[arg(long)]
    teacher: Option<PathBuf>,
    /// distill | direct [default: distill]
    #[arg(long)]
    mode: Option<String>,
    #[command(flatten)]
    #[serde(flatten)]
    data: CorpusArgs,
    #[command(flatten)]
    #[serde(flatten)]
    opt: OptimArgs,
    /// Output checkpoint.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Per-step training log (CSV).
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint written if training diverges.
    #[arg(long)]
    divergence_out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    model: Option<PathBuf>,
    #[command(flatten)]
    #[serde(flatten)]
    data: CorpusArgs,
    /// train | validation | test [default: test]
    #[arg(long)]
    split: Option<String>,
    /// [default: 64]
    #[arg(long)]
    seq_len: Option<usize>,
    /// [default: 16]
    #[arg(long)]
    batch_size: Option<usize>,
    /// Evaluate only the first N windows.
    #[arg(long)]
    max_windows: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct SweepArgs {
    /// Sweep spec (JSON); omitted fields take the default grid's values.
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Use the one-teacher smoke grid as the base spec.
    #[arg(long)]
    #[serde(skip)]
    smoke: bool,
    /// Output directory (results.csv, checkpoints, logs).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads (also CAPGAP_WORKERS) [default: 1]
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct AnalyzeArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// results.csv from `sweep`.
    #[arg(long)]
    results: Option<PathBuf>,
    /// Write the full analysis as JSON.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct EstimateArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Parameter count N.
    #[arg(long)]
    params: Option<f64>,
    /// Training tokens D.
    #[arg(long)]
    tokens: Option<f64>,
    /// Teacher parameter count for distillation.
    #[arg(long)]
    teacher_params: Option<f64>,
    /// Print the bundled table of published small-model estimates.
    #[arg(long)]
    #[serde(default)]
    table: bool,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct LawArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Student scale; prints the optimal teacher scale.
    #[arg(long)]
    student_scale: Option<f64>,
    /// Teacher scale; prints the optimal student scale.
    #[arg(long)]
    teacher_scale: Option<f64>,
    /// [default: 0.6]
    #[arg(long)]
    optimal_sparsity: Option<f64>,
}

#[derive(Args, Clone, Debug, Default, Serialize, Deserialize)]
struct ExportArgs {
    #[arg(long)]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long)]
    results: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

fn strip_nulls(v: Value) -> Value {
    match v {
        Value::Object(m) => Value::Object(m.into_iter().filter(|(_, v)| !v.is_null()).map(|(k, v)| (k, strip_nulls(v))).collect()),
        other => other,
    }
}

/// Overlays the flags onto the optional config file.
fn merge<A: Serialize + DeserializeOwned>(config: Option<&Path>, flags: &A) -> Result<A> {
    let mut base = match config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
            serde_json::from_str::<Value>(&text).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?
        }
        None => json!({}),
    };
    let Value::Object(map) = &mut base else {
        return Err(Error::Input("config file must hold a JSON object".into()));
    };
    if let Value::Object(over) = strip_nulls(serde_json::to_value(flags).expect("flags serialize")) {
        for (k, v) in over {
            if v != Value::Bool(false) || !map.contains_key(&k) {
                map.insert(k, v);
            }
        }
    }
    serde_json::from_value(base).map_err(|e| Error::Input(format!("config: {e}")))
}

fn echo(command: &str, resolved: Value) {
    eprintln!("{}", json!({ "command": command, "resolved": resolved }));
}

fn required<T: Clone>(v: &Option<T>, name: &str) -> Result<T> {
    v.clone().ok_or_else(|| Error::Validation(format!("--{name} is required")))
}

fn distinct(input: &Path, output: &Path) -> Result<()> {
    if input == output {
        return Err(Error::Validation(format!("refusing to overwrite input {}", input.display())));
    }
    Ok(())
}

fn load_model(path: &Path) -> Result<Checkpoint<f32>> {
    load_checkpoint::<f32>(path)
}

/// Loads the corpus, reusing the checkpoint's tokenizer when there is one.
fn load_corpus(args: &CorpusArgs, tokenizer: Option<&capgap::data::Tokenizer>) -> Result<Corpus> {
    match (&args.corpus, tokenizer) {
        (Some(p), Some(t)) => Corpus::from_file_with(p, t),
        (Some(p), None) => Corpus::from_file(p, args.scheme.as_deref().unwrap_or("char").parse::<Scheme>()?),
        (None, t) => {
            let text = generate(&SynthConfig::default(), args.synthetic_chars.unwrap_or(1_000_000), args.synthetic_seed.unwrap_or(7));
            match t {
                Some(t) => Corpus::new(t.encode(text.as_bytes())?, t.clone()),
                None => tokenize(text.as_bytes(), args.scheme.as_deref().unwrap_or("char").parse::<Scheme>()?),
            }
        }
    }
}

fn cmd_train(flags: &TrainArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let out = required(&a.out, "out")?;
    let corpus = load_corpus(&a.data, None)?;
    let cfg = a.opt.train_config(TrainMode::Direct);
    let hidden = a.hidden.unwrap_or(64);
    let config = ModelConfig::uniform(
        a.layers.unwrap_or(4),
        a.heads.unwrap_or(4),
        a.head_dim.unwrap_or(16),
        hidden,
        a.ffn.unwrap_or(4 * hidden),
        corpus.vocab_size(),
        cfg.seq_len,
    );
    echo("train", json!({ "args": a, "model": config, "train": cfg, "parameters": capgap::count_parameters(&config) }));
    let mut model = Transformer::<f32>::init(config, cfg.seed)?;
    let opts = TrainOptions { validation: Some(corpus.split(Split::Validation)), ..TrainOptions::default() };
    let record = train(&mut model, corpus.split(Split::Train), &cfg, &opts)?;
    if let Some(p) = &a.log {
        record.write_csv(p)?;
    }
    save_checkpoint_with(&model.config, &model.params, Some(&corpus.tokenizer), &out)?;
    let last = record.final_eval();
    println!(
        "trained {} parameters for {} steps ({} tokens); final loss {:.4}; val ppl {}",
        model.num_parameters(),
        record.steps.len(),
        record.tokens_seen(),
        record.steps.last().map_or(f64::NAN, |s| s.train_loss),
        last.map_or("n/a".to_string(), |e| format!("{:.4}", e.val_ppl))
    );
    Ok(())
}

fn cmd_score(flags: &ScoreArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let model_path = required(&a.model, "model")?;
    let out = required(&a.out, "out")?;
    let ckpt = load_model(&model_path)?;
    let corpus = load_corpus(&a.data, ckpt.tokenizer.as_ref())?;
    let (fraction, seq_len, bs, seed) = (a.fraction.unwrap_or(0.05), a.seq_len.unwrap_or(64), a.batch_size.unwrap_or(16), a.seed.unwrap_or(0));
    echo("score", json!({ "args": a, "fraction": fraction, "seq_len": seq_len, "batch_size": bs, "seed": seed }));
    let model = Transformer::new(ckpt.config, ckpt.params)?;
    let train_split = corpus.split(Split::Train);
    let subset = scoring_subset(train_split, fraction, seq_len, seed)?;
    let scores = accumulate_scores(&model, &subset.batches(train_split, bs))?;
    let text = serde_json::to_string_pretty(&scores).expect("scores serialize");
    std::fs::write(&out, text).map_err(|e| Error::Io { path: out.clone(), source: e })?;
    println!("scored {} batches ({} tokens); digest {}", scores.num_batches, subset.num_tokens(), scores.digest());
    Ok(())
}

fn cmd_prune(flags: &PruneArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let model_path = required(&a.model, "model")?;
    let out = required(&a.out, "out")?;
    distinct(&model_path, &out)?;
    if a.scores.is_none() && a.plan.is_none() {
        return Err(Error::Validation("prune needs --scores (or --plan to replay)".into()));
    }
    let ckpt = load_model(&model_path)?;
    let plan = match &a.plan {
        Some(p) => PruningPlan::from_json(&std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?)?,
        None => {
            let p = a.scores.as_ref().expect("checked above");
            let text = std::fs::read_to_string(p).map_err(|e| Error::Io { path: p.clone(), source: e })?;
            let scores: ScoreSet = serde_json::from_str(&text).map_err(|e| Error::Format(format!("score set: {e}")))?;
            let priority: Priority = a.priority.as_deref().unwrap_or("global").parse()?;
            let spec = PruningPlanSpec { target_sparsity: a.sparsity.unwrap_or(0.6), priority, layers_to_drop: a.layers_to_drop };
            build_plan(&normalize_scores(&scores), &ckpt.config, &spec)?
        }
    };
    echo("prune", json!({ "args": a, "plan_spec": plan.spec, "layers_dropped": plan.layers_dropped, "component_sparsity": plan.component_sparsity }));
    let model = Transformer::new(ckpt.config, ckpt.params)?;
    let pruned = prune(&model, &plan)?;
    if let Some(p) = &a.plan_out {
        std::fs::write(p, plan.to_json()).map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    save_checkpoint_with(&pruned.config, &pruned.params, ckpt.tokenizer.as_ref(), &out)?;
    let achieved = capgap::pruning::achieved_sparsity(&model.config, &pruned.config);
    println!(
        "pruned {} -> {} parameters (sparsity {:.4}, target {}); heads {:?}, ffn {:?}, hidden {}",
        model.num_parameters(),
        pruned.num_parameters(),
        achieved,
        plan.spec.target_sparsity,
        pruned.config.heads,
        pruned.config.ffn,
        pruned.config.hidden_dim
    );
    Ok(())
}

fn cmd_distill(flags: &DistillArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let student_path = required(&a.student, "student")?;
    let out = required(&a.out, "out")?;
    distinct(&student_path, &out)?;
    let mode: TrainMode = a.mode.as_deref().unwrap_or("distill").parse()?;
    let ckpt = load_model(&student_path)?;
    let teacher = match (mode, &a.teacher) {
        (TrainMode::Distill, None) => return Err(Error::Validation("distill mode needs --teacher".into())),
        (TrainMode::Distill, Some(p)) => {
            let t = load_model(p)?;
            Some(Transformer::new(t.config, t.params)?)
        }
        (TrainMode::Direct, _) => None,
    };
    let corpus = load_corpus(&a.data, ckpt.tokenizer.as_ref())?;
    let cfg = a.opt.train_config(mode);
    echo("distill", json!({ "args": a, "train": cfg }));
    let mut student = Transformer::new(ckpt.config, ckpt.params)?;
    let opts = TrainOptions {
        teacher: teacher.as_ref(),
        validation: Some(corpus.split(Split::Validation)),
        divergence_checkpoint: a.divergence_out.as_deref(),
    };
    let record = train(&mut student, corpus.split(Split::Train), &cfg, &opts)?;
    if let Some(p) = &a.log {
        record.write_csv(p)?;
    }
    save_checkpoint_with(&student.config, &student.params, ckpt.tokenizer.as_ref(), &out)?;
    println!(
        "{mode} run: {} steps, {} tokens, final loss {:.4}, val ppl {}",
        record.steps.len(),
        record.tokens_seen(),
        record.steps.last().map_or(f64::NAN, |s| s.train_loss),
        record.final_eval().map_or("n/a".to_string(), |e| format!("{:.4}", e.val_ppl))
    );
    Ok(())
}

fn cmd_eval(flags: &EvalArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let ckpt = load_model(&required(&a.model, "model")?)?;
    let corpus = load_corpus(&a.data, ckpt.tokenizer.as_ref())?;
    let split = match a.split.as_deref().unwrap_or("test") {
        "train" => Split::Train,
        "validation" => Split::Validation,
        "test" => Split::Test,
        s => return Err(Error::Input(format!("unknown split {s:?}"))),
    };
    let seq_len = a.seq_len.unwrap_or(64).min(ckpt.config.max_seq_len);
    let opts = EvalOptions { batch_size: a.batch_size.unwrap_or(16), max_windows: a.max_windows };
    echo("eval", json!({ "args": a, "seq_len": seq_len, "options": opts }));
    let model = Transformer::new(ckpt.config, ckpt.params)?;
    let name = a.split.clone().unwrap_or_else(|| "test".into());
    let report = evaluate(&model, corpus.split(split), seq_len, opts, &name)?;
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", report.csv_row());
    Ok(())
}

fn cmd_sweep(flags: &SweepArgs) -> Result<()> {
    let base = if flags.smoke { SweepSpec::smoke() } else { SweepSpec::default() };
    let mut spec_value = serde_json::to_value(&base).expect("spec serializes");
    if let Some(p) = &flags.config {
        let text = std::fs::read_to_string(p).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
        let over: Value = serde_json::from_str(&text).map_err(|e| Error::Input(format!("{}: {e}", p.display())))?;
        let (Value::Object(m), Value::Object(o)) = (&mut spec_value, over) else {
            return Err(Error::Input("sweep spec must be a JSON object".into()));
        };
        m.extend(o);
    }
    let mut spec = SweepSpec::from_json(&spec_value.to_string())?;
    if let Ok(w) = std::env::var("CAPGAP_WORKERS") {
        spec.workers = w.parse().map_err(|_| Error::Input(format!("CAPGAP_WORKERS={w:?} is not a count")))?;
    }
    if let Some(w) = flags.workers {
        spec.workers = w;
    }
    let out = required(&flags.out, "out")?;
    echo("sweep", json!({ "out": out, "spec": spec }));
    let result = run_sweep(&spec, &out)?;
    println!("{} rows ({} failed) written to {}", result.rows.len(), result.errors.len(), out.join("results.csv").display());
    for (k, m) in &result.errors {
        println!("failed {k}: {m}");
    }
    Ok(())
}

fn cmd_analyze(flags: &AnalyzeArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let rows = read_rows(&required(&a.results, "results")?)?;
    echo("analyze", json!({ "args": a, "rows": rows.len() }));
    let analysis = analyze_law(&rows)?;
    for b in &analysis.buckets {
        println!("bucket from {} student params:", b.anchor_params);
        let m = &b.mean;
        for i in 0..m.teacher_params.len() {
            println!(
                "  teacher {:>9}  sparsity {:.2}  student {:>8}  mean ppl {:.4}{}",
                m.teacher_params[i],
                m.sparsities[i],
                m.student_params[i],
                m.perplexities[i],
                if i == m.argmin { "  <- best" } else { "" }
            );
        }
        println!(
            "  non-monotone: {}  interior minimum: {}  curse in {}/{} seeds  implied sparsity {:.2}",
            m.non_monotone,
            m.interior_argmin,
            b.curse_seeds,
            b.per_seed.len(),
            m.implied_sparsity
        );
    }
    println!("optimal-sparsity spread across buckets: {:.4}", analysis.law_spread);
    for (t, p, wins, total) in distill_vs_direct(&rows) {
        println!("teacher {t} sparsity {p}: distillation at least as good as direct training in {wins}/{total} seeds");
    }
    if let Some(p) = &a.out {
        std::fs::write(p, serde_json::to_string_pretty(&analysis).expect("analysis serializes"))
            .map_err(|e| Error::Io { path: p.clone(), source: e })?;
    }
    Ok(())
}

fn cmd_estimate(flags: &EstimateArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    echo("estimate", json!({ "args": a }));
    if a.table {
        println!("model,params_b,tokens_b,teacher_b,flops,estimate,listed,reproduced");
        for r in COMPUTE_TABLE.iter() {
            let e = r.estimate()?;
            println!(
                "{},{},{},{},{:e},{},{:.1}×10⁹ TFLOPs,{}",
                r.model,
                r.params_b,
                r.tokens_b,
                r.teacher_b.map_or(String::new(), |t| t.to_string()),
                e.total,
                e.formatted(),
                r.reported_e9_tflops,
                r.reproduces()?
            );
        }
        return Ok(());
    }
    let n = required(&a.params, "params")?;
    let d = required(&a.tokens, "tokens")?;
    let e = match a.teacher_params {
        Some(t) => distillation_compute(n, t, d)?,
        None => training_compute(n, d)?,
    };
    println!("{:e} FLOPs", e.total);
    println!("{}", format_e9_tflops(e.total));
    println!("forward {:e}, backward {:e}, teacher {:e}", e.forward, e.backward, e.teacher);
    Ok(())
}

fn cmd_law(flags: &LawArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let law = LawConfig { optimal_sparsity: a.optimal_sparsity.unwrap_or(LawConfig::default().optimal_sparsity) };
    echo("law", json!({ "args": a, "law": law }));
    match (a.student_scale, a.teacher_scale) {
        (Some(s), None) => println!("optimal teacher scale {:e} for student scale {s:e}", law.optimal_teacher(s)?),
        (None, Some(t)) => println!("optimal student scale {:e} for teacher scale {t:e}", law.optimal_student(t)?),
        _ => return Err(Error::Validation("give exactly one of --student-scale and --teacher-scale".into())),
    }
    Ok(())
}

fn cmd_export(flags: &ExportArgs) -> Result<()> {
    let a = merge(flags.config.as_deref(), flags)?;
    let src = required(&a.results, "results")?;
    let out = required(&a.out, "out")?;
    echo("export", json!({ "args": a }));
    let rows = read_rows(&src)?;
    export_plot_data(&rows, &out)?;
    println!("exported {} rows to {}", rows.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().filter_or("CAPGAP_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(a) => cmd_train(a),
        Command::Score(a) => cmd_score(a),
        Command::Prune(a) => cmd_prune(a),
        Command::Distill(a) => cmd_distill(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Analyze(a) => cmd_analyze(a),
        Command::Estimate(a) => cmd_estimate(a),
        Command::Law(a) => cmd_law(a),
        Command::Export(a) => cmd_export(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}: {e}", e.category());
            ExitCode::from(1)
        }
    }
}
