//! Teacher-family × sparsity × seed grid: pretrain teachers, prune and
//! train students, evaluate, and analyze how student quality varies with
//! teacher scale.

use std::collections::BTreeSet;
use std::fs::{self, OpenOptions};
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{load_checkpoint, save_checkpoint_with};
use crate::compute::{distillation_compute, training_compute};
use crate::data::{scoring_subset, tokenize, Corpus, Scheme, Split};
use crate::error::{Error, Result};
use crate::evaluation::{evaluate, EvalOptions};
use crate::model::{count_parameters, ModelConfig, Transformer};
use crate::pruning::{accumulate_scores, build_plan, normalize_scores, prune, Priority, PruningPlanSpec};
use crate::synth::{generate, SynthConfig};
use crate::trainer::{train, TrainConfig, TrainMode, TrainOptions};

/// Uniform teacher architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TeacherShape {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn: usize,
}

impl TeacherShape {
    pub fn config(&self, vocab_size: usize, max_seq_len: usize) -> ModelConfig {
        ModelConfig::uniform(self.layers, self.heads, self.head_dim, self.hidden_dim, self.ffn, vocab_size, max_seq_len)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum CorpusSource {
    /// Generated text of about `chars` characters.
    Synthetic {
        chars: usize,
        seed: u64,
        #[serde(default)]
        config: SynthConfig,
    },
    File { path: PathBuf, scheme: Scheme },
}

impl CorpusSource {
    pub fn load(&self) -> Result<Corpus> {
        match self {
            CorpusSource::Synthetic { chars, seed, config } => tokenize(generate(config, *chars, *seed).as_bytes(), Scheme::Char),
            CorpusSource::File { path, scheme } => Corpus::from_file(path, *scheme),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    /// Ordered by strictly increasing parameter count.
    pub teachers: Vec<TeacherShape>,
    pub sparsities: Vec<f64>,
    pub seeds: Vec<u64>,
    pub corpus: CorpusSource,
    pub seq_len: usize,
    pub batch_size: usize,
    pub teacher_tokens: usize,
    pub student_tokens: usize,
    pub teacher_lr: f64,
    pub student_lr: f64,
    pub teacher_seed: u64,
    pub scoring_fraction: f64,
    pub priority: Priority,
    pub layers_to_drop: Option<usize>,
    /// Training modes run for every grid cell.
    pub modes: Vec<TrainMode>,
    /// Extra `(teacher index, sparsity)` cells trained in direct mode.
    pub direct_cells: Vec<(usize, f64)>,
    /// Distil every student from this teacher index instead of the one it
    /// was pruned from.
    pub teacher_override: Option<usize>,
    /// Validation windows evaluated for each row; `None` uses the split.
    pub eval_windows: Option<usize>,
    /// Validation windows per in-training evaluation.
    pub train_eval_windows: Option<usize>,
    pub workers: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let t = |hidden_dim: usize| TeacherShape { layers: 4, hidden_dim, heads: hidden_dim / 8, head_dim: 8, ffn: 4 * hidden_dim };
        SweepSpec {
            teachers: vec![t(48), t(56), t(64), t(80)],
            sparsities: vec![0.3, 0.45, 0.6, 0.75],
            seeds: vec![1, 2, 3],
            corpus: CorpusSource::Synthetic { chars: 4_000_000, seed: 7, config: SynthConfig::default() },
            seq_len: 64,
            batch_size: 16,
            teacher_tokens: 1_000_000,
            student_tokens: 300_000,
            teacher_lr: 2e-3,
            student_lr: 1e-3,
            teacher_seed: 11,
            scoring_fraction: 0.01,
            priority: Priority::Global,
            layers_to_drop: None,
            modes: vec![TrainMode::Distill],
            direct_cells: vec![(2, 0.6)],
            teacher_override: None,
            eval_windows: None,
            train_eval_windows: Some(32),
            workers: 1,
        }
    }
}

impl SweepSpec {
    /// One teacher, one sparsity, one seed, small budgets.
    pub fn smoke() -> Self {
        SweepSpec {
            teachers: vec![TeacherShape { layers: 2, hidden_dim: 32, heads: 4, head_dim: 8, ffn: 128 }],
            sparsities: vec![0.6],
            seeds: vec![1],
            corpus: CorpusSource::Synthetic { chars: 300_000, seed: 7, config: SynthConfig::default() },
            seq_len: 32,
            batch_size: 8,
            teacher_tokens: 60_000,
            student_tokens: 30_000,
            direct_cells: Vec::new(),
            eval_windows: Some(64),
            train_eval_windows: Some(8),
            ..SweepSpec::default()
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Input(format!("sweep spec: {e}")))
    }

    pub fn validate(&self, vocab_size: usize) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(format!("sweep spec: {m}")));
        if self.teachers.is_empty() || self.sparsities.is_empty() || self.seeds.is_empty() {
            return bad("teachers, sparsities and seeds must be nonempty".into());
        }
        let sizes: Vec<usize> = self.teachers.iter().map(|t| count_parameters(&t.config(vocab_size, self.seq_len))).collect();
        if sizes.windows(2).any(|w| w[0] >= w[1]) {
            return bad(format!("teacher parameter counts {sizes:?} are not strictly increasing"));
        }
        for t in &self.teachers {
            t.config(vocab_size, self.seq_len).validate()?;
        }
        if let Some(p) = self.sparsities.iter().chain(self.direct_cells.iter().map(|c| &c.1)).find(|p| !(0.0..1.0).contains(*p)) {
            return bad(format!("sparsity {p} outside [0, 1)"));
        }
        if self.direct_cells.iter().any(|c| c.0 >= self.teachers.len()) || self.teacher_override.is_some_and(|i| i >= self.teachers.len()) {
            return bad("teacher index out of range".into());
        }
        if self.seq_len == 0 || self.batch_size == 0 {
            return bad("seq_len and batch_size must be positive".into());
        }
        if self.teacher_tokens < self.batch_tokens() || self.student_tokens < self.batch_tokens() {
            return bad("token budgets must cover at least one batch".into());
        }
        Ok(())
    }

    pub fn batch_tokens(&self) -> usize {
        self.batch_size * self.seq_len
    }

    fn train_config(&self, lr: f64, tokens: usize, mode: TrainMode, seed: u64) -> TrainConfig {
        TrainConfig {
            peak_lr: lr,
            batch_size: self.batch_size,
            seq_len: self.seq_len,
            mode,
            seed,
            max_steps: Some(tokens / self.batch_tokens()),
            eval_windows: self.train_eval_windows,
            ..TrainConfig::default()
        }
    }

    /// Grid cells in canonical order.
    pub fn cells(&self) -> Vec<Cell> {
        let mut out = Vec::new();
        for mode in &self.modes {
            for (t, _) in self.teachers.iter().enumerate() {
                for &p in &self.sparsities {
                    for &seed in &self.seeds {
                        out.push(Cell { teacher: t, sparsity: p, seed, mode: *mode });
                    }
                }
            }
        }
        for &(t, p) in &self.direct_cells {
            for &seed in &self.seeds {
                out.push(Cell { teacher: t, sparsity: p, seed, mode: TrainMode::Direct });
            }
        }
        let mut seen = BTreeSet::new();
        out.retain(|c| seen.insert(c.key()));
        out
    }
}

/// One student run.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Cell {
    pub teacher: usize,
    pub sparsity: f64,
    pub seed: u64,
    pub mode: TrainMode,
}

impl Cell {
    pub fn key(&self) -> String {
        format!("t{}-p{:.4}-s{}-{}", self.teacher, self.sparsity, self.seed, self.mode)
    }
}

/// One line of the sweep result table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub teacher_params: usize,
    pub student_params: usize,
    pub sparsity: f64,
    pub seed: u64,
    pub mode: TrainMode,
    pub priority: Priority,
    pub val_ppl: f64,
    pub last_acc: f64,
    /// Estimated training compute of the student phase, in TFLOPs.
    pub est_tflops: f64,
}

pub const RESULT_HEADER: &str = "teacher_params,student_params,sparsity,seed,mode,priority,val_ppl,last_acc,est_tflops";

impl SweepRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.teacher_params,
            self.student_params,
            self.sparsity,
            self.seed,
            self.mode,
            self.priority,
            self.val_ppl,
            self.last_acc,
            self.est_tflops
        )
    }

    pub fn from_csv(line: &str) -> Result<Self> {
        let f: Vec<&str> = line.trim_end().split(',').collect();
        if f.len() != 9 {
            return Err(Error::Format(format!("expected 9 fields, found {}", f.len())));
        }
        let num = |i: usize| -> Result<f64> { f[i].parse().map_err(|e| Error::Format(format!("field {i}: {e}"))) };
        let int = |i: usize| -> Result<u64> { f[i].parse().map_err(|e| Error::Format(format!("field {i}: {e}"))) };
        Ok(SweepRow {
            teacher_params: int(0)? as usize,
            student_params: int(1)? as usize,
            sparsity: num(2)?,
            seed: int(3)?,
            mode: f[4].parse()?,
            priority: f[5].parse()?,
            val_ppl: num(6)?,
            last_acc: num(7)?,
            est_tflops: num(8)?,
        })
    }

    fn sort_key(&self) -> (usize, u64, u8, usize, u64) {
        (self.teacher_params, self.sparsity.to_bits(), matches!(self.mode, TrainMode::Direct) as u8, self.seed as usize, self.student_params as u64)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// `(cell key, message)` for cells that failed.
    pub errors: Vec<(String, String)>,
}

/// Writes rows with the documented header.
pub fn export_plot_data(rows: &[SweepRow], path: &Path) -> Result<()> {
    if rows.is_empty() {
        return Err(Error::Export("no rows to export".into()));
    }
    let mut text = String::from(RESULT_HEADER);
    text.push('\n');
    for r in rows {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::Export(format!("{}: {e}", path.display())))
}

/// Reads a result table, skipping lines that do not parse (e.g. a row torn
/// by an interrupted write).
pub fn read_rows(path: &Path) -> Result<Vec<SweepRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == RESULT_HEADER => {}
        _ => return Err(Error::Format(format!("{} lacks the result header", path.display()))),
    }
    Ok(lines.filter_map(|l| SweepRow::from_csv(l).ok()).collect())
}

struct Paths {
    root: PathBuf,
}

impl Paths {
    fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }
    fn errors(&self) -> PathBuf {
        self.root.join("errors.log")
    }
    fn teacher(&self, i: usize) -> PathBuf {
        self.root.join("teachers").join(format!("teacher-{i}.cglb"))
    }
    fn student(&self, key: &str) -> PathBuf {
        self.root.join("students").join(format!("{key}.cglb"))
    }
    fn run_log(&self, key: &str) -> PathBuf {
        self.root.join("runs").join(format!("{key}.csv"))
    }
}

fn mkdirs(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn run_pool<J: Sync, R: Send>(jobs: &[J], workers: usize, f: impl Fn(&J) -> R + Sync) -> Vec<R> {
    let workers = workers.clamp(1, jobs.len().max(1));
    if workers == 1 {
        return jobs.iter().map(f).collect();
    }
    let next = Mutex::new(0usize);
    let out: Vec<Mutex<Option<R>>> = jobs.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("queue lock");
                    let i = *n;
                    *n += 1;
                    i
                };
                if i >= jobs.len() {
                    break;
                }
                let r = f(&jobs[i]);
                *out[i].lock().expect("slot lock") = Some(r);
            });
        }
    });
    out.into_iter().map(|m| m.into_inner().expect("slot lock").expect("job ran")).collect()
}

/// Trains (or reloads) teacher `i`.
fn prepare_teacher(spec: &SweepSpec, corpus: &Corpus, paths: &Paths, i: usize) -> Result<Transformer<f32>> {
    let config = spec.teachers[i].config(corpus.vocab_size(), spec.seq_len);
    let path = paths.teacher(i);
    if path.exists() {
        let c = load_checkpoint::<f32>(&path)?;
        if c.config == config {
            log::info!("teacher {i}: reusing {}", path.display());
            return Transformer::new(c.config, c.params);
        }
        log::warn!("teacher {i}: checkpoint config differs, retraining");
    }
    let mut model = Transformer::<f32>::init(config, spec.teacher_seed.wrapping_add(i as u64))?;
    let cfg = spec.train_config(spec.teacher_lr, spec.teacher_tokens, TrainMode::Direct, spec.teacher_seed);
    log::info!("teacher {i}: {} parameters, {} steps", model.num_parameters(), cfg.max_steps.unwrap_or(0));
    let opts = TrainOptions { validation: Some(corpus.split(Split::Validation)), ..TrainOptions::default() };
    let record = train(&mut model, corpus.split(Split::Train), &cfg, &opts)?;
    record.write_csv(&paths.root.join("teachers").join(format!("teacher-{i}.csv")))?;
    save_checkpoint_with(&model.config, &model.params, Some(&corpus.tokenizer), &path)?;
    Ok(model)
}

fn run_cell(spec: &SweepSpec, corpus: &Corpus, teachers: &[Transformer<f32>], paths: &Paths, cell: &Cell) -> Result<SweepRow> {
    let source = &teachers[cell.teacher];
    let train_split = corpus.split(Split::Train);
    let subset = scoring_subset(train_split, spec.scoring_fraction, spec.seq_len, cell.seed)?;
    let batches = subset.batches(train_split, spec.batch_size);
    let scores = normalize_scores(&accumulate_scores(source, &batches)?);
    let plan_spec = PruningPlanSpec { target_sparsity: cell.sparsity, priority: spec.priority, layers_to_drop: spec.layers_to_drop };
    let plan = build_plan(&scores, &source.config, &plan_spec)?;
    let mut student = prune(source, &plan)?;

    let distill_teacher = &teachers[spec.teacher_override.unwrap_or(cell.teacher)];
    let cfg = spec.train_config(spec.student_lr, spec.student_tokens, cell.mode, cell.seed);
    let opts = TrainOptions {
        teacher: Some(distill_teacher),
        validation: Some(corpus.split(Split::Validation)),
        ..TrainOptions::default()
    };
    let record = train(&mut student, train_split, &cfg, &opts)?;
    let key = cell.key();
    record.write_csv(&paths.run_log(&key))?;
    fs::write(paths.root.join("runs").join(format!("{key}.plan.json")), plan.to_json()).map_err(|e| Error::io(&paths.root, e))?;
    save_checkpoint_with(&student.config, &student.params, Some(&corpus.tokenizer), &paths.student(&key))?;

    let eval_opts = EvalOptions { batch_size: spec.batch_size, max_windows: spec.eval_windows };
    let report = evaluate(&student, corpus.split(Split::Validation), spec.seq_len, eval_opts, "validation")?;
    let n = student.num_parameters() as f64;
    let d = record.tokens_seen() as f64;
    let flops = match cell.mode {
        TrainMode::Distill => distillation_compute(n, distill_teacher.num_parameters() as f64, d)?,
        TrainMode::Direct => training_compute(n, d)?,
    };
    Ok(SweepRow {
        teacher_params: source.num_parameters(),
        student_params: student.num_parameters(),
        sparsity: cell.sparsity,
        seed: cell.seed,
        mode: cell.mode,
        priority: spec.priority,
        val_ppl: report.perplexity,
        last_acc: report.last_token_accuracy,
        est_tflops: flops.total / 1e12,
    })
}

fn error_row(spec: &SweepSpec, cell: &Cell, teacher_params: usize) -> SweepRow {
    SweepRow {
        teacher_params,
        student_params: 0,
        sparsity: cell.sparsity,
        seed: cell.seed,
        mode: cell.mode,
        priority: spec.priority,
        val_ppl: f64::NAN,
        last_acc: f64::NAN,
        est_tflops: f64::NAN,
    }
}

fn row_key(teacher_params: usize, sparsity: f64, seed: u64, mode: TrainMode) -> (usize, u64, u64, bool) {
    (teacher_params, sparsity.to_bits(), seed, mode == TrainMode::Distill)
}

/// Runs the grid under `output_dir`, resuming from any rows already in
/// `results.csv`. Rows are appended as cells finish and the file is
/// rewritten in canonical order at the end.
pub fn run_sweep(spec: &SweepSpec, output_dir: &Path) -> Result<SweepResult> {
    let corpus = spec.corpus.load()?;
    spec.validate(corpus.vocab_size())?;
    let paths = Paths { root: output_dir.to_path_buf() };
    for sub in ["teachers", "students", "runs"] {
        mkdirs(&paths.root.join(sub))?;
    }
    fs::write(paths.root.join("spec.json"), serde_json::to_string_pretty(spec).expect("spec serializes"))
        .map_err(|e| Error::io(&paths.root, e))?;

    let results = paths.results();
    let mut done: Vec<SweepRow> = if results.exists() { read_rows(&results).unwrap_or_default() } else { Vec::new() };
    let teacher_sizes: Vec<usize> =
        spec.teachers.iter().map(|t| count_parameters(&t.config(corpus.vocab_size(), spec.seq_len))).collect();
    let cells = spec.cells();
    let wanted: BTreeSet<_> = cells.iter().map(|c| row_key(teacher_sizes[c.teacher], c.sparsity, c.seed, c.mode)).collect();
    done.retain(|r| wanted.contains(&row_key(r.teacher_params, r.sparsity, r.seed, r.mode)));
    let finished: BTreeSet<_> = done.iter().map(|r| row_key(r.teacher_params, r.sparsity, r.seed, r.mode)).collect();
    let todo: Vec<Cell> =
        cells.into_iter().filter(|c| !finished.contains(&row_key(teacher_sizes[c.teacher], c.sparsity, c.seed, c.mode))).collect();

    let mut text = String::from(RESULT_HEADER);
    text.push('\n');
    for r in &done {
        text.push_str(&r.to_csv());
        text.push('\n');
    }
    fs::write(&results, text).map_err(|e| Error::io(&results, e))?;
    log::info!("sweep: {} rows done, {} to run", done.len(), todo.len());

    let needed: BTreeSet<usize> = todo
        .iter()
        .flat_map(|c| [c.teacher, spec.teacher_override.unwrap_or(c.teacher)])
        .collect();
    let teacher_jobs: Vec<usize> = (0..spec.teachers.len()).collect();
    let loaded = run_pool(&teacher_jobs, spec.workers, |&i| {
        if needed.contains(&i) {
            prepare_teacher(spec, &corpus, &paths, i).map(Some)
        } else {
            Ok(None)
        }
    });
    let mut teachers = Vec::with_capacity(loaded.len());
    let mut teacher_errors = Vec::new();
    for (i, t) in loaded.into_iter().enumerate() {
        match t {
            Ok(Some(t)) => teachers.push(t),
            Ok(None) => teachers.push(Transformer::init(spec.teachers[i].config(corpus.vocab_size(), spec.seq_len), 0)?),
            Err(e) => {
                teacher_errors.push(i);
                log::error!("teacher {i} failed: {e}");
                teachers.push(Transformer::init(spec.teachers[i].config(corpus.vocab_size(), spec.seq_len), 0)?);
            }
        }
    }

    let sink = Mutex::new((OpenOptions::new().append(true).open(&results).map_err(|e| Error::io(&results, e))?, Vec::new()));
    let outcomes = run_pool(&todo, spec.workers, |cell| {
        let key = cell.key();
        let used = spec.teacher_override.unwrap_or(cell.teacher);
        let result = if teacher_errors.contains(&cell.teacher) || teacher_errors.contains(&used) {
            Err(Error::Validation("teacher training failed".into()))
        } else {
            log::info!("cell {key}: start");
            run_cell(spec, &corpus, &teachers, &paths, cell)
        };
        let (row, err) = match result {
            Ok(r) => (r, None),
            Err(e) => (error_row(spec, cell, teacher_sizes[cell.teacher]), Some(format!("{}: {e}", e.category()))),
        };
        let mut guard = sink.lock().expect("sink lock");
        let (file, errors) = &mut *guard;
        let _ = file.write_all(format!("{}\n", row.to_csv()).as_bytes()).and_then(|_| file.flush());
        if let Some(msg) = &err {
            log::error!("cell {key}: {msg}");
            errors.push((key.clone(), msg.clone()));
        } else {
            log::info!("cell {key}: ppl {:.4}", row.val_ppl);
        }
        row
    });
    let (_, errors) = sink.into_inner().expect("sink lock");
    if !errors.is_empty() {
        let mut log = OpenOptions::new().create(true).append(true).open(paths.errors()).map_err(|e| Error::io(paths.errors(), e))?;
        for (k, m) in &errors {
            let _ = writeln!(log, "{k}\t{m}");
        }
    }

    let mut rows = done;
    rows.extend(outcomes);
    rows.sort_by_key(|r| r.sort_key());
    export_plot_data(&rows, &results)?;
    Ok(SweepResult { rows, errors })
}

/// Curve of one student bucket for one seed (or the seed mean).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveAnalysis {
    pub seed: Option<u64>,
    pub teacher_params: Vec<usize>,
    pub student_params: Vec<usize>,
    pub sparsities: Vec<f64>,
    pub perplexities: Vec<f64>,
    pub argmin: usize,
    pub optimal_teacher_params: usize,
    pub implied_sparsity: f64,
    /// Neither non-increasing nor non-decreasing.
    pub non_monotone: bool,
    /// Minimum strictly inside the teacher range.
    pub interior_argmin: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BucketAnalysis {
    /// Smallest student size in the bucket.
    pub anchor_params: usize,
    pub per_seed: Vec<CurveAnalysis>,
    pub mean: CurveAnalysis,
    /// Seeds whose curve is non-monotone with an interior minimum.
    pub curse_seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LawAnalysis {
    pub buckets: Vec<BucketAnalysis>,
    /// Range of the seed-mean implied optimal sparsities across buckets.
    pub law_spread: f64,
}

/// Strict argmin (first minimum wins), whether the curve is non-monotone,
/// and whether the minimum is interior.
pub fn curve_verdict(values: &[f64]) -> (usize, bool, bool) {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v < values[best] {
            best = i;
        }
    }
    let up = values.windows(2).all(|w| w[1] >= w[0]);
    let down = values.windows(2).all(|w| w[1] <= w[0]);
    (best, !(up || down), best > 0 && best + 1 < values.len())
}

fn curve(seed: Option<u64>, points: &[(usize, usize, f64, f64)]) -> CurveAnalysis {
    let ppl: Vec<f64> = points.iter().map(|p| p.3).collect();
    let (argmin, non_monotone, interior_argmin) = curve_verdict(&ppl);
    CurveAnalysis {
        seed,
        teacher_params: points.iter().map(|p| p.0).collect(),
        student_params: points.iter().map(|p| p.1).collect(),
        sparsities: points.iter().map(|p| p.2).collect(),
        perplexities: ppl,
        argmin,
        optimal_teacher_params: points[argmin].0,
        implied_sparsity: points[argmin].2,
        non_monotone,
        interior_argmin,
    }
}

/// Relative half-width of a student-size bucket.
pub const BUCKET_TOLERANCE: f64 = 0.15;

/// Groups distilled rows into student-size buckets and reads off, per
/// bucket, how perplexity moves with teacher scale.
pub fn analyze_law(rows: &[SweepRow]) -> Result<LawAnalysis> {
    let mut usable: Vec<&SweepRow> =
        rows.iter().filter(|r| r.mode == TrainMode::Distill && r.val_ppl.is_finite() && r.student_params > 0).collect();
    usable.sort_by(|a, b| a.student_params.cmp(&b.student_params).then(a.teacher_params.cmp(&b.teacher_params)));
    let mut groups: Vec<Vec<&SweepRow>> = Vec::new();
    let span = (1.0 + BUCKET_TOLERANCE) / (1.0 - BUCKET_TOLERANCE);
    for r in usable {
        match groups.last_mut() {
            Some(g) if (r.student_params as f64) <= g[0].student_params as f64 * span => g.push(r),
            _ => groups.push(vec![r]),
        }
    }
    let mut buckets = Vec::new();
    for g in groups {
        // one (teacher, sparsity) configuration per teacher: the first seen
        let mut configs: Vec<(usize, u64)> = Vec::new();
        for r in &g {
            if !configs.iter().any(|c| c.0 == r.teacher_params) {
                configs.push((r.teacher_params, r.sparsity.to_bits()));
            }
        }
        if configs.len() < 2 {
            continue;
        }
        configs.sort();
        let seeds: BTreeSet<u64> = g.iter().map(|r| r.seed).collect();
        let mut per_seed = Vec::new();
        for &seed in &seeds {
            let pts: Vec<(usize, usize, f64, f64)> = configs
                .iter()
                .filter_map(|&(t, p)| {
                    g.iter()
                        .find(|r| r.seed == seed && r.teacher_params == t && r.sparsity.to_bits() == p)
                        .map(|r| (t, r.student_params, r.sparsity, r.val_ppl))
                })
                .collect();
            if pts.len() == configs.len() {
                per_seed.push(curve(Some(seed), &pts));
            }
        }
        if per_seed.is_empty() {
            continue;
        }
        let mean_pts: Vec<(usize, usize, f64, f64)> = (0..configs.len())
            .map(|i| {
                let c = &per_seed[0];
                let m = per_seed.iter().map(|s| s.perplexities[i]).sum::<f64>() / per_seed.len() as f64;
                (c.teacher_params[i], c.student_params[i], c.sparsities[i], m)
            })
            .collect();
        let curse_seeds = per_seed.iter().filter(|c| c.non_monotone && c.interior_argmin).count();
        buckets.push(BucketAnalysis { anchor_params: g[0].student_params, mean: curve(None, &mean_pts), per_seed, curse_seeds });
    }
    if buckets.is_empty() {
        return Err(Error::Analysis("no student bucket holds two or more teacher scales".into()));
    }
    let implied: Vec<f64> = buckets.iter().map(|b| b.mean.implied_sparsity).collect();
    let lo = implied.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = implied.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(LawAnalysis { buckets, law_spread: hi - lo })
}

/// Seeds at which the distilled student beats (or ties) the directly
/// trained one, per `(teacher_params, sparsity)` with both modes present.
pub fn distill_vs_direct(rows: &[SweepRow]) -> Vec<(usize, f64, usize, usize)> {
    let mut out = Vec::new();
    let directs: BTreeSet<(usize, u64)> =
        rows.iter().filter(|r| r.mode == TrainMode::Direct).map(|r| (r.teacher_params, r.sparsity.to_bits())).collect();
    for (t, p) in directs {
        let mut wins = 0;
        let mut total = 0;
        for d in rows.iter().filter(|r| r.mode == TrainMode::Direct && r.teacher_params == t && r.sparsity.to_bits() == p) {
            if let Some(k) = rows
                .iter()
                .find(|r| r.mode == TrainMode::Distill && r.teacher_params == t && r.sparsity.to_bits() == p && r.seed == d.seed)
            {
                total += 1;
                if k.val_ppl <= d.val_ppl {
                    wins += 1;
                }
            }
        }
        if total > 0 {
            out.push((t, f64::from_bits(p), wins, total));
        }
    }
    out
}
