//! Expressive scores, sparsity decomposition, plan construction and
//! physical surgery.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::Tape;
use crate::data::PackedBatch;
use crate::error::{Error, Result};
use crate::model::{forward, LayerParams, MaskSet, ModelConfig, ModelParameters, Transformer};
use crate::scalar::Scalar;

/// Accumulated absolute mask gradients, shaped like a [`MaskSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreSet {
    pub heads: Vec<Vec<f64>>,
    pub neurons: Vec<Vec<f64>>,
    pub hidden: Vec<f64>,
    pub num_batches: usize,
}

impl ScoreSet {
    pub fn zeros(config: &ModelConfig) -> Self {
        ScoreSet {
            heads: config.heads.iter().map(|&a| vec![0.0; a]).collect(),
            neurons: config.ffn.iter().map(|&i| vec![0.0; i]).collect(),
            hidden: vec![0.0; config.hidden_dim],
            num_batches: 0,
        }
    }

    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let heads: Vec<usize> = self.heads.iter().map(Vec::len).collect();
        let ffn: Vec<usize> = self.neurons.iter().map(Vec::len).collect();
        if heads != config.heads || ffn != config.ffn || self.hidden.len() != config.hidden_dim {
            return Err(Error::Validation("score extents do not match the model config".into()));
        }
        Ok(())
    }

    fn values(&self) -> impl Iterator<Item = f64> + '_ {
        self.heads
            .iter()
            .flatten()
            .chain(self.neurons.iter().flatten())
            .chain(&self.hidden)
            .copied()
    }

    pub fn is_nonnegative(&self) -> bool {
        self.values().all(|v| v >= 0.0)
    }

    /// SHA-256 over the extents and little-endian f64 values.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        for group in self.heads.iter().chain(&self.neurons).chain(std::iter::once(&self.hidden)) {
            h.update((group.len() as u64).to_le_bytes());
            for v in group {
                h.update(v.to_le_bytes());
            }
        }
        h.update((self.num_batches as u64).to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Mean over `batches` of the absolute gradient of each batch's mean
/// next-token cross-entropy with respect to all-ones probe masks.
pub fn accumulate_scores<'a, T: Scalar>(
    model: &Transformer<T>,
    batches: impl IntoIterator<Item = &'a PackedBatch>,
) -> Result<ScoreSet> {
    let config = &model.config;
    let ones = MaskSet::<T>::ones(config);
    let mut scores = ScoreSet::zeros(config);
    for batch in batches {
        let mut tape = Tape::new();
        let p = model.params.to_tape(&mut tape, false);
        let m = ones.to_tape(&mut tape, true);
        let logits = forward(&mut tape, config, &p, Some(&m), &batch.inputs, batch.batch, batch.seq_len)?;
        let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();
        let loss = tape.cross_entropy_ids(logits, &targets)?;
        if !tape.value(loss).data()[0].is_finite() {
            return Err(Error::Numeric("non-finite loss while scoring".into()));
        }
        let grads = tape.backward(loss)?;
        let add = |dst: &mut [f64], var| {
            if let Some(g) = grads.get(var) {
                for (d, v) in dst.iter_mut().zip(g.data()) {
                    *d += v.as_f64().abs();
                }
            }
        };
        for (l, v) in m.heads.iter().enumerate() {
            if let Some(v) = v {
                add(&mut scores.heads[l], *v);
            }
        }
        for (l, v) in m.neurons.iter().enumerate() {
            if let Some(v) = v {
                add(&mut scores.neurons[l], *v);
            }
        }
        add(&mut scores.hidden, m.hidden);
        scores.num_batches += 1;
    }
    if scores.num_batches == 0 {
        return Err(Error::Input("no scoring batches".into()));
    }
    let n = scores.num_batches as f64;
    for g in scores.heads.iter_mut().chain(scores.neurons.iter_mut()).chain(std::iter::once(&mut scores.hidden)) {
        for v in g.iter_mut() {
            *v /= n;
        }
    }
    Ok(scores)
}

fn normalize_group(g: &mut [f64]) {
    let norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > 0.0 {
        for v in g.iter_mut() {
            *v /= norm;
        }
    }
}

/// Scales each group (one layer's heads, one layer's neurons, the hidden
/// vector) to unit ℓ2 norm; all-zero groups stay zero.
pub fn normalize_scores(scores: &ScoreSet) -> ScoreSet {
    let mut out = scores.clone();
    for g in out.heads.iter_mut().chain(out.neurons.iter_mut()) {
        normalize_group(g);
    }
    normalize_group(&mut out.hidden);
    out
}

/// Per-component sparsity that realizes overall parameter sparsity `p`
/// after dropping `k` of `num_layers` layers: `1 − √((1−p)/(1−k/L))`.
pub fn decompose_sparsity(p: f64, num_layers: usize, k: usize) -> Result<f64> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Input(format!("target sparsity {p} must lie in [0, 1)")));
    }
    if !k.is_multiple_of(2) {
        return Err(Error::Input(format!("layers to drop must be even, got {k}")));
    }
    if k > 0 && k >= num_layers {
        return Err(Error::InfeasiblePlan(format!("cannot drop {k} of {num_layers} layers")));
    }
    let kept = if k == 0 { 1.0 } else { 1.0 - k as f64 / num_layers as f64 };
    let retained = 1.0 - p;
    if retained > kept {
        return Err(Error::InfeasiblePlan(format!(
            "dropping {k} of {num_layers} layers already removes more than the target sparsity {p}"
        )));
    }
    Ok(1.0 - (retained / kept).sqrt())
}

/// Default layer-drop count for local plans: ⌈L/4⌉ rounded down to even,
/// lowered in steps of two until it no longer overshoots `p`.
pub fn default_layers_to_drop(num_layers: usize, p: f64) -> usize {
    let mut k = num_layers.div_ceil(4) / 2 * 2;
    while k > 0 && decompose_sparsity(p, num_layers, k).is_err() {
        k -= 2;
    }
    k
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Priority {
    /// Units ranked across all layers; layers may empty.
    Global,
    /// Units ranked within each layer after dropping bottom and top layers.
    Local,
}

impl fmt::Display for Priority {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Priority::Global => "global",
            Priority::Local => "local",
        })
    }
}

impl std::str::FromStr for Priority {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "global" => Ok(Priority::Global),
            "local" => Ok(Priority::Local),
            _ => Err(Error::Input(format!("unknown priority {s:?}, expected global or local"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlanSpec {
    pub target_sparsity: f64,
    pub priority: Priority,
    /// Local mode only; `None` picks [`default_layers_to_drop`].
    #[serde(default)]
    pub layers_to_drop: Option<usize>,
}

impl PruningPlanSpec {
    pub fn global(p: f64) -> Self {
        PruningPlanSpec { target_sparsity: p, priority: Priority::Global, layers_to_drop: None }
    }

    pub fn local(p: f64, k: Option<usize>) -> Self {
        PruningPlanSpec { target_sparsity: p, priority: Priority::Local, layers_to_drop: k }
    }

    /// `(k, component sparsity)` for a model of `num_layers` layers.
    pub fn resolve(&self, num_layers: usize) -> Result<(usize, f64)> {
        let k = match self.priority {
            Priority::Global => {
                if self.layers_to_drop.is_some_and(|k| k > 0) {
                    return Err(Error::Input("layer dropping applies to local priority only".into()));
                }
                0
            }
            Priority::Local => self
                .layers_to_drop
                .unwrap_or_else(|| default_layers_to_drop(num_layers, self.target_sparsity)),
        };
        Ok((k, decompose_sparsity(self.target_sparsity, num_layers, k)?))
    }
}

/// Kept units of a pruned model, in the original model's indexing.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PruningPlan {
    pub spec: PruningPlanSpec,
    pub layers_dropped: usize,
    pub component_sparsity: f64,
    pub source_heads: Vec<usize>,
    pub source_ffn: Vec<usize>,
    pub source_hidden: usize,
    /// Ascending original layer indices.
    pub kept_layers: Vec<usize>,
    /// One entry per kept layer, ascending unit indices.
    pub kept_heads: Vec<Vec<usize>>,
    pub kept_neurons: Vec<Vec<usize>>,
    pub kept_hidden: Vec<usize>,
    pub score_digest: String,
}

impl PruningPlan {
    /// Keeps every unit of `config`.
    pub fn identity(config: &ModelConfig) -> Self {
        PruningPlan {
            spec: PruningPlanSpec::global(0.0),
            layers_dropped: 0,
            component_sparsity: 0.0,
            source_heads: config.heads.clone(),
            source_ffn: config.ffn.clone(),
            source_hidden: config.hidden_dim,
            kept_layers: (0..config.num_layers()).collect(),
            kept_heads: config.heads.iter().map(|&a| (0..a).collect()).collect(),
            kept_neurons: config.ffn.iter().map(|&i| (0..i).collect()).collect(),
            kept_hidden: (0..config.hidden_dim).collect(),
            score_digest: String::new(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plan serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("pruning plan: {e}")))
    }

    pub fn check_against(&self, config: &ModelConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::Validation(format!("plan does not fit the model: {msg}")));
        if self.source_heads != config.heads || self.source_ffn != config.ffn || self.source_hidden != config.hidden_dim {
            return bad("source extents differ".into());
        }
        let n = self.kept_layers.len();
        if self.kept_heads.len() != n || self.kept_neurons.len() != n {
            return bad("per-layer lists do not match kept_layers".into());
        }
        let ascending_below = |v: &[usize], limit: usize| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|&i| i < limit);
        if !ascending_below(&self.kept_layers, config.num_layers()) {
            return bad("kept_layers must be ascending and in range".into());
        }
        for (j, &l) in self.kept_layers.iter().enumerate() {
            if !ascending_below(&self.kept_heads[j], config.heads[l]) || !ascending_below(&self.kept_neurons[j], config.ffn[l]) {
                return bad(format!("layer {l} unit indices out of range or unsorted"));
            }
        }
        if self.kept_hidden.is_empty() || !ascending_below(&self.kept_hidden, config.hidden_dim) {
            return bad("kept_hidden must be nonempty, ascending and in range".into());
        }
        Ok(())
    }

    /// 0/1 masks of the original model realizing this plan; dropped layers
    /// get all-zero head and neuron masks.
    pub fn masks<T: Scalar>(&self, config: &ModelConfig) -> Result<MaskSet<T>> {
        self.check_against(config)?;
        let mut m = MaskSet::<T> {
            heads: config.heads.iter().map(|&a| vec![T::zero(); a]).collect(),
            neurons: config.ffn.iter().map(|&i| vec![T::zero(); i]).collect(),
            hidden: vec![T::zero(); config.hidden_dim],
        };
        for (j, &l) in self.kept_layers.iter().enumerate() {
            for &h in &self.kept_heads[j] {
                m.heads[l][h] = T::one();
            }
            for &i in &self.kept_neurons[j] {
                m.neurons[l][i] = T::one();
            }
        }
        for &h in &self.kept_hidden {
            m.hidden[h] = T::one();
        }
        Ok(m)
    }
}

fn count_to_remove(fraction: f64, n: usize) -> usize {
    // tolerate representation error in products that are whole numbers
    ((fraction * n as f64 - 1e-9).ceil().max(0.0) as usize).min(n)
}

/// Indices of `scores` sorted by (score, index) ascending.
fn rank(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]).then(a.cmp(&b)));
    idx
}

fn keep_complement(n: usize, removed: impl IntoIterator<Item = usize>) -> Vec<usize> {
    let mut keep = vec![true; n];
    for r in removed {
        keep[r] = false;
    }
    (0..n).filter(|&i| keep[i]).collect()
}

fn hidden_keep(scores: &ScoreSet, q: f64) -> Result<Vec<usize>> {
    let d = scores.hidden.len();
    let r = count_to_remove(q, d);
    if r >= d {
        return Err(Error::InfeasiblePlan(format!("component sparsity {q:.4} removes every hidden dimension")));
    }
    Ok(keep_complement(d, rank(&scores.hidden).into_iter().take(r)))
}

/// Removes the globally lowest-scoring units of each type.
fn global_keep(groups: &[Vec<f64>], q: f64) -> Vec<Vec<usize>> {
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (l, g) in groups.iter().enumerate() {
        all.extend(g.iter().enumerate().map(|(u, &s)| (s, l, u)));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let r = count_to_remove(q, all.len());
    let mut removed: Vec<Vec<usize>> = vec![Vec::new(); groups.len()];
    for &(_, l, u) in &all[..r] {
        removed[l].push(u);
    }
    groups
        .iter()
        .zip(removed)
        .map(|(g, rm)| keep_complement(g.len(), rm))
        .collect()
}

/// Builds a plan from normalized scores. Global priority ranks each unit
/// type across layers; local priority drops bottom and top layers, then
/// removes the same fraction of units inside every kept layer.
pub fn build_plan(scores: &ScoreSet, config: &ModelConfig, spec: &PruningPlanSpec) -> Result<PruningPlan> {
    scores.check_against(config)?;
    let num_layers = config.num_layers();
    let (k, q) = spec.resolve(num_layers)?;
    let kept_hidden = hidden_keep(scores, q)?;
    let (kept_layers, kept_heads, kept_neurons) = match spec.priority {
        Priority::Global => ((0..num_layers).collect(), global_keep(&scores.heads, q), global_keep(&scores.neurons, q)),
        Priority::Local => {
            let layers: Vec<usize> = (k / 2..num_layers - k / 2).collect();
            let mut heads = Vec::with_capacity(layers.len());
            let mut neurons = Vec::with_capacity(layers.len());
            for &l in &layers {
                for (group, out, what) in [(&scores.heads[l], &mut heads, "head"), (&scores.neurons[l], &mut neurons, "neuron")] {
                    let n = group.len();
                    let r = count_to_remove(q, n);
                    if n > 0 && r >= n {
                        return Err(Error::InfeasiblePlan(format!(
                            "component sparsity {q:.4} empties every {what} of layer {l}"
                        )));
                    }
                    out.push(keep_complement(n, rank(group).into_iter().take(r)));
                }
            }
            (layers, heads, neurons)
        }
    };
    Ok(PruningPlan {
        spec: spec.clone(),
        layers_dropped: k,
        component_sparsity: q,
        source_heads: config.heads.clone(),
        source_ffn: config.ffn.clone(),
        source_hidden: config.hidden_dim,
        kept_layers,
        kept_heads,
        kept_neurons,
        kept_hidden,
        score_digest: scores.digest(),
    })
}

pub fn build_plan_global(scores: &ScoreSet, config: &ModelConfig, p: f64) -> Result<PruningPlan> {
    build_plan(scores, config, &PruningPlanSpec::global(p))
}

pub fn build_plan_local(scores: &ScoreSet, config: &ModelConfig, p: f64, k: Option<usize>) -> Result<PruningPlan> {
    build_plan(scores, config, &PruningPlanSpec::local(p, k))
}

fn head_cols(heads: &[usize], head_dim: usize) -> Vec<usize> {
    heads.iter().flat_map(|&h| h * head_dim..(h + 1) * head_dim).collect()
}

/// Physically removes every unit the plan does not keep.
pub fn apply_plan<T: Scalar>(
    config: &ModelConfig,
    params: &ModelParameters<T>,
    plan: &PruningPlan,
) -> Result<(ModelConfig, ModelParameters<T>)> {
    plan.check_against(config)?;
    params.check_against(config)?;
    let hid = &plan.kept_hidden;
    let vec_sel = |t: &crate::tensor::Tensor<T>| t.select_cols(hid);
    let mut layers = Vec::with_capacity(plan.kept_layers.len());
    for (j, &l) in plan.kept_layers.iter().enumerate() {
        let src = &params.layers[l];
        let cols = head_cols(&plan.kept_heads[j], config.head_dim);
        let neurons = &plan.kept_neurons[j];
        layers.push(LayerParams {
            ln1_gain: vec_sel(&src.ln1_gain),
            ln1_bias: vec_sel(&src.ln1_bias),
            w_q: src.w_q.select_rows(hid).select_cols(&cols),
            w_k: src.w_k.select_rows(hid).select_cols(&cols),
            w_v: src.w_v.select_rows(hid).select_cols(&cols),
            w_o: src.w_o.select_rows(&cols).select_cols(hid),
            ln2_gain: vec_sel(&src.ln2_gain),
            ln2_bias: vec_sel(&src.ln2_bias),
            ffn_in: src.ffn_in.select_rows(hid).select_cols(neurons),
            ffn_out: src.ffn_out.select_rows(neurons).select_cols(hid),
        });
    }
    let new_params = ModelParameters {
        tok_emb: params.tok_emb.select_cols(hid),
        pos_emb: params.pos_emb.select_cols(hid),
        layers,
        lnf_gain: vec_sel(&params.lnf_gain),
        lnf_bias: vec_sel(&params.lnf_bias),
        lm_head: params.lm_head.as_ref().map(|t| t.select_cols(hid)),
    };
    let new_config = ModelConfig {
        hidden_dim: hid.len(),
        heads: plan.kept_heads.iter().map(Vec::len).collect(),
        ffn: plan.kept_neurons.iter().map(Vec::len).collect(),
        ..config.clone()
    };
    new_config.validate()?;
    new_params.check_against(&new_config)?;
    Ok((new_config, new_params))
}

/// Applies a plan to a whole model.
pub fn prune<T: Scalar>(model: &Transformer<T>, plan: &PruningPlan) -> Result<Transformer<T>> {
    let (config, params) = apply_plan(&model.config, &model.params, plan)?;
    Ok(Transformer { config, params })
}

/// Fraction of parameters removed going from `before` to `after`.
pub fn achieved_sparsity(before: &ModelConfig, after: &ModelConfig) -> f64 {
    let a = crate::model::count_parameters(before) as f64;
    let b = crate::model::count_parameters(after) as f64;
    1.0 - b / a
}

/// Largest `max|a − b| / max|b|` over two equally sized slices.
pub fn max_relative_deviation<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let scale = b.iter().map(|v| v.as_f64().abs()).fold(0.0, f64::max);
    let dev = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x.as_f64() - y.as_f64()).abs())
        .max_by(|x, y| x.partial_cmp(y).unwrap_or(Ordering::Greater))
        .unwrap_or(0.0);
    if scale == 0.0 {
        dev
    } else {
        dev / scale
    }
}
