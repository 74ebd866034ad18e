//! Losses, optimizer, schedule and the training loop.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::{Path, PathBuf};

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::checkpoint::{read_archive, save_checkpoint, write_archive, Archive};
use crate::corpus::{stream_seed, DatasetSplits, TaggedExample, TemperatureSampler};
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::linalg::Matrix;
use crate::model::{Bound, ForwardOptions, Model, ModelParams, TransformerConfig};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ztrx";
pub const LAST_CHECKPOINT: &str = "last.ztrx";
pub const STATE_FILE: &str = "state.ztrx";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub label_smoothing: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub max_steps: u64,
    pub batch_tokens: usize,
    pub temperature: f64,
    pub seed: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    /// Divide the contrastive sum by the number of anchors.
    pub lclr_mean: bool,
    /// Include the target-side BOS position in the contrastive pooling.
    pub lclr_include_bos: bool,
    /// Sentences per validation forward pass.
    pub valid_batch: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            base_lr: 5e-4,
            warmup_steps: 4000,
            label_smoothing: 0.1,
            adam_beta1: 0.9,
            adam_beta2: 0.98,
            adam_eps: 1e-8,
            max_steps: 2000,
            batch_tokens: 8000,
            temperature: 5.0,
            seed: 1,
            checkpoint_every: 500,
            log_every: 100,
            lclr_mean: false,
            lclr_include_bos: true,
            valid_batch: 64,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return fail(format!("label_smoothing {} outside [0, 1)", self.label_smoothing));
        }
        if self.warmup_steps == 0 {
            return fail("warmup_steps must be at least 1".into());
        }
        if !(self.base_lr > 0.0) {
            return fail(format!("base_lr must be positive, got {}", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("adam betas must lie in [0, 1)".into());
        }
        if !(self.adam_eps > 0.0) {
            return fail("adam_eps must be positive".into());
        }
        if self.temperature < 1.0 {
            return fail(format!("temperature must be >= 1, got {}", self.temperature));
        }
        if self.log_every == 0 || self.checkpoint_every == 0 || self.valid_batch == 0 {
            return fail("log_every, checkpoint_every and valid_batch must be positive".into());
        }
        if self.batch_tokens == 0 {
            return fail("batch_tokens must be positive".into());
        }
        Ok(())
    }
}

/// `base_lr · min(step/warmup, √(warmup/step))`.
pub fn lr_schedule(step: u64, base_lr: f64, warmup: u64) -> f64 {
    let s = step.max(1) as f64;
    let w = warmup.max(1) as f64;
    base_lr * (s / w).min((w / s).sqrt())
}

/// Plain token-mean cross-entropy with uniform label smoothing, computed
/// without a graph.
pub fn cross_entropy_loss(logits: &Matrix, targets: &[Option<usize>], smoothing: f64) -> Result<f64> {
    let mut g = Graph::inference();
    let l = g.constant(Tensor::matrix(logits.rows(), logits.cols(), logits.values().to_vec())?);
    let loss = g.cross_entropy(l, targets, smoothing)?;
    Ok(g.value(loss).item())
}

pub fn total_loss(g: &mut Graph, ce: Var, ctr: Var) -> Result<Var> {
    g.add(ce, ctr)
}

/// One anchor of the contrastive objective, as batch positions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LclrSample {
    pub anchor: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Draws positives and negatives for every anchor.
///
/// Randomness is keyed on `(seed, ids[anchor])` and candidate lists are
/// ordered by id, so the draw does not depend on batch order.
pub fn lclr_samples(languages: &[usize], ids: &[u64], k: usize, seed: u64) -> Vec<LclrSample> {
    let n = languages.len();
    let mut by_lang: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for i in 0..n {
        by_lang.entry(languages[i]).or_default().push(i);
    }
    for members in by_lang.values_mut() {
        members.sort_by_key(|&i| (ids[i], i));
    }
    // B′: instances whose target language occurs at least twice
    let shared: Vec<usize> = by_lang
        .values()
        .filter(|m| m.len() > 1)
        .flatten()
        .copied()
        .collect();
    let mut anchors = shared.clone();
    anchors.sort_by_key(|&i| (ids[i], i));

    let mut out = Vec::new();
    for &anchor in &anchors {
        let lang = languages[anchor];
        let positives: Vec<usize> = by_lang[&lang].iter().copied().filter(|&j| j != anchor).collect();
        let mut negatives: Vec<usize> = shared.iter().copied().filter(|&j| languages[j] != lang).collect();
        negatives.sort_by_key(|&j| (ids[j], j));
        if negatives.is_empty() || k == 0 {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, ids[anchor]));
        let positive = positives[rng.random_range(0..positives.len())];
        let k_eff = k.min(negatives.len());
        let mut picked: Vec<usize> = index::sample(&mut rng, negatives.len(), k_eff)
            .into_iter()
            .map(|p| negatives[p])
            .collect();
        picked.sort_by_key(|&j| (ids[j], j));
        out.push(LclrSample {
            anchor,
            positive,
            negatives: picked,
        });
    }
    out
}

/// Contrastive loss over rows of `heads` for the given samples.
pub fn lclr_loss_graph(g: &mut Graph, heads: Var, samples: &[LclrSample], mean: bool) -> Result<Var> {
    if samples.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let n = g.value(heads).dims2().0;
    let unit = g.normalize_rows(heads)?;
    let unit_t = g.transpose(unit)?;
    let sims = g.matmul(unit, unit_t)?;

    // anchors with the same number of negatives share one logits matrix
    let mut groups: BTreeMap<usize, Vec<&LclrSample>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.negatives.len()).or_default().push(s);
    }
    let mut total: Option<Var> = None;
    for (k, group) in groups {
        let mut flat = Vec::with_capacity(group.len() * (k + 1));
        for s in &group {
            flat.push(s.anchor * n + s.positive);
            flat.extend(s.negatives.iter().map(|&j| s.anchor * n + j));
        }
        let picked = g.gather(sims, &flat)?;
        let logits = g.reshape(picked, &[group.len(), k + 1])?;
        let ce = g.cross_entropy(logits, &vec![Some(0); group.len()], 0.0)?;
        let sum = g.scale(ce, group.len() as f64);
        total = Some(match total {
            None => sum,
            Some(t) => g.add(t, sum)?,
        });
    }
    let total = total.expect("nonempty samples");
    Ok(if mean {
        g.scale(total, 1.0 / samples.len() as f64)
    } else {
        total
    })
}

/// Pooled decoder-layer heads of a batch with their target languages.
#[derive(Debug, Clone)]
pub struct LclrBatchView {
    /// One `d_h`-wide row per example.
    pub heads: Matrix,
    pub languages: Vec<usize>,
    /// Stable example identifiers that key the sampling.
    pub ids: Vec<u64>,
    pub seed: u64,
}

/// Value of the contrastive loss (sum over anchors).
pub fn lclr_loss(view: &LclrBatchView, k: usize) -> Result<f64> {
    let samples = lclr_samples(&view.languages, &view.ids, k, view.seed);
    let mut g = Graph::inference();
    let h = g.constant(Tensor::matrix(view.heads.rows(), view.heads.cols(), view.heads.values().to_vec())?);
    let loss = lclr_loss_graph(&mut g, h, &samples, false)?;
    Ok(g.value(loss).item())
}

pub struct LossParts {
    pub ce: Var,
    pub ctr: Var,
    pub total: Var,
}

/// Builds the full objective for one batch. `ids` identify examples for
/// contrastive sampling; `step_seed` makes the draw differ per step.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    model: &Model<'_>,
    g: &mut Graph,
    bound: &Bound,
    batch: &[&TaggedExample],
    ids: &[u64],
    cfg: &TrainConfig,
    step_seed: u64,
    dropout: Option<&mut ChaCha8Rng>,
) -> Result<LossParts> {
    let mc = model.config().clone();
    let mut opts = ForwardOptions { trace: false, dropout };
    let (enc, dec, targets) = model.teacher_forced_graph(g, bound, batch, &mut opts)?;
    let ce = g.cross_entropy(dec.logits, &targets, cfg.label_smoothing)?;
    let ctr = if mc.lclr_enabled {
        let layer = dec.layer_outputs[mc.lclr_layer() - 1];
        let segments: Vec<Range<usize>> = if cfg.lclr_include_bos {
            dec.segments.clone()
        } else {
            dec.segments.iter().map(|s| s.start + 1..s.end).collect()
        };
        let pooled = g.segment_mean(layer, &segments)?;
        let heads = g.slice_head(pooled, mc.d_h)?;
        let samples = lclr_samples(&enc.languages, ids, mc.k, step_seed);
        lclr_loss_graph(g, heads, &samples, cfg.lclr_mean)?
    } else {
        g.constant(Tensor::scalar(0.0))
    };
    let total = total_loss(g, ce, ctr)?;
    Ok(LossParts { ce, ctr, total })
}

/// Bias-corrected Adam update of one tensor; `t` is the 1-based step.
#[allow(clippy::too_many_arguments)]
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: u64,
    lr: f64,
    betas: (f64, f64),
    eps: f64,
) {
    let (b1, b2) = betas;
    let c1 = 1.0 - b1.powi(t as i32);
    let c2 = 1.0 - b2.powi(t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        m[i] = b1 * m[i] + (1.0 - b1) * g;
        v[i] = b2 * v[i] + (1.0 - b2) * g * g;
        let m_hat = m[i] / c1;
        let v_hat = v[i] / c2;
        params[i] -= lr * m_hat / (v_hat.sqrt() + eps);
    }
}

/// First and second moments for every parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> = params
            .iter()
            .map(|(n, t)| (n.to_string(), vec![0.0; t.len()]))
            .collect();
        AdamState {
            step: 0,
            m: zeros.clone(),
            v: zeros,
        }
    }

    pub fn apply(
        &mut self,
        params: &mut ModelParams,
        grads: &BTreeMap<String, Vec<f64>>,
        lr: f64,
        cfg: &TrainConfig,
    ) -> Result<()> {
        self.step += 1;
        let names: Vec<String> = params.names().map(str::to_string).collect();
        for name in names {
            let Some(g) = grads.get(&name) else { continue };
            let p = params.get_mut(&name).expect("listed name");
            let (m, v) = match (self.m.get_mut(&name), self.v.get_mut(&name)) {
                (Some(m), Some(v)) if m.len() == p.len() && v.len() == p.len() => (m, v),
                _ => return Err(Error::Contract(format!("optimizer state does not match {name}"))),
            };
            adam_step(
                p.data_mut(),
                g,
                m,
                v,
                self.step,
                lr,
                (cfg.adam_beta1, cfg.adam_beta2),
                cfg.adam_eps,
            );
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    pub loss_ce: f64,
    pub loss_ctr: f64,
    pub valid_ce: f64,
}

/// Token-mean negative log-likelihood over `examples` (no smoothing).
pub fn validation_ce(params: &ModelParams, examples: &[TaggedExample], batch: usize) -> Result<f64> {
    let model = Model::new(params);
    let mut total = 0.0;
    let mut tokens = 0usize;
    for chunk in examples.chunks(batch.max(1)) {
        let refs: Vec<&TaggedExample> = chunk.iter().collect();
        let mut g = Graph::inference();
        let bound = model.bind(&mut g, false);
        let (_, dec, targets) = model.teacher_forced_graph(&mut g, &bound, &refs, &mut ForwardOptions::eval())?;
        let ce = g.cross_entropy(dec.logits, &targets, 0.0)?;
        total += g.value(ce).item() * targets.len() as f64;
        tokens += targets.len();
    }
    if tokens == 0 {
        return Err(Error::Degenerate("validation split is empty".into()));
    }
    Ok(total / tokens as f64)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: ModelParams,
    pub last: ModelParams,
    pub best_step: u64,
    pub best_valid_ce: f64,
    pub initial_valid_ce: f64,
    pub metrics: Vec<MetricsRecord>,
}

pub struct TrainRun<'a> {
    pub model: &'a TransformerConfig,
    pub train: &'a TrainConfig,
    pub data: &'a DatasetSplits,
    /// Where metrics, checkpoints and the resume state go.
    pub out_dir: Option<&'a Path>,
    pub resume: bool,
}

struct Progress {
    params: ModelParams,
    adam: AdamState,
    best: ModelParams,
    best_step: u64,
    best_valid_ce: f64,
    initial_valid_ce: f64,
    metrics: Vec<MetricsRecord>,
    /// Running sums over the current logging window.
    window: (f64, f64, usize),
}

fn prefixed(archive: &mut Archive, prefix: &str, items: impl Iterator<Item = (String, Tensor)>) {
    archive
        .tensors
        .extend(items.map(|(n, t)| (format!("{prefix}/{n}"), t)));
}

fn save_state(path: &Path, p: &Progress) -> Result<()> {
    let mut archive = Archive {
        meta: serde_json::json!({
            "config": p.params.config(),
            "step": p.adam.step,
            "best_step": p.best_step,
            "best_valid_ce": p.best_valid_ce,
            "initial_valid_ce": p.initial_valid_ce,
            "window": [p.window.0, p.window.1, p.window.2],
        }),
        tensors: Vec::new(),
    };
    prefixed(&mut archive, "param", p.params.iter().map(|(n, t)| (n.to_string(), t.clone())));
    prefixed(&mut archive, "best", p.best.iter().map(|(n, t)| (n.to_string(), t.clone())));
    prefixed(
        &mut archive,
        "adam_m",
        p.adam.m.iter().map(|(n, v)| (n.clone(), Tensor::vector(v.clone()))),
    );
    prefixed(
        &mut archive,
        "adam_v",
        p.adam.v.iter().map(|(n, v)| (n.clone(), Tensor::vector(v.clone()))),
    );
    write_archive(path, &archive)
}

fn load_state(path: &Path, expected: &TransformerConfig, metrics_path: &Path) -> Result<Progress> {
    let archive = read_archive(path)?;
    let meta = &archive.meta;
    let config: TransformerConfig = serde_json::from_value(meta["config"].clone())
        .map_err(|e| Error::Format(format!("state config: {e}")))?;
    if !config.same_architecture(expected) {
        return Err(Error::ConfigMismatch(format!(
            "resume state architecture {} differs from requested {}",
            config.describe(),
            expected.describe()
        )));
    }
    let num = |key: &str| {
        meta[key]
            .as_f64()
            .ok_or_else(|| Error::Format(format!("resume state lacks {key}")))
    };
    let step = num("step")? as u64;
    let mut groups: BTreeMap<&str, Vec<(String, Tensor)>> = BTreeMap::new();
    for (name, t) in archive.tensors {
        let (prefix, rest) = name
            .split_once('/')
            .ok_or_else(|| Error::Format(format!("unexpected state tensor {name}")))?;
        let key = match prefix {
            "param" => "param",
            "best" => "best",
            "adam_m" => "adam_m",
            "adam_v" => "adam_v",
            _ => return Err(Error::Format(format!("unexpected state tensor {name}"))),
        };
        groups.entry(key).or_default().push((rest.to_string(), t));
    }
    let mut take = |k: &str| groups.remove(k).unwrap_or_default();
    // the requested config may change non-structural knobs such as dropout
    let params = ModelParams::from_tensors(expected.clone(), take("param"))?;
    let best = ModelParams::from_tensors(expected.clone(), take("best"))?;
    let moments = |v: Vec<(String, Tensor)>| v.into_iter().map(|(n, t)| (n, t.into_data())).collect();
    let adam = AdamState {
        step,
        m: moments(take("adam_m")),
        v: moments(take("adam_v")),
    };
    let metrics = if metrics_path.exists() {
        read_to_string(metrics_path)?
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| serde_json::from_str::<MetricsRecord>(l).map_err(Error::from))
            .filter(|r| r.as_ref().map_or(true, |m| m.step <= step))
            .collect::<Result<Vec<_>>>()?
    } else {
        Vec::new()
    };
    Ok(Progress {
        params,
        adam,
        best,
        best_step: num("best_step")? as u64,
        best_valid_ce: num("best_valid_ce")?,
        initial_valid_ce: num("initial_valid_ce")?,
        metrics,
        window: serde_json::from_value(meta["window"].clone())
            .map_err(|e| Error::Format(format!("resume state window: {e}")))?,
    })
}

fn metrics_text(records: &[MetricsRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r)?);
        out.push('\n');
    }
    Ok(out)
}

/// Runs the training loop. `on_log` sees every metrics record as it is
/// produced.
pub fn train(run: TrainRun<'_>, on_log: &mut dyn FnMut(&MetricsRecord)) -> Result<TrainOutcome> {
    let cfg = run.train;
    cfg.validate()?;
    run.model.validate()?;
    let data = run.data;
    if run.model.vocab_size < data.languages.vocab_size() || run.model.num_languages != data.languages.len() {
        return Err(Error::ConfigMismatch(format!(
            "model expects vocab {} and {} languages, dataset has {} and {}",
            run.model.vocab_size,
            run.model.num_languages,
            data.languages.vocab_size(),
            data.languages.len()
        )));
    }
    let sampler = TemperatureSampler::new(&data.train, cfg.temperature, cfg.batch_tokens, cfg.seed)?;
    let paths = run.out_dir.map(|d| {
        (
            d.join(METRICS_FILE),
            d.join(STATE_FILE),
            d.join(BEST_CHECKPOINT),
            d.join(LAST_CHECKPOINT),
        )
    });

    let resumable = paths.as_ref().filter(|p| run.resume && p.1.exists());
    let mut p = match resumable {
        Some((metrics, state, _, _)) => load_state(state, run.model, metrics)?,
        None => {
            let params = ModelParams::init(run.model, cfg.seed)?;
            let v0 = validation_ce(&params, &data.valid, cfg.valid_batch)?;
            Progress {
                adam: AdamState::new(&params),
                best: params.clone(),
                params,
                best_step: 0,
                best_valid_ce: v0,
                initial_valid_ce: v0,
                metrics: Vec::new(),
                window: (0.0, 0.0, 0),
            }
        }
    };

    let persist = |p: &Progress| -> Result<()> {
        if let Some((metrics, state, best, last)) = &paths {
            write_atomic(metrics, metrics_text(&p.metrics)?.as_bytes())?;
            save_checkpoint(&p.best, best)?;
            save_checkpoint(&p.params, last)?;
            save_state(state, p)?;
        }
        Ok(())
    };
    if p.adam.step == 0 {
        persist(&p)?;
    }

    while p.adam.step < cfg.max_steps {
        let step = p.adam.step + 1;
        let indices = sampler.batch(step);
        let batch: Vec<&TaggedExample> = indices.iter().map(|&i| &data.train[i]).collect();
        let ids: Vec<u64> = indices.iter().map(|&i| i as u64).collect();
        let step_seed = stream_seed(cfg.seed, step);
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(stream_seed(step_seed, 0xD0));

        let model = Model::new(&p.params);
        let mut g = Graph::new();
        let bound = model.bind(&mut g, true);
        let loss = batch_loss(&model, &mut g, &bound, &batch, &ids, cfg, step_seed, Some(&mut dropout_rng))?;
        let ce = g.value(loss.ce).item();
        let ctr = g.value(loss.ctr).item();
        if !ce.is_finite() || !ctr.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("loss_ce {ce}, loss_ctr {ctr}"),
            });
        }
        let mut grads = g.backward(loss.total)?;
        let mut named = BTreeMap::new();
        for (name, var) in bound.iter() {
            if let Some(gv) = grads.take(var) {
                if gv.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Diverged {
                        step,
                        detail: format!("non-finite gradient for {name}"),
                    });
                }
                named.insert(name.to_string(), gv);
            }
        }
        drop(g);
        let lr = lr_schedule(step, cfg.base_lr, cfg.warmup_steps);
        p.adam.apply(&mut p.params, &named, lr, cfg)?;
        p.window.0 += ce;
        p.window.1 += ctr;
        p.window.2 += 1;

        let log_now = step % cfg.log_every == 0;
        if log_now {
            let valid_ce = validation_ce(&p.params, &data.valid, cfg.valid_batch)?;
            if !valid_ce.is_finite() {
                return Err(Error::Diverged {
                    step,
                    detail: format!("validation ce {valid_ce}"),
                });
            }
            if valid_ce < p.best_valid_ce {
                p.best_valid_ce = valid_ce;
                p.best_step = step;
                p.best = p.params.clone();
            }
            let (ce_sum, ctr_sum, n) = p.window;
            let record = MetricsRecord {
                step,
                lr,
                loss_ce: ce_sum / n as f64,
                loss_ctr: ctr_sum / n as f64,
                valid_ce,
            };
            on_log(&record);
            p.metrics.push(record);
            p.window = (0.0, 0.0, 0);
        }
        if step % cfg.checkpoint_every == 0 || step == cfg.max_steps {
            persist(&p)?;
        }
    }

    Ok(TrainOutcome {
        best: p.best,
        last: p.params,
        best_step: p.best_step,
        best_valid_ce: p.best_valid_ce,
        initial_valid_ce: p.initial_valid_ce,
        metrics: p.metrics,
    })
}

/// Paths written by a training run into `dir`.
pub fn run_files(dir: &Path) -> [PathBuf; 4] {
    [
        dir.join(METRICS_FILE),
        dir.join(BEST_CHECKPOINT),
        dir.join(LAST_CHECKPOINT),
        dir.join(STATE_FILE),
    ]
}
