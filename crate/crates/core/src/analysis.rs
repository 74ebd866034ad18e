//! Representation analysis: pooled sentence vectors, sentence-level SVCCA,
//! the comparison cases, translation metrics and statistics.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::Hash;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{DatasetSplits, LanguageSet, TaggedExample, EOS};
use crate::error::{Error, Result};
use crate::io::write_atomic;
use crate::linalg::{cca_fit, cosine, pearson, spectral_embedding, svd, truncate_by_variance, Matrix, SpectralEmbedding};
use crate::model::{BeamOptions, CapturePoint, LayerTrace, Model, Side, SourceRef};

/// Environment variable capping analysis parallelism.
pub const THREADS_ENV: &str = "ZTRANS_THREADS";

fn pool() -> Result<rayon::ThreadPool> {
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(n) = std::env::var(THREADS_ENV).ok().and_then(|v| v.parse::<usize>().ok()) {
        builder = builder.num_threads(n.max(1));
    }
    builder
        .build()
        .map_err(|e| Error::Contract(format!("thread pool: {e}")))
}

/// Mean over the positions of one sentence's states. With `tag_leading`,
/// row 0 is the language tag and `exclude_tag` drops it.
pub fn mean_pool(states: &Matrix, tag_leading: bool, exclude_tag: bool) -> Result<Vec<f64>> {
    let start = usize::from(tag_leading && exclude_tag);
    let n = states.rows().saturating_sub(start);
    if n == 0 {
        return Err(Error::Degenerate("no positions left to pool".into()));
    }
    let mut out = vec![0.0; states.cols()];
    for i in start..states.rows() {
        for (o, v) in out.iter_mut().zip(states.row(i)) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|o| *o /= n as f64);
    Ok(out)
}

/// Sentence vectors of one layer, row-aligned across compared sets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PooledSet {
    pub vectors: Matrix,
    pub side: Side,
    pub layer: usize,
    pub capture: CapturePoint,
    pub tag_included: bool,
}

impl PooledSet {
    pub fn from_trace(trace: &LayerTrace, exclude_tag: bool) -> Result<Self> {
        let rows = trace
            .states
            .iter()
            .map(|s| mean_pool(s, trace.tag_leading, exclude_tag))
            .collect::<Result<Vec<_>>>()?;
        let vectors = Matrix::from_rows(&rows)?;
        if !vectors.is_finite() {
            return Err(Error::InvalidInput(format!(
                "non-finite pooled vectors at {:?} layer {}",
                trace.side, trace.layer
            )));
        }
        Ok(PooledSet {
            vectors,
            side: trace.side,
            layer: trace.layer,
            capture: trace.capture,
            tag_included: trace.tag_leading && !exclude_tag,
        })
    }

    pub fn len(&self) -> usize {
        self.vectors.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.rows() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SvccaOptions {
    /// Fraction of singular-value energy kept by the truncation.
    pub variance_threshold: f64,
    pub regularization: f64,
}

impl Default for SvccaOptions {
    fn default() -> Self {
        SvccaOptions {
            variance_threshold: 0.99,
            regularization: 1e-6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SvccaReport {
    pub scores: Vec<f64>,
    pub mean: f64,
    pub dims_a: usize,
    pub dims_b: usize,
    pub dims_cca: usize,
    pub variance_threshold: f64,
}

/// Fitted SVCCA transform: truncation bases plus CCA directions.
#[derive(Debug, Clone)]
pub struct SvccaTransform {
    mean_a: Vec<f64>,
    mean_b: Vec<f64>,
    basis_a: Matrix,
    basis_b: Matrix,
    w_a: Matrix,
    w_b: Matrix,
}

impl SvccaTransform {
    pub fn fit(a: &Matrix, b: &Matrix, opts: SvccaOptions) -> Result<Self> {
        let n = a.rows();
        if n != b.rows() {
            return Err(Error::InvalidInput(format!("svcca sets differ in size: {n} vs {}", b.rows())));
        }
        if n < 4 {
            return Err(Error::Degenerate(format!(
                "svcca needs at least 4 aligned sentences, got {n}; use a larger set"
            )));
        }
        let ac = a.centered();
        let bc = b.centered();
        let basis_a = truncate_by_variance(&svd(&ac)?, opts.variance_threshold)?;
        let basis_b = truncate_by_variance(&svd(&bc)?, opts.variance_threshold)?;
        let (da, db) = (basis_a.cols(), basis_b.cols());
        if n <= da.max(db) {
            return Err(Error::Degenerate(format!(
                "{n} sentences cannot support CCA over {} retained dimensions; use a larger set",
                da.max(db)
            )));
        }
        let cca = cca_fit(&ac.matmul(&basis_a)?, &bc.matmul(&basis_b)?, opts.regularization)?;
        Ok(SvccaTransform {
            mean_a: a.column_means(),
            mean_b: b.column_means(),
            basis_a,
            basis_b,
            w_a: cca.w_a,
            w_b: cca.w_b,
        })
    }

    fn project(mean: &[f64], basis: &Matrix, w: &Matrix, x: &[f64]) -> Vec<f64> {
        let centered: Vec<f64> = x.iter().zip(mean).map(|(v, m)| v - m).collect();
        let reduced = basis.transpose().apply(&centered);
        w.apply(&reduced)
    }

    pub fn project_a(&self, x: &[f64]) -> Vec<f64> {
        Self::project(&self.mean_a, &self.basis_a, &self.w_a, x)
    }

    pub fn project_b(&self, x: &[f64]) -> Vec<f64> {
        Self::project(&self.mean_b, &self.basis_b, &self.w_b, x)
    }
}

fn cosine_or_zero(a: &[f64], b: &[f64]) -> Result<f64> {
    match cosine(a, b) {
        Ok(c) => Ok(c),
        // a sentence sitting exactly on the set mean has no direction
        Err(Error::Degenerate(_)) => Ok(0.0),
        Err(e) => Err(e),
    }
}

/// Sentence-level SVCCA between two row-aligned sets.
pub fn svcca_score(a: &Matrix, b: &Matrix, opts: SvccaOptions) -> Result<SvccaReport> {
    let t = SvccaTransform::fit(a, b, opts)?;
    let scores = (0..a.rows())
        .map(|i| cosine_or_zero(&t.project_a(a.row(i)), &t.project_b(b.row(i))))
        .collect::<Result<Vec<f64>>>()?;
    let mean = scores.iter().sum::<f64>() / scores.len() as f64;
    Ok(SvccaReport {
        mean,
        dims_a: t.basis_a.cols(),
        dims_b: t.basis_b.cols(),
        dims_cca: t.w_a.rows(),
        variance_threshold: opts.variance_threshold,
        scores,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ComparisonCase {
    I,
    II,
    III,
    IV,
    V,
}

impl ComparisonCase {
    pub const ALL: [ComparisonCase; 5] = [Self::I, Self::II, Self::III, Self::IV, Self::V];

    /// The two triple patterns compared, with `x` in language a and `y` in
    /// language b.
    pub fn patterns(self) -> (&'static str, &'static str) {
        match self {
            Self::I => ("(x, l_a, x)", "(y, l_a, x)"),
            Self::II => ("(x, l_a, x)", "(x, l_b, y)"),
            Self::III => ("(x, l_a, x)", "(y, l_b, y)"),
            Self::IV => ("(x, l_b, y)", "(x', l_b, y')"),
            Self::V => ("(x, l_b, y)", "(y, l_b, y)"),
        }
    }

    pub fn default_side(self) -> Side {
        match self {
            Self::I | Self::II | Self::III => Side::Encoder,
            Self::IV | Self::V => Side::Decoder,
        }
    }

    /// Directions `(src, tgt)` of the two sets.
    fn directions(self, a: usize, b: usize) -> ((usize, usize), (usize, usize)) {
        match self {
            Self::I => ((a, a), (b, a)),
            Self::II => ((a, a), (a, b)),
            Self::III => ((a, a), (b, b)),
            Self::IV => ((a, b), (a, b)),
            Self::V => ((a, b), (b, b)),
        }
    }
}

impl fmt::Display for ComparisonCase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::I => "i",
            Self::II => "ii",
            Self::III => "iii",
            Self::IV => "iv",
            Self::V => "v",
        })
    }
}

impl FromStr for ComparisonCase {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "i" | "1" => Ok(Self::I),
            "ii" | "2" => Ok(Self::II),
            "iii" | "3" => Ok(Self::III),
            "iv" | "4" => Ok(Self::IV),
            "v" | "5" => Ok(Self::V),
            _ => Err(Error::InvalidInput(format!("unknown comparison case {s:?}; expected i..v"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisOptions {
    pub exclude_tag: bool,
    pub svcca: SvccaOptions,
    /// Use only the first n aligned sentences.
    pub max_sentences: Option<usize>,
    /// Sentences per forward pass.
    pub batch: usize,
}

impl Default for AnalysisOptions {
    fn default() -> Self {
        AnalysisOptions {
            exclude_tag: true,
            svcca: SvccaOptions::default(),
            max_sentences: None,
            batch: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerReport {
    pub case: ComparisonCase,
    pub side: Side,
    pub layer: usize,
    pub lang_a: String,
    pub lang_b: String,
    pub report: SvccaReport,
}

/// Pooled vectors of every layer on one side for `examples`, one
/// `n × d_model` matrix per layer.
pub fn pooled_layers(
    model: &Model<'_>,
    examples: &[&TaggedExample],
    side: Side,
    exclude_tag: bool,
    batch: usize,
) -> Result<Vec<PooledSet>> {
    if examples.is_empty() {
        return Err(Error::InvalidInput("no sentences to pool".into()));
    }
    let mut per_layer: Vec<Vec<Vec<f64>>> = Vec::new();
    let mut template: Vec<PooledSet> = Vec::new();
    for chunk in examples.chunks(batch.max(1)) {
        let traces = match side {
            Side::Encoder => {
                let sources: Vec<SourceRef<'_>> = chunk.iter().map(|e| SourceRef::from(*e)).collect();
                model.encoder_traces(&sources)?.0
            }
            Side::Decoder => model.forward_teacher_forced(chunk, true)?.decoder,
        };
        if per_layer.is_empty() {
            per_layer = vec![Vec::with_capacity(examples.len()); traces.len()];
        }
        for (l, trace) in traces.iter().enumerate() {
            let set = PooledSet::from_trace(trace, exclude_tag)?;
            for i in 0..set.len() {
                per_layer[l].push(set.vectors.row(i).to_vec());
            }
            if template.len() < traces.len() {
                template.push(set);
            }
        }
    }
    template
        .into_iter()
        .zip(per_layer)
        .map(|(mut t, rows)| {
            t.vectors = Matrix::from_rows(&rows)?;
            Ok(t)
        })
        .collect()
}

fn aligned(data: &DatasetSplits, src: usize, tgt: usize, limit: Option<usize>) -> Result<Vec<&TaggedExample>> {
    let mut v = data.test_direction(src, tgt);
    if v.is_empty() {
        return Err(Error::InvalidInput(format!(
            "no test sentences for direction {src}->{tgt}"
        )));
    }
    if let Some(n) = limit {
        v.truncate(n);
    }
    Ok(v)
}

fn resolve_layers(requested: &[usize], available: usize) -> Result<Vec<usize>> {
    if requested.is_empty() {
        return Ok((1..=available).collect());
    }
    for &l in requested {
        if l == 0 || l > available {
            return Err(Error::InvalidInput(format!("layer {l} outside 1..={available}")));
        }
    }
    Ok(requested.to_vec())
}

/// For each sentence, the index of the sentence whose SVCCA-projected
/// representation is least similar.
pub fn farthest_partners(vectors: &Matrix, opts: SvccaOptions) -> Result<Vec<usize>> {
    let n = vectors.rows();
    if n < 2 {
        return Err(Error::Degenerate("partner selection needs at least 2 sentences".into()));
    }
    let t = SvccaTransform::fit(vectors, vectors, opts)?;
    let projected: Vec<Vec<f64>> = (0..n).map(|i| t.project_a(vectors.row(i))).collect();
    (0..n)
        .map(|i| {
            let mut best = (f64::INFINITY, usize::MAX);
            for j in (0..n).filter(|&j| j != i) {
                let c = cosine_or_zero(&projected[i], &projected[j])?;
                if c < best.0 {
                    best = (c, j);
                }
            }
            Ok(best.1)
        })
        .collect()
}

/// Per-layer SVCCA reports for one comparison case. `layers` are 1-based;
/// empty means every layer of `side`.
pub fn run_comparison(
    model: &Model<'_>,
    data: &DatasetSplits,
    case: ComparisonCase,
    lang_a: usize,
    lang_b: usize,
    side: Side,
    layers: &[usize],
    opts: &AnalysisOptions,
) -> Result<Vec<LayerReport>> {
    if lang_a == lang_b {
        return Err(Error::InvalidInput("comparison languages must differ".into()));
    }
    let name = |l: usize| {
        data.languages
            .get(l)
            .map(|x| x.name.clone())
            .ok_or_else(|| Error::InvalidInput(format!("unknown language {l}")))
    };
    let (name_a, name_b) = (name(lang_a)?, name(lang_b)?);
    let available = match side {
        Side::Encoder => model.config().enc_layers,
        Side::Decoder => model.config().dec_layers,
    };
    let layers = resolve_layers(layers, available)?;
    let ((sa, ta), (sb, tb)) = case.directions(lang_a, lang_b);
    let set_a = aligned(data, sa, ta, opts.max_sentences)?;
    let pooled_a = pooled_layers(model, &set_a, side, opts.exclude_tag, opts.batch)?;

    let pooled_b: Vec<Matrix> = if case == ComparisonCase::IV {
        let encoder = if side == Side::Encoder {
            pooled_a.last().expect("at least one layer").vectors.clone()
        } else {
            pooled_layers(model, &set_a, Side::Encoder, opts.exclude_tag, opts.batch)?
                .pop()
                .expect("at least one layer")
                .vectors
        };
        let partners = farthest_partners(&encoder, opts.svcca)?;
        pooled_a
            .iter()
            .map(|p| {
                let rows: Vec<&[f64]> = partners.iter().map(|&j| p.vectors.row(j)).collect();
                Matrix::from_rows(&rows)
            })
            .collect::<Result<_>>()?
    } else {
        let set_b = aligned(data, sb, tb, opts.max_sentences)?;
        if set_b.len() != set_a.len() {
            return Err(Error::InvalidInput("compared sets are not aligned".into()));
        }
        pooled_layers(model, &set_b, side, opts.exclude_tag, opts.batch)?
            .into_iter()
            .map(|p| p.vectors)
            .collect()
    };

    layers
        .iter()
        .map(|&l| {
            Ok(LayerReport {
                case,
                side,
                layer: l,
                lang_a: name_a.clone(),
                lang_b: name_b.clone(),
                report: svcca_score(&pooled_a[l - 1].vectors, &pooled_b[l - 1], opts.svcca)?,
            })
        })
        .collect()
}

/// Mean SVCCA between every pair of layer sets; the diagonal is 1.
pub fn layer_similarity(sets: &[Matrix], opts: SvccaOptions) -> Result<Matrix> {
    let n = sets.len();
    let mut out = Matrix::identity(n).into_values();
    for i in 0..n {
        for j in i + 1..n {
            let s = svcca_score(&sets[i], &sets[j], opts)?.mean;
            out[i * n + j] = s;
            out[j * n + i] = s;
        }
    }
    Matrix::from_vec(n, n, out)
}

/// Decodes every example; beam size 1 uses batched greedy decoding.
pub fn decode_all(model: &Model<'_>, examples: &[&TaggedExample], beam: BeamOptions) -> Result<Vec<Vec<u32>>> {
    if beam.beam_size <= 1 {
        let mut out = Vec::with_capacity(examples.len());
        for chunk in examples.chunks(64) {
            let sources: Vec<SourceRef<'_>> = chunk.iter().map(|e| SourceRef::from(*e)).collect();
            out.extend(model.greedy_decode_batch(&sources, beam.max_len)?);
        }
        return Ok(out);
    }
    pool()?.install(|| {
        examples
            .par_iter()
            .map(|e| model.beam_search(&e.source, e.tag, beam))
            .collect()
    })
}

/// Corpus BLEU of decoding the identity pairs of `lang` against their sources.
pub fn identity_eval(model: &Model<'_>, data: &DatasetSplits, lang: usize, beam: BeamOptions) -> Result<BleuScore> {
    let set = data.test_direction(lang, lang);
    if set.is_empty() {
        return Err(Error::Degenerate(format!("no identity pairs for language {lang}")));
    }
    let hyps = decode_all(model, &set, beam)?;
    let refs: Vec<Vec<u32>> = set.iter().map(|e| e.source.clone()).collect();
    corpus_bleu(&hyps, &refs, 4)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub score: f64,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub hyp_len: usize,
    pub ref_len: usize,
    /// Some n-gram order had no match at all, forcing the score to zero.
    pub zero_bucket: bool,
}

fn ngram_counts<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut out = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *out.entry(w).or_insert(0) += 1;
        }
    }
    out
}

/// Corpus-level BLEU (0..100) with clipped n-gram precisions and brevity
/// penalty; no smoothing.
pub fn corpus_bleu<T: Eq + Hash + Clone>(hypotheses: &[Vec<T>], references: &[Vec<T>], max_order: usize) -> Result<BleuScore> {
    if hypotheses.len() != references.len() {
        return Err(Error::InvalidInput(format!(
            "{} hypotheses for {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    if hypotheses.is_empty() || max_order == 0 {
        return Err(Error::Degenerate("BLEU of an empty corpus".into()));
    }
    let mut matches = vec![0usize; max_order];
    let mut totals = vec![0usize; max_order];
    let (mut hyp_len, mut ref_len) = (0, 0);
    for (h, r) in hypotheses.iter().zip(references) {
        hyp_len += h.len();
        ref_len += r.len();
        for n in 1..=max_order {
            let hc = ngram_counts(h, n);
            let rc = ngram_counts(r, n);
            totals[n - 1] += h.len().saturating_sub(n - 1);
            matches[n - 1] += hc
                .iter()
                .map(|(g, &c)| c.min(rc.get(g).copied().unwrap_or(0)))
                .sum::<usize>();
        }
    }
    if ref_len == 0 {
        return Err(Error::Degenerate("references are empty".into()));
    }
    let precisions: Vec<f64> = matches
        .iter()
        .zip(&totals)
        .map(|(&m, &t)| if t == 0 { 0.0 } else { m as f64 / t as f64 })
        .collect();
    let brevity_penalty = if hyp_len == 0 {
        0.0
    } else if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    let zero_bucket = precisions.contains(&0.0);
    let score = if zero_bucket {
        0.0
    } else {
        let log_mean = precisions.iter().map(|p| p.ln()).sum::<f64>() / max_order as f64;
        100.0 * brevity_penalty * log_mean.exp()
    };
    Ok(BleuScore {
        score,
        precisions,
        brevity_penalty,
        hyp_len,
        ref_len,
        zero_bucket,
    })
}

/// Fraction of hypotheses not detected as `expected`; undetectable output
/// counts as off-target.
pub fn off_target_ratio(languages: &LanguageSet, hypotheses: &[Vec<u32>], expected: usize) -> f64 {
    if hypotheses.is_empty() {
        return 0.0;
    }
    let off = hypotheses
        .iter()
        .filter(|h| languages.detect_language(h) != Some(expected))
        .count();
    off as f64 / hypotheses.len() as f64
}

/// Mean over clusters of the mean squared distance to the cluster centroid,
/// on length-normalized vectors.
pub fn cluster_variance(vectors: &[Vec<f64>], labels: &[usize]) -> Result<f64> {
    if vectors.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} vectors for {} labels",
            vectors.len(),
            labels.len()
        )));
    }
    if vectors.is_empty() {
        return Err(Error::Degenerate("no clusters".into()));
    }
    let mut clusters: BTreeMap<usize, Vec<Vec<f64>>> = BTreeMap::new();
    for (v, &l) in vectors.iter().zip(labels) {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Degenerate("zero vector cannot be normalized".into()));
        }
        clusters.entry(l).or_default().push(v.iter().map(|x| x / norm).collect());
    }
    let mut total = 0.0;
    for members in clusters.values() {
        let d = members[0].len();
        let mut centroid = vec![0.0; d];
        for m in members {
            for (c, x) in centroid.iter_mut().zip(m) {
                *c += x / members.len() as f64;
            }
        }
        let spread: f64 = members
            .iter()
            .map(|m| m.iter().zip(&centroid).map(|(x, c)| (x - c).powi(2)).sum::<f64>())
            .sum::<f64>()
            / members.len() as f64;
        total += spread;
    }
    Ok(total / clusters.len() as f64)
}

/// Position-wise agreement of decoded sequences with references, over the
/// longer of each pair.
pub fn decoded_token_accuracy(hypotheses: &[Vec<u32>], references: &[Vec<u32>]) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        hits += h.iter().zip(r).filter(|(a, b)| a == b).count();
        total += h.len().max(r.len());
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

/// Teacher-forced next-token accuracy, EOS included.
pub fn token_accuracy(model: &Model<'_>, examples: &[&TaggedExample], batch: usize) -> Result<f64> {
    if examples.is_empty() {
        return Err(Error::Degenerate("token accuracy of an empty set".into()));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for chunk in examples.chunks(batch.max(1)) {
        let out = model.forward_teacher_forced(chunk, false)?;
        for (logits, e) in out.logits.iter().zip(chunk) {
            for (j, gold) in e.target.iter().copied().chain([EOS]).enumerate() {
                let row = logits.row(j);
                let mut best = 0;
                for (k, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = k;
                    }
                }
                hits += usize::from(best as u32 == gold);
                total += 1;
            }
        }
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub target: String,
    pub n: usize,
    pub r: Option<f64>,
    pub p_value: Option<f64>,
    /// Fewer than 3 pairs, or no variance.
    pub skipped: bool,
}

/// One observation: a direction's target language, its representation
/// score and its BLEU gain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairObservation {
    pub target: String,
    pub score: f64,
    pub bleu_gain: f64,
}

/// Pearson correlation between score and BLEU gain per target language.
pub fn correlation_report(observations: &[PairObservation]) -> Vec<CorrelationRow> {
    let mut groups: BTreeMap<&str, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for o in observations {
        let g = groups.entry(o.target.as_str()).or_default();
        g.0.push(o.score);
        g.1.push(o.bleu_gain);
    }
    groups
        .into_iter()
        .map(|(target, (xs, ys))| {
            let fit = if xs.len() >= 3 { pearson(&xs, &ys).ok() } else { None };
            CorrelationRow {
                target: target.to_string(),
                n: xs.len(),
                r: fit.map(|f| f.r),
                p_value: fit.map(|f| f.p_value),
                skipped: fit.is_none(),
            }
        })
        .collect()
}

/// Paired bootstrap: the fraction of resamples in which system b's mean is
/// at least system a's. Small values are evidence that a beats b.
pub fn bootstrap_significance(
    scores_a: &[f64],
    scores_b: &[f64],
    iterations: usize,
    ratio: f64,
    seed: u64,
) -> Result<f64> {
    if scores_a.len() != scores_b.len() {
        return Err(Error::InvalidInput(format!(
            "paired score lists differ in length: {} vs {}",
            scores_a.len(),
            scores_b.len()
        )));
    }
    if scores_a.is_empty() || iterations == 0 {
        return Err(Error::Degenerate("bootstrap needs scores and iterations".into()));
    }
    if !(ratio > 0.0 && ratio <= 1.0) {
        return Err(Error::InvalidInput(format!("resampling ratio {ratio} outside (0, 1]")));
    }
    let n = scores_a.len();
    let m = ((n as f64 * ratio).round() as usize).max(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut b_wins = 0usize;
    for _ in 0..iterations {
        let (mut sa, mut sb) = (0.0, 0.0);
        for _ in 0..m {
            let i = rng.random_range(0..n);
            sa += scores_a[i];
            sb += scores_b[i];
        }
        if sb >= sa {
            b_wins += 1;
        }
    }
    Ok(b_wins as f64 / iterations as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ExportFormat {
    Csv,
    Json,
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(Self::Csv),
            "json" => Ok(Self::Json),
            _ => Err(Error::InvalidInput(format!("unknown export format {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum PlotData {
    LayerScores { rows: Vec<LayerReport> },
    Pooled { set: PooledSet },
    Spectral { labels: Vec<String>, embedding: SpectralEmbedding },
}

fn csv_line(fields: &[String]) -> String {
    let mut s = fields.join(",");
    s.push('\n');
    s
}

impl PlotData {
    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        match self {
            PlotData::LayerScores { rows } => {
                out.push_str("case,side,layer,lang_a,lang_b,mean,dims_a,dims_b,dims_cca\n");
                for r in rows {
                    out.push_str(&csv_line(&[
                        r.case.to_string(),
                        format!("{:?}", r.side).to_lowercase(),
                        r.layer.to_string(),
                        r.lang_a.clone(),
                        r.lang_b.clone(),
                        r.report.mean.to_string(),
                        r.report.dims_a.to_string(),
                        r.report.dims_b.to_string(),
                        r.report.dims_cca.to_string(),
                    ]));
                }
            }
            PlotData::Pooled { set } => {
                let header: Vec<String> = (0..set.vectors.cols()).map(|j| format!("f{j}")).collect();
                out.push_str(&csv_line(&header));
                for i in 0..set.vectors.rows() {
                    let row: Vec<String> = set.vectors.row(i).iter().map(f64::to_string).collect();
                    out.push_str(&csv_line(&row));
                }
            }
            PlotData::Spectral { labels, embedding } => {
                let dims = embedding.coords.cols();
                let mut header = vec!["label".to_string()];
                header.extend((0..dims).map(|j| format!("x{j}")));
                out.push_str(&csv_line(&header));
                for i in 0..embedding.coords.rows() {
                    let mut row = vec![labels.get(i).cloned().unwrap_or_else(|| i.to_string())];
                    row.extend(embedding.coords.row(i).iter().map(f64::to_string));
                    out.push_str(&csv_line(&row));
                }
            }
        }
        out
    }
}

/// Writes plot data atomically as CSV or pretty JSON.
pub fn export_plot_data(data: &PlotData, path: &Path, format: ExportFormat) -> Result<()> {
    let text = match format {
        ExportFormat::Csv => data.to_csv(),
        ExportFormat::Json => {
            let mut s = serde_json::to_string_pretty(data)?;
            s.push('\n');
            s
        }
    };
    write_atomic(path, text.as_bytes())
}

/// Spectral coordinates of the layer-by-layer similarity matrix.
pub fn layer_spectral(sets: &[Matrix], dims: usize, opts: SvccaOptions) -> Result<SpectralEmbedding> {
    spectral_embedding(&layer_similarity(sets, opts)?, dims)
}
