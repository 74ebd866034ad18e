//! Pre-norm encoder-decoder transformer with a target-language tag on the
//! encoder input, the low-rank language-embedding hook, layer tracing and
//! greedy/beam decoding.

use std::collections::BTreeMap;
use std::ops::Range;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Activation, AttentionLayout, Axis, Graph, Tensor, Var};
use crate::corpus::{TaggedExample, BOS, EOS, FIRST_TAG, PAD};
use crate::error::{Error, Result};
use crate::linalg::Matrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FfnActivation {
    Gelu,
    Relu,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TransformerConfig {
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub d_model: usize,
    pub heads: usize,
    pub d_ffn: usize,
    pub dropout: f64,
    /// Zero means "take it from the dataset".
    pub vocab_size: usize,
    /// Number of language tags; zero means "take it from the dataset".
    pub num_languages: usize,
    pub max_positions: usize,
    pub activation: FfnActivation,
    pub tie_embeddings: bool,
    pub lole_enabled: bool,
    /// 1-based encoder layer; defaults to the second-top layer.
    pub lole_layer: Option<usize>,
    pub d_e: usize,
    pub lclr_enabled: bool,
    /// 1-based decoder layer; defaults to the bottom layer, or the
    /// second-bottom one when the language embedding is enabled too.
    pub lclr_layer: Option<usize>,
    pub d_h: usize,
    pub k: usize,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            enc_layers: 6,
            dec_layers: 6,
            d_model: 512,
            heads: 4,
            d_ffn: 1024,
            dropout: 0.2,
            vocab_size: 0,
            num_languages: 0,
            max_positions: 256,
            activation: FfnActivation::Gelu,
            tie_embeddings: true,
            lole_enabled: false,
            lole_layer: None,
            d_e: 128,
            lclr_enabled: false,
            lclr_layer: None,
            d_h: 64,
            k: 30,
        }
    }
}

impl TransformerConfig {
    pub fn lole_layer(&self) -> usize {
        self.lole_layer
            .unwrap_or_else(|| self.enc_layers.saturating_sub(1).max(1))
    }

    pub fn lclr_layer(&self) -> usize {
        self.lclr_layer.unwrap_or_else(|| {
            if self.lole_enabled {
                2.min(self.dec_layers.max(1))
            } else {
                1
            }
        })
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return fail("enc_layers and dec_layers must be positive".into());
        }
        if self.heads == 0 || !self.d_model.is_multiple_of(self.heads) {
            return fail(format!(
                "d_model {} must be divisible by heads {}",
                self.d_model, self.heads
            ));
        }
        if self.vocab_size == 0 || self.num_languages == 0 {
            return fail("vocab_size and num_languages must be set".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.lole_enabled {
            if self.d_e == 0 || self.d_e > self.d_model {
                return fail(format!("d_e {} must lie in 1..={}", self.d_e, self.d_model));
            }
            let z = self.lole_layer();
            if z == 0 || z > self.enc_layers {
                return fail(format!("lole_layer {z} outside 1..={}", self.enc_layers));
            }
        }
        if self.lclr_enabled {
            if self.d_h == 0 || self.d_h > self.d_model {
                return fail(format!("d_h {} must lie in 1..={}", self.d_h, self.d_model));
            }
            let l = self.lclr_layer();
            if l == 0 || l > self.dec_layers {
                return fail(format!("lclr_layer {l} outside 1..={}", self.dec_layers));
            }
        }
        Ok(())
    }

    pub fn same_architecture(&self, other: &TransformerConfig) -> bool {
        self.expected_shapes() == other.expected_shapes()
            && self.heads == other.heads
            && self.activation == other.activation
            && (!self.lole_enabled || self.lole_layer() == other.lole_layer())
    }

    pub fn describe(&self) -> String {
        format!(
            "{}+{} layers, d_model {}, heads {}, d_ffn {}, vocab {}, languages {}, lole {}",
            self.enc_layers,
            self.dec_layers,
            self.d_model,
            self.heads,
            self.d_ffn,
            self.vocab_size,
            self.num_languages,
            if self.lole_enabled {
                format!("on (d_e {})", self.d_e)
            } else {
                "off".into()
            }
        )
    }

    /// Every learnable tensor with its shape, in name order.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.d_model;
        let f = self.d_ffn;
        let mut out: Vec<(String, Vec<usize>)> = Vec::new();
        let norm = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.gamma"), vec![d]));
            out.push((format!("{p}.beta"), vec![d]));
        };
        let attn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            for proj in ["q", "k", "v", "o"] {
                out.push((format!("{p}.{proj}.w"), vec![d, d]));
                out.push((format!("{p}.{proj}.b"), vec![d]));
            }
        };
        let ffn = |out: &mut Vec<(String, Vec<usize>)>, p: &str| {
            out.push((format!("{p}.in.w"), vec![d, f]));
            out.push((format!("{p}.in.b"), vec![f]));
            out.push((format!("{p}.out.w"), vec![f, d]));
            out.push((format!("{p}.out.b"), vec![d]));
        };
        out.push(("embed.tokens".into(), vec![self.vocab_size, d]));
        if !self.tie_embeddings {
            out.push(("output.proj".into(), vec![d, self.vocab_size]));
        }
        for z in 1..=self.enc_layers {
            norm(&mut out, &format!("enc.{z}.attn_norm"));
            attn(&mut out, &format!("enc.{z}.attn"));
            norm(&mut out, &format!("enc.{z}.ffn_norm"));
            ffn(&mut out, &format!("enc.{z}.ffn"));
        }
        norm(&mut out, "enc.final_norm");
        for z in 1..=self.dec_layers {
            norm(&mut out, &format!("dec.{z}.self_norm"));
            attn(&mut out, &format!("dec.{z}.self_attn"));
            norm(&mut out, &format!("dec.{z}.cross_norm"));
            attn(&mut out, &format!("dec.{z}.cross_attn"));
            norm(&mut out, &format!("dec.{z}.ffn_norm"));
            ffn(&mut out, &format!("dec.{z}.ffn"));
        }
        norm(&mut out, "dec.final_norm");
        if self.lole_enabled {
            out.push(("lole.embeddings".into(), vec![self.num_languages, self.d_e]));
        }
        out.sort_by(|a, b| a.0.cmp(&b.0));
        out
    }

    pub fn language_of_tag(&self, tag: u32) -> Result<usize> {
        if tag >= FIRST_TAG && ((tag - FIRST_TAG) as usize) < self.num_languages {
            Ok((tag - FIRST_TAG) as usize)
        } else {
            Err(Error::InvalidTag(tag))
        }
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    // FNV-1a, so each tensor's init is independent of which others exist
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Named learnable tensors together with the architecture they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    config: TransformerConfig,
    tensors: BTreeMap<String, Tensor>,
}

impl ModelParams {
    pub fn init(config: &TransformerConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut tensors = BTreeMap::new();
        for (name, shape) in config.expected_shapes() {
            let n: usize = shape.iter().product();
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
            let data: Vec<f64> = if name.ends_with(".gamma") {
                vec![1.0; n]
            } else if name.ends_with(".beta") || name.ends_with(".b") || name.starts_with("lole.") {
                vec![0.0; n]
            } else if name == "embed.tokens" {
                // variance 1/d, so scaled embeddings have unit variance
                let a = (3.0 / d as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            } else {
                let a = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                (0..n).map(|_| rng.random_range(-a..a)).collect()
            };
            tensors.insert(name, Tensor::new(shape, data)?);
        }
        Ok(ModelParams {
            config: config.clone(),
            tensors,
        })
    }

    pub fn from_tensors(config: TransformerConfig, tensors: Vec<(String, Tensor)>) -> Result<Self> {
        config.validate()?;
        let mut map: BTreeMap<String, Tensor> = tensors.into_iter().collect();
        for (name, shape) in config.expected_shapes() {
            match map.get(&name) {
                None => {
                    return Err(Error::ConfigMismatch(format!(
                        "tensor {name} missing for {}",
                        config.describe()
                    )))
                }
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(Error::ConfigMismatch(format!(
                        "tensor {name} has shape {:?}, config expects {shape:?}",
                        t.shape()
                    )))
                }
                Some(t) if !t.is_finite() => {
                    return Err(Error::Format(format!("tensor {name} has non-finite values")))
                }
                Some(_) => {}
            }
        }
        let expected: std::collections::BTreeSet<String> =
            config.expected_shapes().into_iter().map(|(n, _)| n).collect();
        if let Some(extra) = map.keys().find(|k| !expected.contains(*k)) {
            return Err(Error::ConfigMismatch(format!(
                "unexpected tensor {extra} for {}",
                config.describe()
            )));
        }
        map.retain(|k, _| expected.contains(k));
        Ok(ModelParams {
            config,
            tensors: map,
        })
    }

    pub fn config(&self) -> &TransformerConfig {
        &self.config
    }

    /// Training-time knobs that do not change tensor shapes.
    pub fn config_mut_nonstructural(&mut self) -> NonStructural<'_> {
        NonStructural(&mut self.config)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }
}

/// Mutable view of configuration fields that leave the parameter set unchanged.
pub struct NonStructural<'a>(&'a mut TransformerConfig);

impl NonStructural<'_> {
    pub fn set_dropout(&mut self, p: f64) {
        self.0.dropout = p;
    }

    pub fn set_lclr(&mut self, enabled: bool, layer: Option<usize>, d_h: usize, k: usize) {
        self.0.lclr_enabled = enabled;
        self.0.lclr_layer = layer;
        self.0.d_h = d_h;
        self.0.k = k;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Encoder,
    Decoder,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CapturePoint {
    LayerOutput,
    /// The input of the feed-forward sublayer (after the language bias, if any).
    PreFfn,
}

/// Hidden states of one layer for every sentence of a batch.
#[derive(Debug, Clone)]
pub struct LayerTrace {
    pub side: Side,
    /// 1-based layer index.
    pub layer: usize,
    pub capture: CapturePoint,
    /// One `positions × d_model` matrix per sentence.
    pub states: Vec<Matrix>,
    /// Position 0 holds the language tag (encoder side).
    pub tag_leading: bool,
}

/// Parameters bound as leaves of one graph.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Binds names to existing graph variables, e.g. leaves created by a
    /// gradient checker.
    pub fn from_vars(pairs: impl IntoIterator<Item = (String, Var)>) -> Self {
        Bound {
            vars: pairs.into_iter().collect(),
        }
    }

    pub fn var(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter {name} is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Debug, Clone, Copy)]
pub struct SourceRef<'a> {
    pub tokens: &'a [u32],
    pub tag: u32,
}

impl<'a> From<&'a TaggedExample> for SourceRef<'a> {
    fn from(e: &'a TaggedExample) -> Self {
        SourceRef {
            tokens: &e.source,
            tag: e.tag,
        }
    }
}

#[derive(Default)]
pub struct ForwardOptions<'r> {
    pub trace: bool,
    /// Dropout randomness; `None` runs in evaluation mode.
    pub dropout: Option<&'r mut ChaCha8Rng>,
}

impl ForwardOptions<'_> {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn traced() -> Self {
        ForwardOptions {
            trace: true,
            dropout: None,
        }
    }
}

pub struct EncoderOutput {
    /// Final-normalized states, `[positions, d_model]`.
    pub states: Var,
    pub segments: Vec<Range<usize>>,
    /// Target language of each sentence.
    pub languages: Vec<usize>,
    pub traces: Vec<LayerTrace>,
    pub pre_ffn: Option<LayerTrace>,
}

pub struct DecoderOutput {
    /// Residual stream after each decoder layer.
    pub layer_outputs: Vec<Var>,
    pub logits: Var,
    pub segments: Vec<Range<usize>>,
    pub traces: Vec<LayerTrace>,
}

/// Teacher-forced outputs for a batch, detached from any graph.
pub struct TeacherForced {
    /// `(target_len + 1) × vocab` logits per example.
    pub logits: Vec<Matrix>,
    pub encoder: Vec<LayerTrace>,
    pub pre_ffn: Option<LayerTrace>,
    pub decoder: Vec<LayerTrace>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeamOptions {
    pub beam_size: usize,
    pub max_len: usize,
    /// Exponent of the length normalization `score / len^α`.
    pub length_penalty: f64,
}

impl Default for BeamOptions {
    fn default() -> Self {
        BeamOptions {
            beam_size: 4,
            max_len: 32,
            length_penalty: 1.0,
        }
    }
}

fn packed_segments(lengths: impl IntoIterator<Item = usize>) -> Vec<Range<usize>> {
    let mut start = 0;
    lengths
        .into_iter()
        .map(|l| {
            let r = start..start + l;
            start += l;
            r
        })
        .collect()
}

/// Adds `e` to the leading `d_e` features of every row of `h`.
///
/// `e` is either one row `[d_e]`/`[1, d_e]` broadcast over all positions or
/// one row per position `[rows, d_e]`.
pub fn lole_bias(g: &mut Graph, h: Var, e: Var) -> Result<Var> {
    let (rows, d) = g.value(h).dims2();
    let (e_rows, d_e) = g.value(e).dims2();
    if d_e > d {
        return Err(Error::shape(
            "lole_bias",
            format!("embedding width {d_e} exceeds model width {d}"),
        ));
    }
    if e_rows != 1 && e_rows != rows {
        return Err(Error::shape(
            "lole_bias",
            format!("{e_rows} embedding rows for {rows} positions"),
        ));
    }
    let e = if g.shape(e).len() == 2 {
        e
    } else {
        g.reshape(e, &[1, d_e])?
    };
    let padded = if d_e < d {
        let zeros = g.constant(Tensor::zeros(&[e_rows, d - d_e]));
        g.concat(&[e, zeros], Axis::Cols)?
    } else {
        e
    };
    g.add(h, padded)
}

/// Model façade over borrowed parameters.
pub struct Model<'p> {
    params: &'p ModelParams,
    positions: Vec<f64>,
}

impl<'p> Model<'p> {
    pub fn new(params: &'p ModelParams) -> Self {
        let c = params.config();
        let d = c.d_model;
        let mut positions = vec![0.0; c.max_positions * d];
        for pos in 0..c.max_positions {
            for i in 0..d / 2 {
                let freq = (-(10000f64.ln()) * (2 * i) as f64 / d as f64).exp();
                positions[pos * d + 2 * i] = (pos as f64 * freq).sin();
                positions[pos * d + 2 * i + 1] = (pos as f64 * freq).cos();
            }
        }
        Model { params, positions }
    }

    pub fn config(&self) -> &TransformerConfig {
        self.params.config()
    }

    pub fn params(&self) -> &ModelParams {
        self.params
    }

    /// Loads every parameter into `g` as a leaf.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self
                .params
                .iter()
                .map(|(n, t)| (n.to_string(), g.leaf(t.clone(), trainable)))
                .collect(),
        }
    }

    fn embed(&self, g: &mut Graph, bound: &Bound, ids: &[usize], pos: &[usize]) -> Result<Var> {
        let c = self.config();
        let d = c.d_model;
        if let Some(&bad) = ids.iter().find(|&&i| i >= c.vocab_size) {
            return Err(Error::InvalidInput(format!(
                "token {bad} outside vocabulary of {}",
                c.vocab_size
            )));
        }
        if let Some(&p) = pos.iter().find(|&&p| p >= c.max_positions) {
            return Err(Error::Contract(format!(
                "position {p} exceeds the positional table of {}",
                c.max_positions
            )));
        }
        let table = bound.var("embed.tokens")?;
        let tok = g.embedding_lookup(table, ids)?;
        let tok = g.scale(tok, (d as f64).sqrt());
        let mut pe = Vec::with_capacity(ids.len() * d);
        for &p in pos {
            pe.extend_from_slice(&self.positions[p * d..(p + 1) * d]);
        }
        let pe = g.constant(Tensor::matrix(ids.len(), d, pe)?);
        g.add(tok, pe)
    }

    fn linear(&self, g: &mut Graph, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let w = bound.var(&format!("{prefix}.w"))?;
        let b = bound.var(&format!("{prefix}.b"))?;
        let y = g.matmul(x, w)?;
        g.add(y, b)
    }

    fn norm(&self, g: &mut Graph, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let gamma = bound.var(&format!("{prefix}.gamma"))?;
        let beta = bound.var(&format!("{prefix}.beta"))?;
        g.layer_norm(x, gamma, beta)
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_block(
        &self,
        g: &mut Graph,
        bound: &Bound,
        prefix: &str,
        queries: Var,
        keys: Var,
        layout: &Arc<AttentionLayout>,
        causal: bool,
    ) -> Result<Var> {
        let q = self.linear(g, bound, queries, &format!("{prefix}.q"))?;
        let k = self.linear(g, bound, keys, &format!("{prefix}.k"))?;
        let v = self.linear(g, bound, keys, &format!("{prefix}.v"))?;
        let a = g.attention(q, k, v, layout, self.config().heads, causal)?;
        self.linear(g, bound, a, &format!("{prefix}.o"))
    }

    fn ffn(&self, g: &mut Graph, bound: &Bound, x: Var, prefix: &str) -> Result<Var> {
        let h = self.linear(g, bound, x, &format!("{prefix}.in"))?;
        let h = g.activation(
            h,
            match self.config().activation {
                FfnActivation::Gelu => Activation::Gelu,
                FfnActivation::Relu => Activation::Relu,
            },
        );
        self.linear(g, bound, h, &format!("{prefix}.out"))
    }

    fn dropout(&self, g: &mut Graph, x: Var, opts: &mut ForwardOptions<'_>) -> Var {
        let p = self.config().dropout;
        match opts.dropout.as_deref_mut() {
            Some(rng) if p > 0.0 => g.dropout(x, p, rng),
            _ => x,
        }
    }

    fn trace(
        g: &Graph,
        v: Var,
        segments: &[Range<usize>],
        side: Side,
        layer: usize,
        capture: CapturePoint,
    ) -> Result<LayerTrace> {
        let t = g.value(v);
        let (_, d) = t.dims2();
        let states = segments
            .iter()
            .map(|s| Matrix::from_vec(s.len(), d, t.data()[s.start * d..s.end * d].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(LayerTrace {
            side,
            layer,
            capture,
            states,
            tag_leading: side == Side::Encoder,
        })
    }

    /// Encodes `[tag] ++ source` for every sentence.
    pub fn encode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[SourceRef<'_>],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<EncoderOutput> {
        let c = self.config().clone();
        if batch.is_empty() {
            return Err(Error::InvalidInput("empty encoder batch".into()));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut languages = Vec::with_capacity(batch.len());
        let mut token_lang = Vec::new();
        for s in batch {
            if s.tokens.is_empty() {
                return Err(Error::InvalidInput("empty source sentence".into()));
            }
            let lang = c.language_of_tag(s.tag)?;
            languages.push(lang);
            ids.push(s.tag as usize);
            ids.extend(s.tokens.iter().map(|&t| t as usize));
            pos.extend(0..s.tokens.len() + 1);
            token_lang.extend(std::iter::repeat_n(lang, s.tokens.len() + 1));
        }
        let segments = packed_segments(batch.iter().map(|s| s.tokens.len() + 1));
        let layout = Arc::new(AttentionLayout::self_attention(&segments));

        let mut x = self.embed(g, bound, &ids, &pos)?;
        x = self.dropout(g, x, opts);
        let mut traces = Vec::new();
        let mut pre_ffn = None;
        for z in 1..=c.enc_layers {
            let h = self.norm(g, bound, x, &format!("enc.{z}.attn_norm"))?;
            let a = self.attention_block(g, bound, &format!("enc.{z}.attn"), h, h, &layout, false)?;
            let a = self.dropout(g, a, opts);
            x = g.add(x, a)?;
            if c.lole_enabled && z == c.lole_layer() {
                let table = bound.var("lole.embeddings")?;
                let e = g.embedding_lookup(table, &token_lang)?;
                x = lole_bias(g, x, e)?;
            }
            if opts.trace && z == c.lole_layer() {
                pre_ffn = Some(Self::trace(g, x, &segments, Side::Encoder, z, CapturePoint::PreFfn)?);
            }
            let h = self.norm(g, bound, x, &format!("enc.{z}.ffn_norm"))?;
            let f = self.ffn(g, bound, h, &format!("enc.{z}.ffn"))?;
            let f = self.dropout(g, f, opts);
            x = g.add(x, f)?;
            if opts.trace {
                traces.push(Self::trace(g, x, &segments, Side::Encoder, z, CapturePoint::LayerOutput)?);
            }
        }
        let states = self.norm(g, bound, x, "enc.final_norm")?;
        Ok(EncoderOutput {
            states,
            segments,
            languages,
            traces,
            pre_ffn,
        })
    }

    /// Runs the decoder over `prefixes` (each starting with BOS). Sequence
    /// `i` attends to encoder segment `encoder_index[i]`.
    #[allow(clippy::too_many_arguments)]
    pub fn decode(
        &self,
        g: &mut Graph,
        bound: &Bound,
        encoder_states: Var,
        encoder_segments: &[Range<usize>],
        encoder_index: &[usize],
        prefixes: &[&[u32]],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<DecoderOutput> {
        let c = self.config().clone();
        if prefixes.is_empty() || prefixes.len() != encoder_index.len() {
            return Err(Error::InvalidInput(format!(
                "{} decoder prefixes for {} encoder indices",
                prefixes.len(),
                encoder_index.len()
            )));
        }
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        for p in prefixes {
            if p.is_empty() {
                return Err(Error::InvalidInput("empty decoder prefix".into()));
            }
            ids.extend(p.iter().map(|&t| t as usize));
            pos.extend(0..p.len());
        }
        let segments = packed_segments(prefixes.iter().map(|p| p.len()));
        let self_layout = Arc::new(AttentionLayout::self_attention(&segments));
        let keys = encoder_index
            .iter()
            .map(|&i| {
                encoder_segments
                    .get(i)
                    .cloned()
                    .ok_or_else(|| Error::InvalidInput(format!("encoder index {i} out of range")))
            })
            .collect::<Result<Vec<_>>>()?;
        let cross_layout = Arc::new(AttentionLayout::new(segments.clone(), keys)?);

        let mut x = self.embed(g, bound, &ids, &pos)?;
        x = self.dropout(g, x, opts);
        let mut layer_outputs = Vec::with_capacity(c.dec_layers);
        let mut traces = Vec::new();
        for z in 1..=c.dec_layers {
            let h = self.norm(g, bound, x, &format!("dec.{z}.self_norm"))?;
            let a = self.attention_block(g, bound, &format!("dec.{z}.self_attn"), h, h, &self_layout, true)?;
            let a = self.dropout(g, a, opts);
            x = g.add(x, a)?;
            let h = self.norm(g, bound, x, &format!("dec.{z}.cross_norm"))?;
            let a = self.attention_block(
                g,
                bound,
                &format!("dec.{z}.cross_attn"),
                h,
                encoder_states,
                &cross_layout,
                false,
            )?;
            let a = self.dropout(g, a, opts);
            x = g.add(x, a)?;
            let h = self.norm(g, bound, x, &format!("dec.{z}.ffn_norm"))?;
            let f = self.ffn(g, bound, h, &format!("dec.{z}.ffn"))?;
            let f = self.dropout(g, f, opts);
            x = g.add(x, f)?;
            layer_outputs.push(x);
            if opts.trace {
                traces.push(Self::trace(g, x, &segments, Side::Decoder, z, CapturePoint::LayerOutput)?);
            }
        }
        let h = self.norm(g, bound, x, "dec.final_norm")?;
        let logits = if c.tie_embeddings {
            let table = bound.var("embed.tokens")?;
            let t = g.transpose(table)?;
            g.matmul(h, t)?
        } else {
            let w = bound.var("output.proj")?;
            g.matmul(h, w)?
        };
        Ok(DecoderOutput {
            layer_outputs,
            logits,
            segments,
            traces,
        })
    }

    /// Builds the teacher-forced graph: decoder inputs are `[BOS] ++ target`,
    /// gold outputs `target ++ [EOS]`.
    pub fn teacher_forced_graph(
        &self,
        g: &mut Graph,
        bound: &Bound,
        batch: &[&TaggedExample],
        opts: &mut ForwardOptions<'_>,
    ) -> Result<(EncoderOutput, DecoderOutput, Vec<Option<usize>>)> {
        let sources: Vec<SourceRef<'_>> = batch.iter().map(|e| SourceRef::from(*e)).collect();
        let enc = self.encode(g, bound, &sources, opts)?;
        let inputs: Vec<Vec<u32>> = batch
            .iter()
            .map(|e| std::iter::once(BOS).chain(e.target.iter().copied()).collect())
            .collect();
        let refs: Vec<&[u32]> = inputs.iter().map(Vec::as_slice).collect();
        let index: Vec<usize> = (0..batch.len()).collect();
        let dec = self.decode(g, bound, enc.states, &enc.segments, &index, &refs, opts)?;
        let targets = batch
            .iter()
            .flat_map(|e| {
                e.target
                    .iter()
                    .map(|&t| Some(t as usize))
                    .chain(std::iter::once(Some(EOS as usize)))
            })
            .collect();
        Ok((enc, dec, targets))
    }

    /// Evaluation-mode teacher-forced forward pass.
    pub fn forward_teacher_forced(&self, batch: &[&TaggedExample], trace: bool) -> Result<TeacherForced> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g, false);
        let mut opts = ForwardOptions {
            trace,
            dropout: None,
        };
        let (enc, dec, _) = self.teacher_forced_graph(&mut g, &bound, batch, &mut opts)?;
        let t = g.value(dec.logits);
        let v = t.dims2().1;
        let logits = dec
            .segments
            .iter()
            .map(|s| Matrix::from_vec(s.len(), v, t.data()[s.start * v..s.end * v].to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok(TeacherForced {
            logits,
            encoder: enc.traces,
            pre_ffn: enc.pre_ffn,
            decoder: dec.traces,
        })
    }

    /// Encoder-only evaluation pass with traces.
    pub fn encoder_traces(&self, batch: &[SourceRef<'_>]) -> Result<(Vec<LayerTrace>, Option<LayerTrace>)> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &bound, batch, &mut ForwardOptions::traced())?;
        Ok((enc.traces, enc.pre_ffn))
    }

    fn blocked(&self, token: usize) -> bool {
        let t = token as u32;
        t == PAD || t == BOS || (t >= FIRST_TAG && t < FIRST_TAG + self.config().num_languages as u32)
    }

    fn log_probs(&self, row: &[f64]) -> Vec<f64> {
        let max = row
            .iter()
            .enumerate()
            .filter(|(i, _)| !self.blocked(*i))
            .map(|(_, &x)| x)
            .fold(f64::NEG_INFINITY, f64::max);
        let lse = max
            + row
                .iter()
                .enumerate()
                .filter(|(i, _)| !self.blocked(*i))
                .map(|(_, x)| (x - max).exp())
                .sum::<f64>()
                .ln();
        row.iter()
            .enumerate()
            .map(|(i, &x)| if self.blocked(i) { f64::NEG_INFINITY } else { x - lse })
            .collect()
    }

    /// Encoder states as a detached tensor plus segments.
    fn encode_detached(&self, batch: &[SourceRef<'_>]) -> Result<(Tensor, Vec<Range<usize>>)> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g, false);
        let enc = self.encode(&mut g, &bound, batch, &mut ForwardOptions::eval())?;
        Ok((g.value(enc.states).clone(), enc.segments))
    }

    /// Next-token log-probabilities for each prefix.
    fn step_log_probs(
        &self,
        encoder: &Tensor,
        segments: &[Range<usize>],
        index: &[usize],
        prefixes: &[&[u32]],
    ) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::inference();
        let bound = self.bind(&mut g, false);
        let states = g.constant(encoder.clone());
        let dec = self.decode(&mut g, &bound, states, segments, index, prefixes, &mut ForwardOptions::eval())?;
        let t = g.value(dec.logits);
        let v = t.dims2().1;
        Ok(dec
            .segments
            .iter()
            .map(|s| self.log_probs(&t.data()[(s.end - 1) * v..s.end * v]))
            .collect())
    }

    /// Greedy decoding of a batch; outputs exclude BOS and EOS.
    pub fn greedy_decode_batch(&self, batch: &[SourceRef<'_>], max_len: usize) -> Result<Vec<Vec<u32>>> {
        if batch.is_empty() {
            return Ok(Vec::new());
        }
        let (encoder, segments) = self.encode_detached(batch)?;
        let max_len = max_len.min(self.config().max_positions - 1);
        let mut prefixes: Vec<Vec<u32>> = vec![vec![BOS]; batch.len()];
        let mut done = vec![false; batch.len()];
        for _ in 0..max_len {
            let alive: Vec<usize> = (0..batch.len()).filter(|&i| !done[i]).collect();
            if alive.is_empty() {
                break;
            }
            let refs: Vec<&[u32]> = alive.iter().map(|&i| prefixes[i].as_slice()).collect();
            let lp = self.step_log_probs(&encoder, &segments, &alive, &refs)?;
            for (&i, row) in alive.iter().zip(&lp) {
                let next = argmax(row) as u32;
                if next == EOS {
                    done[i] = true;
                } else {
                    prefixes[i].push(next);
                }
            }
        }
        Ok(prefixes.into_iter().map(|p| p[1..].to_vec()).collect())
    }

    pub fn greedy_decode(&self, source: &[u32], tag: u32, max_len: usize) -> Result<Vec<u32>> {
        Ok(self
            .greedy_decode_batch(&[SourceRef { tokens: source, tag }], max_len)?
            .pop()
            .unwrap_or_default())
    }

    /// Beam search under length-normalized log-probability. The output
    /// excludes BOS and EOS.
    pub fn beam_search(&self, source: &[u32], tag: u32, opts: BeamOptions) -> Result<Vec<u32>> {
        if opts.beam_size == 0 {
            return Err(Error::InvalidInput("beam size must be at least 1".into()));
        }
        let (encoder, segments) = self.encode_detached(&[SourceRef { tokens: source, tag }])?;
        let max_len = opts.max_len.min(self.config().max_positions - 1);
        let norm = |logp: f64, len: usize| logp / (len.max(1) as f64).powf(opts.length_penalty);

        // (tokens after BOS, cumulative log-prob)
        let mut alive: Vec<(Vec<u32>, f64)> = vec![(Vec::new(), 0.0)];
        let mut finished: Vec<(Vec<u32>, f64)> = Vec::new();
        for _ in 0..max_len {
            let prefixes: Vec<Vec<u32>> = alive
                .iter()
                .map(|(t, _)| std::iter::once(BOS).chain(t.iter().copied()).collect())
                .collect();
            let refs: Vec<&[u32]> = prefixes.iter().map(Vec::as_slice).collect();
            let index = vec![0; refs.len()];
            let lp = self.step_log_probs(&encoder, &segments, &index, &refs)?;

            let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
            for (h, row) in lp.iter().enumerate() {
                for tok in top_k(row, opts.beam_size) {
                    candidates.push((alive[h].1 + row[tok], h, tok));
                }
            }
            candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut next = Vec::new();
            for (score, h, tok) in candidates {
                if next.len() >= opts.beam_size {
                    break;
                }
                if tok as u32 == EOS {
                    let tokens = alive[h].0.clone();
                    let len = tokens.len() + 1;
                    finished.push((tokens, norm(score, len)));
                    if finished.len() >= opts.beam_size {
                        break;
                    }
                } else {
                    let mut tokens = alive[h].0.clone();
                    tokens.push(tok as u32);
                    next.push((tokens, score));
                }
            }
            alive = next;
            if alive.is_empty() || finished.len() >= opts.beam_size {
                break;
            }
        }
        if finished.len() < opts.beam_size {
            for (tokens, score) in alive {
                let len = tokens.len();
                finished.push((tokens, norm(score, len)));
            }
        }
        let mut best: Option<(Vec<u32>, f64)> = None;
        for (tokens, score) in finished {
            if best.as_ref().is_none_or(|(_, s)| score > *s) {
                best = Some((tokens, score));
            }
        }
        Ok(best.map(|b| b.0).unwrap_or_default())
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

fn top_k(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).filter(|&i| row[i].is_finite()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}
