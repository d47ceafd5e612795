//! Bidirectional post-LN transformer encoder with optional factorized
//! embeddings, cross-layer weight sharing, a tied MLM head and linear task
//! heads.

use std::collections::BTreeSet;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{checkpoint, Graph, ParamId, ParamStore, Tensor, Var};
use crate::tokenizer::{Vocabulary, CLS, PAD, SEP, UNK};

pub const LN_EPS: f64 = 1e-12;
const INIT_STD: f64 = 0.02;
const MASK_VALUE: f64 = -1e9;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub vocab_size: usize,
    pub hidden_size: usize,
    /// Inner size of the factorized embedding, if any.
    #[serde(default)]
    pub embedding_size: Option<usize>,
    pub num_layers: usize,
    pub num_heads: usize,
    pub ffn_size: usize,
    #[serde(default = "default_max_pos")]
    pub max_pos: usize,
    #[serde(default = "yes")]
    pub use_segments: bool,
    #[serde(default)]
    pub share_weights: bool,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    #[serde(default = "yes")]
    pub pooler: bool,
}

fn default_max_pos() -> usize {
    512
}
fn yes() -> bool {
    true
}
fn default_dropout() -> f64 {
    0.1
}

pub const PRESETS: [&str; 5] = ["bert-base", "distil-half", "albert-like", "roberta-like", "tiny"];

impl EncoderConfig {
    pub fn preset(name: &str) -> Result<Self> {
        let base = Self {
            vocab_size: 28_996,
            hidden_size: 768,
            embedding_size: None,
            num_layers: 12,
            num_heads: 12,
            ffn_size: 3072,
            max_pos: 512,
            use_segments: true,
            share_weights: false,
            dropout: 0.1,
            pooler: true,
        };
        Ok(match name {
            "bert-base" => base,
            "distil-half" => base.distilled(),
            "albert-like" => Self {
                vocab_size: 30_000,
                embedding_size: Some(128),
                share_weights: true,
                ..base
            },
            "roberta-like" => Self {
                vocab_size: 50_265,
                ..base
            },
            "tiny" => Self {
                vocab_size: 1000,
                hidden_size: 32,
                num_layers: 2,
                num_heads: 2,
                ffn_size: 64,
                max_pos: 128,
                dropout: 0.0,
                ..base
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown preset {other:?}; expected one of {}",
                    PRESETS.join(", ")
                )))
            }
        })
    }

    /// Student layout: half the layers, no segment embeddings, no pooler.
    pub fn distilled(&self) -> Self {
        Self {
            num_layers: (self.num_layers / 2).max(1),
            use_segments: false,
            pooler: false,
            ..self.clone()
        }
    }

    pub fn head_size(&self) -> usize {
        self.hidden_size / self.num_heads
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.num_layers == 0 {
            return fail("num_layers must be at least 1".into());
        }
        if self.num_heads == 0 || self.hidden_size == 0 || !self.hidden_size.is_multiple_of(self.num_heads) {
            return fail(format!(
                "hidden_size {} must be a positive multiple of num_heads {}",
                self.hidden_size, self.num_heads
            ));
        }
        if let Some(s) = self.embedding_size {
            if s == 0 || s >= self.hidden_size {
                return fail(format!("embedding_size {s} must lie in 1..{}", self.hidden_size));
            }
        }
        if self.vocab_size <= SEP || self.ffn_size == 0 || self.max_pos == 0 {
            return fail("vocab_size, ffn_size and max_pos must be positive".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail(format!("dropout must lie in [0, 1), got {}", self.dropout));
        }
        Ok(())
    }
}

/// Closed-form parameter counts per component.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamCount {
    /// `V·E`, or `V·S + S·E` when factorized.
    pub token_embedding: usize,
    pub position_embedding: usize,
    pub segment_embedding: usize,
    pub embedding_norm: usize,
    pub per_layer: usize,
    /// Physical layer parameters: one layer's worth when shared.
    pub layers: usize,
    pub pooler: usize,
    pub mlm_head: usize,
    pub total: usize,
}

impl ParamCount {
    pub fn embeddings(&self) -> usize {
        self.token_embedding + self.position_embedding + self.segment_embedding + self.embedding_norm
    }
}

pub fn param_count(c: &EncoderConfig) -> ParamCount {
    let (v, e, f) = (c.vocab_size, c.hidden_size, c.ffn_size);
    let token_embedding = match c.embedding_size {
        Some(s) => v * s + s * e,
        None => v * e,
    };
    let position_embedding = c.max_pos * e;
    let segment_embedding = if c.use_segments { 2 * e } else { 0 };
    let embedding_norm = 2 * e;
    let per_layer = 4 * (e * e + e) + (e * f + f) + (f * e + e) + 2 * 2 * e;
    let layers = per_layer * if c.share_weights { 1 } else { c.num_layers };
    let pooler = if c.pooler { e * e + e } else { 0 };
    // dense + norm + output bias; the output matrix is the tied embedding
    let mlm_head = e * e + e + 2 * e + v;
    let total = token_embedding + position_embedding + segment_embedding + embedding_norm + layers + pooler + mlm_head;
    ParamCount {
        token_embedding,
        position_embedding,
        segment_embedding,
        embedding_norm,
        per_layer,
        layers,
        pooler,
        mlm_head,
        total,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerIds {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln1: (ParamId, ParamId),
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln2: (ParamId, ParamId),
}

#[derive(Clone, Debug, PartialEq)]
struct Layout {
    token: ParamId,
    projection: Option<ParamId>,
    position: ParamId,
    segment: Option<ParamId>,
    emb_ln: (ParamId, ParamId),
    layers: Vec<LayerIds>,
    pooler: Option<Linear>,
    mlm_dense: Linear,
    mlm_ln: (ParamId, ParamId),
    mlm_bias: ParamId,
}

/// Task head: a linear map from hidden states to class logits.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Head {
    pub linear: Linear,
    pub num_classes: usize,
}

/// Token ids with segment and padding masks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodedInput {
    pub ids: Vec<usize>,
    pub segment_ids: Vec<usize>,
    pub attention_mask: Vec<u8>,
}

impl EncodedInput {
    /// Single segment, no padding.
    pub fn single(ids: Vec<usize>) -> Self {
        let n = ids.len();
        Self {
            ids,
            segment_ids: vec![0; n],
            attention_mask: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Appends PAD positions up to `len`.
    pub fn pad_to(&mut self, len: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.segment_ids.push(0);
            self.attention_mask.push(0);
        }
    }
}

/// Encoder weights and the layout of their tensors in the store.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub store: ParamStore,
    layout: Layout,
}

/// Samples weights from `N(0, 0.02²)` with zero biases and unit norm gains.
struct Init<'a> {
    store: ParamStore,
    rng: &'a mut ChaCha8Rng,
    normal: Normal<f64>,
}

impl Init<'_> {
    fn normal(&mut self, name: String, rows: usize, cols: usize) -> Result<ParamId> {
        let data = (0..rows * cols).map(|_| self.normal.sample(self.rng)).collect();
        self.store.add(name, Tensor::matrix(rows, cols, data)?)
    }

    fn filled(&mut self, name: String, cols: usize, v: f64) -> Result<ParamId> {
        self.store.add(name, Tensor::filled(&[1, cols], v))
    }

    fn linear(&mut self, name: &str, input: usize, output: usize) -> Result<Linear> {
        Ok(Linear {
            weight: self.normal(format!("{name}.weight"), input, output)?,
            bias: self.filled(format!("{name}.bias"), output, 0.0)?,
        })
    }

    fn norm(&mut self, name: &str, cols: usize) -> Result<(ParamId, ParamId)> {
        Ok((
            self.filled(format!("{name}.gain"), cols, 1.0)?,
            self.filled(format!("{name}.bias"), cols, 0.0)?,
        ))
    }

    fn layer(&mut self, prefix: &str, e: usize, f: usize) -> Result<LayerIds> {
        Ok(LayerIds {
            q: self.linear(&format!("{prefix}.attn.q"), e, e)?,
            k: self.linear(&format!("{prefix}.attn.k"), e, e)?,
            v: self.linear(&format!("{prefix}.attn.v"), e, e)?,
            o: self.linear(&format!("{prefix}.attn.o"), e, e)?,
            ln1: self.norm(&format!("{prefix}.attn.norm"), e)?,
            ff1: self.linear(&format!("{prefix}.ffn.in"), e, f)?,
            ff2: self.linear(&format!("{prefix}.ffn.out"), f, e)?,
            ln2: self.norm(&format!("{prefix}.ffn.norm"), e)?,
        })
    }
}

impl EncoderParams {
    /// Randomly initialized weights.
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut init = Init {
            store: ParamStore::new(),
            rng: &mut rng,
            normal: Normal::new(0.0, INIT_STD).expect("valid std"),
        };
        let (v, e, f) = (config.vocab_size, config.hidden_size, config.ffn_size);
        let (token, projection) = match config.embedding_size {
            Some(s) => (
                init.normal("embeddings.token".into(), v, s)?,
                Some(init.normal("embeddings.projection".into(), s, e)?),
            ),
            None => (init.normal("embeddings.token".into(), v, e)?, None),
        };
        let position = init.normal("embeddings.position".into(), config.max_pos, e)?;
        let segment = if config.use_segments {
            Some(init.normal("embeddings.segment".into(), 2, e)?)
        } else {
            None
        };
        let emb_ln = init.norm("embeddings.norm", e)?;
        let layers = if config.share_weights {
            vec![init.layer("shared", e, f)?; config.num_layers]
        } else {
            (0..config.num_layers)
                .map(|i| init.layer(&format!("layer.{i}"), e, f))
                .collect::<Result<_>>()?
        };
        let pooler = if config.pooler {
            Some(init.linear("pooler", e, e)?)
        } else {
            None
        };
        let mlm_dense = init.linear("mlm.dense", e, e)?;
        let mlm_ln = init.norm("mlm.norm", e)?;
        let mlm_bias = init.filled("mlm.bias".into(), v, 0.0)?;
        let layout = Layout {
            token,
            projection,
            position,
            segment,
            emb_ln,
            layers,
            pooler,
            mlm_dense,
            mlm_ln,
            mlm_bias,
        };
        Ok(Self {
            config,
            store: init.store,
            layout,
        })
    }

    /// Rebuilds a model from stored tensors, which must match `config`
    /// exactly; extra `head.*` tensors are kept.
    pub fn from_store(config: EncoderConfig, store: ParamStore) -> Result<Self> {
        let mut model = Self::new(config, 0)?;
        model.load_matching(&store, true)?;
        for (_, p) in store.iter() {
            if p.name.starts_with("head.") {
                model.store.add(p.name.clone(), p.value.clone())?;
            }
        }
        Ok(model)
    }

    /// Writes a checkpoint; `metadata` (a JSON object) gains a `"config"` key.
    pub fn save(&self, path: &Path, metadata: serde_json::Value) -> Result<()> {
        checkpoint::save(path, &self.store, self.metadata(metadata)?)
    }

    pub fn to_checkpoint_bytes(&self, metadata: serde_json::Value) -> Result<Vec<u8>> {
        checkpoint::to_bytes(&self.store, self.metadata(metadata)?)
    }

    fn metadata(&self, metadata: serde_json::Value) -> Result<serde_json::Value> {
        let serde_json::Value::Object(mut map) = metadata else {
            return Err(Error::Checkpoint("metadata must be a JSON object".into()));
        };
        map.insert("config".into(), serde_json::to_value(&self.config)?);
        Ok(serde_json::Value::Object(map))
    }

    /// Reads a checkpoint written by [`EncoderParams::save`].
    pub fn load(path: &Path) -> Result<(Self, serde_json::Value)> {
        let (store, metadata) = checkpoint::load(path)?;
        let config: EncoderConfig = serde_json::from_value(
            metadata
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("metadata has no model config".into()))?,
        )?;
        Ok((Self::from_store(config, store)?, metadata))
    }

    /// Copies every encoder tensor from `source`. With `strict`, names present
    /// on one side only are errors as well as shape differences.
    pub fn load_matching(&mut self, source: &ParamStore, strict: bool) -> Result<()> {
        let mut problems = Vec::new();
        let ours: BTreeSet<String> = self.store.iter().map(|(_, p)| p.name.clone()).collect();
        for name in &ours {
            let id = self.store.find(name).expect("own name");
            match source.find(name) {
                Some(sid) => {
                    let (want, got) = (self.store.value(id).shape(), source.value(sid).shape());
                    if want != got {
                        problems.push(format!("{name}: expected {want:?}, found {got:?}"));
                    }
                }
                None if strict => problems.push(format!("{name}: missing")),
                None => {}
            }
        }
        if strict {
            for (_, p) in source.iter() {
                if !ours.contains(&p.name) && !p.name.starts_with("head.") {
                    problems.push(format!("{}: unexpected", p.name));
                }
            }
        }
        if !problems.is_empty() {
            return Err(Error::CheckpointMismatch(problems.join("; ")));
        }
        for name in &ours {
            if let Some(sid) = source.find(name) {
                let id = self.store.find(name).expect("own name");
                self.store.get_mut(id).value = source.value(sid).clone();
            }
        }
        Ok(())
    }

    pub fn layer_ids(&self) -> &[LayerIds] {
        &self.layout.layers
    }

    pub fn token_embedding(&self) -> ParamId {
        self.layout.token
    }

    pub fn projection(&self) -> Option<ParamId> {
        self.layout.projection
    }

    pub fn position_embedding(&self) -> ParamId {
        self.layout.position
    }

    pub fn mlm_bias(&self) -> ParamId {
        self.layout.mlm_bias
    }

    /// Ids of every parameter outside task heads.
    pub fn encoder_param_ids(&self) -> Vec<ParamId> {
        self.store
            .iter()
            .filter(|(_, p)| !p.name.starts_with("head."))
            .map(|(id, _)| id)
            .collect()
    }

    /// Adds (or resets) a linear task head named `name`.
    pub fn add_head(&mut self, name: &str, num_classes: usize, seed: u64) -> Result<Head> {
        if num_classes == 0 {
            return Err(Error::Config("a head needs at least one class".into()));
        }
        let e = self.config.hidden_size;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let w: Vec<f64> = (0..e * num_classes).map(|_| normal.sample(&mut rng)).collect();
        let wname = format!("head.{name}.weight");
        let bname = format!("head.{name}.bias");
        let weight = Tensor::matrix(e, num_classes, w)?;
        let bias = Tensor::zeros(&[1, num_classes]);
        let weight = match self.store.find(&wname) {
            Some(id) => {
                self.store.get_mut(id).value = weight;
                id
            }
            None => self.store.add(wname, weight)?,
        };
        let bias = match self.store.find(&bname) {
            Some(id) => {
                self.store.get_mut(id).value = bias;
                id
            }
            None => self.store.add(bname, bias)?,
        };
        Ok(Head {
            linear: Linear { weight, bias },
            num_classes,
        })
    }

    /// A head previously added under `name`.
    pub fn head(&self, name: &str) -> Option<Head> {
        let weight = self.store.find(&format!("head.{name}.weight"))?;
        let bias = self.store.find(&format!("head.{name}.bias"))?;
        Some(Head {
            linear: Linear { weight, bias },
            num_classes: self.store.value(weight).cols(),
        })
    }

    fn check_input(&self, input: &EncodedInput) -> Result<()> {
        let n = input.ids.len();
        if n == 0 {
            return Err(Error::Shape("empty input".into()));
        }
        if input.segment_ids.len() != n || input.attention_mask.len() != n {
            return Err(Error::LengthMismatch {
                left: n,
                right: input.segment_ids.len().min(input.attention_mask.len()),
            });
        }
        if n > self.config.max_pos {
            return Err(Error::SequenceTooLong {
                len: n,
                max_pos: self.config.max_pos,
            });
        }
        if let Some(&id) = input.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id,
                size: self.config.vocab_size,
            });
        }
        if input.segment_ids.iter().any(|&s| s > 1) {
            return Err(Error::Shape("segment ids must be 0 or 1".into()));
        }
        Ok(())
    }

    fn linear(&self, g: &mut Graph, x: Var, l: Linear) -> Var {
        let w = g.param(&self.store, l.weight);
        let b = g.param(&self.store, l.bias);
        let y = g.matmul(x, w);
        g.add_row(y, b)
    }

    fn norm(&self, g: &mut Graph, x: Var, ln: (ParamId, ParamId)) -> Var {
        let gain = g.param(&self.store, ln.0);
        let bias = g.param(&self.store, ln.1);
        g.layer_norm(x, gain, bias, LN_EPS)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut ChaCha8Rng>) -> Var {
        let p = self.config.dropout;
        let Some(rng) = rng.as_deref_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let keep = 1.0 / (1.0 - p);
        let mask = (0..n).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
        let mask = g.constant(Tensor::from_parts(shape, mask));
        g.mul(x, mask)
    }

    /// Token (+ position, + segment) embeddings before normalization.
    fn embed_sum(&self, g: &mut Graph, input: &EncodedInput) -> Var {
        let table = g.param(&self.store, self.layout.token);
        let mut x = g.gather_rows(table, &input.ids);
        if let Some(p) = self.layout.projection {
            let proj = g.param(&self.store, p);
            x = g.matmul(x, proj);
        }
        let pos = g.param(&self.store, self.layout.position);
        let positions: Vec<usize> = (0..input.ids.len()).collect();
        let pos = g.gather_rows(pos, &positions);
        x = g.add(x, pos);
        if let Some(s) = self.layout.segment {
            let seg = g.param(&self.store, s);
            let seg = g.gather_rows(seg, &input.segment_ids);
            x = g.add(x, seg);
        }
        x
    }

    /// Normalized embeddings `[T×E]`; dropout applies when `rng` is given.
    pub fn embed(&self, g: &mut Graph, input: &EncodedInput, mut rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        self.check_input(input)?;
        let x = self.embed_sum(g, input);
        let x = self.norm(g, x, self.layout.emb_ln);
        Ok(self.dropout(g, x, &mut rng))
    }

    /// Final hidden states `[T×E]` for one input.
    pub fn encode(&self, g: &mut Graph, input: &EncodedInput, rng: Option<&mut ChaCha8Rng>) -> Result<Var> {
        Ok(self.encode_batch(g, std::slice::from_ref(input), rng)?[0])
    }

    /// Hidden states per input. Linear layers run on all rows at once while
    /// attention stays within each sequence.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        inputs: &[EncodedInput],
        mut rng: Option<&mut ChaCha8Rng>,
    ) -> Result<Vec<Var>> {
        if inputs.is_empty() {
            return Err(Error::Shape("empty batch".into()));
        }
        let mut parts = Vec::with_capacity(inputs.len());
        let mut ranges = Vec::with_capacity(inputs.len());
        let mut offset = 0;
        for input in inputs {
            parts.push(self.embed(g, input, rng.as_deref_mut())?);
            ranges.push(offset..offset + input.len());
            offset += input.len();
        }
        let masks: Vec<Tensor> = inputs.iter().map(key_mask).collect();
        let mut x = if parts.len() == 1 { parts[0] } else { g.concat_rows(&parts) };
        for layer in &self.layout.layers {
            x = self.block(g, x, layer, &ranges, &masks, &mut rng);
        }
        g.check_finite()?;
        Ok(if ranges.len() == 1 {
            vec![x]
        } else {
            ranges.into_iter().map(|r| g.gather_rows(x, &r.collect::<Vec<_>>())).collect()
        })
    }

    fn block(
        &self,
        g: &mut Graph,
        x: Var,
        l: &LayerIds,
        ranges: &[std::ops::Range<usize>],
        masks: &[Tensor],
        rng: &mut Option<&mut ChaCha8Rng>,
    ) -> Var {
        let dh = self.config.head_size();
        let q = self.linear(g, x, l.q);
        let q = g.scale(q, 1.0 / (dh as f64).sqrt());
        let k = self.linear(g, x, l.k);
        let v = self.linear(g, x, l.v);
        let mut contexts = Vec::with_capacity(ranges.len());
        for (range, mask) in ranges.iter().zip(masks) {
            let (qs, ks, vs) = if ranges.len() == 1 {
                (q, k, v)
            } else {
                let rows: Vec<usize> = range.clone().collect();
                (g.gather_rows(q, &rows), g.gather_rows(k, &rows), g.gather_rows(v, &rows))
            };
            let mask = g.constant(mask.clone());
            let mut heads = Vec::with_capacity(self.config.num_heads);
            for h in 0..self.config.num_heads {
                let qh = g.slice_cols(qs, h * dh, dh);
                let kh = g.slice_cols(ks, h * dh, dh);
                let vh = g.slice_cols(vs, h * dh, dh);
                let scores = g.matmul_bt(qh, kh);
                let scores = g.add(scores, mask);
                let probs = g.softmax_rows(scores);
                heads.push(g.matmul(probs, vh));
            }
            contexts.push(if heads.len() == 1 { heads[0] } else { g.concat_cols(&heads) });
        }
        let ctx = if contexts.len() == 1 { contexts[0] } else { g.concat_rows(&contexts) };
        let attn = self.linear(g, ctx, l.o);
        let attn = self.dropout(g, attn, rng);
        let x = g.add(x, attn);
        let x = self.norm(g, x, l.ln1);
        let h = self.linear(g, x, l.ff1);
        let h = g.gelu(h);
        let h = self.linear(g, h, l.ff2);
        let h = self.dropout(g, h, rng);
        let x2 = g.add(x, h);
        self.norm(g, x2, l.ln2)
    }

    /// Vocabulary logits `[T×V]`, with the output matrix tied to the token
    /// embedding (composed with the projection when factorized).
    pub fn mlm_logits(&self, g: &mut Graph, hidden: Var) -> Var {
        let h = self.linear(g, hidden, self.layout.mlm_dense);
        let h = g.gelu(h);
        let mut h = self.norm(g, h, self.layout.mlm_ln);
        if let Some(p) = self.layout.projection {
            let proj = g.param(&self.store, p);
            h = g.matmul_bt(h, proj);
        }
        let table = g.param(&self.store, self.layout.token);
        let logits = g.matmul_bt(h, table);
        let bias = g.param(&self.store, self.layout.mlm_bias);
        g.add_row(logits, bias)
    }

    /// Sequence representation `[1×E]`: the CLS hidden state, through the
    /// tanh pooler when the config has one.
    pub fn pooled(&self, g: &mut Graph, hidden: Var) -> Var {
        let cls = g.gather_rows(hidden, &[0]);
        match self.layout.pooler {
            Some(p) => {
                let y = self.linear(g, cls, p);
                g.tanh(y)
            }
            None => cls,
        }
    }

    /// Sequence classification logits `[1×C]`.
    pub fn cls_logits(&self, g: &mut Graph, head: Head, hidden: Var) -> Var {
        let pooled = self.pooled(g, hidden);
        self.linear(g, pooled, head.linear)
    }

    /// Per-position logits `[T×C]`.
    pub fn token_logits(&self, g: &mut Graph, head: Head, hidden: Var) -> Var {
        self.linear(g, hidden, head.linear)
    }

    /// Extends the model to `hybrid`, whose first `base.len()` tokens equal
    /// `base`. Each appended word's embedding row and output bias start at
    /// the mean over the base pieces the word used to split into.
    pub fn warm_start_hybrid(&self, base: &Vocabulary, hybrid: &Vocabulary) -> Result<Self> {
        if base.len() != self.config.vocab_size {
            return Err(Error::VocabularyMismatch(format!(
                "model has {} tokens, base vocabulary {}",
                self.config.vocab_size,
                base.len()
            )));
        }
        if hybrid.len() < base.len() || hybrid.tokens()[..base.len()] != *base.tokens() {
            return Err(Error::VocabularyMismatch(
                "hybrid vocabulary must extend the base vocabulary".into(),
            ));
        }
        let config = EncoderConfig {
            vocab_size: hybrid.len(),
            ..self.config.clone()
        };
        let mut out = Self::new(config, 0)?;
        let mut source = self.store.clone();
        let old_table = source.value(self.layout.token).clone();
        let old_bias = source.value(self.layout.mlm_bias).clone();
        let cols = old_table.cols();
        let mut table = old_table.data().to_vec();
        let mut bias = old_bias.data().to_vec();
        for id in base.len()..hybrid.len() {
            let word = hybrid.token(id).expect("id in range");
            let pieces: Vec<usize> = base.encode_word(word);
            let pieces: Vec<usize> = if pieces.is_empty() { vec![UNK] } else { pieces };
            let mut row = vec![0.0; cols];
            for &p in &pieces {
                row.iter_mut().zip(old_table.row(p)).for_each(|(r, v)| *r += v / pieces.len() as f64);
            }
            table.extend(row);
            bias.push(pieces.iter().map(|&p| old_bias.data()[p]).sum::<f64>() / pieces.len() as f64);
        }
        source.get_mut(self.layout.token).value = Tensor::matrix(hybrid.len(), cols, table)?;
        source.get_mut(self.layout.mlm_bias).value = Tensor::matrix(1, hybrid.len(), bias)?;
        out.load_matching(&source, true)?;
        Ok(out)
    }
}

/// `[T×T]` additive mask that hides PAD keys from every query.
fn key_mask(input: &EncodedInput) -> Tensor {
    let n = input.ids.len();
    let row: Vec<f64> = input
        .attention_mask
        .iter()
        .map(|&m| if m == 0 { MASK_VALUE } else { 0.0 })
        .collect();
    let mut data = Vec::with_capacity(n * n);
    for _ in 0..n {
        data.extend_from_slice(&row);
    }
    Tensor::from_parts(vec![n, n], data)
}

/// `[CLS] ids [SEP]` as a single-segment input.
pub fn wrap_single(ids: &[usize]) -> EncodedInput {
    let mut v = Vec::with_capacity(ids.len() + 2);
    v.push(CLS);
    v.extend_from_slice(ids);
    v.push(SEP);
    EncodedInput::single(v)
}
