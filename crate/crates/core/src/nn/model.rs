//! Pre-LN Transformer encoder-decoder with soft-prompt injection.
//!
//! Token embeddings are tied with the output projection. Encoder inputs are
//! built by [`Seq2Seq::embed_input`]: text positions look up token
//! embeddings, slot positions take the rows of their prompt group.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Mat, Var};
use crate::compose::{ComposedInput, Segment};
use crate::error::{Error, Result};
use crate::prompts::{GroupId, PromptTable};
use crate::tokenizer::{BOS, EOS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    ToyTransformer,
    /// Placeholder for adapting a pre-trained seq2seq model; only the toy
    /// backbone ships with this crate.
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab_size: usize,
    pub embed_dim: usize,
    /// Layers in the encoder and, separately, in the decoder.
    pub num_layers: usize,
    pub num_heads: usize,
    pub ff_dim: usize,
    /// Longest encoder input; decoder sequences are bounded by the same value.
    pub max_len: usize,
    pub backbone: Backbone,
}

impl ModelConfig {
    pub fn toy(vocab_size: usize) -> Self {
        Self {
            vocab_size,
            embed_dim: 64,
            num_layers: 2,
            num_heads: 4,
            ff_dim: 128,
            max_len: 256,
            backbone: Backbone::ToyTransformer,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.vocab_size,
            self.embed_dim,
            self.num_layers,
            self.num_heads,
            self.ff_dim,
            self.max_len,
        ];
        if fields.contains(&0) {
            return Err(Error::InvalidConfig("model sizes must be positive".into()));
        }
        if !self.embed_dim.is_multiple_of(self.num_heads) {
            return Err(Error::InvalidConfig("embed_dim must divide by num_heads".into()));
        }
        if self.backbone == Backbone::External {
            return Err(Error::InvalidConfig(
                "external backbones need an adapter; only toy_transformer is built in".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct Attn {
    wq: usize,
    wk: usize,
    wv: usize,
    wo: usize,
}

#[derive(Debug, Clone, Copy)]
struct Norm {
    gamma: usize,
    beta: usize,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone)]
struct EncoderLayer {
    ln_attn: Norm,
    attn: Attn,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct DecoderLayer {
    ln_self: Norm,
    self_attn: Attn,
    ln_cross: Norm,
    cross_attn: Attn,
    ln_ff: Norm,
    ff: FeedForward,
}

#[derive(Debug, Clone)]
struct Layout {
    tok_emb: usize,
    enc_pos: usize,
    dec_pos: usize,
    encoder: Vec<EncoderLayer>,
    enc_norm: Norm,
    decoder: Vec<DecoderLayer>,
    dec_norm: Norm,
}

/// Builds the parameter list and remembers where each tensor lives.
struct Builder {
    names: Vec<String>,
    shapes: Vec<(usize, usize)>,
}

impl Builder {
    fn add(&mut self, name: String, shape: (usize, usize)) -> usize {
        self.names.push(name);
        self.shapes.push(shape);
        self.names.len() - 1
    }

    fn norm(&mut self, prefix: &str, d: usize) -> Norm {
        Norm {
            gamma: self.add(format!("{prefix}.gamma"), (1, d)),
            beta: self.add(format!("{prefix}.beta"), (1, d)),
        }
    }

    fn attn(&mut self, prefix: &str, d: usize) -> Attn {
        Attn {
            wq: self.add(format!("{prefix}.wq"), (d, d)),
            wk: self.add(format!("{prefix}.wk"), (d, d)),
            wv: self.add(format!("{prefix}.wv"), (d, d)),
            wo: self.add(format!("{prefix}.wo"), (d, d)),
        }
    }

    fn ff(&mut self, prefix: &str, d: usize, f: usize) -> FeedForward {
        FeedForward {
            w1: self.add(format!("{prefix}.w1"), (d, f)),
            b1: self.add(format!("{prefix}.b1"), (1, f)),
            w2: self.add(format!("{prefix}.w2"), (f, d)),
            b2: self.add(format!("{prefix}.b2"), (1, d)),
        }
    }
}

fn build_layout(cfg: &ModelConfig) -> (Layout, Vec<String>, Vec<(usize, usize)>) {
    let d = cfg.embed_dim;
    let mut b = Builder {
        names: Vec::new(),
        shapes: Vec::new(),
    };
    let tok_emb = b.add("tok_emb".into(), (cfg.vocab_size, d));
    let enc_pos = b.add("enc_pos".into(), (cfg.max_len, d));
    let dec_pos = b.add("dec_pos".into(), (cfg.max_len, d));
    let encoder = (0..cfg.num_layers)
        .map(|l| EncoderLayer {
            ln_attn: b.norm(&format!("enc{l}.ln_attn"), d),
            attn: b.attn(&format!("enc{l}.attn"), d),
            ln_ff: b.norm(&format!("enc{l}.ln_ff"), d),
            ff: b.ff(&format!("enc{l}.ff"), d, cfg.ff_dim),
        })
        .collect();
    let enc_norm = b.norm("enc.ln_out", d);
    let decoder = (0..cfg.num_layers)
        .map(|l| DecoderLayer {
            ln_self: b.norm(&format!("dec{l}.ln_self"), d),
            self_attn: b.attn(&format!("dec{l}.self_attn"), d),
            ln_cross: b.norm(&format!("dec{l}.ln_cross"), d),
            cross_attn: b.attn(&format!("dec{l}.cross_attn"), d),
            ln_ff: b.norm(&format!("dec{l}.ln_ff"), d),
            ff: b.ff(&format!("dec{l}.ff"), d, cfg.ff_dim),
        })
        .collect();
    let dec_norm = b.norm("dec.ln_out", d);
    (
        Layout {
            tok_emb,
            enc_pos,
            dec_pos,
            encoder,
            enc_norm,
            decoder,
            dec_norm,
        },
        b.names,
        b.shapes,
    )
}

/// Parameter tensors of the backbone, in a fixed order.
#[derive(Debug, Clone)]
pub struct Seq2Seq {
    config: ModelConfig,
    layout: Layout,
    names: Vec<String>,
    pub params: Vec<Mat>,
}

impl PartialEq for Seq2Seq {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.params == other.params
    }
}

/// Graph leaves for one forward pass.
pub struct Bound {
    params: Vec<Var>,
    prompts: HashMap<GroupId, Var>,
}

impl Bound {
    pub fn param_vars(&self) -> &[Var] {
        &self.params
    }

    pub fn prompt_vars(&self) -> impl Iterator<Item = (&GroupId, Var)> {
        self.prompts.iter().map(|(k, &v)| (k, v))
    }
}

impl Seq2Seq {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let (layout, names, shapes) = build_layout(&config);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.embed_dim as f64;
        let residual_scale = (2.0 * config.num_layers as f64).sqrt();
        let params = names
            .iter()
            .zip(&shapes)
            .map(|(name, &(r, c))| {
                let std = if name.ends_with(".gamma") {
                    return Mat::ones((r, c));
                } else if name.ends_with(".beta") || name.ends_with(".b1") || name.ends_with(".b2") {
                    return Mat::zeros((r, c));
                } else if name == "tok_emb" {
                    1.0 / d.sqrt()
                } else if name.ends_with("_pos") {
                    0.02
                } else if name.ends_with(".wo") || name.ends_with(".w2") {
                    1.0 / (r as f64).sqrt() / residual_scale
                } else {
                    1.0 / (r as f64).sqrt()
                };
                let normal = Normal::new(0.0, std).expect("positive std");
                Mat::from_shape_simple_fn((r, c), || normal.sample(&mut rng))
            })
            .collect();
        Ok(Self {
            config,
            layout,
            names,
            params,
        })
    }

    /// Rebuilds a model from stored tensors, checking every shape.
    pub fn from_params(config: ModelConfig, params: Vec<Mat>) -> Result<Self> {
        config.validate()?;
        let (layout, names, shapes) = build_layout(&config);
        if params.len() != shapes.len() {
            return Err(Error::DimMismatch(format!(
                "expected {} tensors, found {}",
                shapes.len(),
                params.len()
            )));
        }
        for ((p, &shape), name) in params.iter().zip(&shapes).zip(&names) {
            if p.dim() != shape {
                return Err(Error::DimMismatch(format!(
                    "{name}: expected {shape:?}, found {:?}",
                    p.dim()
                )));
            }
        }
        Ok(Self {
            config,
            layout,
            names,
            params,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_shapes(config: &ModelConfig) -> Vec<(String, (usize, usize))> {
        let (_, names, shapes) = build_layout(config);
        names.into_iter().zip(shapes).collect()
    }

    pub fn num_parameters(&self) -> usize {
        self.params.iter().map(Mat::len).sum()
    }

    /// Adds every backbone tensor and every prompt group used by `inputs` as
    /// leaves of `g`.
    pub fn bind<'a>(
        &'a self,
        g: &mut Graph<'a>,
        table: &'a PromptTable,
        inputs: &[&ComposedInput],
    ) -> Result<Bound> {
        let params = self.params.iter().map(|p| g.param(p)).collect();
        let mut prompts = HashMap::new();
        for input in inputs {
            for seg in &input.segments {
                if let Segment::Slot { group, length } = seg {
                    if prompts.contains_key(group) {
                        continue;
                    }
                    let pg = table
                        .get(group)
                        .ok_or_else(|| Error::UnknownGroup(group.clone()))?;
                    if pg.dim() != self.config.embed_dim {
                        return Err(Error::DimMismatch(format!(
                            "prompt group {group} has dim {} but the model uses {}",
                            pg.dim(),
                            self.config.embed_dim
                        )));
                    }
                    if pg.length() != *length {
                        return Err(Error::DimMismatch(format!(
                            "slot {group} expects {length} vectors, group has {}",
                            pg.length()
                        )));
                    }
                    prompts.insert(group.clone(), g.param(&pg.values));
                }
            }
        }
        Ok(Bound { params, prompts })
    }

    /// Input embedding matrix (`total_len × embed_dim`) without positions.
    pub fn embed_input(&self, g: &mut Graph<'_>, bound: &Bound, input: &ComposedInput) -> Result<Var> {
        let tok = bound.params[self.layout.tok_emb];
        let mut parts = Vec::with_capacity(input.segments.len());
        for seg in &input.segments {
            match seg {
                Segment::Slot { group, .. } => parts.push(
                    *bound
                        .prompts
                        .get(group)
                        .ok_or_else(|| Error::UnknownGroup(group.clone()))?,
                ),
                Segment::Text { ids } if ids.is_empty() => {}
                Segment::Text { ids } => {
                    let rows = self.token_rows(ids)?;
                    parts.push(g.gather_rows(tok, &rows));
                }
            }
        }
        if parts.is_empty() {
            return Err(Error::DimMismatch("empty encoder input".into()));
        }
        Ok(g.concat_rows(&parts))
    }

    fn token_rows(&self, ids: &[u32]) -> Result<Vec<usize>> {
        ids.iter()
            .map(|&id| {
                let i = id as usize;
                if i < self.config.vocab_size {
                    Ok(i)
                } else {
                    Err(Error::DimMismatch(format!(
                        "token id {id} outside vocabulary of {}",
                        self.config.vocab_size
                    )))
                }
            })
            .collect()
    }

    fn positions(&self, g: &mut Graph<'_>, table: Var, n: usize) -> Result<Var> {
        if n > self.config.max_len {
            return Err(Error::DimMismatch(format!(
                "sequence of {n} positions exceeds max_len {}",
                self.config.max_len
            )));
        }
        let rows: Vec<usize> = (0..n).collect();
        Ok(g.gather_rows(table, &rows))
    }

    fn norm(g: &mut Graph<'_>, p: &[Var], n: Norm, x: Var) -> Var {
        g.layer_norm(x, p[n.gamma], p[n.beta])
    }

    fn attention(&self, g: &mut Graph<'_>, p: &[Var], a: Attn, q_in: Var, kv_in: Var, mask: Option<&Mat>) -> Var {
        let heads = self.config.num_heads;
        let dh = self.config.embed_dim / heads;
        let q = g.matmul(q_in, p[a.wq]);
        let k = g.matmul(kv_in, p[a.wk]);
        let v = g.matmul(kv_in, p[a.wv]);
        let scale = 1.0 / (dh as f64).sqrt();
        let outs: Vec<Var> = (0..heads)
            .map(|h| {
                let qh = g.slice_cols(q, h * dh, dh);
                let kh = g.slice_cols(k, h * dh, dh);
                let vh = g.slice_cols(v, h * dh, dh);
                let scores = g.matmul_t(qh, kh);
                let mut scores = g.scale(scores, scale);
                if let Some(m) = mask {
                    scores = g.add_const(scores, m);
                }
                let probs = g.softmax_rows(scores);
                g.matmul(probs, vh)
            })
            .collect();
        let cat = if heads == 1 { outs[0] } else { g.concat_cols(&outs) };
        g.matmul(cat, p[a.wo])
    }

    fn feed_forward(g: &mut Graph<'_>, p: &[Var], f: FeedForward, x: Var) -> Var {
        let h = g.matmul(x, p[f.w1]);
        let h = g.add_row(h, p[f.b1]);
        let h = g.gelu(h);
        let o = g.matmul(h, p[f.w2]);
        g.add_row(o, p[f.b2])
    }

    /// Encoder states for one composed input.
    pub fn encode(&self, g: &mut Graph<'_>, bound: &Bound, input: &ComposedInput) -> Result<Var> {
        let p = &bound.params;
        let emb = self.embed_input(g, bound, input)?;
        let n = g.value(emb).nrows();
        let pos = self.positions(g, p[self.layout.enc_pos], n)?;
        let mut x = g.add(emb, pos);
        for layer in &self.layout.encoder {
            let h = Self::norm(g, p, layer.ln_attn, x);
            let a = self.attention(g, p, layer.attn, h, h, None);
            x = g.add(x, a);
            let h = Self::norm(g, p, layer.ln_ff, x);
            let f = Self::feed_forward(g, p, layer.ff, h);
            x = g.add(x, f);
        }
        Ok(Self::norm(g, p, self.layout.enc_norm, x))
    }

    /// Next-token logits (`len(dec_in) × vocab`) under teacher forcing.
    pub fn decode(&self, g: &mut Graph<'_>, bound: &Bound, memory: Var, dec_in: &[u32]) -> Result<Var> {
        let p = &bound.params;
        let m = dec_in.len();
        let rows = self.token_rows(dec_in)?;
        let tok = g.gather_rows(p[self.layout.tok_emb], &rows);
        let pos = self.positions(g, p[self.layout.dec_pos], m)?;
        let mut x = g.add(tok, pos);
        let causal = Mat::from_shape_fn((m, m), |(i, j)| if j > i { -1e9 } else { 0.0 });
        for layer in &self.layout.decoder {
            let h = Self::norm(g, p, layer.ln_self, x);
            let a = self.attention(g, p, layer.self_attn, h, h, Some(&causal));
            x = g.add(x, a);
            let h = Self::norm(g, p, layer.ln_cross, x);
            let c = self.attention(g, p, layer.cross_attn, h, memory, None);
            x = g.add(x, c);
            let h = Self::norm(g, p, layer.ln_ff, x);
            let f = Self::feed_forward(g, p, layer.ff, h);
            x = g.add(x, f);
        }
        let h = Self::norm(g, p, self.layout.dec_norm, x);
        Ok(g.matmul_t(h, p[self.layout.tok_emb]))
    }

    /// Summed teacher-forced cross-entropy of `target` (an EOS is appended).
    /// Returns the `1 × 1` loss node.
    pub fn loss(&self, g: &mut Graph<'_>, bound: &Bound, input: &ComposedInput, target: &[u32]) -> Result<Var> {
        let memory = self.encode(g, bound, input)?;
        let (dec_in, labels) = teacher_forcing(target);
        let logits = self.decode(g, bound, memory, &dec_in)?;
        Ok(g.cross_entropy(logits, &labels))
    }

    /// Log-likelihood of each candidate target given the same input, sharing
    /// one encoder pass.
    pub fn score_targets(&self, table: &PromptTable, input: &ComposedInput, targets: &[Vec<u32>]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, table, &[input])?;
        let memory = self.encode(&mut g, &bound, input)?;
        targets
            .iter()
            .map(|t| {
                let (dec_in, labels) = teacher_forcing(t);
                let logits = self.decode(&mut g, &bound, memory, &dec_in)?;
                let nll = g.cross_entropy(logits, &labels);
                Ok(-g.value(nll)[[0, 0]])
            })
            .collect()
    }

    /// Greedy decoding until EOS or `max_new` tokens.
    pub fn generate(&self, table: &PromptTable, input: &ComposedInput, max_new: usize) -> Result<Vec<u32>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, table, &[input])?;
        let memory = self.encode(&mut g, &bound, input)?;
        let mut seq = vec![BOS];
        let limit = max_new.min(self.config.max_len.saturating_sub(1));
        for _ in 0..limit {
            let logits = self.decode(&mut g, &bound, memory, &seq)?;
            let last = g.value(logits).row(seq.len() - 1).to_owned();
            let (best, _) = last
                .iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |acc, (i, &v)| if v > acc.1 { (i, v) } else { acc });
            if best as u32 == EOS {
                break;
            }
            seq.push(best as u32);
        }
        Ok(seq[1..].to_vec())
    }
}

/// Decoder inputs (`BOS` + target) and labels (target + `EOS`).
pub fn teacher_forcing(target: &[u32]) -> (Vec<u32>, Vec<usize>) {
    let mut dec_in = Vec::with_capacity(target.len() + 1);
    dec_in.push(BOS);
    dec_in.extend_from_slice(target);
    let labels = target
        .iter()
        .chain(std::iter::once(&EOS))
        .map(|&t| t as usize)
        .collect();
    (dec_in, labels)
}
