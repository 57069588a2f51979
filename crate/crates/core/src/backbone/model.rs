//! Pre-norm Transformer encoder-decoder over packed (unpadded) sequences.
//!
//! The output projection is the token embedding itself: logits for token
//! `t` are `<h, E[t]>` with no extra bias or scaling.

use rand::Rng;

use super::config::{BackboneConfig, Token, PAD};
use crate::error::{contract, Result};
use crate::numerics::{dot, AttnSpan, Graph, ParameterSet, Tensor, Var};

pub const EMBED: &str = "embed";
pub const ADAPTER_PREFIX: &str = "adapter.";

/// Low-rank adapter settings; every linear layer gets `W + (alpha/r) A B`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub alpha: f64,
}

impl LowRankAdapter {
    pub fn scale(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// Packed encoder output: row block `spans[i]` belongs to query `i`.
pub struct EncoderOutput {
    pub memory: Var,
    pub spans: Vec<(usize, usize)>,
}

/// Precomputed cross-attention keys/values for one encoded query.
#[derive(Clone, Debug)]
pub struct DecodeContext {
    cross_kv: Vec<(Tensor, Tensor)>,
    memory_len: usize,
}

impl DecodeContext {
    pub fn memory_len(&self) -> usize {
        self.memory_len
    }
}

#[derive(Clone, Debug)]
pub struct GenIRModel {
    config: BackboneConfig,
    params: ParameterSet,
    adapter: Option<LowRankAdapter>,
}

fn linear_names(cfg: &BackboneConfig) -> Vec<(String, usize, usize)> {
    let d = cfg.d_model;
    let mut out = Vec::new();
    for i in 0..cfg.encoder_layers {
        for p in ["q", "k", "v", "o"] {
            out.push((format!("enc.{i}.attn.{p}"), d, d));
        }
        out.push((format!("enc.{i}.ffn.up"), d, cfg.d_ff));
        out.push((format!("enc.{i}.ffn.down"), cfg.d_ff, d));
    }
    for i in 0..cfg.decoder_layers {
        for block in ["self", "cross"] {
            for p in ["q", "k", "v", "o"] {
                out.push((format!("dec.{i}.{block}.{p}"), d, d));
            }
        }
        out.push((format!("dec.{i}.ffn.up"), d, cfg.d_ff));
        out.push((format!("dec.{i}.ffn.down"), cfg.d_ff, d));
    }
    out
}

fn norm_names(cfg: &BackboneConfig) -> Vec<String> {
    let mut out = Vec::new();
    for i in 0..cfg.encoder_layers {
        out.push(format!("enc.{i}.ln1"));
        out.push(format!("enc.{i}.ln2"));
    }
    out.push("enc.ln_f".to_string());
    for i in 0..cfg.decoder_layers {
        for n in 1..=3 {
            out.push(format!("dec.{i}.ln{n}"));
        }
    }
    out.push("dec.ln_f".to_string());
    out
}

/// Sinusoidal position table, `len x d`.
pub fn positional_encoding(len: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; len * d];
    for pos in 0..len {
        for i in (0..d).step_by(2) {
            let angle = pos as f64 / 10000f64.powf(i as f64 / d as f64);
            pe[pos * d + i] = angle.sin();
            if i + 1 < d {
                pe[pos * d + i + 1] = angle.cos();
            }
        }
    }
    pe
}

impl GenIRModel {
    pub fn new(config: BackboneConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut params = ParameterSet::new();
        params.insert(
            EMBED,
            Tensor::randn(&[config.vocab_size, d], 1.0 / (d as f64).sqrt(), rng),
        );
        for (name, din, dout) in linear_names(&config) {
            params.insert(
                format!("{name}.w"),
                Tensor::randn(&[din, dout], 1.0 / (din as f64).sqrt(), rng),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(&[1, dout]));
        }
        for name in norm_names(&config) {
            params.insert(
                format!("{name}.g"),
                Tensor::new(vec![1, d], vec![1.0; d]).expect("shape"),
            );
            params.insert(format!("{name}.b"), Tensor::zeros(&[1, d]));
        }
        Ok(Self {
            config,
            params,
            adapter: None,
        })
    }

    pub fn from_parts(config: BackboneConfig, params: ParameterSet) -> Result<Self> {
        config.validate()?;
        let model = Self {
            config,
            params,
            adapter: None,
        };
        model.check_params()?;
        Ok(model.with_detected_adapter())
    }

    fn with_detected_adapter(mut self) -> Self {
        let rank = self
            .params
            .iter()
            .find(|(n, _)| n.starts_with(ADAPTER_PREFIX) && n.ends_with(".a"))
            .map(|(_, p)| p.value().cols());
        let alpha = self
            .params
            .value(&format!("{ADAPTER_PREFIX}alpha"))
            .map(|t| t.item())
            .ok();
        if let (Some(rank), Some(alpha)) = (rank, alpha) {
            self.adapter = Some(LowRankAdapter { rank, alpha });
            self.params.freeze_all();
            self.params.set_frozen_prefix(ADAPTER_PREFIX, false);
            self.params.set_frozen_prefix(&format!("{ADAPTER_PREFIX}alpha"), true);
        }
        self
    }

    fn check_params(&self) -> Result<()> {
        let e = self.params.value(EMBED)?;
        if e.shape() != [self.config.vocab_size, self.config.d_model] {
            return Err(contract("embedding shape does not match config"));
        }
        for (name, din, dout) in linear_names(&self.config) {
            if self.params.value(&format!("{name}.w"))?.shape() != [din, dout] {
                return Err(contract(format!("`{name}.w` has wrong shape")));
            }
        }
        Ok(())
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn params(&self) -> &ParameterSet {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParameterSet {
        &mut self.params
    }

    pub fn embedding(&self) -> &Tensor {
        self.params.value(EMBED).expect("embedding always present")
    }

    pub fn adapter(&self) -> Option<LowRankAdapter> {
        self.adapter
    }

    /// Base parameters (everything except adapter weights).
    pub fn base_params(&self) -> ParameterSet {
        let mut out = ParameterSet::new();
        for (name, p) in self.params.iter() {
            if !name.starts_with(ADAPTER_PREFIX) {
                out.insert(name, p.value().clone());
            }
        }
        out
    }

    pub fn adapter_params(&self) -> ParameterSet {
        self.params.subset(ADAPTER_PREFIX)
    }

    /// Attach fresh low-rank adapters to every linear layer and freeze the
    /// base weights. `A` starts at zero, so the adapted model initially
    /// computes exactly what the base model computes.
    pub fn attach_adapter(&mut self, rank: usize, alpha: f64, rng: &mut impl Rng) -> Result<()> {
        if rank == 0 {
            return Err(contract("adapter rank must be >= 1"));
        }
        if self.adapter.is_some() {
            return Err(contract("adapter already attached"));
        }
        for (name, din, dout) in linear_names(&self.config) {
            self.params
                .insert(format!("{ADAPTER_PREFIX}{name}.a"), Tensor::zeros(&[din, rank]));
            self.params.insert(
                format!("{ADAPTER_PREFIX}{name}.b"),
                Tensor::randn(&[rank, dout], 1.0 / (rank as f64).sqrt(), rng),
            );
        }
        self.params
            .insert(format!("{ADAPTER_PREFIX}alpha"), Tensor::scalar(alpha));
        self.adapter = Some(LowRankAdapter { rank, alpha });
        self.params.freeze_all();
        self.params.set_frozen_prefix(ADAPTER_PREFIX, false);
        self.params.set_frozen(&format!("{ADAPTER_PREFIX}alpha"), true)?;
        Ok(())
    }

    /// Replace adapter weights (e.g. continue from the previous session).
    pub fn load_adapter(&mut self, adapter: &ParameterSet) -> Result<()> {
        for (name, p) in adapter.iter() {
            if !name.starts_with(ADAPTER_PREFIX) {
                return Err(contract(format!("`{name}` is not an adapter parameter")));
            }
            if !self.params.contains(name) {
                self.params.insert(name, p.value().clone());
            } else {
                *self.params.value_mut(name)? = p.value().clone();
            }
        }
        let rank = adapter
            .iter()
            .find(|(n, _)| n.ends_with(".a"))
            .map(|(_, p)| p.value().cols())
            .ok_or_else(|| contract("adapter set without A matrices"))?;
        let alpha = adapter.value(&format!("{ADAPTER_PREFIX}alpha"))?.item();
        self.adapter = Some(LowRankAdapter { rank, alpha });
        self.params.freeze_all();
        self.params.set_frozen_prefix(ADAPTER_PREFIX, false);
        self.params.set_frozen(&format!("{ADAPTER_PREFIX}alpha"), true)?;
        Ok(())
    }

    /// Number of trainable adapter scalars: sum over linear layers of `(in + out) * r`.
    pub fn adapter_param_count(&self) -> usize {
        self.adapter.map_or(0, |a| {
            linear_names(&self.config)
                .iter()
                .map(|(_, din, dout)| (din + dout) * a.rank)
                .sum()
        })
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let w = g.param(&self.params, &format!("{name}.w"))?;
        let b = g.param(&self.params, &format!("{name}.b"))?;
        let xw = g.matmul(x, w)?;
        let mut y = g.add_row(xw, b)?;
        if let Some(adapter) = self.adapter {
            let a = g.param(&self.params, &format!("{ADAPTER_PREFIX}{name}.a"))?;
            let bm = g.param(&self.params, &format!("{ADAPTER_PREFIX}{name}.b"))?;
            let xa = g.matmul(x, a)?;
            let xab = g.matmul(xa, bm)?;
            let delta = g.scale(xab, adapter.scale())?;
            y = g.add(y, delta)?;
        }
        Ok(y)
    }

    fn norm(&self, g: &mut Graph, x: Var, name: &str) -> Result<Var> {
        let gain = g.param(&self.params, &format!("{name}.g"))?;
        let bias = g.param(&self.params, &format!("{name}.b"))?;
        g.layer_norm(x, gain, bias)
    }

    fn ffn(&self, g: &mut Graph, x: Var, prefix: &str) -> Result<Var> {
        let up = self.linear(g, x, &format!("{prefix}.ffn.up"))?;
        let act = g.relu(up)?;
        self.linear(g, act, &format!("{prefix}.ffn.down"))
    }

    fn embed_tokens(&self, g: &mut Graph, seqs: &[&[Token]]) -> Result<Var> {
        let d = self.config.d_model;
        let ids: Vec<usize> = seqs.iter().flat_map(|s| s.iter().map(|&t| t as usize)).collect();
        let table = g.param(&self.params, EMBED)?;
        let emb = g.embedding(table, &ids)?;
        let emb = g.scale(emb, (d as f64).sqrt())?;
        let max_len = seqs.iter().map(|s| s.len()).max().unwrap_or(0);
        let table_pe = positional_encoding(max_len, d);
        let mut pe = Vec::with_capacity(ids.len() * d);
        for s in seqs {
            pe.extend_from_slice(&table_pe[..s.len() * d]);
        }
        let pe = g.constant(Tensor::matrix(ids.len(), d, pe)?);
        g.add(emb, pe)
    }

    fn strip_padding(query: &[Token]) -> &[Token] {
        let end = query.iter().rposition(|&t| t != PAD).map_or(0, |i| i + 1);
        &query[..end]
    }

    fn check_tokens(&self, seq: &[Token]) -> Result<()> {
        if let Some(&bad) = seq.iter().find(|&&t| t as usize >= self.config.vocab_size) {
            return Err(contract(format!(
                "token {bad} outside vocabulary of {}",
                self.config.vocab_size
            )));
        }
        Ok(())
    }

    /// Encode a batch of queries. Trailing PAD tokens are dropped.
    pub fn encode(&self, g: &mut Graph, queries: &[&[Token]]) -> Result<EncoderOutput> {
        let mut seqs = Vec::with_capacity(queries.len());
        let mut spans = Vec::with_capacity(queries.len());
        let mut start = 0;
        for q in queries {
            let q = Self::strip_padding(q);
            if q.is_empty() {
                return Err(contract("empty query"));
            }
            if q.len() > self.config.max_query_len {
                return Err(contract(format!(
                    "query of {} tokens exceeds max {}",
                    q.len(),
                    self.config.max_query_len
                )));
            }
            self.check_tokens(q)?;
            spans.push((start, q.len()));
            start += q.len();
            seqs.push(q);
        }
        let attn_spans: Vec<AttnSpan> = spans
            .iter()
            .map(|&(s, l)| AttnSpan {
                q_start: s,
                q_len: l,
                k_start: s,
                k_len: l,
                causal: false,
            })
            .collect();
        let mut x = self.embed_tokens(g, &seqs)?;
        for i in 0..self.config.encoder_layers {
            let h = self.norm(g, x, &format!("enc.{i}.ln1"))?;
            let q = self.linear(g, h, &format!("enc.{i}.attn.q"))?;
            let k = self.linear(g, h, &format!("enc.{i}.attn.k"))?;
            let v = self.linear(g, h, &format!("enc.{i}.attn.v"))?;
            let a = g.attention(q, k, v, &attn_spans, self.config.heads)?;
            let o = self.linear(g, a, &format!("enc.{i}.attn.o"))?;
            x = g.add(x, o)?;
            let h = self.norm(g, x, &format!("enc.{i}.ln2"))?;
            let f = self.ffn(g, h, &format!("enc.{i}"))?;
            x = g.add(x, f)?;
        }
        let memory = self.norm(g, x, "enc.ln_f")?;
        Ok(EncoderOutput { memory, spans })
    }

    /// Cross-attention keys and values of every decoder layer.
    pub fn cross_kv(&self, g: &mut Graph, memory: Var) -> Result<Vec<(Var, Var)>> {
        (0..self.config.decoder_layers)
            .map(|i| {
                let k = self.linear(g, memory, &format!("dec.{i}.cross.k"))?;
                let v = self.linear(g, memory, &format!("dec.{i}.cross.v"))?;
                Ok((k, v))
            })
            .collect()
    }

    /// Run the decoder over `inputs` (each starting with the PAD start
    /// symbol); input `j` attends to memory block `memory_spans[j]`.
    /// Returns final hidden states for every input position, packed.
    pub fn decode(
        &self,
        g: &mut Graph,
        cross: &[(Var, Var)],
        memory_spans: &[(usize, usize)],
        inputs: &[&[Token]],
    ) -> Result<Var> {
        if memory_spans.len() != inputs.len() {
            return Err(contract("one memory span per decoder input"));
        }
        let mut self_spans = Vec::with_capacity(inputs.len());
        let mut cross_spans = Vec::with_capacity(inputs.len());
        let mut start = 0;
        for (inp, &(ms, ml)) in inputs.iter().zip(memory_spans) {
            if inp.is_empty() {
                return Err(contract("empty decoder input"));
            }
            if inp.len() > self.config.max_docid_len + 1 {
                return Err(contract(format!(
                    "decoder prefix of {} exceeds max docid length {}",
                    inp.len() - 1,
                    self.config.max_docid_len
                )));
            }
            self.check_tokens(inp)?;
            self_spans.push(AttnSpan {
                q_start: start,
                q_len: inp.len(),
                k_start: start,
                k_len: inp.len(),
                causal: true,
            });
            cross_spans.push(AttnSpan {
                q_start: start,
                q_len: inp.len(),
                k_start: ms,
                k_len: ml,
                causal: false,
            });
            start += inp.len();
        }
        let mut x = self.embed_tokens(g, inputs)?;
        for i in 0..self.config.decoder_layers {
            let h = self.norm(g, x, &format!("dec.{i}.ln1"))?;
            let q = self.linear(g, h, &format!("dec.{i}.self.q"))?;
            let k = self.linear(g, h, &format!("dec.{i}.self.k"))?;
            let v = self.linear(g, h, &format!("dec.{i}.self.v"))?;
            let a = g.attention(q, k, v, &self_spans, self.config.heads)?;
            let o = self.linear(g, a, &format!("dec.{i}.self.o"))?;
            x = g.add(x, o)?;

            let h = self.norm(g, x, &format!("dec.{i}.ln2"))?;
            let q = self.linear(g, h, &format!("dec.{i}.cross.q"))?;
            let (ck, cv) = cross[i];
            let a = g.attention(q, ck, cv, &cross_spans, self.config.heads)?;
            let o = self.linear(g, a, &format!("dec.{i}.cross.o"))?;
            x = g.add(x, o)?;

            let h = self.norm(g, x, &format!("dec.{i}.ln3"))?;
            let f = self.ffn(g, h, &format!("dec.{i}"))?;
            x = g.add(x, f)?;
        }
        self.norm(g, x, "dec.ln_f")
    }

    /// Logits over the whole vocabulary: `hidden @ E^T`.
    pub fn logits(&self, g: &mut Graph, hidden: Var) -> Result<Var> {
        let e = g.param(&self.params, EMBED)?;
        g.matmul_t(hidden, e)
    }

    /// Encode one query for repeated decoding (inference only).
    pub fn prepare(&self, query: &[Token]) -> Result<DecodeContext> {
        let mut g = Graph::no_grad();
        let enc = self.encode(&mut g, &[query])?;
        let kv = self.cross_kv(&mut g, enc.memory)?;
        let cross_kv = kv
            .into_iter()
            .map(|(k, v)| (g.value(k).clone(), g.value(v).clone()))
            .collect();
        Ok(DecodeContext {
            cross_kv,
            memory_len: enc.spans[0].1,
        })
    }

    /// Encoder memory for one query (`len x d`).
    pub fn encode_query(&self, query: &[Token]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let enc = self.encode(&mut g, &[query])?;
        Ok(g.value(enc.memory).clone())
    }

    /// Final decoder hidden state after each docid prefix (inference only).
    pub fn hidden_for_prefixes(&self, ctx: &DecodeContext, prefixes: &[Vec<Token>]) -> Result<Tensor> {
        let mut g = Graph::no_grad();
        let cross: Vec<(Var, Var)> = ctx
            .cross_kv
            .iter()
            .map(|(k, v)| (g.constant(k.clone()), g.constant(v.clone())))
            .collect();
        let inputs: Vec<Vec<Token>> = prefixes
            .iter()
            .map(|p| {
                let mut v = Vec::with_capacity(p.len() + 1);
                v.push(PAD);
                v.extend_from_slice(p);
                v
            })
            .collect();
        let refs: Vec<&[Token]> = inputs.iter().map(Vec::as_slice).collect();
        let spans = vec![(0, ctx.memory_len); refs.len()];
        let hidden = self.decode(&mut g, &cross, &spans, &refs)?;
        let d = self.config.d_model;
        let all = g.value(hidden);
        let mut out = Vec::with_capacity(prefixes.len() * d);
        let mut row = 0;
        for inp in &inputs {
            row += inp.len();
            out.extend_from_slice(all.row(row - 1));
        }
        Tensor::matrix(prefixes.len(), d, out)
    }

    /// One decoding step: final hidden state `h_k` and full logits `h_k E^T`.
    pub fn decode_step(&self, prefix: &[Token], ctx: &DecodeContext) -> Result<(Vec<f64>, Vec<f64>)> {
        let h = self.hidden_for_prefixes(ctx, &[prefix.to_vec()])?;
        let h = h.row(0).to_vec();
        let logits = self.token_logits(&h, None);
        Ok((h, logits))
    }

    /// `<h, E[t]>` for the given tokens (all tokens when `None`).
    pub fn token_logits(&self, hidden: &[f64], tokens: Option<&[Token]>) -> Vec<f64> {
        let e = self.embedding();
        match tokens {
            Some(ts) => ts.iter().map(|&t| dot(hidden, e.row(t as usize))).collect(),
            None => (0..e.rows()).map(|t| dot(hidden, e.row(t))).collect(),
        }
    }
}
