//! Transformer encoder over serialized text, table, and joint inputs.
//!
//! Embeddings are the sum of a token table, an absolute position table, and
//! one table per structural channel. Layers are pre-layernorm self-attention
//! and GELU feed-forward blocks with residual connections, followed by a final
//! layernorm. The masked-token head reuses the token table as its output
//! projection.

mod serialize;

pub use serialize::{
    compute_ranks, joint_length, serialize, serialize_pair, CellSpan, Channel, Modality,
    SerializedInput, N_CHANNELS,
};

use alloc::format;
use alloc::string::ToString;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rng::{self, purpose, Rng};
use crate::tensor::{Graph, Tensor, Var};

/// Additive attention bias on padded keys.
pub const MASKED_SCORE: f64 = -1e9;
/// Standard deviation of the truncated-normal weight init.
pub const INIT_STD: f64 = 0.02;

/// Number of ids each structural channel can take.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChannelCardinalities {
    pub segment: usize,
    pub column: usize,
    pub row: usize,
    pub rank: usize,
    pub inv_rank: usize,
    pub cell_index: usize,
    pub format: usize,
}

impl Default for ChannelCardinalities {
    fn default() -> Self {
        Self {
            segment: 2,
            column: 16,
            row: 32,
            rank: 32,
            inv_rank: 32,
            cell_index: 16,
            format: 3,
        }
    }
}

impl ChannelCardinalities {
    pub fn get(&self, c: Channel) -> usize {
        match c {
            Channel::Segment => self.segment,
            Channel::Column => self.column,
            Channel::Row => self.row,
            Channel::Rank => self.rank,
            Channel::InvRank => self.inv_rank,
            Channel::CellIndex => self.cell_index,
            Channel::Format => self.format,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_model: usize,
    /// Sequence length every input is packed to.
    pub max_len: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub cardinalities: ChannelCardinalities,
    pub dropout: f64,
    pub layer_norm_eps: f64,
    pub seed: u64,
}

impl ModelConfig {
    /// Two layers, d = 16: the gradient-check scale.
    pub fn tiny(vocab_size: usize) -> Self {
        Self {
            d_model: 16,
            max_len: 32,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            vocab_size,
            cardinalities: ChannelCardinalities::default(),
            dropout: 0.0,
            layer_norm_eps: 1e-5,
            seed: 0,
        }
    }

    /// Two layers, d = 32: the desk-scale training configuration.
    pub fn desk(vocab_size: usize) -> Self {
        Self {
            d_model: 32,
            max_len: 48,
            n_layers: 2,
            n_heads: 4,
            d_ff: 64,
            ..Self::tiny(vocab_size)
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |name, reason: &str| {
            Err(Error::InvalidConfig {
                name,
                reason: reason.to_string(),
            })
        };
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return bad("d_model", "must be positive and divisible by n_heads");
        }
        if self.max_len < 4 {
            return bad("max_len", "must be at least 4");
        }
        if self.n_layers == 0 || self.d_ff == 0 {
            return bad("n_layers", "layer count and d_ff must be positive");
        }
        if self.vocab_size < crate::tokenize::N_SPECIAL {
            return bad("vocab_size", "must cover the reserved tokens");
        }
        if Channel::ALL.iter().any(|&c| self.cardinalities.get(c) == 0)
            || self.cardinalities.segment < 2
            || self.cardinalities.format < 3
            || self.cardinalities.column < 2
            || self.cardinalities.row < 2
        {
            return bad("cardinalities", "too small for the channel values in use");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout", "must be in [0, 1)");
        }
        if !(self.layer_norm_eps >= 0.0) {
            return bad("layer_norm_eps", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerLayout {
    ln1: (usize, usize),
    wq: (usize, usize),
    wk: (usize, usize),
    wv: (usize, usize),
    wo: (usize, usize),
    ln2: (usize, usize),
    ff1: (usize, usize),
    ff2: (usize, usize),
}

#[derive(Debug, Clone, PartialEq)]
struct Layout {
    token: usize,
    position: usize,
    channels: [usize; N_CHANNELS],
    layers: Vec<LayerLayout>,
    final_ln: (usize, usize),
    mlm_bias: usize,
}

/// Parameters of one encoder plus its configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    config: ModelConfig,
    params: ParamStore,
    layout: Layout,
}

/// Graph handles of an encoder's parameters.
#[derive(Debug, Clone)]
pub struct Bound {
    pub vars: Vec<Var>,
}

fn build(cfg: &ModelConfig, rng: Option<&mut Rng>) -> (ParamStore, Layout) {
    let mut rng = rng;
    let mut store = ParamStore::new();
    let d = cfg.d_model;
    let mut weight = |store: &mut ParamStore, name: &str, shape: &[usize]| {
        let mut t = Tensor::zeros(shape);
        if let Some(r) = rng.as_deref_mut() {
            for v in t.data_mut() {
                *v = rng::truncated_normal(r, INIT_STD);
            }
        }
        store.push(name, t, true)
    };
    let token = weight(&mut store, "embeddings.token", &[cfg.vocab_size, d]);
    let position = weight(&mut store, "embeddings.position", &[cfg.max_len, d]);
    let mut channels = [0; N_CHANNELS];
    for c in Channel::ALL {
        channels[c.index()] = weight(
            &mut store,
            &format!("embeddings.{}", c.name()),
            &[cfg.cardinalities.get(c), d],
        );
    }
    let norm = |store: &mut ParamStore, name: &str| {
        let g = store.push(format!("{name}.gain"), Tensor::filled(&[d], 1.0), false);
        let b = store.push(format!("{name}.bias"), Tensor::zeros(&[d]), false);
        (g, b)
    };
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = format!("layers.{i}");
        let ln1 = norm(&mut store, &format!("{p}.ln1"));
        let mut linear = |store: &mut ParamStore, name: &str, din: usize, dout: usize| {
            let w = weight(store, &format!("{p}.{name}.weight"), &[din, dout]);
            let b = store.push(format!("{p}.{name}.bias"), Tensor::zeros(&[dout]), false);
            (w, b)
        };
        let wq = linear(&mut store, "attn.query", d, d);
        let wk = linear(&mut store, "attn.key", d, d);
        let wv = linear(&mut store, "attn.value", d, d);
        let wo = linear(&mut store, "attn.output", d, d);
        let ff1 = linear(&mut store, "ffn.in", d, cfg.d_ff);
        let ff2 = linear(&mut store, "ffn.out", cfg.d_ff, d);
        let ln2 = norm(&mut store, &format!("{p}.ln2"));
        layers.push(LayerLayout {
            ln1,
            wq,
            wk,
            wv,
            wo,
            ln2,
            ff1,
            ff2,
        });
    }
    let final_ln = norm(&mut store, "final_ln");
    let mlm_bias = store.push("mlm.bias", Tensor::zeros(&[cfg.vocab_size]), false);
    let layout = Layout {
        token,
        position,
        channels,
        layers,
        final_ln,
        mlm_bias,
    };
    (store, layout)
}

impl Encoder {
    /// Fresh parameters drawn from the config seed.
    pub fn init(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut r = rng::stream(config.seed, purpose::INIT, 0);
        let (params, layout) = build(&config, Some(&mut r));
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    /// Wraps loaded parameters after checking names and shapes.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let (expected, layout) = build(&config, None);
        if expected.len() != params.len() {
            return Err(Error::ParamLayout(format!(
                "expected {} tensors, got {}",
                expected.len(),
                params.len()
            )));
        }
        for (e, p) in expected.params().iter().zip(params.params()) {
            if e.name != p.name || e.tensor.shape() != p.tensor.shape() {
                return Err(Error::ParamLayout(e.name.clone()));
            }
        }
        let mut params = params;
        for (e, p) in expected.params().iter().zip(params.params_mut()) {
            p.decay = e.decay;
        }
        Ok(Self {
            config,
            params,
            layout,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Bound {
        Bound {
            vars: self.params.bind(g, trainable),
        }
    }

    /// Checks lengths and channel ranges against the config.
    pub fn check_input(&self, x: &SerializedInput) -> Result<()> {
        let l = self.config.max_len;
        if x.token_ids.len() != l || x.attention_mask.len() != l {
            return Err(Error::InputLength {
                expected: l,
                got: x.token_ids.len(),
            });
        }
        if let Some(&id) = x.token_ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::TokenRange {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        for c in Channel::ALL {
            let card = self.config.cardinalities.get(c);
            let values = x.channel(c);
            if values.len() != l {
                return Err(Error::InputLength {
                    expected: l,
                    got: values.len(),
                });
            }
            if let Some(&value) = values.iter().find(|&&v| v >= card) {
                return Err(Error::ChannelRange {
                    channel: c.name(),
                    value,
                    cardinality: card,
                });
            }
        }
        Ok(())
    }

    /// Contextual representations `H` (l x d) of one input.
    ///
    /// Dropout is applied only when `dropout_rng` is given and the configured
    /// rate is positive.
    pub fn forward(
        &self,
        g: &mut Graph,
        bound: &Bound,
        x: &SerializedInput,
        mut dropout_rng: Option<&mut Rng>,
    ) -> Result<Var> {
        self.check_input(x)?;
        let cfg = &self.config;
        let lay = &self.layout;
        let v = &bound.vars;
        let (l, d) = (cfg.max_len, cfg.d_model);

        let mut h = g.gather_rows(v[lay.token], &x.token_ids)?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = g.gather_rows(v[lay.position], &positions)?;
        h = g.add(h, pos)?;
        for c in Channel::ALL {
            let e = g.gather_rows(v[lay.channels[c.index()]], x.channel(c))?;
            h = g.add(h, e)?;
        }
        h = self.dropout(g, h, &mut dropout_rng)?;

        let mut mask = Tensor::zeros(&[l, l]);
        for (j, &m) in x.attention_mask.iter().enumerate() {
            if m == 0 {
                for i in 0..l {
                    mask.data_mut()[i * l + j] = MASKED_SCORE;
                }
            }
        }
        let mask = g.constant(mask);
        let dh = d / cfg.n_heads;
        let scale = 1.0 / libm::sqrt(dh as f64);
        let eps = cfg.layer_norm_eps;

        for layer in &lay.layers {
            let a = g.layernorm(h, v[layer.ln1.0], v[layer.ln1.1], eps)?;
            let q = linear(g, a, v[layer.wq.0], v[layer.wq.1])?;
            let k = linear(g, a, v[layer.wk.0], v[layer.wk.1])?;
            let val = linear(g, a, v[layer.wv.0], v[layer.wv.1])?;
            let mut heads = Vec::with_capacity(cfg.n_heads);
            for head in 0..cfg.n_heads {
                let qh = g.slice_cols(q, head * dh, dh)?;
                let kh = g.slice_cols(k, head * dh, dh)?;
                let vh = g.slice_cols(val, head * dh, dh)?;
                let kt = g.transpose(kh)?;
                let scores = g.matmul(qh, kt)?;
                let scores = g.scale(scores, scale);
                let scores = g.add(scores, mask)?;
                let probs = g.softmax(scores, 1)?;
                heads.push(g.matmul(probs, vh)?);
            }
            let attn = g.concat_cols(&heads)?;
            let attn = linear(g, attn, v[layer.wo.0], v[layer.wo.1])?;
            let attn = self.dropout(g, attn, &mut dropout_rng)?;
            h = g.add(h, attn)?;

            let b = g.layernorm(h, v[layer.ln2.0], v[layer.ln2.1], eps)?;
            let f = linear(g, b, v[layer.ff1.0], v[layer.ff1.1])?;
            let f = g.gelu(f);
            let f = linear(g, f, v[layer.ff2.0], v[layer.ff2.1])?;
            let f = self.dropout(g, f, &mut dropout_rng)?;
            h = g.add(h, f)?;
        }
        g.layernorm(h, v[lay.final_ln.0], v[lay.final_ln.1], eps)
    }

    fn dropout(&self, g: &mut Graph, x: Var, rng: &mut Option<&mut Rng>) -> Result<Var> {
        let p = self.config.dropout;
        let Some(r) = rng.as_deref_mut() else {
            return Ok(x);
        };
        if p <= 0.0 {
            return Ok(x);
        }
        use rand::Rng as _;
        let keep = 1.0 / (1.0 - p);
        let shape = g.shape(x).to_vec();
        let mut m = Tensor::zeros(&shape);
        for v in m.data_mut() {
            *v = if r.random::<f64>() < p { 0.0 } else { keep };
        }
        let m = g.constant(m);
        g.mul(x, m)
    }

    /// Vocabulary logits at selected rows of `h`, through the tied token table.
    pub fn mlm_logits(&self, g: &mut Graph, bound: &Bound, h: Var, rows: &[usize]) -> Result<Var> {
        let lay = &self.layout;
        let sel = g.gather_rows(h, rows)?;
        let et = g.transpose(bound.vars[lay.token])?;
        let logits = g.matmul(sel, et)?;
        g.add_row(logits, bound.vars[lay.mlm_bias])
    }

    /// `H` for one input without recording gradients.
    pub fn encode(&self, x: &SerializedInput) -> Result<Tensor> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let h = self.forward(&mut g, &bound, x, None)?;
        Ok(g.value(h).clone())
    }

    /// Mean-pooled representation of one input, eval mode.
    pub fn pooled(&self, x: &SerializedInput) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind(&mut g, false);
        let h = self.forward(&mut g, &bound, x, None)?;
        let r = crate::objectives::pool(&mut g, h, &x.attention_mask)?;
        Ok(g.value(r).data().to_vec())
    }

    /// Hex SHA-256 over parameter names, shapes, and little-endian values.
    pub fn fingerprint(&self) -> alloc::string::String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in self.params.params() {
            h.update(p.name.as_bytes());
            for &s in p.tensor.shape() {
                h.update((s as u64).to_le_bytes());
            }
            for &v in p.tensor.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Zeroes the seven structural embedding tables.
    pub fn zero_structural_embeddings(&mut self) {
        let lay = &self.layout;
        for idx in lay.channels {
            for v in self.params.params_mut()[idx].tensor.data_mut() {
                *v = 0.0;
            }
        }
    }
}

fn linear(g: &mut Graph, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}
