//! Two-block pre-norm transformer over byte tokens.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{ByteTokenSeq, VOCAB_SIZE};
use crate::nn::{ParamId, ParamStore, Scalar, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TextEncoderConfig {
    pub d_model: usize,
    pub d_ff: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub max_len: usize,
    /// When false the encoder keeps its initial weights during training.
    pub trainable: bool,
    /// Optional output projection `d_model -> d_model`.
    pub project: bool,
}

impl TextEncoderConfig {
    pub fn desk() -> Self {
        TextEncoderConfig {
            d_model: 128,
            d_ff: 256,
            n_heads: 4,
            n_layers: 2,
            max_len: 64,
            trainable: true,
            project: false,
        }
    }

    /// Dimensions of the pretrained byte encoder this one stands in for.
    pub fn paper_scale() -> Self {
        TextEncoderConfig {
            d_model: 1536,
            d_ff: 3968,
            n_heads: 12,
            n_layers: 2,
            max_len: 64,
            trainable: false,
            project: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers != 2 {
            return Err(Error::Config(format!("text encoder needs 2 layers, got {}", self.n_layers)));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if self.max_len < 2 || self.d_ff == 0 {
            return Err(Error::Config("max_len must be >= 2 and d_ff > 0".into()));
        }
        Ok(())
    }
}

/// Encoder output `τ(c_T)`: `max_len × d_model` with PAD rows zeroed.
#[derive(Debug, Clone, PartialEq)]
pub struct TextFeatures {
    pub values: Vec<f64>,
    pub mask: Vec<bool>,
    pub dim: usize,
}

impl TextFeatures {
    pub fn len(&self) -> usize {
        self.mask.len()
    }

    pub fn is_empty(&self) -> bool {
        self.mask.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }
}

#[derive(Debug, Clone)]
struct Block {
    ln1: (ParamId, ParamId),
    wq: (ParamId, ParamId),
    wk: (ParamId, ParamId),
    wv: (ParamId, ParamId),
    wo: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
}

/// Parameter handles of the text encoder inside a shared [`ParamStore`].
#[derive(Debug, Clone)]
pub struct TextEncoder {
    pub config: TextEncoderConfig,
    embed: ParamId,
    blocks: Vec<Block>,
    proj: Option<(ParamId, ParamId)>,
    owned: Vec<ParamId>,
}

pub(crate) fn sinusoid(pos: f64, dim: usize, out: &mut [f64]) {
    for i in 0..dim / 2 {
        let freq = (-(2.0 * i as f64 / dim as f64) * 10000f64.ln()).exp();
        out[2 * i] = (pos * freq).sin();
        out[2 * i + 1] = (pos * freq).cos();
    }
    if dim % 2 == 1 {
        out[dim - 1] = 0.0;
    }
}

impl TextEncoder {
    pub fn new<F: Scalar, R: Rng>(config: TextEncoderConfig, store: &mut ParamStore<F>, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let start = store.len();
        let embed = store.normal("text.embed", &[VOCAB_SIZE, d], 1.0, rng);
        let lin = |store: &mut ParamStore<F>, rng: &mut R, name: String, out: usize, inp: usize| {
            let w = store.normal(&format!("{name}.w"), &[out, inp], (1.0 / inp as f64).sqrt(), rng);
            let b = store.constant(&format!("{name}.b"), &[out], 0.0);
            (w, b)
        };
        let ln = |store: &mut ParamStore<F>, name: String| {
            (
                store.constant(&format!("{name}.g"), &[d], 1.0),
                store.constant(&format!("{name}.b"), &[d], 0.0),
            )
        };
        let mut blocks = Vec::new();
        for l in 0..config.n_layers {
            let p = format!("text.block{l}");
            blocks.push(Block {
                ln1: ln(store, format!("{p}.ln1")),
                wq: lin(store, rng, format!("{p}.attn.q"), d, d),
                wk: lin(store, rng, format!("{p}.attn.k"), d, d),
                wv: lin(store, rng, format!("{p}.attn.v"), d, d),
                wo: lin(store, rng, format!("{p}.attn.o"), d, d),
                ln2: ln(store, format!("{p}.ln2")),
                ff1: lin(store, rng, format!("{p}.ff1"), config.d_ff, d),
                ff2: lin(store, rng, format!("{p}.ff2"), d, config.d_ff),
            });
        }
        let proj = config.project.then(|| lin(store, rng, "text.proj".into(), d, d));
        let owned: Vec<ParamId> = store.ids().skip(start).collect();
        for &id in &owned {
            store.set_frozen(id, !config.trainable);
        }
        Ok(TextEncoder {
            config,
            embed,
            blocks,
            proj,
            owned,
        })
    }

    /// Re-binds handles to parameters already present in `store` (checkpoint load).
    pub fn bind<F: Scalar>(config: TextEncoderConfig, store: &ParamStore<F>) -> Result<Self> {
        config.validate()?;
        let get = |name: &str| {
            store
                .find(name)
                .ok_or_else(|| Error::ArtifactMismatch(format!("missing tensor {name}")))
        };
        let pair = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((get(&format!("{name}.w"))?, get(&format!("{name}.b"))?))
        };
        let ln = |name: &str| -> Result<(ParamId, ParamId)> {
            Ok((get(&format!("{name}.g"))?, get(&format!("{name}.b"))?))
        };
        let mut blocks = Vec::new();
        for l in 0..config.n_layers {
            let p = format!("text.block{l}");
            blocks.push(Block {
                ln1: ln(&format!("{p}.ln1"))?,
                wq: pair(&format!("{p}.attn.q"))?,
                wk: pair(&format!("{p}.attn.k"))?,
                wv: pair(&format!("{p}.attn.v"))?,
                wo: pair(&format!("{p}.attn.o"))?,
                ln2: ln(&format!("{p}.ln2"))?,
                ff1: pair(&format!("{p}.ff1"))?,
                ff2: pair(&format!("{p}.ff2"))?,
            });
        }
        let proj = if config.project {
            Some(pair("text.proj")?)
        } else {
            None
        };
        let owned = store.ids().filter(|&id| store.name(id).starts_with("text.")).collect();
        Ok(TextEncoder {
            embed: get("text.embed")?,
            config,
            blocks,
            proj,
            owned,
        })
    }

    pub fn param_ids(&self) -> &[ParamId] {
        &self.owned
    }

    /// Expected `(name, shape)` of every tensor this encoder owns.
    pub fn expected_shapes(config: &TextEncoderConfig) -> Vec<(String, Vec<usize>)> {
        let d = config.d_model;
        let mut v = vec![("text.embed".to_string(), vec![VOCAB_SIZE, d])];
        let lin = |v: &mut Vec<(String, Vec<usize>)>, n: String, o: usize, i: usize| {
            v.push((format!("{n}.w"), vec![o, i]));
            v.push((format!("{n}.b"), vec![o]));
        };
        for l in 0..config.n_layers {
            let p = format!("text.block{l}");
            v.push((format!("{p}.ln1.g"), vec![d]));
            v.push((format!("{p}.ln1.b"), vec![d]));
            for n in ["q", "k", "v", "o"] {
                lin(&mut v, format!("{p}.attn.{n}"), d, d);
            }
            v.push((format!("{p}.ln2.g"), vec![d]));
            v.push((format!("{p}.ln2.b"), vec![d]));
            lin(&mut v, format!("{p}.ff1"), config.d_ff, d);
            lin(&mut v, format!("{p}.ff2"), d, config.d_ff);
        }
        if config.project {
            lin(&mut v, "text.proj".into(), d, d);
        }
        v
    }

    /// Records the encoder on `tape` for a batch of sequences; returns `[n, M, d]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, store: &ParamStore<F>, seqs: &[&ByteTokenSeq]) -> Result<Var> {
        let m = self.config.max_len;
        let d = self.config.d_model;
        let h = self.config.n_heads;
        let n = seqs.len();
        let mut ids = Vec::with_capacity(n * m);
        let mut mask = Vec::with_capacity(n * m);
        for s in seqs {
            if s.len() != m {
                return Err(Error::shape(format!("token sequence length {} != {m}", s.len())));
            }
            ids.extend(s.ids().iter().map(|&i| i as usize));
            mask.extend_from_slice(s.mask());
        }
        let table = tape.param(store, self.embed);
        let emb = tape.embedding(table, &ids, &[n, m]);
        let mut pe = vec![0.0; n * m * d];
        for b in 0..n {
            for p in 0..m {
                sinusoid(p as f64, d, &mut pe[(b * m + p) * d..(b * m + p + 1) * d]);
            }
        }
        let mut x = tape.add_const(emb, &Tensor::from_f64(&[n, m, d], &pe));
        let scale = 1.0 / ((d / h) as f64).sqrt();
        let lin = |tape: &mut Tape<F>, x: Var, (w, b): (ParamId, ParamId)| {
            let w = tape.param(store, w);
            let b = tape.param(store, b);
            tape.linear(x, w, Some(b))
        };
        for blk in &self.blocks {
            let (g, b) = (tape.param(store, blk.ln1.0), tape.param(store, blk.ln1.1));
            let xn = tape.layer_norm(x, g, b, 1e-6);
            let q = lin(tape, xn, blk.wq);
            let k = lin(tape, xn, blk.wk);
            let v = lin(tape, xn, blk.wv);
            let (q, k, v) = (tape.split_heads(q, h), tape.split_heads(k, h), tape.split_heads(v, h));
            let s = tape.bmm(q, k, true);
            let s = tape.scale(s, scale);
            let a = tape.masked_softmax(s, &mask, h);
            let o = tape.bmm(a, v, false);
            let o = tape.merge_heads(o, h);
            let o = lin(tape, o, blk.wo);
            x = tape.add(x, o);
            let (g, b) = (tape.param(store, blk.ln2.0), tape.param(store, blk.ln2.1));
            let xn = tape.layer_norm(x, g, b, 1e-6);
            let f = lin(tape, xn, blk.ff1);
            let f = tape.gelu(f);
            let f = lin(tape, f, blk.ff2);
            x = tape.add(x, f);
        }
        if let Some(p) = self.proj {
            x = lin(tape, x, p);
        }
        let keep: Vec<f64> = mask
            .iter()
            .flat_map(|&k| std::iter::repeat_n(if k { 1.0 } else { 0.0 }, d))
            .collect();
        Ok(tape.mul_const(x, &Tensor::from_f64(&[n, m, d], &keep)))
    }

    /// `τ(c_T)` for a single sequence.
    pub fn encode<F: Scalar>(&self, seq: &ByteTokenSeq, store: &ParamStore<F>) -> Result<TextFeatures> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, store, &[seq])?;
        Ok(TextFeatures {
            values: tape.value(out).to_f64(),
            mask: seq.mask().to_vec(),
            dim: self.config.d_model,
        })
    }
}
