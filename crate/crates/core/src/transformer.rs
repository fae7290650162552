//! Transformer encoder over node tokens, mean pooling and the softmax
//! classifier.
//!
//! Blocks are pre-norm residual:
//!
//! ```text
//! Y = X + SelfAttn(LN(X))
//! Z = Y + FFN(LN(Y)),   FFN = Linear(d_ff) → ReLU → Linear(d_model)
//! ```

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::lookup;
use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    #[default]
    Sinusoidal,
    Learned,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformerConfig {
    pub d_model: usize,
    pub heads: usize,
    pub layers: usize,
    pub d_ff: usize,
    pub pos_encoding: PosEncoding,
    /// Pool the tokens before the encoder instead of after it.
    pub pool_first: bool,
}

impl Default for TransformerConfig {
    fn default() -> Self {
        TransformerConfig {
            d_model: 64,
            heads: 4,
            layers: 2,
            d_ff: 128,
            pos_encoding: PosEncoding::Sinusoidal,
            pool_first: false,
        }
    }
}

impl TransformerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.heads == 0 || self.d_ff == 0 {
            return Err(Error::config("transformer.d_model, transformer.heads and transformer.d_ff must be positive"));
        }
        if self.d_model % self.heads != 0 {
            return Err(Error::config(format!(
                "transformer.d_model ({}) must be divisible by transformer.heads ({})",
                self.d_model, self.heads
            )));
        }
        if self.pos_encoding == PosEncoding::Sinusoidal && self.d_model % 2 != 0 {
            return Err(Error::config(format!(
                "transformer.d_model ({}) must be even for sinusoidal positional encoding",
                self.d_model
            )));
        }
        Ok(())
    }

    pub fn d_k(&self) -> usize {
        self.d_model / self.heads
    }
}

/// `P[pos][2i] = sin(pos / 10000^(2i/d))`, `P[pos][2i+1] = cos(...)`.
pub fn sinusoidal_encoding(num_tokens: usize, d_model: usize) -> Result<Tensor> {
    if d_model % 2 != 0 {
        return Err(Error::config(format!(
            "sinusoidal positional encoding needs an even d_model, got {d_model}"
        )));
    }
    let mut data = Vec::with_capacity(num_tokens * d_model);
    for pos in 0..num_tokens {
        for i in 0..d_model / 2 {
            let angle = pos as f64 / 10000f64.powf((2 * i) as f64 / d_model as f64);
            data.push(angle.sin());
            data.push(angle.cos());
        }
    }
    Tensor::new(vec![num_tokens, d_model], data)
}

/// Fixed encodings for the sinusoidal and none modes. Learned encodings
/// live in the parameter store.
pub fn positional_encoding(num_tokens: usize, d_model: usize, mode: PosEncoding) -> Result<Tensor> {
    match mode {
        PosEncoding::Sinusoidal => sinusoidal_encoding(num_tokens, d_model),
        PosEncoding::None | PosEncoding::Learned => Ok(Tensor::zeros(&[num_tokens, d_model])),
    }
}

fn glorot(store: &mut ParamStore, name: String, out: usize, inp: usize, rng: &mut impl Rng) -> Result<ParamId> {
    let bound = (6.0 / (out + inp) as f64).sqrt();
    store.insert(name, Tensor::uniform(&[out, inp], bound, rng))
}

#[derive(Clone, Debug)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl AttentionParams {
    pub fn init(prefix: &str, d: usize, heads: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        Ok(AttentionParams {
            wq: glorot(store, format!("{prefix}.wq"), d, d, rng)?,
            wk: glorot(store, format!("{prefix}.wk"), d, d, rng)?,
            wv: glorot(store, format!("{prefix}.wv"), d, d, rng)?,
            wo: glorot(store, format!("{prefix}.wo"), d, d, rng)?,
            heads,
        })
    }

    pub fn bind(prefix: &str, heads: usize, store: &ParamStore) -> Result<Self> {
        Ok(AttentionParams {
            wq: lookup(store, &format!("{prefix}.wq"))?,
            wk: lookup(store, &format!("{prefix}.wk"))?,
            wv: lookup(store, &format!("{prefix}.wv"))?,
            wo: lookup(store, &format!("{prefix}.wo"))?,
            heads,
        })
    }
}

/// Multi-head scaled dot-product self-attention. Returns the output and the
/// `[n×n]` attention matrix of every head.
pub fn self_attention(tape: &mut Tape, store: &ParamStore, x: Var, p: &AttentionParams) -> Result<(Var, Vec<Tensor>)> {
    let d = tape.shape(x)[1];
    if d % p.heads != 0 {
        return Err(Error::config(format!("d_model {d} not divisible by {} heads", p.heads)));
    }
    let dk = d / p.heads;
    let (wq, wk, wv, wo) = (
        tape.param(store, p.wq),
        tape.param(store, p.wk),
        tape.param(store, p.wv),
        tape.param(store, p.wo),
    );
    let q = tape.linear(x, wq, None)?;
    let k = tape.linear(x, wk, None)?;
    let v = tape.linear(x, wv, None)?;
    let mut heads = Vec::with_capacity(p.heads);
    let mut maps = Vec::with_capacity(p.heads);
    for h in 0..p.heads {
        let qh = tape.slice_cols(q, h * dk, dk)?;
        let kh = tape.slice_cols(k, h * dk, dk)?;
        let vh = tape.slice_cols(v, h * dk, dk)?;
        let kt = tape.transpose(kh)?;
        let scores = tape.matmul(qh, kt)?;
        let scores = tape.scale(scores, 1.0 / (dk as f64).sqrt());
        let attn = tape.softmax(scores, 1)?;
        maps.push(tape.value(attn).clone());
        heads.push(tape.matmul(attn, vh)?);
    }
    let cat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads)? };
    Ok((tape.linear(cat, wo, None)?, maps))
}

#[derive(Clone, Debug)]
pub struct EncoderBlock {
    pub ln1: (ParamId, ParamId),
    pub attn: AttentionParams,
    pub ln2: (ParamId, ParamId),
    pub ff1: (ParamId, ParamId),
    pub ff2: (ParamId, ParamId),
}

impl EncoderBlock {
    pub fn init(prefix: &str, cfg: &TransformerConfig, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        let d = cfg.d_model;
        let ln = |store: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
            Ok((
                store.insert(format!("{prefix}.{name}.gain"), Tensor::ones(&[d]))?,
                store.insert(format!("{prefix}.{name}.bias"), Tensor::zeros(&[d]))?,
            ))
        };
        let ln1 = ln(store, "ln1")?;
        let attn = AttentionParams::init(&format!("{prefix}.attn"), d, cfg.heads, store, rng)?;
        let ln2 = ln(store, "ln2")?;
        let ff1 = (
            glorot(store, format!("{prefix}.ff1.weight"), cfg.d_ff, d, rng)?,
            store.insert(format!("{prefix}.ff1.bias"), Tensor::zeros(&[cfg.d_ff]))?,
        );
        let ff2 = (
            glorot(store, format!("{prefix}.ff2.weight"), d, cfg.d_ff, rng)?,
            store.insert(format!("{prefix}.ff2.bias"), Tensor::zeros(&[d]))?,
        );
        Ok(EncoderBlock { ln1, attn, ln2, ff1, ff2 })
    }

    pub fn bind(prefix: &str, cfg: &TransformerConfig, store: &ParamStore) -> Result<Self> {
        let pair = |a: &str, b: &str| -> Result<(ParamId, ParamId)> {
            Ok((lookup(store, &format!("{prefix}.{a}"))?, lookup(store, &format!("{prefix}.{b}"))?))
        };
        Ok(EncoderBlock {
            ln1: pair("ln1.gain", "ln1.bias")?,
            attn: AttentionParams::bind(&format!("{prefix}.attn"), cfg.heads, store)?,
            ln2: pair("ln2.gain", "ln2.bias")?,
            ff1: pair("ff1.weight", "ff1.bias")?,
            ff2: pair("ff2.weight", "ff2.bias")?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<(Var, Vec<Tensor>)> {
        let (g1, b1) = (tape.param(store, self.ln1.0), tape.param(store, self.ln1.1));
        let h = tape.layer_norm(x, g1, b1, LN_EPS)?;
        let (a, maps) = self_attention(tape, store, h, &self.attn)?;
        let y = tape.add(x, a)?;
        let (g2, b2) = (tape.param(store, self.ln2.0), tape.param(store, self.ln2.1));
        let h = tape.layer_norm(y, g2, b2, LN_EPS)?;
        let (w1, c1) = (tape.param(store, self.ff1.0), tape.param(store, self.ff1.1));
        let h = tape.linear(h, w1, Some(c1))?;
        let h = tape.relu(h);
        let (w2, c2) = (tape.param(store, self.ff2.0), tape.param(store, self.ff2.1));
        let f = tape.linear(h, w2, Some(c2))?;
        Ok((tape.add(y, f)?, maps))
    }
}

/// Positional encoding plus the stack of encoder blocks.
#[derive(Clone, Debug)]
pub struct Encoder {
    pub config: TransformerConfig,
    pub num_tokens: usize,
    pos: Option<ParamId>,
    pub blocks: Vec<EncoderBlock>,
}

impl Encoder {
    pub fn init(cfg: &TransformerConfig, num_tokens: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        cfg.validate()?;
        let pos = match cfg.pos_encoding {
            PosEncoding::Learned => Some(store.insert(
                "pos.embedding",
                Tensor::randn(&[num_tokens, cfg.d_model], 0.02, rng),
            )?),
            _ => None,
        };
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::init(&format!("encoder.block{l}"), cfg, store, rng))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            config: cfg.clone(),
            num_tokens,
            pos,
            blocks,
        })
    }

    pub fn bind(cfg: &TransformerConfig, num_tokens: usize, store: &ParamStore) -> Result<Self> {
        cfg.validate()?;
        let pos = match cfg.pos_encoding {
            PosEncoding::Learned => Some(lookup(store, "pos.embedding")?),
            _ => None,
        };
        let blocks = (0..cfg.layers)
            .map(|l| EncoderBlock::bind(&format!("encoder.block{l}"), cfg, store))
            .collect::<Result<_>>()?;
        Ok(Encoder {
            config: cfg.clone(),
            num_tokens,
            pos,
            blocks,
        })
    }

    /// `X + P`.
    pub fn add_position(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var> {
        let n = tape.shape(x)[0];
        match (self.config.pos_encoding, self.pos) {
            (PosEncoding::None, _) => Ok(x),
            (PosEncoding::Learned, Some(id)) => {
                let p = tape.param(store, id);
                if tape.shape(p)[0] != n {
                    return Err(Error::shape("positional encoding", tape.shape(p), &[n, self.config.d_model]));
                }
                tape.add(x, p)
            }
            _ => {
                let p = tape.constant(sinusoidal_encoding(n, self.config.d_model)?);
                tape.add(x, p)
            }
        }
    }

    /// Runs the blocks; returns the tokens and each block's attention maps.
    pub fn blocks_forward(&self, tape: &mut Tape, store: &ParamStore, mut x: Var) -> Result<(Var, Vec<Vec<Tensor>>)> {
        let mut maps = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, m) = b.forward(tape, store, x)?;
            maps.push(m);
            x = y;
        }
        Ok((x, maps))
    }

    /// Matrix-product FLOPs of the blocks over `n` tokens.
    pub fn flops(&self, n: usize) -> u64 {
        let (n, d, f) = (n as u64, self.config.d_model as u64, self.config.d_ff as u64);
        let per_block = 8 * n * d * d + 4 * n * n * d + 4 * n * d * f;
        per_block * self.blocks.len() as u64
    }
}

/// Mean over token rows on the tape, as a `[1×d]` row.
pub fn pool_tokens(tape: &mut Tape, x: Var) -> Result<Var> {
    tape.mean_rows(x)
}

/// Arithmetic mean of token vectors.
pub fn global_mean_pool(tokens: &[Vec<f64>]) -> Result<Vec<f64>> {
    let Some(first) = tokens.first() else {
        return Err(Error::contract("global_mean_pool needs at least one token"));
    };
    let mut out = vec![0.0; first.len()];
    for t in tokens {
        if t.len() != out.len() {
            return Err(Error::shape("global_mean_pool", &[t.len()], &[out.len()]));
        }
        out.iter_mut().zip(t).for_each(|(o, v)| *o += v);
    }
    let n = tokens.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct HeadParams {
    pub weight: ParamId,
    pub bias: ParamId,
    pub classes: usize,
}

impl HeadParams {
    pub fn init(d: usize, classes: usize, store: &mut ParamStore, rng: &mut impl Rng) -> Result<Self> {
        if classes < 2 {
            return Err(Error::config(format!("num_classes must be >= 2, got {classes}")));
        }
        Ok(HeadParams {
            weight: glorot(store, "head.weight".into(), classes, d, rng)?,
            bias: store.insert("head.bias", Tensor::zeros(&[classes]))?,
            classes,
        })
    }

    pub fn bind(classes: usize, store: &ParamStore) -> Result<Self> {
        Ok(HeadParams {
            weight: lookup(store, "head.weight")?,
            bias: lookup(store, "head.bias")?,
            classes,
        })
    }

    /// Logits `W_out z + b_out` for a pooled row `z[1×d]`.
    pub fn logits(&self, tape: &mut Tape, store: &ParamStore, z: Var) -> Result<Var> {
        let (w, b) = (tape.param(store, self.weight), tape.param(store, self.bias));
        tape.linear(z, w, Some(b))
    }
}

/// Class probabilities `softmax(W_out z + b_out)`.
pub fn classify(tape: &mut Tape, store: &ParamStore, z: Var, head: &HeadParams) -> Result<Var> {
    let logits = head.logits(tape, store, z)?;
    tape.softmax(logits, 1)
}

/// Pearson correlation between token rows. Rows with zero variance
/// correlate 0 with everything but themselves.
pub fn token_correlation(x: &Tensor) -> Tensor {
    let (n, d) = (x.rows(), x.cols());
    let centered: Vec<Vec<f64>> = (0..n)
        .map(|r| {
            let row = x.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            row.iter().map(|v| v - mean).collect()
        })
        .collect();
    let norms: Vec<f64> = centered.iter().map(|c| c.iter().map(|v| v * v).sum::<f64>().sqrt()).collect();
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        out[i * n + i] = 1.0;
        for j in i + 1..n {
            let c = if norms[i] > 0.0 && norms[j] > 0.0 {
                let dot: f64 = centered[i].iter().zip(&centered[j]).map(|(a, b)| a * b).sum();
                (dot / (norms[i] * norms[j])).clamp(-1.0, 1.0)
            } else {
                0.0
            };
            out[i * n + j] = c;
            out[j * n + i] = c;
        }
    }
    Tensor::new(vec![n, n], out).expect("n×n")
}
