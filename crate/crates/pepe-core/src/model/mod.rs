//! Dual-source encoder-decoder with user-specific output biases and a
//! cluster-discriminator head.
//!
//! One encoder consumes `[CLS] src [SEP] mt [SEP]` with segment embeddings
//! separating the two spans; the decoder is teacher-forced on the post-edit.
//! The output distribution is `softmax(FFN(o_i) + θ_user)` where `θ_user` is
//! the user's row of the bias matrix U (or a factorized v·B product). All
//! forward passes record the intermediate values their backward passes need;
//! gradients land in a [`ParamSet`] with the same topology as the weights.

mod beam;
mod checkpoint;

pub use beam::{beam_search, BeamOutcome};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PepeError, Result};
use crate::tensor::{
    apply_mask, axpy, dot, dropout_mask, gauss, gelu, gelu_grad, log_softmax, matmul,
    softmax_backward_row, softmax_in_place, LayerNorm, LayerNormCache, Linear,
};
use crate::vocab::{SpecialIds, TokenId};

const INIT_STD: f64 = 0.02;
const MASKED_SCORE: f64 = -1e30;

/// Shape record for every tensor in the model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub vocab: usize,
    pub users: usize,
    pub clusters: usize,
    pub max_len: usize,
    /// Factor rank for the factorized-bias variant; unused otherwise.
    pub factor_rank: usize,
}

impl Dims {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(PepeError::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.enc_layers == 0 || self.dec_layers == 0 {
            return Err(PepeError::Config("need at least one layer per stack".into()));
        }
        if self.vocab < 16 || self.max_len < 8 {
            return Err(PepeError::Config("vocab or max_len too small".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Attn {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}

impl Attn {
    fn zeros(d: usize) -> Self {
        Self {
            q: Linear::zeros(d, d),
            k: Linear::zeros(d, d),
            v: Linear::zeros(d, d),
            o: Linear::zeros(d, d),
        }
    }

    fn init(d: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: Linear::init(d, d, INIT_STD, rng),
            k: Linear::init(d, d, INIT_STD, rng),
            v: Linear::init(d, d, INIT_STD, rng),
            o: Linear::init(d, d, INIT_STD, rng),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncLayer {
    pub attn: Attn,
    pub ln_attn: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_ff: LayerNorm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecLayer {
    pub self_attn: Attn,
    pub ln_self: LayerNorm,
    pub cross_attn: Attn,
    pub ln_cross: LayerNorm,
    pub ff1: Linear,
    pub ff2: Linear,
    pub ln_ff: LayerNorm,
}

/// Factorized user bias: per-user vector times a shared basis.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorBias {
    /// users × rank
    pub user_vec: Vec<f64>,
    /// rank × vocab
    pub basis: Vec<f64>,
}

/// Every trainable tensor. Gradients and optimizer moments reuse this type.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    /// vocab × d, shared by encoder and decoder token embeddings.
    pub embed: Vec<f64>,
    /// max_len × d learned positions, shared by both stacks.
    pub pos: Vec<f64>,
    /// 2 × d segment embeddings (src span vs mt span).
    pub seg: Vec<f64>,
    pub enc: Vec<EncLayer>,
    pub dec: Vec<DecLayer>,
    /// d → vocab output projection.
    pub out_proj: Linear,
    /// users × vocab additive output bias, zero-initialized.
    pub user_bias: Vec<f64>,
    pub factor: Option<FactorBias>,
    /// d → users classification head (User CLS baseline only).
    pub user_cls: Option<Linear>,
    /// d → clusters discriminator head.
    pub disc: Linear,
}

impl ParamSet {
    pub fn zeros(dims: &Dims, with_factor: bool, with_user_cls: bool) -> Self {
        let d = dims.d_model;
        Self {
            embed: vec![0.0; dims.vocab * d],
            pos: vec![0.0; dims.max_len * d],
            seg: vec![0.0; 2 * d],
            enc: (0..dims.enc_layers)
                .map(|_| EncLayer {
                    attn: Attn::zeros(d),
                    ln_attn: LayerNorm::zeros(d),
                    ff1: Linear::zeros(d, dims.d_ff),
                    ff2: Linear::zeros(dims.d_ff, d),
                    ln_ff: LayerNorm::zeros(d),
                })
                .collect(),
            dec: (0..dims.dec_layers)
                .map(|_| DecLayer {
                    self_attn: Attn::zeros(d),
                    ln_self: LayerNorm::zeros(d),
                    cross_attn: Attn::zeros(d),
                    ln_cross: LayerNorm::zeros(d),
                    ff1: Linear::zeros(d, dims.d_ff),
                    ff2: Linear::zeros(dims.d_ff, d),
                    ln_ff: LayerNorm::zeros(d),
                })
                .collect(),
            out_proj: Linear::zeros(d, dims.vocab),
            user_bias: vec![0.0; dims.users * dims.vocab],
            factor: with_factor.then(|| FactorBias {
                user_vec: vec![0.0; dims.users * dims.factor_rank],
                basis: vec![0.0; dims.factor_rank * dims.vocab],
            }),
            user_cls: with_user_cls.then(|| Linear::zeros(d, dims.users)),
            disc: Linear::zeros(d, dims.clusters),
        }
    }

    pub fn zeros_like(&self, dims: &Dims) -> Self {
        Self::zeros(dims, self.factor.is_some(), self.user_cls.is_some())
    }

    /// Named views of every tensor, in a fixed order shared by
    /// [`ParamSet::tensors_mut`].
    pub fn tensors(&self) -> Vec<(String, &Vec<f64>)> {
        let mut out: Vec<(String, &Vec<f64>)> = vec![
            ("embed".into(), &self.embed),
            ("pos".into(), &self.pos),
            ("seg".into(), &self.seg),
        ];
        for (i, l) in self.enc.iter().enumerate() {
            for (tag, lin) in [("q", &l.attn.q), ("k", &l.attn.k), ("v", &l.attn.v), ("o", &l.attn.o)] {
                out.push((format!("enc{i}.attn.{tag}.w"), &lin.w));
                out.push((format!("enc{i}.attn.{tag}.b"), &lin.b));
            }
            out.push((format!("enc{i}.ln_attn.gain"), &l.ln_attn.gain));
            out.push((format!("enc{i}.ln_attn.bias"), &l.ln_attn.bias));
            out.push((format!("enc{i}.ff1.w"), &l.ff1.w));
            out.push((format!("enc{i}.ff1.b"), &l.ff1.b));
            out.push((format!("enc{i}.ff2.w"), &l.ff2.w));
            out.push((format!("enc{i}.ff2.b"), &l.ff2.b));
            out.push((format!("enc{i}.ln_ff.gain"), &l.ln_ff.gain));
            out.push((format!("enc{i}.ln_ff.bias"), &l.ln_ff.bias));
        }
        for (i, l) in self.dec.iter().enumerate() {
            for (tag, lin) in [
                ("self.q", &l.self_attn.q),
                ("self.k", &l.self_attn.k),
                ("self.v", &l.self_attn.v),
                ("self.o", &l.self_attn.o),
                ("cross.q", &l.cross_attn.q),
                ("cross.k", &l.cross_attn.k),
                ("cross.v", &l.cross_attn.v),
                ("cross.o", &l.cross_attn.o),
            ] {
                out.push((format!("dec{i}.{tag}.w"), &lin.w));
                out.push((format!("dec{i}.{tag}.b"), &lin.b));
            }
            out.push((format!("dec{i}.ln_self.gain"), &l.ln_self.gain));
            out.push((format!("dec{i}.ln_self.bias"), &l.ln_self.bias));
            out.push((format!("dec{i}.ln_cross.gain"), &l.ln_cross.gain));
            out.push((format!("dec{i}.ln_cross.bias"), &l.ln_cross.bias));
            out.push((format!("dec{i}.ff1.w"), &l.ff1.w));
            out.push((format!("dec{i}.ff1.b"), &l.ff1.b));
            out.push((format!("dec{i}.ff2.w"), &l.ff2.w));
            out.push((format!("dec{i}.ff2.b"), &l.ff2.b));
            out.push((format!("dec{i}.ln_ff.gain"), &l.ln_ff.gain));
            out.push((format!("dec{i}.ln_ff.bias"), &l.ln_ff.bias));
        }
        out.push(("out_proj.w".into(), &self.out_proj.w));
        out.push(("out_proj.b".into(), &self.out_proj.b));
        out.push(("user_bias".into(), &self.user_bias));
        if let Some(f) = &self.factor {
            out.push(("factor.user_vec".into(), &f.user_vec));
            out.push(("factor.basis".into(), &f.basis));
        }
        if let Some(h) = &self.user_cls {
            out.push(("user_cls.w".into(), &h.w));
            out.push(("user_cls.b".into(), &h.b));
        }
        out.push(("disc.w".into(), &self.disc.w));
        out.push(("disc.b".into(), &self.disc.b));
        out
    }

    /// Mutable twin of [`ParamSet::tensors`]; the order is identical.
    pub fn tensors_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out: Vec<(String, &mut Vec<f64>)> = vec![
            ("embed".into(), &mut self.embed),
            ("pos".into(), &mut self.pos),
            ("seg".into(), &mut self.seg),
        ];
        for (i, l) in self.enc.iter_mut().enumerate() {
            for (tag, lin) in [
                ("q", &mut l.attn.q),
                ("k", &mut l.attn.k),
                ("v", &mut l.attn.v),
                ("o", &mut l.attn.o),
            ] {
                out.push((format!("enc{i}.attn.{tag}.w"), &mut lin.w));
                out.push((format!("enc{i}.attn.{tag}.b"), &mut lin.b));
            }
            out.push((format!("enc{i}.ln_attn.gain"), &mut l.ln_attn.gain));
            out.push((format!("enc{i}.ln_attn.bias"), &mut l.ln_attn.bias));
            out.push((format!("enc{i}.ff1.w"), &mut l.ff1.w));
            out.push((format!("enc{i}.ff1.b"), &mut l.ff1.b));
            out.push((format!("enc{i}.ff2.w"), &mut l.ff2.w));
            out.push((format!("enc{i}.ff2.b"), &mut l.ff2.b));
            out.push((format!("enc{i}.ln_ff.gain"), &mut l.ln_ff.gain));
            out.push((format!("enc{i}.ln_ff.bias"), &mut l.ln_ff.bias));
        }
        for (i, l) in self.dec.iter_mut().enumerate() {
            for (tag, lin) in [
                ("self.q", &mut l.self_attn.q),
                ("self.k", &mut l.self_attn.k),
                ("self.v", &mut l.self_attn.v),
                ("self.o", &mut l.self_attn.o),
                ("cross.q", &mut l.cross_attn.q),
                ("cross.k", &mut l.cross_attn.k),
                ("cross.v", &mut l.cross_attn.v),
                ("cross.o", &mut l.cross_attn.o),
            ] {
                out.push((format!("dec{i}.{tag}.w"), &mut lin.w));
                out.push((format!("dec{i}.{tag}.b"), &mut lin.b));
            }
            out.push((format!("dec{i}.ln_self.gain"), &mut l.ln_self.gain));
            out.push((format!("dec{i}.ln_self.bias"), &mut l.ln_self.bias));
            out.push((format!("dec{i}.ln_cross.gain"), &mut l.ln_cross.gain));
            out.push((format!("dec{i}.ln_cross.bias"), &mut l.ln_cross.bias));
            out.push((format!("dec{i}.ff1.w"), &mut l.ff1.w));
            out.push((format!("dec{i}.ff1.b"), &mut l.ff1.b));
            out.push((format!("dec{i}.ff2.w"), &mut l.ff2.w));
            out.push((format!("dec{i}.ff2.b"), &mut l.ff2.b));
            out.push((format!("dec{i}.ln_ff.gain"), &mut l.ln_ff.gain));
            out.push((format!("dec{i}.ln_ff.bias"), &mut l.ln_ff.bias));
        }
        out.push(("out_proj.w".into(), &mut self.out_proj.w));
        out.push(("out_proj.b".into(), &mut self.out_proj.b));
        out.push(("user_bias".into(), &mut self.user_bias));
        if let Some(f) = &mut self.factor {
            out.push(("factor.user_vec".into(), &mut f.user_vec));
            out.push(("factor.basis".into(), &mut f.basis));
        }
        if let Some(h) = &mut self.user_cls {
            out.push(("user_cls.w".into(), &mut h.w));
            out.push(("user_cls.b".into(), &mut h.b));
        }
        out.push(("disc.w".into(), &mut self.disc.w));
        out.push(("disc.b".into(), &mut self.disc.b));
        out
    }
}

/// Provenance carried by a model instance and its checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    /// user id -> bias row, by position.
    pub user_index: Vec<String>,
    pub vocab_digest: String,
    /// Task-adaptive pretraining completed.
    pub pretrained: bool,
    /// Set when a training variant produced this model.
    pub variant: Option<String>,
}

#[derive(Debug, Clone)]
pub struct ApeModel {
    pub dims: Dims,
    pub params: ParamSet,
    pub meta: ModelMeta,
}

impl ApeModel {
    /// Fresh model with BERT-style N(0, 0.02) weights; U starts at zero so
    /// training begins exactly at the user-agnostic model.
    pub fn init(
        dims: Dims,
        users: Vec<String>,
        vocab_digest: String,
        seed: u64,
        with_factor: bool,
        with_user_cls: bool,
    ) -> Result<Self> {
        dims.validate()?;
        if users.len() != dims.users {
            return Err(PepeError::Config(format!(
                "user roster size {} != dims.users {}",
                users.len(),
                dims.users
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = dims.d_model;
        let mut params = ParamSet::zeros(&dims, with_factor, with_user_cls);
        for v in params.embed.iter_mut() {
            *v = gauss(&mut rng) * INIT_STD;
        }
        for v in params.pos.iter_mut() {
            *v = gauss(&mut rng) * INIT_STD;
        }
        for v in params.seg.iter_mut() {
            *v = gauss(&mut rng) * INIT_STD;
        }
        for l in params.enc.iter_mut() {
            l.attn = Attn::init(d, &mut rng);
            l.ln_attn = LayerNorm::identity(d);
            l.ff1 = Linear::init(d, dims.d_ff, INIT_STD, &mut rng);
            l.ff2 = Linear::init(dims.d_ff, d, INIT_STD, &mut rng);
            l.ln_ff = LayerNorm::identity(d);
        }
        for l in params.dec.iter_mut() {
            l.self_attn = Attn::init(d, &mut rng);
            l.ln_self = LayerNorm::identity(d);
            l.cross_attn = Attn::init(d, &mut rng);
            l.ln_cross = LayerNorm::identity(d);
            l.ff1 = Linear::init(d, dims.d_ff, INIT_STD, &mut rng);
            l.ff2 = Linear::init(dims.d_ff, d, INIT_STD, &mut rng);
            l.ln_ff = LayerNorm::identity(d);
        }
        params.out_proj = Linear::init(d, dims.vocab, INIT_STD, &mut rng);
        if let Some(f) = &mut params.factor {
            for v in f.basis.iter_mut() {
                *v = gauss(&mut rng) * INIT_STD;
            }
        }
        if let Some(h) = &mut params.user_cls {
            *h = Linear::init(d, dims.users, INIT_STD, &mut rng);
        }
        params.disc = Linear::init(d, dims.clusters, INIT_STD, &mut rng);
        Ok(Self {
            dims,
            params,
            meta: ModelMeta {
                user_index: users,
                vocab_digest,
                pretrained: false,
                variant: None,
            },
        })
    }

    pub fn user_row(&self, user_id: &str) -> Result<usize> {
        self.meta
            .user_index
            .iter()
            .position(|u| u == user_id)
            .ok_or_else(|| PepeError::UnregisteredUser(user_id.to_string()))
    }

    /// The additive output bias for a user row: U row, or v·B when the
    /// factorized form is present.
    pub fn effective_user_bias(&self, row: usize) -> Vec<f64> {
        let v = self.dims.vocab;
        match &self.params.factor {
            Some(f) => {
                let r = self.dims.factor_rank;
                matmul(&f.user_vec[row * r..(row + 1) * r], &f.basis, 1, r, v)
            }
            None => self.params.user_bias[row * v..(row + 1) * v].to_vec(),
        }
    }
}

// ---------------------------------------------------------------------------
// Encoder input
// ---------------------------------------------------------------------------

/// `[CLS] src [SEP] mt [SEP]` with segment ids and a validity mask
/// (`true` = real token, `false` = padding).
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub tokens: Vec<TokenId>,
    pub segments: Vec<u8>,
    pub mask: Vec<bool>,
}

impl EncoderInput {
    pub fn from_src_mt(src: &[TokenId], mt: &[TokenId], sp: SpecialIds) -> Self {
        let mut tokens = Vec::with_capacity(src.len() + mt.len() + 3);
        let mut segments = Vec::with_capacity(tokens.capacity());
        tokens.push(sp.cls);
        segments.push(0);
        tokens.extend_from_slice(src);
        segments.extend(std::iter::repeat(0).take(src.len()));
        tokens.push(sp.sep);
        segments.push(0);
        tokens.extend_from_slice(mt);
        segments.extend(std::iter::repeat(1).take(mt.len()));
        tokens.push(sp.sep);
        segments.push(1);
        let mask = vec![true; tokens.len()];
        Self {
            tokens,
            segments,
            mask,
        }
    }

    /// Source-only layout used for clustering embeddings: the mt span is
    /// empty but both separators stay so the shape contract holds.
    pub fn from_src_only(src: &[TokenId], sp: SpecialIds) -> Self {
        Self::from_src_mt(src, &[], sp)
    }

    pub fn pad_to(mut self, len: usize, pad: TokenId) -> Self {
        while self.tokens.len() < len {
            self.tokens.push(pad);
            self.segments.push(1);
            self.mask.push(false);
        }
        self
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// Encoder output bundled with the validity mask cross-attention needs.
#[derive(Debug, Clone)]
pub struct EncStates {
    pub h: Vec<f64>,
    pub rows: usize,
    pub mask: Vec<bool>,
}

impl EncStates {
    /// Hidden state at the `[CLS]` position.
    pub fn cls(&self, d: usize) -> &[f64] {
        &self.h[..d]
    }
}

// ---------------------------------------------------------------------------
// Attention forward/backward
// ---------------------------------------------------------------------------

pub(crate) struct AttnCache {
    x_q: Vec<f64>,
    x_kv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    /// heads × rows_q × rows_k attention probabilities.
    probs: Vec<f64>,
    /// rows_q × d context (pre output-projection).
    ctx: Vec<f64>,
    rows_q: usize,
    rows_k: usize,
}

fn attn_forward(
    p: &Attn,
    x_q: &[f64],
    rows_q: usize,
    x_kv: &[f64],
    rows_k: usize,
    key_mask: Option<&[bool]>,
    causal: bool,
    n_heads: usize,
    d: usize,
) -> (Vec<f64>, AttnCache) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let q = p.q.forward(x_q, rows_q);
    let k = p.k.forward(x_kv, rows_k);
    let v = p.v.forward(x_kv, rows_k);

    let mut probs = vec![0.0; n_heads * rows_q * rows_k];
    let mut ctx = vec![0.0; rows_q * d];
    let mut scores = vec![0.0; rows_k];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..rows_q {
            let q_i = &q[i * d + off..i * d + off + dh];
            for j in 0..rows_k {
                let masked = key_mask.map(|m| !m[j]).unwrap_or(false) || (causal && j > i);
                scores[j] = if masked {
                    MASKED_SCORE
                } else {
                    dot(q_i, &k[j * d + off..j * d + off + dh]) * scale
                };
            }
            softmax_in_place(&mut scores);
            let p_row = &mut probs[(h * rows_q + i) * rows_k..(h * rows_q + i + 1) * rows_k];
            p_row.copy_from_slice(&scores);
            let ctx_i = &mut ctx[i * d + off..i * d + off + dh];
            for j in 0..rows_k {
                let w = p_row[j];
                if w != 0.0 {
                    axpy(ctx_i, w, &v[j * d + off..j * d + off + dh]);
                }
            }
        }
    }
    let out = p.o.forward(&ctx, rows_q);
    (
        out,
        AttnCache {
            x_q: x_q.to_vec(),
            x_kv: x_kv.to_vec(),
            q,
            k,
            v,
            probs,
            ctx,
            rows_q,
            rows_k,
        },
    )
}

/// Returns (d_x_q, d_x_kv).
fn attn_backward(
    p: &Attn,
    cache: &AttnCache,
    d_out: &[f64],
    n_heads: usize,
    d: usize,
    grad: &mut Attn,
) -> (Vec<f64>, Vec<f64>) {
    let (rows_q, rows_k) = (cache.rows_q, cache.rows_k);
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();

    let d_ctx = p.o.backward(&cache.ctx, d_out, rows_q, &mut grad.o);

    let mut d_q = vec![0.0; rows_q * d];
    let mut d_k = vec![0.0; rows_k * d];
    let mut d_v = vec![0.0; rows_k * d];
    let mut dp = vec![0.0; rows_k];
    let mut ds = vec![0.0; rows_k];
    for h in 0..n_heads {
        let off = h * dh;
        for i in 0..rows_q {
            let d_ctx_i = &d_ctx[i * d + off..i * d + off + dh];
            let p_row = &cache.probs[(h * rows_q + i) * rows_k..(h * rows_q + i + 1) * rows_k];
            for j in 0..rows_k {
                let v_j = &cache.v[j * d + off..j * d + off + dh];
                dp[j] = dot(d_ctx_i, v_j);
                let w = p_row[j];
                if w != 0.0 {
                    axpy(&mut d_v[j * d + off..j * d + off + dh], w, d_ctx_i);
                }
            }
            softmax_backward_row(&mut ds, p_row, &dp);
            let q_i = &cache.q[i * d + off..i * d + off + dh];
            let d_q_i = &mut d_q[i * d + off..i * d + off + dh];
            for j in 0..rows_k {
                let g = ds[j] * scale;
                if g != 0.0 {
                    axpy(d_q_i, g, &cache.k[j * d + off..j * d + off + dh]);
                    axpy(&mut d_k[j * d + off..j * d + off + dh], g, q_i);
                }
            }
        }
    }

    let d_x_q = p.q.backward(&cache.x_q, &d_q, rows_q, &mut grad.q);
    let mut d_x_kv = p.k.backward(&cache.x_kv, &d_k, rows_k, &mut grad.k);
    let d_x_kv2 = p.v.backward(&cache.x_kv, &d_v, rows_k, &mut grad.v);
    axpy(&mut d_x_kv, 1.0, &d_x_kv2);
    (d_x_q, d_x_kv)
}

// ---------------------------------------------------------------------------
// Encoder stack
// ---------------------------------------------------------------------------

pub(crate) struct EncLayerCache {
    attn: AttnCache,
    drop_attn: Option<Vec<f64>>,
    ln1: LayerNormCache,
    h_mid: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    drop_ff: Option<Vec<f64>>,
    ln2: LayerNormCache,
}

pub(crate) struct EncForward {
    pub input: EncoderInput,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<EncLayerCache>,
    pub states: Vec<f64>,
}

/// Dropout switch: probability plus the RNG that draws the masks.
pub(crate) struct DropCtx<'a> {
    pub p: f64,
    pub rng: &'a mut ChaCha8Rng,
}

impl ApeModel {
    fn embed_encoder(&self, input: &EncoderInput) -> Vec<f64> {
        let d = self.dims.d_model;
        let mut x = vec![0.0; input.len() * d];
        for (i, (&tok, &seg)) in input.tokens.iter().zip(&input.segments).enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(&self.params.embed[tok * d..(tok + 1) * d]);
            axpy(row, 1.0, &self.params.pos[i * d..(i + 1) * d]);
            axpy(row, 1.0, &self.params.seg[seg as usize * d..(seg as usize + 1) * d]);
        }
        x
    }

    pub(crate) fn encode_cached(
        &self,
        input: &EncoderInput,
        mut drop: Option<&mut DropCtx<'_>>,
    ) -> Result<EncForward> {
        if input.len() > self.dims.max_len {
            return Err(PepeError::SequenceTooLong {
                len: input.len(),
                max: self.dims.max_len,
            });
        }
        let d = self.dims.d_model;
        let rows = input.len();
        let mut x = self.embed_encoder(input);
        let emb_drop = match drop.as_deref_mut() {
            Some(ctx) if ctx.p > 0.0 => {
                let m = dropout_mask(x.len(), ctx.p, ctx.rng);
                apply_mask(&mut x, &m);
                Some(m)
            }
            _ => None,
        };

        let mut layers = Vec::with_capacity(self.params.enc.len());
        for layer in &self.params.enc {
            let x_in = x;
            let (mut attn_out, attn_cache) = attn_forward(
                &layer.attn,
                &x_in,
                rows,
                &x_in,
                rows,
                Some(&input.mask),
                false,
                self.dims.n_heads,
                d,
            );
            let drop_attn = match drop.as_deref_mut() {
                Some(ctx) if ctx.p > 0.0 => {
                    let m = dropout_mask(attn_out.len(), ctx.p, ctx.rng);
                    apply_mask(&mut attn_out, &m);
                    Some(m)
                }
                _ => None,
            };
            let mut res1 = x_in.clone();
            axpy(&mut res1, 1.0, &attn_out);
            let (h_mid, ln1) = layer.ln_attn.forward(&res1, rows);

            let ff_pre = layer.ff1.forward(&h_mid, rows);
            let ff_act: Vec<f64> = ff_pre.iter().map(|&v| gelu(v)).collect();
            let mut ff_out = layer.ff2.forward(&ff_act, rows);
            let drop_ff = match drop.as_deref_mut() {
                Some(ctx) if ctx.p > 0.0 => {
                    let m = dropout_mask(ff_out.len(), ctx.p, ctx.rng);
                    apply_mask(&mut ff_out, &m);
                    Some(m)
                }
                _ => None,
            };
            let mut res2 = h_mid.clone();
            axpy(&mut res2, 1.0, &ff_out);
            let (y, ln2) = layer.ln_ff.forward(&res2, rows);

            layers.push(EncLayerCache {
                attn: attn_cache,
                drop_attn,
                ln1,
                h_mid,
                ff_pre,
                ff_act,
                drop_ff,
                ln2,
            });
            x = y;
        }
        Ok(EncForward {
            input: input.clone(),
            emb_drop,
            layers,
            states: x,
        })
    }

    /// Deterministic full-stack encoder pass.
    pub fn encode(&self, input: &EncoderInput) -> Result<EncStates> {
        let fwd = self.encode_cached(input, None)?;
        Ok(EncStates {
            h: fwd.states,
            rows: input.len(),
            mask: input.mask.clone(),
        })
    }

    /// Backward through the encoder stack and its embeddings.
    pub(crate) fn encoder_backward(
        &self,
        fwd: &EncForward,
        d_states: &[f64],
        grads: &mut ParamSet,
    ) {
        let d = self.dims.d_model;
        let rows = fwd.input.len();
        let mut dy = d_states.to_vec();
        for i in (0..self.params.enc.len()).rev() {
            let layer = &self.params.enc[i];
            let cache = &fwd.layers[i];
            let g = &mut grads.enc[i];

            let d_res2 = layer.ln_ff.backward(&cache.ln2, &dy, rows, &mut g.ln_ff);
            let mut d_ff_out = d_res2.clone();
            if let Some(m) = &cache.drop_ff {
                apply_mask(&mut d_ff_out, m);
            }
            let d_ff_act = layer.ff2.backward(&cache.ff_act, &d_ff_out, rows, &mut g.ff2);
            let d_ff_pre: Vec<f64> = d_ff_act
                .iter()
                .zip(&cache.ff_pre)
                .map(|(&g_, &x)| g_ * gelu_grad(x))
                .collect();
            let mut d_h_mid = layer.ff1.backward(&cache.h_mid, &d_ff_pre, rows, &mut g.ff1);
            axpy(&mut d_h_mid, 1.0, &d_res2); // residual

            let d_res1 = layer.ln_attn.backward(&cache.ln1, &d_h_mid, rows, &mut g.ln_attn);
            let mut d_attn_out = d_res1.clone();
            if let Some(m) = &cache.drop_attn {
                apply_mask(&mut d_attn_out, m);
            }
            let (d_x_q, d_x_kv) = attn_backward(
                &layer.attn,
                &cache.attn,
                &d_attn_out,
                self.dims.n_heads,
                d,
                &mut g.attn,
            );
            let mut d_x = d_res1; // residual
            axpy(&mut d_x, 1.0, &d_x_q);
            axpy(&mut d_x, 1.0, &d_x_kv);
            dy = d_x;
        }
        if let Some(m) = &fwd.emb_drop {
            apply_mask(&mut dy, m);
        }
        for (i, (&tok, &seg)) in fwd.input.tokens.iter().zip(&fwd.input.segments).enumerate() {
            let g_row = &dy[i * d..(i + 1) * d];
            axpy(&mut grads.embed[tok * d..(tok + 1) * d], 1.0, g_row);
            axpy(&mut grads.pos[i * d..(i + 1) * d], 1.0, g_row);
            axpy(
                &mut grads.seg[seg as usize * d..(seg as usize + 1) * d],
                1.0,
                g_row,
            );
        }
    }
}

// ---------------------------------------------------------------------------
// Decoder stack
// ---------------------------------------------------------------------------

pub(crate) struct DecLayerCache {
    self_attn: AttnCache,
    drop_self: Option<Vec<f64>>,
    ln1: LayerNormCache,
    cross: AttnCache,
    drop_cross: Option<Vec<f64>>,
    ln2: LayerNormCache,
    h_cross: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    drop_ff: Option<Vec<f64>>,
    ln3: LayerNormCache,
}

pub(crate) struct DecForward {
    pub tokens: Vec<TokenId>,
    emb_drop: Option<Vec<f64>>,
    layers: Vec<DecLayerCache>,
    pub states: Vec<f64>,
}

impl ApeModel {
    fn embed_decoder(&self, tokens: &[TokenId]) -> Vec<f64> {
        let d = self.dims.d_model;
        let mut x = vec![0.0; tokens.len() * d];
        for (i, &tok) in tokens.iter().enumerate() {
            let row = &mut x[i * d..(i + 1) * d];
            row.copy_from_slice(&self.params.embed[tok * d..(tok + 1) * d]);
            axpy(row, 1.0, &self.params.pos[i * d..(i + 1) * d]);
        }
        x
    }

    /// Causal decoder pass over `prefix` (must begin with `[BOS]`).
    pub(crate) fn decode_cached(
        &self,
        enc: &EncStates,
        prefix: &[TokenId],
        mut drop: Option<&mut DropCtx<'_>>,
    ) -> Result<DecForward> {
        if prefix.len() > self.dims.max_len {
            return Err(PepeError::SequenceTooLong {
                len: prefix.len(),
                max: self.dims.max_len,
            });
        }
        let d = self.dims.d_model;
        let rows = prefix.len();
        let mut x = self.embed_decoder(prefix);
        let emb_drop = match drop.as_deref_mut() {
            Some(ctx) if ctx.p > 0.0 => {
                let m = dropout_mask(x.len(), ctx.p, ctx.rng);
                apply_mask(&mut x, &m);
                Some(m)
            }
            _ => None,
        };

        let mut layers = Vec::with_capacity(self.params.dec.len());
        for layer in &self.params.dec {
            let x_in = x;
            let (mut self_out, self_cache) = attn_forward(
                &layer.self_attn,
                &x_in,
                rows,
                &x_in,
                rows,
                None,
                true,
                self.dims.n_heads,
                d,
            );
            let drop_self = match drop.as_deref_mut() {
                Some(ctx) if ctx.p > 0.0 => {
                    let m = dropout_mask(self_out.len(), ctx.p, ctx.rng);
                    apply_mask(&mut self_out, &m);
                    Some(m)
                }
                _ => None,
            };
            let mut res1 = x_in.clone();
            axpy(&mut res1, 1.0, &self_out);
            let (h_self, ln1) = layer.ln_self.forward(&res1, rows);

            let (mut cross_out, cross_cache) = attn_forward(
                &layer.cross_attn,
                &h_self,
                rows,
                &enc.h,
                enc.rows,
                Some(&enc.mask),
                false,
                self.dims.n_heads,
                d,
            );
            let drop_cross = match drop.as_deref_mut() {
                Some(ctx) if ctx.p > 0.0 => {
                    let m = dropout_mask(cross_out.len(), ctx.p, ctx.rng);
                    apply_mask(&mut cross_out, &m);
                    Some(m)
                }
                _ => None,
            };
            let mut res2 = h_self.clone();
            axpy(&mut res2, 1.0, &cross_out);
            let (h_cross, ln2) = layer.ln_cross.forward(&res2, rows);

            let ff_pre = layer.ff1.forward(&h_cross, rows);
            let ff_act: Vec<f64> = ff_pre.iter().map(|&v| gelu(v)).collect();
            let mut ff_out = layer.ff2.forward(&ff_act, rows);
            let drop_ff = match drop.as_deref_mut() {
                Some(ctx) if ctx.p > 0.0 => {
                    let m = dropout_mask(ff_out.len(), ctx.p, ctx.rng);
                    apply_mask(&mut ff_out, &m);
                    Some(m)
                }
                _ => None,
            };
            let mut res3 = h_cross.clone();
            axpy(&mut res3, 1.0, &ff_out);
            let (y, ln3) = layer.ln_ff.forward(&res3, rows);

            layers.push(DecLayerCache {
                self_attn: self_cache,
                drop_self,
                ln1,
                cross: cross_cache,
                drop_cross,
                ln2,
                h_cross,
                ff_pre,
                ff_act,
                drop_ff,
                ln3,
            });
            x = y;
        }
        Ok(DecForward {
            tokens: prefix.to_vec(),
            emb_drop,
            layers,
            states: x,
        })
    }

    /// Backward through the decoder; returns the gradient w.r.t. the encoder
    /// states accumulated across every cross-attention layer.
    pub(crate) fn decoder_backward(
        &self,
        fwd: &DecForward,
        enc_rows: usize,
        d_states: &[f64],
        grads: &mut ParamSet,
    ) -> Vec<f64> {
        let d = self.dims.d_model;
        let rows = fwd.tokens.len();
        let mut d_enc = vec![0.0; enc_rows * d];
        let mut dy = d_states.to_vec();
        for i in (0..self.params.dec.len()).rev() {
            let layer = &self.params.dec[i];
            let cache = &fwd.layers[i];
            let g = &mut grads.dec[i];

            let d_res3 = layer.ln_ff.backward(&cache.ln3, &dy, rows, &mut g.ln_ff);
            let mut d_ff_out = d_res3.clone();
            if let Some(m) = &cache.drop_ff {
                apply_mask(&mut d_ff_out, m);
            }
            let d_ff_act = layer.ff2.backward(&cache.ff_act, &d_ff_out, rows, &mut g.ff2);
            let d_ff_pre: Vec<f64> = d_ff_act
                .iter()
                .zip(&cache.ff_pre)
                .map(|(&g_, &x)| g_ * gelu_grad(x))
                .collect();
            let mut d_h_cross = layer.ff1.backward(&cache.h_cross, &d_ff_pre, rows, &mut g.ff1);
            axpy(&mut d_h_cross, 1.0, &d_res3);

            let d_res2 = layer.ln_cross.backward(&cache.ln2, &d_h_cross, rows, &mut g.ln_cross);
            let mut d_cross_out = d_res2.clone();
            if let Some(m) = &cache.drop_cross {
                apply_mask(&mut d_cross_out, m);
            }
            let (d_h_self_q, d_enc_part) = attn_backward(
                &layer.cross_attn,
                &cache.cross,
                &d_cross_out,
                self.dims.n_heads,
                d,
                &mut g.cross_attn,
            );
            axpy(&mut d_enc, 1.0, &d_enc_part);
            let mut d_h_self = d_res2;
            axpy(&mut d_h_self, 1.0, &d_h_self_q);

            let d_res1 = layer.ln_self.backward(&cache.ln1, &d_h_self, rows, &mut g.ln_self);
            let mut d_self_out = d_res1.clone();
            if let Some(m) = &cache.drop_self {
                apply_mask(&mut d_self_out, m);
            }
            let (d_x_q, d_x_kv) = attn_backward(
                &layer.self_attn,
                &cache.self_attn,
                &d_self_out,
                self.dims.n_heads,
                d,
                &mut g.self_attn,
            );
            let mut d_x = d_res1;
            axpy(&mut d_x, 1.0, &d_x_q);
            axpy(&mut d_x, 1.0, &d_x_kv);
            dy = d_x;
        }
        if let Some(m) = &fwd.emb_drop {
            apply_mask(&mut dy, m);
        }
        for (i, &tok) in fwd.tokens.iter().enumerate() {
            let g_row = &dy[i * d..(i + 1) * d];
            axpy(&mut grads.embed[tok * d..(tok + 1) * d], 1.0, g_row);
            axpy(&mut grads.pos[i * d..(i + 1) * d], 1.0, g_row);
        }
        d_enc
    }
}

// ---------------------------------------------------------------------------
// Output distribution and sequence scoring
// ---------------------------------------------------------------------------

/// Which additive output bias to apply at the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BiasSel {
    /// User-agnostic: the zero vector.
    None,
    /// The registered user's row (full U or factorized, as present).
    User(usize),
}

impl ApeModel {
    /// Raw pre-softmax logits for each decoder row.
    pub fn project_logits(&self, dec_states: &[f64], rows: usize, bias: BiasSel) -> Vec<f64> {
        let mut logits = self.params.out_proj.forward(dec_states, rows);
        if let BiasSel::User(row) = bias {
            let theta = self.effective_user_bias(row);
            let v = self.dims.vocab;
            for r in 0..rows {
                axpy(&mut logits[r * v..(r + 1) * v], 1.0, &theta);
            }
        }
        logits
    }

    fn bias_for_user(&self, user_id: Option<&str>) -> Result<BiasSel> {
        match user_id {
            None => Ok(BiasSel::None),
            Some(u) => Ok(BiasSel::User(self.user_row(u)?)),
        }
    }

    /// Next-token distribution after `prefix` given the encoded pair.
    /// An absent user means the zero bias vector; an unregistered user id is
    /// an error.
    pub fn decode_distribution(
        &self,
        enc: &EncStates,
        prefix: &[TokenId],
        user_id: Option<&str>,
    ) -> Result<Vec<f64>> {
        let bias = self.bias_for_user(user_id)?;
        let fwd = self.decode_cached(enc, prefix, None)?;
        let rows = prefix.len();
        let d = self.dims.d_model;
        let last = &fwd.states[(rows - 1) * d..rows * d];
        let mut logits = self.project_logits(last, 1, bias);
        softmax_in_place(&mut logits);
        Ok(logits)
    }

    /// Teacher-forced log-probabilities of `targets` given a decoder input.
    pub fn teacher_forced_log_probs(
        &self,
        enc: &EncStates,
        dec_input: &[TokenId],
        targets: &[TokenId],
        bias: BiasSel,
    ) -> Result<Vec<f64>> {
        debug_assert_eq!(dec_input.len(), targets.len());
        let fwd = self.decode_cached(enc, dec_input, None)?;
        let logits = self.project_logits(&fwd.states, dec_input.len(), bias);
        let v = self.dims.vocab;
        Ok(targets
            .iter()
            .enumerate()
            .map(|(i, &t)| log_softmax(&logits[i * v..(i + 1) * v])[t])
            .collect())
    }

    /// Σ_i log P(pe_i | src, mt, pe_<i) with one encoder pass and a
    /// teacher-forced decoder; the target sequence is `pe` followed by EOS.
    pub fn sequence_log_prob(
        &self,
        sp: SpecialIds,
        src: &[TokenId],
        mt: &[TokenId],
        pe: &[TokenId],
        user_id: Option<&str>,
    ) -> Result<f64> {
        let bias = self.bias_for_user(user_id)?;
        let enc = self.encode(&EncoderInput::from_src_mt(src, mt, sp))?;
        let mut dec_input = Vec::with_capacity(pe.len() + 1);
        dec_input.push(sp.bos);
        dec_input.extend_from_slice(pe);
        let mut targets = pe.to_vec();
        targets.push(sp.eos);
        Ok(self
            .teacher_forced_log_probs(&enc, &dec_input, &targets, bias)?
            .iter()
            .sum())
    }

    /// Cluster probabilities from the discriminator head on a CLS state.
    pub fn discriminate(&self, cls_state: &[f64]) -> Vec<f64> {
        let mut logits = self.params.disc.forward(cls_state, 1);
        softmax_in_place(&mut logits);
        logits
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vocab::Vocabulary;

    pub(crate) fn tiny_dims(vocab: usize, users: usize) -> Dims {
        Dims {
            d_model: 16,
            n_heads: 2,
            d_ff: 32,
            enc_layers: 1,
            dec_layers: 1,
            vocab,
            users,
            clusters: 3,
            max_len: 24,
            factor_rank: 2,
        }
    }

    pub(crate) fn tiny_vocab() -> Vocabulary {
        let mut toks: Vec<String> = [
            crate::vocab::PAD,
            crate::vocab::UNK,
            crate::vocab::CLS,
            crate::vocab::SEP,
            crate::vocab::BOS,
            crate::vocab::EOS,
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        for i in 0..14 {
            toks.push(format!("w{i}"));
        }
        Vocabulary::new(toks).unwrap()
    }

    pub(crate) fn tiny_model(seed: u64) -> (ApeModel, Vocabulary) {
        let vocab = tiny_vocab();
        let dims = tiny_dims(vocab.len(), 3);
        let model = ApeModel::init(
            dims,
            vec!["a".into(), "b".into(), "c".into()],
            vocab.digest(),
            seed,
            false,
            false,
        )
        .unwrap();
        (model, vocab)
    }

    #[test]
    fn encoder_output_shape_and_determinism() {
        let (model, vocab) = tiny_model(1);
        let sp = vocab.specials();
        let input = EncoderInput::from_src_mt(&[6, 7, 8], &[9, 10], sp);
        let a = model.encode(&input).unwrap();
        let b = model.encode(&input).unwrap();
        assert_eq!(a.h.len(), input.len() * model.dims.d_model);
        assert_eq!(a.h, b.h);
    }

    #[test]
    fn pad_token_ids_do_not_leak_into_real_positions() {
        let (model, vocab) = tiny_model(2);
        let sp = vocab.specials();
        let base = EncoderInput::from_src_mt(&[6, 7], &[8], sp);
        let real = base.len();
        let padded_a = base.clone().pad_to(real + 3, sp.pad);
        let mut padded_b = padded_a.clone();
        for t in padded_b.tokens[real..].iter_mut() {
            *t = 11; // different ids at masked positions
        }
        let ha = model.encode(&padded_a).unwrap();
        let hb = model.encode(&padded_b).unwrap();
        let d = model.dims.d_model;
        assert_eq!(ha.h[..real * d], hb.h[..real * d]);
    }

    #[test]
    fn zero_user_bias_matches_user_agnostic_distribution() {
        let (model, vocab) = tiny_model(3);
        let sp = vocab.specials();
        let enc = model
            .encode(&EncoderInput::from_src_mt(&[6, 7, 8], &[9], sp))
            .unwrap();
        let with_user = model.decode_distribution(&enc, &[sp.bos, 6], Some("b")).unwrap();
        let without = model.decode_distribution(&enc, &[sp.bos, 6], None).unwrap();
        assert_eq!(with_user, without);
    }

    #[test]
    fn unregistered_user_is_an_error_absent_is_not() {
        let (model, vocab) = tiny_model(4);
        let sp = vocab.specials();
        let enc = model
            .encode(&EncoderInput::from_src_mt(&[6], &[7], sp))
            .unwrap();
        assert!(model.decode_distribution(&enc, &[sp.bos], None).is_ok());
        assert!(matches!(
            model.decode_distribution(&enc, &[sp.bos], Some("nope")),
            Err(PepeError::UnregisteredUser(_))
        ));
    }

    #[test]
    fn constant_shift_of_user_bias_leaves_distribution_unchanged() {
        let (mut model, vocab) = tiny_model(5);
        let sp = vocab.specials();
        let v = model.dims.vocab;
        for (j, val) in model.params.user_bias[..v].iter_mut().enumerate() {
            *val = (j as f64 * 0.37).sin();
        }
        let enc = model
            .encode(&EncoderInput::from_src_mt(&[6, 9], &[10], sp))
            .unwrap();
        let before = model.decode_distribution(&enc, &[sp.bos], Some("a")).unwrap();
        for val in model.params.user_bias[..v].iter_mut() {
            *val += 3.5;
        }
        let after = model.decode_distribution(&enc, &[sp.bos], Some("a")).unwrap();
        for (x, y) in before.iter().zip(&after) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_delta_shows_up_as_exact_probability_ratio() {
        // Two users whose rows differ by +delta at one token: the probability
        // ratio at that token must be exp(delta).
        let (mut model, vocab) = tiny_model(6);
        let sp = vocab.specials();
        let v = model.dims.vocab;
        let delta = 0.8;
        model.params.user_bias[v + 7] = delta; // user "b", token 7
        let enc = model
            .encode(&EncoderInput::from_src_mt(&[6, 8], &[9], sp))
            .unwrap();
        let pa = model.decode_distribution(&enc, &[sp.bos], Some("a")).unwrap();
        let pb = model.decode_distribution(&enc, &[sp.bos], Some("b")).unwrap();
        // softmax(l + delta·e7) / softmax(l) at index 7, corrected for the
        // normalizer ratio, reduces to exp(delta) when compared via odds.
        let odds_a = pa[7] / (1.0 - pa[7]);
        let odds_b = pb[7] / (1.0 - pb[7]);
        assert!(((odds_b / odds_a) - delta.exp()).abs() < 1e-9);
    }

    #[test]
    fn sequence_log_prob_is_chain_rule_consistent() {
        let (model, vocab) = tiny_model(7);
        let sp = vocab.specials();
        let (src, mt, pe) = (vec![6, 7], vec![8, 9], vec![10, 11]);
        let total = model
            .sequence_log_prob(sp, &src, &mt, &pe, Some("a"))
            .unwrap();

        let enc = model
            .encode(&EncoderInput::from_src_mt(&src, &mt, sp))
            .unwrap();
        let mut prefix = vec![sp.bos];
        let mut stepwise = 0.0;
        for &target in pe.iter().chain(std::iter::once(&sp.eos)) {
            let dist = model.decode_distribution(&enc, &prefix, Some("a")).unwrap();
            stepwise += dist[target].ln();
            prefix.push(target);
        }
        assert!((total - stepwise).abs() < 1e-9);
    }

    #[test]
    fn single_token_pe_equals_distribution_entry() {
        let (model, vocab) = tiny_model(8);
        let sp = vocab.specials();
        let enc = model
            .encode(&EncoderInput::from_src_mt(&[6], &[7], sp))
            .unwrap();
        // P(pe = [10]) = P(10 | BOS) * P(EOS | BOS, 10)
        let d0 = model.decode_distribution(&enc, &[sp.bos], None).unwrap();
        let d1 = model
            .decode_distribution(&enc, &[sp.bos, 10], None)
            .unwrap();
        let lp = model
            .sequence_log_prob(sp, &[6], &[7], &[10], None)
            .unwrap();
        assert!((lp - (d0[10].ln() + d1[sp.eos].ln())).abs() < 1e-9);
    }

    #[test]
    fn toy_model_distributions_normalize_over_all_sequences() {
        // On a V=5-effective toy: sum over all length-2 token pairs of
        // P(t1)·P(t2|t1) followed by nothing must equal 1 when EOS handling
        // is ignored, i.e. each step distribution sums to 1.
        let (model, vocab) = tiny_model(9);
        let sp = vocab.specials();
        let enc = model
            .encode(&EncoderInput::from_src_mt(&[6, 7], &[8], sp))
            .unwrap();
        let d0 = model.decode_distribution(&enc, &[sp.bos], None).unwrap();
        assert!((d0.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        let mut total = 0.0;
        for t1 in 0..model.dims.vocab {
            let d1 = model
                .decode_distribution(&enc, &[sp.bos, t1], None)
                .unwrap();
            assert!((d1.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            total += d0[t1];
        }
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn causality_later_target_tokens_do_not_affect_earlier_steps() {
        let (model, vocab) = tiny_model(10);
        let sp = vocab.specials();
        let enc = model
            .encode(&EncoderInput::from_src_mt(&[6, 7], &[8, 9], sp))
            .unwrap();
        let a = model
            .teacher_forced_log_probs(&enc, &[sp.bos, 10, 11], &[10, 11, sp.eos], BiasSel::None)
            .unwrap();
        let b = model
            .teacher_forced_log_probs(&enc, &[sp.bos, 10, 12], &[10, 12, sp.eos], BiasSel::None)
            .unwrap();
        assert!((a[0] - b[0]).abs() < 1e-12, "step 0 must ignore later tokens");
    }

    #[test]
    fn discriminator_zero_weights_give_uniform() {
        let (mut model, _vocab) = tiny_model(11);
        model.params.disc = Linear::zeros(model.dims.d_model, model.dims.clusters);
        let cls = vec![0.3; model.dims.d_model];
        let p = model.discriminate(&cls);
        for v in &p {
            assert!((v - 1.0 / model.dims.clusters as f64).abs() < 1e-12);
        }
        assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sequence_too_long_is_reported() {
        let (model, vocab) = tiny_model(12);
        let sp = vocab.specials();
        let long = vec![6; 30];
        let input = EncoderInput::from_src_mt(&long, &[7], sp);
        assert!(matches!(
            model.encode(&input),
            Err(PepeError::SequenceTooLong { .. })
        ));
    }
}

