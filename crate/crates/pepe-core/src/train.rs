//! Training: the post-editing loss with label smoothing, the discriminator
//! loss behind a gradient-reversal layer, their β-mixed combination, AdamW
//! with linear warmup and gradient accumulation, task-adaptive pretraining,
//! and every baseline variant of the comparison table.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Triplet};
use crate::error::{PepeError, Result};
use crate::eval;
use crate::model::{ApeModel, BiasSel, DropCtx, EncStates, EncoderInput, ParamSet};
use crate::tensor::{axpy, gauss, softmax_in_place, Linear};
use crate::vocab::{TokenId, Vocabulary};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// Model configurations of the comparison table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// The raw machine translation; nothing is trained.
    Uncorrected,
    /// Dual-source backbone only.
    DsBert,
    /// Backbone plus per-user output bias rows.
    FullBias,
    /// Backbone plus factorized bias v_u · B.
    FactorBias,
    /// Backbone plus a user-classification head on CLS (standard gradient).
    UserCls,
    /// Backbone with the user's reserved token prepended to the target.
    UserToken,
    /// Full bias plus the cluster discriminator behind gradient reversal.
    Pepe,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Uncorrected,
        Variant::DsBert,
        Variant::FullBias,
        Variant::FactorBias,
        Variant::UserCls,
        Variant::UserToken,
        Variant::Pepe,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Variant::Uncorrected => "uncorrected",
            Variant::DsBert => "ds_bert",
            Variant::FullBias => "full_bias",
            Variant::FactorBias => "factor_bias",
            Variant::UserCls => "user_cls",
            Variant::UserToken => "user_token",
            Variant::Pepe => "pepe",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.name() == name)
            .ok_or_else(|| PepeError::Config(format!("unknown variant {name:?}")))
    }

    pub fn uses_user_bias(&self) -> bool {
        matches!(self, Variant::FullBias | Variant::Pepe)
    }

    pub fn uses_factor(&self) -> bool {
        matches!(self, Variant::FactorBias)
    }

    pub fn uses_disc(&self) -> bool {
        matches!(self, Variant::Pepe)
    }

    pub fn uses_user_cls(&self) -> bool {
        matches!(self, Variant::UserCls)
    }

    pub fn uses_user_token(&self) -> bool {
        matches!(self, Variant::UserToken)
    }

    /// Whether the optimizer may touch a tensor under this variant.
    pub fn trains(&self, tensor: &str) -> bool {
        let backbone = !tensor.starts_with("user_bias")
            && !tensor.starts_with("factor.")
            && !tensor.starts_with("user_cls.")
            && !tensor.starts_with("disc.");
        match self {
            Variant::Uncorrected => false,
            Variant::DsBert | Variant::UserToken => backbone,
            Variant::FullBias => backbone || tensor == "user_bias",
            Variant::FactorBias => backbone || tensor.starts_with("factor."),
            Variant::UserCls => backbone || tensor.starts_with("user_cls."),
            Variant::Pepe => {
                backbone || tensor == "user_bias" || tensor.starts_with("disc.")
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    AdamW,
    /// Plain gradient descent; used by first-order sanity checks.
    Sgd,
}

/// Every training hyperparameter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Adjustment rate mixing the discriminator loss into the objective.
    pub beta: f64,
    /// Cluster count (discriminator classes).
    pub k: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub accumulation_steps: usize,
    pub label_smoothing: f64,
    pub dropout: f64,
    pub max_epochs: usize,
    /// Early-stopping patience on validation TER.
    pub patience: usize,
    pub seed: u64,
    pub variant: Variant,
    /// Rank of the factorized bias.
    pub factor_rank: usize,
    /// Gradient-reversal strength.
    pub grl_lambda: f64,
    pub weight_decay: f64,
    /// Fraction of total optimizer steps spent in linear warmup.
    pub warmup_frac: f64,
    pub optimizer: OptimizerKind,
    /// Decoding settings for validation-time TER.
    pub beam_size: usize,
    pub max_decode_len: usize,
    pub pretrain_epochs: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            beta: 0.3,
            k: 10,
            learning_rate: 1e-3,
            batch_size: 32,
            accumulation_steps: 2,
            label_smoothing: 0.1,
            dropout: 0.1,
            max_epochs: 12,
            patience: 3,
            seed: 42,
            variant: Variant::Pepe,
            factor_rank: 4,
            grl_lambda: 1.0,
            weight_decay: 0.01,
            warmup_frac: 0.05,
            optimizer: OptimizerKind::AdamW,
            beam_size: 3,
            max_decode_len: 24,
            pretrain_epochs: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.beta) {
            return Err(PepeError::Config("beta must lie in [0, 1]".into()));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(PepeError::Config("label smoothing must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 || self.accumulation_steps == 0 {
            return Err(PepeError::Config("batch size and accumulation must be >= 1".into()));
        }
        if self.factor_rank == 0 {
            return Err(PepeError::Config("factor rank must be >= 1".into()));
        }
        if self.grl_lambda < 0.0 {
            return Err(PepeError::Config("grl lambda must be >= 0".into()));
        }
        if self.k == 0 {
            return Err(PepeError::Config("k must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(PepeError::Config("dropout must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Gradient reversal
// ---------------------------------------------------------------------------

/// Identity forward; backward multiplies the upstream gradient by −λ.
#[derive(Debug, Clone, Copy)]
pub struct GradientReversal {
    pub lambda: f64,
}

impl GradientReversal {
    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        upstream.iter().map(|g| -self.lambda * g).collect()
    }
}

// ---------------------------------------------------------------------------
// Sequence preparation
// ---------------------------------------------------------------------------

/// One teacher-forced training example.
#[derive(Debug, Clone)]
pub struct PreparedSeq {
    pub enc_input: EncoderInput,
    pub dec_input: Vec<TokenId>,
    pub targets: Vec<TokenId>,
    /// Bias row (full or factor variants).
    pub user_row: Option<usize>,
    /// Row of the user-classification head (user_cls variant).
    pub cls_user_row: Option<usize>,
    /// Frozen cluster label (pepe variant).
    pub label: Option<usize>,
}

/// Assemble the variant-appropriate encoder/decoder views of a triplet.
pub fn prepare_seq(
    model: &ApeModel,
    vocab: &Vocabulary,
    triplet: &Triplet,
    label: Option<usize>,
    variant: Variant,
) -> Result<PreparedSeq> {
    let sp = vocab.specials();
    let enc_input = EncoderInput::from_src_mt(&triplet.src, &triplet.mt, sp);
    let user_row = if variant.uses_user_bias() || variant.uses_factor() {
        Some(model.user_row(&triplet.user_id)?)
    } else {
        None
    };
    let cls_user_row = if variant.uses_user_cls() {
        Some(model.user_row(&triplet.user_id)?)
    } else {
        None
    };

    let mut target_seq: Vec<TokenId> = Vec::with_capacity(triplet.pe.len() + 2);
    if variant.uses_user_token() {
        let tok = vocab.user_token_id(&triplet.user_id).ok_or_else(|| {
            PepeError::VocabMissingToken {
                token: crate::vocab::user_token_surface(&triplet.user_id),
            }
        })?;
        target_seq.push(tok);
    }
    target_seq.extend_from_slice(&triplet.pe);

    let mut dec_input = Vec::with_capacity(target_seq.len() + 1);
    dec_input.push(sp.bos);
    dec_input.extend_from_slice(&target_seq);
    let mut targets = target_seq;
    targets.push(sp.eos);

    if variant.uses_disc() {
        let l = label.ok_or_else(|| PepeError::MissingStage {
            stage: "cluster".into(),
            msg: "pepe needs frozen cluster labels".into(),
        })?;
        if l >= model.dims.clusters {
            return Err(PepeError::LabelOutOfRange {
                label: l,
                k: model.dims.clusters,
            });
        }
    } else if label.is_some() {
        return Err(PepeError::VariantMismatch {
            variant: variant.name().into(),
            feature: "cluster labels".into(),
        });
    }

    Ok(PreparedSeq {
        enc_input,
        dec_input,
        targets,
        user_row,
        cls_user_row,
        label: if variant.uses_disc() { label } else { None },
    })
}

// ---------------------------------------------------------------------------
// Losses and gradients
// ---------------------------------------------------------------------------

/// Loss components of one optimizer step (means over the consumed batch).
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossParts {
    pub ape: f64,
    pub disc: f64,
    pub train: f64,
}

impl LossParts {
    fn mix(ape: f64, disc: f64, beta: f64, mixed: bool) -> Self {
        let train = if mixed { beta * disc + (1.0 - beta) * ape } else { ape };
        Self { ape, disc, train }
    }
}

fn smoothed_ce_row(probs: &[f64], target: usize, eps: f64) -> f64 {
    let v = probs.len() as f64;
    let mut ce = 0.0;
    for (j, &p) in probs.iter().enumerate() {
        let q = eps / v + if j == target { 1.0 - eps } else { 0.0 };
        if q != 0.0 {
            ce -= q * p.max(1e-300).ln();
        }
    }
    ce
}

fn bias_sel(seq: &PreparedSeq) -> BiasSel {
    match seq.user_row {
        Some(r) => BiasSel::User(r),
        None => BiasSel::None,
    }
}

/// Whether the β-mixed objective applies and its auxiliary path.
fn mixing(cfg: &TrainConfig) -> (bool, bool) {
    let disc = cfg.variant.uses_disc() && cfg.beta > 0.0;
    let cls = cfg.variant.uses_user_cls() && cfg.beta > 0.0;
    (disc, cls)
}

/// Forward-only loss evaluation (no dropout), shared by the finite-difference
/// audits.
pub fn batch_loss(model: &ApeModel, seqs: &[PreparedSeq], cfg: &TrainConfig) -> Result<LossParts> {
    let pad = usize::MAX; // no pad id available here; targets never contain PAD in prepared seqs
    let _ = pad;
    let (use_disc, use_cls) = mixing(cfg);
    let ape_on = cfg.beta < 1.0 || !(use_disc || use_cls);
    let v = model.dims.vocab;

    let mut ce_sum = 0.0;
    let mut tokens = 0usize;
    let mut aux_sum = 0.0;
    for seq in seqs {
        let enc_fwd = model.encode_cached(&seq.enc_input, None)?;
        let enc = EncStates {
            h: enc_fwd.states.clone(),
            rows: seq.enc_input.len(),
            mask: seq.enc_input.mask.clone(),
        };
        if ape_on {
            let dec_fwd = model.decode_cached(&enc, &seq.dec_input, None)?;
            let logits = model.project_logits(&dec_fwd.states, seq.dec_input.len(), bias_sel(seq));
            for (i, &target) in seq.targets.iter().enumerate() {
                let mut probs = logits[i * v..(i + 1) * v].to_vec();
                softmax_in_place(&mut probs);
                ce_sum += smoothed_ce_row(&probs, target, cfg.label_smoothing);
                tokens += 1;
            }
        }
        if use_disc {
            let p = model.discriminate(enc.cls(model.dims.d_model));
            aux_sum -= p[seq.label.expect("validated")].max(1e-300).ln();
        } else if use_cls {
            let head = model.params.user_cls.as_ref().expect("user_cls params");
            let mut p = head.forward(enc.cls(model.dims.d_model), 1);
            softmax_in_place(&mut p);
            aux_sum -= p[seq.cls_user_row.expect("validated")].max(1e-300).ln();
        }
    }
    let ape = if tokens > 0 { ce_sum / tokens as f64 } else { 0.0 };
    let aux = if seqs.is_empty() { 0.0 } else { aux_sum / seqs.len() as f64 };
    Ok(LossParts::mix(ape, aux, cfg.beta, use_disc || use_cls))
}

/// Forward+backward over one micro-batch. Returns the loss parts and the
/// gradient of `L_Train` w.r.t. every parameter.
pub fn batch_gradients(
    model: &ApeModel,
    seqs: &[PreparedSeq],
    cfg: &TrainConfig,
    mut dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<(LossParts, ParamSet)> {
    let (use_disc, use_cls) = mixing(cfg);
    let ape_on = cfg.beta < 1.0 || !(use_disc || use_cls);
    let mixed = use_disc || use_cls;
    let v = model.dims.vocab;
    let d = model.dims.d_model;
    let eps = cfg.label_smoothing;
    let grl = GradientReversal { lambda: cfg.grl_lambda };

    let mut grads = model.params.zeros_like(&model.dims);

    let total_tokens: usize = if ape_on {
        seqs.iter().map(|s| s.targets.len()).sum()
    } else {
        0
    };
    let ape_scale = if total_tokens > 0 {
        (if mixed { 1.0 - cfg.beta } else { 1.0 }) / total_tokens as f64
    } else {
        0.0
    };
    let aux_scale = if mixed && !seqs.is_empty() {
        cfg.beta / seqs.len() as f64
    } else {
        0.0
    };

    let mut ce_sum = 0.0;
    let mut aux_sum = 0.0;

    for seq in seqs {
        let mut drop_ctx;
        let mut drop_ref: Option<&mut DropCtx> = None;
        if let Some(rng) = dropout_rng.as_deref_mut() {
            if cfg.dropout > 0.0 {
                drop_ctx = DropCtx { p: cfg.dropout, rng };
                drop_ref = Some(&mut drop_ctx);
            }
        }
        let enc_fwd = model.encode_cached(&seq.enc_input, drop_ref.as_deref_mut())?;
        let enc = EncStates {
            h: enc_fwd.states.clone(),
            rows: seq.enc_input.len(),
            mask: seq.enc_input.mask.clone(),
        };

        let mut d_enc = vec![0.0; enc.rows * d];

        if ape_on {
            let dec_fwd = model.decode_cached(&enc, &seq.dec_input, drop_ref.as_deref_mut())?;
            let rows = seq.dec_input.len();
            let logits = model.project_logits(&dec_fwd.states, rows, bias_sel(seq));
            let mut d_logits = vec![0.0; rows * v];
            for (i, &target) in seq.targets.iter().enumerate() {
                let mut probs = logits[i * v..(i + 1) * v].to_vec();
                softmax_in_place(&mut probs);
                ce_sum += smoothed_ce_row(&probs, target, eps);
                let dl = &mut d_logits[i * v..(i + 1) * v];
                for (j, &p) in probs.iter().enumerate() {
                    let q = eps / v as f64 + if j == target { 1.0 - eps } else { 0.0 };
                    dl[j] = (p - q) * ape_scale;
                }
            }

            // Through the output projection and the user bias.
            let d_dec_states =
                model
                    .params
                    .out_proj
                    .backward(&dec_fwd.states, &d_logits, rows, &mut grads.out_proj);
            if let Some(row) = seq.user_row {
                let mut col_sum = vec![0.0; v];
                for r in 0..rows {
                    axpy(&mut col_sum, 1.0, &d_logits[r * v..(r + 1) * v]);
                }
                match (&model.params.factor, &mut grads.factor) {
                    (Some(f), Some(gf)) => {
                        let rank = model.dims.factor_rank;
                        for rho in 0..rank {
                            let basis_row = &f.basis[rho * v..(rho + 1) * v];
                            gf.user_vec[row * rank + rho] +=
                                crate::tensor::dot(basis_row, &col_sum);
                            let vu = f.user_vec[row * rank + rho];
                            if vu != 0.0 {
                                axpy(&mut gf.basis[rho * v..(rho + 1) * v], vu, &col_sum);
                            }
                        }
                    }
                    _ => {
                        axpy(&mut grads.user_bias[row * v..(row + 1) * v], 1.0, &col_sum);
                    }
                }
            }

            let d_enc_from_dec =
                model.decoder_backward(&dec_fwd, enc.rows, &d_dec_states, &mut grads);
            axpy(&mut d_enc, 1.0, &d_enc_from_dec);
        }

        // Auxiliary CLS-state path: discriminator (reversed into the encoder)
        // or user classification (standard gradient).
        if use_disc {
            let cls = enc.cls(d);
            let mut p = model.params.disc.forward(cls, 1);
            softmax_in_place(&mut p);
            let label = seq.label.expect("validated");
            aux_sum -= p[label].max(1e-300).ln();
            let mut d_head = p;
            d_head[label] -= 1.0;
            for g in d_head.iter_mut() {
                *g *= aux_scale;
            }
            let d_cls = model.params.disc.backward(cls, &d_head, 1, &mut grads.disc);
            let d_cls_enc = grl.backward(&d_cls);
            axpy(&mut d_enc[..d], 1.0, &d_cls_enc);
        } else if use_cls {
            let cls = enc.cls(d);
            let head = model.params.user_cls.as_ref().expect("user_cls params");
            let ghead = grads.user_cls.as_mut().expect("user_cls grads");
            let mut p = head.forward(cls, 1);
            softmax_in_place(&mut p);
            let label = seq.cls_user_row.expect("validated");
            aux_sum -= p[label].max(1e-300).ln();
            let mut d_head = p;
            d_head[label] -= 1.0;
            for g in d_head.iter_mut() {
                *g *= aux_scale;
            }
            let d_cls = head.backward(cls, &d_head, 1, ghead);
            axpy(&mut d_enc[..d], 1.0, &d_cls);
        }

        model.encoder_backward(&enc_fwd, &d_enc, &mut grads);
    }

    let ape = if total_tokens > 0 { ce_sum / total_tokens as f64 } else { 0.0 };
    let aux = if seqs.is_empty() { 0.0 } else { aux_sum / seqs.len() as f64 };
    Ok((LossParts::mix(ape, aux, cfg.beta, mixed), grads))
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// AdamW state (first/second moments and the step counter).
pub struct Optimizer {
    m: ParamSet,
    v: ParamSet,
    t: usize,
    kind: OptimizerKind,
}

impl Optimizer {
    pub fn new(model: &ApeModel, kind: OptimizerKind) -> Self {
        Self {
            m: model.params.zeros_like(&model.dims),
            v: model.params.zeros_like(&model.dims),
            t: 0,
            kind,
        }
    }

    /// One decoupled-weight-decay update over the variant's trainable set.
    /// At β = 0 the discriminator head is excluded: the mixture degenerates
    /// to the bias-only objective and the step must match it exactly.
    pub fn step(&mut self, model: &mut ApeModel, grads: &ParamSet, lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        let weight_decay = cfg.weight_decay;
        let mut params = model.params.tensors_mut();
        let g_tensors = grads.tensors();
        let mut m_tensors = self.m.tensors_mut();
        let mut v_tensors = self.v.tensors_mut();
        for i in 0..params.len() {
            let (name, w) = &mut params[i];
            debug_assert_eq!(*name, g_tensors[i].0);
            if !cfg.variant.trains(name) {
                continue;
            }
            if name.starts_with("disc.") && cfg.beta == 0.0 {
                continue;
            }
            let g = g_tensors[i].1;
            match self.kind {
                OptimizerKind::Sgd => {
                    for (wj, gj) in w.iter_mut().zip(g.iter()) {
                        *wj -= lr * gj;
                    }
                }
                OptimizerKind::AdamW => {
                    let m = &mut m_tensors[i].1;
                    let vv = &mut v_tensors[i].1;
                    for j in 0..w.len() {
                        let gj = g[j];
                        m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * gj;
                        vv[j] = ADAM_BETA2 * vv[j] + (1.0 - ADAM_BETA2) * gj * gj;
                        let mhat = m[j] / bc1;
                        let vhat = vv[j] / bc2;
                        w[j] -= lr * (mhat / (vhat.sqrt() + ADAM_EPS) + weight_decay * w[j]);
                    }
                }
            }
        }
    }
}

/// One optimizer step: gradients accumulated over `micro_batches`, averaged,
/// then applied. Aborts on a non-finite loss.
pub fn train_step(
    model: &mut ApeModel,
    opt: &mut Optimizer,
    micro_batches: &[&[PreparedSeq]],
    cfg: &TrainConfig,
    lr: f64,
    step_index: usize,
    dropout_rng: Option<&mut ChaCha8Rng>,
) -> Result<LossParts> {
    let mut total = model.params.zeros_like(&model.dims);
    let mut ape = 0.0;
    let mut disc = 0.0;
    let mut rng = dropout_rng;
    for batch in micro_batches {
        let (parts, grads) = batch_gradients(model, batch, cfg, rng.as_deref_mut())?;
        ape += parts.ape;
        disc += parts.disc;
        accumulate(&mut total, &grads, 1.0 / micro_batches.len() as f64);
    }
    let n = micro_batches.len() as f64;
    let parts = LossParts::mix(ape / n, disc / n, cfg.beta, mixing(cfg).0 || mixing(cfg).1);
    if !parts.train.is_finite() {
        return Err(PepeError::NonFiniteLoss {
            step: step_index,
            ape: parts.ape,
            disc: parts.disc,
        });
    }
    opt.step(model, &total, lr, cfg);
    Ok(parts)
}

fn accumulate(into: &mut ParamSet, from: &ParamSet, scale: f64) {
    let mut dst = into.tensors_mut();
    let src = from.tensors();
    for i in 0..dst.len() {
        debug_assert_eq!(dst[i].0, src[i].0);
        axpy(dst[i].1, scale, src[i].1);
    }
}

fn warmup_lr(base: f64, step: usize, total_steps: usize, warmup_frac: f64) -> f64 {
    let warmup = ((total_steps as f64 * warmup_frac).ceil() as usize).max(1);
    if step < warmup {
        base * (step + 1) as f64 / warmup as f64
    } else {
        base
    }
}

// ---------------------------------------------------------------------------
// Task-adaptive pretraining
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PretrainReport {
    pub skipped: bool,
    pub epochs_run: usize,
    pub pool_size: usize,
    pub holdout_size: usize,
    pub initial_holdout_loss: f64,
    pub final_holdout_loss: f64,
}

/// Train only the backbone on the aggregated low-volume-user pool; no user
/// biases, no discriminator. The snapshot then seeds both the clustering
/// embedder and main training. An empty pool skips the stage (the
/// no-pretraining ablation).
pub fn task_adaptive_pretrain(
    model: &mut ApeModel,
    pool: &Corpus,
    cfg: &TrainConfig,
) -> Result<PretrainReport> {
    if pool.is_empty() {
        return Ok(PretrainReport {
            skipped: true,
            epochs_run: 0,
            pool_size: 0,
            holdout_size: 0,
            initial_holdout_loss: f64::NAN,
            final_holdout_loss: f64::NAN,
        });
    }
    let mut pre_cfg = cfg.clone();
    pre_cfg.variant = Variant::DsBert;
    pre_cfg.beta = 0.0;
    pre_cfg.validate()?;

    let mut indices: Vec<usize> = (0..pool.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7061_6765); // pretrain stream
    indices.shuffle(&mut rng);
    let holdout_n = (pool.len() / 10).max(1).min(pool.len() - 1);
    let (holdout_idx, train_idx) = indices.split_at(holdout_n);

    fn prep(model: &ApeModel, pool: &Corpus, idx: &[usize]) -> Result<Vec<PreparedSeq>> {
        idx.iter()
            .map(|&i| prepare_seq(model, &pool.vocab, &pool.triplets[i], None, Variant::DsBert))
            .collect()
    }
    let holdout = prep(model, pool, holdout_idx)?;
    let initial_holdout_loss = batch_loss(model, &holdout, &pre_cfg)?.ape;

    let steps_per_epoch = train_idx.len().div_ceil(cfg.batch_size * cfg.accumulation_steps);
    let total_steps = steps_per_epoch * cfg.pretrain_epochs;
    let mut opt = Optimizer::new(model, cfg.optimizer);
    let mut best_loss = initial_holdout_loss;
    let mut best_params = model.params.clone();
    let mut best_epoch = 0;
    let mut since_best = 0;
    let mut epochs_run = 0;
    let mut step = 0;

    let mut order: Vec<usize> = train_idx.to_vec();
    for epoch in 0..cfg.pretrain_epochs {
        order.shuffle(&mut rng);
        let seqs = prep(model, pool, &order)?;
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xd0 + epoch as u64));
        for chunk in seqs.chunks(cfg.batch_size * cfg.accumulation_steps) {
            let micro: Vec<&[PreparedSeq]> = chunk.chunks(cfg.batch_size).collect();
            let lr = warmup_lr(cfg.learning_rate, step, total_steps, cfg.warmup_frac);
            train_step(model, &mut opt, &micro, &pre_cfg, lr, step, Some(&mut drop_rng))?;
            step += 1;
        }
        epochs_run = epoch + 1;
        let loss = batch_loss(model, &holdout, &pre_cfg)?.ape;
        if loss < best_loss {
            best_loss = loss;
            best_params = model.params.clone();
            best_epoch = epochs_run;
            since_best = 0;
        } else {
            since_best += 1;
            if since_best > cfg.patience {
                break;
            }
        }
    }
    let _ = best_epoch;
    model.params = best_params;
    model.meta.pretrained = true;

    Ok(PretrainReport {
        skipped: false,
        epochs_run,
        pool_size: pool.len(),
        holdout_size: holdout_n,
        initial_holdout_loss,
        final_holdout_loss: best_loss,
    })
}

// ---------------------------------------------------------------------------
// Variant training loop
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub l_ape: f64,
    pub l_disc: f64,
    pub l_train: f64,
    pub val_bleu: f64,
    pub val_ter: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub variant: String,
    pub seed: u64,
    pub rows: Vec<EpochRow>,
    pub best_epoch: usize,
    pub best_val_ter: f64,
    pub best_val_bleu: f64,
    pub stopped_early: bool,
}

impl TrainReport {
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut body = String::from("epoch,l_ape,l_disc,l_train,val_bleu,val_ter\n");
        for r in &self.rows {
            body.push_str(&format!(
                "{},{},{},{},{},{}\n",
                r.epoch, r.l_ape, r.l_disc, r.l_train, r.val_bleu, r.val_ter
            ));
        }
        std::fs::write(path, body)?;
        Ok(())
    }
}

/// Add factor / user-cls parameter blocks when the variant needs them and
/// the snapshot (shared across variants) does not carry them yet.
pub fn ensure_variant_params(model: &mut ApeModel, variant: Variant, seed: u64) {
    if variant.uses_factor() && model.params.factor.is_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfac7_0e); // factor stream
        let rank = model.dims.factor_rank;
        let mut basis = vec![0.0; rank * model.dims.vocab];
        for b in basis.iter_mut() {
            *b = gauss(&mut rng) * 0.02;
        }
        model.params.factor = Some(crate::model::FactorBias {
            user_vec: vec![0.0; model.dims.users * rank],
            basis,
        });
    }
    if variant.uses_user_cls() && model.params.user_cls.is_none() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xc15_5);
        model.params.user_cls = Some(Linear::init(
            model.dims.d_model,
            model.dims.users,
            0.02,
            &mut rng,
        ));
    }
}

/// Full training of one variant with early stopping on validation TER.
///
/// `labels[i]` is the frozen cluster label of `train.triplets[i]`; required
/// exactly when the variant uses the discriminator. The returned model is the
/// best-validation-TER snapshot.
pub fn train_variant(
    mut model: ApeModel,
    train: &Corpus,
    valid: &Corpus,
    labels: Option<&[usize]>,
    cfg: &TrainConfig,
) -> Result<(ApeModel, TrainReport)> {
    cfg.validate()?;
    let variant = cfg.variant;
    model.meta.variant = Some(variant.name().to_string());

    if variant == Variant::Uncorrected {
        return Ok((
            model,
            TrainReport {
                variant: variant.name().into(),
                seed: cfg.seed,
                rows: Vec::new(),
                best_epoch: 0,
                best_val_ter: f64::NAN,
                best_val_bleu: f64::NAN,
                stopped_early: false,
            },
        ));
    }

    match (labels, variant.uses_disc()) {
        (None, true) => {
            return Err(PepeError::MissingStage {
                stage: "cluster".into(),
                msg: format!("variant {} needs cluster labels", variant.name()),
            })
        }
        (Some(_), false) => {
            return Err(PepeError::VariantMismatch {
                variant: variant.name().into(),
                feature: "cluster labels".into(),
            })
        }
        (Some(l), true) if l.len() != train.len() => {
            return Err(PepeError::Config(format!(
                "{} labels for {} training triplets",
                l.len(),
                train.len()
            )))
        }
        _ => {}
    }

    ensure_variant_params(&mut model, variant, cfg.seed);

    let prepared: Vec<PreparedSeq> = train
        .triplets
        .iter()
        .enumerate()
        .map(|(i, t)| {
            prepare_seq(
                &model,
                &train.vocab,
                t,
                labels.map(|l| l[i]),
                variant,
            )
        })
        .collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x7261_696e); // epoch shuffle stream
    let steps_per_epoch = prepared.len().div_ceil(cfg.batch_size * cfg.accumulation_steps);
    let total_steps = steps_per_epoch * cfg.max_epochs;
    let mut opt = Optimizer::new(&model, cfg.optimizer);

    let mut rows = Vec::new();
    let mut best: Option<(f64, f64, usize, ParamSet)> = None; // (ter, bleu, epoch, params)
    let mut since_best = 0usize;
    let mut stopped_early = false;
    let mut step = 0usize;

    let mut order: Vec<usize> = (0..prepared.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut drop_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (0xd20 + epoch as u64));
        let mut epoch_parts = Vec::new();
        let mut batch: Vec<PreparedSeq> = Vec::with_capacity(cfg.batch_size * cfg.accumulation_steps);
        for (pos, &i) in order.iter().enumerate() {
            batch.push(prepared[i].clone());
            let flush = batch.len() == cfg.batch_size * cfg.accumulation_steps
                || pos + 1 == order.len();
            if flush {
                let micro: Vec<&[PreparedSeq]> = batch.chunks(cfg.batch_size).collect();
                let lr = warmup_lr(cfg.learning_rate, step, total_steps, cfg.warmup_frac);
                let parts =
                    train_step(&mut model, &mut opt, &micro, cfg, lr, step, Some(&mut drop_rng))?;
                epoch_parts.push(parts);
                step += 1;
                batch.clear();
            }
        }

        let n = epoch_parts.len().max(1) as f64;
        let l_ape = epoch_parts.iter().map(|p| p.ape).sum::<f64>() / n;
        let l_disc = epoch_parts.iter().map(|p| p.disc).sum::<f64>() / n;
        let l_train = epoch_parts.iter().map(|p| p.train).sum::<f64>() / n;

        let (val_bleu, val_ter) = validation_scores(&model, valid, cfg)?;
        rows.push(EpochRow {
            epoch,
            l_ape,
            l_disc,
            l_train,
            val_bleu,
            val_ter,
        });

        let improved = best.as_ref().map(|(t, _, _, _)| val_ter < *t).unwrap_or(true);
        if improved {
            best = Some((val_ter, val_bleu, epoch, model.params.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                stopped_early = true;
                break;
            }
        }
    }

    let (best_val_ter, best_val_bleu, best_epoch, best_params) =
        best.expect("at least one epoch ran");
    model.params = best_params;

    Ok((
        model,
        TrainReport {
            variant: variant.name().into(),
            seed: cfg.seed,
            rows,
            best_epoch,
            best_val_ter,
            best_val_bleu,
            stopped_early,
        },
    ))
}

/// Beam-decode the validation corpus and score BLEU / TER (both on the
/// 0-100 presentation scale).
fn validation_scores(model: &ApeModel, valid: &Corpus, cfg: &TrainConfig) -> Result<(f64, f64)> {
    let outputs = eval::decode_corpus(model, cfg.variant, valid, cfg.beam_size, cfg.max_decode_len)?;
    let refs: Vec<Vec<TokenId>> = valid.triplets.iter().map(|t| t.pe.clone()).collect();
    let bleu = eval::bleu(&outputs, &refs)?;
    let ter = 100.0 * eval::corpus_ter(&outputs, &refs)?;
    Ok((bleu, ter))
}

/// Convenience wrapper: metadata map recorded in checkpoints.
pub fn checkpoint_extra(cfg: &TrainConfig, config_digest: &str, stage: &str) -> BTreeMap<String, String> {
    let mut extra = BTreeMap::new();
    extra.insert("config_digest".into(), config_digest.to_string());
    extra.insert("stage".into(), stage.to_string());
    extra.insert("seed".into(), cfg.seed.to_string());
    extra.insert("variant".into(), cfg.variant.name().to_string());
    extra
}
