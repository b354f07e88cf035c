//! Beam-search decoding.
//!
//! Plain accumulated log-probability scoring (no length normalization),
//! deterministic tie-breaking by token id. A hypothesis finishes when it
//! emits EOS; if nothing finishes within the step budget the best partial
//! hypothesis is returned, flagged.

use crate::error::Result;
use crate::vocab::{SpecialIds, TokenId};

use super::{ApeModel, BiasSel, EncStates, EncoderInput};
use crate::tensor::log_softmax;

/// Decoded tokens (without BOS, forced prefix, or EOS) plus whether any beam
/// actually reached EOS.
#[derive(Debug, Clone, PartialEq)]
pub struct BeamOutcome {
    pub tokens: Vec<TokenId>,
    pub reached_eos: bool,
    pub log_prob: f64,
}

#[derive(Clone)]
struct Hypothesis {
    prefix: Vec<TokenId>,
    log_prob: f64,
}

/// Post-edit a (src, mt) pair for a user.
///
/// `forced_prefix` tokens (e.g. the reserved user token of the User Token
/// baseline) are teacher-forced right after BOS and stripped from the result.
pub fn beam_search(
    model: &ApeModel,
    sp: SpecialIds,
    src: &[TokenId],
    mt: &[TokenId],
    user_id: Option<&str>,
    forced_prefix: &[TokenId],
    beam_size: usize,
    max_len: usize,
) -> Result<BeamOutcome> {
    assert!(beam_size >= 1, "beam_size must be at least 1");
    let bias = match user_id {
        None => BiasSel::None,
        Some(u) => BiasSel::User(model.user_row(u)?),
    };
    let enc = model.encode(&EncoderInput::from_src_mt(src, mt, sp))?;

    let mut start = Vec::with_capacity(1 + forced_prefix.len());
    start.push(sp.bos);
    start.extend_from_slice(forced_prefix);
    let base_len = start.len();

    let mut live = vec![Hypothesis {
        prefix: start,
        log_prob: 0.0,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();

    for _ in 0..max_len {
        // (score, token, source beam) candidates across all live beams.
        let mut candidates: Vec<(f64, TokenId, usize)> = Vec::new();
        for (b, hyp) in live.iter().enumerate() {
            let log_probs = next_log_probs(model, &enc, &hyp.prefix, bias)?;
            for (tok, lp) in log_probs.iter().enumerate() {
                candidates.push((hyp.log_prob + lp, tok, b));
            }
        }
        candidates.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.1.cmp(&b.1))
                .then(a.2.cmp(&b.2))
        });

        let mut next: Vec<Hypothesis> = Vec::with_capacity(beam_size);
        for (score, tok, b) in candidates.into_iter().take(beam_size) {
            let mut prefix = live[b].prefix.clone();
            prefix.push(tok);
            let hyp = Hypothesis {
                prefix,
                log_prob: score,
            };
            if tok == sp.eos {
                finished.push(hyp);
            } else {
                next.push(hyp);
            }
        }
        live = next;

        if live.is_empty() {
            break;
        }
        if let Some(best_final) = best_of(&finished) {
            // Scores only decrease with length, so once the best finished
            // hypothesis beats every live one the search is settled.
            if live.iter().all(|h| h.log_prob <= best_final.log_prob) {
                break;
            }
        }
        if live[0].prefix.len() >= model.dims.max_len {
            break;
        }
    }

    let strip = |h: &Hypothesis, eos: bool| BeamOutcome {
        tokens: h.prefix[base_len..h.prefix.len() - usize::from(eos)].to_vec(),
        reached_eos: eos,
        log_prob: h.log_prob,
    };
    match (best_of(&finished), best_of(&live)) {
        (Some(f), _) => Ok(strip(f, true)),
        (None, Some(partial)) => Ok(strip(partial, false)),
        (None, None) => Ok(BeamOutcome {
            tokens: Vec::new(),
            reached_eos: false,
            log_prob: f64::NEG_INFINITY,
        }),
    }
}

fn best_of(hyps: &[Hypothesis]) -> Option<&Hypothesis> {
    hyps.iter().reduce(|best, h| {
        if h.log_prob > best.log_prob
            || (h.log_prob == best.log_prob && h.prefix < best.prefix)
        {
            h
        } else {
            best
        }
    })
}

fn next_log_probs(
    model: &ApeModel,
    enc: &EncStates,
    prefix: &[TokenId],
    bias: BiasSel,
) -> Result<Vec<f64>> {
    let fwd = model.decode_cached(enc, prefix, None)?;
    let d = model.dims.d_model;
    let last = &fwd.states[(prefix.len() - 1) * d..prefix.len() * d];
    let logits = model.project_logits(last, 1, bias);
    Ok(log_softmax(&logits))
}
