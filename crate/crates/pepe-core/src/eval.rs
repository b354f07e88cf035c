//! Metrics and report assembly: corpus BLEU, TER with greedy block shifts,
//! the synthetic style-accuracy oracle, and per-variant comparison tables.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::error::{PepeError, Result};
use crate::model::{beam_search, ApeModel};
use crate::synth::UserStyleProfile;
use crate::train::Variant;
use crate::vocab::TokenId;

// ---------------------------------------------------------------------------
// BLEU
// ---------------------------------------------------------------------------

const BLEU_MAX_N: usize = 4;
const BLEU_EPS: f64 = 1e-9;

/// Corpus-level BLEU on the 0-100 scale: clipped 1-4-gram precisions,
/// geometric mean, brevity penalty; zero match counts are replaced by 1e-9.
pub fn bleu(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if hypotheses.is_empty() {
        return Err(PepeError::EmptyCorpus("bleu on empty corpus".into()));
    }
    if hypotheses.len() != references.len() {
        return Err(PepeError::Config(format!(
            "bleu: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }

    let mut matches = [0.0f64; BLEU_MAX_N];
    let mut totals = [0.0f64; BLEU_MAX_N];
    let mut hyp_len = 0usize;
    let mut ref_len = 0usize;
    for (hyp, reference) in hypotheses.iter().zip(references) {
        hyp_len += hyp.len();
        ref_len += reference.len();
        for n in 1..=BLEU_MAX_N {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[TokenId], usize> = HashMap::new();
            if reference.len() >= n {
                for w in reference.windows(n) {
                    *ref_counts.entry(w).or_insert(0) += 1;
                }
            }
            let mut hyp_counts: HashMap<&[TokenId], usize> = HashMap::new();
            for w in hyp.windows(n) {
                *hyp_counts.entry(w).or_insert(0) += 1;
            }
            totals[n - 1] += (hyp.len() - n + 1) as f64;
            for (gram, count) in hyp_counts {
                let clip = ref_counts.get(gram).copied().unwrap_or(0);
                matches[n - 1] += count.min(clip) as f64;
            }
        }
    }

    if hyp_len == 0 {
        return Ok(0.0);
    }
    // Orders with no n-grams at all (corpus of very short sentences) are
    // left out of the geometric mean; zero matches smooth to 1e-9 counts.
    let mut log_p = 0.0;
    let mut orders = 0;
    for n in 0..BLEU_MAX_N {
        if totals[n] == 0.0 {
            continue;
        }
        let m = if matches[n] > 0.0 { matches[n] } else { BLEU_EPS };
        log_p += (m / totals[n]).ln();
        orders += 1;
    }
    if orders == 0 {
        return Ok(0.0);
    }
    let bp = if hyp_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    Ok(100.0 * bp * (log_p / orders as f64).exp())
}

// ---------------------------------------------------------------------------
// TER
// ---------------------------------------------------------------------------

fn levenshtein(a: &[TokenId], b: &[TokenId]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

const TER_MAX_BLOCK: usize = 10;

/// (edits + shifts, reference length) for one sentence.
///
/// Greedy block shifts: a block (length ≤ 10) that is currently misaligned
/// and matches the reference somewhere may move anywhere, at cost 1,
/// accepted only when it lowers the remaining edit distance by at least 2;
/// the best reduction wins, ties broken by source index, then target index,
/// then block length.
pub fn ter_parts(hypothesis: &[TokenId], reference: &[TokenId]) -> Result<(usize, usize)> {
    if reference.is_empty() {
        return Err(PepeError::Config("TER needs a non-empty reference".into()));
    }
    let mut h = hypothesis.to_vec();
    let mut shifts = 0usize;
    loop {
        let e = levenshtein(&h, reference);
        if e < 2 {
            break;
        }
        // (reduction, start, insert position, length, shifted sequence)
        let mut best: Option<(usize, usize, usize, usize, Vec<TokenId>)> = None;
        for start in 0..h.len() {
            for len in 1..=TER_MAX_BLOCK.min(h.len() - start) {
                let block = &h[start..start + len];
                let misaligned = (0..len)
                    .any(|t| start + t >= reference.len() || h[start + t] != reference[start + t]);
                if !misaligned {
                    continue;
                }
                if reference.len() < len || !reference.windows(len).any(|w| w == block) {
                    continue;
                }
                let mut rest = h.clone();
                rest.drain(start..start + len);
                for p in 0..=rest.len() {
                    if p == start {
                        continue;
                    }
                    let mut cand = rest.clone();
                    cand.splice(p..p, block.iter().copied());
                    let e2 = levenshtein(&cand, reference);
                    if e2 + 2 <= e {
                        let reduction = e - e2;
                        let key = (reduction, start, p, len);
                        let better = match &best {
                            None => true,
                            Some((r, s, q, l, _)) => {
                                (reduction > *r)
                                    || (reduction == *r
                                        && (start, p, len) < (*s, *q, *l))
                            }
                        };
                        if better {
                            best = Some((key.0, key.1, key.2, key.3, cand.clone()));
                        }
                    }
                }
            }
        }
        match best {
            Some((_, _, _, _, cand)) => {
                h = cand;
                shifts += 1;
            }
            None => break,
        }
    }
    Ok((levenshtein(&h, reference) + shifts, reference.len()))
}

/// Sentence TER as a rate: (edits + shifts) / reference length.
pub fn ter(hypothesis: &[TokenId], reference: &[TokenId]) -> Result<f64> {
    let (num, den) = ter_parts(hypothesis, reference)?;
    Ok(num as f64 / den as f64)
}

/// Corpus TER: total numerator over total reference tokens.
pub fn corpus_ter(hypotheses: &[Vec<TokenId>], references: &[Vec<TokenId>]) -> Result<f64> {
    if hypotheses.len() != references.len() {
        return Err(PepeError::Config(format!(
            "ter: {} hypotheses vs {} references",
            hypotheses.len(),
            references.len()
        )));
    }
    let mut num = 0usize;
    let mut den = 0usize;
    for (h, r) in hypotheses.iter().zip(references) {
        let (n, d) = ter_parts(h, r)?;
        num += n;
        den += d;
    }
    if den == 0 {
        return Err(PepeError::Config("ter: empty references".into()));
    }
    Ok(num as f64 / den as f64)
}

// ---------------------------------------------------------------------------
// Style accuracy (synthetic oracle)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StyleReport {
    /// Mean over triplets with at least one mandated edit.
    pub mean: f64,
    pub per_user: BTreeMap<String, f64>,
    /// Triplets that carried at least one mandated edit.
    pub counted: usize,
}

fn count_token(seq: &[TokenId], tok: TokenId) -> usize {
    seq.iter().filter(|&&t| t == tok).count()
}

/// Fraction of profile-mandated edits realized in the outputs.
///
/// For each triplet the oracle recomputes the expected post-edit from the
/// profile; substitutions are credited per target token by count (new
/// occurrences relative to mt), a mandated suffix is credited when the
/// output ends with it. Triplets whose profile mandates nothing are skipped.
pub fn style_accuracy(
    outputs: &[Vec<TokenId>],
    corpus: &Corpus,
    profiles: &[UserStyleProfile],
) -> Result<StyleReport> {
    if outputs.len() != corpus.len() {
        return Err(PepeError::Config(format!(
            "style accuracy: {} outputs vs {} triplets",
            outputs.len(),
            corpus.len()
        )));
    }
    let mut transforms = BTreeMap::new();
    for p in profiles {
        transforms.insert(p.user_id.as_str(), p.compile(&corpus.vocab)?);
    }

    let mut per_user_sum: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    let mut total = 0.0;
    let mut counted = 0usize;
    for (output, triplet) in outputs.iter().zip(&corpus.triplets) {
        let tf = transforms
            .get(triplet.user_id.as_str())
            .ok_or_else(|| PepeError::Config(format!("no profile for user {:?}", triplet.user_id)))?;
        let expected = tf.apply(&triplet.mt);

        let mut needed: BTreeMap<TokenId, usize> = BTreeMap::new();
        for (i, &mt_tok) in triplet.mt.iter().enumerate() {
            if expected[i] != mt_tok {
                *needed.entry(expected[i]).or_insert(0) += 1;
            }
        }
        let mut mandated = 0usize;
        let mut realized = 0usize;
        for (&to, &need) in &needed {
            mandated += need;
            let have = count_token(output, to).saturating_sub(count_token(&triplet.mt, to));
            realized += have.min(need);
        }
        if let Some(suffix) = tf.suffix() {
            mandated += 1;
            if output.last() == Some(&suffix) {
                realized += 1;
            }
        }
        if mandated == 0 {
            continue;
        }
        let frac = realized as f64 / mandated as f64;
        total += frac;
        counted += 1;
        let entry = per_user_sum.entry(triplet.user_id.clone()).or_insert((0.0, 0));
        entry.0 += frac;
        entry.1 += 1;
    }

    Ok(StyleReport {
        mean: if counted > 0 { total / counted as f64 } else { 0.0 },
        per_user: per_user_sum
            .into_iter()
            .map(|(u, (s, n))| (u, s / n as f64))
            .collect(),
        counted,
    })
}

// ---------------------------------------------------------------------------
// Checkpoint evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalConfig {
    pub beam_size: usize,
    pub max_decode_len: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            beam_size: 3,
            max_decode_len: 24,
        }
    }
}

/// Beam-decode every triplet under the variant's inference rule.
///
/// The uncorrected baseline copies mt verbatim; the user-token variant
/// forces the user's reserved token after BOS; bias variants apply the
/// user's bias row, falling back to the zero vector for unregistered users.
pub fn decode_corpus(
    model: &ApeModel,
    variant: Variant,
    corpus: &Corpus,
    beam_size: usize,
    max_decode_len: usize,
) -> Result<Vec<Vec<TokenId>>> {
    let sp = corpus.vocab.specials();
    let mut outputs = Vec::with_capacity(corpus.len());
    for t in &corpus.triplets {
        let out = match variant {
            Variant::Uncorrected => t.mt.clone(),
            Variant::UserToken => {
                let forced = corpus
                    .vocab
                    .user_token_id(&t.user_id)
                    .map(|tok| vec![tok])
                    .unwrap_or_default();
                beam_search(model, sp, &t.src, &t.mt, None, &forced, beam_size, max_decode_len)?
                    .tokens
            }
            Variant::DsBert | Variant::UserCls => {
                beam_search(model, sp, &t.src, &t.mt, None, &[], beam_size, max_decode_len)?.tokens
            }
            Variant::FullBias | Variant::FactorBias | Variant::Pepe => {
                let user = model.user_row(&t.user_id).ok().map(|_| t.user_id.as_str());
                beam_search(model, sp, &t.src, &t.mt, user, &[], beam_size, max_decode_len)?.tokens
            }
        };
        outputs.push(out);
    }
    Ok(outputs)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct UserRow {
    pub user_id: String,
    pub sentences: usize,
    pub bleu: f64,
    pub ter: f64,
    pub style_accuracy: Option<f64>,
}

/// One variant's scores on a test corpus (BLEU and TER on the 0-100 scale).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub variant: String,
    pub seed: u64,
    pub config_digest: String,
    pub sentences: usize,
    pub bleu: f64,
    pub ter: f64,
    pub style_accuracy: Option<f64>,
    pub per_user: Vec<UserRow>,
}

/// Decode the test corpus with a trained checkpoint and assemble the report.
/// `profiles` enables the synthetic style oracle; without them the metric is
/// reported as absent (real-data mode).
pub fn evaluate_checkpoint(
    model: &ApeModel,
    variant: Variant,
    test: &Corpus,
    profiles: Option<&[UserStyleProfile]>,
    cfg: &EvalConfig,
    seed: u64,
    config_digest: &str,
) -> Result<MetricReport> {
    if model.meta.vocab_digest != test.vocab.digest() {
        return Err(PepeError::Checkpoint(format!(
            "vocabulary mismatch: checkpoint built for {}, corpus has {}",
            model.meta.vocab_digest,
            test.vocab.digest()
        )));
    }
    let outputs = decode_corpus(model, variant, test, cfg.beam_size, cfg.max_decode_len)?;
    let refs: Vec<Vec<TokenId>> = test.triplets.iter().map(|t| t.pe.clone()).collect();

    let corpus_bleu = bleu(&outputs, &refs)?;
    let corpus_ter_v = 100.0 * corpus_ter(&outputs, &refs)?;
    let style = match profiles {
        Some(p) => Some(style_accuracy(&outputs, test, p)?),
        None => None,
    };

    let mut per_user = Vec::new();
    for user in test.users() {
        let idx: Vec<usize> = test
            .triplets
            .iter()
            .enumerate()
            .filter(|(_, t)| t.user_id == user)
            .map(|(i, _)| i)
            .collect();
        let h: Vec<Vec<TokenId>> = idx.iter().map(|&i| outputs[i].clone()).collect();
        let r: Vec<Vec<TokenId>> = idx.iter().map(|&i| refs[i].clone()).collect();
        per_user.push(UserRow {
            user_id: user.clone(),
            sentences: idx.len(),
            bleu: bleu(&h, &r)?,
            ter: 100.0 * corpus_ter(&h, &r)?,
            style_accuracy: style
                .as_ref()
                .and_then(|s| s.per_user.get(&user).copied()),
        });
    }

    Ok(MetricReport {
        label: variant.name().to_string(),
        variant: variant.name().to_string(),
        seed,
        config_digest: config_digest.to_string(),
        sentences: test.len(),
        bleu: corpus_bleu,
        ter: corpus_ter_v,
        style_accuracy: style.as_ref().map(|s| s.mean),
        per_user,
    })
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

/// CSV with one row per variant.
pub fn write_reports_csv(reports: &[MetricReport], path: &Path) -> Result<()> {
    let mut body = String::from("label,variant,seed,sentences,bleu,ter,style_accuracy\n");
    for r in reports {
        body.push_str(&format!(
            "{},{},{},{},{:.4},{:.4},{}\n",
            r.label,
            r.variant,
            r.seed,
            r.sentences,
            r.bleu,
            r.ter,
            r.style_accuracy
                .map(|s| format!("{s:.4}"))
                .unwrap_or_else(|| "n/a".into()),
        ));
    }
    std::fs::write(path, body)?;
    Ok(())
}

/// Markdown comparison table with per-variant deltas against the `pepe` row.
pub fn write_reports_markdown(reports: &[MetricReport], path: &Path) -> Result<()> {
    let anchor = reports.iter().find(|r| r.variant == "pepe");
    let mut body = String::from("| Method | BLEU ↑ | TER ↓ | Style ↑ |\n|---|---|---|---|\n");
    for r in reports {
        let fmt = |value: f64, anchor_value: Option<f64>, bold: bool| -> String {
            let core = if bold {
                format!("**{value:.1}**")
            } else {
                format!("{value:.1}")
            };
            match anchor_value {
                Some(a) if (value - a).abs() > 5e-4 => {
                    format!("{core} ({:+.1})", value - a)
                }
                _ => core,
            }
        };
        let is_pepe = r.variant == "pepe";
        let bleu_s = fmt(r.bleu, anchor.map(|a| a.bleu).filter(|_| !is_pepe), is_pepe);
        let ter_s = fmt(r.ter, anchor.map(|a| a.ter).filter(|_| !is_pepe), is_pepe);
        let style_s = match r.style_accuracy {
            Some(s) => fmt(
                100.0 * s,
                anchor
                    .and_then(|a| a.style_accuracy)
                    .map(|v| 100.0 * v)
                    .filter(|_| !is_pepe),
                is_pepe,
            ),
            None => "n/a".into(),
        };
        body.push_str(&format!("| {} | {} | {} | {} |\n", r.label, bleu_s, ter_s, style_s));
    }
    std::fs::write(path, body)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seqs(v: &[&[TokenId]]) -> Vec<Vec<TokenId>> {
        v.iter().map(|s| s.to_vec()).collect()
    }

    #[test]
    fn bleu_identity_is_100() {
        let h = seqs(&[&[1, 2, 3, 4, 5], &[7, 8, 9]]);
        let score = bleu(&h, &h).unwrap();
        assert!((score - 100.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_disjoint_is_zero_within_smoothing() {
        let h = seqs(&[&[1, 2, 3, 4]]);
        let r = seqs(&[&[5, 6, 7, 8]]);
        assert!(bleu(&h, &r).unwrap() < 1e-3);
    }

    #[test]
    fn bleu_matches_hand_computed_fixture() {
        // hyp "a b c d" vs ref "a b c e": p1=3/4, p2=2/3, p3=1/2, p4=eps/1.
        let h = seqs(&[&[10, 11, 12, 13]]);
        let r = seqs(&[&[10, 11, 12, 14]]);
        let expected = 100.0
            * ((0.75f64.ln() + (2.0 / 3.0f64).ln() + 0.5f64.ln() + (1e-9f64 / 1.0).ln()) / 4.0)
                .exp();
        assert!((bleu(&h, &r).unwrap() - expected).abs() < 1e-6);
    }

    #[test]
    fn bleu_brevity_penalty_applies_to_short_hypotheses() {
        let h = seqs(&[&[1, 2]]);
        let r = seqs(&[&[1, 2, 3, 4]]);
        let with_bp = bleu(&h, &r).unwrap();
        let no_bp = bleu(&seqs(&[&[1, 2, 3, 4]]), &r).unwrap();
        assert!(with_bp < no_bp);
    }

    #[test]
    fn bleu_is_corpus_order_invariant() {
        let h = seqs(&[&[1, 2, 3], &[4, 5, 6, 7], &[8, 9]]);
        let r = seqs(&[&[1, 2, 4], &[4, 5, 7, 7], &[8, 8]]);
        let a = bleu(&h, &r).unwrap();
        let hs = seqs(&[&[8, 9], &[1, 2, 3], &[4, 5, 6, 7]]);
        let rs = seqs(&[&[8, 8], &[1, 2, 4], &[4, 5, 7, 7]]);
        assert!((a - bleu(&hs, &rs).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn bleu_rejects_empty_corpus() {
        assert!(matches!(bleu(&[], &[]), Err(PepeError::EmptyCorpus(_))));
    }

    #[test]
    fn ter_identity_is_zero() {
        assert_eq!(ter(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
    }

    #[test]
    fn ter_shift_fixture_beats_plain_edit_distance() {
        // hyp "a c b d" vs ref "a b c d": one block shift instead of two
        // substitutions -> 1/4 where plain WER is 2/4.
        let hyp = [1, 3, 2, 4];
        let reference = [1, 2, 3, 4];
        assert_eq!(levenshtein(&hyp, &reference), 2);
        let (num, den) = ter_parts(&hyp, &reference).unwrap();
        assert_eq!((num, den), (1, 4));
        assert!((ter(&hyp, &reference).unwrap() - 0.25).abs() < 1e-12);
    }

    #[test]
    fn ter_disjoint_equal_length_is_all_substitutions() {
        let hyp = [9, 9, 9, 9, 9];
        let reference = [1, 2, 3, 4, 5];
        assert!((ter(&hyp, &reference).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn ter_never_exceeds_word_error_rate() {
        // Shifts are only accepted when strictly beneficial.
        let cases: Vec<(Vec<usize>, Vec<usize>)> = vec![
            (vec![1, 2, 3, 4, 5], vec![5, 4, 3, 2, 1]),
            (vec![1, 2, 3], vec![3, 1, 2]),
            (vec![4, 4, 2, 1], vec![1, 2, 4, 4]),
            (vec![7], vec![7, 8, 9]),
            (vec![1, 2, 5, 6, 3, 4], vec![1, 2, 3, 4, 5, 6]),
        ];
        for (h, r) in cases {
            let (num, den) = ter_parts(&h, &r).unwrap();
            let wer = levenshtein(&h, &r);
            assert!(num <= wer, "ter {num}/{den} must not exceed wer {wer}");
        }
    }

    #[test]
    fn ter_empty_reference_is_an_error() {
        assert!(ter(&[1], &[]).is_err());
    }

    #[test]
    fn corpus_ter_aggregates_numerators_over_denominators() {
        let hyps = seqs(&[&[1, 3, 2, 4], &[1, 2]]);
        let refs = seqs(&[&[1, 2, 3, 4], &[1, 2]]);
        // Sentence parts: (1, 4) and (0, 2) -> 1/6.
        assert!((corpus_ter(&hyps, &refs).unwrap() - 1.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn identity_metrics_on_random_sequences() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let len = rng.gen_range(1..12);
            let s: Vec<TokenId> = (0..len).map(|_| rng.gen_range(0..50)).collect();
            assert_eq!(ter(&s, &s).unwrap(), 0.0);
            let one = vec![s.clone()];
            assert!((bleu(&one, &one).unwrap() - 100.0).abs() < 1e-9);
        }
    }
}
