//! Post-editing triplets: container, file format, preprocessing, splits.
//!
//! Corpus files are UTF-8 JSON lines, one record per line with fields
//! `user_id` (string) and `src`/`mt`/`pe` (arrays of token strings). The
//! vocabulary travels in a sidecar file (one token per line, line number =
//! id) next to the corpus.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PepeError, Result};
use crate::vocab::{TokenId, Vocabulary};

/// One personalized post-editing record.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Triplet {
    pub user_id: String,
    pub src: Vec<TokenId>,
    pub mt: Vec<TokenId>,
    pub pe: Vec<TokenId>,
}

/// An ordered triplet collection bound to its vocabulary.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub triplets: Vec<Triplet>,
    pub vocab: Vocabulary,
}

impl Corpus {
    /// Validate triplet invariants against the vocabulary.
    pub fn new(triplets: Vec<Triplet>, vocab: Vocabulary) -> Result<Self> {
        for (i, t) in triplets.iter().enumerate() {
            validate_triplet(t, &vocab).map_err(|msg| PepeError::CorpusParse {
                path: "<memory>".into(),
                line: i + 1,
                msg,
            })?;
        }
        Ok(Self { triplets, vocab })
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    /// Distinct user ids, sorted.
    pub fn users(&self) -> BTreeSet<String> {
        self.triplets.iter().map(|t| t.user_id.clone()).collect()
    }

    /// Triplet count per user, sorted by user id.
    pub fn user_counts(&self) -> BTreeMap<String, usize> {
        let mut counts = BTreeMap::new();
        for t in &self.triplets {
            *counts.entry(t.user_id.clone()).or_insert(0) += 1;
        }
        counts
    }
}

fn validate_triplet(t: &Triplet, vocab: &Vocabulary) -> std::result::Result<(), String> {
    if t.user_id.is_empty() {
        return Err("empty user_id".into());
    }
    for (name, seq) in [("src", &t.src), ("mt", &t.mt), ("pe", &t.pe)] {
        if seq.is_empty() {
            return Err(format!("empty {name} sequence"));
        }
        if let Some(&id) = seq.iter().find(|&&id| id >= vocab.len()) {
            return Err(format!("{name} token id {id} out of range (V={})", vocab.len()));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// File I/O
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct RawRecord {
    user_id: String,
    src: Vec<String>,
    mt: Vec<String>,
    pe: Vec<String>,
}

/// Vocabulary sidecar path for a corpus file (`x.jsonl` -> `x.vocab`).
pub fn vocab_path_for(corpus_path: &Path) -> PathBuf {
    corpus_path.with_extension("vocab")
}

/// Write the corpus as JSON lines plus its vocabulary sidecar.
pub fn write_corpus(corpus: &Corpus, path: &Path) -> Result<()> {
    let mut body = String::new();
    for t in &corpus.triplets {
        let to_strings = |ids: &[TokenId]| -> Result<Vec<String>> {
            Ok(corpus
                .vocab
                .decode(ids)?
                .into_iter()
                .map(str::to_string)
                .collect())
        };
        let rec = RawRecord {
            user_id: t.user_id.clone(),
            src: to_strings(&t.src)?,
            mt: to_strings(&t.mt)?,
            pe: to_strings(&t.pe)?,
        };
        body.push_str(&serde_json::to_string(&rec)?);
        body.push('\n');
    }
    std::fs::write(path, body)?;
    corpus.vocab.write(&vocab_path_for(path))?;
    Ok(())
}

/// Read a corpus and its vocabulary sidecar back. Strict: unknown tokens and
/// malformed lines are errors carrying the line number.
pub fn read_corpus(path: &Path) -> Result<Corpus> {
    let vocab = Vocabulary::read(&vocab_path_for(path))?;
    read_corpus_with_vocab(path, vocab)
}

pub fn read_corpus_with_vocab(path: &Path, vocab: Vocabulary) -> Result<Corpus> {
    let body = std::fs::read_to_string(path)?;
    let display = path.display().to_string();
    let mut triplets = Vec::new();
    for (idx, line) in body.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let raw: RawRecord =
            serde_json::from_str(line).map_err(|e| PepeError::CorpusParse {
                path: display.clone(),
                line: line_no,
                msg: e.to_string(),
            })?;
        let encode = |words: &[String]| -> Result<Vec<TokenId>> {
            words
                .iter()
                .map(|w| {
                    vocab.id(w).ok_or_else(|| PepeError::UnknownToken {
                        path: display.clone(),
                        line: line_no,
                        token: w.clone(),
                    })
                })
                .collect()
        };
        let t = Triplet {
            user_id: raw.user_id,
            src: encode(&raw.src)?,
            mt: encode(&raw.mt)?,
            pe: encode(&raw.pe)?,
        };
        validate_triplet(&t, &vocab).map_err(|msg| PepeError::CorpusParse {
            path: display.clone(),
            line: line_no,
            msg,
        })?;
        triplets.push(t);
    }
    if triplets.is_empty() {
        return Err(PepeError::EmptyCorpus(display));
    }
    Ok(Corpus { triplets, vocab })
}

// ---------------------------------------------------------------------------
// TF-IDF user similarity
// ---------------------------------------------------------------------------

/// Per-user maximum cosine similarity between TF-IDF vectors of aggregated
/// `src` documents. Term frequency is log-scaled (`1 + ln tf`), inverse
/// document frequency is smoothed (`1 + ln(N / (1 + df))`).
pub fn tfidf_user_similarity(corpus: &Corpus) -> Result<BTreeMap<String, f64>> {
    let users = corpus.users();
    if users.len() < 2 {
        return Err(PepeError::SingleUserCorpus(users.len()));
    }

    // Aggregated term counts per user, in sorted user order.
    let mut docs: BTreeMap<&str, HashMap<TokenId, usize>> = BTreeMap::new();
    for t in &corpus.triplets {
        let doc = docs.entry(&t.user_id).or_default();
        for &tok in &t.src {
            *doc.entry(tok).or_insert(0) += 1;
        }
    }

    let n_docs = docs.len() as f64;
    let mut df: HashMap<TokenId, usize> = HashMap::new();
    for doc in docs.values() {
        for &tok in doc.keys() {
            *df.entry(tok).or_insert(0) += 1;
        }
    }

    let vectors: Vec<(&str, HashMap<TokenId, f64>)> = docs
        .iter()
        .map(|(user, counts)| {
            let v = counts
                .iter()
                .map(|(&tok, &c)| {
                    let tf = 1.0 + (c as f64).ln();
                    let idf = 1.0 + (n_docs / (1.0 + df[&tok] as f64)).ln();
                    (tok, tf * idf)
                })
                .collect();
            (*user, v)
        })
        .collect();

    let norms: Vec<f64> = vectors
        .iter()
        .map(|(_, v)| v.values().map(|w| w * w).sum::<f64>().sqrt())
        .collect();

    let mut scores = BTreeMap::new();
    for (i, (user, vi)) in vectors.iter().enumerate() {
        let mut best = 0.0f64;
        for (j, (_, vj)) in vectors.iter().enumerate() {
            if i == j {
                continue;
            }
            let mut dot = 0.0;
            for (tok, w) in vi {
                if let Some(wj) = vj.get(tok) {
                    dot += w * wj;
                }
            }
            let denom = norms[i] * norms[j];
            let cos = if denom > 0.0 { dot / denom } else { 0.0 };
            best = best.max(cos);
        }
        scores.insert(user.to_string(), best);
    }
    Ok(scores)
}

// ---------------------------------------------------------------------------
// Preprocessing
// ---------------------------------------------------------------------------

/// Removal counts reported by [`preprocess`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PreprocessSummary {
    pub duplicates_removed: usize,
    pub overlong_removed: usize,
    pub users_filtered_tfidf: Vec<String>,
    pub users_to_pool: Vec<String>,
    pub kept_triplets: usize,
    pub pool_triplets: usize,
}

/// Output of [`preprocess`]: the main corpus, the low-volume pretraining
/// pool, and removal counts.
#[derive(Debug, Clone)]
pub struct Preprocessed {
    pub main: Corpus,
    pub pool: Corpus,
    pub summary: PreprocessSummary,
}

/// Clean a raw corpus: exact-duplicate removal, source-length cap, TF-IDF
/// user-similarity filter, then low-volume users moved to the pretraining
/// pool. The similarity and volume stages iterate to a fixed point so that
/// preprocessing is idempotent. A user survives the volume stage with
/// `count >= min_samples`.
pub fn preprocess(
    corpus: &Corpus,
    max_len: usize,
    sim_threshold: f64,
    min_samples: usize,
) -> Result<Preprocessed> {
    let mut seen: HashSet<&Triplet> = HashSet::with_capacity(corpus.len());
    let mut kept: Vec<Triplet> = Vec::with_capacity(corpus.len());
    let mut duplicates_removed = 0;
    let mut overlong_removed = 0;
    for t in &corpus.triplets {
        if !seen.insert(t) {
            duplicates_removed += 1;
            continue;
        }
        if t.src.len() > max_len {
            overlong_removed += 1;
            continue;
        }
        kept.push(t.clone());
    }

    let mut users_filtered_tfidf: Vec<String> = Vec::new();
    let mut pool: Vec<Triplet> = Vec::new();
    let mut users_to_pool: Vec<String> = Vec::new();

    loop {
        let mut changed = false;

        // Similarity filter, iterated until every survivor clears the bar.
        loop {
            let main = Corpus {
                triplets: kept.clone(),
                vocab: corpus.vocab.clone(),
            };
            if main.users().len() < 2 {
                break;
            }
            let scores = tfidf_user_similarity(&main)?;
            let noisy: BTreeSet<String> = scores
                .iter()
                .filter(|(_, &s)| s < sim_threshold)
                .map(|(u, _)| u.clone())
                .collect();
            if noisy.is_empty() {
                break;
            }
            users_filtered_tfidf.extend(noisy.iter().cloned());
            kept.retain(|t| !noisy.contains(&t.user_id));
            changed = true;
        }

        // Volume filter: sub-threshold users feed the pretraining pool.
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for t in &kept {
            *counts.entry(&t.user_id).or_insert(0) += 1;
        }
        let small: BTreeSet<String> = counts
            .iter()
            .filter(|(_, &c)| c < min_samples)
            .map(|(u, _)| u.to_string())
            .collect();
        if !small.is_empty() {
            users_to_pool.extend(small.iter().cloned());
            let (to_pool, rest): (Vec<_>, Vec<_>) =
                kept.into_iter().partition(|t| small.contains(&t.user_id));
            pool.extend(to_pool);
            kept = rest;
            changed = true;
        }

        if !changed {
            break;
        }
    }

    if kept.is_empty() {
        return Err(PepeError::EmptyCorpus(
            "no triplets survive preprocessing".into(),
        ));
    }

    let summary = PreprocessSummary {
        duplicates_removed,
        overlong_removed,
        users_filtered_tfidf,
        users_to_pool,
        kept_triplets: kept.len(),
        pool_triplets: pool.len(),
    };
    Ok(Preprocessed {
        main: Corpus {
            triplets: kept,
            vocab: corpus.vocab.clone(),
        },
        pool: Corpus {
            triplets: pool,
            vocab: corpus.vocab.clone(),
        },
        summary,
    })
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

/// Per-user train/valid/test fractions.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
    pub seed: u64,
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        if self.train <= 0.0 || self.valid <= 0.0 || self.test <= 0.0 {
            return Err(PepeError::InvalidSplit("fractions must be positive".into()));
        }
        if ((self.train + self.valid + self.test) - 1.0).abs() > 1e-9 {
            return Err(PepeError::InvalidSplit("fractions must sum to 1".into()));
        }
        Ok(())
    }
}

fn user_split_seed(seed: u64, user_id: &str) -> u64 {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(user_id.as_bytes());
    let bytes = hasher.finalize();
    u64::from_le_bytes(bytes[..8].try_into().unwrap())
}

/// Stratified per-user split. Every user lands in all three parts; the
/// union reconstructs the corpus; membership is a function of the seed only.
pub fn split(corpus: &Corpus, spec: &SplitSpec) -> Result<(Corpus, Corpus, Corpus)> {
    spec.validate()?;

    let mut per_user: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, t) in corpus.triplets.iter().enumerate() {
        per_user.entry(&t.user_id).or_default().push(i);
    }

    // 0 = train, 1 = valid, 2 = test
    let mut assignment = vec![0u8; corpus.len()];
    for (user, indices) in &per_user {
        let n = indices.len();
        if n < 3 {
            return Err(PepeError::TooFewSamplesToSplit {
                user_id: user.to_string(),
                n,
            });
        }
        let n_valid = ((n as f64 * spec.valid).floor() as usize).max(1);
        let n_test = ((n as f64 * spec.test).floor() as usize).max(1);
        if n_valid + n_test >= n {
            return Err(PepeError::TooFewSamplesToSplit {
                user_id: user.to_string(),
                n,
            });
        }
        let mut shuffled = indices.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(user_split_seed(spec.seed, user));
        shuffled.shuffle(&mut rng);
        for &i in shuffled.iter().take(n_valid) {
            assignment[i] = 1;
        }
        for &i in shuffled.iter().skip(n_valid).take(n_test) {
            assignment[i] = 2;
        }
    }

    let pick = |tag: u8| -> Corpus {
        Corpus {
            triplets: corpus
                .triplets
                .iter()
                .enumerate()
                .filter(|(i, _)| assignment[*i] == tag)
                .map(|(_, t)| t.clone())
                .collect(),
            vocab: corpus.vocab.clone(),
        }
    };
    Ok((pick(0), pick(1), pick(2)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{default_profiles, generate_corpus, grammar_vocabulary};

    fn small_corpus(n_users: usize, n_per_user: usize, seed: u64) -> Corpus {
        let profiles = default_profiles(n_users, 0);
        let vocab = grammar_vocabulary(&profiles).unwrap();
        generate_corpus(&profiles, n_per_user, &vocab, seed).unwrap()
    }

    #[test]
    fn round_trip_preserves_corpus() {
        let corpus = small_corpus(3, 20, 5);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.jsonl");
        write_corpus(&corpus, &path).unwrap();
        let back = read_corpus(&path).unwrap();
        assert_eq!(back.triplets, corpus.triplets);
        assert_eq!(back.vocab.tokens(), corpus.vocab.tokens());
    }

    #[test]
    fn same_corpus_writes_identical_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.jsonl"), dir.path().join("b.jsonl"));
        write_corpus(&small_corpus(2, 30, 9), &p1).unwrap();
        write_corpus(&small_corpus(2, 30, 9), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }

    #[test]
    fn empty_file_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("empty.jsonl");
        std::fs::write(&path, "").unwrap();
        small_corpus(2, 2, 0).vocab.write(&vocab_path_for(&path)).unwrap();
        assert!(matches!(read_corpus(&path), Err(PepeError::EmptyCorpus(_))));
    }

    #[test]
    fn missing_field_names_the_field_and_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.jsonl");
        std::fs::write(&path, "{\"user_id\":\"u\",\"src\":[\"i\"],\"mt\":[\"naneun\"]}\n").unwrap();
        small_corpus(2, 2, 0).vocab.write(&vocab_path_for(&path)).unwrap();
        match read_corpus(&path) {
            Err(PepeError::CorpusParse { line, msg, .. }) => {
                assert_eq!(line, 1);
                assert!(msg.contains("pe"), "message should name the field: {msg}");
            }
            other => panic!("expected parse error, got {other:?}"),
        }
    }

    #[test]
    fn unknown_token_is_reported_with_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("unk.jsonl");
        std::fs::write(
            &path,
            "{\"user_id\":\"u\",\"src\":[\"zzz\"],\"mt\":[\"naneun\"],\"pe\":[\"naneun\"]}\n",
        )
        .unwrap();
        small_corpus(2, 2, 0).vocab.write(&vocab_path_for(&path)).unwrap();
        match read_corpus(&path) {
            Err(PepeError::UnknownToken { line, token, .. }) => {
                assert_eq!(line, 1);
                assert_eq!(token, "zzz");
            }
            other => panic!("expected unknown token error, got {other:?}"),
        }
    }

    #[test]
    fn duplicate_collapses_to_one() {
        let mut corpus = small_corpus(2, 10, 1);
        let dup = corpus.triplets[0].clone();
        corpus.triplets.push(dup);
        let n_before = corpus.len();
        let out = preprocess(&corpus, 100, 0.1, 1).unwrap();
        assert_eq!(out.summary.duplicates_removed, 1);
        assert_eq!(out.main.len() + out.pool.len(), n_before - 1);
    }

    #[test]
    fn min_samples_boundary_user_goes_to_pool() {
        // u01 gets 99 triplets, u02 gets 100: only u01 moves to the pool.
        let profiles = default_profiles(2, 0);
        let vocab = grammar_vocabulary(&profiles).unwrap();
        let big = generate_corpus(&profiles, 150, &vocab, 2).unwrap();
        let mut triplets: Vec<Triplet> = Vec::new();
        let mut c1 = 0;
        let mut c2 = 0;
        for t in big.triplets {
            let quota = if t.user_id == "u01" { (&mut c1, 99) } else { (&mut c2, 100) };
            if *quota.0 < quota.1 && !triplets.contains(&t) {
                *quota.0 += 1;
                triplets.push(t);
            }
        }
        assert_eq!((c1, c2), (99, 100));
        let corpus = Corpus::new(triplets, vocab).unwrap();
        let out = preprocess(&corpus, 100, 0.1, 100).unwrap();
        assert_eq!(out.summary.users_to_pool, vec!["u01".to_string()]);
        assert!(out.main.users().contains("u02"));
        assert!(!out.main.users().contains("u01"));
        assert!(out.pool.users().contains("u01"));
    }

    #[test]
    fn overlong_src_is_dropped() {
        let mut corpus = small_corpus(2, 10, 3);
        let long = Triplet {
            user_id: "u01".into(),
            src: vec![corpus.vocab.id("i").unwrap(); 101],
            mt: vec![corpus.vocab.id("naneun").unwrap()],
            pe: vec![corpus.vocab.id("naneun").unwrap()],
        };
        corpus.triplets.push(long);
        let out = preprocess(&corpus, 100, 0.1, 1).unwrap();
        assert_eq!(out.summary.overlong_removed, 1);
    }

    #[test]
    fn preprocess_is_idempotent() {
        let corpus = small_corpus(4, 40, 8);
        let once = preprocess(&corpus, 100, 0.1, 10).unwrap();
        let twice = preprocess(&once.main, 100, 0.1, 10).unwrap();
        assert_eq!(once.main.triplets, twice.main.triplets);
        assert!(twice.pool.is_empty());
    }

    #[test]
    fn tfidf_identical_documents_score_one() {
        let profiles = default_profiles(1, 0);
        let vocab = grammar_vocabulary(&profiles).unwrap();
        let base = generate_corpus(&profiles, 10, &vocab, 4).unwrap();
        let mut triplets = base.triplets.clone();
        for t in &base.triplets {
            let mut c = t.clone();
            c.user_id = "copy".into();
            triplets.push(c);
        }
        let corpus = Corpus::new(triplets, vocab).unwrap();
        let scores = tfidf_user_similarity(&corpus).unwrap();
        for (_, s) in scores {
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn tfidf_disjoint_documents_score_zero() {
        let profiles = default_profiles(2, 0);
        let vocab = grammar_vocabulary(&profiles).unwrap();
        let a = vocab.id("doctor").unwrap();
        let b = vocab.id("teacher").unwrap();
        let mt = vec![vocab.id("uisa").unwrap()];
        let mk = |user: &str, tok: TokenId| Triplet {
            user_id: user.into(),
            src: vec![tok],
            mt: mt.clone(),
            pe: mt.clone(),
        };
        let corpus = Corpus::new(vec![mk("u01", a), mk("u02", b)], vocab).unwrap();
        let scores = tfidf_user_similarity(&corpus).unwrap();
        assert_eq!(scores["u01"], 0.0);
        assert_eq!(scores["u02"], 0.0);
    }

    #[test]
    fn tfidf_matches_hand_computed_fixture() {
        // Three users, one-sentence documents:
        //   u1: "the doctor"   u2: "the teacher"   u3: "doctor doctor"
        // N = 3; df: the=2, doctor=2, teacher=1.
        let profiles = default_profiles(3, 0);
        let vocab = grammar_vocabulary(&profiles).unwrap();
        let the = vocab.id("the").unwrap();
        let doc = vocab.id("doctor").unwrap();
        let tea = vocab.id("teacher").unwrap();
        let mt = vec![vocab.id("geu").unwrap()];
        let mk = |user: &str, src: Vec<TokenId>| Triplet {
            user_id: user.into(),
            src,
            mt: mt.clone(),
            pe: mt.clone(),
        };
        let corpus = Corpus::new(
            vec![
                mk("u1", vec![the, doc]),
                mk("u2", vec![the, tea]),
                mk("u3", vec![doc, doc]),
            ],
            vocab,
        )
        .unwrap();

        let idf2 = 1.0 + (3.0f64 / 3.0).ln(); // df = 2
        let idf1 = 1.0 + (3.0f64 / 2.0).ln(); // df = 1
        let w_the = 1.0 * idf2;
        let w_doc1 = 1.0 * idf2;
        let w_doc2 = (1.0 + 2.0f64.ln()) * idf2;
        let w_tea = 1.0 * idf1;

        let cos12 = (w_the * w_the)
            / ((w_the * w_the + w_doc1 * w_doc1).sqrt() * (w_the * w_the + w_tea * w_tea).sqrt());
        let cos13 = (w_doc1 * w_doc2) / ((w_the * w_the + w_doc1 * w_doc1).sqrt() * w_doc2);

        let scores = tfidf_user_similarity(&corpus).unwrap();
        assert!((scores["u1"] - cos12.max(cos13)).abs() < 1e-9);
        assert!((scores["u2"] - cos12).abs() < 1e-9);
        assert!((scores["u3"] - cos13).abs() < 1e-9);
    }

    #[test]
    fn tfidf_filter_removes_disjoint_user() {
        // Two regular users share the grammar; an outlier user writes from a
        // disjoint token set and must fall below the 0.1 threshold.
        let profiles = default_profiles(2, 0);
        let vocab = grammar_vocabulary(&profiles).unwrap();
        let mut corpus = generate_corpus(&profiles, 30, &vocab, 6).unwrap();
        let odd_src = vec![vocab.id("yo").unwrap(), vocab.id("^^").unwrap()];
        let mt = vec![vocab.id("geu").unwrap()];
        for _ in 0..30 {
            corpus.triplets.push(Triplet {
                user_id: "outlier".into(),
                src: odd_src.clone(),
                mt: mt.clone(),
                pe: mt.clone(),
            });
        }
        let out = preprocess(&corpus, 100, 0.1, 1).unwrap();
        assert!(out.summary.users_filtered_tfidf.contains(&"outlier".to_string()));
        assert!(!out.main.users().contains("outlier"));
    }

    #[test]
    fn split_10_at_811_gives_8_1_1_per_user() {
        let corpus = small_corpus(3, 10, 12);
        let spec = SplitSpec { train: 0.8, valid: 0.1, test: 0.1, seed: 42 };
        let (train, valid, test) = split(&corpus, &spec).unwrap();
        for counts in [train.user_counts(), valid.user_counts(), test.user_counts()] {
            assert_eq!(counts.len(), 3);
        }
        for (_, c) in train.user_counts() {
            assert_eq!(c, 8);
        }
        for (_, c) in valid.user_counts() {
            assert_eq!(c, 1);
        }
        for (_, c) in test.user_counts() {
            assert_eq!(c, 1);
        }
        assert_eq!(train.len() + valid.len() + test.len(), corpus.len());
    }

    #[test]
    fn split_is_seed_deterministic_and_seed_sensitive() {
        let corpus = small_corpus(3, 40, 12);
        let spec = SplitSpec { train: 0.8, valid: 0.1, test: 0.1, seed: 7 };
        let (a_tr, a_va, a_te) = split(&corpus, &spec).unwrap();
        let (b_tr, b_va, b_te) = split(&corpus, &spec).unwrap();
        assert_eq!(a_tr.triplets, b_tr.triplets);
        assert_eq!(a_va.triplets, b_va.triplets);
        assert_eq!(a_te.triplets, b_te.triplets);

        let other = SplitSpec { seed: 8, ..spec };
        let (c_tr, c_va, c_te) = split(&corpus, &other).unwrap();
        assert_eq!(c_tr.len(), a_tr.len());
        assert_eq!(c_va.len(), a_va.len());
        assert_eq!(c_te.len(), a_te.len());
        assert_ne!(
            (a_tr.triplets, a_va.triplets),
            (c_tr.triplets, c_va.triplets)
        );
    }

    #[test]
    fn split_rejects_users_with_too_few_samples() {
        let corpus = small_corpus(2, 2, 1);
        let spec = SplitSpec { train: 0.8, valid: 0.1, test: 0.1, seed: 1 };
        assert!(matches!(
            split(&corpus, &spec),
            Err(PepeError::TooFewSamplesToSplit { .. })
        ));
    }
}
