//! Synthetic multi-user post-editing corpus generator.
//!
//! Source sentences come from a seeded template grammar over four topics.
//! The "machine translation" is a deterministic word-by-word mapping into a
//! romanized target-language token set, reordered verb-final, with systematic
//! word-choice errors on common nouns. Each user owns a [`UserStyleProfile`]
//! whose transforms (word choice, loanword keeping, politeness level, suffix
//! insertion) turn `mt` into that user's `pe`. The profiles double as the
//! oracle for the style-accuracy metric.

use std::collections::{BTreeMap, HashMap};


use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{Corpus, Triplet};
use crate::error::{PepeError, Result};
use crate::vocab::{self, TokenId, Vocabulary};

/// Politeness register applied to the sentence-final verb form.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolitenessMode {
    Formal,
    Informal,
    Unchanged,
}

/// Deterministic style transforms of one synthetic user.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UserStyleProfile {
    pub user_id: String,
    pub politeness_mode: PolitenessMode,
    /// Base token -> preferred replacement, applied to every occurrence.
    #[serde(default)]
    pub lexicon_choice: BTreeMap<String, String>,
    /// Replace translated tech terms with their loanword form.
    #[serde(default)]
    pub loanword_keep: bool,
    /// Token appended at the sentence-final position.
    #[serde(default)]
    pub insertion_suffix: Option<String>,
}

impl UserStyleProfile {
    /// Profile that leaves `mt` untouched.
    pub fn identity(user_id: &str) -> Self {
        Self {
            user_id: user_id.to_string(),
            politeness_mode: PolitenessMode::Unchanged,
            lexicon_choice: BTreeMap::new(),
            loanword_keep: false,
            insertion_suffix: None,
        }
    }

    /// Resolve the profile against a vocabulary for id-space application.
    pub fn compile(&self, vocab: &Vocabulary) -> Result<StyleTransform> {
        let lookup = |t: &str| {
            vocab.id(t).ok_or_else(|| PepeError::VocabMissingToken {
                token: t.to_string(),
            })
        };
        let mut lexicon = HashMap::new();
        for (from, to) in &self.lexicon_choice {
            lexicon.insert(lookup(from)?, lookup(to)?);
        }
        let mut loan = HashMap::new();
        if self.loanword_keep {
            for noun in TECH_NOUNS {
                loan.insert(lookup(noun.translated)?, lookup(noun.loanword)?);
            }
        }
        let mut politeness = HashMap::new();
        for verb in VERBS {
            politeness.insert(lookup(verb.plain)?, (lookup(verb.formal)?, lookup(verb.informal)?));
        }
        let suffix = match &self.insertion_suffix {
            Some(t) => Some(lookup(t)?),
            None => None,
        };
        Ok(StyleTransform {
            lexicon,
            loan,
            politeness,
            mode: self.politeness_mode,
            suffix,
        })
    }
}

/// A profile resolved to token-id space. Application is a pure function.
#[derive(Debug, Clone)]
pub struct StyleTransform {
    lexicon: HashMap<TokenId, TokenId>,
    loan: HashMap<TokenId, TokenId>,
    politeness: HashMap<TokenId, (TokenId, TokenId)>,
    mode: PolitenessMode,
    suffix: Option<TokenId>,
}

impl StyleTransform {
    /// Rewrite an `mt` sequence into the user's preferred form.
    ///
    /// Transform order: word choice, loanword keeping, politeness, suffix.
    /// Output length equals the input length plus one when a suffix applies.
    pub fn apply(&self, mt: &[TokenId]) -> Vec<TokenId> {
        let mut out = Vec::with_capacity(mt.len() + 1);
        for &tok in mt {
            out.push(self.apply_token(tok));
        }
        if let Some(suffix) = self.suffix {
            out.push(suffix);
        }
        out
    }

    fn apply_token(&self, tok: TokenId) -> TokenId {
        let mut t = tok;
        if let Some(&rep) = self.lexicon.get(&t) {
            t = rep;
        }
        if let Some(&loan) = self.loan.get(&t) {
            t = loan;
        }
        if let Some(&(formal, informal)) = self.politeness.get(&t) {
            t = match self.mode {
                PolitenessMode::Formal => formal,
                PolitenessMode::Informal => informal,
                PolitenessMode::Unchanged => t,
            };
        }
        t
    }

    pub fn suffix(&self) -> Option<TokenId> {
        self.suffix
    }
}

/// Apply a profile's transforms to one `mt` sequence.
pub fn apply_style(
    profile: &UserStyleProfile,
    vocab: &Vocabulary,
    mt: &[TokenId],
) -> Result<Vec<TokenId>> {
    Ok(profile.compile(vocab)?.apply(mt))
}

// ---------------------------------------------------------------------------
// Template grammar
// ---------------------------------------------------------------------------

struct VerbEntry {
    src: &'static str,
    plain: &'static str,
    formal: &'static str,
    informal: &'static str,
}

struct PairEntry {
    src: &'static str,
    tgt: &'static str,
}

struct TechNounEntry {
    src: &'static str,
    translated: &'static str,
    loanword: &'static str,
}

struct CommonNounEntry {
    src: &'static str,
    /// Systematically wrong sense emitted by the machine translation.
    wrong: &'static str,
    /// Correct sense, restored by user word-choice edits.
    right: &'static str,
}

struct AdjEntry {
    src: &'static str,
    base: &'static str,
    synonym: &'static str,
}

const SUBJECTS: &[PairEntry] = &[
    PairEntry { src: "i", tgt: "naneun" },
    PairEntry { src: "you", tgt: "dangsinneun" },
    PairEntry { src: "we", tgt: "urineun" },
    PairEntry { src: "they", tgt: "geudeureun" },
];

const DETERMINERS: &[PairEntry] = &[
    PairEntry { src: "the", tgt: "geu" },
    PairEntry { src: "a", tgt: "han" },
];

const VERBS: &[VerbEntry] = &[
    VerbEntry { src: "visit", plain: "bangmunhanda", formal: "bangmunhabnida", informal: "bangmunhaeyo" },
    VerbEntry { src: "check", plain: "hwaginhanda", formal: "hwaginhabnida", informal: "hwaginhaeyo" },
    VerbEntry { src: "read", plain: "ikneunda", formal: "ikseubnida", informal: "ilgeoyo" },
    VerbEntry { src: "write", plain: "sseunda", formal: "sseubnida", informal: "sseoyo" },
    VerbEntry { src: "send", plain: "bonaenda", formal: "bonaebnida", informal: "bonaeyo" },
    VerbEntry { src: "find", plain: "chatneunda", formal: "chatseubnida", informal: "chajayo" },
    VerbEntry { src: "open", plain: "yeonda", formal: "yeobnida", informal: "yeoreoyo" },
    VerbEntry { src: "make", plain: "mandeunda", formal: "mandeubnida", informal: "mandeureoyo" },
    VerbEntry { src: "review", plain: "geomtohanda", formal: "geomtohabnida", informal: "geomtohaeyo" },
    VerbEntry { src: "need", plain: "piryohada", formal: "piryohabnida", informal: "piryohaeyo" },
];

const MEDICAL_NOUNS: &[PairEntry] = &[
    PairEntry { src: "doctor", tgt: "uisa" },
    PairEntry { src: "hospital", tgt: "byeongwon" },
    PairEntry { src: "nurse", tgt: "ganhosa" },
    PairEntry { src: "patient", tgt: "hwanja" },
    PairEntry { src: "medicine", tgt: "yak" },
];

const SCHOOL_NOUNS: &[PairEntry] = &[
    PairEntry { src: "teacher", tgt: "seonsaeng" },
    PairEntry { src: "student", tgt: "haksaeng" },
    PairEntry { src: "school", tgt: "hakgyo" },
    PairEntry { src: "lesson", tgt: "sueop" },
    PairEntry { src: "homework", tgt: "sukje" },
];

const OFFICE_NOUNS: &[PairEntry] = &[
    PairEntry { src: "report", tgt: "bogoseo" },
    PairEntry { src: "meeting", tgt: "hoeui" },
    PairEntry { src: "manager", tgt: "bujang" },
    PairEntry { src: "budget", tgt: "yesan" },
    PairEntry { src: "contract", tgt: "gyeyak" },
];

const TECH_NOUNS: &[TechNounEntry] = &[
    TechNounEntry { src: "computer", translated: "jeonsangi", loanword: "keompyuteo" },
    TechNounEntry { src: "internet", translated: "tongsinmang", loanword: "inteonet" },
    TechNounEntry { src: "data", translated: "jaryo", loanword: "deiteo" },
    TechNounEntry { src: "file", translated: "munseo", loanword: "pail" },
    TechNounEntry { src: "system", translated: "chegye", loanword: "siseutem" },
    TechNounEntry { src: "camera", translated: "sajingi", loanword: "kamera" },
    TechNounEntry { src: "design", translated: "seolgye", loanword: "dijain" },
];

const COMMON_NOUNS: &[CommonNounEntry] = &[
    CommonNounEntry { src: "people", wrong: "inmul", right: "saramdeul" },
    CommonNounEntry { src: "time", wrong: "sigye", right: "sigan" },
    CommonNounEntry { src: "result", wrong: "gyeolsan", right: "gyeolgwa" },
];

const ADJECTIVES: &[AdjEntry] = &[
    AdjEntry { src: "new", base: "saeroun", synonym: "sinkyu" },
    AdjEntry { src: "big", base: "keun", synonym: "geodaehan" },
    AdjEntry { src: "fast", base: "ppareun", synonym: "sinsokhan" },
    AdjEntry { src: "important", base: "jungyohan", synonym: "haeksim" },
    AdjEntry { src: "old", base: "oraedoen", synonym: "gupan" },
];

const SUFFIX_TOKENS: &[&str] = &["yo", "^^"];

const TOPIC_COUNT: usize = 4;

/// Token pairs whose members map (translated -> loanword) under loanword
/// keeping; exposed for the style-accuracy oracle.
pub fn loanword_pairs() -> Vec<(&'static str, &'static str)> {
    TECH_NOUNS.iter().map(|n| (n.translated, n.loanword)).collect()
}

/// Wrong-sense corrections shared by the default profile roster.
pub fn shared_corrections() -> Vec<(&'static str, &'static str)> {
    COMMON_NOUNS.iter().map(|n| (n.wrong, n.right)).collect()
}

/// Build the closed vocabulary covering the grammar, the suffix tokens, and
/// one reserved token per profile user.
pub fn grammar_vocabulary(profiles: &[UserStyleProfile]) -> Result<Vocabulary> {
    let mut tokens: Vec<String> = [vocab::PAD, vocab::UNK, vocab::CLS, vocab::SEP, vocab::BOS, vocab::EOS]
        .iter()
        .map(|s| s.to_string())
        .collect();
    for p in profiles {
        tokens.push(vocab::user_token_surface(&p.user_id));
    }
    let mut push = |t: &str| tokens.push(t.to_string());
    for e in SUBJECTS {
        push(e.src);
        push(e.tgt);
    }
    for e in DETERMINERS {
        push(e.src);
        push(e.tgt);
    }
    for v in VERBS {
        push(v.src);
        push(v.plain);
        push(v.formal);
        push(v.informal);
    }
    for n in MEDICAL_NOUNS.iter().chain(SCHOOL_NOUNS).chain(OFFICE_NOUNS) {
        push(n.src);
        push(n.tgt);
    }
    for n in TECH_NOUNS {
        push(n.src);
        push(n.translated);
        push(n.loanword);
    }
    for n in COMMON_NOUNS {
        push(n.src);
        push(n.wrong);
        push(n.right);
    }
    for a in ADJECTIVES {
        push(a.src);
        push(a.base);
        push(a.synonym);
    }
    for s in SUFFIX_TOKENS {
        push(s);
    }
    Vocabulary::new(tokens)
}

/// One slot of a template sentence, in source order.
#[derive(Clone, Copy)]
enum Slot {
    Subject,
    Determiner,
    TopicNoun,
    CommonNoun,
    Adjective,
    Verb,
}

/// Templates are subject-verb-object on the source side; the translation
/// reorders the verb to the sentence-final position.
const TEMPLATES: &[&[Slot]] = &[
    &[Slot::Subject, Slot::Verb, Slot::Determiner, Slot::TopicNoun],
    &[Slot::Determiner, Slot::TopicNoun, Slot::Verb, Slot::Determiner, Slot::CommonNoun],
    &[Slot::Subject, Slot::Verb, Slot::Determiner, Slot::Adjective, Slot::TopicNoun],
    &[Slot::Determiner, Slot::TopicNoun, Slot::Verb, Slot::Determiner, Slot::Adjective, Slot::CommonNoun],
];

/// A sampled sentence as parallel (src, mt) token-id sequences.
fn sample_sentence(vocab: &Vocabulary, rng: &mut ChaCha8Rng) -> Result<(Vec<TokenId>, Vec<TokenId>)> {
    let topic = rng.gen_range(0..TOPIC_COUNT);
    let template = TEMPLATES[rng.gen_range(0..TEMPLATES.len())];

    let lookup = |t: &str| {
        vocab.id(t).ok_or_else(|| PepeError::VocabMissingToken {
            token: t.to_string(),
        })
    };

    let mut src = Vec::with_capacity(template.len());
    // (target token, is_verb) in source order; the verb moves to the end.
    let mut tgt: Vec<(TokenId, bool)> = Vec::with_capacity(template.len());
    for slot in template {
        let (s, t, is_verb) = match slot {
            Slot::Subject => {
                let e = &SUBJECTS[rng.gen_range(0..SUBJECTS.len())];
                (e.src, e.tgt, false)
            }
            Slot::Determiner => {
                let e = &DETERMINERS[rng.gen_range(0..DETERMINERS.len())];
                (e.src, e.tgt, false)
            }
            Slot::TopicNoun => match topic {
                0 => {
                    let e = &MEDICAL_NOUNS[rng.gen_range(0..MEDICAL_NOUNS.len())];
                    (e.src, e.tgt, false)
                }
                1 => {
                    let e = &SCHOOL_NOUNS[rng.gen_range(0..SCHOOL_NOUNS.len())];
                    (e.src, e.tgt, false)
                }
                2 => {
                    let e = &OFFICE_NOUNS[rng.gen_range(0..OFFICE_NOUNS.len())];
                    (e.src, e.tgt, false)
                }
                _ => {
                    let e = &TECH_NOUNS[rng.gen_range(0..TECH_NOUNS.len())];
                    (e.src, e.translated, false)
                }
            },
            Slot::CommonNoun => {
                let e = &COMMON_NOUNS[rng.gen_range(0..COMMON_NOUNS.len())];
                (e.src, e.wrong, false)
            }
            Slot::Adjective => {
                let e = &ADJECTIVES[rng.gen_range(0..ADJECTIVES.len())];
                (e.src, e.base, false)
            }
            Slot::Verb => {
                let e = &VERBS[rng.gen_range(0..VERBS.len())];
                (e.src, e.plain, true)
            }
        };
        src.push(lookup(s)?);
        tgt.push((lookup(t)?, is_verb));
    }

    let mut mt: Vec<TokenId> = tgt.iter().filter(|(_, v)| !v).map(|(t, _)| *t).collect();
    mt.extend(tgt.iter().filter(|(_, v)| *v).map(|(t, _)| *t));
    Ok((src, mt))
}

fn user_stream_seed(seed: u64, user_index: usize) -> u64 {
    // SplitMix64 step keeps per-user streams decorrelated while depending
    // only on (seed, position), never on profile contents.
    let mut z = seed
        .wrapping_add(0x9e37_79b9_7f4a_7c15u64.wrapping_mul(user_index as u64 + 1));
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Generate `n_per_user` triplets for every profile.
///
/// Source and translation streams depend only on the seed and the profile's
/// position, so corpora from profile lists differing in style fields share
/// identical `src`/`mt` streams. Regeneration with the same seed is
/// bit-identical.
pub fn generate_corpus(
    profiles: &[UserStyleProfile],
    n_per_user: usize,
    vocab: &Vocabulary,
    seed: u64,
) -> Result<Corpus> {
    if profiles.is_empty() {
        return Err(PepeError::Config("no profiles given".into()));
    }
    if n_per_user == 0 {
        return Err(PepeError::Config("n_per_user must be >= 1".into()));
    }
    {
        let mut seen = std::collections::HashSet::new();
        for p in profiles {
            if p.user_id.is_empty() {
                return Err(PepeError::Config("empty user_id in profiles".into()));
            }
            if !seen.insert(&p.user_id) {
                return Err(PepeError::Config(format!(
                    "duplicate user_id {:?} in profiles",
                    p.user_id
                )));
            }
        }
    }

    let mut triplets = Vec::with_capacity(profiles.len() * n_per_user);
    for (u, profile) in profiles.iter().enumerate() {
        let transform = profile.compile(vocab)?;
        let mut rng = ChaCha8Rng::seed_from_u64(user_stream_seed(seed, u));
        for _ in 0..n_per_user {
            let (src, mt) = sample_sentence(vocab, &mut rng)?;
            let pe = transform.apply(&mt);
            triplets.push(Triplet {
                user_id: profile.user_id.clone(),
                src,
                mt,
                pe,
            });
        }
    }
    Corpus::new(triplets, vocab.clone())
}

// ---------------------------------------------------------------------------
// Default profile roster
// ---------------------------------------------------------------------------

fn with_shared_corrections(mut extra: BTreeMap<String, String>) -> BTreeMap<String, String> {
    for n in COMMON_NOUNS {
        extra.insert(n.wrong.to_string(), n.right.to_string());
    }
    extra
}

/// The built-in roster: `n_users` main users with distinct styles plus
/// `n_background` low-volume users whose only edits are the shared
/// corrections (they form the task-adaptive pretraining pool).
pub fn default_profiles(n_users: usize, n_background: usize) -> Vec<UserStyleProfile> {
    let lex = |pairs: &[(&str, &str)]| {
        with_shared_corrections(
            pairs
                .iter()
                .map(|(a, b)| (a.to_string(), b.to_string()))
                .collect(),
        )
    };
    let styles = [
        (PolitenessMode::Formal, lex(&[("saeroun", "sinkyu"), ("keun", "geodaehan")]), true, None),
        (PolitenessMode::Informal, lex(&[("ppareun", "sinsokhan")]), false, None),
        (PolitenessMode::Unchanged, lex(&[("jungyohan", "haeksim"), ("saeroun", "sinkyu")]), true, Some("yo")),
        (PolitenessMode::Formal, lex(&[]), false, Some("^^")),
        (PolitenessMode::Informal, lex(&[("keun", "geodaehan"), ("oraedoen", "gupan")]), true, None),
        (PolitenessMode::Formal, lex(&[("ppareun", "sinsokhan"), ("jungyohan", "haeksim")]), false, None),
        (PolitenessMode::Informal, lex(&[("saeroun", "sinkyu")]), true, Some("yo")),
        (PolitenessMode::Unchanged, lex(&[("oraedoen", "gupan")]), true, None),
        (PolitenessMode::Formal, lex(&[("keun", "geodaehan")]), true, Some("^^")),
        (PolitenessMode::Informal, lex(&[("jungyohan", "haeksim"), ("oraedoen", "gupan")]), false, None),
    ];

    let mut profiles = Vec::with_capacity(n_users + n_background);
    for i in 0..n_users {
        let (mode, lexicon, loan, suffix) = &styles[i % styles.len()];
        profiles.push(UserStyleProfile {
            user_id: format!("u{:02}", i + 1),
            politeness_mode: *mode,
            lexicon_choice: lexicon.clone(),
            loanword_keep: *loan,
            insertion_suffix: suffix.map(str::to_string),
        });
    }
    for i in 0..n_background {
        profiles.push(UserStyleProfile {
            user_id: format!("bg{:02}", i + 1),
            politeness_mode: PolitenessMode::Unchanged,
            lexicon_choice: with_shared_corrections(BTreeMap::new()),
            loanword_keep: false,
            insertion_suffix: None,
        });
    }
    profiles
}
