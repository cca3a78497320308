//! Sentences, corpora with per-domain splits, a whole-word tokenizer, CoNLL
//! reading/writing, and the synthetic multi-domain generator.

mod synthetic;

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::heads_registry::{Bio, LabelScheme};
use crate::rng::{derive, shuffled_indices};
use crate::IGNORE_INDEX;

pub use synthetic::{
    desk_default, generate_synthetic, AmbiguousEntity, DomainSpec, SyntheticSpec, CONTEXT_FLIP,
    CONTEXT_FLIP_ENTITY,
};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sentence {
    pub tokens: Vec<String>,
    pub labels: Vec<String>,
    pub domain: String,
    pub scheme_id: String,
}

impl Sentence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

/// True when every tag is in `scheme` and each `I-X` continues an `X` span.
pub fn is_valid_bio<S: AsRef<str>>(labels: &[S], scheme: &LabelScheme) -> bool {
    let mut prev: Option<&str> = None;
    for l in labels {
        let l = l.as_ref();
        if scheme.index_of(l).is_none() {
            return false;
        }
        match Bio::parse(l) {
            Some(Bio::Inside(t)) if prev != Some(t) => return false,
            Some(b) => prev = b.entity_type(),
            None => return false,
        }
    }
    true
}

/// Rewrites every dangling `I-X` (no open `X` span) as `B-X`; returns the
/// number of rewrites.
pub fn repair_bio(labels: &mut [String]) -> usize {
    let mut fixed = 0;
    let mut prev: Option<String> = None;
    for l in labels.iter_mut() {
        let next = match Bio::parse(l) {
            Some(Bio::Inside(t)) if prev.as_deref() != Some(t) => {
                let t = t.to_string();
                *l = format!("B-{t}");
                fixed += 1;
                Some(t)
            }
            Some(b) => b.entity_type().map(str::to_string),
            None => None,
        };
        prev = next;
    }
    fixed
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Global sentence indices of one domain's partitions.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSplit {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl DomainSplit {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    sentences: Vec<Sentence>,
    schemes: BTreeMap<String, LabelScheme>,
    domain_scheme: BTreeMap<String, String>,
    splits: BTreeMap<String, DomainSplit>,
}

impl Corpus {
    /// Validates schemes and BIO labels; every sentence starts in the train split.
    pub fn new(sentences: Vec<Sentence>, schemes: Vec<LabelScheme>) -> Result<Self> {
        let schemes: BTreeMap<String, LabelScheme> =
            schemes.into_iter().map(|s| (s.id.clone(), s)).collect();
        let mut domain_scheme = BTreeMap::new();
        let mut splits: BTreeMap<String, DomainSplit> = BTreeMap::new();
        for (i, s) in sentences.iter().enumerate() {
            let scheme = schemes.get(&s.scheme_id).ok_or_else(|| {
                Error::Data(format!("sentence {i} uses unknown scheme `{}`", s.scheme_id))
            })?;
            match domain_scheme.get(&s.domain) {
                None => {
                    domain_scheme.insert(s.domain.clone(), s.scheme_id.clone());
                }
                Some(id) if *id != s.scheme_id => {
                    return Err(Error::Data(format!(
                        "domain `{}` mixes schemes `{id}` and `{}`",
                        s.domain, s.scheme_id
                    )))
                }
                _ => {}
            }
            if s.tokens.len() != s.labels.len() {
                return Err(Error::Data(format!("sentence {i}: tokens and labels differ in length")));
            }
            if s.tokens.is_empty() {
                return Err(Error::Data(format!("sentence {i} is empty")));
            }
            if !is_valid_bio(&s.labels, scheme) {
                return Err(Error::Data(format!("sentence {i} has invalid BIO labels")));
            }
            splits.entry(s.domain.clone()).or_default().train.push(i);
        }
        Ok(Corpus {
            sentences,
            schemes,
            domain_scheme,
            splits,
        })
    }

    /// Re-partitions each domain independently: a seeded shuffle, then the
    /// first `test_frac` go to test, the next `dev_frac` to dev.
    pub fn with_splits(mut self, dev_frac: f64, test_frac: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&dev_frac) || !(0.0..1.0).contains(&test_frac) || dev_frac + test_frac >= 1.0 {
            return Err(Error::Parameter(format!(
                "split fractions dev={dev_frac}, test={test_frac} must be in [0,1) and sum below 1"
            )));
        }
        let mut by_domain: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, s) in self.sentences.iter().enumerate() {
            by_domain.entry(s.domain.clone()).or_default().push(i);
        }
        self.splits.clear();
        for (domain, idx) in by_domain {
            let mut rng = derive(seed, &format!("split/{domain}"));
            let order = shuffled_indices(idx.len(), &mut rng);
            let n = idx.len();
            let n_test = (n as f64 * test_frac).round() as usize;
            let n_dev = (n as f64 * dev_frac).round() as usize;
            let mut split = DomainSplit::default();
            for (k, &o) in order.iter().enumerate() {
                let part = if k < n_test {
                    &mut split.test
                } else if k < n_test + n_dev {
                    &mut split.dev
                } else {
                    &mut split.train
                };
                part.push(idx[o]);
            }
            split.train.sort_unstable();
            split.dev.sort_unstable();
            split.test.sort_unstable();
            self.splits.insert(domain, split);
        }
        Ok(self)
    }

    /// Rebuilds a corpus with explicit splits (as cached on disk).
    pub fn from_parts(
        sentences: Vec<Sentence>,
        schemes: Vec<LabelScheme>,
        splits: BTreeMap<String, DomainSplit>,
    ) -> Result<Self> {
        let mut c = Corpus::new(sentences, schemes)?;
        let mut seen = vec![false; c.sentences.len()];
        for (domain, split) in &splits {
            for &i in split.train.iter().chain(&split.dev).chain(&split.test) {
                let s = c
                    .sentences
                    .get(i)
                    .ok_or_else(|| Error::Data(format!("split index {i} out of range")))?;
                if s.domain != *domain {
                    return Err(Error::Data(format!("sentence {i} is not in domain `{domain}`")));
                }
                if std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Data(format!("sentence {i} is in two partitions")));
                }
            }
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(Error::Data(format!("sentence {i} is in no partition")));
        }
        c.splits = splits;
        Ok(c)
    }

    pub fn sentences(&self) -> &[Sentence] {
        &self.sentences
    }

    pub fn schemes(&self) -> impl Iterator<Item = &LabelScheme> {
        self.schemes.values()
    }

    pub fn domains(&self) -> Vec<String> {
        self.domain_scheme.keys().cloned().collect()
    }

    pub fn has_domain(&self, domain: &str) -> bool {
        self.domain_scheme.contains_key(domain)
    }

    /// Total sentences per domain, over all partitions.
    pub fn counts(&self) -> BTreeMap<String, usize> {
        let mut out = BTreeMap::new();
        for s in &self.sentences {
            *out.entry(s.domain.clone()).or_insert(0) += 1;
        }
        out
    }

    pub fn splits(&self) -> &BTreeMap<String, DomainSplit> {
        &self.splits
    }

    pub fn scheme_of(&self, domain: &str) -> Result<&LabelScheme> {
        let id = self
            .domain_scheme
            .get(domain)
            .ok_or_else(|| Error::Data(format!("domain `{domain}` is not in the corpus")))?;
        Ok(&self.schemes[id])
    }

    /// Domains labelled under `scheme_id`, in name order.
    pub fn domains_of_scheme(&self, scheme_id: &str) -> Vec<String> {
        self.domain_scheme
            .iter()
            .filter(|(_, s)| *s == scheme_id)
            .map(|(d, _)| d.clone())
            .collect()
    }

    pub fn indices(&self, domain: &str, split: Split) -> Result<&[usize]> {
        self.splits
            .get(domain)
            .map(|s| s.get(split))
            .ok_or_else(|| Error::Data(format!("domain `{domain}` is not in the corpus")))
    }

    pub fn split(&self, domain: &str, split: Split) -> Result<Vec<&Sentence>> {
        Ok(self.indices(domain, split)?.iter().map(|&i| &self.sentences[i]).collect())
    }

    /// Concatenation of `split` over `domains`, in the given domain order.
    pub fn pooled(&self, domains: &[String], split: Split) -> Result<Vec<&Sentence>> {
        let mut out = Vec::new();
        for d in domains {
            out.extend(self.split(d, split)?);
        }
        Ok(out)
    }
}

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const CLS: usize = 2;
const RESERVED: [&str; 3] = ["[PAD]", "[UNK]", "[CLS]"];

/// Whole-word vocabulary. Ids 0..3 are `[PAD]`, `[UNK]`, `[CLS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Tokenizer {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Tokenizer {
    /// Vocabulary of every surface form in `sentences`, sorted.
    pub fn fit<'a, I: IntoIterator<Item = &'a Sentence>>(sentences: I) -> Self {
        let mut words: Vec<String> = sentences
            .into_iter()
            .flat_map(|s| s.tokens.iter().cloned())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .filter(|w| !RESERVED.contains(&w.as_str()))
            .collect();
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.append(&mut words);
        Tokenizer::from_tokens(tokens).expect("fitted vocabulary is valid")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..3].iter().zip(RESERVED).any(|(a, b)| a != b) {
            return Err(Error::Data("vocabulary must start with [PAD], [UNK], [CLS]".into()));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary entry `{t}`")));
            }
        }
        Ok(Tokenizer { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn id(&self, word: &str) -> usize {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn ids<S: AsRef<str>>(&self, words: &[S]) -> Vec<usize> {
        words.iter().map(|w| self.id(w.as_ref())).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]).to_string())
            .collect()
    }
}

/// Model-ready form of one sentence.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    /// `[CLS]` followed by (possibly truncated) token ids.
    pub ids: Vec<usize>,
    /// Tag indices aligned with `ids`; the `[CLS]` slot is [`IGNORE_INDEX`].
    pub labels: Vec<usize>,
    pub pad_mask: Vec<bool>,
}

/// `[CLS]` + tokens, truncated to `max_len` positions in total.
pub fn encode(tok: &Tokenizer, s: &Sentence, scheme: &LabelScheme, max_len: usize) -> Result<Encoded> {
    let keep = s.tokens.len().min(max_len.max(1) - 1);
    let mut ids = Vec::with_capacity(keep + 1);
    let mut labels = Vec::with_capacity(keep + 1);
    ids.push(CLS);
    labels.push(IGNORE_INDEX);
    for (w, l) in s.tokens.iter().zip(&s.labels).take(keep) {
        ids.push(tok.id(w));
        labels.push(
            scheme
                .index_of(l)
                .ok_or_else(|| Error::Data(format!("tag `{l}` is not in scheme `{}`", scheme.id)))?,
        );
    }
    let pad_mask = vec![true; ids.len()];
    Ok(Encoded { ids, labels, pad_mask })
}

/// Token ids for inference: `[CLS]` + tokens, truncated to `max_len`.
pub fn encode_tokens<S: AsRef<str>>(tok: &Tokenizer, tokens: &[S], max_len: usize) -> Vec<usize> {
    let keep = tokens.len().min(max_len.max(1) - 1);
    std::iter::once(CLS)
        .chain(tokens[..keep].iter().map(|w| tok.id(w.as_ref())))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedConll {
    pub sentences: Vec<Sentence>,
    /// Dangling `I-X` tags rewritten to `B-X`.
    pub repairs: usize,
}

/// Reads `token<TAB>tag` lines with blank lines between sentences.
/// `-DOCSTART-` lines are skipped.
pub fn parse_conll(text: &str, scheme: &LabelScheme, domain: &str) -> Result<ParsedConll> {
    let mut sentences = Vec::new();
    let mut repairs = 0;
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut flush = |tokens: &mut Vec<String>, labels: &mut Vec<String>| {
        if tokens.is_empty() {
            return;
        }
        repairs += repair_bio(labels);
        sentences.push(Sentence {
            tokens: std::mem::take(tokens),
            labels: std::mem::take(labels),
            domain: domain.to_string(),
            scheme_id: scheme.id.clone(),
        });
    };
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut labels);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let (word, tag) = line.split_once('\t').ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "expected token<TAB>tag".into(),
        })?;
        let tag = tag.trim();
        if scheme.index_of(tag).is_none() {
            return Err(Error::Parse {
                line: n + 1,
                message: format!("tag `{tag}` is not in scheme `{}`", scheme.id),
            });
        }
        tokens.push(word.to_string());
        labels.push(tag.to_string());
    }
    flush(&mut tokens, &mut labels);
    Ok(ParsedConll { sentences, repairs })
}

pub fn write_conll<'a, I: IntoIterator<Item = &'a Sentence>>(sentences: I) -> String {
    let mut out = String::new();
    for s in sentences {
        for (w, l) in s.tokens.iter().zip(&s.labels) {
            out.push_str(w);
            out.push('\t');
            out.push_str(l);
            out.push('\n');
        }
        out.push('\n');
    }
    out
}
