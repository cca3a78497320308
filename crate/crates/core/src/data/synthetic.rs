//! Seeded generator for imbalanced multi-domain corpora where some entity
//! surface forms carry a different gold type depending on the domain.
//!
//! Two kinds of sentence are produced:
//!
//! * domain sentences, from per-domain templates built out of topical words,
//!   shared filler, and unambiguous entities preceded by a type cue word;
//! * neutral sentences (at `ambiguity_rate`), from a small set of templates
//!   made only of shared words with one ambiguous entity slot. Nothing in a
//!   neutral sentence reveals the domain, so its gold type can only be
//!   recovered by a model that knows which domain it is tagging.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::{Corpus, Sentence};
use crate::error::{Error, Result};
use crate::heads_registry::LabelScheme;
use crate::rng::{derive, shuffled_indices, Rng};

/// The sentence whose entity flips between ORG and LOC by domain.
pub const CONTEXT_FLIP: &str = "the prince proved loyal to united states";
pub const CONTEXT_FLIP_ENTITY: &str = "united states";

const NEUTRAL_TEMPLATES: &[&str] = &[
    "the prince proved loyal to {}",
    "everyone was talking about {} again",
    "we heard a lot about {} today",
    "nobody expected {} to show up",
    "{} came up in the conversation",
    "they wrote a long note about {}",
    "i keep thinking about {}",
    "this is what {} looks like now",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub scheme_id: String,
    pub budget: usize,
}

/// A surface form whose gold type depends on the domain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AmbiguousEntity {
    /// Space-separated tokens.
    pub surface: String,
    pub scheme_id: String,
    pub default_type: String,
    /// Domain → entity type, for domains that deviate from `default_type`.
    #[serde(default)]
    pub overrides: BTreeMap<String, String>,
    /// Relative mention weight per domain (1.0 when absent; 0 excludes it).
    #[serde(default)]
    pub weights: BTreeMap<String, f64>,
}

impl AmbiguousEntity {
    pub fn type_in(&self, domain: &str) -> &str {
        self.overrides.get(domain).unwrap_or(&self.default_type)
    }

    pub fn weight_in(&self, domain: &str) -> f64 {
        self.weights.get(domain).copied().unwrap_or(1.0)
    }

    pub fn tokens(&self) -> Vec<String> {
        self.surface.split_whitespace().map(str::to_string).collect()
    }

    /// BIO tags for one mention in `domain`.
    pub fn labels_in(&self, domain: &str) -> Vec<String> {
        let t = self.type_in(domain);
        (0..self.tokens().len())
            .map(|i| if i == 0 { format!("B-{t}") } else { format!("I-{t}") })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub seed: u64,
    pub schemes: Vec<LabelScheme>,
    pub domains: Vec<DomainSpec>,
    pub ambiguous_entities: Vec<AmbiguousEntity>,
    /// Fraction of each domain's sentences that are neutral carriers of an
    /// ambiguous entity.
    pub ambiguity_rate: f64,
    pub names_per_type: usize,
    pub topical_words_per_domain: usize,
    pub filler_words: usize,
    pub templates_per_domain: usize,
    pub dev_fraction: f64,
    pub test_fraction: f64,
}

impl SyntheticSpec {
    pub fn scheme(&self, id: &str) -> Option<&LabelScheme> {
        self.schemes.iter().find(|s| s.id == id)
    }

    pub fn domain(&self, name: &str) -> Option<&DomainSpec> {
        self.domains.iter().find(|d| d.name == name)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Parameter(m));
        if !(0.0..=1.0).contains(&self.ambiguity_rate) {
            return bad(format!("ambiguity_rate {} is outside [0, 1]", self.ambiguity_rate));
        }
        if self.names_per_type == 0 || self.topical_words_per_domain == 0 || self.templates_per_domain == 0 {
            return bad("vocabulary pool sizes must be positive".into());
        }
        for s in &self.schemes {
            s.validate()?;
        }
        let mut names = BTreeSet::new();
        for d in &self.domains {
            if !names.insert(d.name.as_str()) {
                return bad(format!("domain `{}` listed twice", d.name));
            }
            if d.budget == 0 {
                return bad(format!("domain `{}` has a zero budget", d.name));
            }
            if self.scheme(&d.scheme_id).is_none() {
                return bad(format!("domain `{}` uses unknown scheme `{}`", d.name, d.scheme_id));
            }
        }
        for e in &self.ambiguous_entities {
            let Some(scheme) = self.scheme(&e.scheme_id) else {
                return bad(format!("entity `{}` uses unknown scheme `{}`", e.surface, e.scheme_id));
            };
            if e.tokens().is_empty() {
                return bad("ambiguous entity with empty surface".into());
            }
            let users: Vec<&DomainSpec> = self
                .domains
                .iter()
                .filter(|d| d.scheme_id == e.scheme_id && e.weight_in(&d.name) > 0.0)
                .collect();
            for d in e.overrides.keys().chain(e.weights.keys()) {
                if !self.domains.iter().any(|x| x.name == *d && x.scheme_id == e.scheme_id) {
                    return bad(format!("entity `{}` names domain `{d}` outside its scheme", e.surface));
                }
            }
            if e.weights.values().any(|w| !w.is_finite() || *w < 0.0) {
                return bad(format!("entity `{}` has a negative weight", e.surface));
            }
            let types: BTreeSet<&str> = users.iter().map(|d| e.type_in(&d.name)).collect();
            for t in &types {
                if scheme.index_of(&format!("B-{t}")).is_none() {
                    return bad(format!("entity `{}`: type {t} not in scheme `{}`", e.surface, scheme.id));
                }
            }
            if types.len() < 2 {
                return bad(format!("entity `{}` has fewer than two labels across domains", e.surface));
            }
        }
        if !(0.0..1.0).contains(&self.dev_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || self.dev_fraction + self.test_fraction >= 1.0
        {
            return bad("dev/test fractions must be in [0,1) and sum below 1".into());
        }
        Ok(())
    }
}

/// Procedural vocabulary: pronounceable, globally unique, and disjoint from
/// every literal word used elsewhere in the corpus.
struct WordSource {
    rng: Rng,
    used: HashSet<String>,
}

impl WordSource {
    fn word(&mut self) -> String {
        const ONSET: &[&str] = &["b", "d", "f", "g", "k", "l", "m", "n", "p", "r", "s", "t", "v", "z", "sh", "br", "kl", "tr"];
        const VOWEL: &[&str] = &["a", "e", "i", "o", "u", "ai", "ou"];
        const CODA: &[&str] = &["", "", "", "n", "r", "l", "s", "k"];
        loop {
            let syllables = self.rng.random_range(2..=3);
            let mut w = String::new();
            for _ in 0..syllables {
                w.push_str(ONSET[self.rng.random_range(0..ONSET.len())]);
                w.push_str(VOWEL[self.rng.random_range(0..VOWEL.len())]);
            }
            w.push_str(CODA[self.rng.random_range(0..CODA.len())]);
            if self.used.insert(w.clone()) {
                return w;
            }
        }
    }

    fn words(&mut self, n: usize) -> Vec<String> {
        (0..n).map(|_| self.word()).collect()
    }
}

#[derive(Debug, Clone)]
enum Slot {
    Word(String),
    Topical,
    Filler,
    Entity(String),
}

fn entity_types(scheme: &LabelScheme) -> Vec<String> {
    scheme.entity_types()
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;

    let mut literal: HashSet<String> = NEUTRAL_TEMPLATES
        .iter()
        .flat_map(|t| t.split_whitespace())
        .filter(|w| *w != "{}")
        .map(str::to_string)
        .collect();
    for e in &spec.ambiguous_entities {
        literal.extend(e.tokens());
    }
    let mut words = WordSource {
        rng: derive(spec.seed, "synthetic/vocab"),
        used: literal,
    };

    let all_types: BTreeSet<String> = spec.schemes.iter().flat_map(entity_types).collect();
    let mut names: BTreeMap<String, Vec<Vec<String>>> = BTreeMap::new();
    let mut cues: BTreeMap<String, Vec<String>> = BTreeMap::new();
    for t in &all_types {
        let pool = (0..spec.names_per_type)
            .map(|_| {
                let n = if words.rng.random_bool(0.3) { 2 } else { 1 };
                words.words(n)
            })
            .collect();
        names.insert(t.clone(), pool);
        cues.insert(t.clone(), words.words(3));
    }
    let filler = words.words(spec.filler_words.max(1));
    let topical: BTreeMap<String, Vec<String>> = spec
        .domains
        .iter()
        .map(|d| (d.name.clone(), words.words(spec.topical_words_per_domain)))
        .collect();

    let mut sentences = Vec::new();
    for d in &spec.domains {
        let scheme = spec.scheme(&d.scheme_id).expect("validated");
        let types = entity_types(scheme);

        let mut trng = derive(spec.seed, &format!("synthetic/templates/{}", d.name));
        let templates: Vec<Vec<Slot>> = (0..spec.templates_per_domain)
            .map(|_| {
                let context = trng.random_range(4..=7);
                let mut slots: Vec<Slot> = (0..context)
                    .map(|i| if i < 2 || trng.random_bool(0.4) { Slot::Topical } else { Slot::Filler })
                    .collect();
                let n_ent = if trng.random_bool(0.5) { 2 } else { 1 };
                for _ in 0..n_ent {
                    let t = types[trng.random_range(0..types.len())].clone();
                    let cue = cues[&t][trng.random_range(0..3)].clone();
                    let at = trng.random_range(0..=slots.len());
                    slots.insert(at, Slot::Entity(t));
                    slots.insert(at, Slot::Word(cue));
                }
                slots
            })
            .collect();

        let carriers: Vec<&AmbiguousEntity> = spec
            .ambiguous_entities
            .iter()
            .filter(|e| e.scheme_id == d.scheme_id && e.weight_in(&d.name) > 0.0)
            .collect();
        let picker = if carriers.is_empty() {
            None
        } else {
            Some(
                WeightedIndex::new(carriers.iter().map(|e| e.weight_in(&d.name)))
                    .map_err(|e| Error::Parameter(format!("domain `{}` weights: {e}", d.name)))?,
            )
        };

        let mut rng = derive(spec.seed, &format!("synthetic/sentences/{}", d.name));
        let n_neutral = match picker {
            Some(_) => (d.budget as f64 * spec.ambiguity_rate).round() as usize,
            None => 0,
        };
        let mut neutral = vec![false; d.budget];
        for &i in shuffled_indices(d.budget, &mut rng).iter().take(n_neutral) {
            neutral[i] = true;
        }

        for &is_neutral in &neutral {
            let mut tokens = Vec::new();
            let mut labels = Vec::new();
            if is_neutral {
                let picker = picker.as_ref().expect("carriers exist");
                let e = carriers[picker.sample(&mut rng)];
                let template = NEUTRAL_TEMPLATES[rng.random_range(0..NEUTRAL_TEMPLATES.len())];
                for w in template.split_whitespace() {
                    if w == "{}" {
                        tokens.extend(e.tokens());
                        labels.extend(e.labels_in(&d.name));
                    } else {
                        tokens.push(w.to_string());
                        labels.push("O".to_string());
                    }
                }
            } else {
                let template = &templates[rng.random_range(0..templates.len())];
                for slot in template {
                    match slot {
                        Slot::Word(w) => {
                            tokens.push(w.clone());
                            labels.push("O".into());
                        }
                        Slot::Topical => {
                            let pool = &topical[&d.name];
                            tokens.push(pool[rng.random_range(0..pool.len())].clone());
                            labels.push("O".into());
                        }
                        Slot::Filler => {
                            tokens.push(filler[rng.random_range(0..filler.len())].clone());
                            labels.push("O".into());
                        }
                        Slot::Entity(t) => {
                            let pool = &names[t];
                            let name = &pool[rng.random_range(0..pool.len())];
                            for (i, w) in name.iter().enumerate() {
                                tokens.push(w.clone());
                                labels.push(if i == 0 { format!("B-{t}") } else { format!("I-{t}") });
                            }
                        }
                    }
                }
            }
            sentences.push(Sentence {
                tokens,
                labels,
                domain: d.name.clone(),
                scheme_id: d.scheme_id.clone(),
            });
        }
    }

    Corpus::new(sentences, spec.schemes.clone())?.with_splits(spec.dev_fraction, spec.test_fraction, spec.seed)
}

/// The desk-scale setup: a 21-tag pair (`formal`, `informal`) and ten
/// skewed 11-tag domains, with ambiguous entities arranged so that every
/// domain is outvoted on at least one of them and smaller domains on more.
pub fn desk_default(seed: u64) -> SyntheticSpec {
    let wide = LabelScheme::wide();
    let compact = LabelScheme::compact();

    let b_domains: [(&str, usize); 10] = [
        ("sport", 2000),
        ("news", 1200),
        ("game", 800),
        ("it", 500),
        ("econ", 350),
        ("politics", 250),
        ("travel", 180),
        ("med", 140),
        ("art", 120),
        ("acad", 100),
    ];
    let mut domains = vec![
        DomainSpec {
            name: "formal".into(),
            scheme_id: wide.id.clone(),
            budget: 1000,
        },
        DomainSpec {
            name: "informal".into(),
            scheme_id: wide.id.clone(),
            budget: 600,
        },
    ];
    domains.extend(b_domains.iter().map(|&(name, budget)| DomainSpec {
        name: name.into(),
        scheme_id: compact.id.clone(),
        budget,
    }));

    // Mention weight a domain gives to entities on which it is outvoted.
    let outvoted_weight = |d: &str| match d {
        "sport" | "news" => 1.0,
        "game" => 1.2,
        "it" => 1.5,
        "econ" => 1.8,
        "politics" => 2.0,
        "travel" => 2.5,
        _ => 3.0,
    };

    let mut entities = Vec::new();
    let mut compact_entity = |surface: &str, default: &str, alt: &str, minority: &[&str], scale: f64| {
        let overrides = minority.iter().map(|d| (d.to_string(), alt.to_string())).collect();
        let weights = b_domains
            .iter()
            .map(|&(d, _)| {
                let w = if minority.contains(&d) { outvoted_weight(d) } else { 1.0 };
                (d.to_string(), w * scale)
            })
            .collect();
        entities.push(AmbiguousEntity {
            surface: surface.into(),
            scheme_id: "compact-misc".into(),
            default_type: default.into(),
            overrides,
            weights,
        });
    };
    compact_entity(CONTEXT_FLIP_ENTITY, "LOC", "ORG", &["news", "econ", "politics"], 3.0);
    compact_entity("tesla", "ORG", "PER", &["sport", "acad"], 1.0);
    compact_entity("jordan", "PER", "LOC", &["med", "art"], 1.0);
    compact_entity("amazon", "ORG", "LOC", &["game", "med", "acad"], 1.0);
    compact_entity("paris", "LOC", "PER", &["it", "travel", "art"], 1.0);
    compact_entity("lincoln", "PER", "ORG", &["econ", "med", "acad"], 1.0);
    compact_entity("mercury", "MISC", "PER", &["politics", "travel", "art", "acad"], 1.0);
    compact_entity("phoenix", "LOC", "ORG", &["it", "med", "art"], 1.0);
    compact_entity("victoria", "PER", "LOC", &["game", "travel", "acad"], 1.0);
    compact_entity("orion", "MISC", "EVT", &["sport", "politics"], 1.0);
    compact_entity("sahara", "LOC", "EVT", &["econ", "acad", "art"], 1.0);

    // Two-domain scheme: each side is outvoted on three entities because the
    // other side mentions them much more often.
    let mut wide_entity = |surface: &str, default: &str, alt: &str, outvoted: &str| {
        let other = if outvoted == "formal" { "informal" } else { "formal" };
        let heavy = if outvoted == "formal" { 4.0 } else { 3.0 };
        entities.push(AmbiguousEntity {
            surface: surface.into(),
            scheme_id: "wide-21".into(),
            default_type: default.into(),
            overrides: [(outvoted.to_string(), alt.to_string())].into(),
            weights: [(outvoted.to_string(), 1.0), (other.to_string(), heavy)].into(),
        });
    };
    wide_entity("apollo", "PRO", "PER", "formal");
    wide_entity("summit", "EVE", "FAC", "formal");
    wide_entity("castle", "FAC", "ORG", "formal");
    wide_entity("noon", "TIM", "PER", "informal");
    wide_entity("dollar", "MON", "PRO", "informal");
    wide_entity("olympia", "LOC", "EVE", "informal");

    SyntheticSpec {
        seed,
        schemes: vec![wide, compact],
        domains,
        ambiguous_entities: entities,
        ambiguity_rate: 0.4,
        names_per_type: 30,
        topical_words_per_domain: 12,
        filler_words: 40,
        templates_per_domain: 8,
        dev_fraction: 0.1,
        test_fraction: 0.2,
    }
}
