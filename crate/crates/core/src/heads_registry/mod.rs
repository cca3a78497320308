//! Label schemes, classifier heads, and the domain → (adapter, head) registry.
//!
//! Every domain owns exactly one adapter. Heads are keyed by label scheme, so
//! domains with identical schemes share one head.

pub mod bundle;
pub use bundle::{Bundle, BundleError};

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{init_adapter, AdapterHyper, AdapterSet};
use crate::encoder::{CoreModel, EncoderConfig};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Tape, Tensor, Var};

/// Ordered BIO tag set. Tag order defines head output indices.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelScheme {
    pub id: String,
    pub tags: Vec<String>,
}

/// A parsed BIO tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Bio<'a> {
    Outside,
    Begin(&'a str),
    Inside(&'a str),
}

impl<'a> Bio<'a> {
    pub fn parse(tag: &'a str) -> Option<Self> {
        if tag == "O" {
            return Some(Bio::Outside);
        }
        let (prefix, ty) = tag.split_once('-')?;
        if ty.is_empty() {
            return None;
        }
        match prefix {
            "B" => Some(Bio::Begin(ty)),
            "I" => Some(Bio::Inside(ty)),
            _ => None,
        }
    }

    pub fn entity_type(self) -> Option<&'a str> {
        match self {
            Bio::Outside => None,
            Bio::Begin(t) | Bio::Inside(t) => Some(t),
        }
    }
}

impl LabelScheme {
    pub fn new<I, S>(id: impl Into<String>, tags: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let scheme = LabelScheme {
            id: id.into(),
            tags: tags.into_iter().map(Into::into).collect(),
        };
        scheme.validate()?;
        Ok(scheme)
    }

    /// `O` followed by `B-`/`I-` pairs, one per entity type, in the given order.
    pub fn from_types(id: impl Into<String>, types: &[&str]) -> Self {
        let mut tags = vec!["O".to_string()];
        for t in types {
            tags.push(format!("B-{t}"));
            tags.push(format!("I-{t}"));
        }
        LabelScheme::new(id, tags).expect("generated scheme is valid")
    }

    /// Twenty-one tags: `O` plus ten entity types.
    pub fn wide() -> Self {
        LabelScheme::from_types(
            "wide-21",
            &["PER", "ORG", "LOC", "FAC", "PRO", "EVE", "DAT", "TIM", "MON", "PCT"],
        )
    }

    /// Eleven tags: `O`, four named types, and a catch-all `MISC`.
    pub fn compact() -> Self {
        LabelScheme::from_types("compact-misc", &["PER", "ORG", "LOC", "EVT", "MISC"])
    }

    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Parameter(format!("scheme `{}`: {m}", self.id)));
        if !self.tags.iter().any(|t| t == "O") {
            return err("missing the O tag".into());
        }
        let mut seen = std::collections::BTreeSet::new();
        for t in &self.tags {
            if !seen.insert(t.as_str()) {
                return err(format!("duplicate tag {t}"));
            }
            match Bio::parse(t) {
                None => return err(format!("`{t}` is not a BIO tag")),
                Some(Bio::Inside(ty)) if !self.tags.iter().any(|b| *b == format!("B-{ty}")) => {
                    return err(format!("{t} has no matching B-{ty}"));
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tags.is_empty()
    }

    pub fn index_of(&self, tag: &str) -> Option<usize> {
        self.tags.iter().position(|t| t == tag)
    }

    pub fn outside_index(&self) -> usize {
        self.index_of("O").expect("validated scheme has O")
    }

    pub fn entity_types(&self) -> Vec<String> {
        let mut types: Vec<String> = Vec::new();
        for t in &self.tags {
            if let Some(ty) = Bio::parse(t).and_then(Bio::entity_type) {
                if !types.iter().any(|x| x == ty) {
                    types.push(ty.to_string());
                }
            }
        }
        types
    }
}

/// Linear map from hidden states to scores: `x·W + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    /// `d_in × d_out`
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    pub fn new(d_in: usize, d_out: usize, rng: &mut Rng) -> Self {
        Linear {
            weight: Tensor::randn(&[d_in, d_out], 0.02, rng).with_grad(),
            bias: Tensor::zeros(&[d_out]).with_grad(),
        }
    }

    pub fn apply(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let w = tape.leaf(&self.weight);
        let b = tape.leaf(&self.bias);
        let y = tape.matmul(x, w)?;
        tape.add_row(y, b)
    }

    pub fn outputs(&self) -> usize {
        self.bias.numel()
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        vec![&self.weight, &self.bias]
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Token classification layer for one label scheme.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierHead {
    pub id: String,
    pub scheme_id: String,
    pub linear: Linear,
    frozen: bool,
}

impl ClassifierHead {
    pub fn new(id: impl Into<String>, scheme: &LabelScheme, d_model: usize, rng: &mut Rng) -> Self {
        ClassifierHead {
            id: id.into(),
            scheme_id: scheme.id.clone(),
            linear: Linear::new(d_model, scheme.len(), rng),
            frozen: false,
        }
    }

    pub(crate) fn from_parts(id: String, scheme_id: String, linear: Linear, frozen: bool) -> Self {
        let mut head = ClassifierHead {
            id,
            scheme_id,
            linear,
            frozen: false,
        };
        if frozen {
            head.freeze();
        }
        head
    }

    pub fn n_tags(&self) -> usize {
        self.linear.outputs()
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn freeze(&mut self) {
        for t in self.linear.tensors_mut() {
            t.set_requires_grad(false);
        }
        self.frozen = true;
    }

    pub fn unfreeze(&mut self) {
        for t in self.linear.tensors_mut() {
            t.set_requires_grad(true);
        }
        self.frozen = false;
    }

    pub fn logits(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        self.linear.apply(tape, hidden)
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.linear.tensors()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.linear.tensors_mut()
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        crate::tensor::params_bytes(self.tensors())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainEntry {
    pub adapter_id: String,
    pub head_id: String,
}

/// Everything needed to tag one domain.
#[derive(Debug, Clone, Copy)]
pub struct Resolved<'a> {
    pub core: &'a CoreModel,
    pub adapter: &'a AdapterSet,
    pub head: &'a ClassifierHead,
    pub scheme: &'a LabelScheme,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct DomainRegistry {
    domains: BTreeMap<String, DomainEntry>,
    adapters: BTreeMap<String, AdapterSet>,
    heads: BTreeMap<String, ClassifierHead>,
    schemes: BTreeMap<String, LabelScheme>,
}

pub fn adapter_id_for(domain: &str) -> String {
    format!("adapter/{domain}")
}

pub fn head_id_for(scheme: &LabelScheme) -> String {
    format!("head/{}", scheme.id)
}

impl DomainRegistry {
    pub fn new() -> Self {
        DomainRegistry::default()
    }

    /// Adds a domain with a fresh adapter; reuses the scheme's head if one
    /// exists, otherwise creates it.
    pub fn register_domain(
        &mut self,
        domain: &str,
        scheme: &LabelScheme,
        hyper: &AdapterHyper,
        cfg: &EncoderConfig,
        rng: &mut Rng,
    ) -> Result<(String, String)> {
        let adapter = init_adapter(adapter_id_for(domain), hyper, cfg, rng)?;
        self.register_with(domain, scheme, adapter, cfg.d_model, rng)
    }

    /// Like [`register_domain`](Self::register_domain) with a caller-built adapter.
    pub fn register_with(
        &mut self,
        domain: &str,
        scheme: &LabelScheme,
        adapter: AdapterSet,
        d_model: usize,
        rng: &mut Rng,
    ) -> Result<(String, String)> {
        if self.domains.contains_key(domain) {
            return Err(Error::Registration(format!("domain `{domain}` is already registered")));
        }
        if self.adapters.contains_key(&adapter.id) {
            return Err(Error::Registration(format!("adapter id `{}` is already in use", adapter.id)));
        }
        scheme.validate()?;
        if let Some(existing) = self.schemes.get(&scheme.id) {
            if existing != scheme {
                return Err(Error::Registration(format!(
                    "scheme `{}` conflicts with the registered scheme of the same id",
                    scheme.id
                )));
            }
        }
        let head_id = head_id_for(scheme);
        self.schemes
            .entry(scheme.id.clone())
            .or_insert_with(|| scheme.clone());
        self.heads
            .entry(head_id.clone())
            .or_insert_with(|| ClassifierHead::new(head_id.clone(), scheme, d_model, rng));
        let adapter_id = adapter.id.clone();
        self.adapters.insert(adapter_id.clone(), adapter);
        self.domains.insert(
            domain.to_string(),
            DomainEntry {
                adapter_id: adapter_id.clone(),
                head_id: head_id.clone(),
            },
        );
        Ok((adapter_id, head_id))
    }

    pub fn resolve<'a>(&'a self, core: &'a CoreModel, domain: &str) -> Result<Resolved<'a>> {
        let entry = self.entry(domain)?;
        let head = &self.heads[&entry.head_id];
        Ok(Resolved {
            core,
            adapter: &self.adapters[&entry.adapter_id],
            head,
            scheme: &self.schemes[&head.scheme_id],
        })
    }

    pub fn entry(&self, domain: &str) -> Result<&DomainEntry> {
        self.domains.get(domain).ok_or_else(|| Error::UnknownDomain {
            domain: domain.to_string(),
            known: self.domain_names(),
        })
    }

    pub fn domain_names(&self) -> Vec<String> {
        self.domains.keys().cloned().collect()
    }

    pub fn domains(&self) -> impl Iterator<Item = (&String, &DomainEntry)> {
        self.domains.iter()
    }

    /// Domains whose head emits `scheme_id`, in name order.
    pub fn domains_of_scheme(&self, scheme_id: &str) -> Vec<String> {
        self.domains
            .iter()
            .filter(|(_, e)| self.heads[&e.head_id].scheme_id == scheme_id)
            .map(|(d, _)| d.clone())
            .collect()
    }

    pub fn adapters(&self) -> impl Iterator<Item = &AdapterSet> {
        self.adapters.values()
    }

    pub fn heads(&self) -> impl Iterator<Item = &ClassifierHead> {
        self.heads.values()
    }

    pub fn schemes(&self) -> impl Iterator<Item = &LabelScheme> {
        self.schemes.values()
    }

    pub fn scheme(&self, id: &str) -> Option<&LabelScheme> {
        self.schemes.get(id)
    }

    pub fn scheme_of(&self, domain: &str) -> Result<&LabelScheme> {
        let entry = self.entry(domain)?;
        Ok(&self.schemes[&self.heads[&entry.head_id].scheme_id])
    }

    pub fn adapter(&self, id: &str) -> Option<&AdapterSet> {
        self.adapters.get(id)
    }

    pub fn head(&self, id: &str) -> Option<&ClassifierHead> {
        self.heads.get(id)
    }

    pub fn head_mut(&mut self, id: &str) -> Option<&mut ClassifierHead> {
        self.heads.get_mut(id)
    }

    pub fn adapter_mut(&mut self, id: &str) -> Option<&mut AdapterSet> {
        self.adapters.get_mut(id)
    }

    /// Swaps in a trained adapter for `domain`, keeping the registered id.
    pub fn replace_adapter(&mut self, domain: &str, mut adapter: AdapterSet) -> Result<()> {
        let id = self.entry(domain)?.adapter_id.clone();
        adapter.id = id.clone();
        self.adapters.insert(id, adapter);
        Ok(())
    }

    /// Replaces a head's weights (e.g. after pooled pre-training).
    pub fn replace_head(&mut self, head: ClassifierHead) -> Result<()> {
        if !self.heads.contains_key(&head.id) {
            return Err(Error::Registration(format!("unknown head `{}`", head.id)));
        }
        self.heads.insert(head.id.clone(), head);
        Ok(())
    }

    /// Removes a domain and its adapter; drops the head and scheme if no
    /// other domain uses them.
    pub fn unregister(&mut self, domain: &str) -> Result<()> {
        let entry = self.entry(domain)?.clone();
        self.domains.remove(domain);
        self.adapters.remove(&entry.adapter_id);
        if !self.domains.values().any(|e| e.head_id == entry.head_id) {
            if let Some(h) = self.heads.remove(&entry.head_id) {
                self.schemes.remove(&h.scheme_id);
            }
        }
        Ok(())
    }

    pub(crate) fn from_parts(
        domains: BTreeMap<String, DomainEntry>,
        adapters: BTreeMap<String, AdapterSet>,
        heads: BTreeMap<String, ClassifierHead>,
        schemes: BTreeMap<String, LabelScheme>,
    ) -> Result<Self> {
        let reg = DomainRegistry {
            domains,
            adapters,
            heads,
            schemes,
        };
        reg.check_integrity()?;
        Ok(reg)
    }

    /// Bijection and reference checks.
    pub fn check_integrity(&self) -> Result<()> {
        let mut used = std::collections::BTreeSet::new();
        for (d, e) in &self.domains {
            if !self.adapters.contains_key(&e.adapter_id) {
                return Err(Error::Registration(format!("domain `{d}` points at missing adapter")));
            }
            if !used.insert(&e.adapter_id) {
                return Err(Error::Registration(format!("adapter `{}` is shared", e.adapter_id)));
            }
            let head = self
                .heads
                .get(&e.head_id)
                .ok_or_else(|| Error::Registration(format!("domain `{d}` points at missing head")))?;
            let scheme = self
                .schemes
                .get(&head.scheme_id)
                .ok_or_else(|| Error::Registration(format!("head `{}` has no scheme", head.id)))?;
            if scheme.len() != head.n_tags() {
                return Err(Error::Registration(format!(
                    "head `{}` has {} outputs for {} tags",
                    head.id,
                    head.n_tags(),
                    scheme.len()
                )));
            }
        }
        Ok(())
    }
}
