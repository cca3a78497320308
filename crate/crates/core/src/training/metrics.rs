//! Exact-span entity scoring.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::data::Sentence;
use crate::error::{Error, Result};
use crate::heads_registry::Bio;

/// `[start, end)` token range with its entity type.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Span {
    pub ty: String,
    pub start: usize,
    pub end: usize,
}

/// Entity spans of a BIO sequence. A dangling `I-X` opens a new span, the
/// same reading the decoder's repair step produces.
pub fn spans<S: AsRef<str>>(labels: &[S]) -> Vec<Span> {
    let mut out = Vec::new();
    let mut open: Option<Span> = None;
    for (i, l) in labels.iter().enumerate() {
        match Bio::parse(l.as_ref()) {
            Some(Bio::Inside(t)) if open.as_ref().is_some_and(|s| s.ty == t) => {
                open.as_mut().unwrap().end = i + 1;
            }
            Some(Bio::Begin(t)) | Some(Bio::Inside(t)) => {
                out.extend(open.take());
                open = Some(Span {
                    ty: t.to_string(),
                    start: i,
                    end: i + 1,
                });
            }
            _ => out.extend(open.take()),
        }
    }
    out.extend(open);
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predicted: usize,
    pub gold: usize,
}

impl Prf {
    pub fn from_counts(tp: usize, predicted: usize, gold: usize) -> Self {
        if predicted == 0 && gold == 0 {
            return Prf {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
                true_positives: 0,
                predicted,
                gold,
            };
        }
        let p = if predicted == 0 { 0.0 } else { tp as f64 / predicted as f64 };
        let r = if gold == 0 { 0.0 } else { tp as f64 / gold as f64 };
        let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
        Prf {
            precision: p,
            recall: r,
            f1,
            true_positives: tp,
            predicted,
            gold,
        }
    }
}

#[derive(Debug, Clone, Copy, Default)]
struct Counts {
    tp: usize,
    pred: usize,
    gold: usize,
}

impl Counts {
    fn add<G: AsRef<str>, P: AsRef<str>>(&mut self, gold: &[G], pred: &[P]) -> Result<()> {
        if gold.len() != pred.len() {
            return Err(Error::contract(format!(
                "gold has {} tags but prediction has {}",
                gold.len(),
                pred.len()
            )));
        }
        let g: BTreeSet<Span> = spans(gold).into_iter().collect();
        let p: BTreeSet<Span> = spans(pred).into_iter().collect();
        self.tp += g.intersection(&p).count();
        self.pred += p.len();
        self.gold += g.len();
        Ok(())
    }

    fn prf(self) -> Prf {
        Prf::from_counts(self.tp, self.pred, self.gold)
    }
}

/// Micro-averaged exact-span precision, recall, and F1.
pub fn entity_f1<G: AsRef<str>, P: AsRef<str>>(gold: &[Vec<G>], pred: &[Vec<P>]) -> Result<Prf> {
    if gold.len() != pred.len() {
        return Err(Error::contract(format!(
            "{} gold sequences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut c = Counts::default();
    for (g, p) in gold.iter().zip(pred) {
        c.add(g, p)?;
    }
    Ok(c.prf())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct F1Table {
    pub per_domain: BTreeMap<String, Prf>,
    pub micro: Prf,
}

/// Scores per domain of the gold sentences, plus the micro average over all.
pub fn entity_f1_by_domain<P: AsRef<str>>(gold: &[&Sentence], pred: &[Vec<P>]) -> Result<F1Table> {
    if gold.len() != pred.len() {
        return Err(Error::contract(format!(
            "{} gold sentences but {} predictions",
            gold.len(),
            pred.len()
        )));
    }
    let mut per: BTreeMap<String, Counts> = BTreeMap::new();
    let mut all = Counts::default();
    for (s, p) in gold.iter().zip(pred) {
        per.entry(s.domain.clone()).or_default().add(&s.labels, p)?;
        all.add(&s.labels, p)?;
    }
    Ok(F1Table {
        per_domain: per.into_iter().map(|(d, c)| (d, c.prf())).collect(),
        micro: all.prf(),
    })
}
