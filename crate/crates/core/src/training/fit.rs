//! The shared epoch loop: shuffled single-scheme batches, Adam, per-epoch
//! dev evaluation, early stopping with best-snapshot restore.

use std::collections::BTreeMap;
use std::time::Instant;

use super::{EpochRecord, TrainConfig, TrainReport};
use crate::adapters::AdapterSet;
use crate::data::{encode, Sentence, Tokenizer};
use crate::encoder::{CoreModel, PackedInput};
use crate::error::Result;
use crate::heads_registry::{ClassifierHead, LabelScheme};
use crate::rng::{derive, shuffled_indices};
use crate::tagger::decode_rows;
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};
use crate::IGNORE_INDEX;

/// One encoded training item. `targets` align with the rows the learner
/// emits for it: every position for taggers, one row for the router.
#[derive(Debug, Clone)]
pub(crate) struct Example {
    pub ids: Vec<usize>,
    pub targets: Vec<usize>,
    /// Index of the head / scheme this example trains.
    pub group: usize,
    /// Index into the caller's domain list, for sampling statistics.
    pub domain: usize,
}

pub(crate) fn encode_all(
    sentences: &[&Sentence],
    tok: &Tokenizer,
    scheme: &LabelScheme,
    max_len: usize,
    group: usize,
    domain_of: impl Fn(&Sentence) -> usize,
) -> Result<Vec<Example>> {
    sentences
        .iter()
        .map(|s| {
            let e = encode(tok, s, scheme, max_len)?;
            Ok(Example {
                ids: e.ids,
                targets: e.labels,
                group,
                domain: domain_of(s),
            })
        })
        .collect()
}

pub(crate) trait Learner {
    /// Logits for a single-group batch, one row per target of the batch.
    fn logits(&self, tape: &mut Tape, batch: &[&Example]) -> Result<Var>;
    /// The tensors the optimizer updates. Order must be stable.
    fn params_mut(&mut self) -> Vec<&mut Tensor>;
    /// Dev metric from per-example argmax rows (higher is better).
    fn score(&self, examples: &[&Example], argmax: &[Vec<usize>]) -> Result<f64>;
}

fn argmax_rows(values: &[f64], cols: usize) -> Vec<usize> {
    values
        .chunks(cols)
        .map(|r| {
            let mut best = 0;
            for (j, &x) in r.iter().enumerate() {
                if x > r[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

/// Index batches that never mix groups, each group's items kept in `order`.
fn batches(examples: &[Example], size: usize, order: &[usize]) -> Vec<Vec<usize>> {
    let mut by_group: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in order {
        by_group.entry(examples[i].group).or_default().push(i);
    }
    by_group
        .into_values()
        .flat_map(|g| g.chunks(size).map(<[_]>::to_vec).collect::<Vec<_>>())
        .collect()
}

/// Mean loss and per-example argmax over `examples`, without gradients.
pub(crate) fn evaluate<L: Learner>(learner: &L, examples: &[Example], batch: usize) -> Result<(f64, Vec<Vec<usize>>)> {
    let order: Vec<usize> = (0..examples.len()).collect();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); examples.len()];
    let mut loss_sum = 0.0;
    let mut count = 0usize;
    for idx in batches(examples, batch.max(32), &order) {
        let b: Vec<&Example> = idx.iter().map(|&i| &examples[i]).collect();
        let mut tape = Tape::new();
        let logits = learner.logits(&mut tape, &b)?;
        let (_, cols) = tape.shape(logits);
        let targets: Vec<usize> = b.iter().flat_map(|e| e.targets.iter().copied()).collect();
        let n = targets.iter().filter(|&&t| t != IGNORE_INDEX).count();
        if n > 0 {
            let l = tape.cross_entropy(logits, &targets, IGNORE_INDEX)?;
            loss_sum += tape.value(l)[0] * n as f64;
            count += n;
        }
        let am = argmax_rows(tape.value(logits), cols);
        let mut at = 0;
        for (&i, e) in idx.iter().zip(&b) {
            preds[i] = am[at..at + e.targets.len()].to_vec();
            at += e.targets.len();
        }
    }
    Ok((if count == 0 { 0.0 } else { loss_sum / count as f64 }, preds))
}

pub(crate) fn fit<L: Learner>(
    learner: &mut L,
    train: &[Example],
    dev: &[Example],
    cfg: &TrainConfig,
    phase: &str,
    domain_names: &[String],
) -> Result<TrainReport> {
    cfg.validate()?;
    let start = Instant::now();
    let mut rng = derive(cfg.seed, &format!("fit/{phase}"));
    let mut adam = Adam::new(AdamConfig::with_lr(cfg.lr));
    let mut report = TrainReport::new(phase);
    let mut sampled = vec![0usize; domain_names.len()];

    let mut best_score = f64::NEG_INFINITY;
    let mut best_loss = f64::INFINITY;
    let mut best: Option<Vec<Vec<f64>>> = None;
    let mut stale = 0;

    for epoch in 1..=cfg.max_epochs {
        let order = shuffled_indices(train.len(), &mut rng);
        let plan = batches(train, cfg.batch_size, &order);
        let perm = shuffled_indices(plan.len(), &mut rng);

        let mut loss_sum = 0.0;
        let mut steps = 0usize;
        for &bi in &perm {
            let b: Vec<&Example> = plan[bi].iter().map(|&i| &train[i]).collect();
            let targets: Vec<usize> = b.iter().flat_map(|e| e.targets.iter().copied()).collect();
            if targets.iter().all(|&t| t == IGNORE_INDEX) {
                continue;
            }
            for e in &b {
                if let Some(c) = sampled.get_mut(e.domain) {
                    *c += 1;
                }
            }
            let mut tape = Tape::new();
            let logits = learner.logits(&mut tape, &b)?;
            let loss = tape.cross_entropy(logits, &targets, IGNORE_INDEX)?;
            loss_sum += tape.value(loss)[0];
            steps += 1;
            let grads = tape.backward(loss)?;
            let mut params = learner.params_mut();
            grads.accumulate_into(&mut params)?;
            for p in params.iter_mut() {
                // A head that sat out this batch still gets a (zero) gradient
                // so moment bookkeeping stays aligned.
                if p.requires_grad() && p.grad().is_none() {
                    let zeros = vec![0.0; p.numel()];
                    p.accumulate_grad(&zeros)?;
                }
            }
            adam.step(&mut params)?;
        }

        let mut rec = EpochRecord {
            epoch,
            train_loss: if steps == 0 { 0.0 } else { loss_sum / steps as f64 },
            dev_loss: None,
            dev_score: None,
        };
        let evaluate_now = !dev.is_empty() && (epoch % cfg.eval_every.max(1) == 0 || epoch == cfg.max_epochs);
        if evaluate_now {
            let (dev_loss, preds) = evaluate(learner, dev, cfg.batch_size)?;
            let refs: Vec<&Example> = dev.iter().collect();
            let score = learner.score(&refs, &preds)?;
            rec.dev_loss = Some(dev_loss);
            rec.dev_score = Some(score);
            // Patience follows dev F1 alone; a lower dev loss at equal F1
            // still replaces the kept snapshot.
            let gained = score > best_score;
            if gained {
                stale = 0;
            } else {
                stale += 1;
            }
            if gained || (score == best_score && dev_loss < best_loss) {
                best_score = score;
                best_loss = dev_loss;
                report.best_epoch = epoch;
                best = Some(learner.params_mut().iter().map(|t| t.data().to_vec()).collect());
            }
        } else if dev.is_empty() {
            report.best_epoch = epoch;
        }
        report.epochs.push(rec);
        report.stopped_epoch = epoch;
        if evaluate_now && stale >= cfg.patience {
            report.early_stopped = true;
            break;
        }
    }
    if let Some(snap) = best {
        for (t, d) in learner.params_mut().into_iter().zip(snap) {
            t.copy_from(&d)?;
        }
    }
    for t in learner.params_mut() {
        t.clear_grad();
    }
    report.sampled = domain_names.iter().cloned().zip(sampled).collect();
    report.elapsed_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Micro entity F1 over all examples, decoding each head's rows with its
/// scheme. The `[CLS]` row is skipped.
pub(crate) fn tagging_score(schemes: &[&LabelScheme], examples: &[&Example], argmax: &[Vec<usize>]) -> Result<f64> {
    let mut gold = Vec::with_capacity(examples.len());
    let mut pred = Vec::with_capacity(examples.len());
    for (e, am) in examples.iter().zip(argmax) {
        let scheme = schemes[e.group];
        gold.push(
            e.targets[1..]
                .iter()
                .map(|&t| scheme.tags[t].clone())
                .collect::<Vec<_>>(),
        );
        pred.push(decode_rows(&am[1..], scheme));
    }
    Ok(super::entity_f1(&gold, &pred)?.f1)
}

pub(crate) enum HeadRef<'a> {
    Frozen(&'a ClassifierHead),
    Trainable(&'a mut ClassifierHead),
}

impl HeadRef<'_> {
    fn get(&self) -> &ClassifierHead {
        match self {
            HeadRef::Frozen(h) => h,
            HeadRef::Trainable(h) => h,
        }
    }
}

/// Frozen core + one adapter + one head.
pub(crate) struct AdapterLearner<'a> {
    pub core: &'a CoreModel,
    pub adapter: &'a mut AdapterSet,
    pub head: HeadRef<'a>,
    pub scheme: &'a LabelScheme,
}

impl Learner for AdapterLearner<'_> {
    fn logits(&self, tape: &mut Tape, batch: &[&Example]) -> Result<Var> {
        let seqs: Vec<&[usize]> = batch.iter().map(|e| e.ids.as_slice()).collect();
        let input = PackedInput::from_sequences(&seqs);
        let h = self.core.forward(tape, &input, Some(self.adapter))?;
        self.head.get().logits(tape, h)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.adapter.tensors_mut();
        if let HeadRef::Trainable(h) = &mut self.head {
            out.extend(h.tensors_mut());
        }
        out
    }

    fn score(&self, examples: &[&Example], argmax: &[Vec<usize>]) -> Result<f64> {
        tagging_score(&[self.scheme], examples, argmax)
    }
}

/// Trainable core with one head per scheme and no adapter.
pub(crate) struct FullLearner<'a> {
    pub core: &'a mut CoreModel,
    pub heads: Vec<&'a mut ClassifierHead>,
    pub schemes: Vec<&'a LabelScheme>,
}

impl Learner for FullLearner<'_> {
    fn logits(&self, tape: &mut Tape, batch: &[&Example]) -> Result<Var> {
        let seqs: Vec<&[usize]> = batch.iter().map(|e| e.ids.as_slice()).collect();
        let input = PackedInput::from_sequences(&seqs);
        let h = self.core.forward(tape, &input, None)?;
        self.heads[batch[0].group].logits(tape, h)
    }

    fn params_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = self.core.tensors_mut();
        for h in self.heads.iter_mut() {
            out.extend(h.tensors_mut());
        }
        out
    }

    fn score(&self, examples: &[&Example], argmax: &[Vec<usize>]) -> Result<f64> {
        tagging_score(&self.schemes, examples, argmax)
    }
}
