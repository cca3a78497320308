//! The five subcommands. Each returns a structured result; `main` only
//! renders it and maps errors to a nonzero exit.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use mdner::adapters::{init_adapter, AdapterHyper, AdapterKind, LoraHyper, PrefixHyper};
use mdner::data::{generate_synthetic, parse_conll, write_conll, Corpus, DomainSplit, Split};
use mdner::heads_registry::{head_id_for, Bundle, LabelScheme};
use mdner::rng::derive;
use mdner::router::{route_and_tag, RoutingRecord};
use mdner::tagger::tag_resolved;
use mdner::training::{finetune_domain, grid_search, BaselineModel, GridResult, TrainReport};

use crate::config::ExperimentConfig;
use crate::pipeline::{self, sha_hex, tagging_digest, Prepared};

/// Writes through a `.partial` sibling so a crashed run never leaves a
/// truncated file under the final name.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming to {}", path.display()))?;
    Ok(())
}

pub fn save_bundle(path: &Path, b: &Bundle) -> Result<()> {
    write_atomic(path, &b.to_bytes())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    write_atomic(path, s.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

// ---------------------------------------------------------------- corpus io

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainFile {
    pub name: String,
    pub scheme_id: String,
    pub file: String,
    pub sentences: usize,
    /// Sentence positions within the file.
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub seed: u64,
    pub schemes: Vec<LabelScheme>,
    pub domains: Vec<DomainFile>,
}

pub const CORPUS_MANIFEST: &str = "manifest.json";

/// One CoNLL file per domain plus a manifest with schemes and splits.
pub fn write_corpus(corpus: &Corpus, dir: &Path, seed: u64) -> Result<Vec<PathBuf>> {
    let mut written = Vec::new();
    let mut domains = Vec::new();
    for d in corpus.domains() {
        let global: Vec<usize> = {
            let s = &corpus.splits()[&d];
            let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
            all.sort_unstable();
            all
        };
        let local = |split: Split| -> Vec<usize> {
            corpus.splits()[&d]
                .get(split)
                .iter()
                .map(|g| global.binary_search(g).expect("index in domain"))
                .collect()
        };
        let file = format!("{d}.conll");
        let path = dir.join(&file);
        write_atomic(&path, write_conll(global.iter().map(|&i| &corpus.sentences()[i])).as_bytes())?;
        written.push(path);
        domains.push(DomainFile {
            name: d.clone(),
            scheme_id: corpus.scheme_of(&d)?.id.clone(),
            file,
            sentences: global.len(),
            train: local(Split::Train),
            dev: local(Split::Dev),
            test: local(Split::Test),
        });
    }
    let manifest = CorpusManifest {
        seed,
        schemes: corpus.schemes().cloned().collect(),
        domains,
    };
    let path = dir.join(CORPUS_MANIFEST);
    write_json(&path, &manifest)?;
    written.push(path);
    Ok(written)
}

pub fn read_corpus(dir: &Path) -> Result<Corpus> {
    let manifest: CorpusManifest = read_json(&dir.join(CORPUS_MANIFEST))
        .with_context(|| format!("no corpus at {} (run `synth` first)", dir.display()))?;
    let mut sentences = Vec::new();
    let mut splits = BTreeMap::new();
    for df in &manifest.domains {
        let scheme = manifest
            .schemes
            .iter()
            .find(|s| s.id == df.scheme_id)
            .ok_or_else(|| anyhow!("domain `{}` uses unknown scheme `{}`", df.name, df.scheme_id))?;
        let path = dir.join(&df.file);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let parsed = parse_conll(&text, scheme, &df.name).with_context(|| format!("parsing {}", path.display()))?;
        if parsed.sentences.len() != df.sentences {
            bail!(
                "{}: manifest lists {} sentences, file has {}",
                path.display(),
                df.sentences,
                parsed.sentences.len()
            );
        }
        let base = sentences.len();
        let shift = |v: &[usize]| v.iter().map(|i| i + base).collect::<Vec<_>>();
        splits.insert(
            df.name.clone(),
            DomainSplit {
                train: shift(&df.train),
                dev: shift(&df.dev),
                test: shift(&df.test),
            },
        );
        sentences.extend(parsed.sentences);
    }
    Ok(Corpus::from_parts(sentences, manifest.schemes, splits)?)
}

// ---------------------------------------------------------------- synth

pub fn cmd_synth(cfg: &ExperimentConfig) -> Result<Vec<PathBuf>> {
    let spec = cfg.synthetic_spec();
    spec.validate()?;
    let corpus = generate_synthetic(&spec)?;
    write_corpus(&corpus, &cfg.paths.corpus, cfg.seed)
}

// ---------------------------------------------------------------- train

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Baseline {
    General,
    Specialized,
}

pub fn core_bundle_path(cfg: &ExperimentConfig) -> PathBuf {
    cfg.paths.bundles.join("core.mdnb")
}

pub fn multi_bundle_path(cfg: &ExperimentConfig, kind: AdapterKind) -> PathBuf {
    cfg.paths.bundles.join(format!("multi-{}.mdnb", kind.name()))
}

pub fn general_bundle_path(cfg: &ExperimentConfig, scheme_id: &str) -> PathBuf {
    cfg.paths.bundles.join(format!("general-{scheme_id}.mdnb"))
}

pub fn specialized_bundle_path(cfg: &ExperimentConfig, domain: &str) -> PathBuf {
    cfg.paths.bundles.join(format!("specialized-{domain}.mdnb"))
}

/// Byte-level checks recorded by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Integrity {
    pub core_after_freeze: String,
    pub core_after_training: String,
    /// Per kind: head digests at the end of phase one and after all
    /// fine-tunes.
    pub heads_after_pooled: BTreeMap<String, BTreeMap<String, String>>,
    pub heads_after_finetune: BTreeMap<String, BTreeMap<String, String>>,
    /// Per kind: digest of every adapter and head before and after router
    /// training.
    pub tagging_before_router: BTreeMap<String, String>,
    pub tagging_after_router: BTreeMap<String, String>,
    pub ok: bool,
}

impl Integrity {
    fn evaluate(&mut self) {
        self.ok = self.core_after_freeze == self.core_after_training
            && self.heads_after_pooled == self.heads_after_finetune
            && self.tagging_before_router == self.tagging_after_router;
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Status<'a> {
    status: &'a str,
    phase: &'a str,
    outputs: Vec<String>,
}

struct Progress {
    path: PathBuf,
    outputs: Vec<String>,
}

impl Progress {
    fn new(cfg: &ExperimentConfig, name: &str) -> Self {
        Progress {
            path: cfg.paths.reports.join(format!("{name}.status.json")),
            outputs: Vec::new(),
        }
    }

    fn mark(&self, status: &str, phase: &str) -> Result<()> {
        write_json(
            &self.path,
            &Status {
                status,
                phase,
                outputs: self.outputs.clone(),
            },
        )
    }

    fn track(&mut self, p: &Path) {
        self.outputs.push(p.display().to_string());
    }

    /// Runs `f`, recording a failed phase before propagating its error.
    fn phase<T>(&mut self, phase: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        self.mark("running", phase)?;
        match f(self) {
            Ok(v) => Ok(v),
            Err(e) => {
                let _ = self.mark("failed", phase);
                Err(e.context(format!("phase `{phase}` failed; outputs so far are partial")))
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainSummary {
    pub outputs: Vec<PathBuf>,
    pub integrity: Option<Integrity>,
}

pub fn cmd_train(cfg: &ExperimentConfig, baseline: Option<Baseline>) -> Result<TrainSummary> {
    match baseline {
        None => train_multi_bundles(cfg),
        Some(Baseline::General) => train_general_bundles(cfg),
        Some(Baseline::Specialized) => train_specialized_bundles(cfg),
    }
}

fn train_multi_bundles(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let corpus = read_corpus(&cfg.paths.corpus)?;
    let reports = &cfg.paths.reports;
    let mut prog = Progress::new(cfg, "train");

    let p = prog.phase("core", |prog| {
        let p = pipeline::prepare(cfg, corpus)?;
        let path = core_bundle_path(cfg);
        save_bundle(&path, &pipeline::core_bundle(&p)?)?;
        prog.track(&path);
        write_json(&reports.join("core.json"), &p.core_report)?;
        Ok(p)
    })?;
    let core_after_freeze = sha_hex(&p.core.weight_bytes());

    let mut runs = Vec::new();
    for &kind in &cfg.adapters.kinds {
        let run = prog.phase(&format!("multi-{}", kind.name()), |_| pipeline::train_multi(cfg, &p, kind))?;
        write_json(&reports.join(format!("train-{}.json", kind.name())), &run.reports)?;
        runs.push((kind, run));
    }

    let before: BTreeMap<String, String> = runs
        .iter()
        .map(|(k, r)| (k.name().to_string(), tagging_digest(&r.registry)))
        .collect();
    let rc = pipeline::router_config(cfg, &p.corpus);
    let (router, router_report) = prog.phase("router", |_| pipeline::train_router_for(cfg, &p, &rc))?;
    write_json(&reports.join("router.json"), &router_report)?;
    let after: BTreeMap<String, String> = runs
        .iter()
        .map(|(k, r)| (k.name().to_string(), tagging_digest(&r.registry)))
        .collect();

    let mut integrity = Integrity {
        core_after_freeze,
        core_after_training: sha_hex(&p.core.weight_bytes()),
        heads_after_pooled: BTreeMap::new(),
        heads_after_finetune: BTreeMap::new(),
        tagging_before_router: before,
        tagging_after_router: after,
        ok: false,
    };
    for (kind, run) in &runs {
        integrity
            .heads_after_pooled
            .insert(kind.name().into(), run.reports.head_after_pooled.clone());
        let finals = run
            .registry
            .heads()
            .map(|h| (h.id.clone(), sha_hex(&h.weight_bytes())))
            .collect();
        integrity.heads_after_finetune.insert(kind.name().into(), finals);
    }
    integrity.evaluate();

    prog.phase("bundles", |prog| {
        for (kind, run) in runs {
            let path = multi_bundle_path(cfg, kind);
            let b = Bundle {
                core: p.core.clone(),
                tokenizer: p.tok.clone(),
                registry: run.registry,
                router: Some(router.clone()),
            };
            save_bundle(&path, &b)?;
            prog.track(&path);
        }
        Ok(())
    })?;
    let ipath = reports.join("integrity.json");
    write_json(&ipath, &integrity)?;
    prog.track(&ipath);
    if !integrity.ok {
        prog.mark("failed", "integrity")?;
        bail!("integrity check failed; see {}", ipath.display());
    }
    prog.mark("complete", "done")?;
    Ok(TrainSummary {
        outputs: prog.outputs.iter().map(PathBuf::from).collect(),
        integrity: Some(integrity),
    })
}

/// The pre-trained core and its heads, reloaded from `core.mdnb`.
fn reload_prepared(cfg: &ExperimentConfig) -> Result<Prepared> {
    let corpus = read_corpus(&cfg.paths.corpus)?;
    let path = core_bundle_path(cfg);
    let b = Bundle::load(&path).with_context(|| format!("loading {} (run `train` first)", path.display()))?;
    if b.core.config.vocab_size != b.tokenizer.len() {
        bail!("core bundle vocabulary does not match its tokenizer");
    }
    Ok(Prepared {
        core_heads: b.registry.heads().map(|h| (h.id.clone(), h.clone())).collect(),
        corpus,
        tok: b.tokenizer,
        core: b.core,
        core_report: TrainReport::new("pretrain-core"),
    })
}

fn train_general_bundles(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let mut prog = Progress::new(cfg, "train-general");
    let p = prog.phase("load", |_| reload_prepared(cfg))?;
    let generals = prog.phase("general", |_| pipeline::train_generals(cfg, &p))?;
    for (scheme, m) in &generals {
        let domains = p.corpus.domains_of_scheme(scheme);
        let path = general_bundle_path(cfg, scheme);
        save_bundle(&path, &pipeline::baseline_bundle(m, &p.corpus, &p.tok, &domains)?)?;
        prog.track(&path);
        write_json(&cfg.paths.reports.join(format!("general-{scheme}.json")), &m.report)?;
    }
    prog.mark("complete", "done")?;
    Ok(TrainSummary {
        outputs: prog.outputs.iter().map(PathBuf::from).collect(),
        integrity: None,
    })
}

/// A baseline model rebuilt from a single-scheme bundle.
pub fn baseline_from_bundle(b: &Bundle, phase: &str) -> Result<BaselineModel> {
    let mut heads = b.registry.heads();
    let head = heads.next().ok_or_else(|| anyhow!("baseline bundle has no head"))?.clone();
    if heads.next().is_some() {
        bail!("baseline bundle has more than one head");
    }
    let scheme = b
        .registry
        .scheme(&head.scheme_id)
        .ok_or_else(|| anyhow!("baseline bundle lacks scheme `{}`", head.scheme_id))?
        .clone();
    Ok(BaselineModel {
        core: b.core.clone(),
        head,
        scheme,
        report: TrainReport::new(phase),
    })
}

fn train_specialized_bundles(cfg: &ExperimentConfig) -> Result<TrainSummary> {
    let mut prog = Progress::new(cfg, "train-specialized");
    let corpus = read_corpus(&cfg.paths.corpus)?;
    let mut generals = BTreeMap::new();
    let mut tok = None;
    for scheme in corpus.schemes() {
        let path = general_bundle_path(cfg, &scheme.id);
        let b = Bundle::load(&path)
            .with_context(|| format!("loading {} (run `train --baseline general` first)", path.display()))?;
        generals.insert(scheme.id.clone(), baseline_from_bundle(&b, "general")?);
        tok = Some(b.tokenizer);
    }
    let tok = tok.ok_or_else(|| anyhow!("corpus has no schemes"))?;
    for d in corpus.domains() {
        let scheme = corpus.scheme_of(&d)?.id.clone();
        let m = prog.phase(&format!("specialized/{d}"), |_| {
            pipeline::train_specialized(cfg, &corpus, &tok, &generals[&scheme], &d)
        })?;
        let path = specialized_bundle_path(cfg, &d);
        save_bundle(&path, &pipeline::baseline_bundle(&m, &corpus, &tok, std::slice::from_ref(&d))?)?;
        prog.track(&path);
        write_json(&cfg.paths.reports.join(format!("specialized-{d}.json")), &m.report)?;
    }
    prog.mark("complete", "done")?;
    Ok(TrainSummary {
        outputs: prog.outputs.iter().map(PathBuf::from).collect(),
        integrity: None,
    })
}

// ---------------------------------------------------------------- tag

/// Sentences from CoNLL-style lines: the first tab-separated field of each
/// non-blank line is the token; anything after it is ignored.
pub fn read_token_lines(input: impl BufRead) -> Result<Vec<Vec<String>>> {
    let mut out = Vec::new();
    let mut cur = Vec::new();
    for line in input.lines() {
        let line = line?;
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !cur.is_empty() {
                out.push(std::mem::take(&mut cur));
            }
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            continue;
        }
        let tok = line.split('\t').next().unwrap_or(line).trim();
        cur.push(tok.to_string());
    }
    if !cur.is_empty() {
        out.push(cur);
    }
    Ok(out)
}

pub fn write_tagged(out: &mut impl Write, sentences: &[Vec<String>], tags: &[Vec<String>]) -> Result<()> {
    for (s, t) in sentences.iter().zip(tags) {
        for (w, l) in s.iter().zip(t) {
            writeln!(out, "{w}\t{l}")?;
        }
        writeln!(out)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub enum TagTarget {
    Domain(String),
    Route,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tagged {
    pub sentences: Vec<Vec<String>>,
    pub tags: Vec<Vec<String>>,
    pub records: Vec<RoutingRecord>,
}

/// The bundle `tag` reads by default: the first configured adapter kind.
pub fn default_bundle(cfg: &ExperimentConfig) -> PathBuf {
    multi_bundle_path(cfg, cfg.adapters.kinds[0])
}

pub fn tag_with_bundle(bundle: &Bundle, target: &TagTarget, sentences: Vec<Vec<String>>) -> Result<Tagged> {
    match target {
        TagTarget::Domain(d) => {
            let r = bundle.registry.resolve(&bundle.core, d)?;
            let tags = tag_resolved(&r, &bundle.tokenizer, &sentences)?;
            Ok(Tagged {
                sentences,
                tags,
                records: Vec::new(),
            })
        }
        TagTarget::Route => {
            let router = bundle
                .router
                .as_ref()
                .ok_or_else(|| anyhow!("bundle has no router; --route needs one"))?;
            let routed = route_and_tag(&bundle.registry, &bundle.core, router, &bundle.tokenizer, &sentences)?;
            Ok(Tagged {
                sentences,
                tags: routed.tags,
                records: routed.records,
            })
        }
    }
}

pub fn cmd_tag(
    cfg: &ExperimentConfig,
    bundle: Option<&Path>,
    target: &TagTarget,
    input: impl BufRead,
    out: &mut impl Write,
) -> Result<Tagged> {
    let path = bundle.map(Path::to_path_buf).unwrap_or_else(|| default_bundle(cfg));
    let b = Bundle::load(&path).with_context(|| format!("loading {}", path.display()))?;
    let tagged = tag_with_bundle(&b, target, read_token_lines(input)?)?;
    write_tagged(out, &tagged.sentences, &tagged.tags)?;
    if !tagged.records.is_empty() {
        let mut lines = String::new();
        for r in &tagged.records {
            lines.push_str(&serde_json::to_string(r)?);
            lines.push('\n');
        }
        write_atomic(&cfg.paths.reports.join("routing.jsonl"), lines.as_bytes())?;
    }
    Ok(tagged)
}

// ---------------------------------------------------------------- eval

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    /// Test-split entity F1 per domain, in [0, 1].
    pub f1: BTreeMap<String, f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalTable {
    pub split: Split,
    pub domains: Vec<String>,
    pub rows: Vec<EvalRow>,
}

impl EvalTable {
    pub fn row(&self, model: &str) -> Option<&EvalRow> {
        self.rows.iter().find(|r| r.model == model)
    }

    /// Plain-text rendering: F1 in percent, one row per model.
    pub fn render(&self) -> String {
        let mut s = format!("{:<16}", "model");
        for d in &self.domains {
            s.push_str(&format!("{d:>9}"));
        }
        s.push('\n');
        for r in &self.rows {
            s.push_str(&format!("{:<16}", r.model));
            for d in &self.domains {
                match r.f1.get(d) {
                    Some(v) => s.push_str(&format!("{:>9.2}", 100.0 * v)),
                    None => s.push_str(&format!("{:>9}", "-")),
                }
            }
            s.push('\n');
        }
        s
    }
}

/// Rows for every model found on disk: general, specialized, then one per
/// multi-domain adapter kind.
pub fn cmd_eval(cfg: &ExperimentConfig) -> Result<EvalTable> {
    let corpus = read_corpus(&cfg.paths.corpus)?;
    let domains = corpus.domains();
    let split = Split::Test;
    let mut rows = Vec::new();

    let mut general = BTreeMap::new();
    for scheme in corpus.schemes() {
        let path = general_bundle_path(cfg, &scheme.id);
        if !path.exists() {
            continue;
        }
        let b = Bundle::load(&path)?;
        let ds = corpus.domains_of_scheme(&scheme.id);
        let t = pipeline::eval_registry(&b.registry, &b.core, &b.tokenizer, &corpus, &ds, split)?;
        general.extend(t.per_domain.into_iter().map(|(d, p)| (d, p.f1)));
    }
    if !general.is_empty() {
        rows.push(EvalRow {
            model: "general".into(),
            f1: general,
        });
    }

    let mut specialized = BTreeMap::new();
    for d in &domains {
        let path = specialized_bundle_path(cfg, d);
        if !path.exists() {
            continue;
        }
        let b = Bundle::load(&path)?;
        let t = pipeline::eval_registry(&b.registry, &b.core, &b.tokenizer, &corpus, std::slice::from_ref(d), split)?;
        specialized.extend(t.per_domain.into_iter().map(|(d, p)| (d, p.f1)));
    }
    if !specialized.is_empty() {
        rows.push(EvalRow {
            model: "specialized".into(),
            f1: specialized,
        });
    }

    for kind in [AdapterKind::Lora, AdapterKind::Prefix] {
        let path = multi_bundle_path(cfg, kind);
        if !path.exists() {
            continue;
        }
        let b = Bundle::load(&path)?;
        let t = pipeline::eval_registry(&b.registry, &b.core, &b.tokenizer, &corpus, &domains, split)?;
        rows.push(EvalRow {
            model: format!("multi-{}", kind.name()),
            f1: t.per_domain.into_iter().map(|(d, p)| (d, p.f1)).collect(),
        });
    }
    if rows.is_empty() {
        bail!("no trained bundles under {}", cfg.paths.bundles.display());
    }
    let table = EvalTable { split, domains, rows };
    write_json(&cfg.paths.reports.join("eval.json"), &table)?;
    Ok(table)
}

// ---------------------------------------------------------------- gridsearch

fn grid_hyper(kind: AdapterKind, base: &ExperimentConfig, point: &[i64]) -> Result<AdapterHyper> {
    let nonneg = |v: i64, name: &str| -> Result<usize> {
        usize::try_from(v).map_err(|_| anyhow!("{name} = {v} is negative"))
    };
    Ok(match kind {
        AdapterKind::Prefix => AdapterHyper::Prefix(PrefixHyper {
            length: nonneg(point[0], "prefix length")?,
        }),
        AdapterKind::Lora => AdapterHyper::Lora(LoraHyper {
            alpha: point[0] as f64,
            rank: nonneg(point[1], "rank")?,
            targets: base.adapters.lora.targets.clone(),
        }),
    })
}

/// Searches the configured adapter hyperparameters by the dev F1 of a
/// fresh adapter fine-tuned on `grid.domain` over the trained core and head.
pub fn cmd_gridsearch(cfg: &ExperimentConfig) -> Result<GridResult> {
    let g = &cfg.grid;
    let want = match g.kind {
        AdapterKind::Prefix => 1,
        AdapterKind::Lora => 2,
    };
    if g.spec.axes.len() != want {
        bail!("a {} grid needs {want} axes, got {}", g.kind.name(), g.spec.axes.len());
    }
    let corpus = read_corpus(&cfg.paths.corpus)?;
    let path = core_bundle_path(cfg);
    let b = Bundle::load(&path).with_context(|| format!("loading {} (run `train` first)", path.display()))?;
    let scheme = corpus.scheme_of(&g.domain)?.clone();
    let head = b
        .registry
        .head(&head_id_for(&scheme))
        .ok_or_else(|| anyhow!("core bundle has no head for `{}`", scheme.id))?;
    let train_cfg = cfg.seeded(&cfg.training.phases(g.kind).finetune);
    let result = grid_search(
        |point| {
            let hyper = grid_hyper(g.kind, cfg, point).map_err(|e| mdner::Error::Parameter(e.to_string()))?;
            let fresh = init_adapter("grid", &hyper, &b.core.config, &mut derive(cfg.seed, "grid/init"))?;
            let (_, rep) = finetune_domain(&b.core, &fresh, head, &corpus, &b.tokenizer, &g.domain, &train_cfg)?;
            Ok(rep.best_score().unwrap_or(0.0))
        },
        &g.spec,
    )?;
    write_json(&cfg.paths.reports.join("grid.json"), &result)?;
    Ok(result)
}
