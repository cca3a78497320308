//! End-to-end runs of the `mdner` binary on a scaled-down desk setup.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Output, Stdio};
use std::sync::OnceLock;

use mdner::data::desk_default;
use mdner::heads_registry::Bundle;
use mdner::training::GridSpec;
use mdner_cli::commands::{multi_bundle_path, read_corpus, CORPUS_MANIFEST};
use mdner_cli::ExperimentConfig;
use mdner::adapters::AdapterKind;
use mdner::data::Split;

fn mdner(args: &[&str], stdin: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_mdner"));
    cmd.args(args).stdin(Stdio::piped()).stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = cmd.spawn().expect("binary runs");
    let mut pipe = child.stdin.take().unwrap();
    pipe.write_all(stdin.unwrap_or("").as_bytes()).unwrap();
    drop(pipe);
    child.wait_with_output().unwrap()
}

fn ok(args: &[&str], stdin: Option<&str>) -> String {
    let out = mdner(args, stdin);
    assert!(out.status.success(), "mdner {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write_config(cfg: &ExperimentConfig, dir: &Path) -> PathBuf {
    fs::create_dir_all(dir).unwrap();
    let path = dir.join("desk.toml");
    fs::write(&path, cfg.to_toml()).unwrap();
    path
}

/// Desk domains at a twentieth of their size, short training budgets.
fn small_config(root: &Path, seed: u64) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::desk(root, seed);
    let mut spec = desk_default(seed);
    for d in &mut spec.domains {
        d.budget = (d.budget / 20).max(40);
    }
    cfg.synthetic = Some(spec);
    cfg.core.max_seq_len = 96;
    cfg.training.core = cfg.training.core.clone().with_lr(1e-2).with_epochs(6);
    for p in [&mut cfg.training.lora, &mut cfg.training.prefix] {
        p.pooled = p.pooled.clone().with_epochs(1);
        p.finetune = p.finetune.clone().with_epochs(3);
    }
    cfg.training.general = cfg.training.general.clone().with_epochs(1);
    cfg.training.specialized = cfg.training.specialized.clone().with_epochs(1);
    cfg.router.max_tokens = 96;
    cfg.router.train_passes = 2;
    cfg.grid.spec = GridSpec {
        step: 2,
        ..GridSpec::single("prefix_length", 1, 4)
    };
    cfg
}

fn read(p: &Path) -> Vec<u8> {
    fs::read(p).unwrap_or_else(|e| panic!("{}: {e}", p.display()))
}

struct Run {
    _dir: tempfile::TempDir,
    cfg: ExperimentConfig,
    config: PathBuf,
}

impl Run {
    fn config(&self) -> &str {
        self.config.to_str().unwrap()
    }
}

fn trained(seed: u64) -> Run {
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), seed);
    let config = write_config(&cfg, dir.path());
    let c = config.to_str().unwrap();
    ok(&["synth", "--config", c], None);
    ok(&["train", "--config", c], None);
    ok(&["train", "--config", c, "--baseline", "general"], None);
    ok(&["train", "--config", c, "--baseline", "specialized"], None);
    Run { _dir: dir, cfg, config }
}

fn shared() -> &'static Run {
    static R: OnceLock<Run> = OnceLock::new();
    R.get_or_init(|| trained(5))
}

fn conll_input(run: &Run, domain: &str, n: usize) -> (String, usize) {
    let corpus = read_corpus(&run.cfg.paths.corpus).unwrap();
    let sents = corpus.split(domain, Split::Test).unwrap();
    let mut text = String::new();
    let mut tokens = 0;
    for s in sents.iter().take(n) {
        for w in &s.tokens {
            text.push_str(w);
            text.push('\n');
            tokens += 1;
        }
        text.push('\n');
    }
    (text, tokens)
}

#[test]
fn synth_writes_twelve_domains_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let outputs: Vec<Vec<(String, Vec<u8>)>> = ["a", "b"]
        .iter()
        .map(|sub| {
            let root = dir.path().join(sub);
            let config = write_config(&ExperimentConfig::desk(&root, 11), &root);
            let listed = ok(&["synth", "--config", config.to_str().unwrap()], None);
            assert_eq!(listed.lines().count(), 13);
            let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(root.join("corpus"))
                .unwrap()
                .map(|e| e.unwrap().path())
                .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), read(&p)))
                .collect();
            files.sort();
            files
        })
        .collect();
    assert_eq!(outputs[0], outputs[1]);
    let conll = outputs[0].iter().filter(|(n, _)| n.ends_with(".conll")).count();
    assert_eq!(conll, 12);
    assert!(outputs[0].iter().any(|(n, _)| n == CORPUS_MANIFEST));
    let corpus = read_corpus(&dir.path().join("a/corpus")).unwrap();
    assert_eq!(corpus.domains_of_scheme("wide-21").len(), 2);
    assert_eq!(corpus.domains_of_scheme("compact-misc").len(), 10);
}

#[test]
fn invalid_ambiguity_rate_fails_loudly() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk(dir.path(), 1);
    let mut spec = desk_default(1);
    spec.ambiguity_rate = 1.5;
    cfg.synthetic = Some(spec);
    let config = write_config(&cfg, dir.path());
    let out = mdner(&["synth", "--config", config.to_str().unwrap()], None);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("ambiguity_rate"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn training_without_a_corpus_fails() {
    let dir = tempfile::tempdir().unwrap();
    let config = write_config(&small_config(dir.path(), 1), dir.path());
    let out = mdner(&["train", "--config", config.to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("synth"));
}

#[test]
fn missing_seed_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    fs::write(&path, "[paths]\ncorpus = \"c\"\nbundles = \"b\"\nreports = \"r\"\n").unwrap();
    let out = mdner(&["synth", "--config", path.to_str().unwrap()], None);
    assert!(!out.status.success());
    assert!(!out.stderr.is_empty());
}

#[test]
fn bundle_inventory_matches_the_desk_setup() {
    let run = shared();
    for kind in [AdapterKind::Lora, AdapterKind::Prefix] {
        let b = Bundle::load(multi_bundle_path(&run.cfg, kind)).unwrap();
        assert!(b.core.is_frozen());
        assert_eq!(b.registry.adapters().count(), 12);
        assert!(b.registry.adapters().all(|a| a.kind() == kind));
        assert_eq!(b.registry.heads().count(), 2);
        assert_eq!(b.router.as_ref().map(|r| r.config.domains.len()), Some(12));
    }
    let reports = &run.cfg.paths.reports;
    for f in ["core.json", "train-lora.json", "train-prefix.json", "router.json", "integrity.json"] {
        assert!(reports.join(f).exists(), "{f}");
    }
    let status = String::from_utf8(read(&reports.join("train.status.json"))).unwrap();
    assert!(status.contains("\"complete\""));
    let integrity = String::from_utf8(read(&reports.join("integrity.json"))).unwrap();
    assert!(integrity.contains("\"ok\": true"));
}

#[test]
fn rerun_with_the_same_seed_is_byte_identical() {
    let first = shared();
    let dir = tempfile::tempdir().unwrap();
    let cfg = small_config(dir.path(), 5);
    let c = write_config(&cfg, dir.path());
    let c = c.to_str().unwrap();
    ok(&["synth", "--config", c], None);
    ok(&["train", "--config", c], None);
    for kind in [AdapterKind::Lora, AdapterKind::Prefix] {
        assert_eq!(read(&multi_bundle_path(&first.cfg, kind)), read(&multi_bundle_path(&cfg, kind)));
    }
    assert_eq!(read(&first.cfg.paths.bundles.join("core.mdnb")), read(&cfg.paths.bundles.join("core.mdnb")));
}

#[test]
fn tag_writes_one_line_per_token() {
    let run = shared();
    let (input, tokens) = conll_input(run, "news", 7);
    let out = ok(&["tag", "--config", run.config(), "--domain", "news"], Some(&input));
    let lines: Vec<&str> = out.lines().filter(|l| !l.is_empty()).collect();
    assert_eq!(lines.len(), tokens);
    let words: Vec<&str> = input.lines().filter(|l| !l.is_empty()).collect();
    for (line, word) in lines.iter().zip(&words) {
        let (w, tag) = line.split_once('\t').unwrap();
        assert_eq!(w, *word);
        assert!(tag == "O" || tag.starts_with("B-") || tag.starts_with("I-"));
    }
}

#[test]
fn unknown_domain_lists_the_known_ones() {
    let run = shared();
    let out = mdner(&["tag", "--config", run.config(), "--domain", "weather"], Some("a\nb\n"));
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("weather") && err.contains("travel") && err.contains("formal"), "{err}");
    assert!(out.stdout.is_empty());
}

#[test]
fn tag_needs_a_target() {
    let run = shared();
    let out = mdner(&["tag", "--config", run.config()], Some("a\n"));
    assert!(!out.status.success());
}

#[test]
fn routing_a_single_domain_matches_direct_tagging() {
    let run = shared();
    let (input, _) = conll_input(run, "sport", 16);
    let direct = ok(&["tag", "--config", run.config(), "--domain", "sport"], Some(&input));
    let routed = ok(&["tag", "--config", run.config(), "--route"], Some(&input));
    let records = String::from_utf8(read(&run.cfg.paths.reports.join("routing.jsonl"))).unwrap();
    let rows: Vec<serde_json::Value> = records.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(rows.len(), 2);
    for r in &rows {
        assert_eq!(r["domain"], "sport", "{r}");
        let scores = r["scores"].as_array().unwrap();
        assert_eq!(scores.len(), 12);
    }
    assert_eq!(direct, routed);
}

#[test]
fn explicit_bundle_overrides_the_default() {
    let run = shared();
    let (input, _) = conll_input(run, "formal", 3);
    let lora = multi_bundle_path(&run.cfg, AdapterKind::Lora);
    let prefix = multi_bundle_path(&run.cfg, AdapterKind::Prefix);
    let a = ok(&["tag", "--config", run.config(), "--domain", "formal"], Some(&input));
    let b = ok(&["tag", "--config", run.config(), "--domain", "formal", "--bundle", lora.to_str().unwrap()], Some(&input));
    assert_eq!(a, b);
    let c = ok(&["tag", "--config", run.config(), "--domain", "formal", "--bundle", prefix.to_str().unwrap()], Some(&input));
    assert_eq!(a.lines().count(), c.lines().count());
}

#[test]
fn eval_table_covers_every_model_and_domain() {
    let run = shared();
    let text = ok(&["eval", "--config", run.config()], None);
    let header: Vec<&str> = text.lines().next().unwrap().split_whitespace().collect();
    assert_eq!(header.len(), 13);
    let models: Vec<&str> = text.lines().skip(1).map(|l| l.split_whitespace().next().unwrap()).collect();
    assert_eq!(models, ["general", "specialized", "multi-lora", "multi-prefix"]);
    let json: serde_json::Value = serde_json::from_slice(&read(&run.cfg.paths.reports.join("eval.json"))).unwrap();
    for row in json["rows"].as_array().unwrap() {
        let f1 = row["f1"].as_object().unwrap();
        assert_eq!(f1.len(), 12);
        assert!(f1.values().all(|v| (0.0..=1.0).contains(&v.as_f64().unwrap())));
    }
}

#[test]
fn gridsearch_reports_the_best_point() {
    let run = shared();
    let out = ok(&["gridsearch", "--config", run.config()], None);
    let last = out.lines().last().unwrap();
    assert!(last.starts_with("best ["), "{out}");
    let json: serde_json::Value = serde_json::from_slice(&read(&run.cfg.paths.reports.join("grid.json"))).unwrap();
    let best = json["best"][0].as_i64().unwrap();
    assert!((1..=4).contains(&best));
    let table = json["table"].as_array().unwrap();
    let top = table.iter().map(|r| r[1].as_f64().unwrap()).fold(f64::MIN, f64::max);
    assert_eq!(json["best_score"].as_f64().unwrap(), top);
}

#[test]
fn seed_flag_overrides_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ExperimentConfig::desk(dir.path(), 1);
    let mut spec = desk_default(1);
    for d in &mut spec.domains {
        d.budget = 40;
    }
    cfg.synthetic = Some(spec);
    let config = write_config(&cfg, dir.path());
    let c = config.to_str().unwrap();
    ok(&["synth", "--config", c], None);
    let one = read(&cfg.paths.corpus.join("news.conll"));
    ok(&["synth", "--config", c, "--seed", "2"], None);
    let two = read(&cfg.paths.corpus.join("news.conll"));
    assert_ne!(one, two);
    let m: serde_json::Value = serde_json::from_slice(&read(&cfg.paths.corpus.join(CORPUS_MANIFEST))).unwrap();
    assert_eq!(m["seed"], 2);
}
