//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use mdner::adapters::{AdapterHyper, AdapterKind, LoraHyper, PrefixHyper};
use mdner::data::{desk_default, SyntheticSpec};
use mdner::encoder::EncoderConfig;
use mdner::training::{GridSpec, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Paths {
    /// Directory of per-domain CoNLL files plus `manifest.json`.
    pub corpus: PathBuf,
    /// Directory for bundles.
    pub bundles: PathBuf,
    /// Directory for reports, tables and routing records.
    pub reports: PathBuf,
}

/// Core shape; the vocabulary size always comes from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CoreShape {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
}

impl Default for CoreShape {
    fn default() -> Self {
        let t = EncoderConfig::toy(0);
        CoreShape {
            n_layers: t.n_layers,
            d_model: t.d_model,
            n_heads: t.n_heads,
            d_ff: t.d_ff,
            max_seq_len: t.max_seq_len,
            ln_eps: t.ln_eps,
        }
    }
}

impl CoreShape {
    pub fn encoder(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            n_layers: self.n_layers,
            d_model: self.d_model,
            n_heads: self.n_heads,
            d_ff: self.d_ff,
            vocab_size,
            max_seq_len: self.max_seq_len,
            ln_eps: self.ln_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterSection {
    /// Adapter kinds trained by `train`; one multi-domain bundle each.
    pub kinds: Vec<AdapterKind>,
    pub lora: LoraHyper,
    pub prefix: PrefixHyper,
}

impl Default for AdapterSection {
    fn default() -> Self {
        AdapterSection {
            kinds: vec![AdapterKind::Lora, AdapterKind::Prefix],
            lora: LoraHyper::default(),
            prefix: PrefixHyper::default(),
        }
    }
}

impl AdapterSection {
    pub fn hyper(&self, kind: AdapterKind) -> AdapterHyper {
        match kind {
            AdapterKind::Lora => AdapterHyper::Lora(self.lora.clone()),
            AdapterKind::Prefix => AdapterHyper::Prefix(self.prefix.clone()),
        }
    }
}

/// Phase-one and phase-two settings for one adapter kind.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdapterPhases {
    pub pooled: TrainConfig,
    pub finetune: TrainConfig,
}

impl Default for AdapterPhases {
    fn default() -> Self {
        AdapterPhases {
            pooled: TrainConfig::pooled().with_lr(1e-2),
            finetune: TrainConfig::default().with_lr(3e-2),
        }
    }
}

/// Per-phase training settings. Seeds inside are overwritten by the
/// experiment seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainingSection {
    pub core: TrainConfig,
    pub lora: AdapterPhases,
    pub prefix: AdapterPhases,
    pub general: TrainConfig,
    pub specialized: TrainConfig,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            core: TrainConfig::default().with_lr(3e-3).with_epochs(6),
            lora: AdapterPhases::default(),
            prefix: AdapterPhases {
                finetune: TrainConfig {
                    batch_size: 2,
                    ..TrainConfig::default().with_lr(1e-1)
                },
                ..AdapterPhases::default()
            },
            general: TrainConfig::default().with_lr(1e-3).with_epochs(3),
            specialized: TrainConfig::default().with_lr(1e-3),
        }
    }
}

impl TrainingSection {
    pub fn phases(&self, kind: AdapterKind) -> &AdapterPhases {
        match kind {
            AdapterKind::Lora => &self.lora,
            AdapterKind::Prefix => &self.prefix,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RouterSection {
    pub group_size: usize,
    pub max_tokens: usize,
    /// Empty means every corpus domain.
    pub domains: Vec<String>,
    pub kind: AdapterKind,
    pub train_passes: usize,
    pub train: TrainConfig,
}

impl Default for RouterSection {
    fn default() -> Self {
        RouterSection {
            group_size: 8,
            max_tokens: 512,
            domains: Vec::new(),
            kind: AdapterKind::Prefix,
            train_passes: 8,
            train: TrainConfig::default().with_lr(3e-2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridSection {
    /// `prefix` searches the prefix length, `lora` searches (alpha, r).
    pub kind: AdapterKind,
    /// Domain whose dev F1 is the objective.
    pub domain: String,
    pub spec: GridSpec,
}

impl Default for GridSection {
    fn default() -> Self {
        GridSection {
            kind: AdapterKind::Prefix,
            domain: "travel".into(),
            spec: GridSpec::single("prefix_length", 2, 34),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub paths: Paths,
    /// Generator settings for `synth`; the desk default when absent. The
    /// generator seed always follows `seed`.
    #[serde(default)]
    pub synthetic: Option<SyntheticSpec>,
    #[serde(default)]
    pub core: CoreShape,
    #[serde(default)]
    pub adapters: AdapterSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub router: RouterSection,
    #[serde(default)]
    pub grid: GridSection,
}

impl ExperimentConfig {
    /// The desk setup with every output under `root`.
    pub fn desk(root: &Path, seed: u64) -> Self {
        ExperimentConfig {
            seed,
            paths: Paths {
                corpus: root.join("corpus"),
                bundles: root.join("bundles"),
                reports: root.join("reports"),
            },
            synthetic: None,
            core: CoreShape::default(),
            adapters: AdapterSection::default(),
            training: TrainingSection::default(),
            router: RouterSection::default(),
            grid: GridSection::default(),
        }
    }

    /// Parses TOML; relative paths resolve against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: ExperimentConfig =
            toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new("."));
        for p in [&mut cfg.paths.corpus, &mut cfg.paths.bundles, &mut cfg.paths.reports] {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.core.encoder(4).validate()?;
        for t in [
            &self.training.core,
            &self.training.lora.pooled,
            &self.training.lora.finetune,
            &self.training.prefix.pooled,
            &self.training.prefix.finetune,
            &self.training.general,
            &self.training.specialized,
            &self.router.train,
        ] {
            t.validate()?;
        }
        if self.adapters.kinds.is_empty() {
            bail!("adapters.kinds is empty");
        }
        for k in &self.adapters.kinds {
            self.adapters.hyper(*k).validate()?;
        }
        if self.router.max_tokens > self.core.max_seq_len {
            bail!(
                "router.max_tokens {} exceeds core.max_seq_len {}",
                self.router.max_tokens,
                self.core.max_seq_len
            );
        }
        self.grid.spec.validate()?;
        Ok(())
    }

    pub fn synthetic_spec(&self) -> SyntheticSpec {
        let mut spec = self.synthetic.clone().unwrap_or_else(|| desk_default(self.seed));
        spec.seed = self.seed;
        spec
    }

    /// A phase's settings carrying the experiment seed.
    pub fn seeded(&self, t: &TrainConfig) -> TrainConfig {
        t.clone().with_seed(self.seed)
    }
}
