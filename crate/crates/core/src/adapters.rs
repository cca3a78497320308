//! Per-domain trainable parameter sets.
//!
//! A LoRA adapter adds `(alpha / r) · B·A` to targeted projections
//! (`A: r×d_in`, `B: d_out×r`, `B` starts at zero). A prefix adapter holds
//! `p` learned key and value rows per layer that every query attends to in
//! addition to the real positions.

use serde::{Deserialize, Serialize};

use crate::encoder::{CoreModel, EncoderConfig, Projection};
use crate::error::{Error, Result};
use crate::heads_registry::ClassifierHead;
use crate::rng::Rng;
use crate::tensor::Tensor;

const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Lora,
    Prefix,
}

impl AdapterKind {
    pub fn name(self) -> &'static str {
        match self {
            AdapterKind::Lora => "lora",
            AdapterKind::Prefix => "prefix",
        }
    }
}

impl std::str::FromStr for AdapterKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(AdapterKind::Lora),
            "prefix" => Ok(AdapterKind::Prefix),
            other => Err(Error::Parameter(format!("unknown adapter kind `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoraHyper {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
}

impl Default for LoraHyper {
    fn default() -> Self {
        LoraHyper {
            rank: 3,
            alpha: 1.0,
            targets: vec![Projection::Wq, Projection::Wv],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrefixHyper {
    pub length: usize,
}

impl Default for PrefixHyper {
    fn default() -> Self {
        PrefixHyper { length: 18 }
    }
}

/// Hyperparameters for a fresh adapter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum AdapterHyper {
    Lora(LoraHyper),
    Prefix(PrefixHyper),
}

impl AdapterHyper {
    pub fn kind(&self) -> AdapterKind {
        match self {
            AdapterHyper::Lora(_) => AdapterKind::Lora,
            AdapterHyper::Prefix(_) => AdapterKind::Prefix,
        }
    }

    pub fn default_for(kind: AdapterKind) -> Self {
        match kind {
            AdapterKind::Lora => AdapterHyper::Lora(LoraHyper::default()),
            AdapterKind::Prefix => AdapterHyper::Prefix(PrefixHyper::default()),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AdapterHyper::Lora(h) => {
                if h.rank == 0 {
                    return Err(Error::Parameter("LoRA rank must be at least 1".into()));
                }
                if !(h.alpha.is_finite() && h.alpha > 0.0) {
                    return Err(Error::Parameter(format!(
                        "LoRA alpha must be positive, got {}",
                        h.alpha
                    )));
                }
                if h.targets.is_empty() {
                    return Err(Error::Parameter("LoRA needs at least one target".into()));
                }
                Ok(())
            }
            AdapterHyper::Prefix(_) => Ok(()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraFactor {
    pub target: Projection,
    /// `r × d_in`
    pub a: Tensor,
    /// `d_out × r`
    pub b: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoraAdapter {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<Projection>,
    /// One entry per encoder layer, factors in `targets` order.
    pub layers: Vec<Vec<LoraFactor>>,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    pub fn factor(&self, layer: usize, target: Projection) -> Option<&LoraFactor> {
        self.layers.get(layer)?.iter().find(|f| f.target == target)
    }

    fn tensors(&self) -> Vec<&Tensor> {
        self.layers
            .iter()
            .flatten()
            .flat_map(|f| [&f.a, &f.b])
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers
            .iter_mut()
            .flatten()
            .flat_map(|f| [&mut f.a, &mut f.b])
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixLayer {
    /// `p × d_model`
    pub keys: Tensor,
    /// `p × d_model`
    pub values: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrefixAdapter {
    pub length: usize,
    pub layers: Vec<PrefixLayer>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum AdapterPayload {
    Lora(LoraAdapter),
    Prefix(PrefixAdapter),
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdapterSet {
    pub id: String,
    pub payload: AdapterPayload,
    /// Provenance: `pooled:<scheme>` or the domain it was fine-tuned on.
    pub trained_on: String,
}

/// Creates a fresh adapter: LoRA `A ~ N(0, 0.02²)`, `B = 0`; prefix rows
/// `~ N(0, 0.02²)`. All tensors are trainable.
pub fn init_adapter(
    id: impl Into<String>,
    hyper: &AdapterHyper,
    cfg: &EncoderConfig,
    rng: &mut Rng,
) -> Result<AdapterSet> {
    hyper.validate()?;
    let payload = match hyper {
        AdapterHyper::Lora(h) => {
            let mut targets = h.targets.clone();
            targets.sort();
            targets.dedup();
            let layers = (0..cfg.n_layers)
                .map(|_| {
                    targets
                        .iter()
                        .map(|&target| {
                            let (d_in, d_out) = target.dims(cfg);
                            LoraFactor {
                                target,
                                a: Tensor::randn(&[h.rank, d_in], INIT_STD, rng).with_grad(),
                                b: Tensor::zeros(&[d_out, h.rank]).with_grad(),
                            }
                        })
                        .collect()
                })
                .collect();
            AdapterPayload::Lora(LoraAdapter {
                rank: h.rank,
                alpha: h.alpha,
                targets,
                layers,
            })
        }
        AdapterHyper::Prefix(h) => {
            let shape = [h.length, cfg.d_model];
            let layers = (0..cfg.n_layers)
                .map(|_| PrefixLayer {
                    keys: Tensor::randn(&shape, INIT_STD, rng).with_grad(),
                    values: Tensor::randn(&shape, INIT_STD, rng).with_grad(),
                })
                .collect();
            AdapterPayload::Prefix(PrefixAdapter {
                length: h.length,
                layers,
            })
        }
    };
    Ok(AdapterSet {
        id: id.into(),
        payload,
        trained_on: String::new(),
    })
}

impl AdapterSet {
    pub fn kind(&self) -> AdapterKind {
        match self.payload {
            AdapterPayload::Lora(_) => AdapterKind::Lora,
            AdapterPayload::Prefix(_) => AdapterKind::Prefix,
        }
    }

    pub fn hyper(&self) -> AdapterHyper {
        match &self.payload {
            AdapterPayload::Lora(l) => AdapterHyper::Lora(LoraHyper {
                rank: l.rank,
                alpha: l.alpha,
                targets: l.targets.clone(),
            }),
            AdapterPayload::Prefix(p) => AdapterHyper::Prefix(PrefixHyper { length: p.length }),
        }
    }

    /// Deep copy under a new id; no tensor is shared with `self`.
    pub fn replicate(&self, new_id: impl Into<String>) -> AdapterSet {
        AdapterSet {
            id: new_id.into(),
            payload: self.payload.clone(),
            trained_on: self.trained_on.clone(),
        }
    }

    /// Adapter tensors in canonical order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        match &self.payload {
            AdapterPayload::Lora(l) => l
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, fs)| {
                    fs.iter().flat_map(move |f| {
                        [
                            (format!("layer{i}.{}.a", f.target.name()), &f.a),
                            (format!("layer{i}.{}.b", f.target.name()), &f.b),
                        ]
                    })
                })
                .collect(),
            AdapterPayload::Prefix(p) => p
                .layers
                .iter()
                .enumerate()
                .flat_map(|(i, l)| {
                    [
                        (format!("layer{i}.prefix_keys"), &l.keys),
                        (format!("layer{i}.prefix_values"), &l.values),
                    ]
                })
                .collect(),
        }
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        match &self.payload {
            AdapterPayload::Lora(l) => l.tensors(),
            AdapterPayload::Prefix(p) => p.layers.iter().flat_map(|l| [&l.keys, &l.values]).collect(),
        }
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        match &mut self.payload {
            AdapterPayload::Lora(l) => l.tensors_mut(),
            AdapterPayload::Prefix(p) => p
                .layers
                .iter_mut()
                .flat_map(|l| [&mut l.keys, &mut l.values])
                .collect(),
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    pub fn weight_bytes(&self) -> Vec<u8> {
        crate::tensor::params_bytes(self.tensors())
    }

    pub fn set_trainable(&mut self, on: bool) {
        for t in self.tensors_mut() {
            t.set_requires_grad(on);
        }
    }

    pub(crate) fn check_compatible(&self, cfg: &EncoderConfig) -> Result<()> {
        let bad = |msg: String| Err(Error::shape(format!("adapter `{}`: {msg}", self.id)));
        match &self.payload {
            AdapterPayload::Lora(l) => {
                if l.layers.len() != cfg.n_layers {
                    return bad(format!("{} layers for a {}-layer core", l.layers.len(), cfg.n_layers));
                }
                for f in l.layers.iter().flatten() {
                    let (d_in, d_out) = f.target.dims(cfg);
                    if f.a.shape() != [l.rank, d_in] || f.b.shape() != [d_out, l.rank] {
                        return bad(format!(
                            "{} factors {:?}/{:?} do not fit {d_in}->{d_out} at rank {}",
                            f.target.name(),
                            f.a.shape(),
                            f.b.shape(),
                            l.rank
                        ));
                    }
                }
            }
            AdapterPayload::Prefix(p) => {
                if p.layers.len() != cfg.n_layers {
                    return bad(format!("{} layers for a {}-layer core", p.layers.len(), cfg.n_layers));
                }
                for l in &p.layers {
                    if l.keys.shape() != [p.length, cfg.d_model] || l.values.shape() != [p.length, cfg.d_model] {
                        return bad(format!("prefix rows {:?} for width {}", l.keys.shape(), cfg.d_model));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Folds a LoRA delta into a copy of the core: `W' = W + (alpha/r)·(B·A)ᵀ`
/// in the core's `x·W` convention. Merging the same adapter twice adds the
/// delta twice.
pub fn merge_lora(core: &CoreModel, adapter: &LoraAdapter) -> Result<CoreModel> {
    if adapter.layers.len() != core.layers.len() {
        return Err(Error::shape(format!(
            "LoRA adapter has {} layers, core has {}",
            adapter.layers.len(),
            core.layers.len()
        )));
    }
    let mut merged = core.clone();
    let s = adapter.scaling();
    for (layer, factors) in merged.layers.iter_mut().zip(&adapter.layers) {
        for f in factors {
            let (d_in, d_out) = f.target.dims(&core.config);
            let r = adapter.rank;
            if f.a.shape() != [r, d_in] || f.b.shape() != [d_out, r] {
                return Err(Error::shape(format!(
                    "LoRA factors {:?}/{:?} do not fit {} ({d_in}x{d_out})",
                    f.a.shape(),
                    f.b.shape(),
                    f.target.name()
                )));
            }
            let a = f.a.data();
            let b = f.b.data();
            let w = layer.projection_mut(f.target).data_mut();
            for i in 0..d_in {
                for j in 0..d_out {
                    let mut acc = 0.0;
                    for k in 0..r {
                        acc += b[j * r + k] * a[k * d_in + i];
                    }
                    w[i * d_out + j] += s * acc;
                }
            }
        }
    }
    Ok(merged)
}

/// Exactly the adapter tensors, plus the head's when a head is given and not
/// frozen. Core tensors are never included.
pub fn trainable_params<'a>(
    adapter: &'a AdapterSet,
    head: Option<&'a ClassifierHead>,
) -> Vec<&'a Tensor> {
    let mut out = adapter.tensors();
    if let Some(h) = head.filter(|h| !h.is_frozen()) {
        out.extend(h.tensors());
    }
    out
}
