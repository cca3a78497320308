//! Single-file bundle: one core, the tokenizer, every scheme, adapter and
//! head in a registry, plus an optional router.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic    8 bytes  "MDNBUNDL"
//! version  u32
//! mlen     u64      manifest length
//! msha     32 bytes sha256 of the manifest
//! manifest mlen bytes of JSON
//! plen     u64      payload length
//! payload  plen bytes of f64 LE values, arrays back to back
//! ```
//!
//! The manifest indexes every array by name with shape, offset, and a
//! sha256 of its bytes, so any single-byte change is caught at load.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use super::{ClassifierHead, DomainEntry, DomainRegistry, LabelScheme, Linear};
use crate::adapters::{init_adapter, AdapterHyper, AdapterSet};
use crate::data::Tokenizer;
use crate::encoder::{CoreModel, EncoderConfig};
use crate::rng::seeded;
use crate::router::{RouterConfig, RouterModel};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MDNBUNDL";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum BundleError {
    #[error("not a bundle (bad magic)")]
    BadMagic,
    #[error("bundle format version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error("bundle truncated: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("manifest checksum mismatch")]
    ManifestChecksum,
    #[error("checksum mismatch in array `{0}`")]
    ArrayChecksum(String),
    #[error("malformed bundle: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bundle {
    pub core: CoreModel,
    pub tokenizer: Tokenizer,
    pub registry: DomainRegistry,
    pub router: Option<RouterModel>,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    encoder: EncoderConfig,
    core_frozen: bool,
    vocab: Vec<String>,
    schemes: Vec<LabelScheme>,
    domains: BTreeMap<String, DomainEntry>,
    adapters: Vec<AdapterMeta>,
    heads: Vec<HeadMeta>,
    router: Option<RouterMeta>,
    arrays: Vec<ArrayMeta>,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    id: String,
    trained_on: String,
    hyper: AdapterHyper,
    trainable: bool,
}

#[derive(Serialize, Deserialize)]
struct HeadMeta {
    id: String,
    scheme_id: String,
    frozen: bool,
}

#[derive(Serialize, Deserialize)]
struct RouterMeta {
    config: RouterConfig,
    adapter: AdapterMeta,
}

#[derive(Serialize, Deserialize)]
struct ArrayMeta {
    name: String,
    shape: Vec<usize>,
    /// Offset into the payload, in bytes.
    offset: usize,
    sha256: String,
}

fn adapter_meta(a: &AdapterSet) -> AdapterMeta {
    AdapterMeta {
        id: a.id.clone(),
        trained_on: a.trained_on.clone(),
        hyper: a.hyper(),
        trainable: a.tensors().iter().any(|t| t.requires_grad()),
    }
}

struct Writer {
    arrays: Vec<ArrayMeta>,
    payload: Vec<u8>,
}

impl Writer {
    fn push(&mut self, name: String, t: &Tensor) {
        let bytes = t.to_le_bytes();
        self.arrays.push(ArrayMeta {
            name,
            shape: t.shape().to_vec(),
            offset: self.payload.len(),
            sha256: hex::encode(Sha256::digest(&bytes)),
        });
        self.payload.extend_from_slice(&bytes);
    }
}

impl Bundle {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer {
            arrays: Vec::new(),
            payload: Vec::new(),
        };
        for (name, t) in self.core.named_tensors() {
            w.push(format!("core/{name}"), t);
        }
        let reg = &self.registry;
        for a in reg.adapters() {
            for (name, t) in a.named_tensors() {
                w.push(format!("adapter/{}/{name}", a.id), t);
            }
        }
        for h in reg.heads() {
            w.push(format!("head/{}/weight", h.id), &h.linear.weight);
            w.push(format!("head/{}/bias", h.id), &h.linear.bias);
        }
        if let Some(r) = &self.router {
            for (name, t) in r.adapter.named_tensors() {
                w.push(format!("router/adapter/{name}"), t);
            }
            w.push("router/head/weight".into(), &r.head.weight);
            w.push("router/head/bias".into(), &r.head.bias);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            encoder: self.core.config.clone(),
            core_frozen: self.core.is_frozen(),
            vocab: self.tokenizer.tokens().to_vec(),
            schemes: reg.schemes().cloned().collect(),
            domains: reg.domains().map(|(d, e)| (d.clone(), e.clone())).collect(),
            adapters: reg.adapters().map(adapter_meta).collect(),
            heads: reg
                .heads()
                .map(|h| HeadMeta {
                    id: h.id.clone(),
                    scheme_id: h.scheme_id.clone(),
                    frozen: h.is_frozen(),
                })
                .collect(),
            router: self.router.as_ref().map(|r| RouterMeta {
                config: r.config.clone(),
                adapter: adapter_meta(&r.adapter),
            }),
            arrays: w.arrays,
        };
        let json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(60 + json.len() + w.payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&json));
        out.extend_from_slice(&json);
        out.extend_from_slice(&(w.payload.len() as u64).to_le_bytes());
        out.extend_from_slice(&w.payload);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Bundle, BundleError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(BundleError::BadMagic);
        }
        let version = u32::from_le_bytes(r.take(4)?.try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(BundleError::VersionMismatch {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let mlen = r.u64()?;
        let digest = r.take(32)?.to_vec();
        let json = r.take(mlen)?;
        if Sha256::digest(json).as_slice() != digest.as_slice() {
            return Err(BundleError::ManifestChecksum);
        }
        let plen = r.u64()?;
        let payload = r.take(plen)?;
        if r.pos != bytes.len() {
            return Err(BundleError::Malformed(format!(
                "{} trailing bytes after payload",
                bytes.len() - r.pos
            )));
        }
        let manifest: Manifest =
            serde_json::from_slice(json).map_err(|e| BundleError::Malformed(format!("manifest: {e}")))?;
        if manifest.format_version != version {
            return Err(BundleError::Malformed("manifest version disagrees with header".into()));
        }
        manifest.assemble(payload)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> crate::Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> crate::Result<Bundle> {
        let bytes = std::fs::read(path)?;
        Ok(Bundle::from_bytes(&bytes)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], BundleError> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(BundleError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<usize, BundleError> {
        let v = u64::from_le_bytes(self.take(8)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| BundleError::Malformed("length overflows usize".into()))
    }
}

struct Arrays<'a> {
    by_name: BTreeMap<&'a str, &'a ArrayMeta>,
    payload: &'a [u8],
    used: usize,
}

impl Arrays<'_> {
    fn fill(&mut self, name: &str, t: &mut Tensor) -> Result<(), BundleError> {
        let meta = self
            .by_name
            .get(name)
            .ok_or_else(|| BundleError::Malformed(format!("missing array `{name}`")))?;
        if meta.shape != t.shape() {
            return Err(BundleError::Malformed(format!(
                "array `{name}` has shape {:?}, expected {:?}",
                meta.shape,
                t.shape()
            )));
        }
        let len = t.numel() * 8;
        let end = meta
            .offset
            .checked_add(len)
            .filter(|&e| e <= self.payload.len())
            .ok_or(BundleError::Truncated {
                offset: meta.offset,
                needed: len,
                available: self.payload.len().saturating_sub(meta.offset),
            })?;
        let bytes = &self.payload[meta.offset..end];
        if hex::encode(Sha256::digest(bytes)) != meta.sha256 {
            return Err(BundleError::ArrayChecksum(name.to_string()));
        }
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        t.copy_from(&values)
            .map_err(|e| BundleError::Malformed(e.to_string()))?;
        self.used += 1;
        Ok(())
    }

    fn adapter(&mut self, meta: &AdapterMeta, prefix: &str, cfg: &EncoderConfig) -> Result<AdapterSet, BundleError> {
        // Shapes come from a throwaway init; every value is overwritten.
        let mut a = init_adapter(meta.id.clone(), &meta.hyper, cfg, &mut seeded(0))
            .map_err(|e| BundleError::Malformed(e.to_string()))?;
        a.trained_on = meta.trained_on.clone();
        let names: Vec<String> = a.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(a.tensors_mut()) {
            self.fill(&format!("{prefix}{name}"), t)?;
        }
        a.set_trainable(meta.trainable);
        Ok(a)
    }

    fn linear(&mut self, prefix: &str, d_in: usize, d_out: usize) -> Result<Linear, BundleError> {
        let mut l = Linear {
            weight: Tensor::zeros(&[d_in, d_out]),
            bias: Tensor::zeros(&[d_out]),
        };
        self.fill(&format!("{prefix}weight"), &mut l.weight)?;
        self.fill(&format!("{prefix}bias"), &mut l.bias)?;
        Ok(l)
    }
}

impl Manifest {
    fn assemble(self, payload: &[u8]) -> Result<Bundle, BundleError> {
        let malformed = |e: crate::Error| BundleError::Malformed(e.to_string());
        let cfg = &self.encoder;
        cfg.validate().map_err(malformed)?;
        let mut arrays = Arrays {
            by_name: self.arrays.iter().map(|a| (a.name.as_str(), a)).collect(),
            payload,
            used: 0,
        };
        if arrays.by_name.len() != self.arrays.len() {
            return Err(BundleError::Malformed("duplicate array names".into()));
        }

        let mut core = CoreModel::new(cfg.clone(), &mut seeded(0)).map_err(malformed)?;
        let names: Vec<String> = core.named_tensors().into_iter().map(|(n, _)| n).collect();
        for (name, t) in names.iter().zip(core.tensors_mut()) {
            arrays.fill(&format!("core/{name}"), t)?;
        }
        if self.core_frozen {
            core.freeze();
        }

        let tokenizer = Tokenizer::from_tokens(self.vocab).map_err(malformed)?;

        let mut schemes = BTreeMap::new();
        for s in self.schemes {
            s.validate().map_err(malformed)?;
            schemes.insert(s.id.clone(), s);
        }
        let mut adapters = BTreeMap::new();
        for meta in &self.adapters {
            let a = arrays.adapter(meta, &format!("adapter/{}/", meta.id), cfg)?;
            adapters.insert(a.id.clone(), a);
        }
        let mut heads = BTreeMap::new();
        for meta in &self.heads {
            let scheme = schemes
                .get(&meta.scheme_id)
                .ok_or_else(|| BundleError::Malformed(format!("head `{}` names unknown scheme", meta.id)))?;
            let linear = arrays.linear(&format!("head/{}/", meta.id), cfg.d_model, scheme.len())?;
            let mut head = ClassifierHead::from_parts(meta.id.clone(), meta.scheme_id.clone(), linear, meta.frozen);
            if !meta.frozen {
                head.unfreeze();
            }
            heads.insert(head.id.clone(), head);
        }
        let registry = DomainRegistry::from_parts(self.domains, adapters, heads, schemes).map_err(malformed)?;

        let router = match &self.router {
            None => None,
            Some(rm) => {
                let adapter = arrays.adapter(&rm.adapter, "router/adapter/", cfg)?;
                let head = arrays.linear("router/head/", cfg.d_model, rm.config.domains.len())?;
                Some(RouterModel {
                    config: rm.config.clone(),
                    adapter,
                    head,
                })
            }
        };
        if arrays.used != self.arrays.len() {
            return Err(BundleError::Malformed(format!(
                "{} unreferenced arrays",
                self.arrays.len() - arrays.used
            )));
        }
        Ok(Bundle {
            core,
            tokenizer,
            registry,
            router,
        })
    }
}
