//! The shared transformer core.
//!
//! Pre-norm encoder blocks with learned absolute positions, GELU feed-forward
//! and a final layer norm. Adapters hook into two places: LoRA deltas are
//! added to targeted projections, and prefix keys/values extend every
//! layer's attention context.

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterPayload, AdapterSet, PrefixAdapter};
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{Segment, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub ln_eps: f64,
}

impl EncoderConfig {
    /// Desk-scale core: two layers, width 32, two heads.
    pub fn toy(vocab_size: usize) -> Self {
        EncoderConfig {
            n_layers: 2,
            d_model: 32,
            n_heads: 2,
            d_ff: 64,
            vocab_size,
            max_seq_len: 512,
            ln_eps: 1e-5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("d_model", self.d_model),
            ("n_heads", self.n_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Parameter(format!("{name} must be positive")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Parameter(format!(
                "n_heads {} does not divide d_model {}",
                self.n_heads, self.d_model
            )));
        }
        if self.ln_eps.is_nan() || self.ln_eps <= 0.0 {
            return Err(Error::Parameter("ln_eps must be positive".into()));
        }
        Ok(())
    }
}

/// Linear maps inside an encoder block that an adapter may target.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
}

impl Projection {
    pub const ALL: [Projection; 6] = [
        Projection::Wq,
        Projection::Wk,
        Projection::Wv,
        Projection::Wo,
        Projection::W1,
        Projection::W2,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Wq => "wq",
            Projection::Wk => "wk",
            Projection::Wv => "wv",
            Projection::Wo => "wo",
            Projection::W1 => "w1",
            Projection::W2 => "w2",
        }
    }

    /// `(d_in, d_out)` of the projection.
    pub fn dims(self, cfg: &EncoderConfig) -> (usize, usize) {
        match self {
            Projection::W1 => (cfg.d_model, cfg.d_ff),
            Projection::W2 => (cfg.d_ff, cfg.d_model),
            _ => (cfg.d_model, cfg.d_model),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub wq: Tensor,
    pub wk: Tensor,
    pub wv: Tensor,
    pub wo: Tensor,
    pub w1: Tensor,
    pub w2: Tensor,
    pub ln1_gain: Tensor,
    pub ln1_bias: Tensor,
    pub ln2_gain: Tensor,
    pub ln2_bias: Tensor,
}

impl EncoderLayer {
    pub fn projection(&self, p: Projection) -> &Tensor {
        match p {
            Projection::Wq => &self.wq,
            Projection::Wk => &self.wk,
            Projection::Wv => &self.wv,
            Projection::Wo => &self.wo,
            Projection::W1 => &self.w1,
            Projection::W2 => &self.w2,
        }
    }

    pub fn projection_mut(&mut self, p: Projection) -> &mut Tensor {
        match p {
            Projection::Wq => &mut self.wq,
            Projection::Wk => &mut self.wk,
            Projection::Wv => &mut self.wv,
            Projection::Wo => &mut self.wo,
            Projection::W1 => &mut self.w1,
            Projection::W2 => &mut self.w2,
        }
    }

    fn named(&self) -> [(&'static str, &Tensor); 10] {
        [
            ("wq", &self.wq),
            ("wk", &self.wk),
            ("wv", &self.wv),
            ("wo", &self.wo),
            ("w1", &self.w1),
            ("w2", &self.w2),
            ("ln1_gain", &self.ln1_gain),
            ("ln1_bias", &self.ln1_bias),
            ("ln2_gain", &self.ln2_gain),
            ("ln2_bias", &self.ln2_bias),
        ]
    }

    fn tensors_mut(&mut self) -> [&mut Tensor; 10] {
        [
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.w1,
            &mut self.w2,
            &mut self.ln1_gain,
            &mut self.ln1_bias,
            &mut self.ln2_gain,
            &mut self.ln2_bias,
        ]
    }
}

/// Packed batch of token sequences: all rows concatenated, with segment
/// boundaries so that attention never crosses sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct PackedInput {
    pub ids: Vec<usize>,
    pub positions: Vec<usize>,
    pub segments: Vec<Segment>,
}

impl PackedInput {
    pub fn from_sequences<S: AsRef<[usize]>>(seqs: &[S]) -> Self {
        let mut packed = PackedInput {
            ids: Vec::new(),
            positions: Vec::new(),
            segments: Vec::with_capacity(seqs.len()),
        };
        for s in seqs {
            let s = s.as_ref();
            packed.segments.push(Segment::full(packed.ids.len(), s.len()));
            packed.ids.extend_from_slice(s);
            packed.positions.extend(0..s.len());
        }
        packed
    }

    /// One sequence with an optional right-padding mask (`true` = real token).
    pub fn single(ids: &[usize], pad_mask: Option<&[bool]>) -> Result<Self> {
        let valid = match pad_mask {
            None => ids.len(),
            Some(mask) => {
                if mask.len() != ids.len() {
                    return Err(Error::shape(format!(
                        "pad mask of length {} for {} tokens",
                        mask.len(),
                        ids.len()
                    )));
                }
                let valid = mask.iter().take_while(|&&m| m).count();
                if mask[valid..].iter().any(|&m| m) {
                    return Err(Error::Input("pad mask must be right-padded".into()));
                }
                valid
            }
        };
        Ok(PackedInput {
            ids: ids.to_vec(),
            positions: (0..ids.len()).collect(),
            segments: vec![Segment {
                start: 0,
                len: ids.len(),
                valid,
            }],
        })
    }

    pub fn rows(&self) -> usize {
        self.ids.len()
    }

    /// Row index of each sequence's first position (the `[CLS]` slot).
    pub fn first_rows(&self) -> Vec<usize> {
        self.segments.iter().map(|s| s.start).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CoreModel {
    pub config: EncoderConfig,
    pub token_embedding: Tensor,
    pub position_embedding: Tensor,
    pub layers: Vec<EncoderLayer>,
    pub final_gain: Tensor,
    pub final_bias: Tensor,
    frozen: bool,
}

impl CoreModel {
    /// Freshly initialised, trainable core.
    pub fn new(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let proj = |d_in: usize, d_out: usize, rng: &mut Rng| {
            Tensor::randn(&[d_in, d_out], 1.0 / (d_in as f64).sqrt(), rng).with_grad()
        };
        let token_embedding = Tensor::randn(&[config.vocab_size, d], 1.0, rng).with_grad();
        let position_embedding = Tensor::randn(&[config.max_seq_len, d], 0.1, rng).with_grad();
        let layers = (0..config.n_layers)
            .map(|_| EncoderLayer {
                wq: proj(d, d, rng),
                wk: proj(d, d, rng),
                wv: proj(d, d, rng),
                wo: proj(d, d, rng),
                w1: proj(d, config.d_ff, rng),
                w2: proj(config.d_ff, d, rng),
                ln1_gain: Tensor::filled(&[d], 1.0).with_grad(),
                ln1_bias: Tensor::zeros(&[d]).with_grad(),
                ln2_gain: Tensor::filled(&[d], 1.0).with_grad(),
                ln2_bias: Tensor::zeros(&[d]).with_grad(),
            })
            .collect();
        Ok(CoreModel {
            config,
            token_embedding,
            position_embedding,
            layers,
            final_gain: Tensor::filled(&[d], 1.0).with_grad(),
            final_bias: Tensor::zeros(&[d]).with_grad(),
            frozen: false,
        })
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    /// Stops gradient flow into every core tensor. Idempotent.
    pub fn freeze(&mut self) {
        for t in self.tensors_mut() {
            t.set_requires_grad(false);
        }
        self.frozen = true;
    }

    /// Makes every core tensor trainable again (full fine-tuning baselines).
    pub fn unfreeze(&mut self) {
        for t in self.tensors_mut() {
            t.set_requires_grad(true);
        }
        self.frozen = false;
    }

    /// Tensors in canonical serialisation order with stable names.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.named() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out.push(("final_gain".to_string(), &self.final_gain));
        out.push(("final_bias".to_string(), &self.final_bias));
        out
    }

    pub fn tensors(&self) -> Vec<&Tensor> {
        self.named_tensors().into_iter().map(|(_, t)| t).collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = vec![&mut self.token_embedding, &mut self.position_embedding];
        for layer in &mut self.layers {
            out.extend(layer.tensors_mut());
        }
        out.push(&mut self.final_gain);
        out.push(&mut self.final_bias);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Little-endian bytes of all weights; the reference for freeze checks.
    pub fn weight_bytes(&self) -> Vec<u8> {
        crate::tensor::params_bytes(self.tensors())
    }

    fn check_input(&self, input: &PackedInput) -> Result<()> {
        if let Some(&id) = input.ids.iter().find(|&&id| id >= self.config.vocab_size) {
            return Err(Error::Vocab {
                id,
                vocab_size: self.config.vocab_size,
            });
        }
        if let Some(s) = input.segments.iter().find(|s| s.len > self.config.max_seq_len) {
            return Err(Error::Length {
                len: s.len,
                max: self.config.max_seq_len,
            });
        }
        if input.segments.iter().any(|s| s.len == 0) {
            return Err(Error::Input("empty sequence".into()));
        }
        Ok(())
    }

    /// Records the forward pass on `tape` and returns hidden states, one row
    /// per input position.
    pub fn forward(
        &self,
        tape: &mut Tape,
        input: &PackedInput,
        adapter: Option<&AdapterSet>,
    ) -> Result<Var> {
        self.forward_stack(tape, input, adapter.as_slice())
    }

    /// Forward with several adapters attached at once: every LoRA delta is
    /// summed onto its projection, and at most one prefix extends attention.
    pub fn forward_stack(&self, tape: &mut Tape, input: &PackedInput, adapters: &[&AdapterSet]) -> Result<Var> {
        self.check_input(input)?;
        for a in adapters {
            a.check_compatible(&self.config)?;
        }
        let prefixes: Vec<&PrefixAdapter> = adapters
            .iter()
            .filter_map(|a| match &a.payload {
                AdapterPayload::Prefix(p) => Some(p),
                _ => None,
            })
            .collect();
        if prefixes.len() > 1 {
            return Err(Error::Contract(format!("{} prefix adapters attached; at most one is supported", prefixes.len())));
        }
        let eps = self.config.ln_eps;
        let tok_table = tape.leaf(&self.token_embedding);
        let pos_table = tape.leaf(&self.position_embedding);
        let tok = tape.rows(tok_table, &input.ids)?;
        let pos = tape.rows(pos_table, &input.positions)?;
        let mut x = tape.add(tok, pos)?;

        for (li, layer) in self.layers.iter().enumerate() {
            let g1 = tape.leaf(&layer.ln1_gain);
            let b1 = tape.leaf(&layer.ln1_bias);
            let h = tape.layer_norm(x, g1, b1, eps)?;
            let q = self.project(tape, h, layer, li, Projection::Wq, adapters)?;
            let k = self.project(tape, h, layer, li, Projection::Wk, adapters)?;
            let v = self.project(tape, h, layer, li, Projection::Wv, adapters)?;
            let prefix = prefixes.first().map(|p| {
                let pl = &p.layers[li];
                (tape.leaf(&pl.keys), tape.leaf(&pl.values))
            });
            let a = tape.attention(q, k, v, prefix, &input.segments, self.config.n_heads)?;
            let o = self.project(tape, a, layer, li, Projection::Wo, adapters)?;
            x = tape.add(x, o)?;

            let g2 = tape.leaf(&layer.ln2_gain);
            let b2 = tape.leaf(&layer.ln2_bias);
            let h = tape.layer_norm(x, g2, b2, eps)?;
            let f = self.project(tape, h, layer, li, Projection::W1, adapters)?;
            let f = tape.gelu(f);
            let f = self.project(tape, f, layer, li, Projection::W2, adapters)?;
            x = tape.add(x, f)?;
        }
        let gf = tape.leaf(&self.final_gain);
        let bf = tape.leaf(&self.final_bias);
        tape.layer_norm(x, gf, bf, eps)
    }

    fn project(
        &self,
        tape: &mut Tape,
        x: Var,
        layer: &EncoderLayer,
        index: usize,
        which: Projection,
        adapters: &[&AdapterSet],
    ) -> Result<Var> {
        let w = tape.leaf(layer.projection(which));
        let mut out = tape.matmul(x, w)?;
        for adapter in adapters {
            let AdapterPayload::Lora(lora) = &adapter.payload else {
                continue;
            };
            let Some(factor) = lora.factor(index, which) else {
                continue;
            };
            let a = tape.leaf(&factor.a);
            let b = tape.leaf(&factor.b);
            let down = tape.matmul_nt(x, a)?;
            let up = tape.matmul_nt(down, b)?;
            let delta = tape.scale(up, lora.scaling());
            out = tape.add(out, delta)?;
        }
        Ok(out)
    }

    /// Gradient-free forward of one sequence, returned as `[len × d_model]`.
    pub fn hidden_states(
        &self,
        token_ids: &[usize],
        adapter: Option<&AdapterSet>,
        pad_mask: Option<&[bool]>,
    ) -> Result<Tensor> {
        let input = PackedInput::single(token_ids, pad_mask)?;
        let mut tape = Tape::new();
        let h = self.forward(&mut tape, &input, adapter)?;
        Ok(tape.to_tensor(h))
    }
}

/// Trains the core from scratch as a token classifier; see
/// [`crate::training::pretrain_core`].
pub use crate::training::pretrain_core;
