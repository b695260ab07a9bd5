//! Model shapes, adapter wiring, and parameter accounting.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::adapters::{AdapterSpec, LayerKind, Proj, Variant, ALL_PROJS};
use crate::error::{Error, Result};

/// Shape of the transformer plus its adapter wiring.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    #[serde(default = "AdapterSpec::none")]
    pub adapter: AdapterSpec,
}

impl ModelConfig {
    /// Small enough for finite-difference checks, large enough that fusion
    /// changes measured op counts.
    pub fn toy() -> Self {
        ModelConfig {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 256,
            vocab_size: 256,
            max_seq_len: 256,
            adapter: AdapterSpec::none(),
        }
    }

    /// Tiny shape for finite-difference gradient checks at model scope.
    pub fn micro() -> Self {
        ModelConfig {
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            n_kv_heads: 1,
            d_ff: 16,
            vocab_size: 12,
            max_seq_len: 32,
            adapter: AdapterSpec::none(),
        }
    }

    /// Default benchmark shape; sized so fusion effects exceed timer noise.
    pub fn bench() -> Self {
        ModelConfig {
            d_model: 512,
            n_layers: 4,
            n_heads: 8,
            n_kv_heads: 4,
            d_ff: 2048,
            vocab_size: 512,
            max_seq_len: 512,
            adapter: AdapterSpec::none(),
        }
    }

    /// Public Llama3.2-1B projection dimensions, used for parameter
    /// accounting and op-count analysis only (no weights are ever loaded).
    pub fn llama1b_shape() -> Self {
        ModelConfig {
            d_model: 2048,
            n_layers: 16,
            n_heads: 32,
            n_kv_heads: 8,
            d_ff: 8192,
            vocab_size: 128_256,
            max_seq_len: 131_072,
            adapter: AdapterSpec::none(),
        }
    }

    /// Public Llama3.2-3B projection dimensions.
    pub fn llama3b_shape() -> Self {
        ModelConfig {
            d_model: 3072,
            n_layers: 28,
            n_heads: 24,
            n_kv_heads: 8,
            d_ff: 8192,
            vocab_size: 128_256,
            max_seq_len: 131_072,
            adapter: AdapterSpec::none(),
        }
    }

    pub fn shape_preset(name: &str) -> Result<Self> {
        match name {
            "toy" => Ok(Self::toy()),
            "micro" => Ok(Self::micro()),
            "bench" => Ok(Self::bench()),
            "llama1b" => Ok(Self::llama1b_shape()),
            "llama3b" => Ok(Self::llama3b_shape()),
            other => Err(Error::Config(format!(
                "unknown shape preset {other:?}; expected toy, micro, bench, llama1b, or llama3b"
            ))),
        }
    }

    pub fn with_adapter(mut self, adapter: AdapterSpec) -> Self {
        self.adapter = adapter;
        self
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    /// `(d_in, d_out)` of a projection.
    pub fn proj_dims(&self, proj: Proj) -> (usize, usize) {
        match proj {
            Proj::Query => (self.d_model, self.d_model),
            Proj::Key | Proj::Value => (self.d_model, self.kv_dim()),
            Proj::Output => (self.d_model, self.d_model),
            Proj::Gate | Proj::Up => (self.d_model, self.d_ff),
            Proj::Down => (self.d_ff, self.d_model),
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("d_model", self.d_model),
            ("n_layers", self.n_layers),
            ("n_heads", self.n_heads),
            ("n_kv_heads", self.n_kv_heads),
            ("d_ff", self.d_ff),
            ("vocab_size", self.vocab_size),
            ("max_seq_len", self.max_seq_len),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_heads % self.n_kv_heads != 0 {
            return Err(Error::Config(format!(
                "n_heads {} not divisible by n_kv_heads {}",
                self.n_heads, self.n_kv_heads
            )));
        }
        if self.head_dim() % 2 != 0 {
            return Err(Error::Config(format!(
                "head_dim {} must be even for rotary embeddings",
                self.head_dim()
            )));
        }
        self.adapter.validate()?;

        let spec = &self.adapter;
        if spec.variant == Variant::None {
            return Ok(());
        }
        for proj in ALL_PROJS {
            let (d_in, d_out) = self.proj_dims(proj);
            let stored = spec.forward_rank();
            if stored >= d_in.min(d_out) {
                return Err(Error::Config(format!(
                    "adapter rank {} is not low-rank for the {proj} projection ({d_out}x{d_in})",
                    spec.rank
                )));
            }
            match spec.layer_kind(proj) {
                LayerKind::Ffa => {
                    if d_out % (2 * spec.rank) != 0 {
                        return Err(Error::Config(format!(
                            "ffa: {proj} output dim {d_out} not divisible by 2r = {}",
                            2 * spec.rank
                        )));
                    }
                }
                LayerKind::Ffl { self_add: true } | LayerKind::Ffbl { shrink: true } => {
                    if d_out % spec.rank != 0 {
                        return Err(Error::Config(format!(
                            "repeat-and-add on {proj}: output dim {d_out} not divisible by rank {}",
                            spec.rank
                        )));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }
}

/// How a tensor is initialized when a model is built from a seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitKind {
    /// Uniform in `±1/sqrt(fan_in)`.
    BaseUniform { fan_in: usize },
    /// Forward adapter: uniform in `±1/sqrt(fan_in)`.
    ForwardAdapter { fan_in: usize },
    /// Standard normal entries (embedding table).
    Normal,
    Zeros,
    Ones,
}

/// Structural description of one model tensor.
#[derive(Debug, Clone)]
pub struct TensorDecl {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub trainable: bool,
    pub init: InitKind,
}

impl TensorDecl {
    pub fn count(&self) -> u64 {
        (self.rows as u64) * (self.cols as u64)
    }
}

/// Adapter partitions of one projection, as structural declarations.
fn proj_decls(cfg: &ModelConfig, layer: usize, group: &str, proj: Proj, out: &mut Vec<TensorDecl>) {
    let (d_in, d_out) = cfg.proj_dims(proj);
    let spec = &cfg.adapter;
    let kind = spec.layer_kind(proj);
    let prefix = format!("layers.{layer}.{group}.{}", short_name(proj));
    out.push(TensorDecl {
        name: format!("{prefix}.weight"),
        rows: d_out,
        cols: d_in,
        trainable: false,
        init: InitKind::BaseUniform { fan_in: d_in },
    });
    if kind.has_a() {
        let stored = spec.forward_rank();
        // A starts at zero wherever its output reaches the base output
        // without a zero-initialized B in between, so every variant's
        // adapted model begins exactly at the base model.
        let init = if kind.a_feeds_base_directly() {
            InitKind::Zeros
        } else {
            InitKind::ForwardAdapter { fan_in: d_in }
        };
        out.push(TensorDecl {
            name: format!("{prefix}.adapter_a"),
            rows: stored,
            cols: d_in,
            trainable: true,
            init,
        });
    }
    if kind.has_b() {
        out.push(TensorDecl {
            name: format!("{prefix}.adapter_b"),
            rows: d_out,
            cols: spec.rank,
            trainable: true,
            init: InitKind::Zeros,
        });
    }
    if matches!(kind, LayerKind::Ffbl { .. }) && spec.use_c {
        out.push(TensorDecl {
            name: format!("{prefix}.adapter_c"),
            rows: spec.rank,
            cols: spec.rank,
            trainable: true,
            init: InitKind::Zeros,
        });
    }
}

fn short_name(proj: Proj) -> &'static str {
    match proj {
        Proj::Query => "q",
        Proj::Key => "k",
        Proj::Value => "v",
        Proj::Output => "o",
        Proj::Gate => "gate",
        Proj::Up => "up",
        Proj::Down => "down",
    }
}

/// Complete ordered list of model tensors: the single source of truth for
/// construction, checkpoints, and the parameter-count enumeration oracle.
pub fn tensor_manifest(cfg: &ModelConfig) -> Vec<TensorDecl> {
    let mut out = Vec::new();
    out.push(TensorDecl {
        name: "embed".into(),
        rows: cfg.d_model,
        cols: cfg.vocab_size,
        trainable: false,
        init: InitKind::Normal,
    });
    for layer in 0..cfg.n_layers {
        out.push(TensorDecl {
            name: format!("layers.{layer}.attn_norm"),
            rows: cfg.d_model,
            cols: 1,
            trainable: false,
            init: InitKind::Ones,
        });
        for proj in [Proj::Query, Proj::Key, Proj::Value, Proj::Output] {
            proj_decls(cfg, layer, "attn", proj, &mut out);
        }
        out.push(TensorDecl {
            name: format!("layers.{layer}.ffn_norm"),
            rows: cfg.d_model,
            cols: 1,
            trainable: false,
            init: InitKind::Ones,
        });
        for proj in [Proj::Gate, Proj::Up, Proj::Down] {
            proj_decls(cfg, layer, "ffn", proj, &mut out);
        }
    }
    out.push(TensorDecl {
        name: "final_norm".into(),
        rows: cfg.d_model,
        cols: 1,
        trainable: false,
        init: InitKind::Ones,
    });
    out.push(TensorDecl {
        name: "head".into(),
        rows: cfg.vocab_size,
        cols: cfg.d_model,
        trainable: false,
        init: InitKind::BaseUniform { fan_in: cfg.d_model },
    });
    out
}

/// Parameter accounting for a configuration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ParamCount {
    pub trainable: u64,
    pub total: u64,
    /// Trainable parameters contributed by each projection, per layer.
    pub per_layer: BTreeMap<String, u64>,
}

/// Closed-form parameter counts. Cross-checked against the manifest
/// enumeration by [`enumerated_trainable`] in the verification suites.
pub fn param_count(cfg: &ModelConfig) -> ParamCount {
    let spec = &cfg.adapter;
    let r = spec.rank as u64;
    let mut per_layer = BTreeMap::new();
    let mut per_layer_total = 0u64;

    for proj in ALL_PROJS {
        let (d_in, d_out) = cfg.proj_dims(proj);
        let (d_in, d_out) = (d_in as u64, d_out as u64);
        let count = match spec.variant {
            Variant::None => 0,
            Variant::Lora | Variant::PfLora => r * (d_in + d_out),
            Variant::Ffa => 2 * r * d_in,
            Variant::FfbaAb => match proj {
                Proj::Output | Proj::Down => {
                    r * d_in + d_out * r + if spec.use_c { r * r } else { 0 }
                }
                _ => r * d_in,
            },
            Variant::FfbaAorb | Variant::FfbaQgAdd | Variant::Fpa => match proj {
                Proj::Output | Proj::Down => d_out * r,
                _ => r * d_in,
            },
        };
        per_layer.insert(proj.name().to_string(), count);
        per_layer_total += count;
    }

    let trainable = per_layer_total * cfg.n_layers as u64;

    let (d, v, ff, l) = (
        cfg.d_model as u64,
        cfg.vocab_size as u64,
        cfg.d_ff as u64,
        cfg.n_layers as u64,
    );
    let kv = cfg.kv_dim() as u64;
    let base_per_layer = d * d * 2 + d * kv * 2 + d * ff * 3 + 2 * d;
    let total = d * v * 2 + l * base_per_layer + d + trainable;

    ParamCount { trainable, total, per_layer }
}

/// Trainable parameter count by enumerating the tensor manifest; the
/// independent route against the closed form.
pub fn enumerated_trainable(cfg: &ModelConfig) -> u64 {
    tensor_manifest(cfg)
        .iter()
        .filter(|d| d.trainable)
        .map(|d| d.count())
        .sum()
}
