//! The transformer: grouped-query attention, SwiGLU FFN, RMSNorm, rotary
//! embeddings, adapter routing per variant, and KV-cached greedy decoding.

use std::collections::BTreeMap;

use rand::RngExt;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sha2::{Digest, Sha256};

use crate::adapters::{ExecPath, FusedLinearLayer, LayerOut, Nonlinearity, Proj, Variant};
use crate::error::{Error, Result};
use crate::model::config::{tensor_manifest, InitKind, ModelConfig, TensorDecl};
use crate::tape::{Gradients, Tape};
use crate::tensor::{Element, Tensor};
use crate::trace::{Attribution, OpCategory};

/// Per-layer KV store. Keys and values are kept per kv-head in transposed
/// layout (rows are positions), so attention can consume them directly.
#[derive(Clone)]
struct LayerCache<E: Element> {
    k_t: Vec<Vec<E>>,
    v_t: Vec<Vec<E>>,
}

/// Grown one chunk at a time by prefill/decode; cloning snapshots the
/// decoding state (used by the double-pass timing discipline).
#[derive(Clone)]
pub struct KvCache<E: Element> {
    layers: Vec<LayerCache<E>>,
    len: usize,
    max_len: usize,
}

impl<E: Element> KvCache<E> {
    fn new(n_layers: usize, n_kv_heads: usize, max_len: usize) -> Self {
        KvCache {
            layers: (0..n_layers)
                .map(|_| LayerCache {
                    k_t: vec![Vec::new(); n_kv_heads],
                    v_t: vec![Vec::new(); n_kv_heads],
                })
                .collect(),
            len: 0,
            max_len,
        }
    }

    /// Number of consumed tokens.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }
}

impl<E: Element> LayerCache<E> {
    /// Appends the chunk's key/value columns, head by head.
    fn append(&mut self, y_k: &Tensor<E>, y_v: &Tensor<E>, head_dim: usize) {
        let l = y_k.cols();
        let n_kv = y_k.rows() / head_dim;
        for g in 0..n_kv {
            for c in 0..l {
                for d in 0..head_dim {
                    self.k_t[g].push(y_k.get(g * head_dim + d, c));
                    self.v_t[g].push(y_v.get(g * head_dim + d, c));
                }
            }
        }
    }
}

struct Block<E: Element> {
    attn_norm: Tensor<E>,
    q: FusedLinearLayer<E>,
    k: FusedLinearLayer<E>,
    v: FusedLinearLayer<E>,
    o: FusedLinearLayer<E>,
    ffn_norm: Tensor<E>,
    gate: FusedLinearLayer<E>,
    up: FusedLinearLayer<E>,
    down: FusedLinearLayer<E>,
}

/// Toy Llama-shaped transformer with per-variant adapter wiring.
pub struct TransformerModel<E: Element> {
    cfg: ModelConfig,
    embed: Tensor<E>,
    layers: Vec<Block<E>>,
    final_norm: Tensor<E>,
    head: Tensor<E>,
}

/// Per-tensor generator derived from the run seed and the tensor name, so
/// a tensor's initial values depend only on (seed, name). Base weights are
/// therefore identical across adapter variants, which the base-preservation
/// checks compare against.
fn tensor_rng(seed: u64, name: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(name.as_bytes());
    ChaCha8Rng::from_seed(hasher.finalize().into())
}

fn init_tensor<E: Element>(decl: &TensorDecl, seed: u64) -> Tensor<E> {
    let mut rng = tensor_rng(seed, &decl.name);
    match decl.init {
        InitKind::BaseUniform { fan_in } | InitKind::ForwardAdapter { fan_in } => {
            let bound = 1.0 / (fan_in as f64).sqrt();
            Tensor::from_fn(decl.rows, decl.cols, |_, _| {
                E::from_f64(rng.random_range(-bound..bound))
            })
        }
        InitKind::Normal => Tensor::from_fn(decl.rows, decl.cols, |_, _| {
            E::from_f64(StandardNormal.sample(&mut rng))
        }),
        InitKind::Zeros => Tensor::zeros(decl.rows, decl.cols),
        InitKind::Ones => Tensor::filled(decl.rows, decl.cols, E::ONE),
    }
}

impl<E: Element> TransformerModel<E> {
    /// Fresh model with seeded random frozen base weights and the spec's
    /// adapter initialization.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        Self::build(cfg, &mut |decl| Ok(init_tensor(decl, seed)))
    }

    /// Rebuilds a model from named tensors (checkpoint load). Every manifest
    /// tensor must be present with its exact shape; extras are rejected.
    pub fn from_tensors(cfg: ModelConfig, mut map: BTreeMap<String, Tensor<E>>) -> Result<Self> {
        let model = Self::build(cfg, &mut |decl| {
            let t = map
                .remove(&decl.name)
                .ok_or_else(|| Error::Checkpoint(format!("missing tensor {:?}", decl.name)))?;
            if t.shape() != (decl.rows, decl.cols) {
                return Err(Error::Checkpoint(format!(
                    "tensor {:?} has shape {}, expected {}x{}",
                    decl.name,
                    t.shape_str(),
                    decl.rows,
                    decl.cols
                )));
            }
            Ok(t)
        })?;
        if let Some(name) = map.keys().next() {
            return Err(Error::Checkpoint(format!("unexpected tensor {name:?}")));
        }
        Ok(model)
    }

    fn build(
        cfg: ModelConfig,
        get: &mut dyn FnMut(&TensorDecl) -> Result<Tensor<E>>,
    ) -> Result<Self> {
        cfg.validate()?;
        let mut tensors: BTreeMap<String, Tensor<E>> = BTreeMap::new();
        for decl in tensor_manifest(&cfg) {
            let t = get(&decl)?;
            tensors.insert(decl.name.clone(), t);
        }
        let spec = cfg.adapter.clone();
        let embed = take_tensor(&mut tensors, "embed".into())?;
        let mut layers = Vec::with_capacity(cfg.n_layers);
        for i in 0..cfg.n_layers {
            let attn_norm = take_tensor(&mut tensors, format!("layers.{i}.attn_norm"))?;
            let q = build_layer(&mut tensors, &spec, i, "attn", Proj::Query)?;
            let k = build_layer(&mut tensors, &spec, i, "attn", Proj::Key)?;
            let v = build_layer(&mut tensors, &spec, i, "attn", Proj::Value)?;
            let o = build_layer(&mut tensors, &spec, i, "attn", Proj::Output)?;
            let ffn_norm = take_tensor(&mut tensors, format!("layers.{i}.ffn_norm"))?;
            let gate = build_layer(&mut tensors, &spec, i, "ffn", Proj::Gate)?;
            let up = build_layer(&mut tensors, &spec, i, "ffn", Proj::Up)?;
            let down = build_layer(&mut tensors, &spec, i, "ffn", Proj::Down)?;
            layers.push(Block { attn_norm, q, k, v, o, ffn_norm, gate, up, down });
        }
        let final_norm = take_tensor(&mut tensors, "final_norm".into())?;
        let head = take_tensor(&mut tensors, "head".into())?;
        debug_assert!(tensors.is_empty());
        Ok(TransformerModel { cfg, embed, layers, final_norm, head })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn new_cache(&self) -> KvCache<E> {
        KvCache::new(self.cfg.n_layers, self.cfg.n_kv_heads, self.cfg.max_seq_len)
    }

    /// Attention block forward on the already-normalized input `h`.
    ///
    /// The base path runs grouped-query attention over the `Y` parts of
    /// q/k/v. In the ffba family, the rank-sized augmented outputs bypass
    /// attention entirely: they are summed, optionally passed through the
    /// bottleneck nonlinearity, and handed to the output projection as its
    /// augmented input.
    pub fn mha_forward(
        &self,
        tape: &mut Tape<E>,
        layer: usize,
        h: &Tensor<E>,
        cache: Option<&mut KvCache<E>>,
        path: ExecPath,
    ) -> Result<Tensor<E>> {
        let block = &self.layers[layer];
        let hd = self.cfg.head_dim();
        let l = h.cols();
        let pos0 = cache.as_ref().map_or(0, |c| c.len);

        let (y_q, dy_q) = split(block.q.forward(tape, h, None, path)?);
        let (y_k, dy_k) = split(block.k.forward(tape, h, None, path)?);
        let (y_v, dy_v) = split(block.v.forward(tape, h, None, path)?);

        let y_q = tape.rope(&y_q, hd, pos0)?;
        let y_k = tape.rope(&y_k, hd, pos0)?;

        // per-kv-head key/value tensors in transposed (positions x head_dim) layout
        let n_kv = self.cfg.n_kv_heads;
        let (k_heads, v_heads, s_total) = match cache {
            Some(cache) => {
                let lc = &mut cache.layers[layer];
                lc.append(&y_k, &y_v, hd);
                let s = pos0 + l;
                let mut k_heads = Vec::with_capacity(n_kv);
                let mut v_heads = Vec::with_capacity(n_kv);
                for g in 0..n_kv {
                    k_heads.push(Tensor::from_vec(s, hd, lc.k_t[g].clone())?);
                    v_heads.push(Tensor::from_vec(s, hd, lc.v_t[g].clone())?);
                }
                (k_heads, v_heads, s)
            }
            None => {
                let mut k_heads = Vec::with_capacity(n_kv);
                let mut v_heads = Vec::with_capacity(n_kv);
                for g in 0..n_kv {
                    let kg = tape.slice_rows(&y_k, g * hd, (g + 1) * hd)?;
                    k_heads.push(tape.transpose(&kg)?);
                    let vg = tape.slice_rows(&y_v, g * hd, (g + 1) * hd)?;
                    v_heads.push(tape.transpose(&vg)?);
                }
                (k_heads, v_heads, l)
            }
        };

        let mask = (l > 1).then(|| causal_mask::<E>(s_total, l, pos0));
        let scale = E::from_f64(1.0 / (hd as f64).sqrt());
        let group_size = self.cfg.n_heads / n_kv;
        let mut ctx_heads = Vec::with_capacity(self.cfg.n_heads);
        for head in 0..self.cfg.n_heads {
            let g = head / group_size;
            let q_h = tape.slice_rows(&y_q, head * hd, (head + 1) * hd)?;
            tape.note(OpCategory::PlainMatmul, Attribution::Base, None);
            let scores = tape.matmul(&k_heads[g], &q_h)?;
            let scores = tape.scale(&scores, scale)?;
            let scores = match &mask {
                Some(m) => tape.add(&scores, m)?,
                None => scores,
            };
            let probs = tape.softmax_cols(&scores)?;
            let probs_t = tape.transpose(&probs)?;
            tape.note(OpCategory::PlainMatmul, Attribution::Base, None);
            let ctx_t = tape.matmul(&probs_t, &v_heads[g])?;
            ctx_heads.push(tape.transpose(&ctx_t)?);
        }
        let refs: Vec<&Tensor<E>> = ctx_heads.iter().collect();
        let ctx = tape.concat_rows(&refs)?;

        if self.cfg.adapter.variant.ffba_family() {
            let delta = self.delta_sum(tape, &[dy_q, dy_k, dy_v], "mha_delta")?;
            let out = block.o.forward(tape, &ctx, Some(&delta), path)?;
            Ok(match out {
                LayerOut::Plain(t) => t,
                LayerOut::Augmented { y, .. } => y,
            })
        } else {
            Ok(block.o.forward(tape, &ctx, None, path)?.plain())
        }
    }

    /// FFN block forward on the already-normalized input `h`; the augmented
    /// path sums the gate/up adapter outputs into the down projection.
    pub fn ffn_forward(
        &self,
        tape: &mut Tape<E>,
        layer: usize,
        h: &Tensor<E>,
        path: ExecPath,
    ) -> Result<Tensor<E>> {
        let block = &self.layers[layer];
        let (y_gate, dy_gate) = split(block.gate.forward(tape, h, None, path)?);
        let (y_up, dy_up) = split(block.up.forward(tape, h, None, path)?);
        let activated = tape.silu(&y_gate)?;
        let s = tape.mul(&activated, &y_up)?;

        if self.cfg.adapter.variant.ffba_family() {
            let delta = self.delta_sum(tape, &[dy_gate, dy_up], "ffn_delta")?;
            let out = block.down.forward(tape, &s, Some(&delta), path)?;
            Ok(match out {
                LayerOut::Plain(t) => t,
                LayerOut::Augmented { y, .. } => y,
            })
        } else {
            Ok(block.down.forward(tape, &s, None, path)?.plain())
        }
    }

    /// Sums the forward adapters' augmented outputs and applies the
    /// bottleneck nonlinearity.
    fn delta_sum(
        &self,
        tape: &mut Tape<E>,
        parts: &[Option<Tensor<E>>],
        site: &str,
    ) -> Result<Tensor<E>> {
        let mut acc: Option<Tensor<E>> = None;
        for part in parts.iter().flatten() {
            acc = Some(match acc {
                None => part.clone(),
                Some(cur) => {
                    tape.note(OpCategory::Add, Attribution::Adapter, Some(site));
                    tape.add(&cur, part)?
                }
            });
        }
        let acc = acc.ok_or_else(|| {
            Error::Config("ffba wiring requires forward adapters upstream".into())
        })?;
        match self.cfg.adapter.nonlinearity {
            Nonlinearity::Identity => Ok(acc),
            Nonlinearity::Relu => tape.relu(&acc),
        }
    }

    /// Hidden states for a token chunk. With a cache this is the deployment
    /// path (prefill/decode); without it, the full-sequence path used by
    /// training, evaluation loss, and the recompute oracle.
    fn hidden_states(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        mut cache: Option<&mut KvCache<E>>,
        path: ExecPath,
    ) -> Result<Tensor<E>> {
        if let Some(cache) = cache.as_deref_mut() {
            if path == ExecPath::Train {
                return Err(Error::Contract("training never runs against a KV cache".into()));
            }
            if cache.len + tokens.len() > cache.max_len {
                return Err(Error::Capacity(format!(
                    "cache holds {} tokens; appending {} exceeds max_seq_len {}",
                    cache.len,
                    tokens.len(),
                    cache.max_len
                )));
            }
        } else if tokens.len() > self.cfg.max_seq_len {
            return Err(Error::Capacity(format!(
                "sequence of {} tokens exceeds max_seq_len {}",
                tokens.len(),
                self.cfg.max_seq_len
            )));
        }

        let mut x = tape.embed_cols(&self.embed, tokens)?;
        for i in 0..self.layers.len() {
            let h = tape.rmsnorm_cols(&x, &self.layers[i].attn_norm)?;
            let attn = self.mha_forward(tape, i, &h, cache.as_deref_mut(), path)?;
            tape.note(OpCategory::Add, Attribution::Base, None);
            x = tape.add(&x, &attn)?;

            let h = tape.rmsnorm_cols(&x, &self.layers[i].ffn_norm)?;
            let ffn = self.ffn_forward(tape, i, &h, path)?;
            tape.note(OpCategory::Add, Attribution::Base, None);
            x = tape.add(&x, &ffn)?;
        }
        if let Some(cache) = cache {
            cache.len += tokens.len();
        }
        Ok(x)
    }

    /// Logits for every position of a sequence, without a cache.
    pub fn forward_sequence(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        path: ExecPath,
    ) -> Result<Tensor<E>> {
        let x = self.hidden_states(tape, tokens, None, path)?;
        let h = tape.rmsnorm_cols(&x, &self.final_norm)?;
        tape.note(OpCategory::PlainMatmul, Attribution::Base, None);
        tape.matmul(&self.head, &h)
    }

    /// Consumes the prompt, filling the cache; returns logits for the last
    /// position (the first generated token's distribution).
    pub fn prefill(
        &self,
        tape: &mut Tape<E>,
        tokens: &[u32],
        cache: &mut KvCache<E>,
    ) -> Result<Tensor<E>> {
        if tokens.is_empty() {
            return Err(Error::Contract("prefill requires a nonempty prompt".into()));
        }
        let x = self.hidden_states(tape, tokens, Some(cache), ExecPath::Fused)?;
        let last = Tensor::from_fn(x.rows(), 1, |i, _| x.get(i, x.cols() - 1));
        let h = tape.rmsnorm_cols(&last, &self.final_norm)?;
        tape.note(OpCategory::PlainMatmul, Attribution::Base, None);
        tape.matmul(&self.head, &h)
    }

    /// One autoregressive step: consumes `token`, returns next-token logits.
    pub fn decode_step(
        &self,
        tape: &mut Tape<E>,
        token: u32,
        cache: &mut KvCache<E>,
    ) -> Result<Tensor<E>> {
        let x = self.hidden_states(tape, &[token], Some(cache), ExecPath::Fused)?;
        let h = tape.rmsnorm_cols(&x, &self.final_norm)?;
        tape.note(OpCategory::PlainMatmul, Attribution::Base, None);
        tape.matmul(&self.head, &h)
    }

    /// Greedy decoding: returns `gen_len` generated tokens.
    pub fn generate(&self, prompt: &[u32], gen_len: usize) -> Result<Vec<u32>> {
        let mut tape = Tape::inference();
        let mut cache = self.new_cache();
        let mut logits = self.prefill(&mut tape, prompt, &mut cache)?;
        let mut out = Vec::with_capacity(gen_len);
        for _ in 0..gen_len {
            let tok = argmax_col(&logits);
            out.push(tok);
            if out.len() == gen_len {
                break;
            }
            logits = self.decode_step(&mut tape, tok, &mut cache)?;
        }
        Ok(out)
    }

    /// All tensors in manifest order (payload clones are cheap).
    pub fn all_tensors(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        out.push(("embed".to_string(), self.embed.clone()));
        for (i, block) in self.layers.iter().enumerate() {
            out.push((format!("layers.{i}.attn_norm"), block.attn_norm.clone()));
            for (proj, layer) in
                [(Proj::Query, &block.q), (Proj::Key, &block.k), (Proj::Value, &block.v), (Proj::Output, &block.o)]
            {
                push_layer_tensors(&mut out, i, "attn", proj, layer);
            }
            out.push((format!("layers.{i}.ffn_norm"), block.ffn_norm.clone()));
            for (proj, layer) in [(Proj::Gate, &block.gate), (Proj::Up, &block.up), (Proj::Down, &block.down)] {
                push_layer_tensors(&mut out, i, "ffn", proj, layer);
            }
        }
        out.push(("final_norm".to_string(), self.final_norm.clone()));
        out.push(("head".to_string(), self.head.clone()));
        out
    }

    /// Trainable adapter partitions with their manifest names.
    pub fn trainable_tensors(&self) -> Vec<(String, Tensor<E>)> {
        self.all_tensors()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// SGD update of every adapter partition present in `grads`, then a
    /// fused-weight rebuild. Frozen tensors are untouched by construction.
    pub fn apply_sgd(&mut self, grads: &Gradients<E>, lr: E) -> Result<()> {
        self.update_trainable(&mut |_, t| {
            grads.get(t).map(|g| t.sub_scaled(g, lr).expect("same shape"))
        })
    }

    /// Visits every trainable partition by manifest name; when the callback
    /// returns a replacement tensor it is installed and the layer's fused
    /// weight cache rebuilt.
    pub fn update_trainable(
        &mut self,
        f: &mut dyn FnMut(&str, &Tensor<E>) -> Option<Tensor<E>>,
    ) -> Result<()> {
        for (i, block) in self.layers.iter_mut().enumerate() {
            let groups: [(&str, Proj, &mut FusedLinearLayer<E>); 7] = [
                ("attn", Proj::Query, &mut block.q),
                ("attn", Proj::Key, &mut block.k),
                ("attn", Proj::Value, &mut block.v),
                ("attn", Proj::Output, &mut block.o),
                ("ffn", Proj::Gate, &mut block.gate),
                ("ffn", Proj::Up, &mut block.up),
                ("ffn", Proj::Down, &mut block.down),
            ];
            for (group, proj, layer) in groups {
                let prefix = format!("layers.{i}.{group}.{}", proj_short(proj));
                let mut updates = Vec::new();
                for (part, t) in layer.trainable_tensors() {
                    if let Some(new) = f(&format!("{prefix}.{part}"), t) {
                        updates.push((part, new));
                    }
                }
                if updates.is_empty() {
                    continue;
                }
                for (part, t) in updates {
                    layer.set_partition(part, t)?;
                }
                layer.rebuild_fused();
            }
        }
        Ok(())
    }

    /// SHA-256 over every frozen tensor's name and little-endian payload, in
    /// manifest order. Training must never change this.
    pub fn frozen_hash(&self) -> [u8; 32] {
        let mut hasher = Sha256::new();
        for (name, t) in self.all_tensors() {
            if !t.requires_grad() {
                hasher.update(name.as_bytes());
                hasher.update(t.le_bytes());
            }
        }
        hasher.finalize().into()
    }
}

fn take_tensor<E: Element>(
    map: &mut BTreeMap<String, Tensor<E>>,
    name: String,
) -> Result<Tensor<E>> {
    map.remove(&name)
        .ok_or_else(|| Error::Checkpoint(format!("missing tensor {name:?}")))
}

fn build_layer<E: Element>(
    map: &mut BTreeMap<String, Tensor<E>>,
    spec: &crate::adapters::AdapterSpec,
    layer_idx: usize,
    group: &str,
    proj: Proj,
) -> Result<FusedLinearLayer<E>> {
    let kind = spec.layer_kind(proj);
    let prefix = format!("layers.{layer_idx}.{group}.{}", proj_short(proj));
    let w = take_tensor(map, format!("{prefix}.weight"))?;
    let a = kind
        .has_a()
        .then(|| take_tensor(map, format!("{prefix}.adapter_a")))
        .transpose()?;
    let b = kind
        .has_b()
        .then(|| take_tensor(map, format!("{prefix}.adapter_b")))
        .transpose()?;
    let c = (matches!(kind, crate::adapters::LayerKind::Ffbl { .. }) && spec.use_c)
        .then(|| take_tensor(map, format!("{prefix}.adapter_c")))
        .transpose()?;
    FusedLinearLayer::from_parts(proj, kind, w, a, b, c)
}

fn push_layer_tensors<E: Element>(
    out: &mut Vec<(String, Tensor<E>)>,
    layer_idx: usize,
    group: &str,
    proj: Proj,
    layer: &FusedLinearLayer<E>,
) {
    let prefix = format!("layers.{layer_idx}.{group}.{}", proj_short(proj));
    out.push((format!("{prefix}.weight"), layer.weight().clone()));
    if let Some(a) = layer.adapter_a() {
        out.push((format!("{prefix}.adapter_a"), a.clone()));
    }
    if let Some(b) = layer.adapter_b() {
        out.push((format!("{prefix}.adapter_b"), b.clone()));
    }
    if let Some(c) = layer.adapter_c() {
        out.push((format!("{prefix}.adapter_c"), c.clone()));
    }
}

fn proj_short(proj: Proj) -> &'static str {
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

fn split<E: Element>(out: LayerOut<E>) -> (Tensor<E>, Option<Tensor<E>>) {
    match out {
        LayerOut::Plain(t) => (t, None),
        LayerOut::Augmented { y, dy } => (y, Some(dy)),
    }
}

/// Additive causal mask: position `s` may attend to query column `l` iff
/// `s <= pos0 + l`.
fn causal_mask<E: Element>(s_total: usize, l: usize, pos0: usize) -> Tensor<E> {
    let neg_inf = E::from_f64(f64::NEG_INFINITY);
    Tensor::from_fn(s_total, l, |s, c| if s <= pos0 + c { E::ZERO } else { neg_inf })
}

/// Row index of the largest entry in a one-column tensor; ties break to the
/// lowest index.
pub fn argmax_col<E: Element>(logits: &Tensor<E>) -> u32 {
    debug_assert_eq!(logits.cols(), 1);
    let mut best = 0usize;
    for i in 1..logits.rows() {
        if logits.get(i, 0) > logits.get(best, 0) {
            best = i;
        }
    }
    best as u32
}

/// Structural sanity used by the verification suites: number of distinct
/// trainable backward adapters per layer.
pub fn backward_adapters_per_layer<E: Element>(model: &TransformerModel<E>) -> Vec<usize> {
    (0..model.cfg.n_layers)
        .map(|i| {
            model
                .all_tensors()
                .iter()
                .filter(|(name, _)| {
                    name.starts_with(&format!("layers.{i}.")) && name.ends_with("adapter_b")
                })
                .count()
        })
        .collect()
}

#[allow(unused)]
fn variant_of<E: Element>(model: &TransformerModel<E>) -> Variant {
    model.cfg.adapter.variant
}
