//! Fused linear layers and the per-variant adapter forward rules.
//!
//! A projection holds a frozen base weight `W` plus optional trainable
//! partitions: a forward adapter `A` (rank x d_in), a backward adapter `B`
//! (d_out x rank), and an optional bottleneck mixer `C` (rank x rank). The
//! layer kind selects how the partitions execute:
//!
//! - `LoraNaive`: `Z = WX + B(AX)` as four separate ops.
//! - `PfLora`: `[Y; dY] = [W; A] X` in one matmul, then `Z = Y + B dY`.
//! - `Ffa`: `[Y; dY] = [W; A] X` with `A` at doubled rank, then
//!   `Z = Y + tile(dY)` (repeat-and-add).
//! - `Ffl`: `[Y; dY] = [W; A] X`; `dY` is handed to the caller as the
//!   augmented output, optionally folded into `Y` by repeat-and-add.
//! - `Fbl`: `Z = [W B] [X; dX]` in one matmul over the augmented input.
//! - `Ffbl`: `[Y; dY] = [[W B],[A C]] [X; dX]`, shrinking `dY` into `Y`
//!   when the layer terminates the augmented path.

use std::collections::BTreeSet;
use std::fmt;

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::Tape;
use crate::tensor::{Element, Tensor};
use crate::trace::{Attribution, OpCategory};

/// Adapter family member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    None,
    Lora,
    PfLora,
    Ffa,
    FfbaAb,
    FfbaAorb,
    FfbaQgAdd,
    Fpa,
}

pub const ALL_VARIANTS: [Variant; 8] = [
    Variant::None,
    Variant::Lora,
    Variant::PfLora,
    Variant::Ffa,
    Variant::FfbaAb,
    Variant::FfbaAorb,
    Variant::FfbaQgAdd,
    Variant::Fpa,
];

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::None => "none",
            Variant::Lora => "lora",
            Variant::PfLora => "pf_lora",
            Variant::Ffa => "ffa",
            Variant::FfbaAb => "ffba_ab",
            Variant::FfbaAorb => "ffba_aorb",
            Variant::FfbaQgAdd => "ffba_qg_add",
            Variant::Fpa => "fpa",
        }
    }

    /// Variants that give every adapted projection its own independent A/B.
    pub fn per_projection(self) -> bool {
        matches!(self, Variant::Lora | Variant::PfLora | Variant::Ffa)
    }

    /// Variants wired as forward adapters feeding a shared backward adapter.
    pub fn ffba_family(self) -> bool {
        matches!(
            self,
            Variant::FfbaAb | Variant::FfbaAorb | Variant::FfbaQgAdd | Variant::Fpa
        )
    }

    pub fn has_forward_adapters(self) -> bool {
        self != Variant::None
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ALL_VARIANTS
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown variant {s:?}; expected one of {}",
                    ALL_VARIANTS.map(|v| v.name()).join(", ")
                ))
            })
    }
}

/// Projection slots of a transformer layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Proj {
    Query,
    Key,
    Value,
    Output,
    Gate,
    Up,
    Down,
}

pub const ALL_PROJS: [Proj; 7] = [
    Proj::Query,
    Proj::Key,
    Proj::Value,
    Proj::Output,
    Proj::Gate,
    Proj::Up,
    Proj::Down,
];

/// Projections allowed to fold their forward-adapter output back into
/// their own base output.
pub const ADDABLE_PROJS: [Proj; 5] = [Proj::Query, Proj::Key, Proj::Value, Proj::Gate, Proj::Up];

impl Proj {
    pub fn name(self) -> &'static str {
        match self {
            Proj::Query => "query",
            Proj::Key => "key",
            Proj::Value => "value",
            Proj::Output => "output",
            Proj::Gate => "gate",
            Proj::Up => "up",
            Proj::Down => "down",
        }
    }
}

impl fmt::Display for Proj {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Nonlinearity applied to the summed augmented input before a backward
/// adapter consumes it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Nonlinearity {
    #[default]
    Identity,
    Relu,
}

/// Fully determines the adapter wiring of a model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdapterSpec {
    pub variant: Variant,
    pub rank: usize,
    #[serde(default)]
    pub nonlinearity: Nonlinearity,
    /// Projections whose forward-adapter output is repeat-added into their
    /// own base output.
    #[serde(default)]
    pub add_set: BTreeSet<Proj>,
    /// Adds the rank x rank `C` partition to forward-backward layers.
    /// Off by default: none of the evaluated variants use it.
    #[serde(default)]
    pub use_c: bool,
}

impl AdapterSpec {
    pub fn none() -> Self {
        AdapterSpec {
            variant: Variant::None,
            rank: 0,
            nonlinearity: Nonlinearity::Identity,
            add_set: BTreeSet::new(),
            use_c: false,
        }
    }

    /// Spec for a variant at rank `r` with that variant's default add-set.
    pub fn new(variant: Variant, rank: usize) -> Self {
        let add_set = match variant {
            Variant::FfbaQgAdd => BTreeSet::from([Proj::Query, Proj::Gate]),
            _ => BTreeSet::new(),
        };
        AdapterSpec { variant, rank, nonlinearity: Nonlinearity::Identity, add_set, use_c: false }
    }

    pub fn with_nonlinearity(mut self, nl: Nonlinearity) -> Self {
        self.nonlinearity = nl;
        self
    }

    /// Row count of the forward adapter `A`: doubled for FFA, where the
    /// saved backward-adapter budget is spent on extra rank.
    pub fn forward_rank(&self) -> usize {
        match self.variant {
            Variant::Ffa => 2 * self.rank,
            _ => self.rank,
        }
    }

    /// Execution shape of a projection under this spec.
    ///
    /// lora/pf_lora/ffa give every projection its own independent adapter.
    /// The ffba family puts forward adapters on q/k/v/gate/up and routes
    /// their summed augmented outputs into the output and down projections,
    /// which carry the shared backward adapter: a full forward-backward
    /// layer (with shrink) for the A&B variant, a pure backward layer for
    /// AorB, QG-Add, and the fused parallel adapter.
    pub fn layer_kind(&self, proj: Proj) -> LayerKind {
        match self.variant {
            Variant::None => LayerKind::Plain,
            Variant::Lora => LayerKind::LoraNaive,
            Variant::PfLora => LayerKind::PfLora,
            Variant::Ffa => LayerKind::Ffa,
            Variant::FfbaAb => match proj {
                Proj::Output | Proj::Down => LayerKind::Ffbl { shrink: true },
                _ => LayerKind::Ffl { self_add: self.add_set.contains(&proj) },
            },
            Variant::FfbaAorb | Variant::FfbaQgAdd | Variant::Fpa => match proj {
                Proj::Output | Proj::Down => LayerKind::Fbl,
                _ => LayerKind::Ffl { self_add: self.add_set.contains(&proj) },
            },
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant == Variant::None {
            if !self.add_set.is_empty() {
                return Err(Error::Config("add_set requires an adapter variant".into()));
            }
            return Ok(());
        }
        if self.rank == 0 {
            return Err(Error::Config(format!(
                "variant {} requires rank >= 1",
                self.variant
            )));
        }
        for p in &self.add_set {
            if !ADDABLE_PROJS.contains(p) {
                return Err(Error::Config(format!(
                    "add_set may only contain query/key/value/gate/up, got {p}"
                )));
            }
        }
        if !self.add_set.is_empty() {
            if !self.variant.has_forward_adapters() {
                return Err(Error::Config(
                    "nonempty add_set requires a variant with forward adapters".into(),
                ));
            }
            if self.variant == Variant::Fpa {
                return Err(Error::Config(
                    "fpa removes repeat-and-add everywhere; add_set must be empty".into(),
                ));
            }
            if self.variant.per_projection() {
                return Err(Error::Config(format!(
                    "add_set only applies to fused forward layers, not {}",
                    self.variant
                )));
            }
        }
        if self.use_c && self.variant != Variant::FfbaAb {
            return Err(Error::Config(
                "use_c requires forward-backward layers (variant ffba_ab)".into(),
            ));
        }
        Ok(())
    }
}

/// Execution shape of one projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerKind {
    Plain,
    LoraNaive,
    PfLora,
    Ffa,
    Ffl { self_add: bool },
    Fbl,
    Ffbl { shrink: bool },
}

/// Structural role used by weight assembly.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Plain,
    /// Forward adapter stacked under the base weight: `[W; A]`.
    Ffl,
    /// Backward adapter beside the base weight: `[W B]`.
    Fbl,
    /// Full block matrix `[[W B],[A C]]`.
    Ffbl,
}

impl LayerKind {
    /// How the layer's partitions assemble into a single fused weight.
    pub fn role(self) -> Role {
        match self {
            LayerKind::Plain | LayerKind::LoraNaive => Role::Plain,
            LayerKind::PfLora | LayerKind::Ffa | LayerKind::Ffl { .. } => Role::Ffl,
            LayerKind::Fbl => Role::Fbl,
            LayerKind::Ffbl { .. } => Role::Ffbl,
        }
    }

    pub fn has_a(self) -> bool {
        matches!(
            self,
            LayerKind::LoraNaive
                | LayerKind::PfLora
                | LayerKind::Ffa
                | LayerKind::Ffl { .. }
                | LayerKind::Ffbl { .. }
        )
    }

    pub fn has_b(self) -> bool {
        matches!(
            self,
            LayerKind::LoraNaive | LayerKind::PfLora | LayerKind::Fbl | LayerKind::Ffbl { .. }
        )
    }

    /// Whether the forward adapter's output reaches the base output without
    /// passing through a backward adapter. Such an `A` must start at zero
    /// for the adapted model to begin exactly at the base model.
    pub fn a_feeds_base_directly(self) -> bool {
        matches!(
            self,
            LayerKind::Ffa | LayerKind::Ffl { self_add: true } | LayerKind::Ffbl { shrink: true }
        )
    }

    pub fn takes_augmented_input(self) -> bool {
        matches!(self, LayerKind::Fbl | LayerKind::Ffbl { .. })
    }
}

/// How a forward executes: against pre-assembled fused weights (deployment,
/// counted in the op ledger), against weights assembled on the tape
/// (training, differentiable through `A`/`B`/`C`), or as explicitly
/// unfused separate products (reference route for the equivalence suites).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExecPath {
    Fused,
    Train,
    Unfused,
}

/// Output of a layer forward.
pub enum LayerOut<E: Element> {
    Plain(Tensor<E>),
    /// Base output plus the rank-sized augmented output.
    Augmented { y: Tensor<E>, dy: Tensor<E> },
}

impl<E: Element> LayerOut<E> {
    pub fn plain(self) -> Tensor<E> {
        match self {
            LayerOut::Plain(t) => t,
            LayerOut::Augmented { .. } => panic!("expected plain layer output"),
        }
    }

    pub fn augmented(self) -> (Tensor<E>, Tensor<E>) {
        match self {
            LayerOut::Augmented { y, dy } => (y, dy),
            LayerOut::Plain(_) => panic!("expected augmented layer output"),
        }
    }
}

/// A projection with a frozen base weight and trainable adapter partitions.
pub struct FusedLinearLayer<E: Element> {
    proj: Proj,
    kind: LayerKind,
    w: Tensor<E>,
    a: Option<Tensor<E>>,
    b: Option<Tensor<E>>,
    c: Option<Tensor<E>>,
    /// Pre-assembled fused weight for the deployment path.
    fused: Option<Tensor<E>>,
}

impl<E: Element> FusedLinearLayer<E> {
    pub fn plain(proj: Proj, w: Tensor<E>) -> Self {
        let mut layer =
            FusedLinearLayer { proj, kind: LayerKind::Plain, w, a: None, b: None, c: None, fused: None };
        layer.rebuild_fused();
        layer
    }

    /// LoRA-structured layer (own `A` and `B`), naive or partially fused
    /// execution. `A` is drawn uniform scaled by `1/sqrt(d_in)`; `B` starts
    /// at zero so the adapted model equals the base model.
    pub fn lora(proj: Proj, w: Tensor<E>, rank: usize, naive: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d_o, d_i) = w.shape();
        check_rank(rank, d_i, d_o)?;
        let a = init_forward(rank, d_i, rng);
        let b = Tensor::zeros(d_o, rank).trainable();
        let kind = if naive { LayerKind::LoraNaive } else { LayerKind::PfLora };
        let mut layer =
            FusedLinearLayer { proj, kind, w, a: Some(a), b: Some(b), c: None, fused: None };
        layer.rebuild_fused();
        Ok(layer)
    }

    /// Fused forward adapter: no `B`, forward rank doubled to `2r`, output
    /// recombined by repeat-and-add. `A` starts at zero (there is no zero
    /// backward adapter to hide behind).
    pub fn ffa(proj: Proj, w: Tensor<E>, rank: usize) -> Result<Self> {
        let (d_o, d_i) = w.shape();
        let rank2 = 2 * rank;
        check_rank(rank, d_i, d_o)?;
        if d_o % rank2 != 0 {
            return Err(Error::Precondition(format!(
                "ffa on {}: output dim {d_o} not divisible by 2r = {rank2}",
                proj
            )));
        }
        let a = Tensor::zeros(rank2, d_i).trainable();
        let mut layer =
            FusedLinearLayer { proj, kind: LayerKind::Ffa, w, a: Some(a), b: None, c: None, fused: None };
        layer.rebuild_fused();
        Ok(layer)
    }

    /// Fused forward layer: `A` only, augmented output handed to the block.
    pub fn ffl(proj: Proj, w: Tensor<E>, rank: usize, self_add: bool, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (d_o, d_i) = w.shape();
        check_rank(rank, d_i, d_o)?;
        if self_add && d_o % rank != 0 {
            return Err(Error::Precondition(format!(
                "ffl on {proj}: output dim {d_o} not divisible by rank {rank} required by repeat-and-add"
            )));
        }
        let a = init_forward(rank, d_i, rng);
        let mut layer = FusedLinearLayer {
            proj,
            kind: LayerKind::Ffl { self_add },
            w,
            a: Some(a),
            b: None,
            c: None,
            fused: None,
        };
        layer.rebuild_fused();
        Ok(layer)
    }

    /// Fused backward layer: `B` only, consuming the augmented input.
    pub fn fbl(proj: Proj, w: Tensor<E>, rank: usize) -> Result<Self> {
        let (d_o, d_i) = w.shape();
        check_rank(rank, d_i, d_o)?;
        let b = Tensor::zeros(d_o, rank).trainable();
        let mut layer =
            FusedLinearLayer { proj, kind: LayerKind::Fbl, w, a: None, b: Some(b), c: None, fused: None };
        layer.rebuild_fused();
        Ok(layer)
    }

    /// Fused forward-backward layer: both partitions, optional `C`.
    pub fn ffbl(
        proj: Proj,
        w: Tensor<E>,
        rank: usize,
        shrink: bool,
        with_c: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let (d_o, d_i) = w.shape();
        check_rank(rank, d_i, d_o)?;
        if shrink && d_o % rank != 0 {
            return Err(Error::Precondition(format!(
                "ffbl on {proj}: output dim {d_o} not divisible by rank {rank} required by shrink"
            )));
        }
        let a = init_forward(rank, d_i, rng);
        let b = Tensor::zeros(d_o, rank).trainable();
        let c = with_c.then(|| Tensor::zeros(rank, rank).trainable());
        let mut layer = FusedLinearLayer {
            proj,
            kind: LayerKind::Ffbl { shrink },
            w,
            a: Some(a),
            b: Some(b),
            c,
            fused: None,
        };
        layer.rebuild_fused();
        Ok(layer)
    }

    /// Builds a layer from explicit partitions, validating presence, shape
    /// consistency, and tile divisibility for the kind. Adapter partitions
    /// are marked trainable.
    pub fn from_parts(
        proj: Proj,
        kind: LayerKind,
        w: Tensor<E>,
        a: Option<Tensor<E>>,
        b: Option<Tensor<E>>,
        c: Option<Tensor<E>>,
    ) -> Result<Self> {
        let (d_o, d_i) = w.shape();
        let (need_a, need_b, allow_c) = match kind {
            LayerKind::Plain => (false, false, false),
            LayerKind::LoraNaive | LayerKind::PfLora => (true, true, false),
            LayerKind::Ffa | LayerKind::Ffl { .. } => (true, false, false),
            LayerKind::Fbl => (false, true, false),
            LayerKind::Ffbl { .. } => (true, true, true),
        };
        let part_err = |msg: String| Err(Error::Config(format!("layer {proj} ({kind:?}): {msg}")));
        if need_a != a.is_some() {
            return part_err(format!("A {}", if need_a { "missing" } else { "not allowed" }));
        }
        if need_b != b.is_some() {
            return part_err(format!("B {}", if need_b { "missing" } else { "not allowed" }));
        }
        if c.is_some() && !allow_c {
            return part_err("C not allowed".into());
        }
        if let Some(a) = &a {
            if a.cols() != d_i {
                return part_err(format!("A has {} cols, expected {d_i}", a.cols()));
            }
        }
        if let Some(b) = &b {
            if b.rows() != d_o {
                return part_err(format!("B has {} rows, expected {d_o}", b.rows()));
            }
        }
        if let (Some(a), Some(b)) = (&a, &b) {
            if a.rows() != b.cols() {
                return part_err(format!("rank mismatch: A {} rows vs B {} cols", a.rows(), b.cols()));
            }
        }
        if let Some(c) = &c {
            let r = a.as_ref().expect("A required with C").rows();
            if c.shape() != (r, r) {
                return part_err(format!("C must be {r}x{r}, got {}", c.shape_str()));
            }
        }
        let tiles = match kind {
            LayerKind::Ffa => Some(a.as_ref().expect("A present").rows()),
            LayerKind::Ffl { self_add: true } | LayerKind::Ffbl { shrink: true } => {
                Some(a.as_ref().expect("A present").rows())
            }
            _ => None,
        };
        if let Some(q) = tiles {
            if d_o % q != 0 {
                return Err(Error::Precondition(format!(
                    "layer {proj}: output dim {d_o} not divisible by {q} required by repeat-and-add"
                )));
            }
        }
        let mut layer = FusedLinearLayer {
            proj,
            kind,
            w,
            a: a.map(Tensor::trainable),
            b: b.map(Tensor::trainable),
            c: c.map(Tensor::trainable),
            fused: None,
        };
        layer.rebuild_fused();
        Ok(layer)
    }

    pub fn proj(&self) -> Proj {
        self.proj
    }

    pub fn kind(&self) -> LayerKind {
        self.kind
    }

    pub fn weight(&self) -> &Tensor<E> {
        &self.w
    }

    pub fn adapter_a(&self) -> Option<&Tensor<E>> {
        self.a.as_ref()
    }

    pub fn adapter_b(&self) -> Option<&Tensor<E>> {
        self.b.as_ref()
    }

    pub fn adapter_c(&self) -> Option<&Tensor<E>> {
        self.c.as_ref()
    }

    pub fn d_out(&self) -> usize {
        self.w.rows()
    }

    pub fn d_in(&self) -> usize {
        self.w.cols()
    }

    /// Rank of the stored forward/backward partitions (2r for FFA).
    pub fn stored_rank(&self) -> usize {
        self.a
            .as_ref()
            .map(|a| a.rows())
            .or_else(|| self.b.as_ref().map(|b| b.cols()))
            .unwrap_or(0)
    }

    pub fn trainable_tensors(&self) -> Vec<(&'static str, &Tensor<E>)> {
        let mut out = Vec::new();
        if let Some(a) = &self.a {
            out.push(("adapter_a", a));
        }
        if let Some(b) = &self.b {
            out.push(("adapter_b", b));
        }
        if let Some(c) = &self.c {
            out.push(("adapter_c", c));
        }
        out
    }

    /// Replaces a partition after an optimizer step or checkpoint load.
    /// The fused cache must be rebuilt afterwards.
    pub fn set_partition(&mut self, name: &str, t: Tensor<E>) -> Result<()> {
        let slot = match name {
            "weight" => Some(&mut self.w),
            "adapter_a" => self.a.as_mut(),
            "adapter_b" => self.b.as_mut(),
            "adapter_c" => self.c.as_mut(),
            _ => None,
        };
        let Some(slot) = slot else {
            return Err(Error::Config(format!(
                "layer {} has no partition named {name:?}",
                self.proj
            )));
        };
        if slot.shape() != t.shape() {
            return Err(Error::shape("set_partition", slot.shape_str(), t.shape_str()));
        }
        let preserve = slot.requires_grad();
        *slot = if preserve { t.trainable() } else { t };
        Ok(())
    }

    /// Rebuilds the cached fused weight from the current partitions.
    pub fn rebuild_fused(&mut self) {
        self.fused = match self.kind.role() {
            Role::Plain => None,
            _ => Some(assemble_fused_weight(self).expect("partitions present per kind")),
        };
    }

    fn fused_weight(&self) -> &Tensor<E> {
        self.fused.as_ref().expect("fused cache built at construction")
    }

    /// Stacked `[W; A]` acquired per execution path: the cached constant for
    /// deployment, or an on-tape concat so training differentiates into `A`.
    fn stacked_forward(&self, tape: &mut Tape<E>, path: ExecPath) -> Result<Tensor<E>> {
        match path {
            ExecPath::Train => tape.concat_rows(&[&self.w, self.a.as_ref().expect("A present")]),
            _ => Ok(self.fused_weight().clone()),
        }
    }

    /// `[W B]` for the augmented input, per execution path.
    fn stacked_backward(&self, tape: &mut Tape<E>, path: ExecPath) -> Result<Tensor<E>> {
        match path {
            ExecPath::Train => tape.concat_cols(&[&self.w, self.b.as_ref().expect("B present")]),
            _ => Ok(self.fused_weight().clone()),
        }
    }

    /// Full `[[W B],[A C]]` block, per execution path.
    fn stacked_block(&self, tape: &mut Tape<E>, path: ExecPath) -> Result<Tensor<E>> {
        match path {
            ExecPath::Train => {
                let a = self.a.as_ref().expect("A present");
                let b = self.b.as_ref().expect("B present");
                let r = a.rows();
                let czeros;
                let c = match &self.c {
                    Some(c) => c,
                    None => {
                        czeros = Tensor::zeros(r, r);
                        &czeros
                    }
                };
                let top = tape.concat_cols(&[&self.w, b])?;
                let bottom = tape.concat_cols(&[a, c])?;
                tape.concat_rows(&[&top, &bottom])
            }
            _ => Ok(self.fused_weight().clone()),
        }
    }

    /// Forward pass. `dx` is the augmented input, required by `Fbl`/`Ffbl`
    /// and rejected elsewhere. Op-ledger counts are recorded only on the
    /// fused (deployment) path.
    pub fn forward(
        &self,
        tape: &mut Tape<E>,
        x: &Tensor<E>,
        dx: Option<&Tensor<E>>,
        path: ExecPath,
    ) -> Result<LayerOut<E>> {
        if x.rows() != self.d_in() {
            return Err(Error::shape("layer forward", format!("{} inputs", self.d_in()), x.shape_str()));
        }
        let needs_dx = matches!(self.kind, LayerKind::Fbl | LayerKind::Ffbl { .. });
        if needs_dx != dx.is_some() {
            return Err(Error::Config(format!(
                "layer {} ({:?}) {} an augmented input",
                self.proj,
                self.kind,
                if needs_dx { "requires" } else { "does not accept" }
            )));
        }
        if let Some(dx) = dx {
            let r = self.b.as_ref().expect("B present").cols();
            if dx.rows() != r || dx.cols() != x.cols() {
                return Err(Error::shape(
                    "augmented input",
                    format!("{r}x{}", x.cols()),
                    dx.shape_str(),
                ));
            }
        }
        let count = path == ExecPath::Fused;
        let site = self.proj.name();
        match self.kind {
            LayerKind::Plain => {
                if count {
                    tape.note(OpCategory::PlainMatmul, Attribution::Base, Some(site));
                }
                Ok(LayerOut::Plain(tape.matmul(&self.w, x)?))
            }
            LayerKind::LoraNaive => {
                let a = self.a.as_ref().expect("A present");
                let b = self.b.as_ref().expect("B present");
                if path == ExecPath::Fused {
                    tape.note(OpCategory::PlainMatmul, Attribution::Base, Some(site));
                    tape.note(OpCategory::SmallMatmul, Attribution::Adapter, Some(site));
                    tape.note(OpCategory::SmallMatmul, Attribution::Adapter, Some(site));
                    tape.note(OpCategory::Add, Attribution::Adapter, Some(site));
                }
                let y = tape.matmul(&self.w, x)?;
                let t = tape.matmul(a, x)?;
                let u = tape.matmul(b, &t)?;
                Ok(LayerOut::Plain(tape.add(&y, &u)?))
            }
            LayerKind::PfLora => {
                let b = self.b.as_ref().expect("B present");
                if path == ExecPath::Unfused {
                    // reference route: four separate ops, as in the naive form
                    let a = self.a.as_ref().expect("A present");
                    let y = tape.matmul(&self.w, x)?;
                    let t = tape.matmul(a, x)?;
                    let u = tape.matmul(b, &t)?;
                    return Ok(LayerOut::Plain(tape.add(&y, &u)?));
                }
                if count {
                    tape.note(OpCategory::FusedMatmul, Attribution::Base, Some(site));
                    tape.note(OpCategory::SmallMatmul, Attribution::Adapter, Some(site));
                    tape.note(OpCategory::Add, Attribution::Adapter, Some(site));
                }
                let stacked = self.stacked_forward(tape, path)?;
                let s = tape.matmul(&stacked, x)?;
                let y = tape.slice_rows(&s, 0, self.d_out())?;
                let dy = tape.slice_rows(&s, self.d_out(), s.rows())?;
                let u = tape.matmul(b, &dy)?;
                Ok(LayerOut::Plain(tape.add(&y, &u)?))
            }
            LayerKind::Ffa => {
                if path == ExecPath::Unfused {
                    let a = self.a.as_ref().expect("A present");
                    let y = tape.matmul(&self.w, x)?;
                    let dy = tape.matmul(a, x)?;
                    // explicit tile, then one whole-width add
                    let f = self.d_out() / dy.rows();
                    let tiles: Vec<&Tensor<E>> = std::iter::repeat(&dy).take(f).collect();
                    let tiled = tape.concat_rows(&tiles)?;
                    return Ok(LayerOut::Plain(tape.add(&y, &tiled)?));
                }
                if count {
                    tape.note(OpCategory::FusedMatmul, Attribution::Base, Some(site));
                    tape.note(OpCategory::RepeatAdd, Attribution::Adapter, Some(site));
                }
                let stacked = self.stacked_forward(tape, path)?;
                let s = tape.matmul(&stacked, x)?;
                let y = tape.slice_rows(&s, 0, self.d_out())?;
                let dy = tape.slice_rows(&s, self.d_out(), s.rows())?;
                Ok(LayerOut::Plain(tape.repeat_add(&y, &dy)?))
            }
            LayerKind::Ffl { self_add } => {
                let (y, dy) = if path == ExecPath::Unfused {
                    let a = self.a.as_ref().expect("A present");
                    let y = tape.matmul(&self.w, x)?;
                    let dy = tape.matmul(a, x)?;
                    (y, dy)
                } else {
                    if count {
                        tape.note(OpCategory::FusedMatmul, Attribution::Base, Some(site));
                    }
                    let stacked = self.stacked_forward(tape, path)?;
                    let s = tape.matmul(&stacked, x)?;
                    let y = tape.slice_rows(&s, 0, self.d_out())?;
                    let dy = tape.slice_rows(&s, self.d_out(), s.rows())?;
                    (y, dy)
                };
                let y = if self_add {
                    if count {
                        tape.note(OpCategory::RepeatAdd, Attribution::Adapter, Some(site));
                    }
                    tape.repeat_add(&y, &dy)?
                } else {
                    y
                };
                Ok(LayerOut::Augmented { y, dy })
            }
            LayerKind::Fbl => {
                let dx = dx.expect("checked above");
                if path == ExecPath::Unfused {
                    let b = self.b.as_ref().expect("B present");
                    let y = tape.matmul(&self.w, x)?;
                    let u = tape.matmul(b, dx)?;
                    return Ok(LayerOut::Plain(tape.add(&y, &u)?));
                }
                if count {
                    tape.note(OpCategory::Concat, Attribution::Adapter, Some(site));
                    tape.note(OpCategory::FusedMatmul, Attribution::Base, Some(site));
                }
                let stacked = self.stacked_backward(tape, path)?;
                let xa = tape.concat_rows(&[x, dx])?;
                Ok(LayerOut::Plain(tape.matmul(&stacked, &xa)?))
            }
            LayerKind::Ffbl { shrink } => {
                let dx = dx.expect("checked above");
                let (y, dy) = if path == ExecPath::Unfused {
                    let a = self.a.as_ref().expect("A present");
                    let b = self.b.as_ref().expect("B present");
                    let wx = tape.matmul(&self.w, x)?;
                    let bdx = tape.matmul(b, dx)?;
                    let y = tape.add(&wx, &bdx)?;
                    let ax = tape.matmul(a, x)?;
                    let dy = match &self.c {
                        Some(c) => {
                            let cdx = tape.matmul(c, dx)?;
                            tape.add(&ax, &cdx)?
                        }
                        None => ax,
                    };
                    (y, dy)
                } else {
                    if count {
                        tape.note(OpCategory::Concat, Attribution::Adapter, Some(site));
                        tape.note(OpCategory::FusedMatmul, Attribution::Base, Some(site));
                    }
                    let stacked = self.stacked_block(tape, path)?;
                    let xa = tape.concat_rows(&[x, dx])?;
                    let s = tape.matmul(&stacked, &xa)?;
                    let y = tape.slice_rows(&s, 0, self.d_out())?;
                    let dy = tape.slice_rows(&s, self.d_out(), s.rows())?;
                    (y, dy)
                };
                let y = if shrink {
                    if count {
                        tape.note(OpCategory::RepeatAdd, Attribution::Adapter, Some(site));
                    }
                    tape.repeat_add(&y, &dy)?
                } else {
                    y
                };
                Ok(LayerOut::Augmented { y, dy })
            }
        }
    }
}

fn check_rank(rank: usize, d_i: usize, d_o: usize) -> Result<()> {
    if rank == 0 {
        return Err(Error::Config("adapter rank must be >= 1".into()));
    }
    if rank >= d_i.min(d_o) {
        return Err(Error::Config(format!(
            "adapter rank {rank} is not low-rank for a {d_o}x{d_i} projection"
        )));
    }
    Ok(())
}

/// Forward adapters start at zero-mean uniform scaled by `1/sqrt(d_in)`.
fn init_forward<E: Element>(rank: usize, d_i: usize, rng: &mut ChaCha8Rng) -> Tensor<E> {
    let bound = 1.0 / (d_i as f64).sqrt();
    Tensor::from_fn(rank, d_i, |_, _| E::from_f64(rng.random_range(-bound..bound))).trainable()
}

/// Partitions recovered from a fused weight.
pub struct Partitions<E: Element> {
    pub w: Tensor<E>,
    pub a: Option<Tensor<E>>,
    pub b: Option<Tensor<E>>,
    pub c: Option<Tensor<E>>,
}

/// Assembles the layer's partitions into the single fused weight its
/// deployment matmul uses. Plain (and naive-LoRA) layers assemble to `W`.
pub fn assemble_fused_weight<E: Element>(layer: &FusedLinearLayer<E>) -> Result<Tensor<E>> {
    let w = &layer.w;
    match layer.kind.role() {
        Role::Plain => Ok(w.clone()),
        Role::Ffl => {
            let a = layer.a.as_ref().ok_or_else(|| missing(layer, "A"))?;
            let mut data = Vec::with_capacity((w.rows() + a.rows()) * w.cols());
            data.extend_from_slice(w.data());
            data.extend_from_slice(a.data());
            Tensor::from_vec(w.rows() + a.rows(), w.cols(), data)
        }
        Role::Fbl => {
            let b = layer.b.as_ref().ok_or_else(|| missing(layer, "B"))?;
            Ok(hstack(w, b))
        }
        Role::Ffbl => {
            let a = layer.a.as_ref().ok_or_else(|| missing(layer, "A"))?;
            let b = layer.b.as_ref().ok_or_else(|| missing(layer, "B"))?;
            let r = a.rows();
            let czeros;
            let c = match &layer.c {
                Some(c) => c,
                None => {
                    czeros = Tensor::zeros(r, r);
                    &czeros
                }
            };
            let top = hstack(w, b);
            let bottom = hstack(a, c);
            let mut data = Vec::with_capacity((top.rows() + bottom.rows()) * top.cols());
            data.extend_from_slice(top.data());
            data.extend_from_slice(bottom.data());
            Tensor::from_vec(top.rows() + bottom.rows(), top.cols(), data)
        }
    }
}

/// Splits a fused weight back into partitions, given the base dims and the
/// stored rank. Exact inverse of [`assemble_fused_weight`].
pub fn disassemble_fused_weight<E: Element>(
    fused: &Tensor<E>,
    role: Role,
    d_o: usize,
    d_i: usize,
    rank: usize,
) -> Result<Partitions<E>> {
    let expect = match role {
        Role::Plain => (d_o, d_i),
        Role::Ffl => (d_o + rank, d_i),
        Role::Fbl => (d_o, d_i + rank),
        Role::Ffbl => (d_o + rank, d_i + rank),
    };
    if fused.shape() != expect {
        return Err(Error::shape(
            "disassemble_fused_weight",
            format!("{}x{}", expect.0, expect.1),
            fused.shape_str(),
        ));
    }
    let block = |r0: usize, r1: usize, c0: usize, c1: usize| -> Tensor<E> {
        Tensor::from_fn(r1 - r0, c1 - c0, |i, j| fused.get(r0 + i, c0 + j))
    };
    Ok(match role {
        Role::Plain => Partitions { w: fused.clone(), a: None, b: None, c: None },
        Role::Ffl => Partitions {
            w: block(0, d_o, 0, d_i),
            a: Some(block(d_o, d_o + rank, 0, d_i)),
            b: None,
            c: None,
        },
        Role::Fbl => Partitions {
            w: block(0, d_o, 0, d_i),
            a: None,
            b: Some(block(0, d_o, d_i, d_i + rank)),
            c: None,
        },
        Role::Ffbl => Partitions {
            w: block(0, d_o, 0, d_i),
            a: Some(block(d_o, d_o + rank, 0, d_i)),
            b: Some(block(0, d_o, d_i, d_i + rank)),
            c: Some(block(d_o, d_o + rank, d_i, d_i + rank)),
        },
    })
}

fn hstack<E: Element>(left: &Tensor<E>, right: &Tensor<E>) -> Tensor<E> {
    debug_assert_eq!(left.rows(), right.rows());
    let rows = left.rows();
    let (lc, rc) = (left.cols(), right.cols());
    let mut data = Vec::with_capacity(rows * (lc + rc));
    for i in 0..rows {
        data.extend_from_slice(&left.data()[i * lc..(i + 1) * lc]);
        data.extend_from_slice(&right.data()[i * rc..(i + 1) * rc]);
    }
    Tensor::from_vec(rows, lc + rc, data).expect("positive dims")
}

fn missing<E: Element>(layer: &FusedLinearLayer<E>, part: &str) -> Error {
    Error::Config(format!("layer {} ({:?}) is missing partition {part}", layer.proj, layer.kind))
}
