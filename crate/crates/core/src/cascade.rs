//! Policy vectors, transform modules and the level-by-level cascade.
//!
//! A policy `π = [π_s, …, π_d]` decides, per level, whether the level process
//! quantizes and transmits (`π_k = 1`, inter-node) or hands the unquantized
//! latent straight to the next transform module (`π_k = 0`, intra-node).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use log::debug;
use nalgebra::{DMatrix, DVector};

use crate::codec::{CodecFamily, Latent, Level};
use crate::entropy::{self, estimate_rate, fit_prob_model};
use crate::error::{Error, Result};
use crate::image_io::{patchify, ImagePlane};

/// Binary quantization placement over levels `s..=d`, stored source first.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PolicyVector {
    source: Level,
    dest: Level,
    bits: Vec<bool>,
}

impl PolicyVector {
    pub fn new(source: Level, dest: Level, bits: Vec<bool>) -> Result<Self> {
        if source < dest {
            return Err(Error::InvalidPolicy(format!("source {source} below destination {dest}")));
        }
        if bits.len() != usize::from(source - dest) + 1 {
            return Err(Error::InvalidPolicy(format!(
                "{} bits for levels {source}..{dest}",
                bits.len()
            )));
        }
        if !bits.last().copied().unwrap_or(false) {
            return Err(Error::InvalidPolicy("the destination level must quantize".into()));
        }
        Ok(Self { source, dest, bits })
    }

    /// Parses a bit string ordered source to destination, e.g. `"10001"`.
    pub fn parse(literal: &str, source: Level) -> Result<Self> {
        let bits = literal
            .chars()
            .map(|c| match c {
                '1' => Ok(true),
                '0' => Ok(false),
                _ => Err(Error::InvalidPolicy(format!("bad policy literal {literal:?}"))),
            })
            .collect::<Result<Vec<_>>>()?;
        if bits.is_empty() || bits.len() > usize::from(source) {
            return Err(Error::InvalidPolicy(format!(
                "policy literal {literal:?} does not fit below level {source}"
            )));
        }
        let dest = source + 1 - bits.len() as Level;
        Self::new(source, dest, bits)
    }

    /// `π_* = [0, …, 0, 1]`
    pub fn minimal(source: Level, dest: Level) -> Result<Self> {
        edge_policy(source, dest, 1)
    }

    /// `π^* = [1, …, 1]`
    pub fn maximal(source: Level, dest: Level) -> Result<Self> {
        let n = usize::from(source.saturating_sub(dest)) + 1;
        Self::new(source, dest, vec![true; n])
    }

    pub fn source(&self) -> Level {
        self.source
    }

    pub fn dest(&self) -> Level {
        self.dest
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    /// `π_k` for a level inside `d..=s`.
    pub fn bit(&self, level: Level) -> bool {
        assert!((self.dest..=self.source).contains(&level), "level {level} outside policy");
        self.bits[usize::from(self.source - level)]
    }

    pub fn n_q(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    /// Levels from source down to destination.
    pub fn levels(&self) -> impl Iterator<Item = Level> {
        (self.dest..=self.source).rev()
    }

    pub fn literal(&self) -> String {
        self.bits.iter().map(|&b| if b { '1' } else { '0' }).collect()
    }

    /// The policy restricted to levels `source..=dest` of a longer policy's prefix.
    pub fn is_edge(&self) -> bool {
        edge_policy(self.source, self.dest, self.n_q()).is_ok_and(|e| &e == self)
    }
}

impl fmt::Display for PolicyVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<&str> = self.bits.iter().map(|&b| if b { "1" } else { "0" }).collect();
        write!(f, "[{}]", parts.join(","))
    }
}

fn check_feasible(s: Level, d: Level, n_q: usize) -> Result<usize> {
    if s < d {
        return Err(Error::InvalidPolicy(format!("source {s} below destination {d}")));
    }
    let len = usize::from(s - d) + 1;
    if n_q == 0 || n_q > len {
        return Err(Error::InvalidPolicy(format!("n_q = {n_q} infeasible for {len} levels")));
    }
    Ok(len)
}

/// All policies in `Π(s, d; n_q)`, ordered by the position of their leading ones.
pub fn enumerate_policies(s: Level, d: Level, n_q: usize) -> Result<Vec<PolicyVector>> {
    let len = check_feasible(s, d, n_q)?;
    let free = len - 1;
    let mut out = Vec::new();
    let mut chosen = Vec::with_capacity(n_q - 1);
    fn recurse(start: usize, free: usize, need: usize, chosen: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if chosen.len() == need {
            out.push(chosen.clone());
            return;
        }
        for i in start..free {
            chosen.push(i);
            recurse(i + 1, free, need, chosen, out);
            chosen.pop();
        }
    }
    let mut combos = Vec::new();
    recurse(0, free, n_q - 1, &mut chosen, &mut combos);
    for combo in combos {
        let mut bits = vec![false; len];
        for i in combo {
            bits[i] = true;
        }
        bits[len - 1] = true;
        out.push(PolicyVector::new(s, d, bits)?);
    }
    Ok(out)
}

/// `π^edge = [1^(n_q-1), 0^(s-d+1-n_q), 1]`
pub fn edge_policy(s: Level, d: Level, n_q: usize) -> Result<PolicyVector> {
    let len = check_feasible(s, d, n_q)?;
    let bits = (0..len).map(|i| i < n_q - 1 || i == len - 1).collect();
    PolicyVector::new(s, d, bits)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ModuleKind {
    /// Trained on quantized (decoded) latents.
    Inter,
    /// Trained on unquantized latents.
    Intra,
}

impl ModuleKind {
    pub fn name(self) -> &'static str {
        match self {
            ModuleKind::Inter => "inter",
            ModuleKind::Intra => "intra",
        }
    }
}

/// Affine map `y -> W y + b` from level `k` latents to level `k - 1` latents.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformModule {
    pub kind: ModuleKind,
    pub from_level: Level,
    pub weight: DMatrix<f64>,
    pub bias: DVector<f64>,
}

impl TransformModule {
    pub fn new(kind: ModuleKind, from_level: Level, weight: DMatrix<f64>, bias: DVector<f64>) -> Result<Self> {
        if from_level == 0 {
            return Err(Error::InvalidFamily("module cannot start at level 0".into()));
        }
        if !weight.is_square() || weight.nrows() != bias.len() {
            return Err(Error::InvalidFamily(format!(
                "module {}x{} with bias {}",
                weight.nrows(),
                weight.ncols(),
                bias.len()
            )));
        }
        if !weight.iter().chain(bias.iter()).all(|v| v.is_finite()) {
            return Err(Error::Numeric(format!("module {} {from_level} has non-finite entries", kind.name())));
        }
        Ok(Self {
            kind,
            from_level,
            weight,
            bias,
        })
    }

    pub fn identity(kind: ModuleKind, from_level: Level, m: usize) -> Self {
        Self::new(kind, from_level, DMatrix::identity(m, m), DVector::zeros(m)).expect("identity module is valid")
    }

    pub fn to_level(&self) -> Level {
        self.from_level - 1
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn flops(&self, n: usize) -> u64 {
        let m = self.dim() as u64;
        (2 * m * m + m) * n as u64
    }

    fn apply_unchecked(&self, latent: &Latent) -> Result<Latent> {
        if latent.level != self.from_level {
            return Err(Error::LevelMismatch {
                expected: self.from_level,
                found: latent.level,
            });
        }
        if latent.dim() != self.dim() {
            return Err(Error::Geometry(format!(
                "latent width {} vs module width {}",
                latent.dim(),
                self.dim()
            )));
        }
        let mut data = &latent.data * self.weight.transpose();
        for mut row in data.row_iter_mut() {
            row += self.bias.transpose();
        }
        Ok(Latent {
            level: self.to_level(),
            step: None,
            data,
            geometry: latent.geometry,
        })
    }
}

/// Applies a module, enforcing that inter modules see quantized input and intra modules unquantized input.
pub fn apply_module(module: &TransformModule, latent: &Latent) -> Result<Latent> {
    match (module.kind, latent.is_quantized()) {
        (ModuleKind::Inter, false) => Err(Error::KindMismatch(format!(
            "inter module {} needs a quantized latent",
            module.from_level
        ))),
        (ModuleKind::Intra, true) => Err(Error::KindMismatch(format!(
            "intra module {} needs an unquantized latent",
            module.from_level
        ))),
        _ => module.apply_unchecked(latent),
    }
}

/// Applies a module regardless of its kind. Only the ablation variants use this.
pub fn apply_module_kind_override(module: &TransformModule, latent: &Latent) -> Result<Latent> {
    let matches = (module.kind == ModuleKind::Inter) == latent.is_quantized();
    if matches {
        return module.apply_unchecked(latent);
    }
    debug!(
        "kind override: {} module {}->{} applied to {} input",
        module.kind.name(),
        module.from_level,
        module.to_level(),
        if latent.is_quantized() { "quantized" } else { "unquantized" }
    );
    module.apply_unchecked(latent)
}

/// Inter and intra modules for every level pair of a family.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ModuleBank {
    modules: BTreeMap<(ModuleKind, Level), TransformModule>,
}

impl ModuleBank {
    pub fn new() -> Self {
        Self::default()
    }

    /// A bank of identity modules for levels `(min, max]`.
    pub fn identity(min: Level, max: Level, m: usize) -> Self {
        let mut bank = Self::new();
        for k in min + 1..=max {
            bank.insert(TransformModule::identity(ModuleKind::Inter, k, m));
            bank.insert(TransformModule::identity(ModuleKind::Intra, k, m));
        }
        bank
    }

    pub fn insert(&mut self, module: TransformModule) -> Option<TransformModule> {
        self.modules.insert((module.kind, module.from_level), module)
    }

    pub fn get(&self, kind: ModuleKind, from: Level) -> Result<&TransformModule> {
        self.modules.get(&(kind, from)).ok_or(Error::MissingModule {
            kind: kind.name(),
            from,
            to: from.saturating_sub(1),
        })
    }

    pub fn contains(&self, kind: ModuleKind, from: Level) -> bool {
        self.modules.contains_key(&(kind, from))
    }

    pub fn modules(&self) -> impl Iterator<Item = &TransformModule> {
        self.modules.values()
    }

    pub fn is_complete(&self, min: Level, max: Level) -> bool {
        (min + 1..=max).all(|k| self.contains(ModuleKind::Inter, k) && self.contains(ModuleKind::Intra, k))
    }
}

/// Which module a level process uses; the ablation variants swap weights across kinds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModuleSelection {
    #[default]
    Complete,
    /// Inter weights everywhere, including on unquantized input.
    InterOnly,
    /// Intra weights everywhere, including after quantization.
    IntraOnly,
}

impl ModuleSelection {
    pub fn name(self) -> &'static str {
        match self {
            ModuleSelection::Complete => "complete",
            ModuleSelection::InterOnly => "inter-only",
            ModuleSelection::IntraOnly => "intra-only",
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct CascadeOptions {
    /// Run real encode/decode at every quantization point instead of quantization only.
    pub coder_in_loop: bool,
    pub selection: ModuleSelection,
    /// Overrides the destination quantizer step (rate-control ladder).
    pub final_step: Option<f64>,
    /// Levels at which a side-branch snapshot is recorded.
    pub probe_levels: BTreeSet<Level>,
}

/// Side-branch measurement of the cascade state entering a level process.
#[derive(Debug, Clone)]
pub struct ProbeRecord {
    pub level: Level,
    /// Whether the main path quantizes at this level.
    pub quantization_point: bool,
    /// State before quantization (`ỹ^k`).
    pub unquantized: Latent,
    /// `Q^k(ỹ^k)` computed on the side branch (`ŷ^k`).
    pub quantized: Latent,
    /// `R(ŷ^k)` in bits from the fitted factorized model.
    pub rate_bits: f64,
    /// `g_s^k(ŷ^k)` assembled into an image.
    pub reconstruction: ImagePlane,
}

impl ProbeRecord {
    pub fn take(family: &CodecFamily, state: &Latent, step: f64, quantization_point: bool) -> Result<Self> {
        let k = state.level;
        let quantized = family.quantize_with_step(k, state, step)?;
        let model = fit_prob_model(&quantized)?;
        Ok(Self {
            level: k,
            quantization_point,
            unquantized: state.clone(),
            rate_bits: estimate_rate(&quantized, &model)?,
            reconstruction: family.reconstruct(k, &quantized)?,
            quantized,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CascadeOutput {
    /// Quantized latent at the destination level.
    pub latent: Latent,
    pub probes: Vec<ProbeRecord>,
    /// Number of quantize(-and-code) points executed, always `n_q(π)`.
    pub boundaries: usize,
}

/// Step used by `Q^k`, honouring the destination override.
pub fn level_step(family: &CodecFamily, k: Level, dest: Level, opts: &CascadeOptions) -> Result<f64> {
    match opts.final_step {
        Some(step) if k == dest => Ok(step),
        _ => family.step(k),
    }
}

/// One level process `T_k^{π_k}`. At the destination level only `Q^d` is applied.
pub fn level_process(
    family: &CodecFamily,
    bank: &ModuleBank,
    k: Level,
    quantize: bool,
    latent: &Latent,
    dest: Level,
    opts: &CascadeOptions,
) -> Result<Latent> {
    if latent.level != k {
        return Err(Error::LevelMismatch {
            expected: k,
            found: latent.level,
        });
    }
    if latent.is_quantized() {
        return Err(Error::Quantization(format!("level {k} process expects an unquantized latent")));
    }
    if k == dest && !quantize {
        return Err(Error::InvalidPolicy("the destination level must quantize".into()));
    }
    if quantize {
        let mut q = family.quantize_with_step(k, latent, level_step(family, k, dest, opts)?)?;
        if opts.coder_in_loop {
            let model = fit_prob_model(&q)?;
            q = entropy::decode(&entropy::encode(&q, &model, family.version())?, family)?;
        }
        if k == dest {
            return Ok(q);
        }
        apply_selected(bank, opts.selection, &q)
    } else {
        apply_selected(bank, opts.selection, latent)
    }
}

/// The module a level process applies to `latent`: inter after quantization,
/// intra otherwise, unless the selection swaps in the other kind's weights.
pub fn selected_module<'a>(bank: &'a ModuleBank, selection: ModuleSelection, latent: &Latent) -> Result<&'a TransformModule> {
    let natural = if latent.is_quantized() { ModuleKind::Inter } else { ModuleKind::Intra };
    let kind = match selection {
        ModuleSelection::Complete => natural,
        ModuleSelection::InterOnly => ModuleKind::Inter,
        ModuleSelection::IntraOnly => ModuleKind::Intra,
    };
    bank.get(kind, latent.level)
}

/// Applies [`selected_module`], overriding the kind check only when the selection demands it.
pub fn apply_selected(bank: &ModuleBank, selection: ModuleSelection, latent: &Latent) -> Result<Latent> {
    let module = selected_module(bank, selection, latent)?;
    if selection == ModuleSelection::Complete {
        apply_module(module, latent)
    } else {
        apply_module_kind_override(module, latent)
    }
}

/// `F^π_{s→k}`: folds level processes from the policy source down to (excluding) `k`.
pub fn transform_to_level(
    family: &CodecFamily,
    bank: &ModuleBank,
    policy: &PolicyVector,
    source_latent: &Latent,
    k: Level,
    opts: &CascadeOptions,
) -> Result<Latent> {
    let mut y = source_latent.clone();
    for level in (k + 1..=policy.source()).rev() {
        y = level_process(family, bank, level, policy.bit(level), &y, policy.dest(), opts)?;
    }
    Ok(y)
}

/// Executes `Q^d ∘ F^π_{s→d} ∘ g_a^s` on an image, recording probes on the way.
pub fn run_cascade(
    family: &CodecFamily,
    bank: &ModuleBank,
    policy: &PolicyVector,
    image: &ImagePlane,
    opts: &CascadeOptions,
) -> Result<CascadeOutput> {
    let patches = patchify(image, family.patch_size())?;
    let mut y = family.analysis(policy.source(), &patches)?;
    let mut probes = Vec::new();
    let mut boundaries = 0;
    for k in policy.levels() {
        let bit = policy.bit(k);
        if opts.probe_levels.contains(&k) {
            let step = level_step(family, k, policy.dest(), opts)?;
            probes.push(ProbeRecord::take(family, &y, step, bit)?);
        }
        boundaries += usize::from(bit);
        y = level_process(family, bank, k, bit, &y, policy.dest(), opts)?;
    }
    Ok(CascadeOutput {
        latent: y,
        probes,
        boundaries,
    })
}
