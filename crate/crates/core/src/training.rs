//! Closed-form training of transform modules and synthesis refits.
//!
//! Phase one fits an intra and an inter module for every level pair, top level
//! first, each against the next level's analysis output. Phase two refits each
//! level's synthesis on the quantized latents the frozen cascade produces.

use log::{debug, info};
use nalgebra::{Cholesky, DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cascade::{edge_policy, transform_to_level, CascadeOptions, ModuleBank, ModuleKind, PolicyVector, TransformModule};
use crate::codec::{CodecFamily, Latent, Level, LevelModel};
use crate::error::{Error, Result};
use crate::image_io::{patchify, ImagePlane, PatchGeometry, PatchMatrix};

/// Minimum ratio of patch rows to latent width.
pub const MIN_ROWS_PER_DIM: usize = 10;

/// Patch rows pooled from a set of images, shuffled deterministically.
#[derive(Debug, Clone)]
pub struct TrainingCorpus {
    patches: PatchMatrix,
    image_ids: Vec<String>,
    seed: u64,
}

fn pooled_geometry(n: usize, patch_size: usize) -> PatchGeometry {
    PatchGeometry {
        width: patch_size * n,
        height: patch_size,
        channels: 1,
        patch_size,
    }
}

impl TrainingCorpus {
    /// Pools the patches of `images`, shuffles them with `seed` and keeps at most `max_patches`.
    pub fn from_images(images: &[(String, ImagePlane)], patch_size: usize, seed: u64, max_patches: Option<usize>) -> Result<Self> {
        let dim = patch_size * patch_size;
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (_, img) in images {
            let p = patchify(img, patch_size)?;
            rows.extend(p.rows.row_iter().map(|r| r.iter().copied().collect()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rows.shuffle(&mut rng);
        if let Some(cap) = max_patches {
            rows.truncate(cap);
        }
        let matrix = DMatrix::from_fn(rows.len(), dim, |r, c| rows[r][c]);
        Ok(Self {
            patches: PatchMatrix {
                geometry: pooled_geometry(rows.len(), patch_size),
                rows: matrix,
            },
            image_ids: images.iter().map(|(id, _)| id.clone()).collect(),
            seed,
        })
    }

    /// Wraps raw patch rows (`n x B²`) without shuffling.
    pub fn from_rows(rows: DMatrix<f64>, patch_size: usize, seed: u64) -> Result<Self> {
        if rows.ncols() != patch_size * patch_size {
            return Err(Error::Geometry(format!(
                "patch rows have {} columns, expected {}",
                rows.ncols(),
                patch_size * patch_size
            )));
        }
        Ok(Self {
            patches: PatchMatrix {
                geometry: pooled_geometry(rows.nrows(), patch_size),
                rows,
            },
            image_ids: Vec::new(),
            seed,
        })
    }

    pub fn validate(&self, latent_dim: usize) -> Result<()> {
        let need = MIN_ROWS_PER_DIM * latent_dim;
        if self.num_patches() < need {
            return Err(Error::Data(format!(
                "training corpus has {} patches, at least {need} needed for width {latent_dim}",
                self.num_patches()
            )));
        }
        Ok(())
    }

    pub fn patches(&self) -> &PatchMatrix {
        &self.patches
    }

    pub fn num_patches(&self) -> usize {
        self.patches.num_patches()
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RidgeConfig {
    /// Penalty on `‖W‖²_F`; the bias is not penalized.
    pub alpha: f64,
    /// Systems whose reciprocal condition number falls below this are rejected.
    pub rcond: f64,
}

impl Default for RidgeConfig {
    fn default() -> Self {
        Self { alpha: 1e-4, rcond: 1e-14 }
    }
}

impl RidgeConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha.is_finite() && self.alpha >= 0.0) {
            return Err(Error::Config(format!("ridge alpha must be finite and nonnegative, got {}", self.alpha)));
        }
        if !(self.rcond.is_finite() && self.rcond > 0.0 && self.rcond < 1.0) {
            return Err(Error::Config(format!("ridge rcond must lie in (0, 1), got {}", self.rcond)));
        }
        Ok(())
    }
}

fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    if x.nrows() == 0 {
        DVector::zeros(x.ncols())
    } else {
        x.row_mean().transpose()
    }
}

fn centered(x: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut c = x.clone();
    for mut row in c.row_iter_mut() {
        row -= mean.transpose();
    }
    c
}

/// Solves `min_{W,b} Σ‖W x_i + b - t_i‖² + α‖W‖²_F` for rows `x_i`, `t_i`.
///
/// Returns `W` (`p x m`) and `b` (`p`).
pub fn ridge(inputs: &DMatrix<f64>, targets: &DMatrix<f64>, cfg: &RidgeConfig) -> Result<(DMatrix<f64>, DVector<f64>)> {
    cfg.validate()?;
    if inputs.nrows() != targets.nrows() || inputs.nrows() == 0 {
        return Err(Error::Data(format!(
            "regression needs matching nonempty rows, got {} and {}",
            inputs.nrows(),
            targets.nrows()
        )));
    }
    let (x_mean, t_mean) = (column_means(inputs), column_means(targets));
    let xc = centered(inputs, &x_mean);
    let tc = centered(targets, &t_mean);
    let m = inputs.ncols();
    let gram = xc.transpose() * &xc + DMatrix::identity(m, m) * cfg.alpha;
    let cross = xc.transpose() * &tc;
    let eig = SymmetricEigen::new(gram.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, 0.0_f64), |(lo, hi), &v| (lo.min(v), hi.max(v.abs())));
    let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
    if !(condition.is_finite() && 1.0 / condition >= cfg.rcond) {
        return Err(Error::Singular { condition });
    }
    let chol = Cholesky::new(gram).ok_or(Error::Singular { condition })?;
    let w = chol.solve(&cross).transpose();
    let b = &t_mean - &w * &x_mean;
    if !w.iter().chain(b.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("ridge solution is not finite".into()));
    }
    Ok((w, b))
}

/// Minimum-norm least squares `min_{S,s} Σ‖S y_i + s - t_i‖²` via an eigenvalue-thresholded pseudo-inverse.
pub fn least_squares_min_norm(inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> Result<(DMatrix<f64>, DVector<f64>)> {
    if inputs.nrows() != targets.nrows() || inputs.nrows() == 0 {
        return Err(Error::Data(format!(
            "regression needs matching nonempty rows, got {} and {}",
            inputs.nrows(),
            targets.nrows()
        )));
    }
    let (x_mean, t_mean) = (column_means(inputs), column_means(targets));
    let xc = centered(inputs, &x_mean);
    let tc = centered(targets, &t_mean);
    let eig = SymmetricEigen::new(xc.transpose() * &xc);
    let top = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    // relative to both the spectrum and the raw input magnitude, so centering residue counts as zero
    let cutoff = top.max(inputs.amax().powi(2) * inputs.nrows() as f64) * 1e-12;
    let inv = DVector::from_iterator(
        eig.eigenvalues.len(),
        eig.eigenvalues.iter().map(|&v| if v > cutoff && v > 0.0 { 1.0 / v } else { 0.0 }),
    );
    let pinv = &eig.eigenvectors * DMatrix::from_diagonal(&inv) * eig.eigenvectors.transpose();
    let s = (pinv * xc.transpose() * &tc).transpose();
    let bias = &t_mean - &s * &x_mean;
    if !s.iter().chain(bias.iter()).all(|v| v.is_finite()) {
        return Err(Error::Numeric("least-squares solution is not finite".into()));
    }
    Ok((s, bias))
}

/// Mean squared error per element of `W x + b` against `t`, over rows.
pub fn affine_mse(w: &DMatrix<f64>, b: &DVector<f64>, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> f64 {
    let mut pred = inputs * w.transpose();
    for mut row in pred.row_iter_mut() {
        row += b.transpose();
    }
    let n = targets.len().max(1) as f64;
    (pred - targets).norm_squared() / n
}

/// Default policy context for generating training inputs: `π^edge` with two quantization points.
pub fn default_training_policy(family: &CodecFamily) -> Result<PolicyVector> {
    let (s, d) = (family.max_level(), family.min_level());
    edge_policy(s, d, 2.min(usize::from(s - d) + 1))
}

fn check_order(bank: &ModuleBank, k: Level, policy: &PolicyVector) -> Result<()> {
    if k > policy.source() || k <= policy.dest() {
        return Err(Error::TrainingOrder(format!(
            "level {k} has no module under a policy over {}..{}",
            policy.source(),
            policy.dest()
        )));
    }
    for upper in k + 1..=policy.source() {
        for kind in [ModuleKind::Inter, ModuleKind::Intra] {
            if !bank.contains(kind, upper) {
                return Err(Error::TrainingOrder(format!(
                    "level {k} fitted before the {} module of level {upper}",
                    kind.name()
                )));
            }
        }
    }
    Ok(())
}

/// State `F^π_{s→k}(g_a^s(x))` of the corpus under the frozen bank.
pub fn cascade_state(family: &CodecFamily, bank: &ModuleBank, k: Level, corpus: &TrainingCorpus, policy: &PolicyVector) -> Result<Latent> {
    let source = family.analysis(policy.source(), corpus.patches())?;
    transform_to_level(family, bank, policy, &source, k, &CascadeOptions::default())
}

/// Regression inputs and targets for the module from level `k`.
pub fn module_problem(
    family: &CodecFamily,
    bank: &ModuleBank,
    kind: ModuleKind,
    k: Level,
    corpus: &TrainingCorpus,
    policy: &PolicyVector,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    check_order(bank, k, policy)?;
    let state = cascade_state(family, bank, k, corpus, policy)?;
    let inputs = match kind {
        ModuleKind::Intra => state.data,
        ModuleKind::Inter => family.quantize(k, &state)?.data,
    };
    let targets = family.analysis(k - 1, corpus.patches())?.data;
    Ok((inputs, targets))
}

fn fit_module(
    family: &CodecFamily,
    bank: &ModuleBank,
    kind: ModuleKind,
    k: Level,
    corpus: &TrainingCorpus,
    policy: &PolicyVector,
    cfg: &RidgeConfig,
) -> Result<TransformModule> {
    let (inputs, targets) = module_problem(family, bank, kind, k, corpus, policy)?;
    let (w, b) = ridge(&inputs, &targets, cfg)?;
    TransformModule::new(kind, k, w, b)
}

/// Fits `φ^intra_{k→k-1}` on unquantized cascade states.
pub fn fit_intra_module(
    family: &CodecFamily,
    bank: &ModuleBank,
    k: Level,
    corpus: &TrainingCorpus,
    policy: &PolicyVector,
    cfg: &RidgeConfig,
) -> Result<TransformModule> {
    fit_module(family, bank, ModuleKind::Intra, k, corpus, policy, cfg)
}

/// Fits `φ^inter_{k→k-1}` on quantized cascade states.
pub fn fit_inter_module(
    family: &CodecFamily,
    bank: &ModuleBank,
    k: Level,
    corpus: &TrainingCorpus,
    policy: &PolicyVector,
    cfg: &RidgeConfig,
) -> Result<TransformModule> {
    fit_module(family, bank, ModuleKind::Inter, k, corpus, policy, cfg)
}

/// Quantized corpus latents at level `k` as the frozen cascade delivers them.
pub fn synthesis_inputs(family: &CodecFamily, bank: &ModuleBank, k: Level, corpus: &TrainingCorpus, policy: &PolicyVector) -> Result<DMatrix<f64>> {
    if k > policy.source() || k < policy.dest() {
        return Err(Error::TrainingOrder(format!(
            "level {k} lies outside the policy over {}..{}",
            policy.source(),
            policy.dest()
        )));
    }
    if let Some(missing) = (k + 1..=policy.source())
        .find(|&u| !(bank.contains(ModuleKind::Inter, u) && bank.contains(ModuleKind::Intra, u)))
    {
        return Err(Error::TrainingOrder(format!(
            "synthesis of level {k} refit before the modules of level {missing}"
        )));
    }
    let state = cascade_state(family, bank, k, corpus, policy)?;
    Ok(family.quantize(k, &state)?.data)
}

/// Refits `S_k, s_k` to minimize patch reconstruction error of the quantized cascade latents.
///
/// The rate term does not depend on the synthesis, so the objective reduces to distortion.
pub fn finetune_synthesis(
    family: &CodecFamily,
    bank: &ModuleBank,
    k: Level,
    corpus: &TrainingCorpus,
    policy: &PolicyVector,
) -> Result<LevelModel> {
    let inputs = synthesis_inputs(family, bank, k, corpus, policy)?;
    let (s, bias) = least_squares_min_norm(&inputs, &corpus.patches().rows)?;
    let mut model = family.level(k)?.clone();
    model.synthesis = s;
    model.synthesis_bias = bias;
    Ok(model)
}

/// Per-element corpus MSE of the level-`k` synthesis on its cascade inputs.
pub fn synthesis_mse(family: &CodecFamily, bank: &ModuleBank, k: Level, corpus: &TrainingCorpus, policy: &PolicyVector) -> Result<f64> {
    let inputs = synthesis_inputs(family, bank, k, corpus, policy)?;
    let m = family.level(k)?;
    Ok(affine_mse(&m.synthesis, &m.synthesis_bias, &inputs, &corpus.patches().rows))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModuleResidual {
    pub level: Level,
    pub kind: String,
    pub mse: f64,
    pub zero_map_mse: f64,
    pub identity_map_mse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthesisResidual {
    pub level: Level,
    pub mse_before: f64,
    pub mse_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct TrainingReport {
    pub policy: String,
    pub num_patches: usize,
    pub modules: Vec<ModuleResidual>,
    pub synthesis: Vec<SynthesisResidual>,
}

impl TrainingReport {
    /// Checks each fit against the zero map and the identity map (up to the ridge penalty).
    pub fn sanity_violations(&self, cfg: &RidgeConfig, latent_dim: usize) -> Vec<String> {
        let slack = cfg.alpha * latent_dim as f64;
        let mut out = Vec::new();
        for r in &self.modules {
            if r.mse > r.zero_map_mse * (1.0 + 1e-12) {
                out.push(format!("{} module {} worse than the zero map", r.kind, r.level));
            }
            if r.mse > r.identity_map_mse + slack * (1.0 + 1e-9) {
                out.push(format!("{} module {} worse than the identity map", r.kind, r.level));
            }
        }
        for r in &self.synthesis {
            if r.mse_after > r.mse_before * (1.0 + 1e-9) {
                out.push(format!("synthesis {} refit increased the error", r.level));
            }
        }
        out
    }
}

fn residual(level: Level, kind: ModuleKind, module: &TransformModule, inputs: &DMatrix<f64>, targets: &DMatrix<f64>) -> ModuleResidual {
    let m = inputs.ncols();
    let n = targets.len().max(1) as f64;
    ModuleResidual {
        level,
        kind: kind.name().to_string(),
        mse: affine_mse(&module.weight, &module.bias, inputs, targets),
        zero_map_mse: targets.norm_squared() / n,
        identity_map_mse: affine_mse(&DMatrix::identity(m, m), &DVector::zeros(m), inputs, targets),
    }
}

/// Output of [`train_all`].
#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub family: CodecFamily,
    pub bank: ModuleBank,
    pub report: TrainingReport,
}

/// Phase one fits both module kinds for `k = s..d+1`; phase two refits every synthesis for `k = s..d`.
pub fn train_all(family: &CodecFamily, corpus: &TrainingCorpus, policy: &PolicyVector, cfg: &RidgeConfig) -> Result<TrainedModel> {
    cfg.validate()?;
    corpus.validate(family.latent_dim())?;
    if policy.source() != family.max_level() || policy.dest() != family.min_level() {
        return Err(Error::InvalidPolicy(format!(
            "training policy spans {}..{}, family spans {}..{}",
            policy.source(),
            policy.dest(),
            family.max_level(),
            family.min_level()
        )));
    }
    let mut bank = ModuleBank::new();
    let mut report = TrainingReport {
        policy: policy.literal(),
        num_patches: corpus.num_patches(),
        ..Default::default()
    };
    for k in (policy.dest() + 1..=policy.source()).rev() {
        let fit = |kind| -> Result<(TransformModule, ModuleResidual)> {
            let (inputs, targets) = module_problem(family, &bank, kind, k, corpus, policy)?;
            let (w, b) = ridge(&inputs, &targets, cfg)?;
            let module = TransformModule::new(kind, k, w, b)?;
            let res = residual(k, kind, &module, &inputs, &targets);
            Ok((module, res))
        };
        let (intra, inter) = rayon::join(|| fit(ModuleKind::Intra), || fit(ModuleKind::Inter));
        for (module, res) in [intra?, inter?] {
            debug!("{} module {k}->{}: mse {:.3e}", res.kind, k - 1, res.mse);
            report.modules.push(res);
            bank.insert(module);
        }
    }
    let mut tuned = family.clone();
    for k in (policy.dest()..=policy.source()).rev() {
        let before = synthesis_mse(&tuned, &bank, k, corpus, policy)?;
        let model = finetune_synthesis(&tuned, &bank, k, corpus, policy)?;
        tuned = tuned.with_synthesis(k, model.synthesis, model.synthesis_bias)?;
        let after = synthesis_mse(&tuned, &bank, k, corpus, policy)?;
        debug!("synthesis {k}: mse {before:.3e} -> {after:.3e}");
        report.synthesis.push(SynthesisResidual {
            level: k,
            mse_before: before,
            mse_after: after,
        });
    }
    info!(
        "trained {} modules and {} synthesis refits on {} patches",
        report.modules.len(),
        report.synthesis.len(),
        corpus.num_patches()
    );
    Ok(TrainedModel {
        family: tuned,
        bank,
        report,
    })
}
