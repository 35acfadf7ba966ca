//! Corpus-level studies: training, policy sweeps, framework comparison,
//! cross-quality adaptation, module ablation and entropy trajectories.
//!
//! Every report carries the model version and the config hash, and is written
//! as CSV tables and/or one JSON document.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use log::{info, warn};
use rayon::prelude::*;
use serde::Serialize;

use crate::cascade::{enumerate_policies, edge_policy, run_cascade, CascadeOptions, ModuleBank, ModuleSelection, PolicyVector};
use crate::codec::{CodecFamily, Level};
use crate::config::{ExperimentConfig, OutputFormat};
use crate::error::{Error, Result};
use crate::image_io::{load_image, ImagePlane};
use crate::metrics::{bd_quality, bd_rate, entropy_trace, rqsi, LevelPair, QualityAxis, RDCurve, RDPoint, RqsiMetric, DEFAULT_EPSILON};
use crate::simulator::{compare_frameworks, rd_curve, run_hcf, CompareOptions, Framework, FrameworkComparison, StageReduction};
use crate::training::{default_training_policy, train_all, ModuleResidual, RidgeConfig, SynthesisResidual, TrainedModel, TrainingCorpus};

/// PSNR slack (dB) within which two RD points count as tied.
pub const ABLATION_PSNR_TIE: f64 = 0.01;
/// Relative rate slack within which two RD points count as tied.
pub const ABLATION_RATE_TIE: f64 = 0.005;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Provenance {
    pub model_version: String,
    pub config_hash: String,
}

impl Provenance {
    pub fn new(family: &CodecFamily, cfg: &ExperimentConfig) -> Self {
        Self {
            model_version: family.version().to_string(),
            config_hash: cfg.hash(),
        }
    }
}

/// All `.pgm`, `.ppm` and `.pnm` files in `dir`, sorted by file name.
pub fn load_corpus(dir: impl AsRef<Path>) -> Result<Vec<(String, ImagePlane)>> {
    let dir = dir.as_ref();
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let ext = path.extension().and_then(|e| e.to_str()).map(str::to_ascii_lowercase);
        if path.is_file() && matches!(ext.as_deref(), Some("pgm" | "ppm" | "pnm")) {
            paths.push(path);
        }
    }
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Data(format!("{}: no .pgm/.ppm/.pnm images", dir.display())));
    }
    paths
        .par_iter()
        .map(|p| {
            let id = p.file_name().unwrap().to_string_lossy().into_owned();
            load_image(p).map(|img| (id, img))
        })
        .collect()
}

fn planes(images: &[(String, ImagePlane)]) -> Vec<ImagePlane> {
    images.iter().map(|(_, img)| img.clone()).collect()
}

fn mean(values: impl IntoIterator<Item = f64>) -> f64 {
    let (sum, n) = values.into_iter().fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    sum / n.max(1) as f64
}

// ---------------------------------------------------------------- training

/// PCA family fitted to the training corpus, then both training phases.
pub fn train(cfg: &ExperimentConfig) -> Result<TrainedModel> {
    let images = load_corpus(&cfg.training.corpus)?;
    let corpus = TrainingCorpus::from_images(&images, cfg.codec.patch_size, cfg.training.seed, cfg.training.max_patches)?;
    corpus.validate(cfg.codec.latent_dim)?;
    let family = CodecFamily::from_pca(&cfg.codec, &corpus.patches().rows)?;
    let policy = match &cfg.training.policy {
        Some(lit) => PolicyVector::parse(lit, family.max_level())?,
        None => default_training_policy(&family)?,
    };
    info!("training on {} patches from {} images, policy {policy}", corpus.num_patches(), images.len());
    let ridge = RidgeConfig {
        alpha: cfg.training.alpha,
        ..Default::default()
    };
    train_all(&family, &corpus, &policy, &ridge)
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub provenance: Provenance,
    pub policy: String,
    pub num_patches: usize,
    pub modules: Vec<ModuleResidual>,
    pub synthesis: Vec<SynthesisResidual>,
    /// Residual-table checks that failed; empty for a healthy fit.
    pub violations: Vec<String>,
}

impl TrainReport {
    pub fn new(model: &TrainedModel, cfg: &ExperimentConfig) -> Self {
        let ridge = RidgeConfig {
            alpha: cfg.training.alpha,
            ..Default::default()
        };
        Self {
            provenance: Provenance::new(&model.family, cfg),
            policy: model.report.policy.clone(),
            num_patches: model.report.num_patches,
            modules: model.report.modules.clone(),
            synthesis: model.report.synthesis.clone(),
            violations: model.report.sanity_violations(&ridge, model.family.latent_dim()),
        }
    }

    pub fn write(&self, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
        let mut out = Outputs::new(dir, &self.provenance, formats)?;
        out.table("train_modules", &self.modules)?;
        out.table("train_synthesis", &self.synthesis)?;
        out.document("train", self)?;
        Ok(out.written)
    }
}

// ---------------------------------------------------------------- sweep

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub target: Level,
    pub n_q: usize,
    pub policy: String,
    pub is_edge: bool,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim_db: f64,
    pub eta_psnr: Option<f64>,
    pub eta_msssim: Option<f64>,
    /// Row minimizes `eta_psnr` within its `(target, n_q)` group.
    pub min_eta_psnr: bool,
    pub min_eta_msssim: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepSummary {
    pub target: Level,
    pub n_q: usize,
    pub edge_policy: String,
    pub psnr_minimizer: Option<String>,
    pub edge_is_min: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct SweepReport {
    pub provenance: Provenance,
    pub rows: Vec<SweepRow>,
    pub summary: Vec<SweepSummary>,
}

impl SweepReport {
    /// Groups where the edge policy minimizes mean `η^PSNR`.
    pub fn edge_wins(&self) -> usize {
        self.summary.iter().filter(|s| s.edge_is_min).count()
    }

    pub fn write(&self, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
        let mut out = Outputs::new(dir, &self.provenance, formats)?;
        out.table("sweep", &self.rows)?;
        out.table("sweep_summary", &self.summary)?;
        out.document("sweep", self)?;
        Ok(out.written)
    }
}

fn policies_for(cfg: &ExperimentConfig, s: Level, d: Level, n_q: usize) -> Result<Vec<PolicyVector>> {
    if n_q > usize::from(s - d) + 1 {
        return Ok(Vec::new());
    }
    match cfg.policy_literals() {
        None => enumerate_policies(s, d, n_q),
        Some(list) => {
            let mut out = Vec::new();
            for lit in list {
                let p = PolicyVector::parse(lit, s)?;
                if p.dest() == d && p.n_q() == n_q {
                    out.push(p);
                }
            }
            Ok(out)
        }
    }
}

/// Quality/rate pairs at `d + 1` and `d` for each requested metric.
fn level_pairs(
    family: &CodecFamily,
    bank: &ModuleBank,
    policy: &PolicyVector,
    image: &ImagePlane,
    probes: &BTreeSet<Level>,
    metrics: &[RqsiMetric],
) -> Result<(RDPoint, Vec<LevelPair>)> {
    let opts = CascadeOptions {
        probe_levels: probes.clone(),
        ..Default::default()
    };
    let r = run_hcf(family, bank, policy, image, &opts)?;
    let pairs = metrics
        .iter()
        .map(|&m| LevelPair::from_probes(image, &r.probes, policy.dest(), m))
        .collect::<Result<Vec<_>>>()?;
    Ok((r.rd, pairs))
}

fn argmin(values: impl IntoIterator<Item = Option<f64>>) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.into_iter().enumerate() {
        if let Some(v) = v {
            if best.is_none_or(|(_, b)| v < b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

/// Runs every policy of every `(target, n_q)` group over the corpus and scores it by RQSI.
pub fn sweep(cfg: &ExperimentConfig, family: &CodecFamily, bank: &ModuleBank, images: &[(String, ImagePlane)]) -> Result<SweepReport> {
    let e = &cfg.evaluation;
    let s = e.source;
    let imgs = planes(images);
    let mut metrics: Vec<RqsiMetric> = Vec::new();
    for m in [RqsiMetric::Psnr, RqsiMetric::MsSsim] {
        if e.metrics.contains(&m) {
            metrics.push(m);
        }
    }
    let slot = |m: RqsiMetric| metrics.iter().position(|&x| x == m);
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for &d in &e.targets {
        let mut probes: BTreeSet<Level> = [d, d + 1].into();
        probes.extend(e.probe_levels.iter().copied().filter(|&k| (d..=s).contains(&k)));
        let minimal = PolicyVector::minimal(s, d)?;
        let maximal = PolicyVector::maximal(s, d)?;
        let refs = imgs
            .par_iter()
            .map(|img| {
                let lo = level_pairs(family, bank, &minimal, img, &probes, &metrics)?.1;
                let hi = level_pairs(family, bank, &maximal, img, &probes, &metrics)?.1;
                Ok((lo, hi))
            })
            .collect::<Result<Vec<_>>>()?;
        for &n_q in &e.n_q {
            let policies = policies_for(cfg, s, d, n_q)?;
            if policies.is_empty() {
                warn!("no policies for target {d} with n_q = {n_q}");
                continue;
            }
            let first = rows.len();
            for policy in &policies {
                let per_image = imgs
                    .par_iter()
                    .zip(&refs)
                    .map(|(img, (lo, hi))| {
                        let (rd, pairs) = level_pairs(family, bank, policy, img, &probes, &metrics)?;
                        let etas: Vec<f64> = (0..metrics.len()).map(|i| rqsi(&pairs[i], &lo[i], &hi[i], DEFAULT_EPSILON)).collect();
                        Ok((rd, etas))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let eta = |m| slot(m).map(|i| mean(per_image.iter().map(|(_, e)| e[i])));
                rows.push(SweepRow {
                    target: d,
                    n_q,
                    policy: policy.literal(),
                    is_edge: policy.is_edge(),
                    bpp: mean(per_image.iter().map(|(p, _)| p.bpp)),
                    psnr: mean(per_image.iter().map(|(p, _)| p.psnr)),
                    msssim_db: mean(per_image.iter().map(|(p, _)| p.msssim_db)),
                    eta_psnr: eta(RqsiMetric::Psnr),
                    eta_msssim: eta(RqsiMetric::MsSsim),
                    min_eta_psnr: false,
                    min_eta_msssim: false,
                });
            }
            let group = &mut rows[first..];
            let best_p = argmin(group.iter().map(|r| r.eta_psnr));
            let best_m = argmin(group.iter().map(|r| r.eta_msssim));
            if let Some(i) = best_p {
                group[i].min_eta_psnr = true;
            }
            if let Some(i) = best_m {
                group[i].min_eta_msssim = true;
            }
            let edge = edge_policy(s, d, n_q)?.literal();
            let minimizer = best_p.map(|i| group[i].policy.clone());
            let edge_is_min = minimizer.as_deref() == Some(edge.as_str());
            if !edge_is_min {
                warn!("edge policy {edge} is not the eta_psnr minimizer for target {d}, n_q = {n_q}");
            }
            summary.push(SweepSummary {
                target: d,
                n_q,
                edge_policy: edge,
                psnr_minimizer: minimizer,
                edge_is_min,
            });
        }
    }
    Ok(SweepReport {
        provenance: Provenance::new(family, cfg),
        rows,
        summary,
    })
}

// ---------------------------------------------------------------- compare

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BdRow {
    pub target: Level,
    pub n_q: usize,
    pub policy: String,
    /// Test curve; the reference is always HCF.
    pub framework: String,
    pub bd_rate_psnr: f64,
    pub bd_psnr: f64,
    pub bd_rate_msssim: f64,
    pub bd_msssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CurveRow {
    pub target: Level,
    pub n_q: usize,
    pub label: String,
    pub point: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub target: Level,
    pub n_q: usize,
    pub framework: String,
    pub flops: u64,
    pub bytes: u64,
    pub peak_buffer: u64,
    pub wall_time: f64,
    /// Percent reduction of HCF relative to DRF; empty on the DRF row.
    pub flops_reduction: Option<f64>,
    pub bytes_reduction: Option<f64>,
    pub peak_buffer_reduction: Option<f64>,
    pub wall_time_reduction: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageRow {
    pub target: Level,
    pub n_q: usize,
    #[serde(flatten)]
    pub stage: StageReduction,
}

#[derive(Debug, Clone, Serialize)]
pub struct CompareReport {
    pub provenance: Provenance,
    pub bd: Vec<BdRow>,
    pub curves: Vec<CurveRow>,
    pub costs: Vec<CostRow>,
    pub stages: Vec<StageRow>,
    pub comparisons: Vec<FrameworkComparison>,
}

impl CompareReport {
    pub fn write(&self, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
        let mut out = Outputs::new(dir, &self.provenance, formats)?;
        out.table("compare_bd", &self.bd)?;
        out.table("compare_curves", &self.curves)?;
        out.table("compare_costs", &self.costs)?;
        // csv cannot serialize flattened structs
        let stages: Vec<_> = self
            .stages
            .iter()
            .map(|r| {
                let s = &r.stage;
                (r.target, r.n_q, s.stage, s.hcf_flops, s.drf_flops, s.flops_reduction, s.hcf_peak_buffer, s.drf_peak_buffer, s.peak_buffer_reduction)
            })
            .collect();
        out.table_with_header(
            "compare_stages",
            &["target", "n_q", "stage", "hcf_flops", "drf_flops", "flops_reduction", "hcf_peak_buffer", "drf_peak_buffer", "peak_buffer_reduction"],
            &stages,
        )?;
        out.document("compare", self)?;
        Ok(out.written)
    }
}

/// BD deltas of `test` against `reference` on both quality axes.
pub fn bd_deltas(reference: &RDCurve, test: &RDCurve) -> Result<[f64; 4]> {
    Ok([
        bd_rate(reference, test, QualityAxis::Psnr)?,
        bd_quality(reference, test, QualityAxis::Psnr)?,
        bd_rate(reference, test, QualityAxis::MsssimDb)?,
        bd_quality(reference, test, QualityAxis::MsssimDb)?,
    ])
}

fn curve_rows(target: Level, n_q: usize, curve: &RDCurve) -> impl Iterator<Item = CurveRow> + '_ {
    curve.points().iter().enumerate().map(move |(point, p)| CurveRow {
        target,
        n_q,
        label: curve.label.clone(),
        point,
        bpp: p.bpp,
        psnr: p.psnr,
        msssim_db: p.msssim_db,
    })
}

/// HCF, DRF and SSF under the edge policy at every `(target, n_q)`, with HCF as the BD reference.
pub fn compare(cfg: &ExperimentConfig, family: &CodecFamily, bank: &ModuleBank, images: &[(String, ImagePlane)]) -> Result<CompareReport> {
    let e = &cfg.evaluation;
    let imgs = planes(images);
    let opts = CompareOptions {
        ladder: e.ladder.clone(),
        timing_runs: e.timing_runs,
    };
    let mut report = CompareReport {
        provenance: Provenance::new(family, cfg),
        bd: Vec::new(),
        curves: Vec::new(),
        costs: Vec::new(),
        stages: Vec::new(),
        comparisons: Vec::new(),
    };
    for &d in &e.targets {
        for &n_q in &e.n_q {
            if n_q > usize::from(e.source - d) + 1 {
                continue;
            }
            let policy = edge_policy(e.source, d, n_q)?;
            let c = compare_frameworks(family, bank, &policy, &imgs, &opts)?;
            for fw in &e.frameworks {
                let curve = match fw {
                    Framework::Hcf => &c.hcf,
                    Framework::Drf => &c.drf,
                    Framework::Ssf => &c.ssf,
                };
                let [bd_rate_psnr, bd_psnr, bd_rate_msssim, bd_msssim] = bd_deltas(&c.hcf, curve)?;
                report.bd.push(BdRow {
                    target: d,
                    n_q,
                    policy: c.policy.clone(),
                    framework: fw.name().to_string(),
                    bd_rate_psnr,
                    bd_psnr,
                    bd_rate_msssim,
                    bd_msssim,
                });
                report.curves.extend(curve_rows(d, n_q, curve));
            }
            for (fw, t) in [(Framework::Hcf, &c.hcf_cost), (Framework::Drf, &c.drf_cost)] {
                let hcf = fw == Framework::Hcf;
                let red = |v: f64| hcf.then_some(v);
                report.costs.push(CostRow {
                    target: d,
                    n_q,
                    framework: fw.name().to_string(),
                    flops: t.flops,
                    bytes: t.bytes,
                    peak_buffer: t.peak_buffer,
                    wall_time: t.wall_time,
                    flops_reduction: red(c.reductions.flops),
                    bytes_reduction: red(c.reductions.bytes),
                    peak_buffer_reduction: red(c.reductions.peak_buffer),
                    wall_time_reduction: red(c.reductions.wall_time),
                });
            }
            report.stages.extend(c.stages.iter().map(|s| StageRow {
                target: d,
                n_q,
                stage: s.clone(),
            }));
            report.comparisons.push(c);
        }
    }
    Ok(report)
}

// ---------------------------------------------------------------- adapt

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AdaptRow {
    pub target: Level,
    pub shorter_source: Level,
    pub longer_source: Level,
    pub shorter_policy: String,
    pub longer_policy: String,
    /// Shorter path measured against the longer one.
    pub bd_rate_psnr: f64,
    pub bd_psnr: f64,
    pub bd_rate_msssim: f64,
    pub bd_msssim: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct AdaptReport {
    pub provenance: Provenance,
    pub rows: Vec<AdaptRow>,
    pub curves: Vec<CurveRow>,
}

impl AdaptReport {
    pub fn write(&self, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
        let mut out = Outputs::new(dir, &self.provenance, formats)?;
        out.table("adapt", &self.rows)?;
        out.table("adapt_curves", &self.curves)?;
        out.document("adapt", self)?;
        Ok(out.written)
    }
}

fn hcf_curve(family: &CodecFamily, bank: &ModuleBank, policy: &PolicyVector, images: &[ImagePlane], ladder: &[f64], selection: ModuleSelection) -> Result<RDCurve> {
    let base = family.step(policy.dest())?;
    let label = format!("{}->{} {}", policy.source(), policy.dest(), policy.literal());
    rd_curve(&label, images, ladder, |img, mult| {
        let opts = CascadeOptions {
            final_step: Some(base * mult),
            selection,
            ..Default::default()
        };
        run_hcf(family, bank, policy, img, &opts)
    })
}

/// Each source `k` in the config against `k + 1`, both edge policies with two quantization points.
pub fn adapt(cfg: &ExperimentConfig, family: &CodecFamily, bank: &ModuleBank, images: &[(String, ImagePlane)]) -> Result<AdaptReport> {
    let e = &cfg.evaluation;
    let d = e.adapt_target;
    let imgs = planes(images);
    let sources: BTreeSet<Level> = e.adapt_sources.iter().copied().collect();
    let mut curves: BTreeMap<Level, (PolicyVector, RDCurve)> = BTreeMap::new();
    for &k in &sources {
        let policy = edge_policy(k, d, 2.min(usize::from(k - d) + 1))?;
        let curve = hcf_curve(family, bank, &policy, &imgs, &e.ladder, ModuleSelection::Complete)?;
        curves.insert(k, (policy, curve));
    }
    let mut rows = Vec::new();
    for (&k, (short_policy, short)) in &curves {
        let Some((long_policy, long)) = curves.get(&(k + 1)) else { continue };
        let [bd_rate_psnr, bd_psnr, bd_rate_msssim, bd_msssim] = bd_deltas(long, short)?;
        rows.push(AdaptRow {
            target: d,
            shorter_source: k,
            longer_source: k + 1,
            shorter_policy: short_policy.literal(),
            longer_policy: long_policy.literal(),
            bd_rate_psnr,
            bd_psnr,
            bd_rate_msssim,
            bd_msssim,
        });
    }
    rows.sort_by_key(|r| std::cmp::Reverse(r.longer_source));
    Ok(AdaptReport {
        provenance: Provenance::new(family, cfg),
        rows,
        curves: curves.values().flat_map(|(_, c)| curve_rows(d, 2, c)).collect(),
    })
}

// ---------------------------------------------------------------- ablate

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationRow {
    pub target: Level,
    pub n_q: usize,
    pub policy: String,
    pub variant: String,
    pub point: usize,
    pub bpp: f64,
    pub psnr: f64,
    pub msssim_db: f64,
    /// Whether the complete bank dominates or ties this point; empty on complete rows.
    pub complete_dominates: Option<bool>,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub provenance: Provenance,
    pub rows: Vec<AblationRow>,
    pub evaluated: usize,
    pub dominated: usize,
}

impl AblationReport {
    pub fn fraction(&self) -> f64 {
        self.dominated as f64 / self.evaluated.max(1) as f64
    }

    pub fn write(&self, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
        let mut out = Outputs::new(dir, &self.provenance, formats)?;
        out.table("ablate", &self.rows)?;
        out.document("ablate", self)?;
        Ok(out.written)
    }
}

/// PSNR of `curve` at `bpp`, linear in log-rate; `None` outside the curve's rate span.
fn psnr_at(curve: &RDCurve, bpp: f64) -> Option<f64> {
    let p = curve.points();
    let x = bpp.ln();
    p.windows(2).find_map(|w| {
        let (x0, x1) = (w[0].bpp.ln(), w[1].bpp.ln());
        (x0..=x1).contains(&x).then(|| w[0].psnr + (w[1].psnr - w[0].psnr) * (x - x0) / (x1 - x0))
    })
}

/// The complete curve dominates or ties `v` if its matched point is no worse on
/// both axes, or if its PSNR at `v`'s rate is no worse (both within the tie slack).
pub fn dominates_or_ties(complete: &RDCurve, matched: &RDPoint, v: &RDPoint) -> bool {
    let pointwise = matched.psnr >= v.psnr - ABLATION_PSNR_TIE && matched.bpp <= v.bpp * (1.0 + ABLATION_RATE_TIE);
    let on_curve = psnr_at(complete, v.bpp).is_some_and(|q| q >= v.psnr - ABLATION_PSNR_TIE);
    pointwise || on_curve
}

/// Complete bank vs inter-only and intra-only variants, edge policy, every `(target, n_q)`.
pub fn ablate(cfg: &ExperimentConfig, family: &CodecFamily, bank: &ModuleBank, images: &[(String, ImagePlane)]) -> Result<AblationReport> {
    let e = &cfg.evaluation;
    let imgs = planes(images);
    let mut rows = Vec::new();
    let (mut evaluated, mut dominated) = (0, 0);
    for &d in &e.targets {
        for &n_q in &e.n_q {
            if n_q > usize::from(e.source - d) + 1 {
                continue;
            }
            let policy = edge_policy(e.source, d, n_q)?;
            let complete = hcf_curve(family, bank, &policy, &imgs, &e.ladder, ModuleSelection::Complete)?;
            for sel in [ModuleSelection::Complete, ModuleSelection::InterOnly, ModuleSelection::IntraOnly] {
                let curve = if sel == ModuleSelection::Complete {
                    complete.clone()
                } else {
                    hcf_curve(family, bank, &policy, &imgs, &e.ladder, sel)?
                };
                for (i, p) in curve.points().iter().enumerate() {
                    let verdict = (sel != ModuleSelection::Complete).then(|| dominates_or_ties(&complete, &complete.points()[i], p));
                    if let Some(v) = verdict {
                        evaluated += 1;
                        dominated += usize::from(v);
                    }
                    rows.push(AblationRow {
                        target: d,
                        n_q,
                        policy: policy.literal(),
                        variant: sel.name().to_string(),
                        point: i,
                        bpp: p.bpp,
                        psnr: p.psnr,
                        msssim_db: p.msssim_db,
                        complete_dominates: verdict,
                    });
                }
            }
        }
    }
    Ok(AblationReport {
        provenance: Provenance::new(family, cfg),
        rows,
        evaluated,
        dominated,
    })
}

// ---------------------------------------------------------------- entropy

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropyMeanRow {
    pub policy: String,
    pub level: Level,
    pub quantization_point: bool,
    pub pre_bits: f64,
    pub post_bits: Option<f64>,
    pub increment: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EntropySummary {
    pub policy: String,
    pub is_edge: bool,
    /// Mean over images of the summed increments at quantization points.
    pub total_increment: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EntropyReport {
    pub provenance: Provenance,
    pub rows: Vec<EntropyMeanRow>,
    pub summary: Vec<EntropySummary>,
    /// Whether the edge policy has the smallest total increment.
    pub edge_smallest: bool,
}

impl EntropyReport {
    pub fn write(&self, dir: &Path, formats: &[OutputFormat]) -> Result<Vec<PathBuf>> {
        let mut out = Outputs::new(dir, &self.provenance, formats)?;
        out.table("entropy", &self.rows)?;
        out.table("entropy_summary", &self.summary)?;
        out.document("entropy", self)?;
        Ok(out.written)
    }
}

/// Mean entropy trajectories of all two-quantization policies between the configured levels.
pub fn entropy(cfg: &ExperimentConfig, family: &CodecFamily, bank: &ModuleBank, images: &[(String, ImagePlane)]) -> Result<EntropyReport> {
    let e = &cfg.evaluation;
    let [s, d] = e.entropy_levels;
    let imgs = planes(images);
    let opts = CascadeOptions {
        probe_levels: (d..=s).collect(),
        ..Default::default()
    };
    let mut rows = Vec::new();
    let mut summary = Vec::new();
    for policy in enumerate_policies(s, d, 2.min(usize::from(s - d) + 1))? {
        let traces = imgs
            .par_iter()
            .enumerate()
            .map(|(i, img)| {
                let out = run_cascade(family, bank, &policy, img, &opts)?;
                entropy_trace(&out.probes, &policy, e.entropy_neighbor, e.seed.wrapping_add(i as u64))
            })
            .collect::<Result<Vec<_>>>()?;
        for (j, level) in policy.levels().enumerate() {
            let col = || traces.iter().map(move |t| &t.rows[j]);
            let quant = policy.bit(level);
            rows.push(EntropyMeanRow {
                policy: policy.literal(),
                level,
                quantization_point: quant,
                pre_bits: mean(col().map(|r| r.pre_bits)),
                post_bits: quant.then(|| mean(col().map(|r| r.post_bits.unwrap_or(f64::NAN)))),
                increment: quant.then(|| mean(col().map(|r| r.increment.unwrap_or(f64::NAN)))),
            });
        }
        summary.push(EntropySummary {
            policy: policy.literal(),
            is_edge: policy.is_edge(),
            total_increment: mean(traces.iter().map(|t| t.total_increment())),
        });
    }
    let best = summary.iter().map(|s| s.total_increment).fold(f64::INFINITY, f64::min);
    let edge_smallest = summary.iter().any(|s| s.is_edge && s.total_increment <= best);
    if !edge_smallest {
        warn!("edge policy does not have the smallest entropy increment");
    }
    Ok(EntropyReport {
        provenance: Provenance::new(family, cfg),
        rows,
        summary,
        edge_smallest,
    })
}

// ---------------------------------------------------------------- output

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::io(path, io::Error::other(e))
}

/// Writes report files into one directory, prefixing every CSV with provenance columns.
struct Outputs<'a> {
    dir: PathBuf,
    provenance: &'a Provenance,
    csv: bool,
    json: bool,
    written: Vec<PathBuf>,
}

impl<'a> Outputs<'a> {
    fn new(dir: &Path, provenance: &'a Provenance, formats: &[OutputFormat]) -> Result<Self> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            provenance,
            csv: formats.contains(&OutputFormat::Csv),
            json: formats.contains(&OutputFormat::Json),
            written: Vec::new(),
        })
    }

    fn table<T: Serialize>(&mut self, name: &str, rows: &[T]) -> Result<()> {
        if !self.csv {
            return Ok(());
        }
        let path = self.dir.join(format!("{name}.csv"));
        // serialize once to learn the header, then re-emit with provenance columns
        let mut inner = csv::Writer::from_writer(Vec::new());
        for r in rows {
            inner.serialize(r).map_err(|e| csv_error(&path, e))?;
        }
        let bytes = inner.into_inner().map_err(|e| Error::io(&path, io::Error::other(e.to_string())))?;
        let mut reader = csv::ReaderBuilder::new().has_headers(false).from_reader(bytes.as_slice());
        let mut w = csv::Writer::from_path(&path).map_err(|e| csv_error(&path, e))?;
        let mut records = reader.records();
        match records.next() {
            Some(header) => {
                let header = header.map_err(|e| csv_error(&path, e))?;
                w.write_record(["model_version", "config_hash"].into_iter().chain(header.iter()))
                    .map_err(|e| csv_error(&path, e))?;
            }
            None => w.write_record(["model_version", "config_hash"]).map_err(|e| csv_error(&path, e))?,
        }
        for rec in records {
            let rec = rec.map_err(|e| csv_error(&path, e))?;
            let prov = [self.provenance.model_version.as_str(), self.provenance.config_hash.as_str()];
            w.write_record(prov.into_iter().chain(rec.iter())).map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn table_with_header<T: Serialize>(&mut self, name: &str, header: &[&str], rows: &[T]) -> Result<()> {
        if !self.csv {
            return Ok(());
        }
        let path = self.dir.join(format!("{name}.csv"));
        let mut w = csv::WriterBuilder::new().has_headers(false).from_path(&path).map_err(|e| csv_error(&path, e))?;
        w.write_record(["model_version", "config_hash"].iter().chain(header)).map_err(|e| csv_error(&path, e))?;
        for r in rows {
            w.serialize((&self.provenance.model_version, &self.provenance.config_hash, r))
                .map_err(|e| csv_error(&path, e))?;
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }

    fn document<T: Serialize>(&mut self, name: &str, value: &T) -> Result<()> {
        if !self.json {
            return Ok(());
        }
        let path = self.dir.join(format!("{name}.json"));
        let text = serde_json::to_string_pretty(value).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.written.push(path);
        Ok(())
    }
}
