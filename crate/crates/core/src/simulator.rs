//! Execution of HCF, DRF and SSF over a simulated chain of nodes with per-op cost accounting.
//!
//! Every operation is recorded with the node that performs it and the *stage*
//! it belongs to: stage `k` holds the work that produces the level-`k`
//! representation and, where it is transmitted, codes it; stage 0 is the
//! destination's reconstruction.

use std::collections::BTreeMap;
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cascade::{
    apply_selected, level_step, selected_module, CascadeOptions, ModuleBank, ModuleKind, PolicyVector, ProbeRecord,
};
use crate::codec::{CodecFamily, Level};
use crate::entropy::{self, fit_prob_model, Bitstream, ALPHABET};
use crate::error::{Error, Result};
use crate::image_io::{patchify, unpatchify, ImagePlane};
use crate::metrics::{msssim_db, psnr, RDCurve, RDPoint};

/// Stage tag of the destination's decode and synthesis.
pub const RECONSTRUCTION_STAGE: Level = 0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Framework {
    Hcf,
    Drf,
    Ssf,
}

impl Framework {
    pub fn name(self) -> &'static str {
        match self {
            Framework::Hcf => "hcf",
            Framework::Drf => "drf",
            Framework::Ssf => "ssf",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    /// Image to patch rows (data movement only).
    Patchify,
    Analysis,
    InterModule,
    IntraModule,
    Quantize,
    FitModel,
    Encode,
    Decode,
    Synthesis,
    /// Patch rows to clamped image (data movement only).
    Unpatchify,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpRecord {
    pub node: usize,
    pub op: Op,
    pub level: Level,
    pub stage: Level,
    pub flops: u64,
    /// Live real values while the op runs: its input plus its output.
    pub buffer: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeCost {
    pub node: usize,
    /// Levels whose representations this node produces; empty for the destination.
    pub levels: Vec<Level>,
    pub flops: u64,
    pub peak_buffer: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkCost {
    pub from: usize,
    pub to: usize,
    pub level: Level,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub nodes: Vec<NodeCost>,
    pub links: Vec<LinkCost>,
    pub op_trace: Vec<OpRecord>,
    pub total_flops: u64,
    pub total_bytes: u64,
    pub peak_buffer: u64,
    pub wall_time: f64,
}

impl CostReport {
    pub fn stage_flops(&self) -> BTreeMap<Level, u64> {
        let mut out = BTreeMap::new();
        for r in &self.op_trace {
            *out.entry(r.stage).or_insert(0) += r.flops;
        }
        out
    }

    pub fn stage_peak_buffer(&self) -> BTreeMap<Level, u64> {
        let mut out = BTreeMap::new();
        for r in &self.op_trace {
            let e = out.entry(r.stage).or_insert(0);
            *e = (*e).max(r.buffer);
        }
        out
    }

    /// Total FLOPs equal the sum over the op trace, per node and overall.
    pub fn is_conserved(&self) -> bool {
        let trace: u64 = self.op_trace.iter().map(|r| r.flops).sum();
        let nodes: u64 = self.nodes.iter().map(|n| n.flops).sum();
        let bytes: u64 = self.links.iter().map(|l| l.bytes).sum();
        trace == self.total_flops && nodes == self.total_flops && bytes == self.total_bytes
    }

    /// Same report with timing fields zeroed, for determinism checks.
    pub fn without_timing(&self) -> Self {
        let mut c = self.clone();
        c.wall_time = 0.0;
        c.nodes.iter_mut().for_each(|n| n.wall_time = 0.0);
        c
    }
}

#[derive(Debug, Clone)]
pub struct StageResult {
    pub framework: Framework,
    pub reconstruction: ImagePlane,
    pub rd: RDPoint,
    pub cost: CostReport,
    pub probes: Vec<ProbeRecord>,
    /// Bitstream on the link into the destination.
    pub final_stream: Bitstream,
}

struct Tracker {
    ops: Vec<OpRecord>,
    times: Vec<f64>,
    links: Vec<LinkCost>,
}

impl Tracker {
    fn new() -> Self {
        Self {
            ops: Vec::new(),
            times: Vec::new(),
            links: Vec::new(),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run<T>(&mut self, node: usize, op: Op, level: Level, stage: Level, flops: u64, buffer: u64, f: impl FnOnce() -> Result<T>) -> Result<T> {
        let start = Instant::now();
        let out = f()?;
        let elapsed = start.elapsed().as_secs_f64();
        if self.times.len() <= node {
            self.times.resize(node + 1, 0.0);
        }
        self.times[node] += elapsed;
        self.ops.push(OpRecord {
            node,
            op,
            level,
            stage,
            flops,
            buffer,
        });
        Ok(out)
    }

    fn link(&mut self, from: usize, level: Level, stream: &Bitstream) {
        self.links.push(LinkCost {
            from,
            to: from + 1,
            level,
            bytes: stream.to_bytes().len() as u64,
        });
    }

    fn finish(self, spans: Vec<Vec<Level>>) -> CostReport {
        let mut nodes: Vec<NodeCost> = spans
            .into_iter()
            .enumerate()
            .map(|(node, levels)| NodeCost {
                node,
                levels,
                flops: 0,
                peak_buffer: 0,
                wall_time: self.times.get(node).copied().unwrap_or(0.0),
            })
            .collect();
        for r in &self.ops {
            let n = &mut nodes[r.node];
            n.flops += r.flops;
            n.peak_buffer = n.peak_buffer.max(r.buffer);
        }
        CostReport {
            total_flops: nodes.iter().map(|n| n.flops).sum(),
            total_bytes: self.links.iter().map(|l| l.bytes).sum(),
            peak_buffer: nodes.iter().map(|n| n.peak_buffer).max().unwrap_or(0),
            wall_time: nodes.iter().map(|n| n.wall_time).sum(),
            nodes,
            links: self.links,
            op_trace: self.ops,
        }
    }
}

/// Level spans of the HCF nodes: each maximal run of levels ending at a quantization point.
/// The destination (last entry) produces no level.
pub fn hcf_node_spans(policy: &PolicyVector) -> Vec<Vec<Level>> {
    let mut spans = vec![Vec::new()];
    for k in policy.levels() {
        spans.last_mut().unwrap().push(k);
        if policy.bit(k) {
            spans.push(Vec::new());
        }
    }
    spans
}

/// Per-op buffer sizes for `n` patches.
struct Sizes {
    n: u64,
    m: u64,
    b2: u64,
    pixels: u64,
}

impl Sizes {
    fn new(family: &CodecFamily, n: usize, image: &ImagePlane) -> Self {
        let b = family.patch_size() as u64;
        Self {
            n: n as u64,
            m: family.latent_dim() as u64,
            b2: b * b,
            pixels: image.samples().len() as u64,
        }
    }
    fn latent(&self) -> u64 {
        self.n * self.m
    }
    fn patches(&self) -> u64 {
        self.n * self.b2
    }
    fn coder(&self) -> u64 {
        self.latent() + ALPHABET as u64 * self.m
    }
}

fn rd_point(image: &ImagePlane, recon: &ImagePlane, stream: &Bitstream) -> Result<RDPoint> {
    Ok(RDPoint {
        bpp: stream.size_bits() as f64 / image.pixel_count() as f64,
        psnr: psnr(image, recon)?,
        msssim_db: msssim_db(image, recon)?,
    })
}

/// HCF: latent-space transforms between levels with real coding at every `π_k = 1`.
pub fn run_hcf(family: &CodecFamily, bank: &ModuleBank, policy: &PolicyVector, image: &ImagePlane, opts: &CascadeOptions) -> Result<StageResult> {
    let (s, d) = (policy.source(), policy.dest());
    let mut t = Tracker::new();
    let b = family.patch_size();
    let patches = t.run(0, Op::Patchify, s, s, 0, 0, || patchify(image, b))?;
    let n = patches.num_patches();
    let z = Sizes::new(family, n, image);
    t.ops.last_mut().unwrap().buffer = z.pixels + z.patches();
    let mut y = t.run(0, Op::Analysis, s, s, family.flops_analysis(n), z.patches() + z.latent(), || family.analysis(s, &patches))?;
    let mut node = 0;
    let mut probes = Vec::new();
    let mut final_stream = None;
    for k in policy.levels() {
        let bit = policy.bit(k);
        if opts.probe_levels.contains(&k) {
            probes.push(ProbeRecord::take(family, &y, level_step(family, k, d, opts)?, bit)?);
        }
        let mut input = y;
        if bit {
            let step = level_step(family, k, d, opts)?;
            let q = t.run(node, Op::Quantize, k, k, family.flops_quantize(n), 2 * z.latent(), || {
                family.quantize_with_step(k, &input, step)
            })?;
            let model = t.run(node, Op::FitModel, k, k, entropy::flops_fit(n, family.latent_dim()), z.coder(), || fit_prob_model(&q))?;
            let stream = t.run(node, Op::Encode, k, k, entropy::flops_code(n, family.latent_dim()), z.coder(), || {
                entropy::encode(&q, &model, family.version())
            })?;
            t.link(node, k, &stream);
            node += 1;
            let stage = if k == d { RECONSTRUCTION_STAGE } else { k - 1 };
            input = t.run(node, Op::Decode, k, stage, entropy::flops_code(n, family.latent_dim()), z.coder(), || {
                entropy::decode(&stream, family)
            })?;
            final_stream = Some(stream);
            if k == d {
                y = input;
                break;
            }
        }
        let module = selected_module(bank, opts.selection, &input)?;
        let op = match module.kind {
            ModuleKind::Inter => Op::InterModule,
            ModuleKind::Intra => Op::IntraModule,
        };
        y = t.run(node, op, k, k - 1, module.flops(n), 2 * z.latent(), || apply_selected(bank, opts.selection, &input))?;
    }
    let out = t.run(node, Op::Synthesis, d, RECONSTRUCTION_STAGE, family.flops_synthesis(n), z.latent() + z.patches(), || {
        family.synthesis(d, &y)
    })?;
    let recon = t.run(node, Op::Unpatchify, d, RECONSTRUCTION_STAGE, 0, z.patches() + z.pixels, || unpatchify(&out))?;
    let final_stream = final_stream.expect("the destination level always quantizes");
    Ok(StageResult {
        framework: Framework::Hcf,
        rd: rd_point(image, &recon, &final_stream)?,
        reconstruction: recon,
        cost: t.finish(hcf_node_spans(policy)),
        probes,
        final_stream,
    })
}

/// DRF: every intermediate node decodes to pixels and re-encodes one level lower.
/// `final_step` overrides the destination-level quantizer.
pub fn run_drf(family: &CodecFamily, s: Level, d: Level, image: &ImagePlane, final_step: Option<f64>) -> Result<StageResult> {
    run_drf_as(Framework::Drf, family, s, d, image, final_step)
}

/// SSF: direct encode and decode at level `k`.
pub fn run_ssf(family: &CodecFamily, k: Level, image: &ImagePlane, step: Option<f64>) -> Result<StageResult> {
    run_drf_as(Framework::Ssf, family, k, k, image, step)
}

fn run_drf_as(framework: Framework, family: &CodecFamily, s: Level, d: Level, image: &ImagePlane, final_step: Option<f64>) -> Result<StageResult> {
    if s < d {
        return Err(Error::InvalidPolicy(format!("source {s} below destination {d}")));
    }
    family.level(s)?;
    family.level(d)?;
    let b = family.patch_size();
    let m = family.latent_dim();
    let mut t = Tracker::new();
    let mut pixels = image.clone();
    let mut incoming: Option<Bitstream> = None;
    let mut sizes = None;
    for (node, k) in (d..=s).rev().enumerate() {
        if let Some(stream) = incoming.take() {
            let z: &Sizes = sizes.as_ref().unwrap();
            let up = k + 1;
            let n = stream.header.num_patches;
            let latent = t.run(node, Op::Decode, up, k, entropy::flops_code(n, m), z.coder(), || entropy::decode(&stream, family))?;
            let rows = t.run(node, Op::Synthesis, up, k, family.flops_synthesis(n), z.latent() + z.patches(), || {
                family.synthesis(up, &latent)
            })?;
            pixels = t.run(node, Op::Unpatchify, up, k, 0, z.patches() + z.pixels, || unpatchify(&rows))?;
        }
        let patches = t.run(node, Op::Patchify, k, k, 0, 0, || patchify(&pixels, b))?;
        let n = patches.num_patches();
        let z = Sizes::new(family, n, image);
        t.ops.last_mut().unwrap().buffer = z.pixels + z.patches();
        let y = t.run(node, Op::Analysis, k, k, family.flops_analysis(n), z.patches() + z.latent(), || family.analysis(k, &patches))?;
        let step = match final_step {
            Some(step) if k == d => step,
            _ => family.step(k)?,
        };
        let q = t.run(node, Op::Quantize, k, k, family.flops_quantize(n), 2 * z.latent(), || family.quantize_with_step(k, &y, step))?;
        let model = t.run(node, Op::FitModel, k, k, entropy::flops_fit(n, m), z.coder(), || fit_prob_model(&q))?;
        let stream = t.run(node, Op::Encode, k, k, entropy::flops_code(n, m), z.coder(), || entropy::encode(&q, &model, family.version()))?;
        t.link(node, k, &stream);
        incoming = Some(stream);
        sizes = Some(z);
    }
    let dest = usize::from(s - d) + 1;
    let stream = incoming.expect("at least one level runs");
    let z = sizes.unwrap();
    let n = stream.header.num_patches;
    let latent = t.run(dest, Op::Decode, d, RECONSTRUCTION_STAGE, entropy::flops_code(n, m), z.coder(), || entropy::decode(&stream, family))?;
    let rows = t.run(dest, Op::Synthesis, d, RECONSTRUCTION_STAGE, family.flops_synthesis(n), z.latent() + z.patches(), || {
        family.synthesis(d, &latent)
    })?;
    let recon = t.run(dest, Op::Unpatchify, d, RECONSTRUCTION_STAGE, 0, z.patches() + z.pixels, || unpatchify(&rows))?;
    let mut spans: Vec<Vec<Level>> = (d..=s).rev().map(|k| vec![k]).collect();
    spans.push(Vec::new());
    Ok(StageResult {
        framework,
        rd: rd_point(image, &recon, &stream)?,
        reconstruction: recon,
        cost: t.finish(spans),
        probes: Vec::new(),
        final_stream: stream,
    })
}

/// Destination-step multipliers used to trace an RD curve at a fixed target level.
pub const DEFAULT_LADDER: [f64; 5] = [0.5, std::f64::consts::FRAC_1_SQRT_2, 1.0, std::f64::consts::SQRT_2, 2.0];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CompareOptions {
    pub ladder: Vec<f64>,
    /// Timed repetitions per image after one discarded warm-up; the median is kept.
    pub timing_runs: usize,
}

impl Default for CompareOptions {
    fn default() -> Self {
        Self {
            ladder: DEFAULT_LADDER.to_vec(),
            timing_runs: 5,
        }
    }
}

/// `100 · (1 − hcf / drf)`, zero when both are zero.
pub fn reduction_pct(hcf: f64, drf: f64) -> f64 {
    if drf == 0.0 {
        0.0
    } else {
        100.0 * (1.0 - hcf / drf)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReduction {
    pub stage: Level,
    pub hcf_flops: u64,
    pub drf_flops: u64,
    pub flops_reduction: f64,
    pub hcf_peak_buffer: u64,
    pub drf_peak_buffer: u64,
    pub peak_buffer_reduction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub flops: u64,
    pub bytes: u64,
    pub peak_buffer: u64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Reductions {
    pub flops: f64,
    pub bytes: f64,
    pub peak_buffer: f64,
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameworkComparison {
    pub source: Level,
    pub dest: Level,
    pub policy: String,
    pub hcf: RDCurve,
    pub drf: RDCurve,
    pub ssf: RDCurve,
    pub hcf_cost: CostTotals,
    pub drf_cost: CostTotals,
    pub reductions: Reductions,
    pub stages: Vec<StageReduction>,
    /// Op trace of the first image at the nominal step, for both chains.
    pub hcf_trace: CostReport,
    pub drf_trace: CostReport,
}

fn mean_point(points: &[RDPoint]) -> RDPoint {
    let n = points.len() as f64;
    RDPoint {
        bpp: points.iter().map(|p| p.bpp).sum::<f64>() / n,
        psnr: points.iter().map(|p| p.psnr).sum::<f64>() / n,
        msssim_db: points.iter().map(|p| p.msssim_db).sum::<f64>() / n,
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    if v.is_empty() {
        0.0
    } else if v.len() % 2 == 1 {
        v[v.len() / 2]
    } else {
        0.5 * (v[v.len() / 2 - 1] + v[v.len() / 2])
    }
}

fn timed<F: Fn() -> Result<StageResult>>(runs: usize, f: F) -> Result<(StageResult, f64)> {
    let first = f()?;
    if runs == 0 {
        let t = first.cost.wall_time;
        return Ok((first, t));
    }
    let times = (0..runs).map(|_| f().map(|r| r.cost.wall_time)).collect::<Result<Vec<_>>>()?;
    Ok((first, median(times)))
}

/// Mean RD point over `images` for each ladder multiplier.
pub fn rd_curve<F>(label: &str, images: &[ImagePlane], ladder: &[f64], run: F) -> Result<RDCurve>
where
    F: Fn(&ImagePlane, f64) -> Result<StageResult> + Sync,
{
    let points = ladder
        .iter()
        .map(|&mult| {
            let per_image = images.par_iter().map(|img| run(img, mult).map(|r| r.rd)).collect::<Result<Vec<_>>>()?;
            Ok(mean_point(&per_image))
        })
        .collect::<Result<Vec<_>>>()?;
    RDCurve::new(label, points)
}

/// RD curves of HCF, DRF and SSF at target level `d`, plus HCF-vs-DRF cost reductions at the nominal step.
pub fn compare_frameworks(
    family: &CodecFamily,
    bank: &ModuleBank,
    policy: &PolicyVector,
    images: &[ImagePlane],
    opts: &CompareOptions,
) -> Result<FrameworkComparison> {
    if images.is_empty() {
        return Err(Error::Data("comparison corpus is empty".into()));
    }
    let (s, d) = (policy.source(), policy.dest());
    let base = family.step(d)?;
    let hcf_at = |img: &ImagePlane, mult: f64| {
        let o = CascadeOptions {
            final_step: Some(base * mult),
            ..Default::default()
        };
        run_hcf(family, bank, policy, img, &o)
    };
    let drf_at = |img: &ImagePlane, mult: f64| run_drf(family, s, d, img, Some(base * mult));
    let ssf_at = |img: &ImagePlane, mult: f64| run_ssf(family, d, img, Some(base * mult));
    let hcf = rd_curve(Framework::Hcf.name(), images, &opts.ladder, hcf_at)?;
    let drf = rd_curve(Framework::Drf.name(), images, &opts.ladder, drf_at)?;
    let ssf = rd_curve(Framework::Ssf.name(), images, &opts.ladder, ssf_at)?;

    // timing is sequential so runs do not compete for cores
    let mut hcf_cost = CostTotals { flops: 0, bytes: 0, peak_buffer: 0, wall_time: 0.0 };
    let mut drf_cost = hcf_cost.clone();
    let mut hcf_stages: BTreeMap<Level, (u64, u64)> = BTreeMap::new();
    let mut drf_stages: BTreeMap<Level, (u64, u64)> = BTreeMap::new();
    let mut traces = None;
    for img in images {
        let (h, ht) = timed(opts.timing_runs, || hcf_at(img, 1.0))?;
        let (r, rt) = timed(opts.timing_runs, || drf_at(img, 1.0))?;
        for (totals, stages, report, time) in [(&mut hcf_cost, &mut hcf_stages, &h.cost, ht), (&mut drf_cost, &mut drf_stages, &r.cost, rt)] {
            totals.flops += report.total_flops;
            totals.bytes += report.total_bytes;
            totals.peak_buffer = totals.peak_buffer.max(report.peak_buffer);
            totals.wall_time += time;
            let peaks = report.stage_peak_buffer();
            for (stage, flops) in report.stage_flops() {
                let e = stages.entry(stage).or_insert((0, 0));
                e.0 += flops;
                e.1 = e.1.max(peaks[&stage]);
            }
        }
        if traces.is_none() {
            traces = Some((h.cost, r.cost));
        }
    }
    let stages = drf_stages
        .iter()
        .rev()
        .map(|(&stage, &(drf_flops, drf_peak))| {
            let (hcf_flops, hcf_peak) = hcf_stages.get(&stage).copied().unwrap_or((0, 0));
            StageReduction {
                stage,
                hcf_flops,
                drf_flops,
                flops_reduction: reduction_pct(hcf_flops as f64, drf_flops as f64),
                hcf_peak_buffer: hcf_peak,
                drf_peak_buffer: drf_peak,
                peak_buffer_reduction: reduction_pct(hcf_peak as f64, drf_peak as f64),
            }
        })
        .collect();
    let reductions = Reductions {
        flops: reduction_pct(hcf_cost.flops as f64, drf_cost.flops as f64),
        bytes: reduction_pct(hcf_cost.bytes as f64, drf_cost.bytes as f64),
        peak_buffer: reduction_pct(hcf_cost.peak_buffer as f64, drf_cost.peak_buffer as f64),
        wall_time: reduction_pct(hcf_cost.wall_time, drf_cost.wall_time),
    };
    let (hcf_trace, drf_trace) = traces.expect("corpus is nonempty");
    Ok(FrameworkComparison {
        source: s,
        dest: d,
        policy: policy.literal(),
        hcf,
        drf,
        ssf,
        hcf_cost,
        drf_cost,
        reductions,
        stages,
        hcf_trace,
        drf_trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cascade::run_cascade;
    use crate::codec::CodecConfig;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64, w: usize, h: usize) -> ImagePlane {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = (0..w * h)
            .map(|i| {
                let (x, y) = ((i % w) as f64, (i / w) as f64);
                (0.5 + 0.3 * (x / 9.0).sin() * (y / 7.0).cos() + 0.05 * rng.random::<f64>()).clamp(0.0, 1.0)
            })
            .collect();
        ImagePlane::new(w, h, 1, samples).unwrap()
    }

    fn setup() -> (CodecFamily, ModuleBank) {
        let img = image(1, 64, 64);
        let fam = CodecFamily::from_pca(&CodecConfig::default(), &patchify(&img, 8).unwrap().rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut bank = ModuleBank::new();
        for k in 2..=6 {
            for kind in [ModuleKind::Inter, ModuleKind::Intra] {
                let w = nalgebra::DMatrix::from_fn(16, 16, |i, j| if i == j { 0.95 } else { 0.01 * (rng.random::<f64>() - 0.5) });
                bank.insert(crate::cascade::TransformModule::new(kind, k, w, nalgebra::DVector::zeros(16)).unwrap());
            }
        }
        (fam, bank)
    }

    #[test]
    fn node_spans_follow_quantization_points() {
        let p = PolicyVector::parse("1001", 4).unwrap();
        assert_eq!(hcf_node_spans(&p), vec![vec![4], vec![3, 2, 1], vec![]]);
        let p = PolicyVector::parse("0101", 4).unwrap();
        assert_eq!(hcf_node_spans(&p), vec![vec![4, 3], vec![2, 1], vec![]]);
    }

    #[test]
    fn hcf_matches_cascade_and_has_one_link_per_quantization() {
        let (fam, bank) = setup();
        let img = image(3, 72, 56);
        for literal in ["1001", "0101", "0011", "1111"] {
            let p = PolicyVector::parse(literal, 4).unwrap();
            let r = run_hcf(&fam, &bank, &p, &img, &CascadeOptions::default()).unwrap();
            assert_eq!(r.cost.links.len(), p.n_q());
            assert_eq!(r.cost.nodes.len(), p.n_q() + 1);
            assert!(r.cost.is_conserved());
            let c = run_cascade(&fam, &bank, &p, &img, &CascadeOptions::default()).unwrap();
            assert_eq!(entropy::decode(&r.final_stream, &fam).unwrap(), c.latent);
            assert_eq!(r.reconstruction, fam.reconstruct(1, &c.latent).unwrap());
        }
        let p = PolicyVector::parse("1001", 4).unwrap();
        let r = run_hcf(&fam, &bank, &p, &img, &CascadeOptions::default()).unwrap();
        let node0: Vec<Op> = r.cost.op_trace.iter().filter(|o| o.node == 0).map(|o| o.op).collect();
        assert_eq!(node0, vec![Op::Patchify, Op::Analysis, Op::Quantize, Op::FitModel, Op::Encode]);
        let node1: Vec<Op> = r.cost.op_trace.iter().filter(|o| o.node == 1).map(|o| o.op).collect();
        assert_eq!(
            node1,
            vec![Op::Decode, Op::InterModule, Op::IntraModule, Op::IntraModule, Op::Quantize, Op::FitModel, Op::Encode]
        );
    }

    #[test]
    fn degenerate_chains_equal_ssf() {
        let (fam, bank) = setup();
        let img = image(4, 40, 40);
        let ssf = run_ssf(&fam, 3, &img, None).unwrap();
        let hcf = run_hcf(&fam, &bank, &PolicyVector::parse("1", 3).unwrap(), &img, &CascadeOptions::default()).unwrap();
        let drf = run_drf(&fam, 3, 3, &img, None).unwrap();
        assert_eq!(hcf.final_stream, ssf.final_stream);
        assert_eq!(drf.final_stream, ssf.final_stream);
        assert_eq!(hcf.cost.total_flops, ssf.cost.total_flops);
        assert_eq!(hcf.rd, ssf.rd);
    }

    #[test]
    fn drf_node_flops_match_analytic_sum() {
        let (fam, _) = setup();
        let img = image(5, 64, 48);
        let r = run_drf(&fam, 5, 2, &img, None).unwrap();
        assert_eq!(r.cost.links.len(), 4);
        assert!(r.cost.is_conserved());
        let n = 48;
        let coder = 2 * entropy::flops_code(n, 16) + entropy::flops_fit(n, 16) + fam.flops_quantize(n);
        let intermediate = fam.flops_synthesis(n) + fam.flops_analysis(n) + coder;
        for node in &r.cost.nodes[1..4] {
            assert_eq!(node.flops, intermediate);
        }
        assert_eq!(r.cost.nodes[0].flops, fam.flops_analysis(n) + coder - entropy::flops_code(n, 16));
        for (link, node) in r.cost.links.iter().zip(&r.cost.nodes) {
            assert_eq!(link.from, node.node);
        }
    }

    #[test]
    fn results_are_deterministic() {
        let (fam, bank) = setup();
        let img = image(6, 48, 48);
        let p = PolicyVector::parse("10001", 5).unwrap();
        let a = run_hcf(&fam, &bank, &p, &img, &CascadeOptions::default()).unwrap();
        let b = run_hcf(&fam, &bank, &p, &img, &CascadeOptions::default()).unwrap();
        assert_eq!(a.final_stream, b.final_stream);
        assert_eq!(a.cost.without_timing(), b.cost.without_timing());
        assert_eq!(a.rd, b.rd);
    }

    #[test]
    fn self_reduction_is_zero() {
        assert_eq!(reduction_pct(10.0, 10.0), 0.0);
        assert_eq!(reduction_pct(0.0, 0.0), 0.0);
        assert_eq!(reduction_pct(1.0, 4.0), 75.0);
    }
}
