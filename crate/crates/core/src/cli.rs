//! Command-line front end.
//!
//! Exit codes: `0` certified at or above the threshold, `2` certified below
//! it (or threshold unreachable), `1` on any error.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::barrier::{audit_certificate, populate_region_betas, synthesize, CertificateReport, SynthesisOptions};
use crate::control::{apply_policy, run_algorithm1, ControlOptions, ControlPolicy, LpMode};
use crate::geometry::{partition_uniform, Hyperbox, Partition};
use crate::model::{load_problem, ProblemSpec};
use crate::relax::{bound_partition, envelopes_to_csv, BoundMode};
use crate::sim::{check_certificate_soundness, estimate_safety, simulate, ClosedLoop, SafetyEstimate, SoundnessVerdict};
use crate::sos::{InteriorPoint, IpmSettings, Tolerances};

pub const REPORT_SCHEMA_VERSION: u32 = 1;
pub const EXIT_CERTIFIED: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_BELOW_THRESHOLD: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "nnbarrier", version, about = "Stochastic barrier certificates and controllers for neural-network dynamic models")]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize, PartialEq)]
pub struct GlobalArgs {
    /// Seed for every random choice (multi-start, Monte Carlo, audits).
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap (0 = all cores).
    #[arg(long, global = true, default_value_t = 0)]
    pub threads: usize,
    /// Relaxation used for every region.
    #[arg(long, global = true, default_value = "linear")]
    pub bounds: BoundMode,
    /// Barrier degree override (even, >= 2).
    #[arg(long, global = true)]
    pub degree: Option<u32>,
    /// Tolerance override `key=value`; keys: residual, eigenvalue, sample, ipm.
    #[arg(long = "tolerance", global = true, value_name = "KEY=VALUE")]
    pub tolerances: Vec<String>,
    /// Output directory for reports, tables and plots.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a barrier certificate for the uncontrolled system.
    Certify {
        spec: PathBuf,
        /// Partition widths override, comma separated.
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<f64>>,
        /// Sample-based audit of the certificate conditions (0 = skip).
        #[arg(long, default_value_t = 0)]
        audit_samples: usize,
        /// Monte-Carlo soundness check trajectories (0 = skip).
        #[arg(long, default_value_t = 0)]
        mc_samples: usize,
    },
    /// Run the controller synthesis loop.
    Synthesize {
        spec: PathBuf,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<f64>>,
        #[arg(long, default_value = "existential")]
        lp_mode: LpMode,
        /// Report only the literal loop bound, without closed-loop re-certification.
        #[arg(long)]
        no_closed_loop: bool,
        #[arg(long, default_value_t = 0)]
        audit_samples: usize,
        #[arg(long, default_value_t = 0)]
        mc_samples: usize,
    },
    /// Monte-Carlo estimate of the probability of staying safe.
    Simulate {
        spec: PathBuf,
        /// Policy CSV from `synthesize`; its partition comes from the spec widths.
        #[arg(long)]
        policy: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<f64>>,
        #[arg(long, default_value_t = 10_000)]
        samples: usize,
        #[arg(long, default_value_t = 3)]
        init_grid: usize,
        /// Also write one trajectory from the center of the initial set.
        #[arg(long)]
        trajectory: bool,
    },
    /// Per-region β table and, for 2-D problems, an SVG heatmap.
    Betamap { report: PathBuf },
    /// Per-region relaxation bounds as CSV.
    Bounds {
        spec: PathBuf,
        #[arg(long, value_delimiter = ',')]
        widths: Option<Vec<f64>>,
    },
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Message(String),
    #[error("cannot write {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

fn msg(e: impl std::fmt::Display) -> CliError {
    CliError::Message(e.to_string())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RegionBeta {
    pub region: usize,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub beta_uncontrolled: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub control: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub command: String,
    pub spec_path: String,
    pub spec_sha256: String,
    pub mode: BoundMode,
    pub regions: usize,
    pub dim: usize,
    pub threshold: f64,
    pub horizon: usize,
    pub degree: u32,
    pub eta: f64,
    pub beta: f64,
    pub p_s: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_s_before: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_s_literal: Option<f64>,
    pub per_region: Vec<RegionBeta>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub controlled_fraction: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub iterations: Option<usize>,
    pub certificate: CertificateReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub audit: Option<crate::barrier::AuditReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub estimate: Option<SafetyEstimate>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub soundness: Option<SoundnessVerdict>,
    pub timings: BTreeMap<String, f64>,
    pub seed: u64,
    pub flags: GlobalArgs,
    pub version: String,
}

impl RunReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Solver configuration derived from the global flags.
#[derive(Debug, Clone)]
pub struct Settings {
    pub tolerances: Tolerances,
    pub ipm: IpmSettings,
}

pub fn parse_tolerances(overrides: &[String]) -> Result<Settings, CliError> {
    let mut tolerances = Tolerances::default();
    let mut ipm = IpmSettings::default();
    for item in overrides {
        let (key, value) = item
            .split_once('=')
            .ok_or_else(|| msg(format!("tolerance override `{item}` must look like key=value")))?;
        let v: f64 = value.trim().parse().map_err(|_| msg(format!("tolerance `{key}`: `{value}` is not a number")))?;
        match key.trim() {
            "residual" => tolerances.residual = v,
            "eigenvalue" => tolerances.eigenvalue = v,
            "sample" => tolerances.sample = v,
            "ipm" => ipm.tolerance = v,
            other => return Err(msg(format!("unknown tolerance `{other}` (residual|eigenvalue|sample|ipm)"))),
        }
    }
    Ok(Settings { tolerances, ipm })
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn write(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|source| CliError::Io { path: path.display().to_string(), source })
}

struct Loaded {
    spec: ProblemSpec,
    path: String,
    hash: String,
}

fn load(path: &Path, global: &GlobalArgs) -> Result<Loaded, CliError> {
    let bytes = fs::read(path).map_err(|e| msg(format!("cannot read {}: {e}", path.display())))?;
    let mut spec = load_problem(path).map_err(msg)?;
    if let Some(d) = global.degree {
        spec.barrier_degree = d;
    }
    Ok(Loaded { spec, path: path.display().to_string(), hash: sha256_hex(&bytes) })
}

fn partition_for(spec: &ProblemSpec, widths: &Option<Vec<f64>>) -> Result<Partition, CliError> {
    let w = widths.clone().unwrap_or_else(|| spec.partition_widths.clone());
    partition_uniform(&spec.safe_set, &w).map_err(msg)
}

fn per_region_table(partition: &Partition, betas: &[f64]) -> Vec<RegionBeta> {
    partition
        .regions
        .iter()
        .enumerate()
        .map(|(q, r)| RegionBeta {
            region: q,
            lower: r.lower.clone(),
            upper: r.upper.clone(),
            beta: betas.get(q).copied().unwrap_or(f64::NAN),
            ..RegionBeta::default()
        })
        .collect()
}

fn ensure_out(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|source| CliError::Io { path: dir.display().to_string(), source })
}

fn exit_for(p_s: f64, threshold: f64) -> i32 {
    if p_s >= threshold {
        EXIT_CERTIFIED
    } else {
        EXIT_BELOW_THRESHOLD
    }
}

fn synthesis_options(spec: &ProblemSpec, settings: &Settings) -> SynthesisOptions {
    let mut o = SynthesisOptions::from_spec(spec);
    o.tolerances = settings.tolerances;
    o
}

fn cmd_certify(
    global: &GlobalArgs,
    spec_path: &Path,
    widths: &Option<Vec<f64>>,
    audit_samples: usize,
    mc_samples: usize,
) -> Result<(RunReport, i32), CliError> {
    let settings = parse_tolerances(&global.tolerances)?;
    let loaded = load(spec_path, global)?;
    let spec = &loaded.spec;
    let partition = partition_for(spec, widths)?;
    let backend = InteriorPoint::new(settings.ipm.clone());
    let options = synthesis_options(spec, &settings);
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let bounds = bound_partition(&spec.network, &partition, global.bounds);
    timings.insert("bounds".into(), t.elapsed().as_secs_f64());

    let t = Instant::now();
    let mut cert = synthesize(spec, &partition, &bounds, None, &options, &backend).map_err(msg)?;
    populate_region_betas(&mut cert, &bounds, &spec.noise.variances, &options, &backend).map_err(msg)?;
    timings.insert("sos".into(), t.elapsed().as_secs_f64());

    let audit = if audit_samples > 0 {
        let t = Instant::now();
        let a = audit_certificate(&cert, spec, &bounds, audit_samples, 1000, options.tolerances.sample, global.seed)
            .map_err(msg)?;
        timings.insert("audit".into(), t.elapsed().as_secs_f64());
        Some(a)
    } else {
        None
    };
    let (estimate, soundness) = if mc_samples > 0 {
        let t = Instant::now();
        let e = estimate_safety(spec, None, mc_samples, 3, global.seed).map_err(msg)?;
        timings.insert("mc".into(), t.elapsed().as_secs_f64());
        let v = check_certificate_soundness(cert.p_s, &e);
        (Some(e), Some(v))
    } else {
        (None, None)
    };

    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "certify".into(),
        spec_path: loaded.path.clone(),
        spec_sha256: loaded.hash.clone(),
        mode: global.bounds,
        regions: partition.len(),
        dim: spec.dim(),
        threshold: spec.threshold,
        horizon: spec.horizon,
        degree: cert.degree,
        eta: cert.eta,
        beta: cert.beta,
        p_s: cert.p_s,
        p_s_before: None,
        p_s_literal: None,
        per_region: per_region_table(&partition, &cert.per_region_beta),
        controlled_fraction: None,
        iterations: None,
        certificate: cert.to_report(),
        audit,
        estimate,
        soundness,
        timings,
        seed: global.seed,
        flags: global.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    ensure_out(&global.out)?;
    write(&global.out.join("report.json"), &report.to_json())?;
    write(&global.out.join("betas.csv"), &betas_csv(&report))?;
    let code = exit_for(report.p_s, spec.threshold);
    Ok((report, code))
}

#[allow(clippy::too_many_arguments)]
fn cmd_synthesize(
    global: &GlobalArgs,
    spec_path: &Path,
    widths: &Option<Vec<f64>>,
    lp_mode: LpMode,
    no_closed_loop: bool,
    audit_samples: usize,
    mc_samples: usize,
) -> Result<(RunReport, i32), CliError> {
    let settings = parse_tolerances(&global.tolerances)?;
    let loaded = load(spec_path, global)?;
    let spec = &loaded.spec;
    let control = spec
        .control
        .as_ref()
        .ok_or_else(|| msg("control structure required: the problem has no `control` section"))?;
    let partition = partition_for(spec, widths)?;
    let backend = InteriorPoint::new(settings.ipm.clone());
    let mut timings = BTreeMap::new();

    let t = Instant::now();
    let bounds = bound_partition(&spec.network, &partition, global.bounds);
    timings.insert("bounds".into(), t.elapsed().as_secs_f64());

    let mut options = ControlOptions::from_spec(spec);
    options.synthesis.tolerances = settings.tolerances;
    options.lp_mode = lp_mode;
    options.seed = global.seed;
    options.closed_loop_recertify = !no_closed_loop;
    let result = run_algorithm1(spec, &partition, &bounds, &options, &backend).map_err(msg)?;
    timings.insert("sos".into(), result.timings.sos_s);
    timings.insert("lp".into(), result.timings.lp_s);

    let closed = apply_policy(&bounds, &result.policy, control);
    let audit = if audit_samples > 0 {
        let t = Instant::now();
        let a = audit_certificate(
            &result.certificate,
            spec,
            &closed,
            audit_samples,
            1000,
            settings.tolerances.sample,
            global.seed,
        )
        .map_err(msg)?;
        timings.insert("audit".into(), t.elapsed().as_secs_f64());
        Some(a)
    } else {
        None
    };
    let (estimate, soundness) = if mc_samples > 0 {
        let t = Instant::now();
        let cl = ClosedLoop { policy: &result.policy, partition: &partition };
        let e = estimate_safety(spec, Some(cl), mc_samples, 3, global.seed).map_err(msg)?;
        timings.insert("mc".into(), t.elapsed().as_secs_f64());
        let v = check_certificate_soundness(result.p_s_after, &e);
        (Some(e), Some(v))
    } else {
        (None, None)
    };

    let mut per_region = per_region_table(&partition, &result.betas_after);
    for row in per_region.iter_mut() {
        row.beta_uncontrolled = result.betas_before.get(row.region).copied();
        row.control = result.policy.get(row.region).map(<[f64]>::to_vec);
    }
    let summary = result.summary(&partition);
    let cert = &result.certificate;
    let report = RunReport {
        schema_version: REPORT_SCHEMA_VERSION,
        command: "synthesize".into(),
        spec_path: loaded.path.clone(),
        spec_sha256: loaded.hash.clone(),
        mode: global.bounds,
        regions: partition.len(),
        dim: spec.dim(),
        threshold: spec.threshold,
        horizon: spec.horizon,
        degree: cert.degree,
        eta: cert.eta,
        beta: cert.beta,
        p_s: result.p_s_after,
        p_s_before: Some(result.p_s_before),
        p_s_literal: Some(result.p_s_literal),
        per_region,
        controlled_fraction: Some(summary.controlled_fraction),
        iterations: Some(result.iterations),
        certificate: cert.to_report(),
        audit,
        estimate,
        soundness,
        timings,
        seed: global.seed,
        flags: global.clone(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    ensure_out(&global.out)?;
    write(&global.out.join("report.json"), &report.to_json())?;
    write(&global.out.join("betas.csv"), &betas_csv(&report))?;
    write(&global.out.join("policy.csv"), &result.policy.to_csv(partition.len(), control.dim()))?;
    write(
        &global.out.join("policy_summary.json"),
        &serde_json::to_string_pretty(&summary).expect("summary serializes"),
    )?;
    let code = exit_for(report.p_s, spec.threshold);
    Ok((report, code))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulateReport {
    pub spec_path: String,
    pub spec_sha256: String,
    pub policy: Option<String>,
    pub estimate: SafetyEstimate,
    pub seconds: f64,
    pub version: String,
}

fn cmd_simulate(
    global: &GlobalArgs,
    spec_path: &Path,
    policy_path: &Option<PathBuf>,
    widths: &Option<Vec<f64>>,
    samples: usize,
    init_grid: usize,
    trajectory: bool,
) -> Result<(SimulateReport, i32), CliError> {
    let loaded = load(spec_path, global)?;
    let spec = &loaded.spec;
    let partition = partition_for(spec, widths)?;
    let policy = match policy_path {
        Some(p) => {
            if spec.control.is_none() {
                return Err(msg("a policy needs a problem with a `control` section"));
            }
            let text = fs::read_to_string(p).map_err(|e| msg(format!("cannot read {}: {e}", p.display())))?;
            Some(ControlPolicy::from_csv(&text).map_err(msg)?)
        }
        None => None,
    };
    let cl = policy.as_ref().map(|p| ClosedLoop { policy: p, partition: &partition });
    let t = Instant::now();
    let estimate = estimate_safety(spec, cl, samples, init_grid, global.seed).map_err(msg)?;
    let report = SimulateReport {
        spec_path: loaded.path.clone(),
        spec_sha256: loaded.hash.clone(),
        policy: policy_path.as_ref().map(|p| p.display().to_string()),
        estimate,
        seconds: t.elapsed().as_secs_f64(),
        version: env!("CARGO_PKG_VERSION").into(),
    };
    ensure_out(&global.out)?;
    write(&global.out.join("simulation.json"), &serde_json::to_string_pretty(&report).expect("serializes"))?;
    if trajectory {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(global.seed);
        let traj = simulate(spec, cl, &spec.initial_set.center(), &mut rng).map_err(msg)?;
        write(&global.out.join("trajectory.csv"), &traj.to_csv(spec))?;
    }
    Ok((report, EXIT_CERTIFIED))
}

pub fn betas_csv(report: &RunReport) -> String {
    let n = report.dim;
    let mut out = String::from("region_id");
    (1..=n).for_each(|i| out.push_str(&format!(",l_{i}")));
    (1..=n).for_each(|i| out.push_str(&format!(",u_{i}")));
    out.push_str(",beta");
    let before = report.per_region.iter().any(|r| r.beta_uncontrolled.is_some());
    if before {
        out.push_str(",beta_uncontrolled,controlled");
    }
    out.push('\n');
    for r in &report.per_region {
        out.push_str(&r.region.to_string());
        for v in r.lower.iter().chain(&r.upper) {
            out.push_str(&format!(",{v:?}"));
        }
        out.push_str(&format!(",{:?}", r.beta));
        if before {
            out.push_str(&format!(
                ",{:?},{}",
                r.beta_uncontrolled.unwrap_or(f64::NAN),
                u8::from(r.control.is_some())
            ));
        }
        out.push('\n');
    }
    out
}

/// Grayscale heatmap over a 2-D partition: darker cells have larger β_q.
/// `scale_max` fixes the value mapped to black (defaults to the maximum).
pub fn betamap_svg(cells: &[(Hyperbox, f64)], title: &str, scale_max: Option<f64>) -> Result<String, String> {
    if cells.iter().any(|(b, _)| b.dim() != 2) {
        return Err("heatmaps need a 2-D partition".into());
    }
    let (mut x0, mut y0, mut x1, mut y1) = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
    for (b, _) in cells {
        x0 = x0.min(b.lower[0]);
        y0 = y0.min(b.lower[1]);
        x1 = x1.max(b.upper[0]);
        y1 = y1.max(b.upper[1]);
    }
    let max = scale_max.unwrap_or_else(|| cells.iter().map(|c| c.1).fold(0.0, f64::max));
    let size = 400.0;
    let margin = 40.0;
    let sx = size / (x1 - x0).max(1e-300);
    let sy = size / (y1 - y0).max(1e-300);
    let mut svg = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">\n",
        w = size + 2.0 * margin,
        h = size + 2.5 * margin
    );
    svg.push_str(&format!(
        "<text x=\"{margin}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"14\">{title} (max β = {max:.3e})</text>\n",
        margin * 0.6
    ));
    for (q, (b, beta)) in cells.iter().enumerate() {
        let t = if max > 0.0 { (beta / max).clamp(0.0, 1.0) } else { 0.0 };
        let g = (255.0 * (1.0 - t)).round() as u8;
        let x = margin + (b.lower[0] - x0) * sx;
        let y = margin + (y1 - b.upper[1]) * sy;
        svg.push_str(&format!(
            "<rect id=\"q{q}\" x=\"{x:.3}\" y=\"{y:.3}\" width=\"{:.3}\" height=\"{:.3}\" fill=\"rgb({g},{g},{g})\" stroke=\"#888\" stroke-width=\"0.5\"><title>q{q}: {beta:.4e}</title></rect>\n",
            (b.upper[0] - b.lower[0]) * sx,
            (b.upper[1] - b.lower[1]) * sy
        ));
    }
    svg.push_str(&format!(
        "<text x=\"{margin}\" y=\"{}\" font-family=\"sans-serif\" font-size=\"12\">x1 ∈ [{x0}, {x1}], x2 ∈ [{y0}, {y1}]</text>\n",
        size + 2.0 * margin
    ));
    svg.push_str("</svg>\n");
    Ok(svg)
}

/// Files written by `betamap`.
#[derive(Debug, Clone, PartialEq)]
pub struct BetamapOutput {
    pub csv: PathBuf,
    pub svgs: Vec<PathBuf>,
    pub notice: Option<String>,
}

pub fn cmd_betamap(report_path: &Path, out: &Path) -> Result<BetamapOutput, CliError> {
    let text = fs::read_to_string(report_path).map_err(|e| msg(format!("cannot read {}: {e}", report_path.display())))?;
    let report = RunReport::from_json(&text).map_err(|e| msg(format!("invalid report: {e}")))?;
    ensure_out(out)?;
    let csv = out.join("betamap.csv");
    write(&csv, &betas_csv(&report))?;
    if report.dim != 2 {
        let notice = format!("heatmap skipped: partition is {}-D, only 2-D is supported (CSV written)", report.dim);
        return Ok(BetamapOutput { csv, svgs: Vec::new(), notice: Some(notice) });
    }
    let cell = |r: &RegionBeta, v: f64| (Hyperbox { lower: r.lower.clone(), upper: r.upper.clone() }, v);
    let mut svgs = Vec::new();
    let before: Option<Vec<_>> = report
        .per_region
        .iter()
        .map(|r| r.beta_uncontrolled.map(|v| cell(r, v)))
        .collect();
    let after: Vec<_> = report.per_region.iter().map(|r| cell(r, r.beta)).collect();
    // Before/after maps share one gray scale so they are comparable.
    let scale = before
        .as_ref()
        .map(|b| b.iter().chain(&after).map(|c| c.1).fold(0.0, f64::max));
    if let Some(b) = &before {
        let path = out.join("betamap_uncontrolled.svg");
        write(&path, &betamap_svg(b, "β_q without control", scale).map_err(msg)?)?;
        svgs.push(path);
    }
    let path = out.join("betamap.svg");
    write(&path, &betamap_svg(&after, "β_q", scale).map_err(msg)?)?;
    svgs.push(path);
    Ok(BetamapOutput { csv, svgs, notice: None })
}

fn cmd_bounds(global: &GlobalArgs, spec_path: &Path, widths: &Option<Vec<f64>>) -> Result<PathBuf, CliError> {
    let loaded = load(spec_path, global)?;
    let partition = partition_for(&loaded.spec, widths)?;
    let bounds = bound_partition(&loaded.spec.network, &partition, global.bounds);
    let envs: Vec<_> = bounds.iter().map(|b| b.envelope.clone()).collect();
    ensure_out(&global.out)?;
    let path = global.out.join("bounds.csv");
    write(&path, &envelopes_to_csv(&envs, global.bounds))?;
    Ok(path)
}

fn print_report(r: &RunReport) {
    println!(
        "{}: |Q| = {}, mode {}, η = {:.6}, β = {:.6e}, P_s = {:.6} (threshold {})",
        r.command, r.regions, r.mode, r.eta, r.beta, r.p_s, r.threshold
    );
    if let (Some(b), Some(f)) = (r.p_s_before, r.controlled_fraction) {
        println!("  P_s before control {b:.6}, controlled fraction {f:.3}, iterations {}", r.iterations.unwrap_or(0));
        if let Some(l) = r.p_s_literal.filter(|l| *l != r.p_s) {
            println!("  P_s from the design barrier with shifted β_q {l:.6}; closed-loop re-certification raised it");
        }
    }
    if let Some(a) = &r.audit {
        println!("  audit: {} samples, {} violations", a.samples, a.violations);
    }
    if let (Some(e), Some(v)) = (&r.estimate, &r.soundness) {
        println!(
            "  monte carlo: p̂ = {:.5} ± {:.5}, worst initial point {:.5}, soundness {} (margin {:.4})",
            e.p_hat,
            e.ci_half_width,
            e.per_init_min,
            if v.pass { "pass" } else { "FAIL" },
            v.margin
        );
    }
}

fn init_runtime(global: &GlobalArgs) {
    let level = match global.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if global.threads > 0 {
        let _ = rayon::ThreadPoolBuilder::new().num_threads(global.threads).build_global();
    }
}

/// Runs a parsed command and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    init_runtime(&cli.global);
    let g = &cli.global;
    let outcome: Result<i32, CliError> = match &cli.command {
        Command::Certify { spec, widths, audit_samples, mc_samples } => {
            cmd_certify(g, spec, widths, *audit_samples, *mc_samples).map(|(r, code)| {
                print_report(&r);
                code
            })
        }
        Command::Synthesize { spec, widths, lp_mode, no_closed_loop, audit_samples, mc_samples } => {
            cmd_synthesize(g, spec, widths, *lp_mode, *no_closed_loop, *audit_samples, *mc_samples).map(|(r, code)| {
                print_report(&r);
                code
            })
        }
        Command::Simulate { spec, policy, widths, samples, init_grid, trajectory } => {
            cmd_simulate(g, spec, policy, widths, *samples, *init_grid, *trajectory).map(|(r, code)| {
                let e = &r.estimate;
                println!(
                    "simulate: p̂ = {:.5} ± {:.5} (99% Wilson), worst initial point {:.5}, {} samples",
                    e.p_hat, e.ci_half_width, e.per_init_min, e.samples
                );
                code
            })
        }
        Command::Betamap { report } => cmd_betamap(report, &g.out).map(|o| {
            if let Some(n) = &o.notice {
                eprintln!("{n}");
            }
            println!("betamap: wrote {}", o.csv.display());
            for s in &o.svgs {
                println!("betamap: wrote {}", s.display());
            }
            EXIT_CERTIFIED
        }),
        Command::Bounds { spec, widths } => cmd_bounds(g, spec, widths).map(|p| {
            println!("bounds: wrote {}", p.display());
            EXIT_CERTIFIED
        }),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            EXIT_ERROR
        }
    }
}

/// Entry point for argument vectors (including the program name).
pub fn run_from_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(cli),
        Err(e) => {
            let _ = e.print();
            if e.use_stderr() {
                EXIT_ERROR
            } else {
                EXIT_CERTIFIED
            }
        }
    }
}
