use crate::config::Config;
use crate::output::{prepare_dir, read_raw_dir, write_json, write_raw, write_templates, Csv};
use anyhow::{anyhow, bail, Context, Result};
use divis::gabor::GaborParams;
use divis::metrics::{
    default_stride, linear_combination_index, optimize_texture, shift_invariance_index, InvarianceReport, TextureResult,
    WindowMask, RF_SIGMA_RATIO,
};
use divis::network::load_network;
use divis::phase::{circular_coverage, cluster_count, estimate_phase, largest_cluster, phase_histogram, tuning_curve};
use divis::prior::PriorModel;
use divis::synthesis::{default_lambdas, lambda_sweep, synthesize, DiversityMode, SweepCurve, SynthesisConfig, SynthesisResult};
use divis::units::*;
use divis::Tensor;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub struct Run {
    pub cfg: Config,
    pub out: PathBuf,
    pub force: bool,
    pub jobs: usize,
}

impl Run {
    fn begin(&self) -> Result<()> {
        if self.jobs == 0 {
            bail!("--jobs must be at least 1");
        }
        prepare_dir(&self.out, self.force)?;
        std::fs::write(self.out.join("config.ini"), self.cfg.render())?;
        Ok(())
    }

    fn display(&self) -> Result<(f64, f64)> {
        Ok((self.cfg.get("output.display_mean")?, self.cfg.get("output.display_gain")?))
    }
}

/// A unit together with the Gabor geometry its phases are read against.
pub struct BuiltUnit {
    pub name: String,
    pub model: UnitModel,
    pub gabor: Option<GaborParams>,
}

fn gabor_params(cfg: &Config) -> Result<GaborParams> {
    let d = GaborParams::default();
    let size = cfg.get_opt("unit.size")?.unwrap_or(d.size);
    Ok(GaborParams::centered(
        size,
        cfg.get_opt("unit.theta")?.unwrap_or(d.theta),
        cfg.get_opt("unit.frequency")?.unwrap_or(d.frequency),
        cfg.get_opt("unit.phase")?.unwrap_or(d.phase),
        cfg.get_opt("unit.sigma")?.unwrap_or(d.sigma),
    ))
}

pub fn build_unit(kind: &str, cfg: &Config) -> Result<BuiltUnit> {
    let built = |model: UnitModel, gabor| BuiltUnit { name: kind.to_string(), model, gabor };
    Ok(match kind {
        "simple" => {
            let p = gabor_params(cfg)?;
            built(Arc::new(SimpleCell::new(p)?), Some(p))
        }
        "energy" => {
            let p = gabor_params(cfg)?;
            built(Arc::new(EnergyCell::new(p)?), Some(p))
        }
        "hubel-wiesel" => {
            let d = HubelWieselParams::default();
            let p = HubelWieselParams {
                gabor: gabor_params(cfg)?,
                k: cfg.get_opt("unit.k")?.unwrap_or(d.k),
                jitter: cfg.get_opt("unit.jitter")?.unwrap_or(d.jitter),
                seed: cfg.get_opt("unit.pool_seed")?.unwrap_or(d.seed),
            };
            built(Arc::new(HubelWieselCell::new(p)?), Some(p.gabor))
        }
        "corner" => {
            let d = CornerParams::default();
            let size: usize = cfg.get_opt("unit.size")?.unwrap_or(d.size);
            let s = size as f64 / d.size as f64;
            let p = CornerParams {
                size,
                frequency: cfg.get_opt("unit.frequency")?.unwrap_or(d.frequency),
                sigma: cfg.get_opt("unit.sigma")?.unwrap_or(d.sigma),
                horizontal_center: (d.horizontal_center.0 * s, d.horizontal_center.1 * s),
                vertical_center: (d.vertical_center.0 * s, d.vertical_center.1 * s),
            };
            built(Arc::new(CornerToy::new(p)?), None)
        }
        "texture" => {
            let d = TextureParams::default();
            let p = TextureParams {
                rf: cfg.get_opt("unit.size")?.unwrap_or(d.rf),
                kernel: cfg.get_opt("unit.kernel")?.unwrap_or(d.kernel),
                frequency: cfg.get_opt("unit.frequency")?.unwrap_or(d.frequency),
                sigma: cfg.get_opt("unit.sigma")?.unwrap_or(d.sigma),
                gamma: cfg.get_opt("unit.gamma")?.unwrap_or(d.gamma),
                center_bias: d.center_bias,
            };
            let net = texture_network(&p)?;
            built(Arc::new(CnnUnit::new(Arc::new(net), net_last(&p), 0)?), None)
        }
        "network" => {
            let manifest: PathBuf = cfg.get_opt("unit.manifest")?.ok_or_else(|| anyhow!("unit.manifest is required for a network unit"))?;
            let weights: PathBuf = cfg.get_opt("unit.weights")?.ok_or_else(|| anyhow!("unit.weights is required for a network unit"))?;
            let net = load_network(&manifest, &weights).with_context(|| format!("loading {}", manifest.display()))?;
            let unit = CnnUnit::new(Arc::new(net), cfg.get("unit.layer")?, cfg.get("unit.channel")?)?;
            built(Arc::new(unit), None)
        }
        other => bail!("unknown unit kind {other:?} (expected simple, energy, hubel-wiesel, corner, texture or network)"),
    })
}

fn net_last(p: &TextureParams) -> usize {
    texture_architecture(p).layers.len() - 1
}

/// Synthesis settings for a unit kind. An unset threshold is 0.9 for
/// network units and 0.8 for toy cells.
pub fn synthesis_config(cfg: &Config, kind: &str) -> Result<(SynthesisConfig, PriorModel)> {
    let cnn = matches!(kind, "texture" | "network");
    let mode = cfg.raw("synthesis.mode");
    let prior = cfg.raw("synthesis.prior");
    let mut s = SynthesisConfig {
        n: cfg.get("synthesis.n")?,
        lambda: cfg.get("synthesis.lambda")?,
        alpha: cfg.get("synthesis.alpha")?,
        learning_rate: cfg.get("synthesis.learning_rate")?,
        max_steps: cfg.get("synthesis.max_steps")?,
        window: cfg.get("synthesis.window")?,
        tolerance: cfg.get("synthesis.tolerance")?,
        radius: cfg.get("synthesis.radius")?,
        threshold: cfg.get_opt("synthesis.threshold")?.unwrap_or(if cnn { 0.9 } else { 0.8 }),
        mode: DiversityMode::parse(mode).ok_or_else(|| anyhow!("unknown diversity mode {mode:?}"))?,
        precondition: cfg.get("synthesis.precondition")?,
        tangent_projection: cfg.get("synthesis.tangent_projection")?,
        seed: cfg.get("synthesis.seed")?,
    };
    if let Some(dir) = cfg.get_opt::<PathBuf>("synthesis.radius_patches")? {
        s.radius = half_mean_norm(&dir)?;
    }
    s.validate()?;
    Ok((s, PriorModel::parse(prior).ok_or_else(|| anyhow!("unknown prior {prior:?}"))?))
}

/// Half the mean norm of the raw patches in `dir`.
fn half_mean_norm(dir: &Path) -> Result<f64> {
    let patches = read_raw_dir(dir)?;
    Ok(0.5 * patches.iter().map(|(_, t)| t.norm()).sum::<f64>() / patches.len() as f64)
}

fn lambdas(cfg: &Config) -> Result<Vec<f64>> {
    if cfg.raw("sweep.lambdas") == "default" {
        return Ok(default_lambdas());
    }
    let list: Vec<f64> = cfg
        .list("sweep.lambdas")
        .iter()
        .map(|s| s.parse::<f64>().map_err(|e| anyhow!("sweep.lambdas: cannot parse {s:?}: {e}")))
        .collect::<Result<_>>()?;
    if list.is_empty() {
        bail!("sweep.lambdas is empty");
    }
    if let Some(l) = list.iter().find(|l| !(l.is_finite() && **l >= 0.0)) {
        bail!("sweep.lambdas: lambda must be a finite value >= 0, got {l}");
    }
    Ok(list)
}

#[derive(Serialize)]
struct SynthesisRecord<'a> {
    unit: &'a str,
    lambda: f64,
    mean_activation: f64,
    #[serde(flatten)]
    result: &'a SynthesisResult,
}

pub fn cmd_synthesize(run: &Run) -> Result<()> {
    let (cfg, prior) = synthesis_config(&run.cfg, run.cfg.raw("unit.kind"))?;
    let unit = build_unit(run.cfg.raw("unit.kind"), &run.cfg)?;
    run.begin()?;
    let res = synthesize(unit.model.as_ref(), prior, &cfg)?;
    let (mean, gain) = run.display()?;
    write_templates(&run.out, &res.images, mean, gain)?;
    let record = SynthesisRecord { unit: &unit.name, lambda: cfg.lambda, mean_activation: res.mean_activation(), result: &res };
    write_json(&run.out.join("result.json"), &record)
}

fn sweep_csv(sweep: &SweepCurve) -> Csv {
    let mut csv = Csv::new(&[
        "lambda",
        "mean_activation",
        "min_distance",
        "normalized_activation",
        "normalized_min_distance",
        "optimal",
    ]);
    for (i, (p, (na, nd))) in sweep.points.iter().zip(sweep.normalized()).enumerate() {
        csv.row([
            p.lambda.to_string(),
            p.mean_activation.to_string(),
            p.min_distance.to_string(),
            na.to_string(),
            nd.to_string(),
            u8::from(i == sweep.optimal_index).to_string(),
        ]);
    }
    csv
}

#[derive(Serialize)]
struct OptimalRecord<'a> {
    unit: &'a str,
    lambda: f64,
    index: usize,
    threshold: f64,
    mean_activation: f64,
    min_distance: f64,
    normalized_min_distance: f64,
}

fn optimal_record<'a>(unit: &'a str, sweep: &SweepCurve) -> OptimalRecord<'a> {
    let o = sweep.optimal();
    OptimalRecord {
        unit,
        lambda: o.lambda,
        index: sweep.optimal_index,
        threshold: sweep.threshold,
        mean_activation: o.mean_activation,
        min_distance: o.min_distance,
        normalized_min_distance: sweep.normalized()[sweep.optimal_index].1,
    }
}

fn run_sweep(run: &Run, unit: &BuiltUnit) -> Result<SweepCurve> {
    let (cfg, prior) = synthesis_config(&run.cfg, &unit.name)?;
    let sweep = lambda_sweep(unit.model.as_ref(), prior, &cfg, &lambdas(&run.cfg)?, run.cfg.get("sweep.repeats")?, run.jobs)?;
    Ok(sweep)
}

pub fn cmd_sweep(run: &Run) -> Result<()> {
    synthesis_config(&run.cfg, run.cfg.raw("unit.kind"))?;
    lambdas(&run.cfg)?;
    let unit = build_unit(run.cfg.raw("unit.kind"), &run.cfg)?;
    run.begin()?;
    let sweep = run_sweep(run, &unit)?;
    sweep_csv(&sweep).write(&run.out.join("sweep.csv"))?;
    write_json(&run.out.join("optimal.json"), &optimal_record(&unit.name, &sweep))?;
    let (mean, gain) = run.display()?;
    write_templates(&run.out.join("templates"), &sweep.optimal().runs[0].images, mean, gain)
}

/// Both indices for the templates of the first run at the optimal lambda.
fn indices(run: &Run, unit: &BuiltUnit, sweep: &SweepCurve) -> Result<(InvarianceReport, TextureResult)> {
    let (cfg, prior) = synthesis_config(&run.cfg, &unit.name)?;
    let model = unit.model.as_ref();
    let rf = model.receptive_field();
    let stride = run.cfg.get_opt("metrics.stride")?.unwrap_or_else(|| default_stride(rf));
    let mask = WindowMask::for_rf(rf, RF_SIGMA_RATIO);
    let templates = &sweep.optimal().runs[0].images;
    let tex = optimize_texture(model, prior, &cfg, stride, &mask)?;
    let si = shift_invariance_index(model, &tex.texture, templates, stride, &mask)?;
    let lc = linear_combination_index(model, templates)?;
    let report = InvarianceReport {
        unit: unit.name.clone(),
        shift_invariance_index: si,
        linear_combination_index: lc,
        optimal_lambda: sweep.optimal_lambda(),
        normalized_min_distance: sweep.normalized()[sweep.optimal_index].1,
    };
    Ok((report, tex))
}

struct MetricsTable {
    csv: Csv,
    failures: Vec<String>,
}

impl MetricsTable {
    fn new() -> Self {
        let csv = Csv::new(&[
            "unit",
            "shift_invariance_index",
            "linear_combination_index",
            "optimal_lambda",
            "normalized_min_distance",
            "status",
            "message",
        ]);
        MetricsTable { csv, failures: Vec::new() }
    }

    fn push(&mut self, name: &str, r: Result<InvarianceReport>) {
        match r {
            Ok(r) => self.csv.row([
                r.unit,
                r.shift_invariance_index.to_string(),
                r.linear_combination_index.to_string(),
                r.optimal_lambda.to_string(),
                r.normalized_min_distance.to_string(),
                "ok".into(),
                String::new(),
            ]),
            Err(e) => {
                let msg = format!("{e:#}");
                let nan = || "NaN".to_string();
                self.csv.row([name.to_string(), nan(), nan(), nan(), nan(), "error".into(), msg.clone()]);
                self.failures.push(format!("{name}: {msg}"));
            }
        }
    }

    fn finish(self, path: &Path) -> Result<()> {
        self.csv.write(path)?;
        if !self.failures.is_empty() {
            bail!("metrics failed for {}", self.failures.join("; "));
        }
        Ok(())
    }
}

pub fn cmd_metrics(run: &Run) -> Result<()> {
    lambdas(&run.cfg)?;
    let names = run.cfg.list("metrics.units");
    if names.is_empty() {
        bail!("metrics.units is empty");
    }
    for n in &names {
        synthesis_config(&run.cfg, n)?;
    }
    let units: Vec<BuiltUnit> = names.iter().map(|n| build_unit(n, &run.cfg)).collect::<Result<_>>()?;
    run.begin()?;
    let (mean, gain) = run.display()?;
    let mut table = MetricsTable::new();
    for unit in &units {
        let result = (|| {
            let sweep = run_sweep(run, unit)?;
            sweep_csv(&sweep).write(&run.out.join(format!("sweep_{}.csv", unit.name)))?;
            let (report, tex) = indices(run, unit, &sweep)?;
            write_raw(&run.out.join(format!("texture_{}.f64", unit.name)), &tex.texture)?;
            crate::output::write_image(&run.out.join(format!("texture_{}.pgm", unit.name)), &tex.texture, mean, gain)?;
            Ok(report)
        })();
        table.push(&unit.name, result);
    }
    table.finish(&run.out.join("metrics.csv"))
}

#[derive(Serialize)]
struct CoverageRecord {
    templates: usize,
    min_gap_deg: f64,
    resultant_length: f64,
    cluster_width_deg: f64,
    clusters: usize,
    largest_cluster: usize,
}

fn write_phases(run: &Run, dir: &Path, prefix: &str, named: &[(String, Tensor)], p: &GaborParams) -> Result<()> {
    let mut csv = Csv::new(&["template", "phase_deg", "confidence"]);
    let mut phases = Vec::new();
    for (name, t) in named {
        let e = estimate_phase(t, p).with_context(|| format!("template {name}"))?;
        csv.row([name.clone(), e.phase.to_string(), e.confidence.to_string()]);
        phases.push(e.phase);
    }
    csv.write(&dir.join(format!("{prefix}phases.csv")))?;
    let mut hist = Csv::new(&["bin_start_deg", "count"]);
    for (start, count) in phase_histogram(&phases, run.cfg.get("phases.bin_width")?)? {
        hist.row([start.to_string(), count.to_string()]);
    }
    hist.write(&dir.join(format!("{prefix}histogram.csv")))?;
    let width: f64 = run.cfg.get("phases.cluster_width")?;
    let cov = circular_coverage(&phases)?;
    let record = CoverageRecord {
        templates: phases.len(),
        min_gap_deg: cov.min_gap,
        resultant_length: cov.resultant_length,
        cluster_width_deg: width,
        clusters: cluster_count(&phases, width),
        largest_cluster: largest_cluster(&phases, width),
    };
    write_json(&dir.join(format!("{prefix}coverage.json")), &record)
}

pub fn cmd_phases(run: &Run) -> Result<()> {
    let dir: PathBuf = run.cfg.get_opt("phases.templates")?.ok_or_else(|| anyhow!("phases.templates (or --templates) is required"))?;
    let templates = read_raw_dir(&dir)?;
    let p = gabor_params(&run.cfg)?;
    p.validate()?;
    run.begin()?;
    write_phases(run, &run.out, "", &templates, &p)
}

fn write_tuning(run: &Run, names: &[String], path: &Path) -> Result<()> {
    let n: usize = run.cfg.get("tuning.phases")?;
    let norm: f64 = run.cfg.get("tuning.norm")?;
    let mut columns = Vec::new();
    for name in names {
        let unit = build_unit(name, &run.cfg)?;
        let p = unit.gabor.ok_or_else(|| anyhow!("unit {name} has no phase tuning curve"))?;
        columns.push(tuning_curve(unit.model.as_ref(), &p, n, norm)?);
    }
    let mut header = vec!["phase_deg".to_string()];
    header.extend(names.iter().map(|n| format!("{n}_activation")));
    let mut csv = Csv::new(&header.iter().map(String::as_str).collect::<Vec<_>>());
    for i in 0..n {
        let mut row = vec![columns[0][i].0.to_string()];
        row.extend(columns.iter().map(|c| c[i].1.to_string()));
        csv.row(row);
    }
    csv.write(path)
}

pub fn cmd_tuning(run: &Run) -> Result<()> {
    let names = run.cfg.list("tuning.units");
    if names.is_empty() {
        bail!("tuning.units is empty");
    }
    let n: usize = run.cfg.get("tuning.phases")?;
    if n < 4 {
        bail!("tuning.phases must be at least 4");
    }
    for name in &names {
        build_unit(name, &run.cfg)?;
    }
    run.begin()?;
    write_tuning(run, &names, &run.out.join("tuning.csv"))
}

#[derive(Serialize)]
struct DemoSummary<'a> {
    units: Vec<OptimalRecord<'a>>,
}

/// Sweep, templates at the optimal lambda, phase analysis and metrics for
/// each toy unit, plus the tuning curves.
pub fn cmd_demo(run: &Run) -> Result<()> {
    lambdas(&run.cfg)?;
    let names = run.cfg.list("demo.units");
    if names.is_empty() {
        bail!("demo.units is empty");
    }
    for n in &names {
        synthesis_config(&run.cfg, n)?;
    }
    let units: Vec<BuiltUnit> = names.iter().map(|n| build_unit(n, &run.cfg)).collect::<Result<_>>()?;
    run.begin()?;
    let (mean, gain) = run.display()?;
    let mut table = MetricsTable::new();
    let mut sweeps = Vec::new();
    for unit in &units {
        let sweep = run_sweep(run, unit)?;
        sweep_csv(&sweep).write(&run.out.join(format!("sweep_{}.csv", unit.name)))?;
        let dir = run.out.join(&unit.name);
        let templates = &sweep.optimal().runs[0].images;
        write_templates(&dir, templates, mean, gain)?;
        if let Some(p) = &unit.gabor {
            let named: Vec<(String, Tensor)> =
                templates.iter().enumerate().map(|(i, t)| (format!("template_{i:02}"), t.clone())).collect();
            write_phases(run, &dir, "", &named, p)?;
        }
        table.push(&unit.name, indices(run, unit, &sweep).map(|r| r.0));
        sweeps.push(sweep);
    }
    let tuned: Vec<String> = units.iter().filter(|u| u.gabor.is_some()).map(|u| u.name.clone()).collect();
    if !tuned.is_empty() {
        write_tuning(run, &tuned, &run.out.join("tuning.csv"))?;
    }
    let summary = DemoSummary { units: units.iter().zip(&sweeps).map(|(u, s)| optimal_record(&u.name, s)).collect() };
    write_json(&run.out.join("summary.json"), &summary)?;
    table.finish(&run.out.join("metrics.csv"))
}
