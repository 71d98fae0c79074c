use crate::config::{self, Channel, Points, ProbeKind};
use crate::manifest::{self, Manifest};
use crate::{out_dir, CliError, CliResult, CompareArgs, ReconstructArgs, ReportArgs, SimulateArgs};
use crate::{EXIT_CONFIG, EXIT_INCOMPATIBLE, EXIT_METHOD, EXIT_TAIL};
use nalgebra::DMatrix;
use num_complex::Complex64 as C;
use qstate_core::detection::*;
use qstate_core::inference::{max_entropy_estimate, Regularization};
use qstate_core::io::*;
use qstate_core::patterns::{eta_compensated_table, pattern_function_table, PatternTable, DEFAULT_KERNEL_TOLERANCE, DEFAULT_N_SUM};
use qstate_core::states::*;
use qstate_core::tomography::*;
use qstate_core::Error;
use serde_json::{json, Value};
use std::f64::consts::PI;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

fn method_err(e: Error) -> CliError {
    let msg = match &e {
        Error::PhaseDeficit { got, required } => format!("{e} (this estimate requires {required} distinct phases, dataset has {got})"),
        _ => e.to_string(),
    };
    CliError::new(EXIT_METHOD, msg)
}

fn io_fail(e: Error) -> CliError {
    CliError::new(1, e.to_string())
}

fn incompatible(msg: impl Into<String>) -> CliError {
    CliError::new(EXIT_INCOMPATIBLE, msg)
}

fn write_manifest(out: &Path, name: &str, m: Manifest) -> CliResult<()> {
    write_json(&out.join(name), &m.to_json()).map_err(io_fail)
}

// ---------------------------------------------------------------- simulate

fn alphas_for(points: &Points, override_count: Option<usize>) -> CliResult<Vec<C>> {
    let bad = |m: &str| CliError::new(EXIT_CONFIG, format!("channel.points: {m}"));
    match points {
        Points::Circle { radius, count } => {
            let n = override_count.unwrap_or(*count);
            if n == 0 || !(*radius >= 0.0) {
                return Err(bad("circle needs count >= 1 and radius >= 0"));
            }
            Ok(circle_points(*radius, n))
        }
        Points::Grid { half_width, n } => {
            if *n < 2 || !(*half_width > 0.0) {
                return Err(bad("grid needs n >= 2 and half_width > 0"));
            }
            let axis: Vec<f64> = (0..*n).map(|i| -half_width + 2.0 * half_width * i as f64 / (*n - 1) as f64).collect();
            Ok(axis.iter().flat_map(|&re| axis.iter().map(move |&im| C::new(re, im))).collect())
        }
        Points::List { alphas } => {
            if alphas.is_empty() {
                return Err(bad("empty alpha list"));
            }
            Ok(alphas.iter().map(|a| C::new(a[0], a[1])).collect())
        }
    }
}

pub fn simulate(a: &SimulateArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let (mut cfg, raw) = config::load(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    let rho = cfg.state.build().map_err(|e| match e {
        Error::TailTooHeavy(_) => CliError::new(EXIT_TAIL, format!("state: {e}")),
        _ => CliError::new(EXIT_CONFIG, format!("state: {e}")),
    })?;
    let cfg_err = |e: Error| CliError::new(EXIT_CONFIG, format!("channel: {e}"));
    if let Channel::Homodyne { eta, .. } | Channel::Displaced { eta, .. } = &cfg.channel {
        check_eta(*eta).map_err(|e| CliError::new(EXIT_CONFIG, format!("channel.eta: {e}")))?;
    }
    let out = out_dir(&a.out);
    let truth = out.join("truth.json");
    write_json(&truth, &density_to_json(&rho)).map_err(io_fail)?;
    let mut outputs: Vec<PathBuf> = vec![truth];
    match &cfg.channel {
        Channel::Homodyne { phases, samples_per_phase, eta } => {
            let n = a.phases.unwrap_or(*phases);
            if n == 0 || *samples_per_phase == 0 {
                return Err(CliError::new(EXIT_CONFIG, "channel: phases and samples_per_phase must be >= 1"));
            }
            let ds = sample_homodyne(&rho, &equidistant_phases(n), *samples_per_phase, *eta, cfg.seed).map_err(cfg_err)?;
            let path = out.join("homodyne.csv");
            write_homodyne(&ds, &path).map_err(io_fail)?;
            outputs.push(sidecar_path(&path));
            outputs.push(path);
        }
        Channel::Displaced { points, eta, shots, chopping_n } => {
            let alphas = alphas_for(points, a.phases)?;
            let ds = simulate_displaced_counts(&rho, &alphas, *eta, *shots, *chopping_n, cfg.seed).map_err(cfg_err)?;
            let path = out.join("counts.csv");
            write_counts(&ds, &path).map_err(io_fail)?;
            outputs.push(sidecar_path(&path));
            outputs.push(path);
        }
        Channel::Probe { signal, omega_l, k, eta_ld, t_max, n_times, psi, phase, displacement } => {
            if *n_times < 2 || !(*t_max > 0.0) {
                return Err(CliError::new(EXIT_CONFIG, "channel: probe needs n_times >= 2 and t_max > 0"));
            }
            let mut pc = ProbeConfig::new(*omega_l, *k, *eta_ld, ProbeConfig::uniform_times(*t_max, *n_times));
            pc.displacement = displacement.map(|d| C::new(d[0], d[1]));
            pc.phase = *phase;
            let signals = match signal {
                ProbeKind::Inversion => vec![simulate_jc_inversion(&rho, &pc).map_err(cfg_err)?],
                ProbeKind::PmDifference => {
                    pc.preparation = Preparation::Coherent { psi: *psi };
                    vec![simulate_pm_difference(&rho, &pc).map_err(cfg_err)?]
                }
                ProbeKind::Quadrature => {
                    let (re, im) = simulate_quadrature_probe(&rho, &pc).map_err(cfg_err)?;
                    vec![re, im]
                }
            };
            let extra = json!({"phase": json_f64(*phase), "displacement": displacement.map(|d| vec![json_f64(d[0]), json_f64(d[1])])});
            let path = out.join("probe.csv");
            write_probe(&signals, Some(extra), &path).map_err(io_fail)?;
            outputs.push(sidecar_path(&path));
            outputs.push(path);
        }
    }
    outputs.sort();
    let m = Manifest {
        argv,
        config_digest: Some(manifest::digest(&raw)),
        inputs: vec![a.config.as_path()],
        outputs: outputs.iter().map(|p| p.as_path()).collect(),
        seed: Some(cfg.seed),
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out, "manifest_simulate.json", m)?;
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- datasets

enum Dataset {
    Homodyne(HomodyneDataset),
    Counts(DisplacedCountDataset),
    Probe(Vec<ProbeSignal>),
}

impl Dataset {
    fn kind(&self) -> &'static str {
        match self {
            Dataset::Homodyne(_) => "homodyne",
            Dataset::Counts(_) => "displaced_counts",
            Dataset::Probe(_) => "probe",
        }
    }
}

fn load_dataset(path: &Path) -> CliResult<Dataset> {
    let text = std::fs::read_to_string(path).map_err(|e| incompatible(format!("cannot read dataset {}: {e}", path.display())))?;
    let header = text.lines().next().unwrap_or("").trim();
    let bad = |e: Error| incompatible(e.to_string());
    match header {
        "phase_index,phi,x" => Ok(Dataset::Homodyne(read_homodyne(path).map_err(bad)?)),
        "alpha_re,alpha_im,m,count" => Ok(Dataset::Counts(read_counts(path).map_err(bad)?)),
        "t,value,channel" => Ok(Dataset::Probe(read_probe(path).map_err(bad)?.0)),
        _ => Err(incompatible(format!("{}: unrecognized dataset header '{header}'", path.display()))),
    }
}

fn max_abs_sample(ds: &HomodyneDataset) -> f64 {
    ds.records.iter().flat_map(|r| r.samples.iter()).fold(0.0f64, |a, x| a.max(x.abs()))
}

fn uniform_grid(half: f64, step: f64) -> Grid1D {
    let n = (2.0 * half / step).ceil() as usize + 1;
    Grid1D { x_min: -half, x_max: half, n_points: n }
}

/// Pattern-function table covering every sample, loss compensated when eta < 1.
fn table_for(ds: &HomodyneDataset, n_max: usize) -> CliResult<PatternTable> {
    let mut half = max_abs_sample(ds) + 0.1;
    for _ in 0..4 {
        let grid = uniform_grid(half, 0.01);
        let t = if ds.eta < 1.0 { eta_compensated_table(n_max, &grid, ds.eta) } else { pattern_function_table(n_max, &grid) };
        match t {
            Err(Error::GridTooNarrow { needed, .. }) => half = needed + 0.25,
            other => return other.map_err(method_err),
        }
    }
    Err(CliError::new(EXIT_METHOD, "could not size the pattern-function grid"))
}

fn histogram(ds: &HomodyneDataset) -> CliResult<EmpiricalQuadratureHistogram> {
    let x = max_abs_sample(ds);
    let bins = ((2.0 * x / 0.05).ceil() as usize).clamp(32, 400);
    bin_dataset(ds, bins).map_err(method_err)
}

// ---------------------------------------------------------------- reconstruct

struct Outcome {
    report: Value,
    density: Option<(DensityMatrix, Option<DMatrix<f64>>)>,
    grid: Option<PhaseSpaceGrid>,
}

impl Outcome {
    fn from_report(r: ReconstructionReport) -> Self {
        let density = r.density().map(|d| (d.clone(), r.std_errors.clone()));
        let grid = r.phase_space().cloned();
        Outcome { report: report_to_json(&r), density, grid }
    }

    fn custom(tag: &str, params: Value, estimate: Value, warnings: Vec<String>) -> Self {
        let report = json!({
            "library": {"name": "qstate-core", "version": LIBRARY_VERSION},
            "method": {"tag": tag, "params": params},
            "estimate": estimate,
            "std_errors": null,
            "diagnostics": {"warnings": warnings},
        });
        Outcome { report, density: None, grid: None }
    }
}

fn require_homodyne<'a>(d: &'a Dataset, method: &str) -> CliResult<&'a HomodyneDataset> {
    match d {
        Dataset::Homodyne(h) => Ok(h),
        other => Err(incompatible(format!("method '{method}' needs a homodyne dataset, got {}", other.kind()))),
    }
}

fn require_counts<'a>(d: &'a Dataset, method: &str) -> CliResult<&'a DisplacedCountDataset> {
    match d {
        Dataset::Counts(c) => Ok(c),
        other => Err(incompatible(format!("method '{method}' needs a displaced-count dataset, got {}", other.kind()))),
    }
}

fn sampled_json(v: &SampledValue) -> Value {
    json!({"re": json_f64(v.value.re), "im": json_f64(v.value.im), "std_error": json_f64(v.std_error)})
}

fn run_method(a: &ReconstructArgs, data: &Dataset) -> CliResult<Outcome> {
    let method = a.method.as_str();
    match method {
        "pattern" => {
            let ds = require_homodyne(data, method)?;
            let n_max = a.n_max.unwrap_or(10);
            let table = table_for(ds, n_max)?;
            let r = sample_density_fock(QuadratureData::Samples(ds), n_max, &table).map_err(method_err)?;
            Ok(Outcome::from_report(r))
        }
        "fbp" => {
            let ds = require_homodyne(data, method)?;
            let hist = histogram(ds)?;
            let p = hist.to_distribution();
            let half = (0.5 * (hist.edges[hist.edges.len() - 1] - hist.edges[0])).min(5.0);
            let out = PhaseSpaceGrid::square(half, 81, 0.0, PhaseSpaceConvention::QP);
            let opts = FbpOptions { z_c: a.z_cut.unwrap_or(DEFAULT_Z_CUT), s_target: a.s, allow_unstable: a.allow_unstable };
            let mut r = fbp_phase_space(&p, &out, &opts).map_err(method_err)?;
            r.method.params.insert("bins".into(), json!(hist.counts[0].len()));
            Ok(Outcome::from_report(r))
        }
        "quadbasis" => {
            let ds = require_homodyne(data, method)?;
            let p = histogram(ds)?.to_distribution();
            let z_max = a.z_cut.unwrap_or(8.0);
            let xs: Vec<f64> = (0..25).map(|i| -3.0 + 0.25 * i as f64).collect();
            let xps: Vec<f64> = (0..13).map(|i| -1.5 + 0.25 * i as f64).collect();
            let vals = quadrature_basis_grid(&p, &xs, &xps, 0.0, z_max).map_err(method_err)?;
            let part = |f: fn(&C) -> f64| -> Vec<Value> {
                vals.iter().map(|row| Value::Array(row.iter().map(|v| json_f64(f(v))).collect())).collect()
            };
            let estimate = json!({
                "type": "quadrature_basis",
                "phi": json_f64(0.0),
                "x": xs.iter().map(|&v| json_f64(v)).collect::<Vec<_>>(),
                "x_prime": xps.iter().map(|&v| json_f64(v)).collect::<Vec<_>>(),
                "re": part(|v| v.re),
                "im": part(|v| v.im),
            });
            let params = json!({"z_max": json_f64(z_max), "phases": ds.records.len(), "eta": json_f64(ds.eta)});
            Ok(Outcome::custom("quadbasis", params, estimate, Vec::new()))
        }
        "moments" => {
            let ds = require_homodyne(data, method)?;
            let order = a.n_max.unwrap_or(2);
            let mut values = Vec::new();
            for total in 0..=order {
                for n in 0..=total {
                    let m = total - n;
                    let v = moments_sampling(QuadratureData::Samples(ds), n, m).map_err(|e| match e {
                        Error::PhaseDeficit { got, required } => CliError::new(
                            EXIT_METHOD,
                            format!("moment <a^dag^{n} a^{m}> requires n + m + 1 = {required} distinct phases, dataset has {got}"),
                        ),
                        e => method_err(e),
                    })?;
                    let mut entry = json!({"n": n, "m": m});
                    if let (Value::Object(e), Value::Object(s)) = (&mut entry, sampled_json(&v)) {
                        e.extend(s);
                    }
                    values.push(entry);
                }
            }
            let params = json!({"max_order": order, "phases": ds.records.len(), "eta": json_f64(ds.eta)});
            Ok(Outcome::custom("moments", params, json!({"type": "moments", "values": values}), Vec::new()))
        }
        "phasemoments" => {
            let ds = require_homodyne(data, method)?;
            let kmax = a.n_max.unwrap_or(3);
            let grid = uniform_grid(max_abs_sample(ds) + 0.1, 0.01);
            let mut values = Vec::new();
            let mut warnings = Vec::new();
            for k in 1..=kmax {
                let table = PhaseKernelTable::new(k, &grid, DEFAULT_N_SUM, DEFAULT_KERNEL_TOLERANCE).map_err(method_err)?;
                let v = phase_moments_sampling(QuadratureData::Samples(ds), &table).map_err(method_err)?;
                warnings.extend(v.warnings);
                let mut entry = json!({"k": k});
                if let (Value::Object(e), Value::Object(s)) = (&mut entry, sampled_json(&v.value)) {
                    e.extend(s);
                }
                values.push(entry);
            }
            warnings.dedup();
            let params = json!({"max_k": kmax, "n_sum": DEFAULT_N_SUM, "phases": ds.records.len(), "eta": json_f64(ds.eta)});
            Ok(Outcome::custom("phasemoments", params, json!({"type": "phase_moments", "values": values}), warnings))
        }
        "maxent" => {
            let ds = require_homodyne(data, method)?;
            maxent(ds, a.n_max.unwrap_or(10))
        }
        "circle" => {
            let ds = require_counts(data, method)?;
            let radius = ds.records.first().map(|r| r.alpha.norm()).unwrap_or(0.0);
            if ds.records.iter().any(|r| (r.alpha.norm() - radius).abs() > 1e-9 * radius.max(1.0)) {
                return Err(incompatible("method 'circle' needs displacements on one circle"));
            }
            let reg = match (a.lambda, a.sigma0) {
                (Some(_), Some(_)) => return Err(CliError::new(EXIT_CONFIG, "--lambda and --sigma0 are mutually exclusive")),
                (Some(l), None) => Regularization::Tikhonov(l),
                (None, Some(s)) => Regularization::SvdCut(s),
                (None, None) => Regularization::None,
            };
            let n_max = a.n_max.unwrap_or(((ds.records.len().max(1) - 1) / 2).min(10));
            let r = circle_inversion_displaced(&DisplacedFrequencies::from_dataset(ds), n_max, &reg).map_err(method_err)?;
            Ok(Outcome::from_report(r))
        }
        "pointwise" => {
            let ds = require_counts(data, method)?;
            let s = a.s.unwrap_or(0.0);
            let w = pointwise_phase_space(&DisplacedFrequencies::from_dataset(ds), s).map_err(method_err)?;
            let est = &w.value;
            let params = json!({"s": json_f64(s), "eta": json_f64(ds.eta), "weight": json_f64(est.weight), "points": est.alphas.len(), "shots": ds.shots});
            match est.to_grid() {
                Some(g) => {
                    let mut errs = PointwiseEstimate { values: est.errors.clone(), ..est.clone() }.to_grid().unwrap();
                    errs.s = s;
                    let mut e = estimate_to_json(&Estimate::PhaseSpace(g.clone()));
                    e.as_object_mut().unwrap().insert("errors".into(), json!(errs.values.iter().map(|r| r.iter().map(|&v| json_f64(v)).collect::<Vec<_>>()).collect::<Vec<_>>()));
                    let mut o = Outcome::custom("pointwise", params, e, w.warnings.clone());
                    o.grid = Some(g);
                    Ok(o)
                }
                None => {
                    let pts: Vec<Value> = est
                        .alphas
                        .iter()
                        .zip(&est.values)
                        .zip(&est.errors)
                        .map(|((a, v), e)| json!({"alpha_re": json_f64(a.re), "alpha_im": json_f64(a.im), "value": json_f64(*v), "error": json_f64(*e)}))
                        .collect();
                    Ok(Outcome::custom("pointwise", params, json!({"type": "phase_space_points", "s": json_f64(s), "points": pts}), w.warnings.clone()))
                }
            }
        }
        "endoscopy" => {
            let signals = match data {
                Dataset::Probe(s) => s,
                other => return Err(incompatible(format!("method 'endoscopy' needs a probe dataset, got {}", other.kind()))),
            };
            let sig = signals
                .iter()
                .find(|s| matches!(s.channel, ProbeChannel::Inversion | ProbeChannel::PmDifference { .. }))
                .ok_or_else(|| incompatible("method 'endoscopy' needs an inversion or difference signal"))?;
            let n_max = a.n_max.unwrap_or(10);
            let freqs = rabi_frequencies(sig.k, sig.eta_ld, n_max, sig.omega_l);
            let window = *sig.times.last().unwrap_or(&0.0);
            let r = endoscopy_invert(sig, &freqs, window).map_err(method_err)?;
            let mode = match r.value.mode {
                EndoscopyMode::Projection => "projection",
                EndoscopyMode::LinearSystem => "linear_system",
            };
            let coefs: Vec<Value> = r.value.coefficients.iter().map(|&v| json_f64(v)).collect();
            let estimate = match sig.channel {
                ProbeChannel::PmDifference { psi } => json!({"type": "pm_coefficients", "psi": json_f64(psi), "k": sig.k, "a": coefs}),
                _ => json!({"type": "photon_distribution", "p": coefs}),
            };
            let params = json!({"n_max": n_max, "window": json_f64(window), "mode": mode, "omega_l": json_f64(sig.omega_l), "k": sig.k, "eta_ld": json_f64(sig.eta_ld), "smallest_gap": json_f64(r.value.smallest_gap)});
            Ok(Outcome::custom("endoscopy", params, estimate, r.warnings))
        }
        other => Err(CliError::new(
            EXIT_CONFIG,
            format!("unknown method '{other}' (expected fbp, pattern, quadbasis, circle, pointwise, moments, phasemoments, endoscopy, maxent)"),
        )),
    }
}

/// Quadrature mean and second moment at up to eight phases as max-entropy constraints.
fn maxent(ds: &HomodyneDataset, n_max: usize) -> CliResult<Outcome> {
    let dim = n_max + 1;
    let n_rec = ds.records.len();
    let take = n_rec.min(8);
    let picks: Vec<usize> = (0..take).map(|j| j * n_rec / take).collect();
    let big = dim + 2;
    let a_op = annihilation(big);
    let smear = smearing_variance(ds.eta);
    let mut observables = Vec::new();
    let mut means = Vec::new();
    for &k in &picks {
        let r = &ds.records[k];
        if r.samples.is_empty() {
            return Err(method_err(Error::EmptyPhase(k)));
        }
        let e = C::from_polar(1.0, -r.phi);
        let x = (&a_op * e + a_op.adjoint() * e.conj()) / C::new(2f64.sqrt(), 0.0);
        let x2 = &x * &x;
        let n = r.samples.len() as f64;
        let m1 = r.samples.iter().sum::<f64>() / n;
        let m2 = r.samples.iter().map(|v| v * v).sum::<f64>() / n - smear;
        observables.push(x.view((0, 0), (dim, dim)).into_owned());
        observables.push(x2.view((0, 0), (dim, dim)).into_owned());
        means.push(m1);
        means.push(m2);
    }
    let res = max_entropy_estimate(&observables, &means, dim).map_err(method_err)?;
    let v = res.value;
    let rho = DensityMatrix::from_matrix_unchecked(v.rho.matrix().clone(), "maximum-entropy estimate");
    let method = MethodInfo {
        tag: "maxent".into(),
        params: match normalize_floats(json!({
            "n_max": n_max, "phases_used": picks.len(), "eta": ds.eta, "iterations": v.iterations,
            "residual": v.residual, "fallback": v.fallback,
        })) {
            Value::Object(m) => m,
            _ => unreachable!(),
        },
    };
    let diag = Diagnostics {
        min_eigenvalue: Some(rho.min_eigenvalue()),
        warnings: res.warnings,
        ..Default::default()
    };
    Ok(Outcome::from_report(ReconstructionReport { estimate: Estimate::Density(rho), std_errors: None, method, diagnostics: diag }))
}

fn pad(rho: &DensityMatrix, dim: usize) -> DensityMatrix {
    if rho.dim() >= dim {
        rho.clone()
    } else {
        rho.resized(dim)
    }
}

fn pad_errors(e: Option<&DMatrix<f64>>, dim: usize) -> DMatrix<f64> {
    DMatrix::from_fn(dim, dim, |i, j| e.and_then(|m| if i < m.nrows() && j < m.ncols() { Some(m[(i, j)]) } else { None }).unwrap_or(0.0))
}

/// Root fidelity with a first-order error from independent element errors.
fn fidelity_with_error(est: &DensityMatrix, errs: Option<&DMatrix<f64>>, truth: &DensityMatrix) -> Result<(f64, f64, f64), Error> {
    let dim = est.dim().max(truth.dim());
    let (a, b) = (pad(est, dim), pad(truth, dim));
    let base = compare_states(&a, &b)?;
    let e = pad_errors(errs, dim);
    let h = 1e-6;
    let mut var = 0.0;
    for m in 0..dim {
        for n in m..dim {
            if e[(m, n)] == 0.0 {
                continue;
            }
            let parts: &[(C, f64)] = if m == n {
                &[(C::new(1.0, 0.0), 1.0)]
            } else {
                &[(C::new(1.0, 0.0), 0.5), (C::new(0.0, 1.0), 0.5)]
            };
            for &(dir, share) in parts {
                let mut mat = a.matrix().clone();
                mat[(m, n)] += dir * h;
                if m != n {
                    mat[(n, m)] += dir.conj() * h;
                }
                let f = compare_states(&DensityMatrix::from_matrix_unchecked(mat, ""), &b)?.fidelity;
                let d = (f - base.fidelity) / h;
                var += d * d * share * e[(m, n)] * e[(m, n)];
            }
        }
    }
    Ok((base.fidelity, var.sqrt(), base.trace_distance))
}

fn read_truth(path: &Path) -> CliResult<DensityMatrix> {
    let v = read_json(path).map_err(|e| incompatible(e.to_string()))?;
    let v = v.get("estimate").cloned().unwrap_or(v);
    density_from_json(&v).map_err(|e| incompatible(format!("{}: {e}", path.display())))
}

pub fn reconstruct(a: &ReconstructArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let data = load_dataset(&a.dataset)?;
    let mut outcome = run_method(a, &data)?;
    let mut inputs = vec![a.dataset.as_path()];
    if let Some(tp) = &a.truth {
        inputs.push(tp.as_path());
        let truth = read_truth(tp)?;
        let cmp = if let Some((rho, errs)) = &outcome.density {
            let (f, fe, td) = fidelity_with_error(rho, errs.as_ref(), &truth).map_err(method_err)?;
            let dim = rho.dim().max(truth.dim());
            let projected = compare_states(&pad(&rho.project_to_physical(), dim), &pad(&truth, dim)).map_err(method_err)?;
            json!({
                "fidelity": json_f64(f),
                "fidelity_error": json_f64(fe),
                "trace_distance": json_f64(td),
                "estimate_min_eigenvalue": json_f64(rho.min_eigenvalue()),
                "fidelity_projected": json_f64(projected.fidelity),
            })
        } else if let Some(g) = &outcome.grid {
            let exact = phase_space_function(&truth, g.s, g).map_err(method_err)?;
            json!({"max_abs_diff": json_f64(g.max_abs_diff(&exact)), "truth_sup_norm": json_f64(exact.sup_norm())})
        } else {
            json!({"note": "no truth comparison for this estimate type"})
        };
        outcome.report.as_object_mut().unwrap().insert("truth_comparison".into(), cmp);
    }
    let out = out_dir(&a.out);
    let report_path = out.join("report.json");
    write_json(&report_path, &outcome.report).map_err(io_fail)?;
    let mut outputs = vec![report_path.clone()];
    if let Some(g) = &outcome.grid {
        let p = out.join("phase_space.csv");
        write_grid_csv(g, &p).map_err(io_fail)?;
        outputs.push(p);
    }
    let m = Manifest {
        argv,
        config_digest: None,
        inputs,
        outputs: outputs.iter().map(|p| p.as_path()).collect(),
        seed: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out, "manifest_reconstruct.json", m)?;
    if let Some(w) = outcome.report["diagnostics"]["warnings"].as_array() {
        for msg in w {
            eprintln!("warning: {}", msg.as_str().unwrap_or_default());
        }
    }
    if let Some(c) = outcome.report.get("truth_comparison") {
        if let (Some(f), Some(e)) = (c["fidelity"].as_f64(), c["fidelity_error"].as_f64()) {
            println!("fidelity vs truth: {f:.3} ± {e:.3}");
        }
    }
    for p in &outputs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// ---------------------------------------------------------------- compare

enum Loaded {
    Density(DensityMatrix, Option<DMatrix<f64>>),
    Grid(PhaseSpaceGrid),
}

fn load_comparable(path: &Path) -> CliResult<Loaded> {
    let v = read_json(path).map_err(|e| incompatible(e.to_string()))?;
    if v.get("elements").is_some() {
        return Ok(Loaded::Density(density_from_json(&v).map_err(|e| incompatible(e.to_string()))?, None));
    }
    let r = report_from_json(&v).map_err(|e| incompatible(format!("{}: {e}", path.display())))?;
    match r.estimate {
        Estimate::Density(d) => Ok(Loaded::Density(d, r.std_errors)),
        Estimate::PhaseSpace(g) => Ok(Loaded::Grid(g)),
    }
}

fn z_scores(a: &DensityMatrix, ea: &DMatrix<f64>, b: &DensityMatrix, eb: &DMatrix<f64>) -> Option<Value> {
    let d = a.dim();
    let mut re = vec![vec![Value::Null; d]; d];
    let mut im = vec![vec![Value::Null; d]; d];
    let (mut inside, mut total) = (0usize, 0usize);
    for m in 0..d {
        for n in 0..d {
            let s2 = ea[(m, n)].powi(2) + eb[(m, n)].powi(2);
            if s2 == 0.0 {
                continue;
            }
            let diff = a.get(m, n) - b.get(m, n);
            // the complex error splits evenly into real and imaginary parts off the diagonal
            let s = if m == n { s2.sqrt() } else { (0.5 * s2).sqrt() };
            let zr = diff.re / s;
            re[m][n] = json_f64(zr);
            if m <= n {
                total += 1;
                inside += (zr.abs() < 1.0) as usize;
            }
            if m != n {
                let zi = diff.im / s;
                im[m][n] = json_f64(zi);
                if m < n {
                    total += 1;
                    inside += (zi.abs() < 1.0) as usize;
                }
            }
        }
    }
    if total == 0 {
        return None;
    }
    Some(json!({"re": re, "im": im, "fraction_within_1": json_f64(inside as f64 / total as f64), "count": total}))
}

pub fn compare(a: &CompareArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let other = match (&a.b, &a.truth) {
        (Some(b), None) | (None, Some(b)) => b.clone(),
        (Some(_), Some(_)) => return Err(CliError::new(EXIT_CONFIG, "give either a second report or --truth, not both")),
        (None, None) => return Err(CliError::new(EXIT_CONFIG, "nothing to compare against")),
    };
    let result = match (load_comparable(&a.a)?, load_comparable(&other)?) {
        (Loaded::Density(x, ex), Loaded::Density(y, ey)) => {
            if a.truth.is_none() && x.dim() != y.dim() {
                return Err(incompatible(format!("dimension mismatch: {} vs {}", x.dim(), y.dim())));
            }
            let dim = x.dim().max(y.dim());
            let (x, y) = (pad(&x, dim), pad(&y, dim));
            let c = compare_states(&x, &y).map_err(method_err)?;
            let z = z_scores(&x, &pad_errors(ex.as_ref(), dim), &y, &pad_errors(ey.as_ref(), dim));
            json!({"type": "density_matrix", "dim": dim, "fidelity": json_f64(c.fidelity), "trace_distance": json_f64(c.trace_distance), "z_scores": z})
        }
        (Loaded::Grid(x), Loaded::Grid(y)) => {
            if x.xs != y.xs || x.ys != y.ys || x.convention != y.convention {
                return Err(incompatible("phase-space grids differ in shape or convention"));
            }
            json!({"type": "phase_space", "max_abs_diff": json_f64(x.max_abs_diff(&y)), "sup_norm_a": json_f64(x.sup_norm()), "sup_norm_b": json_f64(y.sup_norm())})
        }
        (Loaded::Density(x, _), Loaded::Grid(g)) | (Loaded::Grid(g), Loaded::Density(x, _)) => {
            // a state against a phase-space estimate: evaluate the state on that grid
            let exact = phase_space_function(&x, g.s, &g).map_err(method_err)?;
            json!({"type": "phase_space", "max_abs_diff": json_f64(g.max_abs_diff(&exact)), "sup_norm_a": json_f64(g.sup_norm()), "sup_norm_b": json_f64(exact.sup_norm())})
        }
    };
    let out = out_dir(&a.out);
    let path = out.join("comparison.json");
    write_json(&path, &result).map_err(io_fail)?;
    let m = Manifest {
        argv,
        config_digest: None,
        inputs: vec![a.a.as_path(), other.as_path()],
        outputs: vec![path.as_path()],
        seed: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out, "manifest_compare.json", m)?;
    if let Some(f) = result["fidelity"].as_f64() {
        println!("fidelity {f:.6}  trace distance {:.6}", result["trace_distance"].as_f64().unwrap_or(f64::NAN));
    } else {
        println!("max |difference| {:.6}", result["max_abs_diff"].as_f64().unwrap_or(f64::NAN));
    }
    println!("wrote {}", path.display());
    Ok(())
}

// ---------------------------------------------------------------- report

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    if let Some(d) = path.parent() {
        std::fs::create_dir_all(d).map_err(|e| CliError::new(1, e.to_string()))?;
    }
    std::fs::write(path, text).map_err(|e| CliError::new(1, format!("{}: {e}", path.display())))
}

/// Var x(phi) over [0, 2 pi) from a density matrix.
pub fn variance_curve(rho: &DensityMatrix, points: usize) -> Vec<(f64, f64)> {
    let dim = rho.dim() + 1;
    let r = rho.resized(dim);
    let a = annihilation(dim);
    (0..points)
        .map(|j| {
            let phi = 2.0 * PI * j as f64 / points as f64;
            let e = C::from_polar(1.0, -phi);
            let x = (&a * e + a.adjoint() * e.conj()) / C::new(2f64.sqrt(), 0.0);
            let m1 = r.expectation(&x).re;
            let m2 = r.expectation(&(&x * &x)).re;
            (phi, m2 - m1 * m1)
        })
        .collect()
}

pub fn report(a: &ReportArgs, argv: &[String]) -> CliResult<()> {
    let start = Instant::now();
    let v = read_json(&a.report).map_err(|e| incompatible(e.to_string()))?;
    let out = out_dir(&a.out);
    let mut outputs: Vec<PathBuf> = Vec::new();
    let mut s = String::new();
    let tag = v["method"]["tag"].as_str().ok_or_else(|| incompatible(format!("{}: not a report (no method tag)", a.report.display())))?;
    let _ = writeln!(s, "method: {tag}");
    if let Some(p) = v["method"]["params"].as_object() {
        for (k, val) in p {
            let _ = writeln!(s, "  {k}: {val}");
        }
    }
    let est_type = v["estimate"]["type"].as_str().ok_or_else(|| incompatible("report has no estimate type"))?;
    match est_type {
        "density_matrix" | "phase_space" => {
            let r = report_from_json(&v).map_err(|e| incompatible(format!("{}: {e}", a.report.display())))?;
            match &r.estimate {
                Estimate::Density(rho) => {
                    let _ = writeln!(s, "dimension: {}", rho.dim());
                    let _ = writeln!(s, "trace: {:.6}", rho.trace().re);
                    let _ = writeln!(s, "purity: {:.6}", rho.purity());
                    let _ = writeln!(s, "mean photon number: {:.6}", rho.mean_photon_number());
                    let _ = writeln!(s, "min eigenvalue: {:.6e}", rho.min_eigenvalue());
                    let grid = PhaseSpaceGrid::square(4.0, 81, 0.0, PhaseSpaceConvention::QP);
                    let w = phase_space_function(rho, 0.0, &grid).map_err(method_err)?;
                    let q = phase_space_function(rho, -1.0, &grid).map_err(method_err)?;
                    let (wp, qp) = (out.join("wigner.csv"), out.join("q_function.csv"));
                    write_grid_csv(&w, &wp).map_err(io_fail)?;
                    write_grid_csv(&q, &qp).map_err(io_fail)?;
                    let (aq, ap) = w.argmax();
                    let _ = writeln!(s, "wigner max at (q, p) = ({aq:.3}, {ap:.3})");
                    let mut bars = String::from("n,p,error\n");
                    let errs = r.std_errors.as_ref();
                    for (n, p) in rho.diagonal().iter().enumerate() {
                        let e = errs.map(|m| m[(n, n)]).unwrap_or(0.0);
                        let _ = writeln!(bars, "{n},{},{}", fmt_f64(*p), fmt_f64(e));
                    }
                    let bp = out.join("photon_numbers.csv");
                    write_text(&bp, &bars)?;
                    let mut curve = String::from("phi,variance\n");
                    for (phi, var) in variance_curve(rho, 64) {
                        let _ = writeln!(curve, "{},{}", fmt_f64(phi), fmt_f64(var));
                    }
                    let vp = out.join("variance_vs_phase.csv");
                    write_text(&vp, &curve)?;
                    outputs.extend([wp, qp, bp, vp]);
                    let _ = writeln!(s, "photon numbers:");
                    for (n, p) in rho.diagonal().iter().enumerate().take(12) {
                        let bar = "#".repeat((p.max(0.0) * 50.0).round() as usize);
                        let _ = writeln!(s, "  {n:>3} {p:>9.5} {bar}");
                    }
                }
                Estimate::PhaseSpace(g) => {
                    let p = out.join("phase_space.csv");
                    write_grid_csv(g, &p).map_err(io_fail)?;
                    outputs.push(p);
                    let (ax, ay) = g.argmax();
                    let _ = writeln!(s, "ordering s: {:.4}", g.s);
                    let _ = writeln!(s, "grid: {} x {}", g.xs.len(), g.ys.len());
                    let _ = writeln!(s, "integral: {:.6}", g.integral());
                    let _ = writeln!(s, "minimum: {:.6}", g.min_value());
                    let _ = writeln!(s, "maximum at ({ax:.3}, {ay:.3})");
                }
            }
        }
        "moments" | "phase_moments" => {
            let key = if est_type == "moments" { "n" } else { "k" };
            for e in v["estimate"]["values"].as_array().into_iter().flatten() {
                let label = if key == "n" {
                    format!("<a^dag^{} a^{}>", e["n"], e["m"])
                } else {
                    format!("Psi_{}", e["k"])
                };
                let _ = writeln!(
                    s,
                    "  {label}: {:.6} {:+.6}i ± {:.6}",
                    e["re"].as_f64().unwrap_or(f64::NAN),
                    e["im"].as_f64().unwrap_or(f64::NAN),
                    e["std_error"].as_f64().unwrap_or(f64::NAN)
                );
            }
        }
        "photon_distribution" | "pm_coefficients" => {
            let key = if est_type == "photon_distribution" { "p" } else { "a" };
            for (n, val) in v["estimate"][key].as_array().into_iter().flatten().enumerate() {
                let _ = writeln!(s, "  {key}_{n}: {:.6}", val.as_f64().unwrap_or(f64::NAN));
            }
        }
        "quadrature_basis" | "phase_space_points" => {
            let _ = writeln!(s, "estimate type {est_type}; values are in the report");
        }
        other => return Err(incompatible(format!("unknown estimate type '{other}'"))),
    }
    if let Some(c) = v.get("truth_comparison").and_then(Value::as_object) {
        for (k, val) in c {
            let _ = writeln!(s, "truth {k}: {val}");
        }
    }
    for w in v["diagnostics"]["warnings"].as_array().into_iter().flatten() {
        let _ = writeln!(s, "warning: {}", w.as_str().unwrap_or_default());
    }
    let sp = out.join("summary.txt");
    write_text(&sp, &s)?;
    outputs.push(sp);
    print!("{s}");
    let m = Manifest {
        argv,
        config_digest: None,
        inputs: vec![a.report.as_path()],
        outputs: outputs.iter().map(|p| p.as_path()).collect(),
        seed: None,
        wall_time_s: start.elapsed().as_secs_f64(),
    };
    write_manifest(&out, "manifest_report.json", m)?;
    Ok(())
}
