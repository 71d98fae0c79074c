//! On-disk formats. Every float is written with 17 significant digits.

use crate::detection::{
    DisplacedCountDataset, DisplacedCountRecord, HomodyneDataset, HomodyneRecord, ProbeChannel, ProbeSignal,
};
use crate::error::{Error, Result};
use crate::patterns::PatternTable;
use crate::states::{DensityMatrix, Grid1D, PhaseSpaceConvention, PhaseSpaceGrid};
use crate::tomography::{Diagnostics, Estimate, MethodInfo, ReconstructionReport};
use nalgebra::DMatrix;
use num_complex::Complex64;
use serde_json::{json, Map, Number, Value};
use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

type C = Complex64;

pub const LIBRARY_VERSION: &str = env!("CARGO_PKG_VERSION");

pub fn fmt_f64(x: f64) -> String {
    if x == 0.0 {
        return "0.0000000000000000e0".into();
    }
    format!("{x:.16e}")
}

/// JSON number with 17 significant digits; null for non-finite values.
pub fn json_f64(x: f64) -> Value {
    if !x.is_finite() {
        return Value::Null;
    }
    Value::Number(fmt_f64(x).parse::<Number>().expect("formatted float parses"))
}

/// Rewrite every non-integer number in a JSON tree to the 17-digit form.
pub fn normalize_floats(v: Value) -> Value {
    match v {
        Value::Number(n) if !(n.is_i64() || n.is_u64()) => json_f64(n.as_f64().unwrap_or(f64::NAN)),
        Value::Array(a) => Value::Array(a.into_iter().map(normalize_floats).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, normalize_floats(v))).collect()),
        x => x,
    }
}

pub fn write_json(path: &Path, v: &Value) -> Result<()> {
    let mut s = serde_json::to_string_pretty(&normalize_floats(v.clone()))?;
    s.push('\n');
    write_file(path, &s)
}

pub fn read_json(path: &Path) -> Result<Value> {
    let s = fs::read_to_string(path).map_err(|e| io_err(path, e))?;
    serde_json::from_str(&s).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, content: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
        }
    }
    fs::write(path, content).map_err(|e| io_err(path, e))
}

fn io_err(path: &Path, e: std::io::Error) -> Error {
    Error::Io(format!("{}: {e}", path.display()))
}

fn fmt_err(path: &Path, msg: impl std::fmt::Display) -> Error {
    Error::Format(format!("{}: {msg}", path.display()))
}

/// Sidecar path next to a CSV file: data.csv -> data.json.
pub fn sidecar_path(csv: &Path) -> PathBuf {
    csv.with_extension("json")
}

fn csv_writer() -> csv::Writer<Vec<u8>> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(Vec::new())
}

fn finish_csv(w: csv::Writer<Vec<u8>>, path: &Path) -> Result<()> {
    let bytes = w.into_inner().map_err(|e| Error::Io(e.to_string()))?;
    write_file(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_rows(path: &Path, header: &[&str]) -> Result<Vec<csv::StringRecord>> {
    let mut r = csv::ReaderBuilder::new().from_path(path).map_err(|e| fmt_err(path, e))?;
    let got: Vec<String> = r.headers().map_err(|e| fmt_err(path, e))?.iter().map(|s| s.trim().to_string()).collect();
    if got != header {
        return Err(fmt_err(path, format!("expected header {}, found {}", header.join(","), got.join(","))));
    }
    r.records().map(|rec| rec.map_err(|e| fmt_err(path, e))).collect()
}

fn field<T: std::str::FromStr>(path: &Path, rec: &csv::StringRecord, i: usize) -> Result<T> {
    let line = rec.position().map(|p| p.line()).unwrap_or(0);
    rec.get(i)
        .and_then(|s| s.trim().parse().ok())
        .ok_or_else(|| fmt_err(path, format!("line {line}: bad value in column {}", i + 1)))
}

fn get_f64(path: &Path, v: &Value, key: &str) -> Result<f64> {
    v.get(key).and_then(Value::as_f64).ok_or_else(|| fmt_err(path, format!("missing number '{key}'")))
}

fn get_u64(path: &Path, v: &Value, key: &str) -> Result<u64> {
    v.get(key).and_then(Value::as_u64).ok_or_else(|| fmt_err(path, format!("missing integer '{key}'")))
}

// ---------------------------------------------------------------- homodyne

pub fn write_homodyne(ds: &HomodyneDataset, csv_path: &Path) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(["phase_index", "phi", "x"]).map_err(|e| Error::Io(e.to_string()))?;
    for (k, r) in ds.records.iter().enumerate() {
        let phi = fmt_f64(r.phi);
        for &x in &r.samples {
            w.write_record([k.to_string(), phi.clone(), fmt_f64(x)]).map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    finish_csv(w, csv_path)?;
    let side = json!({
        "eta": json_f64(ds.eta),
        "lo_photon_number": ds.lo_photon_number.map(json_f64),
        "seed": ds.rng_seed,
        "scaling": ds.scaling,
        "phases": ds.records.iter().map(|r| json_f64(r.phi)).collect::<Vec<_>>(),
    });
    write_json(&sidecar_path(csv_path), &side)
}

pub fn read_homodyne(csv_path: &Path) -> Result<HomodyneDataset> {
    let side_path = sidecar_path(csv_path);
    let side = read_json(&side_path)?;
    let phases: Vec<f64> = side
        .get("phases")
        .and_then(Value::as_array)
        .ok_or_else(|| fmt_err(&side_path, "missing 'phases'"))?
        .iter()
        .map(|v| v.as_f64().ok_or_else(|| fmt_err(&side_path, "bad phase")))
        .collect::<Result<_>>()?;
    let mut records: Vec<HomodyneRecord> = phases.iter().map(|&phi| HomodyneRecord { phi, samples: Vec::new() }).collect();
    for rec in csv_rows(csv_path, &["phase_index", "phi", "x"])? {
        let k: usize = field(csv_path, &rec, 0)?;
        let phi: f64 = field(csv_path, &rec, 1)?;
        let x: f64 = field(csv_path, &rec, 2)?;
        let r = records.get_mut(k).ok_or_else(|| fmt_err(csv_path, format!("phase index {k} out of range")))?;
        if (r.phi - phi).abs() > 1e-12 {
            return Err(fmt_err(csv_path, format!("phase {phi} disagrees with sidecar phase {} at index {k}", r.phi)));
        }
        r.samples.push(x);
    }
    Ok(HomodyneDataset {
        records,
        eta: get_f64(&side_path, &side, "eta")?,
        lo_photon_number: side.get("lo_photon_number").and_then(Value::as_f64),
        rng_seed: side.get("seed").and_then(Value::as_u64).unwrap_or(0),
        scaling: side.get("scaling").and_then(Value::as_str).unwrap_or_default().to_string(),
    })
}

// ---------------------------------------------------------------- displaced counts

pub fn write_counts(ds: &DisplacedCountDataset, csv_path: &Path) -> Result<()> {
    let mut w = csv_writer();
    w.write_record(["alpha_re", "alpha_im", "m", "count"]).map_err(|e| Error::Io(e.to_string()))?;
    for r in &ds.records {
        let (re, im) = (fmt_f64(r.alpha.re), fmt_f64(r.alpha.im));
        for (m, c) in r.counts.iter().enumerate() {
            w.write_record([re.clone(), im.clone(), m.to_string(), c.to_string()]).map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    finish_csv(w, csv_path)?;
    let side = json!({
        "eta": json_f64(ds.eta),
        "shots": ds.shots,
        "chopping_N": ds.chopping_channels,
        "seed": ds.rng_seed,
    });
    write_json(&sidecar_path(csv_path), &side)
}

pub fn read_counts(csv_path: &Path) -> Result<DisplacedCountDataset> {
    let side_path = sidecar_path(csv_path);
    let side = read_json(&side_path)?;
    let mut records: Vec<DisplacedCountRecord> = Vec::new();
    for rec in csv_rows(csv_path, &["alpha_re", "alpha_im", "m", "count"])? {
        let alpha = C::new(field(csv_path, &rec, 0)?, field(csv_path, &rec, 1)?);
        let m: usize = field(csv_path, &rec, 2)?;
        let c: u64 = field(csv_path, &rec, 3)?;
        let start_new = match records.last() {
            Some(r) => r.alpha != alpha,
            None => true,
        };
        if start_new {
            records.push(DisplacedCountRecord { alpha, counts: Vec::new() });
        }
        let r = records.last_mut().unwrap();
        if m != r.counts.len() {
            return Err(fmt_err(csv_path, format!("count index {m} out of sequence for alpha {alpha}")));
        }
        r.counts.push(c);
    }
    Ok(DisplacedCountDataset {
        records,
        eta: get_f64(&side_path, &side, "eta")?,
        chopping_channels: side.get("chopping_N").and_then(Value::as_u64).map(|n| n as usize),
        shots: get_u64(&side_path, &side, "shots")?,
        rng_seed: side.get("seed").and_then(Value::as_u64).unwrap_or(0),
    })
}

// ---------------------------------------------------------------- probe signals

/// Several channels of one probe run in one CSV; coupling parameters in the sidecar.
pub fn write_probe(signals: &[ProbeSignal], extra: Option<Value>, csv_path: &Path) -> Result<()> {
    let first = signals.first().ok_or_else(|| Error::InvalidParameter("no probe signals".into()))?;
    let mut w = csv_writer();
    w.write_record(["t", "value", "channel"]).map_err(|e| Error::Io(e.to_string()))?;
    for s in signals {
        let tag = s.channel.tag();
        for (t, v) in s.times.iter().zip(&s.values) {
            w.write_record([fmt_f64(*t), fmt_f64(*v), tag.clone()]).map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    finish_csv(w, csv_path)?;
    let mut side = json!({
        "omega_l": json_f64(first.omega_l),
        "k": first.k,
        "eta_ld": json_f64(first.eta_ld),
    });
    if let (Some(Value::Object(m)), Value::Object(s)) = (extra, &mut side) {
        for (k, v) in m {
            s.insert(k, v);
        }
    }
    write_json(&sidecar_path(csv_path), &side)
}

/// Signals in file order of first appearance of each channel, plus the sidecar.
pub fn read_probe(csv_path: &Path) -> Result<(Vec<ProbeSignal>, Value)> {
    let side_path = sidecar_path(csv_path);
    let side = read_json(&side_path)?;
    let omega_l = get_f64(&side_path, &side, "omega_l")?;
    let k = get_u64(&side_path, &side, "k")? as usize;
    let eta_ld = get_f64(&side_path, &side, "eta_ld")?;
    let mut order: Vec<String> = Vec::new();
    let mut data: BTreeMap<String, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for rec in csv_rows(csv_path, &["t", "value", "channel"])? {
        let t: f64 = field(csv_path, &rec, 0)?;
        let v: f64 = field(csv_path, &rec, 1)?;
        let tag = rec.get(2).unwrap_or_default().trim().to_string();
        if !data.contains_key(&tag) {
            order.push(tag.clone());
        }
        let e = data.entry(tag).or_default();
        e.0.push(t);
        e.1.push(v);
    }
    let signals = order
        .into_iter()
        .map(|tag| {
            let channel = ProbeChannel::from_tag(&tag)?;
            let (times, values) = data.remove(&tag).unwrap();
            Ok(ProbeSignal { times, values, channel, omega_l, k, eta_ld })
        })
        .collect::<Result<_>>()?;
    Ok((signals, side))
}

// ---------------------------------------------------------------- pattern tables

pub fn write_pattern_table(table: &PatternTable, json_path: &Path) -> Result<PathBuf> {
    let csv_path = json_path.with_extension("csv");
    let header = json!({
        "n_max": table.n_max,
        "grid": {"x_min": json_f64(table.grid.x_min), "x_max": json_f64(table.grid.x_max), "n_points": table.grid.n_points},
        "eta": json_f64(table.eta),
        "method": table.method,
        "tolerance": json_f64(table.tolerance),
        "version": LIBRARY_VERSION,
        "body": csv_path.file_name().map(|s| s.to_string_lossy().to_string()),
    });
    write_json(json_path, &header)?;
    let mut w = csv_writer();
    w.write_record(["m", "n", "x_index", "value"]).map_err(|e| Error::Io(e.to_string()))?;
    let d = table.n_max + 1;
    for m in 0..d {
        for n in 0..d {
            for (i, v) in table.get(m, n).iter().enumerate() {
                w.write_record([m.to_string(), n.to_string(), i.to_string(), fmt_f64(*v)])
                    .map_err(|e| Error::Io(e.to_string()))?;
            }
        }
    }
    finish_csv(w, &csv_path)?;
    Ok(csv_path)
}

pub fn read_pattern_table(json_path: &Path) -> Result<PatternTable> {
    let h = read_json(json_path)?;
    let n_max = get_u64(json_path, &h, "n_max")? as usize;
    let g = h.get("grid").ok_or_else(|| fmt_err(json_path, "missing 'grid'"))?;
    let grid = Grid1D::new(get_f64(json_path, g, "x_min")?, get_f64(json_path, g, "x_max")?, get_u64(json_path, g, "n_points")? as usize)?;
    let d = n_max + 1;
    let mut values = vec![vec![0.0; grid.n_points]; d * d];
    let csv_path = json_path.with_extension("csv");
    let mut seen = 0usize;
    for rec in csv_rows(&csv_path, &["m", "n", "x_index", "value"])? {
        let m: usize = field(&csv_path, &rec, 0)?;
        let n: usize = field(&csv_path, &rec, 1)?;
        let i: usize = field(&csv_path, &rec, 2)?;
        if m >= d || n >= d || i >= grid.n_points {
            return Err(fmt_err(&csv_path, format!("entry ({m},{n},{i}) outside the table")));
        }
        values[m * d + n][i] = field(&csv_path, &rec, 3)?;
        seen += 1;
    }
    if seen != d * d * grid.n_points {
        return Err(fmt_err(&csv_path, format!("expected {} entries, found {seen}", d * d * grid.n_points)));
    }
    Ok(PatternTable {
        grid,
        n_max,
        eta: get_f64(json_path, &h, "eta")?,
        method: h.get("method").and_then(Value::as_str).unwrap_or_default().to_string(),
        tolerance: get_f64(json_path, &h, "tolerance")?,
        values,
    })
}

// ---------------------------------------------------------------- density matrices and grids

pub fn density_to_json(rho: &DensityMatrix) -> Value {
    let d = rho.dim();
    let elements: Vec<Value> =
        (0..d).flat_map(|m| (0..d).map(move |n| (m, n))).map(|(m, n)| {
            let v = rho.get(m, n);
            json!([json_f64(v.re), json_f64(v.im)])
        }).collect();
    json!({"label": rho.label, "dim": d, "tail_weight": json_f64(rho.tail_weight), "elements": elements})
}

pub fn density_from_json(v: &Value) -> Result<DensityMatrix> {
    let bad = |m: &str| Error::Format(format!("density matrix: {m}"));
    let d = v.get("dim").and_then(Value::as_u64).ok_or_else(|| bad("missing 'dim'"))? as usize;
    let el = v.get("elements").and_then(Value::as_array).ok_or_else(|| bad("missing 'elements'"))?;
    if el.len() != d * d {
        return Err(bad(&format!("{} elements for dimension {d}", el.len())));
    }
    let mut m = DMatrix::<C>::zeros(d, d);
    for (idx, e) in el.iter().enumerate() {
        let pair = e.as_array().filter(|a| a.len() == 2).ok_or_else(|| bad("elements must be [re, im] pairs"))?;
        let re = pair[0].as_f64().ok_or_else(|| bad("non-numeric element"))?;
        let im = pair[1].as_f64().ok_or_else(|| bad("non-numeric element"))?;
        m[(idx / d, idx % d)] = C::new(re, im);
    }
    let label = v.get("label").and_then(Value::as_str).unwrap_or_default();
    let mut rho = DensityMatrix::from_matrix_unchecked(m, label);
    rho.tail_weight = v.get("tail_weight").and_then(Value::as_f64).unwrap_or(0.0);
    Ok(rho)
}

fn floats(v: &[f64]) -> Value {
    Value::Array(v.iter().map(|&x| json_f64(x)).collect())
}

fn float_vec(v: Option<&Value>, what: &str) -> Result<Vec<f64>> {
    v.and_then(Value::as_array)
        .ok_or_else(|| Error::Format(format!("missing array '{what}'")))?
        .iter()
        .map(|x| x.as_f64().ok_or_else(|| Error::Format(format!("non-numeric entry in '{what}'"))))
        .collect()
}

pub fn grid_to_json(g: &PhaseSpaceGrid) -> Value {
    let conv = match g.convention {
        PhaseSpaceConvention::Alpha => "alpha",
        PhaseSpaceConvention::QP => "qp",
    };
    json!({
        "s": json_f64(g.s),
        "convention": conv,
        "xs": floats(&g.xs),
        "ys": floats(&g.ys),
        "values": g.values.iter().map(|r| floats(r)).collect::<Vec<_>>(),
    })
}

pub fn grid_from_json(v: &Value) -> Result<PhaseSpaceGrid> {
    let convention = match v.get("convention").and_then(Value::as_str) {
        Some("alpha") => PhaseSpaceConvention::Alpha,
        Some("qp") => PhaseSpaceConvention::QP,
        _ => return Err(Error::Format("phase-space grid: unknown convention".into())),
    };
    let xs = float_vec(v.get("xs"), "xs")?;
    let ys = float_vec(v.get("ys"), "ys")?;
    let rows = v.get("values").and_then(Value::as_array).ok_or_else(|| Error::Format("missing 'values'".into()))?;
    if rows.len() != xs.len() {
        return Err(Error::Format("phase-space grid: row count differs from xs".into()));
    }
    let values = rows
        .iter()
        .map(|r| {
            let row = float_vec(Some(r), "values")?;
            if row.len() != ys.len() {
                return Err(Error::Format("phase-space grid: column count differs from ys".into()));
            }
            Ok(row)
        })
        .collect::<Result<_>>()?;
    let s = v.get("s").and_then(Value::as_f64).ok_or_else(|| Error::Format("missing 's'".into()))?;
    Ok(PhaseSpaceGrid { xs, ys, values, s, convention })
}

/// Plot-ready `q,p,value` rows in the (q, p) convention.
pub fn write_grid_csv(g: &PhaseSpaceGrid, path: &Path) -> Result<()> {
    let (scale, factor) = match g.convention {
        PhaseSpaceConvention::Alpha => (std::f64::consts::SQRT_2, 0.5),
        PhaseSpaceConvention::QP => (1.0, 1.0),
    };
    let mut w = csv_writer();
    w.write_record(["q", "p", "value"]).map_err(|e| Error::Io(e.to_string()))?;
    for (i, x) in g.xs.iter().enumerate() {
        for (j, y) in g.ys.iter().enumerate() {
            w.write_record([fmt_f64(scale * x), fmt_f64(scale * y), fmt_f64(factor * g.values[i][j])])
                .map_err(|e| Error::Io(e.to_string()))?;
        }
    }
    finish_csv(w, path)
}

pub fn matrix_to_json(m: &DMatrix<f64>) -> Value {
    Value::Array((0..m.nrows()).map(|i| floats(&m.row(i).iter().copied().collect::<Vec<_>>())).collect())
}

pub fn matrix_from_json(v: &Value) -> Result<DMatrix<f64>> {
    let rows = v.as_array().ok_or_else(|| Error::Format("matrix must be an array of rows".into()))?;
    let data: Vec<Vec<f64>> = rows.iter().map(|r| float_vec(Some(r), "matrix row")).collect::<Result<_>>()?;
    let n = data.len();
    let m = data.first().map(|r| r.len()).unwrap_or(0);
    if data.iter().any(|r| r.len() != m) {
        return Err(Error::Format("ragged matrix".into()));
    }
    Ok(DMatrix::from_fn(n, m, |i, j| data[i][j]))
}

// ---------------------------------------------------------------- reports

fn diagnostics_to_json(d: &Diagnostics) -> Value {
    json!({
        "condition_numbers": floats(&d.condition_numbers),
        "truncation_tail": d.truncation_tail.map(json_f64),
        "hermitized": d.hermitized,
        "projected": d.projected,
        "min_eigenvalue": d.min_eigenvalue.map(json_f64),
        "warnings": d.warnings,
    })
}

fn diagnostics_from_json(v: &Value) -> Result<Diagnostics> {
    Ok(Diagnostics {
        condition_numbers: match v.get("condition_numbers") {
            Some(x) => float_vec(Some(x), "condition_numbers")?,
            None => Vec::new(),
        },
        truncation_tail: v.get("truncation_tail").and_then(Value::as_f64),
        hermitized: v.get("hermitized").and_then(Value::as_bool).unwrap_or(false),
        projected: v.get("projected").and_then(Value::as_bool).unwrap_or(false),
        min_eigenvalue: v.get("min_eigenvalue").and_then(Value::as_f64),
        warnings: v
            .get("warnings")
            .and_then(Value::as_array)
            .map(|a| a.iter().filter_map(|w| w.as_str().map(String::from)).collect())
            .unwrap_or_default(),
    })
}

pub fn estimate_to_json(e: &Estimate) -> Value {
    match e {
        Estimate::Density(r) => {
            let mut v = density_to_json(r);
            v.as_object_mut().unwrap().insert("type".into(), json!("density_matrix"));
            reorder_type_first(v)
        }
        Estimate::PhaseSpace(g) => {
            let mut v = grid_to_json(g);
            v.as_object_mut().unwrap().insert("type".into(), json!("phase_space"));
            reorder_type_first(v)
        }
    }
}

fn reorder_type_first(v: Value) -> Value {
    match v {
        Value::Object(mut m) => {
            let mut out = Map::new();
            if let Some(t) = m.remove("type") {
                out.insert("type".into(), t);
            }
            out.extend(m);
            Value::Object(out)
        }
        x => x,
    }
}

pub fn report_to_json(r: &ReconstructionReport) -> Value {
    json!({
        "library": {"name": "qstate-core", "version": LIBRARY_VERSION},
        "method": {"tag": r.method.tag, "params": Value::Object(r.method.params.clone())},
        "estimate": estimate_to_json(&r.estimate),
        "std_errors": r.std_errors.as_ref().map(matrix_to_json),
        "diagnostics": diagnostics_to_json(&r.diagnostics),
    })
}

pub fn report_from_json(v: &Value) -> Result<ReconstructionReport> {
    let est = v.get("estimate").ok_or_else(|| Error::Format("report without 'estimate'".into()))?;
    let estimate = match est.get("type").and_then(Value::as_str) {
        Some("density_matrix") => Estimate::Density(density_from_json(est)?),
        Some("phase_space") => Estimate::PhaseSpace(grid_from_json(est)?),
        other => return Err(Error::Format(format!("unsupported estimate type {other:?}"))),
    };
    let method = v.get("method").ok_or_else(|| Error::Format("report without 'method'".into()))?;
    let tag = method.get("tag").and_then(Value::as_str).unwrap_or_default().to_string();
    let params = method.get("params").and_then(Value::as_object).cloned().unwrap_or_default();
    let std_errors = match v.get("std_errors") {
        None | Some(Value::Null) => None,
        Some(m) => Some(matrix_from_json(m)?),
    };
    let diagnostics = match v.get("diagnostics") {
        Some(d) => diagnostics_from_json(d)?,
        None => Diagnostics::default(),
    };
    Ok(ReconstructionReport { estimate, std_errors, method: MethodInfo { tag, params }, diagnostics })
}
