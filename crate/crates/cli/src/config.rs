use crate::{CliError, CliResult, EXIT_CONFIG};
use qstate_core::states::StateSpec;
use serde::de::{DeserializeOwned, Deserializer, Error as _};
use serde::Deserialize;
use serde_json::Value;
use std::path::Path;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    pub state: StateSpec,
    #[serde(deserialize_with = "tagged_channel")]
    pub channel: Channel,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Channel {
    Homodyne {
        phases: usize,
        samples_per_phase: usize,
        #[serde(default = "one")]
        eta: f64,
    },
    Displaced {
        #[serde(deserialize_with = "tagged_points")]
        points: Points,
        #[serde(default = "one")]
        eta: f64,
        shots: u64,
        #[serde(default)]
        chopping_n: Option<usize>,
    },
    Probe {
        signal: ProbeKind,
        omega_l: f64,
        k: usize,
        #[serde(default)]
        eta_ld: f64,
        t_max: f64,
        n_times: usize,
        /// Preparation phase of the difference signal.
        #[serde(default)]
        psi: f64,
        /// Laser phase of the quadrature probe.
        #[serde(default)]
        phase: f64,
        #[serde(default)]
        displacement: Option<[f64; 2]>,
    },
}

#[derive(Debug, Clone, Copy, Deserialize, PartialEq, Eq)]
#[serde(rename_all = "snake_case")]
pub enum ProbeKind {
    Inversion,
    PmDifference,
    Quadrature,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Points {
    Circle { radius: f64, count: usize },
    Grid { half_width: f64, n: usize },
    List { alphas: Vec<[f64; 2]> },
}

// Internally tagged enums buffer their content, which mangles arbitrary-precision
// numbers; move the tag out into external form instead.
fn retag<'de, D: Deserializer<'de>, T: DeserializeOwned>(d: D, tag: &str) -> Result<T, D::Error> {
    let mut v = Value::deserialize(d)?;
    let obj = v.as_object_mut().ok_or_else(|| D::Error::custom("expected an object"))?;
    let name = match obj.remove(tag) {
        Some(Value::String(s)) => s,
        _ => return Err(D::Error::custom(format!("missing or invalid `{tag}`"))),
    };
    let mut outer = serde_json::Map::new();
    outer.insert(name, v);
    serde_json::from_value(Value::Object(outer)).map_err(D::Error::custom)
}

fn tagged_channel<'de, D: Deserializer<'de>>(d: D) -> Result<Channel, D::Error> {
    retag(d, "type").map_err(|e: D::Error| D::Error::custom(format!("channel: {e}")))
}

fn tagged_points<'de, D: Deserializer<'de>>(d: D) -> Result<Points, D::Error> {
    retag(d, "layout").map_err(|e: D::Error| D::Error::custom(format!("points: {e}")))
}

fn one() -> f64 {
    1.0
}

pub fn load(path: &Path) -> CliResult<(SimConfig, serde_json::Value)> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("cannot read config {}: {e}", path.display())))?;
    let raw: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: invalid JSON: {e}", path.display())))?;
    let cfg: SimConfig = serde_json::from_str(&text)
        .map_err(|e| CliError::new(EXIT_CONFIG, format!("{}: config error: {e}", path.display())))?;
    Ok((cfg, raw))
}
