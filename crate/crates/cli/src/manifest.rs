use qstate_core::io::LIBRARY_VERSION;
use serde_json::{json, Map, Value};
use sha2::{Digest, Sha256};
use std::path::Path;

/// Keys sorted at every level, so the digest ignores key order.
pub fn canonical(v: &Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut keys: Vec<&String> = m.keys().collect();
            keys.sort();
            let mut out = Map::new();
            for k in keys {
                out.insert(k.clone(), canonical(&m[k]));
            }
            Value::Object(out)
        }
        Value::Array(a) => Value::Array(a.iter().map(canonical).collect()),
        x => x.clone(),
    }
}

pub fn digest(v: &Value) -> String {
    let text = serde_json::to_string(&canonical(v)).expect("json serializes");
    let hash = Sha256::digest(text.as_bytes());
    hash.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn file_digest(path: &Path) -> Option<String> {
    let bytes = std::fs::read(path).ok()?;
    Some(Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect())
}

pub struct Manifest<'a> {
    pub argv: &'a [String],
    pub config_digest: Option<String>,
    pub inputs: Vec<&'a Path>,
    pub outputs: Vec<&'a Path>,
    pub seed: Option<u64>,
    pub wall_time_s: f64,
}

impl Manifest<'_> {
    pub fn to_json(&self) -> Value {
        let files = |v: &[&Path]| -> Vec<Value> {
            v.iter().map(|p| json!({"path": p.display().to_string(), "sha256": file_digest(p)})).collect()
        };
        json!({
            "command_line": self.argv,
            "config_digest": self.config_digest,
            "inputs": files(&self.inputs),
            "outputs": files(&self.outputs),
            "seed": self.seed,
            "tool_version": LIBRARY_VERSION,
            "wall_time_s": self.wall_time_s,
        })
    }
}
