use std::io::Write;

use serde_json::{json, Map, Value};

use crate::data::config::RunConfig;
use crate::data::synth::GENERATOR_VERSION;
use crate::Result;

/// JSON-lines appender; every record carries the config hash, seed and
/// generator version.
pub struct MetricsWriter<W: Write> {
    out: W,
    stamp: Map<String, Value>,
}

impl<W: Write> MetricsWriter<W> {
    pub fn new(out: W, cfg: &RunConfig) -> Self {
        let mut stamp = Map::new();
        stamp.insert("config_hash".into(), json!(cfg.hash()));
        stamp.insert("seed".into(), json!(cfg.seed));
        stamp.insert("generator_version".into(), json!(GENERATOR_VERSION));
        MetricsWriter { out, stamp }
    }

    /// Write `record` (a JSON object) tagged with `kind` and the stamp.
    pub fn write(&mut self, kind: &str, record: Value) -> Result<()> {
        let mut obj = Map::new();
        obj.insert("kind".into(), json!(kind));
        if let Value::Object(fields) = record {
            obj.extend(fields);
        }
        obj.extend(self.stamp.clone());
        serde_json::to_writer(&mut self.out, &Value::Object(obj))?;
        self.out.write_all(b"\n")?;
        self.out.flush()?;
        Ok(())
    }

    pub fn write_config(&mut self, cfg: &RunConfig) -> Result<()> {
        self.write("config", json!({ "config": cfg }))
    }

    pub fn into_inner(self) -> W {
        self.out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn records_are_stamped() {
        let cfg = RunConfig::default();
        let mut w = MetricsWriter::new(Vec::new(), &cfg);
        w.write_config(&cfg).unwrap();
        w.write("step", json!({"step": 1, "l_total": 0.5})).unwrap();
        let text = String::from_utf8(w.into_inner()).unwrap();
        let lines: Vec<Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 2);
        for l in &lines {
            assert_eq!(l["config_hash"], json!(cfg.hash()));
            assert_eq!(l["seed"], json!(7));
            assert_eq!(l["generator_version"], json!(GENERATOR_VERSION));
        }
        assert_eq!(lines[1]["kind"], "step");
        let back: RunConfig = serde_json::from_value(lines[0]["config"].clone()).unwrap();
        assert_eq!(back, cfg);
    }
}
