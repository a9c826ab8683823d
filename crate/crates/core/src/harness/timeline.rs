//! Timeline files: timed inputs to replay against the controller.
//!
//! ```json
//! {"name": "exp3", "duration_ms": 15000,
//!  "entries": [{"t_ms": 0, "stream": "camera", "payload": {"frame": 0}, "work_us": 90000}]}
//! ```
//!
//! `work_us` overrides the owning module's default job cost and
//! `ground_truth` is carried along untouched.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimelineEntry {
    pub t_ms: u64,
    pub stream: String,
    #[serde(default)]
    pub payload: Value,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub work_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<Value>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Timeline {
    pub name: String,
    pub duration_ms: u64,
    pub entries: Vec<TimelineEntry>,
}

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("timeline is not valid JSON: {0}")]
    Json(String),
    #[error("timeline: {0}")]
    Schema(String),
    #[error("entry {index}: {message}")]
    Entry { index: usize, message: String },
    #[error("duration {duration_ms} ms ends before the last entry at {last_ms} ms")]
    Duration { duration_ms: u64, last_ms: u64 },
}

pub fn load_timeline(path: impl AsRef<Path>) -> Result<Timeline, TimelineError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| TimelineError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Timeline::from_json_str(&text)
}

impl Timeline {
    /// Parses and validates; entries out of time order are sorted (stable)
    /// with a warning.
    pub fn from_json_str(text: &str) -> Result<Timeline, TimelineError> {
        let doc: Value = serde_json::from_str(text).map_err(|e| TimelineError::Json(e.to_string()))?;
        let obj = doc.as_object().ok_or_else(|| TimelineError::Schema("top level must be an object".into()))?;
        let name = obj
            .get("name")
            .and_then(Value::as_str)
            .ok_or_else(|| TimelineError::Schema("`name` must be a string".into()))?
            .to_string();
        let duration_ms = obj
            .get("duration_ms")
            .and_then(Value::as_u64)
            .ok_or_else(|| TimelineError::Schema("`duration_ms` must be a non-negative integer".into()))?;
        let raw = obj
            .get("entries")
            .and_then(Value::as_array)
            .ok_or_else(|| TimelineError::Schema("`entries` must be an array".into()))?;
        if let Some(extra) = obj.keys().find(|k| !["name", "duration_ms", "entries"].contains(&k.as_str())) {
            return Err(TimelineError::Schema(format!("unknown field `{extra}`")));
        }
        let mut entries = Vec::with_capacity(raw.len());
        for (index, v) in raw.iter().enumerate() {
            let entry: TimelineEntry = serde_json::from_value(v.clone()).map_err(|e| TimelineError::Entry {
                index,
                message: e.to_string(),
            })?;
            if entry.stream.is_empty() {
                return Err(TimelineError::Entry {
                    index,
                    message: "empty stream name".into(),
                });
            }
            if entry.work_us == Some(0) {
                return Err(TimelineError::Entry {
                    index,
                    message: "work_us must be positive".into(),
                });
            }
            entries.push(entry);
        }
        let mut timeline = Timeline {
            name,
            duration_ms,
            entries,
        };
        timeline.normalize()?;
        Ok(timeline)
    }

    fn normalize(&mut self) -> Result<(), TimelineError> {
        if self.entries.windows(2).any(|w| w[0].t_ms > w[1].t_ms) {
            log::warn!("timeline `{}`: entries are not in time order; sorting them", self.name);
            self.entries.sort_by_key(|e| e.t_ms);
        }
        let last_ms = self.entries.last().map_or(0, |e| e.t_ms);
        if self.duration_ms < last_ms {
            return Err(TimelineError::Duration {
                duration_ms: self.duration_ms,
                last_ms,
            });
        }
        Ok(())
    }

    pub fn to_json_string(&self) -> String {
        serde_json::to_string_pretty(self).expect("timelines serialize")
    }
}

/// Running SHA-256 over the entries a replay consumed.
#[derive(Debug, Clone, Default)]
pub struct InputDigest(Sha256);

impl InputDigest {
    pub fn push(&mut self, entry: &TimelineEntry) {
        let line = serde_json::to_vec(entry).expect("entries serialize");
        self.0.update((line.len() as u64).to_le_bytes());
        self.0.update(&line);
    }

    pub fn hex(self) -> String {
        hex::encode(self.0.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn three_entries_parse_in_order() {
        let t = Timeline::from_json_str(
            r#"{"name": "t", "duration_ms": 50, "entries": [
                {"t_ms": 0, "stream": "imu", "payload": {"x": 1}},
                {"t_ms": 10, "stream": "mic", "payload": {}, "work_us": 5, "ground_truth": "yes"},
                {"t_ms": 50, "stream": "camera"}
            ]}"#,
        )
        .unwrap();
        assert_eq!(t.entries.len(), 3);
        assert_eq!(t.entries[1].work_us, Some(5));
        assert_eq!(t.entries[1].ground_truth, Some(Value::from("yes")));
        assert_eq!(t.entries[2].payload, Value::Null);
        assert_eq!(Timeline::from_json_str(&t.to_json_string()).unwrap(), t);
    }

    #[test]
    fn unsorted_entries_are_sorted() {
        let t = Timeline::from_json_str(
            r#"{"name": "t", "duration_ms": 9, "entries": [
                {"t_ms": 9, "stream": "b"}, {"t_ms": 1, "stream": "a"}, {"t_ms": 9, "stream": "c"}
            ]}"#,
        )
        .unwrap();
        let order: Vec<_> = t.entries.iter().map(|e| e.stream.as_str()).collect();
        assert_eq!(order, ["a", "b", "c"]);
    }

    #[test]
    fn errors_name_the_entry() {
        let err = Timeline::from_json_str(
            r#"{"name": "t", "duration_ms": 9, "entries": [{"t_ms": 1, "stream": "a"}, {"t_ms": 2, "payload": 1}]}"#,
        )
        .unwrap_err();
        match err {
            TimelineError::Entry { index, message } => {
                assert_eq!(index, 1);
                assert!(message.contains("stream"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = Timeline::from_json_str(r#"{"name": "t", "duration_ms": 9, "entries": [{"t_ms": 1, "stream": "a", "work_us": 0}]}"#);
        assert!(matches!(err, Err(TimelineError::Entry { index: 0, .. })));
        let err = Timeline::from_json_str(r#"{"name": "t", "duration_ms": 1, "entries": [{"t_ms": 2, "stream": "a"}]}"#);
        assert!(matches!(err, Err(TimelineError::Duration { .. })));
        assert!(matches!(Timeline::from_json_str("[]"), Err(TimelineError::Schema(_))));
        assert!(matches!(Timeline::from_json_str("{"), Err(TimelineError::Json(_))));
    }

    #[test]
    fn digest_depends_on_every_entry() {
        let e = |t| TimelineEntry {
            t_ms: t,
            stream: "a".into(),
            payload: Value::Null,
            work_us: None,
            ground_truth: None,
        };
        let digest = |es: &[TimelineEntry]| {
            let mut d = InputDigest::default();
            es.iter().for_each(|x| d.push(x));
            d.hex()
        };
        assert_eq!(digest(&[e(1), e(2)]), digest(&[e(1), e(2)]));
        assert_ne!(digest(&[e(1), e(2)]), digest(&[e(1), e(3)]));
        assert_eq!(digest(&[]).len(), 64);
    }
}
