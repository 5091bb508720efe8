//! JSON Lines dataset manifests.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    /// Relative paths resolve against the manifest's directory.
    pub audio: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub events: Option<Vec<String>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub captions: Option<Vec<String>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub dir: PathBuf,
    pub records: Vec<ManifestRecord>,
}

impl Manifest {
    pub fn parse(text: &str, dir: impl Into<PathBuf>, origin: &str) -> Result<Self> {
        let mut records: Vec<ManifestRecord> = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let at = format!("{origin}:{}", i + 1);
            let r: ManifestRecord =
                serde_json::from_str(line).map_err(|e| Error::format("manifest", format!("{at}: {e}")))?;
            if r.events.is_none() && r.scene.is_none() && r.captions.is_none() {
                return Err(Error::format(
                    "manifest",
                    format!("{at}: record {:?} has no events, scene or captions", r.id),
                ));
            }
            if !seen.insert(r.id.clone()) {
                return Err(Error::format("manifest", format!("{at}: duplicate id {:?}", r.id)));
            }
            records.push(r);
        }
        if records.is_empty() {
            return Err(Error::format("manifest", format!("{origin}: no records")));
        }
        Ok(Manifest {
            dir: dir.into(),
            records,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, dir, &path.display().to_string())
    }

    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("plain record serializes") + "\n")
            .collect()
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    pub fn audio_path(&self, r: &ManifestRecord) -> PathBuf {
        let p = Path::new(&r.audio);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.dir.join(p)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_round_trips() {
        let text = r#"{"id":"a","audio":"a.wav","events":["chirp"],"scene":"windy_field","captions":["x y"]}
{"id":"b","audio":"/abs/b.wav","scene":"quiet_room"}
"#;
        let m = Manifest::parse(text, "/data", "m.jsonl").unwrap();
        assert_eq!(m.records.len(), 2);
        assert_eq!(m.records[1].events, None);
        assert_eq!(m.audio_path(&m.records[0]), PathBuf::from("/data/a.wav"));
        assert_eq!(m.audio_path(&m.records[1]), PathBuf::from("/abs/b.wav"));
        assert_eq!(m.to_jsonl(), text);
    }

    #[test]
    fn rejects_bad_records() {
        let err = |t: &str| match Manifest::parse(t, ".", "m") {
            Err(Error::Format { detail, .. }) => detail,
            other => panic!("{other:?}"),
        };
        assert!(err(r#"{"id":"a","audio":"a.wav"}"#).contains("\"a\""));
        assert!(err("{\"id\":\"a\",\"audio\":\"x\",\"scene\":\"s\"}\n{\"id\":\"a\",\"audio\":\"y\",\"scene\":\"s\"}").contains("duplicate"));
        assert!(err("not json").starts_with("m:1"));
        assert!(err("").contains("no records"));
    }
}
