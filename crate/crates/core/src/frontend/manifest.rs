use std::path::{Path, PathBuf};

use crate::error::{Error, Result};

/// One line of a dataset manifest: `utterance_id<TAB>speaker_or_-<TAB>wav_path`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    /// `None` for unlabeled utterances (written as `-`).
    pub speaker: Option<String>,
    pub path: PathBuf,
}

/// Parses a manifest. Relative wav paths resolve against the manifest's directory.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().unwrap_or(Path::new(""));
    parse_manifest(&text, base)
}

pub fn parse_manifest(text: &str, base: &Path) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        let [id, spk, wav] = fields.as_slice() else {
            return Err(Error::Config(format!(
                "manifest line {}: expected 3 tab-separated fields, got {}",
                lineno + 1,
                fields.len()
            )));
        };
        let wav = Path::new(wav);
        out.push(ManifestEntry {
            utterance_id: id.to_string(),
            speaker: (*spk != "-").then(|| spk.to_string()),
            path: if wav.is_absolute() {
                wav.to_path_buf()
            } else {
                base.join(wav)
            },
        });
    }
    Ok(out)
}

pub fn format_manifest(entries: &[ManifestEntry]) -> String {
    let mut s = String::new();
    for e in entries {
        s.push_str(&format!(
            "{}\t{}\t{}\n",
            e.utterance_id,
            e.speaker.as_deref().unwrap_or("-"),
            e.path.display()
        ));
    }
    s
}
