//! Verification back-end: embedding extraction, cosine scoring, EER/minDCF
//! and embedding export.

mod metrics;

pub use metrics::{eer, min_dcf, operating_points, DcfConfig, OperatingPoint};

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use crate::encoder::{EncoderParams, Mode, MIN_FRAMES};
use crate::error::{Error, Result};
use crate::frontend::{load_wav, mean_normalize, utterance_features, ManifestEntry, Mfcc};
use crate::numerics::checkpoint::{ByteReader, ByteWriter};
use crate::numerics::Tensor;
use crate::par;

pub const EMBEDDING_MAGIC: &[u8; 4] = b"SPKE";

/// Utterance id to unit-norm embedding, ordered by id.
pub type Embeddings = BTreeMap<String, Vec<f32>>;

/// Which encoder output is used for scoring.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreOn {
    Embedding,
    Projection,
}

impl FromStr for ScoreOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "embedding" => Ok(Self::Embedding),
            "projection" => Ok(Self::Projection),
            other => Err(Error::Config(format!(
                "unknown scoring output `{other}` (expected embedding or projection)"
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Trial {
    pub target: bool,
    pub enroll: String,
    pub test: String,
}

pub fn parse_trials(text: &str) -> Result<Vec<Trial>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let target = match fields.as_slice() {
            ["1", _, _] => true,
            ["0", _, _] => false,
            _ => {
                return Err(Error::Eval(format!(
                    "trial line {}: expected `1|0 enroll test`, got `{line}`",
                    lineno + 1
                )))
            }
        };
        out.push(Trial {
            target,
            enroll: fields[1].to_string(),
            test: fields[2].to_string(),
        });
    }
    Ok(out)
}

pub fn read_trials(path: &Path) -> Result<Vec<Trial>> {
    parse_trials(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
}

pub fn format_trials(trials: &[Trial]) -> String {
    trials
        .iter()
        .map(|t| format!("{} {} {}\n", u8::from(t.target), t.enroll, t.test))
        .collect()
}

fn unit(v: &[f32]) -> Vec<f32> {
    let n = v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
    if n == 0.0 {
        return v.to_vec();
    }
    v.iter().map(|&x| (x as f64 / n) as f32).collect()
}

/// Encodes whole-utterance features (one forward pass each, eval mode).
/// Utterances shorter than the receptive field are skipped with a warning.
pub fn embed_features(
    params: &EncoderParams,
    utterances: &[(String, Tensor<f32>)],
    score_on: ScoreOn,
) -> Result<Embeddings> {
    let encoded = par::map(utterances, |(id, feats)| {
        if feats.rows() < MIN_FRAMES {
            log::warn!("skipping {id}: {} frames is below the receptive field", feats.rows());
            return Ok(None);
        }
        let mut f = feats.clone();
        mean_normalize(&mut f);
        let pair = params.encode(&[&f], Mode::Eval)?.pop().expect("one chunk in, one out");
        let v = match score_on {
            ScoreOn::Embedding => pair.embedding,
            ScoreOn::Projection => pair.projection,
        };
        Ok(Some((id.clone(), unit(&v))))
    });
    let mut out = Embeddings::new();
    for r in encoded {
        if let Some((id, v)) = r? {
            out.insert(id, v);
        }
    }
    Ok(out)
}

/// Loads, front-ends and encodes every manifest entry.
pub fn extract_embeddings(
    entries: &[ManifestEntry],
    params: &EncoderParams,
    mfcc: &Mfcc,
    score_on: ScoreOn,
) -> Result<Embeddings> {
    let features = par::map(entries, |e| {
        let w = load_wav(&e.path)?;
        utterance_features(&w, mfcc).map(|f| (e.utterance_id.clone(), f))
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    embed_features(params, &features, score_on)
}

/// Dot product of the stored unit embeddings for every trial.
pub fn score_trials(trials: &[Trial], emb: &Embeddings) -> Result<Vec<f64>> {
    let mut missing: Vec<&str> = trials
        .iter()
        .flat_map(|t| [t.enroll.as_str(), t.test.as_str()])
        .filter(|id| !emb.contains_key(*id))
        .collect();
    if !missing.is_empty() {
        missing.sort_unstable();
        missing.dedup();
        return Err(Error::Eval(format!("no embedding for: {}", missing.join(", "))));
    }
    Ok(trials
        .iter()
        .map(|t| {
            emb[&t.enroll]
                .iter()
                .zip(&emb[&t.test])
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        })
        .collect())
}

pub fn embeddings_to_bytes(emb: &Embeddings) -> Result<Vec<u8>> {
    let dim = emb
        .values()
        .next()
        .ok_or_else(|| Error::Contract("cannot export zero embeddings".into()))?
        .len();
    let mut w = ByteWriter::default();
    w.bytes(EMBEDDING_MAGIC);
    w.u32(emb.len() as u32);
    w.u32(dim as u32);
    for (id, v) in emb {
        if v.len() != dim {
            return Err(Error::shape("export_embeddings", format!("`{id}` has {} values, expected {dim}", v.len())));
        }
        w.string(id);
        w.f32s(v);
    }
    Ok(w.0)
}

pub fn embeddings_from_bytes(bytes: &[u8]) -> Result<Embeddings> {
    let mut r = ByteReader::new(bytes);
    if r.take(4)? != EMBEDDING_MAGIC {
        return Err(Error::Eval("not an embedding file (bad magic)".into()));
    }
    let count = r.u32()? as usize;
    let dim = r.u32()? as usize;
    let mut out = Embeddings::new();
    for _ in 0..count {
        let id = r.string()?;
        out.insert(id, r.f32s(dim)?);
    }
    if !r.is_done() {
        return Err(Error::Eval("trailing bytes after last embedding".into()));
    }
    Ok(out)
}

pub fn export_embeddings(emb: &Embeddings, path: &Path) -> Result<()> {
    std::fs::write(path, embeddings_to_bytes(emb)?).map_err(|e| Error::io(path, e))
}

pub fn import_embeddings(path: &Path) -> Result<Embeddings> {
    embeddings_from_bytes(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Verification results.
#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub trials: usize,
    pub targets: usize,
    pub eer: f64,
    pub eer_threshold: f64,
    pub min_dcf: f64,
    pub dcf_threshold: f64,
    pub p_target: f64,
}

impl Report {
    pub fn compute(trials: &[Trial], scores: &[f64], dcf: &DcfConfig) -> Result<Self> {
        let labels: Vec<bool> = trials.iter().map(|t| t.target).collect();
        let points = operating_points(scores, &labels)?;
        dcf.validate()?;
        let (eer, eer_threshold) = metrics::eer_from_points(&points);
        let (min_dcf, dcf_threshold) = metrics::min_dcf_from_points(&points, dcf);
        Ok(Self {
            trials: trials.len(),
            targets: labels.iter().filter(|&&t| t).count(),
            eer,
            eer_threshold,
            min_dcf,
            dcf_threshold,
            p_target: dcf.p_target,
        })
    }

    /// `key=value` lines.
    pub fn to_kv(&self) -> String {
        format!(
            "trials={}\ntargets={}\neer={}\neer_threshold={}\nmin_dcf={}\ndcf_threshold={}\np_target={}\n",
            self.trials, self.targets, self.eer, self.eer_threshold, self.min_dcf, self.dcf_threshold, self.p_target
        )
    }

    pub fn parse_kv(text: &str) -> Result<Self> {
        let mut map = BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Eval(format!("report line without `=`: `{line}`")))?;
            map.insert(k.trim(), v.trim());
        }
        fn get<T: FromStr>(map: &BTreeMap<&str, &str>, key: &str) -> Result<T> {
            map.get(key)
                .ok_or_else(|| Error::Eval(format!("report is missing `{key}`")))?
                .parse()
                .map_err(|_| Error::Eval(format!("report field `{key}` does not parse")))
        }
        Ok(Self {
            trials: get(&map, "trials")?,
            targets: get(&map, "targets")?,
            eer: get(&map, "eer")?,
            eer_threshold: get(&map, "eer_threshold")?,
            min_dcf: get(&map, "min_dcf")?,
            dcf_threshold: get(&map, "dcf_threshold")?,
            p_target: get(&map, "p_target")?,
        })
    }

    pub fn to_table(&self) -> String {
        format!(
            "trials      {:>8}  ({} target / {} nontarget)\n\
             EER         {:>7.2}%  (threshold {:.4})\n\
             minDCF      {:>8.4}  (p_target {}, threshold {:.4})\n",
            self.trials,
            self.targets,
            self.trials - self.targets,
            100.0 * self.eer,
            self.eer_threshold,
            self.min_dcf,
            self.p_target,
            self.dcf_threshold
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn trials_round_trip() {
        let text = "1 a b\n0 a c\n";
        let t = parse_trials(text).unwrap();
        assert_eq!(t.len(), 2);
        assert!(t[0].target && !t[1].target);
        assert_eq!(format_trials(&t), text);
        assert!(parse_trials("2 a b\n").is_err());
    }

    #[test]
    fn cosine_scores() {
        let mut emb = Embeddings::new();
        emb.insert("x".into(), vec![1.0, 0.0]);
        emb.insert("y".into(), vec![0.0, 1.0]);
        emb.insert("z".into(), vec![-1.0, 0.0]);
        let trial = |a: &str, b: &str| Trial {
            target: true,
            enroll: a.into(),
            test: b.into(),
        };
        let s = score_trials(&[trial("x", "x"), trial("x", "y"), trial("x", "z")], &emb).unwrap();
        assert_eq!(s, vec![1.0, 0.0, -1.0]);
        let err = score_trials(&[trial("x", "q"), trial("w", "q")], &emb).unwrap_err();
        assert!(err.to_string().contains("q, w"));
    }

    #[test]
    fn export_layout() {
        let mut emb = Embeddings::new();
        emb.insert("utt-1".into(), vec![0.5, -0.25, 1.0]);
        emb.insert("u2".into(), vec![0.0, 1.0, f32::MIN_POSITIVE]);
        let bytes = embeddings_to_bytes(&emb).unwrap();
        assert_eq!(bytes.len(), 12 + (4 + 5 + 12) + (4 + 2 + 12));
        assert_eq!(embeddings_from_bytes(&bytes).unwrap(), emb);
        assert!(embeddings_to_bytes(&Embeddings::new()).is_err());
    }

    #[test]
    fn report_round_trip() {
        let r = Report {
            trials: 10,
            targets: 5,
            eer: 0.1234567891234,
            eer_threshold: -0.25,
            min_dcf: 0.5,
            dcf_threshold: 0.75,
            p_target: 0.01,
        };
        assert_eq!(Report::parse_kv(&r.to_kv()).unwrap(), r);
        assert!(r.to_table().contains("12.35%"));
    }
}
