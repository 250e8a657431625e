use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CorpusSpec, Utterance, GENERATOR_VERSION};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub const FEATURE_MAGIC: &[u8; 4] = b"VEF1";
pub const LABEL_MAGIC: &[u8; 4] = b"VEL1";
const MANIFEST: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub features: String,
    pub labels: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub generator: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spec: Option<CorpusSpec>,
    pub utterances: Vec<ManifestEntry>,
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        context: path.display().to_string(),
        offset,
        message: message.into(),
    }
}

fn u32_at(bytes: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap())
}

fn header(path: &Path, bytes: &[u8], magic: &[u8; 4], words: usize) -> Result<Vec<u32>> {
    let need = 4 + 4 * words;
    if bytes.len() < need {
        return Err(format_err(
            path,
            bytes.len(),
            format!("header needs {need} bytes, file has {}", bytes.len()),
        ));
    }
    if &bytes[..4] != magic {
        return Err(format_err(
            path,
            0,
            format!("bad magic, expected {:?}", String::from_utf8_lossy(magic)),
        ));
    }
    Ok((0..words).map(|i| u32_at(bytes, 4 + 4 * i)).collect())
}

pub fn encode_features(features: &Tensor) -> Vec<u8> {
    let mut out = Vec::with_capacity(12 + 4 * features.len());
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    out.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
    out
}

pub fn decode_features(path: &Path, bytes: &[u8]) -> Result<Tensor> {
    let h = header(path, bytes, FEATURE_MAGIC, 2)?;
    let (t, f) = (h[0] as usize, h[1] as usize);
    let body = &bytes[12..];
    if body.len() != 4 * t * f {
        return Err(format_err(
            path,
            12,
            format!(
                "header declares T={t}, F={f} ({} values) but the body holds {} bytes ({} values)",
                t * f,
                body.len(),
                body.len() as f64 / 4.0
            ),
        ));
    }
    let data = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::matrix(t, f, data)
}

pub fn encode_labels(labels: &[usize]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * labels.len());
    out.extend_from_slice(LABEL_MAGIC);
    out.extend_from_slice(&(labels.len() as u32).to_le_bytes());
    for &l in labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    out
}

pub fn decode_labels(path: &Path, bytes: &[u8]) -> Result<Vec<usize>> {
    let t = header(path, bytes, LABEL_MAGIC, 1)?[0] as usize;
    let body = &bytes[8..];
    if body.len() != 4 * t {
        return Err(format_err(
            path,
            8,
            format!(
                "header declares T={t} labels but the body holds {} bytes",
                body.len()
            ),
        ));
    }
    Ok(body
        .chunks_exact(4)
        .map(|c| u32::from_le_bytes(c.try_into().unwrap()) as usize)
        .collect())
}

pub fn write_features(path: &Path, features: &Tensor) -> Result<()> {
    fs::write(path, encode_features(features)).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(path, &bytes)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Writes feature and label files plus `manifest.json` under `dir`.
pub fn write_corpus(corpus: &[Utterance], dir: &Path, spec: Option<&CorpusSpec>) -> Result<()> {
    create_dir(&dir.join("features"))?;
    create_dir(&dir.join("labels"))?;
    let mut entries = Vec::with_capacity(corpus.len());
    for u in corpus {
        if u.id.is_empty() || u.id.contains(['/', '\\']) || u.id.starts_with('.') {
            return Err(Error::Invalid(format!(
                "utterance id `{}` is not a plain file name",
                u.id
            )));
        }
        let features = format!("features/{}.vef", u.id);
        let labels = format!("labels/{}.vel", u.id);
        write_features(&dir.join(&features), &u.features)?;
        let lpath = dir.join(&labels);
        fs::write(&lpath, encode_labels(&u.phonemes)).map_err(|e| Error::io(&lpath, e))?;
        entries.push(ManifestEntry {
            id: u.id.clone(),
            features,
            labels,
            truth: u.truth.clone(),
        });
    }
    let manifest = Manifest {
        generator: GENERATOR_VERSION.to_owned(),
        spec: spec.cloned(),
        utterances: entries,
    };
    let mut text = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    text.push('\n');
    let mpath = dir.join(MANIFEST);
    fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))
}

fn required(dir: &Path, id: &str, rel: &str) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    match fs::read(&path) {
        Ok(b) => Ok((path, b)),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Err(Error::MissingFile {
            id: id.to_owned(),
            path,
        }),
        Err(e) => Err(Error::io(path, e)),
    }
}

pub fn read_corpus(dir: &Path) -> Result<(Vec<Utterance>, Manifest)> {
    let mpath = dir.join(MANIFEST);
    let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Format {
        context: mpath.display().to_string(),
        offset: 0,
        message: e.to_string(),
    })?;
    let mut corpus = Vec::with_capacity(manifest.utterances.len());
    for entry in &manifest.utterances {
        let (fpath, fbytes) = required(dir, &entry.id, &entry.features)?;
        let features = decode_features(&fpath, &fbytes)?;
        let (lpath, lbytes) = required(dir, &entry.id, &entry.labels)?;
        let phonemes = decode_labels(&lpath, &lbytes)?;
        if phonemes.len() != features.rows() {
            return Err(Error::dim(
                format!("label count of `{}`", entry.id),
                features.rows(),
                phonemes.len(),
            ));
        }
        corpus.push(Utterance {
            id: entry.id.clone(),
            features,
            phonemes,
            truth: entry.truth.clone(),
        });
    }
    Ok((corpus, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthdata::gen_corpus;

    fn spec() -> CorpusSpec {
        CorpusSpec {
            utterances: 5,
            mean_len: 8,
            len_spread: 2,
            feature_dim: 3,
            ..CorpusSpec::default()
        }
    }

    fn tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
        let mut out = Vec::new();
        for sub in ["features", "labels"] {
            let mut names: Vec<_> = fs::read_dir(dir.join(sub))
                .unwrap()
                .map(|e| e.unwrap().path())
                .collect();
            names.sort();
            for p in names {
                out.push((p.display().to_string(), fs::read(&p).unwrap()));
            }
        }
        out.push(("m".into(), fs::read(dir.join(MANIFEST)).unwrap()));
        out
    }

    #[test]
    fn round_trip_bytes() {
        let s = spec();
        let (corpus, _) = gen_corpus(&s).unwrap();
        let a = tempfile::tempdir().unwrap();
        write_corpus(&corpus, a.path(), Some(&s)).unwrap();
        let (back, manifest) = read_corpus(a.path()).unwrap();
        assert_eq!(back, corpus);
        assert_eq!(manifest.spec.as_ref(), Some(&s));
        let b = tempfile::tempdir().unwrap();
        write_corpus(&back, b.path(), manifest.spec.as_ref()).unwrap();
        let strip = |t: Vec<(String, Vec<u8>)>, d: &Path| {
            t.into_iter()
                .map(|(n, b)| (n.replace(&d.display().to_string(), ""), b))
                .collect::<Vec<_>>()
        };
        assert_eq!(
            strip(tree(a.path()), a.path()),
            strip(tree(b.path()), b.path())
        );
    }

    #[test]
    fn missing_file_names_id() {
        let (corpus, _) = gen_corpus(&spec()).unwrap();
        let d = tempfile::tempdir().unwrap();
        write_corpus(&corpus, d.path(), None).unwrap();
        fs::remove_file(d.path().join("features/utt00002.vef")).unwrap();
        match read_corpus(d.path()) {
            Err(Error::MissingFile { id, .. }) => assert_eq!(id, "utt00002"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn length_mismatch_reports_counts() {
        let t = Tensor::matrix(2, 3, vec![1.0; 6]).unwrap();
        let mut bytes = encode_features(&t);
        bytes.truncate(bytes.len() - 4);
        let err = decode_features(Path::new("x.vef"), &bytes).unwrap_err();
        let msg = err.to_string();
        assert!(
            msg.contains("T=2") && msg.contains("F=3") && msg.contains("6 values"),
            "{msg}"
        );
        let mut bad = encode_labels(&[1, 2]);
        bad[1] = b'X';
        assert!(matches!(
            decode_labels(Path::new("x.vel"), &bad),
            Err(Error::Format { offset: 0, .. })
        ));
        assert!(decode_labels(Path::new("x.vel"), &bad[..3]).is_err());
    }
}
