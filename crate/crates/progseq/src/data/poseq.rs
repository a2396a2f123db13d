//! Pose sequence file format and corpus directory layout.
//!
//! `POSEQ1` is a plain-text format: line 1 is the header
//! `POSEQ1 <J> <U>`, followed by `U` lines of `3J+1` space-separated
//! decimal floats (joint coordinates then counter), UTF-8 with LF
//! endings. Floats are written with Rust's shortest round-trip
//! formatting, so identical data produces identical bytes.
//!
//! A corpus directory holds `manifest.json` (seed, vocabulary, split
//! membership), one pose file per sentence, and one per template.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::pose::PoseSequence;
use super::{Corpus, DataError, SentencePair, SymbolTemplate, Vocabulary};

/// Serializes a pose sequence to POSEQ1 bytes.
pub fn poseq_to_string(seq: &PoseSequence) -> String {
    let mut out = String::new();
    out.push_str(&format!("POSEQ1 {} {}\n", seq.joint_count(), seq.len()));
    let dim = seq.dim();
    for u in 0..seq.len() {
        let frame = seq.frame(u);
        let mut line = String::new();
        for j in 0..dim {
            line.push_str(&frame[j].to_string());
            line.push(' ');
        }
        line.push_str(&seq.counters()[u].to_string());
        out.push_str(&line);
        out.push('\n');
    }
    out
}

/// Parses POSEQ1 text; errors carry 1-based line numbers.
pub fn poseq_from_str(text: &str, path: &str) -> Result<PoseSequence, DataError> {
    let err = |line: usize, msg: String| DataError::PoseqParse {
        path: path.to_string(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| err(1, "empty file".into()))?;
    let mut parts = header.split_whitespace();
    if parts.next() != Some("POSEQ1") {
        return Err(err(1, format!("bad magic in header `{header}`")));
    }
    let joints: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(1, "header joint count missing or invalid".into()))?;
    let frame_count: usize = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| err(1, "header frame count missing or invalid".into()))?;
    if parts.next().is_some() {
        return Err(err(1, "trailing fields in header".into()));
    }
    let dim = 3 * joints;
    let mut frames = Vec::with_capacity(frame_count * dim);
    let mut counters = Vec::with_capacity(frame_count);
    for (i, line) in lines.enumerate() {
        let line_no = i + 2;
        if i >= frame_count {
            if line.trim().is_empty() {
                continue;
            }
            return Err(err(line_no, "more data lines than header frame count".into()));
        }
        let values: Result<Vec<f64>, _> = line.split_whitespace().map(str::parse).collect();
        let values =
            values.map_err(|e| err(line_no, format!("unparseable float: {e}")))?;
        if values.len() != dim + 1 {
            return Err(err(
                line_no,
                format!("expected {} values, found {}", dim + 1, values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(err(line_no, "non-finite value".into()));
        }
        frames.extend_from_slice(&values[..dim]);
        counters.push(values[dim]);
    }
    if counters.len() != frame_count {
        return Err(err(
            counters.len() + 1,
            format!("header promised {frame_count} frames, found {}", counters.len()),
        ));
    }
    PoseSequence::with_counters(frames, counters, joints)
}

pub fn write_poseq(seq: &PoseSequence, path: &Path) -> Result<(), DataError> {
    fs::write(path, poseq_to_string(seq)).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read_poseq(path: &Path) -> Result<PoseSequence, DataError> {
    let text = fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })?;
    poseq_from_str(&text, &path.display().to_string())
}

#[derive(Debug, Serialize, Deserialize)]
struct CorpusManifest {
    format: String,
    seed: u64,
    joints: usize,
    vocab: Vec<String>,
    sentences: Vec<SentenceEntry>,
    templates: Vec<TemplateEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
struct SentenceEntry {
    id: usize,
    split: String,
    tokens: Vec<String>,
    file: String,
}

#[derive(Debug, Serialize, Deserialize)]
struct TemplateEntry {
    token: String,
    file: String,
}

const MANIFEST_FORMAT: &str = "PROGSEQ-CORPUS1";

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Writes the corpus directory: manifest, per-sentence pose files, and
/// per-template pose files. Output bytes are a pure function of the
/// corpus contents.
pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), DataError> {
    let poses = dir.join("poses");
    let templates = dir.join("templates");
    fs::create_dir_all(&poses).map_err(io_err(&poses))?;
    fs::create_dir_all(&templates).map_err(io_err(&templates))?;

    let mut sentences = Vec::new();
    let mut id = 0usize;
    for (split, pairs) in [
        ("train", &corpus.train),
        ("dev", &corpus.dev),
        ("test", &corpus.test),
    ] {
        for pair in pairs.iter() {
            let file = format!("poses/s{id:05}.poseq");
            write_poseq(&pair.pose, &dir.join(&file))?;
            sentences.push(SentenceEntry {
                id,
                split: split.to_string(),
                tokens: pair.token_strings(&corpus.vocab),
                file,
            });
            id += 1;
        }
    }

    let mut template_entries = Vec::new();
    for template in &corpus.templates {
        let token = corpus.vocab.token(template.token_index).to_string();
        let file = format!("templates/{token}.poseq");
        let seq = PoseSequence::counter_encode(template.frames.clone(), corpus.joint_count)
            .expect("templates are non-empty");
        write_poseq(&seq, &dir.join(&file))?;
        template_entries.push(TemplateEntry { token, file });
    }

    let manifest = CorpusManifest {
        format: MANIFEST_FORMAT.to_string(),
        seed: corpus.seed,
        joints: corpus.joint_count,
        vocab: corpus.vocab.content_tokens().to_vec(),
        sentences,
        templates: template_entries,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| DataError::Manifest(e.to_string()))?;
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, json + "\n").map_err(io_err(&manifest_path))?;
    Ok(())
}

/// Reads a corpus directory written by [`save_corpus`].
pub fn load_corpus(dir: &Path) -> Result<Corpus, DataError> {
    let manifest_path = dir.join("manifest.json");
    let text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: CorpusManifest =
        serde_json::from_str(&text).map_err(|e| DataError::Manifest(e.to_string()))?;
    if manifest.format != MANIFEST_FORMAT {
        return Err(DataError::Manifest(format!(
            "unsupported format `{}`",
            manifest.format
        )));
    }
    let vocab = Vocabulary::new(manifest.vocab);

    let mut templates = vec![None; vocab.content_len()];
    for entry in &manifest.templates {
        let token_index = vocab.lookup(&entry.token)?;
        let seq = read_poseq(&dir.join(&entry.file))?;
        templates[token_index] = Some(SymbolTemplate {
            token_index,
            len: seq.len(),
            frames: seq.frames().to_vec(),
        });
    }
    let templates: Vec<SymbolTemplate> = templates
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            t.ok_or_else(|| {
                DataError::Manifest(format!("missing template for token `{}`", vocab.token(i)))
            })
        })
        .collect::<Result<_, _>>()?;

    let (mut train, mut dev, mut test) = (Vec::new(), Vec::new(), Vec::new());
    for entry in &manifest.sentences {
        let tokens = entry
            .tokens
            .iter()
            .map(|t| vocab.lookup(t))
            .collect::<Result<Vec<_>, _>>()?;
        let pose = read_poseq(&dir.join(&entry.file))?;
        let pair = SentencePair { tokens, pose };
        match entry.split.as_str() {
            "train" => train.push(pair),
            "dev" => dev.push(pair),
            "test" => test.push(pair),
            other => {
                return Err(DataError::Manifest(format!(
                    "sentence {} has unknown split `{other}`",
                    entry.id
                )))
            }
        }
    }

    Ok(Corpus {
        seed: manifest.seed,
        joint_count: manifest.joints,
        vocab,
        templates,
        train,
        dev,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::generate_corpus;

    #[test]
    fn poseq_round_trips_exactly() {
        let frames = vec![0.1, -0.25, 1e-9, 3.5, 0.7778123, -2.0];
        let seq = PoseSequence::counter_encode(frames, 1).unwrap();
        let text = poseq_to_string(&seq);
        assert!(text.starts_with("POSEQ1 1 2\n"));
        let back = poseq_from_str(&text, "mem").unwrap();
        assert_eq!(back, seq);
        // identical content writes identical bytes
        assert_eq!(text, poseq_to_string(&back));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let bad_header = poseq_from_str("POSEXX 1 2\n", "f").unwrap_err();
        assert!(bad_header.to_string().contains("f:1:"), "{bad_header}");

        let bad_line = poseq_from_str("POSEQ1 1 2\n0 0 0 0.5\n0 zz 0 1\n", "f").unwrap_err();
        assert!(bad_line.to_string().contains("f:3:"), "{bad_line}");

        let wrong_arity = poseq_from_str("POSEQ1 1 1\n0 0 1.0\n", "f").unwrap_err();
        assert!(wrong_arity.to_string().contains("expected 4 values"), "{wrong_arity}");
    }

    #[test]
    fn corpus_directory_round_trips() {
        let dir = std::env::temp_dir().join(format!("poseq-test-{}", std::process::id()));
        let _ = fs::remove_dir_all(&dir);
        let corpus = generate_corpus(21, 4, 10, 2).unwrap();
        save_corpus(&corpus, &dir).unwrap();
        let loaded = load_corpus(&dir).unwrap();
        assert_eq!(loaded.seed, corpus.seed);
        assert_eq!(loaded.vocab, corpus.vocab);
        assert_eq!(loaded.templates, corpus.templates);
        assert_eq!(loaded.train, corpus.train);
        assert_eq!(loaded.dev, corpus.dev);
        assert_eq!(loaded.test, corpus.test);
        fs::remove_dir_all(&dir).unwrap();
    }
}
