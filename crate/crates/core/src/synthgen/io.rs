//! On-disk dataset layout:
//!
//! ```text
//! <dir>/manifest.json
//! <dir>/seq_<k>/frame_<t>.ppm
//! <dir>/seq_<k>/labels.jsonl
//! ```
//!
//! Training sequences come first (`seq_0 .. seq_{train-1}`), then the test
//! split. The manifest carries the generator config, seed, counts and a
//! SHA-256 checksum for every file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Dataset, GeneratorConfig, GroundTruthObject, LabeledSequence};
use crate::error::{MocError, Result};
use crate::geometry::{BoundingBox, FrameSequence};
use crate::raster::{decode_ppm, encode_ppm};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: GeneratorConfig,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub seq_len: usize,
    pub sequence_seeds: Vec<u64>,
    /// Relative path -> hex SHA-256.
    pub checksums: BTreeMap<String, String>,
}

const FORMAT: &str = "moc-sprites/1";

#[derive(Serialize, Deserialize)]
struct LabelLine {
    frame: usize,
    objects: Vec<GroundTruthObject>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn write_file(dir: &Path, rel: &str, bytes: &[u8], sums: &mut BTreeMap<String, String>) -> Result<()> {
    let path = dir.join(rel);
    fs::write(&path, bytes).map_err(|e| MocError::io(&path, e))?;
    sums.insert(rel.to_string(), sha256_hex(bytes));
    Ok(())
}

fn encode_labels(labels: &[Vec<GroundTruthObject>]) -> String {
    let mut s = String::new();
    for (t, objects) in labels.iter().enumerate() {
        let _ = write!(s, "{{\"frame\":{t},\"objects\":[");
        for (i, o) in objects.iter().enumerate() {
            if i > 0 {
                s.push(',');
            }
            let b = &o.bbox;
            let _ = write!(
                s,
                "{{\"x_min\":{:.6},\"y_min\":{:.6},\"x_max\":{:.6},\"y_max\":{:.6},\"class\":{},\"relevant\":{}}}",
                b.x_min, b.y_min, b.x_max, b.y_max, o.class, o.relevant
            );
        }
        s.push_str("]}\n");
    }
    s
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| MocError::io(dir, e))?;
    let mut sums = BTreeMap::new();
    let mut seeds = Vec::new();
    for (k, seq) in dataset.all_sequences().enumerate() {
        let rel_dir = format!("seq_{k}");
        let seq_dir = dir.join(&rel_dir);
        fs::create_dir_all(&seq_dir).map_err(|e| MocError::io(&seq_dir, e))?;
        for (t, frame) in seq.sequence.frames().iter().enumerate() {
            write_file(dir, &format!("{rel_dir}/frame_{t}.ppm"), &encode_ppm(frame), &mut sums)?;
        }
        write_file(
            dir,
            &format!("{rel_dir}/labels.jsonl"),
            encode_labels(&seq.labels).as_bytes(),
            &mut sums,
        )?;
        seeds.push(seq.seed);
    }
    let manifest = Manifest {
        format: FORMAT.into(),
        seed: dataset.seed,
        config: dataset.config.clone(),
        train_sequences: dataset.train.len(),
        test_sequences: dataset.test.len(),
        seq_len: dataset.config.seq_len,
        sequence_seeds: seeds,
        checksums: sums,
    };
    let path = dir.join("manifest.json");
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&path, text).map_err(|e| MocError::io(&path, e))?;
    Ok(manifest)
}

fn read_checked(dir: &Path, rel: &str, manifest: &Manifest) -> Result<(PathBuf, Vec<u8>)> {
    let path = dir.join(rel);
    let bytes = fs::read(&path).map_err(|e| MocError::io(&path, e))?;
    match manifest.checksums.get(rel) {
        Some(sum) if *sum == sha256_hex(&bytes) => Ok((path, bytes)),
        _ => Err(MocError::Checksum(path)),
    }
}

fn parse_labels(path: &Path, text: &str, seq_len: usize) -> Result<Vec<Vec<GroundTruthObject>>> {
    let mut out = Vec::with_capacity(seq_len);
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: LabelLine = serde_json::from_str(line).map_err(|e| MocError::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg: e.to_string(),
        })?;
        if parsed.frame != out.len() {
            return Err(MocError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected frame {}, found {}", out.len(), parsed.frame),
            });
        }
        let objects = parsed
            .objects
            .into_iter()
            .map(|o| GroundTruthObject {
                bbox: BoundingBox::new(o.bbox.x_min, o.bbox.y_min, o.bbox.x_max, o.bbox.y_max),
                ..o
            })
            .collect();
        out.push(objects);
    }
    if out.len() != seq_len {
        return Err(MocError::Parse {
            path: path.to_path_buf(),
            line: text.lines().count() + 1,
            msg: format!("expected {seq_len} frames of labels, found {}", out.len()),
        });
    }
    Ok(out)
}

pub fn load_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| MocError::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| MocError::Parse {
        path,
        line: e.line(),
        msg: e.to_string(),
    })
}

/// Loads a dataset written by [`save_dataset`], verifying every checksum.
pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = load_manifest(dir)?;
    let total = manifest.train_sequences + manifest.test_sequences;
    if manifest.sequence_seeds.len() != total {
        return Err(MocError::Parse {
            path: dir.join("manifest.json"),
            line: 1,
            msg: "sequence_seeds does not match the sequence count".into(),
        });
    }
    let mut sequences = Vec::with_capacity(total);
    for k in 0..total {
        let mut frames = Vec::with_capacity(manifest.seq_len);
        for t in 0..manifest.seq_len {
            let (path, bytes) = read_checked(dir, &format!("seq_{k}/frame_{t}.ppm"), &manifest)?;
            frames.push(decode_ppm(&bytes, &path)?);
        }
        let (path, bytes) = read_checked(dir, &format!("seq_{k}/labels.jsonl"), &manifest)?;
        let text = String::from_utf8_lossy(&bytes);
        let labels = parse_labels(&path, &text, manifest.seq_len)?;
        sequences.push(LabeledSequence {
            sequence: FrameSequence::new(frames)?,
            labels,
            seed: manifest.sequence_seeds[k],
        });
    }
    let test = sequences.split_off(manifest.train_sequences);
    Ok(Dataset {
        config: manifest.config,
        seed: manifest.seed,
        train: sequences,
        test,
    })
}
