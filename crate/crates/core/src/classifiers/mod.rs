//! Classical classifiers over extracted feature vectors, plus the FEAT
//! feature-file format they are trained from.
//!
//! The FEAT file starts with magic `FEAT`, a version, record count, feature
//! dim, and the class table, then one record per sample: label index, video
//! id, and `dim` little-endian f32 values. Round-trips are bit-exact.

mod knn;
mod svm;
mod tree;

pub use knn::knn_predict;
pub use svm::{svm_predict, svm_train, PairwiseMachine, SvmModel};
pub use tree::{tree_predict, tree_train, TreeNode};

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, WriteBytesExt};

use crate::error::{Error, Result};

const FEAT_MAGIC: &[u8; 4] = b"FEAT";
const FEAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRecord {
    pub features: Vec<f32>,
    pub label: usize,
    pub video_id: String,
}

/// A set of fixed-dimension feature vectors with labels and video ids.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub classes: Vec<String>,
    pub records: Vec<FeatureRecord>,
}

impl FeatureSet {
    pub fn new(dim: usize, classes: Vec<String>) -> Result<FeatureSet> {
        if dim == 0 {
            return Err(Error::Config("feature dim must be positive".into()));
        }
        if classes.is_empty() {
            return Err(Error::Config("class table must not be empty".into()));
        }
        Ok(FeatureSet {
            dim,
            classes,
            records: Vec::new(),
        })
    }

    pub fn push(&mut self, record: FeatureRecord) -> Result<()> {
        if record.features.len() != self.dim {
            return Err(Error::Shape(format!(
                "feature vector length {} does not match set dim {}",
                record.features.len(),
                self.dim
            )));
        }
        if record.label >= self.classes.len() {
            return Err(Error::Data(format!(
                "label index {} out of range for {} classes",
                record.label,
                self.classes.len()
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Label indices present in the set, ascending and deduplicated.
    pub fn present_labels(&self) -> Vec<usize> {
        let mut labels: Vec<usize> = self.records.iter().map(|r| r.label).collect();
        labels.sort_unstable();
        labels.dedup();
        labels
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(FEAT_MAGIC)?;
        w.write_u32::<LittleEndian>(FEAT_VERSION)?;
        w.write_u32::<LittleEndian>(self.records.len() as u32)?;
        w.write_u32::<LittleEndian>(self.dim as u32)?;
        w.write_u32::<LittleEndian>(self.classes.len() as u32)?;
        for class in &self.classes {
            write_string(&mut w, class)?;
        }
        for r in &self.records {
            w.write_u32::<LittleEndian>(r.label as u32)?;
            write_string(&mut w, &r.video_id)?;
            for &v in &r.features {
                w.write_f32::<LittleEndian>(v)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<FeatureSet> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        read_or_truncated(&mut r, &mut magic, "magic")?;
        if &magic != FEAT_MAGIC {
            return Err(Error::BadMagic {
                expected: "FEAT",
                found: String::from_utf8_lossy(&magic).into_owned(),
            });
        }
        let version = read_u32(&mut r, "version")?;
        if version != FEAT_VERSION {
            return Err(Error::BadVersion {
                expected: FEAT_VERSION,
                found: version,
            });
        }
        let count = read_u32(&mut r, "record count")? as usize;
        let dim = read_u32(&mut r, "dim")? as usize;
        let class_count = read_u32(&mut r, "class count")? as usize;
        let mut classes = Vec::with_capacity(class_count);
        for _ in 0..class_count {
            classes.push(read_string(&mut r, "class name")?);
        }
        let mut set = FeatureSet::new(dim, classes)?;
        for _ in 0..count {
            let label = read_u32(&mut r, "label")? as usize;
            let video_id = read_string(&mut r, "video id")?;
            let mut bytes = vec![0u8; dim * 4];
            read_or_truncated(&mut r, &mut bytes, "feature data")?;
            let features = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            set.push(FeatureRecord {
                features,
                label,
                video_id,
            })?;
        }
        let mut trailing = [0u8; 1];
        if r.read(&mut trailing)? != 0 {
            return Err(Error::Data("trailing bytes after final record".into()));
        }
        Ok(set)
    }
}

fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u32::<LittleEndian>(s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_string(r: &mut impl Read, what: &str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    let mut bytes = vec![0u8; len];
    read_or_truncated(r, &mut bytes, what)?;
    String::from_utf8(bytes).map_err(|_| Error::Data(format!("{what} is not valid utf-8")))
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut buf = [0u8; 4];
    read_or_truncated(r, &mut buf, what)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Truncated(format!("while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}
