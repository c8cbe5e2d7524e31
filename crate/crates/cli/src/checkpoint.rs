//! Checkpoint directories: `manifest.json` plus `tensors.bin`, a flat
//! little-endian f64 blob whose SHA-256 is recorded in the manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sgrnn_core::numerics::RngState;
use sgrnn_core::{FlatParams, ParamIndex};

use crate::error::{CliError, IoContext, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const BLOB_FILE: &str = "tensors.bin";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorRecord {
    pub name: String,
    pub shape: [usize; 2],
    /// Byte offset into the blob.
    pub offset: u64,
    /// Byte length; always `8 · rows · cols`.
    pub length: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngRecord {
    pub words: [u64; 4],
    pub spare_normal: Option<u64>,
}

impl From<RngState> for RngRecord {
    fn from(s: RngState) -> Self {
        Self {
            words: s.words,
            spare_normal: s.spare_normal,
        }
    }
}

impl From<RngRecord> for RngState {
    fn from(r: RngRecord) -> Self {
        RngState {
            words: r.words,
            spare_normal: r.spare_normal,
        }
    }
}

/// Training bookkeeping stored with the resumable state checkpoint.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub epoch: usize,
    pub collected: usize,
    pub last_stamp: Option<f64>,
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub bad_epochs: usize,
    pub stopped_early: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub algorithm: String,
    /// Training time of the snapshot in epochs.
    pub epoch: f64,
    /// Sampler steps taken.
    pub step: u64,
    pub rng: RngRecord,
    pub tensors: Vec<TensorRecord>,
    pub blob_bytes: u64,
    pub sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub progress: Option<Progress>,
}

impl Manifest {
    /// Offsets must tile the blob exactly: 8-byte aligned, no overlap, no gap.
    pub fn check_layout(&self) -> std::result::Result<(), String> {
        for t in &self.tensors {
            if t.length != 8 * (t.shape[0] * t.shape[1]) as u64 {
                return Err(format!("tensor `{}` length {} does not match shape {:?}", t.name, t.length, t.shape));
            }
        }
        let mut spans: Vec<(u64, u64, &str)> = self
            .tensors
            .iter()
            .map(|t| (t.offset, t.length, t.name.as_str()))
            .collect();
        spans.sort();
        let mut end = 0u64;
        for &(off, len, name) in &spans {
            if off % 8 != 0 {
                return Err(format!("tensor `{name}` offset {off} is not 8-byte aligned"));
            }
            if off < end {
                return Err(format!("tensor `{name}` at offset {off} overlaps the previous tensor"));
            }
            if off > end {
                return Err(format!("gap of {} bytes before tensor `{name}`", off - end));
            }
            end = off + len;
        }
        if end != self.blob_bytes {
            return Err(format!("tensors cover {end} bytes but the blob has {}", self.blob_bytes));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub algorithm: String,
    pub epoch: f64,
    pub step: u64,
    pub rng: RngState,
    pub params: FlatParams,
    /// Additional row vectors stored after the parameters, e.g. `sampler.v`.
    pub extra: Vec<(String, Vec<f64>)>,
    pub progress: Option<Progress>,
}

impl Checkpoint {
    pub fn extra(&self, name: &str) -> Option<&[f64]> {
        self.extra.iter().find(|(n, _)| n == name).map(|(_, v)| v.as_slice())
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `ckpt` to `dir`, replacing any previous checkpoint there. The new
/// files are staged in a sibling directory and swapped in by rename.
pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut tensors = Vec::new();
    let mut blob = Vec::with_capacity(8 * ckpt.params.len());
    let mut push = |name: &str, rows: usize, cols: usize, values: &[f64]| {
        tensors.push(TensorRecord {
            name: name.to_string(),
            shape: [rows, cols],
            offset: blob.len() as u64,
            length: 8 * values.len() as u64,
        });
        for v in values {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    for e in ckpt.params.index().entries() {
        push(&e.name, e.rows, e.cols, &ckpt.params.values()[e.range()]);
    }
    for (name, v) in &ckpt.extra {
        if ckpt.params.index().get(name).is_some() {
            return Err(CliError::checkpoint(dir, format!("extra tensor `{name}` shadows a parameter")));
        }
        push(name, 1, v.len(), v);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        algorithm: ckpt.algorithm.clone(),
        epoch: ckpt.epoch,
        step: ckpt.step,
        rng: ckpt.rng.into(),
        tensors,
        blob_bytes: blob.len() as u64,
        sha256: hex(&Sha256::digest(&blob)),
        progress: ckpt.progress.clone(),
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serialises");

    let staging = sibling(dir, "tmp");
    let retired = sibling(dir, "old");
    for p in [&staging, &retired] {
        if p.exists() {
            fs::remove_dir_all(p).at(p)?;
        }
    }
    fs::create_dir_all(&staging).at(&staging)?;
    fs::write(staging.join(BLOB_FILE), &blob).at(staging.join(BLOB_FILE))?;
    fs::write(staging.join(MANIFEST_FILE), json + "\n").at(staging.join(MANIFEST_FILE))?;
    if dir.exists() {
        fs::rename(dir, &retired).at(dir)?;
    }
    fs::rename(&staging, dir).at(dir)?;
    if retired.exists() {
        fs::remove_dir_all(&retired).at(&retired)?;
    }
    Ok(())
}

fn sibling(dir: &Path, suffix: &str) -> PathBuf {
    let mut name = dir.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".{suffix}"));
    dir.with_file_name(name)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).at(&path)?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| CliError::checkpoint(dir, format!("unreadable manifest: {e}")))?;
    if m.format_version != FORMAT_VERSION {
        return Err(CliError::checkpoint(
            dir,
            format!("format version {} is not supported (expected {FORMAT_VERSION})", m.format_version),
        ));
    }
    m.check_layout().map_err(|e| CliError::checkpoint(dir, e))?;
    Ok(m)
}

/// Reads and verifies a checkpoint without interpreting its tensors:
/// returns the manifest and the whole blob as f64 values.
pub fn read_verified(dir: &Path) -> Result<(Manifest, Vec<f64>)> {
    let m = read_manifest(dir)?;
    let blob_path = dir.join(BLOB_FILE);
    let blob = fs::read(&blob_path).at(&blob_path)?;
    if blob.len() as u64 != m.blob_bytes {
        return Err(CliError::checkpoint(
            dir,
            format!("checksum failure: blob has {} bytes, manifest says {}", blob.len(), m.blob_bytes),
        ));
    }
    if hex(&Sha256::digest(&blob)) != m.sha256 {
        return Err(CliError::checkpoint(dir, "checksum failure: SHA-256 mismatch"));
    }
    let values = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((m, values))
}

/// Loads a checkpoint whose leading tensors must match `index` by name and
/// shape. Nothing is returned unless the blob size and checksum verify.
pub fn load_checkpoint(dir: &Path, index: &Arc<ParamIndex>) -> Result<Checkpoint> {
    let (m, blob) = read_verified(dir)?;
    let read = |t: &TensorRecord| -> Vec<f64> { blob[(t.offset / 8) as usize..((t.offset + t.length) / 8) as usize].to_vec() };

    let entries = index.entries();
    if m.tensors.len() < entries.len() {
        return Err(CliError::checkpoint(
            dir,
            format!("holds {} tensors, the model needs {}", m.tensors.len(), entries.len()),
        ));
    }
    let mut values = Vec::with_capacity(index.total());
    for (e, t) in entries.iter().zip(&m.tensors) {
        if e.name != t.name || [e.rows, e.cols] != t.shape {
            return Err(CliError::checkpoint(
                dir,
                format!(
                    "tensor `{}` {:?} does not match model tensor `{}` [{}, {}]",
                    t.name, t.shape, e.name, e.rows, e.cols
                ),
            ));
        }
        values.extend(read(t));
    }
    let extra = m.tensors[entries.len()..].iter().map(|t| (t.name.clone(), read(t))).collect();
    Ok(Checkpoint {
        algorithm: m.algorithm,
        epoch: m.epoch,
        step: m.step,
        rng: m.rng.into(),
        params: FlatParams::new(index.clone(), values)?,
        extra,
        progress: m.progress,
    })
}

pub fn sample_dir(bank: &Path, index: usize) -> PathBuf {
    bank.join(format!("sample_{index:05}"))
}

/// Snapshot directories in collection order. Numbering must be contiguous
/// from zero.
pub fn list_bank(bank: &Path) -> Result<Vec<PathBuf>> {
    if !bank.is_dir() {
        return Err(CliError::usage(format!("no sample bank at {}", bank.display())));
    }
    let mut found = Vec::new();
    for entry in fs::read_dir(bank).at(bank)? {
        let entry = entry.at(bank)?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(n) = name.strip_prefix("sample_").and_then(|n| n.parse::<usize>().ok()) {
            found.push(n);
        }
    }
    found.sort_unstable();
    for (i, &n) in found.iter().enumerate() {
        if i != n {
            return Err(CliError::checkpoint(bank, format!("sample numbering has a gap at {i}")));
        }
    }
    Ok(found.into_iter().map(|n| sample_dir(bank, n)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use sgrnn_core::SeededRng;

    fn sample() -> Checkpoint {
        let mut idx = ParamIndex::default();
        idx.push("a", 2, 3);
        idx.push("b", 1, 2);
        let mut rng = SeededRng::new(4);
        rng.normal();
        let values = (0..8).map(|i| (i as f64 - 3.3).powi(3) / 7.0).collect();
        Checkpoint {
            algorithm: "psgld".into(),
            epoch: 2.5,
            step: 17,
            rng: rng.state(),
            params: FlatParams::new(Arc::new(idx), values).unwrap(),
            extra: vec![("sampler.v".into(), vec![1e-300, f64::MIN_POSITIVE, 3.0])],
            progress: Some(Progress {
                epoch: 2,
                best_score: Some(1.25),
                ..Progress::default()
            }),
        }
    }

    #[test]
    fn round_trip_is_bitwise() {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().join("ck");
        let c = sample();
        save_checkpoint(&dir, &c).unwrap();
        let back = load_checkpoint(&dir, c.params.index()).unwrap();
        assert_eq!(back, c);
        let r1 = SeededRng::from_state(c.rng).unwrap().next_u64();
        let r2 = SeededRng::from_state(back.rng).unwrap().next_u64();
        assert_eq!(r1, r2);
        // Overwriting in place works and leaves no staging directories.
        save_checkpoint(&dir, &c).unwrap();
        assert_eq!(fs::read_dir(tmp.path()).unwrap().count(), 1);
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(&tmp.path().join("ck"), &c).unwrap();
        let blob = tmp.path().join("ck").join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        let err = load_checkpoint(&tmp.path().join("ck"), c.params.index()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");

        let mut flipped = bytes.clone();
        flipped[5] ^= 1;
        fs::write(&blob, flipped).unwrap();
        let err = load_checkpoint(&tmp.path().join("ck"), c.params.index()).unwrap_err();
        assert!(err.to_string().contains("SHA-256"), "{err}");
    }

    #[test]
    fn overlapping_offsets_are_rejected() {
        let tmp = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(&tmp.path().join("ck"), &c).unwrap();
        let path = tmp.path().join("ck").join(MANIFEST_FILE);
        let mut m: Manifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        m.tensors[1].offset -= 8;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_checkpoint(&tmp.path().join("ck"), c.params.index()).unwrap_err();
        assert!(err.to_string().contains("overlaps"), "{err}");
    }

    #[test]
    fn version_and_layout_mismatch() {
        let tmp = tempfile::tempdir().unwrap();
        let c = sample();
        save_checkpoint(&tmp.path().join("ck"), &c).unwrap();
        let mut other = ParamIndex::default();
        other.push("a", 3, 2);
        other.push("b", 1, 2);
        assert!(load_checkpoint(&tmp.path().join("ck"), &Arc::new(other)).is_err());

        let path = tmp.path().join("ck").join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).unwrap().replace("\"format_version\": 1", "\"format_version\": 9");
        fs::write(&path, text).unwrap();
        let err = load_checkpoint(&tmp.path().join("ck"), c.params.index()).unwrap_err();
        assert!(err.to_string().contains("version 9"), "{err}");
    }

    #[test]
    fn bank_listing() {
        let tmp = tempfile::tempdir().unwrap();
        let c = sample();
        for i in 0..3 {
            save_checkpoint(&sample_dir(tmp.path(), i), &c).unwrap();
        }
        assert_eq!(list_bank(tmp.path()).unwrap().len(), 3);
        fs::remove_dir_all(sample_dir(tmp.path(), 1)).unwrap();
        assert!(list_bank(tmp.path()).is_err());
    }
}
