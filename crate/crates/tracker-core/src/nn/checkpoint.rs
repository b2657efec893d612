//! Checkpoint file format.
//!
//! Layout: 8-byte magic `TRKCKPT1`, u64 LE manifest length, JSON manifest,
//! then a payload of tensors in manifest order. Each payload entry is a
//! shape header (u32 LE rows, u32 LE cols) followed by row-major f32 LE
//! values. Manifest offsets are relative to the payload start.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::{ParamStore, Tensor};
use super::NnError;

const MAGIC: &[u8; 8] = b"TRKCKPT1";

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    rows: u32,
    cols: u32,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    tensors: Vec<ManifestEntry>,
}

/// Writes the given stores as `prefix/param-name` tensors.
pub fn save(path: &Path, sections: &[(&str, &ParamStore)]) -> Result<(), NnError> {
    let mut entries = Vec::new();
    let mut offset = 0u64;
    for (prefix, store) in sections {
        for (name, t) in store.iter() {
            entries.push(ManifestEntry {
                name: format!("{prefix}/{name}"),
                rows: t.rows as u32,
                cols: t.cols as u32,
                offset,
            });
            offset += 8 + 4 * t.len() as u64;
        }
    }
    let manifest = serde_json::to_vec(&Manifest { tensors: entries })
        .map_err(|e| NnError::CheckpointFormat(e.to_string()))?;

    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(manifest.len() as u64).to_le_bytes())?;
    w.write_all(&manifest)?;
    for (_, store) in sections {
        for (_, t) in store.iter() {
            w.write_all(&(t.rows as u32).to_le_bytes())?;
            w.write_all(&(t.cols as u32).to_le_bytes())?;
            for &v in &t.data {
                w.write_all(&v.to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

/// All tensors from a checkpoint, in file order.
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn load(path: &Path) -> Result<Self, NnError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(NnError::CheckpointFormat("bad magic".into()));
        }
        let mut len_bytes = [0u8; 8];
        r.read_exact(&mut len_bytes)?;
        let mlen = u64::from_le_bytes(len_bytes) as usize;
        if mlen > 1 << 30 {
            return Err(NnError::CheckpointFormat("manifest length implausible".into()));
        }
        let mut mbytes = vec![0u8; mlen];
        r.read_exact(&mut mbytes)?;
        let manifest: Manifest = serde_json::from_slice(&mbytes)
            .map_err(|e| NnError::CheckpointFormat(e.to_string()))?;

        let mut payload = Vec::new();
        r.read_to_end(&mut payload)?;

        let mut tensors = Vec::with_capacity(manifest.tensors.len());
        for e in &manifest.tensors {
            let off = e.offset as usize;
            if off + 8 > payload.len() {
                return Err(NnError::CheckpointFormat(format!("offset out of range for {}", e.name)));
            }
            let rows = u32::from_le_bytes(payload[off..off + 4].try_into().unwrap());
            let cols = u32::from_le_bytes(payload[off + 4..off + 8].try_into().unwrap());
            if rows != e.rows || cols != e.cols {
                return Err(NnError::CheckpointFormat(format!(
                    "shape header {}x{} disagrees with manifest {}x{} for {}",
                    rows, cols, e.rows, e.cols, e.name
                )));
            }
            let n = (rows * cols) as usize;
            let end = off + 8 + 4 * n;
            if end > payload.len() {
                return Err(NnError::CheckpointFormat(format!("payload truncated at {}", e.name)));
            }
            let data: Vec<f32> = payload[off + 8..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect();
            tensors.push((e.name.clone(), Tensor::from_vec(rows as usize, cols as usize, data)));
        }
        Ok(Checkpoint { tensors })
    }

    /// Copies every `prefix/...` tensor into the matching parameter of
    /// `store`, which must already have the right names and shapes.
    pub fn load_into(&self, prefix: &str, store: &mut ParamStore) -> Result<(), NnError> {
        let mut filled = 0usize;
        for (name, t) in &self.tensors {
            let Some(bare) = name.strip_prefix(prefix).and_then(|s| s.strip_prefix('/')) else {
                continue;
            };
            let dst = store
                .by_name_mut(bare)
                .ok_or_else(|| NnError::UnknownParam(name.clone()))?;
            if dst.rows != t.rows || dst.cols != t.cols {
                return Err(NnError::ShapeMismatch {
                    context: format!("checkpoint tensor {name}"),
                    expected: format!("{}x{}", dst.rows, dst.cols),
                    got: format!("{}x{}", t.rows, t.cols),
                });
            }
            dst.data.copy_from_slice(&t.data);
            filled += 1;
        }
        if filled != store.len() {
            return Err(NnError::CheckpointFormat(format!(
                "checkpoint section {prefix} filled {filled} of {} parameters",
                store.len()
            )));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn store_with(names: &[&str], rng: &mut ChaCha8Rng) -> ParamStore {
        let mut s = ParamStore::new();
        for (i, n) in names.iter().enumerate() {
            s.add(n, Tensor::glorot(2 + i, 3, rng));
        }
        s
    }

    #[test]
    fn round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = store_with(&["w1", "b1"], &mut rng);
        let b = store_with(&["w1"], &mut rng);
        save(&path, &[("alpha", &a), ("beta", &b)]).unwrap();

        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck.tensors.len(), 3);

        let mut rng2 = ChaCha8Rng::seed_from_u64(99);
        let mut a2 = store_with(&["w1", "b1"], &mut rng2);
        let mut b2 = store_with(&["w1"], &mut rng2);
        ck.load_into("alpha", &mut a2).unwrap();
        ck.load_into("beta", &mut b2).unwrap();
        for ((_, x), (_, y)) in a.iter().zip(a2.iter()) {
            assert_eq!(x.data, y.data);
        }
        for ((_, x), (_, y)) in b.iter().zip(b2.iter()) {
            assert_eq!(x.data, y.data);
        }
    }

    #[test]
    fn missing_tensor_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let partial = store_with(&["w1"], &mut rng);
        save(&path, &[("m", &partial)]).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let mut full = store_with(&["w1", "b1"], &mut rng);
        assert!(ck.load_into("m", &mut full).is_err());
    }

    #[test]
    fn bad_magic_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("garbage.ckpt");
        std::fs::write(&path, b"NOTMAGIC0000000000").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(NnError::CheckpointFormat(_))
        ));
    }

    #[test]
    fn shape_mismatch_on_load_is_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.ckpt");
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = store_with(&["w1"], &mut rng);
        save(&path, &[("m", &a)]).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        let mut wrong = ParamStore::new();
        wrong.add("w1", Tensor::zeros(7, 7));
        assert!(matches!(
            ck.load_into("m", &mut wrong),
            Err(NnError::ShapeMismatch { .. })
        ));
    }
}
