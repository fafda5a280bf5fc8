//! Named parameter tensors and the on-disk weight format.
//!
//! A weight directory holds `manifest.txt` and `weights.bin`. The manifest
//! starts with the line `monoview-weights 1` followed by one line per
//! tensor: `name dtype shape byte_offset`, e.g.
//!
//! ```text
//! monoview-weights 1
//! encoder.l01.bias f32 32 0
//! encoder.l01.weight f32 32,3,3,3 128
//! ```
//!
//! The blob is the concatenation of all tensors as little-endian `f32`.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.txt";
pub const BLOB_FILE: &str = "weights.bin";
const MAGIC: &str = "monoview-weights";
const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Param {
    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Param {
            shape,
            data: vec![0.0; n],
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered map from tensor name to tensor.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    tensors: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, param: Param) {
        self.tensors.insert(name.into(), param);
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.tensors.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.tensors.get_mut(name)
    }

    pub(crate) fn data(&self, name: &str) -> &[f32] {
        &self
            .tensors
            .get(name)
            .unwrap_or_else(|| panic!("parameter `{name}` missing from store"))
            .data
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Param)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Param)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalars.
    pub fn scalar_count(&self) -> usize {
        self.tensors.values().map(Param::len).sum()
    }

    pub fn zeros_like(&self) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .map(|(k, p)| (k.clone(), Param::zeros(p.shape.clone())))
                .collect(),
        }
    }

    /// Only the tensors whose name satisfies `keep`.
    pub fn filtered(&self, keep: impl Fn(&str) -> bool) -> Self {
        ParamStore {
            tensors: self
                .tensors
                .iter()
                .filter(|(k, _)| keep(k))
                .map(|(k, p)| (k.clone(), p.clone()))
                .collect(),
        }
    }

    /// Element-wise `self += other` over tensors present in both.
    pub fn accumulate(&mut self, other: &ParamStore) {
        for (name, p) in &mut self.tensors {
            if let Some(o) = other.tensors.get(name) {
                for (a, b) in p.data.iter_mut().zip(&o.data) {
                    *a += b;
                }
            }
        }
    }

    pub fn scale(&mut self, s: f32) {
        for p in self.tensors.values_mut() {
            p.data.iter_mut().for_each(|v| *v *= s);
        }
    }

    pub fn fill_zero(&mut self) {
        for p in self.tensors.values_mut() {
            p.data.fill(0.0);
        }
    }

    /// Weights (`*.weight`) from N(0, std), biases zero, in name order.
    pub fn init_normal(&mut self, std: f32, rng: &mut impl Rng) {
        let normal = Normal::new(0.0f32, std).expect("valid std");
        for (name, p) in &mut self.tensors {
            if name.ends_with(".weight") {
                p.data.iter_mut().for_each(|v| *v = normal.sample(rng));
            } else {
                p.data.fill(0.0);
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors
            .values()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// Bitwise equality of the tensors whose name satisfies `select`.
    pub fn bit_equal_where(&self, other: &ParamStore, select: impl Fn(&str) -> bool) -> bool {
        let a: Vec<_> = self.tensors.iter().filter(|(k, _)| select(k)).collect();
        let b: Vec<_> = other.tensors.iter().filter(|(k, _)| select(k)).collect();
        a.len() == b.len()
            && a.iter().zip(&b).all(|((ka, pa), (kb, pb))| {
                ka == kb
                    && pa.shape == pb.shape
                    && pa
                        .data
                        .iter()
                        .zip(&pb.data)
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }

    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.bit_equal_where(other, |_| true)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = format!("{MAGIC} {FORMAT_VERSION}\n");
        let mut blob = Vec::with_capacity(self.scalar_count() * 4);
        for (name, p) in &self.tensors {
            let shape: Vec<String> = p.shape.iter().map(|d| d.to_string()).collect();
            manifest.push_str(&format!("{name} f32 {} {}\n", shape.join(","), blob.len()));
            for v in &p.data {
                blob.extend_from_slice(&v.to_le_bytes());
            }
        }
        let mpath = dir.join(MANIFEST_FILE);
        fs::write(&mpath, manifest).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        let mut f = fs::File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
        f.write_all(&blob).map_err(|e| Error::io(&bpath, e))?;
        Ok(())
    }

    /// Reads every tensor of a weight directory.
    pub fn load(dir: &Path) -> Result<Self> {
        let mpath = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let bpath = dir.join(BLOB_FILE);
        let blob = fs::read(&bpath).map_err(|e| Error::io(&bpath, e))?;
        let bad = |reason: String| Error::Format {
            what: "weight manifest",
            path: mpath.clone(),
            reason,
        };

        let mut lines = text.lines();
        let header = lines.next().ok_or_else(|| bad("empty manifest".into()))?;
        let mut hp = header.split_whitespace();
        if hp.next() != Some(MAGIC) {
            return Err(bad(format!("unexpected header `{header}`")));
        }
        match hp.next().and_then(|v| v.parse::<u32>().ok()) {
            Some(FORMAT_VERSION) => {}
            other => return Err(bad(format!("unsupported format version {other:?}"))),
        }

        let mut store = ParamStore::new();
        for line in lines.filter(|l| !l.trim().is_empty() && !l.starts_with('#')) {
            let fields: Vec<&str> = line.split_whitespace().collect();
            let [name, dtype, shape, offset] = fields[..] else {
                return Err(bad(format!("expected 4 fields in `{line}`")));
            };
            if dtype != "f32" {
                return Err(Error::WeightLoad {
                    tensor: name.into(),
                    reason: format!("unsupported dtype {dtype}"),
                });
            }
            let shape: Vec<usize> = shape
                .split(',')
                .map(|d| d.parse::<usize>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::WeightLoad {
                    tensor: name.into(),
                    reason: format!("bad shape: {e}"),
                })?;
            let offset: usize = offset.parse().map_err(|e| Error::WeightLoad {
                tensor: name.into(),
                reason: format!("bad offset: {e}"),
            })?;
            let n: usize = shape.iter().product();
            let end = offset + 4 * n;
            if end > blob.len() {
                return Err(Error::WeightLoad {
                    tensor: name.into(),
                    reason: format!("range {offset}..{end} beyond blob of {} bytes", blob.len()),
                });
            }
            let data = blob[offset..end]
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
                .collect();
            store.insert(name, Param { shape, data });
        }
        Ok(store)
    }

    /// Copies tensors from `source` into same-named tensors of `self`.
    ///
    /// Every name of `self` accepted by `select` must be present in `source`
    /// with an identical shape.
    pub fn copy_from(&mut self, source: &ParamStore, select: impl Fn(&str) -> bool) -> Result<()> {
        for (name, p) in self.tensors.iter_mut().filter(|(k, _)| select(k)) {
            let src = source.get(name).ok_or_else(|| Error::WeightLoad {
                tensor: name.clone(),
                reason: "missing from weight file".into(),
            })?;
            if src.shape != p.shape {
                return Err(Error::WeightLoad {
                    tensor: name.clone(),
                    reason: format!(
                        "shape {:?} does not match expected {:?}",
                        src.shape, p.shape
                    ),
                });
            }
            p.data.copy_from_slice(&src.data);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("a.weight", Param::zeros(vec![2, 3]));
        s.insert("a.bias", Param::zeros(vec![2]));
        s.insert("b.weight", Param::zeros(vec![4, 1, 3, 3]));
        s.init_normal(0.5, &mut ChaCha8Rng::seed_from_u64(1));
        s
    }

    #[test]
    fn save_load_round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let s = sample();
        s.save(dir.path()).unwrap();
        let back = ParamStore::load(dir.path()).unwrap();
        assert!(s.bit_equal(&back));
        let manifest = fs::read_to_string(dir.path().join(MANIFEST_FILE)).unwrap();
        assert!(manifest.starts_with("monoview-weights 1\n"));
        assert!(manifest.contains("b.weight f32 4,1,3,3 "));
    }

    #[test]
    fn shape_mismatch_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let mut other = sample();
        other.insert("b.weight", Param::zeros(vec![4, 1, 2, 2]));
        other.save(dir.path()).unwrap();
        let file = ParamStore::load(dir.path()).unwrap();
        let mut s = sample();
        let err = s.copy_from(&file, |_| true).unwrap_err().to_string();
        assert!(err.contains("b.weight"), "{err}");
    }

    #[test]
    fn truncated_blob_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        sample().save(dir.path()).unwrap();
        let blob = dir.path().join(BLOB_FILE);
        let bytes = fs::read(&blob).unwrap();
        fs::write(&blob, &bytes[..bytes.len() - 4]).unwrap();
        assert!(ParamStore::load(dir.path()).is_err());
    }

    #[test]
    fn biases_start_at_zero() {
        let s = sample();
        assert!(s.get("a.bias").unwrap().data.iter().all(|&v| v == 0.0));
        assert!(s.get("a.weight").unwrap().data.iter().any(|&v| v != 0.0));
    }
}
