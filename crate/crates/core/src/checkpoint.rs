//! Versioned little-endian binary snapshot of a [`NeuralMap`].
//!
//! Layout: magic, version, octree config, then per level the sorted voxel
//! keys, the corner keys in slot order and their features, then every
//! decoder's activation and parameters.

use std::path::Path;

use nalgebra::Vector3;

use crate::error::{Error, Result};
use crate::field::{FeatureOctree, OctreeConfig};
use crate::network::{Activation, LevelMlp, NeuralMap};

const MAGIC: &[u8; 8] = b"OCSLCKPT";
pub const VERSION: u32 = 1;

struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn len(&mut self, n: usize) {
        self.u64(n as u64);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::ShapeMismatch(format!("checkpoint truncated at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    /// Length prefix, checked against the bytes left so corrupt files fail
    /// before allocating.
    fn len(&mut self, elem_size: usize) -> Result<usize> {
        let n = self.u64()? as usize;
        if n.saturating_mul(elem_size) > self.buf.len() - self.pos {
            return Err(Error::ShapeMismatch(format!("length {n} at byte {} exceeds the file", self.pos - 8)));
        }
        Ok(n)
    }
    fn u64s(&mut self) -> Result<Vec<u64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.u64()).collect()
    }
    fn f64s(&mut self) -> Result<Vec<f64>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn encode(map: &NeuralMap) -> Vec<u8> {
    let mut w = Writer(Vec::new());
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION);
    let c = map.octree.config();
    for v in c.min_corner.iter() {
        w.f64(*v);
    }
    w.u32(c.finest_level);
    w.f64(c.fine_voxel_size);
    w.u32(c.level_count as u32);
    w.u32(c.feature_dim as u32);
    w.f64(c.init_scale);
    w.u64(c.seed);
    for level in map.octree.levels() {
        let voxels = level.sorted_voxel_keys();
        w.len(voxels.len());
        voxels.iter().for_each(|k| w.u64(*k));
        w.len(level.corner_keys().len());
        level.corner_keys().iter().for_each(|k| w.u64(*k));
        w.len(level.features().len());
        level.features().iter().for_each(|v| w.f64(*v));
    }
    w.u32(map.mlps.len() as u32);
    for m in &map.mlps {
        w.u32(m.in_dim() as u32);
        w.u8(match m.activation() {
            Activation::Softplus => 0,
            Activation::Identity => 1,
        });
        w.len(m.params().len());
        m.params().iter().for_each(|v| w.f64(*v));
    }
    w.0
}

pub fn decode(bytes: &[u8]) -> Result<NeuralMap> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(MAGIC.len())? != MAGIC {
        return Err(Error::ShapeMismatch("not a map checkpoint".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::ShapeMismatch(format!("checkpoint version {version}, expected {VERSION}")));
    }
    let min_corner = Vector3::new(r.f64()?, r.f64()?, r.f64()?);
    let config = OctreeConfig {
        min_corner,
        finest_level: r.u32()?,
        fine_voxel_size: r.f64()?,
        level_count: r.u32()? as usize,
        feature_dim: r.u32()? as usize,
        init_scale: r.f64()?,
        seed: r.u64()?,
    };
    let mut octree = FeatureOctree::new(config)?;
    for level in 0..octree.level_count() {
        let voxels = r.u64s()?;
        let corners = r.u64s()?;
        let features = r.f64s()?;
        octree.restore_level(level, corners, features, &voxels)?;
    }
    let n = r.u32()? as usize;
    if n != octree.level_count() {
        return Err(Error::ShapeMismatch(format!("{n} decoders for {} levels", octree.level_count())));
    }
    let mut mlps = Vec::with_capacity(n);
    for _ in 0..n {
        let in_dim = r.u32()? as usize;
        let activation = match r.u8()? {
            0 => Activation::Softplus,
            1 => Activation::Identity,
            a => return Err(Error::ShapeMismatch(format!("unknown activation tag {a}"))),
        };
        if in_dim != LevelMlp::input_dim_for(octree.feature_dim()) {
            return Err(Error::ShapeMismatch(format!("decoder input width {in_dim}")));
        }
        mlps.push(LevelMlp::from_params(in_dim, r.f64s()?)?.with_activation(activation));
    }
    if r.pos != bytes.len() {
        return Err(Error::ShapeMismatch(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(NeuralMap { octree, mlps })
}

pub fn save(map: &NeuralMap, path: &Path) -> Result<()> {
    std::fs::write(path, encode(map))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<NeuralMap> {
    decode(&std::fs::read(path)?).map_err(|e| Error::Format { path: path.to_path_buf(), message: e.to_string() })
}
