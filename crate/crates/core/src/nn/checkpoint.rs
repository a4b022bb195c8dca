//! Portable checkpoint files.
//!
//! Layout: 8-byte magic, `u32` LE format version, `u32` LE length of a UTF-8
//! text block, the text block, then little-endian `f32` tensor blobs in
//! manifest order. The text block has three sections:
//!
//! ```text
//! [trunk]
//! family = resnet_q_sap
//! ...
//! [meta]
//! epoch = 3
//! [manifest]
//! conv1.weight 16,1,3,3
//! ```

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::tensor::Tensor;
use super::trunk::{build_trunk, Model, TrunkConfig};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"VFRGCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub trunk: TrunkConfig,
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

fn running_names(name: &str) -> (String, String) {
    (format!("{name}.running_mean"), format!("{name}.running_var"))
}

impl Checkpoint {
    /// Captures every parameter and running statistic of `model`.
    pub fn from_model(model: &Model<f32>) -> Self {
        let mut tensors = Vec::new();
        for (_, p) in model.params.iter() {
            tensors.push((p.name.clone(), p.value.clone()));
        }
        for r in &model.running {
            let (m, v) = running_names(&r.name);
            tensors.push((m, Tensor::new(vec![r.mean.len()], r.mean.clone())));
            tensors.push((v, Tensor::new(vec![r.var.len()], r.var.clone())));
        }
        Self {
            trunk: model.config().clone(),
            meta: BTreeMap::new(),
            tensors,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, t: Tensor<f32>) {
        self.tensors.push((name.into(), t));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Fetches a tensor that must exist with the given shape.
    pub fn expect(&self, name: &str, shape: &[usize]) -> Result<&Tensor<f32>> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if t.shape() != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has shape {:?}, expected {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    }

    /// Rebuilds the model, validating every shape against the trunk config.
    pub fn model(&self) -> Result<Model<f32>> {
        let mut model: Model<f32> = build_trunk(&self.trunk, &mut ChaCha8Rng::seed_from_u64(0))
            .map_err(|e| Error::Checkpoint(format!("invalid trunk config: {e}")))?;
        for p in model.params.iter_mut() {
            let t = self.expect(&p.name, p.value.shape())?;
            p.value = t.clone();
        }
        for r in &mut model.running {
            let (m, v) = running_names(&r.name);
            let c = r.mean.len();
            r.mean = self.expect(&m, &[c])?.data().to_vec();
            r.var = self.expect(&v, &[c])?.data().to_vec();
        }
        Ok(model)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let mut text = String::from("[trunk]\n");
        for (k, v) in self.trunk.to_pairs() {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str("[meta]\n");
        for (k, v) in &self.meta {
            text.push_str(&format!("{k} = {v}\n"));
        }
        text.push_str("[manifest]\n");
        for (name, t) in &self.tensors {
            let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
            let dims = if dims.is_empty() {
                "-".to_string()
            } else {
                dims.join(",")
            };
            text.push_str(&format!("{name} {dims}\n"));
        }
        w.write_all(MAGIC)?;
        w.write_all(&FORMAT_VERSION.to_le_bytes())?;
        w.write_all(&(text.len() as u32).to_le_bytes())?;
        w.write_all(text.as_bytes())?;
        for (_, t) in &self.tensors {
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        let io = |e: std::io::Error| Error::Checkpoint(format!("truncated checkpoint: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word).map_err(io)?;
        let version = u32::from_le_bytes(word);
        if version != FORMAT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        r.read_exact(&mut word).map_err(io)?;
        let mut text = vec![0u8; u32::from_le_bytes(word) as usize];
        r.read_exact(&mut text).map_err(io)?;
        let text = String::from_utf8(text).map_err(|_| bad("header is not UTF-8"))?;

        let mut section = "";
        let mut trunk_pairs = Vec::new();
        let mut meta = BTreeMap::new();
        let mut manifest = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if line.starts_with('[') {
                section = line;
                continue;
            }
            match section {
                "[trunk]" | "[meta]" => {
                    let (k, v) = line
                        .split_once('=')
                        .ok_or_else(|| Error::Checkpoint(format!("bad header line `{line}`")))?;
                    if section == "[trunk]" {
                        trunk_pairs.push((k.trim(), v.trim()));
                    } else {
                        meta.insert(k.trim().to_string(), v.trim().to_string());
                    }
                }
                "[manifest]" => {
                    let (name, dims) = line
                        .split_once(' ')
                        .ok_or_else(|| Error::Checkpoint(format!("bad manifest line `{line}`")))?;
                    let shape: Vec<usize> = if dims == "-" {
                        Vec::new()
                    } else {
                        dims.split(',')
                            .map(|d| d.parse().map_err(|_| Error::Checkpoint(format!("bad shape `{dims}`"))))
                            .collect::<Result<_>>()?
                    };
                    manifest.push((name.to_string(), shape));
                }
                _ => return Err(Error::Checkpoint(format!("unexpected header section `{section}`"))),
            }
        }
        let trunk = TrunkConfig::from_pairs(trunk_pairs).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let mut tensors = Vec::with_capacity(manifest.len());
        for (name, shape) in manifest {
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * 4];
            r.read_exact(&mut bytes).map_err(io)?;
            let data = bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            tensors.push((name, Tensor::new(shape, data)));
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest).map_err(io)? != 0 {
            return Err(bad("trailing bytes after tensor data"));
        }
        Ok(Self { trunk, meta, tensors })
    }
}

pub fn save_checkpoint(path: impl AsRef<Path>, ckpt: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    // Write then rename so a crash never leaves a half-written checkpoint.
    let tmp = path.with_extension("tmp");
    let f = File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    ckpt.write_to(BufWriter::new(f)).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::read_from(BufReader::new(f))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dsp::{FeatureKind, FeatureMatrix};
    use crate::nn::trunk::Family;
    use rand::Rng;

    fn model() -> Model<f32> {
        let cfg = TrunkConfig::new(Family::ResNetQSap)
            .with_scale(0.0625)
            .with_embedding_dim(6)
            .with_embedding_bn(true);
        let mut m: Model<f32> = build_trunk(&cfg, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        for r in &mut m.running {
            r.mean.iter_mut().for_each(|v| *v = 0.25);
            r.var.iter_mut().for_each(|v| *v = 1.5);
        }
        m
    }

    #[test]
    fn round_trip_gives_identical_embeddings() {
        let m = model();
        let mut ck = Checkpoint::from_model(&m);
        ck.meta.insert("epoch".into(), "4".into());
        ck.push(
            "head.weight",
            Tensor::new(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]),
        );
        ck.push("scalar", Tensor::scalar(7.0));
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let m2 = back.model().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = FeatureMatrix::new(
            30,
            64,
            (0..30 * 64).map(|_| rng.random_range(-1.0..1.0)).collect(),
            FeatureKind::LogMel,
        );
        assert_eq!(m.embed_one(&f).unwrap(), m2.embed_one(&f).unwrap());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let m = model();
        let mut ck = Checkpoint::from_model(&m);
        ck.trunk.embedding_dim = 7;
        assert!(matches!(ck.model(), Err(Error::Checkpoint(_))));
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let mut buf = Vec::new();
        Checkpoint::from_model(&model()).write_to(&mut buf).unwrap();
        assert!(Checkpoint::read_from(&buf[..buf.len() - 3]).is_err());
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(Checkpoint::read_from(bad.as_slice()).is_err());
        let mut longer = buf.clone();
        longer.push(0);
        assert!(Checkpoint::read_from(longer.as_slice()).is_err());
    }
}
