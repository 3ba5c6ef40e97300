//! FCKP model checkpoints (little-endian).
//!
//! Layout: magic `FCKP`; u32 version (= 1); 32-byte config hash; u32 round;
//! u8 model kind (0 cvae, 1 cgan, 2 linear); u32 d; u32 K; u32 tensor
//! count; then per tensor: u16-length-prefixed UTF-8 name, u8 rank,
//! rank * u32 dims, and `prod(dims)` f32 values row-major. Malformed input
//! fails with the byte offset of the problem.
//!
//! All stacks in this crate use ReLU hidden layers and an identity output
//! layer, so layer shapes plus `(d, K)` fully determine the architecture.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::federation::{ClientModel, ModelKind};
use crate::models::{CganDims, CganParams, CvaeDims, CvaeParams, LinearParams};
use crate::numerics::{Activation, Layer, Matrix, MlpStack};

pub const MAGIC: [u8; 4] = *b"FCKP";
pub const VERSION: u32 = 1;

/// One named row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorEntry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_hash: [u8; 32],
    pub round: u32,
    pub kind: ModelKind,
    pub d: u32,
    pub k: u32,
    pub tensors: Vec<TensorEntry>,
}

fn kind_code(kind: ModelKind) -> u8 {
    match kind {
        ModelKind::Cvae => 0,
        ModelKind::Cgan => 1,
        ModelKind::Linear => 2,
    }
}

fn kind_from_code(code: u8, offset: u64) -> Result<ModelKind> {
    match code {
        0 => Ok(ModelKind::Cvae),
        1 => Ok(ModelKind::Cgan),
        2 => Ok(ModelKind::Linear),
        other => Err(Error::Format {
            offset,
            message: format!("unknown model kind code {other}"),
        }),
    }
}

/// Tensors `{prefix}.{i}.weight` (`[out, in]`) and `{prefix}.{i}.bias`
/// (`[out]`) for every layer of the stack.
pub fn stack_tensors(prefix: &str, stack: &MlpStack) -> Vec<TensorEntry> {
    let mut out = Vec::with_capacity(2 * stack.layers.len());
    for (i, layer) in stack.layers.iter().enumerate() {
        out.push(TensorEntry {
            name: format!("{prefix}.{i}.weight"),
            dims: vec![layer.weight.rows() as u32, layer.weight.cols() as u32],
            data: layer.weight.data().to_vec(),
        });
        out.push(TensorEntry {
            name: format!("{prefix}.{i}.bias"),
            dims: vec![layer.bias.len() as u32],
            data: layer.bias.clone(),
        });
    }
    out
}

fn find_tensor<'a>(tensors: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    tensors
        .iter()
        .find(|t| t.name == name)
        .ok_or_else(|| Error::Data(format!("checkpoint is missing tensor {name}")))
}

/// Rebuild a stack from `{prefix}.{i}.*` tensors. Hidden layers are ReLU,
/// the last layer identity (the only stack shapes this crate produces).
pub fn stack_from_tensors(prefix: &str, tensors: &[TensorEntry]) -> Result<MlpStack> {
    let mut n_layers = 0;
    while tensors.iter().any(|t| t.name == format!("{prefix}.{n_layers}.weight")) {
        n_layers += 1;
    }
    if n_layers == 0 {
        return Err(Error::Data(format!("checkpoint has no {prefix}.* tensors")));
    }
    let mut layers = Vec::with_capacity(n_layers);
    for i in 0..n_layers {
        let w = find_tensor(tensors, &format!("{prefix}.{i}.weight"))?;
        let b = find_tensor(tensors, &format!("{prefix}.{i}.bias"))?;
        if w.dims.len() != 2 {
            return Err(Error::Shape(format!(
                "tensor {} has rank {}, expected 2",
                w.name,
                w.dims.len()
            )));
        }
        if b.dims.len() != 1 || b.dims[0] != w.dims[0] {
            return Err(Error::Shape(format!(
                "tensor {} dims {:?} do not match weight dims {:?}",
                b.name, b.dims, w.dims
            )));
        }
        let weight = Matrix::from_vec(w.dims[0] as usize, w.dims[1] as usize, w.data.clone())?;
        let activation = if i + 1 == n_layers { Activation::Identity } else { Activation::Relu };
        layers.push(Layer { weight, bias: b.data.clone(), activation });
    }
    Ok(MlpStack { layers })
}

/// Snapshot a model (with its shared part possibly overwritten by global
/// weights beforehand) into a checkpoint.
pub fn model_checkpoint(model: &ClientModel, round: u32, config_hash: [u8; 32]) -> Checkpoint {
    let (d, k, tensors) = match model {
        ClientModel::Cvae(p) => {
            let mut t = stack_tensors("encoder", &p.encoder);
            t.extend(stack_tensors("decoder", &p.decoder));
            (p.dims.d, p.dims.k, t)
        }
        ClientModel::Cgan(p) => {
            let mut t = stack_tensors("generator", &p.generator);
            t.extend(stack_tensors("discriminator", &p.discriminator));
            (p.dims.d, p.dims.k, t)
        }
        ClientModel::Linear(p) => {
            let flat = p.flatten();
            let (d, k) = (p.d(), p.k());
            let t = vec![
                TensorEntry {
                    name: "weight".into(),
                    dims: vec![k as u32, d as u32],
                    data: flat[..k * d].to_vec(),
                },
                TensorEntry { name: "bias".into(), dims: vec![k as u32], data: flat[k * d..].to_vec() },
            ];
            (d, k, t)
        }
    };
    Checkpoint {
        config_hash,
        round,
        kind: model.kind(),
        d: d as u32,
        k: k as u32,
        tensors,
    }
}

/// Rebuild a model from a checkpoint; dims are recovered from `(d, K)` and
/// the stored layer shapes.
pub fn model_from_checkpoint(ckpt: &Checkpoint) -> Result<ClientModel> {
    let d = ckpt.d as usize;
    let k = ckpt.k as usize;
    match ckpt.kind {
        ModelKind::Cvae => {
            let encoder = stack_from_tensors("encoder", &ckpt.tensors)?;
            let decoder = stack_from_tensors("decoder", &ckpt.tensors)?;
            if decoder.in_dim() <= k {
                return Err(Error::Shape(format!(
                    "decoder input width {} cannot fit {k} label columns",
                    decoder.in_dim()
                )));
            }
            let dims = CvaeDims {
                d,
                k,
                latent: decoder.in_dim() - k,
                h1: encoder.layers[0].out_dim(),
                h2: decoder.layers[0].out_dim(),
            };
            let model = CvaeParams { encoder, decoder, dims };
            model.check_shapes()?;
            Ok(ClientModel::Cvae(model))
        }
        ModelKind::Cgan => {
            let generator = stack_from_tensors("generator", &ckpt.tensors)?;
            let discriminator = stack_from_tensors("discriminator", &ckpt.tensors)?;
            if generator.in_dim() <= k {
                return Err(Error::Shape(format!(
                    "generator input width {} cannot fit {k} label columns",
                    generator.in_dim()
                )));
            }
            let dims = CganDims {
                d,
                k,
                z_g: generator.in_dim() - k,
                g1: generator.layers[0].out_dim(),
                g2: generator.layers[1].out_dim(),
                f1: discriminator.layers[0].out_dim(),
                f2: discriminator.layers[1].out_dim(),
            };
            let model = CganParams { generator, discriminator, dims };
            model.check_shapes()?;
            Ok(ClientModel::Cgan(model))
        }
        ModelKind::Linear => {
            let w = find_tensor(&ckpt.tensors, "weight")?;
            let b = find_tensor(&ckpt.tensors, "bias")?;
            if w.dims != vec![ckpt.k, ckpt.d] || b.dims != vec![ckpt.k] {
                return Err(Error::Shape(format!(
                    "classifier tensor dims {:?}/{:?} do not match header ({}, {})",
                    w.dims, b.dims, ckpt.k, ckpt.d
                )));
            }
            let mut p = LinearParams::zeros(d, k);
            let mut flat = w.data.clone();
            flat.extend_from_slice(&b.data);
            p.set_from_flat(&flat)?;
            Ok(ClientModel::Linear(p))
        }
    }
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            fs::create_dir_all(parent)?;
        }
    }
    let mut buf = Vec::new();
    buf.extend_from_slice(&MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&ckpt.config_hash);
    buf.extend_from_slice(&ckpt.round.to_le_bytes());
    buf.push(kind_code(ckpt.kind));
    buf.extend_from_slice(&ckpt.d.to_le_bytes());
    buf.extend_from_slice(&ckpt.k.to_le_bytes());
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for t in &ckpt.tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(t.dims.len() as u8);
        let mut count = 1usize;
        for &dim in &t.dims {
            buf.extend_from_slice(&dim.to_le_bytes());
            count *= dim as usize;
        }
        debug_assert_eq!(count, t.data.len(), "tensor {} dims/data mismatch", t.name);
        for &v in &t.data {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    fs::write(path, buf)?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!("truncated while reading {what} ({n} bytes needed)"),
            });
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u16_le(&mut self, what: &str) -> Result<u16> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32_le(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = fs::read(path)?;
    let mut r = Reader { buf: &buf, pos: 0 };

    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {:?}, expected \"FCKP\"", String::from_utf8_lossy(magic)),
        });
    }
    let version_at = r.pos as u64;
    let version = r.u32_le("version")?;
    if version != VERSION {
        return Err(Error::Format {
            offset: version_at,
            message: format!("unsupported version {version}, expected {VERSION}"),
        });
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32, "config hash")?);
    let round = r.u32_le("round")?;
    let kind_at = r.pos as u64;
    let kind = kind_from_code(r.u8("model kind")?, kind_at)?;
    let d = r.u32_le("embedding width")?;
    let k = r.u32_le("class count")?;
    let n_tensors = r.u32_le("tensor count")? as usize;

    let mut tensors = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let name_len = r.u16_le("tensor name length")? as usize;
        let name_at = r.pos as u64;
        let name_bytes = r.take(name_len, "tensor name")?;
        let name = std::str::from_utf8(name_bytes)
            .map_err(|e| Error::Format {
                offset: name_at,
                message: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        let mut count = 1usize;
        for _ in 0..rank {
            let dim = r.u32_le("tensor dim")?;
            dims.push(dim);
            count = count.saturating_mul(dim as usize);
        }
        let raw = r.take(4 * count, &format!("tensor {name} values"))?;
        let data: Vec<f64> =
            raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
        tensors.push(TensorEntry { name, dims, data });
    }
    if r.pos != buf.len() {
        return Err(Error::Format {
            offset: r.pos as u64,
            message: format!("{} trailing bytes after checkpoint payload", buf.len() - r.pos),
        });
    }
    Ok(Checkpoint { config_hash, round, kind, d, k, tensors })
}

/// Checkpoint holding just one shared stack (server-side global weights).
pub fn shared_checkpoint(
    kind: ModelKind,
    d: usize,
    k: usize,
    stack: &MlpStack,
    round: u32,
    config_hash: [u8; 32],
) -> Checkpoint {
    Checkpoint {
        config_hash,
        round,
        kind,
        d: d as u32,
        k: k as u32,
        tensors: stack_tensors("shared", stack),
    }
}

/// Rebuild the shared stack from a [`shared_checkpoint`].
pub fn shared_stack_from(ckpt: &Checkpoint) -> Result<MlpStack> {
    stack_from_tensors("shared", &ckpt.tensors)
}
