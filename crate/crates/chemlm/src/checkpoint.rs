//! Self-describing checkpoint container: `MLFC1` magic, a key-value text
//! header, then named tensor records (name, dtype, shape, little-endian
//! payload). Saving and reloading at equal precision is bit-exact.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::attention::{AttentionVariant, FeatureNonlinearity};
use crate::model::{Encoder, EncoderConfig, ModelError, ParamStore};
use crate::nn::{Dtype, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"MLFC1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("tensor `{name}` has dtype {found:?}, expected {expected:?}")]
    DtypeMismatch { name: String, expected: Dtype, found: Dtype },
    #[error("checkpoint is missing tensor `{0}`")]
    MissingTensor(String),
    #[error("checkpoint holds unknown tensor `{0}`")]
    UnknownTensor(String),
    #[error("bad header entry: {0}")]
    BadHeader(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// One stored tensor: raw little-endian payload plus its metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: Dtype,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl TensorRecord {
    pub fn from_tensor<F: Scalar>(name: &str, t: &Tensor<F>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * F::DTYPE.size_bytes());
        match F::DTYPE {
            Dtype::F32 => {
                for &v in t.data() {
                    bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
                }
            }
            Dtype::F64 => {
                for &v in t.data() {
                    bytes.extend_from_slice(&v.as_f64().to_le_bytes());
                }
            }
        }
        TensorRecord { name: name.to_owned(), dtype: F::DTYPE, shape: t.shape().to_vec(), bytes }
    }

    pub fn to_tensor<F: Scalar>(&self) -> Result<Tensor<F>, CheckpointError> {
        if self.dtype != F::DTYPE {
            return Err(CheckpointError::DtypeMismatch {
                name: self.name.clone(),
                expected: F::DTYPE,
                found: self.dtype,
            });
        }
        let n: usize = self.shape.iter().product();
        if self.bytes.len() != n * self.dtype.size_bytes() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{}` payload is {} bytes, expected {}",
                self.name,
                self.bytes.len(),
                n * self.dtype.size_bytes()
            )));
        }
        let data: Vec<F> = match self.dtype {
            Dtype::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| F::from_f64(f32::from_le_bytes(c.try_into().unwrap()) as f64))
                .collect(),
            Dtype::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| F::from_f64(f64::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Ok(Tensor::new(self.shape.clone(), data))
    }
}

/// A parsed checkpoint: ordered header entries plus tensor records.
#[derive(Debug, Clone, Default)]
pub struct Checkpoint {
    pub header: Vec<(String, String)>,
    pub tensors: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn set_header(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        debug_assert!(!key.contains('=') && !key.contains('\n'), "bad header key {key}");
        debug_assert!(!value.contains('\n'), "header values are single-line");
        if let Some(e) = self.header.iter_mut().find(|(k, _)| k == key) {
            e.1 = value;
        } else {
            self.header.push((key.to_owned(), value));
        }
    }

    pub fn header_get(&self, key: &str) -> Option<&str> {
        self.header.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    fn header_require(&self, key: &str) -> Result<&str, CheckpointError> {
        self.header_get(key)
            .ok_or_else(|| CheckpointError::BadHeader(format!("missing key `{key}`")))
    }

    pub fn tensor(&self, name: &str) -> Option<&TensorRecord> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn write_to(&self, w: &mut impl Write) -> io::Result<()> {
        w.write_all(MAGIC)?;
        let mut header = String::new();
        for (k, v) in &self.header {
            header.push_str(k);
            header.push('=');
            header.push_str(v);
            header.push('\n');
        }
        w.write_all(&(header.len() as u32).to_le_bytes())?;
        w.write_all(header.as_bytes())?;
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for t in &self.tensors {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&[t.dtype.tag(), t.shape.len() as u8])?;
            for &d in &t.shape {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            w.write_all(&t.bytes)?;
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let header_len = read_u32(r)? as usize;
        let mut hbytes = vec![0u8; header_len];
        r.read_exact(&mut hbytes)?;
        let htext = String::from_utf8(hbytes)
            .map_err(|_| CheckpointError::Corrupt("header is not UTF-8".into()))?;
        let mut header = Vec::new();
        for line in htext.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Corrupt(format!("header line `{line}`")))?;
            header.push((k.to_owned(), v.to_owned()));
        }
        let count = read_u32(r)? as usize;
        let mut tensors = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u16(r)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name)
                .map_err(|_| CheckpointError::Corrupt("tensor name is not UTF-8".into()))?;
            let mut meta = [0u8; 2];
            r.read_exact(&mut meta)?;
            let dtype = Dtype::from_tag(meta[0])
                .ok_or_else(|| CheckpointError::Corrupt(format!("dtype tag {}", meta[0])))?;
            let ndim = meta[1] as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(read_u32(r)? as usize);
            }
            let n: usize = shape.iter().product();
            let mut bytes = vec![0u8; n * dtype.size_bytes()];
            r.read_exact(&mut bytes)?;
            tensors.push(TensorRecord { name, dtype, shape, bytes });
        }
        Ok(Checkpoint { header, tensors })
    }

    pub fn save(&self, path: &Path) -> io::Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        Self::read_from(&mut r)
    }
}

fn read_u32(r: &mut impl Read) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u16(r: &mut impl Read) -> io::Result<u16> {
    let mut b = [0u8; 2];
    r.read_exact(&mut b)?;
    Ok(u16::from_le_bytes(b))
}

/// Encoder config as header entries.
pub fn config_to_header(cfg: &EncoderConfig) -> Vec<(String, String)> {
    vec![
        ("layers".into(), cfg.layers.to_string()),
        ("heads".into(), cfg.heads.to_string()),
        ("hidden".into(), cfg.hidden.to_string()),
        ("ffn".into(), cfg.ffn.to_string()),
        ("variant".into(), cfg.variant.name().into()),
        ("dropout".into(), cfg.dropout.to_string()),
        ("max_positions".into(), cfg.max_positions.to_string()),
        ("vocab_size".into(), cfg.vocab_size.to_string()),
        ("feature_dim".into(), cfg.feature_dim.to_string()),
        ("feature_nonlinearity".into(), cfg.feature_nonlinearity.name().into()),
        ("scale_scores".into(), cfg.scale_scores.to_string()),
        ("seed".into(), cfg.seed.to_string()),
    ]
}

fn parse<T: std::str::FromStr>(ckpt: &Checkpoint, key: &str) -> Result<T, CheckpointError> {
    let v = ckpt.header_require(key)?;
    v.parse()
        .map_err(|_| CheckpointError::BadHeader(format!("cannot parse `{key}={v}`")))
}

/// Rebuild the encoder config from checkpoint header entries.
pub fn config_from_header(ckpt: &Checkpoint) -> Result<EncoderConfig, CheckpointError> {
    let variant = ckpt.header_require("variant")?;
    let variant = AttentionVariant::parse(variant)
        .ok_or_else(|| CheckpointError::BadHeader(format!("unknown variant `{variant}`")))?;
    let nl = ckpt.header_require("feature_nonlinearity")?;
    let feature_nonlinearity = FeatureNonlinearity::parse(nl)
        .ok_or_else(|| CheckpointError::BadHeader(format!("unknown nonlinearity `{nl}`")))?;
    Ok(EncoderConfig {
        layers: parse(ckpt, "layers")?,
        heads: parse(ckpt, "heads")?,
        hidden: parse(ckpt, "hidden")?,
        ffn: parse(ckpt, "ffn")?,
        variant,
        dropout: parse(ckpt, "dropout")?,
        max_positions: parse(ckpt, "max_positions")?,
        vocab_size: parse(ckpt, "vocab_size")?,
        feature_dim: parse(ckpt, "feature_dim")?,
        feature_nonlinearity,
        scale_scores: parse(ckpt, "scale_scores")?,
        seed: parse(ckpt, "seed")?,
    })
}

/// Snapshot an encoder (all parameters, feature map included).
pub fn encoder_to_checkpoint<F: Scalar>(enc: &Encoder<F>) -> Checkpoint {
    let mut ckpt = Checkpoint { header: config_to_header(&enc.config), tensors: Vec::new() };
    for p in enc.params.iter() {
        ckpt.tensors.push(TensorRecord::from_tensor(&p.name, &p.value));
    }
    ckpt
}

/// Restore an encoder: tensors must cover the configured parameter set
/// exactly (extra optimizer-state tensors, prefixed `opt.`, are ignored).
pub fn encoder_from_checkpoint<F: Scalar>(ckpt: &Checkpoint) -> Result<Encoder<F>, CheckpointError> {
    let config = config_from_header(ckpt)?;
    let template = Encoder::<F>::new(config.clone())?;
    let mut params = ParamStore::new();
    for p in template.params.iter() {
        let rec = ckpt
            .tensor(&p.name)
            .ok_or_else(|| CheckpointError::MissingTensor(p.name.clone()))?;
        let value: Tensor<F> = rec.to_tensor()?;
        if value.shape() != p.value.shape() {
            return Err(CheckpointError::Corrupt(format!(
                "tensor `{}` has shape {:?}, expected {:?}",
                p.name,
                value.shape(),
                p.value.shape()
            )));
        }
        params.add(&p.name, value, p.decay, p.trainable);
    }
    for t in &ckpt.tensors {
        if !t.name.starts_with("opt.") && params.get(&t.name).is_none() {
            return Err(CheckpointError::UnknownTensor(t.name.clone()));
        }
    }
    Ok(Encoder::from_parts(config, params)?)
}
