//! Binary checkpoint format.
//!
//! ```text
//! magic "SMMINI01" | version u8
//! header length u32 | header (compact JSON: configs, step, rng state)
//! tensor count u32
//! per tensor: name length u16 | name | dtype u8 | payload
//!   dtype 1 (f64):  ndim u8 | dims u64... | little-endian f64 values
//!   dtype 2 (q4):   quantized tensor encoding (see `quant`)
//! ```
//!
//! All integers are little-endian. Trailing bytes are rejected.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::optim::OptimizerState;
use super::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{Block, FrozenWeight, Linear, LoraAdapter, ModelConfig, Parameters, TensorRef};
use crate::quant::QuantizedTensor;

pub const MAGIC: &[u8; 8] = b"SMMINI01";
pub const VERSION: u8 = 1;

const DTYPE_F64: u8 = 1;
const DTYPE_Q4: u8 = 2;

/// Counter-based generator state: every random stream in training is
/// derived from `seed` and the step `counter`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub counter: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub params: Parameters,
    pub optimizer: OptimizerState,
    pub step: u64,
    pub rng: RngState,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    step: u64,
    optimizer_t: u64,
    rng: RngState,
}

enum Tensor {
    Dense { shape: Vec<usize>, data: Vec<f64> },
    Quantized(QuantizedTensor),
}

fn ckpt_err(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn put_dense(out: &mut Vec<u8>, name: &str, shape: &[usize], data: impl Iterator<Item = f64>) {
    put_name(out, name);
    out.push(DTYPE_F64);
    out.push(shape.len() as u8);
    for &d in shape {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: TensorRef<'_>) {
    match t {
        TensorRef::Matrix(m) => put_dense(out, name, m.shape(), m.iter().copied()),
        TensorRef::Vector(v) => put_dense(out, name, v.shape(), v.iter().copied()),
        TensorRef::Quantized(q) => {
            put_name(out, name);
            out.push(DTYPE_Q4);
            out.extend_from_slice(&q.encode());
        }
    }
}

/// Encode a parameter set's frozen tensors only. Two encodings are equal iff
/// the frozen weights are bitwise equal.
pub fn encode_frozen(params: &Parameters) -> Vec<u8> {
    let mut out = Vec::new();
    for (name, t) in params.frozen_tensors() {
        put_tensor(&mut out, &name, t);
    }
    out
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            step: self.step,
            optimizer_t: self.optimizer.t,
            rng: self.rng,
        };
        let json = serde_json::to_vec(&header).map_err(|e| ckpt_err(e.to_string()))?;

        let mut tensors = Vec::new();
        let mut count: u32 = 0;
        for (name, t) in self.params.frozen_tensors() {
            put_tensor(&mut tensors, &name, t);
            count += 1;
        }
        let names = self.params.trainable_names();
        for (name, t) in names.iter().zip(self.params.trainables()) {
            put_tensor(&mut tensors, name, TensorRef::Matrix(t));
            count += 1;
        }
        if self.optimizer.m.len() != names.len() || self.optimizer.v.len() != names.len() {
            return Err(ckpt_err("optimizer state does not mirror the trainable set"));
        }
        for (prefix, moments) in [("opt.m", &self.optimizer.m), ("opt.v", &self.optimizer.v)] {
            for (name, t) in names.iter().zip(moments) {
                put_tensor(&mut tensors, &format!("{prefix}.{name}"), TensorRef::Matrix(t));
                count += 1;
            }
        }

        let mut out = Vec::with_capacity(MAGIC.len() + 5 + json.len() + 4 + tensors.len());
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&count.to_le_bytes());
        out.extend_from_slice(&tensors);
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor::new(bytes);
        let magic: [u8; 8] = read_array(&mut r)?;
        if &magic != MAGIC {
            return Err(ckpt_err("bad magic; not a checkpoint file"));
        }
        let [version] = read_array::<1>(&mut r)?;
        if version != VERSION {
            return Err(ckpt_err(format!("unsupported version {version}")));
        }
        let json_len = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let json = read_vec(&mut r, json_len)?;
        let header: Header =
            serde_json::from_slice(&json).map_err(|e| ckpt_err(format!("header: {e}")))?;
        header.model.validate()?;

        let count = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let mut tensors = BTreeMap::new();
        for _ in 0..count {
            let name_len = u16::from_le_bytes(read_array(&mut r)?) as usize;
            let name = String::from_utf8(read_vec(&mut r, name_len)?)
                .map_err(|_| ckpt_err("tensor name is not UTF-8"))?;
            let [dtype] = read_array::<1>(&mut r)?;
            let tensor = match dtype {
                DTYPE_F64 => {
                    let [ndim] = read_array::<1>(&mut r)?;
                    let mut shape = Vec::with_capacity(ndim as usize);
                    for _ in 0..ndim {
                        shape.push(u64::from_le_bytes(read_array(&mut r)?) as usize);
                    }
                    let numel: usize = shape.iter().product();
                    let remaining = bytes.len() - r.position() as usize;
                    if numel.checked_mul(8).is_none_or(|n| n > remaining) {
                        return Err(ckpt_err(format!("truncated tensor {name}")));
                    }
                    let mut data = Vec::with_capacity(numel);
                    for _ in 0..numel {
                        data.push(f64::from_le_bytes(read_array(&mut r)?));
                    }
                    Tensor::Dense { shape, data }
                }
                DTYPE_Q4 => Tensor::Quantized(
                    QuantizedTensor::decode_from(&mut r)
                        .map_err(|e| ckpt_err(format!("tensor {name}: {e}")))?,
                ),
                other => return Err(ckpt_err(format!("unknown dtype {other} for {name}"))),
            };
            if tensors.insert(name.clone(), tensor).is_some() {
                return Err(ckpt_err(format!("duplicate tensor {name}")));
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(ckpt_err("trailing bytes after last tensor"));
        }

        let mut store = Store(tensors);
        let params = assemble(&header.model, &mut store)?;
        let names = params.trainable_names();
        let mut m = Vec::with_capacity(names.len());
        let mut v = Vec::with_capacity(names.len());
        for (name, t) in names.iter().zip(params.trainables()) {
            m.push(store.matrix(&format!("opt.m.{name}"), t.dim())?);
            v.push(store.matrix(&format!("opt.v.{name}"), t.dim())?);
        }
        if let Some(extra) = store.0.keys().next() {
            return Err(ckpt_err(format!("unexpected tensor {extra}")));
        }
        Ok(Checkpoint {
            model: header.model,
            train: header.train,
            params,
            optimizer: OptimizerState {
                m,
                v,
                t: header.optimizer_t,
            },
            step: header.step,
            rng: header.rng,
        })
    }
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    r.read_exact(&mut buf)
        .map_err(|_| ckpt_err("unexpected end of file"))?;
    Ok(buf)
}

fn read_vec(r: &mut Cursor<&[u8]>, len: usize) -> Result<Vec<u8>> {
    let remaining = r.get_ref().len() - r.position() as usize;
    if len > remaining {
        return Err(ckpt_err("unexpected end of file"));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)
        .map_err(|_| ckpt_err("unexpected end of file"))?;
    Ok(buf)
}

struct Store(BTreeMap<String, Tensor>);

impl Store {
    fn take(&mut self, name: &str) -> Result<Tensor> {
        self.0
            .remove(name)
            .ok_or_else(|| ckpt_err(format!("missing tensor {name}")))
    }

    fn matrix(&mut self, name: &str, dim: (usize, usize)) -> Result<Array2<f64>> {
        match self.take(name)? {
            Tensor::Dense { shape, data } if shape == [dim.0, dim.1] => {
                Ok(Array2::from_shape_vec(dim, data).expect("shape checked"))
            }
            _ => Err(ckpt_err(format!("tensor {name} is not a {dim:?} matrix"))),
        }
    }

    fn vector(&mut self, name: &str, len: usize) -> Result<Array1<f64>> {
        match self.take(name)? {
            Tensor::Dense { shape, data } if shape == [len] => Ok(Array1::from(data)),
            _ => Err(ckpt_err(format!("tensor {name} is not a length-{len} vector"))),
        }
    }

    fn linear(&mut self, cfg: &ModelConfig, name: &str, dim: (usize, usize)) -> Result<Linear> {
        let weight = match self.take(&format!("{name}.weight"))? {
            Tensor::Dense { shape, data } if shape == [dim.0, dim.1] => {
                FrozenWeight::Dense(Array2::from_shape_vec(dim, data).expect("shape checked"))
            }
            Tensor::Quantized(q) if q.shape == [dim.0, dim.1] => FrozenWeight::Quantized(q),
            _ => return Err(ckpt_err(format!("{name}.weight has the wrong shape"))),
        };
        let a_name = format!("{name}.lora_a");
        let adapter = if self.0.contains_key(&a_name) {
            Some(LoraAdapter {
                a: self.matrix(&a_name, (cfg.lora_r, dim.1))?,
                b: self.matrix(&format!("{name}.lora_b"), (dim.0, cfg.lora_r))?,
                alpha: cfg.lora_alpha,
                r: cfg.lora_r,
                dropout: cfg.lora_dropout,
            })
        } else {
            None
        };
        Ok(Linear { weight, adapter })
    }
}

fn assemble(cfg: &ModelConfig, store: &mut Store) -> Result<Parameters> {
    let d = cfg.d_model;
    let tok_emb = store.matrix("tok_emb", (cfg.vocab_size, d))?;
    let pos_emb = store.matrix("pos_emb", (cfg.max_sequence_length, d))?;
    let mut blocks = Vec::with_capacity(cfg.n_layers);
    for i in 0..cfg.n_layers {
        let p = format!("blocks.{i}");
        blocks.push(Block {
            attn_norm: store.vector(&format!("{p}.attn_norm"), d)?,
            mlp_norm: store.vector(&format!("{p}.mlp_norm"), d)?,
            wq: store.linear(cfg, &format!("{p}.wq"), (d, d))?,
            wk: store.linear(cfg, &format!("{p}.wk"), (d, d))?,
            wv: store.linear(cfg, &format!("{p}.wv"), (d, d))?,
            wo: store.linear(cfg, &format!("{p}.wo"), (d, d))?,
            w_gate: store.linear(cfg, &format!("{p}.w_gate"), (cfg.d_ff, d))?,
            w_up: store.linear(cfg, &format!("{p}.w_up"), (cfg.d_ff, d))?,
            w_down: store.linear(cfg, &format!("{p}.w_down"), (d, cfg.d_ff))?,
        });
    }
    let final_norm = store.vector("final_norm", d)?;
    let head = store.linear(cfg, "head", (cfg.vocab_size, d))?;
    let params = Parameters {
        config: cfg.clone(),
        tok_emb,
        pos_emb,
        blocks,
        final_norm,
        head,
    };
    params.check()?;
    Ok(params)
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    fs::write(path, ckpt.encode()?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| ckpt_err(format!("{}: {e}", path.display())))?;
    Checkpoint::decode(&bytes)
}
