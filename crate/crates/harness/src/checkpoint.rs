//! Checkpoint file: `ITCK` magic, version, block directory, block payloads, trailing CRC32.
//!
//! ```text
//! "ITCK" | u32 version | u32 blocks
//! directory: blocks × (u32 name_len | name | u32 offset | u32 length)
//! payloads at the declared offsets (absolute, from the start of the file)
//! u32 crc32 of all preceding bytes
//! ```
//!
//! A payload starts with a u32 kind: 0 is UTF-8 text, 1 is a tensor list
//! `u32 count | count × (u32 name_len | name | u32 rank | rank × u32 dim | f32 data)`.

use std::path::Path;

use itap::diffmath::Tensor;
use itap::prior::PriorModel;
use itap::rqvae::{Codebook, CodebookState, RqVaeModel, Standardizer};

use crate::binio::{verify_envelope, Reader, Writer};
use crate::config::RunConfig;
use crate::error::{HarnessError, Result};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"ITCK";
pub const CHECKPOINT_VERSION: u32 = 1;

const KIND_TEXT: u32 = 0;
const KIND_TENSORS: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum BlockData {
    Text(String),
    Tensors(Vec<(String, Tensor)>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub name: String,
    pub data: BlockData,
}

/// Raw named blocks; see [`Checkpoint`] for the typed view.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CheckpointFile {
    pub blocks: Vec<Block>,
}

fn encode_payload(data: &BlockData) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    match data {
        BlockData::Text(text) => {
            w.u32(KIND_TEXT);
            w.bytes(text.as_bytes());
        }
        BlockData::Tensors(list) => {
            w.u32(KIND_TENSORS);
            w.len_u32(list.len())?;
            for (name, t) in list {
                w.len_u32(name.len())?;
                w.bytes(name.as_bytes());
                w.len_u32(t.shape().len())?;
                for &d in t.shape() {
                    w.len_u32(d)?;
                }
                w.f32s(t.data());
            }
        }
    }
    Ok(w.buf)
}

fn decode_payload(bytes: &[u8]) -> Result<BlockData> {
    let mut r = Reader::new(bytes);
    match r.u32()? {
        KIND_TEXT => {
            let text = std::str::from_utf8(r.take(r.remaining())?)
                .map_err(|_| HarnessError::Corrupt("text block is not UTF-8".into()))?;
            Ok(BlockData::Text(text.to_string()))
        }
        KIND_TENSORS => {
            let count = r.u32()? as usize;
            let mut list = Vec::new();
            for _ in 0..count {
                let name = read_name(&mut r)?;
                let rank = r.u32()? as usize;
                if rank * 4 > r.remaining() {
                    return Err(HarnessError::Corrupt(format!("tensor {name}: rank {rank} exceeds payload")));
                }
                let shape: Vec<usize> = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<_>>()?;
                let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
                let numel = match numel {
                    Some(n) if n.saturating_mul(4) <= r.remaining() => n,
                    _ => {
                        return Err(HarnessError::Corrupt(format!(
                            "tensor {name}: shape {shape:?} exceeds payload"
                        )))
                    }
                };
                let data = r.f32s(numel)?;
                list.push((name, Tensor::new(shape, data)?));
            }
            if r.remaining() != 0 {
                return Err(HarnessError::Corrupt("trailing bytes in tensor block".into()));
            }
            Ok(BlockData::Tensors(list))
        }
        kind => Err(HarnessError::Format(format!("unknown block kind {kind}"))),
    }
}

fn read_name(r: &mut Reader<'_>) -> Result<String> {
    let len = r.u32()? as usize;
    let bytes = r.take(len)?;
    String::from_utf8(bytes.to_vec()).map_err(|_| HarnessError::Corrupt("name is not UTF-8".into()))
}

impl CheckpointFile {
    pub fn block(&self, name: &str) -> Option<&BlockData> {
        self.blocks.iter().find(|b| b.name == name).map(|b| &b.data)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let payloads: Vec<Vec<u8>> = self.blocks.iter().map(|b| encode_payload(&b.data)).collect::<Result<_>>()?;
        let dir_len: usize = self.blocks.iter().map(|b| 12 + b.name.len()).sum();
        let mut offset = 12 + dir_len;
        let mut w = Writer::default();
        w.bytes(&CHECKPOINT_MAGIC);
        w.u32(CHECKPOINT_VERSION);
        w.len_u32(self.blocks.len())?;
        for (b, p) in self.blocks.iter().zip(&payloads) {
            w.len_u32(b.name.len())?;
            w.bytes(b.name.as_bytes());
            w.len_u32(offset)?;
            w.len_u32(p.len())?;
            offset += p.len();
        }
        for p in &payloads {
            w.bytes(p);
        }
        Ok(w.finish())
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let body = verify_envelope(bytes, &CHECKPOINT_MAGIC, CHECKPOINT_VERSION)?;
        let mut r = Reader::new(body);
        r.take(8)?;
        let count = r.u32()? as usize;
        let mut directory = Vec::new();
        for _ in 0..count {
            let name = read_name(&mut r)?;
            let offset = r.u32()? as usize;
            let length = r.u32()? as usize;
            directory.push((name, offset, length));
        }
        let mut expected = r.pos();
        let mut blocks = Vec::with_capacity(count);
        for (name, offset, length) in directory {
            if offset != expected || offset.checked_add(length).map_or(true, |end| end > body.len()) {
                return Err(HarnessError::Corrupt(format!(
                    "block {name} at {offset}+{length} does not match the payload layout"
                )));
            }
            blocks.push(Block {
                data: decode_payload(&body[offset..offset + length])?,
                name,
            });
            expected = offset + length;
        }
        if expected != body.len() {
            return Err(HarnessError::Corrupt("bytes after the last block".into()));
        }
        Ok(CheckpointFile { blocks })
    }
}

fn tensors<'a>(file: &'a CheckpointFile, name: &str) -> Result<&'a [(String, Tensor)]> {
    match file.block(name) {
        Some(BlockData::Tensors(list)) => Ok(list),
        Some(_) => Err(HarnessError::Format(format!("block {name} is not a tensor block"))),
        None => Err(HarnessError::Format(format!("checkpoint has no {name} block"))),
    }
}

fn take_extra<'a>(extra: &'a [(String, Tensor)], name: &str) -> Result<&'a Tensor> {
    extra
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| HarnessError::Format(format!("missing tensor {name}")))
}

fn vector(v: &[f64]) -> Tensor {
    Tensor::new(vec![v.len()], v.to_vec()).expect("vector shape")
}

fn rows_tensor(rows: &[Vec<f64>]) -> Result<Tensor> {
    Ok(Tensor::from_rows(rows)?)
}

fn tensor_rows(t: &Tensor) -> Vec<Vec<f64>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

// Non-parameter tensors carry a leading '@' so they never collide with parameter names.
fn scaler_tensors(prefix: &str, s: &Standardizer) -> Vec<(String, Tensor)> {
    vec![
        (format!("@{prefix}.mean"), vector(&s.mean)),
        (format!("@{prefix}.std"), vector(&s.std)),
    ]
}

fn read_scaler(extra: &[(String, Tensor)], prefix: &str) -> Result<Standardizer> {
    Ok(Standardizer {
        mean: take_extra(extra, &format!("@{prefix}.mean"))?.data().to_vec(),
        std: take_extra(extra, &format!("@{prefix}.std"))?.data().to_vec(),
    })
}

fn split_params(list: &[(String, Tensor)]) -> (Vec<(&str, &Tensor)>, Vec<(String, Tensor)>) {
    let mut params = Vec::new();
    let mut extra = Vec::new();
    for (n, t) in list {
        if n.starts_with('@') {
            extra.push((n.clone(), t.clone()));
        } else {
            params.push((n.as_str(), t));
        }
    }
    (params, extra)
}

fn rqvae_block(model: &RqVaeModel) -> Result<Vec<(String, Tensor)>> {
    let mut list: Vec<(String, Tensor)> = model
        .params()
        .named_values()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    let s = model.codebook().state();
    let flags = [f64::from(u8::from(s.pin_zero)), f64::from(u8::from(s.initialized))];
    list.push(("@codebook.entries".into(), rows_tensor(&s.entries)?));
    list.push(("@codebook.ema_cluster_size".into(), vector(&s.ema_cluster_size)));
    list.push(("@codebook.ema_embed_sum".into(), rows_tensor(&s.ema_embed_sum)?));
    let usage: Vec<f64> = s.usage_counts.iter().map(|&c| c as f64).collect();
    list.push(("@codebook.usage_counts".into(), vector(&usage)));
    let unused: Vec<f64> = s.batches_unused.iter().map(|&c| f64::from(c)).collect();
    list.push(("@codebook.batches_unused".into(), vector(&unused)));
    list.push(("@codebook.flags".into(), vector(&flags)));
    list.extend(scaler_tensors("scaler", model.scaler()));
    Ok(list)
}

fn load_rqvae(config: &RunConfig, list: &[(String, Tensor)]) -> Result<RqVaeModel> {
    let mut model = RqVaeModel::new(config.rqvae_config(), config.seed)?;
    let (params, extra) = split_params(list);
    model.params_mut().load_values(params)?;
    let flags = take_extra(&extra, "@codebook.flags")?.data().to_vec();
    if flags.len() != 2 {
        return Err(HarnessError::Format("codebook flags must have 2 entries".into()));
    }
    let counts = |name: &str| -> Result<Vec<f64>> { Ok(take_extra(&extra, name)?.data().to_vec()) };
    let state = CodebookState {
        entries: tensor_rows(take_extra(&extra, "@codebook.entries")?),
        ema_cluster_size: counts("@codebook.ema_cluster_size")?,
        ema_embed_sum: tensor_rows(take_extra(&extra, "@codebook.ema_embed_sum")?),
        decay: config.ema_decay,
        usage_counts: counts("@codebook.usage_counts")?.into_iter().map(|c| c as u64).collect(),
        batches_unused: counts("@codebook.batches_unused")?.into_iter().map(|c| c as u32).collect(),
        pin_zero: flags[0] != 0.0,
        initialized: flags[1] != 0.0,
    };
    model.set_codebook(Codebook::from_state(state)?)?;
    model.set_scaler(read_scaler(&extra, "scaler")?)?;
    Ok(model)
}

fn prior_block(model: &PriorModel) -> Vec<(String, Tensor)> {
    let mut list: Vec<(String, Tensor)> = model
        .params()
        .named_values()
        .map(|(n, t)| (n.to_string(), t.clone()))
        .collect();
    list.extend(scaler_tensors("obs_scaler", model.obs_scaler()));
    list
}

fn load_prior(config: &RunConfig, codebook: &Codebook, list: &[(String, Tensor)]) -> Result<PriorModel> {
    let mut model = PriorModel::new(config.prior_config(), codebook.entries(), config.seed)?;
    let (params, extra) = split_params(list);
    model.params_mut().load_values(params)?;
    model.set_obs_scaler(read_scaler(&extra, "obs_scaler")?)?;
    Ok(model)
}

/// Trained models plus the configuration that produced them.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub rqvae: RqVaeModel,
    pub prior: Option<PriorModel>,
}

impl Checkpoint {
    pub fn to_file(&self) -> Result<CheckpointFile> {
        let mut blocks = vec![
            Block {
                name: "config".into(),
                data: BlockData::Text(self.config.to_text()),
            },
            Block {
                name: "rqvae".into(),
                data: BlockData::Tensors(rqvae_block(&self.rqvae)?),
            },
        ];
        if let Some(prior) = &self.prior {
            blocks.push(Block {
                name: "prior".into(),
                data: BlockData::Tensors(prior_block(prior)),
            });
        }
        Ok(CheckpointFile { blocks })
    }

    pub fn from_file(file: &CheckpointFile) -> Result<Self> {
        let config = match file.block("config") {
            Some(BlockData::Text(text)) => RunConfig::parse(text)?,
            _ => return Err(HarnessError::Format("checkpoint has no config text block".into())),
        };
        let rqvae = load_rqvae(&config, tensors(file, "rqvae")?)?;
        let prior = match file.block("prior") {
            Some(_) => Some(load_prior(&config, rqvae.codebook(), tensors(file, "prior")?)?),
            None => None,
        };
        Ok(Checkpoint { config, rqvae, prior })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        self.to_file()?.to_bytes()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        Self::from_file(&CheckpointFile::from_bytes(bytes)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    pub fn prior(&self) -> Result<&PriorModel> {
        self.prior
            .as_ref()
            .ok_or_else(|| HarnessError::Format("checkpoint has no prior block; run train-prior first".into()))
    }

    pub fn summary(&self) -> String {
        let r = self.rqvae.config();
        let used = self.rqvae.codebook().usage_counts().iter().filter(|&&c| c > 0).count();
        let mut out = format!(
            "checkpoint: L={} C={} K={} D={} latent_dim={}\nrqvae: {} parameters, {used}/{} codes used\n",
            r.macro_len,
            r.context_len,
            r.codebook_size,
            r.depth,
            r.latent_dim,
            self.rqvae.params().num_scalars(),
            r.codebook_size,
        );
        match &self.prior {
            Some(p) => out.push_str(&format!("prior: {} parameters\n", p.params().num_scalars())),
            None => out.push_str("prior: absent\n"),
        }
        out.push_str("config:\n");
        out.push_str(&self.config.to_text());
        out
    }
}
