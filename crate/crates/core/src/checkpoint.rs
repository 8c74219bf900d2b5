//! Checkpoint files: magic, format version, serialized backbone config,
//! named little-endian parameter blobs, and a trailing whole-file SHA-256.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::backbone::{build_network, BackboneConfig, DescriptorNetwork};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DDCK";
const VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_f64(buf: &mut Vec<u8>, v: f64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!(
                "{}: truncated file (needed {} bytes at offset {}, have {})",
                self.path.display(),
                n,
                self.pos,
                self.bytes.len() - self.pos
            )));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn encode_config(config: &BackboneConfig, buf: &mut Vec<u8>) {
    push_u32(buf, config.input_channels as u32);
    push_u32(buf, config.descriptor_length as u32);
    push_u32(buf, config.layers_per_block.len() as u32);
    for &l in &config.layers_per_block {
        push_u32(buf, l as u32);
    }
    push_u32(buf, config.growth_rate as u32);
    push_u32(buf, config.downsample_levels as u32);
    push_f64(buf, config.activation_slope);
    push_u64(buf, config.seed);
}

fn decode_config(r: &mut Reader) -> Result<BackboneConfig> {
    let input_channels = r.u32()? as usize;
    let descriptor_length = r.u32()? as usize;
    let n_blocks = r.u32()? as usize;
    if n_blocks > 64 {
        return Err(Error::Checkpoint(format!(
            "{}: implausible block count {}",
            r.path.display(),
            n_blocks
        )));
    }
    let mut layers_per_block = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        layers_per_block.push(r.u32()? as usize);
    }
    Ok(BackboneConfig {
        input_channels,
        descriptor_length,
        layers_per_block,
        growth_rate: r.u32()? as usize,
        downsample_levels: r.u32()? as usize,
        activation_slope: r.f64()?,
        seed: r.u64()?,
    })
}

pub fn save_checkpoint(net: &DescriptorNetwork, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    push_u32(&mut buf, VERSION);
    encode_config(net.config(), &mut buf);
    push_u32(&mut buf, net.parameters().len() as u32);
    for p in net.parameters() {
        push_u32(&mut buf, p.name.len() as u32);
        buf.extend_from_slice(p.name.as_bytes());
        push_u32(&mut buf, p.tensor.shape().len() as u32);
        for &d in p.tensor.shape() {
            push_u32(&mut buf, d as u32);
        }
        for &v in p.tensor.data() {
            push_f64(&mut buf, v);
        }
    }
    let digest = Sha256::digest(&buf);
    buf.extend_from_slice(&digest);

    let mut file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(path, e))
}

/// Metadata of a checkpoint without rebuilding the network.
pub struct CheckpointInfo {
    pub version: u32,
    pub config: BackboneConfig,
    pub parameters: Vec<(String, Vec<usize>)>,
    pub parameter_count: usize,
    pub file_bytes: usize,
}

fn read_verified(path: &Path) -> Result<Vec<u8>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .map_err(|e| Error::io(path, e))?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    if bytes.len() < MAGIC.len() + 4 + 32 {
        return Err(Error::Checkpoint(format!(
            "{}: truncated file ({} bytes)",
            path.display(),
            bytes.len()
        )));
    }
    let (body, stored) = bytes.split_at(bytes.len() - 32);
    let digest = Sha256::digest(body);
    if digest.as_slice() != stored {
        return Err(Error::Checkpoint(format!(
            "{}: checksum mismatch (file corrupted)",
            path.display()
        )));
    }
    if &body[..4] != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(body[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: format version {} unsupported (expected {})",
            path.display(),
            version,
            VERSION
        )));
    }
    Ok(body[8..].to_vec())
}

fn parse_params(path: &Path, payload: &[u8]) -> Result<(BackboneConfig, Vec<(String, Vec<usize>, Vec<f64>)>)> {
    let mut r = Reader {
        bytes: payload,
        pos: 0,
        path,
    };
    let config = decode_config(&mut r)?;
    let count = r.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Checkpoint(format!("{}: bad parameter name", path.display())))?;
        let ndim = r.u32()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.f64()?);
        }
        params.push((name, shape, data));
    }
    if r.pos != payload.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            payload.len() - r.pos
        )));
    }
    Ok((config, params))
}

pub fn load_checkpoint(path: &Path) -> Result<DescriptorNetwork> {
    let payload = read_verified(path)?;
    let (config, stored) = parse_params(path, &payload)?;
    let mut net = build_network(&config)?;
    if stored.len() != net.parameters().len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} parameters stored, architecture has {}",
            path.display(),
            stored.len(),
            net.parameters().len()
        )));
    }
    let mut tensors = Vec::with_capacity(stored.len());
    for ((name, shape, data), expected) in stored.into_iter().zip(net.parameters()) {
        if name != expected.name || shape != expected.tensor.shape() {
            return Err(Error::Checkpoint(format!(
                "{}: parameter {} {:?} does not match architecture ({} {:?})",
                path.display(),
                name,
                shape,
                expected.name,
                expected.tensor.shape()
            )));
        }
        tensors.push(Tensor::from_vec(data, &shape, true)?);
    }
    net.replace_parameters(tensors)?;
    Ok(net)
}

pub fn inspect_checkpoint(path: &Path) -> Result<CheckpointInfo> {
    let file_bytes = std::fs::metadata(path).map_err(|e| Error::io(path, e))?.len() as usize;
    let payload = read_verified(path)?;
    let (config, stored) = parse_params(path, &payload)?;
    let parameter_count = stored.iter().map(|(_, s, _)| s.iter().product::<usize>()).sum();
    Ok(CheckpointInfo {
        version: VERSION,
        config,
        parameters: stored.into_iter().map(|(n, s, _)| (n, s)).collect(),
        parameter_count,
        file_bytes,
    })
}
