//! `RBK1` checkpoint files.
//!
//! Layout: the four magic bytes `RBK1`, one line of JSON header terminated by
//! `\n`, then every parameter array as little-endian `f64` in layer order
//! (weight before bias).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::layer::{LayerSpec, Params};
use super::network::Network;
use crate::{Error, Result, Tensor};

pub const MAGIC: &[u8; 4] = b"RBK1";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    input_shape: Vec<usize>,
    n_classes: usize,
    seed: u64,
    layers: Vec<LayerSpec>,
    param_shapes: Vec<Vec<usize>>,
}

pub fn to_bytes(net: &Network) -> Vec<u8> {
    let param_shapes = net
        .params()
        .iter()
        .flatten()
        .flat_map(|p| [p.weight.shape().to_vec(), p.bias.shape().to_vec()])
        .collect();
    let header = Header {
        format_version: FORMAT_VERSION,
        input_shape: net.input_shape().to_vec(),
        n_classes: net.n_classes(),
        seed: net.seed(),
        layers: net.layers().to_vec(),
        param_shapes,
    };
    let mut out = MAGIC.to_vec();
    out.extend(serde_json::to_vec(&header).expect("header serializes"));
    out.push(b'\n');
    for p in net.params().iter().flatten() {
        for v in p.weight.data().iter().chain(p.bias.data()) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn from_bytes(bytes: &[u8]) -> Result<Network> {
    let rest = bytes
        .strip_prefix(MAGIC.as_slice())
        .ok_or_else(|| Error::Checkpoint("missing RBK1 magic".into()))?;
    let nl = rest
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::Checkpoint("unterminated header".into()))?;
    let header: Header = serde_json::from_slice(&rest[..nl])?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported format version {}",
            header.format_version
        )));
    }
    let mut payload = &rest[nl + 1..];
    let mut read = |shape: &[usize]| -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if payload.len() < 8 * n {
            return Err(Error::Checkpoint("truncated parameter payload".into()));
        }
        let (head, tail) = payload.split_at(8 * n);
        payload = tail;
        let data = head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data)
    };
    let mut params = Vec::with_capacity(header.layers.len());
    for spec in &header.layers {
        params.push(match spec.param_shapes() {
            Some((ws, bs)) => Some(Params {
                weight: read(&ws)?,
                bias: read(&bs)?,
            }),
            None => None,
        });
    }
    if !payload.is_empty() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after parameters",
            payload.len()
        )));
    }
    let net = Network::with_params(&header.input_shape, header.layers, params, header.seed)?;
    if net.n_classes() != header.n_classes {
        return Err(Error::Checkpoint(format!(
            "header claims {} classes, layers produce {}",
            header.n_classes,
            net.n_classes()
        )));
    }
    Ok(net)
}

pub fn save(net: &Network, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, to_bytes(net))?;
    Ok(())
}

pub fn load(path: impl AsRef<Path>) -> Result<Network> {
    from_bytes(&fs::read(path)?)
}

/// First 16 hex digits of the SHA-256 of the checkpoint bytes.
pub fn hash_bytes(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest[..8].iter().map(|b| format!("{b:02x}")).collect()
}

pub fn hash(net: &Network) -> String {
    hash_bytes(&to_bytes(net))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Architecture;

    #[test]
    fn roundtrip_is_exact() {
        let net = Network::from_architecture(&Architecture::small_cnn(), &[1, 8, 8], 3, 5).unwrap();
        let bytes = to_bytes(&net);
        assert_eq!(&bytes[..4], b"RBK1");
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, net);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn rejects_corruption() {
        let net = Network::from_architecture(&Architecture::Linear, &[4], 2, 1).unwrap();
        let bytes = to_bytes(&net);
        assert!(from_bytes(&bytes[1..]).is_err());
        assert!(from_bytes(&bytes[..bytes.len() - 3]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(from_bytes(&extra).is_err());
    }
}
