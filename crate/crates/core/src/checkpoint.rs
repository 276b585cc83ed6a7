//! "NNQ1" binary checkpoints: magic, version, a JSON model descriptor, then
//! named tensors as shape + little-endian f64 payloads. Save -> load -> save
//! is byte-identical.

use crate::config::RunEcho;
use crate::error::{Error, Result};
use crate::model::{Layer, LayerKind, LossHead, Model};
use crate::quant::{PactQuant, WeightQuant};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"NNQ1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct LayerMeta {
    id: String,
    kind: LayerKind,
    has_weight: bool,
    has_bias: bool,
    weight_quant: Option<WeightQuant>,
    /// PACT bit widths; the clip values live in the tensor section.
    act_quant_bits: Option<Vec<u8>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Descriptor {
    layers: Vec<LayerMeta>,
    head: LossHead,
    input_shape: Vec<usize>,
    /// Originating run configuration, so downstream commands can rebuild the
    /// dataset deterministically.
    echo: Option<RunEcho>,
}

pub fn save(model: &Model, echo: Option<&RunEcho>, path: &Path) -> Result<()> {
    let descriptor = Descriptor {
        layers: model
            .layers
            .iter()
            .map(|l| LayerMeta {
                id: l.id.clone(),
                kind: l.kind,
                has_weight: l.weight.is_some(),
                has_bias: l.bias.is_some(),
                weight_quant: l.weight_quant.clone(),
                act_quant_bits: l.act_quant.as_ref().map(|q| q.bits.clone()),
            })
            .collect(),
        head: model.head.clone(),
        input_shape: model.input_shape.clone(),
        echo: echo.cloned(),
    };
    let desc_json = serde_json::to_vec(&descriptor).expect("descriptor serializes");

    let mut tensors: Vec<(String, &[usize], Vec<f64>)> = Vec::new();
    for l in &model.layers {
        if let Some(w) = &l.weight {
            tensors.push((format!("{}.weight", l.id), w.shape(), w.data().to_vec()));
        }
        if let Some(b) = &l.bias {
            tensors.push((format!("{}.bias", l.id), b.shape(), b.data().to_vec()));
        }
        if let Some(q) = &l.act_quant {
            tensors.push((format!("{}.alpha", l.id), &[0][..0], q.alphas.clone()));
        }
    }

    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(desc_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&desc_json);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, shape, data) in &tensors {
        let nb = name.as_bytes();
        buf.extend_from_slice(&(nb.len() as u32).to_le_bytes());
        buf.extend_from_slice(nb);
        let dims: Vec<usize> = if shape.is_empty() {
            vec![data.len()]
        } else {
            shape.to_vec()
        };
        buf.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for d in &dims {
            buf.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&buf))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Data(format!(
                "{}: truncated checkpoint at byte offset {}",
                self.path, self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<(Model, Option<RunEcho>)> {
    let mut raw = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut raw))
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = Reader {
        buf: &raw,
        pos: 0,
        path: path.display().to_string(),
    };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Data(format!(
            "{}: bad magic {magic:?} at byte offset 0 (want \"NNQ1\")",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let dlen = r.u32()? as usize;
    let desc: Descriptor = serde_json::from_slice(r.take(dlen)?)
        .map_err(|e| Error::Data(format!("{}: descriptor parse: {e}", path.display())))?;

    let tcount = r.u32()? as usize;
    let mut tensors = std::collections::BTreeMap::new();
    for _ in 0..tcount {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|e| Error::Data(format!("{}: tensor name: {e}", path.display())))?;
        let ndim = r.u32()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.u32()? as usize);
        }
        let numel: usize = dims.iter().product();
        let bytes = r.take(numel * 8)?;
        let data: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes([c[0], c[1], c[2], c[3], c[4], c[5], c[6], c[7]]))
            .collect();
        tensors.insert(name, (dims, data));
    }

    let mut layers = Vec::with_capacity(desc.layers.len());
    for lm in &desc.layers {
        let weight = if lm.has_weight {
            let (dims, data) = tensors
                .remove(&format!("{}.weight", lm.id))
                .ok_or_else(|| Error::Data(format!("missing tensor {}.weight", lm.id)))?;
            Some(Tensor::new(dims, data)?)
        } else {
            None
        };
        let bias = if lm.has_bias {
            let (dims, data) = tensors
                .remove(&format!("{}.bias", lm.id))
                .ok_or_else(|| Error::Data(format!("missing tensor {}.bias", lm.id)))?;
            Some(Tensor::new(dims, data)?)
        } else {
            None
        };
        let act_quant = match &lm.act_quant_bits {
            Some(bits) => {
                let (_, alphas) = tensors
                    .remove(&format!("{}.alpha", lm.id))
                    .ok_or_else(|| Error::Data(format!("missing tensor {}.alpha", lm.id)))?;
                Some(PactQuant {
                    bits: bits.clone(),
                    alphas,
                })
            }
            None => None,
        };
        layers.push(Layer {
            id: lm.id.clone(),
            kind: lm.kind,
            weight,
            bias,
            weight_quant: lm.weight_quant.clone(),
            act_quant,
        });
    }
    let model = Model::new(layers, desc.head, desc.input_shape)?;
    Ok((model, desc.echo))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::convnet_s;

    #[test]
    fn roundtrip_is_byte_identical() {
        let dir = tempfile::tempdir().unwrap();
        let m = convnet_s(10, 3);
        let p1 = dir.path().join("a.nnq");
        let p2 = dir.path().join("b.nnq");
        save(&m, None, &p1).unwrap();
        let (loaded, echo) = load(&p1).unwrap();
        assert!(echo.is_none());
        save(&loaded, None, &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        assert_eq!(m.flatten_params(), loaded.flatten_params());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.nnq");
        std::fs::write(&p, b"XXXX\x01\x00\x00\x00").unwrap();
        let err = load(&p).unwrap_err();
        assert!(err.to_string().contains("bad magic"), "{err}");
    }

    #[test]
    fn quant_state_survives_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut m = convnet_s(10, 3);
        // attach PACT state to the first relu
        let relu_idx = m.layer_index("relu1").unwrap();
        m.layers[relu_idx].act_quant = Some(PactQuant {
            bits: vec![4; 8],
            alphas: (0..8).map(|i| 0.5 + i as f64 * 0.1).collect(),
        });
        let p = dir.path().join("q.nnq");
        save(&m, None, &p).unwrap();
        let (loaded, _) = load(&p).unwrap();
        let q = loaded.layers[relu_idx].act_quant.as_ref().unwrap();
        assert_eq!(q.bits, vec![4; 8]);
        assert_eq!(q.alphas, m.layers[relu_idx].act_quant.as_ref().unwrap().alphas);
    }
}
