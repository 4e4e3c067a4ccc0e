//! Versioned binary checkpoint container.
//!
//! ```text
//! magic    b"BIOLMCKP"
//! version  u32 LE (= 1)
//! config   u32 LE byte length, then UTF-8 `key=value` lines
//! tensors  u32 LE count, then per tensor:
//!            u32 LE name length, name bytes,
//!            u32 LE rank, rank × u64 LE dims,
//!            row-major f32 LE values
//! ```
//!
//! Config lines hold the model configuration; run metadata uses keys
//! prefixed with `meta.`.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Cursor, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use crate::model::{ModelConfig, ModelParams, Weights};
use crate::prompt::PromptParams;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BIOLMCKP";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: Weights<f32>,
    pub metadata: BTreeMap<String, String>,
}

fn config_record(config: &ModelConfig, metadata: &BTreeMap<String, String>) -> String {
    let mut out = format!(
        "num_layers={}\nhidden_size={}\nnum_heads={}\nffn_size={}\nmax_positions={}\nvocab_size={}\ndropout={}\n",
        config.num_layers,
        config.hidden_size,
        config.num_heads,
        config.ffn_size,
        config.max_positions,
        config.vocab_size,
        config.dropout
    );
    for (k, v) in metadata {
        debug_assert!(!k.contains('=') && !k.contains('\n') && !v.contains('\n'));
        out.push_str(&format!("meta.{k}={v}\n"));
    }
    out
}

fn parse_config_record(text: &str) -> Result<(ModelConfig, BTreeMap<String, String>)> {
    let bad = |m: String| Error::BadCheckpoint(m);
    let mut fields = BTreeMap::new();
    let mut metadata = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| bad(format!("config line {line:?}")))?;
        match k.strip_prefix("meta.") {
            Some(meta) => {
                metadata.insert(meta.to_owned(), v.to_owned());
            }
            None => {
                fields.insert(k.to_owned(), v.to_owned());
            }
        }
    }
    let count = |name: &str| -> Result<usize> {
        fields
            .get(name)
            .ok_or_else(|| bad(format!("missing config field {name}")))?
            .parse()
            .map_err(|_| bad(format!("config field {name} is not an integer")))
    };
    let config = ModelConfig {
        num_layers: count("num_layers")?,
        hidden_size: count("hidden_size")?,
        num_heads: count("num_heads")?,
        ffn_size: count("ffn_size")?,
        max_positions: count("max_positions")?,
        vocab_size: count("vocab_size")?,
        dropout: fields
            .get("dropout")
            .ok_or_else(|| bad("missing config field dropout".into()))?
            .parse()
            .map_err(|_| bad("dropout is not a number".into()))?,
    };
    config.validate()?;
    Ok((config, metadata))
}

impl Checkpoint {
    pub fn new(weights: Weights<f32>) -> Self {
        Checkpoint {
            weights,
            metadata: BTreeMap::new(),
        }
    }

    pub fn with_meta(mut self, key: &str, value: impl ToString) -> Self {
        self.metadata.insert(key.to_owned(), value.to_string());
        self
    }

    pub fn meta(&self, key: &str) -> Option<&str> {
        self.metadata.get(key).map(String::as_str)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.write_u32::<LittleEndian>(VERSION).expect("vec write");
        let record = config_record(self.weights.config(), &self.metadata);
        out.write_u32::<LittleEndian>(record.len() as u32).expect("vec write");
        out.extend_from_slice(record.as_bytes());
        let shapes = self.weights.named_shapes();
        let tensors = self.weights.tensors();
        out.write_u32::<LittleEndian>(shapes.len() as u32).expect("vec write");
        for ((name, shape), data) in shapes.iter().zip(tensors) {
            out.write_u32::<LittleEndian>(name.len() as u32).expect("vec write");
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(shape.len() as u32).expect("vec write");
            for &d in shape {
                out.write_u64::<LittleEndian>(d as u64).expect("vec write");
            }
            for &v in data {
                out.write_f32::<LittleEndian>(v).expect("vec write");
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let truncated = |_| Error::BadCheckpoint("unexpected end of data".into());
        let mut r = Cursor::new(bytes);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(truncated)?;
        if &magic != MAGIC {
            return Err(Error::BadCheckpoint("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(truncated)?;
        if version != VERSION {
            return Err(Error::BadCheckpoint(format!("unsupported version {version}")));
        }
        let len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let mut record = vec![0u8; len];
        r.read_exact(&mut record).map_err(truncated)?;
        let record = String::from_utf8(record).map_err(|_| Error::BadCheckpoint("config is not UTF-8".into()))?;
        let (config, metadata) = parse_config_record(&record)?;

        let count = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
        let expected = config.tensor_shapes();
        if count != expected.len() && count != expected.len() + 1 {
            return Err(Error::BadCheckpoint(format!("unexpected tensor count {count}")));
        }
        let mut tensors = Vec::with_capacity(count);
        let mut prompt = None;
        for i in 0..count {
            let name_len = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let mut name = vec![0u8; name_len];
            r.read_exact(&mut name).map_err(truncated)?;
            let name = String::from_utf8(name).map_err(|_| Error::BadCheckpoint("tensor name is not UTF-8".into()))?;
            let rank = r.read_u32::<LittleEndian>().map_err(truncated)? as usize;
            let shape = (0..rank)
                .map(|_| r.read_u64::<LittleEndian>().map(|d| d as usize))
                .collect::<std::io::Result<Vec<_>>>()
                .map_err(truncated)?;
            let numel: usize = shape.iter().product();
            if numel * 4 > bytes.len() {
                return Err(Error::BadCheckpoint(format!("tensor {name} larger than file")));
            }
            let mut data = vec![0f32; numel];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(truncated)?;
            if i < expected.len() {
                if (&name, &shape) != (&expected[i].0, &expected[i].1) {
                    return Err(Error::BadCheckpoint(format!(
                        "tensor {i} is {name} {shape:?}, expected {} {:?}",
                        expected[i].0, expected[i].1
                    )));
                }
                tensors.push(data);
            } else {
                if name != PromptParams::<f32>::TENSOR_NAME || shape.len() != 2 || shape[1] != config.hidden_size {
                    return Err(Error::BadCheckpoint(format!("unexpected tensor {name} {shape:?}")));
                }
                prompt = Some(PromptParams {
                    length: shape[0],
                    hidden: shape[1],
                    embeddings: data,
                });
            }
        }
        if (r.position() as usize) != bytes.len() {
            return Err(Error::BadCheckpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            weights: Weights {
                model: ModelParams::from_tensors(config, tensors),
                prompt,
            },
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        file.write_all(&self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn config() -> ModelConfig {
        ModelConfig {
            num_layers: 2,
            hidden_size: 8,
            num_heads: 2,
            ffn_size: 16,
            max_positions: 12,
            vocab_size: 20,
            dropout: 0.1,
        }
    }

    proptest! {
        #[test]
        fn bytes_round_trip_exactly(seed in 0u64..1000, prompt_len in 0usize..4) {
            let mut weights = Weights::new(ModelParams::<f32>::init(config(), seed).unwrap());
            if prompt_len > 0 {
                weights.prompt = Some(PromptParams::init(prompt_len, 8, seed + 1));
            }
            let ck = Checkpoint::new(weights).with_meta("prompt", "cont:9").with_meta("format", "rel-is");
            let bytes = ck.to_bytes();
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert_eq!(&back, &ck);
            prop_assert_eq!(back.to_bytes(), bytes);
        }
    }

    #[test]
    fn corrupt_input_is_rejected() {
        let ck = Checkpoint::new(Weights::new(ModelParams::<f32>::init(config(), 1).unwrap()));
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3]).is_err());
        assert!(Checkpoint::from_bytes(b"NOTACKPT").is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
    }
}
