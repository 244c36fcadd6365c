//! Binary parameter checkpoints. Round trips are bit-exact.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   4 bytes    "LGKN"
//! version u32        currently 1
//! vocab   u32 count, then per token: u32 byte length + UTF-8 bytes
//! dims    6 × u32    vocab_size, d_model, n_layers, n_heads, max_len, ff_mult
//! u32 section count, per section:
//!   name          u32 length + UTF-8 bytes
//!   u32 tensor count, per tensor:
//!     name        u32 length + UTF-8 bytes
//!     u32 rows, u32 cols
//!     rows*cols × f64, row-major, little-endian bit patterns
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;
use thiserror::Error;

use super::{EncoderDims, EncoderError, EncoderParams, Vocab};

const MAGIC: &[u8; 4] = b"LGKN";
const VERSION: u32 = 1;

/// Canonical section names used by the pipeline.
pub const LOG_ENCODER: &str = "log_encoder";
pub const KNOWLEDGE_ENCODER: &str = "knowledge_encoder";
pub const KPM: &str = "kpm";
pub const HEAD: &str = "head";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint file: bad magic")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    BadVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Format(String),
    #[error("checkpoint has no section `{0}`")]
    MissingSection(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Encoder(#[from] EncoderError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Section {
    pub name: String,
    pub tensors: Vec<(String, Array2<f64>)>,
}

/// A saved model state: the vocabulary, encoder dims, and named tensor
/// sections (encoders, knowledge-perception weights, task heads).
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub vocab: Vocab,
    pub dims: EncoderDims,
    pub sections: Vec<Section>,
}

impl Checkpoint {
    pub fn new(vocab: Vocab, dims: EncoderDims) -> Self {
        Checkpoint {
            vocab,
            dims,
            sections: Vec::new(),
        }
    }

    pub fn insert_encoder(&mut self, name: &str, params: &EncoderParams) {
        let tensors = params
            .tensors()
            .into_iter()
            .map(|(n, t)| (n, t.clone()))
            .collect();
        self.insert_section(name, tensors);
    }

    pub fn insert_section(&mut self, name: &str, tensors: Vec<(String, Array2<f64>)>) {
        self.sections.retain(|s| s.name != name);
        self.sections.push(Section {
            name: name.to_owned(),
            tensors,
        });
    }

    pub fn section(&self, name: &str) -> Result<&Section, CheckpointError> {
        self.sections
            .iter()
            .find(|s| s.name == name)
            .ok_or_else(|| CheckpointError::MissingSection(name.to_owned()))
    }

    pub fn has_section(&self, name: &str) -> bool {
        self.sections.iter().any(|s| s.name == name)
    }

    pub fn encoder(&self, name: &str) -> Result<EncoderParams, CheckpointError> {
        let section = self.section(name)?;
        let map: HashMap<String, Array2<f64>> = section.tensors.iter().cloned().collect();
        Ok(EncoderParams::from_tensors(self.dims, map)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CheckpointError> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(MAGIC)?;
        write_u32(&mut w, VERSION)?;

        write_u32(&mut w, self.vocab.len() as u32)?;
        for token in self.vocab.tokens() {
            write_str(&mut w, token)?;
        }

        for v in [
            self.dims.vocab_size,
            self.dims.d_model,
            self.dims.n_layers,
            self.dims.n_heads,
            self.dims.max_len,
            self.dims.ff_mult,
        ] {
            write_u32(&mut w, v as u32)?;
        }

        write_u32(&mut w, self.sections.len() as u32)?;
        for section in &self.sections {
            write_str(&mut w, &section.name)?;
            write_u32(&mut w, section.tensors.len() as u32)?;
            for (name, tensor) in &section.tensors {
                write_str(&mut w, name)?;
                write_u32(&mut w, tensor.nrows() as u32)?;
                write_u32(&mut w, tensor.ncols() as u32)?;
                for &value in tensor.iter() {
                    w.write_all(&value.to_le_bytes())?;
                }
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, CheckpointError> {
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion(version));
        }

        let vocab_len = read_u32(&mut r)? as usize;
        if vocab_len < super::SPECIAL_TOKENS.len() {
            return Err(CheckpointError::Format("vocab too small".into()));
        }
        let mut vocab = Vocab::new();
        for idx in 0..vocab_len {
            let token = read_str(&mut r)?;
            if idx < super::SPECIAL_TOKENS.len() {
                if token != super::SPECIAL_TOKENS[idx] {
                    return Err(CheckpointError::Format(format!(
                        "special token {idx} is `{token}`"
                    )));
                }
            } else {
                vocab.add_token(&token);
            }
        }

        let mut dims = [0usize; 6];
        for d in dims.iter_mut() {
            *d = read_u32(&mut r)? as usize;
        }
        let dims = EncoderDims {
            vocab_size: dims[0],
            d_model: dims[1],
            n_layers: dims[2],
            n_heads: dims[3],
            max_len: dims[4],
            ff_mult: dims[5],
        };

        let n_sections = read_u32(&mut r)? as usize;
        let mut sections = Vec::with_capacity(n_sections);
        for _ in 0..n_sections {
            let name = read_str(&mut r)?;
            let n_tensors = read_u32(&mut r)? as usize;
            let mut tensors = Vec::with_capacity(n_tensors);
            for _ in 0..n_tensors {
                let tensor_name = read_str(&mut r)?;
                let rows = read_u32(&mut r)? as usize;
                let cols = read_u32(&mut r)? as usize;
                let mut data = Vec::with_capacity(rows * cols);
                let mut buf = [0u8; 8];
                for _ in 0..rows * cols {
                    r.read_exact(&mut buf)?;
                    data.push(f64::from_le_bytes(buf));
                }
                let tensor = Array2::from_shape_vec((rows, cols), data)
                    .map_err(|e| CheckpointError::Format(e.to_string()))?;
                tensors.push((tensor_name, tensor));
            }
            sections.push(Section { name, tensors });
        }

        Ok(Checkpoint {
            vocab,
            dims,
            sections,
        })
    }
}

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> Result<u32, CheckpointError> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let len = read_u32(r)? as usize;
    if len > 1 << 24 {
        return Err(CheckpointError::Format(format!("string length {len}")));
    }
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| CheckpointError::Format(e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let vocab = Vocab::build(["link down on port", "neighbor lost"]);
        let dims = EncoderDims {
            vocab_size: vocab.len(),
            d_model: 8,
            n_layers: 2,
            n_heads: 2,
            max_len: 16,
            ff_mult: 4,
        };
        let params = EncoderParams::init(42, dims).unwrap();
        let mut ckpt = Checkpoint::new(vocab, dims);
        ckpt.insert_encoder(LOG_ENCODER, &params);
        ckpt.insert_encoder(KNOWLEDGE_ENCODER, &params);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        ckpt.save(&path).unwrap();
        let loaded = Checkpoint::load(&path).unwrap();
        assert_eq!(loaded, ckpt);

        let restored = loaded.encoder(LOG_ENCODER).unwrap();
        assert_eq!(restored, params);

        // saving the loaded checkpoint reproduces the file byte for byte
        let path2 = dir.path().join("model2.ckpt");
        loaded.save(&path2).unwrap();
        assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
    }

    #[test]
    fn bad_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPE....").unwrap();
        assert!(matches!(
            Checkpoint::load(&path),
            Err(CheckpointError::BadMagic)
        ));
    }

    #[test]
    fn missing_section_is_reported() {
        let vocab = Vocab::new();
        let dims = EncoderDims::desk(vocab.len());
        let ckpt = Checkpoint::new(vocab, dims);
        assert!(matches!(
            ckpt.encoder(LOG_ENCODER),
            Err(CheckpointError::MissingSection(_))
        ));
    }
}
