//! Single-file binary checkpoints.
//!
//! Layout: magic + version, named-tensor table (name, dtype, shape,
//! little-endian f64 payload, trainable flag), optional optimizer moments,
//! trainer counters (step, dropout RNG position), then a trailer with the
//! model spec JSON and the vocabulary hash. Loading is bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use super::optimizer::AdamState;
use super::{ModelError, ModelSpec, ParamTensor, Parameters};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MMHCKPT1";
const VERSION: u32 = 1;
const DTYPE_F64: u8 = 1;

/// Everything stored in a checkpoint file.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub params: Parameters,
    pub optimizer: Option<AdamState>,
    pub step: u64,
    /// Dropout/train RNG stream position for exact resume.
    pub rng_word_pos: u128,
    pub spec: ModelSpec,
    pub vocab_hash: [u8; 32],
}

impl Checkpoint {
    /// Rejects checkpoints written for a different spec or vocabulary.
    pub fn ensure_matches(
        &self,
        spec: &ModelSpec,
        vocab_hash: &[u8; 32],
    ) -> Result<(), ModelError> {
        if &self.spec != spec {
            return Err(ModelError::IncompatibleSpec(format!(
                "model spec differs (checkpoint: {:?})",
                self.spec
            )));
        }
        if &self.vocab_hash != vocab_hash {
            return Err(ModelError::IncompatibleSpec(
                "vocabulary hash differs".to_string(),
            ));
        }
        Ok(())
    }
}

pub fn save_checkpoint(
    path: impl AsRef<Path>,
    params: &Parameters,
    optimizer: Option<&AdamState>,
    step: u64,
    rng_word_pos: u128,
    spec: &ModelSpec,
    vocab_hash: &[u8; 32],
) -> Result<(), ModelError> {
    let path = path.as_ref();
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());

    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params.iter() {
        write_name(&mut buf, name);
        buf.push(DTYPE_F64);
        buf.push(tensor.trainable as u8);
        write_array(&mut buf, &tensor.value);
    }

    match optimizer {
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step.to_le_bytes());
            buf.extend_from_slice(&(opt.moments.len() as u32).to_le_bytes());
            for (name, (m, v)) in &opt.moments {
                write_name(&mut buf, name);
                write_array(&mut buf, m);
                write_array(&mut buf, v);
            }
        }
        None => buf.push(0),
    }

    buf.extend_from_slice(&step.to_le_bytes());
    buf.extend_from_slice(&(rng_word_pos as u64).to_le_bytes());
    buf.extend_from_slice(&((rng_word_pos >> 64) as u64).to_le_bytes());

    let spec_json = serde_json::to_vec(spec).expect("spec serializes");
    buf.extend_from_slice(&(spec_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&spec_json);
    buf.extend_from_slice(vocab_hash);

    let mut file = std::fs::File::create(path).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    file.write_all(&buf).map_err(|source| ModelError::Io {
        path: path.to_path_buf(),
        source,
    })
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint, ModelError> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|source| ModelError::Io {
            path: path.to_path_buf(),
            source,
        })?;
    let mut r = CkptReader {
        bytes: &bytes,
        pos: 0,
        path,
    };

    let magic = r.take(8)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(r.bad("wrong magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(r.bad(&format!("unsupported version {version}")));
    }

    let n_tensors = r.u32()? as usize;
    let mut params = Parameters::default();
    for _ in 0..n_tensors {
        let name = r.name()?;
        let dtype = r.u8()?;
        if dtype != DTYPE_F64 {
            return Err(r.bad(&format!("unknown dtype tag {dtype}")));
        }
        let trainable = r.u8()? != 0;
        let value = r.array()?;
        params.insert_tensor(name, ParamTensor { value, trainable });
    }

    let optimizer = if r.u8()? != 0 {
        let step = r.u64()?;
        let n = r.u32()? as usize;
        let mut moments = IndexMap::new();
        for _ in 0..n {
            let name = r.name()?;
            let m = r.array()?;
            let v = r.array()?;
            moments.insert(name, (m, v));
        }
        Some(AdamState { step, moments })
    } else {
        None
    };

    let step = r.u64()?;
    let lo = r.u64()? as u128;
    let hi = r.u64()? as u128;
    let rng_word_pos = lo | (hi << 64);

    let spec_len = r.u32()? as usize;
    let spec_bytes = r.take(spec_len)?;
    let spec: ModelSpec = serde_json::from_slice(spec_bytes)
        .map_err(|e| r.bad(&format!("bad spec json: {e}")))?;
    let hash_bytes = r.take(32)?;
    let mut vocab_hash = [0u8; 32];
    vocab_hash.copy_from_slice(hash_bytes);

    Ok(Checkpoint {
        params,
        optimizer,
        step,
        rng_word_pos,
        spec,
        vocab_hash,
    })
}

fn write_name(buf: &mut Vec<u8>, name: &str) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
}

fn write_array(buf: &mut Vec<u8>, array: &ArrayD<f64>) {
    buf.push(array.ndim() as u8);
    for dim in array.shape() {
        buf.extend_from_slice(&(*dim as u32).to_le_bytes());
    }
    for v in array.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct CkptReader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> CkptReader<'a> {
    fn bad(&self, detail: &str) -> ModelError {
        ModelError::BadCheckpoint {
            path: self.path.to_path_buf(),
            detail: detail.to_string(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], ModelError> {
        if self.pos + n > self.bytes.len() {
            return Err(ModelError::BadCheckpoint {
                path: self.path.to_path_buf(),
                detail: format!("truncated at byte {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ModelError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ModelError> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Result<u64, ModelError> {
        let b = self.take(8)?;
        Ok(u64::from_le_bytes(b.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String, ModelError> {
        let len = self.u32()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec()).map_err(|_| self.bad("non-utf8 tensor name"))
    }

    fn array(&mut self) -> Result<ArrayD<f64>, ModelError> {
        let ndim = self.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(self.u32()? as usize);
        }
        let len: usize = shape.iter().product();
        let payload = self.take(len * 8)?;
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ArrayD::from_shape_vec(IxDyn(&shape), values)
            .map_err(|e| self.bad(&format!("bad tensor shape: {e}")))
    }
}

