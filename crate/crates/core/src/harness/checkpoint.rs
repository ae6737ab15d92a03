//! Binary checkpoint format.
//!
//! ```text
//! "GATEPRO-CKPT-v1\n"
//! u64 config_len, config_len bytes of TOML (the run config)
//! u64 step            next step to execute
//! u64 rng_state       data stream position
//! u64 adam_t
//! u64 n_tensors
//! n_tensors x { u64 name_len, name, u64 rows, u64 cols, rows*cols f64 }
//! ```
//!
//! Integers and floats are little-endian. Tensors appear in parameter
//! declaration order, followed by the Adam first and second moments in the
//! same order (prefixed `adam.m.` / `adam.v.`).

use std::fs;
use std::path::Path;

use super::config::RunConfig;
use crate::error::{Error, Result};
use crate::moe::{AdamState, MoeStackParams};
use crate::numerics::Rng;
use crate::router::GatingWeights;

pub const CHECKPOINT_MAGIC: &[u8] = b"GATEPRO-CKPT-v1\n";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: RunConfig,
    pub step: u64,
    pub data_rng: Rng,
    pub params: MoeStackParams,
    pub adam: AdamState,
}

fn put_u64(buf: &mut Vec<u8>, v: u64) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, rows: usize, cols: usize, data: &[f64]) {
    put_u64(buf, name.len() as u64);
    buf.extend_from_slice(name.as_bytes());
    put_u64(buf, rows as u64);
    put_u64(buf, cols as u64);
    for v in data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> std::result::Result<usize, String> {
        let v = self.u64()?;
        usize::try_from(v).map_err(|_| format!("length {v} does not fit in memory"))
    }

    fn tensor_into(&mut self, want_name: &str, rows: usize, cols: usize, dst: &mut [f64]) -> std::result::Result<(), String> {
        let name_len = self.len()?;
        let name = std::str::from_utf8(self.take(name_len)?).map_err(|_| "tensor name is not utf-8".to_string())?;
        if name != want_name {
            return Err(format!("expected tensor {want_name}, found {name}"));
        }
        let (r, c) = (self.len()?, self.len()?);
        if (r, c) != (rows, cols) {
            return Err(format!("tensor {name} has shape {r}x{c}, expected {rows}x{cols}"));
        }
        let bytes = self.take(rows * cols * 8)?;
        for (d, chunk) in dst.iter_mut().zip(bytes.chunks_exact(8)) {
            *d = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(())
    }
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let config = self.config.to_toml_string()?;
        let tensors = self.params.tensors();
        let mut buf = Vec::with_capacity(CHECKPOINT_MAGIC.len() + 24 * self.params.n_params());
        buf.extend_from_slice(CHECKPOINT_MAGIC);
        put_u64(&mut buf, config.len() as u64);
        buf.extend_from_slice(config.as_bytes());
        put_u64(&mut buf, self.step);
        put_u64(&mut buf, self.data_rng.state());
        put_u64(&mut buf, self.adam.t);
        put_u64(&mut buf, 3 * tensors.len() as u64);
        for t in &tensors {
            put_tensor(&mut buf, &t.name, t.rows, t.cols, t.data);
        }
        for (prefix, moments) in [("adam.m.", &self.adam.m), ("adam.v.", &self.adam.v)] {
            for (t, m) in tensors.iter().zip(moments.iter()) {
                put_tensor(&mut buf, &format!("{prefix}{}", t.name), t.rows, t.cols, m);
            }
        }
        Ok(buf)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: String| Error::Checkpoint {
            path: path.to_path_buf(),
            reason,
        };
        if !bytes.starts_with(CHECKPOINT_MAGIC) {
            return Err(corrupt("missing GATEPRO-CKPT-v1 header".into()));
        }
        let mut r = Reader {
            buf: bytes,
            pos: CHECKPOINT_MAGIC.len(),
        };
        let cfg_len = r.len().map_err(corrupt)?;
        let cfg_text = std::str::from_utf8(r.take(cfg_len).map_err(corrupt)?)
            .map_err(|_| corrupt("config echo is not utf-8".into()))?;
        let config = RunConfig::from_toml_str(cfg_text).map_err(|e| corrupt(format!("config echo: {e}")))?;
        let step = r.u64().map_err(corrupt)?;
        let data_rng = Rng::new(r.u64().map_err(corrupt)?);
        let adam_t = r.u64().map_err(corrupt)?;
        let n_tensors = r.len().map_err(corrupt)?;

        // Shapes and names come from a freshly built stack of the same dims.
        let mut params = MoeStackParams::init(config.stack_dims(), &mut Rng::new(0))?;
        let layout: Vec<(String, usize, usize)> = params
            .tensors()
            .iter()
            .map(|t| (t.name.clone(), t.rows, t.cols))
            .collect();
        if n_tensors != 3 * layout.len() {
            return Err(corrupt(format!(
                "expected {} tensors, header says {n_tensors}",
                3 * layout.len()
            )));
        }
        for ((name, rows, cols), dst) in layout.iter().zip(params.tensors_mut()) {
            r.tensor_into(name, *rows, *cols, dst).map_err(corrupt)?;
        }
        let mut adam = AdamState::new(&params);
        adam.t = adam_t;
        for (prefix, moments) in [("adam.m.", &mut adam.m), ("adam.v.", &mut adam.v)] {
            for ((name, rows, cols), dst) in layout.iter().zip(moments.iter_mut()) {
                r.tensor_into(&format!("{prefix}{name}"), *rows, *cols, dst).map_err(corrupt)?;
            }
        }
        if r.pos != bytes.len() {
            return Err(corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if !params.all_finite() {
            return Err(corrupt("non-finite parameter".into()));
        }
        for layer in &mut params.layers {
            layer.gating = GatingWeights::new(layer.gating.matrix().clone()).map_err(|e| corrupt(e.to_string()))?;
        }
        Ok(Checkpoint {
            config,
            step,
            data_rng,
            params,
            adam,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        fs::write(path, bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Checkpoint::from_bytes(&bytes, path)
    }
}
