//! Self-describing binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "CCDMCKPT" | u32 schema version | u8 dtype (4 = f32, 8 = f64)
//! u32 metadata count | { u32 len, utf8 key, u32 len, utf8 value }*
//! u32 parameter count | { u32 len, utf8 name, u32 ndim, u64 dim*, raw values }*
//! u8 has optimizer | [ u64 step, f64 lr, f64 beta1, f64 beta2, f64 eps,
//!                      first moments (shapes as parameters, raw values),
//!                      second moments ]
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::optim::AdamState;
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 8] = b"CCDMCKPT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<T> {
    pub params: ParamStore<T>,
    pub optimizer: Option<AdamState<T>>,
    pub metadata: BTreeMap<String, String>,
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    put_u32(out, s.len() as u32);
    out.extend_from_slice(s.as_bytes());
}

fn put_values<T: Real>(out: &mut Vec<u8>, t: &Tensor<T>) {
    for &v in t.data() {
        v.write_le(out);
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint(format!(
                "truncated at byte {} (wanted {n} more)",
                self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|e| Error::Checkpoint(e.to_string()))
    }

    fn values<T: Real>(&mut self, shape: &[usize]) -> Result<Tensor<T>> {
        let n: usize = shape.iter().product();
        let w = std::mem::size_of::<T>();
        let raw = self.take(n * w)?;
        let data = raw.chunks(w).map(T::read_le).collect();
        Tensor::new(shape.to_vec(), data)
    }
}

impl<T: Real> Checkpoint<T> {
    pub fn new(params: ParamStore<T>) -> Self {
        Self {
            params,
            optimizer: None,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        put_u32(&mut out, SCHEMA_VERSION);
        out.push(T::DTYPE.code());
        put_u32(&mut out, self.metadata.len() as u32);
        for (k, v) in &self.metadata {
            put_str(&mut out, k);
            put_str(&mut out, v);
        }
        put_u32(&mut out, self.params.len() as u32);
        for (name, t) in self.params.iter() {
            put_str(&mut out, name);
            put_u32(&mut out, t.ndim() as u32);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            put_values(&mut out, t);
        }
        match &self.optimizer {
            None => out.push(0),
            Some(st) => {
                out.push(1);
                out.extend_from_slice(&st.step.to_le_bytes());
                for x in [st.lr, st.beta1, st.beta2, st.eps] {
                    out.extend_from_slice(&x.to_le_bytes());
                }
                for t in st.m.iter().chain(&st.v) {
                    put_values(&mut out, t);
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = r.u32()?;
        if version != SCHEMA_VERSION {
            return Err(Error::Checkpoint(format!(
                "schema version {version}, expected {SCHEMA_VERSION}"
            )));
        }
        let dtype = DType::from_code(r.u8()?)
            .ok_or_else(|| Error::Checkpoint("unknown element type".into()))?;
        if dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {dtype:?} values, requested {:?}",
                T::DTYPE
            )));
        }
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.string()?;
            let v = r.string()?;
            metadata.insert(k, v);
        }
        let mut params = ParamStore::new();
        for _ in 0..r.u32()? {
            let name = r.string()?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let t = r.values(&shape)?;
            params.add(name, t)?;
        }
        let optimizer = match r.u8()? {
            0 => None,
            1 => {
                let step = r.u64()?;
                let lr = r.f64()?;
                let beta1 = r.f64()?;
                let beta2 = r.f64()?;
                let eps = r.f64()?;
                let shapes: Vec<Vec<usize>> = params.values().iter().map(|t| t.shape().to_vec()).collect();
                let m = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
                let v = shapes.iter().map(|s| r.values(s)).collect::<Result<Vec<_>>>()?;
                Some(AdamState {
                    m,
                    v,
                    step,
                    lr,
                    beta1,
                    beta2,
                    eps,
                })
            }
            x => return Err(Error::Checkpoint(format!("bad optimizer flag {x}"))),
        };
        if r.pos != buf.len() {
            return Err(Error::Checkpoint(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self {
            params,
            optimizer,
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 over parameter names, shapes and values only.
    pub fn param_hash(&self) -> String {
        param_hash(&self.params)
    }
}

pub fn param_hash<T: Real>(params: &ParamStore<T>) -> String {
    let mut h = Sha256::new();
    for (name, t) in params.iter() {
        h.update(name.as_bytes());
        for &d in t.shape() {
            h.update((d as u64).to_le_bytes());
        }
        let mut buf = Vec::with_capacity(t.len() * 8);
        put_values(&mut buf, t);
        h.update(&buf);
    }
    hex(&h.finalize())
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}
