//! Checkpoint container.
//!
//! All integers little-endian:
//!
//! ```text
//! magic      8 bytes  "RLCKPT\0\0"
//! version    u32      1
//! meta_len   u32, then meta_len bytes of UTF-8 (free-form, usually JSON)
//! count      u32
//! count × { name_len u32, name bytes, rank u32, rank × dim u64,
//!           Π dims × f32 payload }
//! ```

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use std::io::{Cursor, Read};
use std::path::Path;

use crate::optim::Adam;
use crate::{Error, Module, Real, Result, Tensor};

pub const MAGIC: &[u8; 8] = b"RLCKPT\0\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: String,
    pub tensors: Vec<(String, Vec<usize>, Vec<f32>)>,
}

fn bad(m: impl Into<String>) -> Error {
    Error::Checkpoint(m.into())
}

impl Checkpoint {
    pub fn new(meta: impl Into<String>) -> Checkpoint {
        Checkpoint {
            meta: meta.into(),
            tensors: Vec::new(),
        }
    }

    pub fn push<T: Real>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        self.tensors.push((name.into(), t.shape.clone(), t.data.iter().map(|v| v.f64() as f32).collect()));
    }

    pub fn add_module<T: Real>(&mut self, prefix: &str, module: &mut dyn Module<T>) {
        module.visit_params(prefix, &mut |name, p| self.push(name, &p.value));
    }

    pub fn get<T: Real>(&self, name: &str) -> Option<Tensor<T>> {
        self.tensors.iter().find(|(n, ..)| n == name).map(|(_, shape, data)| Tensor {
            shape: shape.clone(),
            data: data.iter().map(|&v| T::of(v as f64)).collect(),
        })
    }

    /// Copies stored values into every parameter of `module`.
    pub fn load_module<T: Real>(&self, prefix: &str, module: &mut dyn Module<T>) -> Result<()> {
        let mut err = None;
        module.visit_params(prefix, &mut |name, p| {
            if err.is_some() {
                return;
            }
            match self.get::<T>(name) {
                None => err = Some(bad(format!("missing tensor {name}"))),
                Some(t) if t.shape != p.value.shape => {
                    err = Some(bad(format!("{name}: stored {:?}, model {:?}", t.shape, p.value.shape)))
                }
                Some(t) => p.value = t,
            }
        });
        err.map_or(Ok(()), Err)
    }

    pub fn add_adam<T: Real>(&mut self, prefix: &str, adam: &Adam<T>) {
        let hyper = [adam.lr, adam.beta1, adam.beta2, adam.eps, adam.weight_decay, adam.step as f64];
        self.push(format!("{prefix}.hyper"), &Tensor::<f64>::from_f64(&[6], &hyper).expect("six values"));
        for (i, (m, v)) in adam.m.iter().zip(&adam.v).enumerate() {
            self.push(format!("{prefix}.m.{i}"), &Tensor { shape: vec![m.len()], data: m.clone() });
            self.push(format!("{prefix}.v.{i}"), &Tensor { shape: vec![v.len()], data: v.clone() });
        }
    }

    pub fn adam<T: Real>(&self, prefix: &str) -> Option<Adam<T>> {
        let h = self.get::<f64>(&format!("{prefix}.hyper"))?.data;
        let mut adam = Adam::new(h[0], h[4]);
        adam.beta1 = h[1];
        adam.beta2 = h[2];
        adam.eps = h[3];
        adam.step = h[5] as u64;
        let mut i = 0;
        while let (Some(m), Some(v)) = (self.get::<T>(&format!("{prefix}.m.{i}")), self.get::<T>(&format!("{prefix}.v.{i}"))) {
            adam.m.push(m.data);
            adam.v.push(v.data);
            i += 1;
        }
        Some(adam)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.write_u32::<LittleEndian>(VERSION).unwrap();
        out.write_u32::<LittleEndian>(self.meta.len() as u32).unwrap();
        out.extend_from_slice(self.meta.as_bytes());
        out.write_u32::<LittleEndian>(self.tensors.len() as u32).unwrap();
        for (name, shape, data) in &self.tensors {
            out.write_u32::<LittleEndian>(name.len() as u32).unwrap();
            out.extend_from_slice(name.as_bytes());
            out.write_u32::<LittleEndian>(shape.len() as u32).unwrap();
            for &d in shape {
                out.write_u64::<LittleEndian>(d as u64).unwrap();
            }
            for &v in data {
                out.write_f32::<LittleEndian>(v).unwrap();
            }
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut r = Cursor::new(bytes);
        let eof = |_| bad("truncated checkpoint");
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(eof)?;
        if &magic != MAGIC {
            return Err(bad("bad magic"));
        }
        let version = r.read_u32::<LittleEndian>().map_err(eof)?;
        if version != VERSION {
            return Err(bad(format!("unsupported version {version}")));
        }
        let string = |r: &mut Cursor<&[u8]>| -> Result<String> {
            let n = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            if n > bytes.len() {
                return Err(bad("string length exceeds file"));
            }
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(eof)?;
            String::from_utf8(buf).map_err(|_| bad("non-UTF-8 string"))
        };
        let meta = string(&mut r)?;
        let count = r.read_u32::<LittleEndian>().map_err(eof)?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name = string(&mut r)?;
            let rank = r.read_u32::<LittleEndian>().map_err(eof)? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.read_u64::<LittleEndian>().map_err(eof)? as usize);
            }
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| bad("shape overflow"))?;
            if n.saturating_mul(4) > bytes.len() {
                return Err(bad(format!("{name}: payload exceeds file")));
            }
            let mut data = vec![0f32; n];
            r.read_f32_into::<LittleEndian>(&mut data).map_err(eof)?;
            tensors.push((name, shape, data));
        }
        Ok(Checkpoint { meta, tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.encode()).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Checkpoint::decode(&bytes)
    }
}
