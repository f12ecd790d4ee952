//! Versioned binary checkpoint.
//!
//! All integers little-endian.
//!
//! ```text
//! magic        b"KGAL"
//! version      u32 (= 1)
//! precision    u8  (4 = f32, 8 = f64)
//! config       u32 length + UTF-8 bytes (resolved `key = value` text)
//! epoch        u64
//! rng streams  u32 count, then per stream:
//!              u8 stream id, [u8; 32] seed, u64 stream, u128 word position
//! tensors      u32 count, then per tensor:
//!              u32 name length + UTF-8 name, u32 rank, u64 per dim,
//!              product(dims) values of the stated precision
//! ```

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::diffmath::{ParamStore, Real, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"KGAL";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub precision: u8,
    pub config: String,
    pub epoch: u64,
    pub rng_streams: Vec<(u8, ChaCha8Rng)>,
    /// Name, shape, values widened to f64.
    pub tensors: Vec<(String, Vec<usize>, Vec<f64>)>,
}

impl Checkpoint {
    pub fn from_store<T: Real>(
        store: &ParamStore<T>,
        config: &str,
        epoch: u64,
        rng_streams: Vec<(u8, ChaCha8Rng)>,
    ) -> Self {
        let tensors = store
            .ids()
            .map(|id| {
                let v = store.value(id);
                let data = v.data().iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect();
                (store.name(id).to_string(), v.shape().to_vec(), data)
            })
            .collect();
        Checkpoint {
            precision: T::BYTES as u8,
            config: config.to_string(),
            epoch,
            rng_streams,
            tensors,
        }
    }

    /// Copies tensors into `store`, which must hold exactly the same names
    /// and shapes.
    pub fn load_into<T: Real>(&self, store: &mut ParamStore<T>) -> Result<()> {
        if self.tensors.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint holds {} tensors, model expects {}",
                self.tensors.len(),
                store.len()
            )));
        }
        for (name, shape, data) in &self.tensors {
            let id = store
                .id_of(name)
                .ok_or_else(|| Error::Checkpoint(format!("unexpected tensor `{name}`")))?;
            let current = store.value(id).shape().to_vec();
            if &current != shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{name}` has shape {shape:?}, model expects {current:?}"
                )));
            }
            *store.value_mut(id) = Tensor::new(shape.clone(), data.iter().map(|&x| T::lit(x)).collect())?;
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&[self.precision])?;
        write_str(&mut w, &self.config)?;
        w.write_all(&self.epoch.to_le_bytes())?;
        w.write_all(&(self.rng_streams.len() as u32).to_le_bytes())?;
        for (id, rng) in &self.rng_streams {
            w.write_all(&[*id])?;
            w.write_all(&rng.get_seed())?;
            w.write_all(&rng.get_stream().to_le_bytes())?;
            w.write_all(&rng.get_word_pos().to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, shape, data) in &self.tensors {
            write_str(&mut w, name)?;
            w.write_all(&(shape.len() as u32).to_le_bytes())?;
            for &d in shape {
                w.write_all(&(d as u64).to_le_bytes())?;
            }
            for &x in data {
                match self.precision {
                    4 => w.write_all(&(x as f32).to_le_bytes())?,
                    _ => w.write_all(&x.to_le_bytes())?,
                }
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 4];
        read_exact(&mut r, &mut magic)?;
        if &magic != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
        }
        let version = read_u32(&mut r)?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version} (expected {VERSION})"
            )));
        }
        let precision = read_array::<1, _>(&mut r)?[0];
        if precision != 4 && precision != 8 {
            return Err(Error::Checkpoint(format!("unknown precision byte {precision}")));
        }
        let config = read_str(&mut r)?;
        let epoch = u64::from_le_bytes(read_array(&mut r)?);
        let n_streams = read_u32(&mut r)?;
        let mut rng_streams = Vec::with_capacity(n_streams as usize);
        for _ in 0..n_streams {
            let id = read_array::<1, _>(&mut r)?[0];
            let seed: [u8; 32] = read_array(&mut r)?;
            let stream = u64::from_le_bytes(read_array(&mut r)?);
            let pos = u128::from_le_bytes(read_array(&mut r)?);
            let mut rng = ChaCha8Rng::from_seed(seed);
            rng.set_stream(stream);
            rng.set_word_pos(pos);
            rng_streams.push((id, rng));
        }
        let n_tensors = read_u32(&mut r)?;
        let mut tensors = Vec::with_capacity(n_tensors as usize);
        for _ in 0..n_tensors {
            let name = read_str(&mut r)?;
            let rank = read_u32(&mut r)?;
            let shape = (0..rank)
                .map(|_| Ok(u64::from_le_bytes(read_array(&mut r)?) as usize))
                .collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = (0..numel)
                .map(|_| {
                    Ok(match precision {
                        4 => f32::from_le_bytes(read_array(&mut r)?) as f64,
                        _ => f64::from_le_bytes(read_array(&mut r)?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            tensors.push((name, shape, data));
        }
        Ok(Checkpoint {
            precision,
            config,
            epoch,
            rng_streams,
            tensors,
        })
    }
}

fn write_str<W: Write>(w: &mut W, s: &str) -> Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Checkpoint("truncated checkpoint".into()),
        _ => Error::Io(e),
    })
}

fn read_array<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N]> {
    let mut buf = [0u8; N];
    read_exact(r, &mut buf)?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    Ok(u32::from_le_bytes(read_array(r)?))
}

fn read_str<R: Read>(r: &mut R) -> Result<String> {
    let len = read_u32(r)? as usize;
    if len > 1 << 28 {
        return Err(Error::Checkpoint(format!("implausible string length {len}")));
    }
    let mut buf = vec![0u8; len];
    read_exact(r, &mut buf)?;
    String::from_utf8(buf).map_err(|_| Error::Checkpoint("string is not UTF-8".into()))
}
