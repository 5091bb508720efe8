//! `ACPK1` named-tensor container.
//!
//! Layout: magic, u32 tensor count, then per tensor a u16-prefixed UTF-8
//! name, u8 rank, `rank` u64 dims and the f64 values, all little-endian.

use std::fs;
use std::path::Path;

use crate::encoder::{EncoderConfig, Variant};
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 5] = b"ACPK1";

const META_ENCODER: &str = "meta.encoder";
const META_BEST: &str = "meta.best";

pub fn encode_tensors(store: &ParamStore<f64>) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    let count = u32::try_from(store.len()).map_err(|_| Error::arg("too many tensors for a checkpoint"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in store.iter() {
        let len = u16::try_from(name.len()).map_err(|_| Error::arg(format!("tensor name too long: {name:?}")))?;
        let rank = u8::try_from(t.rank()).map_err(|_| Error::arg(format!("tensor {name:?} has rank > 255")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(rank);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let s = self
            .pos
            .checked_add(n)
            .and_then(|end| self.b.get(self.pos..end))
            .ok_or_else(|| Error::format(field, format!("truncated at byte {}", self.pos)))?;
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_tensors(b: &[u8]) -> Result<ParamStore<f64>> {
    let mut r = Reader { b, pos: 0 };
    if r.take(5, "magic")? != MAGIC {
        return Err(Error::format("magic", "not an ACPK1 checkpoint"));
    }
    let count = u32::from_le_bytes(r.take(4, "tensor count")?.try_into().expect("4 bytes"));
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::format("name", "tensor name is not UTF-8"))?
            .to_string();
        let rank = r.take(1, "rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64("dims")?).map_err(|_| Error::format("dims", "dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8))
            .ok_or_else(|| Error::format("dims", format!("tensor {name:?} is impossibly large")))?;
        let values = r
            .take(n, "values")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(shape, values).map_err(|e| Error::format("dims", format!("tensor {name:?}: {e}")))?;
        if store.contains(&name) {
            return Err(Error::format("name", format!("duplicate tensor {name:?}")));
        }
        store.insert(name, t);
    }
    if r.pos != b.len() {
        return Err(Error::format("values", format!("{} trailing bytes", b.len() - r.pos)));
    }
    Ok(store)
}

pub fn write_tensors(path: impl AsRef<Path>, store: &ParamStore<f64>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_tensors(store)?).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: impl AsRef<Path>) -> Result<ParamStore<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensors(&bytes).map_err(|e| match e {
        Error::Format { field, detail } => Error::format(field, format!("{detail} ({})", path.display())),
        other => other,
    })
}

/// Model parameters plus the encoder layout and early-stopping record.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore<f64>,
    pub encoder: EncoderConfig,
    pub best_epoch: usize,
    pub val_loss: f64,
}

impl Checkpoint {
    pub fn to_store(&self) -> ParamStore<f64> {
        let e = &self.encoder;
        let variant = match e.variant {
            Variant::CnnMini => 0.0,
            Variant::CrnnMini => 1.0,
        };
        let mut meta = vec![
            variant,
            e.time_subsample as f64,
            e.embed_dim as f64,
            e.recurrent_hidden as f64,
            e.n_mels as f64,
        ];
        meta.extend(e.channels.iter().map(|&c| c as f64));
        let mut s = self.params.clone();
        s.insert(META_ENCODER, Tensor::vector(meta));
        s.insert(META_BEST, Tensor::vector(vec![self.best_epoch as f64, self.val_loss]));
        s
    }

    pub fn from_store(mut s: ParamStore<f64>) -> Result<Self> {
        let bad = |what: &str| Error::format("meta", format!("checkpoint {what}"));
        let meta = s.remove(META_ENCODER).ok_or_else(|| bad("lacks encoder layout"))?;
        let best = s.remove(META_BEST).ok_or_else(|| bad("lacks early-stopping record"))?;
        let m = meta.data();
        let as_usize = |v: f64| -> Result<usize> {
            if v >= 0.0 && v.fract() == 0.0 && v < 1e9 {
                Ok(v as usize)
            } else {
                Err(bad("has a malformed encoder layout"))
            }
        };
        if m.len() < 6 || best.len() != 2 {
            return Err(bad("has a malformed header"));
        }
        let variant = match as_usize(m[0])? {
            0 => Variant::CnnMini,
            1 => Variant::CrnnMini,
            _ => return Err(bad("names an unknown encoder variant")),
        };
        let encoder = EncoderConfig {
            variant,
            time_subsample: as_usize(m[1])?,
            embed_dim: as_usize(m[2])?,
            recurrent_hidden: as_usize(m[3])?,
            n_mels: as_usize(m[4])?,
            channels: m[5..].iter().map(|&v| as_usize(v)).collect::<Result<_>>()?,
        };
        encoder.validate().map_err(|_| bad("has an invalid encoder layout"))?;
        Ok(Checkpoint {
            params: s,
            encoder,
            best_epoch: as_usize(best.data()[0])?,
            val_loss: best.data()[1],
        })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        write_tensors(path, &self.to_store())
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_store(read_tensors(path)?).map_err(|e| match e {
            Error::Format { field, detail } => Error::format(field, format!("{detail} ({})", path.display())),
            other => other,
        })
    }
}
