//! Versioned binary checkpoints for models and critics.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "NMTCKPT\0" | version u32 | kind u8
//! field count u32 | (name_len u16, name, value u64)*   shape header
//! vocabulary digest [u8; 32]
//! tensor count u32 | (name_len u16, name, rows u64, cols u64, f64 bits*)*
//! sha256 of everything above
//! ```
//!
//! Values are stored as raw IEEE bits, so a round trip is bit-exact.

use alloc::string::String;
use alloc::vec::Vec;

use sha2::{Digest, Sha256};

use crate::autodiff::ParamStore;
use crate::error::{Error, Result};
use crate::model::{Critic, CriticDims, Model, ModelDims};
use crate::tensor::Matrix;

const MAGIC: &[u8; 8] = b"NMTCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Kind {
    Model = 0,
    Critic = 1,
}

fn put_name(out: &mut Vec<u8>, name: &str) {
    out.extend_from_slice(&(name.len() as u16).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
}

fn encode(kind: Kind, fields: &[(&str, u64)], vocab_digest: &[u8; 32], params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(64 + params.scalar_count() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(kind as u8);
    out.extend_from_slice(&(fields.len() as u32).to_le_bytes());
    for (name, v) in fields {
        put_name(&mut out, name);
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(vocab_digest);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, m) in params.iter() {
        put_name(&mut out, name);
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
        out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
        for v in m.data() {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    let sum = Sha256::digest(&out);
    out.extend_from_slice(&sum);
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

fn bad(msg: &str) -> Error {
    Error::Checkpoint(msg.into())
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| bad("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn name(&mut self) -> Result<String> {
        let n = self.u16()? as usize;
        core::str::from_utf8(self.take(n)?).map(String::from).map_err(|_| bad("name is not UTF-8"))
    }
}

/// A decoded checkpoint before it is bound to a model type.
#[derive(Clone, Debug, PartialEq)]
pub struct Decoded {
    pub kind: Kind,
    pub fields: Vec<(String, u64)>,
    pub vocab_digest: [u8; 32],
    pub params: ParamStore,
}

impl Decoded {
    pub fn field(&self, name: &str) -> Result<u64> {
        self.fields
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::Checkpoint(alloc::format!("missing header field {name:?}")))
    }
}

/// Parses and integrity-checks a checkpoint.
pub fn decode(bytes: &[u8]) -> Result<Decoded> {
    if bytes.len() < MAGIC.len() + 32 {
        return Err(bad("truncated"));
    }
    let (body, sum) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != sum {
        return Err(bad("checksum mismatch"));
    }
    let mut r = Reader { buf: body, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(bad("not a checkpoint"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(alloc::format!("unsupported version {version}")));
    }
    let kind = match r.take(1)?[0] {
        0 => Kind::Model,
        1 => Kind::Critic,
        k => return Err(Error::Checkpoint(alloc::format!("unknown kind {k}"))),
    };
    let nf = r.u32()? as usize;
    let mut fields = Vec::with_capacity(nf.min(64));
    for _ in 0..nf {
        let name = r.name()?;
        fields.push((name, r.u64()?));
    }
    let vocab_digest: [u8; 32] = r.take(32)?.try_into().unwrap();
    let nt = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..nt {
        let name = r.name()?;
        let rows = r.u64()? as usize;
        let cols = r.u64()? as usize;
        let n = rows.checked_mul(cols).ok_or_else(|| bad("tensor too large"))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| bad("tensor too large"))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_bits(u64::from_le_bytes(c.try_into().unwrap()))).collect();
        params.push(name, Matrix::from_vec(rows, cols, data));
    }
    if r.pos != body.len() {
        return Err(bad("trailing bytes"));
    }
    Ok(Decoded {
        kind,
        fields,
        vocab_digest,
        params,
    })
}

pub fn encode_model(model: &Model, vocab_digest: &[u8; 32]) -> Vec<u8> {
    encode(Kind::Model, &model.dims().fields(), vocab_digest, model.params())
}

pub fn encode_critic(critic: &Critic, vocab_digest: &[u8; 32]) -> Vec<u8> {
    encode(Kind::Critic, &critic.dims().fields(), vocab_digest, critic.params())
}

fn check_digest(d: &Decoded, expected: Option<&[u8; 32]>) -> Result<()> {
    match expected {
        Some(e) if e != &d.vocab_digest => Err(bad("vocabulary digest mismatch")),
        _ => Ok(()),
    }
}

/// Restores a model. With `vocab_digest` set, a checkpoint written against a
/// different vocabulary is rejected.
pub fn decode_model(bytes: &[u8], vocab_digest: Option<&[u8; 32]>) -> Result<Model> {
    let d = decode(bytes)?;
    if d.kind != Kind::Model {
        return Err(bad("expected a model checkpoint"));
    }
    check_digest(&d, vocab_digest)?;
    let get = |n| d.field(n).map(|v| v as usize);
    let dims = ModelDims {
        vocab: get("vocab")?,
        d_model: get("d_model")?,
        heads: get("heads")?,
        enc_layers: get("enc_layers")?,
        dec_layers: get("dec_layers")?,
        ffn: get("ffn")?,
    };
    let mut m = Model::new(dims, 0)?;
    m.set_params(d.params)?;
    Ok(m)
}

pub fn decode_critic(bytes: &[u8], vocab_digest: Option<&[u8; 32]>) -> Result<Critic> {
    let d = decode(bytes)?;
    if d.kind != Kind::Critic {
        return Err(bad("expected a critic checkpoint"));
    }
    check_digest(&d, vocab_digest)?;
    let get = |n| d.field(n).map(|v| v as usize);
    let dims = CriticDims {
        input: get("input")?,
        fc1: get("fc1")?,
        fc2: get("fc2")?,
        gru: get("gru")?,
    };
    let mut c = Critic::new(dims, 0)?;
    c.set_params(d.params)?;
    Ok(c)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims {
            vocab: 11,
            d_model: 4,
            heads: 2,
            enc_layers: 1,
            dec_layers: 1,
            ffn: 6,
        }
    }

    #[test]
    fn model_round_trip_is_bit_exact() {
        let m = Model::new(dims(), 9).unwrap();
        let digest = [7u8; 32];
        let bytes = encode_model(&m, &digest);
        let back = decode_model(&bytes, Some(&digest)).unwrap();
        assert_eq!(back.dims(), m.dims());
        for ((na, a), (nb, b)) in m.params().iter().zip(back.params().iter()) {
            assert_eq!(na, nb);
            let bits = |x: &Matrix| x.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
        assert_eq!(encode_model(&back, &digest), bytes);
    }

    #[test]
    fn critic_round_trip() {
        let c = Critic::new(CriticDims { input: 4, fc1: 5, fc2: 3, gru: 2 }, 4).unwrap();
        let bytes = encode_critic(&c, &[0; 32]);
        let back = decode_critic(&bytes, None).unwrap();
        assert_eq!(back.params(), c.params());
        assert!(decode_model(&bytes, None).is_err());
    }

    #[test]
    fn corruption_and_mismatch_are_rejected() {
        let m = Model::new(dims(), 9).unwrap();
        let mut bytes = encode_model(&m, &[1; 32]);
        assert!(matches!(decode_model(&bytes, Some(&[2; 32])), Err(Error::Checkpoint(_))));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(matches!(decode_model(&bytes, None), Err(Error::Checkpoint(_))));
        assert!(decode(&bytes[..10]).is_err());
    }
}
