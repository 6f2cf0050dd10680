//! Binary checkpoint container: named tensors, optimizer moments and a JSON
//! metadata blob, guarded by a CRC32 trailer.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "MLALIGN\0" | version u32 | dtype u8 | meta_len u64 | meta (UTF-8)
//! n_params u32 | { name_len u32 | name | rank u8 | dims u64* | trainable u8 | decay u8 | values }*
//! has_optim u8 | [ step u64 | lr beta1 beta2 eps weight_decay (f64) | { first | second }* ]
//! crc32 u32 over everything above
//! ```

use std::path::Path;

use crate::nn::{AdamWConfig, NnError, OptimState, ParamStore, Tensor};
use crate::scalar::{DType, Scalar};

pub const MAGIC: &[u8; 8] = b"MLALIGN\0";
pub const CONTAINER_VERSION: u32 = 1;

/// Decoded checkpoint contents.
#[derive(Clone, Debug, PartialEq)]
pub struct Container<T> {
    pub meta: String,
    pub params: ParamStore<T>,
    pub optim: Option<OptimState<T>>,
}

pub fn encode<T: Scalar>(
    meta: &str,
    params: &ParamStore<T>,
    optim: Option<&OptimState<T>>,
) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CONTAINER_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (_, p) in params.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(p.trainable as u8);
        out.push(p.decay as u8);
        for &x in p.value.data() {
            x.write_le(&mut out);
        }
    }
    match optim {
        None => out.push(0),
        Some(st) => {
            out.push(1);
            out.extend_from_slice(&st.step.to_le_bytes());
            let c = st.config;
            for x in [c.lr, c.beta1, c.beta2, c.eps, c.weight_decay] {
                out.extend_from_slice(&x.to_le_bytes());
            }
            for (m, v) in st.first.iter().zip(&st.second) {
                for &x in m.data().iter().chain(v.data()) {
                    x.write_le(&mut out);
                }
            }
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], NnError> {
        if self.pos + n > self.buf.len() {
            return Err(NnError::Corrupt("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, NnError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, NnError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64, NnError> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn f64(&mut self) -> Result<f64, NnError> {
        Ok(f64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    fn values<S: Scalar>(&mut self, n: usize) -> Result<Vec<S>, NnError> {
        let w = S::DTYPE.byte_width();
        let raw = self.take(n * w)?;
        Ok(raw.chunks_exact(w).map(S::read_le).collect())
    }
}

fn decode_as<S: Scalar>(body: &[u8]) -> Result<Container<S>, NnError> {
    let mut r = Reader { buf: body, pos: 0 };
    // header already validated by the caller
    r.take(MAGIC.len() + 4 + 1)?;
    let meta_len = r.u64()? as usize;
    let meta = String::from_utf8(r.take(meta_len)?.to_vec())
        .map_err(|_| NnError::Corrupt("metadata is not UTF-8".into()))?;
    let n = r.u32()? as usize;
    let mut params = ParamStore::new();
    for _ in 0..n {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| NnError::Corrupt("parameter name is not UTF-8".into()))?;
        let rank = r.u8()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let trainable = r.u8()? != 0;
        let decay = r.u8()? != 0;
        let count = shape.iter().product();
        let value = Tensor::new(shape, r.values::<S>(count)?)?;
        let id = params.add(&name, value, decay)?;
        params.set_trainable(id, trainable);
    }
    let optim = match r.u8()? {
        0 => None,
        _ => {
            let step = r.u64()?;
            let config = AdamWConfig {
                lr: r.f64()?,
                beta1: r.f64()?,
                beta2: r.f64()?,
                eps: r.f64()?,
                weight_decay: r.f64()?,
            };
            let mut first = Vec::with_capacity(n);
            let mut second = Vec::with_capacity(n);
            for (_, p) in params.iter() {
                let shape = p.value.shape().to_vec();
                let len = p.value.len();
                first.push(Tensor::new(shape.clone(), r.values::<S>(len)?)?);
                second.push(Tensor::new(shape, r.values::<S>(len)?)?);
            }
            Some(OptimState {
                config,
                step,
                first,
                second,
            })
        }
    };
    if r.pos != body.len() {
        return Err(NnError::Corrupt(
            "trailing bytes after optimizer state".into(),
        ));
    }
    Ok(Container {
        meta,
        params,
        optim,
    })
}

fn cast_optim<S: Scalar, T: Scalar>(st: OptimState<S>) -> OptimState<T> {
    OptimState {
        config: st.config,
        step: st.step,
        first: st.first.iter().map(Tensor::cast).collect(),
        second: st.second.iter().map(Tensor::cast).collect(),
    }
}

/// Decodes a container, casting stored values to `T` when the stored dtype
/// differs (bit-exact only when it matches).
pub fn decode<T: Scalar>(bytes: &[u8]) -> Result<Container<T>, NnError> {
    if bytes.len() < MAGIC.len() + 4 + 1 + 4 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(NnError::Corrupt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != CONTAINER_VERSION {
        return Err(NnError::VersionMismatch {
            found: version,
            expected: CONTAINER_VERSION,
        });
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(NnError::Corrupt("checksum mismatch".into()));
    }
    let dtype = DType::from_code(body[12])
        .ok_or_else(|| NnError::Corrupt(format!("unknown dtype code {}", body[12])))?;
    if dtype == T::DTYPE {
        return decode_as::<T>(body);
    }
    Ok(match dtype {
        DType::F32 => {
            let c = decode_as::<f32>(body)?;
            Container {
                meta: c.meta,
                params: c.params.cast(),
                optim: c.optim.map(cast_optim),
            }
        }
        DType::F64 => {
            let c = decode_as::<f64>(body)?;
            Container {
                meta: c.meta,
                params: c.params.cast(),
                optim: c.optim.map(cast_optim),
            }
        }
    })
}

pub fn write_container<T: Scalar>(
    path: &Path,
    meta: &str,
    params: &ParamStore<T>,
    optim: Option<&OptimState<T>>,
) -> Result<(), NnError> {
    std::fs::write(path, encode(meta, params, optim))?;
    Ok(())
}

pub fn read_container<T: Scalar>(path: &Path) -> Result<Container<T>, NnError> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (ParamStore<f64>, OptimState<f64>) {
        let mut p = ParamStore::new();
        p.add(
            "a.weight",
            Tensor::from_fn(&[2, 3], |i| (i as f64).sin() / 3.0),
            true,
        )
        .unwrap();
        let b = p
            .add(
                "a.bias",
                Tensor::from_fn(&[3], |i| i as f64 * 1e-300),
                false,
            )
            .unwrap();
        p.set_trainable(b, false);
        let mut st = OptimState::new(&p, AdamWConfig::default());
        st.step = 17;
        st.first[0].data_mut()[4] = 0.123456789;
        st.second[1].data_mut()[2] = 7.0e-9;
        (p, st)
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let (p, st) = sample();
        let bytes = encode("{\"k\":1}", &p, Some(&st));
        let c = decode::<f64>(&bytes).unwrap();
        assert_eq!(c.meta, "{\"k\":1}");
        assert_eq!(c.params, {
            let mut q = p.clone();
            q.zero_grad();
            q
        });
        assert_eq!(c.optim.unwrap(), st);
    }

    #[test]
    fn flipped_byte_fails_checksum() {
        let (p, st) = sample();
        let mut bytes = encode("{}", &p, Some(&st));
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(
            matches!(decode::<f64>(&bytes), Err(NnError::Corrupt(m)) if m.contains("checksum"))
        );
    }

    #[test]
    fn version_is_checked() {
        let (p, _) = sample();
        let mut bytes = encode("{}", &p, None);
        bytes[8] = 99;
        assert!(matches!(
            decode::<f64>(&bytes),
            Err(NnError::VersionMismatch { found: 99, .. })
        ));
    }

    #[test]
    fn f32_container_loads_into_f64() {
        let (p, _) = sample();
        let p32: ParamStore<f32> = p.cast();
        let c = decode::<f64>(&encode("{}", &p32, None)).unwrap();
        assert_eq!(c.params.len(), 2);
        assert!(c.optim.is_none());
    }
}
