//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "AVSS" | u32 version (= 1) | u32 entry count
//! per entry:   u32 name length | UTF-8 name | u8 kind (0 trainable, 1 buffer)
//!              | u32 rank | u32 dims[rank] | f32 data[Π dims]
//! u8 optimizer present
//! if present:  f64 lr, β1, β2, ε | u64 step
//!              | per entry: u64 length | f64 m[length] | f64 v[length]
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};

use super::params::ParamEntry;
use super::{Adam, AdamConfig, NumericsError, ParamKind, ParamStore, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"AVSS";
pub const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> NumericsError + '_ {
    move |e| NumericsError::Checkpoint(format!("{}: {e}", path.display()))
}

pub fn save<T: Scalar>(path: &Path, store: &ParamStore<T>, optimizer: Option<&Adam>) -> Result<(), NumericsError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, store, optimizer).map_err(io_err(path))?;
    w.flush().map_err(io_err(path))
}

pub fn load<T: Scalar>(path: &Path) -> Result<(ParamStore<T>, Option<Adam>), NumericsError> {
    let file = File::open(path).map_err(io_err(path))?;
    read_from(&mut BufReader::new(file)).map_err(|e| match e {
        NumericsError::Checkpoint(msg) => NumericsError::Checkpoint(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn write_to<T: Scalar, W: Write>(
    w: &mut W,
    store: &ParamStore<T>,
    optimizer: Option<&Adam>,
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_u32::<LE>(VERSION)?;
    w.write_u32::<LE>(store.len() as u32)?;
    for e in store.entries() {
        w.write_u32::<LE>(e.name.len() as u32)?;
        w.write_all(e.name.as_bytes())?;
        w.write_u8(match e.kind {
            ParamKind::Trainable => 0,
            ParamKind::Buffer => 1,
        })?;
        w.write_u32::<LE>(e.tensor.shape().len() as u32)?;
        for &d in e.tensor.shape() {
            w.write_u32::<LE>(d as u32)?;
        }
        for v in e.tensor.data() {
            w.write_f32::<LE>(v.to_f64_lossy() as f32)?;
        }
    }
    match optimizer {
        None => w.write_u8(0)?,
        Some(opt) => {
            w.write_u8(1)?;
            let c = opt.config;
            for v in [c.lr, c.beta1, c.beta2, c.eps] {
                w.write_f64::<LE>(v)?;
            }
            w.write_u64::<LE>(opt.step)?;
            for (m, v) in opt.m.iter().zip(&opt.v) {
                w.write_u64::<LE>(m.len() as u64)?;
                for x in m.iter().chain(v) {
                    w.write_f64::<LE>(*x)?;
                }
            }
        }
    }
    Ok(())
}

pub fn read_from<T: Scalar, R: Read>(r: &mut R) -> Result<(ParamStore<T>, Option<Adam>), NumericsError> {
    let bad = |m: &str| NumericsError::Checkpoint(m.to_string());
    let io = |e: std::io::Error| NumericsError::Checkpoint(format!("truncated or unreadable: {e}"));
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io)?;
    if &magic != MAGIC {
        return Err(bad("bad magic bytes (expected AVSS)"));
    }
    let version = r.read_u32::<LE>().map_err(io)?;
    if version != VERSION {
        return Err(NumericsError::Checkpoint(format!("unsupported version {version}")));
    }
    let count = r.read_u32::<LE>().map_err(io)? as usize;
    let mut store = ParamStore::<T>::new(0);
    let mut lens = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.read_u32::<LE>().map_err(io)? as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io)?;
        let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
        let kind = match r.read_u8().map_err(io)? {
            0 => ParamKind::Trainable,
            1 => ParamKind::Buffer,
            k => return Err(NumericsError::Checkpoint(format!("bad entry kind {k}"))),
        };
        let rank = r.read_u32::<LE>().map_err(io)? as usize;
        let shape = (0..rank)
            .map(|_| r.read_u32::<LE>().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()
            .map_err(io)?;
        let numel: usize = shape.iter().product();
        let data = (0..numel)
            .map(|_| r.read_f32::<LE>().map(|v| T::from_f64_lossy(v as f64)))
            .collect::<Result<Vec<_>, _>>()
            .map_err(io)?;
        lens.push(numel);
        store.push_entry(ParamEntry {
            name,
            tensor: Tensor::from_vec(&shape, data)?,
            kind,
        })?;
    }
    let optimizer = match r.read_u8().map_err(io)? {
        0 => None,
        1 => {
            let mut f = [0.0; 4];
            for v in &mut f {
                *v = r.read_f64::<LE>().map_err(io)?;
            }
            let step = r.read_u64::<LE>().map_err(io)?;
            let mut m = Vec::with_capacity(count);
            let mut v = Vec::with_capacity(count);
            for &expected in &lens {
                let len = r.read_u64::<LE>().map_err(io)? as usize;
                if len != expected {
                    return Err(bad("optimizer state does not match parameters"));
                }
                let read = |r: &mut R| {
                    (0..len)
                        .map(|_| r.read_f64::<LE>())
                        .collect::<Result<Vec<_>, _>>()
                };
                m.push(read(r).map_err(io)?);
                v.push(read(r).map_err(io)?);
            }
            Some(Adam {
                config: AdamConfig {
                    lr: f[0],
                    beta1: f[1],
                    beta2: f[2],
                    eps: f[3],
                },
                step,
                m,
                v,
            })
        }
        k => return Err(NumericsError::Checkpoint(format!("bad optimizer flag {k}"))),
    };
    Ok((store, optimizer))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Init;

    fn sample_store() -> ParamStore<f32> {
        let mut s = ParamStore::new(3);
        s.add("enc.w", &[2, 3, 3, 3], Init::KaimingUniform { fan_in: 27 }).unwrap();
        s.add("enc.b", &[2], Init::Zeros).unwrap();
        s.add_buffer("enc.bn.mean", &[2], 0.25).unwrap();
        s
    }

    #[test]
    fn round_trip_with_optimizer() {
        let store = sample_store();
        let mut adam = Adam::new(AdamConfig::with_lr(1e-3), &store);
        adam.step = 12;
        adam.m[0][4] = 0.125;
        adam.v[1][1] = 3.5;
        let mut bytes = Vec::new();
        write_to(&mut bytes, &store, Some(&adam)).unwrap();
        assert_eq!(&bytes[..4], b"AVSS");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        let (back, opt) = read_from::<f32, _>(&mut bytes.as_slice()).unwrap();
        for (a, b) in store.entries().iter().zip(back.entries()) {
            assert_eq!(a.name, b.name);
            assert_eq!(a.kind, b.kind);
            assert_eq!(a.tensor, b.tensor);
        }
        let opt = opt.unwrap();
        assert_eq!(opt.step, 12);
        assert_eq!(opt.m, adam.m);
        assert_eq!(opt.v, adam.v);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let mut bytes = Vec::new();
        write_to(&mut bytes, &sample_store(), None).unwrap();
        let mut corrupt = bytes.clone();
        corrupt[0] = b'X';
        assert!(read_from::<f32, _>(&mut corrupt.as_slice())
            .unwrap_err()
            .to_string()
            .contains("magic"));
        let truncated = &bytes[..bytes.len() - 5];
        assert!(read_from::<f32, _>(&mut &truncated[..]).is_err());
    }
}
