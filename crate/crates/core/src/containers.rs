//! Binary containers for tensors and model checkpoints.
//!
//! Tensor files ("UDAF"): magic, version byte, dim count, u64 dims,
//! row-major little-endian f64 payload. Checkpoint files ("UDAC"): magic,
//! version byte, an architecture descriptor string, the training config as
//! JSON, and a named tensor table (name, trainable flag, dims, f32
//! payload) in sorted name order, so identical inputs serialize to
//! identical bytes.

use crate::error::{Error, Result};
use crate::params::{ParamSet, TrainConfig};
use crate::tensor::Tensor;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const TENSOR_MAGIC: &[u8; 4] = b"UDAF";
const CHECKPOINT_MAGIC: &[u8; 4] = b"UDAC";
const VERSION: u8 = 1;

/// A parameter set together with what produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub arch: String,
    pub train_config: TrainConfig,
    pub params: ParamSet,
}

fn bad(what: &'static str, reason: impl ToString) -> Error {
    Error::Format {
        what,
        reason: reason.to_string(),
    }
}

fn write_u32<W: Write>(w: &mut W, v: u32) -> Result<()> {
    w.write_all(&v.to_le_bytes())?;
    Ok(())
}

fn write_string<W: Write>(w: &mut W, s: &str) -> Result<()> {
    write_u32(w, s.len() as u32)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

fn write_dims<W: Write>(w: &mut W, shape: &[usize]) -> Result<()> {
    w.write_all(&[shape.len() as u8])?;
    for &d in shape {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    Ok(())
}

fn read_exact<R: Read>(r: &mut R, n: usize, what: &'static str) -> Result<Vec<u8>> {
    let mut buf = vec![0u8; n];
    r.read_exact(&mut buf).map_err(|e| bad(what, e))?;
    Ok(buf)
}

fn read_u32<R: Read>(r: &mut R, what: &'static str) -> Result<u32> {
    let b = read_exact(r, 4, what)?;
    Ok(u32::from_le_bytes(b.try_into().expect("four bytes")))
}

fn read_string<R: Read>(r: &mut R, what: &'static str) -> Result<String> {
    let len = read_u32(r, what)? as usize;
    if len > 1 << 24 {
        return Err(bad(what, format!("string length {len} is implausible")));
    }
    String::from_utf8(read_exact(r, len, what)?).map_err(|e| bad(what, e))
}

fn read_dims<R: Read>(r: &mut R, what: &'static str) -> Result<Vec<usize>> {
    let ndim = read_exact(r, 1, what)?[0] as usize;
    if ndim > 8 {
        return Err(bad(what, format!("{ndim} dims is implausible")));
    }
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let b = read_exact(r, 8, what)?;
        let d = u64::from_le_bytes(b.try_into().expect("eight bytes"));
        if d > 1 << 32 {
            return Err(bad(what, format!("dim {d} is implausible")));
        }
        shape.push(d as usize);
    }
    Ok(shape)
}

fn check_header<R: Read>(r: &mut R, magic: &[u8; 4], what: &'static str) -> Result<()> {
    let got = read_exact(r, 4, what)?;
    if got != magic {
        return Err(bad(what, format!("bad magic {got:?}")));
    }
    let version = read_exact(r, 1, what)?[0];
    if version != VERSION {
        return Err(bad(what, format!("unsupported version {version}")));
    }
    Ok(())
}

fn expect_eof<R: Read>(r: &mut R, what: &'static str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe)? {
        0 => Ok(()),
        _ => Err(bad(what, "trailing bytes after payload")),
    }
}

/// Serialize a tensor (dims + f64 payload).
pub fn write_tensor<W: Write>(w: &mut W, t: &Tensor) -> Result<()> {
    w.write_all(TENSOR_MAGIC)?;
    w.write_all(&[VERSION])?;
    write_dims(w, &t.shape)?;
    for &v in &t.data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_tensor<R: Read>(r: &mut R) -> Result<Tensor> {
    const WHAT: &str = "tensor container";
    check_header(r, TENSOR_MAGIC, WHAT)?;
    let shape = read_dims(r, WHAT)?;
    let len: usize = shape.iter().product();
    let bytes = read_exact(r, len * 8, WHAT)?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("eight bytes")))
        .collect();
    expect_eof(r, WHAT)?;
    Ok(Tensor::new(shape, data))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_tensor(&mut w, t)?;
    w.flush()?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor> {
    read_tensor(&mut BufReader::new(File::open(path)?))
}

/// Serialize a checkpoint; tensors are stored as f32.
pub fn write_checkpoint<W: Write>(w: &mut W, cp: &Checkpoint) -> Result<()> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&[VERSION])?;
    write_string(w, &cp.arch)?;
    let cfg = serde_json::to_string(&cp.train_config).map_err(|e| Error::Codec(e.to_string()))?;
    write_string(w, &cfg)?;
    write_u32(w, cp.params.len() as u32)?;
    for (name, param) in cp.params.iter() {
        write_string(w, name)?;
        w.write_all(&[param.trainable as u8])?;
        write_dims(w, &param.tensor.shape)?;
        for &v in &param.tensor.data {
            w.write_all(&(v as f32).to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(r: &mut R) -> Result<Checkpoint> {
    const WHAT: &str = "checkpoint container";
    check_header(r, CHECKPOINT_MAGIC, WHAT)?;
    let arch = read_string(r, WHAT)?;
    let cfg_json = read_string(r, WHAT)?;
    let train_config: TrainConfig =
        serde_json::from_str(&cfg_json).map_err(|e| Error::Codec(e.to_string()))?;
    let count = read_u32(r, WHAT)? as usize;
    let mut params = ParamSet::new();
    for _ in 0..count {
        let name = read_string(r, WHAT)?;
        let trainable = match read_exact(r, 1, WHAT)?[0] {
            0 => false,
            1 => true,
            v => return Err(bad(WHAT, format!("bad trainable flag {v}"))),
        };
        let shape = read_dims(r, WHAT)?;
        let len: usize = shape.iter().product();
        let bytes = read_exact(r, len * 4, WHAT)?;
        let data: Vec<f64> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("four bytes")) as f64)
            .collect();
        params.insert(&name, Tensor::new(shape, data), trainable);
    }
    expect_eof(r, WHAT)?;
    Ok(Checkpoint {
        arch,
        train_config,
        params,
    })
}

pub fn save_checkpoint(path: &Path, cp: &Checkpoint) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_checkpoint(&mut w, cp)?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    read_checkpoint(&mut BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn to_bytes(cp: &Checkpoint) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, cp).unwrap();
        buf
    }

    #[test]
    fn tensor_round_trips_exactly() {
        let mut rng = StdRng::seed_from_u64(1);
        let t = Tensor::new(vec![3, 4, 2], (0..24).map(|_| rng.gen::<f64>() * 1e3 - 500.0).collect());
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut buf.as_slice()).unwrap();
        assert_eq!(t, back);
    }

    #[test]
    fn corrupt_tensor_containers_are_rejected() {
        let t = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();

        let mut wrong_magic = buf.clone();
        wrong_magic[0] = b'X';
        assert!(read_tensor(&mut wrong_magic.as_slice()).is_err());

        let mut wrong_version = buf.clone();
        wrong_version[4] = 9;
        assert!(read_tensor(&mut wrong_version.as_slice()).is_err());

        let truncated = &buf[..buf.len() - 3];
        assert!(read_tensor(&mut &truncated[..]).is_err());

        let mut trailing = buf.clone();
        trailing.push(0);
        assert!(read_tensor(&mut trailing.as_slice()).is_err());
    }

    #[test]
    fn checkpoint_round_trips_with_f32_precision() {
        let mut params = crate::lcim::init_params(3, 3);
        crate::lcim::freeze_backbone(&mut params);
        let cp = Checkpoint {
            arch: crate::lcim::ARCH_DESCRIPTOR.to_string(),
            train_config: TrainConfig::default(),
            params,
        };
        let buf = to_bytes(&cp);
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back.arch, cp.arch);
        assert_eq!(back.train_config, cp.train_config);
        assert_eq!(back.params.len(), cp.params.len());
        for ((na, pa), (nb, pb)) in cp.params.iter().zip(back.params.iter()) {
            assert_eq!(na, nb);
            assert_eq!(pa.trainable, pb.trainable, "{na}");
            assert_eq!(pa.tensor.shape, pb.tensor.shape);
            for (x, y) in pa.tensor.data.iter().zip(pb.tensor.data.iter()) {
                assert!((x - y).abs() <= x.abs().max(1.0) * 1e-6, "{na}: {x} vs {y}");
            }
        }
    }

    #[test]
    fn checkpoint_serialization_is_byte_stable() {
        let params = crate::pose::model::init_pose_params(
            4,
            &crate::pose::model::PoseConfig::default(),
        );
        let cp = Checkpoint {
            arch: crate::pose::model::arch_descriptor(&crate::pose::model::PoseConfig::default()),
            train_config: TrainConfig::default(),
            params,
        };
        let a = to_bytes(&cp);
        // load-then-save reproduces the exact bytes (f32 is idempotent)
        let reloaded = read_checkpoint(&mut a.as_slice()).unwrap();
        let b = to_bytes(&reloaded);
        assert_eq!(a, b);
    }

    #[test]
    fn pose_arch_descriptor_round_trips_config() {
        let cfg = crate::pose::model::PoseConfig {
            dim: 32,
            num_groups: 4,
            num_layers: 2,
            num_samples: 3,
            num_heads: 4,
            fusion: crate::pose::model::FusionMode::Residual,
        };
        let desc = crate::pose::model::arch_descriptor(&cfg);
        let back = crate::pose::model::config_from_descriptor(&desc).unwrap();
        assert_eq!(cfg, back);
        assert!(crate::pose::model::config_from_descriptor(
            crate::lcim::ARCH_DESCRIPTOR
        )
        .is_err());
    }

    #[test]
    fn files_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let t = Tensor::new(vec![2, 3], vec![0.5, -1.0, 2.25, 0.0, 9.5, -3.125]);
        let tpath = dir.path().join("plane.udaf");
        save_tensor(&tpath, &t).unwrap();
        assert_eq!(load_tensor(&tpath).unwrap(), t);

        let cp = Checkpoint {
            arch: "test-arch".into(),
            train_config: TrainConfig::default(),
            params: {
                let mut p = ParamSet::new();
                p.insert("w", Tensor::new(vec![2], vec![0.25, 0.5]), true);
                p.insert("frozen", Tensor::new(vec![1], vec![1.5]), false);
                p
            },
        };
        let cpath = dir.path().join("model.udac");
        save_checkpoint(&cpath, &cp).unwrap();
        let back = load_checkpoint(&cpath).unwrap();
        assert_eq!(back, cp, "exactly representable values round-trip");
    }
}
