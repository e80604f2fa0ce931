//! Flat binary parameter files.
//!
//! Layout: magic "EPFG", u32 version, u32 record count, then per record:
//! u16 name length, name bytes, u8 dtype tag (0 = f32, 1 = f64), u8 rank,
//! one u32 per extent, then the values. All integers and values are
//! little-endian. Adam state uses the same container in a sibling file.

use std::fs;
use std::path::Path;

use super::{Dtype, Element, Parameter, Result, TensorError};

pub const MAGIC: &[u8; 4] = b"EPFG";
pub const VERSION: u32 = 1;

pub struct Record<E: Element> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<E>,
}

fn err(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_records<E: Element>(path: &Path, records: &[Record<E>]) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for r in records {
        let name = r.name.as_bytes();
        if name.len() > u16::MAX as usize {
            return Err(err(format!("parameter name too long: {}", r.name)));
        }
        buf.extend_from_slice(&(name.len() as u16).to_le_bytes());
        buf.extend_from_slice(name);
        buf.push(E::DTYPE.tag());
        if r.shape.len() > u8::MAX as usize {
            return Err(err(format!("rank {} too large", r.shape.len())));
        }
        buf.push(r.shape.len() as u8);
        for &d in &r.shape {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        debug_assert_eq!(r.values.len(), r.shape.iter().product::<usize>());
        for &v in &r.values {
            v.write_le(&mut buf);
        }
    }
    fs::write(path, &buf).map_err(|e| err(format!("write {}: {e}", path.display())))
}

pub fn read_records<E: Element>(path: &Path) -> Result<Vec<Record<E>>> {
    let buf = fs::read(path).map_err(|e| err(format!("read {}: {e}", path.display())))?;
    let mut pos = 0usize;
    let take = |pos: &mut usize, n: usize| -> Result<&[u8]> {
        if *pos + n > buf.len() {
            return Err(err("truncated file"));
        }
        let s = &buf[*pos..*pos + n];
        *pos += n;
        Ok(s)
    };
    if take(&mut pos, 4)? != MAGIC {
        return Err(err("bad magic; not a parameter file"));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != VERSION {
        return Err(err(format!("unsupported version {version}, expected {VERSION}")));
    }
    let count = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    let mut records = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = u16::from_le_bytes(take(&mut pos, 2)?.try_into().unwrap()) as usize;
        let name = String::from_utf8(take(&mut pos, name_len)?.to_vec())
            .map_err(|_| err("parameter name is not valid utf-8"))?;
        let tag = take(&mut pos, 1)?[0];
        let dtype = Dtype::from_tag(tag).ok_or_else(|| err(format!("unknown dtype tag {tag}")))?;
        if dtype != E::DTYPE {
            return Err(err(format!(
                "dtype mismatch for '{name}': file has {dtype:?}, expected {:?}",
                E::DTYPE
            )));
        }
        let rank = take(&mut pos, 1)?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize);
        }
        let numel: usize = shape.iter().product();
        let width = E::DTYPE.byte_width();
        let raw = take(&mut pos, numel * width)?;
        let values: Vec<E> = raw.chunks_exact(width).map(E::read_le).collect();
        records.push(Record { name, shape, values });
    }
    if pos != buf.len() {
        return Err(err("trailing bytes after last record"));
    }
    Ok(records)
}

/// Save parameter values in model order.
pub fn save_parameters<E: Element>(path: &Path, params: &[Parameter<E>]) -> Result<()> {
    let records: Vec<Record<E>> = params
        .iter()
        .map(|p| Record {
            name: p.name().to_string(),
            shape: p.shape().to_vec(),
            values: p.tensor().to_vec(),
        })
        .collect();
    write_records(path, &records)
}

/// Load values into an existing parameter set, matching records by name.
pub fn load_parameters<E: Element>(path: &Path, params: &[Parameter<E>]) -> Result<()> {
    let records = read_records::<E>(path)?;
    let by_name: std::collections::HashMap<&str, &Record<E>> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    for p in params {
        let r = by_name
            .get(p.name())
            .ok_or_else(|| err(format!("parameter '{}' missing from file", p.name())))?;
        if r.shape != p.shape() {
            return Err(err(format!(
                "parameter '{}': file shape {:?} does not match model shape {:?}",
                p.name(),
                r.shape,
                p.shape()
            )));
        }
        p.tensor().set_data(&r.values);
    }
    Ok(())
}

/// Sibling-file suffix for optimizer state.
pub fn adam_state_path(checkpoint: &Path) -> std::path::PathBuf {
    let mut os = checkpoint.as_os_str().to_os_string();
    os.push(".adam");
    os.into()
}

pub fn save_adam_state<E: Element>(path: &Path, params: &[Parameter<E>]) -> Result<()> {
    let mut records = Vec::with_capacity(params.len() * 3);
    for p in params {
        let (m, v, step) = p.adam_state();
        let shape = p.shape().to_vec();
        records.push(Record {
            name: format!("{}.adam_m", p.name()),
            shape: shape.clone(),
            values: m,
        });
        records.push(Record {
            name: format!("{}.adam_v", p.name()),
            shape,
            values: v,
        });
        records.push(Record {
            name: format!("{}.adam_t", p.name()),
            shape: vec![1],
            values: vec![E::from_f64(step as f64)],
        });
    }
    write_records(path, &records)
}

pub fn load_adam_state<E: Element>(path: &Path, params: &[Parameter<E>]) -> Result<()> {
    let records = read_records::<E>(path)?;
    let by_name: std::collections::HashMap<&str, &Record<E>> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    for p in params {
        let get = |suffix: &str| -> Result<&Record<E>> {
            by_name
                .get(format!("{}{suffix}", p.name()).as_str())
                .copied()
                .ok_or_else(|| err(format!("adam state for '{}' missing", p.name())))
        };
        let m = get(".adam_m")?;
        let v = get(".adam_v")?;
        let t = get(".adam_t")?;
        if m.shape != p.shape() || v.shape != p.shape() {
            return Err(err(format!("adam state shape mismatch for '{}'", p.name())));
        }
        p.set_adam_state(&m.values, &v.values, t.values[0].to_f64() as u64);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn params() -> Vec<Parameter<f32>> {
        vec![
            Parameter::new("encoder.stage0.weight", vec![1.0, -2.5, 3.25, 0.125], &[2, 2]),
            Parameter::new("head.bias", vec![0.5], &[1]),
        ]
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let ps = params();
        save_parameters(&path, &ps).unwrap();

        let restored = params();
        restored[0].tensor().set_data(&[0.0; 4]);
        restored[1].tensor().set_data(&[0.0]);
        load_parameters(&path, &restored).unwrap();
        assert_eq!(restored[0].tensor().to_vec(), vec![1.0, -2.5, 3.25, 0.125]);
        assert_eq!(restored[1].tensor().to_vec(), vec![0.5]);
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_parameters(&path, &params()).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let e = read_records::<f32>(&path).unwrap_err().to_string();
        assert!(e.contains("magic"), "{e}");
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_parameters(&path, &params()).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        let e = read_records::<f32>(&path).unwrap_err().to_string();
        assert!(e.contains("truncated"), "{e}");
    }

    #[test]
    fn mismatched_shape_names_parameter() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_parameters(&path, &params()).unwrap();
        let other = vec![
            Parameter::<f32>::new("encoder.stage0.weight", vec![0.0; 6], &[2, 3]),
            Parameter::<f32>::new("head.bias", vec![0.0], &[1]),
        ];
        let e = load_parameters(&path, &other).unwrap_err().to_string();
        assert!(e.contains("encoder.stage0.weight"), "{e}");
    }

    #[test]
    fn dtype_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_parameters(&path, &params()).unwrap();
        let e = read_records::<f64>(&path).unwrap_err().to_string();
        assert!(e.contains("dtype"), "{e}");
    }

    #[test]
    fn adam_state_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt.adam");
        let ps = params();
        ps[0].set_adam_state(&[0.1, 0.2, 0.3, 0.4], &[1.0, 2.0, 3.0, 4.0], 17);
        save_adam_state(&path, &ps).unwrap();
        let restored = params();
        load_adam_state(&path, &restored).unwrap();
        let (m, v, t) = restored[0].adam_state();
        assert_eq!(m, vec![0.1, 0.2, 0.3, 0.4]);
        assert_eq!(v, vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(t, 17);
    }
}
