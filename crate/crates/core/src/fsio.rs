//! Small file helpers shared by dataset, checkpoint and run-manifest persistence.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Write via a sibling temp file and rename, so readers never see a partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension(match path.extension() {
        Some(e) => format!("{}.tmp", e.to_string_lossy()),
        None => "tmp".to_string(),
    });
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn read_string(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn create_dir_all(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// `key=value` lines, sorted by key.
pub fn format_kv(map: &BTreeMap<String, String>) -> String {
    map.iter().map(|(k, v)| format!("{k}={v}\n")).collect()
}

pub fn parse_kv(path: &Path, text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| Error::Corrupt {
            path: path.to_path_buf(),
            message: format!("line {}: expected key=value", n + 1),
        })?;
        out.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(out)
}

pub fn kv_get<'a>(path: &Path, map: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str> {
    map.get(key).map(String::as_str).ok_or_else(|| Error::Corrupt {
        path: path.to_path_buf(),
        message: format!("missing key `{key}`"),
    })
}

pub fn kv_parse<T: std::str::FromStr>(path: &Path, map: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let raw = kv_get(path, map, key)?;
    raw.parse().map_err(|_| Error::Corrupt {
        path: path.to_path_buf(),
        message: format!("bad value `{raw}` for `{key}`"),
    })
}

pub fn format_indices(v: &[usize]) -> String {
    v.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn parse_indices(path: &Path, s: &str) -> Result<Vec<usize>> {
    if s.is_empty() {
        return Ok(Vec::new());
    }
    s.split(',')
        .map(|t| {
            t.parse().map_err(|_| Error::Corrupt {
                path: path.to_path_buf(),
                message: format!("bad index `{t}`"),
            })
        })
        .collect()
}

/// Little-endian: `u32` rank, `u64` dims, then raw `f64` bits.
pub fn encode_tensor(t: &Tensor, out: &mut Vec<u8>) {
    out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn decode_tensor(path: &Path, bytes: &[u8], pos: &mut usize) -> Result<Tensor> {
    let corrupt = |m: &str| Error::Corrupt { path: path.to_path_buf(), message: m.to_string() };
    let mut take = |n: usize| -> Result<&[u8]> {
        let s = bytes.get(*pos..*pos + n).ok_or_else(|| corrupt("truncated tensor"))?;
        *pos += n;
        Ok(s)
    };
    let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
    if rank > 8 {
        return Err(corrupt("tensor rank too large"));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
    }
    let n: usize = shape.iter().product();
    let raw = take(n.checked_mul(8).ok_or_else(|| corrupt("tensor too large"))?)?;
    let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    Tensor::new(shape, data).map_err(|e| corrupt(&e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tensor_round_trip_is_bitwise() {
        let t = Tensor::new(vec![2, 3], vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, -7.25, 3.0]).unwrap();
        let mut buf = Vec::new();
        encode_tensor(&t, &mut buf);
        encode_tensor(&Tensor::scalar(2.5), &mut buf);
        let mut pos = 0;
        let p = Path::new("x");
        assert!(decode_tensor(p, &buf, &mut pos).unwrap().bitwise_eq(&t));
        assert_eq!(decode_tensor(p, &buf, &mut pos).unwrap().item(), 2.5);
        assert_eq!(pos, buf.len());
        let mut pos = 0;
        assert!(decode_tensor(p, &buf[..10], &mut pos).is_err());
    }

    #[test]
    fn kv_round_trip() {
        let mut m = BTreeMap::new();
        m.insert("a.b".to_string(), "1".to_string());
        m.insert("list".to_string(), format_indices(&[3, 1, 2]));
        let p = Path::new("m");
        let back = parse_kv(p, &format_kv(&m)).unwrap();
        assert_eq!(back, m);
        assert_eq!(parse_indices(p, &back["list"]).unwrap(), vec![3, 1, 2]);
        assert!(parse_kv(p, "novalue").is_err());
    }
}
