//! `KWT1` tensor container: magic bytes, then per tensor a little-endian
//! record `name_len: u32, name: utf8, rank: u32, dims: u64 * rank, data: f64 * n`.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{KwsError, Result};

use super::Tensor;

pub const MAGIC: &[u8; 4] = b"KWT1";

pub fn write_tensors<W: Write>(mut w: W, tensors: &[(String, Tensor)]) -> Result<()> {
    w.write_all(MAGIC)?;
    for (name, t) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(t.rank() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_tensors<R: Read>(mut r: R, origin: &Path) -> Result<Vec<(String, Tensor)>> {
    let mut buf = Vec::new();
    r.read_to_end(&mut buf)?;
    let bad = |why: &str| KwsError::format(origin, why.to_string());
    if buf.len() < 4 || &buf[..4] != MAGIC {
        return Err(bad("missing KWT1 magic"));
    }
    let mut pos = 4;
    let mut take = |n: usize| -> Result<&[u8]> {
        if pos + n > buf.len() {
            return Err(bad("truncated record"));
        }
        let s = &buf[pos..pos + n];
        pos += n;
        Ok(s)
    };
    let mut out = Vec::new();
    loop {
        let Ok(len_bytes) = take(4) else { break };
        let name_len = u32::from_le_bytes(len_bytes.try_into().unwrap()) as usize;
        let name = std::str::from_utf8(take(name_len)?)
            .map_err(|_| bad("tensor name is not utf-8"))?
            .to_string();
        let rank = u32::from_le_bytes(take(4)?.try_into().unwrap()) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(u64::from_le_bytes(take(8)?.try_into().unwrap()) as usize);
        }
        let n: usize = dims.iter().product();
        let raw = take(n * 8)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        let t = Tensor::new(&dims, data).map_err(|e| bad(&e.to_string()))?;
        out.push((name, t));
    }
    Ok(out)
}

pub fn save(path: &Path, tensors: &[(String, Tensor)]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_tensors(std::io::BufWriter::new(f), tensors)
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let f = std::fs::File::open(path)?;
    read_tensors(std::io::BufReader::new(f), path)
}

/// Looks up a tensor by name in a loaded container.
pub fn find<'a>(tensors: &'a [(String, Tensor)], name: &str, origin: &Path) -> Result<&'a Tensor> {
    tensors
        .iter()
        .find(|(n, _)| n == name)
        .map(|(_, t)| t)
        .ok_or_else(|| KwsError::format(origin, format!("no tensor named `{name}`")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_bit_exact() {
        let t = Tensor::new(&[2], vec![1.0, -0.5]).unwrap();
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("ab".into(), t)]).unwrap();
        let mut expected = b"KWT1".to_vec();
        expected.extend(2u32.to_le_bytes());
        expected.extend(b"ab");
        expected.extend(1u32.to_le_bytes());
        expected.extend(2u64.to_le_bytes());
        expected.extend(1.0f64.to_le_bytes());
        expected.extend((-0.5f64).to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn truncated_and_foreign_files_fail() {
        let p = Path::new("mem");
        assert!(read_tensors(&b"NOPE"[..], p).is_err());
        let t = Tensor::scalar(3.0);
        let mut buf = Vec::new();
        write_tensors(&mut buf, &[("x".into(), t)]).unwrap();
        buf.pop();
        assert!(read_tensors(&buf[..], p).is_err());
    }
}
