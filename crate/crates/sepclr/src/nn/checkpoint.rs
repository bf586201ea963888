//! Versioned checkpoint container.
//!
//! Layout: a text manifest (magic line, `meta k v` lines, one `tensor` line
//! per array with name, flat offset and shape, then `end`), followed by the
//! concatenated little-endian f32 payload. Values are quantized to f32 by
//! the optimizer on every step, so save/load is bit-transparent.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::tensor::Tensor;
use super::NnError;

const MAGIC: &str = "sepclr-ckpt v1";

pub fn save_tensors(
    path: &Path,
    meta: &BTreeMap<String, String>,
    tensors: &[(String, &Tensor)],
) -> Result<(), NnError> {
    let file = File::create(path).map_err(|e| NnError::Io { path: path.display().to_string(), source: e })?;
    let mut w = BufWriter::new(file);
    let io_err = |e: std::io::Error| NnError::Io { path: path.display().to_string(), source: e };

    writeln!(w, "{}", MAGIC).map_err(io_err)?;
    for (k, v) in meta {
        writeln!(w, "meta {} {}", k, v).map_err(io_err)?;
    }
    let mut offset = 0usize;
    for (name, t) in tensors {
        let dims: Vec<String> = t.shape().iter().map(|d| d.to_string()).collect();
        writeln!(w, "tensor {} {} {} {}", name, offset, t.shape().len(), dims.join(" ")).map_err(io_err)?;
        offset += t.numel();
    }
    writeln!(w, "end").map_err(io_err)?;
    for (_, t) in tensors {
        for &v in t.data() {
            w.write_all(&(v as f32).to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)?;
    Ok(())
}

pub struct Checkpoint {
    pub meta: BTreeMap<String, String>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }
}

pub fn load_tensors(path: &Path) -> Result<Checkpoint, NnError> {
    let file = File::open(path).map_err(|e| NnError::Io { path: path.display().to_string(), source: e })?;
    let mut r = BufReader::new(file);
    let io_err = |e: std::io::Error| NnError::Io { path: path.display().to_string(), source: e };
    let bad = |why: &str| NnError::BadCheckpoint { path: path.display().to_string(), why: why.to_string() };

    let mut header = Vec::new();
    // read the text manifest byte-wise up to the `end` line
    let mut line = String::new();
    let mut meta = BTreeMap::new();
    let mut decls: Vec<(String, usize, Vec<usize>)> = Vec::new();
    let mut first = true;
    loop {
        line.clear();
        let mut byte = [0u8; 1];
        loop {
            let n = r.read(&mut byte).map_err(io_err)?;
            if n == 0 {
                return Err(bad("truncated manifest"));
            }
            if byte[0] == b'\n' {
                break;
            }
            line.push(byte[0] as char);
        }
        header.push(line.clone());
        if first {
            if line != MAGIC {
                return Err(bad("bad magic"));
            }
            first = false;
            continue;
        }
        if line == "end" {
            break;
        }
        let mut parts = line.split(' ');
        match parts.next() {
            Some("meta") => {
                let k = parts.next().ok_or_else(|| bad("meta key missing"))?;
                let v = parts.collect::<Vec<_>>().join(" ");
                meta.insert(k.to_string(), v);
            }
            Some("tensor") => {
                let name = parts.next().ok_or_else(|| bad("tensor name missing"))?.to_string();
                let offset: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("tensor offset missing"))?;
                let rank: usize = parts
                    .next()
                    .and_then(|s| s.parse().ok())
                    .ok_or_else(|| bad("tensor rank missing"))?;
                let dims: Vec<usize> = parts.filter_map(|s| s.parse().ok()).collect();
                if dims.len() != rank {
                    return Err(bad("tensor rank/dims disagree"));
                }
                decls.push((name, offset, dims));
            }
            _ => return Err(bad("unknown manifest line")),
        }
    }

    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(io_err)?;
    if payload.len() % 4 != 0 {
        return Err(bad("payload not a multiple of 4 bytes"));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();

    let mut tensors = Vec::with_capacity(decls.len());
    for (name, offset, dims) in decls {
        let n: usize = dims.iter().product();
        if offset + n > floats.len() {
            return Err(bad("tensor exceeds payload"));
        }
        let t = Tensor::from_vec(&dims, floats[offset..offset + n].to_vec())?;
        tensors.push((name, t));
    }
    Ok(Checkpoint { meta, tensors })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_is_lossless_at_f32() {
        let dir = std::env::temp_dir().join("sepclr_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("rt.ckpt");

        let mut a = Tensor::from_vec(&[2, 3], vec![0.1, -2.5, 3.25, 0.0, 1e-7, -42.0]).unwrap();
        a.round_to_f32();
        let mut b = Tensor::from_vec(&[4], vec![9.0, 8.0, 7.0, 6.5]).unwrap();
        b.round_to_f32();
        let mut meta = BTreeMap::new();
        meta.insert("step".to_string(), "17".to_string());

        save_tensors(&path, &meta, &[("w".to_string(), &a), ("b".to_string(), &b)]).unwrap();
        let ck = load_tensors(&path).unwrap();
        assert_eq!(ck.meta.get("step").unwrap(), "17");
        assert_eq!(ck.tensor("w").unwrap(), &a);
        assert_eq!(ck.tensor("b").unwrap(), &b);

        // save again; files must be byte-identical
        let bytes1 = std::fs::read(&path).unwrap();
        save_tensors(&path, &meta, &[("w".to_string(), &a), ("b".to_string(), &b)]).unwrap();
        let bytes2 = std::fs::read(&path).unwrap();
        assert_eq!(bytes1, bytes2);
    }

    #[test]
    fn rejects_bad_magic() {
        let dir = std::env::temp_dir().join("sepclr_ckpt_test");
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint\nend\n").unwrap();
        assert!(load_tensors(&path).is_err());
    }
}
