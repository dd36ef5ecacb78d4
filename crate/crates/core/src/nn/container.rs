//! Checkpoint container: magic, a JSON header, then length-prefixed `f64` blocks,
//! all little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DIFINSP1";

pub fn write_container(path: &Path, header: &serde_json::Value, blocks: &[Vec<f64>]) -> Result<()> {
    let io = |e| Error::io(path, e);
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp).map_err(io)?);
        let head = serde_json::to_vec(header).expect("json value serializes");
        w.write_all(MAGIC).map_err(io)?;
        w.write_all(&(head.len() as u64).to_le_bytes()).map_err(io)?;
        w.write_all(&head).map_err(io)?;
        w.write_all(&(blocks.len() as u64).to_le_bytes()).map_err(io)?;
        for b in blocks {
            w.write_all(&(b.len() as u64).to_le_bytes()).map_err(io)?;
            for v in b {
                w.write_all(&v.to_le_bytes()).map_err(io)?;
            }
        }
        w.flush().map_err(io)?;
    }
    std::fs::rename(&tmp, path).map_err(io)
}

pub fn read_container(path: &Path) -> Result<(serde_json::Value, Vec<Vec<f64>>)> {
    let bad = |reason: &str| Error::Load {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    let mut r = BufReader::new(File::open(path).map_err(|e| Error::io(path, e))?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
    if &magic != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let mut u64_buf = [0u8; 8];
    let mut next_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        r.read_exact(&mut u64_buf).map_err(|_| bad("truncated file"))?;
        Ok(u64::from_le_bytes(u64_buf))
    };
    let head_len = next_u64(&mut r)? as usize;
    let mut head = vec![0u8; head_len];
    r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
    let header = serde_json::from_slice(&head).map_err(|e| bad(&format!("bad header: {e}")))?;
    let count = next_u64(&mut r)? as usize;
    let mut blocks = Vec::with_capacity(count.min(64));
    for _ in 0..count {
        let n = next_u64(&mut r)? as usize;
        let mut bytes = vec![0u8; n.checked_mul(8).ok_or_else(|| bad("block too large"))?];
        r.read_exact(&mut bytes).map_err(|_| bad("truncated block"))?;
        blocks.push(
            bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect(),
        );
    }
    Ok((header, blocks))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a/b.bin");
        let head = serde_json::json!({"kind": "x", "n": 3});
        let blocks = vec![vec![1.0, -2.5, f64::MIN_POSITIVE], vec![]];
        write_container(&p, &head, &blocks).unwrap();
        let (h, b) = read_container(&p).unwrap();
        assert_eq!(h, head);
        assert_eq!(b, blocks);

        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(read_container(&p), Err(Error::Load { .. })));
        std::fs::write(&p, b"garbage!garbage!").unwrap();
        assert!(matches!(read_container(&p), Err(Error::Load { .. })));
    }
}
