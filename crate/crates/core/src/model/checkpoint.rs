//! Checkpoint archive: a text manifest of (name, shape) entries followed by
//! one little-endian f64 blob per tensor, concatenated in manifest order.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::fs;
use std::path::Path;

const MAGIC: &str = "BAN-CHECKPOINT 1";

pub fn save(entries: &[(String, &Tensor)], path: &Path) -> Result<()> {
    let mut head = String::new();
    head.push_str(MAGIC);
    head.push('\n');
    head.push_str(&entries.len().to_string());
    head.push('\n');
    for (name, t) in entries {
        if name.contains(char::is_whitespace) {
            return Err(Error::InvalidArgument {
                op: "checkpoint::save",
                message: format!("tensor name {name:?} contains whitespace"),
            });
        }
        head.push_str(name);
        for d in t.shape() {
            head.push(' ');
            head.push_str(&d.to_string());
        }
        head.push('\n');
    }
    head.push_str("DATA\n");
    let mut bytes = head.into_bytes();
    for (_, t) in entries {
        for v in t.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    fs::write(path, bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    let header_end = find_data_marker(&bytes)
        .ok_or_else(|| Error::Parse(format!("{}: no DATA marker", path.display())))?;
    let header = std::str::from_utf8(&bytes[..header_end])
        .map_err(|_| Error::Parse("checkpoint manifest is not utf-8".into()))?;
    let mut lines = header.lines();
    if lines.next() != Some(MAGIC) {
        return Err(Error::Parse("not a checkpoint file".into()));
    }
    let count: usize = lines
        .next()
        .and_then(|l| l.parse().ok())
        .ok_or_else(|| Error::Parse("bad tensor count".into()))?;
    let mut manifest = Vec::with_capacity(count);
    for _ in 0..count {
        let line = lines
            .next()
            .ok_or_else(|| Error::Parse("manifest truncated".into()))?;
        let mut parts = line.split(' ');
        let name = parts
            .next()
            .filter(|s| !s.is_empty())
            .ok_or_else(|| Error::Parse("empty manifest line".into()))?
            .to_string();
        let shape: Vec<usize> = parts
            .map(|p| {
                p.parse()
                    .map_err(|_| Error::Parse(format!("bad dimension {p:?} for {name}")))
            })
            .collect::<Result<_>>()?;
        manifest.push((name, shape));
    }

    let mut offset = header_end + "DATA\n".len();
    let mut out = Vec::with_capacity(count);
    for (name, shape) in manifest {
        let numel: usize = shape.iter().product();
        let end = offset + numel * 8;
        if end > bytes.len() {
            return Err(Error::Parse(format!("blob for {name} truncated")));
        }
        let data = bytes[offset..end]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::from_vec(shape, data)?));
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Parse("trailing bytes after last blob".into()));
    }
    Ok(out)
}

fn find_data_marker(bytes: &[u8]) -> Option<usize> {
    let marker = b"\nDATA\n";
    bytes
        .windows(marker.len())
        .position(|w| w == marker)
        .map(|p| p + 1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::max_abs_diff;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn round_trip_preserves_names_shapes_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = Tensor::uniform(&[3, 4], -2.0, 2.0, &mut rng);
        let b = Tensor::uniform(&[5], -2.0, 2.0, &mut rng);
        let s = Tensor::scalar(0.125);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save(
            &[
                ("w".to_string(), &a),
                ("bias".to_string(), &b),
                ("step".to_string(), &s),
            ],
            &path,
        )
        .unwrap();
        let loaded = load(&path).unwrap();
        assert_eq!(loaded.len(), 3);
        assert_eq!(loaded[0].0, "w");
        assert_eq!(loaded[0].1.shape(), &[3, 4]);
        assert_eq!(max_abs_diff(&loaded[0].1, &a), 0.0);
        assert_eq!(max_abs_diff(&loaded[1].1, &b), 0.0);
        assert_eq!(loaded[2].1.item().unwrap(), 0.125);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk");
        std::fs::write(&path, b"not a checkpoint\nDATA\n").unwrap();
        assert!(load(&path).is_err());
    }
}
