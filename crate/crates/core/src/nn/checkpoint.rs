//! Parameter checkpoint format.
//!
//! A text manifest with one `name dim0 dim1 ...` line per tensor, terminated
//! by an empty line (so the manifest ends in `\n\n`), followed by every
//! tensor's data as little-endian `f64` in manifest order.

use std::io::Write;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

use super::ParamStore;

/// Named tensors in file order.
pub type Checkpoint = Vec<(String, Tensor)>;

pub fn encode_checkpoint<'a>(entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>) -> Vec<u8> {
    let entries: Vec<_> = entries.into_iter().collect();
    let mut out = Vec::new();
    for (name, t) in &entries {
        out.extend_from_slice(name.as_bytes());
        for d in t.shape() {
            out.extend_from_slice(format!(" {d}").as_bytes());
        }
        out.push(b'\n');
    }
    out.push(b'\n');
    for (_, t) in &entries {
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let split = if bytes.first() == Some(&b'\n') {
        0
    } else {
        bytes
            .windows(2)
            .position(|w| w == b"\n\n")
            .map(|p| p + 1)
            .ok_or_else(|| Error::Format("checkpoint manifest not terminated".into()))?
    };
    let manifest = std::str::from_utf8(&bytes[..split])
        .map_err(|_| Error::Format("checkpoint manifest is not UTF-8".into()))?;
    let mut body = &bytes[split + 1..];
    let mut out = Vec::new();
    for line in manifest.lines() {
        let mut parts = line.split(' ');
        let name = parts
            .next()
            .filter(|n| !n.is_empty())
            .ok_or_else(|| Error::Format(format!("bad manifest line {line:?}")))?;
        let shape = parts
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| Error::Format(format!("bad shape in manifest line {line:?}")))?;
        let n: usize = shape.iter().product();
        if body.len() < n * 8 {
            return Err(Error::Format(format!("truncated data for `{name}`")));
        }
        let data = body[..n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
            .collect();
        body = &body[n * 8..];
        out.push((name.to_string(), Tensor::new(&shape, data)?));
    }
    if !body.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after checkpoint data", body.len())));
    }
    Ok(out)
}

pub fn write_checkpoint<'a>(
    path: &Path,
    entries: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let bytes = encode_checkpoint(entries);
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&bytes))
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

impl ParamStore {
    /// Overwrites every parameter from `ckpt`; names and shapes must match.
    /// Entries with no matching parameter are ignored.
    pub fn load_from(&mut self, ckpt: &Checkpoint) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let (_, t) = ckpt
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Format(format!("checkpoint lacks parameter `{name}`")))?;
            if t.shape() != self.value(id).shape() {
                return Err(Error::shape("load_checkpoint", self.value(id).shape(), t.shape()));
            }
            *self.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn layout_is_manifest_blank_line_then_le_data() {
        let a = Tensor::new(&[1, 2], vec![1.0, -2.5]).unwrap();
        let s = Tensor::scalar(0.5);
        let bytes = encode_checkpoint([("w", &a), ("alpha", &s)]);
        let header = b"w 1 2\nalpha\n\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(&bytes[header.len()..header.len() + 8], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), header.len() + 3 * 8);
    }

    #[test]
    fn rejects_truncated_and_trailing() {
        let a = Tensor::vector(vec![1.0, 2.0]);
        let bytes = encode_checkpoint([("a", &a)]);
        assert!(decode_checkpoint(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(decode_checkpoint(&extra).is_err());
        assert!(decode_checkpoint(b"a 2").is_err());
    }

    proptest! {
        #[test]
        fn roundtrip(values in prop::collection::vec(-1e6f64..1e6, 1..24), rows in 1usize..4) {
            let n = values.len() / rows * rows;
            prop_assume!(n > 0);
            let t = Tensor::new(&[rows, n / rows], values[..n].to_vec()).unwrap();
            let v = Tensor::vector(values.clone());
            let back = decode_checkpoint(&encode_checkpoint([("x.weight", &t), ("y", &v)])).unwrap();
            prop_assert_eq!(back.len(), 2);
            prop_assert_eq!(&back[0].1, &t);
            prop_assert_eq!(&back[1].1, &v);
            prop_assert_eq!(back[0].0.as_str(), "x.weight");
        }
    }
}
