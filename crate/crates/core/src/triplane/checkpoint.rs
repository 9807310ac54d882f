//! Binary field checkpoints.
//!
//! Layout (little-endian): magic `TPF1`, `u32` R, `u32` C, `u32` head count,
//! then per head a `u32` layer count followed by `u32 in, u32 out` per layer,
//! then every parameter as `f64` in [`TriplaneField::params`] order, then the
//! weights-head epsilon as a trailing `f64`.

use std::io::{Read, Write};
use std::path::Path;

use super::mlp::{Linear, Mlp};
use super::TriplaneField;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"TPF1";

pub fn write_checkpoint(field: &TriplaneField, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(64 + 8 * field.param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    let u32_le = |v: usize, buf: &mut Vec<u8>| buf.extend_from_slice(&(v as u32).to_le_bytes());
    u32_le(field.resolution, &mut buf);
    u32_le(field.channels, &mut buf);
    u32_le(field.heads.len(), &mut buf);
    for h in &field.heads {
        u32_le(h.layers.len(), &mut buf);
        for (i, o) in h.shapes() {
            u32_le(i, &mut buf);
            u32_le(o, &mut buf);
        }
    }
    for p in field.params() {
        for v in p {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf.extend_from_slice(&field.weight_eps.to_le_bytes());
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
    path: &'b Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::parse(self.path, format!("byte {}", self.pos), "unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]) as usize)
    }

    fn f64(&mut self) -> Result<f64> {
        let b = self.take(8)?;
        let mut a = [0u8; 8];
        a.copy_from_slice(b);
        Ok(f64::from_le_bytes(a))
    }

    fn fail(&self, msg: impl Into<String>) -> Error {
        Error::parse(self.path, format!("byte {}", self.pos), msg)
    }
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<TriplaneField> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::parse(path, "byte 0", "bad magic, expected TPF1"));
    }
    let res = r.u32()?;
    let ch = r.u32()?;
    if res < 2 || ch == 0 {
        return Err(r.fail(format!("invalid plane shape R={res} C={ch}")));
    }
    let n_heads = r.u32()?;
    if n_heads != 5 {
        return Err(r.fail(format!("expected 5 heads, found {n_heads}")));
    }
    let mut heads = Vec::with_capacity(5);
    for _ in 0..n_heads {
        let n_layers = r.u32()?;
        if n_layers == 0 || n_layers > 64 {
            return Err(r.fail(format!("implausible layer count {n_layers}")));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for _ in 0..n_layers {
            let i = r.u32()?;
            let o = r.u32()?;
            if i == 0 || o == 0 || i.saturating_mul(o) > 1 << 26 {
                return Err(r.fail(format!("implausible layer shape {i}x{o}")));
            }
            layers.push(Linear::zeros(i, o));
        }
        heads.push(Mlp { layers });
    }
    let plane_len = res
        .checked_mul(res)
        .and_then(|v| v.checked_mul(ch))
        .filter(|&v| v <= 1 << 28)
        .ok_or_else(|| r.fail("plane too large"))?;
    let heads: [Mlp; 5] = heads.try_into().expect("five heads");
    let mut field = TriplaneField {
        resolution: res,
        channels: ch,
        weight_eps: 0.0,
        planes: [vec![0.0; plane_len], vec![0.0; plane_len], vec![0.0; plane_len]],
        heads,
    };
    for (h, kind) in field.heads.iter().zip(super::HeadKind::ALL) {
        if h.in_dim() != ch || h.out_dim() != kind.out_dim() {
            return Err(Error::parse(
                path,
                "header",
                format!("{kind:?} head has shape {:?}", h.shapes()),
            ));
        }
        for pair in h.layers.windows(2) {
            if pair[0].out_dim != pair[1].in_dim {
                return Err(Error::parse(path, "header", format!("{kind:?} head layers do not chain")));
            }
        }
    }
    let needed = 8 * (field.param_count() + 1);
    if bytes.len() - r.pos != needed {
        return Err(r.fail(format!(
            "expected {needed} bytes of parameters, found {}",
            bytes.len() - r.pos
        )));
    }
    for p in field.params_mut() {
        for v in p.iter_mut() {
            *v = r.f64()?;
        }
    }
    field.weight_eps = r.f64()?;
    Ok(field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::triplane::TriplaneConfig;

    #[test]
    fn roundtrip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tpf");
        let mut field = TriplaneField::new(&TriplaneConfig::tiny(), 3).unwrap();
        field.planes[0][0] = f64::MIN_POSITIVE;
        field.planes[1][1] = -0.0;
        write_checkpoint(&field, &path).unwrap();
        let back = read_checkpoint(&path).unwrap();
        for (a, b) in field.params().iter().zip(back.params()) {
            assert!(a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert_eq!(back, field);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.tpf");
        let field = TriplaneField::new(&TriplaneConfig::tiny(), 3).unwrap();
        write_checkpoint(&field, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();

        let mut bad = bytes.clone();
        bad[3] = b'2';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Parse { .. })));

        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_checkpoint(&path), Err(Error::Parse { .. })));

        assert!(matches!(read_checkpoint(dir.path().join("missing")), Err(Error::Io { .. })));
    }
}
