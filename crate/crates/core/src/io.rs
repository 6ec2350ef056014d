//! Binary heatmap exchange format and JSON joint files.
//!
//! Heatmap layout, all little-endian:
//!
//! | offset | size | field |
//! |---|---|---|
//! | 0 | 4 | magic `IHPR` |
//! | 4 | 4 | version (`u32`, = 1) |
//! | 8 | 16 | `K`, `D`, `H`, `W` (`u32` each) |
//! | 24 | 8·KDHW | scores, IEEE-754 `f64`, `(k, z, y, x)` order |

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::grid::{GridSpec, Heatmap, JointSet};
use crate::scalar::Scalar;

pub const HEATMAP_MAGIC: [u8; 4] = *b"IHPR";
pub const FORMAT_VERSION: u32 = 1;

/// Byte reader that tracks its offset for error reporting.
pub(crate) struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    pub(crate) fn new(inner: R) -> Self {
        Cursor { inner, offset: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.offset
    }

    pub(crate) fn bytes<const N: usize>(&mut self, what: &str) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        let mut filled = 0;
        while filled < N {
            match self.inner.read(&mut buf[filled..]) {
                Ok(0) => {
                    return Err(Error::format(
                        self.offset + filled as u64,
                        format!("truncated while reading {what}"),
                    ))
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
        self.offset += N as u64;
        Ok(buf)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes::<4>(what)?))
    }

    pub(crate) fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes::<8>(what)?))
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.bytes::<4>("magic")?;
        if &got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(&got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        let version = self.u32("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::format(
                4,
                format!("unsupported version {version}, expected {FORMAT_VERSION}"),
            ));
        }
        Ok(())
    }

    /// Reads `n` finite `f64` values.
    pub(crate) fn finite_values(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(n);
        for _ in 0..n {
            let at = self.offset;
            let v = self.f64(what)?;
            if !v.is_finite() {
                return Err(Error::format(at, format!("non-finite {what} value")));
            }
            out.push(v);
        }
        Ok(out)
    }

    /// Fails unless the stream is exhausted.
    pub(crate) fn expect_end(&mut self) -> Result<()> {
        let mut probe = [0u8; 1];
        loop {
            match self.inner.read(&mut probe) {
                Ok(0) => return Ok(()),
                Ok(_) => return Err(Error::format(self.offset, "trailing bytes after payload")),
                Err(e) if e.kind() == std::io::ErrorKind::Interrupted => {}
                Err(e) => return Err(e.into()),
            }
        }
    }
}

pub(crate) fn dim_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::contract(format!("{what} = {value} exceeds u32")))
}

/// Writes `h` and returns the number of bytes emitted.
pub fn write_heatmap<T: Scalar, W: Write>(h: &Heatmap<T>, mut sink: W) -> Result<u64> {
    let spec = h.spec();
    let mut header = Vec::with_capacity(24);
    header.extend_from_slice(&HEATMAP_MAGIC);
    header.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    for (v, what) in [
        (spec.joints, "K"),
        (spec.depth, "D"),
        (spec.height, "H"),
        (spec.width, "W"),
    ] {
        header.extend_from_slice(&dim_u32(v, what)?.to_le_bytes());
    }
    sink.write_all(&header)?;
    let mut body = Vec::with_capacity(8 * h.scores().len());
    for s in h.scores() {
        body.extend_from_slice(&s.as_f64().to_le_bytes());
    }
    sink.write_all(&body)?;
    sink.flush()?;
    Ok((header.len() + body.len()) as u64)
}

/// Reads a heatmap written by [`write_heatmap`]. The stream must end after
/// the payload.
pub fn read_heatmap<T: Scalar, R: Read>(source: R) -> Result<Heatmap<T>> {
    let mut cur = Cursor::new(source);
    cur.expect_magic(&HEATMAP_MAGIC)?;
    let joints = cur.u32("K")? as usize;
    let depth = cur.u32("D")? as usize;
    let height = cur.u32("H")? as usize;
    let width = cur.u32("W")? as usize;
    let spec = GridSpec::new(joints, depth, height, width)
        .map_err(|e| Error::format(8, format!("invalid shape: {e}")))?;
    let values = cur.finite_values(spec.len(), "score")?;
    cur.expect_end()?;
    let scores = values.into_iter().map(T::of).collect();
    Heatmap::new(spec, scores)
}

pub fn save_heatmap<T: Scalar>(h: &Heatmap<T>, path: impl AsRef<Path>) -> Result<u64> {
    let file = BufWriter::new(File::create(path)?);
    write_heatmap(h, file)
}

pub fn load_heatmap<T: Scalar>(path: impl AsRef<Path>) -> Result<Heatmap<T>> {
    read_heatmap(BufReader::new(File::open(path)?))
}

pub fn save_joints<T: Scalar>(joints: &JointSet<T>, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, joints.to_json()?)?;
    Ok(())
}

pub fn load_joints<T: Scalar>(path: impl AsRef<Path>) -> Result<JointSet<T>> {
    JointSet::from_json(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Heatmap {
        let spec = GridSpec::new(2, 1, 2, 3).unwrap();
        Heatmap::new(spec, (0..12).map(|i| i as f64 * 0.25 - 1.0).collect()).unwrap()
    }

    #[test]
    fn minimal_round_trip() {
        let spec = GridSpec::new(1, 1, 1, 1).unwrap();
        let h = Heatmap::new(spec, vec![0.5]).unwrap();
        let mut buf = Vec::new();
        assert_eq!(write_heatmap(&h, &mut buf).unwrap(), 32);
        let back: Heatmap = read_heatmap(buf.as_slice()).unwrap();
        assert_eq!(back.scores(), &[0.5]);
    }

    #[test]
    fn header_layout() {
        let mut buf = Vec::new();
        write_heatmap(&sample(), &mut buf).unwrap();
        assert_eq!(&buf[0..4], b"IHPR");
        assert_eq!(&buf[4..8], &1u32.to_le_bytes());
        assert_eq!(&buf[8..12], &2u32.to_le_bytes());
        assert_eq!(&buf[20..24], &3u32.to_le_bytes());
        assert_eq!(buf.len(), 24 + 12 * 8);
    }

    #[test]
    fn wrong_magic() {
        let mut buf = Vec::new();
        write_heatmap(&sample(), &mut buf).unwrap();
        buf[0] = b'X';
        let err = read_heatmap::<f64, _>(buf.as_slice()).unwrap_err();
        assert!(matches!(err, Error::Format { offset: 0, .. }), "{err}");
    }

    #[test]
    fn version_mismatch() {
        let mut buf = Vec::new();
        write_heatmap(&sample(), &mut buf).unwrap();
        buf[4] = 2;
        assert!(matches!(
            read_heatmap::<f64, _>(buf.as_slice()),
            Err(Error::Format { offset: 4, .. })
        ));
    }

    #[test]
    fn truncated_payload() {
        let mut buf = Vec::new();
        write_heatmap(&sample(), &mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        match read_heatmap::<f64, _>(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 24 + 11 * 8 + 5),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn non_finite_value_reports_offset() {
        let mut buf = Vec::new();
        write_heatmap(&sample(), &mut buf).unwrap();
        buf[24 + 16..24 + 24].copy_from_slice(&f64::INFINITY.to_le_bytes());
        match read_heatmap::<f64, _>(buf.as_slice()) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 40),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn trailing_bytes_rejected() {
        let mut buf = Vec::new();
        write_heatmap(&sample(), &mut buf).unwrap();
        buf.push(0);
        assert!(read_heatmap::<f64, _>(buf.as_slice()).is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("h.ihpr");
        save_heatmap(&sample(), &path).unwrap();
        assert_eq!(load_heatmap::<f64>(&path).unwrap(), sample());
        let js = JointSet::planar(vec![[1.0, 2.0, 0.0]]).unwrap();
        let jp = dir.path().join("j.json");
        save_joints(&js, &jp).unwrap();
        assert_eq!(load_joints::<f64>(&jp).unwrap(), js);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]
        #[test]
        fn round_trip_is_bit_exact(
            k in 1usize..3, d in 1usize..3, h in 1usize..5, w in 1usize..5,
            raw in proptest::collection::vec(-1e300f64..1e300, 75),
        ) {
            let spec = GridSpec::new(k, d, h, w).unwrap();
            let scores: Vec<f64> = raw.iter().cycle().take(spec.len()).copied().collect();
            let hm = Heatmap::new(spec, scores).unwrap();
            let mut buf = Vec::new();
            write_heatmap(&hm, &mut buf).unwrap();
            let back: Heatmap = read_heatmap(buf.as_slice()).unwrap();
            prop_assert_eq!(back.spec(), hm.spec());
            for (a, b) in back.scores().iter().zip(hm.scores()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }
    }
}
