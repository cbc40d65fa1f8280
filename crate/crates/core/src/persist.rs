//! `UMC1` binary container for parameters and training state.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "UMC1"  u32 version  u32 n_arrays
//! n_arrays × { u16 name_len, name (utf-8), u8 rank, rank × u64 extent, f64 data }
//! u32 config_len, config (utf-8 TOML)
//! 16 bytes rng state
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"UMC1";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Archive {
    pub arrays: Vec<(String, Tensor)>,
    pub config: String,
    pub rng_state: [u8; 16],
}

impl Archive {
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Format(format!("missing array `{name}`")))
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(
            &u32::try_from(self.arrays.len())
                .map_err(|_| fmt("too many arrays"))?
                .to_le_bytes(),
        );
        for (name, t) in &self.arrays {
            let nb = name.as_bytes();
            let len = u16::try_from(nb.len()).map_err(|_| fmt("array name too long"))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(nb);
            let rank = u8::try_from(t.rank()).map_err(|_| fmt("rank too large"))?;
            out.push(rank);
            for &e in t.shape() {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            for &v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let cb = self.config.as_bytes();
        out.extend_from_slice(
            &u32::try_from(cb.len())
                .map_err(|_| fmt("config too long"))?
                .to_le_bytes(),
        );
        out.extend_from_slice(cb);
        out.extend_from_slice(&self.rng_state);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Archive> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(fmt("bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let mut arrays = Vec::with_capacity(n.min(1 << 16));
        for _ in 0..n {
            let len = u16::from_le_bytes(r.take(2)?.try_into().unwrap()) as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| fmt("array name is not utf-8"))?;
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| fmt("extent overflow"))?);
            }
            let count = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .filter(|c| c.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| fmt("array extends past end of data"))?;
            let data = r
                .take(count * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push((name, Tensor::new(shape, data)));
        }
        let clen = r.u32()? as usize;
        let config =
            String::from_utf8(r.take(clen)?.to_vec()).map_err(|_| fmt("config is not utf-8"))?;
        let rng_state: [u8; 16] = r.take(16)?.try_into().unwrap();
        if r.remaining() != 0 {
            return Err(fmt("trailing bytes"));
        }
        Ok(Archive {
            arrays,
            config,
            rng_state,
        })
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(&self.to_bytes()?)?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Archive> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Archive::from_bytes(&buf)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Archive> {
        Archive::from_bytes(&std::fs::read(path)?)
    }
}

fn fmt(m: &str) -> Error {
    Error::Format(m.to_string())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(fmt("unexpected end of data"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample() -> Archive {
        Archive {
            arrays: vec![
                (
                    "a".into(),
                    Tensor::new(
                        vec![2, 3],
                        vec![1.0, -0.0, f64::MIN_POSITIVE, 1e300, -7.5, 0.1],
                    ),
                ),
                ("scalar".into(), Tensor::new(vec![], vec![3.25])),
            ],
            config: "[training]\nw1 = 1.0\n".into(),
            rng_state: *b"0123456789abcdef",
        }
    }

    #[test]
    fn header_layout() {
        let b = sample().to_bytes().unwrap();
        assert_eq!(&b[..4], b"UMC1");
        assert_eq!(u32::from_le_bytes(b[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(b[8..12].try_into().unwrap()), 2);
        assert_eq!(u16::from_le_bytes(b[12..14].try_into().unwrap()), 1);
        assert_eq!(b[14], b'a');
        assert_eq!(b[15], 2);
        assert_eq!(&b[b.len() - 16..], b"0123456789abcdef");
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let b = sample().to_bytes().unwrap();
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = b.clone();
        bad[4] = 9;
        assert!(matches!(Archive::from_bytes(&bad), Err(Error::Format(_))));
        for cut in [3, 11, 20, b.len() - 1] {
            assert!(matches!(
                Archive::from_bytes(&b[..cut]),
                Err(Error::Format(_))
            ));
        }
        let mut long = b.clone();
        long.push(0);
        assert!(Archive::from_bytes(&long).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.umc");
        sample().save(&p).unwrap();
        assert_eq!(Archive::load(&p).unwrap(), sample());
    }

    proptest! {
        #[test]
        fn round_trip_is_bitwise(
            bits in proptest::collection::vec(any::<u64>(), 0..40),
            rows in 1usize..5,
            name in "[a-z.]{0,12}",
            config in ".{0,40}",
            rng in any::<[u8; 16]>(),
        ) {
            let data: Vec<f64> = bits.iter().map(|&b| f64::from_bits(b)).collect();
            let n = data.len() / rows * rows;
            let t = Tensor::new(vec![rows, n / rows], data[..n].to_vec());
            let a = Archive { arrays: vec![(name, t)], config, rng_state: rng };
            let bytes = a.to_bytes().unwrap();
            let back = Archive::from_bytes(&bytes).unwrap();
            prop_assert_eq!(back.to_bytes().unwrap(), bytes);
            let orig: Vec<u64> = a.arrays[0].1.data().iter().map(|v| v.to_bits()).collect();
            let got: Vec<u64> = back.arrays[0].1.data().iter().map(|v| v.to_bits()).collect();
            prop_assert_eq!(orig, got);
        }
    }
}
