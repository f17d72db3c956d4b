//! Binary checkpoint: versioned header, query and key encoder blocks, the
//! classifier block, and the effective config text.
//!
//! ```text
//! "MOTICCKP"           8 bytes
//! version              u32
//! n_dims               u32, then n_dims × u32 layer widths
//! num_transforms       u32
//! transform_seed       u64
//! query params         f64 × P   (layer order; weights row-major, then bias)
//! key params           f64 × P
//! classifier rows/cols u32, u32, then f64 × rows·cols
//! config length        u64, then UTF-8 bytes
//! ```
//!
//! All integers and floats are little-endian.

use crate::codec::{Reader, Writer};
use crate::encoder::{Arch, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::ClassifierWeights;
use crate::math::Mat;

const MAGIC: &[u8; 8] = b"MOTICCKP";
const VERSION: u32 = 1;
const MAX_LAYERS: usize = 64;
const MAX_WIDTH: usize = 1 << 16;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub query: EncoderParams,
    pub key: EncoderParams,
    pub classifier: ClassifierWeights,
    pub num_transforms: usize,
    pub transform_seed: u64,
    pub config_echo: String,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MAGIC);
        w.u32(VERSION);
        let arch = self.query.arch();
        w.u32(arch.0.len() as u32);
        for &d in &arch.0 {
            w.u32(d as u32);
        }
        w.u32(self.num_transforms as u32);
        w.u64(self.transform_seed);
        w.f64s(&self.query.to_flat());
        w.f64s(&self.key.to_flat());
        w.u32(self.classifier.w.rows() as u32);
        w.u32(self.classifier.w.cols() as u32);
        w.f64s(self.classifier.w.as_slice());
        w.u64(self.config_echo.len() as u64);
        w.bytes(self.config_echo.as_bytes());
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect(MAGIC)?;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Decode(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let n_dims = r.u32()? as usize;
        if !(2..=MAX_LAYERS + 1).contains(&n_dims) {
            return Err(Error::Decode(format!("implausible layer count {n_dims}")));
        }
        let mut dims = Vec::with_capacity(n_dims);
        for _ in 0..n_dims {
            let d = r.u32()? as usize;
            if d == 0 || d > MAX_WIDTH {
                return Err(Error::Decode(format!("implausible layer width {d}")));
            }
            dims.push(d);
        }
        let arch = Arch(dims);
        let num_params: usize = arch.0.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        if num_params.saturating_mul(16) > r.remaining() {
            return Err(Error::Decode("truncated parameter blocks".into()));
        }
        let num_transforms = r.u32()? as usize;
        if num_transforms == 0 {
            return Err(Error::Decode("zero transforms".into()));
        }
        let transform_seed = r.u64()?;

        let mut query = EncoderParams::zeros(&arch)?;
        query.set_flat(&r.f64s(num_params)?)?;
        let mut key = query.zeros_like();
        key.set_flat(&r.f64s(num_params)?)?;

        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        if cols != arch.output_dim() || rows == 0 {
            return Err(Error::Decode(format!(
                "classifier {rows}x{cols} does not match output dim {}",
                arch.output_dim()
            )));
        }
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| Error::Decode("classifier size overflow".into()))?;
        let w = Mat::from_vec(rows, cols, r.f64s(n)?)?;

        let len = r.u64()?;
        if len > r.remaining() as u64 {
            return Err(Error::Decode("truncated config text".into()));
        }
        let config_echo = std::str::from_utf8(r.take(len as usize)?)
            .map_err(|_| Error::Decode("config text is not UTF-8".into()))?
            .to_string();
        r.finish()?;
        Ok(Self {
            query,
            key,
            classifier: ClassifierWeights { w },
            num_transforms,
            transform_seed,
            config_echo,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trainer::init_classifier;

    fn sample() -> Checkpoint {
        let arch = Arch(vec![4, 6, 3]);
        let query = EncoderParams::init(&arch, 1).unwrap();
        let mut key = EncoderParams::init(&arch, 2).unwrap();
        key.layers[0].bias[1] = -0.125;
        Checkpoint {
            query,
            key,
            classifier: init_classifier(6, 3, 0).unwrap(),
            num_transforms: 2,
            transform_seed: u64::MAX,
            config_echo: "[experiment]\nseed = 1\n".into(),
        }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..8], b"MOTICCKP");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 3);
        assert_eq!(u32::from_le_bytes(bytes[16..20].try_into().unwrap()), 4);
    }

    #[test]
    fn rejects_corruption() {
        let bytes = sample().to_bytes();
        for cut in [0, 7, 12, 40, bytes.len() - 1] {
            assert!(Checkpoint::from_bytes(&bytes[..cut]).is_err());
        }
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Checkpoint::from_bytes(&extra).is_err());
        let mut huge = bytes.clone();
        huge[16..20].copy_from_slice(&u32::MAX.to_le_bytes());
        assert!(Checkpoint::from_bytes(&huge).is_err());
        let mut nan = bytes;
        let off = 8 + 4 + 4 + 3 * 4 + 4 + 8;
        nan[off..off + 8].copy_from_slice(&f64::NAN.to_le_bytes());
        assert!(Checkpoint::from_bytes(&nan).is_err());
    }
}
