//! `TOYD` model checkpoints.
//!
//! Layout, little-endian: magic `TOYD`, version `u32`, nine `u32` dimensions
//! (channels, height, width, features, key_dim, embed_dim, vocabulary_size,
//! time_features, train_timesteps), `f64` beta_start and beta_end, `u64`
//! table seed, `u32` parameter count, then the parameters as `f32`.

use std::path::Path;

use crate::error::{Error, Result};
use crate::testbed::denoiser::{ToyDenoiser, ToyDenoiserConfig};

pub const MAGIC: &[u8; 4] = b"TOYD";
pub const VERSION: u32 = 1;

pub fn encode(model: &ToyDenoiser) -> Result<Vec<u8>> {
    let c = model.config();
    let mut out = Vec::with_capacity(80 + 4 * model.params().len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let dims = [
        c.channels,
        c.height,
        c.width,
        c.features,
        c.key_dim,
        c.embed_dim,
        c.vocabulary_size,
        c.time_features,
        c.train_timesteps,
    ];
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::InvalidInput(format!("dimension {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.extend_from_slice(&c.beta_start.to_le_bytes());
    out.extend_from_slice(&c.beta_end.to_le_bytes());
    out.extend_from_slice(&c.table_seed.to_le_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for &p in model.params() {
        let f = p as f32;
        if f as f64 != p {
            return Err(Error::InvalidInput("parameter is not representable in 32 bits".into()));
        }
        out.extend_from_slice(&f.to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    at: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize, what: &str) -> Result<&[u8]> {
        if self.bytes.len() - self.at < n {
            return Err(Error::Corruption(format!(
                "checkpoint truncated reading {what} at offset {} ({} bytes left, {n} needed)",
                self.at,
                self.bytes.len() - self.at
            )));
        }
        let s = &self.bytes[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f64(&mut self, what: &str) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ToyDenoiser> {
    let mut r = Reader { bytes, at: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad checkpoint magic {magic:?}") });
    }
    let version = r.u32("version")?;
    if version != VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported checkpoint version {version}") });
    }
    let mut dims = [0usize; 9];
    for d in &mut dims {
        *d = r.u32("dimensions")? as usize;
    }
    let config = ToyDenoiserConfig {
        channels: dims[0],
        height: dims[1],
        width: dims[2],
        features: dims[3],
        key_dim: dims[4],
        embed_dim: dims[5],
        vocabulary_size: dims[6],
        time_features: dims[7],
        train_timesteps: dims[8],
        beta_start: r.f64("beta_start")?,
        beta_end: r.f64("beta_end")?,
        table_seed: r.u64("table seed")?,
    };
    let count_at = r.at as u64;
    let count = r.u32("parameter count")? as usize;
    let payload = r.take(4 * count, "parameters")?;
    let params = payload.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64).collect();
    if r.at != bytes.len() {
        return Err(Error::Format {
            offset: r.at as u64,
            message: format!("{} trailing bytes after parameters", bytes.len() - r.at),
        });
    }
    ToyDenoiser::from_parts(config, params).map_err(|e| match e {
        Error::Shape(m) => Error::Format { offset: count_at, message: m },
        other => other,
    })
}

pub fn save(model: &ToyDenoiser, path: &Path) -> Result<()> {
    std::fs::write(path, encode(model)?)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<ToyDenoiser> {
    decode(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> ToyDenoiser {
        let cfg = ToyDenoiserConfig { height: 8, width: 8, features: 4, ..Default::default() };
        ToyDenoiser::init(cfg, 5).unwrap()
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let m = model();
        let bytes = encode(&m).unwrap();
        let back = decode(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(encode(&back).unwrap(), bytes);
    }

    #[test]
    fn bad_magic_and_version() {
        let mut bytes = encode(&model()).unwrap();
        bytes[4] = 9;
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 4, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes), Err(Error::Format { offset: 0, .. })));
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = encode(&model()).unwrap();
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Corruption(_))));
        assert!(matches!(decode(&bytes[..10]), Err(Error::Corruption(_))));
    }
}
