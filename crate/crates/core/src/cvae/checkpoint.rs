//! Versioned binary model checkpoint.
//!
//! Layout (little-endian): magic `CVAE`, u32 version, then three
//! length-prefixed (u32) UTF-8 JSON blocks (architecture, training config,
//! normalization buffers), u64 master seed, u64 parameter count and the
//! f64 parameter payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::layers::ChannelNorm;
use super::model::{Cvae, CvaeArchitecture};
use super::train::TrainConfig;
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"CVAE";
const VERSION: u32 = 1;
const MAX_JSON: u32 = 1 << 24;
const MAX_PARAMS: u64 = 1 << 28;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Norms {
    encoder: Vec<ChannelNorm>,
    decoder: Vec<ChannelNorm>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Cvae,
    pub train_config: TrainConfig,
    pub seed: u64,
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::invalid(e.to_string()))
}

fn write_json<W: Write>(w: &mut W, s: &str) -> Result<()> {
    let len = u32::try_from(s.len()).map_err(|_| Error::invalid("checkpoint JSON block too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub fn encode_checkpoint<W: Write>(ck: &Checkpoint, mut w: W) -> Result<()> {
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    write_json(&mut w, &to_json(ck.model.architecture())?)?;
    write_json(&mut w, &to_json(&ck.train_config)?)?;
    let norms = Norms {
        encoder: ck.model.enc_norms().to_vec(),
        decoder: ck.model.dec_norms().to_vec(),
    };
    write_json(&mut w, &to_json(&norms)?)?;
    w.write_all(&ck.seed.to_le_bytes())?;
    w.write_all(&(ck.model.num_params() as u64).to_le_bytes())?;
    for v in ck.model.params() {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

struct Cursor<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> Cursor<R> {
    fn bytes(&mut self, n: usize, what: &str) -> Result<Vec<u8>> {
        let mut buf = vec![0u8; n];
        self.inner
            .read_exact(&mut buf)
            .map_err(|_| Error::format(self.offset, format!("truncated {what}")))?;
        self.offset += n as u64;
        Ok(buf)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.bytes(4, what)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let b = self.bytes(8, what)?;
        Ok(u64::from_le_bytes(b.try_into().expect("8 bytes")))
    }

    fn json<T: serde::de::DeserializeOwned>(&mut self, what: &str) -> Result<T> {
        let at = self.offset;
        let len = self.u32(what)?;
        if len > MAX_JSON {
            return Err(Error::format(at, format!("{what} block of {len} bytes is too large")));
        }
        let raw = self.bytes(len as usize, what)?;
        serde_json::from_slice(&raw).map_err(|e| Error::format(at + 4, format!("{what}: {e}")))
    }
}

pub fn decode_checkpoint<R: Read>(r: R) -> Result<Checkpoint> {
    let mut c = Cursor { inner: r, offset: 0 };
    if c.bytes(4, "magic")? != MAGIC {
        return Err(Error::format(0, "bad checkpoint magic"));
    }
    let version = c.u32("version")?;
    if version != VERSION {
        return Err(Error::format(4, format!("unsupported checkpoint version {version}")));
    }
    let arch: CvaeArchitecture = c.json("architecture")?;
    let train_config: TrainConfig = c.json("training config")?;
    let norms: Norms = c.json("normalization buffers")?;
    let seed = c.u64("seed")?;
    let at = c.offset;
    let n = c.u64("parameter count")?;
    if n > MAX_PARAMS {
        return Err(Error::format(at, format!("{n} parameters exceeds the bound")));
    }
    let raw = c.bytes(n as usize * 8, "parameters")?;
    let params = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
        .collect();
    let model = Cvae::from_parts(arch, params, norms.encoder, norms.decoder)
        .map_err(|e| Error::format(at, e.to_string()))?;
    Ok(Checkpoint {
        model,
        train_config,
        seed,
    })
}

pub fn save_checkpoint(ck: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    encode_checkpoint(ck, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    decode_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn round_trip_is_exact() {
        let mut model = Cvae::new(CvaeArchitecture::default(), &mut substream(1, &[])).unwrap();
        let data: Vec<Vec<crate::linalg::C64>> = (0..50)
            .map(|i| {
                let mut r = substream(2, &[i]);
                (0..16).map(|_| crate::rng::complex_normal(&mut r)).collect()
            })
            .collect();
        model.refresh_norms(&data).unwrap();
        let ck = Checkpoint {
            model,
            train_config: TrainConfig::default(),
            seed: 77,
        };
        let mut buf = Vec::new();
        encode_checkpoint(&ck, &mut buf).unwrap();
        let back = decode_checkpoint(buf.as_slice()).unwrap();
        assert_eq!(back.seed, 77);
        assert_eq!(back.train_config, ck.train_config);
        assert_eq!(back.model.params(), ck.model.params());
        assert_eq!(back.model.enc_norms(), ck.model.enc_norms());
        for z in &data {
            assert_eq!(back.model.recon_score(z).unwrap(), ck.model.recon_score(z).unwrap());
        }
        let mut again = Vec::new();
        encode_checkpoint(&back, &mut again).unwrap();
        assert_eq!(again, buf);
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let ck = Checkpoint {
            model: Cvae::new(CvaeArchitecture::default(), &mut substream(3, &[])).unwrap(),
            train_config: TrainConfig::default(),
            seed: 1,
        };
        let mut buf = Vec::new();
        encode_checkpoint(&ck, &mut buf).unwrap();
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(bad.as_slice()), Err(Error::Format { offset: 0, .. })));
        let short = &buf[..buf.len() - 5];
        assert!(matches!(decode_checkpoint(short), Err(Error::Format { .. })));
    }
}
