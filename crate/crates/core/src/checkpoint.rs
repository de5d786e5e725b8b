//! Binary checkpoint container for an encoder pair and its running covariance.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes   "TICOCKPT"
//! version      u32       1
//! header_len   u64       length of the JSON header in bytes
//! header       JSON      {"arch": …, "slices": [{"name", "rows", "cols"}, …],
//!                         "covariance": {"dim", "beta", "step"}}
//! online       f64 LE    every slice in header order, row-major
//! momentum     f64 LE    same layout as online
//! covariance   f64 LE    dim × dim, row-major
//! ```
//!
//! Values are stored as raw bits, so a write/read round trip is bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ema::CovarianceState;
use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::model::{ArchitectureConfig, EncoderPair, Parameters, Slice};

pub const MAGIC: &[u8; 8] = b"TICOCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SliceHeader {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CovarianceHeader {
    dim: usize,
    beta: f64,
    step: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    arch: ArchitectureConfig,
    slices: Vec<SliceHeader>,
    covariance: CovarianceHeader,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub pair: EncoderPair,
    pub covariance: CovarianceState,
}

fn write_values(w: &mut impl Write, values: &[f64]) -> Result<()> {
    for v in values {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

fn read_values(r: &mut impl Read, count: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; count * 8];
    r.read_exact(&mut buf)
        .map_err(|e| Error::Format(format!("truncated checkpoint payload: {e}")))?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

impl Checkpoint {
    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        let pair = &self.pair;
        pair.online.matches_arch(&pair.arch)?;
        pair.online.check_compatible(&pair.momentum)?;
        let dim = self.covariance.dim();
        if dim != pair.arch.embed_dim {
            return Err(Error::Layout(format!(
                "covariance is {dim}×{dim} but embed_dim is {}",
                pair.arch.embed_dim
            )));
        }
        let header = Header {
            arch: pair.arch.clone(),
            slices: pair
                .online
                .slices
                .iter()
                .map(|s| SliceHeader {
                    name: s.name.clone(),
                    rows: s.value.rows(),
                    cols: s.value.cols(),
                })
                .collect(),
            covariance: CovarianceHeader {
                dim,
                beta: self.covariance.beta,
                step: self.covariance.step,
            },
        };
        let json = serde_json::to_vec(&header)?;
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        write_values(w, &pair.online.flatten())?;
        write_values(w, &pair.momentum.flatten())?;
        write_values(w, self.covariance.c.as_slice())?;
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)
            .map_err(|_| Error::Format("file too short for a checkpoint".into()))?;
        if &magic != MAGIC {
            return Err(Error::Format("not a checkpoint (bad magic)".into()));
        }
        let mut word = [0u8; 4];
        r.read_exact(&mut word)?;
        let version = u32::from_le_bytes(word);
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut json = vec![0u8; len];
        r.read_exact(&mut json)
            .map_err(|_| Error::Format("truncated checkpoint header".into()))?;
        let header: Header = serde_json::from_slice(&json)?;
        header.arch.validate()?;

        let expected = header.arch.layout();
        let listed: Vec<(String, usize, usize)> =
            header.slices.iter().map(|s| (s.name.clone(), s.rows, s.cols)).collect();
        if expected != listed {
            return Err(Error::Layout("slice table does not match the architecture".into()));
        }
        let count: usize = listed.iter().map(|(_, r, c)| r * c).sum();
        let read_params = |r: &mut dyn Read| -> Result<Parameters> {
            let mut values = read_values(&mut &mut *r, count)?.into_iter();
            let slices = listed
                .iter()
                .map(|(name, rows, cols)| {
                    let data: Vec<f64> = values.by_ref().take(rows * cols).collect();
                    Ok(Slice {
                        name: name.clone(),
                        value: Matrix::from_vec(*rows, *cols, data)?,
                    })
                })
                .collect::<Result<_>>()?;
            Ok(Parameters { slices })
        };
        let online = read_params(r)?;
        let momentum = read_params(r)?;
        let cov = &header.covariance;
        if cov.dim != header.arch.embed_dim {
            return Err(Error::Layout("covariance dim differs from embed_dim".into()));
        }
        let c = Matrix::from_vec(cov.dim, cov.dim, read_values(r, cov.dim * cov.dim)?)?;
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint payload".into()));
        }
        Ok(Self {
            pair: EncoderPair {
                online,
                momentum,
                arch: header.arch,
            },
            covariance: CovarianceState {
                beta: cov.beta,
                c,
                step: cov.step,
            },
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path).map_err(Error::file(path))?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_from(&mut BufReader::new(File::open(path).map_err(Error::file(path))?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::random_unit_rows;

    fn sample() -> Checkpoint {
        let arch = ArchitectureConfig {
            input_dim: 8,
            encoder_hidden_dims: vec![6],
            repr_dim: 5,
            projector_hidden_dim: 4,
            embed_dim: 3,
        };
        let mut pair = EncoderPair::init(&arch, 1).unwrap();
        pair.momentum = Parameters::init(&arch, 2).unwrap();
        let mut covariance = CovarianceState::new(3, 0.9).unwrap();
        covariance.update(&random_unit_rows(4, 3, 3)).unwrap();
        Checkpoint { pair, covariance }
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let ck = sample();
        let mut buf = Vec::new();
        ck.write_to(&mut buf).unwrap();
        let back = Checkpoint::read_from(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ck);
        let bits = |p: &Parameters| p.flatten().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&back.pair.online), bits(&ck.pair.online));
        assert_eq!(bits(&back.pair.momentum), bits(&ck.pair.momentum));
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let mut buf = Vec::new();
        sample().write_to(&mut buf).unwrap();
        assert!(matches!(Checkpoint::read_from(&mut &buf[..buf.len() - 3]), Err(Error::Format(_))));
        let mut extra = buf.clone();
        extra.push(0);
        assert!(matches!(Checkpoint::read_from(&mut extra.as_slice()), Err(Error::Format(_))));
        let mut bad = buf.clone();
        bad[0] = b'X';
        assert!(matches!(Checkpoint::read_from(&mut bad.as_slice()), Err(Error::Format(_))));
    }
}
