//! Binary posterior record, little-endian:
//!
//! ```text
//! u8   format version
//! u32  rank
//! u64  extent × rank
//! f64  mu × numel
//! f64  log_sigma × numel
//! ```

use std::io::{Read, Write};

use super::MeanFieldGaussian;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const POSTERIOR_FORMAT_VERSION: u8 = 1;

const MAX_RANK: u32 = 8;

pub fn write_posterior<W: Write>(w: &mut W, q: &MeanFieldGaussian) -> Result<()> {
    w.write_all(&[POSTERIOR_FORMAT_VERSION])?;
    w.write_all(&(q.shape().len() as u32).to_le_bytes())?;
    for &d in q.shape() {
        w.write_all(&(d as u64).to_le_bytes())?;
    }
    write_f64s(w, q.mu().data())?;
    write_f64s(w, q.log_sigma().data())?;
    Ok(())
}

pub fn read_posterior<R: Read>(r: &mut R) -> Result<MeanFieldGaussian> {
    let version = read_u8(r)?;
    if version != POSTERIOR_FORMAT_VERSION {
        return Err(Error::Format(format!(
            "posterior format version {version}, expected {POSTERIOR_FORMAT_VERSION}"
        )));
    }
    let rank = read_u32(r)?;
    if rank > MAX_RANK {
        return Err(Error::Format(format!("posterior rank {rank} exceeds {MAX_RANK}")));
    }
    let mut shape = Vec::with_capacity(rank as usize);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = usize::try_from(read_u64(r)?).map_err(|_| Error::Format("extent overflow".into()))?;
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::Format("posterior size overflow".into()))?;
        shape.push(d);
    }
    let mu = read_f64s(r, numel)?;
    let log_sigma = read_f64s(r, numel)?;
    MeanFieldGaussian::new(Tensor::new(shape.clone(), mu)?, Tensor::new(shape, log_sigma)?)
}

pub(crate) fn write_f64s<W: Write>(w: &mut W, xs: &[f64]) -> Result<()> {
    let mut buf = Vec::with_capacity(xs.len() * 8);
    for x in xs {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let bytes = n
        .checked_mul(8)
        .ok_or_else(|| Error::Format("buffer size overflow".into()))?;
    let mut buf = Vec::new();
    r.take(bytes as u64).read_to_end(&mut buf)?;
    if buf.len() != bytes {
        return Err(Error::Truncated {
            what: "f64 buffer".into(),
            expected: bytes,
            actual: buf.len(),
        });
    }
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}

pub(crate) fn read_u8<R: Read>(r: &mut R) -> Result<u8> {
    let mut b = [0u8; 1];
    r.read_exact(&mut b).map_err(truncated("u8"))?;
    Ok(b[0])
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(truncated("u32"))?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(truncated("u64"))?;
    Ok(u64::from_le_bytes(b))
}

fn truncated(what: &'static str) -> impl Fn(std::io::Error) -> Error {
    move |e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format(format!("unexpected end of record reading {what}"))
        } else {
            Error::Io(e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(
            rows in 0usize..5,
            cols in 1usize..5,
            seed in any::<u64>(),
        ) {
            use rand::SeedableRng;
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mu = Tensor::randn(&[rows, cols], &mut rng);
            let ls = Tensor::randn(&[rows, cols], &mut rng);
            let q = MeanFieldGaussian::new(mu, ls).unwrap();
            let mut buf = Vec::new();
            write_posterior(&mut buf, &q).unwrap();
            let back = read_posterior(&mut buf.as_slice()).unwrap();
            let mut again = Vec::new();
            write_posterior(&mut again, &back).unwrap();
            prop_assert_eq!(&buf, &again);
            prop_assert_eq!(back, q);
        }
    }

    #[test]
    fn special_values_survive() {
        let q = MeanFieldGaussian::new(
            Tensor::vector(vec![-0.0, f64::MIN_POSITIVE, 1e308]),
            Tensor::vector(vec![f64::NEG_INFINITY, 0.0, -745.0]),
        )
        .unwrap();
        let mut buf = Vec::new();
        write_posterior(&mut buf, &q).unwrap();
        let back = read_posterior(&mut buf.as_slice()).unwrap();
        assert_eq!(back.mu().data()[0].to_bits(), (-0.0f64).to_bits());
        assert_eq!(back, q);
    }

    #[test]
    fn rejects_bad_version_and_truncation() {
        let q = MeanFieldGaussian::new(Tensor::vector(vec![1.0, 2.0]), Tensor::vector(vec![0.0, 0.0])).unwrap();
        let mut buf = Vec::new();
        write_posterior(&mut buf, &q).unwrap();
        let mut bad = buf.clone();
        bad[0] = 9;
        assert!(matches!(read_posterior(&mut bad.as_slice()), Err(Error::Format(_))));
        let short = &buf[..buf.len() - 3];
        assert!(matches!(read_posterior(&mut &short[..]), Err(Error::Truncated { .. })));
    }
}
