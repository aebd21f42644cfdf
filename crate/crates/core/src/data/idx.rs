//! Big-endian IDX files as used by MNIST: a 4-byte magic `00 00 08 NN`
//! (`08` = unsigned bytes, `NN` = rank), `NN` u32 extents, then the payload.

use std::path::Path;

use crate::error::{Error, Result};

pub const LABEL_MAGIC: u32 = 0x0000_0801;
pub const IMAGE_MAGIC: u32 = 0x0000_0803;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub dims: Vec<usize>,
    pub data: Vec<u8>,
}

impl IdxArray {
    /// Payload scaled from bytes to `[0, 1]`.
    pub fn scaled(&self) -> Vec<f64> {
        self.data.iter().map(|&b| f64::from(b) / 255.0).collect()
    }

    /// Number of items along the leading axis.
    pub fn count(&self) -> usize {
        self.dims.first().copied().unwrap_or(0)
    }

    /// Elements per item.
    pub fn item_len(&self) -> usize {
        self.dims.iter().skip(1).product()
    }
}

pub fn load_idx(path: &Path) -> Result<IdxArray> {
    let bytes = std::fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingData(path.to_path_buf())
        } else {
            Error::Io(e)
        }
    })?;
    parse_idx(&bytes)
}

pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray> {
    if bytes.len() < 4 {
        return Err(Error::Truncated {
            what: "idx header".into(),
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = u32::from_be_bytes(bytes[..4].try_into().expect("4 bytes"));
    let rank = match magic {
        LABEL_MAGIC => 1,
        IMAGE_MAGIC => 3,
        other => return Err(Error::Format(format!("unsupported idx magic {other:#010x}"))),
    };
    let header = 4 + 4 * rank;
    if bytes.len() < header {
        return Err(Error::Truncated {
            what: "idx header".into(),
            expected: header,
            actual: bytes.len(),
        });
    }
    let mut dims = Vec::with_capacity(rank);
    let mut total: usize = 1;
    for i in 0..rank {
        let off = 4 + 4 * i;
        let d = u32::from_be_bytes(bytes[off..off + 4].try_into().expect("4 bytes")) as usize;
        total = total
            .checked_mul(d)
            .ok_or_else(|| Error::Format("idx dimensions overflow".into()))?;
        dims.push(d);
    }
    let payload = &bytes[header..];
    if payload.len() < total {
        return Err(Error::Truncated {
            what: "idx payload".into(),
            expected: total,
            actual: payload.len(),
        });
    }
    Ok(IdxArray {
        dims,
        data: payload[..total].to_vec(),
    })
}

/// Serialises an array back to IDX bytes.
pub fn encode_idx(array: &IdxArray) -> Result<Vec<u8>> {
    let magic = match array.dims.len() {
        1 => LABEL_MAGIC,
        3 => IMAGE_MAGIC,
        r => return Err(Error::invalid(format!("idx rank {r} unsupported"))),
    };
    let mut out = magic.to_be_bytes().to_vec();
    for &d in &array.dims {
        let d = u32::try_from(d).map_err(|_| Error::invalid("idx extent exceeds u32"))?;
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(&array.data);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decodes_label_file() {
        let bytes = [0, 0, 8, 1, 0, 0, 0, 3, 5, 0, 9];
        let a = parse_idx(&bytes).unwrap();
        assert_eq!(a.dims, vec![3]);
        assert_eq!(a.data, vec![5, 0, 9]);
    }

    #[test]
    fn magic_checks() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2];
        img.extend_from_slice(&[0, 255, 1, 2]);
        assert_eq!(parse_idx(&img).unwrap().dims, vec![1, 2, 2]);
        img[3] = 4;
        assert!(matches!(parse_idx(&img), Err(Error::Format(_))));
    }

    #[test]
    fn truncation_names_counts() {
        let mut img = vec![0, 0, 8, 3, 0, 0, 0, 2, 0, 0, 0, 28, 0, 0, 0, 28];
        img.extend(std::iter::repeat(0).take(1000));
        match parse_idx(&img) {
            Err(Error::Truncated { expected, actual, .. }) => {
                assert_eq!(expected, 2 * 28 * 28);
                assert_eq!(actual, 1000);
            }
            other => panic!("expected truncation, got {other:?}"),
        }
    }

    #[test]
    fn encode_round_trip() {
        let a = IdxArray {
            dims: vec![2, 1, 3],
            data: vec![1, 2, 3, 4, 5, 6],
        };
        assert_eq!(parse_idx(&encode_idx(&a).unwrap()).unwrap(), a);
    }
}
