use std::fs::File;
use std::io::Read;
use std::path::Path;

use flate2::read::GzDecoder;

use crate::numerics::Tensor;

use super::DataError;

const UBYTE: u8 = 0x08;

/// `00 00 <type> <rank>` followed by `rank` big-endian u32 sizes.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxHeader {
    pub magic: [u8; 4],
    pub dims: Vec<u32>,
}

impl IdxHeader {
    pub fn rank(&self) -> u8 {
        self.magic[3]
    }

    pub fn payload_len(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }

    fn byte_len(&self) -> usize {
        4 + 4 * self.dims.len()
    }
}

/// Unsigned-byte array read from an IDX container.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxArray {
    pub header: IdxHeader,
    pub data: Vec<u8>,
}

impl IdxArray {
    pub fn shape(&self) -> Vec<usize> {
        self.header.dims.iter().map(|&d| d as usize).collect()
    }

    /// Raw byte values as `f64`, in the declared shape.
    pub fn to_tensor(&self) -> Tensor {
        let data = self.data.iter().map(|&b| f64::from(b)).collect();
        Tensor::new(self.shape(), data).expect("payload length checked on parse")
    }
}

/// Parses an unsigned-byte IDX file of rank 1 (labels) or 3 (images).
pub fn parse_idx(bytes: &[u8]) -> Result<IdxArray, DataError> {
    if bytes.len() < 4 {
        return Err(DataError::TruncatedHeader {
            expected: 4,
            actual: bytes.len(),
        });
    }
    let magic = [bytes[0], bytes[1], bytes[2], bytes[3]];
    if magic[0] != 0 || magic[1] != 0 || magic[2] != UBYTE {
        return Err(DataError::BadMagic(magic));
    }
    let rank = magic[3];
    if rank != 1 && rank != 3 {
        return Err(DataError::RankMismatch {
            expected: if rank < 2 { 1 } else { 3 },
            actual: rank,
        });
    }
    let header_len = 4 + 4 * rank as usize;
    if bytes.len() < header_len {
        return Err(DataError::TruncatedHeader {
            expected: header_len,
            actual: bytes.len(),
        });
    }
    let dims = bytes[4..header_len]
        .chunks_exact(4)
        .map(|c| u32::from_be_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    let header = IdxHeader { magic, dims };
    let expected = header.payload_len();
    let actual = bytes.len() - header_len;
    if actual != expected {
        return Err(DataError::PayloadLength { expected, actual });
    }
    Ok(IdxArray {
        header,
        data: bytes[header_len..].to_vec(),
    })
}

/// [`parse_idx`] that also requires a specific rank.
pub fn parse_idx_rank(bytes: &[u8], rank: u8) -> Result<IdxArray, DataError> {
    let arr = parse_idx(bytes)?;
    if arr.header.rank() != rank {
        return Err(DataError::RankMismatch {
            expected: rank,
            actual: arr.header.rank(),
        });
    }
    Ok(arr)
}

/// Serializes an unsigned-byte array.
pub fn write_idx(dims: &[u32], data: &[u8]) -> Result<Vec<u8>, DataError> {
    let header = IdxHeader {
        magic: [0, 0, UBYTE, dims.len() as u8],
        dims: dims.to_vec(),
    };
    if data.len() != header.payload_len() {
        return Err(DataError::PayloadLength {
            expected: header.payload_len(),
            actual: data.len(),
        });
    }
    let mut out = Vec::with_capacity(header.byte_len() + data.len());
    out.extend_from_slice(&header.magic);
    for d in dims {
        out.extend_from_slice(&d.to_be_bytes());
    }
    out.extend_from_slice(data);
    Ok(out)
}

/// Reads an IDX file, transparently gunzipping `.gz` paths.
pub fn load_idx(path: &Path) -> Result<IdxArray, DataError> {
    let mut file = File::open(path).map_err(|e| DataError::io(path, e))?;
    let mut bytes = Vec::new();
    let gz = path.extension().is_some_and(|e| e == "gz");
    let res = if gz {
        GzDecoder::new(file).read_to_end(&mut bytes)
    } else {
        file.read_to_end(&mut bytes)
    };
    res.map_err(|e| DataError::io(path, e))?;
    parse_idx(&bytes)
}
