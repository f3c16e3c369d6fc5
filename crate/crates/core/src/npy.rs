//! NPY v1.0 reading and writing, restricted to little-endian `float32` in C order.
//!
//! Format reference: <https://numpy.org/doc/stable/reference/generated/numpy.lib.format.html>

use std::io::{self, Read, Write};

pub const MAGIC: &[u8; 6] = b"\x93NUMPY";
const ALIGN: usize = 64;
pub const F32_DESCR: &str = "<f4";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NpyHeader {
    pub descr: String,
    pub fortran_order: bool,
    pub shape: Vec<usize>,
    /// Bytes before the raster: magic, version, length field and dict.
    pub data_offset: usize,
}

impl NpyHeader {
    pub fn num_elements(&self) -> usize {
        self.shape.iter().product()
    }
}

fn invalid(msg: impl Into<String>) -> io::Error {
    io::Error::new(io::ErrorKind::InvalidData, msg.into())
}

/// Reads and parses the header, leaving `reader` at the first data byte.
pub fn read_header<R: Read>(reader: &mut R) -> io::Result<NpyHeader> {
    let mut prefix = [0u8; 10];
    reader.read_exact(&mut prefix)?;
    if &prefix[..6] != MAGIC {
        return Err(invalid("missing NPY magic"));
    }
    let (major, minor) = (prefix[6], prefix[7]);
    if (major, minor) != (1, 0) {
        return Err(invalid(format!(
            "unsupported NPY version {major}.{minor}, expected 1.0"
        )));
    }
    let dict_len = u16::from_le_bytes([prefix[8], prefix[9]]) as usize;
    let mut dict = vec![0u8; dict_len];
    reader.read_exact(&mut dict)?;
    let dict = std::str::from_utf8(&dict).map_err(|_| invalid("header is not ASCII"))?;

    let descr = dict_value(dict, "descr")?
        .trim_matches(|c| c == '\'' || c == '"')
        .to_string();
    let fortran_order = match dict_value(dict, "fortran_order")? {
        "False" => false,
        "True" => true,
        other => return Err(invalid(format!("bad fortran_order {other:?}"))),
    };
    let shape_text = dict_value(dict, "shape")?;
    let shape = shape_text
        .trim_start_matches('(')
        .trim_end_matches(')')
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|_| invalid(format!("bad shape {shape_text}"))))
        .collect::<io::Result<Vec<_>>>()?;
    Ok(NpyHeader {
        descr,
        fortran_order,
        shape,
        data_offset: 10 + dict_len,
    })
}

/// Extracts the raw text of `key`'s value from a Python dict literal.
fn dict_value<'a>(dict: &'a str, key: &str) -> io::Result<&'a str> {
    let needle_single = format!("'{key}'");
    let needle_double = format!("\"{key}\"");
    let start = dict
        .find(&needle_single)
        .map(|i| i + needle_single.len())
        .or_else(|| dict.find(&needle_double).map(|i| i + needle_double.len()))
        .ok_or_else(|| invalid(format!("header lacks {key:?}")))?;
    let rest = dict[start..].trim_start();
    let rest = rest
        .strip_prefix(':')
        .ok_or_else(|| invalid(format!("malformed entry for {key:?}")))?
        .trim_start();
    let end = if rest.starts_with('(') {
        rest.find(')').map(|i| i + 1)
    } else {
        rest.find([',', '}'])
    }
    .ok_or_else(|| invalid(format!("unterminated value for {key:?}")))?;
    Ok(rest[..end].trim())
}

/// Checks that a parsed header describes a C-order `<f4` array.
pub fn require_f32(header: &NpyHeader) -> io::Result<()> {
    if header.descr != F32_DESCR {
        return Err(invalid(format!(
            "dtype {:?}: expected little-endian float32 ('{F32_DESCR}')",
            header.descr
        )));
    }
    if header.fortran_order {
        return Err(invalid("Fortran-order arrays are not supported"));
    }
    Ok(())
}

pub fn read_f32<R: Read>(reader: &mut R) -> io::Result<(Vec<usize>, Vec<f32>)> {
    let header = read_header(reader)?;
    require_f32(&header)?;
    let n = header.num_elements();
    let mut bytes = vec![0u8; n * 4];
    reader
        .read_exact(&mut bytes)
        .map_err(|_| invalid(format!("raster truncated: expected {n} float32 values")))?;
    let mut trailing = [0u8; 1];
    if reader.read(&mut trailing)? != 0 {
        return Err(invalid("trailing bytes after raster"));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok((header.shape, data))
}

fn header_bytes(shape: &[usize]) -> Vec<u8> {
    let shape_text = match shape {
        [single] => format!("({single},)"),
        dims => format!(
            "({})",
            dims.iter().map(|d| d.to_string()).collect::<Vec<_>>().join(", ")
        ),
    };
    let mut dict = format!("{{'descr': '{F32_DESCR}', 'fortran_order': False, 'shape': {shape_text}, }}");
    let unpadded = 10 + dict.len() + 1;
    let pad = (ALIGN - unpadded % ALIGN) % ALIGN;
    dict.extend(std::iter::repeat_n(' ', pad));
    dict.push('\n');

    let mut out = Vec::with_capacity(10 + dict.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&[1, 0]);
    out.extend_from_slice(&(dict.len() as u16).to_le_bytes());
    out.extend_from_slice(dict.as_bytes());
    out
}

pub fn write_f32<W: Write>(writer: &mut W, shape: &[usize], data: &[f32]) -> io::Result<()> {
    if shape.iter().product::<usize>() != data.len() {
        return Err(io::Error::new(
            io::ErrorKind::InvalidInput,
            "shape does not match data length",
        ));
    }
    writer.write_all(&header_bytes(shape))?;
    for v in data {
        writer.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_is_64_byte_aligned_and_numpy_shaped() {
        let h = header_bytes(&[2, 3, 4]);
        assert_eq!(h.len() % 64, 0);
        let text = std::str::from_utf8(&h[10..]).unwrap();
        assert!(text.starts_with("{'descr': '<f4', 'fortran_order': False, 'shape': (2, 3, 4), }"));
        assert!(text.ends_with('\n'));
        assert!(header_bytes(&[5])[10..].starts_with(b"{'descr': '<f4', 'fortran_order': False, 'shape': (5,), }"));
    }

    #[test]
    fn parses_numpy_written_header() {
        // header as emitted by numpy.save for np.zeros((2, 1, 3), '<f4')
        let mut bytes = header_bytes(&[2, 1, 3]);
        bytes.extend(std::iter::repeat_n(0u8, 24));
        let (shape, data) = read_f32(&mut bytes.as_slice()).unwrap();
        assert_eq!(shape, vec![2, 1, 3]);
        assert_eq!(data, vec![0.0; 6]);
    }

    #[test]
    fn rejects_wrong_dtype_and_truncation() {
        let mut buf = Vec::new();
        write_f32(&mut buf, &[2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut wrong = buf.clone();
        let pos = wrong.windows(3).position(|w| w == b"<f4").unwrap();
        wrong[pos + 2] = b'8';
        let err = read_f32(&mut wrong.as_slice()).unwrap_err();
        assert!(err.to_string().contains("little-endian float32"), "{err}");

        let truncated = &buf[..buf.len() - 2];
        assert!(read_f32(&mut &truncated[..]).is_err());
    }

    proptest! {
        #[test]
        fn round_trips_bitwise(shape in prop::collection::vec(1usize..5, 1..4), seed in any::<u32>()) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = (0..n).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x7f7f_ffff)).collect();
            let mut buf = Vec::new();
            write_f32(&mut buf, &shape, &data).unwrap();
            let (s, d) = read_f32(&mut buf.as_slice()).unwrap();
            prop_assert_eq!(s, shape);
            prop_assert_eq!(d.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                            data.iter().map(|v| v.to_bits()).collect::<Vec<_>>());
        }
    }
}
