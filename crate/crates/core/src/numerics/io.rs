//! Matrix persistence: headerless CSV and the `DDMX` binary layout
//! (`b"DDMX"`, u32 rows, u32 cols, little-endian f64 payload).

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;

pub const MAGIC: &[u8; 4] = b"DDMX";

pub fn write_csv<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    for row in m.iter_rows() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(","))?;
    }
    Ok(())
}

pub fn to_csv_string(m: &Matrix) -> String {
    let mut buf = Vec::new();
    write_csv(m, &mut buf).expect("writing to a Vec cannot fail");
    String::from_utf8(buf).expect("csv is ascii")
}

pub fn read_csv(text: &str) -> Result<Matrix> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0u64;
    for line in text.lines() {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let row = trimmed
                .split(',')
                .map(|cell| {
                    cell.trim()
                        .parse::<f64>()
                        .map_err(|e| Error::format(offset, format!("bad number {cell:?}: {e}")))
                })
                .collect::<Result<Vec<f64>>>()?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(Error::format(offset, "ragged csv row"));
                }
            }
            rows.push(row);
        }
        offset += line.len() as u64 + 1;
    }
    if rows.is_empty() {
        return Ok(Matrix::zeros(0, 0));
    }
    Matrix::from_rows(&rows)
}

pub fn write_binary<W: Write>(m: &Matrix, mut w: W) -> Result<()> {
    let rows = u32::try_from(m.rows()).map_err(|_| Error::input("too many rows for DDMX"))?;
    let cols = u32::try_from(m.cols()).map_err(|_| Error::input("too many cols for DDMX"))?;
    w.write_all(MAGIC)?;
    w.write_all(&rows.to_le_bytes())?;
    w.write_all(&cols.to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn to_binary(m: &Matrix) -> Vec<u8> {
    let mut buf = Vec::with_capacity(12 + 8 * m.as_slice().len());
    write_binary(m, &mut buf).expect("writing to a Vec cannot fail");
    buf
}

/// Reads one `DDMX` record from the front of `bytes`; returns the matrix and the
/// number of bytes consumed. `base` is added to offsets in error messages.
pub fn decode_binary(bytes: &[u8], base: u64) -> Result<(Matrix, usize)> {
    if bytes.len() < 12 {
        return Err(Error::format(base + bytes.len() as u64, "truncated DDMX header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(Error::format(base, "missing DDMX magic"));
    }
    let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let cols = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let count = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::format(base + 4, "DDMX dimensions overflow"))?;
    let need = 12 + count * 8;
    if bytes.len() < need {
        return Err(Error::format(
            base + bytes.len() as u64,
            format!("truncated DDMX payload: need {need} bytes, have {}", bytes.len()),
        ));
    }
    let data: Vec<f64> = bytes[12..need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    let m = Matrix::from_vec(rows, cols, data).map_err(|e| Error::format(base + 12, e.to_string()))?;
    Ok((m, need))
}

pub fn read_binary<R: Read>(mut r: R) -> Result<Matrix> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    let (m, used) = decode_binary(&bytes, 0)?;
    if used != bytes.len() {
        return Err(Error::format(used as u64, "trailing bytes after DDMX record"));
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn csv_and_binary_round_trip(rows in 1usize..5, cols in 1usize..5, seed in any::<u64>()) {
            let mut rng = crate::numerics::RngStream::new(seed);
            let m = Matrix::from_fn(rows, cols, |_, _| rng.normal() * 1e3);
            prop_assert_eq!(read_csv(&to_csv_string(&m)).unwrap(), m.clone());
            prop_assert_eq!(read_binary(&to_binary(&m)[..]).unwrap(), m);
        }
    }

    #[test]
    fn binary_layout_is_fixed() {
        let m = Matrix::from_rows(&[[1.0, -2.5]]).unwrap();
        let bytes = to_binary(&m);
        assert_eq!(&bytes[..4], b"DDMX");
        assert_eq!(&bytes[4..12], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(&bytes[12..20], &1.0f64.to_le_bytes());
        assert_eq!(bytes.len(), 28);
    }

    #[test]
    fn truncated_binary_reports_offset() {
        let m = Matrix::zeros(2, 2);
        let bytes = to_binary(&m);
        match read_binary(&bytes[..20]) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 20),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn csv_rejects_garbage() {
        assert!(matches!(read_csv("1,2\n3,x\n"), Err(Error::Format { offset: 4, .. })));
        assert!(matches!(read_csv("1,2\n3\n"), Err(Error::Format { .. })));
    }
}
