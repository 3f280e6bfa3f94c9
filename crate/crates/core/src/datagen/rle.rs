//! Row-major run-length codec for binary masks.
//!
//! Runs alternate starting with a run of zeros, so a mask that starts with a
//! set pixel begins with `0`. Runs are comma-separated decimal integers.

use crate::error::{Error, Result};
use crate::mask::BinaryMask;

pub fn rle_encode(mask: &BinaryMask) -> String {
    let mut runs = Vec::new();
    let mut current = false;
    let mut len = 0usize;
    for &b in mask.bits() {
        if b != current {
            runs.push(len);
            current = b;
            len = 0;
        }
        len += 1;
    }
    runs.push(len);
    runs.iter().map(usize::to_string).collect::<Vec<_>>().join(",")
}

pub fn rle_decode(s: &str, height: usize, width: usize) -> Result<BinaryMask> {
    let total = height * width;
    let mut bits = Vec::with_capacity(total);
    let mut value = false;
    let mut offset = 0;
    for (i, field) in s.split(',').enumerate() {
        let parse_err = |message: String| Error::Parse { offset, message };
        if field.is_empty() || !field.bytes().all(|b| b.is_ascii_digit()) {
            return Err(parse_err(format!("expected a run length, found {field:?}")));
        }
        let run: usize = field.parse().map_err(|e| parse_err(format!("{e}")))?;
        if run == 0 && i > 0 {
            return Err(parse_err("zero-length run after the first".into()));
        }
        if bits.len() + run > total {
            return Err(parse_err(format!("runs exceed the {height}x{width} extent")));
        }
        bits.extend(std::iter::repeat_n(value, run));
        value = !value;
        offset += field.len() + 1;
    }
    if bits.len() != total {
        return Err(Error::Parse { offset: s.len(), message: format!("runs cover {} of {total} pixels", bits.len()) });
    }
    BinaryMask::new(height, width, bits)
}
