//! `SCFD` dictionary files.
//!
//! ```text
//! magic   b"SCFD"
//! version u32 LE (= 1)
//! n̄       u32 LE
//! L       u32 LE
//! atoms   n̄·L f32 LE, column-major
//! l1      L f32 LE
//! ```

use std::io::{Read, Write};

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};

use super::Dictionary;
use crate::error::{Error, Result};

pub const DICT_MAGIC: &[u8; 4] = b"SCFD";
pub const DICT_VERSION: u32 = 1;

/// Writes the dictionary with atoms rounded to `f32`. The stored ℓ1 norms
/// are those of the rounded atoms.
pub fn write_dictionary<W: Write>(dict: &Dictionary, mut w: W) -> Result<()> {
    let rounded: Vec<f32> = dict.columns().iter().map(|&v| v as f32).collect();
    w.write_all(DICT_MAGIC)?;
    w.write_u32::<LittleEndian>(DICT_VERSION)?;
    w.write_u32::<LittleEndian>(dict.patch_dim() as u32)?;
    w.write_u32::<LittleEndian>(dict.num_atoms() as u32)?;
    for &v in &rounded {
        w.write_f32::<LittleEndian>(v)?;
    }
    for col in rounded.chunks(dict.patch_dim()) {
        let l1: f64 = col.iter().map(|&v| (v as f64).abs()).sum();
        w.write_f32::<LittleEndian>(l1 as f32)?;
    }
    Ok(())
}

fn format_err(offset: u64, msg: impl Into<String>) -> Error {
    Error::Format {
        offset,
        msg: msg.into(),
    }
}

pub fn read_dictionary<R: Read>(mut r: R) -> Result<Dictionary> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| format_err(0, "truncated header"))?;
    if &magic != DICT_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}")));
    }
    let header = |r: &mut R, at: u64| {
        r.read_u32::<LittleEndian>()
            .map_err(|_| format_err(at, "truncated header"))
    };
    let version = header(&mut r, 4)?;
    if version != DICT_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let dim = header(&mut r, 8)? as usize;
    let atoms = header(&mut r, 12)? as usize;
    if dim == 0 || atoms == 0 {
        return Err(format_err(8, "empty dictionary"));
    }
    let mut offset = 16u64;
    let mut read_f32s = |r: &mut R, count: usize| -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(count);
        for _ in 0..count {
            let v = r
                .read_f32::<LittleEndian>()
                .map_err(|_| format_err(offset, "truncated payload"))?;
            offset += 4;
            out.push(v as f64);
        }
        Ok(out)
    };
    let columns = read_f32s(&mut r, dim * atoms)?;
    let stored_l1 = read_f32s(&mut r, atoms)?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(format_err(16 + 4 * (dim * atoms + atoms) as u64, "trailing bytes"));
    }
    // f32 rounding can push the norm a few ulps off one; renormalize so the
    // unit-norm invariant holds for the loaded atoms.
    let dict = Dictionary::from_columns_normalized(dim, columns)?;
    for (l, (&got, &want)) in dict.l1_norms().iter().zip(&stored_l1).enumerate() {
        if (got - want).abs() > 1e-5 * want.max(1.0) {
            return Err(format_err(
                16 + 4 * (dim * atoms + l) as u64,
                format!("stored ℓ1 norm {want} of atom {l} disagrees with atoms ({got})"),
            ));
        }
    }
    Ok(dict)
}
