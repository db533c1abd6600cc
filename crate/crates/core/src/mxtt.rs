//! `MXTT` binary container: magic, three little-endian u32 dimensions, then a
//! row-major little-endian f32 payload.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MXTT";

pub fn write<W: Write>(mut w: W, dims: [usize; 3], data: &[f32]) -> Result<()> {
    let expected = dims.iter().product::<usize>();
    if data.len() != expected {
        return Err(Error::Shape(format!(
            "container dims {dims:?} need {expected} values, got {}",
            data.len()
        )));
    }
    w.write_all(MAGIC)?;
    for d in dims {
        let d = u32::try_from(d).map_err(|_| Error::Format(format!("dimension {d} exceeds u32")))?;
        w.write_all(&d.to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read<R: Read>(mut r: R) -> Result<([usize; 3], Vec<f32>)> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad magic {magic:?}")));
    }
    let mut dims = [0usize; 3];
    let mut buf = [0u8; 4];
    for d in &mut dims {
        r.read_exact(&mut buf)?;
        *d = u32::from_le_bytes(buf) as usize;
    }
    let n: usize = dims.iter().product();
    let mut bytes = vec![0u8; n * 4];
    r.read_exact(&mut bytes)?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after payload", rest.len())));
    }
    let data = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((dims, data))
}

pub fn save(path: &Path, dims: [usize; 3], data: &[f32]) -> Result<()> {
    write(BufWriter::new(File::create(path)?), dims, data)
}

pub fn load(path: &Path) -> Result<([usize; 3], Vec<f32>)> {
    read(BufReader::new(File::open(path)?))
}
