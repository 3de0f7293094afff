//! Flat binary checkpoint format.
//!
//! Layout: the magic bytes `RATN1`, then for each tensor
//! `name_len: u32 LE`, the UTF-8 name, `rank: u32 LE`, each dimension as
//! `u32 LE`, and the row-major data as 32-bit little-endian floats. Tensors
//! repeat until end of file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};
use crate::model::CapsuleModel;

pub const MAGIC: &[u8; 5] = b"RATN1";

pub fn save(path: &Path, tensors: &[(String, ArrayD<f32>)]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    for (name, arr) in tensors {
        let bytes = name.as_bytes();
        w.write_all(&(bytes.len() as u32).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&(arr.ndim() as u32).to_le_bytes())?;
        for &d in arr.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        let contiguous = arr.as_standard_layout();
        for &v in contiguous.iter() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Vec<(String, ArrayD<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 5];
    r.read_exact(&mut magic)
        .map_err(|_| Error::Checkpoint(format!("{}: file too short for magic", path.display())))?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}, expected {:?} (\"RATN1\")",
            path.display(),
            magic,
            MAGIC
        )));
    }
    let mut tensors = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read_exact(&mut len_buf) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        }
        let name_len = u32::from_le_bytes(len_buf) as usize;
        let mut name_bytes = vec![0u8; name_len];
        r.read_exact(&mut name_bytes).map_err(|_| truncated(path))?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| Error::Checkpoint(format!("{}: tensor name is not UTF-8", path.display())))?;
        let mut rank_buf = [0u8; 4];
        r.read_exact(&mut rank_buf).map_err(|_| truncated(path))?;
        let rank = u32::from_le_bytes(rank_buf) as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut d = [0u8; 4];
            r.read_exact(&mut d).map_err(|_| truncated(path))?;
            dims.push(u32::from_le_bytes(d) as usize);
        }
        let count: usize = dims.iter().product();
        let mut data = vec![0f32; count];
        let mut buf = [0u8; 4];
        for slot in data.iter_mut() {
            r.read_exact(&mut buf).map_err(|_| truncated(path))?;
            *slot = f32::from_le_bytes(buf);
        }
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
        tensors.push((name, arr));
    }
    Ok(tensors)
}

fn truncated(path: &Path) -> Error {
    Error::Checkpoint(format!("{}: truncated checkpoint", path.display()))
}

impl CapsuleModel {
    pub fn save_checkpoint(&self, path: &Path) -> Result<()> {
        save(path, &self.named_tensors())
    }

    pub fn load_checkpoint(&mut self, path: &Path) -> Result<()> {
        let tensors = load(path)?;
        self.load_named(&tensors)
    }
}
