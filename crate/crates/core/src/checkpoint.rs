//! Checkpoint serialization: magic "FLCK", a format version, then a table of
//! (name, dtype, shape, little-endian f32 payload) entries. Round-trips are
//! byte-exact: loading and re-saving a file reproduces it bit for bit.

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::tensor::Array;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"FLCK";
const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

/// Write every parameter of a store, in registration order.
pub fn save_store(path: &Path, store: &ParamStore<f32>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(store.len() as u32).to_le_bytes())?;
    for (name, value) in store.iter() {
        write_entry(&mut w, name, value)?;
    }
    w.flush()?;
    Ok(())
}

fn write_entry<W: Write>(w: &mut W, name: &str, value: &Array<f32>) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    w.write_all(&[DTYPE_F32])?;
    w.write_all(&(value.shape().len() as u32).to_le_bytes())?;
    for &d in value.shape() {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for &v in value.data() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Read all entries of a checkpoint in file order.
pub fn load_entries(path: &Path) -> Result<Vec<(String, Array<f32>)>> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: bad magic {:?}",
            path.display(),
            magic
        )));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {}",
            path.display(),
            version
        )));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        entries.push(read_entry(&mut r, path)?);
    }
    Ok(entries)
}

fn read_entry<R: Read>(r: &mut R, path: &Path) -> Result<(String, Array<f32>)> {
    let name_len = read_u32(r)? as usize;
    if name_len > 4096 {
        return Err(Error::Checkpoint(format!("{}: name length {}", path.display(), name_len)));
    }
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|e| Error::Checkpoint(format!("{}: non-utf8 name: {e}", path.display())))?;
    let mut dtype = [0u8; 1];
    r.read_exact(&mut dtype)?;
    if dtype[0] != DTYPE_F32 {
        return Err(Error::Checkpoint(format!(
            "{}: entry {name:?} has unsupported dtype {}",
            path.display(),
            dtype[0]
        )));
    }
    let rank = read_u32(r)? as usize;
    if rank > 8 {
        return Err(Error::Checkpoint(format!("{}: entry {name:?} rank {}", path.display(), rank)));
    }
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(read_u32(r)? as usize);
    }
    let numel: usize = shape.iter().product();
    let mut data = vec![0f32; numel];
    let mut buf = [0u8; 4];
    for v in data.iter_mut() {
        r.read_exact(&mut buf)?;
        *v = f32::from_le_bytes(buf);
    }
    Ok((name, Array::from_vec(&shape, data)?))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

/// Load a checkpoint into an existing (unfrozen) store. The file must cover
/// exactly the store's parameter names with matching shapes.
pub fn load_into(path: &Path, store: &mut ParamStore<f32>) -> Result<()> {
    let entries = load_entries(path)?;
    if entries.len() != store.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} entries for a store of {} parameters",
            path.display(),
            entries.len(),
            store.len()
        )));
    }
    for (name, value) in entries {
        if store.get(&name).is_none() {
            return Err(Error::Checkpoint(format!(
                "{}: unexpected parameter {name:?}",
                path.display()
            )));
        }
        store.set(&name, value)?;
    }
    Ok(())
}
