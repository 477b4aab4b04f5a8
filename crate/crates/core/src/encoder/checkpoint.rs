//! Checkpoint container: a sequence of (u32 name length, UTF-8 name,
//! RDT-framed tensor) records. Weight entries use the parameter-store
//! names; metadata entries are prefixed with `__` and skipped when loading
//! weights.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::rdt::{read_rdt, write_rdt, RdtTensor};
use crate::tensor::Float;

pub fn save_checkpoint<E: Float, P: AsRef<Path>>(
    path: P,
    store: &ParamStore<E>,
    extras: &[(String, RdtTensor)],
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for id in store.ids() {
        write_entry(&mut w, store.name(id), &RdtTensor::from_tensor(store.tensor(id)))?;
    }
    for (name, t) in extras {
        write_entry(&mut w, name, t)?;
    }
    w.flush()?;
    Ok(())
}

fn write_entry<W: Write>(w: &mut W, name: &str, t: &RdtTensor) -> Result<()> {
    let bytes = name.as_bytes();
    w.write_all(&(bytes.len() as u32).to_le_bytes())?;
    w.write_all(bytes)?;
    write_rdt(w, t)
}

pub fn read_checkpoint<P: AsRef<Path>>(path: P) -> Result<Vec<(String, RdtTensor)>> {
    let mut r = BufReader::new(File::open(&path)?);
    let mut entries = Vec::new();
    loop {
        let mut len_buf = [0u8; 4];
        match r.read(&mut len_buf)? {
            0 => break,
            n if n < 4 => {
                r.read_exact(&mut len_buf[n..])
                    .map_err(|_| Error::Truncated { expected: 4, actual: n })?;
            }
            _ => {}
        }
        let len = u32::from_le_bytes(len_buf) as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)
            .map_err(|_| Error::Checkpoint("truncated entry name".into()))?;
        let name = String::from_utf8(name)
            .map_err(|_| Error::Checkpoint("entry name is not UTF-8".into()))?;
        let tensor = read_rdt(&mut r)?;
        entries.push((name, tensor));
    }
    Ok(entries)
}

pub fn find_entry<'a>(entries: &'a [(String, RdtTensor)], name: &str) -> Option<&'a RdtTensor> {
    entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
}

/// Copies every checkpoint weight whose name exists in the store, rejecting
/// shape mismatches. Every store entry under one of `required_prefixes`
/// must be present in the checkpoint.
pub fn load_matching<E: Float>(
    store: &mut ParamStore<E>,
    entries: &[(String, RdtTensor)],
    required_prefixes: &[&str],
) -> Result<usize> {
    let mut loaded = 0usize;
    for (name, tensor) in entries {
        if name.starts_with("__") {
            continue;
        }
        let Some(id) = store.find(name) else { continue };
        let expect = store.tensor(id).dims().to_vec();
        if tensor.dims() != expect.as_slice() {
            return Err(Error::Checkpoint(format!(
                "'{name}': checkpoint shape {:?} does not match config shape {:?}",
                tensor.dims(),
                expect
            )));
        }
        *store.tensor_mut(id) = tensor.to_tensor()?;
        loaded += 1;
    }
    for id in store.ids().collect::<Vec<_>>() {
        let name = store.name(id).to_string();
        if required_prefixes.iter().any(|p| name.starts_with(p))
            && find_entry(entries, &name).is_none()
        {
            return Err(Error::Checkpoint(format!(
                "checkpoint is missing required entry '{name}'"
            )));
        }
    }
    Ok(loaded)
}

/// Store-name prefixes that make up the encoder (as opposed to task heads).
pub const ENCODER_PREFIXES: [&str; 3] = ["stem.", "down", "stage"];
