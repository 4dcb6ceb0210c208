//! Versioned binary model files: an 8-byte magic, a little-endian `u32`
//! format version, then a bincode body.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub fn save<T: Serialize>(path: &Path, magic: &[u8; 8], version: u32, value: &T) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    write_to(&mut w, magic, version, value).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_to<T: Serialize>(w: &mut impl Write, magic: &[u8; 8], version: u32, value: &T) -> Result<()> {
    let io = |e| Error::io("<stream>", e);
    w.write_all(magic).map_err(io)?;
    w.write_all(&version.to_le_bytes()).map_err(io)?;
    bincode::serialize_into(w, value).map_err(|e| Error::Format(e.to_string()))
}

pub fn load<T: DeserializeOwned>(path: &Path, magic: &[u8; 8], version: u32) -> Result<T> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_from(&mut BufReader::new(file), magic, version)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn read_from<T: DeserializeOwned>(r: &mut impl Read, magic: &[u8; 8], version: u32) -> Result<T> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)
        .map_err(|_| Error::Format("truncated header".into()))?;
    if &head[..8] != magic {
        return Err(Error::Format(format!(
            "expected magic {:?}",
            String::from_utf8_lossy(magic)
        )));
    }
    let found = u32::from_le_bytes(head[8..12].try_into().unwrap());
    if found != version {
        return Err(Error::Format(format!(
            "format version {found}, this build reads {version}"
        )));
    }
    bincode::deserialize_from(r).map_err(|e| Error::Format(e.to_string()))
}

/// Reads only the magic of a file, to dispatch on model kind.
pub fn peek_magic(path: &Path) -> Result<[u8; 8]> {
    let mut f = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut m = [0u8; 8];
    f.read_exact(&mut m)
        .map_err(|_| Error::Format(format!("{}: truncated header", path.display())))?;
    Ok(m)
}
