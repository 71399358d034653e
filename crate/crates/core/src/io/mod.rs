//! File formats: NDT tensors, parameter containers, PPM/PFM images and
//! small text helpers.

pub mod image;
pub mod ndt;
pub mod store;

use crate::error::{Error, Result};
use std::path::Path;

pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

pub fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}
