use std::fs;
use std::io;
use std::path::Path;

use sha2::{Digest, Sha256};
use walk::sorted_files;

pub fn sha256_hex(data: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(data.as_ref()))
}

/// Content hash of a file, or of a directory tree (relative paths and
/// contents, in sorted order). Files named in `skip` are ignored at any depth.
pub fn path_digest(path: &Path, skip: &[&str]) -> io::Result<String> {
    if path.is_file() {
        return Ok(sha256_hex(fs::read(path)?));
    }
    let mut hasher = Sha256::new();
    for file in sorted_files(path)? {
        let name = file.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if skip.contains(&name) {
            continue;
        }
        let rel = file.strip_prefix(path).unwrap_or(&file);
        hasher.update(rel.to_string_lossy().replace('\\', "/").as_bytes());
        hasher.update([0u8]);
        hasher.update(fs::read(&file)?);
        hasher.update([0u8]);
    }
    Ok(hex::encode(hasher.finalize()))
}

pub(crate) mod walk {
    use std::fs;
    use std::io;
    use std::path::{Path, PathBuf};

    /// Every regular file below `root`, sorted by path.
    pub fn sorted_files(root: &Path) -> io::Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in fs::read_dir(&dir)? {
                let entry = entry?;
                let ty = entry.file_type()?;
                if ty.is_dir() {
                    stack.push(entry.path());
                } else if ty.is_file() {
                    out.push(entry.path());
                }
            }
        }
        out.sort();
        Ok(out)
    }
}
