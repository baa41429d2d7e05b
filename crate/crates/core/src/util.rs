//! Small shared utilities: stable hashing, atomic file writes, seeding.

use crate::Result;
use std::fs;
use std::io::Write;
use std::path::Path;

/// FNV-1a 64-bit hash. Used wherever a platform-stable, corpus-order
/// independent hash is needed (validation splits, per-example RNG streams).
/// `std::hash` is explicitly not guaranteed stable across releases.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= u64::from(b);
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derives a child seed from a base seed and a context label.
pub fn derive_seed(base: u64, label: &str, index: u64) -> u64 {
    let mut bytes = Vec::with_capacity(label.len() + 16);
    bytes.extend_from_slice(&base.to_le_bytes());
    bytes.extend_from_slice(label.as_bytes());
    bytes.extend_from_slice(&index.to_le_bytes());
    fnv1a64(&bytes)
}

/// Writes `bytes` to `path` atomically: the content lands in a temporary
/// file in the same directory which is then renamed over the target, so no
/// partially written artifact is ever observable under the final name.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir)?;
    let file_name = path
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| "out".to_string());
    let tmp = dir.join(format!(".{}.tmp.{}", file_name, std::process::id()));
    let guard = TmpGuard { path: tmp.clone() };
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    std::mem::forget(guard);
    Ok(())
}

struct TmpGuard {
    path: std::path::PathBuf,
}

impl Drop for TmpGuard {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fnv_is_stable() {
        // Reference value for "abc" from the FNV-1a specification.
        assert_eq!(fnv1a64(b"abc"), 0xe71fa2190541574b);
        assert_eq!(fnv1a64(b""), 0xcbf29ce484222325);
    }

    #[test]
    fn atomic_write_replaces_and_leaves_no_tmp() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("out.txt");
        atomic_write(&path, b"first").unwrap();
        atomic_write(&path, b"second").unwrap();
        assert_eq!(fs::read(&path).unwrap(), b"second");
        let leftovers: Vec<_> = fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().contains(".tmp."))
            .collect();
        assert!(leftovers.is_empty());
    }
}
