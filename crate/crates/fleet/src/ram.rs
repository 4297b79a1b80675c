use std::fs;
use std::path::Path;

use crate::FleetError;

pub const DEFAULT_OVERHEAD_FACTOR: f64 = 1.25;

fn unreadable(path: &Path) -> impl FnOnce(std::io::Error) -> FleetError + '_ {
    move |source| FleetError::PathUnreadable {
        path: path.to_path_buf(),
        source,
    }
}

/// Total size of the regular files under `dir`, recursively. Symlinks are
/// not followed.
pub fn tree_size(dir: &Path) -> Result<u64, FleetError> {
    let mut total = 0;
    for entry in fs::read_dir(dir).map_err(unreadable(dir))? {
        let entry = entry.map_err(unreadable(dir))?;
        let path = entry.path();
        let meta = fs::symlink_metadata(&path).map_err(unreadable(&path))?;
        if meta.is_dir() {
            total += tree_size(&path)?;
        } else if meta.is_file() {
            total += meta.len();
        }
    }
    Ok(total)
}

/// RAM needed to serve one version: on-disk size times `overhead_factor`,
/// rounded up to a whole byte.
pub fn estimate_ram(version_dir: &Path, overhead_factor: f64) -> Result<u64, FleetError> {
    let bytes = tree_size(version_dir)?;
    Ok((bytes as f64 * overhead_factor).ceil() as u64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn two_files() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), vec![0u8; 100]).unwrap();
        fs::write(dir.path().join("b"), vec![0u8; 200]).unwrap();
        assert_eq!(estimate_ram(dir.path(), 1.25).unwrap(), 375);
    }

    #[test]
    fn empty_and_missing() {
        let dir = tempfile::tempdir().unwrap();
        assert_eq!(estimate_ram(dir.path(), 1.25).unwrap(), 0);
        assert!(matches!(
            estimate_ram(&dir.path().join("nope"), 1.25),
            Err(FleetError::PathUnreadable { .. })
        ));
    }

    #[test]
    fn rounds_up() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("a"), [1u8; 7]).unwrap();
        assert_eq!(estimate_ram(dir.path(), 1.25).unwrap(), 9);
    }

    #[test]
    fn nested_matches_walk() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut expected = 0u64;
        for i in 0..10 {
            let depth = rng.gen_range(0..3);
            let mut sub = dir.path().to_path_buf();
            for d in 0..depth {
                sub.push(format!("d{d}_{}", i % 3));
            }
            fs::create_dir_all(&sub).unwrap();
            let len = rng.gen_range(0..5000);
            fs::write(sub.join(format!("f{i}")), vec![7u8; len]).unwrap();
            expected += len as u64;
        }
        assert_eq!(tree_size(dir.path()).unwrap(), expected);
        assert_eq!(
            estimate_ram(dir.path(), 1.25).unwrap(),
            (expected as f64 * 1.25).ceil() as u64
        );
    }
}
