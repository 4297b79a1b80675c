use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::{AffineModel, LookupTable, AFFINE_MODEL_FILE, LOOKUP_TABLE_FILE};
use crate::servable::{LoadError, Loader, Servable};

/// On-disk format of a version directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelFormat {
    Affine,
    LookupTable,
    /// Decided at load time from which format file exists.
    Auto,
}

impl FromStr for ModelFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "affine" => Ok(ModelFormat::Affine),
            "lookup_table" => Ok(ModelFormat::LookupTable),
            "auto" => Ok(ModelFormat::Auto),
            other => Err(format!("unknown model format {other:?}")),
        }
    }
}

impl ModelFormat {
    pub fn loader(self, version_dir: impl Into<PathBuf>) -> Box<dyn Loader> {
        let dir = version_dir.into();
        match self {
            ModelFormat::Affine => Box::new(AffineLoader::new(dir)),
            ModelFormat::LookupTable => Box::new(LookupTableLoader::new(dir)),
            ModelFormat::Auto => Box::new(AutoLoader::new(dir)),
        }
    }
}

fn file_size(path: &Path) -> u64 {
    fs::metadata(path).map(|m| m.len()).unwrap_or(0)
}

fn read(path: &Path) -> Result<Vec<u8>, LoadError> {
    fs::read(path).map_err(|e| LoadError::new(format!("{}: {e}", path.display())))
}

/// Loads `<dir>/model.json` as an [`AffineModel`].
#[derive(Debug, Clone)]
pub struct AffineLoader {
    dir: PathBuf,
}

impl AffineLoader {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }

    pub fn path(&self) -> &Path {
        &self.dir
    }
}

impl Loader for AffineLoader {
    fn estimate_memory(&self) -> u64 {
        file_size(&self.dir.join(AFFINE_MODEL_FILE))
    }

    fn load(&mut self) -> Result<Box<Servable>, LoadError> {
        let path = self.dir.join(AFFINE_MODEL_FILE);
        let bytes = read(&path)?;
        let text = std::str::from_utf8(&bytes)
            .map_err(|e| LoadError::new(format!("{}: {e}", path.display())))?;
        let model = AffineModel::from_json(text)
            .map_err(|e| LoadError::new(format!("{}: {e}", path.display())))?;
        Ok(Box::new(model))
    }
}

/// Loads `<dir>/table.tsv` as a [`LookupTable`].
#[derive(Debug, Clone)]
pub struct LookupTableLoader {
    dir: PathBuf,
}

impl LookupTableLoader {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Loader for LookupTableLoader {
    fn estimate_memory(&self) -> u64 {
        file_size(&self.dir.join(LOOKUP_TABLE_FILE))
    }

    fn load(&mut self) -> Result<Box<Servable>, LoadError> {
        let path = self.dir.join(LOOKUP_TABLE_FILE);
        let table = LookupTable::parse_tsv(&read(&path)?)
            .map_err(|e| LoadError::new(format!("{}: {e}", path.display())))?;
        Ok(Box::new(table))
    }
}

/// Picks the affine or lookup-table format by which file is present.
#[derive(Debug, Clone)]
pub struct AutoLoader {
    dir: PathBuf,
}

impl AutoLoader {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self { dir: dir.into() }
    }
}

impl Loader for AutoLoader {
    fn estimate_memory(&self) -> u64 {
        file_size(&self.dir.join(AFFINE_MODEL_FILE)) + file_size(&self.dir.join(LOOKUP_TABLE_FILE))
    }

    fn load(&mut self) -> Result<Box<Servable>, LoadError> {
        if self.dir.join(AFFINE_MODEL_FILE).exists() {
            AffineLoader::new(&self.dir).load()
        } else if self.dir.join(LOOKUP_TABLE_FILE).exists() {
            LookupTableLoader::new(&self.dir).load()
        } else {
            Err(LoadError::new(format!(
                "{}: no {AFFINE_MODEL_FILE} or {LOOKUP_TABLE_FILE}",
                self.dir.display()
            )))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loads_both_formats() {
        let dir = tempfile::tempdir().unwrap();
        let a = dir.path().join("a");
        let t = dir.path().join("t");
        fs::create_dir_all(&a).unwrap();
        fs::create_dir_all(&t).unwrap();
        let json = r#"{"type":"affine","feature_order":["x"],"W":[[1.0]],"b":[0.0]}"#;
        fs::write(a.join(AFFINE_MODEL_FILE), json).unwrap();
        fs::write(t.join(LOOKUP_TABLE_FILE), "k\tv\n").unwrap();

        let mut loader = AffineLoader::new(&a);
        assert_eq!(loader.estimate_memory(), json.len() as u64);
        let s = loader.load().unwrap();
        assert!(s.downcast_ref::<AffineModel>().is_some());

        let s = ModelFormat::Auto.loader(&t).load().unwrap();
        assert_eq!(s.downcast_ref::<LookupTable>().unwrap().len(), 1);
        let s = ModelFormat::Auto.loader(&a).load().unwrap();
        assert!(s.downcast_ref::<AffineModel>().is_some());
    }

    #[test]
    fn missing_or_corrupt_files_fail_at_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut missing = AffineLoader::new(dir.path().join("nope"));
        assert_eq!(missing.estimate_memory(), 0);
        assert!(missing.load().is_err());

        fs::write(dir.path().join(AFFINE_MODEL_FILE), "{not json").unwrap();
        let err = AffineLoader::new(dir.path()).load().unwrap_err();
        assert!(err.message.contains(AFFINE_MODEL_FILE));
        assert!(ModelFormat::Auto.loader(dir.path().join("x")).load().is_err());
    }

    #[test]
    fn format_names() {
        assert_eq!("lookup_table".parse(), Ok(ModelFormat::LookupTable));
        assert!("onnx".parse::<ModelFormat>().is_err());
    }
}
