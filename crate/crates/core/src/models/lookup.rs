use std::collections::HashMap;

use super::ModelError;

const DEFAULT_MARKER: &[u8] = b"#default";

/// Byte-string to byte-string table, e.g. a feature transformation.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct LookupTable {
    entries: HashMap<Vec<u8>, Vec<u8>>,
    default_value: Option<Vec<u8>>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("key not found: {}", String::from_utf8_lossy(.0))]
pub struct KeyNotFound(pub Vec<u8>);

impl LookupTable {
    pub fn new(entries: HashMap<Vec<u8>, Vec<u8>>, default_value: Option<Vec<u8>>) -> Self {
        Self {
            entries,
            default_value,
        }
    }

    /// Parses `key<TAB>value` lines. An optional first line
    /// `#default<TAB>value` sets the fallback. Blank lines are skipped;
    /// duplicate keys are an error.
    pub fn parse_tsv(bytes: &[u8]) -> Result<Self, ModelError> {
        let mut table = Self::default();
        for (lineno, line) in bytes.split(|b| *b == b'\n').enumerate() {
            if line.is_empty() {
                continue;
            }
            let tab = line.iter().position(|b| *b == b'\t').ok_or_else(|| {
                ModelError::InvalidModel(format!("line {}: missing tab", lineno + 1))
            })?;
            let (key, value) = (&line[..tab], &line[tab + 1..]);
            if lineno == 0 && key == DEFAULT_MARKER {
                table.default_value = Some(value.to_vec());
                continue;
            }
            if table.entries.insert(key.to_vec(), value.to_vec()).is_some() {
                return Err(ModelError::InvalidModel(format!(
                    "line {}: duplicate key {:?}",
                    lineno + 1,
                    String::from_utf8_lossy(key)
                )));
            }
        }
        Ok(table)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, key: &[u8]) -> Result<&[u8], KeyNotFound> {
        self.entries
            .get(key)
            .or(self.default_value.as_ref())
            .map(Vec::as_slice)
            .ok_or_else(|| KeyNotFound(key.to_vec()))
    }

    /// Per-key result: the entry, else the default, else `KeyNotFound`.
    pub fn lookup<K: AsRef<[u8]>>(&self, keys: &[K]) -> Vec<Result<Vec<u8>, KeyNotFound>> {
        keys.iter()
            .map(|k| self.get(k.as_ref()).map(<[u8]>::to_vec))
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn hit_default_and_miss() {
        let t = LookupTable::parse_tsv(b"k\tv\n").unwrap();
        assert_eq!(t.lookup(&["k"]), vec![Ok(b"v".to_vec())]);
        assert_eq!(t.lookup(&["x"]), vec![Err(KeyNotFound(b"x".to_vec()))]);

        let t = LookupTable::parse_tsv(b"#default\td\nk\tv\n").unwrap();
        assert_eq!(t.lookup(&["x", "k"]), vec![Ok(b"d".to_vec()), Ok(b"v".to_vec())]);
    }

    #[test]
    fn default_marker_only_on_first_line() {
        let t = LookupTable::parse_tsv(b"k\tv\n#default\td\n").unwrap();
        assert_eq!(t.len(), 2);
        assert!(t.get(b"x").is_err());
    }

    #[test]
    fn malformed_tables() {
        assert!(LookupTable::parse_tsv(b"novalue\n").is_err());
        assert!(LookupTable::parse_tsv(b"k\t1\nk\t2\n").is_err());
    }

    #[test]
    fn values_may_contain_tabs() {
        let t = LookupTable::parse_tsv(b"k\ta\tb").unwrap();
        assert_eq!(t.get(b"k").unwrap(), b"a\tb");
    }

    #[test]
    fn matches_naive_map_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let mut oracle = std::collections::BTreeMap::new();
        let mut tsv = Vec::new();
        for i in 0..200u32 {
            let key = format!("key{}", i * 3);
            let value = format!("value{}", rng.gen::<u32>());
            tsv.extend_from_slice(format!("{key}\t{value}\n").as_bytes());
            oracle.insert(key.into_bytes(), value.into_bytes());
        }
        let table = LookupTable::parse_tsv(&tsv).unwrap();
        let keys: Vec<Vec<u8>> = (0..1000)
            .map(|_| format!("key{}", rng.gen_range(0..700)).into_bytes())
            .collect();
        let got = table.lookup(&keys);
        for (k, r) in keys.iter().zip(got) {
            match oracle.get(k) {
                Some(v) => assert_eq!(r.unwrap(), *v),
                None => assert_eq!(r, Err(KeyNotFound(k.clone()))),
            }
        }
    }
}
