use std::collections::BTreeMap;

use serde::de::Error as _;
use serde::ser::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

/// One feature's value list. Equality is exact: floats compare bitwise, so
/// `-0.0 != 0.0` and a NaN equals the same NaN bit pattern.
#[derive(Debug, Clone)]
pub enum FeatureValue {
    Float(Vec<f64>),
    Int64(Vec<i64>),
    Bytes(Vec<Vec<u8>>),
}

impl PartialEq for FeatureValue {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (FeatureValue::Float(a), FeatureValue::Float(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (FeatureValue::Int64(a), FeatureValue::Int64(b)) => a == b,
            (FeatureValue::Bytes(a), FeatureValue::Bytes(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for FeatureValue {}

impl FeatureValue {
    /// The value as one float, when it holds exactly one number.
    pub fn as_single_f64(&self) -> Option<f64> {
        match self {
            FeatureValue::Float(v) if v.len() == 1 => Some(v[0]),
            FeatureValue::Int64(v) if v.len() == 1 => Some(v[0] as f64),
            _ => None,
        }
    }
}

// Wire form: a homogeneous JSON array. Integers become Int64, any other
// number makes the list Float, strings become Bytes. `[]` reads as Float.
impl Serialize for FeatureValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            FeatureValue::Float(v) => v.serialize(serializer),
            FeatureValue::Int64(v) => v.serialize(serializer),
            FeatureValue::Bytes(v) => {
                let strings = v
                    .iter()
                    .map(|b| std::str::from_utf8(b))
                    .collect::<Result<Vec<_>, _>>()
                    .map_err(|_| S::Error::custom("byte feature is not valid UTF-8"))?;
                strings.serialize(serializer)
            }
        }
    }
}

impl<'de> Deserialize<'de> for FeatureValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let items = Vec::<serde_json::Value>::deserialize(deserializer)?;
        if items.iter().all(|v| v.is_string()) && !items.is_empty() {
            return Ok(FeatureValue::Bytes(
                items
                    .into_iter()
                    .map(|v| match v {
                        serde_json::Value::String(s) => s.into_bytes(),
                        _ => unreachable!(),
                    })
                    .collect(),
            ));
        }
        if !items.is_empty() && items.iter().all(|v| v.is_i64()) {
            return Ok(FeatureValue::Int64(
                items.iter().filter_map(|v| v.as_i64()).collect(),
            ));
        }
        items
            .iter()
            .map(|v| v.as_f64())
            .collect::<Option<Vec<_>>>()
            .map(FeatureValue::Float)
            .ok_or_else(|| D::Error::custom("feature list must be all numbers or all strings"))
    }
}

/// A mapping from feature name to value.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Example {
    pub features: BTreeMap<String, FeatureValue>,
}

impl Example {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: FeatureValue) -> Self {
        self.features.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&FeatureValue> {
        self.features.get(name)
    }
}

/// A batch with features shared by every example factored out.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CompressedBatch {
    pub common: BTreeMap<String, FeatureValue>,
    pub per_example: Vec<Example>,
    #[serde(skip_serializing, default)]
    pub count: usize,
}

/// Moves every feature present with an identical value in all examples
/// into `common`.
pub fn compress_batch(examples: &[Example]) -> Result<CompressedBatch, ModelError> {
    let (first, rest) = examples.split_first().ok_or(ModelError::EmptyBatch)?;
    let common: BTreeMap<String, FeatureValue> = first
        .features
        .iter()
        .filter(|(name, value)| rest.iter().all(|ex| ex.features.get(*name) == Some(*value)))
        .map(|(name, value)| (name.clone(), value.clone()))
        .collect();
    let per_example = examples
        .iter()
        .map(|ex| Example {
            features: ex
                .features
                .iter()
                .filter(|(name, _)| !common.contains_key(*name))
                .map(|(n, v)| (n.clone(), v.clone()))
                .collect(),
        })
        .collect();
    Ok(CompressedBatch {
        common,
        per_example,
        count: examples.len(),
    })
}

pub fn decompress_batch(batch: &CompressedBatch) -> Result<Vec<Example>, ModelError> {
    if batch.count != batch.per_example.len() {
        return Err(ModelError::MalformedBatch(format!(
            "count {} but {} per-example entries",
            batch.count,
            batch.per_example.len()
        )));
    }
    batch
        .per_example
        .iter()
        .map(|ex| {
            if let Some(name) = ex.features.keys().find(|n| batch.common.contains_key(*n)) {
                return Err(ModelError::MalformedBatch(format!(
                    "feature {name:?} is both common and per-example"
                )));
            }
            let mut features = batch.common.clone();
            features.extend(ex.features.iter().map(|(n, v)| (n.clone(), v.clone())));
            Ok(Example { features })
        })
        .collect()
}

/// Serializes a batch as a plain JSON array of examples.
pub fn naive_batch_json(examples: &[Example]) -> Result<String, serde_json::Error> {
    serde_json::to_string(examples)
}

/// Serializes a compressed batch. The object form
/// `{"common":{..},"per_example":[..]}` is used unless the plain array of
/// the decompressed examples is shorter, so the output never exceeds
/// [`naive_batch_json`] of the same examples.
pub fn encode_batch_json(batch: &CompressedBatch) -> Result<String, serde_json::Error> {
    let compressed = serde_json::to_string(batch)?;
    let examples = decompress_batch(batch).map_err(<serde_json::Error as serde::ser::Error>::custom)?;
    let naive = naive_batch_json(&examples)?;
    Ok(if compressed.len() <= naive.len() {
        compressed
    } else {
        naive
    })
}

/// Accepts either wire form: a plain array of examples or a compressed
/// batch object.
pub fn decode_batch_json(value: serde_json::Value) -> Result<Vec<Example>, ModelError> {
    match value {
        serde_json::Value::Array(_) => serde_json::from_value::<Vec<Example>>(value)
            .map_err(|e| ModelError::MalformedBatch(e.to_string())),
        serde_json::Value::Object(_) => {
            let mut batch: CompressedBatch = serde_json::from_value(value)
                .map_err(|e| ModelError::MalformedBatch(e.to_string()))?;
            batch.count = batch.per_example.len();
            decompress_batch(&batch)
        }
        _ => Err(ModelError::MalformedBatch(
            "batch must be an array or an object".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn f(v: &[f64]) -> FeatureValue {
        FeatureValue::Float(v.to_vec())
    }

    #[test]
    fn all_shared() {
        let ex = Example::new().with("a", f(&[1.0]));
        let c = compress_batch(&[ex.clone(), ex]).unwrap();
        assert_eq!(c.common.len(), 1);
        assert_eq!(c.per_example, vec![Example::new(), Example::new()]);
        assert_eq!(c.count, 2);
    }

    #[test]
    fn partially_shared() {
        let a = Example::new().with("a", f(&[1.0])).with("b", f(&[2.0]));
        let b = Example::new().with("a", f(&[1.0])).with("b", f(&[3.0]));
        let c = compress_batch(&[a.clone(), b.clone()]).unwrap();
        assert_eq!(c.common.keys().collect::<Vec<_>>(), vec!["a"]);
        assert_eq!(c.per_example[0], Example::new().with("b", f(&[2.0])));
        assert_eq!(c.per_example[1], Example::new().with("b", f(&[3.0])));
        assert_eq!(decompress_batch(&c).unwrap(), vec![a, b]);
    }

    #[test]
    fn single_example_is_all_common() {
        let a = Example::new().with("a", f(&[1.0])).with("s", FeatureValue::Int64(vec![4]));
        let c = compress_batch(std::slice::from_ref(&a)).unwrap();
        assert_eq!(c.common, a.features);
        assert_eq!(c.per_example, vec![Example::new()]);
    }

    #[test]
    fn empty_batch() {
        assert_eq!(compress_batch(&[]), Err(ModelError::EmptyBatch));
    }

    #[test]
    fn near_equal_floats_are_not_shared() {
        let a = Example::new().with("a", f(&[0.0]));
        let b = Example::new().with("a", f(&[-0.0]));
        let c = compress_batch(&[a, b]).unwrap();
        assert!(c.common.is_empty());
    }

    #[test]
    fn a_feature_missing_from_one_example_is_not_common() {
        let a = Example::new().with("a", f(&[1.0]));
        let c = compress_batch(&[a, Example::new()]).unwrap();
        assert!(c.common.is_empty());
    }

    #[test]
    fn collision_is_malformed() {
        let c = CompressedBatch {
            common: BTreeMap::from([("a".to_string(), f(&[1.0]))]),
            per_example: vec![Example::new().with("a", f(&[2.0]))],
            count: 1,
        };
        assert!(matches!(
            decompress_batch(&c),
            Err(ModelError::MalformedBatch(_))
        ));
    }

    #[test]
    fn wire_forms() {
        let v: serde_json::Value =
            serde_json::from_str(r#"[{"x":[1,2],"y":[1.5],"s":["hi"]}]"#).unwrap();
        let ex = decode_batch_json(v).unwrap();
        assert_eq!(ex[0].get("x"), Some(&FeatureValue::Int64(vec![1, 2])));
        assert_eq!(ex[0].get("y"), Some(&f(&[1.5])));
        assert_eq!(
            ex[0].get("s"),
            Some(&FeatureValue::Bytes(vec![b"hi".to_vec()]))
        );

        let obj: serde_json::Value = serde_json::from_str(
            r#"{"common":{"c":["us"]},"per_example":[{"x":[1.0]},{"x":[2.0]}]}"#,
        )
        .unwrap();
        let ex = decode_batch_json(obj).unwrap();
        assert_eq!(ex.len(), 2);
        assert_eq!(
            ex[1].get("c"),
            Some(&FeatureValue::Bytes(vec![b"us".to_vec()]))
        );

        let mixed: serde_json::Value = serde_json::from_str(r#"[{"x":[1,"a"]}]"#).unwrap();
        assert!(decode_batch_json(mixed).is_err());
    }

    #[test]
    fn serialized_float_keeps_float_type() {
        let ex = Example::new().with("y", f(&[1.0, -0.0]));
        let json = serde_json::to_string(&ex).unwrap();
        let back: Example = serde_json::from_str(&json).unwrap();
        assert_eq!(back, ex);
    }

    #[test]
    fn encoding_prefers_shorter_form() {
        let shared = Example::new()
            .with("country", FeatureValue::Bytes(vec![b"south-america".to_vec()]));
        let batch: Vec<_> = (0..5)
            .map(|i| shared.clone().with("x", f(&[i as f64])))
            .collect();
        let c = compress_batch(&batch).unwrap();
        let wire = encode_batch_json(&c).unwrap();
        assert!(wire.starts_with('{'));
        assert!(wire.len() < naive_batch_json(&batch).unwrap().len());

        let lone = compress_batch(&batch[..1]).unwrap();
        assert!(encode_batch_json(&lone).unwrap().starts_with('['));
    }

    fn arb_value() -> impl Strategy<Value = FeatureValue> {
        prop_oneof![
            prop::collection::vec(prop::sample::select(vec![0.0, 1.0, -2.5, 3.25]), 0..3)
                .prop_map(FeatureValue::Float),
            prop::collection::vec(-3i64..3, 0..3).prop_map(FeatureValue::Int64),
            prop::collection::vec(
                prop::sample::select(vec![b"a".to_vec(), b"bb".to_vec()]),
                0..3
            )
            .prop_map(FeatureValue::Bytes),
        ]
    }

    fn arb_example() -> impl Strategy<Value = Example> {
        prop::collection::btree_map(
            prop::sample::select(vec!["a", "b", "c", "d"]).prop_map(String::from),
            arb_value(),
            0..4,
        )
        .prop_map(|features| Example { features })
    }

    proptest! {
        #[test]
        fn roundtrip(batch in prop::collection::vec(arb_example(), 1..6)) {
            let c = compress_batch(&batch).unwrap();
            prop_assert_eq!(decompress_batch(&c).unwrap(), batch.clone());
            let wire = encode_batch_json(&c).unwrap();
            prop_assert!(wire.len() <= naive_batch_json(&batch).unwrap().len());
            let back = decode_batch_json(serde_json::from_str(&wire).unwrap()).unwrap();
            prop_assert_eq!(back.len(), batch.len());
        }
    }
}
