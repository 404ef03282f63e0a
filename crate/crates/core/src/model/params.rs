use std::collections::BTreeMap;

use serde::de::{self, MapAccess, SeqAccess, Visitor};
use serde::ser::{SerializeMap, SerializeSeq};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::ModelError;

/// A user parameter value: any JSON-representable scalar, list or map.
///
/// Integers and floats are kept apart so that `1` and `1.0` survive a
/// round trip unchanged.
#[derive(Debug, Clone, PartialEq)]
pub enum ParamValue {
    Null,
    Bool(bool),
    Int(i64),
    Float(f64),
    Str(String),
    List(Vec<ParamValue>),
    Map(BTreeMap<String, ParamValue>),
}

impl ParamValue {
    pub fn as_i64(&self) -> Option<i64> {
        match self {
            ParamValue::Int(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_u64(&self) -> Option<u64> {
        self.as_i64().and_then(|v| u64::try_from(v).ok())
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            ParamValue::Int(v) => Some(*v as f64),
            ParamValue::Float(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_bool(&self) -> Option<bool> {
        match self {
            ParamValue::Bool(v) => Some(*v),
            _ => None,
        }
    }

    pub fn as_str(&self) -> Option<&str> {
        match self {
            ParamValue::Str(v) => Some(v),
            _ => None,
        }
    }

    pub fn as_list(&self) -> Option<&[ParamValue]> {
        match self {
            ParamValue::List(v) => Some(v),
            _ => None,
        }
    }

    /// Returns the dotted path of the first value JSON cannot represent.
    fn first_unrepresentable(&self, path: &str) -> Option<String> {
        match self {
            ParamValue::Float(v) if !v.is_finite() => Some(path.to_string()),
            ParamValue::List(items) => items
                .iter()
                .enumerate()
                .find_map(|(i, item)| item.first_unrepresentable(&format!("{path}[{i}]"))),
            ParamValue::Map(map) => map
                .iter()
                .find_map(|(k, v)| v.first_unrepresentable(&format!("{path}.{k}"))),
            _ => None,
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::to_value(self).unwrap_or(serde_json::Value::Null)
    }

    pub fn from_json(value: &serde_json::Value) -> Self {
        match value {
            serde_json::Value::Null => ParamValue::Null,
            serde_json::Value::Bool(b) => ParamValue::Bool(*b),
            serde_json::Value::Number(n) => match n.as_i64() {
                Some(i) => ParamValue::Int(i),
                None => ParamValue::Float(n.as_f64().unwrap_or(0.0)),
            },
            serde_json::Value::String(s) => ParamValue::Str(s.clone()),
            serde_json::Value::Array(items) => {
                ParamValue::List(items.iter().map(ParamValue::from_json).collect())
            }
            serde_json::Value::Object(map) => ParamValue::Map(
                map.iter()
                    .map(|(k, v)| (k.clone(), ParamValue::from_json(v)))
                    .collect(),
            ),
        }
    }
}

macro_rules! from_impl {
    ($($t:ty => $variant:ident $(as $cast:ty)?),* $(,)?) => {
        $(impl From<$t> for ParamValue {
            fn from(v: $t) -> Self {
                ParamValue::$variant(v $(as $cast)?)
            }
        })*
    };
}

from_impl! {
    bool => Bool,
    i32 => Int as i64,
    i64 => Int,
    u32 => Int as i64,
    f64 => Float,
    String => Str,
}

impl From<&str> for ParamValue {
    fn from(v: &str) -> Self {
        ParamValue::Str(v.to_string())
    }
}

impl<T: Into<ParamValue>> From<Vec<T>> for ParamValue {
    fn from(v: Vec<T>) -> Self {
        ParamValue::List(v.into_iter().map(Into::into).collect())
    }
}

impl Serialize for ParamValue {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        match self {
            ParamValue::Null => serializer.serialize_unit(),
            ParamValue::Bool(v) => serializer.serialize_bool(*v),
            ParamValue::Int(v) => serializer.serialize_i64(*v),
            ParamValue::Float(v) => {
                if !v.is_finite() {
                    return Err(serde::ser::Error::custom("non-finite float"));
                }
                serializer.serialize_f64(*v)
            }
            ParamValue::Str(v) => serializer.serialize_str(v),
            ParamValue::List(items) => {
                let mut seq = serializer.serialize_seq(Some(items.len()))?;
                for item in items {
                    seq.serialize_element(item)?;
                }
                seq.end()
            }
            ParamValue::Map(map) => {
                let mut out = serializer.serialize_map(Some(map.len()))?;
                for (k, v) in map {
                    out.serialize_entry(k, v)?;
                }
                out.end()
            }
        }
    }
}

impl<'de> Deserialize<'de> for ParamValue {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ParamVisitor;

        impl<'de> Visitor<'de> for ParamVisitor {
            type Value = ParamValue;

            fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
                f.write_str("a JSON value")
            }

            fn visit_unit<E: de::Error>(self) -> Result<ParamValue, E> {
                Ok(ParamValue::Null)
            }

            fn visit_none<E: de::Error>(self) -> Result<ParamValue, E> {
                Ok(ParamValue::Null)
            }

            fn visit_bool<E: de::Error>(self, v: bool) -> Result<ParamValue, E> {
                Ok(ParamValue::Bool(v))
            }

            fn visit_i64<E: de::Error>(self, v: i64) -> Result<ParamValue, E> {
                Ok(ParamValue::Int(v))
            }

            fn visit_u64<E: de::Error>(self, v: u64) -> Result<ParamValue, E> {
                match i64::try_from(v) {
                    Ok(i) => Ok(ParamValue::Int(i)),
                    Err(_) => Ok(ParamValue::Float(v as f64)),
                }
            }

            fn visit_f64<E: de::Error>(self, v: f64) -> Result<ParamValue, E> {
                Ok(ParamValue::Float(v))
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<ParamValue, E> {
                Ok(ParamValue::Str(v.to_string()))
            }

            fn visit_string<E: de::Error>(self, v: String) -> Result<ParamValue, E> {
                Ok(ParamValue::Str(v))
            }

            fn visit_seq<A: SeqAccess<'de>>(self, mut seq: A) -> Result<ParamValue, A::Error> {
                let mut items = Vec::new();
                while let Some(item) = seq.next_element()? {
                    items.push(item);
                }
                Ok(ParamValue::List(items))
            }

            fn visit_map<A: MapAccess<'de>>(self, mut map: A) -> Result<ParamValue, A::Error> {
                let mut out = BTreeMap::new();
                while let Some((k, v)) = map.next_entry::<String, ParamValue>()? {
                    out.insert(k, v);
                }
                Ok(ParamValue::Map(out))
            }
        }

        deserializer.deserialize_any(ParamVisitor)
    }
}

/// Arbitrary user parameters attached to a task, keyed by identifier.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
#[serde(transparent)]
pub struct Params(BTreeMap<String, ParamValue>);

pub(crate) fn is_identifier(key: &str) -> bool {
    let mut chars = key.chars();
    match chars.next() {
        Some(c) if c.is_ascii_alphabetic() || c == '_' => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

impl Params {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(
        &mut self,
        key: impl Into<String>,
        value: impl Into<ParamValue>,
    ) -> Result<(), ModelError> {
        let key = key.into();
        if !is_identifier(&key) {
            return Err(ModelError::invalid(
                "params",
                format!("key {key:?} is not a valid identifier"),
            ));
        }
        self.0.insert(key, value.into());
        Ok(())
    }

    pub fn with(mut self, key: impl Into<String>, value: impl Into<ParamValue>) -> Self {
        self.insert(key, value).expect("valid parameter key");
        self
    }

    pub fn get(&self, key: &str) -> Option<&ParamValue> {
        self.0.get(key)
    }

    pub fn remove(&mut self, key: &str) -> Option<ParamValue> {
        self.0.remove(key)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamValue)> {
        self.0.iter()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if let Some(bad) = self.0.keys().find(|k| !is_identifier(k)) {
            return Err(ModelError::invalid(
                "params",
                format!("key {bad:?} is not a valid identifier"),
            ));
        }
        Ok(())
    }

    /// Fails with the offending key when a value has no JSON form.
    pub fn check_encodable(&self) -> Result<(), ModelError> {
        for (k, v) in &self.0 {
            if let Some(path) = v.first_unrepresentable(k) {
                return Err(ModelError::Unencodable { key: path });
            }
        }
        Ok(())
    }

    /// Canonical `params.json` bytes: sorted keys, no whitespace.
    pub fn to_canonical_json(&self) -> Result<Vec<u8>, ModelError> {
        self.check_encodable()?;
        Ok(serde_json::to_vec(self).expect("checked params serialize"))
    }

    pub fn from_json_bytes(raw: &[u8]) -> Result<Self, ModelError> {
        let params: Params = serde_json::from_slice(raw)
            .map_err(|e| ModelError::invalid("params", e.to_string()))?;
        params.validate()?;
        Ok(params)
    }
}

impl<'de> Deserialize<'de> for Params {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let map = BTreeMap::<String, ParamValue>::deserialize(deserializer)?;
        let params = Params(map);
        params.validate().map_err(de::Error::custom)?;
        Ok(params)
    }
}

impl FromIterator<(String, ParamValue)> for Params {
    fn from_iter<I: IntoIterator<Item = (String, ParamValue)>>(iter: I) -> Self {
        Params(iter.into_iter().collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identifiers() {
        assert!(is_identifier("n"));
        assert!(is_identifier("_sim_duration_ms"));
        assert!(is_identifier("seed2"));
        assert!(!is_identifier("2seed"));
        assert!(!is_identifier("a-b"));
        assert!(!is_identifier(""));
    }

    #[test]
    fn int_and_float_stay_distinct() {
        let params = Params::new().with("a", 1i64).with("b", 1.0f64);
        let raw = params.to_canonical_json().unwrap();
        assert_eq!(raw, br#"{"a":1,"b":1.0}"#);
        assert_eq!(Params::from_json_bytes(&raw).unwrap(), params);
    }

    #[test]
    fn nan_is_reported_with_its_key() {
        let mut inner = BTreeMap::new();
        inner.insert("x".to_string(), ParamValue::Float(f64::NAN));
        let params = Params::new().with("ok", 1i64).with("deep", ParamValue::Map(inner));
        match params.to_canonical_json() {
            Err(ModelError::Unencodable { key }) => assert_eq!(key, "deep.x"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_keys_rejected_on_decode() {
        assert!(Params::from_json_bytes(br#"{"not ok":1}"#).is_err());
    }
}
