//! Attribute-based service names and the two query forms used to list and
//! resolve them.

use std::fmt;

use serde::de::{self, MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::{Map, Value};

use super::ProtocolError;

/// A personal service name: an ordered set of presentation attributes.
///
/// Attribute names are unique. Parsing rejects a JSON object that repeats a
/// member name instead of silently keeping the last one.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ServiceName {
    attributes: Map<String, Value>,
}

impl ServiceName {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_map(attributes: Map<String, Value>) -> Self {
        Self { attributes }
    }

    /// Adds an attribute, returning `false` (and leaving the name untouched)
    /// when the attribute is already present.
    pub fn insert(&mut self, name: impl Into<String>, value: impl Into<Value>) -> bool {
        let name = name.into();
        if self.attributes.contains_key(&name) {
            return false;
        }
        self.attributes.insert(name, value.into());
        true
    }

    pub fn with(mut self, name: impl Into<String>, value: impl Into<Value>) -> Self {
        self.insert(name, value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.attributes.get(name)
    }

    pub fn len(&self) -> usize {
        self.attributes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.attributes.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Value)> {
        self.attributes.iter()
    }

    pub fn as_map(&self) -> &Map<String, Value> {
        &self.attributes
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        serde_json::from_str(text).map_err(|e| ProtocolError::Payload(e.to_string()))
    }

    /// Single-line JSON suitable for a header value.
    pub fn to_header_json(&self) -> String {
        super::header_json(self)
    }
}

impl Serialize for ServiceName {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.attributes.len()))?;
        for (k, v) in &self.attributes {
            map.serialize_entry(k, v)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for ServiceName {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct NameVisitor;

        impl<'de> Visitor<'de> for NameVisitor {
            type Value = ServiceName;

            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a JSON object of service attributes")
            }

            fn visit_map<A: MapAccess<'de>>(self, mut access: A) -> Result<ServiceName, A::Error> {
                let mut attributes = Map::new();
                while let Some(key) = access.next_key::<String>()? {
                    if attributes.contains_key(&key) {
                        return Err(de::Error::custom(format!("duplicate attribute `{key}`")));
                    }
                    let value: Value = access.next_value()?;
                    attributes.insert(key, value);
                }
                Ok(ServiceName { attributes })
            }
        }

        deserializer.deserialize_map(NameVisitor)
    }
}

impl fmt::Display for ServiceName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_header_json())
    }
}

/// Yellow-pages listing query: exactly one `attribute: value` pair, matched
/// case-insensitively.
#[derive(Debug, Clone, PartialEq)]
pub struct YellowQuery {
    pub attribute: String,
    pub value: Value,
}

impl YellowQuery {
    pub fn new(attribute: impl Into<String>, value: impl Into<Value>) -> Self {
        Self {
            attribute: attribute.into(),
            value: value.into(),
        }
    }

    pub fn from_name(name: ServiceName) -> Result<Self, ProtocolError> {
        if name.len() != 1 {
            return Err(ProtocolError::Payload(format!(
                "yellow-pages query needs exactly one attribute, got {}",
                name.len()
            )));
        }
        let (attribute, value) = name.attributes.into_iter().next().expect("one attribute");
        Ok(Self { attribute, value })
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        Self::from_name(ServiceName::parse(text)?)
    }

    pub fn to_name(&self) -> ServiceName {
        ServiceName::new().with(self.attribute.clone(), self.value.clone())
    }

    pub fn matches(&self, name: &ServiceName) -> bool {
        yellow_match(self, name)
    }
}

/// White-pages resolution query: a non-empty attribute object, matched
/// case-sensitively against a subset of a service name.
#[derive(Debug, Clone, PartialEq)]
pub struct WhiteQuery(ServiceName);

impl WhiteQuery {
    pub fn new(attributes: ServiceName) -> Result<Self, ProtocolError> {
        if attributes.is_empty() {
            return Err(ProtocolError::Payload("white-pages query is empty".into()));
        }
        Ok(Self(attributes))
    }

    pub fn parse(text: &str) -> Result<Self, ProtocolError> {
        Self::new(ServiceName::parse(text)?)
    }

    pub fn attributes(&self) -> &ServiceName {
        &self.0
    }

    pub fn into_name(self) -> ServiceName {
        self.0
    }

    pub fn matches(&self, name: &ServiceName) -> bool {
        white_match(self, name)
    }
}

fn fold(s: &str) -> String {
    s.to_lowercase()
}

fn value_eq_ignore_case(a: &Value, b: &Value) -> bool {
    match (a, b) {
        (Value::String(x), Value::String(y)) => fold(x) == fold(y),
        _ => a == b,
    }
}

/// True iff `name` has an attribute equal to the query's, ignoring case in the
/// attribute name and in string values. Non-string values compare
/// structurally.
pub fn yellow_match(query: &YellowQuery, name: &ServiceName) -> bool {
    let wanted = fold(&query.attribute);
    name.iter()
        .any(|(k, v)| fold(k) == wanted && value_eq_ignore_case(&query.value, v))
}

/// True iff every query member appears in `name` with a byte-identical
/// attribute name and an equal value. Extra attributes in `name` are ignored.
pub fn white_match(query: &WhiteQuery, name: &ServiceName) -> bool {
    query
        .attributes()
        .iter()
        .all(|(k, v)| name.get(k).is_some_and(|found| found == v))
}
