use std::collections::{BTreeMap, HashSet};
use std::fmt;

use serde::de::{MapAccess, Visitor};
use serde::ser::SerializeMap;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::{FormatError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FieldKind {
    Bytes,
    Int32,
    Int64,
    Float32,
    Float64,
    String,
}

impl FieldKind {
    /// Element width in bytes; `None` for strings.
    pub fn width(self) -> Option<usize> {
        match self {
            FieldKind::Bytes => Some(1),
            FieldKind::Int32 | FieldKind::Float32 => Some(4),
            FieldKind::Int64 | FieldKind::Float64 => Some(8),
            FieldKind::String => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldType {
    #[serde(rename = "type")]
    pub kind: FieldKind,
    #[serde(default)]
    pub shape: Vec<usize>,
}

impl FieldType {
    pub fn scalar(kind: FieldKind) -> Self {
        Self {
            kind,
            shape: Vec::new(),
        }
    }

    pub fn tensor(kind: FieldKind, shape: Vec<usize>) -> Self {
        Self { kind, shape }
    }

    /// Number of elements per row. 1 for scalars.
    pub fn elements(&self) -> usize {
        self.shape.iter().product()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Field {
    pub name: String,
    pub ty: FieldType,
}

/// Ordered field list. Serialized as a JSON object `{name: {"type", "shape"}}`;
/// duplicates survive deserialization so that validation can report them.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Schema {
    pub fields: Vec<Field>,
}

impl Schema {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, ty: FieldType) -> Self {
        self.fields.push(Field {
            name: name.into(),
            ty,
        });
        self
    }

    pub fn get(&self, name: &str) -> Option<&FieldType> {
        self.fields.iter().find(|f| f.name == name).map(|f| &f.ty)
    }

    /// `bytes` fields, stored in block pages.
    pub fn blob_fields(&self) -> impl Iterator<Item = &Field> {
        self.fields.iter().filter(|f| f.ty.kind == FieldKind::Bytes)
    }

    /// Every other field, stored in scalar pages.
    pub fn scalar_fields(&self) -> impl Iterator<Item = &Field> {
        self.fields.iter().filter(|f| f.ty.kind != FieldKind::Bytes)
    }

    /// The ModelNet40 layout: `data` and `normal` as `bytes[3]`, `label` as int32.
    pub fn modelnet40() -> Self {
        Schema::new()
            .with("data", FieldType::tensor(FieldKind::Bytes, vec![3]))
            .with("normal", FieldType::tensor(FieldKind::Bytes, vec![3]))
            .with("label", FieldType::scalar(FieldKind::Int32))
    }

    pub fn check_sample(&self, sample: &Sample) -> Result<()> {
        if sample.values.len() != self.fields.len() {
            return Err(FormatError::SchemaMismatch(format!(
                "sample has {} fields, schema has {}",
                sample.values.len(),
                self.fields.len()
            )));
        }
        for f in &self.fields {
            let v = sample.values.get(&f.name).ok_or_else(|| {
                FormatError::SchemaMismatch(format!("missing field `{}`", f.name))
            })?;
            if v.kind() != f.ty.kind {
                return Err(FormatError::SchemaMismatch(format!(
                    "field `{}` is {:?}, schema says {:?}",
                    f.name,
                    v.kind(),
                    f.ty.kind
                )));
            }
            let n = v.len();
            let ok = match f.ty.kind {
                FieldKind::String => true,
                // bytes fields have a free leading dimension
                FieldKind::Bytes => n % f.ty.elements().max(1) == 0,
                _ => n == f.ty.elements(),
            };
            if !ok {
                return Err(FormatError::SchemaMismatch(format!(
                    "field `{}` has {n} elements, shape {:?}",
                    f.name, f.ty.shape
                )));
            }
        }
        Ok(())
    }
}

impl Serialize for Schema {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.fields.len()))?;
        for f in &self.fields {
            map.serialize_entry(&f.name, &f.ty)?;
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Schema {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        struct SchemaVisitor;
        impl<'de> Visitor<'de> for SchemaVisitor {
            type Value = Schema;
            fn expecting(&self, f: &mut fmt::Formatter) -> fmt::Result {
                f.write_str("a map of field name to field type")
            }
            fn visit_map<A: MapAccess<'de>>(
                self,
                mut map: A,
            ) -> std::result::Result<Schema, A::Error> {
                let mut fields = Vec::new();
                while let Some((name, ty)) = map.next_entry::<String, FieldType>()? {
                    fields.push(Field { name, ty });
                }
                Ok(Schema { fields })
            }
        }
        d.deserialize_map(SchemaVisitor)
    }
}

pub fn validate_schema(schema: &Schema) -> Result<()> {
    if schema.fields.is_empty() {
        return Err(FormatError::EmptySchema);
    }
    let mut seen = HashSet::new();
    for f in &schema.fields {
        if f.name.is_empty() || !f.name.is_ascii() {
            return Err(FormatError::BadFieldName(f.name.clone()));
        }
        if !seen.insert(f.name.as_str()) {
            return Err(FormatError::DuplicateField(f.name.clone()));
        }
        if f.ty.shape.contains(&0) || (f.ty.kind == FieldKind::String && !f.ty.shape.is_empty()) {
            return Err(FormatError::BadShape(f.name.clone()));
        }
    }
    Ok(())
}

/// One field value. Numeric scalars are one-element vectors.
#[derive(Debug, Clone)]
pub enum Value {
    Bytes(Vec<u8>),
    Int32(Vec<i32>),
    Int64(Vec<i64>),
    Float32(Vec<f32>),
    Float64(Vec<f64>),
    Str(String),
}

impl Value {
    pub fn kind(&self) -> FieldKind {
        match self {
            Value::Bytes(_) => FieldKind::Bytes,
            Value::Int32(_) => FieldKind::Int32,
            Value::Int64(_) => FieldKind::Int64,
            Value::Float32(_) => FieldKind::Float32,
            Value::Float64(_) => FieldKind::Float64,
            Value::Str(_) => FieldKind::String,
        }
    }

    /// Element count (bytes for `Bytes` and `Str`).
    pub fn len(&self) -> usize {
        match self {
            Value::Bytes(v) => v.len(),
            Value::Int32(v) => v.len(),
            Value::Int64(v) => v.len(),
            Value::Float32(v) => v.len(),
            Value::Float64(v) => v.len(),
            Value::Str(s) => s.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub(crate) fn write_le(&self, out: &mut Vec<u8>) {
        match self {
            Value::Bytes(v) => out.extend_from_slice(v),
            Value::Int32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Value::Int64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Value::Float32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Value::Float64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Value::Str(s) => {
                out.extend_from_slice(&(s.len() as u32).to_le_bytes());
                out.extend_from_slice(s.as_bytes());
            }
        }
    }
}

// Floats compare by bit pattern so that round trips are checked bit-exactly.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            (Value::Int32(a), Value::Int32(b)) => a == b,
            (Value::Int64(a), Value::Int64(b)) => a == b,
            (Value::Float32(a), Value::Float32(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Value::Float64(a), Value::Float64(b)) => {
                a.len() == b.len() && a.iter().zip(b).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (Value::Str(a), Value::Str(b)) => a == b,
            _ => false,
        }
    }
}

impl Eq for Value {}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Sample {
    pub values: BTreeMap<String, Value>,
}

impl Sample {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, name: impl Into<String>, value: Value) -> Self {
        self.values.insert(name.into(), value);
        self
    }

    pub fn get(&self, name: &str) -> Option<&Value> {
        self.values.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Value) {
        self.values.insert(name.into(), value);
    }
}

/// Little-endian float32 triples stored in a `bytes` field.
pub fn f32s_from_le(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

pub fn f32s_to_le(values: &[f32]) -> Vec<u8> {
    let mut out = Vec::with_capacity(values.len() * 4);
    for v in values {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modelnet40_schema_is_valid() {
        validate_schema(&Schema::modelnet40()).unwrap();
    }

    #[test]
    fn empty_schema_rejected() {
        assert!(matches!(
            validate_schema(&Schema::new()),
            Err(FormatError::EmptySchema)
        ));
    }

    #[test]
    fn duplicate_field_rejected() {
        let s = Schema::new()
            .with("x", FieldType::scalar(FieldKind::Float32))
            .with("x", FieldType::scalar(FieldKind::Int32));
        assert!(matches!(validate_schema(&s), Err(FormatError::DuplicateField(n)) if n == "x"));
    }

    #[test]
    fn bad_shapes_rejected() {
        let zero = Schema::new().with("p", FieldType::tensor(FieldKind::Bytes, vec![3, 0]));
        assert!(matches!(
            validate_schema(&zero),
            Err(FormatError::BadShape(_))
        ));
        let shaped_string = Schema::new().with("s", FieldType::tensor(FieldKind::String, vec![2]));
        assert!(matches!(
            validate_schema(&shaped_string),
            Err(FormatError::BadShape(_))
        ));
    }

    #[test]
    fn non_ascii_name_rejected() {
        let s = Schema::new().with("größe", FieldType::scalar(FieldKind::Int32));
        assert!(matches!(
            validate_schema(&s),
            Err(FormatError::BadFieldName(_))
        ));
    }

    #[test]
    fn json_keeps_order_and_duplicates() {
        let json = r#"{"data": {"type": "bytes", "shape": [3]}, "label": {"type": "int32"}, "data": {"type": "int64"}}"#;
        let s: Schema = serde_json::from_str(json).unwrap();
        assert_eq!(s.fields.len(), 3);
        assert_eq!(s.fields[1].name, "label");
        assert!(matches!(
            validate_schema(&s),
            Err(FormatError::DuplicateField(_))
        ));

        let s = Schema::modelnet40();
        let back: Schema = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
    }

    #[test]
    fn nan_values_compare_bitwise() {
        let a = Value::Float32(vec![f32::NAN]);
        assert_eq!(a, a.clone());
        assert_ne!(Value::Float32(vec![0.0]), Value::Float32(vec![-0.0]));
    }

    #[test]
    fn sample_shape_checks() {
        let schema = Schema::modelnet40();
        let good = Sample::new()
            .with("data", Value::Bytes(vec![0; 24]))
            .with("normal", Value::Bytes(vec![0; 24]))
            .with("label", Value::Int32(vec![3]));
        schema.check_sample(&good).unwrap();
        let bad = good.clone().with("label", Value::Int32(vec![1, 2]));
        assert!(schema.check_sample(&bad).is_err());
        let wrong_kind = good.with("label", Value::Int64(vec![1]));
        assert!(schema.check_sample(&wrong_kind).is_err());
    }
}
