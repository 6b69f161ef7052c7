//! Output-schema descriptors for structured model replies.
//!
//! A descriptor is deliberately small: named fields with primitive, enum,
//! array, object or nullable types. It renders to a strict JSON Schema for
//! endpoints that support constrained decoding, and it validates replies
//! locally so that a non-compliant reply can be re-prompted.

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum SchemaType {
    String,
    Integer,
    Number,
    Boolean,
    Enum { values: Vec<String> },
    Array { items: Box<SchemaType> },
    Object { fields: Vec<SchemaField> },
    Nullable { inner: Box<SchemaType> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemaField {
    pub name: String,
    pub ty: SchemaType,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputSchema {
    pub name: String,
    pub fields: Vec<SchemaField>,
}

impl SchemaType {
    pub fn enumeration(values: &[&str]) -> Self {
        SchemaType::Enum {
            values: values.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn array(items: SchemaType) -> Self {
        SchemaType::Array {
            items: Box::new(items),
        }
    }

    pub fn object(fields: Vec<SchemaField>) -> Self {
        SchemaType::Object { fields }
    }

    pub fn nullable(inner: SchemaType) -> Self {
        SchemaType::Nullable {
            inner: Box::new(inner),
        }
    }

    fn to_json_schema(&self) -> Value {
        match self {
            SchemaType::String => json!({"type": "string"}),
            SchemaType::Integer => json!({"type": "integer"}),
            SchemaType::Number => json!({"type": "number"}),
            SchemaType::Boolean => json!({"type": "boolean"}),
            SchemaType::Enum { values } => json!({"type": "string", "enum": values}),
            SchemaType::Array { items } => json!({"type": "array", "items": items.to_json_schema()}),
            SchemaType::Object { fields } => object_schema(fields),
            SchemaType::Nullable { inner } => json!({"anyOf": [inner.to_json_schema(), {"type": "null"}]}),
        }
    }

    fn canonical(&self) -> Value {
        match self {
            SchemaType::Array { items } => json!({"type": "array", "items": items.canonical()}),
            SchemaType::Object { fields } => json!({"type": "object", "fields": canonical_fields(fields)}),
            SchemaType::Nullable { inner } => json!({"type": "nullable", "inner": inner.canonical()}),
            other => serde_json::to_value(other).unwrap_or(Value::Null),
        }
    }

    fn validate(&self, value: &Value, path: &str) -> Result<(), String> {
        let ok = match self {
            SchemaType::String => value.is_string(),
            SchemaType::Integer => value.is_i64() || value.is_u64(),
            SchemaType::Number => value.is_number(),
            SchemaType::Boolean => value.is_boolean(),
            SchemaType::Enum { values } => {
                let Some(s) = value.as_str() else {
                    return Err(format!("{path}: expected one of {values:?}"));
                };
                if !values.iter().any(|v| v == s) {
                    return Err(format!("{path}: {s:?} is not one of {values:?}"));
                }
                true
            }
            SchemaType::Array { items } => {
                let Some(arr) = value.as_array() else {
                    return Err(format!("{path}: expected array"));
                };
                for (i, v) in arr.iter().enumerate() {
                    items.validate(v, &format!("{path}[{i}]"))?;
                }
                true
            }
            SchemaType::Object { fields } => {
                validate_fields(fields, value, path)?;
                true
            }
            SchemaType::Nullable { inner } => {
                if value.is_null() {
                    return Ok(());
                }
                return inner.validate(value, path);
            }
        };
        if ok {
            Ok(())
        } else {
            Err(format!("{path}: expected {}", self.kind()))
        }
    }

    fn kind(&self) -> &'static str {
        match self {
            SchemaType::String => "string",
            SchemaType::Integer => "integer",
            SchemaType::Number => "number",
            SchemaType::Boolean => "boolean",
            SchemaType::Enum { .. } => "enum string",
            SchemaType::Array { .. } => "array",
            SchemaType::Object { .. } => "object",
            SchemaType::Nullable { .. } => "nullable",
        }
    }
}

pub fn field(name: &str, ty: SchemaType) -> SchemaField {
    SchemaField {
        name: name.to_string(),
        ty,
    }
}

fn object_schema(fields: &[SchemaField]) -> Value {
    let mut props = Map::new();
    for f in fields {
        props.insert(f.name.clone(), f.ty.to_json_schema());
    }
    let required: Vec<&str> = fields.iter().map(|f| f.name.as_str()).collect();
    json!({
        "type": "object",
        "properties": props,
        "required": required,
        "additionalProperties": false,
    })
}

fn canonical_fields(fields: &[SchemaField]) -> Value {
    let mut sorted: Vec<&SchemaField> = fields.iter().collect();
    sorted.sort_by(|a, b| a.name.cmp(&b.name));
    Value::Array(
        sorted
            .into_iter()
            .map(|f| json!({"name": f.name, "ty": f.ty.canonical()}))
            .collect(),
    )
}

fn validate_fields(fields: &[SchemaField], value: &Value, path: &str) -> Result<(), String> {
    let Some(obj) = value.as_object() else {
        return Err(format!("{path}: expected object"));
    };
    for f in fields {
        let child = if path.is_empty() {
            f.name.clone()
        } else {
            format!("{path}.{}", f.name)
        };
        match obj.get(&f.name) {
            Some(v) => f.ty.validate(v, &child)?,
            None => return Err(format!("{child}: missing")),
        }
    }
    Ok(())
}

impl OutputSchema {
    pub fn new(name: &str, fields: Vec<SchemaField>) -> Self {
        OutputSchema {
            name: name.to_string(),
            fields,
        }
    }

    /// Strict JSON Schema for `response_format`.
    pub fn to_json_schema(&self) -> Value {
        object_schema(&self.fields)
    }

    /// Order-insensitive form used for request digests.
    pub fn canonical(&self) -> Value {
        json!({"name": self.name, "fields": canonical_fields(&self.fields)})
    }

    pub fn validate(&self, value: &Value) -> Result<(), String> {
        validate_fields(&self.fields, value, "")
    }

    /// Extract and validate a JSON object from raw model text. Tolerates
    /// code fences and prose around the object.
    pub fn parse(&self, text: &str) -> Result<Value, String> {
        let value = extract_json_object(text)?;
        self.validate(&value)?;
        Ok(value)
    }
}

pub fn extract_json_object(text: &str) -> Result<Value, String> {
    let trimmed = text.trim();
    if let Ok(v) = serde_json::from_str::<Value>(trimmed) {
        return Ok(v);
    }
    let (Some(start), Some(end)) = (trimmed.find('{'), trimmed.rfind('}')) else {
        return Err("reply contains no JSON object".to_string());
    };
    if end < start {
        return Err("reply contains no JSON object".to_string());
    }
    serde_json::from_str(&trimmed[start..=end]).map_err(|e| format!("invalid JSON: {e}"))
}
