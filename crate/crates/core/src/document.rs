//! Context files.
//!
//! One document model backs two encodings: canonical CBOR (`.schcb`) and
//! JSON text (`.schct`). The CBOR form uses definite lengths and map keys
//! sorted by encoded length, then bytewise, so saving the same context
//! always yields the same bytes.
//!
//! ```text
//! { "format_version": 1, "mode": "flat" | "layered",
//!   "layout": { "dispatch_bits": 3, ... },
//!   "rules": [ { "id": 0, "layer": "network"?, "fields": [
//!       { "fid": "IPv6.V", "pos": 0, "dir": "bi", "tv": 6, "mo": "equal", "cda": "not-sent" } ] } ] }
//! ```
//!
//! In the text form a target value may also be written as a `"0x…"` string.

use std::io::Cursor;
use std::path::Path;

use ciborium::Value;
use serde::de::{self, Deserializer, Visitor};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::context::{
    CdAction, Context, DirectionIndicator, FieldDescriptor, FlatContext, FlatRule, LayerRule,
    LayeredContext, MatchingOperator, Mode, RuleIdLayout, Violation,
};
use crate::packet::{FieldId, Layer};

pub const FORMAT_VERSION: u32 = 1;
pub const BINARY_EXTENSION: &str = "schcb";
pub const TEXT_EXTENSION: &str = "schct";

#[derive(Debug, Error)]
pub enum DocumentError {
    #[error("malformed context document: {0}")]
    MalformedDocument(String),
    #[error("unsupported format version {found} (this build reads version {FORMAT_VERSION})")]
    UnsupportedVersion { found: u64 },
    #[error("context violates {} rule constraints, first: {}", .0.len(), .0[0])]
    ValidationFailed(Vec<Violation>),
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// Serialized form of a context.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContextDocument {
    pub format_version: u32,
    pub mode: Mode,
    pub layout: RuleIdLayout,
    pub rules: Vec<RuleEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RuleEntry {
    pub id: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub layer: Option<Layer>,
    pub fields: Vec<FieldEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FieldEntry {
    pub fid: FieldId,
    pub pos: u8,
    pub dir: DirectionIndicator,
    #[serde(
        default,
        skip_serializing_if = "Option::is_none",
        deserialize_with = "target_value"
    )]
    pub tv: Option<u64>,
    pub mo: MatchingOperator,
    pub cda: CdAction,
}

fn target_value<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u64>, D::Error> {
    struct TargetVisitor;

    impl<'de> Visitor<'de> for TargetVisitor {
        type Value = Option<u64>;

        fn expecting(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
            f.write_str("an unsigned integer or a 0x-prefixed hex string")
        }

        fn visit_u64<E: de::Error>(self, v: u64) -> Result<Self::Value, E> {
            Ok(Some(v))
        }

        fn visit_i64<E: de::Error>(self, v: i64) -> Result<Self::Value, E> {
            u64::try_from(v)
                .map(Some)
                .map_err(|_| E::custom(format!("negative target value {v}")))
        }

        fn visit_u128<E: de::Error>(self, v: u128) -> Result<Self::Value, E> {
            u64::try_from(v)
                .map(Some)
                .map_err(|_| E::custom("target value exceeds 64 bits"))
        }

        fn visit_i128<E: de::Error>(self, v: i128) -> Result<Self::Value, E> {
            u64::try_from(v)
                .map(Some)
                .map_err(|_| E::custom("target value outside 0..2^64"))
        }

        fn visit_str<E: de::Error>(self, v: &str) -> Result<Self::Value, E> {
            let digits = v
                .strip_prefix("0x")
                .or_else(|| v.strip_prefix("0X"))
                .ok_or_else(|| E::custom(format!("target string {v:?} lacks a 0x prefix")))?;
            u64::from_str_radix(&digits.replace('_', ""), 16)
                .map(Some)
                .map_err(|e| E::custom(format!("bad hex target {v:?}: {e}")))
        }

        fn visit_none<E: de::Error>(self) -> Result<Self::Value, E> {
            Ok(None)
        }

        fn visit_unit<E: de::Error>(self) -> Result<Self::Value, E> {
            Ok(None)
        }

        fn visit_some<D2: Deserializer<'de>>(self, d: D2) -> Result<Self::Value, D2::Error> {
            d.deserialize_any(self)
        }
    }

    d.deserialize_any(TargetVisitor)
}

impl From<&FieldDescriptor> for FieldEntry {
    fn from(d: &FieldDescriptor) -> Self {
        Self {
            fid: d.field_id,
            pos: d.position,
            dir: d.direction,
            tv: d.target_value,
            mo: d.matching_operator,
            cda: d.cd_action,
        }
    }
}

impl From<&FieldEntry> for FieldDescriptor {
    fn from(e: &FieldEntry) -> Self {
        Self {
            field_id: e.fid,
            position: e.pos,
            direction: e.dir,
            target_value: e.tv,
            matching_operator: e.mo,
            cd_action: e.cda,
        }
    }
}

pub(crate) fn field_entries(fields: &[FieldDescriptor]) -> Vec<FieldEntry> {
    fields.iter().map(FieldEntry::from).collect()
}

pub(crate) fn descriptors(entries: &[FieldEntry]) -> Vec<FieldDescriptor> {
    entries.iter().map(FieldDescriptor::from).collect()
}

impl ContextDocument {
    pub fn from_context(ctx: &Context) -> Self {
        let rules = match ctx {
            Context::Flat(c) => c
                .rules
                .iter()
                .map(|r| RuleEntry {
                    id: r.rule_id,
                    layer: None,
                    fields: field_entries(&r.fields),
                })
                .collect(),
            Context::Layered(c) => Layer::ALL
                .iter()
                .flat_map(|&l| c.rules(l))
                .map(|r| RuleEntry {
                    id: r.local_id,
                    layer: Some(r.layer),
                    fields: field_entries(&r.fields),
                })
                .collect(),
        };
        Self {
            format_version: FORMAT_VERSION,
            mode: ctx.mode(),
            layout: *ctx.layout(),
            rules,
        }
    }

    /// Builds the context without validating it.
    pub fn to_context(&self) -> Result<Context, DocumentError> {
        match self.mode {
            Mode::Flat => {
                let mut rules = Vec::with_capacity(self.rules.len());
                for r in &self.rules {
                    if let Some(layer) = r.layer {
                        return Err(DocumentError::MalformedDocument(format!(
                            "flat rule {} carries a layer ({layer})",
                            r.id
                        )));
                    }
                    rules.push(FlatRule {
                        rule_id: r.id,
                        fields: descriptors(&r.fields),
                    });
                }
                Ok(FlatContext::new(rules, self.layout).into())
            }
            Mode::Layered => {
                let mut ctx = LayeredContext::new(self.layout);
                for r in &self.rules {
                    let layer = r.layer.ok_or_else(|| {
                        DocumentError::MalformedDocument(format!(
                            "layered rule {} has no layer",
                            r.id
                        ))
                    })?;
                    ctx.push(LayerRule {
                        local_id: r.id,
                        layer,
                        fields: descriptors(&r.fields),
                    });
                }
                Ok(ctx.into())
            }
        }
    }
}

/// Encoding of a context or registry file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Encoding {
    Binary,
    Text,
}

impl Encoding {
    /// `.schct` selects text; anything else is binary.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(TEXT_EXTENSION) | Some("json") => Encoding::Text,
            _ => Encoding::Binary,
        }
    }

    /// Text documents start with `{` after optional whitespace.
    pub fn detect(bytes: &[u8]) -> Self {
        match bytes.iter().find(|b| !b.is_ascii_whitespace()) {
            Some(b'{') => Encoding::Text,
            _ => Encoding::Binary,
        }
    }
}

fn ensure_valid(ctx: &Context) -> Result<(), DocumentError> {
    let violations = ctx.validate();
    if violations.is_empty() {
        Ok(())
    } else {
        Err(DocumentError::ValidationFailed(violations))
    }
}

/// Canonical CBOR encoding of a valid context.
pub fn save_context_binary(ctx: &Context) -> Result<Vec<u8>, DocumentError> {
    ensure_valid(ctx)?;
    encode_canonical(&ContextDocument::from_context(ctx))
}

/// Pretty-printed JSON encoding of a valid context.
pub fn save_context_text(ctx: &Context) -> Result<Vec<u8>, DocumentError> {
    ensure_valid(ctx)?;
    encode_text(&ContextDocument::from_context(ctx))
}

pub fn save_context(ctx: &Context, encoding: Encoding) -> Result<Vec<u8>, DocumentError> {
    match encoding {
        Encoding::Binary => save_context_binary(ctx),
        Encoding::Text => save_context_text(ctx),
    }
}

/// Loads either encoding and validates the result.
pub fn load_context(bytes: &[u8]) -> Result<Context, DocumentError> {
    let doc: ContextDocument = decode_versioned(bytes)?;
    let ctx = doc.to_context()?;
    ensure_valid(&ctx)?;
    Ok(ctx)
}

pub fn read_context_file(path: &Path) -> Result<Context, DocumentError> {
    load_context(&read_file(path)?)
}

pub fn write_context_file(path: &Path, ctx: &Context) -> Result<(), DocumentError> {
    let bytes = save_context(ctx, Encoding::for_path(path))?;
    write_atomic(path, &bytes)
}

pub(crate) fn read_file(path: &Path) -> Result<Vec<u8>, DocumentError> {
    std::fs::read(path).map_err(|source| DocumentError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Writes through a sibling temporary file and a rename.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), DocumentError> {
    let io = |source| DocumentError::Io {
        path: path.display().to_string(),
        source,
    };
    let mut tmp_name = path.file_name().unwrap_or_default().to_os_string();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, bytes).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

pub(crate) fn encode_canonical<T: Serialize>(doc: &T) -> Result<Vec<u8>, DocumentError> {
    let mut value =
        Value::serialized(doc).map_err(|e| DocumentError::MalformedDocument(e.to_string()))?;
    canonicalize(&mut value);
    let mut out = Vec::new();
    ciborium::into_writer(&value, &mut out)
        .map_err(|e| DocumentError::MalformedDocument(e.to_string()))?;
    Ok(out)
}

pub(crate) fn encode_text<T: Serialize>(doc: &T) -> Result<Vec<u8>, DocumentError> {
    let mut out = serde_json::to_vec_pretty(doc)
        .map_err(|e| DocumentError::MalformedDocument(e.to_string()))?;
    out.push(b'\n');
    Ok(out)
}

/// Sorts every map by encoded key: shorter first, then bytewise.
fn canonicalize(value: &mut Value) {
    match value {
        Value::Map(entries) => {
            for (k, v) in entries.iter_mut() {
                canonicalize(k);
                canonicalize(v);
            }
            entries.sort_by_cached_key(|(k, _)| {
                let mut key = Vec::new();
                ciborium::into_writer(k, &mut key).expect("writing to a Vec cannot fail");
                (key.len(), key)
            });
        }
        Value::Array(items) => items.iter_mut().for_each(canonicalize),
        Value::Tag(_, inner) => canonicalize(inner),
        _ => {}
    }
}

/// Decodes a document of either encoding after checking `format_version`.
pub(crate) fn decode_versioned<T: serde::de::DeserializeOwned>(
    bytes: &[u8],
) -> Result<T, DocumentError> {
    let malformed = |e: &dyn std::fmt::Display| DocumentError::MalformedDocument(e.to_string());
    match Encoding::detect(bytes) {
        Encoding::Text => {
            let value: serde_json::Value =
                serde_json::from_slice(bytes).map_err(|e| malformed(&e))?;
            check_version(
                value
                    .get("format_version")
                    .and_then(serde_json::Value::as_u64),
            )?;
            serde_json::from_value(value).map_err(|e| malformed(&e))
        }
        Encoding::Binary => {
            let mut cursor = Cursor::new(bytes);
            let value: Value = ciborium::from_reader(&mut cursor).map_err(|e| malformed(&e))?;
            if cursor.position() as usize != bytes.len() {
                return Err(DocumentError::MalformedDocument(format!(
                    "{} trailing octets after the document",
                    bytes.len() - cursor.position() as usize
                )));
            }
            let version = value.as_map().and_then(|m| {
                m.iter()
                    .find(|(k, _)| k.as_text() == Some("format_version"))
                    .and_then(|(_, v)| v.as_integer())
                    .and_then(|i| u64::try_from(i).ok())
            });
            check_version(version)?;
            value.deserialized().map_err(|e| malformed(&e))
        }
    }
}

fn check_version(version: Option<u64>) -> Result<(), DocumentError> {
    match version {
        None => Err(DocumentError::MalformedDocument(
            "missing format_version".into(),
        )),
        Some(v) if v == u64::from(FORMAT_VERSION) => Ok(()),
        Some(found) => Err(DocumentError::UnsupportedVersion { found }),
    }
}
