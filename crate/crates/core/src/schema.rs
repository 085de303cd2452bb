//! Hierarchical decomposition schemas.
//!
//! A schema is a tree of categories. Each sibling group carries exactly one
//! fallback category, which is where classification lands when nothing else
//! fits. Schemas are loaded from JSON documents of the form
//!
//! ```json
//! {
//!   "name": "fig2",
//!   "max_depth": 8,
//!   "fields": [{"name": "subject", "description": "...", "required": false}],
//!   "nodes": [
//!     {"id": "command", "description": "...", "children": [...]},
//!     {"id": "miscellaneous", "description": "...", "fallback": true}
//!   ]
//! }
//! ```
//!
//! `fields` at the top level are extracted while choosing among the root
//! categories; a node's own `fields` are extracted while choosing among its
//! children.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_MAX_DEPTH: usize = 8;

/// Category identifier, `[a-z][a-z0-9_]*`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct CategoryId(String);

impl CategoryId {
    pub fn new(value: impl Into<String>) -> Result<Self> {
        let value = value.into();
        if is_valid_id(&value) {
            Ok(CategoryId(value))
        } else {
            Err(Error::Parse(format!("invalid category id `{value}`")))
        }
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

fn is_valid_id(s: &str) -> bool {
    let mut chars = s.chars();
    match chars.next() {
        Some(c) if c.is_ascii_lowercase() => {}
        _ => return false,
    }
    chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

impl<'de> Deserialize<'de> for CategoryId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        CategoryId::new(s).map_err(serde::de::Error::custom)
    }
}

impl FromStr for CategoryId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        CategoryId::new(s)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for CategoryId {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

impl PartialEq<str> for CategoryId {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for CategoryId {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSpec {
    pub name: String,
    pub description: String,
    #[serde(default)]
    pub required: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaNode {
    pub id: CategoryId,
    pub description: String,
    #[serde(default, rename = "fallback", skip_serializing_if = "is_false")]
    pub is_fallback: bool,
    #[serde(default, rename = "fields", skip_serializing_if = "Vec::is_empty")]
    pub extract_fields: Vec<FieldSpec>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub children: Vec<SchemaNode>,
}

impl SchemaNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }
}

fn is_false(b: &bool) -> bool {
    !*b
}

fn default_max_depth() -> usize {
    DEFAULT_MAX_DEPTH
}

/// A validated category hierarchy. Immutable once loaded.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DecompositionSchema {
    pub name: String,
    #[serde(default = "default_max_depth")]
    pub max_depth: usize,
    #[serde(default, rename = "fields", skip_serializing_if = "Vec::is_empty")]
    pub root_fields: Vec<FieldSpec>,
    #[serde(rename = "nodes")]
    pub root_children: Vec<SchemaNode>,
}

/// Parses and validates a schema document.
pub fn load_schema(document: &str) -> Result<DecompositionSchema> {
    let schema: DecompositionSchema =
        serde_json::from_str(document).map_err(|e| Error::Parse(e.to_string()))?;
    schema.validate()?;
    Ok(schema)
}

pub fn load_schema_file(path: impl AsRef<std::path::Path>) -> Result<DecompositionSchema> {
    let text = std::fs::read_to_string(path)?;
    load_schema(&text)
}

/// Serializes a schema back into its document form.
pub fn serialize_schema(schema: &DecompositionSchema) -> String {
    serde_json::to_string_pretty(schema).expect("schema serialization is infallible")
}

fn join_path(prefix: &[CategoryId]) -> String {
    if prefix.is_empty() {
        "<root>".to_string()
    } else {
        prefix.iter().map(CategoryId::as_str).collect::<Vec<_>>().join("/")
    }
}

impl DecompositionSchema {
    pub fn validate(&self) -> Result<()> {
        if self.max_depth == 0 {
            return Err(Error::validation("<root>", "max_depth must be positive"));
        }
        if self.root_children.is_empty() {
            return Err(Error::validation("<root>", "schema has no categories"));
        }
        check_fields(&self.root_fields, "<root>")?;
        let mut path = Vec::new();
        validate_group(&self.root_children, &mut path, 1, self.max_depth)
    }

    /// Children of the node addressed by `prefix` (the root group for `[]`).
    pub fn children_at(&self, prefix: &[CategoryId]) -> Result<&[SchemaNode]> {
        match prefix.split_last() {
            None => Ok(&self.root_children),
            Some(_) => {
                let node = self.node_at(prefix).ok_or_else(|| Error::NotFound(join_path(prefix)))?;
                if node.is_leaf() {
                    Err(Error::LeafNode(join_path(prefix)))
                } else {
                    Ok(&node.children)
                }
            }
        }
    }

    /// Fields extracted while classifying among the children of `prefix`.
    pub fn fields_at(&self, prefix: &[CategoryId]) -> Result<&[FieldSpec]> {
        if prefix.is_empty() {
            return Ok(&self.root_fields);
        }
        let node = self.node_at(prefix).ok_or_else(|| Error::NotFound(join_path(prefix)))?;
        Ok(&node.extract_fields)
    }

    pub fn node_at(&self, path: &[CategoryId]) -> Option<&SchemaNode> {
        let (first, rest) = path.split_first()?;
        let mut node = self.root_children.iter().find(|n| &n.id == first)?;
        for id in rest {
            node = node.children.iter().find(|n| &n.id == id)?;
        }
        Some(node)
    }

    /// True when `path` addresses some node, i.e. is a prefix of a leaf path.
    pub fn is_valid_prefix(&self, path: &[CategoryId]) -> bool {
        !path.is_empty() && self.node_at(path).is_some()
    }

    pub fn depth(&self) -> usize {
        fn group_depth(nodes: &[SchemaNode]) -> usize {
            nodes.iter().map(|n| 1 + group_depth(&n.children)).max().unwrap_or(0)
        }
        group_depth(&self.root_children)
    }

    pub fn leaf_count(&self) -> usize {
        self.enumerate_paths().len()
    }

    /// Root-to-leaf paths in depth-first document order.
    pub fn enumerate_paths(&self) -> Vec<Vec<CategoryId>> {
        let mut out = Vec::new();
        let mut stack: Vec<CategoryId> = Vec::new();
        collect_paths(&self.root_children, &mut stack, &mut out);
        out
    }

    /// The fallback child of the node addressed by `prefix`.
    pub fn fallback_child(&self, prefix: &[CategoryId]) -> Result<&CategoryId> {
        let children = self.children_at(prefix)?;
        children
            .iter()
            .find(|n| n.is_fallback)
            .map(|n| &n.id)
            .ok_or_else(|| Error::validation(join_path(prefix), "group has no fallback"))
    }
}

fn collect_paths(nodes: &[SchemaNode], stack: &mut Vec<CategoryId>, out: &mut Vec<Vec<CategoryId>>) {
    for node in nodes {
        stack.push(node.id.clone());
        if node.is_leaf() {
            out.push(stack.clone());
        } else {
            collect_paths(&node.children, stack, out);
        }
        stack.pop();
    }
}

pub fn enumerate_paths(schema: &DecompositionSchema) -> Vec<Vec<CategoryId>> {
    schema.enumerate_paths()
}

pub fn fallback_child(schema: &DecompositionSchema, prefix: &[CategoryId]) -> Result<CategoryId> {
    schema.fallback_child(prefix).cloned()
}

fn check_fields(fields: &[FieldSpec], at: &str) -> Result<()> {
    for (i, f) in fields.iter().enumerate() {
        if f.name.trim().is_empty() {
            return Err(Error::validation(at, format!("field #{i} has an empty name")));
        }
        if f.name == crate::decomp::CATEGORY_FIELD {
            return Err(Error::validation(at, format!("field name `{}` is reserved", f.name)));
        }
        if fields[..i].iter().any(|g| g.name == f.name) {
            return Err(Error::validation(at, format!("duplicate field `{}`", f.name)));
        }
    }
    Ok(())
}

fn validate_group(
    nodes: &[SchemaNode],
    path: &mut Vec<CategoryId>,
    level: usize,
    max_depth: usize,
) -> Result<()> {
    let at = join_path(path);
    if level > max_depth {
        return Err(Error::validation(at, format!("depth exceeds max_depth {max_depth}")));
    }
    if nodes.len() < 2 {
        return Err(Error::validation(
            at,
            "sibling group needs a fallback plus at least one substantive category",
        ));
    }
    let fallbacks = nodes.iter().filter(|n| n.is_fallback).count();
    if fallbacks != 1 {
        return Err(Error::validation(
            at,
            format!("sibling group must have exactly one fallback, found {fallbacks}"),
        ));
    }
    for (i, node) in nodes.iter().enumerate() {
        path.push(node.id.clone());
        let here = join_path(path);
        if nodes[..i].iter().any(|n| n.id == node.id) {
            return Err(Error::validation(here, "duplicate sibling id"));
        }
        if node.description.trim().is_empty() {
            return Err(Error::validation(here, "empty description"));
        }
        if node.is_fallback && !node.children.is_empty() {
            return Err(Error::validation(here, "fallback category cannot have children"));
        }
        check_fields(&node.extract_fields, &here)?;
        if !node.children.is_empty() {
            validate_group(&node.children, path, level + 1, max_depth)?;
        }
        path.pop();
    }
    Ok(())
}
