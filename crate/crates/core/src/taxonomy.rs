//! Two-level class hierarchy.
//!
//! A taxonomy is loaded from a TOML document:
//!
//! ```toml
//! version = "bst-1.0"
//!
//! [[top]]
//! code = "music"
//! name = "Music"
//! abbrev = "m"            # optional
//! children = [
//!     { code = "solo-percussion", name = "Solo percussion", abbrev = "m-sp" },
//! ]
//!
//! # Second-level classes may also be declared flat, pointing at their parent.
//! [[second]]
//! code = "multiple-instruments"
//! name = "Multiple instruments"
//! parent = "music"
//! ```
//!
//! Serialization always emits the nested form. The shipped default is the
//! Broad Sound Taxonomy (5 top-level, 23 second-level classes).

use std::collections::HashMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_CONFIG: &str = include_str!("../taxonomy/bst.toml");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Level {
    Top,
    Second,
}

impl fmt::Display for Level {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Level::Top => "top",
            Level::Second => "second",
        })
    }
}

impl FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Level::Top),
            "second" => Ok(Level::Second),
            other => Err(Error::InvalidParameter(format!(
                "level must be `top` or `second`, got `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassNode {
    pub code: String,
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub abbrev: Option<String>,
    pub level: Level,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_code: Option<String>,
}

/// Validated, immutable class hierarchy.
///
/// Nodes are kept in document order: each top-level class is followed by
/// its children.
#[derive(Debug, Clone)]
pub struct Taxonomy {
    version: String,
    nodes: Vec<ClassNode>,
    by_code: HashMap<String, usize>,
    by_abbrev: HashMap<String, usize>,
}

impl PartialEq for Taxonomy {
    fn eq(&self, other: &Self) -> bool {
        self.version == other.version && self.nodes == other.nodes
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigDoc {
    version: String,
    #[serde(default)]
    top: Vec<TopEntry>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    second: Vec<FlatSecondEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TopEntry {
    code: String,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    abbrev: Option<String>,
    #[serde(default)]
    children: Vec<ChildEntry>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ChildEntry {
    code: String,
    name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    abbrev: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FlatSecondEntry {
    code: String,
    name: String,
    parent: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    abbrev: Option<String>,
}

/// Parses and validates a taxonomy document.
pub fn load_taxonomy(config_text: &str) -> Result<Taxonomy> {
    Taxonomy::from_toml_str(config_text)
}

impl Taxonomy {
    /// The shipped Broad Sound Taxonomy.
    pub fn broad_sound() -> Taxonomy {
        Taxonomy::from_toml_str(DEFAULT_CONFIG).expect("shipped taxonomy config is valid")
    }

    pub fn from_toml_str(text: &str) -> Result<Taxonomy> {
        let doc: ConfigDoc = toml::from_str(text).map_err(|e| Error::Malformed(e.to_string()))?;
        Taxonomy::from_doc(doc)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Taxonomy> {
        let text = std::fs::read_to_string(path)?;
        Taxonomy::from_toml_str(&text)
    }

    fn from_doc(doc: ConfigDoc) -> Result<Taxonomy> {
        let mut nodes = Vec::new();
        let top_codes: Vec<&str> = doc.top.iter().map(|t| t.code.as_str()).collect();
        for flat in &doc.second {
            if !top_codes.contains(&flat.parent.as_str()) {
                return Err(Error::DanglingParent {
                    child: flat.code.clone(),
                    parent: flat.parent.clone(),
                });
            }
        }
        for top in &doc.top {
            nodes.push(ClassNode {
                code: top.code.clone(),
                name: top.name.clone(),
                abbrev: top.abbrev.clone(),
                level: Level::Top,
                parent_code: None,
            });
            let nested = top.children.iter().map(|c| (&c.code, &c.name, &c.abbrev));
            let flat = doc
                .second
                .iter()
                .filter(|s| s.parent == top.code)
                .map(|s| (&s.code, &s.name, &s.abbrev));
            let before = nodes.len();
            for (code, name, abbrev) in nested.chain(flat) {
                nodes.push(ClassNode {
                    code: code.clone(),
                    name: name.clone(),
                    abbrev: abbrev.clone(),
                    level: Level::Second,
                    parent_code: Some(top.code.clone()),
                });
            }
            if nodes.len() == before {
                return Err(Error::EmptyTopClass(top.code.clone()));
            }
        }
        Taxonomy::from_nodes(doc.version, nodes)
    }

    fn from_nodes(version: String, nodes: Vec<ClassNode>) -> Result<Taxonomy> {
        if nodes.is_empty() {
            return Err(Error::Malformed("taxonomy has no classes".into()));
        }
        let mut by_code = HashMap::with_capacity(nodes.len());
        let mut by_abbrev = HashMap::new();
        for (i, node) in nodes.iter().enumerate() {
            if node.code.is_empty() {
                return Err(Error::Malformed("empty class code".into()));
            }
            if by_code.insert(node.code.clone(), i).is_some() {
                return Err(Error::DuplicateCode(node.code.clone()));
            }
            if let Some(abbrev) = &node.abbrev {
                if by_abbrev.insert(abbrev.clone(), i).is_some() {
                    return Err(Error::DuplicateCode(abbrev.clone()));
                }
            }
        }
        for node in &nodes {
            if let Some(abbrev) = &node.abbrev {
                if let Some(&other) = by_code.get(abbrev) {
                    if nodes[other].code != node.code {
                        return Err(Error::DuplicateCode(abbrev.clone()));
                    }
                }
            }
        }
        Ok(Taxonomy {
            version,
            nodes,
            by_code,
            by_abbrev,
        })
    }

    /// Serializes back to the nested document form.
    pub fn to_toml_string(&self) -> String {
        let top = self
            .top_codes()
            .map(|code| {
                let node = self.node(code).expect("top code exists");
                TopEntry {
                    code: node.code.clone(),
                    name: node.name.clone(),
                    abbrev: node.abbrev.clone(),
                    children: self
                        .children_of(code)
                        .map(|c| ChildEntry {
                            code: c.code.clone(),
                            name: c.name.clone(),
                            abbrev: c.abbrev.clone(),
                        })
                        .collect(),
                }
            })
            .collect();
        let doc = ConfigDoc {
            version: self.version.clone(),
            top,
            second: Vec::new(),
        };
        toml::to_string(&doc).expect("taxonomy document serializes")
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn nodes(&self) -> &[ClassNode] {
        &self.nodes
    }

    pub fn node(&self, code: &str) -> Option<&ClassNode> {
        self.by_code.get(code).map(|&i| &self.nodes[i])
    }

    /// Looks a class up by code, falling back to its abbreviation.
    pub fn resolve(&self, code_or_abbrev: &str) -> Option<&ClassNode> {
        self.node(code_or_abbrev).or_else(|| {
            self.by_abbrev
                .get(code_or_abbrev)
                .map(|&i| &self.nodes[i])
        })
    }

    pub fn codes(&self, level: Level) -> impl Iterator<Item = &str> {
        self.nodes
            .iter()
            .filter(move |n| n.level == level)
            .map(|n| n.code.as_str())
    }

    pub fn top_codes(&self) -> impl Iterator<Item = &str> {
        self.codes(Level::Top)
    }

    pub fn second_codes(&self) -> impl Iterator<Item = &str> {
        self.codes(Level::Second)
    }

    pub fn children_of<'a>(&'a self, top: &'a str) -> impl Iterator<Item = &'a ClassNode> + 'a {
        self.nodes
            .iter()
            .filter(move |n| n.parent_code.as_deref() == Some(top))
    }

    pub fn is_valid(&self, code: &str, level: Level) -> bool {
        self.node(code).is_some_and(|n| n.level == level)
    }

    /// Returns the top-level ancestor of `code`; top-level codes map to themselves.
    pub fn parent_of(&self, code: &str) -> Result<&str> {
        let node = self.node(code).ok_or_else(|| Error::UnknownCode {
            code: code.to_string(),
            index: None,
        })?;
        Ok(node.parent_code.as_deref().unwrap_or(&node.code))
    }

    /// Element-wise [`Taxonomy::parent_of`].
    pub fn collapse_labels<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<String>> {
        labels
            .iter()
            .enumerate()
            .map(|(i, label)| {
                self.parent_of(label.as_ref())
                    .map(str::to_string)
                    .map_err(|_| Error::UnknownCode {
                        code: label.as_ref().to_string(),
                        index: Some(i),
                    })
            })
            .collect()
    }

    /// Maps a second-level label to `level`; identity for [`Level::Second`].
    pub fn label_at<'a>(&'a self, code: &'a str, level: Level) -> Result<&'a str> {
        match level {
            Level::Second => {
                if self.is_valid(code, Level::Second) {
                    Ok(code)
                } else {
                    Err(Error::UnknownCode {
                        code: code.to_string(),
                        index: None,
                    })
                }
            }
            Level::Top => self.parent_of(code),
        }
    }
}
