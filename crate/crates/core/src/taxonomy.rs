//! Class vocabulary plus the mapping from referable categories onto raw
//! label classes.
//!
//! A category is either an *identity* (one raw class under a friendlier
//! name, e.g. "road marking" for lane marking) or an *inclusion* (a union
//! of raw classes, e.g. "vehicle"). Attributes refine a category to a
//! subset of its classes; relations name a reference category and the
//! connective used to describe it.
//!
//! The document format is TOML with four arrays of tables: `classes`,
//! `categories`, `attributes` and `relations`. See `data/refsegrs.toml`.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

const BUNDLED_REFSEGRS: &str = include_str!("../data/refsegrs.toml");

#[derive(Debug, Error)]
pub enum TaxonomyError {
    #[error("reading taxonomy: {0}")]
    Io(#[from] std::io::Error),
    #[error("taxonomy parse error: {0}")]
    Parse(String),
    #[error("{entry}: class id {id} is not declared in classes")]
    DanglingClassId { entry: String, id: u8 },
    #[error("{entry}: category has no member classes")]
    EmptyCategory { entry: String },
    #[error("{entry}: connective {connective:?} is not a {kind} connective")]
    ConnectiveKindMismatch {
        entry: String,
        connective: String,
        kind: RelationKind,
    },
    #[error("{0}")]
    Invalid(Violation),
    #[error("unknown category {0:?}")]
    UnknownCategory(String),
    #[error("unknown attribute {0:?}")]
    UnknownAttribute(String),
    #[error("attribute {attribute:?} does not refine category {category:?}")]
    AttributeCategoryMismatch { attribute: String, category: String },
    #[error("unknown relation {0:?}")]
    UnknownRelation(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassEntry {
    pub id: u8,
    pub name: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CategoryKind {
    Identity,
    Inclusion,
}

fn is_true(b: &bool) -> bool {
    *b
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReferableCategory {
    pub name: String,
    pub kind: CategoryKind,
    pub member_ids: BTreeSet<u8>,
    /// `false` for groups that only serve as relation references (the
    /// parking area, for instance) and never head an expression.
    #[serde(default = "yes", skip_serializing_if = "is_true")]
    pub referable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeRule {
    pub name: String,
    pub category: String,
    pub refined_ids: BTreeSet<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RelationKind {
    Adjacency,
    Containment,
}

impl fmt::Display for RelationKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Adjacency => "adjacency",
            Self::Containment => "containment",
        })
    }
}

/// How much of an instance's surroundings a containment relation demands.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContainmentStrength {
    On,
    Surrounded,
}

pub const ADJACENCY_CONNECTIVES: [&str; 3] = ["with", "along", "along with"];
pub const CONTAINMENT_CONNECTIVES: [&str; 4] = ["surrounded by", "in", "on", "driving on"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelationRule {
    /// Full surface phrase, e.g. "in the parking area". Always starts with
    /// the connective.
    pub name: String,
    pub kind: RelationKind,
    pub reference_category: String,
    pub connective: String,
    /// Categories allowed as the subject; empty means any.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub subjects: Vec<String>,
}

impl RelationRule {
    pub fn connective_matches_kind(&self) -> bool {
        match self.kind {
            RelationKind::Adjacency => ADJACENCY_CONNECTIVES.contains(&self.connective.as_str()),
            RelationKind::Containment => {
                CONTAINMENT_CONNECTIVES.contains(&self.connective.as_str())
            }
        }
    }

    pub fn strength(&self) -> Option<ContainmentStrength> {
        match (self.kind, self.connective.as_str()) {
            (RelationKind::Adjacency, _) => None,
            (RelationKind::Containment, "surrounded by") => Some(ContainmentStrength::Surrounded),
            (RelationKind::Containment, _) => Some(ContainmentStrength::On),
        }
    }

    pub fn allows_subject(&self, category: &str) -> bool {
        category != self.reference_category
            && (self.subjects.is_empty() || self.subjects.iter().any(|s| s == category))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Taxonomy {
    pub classes: Vec<ClassEntry>,
    pub categories: Vec<ReferableCategory>,
    #[serde(default)]
    pub attributes: Vec<AttributeRule>,
    #[serde(default)]
    pub relations: Vec<RelationRule>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ViolationKind {
    DuplicateClassId(u8),
    DuplicateName,
    DanglingClassId(u8),
    EmptyCategory,
    IdentityArity(usize),
    UnknownCategory(String),
    EmptyRefinement,
    RefinementNotSubset(Vec<u8>),
    ConnectiveKindMismatch,
    NameLacksConnective,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    pub entry: String,
    pub kind: ViolationKind,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: ", self.entry)?;
        match &self.kind {
            ViolationKind::DuplicateClassId(id) => write!(f, "duplicate class id {id}"),
            ViolationKind::DuplicateName => f.write_str("duplicate name"),
            ViolationKind::DanglingClassId(id) => write!(f, "class id {id} is not declared"),
            ViolationKind::EmptyCategory => f.write_str("no member classes"),
            ViolationKind::IdentityArity(n) => {
                write!(f, "identity category must have exactly one member, has {n}")
            }
            ViolationKind::UnknownCategory(c) => write!(f, "unknown category {c:?}"),
            ViolationKind::EmptyRefinement => f.write_str("attribute refines to no classes"),
            ViolationKind::RefinementNotSubset(ids) => {
                write!(f, "refined ids {ids:?} are not members of the category")
            }
            ViolationKind::ConnectiveKindMismatch => f.write_str("connective does not match kind"),
            ViolationKind::NameLacksConnective => {
                f.write_str("relation name must start with its connective")
            }
        }
    }
}

fn violation(entry: impl Into<String>, kind: ViolationKind) -> Violation {
    Violation {
        entry: entry.into(),
        kind,
    }
}

/// Every broken invariant, in document order. Empty iff the taxonomy is
/// usable.
pub fn validate_taxonomy(tax: &Taxonomy) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut names = HashSet::new();
    for c in &tax.classes {
        let entry = format!("class {:?}", c.name);
        if !ids.insert(c.id) {
            out.push(violation(&entry, ViolationKind::DuplicateClassId(c.id)));
        }
        if !names.insert(c.name.as_str()) {
            out.push(violation(&entry, ViolationKind::DuplicateName));
        }
    }

    let mut cat_names = HashSet::new();
    for cat in &tax.categories {
        let entry = format!("category {:?}", cat.name);
        if !cat_names.insert(cat.name.as_str()) {
            out.push(violation(&entry, ViolationKind::DuplicateName));
        }
        if cat.member_ids.is_empty() {
            out.push(violation(&entry, ViolationKind::EmptyCategory));
        }
        for &id in &cat.member_ids {
            if !ids.contains(&id) {
                out.push(violation(&entry, ViolationKind::DanglingClassId(id)));
            }
        }
        if cat.kind == CategoryKind::Identity && cat.member_ids.len() != 1 {
            out.push(violation(&entry, ViolationKind::IdentityArity(cat.member_ids.len())));
        }
    }

    let mut attr_keys = HashSet::new();
    for attr in &tax.attributes {
        let entry = format!("attribute {:?} of {:?}", attr.name, attr.category);
        if !attr_keys.insert((attr.name.as_str(), attr.category.as_str())) {
            out.push(violation(&entry, ViolationKind::DuplicateName));
        }
        if attr.refined_ids.is_empty() {
            out.push(violation(&entry, ViolationKind::EmptyRefinement));
        }
        for &id in &attr.refined_ids {
            if !ids.contains(&id) {
                out.push(violation(&entry, ViolationKind::DanglingClassId(id)));
            }
        }
        match tax.category(&attr.category) {
            None => out.push(violation(
                &entry,
                ViolationKind::UnknownCategory(attr.category.clone()),
            )),
            Some(cat) => {
                let extra: Vec<u8> = attr.refined_ids.difference(&cat.member_ids).copied().collect();
                if !extra.is_empty() {
                    out.push(violation(&entry, ViolationKind::RefinementNotSubset(extra)));
                }
            }
        }
    }

    let mut rel_names = HashSet::new();
    for rel in &tax.relations {
        let entry = format!("relation {:?}", rel.name);
        if !rel_names.insert(rel.name.as_str()) {
            out.push(violation(&entry, ViolationKind::DuplicateName));
        }
        if tax.category(&rel.reference_category).is_none() {
            out.push(violation(
                &entry,
                ViolationKind::UnknownCategory(rel.reference_category.clone()),
            ));
        }
        if !rel.connective_matches_kind() {
            out.push(violation(&entry, ViolationKind::ConnectiveKindMismatch));
        }
        let phrase_ok = rel
            .name
            .strip_prefix(rel.connective.as_str())
            .and_then(|rest| rest.strip_prefix(' '))
            .is_some_and(|rest| !rest.is_empty());
        if !phrase_ok {
            out.push(violation(&entry, ViolationKind::NameLacksConnective));
        }
        for s in &rel.subjects {
            if tax.category(s).is_none() {
                out.push(violation(&entry, ViolationKind::UnknownCategory(s.clone())));
            }
        }
    }
    out
}

impl Taxonomy {
    /// The bundled 20-class aerial taxonomy: 14 referable categories,
    /// 5 attributes and 7 spatial relations.
    pub fn refsegrs() -> Taxonomy {
        Taxonomy::from_toml_str(BUNDLED_REFSEGRS).expect("bundled taxonomy is valid")
    }

    pub fn bundled_document() -> &'static str {
        BUNDLED_REFSEGRS
    }

    pub fn from_toml_str(text: &str) -> Result<Taxonomy, TaxonomyError> {
        let tax: Taxonomy = toml::from_str(text).map_err(|e| TaxonomyError::Parse(e.to_string()))?;
        if let Some(v) = validate_taxonomy(&tax).into_iter().next() {
            return Err(match v.kind {
                ViolationKind::DanglingClassId(id) => TaxonomyError::DanglingClassId { entry: v.entry, id },
                ViolationKind::EmptyCategory => TaxonomyError::EmptyCategory { entry: v.entry },
                ViolationKind::ConnectiveKindMismatch => {
                    let rel = tax
                        .relations
                        .iter()
                        .find(|r| format!("relation {:?}", r.name) == v.entry)
                        .expect("violation names an existing relation");
                    TaxonomyError::ConnectiveKindMismatch {
                        entry: v.entry,
                        connective: rel.connective.clone(),
                        kind: rel.kind,
                    }
                }
                _ => TaxonomyError::Invalid(v),
            });
        }
        Ok(tax)
    }

    /// Canonical document: every section sorted by name, sets sorted.
    pub fn to_canonical_string(&self) -> String {
        let mut t = self.clone();
        t.classes.sort_by(|a, b| a.name.cmp(&b.name));
        t.categories.sort_by(|a, b| a.name.cmp(&b.name));
        t.attributes
            .sort_by(|a, b| (&a.name, &a.category).cmp(&(&b.name, &b.category)));
        t.relations.sort_by(|a, b| a.name.cmp(&b.name));
        for r in &mut t.relations {
            r.subjects.sort();
        }
        toml::to_string(&t).expect("taxonomy serializes")
    }

    /// SHA-256 of the canonical document, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_canonical_string().as_bytes()))
    }

    pub fn has_class(&self, id: u8) -> bool {
        self.classes.iter().any(|c| c.id == id)
    }

    pub fn class_name(&self, id: u8) -> Option<&str> {
        self.classes.iter().find(|c| c.id == id).map(|c| c.name.as_str())
    }

    pub fn class_id(&self, name: &str) -> Option<u8> {
        self.classes.iter().find(|c| c.name == name).map(|c| c.id)
    }

    pub fn category(&self, name: &str) -> Option<&ReferableCategory> {
        self.categories.iter().find(|c| c.name == name)
    }

    pub fn referable_categories(&self) -> impl Iterator<Item = &ReferableCategory> {
        self.categories.iter().filter(|c| c.referable)
    }

    pub fn relation(&self, name: &str) -> Option<&RelationRule> {
        self.relations.iter().find(|r| r.name == name)
    }

    pub fn attributes_for<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a AttributeRule> {
        self.attributes.iter().filter(move |a| a.category == category)
    }

    /// Relations that may follow `category` as subject.
    pub fn relations_for<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a RelationRule> {
        self.relations.iter().filter(move |r| r.allows_subject(category))
    }
}

pub fn load_taxonomy(path: &Path) -> Result<Taxonomy, TaxonomyError> {
    Taxonomy::from_toml_str(&std::fs::read_to_string(path)?)
}

/// Class ids an expression head refers to: the attribute's refinement
/// when one is given, the category's members otherwise.
pub fn resolve_category(
    tax: &Taxonomy,
    category: &str,
    attribute: Option<&str>,
) -> Result<BTreeSet<u8>, TaxonomyError> {
    let cat = tax
        .category(category)
        .ok_or_else(|| TaxonomyError::UnknownCategory(category.to_string()))?;
    let Some(attr_name) = attribute else {
        return Ok(cat.member_ids.clone());
    };
    let mut named = tax.attributes.iter().filter(|a| a.name == attr_name).peekable();
    if named.peek().is_none() {
        return Err(TaxonomyError::UnknownAttribute(attr_name.to_string()));
    }
    named
        .find(|a| a.category == category)
        .map(|a| a.refined_ids.clone())
        .ok_or_else(|| TaxonomyError::AttributeCategoryMismatch {
            attribute: attr_name.to_string(),
            category: category.to_string(),
        })
}
