//! Template-based referring expressions.
//!
//! Every expression fills the same three slots:
//! `[attribute] <category> [relation phrase]`, where the relation phrase
//! is the relation's full name ("in the parking area"). Rendering is
//! canonical (lower-case, single spaces) so text and structure convert
//! losslessly in both directions.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::taxonomy::Taxonomy;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ExprError {
    #[error("invalid combination: {0}")]
    InvalidCombination(String),
    #[error("no category recognized in {0:?}")]
    UnrecognizedCategory(String),
    #[error("ambiguous expression {text:?}: {candidates:?}")]
    AmbiguousParse {
        text: String,
        candidates: Vec<Expression>,
    },
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Expression {
    pub text: String,
    pub category: String,
    pub attribute: Option<String>,
    pub relation: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SpanRole {
    Category,
    Attribute,
    Relation,
}

/// Character range `[start, end)` of one slot inside the rendered text.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpressionSpan {
    pub role: SpanRole,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Rendered {
    pub text: String,
    pub spans: Vec<ExpressionSpan>,
}

fn check_combination(
    tax: &Taxonomy,
    category: &str,
    attribute: Option<&str>,
    relation: Option<&str>,
) -> Result<(), ExprError> {
    let invalid = |msg: String| Err(ExprError::InvalidCombination(msg));
    match tax.category(category) {
        Some(c) if c.referable => {}
        Some(_) => return invalid(format!("{category:?} is not a referable category")),
        None => return invalid(format!("unknown category {category:?}")),
    }
    if let Some(a) = attribute {
        if !tax.attributes_for(category).any(|r| r.name == a) {
            return invalid(format!("attribute {a:?} does not apply to {category:?}"));
        }
    }
    if let Some(r) = relation {
        match tax.relation(r) {
            Some(rule) if rule.allows_subject(category) => {}
            Some(_) => return invalid(format!("relation {r:?} does not apply to {category:?}")),
            None => return invalid(format!("unknown relation {r:?}")),
        }
    }
    Ok(())
}

/// Canonical surface form plus the character span of each slot.
pub fn render(
    tax: &Taxonomy,
    category: &str,
    attribute: Option<&str>,
    relation: Option<&str>,
) -> Result<Rendered, ExprError> {
    check_combination(tax, category, attribute, relation)?;
    let mut text = String::new();
    let mut spans = Vec::with_capacity(3);
    let mut push = |role, part: &str| {
        if !text.is_empty() {
            text.push(' ');
        }
        let start = text.chars().count();
        text.push_str(part);
        spans.push(ExpressionSpan {
            role,
            start,
            end: start + part.chars().count(),
        });
    };
    if let Some(a) = attribute {
        push(SpanRole::Attribute, a);
    }
    push(SpanRole::Category, category);
    if let Some(r) = relation {
        push(SpanRole::Relation, r);
    }
    Ok(Rendered { text, spans })
}

impl Expression {
    pub fn build(
        tax: &Taxonomy,
        category: &str,
        attribute: Option<&str>,
        relation: Option<&str>,
    ) -> Result<Expression, ExprError> {
        let rendered = render(tax, category, attribute, relation)?;
        Ok(Expression {
            text: rendered.text,
            category: category.to_string(),
            attribute: attribute.map(str::to_string),
            relation: relation.map(str::to_string),
        })
    }

    pub fn spans(&self, tax: &Taxonomy) -> Result<Vec<ExpressionSpan>, ExprError> {
        Ok(render(
            tax,
            &self.category,
            self.attribute.as_deref(),
            self.relation.as_deref(),
        )?
        .spans)
    }
}

/// Every template instantiation the taxonomy permits, category-major, then
/// attribute (none first), then relation (none first).
pub fn enumerate_expressions(tax: &Taxonomy) -> Vec<Expression> {
    let mut out = Vec::new();
    for cat in tax.referable_categories() {
        let attrs: Vec<Option<&str>> = std::iter::once(None)
            .chain(tax.attributes_for(&cat.name).map(|a| Some(a.name.as_str())))
            .collect();
        let rels: Vec<Option<&str>> = std::iter::once(None)
            .chain(tax.relations_for(&cat.name).map(|r| Some(r.name.as_str())))
            .collect();
        for &a in &attrs {
            for &r in &rels {
                out.push(Expression::build(tax, &cat.name, a, r).expect("enumerated from taxonomy"));
            }
        }
    }
    out
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Recognizes `[attribute] category [relation]` against the taxonomy
/// lexicon. Relation suffixes are tried longest first; every decomposition
/// that matches is collected so genuinely ambiguous lexicons are reported
/// rather than resolved silently.
pub fn parse(text: &str, tax: &Taxonomy) -> Result<Expression, ExprError> {
    let norm = normalize(text);
    let mut relations: Vec<&str> = tax.relations.iter().map(|r| r.name.as_str()).collect();
    relations.sort_by_key(|r| std::cmp::Reverse(r.len()));

    let mut heads: Vec<(&str, Option<&str>)> = vec![(norm.as_str(), None)];
    for rel in &relations {
        if let Some(head) = norm.strip_suffix(rel).and_then(|h| h.strip_suffix(' ')) {
            heads.push((head, Some(rel)));
        }
    }

    let mut matches: Vec<(&str, Option<&str>, Option<&str>)> = Vec::new();
    for (head, rel) in heads {
        if let Some(cat) = tax.category(head) {
            matches.push((cat.name.as_str(), None, rel));
        }
        for attr in &tax.attributes {
            let Some(rest) = head
                .strip_prefix(attr.name.as_str())
                .and_then(|r| r.strip_prefix(' '))
            else {
                continue;
            };
            if rest == attr.category {
                matches.push((attr.category.as_str(), Some(attr.name.as_str()), rel));
            }
        }
    }
    matches.sort();
    matches.dedup();

    let valid: Vec<Expression> = matches
        .iter()
        .filter_map(|&(c, a, r)| Expression::build(tax, c, a, r).ok())
        .collect();
    match valid.len() {
        1 => Ok(valid.into_iter().next().unwrap()),
        0 => match matches.first() {
            Some(&(c, a, r)) => Err(Expression::build(tax, c, a, r).unwrap_err()),
            None => Err(ExprError::UnrecognizedCategory(norm)),
        },
        _ => Err(ExprError::AmbiguousParse {
            text: norm,
            candidates: valid,
        }),
    }
}

/// Connectives and articles left out of word-frequency counts.
pub const STOP_WORDS: [&str; 10] = [
    "a", "an", "the", "in", "on", "with", "along", "by", "of", "and",
];

/// Token frequencies, descending by count then lexicographic.
pub fn word_cloud_counts<S: AsRef<str>>(expressions: &[S]) -> Vec<(String, usize)> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for e in expressions {
        for tok in e.as_ref().split_whitespace() {
            if !STOP_WORDS.contains(&tok) {
                *counts.entry(tok).or_default() += 1;
            }
        }
    }
    let mut out: Vec<(String, usize)> = counts.into_iter().map(|(t, c)| (t.to_string(), c)).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}
