//! Model description language, parameter tables and RAM matrices.
//!
//! The syntax follows the familiar lavaan conventions:
//!
//! ```text
//! visual  =~ x1 + x2 + x3     # loadings, first fixed to 1
//! y1 ~~ 0.8*y1                # fixed variance
//! y1 ~~ ev*y1                 # labelled (equality-constrained) variance
//! eta2 ~ eta1                 # regression
//! y1 ~ 1                      # intercept
//! ```
//!
//! Parsing adds the usual defaults: variances for every observed and latent
//! variable, covariances among exogenous latents and among exogenous observed
//! variables, and free intercepts for all observed variables.

mod parser;
mod ram;
pub mod templates;

use std::collections::{HashMap, HashSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use crate::error::{Result, SemError};
use parser::{Modifier, Relation};

pub use ram::{to_ram, to_ram_group, RamMatrices, RamModel, RamSlot, SlotTarget, SlotValue};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Operator {
    #[serde(rename = "=~")]
    Loading,
    #[serde(rename = "~")]
    Regression,
    #[serde(rename = "~~")]
    Covariance,
    #[serde(rename = "~1")]
    Intercept,
}

impl Operator {
    pub fn symbol(self) -> &'static str {
        match self {
            Operator::Loading => "=~",
            Operator::Regression => "~",
            Operator::Covariance => "~~",
            Operator::Intercept => "~1",
        }
    }
}

impl fmt::Display for Operator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.symbol())
    }
}

/// One row of the parameter table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamRow {
    pub lhs: String,
    pub op: Operator,
    /// Empty for intercepts.
    pub rhs: String,
    /// 1-based group index.
    pub group: usize,
    /// 1-based index into the free parameter vector.
    pub free_index: Option<usize>,
    pub fixed_value: Option<f64>,
    pub label: Option<String>,
    pub start: Option<f64>,
    /// Declared in the model text (as opposed to added by a default rule).
    pub user: bool,
}

impl ParamRow {
    /// `lhs op rhs` without spaces, e.g. `f1=~y2`, `y1~~y1`, `y1~1`.
    pub fn key(&self) -> String {
        format!("{}{}{}", self.lhs, self.op.symbol(), self.rhs)
    }

    /// Label if present, otherwise [`ParamRow::key`].
    pub fn base_name(&self) -> String {
        self.label.clone().unwrap_or_else(|| self.key())
    }

    pub fn is_free(&self) -> bool {
        self.free_index.is_some()
    }

    fn same_slot(&self, other: &ParamRow) -> bool {
        if self.op != other.op || self.group != other.group {
            return false;
        }
        if self.lhs == other.lhs && self.rhs == other.rhs {
            return true;
        }
        self.op == Operator::Covariance && self.lhs == other.rhs && self.rhs == other.lhs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTable {
    pub rows: Vec<ParamRow>,
    /// Observed variables in order of first appearance.
    pub observed: Vec<String>,
    /// Latent variables in order of first appearance.
    pub latent: Vec<String>,
}

impl ParamTable {
    /// Number of free parameters.
    pub fn n_free(&self) -> usize {
        self.rows.iter().filter_map(|r| r.free_index).max().unwrap_or(0)
    }

    pub fn n_groups(&self) -> usize {
        self.rows.iter().map(|r| r.group).max().unwrap_or(1)
    }

    /// One name per free parameter, in free-index order. Parameters that
    /// first occur in a group other than the first carry a `.g<k>` suffix.
    pub fn param_names(&self) -> Vec<String> {
        let q = self.n_free();
        let mut names = vec![String::new(); q];
        let mut seen = vec![false; q];
        for row in &self.rows {
            if let Some(idx) = row.free_index {
                if !seen[idx - 1] {
                    seen[idx - 1] = true;
                    names[idx - 1] = if row.group > 1 {
                        format!("{}.g{}", row.base_name(), row.group)
                    } else {
                        row.base_name()
                    };
                }
            }
        }
        names
    }

    /// First row carrying each free index.
    pub fn free_rows(&self) -> Vec<&ParamRow> {
        let q = self.n_free();
        let mut out: Vec<Option<&ParamRow>> = vec![None; q];
        for row in &self.rows {
            if let Some(idx) = row.free_index {
                out[idx - 1].get_or_insert(row);
            }
        }
        out.into_iter().map(|r| r.expect("free indices are consecutive")).collect()
    }

    pub fn group_rows(&self, group: usize) -> impl Iterator<Item = &ParamRow> {
        self.rows.iter().filter(move |r| r.group == group)
    }

    /// Free index (0-based) of a parameter in `group`, looked up by base name or key.
    pub fn find_free(&self, group: usize, name: &str) -> Option<usize> {
        self.group_rows(group)
            .find(|r| r.is_free() && (r.base_name() == name || r.key() == name))
            .and_then(|r| r.free_index)
            .map(|i| i - 1)
    }

    /// Replicates a single-group table over `n_groups` groups.
    pub fn expand_groups(&self, n_groups: usize, policy: ConstraintPolicy) -> Result<ParamTable> {
        if self.n_groups() != 1 {
            return Err(SemError::InvalidInput(
                "expand_groups expects a single-group table".into(),
            ));
        }
        if n_groups == 0 {
            return Err(SemError::InvalidInput("at least one group is required".into()));
        }
        let q = self.n_free();
        let mut rows = Vec::with_capacity(self.rows.len() * n_groups);
        for g in 1..=n_groups {
            for row in &self.rows {
                let mut r = row.clone();
                r.group = g;
                if let (ConstraintPolicy::Free, Some(idx)) = (policy, r.free_index) {
                    r.free_index = Some(idx + (g - 1) * q);
                }
                rows.push(r);
            }
        }
        let mut table = ParamTable {
            rows,
            observed: self.observed.clone(),
            latent: self.latent.clone(),
        };
        table.renumber();
        Ok(table)
    }

    /// Gives every group its own copy of the named parameters (base name or
    /// key), removing cross-group equality for them.
    pub fn release(&mut self, names: &[&str]) -> Result<()> {
        let n_groups = self.n_groups();
        for name in names {
            let targets: HashSet<usize> = self
                .rows
                .iter()
                .filter(|r| r.base_name() == *name || r.key() == *name)
                .filter_map(|r| r.free_index)
                .collect();
            if targets.is_empty() {
                return Err(SemError::UnknownParameter(name.to_string()));
            }
            let mut next = self.n_free() + 1;
            for old in targets {
                for g in 2..=n_groups {
                    let fresh = next;
                    next += 1;
                    for r in self.rows.iter_mut().filter(|r| r.group == g) {
                        if r.free_index == Some(old) {
                            r.free_index = Some(fresh);
                        }
                    }
                }
            }
        }
        self.renumber();
        Ok(())
    }

    /// Relabels free indices 1..q in order of first appearance.
    fn renumber(&mut self) {
        let mut map = HashMap::new();
        for row in &mut self.rows {
            if let Some(old) = row.free_index {
                let len = map.len();
                let new = *map.entry(old).or_insert(len + 1);
                row.free_index = Some(new);
            }
        }
    }

    /// Renders the first group as model text in which every row is explicit,
    /// so that parsing the output reproduces this table.
    pub fn to_syntax(&self) -> String {
        let mut out = String::new();
        for row in self.group_rows(1) {
            let modifier = match (&row.fixed_value, &row.label) {
                (Some(v), _) => format!("{v}*"),
                (None, Some(l)) => format!("{l}*"),
                (None, None) if row.op == Operator::Loading => "NA*".to_string(),
                (None, None) => String::new(),
            };
            let rhs = if row.op == Operator::Intercept { "1" } else { row.rhs.as_str() };
            let op = if row.op == Operator::Intercept { "~" } else { row.op.symbol() };
            let _ = writeln!(out, "{} {} {}{}", row.lhs, op, modifier, rhs);
        }
        out
    }

    /// Variables that receive a single-headed arrow (indicators and regression outcomes).
    pub fn endogenous(&self) -> HashSet<String> {
        let mut set = HashSet::new();
        for row in &self.rows {
            match row.op {
                Operator::Loading => {
                    set.insert(row.rhs.clone());
                }
                Operator::Regression => {
                    set.insert(row.lhs.clone());
                }
                _ => {}
            }
        }
        set
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConstraintPolicy {
    /// Every parameter is shared by all groups.
    AllEqual,
    /// Nothing is shared across groups.
    Free,
}

fn push_unique(list: &mut Vec<String>, name: &str) {
    if !list.iter().any(|n| n == name) {
        list.push(name.to_string());
    }
}

/// Parses model text into a single-group parameter table.
pub fn parse(source: &str) -> Result<ParamTable> {
    let relations = parser::parse_relations(source)?;
    if relations.is_empty() {
        return Err(SemError::EmptyModel);
    }

    let mut latent = Vec::new();
    for rel in &relations {
        if rel.op == Operator::Loading {
            push_unique(&mut latent, &rel.lhs);
        }
    }
    let latent_set: HashSet<&str> = latent.iter().map(String::as_str).collect();
    let mut observed = Vec::new();
    for rel in &relations {
        let mut names = vec![rel.lhs.as_str()];
        names.extend(rel.terms.iter().map(|t| t.name.as_str()).filter(|n| *n != "1"));
        for name in names {
            if !latent_set.contains(name) {
                push_unique(&mut observed, name);
            }
        }
    }

    let mut rows: Vec<(ParamRow, Option<Modifier>, usize)> = Vec::new();
    let mut first_indicator_seen: HashSet<String> = HashSet::new();
    for Relation { line, lhs, op, terms } in &relations {
        for term in terms {
            let (op, rhs) = if *op == Operator::Regression && term.name == "1" {
                (Operator::Intercept, String::new())
            } else {
                (*op, term.name.clone())
            };
            let mut row = ParamRow {
                lhs: lhs.clone(),
                op,
                rhs,
                group: 1,
                free_index: None,
                fixed_value: None,
                label: None,
                start: None,
                user: true,
            };
            match &term.modifier {
                Some(Modifier::Fixed(v)) => row.fixed_value = Some(*v),
                Some(Modifier::Label(l)) => row.label = Some(l.clone()),
                Some(Modifier::Free) => {}
                None if op == Operator::Loading && !first_indicator_seen.contains(lhs) => {
                    row.fixed_value = Some(1.0);
                }
                None => {}
            }
            if op == Operator::Loading {
                first_indicator_seen.insert(lhs.clone());
            }
            if let Some((existing, existing_mod, _)) =
                rows.iter().find(|(r, _, _)| r.same_slot(&row))
            {
                if existing_mod == &term.modifier && existing.fixed_value == row.fixed_value {
                    continue;
                }
                return Err(SemError::DuplicateDeclaration {
                    param: row.key(),
                    line: *line,
                });
            }
            rows.push((row, term.modifier.clone(), *line));
        }
    }
    let mut rows: Vec<ParamRow> = rows.into_iter().map(|(r, _, _)| r).collect();

    let table_view = ParamTable {
        rows: rows.clone(),
        observed: observed.clone(),
        latent: latent.clone(),
    };
    let endogenous = table_view.endogenous();
    let has = |rows: &[ParamRow], op: Operator, a: &str, b: &str| {
        rows.iter().any(|r| {
            r.op == op && ((r.lhs == a && r.rhs == b) || (op == Operator::Covariance && r.lhs == b && r.rhs == a))
        })
    };
    let auto = |lhs: &str, op: Operator, rhs: &str| ParamRow {
        lhs: lhs.to_string(),
        op,
        rhs: rhs.to_string(),
        group: 1,
        free_index: None,
        fixed_value: None,
        label: None,
        start: None,
        user: false,
    };

    for v in observed.iter().chain(latent.iter()) {
        if !has(&rows, Operator::Covariance, v, v) {
            rows.push(auto(v, Operator::Covariance, v));
        }
    }
    let exo_latent: Vec<&String> = latent.iter().filter(|v| !endogenous.contains(*v)).collect();
    let exo_observed: Vec<&String> = observed.iter().filter(|v| !endogenous.contains(*v)).collect();
    for group in [exo_latent, exo_observed] {
        for (i, a) in group.iter().enumerate() {
            for b in &group[i + 1..] {
                if !has(&rows, Operator::Covariance, a, b) {
                    rows.push(auto(a, Operator::Covariance, b));
                }
            }
        }
    }
    for v in &observed {
        if !rows.iter().any(|r| r.op == Operator::Intercept && &r.lhs == v) {
            rows.push(auto(v, Operator::Intercept, ""));
        }
    }

    let mut next = 1;
    let mut by_label: HashMap<String, usize> = HashMap::new();
    for row in &mut rows {
        if row.fixed_value.is_some() {
            continue;
        }
        let idx = match &row.label {
            Some(l) => *by_label.entry(l.clone()).or_insert_with(|| {
                next += 1;
                next - 1
            }),
            None => {
                next += 1;
                next - 1
            }
        };
        row.free_index = Some(idx);
    }

    Ok(ParamTable {
        rows,
        observed,
        latent,
    })
}
