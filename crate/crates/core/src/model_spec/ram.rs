use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::{Operator, ParamTable};
use crate::error::{Result, SemError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotTarget {
    /// Directed paths.
    A,
    /// Symmetric (co)variances.
    S,
    /// Intercepts.
    M,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SlotValue {
    /// 0-based index into θ.
    Free(usize),
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamSlot {
    pub target: SlotTarget,
    pub row: usize,
    pub col: usize,
    pub value: SlotValue,
}

/// Placement of every table row of one group in the RAM matrices. Variables
/// are ordered observed first, then latent, so the filter is `0..p`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RamModel {
    pub observed: Vec<String>,
    pub latent: Vec<String>,
    pub slots: Vec<RamSlot>,
    pub n_free: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RamMatrices {
    pub a: DMatrix<f64>,
    pub s: DMatrix<f64>,
    pub m: DVector<f64>,
    pub filter: Vec<usize>,
}

impl RamModel {
    pub fn n_vars(&self) -> usize {
        self.observed.len() + self.latent.len()
    }

    pub fn n_observed(&self) -> usize {
        self.observed.len()
    }

    pub fn count_slots(&self, target: SlotTarget, free: bool) -> usize {
        self.slots
            .iter()
            .filter(|s| s.target == target && matches!(s.value, SlotValue::Free(_)) == free)
            .count()
    }

    pub fn materialize(&self, theta: &[f64]) -> Result<RamMatrices> {
        if theta.len() != self.n_free {
            return Err(SemError::DimensionMismatch(format!(
                "expected {} parameters, got {}",
                self.n_free,
                theta.len()
            )));
        }
        let v = self.n_vars();
        let mut a = DMatrix::zeros(v, v);
        let mut s = DMatrix::zeros(v, v);
        let mut m = DVector::zeros(v);
        for slot in &self.slots {
            let value = match slot.value {
                SlotValue::Free(i) => theta[i],
                SlotValue::Fixed(x) => x,
            };
            match slot.target {
                SlotTarget::A => a[(slot.row, slot.col)] = value,
                SlotTarget::S => {
                    s[(slot.row, slot.col)] = value;
                    s[(slot.col, slot.row)] = value;
                }
                SlotTarget::M => m[slot.row] = value,
            }
        }
        Ok(RamMatrices {
            a,
            s,
            m,
            filter: (0..self.n_observed()).collect(),
        })
    }
}

/// RAM placement for the first group of `table`.
pub fn to_ram(table: &ParamTable, observed_order: &[String]) -> Result<RamModel> {
    to_ram_group(table, 1, observed_order)
}

pub fn to_ram_group(table: &ParamTable, group: usize, observed_order: &[String]) -> Result<RamModel> {
    for name in observed_order {
        if table.latent.contains(name) {
            return Err(SemError::NameCollision(name.clone()));
        }
        if !table.observed.contains(name) {
            return Err(SemError::UnknownVariable(name.clone()));
        }
    }
    for name in &table.observed {
        if !observed_order.contains(name) {
            return Err(SemError::UnknownVariable(name.clone()));
        }
    }
    let index_of = |name: &str| -> Result<usize> {
        if let Some(i) = observed_order.iter().position(|n| n == name) {
            return Ok(i);
        }
        table
            .latent
            .iter()
            .position(|n| n == name)
            .map(|i| observed_order.len() + i)
            .ok_or_else(|| SemError::UnknownVariable(name.to_string()))
    };
    let mut slots = Vec::new();
    for row in table.group_rows(group) {
        let value = match (row.free_index, row.fixed_value) {
            (Some(i), _) => SlotValue::Free(i - 1),
            (None, Some(x)) => SlotValue::Fixed(x),
            (None, None) => {
                return Err(SemError::InvalidInput(format!(
                    "row {} is neither free nor fixed",
                    row.key()
                )))
            }
        };
        let lhs = index_of(&row.lhs)?;
        let (target, r, c) = match row.op {
            Operator::Loading => (SlotTarget::A, index_of(&row.rhs)?, lhs),
            Operator::Regression => (SlotTarget::A, lhs, index_of(&row.rhs)?),
            Operator::Covariance => (SlotTarget::S, lhs, index_of(&row.rhs)?),
            Operator::Intercept => (SlotTarget::M, lhs, 0),
        };
        slots.push(RamSlot {
            target,
            row: r,
            col: c,
            value,
        });
    }
    Ok(RamModel {
        observed: observed_order.to_vec(),
        latent: table.latent.clone(),
        slots,
        n_free: table.n_free(),
    })
}
