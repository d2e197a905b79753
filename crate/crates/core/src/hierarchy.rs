//! Linear-constraint representation of grouped/hierarchical time series.
//!
//! A collection of series is described by a bottom level plus one or more
//! groupings. Each grouping partitions the same bottom set into named
//! aggregates, and a single top series sums everything. Coherence of a
//! vector `y` over all series is expressed as `C * y = 0`, where every row
//! of `C` carries a single `+1` in the column of one aggregate series and
//! `-1` in the columns of its contributing bottom series.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One named grouping: a partition of the bottom level into aggregates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Grouping {
    /// Display name of the grouping (e.g. "zones", "sources").
    pub name: String,
    /// Aggregate series id -> bottom ids it sums. Stored sorted by id so
    /// construction is deterministic regardless of input file order.
    pub aggregates: BTreeMap<String, Vec<String>>,
}

/// Declarative description of a grouped hierarchy.
///
/// Serialized as JSON with keys `top`, `bottoms` and `groupings`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HierarchySpec {
    /// Identifier of the grand-total series.
    pub top: String,
    /// Bottom-level series identifiers, in declared order.
    pub bottoms: Vec<String>,
    /// Groupings, each partitioning the same bottom set.
    pub groupings: Vec<Grouping>,
}

impl HierarchySpec {
    /// Parse a spec from its JSON representation.
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Validate the spec and build the constraint representation.
    pub fn build(self) -> Result<Hierarchy> {
        Hierarchy::new(self)
    }
}

/// The zero-constraint matrix `C` (`n_u` rows by `n` columns).
#[derive(Debug, Clone)]
pub struct ConstraintMatrix {
    c: DMatrix<f64>,
}

impl ConstraintMatrix {
    /// Wrap an explicit matrix. Rows are constraints, columns are series.
    pub fn new(c: DMatrix<f64>) -> Self {
        Self { c }
    }

    /// A matrix with no constraint rows over `n` series.
    pub fn unconstrained(n: usize) -> Self {
        Self {
            c: DMatrix::zeros(0, n),
        }
    }

    /// Number of constraint rows (upper series).
    pub fn n_upper(&self) -> usize {
        self.c.nrows()
    }

    /// Total number of series (columns).
    pub fn n_series(&self) -> usize {
        self.c.ncols()
    }

    /// The underlying dense matrix.
    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Scale-free incoherence measure `||C y||_inf / (1 + ||y||_inf)`.
    pub fn coherence_residual(&self, y: &DVector<f64>) -> Result<f64> {
        if y.len() != self.n_series() {
            return Err(Error::DimensionMismatch {
                what: "coherence_residual input",
                expected: self.n_series(),
                actual: y.len(),
            });
        }
        if self.n_upper() == 0 {
            return Ok(0.0);
        }
        let cy = &self.c * y;
        Ok(cy.amax() / (1.0 + y.amax()))
    }
}

/// A validated hierarchy: the spec plus a fixed series ordering and `C`.
///
/// Column ordering is uppers first (top, then each grouping's aggregates
/// sorted by id, groupings in declared order) followed by the bottoms in
/// declared order. Identical specs therefore yield identical matrices.
#[derive(Debug, Clone)]
pub struct Hierarchy {
    spec: HierarchySpec,
    series_ids: Vec<String>,
    index: BTreeMap<String, usize>,
    constraint: ConstraintMatrix,
}

impl Hierarchy {
    fn new(spec: HierarchySpec) -> Result<Self> {
        if spec.groupings.is_empty() {
            return Err(Error::InvalidParameter(
                "hierarchy needs at least one grouping".into(),
            ));
        }
        if spec.bottoms.is_empty() {
            return Err(Error::InvalidParameter(
                "hierarchy needs at least one bottom series".into(),
            ));
        }

        // Column order: top, grouping aggregates, bottoms.
        let mut series_ids = Vec::new();
        series_ids.push(spec.top.clone());
        for grouping in &spec.groupings {
            series_ids.extend(grouping.aggregates.keys().cloned());
        }
        let n_upper = series_ids.len();
        series_ids.extend(spec.bottoms.iter().cloned());
        let n = series_ids.len();

        let mut index = BTreeMap::new();
        for (pos, id) in series_ids.iter().enumerate() {
            if index.insert(id.clone(), pos).is_some() {
                return Err(Error::DuplicateSeriesId { id: id.clone() });
            }
        }

        let bottom_set: BTreeSet<&str> = spec.bottoms.iter().map(String::as_str).collect();

        let mut c = DMatrix::zeros(n_upper, n);

        // Top row: +1 on the top, -1 on every bottom of the first grouping
        // (all groupings share the bottom set, so this is the full bottom level).
        c[(0, 0)] = 1.0;
        for id in &spec.bottoms {
            c[(0, index[id])] = -1.0;
        }

        let mut row = 1;
        for grouping in &spec.groupings {
            let mut seen: BTreeSet<&str> = BTreeSet::new();
            for (agg_id, members) in &grouping.aggregates {
                c[(row, index[agg_id])] = 1.0;
                for member in members {
                    if !bottom_set.contains(member.as_str()) {
                        return Err(Error::InconsistentPartition {
                            grouping: grouping.name.clone(),
                            detail: format!("'{member}' is not a bottom series"),
                        });
                    }
                    if !seen.insert(member.as_str()) {
                        return Err(Error::InconsistentPartition {
                            grouping: grouping.name.clone(),
                            detail: format!("bottom '{member}' appears more than once"),
                        });
                    }
                    c[(row, index[member])] = -1.0;
                }
                row += 1;
            }
            if seen.len() != spec.bottoms.len() {
                let missing = spec
                    .bottoms
                    .iter()
                    .find(|b| !seen.contains(b.as_str()))
                    .cloned()
                    .unwrap_or_default();
                return Err(Error::InconsistentPartition {
                    grouping: grouping.name.clone(),
                    detail: format!("bottom '{missing}' is not covered"),
                });
            }
        }

        Ok(Self {
            spec,
            series_ids,
            index,
            constraint: ConstraintMatrix::new(c),
        })
    }

    /// The validated spec.
    pub fn spec(&self) -> &HierarchySpec {
        &self.spec
    }

    /// Total series count `n`.
    pub fn n(&self) -> usize {
        self.series_ids.len()
    }

    /// Number of upper (aggregate) series, including the top.
    pub fn n_upper(&self) -> usize {
        self.constraint.n_upper()
    }

    /// Number of bottom-level series.
    pub fn n_bottom(&self) -> usize {
        self.n() - self.n_upper()
    }

    /// All series ids in column order.
    pub fn series_ids(&self) -> &[String] {
        &self.series_ids
    }

    /// Bottom-level ids in column order.
    pub fn bottom_ids(&self) -> &[String] {
        &self.spec.bottoms
    }

    /// Column index of a series id.
    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    /// The zero-constraint matrix.
    pub fn constraint(&self) -> &ConstraintMatrix {
        &self.constraint
    }

    /// Build the full coherent vector from bottom-level values keyed by id.
    pub fn aggregate_bottom_up(&self, bottoms: &BTreeMap<String, f64>) -> Result<DVector<f64>> {
        let mut values = DVector::zeros(self.n_bottom());
        for (pos, id) in self.spec.bottoms.iter().enumerate() {
            match bottoms.get(id) {
                Some(v) => values[pos] = *v,
                None => return Err(Error::MissingBottomValue { id: id.clone() }),
            }
        }
        Ok(self.aggregate_bottom_slice(&values))
    }

    /// Build the full coherent vector from bottom values in declared order.
    pub fn aggregate_bottom_slice(&self, bottoms: &DVector<f64>) -> DVector<f64> {
        assert_eq!(bottoms.len(), self.n_bottom(), "bottom vector length");
        let n_upper = self.n_upper();
        let mut full = DVector::zeros(self.n());
        for (pos, _) in self.spec.bottoms.iter().enumerate() {
            full[n_upper + pos] = bottoms[pos];
        }
        // Each upper row r has +1 on its own column and -1 on its members,
        // so the coherent value is the sum over members.
        let c = self.constraint.matrix();
        for r in 0..n_upper {
            let mut sum = 0.0;
            for j in n_upper..self.n() {
                if c[(r, j)] == -1.0 {
                    sum += full[j];
                }
            }
            // The +1 column of row r is its own series.
            let own = (0..n_upper)
                .find(|&j| c[(r, j)] == 1.0)
                .expect("constraint row without +1");
            full[own] = sum;
        }
        full
    }
}
