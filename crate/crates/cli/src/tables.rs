//! Recompute derived result columns from packaged EER values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use accent_core::eval::{avg_relative_reduction, relative_change};
use serde::Deserialize;

use crate::error::CliError;

/// Packaged reference values.
pub const REFERENCE_TABLES: &str = include_str!("../data/reference_tables.toml");

/// Allowed absolute gap, in percentage points.
pub const TOLERANCE: f64 = 0.05;

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CrossCorpusRow {
    pub model: String,
    pub english: f64,
    pub mixed: f64,
    pub increase: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SystemRow {
    pub id: u32,
    pub model: String,
    pub portion: String,
    pub eers: Vec<f64>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReductionRow {
    pub benchmark: u32,
    pub treated: u32,
    pub reported: f64,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceTables {
    pub test_sets: Vec<String>,
    pub cross_corpus: Vec<CrossCorpusRow>,
    pub systems: Vec<SystemRow>,
    pub reductions: Vec<ReductionRow>,
}

impl ReferenceTables {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::validation("reference_data", e))
    }

    pub fn packaged() -> Self {
        Self::parse(REFERENCE_TABLES).expect("packaged reference tables parse")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub table: &'static str,
    pub row: String,
    pub expected: f64,
    pub actual: f64,
}

impl Check {
    pub fn diff(&self) -> f64 {
        (self.actual - self.expected).abs()
    }

    pub fn pass(&self) -> bool {
        self.diff() <= TOLERANCE + 1e-9
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TableReport {
    pub checks: Vec<Check>,
}

impl TableReport {
    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass())
    }

    pub fn all_pass(&self) -> bool {
        self.failures().next().is_none()
    }

    pub fn find(&self, table: &str, row: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.table == table && c.row == row)
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("table\trow\texpected\tactual\tdiff\tstatus\n");
        for c in &self.checks {
            let _ = writeln!(
                out,
                "{}\t{}\t{:.2}\t{:.4}\t{:.4}\t{}",
                c.table,
                c.row,
                c.expected,
                c.actual,
                c.diff(),
                if c.pass() { "PASS" } else { "FAIL" }
            );
        }
        out
    }
}

/// Increase from English-only to mixed-language EER, and the mean relative
/// change between system pairs over all test sets.
pub fn reproduce_tables(tables: &ReferenceTables) -> Result<TableReport, CliError> {
    let mut checks = Vec::new();
    for r in &tables.cross_corpus {
        checks.push(Check {
            table: "cross_corpus_increase",
            row: r.model.clone(),
            expected: r.increase,
            actual: relative_change(r.english, r.mixed)?,
        });
    }
    let systems: BTreeMap<u32, &SystemRow> = tables.systems.iter().map(|s| (s.id, s)).collect();
    for s in &tables.systems {
        if s.eers.len() != tables.test_sets.len() {
            return Err(CliError::validation(
                "reference_data",
                format!("system {} has {} EERs for {} test sets", s.id, s.eers.len(), tables.test_sets.len()),
            ));
        }
    }
    for r in &tables.reductions {
        let get = |id: u32| {
            systems
                .get(&id)
                .ok_or_else(|| CliError::validation("reference_data", format!("unknown system id {id}")))
        };
        let (b, t) = (get(r.benchmark)?, get(r.treated)?);
        checks.push(Check {
            table: "avg_reduction",
            row: format!("{}->{}", r.benchmark, r.treated),
            expected: r.reported,
            actual: avg_relative_reduction(&b.eers, &t.eers)?,
        });
    }
    Ok(TableReport { checks })
}
