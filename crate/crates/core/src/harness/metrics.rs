//! Success rate, empirical CDFs and per-cell aggregation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attack::{Algorithm, Outcome};
use crate::error::{Error, Result};

/// Successes over applicable attempts; `not_applicable` is excluded.
pub fn compute_asr(outcomes: impl IntoIterator<Item = Outcome>) -> Result<f64> {
    let (mut attacked, mut succeeded) = (0usize, 0usize);
    for o in outcomes {
        match o {
            Outcome::Success => {
                attacked += 1;
                succeeded += 1;
            }
            Outcome::Failure => attacked += 1,
            Outcome::NotApplicable => {}
        }
    }
    if attacked == 0 {
        return Err(Error::NoApplicableReports);
    }
    Ok(succeeded as f64 / attacked as f64)
}

/// `(x, fraction of values <= x)` at each distinct value, ascending.
pub fn compute_cdf(values: &[f64]) -> Result<Vec<(f64, f64)>> {
    if values.is_empty() {
        return Err(Error::EmptySample);
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len() as f64;
    let mut out: Vec<(f64, f64)> = Vec::new();
    for (i, &v) in sorted.iter().enumerate() {
        let frac = (i + 1) as f64 / n;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = frac,
            _ => out.push((v, frac)),
        }
    }
    Ok(out)
}

/// One attacked sample under one (detector, algorithm, budget, seed).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub sample_id: String,
    pub detector: String,
    pub algorithm: Algorithm,
    pub budget: usize,
    pub seed: u64,
    pub outcome: Outcome,
    pub queries_used: usize,
    pub wall_ms: f64,
    pub initial_confidence: f64,
    pub min_confidence: f64,
    /// Containment and isolation hold for the final sample.
    pub consistent: bool,
}

impl ResultRow {
    /// Confidence dropped below its starting value at some query.
    pub fn reduced(&self) -> bool {
        self.min_confidence < self.initial_confidence
    }
}

/// The flat CSV projection of a row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CsvRow {
    pub sample_id: String,
    pub detector: String,
    pub algorithm: String,
    pub budget: usize,
    pub seed: u64,
    pub outcome: String,
    pub queries_used: usize,
    pub wall_ms: f64,
}

impl From<&ResultRow> for CsvRow {
    fn from(r: &ResultRow) -> Self {
        Self {
            sample_id: r.sample_id.clone(),
            detector: r.detector.clone(),
            algorithm: r.algorithm.as_str().to_string(),
            budget: r.budget,
            seed: r.seed,
            outcome: r.outcome.as_str().to_string(),
            queries_used: r.queries_used,
            wall_ms: r.wall_ms,
        }
    }
}

/// Aggregate over the rows of one grid cell. `seed` is `None` for the cell
/// pooled over all seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cell {
    pub detector: String,
    pub algorithm: Algorithm,
    pub budget: usize,
    pub seed: Option<u64>,
    pub attacked: usize,
    pub successes: usize,
    pub asr: Option<f64>,
    pub reduced_fraction: Option<f64>,
    pub mean_queries: Option<f64>,
    pub mean_wall_ms: Option<f64>,
    pub qt_cdf: Vec<(f64, f64)>,
    pub time_cdf: Vec<(f64, f64)>,
}

type CellKey = (String, Algorithm, usize, Option<u64>);

fn mean(values: &[f64]) -> Option<f64> {
    (!values.is_empty()).then(|| values.iter().sum::<f64>() / values.len() as f64)
}

fn cell_from(key: CellKey, rows: &[&ResultRow]) -> Cell {
    let applicable: Vec<&&ResultRow> = rows.iter().filter(|r| r.outcome != Outcome::NotApplicable).collect();
    let successes: Vec<&&ResultRow> = applicable.iter().copied().filter(|r| r.outcome == Outcome::Success).collect();
    let qt: Vec<f64> = successes.iter().map(|r| r.queries_used as f64).collect();
    let wall: Vec<f64> = successes.iter().map(|r| r.wall_ms).collect();
    let reduced = applicable.iter().filter(|r| r.reduced()).count();
    let (detector, algorithm, budget, seed) = key;
    Cell {
        detector,
        algorithm,
        budget,
        seed,
        attacked: applicable.len(),
        successes: successes.len(),
        asr: compute_asr(rows.iter().map(|r| r.outcome)).ok(),
        reduced_fraction: (!applicable.is_empty()).then(|| reduced as f64 / applicable.len() as f64),
        mean_queries: mean(&qt),
        mean_wall_ms: mean(&wall),
        qt_cdf: compute_cdf(&qt).unwrap_or_default(),
        time_cdf: compute_cdf(&wall).unwrap_or_default(),
    }
}

/// Per-seed cells followed by pooled cells, both in key order. Every key
/// in `expected` gets a cell even when it has no rows.
pub fn aggregate(rows: &[ResultRow], expected: &[(String, Algorithm, usize, u64)]) -> Vec<Cell> {
    let mut per_seed: BTreeMap<CellKey, Vec<&ResultRow>> = BTreeMap::new();
    let mut pooled: BTreeMap<CellKey, Vec<&ResultRow>> = BTreeMap::new();
    for (d, a, b, s) in expected {
        per_seed.entry((d.clone(), *a, *b, Some(*s))).or_default();
        pooled.entry((d.clone(), *a, *b, None)).or_default();
    }
    for r in rows {
        per_seed
            .entry((r.detector.clone(), r.algorithm, r.budget, Some(r.seed)))
            .or_default()
            .push(r);
        pooled.entry((r.detector.clone(), r.algorithm, r.budget, None)).or_default().push(r);
    }
    per_seed
        .into_iter()
        .chain(pooled)
        .map(|(k, rows)| cell_from(k, &rows))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn asr_counts() {
        let mut v = vec![Outcome::Success; 45];
        v.extend(vec![Outcome::Failure; 55]);
        assert_eq!(compute_asr(v).unwrap(), 0.45);
        assert_eq!(compute_asr(vec![Outcome::Failure; 3]).unwrap(), 0.0);
        let mut mixed = vec![Outcome::NotApplicable; 3];
        mixed.extend([Outcome::Success; 4]);
        mixed.extend([Outcome::Failure; 3]);
        assert_eq!(compute_asr(mixed).unwrap(), 4.0 / 7.0);
        assert!(matches!(compute_asr(vec![Outcome::NotApplicable]), Err(Error::NoApplicableReports)));
    }

    #[test]
    fn cdf_examples() {
        assert_eq!(compute_cdf(&[1.0, 1.0, 2.0]).unwrap(), vec![(1.0, 2.0 / 3.0), (2.0, 1.0)]);
        assert_eq!(compute_cdf(&[7.5]).unwrap(), vec![(7.5, 1.0)]);
        assert!(compute_cdf(&[]).is_err());
    }
}
