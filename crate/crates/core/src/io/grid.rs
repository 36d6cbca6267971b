//! Exhaustive search over the fusion weights and the prototype-center
//! weight `w`.

use serde::{Deserialize, Serialize};

use super::format::SampleRecord;
use super::run::run_records;
use crate::error::{Error, Result};
use crate::inference::EngineConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub alpha1: Vec<f64>,
    pub alpha2: Vec<f64>,
    pub alpha3: Vec<f64>,
    pub w: Vec<f64>,
}

impl GridSpec {
    /// Grid holding only the values already in `cfg`.
    pub fn single(cfg: &EngineConfig) -> Self {
        Self {
            alpha1: vec![cfg.hp.alpha1],
            alpha2: vec![cfg.hp.alpha2],
            alpha3: vec![cfg.hp.alpha3],
            w: vec![cfg.hp.w],
        }
    }

    /// Points in lexicographic order `(alpha1, alpha2, alpha3, w)`.
    pub fn points(&self) -> Vec<[f64; 4]> {
        let mut out = Vec::with_capacity(self.alpha1.len() * self.alpha2.len() * self.alpha3.len() * self.w.len());
        for &a1 in &self.alpha1 {
            for &a2 in &self.alpha2 {
                for &a3 in &self.alpha3 {
                    for &w in &self.w {
                        out.push([a1, a2, a3, w]);
                    }
                }
            }
        }
        out
    }
}

/// Parse a comma-separated list of numbers.
pub fn parse_list(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|t| {
            t.trim()
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("bad grid value {t:?}")))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridRow {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub w: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridReport {
    pub rows: Vec<GridRow>,
    /// Index into `rows` of the best point; the first in grid order wins ties.
    pub best: usize,
}

impl GridReport {
    pub fn best_row(&self) -> &GridRow {
        &self.rows[self.best]
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("alpha1,alpha2,alpha3,w,accuracy\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{},{}\n", r.alpha1, r.alpha2, r.alpha3, r.w, r.accuracy));
        }
        s
    }
}

fn evaluate(point: [f64; 4], base: &EngineConfig, prompts: &[Vec<Vec<f64>>], records: &[SampleRecord]) -> Result<GridRow> {
    let mut cfg = base.clone();
    cfg.hp.alpha1 = point[0];
    cfg.hp.alpha2 = point[1];
    cfg.hp.alpha3 = point[2];
    cfg.hp.w = point[3];
    let summary = run_records(prompts, &cfg, records)?;
    let accuracy = summary
        .accuracy
        .ok_or_else(|| Error::invalid("grid search needs a labeled stream"))?;
    Ok(GridRow {
        alpha1: point[0],
        alpha2: point[1],
        alpha3: point[2],
        w: point[3],
        accuracy,
    })
}

/// Evaluate every grid point on the same stream, each with a fresh engine.
/// Rows are emitted in grid order whether or not the points run in parallel.
pub fn grid_search(
    base: &EngineConfig,
    prompts: &[Vec<Vec<f64>>],
    records: &[SampleRecord],
    grid: &GridSpec,
) -> Result<GridReport> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::invalid("every grid axis needs at least one value"));
    }
    #[cfg(feature = "parallel")]
    let rows: Result<Vec<GridRow>> = {
        use rayon::prelude::*;
        points.par_iter().map(|&p| evaluate(p, base, prompts, records)).collect()
    };
    #[cfg(not(feature = "parallel"))]
    let rows: Result<Vec<GridRow>> = points.iter().map(|&p| evaluate(p, base, prompts, records)).collect();
    let rows = rows?;
    let mut best = 0;
    for (i, r) in rows.iter().enumerate() {
        if r.accuracy > rows[best].accuracy {
            best = i;
        }
    }
    Ok(GridReport { rows, best })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::synth::{synth_in_memory, SynthSpec};

    fn data() -> (Vec<Vec<Vec<f64>>>, Vec<SampleRecord>) {
        let (h, r) = synth_in_memory(&SynthSpec {
            classes: 3,
            dim: 8,
            samples: 40,
            views: 2,
            seed: 5,
            ..SynthSpec::default()
        })
        .unwrap();
        (h.prompts, r)
    }

    #[test]
    fn single_point_grid_returns_that_point() {
        let (p, r) = data();
        let cfg = EngineConfig::default();
        let rep = grid_search(&cfg, &p, &r, &GridSpec::single(&cfg)).unwrap();
        assert_eq!(rep.rows.len(), 1);
        assert_eq!(rep.best, 0);
        assert_eq!(rep.best_row().w, cfg.hp.w);
    }

    #[test]
    fn three_values_per_axis_emit_81_rows() {
        let (p, r) = data();
        let grid = GridSpec {
            alpha1: vec![0.5, 1.0, 2.0],
            alpha2: vec![0.5, 1.0, 2.0],
            alpha3: vec![0.5, 1.0, 2.0],
            w: vec![0.2, 0.5, 0.8],
        };
        let rep = grid_search(&EngineConfig::default(), &p, &r, &grid).unwrap();
        assert_eq!(rep.rows.len(), 81);
        assert_eq!(rep.to_csv().lines().count(), 82);
        // Best is the first maximum in grid order.
        let max = rep.rows.iter().map(|r| r.accuracy).fold(f64::MIN, f64::max);
        assert_eq!(rep.best, rep.rows.iter().position(|r| r.accuracy == max).unwrap());
        let pts = grid.points();
        assert_eq!(pts[1], [0.5, 0.5, 0.5, 0.5]);
        for (row, pt) in rep.rows.iter().zip(&pts) {
            assert_eq!([row.alpha1, row.alpha2, row.alpha3, row.w], *pt);
        }
    }

    #[test]
    fn parse_list_values() {
        assert_eq!(parse_list("0.5, 1,2").unwrap(), vec![0.5, 1.0, 2.0]);
        assert!(parse_list("1,x").is_err());
    }
}
