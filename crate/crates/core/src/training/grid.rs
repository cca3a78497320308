//! Coarse-to-fine integer grid search.
//!
//! The coarse pass visits every `step`-th value of each axis (the cross
//! product when there are several). The fine pass then evaluates every
//! point within `refine_radius` of the coarse winner. Ties go to the
//! lexicographically smallest point, i.e. the cheapest model.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridAxis {
    pub name: String,
    pub lo: i64,
    pub hi: i64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub axes: Vec<GridAxis>,
    pub step: i64,
    /// `None` means `step - 1`, which closes every gap the coarse pass left.
    pub refine_radius: Option<i64>,
}

impl GridSpec {
    pub fn single(name: &str, lo: i64, hi: i64) -> Self {
        GridSpec {
            axes: vec![GridAxis {
                name: name.into(),
                lo,
                hi,
            }],
            step: 8,
            refine_radius: None,
        }
    }

    pub fn radius(&self) -> i64 {
        self.refine_radius.unwrap_or(self.step - 1)
    }

    pub fn validate(&self) -> Result<()> {
        if self.step < 1 {
            return Err(Error::Parameter(format!("grid step {} must be at least 1", self.step)));
        }
        if self.axes.is_empty() {
            return Err(Error::Parameter("grid has no axes".into()));
        }
        for a in &self.axes {
            if a.lo > a.hi {
                return Err(Error::Parameter(format!("empty range [{}, {}] for `{}`", a.lo, a.hi, a.name)));
            }
        }
        if self.radius() < 0 {
            return Err(Error::Parameter("negative refinement radius".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridResult {
    pub axes: Vec<String>,
    pub best: Vec<i64>,
    pub best_score: f64,
    pub coarse_best: Vec<i64>,
    /// Every evaluated point with its score, in point order.
    pub table: Vec<(Vec<i64>, f64)>,
}

fn product(ranges: &[Vec<i64>]) -> Vec<Vec<i64>> {
    let mut out = vec![Vec::new()];
    for r in ranges {
        out = out
            .into_iter()
            .flat_map(|p| {
                r.iter().map(move |&x| {
                    let mut q = p.clone();
                    q.push(x);
                    q
                })
            })
            .collect();
    }
    out
}

fn argmax(table: &BTreeMap<Vec<i64>, f64>, among: &[Vec<i64>]) -> Vec<i64> {
    let mut best: Option<(&Vec<i64>, f64)> = None;
    let mut sorted: Vec<&Vec<i64>> = among.iter().collect();
    sorted.sort();
    for p in sorted {
        let s = table[p];
        if best.is_none_or(|(_, b)| s > b) {
            best = Some((p, s));
        }
    }
    best.expect("nonempty").0.clone()
}

pub fn grid_search<F>(mut objective: F, spec: &GridSpec) -> Result<GridResult>
where
    F: FnMut(&[i64]) -> Result<f64>,
{
    spec.validate()?;
    let mut table: BTreeMap<Vec<i64>, f64> = BTreeMap::new();
    let mut eval = |p: &Vec<i64>, table: &mut BTreeMap<Vec<i64>, f64>| -> Result<()> {
        if !table.contains_key(p) {
            let s = objective(p)?;
            if s.is_nan() {
                return Err(Error::Parameter(format!("objective returned NaN at {p:?}")));
            }
            table.insert(p.clone(), s);
        }
        Ok(())
    };

    let coarse_axes: Vec<Vec<i64>> = spec
        .axes
        .iter()
        .map(|a| (a.lo..=a.hi).step_by(spec.step as usize).collect())
        .collect();
    let coarse = product(&coarse_axes);
    for p in &coarse {
        eval(p, &mut table)?;
    }
    let coarse_best = argmax(&table, &coarse);

    let r = spec.radius();
    let fine_axes: Vec<Vec<i64>> = spec
        .axes
        .iter()
        .zip(&coarse_best)
        .map(|(a, &c)| ((c - r).max(a.lo)..=(c + r).min(a.hi)).collect())
        .collect();
    for p in &product(&fine_axes) {
        eval(p, &mut table)?;
    }
    let all: Vec<Vec<i64>> = table.keys().cloned().collect();
    let best = argmax(&table, &all);
    Ok(GridResult {
        axes: spec.axes.iter().map(|a| a.name.clone()).collect(),
        best_score: table[&best],
        best,
        coarse_best,
        table: table.into_iter().collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unimodal_peak_at_eighteen() {
        let r = grid_search(|x| Ok(-((x[0] - 18) as f64).powi(2)), &GridSpec::single("p", 2, 34)).unwrap();
        assert_eq!(r.best, [18]);
        let r = grid_search(|x| Ok(-((x[0] - 18) as f64).powi(2)), &GridSpec::single("p", 4, 36)).unwrap();
        assert_eq!(r.coarse_best, [20]);
        assert_eq!(r.best, [18]);
    }

    #[test]
    fn plateau_prefers_smallest() {
        let r = grid_search(|x| Ok(if x[0] >= 7 { 1.0 } else { 0.0 }), &GridSpec::single("p", 2, 34)).unwrap();
        assert_eq!(r.best, [7]);
        let r = grid_search(|_| Ok(0.5), &GridSpec::single("p", 2, 34)).unwrap();
        assert_eq!(r.best, [2]);
    }

    #[test]
    fn joint_axes() {
        let spec = GridSpec {
            axes: vec![
                GridAxis { name: "alpha".into(), lo: 1, hi: 17 },
                GridAxis { name: "r".into(), lo: 1, hi: 17 },
            ],
            step: 8,
            refine_radius: Some(5),
        };
        // Interaction term: the best r depends on alpha.
        let f = |p: &[i64]| Ok(-((p[0] - 10) as f64).powi(2) - ((p[1] - p[0] / 2) as f64).powi(2));
        let r = grid_search(f, &spec).unwrap();
        assert_eq!(r.best, [10, 5]);
    }

    #[test]
    fn rejects_empty_range() {
        assert!(grid_search(|_| Ok(0.0), &GridSpec::single("p", 5, 4)).is_err());
        let mut s = GridSpec::single("p", 1, 4);
        s.step = 0;
        assert!(grid_search(|_| Ok(0.0), &s).is_err());
    }
}
