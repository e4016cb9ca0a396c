//! Forecast evaluation: MASE, weighted quantile loss, the seasonal-naive
//! baseline, relative scores and their geometric-mean aggregate.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_aligned(a: usize, b: usize, what: &str) -> Result<()> {
    if a != b {
        return Err(Error::Shape(format!("{what}: lengths {a} and {b} differ")));
    }
    Ok(())
}

/// Repeats the last observed season: `forecast[t] = train[n - season + t % season]`.
pub fn seasonal_naive(train: &[f64], season: usize, horizon: usize) -> Result<Vec<f64>> {
    if season == 0 {
        return Err(Error::Config("season must be >= 1".into()));
    }
    if train.len() < season {
        return Err(Error::TooShort {
            len: train.len(),
            reason: format!("seasonal naive needs at least one season of {season}"),
        });
    }
    let start = train.len() - season;
    Ok((0..horizon).map(|t| train[start + t % season]).collect())
}

/// In-sample mean absolute difference at lag `season`.
pub fn seasonal_scale(train: &[f64], season: usize) -> Result<f64> {
    if season == 0 {
        return Err(Error::Config("season must be >= 1".into()));
    }
    if train.len() <= season {
        return Err(Error::TooShort {
            len: train.len(),
            reason: format!("MASE scaling needs more than {season} observations"),
        });
    }
    let diffs = train.len() - season;
    let total: f64 = train
        .windows(season + 1)
        .map(|w| (w[season] - w[0]).abs())
        .sum();
    Ok(total / diffs as f64)
}

/// Mean absolute scaled error of `forecast` against `actual`, scaled by the
/// in-sample seasonal-naive error of `train`.
pub fn mase(actual: &[f64], forecast: &[f64], train: &[f64], season: usize) -> Result<f64> {
    check_aligned(actual.len(), forecast.len(), "mase")?;
    if actual.is_empty() {
        return Err(Error::EmptySeries);
    }
    let scale = seasonal_scale(train, season)?;
    if scale == 0.0 {
        return Err(Error::DegenerateScaling);
    }
    let mae = actual
        .iter()
        .zip(forecast)
        .map(|(a, f)| (a - f).abs())
        .sum::<f64>()
        / actual.len() as f64;
    Ok(mae / scale)
}

/// `q * max(y - yhat, 0) + (1 - q) * max(yhat - y, 0)`
pub fn pinball(q: f64, y: f64, yhat: f64) -> f64 {
    if y >= yhat {
        q * (y - yhat)
    } else {
        (1.0 - q) * (yhat - y)
    }
}

/// Pools weighted quantile loss over several series:
/// `sum 2 * pinball / (levels * sum |y|)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WqlAccumulator {
    loss: f64,
    mass: f64,
    levels: usize,
}

impl WqlAccumulator {
    pub fn add(&mut self, actual: &[f64], quantile_forecasts: &[Vec<f64>], levels: &[f64]) -> Result<()> {
        check_aligned(quantile_forecasts.len(), levels.len(), "wql levels")?;
        if levels.is_empty() {
            return Err(Error::Config("wql needs at least one quantile level".into()));
        }
        if self.levels != 0 && self.levels != levels.len() {
            return Err(Error::Shape("wql level sets differ between series".into()));
        }
        for row in quantile_forecasts {
            check_aligned(row.len(), actual.len(), "wql horizon")?;
        }
        self.levels = levels.len();
        for (row, &q) in quantile_forecasts.iter().zip(levels) {
            for (&y, &yhat) in actual.iter().zip(row) {
                self.loss += 2.0 * pinball(q, y, yhat);
            }
        }
        self.mass += actual.iter().map(|y| y.abs()).sum::<f64>();
        Ok(())
    }

    pub fn finish(&self) -> Result<f64> {
        if self.mass == 0.0 {
            return Err(Error::ZeroDenominator);
        }
        Ok(self.loss / (self.levels as f64 * self.mass))
    }
}

/// Weighted quantile loss of one series; `quantile_forecasts` has one row
/// per level.
pub fn wql(actual: &[f64], quantile_forecasts: &[Vec<f64>], levels: &[f64]) -> Result<f64> {
    let mut acc = WqlAccumulator::default();
    acc.add(actual, quantile_forecasts, levels)?;
    acc.finish()
}

/// Geometric mean, computed in base 2 so powers of two aggregate exactly.
pub fn geometric_mean(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Config("geometric mean of no values".into()));
    }
    if let Some(&bad) = values.iter().find(|&&v| !(v > 0.0 && v.is_finite())) {
        return Err(Error::NonPositiveScore {
            id: "aggregate".into(),
            value: bad,
        });
    }
    let mean_log = values.iter().map(|v| v.log2()).sum::<f64>() / values.len() as f64;
    Ok(mean_log.exp2())
}

/// Raw per-dataset scores of a model and of the seasonal-naive baseline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RawScores {
    pub mase: f64,
    pub wql: f64,
    pub mase_baseline: f64,
    pub wql_baseline: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetScores {
    pub mase: f64,
    pub wql: f64,
    pub mase_baseline: f64,
    pub wql_baseline: f64,
    pub rel_mase: f64,
    pub rel_wql: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub per_dataset: BTreeMap<String, DatasetScores>,
    pub agg_rel_mase: f64,
    pub agg_rel_wql: f64,
}

fn positive(id: &str, value: f64) -> Result<f64> {
    if value > 0.0 && value.is_finite() {
        Ok(value)
    } else {
        Err(Error::NonPositiveScore {
            id: id.to_string(),
            value,
        })
    }
}

pub fn relative_and_aggregate(scores: &BTreeMap<String, RawScores>) -> Result<MetricReport> {
    let mut per_dataset = BTreeMap::new();
    for (id, s) in scores {
        let rel_mase = positive(id, s.mase)? / positive(id, s.mase_baseline)?;
        let rel_wql = positive(id, s.wql)? / positive(id, s.wql_baseline)?;
        per_dataset.insert(
            id.clone(),
            DatasetScores {
                mase: s.mase,
                wql: s.wql,
                mase_baseline: s.mase_baseline,
                wql_baseline: s.wql_baseline,
                rel_mase,
                rel_wql,
            },
        );
    }
    let rel_mase: Vec<f64> = per_dataset.values().map(|s| s.rel_mase).collect();
    let rel_wql: Vec<f64> = per_dataset.values().map(|s| s.rel_wql).collect();
    Ok(MetricReport {
        agg_rel_mase: geometric_mean(&rel_mase)?,
        agg_rel_wql: geometric_mean(&rel_wql)?,
        per_dataset,
    })
}

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,mase,wql,mase_baseline,wql_baseline,rel_mase,rel_wql\n");
        for (id, s) in &self.per_dataset {
            let _ = writeln!(
                out,
                "{id},{},{},{},{},{},{}",
                s.mase, s.wql, s.mase_baseline, s.wql_baseline, s.rel_mase, s.rel_wql
            );
        }
        let _ = writeln!(out, "aggregate,,,,,{},{}", self.agg_rel_mase, self.agg_rel_wql);
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Metric {
    Mase,
    Wql,
}

impl Metric {
    pub fn name(&self) -> &'static str {
        match self {
            Metric::Mase => "MASE",
            Metric::Wql => "WQL",
        }
    }

    fn pick(&self, s: &DatasetScores) -> f64 {
        match self {
            Metric::Mase => s.mase,
            Metric::Wql => s.wql,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaRow {
    pub dataset: String,
    pub reference: f64,
    pub candidate: f64,
    /// `reference - candidate`: positive when the candidate is better.
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeltaTable {
    pub metric: Metric,
    pub reference_label: String,
    pub candidate_label: String,
    pub rows: Vec<DeltaRow>,
}

/// Per-dataset `reference - candidate`, sorted by descending delta.
pub fn delta_table(
    metric: Metric,
    reference_label: &str,
    reference: &MetricReport,
    candidate_label: &str,
    candidate: &MetricReport,
) -> Result<DeltaTable> {
    let ref_ids: Vec<&String> = reference.per_dataset.keys().collect();
    let cand_ids: Vec<&String> = candidate.per_dataset.keys().collect();
    if ref_ids != cand_ids {
        return Err(Error::MismatchedDatasets(format!("{ref_ids:?} vs {cand_ids:?}")));
    }
    let mut rows: Vec<DeltaRow> = reference
        .per_dataset
        .iter()
        .map(|(id, r)| {
            let a = metric.pick(r);
            let b = metric.pick(&candidate.per_dataset[id]);
            DeltaRow {
                dataset: id.clone(),
                reference: a,
                candidate: b,
                delta: a - b,
            }
        })
        .collect();
    rows.sort_by(|x, y| y.delta.total_cmp(&x.delta).then_with(|| x.dataset.cmp(&y.dataset)));
    Ok(DeltaTable {
        metric,
        reference_label: reference_label.to_string(),
        candidate_label: candidate_label.to_string(),
        rows,
    })
}

impl DeltaTable {
    fn headers(&self) -> [String; 4] {
        let m = self.metric.name();
        [
            "Dataset".to_string(),
            format!("{m} {}", self.reference_label.to_uppercase()),
            format!("{m} {}", self.candidate_label.to_uppercase()),
            "Δ".to_string(),
        ]
    }

    pub fn to_csv(&self) -> String {
        let mut out = self.headers().join(",");
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.dataset, r.reference, r.candidate, r.delta);
        }
        out
    }

    /// Fixed-width table with three decimals.
    pub fn to_text(&self) -> String {
        let [h0, h1, h2, h3] = self.headers();
        let width = self
            .rows
            .iter()
            .map(|r| r.dataset.len())
            .chain([h0.len()])
            .max()
            .unwrap_or(7);
        let mut out = String::new();
        let _ = writeln!(out, "{h0:<width$}  {h1:>10}  {h2:>10}  {h3:>8}");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{:<width$}  {:>10.3}  {:>10.3}  {:>8.3}",
                r.dataset, r.reference, r.candidate, r.delta
            );
        }
        out
    }

    /// Datasets where the candidate scored worse than the reference.
    pub fn candidate_worse(&self) -> usize {
        self.rows.iter().filter(|r| r.delta < 0.0).count()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn seasonal_naive_examples() {
        assert_eq!(seasonal_naive(&[1.0, 2.0, 3.0, 4.0], 1, 2).unwrap(), vec![4.0, 4.0]);
        assert_eq!(
            seasonal_naive(&[10.0, 20.0, 30.0, 40.0], 2, 3).unwrap(),
            vec![30.0, 40.0, 30.0]
        );
        assert_eq!(
            seasonal_naive(&[1.0, 2.0, 3.0], 3, 5).unwrap(),
            vec![1.0, 2.0, 3.0, 1.0, 2.0]
        );
        assert!(matches!(seasonal_naive(&[1.0], 2, 1), Err(Error::TooShort { .. })));
    }

    #[test]
    fn mase_examples() {
        let train = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(mase(&[5.0, 7.0], &[5.0, 7.0], &train, 1).unwrap(), 0.0);
        assert_eq!(mase(&[5.0, 7.0], &[5.0, 6.0], &train, 1).unwrap(), 0.5);
        assert!(matches!(
            mase(&[1.0], &[1.0], &[2.0, 2.0, 2.0], 1),
            Err(Error::DegenerateScaling)
        ));
        assert!(matches!(
            mase(&[1.0], &[1.0], &[1.0, 2.0, 1.0, 2.0], 2),
            Err(Error::DegenerateScaling)
        ));
        assert!(mase(&[1.0, 2.0], &[1.0], &train, 1).is_err());
    }

    #[test]
    fn wql_examples() {
        assert_eq!(wql(&[10.0], &[vec![8.0]], &[0.5]).unwrap(), 0.2);
        let actual = [3.0, -1.0, 4.0];
        let levels = [0.1, 0.5, 0.9];
        let exact = vec![actual.to_vec(); 3];
        assert_eq!(wql(&actual, &exact, &levels).unwrap(), 0.0);
        assert!(matches!(
            wql(&[0.0, 0.0], &[vec![1.0, 1.0]], &[0.5]),
            Err(Error::ZeroDenominator)
        ));
    }

    #[test]
    fn wql_is_scale_free() {
        let actual = [3.0, -1.0, 4.0, 1.5];
        let levels = [0.1, 0.5, 0.9];
        let q = vec![
            vec![2.0, -2.0, 3.0, 1.0],
            vec![3.5, -0.5, 4.2, 1.4],
            vec![5.0, 1.0, 6.0, 3.0],
        ];
        let base = wql(&actual, &q, &levels).unwrap();
        let alpha = 7.25;
        let scaled_a: Vec<f64> = actual.iter().map(|v| v * alpha).collect();
        let scaled_q: Vec<Vec<f64>> = q.iter().map(|r| r.iter().map(|v| v * alpha).collect()).collect();
        assert!((wql(&scaled_a, &scaled_q, &levels).unwrap() - base).abs() < 1e-12);
    }

    #[test]
    fn geometric_mean_examples() {
        assert_eq!(geometric_mean(&[0.5, 2.0]).unwrap(), 1.0);
        assert_eq!(geometric_mean(&[1.0, 4.0, 16.0]).unwrap(), 4.0);
        assert_eq!(geometric_mean(&[1.0, 1.0, 1.0]).unwrap(), 1.0);
        assert!(geometric_mean(&[1.0, 0.0]).is_err());
        assert!(geometric_mean(&[]).is_err());
        let base = geometric_mean(&[0.3, 1.7, 2.2]).unwrap();
        let scaled = geometric_mean(&[0.9, 5.1, 6.6]).unwrap();
        assert!((scaled - 3.0 * base).abs() < 1e-12);
        let permuted = geometric_mean(&[2.2, 0.3, 1.7]).unwrap();
        assert!((permuted - base).abs() < 1e-15);
    }

    fn report(entries: &[(&str, f64, f64)]) -> MetricReport {
        let scores = entries
            .iter()
            .map(|&(id, m, w)| {
                (
                    id.to_string(),
                    RawScores {
                        mase: m,
                        wql: w,
                        mase_baseline: 1.0,
                        wql_baseline: 1.0,
                    },
                )
            })
            .collect();
        relative_and_aggregate(&scores).unwrap()
    }

    #[test]
    fn relative_scores() {
        let r = report(&[("a", 0.5, 1.0), ("b", 2.0, 1.0)]);
        assert_eq!(r.agg_rel_mase, 1.0);
        assert_eq!(r.agg_rel_wql, 1.0);

        let mut bad = BTreeMap::new();
        bad.insert(
            "x".to_string(),
            RawScores { mase: 1.0, wql: 1.0, mase_baseline: 0.0, wql_baseline: 1.0 },
        );
        assert!(matches!(relative_and_aggregate(&bad), Err(Error::NonPositiveScore { .. })));
    }

    #[test]
    fn delta_table_layout_and_sign() {
        let ce = report(&[("monash_m1_yearly", 3.819, 0.104), ("monash_m3_monthly", 0.841, 0.094)]);
        let w1 = report(&[("monash_m1_yearly", 3.291, 0.115), ("monash_m3_monthly", 0.913, 0.114)]);
        let table = delta_table(Metric::Mase, "ce", &ce, "w1", &w1).unwrap();
        assert_eq!(table.rows[0].dataset, "monash_m1_yearly");
        assert!((table.rows[0].delta - 0.528).abs() < 1e-12);
        assert!((table.rows[1].delta + 0.072).abs() < 1e-12);
        assert_eq!(table.candidate_worse(), 1);
        let text = table.to_text();
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
        assert_eq!(header, ["Dataset", "MASE", "CE", "MASE", "W1", "Δ"]);
        let row: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
        assert_eq!(row, ["monash_m1_yearly", "3.819", "3.291", "0.528"]);
        assert!(text.contains("-0.072"));

        let same = delta_table(Metric::Wql, "ce", &ce, "ce", &ce).unwrap();
        assert!(same.rows.iter().all(|r| r.delta == 0.0));

        let other = report(&[("x", 1.0, 1.0)]);
        assert!(matches!(
            delta_table(Metric::Mase, "ce", &ce, "w1", &other),
            Err(Error::MismatchedDatasets(_))
        ));
    }
}
