use std::collections::BTreeSet;
use std::fmt::Write as _;

use statrs::function::beta::beta_reg;

use super::{MetricSpec, Qrels};
use crate::error::{check_dim, Error, Result};
use crate::retrieval::RunFile;

pub const ALPHA: f64 = 0.05;

/// Two-sided paired Student's t-test with Bonferroni correction.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TTest {
    pub t: f64,
    pub p_raw: f64,
    pub p_corrected: f64,
    pub significant: bool,
    /// Differences have zero variance but nonzero mean; `p_raw` is set to 0.
    pub degenerate: bool,
}

/// Tests `a` against `b` (aligned per query). `p_corrected = min(1, p·m)`
/// for `m = num_comparisons`.
///
/// Zero-variance differences: all zero gives `t = 0, p = 1`; a constant
/// nonzero difference gives `t = ±∞, p = 0` and is flagged `degenerate`.
pub fn paired_ttest(a: &[f64], b: &[f64], num_comparisons: usize) -> Result<TTest> {
    check_dim(a.len(), b.len())?;
    if a.len() < 2 {
        return Err(Error::invalid(format!(
            "paired t-test needs at least 2 pairs, got {}",
            a.len()
        )));
    }
    if num_comparisons == 0 {
        return Err(Error::invalid("num_comparisons must be >= 1"));
    }
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    let sd = var.sqrt();

    let spread = diffs.iter().copied().fold(f64::NEG_INFINITY, f64::max)
        - diffs.iter().copied().fold(f64::INFINITY, f64::min);
    let (t, p_raw, degenerate) = if spread == 0.0 || sd <= 1e-14 * mean.abs() {
        if mean == 0.0 {
            (0.0, 1.0, false)
        } else {
            (f64::INFINITY.copysign(mean), 0.0, true)
        }
    } else {
        let t = mean / (sd / n.sqrt());
        (t, two_sided_p(t, n - 1.0), false)
    };
    let p_corrected = (p_raw * num_comparisons as f64).min(1.0);
    Ok(TTest {
        t,
        p_raw,
        p_corrected,
        significant: p_corrected < ALPHA,
        degenerate,
    })
}

/// `P(|T| ≥ |t|)` for Student's t with `df` degrees of freedom, via the
/// regularized incomplete beta function `I_{df/(df+t²)}(df/2, 1/2)`.
pub fn two_sided_p(t: f64, df: f64) -> f64 {
    let x = df / (df + t * t);
    beta_reg(df / 2.0, 0.5, x).clamp(0.0, 1.0)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonRow {
    pub run: String,
    pub metric: String,
    pub mean: f64,
    /// `None` for the baseline itself.
    pub test: Option<TTest>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComparisonTable {
    pub baseline: String,
    pub num_comparisons: usize,
    pub rows: Vec<ComparisonRow>,
}

impl ComparisonTable {
    pub fn row(&self, run: &str, metric: &str) -> Option<&ComparisonRow> {
        self.rows.iter().find(|r| r.run == run && r.metric == metric)
    }

    /// Columns: run, metric, mean, p_raw, p_corrected, significant.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("run\tmetric\tmean\tp_raw\tp_corrected\tsignificant\n");
        for r in &self.rows {
            match &r.test {
                Some(t) => writeln!(
                    out,
                    "{}\t{}\t{:.6}\t{:.6e}\t{:.6e}\t{}",
                    r.run, r.metric, r.mean, t.p_raw, t.p_corrected, t.significant
                ),
                None => writeln!(out, "{}\t{}\t{:.6}\t-\t-\t-", r.run, r.metric, r.mean),
            }
            .expect("write to string");
        }
        out
    }
}

/// Per-run means plus a paired t-test of every non-baseline run against
/// `baseline` on each metric. The Bonferroni family is all emitted tests.
/// Queries evaluated for either run are paired; a query missing from one
/// run scores 0 there.
pub fn compare_runs(
    runs: &[(String, RunFile)],
    baseline: &str,
    qrels: &Qrels,
    metrics: &[MetricSpec],
) -> Result<ComparisonTable> {
    if runs.len() < 2 {
        return Err(Error::invalid("comparison needs at least 2 runs"));
    }
    let base_run = runs
        .iter()
        .find(|(name, _)| name == baseline)
        .map(|(_, r)| r)
        .ok_or_else(|| Error::UnknownRun(baseline.to_string()))?;
    let others = runs.iter().filter(|(name, _)| name != baseline).count();
    let num_comparisons = (others * metrics.len()).max(1);

    let mut rows = Vec::new();
    for spec in metrics {
        let base = spec.evaluate(base_run, qrels)?;
        let base_map = base.as_map();
        for (name, run) in runs {
            let rep = spec.evaluate(run, qrels)?;
            let test = if name == baseline {
                None
            } else {
                let map = rep.as_map();
                let qids: BTreeSet<&str> = base_map.keys().chain(map.keys()).copied().collect();
                let a: Vec<f64> = qids.iter().map(|q| map.get(q).copied().unwrap_or(0.0)).collect();
                let b: Vec<f64> = qids.iter().map(|q| base_map.get(q).copied().unwrap_or(0.0)).collect();
                Some(paired_ttest(&a, &b, num_comparisons)?)
            };
            rows.push(ComparisonRow {
                run: name.clone(),
                metric: spec.label(),
                mean: rep.mean,
                test,
            });
        }
    }
    Ok(ComparisonTable {
        baseline: baseline.to_string(),
        num_comparisons,
        rows,
    })
}
