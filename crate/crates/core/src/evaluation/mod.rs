//! nDCG@k, Recall@k and paired significance testing over TREC-style runs.
//!
//! Conventions follow trec_eval: linear gain `rel / log2(rank + 1)` for nDCG
//! (exponential `2^rel - 1` optional), the ideal ranking is built from all
//! judged grades, and queries without any relevant judgment are left out of
//! the mean.

pub mod significance;

use std::collections::{BTreeMap, BTreeSet};

pub use significance::{compare_runs, paired_ttest, ComparisonRow, ComparisonTable, TTest};

use crate::error::{Error, Result};
use crate::retrieval::{RankedList, RunFile};

/// Graded relevance judgments, `(query, doc) → grade`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Qrels {
    judgments: BTreeMap<String, BTreeMap<String, u32>>,
}

impl Qrels {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one judgment; a second grade for the same pair is an error.
    pub fn insert(&mut self, query: impl Into<String>, doc: impl Into<String>, grade: u32) -> Result<()> {
        let (query, doc) = (query.into(), doc.into());
        let docs = self.judgments.entry(query.clone()).or_default();
        if docs.contains_key(&doc) {
            return Err(Error::invalid(format!("duplicate judgment for ({query}, {doc})")));
        }
        docs.insert(doc, grade);
        Ok(())
    }

    pub fn grade(&self, query: &str, doc: &str) -> u32 {
        self.judgments
            .get(query)
            .and_then(|d| d.get(doc))
            .copied()
            .unwrap_or(0)
    }

    pub fn judged(&self, query: &str) -> Option<&BTreeMap<String, u32>> {
        self.judgments.get(query)
    }

    pub fn contains_query(&self, query: &str) -> bool {
        self.judgments.contains_key(query)
    }

    /// Documents with grade > 0, ascending by id.
    pub fn relevant<'a>(&'a self, query: &str) -> impl Iterator<Item = &'a str> + 'a {
        self.judgments
            .get(query)
            .into_iter()
            .flat_map(|d| d.iter().filter(|(_, g)| **g > 0).map(|(id, _)| id.as_str()))
    }

    pub fn num_relevant(&self, query: &str) -> usize {
        self.relevant(query).count()
    }

    pub fn queries(&self) -> impl Iterator<Item = &str> {
        self.judgments.keys().map(String::as_str)
    }

    /// `(query, doc, grade)` in (query, doc) order.
    pub fn iter(&self) -> impl Iterator<Item = (&str, &str, u32)> {
        self.judgments
            .iter()
            .flat_map(|(q, d)| d.iter().map(move |(doc, g)| (q.as_str(), doc.as_str(), *g)))
    }

    pub fn len(&self) -> usize {
        self.judgments.values().map(BTreeMap::len).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Metric {
    Ndcg,
    Recall,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub enum Gain {
    #[default]
    Linear,
    Exponential,
}

impl Gain {
    #[inline]
    fn of(self, grade: u32) -> f64 {
        match self {
            Gain::Linear => grade as f64,
            Gain::Exponential => 2f64.powi(grade as i32) - 1.0,
        }
    }
}

/// A metric at a cutoff, e.g. nDCG@10.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct MetricSpec {
    pub metric: Metric,
    pub k: usize,
}

impl MetricSpec {
    pub const NDCG_10: MetricSpec = MetricSpec {
        metric: Metric::Ndcg,
        k: 10,
    };
    pub const RECALL_100: MetricSpec = MetricSpec {
        metric: Metric::Recall,
        k: 100,
    };

    pub fn label(&self) -> String {
        match self.metric {
            Metric::Ndcg => format!("nDCG@{}", self.k),
            Metric::Recall => format!("Recall@{}", self.k),
        }
    }

    pub fn evaluate(&self, run: &RunFile, qrels: &Qrels) -> Result<MetricReport> {
        match self.metric {
            Metric::Ndcg => ndcg_at_k(run, qrels, self.k),
            Metric::Recall => recall_at_k(run, qrels, self.k),
        }
    }
}

impl std::str::FromStr for MetricSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (name, k) = s
            .split_once('@')
            .ok_or_else(|| Error::invalid(format!("metric {s:?} is not of the form name@k")))?;
        let k: usize = k
            .parse()
            .map_err(|_| Error::invalid(format!("bad cutoff in {s:?}")))?;
        if k == 0 {
            return Err(Error::invalid("metric cutoff must be >= 1"));
        }
        let metric = match name.to_ascii_lowercase().as_str() {
            "ndcg" => Metric::Ndcg,
            "recall" => Metric::Recall,
            _ => return Err(Error::invalid(format!("unknown metric {name:?}"))),
        };
        Ok(MetricSpec { metric, k })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub spec: MetricSpec,
    /// Evaluated queries in run order.
    pub per_query: Vec<(String, f64)>,
    pub mean: f64,
    /// Run queries with no judgments at all.
    pub missing_qrels: usize,
    /// Run queries whose judgments contain no relevant document.
    pub no_relevant: usize,
}

impl MetricReport {
    pub fn value(&self, query: &str) -> Option<f64> {
        self.per_query.iter().find(|(q, _)| q == query).map(|(_, v)| *v)
    }

    pub fn as_map(&self) -> BTreeMap<&str, f64> {
        self.per_query.iter().map(|(q, v)| (q.as_str(), *v)).collect()
    }
}

fn report(
    spec: MetricSpec,
    run: &RunFile,
    qrels: &Qrels,
    per_list: impl Fn(&RankedList, &BTreeMap<String, u32>) -> f64,
) -> Result<MetricReport> {
    if spec.k == 0 {
        return Err(Error::invalid("metric cutoff must be >= 1"));
    }
    let mut per_query = Vec::new();
    let mut missing_qrels = 0;
    let mut no_relevant = 0;
    for list in run.lists() {
        let Some(judged) = qrels.judged(&list.query_id) else {
            missing_qrels += 1;
            continue;
        };
        if judged.values().all(|g| *g == 0) {
            no_relevant += 1;
            continue;
        }
        per_query.push((list.query_id.clone(), per_list(list, judged)));
    }
    let mean = if per_query.is_empty() {
        0.0
    } else {
        per_query.iter().map(|(_, v)| v).sum::<f64>() / per_query.len() as f64
    };
    Ok(MetricReport {
        spec,
        per_query,
        mean,
        missing_qrels,
        no_relevant,
    })
}

#[inline]
fn discount(rank: usize) -> f64 {
    // rank is 1-based
    1.0 / ((rank + 1) as f64).log2()
}

pub fn ndcg_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    ndcg_at_k_with(run, qrels, k, Gain::Linear)
}

pub fn ndcg_at_k_with(run: &RunFile, qrels: &Qrels, k: usize, gain: Gain) -> Result<MetricReport> {
    let spec = MetricSpec {
        metric: Metric::Ndcg,
        k,
    };
    report(spec, run, qrels, |list, judged| {
        let dcg: f64 = list
            .entries
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, (doc, _))| gain.of(judged.get(doc).copied().unwrap_or(0)) * discount(i + 1))
            .sum();
        let mut ideal: Vec<u32> = judged.values().copied().filter(|g| *g > 0).collect();
        ideal.sort_unstable_by(|a, b| b.cmp(a));
        let idcg: f64 = ideal
            .iter()
            .take(k)
            .enumerate()
            .map(|(i, g)| gain.of(*g) * discount(i + 1))
            .sum();
        dcg / idcg
    })
}

pub fn recall_at_k(run: &RunFile, qrels: &Qrels, k: usize) -> Result<MetricReport> {
    let spec = MetricSpec {
        metric: Metric::Recall,
        k,
    };
    report(spec, run, qrels, |list, judged| {
        let relevant: BTreeSet<&str> = judged
            .iter()
            .filter(|(_, g)| **g > 0)
            .map(|(d, _)| d.as_str())
            .collect();
        let found = list
            .entries
            .iter()
            .take(k)
            .filter(|(d, _)| relevant.contains(d.as_str()))
            .count();
        found as f64 / relevant.len() as f64
    })
}
