//! Expert-activation counting, the expert-count sweep and raw data export
//! for embedding-space plots.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::time::{Duration, Instant};

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::evaluation::MetricSpec;
use crate::io::DatasetFiles;
use crate::moe::{Activation, Pooling, Routing};
use crate::retrieval::{build_index, run_queries, Refiner, RunFile};
use crate::training::{initial_block, pairs_from_qrels, train, TrainingConfig};

/// Minimum number of routed documents for an expert to count as activated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Threshold {
    Absolute(u64),
    /// Fraction of the corpus, in (0, 1].
    Fraction(f64),
}

impl Default for Threshold {
    fn default() -> Self {
        Threshold::Absolute(100_000)
    }
}

impl Threshold {
    /// The absolute count for a corpus of `corpus_size` documents.
    pub fn resolve(self, corpus_size: usize) -> Result<u64> {
        match self {
            Threshold::Absolute(0) => Err(Error::invalid("activation threshold must be > 0")),
            Threshold::Absolute(c) => Ok(c),
            Threshold::Fraction(f) if f > 0.0 && f <= 1.0 => {
                // tolerance keeps e.g. 0.01·300 at 3 rather than 4
                Ok(((f * corpus_size as f64 - 1e-9).ceil() as u64).max(1))
            }
            Threshold::Fraction(f) => Err(Error::invalid(format!(
                "activation fraction must lie in (0, 1], got {f}"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationReport {
    pub counts: Vec<u64>,
    pub corpus_size: usize,
    pub threshold: u64,
    pub activated: usize,
    pub employed: usize,
    pub percentage: f64,
}

impl ActivationReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("expert\tdocuments\tactivated\n");
        for (i, c) in self.counts.iter().enumerate() {
            writeln!(out, "{i}\t{c}\t{}", *c >= self.threshold).expect("write to string");
        }
        writeln!(
            out,
            "# corpus={} threshold={} activated={}/{} ({:.2}%)",
            self.corpus_size, self.threshold, self.activated, self.employed, self.percentage
        )
        .expect("write to string");
        out
    }
}

/// Counts documents per expert from TOP-1 routing; expert `i` is activated
/// when its count reaches the threshold.
pub fn activation_report(routing: &[usize], n: usize, threshold: Threshold) -> Result<ActivationReport> {
    if n == 0 {
        return Err(Error::invalid("number of experts must be >= 1"));
    }
    let threshold = threshold.resolve(routing.len())?;
    let mut counts = vec![0u64; n];
    for &m in routing {
        if m >= n {
            return Err(Error::invalid(format!("routed expert {m} out of range for {n} experts")));
        }
        counts[m] += 1;
    }
    let activated = counts.iter().filter(|c| **c >= threshold).count();
    Ok(ActivationReport {
        counts,
        corpus_size: routing.len(),
        threshold,
        activated,
        employed: n,
        percentage: 100.0 * activated as f64 / n as f64,
    })
}

/// Top expert of every row of `routing`; `None` for identity routing.
pub fn routed_experts(routing: &Routing) -> Option<Vec<usize>> {
    match routing {
        Routing::Identity(_) => None,
        _ => Some((0..routing.len()).map(|i| routing.top_expert(i).expect("routed")).collect()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub training: TrainingConfig,
    pub n_values: Vec<usize>,
    pub variants: Vec<Pooling>,
    pub activation: Activation,
    pub threshold: Threshold,
    pub metrics: [MetricSpec; 2],
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            training: TrainingConfig::default(),
            n_values: vec![3, 6, 9, 12],
            variants: vec![Pooling::Top1, Pooling::All],
            activation: Activation::Relu,
            threshold: Threshold::Fraction(0.01),
            metrics: [MetricSpec::NDCG_10, MetricSpec::RECALL_100],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    /// 0 for the identity baseline.
    pub n: usize,
    pub variant: String,
    pub ndcg: f64,
    pub recall: f64,
    pub activated: Option<usize>,
    /// Training plus evaluation time; not part of the TSV table.
    pub wall_time: Duration,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub metrics: [MetricSpec; 2],
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn baseline(&self) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.n == 0)
    }

    /// Columns: n, variant, the two metrics, activated experts. Wall times
    /// are left out so reruns compare byte for byte.
    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "n\tvariant\t{}\t{}\tactivated\n",
            self.metrics[0].label(),
            self.metrics[1].label()
        );
        for r in &self.rows {
            let act = r.activated.map_or("-".to_string(), |a| format!("{a}/{}", r.n));
            writeln!(out, "{}\t{}\t{:.6}\t{:.6}\t{}", r.n, r.variant, r.ndcg, r.recall, act).expect("write to string");
        }
        out
    }

    pub fn timings_tsv(&self) -> String {
        let mut out = String::from("n\tvariant\tseconds\n");
        for r in &self.rows {
            writeln!(out, "{}\t{}\t{:.3}", r.n, r.variant, r.wall_time.as_secs_f64()).expect("write to string");
        }
        out
    }
}

fn eval_pair(run: &RunFile, ds: &DatasetFiles, metrics: &[MetricSpec; 2]) -> Result<(f64, f64)> {
    Ok((
        metrics[0].evaluate(run, &ds.qrels)?.mean,
        metrics[1].evaluate(run, &ds.qrels)?.mean,
    ))
}

/// Trains one block per expert count (seed-derived init, same training
/// config) and evaluates every pooling variant plus the identity baseline
/// on the evaluation queries. Configurations run sequentially.
pub fn sweep(cfg: &SweepConfig, ds: &DatasetFiles) -> Result<SweepResult> {
    if cfg.n_values.is_empty() {
        return Err(Error::invalid("sweep needs at least one expert count"));
    }
    let k = cfg.metrics.iter().map(|m| m.k).max().unwrap_or(100);
    let pairs = pairs_from_qrels(&ds.train_queries, &ds.corpus, &ds.train_qrels)?;
    let mut rows = Vec::new();

    let start = Instant::now();
    let index = build_index(&ds.corpus, &Refiner::Identity)?;
    let run = run_queries(&ds.queries, &Refiner::Identity, &index, k)?;
    let (ndcg, recall) = eval_pair(&run, ds, &cfg.metrics)?;
    rows.push(SweepRow {
        n: 0,
        variant: "identity".into(),
        ndcg,
        recall,
        activated: None,
        wall_time: start.elapsed(),
    });

    for &n in &cfg.n_values {
        let t0 = Instant::now();
        let init = initial_block(ds.corpus.dim(), n, cfg.training.seed, cfg.activation)?;
        let outcome = train(&cfg.training, &pairs, &init)?;
        let block = outcome.best.block;
        let train_time = t0.elapsed();
        for &variant in &cfg.variants {
            let t1 = Instant::now();
            let refiner = match variant {
                Pooling::RandomGate => Refiner::random_gate(&block, Pooling::All, cfg.training.seed)?,
                mode => Refiner::new(&block, mode),
            };
            let index = build_index(&ds.corpus, &refiner)?;
            let run = run_queries(&ds.queries, &refiner, &index, k)?;
            let (ndcg, recall) = eval_pair(&run, ds, &cfg.metrics)?;
            let routed = routed_experts(&index.routing).expect("block routing");
            let report = activation_report(&routed, n, cfg.threshold)?;
            rows.push(SweepRow {
                n,
                variant: variant.name().to_string(),
                ndcg,
                recall,
                activated: Some(report.activated),
                wall_time: train_time + t1.elapsed(),
            });
        }
    }
    Ok(SweepResult {
        metrics: cfg.metrics,
        rows,
    })
}

/// Raw and refined embeddings plus routing for queries and documents.
#[derive(Debug, Clone, Copy)]
pub struct VizSource<'a> {
    pub queries_raw: &'a EmbeddingMatrix,
    pub queries_refined: &'a EmbeddingMatrix,
    pub query_routing: &'a Routing,
    pub docs_raw: &'a EmbeddingMatrix,
    pub docs_refined: &'a EmbeddingMatrix,
    pub doc_routing: &'a Routing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VizRow {
    pub id: String,
    pub is_query: bool,
    pub expert: Option<usize>,
    /// 0 for the query row.
    pub rank: usize,
    pub raw: Vec<f32>,
    pub refined: Vec<f32>,
}

/// TSV with one row for the query and one per retrieved document (up to
/// `top_k`): `id, kind, expert, rank, raw_0.., refined_0..`. Floats are
/// written in shortest round-trip form.
pub fn export_viz(query_id: &str, run: &RunFile, src: &VizSource<'_>, top_k: usize) -> Result<String> {
    let list = run
        .get(query_id)
        .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))?;
    let qi = src
        .queries_raw
        .position(query_id)
        .ok_or_else(|| Error::UnknownQuery(query_id.to_string()))?;
    let d = src.queries_raw.dim();
    let doc_pos: HashMap<&str, usize> = src
        .docs_raw
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();

    let mut out = String::from("id\tkind\texpert\trank");
    for prefix in ["raw", "refined"] {
        for j in 0..d {
            write!(out, "\t{prefix}_{j}").expect("write to string");
        }
    }
    out.push('\n');

    let mut emit = |id: &str, kind: &str, expert: Option<usize>, rank: usize, raw: &[f32], refined: &[f32]| {
        let e = expert.map_or("-".to_string(), |e| e.to_string());
        write!(out, "{id}\t{kind}\t{e}\t{rank}").expect("write to string");
        for v in raw.iter().chain(refined) {
            write!(out, "\t{v}").expect("write to string");
        }
        out.push('\n');
    };
    emit(
        query_id,
        "query",
        src.query_routing.top_expert(qi),
        0,
        src.queries_raw.row(qi),
        src.queries_refined.row(qi),
    );
    for (rank, (doc, _)) in list.entries.iter().take(top_k).enumerate() {
        let j = *doc_pos
            .get(doc.as_str())
            .ok_or_else(|| Error::invalid(format!("run document {doc:?} is not in the corpus")))?;
        emit(
            doc,
            "doc",
            src.doc_routing.top_expert(j),
            rank + 1,
            src.docs_raw.row(j),
            src.docs_refined.row(j),
        );
    }
    Ok(out)
}

pub fn parse_viz(text: &str) -> Result<Vec<VizRow>> {
    let mut lines = text.lines();
    let header = lines.next().ok_or(Error::EmptyInput)?;
    let cols = header.split('\t').count();
    if cols < 4 || (cols - 4) % 2 != 0 {
        return Err(Error::invalid("malformed viz header"));
    }
    let d = (cols - 4) / 2;
    lines
        .map(|line| {
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != cols {
                return Err(Error::invalid(format!("viz row has {} columns, expected {cols}", f.len())));
            }
            let num = |s: &str| -> Result<f32> { s.parse().map_err(|_| Error::invalid(format!("bad float {s:?}"))) };
            Ok(VizRow {
                id: f[0].to_string(),
                is_query: f[1] == "query",
                expert: if f[2] == "-" {
                    None
                } else {
                    Some(f[2].parse().map_err(|_| Error::invalid("bad expert"))?)
                },
                rank: f[3].parse().map_err(|_| Error::invalid("bad rank"))?,
                raw: f[4..4 + d].iter().map(|s| num(s)).collect::<Result<_>>()?,
                refined: f[4 + d..].iter().map(|s| num(s)).collect::<Result<_>>()?,
            })
        })
        .collect()
}
