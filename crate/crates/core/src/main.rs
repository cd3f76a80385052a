use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use sbmoe::analysis::{self, ActivationReport, SweepConfig, Threshold, VizSource};
use sbmoe::evaluation::significance::compare_runs;
use sbmoe::io::{self, IndexMeta, RunConfig, SyntheticSpec, CONFIG_ENV};
use sbmoe::moe::{checkpoint, MoeBlock};
use sbmoe::retrieval::{build_index, refine_queries, run_queries, Refiner};
use sbmoe::training::{initial_block, pairs_from_qrels};
use sbmoe::{train, MetricSpec, Pooling};

/// Single-block mixture-of-experts refinement for dense retrieval embeddings.
#[derive(Parser)]
#[command(name = "sbmoe", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a multi-domain synthetic dataset.
    Synth(SynthArgs),
    /// Train an MoE block with contrastive loss and save the best checkpoint.
    Train(TrainArgs),
    /// Refine and store a document collection.
    Index(IndexArgs),
    /// Retrieve the top-k documents for each query and write a TREC run.
    Search(SearchArgs),
    /// Score a run against qrels.
    Evaluate(EvaluateArgs),
    /// Compare runs against a baseline with Bonferroni-corrected paired t-tests.
    Compare(CompareArgs),
    /// Count documents per expert in an index and report activated experts.
    Activation(ActivationArgs),
    /// Train and evaluate one block per expert count.
    Sweep(SweepArgs),
    /// Export raw and refined embeddings of one query and its results.
    ExportViz(ExportVizArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 3)]
    domains: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    #[arg(long, default_value_t = 1000)]
    docs_per_domain: usize,
    #[arg(long, default_value_t = 100)]
    queries_per_domain: usize,
    #[arg(long, default_value_t = 1000)]
    train_queries_per_domain: usize,
    #[arg(long, default_value_t = 1)]
    positives_per_query: usize,
    #[arg(long, default_value_t = 4)]
    subspace_rank: usize,
    #[arg(long, default_value_t = 5.0)]
    transform_scale: f64,
    #[arg(long, default_value_t = 0.3)]
    noise: f64,
    #[arg(long, default_value_t = 6.0)]
    center_norm: f64,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

/// Training options shared by `train` and `sweep`. Command-line values
/// override the config file.
#[derive(Args)]
struct TrainOpts {
    /// `key=value` config file.
    #[arg(long, env = CONFIG_ENV)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    temperature: Option<f64>,
    /// relu or gelu.
    #[arg(long)]
    activation: Option<String>,
    /// Train with `f_m(x)` instead of `p_m·f_m(x)`.
    #[arg(long)]
    unscaled_gate: bool,
}

impl TrainOpts {
    fn resolve(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        let t = &mut cfg.training;
        if let Some(v) = self.seed {
            t.seed = v;
        }
        if let Some(v) = self.epochs {
            t.epochs = v;
        }
        if let Some(v) = self.lr {
            t.lr = v;
        }
        if let Some(v) = self.batch_size {
            t.batch_size = v;
        }
        if let Some(v) = self.temperature {
            t.temperature = v;
        }
        if self.unscaled_gate {
            t.unscaled_gate = true;
        }
        if let Some(a) = &self.activation {
            cfg.activation = a.parse()?;
        }
        cfg.training.validate()?;
        Ok(cfg)
    }
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    out: PathBuf,
    /// Per-epoch loss log (TSV); defaults to `<out>.log.tsv`.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Number of experts (overrides the config file).
    #[arg(long)]
    experts: Option<usize>,
    #[command(flatten)]
    opts: TrainOpts,
}

/// Block selection shared by `index`, `search` and `export-viz`.
#[derive(Args)]
struct BlockOpts {
    /// Block checkpoint; omit for the unrefined baseline.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// top1, all or random-gate.
    #[arg(long, default_value = "top1")]
    pooling: String,
    /// Random-gate style: top1 or all.
    #[arg(long, default_value = "all")]
    random_style: String,
    /// Seed of the random gate.
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

struct LoadedBlock {
    block: Option<MoeBlock<f32>>,
    pooling: Pooling,
    style: Pooling,
    seed: u64,
}

impl LoadedBlock {
    fn load(opts: &BlockOpts) -> Result<Self> {
        let style: Pooling = opts.random_style.parse()?;
        if style == Pooling::RandomGate {
            bail!("--random-style must be top1 or all");
        }
        Ok(Self {
            block: opts.checkpoint.as_ref().map(checkpoint::load).transpose()?,
            pooling: opts.pooling.parse()?,
            style,
            seed: opts.seed,
        })
    }

    fn refiner(&self) -> Result<Refiner<'_>> {
        Ok(match (&self.block, self.pooling) {
            (None, _) => Refiner::Identity,
            (Some(b), Pooling::RandomGate) => Refiner::random_gate(b, self.style, self.seed)?,
            (Some(b), mode) => Refiner::new(b, mode),
        })
    }
}

#[derive(Args)]
struct IndexArgs {
    #[arg(long)]
    corpus: PathBuf,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    block: BlockOpts,
}

#[derive(Args)]
struct SearchArgs {
    /// Index directory written by `index`.
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// Run file path.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value = "sbmoe")]
    tag: String,
    #[command(flatten)]
    block: BlockOpts,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    qrels: PathBuf,
    /// Metrics such as ndcg@10 or recall@100 (repeatable).
    #[arg(long = "metric", default_values = ["ndcg@10", "recall@100"])]
    metrics: Vec<String>,
    /// Also print per-query values.
    #[arg(long)]
    per_query: bool,
}

#[derive(Args)]
struct CompareArgs {
    #[arg(long)]
    qrels: PathBuf,
    /// Runs as NAME=PATH (repeatable).
    #[arg(long = "run", required = true)]
    runs: Vec<String>,
    /// Name of the baseline run.
    #[arg(long)]
    baseline: String,
    #[arg(long = "metric", default_values = ["ndcg@10", "recall@100"])]
    metrics: Vec<String>,
    /// Write the table here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ActivationArgs {
    #[arg(long)]
    index: PathBuf,
    /// Threshold as a fraction of the corpus.
    #[arg(long, conflicts_with = "threshold_count")]
    threshold_fraction: Option<f64>,
    /// Threshold as an absolute document count (default 100000).
    #[arg(long)]
    threshold_count: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    /// Dataset directory written by `synth`.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated expert counts.
    #[arg(long, value_delimiter = ',', default_values_t = [3, 6, 9, 12])]
    experts: Vec<usize>,
    /// Activation threshold as a fraction of the corpus.
    #[arg(long, default_value_t = 0.01)]
    threshold_fraction: f64,
    /// Table path.
    #[arg(long)]
    out: PathBuf,
    /// Optional per-row wall-time table.
    #[arg(long)]
    timings: Option<PathBuf>,
    #[command(flatten)]
    opts: TrainOpts,
}

#[derive(Args)]
struct ExportVizArgs {
    #[arg(long)]
    query: String,
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    corpus: PathBuf,
    #[arg(long, default_value_t = 1000)]
    top_k: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    block: BlockOpts,
}

fn parse_metrics(specs: &[String]) -> Result<Vec<MetricSpec>> {
    specs.iter().map(|s| Ok(s.parse()?)).collect()
}

fn loss_log_path(out: &Path) -> PathBuf {
    let mut s = out.as_os_str().to_owned();
    s.push(".log.tsv");
    PathBuf::from(s)
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => {
            let spec = SyntheticSpec {
                num_domains: a.domains,
                dim: a.dim,
                docs_per_domain: a.docs_per_domain,
                queries_per_domain: a.queries_per_domain,
                train_queries_per_domain: a.train_queries_per_domain,
                positives_per_query: a.positives_per_query,
                subspace_rank: a.subspace_rank,
                transform_scale: a.transform_scale,
                noise: a.noise,
                center_norm: a.center_norm,
                seed: a.seed,
            };
            let ds = io::gen_synthetic(&spec)?;
            io::write_dataset(&a.out, &ds)?;
            eprintln!(
                "wrote {} docs, {} queries, {} training queries to {}",
                ds.corpus.len(),
                ds.queries.len(),
                ds.train_queries.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let mut cfg = a.opts.resolve()?;
            if let Some(n) = a.experts {
                cfg.experts = n;
            }
            let corpus = io::read_embeddings(&a.corpus)?;
            let queries = io::read_embeddings(&a.queries)?;
            let qrels = io::read_qrels(&a.qrels)?;
            let pairs = pairs_from_qrels(&queries, &corpus, &qrels)?;
            let init = initial_block(corpus.dim(), cfg.experts, cfg.training.seed, cfg.activation)?;
            let outcome = train(&cfg.training, &pairs, &init)?;
            checkpoint::save(&outcome.best.block, &a.out)?;
            let log = a.log.unwrap_or_else(|| loss_log_path(&a.out));
            io::write_text(&log, &io::format_loss_log(&outcome.log))?;
            eprintln!(
                "best epoch {} (validation loss {:.6}); checkpoint {}",
                outcome.best.epoch,
                outcome.best.val_loss,
                a.out.display()
            );
        }
        Command::Index(a) => {
            let lb = LoadedBlock::load(&a.block)?;
            let refiner = lb.refiner()?;
            let corpus = io::read_embeddings(&a.corpus)?;
            let index = build_index(&corpus, &refiner)?;
            let meta = IndexMeta {
                fingerprint: index.fingerprint.clone(),
                pooling: refiner.mode(),
                random_style: (refiner.mode() == Some(Pooling::RandomGate)).then_some(lb.style),
                experts: lb.block.as_ref().map_or(0, |b| b.num_experts()),
                dim: corpus.dim(),
            };
            io::write_index(&a.out, &index, &meta)?;
        }
        Command::Search(a) => {
            let lb = LoadedBlock::load(&a.block)?;
            let refiner = lb.refiner()?;
            let (index, _) = io::read_index(&a.index)?;
            let queries = io::read_embeddings(&a.queries)?;
            let run = run_queries(&queries, &refiner, &index, a.k)?;
            io::write_run(&a.out, &run, &a.tag)?;
        }
        Command::Evaluate(a) => {
            let run = io::read_run(&a.run)?;
            let qrels = io::read_qrels(&a.qrels)?;
            for spec in parse_metrics(&a.metrics)? {
                let rep = spec.evaluate(&run, &qrels)?;
                if a.per_query {
                    for (q, v) in &rep.per_query {
                        println!("{}\t{q}\t{v:.5}", spec.label());
                    }
                }
                println!("{}\tall\t{:.5}", spec.label(), rep.mean);
                if rep.missing_qrels + rep.no_relevant > 0 {
                    eprintln!(
                        "{}: skipped {} queries without qrels and {} without relevant documents",
                        spec.label(),
                        rep.missing_qrels,
                        rep.no_relevant
                    );
                }
            }
        }
        Command::Compare(a) => {
            let qrels = io::read_qrels(&a.qrels)?;
            let runs = a
                .runs
                .iter()
                .map(|r| {
                    let (name, path) = r.split_once('=').with_context(|| format!("--run {r:?} is not NAME=PATH"))?;
                    Ok((name.to_string(), io::read_run(path)?))
                })
                .collect::<Result<Vec<_>>>()?;
            let table = compare_runs(&runs, &a.baseline, &qrels, &parse_metrics(&a.metrics)?)?;
            match a.out {
                Some(p) => io::write_text(p, &table.to_tsv())?,
                None => print!("{}", table.to_tsv()),
            }
        }
        Command::Activation(a) => {
            let (index, meta) = io::read_index(&a.index)?;
            if meta.experts == 0 {
                bail!("index {} was built without a block", a.index.display());
            }
            let threshold = match (a.threshold_fraction, a.threshold_count) {
                (Some(f), _) => Threshold::Fraction(f),
                (None, Some(c)) => Threshold::Absolute(c),
                (None, None) => Threshold::default(),
            };
            let routed = analysis::routed_experts(&index.routing).context("index has no routing")?;
            let report: ActivationReport = analysis::activation_report(&routed, meta.experts, threshold)?;
            match a.out {
                Some(p) => io::write_text(p, &report.to_tsv())?,
                None => print!("{}", report.to_tsv()),
            }
        }
        Command::Sweep(a) => {
            let cfg = a.opts.resolve()?;
            let ds = io::read_dataset(&a.data)?;
            let sweep_cfg = SweepConfig {
                training: cfg.training,
                n_values: a.experts,
                activation: cfg.activation,
                threshold: Threshold::Fraction(a.threshold_fraction),
                ..SweepConfig::default()
            };
            let result = analysis::sweep(&sweep_cfg, &ds)?;
            io::write_text(&a.out, &result.to_tsv())?;
            if let Some(p) = a.timings {
                io::write_text(p, &result.timings_tsv())?;
            }
        }
        Command::ExportViz(a) => {
            let lb = LoadedBlock::load(&a.block)?;
            let refiner = lb.refiner()?;
            let run = io::read_run(&a.run)?;
            let queries = io::read_embeddings(&a.queries)?;
            let corpus = io::read_embeddings(&a.corpus)?;
            let (refined_q, q_routing) = refine_queries(&queries, &refiner)?;
            let refined_q = sbmoe::EmbeddingMatrix::new(
                refined_q.iter().map(|q| q.id.clone()).collect(),
                sbmoe::Matrix::from_rows(&refined_q.iter().map(|q| q.vector.clone()).collect::<Vec<_>>())?,
            )?;
            let index = build_index(&corpus, &refiner)?;
            let src = VizSource {
                queries_raw: &queries,
                queries_refined: &refined_q,
                query_routing: &q_routing,
                docs_raw: &corpus,
                docs_refined: &index.docs,
                doc_routing: &index.routing,
            };
            io::write_text(&a.out, &analysis::export_viz(&a.query, &run, &src, a.top_k)?)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
