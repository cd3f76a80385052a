#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, Output};

use sbmoe::evaluation::significance::paired_ttest;
use sbmoe::evaluation::MetricReport;
use sbmoe::io::{gen_synthetic, SyntheticDataset, SyntheticSpec};
use sbmoe::moe::{init_block, InitScheme, MoeBlock};
use sbmoe::numerics::{derive_seed, Matrix, SeededRng};
use sbmoe::retrieval::{build_index, run_queries, RankedList};
use sbmoe::training::backward::{backward_block, forward_noisy, ForwardRecord};
use sbmoe::training::loss::contrastive_loss;
use sbmoe::training::{initial_block, pairs_from_qrels};
use sbmoe::{train, Activation, MetricSpec, Pooling, Qrels, Refiner, RunFile, TrainingConfig};

// ---------------------------------------------------------------- gradients

pub const FD_STEP: f64 = 1e-4;
pub const GRAD_TOL: f64 = 1e-4;
/// Minimum distance of any ReLU pre-activation or top-1 logit gap from its
/// kink; central differences straddle the kink otherwise.
const KINK_MARGIN: f64 = 2e-3;

pub struct GradCase {
    pub block: MoeBlock<f64>,
    pub queries: Matrix<f64>,
    pub docs: Matrix<f64>,
    pub query_noise: Matrix<f64>,
    pub doc_noise: Matrix<f64>,
}

#[derive(Debug)]
pub struct GradReport {
    pub d: usize,
    pub n: usize,
    pub batch: usize,
    pub params: usize,
    pub max_rel_err: f64,
}

fn gaussian_matrix(rows: usize, cols: usize, rng: &mut SeededRng) -> Matrix<f64> {
    Matrix::from_vec(rows, cols, rng.gaussian(rows * cols)).unwrap()
}

fn record_is_smooth(rec: &ForwardRecord, noise: &Matrix<f64>, block: &MoeBlock<f64>) -> bool {
    rec.traces.iter().enumerate().all(|(i, t)| {
        let relu_ok = t
            .gate_pre_hidden
            .iter()
            .chain(&t.expert_pre_hidden)
            .all(|u| u.abs() > KINK_MARGIN);
        // noisy logits z + ε·softplus(ρ); softplus(ρ) == 1 at init
        let h: Vec<f64> = t
            .probs
            .iter()
            .zip(noise.row(i))
            .zip(&block.gate.noise_scale)
            .map(|((p, e), r)| p.ln() + e * sbmoe::numerics::softplus(*r))
            .collect();
        let best = h[t.selected];
        let gap_ok = h
            .iter()
            .enumerate()
            .all(|(j, v)| j == t.selected || best - v > KINK_MARGIN);
        relu_ok && gap_ok
    })
}

/// Draws a random configuration for `seed`, redrawing until no sample sits
/// within the kink margin.
pub fn grad_case(seed: u64) -> GradCase {
    for attempt in 0.. {
        let mut rng = SeededRng::new(derive_seed(seed, attempt));
        let d = [4, 8][rng.uniform_index(2)];
        let n = [2, 4][rng.uniform_index(2)];
        let b = 2 + rng.uniform_index(7);
        let block = init_block(d, n, rng.next_u64(), InitScheme::Dense).unwrap().cast::<f64>();
        let case = GradCase {
            queries: gaussian_matrix(b, d, &mut rng),
            docs: gaussian_matrix(b, d, &mut rng),
            query_noise: gaussian_matrix(b, n, &mut rng),
            doc_noise: gaussian_matrix(b, n, &mut rng),
            block,
        };
        let fq = forward_noisy(&case.block, &case.queries, &case.query_noise, true).unwrap();
        let fd = forward_noisy(&case.block, &case.docs, &case.doc_noise, true).unwrap();
        if record_is_smooth(&fq, &case.query_noise, &case.block) && record_is_smooth(&fd, &case.doc_noise, &case.block) {
            return case;
        }
    }
    unreachable!()
}

fn full_loss(block: &MoeBlock<f64>, c: &GradCase) -> f64 {
    let fq = forward_noisy(block, &c.queries, &c.query_noise, true).unwrap();
    let fd = forward_noisy(block, &c.docs, &c.doc_noise, true).unwrap();
    contrastive_loss(&fq.outputs, &fd.outputs, 1.0).unwrap().loss
}

/// Analytic gradients of the whole pipeline against central differences.
pub fn check_gradients(c: &GradCase) -> GradReport {
    let fq = forward_noisy(&c.block, &c.queries, &c.query_noise, true).unwrap();
    let fd = forward_noisy(&c.block, &c.docs, &c.doc_noise, true).unwrap();
    let loss = contrastive_loss(&fq.outputs, &fd.outputs, 1.0).unwrap();
    let mut grads = c.block.zeros_like();
    backward_block(&c.queries, &loss.grad_queries, &c.block, &fq, &mut grads).unwrap();
    backward_block(&c.docs, &loss.grad_docs, &c.block, &fd, &mut grads).unwrap();
    let analytic: Vec<Vec<f64>> = grads.param_slices().iter().map(|s| s.to_vec()).collect();

    let mut max_rel_err: f64 = 0.0;
    let mut params = 0;
    for (s, slice) in analytic.iter().enumerate() {
        for (j, &a) in slice.iter().enumerate() {
            let mut plus = c.block.clone();
            plus.param_slices_mut()[s][j] += FD_STEP;
            let mut minus = c.block.clone();
            minus.param_slices_mut()[s][j] -= FD_STEP;
            let num = (full_loss(&plus, c) - full_loss(&minus, c)) / (2.0 * FD_STEP);
            let err = (a - num).abs() / a.abs().max(num.abs()).max(1e-6);
            max_rel_err = max_rel_err.max(err);
            params += 1;
        }
    }
    GradReport {
        d: c.block.dim(),
        n: c.block.num_experts(),
        batch: c.queries.rows(),
        params,
        max_rel_err,
    }
}

// ---------------------------------------------------------------- metrics

pub struct MetricCase {
    pub run: RunFile,
    pub qrels: Qrels,
}

/// One query, up to 10 retrieved documents, grades 0..=3 on a random subset
/// of up to 8 judged documents (some possibly unretrieved).
pub fn metric_case(seed: u64) -> MetricCase {
    let mut rng = SeededRng::new(seed);
    let pool = 12;
    let retrieved = 1 + rng.uniform_index(10);
    let mut docs: Vec<usize> = (0..pool).collect();
    rng.shuffle(&mut docs);
    let entries = docs[..retrieved]
        .iter()
        .enumerate()
        .map(|(r, d)| (format!("d{d:02}"), (retrieved - r) as f32))
        .collect();
    let mut qrels = Qrels::new();
    let mut judged: Vec<usize> = (0..pool).collect();
    rng.shuffle(&mut judged);
    let judged_count = 1 + rng.uniform_index(8);
    for d in &judged[..judged_count] {
        qrels.insert("q", format!("d{d:02}"), rng.uniform_index(4) as u32).unwrap();
    }
    MetricCase {
        run: RunFile::new(vec![RankedList {
            query_id: "q".into(),
            entries,
        }]),
        qrels,
    }
}

fn permutations(items: &mut Vec<u32>, k: usize, out: &mut dyn FnMut(&[u32])) {
    // Heap's algorithm
    fn heap(n: usize, a: &mut Vec<u32>, out: &mut dyn FnMut(&[u32])) {
        if n <= 1 {
            out(a);
            return;
        }
        for i in 0..n - 1 {
            heap(n - 1, a, out);
            if n % 2 == 0 {
                a.swap(i, n - 1);
            } else {
                a.swap(0, n - 1);
            }
        }
        heap(n - 1, a, out);
    }
    let _ = k;
    let n = items.len();
    heap(n, items, out);
}

fn dcg(grades: &[u32], k: usize) -> f64 {
    grades
        .iter()
        .take(k)
        .enumerate()
        .map(|(i, &g)| g as f64 / ((i + 2) as f64).log2())
        .sum()
}

/// nDCG@k with linear gain; the ideal DCG is the maximum over every ordering
/// of the judged grades. `None` when no judged document is relevant.
pub fn brute_ndcg(case: &MetricCase, k: usize) -> Option<f64> {
    let judged = case.qrels.judged("q")?;
    let mut grades: Vec<u32> = judged.values().copied().collect();
    if grades.iter().all(|&g| g == 0) {
        return None;
    }
    let mut ideal: f64 = 0.0;
    permutations(&mut grades, k, &mut |p| ideal = ideal.max(dcg(p, k)));
    let list = &case.run.lists()[0];
    let got: Vec<u32> = list.entries.iter().map(|(d, _)| case.qrels.grade("q", d)).collect();
    Some(dcg(&got, k) / ideal)
}

pub fn brute_recall(case: &MetricCase, k: usize) -> Option<f64> {
    let judged = case.qrels.judged("q")?;
    let relevant: Vec<&String> = judged.iter().filter(|(_, g)| **g > 0).map(|(d, _)| d).collect();
    if relevant.is_empty() {
        return None;
    }
    let list = &case.run.lists()[0];
    let hits = relevant
        .iter()
        .filter(|d| list.entries.iter().take(k).any(|(e, _)| e == **d))
        .count();
    Some(hits as f64 / relevant.len() as f64)
}

// ---------------------------------------------------------------- experiment

/// Data and training settings of the end-to-end routing experiment.
pub fn experiment_spec(seed: u64) -> SyntheticSpec {
    SyntheticSpec {
        num_domains: 3,
        dim: 32,
        docs_per_domain: 1000,
        queries_per_domain: 100,
        seed,
        ..SyntheticSpec::default()
    }
}

pub fn experiment_training(seed: u64) -> TrainingConfig {
    TrainingConfig {
        lr: 1e-3,
        epochs: 50,
        seed,
        ..TrainingConfig::default()
    }
}

pub struct Experiment {
    pub data: SyntheticDataset,
    pub block: MoeBlock<f32>,
    pub baseline: MetricReport,
    pub top1: MetricReport,
    pub all: MetricReport,
    pub random_top1: MetricReport,
    pub random_all: MetricReport,
    pub top1_doc_routing: Vec<usize>,
}

pub fn ndcg_run(ds: &SyntheticDataset, refiner: &Refiner<'_>) -> (MetricReport, sbmoe::Routing) {
    let index = build_index(&ds.corpus, refiner).unwrap();
    let run = run_queries(&ds.queries, refiner, &index, 100).unwrap();
    (MetricSpec::NDCG_10.evaluate(&run, &ds.qrels).unwrap(), index.routing)
}

pub fn run_experiment(n: usize, seed: u64) -> Experiment {
    let data = gen_synthetic(&experiment_spec(seed)).unwrap();
    let pairs = pairs_from_qrels(&data.train_queries, &data.corpus, &data.train_qrels).unwrap();
    let init = initial_block(data.corpus.dim(), n, seed, Activation::Relu).unwrap();
    let block = train(&experiment_training(seed), &pairs, &init).unwrap().best.block;
    let (baseline, _) = ndcg_run(&data, &Refiner::Identity);
    let (top1, routing) = ndcg_run(&data, &Refiner::new(&block, Pooling::Top1));
    let (all, _) = ndcg_run(&data, &Refiner::new(&block, Pooling::All));
    let (random_top1, _) = ndcg_run(&data, &Refiner::random_gate(&block, Pooling::Top1, seed).unwrap());
    let (random_all, _) = ndcg_run(&data, &Refiner::random_gate(&block, Pooling::All, seed).unwrap());
    let top1_doc_routing = match routing {
        sbmoe::Routing::Selected(s) => s,
        other => panic!("unexpected routing {other:?}"),
    };
    Experiment {
        data,
        block,
        baseline,
        top1,
        all,
        random_top1,
        random_all,
        top1_doc_routing,
    }
}

/// Per-query values aligned on the union of query ids (missing = 0).
pub fn aligned(a: &MetricReport, b: &MetricReport) -> (Vec<f64>, Vec<f64>) {
    let (ma, mb) = (a.as_map(), b.as_map());
    let keys: std::collections::BTreeSet<&str> = ma.keys().chain(mb.keys()).copied().collect();
    keys.iter()
        .map(|k| (ma.get(k).copied().unwrap_or(0.0), mb.get(k).copied().unwrap_or(0.0)))
        .unzip()
}

/// Bonferroni-corrected p of `a` against `b` over `m` comparisons.
pub fn corrected_p(a: &MetricReport, b: &MetricReport, m: usize) -> f64 {
    let (x, y) = aligned(a, b);
    paired_ttest(&x, &y, m).unwrap().p_corrected
}

pub fn recount(routing: &[usize]) -> BTreeMap<usize, u64> {
    let mut m = BTreeMap::new();
    for &e in routing {
        *m.entry(e).or_insert(0) += 1;
    }
    m
}

// ---------------------------------------------------------------- cli

pub fn sbmoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbmoe"))
        .args(args)
        .current_dir(cwd)
        .env_remove(sbmoe::io::CONFIG_ENV)
        .output()
        .expect("spawn sbmoe")
}

pub fn sbmoe_ok(args: &[&str], cwd: &Path) -> Output {
    let out = sbmoe(args, cwd);
    assert!(
        out.status.success(),
        "sbmoe {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

/// synth → train → index → search → evaluate → compare in `dir` with small
/// settings; returns the stdout of `evaluate`.
pub fn cli_pipeline(dir: &Path) -> Vec<u8> {
    let run = |a: &[&str]| sbmoe_ok(a, dir);
    run(&[
        "synth", "--out", "data", "--docs-per-domain", "200", "--queries-per-domain", "20",
        "--train-queries-per-domain", "200", "--seed", "7",
    ]);
    run(&[
        "train", "--corpus", "data/corpus.sbme", "--queries", "data/train_queries.sbme", "--qrels",
        "data/train_qrels.txt", "--out", "block.ckpt", "--experts", "3", "--epochs", "3", "--lr", "1e-3",
        "--seed", "7",
    ]);
    for pooling in ["top1", "all"] {
        let idx = format!("idx_{pooling}");
        let out = format!("run_{pooling}.txt");
        run(&["index", "--corpus", "data/corpus.sbme", "--checkpoint", "block.ckpt", "--pooling", pooling, "--out", &idx]);
        run(&[
            "search", "--index", &idx, "--queries", "data/queries.sbme", "--checkpoint", "block.ckpt",
            "--pooling", pooling, "--out", &out,
        ]);
    }
    run(&["index", "--corpus", "data/corpus.sbme", "--out", "idx_base"]);
    run(&["search", "--index", "idx_base", "--queries", "data/queries.sbme", "--out", "run_base.txt"]);
    run(&[
        "compare", "--qrels", "data/qrels.txt", "--baseline", "base", "--run", "base=run_base.txt", "--run",
        "top1=run_top1.txt", "--run", "all=run_all.txt", "--out", "compare.tsv",
    ]);
    run(&["activation", "--index", "idx_top1", "--threshold-fraction", "0.01", "--out", "activation.tsv"]);
    run(&["evaluate", "--run", "run_top1.txt", "--qrels", "data/qrels.txt"]).stdout
}

/// Every file below `dir`, relative path → bytes.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<String, Vec<u8>>) {
        for entry in std::fs::read_dir(dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                walk(root, &path, out);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(dir, dir, &mut out);
    out
}
