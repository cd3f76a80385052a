//! Multi-domain synthetic retrieval data.
//!
//! `K` domains have mutually orthogonal centers `c_k` of norm `center_norm`.
//! A document of domain `k` is `c_k + z` with `z ~ N(0, I)`. A query picks
//! `positives_per_query` documents of its domain, averages their offsets `z̄`
//! and is emitted as `c_k + A_k·z̄ + noise·η`. The distortion
//! `A_k = I + (transform_scale − 1)·U_k U_kᵀ` stretches a random
//! `subspace_rank`-dimensional subspace `U_k` that differs per domain, so a single
//! global correction cannot undo all domains while a per-domain map
//! (`I + (transform_scale^{-1/2} − 1)·U_k U_kᵀ` on both sides) can. The
//! source documents are the relevant ones (grade 1).
//!
//! Two query sets share the domain geometry: evaluation queries (`q…`) and
//! training queries (`t…`).

use crate::embedding::EmbeddingMatrix;
use crate::error::{Error, Result};
use crate::evaluation::Qrels;
use crate::numerics::{Matrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub num_domains: usize,
    pub dim: usize,
    pub docs_per_domain: usize,
    pub queries_per_domain: usize,
    pub train_queries_per_domain: usize,
    pub positives_per_query: usize,
    /// Rank of each domain's distorted subspace.
    pub subspace_rank: usize,
    /// Stretch factor of each domain's distorted subspace.
    pub transform_scale: f64,
    /// Standard deviation of the per-coordinate query noise.
    pub noise: f64,
    pub center_norm: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_domains: 3,
            dim: 32,
            docs_per_domain: 1000,
            queries_per_domain: 100,
            train_queries_per_domain: 1000,
            positives_per_query: 1,
            subspace_rank: 4,
            transform_scale: 5.0,
            noise: 0.3,
            center_norm: 6.0,
            seed: 42,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_domains < 1 {
            return Err(Error::invalid("need at least one domain"));
        }
        if self.dim < self.num_domains {
            return Err(Error::invalid(format!(
                "dimension {} is smaller than the number of domains {}; centers cannot be orthogonal",
                self.dim, self.num_domains
            )));
        }
        if self.docs_per_domain < 1
            || self.queries_per_domain < 1
            || self.positives_per_query < 1
        {
            return Err(Error::invalid("all counts must be >= 1"));
        }
        if self.subspace_rank > self.dim {
            return Err(Error::invalid("subspace_rank exceeds dim"));
        }
        if self.positives_per_query > self.docs_per_domain {
            return Err(Error::invalid("positives_per_query exceeds docs_per_domain"));
        }
        if !(self.transform_scale > 0.0) || !(self.noise >= 0.0) || !(self.center_norm >= 0.0) {
            return Err(Error::invalid("transform_scale must be > 0, noise and center_norm >= 0"));
        }
        Ok(())
    }

}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub corpus: EmbeddingMatrix,
    pub queries: EmbeddingMatrix,
    pub qrels: Qrels,
    pub train_queries: EmbeddingMatrix,
    pub train_qrels: Qrels,
    /// Domain of each corpus row.
    pub doc_domains: Vec<usize>,
    /// Domain of each evaluation query.
    pub query_domains: Vec<usize>,
}

/// Orthonormal rows via modified Gram-Schmidt on Gaussian draws.
fn orthonormal_rows(rows: usize, dim: usize, rng: &mut SeededRng) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while out.len() < rows {
        let mut v = rng.gaussian(dim);
        for u in &out {
            let p: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= p * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            out.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    out
}

struct Domain {
    center: Vec<f64>,
    basis: Vec<Vec<f64>>,
}

impl Domain {
    /// `A·z = z + (λ − 1)·U Uᵀ z`
    fn distort(&self, z: &[f64], scale: f64) -> Vec<f64> {
        let mut out = z.to_vec();
        for u in &self.basis {
            let p: f64 = z.iter().zip(u).map(|(a, b)| a * b).sum::<f64>() * (scale - 1.0);
            out.iter_mut().zip(u).for_each(|(o, b)| *o += p * b);
        }
        out
    }
}

pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let d = spec.dim;
    let mut rng = SeededRng::new(spec.seed);
    let centers = orthonormal_rows(spec.num_domains, d, &mut rng);
    let domains: Vec<Domain> = centers
        .into_iter()
        .map(|c| Domain {
            center: c.into_iter().map(|v| v * spec.center_norm).collect(),
            basis: orthonormal_rows(spec.subspace_rank, d, &mut rng),
        })
        .collect();

    let n_docs = spec.num_domains * spec.docs_per_domain;
    let mut offsets: Vec<Vec<f64>> = Vec::with_capacity(n_docs);
    let mut doc_data = Vec::with_capacity(n_docs * d);
    let mut doc_domains = Vec::with_capacity(n_docs);
    for (k, dom) in domains.iter().enumerate() {
        for _ in 0..spec.docs_per_domain {
            let z = rng.gaussian(d);
            doc_data.extend(dom.center.iter().zip(&z).map(|(c, v)| (c + v) as f32));
            offsets.push(z);
            doc_domains.push(k);
        }
    }
    let width = digits(n_docs);
    let doc_ids: Vec<String> = (0..n_docs).map(|i| format!("d{i:0width$}")).collect();
    let corpus = EmbeddingMatrix::new(doc_ids.clone(), Matrix::from_vec(n_docs, d, doc_data)?)?;

    let mut make_queries = |prefix: char, per_domain: usize| -> Result<(EmbeddingMatrix, Qrels, Vec<usize>)> {
        let total = spec.num_domains * per_domain;
        let width = digits(total);
        let mut ids = Vec::with_capacity(total);
        let mut data = Vec::with_capacity(total * d);
        let mut qrels = Qrels::new();
        let mut qdom = Vec::with_capacity(total);
        for (k, dom) in domains.iter().enumerate() {
            for _ in 0..per_domain {
                let qid = format!("{prefix}{:0width$}", ids.len());
                let mut sources: Vec<usize> = Vec::with_capacity(spec.positives_per_query);
                while sources.len() < spec.positives_per_query {
                    let j = k * spec.docs_per_domain + rng.uniform_index(spec.docs_per_domain);
                    if !sources.contains(&j) {
                        sources.push(j);
                    }
                }
                let mut mean = vec![0.0; d];
                for &j in &sources {
                    mean.iter_mut().zip(&offsets[j]).for_each(|(m, z)| *m += z);
                }
                let inv = 1.0 / sources.len() as f64;
                mean.iter_mut().for_each(|m| *m *= inv);
                let distorted = dom.distort(&mean, spec.transform_scale);
                let eta = rng.gaussian(d);
                data.extend(
                    dom.center
                        .iter()
                        .zip(&distorted)
                        .zip(&eta)
                        .map(|((c, a), e)| (c + a + spec.noise * e) as f32),
                );
                for &j in &sources {
                    qrels.insert(qid.clone(), doc_ids[j].clone(), 1)?;
                }
                ids.push(qid);
                qdom.push(k);
            }
        }
        let m = EmbeddingMatrix::new(ids, Matrix::from_vec(total, d, data)?)?;
        Ok((m, qrels, qdom))
    };
    let (queries, qrels, query_domains) = make_queries('q', spec.queries_per_domain)?;
    let (train_queries, train_qrels, _) = make_queries('t', spec.train_queries_per_domain)?;

    Ok(SyntheticDataset {
        corpus,
        queries,
        qrels,
        train_queries,
        train_qrels,
        doc_domains,
        query_domains,
    })
}

fn digits(n: usize) -> usize {
    n.max(1).to_string().len()
}
