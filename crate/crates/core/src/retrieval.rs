//! Exact dot-product retrieval over block-refined document embeddings.
//!
//! Scores accumulate in `f64` and are then rounded to six significant digits
//! and stored as `f32`; ranking uses the rounded score (descending) with ties
//! broken by ascending document id, so in-memory lists and their run-file
//! text agree exactly.

use std::cmp::Ordering;

use rayon::prelude::*;
use sha2::{Digest, Sha256};

use crate::embedding::EmbeddingMatrix;
use crate::error::{check_dim, Error, Result};
use crate::moe::{checkpoint, refine_batch, MoeBlock, Pooling, RandomGate, Routing, DOC_STREAM, QUERY_STREAM};
use crate::numerics::dot;

/// Ranked documents for one query.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query_id: String,
    /// `(doc id, score)`, best first.
    pub entries: Vec<(String, f32)>,
}

impl RankedList {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn doc_ids(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(d, _)| d.as_str())
    }
}

/// Ranked lists for a set of queries, in query input order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunFile {
    lists: Vec<RankedList>,
}

impl RunFile {
    pub fn new(lists: Vec<RankedList>) -> Self {
        Self { lists }
    }

    pub fn lists(&self) -> &[RankedList] {
        &self.lists
    }

    pub fn get(&self, query_id: &str) -> Option<&RankedList> {
        self.lists.iter().find(|l| l.query_id == query_id)
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }
}

/// Rounds a score to six significant digits and stores it as `f32`.
pub fn round_score(s: f64) -> f32 {
    format!("{s:.5e}").parse().expect("formatted float parses")
}

/// Descending score, then ascending doc id.
pub fn rank_order(a: (&str, f32), b: (&str, f32)) -> Ordering {
    b.1.partial_cmp(&a.1)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.0.cmp(b.0))
}

/// How embeddings are refined before scoring: not at all (the base-encoder
/// baseline) or through a block under a pooling mode.
#[derive(Debug, Clone, Copy)]
pub enum Refiner<'a> {
    Identity,
    Block {
        block: &'a MoeBlock<f32>,
        mode: Pooling,
        /// Required for [`Pooling::RandomGate`].
        random: Option<RandomGate>,
    },
}

impl<'a> Refiner<'a> {
    pub fn new(block: &'a MoeBlock<f32>, mode: Pooling) -> Self {
        Refiner::Block {
            block,
            mode,
            random: None,
        }
    }

    /// Random-gate ablation; `style` is [`Pooling::Top1`] or [`Pooling::All`].
    pub fn random_gate(block: &'a MoeBlock<f32>, style: Pooling, seed: u64) -> Result<Self> {
        if style == Pooling::RandomGate {
            return Err(Error::invalid("random-gate style must be top1 or all"));
        }
        Ok(Refiner::Block {
            block,
            mode: Pooling::RandomGate,
            random: Some(RandomGate { seed, style }),
        })
    }

    /// `identity`, or the first 16 bytes of SHA-256 over the checkpoint bytes
    /// followed by the pooling id (and the random-gate style id), as hex.
    pub fn fingerprint(&self) -> String {
        match self {
            Refiner::Identity => "identity".to_string(),
            Refiner::Block { block, mode, random } => fingerprint_parts(block, *mode, random.map(|r| r.style)),
        }
    }

    pub fn mode(&self) -> Option<Pooling> {
        match self {
            Refiner::Identity => None,
            Refiner::Block { mode, .. } => Some(*mode),
        }
    }

    pub fn refine(&self, x: &EmbeddingMatrix, stream_tag: u64) -> Result<(EmbeddingMatrix, Routing)> {
        match self {
            Refiner::Identity => Ok((x.clone(), Routing::Identity(x.len()))),
            Refiner::Block { block, mode, random } => refine_batch(x, block, *mode, *random, stream_tag),
        }
    }
}

pub fn block_fingerprint(block: &MoeBlock<f32>, mode: Pooling) -> String {
    fingerprint_parts(block, mode, None)
}

fn fingerprint_parts(block: &MoeBlock<f32>, mode: Pooling, style: Option<Pooling>) -> String {
    let mut h = Sha256::new();
    h.update(checkpoint::to_bytes(block));
    h.update(mode.id().to_le_bytes());
    if let Some(style) = style {
        h.update(style.id().to_le_bytes());
    }
    let digest = h.finalize();
    digest[..16].iter().map(|b| format!("{b:02x}")).collect()
}

/// Refined corpus ready for exhaustive search.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedIndex {
    pub docs: EmbeddingMatrix,
    pub routing: Routing,
    pub fingerprint: String,
}

impl RefinedIndex {
    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }
}

pub fn build_index(corpus: &EmbeddingMatrix, refiner: &Refiner<'_>) -> Result<RefinedIndex> {
    let (docs, routing) = refiner.refine(corpus, DOC_STREAM)?;
    Ok(RefinedIndex {
        docs,
        routing,
        fingerprint: refiner.fingerprint(),
    })
}

/// A query vector refined by a particular block and mode.
#[derive(Debug, Clone, PartialEq)]
pub struct RefinedQuery {
    pub id: String,
    pub vector: Vec<f32>,
    pub fingerprint: String,
}

pub fn refine_queries(queries: &EmbeddingMatrix, refiner: &Refiner<'_>) -> Result<(Vec<RefinedQuery>, Routing)> {
    let (refined, routing) = refiner.refine(queries, QUERY_STREAM)?;
    let fingerprint = refiner.fingerprint();
    let out = refined
        .iter()
        .map(|(id, v)| RefinedQuery {
            id: id.to_string(),
            vector: v.to_vec(),
            fingerprint: fingerprint.clone(),
        })
        .collect();
    Ok((out, routing))
}

/// Top-`k` documents by dot product; all documents when `k` exceeds the
/// corpus size.
pub fn search_topk(query: &RefinedQuery, index: &RefinedIndex, k: usize) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if query.fingerprint != index.fingerprint {
        return Err(Error::FingerprintMismatch {
            index: index.fingerprint.clone(),
            query: query.fingerprint.clone(),
        });
    }
    if !index.is_empty() {
        check_dim(index.docs.dim(), query.vector.len())?;
    }
    let ids = index.docs.ids();
    let mut scored: Vec<(usize, f32)> = index
        .docs
        .vectors()
        .iter_rows()
        .map(|d| round_score(dot(&query.vector, d)))
        .enumerate()
        .collect();
    let cmp = |a: &(usize, f32), b: &(usize, f32)| rank_order((&ids[a.0], a.1), (&ids[b.0], b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(RankedList {
        query_id: query.id.clone(),
        entries: scored.into_iter().map(|(i, s)| (ids[i].clone(), s)).collect(),
    })
}

/// Refines every query with `refiner`, searches `index`, and returns one
/// list per query in input order.
pub fn run_queries(
    queries: &EmbeddingMatrix,
    refiner: &Refiner<'_>,
    index: &RefinedIndex,
    k: usize,
) -> Result<RunFile> {
    let (refined, _) = refine_queries(queries, refiner)?;
    let lists = refined
        .par_iter()
        .map(|q| search_topk(q, index, k))
        .collect::<Result<Vec<_>>>()?;
    Ok(RunFile::new(lists))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::moe::{init_block, InitScheme};
    use crate::numerics::Matrix;

    fn emb(ids: &[&str], rows: &[Vec<f32>]) -> EmbeddingMatrix {
        EmbeddingMatrix::new(
            ids.iter().map(|s| s.to_string()).collect(),
            Matrix::from_rows(rows).unwrap(),
        )
        .unwrap()
    }

    fn raw_query(id: &str, v: Vec<f32>) -> RefinedQuery {
        RefinedQuery {
            id: id.into(),
            vector: v,
            fingerprint: "identity".into(),
        }
    }

    #[test]
    fn hand_search() {
        let corpus = emb(&["a", "b"], &[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let index = build_index(&corpus, &Refiner::Identity).unwrap();
        let list = search_topk(&raw_query("q", vec![1.0, 0.1]), &index, 2).unwrap();
        assert_eq!(list.entries, vec![("a".to_string(), 1.0), ("b".to_string(), 0.1)]);
    }

    #[test]
    fn ties_and_oversized_k() {
        let corpus = emb(&["c", "a", "b"], &[vec![1.0, 1.0], vec![1.0, 1.0], vec![1.0, 1.0]]);
        let index = build_index(&corpus, &Refiner::Identity).unwrap();
        let list = search_topk(&raw_query("q", vec![0.5, 0.5]), &index, 10).unwrap();
        assert_eq!(list.doc_ids().collect::<Vec<_>>(), vec!["a", "b", "c"]);
        let top2 = search_topk(&raw_query("q", vec![0.5, 0.5]), &index, 2).unwrap();
        assert_eq!(top2.doc_ids().collect::<Vec<_>>(), vec!["a", "b"]);
        assert!(search_topk(&raw_query("q", vec![0.5, 0.5]), &index, 0).is_err());
    }

    #[test]
    fn fingerprint_guard() {
        let block = init_block(2, 2, 1, InitScheme::NearIdentity).unwrap();
        let corpus = emb(&["a"], &[vec![1.0, 0.0]]);
        let index = build_index(&corpus, &Refiner::new(&block, Pooling::Top1)).unwrap();
        let (q, _) = refine_queries(&emb(&["q"], &[vec![1.0, 1.0]]), &Refiner::new(&block, Pooling::All)).unwrap();
        assert!(matches!(search_topk(&q[0], &index, 1), Err(Error::FingerprintMismatch { .. })));

        let other = init_block(2, 2, 2, InitScheme::NearIdentity).unwrap();
        assert_ne!(block_fingerprint(&block, Pooling::Top1), block_fingerprint(&other, Pooling::Top1));
        assert_eq!(block_fingerprint(&block, Pooling::Top1), block_fingerprint(&block.clone(), Pooling::Top1));
    }

    #[test]
    fn empty_corpus() {
        let index = build_index(&EmbeddingMatrix::empty(3), &Refiner::Identity).unwrap();
        assert!(index.is_empty());
        let list = search_topk(&raw_query("q", vec![1.0, 2.0, 3.0]), &index, 5).unwrap();
        assert!(list.is_empty());
    }

    #[test]
    fn score_rounding() {
        assert_eq!(round_score(1.0), 1.0);
        assert_eq!(round_score(123.456_789), 123.457);
        assert_eq!(round_score(-0.000_123_456_78), -0.000_123_457);
        assert_eq!(format!("{}", round_score(0.1)), "0.1");
    }
}
