mod common;

use std::cmp::Ordering;

use proptest::prelude::*;
use sbmoe::io::{gen_synthetic, SyntheticSpec};
use sbmoe::moe::{init_block, pool_all, pool_top1, refine_batch, InitScheme, RandomGate, DOC_STREAM};
use sbmoe::numerics::{Matrix, SeededRng};
use sbmoe::retrieval::{build_index, refine_queries, round_score, run_queries, search_topk};
use sbmoe::{EmbeddingMatrix, Pooling, Refiner};

fn random_matrix(prefix: &str, rows: usize, d: usize, rng: &mut SeededRng) -> EmbeddingMatrix {
    let data = rng.gaussian(rows * d).into_iter().map(|v| v as f32).collect();
    EmbeddingMatrix::new(
        (0..rows).map(|i| format!("{prefix}{i:03}")).collect(),
        Matrix::from_vec(rows, d, data).unwrap(),
    )
    .unwrap()
}

/// Every document scored in f64, rounded, fully sorted.
fn exhaustive(query: &[f32], docs: &EmbeddingMatrix, k: usize) -> Vec<(String, f32)> {
    let mut all: Vec<(String, f32)> = docs
        .iter()
        .map(|(id, row)| {
            let s: f64 = row.iter().zip(query).map(|(a, b)| *a as f64 * *b as f64).sum();
            (id.to_string(), round_score(s))
        })
        .collect();
    all.sort_by(|a, b| match b.1.partial_cmp(&a.1).unwrap() {
        Ordering::Equal => a.0.cmp(&b.0),
        o => o,
    });
    all.truncate(k);
    all
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn top_k_matches_exhaustive_sort(seed in any::<u64>(), docs in 1usize..120, k in 1usize..150) {
        let mut rng = SeededRng::new(seed);
        let corpus = random_matrix("d", docs, 6, &mut rng);
        let queries = random_matrix("q", 3, 6, &mut rng);
        let index = build_index(&corpus, &Refiner::Identity).unwrap();
        let (refined, _) = refine_queries(&queries, &Refiner::Identity).unwrap();
        for q in &refined {
            let got = search_topk(q, &index, k).unwrap();
            prop_assert_eq!(got.entries, exhaustive(&q.vector, &corpus, k));
        }
    }
}

#[test]
fn ties_break_by_document_id() {
    let corpus = EmbeddingMatrix::new(
        vec!["b".into(), "c".into(), "a".into()],
        Matrix::from_rows(&[vec![1.0f32, 0.0], vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap(),
    )
    .unwrap();
    let queries = EmbeddingMatrix::new(vec!["q".into()], Matrix::from_rows(&[vec![2.0f32, 1.0]]).unwrap()).unwrap();
    let index = build_index(&corpus, &Refiner::Identity).unwrap();
    let run = run_queries(&queries, &Refiner::Identity, &index, 2).unwrap();
    let ids: Vec<&str> = run.lists()[0].doc_ids().collect();
    assert_eq!(ids, ["a", "b"]);
}

#[test]
fn batch_refinement_equals_row_by_row() {
    let mut rng = SeededRng::new(11);
    let x = random_matrix("x", 16, 8, &mut rng);
    let block = init_block(8, 3, 5, InitScheme::Dense).unwrap();
    let (top1, _) = refine_batch(&x, &block, Pooling::Top1, None, DOC_STREAM).unwrap();
    let (all, _) = refine_batch(&x, &block, Pooling::All, None, DOC_STREAM).unwrap();
    for i in 0..16 {
        assert_eq!(top1.row(i), pool_top1(x.row(i), &block).unwrap().0.as_slice());
        assert_eq!(all.row(i), pool_all(x.row(i), &block).unwrap().0.as_slice());
    }
}

#[test]
fn parallel_index_equals_serial_index() {
    let ds = gen_synthetic(&SyntheticSpec {
        docs_per_domain: 200,
        queries_per_domain: 10,
        train_queries_per_domain: 1,
        ..SyntheticSpec::default()
    })
    .unwrap();
    let block = init_block(32, 4, 9, InitScheme::Dense).unwrap();
    for refiner in [
        Refiner::new(&block, Pooling::Top1),
        Refiner::new(&block, Pooling::All),
        Refiner::random_gate(&block, Pooling::All, 3).unwrap(),
        Refiner::random_gate(&block, Pooling::Top1, 3).unwrap(),
    ] {
        let parallel = build_index(&ds.corpus, &refiner).unwrap();
        let serial = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap()
            .install(|| build_index(&ds.corpus, &refiner).unwrap());
        assert_eq!(parallel, serial);
        let wide = rayon::ThreadPoolBuilder::new()
            .num_threads(4)
            .build()
            .unwrap()
            .install(|| build_index(&ds.corpus, &refiner).unwrap());
        assert_eq!(parallel, wide);
    }
}

#[test]
fn random_gate_styles_do_not_share_a_fingerprint() {
    let block = init_block(8, 3, 1, InitScheme::Dense).unwrap();
    let a = Refiner::random_gate(&block, Pooling::All, 1).unwrap().fingerprint();
    let b = Refiner::random_gate(&block, Pooling::Top1, 1).unwrap().fingerprint();
    let c = Refiner::random_gate(&block, Pooling::Top1, 2).unwrap().fingerprint();
    assert_ne!(a, b);
    assert_eq!(b, c);
    assert!(Refiner::random_gate(&block, Pooling::RandomGate, 1).is_err());
}

#[test]
fn random_gate_rows_depend_only_on_seed_and_row() {
    let mut rng = SeededRng::new(2);
    let x = random_matrix("x", 10, 8, &mut rng);
    let block = init_block(8, 3, 5, InitScheme::Dense).unwrap();
    let rg = Some(RandomGate { seed: 4, style: Pooling::Top1 });
    let (full, _) = refine_batch(&x, &block, Pooling::RandomGate, rg, DOC_STREAM).unwrap();
    let head = x.select(&(0..4).collect::<Vec<_>>());
    let (part, _) = refine_batch(&head, &block, Pooling::RandomGate, rg, DOC_STREAM).unwrap();
    for i in 0..4 {
        assert_eq!(full.row(i), part.row(i));
    }
}
