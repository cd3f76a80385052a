//! File formats, configuration and the synthetic data generator.

pub mod config;
pub mod embeddings;
pub mod index;
pub mod synthetic;
pub mod trec;

use std::fmt::Write as _;
use std::path::Path;

pub use config::{RunConfig, CONFIG_ENV};
pub use embeddings::{read_embeddings, write_embeddings};
pub use index::{read_index, write_index, IndexMeta};
pub use synthetic::{gen_synthetic, SyntheticDataset, SyntheticSpec};
pub use trec::{read_qrels, read_run, write_qrels, write_run};

use crate::error::{Error, Result};
use crate::training::EpochLog;

/// Columns: epoch, train_loss, val_loss.
pub fn format_loss_log(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch\ttrain_loss\tval_loss\n");
    for e in log {
        writeln!(out, "{}\t{:.8}\t{:.8}", e.epoch, e.train_loss, e.val_loss).expect("write to string");
    }
    out
}

pub fn write_text(path: impl AsRef<Path>, text: &str) -> Result<()> {
    let path = path.as_ref();
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

/// Writes the five files of a synthetic dataset into `dir`:
/// `corpus.sbme`, `queries.sbme`, `qrels.txt`, `train_queries.sbme`,
/// `train_qrels.txt` (plus the `.ids` siblings).
pub fn write_dataset(dir: impl AsRef<Path>, ds: &SyntheticDataset) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_embeddings(dir.join("corpus.sbme"), &ds.corpus)?;
    write_embeddings(dir.join("queries.sbme"), &ds.queries)?;
    write_qrels(dir.join("qrels.txt"), &ds.qrels)?;
    write_embeddings(dir.join("train_queries.sbme"), &ds.train_queries)?;
    write_qrels(dir.join("train_qrels.txt"), &ds.train_qrels)
}

/// Files of a dataset directory laid out by [`write_dataset`].
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetFiles {
    pub corpus: crate::EmbeddingMatrix,
    pub queries: crate::EmbeddingMatrix,
    pub qrels: crate::evaluation::Qrels,
    pub train_queries: crate::EmbeddingMatrix,
    pub train_qrels: crate::evaluation::Qrels,
}

pub fn read_dataset(dir: impl AsRef<Path>) -> Result<DatasetFiles> {
    let dir = dir.as_ref();
    Ok(DatasetFiles {
        corpus: read_embeddings(dir.join("corpus.sbme"))?,
        queries: read_embeddings(dir.join("queries.sbme"))?,
        qrels: read_qrels(dir.join("qrels.txt"))?,
        train_queries: read_embeddings(dir.join("train_queries.sbme"))?,
        train_qrels: read_qrels(dir.join("train_qrels.txt"))?,
    })
}

impl From<SyntheticDataset> for DatasetFiles {
    fn from(ds: SyntheticDataset) -> Self {
        Self {
            corpus: ds.corpus,
            queries: ds.queries,
            qrels: ds.qrels,
            train_queries: ds.train_queries,
            train_qrels: ds.train_qrels,
        }
    }
}
