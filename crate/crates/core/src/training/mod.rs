//! Contrastive training of the block on frozen base embeddings.
//!
//! Only block parameters are updated. Each minibatch is refined with noisy
//! TOP-1 routing, scored with in-batch-negative InfoNCE, differentiated by
//! hand and stepped with Adam. After every epoch the validation split is
//! scored with clean TOP-1 inference pooling and the lowest-loss checkpoint
//! is kept.

pub mod adam;
pub mod backward;
pub mod loss;

use std::collections::HashMap;

pub use adam::{adam_step, AdamParams, AdamState};
pub use backward::{backward_block, forward_noisy, ForwardRecord, SampleTrace};
pub use loss::{contrastive_loss, LossOutput};

use crate::embedding::EmbeddingMatrix;
use crate::error::{check_dim, Error, Result};
use crate::evaluation::Qrels;
use crate::moe::{init_block_with, pool_top1, Activation, InitScheme, MoeBlock};
use crate::numerics::{derive_seed, Matrix, SeededRng};

const SPLIT_TAG: u64 = 0x53_504c_4954;
const TRAIN_TAG: u64 = 0x54_5241_494e;
const INIT_TAG: u64 = 0x49_4e49_54;

/// Near-identity block whose weights are drawn from a stream derived from
/// the run seed and the expert count.
pub fn initial_block(d: usize, n: usize, seed: u64, activation: Activation) -> Result<MoeBlock<f32>> {
    init_block_with(d, n, derive_seed(seed, INIT_TAG ^ n as u64), InitScheme::NearIdentity, activation)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub batch_size: usize,
    /// Learning rate of all block parameters.
    pub lr: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub val_fraction: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Emit `f_m(x)` instead of `p_m·f_m(x)` during training (the gate then
    /// receives no gradient).
    pub unscaled_gate: bool,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            lr: 1e-4,
            epochs: 10,
            temperature: 1.0,
            seed: 42,
            val_fraction: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            unscaled_gate: false,
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::invalid("batch_size must be >= 1"));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::invalid(format!(
                "val_fraction must lie in (0, 1), got {}",
                self.val_fraction
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::invalid("temperature must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid("learning rate must be positive"));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamParams {
        AdamParams {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
        }
    }
}

/// One (query, judged-positive document) training example.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainPair {
    pub query_id: String,
    pub doc_id: String,
    pub query: Vec<f32>,
    pub doc: Vec<f32>,
}

/// One pair per (query, positive document); queries in input order,
/// documents by ascending id. Queries without judgments are skipped.
pub fn pairs_from_qrels(
    queries: &EmbeddingMatrix,
    corpus: &EmbeddingMatrix,
    qrels: &Qrels,
) -> Result<Vec<TrainPair>> {
    check_dim(queries.dim(), corpus.dim())?;
    let doc_index: HashMap<&str, usize> = corpus
        .ids()
        .iter()
        .enumerate()
        .map(|(i, id)| (id.as_str(), i))
        .collect();
    let mut pairs = Vec::new();
    for (qid, q) in queries.iter() {
        for doc_id in qrels.relevant(qid) {
            let &j = doc_index
                .get(doc_id)
                .ok_or_else(|| Error::invalid(format!("qrels doc {doc_id:?} is not in the corpus")))?;
            pairs.push(TrainPair {
                query_id: qid.to_string(),
                doc_id: doc_id.to_string(),
                query: q.to_vec(),
                doc: corpus.row(j).to_vec(),
            });
        }
    }
    Ok(pairs)
}

/// Seeded split by query: all pairs of a query land on the same side.
/// The validation side holds `round(queries · val_fraction)` queries,
/// clamped to leave at least one query on each side.
pub fn split_validation(
    pairs: &[TrainPair],
    val_fraction: f64,
    seed: u64,
) -> Result<(Vec<&TrainPair>, Vec<&TrainPair>)> {
    if pairs.len() < 2 {
        return Err(Error::invalid(format!(
            "need at least 2 training pairs, got {}",
            pairs.len()
        )));
    }
    if !(val_fraction > 0.0 && val_fraction < 1.0) {
        return Err(Error::invalid("val_fraction must lie in (0, 1)"));
    }
    let mut group_of: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<Vec<&TrainPair>> = Vec::new();
    for p in pairs {
        let g = *group_of.entry(p.query_id.as_str()).or_insert_with(|| {
            groups.push(Vec::new());
            groups.len() - 1
        });
        groups[g].push(p);
    }
    if groups.len() < 2 {
        return Err(Error::invalid("need pairs from at least 2 queries to split"));
    }
    SeededRng::new(derive_seed(seed, SPLIT_TAG)).shuffle(&mut groups);
    let n_val = ((groups.len() as f64 * val_fraction).round() as usize).clamp(1, groups.len() - 1);
    let val = groups[..n_val].iter().flatten().copied().collect();
    let train = groups[n_val..].iter().flatten().copied().collect();
    Ok((train, val))
}

/// Best block seen during training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub block: MoeBlock<f32>,
    /// 0 for the initial block.
    pub epoch: usize,
    pub val_loss: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub log: Vec<EpochLog>,
    /// Per epoch, the loss of every minibatch in order.
    pub batch_losses: Vec<Vec<f64>>,
}

fn stack<'a>(rows: impl ExactSizeIterator<Item = &'a [f32]>, dim: usize) -> Matrix<f64> {
    let n = rows.len();
    let data = rows.flat_map(|r| r.iter().map(|&v| v as f64)).collect();
    Matrix::from_vec(n, dim, data).expect("row lengths")
}

/// Mean in-batch contrastive loss of `pairs` under clean TOP-1 pooling,
/// chunked by `batch_size` in input order and weighted by chunk size.
pub fn validation_loss(block: &MoeBlock<f32>, pairs: &[&TrainPair], batch_size: usize, tau: f64) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let block = block.cast::<f64>();
    let d = block.dim();
    let mut total = 0.0;
    for chunk in pairs.chunks(batch_size.max(1)) {
        let refine = |rows: Matrix<f64>| -> Result<Matrix<f64>> {
            let mut out = Matrix::zeros(rows.rows(), d);
            for i in 0..rows.rows() {
                let (y, _) = pool_top1(rows.row(i), &block)?;
                out.row_mut(i).copy_from_slice(&y);
            }
            Ok(out)
        };
        let q = refine(stack(chunk.iter().map(|p| p.query.as_slice()), d))?;
        let k = refine(stack(chunk.iter().map(|p| p.doc.as_slice()), d))?;
        total += contrastive_loss(&q, &k, tau)?.loss * chunk.len() as f64;
    }
    let v = total / pairs.len() as f64;
    if !v.is_finite() {
        return Err(Error::NonFinite("validation loss"));
    }
    Ok(v)
}

/// One noisy forward/backward pass over a minibatch; returns the loss and
/// accumulates gradients into `grads`.
pub fn batch_gradient(
    block: &MoeBlock<f64>,
    queries: &Matrix<f64>,
    docs: &Matrix<f64>,
    query_noise: &Matrix<f64>,
    doc_noise: &Matrix<f64>,
    config: &TrainingConfig,
    grads: &mut MoeBlock<f64>,
) -> Result<f64> {
    let scaled = !config.unscaled_gate;
    let fq = forward_noisy(block, queries, query_noise, scaled)?;
    let fd = forward_noisy(block, docs, doc_noise, scaled)?;
    let loss = contrastive_loss(&fq.outputs, &fd.outputs, config.temperature)?;
    backward_block(queries, &loss.grad_queries, block, &fq, grads)?;
    backward_block(docs, &loss.grad_docs, block, &fd, grads)?;
    Ok(loss.loss)
}

/// Trains `init` on `pairs` and returns the checkpoint with the lowest
/// validation loss (the initial block counts as epoch 0).
pub fn train(config: &TrainingConfig, pairs: &[TrainPair], init: &MoeBlock<f32>) -> Result<TrainOutcome> {
    config.validate()?;
    if pairs.is_empty() {
        return Err(Error::EmptyInput);
    }
    let d = init.dim();
    let n = init.num_experts();
    for p in pairs {
        check_dim(d, p.query.len())?;
        check_dim(d, p.doc.len())?;
    }
    let (train_set, val_set) = split_validation(pairs, config.val_fraction, config.seed)?;

    let mut best = Checkpoint {
        block: init.clone(),
        epoch: 0,
        val_loss: validation_loss(init, &val_set, config.batch_size, config.temperature)?,
    };
    let mut master = init.cast::<f64>();
    let mut state = AdamState::for_shapes(master.param_slices().iter().map(|s| s.len()));
    let hp = config.adam();
    let mut rng = SeededRng::new(derive_seed(config.seed, TRAIN_TAG));
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    let mut batch_losses = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        rng.shuffle(&mut order);
        let mut epoch_losses = Vec::new();
        let mut weighted = 0.0;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&TrainPair> = chunk.iter().map(|&i| train_set[i]).collect();
            let q = stack(batch.iter().map(|p| p.query.as_slice()), d);
            let k = stack(batch.iter().map(|p| p.doc.as_slice()), d);
            let qn = Matrix::from_vec(batch.len(), n, rng.gaussian(batch.len() * n))?;
            let kn = Matrix::from_vec(batch.len(), n, rng.gaussian(batch.len() * n))?;
            let mut grads = master.zeros_like();
            let loss = batch_gradient(&master, &q, &k, &qn, &kn, config, &mut grads)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite("training loss"));
            }
            {
                let g = grads.param_slices();
                let mut p = master.param_slices_mut();
                adam_step(&mut p, &g, &mut state, &hp)?;
            }
            weighted += loss * batch.len() as f64;
            epoch_losses.push(loss);
        }
        let snapshot = master.cast::<f32>();
        if !snapshot.is_finite() {
            return Err(Error::NonFinite("block parameters"));
        }
        let val_loss = validation_loss(&snapshot, &val_set, config.batch_size, config.temperature)?;
        log.push(EpochLog {
            epoch,
            train_loss: weighted / train_set.len() as f64,
            val_loss,
        });
        batch_losses.push(epoch_losses);
        if val_loss < best.val_loss {
            best = Checkpoint {
                block: snapshot,
                epoch,
                val_loss,
            };
        }
    }
    Ok(TrainOutcome {
        best,
        log,
        batch_losses,
    })
}
