//! BatchTopK sparse autoencoder.
//!
//! Encoding computes `z = W_encᵀ(v − b)` for every sample of a batch, clamps
//! negatives to zero, and keeps the `n·k` largest entries of the whole batch.
//! Decoding is `v̂ = W_decᵀ φ + b`.
//!
//! Ties in the batch-level selection are broken by lower sample index, then
//! lower feature index, so codes do not depend on sort stability or platform.

mod checkpoint;
mod eval;
mod train;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use eval::{evaluate, evaluate_tokens, SaeEvalReport, SubsetMetrics};
pub use train::{loss_and_gradients, train, Gradients, LossRecord, TrainConfig, Trainer};

use std::cmp::Ordering;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SaeModel {
    /// `[d × q]`
    pub w_enc: Array2<f64>,
    /// `[q × d]`, one dictionary direction per row
    pub w_dec: Array2<f64>,
    /// `[d]`, subtracted before encoding and added after decoding
    pub bias: Array1<f64>,
    pub k: usize,
    /// Training steps since each feature was last in a batch code.
    pub steps_since_fire: Vec<u64>,
    pub training_steps: u64,
}

impl SaeModel {
    pub fn new(w_enc: Array2<f64>, w_dec: Array2<f64>, bias: Array1<f64>, k: usize) -> Result<Self> {
        let (d, q) = w_enc.dim();
        if w_dec.dim() != (q, d) {
            return Err(Error::Shape(format!(
                "decoder is {:?}, expected ({q}, {d})",
                w_dec.dim()
            )));
        }
        if bias.len() != d {
            return Err(Error::Shape(format!("bias has {} entries, expected {d}", bias.len())));
        }
        if d == 0 || q == 0 || q % d != 0 {
            return Err(Error::Shape(format!(
                "dictionary size {q} is not a positive multiple of d = {d}"
            )));
        }
        if k == 0 {
            return Err(Error::InvalidArgument("k must be positive".into()));
        }
        let finite = w_enc
            .iter()
            .chain(w_dec.iter())
            .chain(bias.iter())
            .all(|v| v.is_finite());
        if !finite {
            return Err(Error::InvalidArgument("non-finite SAE weight".into()));
        }
        Ok(SaeModel {
            w_enc,
            w_dec,
            bias,
            k,
            steps_since_fire: vec![0; q],
            training_steps: 0,
        })
    }

    /// Unit-norm Gaussian decoder rows, encoder = decoderᵀ, bias = `data_mean`.
    pub fn init<R: Rng + ?Sized>(
        d: usize,
        expansion: usize,
        k: usize,
        data_mean: ArrayView1<'_, f64>,
        rng: &mut R,
    ) -> Result<Self> {
        if expansion == 0 {
            return Err(Error::InvalidArgument("expansion factor must be positive".into()));
        }
        let q = d * expansion;
        let mut w_dec = Array2::<f64>::zeros((q, d));
        for mut row in w_dec.rows_mut() {
            loop {
                row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
                let norm = row.dot(&row).sqrt();
                if norm > 1e-8 {
                    row /= norm;
                    break;
                }
            }
        }
        let w_enc = w_dec.t().as_standard_layout().into_owned();
        SaeModel::new(w_enc, w_dec, data_mean.to_owned(), k)
    }

    pub fn d(&self) -> usize {
        self.w_enc.nrows()
    }

    pub fn q(&self) -> usize {
        self.w_enc.ncols()
    }

    pub fn expansion(&self) -> usize {
        self.q() / self.d()
    }

    fn check_batch(&self, batch: &ArrayView2<'_, f64>) -> Result<()> {
        if batch.nrows() == 0 {
            return Err(Error::InvalidArgument("empty batch".into()));
        }
        if batch.ncols() != self.d() {
            return Err(Error::Shape(format!(
                "batch has d = {}, model expects {}",
                batch.ncols(),
                self.d()
            )));
        }
        Ok(())
    }

    /// `(v − b)` and `W_encᵀ(v − b)` for every row.
    pub fn pre_activations(&self, batch: ArrayView2<'_, f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_batch(&batch)?;
        let centered = &batch - &self.bias.view().insert_axis(Axis(0));
        let pre = centered.dot(&self.w_enc);
        Ok((centered, pre))
    }
}

/// Active `(feature, activation)` pairs per sample, features ascending, activations > 0.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct SparseCode {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseCode {
    pub fn empty(n: usize) -> Self {
        SparseCode {
            rows: vec![Vec::new(); n],
        }
    }

    pub fn n_samples(&self) -> usize {
        self.rows.len()
    }

    pub fn total_active(&self) -> usize {
        self.rows.iter().map(Vec::len).sum()
    }

    pub fn activation(&self, sample: usize, feature: usize) -> f64 {
        let row = &self.rows[sample];
        row.binary_search_by_key(&feature, |(j, _)| *j)
            .map(|pos| row[pos].1)
            .unwrap_or(0.0)
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.rows
            .iter()
            .enumerate()
            .flat_map(|(i, row)| row.iter().map(move |&(j, a)| (i, j, a)))
    }
}

/// Orders candidates for selection: larger value first, then lower sample, then lower feature.
fn selection_order(a: &(f64, usize, usize), b: &(f64, usize, usize)) -> Ordering {
    b.0.partial_cmp(&a.0)
        .unwrap_or(Ordering::Equal)
        .then(a.1.cmp(&b.1))
        .then(a.2.cmp(&b.2))
}

/// Keeps the `budget` largest positive entries of `pre` across the whole batch.
pub fn batch_topk(pre: ArrayView2<'_, f64>, budget: usize) -> SparseCode {
    let mut candidates: Vec<(f64, usize, usize)> = pre
        .indexed_iter()
        .filter(|(_, v)| **v > 0.0)
        .map(|((i, j), v)| (*v, i, j))
        .collect();
    if candidates.len() > budget {
        if budget == 0 {
            candidates.clear();
        } else {
            candidates.select_nth_unstable_by(budget - 1, selection_order);
            candidates.truncate(budget);
        }
    }
    let mut code = SparseCode::empty(pre.nrows());
    for (v, i, j) in candidates {
        code.rows[i].push((j, v));
    }
    for row in &mut code.rows {
        row.sort_unstable_by_key(|(j, _)| *j);
    }
    code
}

/// Per-sample top-`k` of positive entries restricted to `allowed` features.
pub(crate) fn per_sample_topk(pre: ArrayView2<'_, f64>, allowed: &[usize], k: usize) -> SparseCode {
    let mut code = SparseCode::empty(pre.nrows());
    if k == 0 || allowed.is_empty() {
        return code;
    }
    for (i, row) in pre.rows().into_iter().enumerate() {
        let mut cands: Vec<(f64, usize, usize)> = allowed
            .iter()
            .filter(|&&j| row[j] > 0.0)
            .map(|&j| (row[j], i, j))
            .collect();
        if cands.len() > k {
            cands.select_nth_unstable_by(k - 1, selection_order);
            cands.truncate(k);
        }
        let mut out: Vec<(usize, f64)> = cands.into_iter().map(|(v, _, j)| (j, v)).collect();
        out.sort_unstable_by_key(|(j, _)| *j);
        code.rows[i] = out;
    }
    code
}

pub fn encode_batch(model: &SaeModel, batch: ArrayView2<'_, f64>) -> Result<SparseCode> {
    let (_, pre) = model.pre_activations(batch)?;
    Ok(batch_topk(pre.view(), batch.nrows() * model.k))
}

/// Membership mask over the `q` dictionary features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FeatureSet {
    member: Vec<bool>,
}

impl FeatureSet {
    pub fn none(q: usize) -> Self {
        FeatureSet { member: vec![false; q] }
    }

    pub fn all(q: usize) -> Self {
        FeatureSet { member: vec![true; q] }
    }

    pub fn from_indices(q: usize, indices: impl IntoIterator<Item = usize>) -> Result<Self> {
        let mut member = vec![false; q];
        for j in indices {
            if j >= q {
                return Err(Error::InvalidArgument(format!(
                    "feature index {j} out of range for q = {q}"
                )));
            }
            member[j] = true;
        }
        Ok(FeatureSet { member })
    }

    pub fn contains(&self, j: usize) -> bool {
        self.member.get(j).copied().unwrap_or(false)
    }

    pub fn q(&self) -> usize {
        self.member.len()
    }

    pub fn len(&self) -> usize {
        self.member.iter().filter(|m| **m).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn indices(&self) -> impl Iterator<Item = usize> + '_ {
        self.member.iter().enumerate().filter(|(_, m)| **m).map(|(j, _)| j)
    }

    pub fn union(&self, other: &FeatureSet) -> FeatureSet {
        FeatureSet {
            member: self.member.iter().zip(&other.member).map(|(a, b)| *a || *b).collect(),
        }
    }
}

fn check_code(model: &SaeModel, code: &SparseCode) -> Result<()> {
    let q = model.q();
    if let Some((_, j, _)) = code.iter().find(|(_, j, _)| *j >= q) {
        return Err(Error::InvalidArgument(format!(
            "code references feature {j}, dictionary has {q}"
        )));
    }
    Ok(())
}

/// `v̂ = W_decᵀ φ + b` for every sample.
pub fn decode(model: &SaeModel, code: &SparseCode) -> Result<Array2<f64>> {
    let mut out = decode_subset(model, code, &FeatureSet::all(model.q()))?;
    out += &model.bias.view().insert_axis(Axis(0));
    Ok(out)
}

/// Reconstruction from the features in `features` only, without the bias.
pub fn decode_subset(model: &SaeModel, code: &SparseCode, features: &FeatureSet) -> Result<Array2<f64>> {
    check_code(model, code)?;
    if features.q() != model.q() {
        return Err(Error::Shape(format!(
            "feature set over {} features, dictionary has {}",
            features.q(),
            model.q()
        )));
    }
    let mut out = Array2::zeros((code.n_samples(), model.d()));
    for (i, j, a) in code.iter() {
        if features.contains(j) {
            out.row_mut(i).scaled_add(a, &model.w_dec.row(j));
        }
    }
    Ok(out)
}
