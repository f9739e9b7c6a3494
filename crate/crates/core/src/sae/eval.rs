use ndarray::{Array1, ArrayView1, ArrayView2};

use super::{decode, encode_batch, SaeModel};
use crate::error::{Error, Result};
use crate::store::{EmbeddingSet, OutlierMask};

/// Reconstruction quality over one token subset.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SubsetMetrics {
    /// Σ‖v − v̂‖² / Σ‖v − mean(v)‖²
    pub fvu: f64,
    pub l0_mean: f64,
    pub cosine_mean: f64,
    pub n_tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SaeEvalReport {
    pub all: Option<SubsetMetrics>,
    /// Present only when a mask was supplied and it marks at least one token.
    pub outlier: Option<SubsetMetrics>,
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    match (na > 0.0, nb > 0.0) {
        (true, true) => (a.dot(&b) / (na * nb)).clamp(-1.0, 1.0),
        (false, false) => 1.0,
        _ => 0.0,
    }
}

#[derive(Default)]
struct Accumulator {
    err: f64,
    dev: f64,
    l0: f64,
    cos: f64,
    n: usize,
}

impl Accumulator {
    fn add(&mut self, v: ArrayView1<'_, f64>, v_hat: ArrayView1<'_, f64>, mean: &Array1<f64>, active: usize) {
        let diff = &v - &v_hat;
        let centered = &v - mean;
        self.err += diff.dot(&diff);
        self.dev += centered.dot(&centered);
        self.l0 += active as f64;
        self.cos += cosine(v, v_hat);
        self.n += 1;
    }

    fn finish(self) -> Option<SubsetMetrics> {
        if self.n == 0 {
            return None;
        }
        let n = self.n as f64;
        let fvu = if self.dev > 0.0 {
            self.err / self.dev
        } else if self.err == 0.0 {
            0.0
        } else {
            f64::INFINITY
        };
        Some(SubsetMetrics {
            fvu,
            l0_mean: self.l0 / n,
            cosine_mean: self.cos / n,
            n_tokens: self.n,
        })
    }
}

/// Metrics over a plain token matrix, encoded in consecutive batches of `batch_size` rows.
pub fn evaluate_tokens(model: &SaeModel, tokens: ArrayView2<'_, f64>, batch_size: usize) -> Result<SubsetMetrics> {
    if tokens.nrows() == 0 {
        return Err(Error::InvalidArgument("no tokens to evaluate".into()));
    }
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be positive".into()));
    }
    let mean = tokens.mean_axis(ndarray::Axis(0)).expect("nonempty");
    let mut acc = Accumulator::default();
    for chunk in tokens.axis_chunks_iter(ndarray::Axis(0), batch_size) {
        let code = encode_batch(model, chunk)?;
        let recon = decode(model, &code)?;
        for i in 0..chunk.nrows() {
            acc.add(chunk.row(i), recon.row(i), &mean, code.rows[i].len());
        }
    }
    Ok(acc.finish().expect("nonempty"))
}

/// Metrics over all tokens, and over outlier tokens when a mask is given.
/// Each image's `N` tokens form one encoding batch.
pub fn evaluate(model: &SaeModel, set: &EmbeddingSet, mask: Option<&OutlierMask>) -> Result<SaeEvalReport> {
    if set.dim() != model.d() {
        return Err(Error::Shape(format!("set has d = {}, model {}", set.dim(), model.d())));
    }
    if let Some(mask) = mask {
        if mask.mask.dim() != (set.n_images(), set.n_tokens()) {
            return Err(Error::Shape("outlier mask does not match the embedding set".into()));
        }
    }
    let d = set.dim();
    let mut mean_all = Array1::<f64>::zeros(d);
    let mut mean_out = Array1::<f64>::zeros(d);
    let mut n_out = 0usize;
    for m in 0..set.n_images() {
        for a in 0..set.n_tokens() {
            let v = set.token(m, a);
            mean_all += &v;
            if mask.is_some_and(|mk| mk.is_outlier(m, a)) {
                mean_out += &v;
                n_out += 1;
            }
        }
    }
    let total = set.n_images() * set.n_tokens();
    if total > 0 {
        mean_all /= total as f64;
    }
    if n_out > 0 {
        mean_out /= n_out as f64;
    }

    let mut all = Accumulator::default();
    let mut out = Accumulator::default();
    for m in 0..set.n_images() {
        let image = set.image(m);
        let code = encode_batch(model, image)?;
        let recon = decode(model, &code)?;
        for a in 0..set.n_tokens() {
            let active = code.rows[a].len();
            all.add(image.row(a), recon.row(a), &mean_all, active);
            if mask.is_some_and(|mk| mk.is_outlier(m, a)) {
                out.add(image.row(a), recon.row(a), &mean_out, active);
            }
        }
    }
    Ok(SaeEvalReport {
        all: all.finish(),
        outlier: out.finish(),
    })
}
