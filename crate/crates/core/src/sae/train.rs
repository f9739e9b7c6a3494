//! Training with reconstruction loss plus the dead-feature auxiliary loss.
//!
//! Per batch of `n` samples:
//!
//! ```text
//! L_recon = (1/n) Σᵢ ‖vᵢ − v̂ᵢ‖²
//! L_aux   = (1/n) Σᵢ ‖eᵢ − êᵢ‖²,  eᵢ = vᵢ − v̂ᵢ,  êᵢ = W_decᵀ φ_aux(vᵢ)
//! L_total = L_recon + α · L_aux
//! ```
//!
//! `φ_aux` keeps, per sample, the `k_aux` largest positive pre-activations among
//! dead features (no code for `steps_since_fire > dead_threshold_steps`). The
//! gradient is the exact gradient of `L_total` with the top-k selection held
//! fixed, including the path through `e`.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;

use super::{batch_topk, decode, per_sample_topk, SaeModel};
use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub k_aux: usize,
    pub alpha_aux: f64,
    pub dead_threshold_steps: u64,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            k_aux: 32,
            alpha_aux: 1.0 / 32.0,
            dead_threshold_steps: 200,
            learning_rate: 1e-3,
            batch_size: 256,
            total_steps: 1000,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |what: &str| Err(Error::InvalidArgument(format!("{what} must be positive")));
        if self.k_aux == 0 {
            return bad("k_aux");
        }
        if !(self.alpha_aux >= 0.0 && self.alpha_aux.is_finite()) {
            return Err(Error::InvalidArgument("alpha_aux must be >= 0".into()));
        }
        if self.dead_threshold_steps == 0 {
            return bad("dead_threshold_steps");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate");
        }
        if self.batch_size == 0 {
            return bad("batch_size");
        }
        if self.total_steps == 0 {
            return bad("total_steps");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRecord {
    pub step: u64,
    pub l_recon: f64,
    pub l_aux: f64,
    pub l_total: f64,
    pub n_dead: usize,
    pub n_active: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub w_enc: Array2<f64>,
    pub w_dec: Array2<f64>,
    pub bias: Array1<f64>,
    /// Features present in the main batch code.
    pub fired: Vec<bool>,
}

/// Losses and parameter gradients for one batch. Does not modify the model.
pub fn loss_and_gradients(
    model: &SaeModel,
    batch: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
) -> Result<(LossRecord, Gradients)> {
    let n = batch.nrows();
    let (d, q) = (model.d(), model.q());
    let (centered, pre) = model.pre_activations(batch)?;
    let code = batch_topk(pre.view(), n * model.k);
    let recon = decode(model, &code)?;
    let resid = &recon - &batch;
    let inv_n = 1.0 / n as f64;
    let l_recon = resid.iter().map(|r| r * r).sum::<f64>() * inv_n;

    let dead: Vec<usize> = (0..q)
        .filter(|&j| model.steps_since_fire[j] > cfg.dead_threshold_steps)
        .collect();

    // gradient of L_total w.r.t. v̂ (through both losses)
    let mut d_recon = resid.mapv(|r| 2.0 * inv_n * r);
    let mut l_aux = 0.0;
    let mut aux = None;
    if !dead.is_empty() {
        let aux_code = per_sample_topk(pre.view(), &dead, cfg.k_aux);
        let mut diff = -&resid;
        for (i, j, a) in aux_code.iter() {
            diff.row_mut(i).scaled_add(-a, &model.w_dec.row(j));
        }
        l_aux = diff.iter().map(|x| x * x).sum::<f64>() * inv_n;
        let g_ehat = diff.mapv(|x| -2.0 * cfg.alpha_aux * inv_n * x);
        d_recon += &g_ehat;
        aux = Some((aux_code, g_ehat));
    }
    let l_total = l_recon + cfg.alpha_aux * l_aux;

    let mut g_dec = Array2::<f64>::zeros((q, d));
    let mut g_enc = Array2::<f64>::zeros((d, q));
    let mut g_bias = d_recon.sum_axis(Axis(0));
    let mut fired = vec![false; q];

    let mut backprop = |i: usize, j: usize, a: f64, upstream: ArrayView2<'_, f64>| {
        let up = upstream.row(i);
        g_dec.row_mut(j).scaled_add(a, &up);
        let dz = model.w_dec.row(j).dot(&up);
        if dz != 0.0 {
            g_enc.column_mut(j).scaled_add(dz, &centered.row(i));
            g_bias.scaled_add(-dz, &model.w_enc.column(j));
        }
    };
    for (i, j, a) in code.iter() {
        fired[j] = true;
        backprop(i, j, a, d_recon.view());
    }
    if let Some((aux_code, g_ehat)) = &aux {
        for (i, j, a) in aux_code.iter() {
            backprop(i, j, a, g_ehat.view());
        }
    }

    let record = LossRecord {
        step: model.training_steps,
        l_recon,
        l_aux,
        l_total,
        n_dead: dead.len(),
        n_active: code.total_active(),
    };
    Ok((
        record,
        Gradients {
            w_enc: g_enc,
            w_dec: g_dec,
            bias: g_bias,
            fired,
        },
    ))
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
struct Moments {
    m: Vec<f64>,
    v: Vec<f64>,
}

impl Moments {
    fn new(len: usize) -> Self {
        Moments {
            m: vec![0.0; len],
            v: vec![0.0; len],
        }
    }

    fn apply<'a>(
        &mut self,
        params: impl Iterator<Item = &'a mut f64>,
        grads: impl Iterator<Item = &'a f64>,
        lr: f64,
        bc1: f64,
        bc2: f64,
    ) {
        for (((p, g), m), v) in params.zip(grads).zip(&mut self.m).zip(&mut self.v) {
            *m = BETA1 * *m + (1.0 - BETA1) * g;
            *v = BETA2 * *v + (1.0 - BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}

/// Adam state plus the training loop bookkeeping for one model.
#[derive(Debug, Clone)]
pub struct Trainer {
    pub cfg: TrainConfig,
    enc: Moments,
    dec: Moments,
    bias: Moments,
    t: i32,
}

impl Trainer {
    pub fn new(model: &SaeModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            enc: Moments::new(model.w_enc.len()),
            dec: Moments::new(model.w_dec.len()),
            bias: Moments::new(model.bias.len()),
            cfg,
            t: 0,
        })
    }

    /// One optimizer update on `batch`. Fails without touching the model when the loss is non-finite.
    pub fn train_step(&mut self, model: &mut SaeModel, batch: ArrayView2<'_, f64>) -> Result<LossRecord> {
        let (record, grads) = loss_and_gradients(model, batch, &self.cfg)?;
        let finite = record.l_total.is_finite()
            && grads
                .w_enc
                .iter()
                .chain(grads.w_dec.iter())
                .chain(grads.bias.iter())
                .all(|g| g.is_finite());
        if !finite {
            return Err(Error::NonFinite {
                step: model.training_steps,
                learning_rate: self.cfg.learning_rate,
            });
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t);
        let bc2 = 1.0 - BETA2.powi(self.t);
        let lr = self.cfg.learning_rate;
        self.enc.apply(model.w_enc.iter_mut(), grads.w_enc.iter(), lr, bc1, bc2);
        self.dec.apply(model.w_dec.iter_mut(), grads.w_dec.iter(), lr, bc1, bc2);
        self.bias.apply(model.bias.iter_mut(), grads.bias.iter(), lr, bc1, bc2);
        for (count, fired) in model.steps_since_fire.iter_mut().zip(&grads.fired) {
            *count = if *fired { 0 } else { count.saturating_add(1) };
        }
        model.training_steps += 1;
        Ok(record)
    }
}

/// Runs `cfg.total_steps` updates over `tokens`, reshuffling after every pass.
pub fn train(
    model: &mut SaeModel,
    tokens: ArrayView2<'_, f64>,
    cfg: &TrainConfig,
    rng: &mut StreamRng,
) -> Result<Vec<LossRecord>> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let total = tokens.nrows();
    if total == 0 {
        return Err(Error::InvalidArgument("no training tokens".into()));
    }
    let mut order: Vec<usize> = (0..total).collect();
    order.shuffle(rng);
    let mut cursor = 0;
    let mut batch = Array2::<f64>::zeros((cfg.batch_size, model.d()));
    let mut log = Vec::with_capacity(cfg.total_steps as usize);
    for _ in 0..cfg.total_steps {
        for mut row in batch.rows_mut() {
            if cursor == total {
                order.shuffle(rng);
                cursor = 0;
            }
            row.assign(&tokens.row(order[cursor]));
            cursor += 1;
        }
        log.push(trainer.train_step(model, batch.view())?);
    }
    Ok(log)
}
