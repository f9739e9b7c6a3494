use std::path::PathBuf;

use cdscope::rng::{Seeds, BATCHES, SAE_INIT, SAMPLING};
use cdscope::sae::{evaluate, train, write_checkpoint, LossRecord, SaeModel, SubsetMetrics};
use cdscope::store::{compute_outlier_mask, sample_training_tokens};
use clap::Args;
use ndarray::Axis;

use super::{check_dims, load_embeddings, load_model};
use crate::config::RunConfig;
use crate::manifest::Run;

/// Train a BatchTopK SAE on tokens sampled from an embedding file.
#[derive(Debug, Args)]
pub struct TrainSae {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// Checkpoint path.
    #[arg(long)]
    pub out: PathBuf,
    /// Per-step loss table; defaults to the checkpoint path with a `.loss.csv` extension.
    #[arg(long)]
    pub loss_csv: Option<PathBuf>,
    #[arg(long)]
    pub expansion: Option<usize>,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub k_aux: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub dead_threshold: Option<u64>,
    #[arg(long)]
    pub tokens_per_image: Option<usize>,
}

impl TrainSae {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.sae;
        set(&mut s.expansion, self.expansion);
        set(&mut s.k, self.k);
        set(&mut s.k_aux, self.k_aux);
        set(&mut s.alpha, self.alpha);
        set(&mut s.lr, self.lr);
        set(&mut s.steps, self.steps);
        set(&mut s.batch, self.batch);
        set(&mut s.dead_threshold, self.dead_threshold);
        set(&mut s.tokens_per_image, self.tokens_per_image);
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("train-sae", cfg);
        let set = load_embeddings(&mut run, "embeddings", &self.embeddings)?;
        let s = &cfg.sae;
        let seeds = Seeds::new(cfg.seed);
        let tokens = sample_training_tokens(&set, s.tokens_per_image, &mut seeds.stream(SAMPLING))?;
        let mean = tokens.mean_axis(Axis(0)).expect("at least one image");
        let mut model = SaeModel::init(set.dim(), s.expansion, s.k, mean.view(), &mut seeds.stream(SAE_INIT))?;
        let log = train(
            &mut model,
            tokens.view(),
            &s.train_config(cfg.seed),
            &mut seeds.stream(BATCHES),
        )?;

        let loss_path = self
            .loss_csv
            .clone()
            .unwrap_or_else(|| self.out.with_extension("loss.csv"));
        run.note("training_tokens", tokens.nrows());
        run.note("q", model.q());
        if let Some(last) = log.last() {
            run.note("final_l_recon", last.l_recon);
            run.note("final_n_dead", last.n_dead);
        }
        run.output("checkpoint", &self.out, &write_checkpoint(&model, s.dtype()?)?)?;
        run.output("loss", &loss_path, &loss_csv(&log)?)?;
        run.commit()?;
        if let Some(last) = log.last() {
            println!(
                "trained d={} q={} k={} on {} tokens: step {} l_recon {:.6} dead {}",
                model.d(),
                model.q(),
                model.k,
                tokens.nrows(),
                last.step,
                last.l_recon,
                last.n_dead
            );
        }
        Ok(())
    }
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn loss_csv(log: &[LossRecord]) -> anyhow::Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["step", "l_recon", "l_aux", "l_total", "n_dead", "n_active"])?;
    for r in log {
        w.write_record([
            r.step.to_string(),
            r.l_recon.to_string(),
            r.l_aux.to_string(),
            r.l_total.to_string(),
            r.n_dead.to_string(),
            r.n_active.to_string(),
        ])?;
    }
    Ok(w.into_inner()?)
}

/// Reconstruction metrics over all tokens and over outlier tokens.
#[derive(Debug, Args)]
pub struct EvalSae {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Outlier norm threshold.
    #[arg(long)]
    pub tau: Option<f64>,
}

impl EvalSae {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.tau.is_some() {
            cfg.cds.tau = self.tau;
        }
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("eval-sae", cfg);
        let model = load_model(&mut run, &self.checkpoint)?;
        let set = load_embeddings(&mut run, "embeddings", &self.embeddings)?;
        check_dims(&model, &set, "embeddings")?;
        let mask = compute_outlier_mask(&set, cfg.cds.tau())?;
        let report = evaluate(&model, &set, Some(&mask))?;

        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["subset", "fvu", "l0_mean", "cosine_mean", "n_tokens"])?;
        let mut row = |name: &str, m: &SubsetMetrics| {
            println!(
                "{name}: fvu {:.4} l0 {:.2} cosine {:.4} over {} tokens",
                m.fvu, m.l0_mean, m.cosine_mean, m.n_tokens
            );
            w.write_record([
                name.to_string(),
                m.fvu.to_string(),
                m.l0_mean.to_string(),
                m.cosine_mean.to_string(),
                m.n_tokens.to_string(),
            ])
        };
        if let Some(m) = &report.all {
            row("all", m)?;
        }
        if let Some(m) = &report.outlier {
            row("outlier", m)?;
        }
        run.output("eval", &self.out, &w.into_inner()?)?;
        run.commit()
    }
}
