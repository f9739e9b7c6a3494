use std::path::PathBuf;

use cdscope::probe::{read_labels_csv, train_probe, write_probe_csv, LabeledPool};
use clap::Args;

use super::{load_embeddings, render};
use crate::config::RunConfig;
use crate::manifest::Run;

/// Linear probe on mean-pooled tokens, with a seeded hyperparameter search.
#[derive(Debug, Args)]
pub struct Probe {
    #[arg(long)]
    pub embeddings: PathBuf,
    /// CSV with columns image_id,label,split.
    #[arg(long)]
    pub labels: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub trials: Option<usize>,
    #[arg(long)]
    pub batch: Option<usize>,
}

impl Probe {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let p = &mut cfg.probe;
        p.epochs = self.epochs.unwrap_or(p.epochs);
        p.trials = self.trials.unwrap_or(p.trials);
        p.batch = self.batch.unwrap_or(p.batch);
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("probe", cfg);
        let set = load_embeddings(&mut run, "embeddings", &self.embeddings)?;
        let rows = read_labels_csv(&run.input("labels", &self.labels)?[..])?;
        let data = LabeledPool::from_labels(&set, &rows)?;
        let result = train_probe(&data, &cfg.probe.probe_config(cfg.seed))?;
        run.note("images", data.labels.len());
        run.note("classes", data.n_classes);
        run.note("best_trial", result.best_trial);
        run.note("best_val_top1", result.best_val_top1);
        run.output("probe", &self.out, &render(|b| write_probe_csv(&result, b))?)?;
        run.commit()?;
        println!(
            "val top-1 {:.4} (trial {} of {})",
            result.best_val_top1,
            result.best_trial,
            result.trials.len()
        );
        Ok(())
    }
}
