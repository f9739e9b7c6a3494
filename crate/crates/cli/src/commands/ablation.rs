use std::path::PathBuf;

use cdscope::partition::{
    ablate, activation_by_token_type, baseline, histogram, norm_map, partition, write_activation_csv,
    write_histogram_csv, write_norm_map_csv, Group, Partition,
};
use cdscope::store::{compute_outlier_mask, write_embedding_set};
use clap::{Args, ValueEnum};

use super::{check_dims, load_cds, load_embeddings, load_model, load_partition, render};
use crate::config::{invalid, Preset, RunConfig};
use crate::manifest::Run;

/// Split features into low- and high-CDS groups at a threshold.
#[derive(Debug, Args)]
pub struct PartitionCmd {
    #[arg(long)]
    pub cds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Threshold; features with CDS at or below it are low.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Take the threshold from a published model setting.
    #[arg(long, value_enum)]
    pub model: Option<Preset>,
    /// CDS histogram.
    #[arg(long)]
    pub hist_out: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
}

impl PartitionCmd {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if let Some(m) = self.model {
            cfg.cds.model = Some(m);
            cfg.cds.gamma = None;
        }
        if self.gamma.is_some() {
            cfg.cds.gamma = self.gamma;
        }
        cfg.cds.hist_bins = self.bins.unwrap_or(cfg.cds.hist_bins);
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("partition", cfg);
        let values: Vec<Option<f64>> = load_cds(&mut run, &self.cds)?.iter().map(|e| e.cds).collect();
        let part = partition(&values, cfg.cds.gamma())?;
        run.note("low", part.low.len());
        run.note("high", part.high.len());
        run.note("excluded", part.excluded.len());
        run.output("partition", &self.out, part.to_text().as_bytes())?;
        if let Some(path) = &self.hist_out {
            let hist = histogram(&values, cfg.cds.hist_bins)?;
            run.output("histogram", path, &render(|b| write_histogram_csv(&hist, b))?)?;
        }
        run.commit()?;
        println!(
            "gamma {}: {} low, {} high, {} excluded",
            part.gamma,
            part.low.len(),
            part.high.len(),
            part.excluded.len()
        );
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Removal {
    None,
    Low,
    High,
}

/// Subtract one feature group's reconstruction from every token.
#[derive(Debug, Args)]
pub struct Ablate {
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long, value_enum)]
    pub remove: Removal,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub partition: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Keep raw residuals instead of L2-normalizing each token.
    #[arg(long)]
    pub no_normalize: bool,
    /// Image whose per-patch norm grid is written to --norm-map-out.
    #[arg(long, requires = "norm_map_out")]
    pub norm_map_id: Option<String>,
    #[arg(long, requires = "norm_map_id")]
    pub norm_map_out: Option<PathBuf>,
}

impl Ablate {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.no_normalize {
            cfg.ablate.normalize = false;
        }
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("ablate", cfg);
        let set = load_embeddings(&mut run, "embeddings", &self.embeddings)?;
        let normalize = cfg.ablate.normalize;
        let result = match self.remove {
            Removal::None => baseline(&set, normalize)?,
            which => {
                let (Some(ckpt), Some(ppath)) = (&self.checkpoint, &self.partition) else {
                    return Err(invalid("--remove low|high needs --checkpoint and --partition"));
                };
                let model = load_model(&mut run, ckpt)?;
                check_dims(&model, &set, "embeddings")?;
                let part = load_partition(&mut run, ppath)?;
                let group = if which == Removal::Low { Group::Low } else { Group::High };
                ablate(&model, &set, &part, group, normalize)?
            }
        };
        run.note("removal", result.removal.as_str());
        run.note("normalized", result.normalized);
        run.note("zero_tokens", result.zero_tokens.len());
        run.output("embeddings", &self.out, &write_embedding_set(&result.set)?)?;
        if let (Some(id), Some(path)) = (&self.norm_map_id, &self.norm_map_out) {
            let grid = norm_map(&result.set, id)?;
            run.output("norm_map", path, &render(|b| write_norm_map_csv(&grid, b))?)?;
        }
        run.commit()?;
        println!(
            "{} over {} images ({} zero tokens)",
            result.removal.as_str(),
            result.set.n_images(),
            result.zero_tokens.len()
        );
        Ok(())
    }
}

/// Histogram of a CDS table, checked against its partition, plus the optional
/// activation table by feature group and token type.
#[derive(Debug, Args)]
pub struct Report {
    #[arg(long)]
    pub cds: PathBuf,
    #[arg(long)]
    pub partition: PathBuf,
    /// Histogram CSV.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long, requires_all = ["embeddings", "activation_out"])]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub embeddings: Option<PathBuf>,
    /// Mean activation of each group on outlier and non-outlier tokens.
    #[arg(long, requires = "checkpoint")]
    pub activation_out: Option<PathBuf>,
    #[arg(long)]
    pub tau: Option<f64>,
}

impl Report {
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.cds.hist_bins = self.bins.unwrap_or(cfg.cds.hist_bins);
        if self.tau.is_some() {
            cfg.cds.tau = self.tau;
        }
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("report", cfg);
        let values: Vec<Option<f64>> = load_cds(&mut run, &self.cds)?.iter().map(|e| e.cds).collect();
        let part = load_partition(&mut run, &self.partition)?;
        check_consistent(&values, &part)?;
        let hist = histogram(&values, cfg.cds.hist_bins)?;
        let scored = part.low.len() + part.high.len();
        debug_assert_eq!(hist.counts.iter().sum::<usize>(), scored);
        run.note("scored", scored);
        run.note("gamma", part.gamma);
        run.output("histogram", &self.out, &render(|b| write_histogram_csv(&hist, b))?)?;

        if let (Some(ckpt), Some(emb), Some(path)) = (&self.checkpoint, &self.embeddings, &self.activation_out) {
            let model = load_model(&mut run, ckpt)?;
            let set = load_embeddings(&mut run, "embeddings", emb)?;
            check_dims(&model, &set, "embeddings")?;
            let mask = compute_outlier_mask(&set, cfg.cds.tau())?;
            let table = activation_by_token_type(&model, &set, &mask, &part)?;
            run.note("outlier_tokens", mask.count());
            run.note("std_population", "per-image means");
            run.output("activation", path, &render(|b| write_activation_csv(&table, b))?)?;
        }
        run.commit()?;
        println!(
            "{scored} scored features ({} low, {} high, {} excluded) in {} bins",
            part.low.len(),
            part.high.len(),
            part.excluded.len(),
            hist.counts.len()
        );
        Ok(())
    }
}

/// The partition must be the one its CDS table yields at the recorded threshold.
fn check_consistent(values: &[Option<f64>], part: &Partition) -> anyhow::Result<()> {
    if part.q != values.len() {
        return Err(invalid(format!(
            "partition covers {} features, cds table has {}",
            part.q,
            values.len()
        )));
    }
    if partition(values, part.gamma)? != *part {
        return Err(invalid(format!(
            "partition does not match the cds table at gamma={}",
            part.gamma
        )));
    }
    Ok(())
}
