use std::path::PathBuf;

use cdscope::cds::{
    attention_instability, compute_awcds, compute_cds, select_representatives, write_awcds_csv, write_cds_csv,
    write_instability_csv, write_representatives_csv, write_token_awcds_csv, Component,
};
use cdscope::scc::{make_crop_plan, OverlapMap};
use cdscope::store::{check_ids_match, compute_outlier_mask};
use clap::Args;

use super::{check_dims, load_attention, load_cds, load_embeddings, load_model, render};
use crate::config::{invalid, RunConfig};
use crate::manifest::Run;

/// Write the crop plan record consumed by the exporter.
#[derive(Debug, Args)]
pub struct SccPlan {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub grid_p: Option<usize>,
    #[arg(long)]
    pub patch_n: Option<usize>,
    #[arg(long)]
    pub shift: Option<usize>,
}

impl SccPlan {
    pub fn apply(&self, cfg: &mut RunConfig) {
        let s = &mut cfg.scc;
        s.grid_p = self.grid_p.unwrap_or(s.grid_p);
        s.patch_n = self.patch_n.unwrap_or(s.patch_n);
        s.shift = self.shift.unwrap_or(s.shift);
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let s = &cfg.scc;
        let plan = make_crop_plan(s.grid_p, s.patch_n, s.shift)?;
        let mut run = Run::new("scc-plan", cfg);
        run.output("plan", &self.out, plan.to_record().as_bytes())?;
        run.commit()?;
        println!(
            "expanded {}px, crops {}px at {:?} and {:?}, overlap {}x{}",
            plan.expanded_side_px,
            plan.crop_side_px,
            plan.crop1_origin,
            plan.crop2_origin,
            plan.overlap_side(),
            plan.overlap_side()
        );
        Ok(())
    }
}

/// Context dependency score of every SAE feature from an SCC crop pair.
#[derive(Debug, Args)]
pub struct Cds {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub crop1: PathBuf,
    #[arg(long)]
    pub crop2: PathBuf,
    /// Images to pick representatives from; defaults to the first crop.
    #[arg(long)]
    pub pool: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-feature representative images.
    #[arg(long)]
    pub reps_out: Option<PathBuf>,
    #[arg(long)]
    pub k_cds: Option<usize>,
}

impl Cds {
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.cds.k_cds = self.k_cds.unwrap_or(cfg.cds.k_cds);
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("cds", cfg);
        let model = load_model(&mut run, &self.checkpoint)?;
        let crop1 = load_embeddings(&mut run, "crop1", &self.crop1)?;
        let crop2 = load_embeddings(&mut run, "crop2", &self.crop2)?;
        check_ids_match(crop1.image_ids(), crop2.image_ids())?;
        check_dims(&model, &crop1, "crop1")?;
        check_dims(&model, &crop2, "crop2")?;
        let pool = match &self.pool {
            Some(path) => load_embeddings(&mut run, "pool", path)?,
            None => crop1.clone(),
        };
        check_dims(&model, &pool, "pool")?;
        if cfg.cds.k_cds > pool.n_images() {
            return Err(invalid(format!(
                "cds.k_cds: {} exceeds the {} images in the pool",
                cfg.cds.k_cds,
                pool.n_images()
            )));
        }
        let g = crop1.geometry();
        let map = OverlapMap::for_geometry(g.grid_p, g.shift_s)?;
        let reps = select_representatives(&model, &pool, cfg.cds.k_cds)?;
        let table = compute_cds(&model, &crop1, &crop2, &map, &reps)?;

        let scored = table.entries.iter().filter(|e| e.cds.is_some()).count();
        let flagged = table.entries.iter().filter(|e| e.flags.insufficient).count();
        run.note("q", table.q());
        run.note("scored", scored);
        run.note("insufficient", flagged);
        run.note("d_grid", table.d_grid);
        run.output("cds", &self.out, &render(|b| write_cds_csv(&table, b))?)?;
        if let Some(path) = &self.reps_out {
            run.output(
                "representatives",
                path,
                &render(|b| write_representatives_csv(&reps, b))?,
            )?;
        }
        run.commit()?;
        println!(
            "{scored} of {} features scored ({flagged} with fewer than {} activating images), p={} s={}",
            table.q(),
            table.k_cds,
            table.grid_p,
            table.shift_s
        );
        Ok(())
    }
}

/// Attention-map instability of outlier and non-outlier tokens across a crop pair.
#[derive(Debug, Args)]
pub struct Instability {
    #[arg(long)]
    pub att1: PathBuf,
    #[arg(long)]
    pub att2: PathBuf,
    /// Token embeddings of the first crop, for its outlier mask.
    #[arg(long)]
    pub crop1: PathBuf,
    #[arg(long)]
    pub crop2: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub tau: Option<f64>,
    /// Also report the mean over these heads (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub heads: Vec<usize>,
}

impl Instability {
    pub fn apply(&self, cfg: &mut RunConfig) {
        if self.tau.is_some() {
            cfg.cds.tau = self.tau;
        }
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("instability", cfg);
        let att1 = load_attention(&mut run, "att1", &self.att1)?;
        let att2 = load_attention(&mut run, "att2", &self.att2)?;
        let crop1 = load_embeddings(&mut run, "crop1", &self.crop1)?;
        let crop2 = load_embeddings(&mut run, "crop2", &self.crop2)?;
        check_ids_match(att1.image_ids(), crop1.image_ids())?;
        check_ids_match(att2.image_ids(), crop2.image_ids())?;
        if let Some(&h) = self.heads.iter().find(|&&h| h >= att1.heads()) {
            return Err(invalid(format!(
                "--heads: head {h} out of range, file has {}",
                att1.heads()
            )));
        }
        let tau = cfg.cds.tau();
        let mask1 = compute_outlier_mask(&crop1, tau)?;
        let mask2 = compute_outlier_mask(&crop2, tau)?;
        let g = att1.geometry();
        let map = OverlapMap::for_geometry(g.grid_p, g.shift_s)?;
        let report = attention_instability(&att1, &att2, &mask1, &mask2, &map)?;

        run.note("outliers_crop1", mask1.count());
        run.note("outliers_crop2", mask2.count());
        run.note("std_population", "per-image scores");
        if !self.heads.is_empty() {
            let non = report.heads_mean(Component::NonOutlier, &self.heads);
            let out = report.heads_mean(Component::Outlier, &self.heads);
            run.note("selected_heads", self.heads.clone());
            run.note("selected_non", finite_or_null(non));
            run.note("selected_out", finite_or_null(out));
            println!("heads {:?}: D_non {non:.4} D_out {out:.4}", self.heads);
        }
        run.output(
            "instability",
            &self.out,
            &render(|b| write_instability_csv(&report, b))?,
        )?;
        run.commit()?;
        println!(
            "all heads: D_non {:.4} D_out {:.4} (skipped {} / {})",
            report.d_non_mean, report.d_out_mean, report.skipped_non, report.skipped_out
        );
        Ok(())
    }
}

fn finite_or_null(v: f64) -> serde_json::Value {
    serde_json::Number::from_f64(v).map_or(serde_json::Value::Null, serde_json::Value::Number)
}

/// Activation-weighted CDS of every token, binned by token-norm percentile.
#[derive(Debug, Args)]
pub struct AwCds {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub embeddings: PathBuf,
    #[arg(long)]
    pub cds: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Per-token values.
    #[arg(long)]
    pub tokens_out: Option<PathBuf>,
    #[arg(long)]
    pub bins: Option<usize>,
}

impl AwCds {
    pub fn apply(&self, cfg: &mut RunConfig) {
        cfg.cds.awcds_bins = self.bins.unwrap_or(cfg.cds.awcds_bins);
    }

    pub fn run(&self, cfg: &RunConfig) -> anyhow::Result<()> {
        let mut run = Run::new("awcds", cfg);
        let model = load_model(&mut run, &self.checkpoint)?;
        let set = load_embeddings(&mut run, "embeddings", &self.embeddings)?;
        check_dims(&model, &set, "embeddings")?;
        let values: Vec<Option<f64>> = load_cds(&mut run, &self.cds)?.iter().map(|e| e.cds).collect();
        if values.len() != model.q() {
            return Err(invalid(format!(
                "cds: table has {} features, checkpoint has {}",
                values.len(),
                model.q()
            )));
        }
        let profile = compute_awcds(&model, &set, &values, cfg.cds.awcds_bins, self.tokens_out.is_some())?;
        run.output("awcds", &self.out, &render(|b| write_awcds_csv(&profile, b))?)?;
        if let Some(path) = &self.tokens_out {
            run.output(
                "token_awcds",
                path,
                &render(|b| write_token_awcds_csv(&profile, &set, b))?,
            )?;
        }
        run.commit()?;
        for bin in &profile.bins {
            println!(
                "{:>5.1}-{:<5.1}% norms {:.3}-{:.3}: {}",
                bin.pct_lo,
                bin.pct_hi,
                bin.norm_lo,
                bin.norm_hi,
                bin.mean_awcds.map_or("-".to_string(), |v| format!("{v:.4}"))
            );
        }
        Ok(())
    }
}
