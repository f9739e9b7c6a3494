//! Contextual Dependency Score.
//!
//! For feature `j` and each of its `k_cds` representative images, the feature's
//! activation over the shared `(p−s)²` patches is read from both SCC crops,
//! each map is normalised to a distribution, and the EMD between them is
//! taken with Euclidean ground cost on the patch grid:
//!
//! ```text
//! CDS_j = 1 / (k_cds · D_grid) · Σ_m EMD(N(M_j,1^(m)), N(M_j,2^(m))),   D_grid = (p−s)·√2
//! ```
//!
//! Pairs where the feature is silent on both crops are skipped and counted.
//! A pair silent on one crop only is charged the largest EMD the grid allows.

mod awcds;
mod instability;

pub use awcds::{compute_awcds, write_awcds_csv, write_token_awcds_csv, AwCdsBin, AwCdsProfile, TokenAwCds};
pub use instability::{
    attention_instability, shift_sweep, write_instability_csv, Component, ImageInstability, InstabilityReport,
    ShiftSweepRow,
};

use std::collections::HashMap;
use std::fmt;
use std::io;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::emd::{emd, grid_diameter, normalize_slice};
use crate::error::{Error, Result};
use crate::sae::{encode_batch, SaeModel, SparseCode};
use crate::scc::{Crop, OverlapMap};
use crate::store::{check_ids_match, CropRole, EmbeddingSet};

/// Per-feature representative images, strongest activation first.
#[derive(Debug, Clone, PartialEq)]
pub struct Representatives {
    pub k_cds: usize,
    /// Image ids per feature; shorter than `k_cds` when fewer images activate the feature.
    pub image_ids: Vec<Vec<String>>,
    /// Maximum activation over the image's tokens, parallel to `image_ids`.
    pub max_activation: Vec<Vec<f64>>,
}

impl Representatives {
    pub fn q(&self) -> usize {
        self.image_ids.len()
    }

    pub fn is_inactive(&self, j: usize) -> bool {
        self.image_ids[j].is_empty()
    }

    pub fn is_insufficient(&self, j: usize) -> bool {
        !self.image_ids[j].is_empty() && self.image_ids[j].len() < self.k_cds
    }
}

/// Per-image maximum activation of every feature that fires, features ascending.
fn image_maxima(code: &SparseCode) -> Vec<(usize, f64)> {
    let mut best: Vec<(usize, f64)> = code.iter().map(|(_, j, a)| (j, a)).collect();
    best.sort_by(|x, y| x.0.cmp(&y.0).then(y.1.total_cmp(&x.1)));
    best.dedup_by_key(|(j, _)| *j);
    best
}

/// Picks, for every feature, the `k_cds` pool images with the largest maximum
/// token activation. Equal scores go to the lower image index.
pub fn select_representatives(sae: &SaeModel, pool: &EmbeddingSet, k_cds: usize) -> Result<Representatives> {
    if pool.n_images() == 0 {
        return Err(Error::InvalidArgument("representative pool is empty".into()));
    }
    if k_cds == 0 || k_cds > pool.n_images() {
        return Err(Error::InvalidArgument(format!(
            "k_cds must be in [1, {}], got {k_cds}",
            pool.n_images()
        )));
    }
    if pool.dim() != sae.d() {
        return Err(Error::Shape(format!("pool has d = {}, model {}", pool.dim(), sae.d())));
    }
    let maxima: Vec<Vec<(usize, f64)>> = (0..pool.n_images())
        .into_par_iter()
        .map(|m| encode_batch(sae, pool.image(m)).map(|code| image_maxima(&code)))
        .collect::<Result<_>>()?;
    let mut per_feature: Vec<Vec<(f64, usize)>> = vec![Vec::new(); sae.q()];
    for (m, image) in maxima.iter().enumerate() {
        for &(j, a) in image {
            per_feature[j].push((a, m));
        }
    }
    let mut image_ids = Vec::with_capacity(sae.q());
    let mut max_activation = Vec::with_capacity(sae.q());
    for mut list in per_feature {
        list.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        list.truncate(k_cds);
        image_ids.push(list.iter().map(|&(_, m)| pool.image_ids()[m].clone()).collect());
        max_activation.push(list.iter().map(|&(a, _)| a).collect());
    }
    Ok(Representatives {
        k_cds,
        image_ids,
        max_activation,
    })
}

/// Conditions attached to a CDS row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct CdsFlags {
    /// The feature never fired on the representative pool.
    pub inactive: bool,
    /// Fewer than `k_cds` pool images activate the feature.
    pub insufficient: bool,
    /// Every representative pair was silent on both crops.
    pub all_degenerate: bool,
}

impl CdsFlags {
    const NAMES: [&'static str; 3] = ["inactive", "insufficient", "all_degenerate"];

    fn bits(&self) -> [bool; 3] {
        [self.inactive, self.insufficient, self.all_degenerate]
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut flags = CdsFlags::default();
        for name in text.split(';').filter(|t| !t.is_empty()) {
            match name {
                "inactive" => flags.inactive = true,
                "insufficient" => flags.insufficient = true,
                "all_degenerate" => flags.all_degenerate = true,
                other => return Err(Error::Parse(format!("unknown CDS flag {other:?}"))),
            }
        }
        Ok(flags)
    }
}

impl fmt::Display for CdsFlags {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let names: Vec<&str> = Self::NAMES
            .iter()
            .zip(self.bits())
            .filter(|(_, on)| *on)
            .map(|(n, _)| *n)
            .collect();
        f.write_str(&names.join(";"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdsEntry {
    pub cds: Option<f64>,
    pub n_pairs_used: usize,
    pub skipped_pairs: usize,
    pub flags: CdsFlags,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CdsTable {
    pub entries: Vec<CdsEntry>,
    pub k_cds: usize,
    pub grid_p: usize,
    pub shift_s: usize,
    /// `(p−s)·√2`
    pub d_grid: f64,
    pub rep_images: Vec<Vec<String>>,
}

impl CdsTable {
    pub fn q(&self) -> usize {
        self.entries.len()
    }

    pub fn values(&self) -> Vec<Option<f64>> {
        self.entries.iter().map(|e| e.cds).collect()
    }

    /// Largest value any CDS can take on this geometry: `(p−s−1)/(p−s)`.
    pub fn upper_bound(&self) -> f64 {
        let side = (self.grid_p - self.shift_s) as f64;
        (side - 1.0) / side
    }
}

fn check_crop_pair(crop1: &EmbeddingSet, crop2: &EmbeddingSet, map: &OverlapMap) -> Result<()> {
    check_ids_match(crop1.image_ids(), crop2.image_ids())?;
    for (set, role) in [(crop1, CropRole::SccCrop1), (crop2, CropRole::SccCrop2)] {
        let g = set.geometry();
        if g.crop_role != role {
            return Err(Error::InvalidArgument(format!(
                "expected a {} embedding set, got {}",
                role.as_str(),
                g.crop_role.as_str()
            )));
        }
        if g.grid_p != map.grid_p || g.shift_s != map.shift_s {
            return Err(Error::Shape(format!(
                "{} set has p = {}, s = {}; overlap map has p = {}, s = {}",
                role.as_str(),
                g.grid_p,
                g.shift_s,
                map.grid_p,
                map.shift_s
            )));
        }
    }
    Ok(())
}

/// Codes of the overlap tokens of one image, one crop per batch.
struct OverlapCodes {
    first: SparseCode,
    second: SparseCode,
}

fn encode_overlap(sae: &SaeModel, set: &EmbeddingSet, m: usize, cells: &[usize]) -> Result<SparseCode> {
    let image = set.image(m);
    encode_batch(sae, image.select(ndarray::Axis(0), cells).view())
}

fn feature_map(code: &SparseCode, j: usize) -> impl Iterator<Item = f64> + '_ {
    (0..code.n_samples()).map(move |c| code.activation(c, j))
}

/// Computes CDS for every feature from independently encoded SCC crop pairs.
pub fn compute_cds(
    sae: &SaeModel,
    crop1: &EmbeddingSet,
    crop2: &EmbeddingSet,
    map: &OverlapMap,
    reps: &Representatives,
) -> Result<CdsTable> {
    check_crop_pair(crop1, crop2, map)?;
    if crop1.dim() != sae.d() {
        return Err(Error::Shape(format!(
            "crops have d = {}, model {}",
            crop1.dim(),
            sae.d()
        )));
    }
    if reps.q() != sae.q() {
        return Err(Error::Shape(format!(
            "representatives cover {} features, model has {}",
            reps.q(),
            sae.q()
        )));
    }
    let mut needed: Vec<usize> = Vec::new();
    for id in reps.image_ids.iter().flatten() {
        needed.push(crop1.index_of(id).ok_or_else(|| Error::UnknownId(id.clone()))?);
    }
    needed.sort_unstable();
    needed.dedup();

    let first_cells = map.token_indices(Crop::First);
    let second_cells = map.token_indices(Crop::Second);
    let codes: HashMap<usize, OverlapCodes> = needed
        .par_iter()
        .map(|&m| {
            Ok((
                m,
                OverlapCodes {
                    first: encode_overlap(sae, crop1, m, &first_cells)?,
                    second: encode_overlap(sae, crop2, m, &second_cells)?,
                },
            ))
        })
        .collect::<Result<_>>()?;

    let side = map.side;
    let d_grid = side as f64 * std::f64::consts::SQRT_2;
    let one_sided = grid_diameter(side);
    let entries: Vec<CdsEntry> = (0..sae.q())
        .into_par_iter()
        .map(|j| {
            let mut sum = 0.0;
            let mut used = 0;
            let mut skipped = 0;
            for id in &reps.image_ids[j] {
                let pair = &codes[&crop1.index_of(id).expect("checked above")];
                let a = normalize_slice(side, feature_map(&pair.first, j))?;
                let b = normalize_slice(side, feature_map(&pair.second, j))?;
                match (a, b) {
                    (None, None) => skipped += 1,
                    (Some(a), Some(b)) => {
                        sum += emd(&a, &b)?;
                        used += 1;
                    }
                    _ => {
                        sum += one_sided;
                        used += 1;
                    }
                }
            }
            let flags = CdsFlags {
                inactive: reps.is_inactive(j),
                insufficient: reps.is_insufficient(j),
                all_degenerate: used == 0 && skipped > 0,
            };
            Ok(CdsEntry {
                cds: (used > 0).then(|| sum / (used as f64 * d_grid)),
                n_pairs_used: used,
                skipped_pairs: skipped,
                flags,
            })
        })
        .collect::<Result<_>>()?;

    Ok(CdsTable {
        entries,
        k_cds: reps.k_cds,
        grid_p: map.grid_p,
        shift_s: map.shift_s,
        d_grid,
        rep_images: reps.image_ids.clone(),
    })
}

#[derive(Serialize, Deserialize)]
struct CdsRow {
    feature_index: usize,
    cds: Option<f64>,
    n_pairs_used: usize,
    skipped_pairs: usize,
    flags: String,
}

pub fn write_cds_csv<W: io::Write>(table: &CdsTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (j, e) in table.entries.iter().enumerate() {
        w.serialize(CdsRow {
            feature_index: j,
            cds: e.cds,
            n_pairs_used: e.n_pairs_used,
            skipped_pairs: e.skipped_pairs,
            flags: e.flags.to_string(),
        })?;
    }
    w.flush()?;
    Ok(())
}

/// Reads the per-feature rows of a CDS CSV. Rows must cover `0..q` in order.
pub fn read_cds_csv<R: io::Read>(input: R) -> Result<Vec<CdsEntry>> {
    let mut r = csv::Reader::from_reader(input);
    let mut entries = Vec::new();
    for (line, row) in r.deserialize::<CdsRow>().enumerate() {
        let row = row?;
        if row.feature_index != line {
            return Err(Error::Parse(format!(
                "CDS row {line} has feature_index {}",
                row.feature_index
            )));
        }
        if let Some(v) = row.cds {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Parse(format!("feature {line}: invalid CDS {v}")));
            }
        }
        entries.push(CdsEntry {
            cds: row.cds,
            n_pairs_used: row.n_pairs_used,
            skipped_pairs: row.skipped_pairs,
            flags: CdsFlags::parse(&row.flags)?,
        });
    }
    Ok(entries)
}

pub fn load_cds_csv(path: &Path) -> Result<Vec<CdsEntry>> {
    read_cds_csv(std::fs::File::open(path)?)
}

#[derive(Serialize)]
struct RepRow<'a> {
    feature_index: usize,
    rank: usize,
    image_id: &'a str,
    max_activation: f64,
}

/// One row per (feature, rank) with the representative image and its score.
pub fn write_representatives_csv<W: io::Write>(reps: &Representatives, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (j, (ids, acts)) in reps.image_ids.iter().zip(&reps.max_activation).enumerate() {
        for (rank, (id, a)) in ids.iter().zip(acts).enumerate() {
            w.serialize(RepRow {
                feature_index: j,
                rank,
                image_id: id,
                max_activation: *a,
            })?;
        }
    }
    w.flush()?;
    Ok(())
}
