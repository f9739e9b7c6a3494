//! Attention-map instability of outlier and non-outlier tokens under SCC.
//!
//! Per image and head, the CLS-to-patch attention of each crop is restricted to
//! the shared patches and split with that crop's own outlier mask into a
//! non-outlier part `A ⊙ (1 − S)` and an outlier part `A ⊙ S`. Each part is
//! normalised and compared across crops with EMD. Head scores are averaged
//! over images, then over heads.

use std::io;

use serde::Serialize;

use crate::emd::{emd, normalize_slice};
use crate::error::{Error, Result};
use crate::scc::{Crop, OverlapMap};
use crate::store::{check_ids_match, AttentionSet, OutlierMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    NonOutlier,
    Outlier,
}

impl Component {
    pub fn as_str(self) -> &'static str {
        match self {
            Component::NonOutlier => "non",
            Component::Outlier => "out",
        }
    }
}

/// EMD per head for one image; `None` where a component was empty in either crop.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageInstability {
    pub image_id: String,
    pub non: Vec<Option<f64>>,
    pub out: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityReport {
    pub shift_s: usize,
    /// Mean over images with a valid pair, per head. `NaN` for a head with none.
    pub d_non_per_head: Vec<f64>,
    pub d_out_per_head: Vec<f64>,
    /// Mean of the per-head means over heads that have at least one valid image.
    pub d_non_mean: f64,
    pub d_out_mean: f64,
    /// Skipped (head, image) pairs per component.
    pub skipped_non: usize,
    pub skipped_out: usize,
    pub per_image: Vec<ImageInstability>,
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        f64::NAN
    } else {
        sum / n as f64
    }
}

fn population_std(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mu = mean(values.iter().copied());
    (values.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / values.len() as f64).sqrt()
}

impl InstabilityReport {
    fn scores(&self, c: Component) -> impl Iterator<Item = &Vec<Option<f64>>> {
        self.per_image.iter().map(move |img| match c {
            Component::NonOutlier => &img.non,
            Component::Outlier => &img.out,
        })
    }

    /// Mean over the given heads of their per-head means (e.g. a single semantic head).
    pub fn heads_mean(&self, c: Component, heads: &[usize]) -> f64 {
        let per_head = match c {
            Component::NonOutlier => &self.d_non_per_head,
            Component::Outlier => &self.d_out_per_head,
        };
        mean(heads.iter().map(|&h| per_head[h]).filter(|v| !v.is_nan()))
    }

    /// Spread across images of each image's mean over `heads`; images with no valid head are left out.
    pub fn image_std(&self, c: Component, heads: &[usize]) -> f64 {
        let per_image: Vec<f64> = self
            .scores(c)
            .map(|s| mean(heads.iter().filter_map(|&h| s[h])))
            .filter(|v| !v.is_nan())
            .collect();
        population_std(&per_image)
    }

    /// Valid images per head for a component.
    pub fn valid_images(&self, c: Component, h: usize) -> usize {
        self.scores(c).filter(|s| s[h].is_some()).count()
    }

    pub fn heads(&self) -> usize {
        self.d_non_per_head.len()
    }
}

fn component_emd(
    side: usize,
    a1: &[f64],
    s1: &[bool],
    a2: &[f64],
    s2: &[bool],
    keep_outliers: bool,
) -> Result<Option<f64>> {
    let part = |a: &[f64], s: &[bool]| {
        let values: Vec<f64> = a
            .iter()
            .zip(s)
            .map(|(v, o)| if *o == keep_outliers { *v } else { 0.0 })
            .collect();
        normalize_slice(side, values.into_iter())
    };
    match (part(a1, s1)?, part(a2, s2)?) {
        (Some(x), Some(y)) => Ok(Some(emd(&x, &y)?)),
        _ => Ok(None),
    }
}

/// Instability of non-outlier and outlier attention across an SCC crop pair.
/// `mask1` and `mask2` come from each crop's own input tokens.
pub fn attention_instability(
    att1: &AttentionSet,
    att2: &AttentionSet,
    mask1: &OutlierMask,
    mask2: &OutlierMask,
    map: &OverlapMap,
) -> Result<InstabilityReport> {
    check_ids_match(att1.image_ids(), att2.image_ids())?;
    if att1.heads() != att2.heads() {
        return Err(Error::Shape(format!("{} heads vs {}", att1.heads(), att2.heads())));
    }
    for att in [att1, att2] {
        let g = att.geometry();
        if g.grid_p != map.grid_p || g.shift_s != map.shift_s {
            return Err(Error::Shape(format!(
                "attention set has p = {}, s = {}; overlap map has p = {}, s = {}",
                g.grid_p, g.shift_s, map.grid_p, map.shift_s
            )));
        }
    }
    let n = att1.n_images();
    let big_n = map.grid_p * map.grid_p;
    for mask in [mask1, mask2] {
        if mask.mask.dim() != (n, big_n) {
            return Err(Error::Shape(format!(
                "outlier mask is {:?}, expected ({n}, {big_n})",
                mask.mask.dim()
            )));
        }
    }
    let heads = att1.heads();
    let first = map.token_indices(Crop::First);
    let second = map.token_indices(Crop::Second);
    let gather_f = |v: ndarray::ArrayView1<'_, f64>, idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<f64>>();
    let gather_b = |v: ndarray::ArrayView1<'_, bool>, idx: &[usize]| idx.iter().map(|&i| v[i]).collect::<Vec<bool>>();

    let mut per_image = Vec::with_capacity(n);
    let (mut skipped_non, mut skipped_out) = (0, 0);
    for m in 0..n {
        let s1 = gather_b(mask1.image(m), &first);
        let s2 = gather_b(mask2.image(m), &second);
        let mut non = Vec::with_capacity(heads);
        let mut out = Vec::with_capacity(heads);
        for h in 0..heads {
            let a1 = gather_f(att1.head(m, h), &first);
            let a2 = gather_f(att2.head(m, h), &second);
            let d_non = component_emd(map.side, &a1, &s1, &a2, &s2, false)?;
            let d_out = component_emd(map.side, &a1, &s1, &a2, &s2, true)?;
            skipped_non += usize::from(d_non.is_none());
            skipped_out += usize::from(d_out.is_none());
            non.push(d_non);
            out.push(d_out);
        }
        per_image.push(ImageInstability {
            image_id: att1.image_ids()[m].clone(),
            non,
            out,
        });
    }

    let head_means = |pick: fn(&ImageInstability) -> &Vec<Option<f64>>| -> Vec<f64> {
        (0..heads)
            .map(|h| mean(per_image.iter().filter_map(|img| pick(img)[h])))
            .collect()
    };
    let d_non_per_head = head_means(|img| &img.non);
    let d_out_per_head = head_means(|img| &img.out);
    Ok(InstabilityReport {
        shift_s: map.shift_s,
        d_non_mean: mean(d_non_per_head.iter().copied().filter(|v| !v.is_nan())),
        d_out_mean: mean(d_out_per_head.iter().copied().filter(|v| !v.is_nan())),
        d_non_per_head,
        d_out_per_head,
        skipped_non,
        skipped_out,
        per_image,
    })
}

/// One row of a shift-factor sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct ShiftSweepRow {
    pub shift_s: usize,
    pub d_non_mean: f64,
    pub d_out_mean: f64,
    pub skipped_non: usize,
    pub skipped_out: usize,
}

/// Instability summaries for crop pairs exported at several shift factors.
pub fn shift_sweep<'a>(
    runs: impl IntoIterator<Item = (&'a AttentionSet, &'a AttentionSet, &'a OutlierMask, &'a OutlierMask)>,
) -> Result<Vec<ShiftSweepRow>> {
    let mut rows = Vec::new();
    for (att1, att2, m1, m2) in runs {
        let g = att1.geometry();
        let map = OverlapMap::for_geometry(g.grid_p, g.shift_s)?;
        let r = attention_instability(att1, att2, m1, m2, &map)?;
        rows.push(ShiftSweepRow {
            shift_s: r.shift_s,
            d_non_mean: r.d_non_mean,
            d_out_mean: r.d_out_mean,
            skipped_non: r.skipped_non,
            skipped_out: r.skipped_out,
        });
    }
    rows.sort_by_key(|r| r.shift_s);
    Ok(rows)
}

#[derive(Serialize)]
struct InstabilityRow {
    head: String,
    component: &'static str,
    mean: Option<f64>,
    std_across_images: Option<f64>,
    n_images: usize,
    skipped: usize,
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

/// Rows keyed by (head, component), followed by the all-heads averages under head `all`.
pub fn write_instability_csv<W: io::Write>(report: &InstabilityReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let n = report.per_image.len();
    let all: Vec<usize> = (0..report.heads()).collect();
    for h in 0..report.heads() {
        for c in [Component::NonOutlier, Component::Outlier] {
            let per_head = match c {
                Component::NonOutlier => report.d_non_per_head[h],
                Component::Outlier => report.d_out_per_head[h],
            };
            let valid = report.valid_images(c, h);
            w.serialize(InstabilityRow {
                head: h.to_string(),
                component: c.as_str(),
                mean: finite(per_head),
                std_across_images: finite(report.image_std(c, &[h])),
                n_images: valid,
                skipped: n - valid,
            })?;
        }
    }
    for (c, total, skipped) in [
        (Component::NonOutlier, report.d_non_mean, report.skipped_non),
        (Component::Outlier, report.d_out_mean, report.skipped_out),
    ] {
        w.serialize(InstabilityRow {
            head: "all".into(),
            component: c.as_str(),
            mean: finite(total),
            std_across_images: finite(report.image_std(c, &all)),
            n_images: n,
            skipped,
        })?;
    }
    w.flush()?;
    Ok(())
}
