//! Splitting the dictionary by CDS, per-group activation statistics, and
//! embeddings with one feature group subtracted.

use std::fmt::Write as _;
use std::io;
use std::path::Path;

use ndarray::{Array2, Array3, Axis};
use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sae::{decode_subset, encode_batch, FeatureSet, SaeModel};
use crate::store::{l2_norm, EmbeddingSet, OutlierMask};

/// Features with `CDS ≤ γ` are low, `CDS > γ` high; features without a CDS are excluded.
#[derive(Debug, Clone, PartialEq)]
pub struct Partition {
    pub gamma: f64,
    pub q: usize,
    pub low: Vec<usize>,
    pub high: Vec<usize>,
    pub excluded: Vec<usize>,
}

pub fn partition(cds: &[Option<f64>], gamma: f64) -> Result<Partition> {
    if !(gamma > 0.0 && gamma < 1.0) {
        return Err(Error::InvalidArgument(format!("gamma must be in (0, 1), got {gamma}")));
    }
    let mut part = Partition {
        gamma,
        q: cds.len(),
        low: Vec::new(),
        high: Vec::new(),
        excluded: Vec::new(),
    };
    for (j, v) in cds.iter().enumerate() {
        match v {
            Some(v) if *v <= gamma => part.low.push(j),
            Some(_) => part.high.push(j),
            None => part.excluded.push(j),
        }
    }
    Ok(part)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Group {
    Low,
    High,
}

impl Group {
    pub fn as_str(self) -> &'static str {
        match self {
            Group::Low => "low",
            Group::High => "high",
        }
    }
}

fn format_runs(indices: &[usize]) -> String {
    let mut out = String::new();
    let mut i = 0;
    while i < indices.len() {
        let start = indices[i];
        let mut end = start;
        while i + 1 < indices.len() && indices[i + 1] == end + 1 {
            i += 1;
            end += 1;
        }
        if !out.is_empty() {
            out.push(',');
        }
        if end == start {
            write!(out, "{start}").unwrap();
        } else {
            write!(out, "{start}-{end}").unwrap();
        }
        i += 1;
    }
    out
}

fn parse_runs(text: &str) -> Result<Vec<usize>> {
    let bad = |t: &str| Error::Parse(format!("bad index run {t:?}"));
    let mut out = Vec::new();
    for run in text.split(',').map(str::trim).filter(|t| !t.is_empty()) {
        let (a, b) = match run.split_once('-') {
            Some((a, b)) => (a, b),
            None => (run, run),
        };
        let a: usize = a.parse().map_err(|_| bad(run))?;
        let b: usize = b.parse().map_err(|_| bad(run))?;
        if b < a {
            return Err(bad(run));
        }
        out.extend(a..=b);
    }
    Ok(out)
}

impl Partition {
    pub fn set(&self, group: Group) -> FeatureSet {
        let indices = match group {
            Group::Low => &self.low,
            Group::High => &self.high,
        };
        FeatureSet::from_indices(self.q, indices.iter().copied()).expect("indices below q")
    }

    /// `gamma`, `q`, then run-length encoded index lists, one `key=value` per line.
    pub fn to_text(&self) -> String {
        format!(
            "gamma={}\nq={}\nlow={}\nhigh={}\nexcluded={}\n",
            self.gamma,
            self.q,
            format_runs(&self.low),
            format_runs(&self.high),
            format_runs(&self.excluded)
        )
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("expected key=value, got {line:?}")))?;
            if fields.insert(k.trim().to_string(), v.trim().to_string()).is_some() {
                return Err(Error::Parse(format!("duplicate key {k:?}")));
            }
        }
        let get = |k: &str| fields.get(k).ok_or_else(|| Error::Parse(format!("missing key {k:?}")));
        let gamma: f64 = get("gamma")?
            .parse()
            .map_err(|_| Error::Parse("gamma is not a number".into()))?;
        let q: usize = get("q")?
            .parse()
            .map_err(|_| Error::Parse("q is not an integer".into()))?;
        let part = Partition {
            gamma,
            q,
            low: parse_runs(get("low")?)?,
            high: parse_runs(get("high")?)?,
            excluded: parse_runs(get("excluded")?)?,
        };
        let mut seen = vec![false; q];
        for &j in part.low.iter().chain(&part.high).chain(&part.excluded) {
            if j >= q || std::mem::replace(&mut seen[j], true) {
                return Err(Error::Parse(format!("feature {j} is out of range or listed twice")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Parse("partition does not cover every feature".into()));
        }
        Ok(part)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Partition::from_text(&std::fs::read_to_string(path)?)
    }
}

/// Mean total activation of one feature group over one token type.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroupStat {
    /// Mean over all tokens of the type.
    pub mean: f64,
    /// Population std of the per-image means, over images that contain the type.
    pub std_across_images: f64,
    pub n_tokens: usize,
    pub n_images: usize,
}

/// `[group][token type]`, group 0 = low, 1 = high; type 0 = non-outlier, 1 = outlier.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationTable {
    pub cells: [[Option<GroupStat>; 2]; 2],
}

impl ActivationTable {
    pub fn get(&self, group: Group, outlier: bool) -> Option<GroupStat> {
        self.cells[group as usize][usize::from(outlier)]
    }
}

pub fn activation_by_token_type(
    sae: &SaeModel,
    set: &EmbeddingSet,
    mask: &OutlierMask,
    part: &Partition,
) -> Result<ActivationTable> {
    check_model(sae, set, part)?;
    if mask.mask.dim() != (set.n_images(), set.n_tokens()) {
        return Err(Error::Shape("outlier mask does not match the embedding set".into()));
    }
    let mut group_of = vec![None; part.q];
    for &j in &part.low {
        group_of[j] = Some(0);
    }
    for &j in &part.high {
        group_of[j] = Some(1);
    }
    // per image: [group][type] -> (sum, count)
    let per_image: Vec<[[(f64, usize); 2]; 2]> = (0..set.n_images())
        .into_par_iter()
        .map(|m| {
            let code = encode_batch(sae, set.image(m))?;
            let mut acc = [[(0.0, 0usize); 2]; 2];
            for (a, row) in code.rows.iter().enumerate() {
                let mut totals = [0.0; 2];
                for &(j, v) in row {
                    if let Some(g) = group_of[j] {
                        totals[g] += v;
                    }
                }
                let t = usize::from(mask.is_outlier(m, a));
                for g in 0..2 {
                    acc[g][t].0 += totals[g];
                    acc[g][t].1 += 1;
                }
            }
            Ok(acc)
        })
        .collect::<Result<_>>()?;

    let mut cells = [[None; 2]; 2];
    for (g, row) in cells.iter_mut().enumerate() {
        for (t, cell) in row.iter_mut().enumerate() {
            let (sum, n_tokens) = per_image
                .iter()
                .fold((0.0, 0), |(s, n), img| (s + img[g][t].0, n + img[g][t].1));
            if n_tokens == 0 {
                continue;
            }
            let image_means: Vec<f64> = per_image
                .iter()
                .filter(|img| img[g][t].1 > 0)
                .map(|img| img[g][t].0 / img[g][t].1 as f64)
                .collect();
            let mu = image_means.iter().sum::<f64>() / image_means.len() as f64;
            let var = image_means.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / image_means.len() as f64;
            *cell = Some(GroupStat {
                mean: sum / n_tokens as f64,
                std_across_images: var.sqrt(),
                n_tokens,
                n_images: image_means.len(),
            });
        }
    }
    Ok(ActivationTable { cells })
}

#[derive(Serialize)]
struct ActivationRow {
    feature_set: &'static str,
    token_type: &'static str,
    mean: Option<f64>,
    std_across_images: Option<f64>,
    n_tokens: usize,
    n_images: usize,
}

pub fn write_activation_csv<W: io::Write>(table: &ActivationTable, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for group in [Group::High, Group::Low] {
        for (outlier, name) in [(false, "non_outlier"), (true, "outlier")] {
            let stat = table.get(group, outlier);
            w.serialize(ActivationRow {
                feature_set: group.as_str(),
                token_type: name,
                mean: stat.map(|s| s.mean),
                std_across_images: stat.map(|s| s.std_across_images),
                n_tokens: stat.map_or(0, |s| s.n_tokens),
                n_images: stat.map_or(0, |s| s.n_images),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RemovalTag {
    None,
    LowRemoved,
    HighRemoved,
}

impl RemovalTag {
    pub fn as_str(self) -> &'static str {
        match self {
            RemovalTag::None => "none",
            RemovalTag::LowRemoved => "low_removed",
            RemovalTag::HighRemoved => "high_removed",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblatedEmbeddingSet {
    pub set: EmbeddingSet,
    pub removal: RemovalTag,
    pub normalized: bool,
    /// Tokens left at zero norm by normalisation, `(image, token)`.
    pub zero_tokens: Vec<(usize, usize)>,
}

fn check_model(sae: &SaeModel, set: &EmbeddingSet, part: &Partition) -> Result<()> {
    if set.dim() != sae.d() {
        return Err(Error::Shape(format!("set has d = {}, model {}", set.dim(), sae.d())));
    }
    if part.q != sae.q() {
        return Err(Error::Shape(format!(
            "partition covers {} features, model has {}",
            part.q,
            sae.q()
        )));
    }
    Ok(())
}

/// `v − decode_subset(code(v), features)` for every token, images encoded one per batch.
pub fn remove_features(sae: &SaeModel, set: &EmbeddingSet, features: &FeatureSet) -> Result<Array3<f64>> {
    if set.dim() != sae.d() {
        return Err(Error::Shape(format!("set has d = {}, model {}", set.dim(), sae.d())));
    }
    let images: Vec<Array2<f64>> = (0..set.n_images())
        .into_par_iter()
        .map(|m| {
            let image = set.image(m);
            if features.is_empty() {
                return Ok(image.to_owned());
            }
            let code = encode_batch(sae, image)?;
            Ok(&image - &decode_subset(sae, &code, features)?)
        })
        .collect::<Result<_>>()?;
    let views: Vec<_> = images.iter().map(|a| a.view()).collect();
    Ok(ndarray::stack(Axis(0), &views).expect("images share a shape"))
}

/// Per-token L2 normalisation in place; returns tokens whose norm is zero (left unchanged).
pub fn l2_normalize(tokens: &mut Array3<f64>) -> Vec<(usize, usize)> {
    let mut zero = Vec::new();
    for (m, mut image) in tokens.outer_iter_mut().enumerate() {
        for (a, mut row) in image.outer_iter_mut().enumerate() {
            let norm = l2_norm(row.view());
            if norm > 0.0 {
                row /= norm;
            } else {
                zero.push((m, a));
            }
        }
    }
    zero
}

/// The untouched embeddings, optionally normalised, as the baseline next to ablated variants.
pub fn baseline(set: &EmbeddingSet, normalize: bool) -> Result<AblatedEmbeddingSet> {
    let mut tokens = set.tokens().clone();
    let zero_tokens = if normalize {
        l2_normalize(&mut tokens)
    } else {
        Vec::new()
    };
    Ok(AblatedEmbeddingSet {
        set: set.with_tokens(tokens)?,
        removal: RemovalTag::None,
        normalized: normalize,
        zero_tokens,
    })
}

/// Subtracts the reconstruction from one feature group, then optionally L2-normalises each token.
pub fn ablate(
    sae: &SaeModel,
    set: &EmbeddingSet,
    part: &Partition,
    which: Group,
    normalize: bool,
) -> Result<AblatedEmbeddingSet> {
    check_model(sae, set, part)?;
    let mut tokens = remove_features(sae, set, &part.set(which))?;
    let zero_tokens = if normalize {
        l2_normalize(&mut tokens)
    } else {
        Vec::new()
    };
    Ok(AblatedEmbeddingSet {
        set: set.with_tokens(tokens)?,
        removal: match which {
            Group::Low => RemovalTag::LowRemoved,
            Group::High => RemovalTag::HighRemoved,
        },
        normalized: normalize,
        zero_tokens,
    })
}

/// Per-patch token norms of one image as a `p × p` grid.
pub fn norm_map(set: &EmbeddingSet, image_id: &str) -> Result<Array2<f64>> {
    let m = set
        .index_of(image_id)
        .ok_or_else(|| Error::UnknownId(image_id.to_string()))?;
    let p = set.grid_p();
    let image = set.image(m);
    Ok(Array2::from_shape_fn((p, p), |(r, c)| l2_norm(image.row(r * p + c))))
}

pub fn write_norm_map_csv<W: io::Write>(grid: &Array2<f64>, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["row", "col", "norm"])?;
    for ((r, c), v) in grid.indexed_iter() {
        w.write_record([r.to_string(), c.to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    /// `n_bins + 1` uniform edges over [0, 1].
    pub edges: Vec<f64>,
    pub counts: Vec<usize>,
}

/// Counts the features that have a CDS; values at or above 1 land in the last bin.
pub fn histogram(cds: &[Option<f64>], n_bins: usize) -> Result<Histogram> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be at least 1".into()));
    }
    let mut counts = vec![0; n_bins];
    for v in cds.iter().flatten() {
        let b = ((v * n_bins as f64).floor().max(0.0) as usize).min(n_bins - 1);
        counts[b] += 1;
    }
    Ok(Histogram {
        edges: (0..=n_bins).map(|b| b as f64 / n_bins as f64).collect(),
        counts,
    })
}

pub fn write_histogram_csv<W: io::Write>(hist: &Histogram, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["bin", "lo", "hi", "count"])?;
    for (b, count) in hist.counts.iter().enumerate() {
        w.write_record([
            b.to_string(),
            hist.edges[b].to_string(),
            hist.edges[b + 1].to_string(),
            count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}
