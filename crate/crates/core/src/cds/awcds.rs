//! Activation-weighted CDS per token and its profile over the token-norm spectrum.
//!
//! `awCDS(v_t) = Σ_j a_tj · CDS_j / Σ_j a_tj` over the token's active features.

use std::io;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::sae::{encode_batch, SaeModel};
use crate::store::{l2_norm, EmbeddingSet};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenAwCds {
    pub image: usize,
    pub token: usize,
    pub norm: f64,
    /// `None` when the token activates no feature that has a CDS.
    pub awcds: Option<f64>,
}

/// Tokens whose norm rank falls in `[pct_lo, pct_hi)` percent of all tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct AwCdsBin {
    pub pct_lo: f64,
    pub pct_hi: f64,
    pub norm_lo: f64,
    pub norm_hi: f64,
    pub n_tokens: usize,
    /// Tokens in the bin with a defined awCDS.
    pub n_scored: usize,
    pub mean_awcds: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AwCdsProfile {
    pub bins: Vec<AwCdsBin>,
    /// Every token in image-major order; filled only when requested.
    pub tokens: Vec<TokenAwCds>,
}

/// awCDS for one sparse code row. Features without a CDS value are ignored.
pub fn token_awcds(active: &[(usize, f64)], cds: &[Option<f64>]) -> Option<f64> {
    let (num, den) = active
        .iter()
        .filter_map(|&(j, a)| cds[j].map(|c| (a * c, a)))
        .fold((0.0, 0.0), |(n, d), (x, a)| (n + x, d + a));
    (den > 0.0).then(|| num / den)
}

/// Scores every token, ranks all tokens by norm (ties by position) and splits the
/// ranking into `n_bins` equal-count percentile bins.
pub fn compute_awcds(
    sae: &SaeModel,
    set: &EmbeddingSet,
    cds: &[Option<f64>],
    n_bins: usize,
    keep_tokens: bool,
) -> Result<AwCdsProfile> {
    if n_bins == 0 {
        return Err(Error::InvalidArgument("n_bins must be positive".into()));
    }
    if cds.len() != sae.q() {
        return Err(Error::Shape(format!(
            "CDS table has {} features, model {}",
            cds.len(),
            sae.q()
        )));
    }
    if set.dim() != sae.d() {
        return Err(Error::Shape(format!("set has d = {}, model {}", set.dim(), sae.d())));
    }
    let per_image: Vec<Vec<TokenAwCds>> = (0..set.n_images())
        .into_par_iter()
        .map(|m| {
            let image = set.image(m);
            let code = encode_batch(sae, image)?;
            Ok(code
                .rows
                .iter()
                .enumerate()
                .map(|(a, row)| TokenAwCds {
                    image: m,
                    token: a,
                    norm: l2_norm(image.row(a)),
                    awcds: token_awcds(row, cds),
                })
                .collect())
        })
        .collect::<Result<_>>()?;
    let tokens: Vec<TokenAwCds> = per_image.into_iter().flatten().collect();

    let mut order: Vec<usize> = (0..tokens.len()).collect();
    order.sort_by(|&x, &y| tokens[x].norm.total_cmp(&tokens[y].norm).then(x.cmp(&y)));
    let total = tokens.len();
    let mut bins: Vec<AwCdsBin> = (0..n_bins)
        .map(|b| AwCdsBin {
            pct_lo: 100.0 * b as f64 / n_bins as f64,
            pct_hi: 100.0 * (b + 1) as f64 / n_bins as f64,
            norm_lo: f64::NAN,
            norm_hi: f64::NAN,
            n_tokens: 0,
            n_scored: 0,
            mean_awcds: None,
        })
        .collect();
    let mut sums = vec![0.0; n_bins];
    for (rank, &t) in order.iter().enumerate() {
        let b = rank * n_bins / total;
        let bin = &mut bins[b];
        let tok = &tokens[t];
        if bin.n_tokens == 0 {
            bin.norm_lo = tok.norm;
        }
        bin.norm_hi = tok.norm;
        bin.n_tokens += 1;
        if let Some(v) = tok.awcds {
            sums[b] += v;
            bin.n_scored += 1;
        }
    }
    for (bin, sum) in bins.iter_mut().zip(sums) {
        if bin.n_scored > 0 {
            bin.mean_awcds = Some(sum / bin.n_scored as f64);
        }
    }
    Ok(AwCdsProfile {
        bins,
        tokens: if keep_tokens { tokens } else { Vec::new() },
    })
}

fn finite(v: f64) -> Option<f64> {
    v.is_finite().then_some(v)
}

#[derive(Serialize)]
struct BinRow {
    bin: usize,
    pct_lo: f64,
    pct_hi: f64,
    norm_lo: Option<f64>,
    norm_hi: Option<f64>,
    n_tokens: usize,
    n_scored: usize,
    mean_awcds: Option<f64>,
}

pub fn write_awcds_csv<W: io::Write>(profile: &AwCdsProfile, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for (b, bin) in profile.bins.iter().enumerate() {
        w.serialize(BinRow {
            bin: b,
            pct_lo: bin.pct_lo,
            pct_hi: bin.pct_hi,
            norm_lo: finite(bin.norm_lo),
            norm_hi: finite(bin.norm_hi),
            n_tokens: bin.n_tokens,
            n_scored: bin.n_scored,
            mean_awcds: bin.mean_awcds,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct TokenRow<'a> {
    image_id: &'a str,
    token: usize,
    norm: f64,
    awcds: Option<f64>,
}

pub fn write_token_awcds_csv<W: io::Write>(profile: &AwCdsProfile, set: &EmbeddingSet, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for t in &profile.tokens {
        w.serialize(TokenRow {
            image_id: &set.image_ids()[t.image],
            token: t.token,
            norm: t.norm,
            awcds: t.awcds,
        })?;
    }
    w.flush()?;
    Ok(())
}
