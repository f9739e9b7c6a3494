//! Synthetic fixtures with known ground truth: planted dictionaries, SCC crop
//! pairs with planted local/global features, and token sets with planted
//! outliers. Used by tests, benches and the CLI smoke pipeline.

use ndarray::{Array1, Array2, Array3};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::probe::{LabeledPool, Split};
use crate::rng::StreamRng;
use crate::sae::SaeModel;
use crate::scc::{Crop, OverlapMap};
use crate::store::{CropRole, DType, EmbeddingSet, Geometry};

/// `q` random unit-norm directions in `R^d`, one per row.
pub fn planted_dictionary(d: usize, q: usize, rng: &mut StreamRng) -> Array2<f64> {
    let mut dict = Array2::<f64>::zeros((q, d));
    for mut row in dict.rows_mut() {
        row.mapv_inplace(|_| rng.sample::<f64, _>(StandardNormal));
        let norm = row.dot(&row).sqrt();
        row /= norm;
    }
    dict
}

/// Samples that are sums of `active` distinct dictionary rows with coefficients in [0.5, 1.5).
pub fn planted_samples(dict: &Array2<f64>, n: usize, active: usize, rng: &mut StreamRng) -> Array2<f64> {
    let (q, d) = dict.dim();
    let mut out = Array2::<f64>::zeros((n, d));
    for mut row in out.rows_mut() {
        for j in index::sample(rng, q, active).into_iter() {
            let c = rng.random_range(0.5..1.5);
            row.scaled_add(c, &dict.row(j));
        }
    }
    out
}

/// Best cosine between each planted direction and any learned decoder row, averaged.
pub fn mean_max_cosine(planted: &Array2<f64>, learned: &Array2<f64>) -> f64 {
    let norms: Vec<f64> = learned.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect();
    let total: f64 = planted
        .rows()
        .into_iter()
        .map(|p| {
            let pn = p.dot(&p).sqrt();
            learned
                .rows()
                .into_iter()
                .zip(&norms)
                .map(|(l, ln)| if *ln > 0.0 { p.dot(&l) / (pn * ln) } else { 0.0 })
                .fold(f64::NEG_INFINITY, f64::max)
        })
        .sum();
    total / planted.nrows() as f64
}

/// SAE whose code is the positive part of the token itself (`W_enc = W_dec = I`, zero bias).
pub fn identity_sae(q: usize) -> SaeModel {
    SaeModel::new(Array2::eye(q), Array2::eye(q), Array1::zeros(q), q).expect("valid identity model")
}

/// A pair of SCC crop sets with planted feature scopes, for an identity SAE of size `q`.
pub struct SccFixture {
    pub crop1: EmbeddingSet,
    pub crop2: EmbeddingSet,
    pub sae: SaeModel,
    pub local: Vec<usize>,
    pub global: Vec<usize>,
}

/// Builds crops where feature `j < n_local` paints the same random blob on the
/// overlap of both crops and the remaining features are point masses at
/// independent random overlap cells in each crop.
pub fn scc_fixture(
    n_images: usize,
    grid_p: usize,
    shift_s: usize,
    n_local: usize,
    n_global: usize,
    rng: &mut StreamRng,
) -> Result<SccFixture> {
    let q = n_local + n_global;
    let map = OverlapMap::for_geometry(grid_p, shift_s)?;
    let big_n = grid_p * grid_p;
    let one = map.token_indices(Crop::First);
    let two = map.token_indices(Crop::Second);
    let cells = map.len();
    let mut t1 = Array3::<f64>::zeros((n_images, big_n, q));
    let mut t2 = Array3::<f64>::zeros((n_images, big_n, q));
    for m in 0..n_images {
        for j in 0..n_local {
            let blob = 1 + rng.random_range(0..cells.min(6));
            for cell in index::sample(rng, cells, blob).into_iter() {
                let v = rng.random_range(0.5..2.0);
                t1[[m, one[cell], j]] = v;
                t2[[m, two[cell], j]] = v;
            }
        }
        for j in n_local..q {
            let v = rng.random_range(1.0..3.0);
            t1[[m, one[rng.random_range(0..cells)], j]] = v;
            t2[[m, two[rng.random_range(0..cells)], j]] = v;
        }
    }
    let ids: Vec<String> = (0..n_images).map(|m| format!("img{m:04}")).collect();
    let crop1 = EmbeddingSet::new(
        ids.clone(),
        t1,
        Geometry::scc(grid_p, 14, CropRole::SccCrop1, shift_s),
        DType::F64,
    )?;
    let crop2 = EmbeddingSet::new(
        ids,
        t2,
        Geometry::scc(grid_p, 14, CropRole::SccCrop2, shift_s),
        DType::F64,
    )?;
    Ok(SccFixture {
        crop1,
        crop2,
        sae: identity_sae(q),
        local: (0..n_local).collect(),
        global: (n_local..q).collect(),
    })
}

/// Token set with planted outliers, for an identity SAE of size `n_local + n_global`.
pub struct OutlierFixture {
    pub set: EmbeddingSet,
    pub sae: SaeModel,
    pub outliers: Vec<(usize, usize)>,
    pub local: Vec<usize>,
    pub global: Vec<usize>,
    /// Norm threshold separating planted outliers from ordinary tokens.
    pub tau: f64,
}

/// Ordinary tokens carry two local features with values in [0.5, 1.5); `outliers_per_image`
/// tokens per image instead carry one global feature at magnitude 40–60 plus one small local one.
pub fn outlier_fixture(
    n_images: usize,
    grid_p: usize,
    n_local: usize,
    n_global: usize,
    outliers_per_image: usize,
    rng: &mut StreamRng,
) -> Result<OutlierFixture> {
    let q = n_local + n_global;
    let big_n = grid_p * grid_p;
    let mut tokens = Array3::<f64>::zeros((n_images, big_n, q));
    let mut outliers = Vec::new();
    for m in 0..n_images {
        let chosen: Vec<usize> = index::sample(rng, big_n, outliers_per_image).into_vec();
        for a in 0..big_n {
            if chosen.contains(&a) {
                let g = n_local + rng.random_range(0..n_global);
                tokens[[m, a, g]] = rng.random_range(40.0..60.0);
                tokens[[m, a, rng.random_range(0..n_local)]] = rng.random_range(0.1..0.5);
                outliers.push((m, a));
            } else {
                for j in index::sample(rng, n_local, 2).into_iter() {
                    tokens[[m, a, j]] = rng.random_range(0.5..1.5);
                }
            }
        }
    }
    outliers.sort_unstable();
    let ids = (0..n_images).map(|m| format!("img{m:04}")).collect();
    let set = EmbeddingSet::new(ids, tokens, Geometry::single(grid_p, 14), DType::F64)?;
    Ok(OutlierFixture {
        set,
        sae: identity_sae(q),
        outliers,
        local: (0..n_local).collect(),
        global: (n_local..q).collect(),
        tau: 10.0,
    })
}

fn alternating_split(n: usize) -> Vec<Split> {
    (0..n)
        .map(|i| if i % 2 == 0 { Split::Train } else { Split::Val })
        .collect()
}

/// Two Gaussian clusters (unit variance) centred at `±margin` along the first axis.
pub fn separable_pool(n: usize, d: usize, margin: f64, rng: &mut StreamRng) -> Result<LabeledPool> {
    let labels: Vec<usize> = (0..n).map(|i| (i / 2) % 2).collect();
    let features = Array2::from_shape_fn((n, d), |(i, k)| {
        let noise: f64 = rng.sample(StandardNormal);
        if k == 0 {
            let centre = if labels[i] == 1 { margin } else { -margin };
            centre + 0.1 * noise
        } else {
            noise
        }
    });
    LabeledPool::new(features, labels, 2, alternating_split(n))
}

/// Gaussian features with balanced labels that carry no information about them.
pub fn shuffled_pool(n: usize, d: usize, n_classes: usize, rng: &mut StreamRng) -> Result<LabeledPool> {
    let features = Array2::from_shape_fn((n, d), |_| rng.sample::<f64, _>(StandardNormal));
    let mut labels: Vec<usize> = (0..n).map(|i| i % n_classes).collect();
    labels.shuffle(rng);
    LabeledPool::new(features, labels, n_classes, alternating_split(n))
}
