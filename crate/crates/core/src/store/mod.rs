//! Exported ViT activations: patch-token sets, CLS attention sets, outlier masks,
//! and training-token sampling.
//!
//! Token sets are held in `f64` whatever their stored precision; the stored dtype
//! is remembered so a save after a load writes the same bytes.

pub(crate) mod format;

pub use format::{
    load_attention_set, load_embedding_set, read_attention_set, read_embedding_set, save_attention_set,
    save_embedding_set, write_attention_set, write_embedding_set, FORMAT_VERSION, MAGIC,
};

use ndarray::{Array2, Array3, ArrayView1, ArrayView2, Axis};
use rand::seq::index;

use crate::error::{Error, Result};
use crate::rng::StreamRng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum CropRole {
    Single,
    SccCrop1,
    SccCrop2,
}

impl CropRole {
    pub fn code(self) -> u8 {
        match self {
            CropRole::Single => 0,
            CropRole::SccCrop1 => 1,
            CropRole::SccCrop2 => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(CropRole::Single),
            1 => Some(CropRole::SccCrop1),
            2 => Some(CropRole::SccCrop2),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            CropRole::Single => "single",
            CropRole::SccCrop1 => "scc_crop1",
            CropRole::SccCrop2 => "scc_crop2",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DType {
    F32,
    F64,
}

impl DType {
    pub fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(DType::F32),
            1 => Some(DType::F64),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// Grid geometry shared by embedding and attention records.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Geometry {
    pub grid_p: usize,
    pub patch_n: usize,
    pub crop_role: CropRole,
    pub shift_s: usize,
}

impl Geometry {
    pub fn single(grid_p: usize, patch_n: usize) -> Self {
        Geometry {
            grid_p,
            patch_n,
            crop_role: CropRole::Single,
            shift_s: 0,
        }
    }

    pub fn scc(grid_p: usize, patch_n: usize, crop_role: CropRole, shift_s: usize) -> Self {
        Geometry {
            grid_p,
            patch_n,
            crop_role,
            shift_s,
        }
    }

    pub fn n_tokens(&self) -> usize {
        self.grid_p * self.grid_p
    }

    fn validate(&self) -> Result<()> {
        if self.grid_p == 0 {
            return Err(Error::InvalidArgument("grid_p must be positive".into()));
        }
        match (self.crop_role, self.shift_s) {
            (CropRole::Single, 0) => Ok(()),
            (CropRole::Single, s) => Err(Error::InvalidArgument(format!(
                "single-crop set must have shift_s = 0, got {s}"
            ))),
            (_, 0) => Err(Error::InvalidArgument("SCC crop set must have shift_s >= 1".into())),
            (_, s) if s >= self.grid_p => Err(Error::InvalidArgument(format!(
                "shift_s {s} leaves no overlap on a {0}x{0} grid",
                self.grid_p
            ))),
            _ => Ok(()),
        }
    }
}

fn check_unique_ids(ids: &[String]) -> Result<()> {
    let mut seen = std::collections::HashSet::with_capacity(ids.len());
    for id in ids {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidArgument(format!("duplicate image id {id:?}")));
        }
    }
    Ok(())
}

/// Patch tokens of a set of images, `[n_images × N × d]` with `N = grid_p²`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    image_ids: Vec<String>,
    tokens: Array3<f64>,
    geometry: Geometry,
    dtype: DType,
    /// Which model layer the tokens came from. Not part of the binary record;
    /// carried in run manifests.
    pub layer_tag: String,
}

impl EmbeddingSet {
    pub fn new(image_ids: Vec<String>, tokens: Array3<f64>, geometry: Geometry, dtype: DType) -> Result<Self> {
        geometry.validate()?;
        let (n, big_n, d) = tokens.dim();
        if n != image_ids.len() {
            return Err(Error::Shape(format!(
                "{} image ids for {n} token matrices",
                image_ids.len()
            )));
        }
        if big_n != geometry.n_tokens() {
            return Err(Error::Shape(format!(
                "N ≠ p²: {big_n} tokens per image but grid_p = {}",
                geometry.grid_p
            )));
        }
        if d == 0 {
            return Err(Error::Shape("embedding dimension d must be positive".into()));
        }
        if tokens.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidArgument("non-finite token value".into()));
        }
        check_unique_ids(&image_ids)?;
        Ok(EmbeddingSet {
            image_ids,
            tokens,
            geometry,
            dtype,
            layer_tag: String::new(),
        })
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn tokens(&self) -> &Array3<f64> {
        &self.tokens
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    pub fn n_tokens(&self) -> usize {
        self.geometry.n_tokens()
    }

    pub fn dim(&self) -> usize {
        self.tokens.dim().2
    }

    pub fn grid_p(&self) -> usize {
        self.geometry.grid_p
    }

    /// Token matrix `[N × d]` of image `m`.
    pub fn image(&self, m: usize) -> ArrayView2<'_, f64> {
        self.tokens.index_axis(Axis(0), m)
    }

    pub fn token(&self, m: usize, a: usize) -> ArrayView1<'_, f64> {
        self.tokens.index_axis(Axis(0), m).index_axis_move(Axis(0), a)
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.image_ids.iter().position(|x| x == id)
    }

    /// Copy with the same ids and geometry but different token values.
    pub fn with_tokens(&self, tokens: Array3<f64>) -> Result<Self> {
        let mut out = EmbeddingSet::new(self.image_ids.clone(), tokens, self.geometry, self.dtype)?;
        out.layer_tag = self.layer_tag.clone();
        Ok(out)
    }

    /// Copy stored at a different precision. Values are rounded to f32 when narrowing.
    pub fn with_dtype(&self, dtype: DType) -> Self {
        let mut out = self.clone();
        out.dtype = dtype;
        if dtype == DType::F32 {
            out.tokens.mapv_inplace(|v| v as f32 as f64);
        }
        out
    }

    /// Per-token L2 norms `[n_images × N]`, accumulated in f64.
    pub fn token_norms(&self) -> Array2<f64> {
        let (n, big_n, _) = self.tokens.dim();
        Array2::from_shape_fn((n, big_n), |(m, a)| l2_norm(self.token(m, a)))
    }

    /// Errors unless `other` lists the same image ids in the same order.
    pub fn check_same_ids(&self, other_ids: &[String]) -> Result<()> {
        check_ids_match(&self.image_ids, other_ids)
    }
}

/// Errors unless both lists hold the same ids in the same order, naming the first differing position.
pub fn check_ids_match(a: &[String], b: &[String]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::ImageIdMismatch(format!("{} images vs {}", a.len(), b.len())));
    }
    if let Some((i, (x, y))) = a.iter().zip(b).enumerate().find(|(_, (x, y))| x != y) {
        return Err(Error::ImageIdMismatch(format!("position {i}: {x:?} vs {y:?}")));
    }
    Ok(())
}

pub(crate) fn l2_norm(v: ArrayView1<'_, f64>) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// CLS-to-patch attention `[n_images × H × N]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionSet {
    image_ids: Vec<String>,
    cls_attention: Array3<f64>,
    geometry: Geometry,
    dtype: DType,
}

impl AttentionSet {
    pub fn new(image_ids: Vec<String>, cls_attention: Array3<f64>, geometry: Geometry, dtype: DType) -> Result<Self> {
        geometry.validate()?;
        let (n, h, big_n) = cls_attention.dim();
        if n != image_ids.len() {
            return Err(Error::Shape(format!(
                "{} image ids for {n} attention stacks",
                image_ids.len()
            )));
        }
        if h == 0 {
            return Err(Error::Shape("attention set needs at least one head".into()));
        }
        if big_n != geometry.n_tokens() {
            return Err(Error::Shape(format!(
                "N ≠ p²: {big_n} attention entries per head but grid_p = {}",
                geometry.grid_p
            )));
        }
        if let Some(v) = cls_attention.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(Error::InvalidArgument(format!(
                "attention entries must be finite and nonnegative, found {v}"
            )));
        }
        check_unique_ids(&image_ids)?;
        Ok(AttentionSet {
            image_ids,
            cls_attention,
            geometry,
            dtype,
        })
    }

    pub fn image_ids(&self) -> &[String] {
        &self.image_ids
    }

    pub fn cls_attention(&self) -> &Array3<f64> {
        &self.cls_attention
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn heads(&self) -> usize {
        self.cls_attention.dim().1
    }

    pub fn n_images(&self) -> usize {
        self.image_ids.len()
    }

    /// Attention of head `h` over the N patches of image `m`.
    pub fn head(&self, m: usize, h: usize) -> ArrayView1<'_, f64> {
        self.cls_attention.index_axis(Axis(0), m).index_axis_move(Axis(0), h)
    }
}

/// Binary outlier mask: bit set iff the token norm is strictly above `tau`.
#[derive(Debug, Clone, PartialEq)]
pub struct OutlierMask {
    pub mask: Array2<bool>,
    pub tau: f64,
}

impl OutlierMask {
    pub fn is_outlier(&self, m: usize, a: usize) -> bool {
        self.mask[[m, a]]
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|b| **b).count()
    }

    pub fn image(&self, m: usize) -> ArrayView1<'_, bool> {
        self.mask.index_axis(Axis(0), m)
    }
}

pub fn compute_outlier_mask(set: &EmbeddingSet, tau: f64) -> Result<OutlierMask> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::InvalidArgument(format!("tau must be positive, got {tau}")));
    }
    let mask = set.token_norms().mapv(|norm| norm > tau);
    Ok(OutlierMask { mask, tau })
}

/// Draws `per_image` distinct tokens from every image, image by image.
/// Output rows are `[n_images · per_image × d]`.
pub fn sample_training_tokens(set: &EmbeddingSet, per_image: usize, rng: &mut StreamRng) -> Result<Array2<f64>> {
    let big_n = set.n_tokens();
    if per_image == 0 || per_image > big_n {
        return Err(Error::InvalidArgument(format!(
            "per_image must be in [1, {big_n}], got {per_image}"
        )));
    }
    let d = set.dim();
    let mut out = Array2::zeros((set.n_images() * per_image, d));
    let mut row = 0;
    for m in 0..set.n_images() {
        let image = set.image(m);
        for a in index::sample(rng, big_n, per_image).into_iter() {
            out.row_mut(row).assign(&image.row(a));
            row += 1;
        }
    }
    Ok(out)
}
