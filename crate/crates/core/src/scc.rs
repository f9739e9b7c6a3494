//! Shifted Context Crop geometry.
//!
//! The source image is resized to `(p+s)·n` pixels square; crop 1 starts at the
//! origin and crop 2 at `(s·n, s·n)`, both `p·n` pixels square. Patch `(r, c)`
//! of crop 2 then shows the same pixels as patch `(r+s, c+s)` of crop 1 for
//! every `r, c < p − s`.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, ArrayView1};

use crate::error::{Error, Result};

pub const INTERPOLATION: &str = "bicubic";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CropPlan {
    pub grid_p: usize,
    pub patch_n: usize,
    pub shift_s: usize,
    pub expanded_side_px: usize,
    pub crop_side_px: usize,
    pub crop1_origin: (usize, usize),
    pub crop2_origin: (usize, usize),
}

impl CropPlan {
    pub fn overlap_side(&self) -> usize {
        self.grid_p - self.shift_s
    }

    /// Key=value text record read by the exporter.
    pub fn to_record(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "format=scc-plan");
        let _ = writeln!(s, "version=1");
        let _ = writeln!(s, "grid_p={}", self.grid_p);
        let _ = writeln!(s, "patch_n={}", self.patch_n);
        let _ = writeln!(s, "shift_s={}", self.shift_s);
        let _ = writeln!(s, "expanded_side_px={}", self.expanded_side_px);
        let _ = writeln!(s, "crop_side_px={}", self.crop_side_px);
        let _ = writeln!(s, "crop1_origin={},{}", self.crop1_origin.0, self.crop1_origin.1);
        let _ = writeln!(s, "crop2_origin={},{}", self.crop2_origin.0, self.crop2_origin.1);
        let _ = writeln!(s, "overlap_side={}", self.overlap_side());
        let _ = writeln!(s, "interpolation={INTERPOLATION}");
        s
    }

    /// Parses a plan record and checks it against a freshly derived plan.
    pub fn from_record(text: &str) -> Result<Self> {
        let mut fields = std::collections::BTreeMap::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("plan line {}: expected key=value", lineno + 1)))?;
            fields.insert(k.trim().to_string(), v.trim().to_string());
        }
        let get = |k: &str| {
            fields
                .get(k)
                .ok_or_else(|| Error::Parse(format!("plan is missing {k}")))
        };
        if get("format")? != "scc-plan" {
            return Err(Error::Parse("not an scc-plan record".into()));
        }
        let num = |k: &str| -> Result<usize> {
            get(k)?
                .parse()
                .map_err(|_| Error::Parse(format!("plan field {k} is not an integer")))
        };
        let plan = make_crop_plan(num("grid_p")?, num("patch_n")?, num("shift_s")?)?;
        if num("expanded_side_px")? != plan.expanded_side_px
            || num("crop_side_px")? != plan.crop_side_px
            || get("crop2_origin")? != &format!("{},{}", plan.crop2_origin.0, plan.crop2_origin.1)
        {
            return Err(Error::Parse(
                "plan pixel geometry is inconsistent with grid_p/patch_n/shift_s".into(),
            ));
        }
        Ok(plan)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_record())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_record(&std::fs::read_to_string(path)?)
    }
}

pub fn make_crop_plan(grid_p: usize, patch_n: usize, shift_s: usize) -> Result<CropPlan> {
    if shift_s < 1 {
        return Err(Error::InvalidArgument("shift_s must be at least 1".into()));
    }
    if shift_s >= grid_p {
        return Err(Error::InvalidArgument(format!(
            "shift_s = {shift_s} leaves no overlap on a {grid_p}x{grid_p} grid"
        )));
    }
    if patch_n == 0 {
        return Err(Error::InvalidArgument("patch_n must be positive".into()));
    }
    Ok(CropPlan {
        grid_p,
        patch_n,
        shift_s,
        expanded_side_px: (grid_p + shift_s) * patch_n,
        crop_side_px: grid_p * patch_n,
        crop1_origin: (0, 0),
        crop2_origin: (shift_s * patch_n, shift_s * patch_n),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Crop {
    First,
    Second,
}

/// Correspondence between the shared `(p−s)²` patches of the two crops.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct OverlapMap {
    pub grid_p: usize,
    pub shift_s: usize,
    pub side: usize,
    /// `((r+s, c+s), (r, c))` in row-major order of the shared grid.
    pub pairs: Vec<((usize, usize), (usize, usize))>,
}

pub fn make_overlap_map(plan: &CropPlan) -> OverlapMap {
    let side = plan.overlap_side();
    let s = plan.shift_s;
    let pairs = (0..side)
        .flat_map(|r| (0..side).map(move |c| ((r + s, c + s), (r, c))))
        .collect();
    OverlapMap {
        grid_p: plan.grid_p,
        shift_s: s,
        side,
        pairs,
    }
}

impl OverlapMap {
    pub fn for_geometry(grid_p: usize, shift_s: usize) -> Result<Self> {
        Ok(make_overlap_map(&make_crop_plan(grid_p, 1, shift_s)?))
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Flat token indices of the overlap patches in `crop`, shared-grid row-major.
    pub fn token_indices(&self, crop: Crop) -> Vec<usize> {
        self.pairs
            .iter()
            .map(|&(one, two)| {
                let (r, c) = match crop {
                    Crop::First => one,
                    Crop::Second => two,
                };
                r * self.grid_p + c
            })
            .collect()
    }
}

pub fn restrict_to_overlap<T: Copy>(values: ArrayView1<'_, T>, crop: Crop, map: &OverlapMap) -> Result<Array2<T>> {
    let n = map.grid_p * map.grid_p;
    if values.len() != n {
        return Err(Error::Shape(format!(
            "expected {n} per-patch values, got {}",
            values.len()
        )));
    }
    let gathered: Vec<T> = map.token_indices(crop).into_iter().map(|i| values[i]).collect();
    Ok(Array2::from_shape_vec((map.side, map.side), gathered).expect("side² entries"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array1;

    #[test]
    fn clip_b16_geometry() {
        let plan = make_crop_plan(14, 16, 1).unwrap();
        assert_eq!(plan.expanded_side_px, 240);
        assert_eq!(plan.crop_side_px, 224);
        assert_eq!(plan.crop2_origin, (16, 16));
        assert_eq!(plan.crop1_origin, (0, 0));
    }

    #[test]
    fn clip_l14_336_geometry() {
        let plan = make_crop_plan(24, 14, 1).unwrap();
        assert_eq!(plan.expanded_side_px, 350);
        assert_eq!(plan.crop_side_px, 336);
        assert_eq!(plan.crop2_origin, (14, 14));
    }

    #[test]
    fn rejects_empty_overlap() {
        assert!(make_crop_plan(4, 16, 4).is_err());
        assert!(make_crop_plan(4, 16, 5).is_err());
        assert!(make_crop_plan(4, 16, 0).is_err());
    }

    #[test]
    fn overlap_pairs() {
        let map = make_overlap_map(&make_crop_plan(4, 16, 1).unwrap());
        assert_eq!(map.len(), 9);
        assert_eq!(map.pairs[0], ((1, 1), (0, 0)));
        let map = make_overlap_map(&make_crop_plan(2, 16, 1).unwrap());
        assert_eq!(map.pairs, vec![((1, 1), (0, 0))]);
        for p in 2..9 {
            for s in 1..p {
                assert_eq!(OverlapMap::for_geometry(p, s).unwrap().len(), (p - s) * (p - s));
            }
        }
    }

    #[test]
    fn restrict_ramp() {
        let map = OverlapMap::for_geometry(4, 1).unwrap();
        let ramp = Array1::from_iter(0..16usize);
        let two = restrict_to_overlap(ramp.view(), Crop::Second, &map).unwrap();
        assert_eq!(
            two.iter().copied().collect::<Vec<_>>(),
            vec![0, 1, 2, 4, 5, 6, 8, 9, 10]
        );
        let one = restrict_to_overlap(ramp.view(), Crop::First, &map).unwrap();
        assert_eq!(
            one.iter().copied().collect::<Vec<_>>(),
            vec![5, 6, 7, 9, 10, 11, 13, 14, 15]
        );
        let constant = Array1::from_elem(16, 3.5);
        assert!(restrict_to_overlap(constant.view(), Crop::First, &map)
            .unwrap()
            .iter()
            .all(|v| *v == 3.5));
        assert!(restrict_to_overlap(Array1::<f64>::zeros(15).view(), Crop::First, &map).is_err());
    }

    #[test]
    fn plan_record_round_trip() {
        let plan = make_crop_plan(14, 16, 2).unwrap();
        let text = plan.to_record();
        assert!(text.contains("interpolation=bicubic"));
        assert_eq!(CropPlan::from_record(&text).unwrap(), plan);
        let tampered = text.replace("expanded_side_px=256", "expanded_side_px=255");
        assert!(CropPlan::from_record(&tampered).is_err());
    }
}
