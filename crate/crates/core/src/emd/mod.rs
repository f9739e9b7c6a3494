//! Earth Mover's Distance between distributions on a square patch grid.
//!
//! Ground cost is the Euclidean distance between `(row, col)` cell coordinates.
//! [`emd`] prunes empty cells and solves the remaining transportation problem
//! exactly with a network simplex; [`oracle::emd_oracle`] solves the same LP
//! with a dense tableau and exists to cross-check it on small grids.

pub mod oracle;
mod simplex;

use ndarray::ArrayView2;

use crate::error::{Error, Result};

pub use oracle::emd_oracle;

/// Total mass below this is treated as "no distribution".
pub const DEGENERATE_MASS: f64 = 1e-12;
/// Mass-balance tolerance.
pub const MASS_EPS: f64 = 1e-9;

/// Nonnegative mass on a `side × side` grid summing to one, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct GridDistribution {
    side: usize,
    mass: Vec<f64>,
}

impl GridDistribution {
    /// Wraps already-normalized mass; fails if entries are negative or do not sum to 1.
    pub fn new(side: usize, mass: Vec<f64>) -> Result<Self> {
        if mass.len() != side * side {
            return Err(Error::Shape(format!("{} cells for a {side}x{side} grid", mass.len())));
        }
        if let Some((index, &value)) = mass.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
            return Err(Error::NegativeMass { index, value });
        }
        let total: f64 = mass.iter().sum();
        if (total - 1.0).abs() > MASS_EPS {
            return Err(Error::InvalidArgument(format!(
                "distribution sums to {total}, expected 1"
            )));
        }
        Ok(GridDistribution { side, mass })
    }

    /// Unit mass on one cell.
    pub fn point(side: usize, row: usize, col: usize) -> Self {
        let mut mass = vec![0.0; side * side];
        mass[row * side + col] = 1.0;
        GridDistribution { side, mass }
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn mass(&self) -> &[f64] {
        &self.mass
    }

    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.mass[row * self.side + col]
    }

    /// Nonzero cells as `(flat index, mass)`.
    pub(crate) fn support(&self) -> Vec<(usize, f64)> {
        self.mass
            .iter()
            .enumerate()
            .filter(|(_, m)| **m > 0.0)
            .map(|(i, m)| (i, *m))
            .collect()
    }
}

/// Divides a nonnegative grid by its sum. `Ok(None)` when the total mass is
/// below [`DEGENERATE_MASS`]. Rounding residue goes to the largest cell.
pub fn normalize(raw: ArrayView2<'_, f64>) -> Result<Option<GridDistribution>> {
    let (rows, cols) = raw.dim();
    if rows != cols {
        return Err(Error::Shape(format!("grid must be square, got {rows}x{cols}")));
    }
    normalize_slice(rows, raw.iter().copied())
}

pub(crate) fn normalize_slice(side: usize, values: impl Iterator<Item = f64>) -> Result<Option<GridDistribution>> {
    let mut mass: Vec<f64> = values.collect();
    if mass.len() != side * side {
        return Err(Error::Shape(format!("{} cells for a {side}x{side} grid", mass.len())));
    }
    if let Some((index, &value)) = mass.iter().enumerate().find(|(_, v)| !(**v >= 0.0)) {
        return Err(Error::NegativeMass { index, value });
    }
    let total: f64 = mass.iter().sum();
    if !total.is_finite() {
        return Err(Error::InvalidArgument("grid mass is not finite".into()));
    }
    if total < DEGENERATE_MASS {
        return Ok(None);
    }
    mass.iter_mut().for_each(|m| *m /= total);
    let residual = 1.0 - mass.iter().sum::<f64>();
    if residual != 0.0 {
        let largest = mass
            .iter()
            .enumerate()
            .fold(0, |best, (i, m)| if *m > mass[best] { i } else { best });
        mass[largest] = (mass[largest] + residual).max(0.0);
    }
    Ok(Some(GridDistribution { side, mass }))
}

/// Euclidean distance between the cells with flat indices `a` and `b`.
#[inline]
pub fn ground_cost(side: usize, a: usize, b: usize) -> f64 {
    let dr = (a / side) as f64 - (b / side) as f64;
    let dc = (a % side) as f64 - (b % side) as f64;
    (dr * dr + dc * dc).sqrt()
}

/// Largest possible EMD on a `side × side` grid.
pub fn grid_diameter(side: usize) -> f64 {
    side.saturating_sub(1) as f64 * std::f64::consts::SQRT_2
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Flow {
    pub from: (usize, usize),
    pub to: (usize, usize),
    pub mass: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    pub flows: Vec<Flow>,
    pub total_cost: f64,
}

fn check_pair(a: &GridDistribution, b: &GridDistribution) -> Result<()> {
    if a.side != b.side {
        return Err(Error::Shape(format!("grid sides differ: {} vs {}", a.side, b.side)));
    }
    Ok(())
}

/// Optimal transport plan between `a` and `b`.
pub fn transport(a: &GridDistribution, b: &GridDistribution) -> Result<TransportPlan> {
    check_pair(a, b)?;
    let side = a.side;
    let sources = a.support();
    let sinks = b.support();
    let supply: Vec<f64> = sources.iter().map(|(_, m)| *m).collect();
    let demand: Vec<f64> = sinks.iter().map(|(_, m)| *m).collect();
    let solution = simplex::solve(&supply, &demand, |i, j| ground_cost(side, sources[i].0, sinks[j].0));
    let coord = |k: usize| (k / side, k % side);
    let mut total_cost = 0.0;
    let mut flows = Vec::with_capacity(solution.len());
    for (i, j, mass) in solution {
        if mass <= 0.0 {
            continue;
        }
        let (from, to) = (sources[i].0, sinks[j].0);
        total_cost += mass * ground_cost(side, from, to);
        flows.push(Flow {
            from: coord(from),
            to: coord(to),
            mass,
        });
    }
    flows.sort_by_key(|x| (x.from, x.to));
    Ok(TransportPlan { flows, total_cost })
}

/// Exact EMD between two normalized grid distributions.
pub fn emd(a: &GridDistribution, b: &GridDistribution) -> Result<f64> {
    Ok(transport(a, b)?.total_cost)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn dist(side: usize, mass: &[f64]) -> GridDistribution {
        GridDistribution::new(side, mass.to_vec()).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(array![[2.0, 0.0], [0.0, 2.0]].view()).unwrap().unwrap();
        assert_eq!(n.mass(), &[0.5, 0.0, 0.0, 0.5]);
        assert!(normalize(array![[0.0, 0.0], [0.0, 0.0]].view()).unwrap().is_none());
        let already = array![[0.25, 0.125], [0.5, 0.125]];
        let n = normalize(already.view()).unwrap().unwrap();
        assert_eq!(n.mass(), already.as_slice().unwrap());
        assert!(matches!(
            normalize(array![[1.0, -0.5], [0.0, 0.0]].view()),
            Err(Error::NegativeMass { index: 1, .. })
        ));
    }

    #[test]
    fn normalized_mass_sums_to_one() {
        let raw = array![[0.1, 0.2, 0.3], [0.7, 0.0, 1e-9], [3.3, 0.01, 0.4]];
        let n = normalize(raw.view()).unwrap().unwrap();
        assert!((n.mass().iter().sum::<f64>() - 1.0).abs() <= 1e-15);
    }

    #[test]
    fn identical_is_zero() {
        let a = dist(3, &[0.1, 0.2, 0.0, 0.0, 0.3, 0.1, 0.05, 0.05, 0.2]);
        assert_eq!(emd(&a, &a).unwrap(), 0.0);
    }

    #[test]
    fn point_masses() {
        let a = GridDistribution::point(5, 0, 0);
        let b = GridDistribution::point(5, 3, 4);
        assert_eq!(emd(&a, &b).unwrap(), 5.0);
        let plan = transport(&a, &b).unwrap();
        assert_eq!(
            plan.flows,
            vec![Flow {
                from: (0, 0),
                to: (3, 4),
                mass: 1.0
            }]
        );
    }

    #[test]
    fn one_cell_translation() {
        let a = dist(
            4,
            &[
                0.5, 0.25, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        );
        let b = dist(
            4,
            &[
                0.0, 0.5, 0.25, 0.0, 0.0, 0.25, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0,
            ],
        );
        assert_eq!(emd(&a, &b).unwrap(), 1.0);
    }

    #[test]
    fn plan_marginals_match() {
        let a = dist(3, &[0.1, 0.2, 0.0, 0.0, 0.3, 0.1, 0.05, 0.05, 0.2]);
        let b = dist(3, &[0.3, 0.0, 0.1, 0.1, 0.0, 0.2, 0.0, 0.2, 0.1]);
        let plan = transport(&a, &b).unwrap();
        let mut out = [0.0; 9];
        let mut inn = [0.0; 9];
        let mut cost = 0.0;
        for f in &plan.flows {
            assert!(f.mass >= 0.0);
            out[f.from.0 * 3 + f.from.1] += f.mass;
            inn[f.to.0 * 3 + f.to.1] += f.mass;
            let d = (((f.from.0 as f64 - f.to.0 as f64).powi(2)) + (f.from.1 as f64 - f.to.1 as f64).powi(2)).sqrt();
            cost += f.mass * d;
        }
        for k in 0..9 {
            assert!((out[k] - a.mass()[k]).abs() < 1e-9);
            assert!((inn[k] - b.mass()[k]).abs() < 1e-9);
        }
        assert!((cost - plan.total_cost).abs() < 1e-12);
    }

    #[test]
    fn side_mismatch_rejected() {
        let a = GridDistribution::point(3, 0, 0);
        let b = GridDistribution::point(4, 0, 0);
        assert!(matches!(emd(&a, &b), Err(Error::Shape(_))));
    }

    #[test]
    fn new_rejects_unnormalized() {
        assert!(GridDistribution::new(2, vec![0.5, 0.5, 0.5, 0.0]).is_err());
        assert!(GridDistribution::new(2, vec![1.5, -0.5, 0.0, 0.0]).is_err());
        assert!(GridDistribution::new(2, vec![1.0, 0.0, 0.0]).is_err());
    }
}
