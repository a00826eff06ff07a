//! Uniform tensor grids on boxes in R^N (N = 1, 2, 3) with Dirichlet boundary.
//!
//! Interior nodes along axis d sit at `a_d + (i+1) h_d`, i = 0..n_d-1, with
//! spacing `h_d = (b_d - a_d)/(n_d + 1)`. Boundary nodes carry an implicit
//! value of 0 everywhere, so grid functions model compactly supported test
//! functions. Node ordering is row-major with axis 0 fastest.

use std::fmt;
use std::io::{BufRead, BufReader, Read, Write};

use thiserror::Error;

pub const MAX_DIM: usize = 3;

/// Default cap on interior node count, so `refine` cannot blow up memory.
pub const DEFAULT_NODE_BUDGET: usize = 1 << 27;

#[derive(Debug, Error)]
pub enum MeshError {
    #[error("dim must be 1, 2 or 3, got {0}")]
    BadDim(usize),
    #[error("axis {axis}: degenerate extents [{lo}, {hi}]")]
    DegenerateExtents { axis: usize, lo: f64, hi: f64 },
    #[error("axis {axis}: interior node count must be >= 1")]
    EmptyAxis { axis: usize },
    #[error("refinement would exceed the node budget of {budget} nodes")]
    NodeBudget { budget: usize },
    #[error("box captures no grid nodes")]
    EmptyMask,
    #[error("box [{lo}, {hi}] on axis {axis} is not contained in the grid extents")]
    BoxOutside { axis: usize, lo: f64, hi: f64 },
    #[error("exhaustion with m = {m} leaves the innermost member empty")]
    ExhaustionTooDeep { m: usize },
    #[error("m must be >= 1")]
    ZeroExhaustion,
    #[error("grid function length {got} does not match grid node count {want}")]
    LengthMismatch { got: usize, want: usize },
    #[error("non-finite value at node {0}")]
    NonFinite(usize),
    #[error("grid mismatch between operands")]
    GridMismatch,
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error in grid-text input: {0}")]
    Parse(String),
}

/// Uniform tensor grid with Dirichlet boundary.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    dim: usize,
    extents: [(f64, f64); MAX_DIM],
    n: [usize; MAX_DIM],
    h: [f64; MAX_DIM],
}

impl Grid {
    /// Interior node counts per axis; unused axes are 1 so products stay valid.
    pub fn new(dim: usize, extents: &[(f64, f64)], n: &[usize]) -> Result<Grid, MeshError> {
        if dim < 1 || dim > MAX_DIM {
            return Err(MeshError::BadDim(dim));
        }
        assert_eq!(extents.len(), dim, "extents length must equal dim");
        assert_eq!(n.len(), dim, "n length must equal dim");
        let mut ext = [(0.0, 1.0); MAX_DIM];
        let mut nn = [1usize; MAX_DIM];
        let mut hh = [1.0f64; MAX_DIM];
        for d in 0..dim {
            let (lo, hi) = extents[d];
            if !(lo.is_finite() && hi.is_finite()) || hi <= lo {
                return Err(MeshError::DegenerateExtents { axis: d, lo, hi });
            }
            if n[d] == 0 {
                return Err(MeshError::EmptyAxis { axis: d });
            }
            ext[d] = (lo, hi);
            nn[d] = n[d];
            hh[d] = (hi - lo) / (n[d] as f64 + 1.0);
        }
        Ok(Grid { dim, extents: ext, n: nn, h: hh })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn extents(&self) -> &[(f64, f64)] {
        &self.extents[..self.dim]
    }

    pub fn n(&self) -> &[usize] {
        &self.n[..self.dim]
    }

    pub fn h(&self) -> &[f64] {
        &self.h[..self.dim]
    }

    /// Volume of one cell, `prod h_d`.
    pub fn cell_volume(&self) -> f64 {
        self.h[..self.dim].iter().product()
    }

    pub fn node_count(&self) -> usize {
        self.n[..self.dim].iter().product()
    }

    /// Coordinate of interior node `i` (0-based) along axis `d`.
    pub fn coord(&self, d: usize, i: usize) -> f64 {
        self.extents[d].0 + (i as f64 + 1.0) * self.h[d]
    }

    /// Multi-index -> linear index, axis 0 fastest.
    pub fn index(&self, ix: &[usize]) -> usize {
        let mut lin = 0usize;
        for d in (0..self.dim).rev() {
            lin = lin * self.n[d] + ix[d];
        }
        lin
    }

    /// Linear index -> multi-index.
    pub fn multi_index(&self, mut lin: usize) -> [usize; MAX_DIM] {
        let mut ix = [0usize; MAX_DIM];
        for d in 0..self.dim {
            ix[d] = lin % self.n[d];
            lin /= self.n[d];
        }
        ix
    }

    /// Coordinates of a node given by linear index.
    pub fn node_coords(&self, lin: usize) -> [f64; MAX_DIM] {
        let ix = self.multi_index(lin);
        let mut x = [0.0; MAX_DIM];
        for d in 0..self.dim {
            x[d] = self.coord(d, ix[d]);
        }
        x
    }

    /// Per-axis refinement n' = 2n + 1, so h' = h/2 and coarse nodes are
    /// a subset of fine nodes.
    pub fn refine(&self) -> Result<Grid, MeshError> {
        self.refine_with_budget(DEFAULT_NODE_BUDGET)
    }

    pub fn refine_with_budget(&self, budget: usize) -> Result<Grid, MeshError> {
        let mut nn = Vec::with_capacity(self.dim);
        let mut count = 1usize;
        for d in 0..self.dim {
            let n2 = 2 * self.n[d] + 1;
            count = count.checked_mul(n2).ok_or(MeshError::NodeBudget { budget })?;
            nn.push(n2);
        }
        if count > budget {
            return Err(MeshError::NodeBudget { budget });
        }
        Grid::new(self.dim, self.extents(), &nn)
    }

    /// Nested sub-domain masks Omega_1 c Omega_2 c ... c Omega_m = full interior.
    /// Omega_k is the box shrunk by margin (L_d/2) * (m-k)/m per side, snapped
    /// to nodes.
    pub fn exhaustion(&self, m: usize) -> Result<Vec<Mask>, MeshError> {
        if m == 0 {
            return Err(MeshError::ZeroExhaustion);
        }
        let mut masks = Vec::with_capacity(m);
        for k in 1..=m {
            let shrink = (m - k) as f64 / m as f64;
            let mut boxdef = Vec::with_capacity(self.dim);
            for d in 0..self.dim {
                let (lo, hi) = self.extents[d];
                let margin = 0.5 * (hi - lo) * shrink;
                boxdef.push((lo + margin, hi - margin));
            }
            let mask = self
                .compact_mask(&boxdef)
                .map_err(|_| MeshError::ExhaustionTooDeep { m })?;
            masks.push(mask);
        }
        Ok(masks)
    }

    /// Mask of interior nodes whose coordinates lie in the closed box.
    pub fn compact_mask(&self, boxdef: &[(f64, f64)]) -> Result<Mask, MeshError> {
        assert_eq!(boxdef.len(), self.dim, "box must have one interval per axis");
        for d in 0..self.dim {
            let (lo, hi) = boxdef[d];
            let (glo, ghi) = self.extents[d];
            // allow node-snapping slack of one ulp-scale
            let tol = 1e-12 * (ghi - glo).abs();
            if lo < glo - tol || hi > ghi + tol || hi < lo {
                return Err(MeshError::BoxOutside { axis: d, lo, hi });
            }
        }
        let mut bits = vec![false; self.node_count()];
        let mut count = 0usize;
        for lin in 0..self.node_count() {
            let x = self.node_coords(lin);
            let mut inside = true;
            for d in 0..self.dim {
                let tol = 1e-12 * (boxdef[d].1 - boxdef[d].0).abs().max(self.h[d]);
                if x[d] < boxdef[d].0 - tol || x[d] > boxdef[d].1 + tol {
                    inside = false;
                    break;
                }
            }
            if inside {
                bits[lin] = true;
                count += 1;
            }
        }
        if count == 0 {
            return Err(MeshError::EmptyMask);
        }
        Ok(Mask { bits, count, cell_volume: self.cell_volume() })
    }

    /// Mask of interior nodes inside the closed ball |x - center| <= radius.
    pub fn ball_mask(&self, center: &[f64], radius: f64) -> Result<Mask, MeshError> {
        assert_eq!(center.len(), self.dim);
        let mut bits = vec![false; self.node_count()];
        let mut count = 0usize;
        let r2 = radius * radius;
        for lin in 0..self.node_count() {
            let x = self.node_coords(lin);
            let mut d2 = 0.0;
            for d in 0..self.dim {
                d2 += (x[d] - center[d]) * (x[d] - center[d]);
            }
            if d2 <= r2 {
                bits[lin] = true;
                count += 1;
            }
        }
        if count == 0 {
            return Err(MeshError::EmptyMask);
        }
        Ok(Mask { bits, count, cell_volume: self.cell_volume() })
    }

    /// Mask covering the full interior.
    pub fn full_mask(&self) -> Mask {
        let nc = self.node_count();
        Mask { bits: vec![true; nc], count: nc, cell_volume: self.cell_volume() }
    }

    /// Closest interior node index to a point, per axis; None when the point
    /// falls outside the open extents.
    pub fn nearest_node(&self, x: &[f64]) -> Option<usize> {
        let mut ix = [0usize; MAX_DIM];
        for d in 0..self.dim {
            let (lo, hi) = self.extents[d];
            if x[d] <= lo || x[d] >= hi {
                return None;
            }
            let f = (x[d] - lo) / self.h[d] - 1.0;
            let i = f.round().max(0.0) as usize;
            ix[d] = i.min(self.n[d] - 1);
        }
        Some(self.index(&ix[..self.dim]))
    }
}

/// Subset of interior nodes, used for compact sets K and exhaustion members.
#[derive(Debug, Clone, PartialEq)]
pub struct Mask {
    bits: Vec<bool>,
    count: usize,
    cell_volume: f64,
}

impl Mask {
    pub(crate) fn from_bits(bits: Vec<bool>, cell_volume: f64) -> Mask {
        let count = bits.iter().filter(|b| **b).count();
        Mask { bits, count, cell_volume }
    }

    pub fn contains(&self, lin: usize) -> bool {
        self.bits[lin]
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn count(&self) -> usize {
        self.count
    }

    /// Sum of cell volumes over set nodes.
    pub fn volume(&self) -> f64 {
        self.count as f64 * self.cell_volume
    }

    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.bits.len() == other.bits.len()
            && self.bits.iter().zip(&other.bits).all(|(a, b)| !a || *b)
    }

    pub fn iter_set(&self) -> impl Iterator<Item = usize> + '_ {
        self.bits.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i)
    }

    pub fn union(&self, other: &Mask) -> Mask {
        assert_eq!(self.bits.len(), other.bits.len());
        let bits: Vec<bool> = self.bits.iter().zip(&other.bits).map(|(a, b)| *a || *b).collect();
        let count = bits.iter().filter(|b| **b).count();
        Mask { bits, count, cell_volume: self.cell_volume }
    }

    pub fn intersection_count(&self, other: &Mask) -> usize {
        self.bits.iter().zip(&other.bits).filter(|(a, b)| **a && **b).count()
    }
}

/// Real values on the interior nodes of a grid. Boundary values are an
/// implicit 0.
#[derive(Debug, Clone, PartialEq)]
pub struct GridFunction {
    grid: Grid,
    values: Vec<f64>,
}

impl GridFunction {
    pub fn new(grid: Grid, values: Vec<f64>) -> Result<GridFunction, MeshError> {
        if values.len() != grid.node_count() {
            return Err(MeshError::LengthMismatch { got: values.len(), want: grid.node_count() });
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(MeshError::NonFinite(i));
        }
        Ok(GridFunction { grid, values })
    }

    pub fn zeros(grid: &Grid) -> GridFunction {
        GridFunction { grid: grid.clone(), values: vec![0.0; grid.node_count()] }
    }

    pub fn constant(grid: &Grid, c: f64) -> GridFunction {
        GridFunction { grid: grid.clone(), values: vec![c; grid.node_count()] }
    }

    /// Sample a function of node coordinates.
    pub fn from_fn(grid: &Grid, mut f: impl FnMut(&[f64]) -> f64) -> GridFunction {
        let values = (0..grid.node_count())
            .map(|lin| {
                let x = grid.node_coords(lin);
                f(&x[..grid.dim()])
            })
            .collect();
        GridFunction { grid: grid.clone(), values }
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.values {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// `sum_K |xi| * cellvol`.
    pub fn l1_on(&self, mask: &Mask) -> f64 {
        let cv = self.grid.cell_volume();
        mask.iter_set().map(|i| self.values[i].abs()).sum::<f64>() * cv
    }

    /// `sum xi^2 * cellvol` over the full interior.
    pub fn l2_sq(&self) -> f64 {
        let cv = self.grid.cell_volume();
        self.values.iter().map(|v| v * v).sum::<f64>() * cv
    }

    /// Write the grid-text format:
    /// line 1 = `dim n1 [n2 [n3]] a1 b1 [a2 b2 [a3 b3]]`,
    /// then one value per interior node in row-major order.
    pub fn write_text<W: Write>(&self, mut w: W) -> Result<(), MeshError> {
        let g = &self.grid;
        let mut header = format!("{}", g.dim());
        for d in 0..g.dim() {
            header.push_str(&format!(" {}", g.n()[d]));
        }
        for d in 0..g.dim() {
            header.push_str(&format!(" {:.17e} {:.17e}", g.extents()[d].0, g.extents()[d].1));
        }
        writeln!(w, "{}", header)?;
        for v in &self.values {
            writeln!(w, "{:.17e}", v)?;
        }
        Ok(())
    }

    pub fn read_text<R: Read>(r: R) -> Result<GridFunction, MeshError> {
        let mut lines = BufReader::new(r).lines();
        let header = lines
            .next()
            .ok_or_else(|| MeshError::Parse("empty input".into()))??;
        let tok: Vec<&str> = header.split_whitespace().collect();
        if tok.is_empty() {
            return Err(MeshError::Parse("empty header".into()));
        }
        let dim: usize = tok[0]
            .parse()
            .map_err(|_| MeshError::Parse(format!("bad dim {:?}", tok[0])))?;
        if dim < 1 || dim > MAX_DIM {
            return Err(MeshError::BadDim(dim));
        }
        if tok.len() != 1 + dim + 2 * dim {
            return Err(MeshError::Parse(format!(
                "header must have {} fields for dim {}, got {}",
                1 + 3 * dim,
                dim,
                tok.len()
            )));
        }
        let mut n = Vec::with_capacity(dim);
        for d in 0..dim {
            n.push(
                tok[1 + d]
                    .parse::<usize>()
                    .map_err(|_| MeshError::Parse(format!("bad node count {:?}", tok[1 + d])))?,
            );
        }
        let mut extents = Vec::with_capacity(dim);
        for d in 0..dim {
            let lo = tok[1 + dim + 2 * d]
                .parse::<f64>()
                .map_err(|_| MeshError::Parse("bad extent".into()))?;
            let hi = tok[1 + dim + 2 * d + 1]
                .parse::<f64>()
                .map_err(|_| MeshError::Parse("bad extent".into()))?;
            extents.push((lo, hi));
        }
        let grid = Grid::new(dim, &extents, &n)?;
        let mut values = Vec::with_capacity(grid.node_count());
        for line in lines {
            let line = line?;
            let t = line.trim();
            if t.is_empty() {
                continue;
            }
            values.push(
                t.parse::<f64>()
                    .map_err(|_| MeshError::Parse(format!("bad value {:?}", t)))?,
            );
        }
        GridFunction::new(grid, values)
    }
}

impl fmt::Display for Grid {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "grid dim={} n={:?} h={:?}", self.dim, self.n(), self.h())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn build_grid_1d_nodes() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[3]).unwrap();
        assert_eq!(g.h()[0], 0.25);
        let xs: Vec<f64> = (0..3).map(|i| g.coord(0, i)).collect();
        assert_eq!(xs, vec![0.25, 0.5, 0.75]);
    }

    #[test]
    fn build_grid_2d_tensor() {
        let g = Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[3, 3]).unwrap();
        assert_eq!(g.node_count(), 9);
        assert_eq!(g.h(), &[0.25, 0.25]);
    }

    #[test]
    fn build_grid_rejects_zero_nodes() {
        assert!(matches!(
            Grid::new(1, &[(0.0, 1.0)], &[0]),
            Err(MeshError::EmptyAxis { axis: 0 })
        ));
    }

    #[test]
    fn build_grid_rejects_degenerate_extents() {
        assert!(Grid::new(1, &[(1.0, 1.0)], &[3]).is_err());
        assert!(Grid::new(1, &[(2.0, 1.0)], &[3]).is_err());
    }

    #[test]
    fn refine_2n_plus_1() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[3]).unwrap();
        let f = g.refine().unwrap();
        assert_eq!(f.n()[0], 7);
        assert_eq!(f.h()[0], 0.125);
        let ff = f.refine().unwrap();
        assert_eq!(ff.h()[0], g.h()[0] / 4.0);
    }

    #[test]
    fn refine_nests_coarse_nodes() {
        let g = Grid::new(2, &[(0.0, 1.0), (-1.0, 2.0)], &[5, 4]).unwrap();
        let f = g.refine().unwrap();
        for d in 0..2 {
            for i in 0..g.n()[d] {
                let xc = g.coord(d, i);
                // coarse node i maps to fine node 2i+1
                let xf = f.coord(d, 2 * i + 1);
                assert!((xc - xf).abs() <= 2.0 * f64::EPSILON * xc.abs().max(1.0));
            }
        }
    }

    #[test]
    fn refine_budget_overflow() {
        let g = Grid::new(3, &[(0.0, 1.0), (0.0, 1.0), (0.0, 1.0)], &[300, 300, 300]).unwrap();
        assert!(matches!(g.refine(), Err(MeshError::NodeBudget { .. })));
    }

    #[test]
    fn exhaustion_nested_and_full() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[15]).unwrap();
        let masks = g.exhaustion(3).unwrap();
        assert_eq!(masks.len(), 3);
        for k in 0..2 {
            assert!(masks[k].is_subset_of(&masks[k + 1]));
            assert!(masks[k].count() < masks[k + 1].count());
        }
        assert_eq!(masks[2].count(), 15);
        // innermost approximates (1/3, 2/3)
        for lin in masks[0].iter_set() {
            let x = g.node_coords(lin)[0];
            assert!(x >= 1.0 / 3.0 - 1e-9 && x <= 2.0 / 3.0 + 1e-9);
        }
    }

    #[test]
    fn exhaustion_m1_is_identity() {
        let g = Grid::new(2, &[(0.0, 1.0), (0.0, 1.0)], &[7, 7]).unwrap();
        let masks = g.exhaustion(1).unwrap();
        assert_eq!(masks[0].count(), g.node_count());
    }

    #[test]
    fn exhaustion_too_deep_errors() {
        // even node count: no center node survives a deep shrink
        let g = Grid::new(1, &[(0.0, 1.0)], &[4]).unwrap();
        assert!(g.exhaustion(50).is_err());
    }

    #[test]
    fn compact_mask_single_node() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[3]).unwrap();
        let m = g.compact_mask(&[(0.4, 0.6)]).unwrap();
        assert_eq!(m.count(), 1);
        assert!((m.volume() - 0.25).abs() < 1e-15);
        let lin = m.iter_set().next().unwrap();
        assert_eq!(g.node_coords(lin)[0], 0.5);
    }

    #[test]
    fn compact_mask_full_box() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[3]).unwrap();
        let m = g.compact_mask(&[(0.0, 1.0)]).unwrap();
        assert_eq!(m.count(), 3);
    }

    #[test]
    fn compact_mask_empty_errors() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[3]).unwrap();
        assert!(matches!(g.compact_mask(&[(0.9, 0.95)]), Err(MeshError::EmptyMask)));
    }

    #[test]
    fn mask_volume_additive_over_disjoint() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[15]).unwrap();
        let a = g.compact_mask(&[(0.0, 0.3)]).unwrap();
        let b = g.compact_mask(&[(0.7, 1.0)]).unwrap();
        assert_eq!(a.intersection_count(&b), 0);
        let u = a.union(&b);
        assert!((u.volume() - (a.volume() + b.volume())).abs() < 1e-14);
    }

    #[test]
    fn grid_text_round_trip() {
        let g = Grid::new(2, &[(0.0, 1.0), (-0.5, 0.25)], &[5, 3]).unwrap();
        let f = GridFunction::from_fn(&g, |x| (x[0] * 3.1).sin() + x[1] / 7.0);
        let mut buf = Vec::new();
        f.write_text(&mut buf).unwrap();
        let f2 = GridFunction::read_text(&buf[..]).unwrap();
        assert_eq!(f.grid().n(), f2.grid().n());
        for (a, b) in f.values().iter().zip(f2.values()) {
            assert_eq!(a, b, "17 significant digits round-trips f64 exactly");
        }
    }

    #[test]
    fn grid_function_rejects_non_finite() {
        let g = Grid::new(1, &[(0.0, 1.0)], &[3]).unwrap();
        assert!(GridFunction::new(g, vec![0.0, f64::NAN, 1.0]).is_err());
    }
}
