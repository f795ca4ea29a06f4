//! Uniform 1D grids, P1 nodal fields, element quadrature and banded solvers.
//!
//! Everything downstream works on continuous piecewise-linear fields over a
//! uniform partition of `(0, h)`. Element integrals use two-point Gauss
//! quadrature, which is exact for cubic integrands and therefore for products
//! of two P1 fields with a P1 weight.

use std::ops::{Deref, DerefMut};

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Two-point Gauss rule on the reference element `[0, 1]`.
pub const GAUSS2_POINTS: [f64; 2] = [0.211_324_865_405_187_1, 0.788_675_134_594_812_9];
pub const GAUSS2_WEIGHTS: [f64; 2] = [0.5, 0.5];

/// Three-point Gauss rule on `[0, 1]`, exact up to degree five.
pub const GAUSS3_POINTS: [f64; 3] = [0.112_701_665_379_258_3, 0.5, 0.887_298_334_620_741_7];
pub const GAUSS3_WEIGHTS: [f64; 3] = [5.0 / 18.0, 8.0 / 18.0, 5.0 / 18.0];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("grid needs at least 2 elements, got {0}")]
    TooFewElements(usize),
    #[error("domain length must be positive and finite, got {0}")]
    BadLength(f64),
    #[error("time grid needs at least one step and a positive end time (end = {end}, steps = {n_step})")]
    BadTimeGrid { end: f64, n_step: usize },
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
    #[error("singular pivot at row {row}")]
    SingularPivot { row: usize },
}

/// Uniform partition of `(0, h)` into `n_elem` elements.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialGrid {
    length: f64,
    n_elem: usize,
}

impl SpatialGrid {
    pub fn new(length: f64, n_elem: usize) -> Result<Self, GridError> {
        if n_elem < 2 {
            return Err(GridError::TooFewElements(n_elem));
        }
        if !(length.is_finite() && length > 0.0) {
            return Err(GridError::BadLength(length));
        }
        Ok(Self { length, n_elem })
    }

    pub fn length(&self) -> f64 {
        self.length
    }

    pub fn n_elem(&self) -> usize {
        self.n_elem
    }

    pub fn n_nodes(&self) -> usize {
        self.n_elem + 1
    }

    pub fn dz(&self) -> f64 {
        self.length / self.n_elem as f64
    }

    /// Coordinate of node `i`; the last node is exactly `h`.
    pub fn node(&self, i: usize) -> f64 {
        if i == self.n_elem {
            self.length
        } else {
            i as f64 * self.dz()
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..self.n_nodes()).map(|i| self.node(i)).collect()
    }

    pub fn check_len(&self, len: usize) -> Result<(), GridError> {
        if len != self.n_nodes() {
            return Err(GridError::DimensionMismatch {
                expected: self.n_nodes(),
                got: len,
            });
        }
        Ok(())
    }
}

/// Uniform partition of `(0, T)` into `n_step` steps.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    end: f64,
    n_step: usize,
}

impl TimeGrid {
    pub fn new(end: f64, n_step: usize) -> Result<Self, GridError> {
        if n_step == 0 || !(end.is_finite() && end > 0.0) {
            return Err(GridError::BadTimeGrid { end, n_step });
        }
        Ok(Self { end, n_step })
    }

    pub fn end(&self) -> f64 {
        self.end
    }

    pub fn n_step(&self) -> usize {
        self.n_step
    }

    pub fn n_levels(&self) -> usize {
        self.n_step + 1
    }

    pub fn dt(&self) -> f64 {
        self.end / self.n_step as f64
    }

    pub fn time(&self, n: usize) -> f64 {
        if n == self.n_step {
            self.end
        } else {
            n as f64 * self.dt()
        }
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.n_levels()).map(|n| self.time(n)).collect()
    }

    /// Trapezoid weights for integrating a level-sampled signal over `(0, T)`.
    pub fn trapezoid_weights(&self) -> Vec<f64> {
        let dt = self.dt();
        let mut w = vec![dt; self.n_levels()];
        w[0] = 0.5 * dt;
        w[self.n_step] = 0.5 * dt;
        w
    }
}

/// Nodal values of a continuous piecewise-linear field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodalField(pub Vec<f64>);

impl NodalField {
    pub fn zeros(grid: &SpatialGrid) -> Self {
        Self(vec![0.0; grid.n_nodes()])
    }

    pub fn constant(grid: &SpatialGrid, c: f64) -> Self {
        Self(vec![c; grid.n_nodes()])
    }

    pub fn from_fn(grid: &SpatialGrid, f: impl Fn(f64) -> f64) -> Self {
        Self(grid.nodes().into_iter().map(f).collect())
    }

    /// Wraps values after checking length and finiteness.
    pub fn new(grid: &SpatialGrid, values: Vec<f64>) -> Result<Self, GridError> {
        grid.check_len(values.len())?;
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self(values))
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for NodalField {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for NodalField {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major `(level, node)` array holding one nodal field per time level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeArray {
    n_nodes: usize,
    n_levels: usize,
    data: Vec<f64>,
}

impl SpaceTimeArray {
    pub fn zeros(n_nodes: usize, n_levels: usize) -> Self {
        Self {
            n_nodes,
            n_levels,
            data: vec![0.0; n_nodes * n_levels],
        }
    }

    pub fn from_fn(grid: &SpatialGrid, time: &TimeGrid, f: impl Fn(f64, f64) -> f64) -> Self {
        let mut out = Self::zeros(grid.n_nodes(), time.n_levels());
        for n in 0..time.n_levels() {
            let t = time.time(n);
            for (i, slot) in out.row_mut(n).iter_mut().enumerate() {
                *slot = f(grid.node(i), t);
            }
        }
        out
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, GridError> {
        let n_nodes = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(n_nodes * rows.len());
        for r in rows {
            if r.len() != n_nodes {
                return Err(GridError::DimensionMismatch {
                    expected: n_nodes,
                    got: r.len(),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            n_nodes,
            n_levels: rows.len(),
            data,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn n_levels(&self) -> usize {
        self.n_levels
    }

    pub fn row(&self, n: usize) -> &[f64] {
        &self.data[n * self.n_nodes..(n + 1) * self.n_nodes]
    }

    pub fn row_mut(&mut self, n: usize) -> &mut [f64] {
        &mut self.data[n * self.n_nodes..(n + 1) * self.n_nodes]
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, n: usize, i: usize) -> f64 {
        self.data[n * self.n_nodes + i]
    }

    pub fn same_shape(&self, other: &Self) -> bool {
        self.n_nodes == other.n_nodes && self.n_levels == other.n_levels
    }

    pub fn scaled(&self, s: f64) -> Self {
        let mut out = self.clone();
        out.data.iter_mut().for_each(|v| *v *= s);
        out
    }

    /// `self + s * other`
    pub fn axpy(&self, s: f64, other: &Self) -> Self {
        debug_assert!(self.same_shape(other));
        let mut out = self.clone();
        for (a, b) in out.data.iter_mut().zip(&other.data) {
            *a += s * b;
        }
        out
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Tridiagonal matrix stored by diagonals; `sub[0]` and `sup[n - 1]` are unused.
#[derive(Debug, Clone, PartialEq)]
pub struct Tridiagonal {
    pub sub: Vec<f64>,
    pub main: Vec<f64>,
    pub sup: Vec<f64>,
}

impl Tridiagonal {
    pub fn zeros(n: usize) -> Self {
        Self {
            sub: vec![0.0; n],
            main: vec![0.0; n],
            sup: vec![0.0; n],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        m.main.iter_mut().for_each(|d| *d = 1.0);
        m
    }

    pub fn from_diagonals(sub: Vec<f64>, main: Vec<f64>, sup: Vec<f64>) -> Result<Self, GridError> {
        let n = main.len();
        for len in [sub.len(), sup.len()] {
            if len != n {
                return Err(GridError::DimensionMismatch { expected: n, got: len });
            }
        }
        Ok(Self { sub, main, sup })
    }

    pub fn dim(&self) -> usize {
        self.main.len()
    }

    pub fn mul_vec(&self, x: &[f64]) -> Vec<f64> {
        let n = self.dim();
        assert_eq!(x.len(), n, "tridiagonal product dimension");
        (0..n)
            .map(|i| {
                let mut s = self.main[i] * x[i];
                if i > 0 {
                    s += self.sub[i] * x[i - 1];
                }
                if i + 1 < n {
                    s += self.sup[i] * x[i + 1];
                }
                s
            })
            .collect()
    }

    /// `self + s * other`
    pub fn add_scaled(&self, s: f64, other: &Tridiagonal) -> Tridiagonal {
        let zip = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x + s * y).collect();
        Tridiagonal {
            sub: zip(&self.sub, &other.sub),
            main: zip(&self.main, &other.main),
            sup: zip(&self.sup, &other.sup),
        }
    }

    pub fn scaled(&self, s: f64) -> Tridiagonal {
        Tridiagonal::zeros(self.dim()).add_scaled(s, self)
    }

    /// Replaces row `i` by the identity row (Dirichlet imposition).
    pub fn set_identity_row(&mut self, i: usize) {
        self.sub[i] = 0.0;
        self.sup[i] = 0.0;
        self.main[i] = 1.0;
    }

    pub fn row_sums(&self) -> Vec<f64> {
        self.mul_vec(&vec![1.0; self.dim()])
    }

    pub fn total(&self) -> f64 {
        let n = self.dim();
        let off: f64 = self.sub[1..].iter().sum::<f64>() + self.sup[..n - 1].iter().sum::<f64>();
        self.main.iter().sum::<f64>() + off
    }

    /// Infinity norm (max absolute row sum).
    pub fn norm_inf(&self) -> f64 {
        let n = self.dim();
        (0..n)
            .map(|i| {
                let mut s = self.main[i].abs();
                if i > 0 {
                    s += self.sub[i].abs();
                }
                if i + 1 < n {
                    s += self.sup[i].abs();
                }
                s
            })
            .fold(0.0, f64::max)
    }

    pub fn is_symmetric(&self, tol: f64) -> bool {
        (1..self.dim()).all(|i| (self.sub[i] - self.sup[i - 1]).abs() <= tol)
    }

    pub fn solve(&self, rhs: &[f64]) -> Result<Vec<f64>, GridError> {
        solve_tridiagonal(self, rhs)
    }
}

/// Thomas elimination without pivoting.
pub fn solve_tridiagonal(a: &Tridiagonal, rhs: &[f64]) -> Result<Vec<f64>, GridError> {
    let n = a.dim();
    if rhs.len() != n {
        return Err(GridError::DimensionMismatch {
            expected: n,
            got: rhs.len(),
        });
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let scale = a.norm_inf().max(f64::MIN_POSITIVE);
    let tiny = scale * 1e-14;
    let mut c = vec![0.0; n];
    let mut d = vec![0.0; n];
    let mut piv = a.main[0];
    if piv.abs() <= tiny || !piv.is_finite() {
        return Err(GridError::SingularPivot { row: 0 });
    }
    c[0] = if n > 1 { a.sup[0] / piv } else { 0.0 };
    d[0] = rhs[0] / piv;
    for i in 1..n {
        piv = a.main[i] - a.sub[i] * c[i - 1];
        if piv.abs() <= tiny || !piv.is_finite() {
            return Err(GridError::SingularPivot { row: i });
        }
        if i + 1 < n {
            c[i] = a.sup[i] / piv;
        }
        d[i] = (rhs[i] - a.sub[i] * d[i - 1]) / piv;
    }
    let mut x = d;
    for i in (0..n - 1).rev() {
        let next = x[i + 1];
        x[i] -= c[i] * next;
    }
    Ok(x)
}

type Block = [[f64; 2]; 2];

fn block_mul(a: &Block, b: &Block) -> Block {
    [
        [
            a[0][0] * b[0][0] + a[0][1] * b[1][0],
            a[0][0] * b[0][1] + a[0][1] * b[1][1],
        ],
        [
            a[1][0] * b[0][0] + a[1][1] * b[1][0],
            a[1][0] * b[0][1] + a[1][1] * b[1][1],
        ],
    ]
}

fn block_vec(a: &Block, x: [f64; 2]) -> [f64; 2] {
    [a[0][0] * x[0] + a[0][1] * x[1], a[1][0] * x[0] + a[1][1] * x[1]]
}

fn block_inv(a: &Block, tiny: f64) -> Option<Block> {
    let det = a[0][0] * a[1][1] - a[0][1] * a[1][0];
    if det.abs() <= tiny || !det.is_finite() {
        return None;
    }
    Some([[a[1][1] / det, -a[0][1] / det], [-a[1][0] / det, a[0][0] / det]])
}

/// Two coupled tridiagonal systems
///
/// ```text
/// [ A11 A12 ] [x]   [f]
/// [ A21 A22 ] [y] = [g]
/// ```
///
/// solved as one block-tridiagonal system with 2x2 blocks per node.
#[derive(Debug, Clone)]
pub struct CoupledTridiagonal {
    pub a11: Tridiagonal,
    pub a12: Tridiagonal,
    pub a21: Tridiagonal,
    pub a22: Tridiagonal,
}

impl CoupledTridiagonal {
    pub fn solve(&self, f: &[f64], g: &[f64]) -> Result<(Vec<f64>, Vec<f64>), GridError> {
        let n = self.a11.dim();
        for len in [self.a12.dim(), self.a21.dim(), self.a22.dim(), f.len(), g.len()] {
            if len != n {
                return Err(GridError::DimensionMismatch { expected: n, got: len });
            }
        }
        let pick = |m: [&[f64]; 4], i: usize| -> Block { [[m[0][i], m[1][i]], [m[2][i], m[3][i]]] };
        let lower = |i| pick([&self.a11.sub, &self.a12.sub, &self.a21.sub, &self.a22.sub], i);
        let diag = |i| pick([&self.a11.main, &self.a12.main, &self.a21.main, &self.a22.main], i);
        let upper = |i| pick([&self.a11.sup, &self.a12.sup, &self.a21.sup, &self.a22.sup], i);

        let scale = [&self.a11, &self.a12, &self.a21, &self.a22]
            .iter()
            .map(|m| m.norm_inf())
            .fold(0.0, f64::max)
            .max(f64::MIN_POSITIVE);
        let tiny = scale * scale * 1e-28;

        let mut c: Vec<Block> = vec![[[0.0; 2]; 2]; n];
        let mut d: Vec<[f64; 2]> = vec![[0.0; 2]; n];
        let inv0 = block_inv(&diag(0), tiny).ok_or(GridError::SingularPivot { row: 0 })?;
        c[0] = block_mul(&inv0, &upper(0));
        d[0] = block_vec(&inv0, [f[0], g[0]]);
        for i in 1..n {
            let l = lower(i);
            let lc = block_mul(&l, &c[i - 1]);
            let di = diag(i);
            let piv = [
                [di[0][0] - lc[0][0], di[0][1] - lc[0][1]],
                [di[1][0] - lc[1][0], di[1][1] - lc[1][1]],
            ];
            let inv = block_inv(&piv, tiny).ok_or(GridError::SingularPivot { row: i })?;
            if i + 1 < n {
                c[i] = block_mul(&inv, &upper(i));
            }
            let ld = block_vec(&l, d[i - 1]);
            d[i] = block_vec(&inv, [f[i] - ld[0], g[i] - ld[1]]);
        }
        for i in (0..n - 1).rev() {
            let cx = block_vec(&c[i], d[i + 1]);
            d[i] = [d[i][0] - cx[0], d[i][1] - cx[1]];
        }
        Ok(d.into_iter().map(|p| (p[0], p[1])).unzip())
    }
}

fn check_weight(grid: &SpatialGrid, w: &[f64]) -> Result<(), GridError> {
    grid.check_len(w.len())?;
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(GridError::NonFinite(i));
    }
    Ok(())
}

/// Consistent P1 mass matrix `∫ w φ_i φ_j` with nodal weight `w`.
pub fn assemble_weighted_mass(grid: &SpatialGrid, w: &[f64]) -> Result<Tridiagonal, GridError> {
    check_weight(grid, w)?;
    let dz = grid.dz();
    let mut m = Tridiagonal::zeros(grid.n_nodes());
    for e in 0..grid.n_elem() {
        let (wa, wb) = (w[e], w[e + 1]);
        m.main[e] += dz * (3.0 * wa + wb) / 12.0;
        m.main[e + 1] += dz * (wa + 3.0 * wb) / 12.0;
        let off = dz * (wa + wb) / 12.0;
        m.sup[e] += off;
        m.sub[e + 1] += off;
    }
    Ok(m)
}

/// Row-sum lumped mass `∫ w φ_i`.
pub fn lumped_mass(grid: &SpatialGrid, w: &[f64]) -> Result<Vec<f64>, GridError> {
    check_weight(grid, w)?;
    let dz = grid.dz();
    let mut m = vec![0.0; grid.n_nodes()];
    for e in 0..grid.n_elem() {
        let (wa, wb) = (w[e], w[e + 1]);
        m[e] += dz * (2.0 * wa + wb) / 6.0;
        m[e + 1] += dz * (wa + 2.0 * wb) / 6.0;
    }
    Ok(m)
}

/// P1 stiffness matrix `∫ w φ_i' φ_j'` with nodal weight `w`.
pub fn assemble_weighted_stiffness(grid: &SpatialGrid, w: &[f64]) -> Result<Tridiagonal, GridError> {
    check_weight(grid, w)?;
    let dz = grid.dz();
    let mut k = Tridiagonal::zeros(grid.n_nodes());
    for e in 0..grid.n_elem() {
        let a = 0.5 * (w[e] + w[e + 1]) / dz;
        k.main[e] += a;
        k.main[e + 1] += a;
        k.sup[e] -= a;
        k.sub[e + 1] -= a;
    }
    Ok(k)
}

/// Element slopes `(f[e+1] - f[e]) / dz`.
pub fn element_gradients(grid: &SpatialGrid, f: &[f64]) -> Vec<f64> {
    let inv = 1.0 / grid.dz();
    f.windows(2).map(|p| (p[1] - p[0]) * inv).collect()
}

/// Linear interpolation of nodal values at local coordinate `s ∈ [0,1]` of element `e`.
#[inline]
pub fn interp(f: &[f64], e: usize, s: f64) -> f64 {
    f[e] * (1.0 - s) + f[e + 1] * s
}

pub fn integrate(grid: &SpatialGrid, f: &[f64]) -> Result<f64, GridError> {
    grid.check_len(f.len())?;
    let dz = grid.dz();
    Ok(f.windows(2).map(|p| 0.5 * dz * (p[0] + p[1])).sum())
}

/// `∫ f g w` over Ω by two-point Gauss per element; `w = None` means `w ≡ 1`.
pub fn integrate_product(grid: &SpatialGrid, f: &[f64], g: &[f64], w: Option<&[f64]>) -> Result<f64, GridError> {
    grid.check_len(f.len())?;
    grid.check_len(g.len())?;
    if let Some(w) = w {
        grid.check_len(w.len())?;
    }
    let dz = grid.dz();
    let mut total = 0.0;
    for e in 0..grid.n_elem() {
        for (s, wq) in GAUSS2_POINTS.iter().zip(GAUSS2_WEIGHTS) {
            let weight = w.map_or(1.0, |w| interp(w, e, *s));
            total += wq * dz * interp(f, e, *s) * interp(g, e, *s) * weight;
        }
    }
    Ok(total)
}

pub fn l2_norm(grid: &SpatialGrid, f: &[f64]) -> Result<f64, GridError> {
    Ok(integrate_product(grid, f, f, None)?.max(0.0).sqrt())
}

pub fn h1_seminorm(grid: &SpatialGrid, f: &[f64]) -> Result<f64, GridError> {
    grid.check_len(f.len())?;
    let dz = grid.dz();
    Ok(element_gradients(grid, f)
        .iter()
        .map(|g| g * g * dz)
        .sum::<f64>()
        .sqrt())
}

/// Two-point Gauss abscissae and weights (including `dz`), element by element.
pub fn gauss_layout(grid: &SpatialGrid) -> (Vec<f64>, Vec<f64>) {
    let dz = grid.dz();
    let mut z = Vec::with_capacity(2 * grid.n_elem());
    let mut w = Vec::with_capacity(2 * grid.n_elem());
    for e in 0..grid.n_elem() {
        for (s, wq) in GAUSS2_POINTS.iter().zip(GAUSS2_WEIGHTS) {
            z.push(grid.node(e) + s * dz);
            w.push(wq * dz);
        }
    }
    (z, w)
}

/// Nodal field interpolated at the points of [`gauss_layout`].
pub fn values_at_gauss(f: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(2 * f.len().saturating_sub(1));
    for e in 0..f.len().saturating_sub(1) {
        for s in GAUSS2_POINTS {
            out.push(interp(f, e, s));
        }
    }
    out
}

/// Element gradients repeated at both Gauss points of each element.
pub fn gradients_at_gauss(grid: &SpatialGrid, f: &[f64]) -> Vec<f64> {
    element_gradients(grid, f).into_iter().flat_map(|g| [g, g]).collect()
}

/// `L²(Ω × (0,T))` norm of a space-time array with trapezoid weights in time.
pub fn space_time_l2(grid: &SpatialGrid, time: &TimeGrid, a: &SpaceTimeArray) -> f64 {
    let w = time.trapezoid_weights();
    (0..a.n_levels())
        .map(|n| {
            let r = a.row(n);
            w[n] * integrate_product(grid, r, r, None).unwrap_or(f64::NAN)
        })
        .sum::<f64>()
        .max(0.0)
        .sqrt()
}

/// `L²(Ω × (0,T))` distance between two space-time arrays on the same lattice.
pub fn space_time_distance(grid: &SpatialGrid, time: &TimeGrid, a: &SpaceTimeArray, b: &SpaceTimeArray) -> f64 {
    space_time_l2(grid, time, &a.axpy(-1.0, b))
}
