//! Uniform space-time grids, node fields, and the implicit divergence-form
//! step `(1/dt)I + A_h + σ0 I` shared by every solver in the crate.
//!
//! Spatial nodes are numbered row-major with the last axis fastest. Unknowns
//! interleave components: unknown `node·m + α`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::apfield::CoefficientSource;
use crate::error::{invalid, Error, Result};
use crate::linalg::{bicgstab, pcg, CsrMatrix, SolveStats, Tridiagonal, MAX_ITERATIONS, SOLVE_TOLERANCE};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoundaryKind {
    Periodic,
    Dirichlet,
}

/// Declarative description of a grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub h: f64,
    pub t0: f64,
    pub t1: f64,
    pub dt: f64,
    /// Per axis: (lower face, upper face).
    pub bc: Vec<[BoundaryKind; 2]>,
    pub m: usize,
}

impl GridSpec {
    /// Box `[lower, upper]^d` with the same condition on every face.
    pub fn cube(d: usize, lower: f64, upper: f64, h: f64, t: (f64, f64), dt: f64, bc: BoundaryKind, m: usize) -> Self {
        GridSpec { lower: vec![lower; d], upper: vec![upper; d], h, t0: t.0, t1: t.1, dt, bc: vec![[bc, bc]; d], m }
    }
}

fn tile(lower: f64, upper: f64, step: f64) -> Result<usize> {
    let len = upper - lower;
    let n = (len / step).round();
    if !(n >= 0.0) || (n * step - len).abs() > 1e-9 * len.abs().max(step) {
        return Err(Error::NonIntegerDivision { lower, upper, step });
    }
    Ok(n as usize)
}

/// Validated uniform grid over a box and a time interval.
#[derive(Clone, Debug, PartialEq)]
pub struct SpaceTimeGrid {
    spec: GridSpec,
    cells: Vec<usize>,
    nodes: Vec<usize>,
    strides: Vec<usize>,
    steps: usize,
}

/// Validates `spec` and derives node counts.
pub fn build_grid(spec: GridSpec) -> Result<SpaceTimeGrid> {
    let d = spec.lower.len();
    if d == 0 || spec.upper.len() != d || spec.bc.len() != d {
        return Err(invalid("grid needs matching lower/upper/bc of positive dimension"));
    }
    if !(spec.h > 0.0) || !(spec.dt > 0.0) || spec.m == 0 {
        return Err(invalid("grid needs h > 0, dt > 0 and m >= 1"));
    }
    if spec.t1 < spec.t0 {
        return Err(invalid("time interval is reversed"));
    }
    let mut cells = Vec::with_capacity(d);
    let mut nodes = Vec::with_capacity(d);
    for a in 0..d {
        if !(spec.upper[a] > spec.lower[a]) {
            return Err(invalid("box must be nonempty"));
        }
        let periodic = spec.bc[a][0] == BoundaryKind::Periodic;
        if periodic != (spec.bc[a][1] == BoundaryKind::Periodic) {
            return Err(invalid(format!("axis {a}: periodic faces must come in opposite pairs")));
        }
        let c = tile(spec.lower[a], spec.upper[a], spec.h)?;
        if c == 0 {
            return Err(invalid("box shorter than one cell"));
        }
        cells.push(c);
        nodes.push(if periodic { c } else { c + 1 });
    }
    let steps = if spec.t1 == spec.t0 { 0 } else { tile(spec.t0, spec.t1, spec.dt)? };
    let mut strides = vec![1usize; d];
    for a in (0..d.saturating_sub(1)).rev() {
        strides[a] = strides[a + 1] * nodes[a + 1];
    }
    Ok(SpaceTimeGrid { spec, cells, nodes, strides, steps })
}

impl SpaceTimeGrid {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }
    pub fn dim(&self) -> usize {
        self.nodes.len()
    }
    pub fn m(&self) -> usize {
        self.spec.m
    }
    pub fn h(&self) -> f64 {
        self.spec.h
    }
    pub fn dt(&self) -> f64 {
        self.spec.dt
    }
    pub fn cells(&self) -> &[usize] {
        &self.cells
    }
    pub fn nodes_per_axis(&self) -> &[usize] {
        &self.nodes
    }
    pub fn n_nodes(&self) -> usize {
        self.nodes.iter().product()
    }
    pub fn n_unknowns(&self) -> usize {
        self.n_nodes() * self.spec.m
    }
    pub fn steps(&self) -> usize {
        self.steps
    }
    pub fn n_levels(&self) -> usize {
        self.steps + 1
    }
    pub fn time(&self, level: usize) -> f64 {
        self.spec.t0 + level as f64 * self.spec.dt
    }
    pub fn is_periodic(&self, axis: usize) -> bool {
        self.spec.bc[axis][0] == BoundaryKind::Periodic
    }
    pub fn coord(&self, axis: usize, idx: usize) -> f64 {
        self.spec.lower[axis] + idx as f64 * self.spec.h
    }
    pub fn multi_index(&self, node: usize) -> Vec<usize> {
        self.strides.iter().zip(&self.nodes).map(|(s, n)| (node / s) % n).collect()
    }
    pub fn node_index(&self, idx: &[usize]) -> usize {
        idx.iter().zip(&self.strides).map(|(i, s)| i * s).sum()
    }
    pub fn node_coords(&self, node: usize) -> Vec<f64> {
        self.multi_index(node).iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }
    /// Neighbor `offset` cells away along `axis`; wraps on periodic axes.
    pub fn neighbor(&self, node: usize, axis: usize, offset: isize) -> Option<usize> {
        let n = self.nodes[axis] as isize;
        let i = ((node / self.strides[axis]) % self.nodes[axis]) as isize;
        let mut j = i + offset;
        if self.is_periodic(axis) {
            j = j.rem_euclid(n);
        } else if j < 0 || j >= n {
            return None;
        }
        Some((node as isize + (j - i) * self.strides[axis] as isize) as usize)
    }
    /// Whether a node lies on a Dirichlet face.
    pub fn is_boundary_node(&self, node: usize) -> bool {
        (0..self.dim()).any(|a| {
            if self.is_periodic(a) {
                return false;
            }
            let i = (node / self.strides[a]) % self.nodes[a];
            i == 0 || i + 1 == self.nodes[a]
        })
    }
    /// Quadrature weight of a node: `h^d` with trapezoid halving on Dirichlet faces.
    pub fn quadrature_weight(&self, node: usize) -> f64 {
        let mut w = self.spec.h.powi(self.dim() as i32);
        for a in 0..self.dim() {
            if !self.is_periodic(a) {
                let i = (node / self.strides[a]) % self.nodes[a];
                if i == 0 || i + 1 == self.nodes[a] {
                    w *= 0.5;
                }
            }
        }
        w
    }
    /// Same box and spacing with a different time axis.
    pub fn with_time(&self, t0: f64, t1: f64, dt: f64) -> Result<SpaceTimeGrid> {
        build_grid(GridSpec { t0, t1, dt, ..self.spec.clone() })
    }
    pub fn with_components(&self, m: usize) -> SpaceTimeGrid {
        build_grid(GridSpec { m, ..self.spec.clone() }).expect("component change keeps the grid valid")
    }
}

/// Values on grid nodes at a list of time levels.
///
/// Layout is time-major, then spatial node, then component.
#[derive(Clone, Debug, PartialEq)]
pub struct NodeField {
    grid: SpaceTimeGrid,
    times: Vec<f64>,
    n_comp: usize,
    data: Vec<f64>,
}

impl NodeField {
    pub fn zeros(grid: &SpaceTimeGrid, times: Vec<f64>, n_comp: usize) -> Self {
        let len = times.len() * grid.n_nodes() * n_comp;
        NodeField { grid: grid.clone(), times, n_comp, data: vec![0.0; len] }
    }

    pub fn from_data(grid: &SpaceTimeGrid, times: Vec<f64>, n_comp: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != times.len() * grid.n_nodes() * n_comp {
            return Err(invalid("node field data length disagrees with its shape"));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(invalid("node field holds non-finite values"));
        }
        Ok(NodeField { grid: grid.clone(), times, n_comp, data })
    }

    /// Samples `f(x, t, out)` at every node of every listed time.
    pub fn sample(grid: &SpaceTimeGrid, times: Vec<f64>, n_comp: usize, f: impl Fn(&[f64], f64, &mut [f64])) -> Self {
        let mut nf = Self::zeros(grid, times, n_comp);
        let nn = grid.n_nodes();
        for l in 0..nf.times.len() {
            let t = nf.times[l];
            for p in 0..nn {
                let x = grid.node_coords(p);
                let base = (l * nn + p) * n_comp;
                f(&x, t, &mut nf.data[base..base + n_comp]);
            }
        }
        nf
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }
    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn n_levels(&self) -> usize {
        self.times.len()
    }
    pub fn n_comp(&self) -> usize {
        self.n_comp
    }
    pub fn data(&self) -> &[f64] {
        &self.data
    }
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
    pub fn level_len(&self) -> usize {
        self.grid.n_nodes() * self.n_comp
    }
    pub fn level(&self, l: usize) -> &[f64] {
        let n = self.level_len();
        &self.data[l * n..(l + 1) * n]
    }
    pub fn level_mut(&mut self, l: usize) -> &mut [f64] {
        let n = self.level_len();
        &mut self.data[l * n..(l + 1) * n]
    }
    #[inline]
    pub fn at(&self, l: usize, node: usize, c: usize) -> f64 {
        self.data[(l * self.grid.n_nodes() + node) * self.n_comp + c]
    }
    #[inline]
    pub fn set(&mut self, l: usize, node: usize, c: usize, v: f64) {
        let k = (l * self.grid.n_nodes() + node) * self.n_comp + c;
        self.data[k] = v;
    }
    pub fn sup_norm(&self) -> f64 {
        self.data.iter().fold(0.0, |a, v| a.max(v.abs()))
    }
    /// Single component as its own field.
    pub fn component(&self, c: usize) -> NodeField {
        let data = self.data.chunks(self.n_comp).map(|ch| ch[c]).collect();
        NodeField { grid: self.grid.clone(), times: self.times.clone(), n_comp: 1, data }
    }

    /// Writes a CSV with one row per (level, node): `t, x_0.., c_0..`.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        out.push('t');
        for a in 0..self.grid.dim() {
            out.push_str(&format!(",x{a}"));
        }
        for c in 0..self.n_comp {
            out.push_str(&format!(",c{c}"));
        }
        out.push('\n');
        let nn = self.grid.n_nodes();
        for l in 0..self.n_levels() {
            for p in 0..nn {
                out.push_str(&format!("{:.12e}", self.times[l]));
                for x in self.grid.node_coords(p) {
                    out.push_str(&format!(",{x:.12e}"));
                }
                for c in 0..self.n_comp {
                    out.push_str(&format!(",{:.15e}", self.at(l, p, c)));
                }
                out.push('\n');
            }
        }
        write_atomic(path, out.as_bytes())
    }

    /// Little-endian f64 dump plus a JSON sidecar at `<path>.json`.
    pub fn write_binary(&self, path: &Path, labels: &[String]) -> Result<()> {
        let bytes: Vec<u8> = self.data.iter().flat_map(|v| v.to_le_bytes()).collect();
        write_atomic(path, &bytes)?;
        let side = Sidecar {
            grid: self.grid.spec.clone(),
            times: self.times.clone(),
            n_comp: self.n_comp,
            labels: labels.to_vec(),
            layout: "time-major, then lexicographic spatial node (last axis fastest), then component".into(),
        };
        write_atomic(&sidecar_path(path), serde_json::to_string_pretty(&side)?.as_bytes())
    }

    pub fn read_binary(path: &Path) -> Result<NodeField> {
        let side: Sidecar = serde_json::from_slice(&std::fs::read(sidecar_path(path))?)?;
        let grid = build_grid(side.grid)?;
        let bytes = std::fs::read(path)?;
        let data = bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
        NodeField::from_data(&grid, side.times, side.n_comp, data)
    }
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    s.into()
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    grid: GridSpec,
    times: Vec<f64>,
    n_comp: usize,
    labels: Vec<String>,
    layout: String,
}

/// Writes through a temporary sibling file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    std::fs::write(&tmp, bytes)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Averaging region: a half-open spatial box and an optional closed time range.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub time: Option<(f64, f64)>,
}

impl Window {
    pub fn spatial(lower: Vec<f64>, upper: Vec<f64>) -> Self {
        Window { lower, upper, time: None }
    }
}

/// Nodes with `lower ≤ x < upper` on every axis.
pub fn window_nodes(grid: &SpaceTimeGrid, w: &Window) -> Result<Vec<usize>> {
    let h = grid.h();
    let mut per_axis = Vec::new();
    for a in 0..grid.dim() {
        let idx: Vec<usize> = (0..grid.nodes_per_axis()[a])
            .filter(|&i| {
                let x = grid.coord(a, i);
                x >= w.lower[a] - 1e-9 * h && x < w.upper[a] - 1e-9 * h
            })
            .collect();
        if idx.len() < 8 {
            return Err(Error::WindowTooSmall { nodes: idx.len() });
        }
        per_axis.push(idx);
    }
    let mut out = Vec::new();
    let mut cur = vec![0usize; grid.dim()];
    loop {
        let mi: Vec<usize> = cur.iter().enumerate().map(|(a, &k)| per_axis[a][k]).collect();
        out.push(grid.node_index(&mi));
        let mut a = grid.dim();
        loop {
            if a == 0 {
                return Ok(out);
            }
            a -= 1;
            cur[a] += 1;
            if cur[a] < per_axis[a].len() {
                break;
            }
            cur[a] = 0;
        }
    }
}

/// Levels of `field` inside the window's time range (all levels when open).
pub fn window_levels(field: &NodeField, w: &Window) -> Vec<usize> {
    match w.time {
        None => (0..field.n_levels()).collect(),
        Some((a, b)) => {
            let tol = 1e-9 * field.grid().dt();
            (0..field.n_levels()).filter(|&l| field.times()[l] >= a - tol && field.times()[l] <= b + tol).collect()
        }
    }
}

/// Volume average of one component over a window.
pub fn window_mean(field: &NodeField, w: &Window, component: usize) -> Result<f64> {
    let nodes = window_nodes(field.grid(), w)?;
    let levels = window_levels(field, w);
    if levels.is_empty() {
        return Err(Error::WindowTooSmall { nodes: 0 });
    }
    let mut acc = 0.0;
    for &l in &levels {
        for &p in &nodes {
            acc += field.at(l, p, component);
        }
    }
    Ok(acc / (levels.len() * nodes.len()) as f64)
}

/// Face coefficient rule for the diagonal flux terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FaceAveraging {
    #[default]
    Arithmetic,
    Harmonic,
}

impl FaceAveraging {
    #[inline]
    pub fn combine(self, a: f64, b: f64) -> f64 {
        match self {
            FaceAveraging::Arithmetic => 0.5 * (a + b),
            FaceAveraging::Harmonic => {
                if a * b > 0.0 {
                    2.0 * a * b / (a + b)
                } else {
                    0.5 * (a + b)
                }
            }
        }
    }
}

/// Options of the implicit step.
#[derive(Clone, Copy, Debug, Default)]
pub struct StepOptions<'a> {
    pub averaging: FaceAveraging,
    /// Per-node weight on the time and mass terms (mapped grids).
    pub capacity: Option<&'a [f64]>,
}

/// Coefficient tensors at every node, flat `[node][i][j][α][β]`.
pub fn sample_coefficients(coef: &dyn CoefficientSource, grid: &SpaceTimeGrid, t: f64) -> Vec<f64> {
    let n = coef.dim() * coef.dim() * coef.components() * coef.components();
    let mut out = vec![0.0; grid.n_nodes() * n];
    for p in 0..grid.n_nodes() {
        coef.eval_into(&grid.node_coords(p), t, &mut out[p * n..(p + 1) * n]);
    }
    out
}

fn check_dims(coef: &dyn CoefficientSource, grid: &SpaceTimeGrid) -> Result<()> {
    if coef.dim() != grid.dim() || coef.components() != grid.m() {
        return Err(invalid(format!(
            "coefficient (d={}, m={}) does not match grid (d={}, m={})",
            coef.dim(),
            coef.components(),
            grid.dim(),
            grid.m()
        )));
    }
    Ok(())
}

/// Triplets of `A_h` for all rows not fixed by Dirichlet data.
///
/// Diagonal-direction fluxes use face coefficients; mixed terms use the
/// node-centered product `D_i^c(a_ij D_j^c u)`, which keeps the adjoint
/// operator equal to the transpose.
fn spatial_triplets(coef_nodes: &[f64], grid: &SpaceTimeGrid, avg: FaceAveraging) -> Vec<(usize, usize, f64)> {
    let (d, m) = (grid.dim(), grid.m());
    let nt = d * d * m * m;
    let h2 = grid.h() * grid.h();
    let idx = |i: usize, j: usize, a: usize, b: usize| ((i * d + j) * m + a) * m + b;
    let mut trip = Vec::with_capacity(grid.n_unknowns() * (2 * d + 1 + 4 * d * (d - 1)) * m);
    for p in 0..grid.n_nodes() {
        if grid.is_boundary_node(p) {
            continue;
        }
        let cp = &coef_nodes[p * nt..(p + 1) * nt];
        for i in 0..d {
            let plus = grid.neighbor(p, i, 1);
            let minus = grid.neighbor(p, i, -1);
            for a in 0..m {
                let row = p * m + a;
                for b in 0..m {
                    let e = idx(i, i, a, b);
                    let mut diag = 0.0;
                    if let Some(q) = plus {
                        let w = avg.combine(cp[e], coef_nodes[q * nt + e]) / h2;
                        trip.push((row, q * m + b, -w));
                        diag += w;
                    }
                    if let Some(q) = minus {
                        let w = avg.combine(cp[e], coef_nodes[q * nt + e]) / h2;
                        trip.push((row, q * m + b, -w));
                        diag += w;
                    }
                    trip.push((row, p * m + b, diag));
                }
            }
            for j in 0..d {
                if j == i {
                    continue;
                }
                for (si, side) in [(1isize, plus), (-1isize, minus)] {
                    let Some(q) = side else { continue };
                    let cq = &coef_nodes[q * nt..(q + 1) * nt];
                    for (sj, corner) in [(1isize, grid.neighbor(q, j, 1)), (-1isize, grid.neighbor(q, j, -1))] {
                        let Some(r) = corner else { continue };
                        let sign = -(si * sj) as f64;
                        for a in 0..m {
                            for b in 0..m {
                                let v = cq[idx(i, j, a, b)];
                                if v != 0.0 {
                                    trip.push((p * m + a, r * m + b, sign * v / (4.0 * h2)));
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    trip
}

/// `A_h` at time `t` with Dirichlet rows left empty.
pub fn assemble_spatial(coef: &dyn CoefficientSource, grid: &SpaceTimeGrid, t: f64, avg: FaceAveraging) -> Result<CsrMatrix> {
    check_dims(coef, grid)?;
    let nodes = sample_coefficients(coef, grid, t);
    let n = grid.n_unknowns();
    Ok(CsrMatrix::from_triplets(n, n, spatial_triplets(&nodes, grid, avg)))
}

enum StepSolver {
    Tri(Tridiagonal),
    Sparse { matrix: CsrMatrix, symmetric: bool },
}

/// Matrix of one backward-Euler step with Dirichlet rows eliminated.
///
/// Fixed unknowns get identity rows; their couplings from free rows are moved
/// to `lift` so that symmetric operators stay symmetric.
pub struct StepOperator {
    solver: StepSolver,
    lift: CsrMatrix,
    fixed: Vec<bool>,
}

/// Builds `(cap/dt) I + A_h(t) + σ0·cap I`. `dt = ∞` gives the steady operator.
pub fn assemble_step(
    coef: &dyn CoefficientSource,
    grid: &SpaceTimeGrid,
    t: f64,
    mass: f64,
    dt: f64,
    opts: &StepOptions<'_>,
) -> Result<StepOperator> {
    check_dims(coef, grid)?;
    let nodes = sample_coefficients(coef, grid, t);
    Ok(step_from_coefficients(&nodes, grid, mass, dt, opts))
}

pub(crate) fn step_from_coefficients(coef_nodes: &[f64], grid: &SpaceTimeGrid, mass: f64, dt: f64, opts: &StepOptions<'_>) -> StepOperator {
    let m = grid.m();
    let n = grid.n_unknowns();
    let fixed: Vec<bool> = (0..n).map(|u| grid.is_boundary_node(u / m)).collect();
    let inv_dt = if dt.is_finite() { 1.0 / dt } else { 0.0 };
    if grid.dim() == 1 && m == 1 && n >= 3 {
        return scalar_line_step(coef_nodes, grid, mass, inv_dt, opts, fixed);
    }
    let mut keep = Vec::new();
    let mut lift = Vec::new();
    for (r, c, v) in spatial_triplets(coef_nodes, grid, opts.averaging) {
        if fixed[c] {
            lift.push((r, c, v));
        } else {
            keep.push((r, c, v));
        }
    }
    for u in 0..n {
        if fixed[u] {
            keep.push((u, u, 1.0));
        } else {
            let cap = opts.capacity.map_or(1.0, |c| c[u / m]);
            keep.push((u, u, cap * (inv_dt + mass)));
        }
    }
    let matrix = CsrMatrix::from_triplets(n, n, keep);
    let lift = CsrMatrix::from_triplets(n, n, lift);
    let tol = 1e-12 * matrix.diagonal().iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let symmetric = matrix.is_symmetric(tol);
    StepOperator { solver: StepSolver::Sparse { matrix, symmetric }, lift, fixed }
}

/// One-dimensional scalar step assembled straight into tridiagonal form.
fn scalar_line_step(coef_nodes: &[f64], grid: &SpaceTimeGrid, mass: f64, inv_dt: f64, opts: &StepOptions<'_>, fixed: Vec<bool>) -> StepOperator {
    let n = grid.n_unknowns();
    let h2 = grid.h() * grid.h();
    let cyclic = grid.is_periodic(0);
    let mut tri = Tridiagonal::new(n, cyclic);
    let mut lift = Vec::new();
    for p in 0..n {
        if fixed[p] {
            tri.diag[p] = 1.0;
            continue;
        }
        let cap = opts.capacity.map_or(1.0, |c| c[p]);
        let mut diag = cap * (inv_dt + mass);
        for (off, slot) in [(1isize, 0usize), (-1, 1)] {
            let Some(q) = grid.neighbor(p, 0, off) else { continue };
            let w = opts.averaging.combine(coef_nodes[p], coef_nodes[q]) / h2;
            diag += w;
            if fixed[q] {
                lift.push((p, q, -w));
            } else if slot == 0 {
                tri.upper[p] -= w;
            } else {
                tri.lower[p] -= w;
            }
        }
        tri.diag[p] = diag;
    }
    StepOperator { solver: StepSolver::Tri(tri), lift: CsrMatrix::from_triplets(n, n, lift), fixed }
}

impl StepOperator {
    pub fn n(&self) -> usize {
        self.fixed.len()
    }

    /// The eliminated system matrix.
    pub fn matrix(&self) -> CsrMatrix {
        match &self.solver {
            StepSolver::Tri(t) => t.to_csr(),
            StepSolver::Sparse { matrix, .. } => matrix.clone(),
        }
    }

    pub fn is_fixed(&self, u: usize) -> bool {
        self.fixed[u]
    }

    fn lifted_rhs(&self, rhs: &[f64]) -> Vec<f64> {
        let mut b = rhs.to_vec();
        if self.lift.nnz() > 0 {
            let mut corr = vec![0.0; rhs.len()];
            self.lift.mul_vec(rhs, &mut corr);
            for (bi, ci) in b.iter_mut().zip(&corr) {
                *bi -= ci;
            }
        }
        b
    }

    /// Solves the step. `rhs` carries the boundary values in fixed slots;
    /// `x` holds the initial guess on entry.
    pub fn solve(&self, rhs: &[f64], x: &mut [f64]) -> Result<SolveStats> {
        let b = self.lifted_rhs(rhs);
        match &self.solver {
            StepSolver::Tri(t) => {
                let sol = t.solve(&b)?;
                x.copy_from_slice(&sol);
                let mut back = vec![0.0; b.len()];
                t.mul_vec(x, &mut back);
                let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nr = back.iter().zip(&b).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
                let rel = if nb > 0.0 { nr / nb } else { nr };
                if !(rel <= SOLVE_TOLERANCE) {
                    return Err(Error::SolverDivergence { iterations: 0, residual: rel });
                }
                Ok(SolveStats { iterations: 1, relative_residual: rel })
            }
            StepSolver::Sparse { matrix, symmetric } => {
                if *symmetric {
                    pcg(matrix, &b, x, SOLVE_TOLERANCE, MAX_ITERATIONS)
                } else {
                    bicgstab(matrix, &b, x, SOLVE_TOLERANCE, MAX_ITERATIONS)
                }
            }
        }
    }
}

/// `−A_h P_j^β` for the affine field `P_j^β = x_j e_β`: the discrete
/// `div(A e_j)` with the same face rule as the operator. Layout `[node][α]`.
pub fn affine_forcing(coef_nodes: &[f64], grid: &SpaceTimeGrid, avg: FaceAveraging, j: usize, beta: usize) -> Vec<f64> {
    let (d, m) = (grid.dim(), grid.m());
    let nt = d * d * m * m;
    let h = grid.h();
    let idx = |i: usize, jj: usize, a: usize, b: usize| ((i * d + jj) * m + a) * m + b;
    let mut out = vec![0.0; grid.n_unknowns()];
    for p in 0..grid.n_nodes() {
        if grid.is_boundary_node(p) {
            continue;
        }
        let cp = &coef_nodes[p * nt..(p + 1) * nt];
        let (Some(qp), Some(qm)) = (grid.neighbor(p, j, 1), grid.neighbor(p, j, -1)) else { continue };
        for a in 0..m {
            let e = idx(j, j, a, beta);
            let fp = avg.combine(cp[e], coef_nodes[qp * nt + e]);
            let fm = avg.combine(cp[e], coef_nodes[qm * nt + e]);
            let mut v = (fp - fm) / h;
            for i in 0..d {
                if i == j {
                    continue;
                }
                let (Some(ip), Some(im)) = (grid.neighbor(p, i, 1), grid.neighbor(p, i, -1)) else { continue };
                let e = idx(i, j, a, beta);
                v += (coef_nodes[ip * nt + e] - coef_nodes[im * nt + e]) / (2.0 * h);
            }
            out[p * m + a] = v;
        }
    }
    out
}

/// Discrete `div g` with arithmetic face averages of node values; `g` laid
/// out `[node][i][α]`. Rows on Dirichlet nodes are zero.
pub fn flux_divergence(grid: &SpaceTimeGrid, g: &[f64]) -> Vec<f64> {
    let (d, m) = (grid.dim(), grid.m());
    let h = grid.h();
    let mut out = vec![0.0; grid.n_unknowns()];
    for p in 0..grid.n_nodes() {
        if grid.is_boundary_node(p) {
            continue;
        }
        for i in 0..d {
            let (Some(qp), Some(qm)) = (grid.neighbor(p, i, 1), grid.neighbor(p, i, -1)) else { continue };
            for a in 0..m {
                let gp = g[(qp * d + i) * m + a];
                let gm = g[(qm * d + i) * m + a];
                out[p * m + a] += 0.5 * (gp - gm) / h;
            }
        }
    }
    out
}

/// Right-hand side of a march.
pub enum Rhs<'a> {
    Zero,
    /// `f` (m components) and/or `g` (`[i][α]`, d·m components) given on every grid level.
    Fields { f: Option<&'a NodeField>, g: Option<&'a NodeField> },
    /// Fills the discrete forcing `[node][α]` at a time.
    Func(&'a (dyn Fn(f64, &mut [f64]) + Sync)),
}

/// Dirichlet data `g(x, α, t)`.
pub type DirichletFn<'a> = &'a (dyn Fn(&[f64], usize, f64) -> f64 + Sync);

/// Which levels a march keeps.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Record {
    All,
    Stride(usize),
    Final,
}

/// Backward-Euler stepper that reuses the assembled operator for
/// time-independent coefficients.
pub struct Marcher<'a> {
    coef: &'a dyn CoefficientSource,
    grid: &'a SpaceTimeGrid,
    mass: f64,
    opts: StepOptions<'a>,
    cached: Option<StepOperator>,
}

impl<'a> Marcher<'a> {
    pub fn new(coef: &'a dyn CoefficientSource, grid: &'a SpaceTimeGrid, mass: f64, opts: StepOptions<'a>) -> Result<Self> {
        check_dims(coef, grid)?;
        Ok(Marcher { coef, grid, mass, opts, cached: None })
    }

    fn operator(&mut self, t: f64) -> Result<&StepOperator> {
        if self.coef.is_time_independent() {
            if self.cached.is_none() {
                self.cached = Some(assemble_step(self.coef, self.grid, t, self.mass, self.grid.dt(), &self.opts)?);
            }
        } else {
            self.cached = Some(assemble_step(self.coef, self.grid, t, self.mass, self.grid.dt(), &self.opts)?);
        }
        Ok(self.cached.as_ref().unwrap())
    }

    /// Advances `u` to `t_new`. `forcing` is the discrete right-hand side at
    /// `t_new` (`[node][α]`); fixed unknowns take `bc` (zero when absent).
    pub fn step(&mut self, u: &mut [f64], t_new: f64, forcing: Option<&[f64]>, bc: Option<DirichletFn<'_>>) -> Result<SolveStats> {
        let m = self.grid.m();
        let dt = self.grid.dt();
        let grid = self.grid;
        let cap = self.opts.capacity;
        let mut rhs = vec![0.0; u.len()];
        for k in 0..u.len() {
            let p = k / m;
            if grid.is_boundary_node(p) {
                rhs[k] = bc.map_or(0.0, |g| g(&grid.node_coords(p), k % m, t_new));
            } else {
                let c = cap.map_or(1.0, |c| c[p]);
                rhs[k] = c * u[k] / dt + forcing.map_or(0.0, |f| f[k]);
            }
        }
        let op = self.operator(t_new)?;
        op.solve(&rhs, u)
    }
}

/// Backward-Euler trajectory of `∂t u − div(A∇u) + σ0 u = f + div g` over the grid's time axis.
pub fn time_march(
    coef: &dyn CoefficientSource,
    grid: &SpaceTimeGrid,
    mass: f64,
    rhs: &Rhs<'_>,
    initial: &[f64],
    dirichlet: Option<DirichletFn<'_>>,
    opts: StepOptions<'_>,
    record: Record,
) -> Result<NodeField> {
    if initial.len() != grid.n_unknowns() {
        return Err(invalid("initial data does not match the grid"));
    }
    if let Rhs::Fields { f, g } = rhs {
        for nf in [f, g].into_iter().flatten() {
            if nf.n_levels() != grid.n_levels() {
                return Err(invalid("right-hand side must be sampled on every grid level"));
            }
        }
    }
    let mut marcher = Marcher::new(coef, grid, mass, opts)?;
    let keep = |l: usize| match record {
        Record::All => true,
        Record::Stride(s) => l % s.max(1) == 0 || l == grid.steps(),
        Record::Final => l == grid.steps(),
    };
    let mut times = Vec::new();
    let mut data = Vec::new();
    let mut u = initial.to_vec();
    if keep(0) {
        times.push(grid.time(0));
        data.extend_from_slice(&u);
    }
    let mut forcing = vec![0.0; u.len()];
    for l in 1..=grid.steps() {
        let t = grid.time(l);
        let f_ref = match rhs {
            Rhs::Zero => None,
            Rhs::Fields { f, g } => {
                forcing.iter_mut().for_each(|v| *v = 0.0);
                if let Some(f) = f {
                    for (a, b) in forcing.iter_mut().zip(f.level(l)) {
                        *a += b;
                    }
                }
                if let Some(g) = g {
                    for (a, b) in forcing.iter_mut().zip(flux_divergence(grid, g.level(l))) {
                        *a += b;
                    }
                }
                Some(&forcing[..])
            }
            Rhs::Func(fun) => {
                fun(t, &mut forcing);
                Some(&forcing[..])
            }
        };
        marcher.step(&mut u, t, f_ref, dirichlet)?;
        if keep(l) {
            times.push(t);
            data.extend_from_slice(&u);
        }
    }
    NodeField::from_data(grid, times, grid.m(), data)
}

/// Discrete `L²(Ω)` norm of one level (all components), trapezoid weights.
pub fn l2_norm(grid: &SpaceTimeGrid, level: &[f64], m: usize) -> f64 {
    let mut acc = 0.0;
    for p in 0..grid.n_nodes() {
        let w = grid.quadrature_weight(p);
        for a in 0..m {
            acc += w * level[p * m + a].powi(2);
        }
    }
    acc.sqrt()
}

/// Closed-form scalar solutions for manufactured tests on `[0,1]^d`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ClosedForm {
    /// `Π sin(k x_i) · e^{−rate t}`.
    SineProduct { k: f64, rate: f64 },
    /// `Π x_i(1 − x_i) · e^{−rate t}`.
    Parabola { rate: f64 },
}

impl ClosedForm {
    fn factors(&self, x: f64) -> (f64, f64, f64) {
        match *self {
            ClosedForm::SineProduct { k, .. } => ((k * x).sin(), k * (k * x).cos(), -k * k * (k * x).sin()),
            ClosedForm::Parabola { .. } => (x * (1.0 - x), 1.0 - 2.0 * x, -2.0),
        }
    }
    fn rate(&self) -> f64 {
        match *self {
            ClosedForm::SineProduct { rate, .. } | ClosedForm::Parabola { rate } => rate,
        }
    }
    pub fn value(&self, x: &[f64], t: f64) -> f64 {
        x.iter().map(|&xi| self.factors(xi).0).product::<f64>() * (-self.rate() * t).exp()
    }
    /// Value, gradient and Hessian at `(x, t)`.
    pub fn derivatives(&self, x: &[f64], t: f64) -> (f64, Vec<f64>, Vec<f64>) {
        let d = x.len();
        let f: Vec<(f64, f64, f64)> = x.iter().map(|&xi| self.factors(xi)).collect();
        let e = (-self.rate() * t).exp();
        let prod_except = |skip: &[usize]| -> f64 {
            (0..d).filter(|a| !skip.contains(a)).map(|a| f[a].0).product::<f64>()
        };
        let u = prod_except(&[]) * e;
        let grad = (0..d).map(|i| f[i].1 * prod_except(&[i]) * e).collect();
        let mut hess = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                hess[i * d + j] = if i == j { f[i].2 * prod_except(&[i]) * e } else { f[i].1 * f[j].1 * prod_except(&[i, j]) * e };
            }
        }
        (u, grad, hess)
    }
    /// `∂t u − div(A∇u)` for scalar `A`.
    pub fn forcing(&self, coef: &dyn CoefficientSource, x: &[f64], t: f64) -> f64 {
        let d = x.len();
        let (u, g, hs) = self.derivatives(x, t);
        let a = coef.eval(x, t);
        let mut da = vec![0.0; d * d * d];
        coef.grad_into(x, t, &mut da);
        let mut div = 0.0;
        for i in 0..d {
            for j in 0..d {
                div += da[(i * d + i) * d + j] * g[j] + a.get(i, j, 0, 0) * hs[i * d + j];
            }
        }
        -self.rate() * u - div
    }
}

/// Observed orders of a manufactured-solution study.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceOrders {
    pub spatial: f64,
    pub temporal: f64,
    pub spatial_errors: Vec<(f64, f64)>,
    pub temporal_errors: Vec<(f64, f64)>,
}

/// Parameters of a manufactured study on `[0,1]^d` with Dirichlet data.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ManufacturedSetup {
    pub d: usize,
    pub t_final: f64,
    pub h0: f64,
    pub dt0: f64,
    pub averaging: FaceAveraging,
}

fn manufactured_run(coef: &dyn CoefficientSource, exact: ClosedForm, setup: &ManufacturedSetup, h: f64, dt: f64) -> Result<(SpaceTimeGrid, Vec<f64>)> {
    let grid = build_grid(GridSpec::cube(setup.d, 0.0, 1.0, h, (0.0, setup.t_final), dt, BoundaryKind::Dirichlet, 1))?;
    let init: Vec<f64> = (0..grid.n_nodes()).map(|p| exact.value(&grid.node_coords(p), 0.0)).collect();
    let g = |x: &[f64], _: usize, t: f64| exact.value(x, t);
    let forcing = |t: f64, out: &mut [f64]| {
        for (p, o) in out.iter_mut().enumerate() {
            *o = exact.forcing(coef, &grid.node_coords(p), t);
        }
    };
    let sol = time_march(
        coef,
        &grid,
        0.0,
        &Rhs::Func(&forcing),
        &init,
        Some(&g),
        StepOptions { averaging: setup.averaging, capacity: None },
        Record::Final,
    )?;
    let last = sol.level(sol.n_levels() - 1).to_vec();
    Ok((grid, last))
}

/// Three-level refinement study. Spatial runs use `dt = h²` and are compared
/// with the exact solution. Temporal runs fix `h = h0/4`, halve `dt` from
/// `dt0`, and are compared with a run on the same grid at `dt0/64`, so the
/// spatial error of that grid cancels.
pub fn manufactured_convergence(coef: &dyn CoefficientSource, exact: ClosedForm, setup: &ManufacturedSetup) -> Result<ConvergenceOrders> {
    let mut spatial_errors = Vec::new();
    for lvl in 0..3 {
        let h = setup.h0 / 2f64.powi(lvl);
        let dt = setup.t_final / (setup.t_final / (h * h)).ceil();
        let (grid, last) = manufactured_run(coef, exact, setup, h, dt)?;
        let t = grid.time(grid.steps());
        let err: Vec<f64> = (0..grid.n_nodes()).map(|p| last[p] - exact.value(&grid.node_coords(p), t)).collect();
        spatial_errors.push((h, l2_norm(&grid, &err, 1)));
    }
    let h = setup.h0 / 4.0;
    let (grid, reference) = manufactured_run(coef, exact, setup, h, setup.dt0 / 64.0)?;
    let mut temporal_errors = Vec::new();
    for lvl in 0..3 {
        let dt = setup.dt0 / 2f64.powi(lvl);
        let (_, last) = manufactured_run(coef, exact, setup, h, dt)?;
        let err: Vec<f64> = last.iter().zip(&reference).map(|(a, b)| a - b).collect();
        temporal_errors.push((dt, l2_norm(&grid, &err, 1)));
    }
    let slope = |pts: &[(f64, f64)]| {
        let x: Vec<f64> = pts.iter().map(|p| p.0.ln()).collect();
        let y: Vec<f64> = pts.iter().map(|p| p.1.ln()).collect();
        crate::linalg::fit_line(&x, &y).0
    };
    Ok(ConvergenceOrders {
        spatial: slope(&spatial_errors),
        temporal: slope(&temporal_errors),
        spatial_errors,
        temporal_errors,
    })
}
