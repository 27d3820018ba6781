//! Lattice level-set analysis of scalar maps.
//!
//! A strict sub- or super-level component that never reaches the lattice
//! boundary encloses an interior extremum; a map without critical points
//! cannot produce one, so every decision region of such a map leaks to the
//! edge of the domain.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gradients::input_gradient;
use crate::models::ResNetModel;
use crate::numerics::{lu_solve, BoxDomain, Mat64};

/// Uniform lattice over a box, corners included. Point `i` is decoded with the
/// first axis varying fastest, so in 2-D index `i = ix + nx·iy`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub resolution: Vec<usize>,
}

impl GridDomain {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>, resolution: Vec<usize>) -> Result<Self> {
        BoxDomain::new(lo.clone(), hi.clone())?;
        if resolution.len() != lo.len() || resolution.iter().any(|&r| r < 2) {
            return Err(Error::InvalidArgument(format!("need ≥ 2 lattice points per axis, got {resolution:?}")));
        }
        Ok(GridDomain { lo, hi, resolution })
    }

    /// `[lo, hi]^n` with `res` points per axis.
    pub fn cube(n: usize, lo: f64, hi: f64, res: usize) -> Result<Self> {
        GridDomain::new(vec![lo; n], vec![hi; n], vec![res; n])
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn len(&self) -> usize {
        self.resolution.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn bounds(&self) -> BoxDomain {
        BoxDomain { lo: self.lo.clone(), hi: self.hi.clone() }
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.resolution[axis] - 1) as f64
    }

    pub fn coord(&self, axis: usize, i: usize) -> f64 {
        if i + 1 == self.resolution[axis] {
            self.hi[axis]
        } else {
            self.lo[axis] + self.spacing(axis) * i as f64
        }
    }

    pub fn multi_index(&self, mut idx: usize) -> Vec<usize> {
        self.resolution
            .iter()
            .map(|&r| {
                let i = idx % r;
                idx /= r;
                i
            })
            .collect()
    }

    pub fn point(&self, idx: usize) -> Vec<f64> {
        self.multi_index(idx).iter().enumerate().map(|(a, &i)| self.coord(a, i)).collect()
    }

    pub fn is_boundary(&self, idx: usize) -> bool {
        self.multi_index(idx).iter().zip(&self.resolution).any(|(&i, &r)| i == 0 || i + 1 == r)
    }

    /// Axis neighbours of lattice point `idx` (4-connectivity in 2-D).
    pub fn neighbors(&self, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let mi = self.multi_index(idx);
        let mut stride = 1;
        let mut out = Vec::with_capacity(2 * self.dim());
        for (a, &r) in self.resolution.iter().enumerate() {
            if mi[a] > 0 {
                out.push(idx - stride);
            }
            if mi[a] + 1 < r {
                out.push(idx + stride);
            }
            stride *= r;
        }
        out.into_iter()
    }
}

/// Scalar evaluator usable from worker threads.
pub type ScalarFn<'a> = dyn Fn(&[f64]) -> Result<f64> + Sync + 'a;

/// `f` at every lattice point, in lattice order.
pub fn evaluate_grid(f: &ScalarFn, g: &GridDomain) -> Result<Vec<f64>> {
    (0..g.len())
        .into_par_iter()
        .map(|i| {
            let v = f(&g.point(i))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite(format!("grid value {v} at lattice index {i} ({:?})", g.multi_index(i))))
            }
        })
        .collect()
}

/// Which lattice edges a component reaches: `[axis0 low, axis0 high, axis1 low, axis1 high]`.
pub type EdgeFlags = [bool; 4];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Component {
    pub cell_count: usize,
    pub touches_boundary: bool,
    pub bounded: bool,
    pub edges: EdgeFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TunnelVerdict {
    TunnelPresent,
    BoundedComponentExists,
    /// One side of the level is empty at this `c`.
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LevelSetReport {
    pub level_c: f64,
    pub components_sub: Vec<Component>,
    pub components_super: Vec<Component>,
    pub tunnel_verdict: TunnelVerdict,
    pub band_cells: usize,
    /// Boundary lattice values straddle `c`, so the level set meets the boundary.
    pub level_intersects_boundary: bool,
}

/// Lattice cell classification with respect to a level `c`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    Sub(usize),
    Super(usize),
    Band,
}

/// Component labels plus the summary report.
#[derive(Debug, Clone)]
pub struct Labeling {
    pub sides: Vec<Side>,
    pub report: LevelSetReport,
}

struct UnionFind {
    parent: Vec<usize>,
    rank: Vec<u8>,
}

impl UnionFind {
    fn new(n: usize) -> Self {
        UnionFind { parent: (0..n).collect(), rank: vec![0; n] }
    }

    fn find(&mut self, mut x: usize) -> usize {
        while self.parent[x] != x {
            self.parent[x] = self.parent[self.parent[x]];
            x = self.parent[x];
        }
        x
    }

    fn union(&mut self, a: usize, b: usize) {
        let (ra, rb) = (self.find(a), self.find(b));
        if ra == rb {
            return;
        }
        match self.rank[ra].cmp(&self.rank[rb]) {
            std::cmp::Ordering::Less => self.parent[ra] = rb,
            std::cmp::Ordering::Greater => self.parent[rb] = ra,
            std::cmp::Ordering::Equal => {
                self.parent[rb] = ra;
                self.rank[ra] += 1;
            }
        }
    }
}

/// Labels components of `{f < c}` and `{f > c}` on a 1-D or 2-D lattice.
///
/// A point joins the level band when `|f − c|` is below half the largest jump
/// to a lattice neighbour, i.e. when the level passes within about one cell.
pub fn label_components(field: &[f64], g: &GridDomain, c: f64) -> Result<Labeling> {
    if !(1..=2).contains(&g.dim()) {
        return Err(Error::InvalidArgument(format!("component analysis supports 1-D and 2-D grids, got {}-D", g.dim())));
    }
    if field.len() != g.len() {
        return Err(Error::Dimension(format!("field has {} values, grid has {} points", field.len(), g.len())));
    }
    let n = g.len();
    // 0 = band, 1 = sub, 2 = super
    let class: Vec<u8> = (0..n)
        .map(|i| {
            let d = field[i] - c;
            let jump = g.neighbors(i).map(|j| (field[j] - field[i]).abs()).fold(0.0, f64::max);
            if d.abs() < 0.5 * jump || d == 0.0 {
                0
            } else if d < 0.0 {
                1
            } else {
                2
            }
        })
        .collect();
    let mut uf = UnionFind::new(n);
    for i in 0..n {
        if class[i] == 0 {
            continue;
        }
        for j in g.neighbors(i) {
            if j > i && class[j] == class[i] {
                uf.union(i, j);
            }
        }
    }
    let mut root_to_comp: std::collections::HashMap<usize, (u8, usize)> = std::collections::HashMap::new();
    let mut sub: Vec<Component> = Vec::new();
    let mut sup: Vec<Component> = Vec::new();
    let mut sides = vec![Side::Band; n];
    let mut band = 0;
    for i in 0..n {
        if class[i] == 0 {
            band += 1;
            continue;
        }
        let root = uf.find(i);
        let (cls, idx) = *root_to_comp.entry(root).or_insert_with(|| {
            let list = if class[i] == 1 { &mut sub } else { &mut sup };
            list.push(Component { cell_count: 0, touches_boundary: false, bounded: true, edges: [false; 4] });
            (class[i], list.len() - 1)
        });
        let comp = if cls == 1 { &mut sub[idx] } else { &mut sup[idx] };
        comp.cell_count += 1;
        let mi = g.multi_index(i);
        for (a, (&ia, &r)) in mi.iter().zip(&g.resolution).enumerate() {
            if ia == 0 {
                comp.edges[2 * a] = true;
            }
            if ia + 1 == r {
                comp.edges[2 * a + 1] = true;
            }
        }
        sides[i] = if cls == 1 { Side::Sub(idx) } else { Side::Super(idx) };
    }
    for comp in sub.iter_mut().chain(sup.iter_mut()) {
        comp.touches_boundary = comp.edges.iter().any(|&e| e);
        comp.bounded = !comp.touches_boundary;
    }
    let tunnel_verdict = if sub.is_empty() || sup.is_empty() {
        TunnelVerdict::Empty
    } else if sub.iter().chain(&sup).any(|c| c.bounded) {
        TunnelVerdict::BoundedComponentExists
    } else {
        TunnelVerdict::TunnelPresent
    };
    let (mut below, mut above) = (false, false);
    for i in (0..n).filter(|&i| g.is_boundary(i)) {
        below |= field[i] <= c;
        above |= field[i] >= c;
    }
    Ok(Labeling {
        sides,
        report: LevelSetReport {
            level_c: c,
            components_sub: sub,
            components_super: sup,
            tunnel_verdict,
            band_cells: band,
            level_intersects_boundary: below && above,
        },
    })
}

/// Component report of `{f < c}` and `{f > c}`.
pub fn level_components(field: &[f64], g: &GridDomain, c: f64) -> Result<LevelSetReport> {
    Ok(label_components(field, g, c)?.report)
}

/// 1-D check that no strict sub- or super-level component of `f` at `c` is
/// confined to the interior of `[lo, hi]`.
pub fn tunnel_check_1d(f: &ScalarFn, lo: f64, hi: f64, c: f64, resolution: usize) -> Result<bool> {
    let g = GridDomain::new(vec![lo], vec![hi], vec![resolution])?;
    let field = evaluate_grid(f, &g)?;
    let report = level_components(&field, &g, c)?;
    Ok(report.components_sub.iter().chain(&report.components_super).all(|c| c.touches_boundary))
}

/// XOR tunnel signature on a 2-D lattice: one super-level component reaches
/// both axis-1 edges and covers a lattice point with `‖x‖_∞ ≤ radius`. The two
/// outer lobes of the upper class then join through the origin instead of
/// meeting the lower class in a saddle.
pub fn super_tunnel_through_origin(lab: &Labeling, g: &GridDomain, radius: f64) -> bool {
    if g.dim() != 2 {
        return false;
    }
    let spanning: Vec<bool> = lab.report.components_super.iter().map(|c| c.edges[2] && c.edges[3]).collect();
    lab.sides.iter().enumerate().any(|(idx, s)| match *s {
        Side::Super(i) => spanning[i] && g.point(idx).iter().all(|v| v.abs() <= radius),
        _ => false,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub location: Vec<f64>,
    pub grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticalSearchResult {
    pub found: bool,
    pub location: Vec<f64>,
    pub grad_norm: f64,
    pub refined: bool,
    /// Every refined seed, best first.
    pub candidates: Vec<Candidate>,
    /// Smallest lattice value of `‖∇Φ‖_∞` before refinement.
    pub coarse_min: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SearchOptions {
    /// Number of lattice local minima of `‖∇Φ‖_∞` to refine.
    pub seeds: usize,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for SearchOptions {
    fn default() -> Self {
        SearchOptions { seeds: 8, tol: 1e-8, max_iter: 100 }
    }
}

fn grad_at(model: &ResNetModel, x: &[f64]) -> Result<Vec<f64>> {
    Ok(input_gradient(model, x)?.grad.0)
}

fn norm2(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn norm_inf(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, a| m.max(a.abs()))
}

/// Damped Gauss–Newton on `‖∇Φ‖²` starting from `x0`, kept inside `domain`.
///
/// The Hessian of `Φ` comes from central differences of the exact gradient;
/// a step is halved until `‖∇Φ‖₂` decreases.
fn refine(model: &ResNetModel, domain: &BoxDomain, x0: &[f64], opts: &SearchOptions) -> Result<Candidate> {
    let n = x0.len();
    let mut x = x0.to_vec();
    let mut g = grad_at(model, &x)?;
    let mut gn = norm2(&g);
    let width = domain.radius().iter().fold(0.0_f64, |m, r| m.max(*r));
    for _ in 0..opts.max_iter {
        if gn == 0.0 {
            break;
        }
        let h = 1e-6 * width.max(1e-3);
        let mut hess = Mat64::zeros(n, n);
        let mut xp = x.clone();
        for j in 0..n {
            xp[j] = x[j] + h;
            let gp = grad_at(model, &xp)?;
            xp[j] = x[j] - h;
            let gm = grad_at(model, &xp)?;
            xp[j] = x[j];
            for i in 0..n {
                hess[(i, j)] = (gp[i] - gm[i]) / (2.0 * h);
            }
        }
        let neg_g: Vec<f64> = g.iter().map(|v| -v).collect();
        let step = match lu_solve(&hess, &neg_g) {
            Some(s) => s,
            // Singular Hessian: steepest descent on ‖∇Φ‖², direction −Hᵀg.
            None => {
                let d = hess.vecmat(&g);
                let dn = norm2(&d).max(1e-300);
                d.iter().map(|v| -v / dn * 0.1 * width).collect()
            }
        };
        let mut t = 1.0;
        let mut improved = false;
        for _ in 0..40 {
            let mut cand: Vec<f64> = x.iter().zip(&step).map(|(a, s)| a + t * s).collect();
            domain.clamp(&mut cand);
            let gc = grad_at(model, &cand)?;
            let gcn = norm2(&gc);
            if gcn < gn {
                x = cand;
                g = gc;
                gn = gcn;
                improved = true;
                break;
            }
            t *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Ok(Candidate { location: x, grad_norm: norm_inf(&g) })
}

/// Looks for a zero of `∇_x Φ` in the lattice box.
///
/// The lattice local minima of `‖∇Φ‖_∞` with the smallest values seed the
/// refinement; `found` means some refined point has `‖∇Φ‖_∞ < tol`.
pub fn critical_point_search_with(model: &ResNetModel, g: &GridDomain, opts: &SearchOptions) -> Result<CriticalSearchResult> {
    if model.n_out() != 1 {
        return Err(Error::InvalidArgument("critical point search needs a scalar model".into()));
    }
    if g.dim() != model.n_in() {
        return Err(Error::Dimension(format!("grid is {}-D, model input is {}-D", g.dim(), model.n_in())));
    }
    let norms: Vec<f64> = (0..g.len())
        .into_par_iter()
        .map(|i| Ok(norm_inf(&grad_at(model, &g.point(i))?)))
        .collect::<Result<_>>()?;
    let mut minima: Vec<usize> = (0..g.len())
        .filter(|&i| g.neighbors(i).all(|j| norms[j] >= norms[i]))
        .collect();
    minima.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    minima.truncate(opts.seeds.max(1));
    let coarse_min = norms.iter().copied().fold(f64::INFINITY, f64::min);

    let domain = g.bounds();
    let mut candidates: Vec<Candidate> = minima
        .par_iter()
        .map(|&i| refine(model, &domain, &g.point(i), opts))
        .collect::<Result<_>>()?;
    candidates.sort_by(|a, b| a.grad_norm.total_cmp(&b.grad_norm));
    let best = candidates.first().cloned().unwrap_or(Candidate { location: g.point(0), grad_norm: norms[0] });
    Ok(CriticalSearchResult {
        found: best.grad_norm < opts.tol,
        location: best.location,
        grad_norm: best.grad_norm,
        refined: true,
        candidates,
        coarse_min,
    })
}

pub fn critical_point_search(model: &ResNetModel, g: &GridDomain) -> Result<CriticalSearchResult> {
    critical_point_search_with(model, g, &SearchOptions::default())
}

/// Threshold `c*` maximising accuracy of the rule "class 1 iff value > c".
///
/// Ties go to the midpoint of the best threshold interval, except that 0.5
/// is kept whenever it already attains the best accuracy. A single-class
/// input returns the midpoint of the value range.
pub fn decision_boundary_level(values: &[f64], labels: &[bool]) -> Result<f64> {
    if values.is_empty() || values.len() != labels.len() {
        return Err(Error::Dimension(format!("{} values with {} labels", values.len(), labels.len())));
    }
    let (vmin, vmax) = values.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let positives = labels.iter().filter(|&&l| l).count();
    if positives == 0 || positives == labels.len() {
        return Ok(0.5 * (vmin + vmax));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    // Threshold below everything: all predicted positive.
    let mut correct = positives as i64;
    let mut best = correct;
    let mut best_interval = (f64::NEG_INFINITY, values[order[0]]);
    let mut k = 0;
    while k < order.len() {
        let v = values[order[k]];
        while k < order.len() && values[order[k]] == v {
            correct += if labels[order[k]] { -1 } else { 1 };
            k += 1;
        }
        let next = if k < order.len() { values[order[k]] } else { f64::INFINITY };
        if correct > best {
            best = correct;
            best_interval = (v, next);
        }
    }
    let acc_at = |c: f64| values.iter().zip(labels).filter(|(&v, &l)| (v > c) == l).count() as i64;
    if acc_at(0.5) == best {
        return Ok(0.5);
    }
    let (a, b) = best_interval;
    let pad = 1e-9 * (1.0 + vmax.abs().max(vmin.abs()));
    Ok(match (a.is_finite(), b.is_finite()) {
        (true, true) => 0.5 * (a + b),
        (false, true) => b - pad,
        (true, false) => a + pad,
        (false, false) => 0.5 * (vmin + vmax),
    })
}

/// Fraction of labelled values classified correctly at level `c`.
pub fn accuracy_at(values: &[f64], labels: &[bool], c: f64) -> f64 {
    let ok = values.iter().zip(labels).filter(|(&v, &l)| (v > c) == l).count();
    ok as f64 / values.len().max(1) as f64
}
