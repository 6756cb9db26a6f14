//! Element tensors and global operators for the four-field formulation of
//! linearized poroelastic consolidation (displacement u, total pressure p_T,
//! flux z, fluid pressure p, plus facet traces ū, p̄_T, p̄).
//!
//! The bilinear form is
//!
//!   a(x, y) = d(u, v) + b(v, p_T) + b(u, q_T)
//!           + κ⁻¹(z, w) + b(w, p) + b(z, q)
//!           − c₀(p, q) − λ⁻¹(αp − p_T, αq − q_T)
//!
//! with the interior-penalty elasticity form
//!
//!   d(u, v) = (με(u), ε(v))_K + (ημ/h_K)⟨u−ū, v−v̄⟩_∂K
//!           − ⟨με(u)n, v−v̄⟩_∂K − ⟨με(v)n, u−ū⟩_∂K
//!
//! and the shared divergence kernel b(v, q) = −(q, ∇·v)_K + ⟨q̄, v·n⟩_∂K,
//! which couples (u; p_T, p̄_T) and (z; p, p̄) identically. All facet
//! integrals are accumulated cell-wise over ∂K, so interior facets receive
//! two one-sided contributions, each weighted with its own cell diameter h_K.
//! The right-hand side realizes (f, v) − (g, q); the sign flip on the flow
//! equation keeps the global operator symmetric (and indefinite — pair it
//! with MINRES, not CG).
//!
//! Everything is assembled per cell into dense local blocks and scattered
//! into precomputed sparsity patterns; pattern construction needs only mesh
//! adjacency. Element loops are independent per cell and the assembled
//! operators immutable, so the cell loop parallelizes trivially if ever
//! needed; it is kept serial for bit-reproducible accumulation order.

use crate::fe_basis::{quadrature, trace_points_permuted, QuadratureRule};
use crate::mesh::{reference_measure, Mesh, NO_CELL};
use crate::sparse::{scatter_dense, CsrMatrix, SparsityPattern};
use crate::spaces::{Field, Spaces};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};
use std::collections::HashMap;
use std::sync::Arc;

/// Physical and discretization parameters of one solve.
///
/// The time step enters through κ (= τ·permeability) and the time-discrete
/// right-hand side; see [`assemble_timestep_rhs`]. μ is the full shear factor
/// appearing in the operator (twice the Lamé shear modulus).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModelParams {
    pub dim: usize,
    pub k: usize,
    pub mu: f64,
    pub lambda: f64,
    pub alpha: f64,
    pub c0: f64,
    pub kappa: f64,
    /// Interior penalty weight; defaults to 2·dim·k².
    pub eta: f64,
}

impl ModelParams {
    pub fn new(
        dim: usize,
        k: usize,
        mu: f64,
        lambda: f64,
        alpha: f64,
        c0: f64,
        kappa: f64,
    ) -> Self {
        let eta = 2.0 * dim as f64 * (k * k) as f64;
        ModelParams { dim, k, mu, lambda, alpha, c0, kappa, eta }
    }

    pub fn with_eta(mut self, eta: f64) -> Self {
        self.eta = eta;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.mu > 0.0 && self.mu.is_finite()) {
            return bad(format!("mu must be positive, got {}", self.mu));
        }
        if !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return bad(format!("lambda must be positive, got {}", self.lambda));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return bad(format!("alpha must lie in (0, 1], got {}", self.alpha));
        }
        if !(self.c0 >= 0.0 && self.c0.is_finite()) {
            return bad(format!("c0 must be non-negative, got {}", self.c0));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return bad(format!("kappa must be positive, got {}", self.kappa));
        }
        if !(self.eta > 1.0) {
            return bad(format!("penalty eta must exceed 1, got {}", self.eta));
        }
        if !(2..=3).contains(&self.dim) || self.k < 2 {
            return bad(format!("unsupported dim {} / degree {}", self.dim, self.k));
        }
        Ok(())
    }

    /// The solver theory assumes μ/λ bounded; flag grossly sheared regimes so
    /// drivers can log them. Never an error — the solve proceeds regardless.
    pub fn shear_coupling_warning(&self) -> bool {
        self.mu / self.lambda > 10.0
    }
}

/// Which preconditioner family to assemble: `P` uses weighted-norm blocks
/// (all SPD by construction), `PHat` replaces the u-block by the full
/// elasticity form d and the p-block by the reaction–diffusion form ã.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PcVariant {
    P,
    PHat,
}

/// Traction data for one boundary marker: the facet displacement test
/// functions gain ⟨t, v̄⟩ and the operator the symmetric exchange terms
/// −⟨p̄_T, v̄·n⟩ − ⟨q̄_T, ū·n⟩, so the multiplier row enforces (u−ū)·n = 0
/// while the trace row balances the full normal stress (με(u) − p̄_T·I)n = t.
pub struct TractionBc<'a> {
    pub marker: i32,
    pub traction: &'a dyn Fn(&[f64; 3]) -> [f64; 3],
}

pub(crate) const CELL_FIELDS: [Field; 4] = [Field::U, Field::PT, Field::Z, Field::P];
pub(crate) const TRACE_FIELDS: [Field; 3] = [Field::UBar, Field::PTBar, Field::PBar];

pub(crate) fn field_index(f: Field) -> usize {
    match f {
        Field::U => 0,
        Field::UBar => 1,
        Field::PT => 2,
        Field::PTBar => 3,
        Field::Z => 4,
        Field::P => 5,
        Field::PBar => 6,
    }
}

/// Cell-to-dof topology shared by the assembled operator, the preconditioner
/// blocks, and the condensation stage: per-cell trace connectivity with the
/// free/constrained split baked in.
#[derive(Debug)]
pub(crate) struct CellTopology {
    pub dim: usize,
    pub ncells: usize,
    /// facets per cell (dim + 1)
    pub nfc: usize,
    /// dofs per cell for (u, p_T, z, p)
    pub cell_sizes: [usize; 4],
    /// dofs per facet for (ū, p̄_T, p̄)
    pub facet_sizes: [usize; 3],
    pub n_free: [usize; 7],
    /// field-LOCAL free dof id (or u32::MAX when constrained) for every local
    /// trace slot, cell-major, facets in local order, fields (ū, p̄_T, p̄)
    /// within each facet
    pub trace_ids: Vec<u32>,
    /// prescribed value for constrained slots (0 for free), same layout
    pub trace_lift: Vec<f64>,
}

impl CellTopology {
    pub fn build(mesh: &Mesh, spaces: &Spaces) -> Self {
        let dim = mesh.dim();
        let nfc = dim + 1;
        let ncells = mesh.n_cells();
        let fs = spaces.facet_field_sizes();
        let n2f: usize = fs.iter().sum();
        let mut trace_ids = Vec::with_capacity(ncells * nfc * n2f);
        let mut trace_lift = vec![0.0; ncells * nfc * n2f];
        for c in 0..ncells {
            for lf in 0..nfc {
                let f = mesh.cell_facet(c, lf);
                for tf in TRACE_FIELDS {
                    let map = spaces.map(tf);
                    for &id in map.dofs_of(f) {
                        if map.is_constrained(id) {
                            trace_lift[trace_ids.len()] = map.constrained_value(id);
                            trace_ids.push(u32::MAX);
                        } else {
                            trace_ids.push(id);
                        }
                    }
                }
            }
        }
        let mut n_free = [0usize; 7];
        for f in Field::ALL {
            n_free[field_index(f)] = spaces.map(f).n_free;
        }
        CellTopology {
            dim,
            ncells,
            nfc,
            cell_sizes: spaces.cell_field_sizes(),
            facet_sizes: fs,
            n_free,
            trace_ids,
            trace_lift,
        }
    }

    pub fn n1(&self) -> usize {
        self.cell_sizes.iter().sum()
    }

    pub fn n2f(&self) -> usize {
        self.facet_sizes.iter().sum()
    }

    pub fn n2(&self) -> usize {
        self.nfc * self.n2f()
    }

    pub fn n_free_field(&self, f: Field) -> usize {
        self.n_free[field_index(f)]
    }

    pub fn n_trace(&self) -> usize {
        TRACE_FIELDS.iter().map(|&f| self.n_free_field(f)).sum()
    }

    /// Offset of a trace field inside the concatenated trace vector.
    pub fn trace_offset(&self, f: Field) -> usize {
        match f {
            Field::UBar => 0,
            Field::PTBar => self.n_free_field(Field::UBar),
            Field::PBar => self.n_free_field(Field::UBar) + self.n_free_field(Field::PTBar),
            _ => panic!("not a trace field"),
        }
    }

    pub fn cell_trace_ids(&self, c: usize) -> &[u32] {
        let n2 = self.n2();
        &self.trace_ids[c * n2..(c + 1) * n2]
    }

    pub fn cell_trace_lift(&self, c: usize) -> &[f64] {
        let n2 = self.n2();
        &self.trace_lift[c * n2..(c + 1) * n2]
    }

    /// Concatenated-trace-vector ids (or MAX) for a cell's local trace slots.
    pub fn condensed_ids(&self, c: usize, out: &mut Vec<u32>) {
        out.clear();
        let ids = self.cell_trace_ids(c);
        let mut slot = 0;
        for _ in 0..self.nfc {
            for (fi, &tf) in TRACE_FIELDS.iter().enumerate() {
                let off = self.trace_offset(tf) as u32;
                for _ in 0..self.facet_sizes[fi] {
                    let id = ids[slot];
                    out.push(if id == u32::MAX { u32::MAX } else { off + id });
                    slot += 1;
                }
            }
        }
    }

    /// (local slot within the full element block, field-local global id) for
    /// every dof of a field on cell `c`. Cell-field slots precede trace slots.
    fn scatter_list(&self, c: usize, f: Field, out: &mut Vec<(usize, u32)>) {
        out.clear();
        match f {
            Field::U | Field::PT | Field::Z | Field::P => {
                let fi = CELL_FIELDS.iter().position(|&g| g == f).unwrap();
                let local: usize = self.cell_sizes[..fi].iter().sum();
                let stride = self.cell_sizes[fi];
                for j in 0..stride {
                    out.push((local + j, (c * stride + j) as u32));
                }
            }
            _ => {
                let fi = TRACE_FIELDS.iter().position(|&g| g == f).unwrap();
                let sub: usize = self.facet_sizes[..fi].iter().sum();
                let n1 = self.n1();
                let n2f = self.n2f();
                let ids = self.cell_trace_ids(c);
                for lf in 0..self.nfc {
                    for j in 0..self.facet_sizes[fi] {
                        let slot = lf * n2f + sub + j;
                        out.push((n1 + slot, ids[slot]));
                    }
                }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Reference tables: everything evaluable before touching cell geometry.

struct TraceTable {
    /// ℙ_k cell basis values at facet quadrature points (nk × nq)
    phi_k: DMatrix<f64>,
    /// reference gradients per point (nk × dim each)
    grad_k: Vec<DMatrix<f64>>,
    phi_m: DMatrix<f64>,
    grad_m: Vec<DMatrix<f64>>,
}

struct RefTables {
    dim: usize,
    nk: usize,
    nm: usize,
    nf: usize,
    cellq: QuadratureRule,
    phi_k: DMatrix<f64>,
    grad_k: Vec<DMatrix<f64>>,
    phi_m: DMatrix<f64>,
    grad_m: Vec<DMatrix<f64>>,
    facetq: QuadratureRule,
    /// facet basis at facet quadrature points (nf × nq)
    psi: DMatrix<f64>,
    /// cell-side tables keyed by (local facet, vertex permutation)
    trace: HashMap<(u8, [u8; 3]), TraceTable>,
}

impl RefTables {
    fn new(mesh: &Mesh, spaces: &Spaces) -> Result<Self> {
        let dim = mesh.dim();
        let k = spaces.k;
        let exactness = 2 * k + 2;
        let cellq = quadrature(dim, exactness)?;
        let facetq = quadrature(dim - 1, exactness)?;
        let nk = spaces.cell_k.size();
        let nm = spaces.cell_km1.size();
        let nf = spaces.facet.size();

        let mut phi_k = DMatrix::zeros(nk, cellq.len());
        let mut phi_m = DMatrix::zeros(nm, cellq.len());
        let mut grad_k = Vec::with_capacity(cellq.len());
        let mut grad_m = Vec::with_capacity(cellq.len());
        for q in 0..cellq.len() {
            let p = cellq.point(q);
            phi_k.set_column(q, &spaces.cell_k.values(p));
            phi_m.set_column(q, &spaces.cell_km1.values(p));
            grad_k.push(spaces.cell_k.gradients(p));
            grad_m.push(spaces.cell_km1.gradients(p));
        }

        let mut psi = DMatrix::zeros(nf, facetq.len());
        for q in 0..facetq.len() {
            psi.set_column(q, &spaces.facet.values(facetq.point(q)));
        }

        // All (local facet, permutation) combinations that occur in the mesh.
        let mut trace = HashMap::new();
        for facet in mesh.facets() {
            for side in &facet.sides {
                if side.cell == NO_CELL {
                    continue;
                }
                let key = (side.local_facet, side.perm);
                if trace.contains_key(&key) {
                    continue;
                }
                let pts = trace_points_permuted(
                    dim,
                    side.local_facet as usize,
                    &side.perm,
                    &facetq.points,
                );
                let nq = facetq.len();
                let mut tphi_k = DMatrix::zeros(nk, nq);
                let mut tphi_m = DMatrix::zeros(nm, nq);
                let mut tgrad_k = Vec::with_capacity(nq);
                let mut tgrad_m = Vec::with_capacity(nq);
                for q in 0..nq {
                    let p = &pts[q * dim..(q + 1) * dim];
                    tphi_k.set_column(q, &spaces.cell_k.values(p));
                    tphi_m.set_column(q, &spaces.cell_km1.values(p));
                    tgrad_k.push(spaces.cell_k.gradients(p));
                    tgrad_m.push(spaces.cell_km1.gradients(p));
                }
                trace.insert(
                    key,
                    TraceTable { phi_k: tphi_k, grad_k: tgrad_k, phi_m: tphi_m, grad_m: tgrad_m },
                );
            }
        }
        Ok(RefTables { dim, nk, nm, nf, cellq, phi_k, grad_k, phi_m, grad_m, facetq, psi, trace })
    }
}

// ---------------------------------------------------------------------------
// Per-cell geometry: physical weights, pushed gradients, facet normals.

struct FacetGeomData<'t> {
    /// physical quadrature weights
    w: Vec<f64>,
    normal: [f64; 3],
    table: &'t TraceTable,
    /// physical cell-basis gradients at facet points
    grad_k: Vec<DMatrix<f64>>,
    grad_m: Vec<DMatrix<f64>>,
}

struct CellGeom<'t> {
    h: f64,
    /// physical volume weights
    w: Vec<f64>,
    grad_k: Vec<DMatrix<f64>>,
    grad_m: Vec<DMatrix<f64>>,
    facets: Vec<FacetGeomData<'t>>,
    jac: crate::mesh::AffineMap,
}

impl<'t> CellGeom<'t> {
    fn new(mesh: &Mesh, tables: &'t RefTables, cell: usize) -> Self {
        let dim = tables.dim;
        let map = mesh.affine_map(cell);
        // physical gradient rows: G_phys = G_ref · Jinv, Jinv[(r,c)] = (J⁻¹)[r][c]
        let mut jinv = DMatrix::zeros(dim, dim);
        for r in 0..dim {
            for c in 0..dim {
                jinv[(r, c)] = map.inverse_jacobian[r][c];
            }
        }
        let w: Vec<f64> = tables.cellq.weights.iter().map(|&wq| wq * map.det).collect();
        let grad_k: Vec<_> = tables.grad_k.iter().map(|g| g * &jinv).collect();
        let grad_m: Vec<_> = tables.grad_m.iter().map(|g| g * &jinv).collect();
        let h = mesh.cell_diameter(cell);

        let fref = reference_measure(dim - 1);
        let mut facets = Vec::with_capacity(dim + 1);
        for lf in 0..=dim {
            let f = mesh.cell_facet(cell, lf);
            let facet = mesh.facet(f);
            let side = facet
                .sides
                .iter()
                .find(|s| s.cell as usize == cell && s.local_facet as usize == lf)
                .expect("cell-facet adjacency is consistent");
            let table = &tables.trace[&(side.local_facet, side.perm)];
            let scale = mesh.facet_area(f) / fref;
            let wf: Vec<f64> = tables.facetq.weights.iter().map(|&wq| wq * scale).collect();
            facets.push(FacetGeomData {
                w: wf,
                normal: mesh.outward_normal(cell, lf),
                grad_k: table.grad_k.iter().map(|g| g * &jinv).collect(),
                grad_m: table.grad_m.iter().map(|g| g * &jinv).collect(),
                table,
            });
        }
        CellGeom { h, w, grad_k, grad_m, facets, jac: map }
    }
}

// ---------------------------------------------------------------------------
// Element kernels. Each adds its contribution into a dense local matrix at
// caller-chosen offsets, so the same kernels serve the full operator, the
// standalone element tensors, and the preconditioner blocks.

/// (με(u), ε(v))_K at rows/cols `off`: vector ℙ_k, component-major.
fn add_vector_strain(m: &mut DMatrix<f64>, off: usize, mu: f64, t: &RefTables, g: &CellGeom) {
    let (dim, nk) = (t.dim, t.nk);
    for q in 0..g.w.len() {
        let wq = mu * g.w[q];
        let gq = &g.grad_k[q];
        for b in 0..nk {
            for b2 in 0..nk {
                let dot: f64 = (0..dim).map(|r| gq[(b, r)] * gq[(b2, r)]).sum();
                for c in 0..dim {
                    for c2 in 0..dim {
                        let sym = if c == c2 { dot } else { 0.0 };
                        let v = 0.5 * wq * (sym + gq[(b, c2)] * gq[(b2, c)]);
                        m[(off + c * nk + b, off + c2 * nk + b2)] += v;
                    }
                }
            }
        }
    }
}

/// coef·⟨(u−ū), (v−v̄)⟩_F over one facet: cell block at `off_c`, facet trace
/// block at `off_f`; `comps` components with cell basis size `ncb`.
#[allow(clippy::too_many_arguments)]
fn add_jump_stab(
    m: &mut DMatrix<f64>,
    off_c: usize,
    off_f: usize,
    coef: f64,
    comps: usize,
    ncb: usize,
    nf: usize,
    cell_vals: &DMatrix<f64>,
    psi: &DMatrix<f64>,
    w: &[f64],
) {
    for (q, &wq) in w.iter().enumerate() {
        let s = coef * wq;
        for c in 0..comps {
            for b in 0..ncb {
                let pb = cell_vals[(b, q)];
                for b2 in 0..ncb {
                    m[(off_c + c * ncb + b, off_c + c * ncb + b2)] += s * pb * cell_vals[(b2, q)];
                }
                for l in 0..nf {
                    let v = -s * pb * psi[(l, q)];
                    m[(off_c + c * ncb + b, off_f + c * nf + l)] += v;
                    m[(off_f + c * nf + l, off_c + c * ncb + b)] += v;
                }
            }
            for l in 0..nf {
                let pl = psi[(l, q)];
                for l2 in 0..nf {
                    m[(off_f + c * nf + l, off_f + c * nf + l2)] += s * pl * psi[(l2, q)];
                }
            }
        }
    }
}

/// −⟨με(u)n, v−v̄⟩_F − ⟨με(v)n, u−ū⟩_F over one facet.
#[allow(clippy::too_many_arguments)]
fn add_strain_consistency(
    m: &mut DMatrix<f64>,
    off_c: usize,
    off_f: usize,
    mu: f64,
    t: &RefTables,
    fg: &FacetGeomData,
) {
    let (dim, nk, nf) = (t.dim, t.nk, t.nf);
    let n = &fg.normal;
    for (q, &wq) in fg.w.iter().enumerate() {
        let gq = &fg.grad_k[q];
        let vals = &fg.table.phi_k;
        // traction rows: tq[(c·nk+b, c2)] = (με(φ_{c,b})·n)_{c2}
        for b in 0..nk {
            let gn: f64 = (0..dim).map(|r| gq[(b, r)] * n[r]).sum();
            for c in 0..dim {
                for c2 in 0..dim {
                    let tr = 0.5 * mu * (if c == c2 { gn } else { 0.0 } + gq[(b, c2)] * n[c]);
                    if tr == 0.0 {
                        continue;
                    }
                    let i = off_c + c * nk + b;
                    // against cell test values (component c2)
                    for b2 in 0..nk {
                        let v = wq * tr * vals[(b2, q)];
                        m[(i, off_c + c2 * nk + b2)] -= v;
                        m[(off_c + c2 * nk + b2, i)] -= v;
                    }
                    // against facet test values (jump sign: −ψ)
                    for l in 0..nf {
                        let v = wq * tr * t.psi[(l, q)];
                        m[(i, off_f + c2 * nf + l)] += v;
                        m[(off_f + c2 * nf + l, i)] += v;
                    }
                }
            }
        }
    }
}

/// b(v, q) = −(q, ∇·v)_K + ⟨q̄, v·n⟩_∂K: rows are the vector field at
/// `off_v`, columns the cell scalar at `off_q` and per-facet traces at
/// `off_qbar[lf]`. When `sym`, the transposed entries are written too (the
/// full operator contains both b(v, p) and b(u, q)).
#[allow(clippy::too_many_arguments)]
fn add_divergence(
    m: &mut DMatrix<f64>,
    off_v: usize,
    off_q: usize,
    off_qbar: &[usize],
    sym: bool,
    t: &RefTables,
    g: &CellGeom,
) {
    let (dim, nk, nm, nf) = (t.dim, t.nk, t.nm, t.nf);
    for q in 0..g.w.len() {
        let wq = g.w[q];
        let gq = &g.grad_k[q];
        for mm in 0..nm {
            let pm = t.phi_m[(mm, q)];
            for c in 0..dim {
                for b in 0..nk {
                    let v = -wq * pm * gq[(b, c)];
                    m[(off_v + c * nk + b, off_q + mm)] += v;
                    if sym {
                        m[(off_q + mm, off_v + c * nk + b)] += v;
                    }
                }
            }
        }
    }
    for (lf, fg) in g.facets.iter().enumerate() {
        let n = &fg.normal;
        for (q, &wq) in fg.w.iter().enumerate() {
            for l in 0..nf {
                let pl = t.psi[(l, q)];
                for c in 0..dim {
                    for b in 0..nk {
                        let v = wq * pl * n[c] * fg.table.phi_k[(b, q)];
                        m[(off_v + c * nk + b, off_qbar[lf] + l)] += v;
                        if sym {
                            m[(off_qbar[lf] + l, off_v + c * nk + b)] += v;
                        }
                    }
                }
            }
        }
    }
}

/// coef·(φ_i, φ_j)_K mass on the ℙ_{k−1} scalar basis at `off`.
fn add_scalar_mass(m: &mut DMatrix<f64>, off: usize, coef: f64, t: &RefTables, g: &CellGeom) {
    for q in 0..g.w.len() {
        let s = coef * g.w[q];
        for i in 0..t.nm {
            let pi = t.phi_m[(i, q)];
            for j in 0..t.nm {
                m[(off + i, off + j)] += s * pi * t.phi_m[(j, q)];
            }
        }
    }
}

/// coef·(φ_i, φ_j)_K mass on each component of the vector ℙ_k basis.
fn add_vector_mass(m: &mut DMatrix<f64>, off: usize, coef: f64, t: &RefTables, g: &CellGeom) {
    for q in 0..g.w.len() {
        let s = coef * g.w[q];
        for i in 0..t.nk {
            let pi = t.phi_k[(i, q)];
            for j in 0..t.nk {
                let v = s * pi * t.phi_k[(j, q)];
                for c in 0..t.dim {
                    m[(off + c * t.nk + i, off + c * t.nk + j)] += v;
                }
            }
        }
    }
}

/// coef·(∇p, ∇q)_K on the ℙ_{k−1} scalar basis.
fn add_scalar_stiffness(m: &mut DMatrix<f64>, off: usize, coef: f64, t: &RefTables, g: &CellGeom) {
    for q in 0..g.w.len() {
        let s = coef * g.w[q];
        let gq = &g.grad_m[q];
        for i in 0..t.nm {
            for j in 0..t.nm {
                let dot: f64 = (0..t.dim).map(|r| gq[(i, r)] * gq[(j, r)]).sum();
                m[(off + i, off + j)] += s * dot;
            }
        }
    }
}

/// −coef·⟨∇p·n, q−q̄⟩_F − coef·⟨∇q·n, p−p̄⟩_F over one facet (scalar ℙ_{k−1}
/// cell basis against the ℙ_k facet basis).
fn add_grad_consistency(
    m: &mut DMatrix<f64>,
    off_c: usize,
    off_f: usize,
    coef: f64,
    t: &RefTables,
    fg: &FacetGeomData,
) {
    let (dim, nm, nf) = (t.dim, t.nm, t.nf);
    let n = &fg.normal;
    for (q, &wq) in fg.w.iter().enumerate() {
        let gq = &fg.grad_m[q];
        for i in 0..nm {
            let gn: f64 = (0..dim).map(|r| gq[(i, r)] * n[r]).sum();
            let tr = coef * wq * gn;
            for j in 0..nm {
                let v = tr * fg.table.phi_m[(j, q)];
                m[(off_c + i, off_c + j)] -= v;
                m[(off_c + j, off_c + i)] -= v;
            }
            for l in 0..nf {
                let v = tr * t.psi[(l, q)];
                m[(off_c + i, off_f + l)] += v;
                m[(off_f + l, off_c + i)] += v;
            }
        }
    }
}

/// −λ⁻¹(αp − p_T, αq − q_T)_K on the (p_T, p) cell blocks.
fn add_lambda_coupling(
    m: &mut DMatrix<f64>,
    off_pt: usize,
    off_p: usize,
    params: &ModelParams,
    t: &RefTables,
    g: &CellGeom,
) {
    let il = 1.0 / params.lambda;
    let a = params.alpha;
    for q in 0..g.w.len() {
        let wq = g.w[q];
        for i in 0..t.nm {
            let pi = t.phi_m[(i, q)];
            for j in 0..t.nm {
                let mij = wq * pi * t.phi_m[(j, q)];
                m[(off_pt + i, off_pt + j)] -= il * mij;
                m[(off_pt + i, off_p + j)] += a * il * mij;
                m[(off_p + i, off_pt + j)] += a * il * mij;
                m[(off_p + i, off_p + j)] -= a * a * il * mij;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Standalone element tensors.

/// Local layout used by [`element_dh`] and the u-block of the preconditioner:
/// cell u dofs (component-major), then the facet ū dofs facet by facet.
pub fn element_dh(mesh: &Mesh, spaces: &Spaces, params: &ModelParams, cell: usize) -> DMatrix<f64> {
    let t = RefTables::new(mesh, spaces).expect("quadrature degree in range");
    let g = CellGeom::new(mesh, &t, cell);
    let dim = t.dim;
    let nu = dim * t.nk;
    let nfd = dim * t.nf;
    let n = nu + (dim + 1) * nfd;
    let mut m = DMatrix::zeros(n, n);
    add_vector_strain(&mut m, 0, params.mu, &t, &g);
    for (lf, fg) in g.facets.iter().enumerate() {
        let off_f = nu + lf * nfd;
        add_jump_stab(
            &mut m,
            0,
            off_f,
            params.eta * params.mu / g.h,
            dim,
            t.nk,
            t.nf,
            &fg.table.phi_k,
            &t.psi,
            &fg.w,
        );
        add_strain_consistency(&mut m, 0, off_f, params.mu, &t, fg);
    }
    m
}

/// The divergence coupling of one cell: rows are the cell vector field, the
/// columns the cell scalar followed by the facet traces facet by facet.
pub fn element_bh(mesh: &Mesh, spaces: &Spaces, cell: usize) -> DMatrix<f64> {
    let t = RefTables::new(mesh, spaces).expect("quadrature degree in range");
    let g = CellGeom::new(mesh, &t, cell);
    let dim = t.dim;
    let rows = dim * t.nk;
    let cols = t.nm + (dim + 1) * t.nf;
    let mut m = DMatrix::zeros(rows + cols, rows + cols);
    let off_qbar: Vec<usize> = (0..=dim).map(|lf| rows + t.nm + lf * t.nf).collect();
    add_divergence(&mut m, 0, rows, &off_qbar, false, &t, &g);
    m.view((0, rows), (rows, cols)).into()
}

// ---------------------------------------------------------------------------
// Global operator.

/// The assembled four-field operator and right-hand side, stored as sparse
/// blocks per (row field, column field) over free dofs. Dirichlet columns are
/// already lifted into the RHS; constrained rows are dropped.
pub struct BlockSystem {
    pub params: ModelParams,
    blocks: Vec<Option<CsrMatrix>>,
    /// per-field RHS over free dofs
    pub rhs: Vec<Vec<f64>>,
    topo: Arc<CellTopology>,
}

/// Field-pair couplings present in the operator. (u, z), (u, p̄),
/// (p̄, p̄), (p̄_T, p̄_T) and friends have no terms and stay absent.
const COUPLINGS: &[(Field, Field)] = &[
    (Field::U, Field::U),
    (Field::U, Field::UBar),
    (Field::UBar, Field::U),
    (Field::UBar, Field::UBar),
    (Field::U, Field::PT),
    (Field::PT, Field::U),
    (Field::U, Field::PTBar),
    (Field::PTBar, Field::U),
    (Field::PT, Field::PT),
    (Field::PT, Field::P),
    (Field::P, Field::PT),
    (Field::P, Field::P),
    (Field::Z, Field::Z),
    (Field::Z, Field::P),
    (Field::P, Field::Z),
    (Field::Z, Field::PBar),
    (Field::PBar, Field::Z),
];

const TRACTION_COUPLINGS: &[(Field, Field)] =
    &[(Field::UBar, Field::PTBar), (Field::PTBar, Field::UBar)];

fn build_pattern(
    topo: &CellTopology,
    rf: Field,
    cf: Field,
) -> SparsityPattern {
    let mut pairs = Vec::new();
    let mut rows = Vec::new();
    let mut cols = Vec::new();
    for c in 0..topo.ncells {
        topo.scatter_list(c, rf, &mut rows);
        if rf == cf {
            for &(_, r) in &rows {
                if r == u32::MAX {
                    continue;
                }
                for &(_, c2) in &rows {
                    if c2 != u32::MAX {
                        pairs.push((r, c2));
                    }
                }
            }
        } else {
            topo.scatter_list(c, cf, &mut cols);
            for &(_, r) in &rows {
                if r == u32::MAX {
                    continue;
                }
                for &(_, c2) in &cols {
                    if c2 != u32::MAX {
                        pairs.push((r, c2));
                    }
                }
            }
        }
    }
    SparsityPattern::from_pairs(topo.n_free_field(rf), topo.n_free_field(cf), &mut pairs)
}

/// Same-facet (ū, p̄_T) pairs on traction-marked boundary facets.
fn traction_pattern(
    mesh: &Mesh,
    spaces: &Spaces,
    topo: &CellTopology,
    markers: &[i32],
    rf: Field,
    cf: Field,
) -> SparsityPattern {
    let mut pairs = Vec::new();
    for (f, facet) in mesh.facets().iter().enumerate() {
        let marked =
            facet.is_boundary() && facet.marker.is_some_and(|m| markers.contains(&m));
        if !marked {
            continue;
        }
        let rmap = spaces.map(rf);
        let cmap = spaces.map(cf);
        for &r in rmap.dofs_of(f) {
            if rmap.is_constrained(r) {
                continue;
            }
            for &c in cmap.dofs_of(f) {
                if !cmap.is_constrained(c) {
                    pairs.push((r, c));
                }
            }
        }
    }
    SparsityPattern::from_pairs(topo.n_free_field(rf), topo.n_free_field(cf), &mut pairs)
}

impl BlockSystem {
    fn bidx(r: Field, c: Field) -> usize {
        field_index(r) * 7 + field_index(c)
    }

    pub fn block(&self, r: Field, c: Field) -> Option<&CsrMatrix> {
        self.blocks[Self::bidx(r, c)].as_ref()
    }

    pub fn n_free(&self, f: Field) -> usize {
        self.topo.n_free_field(f)
    }

    /// Offset of a field in the monolithic vector: cell fields (u, p_T, z, p)
    /// first, then traces (ū, p̄_T, p̄).
    pub fn field_offset(&self, f: Field) -> usize {
        let order =
            [Field::U, Field::PT, Field::Z, Field::P, Field::UBar, Field::PTBar, Field::PBar];
        let mut off = 0;
        for g in order {
            if g == f {
                return off;
            }
            off += self.n_free(g);
        }
        unreachable!()
    }

    pub fn n_total(&self) -> usize {
        Field::ALL.iter().map(|&f| self.n_free(f)).sum()
    }

    pub fn n_trace(&self) -> usize {
        self.topo.n_trace()
    }

    pub fn field_slice<'v>(&self, x: &'v [f64], f: Field) -> &'v [f64] {
        let off = self.field_offset(f);
        &x[off..off + self.n_free(f)]
    }

    /// Monolithic dense operator — oracle-scale only.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let n = self.n_total();
        let mut a = DMatrix::zeros(n, n);
        for rf in Field::ALL {
            for cf in Field::ALL {
                if let Some(b) = self.block(rf, cf) {
                    let (ro, co) = (self.field_offset(rf), self.field_offset(cf));
                    for (r, c, v) in b.iter() {
                        a[(ro + r, co + c)] += v;
                    }
                }
            }
        }
        a
    }

    /// Monolithic RHS in the same layout.
    pub fn rhs_vector(&self) -> DVector<f64> {
        let mut out = DVector::zeros(self.n_total());
        for f in Field::ALL {
            let off = self.field_offset(f);
            for (i, &v) in self.rhs[field_index(f)].iter().enumerate() {
                out[off + i] = v;
            }
        }
        out
    }

    /// y = A x on the monolithic layout.
    pub fn apply(&self, x: &[f64], y: &mut [f64]) {
        y.fill(0.0);
        for rf in Field::ALL {
            for cf in Field::ALL {
                if let Some(b) = self.block(rf, cf) {
                    let (ro, co) = (self.field_offset(rf), self.field_offset(cf));
                    b.mul_slice_add(&x[co..co + self.n_free(cf)], &mut y[ro..ro + self.n_free(rf)]);
                }
            }
        }
    }

    /// (max |A − Aᵀ| over present entries, max |A|) across all blocks.
    pub fn symmetry_error(&self) -> (f64, f64) {
        let mut asym: f64 = 0.0;
        let mut amax: f64 = 0.0;
        for rf in Field::ALL {
            for cf in Field::ALL {
                if let Some(b) = self.block(rf, cf) {
                    let bt = self.block(cf, rf);
                    for (r, c, v) in b.iter() {
                        amax = amax.max(v.abs());
                        let vt = bt.map_or(0.0, |m| m.get(c, r));
                        asym = asym.max((v - vt).abs());
                    }
                }
            }
        }
        (asym, amax)
    }

    /// Replaces the fluid-pressure RHS (the time-stepping update).
    pub fn set_pressure_rhs(&mut self, rhs_p: Vec<f64>) -> Result<()> {
        if rhs_p.len() != self.n_free(Field::P) {
            return Err(Error::DimensionMismatch(format!(
                "pressure rhs has {} entries, expected {}",
                rhs_p.len(),
                self.n_free(Field::P)
            )));
        }
        self.rhs[field_index(Field::P)] = rhs_p;
        Ok(())
    }

    pub(crate) fn topology(&self) -> &Arc<CellTopology> {
        &self.topo
    }
}

/// Assembles the full operator with homogeneous natural data (no traction).
pub fn assemble_biot(
    mesh: &Mesh,
    spaces: &Spaces,
    params: &ModelParams,
    f: &dyn Fn(&[f64; 3]) -> [f64; 3],
    g: &dyn Fn(&[f64; 3]) -> f64,
) -> Result<BlockSystem> {
    assemble_biot_with(mesh, spaces, params, f, g, &[])
}

/// Assembles the full operator; `tractions` adds natural boundary data on the
/// given markers (see [`TractionBc`]).
pub fn assemble_biot_with(
    mesh: &Mesh,
    spaces: &Spaces,
    params: &ModelParams,
    f: &dyn Fn(&[f64; 3]) -> [f64; 3],
    g: &dyn Fn(&[f64; 3]) -> f64,
    tractions: &[TractionBc],
) -> Result<BlockSystem> {
    params.validate()?;
    if params.dim != mesh.dim() || params.k != spaces.k {
        return Err(Error::DimensionMismatch(format!(
            "params (dim {}, k {}) vs mesh dim {} / spaces k {}",
            params.dim,
            params.k,
            mesh.dim(),
            spaces.k
        )));
    }
    let topo = Arc::new(CellTopology::build(mesh, spaces));
    let tables = RefTables::new(mesh, spaces)?;
    let markers: Vec<i32> = tractions.iter().map(|t| t.marker).collect();

    let mut blocks: Vec<Option<CsrMatrix>> = (0..49).map(|_| None).collect();
    for &(rf, cf) in COUPLINGS {
        let p = build_pattern(&topo, rf, cf);
        blocks[BlockSystem::bidx(rf, cf)] = Some(CsrMatrix::zeros(Arc::new(p)));
    }
    if !tractions.is_empty() {
        for &(rf, cf) in TRACTION_COUPLINGS {
            let p = traction_pattern(mesh, spaces, &topo, &markers, rf, cf);
            blocks[BlockSystem::bidx(rf, cf)] = Some(CsrMatrix::zeros(Arc::new(p)));
        }
    }
    let mut rhs: Vec<Vec<f64>> =
        Field::ALL.iter().map(|&f| vec![0.0; topo.n_free_field(f)]).collect();

    let dim = topo.dim;
    let n1 = topo.n1();
    let n2f = topo.n2f();
    let n = n1 + topo.n2();
    let [su, spt, sz, _sp] = topo.cell_sizes;
    let (off_u, off_pt, off_z, off_p) = (0, su, su + spt, su + spt + sz);
    let nfd = dim * tables.nf;

    let mut lists: Vec<Vec<(usize, u32)>> = vec![Vec::new(); 7];
    let mut aloc = DMatrix::<f64>::zeros(n, n);
    let mut floc = DVector::<f64>::zeros(n);

    for c in 0..topo.ncells {
        let geom = CellGeom::new(mesh, &tables, c);
        aloc.fill(0.0);
        floc.fill(0.0);

        add_vector_strain(&mut aloc, off_u, params.mu, &tables, &geom);
        add_vector_mass(&mut aloc, off_z, 1.0 / params.kappa, &tables, &geom);
        add_scalar_mass(&mut aloc, off_p, -params.c0, &tables, &geom);
        add_lambda_coupling(&mut aloc, off_pt, off_p, params, &tables, &geom);

        let ubar_offs: Vec<usize> = (0..topo.nfc).map(|lf| n1 + lf * n2f).collect();
        let ptbar_offs: Vec<usize> = (0..topo.nfc).map(|lf| n1 + lf * n2f + nfd).collect();
        let pbar_offs: Vec<usize> =
            (0..topo.nfc).map(|lf| n1 + lf * n2f + nfd + tables.nf).collect();

        add_divergence(&mut aloc, off_u, off_pt, &ptbar_offs, true, &tables, &geom);
        add_divergence(&mut aloc, off_z, off_p, &pbar_offs, true, &tables, &geom);

        for (lf, fg) in geom.facets.iter().enumerate() {
            add_jump_stab(
                &mut aloc,
                off_u,
                ubar_offs[lf],
                params.eta * params.mu / geom.h,
                dim,
                tables.nk,
                tables.nf,
                &fg.table.phi_k,
                &tables.psi,
                &fg.w,
            );
            add_strain_consistency(&mut aloc, off_u, ubar_offs[lf], params.mu, &tables, fg);
        }

        // volume RHS: (f, v) − (g, q)
        for q in 0..geom.w.len() {
            let x = geom.jac.apply(tables.cellq.point(q));
            let fv = f(&x);
            let gv = g(&x);
            let wq = geom.w[q];
            for cc in 0..dim {
                for b in 0..tables.nk {
                    floc[off_u + cc * tables.nk + b] += wq * fv[cc] * tables.phi_k[(b, q)];
                }
            }
            for mm in 0..tables.nm {
                floc[off_p + mm] -= wq * gv * tables.phi_m[(mm, q)];
            }
        }

        // Dirichlet lifting: move constrained trace columns to the RHS.
        let lift = topo.cell_trace_lift(c);
        if lift.iter().any(|&v| v != 0.0) {
            for (j, &lv) in lift.iter().enumerate() {
                if lv != 0.0 {
                    for i in 0..aloc.nrows() {
                        floc[i] -= aloc[(i, n1 + j)] * lv;
                    }
                }
            }
            // Prescribed displacement also enters the multiplier rows: the
            // boundary equation ⟨q̄_T, (u − ū)·n⟩ = 0 puts ⟨q̄_T, ū·n⟩ on the
            // RHS when ū is constrained (the element matrix has no p̄_T–ū
            // entries to lift from).
            for (lf, fg) in geom.facets.iter().enumerate() {
                let ulift = &lift[lf * n2f..lf * n2f + nfd];
                if ulift.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for (q, &wq) in fg.w.iter().enumerate() {
                    let mut un = 0.0;
                    for cc in 0..dim {
                        let mut val = 0.0;
                        for j in 0..tables.nf {
                            val += ulift[cc * tables.nf + j] * tables.psi[(j, q)];
                        }
                        un += val * fg.normal[cc];
                    }
                    for r in 0..tables.nf {
                        floc[ptbar_offs[lf] + r] += wq * un * tables.psi[(r, q)];
                    }
                }
            }
        }

        for f in Field::ALL {
            topo.scatter_list(c, f, &mut lists[field_index(f)]);
        }
        for &(rf, cf) in COUPLINGS {
            let b = blocks[BlockSystem::bidx(rf, cf)].as_mut().unwrap();
            for &(li, gi) in &lists[field_index(rf)] {
                if gi == u32::MAX {
                    continue;
                }
                for &(lj, gj) in &lists[field_index(cf)] {
                    if gj != u32::MAX {
                        b.add(gi as usize, gj as usize, aloc[(li, lj)]);
                    }
                }
            }
        }
        for f in Field::ALL {
            let r = &mut rhs[field_index(f)];
            for &(li, gi) in &lists[field_index(f)] {
                if gi != u32::MAX {
                    r[gi as usize] += floc[li];
                }
            }
        }
    }

    // Traction terms: facet-local exchange blocks plus the load ⟨t, v̄⟩.
    if !tractions.is_empty() {
        add_traction_terms(mesh, spaces, &tables, tractions, &mut blocks, &mut rhs)?;
    }

    Ok(BlockSystem { params: *params, blocks, rhs, topo })
}

fn add_traction_terms(
    mesh: &Mesh,
    spaces: &Spaces,
    tables: &RefTables,
    tractions: &[TractionBc],
    blocks: &mut [Option<CsrMatrix>],
    rhs: &mut [Vec<f64>],
) -> Result<()> {
    let dim = tables.dim;
    let nf = tables.nf;
    let fref = reference_measure(dim - 1);
    let ubar_map = spaces.map(Field::UBar);
    let ptbar_map = spaces.map(Field::PTBar);
    for (f, facet) in mesh.facets().iter().enumerate() {
        if !facet.is_boundary() {
            continue;
        }
        let Some(bc) = facet
            .marker
            .and_then(|m| tractions.iter().find(|t| t.marker == m))
        else {
            continue;
        };
        let side = facet.sides[0];
        let cell = side.cell as usize;
        let map = mesh.affine_map(cell);
        let normal = mesh.outward_normal(cell, side.local_facet as usize);
        let scale = mesh.facet_area(f) / fref;
        let u_ids = ubar_map.dofs_of(f);
        let pt_ids = ptbar_map.dofs_of(f);

        // local exchange block: rows ū (d·nf), cols p̄_T (nf)
        let mut exch = DMatrix::<f64>::zeros(dim * nf, nf);
        let mut load = DVector::<f64>::zeros(dim * nf);
        for (q, &wq_ref) in tables.facetq.weights.iter().enumerate() {
            let wq = wq_ref * scale;
            let cp = trace_points_permuted(
                dim,
                side.local_facet as usize,
                &side.perm,
                tables.facetq.point(q),
            );
            let x = map.apply(&cp[..dim]);
            let t = (bc.traction)(&x);
            for c in 0..dim {
                for l in 0..nf {
                    let psi_l = tables.psi[(l, q)];
                    load[c * nf + l] += wq * t[c] * psi_l;
                    for m2 in 0..nf {
                        exch[(c * nf + l, m2)] -= wq * normal[c] * psi_l * tables.psi[(m2, q)];
                    }
                }
            }
        }

        let ub_block = blocks[BlockSystem::bidx(Field::UBar, Field::PTBar)].as_mut().unwrap();
        let rows: Vec<u32> = u_ids
            .iter()
            .map(|&id| if ubar_map.is_constrained(id) { u32::MAX } else { id })
            .collect();
        let cols: Vec<u32> = pt_ids.to_vec();
        debug_assert!(cols.iter().all(|&id| !ptbar_map.is_constrained(id)));
        scatter_dense(ub_block, &rows, &cols, &exch);
        let pt_block = blocks[BlockSystem::bidx(Field::PTBar, Field::UBar)].as_mut().unwrap();
        scatter_dense(pt_block, &cols, &rows, &exch.transpose());

        let r = &mut rhs[field_index(Field::UBar)];
        for (i, &id) in u_ids.iter().enumerate() {
            if !ubar_map.is_constrained(id) {
                r[id as usize] += load[i];
            }
        }
        // Constrained ū slots on a traction facet (continuous-trace corner
        // nodes) are covered by the multiplier-row lifting in the main cell
        // loop; nothing to lift here.
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Preconditioner blocks.

/// Symmetric positive blocks of the block-diagonal preconditioner, kept per
/// field: the u- and p-blocks couple cell and trace dofs (and get
/// Schur-reduced during condensation), the p_T-block is cell/trace uncoupled,
/// and the z-block is a cell mass matrix.
pub struct PreconditionerBlocks {
    pub variant: PcVariant,
    pub params: ModelParams,
    pub u_cc: CsrMatrix,
    pub u_ct: CsrMatrix,
    pub u_tt: CsrMatrix,
    pub pt_cc: CsrMatrix,
    pub pt_tt: CsrMatrix,
    pub z_cc: CsrMatrix,
    pub p_cc: CsrMatrix,
    pub p_ct: CsrMatrix,
    pub p_tt: CsrMatrix,
    topo: Arc<CellTopology>,
}

impl PreconditionerBlocks {
    pub(crate) fn topology(&self) -> &Arc<CellTopology> {
        &self.topo
    }

    /// Dense [cell | trace] matrix of the u- or p-block (oracle scale).
    pub fn field_dense(&self, f: Field) -> DMatrix<f64> {
        let (cc, ct, tt) = match f {
            Field::U => (&self.u_cc, &self.u_ct, &self.u_tt),
            Field::P => (&self.p_cc, &self.p_ct, &self.p_tt),
            _ => panic!("field_dense supports the u- and p-blocks"),
        };
        let (nc, nt) = (cc.nrows(), tt.nrows());
        let mut m = DMatrix::zeros(nc + nt, nc + nt);
        for (r, c, v) in cc.iter() {
            m[(r, c)] += v;
        }
        for (r, c, v) in ct.iter() {
            m[(r, nc + c)] += v;
            m[(nc + c, r)] += v;
        }
        for (r, c, v) in tt.iter() {
            m[(nc + r, nc + c)] += v;
        }
        m
    }
}

/// Same-facet trace pattern (each facet couples only to itself; interior
/// facets accumulate one contribution per adjacent cell).
fn facet_diag_pattern(topo: &CellTopology, f: Field) -> SparsityPattern {
    let fi = TRACE_FIELDS.iter().position(|&g| g == f).unwrap();
    let sub: usize = topo.facet_sizes[..fi].iter().sum();
    let sz = topo.facet_sizes[fi];
    let n2f = topo.n2f();
    let mut pairs = Vec::new();
    for c in 0..topo.ncells {
        let ids = topo.cell_trace_ids(c);
        for lf in 0..topo.nfc {
            let base = lf * n2f + sub;
            for i in 0..sz {
                let r = ids[base + i];
                if r == u32::MAX {
                    continue;
                }
                for j in 0..sz {
                    let c2 = ids[base + j];
                    if c2 != u32::MAX {
                        pairs.push((r, c2));
                    }
                }
            }
        }
    }
    SparsityPattern::from_pairs(topo.n_free_field(f), topo.n_free_field(f), &mut pairs)
}

pub fn assemble_preconditioner(
    mesh: &Mesh,
    spaces: &Spaces,
    params: &ModelParams,
    variant: PcVariant,
) -> Result<PreconditionerBlocks> {
    params.validate()?;
    if params.dim != mesh.dim() || params.k != spaces.k {
        return Err(Error::DimensionMismatch("preconditioner params mismatch".into()));
    }
    let topo = Arc::new(CellTopology::build(mesh, spaces));
    let tables = RefTables::new(mesh, spaces)?;
    let dim = topo.dim;

    let cell_pat = |rf: Field, cf: Field| Arc::new(build_pattern(&topo, rf, cf));
    let mut u_cc = CsrMatrix::zeros(cell_pat(Field::U, Field::U));
    let mut u_ct = CsrMatrix::zeros(cell_pat(Field::U, Field::UBar));
    let mut u_tt = CsrMatrix::zeros(Arc::new(facet_diag_pattern(&topo, Field::UBar)));
    let mut pt_cc = CsrMatrix::zeros(cell_pat(Field::PT, Field::PT));
    let mut pt_tt = CsrMatrix::zeros(Arc::new(facet_diag_pattern(&topo, Field::PTBar)));
    let mut z_cc = CsrMatrix::zeros(cell_pat(Field::Z, Field::Z));
    let mut p_cc = CsrMatrix::zeros(cell_pat(Field::P, Field::P));
    let mut p_ct = CsrMatrix::zeros(cell_pat(Field::P, Field::PBar));
    let mut p_tt = CsrMatrix::zeros(Arc::new(facet_diag_pattern(&topo, Field::PBar)));

    let nfd = dim * tables.nf;
    let nu = dim * tables.nk;
    // local layouts: u-block [u | ū per facet], p-block [p | p̄ per facet]
    let n_u = nu + topo.nfc * nfd;
    let n_p = tables.nm + topo.nfc * tables.nf;
    let mut mu_loc = DMatrix::<f64>::zeros(n_u, n_u);
    let mut mpt_c = DMatrix::<f64>::zeros(tables.nm, tables.nm);
    let mut mz = DMatrix::<f64>::zeros(nu, nu);
    let mut mp_loc = DMatrix::<f64>::zeros(n_p, n_p);

    let reaction = params.c0 + params.alpha * params.alpha / params.lambda;
    let mut lists: Vec<Vec<(usize, u32)>> = vec![Vec::new(); 7];

    for c in 0..topo.ncells {
        let geom = CellGeom::new(mesh, &tables, c);
        mu_loc.fill(0.0);
        mpt_c.fill(0.0);
        mz.fill(0.0);
        mp_loc.fill(0.0);

        add_vector_strain(&mut mu_loc, 0, params.mu, &tables, &geom);
        add_scalar_mass(&mut mpt_c, 0, 1.0 / params.mu, &tables, &geom);
        add_vector_mass(&mut mz, 0, 1.0 / params.kappa, &tables, &geom);
        add_scalar_mass(&mut mp_loc, 0, reaction, &tables, &geom);
        add_scalar_stiffness(&mut mp_loc, 0, params.kappa, &tables, &geom);

        for (lf, fg) in geom.facets.iter().enumerate() {
            let off_ub = nu + lf * nfd;
            let off_pb = tables.nm + lf * tables.nf;
            add_jump_stab(
                &mut mu_loc,
                0,
                off_ub,
                params.eta * params.mu / geom.h,
                dim,
                tables.nk,
                tables.nf,
                &fg.table.phi_k,
                &tables.psi,
                &fg.w,
            );
            add_jump_stab(
                &mut mp_loc,
                0,
                off_pb,
                params.kappa * params.eta / geom.h,
                1,
                tables.nm,
                tables.nf,
                &fg.table.phi_m,
                &tables.psi,
                &fg.w,
            );
            if variant == PcVariant::PHat {
                add_strain_consistency(&mut mu_loc, 0, off_ub, params.mu, &tables, fg);
                add_grad_consistency(&mut mp_loc, 0, off_pb, params.kappa, &tables, fg);
            }
        }

        // scatter
        for f in [Field::U, Field::UBar, Field::PT, Field::Z, Field::P, Field::PBar] {
            topo.scatter_list(c, f, &mut lists[field_index(f)]);
        }
        let su_list = &lists[field_index(Field::U)];
        let ub_list = &lists[field_index(Field::UBar)];
        // the u-block local layout skips the other fields, so re-map slots
        for (i, &(_, gi)) in su_list.iter().enumerate() {
            for (j, &(_, gj)) in su_list.iter().enumerate() {
                u_cc.add(gi as usize, gj as usize, mu_loc[(i, j)]);
            }
            for (j, &(_, gj)) in ub_list.iter().enumerate() {
                if gj != u32::MAX {
                    u_ct.add(gi as usize, gj as usize, mu_loc[(i, nu + j)]);
                }
            }
        }
        // The jump term couples a facet only to itself, so scatter the trace
        // mass facet-blocked (cross-facet entries are structurally zero and
        // absent from the pattern).
        for lf in 0..topo.nfc {
            for i in 0..nfd {
                let gi = ub_list[lf * nfd + i].1;
                if gi == u32::MAX {
                    continue;
                }
                for j in 0..nfd {
                    let gj = ub_list[lf * nfd + j].1;
                    if gj != u32::MAX {
                        u_tt.add(
                            gi as usize,
                            gj as usize,
                            mu_loc[(nu + lf * nfd + i, nu + lf * nfd + j)],
                        );
                    }
                }
            }
        }

        let pt_list = &lists[field_index(Field::PT)];
        for (i, &(_, gi)) in pt_list.iter().enumerate() {
            for (j, &(_, gj)) in pt_list.iter().enumerate() {
                pt_cc.add(gi as usize, gj as usize, mpt_c[(i, j)]);
            }
        }
        let z_list = &lists[field_index(Field::Z)];
        for (i, &(_, gi)) in z_list.iter().enumerate() {
            for (j, &(_, gj)) in z_list.iter().enumerate() {
                z_cc.add(gi as usize, gj as usize, mz[(i, j)]);
            }
        }
        let p_list = &lists[field_index(Field::P)];
        let pb_list = &lists[field_index(Field::PBar)];
        for (i, &(_, gi)) in p_list.iter().enumerate() {
            for (j, &(_, gj)) in p_list.iter().enumerate() {
                p_cc.add(gi as usize, gj as usize, mp_loc[(i, j)]);
            }
            for (j, &(_, gj)) in pb_list.iter().enumerate() {
                if gj != u32::MAX {
                    p_ct.add(gi as usize, gj as usize, mp_loc[(i, tables.nm + j)]);
                }
            }
        }
        for lf in 0..topo.nfc {
            for i in 0..tables.nf {
                let gi = pb_list[lf * tables.nf + i].1;
                if gi == u32::MAX {
                    continue;
                }
                for j in 0..tables.nf {
                    let gj = pb_list[lf * tables.nf + j].1;
                    if gj != u32::MAX {
                        p_tt.add(
                            gi as usize,
                            gj as usize,
                            mp_loc[(
                                tables.nm + lf * tables.nf + i,
                                tables.nm + lf * tables.nf + j,
                            )],
                        );
                    }
                }
            }
        }

        // p_T trace mass: μ⁻¹η⁻¹⟨h_K p̄_T, q̄_T⟩ per facet of this cell
        let coef = geom.h / (params.mu * params.eta);
        let ptb_list = {
            topo.scatter_list(c, Field::PTBar, &mut lists[field_index(Field::PTBar)]);
            &lists[field_index(Field::PTBar)]
        };
        for (lf, fg) in geom.facets.iter().enumerate() {
            let mut mloc = DMatrix::<f64>::zeros(tables.nf, tables.nf);
            for (q, &wq) in fg.w.iter().enumerate() {
                for l in 0..tables.nf {
                    for l2 in 0..tables.nf {
                        mloc[(l, l2)] += coef * wq * tables.psi[(l, q)] * tables.psi[(l2, q)];
                    }
                }
            }
            for i in 0..tables.nf {
                let gi = ptb_list[lf * tables.nf + i].1;
                for j in 0..tables.nf {
                    let gj = ptb_list[lf * tables.nf + j].1;
                    pt_tt.add(gi as usize, gj as usize, mloc[(i, j)]);
                }
            }
        }
    }

    Ok(PreconditionerBlocks {
        variant,
        params: *params,
        u_cc,
        u_ct,
        u_tt,
        pt_cc,
        pt_tt,
        z_cc,
        p_cc,
        p_ct,
        p_tt,
        topo,
    })
}

// ---------------------------------------------------------------------------
// Time stepping.

/// Backward-Euler right-hand side for the flow test functions: returns the
/// fluid-pressure RHS vector realizing −(g, q) with
///
///   g = τ·g̃ + c₀·pⁿ⁻¹ + αλ⁻¹(α·pⁿ⁻¹ − p_Tⁿ⁻¹).
///
/// The memory terms are evaluated through the same cell mass matrices the
/// operator uses, so a stationary discrete state reproduces itself exactly.
pub fn assemble_timestep_rhs(
    mesh: &Mesh,
    spaces: &Spaces,
    params: &ModelParams,
    tau: f64,
    g_tilde: Option<&dyn Fn(&[f64; 3]) -> f64>,
    prev_p: &[f64],
    prev_pt: &[f64],
) -> Result<Vec<f64>> {
    if !(tau > 0.0) {
        return Err(Error::InvalidArgument(format!("time step must be positive, got {tau}")));
    }
    params.validate()?;
    let nm = spaces.cell_km1.size();
    let ncells = mesh.n_cells();
    if prev_p.len() != ncells * nm || prev_pt.len() != ncells * nm {
        return Err(Error::DimensionMismatch(format!(
            "previous-state vectors must have {} entries",
            ncells * nm
        )));
    }
    let tables = RefTables::new(mesh, spaces)?;
    let mut rhs = vec![0.0; ncells * nm];
    let il = 1.0 / params.lambda;
    let a = params.alpha;
    let mut mass = DMatrix::<f64>::zeros(nm, nm);
    for c in 0..ncells {
        let geom = CellGeom::new(mesh, &tables, c);
        mass.fill(0.0);
        add_scalar_mass(&mut mass, 0, 1.0, &tables, &geom);
        let pc = &prev_p[c * nm..(c + 1) * nm];
        let ptc = &prev_pt[c * nm..(c + 1) * nm];
        for i in 0..nm {
            let mut acc = 0.0;
            for j in 0..nm {
                let mem = params.c0 * pc[j] + a * il * (a * pc[j] - ptc[j]);
                acc += mass[(i, j)] * mem;
            }
            rhs[c * nm + i] -= acc;
        }
        if let Some(gt) = g_tilde {
            for q in 0..geom.w.len() {
                let x = geom.jac.apply(tables.cellq.point(q));
                let gv = gt(&x);
                for i in 0..nm {
                    rhs[c * nm + i] -= tau * geom.w[q] * gv * tables.phi_m[(i, q)];
                }
            }
        }
    }
    Ok(rhs)
}

// ---------------------------------------------------------------------------
// Projection helpers (initial states, manufactured coefficients, tests).

/// L² projection of a scalar function onto the cell pressure space ℙ_{k−1}.
pub fn project_cell_scalar(
    mesh: &Mesh,
    spaces: &Spaces,
    f: &dyn Fn(&[f64; 3]) -> f64,
) -> Result<Vec<f64>> {
    let quad = quadrature(mesh.dim(), 2 * spaces.k + 4)?;
    let nm = spaces.cell_km1.size();
    let mut out = vec![0.0; mesh.n_cells() * nm];
    project_impl(mesh, &quad, nm, &mut out, 1, &|x, vals| vals[0] = f(x), &|p| {
        spaces.cell_km1.values(p)
    });
    Ok(out)
}

/// L² projection of a vector function onto the cell displacement space
/// [ℙ_k]^d (component-major coefficients).
pub fn project_cell_vector(
    mesh: &Mesh,
    spaces: &Spaces,
    f: &dyn Fn(&[f64; 3]) -> [f64; 3],
) -> Result<Vec<f64>> {
    let dim = mesh.dim();
    let quad = quadrature(dim, 2 * spaces.k + 4)?;
    let nk = spaces.cell_k.size();
    let mut out = vec![0.0; mesh.n_cells() * dim * nk];
    project_impl(
        mesh,
        &quad,
        nk,
        &mut out,
        dim,
        &|x, vals| {
            let v = f(x);
            vals[..dim].copy_from_slice(&v[..dim]);
        },
        &|p| spaces.cell_k.values(p),
    );
    Ok(out)
}

/// The bases are orthonormal in the measure-scaled reference inner product,
/// so the projection is a plain weighted sum: c_j = |K̂|⁻¹ ∫_K̂ (f∘F) φ_j.
fn project_impl(
    mesh: &Mesh,
    quad: &QuadratureRule,
    nb: usize,
    out: &mut [f64],
    comps: usize,
    f: &dyn Fn(&[f64; 3], &mut [f64]),
    basis: &dyn Fn(&[f64]) -> DVector<f64>,
) {
    let dim = mesh.dim();
    let meas = reference_measure(dim);
    let vals: Vec<DVector<f64>> = (0..quad.len()).map(|q| basis(quad.point(q))).collect();
    let mut fv = [0.0; 3];
    for c in 0..mesh.n_cells() {
        let map = mesh.affine_map(c);
        let base = c * comps * nb;
        for q in 0..quad.len() {
            let x = map.apply(quad.point(q));
            f(&x, &mut fv);
            let w = quad.weights[q] / meas;
            for comp in 0..comps {
                for j in 0..nb {
                    out[base + comp * nb + j] += w * fv[comp] * vals[q][j];
                }
            }
        }
    }
}
