//! Static condensation onto the mesh skeleton.
//!
//! The cell unknowns (u, p_T, z, p) couple only through their own cell's
//! trace dofs, so the global block operator
//!
//!   [ A₁₁  A₂₁ᵀ ] [x₁]   [f₁]
//!   [ A₂₁  A₂₂  ] [x̄ ] = [f₂]
//!
//! has a cell-block-diagonal A₁₁. Eliminating x₁ per cell leaves the trace
//! Schur complement S_A = A₂₂ − A₂₁A₁₁⁻¹A₂₁ᵀ and reduced RHS
//! b̄ = f₂ − A₂₁A₁₁⁻¹f₁; the local LU factorizations and couplings are kept
//! for back-substitution x₁ = A₁₁⁻¹(f₁ − A₂₁ᵀx̄) and for cheap RHS updates
//! during time stepping. The same elimination reduces the block-diagonal
//! preconditioners: the u- and p-blocks turn into trace Schur complements
//! (their cell blocks are SPD, so Cholesky does the local solves), while the
//! p_T trace block passes through untouched.
//!
//! Trace dofs are ordered by field — all ū, then p̄_T, then p̄ — with facets
//! in mesh order inside each field, so the reduced preconditioner stays
//! block-diagonal in plain index ranges.

use crate::assembly::{
    field_index, BlockSystem, CellTopology, PcVariant, PreconditionerBlocks, CELL_FIELDS,
    TRACE_FIELDS,
};
use crate::krylov::{sparse_spd_factorize, Preconditioner, SpdFactor};
use crate::sparse::{CsrMatrix, SparsityPattern};
use crate::spaces::Field;
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector, Dyn, LU};
use std::sync::Arc;

struct CellData {
    lu: LU<f64, Dyn, Dyn>,
    /// A₂₁ᵀ: cell dofs × the cell's distinct free trace dofs
    a12: DMatrix<f64>,
    f1: DVector<f64>,
    /// condensed trace index of each a12 column
    ids: Vec<u32>,
}

/// The condensed trace system: Schur operator, reduced RHS, and the per-cell
/// local solvers needed to recover the cell fields.
pub struct CondensedSystem {
    pub s_a: CsrMatrix,
    /// reduced RHS over the trace dofs (ū, p̄_T, p̄ concatenated)
    pub rhs: Vec<f64>,
    topo: Arc<CellTopology>,
    cells: Vec<CellData>,
}

fn cell_rows(topo: &CellTopology, c: usize, field_slot: usize) -> Vec<usize> {
    let stride = topo.cell_sizes[field_slot];
    (c * stride..(c + 1) * stride).collect()
}

/// Dense cell block of A₁₁ in the local layout [u | p_T | z | p].
fn gather_a11(sys: &BlockSystem, topo: &CellTopology, c: usize) -> DMatrix<f64> {
    let n1 = topo.n1();
    let mut a = DMatrix::zeros(n1, n1);
    let mut off_r = 0;
    for (ri, &rf) in CELL_FIELDS.iter().enumerate() {
        let rows = cell_rows(topo, c, ri);
        let mut off_c = 0;
        for (ci, &cf) in CELL_FIELDS.iter().enumerate() {
            if let Some(b) = sys.block(rf, cf) {
                let cols = cell_rows(topo, c, ci);
                let sub = b.dense_submatrix(&rows, &cols);
                a.view_mut((off_r, off_c), (rows.len(), cols.len())).copy_from(&sub);
            }
            off_c += topo.cell_sizes[ci];
        }
        off_r += topo.cell_sizes[ri];
    }
    a
}

/// Dense A₂₁ᵀ block: cell dofs × the cell's distinct free trace dofs, with
/// each column's condensed trace index. Constrained slots get no column —
/// their lifting already lives in the RHS. With a continuous trace space one
/// dof can sit behind several local slots; the assembled coupling column
/// already carries their summed contribution, so each dof appears once.
fn gather_a12(sys: &BlockSystem, topo: &CellTopology, c: usize) -> (DMatrix<f64>, Vec<u32>) {
    let n1 = topo.n1();
    let n2f = topo.n2f();
    let slot_ids = topo.cell_trace_ids(c);
    let mut cols: Vec<(usize, u32)> = Vec::new();
    let mut ids = Vec::new();
    for (fi, &tf) in TRACE_FIELDS.iter().enumerate() {
        let sub: usize = topo.facet_sizes[..fi].iter().sum();
        let off = topo.trace_offset(tf) as u32;
        for lf in 0..topo.nfc {
            for j in 0..topo.facet_sizes[fi] {
                let id = slot_ids[lf * n2f + sub + j];
                if id != u32::MAX && !cols.contains(&(fi, id)) {
                    cols.push((fi, id));
                    ids.push(off + id);
                }
            }
        }
    }
    let mut a = DMatrix::zeros(n1, cols.len());
    let mut off_r = 0;
    for (ri, &rf) in CELL_FIELDS.iter().enumerate() {
        let rows = cell_rows(topo, c, ri);
        for (jc, &(fi, id)) in cols.iter().enumerate() {
            if let Some(b) = sys.block(rf, TRACE_FIELDS[fi]) {
                for (i, &r) in rows.iter().enumerate() {
                    a[(off_r + i, jc)] = b.get(r, id as usize);
                }
            }
        }
        off_r += topo.cell_sizes[ri];
    }
    (a, ids)
}

fn gather_f1(sys: &BlockSystem, topo: &CellTopology, c: usize) -> DVector<f64> {
    let mut f = DVector::zeros(topo.n1());
    let mut off = 0;
    for (ri, &rf) in CELL_FIELDS.iter().enumerate() {
        let stride = topo.cell_sizes[ri];
        let src = &sys.rhs[field_index(rf)][c * stride..(c + 1) * stride];
        f.rows_mut(off, stride).copy_from_slice(src);
        off += stride;
    }
    f
}

fn trace_pattern(topo: &CellTopology) -> SparsityPattern {
    let n = topo.n_trace();
    let mut pairs = Vec::new();
    let mut ids = Vec::new();
    for c in 0..topo.ncells {
        topo.condensed_ids(c, &mut ids);
        for &r in &ids {
            if r == u32::MAX {
                continue;
            }
            for &cc in &ids {
                if cc != u32::MAX {
                    pairs.push((r, cc));
                }
            }
        }
    }
    SparsityPattern::from_pairs(n, n, &mut pairs)
}

/// Eliminates the cell unknowns of an assembled system.
pub fn condense(sys: &BlockSystem) -> Result<CondensedSystem> {
    let topo = sys.topology().clone();
    let n_tr = topo.n_trace();
    let mut s_a = CsrMatrix::zeros(Arc::new(trace_pattern(&topo)));

    // A₂₂ contributions (facet-facet terms live on single facets, which
    // always share a cell with themselves, so the pattern covers them)
    for (rf, cf) in [
        (Field::UBar, Field::UBar),
        (Field::UBar, Field::PTBar),
        (Field::PTBar, Field::UBar),
    ] {
        if let Some(b) = sys.block(rf, cf) {
            let (ro, co) = (topo.trace_offset(rf), topo.trace_offset(cf));
            for (r, c, v) in b.iter() {
                s_a.add(ro + r, co + c, v);
            }
        }
    }

    // f₂ in the condensed layout
    let mut rhs = vec![0.0; n_tr];
    for &tf in &TRACE_FIELDS {
        let off = topo.trace_offset(tf);
        let src = &sys.rhs[field_index(tf)];
        rhs[off..off + src.len()].copy_from_slice(src);
    }

    let mut cells = Vec::with_capacity(topo.ncells);
    for c in 0..topo.ncells {
        let a11 = gather_a11(sys, &topo, c);
        let (a12, ids) = gather_a12(sys, &topo, c);
        let f1 = gather_f1(sys, &topo, c);

        let lu = a11.lu();
        let x = lu.solve(&a12).ok_or_else(|| Error::SingularLocalBlock {
            cell: c,
            detail: "cell block not invertible (check parameter signs)".into(),
        })?;
        let s_loc = a12.transpose() * &x;
        for (i, &gi) in ids.iter().enumerate() {
            for (j, &gj) in ids.iter().enumerate() {
                s_a.add(gi as usize, gj as usize, -s_loc[(i, j)]);
            }
        }
        let y = lu.solve(&f1).ok_or_else(|| Error::SingularLocalBlock {
            cell: c,
            detail: "cell block not invertible".into(),
        })?;
        let g = a12.transpose() * y;
        for (i, &gi) in ids.iter().enumerate() {
            rhs[gi as usize] -= g[i];
        }
        cells.push(CellData { lu, a12, f1, ids });
    }

    Ok(CondensedSystem { s_a, rhs, topo, cells })
}

impl CondensedSystem {
    pub fn n_trace(&self) -> usize {
        self.topo.n_trace()
    }

    /// Monolithic solution length (cell fields + traces).
    pub fn n_total(&self) -> usize {
        let n1: usize = self.topo.cell_sizes.iter().sum();
        self.topo.ncells * n1 + self.topo.n_trace()
    }

    /// Offset of a field in the monolithic vector (same layout as
    /// [`BlockSystem::field_offset`]).
    pub fn field_offset(&self, f: Field) -> usize {
        let t = &self.topo;
        let cell_n: Vec<usize> = (0..4).map(|i| t.ncells * t.cell_sizes[i]).collect();
        match f {
            Field::U => 0,
            Field::PT => cell_n[0],
            Field::Z => cell_n[0] + cell_n[1],
            Field::P => cell_n[0] + cell_n[1] + cell_n[2],
            _ => cell_n.iter().sum::<usize>() + t.trace_offset(f),
        }
    }

    /// Recovers the cell fields from a trace solution; returns the monolithic
    /// vector with the trace part copied through.
    pub fn back_substitute(&self, xbar: &[f64]) -> Result<Vec<f64>> {
        let topo = &self.topo;
        if xbar.len() != topo.n_trace() {
            return Err(Error::DimensionMismatch(format!(
                "trace vector has {} entries, expected {}",
                xbar.len(),
                topo.n_trace()
            )));
        }
        let n1 = topo.n1();
        let mut out = vec![0.0; self.n_total()];
        for (c, data) in self.cells.iter().enumerate() {
            let xloc =
                DVector::from_iterator(data.ids.len(), data.ids.iter().map(|&id| xbar[id as usize]));
            let rhs_loc = &data.f1 - &data.a12 * &xloc;
            let x1 = data.lu.solve(&rhs_loc).expect("factorization was validated in condense");
            let mut off_local = 0;
            for (fi, &f) in CELL_FIELDS.iter().enumerate() {
                let stride = topo.cell_sizes[fi];
                let dst = self.field_offset(f) + c * stride;
                out[dst..dst + stride]
                    .copy_from_slice(&x1.as_slice()[off_local..off_local + stride]);
                off_local += stride;
            }
            debug_assert_eq!(off_local, n1);
        }
        let tr0 = self.field_offset(Field::UBar);
        out[tr0..tr0 + topo.n_trace()].copy_from_slice(xbar);
        Ok(out)
    }

    /// Refreshes the reduced RHS from a re-assembled right-hand side (time
    /// stepping: the operator and factorizations are unchanged).
    pub fn set_rhs(&mut self, sys: &BlockSystem) -> Result<()> {
        let topo = &self.topo;
        if !Arc::ptr_eq(sys.topology(), topo)
            && (sys.topology().ncells != topo.ncells || sys.topology().n_free != topo.n_free)
        {
            return Err(Error::DimensionMismatch(
                "RHS update from a differently-shaped system".into(),
            ));
        }
        let mut rhs = vec![0.0; topo.n_trace()];
        for &tf in &TRACE_FIELDS {
            let off = topo.trace_offset(tf);
            let src = &sys.rhs[field_index(tf)];
            rhs[off..off + src.len()].copy_from_slice(src);
        }
        for (c, data) in self.cells.iter_mut().enumerate() {
            data.f1 = gather_f1(sys, topo, c);
            let y = data.lu.solve(&data.f1).expect("factorization was validated in condense");
            let g = data.a12.transpose() * y;
            for (i, &gi) in data.ids.iter().enumerate() {
                rhs[gi as usize] -= g[i];
            }
        }
        self.rhs = rhs;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Reduced preconditioner.

/// Block-diagonal trace preconditioner: the three field blocks are SPD and
/// Cholesky-factorized; applying it solves each block independently.
pub struct ReducedPreconditioner {
    pub variant: PcVariant,
    pub s_u: CsrMatrix,
    pub s_pt: CsrMatrix,
    pub s_p: CsrMatrix,
    fu: SpdFactor,
    fpt: SpdFactor,
    fp: SpdFactor,
    off: [usize; 3],
    n: usize,
}

/// Pattern over one trace field: dofs of facets sharing a cell.
fn field_trace_pattern(topo: &CellTopology, fi: usize, n: usize) -> SparsityPattern {
    let sub: usize = topo.facet_sizes[..fi].iter().sum();
    let sz = topo.facet_sizes[fi];
    let n2f = topo.n2f();
    let mut pairs = Vec::new();
    let mut ids = Vec::new();
    for c in 0..topo.ncells {
        ids.clear();
        let slots = topo.cell_trace_ids(c);
        for lf in 0..topo.nfc {
            for j in 0..sz {
                ids.push(slots[lf * n2f + sub + j]);
            }
        }
        for &r in &ids {
            if r == u32::MAX {
                continue;
            }
            for &cc in &ids {
                if cc != u32::MAX {
                    pairs.push((r, cc));
                }
            }
        }
    }
    SparsityPattern::from_pairs(n, n, &mut pairs)
}

/// S = tt − ctᵀ cc⁻¹ ct with cc cell-block-diagonal and SPD.
fn schur_trace_block(
    cc: &CsrMatrix,
    ct: &CsrMatrix,
    tt: &CsrMatrix,
    topo: &CellTopology,
    field: Field,
    cell_slot: usize,
) -> Result<CsrMatrix> {
    let fi = TRACE_FIELDS.iter().position(|&g| g == field).unwrap();
    let n = tt.nrows();
    let mut s = CsrMatrix::zeros(Arc::new(field_trace_pattern(topo, fi, n)));
    for (r, c, v) in tt.iter() {
        s.add(r, c, v);
    }
    let sub: usize = topo.facet_sizes[..fi].iter().sum();
    let sz = topo.facet_sizes[fi];
    let n2f = topo.n2f();
    let nloc = topo.nfc * sz;
    let mut ids = Vec::with_capacity(nloc);
    for c in 0..topo.ncells {
        let rows = cell_rows(topo, c, cell_slot);
        let slots = topo.cell_trace_ids(c);
        // Unique free ids of this cell: with a continuous trace space one
        // global dof can sit behind several local slots, and the global
        // coupling column already carries their summed contribution.
        ids.clear();
        for lf in 0..topo.nfc {
            for j in 0..sz {
                let id = slots[lf * n2f + sub + j];
                if id != u32::MAX && !ids.contains(&id) {
                    ids.push(id);
                }
            }
        }
        let ccl = cc.dense_submatrix(&rows, &rows);
        let mut ctl = DMatrix::zeros(rows.len(), ids.len());
        for (j, &id) in ids.iter().enumerate() {
            for (i, &r) in rows.iter().enumerate() {
                ctl[(i, j)] = ct.get(r, id as usize);
            }
        }
        let chol = ccl.cholesky().ok_or_else(|| {
            Error::NotSpd(format!("preconditioner cell block on cell {c} is not SPD"))
        })?;
        let x = chol.solve(&ctl);
        let s_loc = ctl.transpose() * x;
        for (i, &gi) in ids.iter().enumerate() {
            for (j, &gj) in ids.iter().enumerate() {
                s.add(gi as usize, gj as usize, -s_loc[(i, j)]);
            }
        }
    }
    Ok(s)
}

/// Eliminates the cell dofs of the preconditioner blocks and factorizes the
/// three resulting SPD trace blocks.
pub fn reduce_preconditioner(pc: &PreconditionerBlocks) -> Result<ReducedPreconditioner> {
    let topo = pc.topology().clone();
    let s_u = schur_trace_block(&pc.u_cc, &pc.u_ct, &pc.u_tt, &topo, Field::UBar, 0)?;
    let s_pt = pc.pt_tt.clone();
    let s_p = schur_trace_block(&pc.p_cc, &pc.p_ct, &pc.p_tt, &topo, Field::PBar, 3)?;
    let name = |block: &str, e: Error| match e {
        Error::NotSpd(msg) => Error::NotSpd(format!("{block} trace block: {msg}")),
        other => other,
    };
    let fu = sparse_spd_factorize(&s_u).map_err(|e| name("displacement", e))?;
    let fpt = sparse_spd_factorize(&s_pt).map_err(|e| name("total-pressure", e))?;
    let fp = sparse_spd_factorize(&s_p).map_err(|e| name("pressure", e))?;
    let off = [
        topo.trace_offset(Field::UBar),
        topo.trace_offset(Field::PTBar),
        topo.trace_offset(Field::PBar),
    ];
    let n = topo.n_trace();
    Ok(ReducedPreconditioner { variant: pc.variant, s_u, s_pt, s_p, fu, fpt, fp, off, n })
}

impl ReducedPreconditioner {
    /// Dense block-diagonal matrix (spectral diagnostics at oracle scale).
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut m = DMatrix::zeros(self.n, self.n);
        for (block, off) in
            [(&self.s_u, self.off[0]), (&self.s_pt, self.off[1]), (&self.s_p, self.off[2])]
        {
            for (r, c, v) in block.iter() {
                m[(off + r, off + c)] += v;
            }
        }
        m
    }
}

impl Preconditioner for ReducedPreconditioner {
    fn dim(&self) -> usize {
        self.n
    }

    fn solve(&self, r: &[f64], z: &mut [f64]) {
        let (o_u, o_pt, o_p) = (self.off[0], self.off[1], self.off[2]);
        self.fu.solve_slice(&r[o_u..o_u + self.fu.n()], &mut z[o_u..o_u + self.fu.n()]);
        self.fpt.solve_slice(&r[o_pt..o_pt + self.fpt.n()], &mut z[o_pt..o_pt + self.fpt.n()]);
        self.fp.solve_slice(&r[o_p..o_p + self.fp.n()], &mut z[o_p..o_p + self.fp.n()]);
    }
}
