//! Global degree-of-freedom maps for the four cell fields (u, p_T, z, p) and
//! three trace fields (ū, p̄_T, p̄), with Dirichlet elimination on the trace
//! fields and the continuous-trace (EDG) variant of ū.
//!
//! Numbering convention: within each field, free dofs occupy 0..n_free and
//! constrained dofs follow, so assembled operators act on free dofs only and
//! constrained columns are lifted to the right-hand side. Cell fields are
//! cell-major and never constrained; facet fields are facet-major with facet
//! basis functions expressed in the facet's sorted-global-vertex
//! parametrization, which makes every trace dof single-valued across the two
//! adjacent cells by construction.

use crate::fe_basis::{lagrange_basis, space_dim, BasisSet, LagrangeBasis, NodeEntity};
use crate::mesh::Mesh;
use crate::{Error, Result};
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Field {
    U,
    UBar,
    PT,
    PTBar,
    Z,
    P,
    PBar,
}

impl Field {
    pub const ALL: [Field; 7] =
        [Field::U, Field::UBar, Field::PT, Field::PTBar, Field::Z, Field::P, Field::PBar];

    pub fn is_trace(self) -> bool {
        matches!(self, Field::UBar | Field::PTBar | Field::PBar)
    }

    /// Number of vector components in dimension `dim`.
    pub fn components(self, dim: usize) -> usize {
        match self {
            Field::U | Field::UBar | Field::Z => dim,
            _ => 1,
        }
    }
}

/// Trace space flavor for ū: fully discontinuous facet functions, or their
/// continuous subspace (nodes shared at skeleton vertices/edges).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Hdg,
    Edg,
}

/// Per-field dof table. `dofs_of(entity)` lists global (field-local) dof ids
/// for a cell (cell fields) or facet (trace fields); ids below `n_free` are
/// unknowns, the rest carry prescribed values.
#[derive(Debug, Clone)]
pub struct DofMap {
    pub field: Field,
    pub variant: Variant,
    stride: usize,
    entity_dofs: Vec<u32>,
    pub n_total: usize,
    pub n_free: usize,
    /// Prescribed coefficients, indexed by `id - n_free`.
    pub constrained_values: Vec<f64>,
}

impl DofMap {
    pub fn dofs_of(&self, entity: usize) -> &[u32] {
        &self.entity_dofs[entity * self.stride..(entity + 1) * self.stride]
    }

    pub fn stride(&self) -> usize {
        self.stride
    }

    pub fn is_constrained(&self, id: u32) -> bool {
        (id as usize) >= self.n_free
    }

    pub fn constrained_value(&self, id: u32) -> f64 {
        self.constrained_values[id as usize - self.n_free]
    }
}

/// Which parts of the boundary carry essential conditions: `None` means the
/// whole boundary (the model problem), otherwise the listed markers.
#[derive(Debug, Clone, Default)]
pub struct EssentialBc {
    pub u_markers: Option<Vec<i32>>,
    pub p_markers: Option<Vec<i32>>,
}

impl EssentialBc {
    fn constrains(&self, field: Field, marker: Option<i32>) -> bool {
        let list = match field {
            Field::UBar => &self.u_markers,
            Field::PBar => &self.p_markers,
            _ => return false,
        };
        match list {
            None => true,
            Some(ms) => marker.is_some_and(|m| ms.contains(&m)),
        }
    }
}

/// The seven dof maps plus the shared reference bases.
pub struct Spaces {
    pub k: usize,
    pub dim: usize,
    pub variant: Variant,
    pub u: DofMap,
    pub u_bar: DofMap,
    pub p_t: DofMap,
    pub p_t_bar: DofMap,
    pub z: DofMap,
    pub p: DofMap,
    pub p_bar: DofMap,
    /// ℙ_k cell basis (u, z components).
    pub cell_k: BasisSet,
    /// ℙ_{k−1} cell basis (p_T, p).
    pub cell_km1: BasisSet,
    /// ℙ_k facet basis (all trace fields).
    pub facet: LagrangeBasis,
}

impl Spaces {
    pub fn map(&self, f: Field) -> &DofMap {
        match f {
            Field::U => &self.u,
            Field::UBar => &self.u_bar,
            Field::PT => &self.p_t,
            Field::PTBar => &self.p_t_bar,
            Field::Z => &self.z,
            Field::P => &self.p,
            Field::PBar => &self.p_bar,
        }
    }

    fn map_mut(&mut self, f: Field) -> &mut DofMap {
        match f {
            Field::U => &mut self.u,
            Field::UBar => &mut self.u_bar,
            Field::PT => &mut self.p_t,
            Field::PTBar => &mut self.p_t_bar,
            Field::Z => &mut self.z,
            Field::P => &mut self.p,
            Field::PBar => &mut self.p_bar,
        }
    }

    /// Cell-field block sizes within one cell, in order (u, p_T, z, p).
    pub fn cell_field_sizes(&self) -> [usize; 4] {
        let nk = space_dim(self.dim, self.k);
        let nm = space_dim(self.dim, self.k - 1);
        [self.dim * nk, nm, self.dim * nk, nm]
    }

    /// Total cell dofs per cell.
    pub fn cell_block_size(&self) -> usize {
        self.cell_field_sizes().iter().sum()
    }

    /// Facet dofs per facet in the local trace layout (ū, p̄_T, p̄).
    pub fn facet_field_sizes(&self) -> [usize; 3] {
        let nf = space_dim(self.dim - 1, self.k);
        [self.dim * nf, nf, nf]
    }

    pub fn facet_block_size(&self) -> usize {
        self.facet_field_sizes().iter().sum()
    }

    /// Offset of a trace field inside the condensed (free-dof) trace vector:
    /// all ū first, then p̄_T, then p̄.
    pub fn trace_offset(&self, f: Field) -> usize {
        match f {
            Field::UBar => 0,
            Field::PTBar => self.u_bar.n_free,
            Field::PBar => self.u_bar.n_free + self.p_t_bar.n_free,
            _ => panic!("trace_offset of a cell field"),
        }
    }

    pub fn n_trace_free(&self) -> usize {
        self.u_bar.n_free + self.p_t_bar.n_free + self.p_bar.n_free
    }

    /// Condensed-vector index (or `u32::MAX` if constrained) and prescribed
    /// value for every local trace dof of a facet, in local layout order.
    pub fn facet_trace_indices(&self, facet: usize, idx: &mut Vec<u32>, vals: &mut Vec<f64>) {
        idx.clear();
        vals.clear();
        for f in [Field::UBar, Field::PTBar, Field::PBar] {
            let m = self.map(f);
            let off = self.trace_offset(f) as u32;
            for &id in m.dofs_of(facet) {
                if m.is_constrained(id) {
                    idx.push(u32::MAX);
                    vals.push(m.constrained_value(id));
                } else {
                    idx.push(off + id);
                    vals.push(0.0);
                }
            }
        }
    }
}

fn cell_field_map(field: Field, mesh: &Mesh, k: usize, comps: usize) -> DofMap {
    let nb = space_dim(mesh.dim(), k);
    let stride = comps * nb;
    let n = mesh.n_cells() * stride;
    DofMap {
        field,
        variant: Variant::Hdg,
        stride,
        entity_dofs: (0..n as u32).collect(),
        n_total: n,
        n_free: n,
        constrained_values: Vec::new(),
    }
}

/// Facet-major trace map: all dofs of a Dirichlet facet are constrained.
fn hdg_trace_map(
    field: Field,
    mesh: &Mesh,
    k: usize,
    comps: usize,
    bc: &EssentialBc,
) -> DofMap {
    let nf = space_dim(mesh.dim() - 1, k);
    let stride = comps * nf;
    let nfacets = mesh.n_facets();
    let mut constrained_facet = vec![false; nfacets];
    let mut n_free = 0usize;
    for (f, facet) in mesh.facets().iter().enumerate() {
        let c = facet.is_boundary() && bc.constrains(field, facet.marker);
        constrained_facet[f] = c;
        if !c {
            n_free += stride;
        }
    }
    let n_total = nfacets * stride;
    let mut entity_dofs = vec![0u32; n_total];
    let (mut next_free, mut next_con) = (0u32, n_free as u32);
    for f in 0..nfacets {
        for j in 0..stride {
            let id = if constrained_facet[f] {
                let id = next_con;
                next_con += 1;
                id
            } else {
                let id = next_free;
                next_free += 1;
                id
            };
            entity_dofs[f * stride + j] = id;
        }
    }
    DofMap {
        field,
        variant: Variant::Hdg,
        stride,
        entity_dofs,
        n_total,
        n_free,
        constrained_values: vec![0.0; n_total - n_free],
    }
}

/// Node key shared between facets: EDG ties ū dofs together wherever two
/// facets meet. Facet vertex lists are sorted by global id and Lagrange edge
/// entities are oriented low→high local vertex, so keys agree across facets
/// without orientation fixes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
enum NodeKey {
    Vertex(u32),
    Edge(u32, u32, u32),
    FacetInterior(u32, u32),
}

fn edg_trace_map(
    field: Field,
    mesh: &Mesh,
    facet_basis: &LagrangeBasis,
    comps: usize,
    bc: &EssentialBc,
) -> DofMap {
    let nf = facet_basis.size();
    let stride = comps * nf;
    let dim = mesh.dim();
    let node_key = |f: usize, ent: &NodeEntity| -> NodeKey {
        let verts = &mesh.facet(f).verts;
        match *ent {
            NodeEntity::Vertex(a) => NodeKey::Vertex(verts[a]),
            NodeEntity::Edge(a, b, i) => {
                debug_assert!(dim == 3 || (a, b) == (0, 1));
                NodeKey::Edge(verts[a], verts[b], i as u32)
            }
            NodeEntity::Interior(i) => NodeKey::FacetInterior(f as u32, i as u32),
        }
    };

    // Nodes touching a constrained facet are constrained (the continuous
    // trace space vanishes on the closure of the essential boundary).
    let mut constrained_keys: HashMap<NodeKey, ()> = HashMap::new();
    for (f, facet) in mesh.facets().iter().enumerate() {
        if facet.is_boundary() && bc.constrains(field, facet.marker) {
            for ent in &facet_basis.entities {
                constrained_keys.insert(node_key(f, ent), ());
            }
        }
    }

    // Assign node ids in deterministic facet/node encounter order.
    let mut node_ids: HashMap<NodeKey, u32> = HashMap::new();
    let mut free_nodes = 0u32;
    let mut con_nodes = 0u32;
    let mut order: Vec<(NodeKey, bool)> = Vec::new();
    for f in 0..mesh.n_facets() {
        for ent in &facet_basis.entities {
            let key = node_key(f, ent);
            if node_ids.contains_key(&key) {
                continue;
            }
            let con = constrained_keys.contains_key(&key);
            let id = if con {
                con_nodes += 1;
                con_nodes - 1
            } else {
                free_nodes += 1;
                free_nodes - 1
            };
            node_ids.insert(key, id);
            order.push((key, con));
        }
    }
    let n_free_nodes = free_nodes as usize;
    let n_nodes = n_free_nodes + con_nodes as usize;
    // dof id = node_id * comps + comp, constrained block shifted past free.
    let resolve = |key: &NodeKey, comp: usize| -> u32 {
        let nid = node_ids[key];
        let con = constrained_keys.contains_key(key);
        if con {
            (n_free_nodes * comps + nid as usize * comps + comp) as u32
        } else {
            (nid as usize * comps + comp) as u32
        }
    };

    let mut entity_dofs = vec![0u32; mesh.n_facets() * stride];
    for f in 0..mesh.n_facets() {
        for (l, ent) in facet_basis.entities.iter().enumerate() {
            let key = node_key(f, ent);
            for comp in 0..comps {
                // local layout is component-major: comp * nf + node
                entity_dofs[f * stride + comp * nf + l] = resolve(&key, comp);
            }
        }
    }
    let n_free = n_free_nodes * comps;
    let n_total = n_nodes * comps;
    DofMap {
        field,
        variant: Variant::Edg,
        stride,
        entity_dofs,
        n_total,
        n_free,
        constrained_values: vec![0.0; n_total - n_free],
    }
}

/// Builds all seven dof maps with essential conditions on the whole boundary
/// (u = 0 and p = 0 on ∂Ω — the model problem).
pub fn build_spaces(mesh: &Mesh, k: usize, variant: Variant) -> Result<Spaces> {
    build_spaces_with(mesh, k, variant, &EssentialBc::default())
}

/// Builds the dof maps with essential conditions restricted to the given
/// boundary markers. p̄_T is never constrained; it is the Lagrange multiplier
/// enforcing normal-displacement continuity, boundary included.
pub fn build_spaces_with(
    mesh: &Mesh,
    k: usize,
    variant: Variant,
    bc: &EssentialBc,
) -> Result<Spaces> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "polynomial degree must be at least 2 (pressure spaces use degree k-1), got {k}"
        )));
    }
    let dim = mesh.dim();
    let facet = lagrange_basis(dim - 1, k);
    let u_bar = match variant {
        Variant::Hdg => hdg_trace_map(Field::UBar, mesh, k, dim, bc),
        Variant::Edg => edg_trace_map(Field::UBar, mesh, &facet, dim, bc),
    };
    // p̄_T and p̄ stay fully discontinuous in both variants.
    let no_bc = EssentialBc { u_markers: Some(vec![]), p_markers: Some(vec![]) };
    Ok(Spaces {
        k,
        dim,
        variant,
        u: cell_field_map(Field::U, mesh, k, dim),
        u_bar,
        p_t: cell_field_map(Field::PT, mesh, k - 1, 1),
        p_t_bar: hdg_trace_map(Field::PTBar, mesh, k, 1, &no_bc),
        z: cell_field_map(Field::Z, mesh, k, dim),
        p: cell_field_map(Field::P, mesh, k - 1, 1),
        p_bar: hdg_trace_map(Field::PBar, mesh, k, 1, bc),
        cell_k: crate::fe_basis::simplex_basis(dim, k),
        cell_km1: crate::fe_basis::simplex_basis(dim, k - 1),
        facet,
    })
}

impl Spaces {
    /// Prescribes boundary values on the constrained dofs of a trace field:
    /// facet-wise L² projection for discontinuous traces, nodal interpolation
    /// for the continuous variant. `marker = None` targets every constrained
    /// facet. `g` fills one value per field component at a physical point.
    /// Returns the number of dofs set.
    pub fn set_dirichlet(
        &mut self,
        mesh: &Mesh,
        field: Field,
        marker: Option<i32>,
        g: &dyn Fn(&[f64; 3]) -> [f64; 3],
    ) -> Result<usize> {
        if !matches!(field, Field::UBar | Field::PBar) {
            return Err(Error::NotConstrainable(field));
        }
        let comps = field.components(self.dim);
        let nf = self.facet.size();
        let fdim = self.dim - 1;
        let variant = self.map(field).variant;
        let mut count = 0usize;

        // Facet mass and load in the reference parametrization; the physical
        // area factor cancels between the two sides of the projection.
        let quad = crate::fe_basis::quadrature(fdim, 2 * self.k + 2)?;
        let basis_at_q: Vec<nalgebra::DVector<f64>> =
            (0..quad.len()).map(|q| self.facet.values(quad.point(q))).collect();
        let mut mass = nalgebra::DMatrix::<f64>::zeros(nf, nf);
        for (q, &w) in quad.weights.iter().enumerate() {
            mass += &basis_at_q[q] * basis_at_q[q].transpose() * w;
        }
        let mass_chol = mass.cholesky().expect("facet mass is SPD");

        // Updates go through a staging vec to keep the borrow checker happy.
        let mut updates: Vec<(u32, f64)> = Vec::new();
        for (f, facet) in mesh.facets().iter().enumerate() {
            if !facet.is_boundary() {
                continue;
            }
            if let Some(m) = marker {
                if facet.marker != Some(m) {
                    continue;
                }
            }
            let dofmap = self.map(field);
            let ids = dofmap.dofs_of(f);
            if !dofmap.is_constrained(ids[0]) {
                continue;
            }
            // physical coordinates: canonical facet parametrization through
            // either side works; side 0 always exists.
            let side = facet.sides[0];
            let map = mesh.affine_map(side.cell as usize);
            let to_phys = |ref_pt: &[f64]| -> [f64; 3] {
                let cell_pts = crate::fe_basis::trace_points_permuted(
                    self.dim,
                    side.local_facet as usize,
                    &side.perm,
                    ref_pt,
                );
                map.apply(&cell_pts[..self.dim])
            };
            match variant {
                Variant::Hdg => {
                    let mut rhs = nalgebra::DMatrix::<f64>::zeros(nf, comps);
                    for (q, &w) in quad.weights.iter().enumerate() {
                        let x = to_phys(quad.point(q));
                        let gv = g(&x);
                        for c in 0..comps {
                            for i in 0..nf {
                                rhs[(i, c)] += w * gv[c] * basis_at_q[q][i];
                            }
                        }
                    }
                    let coefs = mass_chol.solve(&rhs);
                    for c in 0..comps {
                        for i in 0..nf {
                            updates.push((ids[c * nf + i], coefs[(i, c)]));
                        }
                    }
                }
                Variant::Edg => {
                    for l in 0..nf {
                        let x = to_phys(self.facet.node(l));
                        let gv = g(&x);
                        for c in 0..comps {
                            updates.push((ids[c * nf + l], gv[c]));
                        }
                    }
                }
            }
        }
        let dofmap = self.map_mut(field);
        for (id, v) in updates {
            debug_assert!(dofmap.is_constrained(id));
            dofmap.constrained_values[id as usize - dofmap.n_free] = v;
            count += 1;
        }
        Ok(count)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::unit_box_mesh;

    const SQ: [[f64; 2]; 2] = [[0.0, 1.0], [0.0, 1.0]];

    fn two_tri() -> Mesh {
        unit_box_mesh(2, 1, &SQ).unwrap()
    }

    #[test]
    fn hand_counts_two_cell_hdg() {
        let s = build_spaces(&two_tri(), 2, Variant::Hdg).unwrap();
        assert_eq!(s.u.n_total, 24); // 2 comps × 6 basis × 2 cells
        assert_eq!(s.p.n_total, 6); // 3 basis × 2 cells
        assert_eq!(s.p_t_bar.n_total, 15); // 3 per facet × 5 facets
        assert_eq!(s.p_t_bar.n_free, 15); // never constrained
        assert_eq!(s.p_bar.n_free, 3); // interior facet only
        assert_eq!(s.u_bar.n_total, 30);
        assert_eq!(s.u_bar.n_free, 6);
    }

    #[test]
    fn hand_counts_two_cell_edg() {
        // 4 corner vertices (all on ∂Ω) + 5 edge-interior nodes, of which
        // only the diagonal's is free: 1 node × 2 components.
        let s = build_spaces(&two_tri(), 2, Variant::Edg).unwrap();
        assert_eq!(s.u_bar.n_free, 2);
        assert_eq!(s.u_bar.n_total, 18); // 9 nodes × 2 comps
    }

    #[test]
    fn z_matches_u_everywhere() {
        for (dim, n) in [(2usize, 2usize), (3, 1)] {
            let bbox3 = [[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
            let m = unit_box_mesh(dim, n, &bbox3[..dim]).unwrap();
            let s = build_spaces(&m, 2, Variant::Hdg).unwrap();
            assert_eq!(s.z.n_total, s.u.n_total);
            assert_eq!(s.z.stride(), s.u.stride());
        }
    }

    #[test]
    fn degree_below_two_rejected() {
        assert!(build_spaces(&two_tri(), 1, Variant::Hdg).is_err());
    }

    #[test]
    fn interior_facet_single_valued() {
        // Both adjacent cells resolve the same global ids for each trace dof.
        let m = unit_box_mesh(2, 2, &SQ).unwrap();
        let s = build_spaces(&m, 2, Variant::Hdg).unwrap();
        for f in 0..m.n_facets() {
            let facet = m.facet(f);
            if facet.is_boundary() {
                continue;
            }
            for side in &facet.sides {
                let via_cell = m.cell_facet(side.cell as usize, side.local_facet as usize);
                assert_eq!(via_cell, f);
                assert_eq!(s.u_bar.dofs_of(via_cell), s.u_bar.dofs_of(f));
            }
        }
    }

    #[test]
    fn edg_embeds_into_hdg_continuously() {
        let m = unit_box_mesh(2, 2, &SQ).unwrap();
        let edg = build_spaces(&m, 2, Variant::Edg).unwrap();
        // Shared vertex nodes: facets meeting at an interior vertex resolve
        // the same dof id, and a random coefficient vector evaluates to the
        // same trace value at the shared point from every facet.
        let mut seen: HashMap<u32, Vec<(usize, usize)>> = HashMap::new();
        let nf = edg.facet.size();
        for f in 0..m.n_facets() {
            let ids = edg.u_bar.dofs_of(f);
            for l in 0..nf {
                if matches!(edg.facet.entities[l], NodeEntity::Vertex(_)) {
                    seen.entry(ids[l]).or_default().push((f, l));
                }
            }
        }
        let shared = seen.values().filter(|v| v.len() > 1).count();
        assert!(shared > 0, "expected shared vertex nodes");
        for occurrences in seen.values() {
            // same id ⇒ same physical node position from every facet
            let mut pts = Vec::new();
            for &(f, l) in occurrences {
                let facet = m.facet(f);
                let side = facet.sides[0];
                let cp = crate::fe_basis::trace_points_permuted(
                    2,
                    side.local_facet as usize,
                    &side.perm,
                    edg.facet.node(l),
                );
                let map = m.affine_map(side.cell as usize);
                pts.push(map.apply(&cp[..2]));
            }
            for p in &pts[1..] {
                for d in 0..3 {
                    assert!((p[d] - pts[0][d]).abs() < 1e-13);
                }
            }
        }
        // Embedding has full column rank: every EDG dof appears somewhere.
        let mut hit = vec![false; edg.u_bar.n_total];
        for f in 0..m.n_facets() {
            for &id in edg.u_bar.dofs_of(f) {
                hit[id as usize] = true;
            }
        }
        assert!(hit.iter().all(|&h| h));
    }

    #[test]
    fn dirichlet_projection_reproduces_polynomials() {
        // g(x, y) = x is in the trace space: projection residual vanishes at
        // facet quadrature points.
        let m = unit_box_mesh(2, 1, &SQ).unwrap();
        let mut s = build_spaces(&m, 2, Variant::Hdg).unwrap();
        let n = s
            .set_dirichlet(&m, Field::PBar, None, &|x| [x[0] * x[0] - 2.0 * x[1], 0.0, 0.0])
            .unwrap();
        assert_eq!(n, 12); // 4 boundary facets × 3 dofs
        let quad = crate::fe_basis::quadrature(1, 6).unwrap();
        for (f, facet) in m.facets().iter().enumerate() {
            if !facet.is_boundary() {
                continue;
            }
            let ids = s.p_bar.dofs_of(f);
            let side = facet.sides[0];
            let map = m.affine_map(side.cell as usize);
            for q in 0..quad.len() {
                let vals = s.facet.values(quad.point(q));
                let num: f64 = (0..s.facet.size())
                    .map(|i| vals[i] * s.p_bar.constrained_value(ids[i]))
                    .sum();
                let cp = crate::fe_basis::trace_points_permuted(
                    2,
                    side.local_facet as usize,
                    &side.perm,
                    quad.point(q),
                );
                let x = map.apply(&cp[..2]);
                let exact = x[0] * x[0] - 2.0 * x[1];
                assert!((num - exact).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_function_zero_coefficients() {
        let m = two_tri();
        let mut s = build_spaces(&m, 2, Variant::Hdg).unwrap();
        s.set_dirichlet(&m, Field::UBar, None, &|_| [0.0; 3]).unwrap();
        assert!(s.u_bar.constrained_values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dirichlet_rejected_on_nonconstrainable_fields() {
        let m = two_tri();
        let mut s = build_spaces(&m, 2, Variant::Hdg).unwrap();
        for f in [Field::U, Field::PT, Field::PTBar, Field::Z, Field::P] {
            assert!(matches!(
                s.set_dirichlet(&m, f, None, &|_| [0.0; 3]),
                Err(Error::NotConstrainable(_))
            ));
        }
    }

    #[test]
    fn marker_restriction() {
        // Footing-style: ū constrained on one face only.
        let m = unit_box_mesh(2, 2, &SQ).unwrap();
        let bc = EssentialBc { u_markers: Some(vec![3]), p_markers: None };
        let s = build_spaces_with(&m, 2, Variant::Hdg, &bc).unwrap();
        // 2 facets on y-min, 6 dofs each constrained
        assert_eq!(s.u_bar.n_total - s.u_bar.n_free, 12);
        // p̄ constrained on all 8 boundary facets
        assert_eq!(s.p_bar.n_total - s.p_bar.n_free, 24);
    }

    #[test]
    fn counts_formula_3d() {
        let m = unit_box_mesh(3, 1, &[[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]]).unwrap();
        let s = build_spaces(&m, 2, Variant::Hdg).unwrap();
        let cells = m.n_cells();
        let facets = m.n_facets();
        assert_eq!(s.u.n_total, 3 * 10 * cells);
        assert_eq!(s.p_t.n_total, 4 * cells);
        assert_eq!(s.u_bar.n_total, 3 * 6 * facets);
        assert_eq!(s.p_t_bar.n_total, 6 * facets);
    }
}
