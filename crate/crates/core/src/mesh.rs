//! Simplicial meshes (triangles, tetrahedra): structured box generators, Gmsh
//! ASCII v2.2 import, facet topology with two-sided adjacency, and per-entity
//! affine geometry.
//!
//! Facets are identified by their sorted global vertex tuple and stored in
//! lexicographic order of that tuple, so facet numbering (and therefore every
//! assembled matrix) is independent of cell traversal order. Each facet side
//! records the permutation taking the facet's canonical (sorted-vertex)
//! parametrization to the adjacent cell's local facet vertices; facet basis
//! functions are always evaluated in the canonical parametrization, which
//! makes trace fields single-valued across interior facets by construction.

use crate::{Error, Result};
use std::collections::HashMap;
use std::io::{BufRead, Write as IoWrite};
use std::path::Path;

pub const NO_CELL: u32 = u32::MAX;

/// Reference-to-physical affine map of a cell: x = translation + J x̂.
///
/// Arrays are padded to 3×3 (`jacobian[2][2] = 1` in 2D) so determinant and
/// inverse work uniformly; `det` is the determinant of the dim×dim block and
/// is positive for every stored cell.
#[derive(Debug, Clone, Copy)]
pub struct AffineMap {
    pub jacobian: [[f64; 3]; 3],
    pub inverse_jacobian: [[f64; 3]; 3],
    pub det: f64,
    pub translation: [f64; 3],
}

impl AffineMap {
    fn from_vertices(dim: usize, verts: &[[f64; 3]]) -> Self {
        let mut j = [[0.0; 3]; 3];
        for a in 0..3 {
            j[a][a] = 1.0;
        }
        for col in 0..dim {
            for row in 0..dim {
                j[row][col] = verts[col + 1][row] - verts[0][row];
            }
        }
        let det3 = det3x3(&j);
        let inv = inv3x3(&j, det3);
        let det = if dim == 2 {
            j[0][0] * j[1][1] - j[0][1] * j[1][0]
        } else {
            det3
        };
        AffineMap { jacobian: j, inverse_jacobian: inv, det, translation: verts[0] }
    }

    /// Physical point of a reference point (first `dim` entries used).
    pub fn apply(&self, xref: &[f64]) -> [f64; 3] {
        let mut x = self.translation;
        for (col, &xc) in xref.iter().enumerate() {
            for row in 0..3 {
                x[row] += self.jacobian[row][col] * xc;
            }
        }
        x
    }

    /// Physical gradient from a reference gradient: ∇f = J⁻ᵀ ∇̂f.
    pub fn push_gradient(&self, gref: &[f64], dim: usize) -> [f64; 3] {
        let mut g = [0.0; 3];
        for row in 0..dim {
            for col in 0..dim {
                g[row] += self.inverse_jacobian[col][row] * gref[col];
            }
        }
        g
    }
}

fn det3x3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

fn inv3x3(m: &[[f64; 3]; 3], det: f64) -> [[f64; 3]; 3] {
    let c = |r: usize, s: usize| -> f64 {
        let (r1, r2) = ((r + 1) % 3, (r + 2) % 3);
        let (s1, s2) = ((s + 1) % 3, (s + 2) % 3);
        m[r1][s1] * m[r2][s2] - m[r1][s2] * m[r2][s1]
    };
    let mut inv = [[0.0; 3]; 3];
    for r in 0..3 {
        for s in 0..3 {
            inv[r][s] = c(s, r) / det;
        }
    }
    inv
}

/// One side of a facet: the adjacent cell, which local facet of that cell it
/// is, and where each canonical (sorted-global) facet vertex sits in the
/// cell's local facet vertex list.
#[derive(Debug, Clone, Copy)]
pub struct FacetSide {
    pub cell: u32,
    pub local_facet: u8,
    /// `perm[j]` = index into the cell's canonical local facet vertex list of
    /// the facet's j-th sorted-global vertex.
    pub perm: [u8; 3],
}

#[derive(Debug, Clone)]
pub struct Facet {
    /// Sorted global vertex ids; entries past `dim` are `u32::MAX`.
    pub verts: [u32; 3],
    /// Adjacent sides; `sides[1].cell == NO_CELL` for boundary facets.
    pub sides: [FacetSide; 2],
    /// Boundary tag; `None` on interior facets.
    pub marker: Option<i32>,
}

impl Facet {
    pub fn is_boundary(&self) -> bool {
        self.sides[1].cell == NO_CELL
    }
}

/// Geometry of one facet as seen from its adjacent cells.
#[derive(Debug, Clone, Copy)]
pub struct FacetGeometry {
    /// Outward unit normal per side (second entry meaningful only on
    /// interior facets).
    pub normal: [[f64; 3]; 2],
    pub area: f64,
    /// Diameter (longest edge) of each adjacent cell.
    pub h: [f64; 2],
}

#[derive(Debug, Clone)]
pub struct Mesh {
    dim: usize,
    coords: Vec<f64>,
    cells: Vec<u32>,
    facets: Vec<Facet>,
    /// facet indices of each cell, by local facet number.
    cell_facets: Vec<u32>,
}

/// Local facet `i` of a d-simplex is opposite local vertex `i`; its canonical
/// local vertex list is all cell vertices except `i`, in increasing local
/// order.
pub fn local_facet_vertices(dim: usize, local_facet: usize) -> [usize; 3] {
    let mut out = [usize::MAX; 3];
    let mut k = 0;
    for v in 0..=dim {
        if v != local_facet {
            out[k] = v;
            k += 1;
        }
    }
    out
}

/// Reference simplex vertices: origin and unit vectors.
pub fn reference_vertex(i: usize) -> [f64; 3] {
    let mut v = [0.0; 3];
    if i > 0 {
        v[i - 1] = 1.0;
    }
    v
}

/// Measure of the reference simplex of dimension `dim` (1, 1/2, 1/6).
pub fn reference_measure(dim: usize) -> f64 {
    match dim {
        0 => 1.0,
        1 => 1.0,
        2 => 0.5,
        3 => 1.0 / 6.0,
        _ => unreachable!(),
    }
}

impl Mesh {
    /// Builds a mesh from raw vertices and cells. Cells are reoriented to
    /// positive signed volume; facet topology is derived from sorted vertex
    /// tuples. `markers` assigns tags to boundary facets by sorted tuple.
    fn from_cells(
        dim: usize,
        coords: Vec<f64>,
        mut cells: Vec<u32>,
        markers: &HashMap<Vec<u32>, i32>,
    ) -> Result<Self> {
        let nverts_cell = dim + 1;
        assert_eq!(cells.len() % nverts_cell, 0);
        let ncells = cells.len() / nverts_cell;
        let nvertices = coords.len() / dim;

        // Positive orientation: swap the last two vertices if needed.
        for c in 0..ncells {
            let cv = &mut cells[c * nverts_cell..(c + 1) * nverts_cell];
            if cv.iter().any(|&v| v as usize >= nvertices) {
                return Err(Error::Mesh(format!("cell {c} references missing vertex")));
            }
            let verts: Vec<[f64; 3]> =
                cv.iter().map(|&v| vertex_coords(dim, &coords, v as usize)).collect();
            let vol = AffineMap::from_vertices(dim, &verts).det;
            if vol == 0.0 {
                return Err(Error::Mesh(format!("cell {c} is degenerate")));
            }
            if vol < 0.0 {
                cv.swap(dim - 1, dim);
            }
        }

        // Facet discovery: sorted vertex tuple → sides.
        let mut table: HashMap<[u32; 3], Vec<FacetSide>> = HashMap::new();
        for c in 0..ncells {
            let cv = &cells[c * nverts_cell..(c + 1) * nverts_cell];
            for lf in 0..=dim {
                let lverts = local_facet_vertices(dim, lf);
                let mut key = [u32::MAX; 3];
                for j in 0..dim {
                    key[j] = cv[lverts[j]];
                }
                let mut sorted = key;
                sorted[..dim].sort_unstable();
                // perm[j]: position of sorted[j] within the cell-local list.
                let mut perm = [u8::MAX; 3];
                for j in 0..dim {
                    perm[j] =
                        key[..dim].iter().position(|&g| g == sorted[j]).unwrap() as u8;
                }
                table.entry(sorted).or_default().push(FacetSide {
                    cell: c as u32,
                    local_facet: lf as u8,
                    perm,
                });
            }
        }

        let mut keys: Vec<[u32; 3]> = table.keys().copied().collect();
        keys.sort_unstable();
        let dummy = FacetSide { cell: NO_CELL, local_facet: 0, perm: [0; 3] };
        let mut facets = Vec::with_capacity(keys.len());
        let mut cell_facets = vec![u32::MAX; ncells * nverts_cell];
        for key in keys {
            let mut sides = table.remove(&key).unwrap();
            if sides.len() > 2 {
                return Err(Error::Mesh(format!(
                    "facet {:?} adjacent to {} cells",
                    &key[..dim],
                    sides.len()
                )));
            }
            sides.sort_by_key(|s| s.cell);
            let marker = if sides.len() == 1 {
                markers.get(&key[..dim].to_vec()).copied()
            } else {
                None
            };
            let fid = facets.len() as u32;
            for s in &sides {
                cell_facets[s.cell as usize * nverts_cell + s.local_facet as usize] = fid;
            }
            let second = sides.get(1).copied().unwrap_or(dummy);
            facets.push(Facet { verts: key, sides: [sides[0], second], marker });
        }

        let mesh = Mesh { dim, coords, cells, facets, cell_facets };
        mesh.check_closed_boundary()?;
        Ok(mesh)
    }

    /// Every boundary (d−2)-entity (vertex in 2D, edge in 3D) must be shared
    /// by exactly two boundary facets: the boundary is a closed surface.
    fn check_closed_boundary(&self) -> Result<()> {
        let mut counts: HashMap<[u32; 2], usize> = HashMap::new();
        for f in &self.facets {
            if !f.is_boundary() {
                continue;
            }
            match self.dim {
                2 => {
                    for j in 0..2 {
                        *counts.entry([f.verts[j], u32::MAX]).or_insert(0) += 1;
                    }
                }
                _ => {
                    for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                        *counts.entry([f.verts[a], f.verts[b]]).or_insert(0) += 1;
                    }
                }
            }
        }
        for (ent, n) in counts {
            if n != 2 {
                return Err(Error::Mesh(format!(
                    "boundary is not closed: entity {ent:?} on {n} boundary facets"
                )));
            }
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_vertices(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn n_cells(&self) -> usize {
        self.cells.len() / (self.dim + 1)
    }

    pub fn n_facets(&self) -> usize {
        self.facets.len()
    }

    pub fn vertex(&self, v: usize) -> [f64; 3] {
        vertex_coords(self.dim, &self.coords, v)
    }

    pub fn cell_vertices(&self, c: usize) -> &[u32] {
        &self.cells[c * (self.dim + 1)..(c + 1) * (self.dim + 1)]
    }

    pub fn facet(&self, f: usize) -> &Facet {
        &self.facets[f]
    }

    pub fn facets(&self) -> &[Facet] {
        &self.facets
    }

    /// Facet index of local facet `lf` of cell `c`.
    pub fn cell_facet(&self, c: usize, lf: usize) -> usize {
        self.cell_facets[c * (self.dim + 1) + lf] as usize
    }

    pub fn affine_map(&self, c: usize) -> AffineMap {
        let verts: Vec<[f64; 3]> =
            self.cell_vertices(c).iter().map(|&v| self.vertex(v as usize)).collect();
        AffineMap::from_vertices(self.dim, &verts)
    }

    pub fn cell_volume(&self, c: usize) -> f64 {
        self.affine_map(c).det * reference_measure(self.dim)
    }

    /// Cell diameter: longest edge.
    pub fn cell_diameter(&self, c: usize) -> f64 {
        let cv = self.cell_vertices(c);
        let mut h: f64 = 0.0;
        for i in 0..cv.len() {
            for j in (i + 1)..cv.len() {
                let a = self.vertex(cv[i] as usize);
                let b = self.vertex(cv[j] as usize);
                let d2: f64 = (0..3).map(|k| (a[k] - b[k]) * (a[k] - b[k])).sum();
                h = h.max(d2.sqrt());
            }
        }
        h
    }

    /// Outward unit normal of local facet `lf` of cell `c`.
    pub fn outward_normal(&self, c: usize, lf: usize) -> [f64; 3] {
        let map = self.affine_map(c);
        // Barycentric gradient of λ_lf on the reference cell; λ_lf vanishes
        // on the facet and grows inward, so the outward normal is -∇λ_lf.
        let mut gref = [0.0; 3];
        if lf == 0 {
            for g in gref.iter_mut().take(self.dim) {
                *g = -1.0;
            }
        } else {
            gref[lf - 1] = 1.0;
        }
        let g = map.push_gradient(&gref[..self.dim], self.dim);
        let norm = (g[0] * g[0] + g[1] * g[1] + g[2] * g[2]).sqrt();
        [-g[0] / norm, -g[1] / norm, -g[2] / norm]
    }

    pub fn facet_area(&self, f: usize) -> f64 {
        let fv = &self.facets[f].verts;
        match self.dim {
            2 => {
                let a = self.vertex(fv[0] as usize);
                let b = self.vertex(fv[1] as usize);
                ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt()
            }
            _ => {
                let a = self.vertex(fv[0] as usize);
                let b = self.vertex(fv[1] as usize);
                let c = self.vertex(fv[2] as usize);
                let u = [b[0] - a[0], b[1] - a[1], b[2] - a[2]];
                let v = [c[0] - a[0], c[1] - a[1], c[2] - a[2]];
                let cx = u[1] * v[2] - u[2] * v[1];
                let cy = u[2] * v[0] - u[0] * v[2];
                let cz = u[0] * v[1] - u[1] * v[0];
                0.5 * (cx * cx + cy * cy + cz * cz).sqrt()
            }
        }
    }

    /// Normals (outward per adjacent cell), area, and adjacent-cell diameters
    /// of a facet.
    pub fn facet_geometry(&self, f: usize) -> FacetGeometry {
        let facet = &self.facets[f];
        let mut normal = [[0.0; 3]; 2];
        let mut h = [0.0; 2];
        for s in 0..2 {
            let side = facet.sides[s];
            if side.cell == NO_CELL {
                continue;
            }
            normal[s] = self.outward_normal(side.cell as usize, side.local_facet as usize);
            h[s] = self.cell_diameter(side.cell as usize);
        }
        FacetGeometry { normal, area: self.facet_area(f), h }
    }

    /// Reassigns boundary markers. `classify` receives the centroid and the
    /// current marker of each boundary facet and returns the new marker, or
    /// `None` to keep the existing one. Interior facets are untouched.
    pub fn remark_boundary(&mut self, classify: &dyn Fn(&[f64; 3], Option<i32>) -> Option<i32>) {
        let dim = self.dim;
        let mut centroids = Vec::new();
        for facet in &self.facets {
            if !facet.is_boundary() {
                centroids.push(None);
                continue;
            }
            let mut c = [0.0; 3];
            for &v in &facet.verts[..dim] {
                let p = vertex_coords(dim, &self.coords, v as usize);
                for d in 0..3 {
                    c[d] += p[d];
                }
            }
            for d in 0..3 {
                c[d] /= dim as f64;
            }
            centroids.push(Some(c));
        }
        for (facet, c) in self.facets.iter_mut().zip(&centroids) {
            if let Some(c) = c {
                if let Some(m) = classify(c, facet.marker) {
                    facet.marker = Some(m);
                }
            }
        }
    }

    /// Writes the mesh and vertex data as legacy ASCII VTK.
    pub fn write_vtk(
        &self,
        path: &Path,
        point_scalars: &[(&str, &[f64])],
        point_vectors: &[(&str, &[f64])],
    ) -> Result<()> {
        let nv = self.n_vertices();
        let nc = self.n_cells();
        let mut out = String::new();
        out.push_str("# vtk DataFile Version 3.0\nbiot-hdg fields\nASCII\n");
        out.push_str("DATASET UNSTRUCTURED_GRID\n");
        out.push_str(&format!("POINTS {nv} double\n"));
        for v in 0..nv {
            let p = self.vertex(v);
            out.push_str(&format!("{:.17e} {:.17e} {:.17e}\n", p[0], p[1], p[2]));
        }
        let k = self.dim + 1;
        out.push_str(&format!("CELLS {} {}\n", nc, nc * (k + 1)));
        for c in 0..nc {
            out.push_str(&format!("{k}"));
            for &v in self.cell_vertices(c) {
                out.push_str(&format!(" {v}"));
            }
            out.push('\n');
        }
        out.push_str(&format!("CELL_TYPES {nc}\n"));
        let vtk_type = if self.dim == 2 { 5 } else { 10 };
        for _ in 0..nc {
            out.push_str(&format!("{vtk_type}\n"));
        }
        if !point_scalars.is_empty() || !point_vectors.is_empty() {
            out.push_str(&format!("POINT_DATA {nv}\n"));
        }
        for (name, vals) in point_scalars {
            assert_eq!(vals.len(), nv);
            out.push_str(&format!("SCALARS {name} double 1\nLOOKUP_TABLE default\n"));
            for v in vals.iter() {
                out.push_str(&format!("{v:.17e}\n"));
            }
        }
        for (name, vals) in point_vectors {
            assert_eq!(vals.len(), 3 * nv);
            out.push_str(&format!("VECTORS {name} double\n"));
            for v in 0..nv {
                out.push_str(&format!(
                    "{:.17e} {:.17e} {:.17e}\n",
                    vals[3 * v],
                    vals[3 * v + 1],
                    vals[3 * v + 2]
                ));
            }
        }
        let mut file = std::fs::File::create(path)?;
        file.write_all(out.as_bytes())?;
        Ok(())
    }
}

fn vertex_coords(dim: usize, coords: &[f64], v: usize) -> [f64; 3] {
    let mut p = [0.0; 3];
    p[..dim].copy_from_slice(&coords[v * dim..(v + 1) * dim]);
    p
}

/// Structured mesh of an axis-aligned box: each grid square split into two
/// triangles along the (low → high) diagonal in 2D, each grid cube into six
/// tetrahedra sharing the main diagonal (Kuhn split) in 3D.
///
/// Boundary facets are tagged by box face: x-min → 1, x-max → 2, y-min → 3,
/// y-max → 4, z-min → 5, z-max → 6.
pub fn unit_box_mesh(dim: usize, n: usize, bbox: &[[f64; 2]]) -> Result<Mesh> {
    if dim != 2 && dim != 3 {
        return Err(Error::InvalidArgument(format!("dim must be 2 or 3, got {dim}")));
    }
    assert!(n >= 1, "n must be at least 1");
    assert_eq!(bbox.len(), dim);
    for b in bbox {
        if !(b[1] > b[0]) {
            return Err(Error::InvalidArgument("degenerate bounding box".into()));
        }
    }
    // Grid line coordinates, shared between vertex construction and boundary
    // classification so face membership is exact equality.
    let lines: Vec<Vec<f64>> = (0..dim)
        .map(|d| {
            (0..=n)
                .map(|i| bbox[d][0] + (bbox[d][1] - bbox[d][0]) * (i as f64) / (n as f64))
                .collect()
        })
        .collect();

    let np = n + 1;
    let vid = |ix: usize, iy: usize, iz: usize| -> u32 {
        (ix + np * (iy + if dim == 3 { np * iz } else { 0 })) as u32
    };
    let mut coords = Vec::new();
    let nz = if dim == 3 { np } else { 1 };
    for iz in 0..nz {
        for iy in 0..np {
            for ix in 0..np {
                coords.push(lines[0][ix]);
                coords.push(lines[1][iy]);
                if dim == 3 {
                    coords.push(lines[2][iz]);
                }
            }
        }
    }

    let mut cells: Vec<u32> = Vec::new();
    if dim == 2 {
        for iy in 0..n {
            for ix in 0..n {
                let (a, b, c, d) =
                    (vid(ix, iy, 0), vid(ix + 1, iy, 0), vid(ix + 1, iy + 1, 0), vid(ix, iy + 1, 0));
                cells.extend_from_slice(&[a, b, c]);
                cells.extend_from_slice(&[a, c, d]);
            }
        }
    } else {
        // Kuhn split: tet per permutation σ, vertices c, c+e_{σ0},
        // c+e_{σ0}+e_{σ1}, c+(1,1,1).
        const PERMS: [[usize; 3]; 6] =
            [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];
        for iz in 0..n {
            for iy in 0..n {
                for ix in 0..n {
                    let base = [ix, iy, iz];
                    for perm in &PERMS {
                        let mut p = base;
                        let mut tet = [vid(p[0], p[1], p[2]), 0, 0, 0];
                        for (step, &axis) in perm.iter().enumerate() {
                            p[axis] += 1;
                            tet[step + 1] = vid(p[0], p[1], p[2]);
                        }
                        cells.extend_from_slice(&tet);
                    }
                }
            }
        }
    }

    // Boundary markers by box face, via exact comparison against the shared
    // grid-line values.
    let nvc = dim; // vertices per facet
    let mut markers: HashMap<Vec<u32>, i32> = HashMap::new();
    let on_face = |v: u32, d: usize, hi: bool| -> bool {
        let x = coords[v as usize * dim + d];
        x == lines[d][if hi { n } else { 0 }]
    };
    // Enumerate candidate boundary facets from cells directly.
    let ncells = cells.len() / (dim + 1);
    for c in 0..ncells {
        let cv = &cells[c * (dim + 1)..(c + 1) * (dim + 1)];
        for lf in 0..=dim {
            let lverts = local_facet_vertices(dim, lf);
            let mut key: Vec<u32> = (0..nvc).map(|j| cv[lverts[j]]).collect();
            key.sort_unstable();
            for d in 0..dim {
                for hi in [false, true] {
                    if key.iter().all(|&v| on_face(v, d, hi)) {
                        markers.insert(key.clone(), (2 * d + 1 + usize::from(hi)) as i32);
                    }
                }
            }
        }
    }

    Mesh::from_cells(dim, coords, cells, &markers)
}

/// Reads a Gmsh ASCII v2.2 file. Physical tags of codimension-1 elements
/// (lines under triangle meshes, triangles under tetrahedral meshes) become
/// boundary markers; point elements are ignored.
pub fn import_gmsh(path: &Path) -> Result<Mesh> {
    let file = std::fs::File::open(path)?;
    let reader = std::io::BufReader::new(file);
    let mut lines = reader.lines();

    let mut node_ids: HashMap<u64, u32> = HashMap::new();
    let mut raw_nodes: Vec<[f64; 3]> = Vec::new();
    let mut tris: Vec<([u32; 3], i32)> = Vec::new();
    let mut tets: Vec<([u32; 4], i32)> = Vec::new();
    let mut segs: Vec<([u32; 2], i32)> = Vec::new();
    let mut saw_format = false;

    let malformed = |what: &str| Error::GmshParse(format!("malformed {what} section"));

    while let Some(line) = lines.next() {
        let line = line?;
        match line.trim() {
            "$MeshFormat" => {
                let ver = lines.next().ok_or_else(|| malformed("MeshFormat"))??;
                let mut it = ver.split_whitespace();
                let v = it.next().unwrap_or("");
                if !v.starts_with("2.") {
                    return Err(Error::GmshParse(format!("unsupported format version {v}")));
                }
                if it.next() != Some("0") {
                    return Err(Error::GmshParse("binary gmsh files not supported".into()));
                }
                let end = lines.next().ok_or_else(|| malformed("MeshFormat"))??;
                if end.trim() != "$EndMeshFormat" {
                    return Err(malformed("MeshFormat"));
                }
                saw_format = true;
            }
            "$Nodes" => {
                let count: usize = lines
                    .next()
                    .ok_or_else(|| malformed("Nodes"))??
                    .trim()
                    .parse()
                    .map_err(|_| malformed("Nodes"))?;
                for _ in 0..count {
                    let ln = lines.next().ok_or_else(|| malformed("Nodes"))??;
                    let mut it = ln.split_whitespace();
                    let id: u64 = it
                        .next()
                        .and_then(|s| s.parse().ok())
                        .ok_or_else(|| malformed("Nodes"))?;
                    let mut xyz = [0.0; 3];
                    for x in xyz.iter_mut() {
                        *x = it
                            .next()
                            .and_then(|s| s.parse().ok())
                            .ok_or_else(|| malformed("Nodes"))?;
                    }
                    node_ids.insert(id, raw_nodes.len() as u32);
                    raw_nodes.push(xyz);
                }
                let end = lines.next().ok_or_else(|| malformed("Nodes"))??;
                if end.trim() != "$EndNodes" {
                    return Err(malformed("Nodes"));
                }
            }
            "$Elements" => {
                let count: usize = lines
                    .next()
                    .ok_or_else(|| malformed("Elements"))??
                    .trim()
                    .parse()
                    .map_err(|_| malformed("Elements"))?;
                for _ in 0..count {
                    let ln = lines.next().ok_or_else(|| malformed("Elements"))??;
                    let toks: Vec<&str> = ln.split_whitespace().collect();
                    if toks.len() < 3 {
                        return Err(malformed("Elements"));
                    }
                    let etype: usize = toks[1].parse().map_err(|_| malformed("Elements"))?;
                    let ntags: usize = toks[2].parse().map_err(|_| malformed("Elements"))?;
                    let phys: i32 = if ntags >= 1 {
                        toks.get(3).and_then(|s| s.parse().ok()).unwrap_or(0)
                    } else {
                        0
                    };
                    let nodes = &toks[3 + ntags..];
                    let need = match etype {
                        1 => 2,  // 2-node line
                        2 => 3,  // 3-node triangle
                        4 => 4,  // 4-node tetrahedron
                        15 => 1, // point
                        other => return Err(Error::UnsupportedElement(other)),
                    };
                    if nodes.len() != need {
                        return Err(malformed("Elements"));
                    }
                    let resolve = |s: &&str| -> Result<u32> {
                        let id: u64 = s.parse().map_err(|_| malformed("Elements"))?;
                        node_ids
                            .get(&id)
                            .copied()
                            .ok_or_else(|| Error::GmshParse(format!("unknown node id {id}")))
                    };
                    match etype {
                        1 => {
                            let mut v = [resolve(&nodes[0])?, resolve(&nodes[1])?];
                            v.sort_unstable();
                            segs.push((v, phys));
                        }
                        2 => {
                            let v =
                                [resolve(&nodes[0])?, resolve(&nodes[1])?, resolve(&nodes[2])?];
                            tris.push((v, phys));
                        }
                        4 => {
                            let v = [
                                resolve(&nodes[0])?,
                                resolve(&nodes[1])?,
                                resolve(&nodes[2])?,
                                resolve(&nodes[3])?,
                            ];
                            tets.push((v, phys));
                        }
                        _ => {} // points ignored
                    }
                }
                let end = lines.next().ok_or_else(|| malformed("Elements"))??;
                if end.trim() != "$EndElements" {
                    return Err(malformed("Elements"));
                }
            }
            s if s.starts_with('$') && !s.starts_with("$End") => {
                // Skip unknown sections ($PhysicalNames etc.).
                let endtag = format!("$End{}", &s[1..]);
                loop {
                    let ln = lines.next().ok_or_else(|| malformed(s))??;
                    if ln.trim() == endtag {
                        break;
                    }
                }
            }
            _ => {}
        }
    }
    if !saw_format {
        return Err(malformed("MeshFormat"));
    }
    if raw_nodes.is_empty() {
        return Err(Error::GmshParse("no nodes".into()));
    }

    let dim = if !tets.is_empty() { 3 } else { 2 };
    if dim == 2 && tris.is_empty() {
        return Err(Error::GmshParse("no cells (triangles or tetrahedra)".into()));
    }

    let mut markers: HashMap<Vec<u32>, i32> = HashMap::new();
    let mut coords = Vec::with_capacity(raw_nodes.len() * dim);
    for p in &raw_nodes {
        coords.extend_from_slice(&p[..dim]);
    }
    let mut cells: Vec<u32> = Vec::new();
    if dim == 3 {
        for (v, _) in &tets {
            cells.extend_from_slice(v);
        }
        // Triangles are boundary markers; one that matches no tet facet means
        // the file mixes 2D and 3D regions.
        let mut tet_faces: HashMap<[u32; 3], ()> = HashMap::new();
        for (v, _) in &tets {
            for lf in 0..4 {
                let lverts = local_facet_vertices(3, lf);
                let mut face = [v[lverts[0]], v[lverts[1]], v[lverts[2]]];
                face.sort_unstable();
                tet_faces.insert(face, ());
            }
        }
        for (v, phys) in &tris {
            let mut key = *v;
            key.sort_unstable();
            if !tet_faces.contains_key(&key) {
                return Err(Error::GmshParse(
                    "mixed dimension: triangle element is not a tetrahedron facet".into(),
                ));
            }
            markers.insert(key.to_vec(), *phys);
        }
        if !segs.is_empty() {
            // Line elements in a 3D mesh only mark edges; ignored.
        }
    } else {
        for (v, _) in &tris {
            cells.extend_from_slice(v);
        }
        let mut tri_edges: HashMap<[u32; 2], ()> = HashMap::new();
        for (v, _) in &tris {
            for (a, b) in [(0, 1), (0, 2), (1, 2)] {
                let mut e = [v[a], v[b]];
                e.sort_unstable();
                tri_edges.insert(e, ());
            }
        }
        for (v, phys) in &segs {
            if !tri_edges.contains_key(v) {
                return Err(Error::GmshParse(
                    "mixed dimension: line element is not a triangle edge".into(),
                ));
            }
            markers.insert(v.to_vec(), *phys);
        }
    }

    Mesh::from_cells(dim, coords, cells, &markers)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::io::Write;

    pub const UNIT_SQUARE: [[f64; 2]; 2] = [[0.0, 1.0], [0.0, 1.0]];
    pub const UNIT_CUBE: [[f64; 2]; 3] = [[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];

    #[test]
    fn smallest_split_counts() {
        let m = unit_box_mesh(2, 1, &UNIT_SQUARE).unwrap();
        assert_eq!(m.n_cells(), 2);
        assert_eq!(m.n_facets(), 5);
        assert_eq!(m.facets().iter().filter(|f| f.is_boundary()).count(), 4);
    }

    #[test]
    fn kuhn_split_count() {
        let m = unit_box_mesh(3, 1, &UNIT_CUBE).unwrap();
        assert_eq!(m.n_cells(), 6);
    }

    #[test]
    fn two_by_two_counts() {
        // Hand enumeration: 9 vertices; 6 horizontal + 6 vertical + 4
        // diagonal edges; 8 boundary edges.
        let m = unit_box_mesh(2, 2, &UNIT_SQUARE).unwrap();
        assert_eq!(m.n_cells(), 8);
        assert_eq!(m.n_facets(), 16);
        assert_eq!(m.facets().iter().filter(|f| f.is_boundary()).count(), 8);
    }

    #[test]
    fn dim_validation() {
        assert!(unit_box_mesh(4, 1, &[[0.0, 1.0]; 4]).is_err());
        assert!(unit_box_mesh(1, 1, &[[0.0, 1.0]]).is_err());
    }

    #[test]
    fn hypotenuse_normal_and_area() {
        // Reference-triangle cell (0,0),(1,0),(0,1): the facet not on an
        // axis is the hypotenuse with outward normal (1,1)/√2 and length √2.
        let m = unit_box_mesh(2, 1, &UNIT_SQUARE).unwrap();
        let mut found = false;
        for f in 0..m.n_facets() {
            let g = m.facet_geometry(f);
            if !m.facet(f).is_boundary() {
                // interior facet of the 2-triangle square is the diagonal
                assert!((g.area - 2f64.sqrt()).abs() < 1e-14);
                let s = 0.5f64.sqrt();
                let n0 = g.normal[0];
                assert!((n0[0].abs() - s).abs() < 1e-14 && (n0[1].abs() - s).abs() < 1e-14);
                found = true;
            }
        }
        assert!(found);
    }

    #[test]
    fn interior_normals_antiparallel() {
        let m = unit_box_mesh(2, 2, &UNIT_SQUARE).unwrap();
        for f in 0..m.n_facets() {
            if m.facet(f).is_boundary() {
                continue;
            }
            let g = m.facet_geometry(f);
            for k in 0..3 {
                assert!((g.normal[0][k] + g.normal[1][k]).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn tet_face_opposite_origin_area() {
        // Unit tetrahedron (0,0,0),(1,0,0),(0,1,0),(0,0,1): face opposite
        // the origin has area √3/2 by the cross-product formula.
        let coords = vec![0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        let cells = vec![0, 1, 2, 3];
        let m = Mesh::from_cells(3, coords, cells, &HashMap::new()).unwrap();
        let mut areas: Vec<f64> = (0..m.n_facets()).map(|f| m.facet_area(f)).collect();
        areas.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((areas[3] - 0.75f64.sqrt()).abs() < 1e-14);
    }

    #[test]
    fn affine_map_inverse() {
        let m = unit_box_mesh(3, 2, &UNIT_CUBE).unwrap();
        for c in 0..m.n_cells() {
            let map = m.affine_map(c);
            assert!(map.det > 0.0);
            for r in 0..3 {
                for s in 0..3 {
                    let mut prod = 0.0;
                    for t in 0..3 {
                        prod += map.jacobian[r][t] * map.inverse_jacobian[t][s];
                    }
                    let expect = if r == s { 1.0 } else { 0.0 };
                    assert!((prod - expect).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn boundary_markers_cover_box_faces() {
        let m = unit_box_mesh(3, 2, &UNIT_CUBE).unwrap();
        let mut per_tag = [0usize; 7];
        for f in m.facets() {
            if let Some(t) = f.marker {
                per_tag[t as usize] += 1;
            }
        }
        // 2·n² boundary triangles per face
        for t in 1..=6 {
            assert_eq!(per_tag[t], 8, "face tag {t}");
        }
    }

    fn write_gmsh(mesh: &Mesh, path: &Path) {
        let mut s = String::from("$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n");
        s.push_str(&format!("{}\n", mesh.n_vertices()));
        for v in 0..mesh.n_vertices() {
            let p = mesh.vertex(v);
            s.push_str(&format!("{} {} {} {}\n", v + 1, p[0], p[1], p[2]));
        }
        s.push_str("$EndNodes\n$Elements\n");
        let ncell = mesh.n_cells();
        let nb: Vec<usize> =
            (0..mesh.n_facets()).filter(|&f| mesh.facet(f).is_boundary()).collect();
        s.push_str(&format!("{}\n", ncell + nb.len()));
        let mut eid = 1;
        let cell_type = if mesh.dim() == 2 { 2 } else { 4 };
        let facet_type = if mesh.dim() == 2 { 1 } else { 2 };
        for c in 0..ncell {
            let vs: Vec<String> =
                mesh.cell_vertices(c).iter().map(|&v| format!("{}", v + 1)).collect();
            s.push_str(&format!("{eid} {cell_type} 2 0 0 {}\n", vs.join(" ")));
            eid += 1;
        }
        for &f in &nb {
            let fac = mesh.facet(f);
            let tag = fac.marker.unwrap_or(0);
            let vs: Vec<String> =
                fac.verts[..mesh.dim()].iter().map(|&v| format!("{}", v + 1)).collect();
            s.push_str(&format!("{eid} {facet_type} 2 {tag} 0 {}\n", vs.join(" ")));
            eid += 1;
        }
        s.push_str("$EndElements\n");
        std::fs::write(path, s).unwrap();
    }

    #[test]
    fn gmsh_roundtrip_minimal() {
        let m = unit_box_mesh(2, 1, &UNIT_SQUARE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("two_tri.msh");
        write_gmsh(&m, &path);
        let r = import_gmsh(&path).unwrap();
        assert_eq!(r.n_cells(), 2);
        assert_eq!(r.n_facets(), 5);
        assert_eq!(r.facets().iter().filter(|f| f.is_boundary()).count(), 4);
        // markers preserved
        for f in r.facets() {
            if f.is_boundary() {
                assert!(f.marker.is_some());
            }
        }
    }

    #[test]
    fn gmsh_rejects_quadrilateral() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("quad.msh");
        let mut file = std::fs::File::create(&path).unwrap();
        write!(
            file,
            "$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n4\n1 0 0 0\n2 1 0 0\n3 1 1 0\n4 0 1 0\n$EndNodes\n$Elements\n1\n1 3 2 0 0 1 2 3 4\n$EndElements\n"
        )
        .unwrap();
        match import_gmsh(&path) {
            Err(Error::UnsupportedElement(3)) => {}
            other => panic!("expected unsupported element, got {other:?}"),
        }
    }

    #[test]
    fn gmsh_rejects_mixed_dimension() {
        // A tet plus a triangle that is not one of its faces.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mixed.msh");
        let mut file = std::fs::File::create(&path).unwrap();
        write!(
            file,
            "$MeshFormat\n2.2 0 8\n$EndMeshFormat\n$Nodes\n5\n1 0 0 0\n2 1 0 0\n3 0 1 0\n4 0 0 1\n5 2 2 2\n$EndNodes\n$Elements\n2\n1 4 2 0 0 1 2 3 4\n2 2 2 0 0 1 2 5\n$EndElements\n"
        )
        .unwrap();
        assert!(matches!(import_gmsh(&path), Err(Error::GmshParse(_))));
    }

    #[test]
    fn gmsh_cube_euler_characteristic() {
        // 48-cell cube: V − E + F − C = 1 for a ball.
        let m = unit_box_mesh(3, 2, &UNIT_CUBE).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cube48.msh");
        write_gmsh(&m, &path);
        let r = import_gmsh(&path).unwrap();
        assert_eq!(r.n_cells(), 48);
        let mut edges: std::collections::HashSet<(u32, u32)> = Default::default();
        for c in 0..r.n_cells() {
            let cv = r.cell_vertices(c);
            for i in 0..4 {
                for j in (i + 1)..4 {
                    let (a, b) = (cv[i].min(cv[j]), cv[i].max(cv[j]));
                    edges.insert((a, b));
                }
            }
        }
        let v = r.n_vertices() as i64;
        let e = edges.len() as i64;
        let f = r.n_facets() as i64;
        let c = r.n_cells() as i64;
        assert_eq!(v - e + f - c, 1);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]

        #[test]
        fn cell_volumes_sum_to_box(dim in 2usize..=3, n in 1usize..=3,
                                   x0 in -2.0f64..0.0, ex in 0.5f64..3.0,
                                   y0 in -2.0f64..0.0, ey in 0.5f64..3.0,
                                   z0 in -2.0f64..0.0, ez in 0.5f64..3.0) {
            let bbox3 = [[x0, x0 + ex], [y0, y0 + ey], [z0, z0 + ez]];
            let m = unit_box_mesh(dim, n, &bbox3[..dim]).unwrap();
            let total: f64 = (0..m.n_cells()).map(|c| m.cell_volume(c)).sum();
            let expect: f64 = (0..dim).map(|d| bbox3[d][1] - bbox3[d][0]).product();
            prop_assert!((total - expect).abs() <= 1e-12 * expect.abs());
        }

        #[test]
        fn facet_normals_close_per_cell(dim in 2usize..=3, n in 1usize..=2) {
            // Σ_facets area·normal = 0 for every cell (divergence theorem on
            // constants).
            let bbox3 = [[0.0, 1.3], [-0.2, 1.0], [0.0, 0.9]];
            let m = unit_box_mesh(dim, n, &bbox3[..dim]).unwrap();
            for c in 0..m.n_cells() {
                let mut acc = [0.0f64; 3];
                for lf in 0..=dim {
                    let f = m.cell_facet(c, lf);
                    let nrm = m.outward_normal(c, lf);
                    let a = m.facet_area(f);
                    for k in 0..3 {
                        acc[k] += a * nrm[k];
                    }
                }
                for k in 0..3 {
                    prop_assert!(acc[k].abs() < 1e-12);
                }
            }
        }

        #[test]
        fn refinement_scales_cell_count(dim in 2usize..=3, n in 1usize..=2) {
            let bbox3 = [[0.0, 1.0], [0.0, 1.0], [0.0, 1.0]];
            let m1 = unit_box_mesh(dim, n, &bbox3[..dim]).unwrap();
            let m2 = unit_box_mesh(dim, 2 * n, &bbox3[..dim]).unwrap();
            prop_assert_eq!(m2.n_cells(), m1.n_cells() << dim);
        }

        #[test]
        fn every_facet_has_one_or_two_cells(n in 1usize..=3) {
            let m = unit_box_mesh(2, n, &UNIT_SQUARE).unwrap();
            for f in m.facets() {
                prop_assert!(f.sides[0].cell != NO_CELL);
                let nsides = 1 + usize::from(f.sides[1].cell != NO_CELL);
                prop_assert!(nsides == 1 || nsides == 2);
                prop_assert_eq!(f.is_boundary(), nsides == 1);
            }
        }
    }
}
