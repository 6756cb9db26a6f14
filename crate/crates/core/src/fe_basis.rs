//! Polynomial bases on reference simplices and facets, plus quadrature.
//!
//! Cell spaces use a monomial basis orthonormalized against the reference
//! mass matrix (scaled so the first function is the constant 1): per-cell
//! dense elimination stays well conditioned in any ℙ_k basis that spans the
//! space, and orthonormality additionally turns cell mass matrices into
//! scaled identities. Facet spaces use equally spaced Lagrange nodes instead:
//! node identity at shared vertices/edges is what lets the continuous trace
//! variant tie facet dofs together.

use crate::mesh::{local_facet_vertices, reference_vertex};
use crate::{Error, Result};
use nalgebra::{DMatrix, DVector};

/// Exact ∫ monomial over the reference simplex:
/// ∫ x^a = a!/(a+1)!, ∫ x^a y^b = a!b!/(a+b+2)!, ∫ x^a y^b z^c = a!b!c!/(a+b+c+3)!.
pub fn reference_monomial_integral(dim: usize, e: &[usize; 3]) -> f64 {
    let ln_fact = |n: usize| -> f64 {
        (2..=n).map(|i| (i as f64).ln()).sum()
    };
    let top: f64 = e[..dim].iter().map(|&a| ln_fact(a)).sum();
    let total: usize = e[..dim].iter().sum();
    (top - ln_fact(total + dim)).exp()
}

/// Monomial exponent tuples of total degree ≤ k, ordered by total degree then
/// lexicographically — the constant comes first.
fn monomial_exponents(dim: usize, k: usize) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for total in 0..=k {
        match dim {
            1 => out.push([total, 0, 0]),
            2 => {
                for a in (0..=total).rev() {
                    out.push([a, total - a, 0]);
                }
            }
            3 => {
                for a in (0..=total).rev() {
                    for b in (0..=(total - a)).rev() {
                        out.push([a, b, total - a - b]);
                    }
                }
            }
            _ => unreachable!(),
        }
    }
    out
}

fn eval_monomials(exps: &[[usize; 3]], dim: usize, p: &[f64], out: &mut DVector<f64>) {
    for (i, e) in exps.iter().enumerate() {
        let mut v = 1.0;
        for d in 0..dim {
            v *= p[d].powi(e[d] as i32);
        }
        out[i] = v;
    }
}

fn eval_monomial_gradients(exps: &[[usize; 3]], dim: usize, p: &[f64], out: &mut DMatrix<f64>) {
    for (i, e) in exps.iter().enumerate() {
        for d in 0..dim {
            if e[d] == 0 {
                out[(i, d)] = 0.0;
                continue;
            }
            let mut v = e[d] as f64 * p[d].powi(e[d] as i32 - 1);
            for dd in 0..dim {
                if dd != d {
                    v *= p[dd].powi(e[dd] as i32);
                }
            }
            out[(i, d)] = v;
        }
    }
}

/// Basis of ℙ_k on the reference simplex, orthonormal in the measure-scaled
/// inner product (f,g) ↦ |K̂|⁻¹ ∫_K̂ fg. The first basis function is the
/// constant 1.
#[derive(Debug, Clone)]
pub struct BasisSet {
    pub dim: usize,
    pub degree: usize,
    exps: Vec<[usize; 3]>,
    /// φ_i = Σ_j coeff[(i,j)] · monomial_j
    coeff: DMatrix<f64>,
}

/// C(k + dim, dim), the dimension of ℙ_k on a dim-simplex.
pub fn space_dim(dim: usize, k: usize) -> usize {
    let mut num = 1usize;
    let mut den = 1usize;
    for i in 1..=dim {
        num *= k + i;
        den *= i;
    }
    num / den
}

/// Orthonormalized monomial basis of ℙ_k on the reference dim-simplex.
pub fn simplex_basis(dim: usize, k: usize) -> BasisSet {
    assert!((1..=3).contains(&dim), "dim must be 1, 2, or 3");
    let exps = monomial_exponents(dim, k);
    let n = exps.len();
    debug_assert_eq!(n, space_dim(dim, k));
    let measure = crate::mesh::reference_measure(dim);
    let mut gram = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            let e = [
                exps[i][0] + exps[j][0],
                exps[i][1] + exps[j][1],
                exps[i][2] + exps[j][2],
            ];
            gram[(i, j)] = reference_monomial_integral(dim, &e) / measure;
        }
    }
    // G = L Lᵀ, coefficients = L⁻¹: rows orthonormalize degree by degree.
    let chol = gram.cholesky().expect("reference Gram matrix is SPD");
    let l = chol.l();
    let coeff = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .expect("triangular solve");
    BasisSet { dim, degree: k, exps, coeff }
}

impl BasisSet {
    pub fn size(&self) -> usize {
        self.exps.len()
    }

    /// Basis values at a reference point.
    pub fn values(&self, p: &[f64]) -> DVector<f64> {
        let mut mono = DVector::zeros(self.size());
        eval_monomials(&self.exps, self.dim, p, &mut mono);
        &self.coeff * mono
    }

    /// Reference gradients at a point: size × dim.
    pub fn gradients(&self, p: &[f64]) -> DMatrix<f64> {
        let mut mg = DMatrix::zeros(self.size(), self.dim);
        eval_monomial_gradients(&self.exps, self.dim, p, &mut mg);
        &self.coeff * mg
    }
}

/// Where a Lagrange node sits on the reference simplex, for sharing nodes
/// between facets: a vertex, the interior of an edge (with its index counted
/// from the lower-numbered vertex), or the element interior.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NodeEntity {
    Vertex(usize),
    /// (lower local vertex, higher local vertex, index 1..k−1 from the lower)
    Edge(usize, usize, usize),
    Interior(usize),
}

/// Nodal (equally spaced) Lagrange basis of ℙ_k on the reference simplex of
/// dimension 1 or 2 — the facet spaces.
#[derive(Debug, Clone)]
pub struct LagrangeBasis {
    pub dim: usize,
    pub degree: usize,
    /// Node reference coordinates, dim-strided.
    pub nodes: Vec<f64>,
    pub entities: Vec<NodeEntity>,
    exps: Vec<[usize; 3]>,
    coeff: DMatrix<f64>,
}

pub fn lagrange_basis(dim: usize, k: usize) -> LagrangeBasis {
    assert!((1..=2).contains(&dim), "facet dim must be 1 or 2");
    assert!(k >= 1);
    let exps = monomial_exponents(dim, k);
    let n = exps.len();
    let mut nodes = Vec::with_capacity(n * dim);
    let mut entities = Vec::with_capacity(n);
    let kf = k as f64;
    let mut interior_count = 0;
    if dim == 1 {
        // order: multi-index a (weight of vertex 1) from 0..=k
        for a in 0..=k {
            nodes.push(a as f64 / kf);
            entities.push(match a {
                0 => NodeEntity::Vertex(0),
                x if x == k => NodeEntity::Vertex(1),
                x => NodeEntity::Edge(0, 1, x),
            });
        }
    } else {
        // lattice (a, b) = weights of vertices 1, 2; vertex 0 gets k − a − b
        for b in 0..=k {
            for a in 0..=(k - b) {
                nodes.push(a as f64 / kf);
                nodes.push(b as f64 / kf);
                let c = k - a - b; // weight of vertex 0
                let ent = match (c == 0, a == 0, b == 0) {
                    (false, true, true) => NodeEntity::Vertex(0),
                    (true, false, true) => NodeEntity::Vertex(1),
                    (true, true, false) => NodeEntity::Vertex(2),
                    // edges carry the two positive-weight vertices; the index
                    // counts from the lower-numbered one
                    (false, false, true) => NodeEntity::Edge(0, 1, a),
                    (false, true, false) => NodeEntity::Edge(0, 2, b),
                    (true, false, false) => NodeEntity::Edge(1, 2, b),
                    _ => {
                        interior_count += 1;
                        NodeEntity::Interior(interior_count - 1)
                    }
                };
                entities.push(ent);
            }
        }
    }
    debug_assert_eq!(entities.len(), n);
    // Vandermonde: V[(l, j)] = monomial_j(node_l); φ = V⁻ᵀ · monomials.
    let mut v = DMatrix::zeros(n, n);
    let mut row = DVector::zeros(n);
    for l in 0..n {
        eval_monomials(&exps, dim, &nodes[l * dim..(l + 1) * dim], &mut row);
        for j in 0..n {
            v[(l, j)] = row[j];
        }
    }
    let coeff = v
        .transpose()
        .lu()
        .solve(&DMatrix::identity(n, n))
        .expect("Lagrange Vandermonde is invertible");
    LagrangeBasis { dim, degree: k, nodes, entities, exps, coeff }
}

impl LagrangeBasis {
    pub fn size(&self) -> usize {
        self.exps.len()
    }

    pub fn values(&self, p: &[f64]) -> DVector<f64> {
        let mut mono = DVector::zeros(self.size());
        eval_monomials(&self.exps, self.dim, p, &mut mono);
        &self.coeff * mono
    }

    pub fn node(&self, i: usize) -> &[f64] {
        &self.nodes[i * self.dim..(i + 1) * self.dim]
    }
}

/// Quadrature on the reference simplex.
#[derive(Debug, Clone)]
pub struct QuadratureRule {
    pub dim: usize,
    /// dim-strided reference coordinates.
    pub points: Vec<f64>,
    pub weights: Vec<f64>,
    pub exactness: usize,
}

impl QuadratureRule {
    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, q: usize) -> &[f64] {
        &self.points[q * self.dim..(q + 1) * self.dim]
    }
}

pub const MAX_EXACTNESS: usize = 30;

/// Gauss–Legendre nodes/weights on [0, 1], exact through degree 2n−1.
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut x = vec![0.0; n];
    let mut w = vec![0.0; n];
    for i in 0..n {
        // Chebyshev initial guess, then Newton on P_n.
        let mut t = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            // evaluate P_n(t) and P_n'(t) by recurrence
            let (mut p0, mut p1) = (1.0, t);
            for j in 2..=n {
                let p2 = ((2 * j - 1) as f64 * t * p1 - (j - 1) as f64 * p0) / j as f64;
                p0 = p1;
                p1 = p2;
            }
            let pn = if n == 0 { 1.0 } else if n == 1 { t } else { p1 };
            let dpn = if n == 1 {
                1.0
            } else {
                n as f64 * (t * p1 - p0) / (t * t - 1.0)
            };
            let dt = pn / dpn;
            t -= dt;
            if dt.abs() < 1e-15 {
                break;
            }
        }
        // recompute derivative at the converged node for the weight
        let (mut p0, mut p1) = (1.0, t);
        for j in 2..=n {
            let p2 = ((2 * j - 1) as f64 * t * p1 - (j - 1) as f64 * p0) / j as f64;
            p0 = p1;
            p1 = p2;
        }
        let dpn = if n == 1 { 1.0 } else { n as f64 * (t * p1 - p0) / (t * t - 1.0) };
        x[n - 1 - i] = 0.5 * (t + 1.0);
        w[n - 1 - i] = 1.0 / ((1.0 - t * t) * dpn * dpn);
    }
    (x, w)
}

/// A rule integrating all polynomials of total degree ≤ `exactness` exactly:
/// Gauss–Legendre on [0,1]; a collapsed (Duffy) tensor rule on the triangle
/// and tetrahedron.
pub fn quadrature(dim: usize, exactness: usize) -> Result<QuadratureRule> {
    if exactness > MAX_EXACTNESS {
        return Err(Error::QuadratureDegree { requested: exactness, max: MAX_EXACTNESS });
    }
    assert!((1..=3).contains(&dim));
    let need = |deg: usize| deg / 2 + 1; // GL n points: exact through 2n−1
    let rule = match dim {
        1 => {
            let (x, w) = gauss_legendre(need(exactness));
            QuadratureRule { dim, points: x, weights: w, exactness }
        }
        2 => {
            if exactness <= 1 {
                // centroid rule
                QuadratureRule {
                    dim,
                    points: vec![1.0 / 3.0, 1.0 / 3.0],
                    weights: vec![0.5],
                    exactness,
                }
            } else {
                // x = ξ, y = η(1−ξ); dx dy = (1−ξ) dξ dη. Total degree p in
                // (x, y) gives ξ-degree ≤ p+1 (with the Jacobian) and
                // η-degree ≤ p.
                let (xs, ws) = gauss_legendre(need(exactness + 1));
                let (ys, wy) = gauss_legendre(need(exactness));
                let mut points = Vec::new();
                let mut weights = Vec::new();
                for (i, &xi) in xs.iter().enumerate() {
                    for (j, &eta) in ys.iter().enumerate() {
                        points.push(xi);
                        points.push(eta * (1.0 - xi));
                        weights.push(ws[i] * wy[j] * (1.0 - xi));
                    }
                }
                QuadratureRule { dim, points, weights, exactness }
            }
        }
        _ => {
            if exactness <= 1 {
                QuadratureRule {
                    dim,
                    points: vec![0.25, 0.25, 0.25],
                    weights: vec![1.0 / 6.0],
                    exactness,
                }
            } else {
                // x = u, y = v(1−u), z = w(1−u)(1−v);
                // dV = (1−u)²(1−v) du dv dw.
                let (us, wu) = gauss_legendre(need(exactness + 2));
                let (vs, wv) = gauss_legendre(need(exactness + 1));
                let (zs, wz) = gauss_legendre(need(exactness));
                let mut points = Vec::new();
                let mut weights = Vec::new();
                for (i, &u) in us.iter().enumerate() {
                    for (j, &v) in vs.iter().enumerate() {
                        for (l, &w) in zs.iter().enumerate() {
                            points.push(u);
                            points.push(v * (1.0 - u));
                            points.push(w * (1.0 - u) * (1.0 - v));
                            weights.push(
                                wu[i] * wv[j] * wz[l] * (1.0 - u) * (1.0 - u) * (1.0 - v),
                            );
                        }
                    }
                }
                QuadratureRule { dim, points, weights, exactness }
            }
        }
    };
    Ok(rule)
}

/// Maps facet reference points onto the cell reference boundary, with facet
/// vertex j landing on the j-th vertex of the cell's canonical local facet
/// vertex list.
pub fn trace_points(cell_dim: usize, local_facet: usize, facet_points: &[f64]) -> Vec<f64> {
    trace_points_permuted(cell_dim, local_facet, &[0, 1, 2], facet_points)
}

/// Like [`trace_points`], but facet vertex j lands on canonical local facet
/// vertex `perm[j]` — the form needed to evaluate cell traces at points of a
/// facet parametrized by its sorted global vertex tuple.
pub fn trace_points_permuted(
    cell_dim: usize,
    local_facet: usize,
    perm: &[u8; 3],
    facet_points: &[f64],
) -> Vec<f64> {
    let fdim = cell_dim - 1;
    let lverts = local_facet_vertices(cell_dim, local_facet);
    let npts = facet_points.len() / fdim;
    let mut out = vec![0.0; npts * cell_dim];
    for p in 0..npts
    {
        let fp = &facet_points[p * fdim..(p + 1) * fdim];
        // barycentric weights on the facet reference simplex
        let mut lambda = [0.0f64; 3];
        lambda[0] = 1.0 - fp.iter().sum::<f64>();
        lambda[1..=fdim].copy_from_slice(fp);
        let dst = &mut out[p * cell_dim..(p + 1) * cell_dim];
        for j in 0..=fdim {
            let cell_vertex = lverts[perm[j] as usize];
            let rv = reference_vertex(cell_vertex);
            for d in 0..cell_dim {
                dst[d] += lambda[j] * rv[d];
            }
        }
    }
    out
}
