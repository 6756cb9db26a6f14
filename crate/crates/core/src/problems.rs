//! Experiment drivers built on the assembly → condensation → MINRES pipeline:
//! manufactured-solution convergence runs, a parameter-robustness sweep over
//! the physically interesting corners of (κ, α, c₀, λ) space, a poroelastic
//! footing benchmark with backward-Euler time stepping, and dense spectrum
//! probes of the preconditioned trace operator on small meshes.
//!
//! Manufactured data is derived from the exact displacement and pressure by
//! second-order automatic differentiation ([`crate::jet`]), so a case is fully
//! specified by two closures and the model parameters. The associated fields
//! follow the conventions of the discrete form: total pressure
//! p_T = αp − λ∇·u, scaled flux z = −κ∇p, momentum source
//! f = −∇·(με(u)) + ∇p_T, and mass source g = c₀p + α∇·u + ∇·z.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};

use crate::assembly::{
    assemble_biot, assemble_biot_with, assemble_preconditioner, assemble_timestep_rhs,
    ModelParams, PcVariant, TractionBc,
};
use crate::condense::{condense, reduce_preconditioner};
use crate::fe_basis::quadrature;
use crate::jet::Jet;
use crate::krylov::minres;
use crate::mesh::{reference_measure, reference_vertex, unit_box_mesh, Mesh};
use crate::spaces::{build_spaces, build_spaces_with, EssentialBc, Field, Spaces, Variant};
use crate::{Error, Result, SolveReport};

// ---------------------------------------------------------------------------
// Manufactured solutions.

/// Exact solution pair (u, p) given as closures over second-order jets; all
/// derived fields and source data come out of the same two definitions.
pub struct ManufacturedCase {
    pub dim: usize,
    u: Box<dyn Fn(&[Jet; 3]) -> [Jet; 3]>,
    p: Box<dyn Fn(&[Jet; 3]) -> Jet>,
}

impl ManufacturedCase {
    /// Smooth trigonometric solution; nonzero on the whole unit box and in no
    /// discrete space, so it exercises every coupling and converges at the
    /// expected rates.
    pub fn sine(dim: usize) -> Self {
        assert!(dim == 2 || dim == 3, "manufactured cases are 2d/3d");
        if dim == 2 {
            ManufacturedCase {
                dim,
                u: Box::new(|x| {
                    let sx = x[0].scale(PI).sin();
                    let sy = x[1].scale(PI).sin();
                    let cy = x[1].scale(PI).cos();
                    [sx * sy, sx * cy, Jet::constant(0.0)]
                }),
                p: Box::new(|x| (x[0] - x[1]).scale(PI).sin()),
            }
        } else {
            ManufacturedCase {
                dim,
                u: Box::new(|x| {
                    let sx = x[0].scale(PI).sin();
                    let sy = x[1].scale(PI).sin();
                    let cy = x[1].scale(PI).cos();
                    let sz = x[2].scale(PI).sin();
                    let cz = x[2].scale(PI).cos();
                    [sx * sy * sz, sx * cy * sz, sx * cy * cz]
                }),
                p: Box::new(|x| (x[0] - x[1] - x[2]).scale(PI).sin()),
            }
        }
    }

    /// Quadratic displacement with linear pressure: contained in the discrete
    /// spaces for every k ≥ 2, so the method must reproduce it to solver
    /// accuracy on any mesh.
    pub fn polynomial(dim: usize) -> Self {
        assert!(dim == 2 || dim == 3, "manufactured cases are 2d/3d");
        let one = Jet::constant(1.0);
        if dim == 2 {
            ManufacturedCase {
                dim,
                u: Box::new(move |x| {
                    let (x0, x1) = (x[0], x[1]);
                    [
                        x0.powi(2) + (x0 * x1).scale(0.5) - x1.powi(2) + x0.scale(2.0) - x1
                            + one,
                        -x0.powi(2) + x0 * x1 + x1.powi(2).scale(2.0) - x0 + x1.scale(3.0)
                            - one.scale(2.0),
                        Jet::constant(0.0),
                    ]
                }),
                p: Box::new(move |x| x[0].scale(2.0) - x[1].scale(3.0) + one),
            }
        } else {
            ManufacturedCase {
                dim,
                u: Box::new(move |x| {
                    let (x0, x1, x2) = (x[0], x[1], x[2]);
                    [
                        x0.powi(2) + x1 * x2 + x0.scale(2.0) - x1 + one,
                        x1.powi(2) + x0 * x2 + x0 - x2.scale(3.0) + one.scale(2.0),
                        x2.powi(2) + x0 * x1 - x1.scale(2.0) + x2 - one,
                    ]
                }),
                p: Box::new(move |x| x[0].scale(2.0) - x[1].scale(3.0) + x[2] + one),
            }
        }
    }

    fn jets(&self, x: &[f64; 3]) -> ([Jet; 3], Jet) {
        let s = Jet::seed(&x[..self.dim]);
        ((self.u)(&s), (self.p)(&s))
    }

    pub fn u_at(&self, x: &[f64; 3]) -> [f64; 3] {
        let (u, _) = self.jets(x);
        [u[0].v, u[1].v, u[2].v]
    }

    pub fn p_at(&self, x: &[f64; 3]) -> f64 {
        self.jets(x).1.v
    }

    pub fn div_u_at(&self, x: &[f64; 3]) -> f64 {
        let (u, _) = self.jets(x);
        (0..self.dim).map(|i| u[i].g[i]).sum()
    }

    /// Total pressure p_T = αp − λ∇·u.
    pub fn p_t_at(&self, params: &ModelParams, x: &[f64; 3]) -> f64 {
        let (u, p) = self.jets(x);
        let div: f64 = (0..self.dim).map(|i| u[i].g[i]).sum();
        params.alpha * p.v - params.lambda * div
    }

    /// Scaled Darcy flux z = −κ∇p.
    pub fn z_at(&self, params: &ModelParams, x: &[f64; 3]) -> [f64; 3] {
        let (_, p) = self.jets(x);
        let mut z = [0.0; 3];
        for i in 0..self.dim {
            z[i] = -params.kappa * p.g[i];
        }
        z
    }

    /// Momentum source f = −∇·(με(u)) + ∇p_T.
    pub fn f_at(&self, params: &ModelParams, x: &[f64; 3]) -> [f64; 3] {
        let (u, p) = self.jets(x);
        let d = self.dim;
        let mut f = [0.0; 3];
        for i in 0..d {
            // (∇·ε(u))_i = ½(Σ_j ∂_j∂_i u_j + Δu_i)
            let mut div_eps = u[i].laplacian(d);
            let mut d_div = 0.0; // ∂_i (∇·u)
            for j in 0..d {
                div_eps += u[j].h[j][i];
                d_div += u[j].h[i][j];
            }
            f[i] = -0.5 * params.mu * div_eps + params.alpha * p.g[i] - params.lambda * d_div;
        }
        f
    }

    /// Mass source g = c₀p + α∇·u − κΔp.
    pub fn g_at(&self, params: &ModelParams, x: &[f64; 3]) -> f64 {
        let (u, p) = self.jets(x);
        let d = self.dim;
        let div: f64 = (0..d).map(|i| u[i].g[i]).sum();
        params.c0 * p.v + params.alpha * div - params.kappa * p.laplacian(d)
    }
}

// ---------------------------------------------------------------------------
// Error norms and nodal output.

#[derive(Debug, Clone, Copy)]
pub struct FieldErrors {
    pub u_l2: f64,
    pub p_l2: f64,
}

/// Offsets of the cell-field blocks (u, p_T, z, p) in the monolithic vector
/// produced by back-substitution.
fn cell_offsets(spaces: &Spaces) -> [usize; 4] {
    let nu = spaces.map(Field::U).n_free;
    let npt = spaces.map(Field::PT).n_free;
    let nz = spaces.map(Field::Z).n_free;
    [0, nu, nu + npt, nu + npt + nz]
}

fn monolithic_len(spaces: &Spaces) -> usize {
    Field::ALL.iter().map(|&f| spaces.map(f).n_free).sum()
}

/// L² errors of the cell displacement and pressure against an exact solution,
/// integrated with a quadrature two orders beyond what the stiffness terms
/// need so the error norm itself is not quadrature-limited.
pub fn compute_errors(
    mesh: &Mesh,
    spaces: &Spaces,
    x: &[f64],
    case: &ManufacturedCase,
) -> Result<FieldErrors> {
    if x.len() != monolithic_len(spaces) {
        return Err(Error::DimensionMismatch(format!(
            "solution vector has {} entries, spaces have {}",
            x.len(),
            monolithic_len(spaces)
        )));
    }
    let dim = mesh.dim();
    let quad = quadrature(dim, 2 * spaces.k + 4)?;
    let nk = spaces.cell_k.size();
    let nm = spaces.cell_km1.size();
    let off = cell_offsets(spaces);
    let phi_k: Vec<DVector<f64>> =
        (0..quad.len()).map(|q| spaces.cell_k.values(quad.point(q))).collect();
    let phi_m: Vec<DVector<f64>> =
        (0..quad.len()).map(|q| spaces.cell_km1.values(quad.point(q))).collect();
    let meas = reference_measure(dim);

    let mut eu = 0.0;
    let mut ep = 0.0;
    for c in 0..mesh.n_cells() {
        let jac = mesh.affine_map(c);
        let detj = mesh.cell_volume(c) / meas;
        let uc = &x[off[0] + c * dim * nk..off[0] + (c + 1) * dim * nk];
        let pc = &x[off[3] + c * nm..off[3] + (c + 1) * nm];
        for (q, &wq) in quad.weights.iter().enumerate() {
            let xq = jac.apply(quad.point(q));
            let ue = case.u_at(&xq);
            let pe = case.p_at(&xq);
            let w = wq * detj;
            for comp in 0..dim {
                let mut uh = 0.0;
                for j in 0..nk {
                    uh += uc[comp * nk + j] * phi_k[q][j];
                }
                eu += w * (uh - ue[comp]) * (uh - ue[comp]);
            }
            let mut ph = 0.0;
            for j in 0..nm {
                ph += pc[j] * phi_m[q][j];
            }
            ep += w * (ph - pe) * (ph - pe);
        }
    }
    Ok(FieldErrors { u_l2: eu.sqrt(), p_l2: ep.sqrt() })
}

/// Vertex-averaged values of (u, p, p_T) for P₁ visualization output. The
/// cell fields are discontinuous, so each vertex takes the mean over its
/// adjacent cells; `u` is padded to three components.
pub struct VertexFields {
    pub u: Vec<f64>,
    pub p: Vec<f64>,
    pub p_t: Vec<f64>,
}

pub fn vertex_fields(mesh: &Mesh, spaces: &Spaces, x: &[f64]) -> VertexFields {
    assert_eq!(x.len(), monolithic_len(spaces), "solution vector length");
    let dim = mesh.dim();
    let nk = spaces.cell_k.size();
    let nm = spaces.cell_km1.size();
    let off = cell_offsets(spaces);
    let nv = mesh.n_vertices();
    let mut u = vec![0.0; 3 * nv];
    let mut p = vec![0.0; nv];
    let mut pt = vec![0.0; nv];
    let mut count = vec![0u32; nv];

    let verts_k: Vec<DVector<f64>> =
        (0..=dim).map(|i| spaces.cell_k.values(&reference_vertex(i)[..dim])).collect();
    let verts_m: Vec<DVector<f64>> =
        (0..=dim).map(|i| spaces.cell_km1.values(&reference_vertex(i)[..dim])).collect();

    for c in 0..mesh.n_cells() {
        let uc = &x[off[0] + c * dim * nk..off[0] + (c + 1) * dim * nk];
        let ptc = &x[off[1] + c * nm..off[1] + (c + 1) * nm];
        let pc = &x[off[3] + c * nm..off[3] + (c + 1) * nm];
        for (lv, &gv) in mesh.cell_vertices(c).iter().enumerate() {
            let gv = gv as usize;
            count[gv] += 1;
            for comp in 0..dim {
                let mut val = 0.0;
                for j in 0..nk {
                    val += uc[comp * nk + j] * verts_k[lv][j];
                }
                u[3 * gv + comp] += val;
            }
            for j in 0..nm {
                p[gv] += pc[j] * verts_m[lv][j];
                pt[gv] += ptc[j] * verts_m[lv][j];
            }
        }
    }
    for v in 0..nv {
        let cnt = f64::from(count[v].max(1));
        for d in 0..3 {
            u[3 * v + d] /= cnt;
        }
        p[v] /= cnt;
        pt[v] /= cnt;
    }
    VertexFields { u, p, p_t: pt }
}

// ---------------------------------------------------------------------------
// Manufactured-solution driver.

pub struct ManufacturedRun {
    pub mesh: Mesh,
    pub spaces: Spaces,
    /// Monolithic solution (cell fields, then traces).
    pub x: Vec<f64>,
    pub report: SolveReport,
    pub errors: FieldErrors,
}

/// Solves one manufactured case on an n×…×n unit-box mesh with essential
/// conditions for u and p on the whole boundary, taken from the exact
/// solution. Returns the MINRES report and the L² errors.
pub fn run_manufactured(
    case: &ManufacturedCase,
    n: usize,
    params: &ModelParams,
    variant: Variant,
    pc: PcVariant,
    tol: f64,
) -> Result<ManufacturedRun> {
    if params.dim != case.dim {
        return Err(Error::DimensionMismatch(format!(
            "case dim {} vs params dim {}",
            case.dim, params.dim
        )));
    }
    let bbox = [[0.0, 1.0]; 3];
    let mesh = unit_box_mesh(case.dim, n, &bbox[..case.dim])?;
    let mut spaces = build_spaces(&mesh, params.k, variant)?;
    spaces.set_dirichlet(&mesh, Field::UBar, None, &|x| case.u_at(x))?;
    spaces.set_dirichlet(&mesh, Field::PBar, None, &|x| [case.p_at(x), 0.0, 0.0])?;

    let f = |x: &[f64; 3]| case.f_at(params, x);
    let g = |x: &[f64; 3]| case.g_at(params, x);
    let sys = assemble_biot(&mesh, &spaces, params, &f, &g)?;
    let cond = condense(&sys)?;
    let blocks = assemble_preconditioner(&mesh, &spaces, params, pc)?;
    let red = reduce_preconditioner(&blocks)?;
    let (xbar, report) = minres(&cond.s_a, &red, &cond.rhs, tol, None)?;
    let x = cond.back_substitute(&xbar)?;
    let errors = compute_errors(&mesh, &spaces, &x, case)?;
    Ok(ManufacturedRun { mesh, spaces, x, report, errors })
}

// ---------------------------------------------------------------------------
// Parameter sweep.

/// The 54-point parameter grid: κ ∈ {1, 10⁻⁴, 10⁻⁸} × α ∈ {1, 10⁻⁴} ×
/// c₀ ∈ {1, 10⁻⁴, 0} × λ ∈ {1, 10⁴, 10⁸}, in that loop order (κ slowest,
/// λ fastest). Covers the stiff corners: incompressible, impermeable,
/// vanishing storage, and weak coupling.
pub fn param_grid() -> Vec<[f64; 4]> {
    let kappas = [1.0, 1e-4, 1e-8];
    let alphas = [1.0, 1e-4];
    let c0s = [1.0, 1e-4, 0.0];
    let lambdas = [1.0, 1e4, 1e8];
    let mut out = Vec::with_capacity(54);
    for &kappa in &kappas {
        for &alpha in &alphas {
            for &c0 in &c0s {
                for &lambda in &lambdas {
                    out.push([kappa, alpha, c0, lambda]);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct SweepPoint {
    pub kappa: f64,
    pub alpha: f64,
    pub c0: f64,
    pub lambda: f64,
    pub iterations: usize,
    pub converged: bool,
    pub final_rel_residual: f64,
}

/// Iteration counts of preconditioned MINRES across a parameter grid on one
/// fixed mesh, with μ = ½ and manufactured trigonometric data. The mesh and
/// boundary values are parameter-independent and built once; the operator,
/// its condensation, and the preconditioner are rebuilt per point.
pub fn run_param_sweep(
    dim: usize,
    n: usize,
    k: usize,
    variant: Variant,
    pc: PcVariant,
    tol: f64,
    max_iter: Option<usize>,
) -> Result<Vec<SweepPoint>> {
    run_param_sweep_on(dim, n, k, variant, pc, tol, max_iter, &param_grid(), None)
}

/// As [`run_param_sweep`], restricted to the given grid points, with an
/// optional penalty override (None keeps the 2dk² default).
pub fn run_param_sweep_on(
    dim: usize,
    n: usize,
    k: usize,
    variant: Variant,
    pc: PcVariant,
    tol: f64,
    max_iter: Option<usize>,
    grid: &[[f64; 4]],
    eta: Option<f64>,
) -> Result<Vec<SweepPoint>> {
    let case = ManufacturedCase::sine(dim);
    let bbox = [[0.0, 1.0]; 3];
    let mesh = unit_box_mesh(dim, n, &bbox[..dim])?;
    let mut spaces = build_spaces(&mesh, k, variant)?;
    spaces.set_dirichlet(&mesh, Field::UBar, None, &|x| case.u_at(x))?;
    spaces.set_dirichlet(&mesh, Field::PBar, None, &|x| [case.p_at(x), 0.0, 0.0])?;

    let mut out = Vec::with_capacity(grid.len());
    for &[kappa, alpha, c0, lambda] in grid {
        let mut params = ModelParams::new(dim, k, 0.5, lambda, alpha, c0, kappa);
        if let Some(e) = eta {
            params.eta = e;
        }
        let f = |x: &[f64; 3]| case.f_at(&params, x);
        let g = |x: &[f64; 3]| case.g_at(&params, x);
        let sys = assemble_biot(&mesh, &spaces, &params, &f, &g)?;
        let cond = condense(&sys)?;
        let blocks = assemble_preconditioner(&mesh, &spaces, &params, pc)?;
        let red = reduce_preconditioner(&blocks)?;
        let point = match minres(&cond.s_a, &red, &cond.rhs, tol, max_iter) {
            Ok((_, r)) => SweepPoint {
                kappa,
                alpha,
                c0,
                lambda,
                iterations: r.iterations,
                converged: true,
                final_rel_residual: r.final_rel_residual,
            },
            Err(Error::NoConvergence(iterations, res)) => SweepPoint {
                kappa,
                alpha,
                c0,
                lambda,
                iterations,
                converged: false,
                final_rel_residual: res,
            },
            Err(e) => return Err(e),
        };
        out.push(point);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Footing benchmark.

/// Boundary marker of the loaded strip on the top face.
pub const FOOTING_LOAD: i32 = 11;
/// Boundary marker of the traction-free remainder of the top face.
pub const FOOTING_FREE: i32 = 12;
/// Boundary marker of the clamped sides and bottom.
pub const FOOTING_CLAMPED: i32 = 13;

/// Consolidation under a strip load: a uniform downward traction σ₀ acts on
/// the central part of the top face, the rest of the top is traction-free,
/// the remaining boundary is clamped, and the whole boundary drains (p = 0).
/// Initial displacement and pressure vanish; backward Euler marches the
/// time-discrete system with a fixed step.
///
/// Defaults follow a standard benchmark configuration per dimension; all
/// fields are public so individual studies can override them. The loaded
/// strip is cut exactly along grid lines when `n` is divisible by 3 (2d)
/// or 4 (3d); otherwise facets are classified by centroid.
pub struct FootingCase {
    pub dim: usize,
    /// Cells per box edge.
    pub n: usize,
    pub k: usize,
    /// Time step τ; the system matrix uses κ = τκ̃.
    pub tau: f64,
    pub t_final: f64,
    /// Cap on the number of steps actually taken: iteration statistics
    /// stabilize after a few steps, while small τ would otherwise demand
    /// hundreds of thousands.
    pub max_steps: usize,
    pub sigma0: f64,
    pub young: f64,
    pub poisson: f64,
    pub alpha: f64,
    pub c0: f64,
    pub kappa_tilde: f64,
}

impl FootingCase {
    pub fn new(dim: usize, n: usize, tau: f64) -> Self {
        match dim {
            2 => FootingCase {
                dim,
                n,
                k: 2,
                tau,
                t_final: 50.0,
                max_steps: 5,
                sigma0: 1e4,
                young: 3e4,
                poisson: 0.4995,
                alpha: 0.1,
                c0: 1e-3,
                kappa_tilde: 1e-4,
            },
            3 => FootingCase {
                dim,
                n,
                k: 2,
                tau,
                t_final: 1.0,
                max_steps: 5,
                sigma0: 0.1,
                young: 3e4,
                poisson: 0.45,
                alpha: 0.5,
                c0: 0.5,
                kappa_tilde: 1e-7,
            },
            _ => panic!("footing case is defined for dim 2 and 3"),
        }
    }

    /// Lamé constants (λ, μ̃) from Young's modulus and Poisson ratio
    /// (plane strain in 2d).
    pub fn lame(&self) -> (f64, f64) {
        let e = self.young;
        let nu = self.poisson;
        (e * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)), e / (2.0 * (1.0 + nu)))
    }

    pub fn params(&self) -> ModelParams {
        let (lambda, mu_tilde) = self.lame();
        let mut p = ModelParams::new(
            self.dim,
            self.k,
            2.0 * mu_tilde,
            lambda,
            self.alpha,
            self.c0,
            self.tau * self.kappa_tilde,
        );
        // On right-angled simplices the default penalty 2dk² sits exactly at
        // the element PSD threshold of d_h; the traction boundary here leaves
        // those threshold modes unconstrained, so use 3dk² for a strict margin.
        p.eta = 3.0 * (self.dim * self.k * self.k) as f64;
        p
    }

    /// Number of backward-Euler steps to run: ⌈T/τ⌉ capped at `max_steps`.
    pub fn steps(&self) -> usize {
        ((self.t_final / self.tau).ceil() as usize).clamp(1, self.max_steps)
    }

    /// Structured mesh of the footing domain with the boundary split into
    /// loaded strip / free top / clamped remainder.
    pub fn build_mesh(&self) -> Result<Mesh> {
        let (mut mesh, top, cut) = match self.dim {
            2 => (unit_box_mesh(2, self.n, &[[-50.0, 50.0], [0.0, 75.0]])?, 4, 50.0 / 3.0),
            3 => (
                unit_box_mesh(3, self.n, &[[-32.0, 32.0], [-32.0, 32.0], [0.0, 64.0]])?,
                6,
                16.0,
            ),
            _ => unreachable!("constructor rejects other dims"),
        };
        let dim = self.dim;
        mesh.remark_boundary(&|c, m| {
            if m != Some(top) {
                return Some(FOOTING_CLAMPED);
            }
            let under_load = (0..dim - 1).all(|d| c[d].abs() <= cut + 1e-9 * cut);
            Some(if under_load { FOOTING_LOAD } else { FOOTING_FREE })
        });
        Ok(mesh)
    }
}

pub struct FootingRun {
    pub mesh: Mesh,
    pub spaces: Spaces,
    /// Monolithic state after the last step.
    pub x: Vec<f64>,
    pub reports: Vec<SolveReport>,
    pub mean_iterations: f64,
    pub max_iterations: usize,
}

/// Marches the footing benchmark and reports per-step solver statistics.
/// The operator, its condensation, and the preconditioner are built once;
/// each step only refreshes the pressure right-hand side with the memory
/// terms of the previous state and re-eliminates the cell unknowns.
pub fn run_footing(
    case: &FootingCase,
    variant: Variant,
    pc: PcVariant,
    tol: f64,
) -> Result<FootingRun> {
    let params = case.params();
    let mesh = case.build_mesh()?;
    let bc = EssentialBc { u_markers: Some(vec![FOOTING_CLAMPED]), p_markers: None };
    let spaces = build_spaces_with(&mesh, case.k, variant, &bc)?;
    // Clamped and drained values are zero: nothing to prescribe.

    let dim = case.dim;
    let sigma0 = case.sigma0;
    let load = move |_: &[f64; 3]| {
        let mut t = [0.0; 3];
        t[dim - 1] = -sigma0;
        t
    };
    let free = |_: &[f64; 3]| [0.0; 3];
    let tractions = [
        TractionBc { marker: FOOTING_LOAD, traction: &load },
        TractionBc { marker: FOOTING_FREE, traction: &free },
    ];
    let zero_f = |_: &[f64; 3]| [0.0; 3];
    let zero_g = |_: &[f64; 3]| 0.0;
    let mut sys = assemble_biot_with(&mesh, &spaces, &params, &zero_f, &zero_g, &tractions)?;
    let mut cond = condense(&sys)?;
    let blocks = assemble_preconditioner(&mesh, &spaces, &params, pc)?;
    let red = reduce_preconditioner(&blocks)?;

    let nm = spaces.cell_km1.size();
    let ncells = mesh.n_cells();
    let mut prev_p = vec![0.0; ncells * nm];
    let mut prev_pt = vec![0.0; ncells * nm];
    let off = cell_offsets(&spaces);

    let mut reports = Vec::new();
    let mut x = vec![0.0; monolithic_len(&spaces)];
    for step in 0..case.steps() {
        let rhs_p =
            assemble_timestep_rhs(&mesh, &spaces, &params, case.tau, None, &prev_p, &prev_pt)?;
        if step > 0 {
            sys.set_pressure_rhs(rhs_p)?;
            cond.set_rhs(&sys)?;
        } else {
            // First step: the memory terms vanish with the zero initial
            // state, so the assembled right-hand side is already correct.
            debug_assert!(rhs_p.iter().all(|&v| v == 0.0));
        }
        let (xbar, report) = minres(&cond.s_a, &red, &cond.rhs, tol, None)?;
        x = cond.back_substitute(&xbar)?;
        prev_pt.copy_from_slice(&x[off[1]..off[1] + ncells * nm]);
        prev_p.copy_from_slice(&x[off[3]..off[3] + ncells * nm]);
        reports.push(report);
    }

    let total: usize = reports.iter().map(|r| r.iterations).sum();
    let mean_iterations = total as f64 / reports.len().max(1) as f64;
    let max_iterations = reports.iter().map(|r| r.iterations).max().unwrap_or(0);
    Ok(FootingRun { mesh, spaces, x, reports, mean_iterations, max_iterations })
}

// ---------------------------------------------------------------------------
// Spectrum probes.

/// Eigenvalues of P⁻¹A for symmetric A and SPD P via the Cholesky congruence
/// L⁻¹AL⁻ᵀ. Dense — intended for trace systems on very coarse meshes.
pub fn generalized_spectrum(a: &DMatrix<f64>, p: &DMatrix<f64>) -> Result<Vec<f64>> {
    let n = a.nrows();
    if a.ncols() != n || p.nrows() != n || p.ncols() != n {
        return Err(Error::DimensionMismatch(
            "generalized spectrum needs square matrices of equal size".into(),
        ));
    }
    let chol = p
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NotSpd("preconditioner in spectrum probe".into()))?;
    let l = chol.l();
    let b = l
        .solve_lower_triangular(a)
        .ok_or_else(|| Error::NotSpd("singular Cholesky factor".into()))?;
    let bt = b.transpose();
    let mut m = l
        .solve_lower_triangular(&bt)
        .ok_or_else(|| Error::NotSpd("singular Cholesky factor".into()))?;
    // Symmetrize away the roundoff before the symmetric eigensolver.
    let mt = m.transpose();
    m = (m + mt) * 0.5;
    let mut eigs: Vec<f64> = nalgebra::SymmetricEigen::new(m).eigenvalues.iter().copied().collect();
    eigs.sort_by(|a, b| a.partial_cmp(b).expect("finite eigenvalues"));
    Ok(eigs)
}

#[derive(Debug, Clone)]
pub struct SpectrumPoint {
    pub kappa: f64,
    pub alpha: f64,
    pub c0: f64,
    pub lambda: f64,
    /// Generalized eigenvalues of the condensed operator against the reduced
    /// preconditioner, ascending.
    pub eigs: Vec<f64>,
}

/// Full generalized spectra of (condensed operator, reduced preconditioner)
/// across grid points, on an n×…×n unit-box mesh small enough for dense
/// eigendecomposition.
pub fn run_spectrum(
    dim: usize,
    n: usize,
    k: usize,
    variant: Variant,
    pc: PcVariant,
    grid: &[[f64; 4]],
) -> Result<Vec<SpectrumPoint>> {
    let case = ManufacturedCase::sine(dim);
    let bbox = [[0.0, 1.0]; 3];
    let mesh = unit_box_mesh(dim, n, &bbox[..dim])?;
    let mut spaces = build_spaces(&mesh, k, variant)?;
    spaces.set_dirichlet(&mesh, Field::UBar, None, &|x| case.u_at(x))?;
    spaces.set_dirichlet(&mesh, Field::PBar, None, &|x| [case.p_at(x), 0.0, 0.0])?;

    let mut out = Vec::with_capacity(grid.len());
    for &[kappa, alpha, c0, lambda] in grid {
        let params = ModelParams::new(dim, k, 0.5, lambda, alpha, c0, kappa);
        let f = |x: &[f64; 3]| case.f_at(&params, x);
        let g = |x: &[f64; 3]| case.g_at(&params, x);
        let sys = assemble_biot(&mesh, &spaces, &params, &f, &g)?;
        let cond = condense(&sys)?;
        let blocks = assemble_preconditioner(&mesh, &spaces, &params, pc)?;
        let red = reduce_preconditioner(&blocks)?;
        let eigs = generalized_spectrum(&cond.s_a.to_dense(), &red.to_dense())?;
        out.push(SpectrumPoint { kappa, alpha, c0, lambda, eigs });
    }
    Ok(out)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{project_cell_scalar, project_cell_vector};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rel_close(got: f64, want: f64, tol: f64) -> bool {
        (got - want).abs() <= tol * want.abs().max(1.0)
    }

    /// Source terms written out by hand for the trigonometric case, fixed
    /// independently of the jet machinery that produces them in the driver.
    fn hand_f_2d(p: &ModelParams, x: f64, y: f64) -> [f64; 2] {
        let (sx, cx) = ((PI * x).sin(), (PI * x).cos());
        let (sy, cy) = ((PI * y).sin(), (PI * y).cos());
        let pp = PI * PI;
        let u = [sx * sy, sx * cy];
        let dxd = -pp * sy * (sx + cx);
        let dyd = pp * cy * (cx - sx);
        let cpd = (PI * (x - y)).cos();
        [
            -0.5 * p.mu * dxd + p.mu * pp * u[0] + p.alpha * PI * cpd - p.lambda * dxd,
            -0.5 * p.mu * dyd + p.mu * pp * u[1] - p.alpha * PI * cpd - p.lambda * dyd,
        ]
    }

    fn hand_g_2d(p: &ModelParams, x: f64, y: f64) -> f64 {
        let (sx, cx) = ((PI * x).sin(), (PI * x).cos());
        let sy = (PI * y).sin();
        let div = PI * sy * (cx - sx);
        let pe = (PI * (x - y)).sin();
        p.c0 * pe + p.alpha * div + 2.0 * p.kappa * PI * PI * pe
    }

    fn hand_f_3d(p: &ModelParams, x: f64, y: f64, z: f64) -> [f64; 3] {
        let (sx, cx) = ((PI * x).sin(), (PI * x).cos());
        let (sy, cy) = ((PI * y).sin(), (PI * y).cos());
        let (sz, cz) = ((PI * z).sin(), (PI * z).cos());
        let pp = PI * PI;
        let u = [sx * sy * sz, sx * cy * sz, sx * cy * cz];
        let dxd = -pp * sz * (sx * sy + cx * sy + cx * cy);
        let dyd = pp * sz * (cx * cy - sx * cy + sx * sy);
        let dzd = pp * cz * (cx * sy - sx * sy - sx * cy);
        let cpd = (PI * (x - y - z)).cos();
        let e = [1.0, -1.0, -1.0];
        let dd = [dxd, dyd, dzd];
        let mut f = [0.0; 3];
        for i in 0..3 {
            f[i] = -0.5 * p.mu * dd[i] + 1.5 * p.mu * pp * u[i] + p.alpha * PI * cpd * e[i]
                - p.lambda * dd[i];
        }
        f
    }

    fn hand_g_3d(p: &ModelParams, x: f64, y: f64, z: f64) -> f64 {
        let (sx, cx) = ((PI * x).sin(), (PI * x).cos());
        let (sy, cy) = ((PI * y).sin(), (PI * y).cos());
        let sz = (PI * z).sin();
        let div = PI * sz * (cx * sy - sx * sy - sx * cy);
        let pe = (PI * (x - y - z)).sin();
        p.c0 * pe + p.alpha * div + 3.0 * p.kappa * PI * PI * pe
    }

    #[test]
    fn sine_data_matches_hand_derivation_2d() {
        let params = ModelParams::new(2, 2, 2.0, 3.5, 0.8, 0.3, 1.7);
        let case = ManufacturedCase::sine(2);
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..50 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>(), 0.0];
            let f = case.f_at(&params, &x);
            let fh = hand_f_2d(&params, x[0], x[1]);
            for i in 0..2 {
                assert!(rel_close(f[i], fh[i], 1e-10), "f[{i}] at {x:?}: {} vs {}", f[i], fh[i]);
            }
            let g = case.g_at(&params, &x);
            let gh = hand_g_2d(&params, x[0], x[1]);
            assert!(rel_close(g, gh, 1e-10), "g at {x:?}: {g} vs {gh}");

            // Derived fields against their definitions.
            let (sx, cx) = ((PI * x[0]).sin(), (PI * x[0]).cos());
            let sy = (PI * x[1]).sin();
            let div = PI * sy * (cx - sx);
            let pe = (PI * (x[0] - x[1])).sin();
            let cpd = (PI * (x[0] - x[1])).cos();
            assert!(rel_close(
                case.p_t_at(&params, &x),
                params.alpha * pe - params.lambda * div,
                1e-10
            ));
            let zc = case.z_at(&params, &x);
            assert!(rel_close(zc[0], -params.kappa * PI * cpd, 1e-10));
            assert!(rel_close(zc[1], params.kappa * PI * cpd, 1e-10));
        }
    }

    #[test]
    fn sine_data_matches_hand_derivation_3d() {
        let params = ModelParams::new(3, 2, 1.3, 4.2, 0.6, 0.2, 0.9);
        let case = ManufacturedCase::sine(3);
        let mut rng = ChaCha8Rng::seed_from_u64(18);
        for _ in 0..50 {
            let x = [rng.gen::<f64>(), rng.gen::<f64>(), rng.gen::<f64>()];
            let f = case.f_at(&params, &x);
            let fh = hand_f_3d(&params, x[0], x[1], x[2]);
            for i in 0..3 {
                assert!(rel_close(f[i], fh[i], 1e-10), "f[{i}] at {x:?}: {} vs {}", f[i], fh[i]);
            }
            let g = case.g_at(&params, &x);
            let gh = hand_g_3d(&params, x[0], x[1], x[2]);
            assert!(rel_close(g, gh, 1e-10), "g at {x:?}: {g} vs {gh}");
        }
    }

    #[test]
    fn polynomial_case_data_is_polynomial() {
        // Constant flux and momentum source, linear mass source: the whole
        // data set lies in the discrete spaces.
        let params = ModelParams::new(2, 2, 1.0, 10.0, 0.9, 0.1, 0.7);
        let case = ManufacturedCase::polynomial(2);
        let z0 = case.z_at(&params, &[0.1, 0.2, 0.0]);
        let z1 = case.z_at(&params, &[0.8, 0.5, 0.0]);
        for i in 0..2 {
            assert!(rel_close(z0[i], z1[i], 1e-12), "z must be constant");
        }
        let f0 = case.f_at(&params, &[0.3, 0.9, 0.0]);
        let f1 = case.f_at(&params, &[0.6, 0.1, 0.0]);
        for i in 0..2 {
            assert!(rel_close(f0[i], f1[i], 1e-12), "f must be constant");
        }
    }

    fn assert_polynomial_exact(dim: usize, variant: Variant) {
        let case = ManufacturedCase::polynomial(dim);
        let params = ModelParams::new(dim, 2, 1.0, 10.0, 0.9, 0.1, 0.7);
        let run = run_manufactured(&case, 2, &params, variant, PcVariant::PHat, 1e-11)
            .expect("solver must converge on the polynomial case");
        assert!(run.report.converged);
        assert!(
            run.errors.u_l2 <= 1e-8,
            "{dim}d {variant:?}: u error {} above exactness tolerance",
            run.errors.u_l2
        );
        assert!(
            run.errors.p_l2 <= 1e-8,
            "{dim}d {variant:?}: p error {} above exactness tolerance",
            run.errors.p_l2
        );
    }

    #[test]
    fn polynomial_solution_reproduced_exactly_2d_hdg() {
        assert_polynomial_exact(2, Variant::Hdg);
    }

    #[test]
    fn polynomial_solution_reproduced_exactly_2d_edg() {
        assert_polynomial_exact(2, Variant::Edg);
    }

    #[test]
    fn polynomial_solution_reproduced_exactly_3d_hdg() {
        assert_polynomial_exact(3, Variant::Hdg);
    }

    #[test]
    fn polynomial_solution_reproduced_exactly_3d_edg() {
        assert_polynomial_exact(3, Variant::Edg);
    }

    #[test]
    fn projected_polynomial_interpolant_has_zero_error() {
        let case = ManufacturedCase::polynomial(2);
        let mesh = unit_box_mesh(2, 3, &[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let spaces = build_spaces(&mesh, 2, Variant::Hdg).unwrap();
        let uc = project_cell_vector(&mesh, &spaces, &|x| case.u_at(x)).unwrap();
        let pc = project_cell_scalar(&mesh, &spaces, &|x| case.p_at(x)).unwrap();
        let off = cell_offsets(&spaces);
        let mut x = vec![0.0; monolithic_len(&spaces)];
        x[..uc.len()].copy_from_slice(&uc);
        x[off[3]..off[3] + pc.len()].copy_from_slice(&pc);
        let errors = compute_errors(&mesh, &spaces, &x, &case).unwrap();
        assert!(errors.u_l2 <= 1e-12, "u interpolant error {}", errors.u_l2);
        assert!(errors.p_l2 <= 1e-12, "p interpolant error {}", errors.p_l2);

        // The same vector measured against the sine case must see O(1) error:
        // guards against compute_errors trivially returning zero.
        let other = compute_errors(&mesh, &spaces, &x, &ManufacturedCase::sine(2)).unwrap();
        assert!(other.u_l2 > 0.1 && other.p_l2 > 0.1);
    }

    #[test]
    fn compute_errors_rejects_wrong_length() {
        let mesh = unit_box_mesh(2, 2, &[[0.0, 1.0], [0.0, 1.0]]).unwrap();
        let spaces = build_spaces(&mesh, 2, Variant::Hdg).unwrap();
        let x = vec![0.0; 7];
        assert!(matches!(
            compute_errors(&mesh, &spaces, &x, &ManufacturedCase::sine(2)),
            Err(Error::DimensionMismatch(_))
        ));
    }

    #[test]
    fn sine_errors_shrink_under_refinement() {
        let case = ManufacturedCase::sine(2);
        let params = ModelParams::new(2, 2, 1.0, 1.0, 1.0, 0.1, 1.0);
        let mut prev: Option<FieldErrors> = None;
        for n in [2usize, 4, 8] {
            let run =
                run_manufactured(&case, n, &params, Variant::Hdg, PcVariant::PHat, 1e-10).unwrap();
            assert!(run.report.converged);
            if let Some(pe) = prev {
                assert!(
                    pe.u_l2 / run.errors.u_l2 >= 3.0,
                    "u error ratio {} at n={n}",
                    pe.u_l2 / run.errors.u_l2
                );
                assert!(
                    pe.p_l2 / run.errors.p_l2 >= 3.0,
                    "p error ratio {} at n={n}",
                    pe.p_l2 / run.errors.p_l2
                );
            }
            prev = Some(run.errors);
        }
    }

    #[test]
    fn param_grid_covers_declared_corners_in_order() {
        let grid = param_grid();
        assert_eq!(grid.len(), 54);
        assert_eq!(grid[0], [1.0, 1.0, 1.0, 1.0]);
        assert_eq!(grid[1], [1.0, 1.0, 1.0, 1e4]);
        assert_eq!(grid[53], [1e-8, 1e-4, 0.0, 1e8]);
        // λ fastest, κ slowest: blocks of 3 (c₀), 9 (α), 18 (κ).
        assert_eq!(grid[3], [1.0, 1.0, 1e-4, 1.0]);
        assert_eq!(grid[9], [1.0, 1e-4, 1.0, 1.0]);
        assert_eq!(grid[18], [1e-4, 1.0, 1.0, 1.0]);
        assert_eq!(grid[36], [1e-8, 1.0, 1.0, 1.0]);
        let unique: std::collections::HashSet<String> =
            grid.iter().map(|p| format!("{p:?}")).collect();
        assert_eq!(unique.len(), 54);
    }

    #[test]
    fn footing_mesh_partitions_boundary_2d() {
        let case = FootingCase::new(2, 6, 1.0);
        let mesh = case.build_mesh().unwrap();
        let mut counts = std::collections::HashMap::new();
        for f in mesh.facets() {
            if let Some(m) = f.marker {
                *counts.entry(m).or_insert(0usize) += 1;
            }
        }
        // Top edge: 6 facets, 2 under the strip |x| ≤ 50/3, 4 free.
        assert_eq!(counts.get(&FOOTING_LOAD), Some(&2));
        assert_eq!(counts.get(&FOOTING_FREE), Some(&4));
        assert_eq!(counts.get(&FOOTING_CLAMPED), Some(&18));
        assert_eq!(counts.values().sum::<usize>(), 24);
    }

    #[test]
    fn footing_mesh_partitions_boundary_3d() {
        let case = FootingCase::new(3, 4, 1.0);
        let mesh = case.build_mesh().unwrap();
        let mut counts = std::collections::HashMap::new();
        for f in mesh.facets() {
            if let Some(m) = f.marker {
                *counts.entry(m).or_insert(0usize) += 1;
            }
        }
        // Top face: 4×4 squares × 2 triangles; the central 2×2 block carries
        // the load.
        assert_eq!(counts.get(&FOOTING_LOAD), Some(&8));
        assert_eq!(counts.get(&FOOTING_FREE), Some(&24));
        assert_eq!(counts.get(&FOOTING_CLAMPED), Some(&160));
    }

    #[test]
    fn footing_zero_load_needs_no_iterations() {
        let mut case = FootingCase::new(2, 6, 1.0);
        case.sigma0 = 0.0;
        case.max_steps = 3;
        let run = run_footing(&case, Variant::Hdg, PcVariant::PHat, 1e-8).unwrap();
        assert_eq!(run.reports.len(), 3);
        for r in &run.reports {
            assert!(r.converged);
            assert_eq!(r.iterations, 0, "zero data must solve without iterating");
        }
        assert!(run.x.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn footing_settles_under_the_strip() {
        let mut case = FootingCase::new(2, 6, 0.25);
        case.max_steps = 3;
        let run = run_footing(&case, Variant::Hdg, PcVariant::PHat, 1e-8).unwrap();
        assert_eq!(run.reports.len(), 3);
        for r in &run.reports {
            assert!(r.converged);
            assert!(r.iterations > 0);
        }
        assert!(run.max_iterations >= run.mean_iterations.ceil() as usize);

        let vf = vertex_fields(&run.mesh, &run.spaces, &run.x);
        // Vertex at the center of the loaded strip.
        let mut center = None;
        for v in 0..run.mesh.n_vertices() {
            let p = run.mesh.vertex(v);
            if p[0].abs() < 1e-9 && (p[1] - 75.0).abs() < 1e-9 {
                center = Some(v);
            }
        }
        let v = center.expect("grid vertex at (0, 75)");
        assert!(
            vf.u[3 * v + 1] < 0.0,
            "strip load must push the surface down, got uy = {}",
            vf.u[3 * v + 1]
        );
    }

    #[test]
    fn spectrum_probe_brackets_unity() {
        let grid = param_grid();
        let pts =
            run_spectrum(2, 2, 2, Variant::Hdg, PcVariant::PHat, &grid[..2]).unwrap();
        assert_eq!(pts.len(), 2);
        for pt in &pts {
            let n = pt.eigs.len();
            assert!(n > 50, "coarse trace system should still have many dofs");
            assert!(pt.eigs.windows(2).all(|w| w[0] <= w[1]));
            let min = pt.eigs[0];
            let max = pt.eigs[n - 1];
            assert!(min < 0.0 && max > 0.0, "saddle spectrum must straddle zero");
            let amin = pt.eigs.iter().fold(f64::INFINITY, |m, &e| m.min(e.abs()));
            assert!(amin > 1e-8, "preconditioned operator must be nonsingular");
            assert!(max.abs() < 1e3 && min.abs() < 1e3);
        }
    }
}
