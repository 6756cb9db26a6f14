use biot_hdg::assembly::assemble_biot;
use biot_hdg::condense::condense;
use biot_hdg::mesh::unit_box_mesh;
use biot_hdg::problems::ManufacturedCase;
use biot_hdg::spaces::{build_spaces, Field, Variant};
use biot_hdg::ModelParams;
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn log_uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    10f64.powf(rng.gen_range(lo.log10()..hi.log10()))
}

/// Residual b - a*x with compensated (twofold-precision) accumulation.
fn dd_residual(a: &DMatrix<f64>, x: &DVector<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    DVector::from_fn(n, |i, _| {
        let mut s = b[i];
        let mut c = 0.0f64;
        for j in 0..n {
            let aij = a[(i, j)];
            if aij == 0.0 {
                continue;
            }
            let p = -aij * x[j];
            let e = f64::mul_add(-aij, x[j], -p);
            let t = s + p;
            let z = t - s;
            let err = (s - (t - z)) + (p - z);
            s = t;
            c += err + e;
        }
        s + c
    })
}

/// Row/col-equilibrated dense solve, polished by refinement with
/// compensated residuals until componentwise roundoff.
fn solve_refined(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    let mut d = DVector::from_element(n, 1.0);
    for i in 0..n {
        let m = a.row(i).amax();
        if m > 0.0 {
            d[i] = 1.0 / m.sqrt();
        }
    }
    let mut ae = a.clone();
    for i in 0..n {
        for j in 0..n {
            ae[(i, j)] *= d[i] * d[j];
        }
    }
    let lu = ae.lu();
    let bs = DVector::from_fn(n, |i, _| b[i] * d[i]);
    let y = lu.solve(&bs).unwrap();
    let mut x = DVector::from_fn(n, |i, _| y[i] * d[i]);
    for _ in 0..4 {
        let r = dd_residual(a, &x, b);
        let rs = DVector::from_fn(n, |i, _| r[i] * d[i]);
        let dy = lu.solve(&rs).unwrap();
        for i in 0..n {
            x[i] += dy[i] * d[i];
        }
    }
    x
}

#[test]
fn probe() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0ED);
    let mut worst = 0.0f64;
    for dim in [2usize, 3] {
        let bbox = [[0.0, 1.0]; 3];
        let mesh = unit_box_mesh(dim, 1, &bbox[..dim]).unwrap();
        let case = ManufacturedCase::sine(dim);
        let mut spaces = build_spaces(&mesh, 2, Variant::Hdg).unwrap();
        spaces.set_dirichlet(&mesh, Field::UBar, None, &|x| case.u_at(x)).unwrap();
        spaces.set_dirichlet(&mesh, Field::PBar, None, &|x| [case.p_at(x), 0.0, 0.0]).unwrap();
        for t in 0..5 {
            let kappa = log_uniform(&mut rng, 1e-8, 1.0);
            let alpha = log_uniform(&mut rng, 1e-4, 1.0);
            let c0 = log_uniform(&mut rng, 1e-4, 1.0);
            let lambda = log_uniform(&mut rng, 1.0, 1e8);
            let params = ModelParams::new(dim, 2, 0.5, lambda, alpha, c0, kappa);
            let sys = assemble_biot(&mesh, &spaces, &params,
                &|x| case.f_at(&params, x), &|x| case.g_at(&params, x)).unwrap();
            let x_mono = solve_refined(&sys.to_dense(), &sys.rhs_vector());
            let cond = condense(&sys).unwrap();
            let xbar = solve_refined(&cond.s_a.to_dense(), &DVector::from_column_slice(&cond.rhs));
            let x_cond = cond.back_substitute(xbar.as_slice()).unwrap();
            let mut tuple_worst = 0.0f64;
            for f in Field::ALL {
                let off = sys.field_offset(f);
                let len = sys.n_free(f);
                let mut dn = 0.0; let mut fn2 = 0.0;
                for i in off..off + len {
                    dn += (x_cond[i] - x_mono[i]) * (x_cond[i] - x_mono[i]);
                    fn2 += x_mono[i] * x_mono[i];
                }
                tuple_worst = tuple_worst.max(dn.sqrt() / fn2.sqrt());
            }
            println!("dim {dim} tuple {t} (k={kappa:.1e} l={lambda:.1e}): worst rel_self {tuple_worst:.2e}");
            worst = worst.max(tuple_worst);
        }
    }
    println!("WORST {worst:.3e}");
}
