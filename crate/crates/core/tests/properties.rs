use std::sync::Arc;

use proptest::prelude::*;
use stochwave::{
    assemble_operators, build_stepper, build_uniform_mesh, fit_rates, predict_rates,
    prolongation_matrix, ErrorColumn, ErrorRow, ErrorTable, FemFunction, RationalMethod,
    RegularityParams, State,
};

/// Admissible parameter sets: θ ≤ min(β, δ, 1), μ ∈ [0, 2], ν ∈ [max(μ − 1, 0), min(r, 1)].
fn params() -> impl Strategy<Value = RegularityParams> {
    (
        0.01f64..2.0,
        0.01f64..2.0,
        0.0f64..=1.0,
        0.0f64..=1.0,
        0.0f64..=1.0,
        2u32..=3,
        1u32..=2,
    )
        .prop_map(|(beta, delta, t, m, s, kappa, rho)| {
            let theta = t * beta.min(delta).min(1.0);
            let r = beta.min(delta).min(1.0 + theta);
            let mu = m * 2f64.min(1.0 + r.min(1.0));
            let lo = (mu - 1.0).max(0.0);
            let nu = lo + s * (r.min(1.0) - lo).max(0.0);
            RegularityParams {
                beta,
                delta,
                theta,
                eta: f64::INFINITY,
                nu,
                mu,
                kappa,
                rho,
            }
        })
}

fn vector(n: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-1.0f64..1.0, n)
}

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.iter()
        .zip(b)
        .all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn improved_rates_dominate_base_rate(p in params()) {
        let r = predict_rates(&p).unwrap();
        prop_assert!(r.r_prime_strong >= r.r - 1e-12);
        prop_assert!(r.r_prime_weak >= r.r - 1e-12);
        for e in [r.strong_h_exp, r.strong_dt_exp, r.negnorm_h_exp, r.negnorm_dt_exp, r.weak_h_exp, r.weak_dt_exp] {
            prop_assert!(e.is_finite());
        }
    }

    #[test]
    fn strong_exponent_monotone_in_beta_and_delta(p in params(), db in 0.0f64..1.0, dd in 0.0f64..1.0) {
        let base = predict_rates(&p).unwrap().strong_h_exp;
        let more_beta = predict_rates(&RegularityParams { beta: p.beta + db, ..p }).unwrap().strong_h_exp;
        let more_delta = predict_rates(&RegularityParams { delta: p.delta + dd, ..p }).unwrap().strong_h_exp;
        prop_assert!(more_beta >= base - 1e-12);
        prop_assert!(more_delta >= base - 1e-12);
    }

    #[test]
    fn linear_step_is_affine(
        cn in any::<bool>(),
        a in vector(15), b in vector(15), c in vector(15), d in vector(15),
        w in vector(15), s in -2.0f64..2.0,
    ) {
        let method = if cn { RationalMethod::CrankNicolson } else { RationalMethod::BackwardEuler };
        let ops = Arc::new(assemble_operators(&build_uniform_mesh(16).unwrap()).unwrap());
        let stepper = build_stepper(method, ops, 0.05).unwrap();
        let x = State { u: a.clone(), v: b.clone(), time: 0.0 };
        let y = State { u: c.clone(), v: d.clone(), time: 0.0 };
        let combo = State {
            u: a.iter().zip(&c).map(|(p, q)| p + s * q).collect(),
            v: b.iter().zip(&d).map(|(p, q)| p + s * q).collect(),
            time: 0.0,
        };
        // S(x + s·y, w) = S(x, w) + s·S(y, 0)
        let lhs = stepper.step(None, Some(&w), &combo).unwrap();
        let sx = stepper.step(None, Some(&w), &x).unwrap();
        let sy = stepper.step(None, None, &y).unwrap();
        let u: Vec<f64> = sx.u.iter().zip(&sy.u).map(|(p, q)| p + s * q).collect();
        let v: Vec<f64> = sx.v.iter().zip(&sy.v).map(|(p, q)| p + s * q).collect();
        prop_assert!(close(&lhs.u, &u, 1e-10));
        prop_assert!(close(&lhs.v, &v, 1e-10));
    }

    #[test]
    fn crank_nicolson_conserves_energy(u in vector(31), v in vector(31), dt in 1e-3f64..0.5) {
        let ops = Arc::new(assemble_operators(&build_uniform_mesh(32).unwrap()).unwrap());
        let stepper = build_stepper(RationalMethod::CrankNicolson, ops, dt).unwrap();
        let mut state = State { u, v, time: 0.0 };
        let e0 = stepper.energy(&state);
        for _ in 0..20 {
            state = stepper.step(None, None, &state).unwrap();
        }
        prop_assert!((stepper.energy(&state) - e0).abs() <= 1e-10 * e0.max(1e-300));
    }

    #[test]
    fn backward_euler_dissipates_energy(u in vector(31), v in vector(31), dt in 1e-3f64..0.5) {
        let ops = Arc::new(assemble_operators(&build_uniform_mesh(32).unwrap()).unwrap());
        let stepper = build_stepper(RationalMethod::BackwardEuler, ops, dt).unwrap();
        let state = State { u, v, time: 0.0 };
        let next = stepper.step(None, None, &state).unwrap();
        prop_assert!(stepper.energy(&next) <= stepper.energy(&state) * (1.0 + 1e-12));
    }

    #[test]
    fn prolongation_is_exact(k in 1u32..5, j in 1u32..3, coeffs in vector(31), x in 0.0f64..1.0) {
        let coarse = build_uniform_mesh(1 << k).unwrap();
        let fine = build_uniform_mesh(1 << (k + j)).unwrap();
        let w = FemFunction::new(&coarse, coeffs[..coarse.interior_dof()].to_vec()).unwrap();
        let p = prolongation_matrix(&coarse, &fine).unwrap();
        let pw = FemFunction::new(&fine, p.mul_vec(w.coeffs())).unwrap();
        prop_assert!((pw.evaluate(x) - w.evaluate(x)).abs() <= 1e-12);
    }

    #[test]
    fn restriction_is_adjoint(k in 1u32..5, j in 1u32..3, a in vector(63), b in vector(63)) {
        let coarse = build_uniform_mesh(1 << k).unwrap();
        let fine = build_uniform_mesh(1 << (k + j)).unwrap();
        let p = prolongation_matrix(&coarse, &fine).unwrap();
        let xc = &a[..coarse.interior_dof()];
        let yf = &b[..fine.interior_dof()];
        let lhs: f64 = p.mul_vec(xc).iter().zip(yf).map(|(p, q)| p * q).sum();
        let rhs: f64 = xc.iter().zip(p.mul_transpose(yf)).map(|(p, q)| p * q).sum();
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }

    #[test]
    fn galerkin_mass_is_coarse_mass(k in 1u32..5, coeffs in vector(15)) {
        // Pᵀ M_f P = M_c for nested P1 spaces.
        let coarse = build_uniform_mesh(1 << k).unwrap();
        let fine = build_uniform_mesh(1 << (k + 2)).unwrap();
        let p = prolongation_matrix(&coarse, &fine).unwrap();
        let mc = assemble_operators(&coarse).unwrap();
        let mf = assemble_operators(&fine).unwrap();
        let x = &coeffs[..coarse.interior_dof()];
        let galerkin = p.mul_transpose(&mf.mass().mul_vec(&p.mul_vec(x)));
        prop_assert!(close(&galerkin, &mc.mass().mul_vec(x), 1e-12));
    }

    #[test]
    fn error_table_csv_round_trips(
        rows in prop::collection::vec(
            (1e-6f64..1.0, 1e-6f64..1.0, 1usize..10_000, -1e3f64..1e3, 0.0f64..1.0,
             prop::option::of(0.0f64..1.0), any::<bool>()),
            1..8,
        )
    ) {
        let table = ErrorTable {
            rows: rows
                .into_iter()
                .enumerate()
                .map(|(level, (h, dt, n, weak, se, neg, flag))| ErrorRow {
                    level,
                    h,
                    dt,
                    n_samples: n,
                    strong_error: se * 3.0,
                    strong_se: se,
                    weak_error: weak,
                    weak_se: se / 7.0,
                    negnorm_error: neg,
                    negnorm_se: neg.map(|x| x / 3.0),
                    noise_floor_flag: flag,
                })
                .collect(),
        };
        let mut buf = Vec::new();
        table.write_csv(&mut buf).unwrap();
        prop_assert_eq!(ErrorTable::read_csv(buf.as_slice()).unwrap(), table);
    }

    #[test]
    fn fit_recovers_power_law(slope in 0.1f64..3.0, c in 0.01f64..10.0, levels in 3usize..8) {
        let rows = (0..levels)
            .map(|l| {
                let h = 2f64.powi(-(l as i32) - 1);
                ErrorRow {
                    level: l,
                    h,
                    dt: h,
                    n_samples: 10,
                    strong_error: c * h.powf(slope),
                    strong_se: 0.0,
                    weak_error: -c * h.powf(slope),
                    weak_se: 0.0,
                    negnorm_error: None,
                    negnorm_se: None,
                    noise_floor_flag: false,
                }
            })
            .collect();
        let table = ErrorTable { rows };
        let strong = fit_rates(&table, ErrorColumn::Strong).unwrap();
        let weak = fit_rates(&table, ErrorColumn::Weak).unwrap();
        prop_assert!((strong.slope - slope).abs() <= 1e-9);
        prop_assert!((weak.slope - slope).abs() <= 1e-9);
        prop_assert!((strong.intercept - c.log2()).abs() <= 1e-9);
        prop_assert!(strong.r_squared > 1.0 - 1e-12);
    }
}
