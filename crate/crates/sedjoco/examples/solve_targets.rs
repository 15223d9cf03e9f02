//! Solves the coupled demixing equations on expected targets and checks the
//! two properties everything downstream leans on: the drilled residual at
//! the solution, and equivariance under a change of mixing coordinates.

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sedjoco::covariance::scv_precision;
use sedjoco::model::{DemixingSet, ProblemDims};
use sedjoco::solver::{drilled_check, expected_targets, newton_solve};
use sedjoco::sourcegen::{draw_bank, std_normal};

fn main() {
    let dims = ProblemDims::new(2, 3, 256, 4).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (bank, _) = draw_bank(dims.k, dims.m, dims.l, 1.0, 2.0, &mut rng).unwrap();

    let cs: Vec<_> = (1..=dims.k).map(|k| bank.covariance(k, dims.t)).collect();
    let ps: Vec<_> = cs.iter().map(|c| scv_precision(c).unwrap()).collect();

    // expected targets of the matched model: the identity is already the
    // exact solution, so Newton from I accepts immediately
    let q = expected_targets(&cs, &ps).unwrap();
    let ident = DemixingSet::identity(&dims);
    let (b, report) = newton_solve(&q, &ident, 1e-11, 100).unwrap();
    println!(
        "matched model from I: {} iterations, residual {:.2e}",
        report.iterations, report.residual
    );

    // from a jittered start the quadratic tail is visible in the history
    let mut b0 = ident.clone();
    for mm in 1..=dims.m {
        let jit = DMatrix::from_fn(dims.k, dims.k, |_, _| 0.2 * std_normal(&mut rng));
        *b0.mat_mut(mm) += jit;
    }
    let (b_j, report) = newton_solve(&q, &b0, 1e-11, 100).unwrap();
    let hist: Vec<String> = report.history.iter().map(|r| format!("{r:.1e}")).collect();
    println!("jittered start: residual per iterate {}", hist.join(" -> "));
    println!("drilled check: {:.2e}", drilled_check(&b_j, &q));

    // equivariance: hand the solver the same problem expressed in different
    // mixing coordinates and it must land on the same global separator
    let m = dims.m;
    let a: Vec<DMatrix<f64>> = (0..m)
        .map(|_| {
            DMatrix::from_fn(dims.k, dims.k, |r, c| {
                (if r == c { 1.0 } else { 0.0 }) + 0.3 * std_normal(&mut rng)
            })
        })
        .collect();
    let q_a = congruence(&q, &a);
    let a_inv: Vec<DMatrix<f64>> = a
        .iter()
        .map(|ai| ai.clone().try_inverse().expect("well-conditioned draw"))
        .collect();
    let (b_a, _) = newton_solve(&q_a, &DemixingSet::new(a_inv).unwrap(), 1e-11, 100).unwrap();

    let mut worst = 0.0f64;
    for mm in 1..=m {
        let g_a = b_a.mat(mm) * &a[mm - 1];
        worst = worst.max((g_a - b.mat(mm)).amax());
    }
    println!("global separator drift across coordinates: {worst:.2e}");
    assert!(worst < 1e-8);
}

// targets transform congruently with the mixing: Q -> A Q A^T blockwise
fn congruence(
    q: &sedjoco::model::TargetSet,
    a: &[DMatrix<f64>],
) -> sedjoco::model::TargetSet {
    let mut out = q.clone();
    for k in 1..=q.k() {
        for m1 in 1..=q.n_datasets() {
            for m2 in 1..=q.n_datasets() {
                let blk = &a[m1 - 1] * q.block(k, m1, m2) * a[m2 - 1].transpose();
                *out.block_mut(k, m1, m2) = blk;
            }
        }
    }
    out
}
