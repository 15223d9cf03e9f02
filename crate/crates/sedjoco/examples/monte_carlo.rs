//! Prediction against simulation on one mismatched model: a few hundred
//! seeded trials, per-trial estimates through the banded factorization, and
//! the closed-form number they should scatter around.

use sedjoco::covariance::scv_precision;
use sedjoco::model::{DemixingSet, ProblemDims};
use sedjoco::perturbation::predict_pairwise;
use sedjoco::solver::{compute_targets_factored, newton_solve};
use sedjoco::sourcegen::{
    bank_from_zeros, draw_bank, gen_sources, perturb_zeros, trial_rng, IsrAccumulator,
    NoiseFamily,
};

fn main() {
    let dims = ProblemDims::new(2, 3, 512, 6).unwrap();
    let seed = 19;
    let trials = 400;

    // model draw on a stream of its own, disjoint from every trial stream
    let mut rng = trial_rng(seed, u64::MAX);
    let (bank, z0) = draw_bank(dims.k, dims.m, dims.l, 1.0, 2.0, &mut rng).unwrap();
    let z1: Vec<_> = z0.iter().map(|z| perturb_zeros(z, 0.1, 0.1, &mut rng)).collect();
    let pres_bank = bank_from_zeros(dims.k, dims.m, dims.l, 1.0, &z1).unwrap();

    let cs: Vec<_> = (1..=dims.k).map(|k| bank.covariance(k, dims.t)).collect();
    let pres: Vec<_> = (1..=dims.k).map(|k| pres_bank.covariance(k, dims.t)).collect();
    let ps: Vec<_> = pres.iter().map(|c| scv_precision(c).unwrap()).collect();

    let pred = predict_pairwise(&dims, &cs, &ps).unwrap();
    println!("predicted total: {:.3} dB", pred.isr.total_db());

    let chols: Vec<_> = pres.iter().map(|c| c.banded_cholesky().unwrap()).collect();
    let ident = DemixingSet::identity(&dims);
    let mut acc = IsrAccumulator::new(dims.m, dims.k);
    for trial in 0..trials {
        let mut rng = trial_rng(seed, trial);
        let xs = gen_sources(&bank, dims.t, NoiseFamily::Gaussian, &mut rng);
        // sources mixed by I: the estimate itself is the global separator
        let q = compute_targets_factored(&xs, &chols).unwrap();
        match newton_solve(&q, &ident, 1e-9, 100) {
            Ok((bhat, _)) => acc.add_trial(&bhat),
            Err(_) => acc.add_excluded(),
        }
    }

    let powers: Vec<Vec<f64>> = (1..=dims.m)
        .map(|mm| (1..=dims.k).map(|kk| cs[kk - 1].power(mm)).collect())
        .collect();
    let emp = acc.table(&powers);
    println!(
        "empirical total: {:.3} dB   ({} trials, {} excluded)",
        emp.total_db(),
        acc.trials(),
        acc.excluded()
    );
    println!("gap: {:+.3} dB", emp.total_db() - pred.isr.total_db());

    println!("\nper-element [dB]:        predicted   empirical");
    for (m, i, j, v) in pred.isr.cells() {
        println!(
            "  dataset {m}  ({i} <- {j})   {:>9.3}   {:>9.3}",
            10.0 * v.log10(),
            emp.get_db(m, i, j)
        );
    }
}
