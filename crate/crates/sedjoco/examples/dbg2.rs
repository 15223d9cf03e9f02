use sedjoco::covariance::{scv_precision, FirBank, ScvPrecision};
use sedjoco::error::Result;
use sedjoco::model::{DemixingSet, ProblemDims};
use sedjoco::perturbation::predict_pairwise;
use sedjoco::solver::{compute_targets_factored, newton_solve};
use sedjoco::sourcegen::{
    draw_gaussian_bank, gen_sources, trial_rng, IsrAccumulator, NoiseFamily,
};

// does the anomalous excess follow the source draw or the (i<-j) label?
fn main() -> Result<()> {
    let trials: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(4000);
    let mut rng = trial_rng(2, u64::MAX);
    let bank = draw_gaussian_bank(2, 5, 4, 0.5, &mut rng)?;
    let (k, m, l) = (2usize, 5usize, 4usize);

    // same bank with the two sources' filter blocks exchanged
    let block = m * m * l;
    let mut swapped = bank.taps().to_vec();
    swapped.rotate_left(block);
    let bank_sw = FirBank::new(k, m, l, 0.5, swapped)?;

    for (label, b) in [("original", &bank), ("swapped", &bank_sw)] {
        let t = 192;
        let dims = ProblemDims::new(m, k, t, l)?;
        let cs: Vec<_> = (1..=k).map(|kk| b.covariance(kk, t)).collect();
        let ps: Vec<ScvPrecision> = cs.iter().map(|c| scv_precision(c)).collect::<Result<_>>()?;
        let pred = predict_pairwise(&dims, &cs, &ps)?;
        let chols: Vec<_> = cs.iter().map(|c| c.banded_cholesky()).collect::<Result<_>>()?;
        let ident = DemixingSet::identity(&dims);
        let mut acc = IsrAccumulator::new(m, k);
        for trial in 0..trials {
            let mut rng = trial_rng(17, trial);
            let xs = gen_sources(b, t, NoiseFamily::Gaussian, &mut rng);
            let q = compute_targets_factored(&xs, &chols)?;
            match newton_solve(&q, &ident, 1e-9, 100) {
                Ok((bhat, _)) => acc.add_trial(&bhat),
                Err(_) => acc.add_excluded(),
            }
        }
        let powers: Vec<Vec<f64>> = (1..=m)
            .map(|mm| (1..=k).map(|kk| cs[kk - 1].power(mm)).collect())
            .collect();
        let emp = acc.table(&powers);
        println!("{label}:");
        for (mm, i, j, v) in pred.isr.cells() {
            let e = emp.get(mm, i, j);
            println!("  m={mm} ({i}<-{j}) excess={:+.1}%", 100.0 * (e / v - 1.0));
        }
    }
    Ok(())
}
