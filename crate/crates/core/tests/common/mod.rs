//! Oracles shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use statrs::distribution::{ContinuousCDF, Normal};

/// `E_q[ln q(z) − ln p(z)]` for `q = N(μ, diag(exp(log_var)))` and
/// `p = N(0, I)`, estimated from `draws` samples of `q`. Each dimension's
/// standard-normal draws are stratified (one per equal-probability slice,
/// slices shuffled independently per dimension), which keeps the estimator
/// unbiased while removing most of the sampling variance.
pub fn monte_carlo_kl(mu: &[f64], log_var: &[f64], draws: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::standard();
    let mut total = 0.0;
    for (m, lv) in mu.iter().zip(log_var) {
        let mut strata: Vec<usize> = (0..draws).collect();
        strata.shuffle(&mut rng);
        let sigma = (0.5 * lv).exp();
        for s in strata {
            let u = (s as f64 + rng.random_range(0.0..1.0)) / draws as f64;
            let e = normal.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
            let z = m + sigma * e;
            // log densities up to the shared −½ ln 2π
            let log_q = -0.5 * e * e - sigma.ln();
            let log_p = -0.5 * z * z;
            total += log_q - log_p;
        }
    }
    total / draws as f64
}
