//! Deterministic fixtures shared by the benchmarks.

use clevercatch_core::ingest::ClaimsTable;
use clevercatch_core::numeric::{Matrix, SeededRng};
use clevercatch_core::rules::RuleSet;
use clevercatch_core::simulator::{simulate, SimConfig};
use rand::Rng;

/// Entries uniform in `[0, 1)`.
pub fn random_matrix(rows: usize, cols: usize, seed: u64) -> Matrix {
    let mut rng = SeededRng::new(seed);
    let data = (0..rows * cols).map(|_| rng.random::<f64>()).collect();
    Matrix::from_vec(rows, cols, data).expect("consistent shape")
}

/// A simulated dataset with its planted rule set.
pub fn simulated(n_providers: usize) -> (ClaimsTable, RuleSet) {
    let out = simulate(&SimConfig {
        n_providers,
        ..SimConfig::default()
    })
    .expect("default simulator config is valid");
    let rules = RuleSet::from_named(&out.rules, out.claims.vocabulary().clone()).expect("planted rules resolve");
    (out.claims, rules)
}

