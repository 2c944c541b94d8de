//! Property suite run by `forvalue toy-verify`: checks the toy model's
//! gradients and score decomposition, then checks the engine against it.

use std::fmt;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::record::{RestrictedVocab, Role};
use crate::sketch::build_sketch;
use crate::synth::{self, ToySizes};
use crate::toy;
use crate::valuation::{restriction_bound, score_pairwise, score_sketch};

/// Fault injection for negative controls.
#[derive(Clone, Copy, Debug, Default)]
pub struct VerifyHooks {
    /// Added to the first entry of every valuation sketch.
    pub perturb_sketch: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PropertyResult {
    pub name: &'static str,
    pub residual: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct VerifyReport {
    pub seed: u64,
    pub properties: Vec<PropertyResult>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.properties.iter().all(|p| p.passed)
    }

    pub fn failed(&self) -> impl Iterator<Item = &PropertyResult> {
        self.properties.iter().filter(|p| !p.passed)
    }
}

impl fmt::Display for VerifyReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "toy-verify seed {}", self.seed)?;
        for p in &self.properties {
            writeln!(
                f,
                "{} {:<28} residual {:.3e} (tolerance {:.1e})",
                if p.passed { "PASS" } else { "FAIL" },
                p.name,
                p.residual,
                p.tolerance
            )?;
        }
        write!(f, "{}", if self.passed() { "all properties hold" } else { "FAILED" })
    }
}

fn rel(a: f64, b: f64) -> f64 {
    if a == b {
        0.0
    } else {
        (a - b).abs() / a.abs().max(b.abs())
    }
}

fn check(name: &'static str, residual: f64, tolerance: f64) -> PropertyResult {
    PropertyResult {
        name,
        residual,
        tolerance,
        passed: residual <= tolerance,
    }
}

/// Taylor-check learning rates; each halves the previous one.
pub const TAYLOR_RATES: [f64; 3] = [1e-3, 5e-4, 2.5e-4];

/// Worst deviation of the residual ratio from 4 across halvings.
pub fn taylor_ratio_deviation(points: &[synth::TaylorPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[0].residual / w[1].residual - 4.0).abs())
        .fold(0.0, f64::max)
}

/// Runs every property on two instances drawn from `seed`: one where
/// training samples share prefixes with valuation samples and one where all
/// contexts are distinct.
pub fn run_toy_suite(seed: u64, sizes: &ToySizes, hooks: VerifyHooks) -> Result<VerifyReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shared = synth::toy_instance(&mut rng, sizes, true);
    let distinct = synth::toy_instance(&mut rng, sizes, false);
    let mut properties = Vec::new();

    let (fd, _) = synth::finite_difference_check(&shared.model, &shared.train, 1e-5);
    properties.push(check("gradient-finite-difference", fd, 1e-6));

    let mut worst = 0.0f64;
    for v in &shared.valid {
        let gv = toy::log_likelihood_gradient(&shared.model, v);
        for i in &shared.train {
            let gi = toy::log_likelihood_gradient(&shared.model, i);
            worst = worst.max(rel(toy::term_i(&shared.model, v, i), gv.dot_w(&gi)));
        }
    }
    properties.push(check("term-i-unembedding-identity", worst, 1e-9));

    let mut worst = 0.0f64;
    for v in &shared.valid {
        let t1: f64 = shared.train.iter().map(|i| toy::term_i(&shared.model, v, i)).sum();
        let t2 = toy::term_ii(&shared.model, v, &shared.train);
        let full: f64 = shared
            .train
            .iter()
            .map(|i| toy::hessian_free_score(&shared.model, v, i))
            .sum();
        worst = worst.max(rel(t1 + t2, full));
    }
    properties.push(check("decomposition-shared-prefix", worst, 1e-9));

    let mut worst = 0.0f64;
    for v in &distinct.valid {
        worst = worst.max(toy::term_ii(&distinct.model, v, &distinct.train).abs());
        for i in &distinct.train {
            let hf = toy::hessian_free_score(&distinct.model, v, i);
            worst = worst.max(rel(hf, toy::term_i(&distinct.model, v, i)));
        }
    }
    properties.push(check("distinct-contexts-term-i-only", worst, 1e-9));

    let mut worst = 0.0f64;
    for v in &shared.valid {
        let points = synth::taylor_residuals(&shared.model, &shared.train, v, &TAYLOR_RATES)?;
        worst = worst.max(taylor_ratio_deviation(&points));
    }
    properties.push(check("one-step-second-order", worst, 0.5));

    let full = Arc::new(RestrictedVocab::full(distinct.model.vocab_size));
    let val = toy::export_records(&distinct.model, &distinct.valid, Role::Valuation, None)?;
    let train = toy::export_records(&distinct.model, &distinct.train, Role::Training, None)?;
    let mut pair_worst = 0.0f64;
    let mut sketch_worst = 0.0f64;
    let train_sketches = train
        .iter()
        .map(|r| build_sketch(r, &full))
        .collect::<Result<Vec<_>>>()?;
    for (rv, sv) in val.iter().zip(&distinct.valid) {
        let mut mv = build_sketch(rv, &full)?;
        if let Some(delta) = hooks.perturb_sketch {
            mv.m[0] += delta;
        }
        for ((ri, si), mi) in train.iter().zip(&distinct.train).zip(&train_sketches) {
            let oracle = toy::term_i(&distinct.model, sv, si);
            pair_worst = pair_worst.max(rel(score_pairwise(rv, ri, &full)?, oracle));
            sketch_worst = sketch_worst.max(rel(score_sketch(&mv, mi)?, oracle));
        }
    }
    properties.push(check("engine-pairwise-vs-term-i", pair_worst, 1e-6));
    properties.push(check("engine-sketch-vs-term-i", sketch_worst, 1e-6));

    // Bound excess over the true restriction error; non-positive when it holds.
    let mut excess = f64::NEG_INFINITY;
    for rv in &val {
        for ri in &train {
            let hat = rv.target_vocab().union(&ri.target_vocab());
            let restricted = score_pairwise(rv, ri, &hat)?;
            let exact = score_pairwise(rv, ri, &full)?;
            let bound = restriction_bound(rv, ri, &hat)?;
            excess = excess.max((restricted - exact).abs() - bound * (1.0 + 1e-9) - 1e-12);
        }
    }
    properties.push(check("restriction-bound", excess.max(0.0), 0.0));

    Ok(VerifyReport { seed, properties })
}
