//! Closed-form log-likelihood ratios and the Bayes-optimal classifier.
//!
//! The oracle sees the true latent task parameters, so it ignores the
//! context entirely and scores the query alone. It is the performance
//! ceiling every trained model is compared against, and its statistic is
//! the ground truth for the regression and lens analyses.

use crate::numerics::Scalar;
use crate::taskgen::{
    generate_episode, sample_params, Episode, TaskFamily, TaskGenError, TaskParams, TaskRng,
};

/// Log-likelihood ratio for the mean-shift family, in natural-log units:
/// `2 d.x - 2 d.k` for unit direction `d` and shift `k`.
pub fn llr_mean_shift<S: Scalar>(x: &[S], direction: &[S], shift: &[S]) -> S {
    debug_assert_eq!(x.len(), direction.len());
    debug_assert_eq!(x.len(), shift.len());
    let mut dot_x = S::zero();
    let mut dot_k = S::zero();
    for i in 0..x.len() {
        dot_x += direction[i] * x[i];
        dot_k += direction[i] * shift[i];
    }
    S::from_lit(2.0) * (dot_x - dot_k)
}

/// Log-likelihood ratio for the variance family:
/// `(d/2) ln(s0^2/s1^2) + (|x|^2/2) (1/s0^2 - 1/s1^2)`.
pub fn llr_variance<S: Scalar>(x: &[S], sigma0: S, sigma1: S) -> S {
    let d = S::from_usize(x.len()).unwrap();
    let half = S::from_lit(0.5);
    let s0 = sigma0 * sigma0;
    let s1 = sigma1 * sigma1;
    let sq_norm = x.iter().fold(S::zero(), |acc, &v| acc + v * v);
    d * half * (s0 / s1).ln() + sq_norm * half * (S::one() / s0 - S::one() / s1)
}

/// LLR of an episode's query under its own latent parameters.
pub fn episode_llr(episode: &Episode) -> f64 {
    query_llr(&episode.params, &episode.query_x)
}

/// LLR of an arbitrary point under the given parameters.
pub fn query_llr(params: &TaskParams, x: &[f64]) -> f64 {
    match params {
        TaskParams::MeanShift(p) => llr_mean_shift(x, &p.direction, &p.shift),
        TaskParams::Variance(p) => llr_variance(x, p.sigma0, p.sigma1),
    }
}

/// Threshold-zero decision. Ties (a measure-zero event) go to class 1.
pub fn bayes_predict(llr: f64) -> u8 {
    if llr >= 0.0 {
        1
    } else {
        0
    }
}

/// Monte Carlo accuracy of the Bayes oracle over fresh episodes, with a
/// binomial-normal 95% confidence half-width.
pub fn oracle_accuracy(
    family: TaskFamily,
    dim: usize,
    shift_scale: f64,
    n_episodes: usize,
    rng: &mut TaskRng,
) -> Result<(f64, f64), TaskGenError> {
    assert!(n_episodes >= 1000, "oracle Monte Carlo needs >= 1000 episodes");
    let mut correct = 0usize;
    for _ in 0..n_episodes {
        let params = sample_params(family, dim, shift_scale, rng)?;
        // The oracle only needs the query; a single-pair episode keeps the
        // draw cheap without touching the statistic.
        let ep = generate_episode(&params, 1, rng)?;
        if bayes_predict(episode_llr(&ep)) == ep.query_y {
            correct += 1;
        }
    }
    let p = correct as f64 / n_episodes as f64;
    let half_width = 1.96 * (p * (1.0 - p) / n_episodes as f64).sqrt();
    Ok((p, half_width))
}
