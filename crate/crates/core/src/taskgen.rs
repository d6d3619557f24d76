//! Episode generation for the two discrimination task families, plus the
//! context corruptions used by the data ablations.
//!
//! Sampling is driven by a counter-based stream RNG: (seed, stream) fully
//! determines every draw, so episode i of any run can be regenerated in
//! isolation and batches can be produced out of order.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Input dimensionality shared by both task families.
pub const INPUT_DIM: usize = 16;

/// Stream-id bases that keep independent consumers of one seed apart.
/// Episode index i of a purpose lives at `BASE + i`.
pub mod streams {
    pub const TRAIN: u64 = 0;
    pub const VALIDATION: u64 = 1 << 56;
    pub const EPOCH_VAL: u64 = 2 << 56;
    pub const ANALYSIS: u64 = 3 << 56;
    pub const ORACLE: u64 = 4 << 56;
}

#[derive(Debug, Error)]
pub enum TaskGenError {
    #[error("shift scale must be positive, got {0}")]
    NonPositiveShiftScale(f64),
    #[error("context size must be at least 1")]
    EmptyContext,
    #[error("label flip probability {0} outside [0, 1]")]
    InvalidFlipProbability(f64),
}

/// Counter-based deterministic RNG stream.
///
/// Streams with the same seed but different stream ids are independent;
/// identical (seed, stream, call sequence) reproduces identical draws.
#[derive(Debug, Clone)]
pub struct TaskRng {
    inner: ChaCha8Rng,
}

impl TaskRng {
    pub fn new(seed: u64) -> Self {
        Self {
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Split off an independent stream of the same seed.
    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        Self { inner }
    }

    pub fn normal(&mut self) -> f64 {
        self.inner.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.inner.gen_range(lo..=hi)
    }

    pub fn coin(&mut self) -> bool {
        self.inner.gen_bool(0.5)
    }
}

impl RngCore for TaskRng {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }
    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }
    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }
    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}

/// Which discrimination family an episode comes from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskFamily {
    /// Classes are unit-separated Gaussians around a random nuisance shift;
    /// the optimal statistic is an affine projection.
    MeanShift,
    /// Classes are centered Gaussians with different scales; the optimal
    /// statistic is quadratic in the input norm.
    Variance,
}

/// Latent parameters of a mean-shift episode.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeanShiftParams {
    /// Unit discriminative direction.
    pub direction: Vec<f64>,
    /// Nuisance shift common to both classes.
    pub shift: Vec<f64>,
}

/// Latent parameters of a variance episode.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VarianceParams {
    pub sigma0: f64,
    pub sigma1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum TaskParams {
    MeanShift(MeanShiftParams),
    Variance(VarianceParams),
}

impl TaskParams {
    pub fn family(&self) -> TaskFamily {
        match self {
            TaskParams::MeanShift(_) => TaskFamily::MeanShift,
            TaskParams::Variance(_) => TaskFamily::Variance,
        }
    }
}

/// One task instance: labelled context pairs plus a held-out query.
///
/// Serializes to a flat JSON record (one line per episode in JSONL fixtures).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub dim: usize,
    /// Context inputs, row-major `[n_context, dim]`.
    pub context_x: Vec<f64>,
    pub context_y: Vec<u8>,
    pub query_x: Vec<f64>,
    pub query_y: u8,
    /// When set, context labels are treated as absent downstream (the model
    /// embeds zero for them). Labels are kept for evaluation bookkeeping.
    pub labels_masked: bool,
    pub params: TaskParams,
}

impl Episode {
    pub fn n_context(&self) -> usize {
        self.context_y.len()
    }

    pub fn context_row(&self, i: usize) -> &[f64] {
        &self.context_x[i * self.dim..(i + 1) * self.dim]
    }
}

/// Context corruptions for the data-structure ablations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum Corruption {
    /// Permute context labels independently of the inputs.
    ShuffledLabels,
    /// Mark context labels absent; the model embeds zero for them.
    NoLabels,
    /// Flip each context label independently with probability `p`.
    NoisyLabels { p: f64 },
    /// Permute (x, y) pairs jointly; the multiset of pairs is unchanged.
    ShuffledContext,
}

/// Draw mean-shift parameters: a uniformly random unit direction and an
/// isotropic Gaussian shift with scale `shift_scale` per coordinate.
pub fn sample_mean_shift(
    rng: &mut TaskRng,
    dim: usize,
    shift_scale: f64,
) -> Result<MeanShiftParams, TaskGenError> {
    if shift_scale <= 0.0 {
        return Err(TaskGenError::NonPositiveShiftScale(shift_scale));
    }
    let mut direction: Vec<f64> = (0..dim).map(|_| rng.normal()).collect();
    let norm = direction.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in &mut direction {
        *v /= norm;
    }
    let shift = (0..dim).map(|_| rng.normal() * shift_scale).collect();
    Ok(MeanShiftParams { direction, shift })
}

/// Draw variance parameters: both scales i.i.d. uniform on [0.5, 3.0].
pub fn sample_variance(rng: &mut TaskRng) -> VarianceParams {
    VarianceParams {
        sigma0: rng.uniform(0.5, 3.0),
        sigma1: rng.uniform(0.5, 3.0),
    }
}

/// Sample fresh task parameters for a family at the given shift scale.
pub fn sample_params(
    family: TaskFamily,
    dim: usize,
    shift_scale: f64,
    rng: &mut TaskRng,
) -> Result<TaskParams, TaskGenError> {
    Ok(match family {
        TaskFamily::MeanShift => TaskParams::MeanShift(sample_mean_shift(rng, dim, shift_scale)?),
        TaskFamily::Variance => TaskParams::Variance(sample_variance(rng)),
    })
}

/// Generate an episode: `n_context` labelled pairs plus one query, all with
/// balanced labels and class-conditional Gaussian inputs.
pub fn generate_episode(
    params: &TaskParams,
    n_context: usize,
    rng: &mut TaskRng,
) -> Result<Episode, TaskGenError> {
    if n_context < 1 {
        return Err(TaskGenError::EmptyContext);
    }
    let dim = match params {
        TaskParams::MeanShift(p) => p.direction.len(),
        TaskParams::Variance(_) => INPUT_DIM,
    };
    let mut context_x = Vec::with_capacity(n_context * dim);
    let mut context_y = Vec::with_capacity(n_context);
    for _ in 0..n_context {
        let y = rng.coin() as u8;
        draw_input(params, dim, y, rng, &mut context_x);
        context_y.push(y);
    }
    let query_y = rng.coin() as u8;
    let mut query_x = Vec::with_capacity(dim);
    draw_input(params, dim, query_y, rng, &mut query_x);
    Ok(Episode {
        dim,
        context_x,
        context_y,
        query_x,
        query_y,
        labels_masked: false,
        params: params.clone(),
    })
}

fn draw_input(params: &TaskParams, dim: usize, y: u8, rng: &mut TaskRng, out: &mut Vec<f64>) {
    match params {
        TaskParams::MeanShift(p) => {
            let sign = 2.0 * y as f64 - 1.0;
            for j in 0..dim {
                out.push(p.shift[j] + sign * p.direction[j] + rng.normal());
            }
        }
        TaskParams::Variance(p) => {
            let sigma = if y == 1 { p.sigma1 } else { p.sigma0 };
            for _ in 0..dim {
                out.push(sigma * rng.normal());
            }
        }
    }
}

/// A fully specified episode distribution: family, dimensions, shift scale,
/// context size, and an optional corruption applied to every episode.
///
/// `sample_at` derives the episode's RNG from (seed, stream + index), so any
/// episode of a run can be regenerated in isolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeSource {
    pub family: TaskFamily,
    pub dim: usize,
    pub shift_scale: f64,
    pub n_context: usize,
    pub corruption: Option<Corruption>,
}

impl EpisodeSource {
    pub fn new(family: TaskFamily, n_context: usize) -> Self {
        Self {
            family,
            dim: INPUT_DIM,
            shift_scale: 3.0,
            n_context,
            corruption: None,
        }
    }

    pub fn with_shift_scale(mut self, shift_scale: f64) -> Self {
        self.shift_scale = shift_scale;
        self
    }

    pub fn with_corruption(mut self, corruption: Option<Corruption>) -> Self {
        self.corruption = corruption;
        self
    }

    /// Sample episode `index` of the given (seed, stream-base) lane.
    pub fn sample_at(&self, seed: u64, stream_base: u64, index: u64) -> Result<Episode, TaskGenError> {
        let mut rng = TaskRng::stream(seed, stream_base + index);
        let params = sample_params(self.family, self.dim, self.shift_scale, &mut rng)?;
        let episode = generate_episode(&params, self.n_context, &mut rng)?;
        match self.corruption {
            Some(mode) => corrupt(&episode, mode, &mut rng),
            None => Ok(episode),
        }
    }

    /// Sample a contiguous batch `[first, first + count)` of a lane.
    pub fn sample_batch(
        &self,
        seed: u64,
        stream_base: u64,
        first: u64,
        count: usize,
    ) -> Result<Vec<Episode>, TaskGenError> {
        (0..count as u64)
            .map(|j| self.sample_at(seed, stream_base, first + j))
            .collect()
    }
}

/// Apply a corruption to an episode's context. The query is never touched.
pub fn corrupt(
    episode: &Episode,
    mode: Corruption,
    rng: &mut TaskRng,
) -> Result<Episode, TaskGenError> {
    let mut out = episode.clone();
    match mode {
        Corruption::ShuffledLabels => {
            let n = out.context_y.len();
            for i in (1..n).rev() {
                let j = rng.inner.gen_range(0..=i);
                out.context_y.swap(i, j);
            }
        }
        Corruption::NoLabels => {
            out.labels_masked = true;
        }
        Corruption::NoisyLabels { p } => {
            if !(0.0..=1.0).contains(&p) {
                return Err(TaskGenError::InvalidFlipProbability(p));
            }
            for y in &mut out.context_y {
                if rng.inner.gen_bool(p) {
                    *y ^= 1;
                }
            }
        }
        Corruption::ShuffledContext => {
            let n = out.context_y.len();
            let dim = out.dim;
            for i in (1..n).rev() {
                let j = rng.inner.gen_range(0..=i);
                out.context_y.swap(i, j);
                for d in 0..dim {
                    out.context_x.swap(i * dim + d, j * dim + d);
                }
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn direction_is_unit_and_deterministic() {
        for seed in [0u64, 1, 42, 999] {
            let mut rng = TaskRng::new(seed);
            let p = sample_mean_shift(&mut rng, INPUT_DIM, 3.0).unwrap();
            let norm: f64 = p.direction.iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((norm - 1.0).abs() < 1e-10, "norm {norm} at seed {seed}");
        }
        let a = sample_mean_shift(&mut TaskRng::new(7), INPUT_DIM, 3.0).unwrap();
        let b = sample_mean_shift(&mut TaskRng::new(7), INPUT_DIM, 3.0).unwrap();
        assert_eq!(a, b, "same seed must reproduce identical params");
    }

    #[test]
    fn shift_scale_must_be_positive() {
        let mut rng = TaskRng::new(0);
        assert!(sample_mean_shift(&mut rng, INPUT_DIM, 0.0).is_err());
        assert!(sample_mean_shift(&mut rng, INPUT_DIM, -1.0).is_err());
    }

    #[test]
    fn shift_variance_monte_carlo() {
        // Per-coordinate variance of the shift should be shift_scale^2 = 9.
        let mut rng = TaskRng::new(3);
        let n = 10_000;
        let mut sums = vec![0.0; INPUT_DIM];
        let mut sq_sums = vec![0.0; INPUT_DIM];
        for _ in 0..n {
            let p = sample_mean_shift(&mut rng, INPUT_DIM, 3.0).unwrap();
            for (j, &v) in p.shift.iter().enumerate() {
                sums[j] += v;
                sq_sums[j] += v * v;
            }
        }
        for j in 0..INPUT_DIM {
            let mean = sums[j] / n as f64;
            let var = sq_sums[j] / n as f64 - mean * mean;
            assert!((var - 9.0).abs() < 0.6, "coordinate {j} variance {var}");
        }
    }

    #[test]
    fn variance_params_support_and_mean() {
        let mut rng = TaskRng::new(5);
        let n = 10_000;
        let mut sum0 = 0.0;
        for _ in 0..n {
            let p = sample_variance(&mut rng);
            assert!((0.5..=3.0).contains(&p.sigma0));
            assert!((0.5..=3.0).contains(&p.sigma1));
            sum0 += p.sigma0;
        }
        let mean = sum0 / n as f64;
        assert!((mean - 1.75).abs() < 0.03, "sigma0 mean {mean}");
        let a = sample_variance(&mut TaskRng::new(9));
        let b = sample_variance(&mut TaskRng::new(9));
        assert_eq!(a, b);
    }

    #[test]
    fn episode_class_conditional_means() {
        // With direction = e1 and zero shift, class-1 inputs average +1 on
        // the first coordinate.
        let mut direction = vec![0.0; INPUT_DIM];
        direction[0] = 1.0;
        let params = TaskParams::MeanShift(MeanShiftParams {
            direction,
            shift: vec![0.0; INPUT_DIM],
        });
        let mut rng = TaskRng::new(11);
        let mut sum = 0.0;
        let mut count = 0usize;
        for _ in 0..10_000 {
            let ep = generate_episode(&params, 1, &mut rng).unwrap();
            if ep.query_y == 1 {
                sum += ep.query_x[0];
                count += 1;
            }
        }
        let mean = sum / count as f64;
        assert!((mean - 1.0).abs() < 0.05, "class-1 mean {mean}");
    }

    #[test]
    fn label_balance() {
        let params = TaskParams::Variance(VarianceParams {
            sigma0: 1.0,
            sigma1: 2.0,
        });
        let mut rng = TaskRng::new(13);
        let mut ones = 0usize;
        let n = 100_000;
        for _ in 0..n {
            let ep = generate_episode(&params, 1, &mut rng).unwrap();
            ones += ep.query_y as usize;
        }
        let frac = ones as f64 / n as f64;
        assert!((frac - 0.5).abs() < 0.005, "label fraction {frac}");
    }

    #[test]
    fn variance_family_squared_norm() {
        // Within a class the mean squared norm converges to dim * sigma^2.
        let params = TaskParams::Variance(VarianceParams {
            sigma0: 0.8,
            sigma1: 2.5,
        });
        let mut rng = TaskRng::new(17);
        let mut sums = [0.0f64; 2];
        let mut counts = [0usize; 2];
        for _ in 0..10_000 {
            let ep = generate_episode(&params, 1, &mut rng).unwrap();
            let sq: f64 = ep.query_x.iter().map(|v| v * v).sum();
            sums[ep.query_y as usize] += sq;
            counts[ep.query_y as usize] += 1;
        }
        for (y, sigma) in [(0usize, 0.8f64), (1, 2.5)] {
            let mean = sums[y] / counts[y] as f64;
            let expect = INPUT_DIM as f64 * sigma * sigma;
            assert!(
                (mean - expect).abs() / expect < 0.02,
                "class {y}: mean {mean} vs {expect}"
            );
        }
    }

    #[test]
    fn stream_split_is_independent_of_call_order() {
        let params = TaskParams::Variance(VarianceParams {
            sigma0: 1.0,
            sigma1: 1.5,
        });
        let ep5_first = generate_episode(&params, 8, &mut TaskRng::stream(21, 5)).unwrap();
        // Generate some other streams in between; stream 5 must not care.
        for s in 0..5 {
            let _ = generate_episode(&params, 8, &mut TaskRng::stream(21, s)).unwrap();
        }
        let ep5_again = generate_episode(&params, 8, &mut TaskRng::stream(21, 5)).unwrap();
        assert_eq!(ep5_first, ep5_again);
    }

    fn toy_episode() -> Episode {
        let params = TaskParams::Variance(VarianceParams {
            sigma0: 1.0,
            sigma1: 2.0,
        });
        generate_episode(&params, 16, &mut TaskRng::new(23)).unwrap()
    }

    #[test]
    fn corrupt_noisy_identity_and_complement() {
        let ep = toy_episode();
        let same = corrupt(&ep, Corruption::NoisyLabels { p: 0.0 }, &mut TaskRng::new(1)).unwrap();
        assert_eq!(same, ep);
        let flipped =
            corrupt(&ep, Corruption::NoisyLabels { p: 1.0 }, &mut TaskRng::new(1)).unwrap();
        for (a, b) in ep.context_y.iter().zip(&flipped.context_y) {
            assert_eq!(*a ^ 1, *b);
        }
        assert!(corrupt(&ep, Corruption::NoisyLabels { p: 1.5 }, &mut TaskRng::new(1)).is_err());
    }

    #[test]
    fn corrupt_shuffled_context_preserves_pairs() {
        let ep = toy_episode();
        let shuffled = corrupt(&ep, Corruption::ShuffledContext, &mut TaskRng::new(2)).unwrap();
        let mut pairs: Vec<(Vec<u64>, u8)> = (0..ep.n_context())
            .map(|i| {
                (
                    ep.context_row(i).iter().map(|v| v.to_bits()).collect(),
                    ep.context_y[i],
                )
            })
            .collect();
        let mut shuffled_pairs: Vec<(Vec<u64>, u8)> = (0..shuffled.n_context())
            .map(|i| {
                (
                    shuffled.context_row(i).iter().map(|v| v.to_bits()).collect(),
                    shuffled.context_y[i],
                )
            })
            .collect();
        pairs.sort();
        shuffled_pairs.sort();
        assert_eq!(pairs, shuffled_pairs, "pair multiset must be unchanged");
        assert_eq!(shuffled.query_x, ep.query_x);
    }

    #[test]
    fn corrupt_no_labels_sets_mask_only() {
        let ep = toy_episode();
        let masked = corrupt(&ep, Corruption::NoLabels, &mut TaskRng::new(3)).unwrap();
        assert!(masked.labels_masked);
        assert_eq!(masked.context_x, ep.context_x);
        assert_eq!(masked.context_y, ep.context_y);
    }

    #[test]
    fn episode_jsonl_round_trip() {
        let ep = toy_episode();
        let line = serde_json::to_string(&ep).unwrap();
        assert!(!line.contains('\n'), "episode must fit one JSONL line");
        let back: Episode = serde_json::from_str(&line).unwrap();
        assert_eq!(back, ep);
    }
}
