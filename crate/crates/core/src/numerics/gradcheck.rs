//! Finite-difference verification of reverse-mode gradients.

use rand::Rng;

use super::graph::{Graph, ValueId};
use super::scalar::Scalar;
use super::tensor::{NumericsError, Param};

/// Compare analytic gradients against central finite differences.
///
/// `build` reconstructs the scalar loss from the given parameter leaves
/// (registered in `params` order) and is invoked afresh for every probe, so
/// it must be a pure function of the parameter values. For each trainable
/// parameter a random subsample of `samples_per_param` coordinates is
/// probed (all of them when the parameter is smaller), and the maximum
/// relative error `|analytic - cd| / (|analytic| + |cd| + 1e-8)` is
/// returned. Frozen parameters receive no gradient by contract and are
/// skipped.
pub fn grad_check<S, F, R>(
    params: &mut [Param<S>],
    mut build: F,
    eps: S,
    samples_per_param: usize,
    rng: &mut R,
) -> Result<S, NumericsError>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[ValueId]) -> Result<ValueId, NumericsError>,
    R: Rng,
{
    assert!(
        eps >= S::from_lit(1e-6) && eps <= S::from_lit(1e-4),
        "finite-difference step {eps} outside [1e-6, 1e-4]"
    );

    // Analytic gradients from a single reverse pass.
    let mut graph = Graph::new();
    let ids: Vec<ValueId> = params.iter().map(|p| graph.leaf(p)).collect();
    let loss = build(&mut graph, &ids)?;
    graph.backward(loss)?;
    let analytic: Vec<Vec<S>> = params
        .iter()
        .zip(&ids)
        .map(|(p, &id)| match graph.grad(id) {
            Some(g) => g.data().to_vec(),
            None => vec![S::zero(); p.value.numel()],
        })
        .collect();

    let two = S::from_lit(2.0);
    let floor = S::from_lit(1e-8);
    let mut max_rel = S::zero();
    for pi in 0..params.len() {
        if !params[pi].trainable {
            continue;
        }
        let numel = params[pi].value.numel();
        let coords: Vec<usize> = if numel <= samples_per_param {
            (0..numel).collect()
        } else {
            rand::seq::index::sample(rng, numel, samples_per_param).into_vec()
        };
        for c in coords {
            let orig = params[pi].value.data()[c];
            params[pi].value.data_mut()[c] = orig + eps;
            let plus = eval_loss(params, &mut build)?;
            params[pi].value.data_mut()[c] = orig - eps;
            let minus = eval_loss(params, &mut build)?;
            params[pi].value.data_mut()[c] = orig;
            let cd = (plus - minus) / (two * eps);
            let a = analytic[pi][c];
            let rel = (a - cd).abs() / (a.abs() + cd.abs() + floor);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

fn eval_loss<S, F>(params: &[Param<S>], build: &mut F) -> Result<S, NumericsError>
where
    S: Scalar,
    F: FnMut(&mut Graph<S>, &[ValueId]) -> Result<ValueId, NumericsError>,
{
    let mut graph = Graph::new();
    let ids: Vec<ValueId> = params.iter().map(|p| graph.leaf(p)).collect();
    let loss = build(&mut graph, &ids)?;
    Ok(graph.value(loss).item())
}
