use std::cmp::Ordering;
use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::center::DistanceMatrix;
use super::mask::KernelIndex;
use super::Criteria;
use crate::error::{invalid, Error, Result};

/// Number of kernels pruned at portion `p` out of `total`.
pub fn prune_count(p: f64, total: usize) -> usize {
    ((p * total as f64).round() as usize).min(total)
}

/// Orders flat kernel positions by distance (ascending, or descending when
/// `farthest`), ties by ascending flat index, i.e. by `(n, m)`.
fn ranking(values: &[f64], farthest: bool) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| {
        let by_distance = values[a].total_cmp(&values[b]);
        let by_distance = if farthest { by_distance.reverse() } else { by_distance };
        by_distance.then(a.cmp(&b))
    }
}

/// Picks `count` kernels of one layer: the nearest to the center, or the
/// farthest when `farthest` is set. Returned as ascending flat indices.
///
/// With `keep_one_per_filter`, a kernel is skipped when taking it would
/// leave its output channel with no kernel; fewer than `count` kernels may
/// then be returned.
pub fn select_layer(distances: &DistanceMatrix, count: usize, farthest: bool, keep_one_per_filter: bool) -> Vec<usize> {
    let n = distances.len();
    let count = count.min(n);
    if count == 0 {
        return Vec::new();
    }
    let cmp = ranking(&distances.values, farthest);
    let mut order: Vec<usize> = (0..n).collect();
    let mut picked = if keep_one_per_filter {
        order.sort_unstable_by(&cmp);
        let mut left = vec![distances.in_channels; distances.out_channels];
        let mut picked = Vec::with_capacity(count);
        for flat in order {
            if picked.len() == count {
                break;
            }
            let filter = flat / distances.in_channels;
            if left[filter] > 1 {
                left[filter] -= 1;
                picked.push(flat);
            }
        }
        picked
    } else {
        if count < n {
            order.select_nth_unstable_by(count - 1, &cmp);
        }
        order.truncate(count);
        order
    };
    picked.sort_unstable();
    picked
}

/// Kernels to prune in each layer at portion `p`.
///
/// Every layer contributes `round(p * C_in * C_out)` kernels: the nearest
/// to its cluster center, or the farthest for layers in
/// `adversarial_layers` when `criteria` is [`Criteria::Adversarial`].
pub fn select_prune_set(
    distances: &[(usize, DistanceMatrix)],
    p: f64,
    criteria: Criteria,
    adversarial_layers: &BTreeSet<usize>,
    keep_one_per_filter: bool,
) -> Result<Vec<Vec<KernelIndex>>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(invalid!("portion {p} outside [0, 1]"));
    }
    distances
        .iter()
        .map(|(layer, d)| {
            if d.values.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("distances of layer {layer}")));
            }
            let farthest = criteria == Criteria::Adversarial && adversarial_layers.contains(layer);
            let picked = select_layer(d, prune_count(p, d.len()), farthest, keep_one_per_filter);
            Ok(picked
                .into_iter()
                .map(|flat| KernelIndex {
                    layer: *layer,
                    out_channel: flat / d.in_channels,
                    in_channel: flat % d.in_channels,
                })
                .collect())
        })
        .collect()
}

/// Seeded choice of `ceil(fraction * eligible.len())` layers for the
/// adversarial criterion.
///
/// Layers are taken from the front of one seeded permutation, so for a
/// fixed seed a smaller fraction always designates a subset of a larger one.
pub fn designate_adversarial_layers(eligible: &[usize], fraction: f64, seed: u64) -> Result<BTreeSet<usize>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(invalid!("adversarial layer fraction {fraction} outside [0, 1]"));
    }
    // tolerate representation error such as 0.3 * 10 = 3.0000000000000004
    let count = ((fraction * eligible.len() as f64) - 1e-9).ceil().max(0.0) as usize;
    let mut order = eligible.to_vec();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(order.into_iter().take(count).collect())
}
