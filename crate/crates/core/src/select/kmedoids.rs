use rand::Rng as _;

use crate::rng::{seeded, Rng};
use crate::scalar::Real;

use super::SelectError;

/// Shared cap on alternation and swap passes.
pub const MAX_ITER: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusteringResult<T = f64> {
    /// Indices into the input point list.
    pub medoid_indices: Vec<usize>,
    pub medoids: Vec<[T; 2]>,
    /// Sum of distances from every point to its nearest medoid.
    pub inertia: T,
    pub k: usize,
    /// Inertia after initialization and after every accepted move.
    pub trace: Vec<T>,
    pub iterations: usize,
}

#[inline]
fn dist<T: Real>(a: [T; 2], b: [T; 2]) -> T {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    (dx * dx + dy * dy).sqrt()
}

fn total_cost<T: Real>(points: &[[T; 2]], meds: &[usize]) -> T {
    points
        .iter()
        .map(|&p| {
            meds.iter()
                .map(|&m| dist(p, points[m]))
                .fold(T::infinity(), T::min)
        })
        .sum()
}

fn tolerance<T: Real>(cost: T, n: usize) -> T {
    T::epsilon() * T::from_count(4 * n) * cost.max(T::one())
}

/// k-medoids++ seeding: the first medoid uniformly, each next one with
/// probability proportional to the squared distance to the chosen set.
pub fn init_plus_plus<T: Real>(points: &[[T; 2]], k: usize, rng: &mut Rng) -> Vec<usize> {
    let n = points.len();
    let mut meds = vec![rng.random_range(0..n)];
    let mut dmin: Vec<f64> = points
        .iter()
        .map(|&p| dist(p, points[meds[0]]).as_f64())
        .collect();
    while meds.len() < k.min(n) {
        let weights: Vec<f64> = dmin.iter().map(|d| d * d).collect();
        let total: f64 = weights.iter().sum();
        let pick = if total > 0.0 {
            let r = rng.random::<f64>() * total;
            let mut acc = 0.0;
            let mut chosen = None;
            for (i, w) in weights.iter().enumerate() {
                acc += w;
                if *w > 0.0 && acc > r {
                    chosen = Some(i);
                    break;
                }
            }
            // rounding can leave r at the very top of the range
            chosen.unwrap_or_else(|| weights.iter().rposition(|w| *w > 0.0).unwrap())
        } else {
            let free: Vec<usize> = (0..n).filter(|i| !meds.contains(i)).collect();
            free[rng.random_range(0..free.len())]
        };
        meds.push(pick);
        for (i, &p) in points.iter().enumerate() {
            let d = dist(p, points[pick]).as_f64();
            if d < dmin[i] {
                dmin[i] = d;
            }
        }
    }
    meds
}

/// Nearest medoid slot, distance to it, and distance to the second nearest.
fn nearest_cache<T: Real>(points: &[[T; 2]], meds: &[usize]) -> (Vec<usize>, Vec<T>, Vec<T>) {
    let n = points.len();
    let mut near = vec![0; n];
    let mut dn = vec![T::infinity(); n];
    let mut ds = vec![T::infinity(); n];
    for (i, &p) in points.iter().enumerate() {
        for (j, &m) in meds.iter().enumerate() {
            let d = dist(p, points[m]);
            if d < dn[i] {
                ds[i] = dn[i];
                dn[i] = d;
                near[i] = j;
            } else if d < ds[i] {
                ds[i] = d;
            }
        }
    }
    (near, dn, ds)
}

/// Assign-then-recenter until the medoids stop improving.
fn alternate<T: Real>(
    points: &[[T; 2]],
    meds: &mut [usize],
    cost: &mut T,
    trace: &mut Vec<T>,
    iterations: &mut usize,
) {
    let k = meds.len();
    while *iterations < MAX_ITER {
        let (near, _, _) = nearest_cache(points, meds);
        let mut members: Vec<Vec<usize>> = vec![Vec::new(); k];
        for (i, &c) in near.iter().enumerate() {
            members[c].push(i);
        }
        let mut next = meds.to_vec();
        for (c, mem) in members.iter().enumerate() {
            let spread =
                |cand: usize| -> T { mem.iter().map(|&o| dist(points[o], points[cand])).sum() };
            let mut best = meds[c];
            let mut best_cost = spread(best);
            for &cand in mem {
                let s = spread(cand);
                if s < best_cost {
                    best = cand;
                    best_cost = s;
                }
            }
            next[c] = best;
        }
        let new_cost = total_cost(points, &next);
        if new_cost < *cost - tolerance(*cost, points.len()) {
            meds.copy_from_slice(&next);
            *cost = new_cost;
            trace.push(new_cost);
            *iterations += 1;
        } else {
            break;
        }
    }
}

/// Greedy first-improvement swaps, evaluating all medoid removals for a
/// candidate in one O(n) sweep from the nearest/second-nearest cache.
fn swap_phase<T: Real>(
    points: &[[T; 2]],
    meds: &mut [usize],
    cost: &mut T,
    trace: &mut Vec<T>,
    iterations: &mut usize,
) {
    let n = points.len();
    let k = meds.len();
    let mut is_med = vec![false; n];
    for &m in meds.iter() {
        is_med[m] = true;
    }
    let (mut near, mut dn, mut ds) = nearest_cache(points, meds);
    let mut delta = vec![T::zero(); k];
    while *iterations < MAX_ITER {
        *iterations += 1;
        let mut improved = false;
        for c in 0..n {
            if is_med[c] {
                continue;
            }
            delta.iter_mut().for_each(|d| *d = T::zero());
            let mut shared = T::zero();
            for o in 0..n {
                let doc = dist(points[o], points[c]);
                let j = near[o];
                let keep = (doc - dn[o]).min(T::zero());
                shared = shared + keep;
                delta[j] = delta[j] + (ds[o].min(doc) - dn[o]) - keep;
            }
            let (j, best) = delta
                .iter()
                .enumerate()
                .map(|(j, &d)| (j, d + shared))
                .fold(
                    (0, T::infinity()),
                    |acc, x| if x.1 < acc.1 { x } else { acc },
                );
            if best < -tolerance(*cost, n) {
                is_med[meds[j]] = false;
                is_med[c] = true;
                meds[j] = c;
                (near, dn, ds) = nearest_cache(points, meds);
                *cost = dn.iter().copied().sum();
                trace.push(*cost);
                improved = true;
            }
        }
        if !improved {
            break;
        }
    }
}

/// PAM-style k-medoids with k-medoids++ seeding, deterministic for a seed.
pub fn kmedoids<T: Real>(
    points: &[[T; 2]],
    k: usize,
    seed: u64,
) -> Result<ClusteringResult<T>, SelectError> {
    if points.is_empty() {
        return Err(SelectError::NoForeground);
    }
    if k == 0 {
        return Err(SelectError::ZeroK);
    }
    let n = points.len();
    if n <= k {
        return Ok(ClusteringResult {
            medoid_indices: (0..n).collect(),
            medoids: points.to_vec(),
            inertia: T::zero(),
            k: n,
            trace: vec![T::zero()],
            iterations: 0,
        });
    }
    let mut rng = seeded(seed);
    let mut meds = init_plus_plus(points, k, &mut rng);
    let mut cost = total_cost(points, &meds);
    let mut trace = vec![cost];
    let mut iterations = 0;
    alternate(points, &mut meds, &mut cost, &mut trace, &mut iterations);
    swap_phase(points, &mut meds, &mut cost, &mut trace, &mut iterations);
    Ok(ClusteringResult {
        medoids: meds.iter().map(|&m| points[m]).collect(),
        medoid_indices: meds,
        inertia: cost,
        k,
        trace,
        iterations,
    })
}

/// Exhaustive optimum over all medoid subsets. Exponential; for checking small cases.
pub fn brute_force_inertia<T: Real>(points: &[[T; 2]], k: usize) -> T {
    let n = points.len();
    if n <= k {
        return T::zero();
    }
    let mut best = T::infinity();
    let mut idx: Vec<usize> = (0..k).collect();
    loop {
        best = best.min(total_cost(points, &idx));
        // next combination in lexicographic order
        let mut i = k;
        while i > 0 && idx[i - 1] == n - k + i - 1 {
            i -= 1;
        }
        if i == 0 {
            return best;
        }
        idx[i - 1] += 1;
        for j in i..k {
            idx[j] = idx[j - 1] + 1;
        }
    }
}
