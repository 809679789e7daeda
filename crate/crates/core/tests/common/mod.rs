//! Independent oracles for the acceptance suite: finite differences and
//! brute-force metric recomputations that share no code with the library
//! paths they check.

use std::collections::HashSet;

use fediod::metrics::{BinaryMask, InstanceMap};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Central finite difference with step `h`.
pub fn finite_diff(f: &mut dyn FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut grad = vec![0.0; x.len()];
    let mut xp = x.to_vec();
    for i in 0..x.len() {
        xp[i] = x[i] + h;
        let up = f(&xp);
        xp[i] = x[i] - h;
        let down = f(&xp);
        xp[i] = x[i];
        grad[i] = (up - down) / (2.0 * h);
    }
    grad
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

pub fn max_rel_err(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| rel_err(*x, *y)).fold(0.0, f64::max)
}

fn fg_set(m: &BinaryMask) -> HashSet<(usize, usize)> {
    let mut s = HashSet::new();
    for y in 0..m.height {
        for x in 0..m.width {
            if m.bits[y * m.width + x] {
                s.insert((y, x));
            }
        }
    }
    s
}

pub fn dice_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (sa, sb) = (fg_set(a), fg_set(b));
    if sa.is_empty() && sb.is_empty() {
        return 1.0;
    }
    2.0 * sa.intersection(&sb).count() as f64 / (sa.len() + sb.len()) as f64
}

pub fn sens_spec_oracle(y: &BinaryMask, yhat: &BinaryMask) -> (f64, f64) {
    let (sy, sp) = (fg_set(y), fg_set(yhat));
    let total = y.height * y.width;
    let pos = sy.len();
    let neg = total - pos;
    let tp = sy.intersection(&sp).count();
    let fp = sp.len() - tp;
    let tn = neg - fp;
    let sens = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
    let spec = if neg == 0 { 1.0 } else { tn as f64 / neg as f64 };
    (sens, spec)
}

fn boundary_set(m: &BinaryMask) -> Vec<(usize, usize)> {
    let s = fg_set(m);
    let mut out: Vec<(usize, usize)> = s
        .iter()
        .filter(|&&(y, x)| {
            let neighbors = [
                (y.wrapping_sub(1), x),
                (y + 1, x),
                (y, x.wrapping_sub(1)),
                (y, x + 1),
            ];
            neighbors.iter().any(|&(ny, nx)| {
                ny >= m.height || nx >= m.width || !s.contains(&(ny, nx))
            })
        })
        .copied()
        .collect();
    out.sort_unstable();
    out
}

fn percentile_interp(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        xs[lo]
    } else {
        xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
    }
}

pub fn hd95_oracle(a: &BinaryMask, b: &BinaryMask) -> f64 {
    let (ba, bb) = (boundary_set(a), boundary_set(b));
    let directed = |from: &[(usize, usize)], to: &[(usize, usize)]| -> Vec<f64> {
        from.iter()
            .map(|&(y, x)| {
                to.iter()
                    .map(|&(ty, tx)| {
                        let dy = y as f64 - ty as f64;
                        let dx = x as f64 - tx as f64;
                        (dy * dy + dx * dx).sqrt()
                    })
                    .fold(f64::INFINITY, f64::min)
            })
            .collect()
    };
    let fwd = percentile_interp(directed(&ba, &bb), 0.95);
    let back = percentile_interp(directed(&bb, &ba), 0.95);
    fwd.max(back)
}

fn instance_sets(m: &InstanceMap) -> Vec<HashSet<usize>> {
    let mut sets = vec![HashSet::new(); m.n_instances];
    for (i, &id) in m.ids.iter().enumerate() {
        if id > 0 {
            sets[id as usize - 1].insert(i);
        }
    }
    sets
}

pub fn aji_oracle(y: &InstanceMap, yhat: &InstanceMap) -> f64 {
    let gt = instance_sets(y);
    let pred = instance_sets(yhat);
    if gt.is_empty() && pred.is_empty() {
        return 1.0;
    }
    let mut used = vec![false; pred.len()];
    let mut num = 0.0;
    let mut den = 0.0;
    for gset in &gt {
        let mut best: Option<(usize, f64)> = None;
        for (j, pset) in pred.iter().enumerate() {
            if used[j] {
                continue;
            }
            let inter = gset.intersection(pset).count();
            if inter == 0 {
                continue;
            }
            let jac = inter as f64 / gset.union(pset).count() as f64;
            if best.is_none_or(|(_, b)| jac > b) {
                best = Some((j, jac));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                num += gset.intersection(&pred[j]).count() as f64;
                den += gset.union(&pred[j]).count() as f64;
            }
            None => den += gset.len() as f64,
        }
    }
    for (j, pset) in pred.iter().enumerate() {
        if !used[j] {
            den += pset.len() as f64;
        }
    }
    if den == 0.0 {
        1.0
    } else {
        num / den
    }
}

pub fn object_dice_oracle(y: &InstanceMap, yhat: &InstanceMap) -> f64 {
    let gt = instance_sets(y);
    let pred = instance_sets(yhat);
    if gt.is_empty() && pred.is_empty() {
        return 1.0;
    }
    if gt.is_empty() || pred.is_empty() {
        return 0.0;
    }
    let one_side = |from: &[HashSet<usize>], to: &[HashSet<usize>]| -> f64 {
        let total: usize = from.iter().map(HashSet::len).sum();
        let mut acc = 0.0;
        for fset in from {
            let mut best_jac = 0.0;
            let mut best_dice = 0.0;
            for tset in to {
                let inter = fset.intersection(tset).count();
                if inter == 0 {
                    continue;
                }
                let jac = inter as f64 / fset.union(tset).count() as f64;
                if jac > best_jac {
                    best_jac = jac;
                    best_dice = 2.0 * inter as f64 / (fset.len() + tset.len()) as f64;
                }
            }
            acc += fset.len() as f64 / total as f64 * best_dice;
        }
        acc
    };
    0.5 * (one_side(&gt, &pred) + one_side(&pred, &gt))
}

/// Inception-score recomputation with explicit double loops over teacher
/// probability rows.
pub fn adapted_is_oracle(per_teacher_probs: &[Vec<Vec<f64>>], pi: &[f64]) -> f64 {
    let mut total = 0.0;
    for (probs, &w) in per_teacher_probs.iter().zip(pi) {
        let n = probs.len() as f64;
        let classes = probs[0].len();
        let mut marginal = vec![0.0; classes];
        for q in probs {
            for c in 0..classes {
                marginal[c] += q[c] / n;
            }
        }
        let mut kl_sum = 0.0;
        for q in probs {
            for c in 0..classes {
                if q[c] > 0.0 {
                    kl_sum += q[c] * (q[c] / marginal[c]).ln();
                }
            }
        }
        total += w * (kl_sum / n).exp();
    }
    total
}

pub fn random_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    let bits: Vec<bool> = (0..h * w).map(|_| rng.random_bool(density)).collect();
    BinaryMask::new(h, w, bits).unwrap()
}

/// Mask with at least one foreground pixel.
pub fn random_nonempty_mask(rng: &mut ChaCha8Rng, h: usize, w: usize, density: f64) -> BinaryMask {
    loop {
        let m = random_mask(rng, h, w, density);
        if m.foreground() > 0 {
            return m;
        }
    }
}

/// Stamps up to `max_instances` random rectangles (later stamps overwrite
/// earlier ones) and renumbers surviving labels contiguously.
pub fn random_instance_map(rng: &mut ChaCha8Rng, h: usize, w: usize, max_instances: usize) -> InstanceMap {
    let mut grid = vec![0u32; h * w];
    let n = rng.random_range(0..=max_instances);
    for id in 1..=n {
        let y0 = rng.random_range(0..h);
        let x0 = rng.random_range(0..w);
        let dy = rng.random_range(1..=4.min(h - y0));
        let dx = rng.random_range(1..=4.min(w - x0));
        for y in y0..y0 + dy {
            for x in x0..x0 + dx {
                grid[y * w + x] = id as u32;
            }
        }
    }
    let mut distinct: Vec<u32> = grid.iter().copied().filter(|&v| v > 0).collect();
    distinct.sort_unstable();
    distinct.dedup();
    let remapped: Vec<u32> = grid
        .into_iter()
        .map(|v| if v == 0 { 0 } else { distinct.binary_search(&v).unwrap() as u32 + 1 })
        .collect();
    InstanceMap::new(h, w, remapped).unwrap()
}

pub fn seeded(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}
