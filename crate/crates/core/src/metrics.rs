//! Segmentation and generation-quality metrics as pure functions over masks
//! and instance maps.

use crate::error::{Error, Result};
use crate::nets::Network;
use crate::tensor::{softmax_tau, Tensor};

/// Binary foreground mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BinaryMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl BinaryMask {
    pub fn new(height: usize, width: usize, bits: Vec<bool>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("mask dimensions must be positive".into()));
        }
        if bits.len() != height * width {
            return Err(Error::Shape(format!(
                "mask of {height}x{width} needs {} bits, got {}",
                height * width,
                bits.len()
            )));
        }
        Ok(Self { height, width, bits })
    }

    /// Parses a plain-text grid: optional `#` comment lines, then `height
    /// width`, then `height * width` integers (nonzero = foreground).
    pub fn from_text(text: &str) -> Result<Self> {
        let (h, w, vals) = read_grid(text)?;
        Self::new(h, w, vals.into_iter().map(|v| v != 0).collect())
    }

    pub fn foreground(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    fn at(&self, y: isize, x: isize) -> bool {
        if y < 0 || x < 0 || y as usize >= self.height || x as usize >= self.width {
            return false; // image border counts as background
        }
        self.bits[y as usize * self.width + x as usize]
    }

    /// Foreground pixels with at least one background 4-neighbor.
    pub fn boundary(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for y in 0..self.height {
            for x in 0..self.width {
                if !self.bits[y * self.width + x] {
                    continue;
                }
                let (yi, xi) = (y as isize, x as isize);
                if !self.at(yi - 1, xi) || !self.at(yi + 1, xi) || !self.at(yi, xi - 1) || !self.at(yi, xi + 1) {
                    out.push((y, x));
                }
            }
        }
        out
    }
}

/// Labeled instance map; 0 is background, instances are 1..=n_instances.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InstanceMap {
    pub height: usize,
    pub width: usize,
    pub ids: Vec<u32>,
    pub n_instances: usize,
}

impl InstanceMap {
    pub fn new(height: usize, width: usize, ids: Vec<u32>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::Shape("instance map dimensions must be positive".into()));
        }
        if ids.len() != height * width {
            return Err(Error::Shape(format!(
                "instance map of {height}x{width} needs {} ids, got {}",
                height * width,
                ids.len()
            )));
        }
        let n = ids.iter().copied().max().unwrap_or(0) as usize;
        let mut seen = vec![false; n];
        for &id in &ids {
            if id > 0 {
                seen[id as usize - 1] = true;
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Value(format!(
                "instance id {} occupies no pixel; ids must be contiguous 1..=n",
                missing + 1
            )));
        }
        Ok(Self { height, width, ids, n_instances: n })
    }

    /// Parses a plain-text grid like [`BinaryMask::from_text`]; distinct
    /// positive values are renumbered to contiguous ids in sorted order.
    pub fn from_text(text: &str) -> Result<Self> {
        let (h, w, vals) = read_grid(text)?;
        let mut distinct: Vec<u32> = vals.iter().copied().filter(|&v| v > 0).collect();
        distinct.sort_unstable();
        distinct.dedup();
        let remap = |v: u32| -> u32 {
            if v == 0 {
                0
            } else {
                distinct.binary_search(&v).expect("value is present") as u32 + 1
            }
        };
        Self::new(h, w, vals.into_iter().map(remap).collect())
    }

}

fn read_grid(text: &str) -> Result<(usize, usize, Vec<u32>)> {
    let tokens: Vec<&str> = text
        .lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .collect();
    if tokens.len() < 2 {
        return Err(Error::Format("grid needs a `height width` header".into()));
    }
    let h: usize = tokens[0].parse().map_err(|_| Error::Format(format!("bad height {:?}", tokens[0])))?;
    let w: usize = tokens[1].parse().map_err(|_| Error::Format(format!("bad width {:?}", tokens[1])))?;
    if tokens.len() != 2 + h * w {
        return Err(Error::Format(format!(
            "grid {h}x{w} needs {} entries, got {}",
            h * w,
            tokens.len() - 2
        )));
    }
    let vals = tokens[2..]
        .iter()
        .map(|t| t.parse::<u32>().map_err(|_| Error::Format(format!("bad grid value {t:?}"))))
        .collect::<Result<Vec<u32>>>()?;
    Ok((h, w, vals))
}

fn check_dims(ah: usize, aw: usize, bh: usize, bw: usize) -> Result<()> {
    if ah != bh || aw != bw {
        return Err(Error::Shape(format!("mask dims differ: {ah}x{aw} vs {bh}x{bw}")));
    }
    Ok(())
}

/// Overlap score `2|y ∩ yhat| / (|y| + |yhat|)`; 1.0 when both masks are empty.
pub fn dice(y: &BinaryMask, yhat: &BinaryMask) -> Result<f64> {
    check_dims(y.height, y.width, yhat.height, yhat.width)?;
    let inter = y.bits.iter().zip(&yhat.bits).filter(|(a, b)| **a && **b).count();
    let total = y.foreground() + yhat.foreground();
    if total == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter as f64 / total as f64)
}

/// True positive rate and true negative rate; zero denominators yield 1.0.
pub fn sens_spec(y: &BinaryMask, yhat: &BinaryMask) -> Result<(f64, f64)> {
    check_dims(y.height, y.width, yhat.height, yhat.width)?;
    let mut tp = 0usize;
    let mut tn = 0usize;
    let mut pos = 0usize;
    let mut neg = 0usize;
    for (&a, &b) in y.bits.iter().zip(&yhat.bits) {
        if a {
            pos += 1;
            if b {
                tp += 1;
            }
        } else {
            neg += 1;
            if !b {
                tn += 1;
            }
        }
    }
    let sens = if pos == 0 { 1.0 } else { tp as f64 / pos as f64 };
    let spec = if neg == 0 { 1.0 } else { tn as f64 / neg as f64 };
    Ok((sens, spec))
}

/// Linear-interpolated quantile of an unsorted sample.
fn quantile(mut xs: Vec<f64>, q: f64) -> f64 {
    xs.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = q * (xs.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        xs[lo]
    } else {
        xs[lo] + (pos - lo as f64) * (xs[hi] - xs[lo])
    }
}

fn directed_distances(from: &[(usize, usize)], to: &[(usize, usize)]) -> Vec<f64> {
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
}

/// Symmetric 95th-percentile boundary distance in pixels: per direction the
/// directed boundary-to-boundary distances are pooled and the 95% quantile
/// taken with linear interpolation; the two sides are combined by max.
pub fn hd95(y: &BinaryMask, yhat: &BinaryMask) -> Result<f64> {
    check_dims(y.height, y.width, yhat.height, yhat.width)?;
    let by = y.boundary();
    let byh = yhat.boundary();
    if by.is_empty() || byh.is_empty() {
        return Err(Error::Value("hd95 needs nonempty masks on both sides".into()));
    }
    let fwd = quantile(directed_distances(&by, &byh), 0.95);
    let back = quantile(directed_distances(&byh, &by), 0.95);
    Ok(fwd.max(back))
}

fn intersection_counts(y: &InstanceMap, yhat: &InstanceMap) -> Vec<Vec<usize>> {
    let mut inter = vec![vec![0usize; yhat.n_instances]; y.n_instances];
    for (&a, &b) in y.ids.iter().zip(&yhat.ids) {
        if a > 0 && b > 0 {
            inter[a as usize - 1][b as usize - 1] += 1;
        }
    }
    inter
}

fn instance_sizes(m: &InstanceMap) -> Vec<usize> {
    let mut sizes = vec![0usize; m.n_instances];
    for &id in &m.ids {
        if id > 0 {
            sizes[id as usize - 1] += 1;
        }
    }
    sizes
}

/// Aggregated Jaccard Index. Ground-truth instances are visited in index
/// order and each greedily takes the unused predicted instance of maximum
/// Jaccard overlap (lowest index on ties, only if the intersection is
/// nonempty); predictions left unassigned are added to the denominator.
pub fn aji(y: &InstanceMap, yhat: &InstanceMap) -> Result<f64> {
    check_dims(y.height, y.width, yhat.height, yhat.width)?;
    if y.n_instances == 0 && yhat.n_instances == 0 {
        return Ok(1.0);
    }
    let inter = intersection_counts(y, yhat);
    let ys = instance_sizes(y);
    let ps = instance_sizes(yhat);
    let mut used = vec![false; yhat.n_instances];
    let mut num = 0usize;
    let mut den = 0usize;
    for i in 0..y.n_instances {
        let mut best: Option<(usize, f64)> = None;
        for j in 0..yhat.n_instances {
            if used[j] || inter[i][j] == 0 {
                continue;
            }
            let jac = inter[i][j] as f64 / (ys[i] + ps[j] - inter[i][j]) as f64;
            if best.is_none_or(|(_, b)| jac > b) {
                best = Some((j, jac));
            }
        }
        match best {
            Some((j, _)) => {
                used[j] = true;
                num += inter[i][j];
                den += ys[i] + ps[j] - inter[i][j];
            }
            None => den += ys[i],
        }
    }
    for j in 0..yhat.n_instances {
        if !used[j] {
            den += ps[j];
        }
    }
    if den == 0 {
        return Ok(1.0);
    }
    Ok(num as f64 / den as f64)
}

/// Object-level Dice: each ground-truth instance is scored against its
/// maximum-Jaccard predicted instance and vice versa (reuse allowed), with
/// size-weighted sums averaged over the two directions. Instances with no
/// overlapping counterpart contribute 0.
pub fn object_dice(y: &InstanceMap, yhat: &InstanceMap) -> Result<f64> {
    check_dims(y.height, y.width, yhat.height, yhat.width)?;
    if y.n_instances == 0 && yhat.n_instances == 0 {
        return Ok(1.0);
    }
    if y.n_instances == 0 || yhat.n_instances == 0 {
        return Ok(0.0);
    }
    let inter = intersection_counts(y, yhat);
    let ys = instance_sizes(y);
    let ps = instance_sizes(yhat);
    let y_total: usize = ys.iter().sum();
    let p_total: usize = ps.iter().sum();

    let side = |sizes: &[usize], other_sizes: &[usize], total: usize, row: &dyn Fn(usize, usize) -> usize| -> f64 {
        let mut acc = 0.0;
        for (i, &sz) in sizes.iter().enumerate() {
            let mut best = 0usize;
            let mut best_jac = 0.0;
            for (j, &osz) in other_sizes.iter().enumerate() {
                let ov = row(i, j);
                if ov == 0 {
                    continue;
                }
                let jac = ov as f64 / (sz + osz - ov) as f64;
                if jac > best_jac {
                    best_jac = jac;
                    best = j;
                }
            }
            if best_jac > 0.0 {
                let ov = row(i, best);
                let d = 2.0 * ov as f64 / (sz + other_sizes[best]) as f64;
                acc += sz as f64 / total as f64 * d;
            }
        }
        acc
    };

    let gt_side = side(&ys, &ps, y_total, &|i, j| inter[i][j]);
    let pred_side = side(&ps, &ys, p_total, &|j, i| inter[i][j]);
    Ok(0.5 * (gt_side + pred_side))
}

/// Inception score adapted to the federation: each frozen teacher scores the
/// generated batch with temperature-1 softmax, `IS_k = exp(mean KL(q(x) ||
/// marginal))`, and the per-node scores combine by data-size weight.
pub fn adapted_inception_score(gen_batch: &Tensor, teachers: &[&Network], pi: &[f64]) -> Result<f64> {
    if gen_batch.rank() != 2 || gen_batch.shape()[0] < 2 {
        return Err(Error::Value("inception score needs a batch of at least 2 samples".into()));
    }
    if teachers.len() != pi.len() {
        return Err(Error::Value("one weight per teacher required".into()));
    }
    let batch = gen_batch.shape()[0];
    let mut total = 0.0;
    for (net, &w) in teachers.iter().zip(pi) {
        let logits = net.forward_values(gen_batch)?;
        let classes = logits.shape()[1];
        let probs: Vec<Vec<f64>> = logits
            .values()
            .chunks(classes)
            .map(|row| softmax_tau(row, 1.0))
            .collect::<Result<_>>()?;
        let mut marginal = vec![0.0; classes];
        for q in &probs {
            for (m, qi) in marginal.iter_mut().zip(q) {
                *m += qi / batch as f64;
            }
        }
        let mean_kl: f64 = probs
            .iter()
            .map(|q| {
                q.iter()
                    .zip(&marginal)
                    .map(|(&qi, &mi)| if qi > 0.0 { qi * (qi / mi).ln() } else { 0.0 })
                    .sum::<f64>()
            })
            .sum::<f64>()
            / batch as f64;
        total += w * mean_kl.exp();
    }
    Ok(total)
}
