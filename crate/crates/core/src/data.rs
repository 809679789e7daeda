//! Dataset synthesis, IDX ingestion, and heterogeneous partitioning of one
//! labeled dataset across local nodes via per-class Dirichlet draws.

use std::io::Read;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

/// A labeled dataset with inputs normalized into `[-1, 1]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `[n, d]` inputs.
    pub inputs: Tensor,
    /// Class index per sample, each below `classes`.
    pub labels: Vec<usize>,
    pub classes: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(inputs: Tensor, labels: Vec<usize>, classes: usize, name: impl Into<String>) -> Result<Self> {
        if inputs.rank() != 2 {
            return Err(Error::Shape(format!("inputs must be [n, d], got {:?}", inputs.shape())));
        }
        if inputs.shape()[0] != labels.len() {
            return Err(Error::Shape(format!(
                "{} inputs but {} labels",
                inputs.shape()[0],
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::Value(format!("label {bad} out of range for {classes} classes")));
        }
        Ok(Self { inputs, labels, classes, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.shape()[1]
    }

    /// Copies the rows at `indices` into a `[len, d]` batch tensor.
    pub fn gather(&self, indices: &[usize]) -> Result<Tensor> {
        let d = self.dim();
        let mut vals = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= self.len() {
                return Err(Error::Value(format!("sample index {i} out of bounds")));
            }
            vals.extend_from_slice(&self.inputs.values()[i * d..(i + 1) * d]);
        }
        Tensor::from_vec(vec![indices.len(), d], vals)
    }

    pub fn labels_at(&self, indices: &[usize]) -> Vec<usize> {
        indices.iter().map(|&i| self.labels[i]).collect()
    }

    /// Per-class sample counts over the whole dataset.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Deterministic stratified split into (train, test); `test_fraction` of
    /// each class is held out.
    pub fn split_test(&self, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&test_fraction) {
            return Err(Error::Value(format!("test_fraction must be in [0,1), got {test_fraction}")));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5111_7e57);
        let mut train_idx = Vec::new();
        let mut test_idx = Vec::new();
        for c in 0..self.classes {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            idx.shuffle(&mut rng);
            let n_test = (idx.len() as f64 * test_fraction).round() as usize;
            test_idx.extend_from_slice(&idx[..n_test]);
            train_idx.extend_from_slice(&idx[n_test..]);
        }
        train_idx.sort_unstable();
        test_idx.sort_unstable();
        let make = |idx: &[usize], tag: &str| -> Result<Dataset> {
            Dataset::new(
                self.gather(idx)?,
                self.labels_at(idx),
                self.classes,
                format!("{}-{tag}", self.name),
            )
        };
        Ok((make(&train_idx, "train")?, make(&test_idx, "test")?))
    }
}

/// Gaussian class clusters centered on a circle of radius 0.7 in the first
/// two dimensions, clipped to `[-1, 1]`.
pub fn make_blobs(classes: usize, per_class: usize, dim: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 {
        return Err(Error::Value(format!("need at least 2 classes, got {classes}")));
    }
    if dim < 2 {
        return Err(Error::Value(format!("need at least 2 dimensions, got {dim}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, spread.max(0.0)).map_err(|e| Error::Value(e.to_string()))?;
    let n = classes * per_class;
    let mut vals = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for c in 0..classes {
        let angle = 2.0 * std::f64::consts::PI * c as f64 / classes as f64;
        let (cx, cy) = (0.7 * angle.cos(), 0.7 * angle.sin());
        for _ in 0..per_class {
            for j in 0..dim {
                let center = match j {
                    0 => cx,
                    1 => cy,
                    _ => 0.0,
                };
                let v = if spread > 0.0 { center + noise.sample(&mut rng) } else { center };
                vals.push(v.clamp(-1.0, 1.0));
            }
            labels.push(c);
        }
    }
    Dataset::new(Tensor::from_vec(vec![n, dim], vals)?, labels, classes, "blobs")
}

fn read_u32_be(bytes: &[u8], pos: &mut usize, what: &str) -> Result<u32> {
    let end = *pos + 4;
    if end > bytes.len() {
        return Err(Error::Format(format!("truncated IDX file while reading {what}")));
    }
    let v = u32::from_be_bytes(bytes[*pos..end].try_into().expect("4 bytes"));
    *pos = end;
    Ok(v)
}

/// Loads an IDX image/label pair, scales pixels into `[-1, 1]`, and
/// area-averages each image down to `sqrt(d) x sqrt(d)`.
pub fn load_idx(images_path: &Path, labels_path: &Path, downsample_to: usize) -> Result<Dataset> {
    let side = (downsample_to as f64).sqrt().round() as usize;
    if side * side != downsample_to {
        return Err(Error::Value(format!(
            "downsample_to must be a perfect square, got {downsample_to}"
        )));
    }

    let mut img_bytes = Vec::new();
    std::fs::File::open(images_path)?.read_to_end(&mut img_bytes)?;
    let mut pos = 0;
    let magic = read_u32_be(&img_bytes, &mut pos, "image magic")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX image magic {magic:#010x}, expected {IDX_IMAGES_MAGIC:#010x}"
        )));
    }
    let count = read_u32_be(&img_bytes, &mut pos, "image count")? as usize;
    let rows = read_u32_be(&img_bytes, &mut pos, "rows")? as usize;
    let cols = read_u32_be(&img_bytes, &mut pos, "cols")? as usize;
    if img_bytes.len() < pos + count * rows * cols {
        return Err(Error::Format("truncated IDX image payload".into()));
    }

    let mut lbl_bytes = Vec::new();
    std::fs::File::open(labels_path)?.read_to_end(&mut lbl_bytes)?;
    let mut lpos = 0;
    let lmagic = read_u32_be(&lbl_bytes, &mut lpos, "label magic")?;
    if lmagic != IDX_LABELS_MAGIC {
        return Err(Error::Format(format!(
            "bad IDX label magic {lmagic:#010x}, expected {IDX_LABELS_MAGIC:#010x}"
        )));
    }
    let lcount = read_u32_be(&lbl_bytes, &mut lpos, "label count")? as usize;
    if lcount != count {
        return Err(Error::Format(format!("{count} images but {lcount} labels")));
    }
    if lbl_bytes.len() < lpos + count {
        return Err(Error::Format("truncated IDX label payload".into()));
    }

    let labels: Vec<usize> = lbl_bytes[lpos..lpos + count].iter().map(|&b| b as usize).collect();
    let classes = labels.iter().max().map_or(0, |m| m + 1);

    let mut vals = Vec::with_capacity(count * downsample_to);
    for i in 0..count {
        let img = &img_bytes[pos + i * rows * cols..pos + (i + 1) * rows * cols];
        let small = area_average(img, rows, cols, side, side);
        vals.extend(small.into_iter().map(|p| p / 255.0 * 2.0 - 1.0));
    }
    Dataset::new(
        Tensor::from_vec(vec![count, downsample_to], vals)?,
        labels,
        classes.max(2),
        "idx",
    )
}

/// Box-filter resize: each target pixel averages its (fractionally
/// overlapping) source region, weighted by overlap area.
fn area_average(src: &[u8], rows: usize, cols: usize, out_rows: usize, out_cols: usize) -> Vec<f64> {
    let (ry, rx) = (rows as f64 / out_rows as f64, cols as f64 / out_cols as f64);
    let mut out = Vec::with_capacity(out_rows * out_cols);
    for oy in 0..out_rows {
        let (y0, y1) = (oy as f64 * ry, (oy + 1) as f64 * ry);
        for ox in 0..out_cols {
            let (x0, x1) = (ox as f64 * rx, (ox + 1) as f64 * rx);
            let mut acc = 0.0;
            let mut area = 0.0;
            for sy in y0.floor() as usize..(y1.ceil() as usize).min(rows) {
                let wy = (y1.min((sy + 1) as f64) - y0.max(sy as f64)).max(0.0);
                for sx in x0.floor() as usize..(x1.ceil() as usize).min(cols) {
                    let wx = (x1.min((sx + 1) as f64) - x0.max(sx as f64)).max(0.0);
                    acc += wy * wx * src[sy * cols + sx] as f64;
                    area += wy * wx;
                }
            }
            out.push(if area > 0.0 { acc / area } else { 0.0 });
        }
    }
    out
}

/// Assignment of every sample index to exactly one node, with the per-node
/// per-class label histogram the server uses for class priors.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PartitionSpec {
    pub node_indices: Vec<Vec<usize>>,
    pub label_histogram: Vec<Vec<usize>>,
    pub alpha: f64,
    pub seed: u64,
}

impl PartitionSpec {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn nodes(&self) -> usize {
        self.node_indices.len()
    }

    pub fn node_size(&self, k: usize) -> usize {
        self.node_indices[k].len()
    }

    pub fn total_samples(&self) -> usize {
        self.node_indices.iter().map(Vec::len).sum()
    }

    /// Recomputes the histogram from indices and checks it against the
    /// stored one.
    pub fn validate_against(&self, ds: &Dataset) -> Result<()> {
        let mut seen = vec![false; ds.len()];
        for (k, idx) in self.node_indices.iter().enumerate() {
            let mut counts = vec![0usize; ds.classes];
            for &i in idx {
                if i >= ds.len() {
                    return Err(Error::Value(format!("node {k} references sample {i} out of bounds")));
                }
                if seen[i] {
                    return Err(Error::Value(format!("sample {i} assigned to two nodes")));
                }
                seen[i] = true;
                counts[ds.labels[i]] += 1;
            }
            if counts != self.label_histogram[k] {
                return Err(Error::Value(format!("stored histogram for node {k} is stale")));
            }
        }
        if seen.iter().any(|s| !s) {
            return Err(Error::Value("partition does not cover every sample".into()));
        }
        Ok(())
    }
}

/// Splits a dataset over `nodes` nodes: for each class, proportions are
/// drawn from `Dir(alpha * 1_K)` and that class's (shuffled) indices are cut
/// at the cumulative boundaries. Draws that leave any node empty are
/// resampled up to 100 times; as a last resort one sample moves from the
/// largest node to each empty one.
pub fn dirichlet_partition(ds: &Dataset, nodes: usize, alpha: f64, seed: u64) -> Result<PartitionSpec> {
    if nodes == 0 {
        return Err(Error::Value("need at least one node".into()));
    }
    if alpha <= 0.0 {
        return Err(Error::Value(format!("alpha must be positive, got {alpha}")));
    }
    if ds.len() < nodes {
        return Err(Error::Value(format!(
            "dataset of {} samples cannot cover {nodes} nodes",
            ds.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let gamma = Gamma::new(alpha, 1.0).map_err(|e| Error::Value(e.to_string()))?;

    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.classes];
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class[l].push(i);
    }

    let mut node_indices: Vec<Vec<usize>> = Vec::new();
    for attempt in 0..100 {
        node_indices = vec![Vec::new(); nodes];
        for class_idx in &by_class {
            if class_idx.is_empty() {
                continue;
            }
            let mut shuffled = class_idx.clone();
            shuffled.shuffle(&mut rng);
            let mut props: Vec<f64> = (0..nodes).map(|_| gamma.sample(&mut rng).max(1e-300)).collect();
            let total: f64 = props.iter().sum();
            props.iter_mut().for_each(|p| *p /= total);

            let n = shuffled.len();
            let mut cum = 0.0;
            let mut start = 0;
            for (k, p) in props.iter().enumerate() {
                cum += p;
                let end = if k == nodes - 1 { n } else { (cum * n as f64).round() as usize };
                let end = end.clamp(start, n);
                node_indices[k].extend_from_slice(&shuffled[start..end]);
                start = end;
            }
        }
        if node_indices.iter().all(|idx| !idx.is_empty()) {
            break;
        }
        if attempt == 99 {
            // move one sample from the largest node into each empty node
            while let Some(empty) = node_indices.iter().position(Vec::is_empty) {
                let largest = (0..nodes)
                    .max_by_key(|&k| node_indices[k].len())
                    .expect("at least one node");
                let moved = node_indices[largest].pop().expect("largest node nonempty");
                node_indices[empty].push(moved);
            }
        }
    }

    for idx in node_indices.iter_mut() {
        idx.sort_unstable();
    }
    let label_histogram = node_indices
        .iter()
        .map(|idx| {
            let mut counts = vec![0usize; ds.classes];
            for &i in idx {
                counts[ds.labels[i]] += 1;
            }
            counts
        })
        .collect();
    Ok(PartitionSpec { node_indices, label_histogram, alpha, seed })
}

/// Data-size weight of node `k`: its share of all locally held samples.
pub fn local_weight(spec: &PartitionSpec, k: usize) -> f64 {
    let total = spec.total_samples();
    spec.node_size(k) as f64 / total as f64
}

/// Share of class `c`'s global samples held at node `k`.
pub fn class_prior_ratio(spec: &PartitionSpec, k: usize, c: usize) -> Result<f64> {
    let global: usize = spec.label_histogram.iter().map(|h| h[c]).sum();
    if global == 0 {
        return Err(Error::Value(format!("class {c} is absent from every node")));
    }
    Ok(spec.label_histogram[k][c] as f64 / global as f64)
}

/// Total-variation distance between a node's label distribution and the
/// global one; the heterogeneity measure used in the partition checks.
pub fn label_tv_distance(spec: &PartitionSpec, k: usize) -> f64 {
    let classes = spec.label_histogram[0].len();
    let node_total = spec.node_size(k) as f64;
    let global_total = spec.total_samples() as f64;
    (0..classes)
        .map(|c| {
            let node_p = spec.label_histogram[k][c] as f64 / node_total;
            let global_c: usize = spec.label_histogram.iter().map(|h| h[c]).sum();
            let global_p = global_c as f64 / global_total;
            (node_p - global_p).abs()
        })
        .sum::<f64>()
        / 2.0
}
