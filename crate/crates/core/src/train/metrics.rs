//! Overlap and surface-distance metrics on hard label volumes, and the
//! prediction-confidence histogram.

use serde::{Deserialize, Serialize};

/// `2|A∩B| / (|A|+|B|)` for the voxels labelled `class`; 1.0 when both are
/// empty.
pub fn dice_score(pred: &[u8], truth: &[u8], class: u8) -> f64 {
    assert_eq!(pred.len(), truth.len(), "label volumes differ in size");
    let (mut inter, mut a, mut b) = (0u64, 0u64, 0u64);
    for (&p, &t) in pred.iter().zip(truth) {
        let (p, t) = (p == class, t == class);
        inter += (p && t) as u64;
        a += p as u64;
        b += t as u64;
    }
    if a + b == 0 {
        1.0
    } else {
        2.0 * inter as f64 / (a + b) as f64
    }
}

fn index(p: [usize; 3], dims: [usize; 3]) -> usize {
    (p[0] * dims[1] + p[1]) * dims[2] + p[2]
}

/// Mask voxels with at least one 6-neighbour outside the mask. The volume
/// border counts as outside.
pub fn surface(mask: &[bool], dims: [usize; 3]) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for i in 0..dims[0] {
        for j in 0..dims[1] {
            for k in 0..dims[2] {
                let p = [i, j, k];
                if !mask[index(p, dims)] {
                    continue;
                }
                let exposed = (0..3).any(|a| {
                    let lo = p[a] == 0 || {
                        let mut q = p;
                        q[a] -= 1;
                        !mask[index(q, dims)]
                    };
                    let hi = p[a] + 1 == dims[a] || {
                        let mut q = p;
                        q[a] += 1;
                        !mask[index(q, dims)]
                    };
                    lo || hi
                });
                if exposed {
                    out.push(p);
                }
            }
        }
    }
    out
}

/// Exact squared Euclidean distance from every voxel to the nearest seed,
/// by three separable lower-envelope passes. Distances stay integers
/// throughout; `u64::MAX` marks "no seed".
pub fn squared_distance_transform(seeds: &[[usize; 3]], dims: [usize; 3]) -> Vec<u64> {
    const INF: u64 = u64::MAX / 4;
    let n: usize = dims.iter().product();
    let mut f = vec![INF; n];
    for &s in seeds {
        f[index(s, dims)] = 0;
    }
    if seeds.is_empty() {
        return vec![u64::MAX; n];
    }
    let mut line = Vec::new();
    let mut out = Vec::new();
    for axis in 0..3 {
        let len = dims[axis];
        let stride = match axis {
            0 => dims[1] * dims[2],
            1 => dims[2],
            _ => 1,
        };
        for start in 0..n {
            // visit each line once, from its first element
            let coord = (start / stride) % len;
            if coord != 0 {
                continue;
            }
            line.clear();
            line.extend((0..len).map(|t| f[start + t * stride]));
            lower_envelope(&line, &mut out);
            for (t, v) in out.iter().enumerate() {
                f[start + t * stride] = *v;
            }
        }
    }
    f
}

/// 1-D squared distance transform `out[q] = min_p (q-p)² + f[p]`, for
/// integer-valued `f` (Felzenszwalb & Huttenlocher).
fn lower_envelope(f: &[u64], out: &mut Vec<u64>) {
    const INF: u64 = u64::MAX / 4;
    let n = f.len();
    out.clear();
    out.resize(n, INF);
    let finite: Vec<usize> = (0..n).filter(|&q| f[q] < INF).collect();
    if finite.is_empty() {
        return;
    }
    // parabola apexes in the envelope and the boundaries between them
    let mut v: Vec<usize> = Vec::with_capacity(finite.len());
    let mut z: Vec<f64> = Vec::with_capacity(finite.len() + 1);
    let meet = |p: usize, q: usize| -> f64 {
        let (fp, fq) = (f[p] as f64 + (p * p) as f64, f[q] as f64 + (q * q) as f64);
        (fq - fp) / (2.0 * (q as f64 - p as f64))
    };
    v.push(finite[0]);
    z.push(f64::NEG_INFINITY);
    for &q in &finite[1..] {
        let mut s = meet(*v.last().expect("non-empty"), q);
        while s <= *z.last().expect("non-empty") {
            v.pop();
            z.pop();
            if v.is_empty() {
                break;
            }
            s = meet(*v.last().expect("non-empty"), q);
        }
        if v.is_empty() {
            v.push(q);
            z.push(f64::NEG_INFINITY);
        } else {
            v.push(q);
            z.push(s);
        }
    }
    z.push(f64::INFINITY);
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        // the float boundary only picks the candidate; the value is exact,
        // and neighbouring apexes are checked in case of a tie at q
        let mut best = u64::MAX;
        for &p in &v[k.saturating_sub(1)..(k + 2).min(v.len())] {
            let dq = q.abs_diff(p) as u64;
            best = best.min(dq * dq + f[p]);
        }
        *o = best;
    }
}

/// `q`-th percentile (0..=100) with linear interpolation between order
/// statistics, matching numpy's default method.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of an empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = (lo + 1).min(values.len() - 1);
    let t = pos - lo as f64;
    let (a, b) = (values[lo], values[hi]);
    let diff = b - a;
    if t >= 0.5 {
        b - diff * (1.0 - t)
    } else {
        a + diff * t
    }
}

/// Directed distances from each surface voxel of `from` to the nearest
/// surface voxel of `to`.
fn directed<'a>(
    from: &'a [[usize; 3]],
    to_sq: &'a [u64],
    dims: [usize; 3],
) -> impl Iterator<Item = f64> + 'a {
    from.iter()
        .map(move |&p| (to_sq[index(p, dims)] as f64).sqrt())
}

/// 95th percentile of the union of both directed surface-distance sets for
/// `class`, in voxels. `Some(0.0)` when both masks are empty and `None` when
/// exactly one is.
pub fn hd95(pred: &[u8], truth: &[u8], dims: [usize; 3], class: u8) -> Option<f64> {
    assert_eq!(pred.len(), truth.len(), "label volumes differ in size");
    let a: Vec<bool> = pred.iter().map(|&v| v == class).collect();
    let b: Vec<bool> = truth.iter().map(|&v| v == class).collect();
    let (ea, eb) = (!a.contains(&true), !b.contains(&true));
    match (ea, eb) {
        (true, true) => return Some(0.0),
        (true, false) | (false, true) => return None,
        _ => {}
    }
    let (sa, sb) = (surface(&a, dims), surface(&b, dims));
    let (da, db) = (
        squared_distance_transform(&sa, dims),
        squared_distance_transform(&sb, dims),
    );
    let mut all: Vec<f64> = directed(&sa, &db, dims)
        .chain(directed(&sb, &da, dims))
        .collect();
    Some(percentile(&mut all, 95.0))
}

/// Upper edges of the merged confidence intervals `[0,0.1) [0.1,0.5)
/// [0.5,0.9) [0.9,1]`.
pub const CONFIDENCE_EDGES: [f64; 3] = [0.1, 0.5, 0.9];

pub fn confidence_bin(p: f64) -> usize {
    CONFIDENCE_EDGES.iter().take_while(|&&e| p >= e).count()
}

/// Counts of max-class probabilities over the voxels of each foreground
/// truth class.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceHistogram {
    /// Indexed by foreground class − 1.
    pub counts: Vec<[u64; 4]>,
}

impl ConfidenceHistogram {
    pub fn new(num_classes: usize) -> Self {
        Self {
            counts: vec![[0; 4]; num_classes.saturating_sub(1)],
        }
    }

    /// `probs` is `classes×vox` (softmax output), `truth` has `vox` labels.
    pub fn accumulate(&mut self, probs: &[f64], truth: &[u8]) {
        let vox = truth.len();
        let classes = self.counts.len() + 1;
        assert_eq!(
            probs.len(),
            classes * vox,
            "probabilities do not match labels"
        );
        for (v, &t) in truth.iter().enumerate() {
            if t == 0 || t as usize >= classes {
                continue;
            }
            let pmax = (0..classes)
                .map(|c| probs[c * vox + v])
                .fold(f64::NEG_INFINITY, f64::max);
            self.counts[t as usize - 1][confidence_bin(pmax)] += 1;
        }
    }

    pub fn merge(&mut self, other: &Self) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    /// Per-class proportions; `None` for classes absent from the truth.
    pub fn proportions(&self) -> Vec<Option<[f64; 4]>> {
        self.counts
            .iter()
            .map(|c| {
                let total: u64 = c.iter().sum();
                (total > 0).then(|| c.map(|n| n as f64 / total as f64))
            })
            .collect()
    }
}

/// Argmax over the class axis of a `classes×vox` array.
pub fn argmax_labels(values: &[f64], classes: usize) -> Vec<u8> {
    let vox = values.len() / classes;
    (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..classes {
                if values[c * vox + v] > values[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}

/// One evaluation or training-epoch summary. Class vectors cover the
/// foreground classes `1..num_classes`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsRecord {
    pub epoch: Option<usize>,
    pub lr: Option<f64>,
    pub loss: f64,
    pub dice: Vec<f64>,
    /// Mean over samples where it is defined; `None` if it never is.
    pub hd95: Vec<Option<f64>>,
    pub histogram: Vec<Option<[f64; 4]>>,
}

impl MetricsRecord {
    pub fn mean_dice(&self) -> f64 {
        if self.dice.is_empty() {
            return 0.0;
        }
        self.dice.iter().sum::<f64>() / self.dice.len() as f64
    }
}

/// Per-sample metric sums, merged across samples in a fixed order.
#[derive(Debug, Clone)]
pub(crate) struct MetricAccumulator {
    samples: usize,
    loss: f64,
    dice: Vec<f64>,
    hd_sum: Vec<f64>,
    hd_count: Vec<usize>,
    histogram: ConfidenceHistogram,
}

impl MetricAccumulator {
    pub(crate) fn new(num_classes: usize) -> Self {
        let fg = num_classes - 1;
        Self {
            samples: 0,
            loss: 0.0,
            dice: vec![0.0; fg],
            hd_sum: vec![0.0; fg],
            hd_count: vec![0; fg],
            histogram: ConfidenceHistogram::new(num_classes),
        }
    }

    /// Scores one prediction given its `classes×vox` probabilities.
    pub(crate) fn sample(
        num_classes: usize,
        loss: f64,
        probs: &[f64],
        truth: &[u8],
        dims: [usize; 3],
    ) -> Self {
        let mut acc = Self::new(num_classes);
        let pred = argmax_labels(probs, num_classes);
        acc.samples = 1;
        acc.loss = loss;
        for c in 1..num_classes {
            acc.dice[c - 1] = dice_score(&pred, truth, c as u8);
            if let Some(h) = hd95(&pred, truth, dims, c as u8) {
                acc.hd_sum[c - 1] = h;
                acc.hd_count[c - 1] = 1;
            }
        }
        acc.histogram.accumulate(probs, truth);
        acc
    }

    pub(crate) fn merge(&mut self, other: &Self) {
        self.samples += other.samples;
        self.loss += other.loss;
        for c in 0..self.dice.len() {
            self.dice[c] += other.dice[c];
            self.hd_sum[c] += other.hd_sum[c];
            self.hd_count[c] += other.hd_count[c];
        }
        self.histogram.merge(&other.histogram);
    }

    pub(crate) fn finish(&self, epoch: Option<usize>, lr: Option<f64>) -> MetricsRecord {
        let n = self.samples.max(1) as f64;
        MetricsRecord {
            epoch,
            lr,
            loss: self.loss / n,
            dice: self.dice.iter().map(|d| d / n).collect(),
            hd95: self
                .hd_sum
                .iter()
                .zip(&self.hd_count)
                .map(|(s, &k)| (k > 0).then(|| s / k as f64))
                .collect(),
            histogram: self.histogram.proportions(),
        }
    }
}
