//! Overlap and surface-distance metrics on label volumes.

use unetrpp_tensor::{Element, Tensor};

use crate::error::{Error, Result};

/// Integer class map over an `H × W × D` grid, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub extents: [usize; 3],
    pub data: Vec<u32>,
}

impl LabelMap {
    pub fn new(extents: [usize; 3], data: Vec<u32>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!("label map {extents:?} needs {n} entries, got {}", data.len())));
        }
        Ok(Self { extents, data })
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn mask(&self, class: u32) -> Mask {
        Mask { extents: self.extents, data: self.data.iter().map(|&c| c == class).collect() }
    }

    /// Per-voxel argmax over the class axis of `I × H × W × D` logits.
    /// Ties resolve to the lowest class index.
    pub fn argmax<T: Element>(logits: &Tensor<T>) -> Result<Self> {
        let (classes, extents) = match *logits.shape() {
            [i, h, w, d] if i > 0 => (i, [h, w, d]),
            _ => return Err(Error::Shape(format!("argmax expects I×H×W×D, got {:?}", logits.shape()))),
        };
        let v: usize = extents.iter().product();
        let x = logits.data();
        let data = (0..v)
            .map(|j| {
                let mut best = 0;
                for c in 1..classes {
                    if x[c * v + j] > x[best * v + j] {
                        best = c;
                    }
                }
                best as u32
            })
            .collect();
        Ok(Self { extents, data })
    }

    pub fn histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for &c in &self.data {
            if (c as usize) < num_classes {
                h[c as usize] += 1;
            }
        }
        h
    }
}

/// Binary volume.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub extents: [usize; 3],
    pub data: Vec<bool>,
}

impl Mask {
    pub fn new(extents: [usize; 3], data: Vec<bool>) -> Result<Self> {
        let n: usize = extents.iter().product();
        if data.len() != n {
            return Err(Error::Shape(format!("mask {extents:?} needs {n} entries, got {}", data.len())));
        }
        Ok(Self { extents, data })
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.data.iter().any(|&b| b)
    }

    fn index(&self, [i, j, k]: [usize; 3]) -> usize {
        (i * self.extents[1] + j) * self.extents[2] + k
    }

    fn coords(&self, idx: usize) -> [usize; 3] {
        let [_, w, d] = self.extents;
        [idx / (w * d), idx / d % w, idx % d]
    }

    pub fn get(&self, at: [usize; 3]) -> bool {
        self.data[self.index(at)]
    }
}

/// Dice overlap of `class` between two label maps; 1.0 when the class is
/// absent from both.
pub fn dsc(pred: &LabelMap, truth: &LabelMap, class: u32) -> Result<f64> {
    if pred.extents != truth.extents {
        return Err(Error::Shape(format!("dsc: {:?} vs {:?}", pred.extents, truth.extents)));
    }
    let (mut both, mut np, mut nt) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.data.iter().zip(&truth.data) {
        let (p, t) = (p == class, t == class);
        both += (p && t) as usize;
        np += p as usize;
        nt += t as usize;
    }
    if np + nt == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (np + nt) as f64)
}

/// Foreground voxels with a face neighbour that is background or lies
/// outside the volume, in row-major order.
pub fn boundary_extract(mask: &Mask) -> Vec<[usize; 3]> {
    let e = mask.extents;
    let mut out = Vec::new();
    for (idx, &fg) in mask.data.iter().enumerate() {
        if !fg {
            continue;
        }
        let c = mask.coords(idx);
        let interior = (0..3).all(|a| {
            if c[a] == 0 || c[a] + 1 == e[a] {
                return false;
            }
            let mut lo = c;
            let mut hi = c;
            lo[a] -= 1;
            hi[a] += 1;
            mask.get(lo) && mask.get(hi)
        });
        if !interior {
            out.push(c);
        }
    }
    out
}

/// Euclidean length of the volume diagonal; the distance reported when
/// exactly one mask is empty.
pub fn volume_diagonal(extents: [usize; 3], spacing: [f64; 3]) -> f64 {
    (0..3).map(|a| (extents[a] as f64 * spacing[a]).powi(2)).sum::<f64>().sqrt()
}

/// Percentile `q ∈ [0, 100]` with linear interpolation between order
/// statistics at rank `q/100 · (m − 1)`.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    assert!(!values.is_empty(), "percentile of empty set");
    values.sort_by(|a, b| a.total_cmp(b));
    let rank = q / 100.0 * (values.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let hi = rank.ceil() as usize;
    let frac = rank - lo as f64;
    values[lo] + (values[hi] - values[lo]) * frac
}

/// Squared distance transform along one axis (lower envelope of parabolas).
/// `f` holds squared distances so far, `INFINITY` for no site.
fn edt_1d(f: &[f64], spacing: f64, out: &mut [f64], v: &mut Vec<usize>, z: &mut Vec<f64>) {
    let n = f.len();
    v.clear();
    z.clear();
    let pos = |q: usize| q as f64 * spacing;
    for q in 0..n {
        if f[q].is_infinite() {
            continue;
        }
        loop {
            let Some(&last) = v.last() else {
                v.push(q);
                z.push(f64::NEG_INFINITY);
                break;
            };
            let s = ((f[q] + pos(q) * pos(q)) - (f[last] + pos(last) * pos(last))) / (2.0 * (pos(q) - pos(last)));
            if s <= *z.last().unwrap() {
                v.pop();
                z.pop();
            } else {
                v.push(q);
                z.push(s);
                break;
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && z[k + 1] < pos(q) {
            k += 1;
        }
        let d = pos(q) - pos(v[k]);
        *o = d * d + f[v[k]];
    }
}

/// Exact squared Euclidean distance from every voxel to the nearest site.
pub fn squared_distance_transform(extents: [usize; 3], sites: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    let [h, w, d] = extents;
    let mut dist = vec![f64::INFINITY; h * w * d];
    for &[i, j, k] in sites {
        dist[(i * w + j) * d + k] = 0.0;
    }
    let strides = [w * d, d, 1];
    let mut line = Vec::new();
    let mut out = Vec::new();
    let (mut v, mut z) = (Vec::new(), Vec::new());
    for axis in 0..3 {
        let len = extents[axis];
        let stride = strides[axis];
        line.resize(len, 0.0);
        out.resize(len, 0.0);
        for base in 0..dist.len() {
            if (base / stride) % len != 0 {
                continue;
            }
            for t in 0..len {
                line[t] = dist[base + t * stride];
            }
            edt_1d(&line, spacing[axis], &mut out, &mut v, &mut z);
            for t in 0..len {
                dist[base + t * stride] = out[t];
            }
        }
    }
    dist
}

fn directed_hd95(from: &[[usize; 3]], to_dist: &[f64], extents: [usize; 3]) -> f64 {
    let [_, w, d] = extents;
    let mut ds: Vec<f64> = from.iter().map(|&[i, j, k]| to_dist[(i * w + j) * d + k].sqrt()).collect();
    percentile(&mut ds, 95.0)
}

/// Symmetric 95th-percentile boundary distance in physical units.
pub fn hd95(pred: &Mask, truth: &Mask, spacing: [f64; 3]) -> Result<f64> {
    if pred.extents != truth.extents {
        return Err(Error::Shape(format!("hd95: {:?} vs {:?}", pred.extents, truth.extents)));
    }
    if spacing.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
        return Err(Error::Config(format!("hd95: spacing {spacing:?} must be positive")));
    }
    match (pred.is_empty(), truth.is_empty()) {
        (true, true) => return Ok(0.0),
        (true, false) | (false, true) => return Ok(volume_diagonal(pred.extents, spacing)),
        _ => {}
    }
    let bp = boundary_extract(pred);
    let bt = boundary_extract(truth);
    let dist_to_p = squared_distance_transform(pred.extents, &bp, spacing);
    let dist_to_t = squared_distance_transform(pred.extents, &bt, spacing);
    let d_tp = directed_hd95(&bt, &dist_to_p, pred.extents);
    let d_pt = directed_hd95(&bp, &dist_to_t, pred.extents);
    Ok(d_tp.max(d_pt))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// Foreground class ids, `1..I`.
    pub classes: Vec<u32>,
    pub per_class_dsc: Vec<f64>,
    pub per_class_hd95: Vec<f64>,
    pub mean_dsc: f64,
    pub mean_hd95: f64,
}

impl MetricsReport {
    /// Scores every foreground class `1..num_classes`.
    pub fn compute(pred: &LabelMap, truth: &LabelMap, num_classes: usize, spacing: [f64; 3]) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config("metrics need at least one foreground class".into()));
        }
        let classes: Vec<u32> = (1..num_classes as u32).collect();
        let mut per_class_dsc = Vec::new();
        let mut per_class_hd95 = Vec::new();
        for &c in &classes {
            per_class_dsc.push(dsc(pred, truth, c)?);
            per_class_hd95.push(hd95(&pred.mask(c), &truth.mask(c), spacing)?);
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        Ok(Self {
            mean_dsc: mean(&per_class_dsc),
            mean_hd95: mean(&per_class_hd95),
            classes,
            per_class_dsc,
            per_class_hd95,
        })
    }
}

/// Mean foreground DSC, the training-progress score.
pub fn mean_foreground_dsc(pred: &LabelMap, truth: &LabelMap, num_classes: usize) -> Result<f64> {
    let mut total = 0.0;
    for c in 1..num_classes as u32 {
        total += dsc(pred, truth, c)?;
    }
    Ok(total / (num_classes - 1).max(1) as f64)
}
