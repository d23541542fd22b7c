//! Confusion-matrix segmentation metrics: per-class IoU, mean IoU and pixel
//! accuracy.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Tensor};

pub const DEFAULT_IGNORE_LABEL: u8 = 255;

/// FloodNet pixel classes, ids 0 to 8.
pub const FLOODNET_CLASSES: [&str; 9] = [
    "building-flooded",
    "building-non-flooded",
    "road-flooded",
    "road-non-flooded",
    "water",
    "tree",
    "vehicle",
    "pool",
    "grass",
];

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("label {label} at (sample {n}, row {y}, col {x}) is outside 0..{k} and is not the ignore label {ignore}")]
    LabelOutOfRange {
        n: usize,
        y: usize,
        x: usize,
        label: u8,
        k: usize,
        ignore: u8,
    },
    #[error("prediction mask {pred:?} and ground truth {gt:?} differ in shape")]
    ShapeMismatch {
        pred: (usize, usize, usize),
        gt: (usize, usize, usize),
    },
    #[error("confusion matrix has {matrix} classes, class set has {classes}")]
    ClassCount { matrix: usize, classes: usize },
    #[error("every class is absent from both prediction and ground truth; mean IoU is undefined")]
    AllUndefined,
    #[error("no pixels were counted")]
    NoPixels,
    #[error("invalid class set: {0}")]
    InvalidClassSet(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassSet {
    pub names: Vec<String>,
    pub ignore_label: u8,
}

impl ClassSet {
    pub fn new(names: Vec<String>, ignore_label: u8) -> Result<Self, MetricsError> {
        if names.len() < 2 {
            return Err(MetricsError::InvalidClassSet("at least two classes are required".into()));
        }
        if (ignore_label as usize) < names.len() {
            return Err(MetricsError::InvalidClassSet(format!(
                "ignore label {ignore_label} collides with a class id"
            )));
        }
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = names.iter().find(|n| !seen.insert(n.as_str())) {
            return Err(MetricsError::InvalidClassSet(format!("duplicate class name {dup:?}")));
        }
        Ok(Self { names, ignore_label })
    }

    pub fn floodnet() -> Self {
        Self::new(
            FLOODNET_CLASSES.iter().map(|s| s.to_string()).collect(),
            DEFAULT_IGNORE_LABEL,
        )
        .expect("FloodNet class set is valid")
    }

    /// Classes named `class0`, `class1`, ...
    pub fn numbered(k: usize) -> Self {
        Self::new((0..k).map(|i| format!("class{i}")).collect(), DEFAULT_IGNORE_LABEL)
            .expect("numbered class set is valid")
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }
}

/// Integer label maps `(N, H, W)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelMask {
    pub n: usize,
    pub h: usize,
    pub w: usize,
    pub labels: Vec<u8>,
}

impl LabelMask {
    pub fn new(n: usize, h: usize, w: usize, labels: Vec<u8>) -> Self {
        assert_eq!(labels.len(), n * h * w, "label count must equal n*h*w");
        Self { n, h, w, labels }
    }

    pub fn filled(n: usize, h: usize, w: usize, label: u8) -> Self {
        Self::new(n, h, w, vec![label; n * h * w])
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.n, self.h, self.w)
    }

    pub fn get(&self, n: usize, y: usize, x: usize) -> u8 {
        self.labels[(n * self.h + y) * self.w + x]
    }

    /// Stacks single masks along the batch axis.
    pub fn stack(masks: &[LabelMask]) -> Option<Self> {
        let first = masks.first()?;
        let (h, w) = (first.h, first.w);
        if masks.iter().any(|m| (m.h, m.w) != (h, w)) {
            return None;
        }
        let labels = masks.iter().flat_map(|m| m.labels.iter().copied()).collect();
        Some(Self::new(masks.iter().map(|m| m.n).sum(), h, w, labels))
    }
}

/// Per-pixel argmax over channels; ties go to the lowest class id.
pub fn argmax_mask<T: Scalar>(logits: &Tensor<T>) -> LabelMask {
    let s = logits.shape();
    let plane = s.plane();
    let x = logits.data();
    let mut labels = Vec::with_capacity(s.n * plane);
    for n in 0..s.n {
        let base = n * s.c * plane;
        for p in 0..plane {
            let mut best = 0usize;
            let mut best_v = x[base + p];
            for c in 1..s.c {
                let v = x[base + c * plane + p];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            labels.push(best as u8);
        }
    }
    LabelMask::new(s.n, s.h, s.w, labels)
}

/// `counts[gt][pred]` pixel tallies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Self {
        assert_eq!(counts.len(), k * k, "counts must be k*k");
        Self { k, counts }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn tp(&self, i: usize) -> u64 {
        self.get(i, i)
    }

    pub fn row_sum(&self, i: usize) -> u64 {
        self.counts[i * self.k..(i + 1) * self.k].iter().sum()
    }

    pub fn col_sum(&self, j: usize) -> u64 {
        (0..self.k).map(|i| self.get(i, j)).sum()
    }

    pub fn fp(&self, i: usize) -> u64 {
        self.col_sum(i) - self.tp(i)
    }

    pub fn fn_(&self, i: usize) -> u64 {
        self.row_sum(i) - self.tp(i)
    }

    pub fn trace(&self) -> u64 {
        (0..self.k).map(|i| self.tp(i)).sum()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::new(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                t.counts[j * self.k + i] = self.get(i, j);
            }
        }
        t
    }

    /// Relabels class `i` as `perm[i]` in both axes.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let mut t = Self::new(self.k);
        for i in 0..self.k {
            for j in 0..self.k {
                t.counts[perm[i] * self.k + perm[j]] = self.get(i, j);
            }
        }
        t
    }

    /// Adds one pixel per position; ground-truth pixels equal to the ignore
    /// label are skipped.
    pub fn accumulate(&mut self, pred: &LabelMask, gt: &LabelMask, classes: &ClassSet) -> Result<(), MetricsError> {
        if classes.len() != self.k {
            return Err(MetricsError::ClassCount {
                matrix: self.k,
                classes: classes.len(),
            });
        }
        if pred.dims() != gt.dims() {
            return Err(MetricsError::ShapeMismatch {
                pred: pred.dims(),
                gt: gt.dims(),
            });
        }
        let k = self.k;
        let ignore = classes.ignore_label;
        let out_of_range = |idx: usize, label: u8| {
            let plane = gt.h * gt.w;
            MetricsError::LabelOutOfRange {
                n: idx / plane,
                y: (idx % plane) / gt.w,
                x: idx % gt.w,
                label,
                k,
                ignore,
            }
        };
        // Validate first so a rejected call leaves the matrix untouched.
        for (idx, (&p, &g)) in pred.labels.iter().zip(&gt.labels).enumerate() {
            if g != ignore && g as usize >= k {
                return Err(out_of_range(idx, g));
            }
            if g != ignore && p as usize >= k {
                return Err(out_of_range(idx, p));
            }
        }
        for (&p, &g) in pred.labels.iter().zip(&gt.labels) {
            if g != ignore {
                self.counts[g as usize * k + p as usize] += 1;
            }
        }
        Ok(())
    }

    /// `TP / (TP + FP + FN)` per class; `None` when the class appears in
    /// neither prediction nor ground truth.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|i| {
                let tp = self.tp(i);
                let denom = tp + self.fp(i) + self.fn_(i);
                (denom > 0).then(|| tp as f64 / denom as f64)
            })
            .collect()
    }

    pub fn mean_iou(&self, policy: UndefinedPolicy) -> Result<f64, MetricsError> {
        mean_of_ious(&self.iou_per_class(), policy)
    }

    pub fn pixel_accuracy(&self) -> Result<PixelAccuracy, MetricsError> {
        let total = self.total();
        if total == 0 {
            return Err(MetricsError::NoPixels);
        }
        let per_class = (0..self.k)
            .map(|i| {
                let row = self.row_sum(i);
                (row > 0).then(|| self.tp(i) as f64 / row as f64)
            })
            .collect();
        Ok(PixelAccuracy {
            global: self.trace() as f64 / total as f64,
            per_class,
        })
    }
}

impl AddAssign<&ConfusionMatrix> for ConfusionMatrix {
    fn add_assign(&mut self, rhs: &ConfusionMatrix) {
        assert_eq!(self.k, rhs.k, "cannot merge matrices of different class counts");
        for (a, b) in self.counts.iter_mut().zip(&rhs.counts) {
            *a += b;
        }
    }
}

impl Add for ConfusionMatrix {
    type Output = ConfusionMatrix;

    fn add(mut self, rhs: Self) -> Self {
        self += &rhs;
        self
    }
}

/// How classes with an undefined (0/0) IoU enter the mean.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum UndefinedPolicy {
    #[default]
    Exclude,
    IncludeAsZero,
}

pub fn mean_of_ious(ious: &[Option<f64>], policy: UndefinedPolicy) -> Result<f64, MetricsError> {
    let defined: Vec<f64> = ious.iter().flatten().copied().collect();
    if defined.is_empty() {
        return Err(MetricsError::AllUndefined);
    }
    let denom = match policy {
        UndefinedPolicy::Exclude => defined.len(),
        UndefinedPolicy::IncludeAsZero => ious.len(),
    };
    Ok(defined.iter().sum::<f64>() / denom as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelAccuracy {
    pub global: f64,
    pub per_class: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub name: String,
    pub iou: Option<f64>,
    pub accuracy: Option<f64>,
    pub defined: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_class: Vec<ClassMetrics>,
    pub miou: f64,
    pub pixel_accuracy: f64,
}

impl MetricsReport {
    pub fn from_confusion(cm: &ConfusionMatrix, classes: &ClassSet) -> Result<Self, MetricsError> {
        if classes.len() != cm.num_classes() {
            return Err(MetricsError::ClassCount {
                matrix: cm.num_classes(),
                classes: classes.len(),
            });
        }
        let ious = cm.iou_per_class();
        let acc = cm.pixel_accuracy()?;
        let per_class = classes
            .names
            .iter()
            .zip(ious.iter().zip(&acc.per_class))
            .map(|(name, (&iou, &accuracy))| ClassMetrics {
                name: name.clone(),
                iou,
                accuracy,
                defined: iou.is_some(),
            })
            .collect();
        Ok(Self {
            per_class,
            miou: mean_of_ious(&ious, UndefinedPolicy::Exclude)?,
            pixel_accuracy: acc.global,
        })
    }

    /// One header row of class names and one row of IoU percentages,
    /// followed by mIoU and pixel accuracy.
    pub fn to_table(&self) -> String {
        let widths: Vec<usize> = self.per_class.iter().map(|c| c.name.len().max(6)).collect();
        let mut head = String::from("metric ");
        let mut iou = String::from("IoU %  ");
        let mut acc = String::from("Acc %  ");
        for (c, &w) in self.per_class.iter().zip(&widths) {
            let _ = write!(head, " {:>w$}", c.name);
            let fmt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{:.1}", 100.0 * v));
            let _ = write!(iou, " {:>w$}", fmt(c.iou));
            let _ = write!(acc, " {:>w$}", fmt(c.accuracy));
        }
        format!(
            "{head}\n{iou}\n{acc}\nmIoU: {:.2}%  pixel accuracy: {:.2}%\n",
            100.0 * self.miou,
            100.0 * self.pixel_accuracy
        )
    }
}
