//! Datasets: MNIST IDX files, schema-driven CSV, synthetic pathway tasks.

mod csv;
mod idx;
mod synthetic;

use ndarray::{Array2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gates::Rng;

pub use self::csv::{load_csv, load_csv_with, ColumnKind, CsvEncoder, CsvLoadStats, CsvSchema};
pub use self::idx::{load_idx, load_mnist_dir, write_idx_images, write_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use self::synthetic::{gen_synthetic, Scenario, SyntheticSpec};

/// Supervision signal.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    /// Single-label classification; trained with softmax cross-entropy.
    Classes { labels: Vec<usize>, n_classes: usize },
    /// Independent binary labels, `(rows, k)` of 0.0/1.0; trained with
    /// sigmoid binary cross-entropy.
    Binary(Array2<f64>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Classes { labels, .. } => labels.len(),
            Targets::Binary(y) => y.nrows(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Width of the network output this target expects.
    pub fn output_width(&self) -> usize {
        match self {
            Targets::Classes { n_classes, .. } => *n_classes,
            Targets::Binary(y) => y.ncols(),
        }
    }

    pub fn select(&self, rows: &[usize]) -> Targets {
        match self {
            Targets::Classes { labels, n_classes } => Targets::Classes {
                labels: rows.iter().map(|&r| labels[r]).collect(),
                n_classes: *n_classes,
            },
            Targets::Binary(y) => Targets::Binary(y.select(Axis(0), rows)),
        }
    }

    /// Frequency of the positive class (binary) or of class 1 (multiclass),
    /// per label column.
    pub fn positive_rates(&self) -> Vec<f64> {
        match self {
            Targets::Classes { labels, n_classes } => {
                let mut counts = vec![0usize; *n_classes];
                for &l in labels {
                    counts[l] += 1;
                }
                counts.iter().map(|&c| c as f64 / labels.len().max(1) as f64).collect()
            }
            Targets::Binary(y) => y.mean_axis(Axis(0)).map(|m| m.to_vec()).unwrap_or_default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    /// `(rows, features)`
    pub features: Array2<f64>,
    pub targets: Targets,
    pub feature_names: Vec<String>,
    pub class_names: Vec<String>,
    pub source: String,
    /// Numeric columns still on their raw scale. [`split`] (or
    /// [`Dataset::scale_pending`]) min-max scales them.
    pub pending_scale: Vec<usize>,
}

impl Dataset {
    pub fn new(features: Array2<f64>, targets: Targets, source: impl Into<String>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::EmptyDataset);
        }
        if features.nrows() != targets.len() {
            return Err(Error::shape("dataset rows", features.nrows(), targets.len()));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("dataset features contain NaN or infinity".into()));
        }
        if let Targets::Classes { labels, n_classes } = &targets {
            if let Some(&bad) = labels.iter().find(|&&l| l >= *n_classes) {
                return Err(Error::IndexOutOfRange {
                    index: bad,
                    len: *n_classes,
                });
            }
        }
        let p = features.ncols();
        let class_names = match &targets {
            Targets::Classes { n_classes, .. } => (0..*n_classes).map(|c| c.to_string()).collect(),
            Targets::Binary(y) => (1..=y.ncols()).map(|c| format!("y{c}")).collect(),
        };
        Ok(Self {
            features,
            targets,
            feature_names: (1..=p).map(|i| format!("x{i}")).collect(),
            class_names,
            source: source.into(),
            pending_scale: Vec::new(),
        })
    }

    pub fn len(&self) -> usize {
        self.features.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    pub fn select(&self, rows: &[usize]) -> Dataset {
        Dataset {
            features: self.features.select(Axis(0), rows),
            targets: self.targets.select(rows),
            feature_names: self.feature_names.clone(),
            class_names: self.class_names.clone(),
            source: self.source.clone(),
            pending_scale: self.pending_scale.clone(),
        }
    }

    /// Min-max statistics of the pending columns on this dataset.
    pub fn fit_min_max(&self) -> MinMax {
        let columns = self
            .pending_scale
            .iter()
            .map(|&c| {
                let col = self.features.column(c);
                let lo = col.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = col.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                (c, lo, hi)
            })
            .collect();
        MinMax { columns }
    }

    /// Scales the pending columns with statistics from this dataset itself.
    pub fn scale_pending(&mut self) {
        let mm = self.fit_min_max();
        mm.apply(self);
    }
}

/// Per-column `(index, min, max)`; a constant column maps to 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MinMax {
    pub columns: Vec<(usize, f64, f64)>,
}

impl MinMax {
    /// Applies `(x - min) / (max - min)`. Test rows outside the training range
    /// are clipped into [0, 1].
    pub fn apply(&self, ds: &mut Dataset) {
        for &(c, lo, hi) in &self.columns {
            let range = hi - lo;
            ds.features.column_mut(c).mapv_inplace(|v| {
                if range > 0.0 {
                    ((v - lo) / range).clamp(0.0, 1.0)
                } else {
                    0.0
                }
            });
        }
        ds.pending_scale.clear();
    }
}

/// Seeded shuffle, then the first `round(n * test_fraction)` shuffled rows
/// become the test set. Pending numeric columns are scaled with training
/// statistics only.
pub fn split(dataset: &Dataset, test_fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(Error::Config(format!(
            "test fraction must lie in (0, 1), got {test_fraction}"
        )));
    }
    let n = dataset.len();
    let n_test = (n as f64 * test_fraction).round() as usize;
    if n_test == 0 || n_test >= n {
        return Err(Error::EmptySplit {
            n,
            fraction: test_fraction,
        });
    }
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(seed).shuffle(&mut order);
    let mut test = dataset.select(&order[..n_test]);
    let mut train = dataset.select(&order[n_test..]);
    if !dataset.pending_scale.is_empty() {
        let mm = train.fit_min_max();
        mm.apply(&mut train);
        mm.apply(&mut test);
    }
    Ok((train, test))
}
