//! Datasets: seeded synthetic tasks and IDX image files.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::idx;
use crate::linalg::{gaussian_matrix, Matrix, Rng};
use crate::net::{select_rows, Shape, Targets};

#[derive(Clone, Debug, PartialEq)]
pub struct Split {
    pub inputs: Matrix,
    pub targets: Targets,
}

impl Split {
    pub fn len(&self) -> usize {
        self.inputs.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn select(&self, idx: &[usize]) -> Split {
        Split {
            inputs: select_rows(&self.inputs, idx),
            targets: self.targets.select(idx),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub input: Shape,
    /// Number of classes for classification data, `None` for regression.
    pub classes: Option<usize>,
    pub train: Split,
    pub eval: Split,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// Pixel / 255, in `[0, 1]`.
    #[default]
    Unit,
    /// Unit scaling, then standardized with the training split's global mean and std.
    Standard,
}

fn default_eval_fraction() -> f64 {
    0.2
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum DatasetSpec {
    /// Gaussian clusters around `classes` random centers in `dim` dimensions.
    SyntheticBlobs {
        classes: usize,
        dim: usize,
        n: usize,
        #[serde(default)]
        n_eval: Option<usize>,
        spread: f64,
        seed: u64,
    },
    /// `y = x·A·Bᵀ + noise` with `A`, `B` of rank `true_rank`; `m` inputs, `n` outputs.
    SyntheticLowrankRegression {
        m: usize,
        n: usize,
        true_rank: usize,
        noise: f64,
        seed: u64,
        #[serde(default = "default_samples")]
        samples: usize,
        #[serde(default)]
        n_eval: Option<usize>,
    },
    IdxImages {
        images: PathBuf,
        labels: PathBuf,
        #[serde(default)]
        eval_images: Option<PathBuf>,
        #[serde(default)]
        eval_labels: Option<PathBuf>,
        #[serde(default)]
        normalization: Normalization,
        #[serde(default = "default_eval_fraction")]
        eval_fraction: f64,
    },
}

fn default_samples() -> usize {
    1000
}

impl DatasetSpec {
    /// Fills optional fields with their resolved values.
    pub fn materialized(&self) -> DatasetSpec {
        let mut out = self.clone();
        match &mut out {
            DatasetSpec::SyntheticBlobs { n, n_eval, .. } => {
                n_eval.get_or_insert((*n / 4).max(1));
            }
            DatasetSpec::SyntheticLowrankRegression { samples, n_eval, .. } => {
                n_eval.get_or_insert((*samples / 4).max(1));
            }
            DatasetSpec::IdxImages { .. } => {}
        }
        out
    }

    pub fn load(&self) -> Result<Dataset> {
        match self.materialized() {
            DatasetSpec::SyntheticBlobs {
                classes,
                dim,
                n,
                n_eval,
                spread,
                seed,
            } => synthetic_blobs(classes, dim, n, n_eval.unwrap_or(n / 4), spread, seed),
            DatasetSpec::SyntheticLowrankRegression {
                m,
                n,
                true_rank,
                noise,
                seed,
                samples,
                n_eval,
            } => synthetic_lowrank_regression(m, n, true_rank, noise, samples, n_eval.unwrap_or(samples / 4), seed),
            DatasetSpec::IdxImages {
                ref images,
                ref labels,
                ref eval_images,
                ref eval_labels,
                normalization,
                eval_fraction,
            } => {
                let train = idx::load_idx(images, labels)?;
                let eval = match (eval_images, eval_labels) {
                    (Some(i), Some(l)) => Some(idx::load_idx(i, l)?),
                    (None, None) => None,
                    _ => return Err(Error::Config("eval_images and eval_labels must be given together".into())),
                };
                idx_dataset(train, eval, normalization, eval_fraction)
            }
        }
    }
}

pub fn synthetic_blobs(classes: usize, dim: usize, n: usize, n_eval: usize, spread: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || dim == 0 || n == 0 || n_eval == 0 {
        return Err(Error::InvalidInput("blobs need >= 2 classes and non-empty splits".into()));
    }
    if !(spread > 0.0) {
        return Err(Error::InvalidInput(format!("blob spread must be positive, got {spread}")));
    }
    let root = Rng::new(seed);
    let centers = gaussian_matrix(&mut root.fork(0), classes, dim, 1.0)?;
    let make = |count: usize, rng: &mut Rng| -> Result<Split> {
        let labels: Vec<usize> = (0..count).map(|i| i % classes).collect();
        let mut x = Matrix::zeros(count, dim);
        for (i, &c) in labels.iter().enumerate() {
            for (j, v) in x.row_mut(i).iter_mut().enumerate() {
                *v = centers[(c, j)] + spread * rng.standard_normal();
            }
        }
        Ok(Split {
            inputs: x,
            targets: Targets::Classes(labels),
        })
    };
    Ok(Dataset {
        input: Shape::Flat { features: dim },
        classes: Some(classes),
        train: make(n, &mut root.fork(1))?,
        eval: make(n_eval, &mut root.fork(2))?,
    })
}

pub fn synthetic_lowrank_regression(
    m: usize,
    n: usize,
    true_rank: usize,
    noise: f64,
    samples: usize,
    n_eval: usize,
    seed: u64,
) -> Result<Dataset> {
    if true_rank == 0 || true_rank > m.min(n) {
        return Err(Error::Rank {
            rank: true_rank,
            max: m.min(n),
        });
    }
    if !(noise >= 0.0) || samples == 0 || n_eval == 0 {
        return Err(Error::InvalidInput("regression needs noise >= 0 and non-empty splits".into()));
    }
    let root = Rng::new(seed);
    let scale = 1.0 / (true_rank as f64).sqrt();
    let a = gaussian_matrix(&mut root.fork(0), m, true_rank, 1.0)?;
    let b = gaussian_matrix(&mut root.fork(1), n, true_rank, scale)?;
    let w = a.matmul_t(&b)?;
    let make = |count: usize, rng: &mut Rng| -> Result<Split> {
        let x = gaussian_matrix(rng, count, m, 1.0 / (m as f64).sqrt())?;
        let mut y = x.matmul(&w)?;
        if noise > 0.0 {
            for v in y.as_mut_slice() {
                *v += noise * rng.standard_normal();
            }
        }
        Ok(Split {
            inputs: x,
            targets: Targets::Values(y),
        })
    };
    Ok(Dataset {
        input: Shape::Flat { features: m },
        classes: None,
        train: make(samples, &mut root.fork(2))?,
        eval: make(n_eval, &mut root.fork(3))?,
    })
}

fn idx_dataset(
    train: idx::IdxData,
    eval: Option<idx::IdxData>,
    normalization: Normalization,
    eval_fraction: f64,
) -> Result<Dataset> {
    let classes = train.labels.iter().copied().max().map(|m| m + 1).unwrap_or(0).max(2);
    let input = Shape::Image {
        height: train.rows,
        width: train.cols,
        channels: 1,
    };
    let to_split = |d: idx::IdxData| -> Result<Split> {
        Ok(Split {
            inputs: d.images,
            targets: Targets::Classes(d.labels),
        })
    };
    let (train_split, eval_split) = match eval {
        Some(e) => {
            if (e.rows, e.cols) != (train.rows, train.cols) {
                return Err(Error::Format(format!(
                    "eval images are {}x{}, train images {}x{}",
                    e.rows, e.cols, train.rows, train.cols
                )));
            }
            (to_split(train)?, to_split(e)?)
        }
        None => {
            if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
                return Err(Error::Config(format!("eval_fraction must be in (0, 1), got {eval_fraction}")));
            }
            let all = to_split(train)?;
            let n = all.len();
            let n_eval = ((n as f64 * eval_fraction).round() as usize).clamp(1, n.saturating_sub(1).max(1));
            if n < 2 {
                return Err(Error::InsufficientData("need at least 2 images to hold out an eval split".into()));
            }
            let tr: Vec<usize> = (0..n - n_eval).collect();
            let ev: Vec<usize> = (n - n_eval..n).collect();
            (all.select(&tr), all.select(&ev))
        }
    };
    let (mut train_split, mut eval_split) = (train_split, eval_split);
    if normalization == Normalization::Standard {
        let xs = train_split.inputs.as_slice();
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let std = (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / xs.len() as f64).sqrt().max(1e-12);
        for s in [&mut train_split, &mut eval_split] {
            s.inputs = s.inputs.map(|x| (x - mean) / std);
        }
    }
    Ok(Dataset {
        input,
        classes: Some(classes),
        train: train_split,
        eval: eval_split,
    })
}
