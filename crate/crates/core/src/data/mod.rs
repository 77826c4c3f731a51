//! Datasets: `.ts` ingestion, z-score normalization, batching and
//! planted-period synthetic sets.

mod synth;
mod ts;

use std::path::Path;

use ndarray::{Array1, Array3, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{synth_planted_periods, SynthSpec};
pub use ts::{parse_ts, render_ts};

/// Header information carried by a `.ts` file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub problem_name: String,
    pub timestamps: bool,
    pub missing: bool,
    pub univariate: Option<bool>,
    pub dimensions: Option<usize>,
    pub equal_length: bool,
    pub series_length: Option<usize>,
    pub class_label: bool,
}

impl Default for DatasetMeta {
    fn default() -> Self {
        Self {
            problem_name: String::new(),
            timestamps: false,
            missing: false,
            univariate: None,
            dimensions: None,
            equal_length: true,
            series_length: None,
            class_label: false,
        }
    }
}

/// `m` equal-length series of `d` variables, with class indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `[m, d, l]`
    pub values: Array3<f64>,
    /// Indices into `label_names`; empty for unlabeled data.
    pub labels: Vec<usize>,
    pub label_names: Vec<String>,
    pub meta: DatasetMeta,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.values.dim().0
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> usize {
        self.values.dim().1
    }

    pub fn series_length(&self) -> usize {
        self.values.dim().2
    }

    pub fn num_classes(&self) -> usize {
        self.label_names.len()
    }

    /// Errors unless every sample carries a class label.
    pub fn require_labels(&self) -> Result<()> {
        if !self.meta.class_label || self.labels.len() != self.len() {
            return Err(Error::Data(format!(
                "dataset {:?} has no class labels; classification needs labeled data",
                self.meta.problem_name
            )));
        }
        Ok(())
    }

    /// Copies the samples at `indices`, keeping labels and metadata.
    pub fn select(&self, indices: &[usize]) -> Dataset {
        Dataset {
            values: self.values.select(Axis(0), indices),
            labels: if self.labels.is_empty() {
                Vec::new()
            } else {
                indices.iter().map(|&i| self.labels[i]).collect()
            },
            label_names: self.label_names.clone(),
            meta: self.meta.clone(),
        }
    }
}

pub fn load_ts(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ts(&text)
}

pub fn save_ts(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, render_ts(ds)).map_err(|e| Error::io(path, e))
}

/// Smallest standard deviation used when scaling a channel.
pub const STD_FLOOR: f64 = 1e-8;

/// Per-variable z-score parameters from a training split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NormalizationStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl NormalizationStats {
    /// Population mean and standard deviation of each variable over all
    /// samples and timesteps.
    pub fn fit(ds: &Dataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(Error::Data("cannot normalize an empty dataset".into()));
        }
        let per_var = ds.values.view().permuted_axes([1, 0, 2]);
        let mut mean = Vec::with_capacity(ds.dims());
        let mut std = Vec::with_capacity(ds.dims());
        for chan in per_var.outer_iter() {
            let n = chan.len() as f64;
            let mu = chan.iter().sum::<f64>() / n;
            let var = chan.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
            mean.push(mu);
            std.push(var.sqrt().max(STD_FLOOR));
        }
        Ok(Self { mean, std })
    }

    pub fn apply(&self, ds: &Dataset) -> Result<Dataset> {
        if ds.dims() != self.mean.len() {
            return Err(Error::shape(format!(
                "normalization fitted on {} variables, dataset has {}",
                self.mean.len(),
                ds.dims()
            )));
        }
        let mean = Array1::from(self.mean.clone()).insert_axis(Axis(1));
        let std = Array1::from(self.std.clone()).insert_axis(Axis(1));
        let mut out = ds.clone();
        for mut sample in out.values.outer_iter_mut() {
            sample -= &mean;
            sample /= &std;
        }
        Ok(out)
    }
}

/// Fits statistics on `train` and applies them to `train` and every other
/// split.
pub fn normalize(
    train: &Dataset,
    others: &[&Dataset],
) -> Result<(Dataset, Vec<Dataset>, NormalizationStats)> {
    let stats = NormalizationStats::fit(train)?;
    let train_n = stats.apply(train)?;
    let others = others
        .iter()
        .map(|d| stats.apply(d))
        .collect::<Result<Vec<_>>>()?;
    Ok((train_n, others, stats))
}

/// Sample order for one pass over `m` samples; shuffled deterministically
/// from `seed` when requested.
pub fn batch_order(m: usize, seed: u64, shuffle: bool) -> Vec<usize> {
    let mut order: Vec<usize> = (0..m).collect();
    if shuffle {
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    }
    order
}

/// A mini-batch: `values[B, d, l]` with matching labels.
#[derive(Clone, Debug)]
pub struct Batch {
    pub indices: Vec<usize>,
    pub values: Array3<f64>,
    pub labels: Vec<usize>,
}

/// Mini-batches over `ds`; the last batch may be smaller.
pub fn batches(
    ds: &Dataset,
    batch_size: usize,
    seed: u64,
    shuffle: bool,
) -> Result<impl Iterator<Item = Batch> + '_> {
    if batch_size == 0 {
        return Err(Error::config("batch size must be at least 1"));
    }
    let order = batch_order(ds.len(), seed, shuffle);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    Ok(chunks.into_iter().map(move |indices| {
        let values = ds.values.select(Axis(0), &indices);
        let labels = if ds.labels.is_empty() {
            Vec::new()
        } else {
            indices.iter().map(|&i| ds.labels[i]).collect()
        };
        Batch {
            indices,
            values,
            labels,
        }
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array;

    fn labeled(values: Array3<f64>) -> Dataset {
        let m = values.dim().0;
        Dataset {
            values,
            labels: vec![0; m],
            label_names: vec!["a".into()],
            meta: DatasetMeta {
                class_label: true,
                ..Default::default()
            },
        }
    }

    #[test]
    fn batch_sizes() {
        let ds = labeled(Array3::zeros((10, 1, 4)));
        let sizes: Vec<usize> = batches(&ds, 4, 0, true)
            .unwrap()
            .map(|b| b.labels.len())
            .collect();
        assert_eq!(sizes, vec![4, 4, 2]);
    }

    #[test]
    fn shuffle_is_seeded() {
        assert_eq!(batch_order(20, 5, true), batch_order(20, 5, true));
        assert_ne!(batch_order(20, 5, true), batch_order(20, 6, true));
        assert_eq!(batch_order(5, 5, false), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn constant_channel_normalizes_to_zero() {
        let ds = labeled(Array::from_elem((3, 1, 5), 2.5));
        let (n, _, stats) = normalize(&ds, &[]).unwrap();
        assert_eq!(stats.std[0], STD_FLOOR);
        assert!(n.values.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn test_split_uses_train_stats() {
        let train = labeled(Array::from_shape_vec((2, 1, 2), vec![0., 2., 0., 2.]).unwrap());
        let test = labeled(Array::from_shape_vec((1, 1, 2), vec![10., 12.]).unwrap());
        let (_, others, stats) = normalize(&train, &[&test]).unwrap();
        assert_eq!(stats.mean, vec![1.0]);
        assert_eq!(stats.std, vec![1.0]);
        assert_eq!(
            others[0].values.iter().copied().collect::<Vec<_>>(),
            vec![9., 11.]
        );
    }

    #[test]
    fn zero_batch_size_rejected() {
        let ds = labeled(Array3::zeros((2, 1, 4)));
        assert!(batches(&ds, 0, 0, false).is_err());
    }
}
