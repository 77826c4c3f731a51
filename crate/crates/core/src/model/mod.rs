//! The network: embedding, stacked residual periodic blocks, and a linear
//! classification head.
//!
//! Each block folds the embedded timeline onto every main period, runs the
//! multi-kernel local extractor inside each period segment, pools segments to
//! tokens, relates the tokens with multi-head self-attention, spreads the
//! attended features back over their segments, and sums the scales with
//! softmax weights of the sample's own spectral amplitudes.

pub mod layers;
mod params;

use ndarray::{Array2, ArrayView2, ArrayView3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tape, Tensor};
use crate::spectral::{query_batch_amplitudes, PeriodSet};

pub use params::{Affine, BlockParams, ModelParams, ParamTree};

/// Ablation variants of the block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    #[default]
    Full,
    /// Skips the convolutional local extractor.
    NoLocal,
    /// Skips attention; local features go straight back to the timeline.
    NoGlobal,
    /// One scale covering the whole series instead of FFT periods.
    NoMp,
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "no-local" | "no_local" => Ok(Self::NoLocal),
            "no-global" | "no_global" => Ok(Self::NoGlobal),
            "no-mp" | "no_mp" => Ok(Self::NoMp),
            other => Err(Error::config(format!(
                "unknown variant {other:?}; expected full, no-local, no-global or no-mp"
            ))),
        }
    }
}

/// How the parallel convolution branches are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BranchMerge {
    #[default]
    Mean,
    /// Channel concatenation followed by a 1x1 convolution back to `d_embed`.
    ConcatProject,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_dims: usize,
    pub series_length: usize,
    pub num_classes: usize,
    /// Number of periodic scales.
    pub k: usize,
    pub d_embed: usize,
    pub num_blocks: usize,
    pub heads: usize,
    pub kernel_sizes: Vec<usize>,
    #[serde(default)]
    pub variant: Variant,
    #[serde(default)]
    pub branch_merge: BranchMerge,
}

impl ModelConfig {
    /// Defaults: `k = 5`, `d_embed = 32`, two blocks, four heads, kernels
    /// `{1, 3, 5, 7, 9, 11}`.
    pub fn new(input_dims: usize, series_length: usize, num_classes: usize) -> Self {
        Self {
            input_dims,
            series_length,
            num_classes,
            k: 5,
            d_embed: 32,
            num_blocks: 2,
            heads: 4,
            kernel_sizes: vec![1, 3, 5, 7, 9, 11],
            variant: Variant::Full,
            branch_merge: BranchMerge::Mean,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_embed / self.heads.max(1)
    }

    /// Sets the variant; `NoMp` forces a single scale.
    pub fn with_variant(mut self, variant: Variant) -> Self {
        self.variant = variant;
        if variant == Variant::NoMp {
            self.k = 1;
        }
        self
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.input_dims == 0 || self.num_classes == 0 {
            return fail("input dims and class count must be positive".into());
        }
        if self.series_length < 4 {
            return fail(format!("series length {} is below 4", self.series_length));
        }
        if self.k == 0 {
            return fail("k must be at least 1".into());
        }
        if self.variant == Variant::NoMp && self.k != 1 {
            return fail("the no-mp variant uses exactly one scale (k = 1)".into());
        }
        if self.variant != Variant::NoMp && self.k > self.series_length / 2 {
            return fail(format!(
                "k = {} exceeds the {} frequency bins of a length-{} series",
                self.k,
                self.series_length / 2,
                self.series_length
            ));
        }
        if self.num_blocks == 0 || self.d_embed == 0 {
            return fail("num_blocks and d_embed must be positive".into());
        }
        if self.heads == 0 || !self.d_embed.is_multiple_of(self.heads) {
            return fail(format!(
                "heads ({}) must divide d_embed ({})",
                self.heads, self.d_embed
            ));
        }
        if self.kernel_sizes.is_empty() || self.kernel_sizes.iter().any(|&k| k % 2 == 0) {
            return fail(format!(
                "kernel sizes must be a non-empty list of odd numbers, got {:?}",
                self.kernel_sizes
            ));
        }
        Ok(())
    }

    /// Checks that `periods` can drive this configuration.
    pub fn check_periods(&self, periods: &PeriodSet) -> Result<()> {
        if periods.source_length != self.series_length {
            return Err(Error::config(format!(
                "period set was computed for length {}, model expects {}",
                periods.source_length, self.series_length
            )));
        }
        if periods.k() != self.k {
            return Err(Error::config(format!(
                "model has k = {} but the period set holds {} periods",
                self.k,
                periods.k()
            )));
        }
        if self.variant == Variant::NoMp && *periods != PeriodSet::whole_series(self.series_length)
        {
            return Err(Error::config(
                "the no-mp variant needs the whole-series period set",
            ));
        }
        for e in &periods.entries {
            if e.period * e.frequency < self.series_length {
                return Err(Error::config(format!(
                    "period {} x frequency {} does not cover length {}",
                    e.period, e.frequency, self.series_length
                )));
            }
        }
        Ok(())
    }
}

/// Attention of one scale within one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleAttention {
    pub frequency: usize,
    pub period: usize,
    pub alpha: f64,
    /// `f x f`, averaged over heads; empty when the block has no attention.
    pub attention: Vec<Vec<f64>>,
}

/// Per-scale attention maps of one block for one sample, and their
/// amplitude-weighted composite over the original timeline.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub block: usize,
    pub scales: Vec<ScaleAttention>,
    /// Length `l`. Each step receives, from every scale, the mean attention
    /// its segment receives (column mean), weighted by that scale's alpha.
    pub composite: Vec<f64>,
}

impl AttentionRecord {
    fn build(
        block: usize,
        periods: &PeriodSet,
        alpha: &[f64],
        maps: Vec<Option<Tensor<f64>>>,
        l: usize,
    ) -> Self {
        let mut composite = vec![0.0; l];
        let mut scales = Vec::with_capacity(periods.k());
        for ((e, &a), map) in periods.entries.iter().zip(alpha).zip(maps) {
            let attention = match map {
                None => Vec::new(),
                Some(t) => {
                    let (h, f) = (t.shape()[0], t.shape()[1]);
                    let d = t.data();
                    let mut avg = vec![vec![0.0; f]; f];
                    for head in 0..h {
                        for (i, row) in avg.iter_mut().enumerate() {
                            for (j, v) in row.iter_mut().enumerate() {
                                *v += d[(head * f + i) * f + j];
                            }
                        }
                    }
                    for row in &mut avg {
                        row.iter_mut().for_each(|v| *v /= h as f64);
                    }
                    let received: Vec<f64> = (0..f)
                        .map(|j| avg.iter().map(|row| row[j]).sum::<f64>() / f as f64)
                        .collect();
                    for (t, c) in composite.iter_mut().enumerate() {
                        *c += a * received[t / e.period];
                    }
                    avg
                }
            };
            scales.push(ScaleAttention {
                frequency: e.frequency,
                period: e.period,
                alpha: a,
                attention,
            });
        }
        Self {
            block,
            scales,
            composite,
        }
    }
}

/// Logits and attention records for a batch.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// `[B, C]`
    pub logits: Array2<f64>,
    /// Per sample, one record per block.
    pub attention: Vec<Vec<AttentionRecord>>,
}

/// Result of a training forward/backward pass over one batch.
pub struct BatchGrad<T> {
    /// Mean cross-entropy over the batch.
    pub loss: f64,
    /// Gradient of the mean loss.
    pub grads: ModelParams<T>,
    pub logits: Array2<f64>,
}

/// Configuration, main periods and weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub periods: PeriodSet,
    pub params: ModelParams<T>,
}

struct SampleOut<T> {
    logits: Vec<f64>,
    loss: f64,
    grads: Option<ModelParams<T>>,
    attention: Vec<AttentionRecord>,
}

impl<T: Real> Model<T> {
    pub fn new(config: ModelConfig, periods: PeriodSet, params: ModelParams<T>) -> Result<Self> {
        config.validate()?;
        config.check_periods(&periods)?;
        params.check_shapes(&config)?;
        Ok(Self {
            config,
            periods,
            params,
        })
    }

    pub fn init(config: ModelConfig, periods: PeriodSet, seed: u64) -> Result<Self> {
        let params = ModelParams::init(&config, seed)?;
        Self::new(config, periods, params)
    }

    fn check_batch(&self, batch: ArrayView3<f64>) -> Result<()> {
        let (_, d, l) = batch.dim();
        if d != self.config.input_dims || l != self.config.series_length {
            return Err(Error::config(format!(
                "model expects {} variables of length {}, batch has {d} of length {l}",
                self.config.input_dims, self.config.series_length
            )));
        }
        Ok(())
    }

    fn run_sample(
        &self,
        x: ArrayView2<f64>,
        amps: &[f64],
        label: Option<usize>,
        record: bool,
    ) -> Result<SampleOut<T>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let (d, l) = x.dim();
        let input = Tensor::new(vec![d, l], x.iter().map(|&v| T::of(v)).collect())?;
        let xv = tape.constant(input);
        let (logits_var, traces) =
            layers::forward_sample(&mut tape, xv, amps, &bound, &self.periods, &self.config)?;
        let logits = tape.value(logits_var).to_f64_vec();
        let attention = if record {
            traces
                .into_iter()
                .enumerate()
                .map(|(b, tr)| {
                    let maps = tr
                        .attention
                        .iter()
                        .map(|a| a.map(|v| tape.value(v).cast::<f64>()))
                        .collect();
                    AttentionRecord::build(b, &self.periods, &tr.alpha, maps, l)
                })
                .collect()
        } else {
            Vec::new()
        };
        let (loss, grads) = match label {
            None => (f64::NAN, None),
            Some(y) => {
                let c = logits.len();
                let row = tape.reshape(logits_var, &[1, c])?;
                let loss = tape.cross_entropy(row, &[y])?;
                tape.backward(loss)?;
                (
                    tape.value(loss).item().to_f64_lossy(),
                    Some(self.params.collect_grads(&tape, &bound)),
                )
            }
        };
        Ok(SampleOut {
            logits,
            loss,
            grads,
            attention,
        })
    }

    fn run_batch(
        &self,
        batch: ArrayView3<f64>,
        labels: Option<&[usize]>,
        record: bool,
    ) -> Result<Vec<SampleOut<T>>> {
        self.check_batch(batch)?;
        let amps = query_batch_amplitudes(batch, &self.periods)?;
        let job = |i: usize| {
            let amp_row = amps.row(i).to_vec();
            self.run_sample(
                batch.index_axis(ndarray::Axis(0), i),
                &amp_row,
                labels.map(|y| y[i]),
                record,
            )
        };
        let n = batch.dim().0;
        #[cfg(feature = "parallel")]
        let outs: Vec<Result<SampleOut<T>>> = {
            use rayon::prelude::*;
            (0..n).into_par_iter().map(job).collect()
        };
        #[cfg(not(feature = "parallel"))]
        let outs: Vec<Result<SampleOut<T>>> = (0..n).map(job).collect();
        outs.into_iter().collect()
    }

    fn stack_logits(&self, outs: &[SampleOut<T>]) -> Array2<f64> {
        let c = self.config.num_classes;
        let mut logits = Array2::zeros((outs.len(), c));
        for (i, o) in outs.iter().enumerate() {
            for (j, &v) in o.logits.iter().enumerate() {
                logits[[i, j]] = v;
            }
        }
        logits
    }

    /// Logits and attention records for a normalized `[B, d, l]` batch.
    pub fn forward(&self, batch: ArrayView3<f64>) -> Result<ForwardOutput> {
        let outs = self.run_batch(batch, None, true)?;
        let logits = self.stack_logits(&outs);
        Ok(ForwardOutput {
            logits,
            attention: outs.into_iter().map(|o| o.attention).collect(),
        })
    }

    /// Logits only.
    pub fn predict_logits(&self, batch: ArrayView3<f64>) -> Result<Array2<f64>> {
        let outs = self.run_batch(batch, None, false)?;
        Ok(self.stack_logits(&outs))
    }

    /// Mean cross-entropy and its gradient over a labeled batch.
    ///
    /// Every sample is differentiated on its own tape; per-sample gradients
    /// are summed in batch order, so the result is independent of how the
    /// samples were scheduled across threads.
    pub fn loss_and_grads(&self, batch: ArrayView3<f64>, labels: &[usize]) -> Result<BatchGrad<T>> {
        if labels.len() != batch.dim().0 || labels.is_empty() {
            return Err(Error::shape(format!(
                "{} labels for a batch of {}",
                labels.len(),
                batch.dim().0
            )));
        }
        let outs = self.run_batch(batch, Some(labels), false)?;
        let logits = self.stack_logits(&outs);
        let inv = T::one() / T::of(outs.len() as f64);
        let mut grads = self.params.zeros_like();
        let mut loss = 0.0;
        for o in outs {
            loss += o.loss;
            let g = o.grads.expect("labels were given");
            for (acc, gi) in grads.slots_mut().into_iter().zip(g.entries()) {
                acc.add_assign(gi.1);
            }
        }
        for g in grads.slots_mut() {
            g.scale_in_place(inv);
        }
        Ok(BatchGrad {
            loss: loss / labels.len() as f64,
            grads,
            logits,
        })
    }
}
