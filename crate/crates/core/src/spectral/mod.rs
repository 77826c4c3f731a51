//! Amplitude spectra and main-period selection.
//!
//! A series of length `l` is summarized by the mean, over its variables, of
//! the FFT magnitude at bins `0..=l/2`. The dataset spectrum averages those
//! per-sample spectra; its `k` strongest non-DC bins become the periodic
//! scales of the model. Each scale folds a series onto a `period x frequency`
//! grid after zero padding to `period * frequency >= l`.

use std::sync::Arc;

use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean-over-variables FFT magnitude for bins `0..=l/2`.
#[derive(Clone, Debug, PartialEq)]
pub struct AmplitudeSpectrum {
    pub amp: Vec<f64>,
    pub series_length: usize,
}

/// One selected periodic scale.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodEntry {
    /// FFT bin, `1..=l/2`.
    pub frequency: usize,
    /// `ceil(l / frequency)`.
    pub period: usize,
    pub mean_amplitude: f64,
}

/// The `k` main periods of a dataset, strongest first.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PeriodSet {
    pub entries: Vec<PeriodEntry>,
    pub source_length: usize,
    /// Set when fewer than `k` bins carried energy and the remainder was
    /// filled with the lowest unused frequencies.
    #[serde(default)]
    pub degenerate: bool,
}

impl PeriodSet {
    pub fn k(&self) -> usize {
        self.entries.len()
    }

    pub fn frequencies(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.frequency).collect()
    }

    /// A single scale spanning the whole series (`frequency = 1`, `period = l`).
    pub fn whole_series(l: usize) -> Self {
        Self {
            entries: vec![PeriodEntry {
                frequency: 1,
                period: l,
                mean_amplitude: 0.0,
            }],
            source_length: l,
            degenerate: false,
        }
    }

    /// Builds a set from explicit frequencies, deriving periods from `l`.
    pub fn from_frequencies(l: usize, frequencies: &[usize]) -> Result<Self> {
        let mut entries = Vec::with_capacity(frequencies.len());
        for &f in frequencies {
            if f == 0 || f > (l / 2).max(1) {
                return Err(Error::config(format!(
                    "frequency {f} outside 1..={} for length {l}",
                    l / 2
                )));
            }
            if entries.iter().any(|e: &PeriodEntry| e.frequency == f) {
                return Err(Error::config(format!("duplicate frequency {f}")));
            }
            entries.push(PeriodEntry {
                frequency: f,
                period: l.div_ceil(f),
                mean_amplitude: 0.0,
            });
        }
        if entries.is_empty() {
            return Err(Error::config("a period set needs at least one frequency"));
        }
        Ok(Self {
            entries,
            source_length: l,
            degenerate: false,
        })
    }
}

/// Reusable real-input FFT of a fixed length.
struct Analyzer {
    fft: Arc<dyn Fft<f64>>,
    buf: Vec<Complex<f64>>,
    scratch: Vec<Complex<f64>>,
}

impl Analyzer {
    fn new(len: usize) -> Self {
        let fft = FftPlanner::new().plan_fft_forward(len);
        let scratch = vec![Complex::default(); fft.get_inplace_scratch_len()];
        Self {
            fft,
            buf: vec![Complex::default(); len],
            scratch,
        }
    }

    /// Adds `|FFT(row)|[b] / d` into `out[b]` for `b` in `0..out.len()`.
    fn accumulate(&mut self, row: impl Iterator<Item = f64>, d: f64, out: &mut [f64]) {
        for (c, x) in self.buf.iter_mut().zip(row) {
            *c = Complex::new(x, 0.0);
        }
        self.fft
            .process_with_scratch(&mut self.buf, &mut self.scratch);
        for (o, c) in out.iter_mut().zip(&self.buf) {
            *o += c.norm() / d;
        }
    }

    fn spectrum(&mut self, x: ArrayView2<f64>) -> Vec<f64> {
        let (d, l) = x.dim();
        let mut amp = vec![0.0; l / 2 + 1];
        for row in x.rows() {
            self.accumulate(row.iter().copied(), d as f64, &mut amp);
        }
        amp
    }
}

fn check_series(x: ArrayView2<f64>) -> Result<()> {
    let (d, l) = x.dim();
    if d == 0 {
        return Err(Error::Data("series has no variables".into()));
    }
    if l < 4 {
        return Err(Error::Data(format!(
            "series length {l} is below the minimum of 4"
        )));
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("series contains non-finite values".into()));
    }
    Ok(())
}

/// Amplitude spectrum of one `d x l` series.
pub fn compute_amplitude_spectrum(x: ArrayView2<f64>) -> Result<AmplitudeSpectrum> {
    check_series(x)?;
    let l = x.ncols();
    Ok(AmplitudeSpectrum {
        amp: Analyzer::new(l).spectrum(x),
        series_length: l,
    })
}

/// Unweighted mean of the per-sample spectra of an `m x d x l` array.
///
/// Each bin is summed in sorted order, so the result does not depend on the
/// order of the samples.
pub fn dataset_spectrum(values: ArrayView3<f64>) -> Result<AmplitudeSpectrum> {
    let (m, _, l) = values.dim();
    if m == 0 {
        return Err(Error::Data("dataset has no samples".into()));
    }
    let mut an = Analyzer::new(l);
    let mut per_bin: Vec<Vec<f64>> = vec![Vec::with_capacity(m); l / 2 + 1];
    for sample in values.outer_iter() {
        check_series(sample)?;
        for (bin, a) in per_bin.iter_mut().zip(an.spectrum(sample)) {
            bin.push(a);
        }
    }
    let amp = per_bin
        .into_iter()
        .map(|mut v| {
            v.sort_by(f64::total_cmp);
            v.iter().sum::<f64>() / m as f64
        })
        .collect();
    Ok(AmplitudeSpectrum {
        amp,
        series_length: l,
    })
}

/// Selects the `k` strongest bins in `1..=l/2`.
///
/// Ties go to the lower frequency. Bins whose amplitude is negligible
/// relative to the largest bin (DC included) do not count as carrying energy;
/// if fewer than `k` bins do, the set is completed with the lowest unused
/// frequencies and marked degenerate.
pub fn identify_main_periods(spectrum: &AmplitudeSpectrum, k: usize) -> Result<PeriodSet> {
    let l = spectrum.series_length;
    let max_bin = l / 2;
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    if k > max_bin {
        return Err(Error::config(format!(
            "k = {k} exceeds the {max_bin} usable frequency bins of a length-{l} series"
        )));
    }
    let peak = spectrum.amp.iter().copied().fold(0.0, f64::max);
    let floor = (peak * 1e-10).max(1e-12);
    let mut bins: Vec<usize> = (1..=max_bin).filter(|&f| spectrum.amp[f] > floor).collect();
    bins.sort_by(|&a, &b| spectrum.amp[b].total_cmp(&spectrum.amp[a]).then(a.cmp(&b)));
    bins.truncate(k);
    let degenerate = bins.len() < k;
    if degenerate {
        log::warn!(
            "only {} of {k} requested frequency bins carry energy; padding with the lowest unused frequencies",
            bins.len()
        );
        let mut f = 1;
        while bins.len() < k {
            if !bins.contains(&f) {
                bins.push(f);
            }
            f += 1;
        }
    }
    Ok(PeriodSet {
        entries: bins
            .into_iter()
            .map(|f| PeriodEntry {
                frequency: f,
                period: l.div_ceil(f),
                mean_amplitude: spectrum.amp[f],
            })
            .collect(),
        source_length: l,
        degenerate,
    })
}

/// Zero-pads `x[d, l]` to `period * frequency` steps and folds it to
/// `[d, period, frequency]`; column `j` holds steps `j*period..(j+1)*period`.
pub fn pad_and_reshape(x: ArrayView2<f64>, frequency: usize, period: usize) -> Result<Array3<f64>> {
    let (d, l) = x.dim();
    if frequency == 0 || period == 0 || period * frequency < l {
        return Err(Error::shape(format!(
            "period {period} x frequency {frequency} does not cover length {l}"
        )));
    }
    let mut out = Array3::zeros((d, period, frequency));
    for v in 0..d {
        for t in 0..l {
            out[[v, t % period, t / period]] = x[[v, t]];
        }
    }
    Ok(out)
}

/// Inverse of [`pad_and_reshape`]: unfolds `[d, period, frequency]` back to
/// `[d, period * frequency]`, padding included.
pub fn unreshape(folded: ArrayView3<f64>) -> Array2<f64> {
    let (d, p, f) = folded.dim();
    let mut out = Array2::zeros((d, p * f));
    for v in 0..d {
        for j in 0..f {
            for i in 0..p {
                out[[v, j * p + i]] = folded[[v, i, j]];
            }
        }
    }
    out
}

/// Per-sample mean-over-variables amplitude at each frequency of
/// `periods`, for a `B x d x l` batch. Returns `[B, k]`.
pub fn query_batch_amplitudes(batch: ArrayView3<f64>, periods: &PeriodSet) -> Result<Array2<f64>> {
    let (b, _, l) = batch.dim();
    if l != periods.source_length {
        return Err(Error::shape(format!(
            "batch length {l} differs from the period set's source length {}",
            periods.source_length
        )));
    }
    let mut an = Analyzer::new(l);
    let mut out = Array2::zeros((b, periods.k()));
    for (i, sample) in batch.outer_iter().enumerate() {
        check_series(sample)?;
        let amp = an.spectrum(sample);
        for (j, e) in periods.entries.iter().enumerate() {
            out[[i, j]] = amp[e.frequency];
        }
    }
    Ok(out)
}

/// Numerically stable softmax of amplitudes into aggregation weights.
pub fn amplitude_weights(amps: &[f64]) -> Vec<f64> {
    let mx = amps.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = amps.iter().map(|&a| (a - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}
