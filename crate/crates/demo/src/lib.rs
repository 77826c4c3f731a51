//! Browser demo: generate a planted-period series, look at its spectrum and
//! main periods, fold it onto a period grid, and view the attention maps of a
//! randomly initialized model. Every export returns a JSON string.

use ndarray::{Array2, Array3, Axis};
use serde::Serialize;
use wasm_bindgen::prelude::*;

use mptsnet::data::{normalize, synth_planted_periods, Dataset, SynthSpec};
use mptsnet::model::{AttentionRecord, Model, ModelConfig};
use mptsnet::spectral::{
    compute_amplitude_spectrum, identify_main_periods, pad_and_reshape, PeriodEntry,
};
use mptsnet::{Error, Result};

#[derive(Serialize)]
pub struct SpectrumView {
    /// `[d][l]`, z-scored per variable.
    pub series: Vec<Vec<f64>>,
    /// Mean amplitude per bin `0..=l/2`.
    pub amplitude: Vec<f64>,
    pub periods: Vec<PeriodEntry>,
    pub degenerate: bool,
}

#[derive(Serialize)]
pub struct FoldView {
    pub period: usize,
    pub frequency: usize,
    /// `[d][period][frequency]`; column `j` is segment `j`.
    pub grid: Vec<Vec<Vec<f64>>>,
}

#[derive(Serialize)]
pub struct AttentionView {
    pub periods: Vec<PeriodEntry>,
    pub logits: Vec<f64>,
    pub blocks: Vec<AttentionRecord>,
}

fn parse_periods(spec: &str) -> Result<Vec<f64>> {
    spec.split(['+', ',', ' '])
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| Error::Usage(format!("{s:?} is not a period")))
        })
        .collect()
}

/// One normalized sample with `dims` variables carrying the given periods.
pub fn sample(
    periods: &str,
    dims: usize,
    length: usize,
    noise: f64,
    seed: u64,
) -> Result<Array2<f64>> {
    let spec = SynthSpec {
        classes: vec![parse_periods(periods)?],
        dims,
        length,
        per_class: 1,
        noise_std: noise,
        seed,
    };
    let ds: Dataset = synth_planted_periods(&spec)?;
    let (n, _, _) = normalize(&ds, &[])?;
    Ok(n.values.index_axis_move(Axis(0), 0))
}

fn rows(x: &Array2<f64>) -> Vec<Vec<f64>> {
    x.rows().into_iter().map(|r| r.to_vec()).collect()
}

pub fn spectrum_view(x: &Array2<f64>, k: usize) -> Result<SpectrumView> {
    let spectrum = compute_amplitude_spectrum(x.view())?;
    let periods = identify_main_periods(&spectrum, k)?;
    Ok(SpectrumView {
        series: rows(x),
        amplitude: spectrum.amp,
        periods: periods.entries,
        degenerate: periods.degenerate,
    })
}

pub fn fold_view(x: &Array2<f64>, period: usize) -> Result<FoldView> {
    let l = x.ncols();
    if period == 0 || period > l {
        return Err(Error::Usage(format!("period must lie in 1..={l}")));
    }
    let frequency = l.div_ceil(period);
    let folded = pad_and_reshape(x.view(), frequency, period)?;
    let grid = folded
        .outer_iter()
        .map(|v| v.rows().into_iter().map(|r| r.to_vec()).collect())
        .collect();
    Ok(FoldView {
        period,
        frequency,
        grid,
    })
}

pub fn attention_view(
    x: &Array2<f64>,
    k: usize,
    d_embed: usize,
    seed: u64,
) -> Result<AttentionView> {
    let (d, l) = x.dim();
    let periods = identify_main_periods(&compute_amplitude_spectrum(x.view())?, k)?;
    let mut cfg = ModelConfig::new(d, l, 2);
    cfg.k = k;
    cfg.d_embed = d_embed;
    cfg.heads = if d_embed.is_multiple_of(4) { 4 } else { 1 };
    let model = Model::<f64>::init(cfg, periods.clone(), seed)?;
    let batch: Array3<f64> = x.clone().insert_axis(Axis(0));
    let mut out = model.forward(batch.view())?;
    Ok(AttentionView {
        periods: periods.entries,
        logits: out.logits.row(0).to_vec(),
        blocks: out.attention.swap_remove(0),
    })
}

fn js<T: Serialize>(r: Result<T>) -> Result<String, JsValue> {
    r.map(|v| serde_json::to_string(&v).expect("plain data serializes"))
        .map_err(|e| JsValue::from_str(&e.to_string()))
}

/// Spectrum and the `k` main periods of a generated sample.
#[wasm_bindgen]
pub fn spectrum(
    periods: &str,
    dims: usize,
    length: usize,
    noise: f64,
    seed: u32,
    k: usize,
) -> Result<String, JsValue> {
    js(sample(periods, dims, length, noise, seed.into()).and_then(|x| spectrum_view(&x, k)))
}

/// The generated sample folded onto `period`-step segments.
#[wasm_bindgen]
pub fn fold(
    periods: &str,
    dims: usize,
    length: usize,
    noise: f64,
    seed: u32,
    period: usize,
) -> Result<String, JsValue> {
    js(sample(periods, dims, length, noise, seed.into()).and_then(|x| fold_view(&x, period)))
}

/// Attention maps of an untrained model on the generated sample.
#[wasm_bindgen]
pub fn attention(
    periods: &str,
    dims: usize,
    length: usize,
    noise: f64,
    seed: u32,
    k: usize,
    model_seed: u32,
) -> Result<String, JsValue> {
    js(sample(periods, dims, length, noise, seed.into())
        .and_then(|x| attention_view(&x, k, 16, model_seed.into())))
}
