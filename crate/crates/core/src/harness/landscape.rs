//! 2-D loss-landscape slices along filter-normalized random directions.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::data::Dataset;
use super::model::{FilterLayout, Model, PassPrecision};
use super::train::evaluate_loss;
use crate::error::{Error, Result};

/// Index lists of the filters inside one parameter tensor.
pub fn filter_indices(len: usize, layout: FilterLayout) -> Vec<Vec<usize>> {
    match layout {
        FilterLayout::Rows(count) => {
            let per = len / count.max(1);
            (0..count).map(|f| (f * per..(f + 1) * per).collect()).collect()
        }
        FilterLayout::Columns { rows, cols } => (0..cols)
            .map(|c| (0..rows).map(|r| r * cols + c).collect())
            .collect(),
        FilterLayout::Bias => Vec::new(),
    }
}

pub fn filter_norms(values: &[f64], layout: FilterLayout) -> Vec<f64> {
    filter_indices(values.len(), layout)
        .iter()
        .map(|idx| idx.iter().map(|&i| values[i] * values[i]).sum::<f64>().sqrt())
        .collect()
}

/// Gaussian direction rescaled so each filter has the norm of the matching
/// filter in `params`. Bias directions are zero.
pub fn filter_normalized_direction(
    params: &[Vec<f64>],
    layouts: &[FilterLayout],
    rng: &mut ChaCha8Rng,
) -> Result<Vec<Vec<f64>>> {
    if params.len() != layouts.len() {
        return Err(Error::shape("landscape", "one layout per parameter tensor required"));
    }
    let mut out = Vec::with_capacity(params.len());
    for (p, &layout) in params.iter().zip(layouts) {
        let mut d: Vec<f64> = (0..p.len()).map(|_| StandardNormal.sample(rng)).collect();
        if layout == FilterLayout::Bias {
            d.iter_mut().for_each(|v| *v = 0.0);
        }
        for idx in filter_indices(p.len(), layout) {
            let wn = idx.iter().map(|&i| p[i] * p[i]).sum::<f64>().sqrt();
            let dn = idx.iter().map(|&i| d[i] * d[i]).sum::<f64>().sqrt();
            let scale = if dn > 0.0 { wn / dn } else { 0.0 };
            for &i in &idx {
                d[i] *= scale;
            }
        }
        out.push(d);
    }
    Ok(out)
}

/// Loss at `center + alphas[i]·d1 + betas[j]·d2` in `losses[i][j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    pub losses: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let c = self.alphas.len() / 2;
        self.losses[c][c]
    }

    /// Header row `alpha\beta,β…`, then one row per α. Non-finite cells print as `NaN`/`inf`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("alpha\\beta");
        for b in &self.betas {
            out.push_str(&format!(",{b}"));
        }
        out.push('\n');
        for (a, row) in self.alphas.iter().zip(&self.losses) {
            out.push_str(&a.to_string());
            for l in row {
                out.push_str(&format!(",{l}"));
            }
            out.push('\n');
        }
        out
    }
}

/// `points` evenly spaced values on `[-half_width, half_width]` with an exact 0 in the middle.
pub fn axis(half_width: f64, points: usize) -> Result<Vec<f64>> {
    if points.is_multiple_of(2) {
        return Err(Error::Invalid(format!("grid_points must be odd, got {points}")));
    }
    if !(half_width > 0.0) || !half_width.is_finite() {
        return Err(Error::Invalid("grid_half_width must be positive".into()));
    }
    let c = (points / 2) as f64;
    Ok((0..points)
        .map(|i| if points == 1 { 0.0 } else { half_width * (i as f64 - c) / c })
        .collect())
}

/// Evaluates `loss` over the grid. A [`Error::NonFinite`] from `loss` is
/// recorded as a NaN cell; other errors abort.
pub fn landscape_over<F>(
    center: &[Vec<f64>],
    d1: &[Vec<f64>],
    d2: &[Vec<f64>],
    half_width: f64,
    points: usize,
    mut loss: F,
) -> Result<LandscapeGrid>
where
    F: FnMut(&[Vec<f64>]) -> Result<f64>,
{
    let shapes_match = |d: &[Vec<f64>]| {
        d.len() == center.len() && d.iter().zip(center).all(|(a, b)| a.len() == b.len())
    };
    if !shapes_match(d1) || !shapes_match(d2) {
        return Err(Error::shape("landscape", "directions differ from the parameters"));
    }
    let alphas = axis(half_width, points)?;
    let betas = alphas.clone();
    let mut losses = Vec::with_capacity(points);
    let mut probe: Vec<Vec<f64>> = center.to_vec();
    for &a in &alphas {
        let mut row = Vec::with_capacity(points);
        for &b in &betas {
            for (k, p) in probe.iter_mut().enumerate() {
                for (i, v) in p.iter_mut().enumerate() {
                    *v = center[k][i] + (a * d1[k][i] + b * d2[k][i]);
                }
            }
            row.push(match loss(&probe) {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => f64::NAN,
                Err(e) => return Err(e),
            });
        }
        losses.push(row);
    }
    Ok(LandscapeGrid {
        alphas,
        betas,
        losses,
    })
}

/// Cross-entropy landscape of `model` on `data` along two filter-normalized
/// directions drawn from `seed`.
pub fn loss_landscape(
    model: &Model,
    data: &Dataset,
    precision: &PassPrecision,
    half_width: f64,
    points: usize,
    seed: u64,
) -> Result<LandscapeGrid> {
    let center: Vec<Vec<f64>> = model.params().iter().map(|p| p.data().to_vec()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d1 = filter_normalized_direction(&center, model.filter_layouts(), &mut rng)?;
    let d2 = filter_normalized_direction(&center, model.filter_layouts(), &mut rng)?;
    let mut probe = model.clone();
    landscape_over(&center, &d1, &d2, half_width, points, |values| {
        for (p, v) in probe.params_mut().iter_mut().zip(values) {
            p.data_mut().copy_from_slice(v);
        }
        evaluate_loss(&probe, data, precision)
    })
}
