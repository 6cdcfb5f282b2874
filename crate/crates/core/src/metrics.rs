//! Evaluation protocol: angular-error statistics for normal maps, masked
//! MAE/RMSE, and k-means light clustering with classification accuracy.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::grid::{Mask, NormalMap};
use crate::sh::ShCoefficients;

/// Angular-error summary in degrees. `pct_under` holds, for each requested
/// threshold, the fraction of masked pixels strictly below it.
#[derive(Debug, Clone)]
pub struct AngularStats {
    pub mean_deg: f64,
    pub std_deg: f64,
    pub pct_under: Vec<(f64, f64)>,
}

/// Per-pixel error arccos(pred·gt) over the mask; mean, std (over pixels)
/// and the strictly-below fraction per threshold.
pub fn angular_error_stats(
    pred: &NormalMap,
    gt: &NormalMap,
    mask: &Mask,
    thresholds: &[f64],
) -> Result<AngularStats> {
    if pred.dims() != gt.dims() || pred.dims() != mask.dims() {
        return Err(Error::DimensionMismatch(
            "normal maps and mask must share dimensions".into(),
        ));
    }
    let m = mask.require_nonempty("angular error")?;
    let mut errors = Vec::with_capacity(m);
    for (x, y) in mask.iter_true() {
        if !pred.is_valid(x, y) || !gt.is_valid(x, y) {
            return Err(Error::invalid(format!(
                "invalid normal at masked pixel ({x}, {y})"
            )));
        }
        let a = pred.get(x, y);
        let b = gt.get(x, y);
        let dot = (a[0] * b[0] + a[1] * b[1] + a[2] * b[2]).clamp(-1.0, 1.0);
        errors.push(dot.acos().to_degrees());
    }
    let n = errors.len() as f64;
    let mean = errors.iter().sum::<f64>() / n;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
    let pct_under = thresholds
        .iter()
        .map(|t| {
            let frac = errors.iter().filter(|e| **e < *t).count() as f64 / n;
            (*t, frac)
        })
        .collect();
    Ok(AngularStats {
        mean_deg: mean,
        std_deg: var.sqrt(),
        pct_under,
    })
}

/// Masked mean absolute error over all channels of two equally-shaped
/// slices-with-stride (3 for images, 1 for shading maps).
fn masked_channel_iter<'a>(
    a: &'a [f64],
    b: &'a [f64],
    mask: &'a Mask,
    channels: usize,
) -> impl Iterator<Item = (f64, f64)> + 'a {
    let w = mask.width();
    mask.iter_true().flat_map(move |(x, y)| {
        let base = channels * (y * w + x);
        (0..channels).map(move |c| (a[base + c], b[base + c]))
    })
}

fn check_metric_inputs(a_len: usize, b_len: usize, mask: &Mask, channels: usize) -> Result<()> {
    let want = mask.width() * mask.height() * channels;
    if a_len != want || b_len != want {
        return Err(Error::DimensionMismatch(format!(
            "metric inputs have {a_len}/{b_len} values, mask implies {want}"
        )));
    }
    mask.require_nonempty("metric")?;
    Ok(())
}

/// Masked mean absolute error. `channels` is 3 for images, 1 for shading.
pub fn mae(a: &[f64], b: &[f64], mask: &Mask, channels: usize) -> Result<f64> {
    check_metric_inputs(a.len(), b.len(), mask, channels)?;
    let n = (mask.count() * channels) as f64;
    Ok(masked_channel_iter(a, b, mask, channels)
        .map(|(x, y)| (x - y).abs())
        .sum::<f64>()
        / n)
}

/// Masked root-mean-square error.
pub fn rmse(a: &[f64], b: &[f64], mask: &Mask, channels: usize) -> Result<f64> {
    check_metric_inputs(a.len(), b.len(), mask, channels)?;
    let n = (mask.count() * channels) as f64;
    Ok((masked_channel_iter(a, b, mask, channels)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n)
        .sqrt())
}

/// K-means output: centroids, per-sample assignments, and the inertia after
/// each Lloyd iteration (non-increasing).
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Vec<ShCoefficients>,
    pub assignments: Vec<usize>,
    pub inertia_history: Vec<f64>,
}

fn sq_dist(a: &ShCoefficients, b: &ShCoefficients) -> f64 {
    a.0.iter()
        .zip(b.0.iter())
        .map(|(x, y)| (x - y) * (x - y))
        .sum()
}

pub fn nearest_centroid(l: &ShCoefficients, centroids: &[ShCoefficients]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (k, c) in centroids.iter().enumerate() {
        let d = sq_dist(l, c);
        if d < best_d {
            best_d = d;
            best = k;
        }
    }
    best
}

/// Lloyd's algorithm in 9-d Euclidean space with k-means++ seeding from the
/// given seed. Stops at an assignment fixpoint or after 300 iterations.
pub fn kmeans_lights(lights: &[ShCoefficients], k: usize, seed: u64) -> Result<KmeansResult> {
    if k == 0 || k > lights.len() {
        return Err(Error::invalid(format!(
            "k must lie in 1..={}, got {k}",
            lights.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);

    // k-means++ seeding
    let mut centroids: Vec<ShCoefficients> = Vec::with_capacity(k);
    centroids.push(lights[rng.random_range(0..lights.len())]);
    let mut d2: Vec<f64> = lights.iter().map(|l| sq_dist(l, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.random_range(0..lights.len())
        } else {
            let mut target = rng.random_range(0.0..total);
            let mut pick = lights.len() - 1;
            for (i, d) in d2.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        };
        centroids.push(lights[next]);
        for (i, l) in lights.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(l, centroids.last().unwrap()));
        }
    }

    let mut assignments = vec![0usize; lights.len()];
    let mut inertia_history = Vec::new();
    for _ in 0..300 {
        let mut changed = false;
        let mut inertia = 0.0;
        for (i, l) in lights.iter().enumerate() {
            let a = nearest_centroid(l, &centroids);
            inertia += sq_dist(l, &centroids[a]);
            if assignments[i] != a {
                assignments[i] = a;
                changed = true;
            }
        }
        inertia_history.push(inertia);
        // update step; empty clusters keep their previous centroid
        let mut sums = vec![[0.0; 9]; k];
        let mut counts = vec![0usize; k];
        for (i, l) in lights.iter().enumerate() {
            let a = assignments[i];
            counts[a] += 1;
            for c in 0..9 {
                sums[a][c] += l.0[c];
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let mut mean = [0.0; 9];
                for j in 0..9 {
                    mean[j] = sums[c][j] / counts[c] as f64;
                }
                centroids[c] = ShCoefficients(mean);
            }
        }
        if !changed && inertia_history.len() > 1 {
            break;
        }
    }

    Ok(KmeansResult {
        centroids,
        assignments,
        inertia_history,
    })
}

/// Fraction of predicted lights whose nearest centroid matches the
/// ground-truth class label.
pub fn light_classification_accuracy(
    pred: &[ShCoefficients],
    gt_labels: &[usize],
    centroids: &[ShCoefficients],
) -> Result<f64> {
    if pred.len() != gt_labels.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} predictions vs {} labels",
            pred.len(),
            gt_labels.len()
        )));
    }
    if pred.is_empty() {
        return Err(Error::InsufficientData("no predictions to classify".into()));
    }
    let hits = pred
        .iter()
        .zip(gt_labels.iter())
        .filter(|(l, label)| nearest_centroid(l, centroids) == **label)
        .count();
    Ok(hits as f64 / pred.len() as f64)
}
