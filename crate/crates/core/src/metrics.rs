//! Distribution, diversity and synchrony metrics over generated motion.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{ArrayView1, ArrayView2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ElpError, Result};

fn same_len(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(ElpError::LengthMismatch { what, left: a, right: b })
    }
}

/// Pearson correlation; zero when either side has zero variance or fewer
/// than two samples.
fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    if x.len() < 2 {
        return 0.0;
    }
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (da, db) = (a - mx, b - my);
        sxy += da * db;
        sxx += da * da;
        syy += db * db;
    }
    if sxx == 0.0 || syy == 0.0 {
        return 0.0;
    }
    (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0)
}

pub fn pcc(x: &[f64], y: &[f64]) -> Result<f64> {
    same_len("pcc", x.len(), y.len())?;
    if x.len() < 2 {
        return Err(ElpError::TooShort {
            what: "pcc",
            min: 2,
            found: x.len(),
        });
    }
    Ok(pearson(x, y))
}

fn column(a: ArrayView2<'_, f64>, d: usize) -> Vec<f64> {
    a.column(d).to_vec()
}

fn same_shape(what: &'static str, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<()> {
    same_len(what, a.nrows(), b.nrows())?;
    if a.ncols() != b.ncols() {
        return Err(ElpError::WidthMismatch {
            what,
            expected: a.ncols(),
            found: b.ncols(),
        });
    }
    Ok(())
}

/// Mean over dims of `|pcc(speaker, gen) - pcc(speaker, gt)|`.
pub fn rpcc(speaker: ArrayView2<'_, f64>, gen: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape("rpcc", speaker, gen)?;
    same_shape("rpcc", speaker, gt)?;
    let dims = speaker.ncols();
    let mut acc = 0.0;
    for d in 0..dims {
        let s = column(speaker, d);
        acc += (pcc(&s, &column(gen, d))? - pcc(&s, &column(gt, d))?).abs();
    }
    Ok(acc / dims as f64)
}

/// Windowed lagged correlation: windows of `window` frames at stride
/// `window / 2`, max over lags in `[-max_lag, max_lag]` (positive lag pairs
/// `x[i]` with `y[i + lag]`), mean over windows.
pub fn wtlcc(x: &[f64], y: &[f64], window: usize, max_lag: usize) -> Result<f64> {
    same_len("wtlcc", x.len(), y.len())?;
    if window < 3 {
        return Err(ElpError::invalid(format!("wtlcc window must be at least 3 frames, got {window}")));
    }
    if window > x.len() {
        return Err(ElpError::TooShort {
            what: "wtlcc window",
            min: window,
            found: x.len(),
        });
    }
    if max_lag >= window {
        return Err(ElpError::invalid(format!(
            "wtlcc max_lag {max_lag} must be below the window {window}"
        )));
    }
    let stride = window / 2;
    let mut total = 0.0;
    let mut count = 0usize;
    let mut start = 0;
    while start + window <= x.len() {
        let xw = &x[start..start + window];
        let yw = &y[start..start + window];
        let mut best = f64::NEG_INFINITY;
        for lag in -(max_lag as isize)..=(max_lag as isize) {
            let r = if lag >= 0 {
                let l = lag as usize;
                pearson(&xw[..window - l], &yw[l..])
            } else {
                let l = (-lag) as usize;
                pearson(&xw[l..], &yw[..window - l])
            };
            best = best.max(r);
        }
        total += best;
        count += 1;
        start += stride;
    }
    Ok(total / count as f64)
}

/// Motion synchrony: per-dim [`wtlcc`] of speaker against listener, averaged.
pub fn motion_wtlcc(
    speaker: ArrayView2<'_, f64>,
    listener: ArrayView2<'_, f64>,
    window: usize,
    max_lag: usize,
) -> Result<f64> {
    same_shape("motion wtlcc", speaker, listener)?;
    let dims = speaker.ncols();
    let mut acc = 0.0;
    for d in 0..dims {
        acc += wtlcc(&column(speaker, d), &column(listener, d), window, max_lag)?;
    }
    Ok(acc / dims as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FdMode {
    Gaussian,
    L1,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrechetResult {
    pub value: f64,
    /// Negative eigenvalues clamped to zero across both decompositions.
    pub clamped: usize,
}

fn to_matrix(a: ArrayView2<'_, f64>) -> DMatrix<f64> {
    DMatrix::from_fn(a.nrows(), a.ncols(), |i, j| a[[i, j]])
}

fn moments(a: &DMatrix<f64>) -> (DVector<f64>, DMatrix<f64>) {
    let n = a.nrows() as f64;
    let mean = a.row_mean().transpose();
    let mut centered = a.clone();
    for mut row in centered.row_iter_mut() {
        row -= mean.transpose();
    }
    let cov = centered.transpose() * &centered / (n - 1.0);
    (mean, cov)
}

fn sym_eigen(m: &DMatrix<f64>) -> SymmetricEigen<f64, nalgebra::Dyn> {
    let sym = (m + m.transpose()) * 0.5;
    SymmetricEigen::new(sym)
}

/// Gaussian Fréchet distance between two fitted moment pairs.
pub fn frechet_from_moments(
    mu_g: &DVector<f64>,
    cov_g: &DMatrix<f64>,
    mu_t: &DVector<f64>,
    cov_t: &DMatrix<f64>,
) -> FrechetResult {
    let mut clamped = 0;
    let eg = sym_eigen(cov_g);
    let sqrt_vals = eg.eigenvalues.map(|l| {
        if l < 0.0 {
            clamped += 1;
        }
        l.max(0.0).sqrt()
    });
    let sqrt_g = &eg.eigenvectors * DMatrix::from_diagonal(&sqrt_vals) * eg.eigenvectors.transpose();
    let inner = &sqrt_g * cov_t * &sqrt_g;
    let ei = sym_eigen(&inner);
    let tr_sqrt: f64 = ei
        .eigenvalues
        .iter()
        .map(|&l| {
            if l < 0.0 {
                clamped += 1;
            }
            l.max(0.0).sqrt()
        })
        .sum();
    let diff = mu_g - mu_t;
    let value = diff.dot(&diff) + cov_g.trace() + cov_t.trace() - 2.0 * tr_sqrt;
    FrechetResult {
        value: value.max(0.0),
        clamped,
    }
}

pub fn frechet_distance(gen: ArrayView2<'_, f64>, gt: ArrayView2<'_, f64>, mode: FdMode) -> Result<FrechetResult> {
    if gen.ncols() != gt.ncols() {
        return Err(ElpError::WidthMismatch {
            what: "frechet frames",
            expected: gt.ncols(),
            found: gen.ncols(),
        });
    }
    match mode {
        FdMode::Gaussian => {
            let need = gen.ncols() + 1;
            if gen.nrows() < need || gt.nrows() < need {
                return Err(ElpError::TooShort {
                    what: "gaussian frechet distance",
                    min: need,
                    found: gen.nrows().min(gt.nrows()),
                });
            }
            let (mu_g, cov_g) = moments(&to_matrix(gen));
            let (mu_t, cov_t) = moments(&to_matrix(gt));
            Ok(frechet_from_moments(&mu_g, &cov_g, &mu_t, &cov_t))
        }
        FdMode::L1 => {
            same_len("l1 frechet frames", gen.nrows(), gt.nrows())?;
            if gen.nrows() == 0 {
                return Err(ElpError::TooShort {
                    what: "l1 frechet distance",
                    min: 1,
                    found: 0,
                });
            }
            let total: f64 = gen
                .outer_iter()
                .zip(gt.outer_iter())
                .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>())
                .sum();
            Ok(FrechetResult {
                value: total / gen.nrows() as f64,
                clamped: 0,
            })
        }
    }
}

/// Mean over clips of the dim-averaged temporal (population) variance.
pub fn variation_diversity(clips: &[ArrayView2<'_, f64>]) -> Result<f64> {
    if clips.is_empty() {
        return Err(ElpError::invalid("variation diversity of an empty clip set"));
    }
    let mut acc = 0.0;
    for c in clips {
        if c.nrows() < 2 {
            return Err(ElpError::TooShort {
                what: "variation diversity",
                min: 2,
                found: c.nrows(),
            });
        }
        acc += c.var_axis(Axis(0), 0.0).mean().unwrap_or(0.0);
    }
    Ok(acc / clips.len() as f64)
}

/// Mean over dims of the root summed squared slope difference.
pub fn sts_distance(x: ArrayView2<'_, f64>, y: ArrayView2<'_, f64>) -> Result<f64> {
    same_shape("sts distance", x, y)?;
    if x.nrows() < 2 {
        return Err(ElpError::TooShort {
            what: "sts distance",
            min: 2,
            found: x.nrows(),
        });
    }
    let dims = x.ncols();
    let mut acc = 0.0;
    for d in 0..dims {
        let (a, b) = (x.column(d), y.column(d));
        let d2: f64 = (1..x.nrows())
            .map(|k| ((a[k] - a[k - 1]) - (b[k] - b[k - 1])).powi(2))
            .sum();
        acc += d2.sqrt();
    }
    Ok(acc / dims as f64)
}

fn sq_dist(a: ArrayView1<'_, f64>, b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Lloyd's k-means with k-means++ seeding.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans {
    centroids: Vec<Vec<f64>>,
}

impl KMeans {
    pub const MAX_ITERATIONS: usize = 100;

    pub fn fit(data: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<Self> {
        let n = data.nrows();
        if k == 0 || n < k {
            return Err(ElpError::invalid(format!(
                "k-means needs 1 <= k <= points, got k={k} with {n} points"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut centroids = vec![data.row(rng.random_range(0..n)).to_vec()];
        let mut nearest: Vec<f64> = data.outer_iter().map(|r| sq_dist(r, &centroids[0])).collect();
        while centroids.len() < k {
            let total: f64 = nearest.iter().sum();
            let pick = if total > 0.0 {
                let mut u = rng.random::<f64>() * total;
                let mut idx = n - 1;
                for (i, &w) in nearest.iter().enumerate() {
                    if u < w {
                        idx = i;
                        break;
                    }
                    u -= w;
                }
                idx
            } else {
                rng.random_range(0..n)
            };
            let c = data.row(pick).to_vec();
            for (i, r) in data.outer_iter().enumerate() {
                nearest[i] = nearest[i].min(sq_dist(r, &c));
            }
            centroids.push(c);
        }

        let mut model = Self { centroids };
        let mut assign = vec![usize::MAX; n];
        for _ in 0..Self::MAX_ITERATIONS {
            let mut changed = false;
            for (i, r) in data.outer_iter().enumerate() {
                let a = model.assign(r);
                if a != assign[i] {
                    assign[i] = a;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
            let dim = data.ncols();
            let mut sums = vec![vec![0.0; dim]; k];
            let mut counts = vec![0usize; k];
            for (i, r) in data.outer_iter().enumerate() {
                counts[assign[i]] += 1;
                for (s, v) in sums[assign[i]].iter_mut().zip(r) {
                    *s += v;
                }
            }
            for c in 0..k {
                if counts[c] > 0 {
                    model.centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
                } else {
                    // Reseed from the point farthest from its own centroid.
                    let far = (0..n)
                        .max_by(|&a, &b| {
                            let da = sq_dist(data.row(a), &model.centroids[assign[a]]);
                            let db = sq_dist(data.row(b), &model.centroids[assign[b]]);
                            da.total_cmp(&db).then(b.cmp(&a))
                        })
                        .expect("nonempty data");
                    model.centroids[c] = data.row(far).to_vec();
                    assign[far] = c;
                }
            }
        }
        Ok(model)
    }

    pub fn centroids(&self) -> &[Vec<f64>] {
        &self.centroids
    }

    /// Nearest centroid, ties to the lowest index.
    pub fn assign(&self, point: ArrayView1<'_, f64>) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, centroid) in self.centroids.iter().enumerate() {
            let d = sq_dist(point, centroid);
            if d < best_d {
                best = c;
                best_d = d;
            }
        }
        best
    }
}

/// Natural-log entropy of a histogram.
pub fn entropy(counts: &[usize]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let q = c as f64 / total as f64;
            // Written as q ln(1/q) so a single bin yields +0, not -0.
            q * (total as f64 / c as f64).ln()
        })
        .sum()
}

pub fn shannon_diversity(gen: ArrayView2<'_, f64>, reference: ArrayView2<'_, f64>, k: usize, seed: u64) -> Result<f64> {
    if gen.ncols() != reference.ncols() {
        return Err(ElpError::WidthMismatch {
            what: "shannon diversity frames",
            expected: reference.ncols(),
            found: gen.ncols(),
        });
    }
    let model = KMeans::fit(reference, k, seed)?;
    let mut counts = vec![0usize; k];
    for r in gen.outer_iter() {
        counts[model.assign(r)] += 1;
    }
    Ok(entropy(&counts))
}
