use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Population moments of one feature. Skewness and excess kurtosis are 0
/// for a constant sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Moments {
    pub mean: f64,
    pub std: f64,
    pub skewness: f64,
    pub kurtosis: f64,
}

impl Moments {
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
        for x in xs {
            let d = x - mean;
            let d2 = d * d;
            m2 += d2;
            m3 += d2 * d;
            m4 += d2 * d2;
        }
        let (m2, m3, m4) = (m2 / n, m3 / n, m4 / n);
        let (skewness, kurtosis) = if m2 > 0.0 {
            (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
        } else {
            (0.0, 0.0)
        };
        Self {
            mean,
            std: m2.sqrt(),
            skewness,
            kurtosis,
        }
    }
}

/// Per-feature deltas are real − synthetic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureFidelity {
    pub feature: usize,
    pub real: Moments,
    pub synthetic: Moments,
    pub delta_mean: f64,
    pub delta_std: f64,
    pub delta_skewness: f64,
    pub delta_kurtosis: f64,
    pub wasserstein: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PcaPoint {
    pub source: String,
    pub pc1: f64,
    pub pc2: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pca {
    /// Unit-norm directions, largest eigenvalue first.
    pub components: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
    pub mean: Vec<f64>,
    pub points: Vec<PcaPoint>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FidelityReport {
    pub n_real: usize,
    pub n_synthetic: usize,
    pub features: Vec<FeatureFidelity>,
    /// corr(real) − corr(synthetic); symmetric with a zero diagonal.
    pub correlation_difference: Vec<Vec<f64>>,
    pub pca: Pca,
}

/// Exact W1 between two empirical distributions: ∫ |F⁻¹(u) − G⁻¹(u)| du.
pub fn wasserstein_1d(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (n, m) = (a.len(), b.len());
    let (mut i, mut j) = (0, 0);
    let mut u = 0.0;
    let mut total = 0.0;
    while i < n && j < m {
        // Next quantile breakpoint is min((i+1)/n, (j+1)/m), compared exactly
        // as (i+1)·m vs (j+1)·n.
        let (ai, bj) = ((i + 1) * m, (j + 1) * n);
        let next = ai.min(bj) as f64 / (n * m) as f64;
        total += (a[i] - b[j]).abs() * (next - u);
        u = next;
        if ai <= bj {
            i += 1;
        }
        if bj <= ai {
            j += 1;
        }
    }
    total
}

fn correlation(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = cols.len();
    let n = cols.first().map_or(0, Vec::len) as f64;
    let centered: Vec<(Vec<f64>, f64)> = cols
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / n;
            let d: Vec<f64> = c.iter().map(|x| x - m).collect();
            let ss = d.iter().map(|x| x * x).sum::<f64>().sqrt();
            (d, ss)
        })
        .collect();
    let mut r = vec![vec![0.0; p]; p];
    for i in 0..p {
        r[i][i] = 1.0;
        for j in i + 1..p {
            let (di, si) = &centered[i];
            let (dj, sj) = &centered[j];
            let v = if *si > 0.0 && *sj > 0.0 {
                di.iter().zip(dj).map(|(x, y)| x * y).sum::<f64>() / (si * sj)
            } else {
                0.0
            };
            r[i][j] = v;
            r[j][i] = v;
        }
    }
    r
}

fn columns(rows: &[Vec<f64>], p: usize) -> Vec<Vec<f64>> {
    (0..p).map(|f| rows.iter().map(|r| r[f]).collect()).collect()
}

fn pca(real: &[Vec<f64>], synth: &[Vec<f64>], p: usize) -> Pca {
    let pooled: Vec<&Vec<f64>> = real.iter().chain(synth).collect();
    let n = pooled.len();
    let mean: Vec<f64> = (0..p)
        .map(|f| pooled.iter().map(|r| r[f]).sum::<f64>() / n as f64)
        .collect();
    let x = DMatrix::from_fn(n, p, |i, j| pooled[i][j] - mean[j]);
    let cov = (x.transpose() * &x) / (n.max(2) - 1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let k = p.min(2);
    let components: Vec<Vec<f64>> = order[..k]
        .iter()
        .map(|&c| {
            let mut v: Vec<f64> = eig.eigenvectors.column(c).iter().copied().collect();
            let lead = v
                .iter()
                .copied()
                .fold(0.0f64, |m, x| if x.abs() > m.abs() { x } else { m });
            if lead < 0.0 {
                v.iter_mut().for_each(|x| *x = -*x);
            }
            v
        })
        .collect();
    let eigenvalues = order.iter().map(|&c| eig.eigenvalues[c].max(0.0)).collect();
    let project = |r: &[f64], c: usize| -> f64 {
        components
            .get(c)
            .map_or(0.0, |v| r.iter().zip(&mean).zip(v).map(|((x, m), w)| (x - m) * w).sum())
    };
    let points = real
        .iter()
        .map(|r| ("real", r))
        .chain(synth.iter().map(|r| ("synthetic", r)))
        .map(|(source, r)| PcaPoint {
            source: source.into(),
            pc1: project(r, 0),
            pc2: project(r, 1),
        })
        .collect();
    Pca {
        components,
        eigenvalues,
        mean,
        points,
    }
}

/// Compares real and synthetic samples (rows are observations).
pub fn fidelity_report(real: &[Vec<f64>], synth: &[Vec<f64>]) -> Result<FidelityReport> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::contract("fidelity needs nonempty real and synthetic samples"));
    }
    let p = real[0].len();
    if let Some(r) = real.iter().chain(synth).find(|r| r.len() != p) {
        return Err(Error::dim(format!("sample with {} features, expected {p}", r.len())));
    }
    let (rc, sc) = (columns(real, p), columns(synth, p));
    let features = (0..p)
        .map(|f| {
            let (a, b) = (Moments::of(&rc[f]), Moments::of(&sc[f]));
            FeatureFidelity {
                feature: f,
                delta_mean: a.mean - b.mean,
                delta_std: a.std - b.std,
                delta_skewness: a.skewness - b.skewness,
                delta_kurtosis: a.kurtosis - b.kurtosis,
                wasserstein: wasserstein_1d(&rc[f], &sc[f]),
                real: a,
                synthetic: b,
            }
        })
        .collect();
    let (cr, cs) = (correlation(&rc), correlation(&sc));
    let correlation_difference = cr
        .iter()
        .zip(&cs)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x - y).collect())
        .collect();
    Ok(FidelityReport {
        n_real: real.len(),
        n_synthetic: synth.len(),
        features,
        correlation_difference,
        pca: pca(real, synth, p),
    })
}
