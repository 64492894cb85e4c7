//! Likelihood-free reconstruction-quality measures, baseline distributions
//! and OOD scoring, plus the reporting metrics (relative error and SSIM).

use crate::error::{Error, Result};
use crate::paired::PairedModel;
use crate::tensor::Tensor;
use std::io::Write;
use std::path::{Path, PathBuf};

/// Denominators below this are treated as degenerate: the metric falls back
/// to the bare numerator norm and the record is flagged.
const DENOM_GUARD: f64 = 1e-12;

/// The five relative reconstruction-quality measures for one observation,
/// with `x = direct_estimate(y)`:
/// `m1 = ||d_y(e_y(y)) - y|| / ||y||`
/// `m2 = ||d_x(e_x(x)) - x|| / ||x||`
/// `m3 = ||d_y(M(e_x(x))) - y|| / ||y||`
/// `m4 = ||M+(e_y(y)) - e_x(x)|| / ||e_x(x)||`
/// `m5 = ||M(e_x(x)) - e_y(y)|| / ||e_y(y)||`
#[derive(Debug, Clone)]
pub struct MetricRecord {
    pub m: [f64; 5],
    pub ssim: Option<f64>,
    pub rel_err: Option<f64>,
    /// True when any quotient hit the zero-denominator guard.
    pub degenerate: bool,
}

fn guarded_ratio(numerator: f64, denominator: f64, degenerate: &mut bool) -> f64 {
    if denominator < DENOM_GUARD {
        *degenerate = true;
        numerator
    } else {
        numerator / denominator
    }
}

fn row_norm_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.sub(b).norm()
}

/// Computes m1..m5 for a single observation row `y` (shape `[1, m]`).
pub fn recon_metrics(model: &PairedModel, y: &Tensor) -> Result<MetricRecord> {
    if y.norm() == 0.0 {
        return Err(Error::InvalidArgument(
            "recon_metrics: zero-norm observation".into(),
        ));
    }
    let mut degenerate = false;
    let x_hat = model.direct_estimate(y)?;

    let z_y = model.encode_y(y)?;
    let z_x_hat = model.encode_x(&x_hat)?;
    let y_roundtrip = model.decode_y(&z_y)?;
    let x_roundtrip = model.decode_x(&z_x_hat)?;
    let y_from_x = model.decode_y(&model.latent_forward(&z_x_hat)?)?;
    let z_mapped_inv = model.latent_inverse(&z_y)?;
    let z_mapped_fwd = model.latent_forward(&z_x_hat)?;

    let m1 = guarded_ratio(row_norm_diff(&y_roundtrip, y), y.norm(), &mut degenerate);
    let m2 = guarded_ratio(
        row_norm_diff(&x_roundtrip, &x_hat),
        x_hat.norm(),
        &mut degenerate,
    );
    let m3 = guarded_ratio(row_norm_diff(&y_from_x, y), y.norm(), &mut degenerate);
    let m4 = guarded_ratio(
        row_norm_diff(&z_mapped_inv, &z_x_hat),
        z_x_hat.norm(),
        &mut degenerate,
    );
    let m5 = guarded_ratio(
        row_norm_diff(&z_mapped_fwd, &z_y),
        z_y.norm(),
        &mut degenerate,
    );

    Ok(MetricRecord {
        m: [m1, m2, m3, m4, m5],
        ssim: None,
        rel_err: None,
        degenerate,
    })
}

/// Relative l2 error `||x_hat - x|| / ||x||`.
pub fn rel_err(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(Error::shape(
            format!("{:?}", x.shape()),
            format!("{:?}", x_hat.shape()),
        ));
    }
    let denom = x.norm();
    if denom == 0.0 {
        return Err(Error::InvalidArgument("rel_err: zero-norm ground truth".into()));
    }
    Ok(x_hat.sub(x).norm() / denom)
}

const SSIM_WINDOW: usize = 7;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

/// Single-scale SSIM with a 7x7 uniform window, k1 = 0.01, k2 = 0.03, data
/// range = max - min of the ground truth, sample (n-1) covariance, averaged
/// over all fully interior window positions.
pub fn ssim(x_hat: &Tensor, x: &Tensor) -> Result<f64> {
    if x_hat.shape() != x.shape() {
        return Err(Error::shape(
            format!("{:?}", x.shape()),
            format!("{:?}", x_hat.shape()),
        ));
    }
    if x.shape().len() != 2 {
        return Err(Error::InvalidArgument("ssim expects 2-D images".into()));
    }
    let (h, w) = (x.rows(), x.cols());
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::InvalidArgument(format!(
            "ssim needs images at least {SSIM_WINDOW}x{SSIM_WINDOW}, got {h}x{w}"
        )));
    }
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for &v in x.data() {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let data_range = hi - lo;
    if data_range <= 0.0 {
        return Err(Error::InvalidArgument(
            "ssim: constant ground truth has zero data range".into(),
        ));
    }
    let c1 = (SSIM_K1 * data_range).powi(2);
    let c2 = (SSIM_K2 * data_range).powi(2);
    let np = (SSIM_WINDOW * SSIM_WINDOW) as f64;
    let cov_norm = np / (np - 1.0);

    let mut total = 0.0;
    let mut count = 0usize;
    for r0 in 0..=(h - SSIM_WINDOW) {
        for c0 in 0..=(w - SSIM_WINDOW) {
            let (mut sa, mut sb, mut saa, mut sbb, mut sab) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for r in r0..r0 + SSIM_WINDOW {
                for c in c0..c0 + SSIM_WINDOW {
                    let a = x_hat.at(r, c);
                    let b = x.at(r, c);
                    sa += a;
                    sb += b;
                    saa += a * a;
                    sbb += b * b;
                    sab += a * b;
                }
            }
            let ma = sa / np;
            let mb = sb / np;
            let va = cov_norm * (saa / np - ma * ma);
            let vb = cov_norm * (sbb / np - mb * mb);
            let cov = cov_norm * (sab / np - ma * mb);
            let s = ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            total += s;
            count += 1;
        }
    }
    Ok(total / count as f64)
}

/// Sorted per-metric reference samples from a training set.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub values: [Vec<f64>; 5],
    pub count: usize,
}

/// Computes `recon_metrics` for each row of a reference dataset and stores
/// sorted per-metric arrays. Requires at least 30 samples.
pub fn fit_baseline(model: &PairedModel, ys: &Tensor) -> Result<Baseline> {
    let n = ys.rows();
    if n < 30 {
        return Err(Error::TooFewSamples { needed: 30, got: n });
    }
    let mut values: [Vec<f64>; 5] = Default::default();
    for i in 0..n {
        let rec = recon_metrics(model, &ys.row_matrix(i))?;
        for k in 0..5 {
            values[k].push(rec.m[k]);
        }
    }
    for v in values.iter_mut() {
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    }
    Ok(Baseline { values, count: n })
}

impl Baseline {
    pub fn quantile(&self, metric: usize, q: f64) -> f64 {
        let v = &self.values[metric];
        let pos = q.clamp(0.0, 1.0) * (v.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        if lo == hi {
            v[lo]
        } else {
            v[lo] + (pos - lo as f64) * (v[hi] - v[lo])
        }
    }
}

/// Baseline percentile of each metric (midpoint rank convention) and the
/// OOD flag: true when any metric exceeds the 0.99 percentile.
pub fn ood_score(baseline: &Baseline, rec: &MetricRecord) -> ([f64; 5], bool) {
    let mut pct = [0.0; 5];
    for k in 0..5 {
        let v = &baseline.values[k];
        let less = v.partition_point(|&x| x < rec.m[k]);
        let leq = v.partition_point(|&x| x <= rec.m[k]);
        pct[k] = (less as f64 + 0.5 * (leq - less) as f64) / v.len() as f64;
    }
    let flag = pct.iter().any(|&p| p > 0.99);
    (pct, flag)
}

fn fmt(v: f64) -> String {
    format!("{v:.16e}")
}

/// Emits per-metric histogram CSVs (64 bins over the pooled baseline+record
/// range, counts for both groups) and a scatter CSV pairing two metrics
/// (default m1 vs m3). Outputs are byte-deterministic; an empty record list
/// yields header-only files.
pub fn export_report(
    records: &[MetricRecord],
    baseline: &Baseline,
    dir: &Path,
    pair: (usize, usize),
) -> Result<Vec<PathBuf>> {
    const BINS: usize = 64;
    if pair.0 >= 5 || pair.1 >= 5 {
        return Err(Error::InvalidArgument(format!(
            "scatter pair ({}, {}) out of range",
            pair.0, pair.1
        )));
    }
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    for k in 0..5 {
        let path = dir.join(format!("hist_m{}.csv", k + 1));
        let mut out = String::from("bin_lo,bin_hi,baseline,probe\n");
        if !records.is_empty() {
            let pooled: Vec<f64> = baseline.values[k]
                .iter()
                .copied()
                .chain(records.iter().map(|r| r.m[k]))
                .collect();
            let lo = pooled.iter().cloned().fold(f64::INFINITY, f64::min);
            let mut hi = pooled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if hi <= lo {
                hi = lo + 1.0;
            }
            let width = (hi - lo) / BINS as f64;
            let bin_of = |v: f64| (((v - lo) / width) as usize).min(BINS - 1);
            let mut base_counts = vec![0usize; BINS];
            let mut rec_counts = vec![0usize; BINS];
            for &v in &baseline.values[k] {
                base_counts[bin_of(v)] += 1;
            }
            for r in records {
                rec_counts[bin_of(r.m[k])] += 1;
            }
            for b in 0..BINS {
                out.push_str(&format!(
                    "{},{},{},{}\n",
                    fmt(lo + b as f64 * width),
                    fmt(lo + (b + 1) as f64 * width),
                    base_counts[b],
                    rec_counts[b]
                ));
            }
        }
        let mut f = std::fs::File::create(&path)?;
        f.write_all(out.as_bytes())?;
        written.push(path);
    }

    let scatter = dir.join("scatter.csv");
    let mut out = format!("group,m{},m{}\n", pair.0 + 1, pair.1 + 1);
    if !records.is_empty() {
        for i in 0..baseline.count {
            out.push_str(&format!(
                "baseline,{},{}\n",
                fmt(baseline.values[pair.0][i]),
                fmt(baseline.values[pair.1][i])
            ));
        }
        for r in records {
            out.push_str(&format!(
                "probe,{},{}\n",
                fmt(r.m[pair.0]),
                fmt(r.m[pair.1])
            ));
        }
    }
    let mut f = std::fs::File::create(&scatter)?;
    f.write_all(out.as_bytes())?;
    written.push(scatter);
    Ok(written)
}
