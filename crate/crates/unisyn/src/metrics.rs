//! Image-quality scoring (PSNR, global-statistics SSIM), the full
//! availability-configuration evaluation matrix, and Welch's two-sample
//! t-test for comparing variants.

use crate::conditioning::AvailabilityCondition;
use crate::data::assemble_batch;
use crate::error::{Error, Result};
use crate::generator::Generator;
use crate::scalar::Scalar;
use ndarray::Array3;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;

/// PSNR is unbounded when the volumes are identical; keep that case distinct
/// from any decibel number.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Psnr {
    Db(f64),
    Infinite,
}

impl Psnr {
    pub fn db(&self) -> Option<f64> {
        match self {
            Psnr::Db(v) => Some(*v),
            Psnr::Infinite => None,
        }
    }
}

fn check_same_shape(a: &[f64], b: &[f64]) -> Result<()> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::Dimension(format!(
            "cannot score volumes of {} vs {} elements",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

/// 10·log10(max²/MSE) with the maximum taken over both volumes jointly.
pub fn psnr(estimate: &[f64], reference: &[f64]) -> Result<Psnr> {
    check_same_shape(estimate, reference)?;
    let n = estimate.len() as f64;
    let mse = estimate
        .iter()
        .zip(reference)
        .map(|(&e, &r)| (e - r) * (e - r))
        .sum::<f64>()
        / n;
    if mse == 0.0 {
        return Ok(Psnr::Infinite);
    }
    let max = estimate
        .iter()
        .chain(reference)
        .fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    Ok(Psnr::Db(10.0 * (max * max / mse).log10()))
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SsimConstants {
    pub c1: f64,
    pub c2: f64,
}

impl SsimConstants {
    /// The usual stabilizers for a dynamic range R: c1=(0.01R)², c2=(0.03R)².
    pub fn from_range(range: f64) -> Result<Self> {
        let c = SsimConstants {
            c1: (0.01 * range).powi(2),
            c2: (0.03 * range).powi(2),
        };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.c1 > 0.0 && self.c2 > 0.0) {
            return Err(Error::Config("SSIM constants must be positive".into()));
        }
        Ok(())
    }
}

/// Single global SSIM from whole-volume means, variances and covariance
/// (population statistics), not windowed.
pub fn ssim(estimate: &[f64], reference: &[f64], k: &SsimConstants) -> Result<f64> {
    check_same_shape(estimate, reference)?;
    k.validate()?;
    let n = estimate.len() as f64;
    let mu_e = estimate.iter().sum::<f64>() / n;
    let mu_r = reference.iter().sum::<f64>() / n;
    let (mut var_e, mut var_r, mut cov) = (0.0, 0.0, 0.0);
    for (&e, &r) in estimate.iter().zip(reference) {
        var_e += (e - mu_e) * (e - mu_e);
        var_r += (r - mu_r) * (r - mu_r);
        cov += (e - mu_e) * (r - mu_r);
    }
    var_e /= n;
    var_r /= n;
    cov /= n;
    Ok(((2.0 * mu_e * mu_r + k.c1) * (2.0 * cov + k.c2))
        / ((mu_e * mu_e + mu_r * mu_r + k.c1) * (var_e + var_r + k.c2)))
}

/// Two-sided Welch t-test p-value.
pub fn two_sample_ttest(sample_a: &[f64], sample_b: &[f64]) -> Result<f64> {
    if sample_a.len() < 2 || sample_b.len() < 2 {
        return Err(Error::InsufficientSamples(format!(
            "t-test needs at least 2 samples per group, got {} and {}",
            sample_a.len(),
            sample_b.len()
        )));
    }
    let stats = |s: &[f64]| {
        let n = s.len() as f64;
        let mean = s.iter().sum::<f64>() / n;
        let var = s.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
        (n, mean, var)
    };
    let (na, ma, va) = stats(sample_a);
    let (nb, mb, vb) = stats(sample_b);
    let se2 = va / na + vb / nb;
    if se2 == 0.0 {
        // degenerate variance: equal means are indistinguishable, different
        // means are as separated as possible
        return Ok(if ma == mb { 1.0 } else { f64::MIN_POSITIVE });
    }
    let t = (ma - mb) / se2.sqrt();
    // Welch-Satterthwaite degrees of freedom
    let df = se2 * se2
        / ((va / na).powi(2) / (na - 1.0) + (vb / nb).powi(2) / (nb - 1.0));
    use statrs::distribution::{ContinuousCDF, StudentsT};
    let dist = StudentsT::new(0.0, 1.0, df).expect("df > 0");
    let p = 2.0 * dist.cdf(-t.abs());
    Ok(p.clamp(f64::MIN_POSITIVE, 1.0))
}

/// Aggregated scores for one (configuration, missing modality) cell.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricCell {
    pub psnr_mean: f64,
    pub psnr_std: f64,
    pub ssim_mean: f64,
    pub ssim_std: f64,
    /// Subjects entering the PSNR aggregate (infinite-PSNR subjects excluded).
    pub n: usize,
    pub n_infinite: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportRow {
    pub ac: String,
    /// One cell per modality; populated exactly for the missing ones.
    pub cells: Vec<Option<MetricCell>>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub modality_names: Vec<String>,
    pub checkpoint_id: String,
    pub dataset_id: String,
    pub rows: Vec<ReportRow>,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Score every valid availability configuration: zero-impute the missing
/// modalities, run the generator, and compare each missing modality's
/// synthesized slices against ground truth, per subject.
pub fn evaluate_matrix<F: Scalar>(
    generator: &Generator<F>,
    subjects: &[Vec<Array3<f32>>],
    modality_names: &[String],
    constants: &SsimConstants,
    checkpoint_id: &str,
    dataset_id: &str,
) -> Result<MetricsReport> {
    let m = modality_names.len();
    if subjects.is_empty() {
        return Err(Error::InsufficientSamples(
            "no test subjects to evaluate".into(),
        ));
    }
    let mut rows = Vec::new();
    for ac in AvailabilityCondition::all_valid(m) {
        // per missing modality, per subject: (psnr, ssim)
        let mut scores: Vec<Vec<(Psnr, f64)>> = vec![Vec::new(); m];
        for slices in subjects {
            let batch = assemble_batch::<F>(slices, &ac)?;
            let (out, _) = generator.forward(&batch.pixels.view(), &ac)?;
            for i in ac.missing_indices() {
                let est: Vec<f64> = out
                    .images
                    .slice(ndarray::s![.., i, .., ..])
                    .iter()
                    .map(|v| v.to_f64c())
                    .collect();
                let refv: Vec<f64> = batch
                    .targets
                    .slice(ndarray::s![.., i, .., ..])
                    .iter()
                    .map(|v| v.to_f64c())
                    .collect();
                scores[i].push((psnr(&est, &refv)?, ssim(&est, &refv, constants)?));
            }
        }
        let cells = (0..m)
            .map(|i| {
                if !ac.is_available(i) {
                    let psnrs: Vec<f64> =
                        scores[i].iter().filter_map(|(p, _)| p.db()).collect();
                    let ssims: Vec<f64> = scores[i].iter().map(|&(_, s)| s).collect();
                    let (pm, ps) = mean_std(&psnrs);
                    let (sm, ss) = mean_std(&ssims);
                    Some(MetricCell {
                        psnr_mean: pm,
                        psnr_std: ps,
                        ssim_mean: sm,
                        ssim_std: ss,
                        n: psnrs.len(),
                        n_infinite: scores[i].len() - psnrs.len(),
                    })
                } else {
                    None
                }
            })
            .collect();
        rows.push(ReportRow {
            ac: ac.to_string(),
            cells,
        });
    }
    Ok(MetricsReport {
        modality_names: modality_names.to_vec(),
        checkpoint_id: checkpoint_id.to_string(),
        dataset_id: dataset_id.to_string(),
        rows,
    })
}

impl MetricsReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("ac,modality,psnr_mean,psnr_std,ssim_mean,ssim_std,n\n");
        for row in &self.rows {
            for (i, cell) in row.cells.iter().enumerate() {
                if let Some(c) = cell {
                    writeln!(
                        out,
                        "{},{},{:.4},{:.4},{:.4},{:.4},{}",
                        row.ac,
                        self.modality_names[i],
                        c.psnr_mean,
                        c.psnr_std,
                        c.ssim_mean,
                        c.ssim_std,
                        c.n
                    )
                    .unwrap();
                }
            }
        }
        out
    }

    /// Human-readable table: one line per configuration, "mean (std)" cells
    /// for each missing modality.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "checkpoint: {}  dataset: {}",
            self.checkpoint_id, self.dataset_id
        )
        .unwrap();
        let width = 28;
        write!(out, "{:<10}", "inputs").unwrap();
        for name in &self.modality_names {
            write!(out, "{name:<width$}").unwrap();
        }
        out.push('\n');
        for row in &self.rows {
            write!(out, "{:<10}", row.ac).unwrap();
            for cell in &row.cells {
                match cell {
                    Some(c) => {
                        let text = format!(
                            "{:.2} ({:.2}), {:.3} ({:.3})",
                            c.psnr_mean, c.psnr_std, c.ssim_mean, c.ssim_std
                        );
                        write!(out, "{text:<width$}").unwrap();
                    }
                    None => write!(out, "{:<width$}", "-").unwrap(),
                }
            }
            out.push('\n');
        }
        out
    }
}
