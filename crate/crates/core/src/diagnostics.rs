//! Geometry of update matrices: singular-value spectra, condition numbers and
//! per-neuron (row) norm dispersion.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::matrix::Matrix;
use crate::optim::StepTrace;
use crate::svd::svd_small;

/// Singular values at or below `rank_tol * sigma_max` are ignored when
/// computing the condition number.
pub const DEFAULT_RANK_TOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GeometryReport {
    pub spectrum: Vec<f64>,
    pub condition_number: f64,
    pub per_neuron_norms: Vec<f64>,
    pub norm_cv: f64,
    pub source_label: String,
}

impl GeometryReport {
    pub fn sigma_max(&self) -> f64 {
        self.spectrum.first().copied().unwrap_or(0.0)
    }

    /// Smallest singular value counted in the condition number.
    pub fn sigma_min(&self) -> f64 {
        self.sigma_max() / self.condition_number
    }
}

/// Population standard deviation over mean; zero for an empty or all-zero
/// input.
pub fn coefficient_of_variation(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if mean == 0.0 {
        return 0.0;
    }
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
    var.sqrt() / mean.abs()
}

pub fn geometry_report(update: &Matrix, label: &str, rank_tol: f64) -> Result<GeometryReport> {
    if update.is_zero() {
        return Err(Error::domain(
            "geometry_report",
            "update matrix is zero, condition number undefined",
        ));
    }
    let spectrum = svd_small(update)?.sigma.into_vec();
    let sigma_max = spectrum[0];
    let sigma_min = spectrum
        .iter()
        .rev()
        .copied()
        .find(|&s| s > rank_tol * sigma_max)
        .unwrap_or(sigma_max);
    let norms = update.row_norms();
    let mut norm_cv = coefficient_of_variation(norms.as_slice());
    if norm_cv < 1e-12 {
        norm_cv = 0.0;
    }
    Ok(GeometryReport {
        spectrum,
        condition_number: sigma_max / sigma_min,
        per_neuron_norms: norms.into_vec(),
        norm_cv,
        source_label: label.to_string(),
    })
}

/// Which parameter to probe and how often.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeSpec {
    pub param: String,
    pub stride: usize,
}

/// 1-based steps probed in a run of `total` steps: the final step and every
/// `stride` steps before it, so a run yields `ceil(total / stride)` probes.
pub fn probe_steps(total: usize, stride: usize) -> Vec<usize> {
    assert!(stride >= 1, "probe stride must be >= 1");
    let mut steps: Vec<usize> = (0..)
        .map(|k| total as isize - (k * stride) as isize)
        .take_while(|&s| s >= 1)
        .map(|s| s as usize)
        .collect();
    steps.reverse();
    steps
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ProbeRecord {
    pub step: usize,
    pub param: String,
    pub report: GeometryReport,
}

/// Reports for the three stages of one traced step: raw momentum, the
/// orthogonalized matrix (when the rule has one), and the final direction
/// labelled with the optimizer name. The direction is taken before the step
/// size so a zero learning rate still yields its geometry.
pub fn trace_reports(trace: &StepTrace, final_label: &str, rank_tol: f64) -> Result<Vec<GeometryReport>> {
    let mut out = Vec::with_capacity(3);
    let mut push = |m: &Matrix, label: &str| -> Result<()> {
        if !m.is_zero() {
            out.push(geometry_report(m, label, rank_tol)?);
        }
        Ok(())
    };
    push(&trace.momentum, "momentum")?;
    if let Some(o) = &trace.orthogonalized {
        push(o, "ortho")?;
    }
    push(&trace.direction, final_label)?;
    Ok(out)
}

pub const PROBE_CSV_HEADER: &str = "step,param,label,cond,sigma_max,sigma_min,norm_cv";

pub fn write_probe_csv<W: Write>(records: &[ProbeRecord], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{PROBE_CSV_HEADER}")?;
    for r in records {
        writeln!(
            w,
            "{},{},{},{:e},{:e},{:e},{:e}",
            r.step,
            r.param,
            r.report.source_label,
            r.report.condition_number,
            r.report.sigma_max(),
            r.report.sigma_min(),
            r.report.norm_cv
        )?;
    }
    Ok(())
}

/// One headerless row per probe: step, param, label, then the singular
/// values in descending order. Rows vary in length with the matrix shape.
pub fn write_spectra_csv<W: Write>(records: &[ProbeRecord], mut w: W) -> std::io::Result<()> {
    for r in records {
        write!(w, "{},{},{}", r.step, r.param, r.report.source_label)?;
        for s in &r.report.spectrum {
            write!(w, ",{s:e}")?;
        }
        writeln!(w)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orthogonalize::{ns5, polar_exact, NsConfig};
    use crate::rng::SeededRng;

    #[test]
    fn identity_report() {
        let r = geometry_report(&Matrix::identity(4), "id", DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.spectrum, vec![1.0; 4]);
        assert_eq!(r.condition_number, 1.0);
        assert_eq!(r.per_neuron_norms, vec![1.0; 4]);
        assert_eq!(r.norm_cv, 0.0);
    }

    #[test]
    fn diagonal_report() {
        let r = geometry_report(&Matrix::from_diag(&[10.0, 1.0]), "d", DEFAULT_RANK_TOL).unwrap();
        assert!((r.condition_number - 10.0).abs() < 1e-12);
        assert_eq!(r.per_neuron_norms, vec![10.0, 1.0]);
    }

    #[test]
    fn zero_matrix_rejected() {
        assert!(geometry_report(&Matrix::zeros(2, 2), "z", DEFAULT_RANK_TOL).is_err());
    }

    #[test]
    fn rank_tolerance_skips_null_directions() {
        let m = Matrix::from_rows(&[[1.0, 0.0], [0.0, 0.0]]);
        let r = geometry_report(&m, "r1", DEFAULT_RANK_TOL).unwrap();
        assert_eq!(r.condition_number, 1.0);
    }

    #[test]
    fn orthogonalization_lowers_condition_number() {
        let mut rng = SeededRng::new(8);
        let u = polar_exact(&rng.gaussian_matrix(8, 8, 1.0)).unwrap();
        let v = polar_exact(&rng.gaussian_matrix(8, 8, 1.0)).unwrap();
        let sig: Vec<f64> = (0..8).map(|i| 60f64.powf(-(i as f64) / 7.0)).collect();
        let m = u.matmul(&Matrix::from_diag(&sig)).unwrap().matmul(&v.transpose()).unwrap();
        let before = geometry_report(&m, "momentum", DEFAULT_RANK_TOL).unwrap();
        let after = geometry_report(&ns5(&m, &NsConfig::default()).unwrap(), "ortho", DEFAULT_RANK_TOL).unwrap();
        assert!(before.condition_number >= 50.0);
        assert!(after.condition_number < before.condition_number);
    }

    #[test]
    fn scale_invariance() {
        let a = SeededRng::new(12).gaussian_matrix(5, 7, 1.0);
        let r1 = geometry_report(&a, "a", DEFAULT_RANK_TOL).unwrap();
        for c in [0.001, 3.7, 250.0] {
            let r2 = geometry_report(&a.scale(c), "a", DEFAULT_RANK_TOL).unwrap();
            assert!((r1.norm_cv - r2.norm_cv).abs() <= 1e-10 * r1.norm_cv.max(1.0));
            assert!((r1.condition_number - r2.condition_number).abs() <= 1e-10 * r1.condition_number);
        }
    }

    #[test]
    fn semi_orthogonal_rows_have_unit_norm() {
        for (m, n) in [(3, 8), (5, 5), (1, 4)] {
            let o = polar_exact(&SeededRng::new((m + n) as u64).gaussian_matrix(m, n, 1.0)).unwrap();
            let r = geometry_report(&o, "polar", DEFAULT_RANK_TOL).unwrap();
            assert!(r.per_neuron_norms.iter().all(|x| (x - 1.0).abs() <= 1e-9));
        }
    }

    #[test]
    fn probe_step_counts() {
        assert_eq!(probe_steps(5, 10), vec![5]);
        assert_eq!(probe_steps(7, 3), vec![1, 4, 7]);
        assert_eq!(probe_steps(200, 10).len(), 20);
        for total in 1..40 {
            for stride in 1..12 {
                let steps = probe_steps(total, stride);
                assert_eq!(steps.len(), total.div_ceil(stride));
                assert_eq!(*steps.last().unwrap(), total);
            }
        }
    }

    #[test]
    fn cv_basics() {
        assert_eq!(coefficient_of_variation(&[]), 0.0);
        assert_eq!(coefficient_of_variation(&[2.0, 2.0]), 0.0);
        assert!((coefficient_of_variation(&[1.0, 3.0]) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn probe_csv_format() {
        let report = geometry_report(&Matrix::identity(2), "normuon", DEFAULT_RANK_TOL).unwrap();
        let recs = vec![ProbeRecord {
            step: 3,
            param: "layer0.weight".into(),
            report,
        }];
        let mut buf = Vec::new();
        write_probe_csv(&recs, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some(PROBE_CSV_HEADER));
        assert!(lines.next().unwrap().starts_with("3,layer0.weight,normuon,1e0,"));
        let mut buf = Vec::new();
        write_spectra_csv(&recs, &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf).unwrap(), "3,layer0.weight,normuon,1e0,1e0\n");
    }
}
