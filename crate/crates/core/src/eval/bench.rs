//! Benchmark harness: interpolate every sample and score it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::flow::{estimate_initial_flows, FlowEstimator, InitialFlows};
use crate::model::Model;
use crate::tensor::{Frame, TimeStep};
use crate::train::PreparedSample;

use super::dataset::TripletSample;
use super::metrics::{interpolation_error, psnr, ssim};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricRow {
    pub id: String,
    pub alpha: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub ie: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct Aggregates {
    pub psnr: f64,
    pub ssim: f64,
    pub ie: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// `(id, message)` for every sample the pipeline failed on.
    pub failures: Vec<(String, String)>,
}

pub const REPORT_HEADER: &str = "id,alpha,psnr,ssim,ie";

impl MetricReport {
    pub fn count(&self) -> usize {
        self.rows.len()
    }

    /// Arithmetic means over the scored rows; `None` when nothing was scored.
    pub fn aggregates(&self) -> Option<Aggregates> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        let mean = |f: fn(&MetricRow) -> f64| self.rows.iter().map(f).sum::<f64>() / n;
        Some(Aggregates {
            psnr: mean(|r| r.psnr),
            ssim: mean(|r| r.ssim),
            ie: mean(|r| r.ie),
        })
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{},{}", r.id, r.alpha, r.psnr, r.ssim, r.ie);
        }
        s
    }

    pub fn summary(&self) -> String {
        let mut s = format!("samples: {}\nfailures: {}\n", self.count(), self.failures.len());
        match self.aggregates() {
            Some(a) => {
                let _ = writeln!(s, "psnr: {:.4}\nssim: {:.6}\nie: {:.4}", a.psnr, a.ssim, a.ie);
            }
            None => s.push_str("no aggregates\n"),
        }
        for (id, msg) in &self.failures {
            let _ = writeln!(s, "failed {id}: {msg}");
        }
        s
    }

    /// Writes `metrics.csv` and `summary.txt` into `dir`.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (name, body) in [("metrics.csv", self.to_csv()), ("summary.txt", self.summary())] {
            let path = dir.join(name);
            fs::write(&path, body).map_err(|e| Error::io(&path, e))?;
        }
        Ok(())
    }
}

fn score(
    model: &Model,
    id: &str,
    (first, gt, last): (&Frame, &Frame, &Frame),
    init: &InitialFlows,
    alpha: TimeStep,
) -> Result<MetricRow> {
    let pred = model.predict(first, last, init, alpha)?;
    Ok(MetricRow {
        id: id.to_string(),
        alpha: alpha.value(),
        psnr: psnr(&pred, gt)?,
        ssim: ssim(&pred, gt)?,
        ie: interpolation_error(&pred, gt)?,
    })
}

fn record(report: &mut MetricReport, id: &str, row: Result<MetricRow>) {
    match row {
        Ok(r) => report.rows.push(r),
        Err(e) => {
            log::warn!("sample {id} failed: {e}");
            report.failures.push((id.to_string(), e.to_string()));
        }
    }
}

/// Interpolates each sample at its own α and scores it against the ground truth.
pub fn run_benchmark(model: &Model, estimator: &FlowEstimator, samples: &[TripletSample]) -> MetricReport {
    let mut report = MetricReport::default();
    for s in samples {
        let row = estimate_initial_flows(estimator, &s.first, &s.last, Some(&s.id))
            .and_then(|init| score(model, &s.id, (&s.first, &s.gt, &s.last), &init, s.alpha));
        record(&mut report, &s.id, row);
    }
    report
}

/// As [`run_benchmark`], reusing flows already estimated for training.
pub fn run_benchmark_prepared(model: &Model, samples: &[PreparedSample]) -> MetricReport {
    let mut report = MetricReport::default();
    for s in samples {
        let row = score(model, &s.id, (&s.first, &s.gt, &s.last), &s.init, s.alpha);
        record(&mut report, &s.id, row);
    }
    report
}
