use serde::{Deserialize, Serialize};

use super::{
    ap_over_oks, auc, auc_alphas, mpjpe, oks_thresholds, pa_mpjpe, pckh, PoseEvalItem,
};
use crate::error::{Error, Result};
use crate::table::{sig9, CsvTable};

fn default_head() -> f64 {
    4.0
}
fn default_scale() -> f64 {
    4.0
}
fn default_kappa() -> f64 {
    super::DEFAULT_KAPPA
}
fn default_stride() -> f64 {
    1.0
}

/// Normalizers used when turning decoded poses into metric items. Lengths
/// are in heatmap cells; `stride` converts reported lengths to pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricOptions {
    #[serde(default = "default_head")]
    pub head_length: f64,
    #[serde(default = "default_scale")]
    pub person_scale: f64,
    #[serde(default = "default_kappa")]
    pub kappa: f64,
    #[serde(default = "default_stride")]
    pub stride: f64,
}

impl Default for MetricOptions {
    fn default() -> Self {
        MetricOptions {
            head_length: default_head(),
            person_scale: default_scale(),
            kappa: default_kappa(),
            stride: default_stride(),
        }
    }
}

impl MetricOptions {
    pub fn validate(&self) -> Result<()> {
        for (v, name) in [
            (self.head_length, "head_length"),
            (self.person_scale, "person_scale"),
            (self.kappa, "kappa"),
            (self.stride, "stride"),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::contract(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CurvePoint {
    pub alpha: f64,
    pub value: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ThresholdAp {
    pub threshold: f64,
    pub ap: f64,
}

/// Every metric for one decoder over one dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub decoder: String,
    pub samples: usize,
    /// Mean Euclidean error over each joint's supervised axes.
    pub mean_error: f64,
    pub mean_error_xy: f64,
    /// Mean `|dz|` over depth-annotated joints, if any.
    pub mean_error_z: Option<f64>,
    pub pckh: Vec<CurvePoint>,
    pub pckh_0_5: f64,
    pub pckh_0_1: f64,
    pub auc: f64,
    /// Over fully annotated items only; absent when there are none.
    pub mpjpe: Option<f64>,
    pub pa_mpjpe: Option<f64>,
    pub ap: f64,
    pub ap_per_threshold: Vec<ThresholdAp>,
}

impl MetricReport {
    pub fn compute(decoder: &str, items: &[PoseEvalItem<f64>], stride: f64) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::contract("cannot report on an empty dataset"));
        }
        let (mut err, mut n) = (0.0, 0usize);
        let (mut err_xy, mut n_xy) = (0.0, 0usize);
        let (mut err_z, mut n_z) = (0.0, 0usize);
        for item in items {
            for k in 0..item.gt.len() {
                let (p, g, m) = (item.pred.coord(k), item.gt.coord(k), item.gt.mask()[k]);
                let d2: f64 = (0..3).filter(|&a| m[a]).map(|a| (p[a] - g[a]).powi(2)).sum();
                if m.iter().any(|&b| b) {
                    err += d2.sqrt();
                    n += 1;
                }
                if m[0] && m[1] {
                    err_xy += ((p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2)).sqrt();
                    n_xy += 1;
                }
                if m[2] {
                    err_z += (p[2] - g[2]).abs();
                    n_z += 1;
                }
            }
        }
        let mean = |s: f64, n: usize| if n == 0 { f64::NAN } else { stride * s / n as f64 };

        let alphas = auc_alphas::<f64>();
        let curve = alphas
            .iter()
            .map(|&alpha| Ok(CurvePoint { alpha, value: pckh(items, alpha)? }))
            .collect::<Result<Vec<_>>>()?;

        let full: Vec<PoseEvalItem<f64>> = items
            .iter()
            .filter(|i| i.gt.is_fully_masked())
            .cloned()
            .collect();
        let (mpjpe_v, pa_v) = if full.is_empty() {
            (None, None)
        } else {
            let pa = match pa_mpjpe(&full) {
                Ok(v) => Some(stride * v),
                Err(Error::Degenerate(_)) => None,
                Err(e) => return Err(e),
            };
            (Some(stride * mpjpe(&full)?), pa)
        };

        let thresholds = oks_thresholds::<f64>();
        let per = ap_over_oks(items, &thresholds)?;
        let report = MetricReport {
            decoder: decoder.to_string(),
            samples: items.len(),
            mean_error: mean(err, n),
            mean_error_xy: mean(err_xy, n_xy),
            mean_error_z: (n_z > 0).then(|| mean(err_z, n_z)),
            pckh_0_5: pckh(items, 0.5)?,
            pckh_0_1: pckh(items, 0.1)?,
            auc: auc(items)?,
            pckh: curve,
            mpjpe: mpjpe_v,
            pa_mpjpe: pa_v,
            ap: per.iter().sum::<f64>() / per.len() as f64,
            ap_per_threshold: thresholds
                .iter()
                .zip(&per)
                .map(|(&threshold, &ap)| ThresholdAp { threshold, ap })
                .collect(),
        };
        report.validate()?;
        Ok(report)
    }

    /// Range checks on fractions and the alignment bound.
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        let fractions = self
            .pckh
            .iter()
            .map(|p| p.value)
            .chain(self.ap_per_threshold.iter().map(|t| t.ap))
            .chain([self.auc, self.ap, self.pckh_0_5, self.pckh_0_1]);
        for v in fractions {
            if !unit(v) {
                return Err(Error::Domain(format!("fraction {v} outside [0, 1]")));
            }
        }
        if let (Some(m), Some(pa)) = (self.mpjpe, self.pa_mpjpe) {
            if pa > m + 1e-9 {
                return Err(Error::Domain(format!("PA-MPJPE {pa} exceeds MPJPE {m}")));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// `metric,parameter,value` rows; the PCKh curve and per-threshold AP use
    /// the parameter column for alpha and the OKS threshold.
    pub fn to_csv(&self) -> String {
        let mut t = CsvTable::with_header(&["metric", "parameter", "value"]);
        let opt = |v: Option<f64>| v.map(sig9).unwrap_or_default();
        t.row(["decoder", self.decoder.as_str(), ""]);
        t.row(["samples".to_string(), String::new(), self.samples.to_string()]);
        t.row(["mean_error".to_string(), String::new(), sig9(self.mean_error)]);
        t.row(["mean_error_xy".to_string(), String::new(), sig9(self.mean_error_xy)]);
        t.row(["mean_error_z".to_string(), String::new(), opt(self.mean_error_z)]);
        for p in &self.pckh {
            t.row(["pckh".to_string(), sig9(p.alpha), sig9(p.value)]);
        }
        t.row(["auc".to_string(), String::new(), sig9(self.auc)]);
        t.row(["mpjpe".to_string(), String::new(), opt(self.mpjpe)]);
        t.row(["pa_mpjpe".to_string(), String::new(), opt(self.pa_mpjpe)]);
        for a in &self.ap_per_threshold {
            t.row(["ap".to_string(), sig9(a.threshold), sig9(a.ap)]);
        }
        t.row(["ap".to_string(), String::new(), sig9(self.ap)]);
        t.into_string()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::JointSet;

    fn items() -> Vec<PoseEvalItem> {
        let gt = JointSet::fully_masked(vec![[0.0, 0.0, 0.0], [2.0, 0.0, 1.0], [0.0, 3.0, 2.0]])
            .unwrap();
        let pred = JointSet::fully_masked(vec![[0.1, 0.0, 0.0], [2.0, 0.3, 1.0], [0.0, 3.0, 2.5]])
            .unwrap();
        let planar = JointSet::planar(vec![[1.0, 1.0, 0.0], [2.0, 2.0, 0.0], [3.0, 1.0, 0.0]])
            .unwrap();
        vec![
            PoseEvalItem::with_default_kappa(pred, gt, 4.0, 4.0).unwrap(),
            PoseEvalItem::with_default_kappa(planar.clone(), planar, 4.0, 4.0).unwrap(),
        ]
    }

    #[test]
    fn report_fields_and_formats() {
        let r = MetricReport::compute("integral", &items(), 1.0).unwrap();
        assert_eq!(r.samples, 2);
        assert_eq!(r.pckh.len(), 51);
        assert_eq!(r.ap_per_threshold.len(), 10);
        assert!(r.mpjpe.unwrap() >= r.pa_mpjpe.unwrap() - 1e-9);
        assert!((r.mean_error_z.unwrap() - 0.5 / 3.0).abs() < 1e-12);
        let json: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for key in [
            "decoder", "samples", "mean_error", "mean_error_xy", "mean_error_z", "pckh",
            "pckh_0_5", "pckh_0_1", "auc", "mpjpe", "pa_mpjpe", "ap", "ap_per_threshold",
        ] {
            assert!(json.get(key).is_some(), "missing {key}");
        }
        let csv = r.to_csv();
        assert!(csv.starts_with("metric,parameter,value\n"));
        assert_eq!(csv.lines().filter(|l| l.starts_with("pckh,")).count(), 51);
        assert!(csv.ends_with('\n') && !csv.contains('\r'));
    }

    #[test]
    fn stride_scales_lengths_only() {
        let a = MetricReport::compute("x", &items(), 1.0).unwrap();
        let b = MetricReport::compute("x", &items(), 4.0).unwrap();
        assert!((b.mean_error - 4.0 * a.mean_error).abs() < 1e-12);
        assert_eq!(a.auc, b.auc);
    }
}
