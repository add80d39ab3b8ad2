use std::fmt::Write as _;

use super::{ClassificationReport, EcoReport, Quad};

/// Ordered `(metric, value)` rows. A `None` value is written as `NA`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<(String, Option<f64>)>,
}

impl MetricReport {
    pub fn push(&mut self, name: impl Into<String>, value: Option<f64>) {
        self.rows.push((name.into(), value));
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.0 == name).and_then(|r| r.1)
    }

    pub fn add_classification(&mut self, c: &ClassificationReport) {
        self.push("ebF1", Some(c.eb_f1));
        self.push("miF1", Some(c.mi_f1));
        self.push("maF1", Some(c.ma_f1));
        self.push("HA", Some(c.hamming));
        self.push("medianAUC", c.auc.as_ref().map(|a| a.median));
        self.push("tau_ebF1", Some(c.thresholds.eb_f1));
        self.push("tau_miF1", Some(c.thresholds.mi_f1));
        self.push("tau_maF1", Some(c.thresholds.ma_f1));
        self.push("tau_HA", Some(c.thresholds.hamming));
    }

    fn add_quad(&mut self, prefix: &str, q: &Quad) {
        self.push(format!("{prefix}_accuracy"), Some(q.accuracy));
        self.push(format!("{prefix}_discrimination"), q.discrimination);
        self.push(format!("{prefix}_calibration"), Some(q.calibration));
        self.push(format!("{prefix}_precision"), Some(q.precision));
    }

    pub fn add_eco(&mut self, e: &EcoReport) {
        self.add_quad("occurrence", &e.occurrence);
        self.add_quad("richness", &e.richness);
        self.add_quad("community_sor", &e.community.sor);
        self.add_quad("community_sim", &e.community.sim);
        self.add_quad("community_nes", &e.community.nes);
        self.push("community_empty_pairs", Some(e.community.empty_pairs as f64));
    }

    fn fmt_value(v: Option<f64>) -> String {
        v.map_or_else(|| "NA".to_string(), |x| format!("{x:?}"))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in &self.rows {
            let _ = writeln!(s, "{k},{}", Self::fmt_value(*v));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let w = self.rows.iter().map(|r| r.0.len()).max().unwrap_or(6).max(6);
        let mut s = format!("{:<w$}  value\n{}\n", "metric", "-".repeat(w + 12));
        for (k, v) in &self.rows {
            let val = v.map_or_else(|| "NA".to_string(), |x| format!("{x:.4}"));
            let _ = writeln!(s, "{k:<w$}  {val}");
        }
        s
    }
}
