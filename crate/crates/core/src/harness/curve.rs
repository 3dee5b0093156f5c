//! Certified-accuracy curves and side-by-side comparison tables.

use crate::error::{Error, Result};
use crate::smoothing::{certified_accuracy, ResultRow};
use std::fmt::Write as _;

/// `0, step, 2·step, …, max`, rounded so the grid prints cleanly.
pub fn radii_grid(max: f64, step: f64) -> Vec<f64> {
    let n = (max / step + 1e-9).floor() as usize;
    (0..=n).map(|i| ((i as f64 * step) * 1e9).round() / 1e9).collect()
}

/// Certified accuracy as a function of radius for one results file.
#[derive(Clone, Debug, PartialEq)]
pub struct CertifiedAccuracyCurve {
    pub label: String,
    pub radii: Vec<f64>,
    pub accuracy: Vec<f64>,
    /// Accuracy of the smoothed classifier on the unperturbed inputs:
    /// correct and not abstained.
    pub clean_accuracy: f64,
    pub abstain_rate: f64,
    /// Parameters updated by training, classifier head included.
    pub trained_parameters: usize,
    /// Parameters added by the adaptation method alone.
    pub adapted_parameters: usize,
}

impl CertifiedAccuracyCurve {
    pub fn from_rows(
        label: impl Into<String>,
        rows: &[ResultRow],
        radii: &[f64],
        trained_parameters: usize,
        adapted_parameters: usize,
    ) -> Self {
        let n = rows.len().max(1) as f64;
        CertifiedAccuracyCurve {
            label: label.into(),
            radii: radii.to_vec(),
            accuracy: radii.iter().map(|&r| certified_accuracy(rows, r)).collect(),
            clean_accuracy: rows.iter().filter(|r| r.correct && r.predict.is_some()).count() as f64 / n,
            abstain_rate: rows.iter().filter(|r| r.predict.is_none()).count() as f64 / n,
            trained_parameters,
            adapted_parameters,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.radii.len() != self.accuracy.len() {
            return Err(Error::Data(format!("curve `{}` has mismatched columns", self.label)));
        }
        let unit = |v: f64| (0.0..=1.0).contains(&v);
        if !self.accuracy.iter().all(|&a| unit(a)) || !unit(self.clean_accuracy) || !unit(self.abstain_rate) {
            return Err(Error::Data(format!("curve `{}` has values outside [0,1]", self.label)));
        }
        if self.accuracy.windows(2).any(|w| w[1] > w[0]) {
            return Err(Error::Data(format!("curve `{}` increases with radius", self.label)));
        }
        Ok(())
    }

    /// Accuracy at the grid point closest to `r`.
    pub fn at(&self, r: f64) -> f64 {
        let i = self
            .radii
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - r).abs().total_cmp(&(b.1 - r).abs()))
            .map_or(0, |(i, _)| i);
        self.accuracy.get(i).copied().unwrap_or(0.0)
    }

    pub fn to_csv(&self, provenance: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in provenance {
            let _ = writeln!(s, "# {k}={v}");
        }
        let _ = writeln!(s, "# curve.label={}", self.label);
        let _ = writeln!(s, "# curve.clean_accuracy={:.6}", self.clean_accuracy);
        let _ = writeln!(s, "# curve.abstain_rate={:.6}", self.abstain_rate);
        let _ = writeln!(s, "# curve.trained_parameters={}", self.trained_parameters);
        let _ = writeln!(s, "# curve.adapted_parameters={}", self.adapted_parameters);
        s.push_str("radius,certified_accuracy\n");
        for (r, a) in self.radii.iter().zip(&self.accuracy) {
            let _ = writeln!(s, "{r:.4},{a:.6}");
        }
        s
    }

    /// Whitespace-separated `radius accuracy` columns for plotting tools.
    pub fn to_plot_data(&self) -> String {
        let mut s = format!("# {}\n", self.label);
        for (r, a) in self.radii.iter().zip(&self.accuracy) {
            let _ = writeln!(s, "{r:.4} {a:.6}");
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |what: &str| Error::Data(format!("curve file: {what}"));
        let mut c = CertifiedAccuracyCurve {
            label: String::new(),
            radii: Vec::new(),
            accuracy: Vec::new(),
            clean_accuracy: 0.0,
            abstain_rate: 0.0,
            trained_parameters: 0,
            adapted_parameters: 0,
        };
        let mut header = false;
        for line in text.lines() {
            if let Some(meta) = line.strip_prefix("# curve.") {
                let (k, v) = meta.split_once('=').ok_or_else(|| bad("malformed metadata"))?;
                let num = |v: &str| v.parse::<f64>().map_err(|_| bad(k));
                match k {
                    "label" => c.label = v.to_string(),
                    "clean_accuracy" => c.clean_accuracy = num(v)?,
                    "abstain_rate" => c.abstain_rate = num(v)?,
                    "trained_parameters" => c.trained_parameters = v.parse().map_err(|_| bad(k))?,
                    "adapted_parameters" => c.adapted_parameters = v.parse().map_err(|_| bad(k))?,
                    _ => {}
                }
            } else if line.starts_with('#') || line.is_empty() {
                continue;
            } else if !header {
                if line != "radius,certified_accuracy" {
                    return Err(bad("missing header"));
                }
                header = true;
            } else {
                let (r, a) = line.split_once(',').ok_or_else(|| bad("malformed row"))?;
                c.radii.push(r.parse().map_err(|_| bad("radius"))?);
                c.accuracy.push(a.parse().map_err(|_| bad("accuracy"))?);
            }
        }
        if !header {
            return Err(bad("missing header"));
        }
        c.validate()?;
        Ok(c)
    }
}

/// Winner at one radius.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Best {
    Unique(usize),
    /// Several curves share the maximum.
    Tie(Vec<usize>),
}

/// Curves aligned on a shared radii grid.
#[derive(Clone, Debug, PartialEq)]
pub struct Comparison {
    pub curves: Vec<CertifiedAccuracyCurve>,
    pub radii: Vec<f64>,
    pub best: Vec<Best>,
}

pub fn compare(curves: &[CertifiedAccuracyCurve]) -> Result<Comparison> {
    let first = curves.first().ok_or_else(|| Error::Data("nothing to compare".into()))?;
    for c in curves {
        let same = c.radii.len() == first.radii.len()
            && c.radii.iter().zip(&first.radii).all(|(a, b)| (a - b).abs() < 1e-9);
        if !same {
            return Err(Error::Data(format!(
                "curve `{}` uses a different radii grid from `{}`",
                c.label, first.label
            )));
        }
    }
    let best = (0..first.radii.len())
        .map(|j| {
            let top = curves.iter().map(|c| c.accuracy[j]).fold(f64::NEG_INFINITY, f64::max);
            let at_top: Vec<usize> = (0..curves.len()).filter(|&i| curves[i].accuracy[j] == top).collect();
            if at_top.len() == 1 {
                Best::Unique(at_top[0])
            } else {
                Best::Tie(at_top)
            }
        })
        .collect();
    Ok(Comparison { curves: curves.to_vec(), radii: first.radii.clone(), best })
}

impl Comparison {
    /// One row per curve, one column per radius. A unique per-radius maximum
    /// carries a trailing `*`; tied maxima carry `=`.
    pub fn to_csv(&self, provenance: &[(String, String)]) -> String {
        let mut s = String::new();
        for (k, v) in provenance {
            let _ = writeln!(s, "# {k}={v}");
        }
        s.push_str("curve,trained_parameters,adapted_parameters,clean_accuracy,abstain_rate");
        for r in &self.radii {
            let _ = write!(s, ",r={r:.2}");
        }
        s.push('\n');
        for (i, c) in self.curves.iter().enumerate() {
            let _ = write!(
                s,
                "{},{},{},{:.6},{:.6}",
                c.label, c.trained_parameters, c.adapted_parameters, c.clean_accuracy, c.abstain_rate
            );
            for (j, a) in c.accuracy.iter().enumerate() {
                let mark = match &self.best[j] {
                    Best::Unique(b) if *b == i => "*",
                    Best::Tie(t) if t.contains(&i) => "=",
                    _ => "",
                };
                let _ = write!(s, ",{a:.6}{mark}");
            }
            s.push('\n');
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Duration;

    fn row(predict: Option<usize>, radius: f64, correct: bool) -> ResultRow {
        ResultRow { idx: 0, label: 1, predict, radius, correct, time: Duration::ZERO }
    }

    #[test]
    fn grid_endpoints() {
        let g = radii_grid(2.0, 0.05);
        assert_eq!(g.len(), 41);
        assert_eq!(g[0], 0.0);
        assert_eq!(g[40], 2.0);
        assert_eq!(g[3], 0.15);
    }

    #[test]
    fn all_abstain_gives_zero_curve() {
        let rows = vec![row(None, 0.0, false); 5];
        let c = CertifiedAccuracyCurve::from_rows("x", &rows, &radii_grid(1.0, 0.5), 0, 0);
        assert_eq!(c.accuracy, vec![0.0, 0.0, 0.0]);
        assert_eq!(c.abstain_rate, 1.0);
    }

    #[test]
    fn csv_round_trip() {
        let rows = vec![row(Some(1), 0.3, true), row(Some(0), 0.9, false), row(None, 0.0, false)];
        let c = CertifiedAccuracyCurve::from_rows("lora r=2", &rows, &radii_grid(0.5, 0.1), 10, 4);
        c.validate().unwrap();
        let back = CertifiedAccuracyCurve::from_csv(&c.to_csv(&[("seed".into(), "0".into())])).unwrap();
        assert_eq!(back.label, c.label);
        assert_eq!(back.radii, c.radii);
        assert_eq!(back.trained_parameters, 10);
        for (a, b) in back.accuracy.iter().zip(&c.accuracy) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn ties_are_marked_and_grids_must_match() {
        let rows = vec![row(Some(1), 0.3, true)];
        let a = CertifiedAccuracyCurve::from_rows("a", &rows, &radii_grid(0.5, 0.25), 0, 0);
        let t = compare(&[a.clone(), a.clone()]).unwrap();
        assert!(t.best.iter().all(|b| matches!(b, Best::Tie(v) if v.len() == 2)));
        assert!(t.to_csv(&[]).contains("1.000000="));
        let single = compare(std::slice::from_ref(&a)).unwrap();
        assert_eq!(single.curves[0], a);
        let other = CertifiedAccuracyCurve::from_rows("b", &rows, &radii_grid(0.5, 0.1), 0, 0);
        assert!(compare(&[a, other]).is_err());
    }
}
