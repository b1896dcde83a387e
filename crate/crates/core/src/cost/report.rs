use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use super::{LayerConfig, LayerKind, LayerMetrics};

/// Rounds to six significant digits.
pub(crate) fn sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

/// Rounds to three significant digits, the precision printed in the
/// reference table.
pub(crate) fn sig3(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.2e}").parse().expect("formatted float parses")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub name: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub key: Option<String>,
    pub params: u64,
    /// Multiply-accumulates, reported as FLOPs.
    pub flops: u64,
    pub activation_elems: u64,
    pub arithmetic_intensity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<f64>,
}

impl CostRow {
    pub fn new(name: impl Into<String>, key: Option<String>, m: LayerMetrics, latency_us: Option<f64>) -> Self {
        Self {
            name: name.into(),
            key,
            params: m.params,
            flops: m.macs,
            activation_elems: m.activation_elems,
            arithmetic_intensity: sig6(m.arithmetic_intensity()),
            latency_us: latency_us.map(sig6),
        }
    }
}

/// Sums of the row counts. The intensity is recomputed from the summed
/// counts because intensities do not add.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostTotals {
    pub params: u64,
    pub flops: u64,
    pub activation_elems: u64,
    pub arithmetic_intensity: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub totals: CostTotals,
}

impl CostReport {
    /// `latencies` must be given for all rows or none; the latency total is
    /// summed from the unrounded values.
    pub fn from_metrics(rows: Vec<(String, Option<String>, LayerMetrics, Option<f64>)>) -> Self {
        let total: LayerMetrics = rows.iter().map(|r| r.2).sum();
        let latency = if rows.iter().all(|r| r.3.is_some()) && !rows.is_empty() {
            Some(sig6(rows.iter().map(|r| r.3.unwrap_or(0.0)).sum()))
        } else {
            None
        };
        let rows = rows.into_iter().map(|(n, k, m, l)| CostRow::new(n, k, m, l)).collect();
        Self {
            rows,
            totals: CostTotals {
                params: total.params,
                flops: total.macs,
                activation_elems: total.activation_elems,
                arithmetic_intensity: sig6(total.arithmetic_intensity()),
                latency_us: latency,
            },
        }
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("reports serialize");
        s.push('\n');
        s
    }

    /// Fixed-width text table.
    pub fn render(&self) -> String {
        let with_lat = self.totals.latency_us.is_some();
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(4).max(5);
        let mut out = String::new();
        let _ = write!(out, "{:<width$} {:>12} {:>14} {:>14} {:>10}", "layer", "params", "flops", "activations", "AI");
        if with_lat {
            let _ = write!(out, " {:>12}", "latency_us");
        }
        out.push('\n');
        let line = |out: &mut String, name: &str, p: u64, f: u64, a: u64, ai: f64, lat: Option<f64>| {
            let _ = write!(out, "{name:<width$} {p:>12} {f:>14} {a:>14} {ai:>10}");
            if let Some(l) = lat {
                let _ = write!(out, " {l:>12}");
            }
            out.push('\n');
        };
        for r in &self.rows {
            line(&mut out, &r.name, r.params, r.flops, r.activation_elems, r.arithmetic_intensity, r.latency_us);
        }
        let t = &self.totals;
        line(&mut out, "total", t.params, t.flops, t.activation_elems, t.arithmetic_intensity, t.latency_us);
        out
    }
}

/// One of the ten typical layer configurations: five convolution variants
/// at an early layer (`M = N = 32, F = 112`) and a late layer
/// (`M = N = 512, F = 7`), all with `K = 3`, `B = 1` and `G = 4` for the
/// group variant.
///
/// `table_intensity` follows the printed reference values: MACs are first
/// rounded to three significant digits, then divided by params plus
/// activations. It can differ from the exact ratio by about half a unit
/// (spatial early: 142.85 against an exact 142.37).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceRow {
    pub stage: String,
    pub config: LayerConfig,
    pub params: u64,
    pub flops: u64,
    pub arithmetic_intensity: f64,
    pub table_intensity: f64,
}

pub fn reference_layer_table() -> Vec<ReferenceRow> {
    let variants = [
        LayerKind::Spatial,
        LayerKind::SpatiallySeparable,
        LayerKind::Pointwise,
        LayerKind::Group,
        LayerKind::Depthwise,
    ];
    let mut rows = Vec::with_capacity(10);
    for (stage, ch, f) in [("early", 32u64, 112u64), ("late", 512, 7)] {
        for kind in variants {
            let k = if kind == LayerKind::Pointwise { 1 } else { 3 };
            let g = match kind {
                LayerKind::Group => 4,
                LayerKind::Depthwise => ch,
                _ => 1,
            };
            let config = LayerConfig::new(kind, ch, ch, k, f).with_groups(g);
            let m = config.metrics();
            rows.push(ReferenceRow {
                stage: stage.to_string(),
                config,
                params: m.params,
                flops: m.macs,
                arithmetic_intensity: sig6(m.arithmetic_intensity()),
                table_intensity: sig6(sig3(m.macs as f64) / (m.params + m.activation_elems) as f64),
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sig6_rounds() {
        assert_eq!(sig6(142.365_739), 142.366);
        assert_eq!(sig6(0.001_234_567_8), 0.001_234_57);
        assert_eq!(sig6(0.0), 0.0);
        assert_eq!(sig6(1_234_567.0), 1_234_570.0);
    }

    #[test]
    fn totals_are_sums() {
        let a = LayerConfig::new(LayerKind::Spatial, 8, 8, 3, 16).metrics();
        let b = LayerConfig::new(LayerKind::Shift, 8, 8, 3, 16).metrics();
        let r = CostReport::from_metrics(vec![
            ("a".into(), None, a, Some(2.0)),
            ("b".into(), None, b, Some(1.0)),
        ]);
        assert_eq!(r.totals.params, a.params);
        assert_eq!(r.totals.flops, a.macs);
        assert_eq!(r.totals.activation_elems, a.activation_elems + b.activation_elems);
        assert_eq!(r.totals.latency_us, Some(3.0));
        assert_eq!(r.rows[1].params, 0);
        assert_eq!(r.rows[1].flops, 0);
        assert!(r.render().lines().count() == 4);
    }

    #[test]
    fn reference_table_cells() {
        let t = reference_layer_table();
        assert_eq!(t.len(), 10);
        assert_eq!((t[0].params, t[0].flops), (9_216, 115_605_504));
        assert_eq!((t[9].params, t[9].flops), (4_608, 225_792));
        assert_eq!(t[2].config.k, 1);
        assert_eq!(t[0].arithmetic_intensity, 142.366);
        assert_eq!(t[0].table_intensity, 142.852);
        assert_eq!(sig3(115_605_504.0), 1.16e8);
    }
}
