//! CSV tables for summaries, quality strata and masking sweeps.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::metrics::EvalReport;
use crate::strata::{MaskingRow, QualityStratum};

pub const SUMMARY_HEADER: [&str; 4] = ["model", "ensemble", "alpha", "map_pct"];
pub const STRATA_HEADER: [&str; 5] = ["bin_index", "quality_lo", "quality_hi", "method", "ap"];
pub const MASKING_HEADER: [&str; 4] = ["p_mask", "method", "ap_mean", "ap_std"];

/// One line of the model / ensemble / mAP table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub model: String,
    pub ensemble: bool,
    pub alpha: Option<f64>,
    /// Fraction in [0,1]; written as a percentage with one decimal.
    pub map: f64,
}

impl SummaryRow {
    pub fn from_report(model: &str, r: &EvalReport) -> Self {
        Self {
            model: r.model.clone().unwrap_or_else(|| model.to_owned()),
            ensemble: r.ensemble,
            alpha: r.alpha,
            map: r.value(),
        }
    }
}

pub fn format_pct(fraction: f64) -> String {
    format!("{:.1}", fraction * 100.0)
}

fn value(v: f64) -> String {
    format!("{v:.6}")
}

fn writer<W: Write>(w: W, header: &[&str]) -> csv::Result<csv::Writer<W>> {
    let mut out = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(w);
    out.write_record(header)?;
    Ok(out)
}

pub fn write_summary_csv<W: Write>(w: W, rows: &[SummaryRow]) -> csv::Result<()> {
    let mut out = writer(w, &SUMMARY_HEADER)?;
    for r in rows {
        out.write_record([
            r.model.clone(),
            if r.ensemble { "yes" } else { "no" }.to_owned(),
            r.alpha.map(|a| format!("{a:.2}")).unwrap_or_default(),
            format_pct(r.map),
        ])?;
    }
    out.flush()?;
    Ok(())
}

pub fn write_strata_csv<W: Write>(w: W, strata: &[QualityStratum]) -> csv::Result<()> {
    let mut out = writer(w, &STRATA_HEADER)?;
    for s in strata {
        for (method, ap) in &s.ap {
            out.write_record([
                s.bin_index.to_string(),
                value(s.quality_lo),
                value(s.quality_hi),
                method.clone(),
                value(*ap),
            ])?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn write_masking_csv<W: Write>(w: W, rows: &[MaskingRow]) -> csv::Result<()> {
    let mut out = writer(w, &MASKING_HEADER)?;
    for r in rows {
        out.write_record([format!("{:.2}", r.p_mask), r.method.clone(), value(r.ap_mean), value(r.ap_std)])?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_string(f: impl FnOnce(&mut Vec<u8>) -> csv::Result<()>) -> String {
        let mut buf = Vec::new();
        f(&mut buf).unwrap();
        String::from_utf8(buf).unwrap()
    }

    #[test]
    fn empty_tables_are_header_only() {
        assert_eq!(csv_string(|b| write_strata_csv(b, &[])), "bin_index,quality_lo,quality_hi,method,ap\n");
        assert_eq!(csv_string(|b| write_masking_csv(b, &[])), "p_mask,method,ap_mean,ap_std\n");
        assert_eq!(csv_string(|b| write_summary_csv(b, &[])), "model,ensemble,alpha,map_pct\n");
    }

    #[test]
    fn summary_percentages_have_one_decimal() {
        let rows = [
            SummaryRow {
                model: "baseline".into(),
                ensemble: false,
                alpha: None,
                map: 0.51,
            },
            SummaryRow {
                model: "baseline".into(),
                ensemble: true,
                alpha: Some(0.35),
                map: 0.7024,
            },
        ];
        assert_eq!(
            csv_string(|b| write_summary_csv(b, &rows)),
            "model,ensemble,alpha,map_pct\nbaseline,no,,51.0\nbaseline,yes,0.35,70.2\n"
        );
    }

    #[test]
    fn strata_rows_per_method() {
        let s = QualityStratum {
            bin_index: 0,
            track_ids: vec![],
            quality_lo: 0.1,
            quality_hi: 0.25,
            ap: vec![("sync".into(), 0.5), ("fva".into(), 0.75)],
        };
        assert_eq!(
            csv_string(|b| write_strata_csv(b, &[s])),
            "bin_index,quality_lo,quality_hi,method,ap\n0,0.100000,0.250000,sync,0.500000\n0,0.100000,0.250000,fva,0.750000\n"
        );
    }
}
