//! Result rows and CSV output.

use std::io::Write;

use serde::Serialize;

use crate::error::Result;

pub const CSV_HEADER: &str =
    "decoder,mode,sf,cr,users,snr_db,trials,failures,ser,ber,per,phy_sym_s,net_bit_s,delay_p50_s,delay_p95_s";

/// One CSV line. Fields that do not apply to a study are left empty.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MetricsRow {
    pub decoder: String,
    pub mode: String,
    pub sf: u8,
    /// Coding rate as `4/n_c`.
    pub cr: String,
    pub users: usize,
    pub snr_db: Option<f64>,
    pub trials: usize,
    pub failures: usize,
    pub ser: Option<f64>,
    pub ber: Option<f64>,
    pub per: Option<f64>,
    pub phy_sym_s: Option<f64>,
    pub net_bit_s: Option<f64>,
    pub delay_p50_s: Option<f64>,
    pub delay_p95_s: Option<f64>,
}

impl MetricsRow {
    pub fn new(decoder: &str, mode: &str, params: &lora_mpr::LoraParams, users: usize) -> Self {
        MetricsRow {
            decoder: decoder.into(),
            mode: mode.into(),
            sf: params.sf,
            cr: format!("4/{}", params.cr.n_c()),
            users,
            snr_db: None,
            trials: 0,
            failures: 0,
            ser: None,
            ber: None,
            per: None,
            phy_sym_s: None,
            net_bit_s: None,
            delay_p50_s: None,
            delay_p95_s: None,
        }
    }
}

pub fn write_csv<W: Write>(rows: &[MetricsRow], out: W) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    w.write_record(CSV_HEADER.split(','))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn to_csv_string(rows: &[MetricsRow]) -> Result<String> {
    let mut buf = Vec::new();
    write_csv(rows, &mut buf)?;
    Ok(String::from_utf8(buf).expect("csv output is utf-8"))
}

/// Nearest-rank percentile of `values`, `q` in `[0, 1]`.
pub fn percentile(values: &[f64], q: f64) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let rank = ((q.clamp(0.0, 1.0) * v.len() as f64).ceil() as usize).max(1);
    Some(v[rank - 1])
}
