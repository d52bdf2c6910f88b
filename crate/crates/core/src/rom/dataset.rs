//! Time-aligned building operation data and its CSV form.
//!
//! Columns, in order: `step, t_out, q_solar_1..N, q_int_1..N, t_zone_1..N,
//! mdot_1..N, t_da, is_weekday`. Row `t` holds the exogenous inputs of step
//! `t`, the zone temperatures at the start of step `t` and the command applied
//! during step `t`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ExogenousRecord, HvacCommand};
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OperationDataset {
    pub dt: f64,
    pub zone_count: usize,
    pub exogenous: Vec<ExogenousRecord>,
    pub temps: Vec<Vec<f64>>,
    pub commands: Vec<HvacCommand>,
}

impl OperationDataset {
    pub fn len(&self) -> usize {
        self.exogenous.len()
    }

    pub fn is_empty(&self) -> bool {
        self.exogenous.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.len();
        if self.temps.len() != n || self.commands.len() != n {
            return Err(Error::Dataset(format!(
                "sequence lengths differ: {} exogenous, {} temperature, {} command rows",
                n,
                self.temps.len(),
                self.commands.len()
            )));
        }
        for (k, rec) in self.exogenous.iter().enumerate() {
            if k > 0 && rec.step_index != self.exogenous[k - 1].step_index + 1 {
                return Err(Error::Dataset(format!(
                    "step index jumps from {} to {} at row {k}",
                    self.exogenous[k - 1].step_index, rec.step_index
                )));
            }
            if rec.q_solar.len() != self.zone_count || rec.q_int.len() != self.zone_count {
                return Err(Error::Dataset(format!("row {k}: wrong gain vector length")));
            }
            if rec.q_solar.iter().chain(&rec.q_int).any(|q| *q < 0.0) {
                return Err(Error::Dataset(format!("row {k}: negative heat gain")));
            }
            if self.temps[k].len() != self.zone_count
                || self.commands[k].mdot.len() != self.zone_count
            {
                return Err(Error::Dataset(format!("row {k}: wrong zone count")));
            }
        }
        Ok(())
    }

    /// Rows `[start, end)` as a new dataset.
    pub fn slice(&self, start: usize, end: usize) -> OperationDataset {
        OperationDataset {
            dt: self.dt,
            zone_count: self.zone_count,
            exogenous: self.exogenous[start..end].to_vec(),
            temps: self.temps[start..end].to_vec(),
            commands: self.commands[start..end].to_vec(),
        }
    }

    /// Splits the exogenous records into consecutive days of `steps_per_day`.
    /// A trailing partial day is dropped.
    pub fn days(&self, steps_per_day: usize) -> Vec<Vec<ExogenousRecord>> {
        self.exogenous
            .chunks_exact(steps_per_day)
            .map(|c| c.to_vec())
            .collect()
    }

    pub fn header(zone_count: usize) -> Vec<String> {
        let mut h = vec!["step".to_string(), "t_out".to_string()];
        let n = zone_count;
        h.extend((1..=n).map(|i| format!("q_solar_{i}")));
        h.extend((1..=n).map(|i| format!("q_int_{i}")));
        h.extend((1..=n).map(|i| format!("t_zone_{i}")));
        h.extend((1..=n).map(|i| format!("mdot_{i}")));
        h.push("t_da".into());
        h.push("is_weekday".into());
        h
    }

    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(Self::header(self.zone_count))?;
        for k in 0..self.len() {
            let e = &self.exogenous[k];
            let mut row = vec![e.step_index.to_string(), e.t_out.to_string()];
            row.extend(e.q_solar.iter().map(f64::to_string));
            row.extend(e.q_int.iter().map(f64::to_string));
            row.extend(self.temps[k].iter().map(f64::to_string));
            row.extend(self.commands[k].mdot.iter().map(f64::to_string));
            row.push(self.commands[k].t_da.to_string());
            row.push(if e.is_weekday { "1" } else { "0" }.into());
            w.write_record(&row)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Dataset(format!("csv flush: {e}")))?;
        String::from_utf8(bytes).map_err(|e| Error::Dataset(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let text = self.to_csv_string()?;
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path, dt: f64) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv_str(&text, dt).map_err(|e| match e {
            Error::MalformedCsv { line, message, .. } => Error::MalformedCsv {
                path: path.to_path_buf(),
                line,
                message,
            },
            other => other,
        })
    }

    pub fn from_csv_str(text: &str, dt: f64) -> Result<Self> {
        let malformed = |line: u64, message: String| Error::MalformedCsv {
            path: "<memory>".into(),
            line,
            message,
        };
        let mut r = csv::Reader::from_reader(text.as_bytes());
        let header = r.headers()?.clone();
        let cols = header.len();
        if cols < 5 || (cols - 4) % 4 != 0 {
            return Err(malformed(1, format!("unexpected column count {cols}")));
        }
        let n = (cols - 4) / 4;
        let expected = Self::header(n);
        if header.iter().ne(expected.iter().map(String::as_str)) {
            return Err(malformed(1, "header does not match dataset schema".into()));
        }

        let mut ds = OperationDataset {
            dt,
            zone_count: n,
            exogenous: Vec::new(),
            temps: Vec::new(),
            commands: Vec::new(),
        };
        for rec in r.records() {
            let rec = rec?;
            let line = rec.position().map(|p| p.line()).unwrap_or(0);
            if rec.len() != cols {
                return Err(malformed(line, format!("expected {cols} fields, got {}", rec.len())));
            }
            let num = |k: usize| -> Result<f64> {
                rec[k]
                    .trim()
                    .parse::<f64>()
                    .map_err(|_| malformed(line, format!("column `{}` is not a number", &header[k])))
            };
            let step = rec[0]
                .trim()
                .parse::<usize>()
                .map_err(|_| malformed(line, "step is not an integer".into()))?;
            let block = |off: usize| -> Result<Vec<f64>> { (off..off + n).map(num).collect() };
            let is_weekday = match rec[cols - 1].trim() {
                "1" | "true" => true,
                "0" | "false" => false,
                other => return Err(malformed(line, format!("bad is_weekday `{other}`"))),
            };
            ds.exogenous.push(ExogenousRecord {
                step_index: step,
                t_out: num(1)?,
                q_solar: block(2)?,
                q_int: block(2 + n)?,
                is_weekday,
            });
            ds.temps.push(block(2 + 2 * n)?);
            ds.commands.push(HvacCommand {
                mdot: block(2 + 3 * n)?,
                t_da: num(2 + 4 * n)?,
            });
        }
        if ds.is_empty() {
            return Err(malformed(1, "no data rows".into()));
        }
        ds.validate()?;
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> OperationDataset {
        let exo = |k: usize| ExogenousRecord {
            step_index: k,
            t_out: 25.0 + k as f64 * 0.1,
            q_solar: vec![0.5, 0.0],
            q_int: vec![4.0, 4.0],
            is_weekday: k.is_multiple_of(2),
        };
        OperationDataset {
            dt: 1.0 / 12.0,
            zone_count: 2,
            exogenous: (0..3).map(exo).collect(),
            temps: vec![vec![24.0, 24.5]; 3],
            commands: vec![
                HvacCommand {
                    mdot: vec![0.3, 1.1],
                    t_da: 12.5
                };
                3
            ],
        }
    }

    #[test]
    fn header_order_is_fixed() {
        assert_eq!(
            OperationDataset::header(2).join(","),
            "step,t_out,q_solar_1,q_solar_2,q_int_1,q_int_2,t_zone_1,t_zone_2,mdot_1,mdot_2,t_da,is_weekday"
        );
    }

    #[test]
    fn csv_round_trip_is_lossless() {
        let ds = tiny();
        let text = ds.to_csv_string().unwrap();
        let back = OperationDataset::from_csv_str(&text, ds.dt).unwrap();
        assert_eq!(back, ds);
    }

    #[test]
    fn malformed_row_reports_line() {
        let mut text = tiny().to_csv_string().unwrap();
        text = text.replacen("12.5", "abc", 1);
        match OperationDataset::from_csv_str(&text, 1.0 / 12.0) {
            Err(Error::MalformedCsv { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn gaps_are_rejected() {
        let mut ds = tiny();
        ds.exogenous[2].step_index = 5;
        assert!(ds.validate().is_err());
    }
}
