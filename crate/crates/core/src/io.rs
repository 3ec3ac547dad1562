//! CSV and JSON output formats.
//!
//! Reals are written with 17 significant digits so every value parses back
//! to the identical `f64`. Missing optional values are empty CSV fields and
//! JSON `null`. Line endings are LF.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::Serialize;

use crate::error::Result;
use crate::experiments::TrialResult;
use crate::trainer::TrainTrace;

pub const SCHEMA_VERSION: u32 = 1;

pub const TRIAL_HEADER: [&str; 16] = [
    "trial_id",
    "seed",
    "d",
    "alpha0",
    "alpha_c",
    "alpha_r",
    "kappa",
    "c1_holds",
    "v_delta_norm_sq",
    "gamma",
    "eta",
    "steps",
    "gain_population",
    "gain_sgd",
    "gain_sgd_reversed",
    "improved",
];

pub const TRACE_HEADER: [&str; 3] = ["step", "cosine", "norm"];

/// Scientific notation with 17 significant digits.
pub fn fmt_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn fmt_opt_real(x: Option<f64>) -> String {
    x.map(fmt_real).unwrap_or_default()
}

fn csv_writer<W: Write>(out: W) -> csv::Writer<W> {
    csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out)
}

pub fn write_trials_csv<W: Write>(rows: &[TrialResult], out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(TRIAL_HEADER)?;
    for r in rows {
        w.write_record([
            r.trial_id.to_string(),
            r.seed.to_string(),
            r.dim.to_string(),
            fmt_real(r.alpha0),
            fmt_real(r.alpha_c),
            fmt_real(r.alpha_r),
            fmt_real(r.kappa),
            r.c1_holds.to_string(),
            fmt_real(r.v_delta_norm_sq),
            fmt_opt_real(r.gamma),
            fmt_opt_real(r.eta),
            r.steps.map(|s| s.to_string()).unwrap_or_default(),
            fmt_opt_real(r.gain_population),
            fmt_opt_real(r.gain_sgd),
            fmt_opt_real(r.gain_sgd_reversed),
            r.improved.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_trace_csv<W: Write>(trace: &TrainTrace, out: W) -> Result<()> {
    let mut w = csv_writer(out);
    w.write_record(TRACE_HEADER)?;
    for p in &trace.points {
        w.write_record([p.step.to_string(), fmt_real(p.cosine), fmt_real(p.norm)])?;
    }
    w.flush()?;
    Ok(())
}

/// Pretty JSON with a trailing newline. Key order follows struct field order
/// and `serde_json`'s sorted maps, so equal values give equal bytes.
pub fn to_json_string<T: Serialize>(value: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    Ok(s)
}

/// Writes `contents` to `path`, or to standard output when `path` is `None`.
pub fn emit(contents: &[u8], path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => {
            let mut f = BufWriter::new(File::create(p)?);
            f.write_all(contents)?;
            f.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            lock.write_all(contents)?;
            lock.flush()?;
        }
    }
    Ok(())
}

pub fn emit_json<T: Serialize>(value: &T, path: Option<&Path>) -> Result<()> {
    emit(to_json_string(value)?.as_bytes(), path)
}

pub fn emit_trials_csv(rows: &[TrialResult], path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trials_csv(rows, &mut buf)?;
    emit(&buf, Some(path))
}

pub fn emit_trace_csv(trace: &TrainTrace, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_trace_csv(trace, &mut buf)?;
    emit(&buf, Some(path))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: u64) -> TrialResult {
        TrialResult {
            trial_id: id,
            seed: 42,
            dim: 8,
            alpha0: 0.1,
            alpha_c: 0.5,
            alpha_r: -1.0 / 3.0,
            kappa: 0.123_456_789_012_345_67,
            c1_holds: true,
            v_delta_norm_sq: 1.5,
            gamma: Some(1e-7),
            eta: Some(3.3e-9),
            steps: Some(123_456),
            gain_population: Some(0.01),
            gain_sgd: Some(-2e-3),
            gain_sgd_reversed: None,
            improved: false,
            improved_strict: false,
            diverged: false,
            notes: String::new(),
            wall_time_s: 0.0,
        }
    }

    #[test]
    fn empty_trial_set_is_header_only() {
        let mut buf = Vec::new();
        write_trials_csv(&[], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(
            text,
            "trial_id,seed,d,alpha0,alpha_c,alpha_r,kappa,c1_holds,v_delta_norm_sq,gamma,eta,steps,\
             gain_population,gain_sgd,gain_sgd_reversed,improved\n"
        );
    }

    #[test]
    fn one_trial_is_two_lf_lines() {
        let mut buf = Vec::new();
        write_trials_csv(&[row(0)], &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.matches('\n').count(), 2);
        assert!(!text.contains('\r'));
        let data = text.lines().nth(1).unwrap();
        let fields: Vec<&str> = data.split(',').collect();
        assert_eq!(fields.len(), 16);
        assert_eq!(fields[14], "");
        assert_eq!(fields[11], "123456");
    }

    #[test]
    fn csv_round_trip_is_bit_exact() {
        let rows = vec![row(0), row(1)];
        let mut buf = Vec::new();
        write_trials_csv(&rows, &mut buf).unwrap();
        let mut rdr = csv::Reader::from_reader(buf.as_slice());
        for (rec, r) in rdr.records().zip(&rows) {
            let rec = rec.unwrap();
            assert_eq!(rec[6].parse::<f64>().unwrap().to_bits(), r.kappa.to_bits());
            assert_eq!(rec[5].parse::<f64>().unwrap().to_bits(), r.alpha_r.to_bits());
            assert_eq!(rec[10].parse::<f64>().unwrap().to_bits(), r.eta.unwrap().to_bits());
        }
    }

    proptest! {
        #[test]
        fn real_format_round_trips(x in proptest::num::f64::NORMAL | proptest::num::f64::SUBNORMAL | proptest::num::f64::ZERO) {
            let s = fmt_real(x);
            prop_assert_eq!(s.parse::<f64>().unwrap().to_bits(), x.to_bits());
        }
    }

    #[test]
    fn json_has_trailing_newline() {
        let s = to_json_string(&serde_json::json!({"b": 1, "a": [1.5, null]})).unwrap();
        assert!(s.ends_with("}\n"));
        assert!(s.find("\"a\"").unwrap() < s.find("\"b\"").unwrap());
    }

    #[test]
    fn unwritable_path_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let bad = dir.path().join("missing").join("out.json");
        assert!(emit_json(&1, Some(&bad)).is_err());
    }
}
