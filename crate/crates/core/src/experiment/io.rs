//! CSV ingestion and output.
//!
//! Count files have columns `date,count`; variant files are long format
//! `date,variant,proportion`. Dates are ISO `YYYY-MM-DD` and must be
//! contiguous.

use std::collections::BTreeMap;
use std::path::Path;

use chrono::NaiveDate;

use crate::error::{Error, Result};
use crate::series::{day_offset, shift, CountSeries, SeverityCurve};
use crate::simulate::VariantProfile;

/// Proportions on a date may deviate from one by at most this much.
pub const PROPORTION_SUM_TOL: f64 = 1e-6;

fn parse_date(s: &str, row: usize) -> Result<NaiveDate> {
    NaiveDate::parse_from_str(s.trim(), "%Y-%m-%d").map_err(|e| Error::Parse(format!("row {row}: date {s:?}: {e}")))
}

fn reader(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))?;
    Ok(csv::Reader::from_reader(file))
}

fn check_contiguous(dates: &[NaiveDate], what: &str) -> Result<()> {
    for w in dates.windows(2) {
        match day_offset(w[0], w[1]) {
            1 => {}
            gap if gap > 1 => {
                return Err(Error::Validation(format!("{what}: missing date {}", shift(w[0], 1))));
            }
            _ => return Err(Error::Validation(format!("{what}: date {} out of order or repeated", w[1]))),
        }
    }
    Ok(())
}

/// Reads `date,count` rows allowing negative counts.
pub fn read_signed_counts(path: &Path) -> Result<(NaiveDate, Vec<i64>)> {
    let mut rdr = reader(path)?;
    let mut dates = Vec::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse(format!("{}: row {} has {} fields", path.display(), i + 1, rec.len())));
        }
        dates.push(parse_date(&rec[0], i + 1)?);
        let v: i64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{}: row {}: count {:?}", path.display(), i + 1, &rec[1])))?;
        values.push(v);
    }
    let Some(&origin) = dates.first() else {
        return Err(Error::Validation(format!("{}: no rows", path.display())));
    };
    check_contiguous(&dates, &path.display().to_string())?;
    Ok((origin, values))
}

/// Reads nonnegative `date,count` rows.
pub fn read_counts(path: &Path) -> Result<CountSeries> {
    let (origin, values) = read_signed_counts(path)?;
    let values = values
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            u64::try_from(v).map_err(|_| {
                Error::Validation(format!("{}: negative count {v} on {}", path.display(), shift(origin, i as i64)))
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CountSeries::new(origin, values))
}

/// Reads variant shares and attaches the given severities. The result
/// covers `len` days from `origin`; every such day must be present. With no
/// severities, every variant in the file is returned with severity 0.
pub fn read_variants(path: &Path, origin: NaiveDate, len: usize, severities: &[(String, f64)]) -> Result<Vec<VariantProfile>> {
    let mut rdr = reader(path)?;
    let mut shares: BTreeMap<NaiveDate, BTreeMap<String, f64>> = BTreeMap::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 3 {
            return Err(Error::Parse(format!("{}: row {} has {} fields", path.display(), i + 1, rec.len())));
        }
        let date = parse_date(&rec[0], i + 1)?;
        let c: f64 = rec[2]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{}: row {}: proportion {:?}", path.display(), i + 1, &rec[2])))?;
        if !(0.0..=1.0).contains(&c) {
            return Err(Error::Validation(format!("{}: proportion {c} on {date}", path.display())));
        }
        shares.entry(date).or_default().insert(rec[1].trim().to_string(), c);
    }
    for (date, row) in &shares {
        let total: f64 = row.values().sum();
        if (total - 1.0).abs() > PROPORTION_SUM_TOL {
            return Err(Error::Validation(format!("{}: proportions sum to {total} on {date}", path.display())));
        }
        if let Some(name) = row
            .keys()
            .find(|n| !severities.is_empty() && !severities.iter().any(|(s, _)| s == *n))
        {
            return Err(Error::Validation(format!("{}: no severity for variant {name}", path.display())));
        }
    }
    let named: Vec<(String, f64)> = if severities.is_empty() {
        let names: std::collections::BTreeSet<&String> = shares.values().flat_map(|r| r.keys()).collect();
        names.into_iter().map(|n| (n.clone(), 0.0)).collect()
    } else {
        severities.to_vec()
    };
    let mut profiles: Vec<VariantProfile> = named
        .iter()
        .map(|(name, severity)| VariantProfile {
            name: name.clone(),
            severity: *severity,
            proportions: Vec::with_capacity(len),
        })
        .collect();
    for i in 0..len {
        let date = shift(origin, i as i64);
        let row = shares
            .get(&date)
            .ok_or_else(|| Error::Validation(format!("{}: missing date {date}", path.display())))?;
        let total: f64 = row.values().sum();
        for v in &mut profiles {
            // renormalize within the tolerance so downstream sums are exact
            v.proportions.push(row.get(&v.name).copied().unwrap_or(0.0) / total);
        }
    }
    Ok(profiles)
}

/// Reads weekly `date,count` totals; dates must step by exactly seven days.
pub fn read_weekly(path: &Path) -> Result<(NaiveDate, Vec<u64>)> {
    let mut rdr = reader(path)?;
    let mut origin = None;
    let mut prev: Option<NaiveDate> = None;
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() < 2 {
            return Err(Error::Parse(format!("{}: row {} has {} fields", path.display(), i + 1, rec.len())));
        }
        let date = parse_date(&rec[0], i + 1)?;
        if let Some(p) = prev {
            if day_offset(p, date) != 7 {
                return Err(Error::Validation(format!(
                    "{}: week {date} does not follow {p} by seven days (missing week {})",
                    path.display(),
                    shift(p, 7)
                )));
            }
        }
        let v: u64 = rec[1]
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("{}: row {}: weekly total {:?}", path.display(), i + 1, &rec[1])))?;
        origin.get_or_insert(date);
        prev = Some(date);
        values.push(v);
    }
    let origin = origin.ok_or_else(|| Error::Validation(format!("{}: no rows", path.display())))?;
    Ok((origin, values))
}

pub fn write_counts(path: &Path, series: &CountSeries) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "count"])?;
    for (i, v) in series.values().iter().enumerate() {
        w.write_record([series.date(i).to_string(), v.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `date,estimate` rows.
pub fn write_curve(path: &Path, curve: &SeverityCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["date", "estimate"])?;
    for (i, v) in curve.values().iter().enumerate() {
        w.write_record([curve.date(i).to_string(), format!("{v:.8}")])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn temp(name: &str, body: &str) -> std::path::PathBuf {
        let dir = std::env::temp_dir().join(format!("sevrate-io-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let p = dir.join(name);
        std::fs::write(&p, body).unwrap();
        p
    }

    #[test]
    fn reads_counts_and_rejects_gaps() {
        let ok = temp("ok.csv", "date,count\n2021-01-01,3\n2021-01-02,4\n");
        let s = read_counts(&ok).unwrap();
        assert_eq!(s.values(), &[3, 4]);
        let gap = temp("gap.csv", "date,count\n2021-01-01,3\n2021-01-03,4\n");
        let msg = read_counts(&gap).unwrap_err().to_string();
        assert!(msg.contains("2021-01-02"), "{msg}");
        let neg = temp("neg.csv", "date,count\n2021-01-01,-3\n");
        assert!(read_counts(&neg).is_err());
        assert_eq!(read_signed_counts(&neg).unwrap().1, vec![-3]);
    }

    #[test]
    fn variant_rows_must_sum_to_one() {
        let origin = NaiveDate::from_ymd_opt(2021, 1, 1).unwrap();
        let sev = vec![("a".to_string(), 0.1), ("b".to_string(), 0.2)];
        let ok = temp("v.csv", "date,variant,proportion\n2021-01-01,a,0.25\n2021-01-01,b,0.75\n2021-01-02,a,1\n");
        let v = read_variants(&ok, origin, 2, &sev).unwrap();
        assert_eq!(v[0].proportions, vec![0.25, 1.0]);
        assert_eq!(v[1].proportions, vec![0.75, 0.0]);
        let bad = temp("vb.csv", "date,variant,proportion\n2021-01-01,a,0.25\n2021-01-01,b,0.7\n");
        assert!(read_variants(&bad, origin, 1, &sev).is_err());
        assert!(read_variants(&ok, origin, 3, &sev).is_err());
    }
}
