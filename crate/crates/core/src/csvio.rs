//! CSV ingestion and export.
//!
//! Sample schema: header `id,z,y,x1..xp[,stratum]`, with `z` in {0,1} and a
//! missing outcome encoded as an empty field. Columns are identified by
//! header name, so an optional `score` column carrying precomputed
//! propensity scores is also accepted. Design files hold a pair table
//! followed by an `unmatched` section.

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{MatchedDesign, MatchedPair, Sample, Unit};

/// Reads a sample from CSV, validating the header layout.
pub fn read_sample<R: Read>(reader: R) -> Result<Sample> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr.headers()?.clone();

    let mut id_col = None;
    let mut z_col = None;
    let mut y_col = None;
    let mut score_col = None;
    let mut stratum_col = None;
    let mut x_cols: Vec<(usize, usize)> = Vec::new(); // (covariate number, column)
    for (i, name) in headers.iter().enumerate() {
        match name {
            "id" => id_col = Some(i),
            "z" => z_col = Some(i),
            "y" => y_col = Some(i),
            "score" => score_col = Some(i),
            "stratum" => stratum_col = Some(i),
            _ => {
                if let Some(num) = name.strip_prefix('x').and_then(|n| n.parse::<usize>().ok()) {
                    x_cols.push((num, i));
                } else {
                    return Err(Error::Parse(format!("unrecognized column `{name}`")));
                }
            }
        }
    }
    let id_col = id_col.ok_or_else(|| Error::Parse("missing `id` column".into()))?;
    let z_col = z_col.ok_or_else(|| Error::Parse("missing `z` column".into()))?;
    x_cols.sort();
    for (k, &(num, _)) in x_cols.iter().enumerate() {
        if num != k + 1 {
            return Err(Error::Parse(format!(
                "covariate columns must be named x1..xp without gaps (saw x{num})"
            )));
        }
    }

    let mut units = Vec::new();
    let mut strata = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        let at = |col: usize| -> Result<&str> {
            record
                .get(col)
                .ok_or_else(|| Error::Parse(format!("line {}: short record", line + 2)))
        };
        let id = at(id_col)?.to_string();
        let z: i64 = at(z_col)?
            .parse()
            .map_err(|_| Error::Parse(format!("line {}: bad treatment value", line + 2)))?;
        if z != 0 && z != 1 {
            return Err(Error::NonBinaryTreatment { id, value: z });
        }
        let parse_f64 = |field: &str, what: &str| -> Result<f64> {
            field
                .parse()
                .map_err(|_| Error::Parse(format!("line {}: bad {what} value `{field}`", line + 2)))
        };
        let outcome = match y_col {
            Some(c) => {
                let field = at(c)?;
                if field.is_empty() {
                    None
                } else {
                    Some(parse_f64(field, "outcome")?)
                }
            }
            None => None,
        };
        let score = match score_col {
            Some(c) => {
                let field = at(c)?;
                if field.is_empty() {
                    None
                } else {
                    Some(parse_f64(field, "score")?)
                }
            }
            None => None,
        };
        let mut covariates = Vec::with_capacity(x_cols.len());
        for &(_, c) in &x_cols {
            covariates.push(parse_f64(at(c)?, "covariate")?);
        }
        if let Some(c) = stratum_col {
            strata.push(at(c)?.to_string());
        }
        units.push(Unit {
            id,
            treatment: z as u8,
            outcome,
            covariates,
            score,
        });
    }

    let mut sample = Sample::new(units);
    if stratum_col.is_some() {
        sample.strata = Some(strata);
    }
    crate::model::validate_sample(sample)
}

pub fn read_sample_path(path: &Path) -> Result<Sample> {
    read_sample(std::fs::File::open(path)?)
}

/// Writes a sample back out in the ingestion schema.
pub fn write_sample<W: Write>(writer: W, sample: &Sample) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(writer);
    let p = sample.units.first().map_or(0, |u| u.covariates.len());
    let mut header = vec!["id".to_string(), "z".to_string(), "y".to_string(), "score".to_string()];
    for k in 1..=p {
        header.push(format!("x{k}"));
    }
    if sample.strata.is_some() {
        header.push("stratum".to_string());
    }
    wtr.write_record(&header)?;
    for (i, u) in sample.units.iter().enumerate() {
        let mut row = vec![
            u.id.clone(),
            u.treatment.to_string(),
            u.outcome.map_or(String::new(), fmt_f64),
            u.score.map_or(String::new(), fmt_f64),
        ];
        for x in &u.covariates {
            row.push(fmt_f64(*x));
        }
        if let Some(strata) = &sample.strata {
            row.push(strata[i].clone());
        }
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

/// Round-trippable float formatting.
fn fmt_f64(x: f64) -> String {
    let mut buf = ryu_format(x);
    if buf.ends_with(".0") {
        buf.truncate(buf.len() - 2);
    }
    buf
}

fn ryu_format(x: f64) -> String {
    // `{:?}` on f64 prints the shortest representation that round-trips.
    format!("{x:?}")
}

/// Writes a design as `pair_id,treated_id,control_id,distance` rows followed
/// by an `unmatched` section of `id,treatment` rows.
pub fn write_design<W: Write>(mut writer: W, design: &MatchedDesign) -> Result<()> {
    writeln!(writer, "pair_id,treated_id,control_id,distance")?;
    for (k, pair) in design.pairs.iter().enumerate() {
        writeln!(
            writer,
            "{},{},{},{}",
            k + 1,
            pair.treated,
            pair.control,
            fmt_f64(pair.distance)
        )?;
    }
    writeln!(writer, "unmatched")?;
    writeln!(writer, "id,treatment")?;
    for (id, z) in &design.unmatched {
        writeln!(writer, "{id},{z}")?;
    }
    Ok(())
}

/// Reads a design file produced by [`write_design`].
pub fn read_design<R: Read>(reader: R) -> Result<MatchedDesign> {
    let mut text = String::new();
    let mut reader = reader;
    reader.read_to_string(&mut text)?;
    let mut lines = text.lines();
    match lines.next() {
        Some("pair_id,treated_id,control_id,distance") => {}
        _ => return Err(Error::Parse("design file missing pair header".into())),
    }
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    let mut in_unmatched = false;
    let mut objective = 0.0;
    for line in lines {
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line == "unmatched" {
            in_unmatched = true;
            continue;
        }
        if in_unmatched {
            if line == "id,treatment" {
                continue;
            }
            let mut it = line.split(',');
            let id = it
                .next()
                .ok_or_else(|| Error::Parse("bad unmatched row".into()))?
                .to_string();
            let z: u8 = it
                .next()
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Parse("bad unmatched treatment".into()))?;
            unmatched.push((id, z));
        } else {
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 4 {
                return Err(Error::Parse(format!("bad pair row `{line}`")));
            }
            let distance: f64 = fields[3]
                .parse()
                .map_err(|_| Error::Parse(format!("bad distance `{}`", fields[3])))?;
            objective += distance;
            pairs.push(MatchedPair {
                treated: fields[1].to_string(),
                control: fields[2].to_string(),
                distance,
            });
        }
    }
    Ok(MatchedDesign {
        pairs,
        unmatched,
        objective,
    })
}

pub fn read_design_path(path: &Path) -> Result<MatchedDesign> {
    read_design(std::fs::File::open(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    const FIXTURE: &str = "id,z,y,score\nA,1,8.0,0.8\nB,0,,0.45\n";

    #[test]
    fn reads_sample_with_missing_outcome() {
        let s = read_sample(FIXTURE.as_bytes()).unwrap();
        assert_eq!(s.len(), 2);
        assert_eq!(s.units[0].outcome, Some(8.0));
        assert_eq!(s.units[1].outcome, None);
        assert_eq!(s.units[1].score, Some(0.45));
    }

    #[test]
    fn sample_round_trip() {
        let text = "id,z,y,score,x1,x2,stratum\n\
                    A,1,8.0,0.8,1.5,-2,s1\n\
                    B,0,,0.45,0.25,3.125,s2\n";
        let s = read_sample(text.as_bytes()).unwrap();
        let mut buf = Vec::new();
        write_sample(&mut buf, &s).unwrap();
        let again = read_sample(buf.as_slice()).unwrap();
        assert_eq!(s, again);
    }

    #[test]
    fn rejects_unknown_column() {
        let err = read_sample("id,z,weight\nA,1,2\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("weight"));
    }

    #[test]
    fn design_round_trip() {
        let design = MatchedDesign {
            pairs: vec![
                MatchedPair {
                    treated: "A".into(),
                    control: "E".into(),
                    distance: 0.15,
                },
                MatchedPair {
                    treated: "B".into(),
                    control: "G".into(),
                    distance: 0.05,
                },
            ],
            unmatched: vec![("F".into(), 0), ("J".into(), 0)],
            objective: 0.2,
        };
        let mut buf = Vec::new();
        write_design(&mut buf, &design).unwrap();
        let again = read_design(buf.as_slice()).unwrap();
        assert_eq!(again.pairs, design.pairs);
        assert_eq!(again.unmatched, design.unmatched);
        assert!((again.objective - design.objective).abs() < 1e-12);
    }

    #[test]
    fn parse_error_carries_line_number() {
        let err = read_sample("id,z\nA,1\nB,7\n".as_bytes()).unwrap_err();
        assert!(matches!(err, Error::NonBinaryTreatment { .. }));
        let err = read_sample("id,z,y\nA,1,oops\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"));
    }
}
