//! Headered CSV data files with columns `t,a,y`; indices are 1-based on disk.

use std::io::{Read, Write};

use caic_core::model::{Dataset, Observation};

use crate::CliError;

/// Observations with 0-based indices, in file order.
pub fn read_observations<R: Read>(reader: R) -> Result<Vec<Observation>, CliError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let headers = rdr
        .headers()
        .map_err(|e| CliError::Data(format!("header: {e}")))?
        .clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| CliError::Data(format!("header: missing column `{name}`")))
    };
    let (ct, ca, cy) = (col("t")?, col("a")?, col("y")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| CliError::Data(e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize, name: &str| {
            rec.get(i)
                .ok_or_else(|| CliError::Data(format!("line {line}: missing field `{name}`")))
        };
        let index = |i: usize, name: &str| -> Result<usize, CliError> {
            let s = field(i, name)?;
            match s.parse::<usize>() {
                Ok(v) if v >= 1 => Ok(v - 1),
                _ => Err(CliError::Data(format!("line {line}: `{name}` must be a positive integer, got `{s}`"))),
            }
        };
        let t = index(ct, "t")?;
        let a = index(ca, "a")?;
        let ys = field(cy, "y")?;
        let y: f64 = ys
            .parse()
            .ok()
            .filter(|v: &f64| v.is_finite())
            .ok_or_else(|| CliError::Data(format!("line {line}: `y` must be a finite number, got `{ys}`")))?;
        out.push(Observation { t, a, y });
    }
    if out.is_empty() {
        return Err(CliError::Data("no observations".into()));
    }
    Ok(out)
}

pub fn read_data_file(path: &std::path::Path) -> Result<Vec<Observation>, CliError> {
    let f = std::fs::File::open(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    read_observations(f).map_err(|e| match e {
        CliError::Data(m) => CliError::Data(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn write_observations<W: Write>(writer: W, data: &Dataset) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(["t", "a", "y"]).map_err(CliError::io)?;
    for o in &data.observations {
        w.write_record([(o.t + 1).to_string(), (o.a + 1).to_string(), o.y.to_string()])
            .map_err(CliError::io)?;
    }
    w.flush().map_err(CliError::io)
}

/// `(n_years, n_ages, largest cell count)` spanned by the observations.
pub fn extent(obs: &[Observation]) -> (usize, usize, usize) {
    let years = obs.iter().map(|o| o.t + 1).max().unwrap_or(0);
    let ages = obs.iter().map(|o| o.a + 1).max().unwrap_or(0);
    let mut counts = vec![0usize; years * ages];
    for o in obs {
        counts[o.t * ages + o.a] += 1;
    }
    (years, ages, counts.into_iter().max().unwrap_or(0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reads_one_based_indices_in_any_column_order() {
        let obs = read_observations("y,t,a\n1.5,1,2\n-0.25,3,1\n".as_bytes()).unwrap();
        assert_eq!(obs[0], Observation { t: 0, a: 1, y: 1.5 });
        assert_eq!(obs[1], Observation { t: 2, a: 0, y: -0.25 });
        assert_eq!(extent(&obs), (3, 2, 1));
    }

    #[test]
    fn malformed_row_names_its_line() {
        let err = read_observations("t,a,y\n1,1,0.5\n2,x,0.7\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 3"), "{err}");
        let err = read_observations("t,a,y\n0,1,0.5\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("line 2"), "{err}");
    }

    #[test]
    fn missing_column_is_reported() {
        let err = read_observations("t,y\n1,0.5\n".as_bytes()).unwrap_err();
        assert!(err.to_string().contains("`a`"), "{err}");
    }
}
