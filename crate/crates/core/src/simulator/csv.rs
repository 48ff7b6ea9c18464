//! Trajectory CSV: `t,x1..xn,u1..um,y1..yq,yd1..ydq,stage_cost`, one row per
//! step, 17 significant digits.

use std::fmt::Write as _;
use std::io::{BufRead, Write};

use super::{Sample, Trajectory};
use crate::error::{Error, Result};
use crate::model::Vector;

pub fn trajectory_csv_header(n: usize, m: usize, q: usize) -> String {
    let mut cols = vec!["t".to_string()];
    cols.extend((1..=n).map(|i| format!("x{i}")));
    cols.extend((1..=m).map(|i| format!("u{i}")));
    cols.extend((1..=q).map(|i| format!("y{i}")));
    cols.extend((1..=q).map(|i| format!("yd{i}")));
    cols.push("stage_cost".into());
    cols.join(",")
}

pub(crate) fn fmt_f64(out: &mut String, v: f64) {
    write!(out, "{v:.16e}").expect("writing to a String cannot fail");
}

pub fn write_trajectory_csv<W: Write>(traj: &Trajectory, mut w: W) -> Result<()> {
    let Some(first) = traj.samples().first() else {
        return Ok(());
    };
    let (n, m, q) = (first.x.len(), first.u.len(), first.y.len());
    writeln!(w, "{}", trajectory_csv_header(n, m, q))?;
    let mut line = String::new();
    for s in traj.samples() {
        line.clear();
        fmt_f64(&mut line, s.t);
        for v in s.x.iter().chain(s.u.iter()).chain(s.y.iter()).chain(s.y_d.iter()) {
            line.push(',');
            fmt_f64(&mut line, *v);
        }
        line.push(',');
        fmt_f64(&mut line, s.stage_cost);
        writeln!(w, "{line}")?;
    }
    Ok(())
}

/// Parses a trajectory written by [`write_trajectory_csv`]; the step is taken
/// from the first two timestamps.
pub fn read_trajectory_csv<R: BufRead>(r: R) -> Result<Trajectory> {
    let mut lines = r.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Parse("empty trajectory file".into()))??;
    let cols: Vec<&str> = header.trim().split(',').map(str::trim).collect();
    let count = |prefix: &str| {
        cols.iter()
            .filter(|c| {
                c.strip_prefix(prefix)
                    .is_some_and(|rest| !rest.is_empty() && rest.chars().all(|ch| ch.is_ascii_digit()))
            })
            .count()
    };
    let (n, m, q, qd) = (count("x"), count("u"), count("y"), count("yd"));
    if n == 0 || m == 0 || q != qd || cols.first() != Some(&"t") || cols.len() != 2 + n + m + 2 * q {
        return Err(Error::Parse(format!("unrecognised trajectory header `{header}`")));
    }

    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let row = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse(format!("line {}: {e}", lineno + 2)))?;
        if row.len() != cols.len() {
            return Err(Error::Parse(format!(
                "line {}: expected {} fields, found {}",
                lineno + 2,
                cols.len(),
                row.len()
            )));
        }
        rows.push(row);
    }
    if rows.len() < 2 {
        return Err(Error::Parse("trajectory needs at least two rows".into()));
    }
    let step = rows[1][0] - rows[0][0];
    let samples = rows
        .iter()
        .map(|r| {
            let slice = |from: usize, len: usize| Vector::from_column_slice(&r[from..from + len]);
            Sample {
                t: r[0],
                x: slice(1, n),
                u: slice(1 + n, m),
                y: slice(1 + n + m, q),
                y_d: slice(1 + n + m + q, q),
                stage_cost: r[1 + n + m + 2 * q],
            }
        })
        .collect();
    Trajectory::from_samples(step, samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        assert_eq!(trajectory_csv_header(2, 1, 1), "t,x1,x2,u1,y1,yd1,stage_cost");
    }

    #[test]
    fn write_then_read_preserves_values() {
        let samples = (0..3)
            .map(|k| {
                let t = k as f64 * 0.01;
                Sample {
                    t,
                    x: Vector::from_column_slice(&[t.sin(), 1.0 / 3.0]),
                    u: Vector::from_column_slice(&[-t]),
                    y: Vector::from_column_slice(&[0.1 + t]),
                    y_d: Vector::from_column_slice(&[10.0]),
                    stage_cost: std::f64::consts::PI * t,
                }
            })
            .collect();
        let traj = Trajectory::from_samples(0.01, samples).unwrap();
        let mut buf = Vec::new();
        write_trajectory_csv(&traj, &mut buf).unwrap();
        let back = read_trajectory_csv(buf.as_slice()).unwrap();
        assert_eq!(back.samples(), traj.samples());
    }

    #[test]
    fn rejects_malformed_rows() {
        let text = "t,x1,u1,y1,yd1,stage_cost\n0,1,2,3,4,5\n0.01,1,2,oops,4,5\n";
        assert!(matches!(read_trajectory_csv(text.as_bytes()), Err(Error::Parse(_))));
        assert!(read_trajectory_csv("a,b\n".as_bytes()).is_err());
    }
}
