//! CSV traces: `time,n,staleness,potential[,rmse]`.

use std::io::{self, Write};

use asqn_core::simulator::TraceRecord;

/// Decimal text of `x` rounded to 12 significant digits.
pub fn format_number(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    if x == 0.0 {
        return "0".to_string();
    }
    // round through scientific notation, then print the rounded value in
    // its shortest decimal form
    let rounded: f64 = format!("{x:.11e}").parse().expect("formatted float parses");
    format!("{rounded}")
}

/// Writes the header and one row per record. The `rmse` column is present
/// when `with_secondary` is set; missing values are left empty.
pub fn write_trace<W: Write>(out: &mut W, records: &[TraceRecord], with_secondary: bool) -> io::Result<()> {
    if with_secondary {
        writeln!(out, "time,n,staleness,potential,rmse")?;
    } else {
        writeln!(out, "time,n,staleness,potential")?;
    }
    for r in records {
        write!(out, "{},{},{},{}", format_number(r.time), r.iteration, r.staleness, format_number(r.potential))?;
        if with_secondary {
            match r.secondary {
                Some(v) => write!(out, ",{}", format_number(v))?,
                None => write!(out, ",")?,
            }
        }
        writeln!(out)?;
    }
    Ok(())
}

/// Parses a trace written by [`write_trace`].
pub fn read_trace(text: &str) -> Result<Vec<TraceRecord>, String> {
    let mut lines = text.lines();
    let header = lines.next().ok_or("empty trace")?;
    let secondary = match header {
        "time,n,staleness,potential" => false,
        "time,n,staleness,potential,rmse" => true,
        other => return Err(format!("unexpected trace header {other:?}")),
    };
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad = |what: &str| format!("line {}: bad {what}", i + 2);
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != if secondary { 5 } else { 4 } {
                return Err(bad("field count"));
            }
            Ok(TraceRecord {
                time: fields[0].parse().map_err(|_| bad("time"))?,
                iteration: fields[1].parse().map_err(|_| bad("n"))?,
                staleness: fields[2].parse().map_err(|_| bad("staleness"))?,
                potential: fields[3].parse().map_err(|_| bad("potential"))?,
                secondary: match fields.get(4) {
                    Some(s) if !s.is_empty() => Some(s.parse().map_err(|_| bad("rmse"))?),
                    _ => None,
                },
            })
        })
        .collect()
}
