//! Text formats for states, sampled fields and controls.
//!
//! States: `# kind=modal n=<N>` followed by `k,re,im` for `k = 1..=N`, or
//! `# kind=grid n=<M>` followed by `j,re,im` for `j = 0..=M`.
//! Controls: `# control q=<q> T=<T> m=<m>` followed by `t_j,u_1,…,u_q` for the
//! left endpoint of every interval.

use std::fmt::Write as _;
use std::path::Path;

use crate::dynamics::ControlSignal;
use crate::error::{Error, Result};
use crate::spectral::{ModalState, SampledField, C64};

#[derive(Clone, Debug, PartialEq)]
pub enum StateFile {
    Modal(ModalState),
    /// Samples at `x_j = j/M`, `j = 0..=M`.
    Grid(Vec<C64>),
}

pub fn format_float(x: f64) -> String {
    format!("{x:.16e}")
}

pub fn write_modal(state: &ModalState) -> String {
    let mut out = format!("# kind=modal n={}\n", state.truncation());
    for (i, c) in state.coeffs().iter().enumerate() {
        let _ = writeln!(out, "{},{},{}", i + 1, format_float(c.re), format_float(c.im));
    }
    out
}

pub fn write_grid(samples: &[C64]) -> String {
    let mut out = format!("# kind=grid n={}\n", samples.len().saturating_sub(1));
    for (j, c) in samples.iter().enumerate() {
        let _ = writeln!(out, "{j},{},{}", format_float(c.re), format_float(c.im));
    }
    out
}

pub fn write_field(field: &SampledField) -> String {
    let samples: Vec<C64> = field.values().iter().map(|&v| C64::new(v, 0.0)).collect();
    write_grid(&samples)
}

fn header_fields<'a>(line: &'a str, tag: &str) -> Result<Vec<(&'a str, &'a str)>> {
    let rest = line
        .strip_prefix('#')
        .map(str::trim_start)
        .ok_or_else(|| Error::Parse(format!("missing '#' header, got '{line}'")))?;
    let mut parts = rest.split_whitespace();
    let mut out = Vec::new();
    if !tag.is_empty() && parts.next() != Some(tag) {
        return Err(Error::Parse(format!("expected '# {tag} ...' header, got '{line}'")));
    }
    for p in parts {
        let (k, v) = p.split_once('=').ok_or_else(|| Error::Parse(format!("bad header entry '{p}'")))?;
        out.push((k, v));
    }
    Ok(out)
}

fn lookup<'a>(fields: &[(&'a str, &'a str)], key: &str) -> Result<&'a str> {
    fields
        .iter()
        .find(|(k, _)| *k == key)
        .map(|(_, v)| *v)
        .ok_or_else(|| Error::Parse(format!("header lacks '{key}='")))
}

fn parse_num<T: std::str::FromStr>(s: &str, what: &str) -> Result<T> {
    s.trim().parse().map_err(|_| Error::Parse(format!("cannot parse {what} from '{s}'")))
}

fn data_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines().enumerate().skip(1).map(|(i, l)| (i + 1, l.trim())).filter(|(_, l)| !l.is_empty())
}

pub fn parse_state(text: &str) -> Result<StateFile> {
    let first = text.lines().next().ok_or_else(|| Error::Parse("empty state file".into()))?;
    let header = header_fields(first, "")?;
    let kind = lookup(&header, "kind")?;
    let n: usize = parse_num(lookup(&header, "n")?, "n")?;
    let (offset, len) = match kind {
        "modal" => (1, n),
        "grid" => (0, n + 1),
        other => return Err(Error::Parse(format!("unknown state kind '{other}'"))),
    };
    let mut values = vec![None; len];
    for (line_no, line) in data_lines(text) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != 3 {
            return Err(Error::Parse(format!("line {line_no}: expected index,re,im")));
        }
        let idx: usize = parse_num(cols[0], "index")?;
        let slot = idx
            .checked_sub(offset)
            .filter(|&i| i < len)
            .ok_or_else(|| Error::Parse(format!("line {line_no}: index {idx} out of range")))?;
        if values[slot].is_some() {
            return Err(Error::Parse(format!("line {line_no}: duplicate index {idx}")));
        }
        values[slot] = Some(C64::new(parse_num(cols[1], "re")?, parse_num(cols[2], "im")?));
    }
    let values: Vec<C64> = values
        .into_iter()
        .enumerate()
        .map(|(i, v)| v.ok_or_else(|| Error::Parse(format!("missing index {}", i + offset))))
        .collect::<Result<_>>()?;
    Ok(match kind {
        "modal" => StateFile::Modal(ModalState::new(values)),
        _ => StateFile::Grid(values),
    })
}

/// Reads a state file as a modal state (a grid file is analysed onto `n` modes).
pub fn read_modal(path: &Path, n: usize) -> Result<ModalState> {
    match parse_state(&std::fs::read_to_string(path)?)? {
        StateFile::Modal(s) => Ok(s),
        StateFile::Grid(g) => crate::spectral::grid_to_modal(&g, n),
    }
}

/// Reads a grid file as a real sampled field.
pub fn read_field(path: &Path) -> Result<SampledField> {
    match parse_state(&std::fs::read_to_string(path)?)? {
        StateFile::Grid(g) => {
            if let Some(c) = g.iter().find(|c| c.im != 0.0) {
                return Err(Error::Parse(format!("field samples must be real, found {c}")));
            }
            SampledField::new(g.iter().map(|c| c.re).collect())
        }
        StateFile::Modal(_) => Err(Error::Parse(format!("{} holds a modal state, expected a grid field", path.display()))),
    }
}

pub fn write_control(u: &ControlSignal) -> String {
    let mut out = format!("# control q={} T={} m={}\n", u.channels(), format_float(u.horizon()), u.intervals());
    for (t, v) in u.times().iter().zip(u.values()) {
        out.push_str(&format_float(*t));
        for x in v {
            out.push(',');
            out.push_str(&format_float(*x));
        }
        out.push('\n');
    }
    out
}

pub fn parse_control(text: &str) -> Result<ControlSignal> {
    let first = text.lines().next().ok_or_else(|| Error::Parse("empty control file".into()))?;
    let header = header_fields(first, "control")?;
    let q: usize = parse_num(lookup(&header, "q")?, "q")?;
    let horizon: f64 = parse_num(lookup(&header, "T")?, "T")?;
    let m: usize = parse_num(lookup(&header, "m")?, "m")?;
    let mut times = Vec::with_capacity(m + 1);
    let mut values = Vec::with_capacity(m);
    for (line_no, line) in data_lines(text) {
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != q + 1 {
            return Err(Error::Parse(format!("line {line_no}: expected {} columns, got {}", q + 1, cols.len())));
        }
        times.push(parse_num(cols[0], "t")?);
        values.push(cols[1..].iter().map(|c| parse_num(c, "u")).collect::<Result<Vec<f64>>>()?);
    }
    if values.len() != m {
        return Err(Error::Parse(format!("header announces {m} intervals, found {}", values.len())));
    }
    times.push(horizon);
    ControlSignal::new(times, values)
}

pub fn read_control(path: &Path) -> Result<ControlSignal> {
    parse_control(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modal_round_trip_is_exact() {
        let s = ModalState::new(vec![C64::new(0.1, -1.0 / 3.0), C64::new(1e-300, 2.5e7)]);
        match parse_state(&write_modal(&s)).unwrap() {
            StateFile::Modal(r) => assert_eq!(r, s),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn grid_round_trip() {
        let g = vec![C64::new(0.0, 0.0), C64::new(0.5, 0.25), C64::new(0.0, 0.0)];
        assert_eq!(parse_state(&write_grid(&g)).unwrap(), StateFile::Grid(g));
    }

    #[test]
    fn control_round_trip() {
        let u = ControlSignal::new(vec![0.0, 0.3, 1.0], vec![vec![1.0, -2.0], vec![0.125, 1e-9]]).unwrap();
        let back = parse_control(&write_control(&u)).unwrap();
        assert_eq!(back.times(), u.times());
        assert_eq!(back.values(), u.values());
    }

    #[test]
    fn rejects_malformed_input() {
        assert!(parse_state("# kind=modal n=2\n1,0,0\n").is_err());
        assert!(parse_state("# kind=spline n=1\n").is_err());
        assert!(parse_state("kind=modal n=1\n1,0,0\n").is_err());
        assert!(parse_control("# control q=1 T=1 m=2\n0,1\n").is_err());
        assert!(parse_control("# control q=1 T=1 m=1\n0,1,2\n").is_err());
    }
}
