//! Extended-XYZ reading and writing.
//!
//! Dialect (one frame, repeated for multi-frame files):
//!
//! ```text
//! <atom count>
//! Lattice="ax ay az bx by bz cx cy cz" pbc="T T F" energy=-1.25 gap=0.5
//! <symbol> <x> <y> <z> [fx fy fz] [A|B]
//! ...
//! ```
//!
//! The comment line holds `key=value` pairs; values with spaces are
//! double-quoted. Recognized keys: `Lattice` (nine floats, row-major lattice
//! vectors), `pbc` (`T`/`F` per axis, defaults to all-true when a lattice is
//! present), `energy`, and any other numeric key, which is kept as a named
//! scalar label. Non-numeric unknown keys are ignored. Per-atom lines may
//! carry three force components and/or a trailing `A`/`B` component tag; the
//! layout must be consistent within a frame.
//!
//! Floats are written with 17 significant digits, so write → parse is
//! bit-exact for every f64. All parse errors carry 1-based line numbers.

use super::{symbol_to_z, z_to_symbol, AtomicStructure, ComponentTag, Labels};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum XyzError {
    #[error("line {line}: expected atom count, got '{got}'")]
    BadCount { line: usize, got: String },
    #[error("line {line}: unexpected end of file inside a frame")]
    Truncated { line: usize },
    #[error("line {line}: cannot parse float '{token}'")]
    BadFloat { line: usize, token: String },
    #[error("line {line}: unknown element symbol '{symbol}'")]
    UnknownSymbol { line: usize, symbol: String },
    #[error("line {line}: expected 4, 5, 7, or 8 fields, got {got}")]
    WrongFieldCount { line: usize, got: usize },
    #[error("line {line}: atom line layout differs from the first atom of the frame")]
    InconsistentFields { line: usize },
    #[error("line {line}: Lattice must hold exactly 9 floats")]
    BadLattice { line: usize },
    #[error("line {line}: pbc must hold exactly 3 T/F flags")]
    BadPbc { line: usize },
    #[error("line {line}: pbc given without a Lattice")]
    PbcWithoutLattice { line: usize },
    #[error("line {line}: unterminated quote in comment")]
    UnterminatedQuote { line: usize },
    #[error("line {line}: component tag '{got}' is not A or B")]
    BadTag { line: usize, got: String },
}

fn parse_comment_pairs(line: &str, lineno: usize) -> Result<Vec<(String, String)>, XyzError> {
    let mut pairs = Vec::new();
    let bytes = line.as_bytes();
    let mut i = 0;
    while i < bytes.len() {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i >= bytes.len() {
            break;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() && bytes[i] != b'=' {
            i += 1;
        }
        if i >= bytes.len() || bytes[i] != b'=' {
            // Bare token without '=': free-text comment content, skip it.
            continue;
        }
        let key = line[start..i].to_string();
        i += 1; // consume '='
        let value = if i < bytes.len() && bytes[i] == b'"' {
            i += 1;
            let vstart = i;
            while i < bytes.len() && bytes[i] != b'"' {
                i += 1;
            }
            if i >= bytes.len() {
                return Err(XyzError::UnterminatedQuote { line: lineno });
            }
            let v = line[vstart..i].to_string();
            i += 1; // consume closing quote
            v
        } else {
            let vstart = i;
            while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
                i += 1;
            }
            line[vstart..i].to_string()
        };
        pairs.push((key, value));
    }
    Ok(pairs)
}

fn parse_float(token: &str, line: usize) -> Result<f64, XyzError> {
    token
        .parse::<f64>()
        .map_err(|_| XyzError::BadFloat { line, token: token.to_string() })
}

/// Parse a (possibly multi-frame) extended-XYZ document.
pub fn parse_xyz(text: &str) -> Result<Vec<AtomicStructure>, XyzError> {
    let mut frames = Vec::new();
    let mut lines = text.lines().enumerate().peekable();
    loop {
        // Skip blank lines between frames.
        let (count_idx, count_line) = loop {
            match lines.next() {
                None => return Ok(frames),
                Some((i, l)) if l.trim().is_empty() => {
                    let _ = i;
                }
                Some((i, l)) => break (i, l),
            }
        };
        let lineno = count_idx + 1;
        let n: usize = count_line
            .trim()
            .parse()
            .map_err(|_| XyzError::BadCount { line: lineno, got: count_line.trim().to_string() })?;

        let (comment_idx, comment) = lines
            .next()
            .ok_or(XyzError::Truncated { line: lineno + 1 })?;
        let comment_lineno = comment_idx + 1;

        let mut cell: Option<[[f64; 3]; 3]> = None;
        let mut pbc: Option<[bool; 3]> = None;
        let mut labels = Labels::default();
        for (key, value) in parse_comment_pairs(comment, comment_lineno)? {
            match key.as_str() {
                "Lattice" => {
                    let nums: Vec<f64> = value
                        .split_whitespace()
                        .map(|t| parse_float(t, comment_lineno))
                        .collect::<Result<_, _>>()?;
                    if nums.len() != 9 {
                        return Err(XyzError::BadLattice { line: comment_lineno });
                    }
                    cell = Some([
                        [nums[0], nums[1], nums[2]],
                        [nums[3], nums[4], nums[5]],
                        [nums[6], nums[7], nums[8]],
                    ]);
                }
                "pbc" => {
                    let flags: Vec<&str> = value.split_whitespace().collect();
                    if flags.len() != 3 {
                        return Err(XyzError::BadPbc { line: comment_lineno });
                    }
                    let mut p = [false; 3];
                    for (k, f) in flags.iter().enumerate() {
                        p[k] = match *f {
                            "T" | "true" | "True" => true,
                            "F" | "false" | "False" => false,
                            _ => return Err(XyzError::BadPbc { line: comment_lineno }),
                        };
                    }
                    pbc = Some(p);
                }
                "energy" => {
                    labels.energy = Some(parse_float(&value, comment_lineno)?);
                }
                _ => {
                    if let Ok(v) = value.parse::<f64>() {
                        labels.scalars.insert(key, v);
                    }
                }
            }
        }
        if pbc.is_some() && cell.is_none() {
            return Err(XyzError::PbcWithoutLattice { line: comment_lineno });
        }
        let pbc = match (cell.is_some(), pbc) {
            (_, Some(p)) => p,
            (true, None) => [true; 3],
            (false, None) => [false; 3],
        };

        let mut species = Vec::with_capacity(n);
        let mut positions = Vec::with_capacity(n);
        let mut forces: Vec<[f64; 3]> = Vec::new();
        let mut tags: Vec<ComponentTag> = Vec::new();
        let mut layout: Option<(bool, bool)> = None; // (has_forces, has_tag)
        for a in 0..n {
            let (idx, line) = lines
                .next()
                .ok_or(XyzError::Truncated { line: comment_lineno + 1 + a })?;
            let lineno = idx + 1;
            let fields: Vec<&str> = line.split_whitespace().collect();
            let (has_forces, has_tag) = match fields.len() {
                4 => (false, false),
                5 => (false, true),
                7 => (true, false),
                8 => (true, true),
                got => return Err(XyzError::WrongFieldCount { line: lineno, got }),
            };
            match layout {
                None => layout = Some((has_forces, has_tag)),
                Some(l) if l != (has_forces, has_tag) => {
                    return Err(XyzError::InconsistentFields { line: lineno })
                }
                _ => {}
            }
            let z = symbol_to_z(fields[0]).ok_or_else(|| XyzError::UnknownSymbol {
                line: lineno,
                symbol: fields[0].to_string(),
            })?;
            species.push(z);
            positions.push([
                parse_float(fields[1], lineno)?,
                parse_float(fields[2], lineno)?,
                parse_float(fields[3], lineno)?,
            ]);
            if has_forces {
                forces.push([
                    parse_float(fields[4], lineno)?,
                    parse_float(fields[5], lineno)?,
                    parse_float(fields[6], lineno)?,
                ]);
            }
            if has_tag {
                let t = fields[fields.len() - 1];
                tags.push(match t {
                    "A" => ComponentTag::A,
                    "B" => ComponentTag::B,
                    _ => return Err(XyzError::BadTag { line: lineno, got: t.to_string() }),
                });
            }
        }
        if !forces.is_empty() {
            labels.forces = Some(forces);
        }
        frames.push(AtomicStructure {
            species,
            positions,
            cell,
            pbc,
            tags: if tags.is_empty() { None } else { Some(tags) },
            labels,
        });
    }
}

/// 17 significant digits: enough for f64 round trips.
fn fmt_f(v: f64) -> String {
    format!("{:.16e}", v)
}

fn valid_key(k: &str) -> bool {
    !k.is_empty()
        && k.chars().next().is_some_and(|c| c.is_ascii_alphabetic() || c == '_')
        && k.chars().all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Render frames as extended XYZ. Labels round-trip losslessly through
/// [`parse_xyz`]. Scalar label keys must be simple identifiers.
pub fn write_xyz(frames: &[AtomicStructure]) -> String {
    let mut out = String::new();
    for s in frames {
        out.push_str(&s.len().to_string());
        out.push('\n');
        let mut parts: Vec<String> = Vec::new();
        if let Some(cell) = &s.cell {
            let nums: Vec<String> = cell.iter().flatten().map(|&v| fmt_f(v)).collect();
            parts.push(format!("Lattice=\"{}\"", nums.join(" ")));
            let flags: Vec<&str> = s.pbc.iter().map(|&b| if b { "T" } else { "F" }).collect();
            parts.push(format!("pbc=\"{}\"", flags.join(" ")));
        }
        if let Some(e) = s.labels.energy {
            parts.push(format!("energy={}", fmt_f(e)));
        }
        let sorted: BTreeMap<_, _> = s.labels.scalars.iter().collect();
        for (k, v) in sorted {
            assert!(valid_key(k), "write_xyz: scalar label key '{k}' is not a plain identifier");
            parts.push(format!("{k}={}", fmt_f(*v)));
        }
        out.push_str(&parts.join(" "));
        out.push('\n');
        for (i, (&z, p)) in s.species.iter().zip(&s.positions).enumerate() {
            let sym = z_to_symbol(z).expect("valid species");
            out.push_str(sym);
            for v in p {
                out.push(' ');
                out.push_str(&fmt_f(*v));
            }
            if let Some(forces) = &s.labels.forces {
                for v in &forces[i] {
                    out.push(' ');
                    out.push_str(&fmt_f(*v));
                }
            }
            if let Some(tags) = &s.tags {
                out.push(' ');
                out.push_str(&tags[i].to_string());
            }
            out.push('\n');
        }
    }
    out
}
