//! V2000 MOL/SDF reader. Charges, isotopes and property blocks are ignored.

use super::{BondOrder, MolError, MolecularGraph, Vocabulary};

fn parse_err(line: usize, message: impl Into<String>) -> MolError {
    MolError::Parse {
        line,
        message: message.into(),
    }
}

/// Fixed-width field, or `None` when the line is too short or the field is blank.
fn column(line: &str, start: usize, end: usize) -> Option<&str> {
    let field = line.get(start..end.min(line.len()))?.trim();
    (!field.is_empty()).then_some(field)
}

fn parse_counts(line: &str, line_no: usize) -> Result<(usize, usize), MolError> {
    if line.contains("V3000") {
        return Err(parse_err(line_no, "V3000 records are not supported"));
    }
    let fixed = column(line, 0, 3)
        .zip(column(line, 3, 6))
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)));
    if let Some(counts) = fixed {
        return Ok(counts);
    }
    let mut tokens = line.split_whitespace();
    tokens
        .next()
        .zip(tokens.next())
        .and_then(|(a, b)| Some((a.parse().ok()?, b.parse().ok()?)))
        .ok_or_else(|| parse_err(line_no, format!("malformed counts line {line:?}")))
}

fn parse_atom(line: &str, line_no: usize) -> Result<(String, [f64; 3]), MolError> {
    let fixed = (|| {
        let x = column(line, 0, 10)?.parse().ok()?;
        let y = column(line, 10, 20)?.parse().ok()?;
        let z = column(line, 20, 30)?.parse().ok()?;
        let sym = column(line, 31, 34)?;
        Some((sym.to_string(), [x, y, z]))
    })();
    if let Some(atom) = fixed {
        return Ok(atom);
    }
    let tokens: Vec<&str> = line.split_whitespace().collect();
    let coords: Vec<f64> = tokens.iter().take(3).map_while(|t| t.parse().ok()).collect();
    if coords.len() < 3 {
        return Err(parse_err(line_no, "missing coordinates in atom line"));
    }
    let sym = tokens
        .get(3)
        .ok_or_else(|| parse_err(line_no, "missing element symbol in atom line"))?;
    Ok((sym.to_string(), [coords[0], coords[1], coords[2]]))
}

fn parse_bond(line: &str, line_no: usize) -> Result<(usize, usize, u8), MolError> {
    let fixed = (|| {
        let a = column(line, 0, 3)?.parse().ok()?;
        let b = column(line, 3, 6)?.parse().ok()?;
        let t = column(line, 6, 9)?.parse().ok()?;
        Some((a, b, t))
    })();
    if let Some(bond) = fixed {
        return Ok(bond);
    }
    let nums: Vec<i64> = line
        .split_whitespace()
        .take(3)
        .map_while(|t| t.parse().ok())
        .collect();
    match nums[..] {
        [a, b, t] if a >= 0 && b >= 0 && (0..=255).contains(&t) => Ok((a as usize, b as usize, t as u8)),
        _ => Err(parse_err(line_no, format!("malformed bond line {line:?}"))),
    }
}

/// Parses one record whose header starts at 1-based line `first_line`.
fn parse_record(lines: &[&str], first_line: usize, vocab: &Vocabulary) -> Result<MolecularGraph, MolError> {
    let counts_no = first_line + 3;
    let counts = lines
        .get(3)
        .ok_or_else(|| parse_err(counts_no.min(first_line + lines.len()), "missing counts line"))?;
    let (n_atoms, n_bonds) = parse_counts(counts, counts_no)?;

    let mut elements = Vec::with_capacity(n_atoms);
    let mut coords = Vec::with_capacity(n_atoms);
    for i in 0..n_atoms {
        let line_no = counts_no + 1 + i;
        let line = lines
            .get(4 + i)
            .ok_or_else(|| parse_err(line_no, format!("missing atom line {} of {n_atoms}", i + 1)))?;
        let (sym, xyz) = parse_atom(line, line_no)?;
        vocab.index_of(&sym).map_err(|e| parse_err(line_no, e.to_string()))?;
        elements.push(sym);
        coords.push(xyz);
    }

    let mut bonds = Vec::with_capacity(n_bonds);
    for i in 0..n_bonds {
        let line_no = counts_no + 1 + n_atoms + i;
        let line = lines
            .get(4 + n_atoms + i)
            .ok_or_else(|| parse_err(line_no, format!("missing bond line {} of {n_bonds}", i + 1)))?;
        let (a, b, code) = parse_bond(line, line_no)?;
        if a == 0 || b == 0 || a > n_atoms || b > n_atoms {
            return Err(parse_err(
                line_no,
                format!("bond index out of range: {a}-{b} in a {n_atoms}-atom block"),
            ));
        }
        let order = BondOrder::from_code(code).map_err(|e| parse_err(line_no, e.to_string()))?;
        bonds.push((a - 1, b - 1, order));
    }

    let name = lines.first().map(|l| l.trim()).unwrap_or_default();
    let symbols: Vec<&str> = elements.iter().map(String::as_str).collect();
    MolecularGraph::from_topology(name, vocab, &symbols, &coords, &bonds)
        .map_err(|e| parse_err(counts_no, e.to_string()))
}

/// Every record of a (possibly multi-record) SDF text, in file order.
///
/// Records are separated by `$$$$`; blank trailing records are skipped.
/// An input with no records yields a single error.
pub fn parse_sdf_records_with(text: &str, vocab: &Vocabulary) -> Vec<Result<MolecularGraph, MolError>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut out = Vec::new();
    let mut start = 0;
    let flush = |from: usize, to: usize, out: &mut Vec<_>| {
        let block = &lines[from..to];
        if block.iter().any(|l| !l.trim().is_empty()) {
            out.push(parse_record(block, from + 1, vocab));
        }
    };
    for (i, line) in lines.iter().enumerate() {
        if line.trim() == "$$$$" {
            flush(start, i, &mut out);
            start = i + 1;
        }
    }
    flush(start, lines.len(), &mut out);
    if out.is_empty() {
        out.push(Err(parse_err(1, "empty input: no MOL records")));
    }
    out
}

pub fn parse_sdf_records(text: &str) -> Vec<Result<MolecularGraph, MolError>> {
    parse_sdf_records_with(text, Vocabulary::standard())
}

/// First record of a MOL/SDF text.
pub fn parse_sdf(text: &str) -> Result<MolecularGraph, MolError> {
    parse_sdf_records(text).remove(0)
}
