//! Extended-XYZ reading and writing.
//!
//! Each frame is an atom count line, a header of `key=value` pairs
//! (values may be double-quoted), then one line per atom laid out as
//! declared by `Properties`. Only `species:S:1`, `pos:R:3` and
//! `forces:R:3` columns are interpreted; other declared columns are
//! skipped.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::structure::{symbol_to_z, z_to_symbol, Dataset, LabeledStructure, Mat3, Structure, Vec3};

const PROPERTIES: &str = "species:S:1:pos:R:3:forces:R:3";

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

/// Splits a header line into key/value pairs. Bare keys map to `"T"`.
fn parse_header(line: &str, lineno: usize) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut chars = line.chars().peekable();
    loop {
        while chars.peek().is_some_and(|c| c.is_whitespace()) {
            chars.next();
        }
        if chars.peek().is_none() {
            break;
        }
        let mut key = String::new();
        while let Some(&c) = chars.peek() {
            if c == '=' || c.is_whitespace() {
                break;
            }
            key.push(c);
            chars.next();
        }
        if chars.peek() == Some(&'=') {
            chars.next();
            let mut value = String::new();
            if chars.peek() == Some(&'"') {
                chars.next();
                let mut closed = false;
                for c in chars.by_ref() {
                    if c == '"' {
                        closed = true;
                        break;
                    }
                    value.push(c);
                }
                if !closed {
                    return Err(perr(lineno, format!("unterminated quote in value of '{key}'")));
                }
            } else {
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() {
                        break;
                    }
                    value.push(c);
                    chars.next();
                }
            }
            out.insert(key, value);
        } else {
            out.insert(key, "T".to_string());
        }
    }
    Ok(out)
}

struct Columns {
    width: usize,
    species: usize,
    pos: usize,
    forces: usize,
}

fn parse_properties(spec: &str, lineno: usize) -> Result<Columns> {
    let parts: Vec<&str> = spec.split(':').collect();
    if !parts.len().is_multiple_of(3) {
        return Err(perr(lineno, format!("malformed Properties '{spec}'")));
    }
    let (mut species, mut pos, mut forces) = (None, None, None);
    let mut col = 0;
    for p in parts.chunks(3) {
        let n: usize = p[2].parse().map_err(|_| perr(lineno, format!("bad column count in Properties '{spec}'")))?;
        match p[0] {
            "species" => species = Some(col),
            "pos" => pos = Some(col),
            "forces" => forces = Some(col),
            _ => {}
        }
        col += n;
    }
    let need = |c: Option<usize>, name: &str| c.ok_or_else(|| perr(lineno, format!("Properties lacks '{name}'")));
    Ok(Columns {
        width: col,
        species: need(species, "species")?,
        pos: need(pos, "pos")?,
        forces: need(forces, "forces")?,
    })
}

fn parse_f64(tok: &str, lineno: usize, what: &str) -> Result<f64> {
    tok.parse::<f64>().map_err(|_| perr(lineno, format!("non-numeric {what} '{tok}'")))
}

fn parse_pbc(v: &str, lineno: usize) -> Result<[bool; 3]> {
    let flags: Vec<bool> = v
        .split_whitespace()
        .map(|t| match t {
            "T" | "True" | "true" | "1" => Ok(true),
            "F" | "False" | "false" | "0" => Ok(false),
            _ => Err(perr(lineno, format!("bad pbc flag '{t}'"))),
        })
        .collect::<Result<_>>()?;
    match flags.as_slice() {
        [a, b, c] => Ok([*a, *b, *c]),
        _ => Err(perr(lineno, "pbc needs three flags")),
    }
}

fn parse_lattice(v: &str, lineno: usize) -> Result<Mat3> {
    let vals: Vec<f64> = v.split_whitespace().map(|t| parse_f64(t, lineno, "Lattice entry")).collect::<Result<_>>()?;
    if vals.len() != 9 {
        return Err(perr(lineno, "Lattice needs nine numbers"));
    }
    Ok([[vals[0], vals[1], vals[2]], [vals[3], vals[4], vals[5]], [vals[6], vals[7], vals[8]]])
}

/// One parsed frame with its header keys.
pub struct Frame {
    pub item: LabeledStructure,
    pub header: BTreeMap<String, String>,
}

/// Parses every frame, keeping the raw header of each.
pub fn parse_frames(text: &str) -> Result<Vec<Frame>> {
    let lines: Vec<&str> = text.lines().collect();
    let mut frames = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        if lines[i].trim().is_empty() {
            i += 1;
            continue;
        }
        let count_line = i + 1;
        let n: usize = lines[i]
            .trim()
            .parse()
            .map_err(|_| perr(count_line, format!("malformed atom count '{}'", lines[i].trim())))?;
        if n == 0 {
            return Err(perr(count_line, "frame with zero atoms"));
        }
        let header_line = i + 2;
        let header_text = lines.get(i + 1).ok_or_else(|| perr(header_line, "missing header line"))?;
        let header = parse_header(header_text, header_line)?;
        let props = header.get("Properties").ok_or_else(|| perr(header_line, "missing key 'Properties'"))?;
        let cols = parse_properties(props, header_line)?;
        let energy = parse_f64(
            header.get("energy").ok_or_else(|| perr(header_line, "missing key 'energy'"))?,
            header_line,
            "energy",
        )?;
        let cell = header.get("Lattice").map(|v| parse_lattice(v, header_line)).transpose()?;
        let pbc = match header.get("pbc") {
            Some(v) => parse_pbc(v, header_line)?,
            None if cell.is_some() => [true; 3],
            None => [false; 3],
        };

        let mut species = Vec::with_capacity(n);
        let mut positions: Vec<Vec3> = Vec::with_capacity(n);
        let mut forces: Vec<Vec3> = Vec::with_capacity(n);
        for k in 0..n {
            let lineno = i + 3 + k;
            let line = lines.get(i + 2 + k).filter(|l| !l.trim().is_empty()).ok_or_else(|| {
                perr(lineno, format!("frame starting at line {count_line} declares {n} atoms but has only {k}"))
            })?;
            let toks: Vec<&str> = line.split_whitespace().collect();
            if toks.len() != cols.width {
                // a short line usually means the next frame's count line was reached
                return Err(perr(
                    lineno,
                    format!(
                        "expected {} columns, found {} (frame starting at line {count_line} declares {n} atoms)",
                        cols.width,
                        toks.len()
                    ),
                ));
            }
            let sym = toks[cols.species];
            species.push(symbol_to_z(sym).ok_or_else(|| perr(lineno, format!("unknown element '{sym}'")))?);
            let v3 = |c: usize, what: &str| -> Result<Vec3> {
                Ok([
                    parse_f64(toks[c], lineno, what)?,
                    parse_f64(toks[c + 1], lineno, what)?,
                    parse_f64(toks[c + 2], lineno, what)?,
                ])
            };
            positions.push(v3(cols.pos, "position")?);
            forces.push(v3(cols.forces, "force")?);
        }
        let structure = Structure::new(species, positions, cell, pbc).map_err(|e| perr(header_line, e.to_string()))?;
        let item = LabeledStructure::new(structure, energy, forces).map_err(|e| perr(header_line, e.to_string()))?;
        frames.push(Frame { item, header });
        i += 2 + n;
    }
    Ok(frames)
}

/// Parses a multi-frame extended-XYZ document into a dataset.
pub fn parse_extxyz(text: &str) -> Result<Dataset> {
    let frames = parse_frames(text)?;
    let name = frames.first().and_then(|f| f.header.get("dataset").cloned()).unwrap_or_else(|| "dataset".to_string());
    Ok(Dataset::new(name, frames.into_iter().map(|f| f.item).collect()))
}

#[inline]
fn num(out: &mut String, v: f64) {
    // 17 significant digits round-trip every f64
    let _ = write!(out, "{v:.16e}");
}

/// Writes one frame. `extra` keys are appended to the header verbatim.
pub fn write_frame(out: &mut String, s: &Structure, energy: f64, forces: &[Vec3], extra: &[(&str, String)]) {
    let _ = writeln!(out, "{}", s.len());
    if let Some(c) = s.cell() {
        out.push_str("Lattice=\"");
        for (k, v) in c.iter().flatten().enumerate() {
            if k > 0 {
                out.push(' ');
            }
            num(out, *v);
        }
        out.push_str("\" ");
    }
    let _ = write!(out, "Properties={PROPERTIES} energy=");
    num(out, energy);
    let p = s.pbc();
    let flag = |b: bool| if b { "T" } else { "F" };
    let _ = write!(out, " pbc=\"{} {} {}\"", flag(p[0]), flag(p[1]), flag(p[2]));
    for (k, v) in extra {
        if v.contains(char::is_whitespace) || v.is_empty() {
            let _ = write!(out, " {k}=\"{v}\"");
        } else {
            let _ = write!(out, " {k}={v}");
        }
    }
    out.push('\n');
    for ((z, pos), f) in s.species().iter().zip(s.positions()).zip(forces) {
        out.push_str(z_to_symbol(*z).unwrap_or("X"));
        for v in pos.iter().chain(f.iter()) {
            out.push(' ');
            num(out, *v);
        }
        out.push('\n');
    }
}

/// Serializes a dataset; frames keep their order.
pub fn write_extxyz(d: &Dataset) -> String {
    let mut out = String::new();
    let name = [("dataset", d.name.clone())];
    for item in &d.items {
        write_frame(&mut out, &item.structure, item.energy, &item.forces, &name);
    }
    out
}
