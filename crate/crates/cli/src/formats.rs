//! Line formats for the `encode` inputs and CSV layout sniffing.
//!
//! Bond file: `molecule_id; i-j-o; i-j-oa; ...` where `o` is the bond order
//! and a trailing `a` marks an aromatic bond. Peak file:
//! `molecule_id spectrum_id; s1, s2, ...` with shifts in ppm. Blank lines
//! and lines starting with `#` are ignored in both.

use std::collections::BTreeMap;

use anyhow::{bail, ensure, Context, Result};
use revnmr_core::chemdata::{bin_peaks, Bond, BondList, CsvLayout, DatasetRow, PeakList, PAIRS};

fn content_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(k, l)| (k + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty() && !l.starts_with('#'))
}

fn parse_bond(tuple: &str) -> Result<Bond> {
    let parts: Vec<&str> = tuple.split('-').collect();
    let [i, j, order] = parts[..] else {
        bail!("bond '{tuple}' is not of the form i-j-o");
    };
    let (order, aromatic) = match order.strip_suffix('a') {
        Some(o) => (o, true),
        None => (order, false),
    };
    let i = i.trim().parse().with_context(|| format!("atom '{i}' in bond '{tuple}'"))?;
    let j = j.trim().parse().with_context(|| format!("atom '{j}' in bond '{tuple}'"))?;
    let order: u8 = order.trim().parse().with_context(|| format!("order '{order}' in bond '{tuple}'"))?;
    Ok(Bond::new(i, j, order, aromatic))
}

pub fn parse_bond_line(line: &str) -> Result<(u64, BondList)> {
    let mut fields = line.split(';').map(str::trim);
    let id = fields.next().unwrap_or_default();
    let id = id.parse().with_context(|| format!("molecule id '{id}'"))?;
    let bonds = fields.filter(|f| !f.is_empty()).map(parse_bond).collect::<Result<Vec<_>>>()?;
    Ok((id, BondList::new(bonds)?))
}

pub fn parse_peak_line(line: &str) -> Result<(u64, u64, PeakList)> {
    let (ids, shifts) = line.split_once(';').context("missing ';' after the ids")?;
    let ids: Vec<&str> = ids.split_whitespace().collect();
    let [mol, spec] = ids[..] else {
        bail!("expected 'molecule_id spectrum_id' before ';'");
    };
    let mol = mol.parse().with_context(|| format!("molecule id '{mol}'"))?;
    let spec = spec.parse().with_context(|| format!("spectrum id '{spec}'"))?;
    let shifts = shifts
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<f64>().with_context(|| format!("shift '{s}'")))
        .collect::<Result<Vec<_>>>()?;
    Ok((mol, spec, PeakList::new(shifts)?))
}

pub fn bond_line(id: u64, bonds: &BondList) -> String {
    let mut s = id.to_string();
    for b in bonds.bonds() {
        s.push_str("; ");
        s.push_str(&b.to_string());
    }
    s
}

/// Joins peak lines to bond lines by molecule id, in peak-file order.
pub fn encode(bonds_text: &str, bonds_name: &str, peaks_text: &str, peaks_name: &str) -> Result<Vec<DatasetRow>> {
    let mut molecules = BTreeMap::new();
    for (n, line) in content_lines(bonds_text) {
        let (id, bonds) = parse_bond_line(line).with_context(|| format!("{bonds_name}:{n}"))?;
        ensure!(molecules.insert(id, bonds).is_none(), "{bonds_name}:{n}: duplicate molecule id {id}");
    }
    let mut rows = Vec::new();
    for (n, line) in content_lines(peaks_text) {
        let (mol, spec, peaks) = parse_peak_line(line).with_context(|| format!("{peaks_name}:{n}"))?;
        let bonds = molecules
            .get(&mol)
            .with_context(|| format!("{peaks_name}:{n}: molecule {mol} has no line in {bonds_name}"))?;
        rows.push(DatasetRow {
            molecule_id: mol,
            spectrum_id: spec,
            bond_code: bonds.to_code(),
            bins: bin_peaks(&peaks),
        });
    }
    Ok(rows)
}

/// Infers the layout from the first non-empty line: a header if its first
/// cell is not an integer, split bond cells if the row has `3 + 136` cells.
pub fn sniff_layout(text: &str) -> CsvLayout {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let Some(first) = lines.next() else {
        return CsvLayout::default();
    };
    let header = first.split(',').next().is_some_and(|c| c.trim().parse::<u64>().is_err());
    let data = if header { lines.next() } else { Some(first) };
    let cells = data.or(Some(first)).map_or(0, |l| l.split(',').count());
    CsvLayout {
        header,
        split_bond_cells: cells == 3 + PAIRS,
    }
}
