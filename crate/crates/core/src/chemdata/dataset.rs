//! Rows of the `reversibledata.csv` layout: molecule id, spectrum id, the
//! 136 pair codes and the 1024 spectrum bins.

use std::path::Path;

use super::bonds::{bonds_to_channels, BondChannels, BondCode, BondList, CELLS, PAIRS};
use super::spectrum::{compress_code, SpectrumBins, SpectrumCode, BINS};
use super::ChemError;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct DatasetRow {
    pub molecule_id: u64,
    pub spectrum_id: u64,
    pub bond_code: BondCode,
    pub bins: SpectrumBins,
}

impl DatasetRow {
    pub fn bonds(&self) -> BondList {
        self.bond_code.to_bonds()
    }

    pub fn channels(&self) -> BondChannels {
        bonds_to_channels(&self.bonds())
    }

    pub fn code(&self) -> SpectrumCode {
        compress_code(&self.bins)
    }
}

/// How rows are laid out in a CSV file.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CsvLayout {
    /// First non-empty line is a header and is skipped.
    pub header: bool,
    /// The bond codes occupy 136 separate cells instead of one digit string.
    pub split_bond_cells: bool,
}

fn parse_err(line: usize, field: &'static str, reason: impl Into<String>) -> ChemError {
    ChemError::Parse {
        line,
        field,
        reason: reason.into(),
    }
}

fn parse_digit(c: u8, line: usize) -> Result<u8, ChemError> {
    let d = c.wrapping_sub(b'0');
    if BondCode::is_valid_digit(d) {
        Ok(d)
    } else {
        Err(parse_err(line, "bond_code", format!("illegal code '{}'", char::from(c))))
    }
}

/// Parses one CSV line; `line` is the 1-based line number used in errors.
pub fn parse_row(text: &str, line: usize, layout: CsvLayout) -> Result<DatasetRow, ChemError> {
    let fields: Vec<&str> = text.split(',').map(str::trim).collect();
    let expected = if layout.split_bond_cells { 3 + PAIRS } else { 4 };
    if fields.len() != expected {
        return Err(parse_err(line, "row", format!("expected {expected} fields, found {}", fields.len())));
    }
    let molecule_id = fields[0]
        .parse()
        .map_err(|e| parse_err(line, "molecule_id", format!("{e}: '{}'", fields[0])))?;
    let spectrum_id = fields[1]
        .parse()
        .map_err(|e| parse_err(line, "spectrum_id", format!("{e}: '{}'", fields[1])))?;

    let mut codes = [0u8; PAIRS];
    if layout.split_bond_cells {
        for (k, cell) in fields[2..2 + PAIRS].iter().enumerate() {
            let &[c] = cell.as_bytes() else {
                return Err(parse_err(line, "bond_code", format!("cell {k} is '{cell}', expected one digit")));
            };
            codes[k] = parse_digit(c, line)?;
        }
    } else {
        let s = fields[2].as_bytes();
        if s.len() != PAIRS {
            return Err(parse_err(line, "bond_code", format!("expected {PAIRS} digits, found {}", s.len())));
        }
        for (k, &c) in s.iter().enumerate() {
            codes[k] = parse_digit(c, line)?;
        }
    }
    let bond_code = BondCode::new(codes)?;

    let spectrum = fields[expected - 1];
    if spectrum.len() != BINS {
        return Err(parse_err(line, "spectrum", format!("expected {BINS} bits, found {}", spectrum.len())));
    }
    let bins = SpectrumBins::from_bitstring(spectrum).map_err(|e| parse_err(line, "spectrum", e.to_string()))?;

    Ok(DatasetRow {
        molecule_id,
        spectrum_id,
        bond_code,
        bins,
    })
}

pub fn serialize_row(row: &DatasetRow, layout: CsvLayout) -> String {
    let digits: Vec<String> = row.bond_code.codes().iter().map(|c| c.to_string()).collect();
    let code = if layout.split_bond_cells {
        digits.join(",")
    } else {
        digits.concat()
    };
    format!("{},{},{},{}", row.molecule_id, row.spectrum_id, code, row.bins.to_bitstring())
}

/// Header line written when [`CsvLayout::header`] is set.
pub fn header_line(layout: CsvLayout) -> String {
    if layout.split_bond_cells {
        let cells: Vec<String> = (0..PAIRS).map(|k| format!("c{k}")).collect();
        format!("molecule_id,spectrum_id,{},spectrum", cells.join(","))
    } else {
        "molecule_id,spectrum_id,bond_code,spectrum".to_owned()
    }
}

/// Parses a whole file body. Blank lines are skipped.
pub fn parse_dataset(text: &str, layout: CsvLayout) -> Result<Vec<DatasetRow>, ChemError> {
    let mut rows = Vec::new();
    let mut header_pending = layout.header;
    for (k, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        if header_pending {
            header_pending = false;
            continue;
        }
        rows.push(parse_row(line, k + 1, layout)?);
    }
    Ok(rows)
}

pub fn write_dataset(rows: &[DatasetRow], layout: CsvLayout) -> String {
    let mut out = String::with_capacity(rows.len() * (BINS + PAIRS + 32));
    if layout.header {
        out.push_str(&header_line(layout));
        out.push('\n');
    }
    for row in rows {
        out.push_str(&serialize_row(row, layout));
        out.push('\n');
    }
    out
}

pub fn read_dataset(path: &Path, layout: CsvLayout) -> Result<Vec<DatasetRow>, ChemError> {
    let text = std::fs::read_to_string(path).map_err(|e| ChemError::Io {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    parse_dataset(&text, layout)
}

fn binary_entropy(p: f64) -> f64 {
    if p <= 0.0 || p >= 1.0 {
        0.0
    } else {
        -p * p.log2() - (1.0 - p) * (1.0 - p).log2()
    }
}

/// Sum over the 1024 input cells of the binary entropy of each cell's
/// empirical one-frequency.
pub fn estimate_entropy(rows: &[DatasetRow]) -> Result<f64, ChemError> {
    if rows.len() < 2 {
        return Err(ChemError::TooFewRows {
            needed: 2,
            found: rows.len(),
        });
    }
    let mut ones = vec![0usize; CELLS];
    for row in rows {
        for (count, &v) in ones.iter_mut().zip(row.channels().tensor().data()) {
            if v == 1.0 {
                *count += 1;
            }
        }
    }
    let n = rows.len() as f64;
    Ok(ones.iter().map(|&c| binary_entropy(c as f64 / n)).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemdata::bonds::{pair_index, Bond};

    fn zero_line(a: u64, b: u64) -> String {
        format!("{a},{b},{},{}", "0".repeat(136), "0".repeat(1024))
    }

    fn row_with(bonds: &[Bond]) -> DatasetRow {
        DatasetRow {
            molecule_id: 1,
            spectrum_id: 1,
            bond_code: BondList::new(bonds.iter().copied()).unwrap().to_code(),
            bins: SpectrumBins::zeros(),
        }
    }

    #[test]
    fn parses_empty_row() {
        let row = parse_row(&zero_line(1, 2), 1, CsvLayout::default()).unwrap();
        assert_eq!((row.molecule_id, row.spectrum_id), (1, 2));
        assert!(row.bonds().is_empty());
        assert_eq!(row.bins.count_ones(), 0);
    }

    #[test]
    fn aromatic_single_from_code_six() {
        let line = format!("5,6,6{},{}", "0".repeat(135), "0".repeat(1024));
        let row = parse_row(&line, 1, CsvLayout::default()).unwrap();
        assert_eq!(row.bonds().bonds(), &[Bond::new(0, 1, 1, true)]);
    }

    #[test]
    fn short_code_names_field_and_line() {
        let line = format!("5,6,{},{}", "0".repeat(135), "0".repeat(1024));
        let err = parse_row(&line, 7, CsvLayout::default()).unwrap_err();
        assert!(matches!(err, ChemError::Parse { line: 7, field: "bond_code", .. }), "{err}");
        assert!(err.to_string().contains("bond_code"));
    }

    #[test]
    fn other_rejections() {
        let layout = CsvLayout::default();
        assert!(matches!(parse_row("1,2,3", 1, layout), Err(ChemError::Parse { field: "row", .. })));
        let bad_digit = format!("1,2,4{},{}", "0".repeat(135), "0".repeat(1024));
        assert!(matches!(parse_row(&bad_digit, 1, layout), Err(ChemError::Parse { field: "bond_code", .. })));
        let bad_bits = format!("1,2,{},{}", "0".repeat(136), "0".repeat(1023));
        assert!(matches!(parse_row(&bad_bits, 1, layout), Err(ChemError::Parse { field: "spectrum", .. })));
        let bad_id = format!("x,2,{},{}", "0".repeat(136), "0".repeat(1024));
        assert!(matches!(parse_row(&bad_id, 1, layout), Err(ChemError::Parse { field: "molecule_id", .. })));
    }

    #[test]
    fn whitespace_is_trimmed() {
        let line = format!(" 3 , 4 , {} , {} ", "0".repeat(136), "0".repeat(1024));
        let row = parse_row(&line, 1, CsvLayout::default()).unwrap();
        assert_eq!(serialize_row(&row, CsvLayout::default()), zero_line(3, 4));
    }

    #[test]
    fn split_cell_layout_round_trips() {
        let layout = CsvLayout {
            header: true,
            split_bond_cells: true,
        };
        let mut row = row_with(&[Bond::new(0, 1, 2, true), Bond::new(3, 9, 3, false)]);
        row.bins.set(17, true);
        let text = write_dataset(std::slice::from_ref(&row), layout);
        assert!(text.starts_with("molecule_id"));
        let back = parse_dataset(&text, layout).unwrap();
        assert_eq!(back, vec![row]);
    }

    #[test]
    fn entropy_examples() {
        let empty = row_with(&[]);
        assert_eq!(estimate_entropy(&[empty.clone(), empty.clone()]).unwrap(), 0.0);

        let one = row_with(&[Bond::new(0, 1, 1, false)]);
        assert!((estimate_entropy(&[one.clone(), empty.clone()]).unwrap() - 1.0).abs() < 1e-12);

        // Two cells each set in one of four rows.
        let other = row_with(&[Bond::new(2, 3, 1, false)]);
        let e = estimate_entropy(&[one, other, empty.clone(), empty]).unwrap();
        let h = -(0.25f64 * 0.25f64.log2() + 0.75 * 0.75f64.log2());
        assert!((e - 2.0 * h).abs() < 1e-12);
        assert!((e - 1.6226).abs() < 1e-4);

        assert!(matches!(estimate_entropy(&[]), Err(ChemError::TooFewRows { .. })));
    }

    #[test]
    fn pair_position_in_string() {
        let row = row_with(&[Bond::new(1, 2, 3, false)]);
        let line = serialize_row(&row, CsvLayout::default());
        let code = line.split(',').nth(2).unwrap();
        assert_eq!(code.as_bytes()[pair_index(1, 2)], b'3');
    }
}
