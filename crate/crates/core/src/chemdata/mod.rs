//! Binary encodings of carbon skeletons and ¹³C peak lists, the CSV row
//! format and a synthetic dataset generator.

mod bonds;
mod dataset;
mod spectrum;
mod synth;

pub use bonds::{
    bonds_to_channels, channels_to_bonds, is_placement_cell, pair_index, pairs, Bond, BondChannels, BondCode,
    BondList, AROMATIC_CHANNEL, AROMATIC_OFFSET, CELLS, CHANNELS, CHANNEL_SHAPE, GRID, MAX_ATOMS, PAIRS,
};
pub use dataset::{
    estimate_entropy, header_line, parse_dataset, parse_row, read_dataset, serialize_row, write_dataset, CsvLayout,
    DatasetRow,
};
pub use spectrum::{
    bin_index, bin_peaks, compress_code, PeakList, SpectrumBins, SpectrumCode, BINS, BIN_WIDTH_PPM, CODE_BITS, GROUP,
    TOP_SHIFT_PPM,
};
pub use synth::{surrogate_peaks, synth_dataset, synth_molecule};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ChemError {
    #[error("invalid bond {bond}: {reason}")]
    InvalidBond { bond: Bond, reason: &'static str },
    #[error("bond order {0} is not 1, 2 or 3")]
    InvalidOrder(u8),
    #[error("pair code {0} is not one of 0,1,2,3,6,7,8")]
    InvalidCodeDigit(u8),
    #[error("non-finite chemical shift {0}")]
    NonFiniteShift(f64),
    #[error("bit index {index} out of range for length {len}")]
    BitOutOfRange { index: usize, len: usize },
    #[error("bit string has {found} characters, expected {expected}")]
    BitStringLength { expected: usize, found: usize },
    #[error("bit string has '{found}' at position {index}")]
    BitStringChar { index: usize, found: char },
    #[error("invalid bond channels: {0}")]
    InvalidChannels(String),
    #[error("line {line}: field {field}: {reason}")]
    Parse {
        line: usize,
        field: &'static str,
        reason: String,
    },
    #[error("need at least {needed} rows, found {found}")]
    TooFewRows { needed: usize, found: usize },
    #[error("{path}: {message}")]
    Io { path: String, message: String },
}
