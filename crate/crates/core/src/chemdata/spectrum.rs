use std::fmt;

use super::ChemError;

pub const BINS: usize = 1024;
pub const CODE_BITS: usize = 128;
/// Bins OR-ed into one code bit.
pub const GROUP: usize = BINS / CODE_BITS;
pub const BIN_WIDTH_PPM: f64 = 0.2;
/// Shifts at or above this value land in the last bin.
pub const TOP_SHIFT_PPM: f64 = 204.6;

/// Chemical shifts in ppm.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PeakList(Vec<f64>);

impl PeakList {
    pub fn new(shifts: Vec<f64>) -> Result<Self, ChemError> {
        if let Some(&s) = shifts.iter().find(|s| !s.is_finite()) {
            return Err(ChemError::NonFiniteShift(s));
        }
        Ok(Self(shifts))
    }

    pub fn shifts(&self) -> &[f64] {
        &self.0
    }
}

/// Bin of a single shift: 0 below zero, 1023 at or above 204.6 ppm, otherwise
/// the 0.2 ppm slot counted from 1 and capped at 1022.
pub fn bin_index(shift: f64) -> usize {
    if shift < 0.0 {
        0
    } else if shift >= TOP_SHIFT_PPM {
        BINS - 1
    } else {
        // Shifts are decimal ppm values; absorb binary representation error so
        // exact multiples of 0.2 open their own slot.
        let slot = (shift / BIN_WIDTH_PPM + 1e-9).floor() as usize;
        (slot + 1).min(BINS - 2)
    }
}

macro_rules! bit_vector {
    ($name:ident, $len:expr) => {
        #[derive(Clone, PartialEq, Eq, Hash)]
        pub struct $name([bool; $len]);

        impl $name {
            pub const LEN: usize = $len;

            pub fn zeros() -> Self {
                Self([false; $len])
            }

            pub fn from_bits(bits: [bool; $len]) -> Self {
                Self(bits)
            }

            pub fn from_positions(positions: impl IntoIterator<Item = usize>) -> Result<Self, ChemError> {
                let mut bits = [false; $len];
                for p in positions {
                    *bits.get_mut(p).ok_or(ChemError::BitOutOfRange { index: p, len: $len })? = true;
                }
                Ok(Self(bits))
            }

            /// Parses a string of exactly `LEN` '0'/'1' characters.
            pub fn from_bitstring(s: &str) -> Result<Self, ChemError> {
                let bytes = s.as_bytes();
                if bytes.len() != $len {
                    return Err(ChemError::BitStringLength { expected: $len, found: bytes.len() });
                }
                let mut bits = [false; $len];
                for (k, &c) in bytes.iter().enumerate() {
                    bits[k] = match c {
                        b'0' => false,
                        b'1' => true,
                        _ => return Err(ChemError::BitStringChar { index: k, found: char::from(c) }),
                    };
                }
                Ok(Self(bits))
            }

            pub fn to_bitstring(&self) -> String {
                self.0.iter().map(|&b| if b { '1' } else { '0' }).collect()
            }

            pub fn bits(&self) -> &[bool; $len] {
                &self.0
            }

            pub fn get(&self, index: usize) -> bool {
                self.0[index]
            }

            pub fn set(&mut self, index: usize, value: bool) {
                self.0[index] = value;
            }

            /// Sorted positions of set bits.
            pub fn ones(&self) -> Vec<usize> {
                (0..$len).filter(|&k| self.0[k]).collect()
            }

            pub fn count_ones(&self) -> usize {
                self.0.iter().filter(|&&b| b).count()
            }

            pub fn as_f64(&self) -> Vec<f64> {
                self.0.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()
            }
        }

        impl fmt::Debug for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "{}{:?}", stringify!($name), self.ones())
            }
        }
    };
}

bit_vector!(SpectrumBins, BINS);
bit_vector!(SpectrumCode, CODE_BITS);

pub fn bin_peaks(peaks: &PeakList) -> SpectrumBins {
    let mut bins = SpectrumBins::zeros();
    for &s in peaks.shifts() {
        bins.set(bin_index(s), true);
    }
    bins
}

/// OR-compresses each run of eight bins into one code bit.
pub fn compress_code(bins: &SpectrumBins) -> SpectrumCode {
    let mut code = SpectrumCode::zeros();
    for (g, group) in bins.bits().chunks_exact(GROUP).enumerate() {
        code.set(g, group.iter().any(|&b| b));
    }
    code
}

#[cfg(test)]
mod tests {
    use super::*;

    const MENTHOL: [&str; 10] = ["31.6", "34.6", "23.2", "50.2", "71.5", "45.1", "25.8", "21", "16.1", "22.2"];

    /// Integer-arithmetic binning on the decimal text: hundredths of a ppm.
    fn bin_from_decimal(text: &str) -> usize {
        let (int, frac) = text.split_once('.').unwrap_or((text, ""));
        let frac = format!("{frac:0<2}");
        let hundredths: i64 = int.parse::<i64>().unwrap() * 100 + frac[..2].parse::<i64>().unwrap();
        if hundredths < 0 {
            0
        } else if hundredths >= 20460 {
            1023
        } else {
            ((hundredths / 20) as usize + 1).min(1022)
        }
    }

    fn peaks(shifts: &[f64]) -> PeakList {
        PeakList::new(shifts.to_vec()).unwrap()
    }

    #[test]
    fn empty_peaks_give_empty_bins() {
        assert_eq!(bin_peaks(&PeakList::default()).count_ones(), 0);
    }

    #[test]
    fn negative_shift_goes_to_first_bin() {
        assert_eq!(bin_peaks(&peaks(&[-3.0])).ones(), vec![0]);
    }

    #[test]
    fn menthol_bins() {
        let shifts: Vec<f64> = MENTHOL.iter().map(|s| s.parse().unwrap()).collect();
        let bins = bin_peaks(&peaks(&shifts));
        let mut expected = vec![159, 174, 117, 252, 358, 226, 130, 106, 81, 112];
        expected.sort_unstable();
        assert_eq!(bins.ones(), expected);
        let oracle: Vec<usize> = MENTHOL.iter().map(|s| bin_from_decimal(s)).collect();
        let direct: Vec<usize> = shifts.iter().map(|&s| bin_index(s)).collect();
        assert_eq!(direct, oracle);
    }

    #[test]
    fn top_boundary() {
        assert_eq!(bin_index(204.6), 1023);
        assert_eq!(bin_index(204.5), 1022);
        assert_eq!(bin_index(204.4), 1022);
        assert_eq!(bin_index(204.59), 1022);
        assert_eq!(bin_index(0.0), 1);
        assert_eq!(bin_index(0.19), 1);
        assert_eq!(bin_index(0.2), 2);
    }

    #[test]
    fn decimal_grid_matches_integer_oracle() {
        for hundredths in -100..21000i64 {
            let text = format!("{}{}.{:02}", if hundredths < 0 { "-" } else { "" }, hundredths.abs() / 100, hundredths.abs() % 100);
            let value: f64 = text.parse().unwrap();
            let expect = if hundredths < 0 { 0 } else { bin_from_decimal(&text) };
            assert_eq!(bin_index(value), expect, "{text}");
        }
    }

    #[test]
    fn non_finite_shift_rejected() {
        assert!(matches!(PeakList::new(vec![1.0, f64::NAN]), Err(ChemError::NonFiniteShift(_))));
    }

    #[test]
    fn compress_examples() {
        assert_eq!(compress_code(&SpectrumBins::zeros()).count_ones(), 0);
        let top = SpectrumBins::from_positions([1023]).unwrap();
        assert_eq!(compress_code(&top).ones(), vec![127]);
        let two = SpectrumBins::from_positions([3, 12]).unwrap();
        assert_eq!(compress_code(&two).ones(), vec![0, 1]);
    }

    #[test]
    fn bitstring_errors() {
        assert!(matches!(SpectrumCode::from_bitstring("01"), Err(ChemError::BitStringLength { .. })));
        let bad = "2".repeat(128);
        assert!(matches!(SpectrumCode::from_bitstring(&bad), Err(ChemError::BitStringChar { index: 0, .. })));
        let s = format!("1{}", "0".repeat(127));
        assert_eq!(SpectrumCode::from_bitstring(&s).unwrap().to_bitstring(), s);
    }
}
