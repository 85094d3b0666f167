use std::fmt;

use super::ChemError;
use crate::numeric::Tensor;

/// Most carbons a molecule may have.
pub const MAX_ATOMS: usize = 17;
/// Side of the square bond plane; pair (i, j) with i < j sits at cell (i, j − 1).
pub const GRID: usize = MAX_ATOMS - 1;
/// Single, double, triple and aromatic planes.
pub const CHANNELS: usize = 4;
/// Upper-triangle pairs of 17 atoms.
pub const PAIRS: usize = MAX_ATOMS * (MAX_ATOMS - 1) / 2;
/// Added to the bond order of aromatic bonds in the pair code.
pub const AROMATIC_OFFSET: u8 = 5;
pub const AROMATIC_CHANNEL: usize = 3;
pub const CHANNEL_SHAPE: [usize; 3] = [CHANNELS, GRID, GRID];
pub const CELLS: usize = CHANNELS * GRID * GRID;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// 1, 2 or 3.
    pub order: u8,
    pub aromatic: bool,
}

impl Bond {
    pub fn new(i: usize, j: usize, order: u8, aromatic: bool) -> Self {
        Self { i, j, order, aromatic }
    }

    pub fn code(&self) -> u8 {
        self.order + if self.aromatic { AROMATIC_OFFSET } else { 0 }
    }
}

impl fmt::Display for Bond {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}-{}-{}{}", self.i, self.j, self.order, if self.aromatic { "a" } else { "" })
    }
}

/// Bonds between carbon atoms, kept sorted by atom pair.
#[derive(Debug, Clone, Default, PartialEq, Eq, Hash)]
pub struct BondList {
    bonds: Vec<Bond>,
}

/// Row-major index of pair (i, j), i < j, among the 136 upper-triangle pairs.
pub fn pair_index(i: usize, j: usize) -> usize {
    debug_assert!(i < j && j < MAX_ATOMS);
    i * MAX_ATOMS - i * (i + 1) / 2 + (j - i - 1)
}

/// Pair (i, j) for each of the 136 code positions, in code order.
pub fn pairs() -> impl Iterator<Item = (usize, usize)> {
    (0..MAX_ATOMS).flat_map(|i| (i + 1..MAX_ATOMS).map(move |j| (i, j)))
}

/// Whether cell (row, col) of a bond plane can hold a bond.
#[inline]
pub fn is_placement_cell(row: usize, col: usize) -> bool {
    col >= row
}

impl BondList {
    /// Validates and sorts the bonds. Pairs given as (j, i) are flipped.
    pub fn new(bonds: impl IntoIterator<Item = Bond>) -> Result<Self, ChemError> {
        let mut out: Vec<Bond> = Vec::new();
        for mut b in bonds {
            if b.i == b.j {
                return Err(ChemError::InvalidBond { bond: b, reason: "self bond" });
            }
            if b.i > b.j {
                std::mem::swap(&mut b.i, &mut b.j);
            }
            if b.j >= MAX_ATOMS {
                return Err(ChemError::InvalidBond { bond: b, reason: "atom index above 16" });
            }
            if !(1..=3).contains(&b.order) {
                return Err(ChemError::InvalidOrder(b.order));
            }
            out.push(b);
        }
        out.sort_unstable_by_key(|b| (b.i, b.j));
        if let Some(w) = out.windows(2).find(|w| (w[0].i, w[0].j) == (w[1].i, w[1].j)) {
            return Err(ChemError::InvalidBond { bond: w[1], reason: "duplicate atom pair" });
        }
        Ok(Self { bonds: out })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn bonds(&self) -> &[Bond] {
        &self.bonds
    }

    pub fn len(&self) -> usize {
        self.bonds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bonds.is_empty()
    }

    /// One past the highest bonded atom index.
    pub fn atom_count(&self) -> usize {
        self.bonds.iter().map(|b| b.j + 1).max().unwrap_or(0)
    }

    pub fn aromatic_count(&self) -> usize {
        self.bonds.iter().filter(|b| b.aromatic).count()
    }

    /// Number of bonds at each atom.
    pub fn degrees(&self) -> [usize; MAX_ATOMS] {
        let mut d = [0; MAX_ATOMS];
        for b in &self.bonds {
            d[b.i] += 1;
            d[b.j] += 1;
        }
        d
    }

    pub fn to_code(&self) -> BondCode {
        let mut codes = [0u8; PAIRS];
        for b in &self.bonds {
            codes[pair_index(b.i, b.j)] = b.code();
        }
        BondCode(codes)
    }

    pub fn from_code(code: &BondCode) -> Self {
        let bonds = pairs()
            .zip(code.0.iter())
            .filter(|(_, &c)| c != 0)
            .map(|((i, j), &c)| {
                let aromatic = c > AROMATIC_OFFSET;
                let order = if aromatic { c - AROMATIC_OFFSET } else { c };
                Bond::new(i, j, order, aromatic)
            })
            .collect();
        // Pair order already matches the sort key.
        Self { bonds }
    }
}

impl fmt::Display for BondList {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (k, b) in self.bonds.iter().enumerate() {
            if k > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{b}")?;
        }
        Ok(())
    }
}

/// The 136 upper-triangle pair codes: 0 none, 1–3 bond order, 6–8 aromatic.
#[derive(Clone, PartialEq, Eq, Hash)]
pub struct BondCode([u8; PAIRS]);

impl BondCode {
    pub fn new(codes: [u8; PAIRS]) -> Result<Self, ChemError> {
        if let Some(&bad) = codes.iter().find(|&&c| !Self::is_valid_digit(c)) {
            return Err(ChemError::InvalidCodeDigit(bad));
        }
        Ok(Self(codes))
    }

    pub fn is_valid_digit(c: u8) -> bool {
        matches!(c, 0..=3 | 6..=8)
    }

    pub fn codes(&self) -> &[u8; PAIRS] {
        &self.0
    }

    pub fn to_bonds(&self) -> BondList {
        BondList::from_code(self)
    }
}

impl fmt::Debug for BondCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s: String = self.0.iter().map(|&c| char::from(b'0' + c)).collect();
        write!(f, "BondCode({s})")
    }
}

/// The `[4, 16, 16]` binary network input.
#[derive(Debug, Clone, PartialEq)]
pub struct BondChannels(Tensor);

#[inline]
fn cell_index(channel: usize, row: usize, col: usize) -> usize {
    (channel * GRID + row) * GRID + col
}

impl BondChannels {
    /// Accepts a tensor only if it is a valid encoding: binary, set cells in
    /// the placement triangle, at most one order plane per cell and the
    /// aromatic plane only on top of a bond.
    pub fn try_from_tensor(t: Tensor) -> Result<Self, ChemError> {
        if t.shape() != CHANNEL_SHAPE {
            return Err(ChemError::InvalidChannels(format!("shape {:?}, expected {CHANNEL_SHAPE:?}", t.shape())));
        }
        let d = t.data();
        if let Some(v) = d.iter().find(|&&v| v != 0.0 && v != 1.0) {
            return Err(ChemError::InvalidChannels(format!("non-binary value {v}")));
        }
        for row in 0..GRID {
            for col in 0..GRID {
                let set: Vec<bool> = (0..CHANNELS).map(|c| d[cell_index(c, row, col)] == 1.0).collect();
                let orders = set[..AROMATIC_CHANNEL].iter().filter(|&&s| s).count();
                if !is_placement_cell(row, col) && set.iter().any(|&s| s) {
                    return Err(ChemError::InvalidChannels(format!("cell ({row}, {col}) lies outside the placement triangle")));
                }
                if orders > 1 {
                    return Err(ChemError::InvalidChannels(format!("cell ({row}, {col}) has {orders} bond orders")));
                }
                if set[AROMATIC_CHANNEL] && orders == 0 {
                    return Err(ChemError::InvalidChannels(format!("cell ({row}, {col}) is aromatic without a bond")));
                }
            }
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn count_ones(&self) -> usize {
        self.0.data().iter().filter(|&&v| v == 1.0).count()
    }
}

pub fn bonds_to_channels(bonds: &BondList) -> BondChannels {
    let mut t = Tensor::zeros(&CHANNEL_SHAPE);
    let d = t.data_mut();
    for b in bonds.bonds() {
        let (row, col) = (b.i, b.j - 1);
        d[cell_index(usize::from(b.order) - 1, row, col)] = 1.0;
        if b.aromatic {
            d[cell_index(AROMATIC_CHANNEL, row, col)] = 1.0;
        }
    }
    BondChannels(t)
}

/// Reads bonds back from a (possibly real-valued) `[4, 16, 16]` tensor.
///
/// A placement cell is a bond when any order plane exceeds `threshold`;
/// the order is the arg-max over the three order planes (first wins ties)
/// and the bond is aromatic when the aromatic plane exceeds `threshold`.
pub fn channels_to_bonds(x: &Tensor, threshold: f64) -> Result<BondList, ChemError> {
    if x.shape() != CHANNEL_SHAPE {
        return Err(ChemError::InvalidChannels(format!("shape {:?}, expected {CHANNEL_SHAPE:?}", x.shape())));
    }
    let d = x.data();
    let mut bonds = Vec::new();
    for row in 0..GRID {
        for col in row..GRID {
            let planes = [d[cell_index(0, row, col)], d[cell_index(1, row, col)], d[cell_index(2, row, col)]];
            if !planes.iter().any(|&v| v > threshold) {
                continue;
            }
            let mut best = 0;
            for k in 1..3 {
                if planes[k] > planes[best] {
                    best = k;
                }
            }
            let aromatic = d[cell_index(AROMATIC_CHANNEL, row, col)] > threshold;
            bonds.push(Bond::new(row, col + 1, best as u8 + 1, aromatic));
        }
    }
    Ok(BondList { bonds })
}
