//! Desk-scale stand-in for the real dataset: random connected carbon
//! skeletons with a deterministic surrogate spectrum, so that the spectrum
//! is a learnable function of the structure.

use super::bonds::{Bond, BondList, MAX_ATOMS};
use super::dataset::DatasetRow;
use super::spectrum::{bin_peaks, PeakList, TOP_SHIFT_PPM};
use crate::numeric::{mix64, RngStream};

const MIN_ATOMS: usize = 3;
const RING_SIZE: usize = 6;
const RING_PROBABILITY: f64 = 0.3;
const SHIFT_SALT: u64 = 0x5eed_c13d_a7a5_0001;

/// Random connected skeleton of 3–17 atoms: a tree, optionally grown from an
/// aromatic six-ring, with carbon valence respected.
pub fn synth_molecule(rng: &mut RngStream) -> BondList {
    let atoms = MIN_ATOMS + rng.below(MAX_ATOMS - MIN_ATOMS + 1);
    let mut valence = [0u8; MAX_ATOMS];
    let mut bonds = Vec::with_capacity(atoms);

    // A ring plus a tree on the remaining atoms has as many bonds as atoms;
    // keep that at 16 or fewer.
    let start = if (RING_SIZE..MAX_ATOMS).contains(&atoms) && rng.uniform() < RING_PROBABILITY {
        for k in 0..RING_SIZE {
            let (i, j) = (k, (k + 1) % RING_SIZE);
            let order = if k % 2 == 0 { 2 } else { 1 };
            bonds.push(Bond::new(i, j, order, true));
            valence[i] += order;
            valence[j] += order;
        }
        RING_SIZE
    } else {
        1
    };

    for atom in start..atoms {
        let open: Vec<usize> = (0..atom).filter(|&a| valence[a] < 4).collect();
        let parent = open[rng.below(open.len())];
        let free = (4 - valence[parent]).min(3);
        let u = rng.uniform();
        let order = if free >= 3 && u < 0.05 {
            3
        } else if free >= 2 && u < 0.2 {
            2
        } else {
            1
        };
        bonds.push(Bond::new(parent, atom, order, false));
        valence[parent] += order;
        valence[atom] += order;
    }
    BondList::new(bonds).expect("generator only emits valid bonds")
}

/// One pseudo-shift per bond, a fixed hash of (order, aromatic flag, summed
/// degree of both atoms) mapped into [0, 204.6).
pub fn surrogate_peaks(bonds: &BondList) -> PeakList {
    let degrees = bonds.degrees();
    let shifts = bonds
        .bonds()
        .iter()
        .map(|b| {
            let key = u64::from(b.order) << 16 | u64::from(b.aromatic) << 8 | (degrees[b.i] + degrees[b.j]) as u64;
            let unit = (mix64(key ^ SHIFT_SALT) >> 11) as f64 / (1u64 << 53) as f64;
            unit * TOP_SHIFT_PPM
        })
        .collect();
    PeakList::new(shifts).expect("finite by construction")
}

pub fn synth_dataset(n: usize, seed: u64) -> Vec<DatasetRow> {
    let root = RngStream::new(seed);
    (0..n)
        .map(|k| {
            let mut rng = root.substream(k as u64);
            let bonds = synth_molecule(&mut rng);
            DatasetRow {
                molecule_id: k as u64 + 1,
                spectrum_id: k as u64 + 1,
                bins: bin_peaks(&surrogate_peaks(&bonds)),
                bond_code: bonds.to_code(),
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chemdata::dataset::{parse_dataset, write_dataset, CsvLayout};

    fn connected(b: &BondList) -> bool {
        let n = b.atom_count();
        let mut seen = vec![false; n];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(a) = stack.pop() {
            for bond in b.bonds() {
                let other = if bond.i == a { bond.j } else if bond.j == a { bond.i } else { continue };
                if !seen[other] {
                    seen[other] = true;
                    stack.push(other);
                }
            }
        }
        seen.iter().all(|&s| s)
    }

    #[test]
    fn deterministic_for_seed() {
        assert_eq!(synth_dataset(50, 3), synth_dataset(50, 3));
        assert_ne!(synth_dataset(50, 3), synth_dataset(50, 4));
    }

    #[test]
    fn bond_counts_and_connectivity_after_parsing() {
        let rows = synth_dataset(2000, 11);
        let text = write_dataset(&rows, CsvLayout::default());
        let parsed = parse_dataset(&text, CsvLayout::default()).unwrap();
        for row in &parsed {
            let b = row.bonds();
            assert!((2..=16).contains(&b.len()), "{} bonds", b.len());
            assert!((3..=17).contains(&b.atom_count()));
            assert!(connected(&b));
            let mut valence = [0u8; MAX_ATOMS];
            for bond in b.bonds() {
                valence[bond.i] += bond.order;
                valence[bond.j] += bond.order;
            }
            assert!(valence.iter().all(|&v| v <= 4));
        }
        assert!(parsed.iter().any(|r| r.bonds().aromatic_count() == 6));
        assert!(parsed.iter().any(|r| r.bonds().bonds().iter().any(|b| b.order == 3)));
    }

    #[test]
    fn spectrum_is_a_function_of_structure() {
        let rows = synth_dataset(3000, 5);
        let mut by_structure = std::collections::HashMap::new();
        for r in &rows {
            let prev = by_structure.insert(r.bond_code.clone(), r.bins.clone());
            if let Some(prev) = prev {
                assert_eq!(prev, r.bins);
            }
        }
        let bonds = rows[0].bonds();
        assert_eq!(surrogate_peaks(&bonds), surrogate_peaks(&bonds.clone()));
    }

    #[test]
    fn shifts_in_range() {
        for r in synth_dataset(200, 9) {
            for s in surrogate_peaks(&r.bonds()).shifts() {
                assert!((0.0..TOP_SHIFT_PPM).contains(s));
            }
        }
    }
}
