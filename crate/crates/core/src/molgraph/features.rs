//! One-hot atom and bond encodings.

use std::sync::OnceLock;

use super::{BondOrder, MolError};

/// Width of a bond feature vector: one slot per [`BondOrder`].
pub const BOND_FEATURES: usize = 4;

const PERIODIC_TABLE: [&str; 118] = [
    "H", "He", "Li", "Be", "B", "C", "N", "O", "F", "Ne", "Na", "Mg", "Al", "Si", "P", "S", "Cl",
    "Ar", "K", "Ca", "Sc", "Ti", "V", "Cr", "Mn", "Fe", "Co", "Ni", "Cu", "Zn", "Ga", "Ge", "As",
    "Se", "Br", "Kr", "Rb", "Sr", "Y", "Zr", "Nb", "Mo", "Tc", "Ru", "Rh", "Pd", "Ag", "Cd", "In",
    "Sn", "Sb", "Te", "I", "Xe", "Cs", "Ba", "La", "Ce", "Pr", "Nd", "Pm", "Sm", "Eu", "Gd", "Tb",
    "Dy", "Ho", "Er", "Tm", "Yb", "Lu", "Hf", "Ta", "W", "Re", "Os", "Ir", "Pt", "Au", "Hg", "Tl",
    "Pb", "Bi", "Po", "At", "Rn", "Fr", "Ra", "Ac", "Th", "Pa", "U", "Np", "Pu", "Am", "Cm", "Bk",
    "Cf", "Es", "Fm", "Md", "No", "Lr", "Rf", "Db", "Sg", "Bh", "Hs", "Mt", "Ds", "Rg", "Cn", "Nh",
    "Fl", "Mc", "Lv", "Ts", "Og",
];

/// Element symbols of the shipped vocabulary, in feature-slot order.
pub const STANDARD_ELEMENTS: [&str; 10] = ["H", "C", "N", "O", "F", "P", "S", "Cl", "Br", "I"];

/// Canonical capitalization ("CL" → "Cl") if the symbol names a real element.
pub fn normalize_symbol(symbol: &str) -> Option<&'static str> {
    let s = symbol.trim();
    PERIODIC_TABLE.iter().copied().find(|e| e.eq_ignore_ascii_case(s))
}

/// Ordered element table used for one-hot atom features.
///
/// With an `other` bucket, any real element outside the table maps to the
/// final slot; strings that are not element symbols are always rejected.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocabulary {
    symbols: Vec<String>,
    other_bucket: bool,
}

impl Vocabulary {
    pub fn new(symbols: &[&str], other_bucket: bool) -> Self {
        Self {
            symbols: symbols.iter().map(|s| s.to_string()).collect(),
            other_bucket,
        }
    }

    /// `{H, C, N, O, F, P, S, Cl, Br, I, other}`.
    pub fn standard() -> &'static Vocabulary {
        static STANDARD: OnceLock<Vocabulary> = OnceLock::new();
        STANDARD.get_or_init(|| Vocabulary::new(&STANDARD_ELEMENTS, true))
    }

    /// Feature width `N`.
    pub fn len(&self) -> usize {
        self.symbols.len() + usize::from(self.other_bucket)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index_of(&self, symbol: &str) -> Result<usize, MolError> {
        let unknown = || MolError::UnknownElement(symbol.trim().to_string());
        if let Some(i) = self.symbols.iter().position(|s| s.eq_ignore_ascii_case(symbol.trim())) {
            return Ok(i);
        }
        if self.other_bucket && normalize_symbol(symbol).is_some() {
            return Ok(self.symbols.len());
        }
        Err(unknown())
    }

    pub fn one_hot(&self, symbol: &str) -> Result<Vec<f64>, MolError> {
        let mut v = vec![0.0; self.len()];
        v[self.index_of(symbol)?] = 1.0;
        Ok(v)
    }
}

pub fn bond_one_hot(order: BondOrder) -> Vec<f64> {
    let mut v = vec![0.0; BOND_FEATURES];
    v[order.slot()] = 1.0;
    v
}

/// Node and bond one-hot encodings under `vocab`.
///
/// Bond orders use the file convention: 1, 2, 3, or 4 for aromatic.
pub fn featurize_with(
    vocab: &Vocabulary,
    element_symbols: &[&str],
    bond_orders: &[u8],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), MolError> {
    let nodes = element_symbols
        .iter()
        .map(|s| vocab.one_hot(s))
        .collect::<Result<Vec<_>, _>>()?;
    let bonds = bond_orders
        .iter()
        .map(|&o| BondOrder::from_code(o).map(bond_one_hot))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((nodes, bonds))
}

/// [`featurize_with`] using [`Vocabulary::standard`].
pub fn featurize(
    element_symbols: &[&str],
    bond_orders: &[u8],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>), MolError> {
    featurize_with(Vocabulary::standard(), element_symbols, bond_orders)
}
