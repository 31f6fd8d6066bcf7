//! Atomic configurations, labeled frames, and datasets.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

#[inline]
pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

#[inline]
pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

#[inline]
pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

#[inline]
pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

#[inline]
pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn det3(m: &Mat3) -> f64 {
    dot(m[0], cross(m[1], m[2]))
}

/// `m · v` for a matrix stored by rows.
pub fn mat_vec(m: &Mat3, v: Vec3) -> Vec3 {
    [dot(m[0], v), dot(m[1], v), dot(m[2], v)]
}

/// Inverse of a 3×3 matrix. Caller guarantees non-singularity.
pub fn inv3(m: &Mat3) -> Mat3 {
    let d = det3(m);
    let c0 = cross(m[1], m[2]);
    let c1 = cross(m[2], m[0]);
    let c2 = cross(m[0], m[1]);
    // rows of the inverse are the columns of the cofactor matrix / det
    [[c0[0] / d, c1[0] / d, c2[0] / d], [c0[1] / d, c1[1] / d, c2[1] / d], [c0[2] / d, c1[2] / d, c2[2] / d]]
}

/// Uniformly distributed proper rotation, from a normalized Gaussian quaternion.
pub fn random_rotation<R: Rng + ?Sized>(rng: &mut R) -> Mat3 {
    let q: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
    let n = q.iter().map(|x| x * x).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

struct Element {
    z: u8,
    symbol: &'static str,
    mass: f64,
    covalent_radius: f64,
}

macro_rules! elements {
    ($(($z:expr, $s:expr, $m:expr, $r:expr)),* $(,)?) => {
        &[$(Element { z: $z, symbol: $s, mass: $m, covalent_radius: $r }),*]
    };
}

// Masses in amu, covalent radii in Å.
static ELEMENTS: &[Element] = elements![
    (1, "H", 1.008, 0.31),
    (2, "He", 4.0026, 0.28),
    (3, "Li", 6.94, 1.28),
    (4, "Be", 9.0122, 0.96),
    (5, "B", 10.81, 0.84),
    (6, "C", 12.011, 0.76),
    (7, "N", 14.007, 0.71),
    (8, "O", 15.999, 0.66),
    (9, "F", 18.998, 0.57),
    (10, "Ne", 20.180, 0.58),
    (11, "Na", 22.990, 1.66),
    (12, "Mg", 24.305, 1.41),
    (13, "Al", 26.982, 1.21),
    (14, "Si", 28.085, 1.11),
    (15, "P", 30.974, 1.07),
    (16, "S", 32.06, 1.05),
    (17, "Cl", 35.45, 1.02),
    (18, "Ar", 39.948, 1.06),
    (19, "K", 39.098, 2.03),
    (20, "Ca", 40.078, 1.76),
    (26, "Fe", 55.845, 1.32),
    (28, "Ni", 58.693, 1.24),
    (29, "Cu", 63.546, 1.32),
    (30, "Zn", 65.38, 1.22),
    (36, "Kr", 83.798, 1.16),
    (47, "Ag", 107.87, 1.45),
    (54, "Xe", 131.29, 1.40),
    (79, "Au", 196.97, 1.36),
];

fn element(z: u8) -> Option<&'static Element> {
    ELEMENTS.iter().find(|e| e.z == z)
}

pub fn symbol_to_z(symbol: &str) -> Option<u8> {
    ELEMENTS.iter().find(|e| e.symbol.eq_ignore_ascii_case(symbol)).map(|e| e.z)
}

pub fn z_to_symbol(z: u8) -> Option<&'static str> {
    element(z).map(|e| e.symbol)
}

pub fn atomic_mass(z: u8) -> Option<f64> {
    element(z).map(|e| e.mass)
}

pub fn covalent_radius(z: u8) -> Option<f64> {
    element(z).map(|e| e.covalent_radius)
}

/// An atomic configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Structure {
    species: Vec<u8>,
    positions: Vec<Vec3>,
    cell: Option<Mat3>,
    pbc: [bool; 3],
}

impl Structure {
    pub fn new(species: Vec<u8>, positions: Vec<Vec3>, cell: Option<Mat3>, pbc: [bool; 3]) -> Result<Self> {
        let s = Structure { species, positions, cell, pbc };
        s.validate()?;
        Ok(s)
    }

    /// Non-periodic structure without a cell.
    pub fn molecule(species: Vec<u8>, positions: Vec<Vec3>) -> Result<Self> {
        Self::new(species, positions, None, [false; 3])
    }

    fn validate(&self) -> Result<()> {
        if self.species.is_empty() {
            return Err(Error::Structure("structure has no atoms".into()));
        }
        if self.species.len() != self.positions.len() {
            return Err(Error::Structure(format!(
                "{} species but {} positions",
                self.species.len(),
                self.positions.len()
            )));
        }
        if let Some(i) = self.positions.iter().position(|p| p.iter().any(|c| !c.is_finite())) {
            return Err(Error::Structure(format!("non-finite position for atom {i}")));
        }
        if self.pbc.iter().any(|&p| p) {
            match &self.cell {
                None => return Err(Error::Structure("periodic structure without a cell".into())),
                Some(c) if det3(c).abs() <= 1e-10 => return Err(Error::Structure("cell is singular".into())),
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.species.len()
    }

    pub fn is_empty(&self) -> bool {
        self.species.is_empty()
    }

    pub fn species(&self) -> &[u8] {
        &self.species
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn cell(&self) -> Option<&Mat3> {
        self.cell.as_ref()
    }

    pub fn pbc(&self) -> [bool; 3] {
        self.pbc
    }

    pub fn is_periodic(&self) -> bool {
        self.pbc.iter().any(|&p| p)
    }

    /// Same atoms and cell with new positions.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self> {
        Structure::new(self.species.clone(), positions, self.cell, self.pbc)
    }

    /// Flattened positions `[x0, y0, z0, x1, ...]`.
    pub fn flat_positions(&self) -> Vec<f64> {
        self.positions.iter().flat_map(|p| p.iter().copied()).collect()
    }

    pub fn from_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != 3 * self.len() {
            return Err(Error::Shape(format!("expected {} coordinates, got {}", 3 * self.len(), flat.len())));
        }
        self.with_positions(flat.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Applies `x -> R x + t` to every atom (and `R` to the cell vectors).
    pub fn transformed(&self, rot: &Mat3, shift: Vec3) -> Self {
        let positions = self.positions.iter().map(|&p| add(mat_vec(rot, p), shift)).collect();
        let cell = self.cell.map(|c| [mat_vec(rot, c[0]), mat_vec(rot, c[1]), mat_vec(rot, c[2])]);
        Structure { species: self.species.clone(), positions, cell, pbc: self.pbc }
    }

    /// Reorders atoms so that new atom `k` is old atom `perm[k]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Structure {
            species: perm.iter().map(|&i| self.species[i]).collect(),
            positions: perm.iter().map(|&i| self.positions[i]).collect(),
            cell: self.cell,
            pbc: self.pbc,
        }
    }

    pub fn masses(&self) -> Result<Vec<f64>> {
        self.species
            .iter()
            .map(|&z| atomic_mass(z).ok_or_else(|| Error::Structure(format!("no mass for Z={z}"))))
            .collect()
    }

    pub fn center_of_mass(&self) -> Result<Vec3> {
        let masses = self.masses()?;
        let total: f64 = masses.iter().sum();
        let mut com = [0.0; 3];
        for (p, m) in self.positions.iter().zip(&masses) {
            for k in 0..3 {
                com[k] += m * p[k];
            }
        }
        Ok(scale(com, 1.0 / total))
    }

    /// Minimum distance between any two atoms, ignoring periodic images.
    pub fn min_pair_distance(&self) -> Option<f64> {
        let mut best: Option<f64> = None;
        for i in 0..self.len() {
            for j in i + 1..self.len() {
                let d = norm(sub(self.positions[j], self.positions[i]));
                best = Some(best.map_or(d, |b: f64| b.min(d)));
            }
        }
        best
    }
}

/// A structure with reference energy (eV) and forces (eV/Å).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LabeledStructure {
    pub structure: Structure,
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

impl LabeledStructure {
    pub fn new(structure: Structure, energy: f64, forces: Vec<Vec3>) -> Result<Self> {
        if forces.len() != structure.len() {
            return Err(Error::Structure(format!("{} force rows for {} atoms", forces.len(), structure.len())));
        }
        if !energy.is_finite() || forces.iter().flatten().any(|f| !f.is_finite()) {
            return Err(Error::Structure("non-finite label".into()));
        }
        Ok(LabeledStructure { structure, energy, forces })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub name: String,
    pub items: Vec<LabeledStructure>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, items: Vec<LabeledStructure>) -> Self {
        Dataset { name: name.into(), items }
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    /// Sorted, deduplicated atomic numbers present in the dataset.
    pub fn elements(&self) -> Vec<u8> {
        let mut z: Vec<u8> = self.items.iter().flat_map(|it| it.structure.species().iter().copied()).collect();
        z.sort_unstable();
        z.dedup();
        z
    }

    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset { name: self.name.clone(), items: indices.iter().map(|&i| self.items[i].clone()).collect() }
    }

    pub fn require_non_empty(&self, what: &str) -> Result<()> {
        if self.items.is_empty() {
            Err(Error::Validation(format!("{what} dataset '{}' is empty", self.name)))
        } else {
            Ok(())
        }
    }
}

/// One base model's energy and forces for one structure.
#[derive(Clone, Debug, PartialEq)]
pub struct BasePrediction {
    pub energy: f64,
    pub forces: Vec<Vec3>,
}

/// Energy and forces from any model that produces forces.
/// `energy` is `None` for force-only models.
#[derive(Clone, Debug, PartialEq)]
pub struct ForceOutput {
    pub energy: Option<f64>,
    pub forces: Vec<Vec3>,
}

/// Anything that maps a structure to forces.
pub trait ForceProvider: Sync {
    fn compute(&self, s: &Structure) -> Result<ForceOutput>;

    fn label(&self) -> String {
        "model".into()
    }
}

impl<F: ForceProvider + ?Sized> ForceProvider for &F {
    fn compute(&self, s: &Structure) -> Result<ForceOutput> {
        (**self).compute(s)
    }

    fn label(&self) -> String {
        (**self).label()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_periodic_without_cell() {
        let err = Structure::new(vec![1], vec![[0.0; 3]], None, [true, false, false]);
        assert!(err.is_err());
    }

    #[test]
    fn rejects_singular_cell() {
        let cell = [[1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [0.0, 0.0, 1.0]];
        assert!(Structure::new(vec![1], vec![[0.0; 3]], Some(cell), [true; 3]).is_err());
    }

    #[test]
    fn rejects_empty_and_nan() {
        assert!(Structure::molecule(vec![], vec![]).is_err());
        assert!(Structure::molecule(vec![1], vec![[f64::NAN, 0.0, 0.0]]).is_err());
    }

    #[test]
    fn inverse_of_cell() {
        let m = [[2.0, 0.1, 0.0], [0.0, 3.0, 0.2], [0.3, 0.0, 4.0]];
        let inv = inv3(&m);
        for i in 0..3 {
            for j in 0..3 {
                let e: f64 = (0..3).map(|k| m[i][k] * inv[k][j]).sum();
                assert!((e - if i == j { 1.0 } else { 0.0 }).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn labeled_checks_force_rows() {
        let s = Structure::molecule(vec![1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(LabeledStructure::new(s, 0.0, vec![[0.0; 3]]).is_err());
    }

    #[test]
    fn symbols_round_trip() {
        for z in [1u8, 6, 8, 18, 29] {
            assert_eq!(symbol_to_z(z_to_symbol(z).unwrap()), Some(z));
        }
    }
}
