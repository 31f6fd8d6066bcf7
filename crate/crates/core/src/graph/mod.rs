//! Meta-model input graphs built from base-model predictions.

pub mod neighbors;

pub use neighbors::{neighbor_list, Edge};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::structure::{BasePrediction, Structure};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GraphSpec {
    /// Å, inclusive.
    pub cutoff: f64,
    pub self_loops: bool,
    pub energy_embed_dim: usize,
    /// Atomic numbers spanned by the species one-hot.
    pub elements: Vec<u8>,
}

impl Default for GraphSpec {
    fn default() -> Self {
        GraphSpec { cutoff: 5.0, self_loops: true, energy_embed_dim: 16, elements: vec![1, 6, 18] }
    }
}

impl GraphSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0) {
            return Err(Error::Config(format!("graph cutoff must be positive, got {}", self.cutoff)));
        }
        if self.energy_embed_dim == 0 {
            return Err(Error::Config("graph energy_embed_dim must be at least 1".into()));
        }
        if self.elements.is_empty() {
            return Err(Error::Config("graph element table is empty".into()));
        }
        Ok(())
    }

    /// Width of a node feature row for `m` base models.
    pub fn feature_width(&self, m: usize) -> usize {
        3 * m + self.energy_embed_dim + self.elements.len()
    }
}

/// One-hot of `z` over `elements`.
pub fn one_hot(elements: &[u8], z: u8) -> Result<Vec<f64>> {
    let k = elements
        .iter()
        .position(|&e| e == z)
        .ok_or_else(|| Error::Shape(format!("element Z={z} is not in the configured element table {elements:?}")))?;
    let mut v = vec![0.0; elements.len()];
    v[k] = 1.0;
    Ok(v)
}

/// Affine map from per-atom base energies to a global embedding.
/// Inputs are `(E_m / N − shift) / scale`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnergyEmbedder {
    /// `M × d_E`, row-major by base.
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub shift: f64,
    pub scale: f64,
}

impl EnergyEmbedder {
    pub fn zeros(m: usize, d: usize) -> Self {
        EnergyEmbedder { weight: vec![0.0; m * d], bias: vec![0.0; d], shift: 0.0, scale: 1.0 }
    }

    pub fn n_bases(&self) -> usize {
        self.weight.len() / self.bias.len().max(1)
    }

    pub fn dim(&self) -> usize {
        self.bias.len()
    }

    pub fn normalize(&self, per_atom: &[f64]) -> Vec<f64> {
        per_atom.iter().map(|e| (e - self.shift) / self.scale).collect()
    }

    pub fn apply(&self, per_atom: &[f64]) -> Vec<f64> {
        let x = self.normalize(per_atom);
        let d = self.dim();
        (0..d)
            .map(|k| self.bias[k] + x.iter().enumerate().map(|(m, xm)| self.weight[m * d + k] * xm).sum::<f64>())
            .collect()
    }
}

/// Cutoff graph with per-node features
/// `[F̂¹ … F̂ᴹ | embed(E¹/N … Eᴹ/N) | one-hot(Z)]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MolecularGraph {
    pub n_nodes: usize,
    /// Directed edges, both directions present, sorted by `(src, dst)`.
    /// Self-loops, when enabled, carry a zero vector.
    pub edges: Vec<Edge>,
    /// `n_nodes × width`, row-major.
    pub node_features: Vec<f64>,
    pub width: usize,
    pub n_bases: usize,
    /// Per-atom base energies `E_m / N`, before embedding.
    pub energies_per_atom: Vec<f64>,
}

impl MolecularGraph {
    pub fn row(&self, j: usize) -> &[f64] {
        &self.node_features[j * self.width..(j + 1) * self.width]
    }

    /// Columns holding base forces and species one-hot (everything except
    /// the energy block).
    pub fn force_block(&self, j: usize) -> &[f64] {
        &self.row(j)[..3 * self.n_bases]
    }

    pub fn onehot_block(&self, j: usize, embed_dim: usize) -> &[f64] {
        &self.row(j)[3 * self.n_bases + embed_dim..]
    }
}

pub fn build_graph(
    s: &Structure,
    preds: &[BasePrediction],
    spec: &GraphSpec,
    embedder: &EnergyEmbedder,
) -> Result<MolecularGraph> {
    spec.validate()?;
    let n = s.len();
    let m = preds.len();
    if m == 0 {
        return Err(Error::Shape("graph needs at least one base prediction".into()));
    }
    if let Some((k, p)) = preds.iter().enumerate().find(|(_, p)| p.forces.len() != n) {
        return Err(Error::Shape(format!("prediction {k} has {} force rows, structure has {n} atoms", p.forces.len())));
    }
    if embedder.n_bases() != m || embedder.dim() != spec.energy_embed_dim {
        return Err(Error::Shape(format!(
            "embedder is {}×{}, graph expects {m}×{}",
            embedder.n_bases(),
            embedder.dim(),
            spec.energy_embed_dim
        )));
    }
    let per_atom: Vec<f64> = preds.iter().map(|p| p.energy / n as f64).collect();
    let embed = embedder.apply(&per_atom);
    let width = spec.feature_width(m);
    let mut feats = Vec::with_capacity(n * width);
    for j in 0..n {
        for p in preds {
            feats.extend_from_slice(&p.forces[j]);
        }
        feats.extend_from_slice(&embed);
        feats.extend(one_hot(&spec.elements, s.species()[j])?);
    }
    let mut edges = neighbor_list(s, spec.cutoff)?;
    if spec.self_loops {
        edges.extend((0..n).map(|i| Edge { src: i, dst: i, shift: [0.0; 3], vector: [0.0; 3], distance: 0.0 }));
        edges.sort_by_key(|e| (e.src, e.dst));
    }
    Ok(MolecularGraph { n_nodes: n, edges, node_features: feats, width, n_bases: m, energies_per_atom: per_atom })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::structure::Vec3;

    fn pred(e: f64, f: Vec<Vec3>) -> BasePrediction {
        BasePrediction { energy: e, forces: f }
    }

    #[test]
    fn single_atom_zero_case() {
        let s = Structure::molecule(vec![6], vec![[0.0; 3]]).unwrap();
        let spec = GraphSpec { energy_embed_dim: 4, ..Default::default() };
        let g = build_graph(&s, &[pred(0.0, vec![[0.0; 3]])], &spec, &EnergyEmbedder::zeros(1, 4)).unwrap();
        assert_eq!(g.row(0), &[0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.edges.len(), 1);
    }

    #[test]
    fn complete_graph_for_small_lj_cluster() {
        let pos: Vec<Vec3> = (0..5).map(|k| [k as f64 * 1.5, 0.3 * k as f64, 0.0]).collect();
        let s = Structure::molecule(vec![18; 5], pos).unwrap();
        let spec = GraphSpec { cutoff: 8.5, self_loops: false, ..Default::default() };
        let g = build_graph(&s, &[pred(-1.0, vec![[0.0; 3]; 5])], &spec, &EnergyEmbedder::zeros(1, 16)).unwrap();
        assert_eq!(g.edges.len(), 20);
        assert!(g.edges.iter().all(|e| g.edges.iter().any(|r| r.src == e.dst && r.dst == e.src)));
    }

    #[test]
    fn permutation_equivariance() {
        let s = Structure::molecule(vec![6, 1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0], [0.0, 1.2, 0.0]]).unwrap();
        let f = vec![[0.1, 0.2, 0.3], [1.0, 2.0, 3.0], [-1.0, 0.0, 0.5]];
        let spec = GraphSpec { energy_embed_dim: 2, ..Default::default() };
        let emb = EnergyEmbedder { weight: vec![0.5, -1.0], bias: vec![0.1, 0.2], shift: 0.0, scale: 1.0 };
        let g = build_graph(&s, &[pred(3.0, f.clone())], &spec, &emb).unwrap();
        let perm = [2, 0, 1];
        let sp = s.permuted(&perm);
        let fp: Vec<Vec3> = perm.iter().map(|&i| f[i]).collect();
        let gp = build_graph(&sp, &[pred(3.0, fp)], &spec, &emb).unwrap();
        for (new, &old) in perm.iter().enumerate() {
            assert_eq!(gp.row(new), g.row(old));
        }
        let mapped: Vec<(usize, usize)> = gp.edges.iter().map(|e| (perm[e.src], perm[e.dst])).collect();
        let mut orig: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.src, e.dst)).collect();
        let mut mapped_sorted = mapped;
        mapped_sorted.sort();
        orig.sort();
        assert_eq!(mapped_sorted, orig);
    }

    #[test]
    fn embedded_block_depends_only_on_per_atom_energies() {
        let spec = GraphSpec { energy_embed_dim: 3, ..Default::default() };
        let emb = EnergyEmbedder {
            weight: vec![1.0, 2.0, 3.0, -1.0, 0.5, 0.0],
            bias: vec![0.0, 0.1, 0.2],
            shift: 0.3,
            scale: 2.0,
        };
        let a = Structure::molecule(vec![1, 1], vec![[0.0; 3], [0.8, 0.0, 0.0]]).unwrap();
        let b = Structure::molecule(vec![1, 1, 1], vec![[0.0; 3], [0.8, 0.0, 0.0], [0.0, 0.9, 0.0]]).unwrap();
        let ga = build_graph(&a, &[pred(2.0, vec![[0.0; 3]; 2]), pred(-1.0, vec![[0.0; 3]; 2])], &spec, &emb).unwrap();
        let gb = build_graph(&b, &[pred(3.0, vec![[1.0; 3]; 3]), pred(-1.5, vec![[0.0; 3]; 3])], &spec, &emb).unwrap();
        let block = |g: &MolecularGraph, j: usize| g.row(j)[6..9].to_vec();
        let first = block(&ga, 0);
        assert!((0..2).all(|j| block(&ga, j) == first));
        assert!((0..3).all(|j| block(&gb, j) == first));
    }

    #[test]
    fn mismatched_prediction_rejected() {
        let s = Structure::molecule(vec![1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let r = build_graph(&s, &[pred(0.0, vec![[0.0; 3]])], &GraphSpec::default(), &EnergyEmbedder::zeros(1, 16));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn width_is_fixed() {
        let spec = GraphSpec::default();
        assert_eq!(spec.feature_width(8), 24 + 16 + 3);
    }
}
