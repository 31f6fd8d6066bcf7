use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::neighbor_list;
use crate::structure::Structure;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptorKind {
    Radial,
    RadialAngular,
}

/// Triplet term `2^(1−ζ) (1 + λ cos θ)^ζ`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AngularTerm {
    pub zeta: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DescriptorSpec {
    pub kind: DescriptorKind,
    pub n_rbf: usize,
    /// First Gaussian center, Å; centers are evenly spaced up to the cutoff.
    pub r_min: f64,
    /// Explicit centers, Å; overrides `r_min`/`n_rbf` spacing when set.
    pub centers: Option<Vec<f64>>,
    /// Gaussian width, Å⁻².
    pub eta: f64,
    /// Å
    pub cutoff: f64,
    /// Radial decay inside triplet terms, Å⁻².
    pub eta_angular: f64,
    pub angular: Vec<AngularTerm>,
}

impl Default for DescriptorSpec {
    fn default() -> Self {
        DescriptorSpec {
            kind: DescriptorKind::Radial,
            n_rbf: 8,
            r_min: 0.8,
            centers: None,
            eta: 4.0,
            cutoff: 4.0,
            eta_angular: 0.5,
            angular: vec![
                AngularTerm { zeta: 1.0, lambda: 1.0 },
                AngularTerm { zeta: 1.0, lambda: -1.0 },
                AngularTerm { zeta: 4.0, lambda: 1.0 },
                AngularTerm { zeta: 4.0, lambda: -1.0 },
            ],
        }
    }
}

impl DescriptorSpec {
    pub fn radial_angular() -> Self {
        DescriptorSpec { kind: DescriptorKind::RadialAngular, ..Default::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cutoff > 0.0) {
            return Err(Error::Config(format!("descriptor cutoff must be positive, got {}", self.cutoff)));
        }
        if self.centers().len() < 2 {
            return Err(Error::Config("descriptor needs at least two radial functions".into()));
        }
        if !(self.eta > 0.0) || !(self.eta_angular >= 0.0) {
            return Err(Error::Config("descriptor widths must be positive".into()));
        }
        if self.kind == DescriptorKind::RadialAngular {
            if let Some(t) = self.angular.iter().find(|t| t.zeta < 1.0 || t.lambda.abs() != 1.0) {
                return Err(Error::Config(format!("angular term needs zeta ≥ 1 and lambda = ±1, got {t:?}")));
            }
        }
        Ok(())
    }

    pub fn centers(&self) -> Vec<f64> {
        match &self.centers {
            Some(c) => c.clone(),
            None if self.n_rbf < 2 => vec![self.r_min; self.n_rbf],
            None => {
                let step = (self.cutoff - self.r_min) / (self.n_rbf - 1) as f64;
                (0..self.n_rbf).map(|k| self.r_min + k as f64 * step).collect()
            }
        }
    }

    fn n_angular(&self) -> usize {
        match self.kind {
            DescriptorKind::Radial => 0,
            DescriptorKind::RadialAngular => self.angular.len(),
        }
    }

    /// Descriptor length per atom for `n_el` neighbor elements.
    pub fn width(&self, n_el: usize) -> usize {
        n_el * self.centers().len() + n_el * (n_el + 1) / 2 * self.n_angular()
    }
}

fn element_index(elements: &[u8], z: u8) -> Result<usize> {
    elements.iter().position(|&e| e == z).ok_or_else(|| {
        Error::Shape(format!("element Z={z} is not covered by the descriptor element table {elements:?}"))
    })
}

/// Records per-atom descriptors on the tape; `pos` holds `3N` position
/// variables. Neighbor sets are fixed at recording time.
pub fn descriptors_on_tape(
    spec: &DescriptorSpec,
    elements: &[u8],
    s: &Structure,
    tape: &mut Tape,
    pos: &[Var],
) -> Result<Vec<Vec<Var>>> {
    spec.validate()?;
    let n = s.len();
    let n_el = elements.len();
    let centers = spec.centers();
    let n_r = centers.len();
    let n_a = spec.n_angular();
    let el: Vec<usize> = s.species().iter().map(|&z| element_index(elements, z)).collect::<Result<_>>()?;
    let p = s.positions();
    let edges = neighbor_list(s, spec.cutoff)?;

    // per unordered pair i < j: vector x_j − x_i, r, cutoff switch, triplet decay
    struct Pair {
        i: usize,
        j: usize,
        v: [Var; 3],
        r: Var,
        fc: Var,
        ang: Option<Var>,
    }
    let mut pairs: Vec<Pair> = Vec::new();
    let pi = std::f64::consts::PI;
    for e in edges.iter().filter(|e| e.src < e.dst) {
        let (i, j) = (e.src, e.dst);
        let mut v = [pos[0]; 3];
        for m in 0..3 {
            let d = tape.sub(pos[3 * j + m], pos[3 * i + m]);
            let shift = e.vector[m] - (p[j][m] - p[i][m]);
            v[m] = if shift == 0.0 { d } else { tape.shift(d, shift) };
        }
        let r2 = tape.dot(&v, &v);
        let r = tape.sqrt(r2);
        let arg = tape.scale(r, pi / spec.cutoff);
        let c = tape.cos(arg);
        let c1 = tape.shift(c, 1.0);
        let fc = tape.scale(c1, 0.5);
        let ang = if n_a > 0 {
            let a = tape.scale(r2, -spec.eta_angular);
            let ex = tape.exp(a);
            Some(tape.mul(ex, fc))
        } else {
            None
        };
        pairs.push(Pair { i, j, v, r, fc, ang });
    }

    // bins[atom][feature] collects terms before summation
    let width = spec.width(n_el);
    let mut bins: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); width]; n];
    for pr in &pairs {
        let (i, j) = (pr.i, pr.j);
        for (c_idx, &mu) in centers.iter().enumerate() {
            let d = tape.shift(pr.r, -mu);
            let sq = tape.square(d);
            let a = tape.scale(sq, -spec.eta);
            let g = tape.exp(a);
            let term = tape.mul(g, pr.fc);
            bins[i][el[j] * n_r + c_idx].push(term);
            bins[j][el[i] * n_r + c_idx].push(term);
        }
    }

    if n_a > 0 {
        let mut neigh: Vec<Vec<(usize, usize, bool)>> = vec![Vec::new(); n];
        for (k, pr) in pairs.iter().enumerate() {
            // `true` when the stored vector points away from the center
            neigh[pr.i].push((pr.j, k, true));
            neigh[pr.j].push((pr.i, k, false));
        }
        let pair_base = n_el * n_r;
        for (center, list) in neigh.iter().enumerate() {
            for a in 0..list.len() {
                for b in a + 1..list.len() {
                    let (ja, ka, fa) = list[a];
                    let (jb, kb, fb) = list[b];
                    let (pa, pb) = (&pairs[ka], &pairs[kb]);
                    let dot = tape.dot(&pa.v, &pb.v);
                    let dot = if fa == fb { dot } else { tape.neg(dot) };
                    let rr = tape.mul(pa.r, pb.r);
                    let cos = tape.div(dot, rr);
                    let decay = tape.mul(pa.ang.expect("angular decay"), pb.ang.expect("angular decay"));
                    let (e1, e2) = (el[ja].min(el[jb]), el[ja].max(el[jb]));
                    let slot = pair_slot(n_el, e1, e2);
                    for (t_idx, t) in spec.angular.iter().enumerate() {
                        let base = tape.scale(cos, t.lambda);
                        let base = tape.shift(base, 1.0);
                        let pw = if t.zeta == 1.0 { base } else { tape.powf(base, t.zeta) };
                        let term = tape.mul(pw, decay);
                        let term = tape.scale(term, 2f64.powf(1.0 - t.zeta));
                        bins[center][pair_base + slot * n_a + t_idx].push(term);
                    }
                }
            }
        }
    }
    Ok(bins.into_iter().map(|atom| atom.iter().map(|terms| tape.sum(terms)).collect()).collect())
}

/// Index of the unordered element pair `(a, b)`, `a ≤ b`.
fn pair_slot(n_el: usize, a: usize, b: usize) -> usize {
    a * n_el - a * (a + 1) / 2 + b
}

/// Plain per-atom descriptor values.
pub fn compute_descriptors(spec: &DescriptorSpec, elements: &[u8], s: &Structure) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let pos = tape.inputs(&s.flat_positions());
    let d = descriptors_on_tape(spec, elements, s, &mut tape, &pos)?;
    Ok(d.iter().map(|row| tape.values(row)).collect())
}
