//! Analytic reference potentials used as ground truth.

mod sampling;

pub use sampling::{default_init, generate_dataset, InitStructure, SamplerSpec};

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::graph::neighbors::{minimum_image, neighbor_list};
use crate::structure::{dot, norm, scale, ForceOutput, ForceProvider, Structure, Vec3};

/// Closest allowed approach between two atoms, Å.
pub const MIN_PAIR_DISTANCE: f64 = 0.1;

const COS_CLAMP: f64 = 1.0 - 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LjParams {
    pub epsilon: f64,
    pub sigma: f64,
    pub cutoff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// eV/Å²
    pub k: f64,
    /// Å
    pub r0: f64,
}

/// Harmonic angle with vertex `j`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Angle {
    pub i: usize,
    pub j: usize,
    pub k: usize,
    /// eV/rad²
    pub k_theta: f64,
    /// rad
    pub theta0: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RefPotentialSpec {
    LjCluster {
        lj: LjParams,
    },
    /// Harmonic bonds and angles, with LJ on every pair that is not bonded.
    PseudoMolecule {
        bonds: Vec<Bond>,
        angles: Vec<Angle>,
        nonbonded: LjParams,
    },
}

impl RefPotentialSpec {
    /// Seven-atom argon cluster parameters.
    pub fn lj_argon() -> Self {
        RefPotentialSpec::LjCluster { lj: LjParams { epsilon: 0.0103, sigma: 3.4, cutoff: 8.5 } }
    }

    /// Carbon center (atom 0) with four hydrogen satellites (atoms 1..=4).
    pub fn pseudo_methane() -> Self {
        let bonds = (1..=4).map(|h| Bond { i: 0, j: h, k: 20.0, r0: 1.09 }).collect();
        let mut angles = Vec::new();
        for a in 1..=4 {
            for b in a + 1..=4 {
                angles.push(Angle { i: a, j: 0, k: b, k_theta: 3.0, theta0: 1.9106 });
            }
        }
        RefPotentialSpec::PseudoMolecule {
            bonds,
            angles,
            nonbonded: LjParams { epsilon: 0.005, sigma: 1.5, cutoff: 4.0 },
        }
    }

    pub fn validate(&self) -> Result<()> {
        let lj_ok = |lj: &LjParams| {
            if lj.epsilon < 0.0 || lj.sigma <= 0.0 || lj.cutoff <= lj.sigma {
                Err(Error::Config(format!("LJ parameters need epsilon ≥ 0, sigma > 0, cutoff > sigma: {lj:?}")))
            } else {
                Ok(())
            }
        };
        match self {
            RefPotentialSpec::LjCluster { lj } => lj_ok(lj),
            RefPotentialSpec::PseudoMolecule { bonds, angles, nonbonded } => {
                lj_ok(nonbonded)?;
                if let Some(b) = bonds.iter().find(|b| b.k <= 0.0 || b.r0 <= 0.0 || b.i == b.j) {
                    return Err(Error::Config(format!("invalid bond {b:?}")));
                }
                if let Some(a) = angles.iter().find(|a| a.k_theta <= 0.0 || a.i == a.j || a.j == a.k || a.i == a.k) {
                    return Err(Error::Config(format!("invalid angle {a:?}")));
                }
                Ok(())
            }
        }
    }

    fn max_index(&self) -> Option<usize> {
        match self {
            RefPotentialSpec::LjCluster { .. } => None,
            RefPotentialSpec::PseudoMolecule { bonds, angles, .. } => {
                bonds.iter().flat_map(|b| [b.i, b.j]).chain(angles.iter().flat_map(|a| [a.i, a.j, a.k])).max()
            }
        }
    }

    pub fn check_compatible(&self, s: &Structure) -> Result<()> {
        self.validate()?;
        if let Some(m) = self.max_index() {
            if m >= s.len() {
                return Err(Error::Eval(format!("potential references atom {m} but structure has {} atoms", s.len())));
            }
        }
        Ok(())
    }

    /// Same functional form with every energy parameter multiplied by
    /// `energy_scale` and every length parameter (σ, r0) by `length_scale`.
    pub fn scaled(&self, energy_scale: f64, length_scale: f64) -> Self {
        let lj = |p: &LjParams| LjParams {
            epsilon: p.epsilon * energy_scale,
            sigma: p.sigma * length_scale,
            cutoff: p.cutoff,
        };
        match self {
            RefPotentialSpec::LjCluster { lj: p } => RefPotentialSpec::LjCluster { lj: lj(p) },
            RefPotentialSpec::PseudoMolecule { bonds, angles, nonbonded } => RefPotentialSpec::PseudoMolecule {
                bonds: bonds.iter().map(|b| Bond { k: b.k * energy_scale, r0: b.r0 * length_scale, ..*b }).collect(),
                angles: angles.iter().map(|a| Angle { k_theta: a.k_theta * energy_scale, ..*a }).collect(),
                nonbonded: lj(nonbonded),
            },
        }
    }

    fn lj(&self) -> &LjParams {
        match self {
            RefPotentialSpec::LjCluster { lj } => lj,
            RefPotentialSpec::PseudoMolecule { nonbonded, .. } => nonbonded,
        }
    }

    /// `(i, j, vector x_j − x_i)` for every unordered LJ pair within cutoff.
    fn lj_pairs(&self, s: &Structure) -> Result<Vec<(usize, usize, Vec3)>> {
        let bonded: Vec<(usize, usize)> = match self {
            RefPotentialSpec::LjCluster { .. } => Vec::new(),
            RefPotentialSpec::PseudoMolecule { bonds, .. } => {
                bonds.iter().map(|b| (b.i.min(b.j), b.i.max(b.j))).collect()
            }
        };
        Ok(neighbor_list(s, self.lj().cutoff)?
            .into_iter()
            .filter(|e| e.src < e.dst && !bonded.contains(&(e.src, e.dst)))
            .map(|e| (e.src, e.dst, e.vector))
            .collect())
    }

    /// Bonded vectors use the minimum image as well.
    fn displacement(&self, s: &Structure, i: usize, j: usize) -> Vec3 {
        minimum_image(s, i, j)
    }
}

fn check_overlap(s: &Structure) -> Result<()> {
    let close = neighbor_list(s, MIN_PAIR_DISTANCE)?;
    if let Some(e) = close.first() {
        return Err(Error::Eval(format!(
            "atoms {} and {} overlap ({:.4} Å < {MIN_PAIR_DISTANCE} Å)",
            e.src, e.dst, e.distance
        )));
    }
    Ok(())
}

/// Closed-form energy (eV) and forces (eV/Å).
pub fn eval_ref(spec: &RefPotentialSpec, s: &Structure) -> Result<(f64, Vec<Vec3>)> {
    spec.check_compatible(s)?;
    check_overlap(s)?;
    let mut energy = 0.0;
    let mut forces = vec![[0.0; 3]; s.len()];
    let mut apply = |i: usize, j: usize, fj: Vec3| {
        for k in 0..3 {
            forces[j][k] += fj[k];
            forces[i][k] -= fj[k];
        }
    };

    let lj = *spec.lj();
    let s6 = lj.sigma.powi(6);
    for (i, j, d) in spec.lj_pairs(s)? {
        let r2 = dot(d, d);
        let r = r2.sqrt();
        let sr6 = s6 / (r2 * r2 * r2);
        energy += 4.0 * lj.epsilon * (sr6 * sr6 - sr6);
        let de_dr = 4.0 * lj.epsilon * (-12.0 * sr6 * sr6 + 6.0 * sr6) / r;
        apply(i, j, scale(d, -de_dr / r));
    }

    if let RefPotentialSpec::PseudoMolecule { bonds, angles, .. } = spec {
        for b in bonds {
            let d = spec.displacement(s, b.i, b.j);
            let r = norm(d);
            energy += 0.5 * b.k * (r - b.r0).powi(2);
            apply(b.i, b.j, scale(d, -b.k * (r - b.r0) / r));
        }
        for a in angles {
            let u = spec.displacement(s, a.j, a.i);
            let v = spec.displacement(s, a.j, a.k);
            let (nu, nv) = (norm(u), norm(v));
            let c_raw = dot(u, v) / (nu * nv);
            let c = c_raw.clamp(-COS_CLAMP, COS_CLAMP);
            let theta = c.acos();
            energy += 0.5 * a.k_theta * (theta - a.theta0).powi(2);
            if c != c_raw {
                continue;
            }
            // dE/dc, then dc/du and dc/dv
            let de_dc = a.k_theta * (theta - a.theta0) * (-1.0 / (1.0 - c * c).sqrt());
            let mut gi = [0.0; 3];
            let mut gk = [0.0; 3];
            for m in 0..3 {
                gi[m] = de_dc * (v[m] / (nu * nv) - c * u[m] / (nu * nu));
                gk[m] = de_dc * (u[m] / (nu * nv) - c * v[m] / (nv * nv));
            }
            for m in 0..3 {
                forces[a.i][m] -= gi[m];
                forces[a.k][m] -= gk[m];
                forces[a.j][m] += gi[m] + gk[m];
            }
        }
    }
    Ok((energy, forces))
}

/// Records the potential energy on a tape. `pos` holds `3N` position
/// variables. Pair lists and image shifts are frozen at recording time.
pub fn energy_on_tape(spec: &RefPotentialSpec, s: &Structure, tape: &mut Tape, pos: &[Var]) -> Result<Var> {
    spec.check_compatible(s)?;
    check_overlap(s)?;
    let p = s.positions();
    // displacement variable x_j + shift − x_i, with shift recovered from the frozen geometry
    let disp = |tape: &mut Tape, i: usize, j: usize, d: Vec3| -> [Var; 3] {
        let mut out = [pos[0]; 3];
        for m in 0..3 {
            let shift = d[m] - (p[j][m] - p[i][m]);
            let diff = tape.sub(pos[3 * j + m], pos[3 * i + m]);
            out[m] = if shift == 0.0 { diff } else { tape.shift(diff, shift) };
        }
        out
    };
    let mut terms = Vec::new();

    let lj = *spec.lj();
    for (i, j, d) in spec.lj_pairs(s)? {
        let v = disp(tape, i, j, d);
        let r2 = tape.dot(&v, &v);
        let inv = tape.powf(r2, -3.0);
        let sr6 = tape.scale(inv, lj.sigma.powi(6));
        let sr12 = tape.square(sr6);
        let diff = tape.sub(sr12, sr6);
        terms.push(tape.scale(diff, 4.0 * lj.epsilon));
    }
    if let RefPotentialSpec::PseudoMolecule { bonds, angles, .. } = spec {
        for b in bonds {
            let v = disp(tape, b.i, b.j, spec.displacement(s, b.i, b.j));
            let r2 = tape.dot(&v, &v);
            let r = tape.sqrt(r2);
            let dr = tape.shift(r, -b.r0);
            let sq = tape.square(dr);
            terms.push(tape.scale(sq, 0.5 * b.k));
        }
        for a in angles {
            let u = disp(tape, a.j, a.i, spec.displacement(s, a.j, a.i));
            let v = disp(tape, a.j, a.k, spec.displacement(s, a.j, a.k));
            let uv = tape.dot(&u, &v);
            let uu = tape.dot(&u, &u);
            let vv = tape.dot(&v, &v);
            let den2 = tape.mul(uu, vv);
            let den = tape.sqrt(den2);
            let c = tape.div(uv, den);
            let c = tape.clamp(c, -COS_CLAMP, COS_CLAMP);
            let theta = tape.acos(c);
            let dt = tape.shift(theta, -a.theta0);
            let sq = tape.square(dt);
            terms.push(tape.scale(sq, 0.5 * a.k_theta));
        }
    }
    Ok(tape.sum(&terms))
}

/// Reference potential as a force provider.
#[derive(Clone, Debug)]
pub struct RefForceField(pub RefPotentialSpec);

impl ForceProvider for RefForceField {
    fn compute(&self, s: &Structure) -> Result<ForceOutput> {
        let (e, f) = eval_ref(&self.0, s)?;
        Ok(ForceOutput { energy: Some(e), forces: f })
    }

    fn label(&self) -> String {
        "reference".into()
    }
}

/// Tetrahedral CH4-like geometry with bonds at `r0`.
pub fn pseudo_methane_structure(r0: f64) -> Structure {
    let a = r0 / 3f64.sqrt();
    Structure::molecule(vec![6, 1, 1, 1, 1], vec![[0.0; 3], [a, a, a], [a, -a, -a], [-a, a, -a], [-a, -a, a]])
        .expect("static geometry is valid")
}

/// Pentagonal bipyramid with nearest-neighbor spacing near `r`.
pub fn lj7_structure(r: f64) -> Structure {
    let ring = r / (2.0 * (std::f64::consts::PI / 5.0).sin());
    let h = (r * r - ring * ring).sqrt();
    let mut pos = vec![[0.0, 0.0, h], [0.0, 0.0, -h]];
    for k in 0..5 {
        let phi = 2.0 * std::f64::consts::PI * k as f64 / 5.0;
        pos.push([ring * phi.cos(), ring * phi.sin(), 0.0]);
    }
    Structure::molecule(vec![18; 7], pos).expect("static geometry is valid")
}

/// FIRE relaxation until the largest force component is below `fmax`.
pub fn minimize(spec: &RefPotentialSpec, s: &Structure, fmax: f64, max_steps: usize) -> Result<Structure> {
    let mut x: Vec<Vec3> = s.positions().to_vec();
    let mut v = vec![[0.0; 3]; x.len()];
    let (mut dt, dt_max) = (0.05, 0.5);
    let mut alpha = 0.1;
    let mut n_pos = 0;
    let mut cur = s.clone();
    for _ in 0..max_steps {
        let (_, f) = eval_ref(spec, &cur)?;
        let worst = f.iter().flatten().fold(0.0f64, |m, c| m.max(c.abs()));
        if worst < fmax {
            return Ok(cur);
        }
        let power: f64 = f.iter().zip(&v).map(|(a, b)| dot(*a, *b)).sum();
        let fn_: f64 = f.iter().map(|a| dot(*a, *a)).sum::<f64>().sqrt();
        let vn: f64 = v.iter().map(|a| dot(*a, *a)).sum::<f64>().sqrt();
        if power > 0.0 {
            for (vi, fi) in v.iter_mut().zip(&f) {
                for m in 0..3 {
                    vi[m] = (1.0 - alpha) * vi[m] + alpha * vn * fi[m] / fn_.max(1e-300);
                }
            }
            n_pos += 1;
            if n_pos > 5 {
                dt = (dt * 1.1f64).min(dt_max);
                alpha *= 0.99;
            }
        } else {
            v.iter_mut().for_each(|vi| *vi = [0.0; 3]);
            dt *= 0.5;
            alpha = 0.1;
            n_pos = 0;
        }
        for ((xi, vi), fi) in x.iter_mut().zip(v.iter_mut()).zip(&f) {
            for m in 0..3 {
                vi[m] += dt * fi[m];
                xi[m] += dt * vi[m];
            }
        }
        cur = cur.with_positions(x.clone())?;
    }
    Err(Error::Eval(format!("minimization did not reach fmax {fmax} in {max_steps} steps")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tape_forces(spec: &RefPotentialSpec, s: &Structure) -> (f64, Vec<f64>) {
        let mut t = Tape::new();
        let x = t.inputs(&s.flat_positions());
        let e = energy_on_tape(spec, s, &mut t, &x).unwrap();
        let g = t.gradient(e).unwrap();
        (t.value(e), x.iter().map(|&v| -g.get(v)).collect())
    }

    #[test]
    fn lj_dimer_minimum() {
        let spec = RefPotentialSpec::lj_argon();
        let r = 2f64.powf(1.0 / 6.0) * 3.4;
        let s = Structure::molecule(vec![18, 18], vec![[0.0; 3], [r, 0.0, 0.0]]).unwrap();
        let (e, f) = eval_ref(&spec, &s).unwrap();
        assert!((e + 0.0103).abs() < 1e-15);
        assert!(f.iter().flatten().all(|c| c.abs() < 1e-15));
    }

    #[test]
    fn constructed_molecular_minimum_is_zero() {
        let spec = match RefPotentialSpec::pseudo_methane() {
            RefPotentialSpec::PseudoMolecule { bonds, angles, .. } => RefPotentialSpec::PseudoMolecule {
                bonds,
                angles: angles.into_iter().map(|a| Angle { theta0: (-1.0f64 / 3.0).acos(), ..a }).collect(),
                nonbonded: LjParams { epsilon: 0.005, sigma: 1.0, cutoff: 1.5 },
            },
            _ => unreachable!(),
        };
        let (e, f) = eval_ref(&spec, &pseudo_methane_structure(1.09)).unwrap();
        assert!(e.abs() < 1e-20, "{e}");
        assert!(f.iter().flatten().all(|c| c.abs() < 1e-12));
    }

    #[test]
    fn overlap_is_an_error() {
        let s = Structure::molecule(vec![18, 18], vec![[0.0; 3], [0.05, 0.0, 0.0]]).unwrap();
        assert!(matches!(eval_ref(&RefPotentialSpec::lj_argon(), &s), Err(Error::Eval(_))));
    }

    #[test]
    fn bad_indices_rejected() {
        let s = Structure::molecule(vec![6, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        assert!(eval_ref(&RefPotentialSpec::pseudo_methane(), &s).is_err());
    }

    #[test]
    fn analytic_forces_match_autodiff_lj_cluster() {
        let spec = RefPotentialSpec::lj_argon();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let pos: Vec<Vec3> = (0..5)
                .map(|k| {
                    [k as f64 * 3.6 + rng.random::<f64>() * 0.6, rng.random::<f64>() * 2.0, rng.random::<f64>() * 2.0]
                })
                .collect();
            let s = Structure::molecule(vec![18; 5], pos).unwrap();
            let (e, f) = eval_ref(&spec, &s).unwrap();
            let (et, ft) = tape_forces(&spec, &s);
            assert!((e - et).abs() <= 1e-12 * e.abs().max(1.0));
            for (a, b) in f.iter().flatten().zip(&ft) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn analytic_forces_match_autodiff_molecule() {
        let spec = RefPotentialSpec::pseudo_methane();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let base = pseudo_methane_structure(1.09);
        for _ in 0..20 {
            let pos = base.positions().iter().map(|p| p.map(|c| c + (rng.random::<f64>() - 0.5) * 0.3)).collect();
            let s = base.with_positions(pos).unwrap();
            let (e, f) = eval_ref(&spec, &s).unwrap();
            let (et, ft) = tape_forces(&spec, &s);
            assert!((e - et).abs() <= 1e-12 * e.abs().max(1.0));
            for (a, b) in f.iter().flatten().zip(&ft) {
                assert!((a - b).abs() <= 1e-9 * b.abs().max(1.0), "{a} vs {b}");
            }
        }
    }

    #[test]
    fn fire_finds_lj7_minimum() {
        let spec = RefPotentialSpec::lj_argon();
        let s = minimize(&spec, &lj7_structure(3.8), 1e-6, 20000).unwrap();
        let (e, _) = eval_ref(&spec, &s).unwrap();
        // global LJ7 minimum is -16.505384 ε
        assert!((e / 0.0103 + 16.505384).abs() < 1e-4, "{}", e / 0.0103);
    }

    #[test]
    fn scaled_spec() {
        let spec = RefPotentialSpec::lj_argon().scaled(1.03, 1.0);
        let r = 2f64.powf(1.0 / 6.0) * 3.4;
        let s = Structure::molecule(vec![18, 18], vec![[0.0; 3], [r, 0.0, 0.0]]).unwrap();
        assert!((eval_ref(&spec, &s).unwrap().0 + 0.0103 * 1.03).abs() < 1e-15);
    }
}
