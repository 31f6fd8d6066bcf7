use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::neighbors::minimum_image;
use crate::refpes::{minimize, RefPotentialSpec};
use crate::structure::{covalent_radius, norm, Structure};

use super::Trajectory;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bond {
    pub i: usize,
    pub j: usize,
    /// Equilibrium length, Å.
    pub length: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BondSet {
    pub bonds: Vec<Bond>,
}

/// How bonds are perceived when a potential does not list them.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BondRule {
    /// Pairs closer than `factor × (r_cov,i + r_cov,j)` are bonded.
    pub factor: f64,
}

impl Default for BondRule {
    fn default() -> Self {
        BondRule { factor: 1.3 }
    }
}

fn distance_rule(s: &Structure, rule: &BondRule) -> Result<Vec<Bond>> {
    let mut out = Vec::new();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            let radius = |k: usize| {
                let z = s.species()[k];
                covalent_radius(z).ok_or_else(|| Error::Bonds(format!("no covalent radius for Z={z}")))
            };
            let d = norm(minimum_image(s, i, j));
            if d < rule.factor * (radius(i)? + radius(j)?) {
                out.push(Bond { i, j, length: d });
            }
        }
    }
    Ok(out)
}

/// Bonds listed by a molecular potential, otherwise the distance rule
/// applied to the structure relaxed under `reference` (or to `s` itself
/// when no potential is given).
pub fn detect_bonds(s: &Structure, reference: Option<&RefPotentialSpec>, rule: &BondRule) -> Result<BondSet> {
    let bonds = match reference {
        Some(RefPotentialSpec::PseudoMolecule { bonds, .. }) => {
            bonds.iter().map(|b| Bond { i: b.i.min(b.j), j: b.i.max(b.j), length: b.r0 }).collect()
        }
        Some(spec) => distance_rule(&minimize(spec, s, 1e-6, 50_000)?, rule)?,
        None => distance_rule(s, rule)?,
    };
    if bonds.is_empty() {
        return Err(Error::Bonds("no bonds found; stability is undefined".into()));
    }
    Ok(BondSet { bonds })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StabilityResult {
    pub stable: bool,
    pub first_violation_step: Option<usize>,
}

/// A run is unstable if any recorded frame has a bond deviating from its
/// equilibrium length by strictly more than `delta`, or if it blew up.
pub fn check_stability(t: &Trajectory, b: &BondSet, delta: f64) -> StabilityResult {
    for f in &t.frames {
        let s = t.template.with_positions(f.positions.clone());
        let violated = match &s {
            Ok(s) => b.bonds.iter().any(|bd| (norm(minimum_image(s, bd.i, bd.j)) - bd.length).abs() > delta),
            Err(_) => true,
        };
        if violated {
            return StabilityResult { stable: false, first_violation_step: Some(f.step) };
        }
    }
    match t.exploded {
        Some(k) => StabilityResult { stable: false, first_violation_step: Some(k) },
        None => StabilityResult { stable: true, first_violation_step: None },
    }
}

pub fn stability_percentage(runs: &[StabilityResult]) -> f64 {
    if runs.is_empty() {
        return 0.0;
    }
    100.0 * runs.iter().filter(|r| r.stable).count() as f64 / runs.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabilityReport {
    pub runs: usize,
    pub stable_pct: f64,
    pub per_run: Vec<StabilityResult>,
}

impl StabilityReport {
    pub fn new(per_run: Vec<StabilityResult>) -> Self {
        StabilityReport { runs: per_run.len(), stable_pct: stability_percentage(&per_run), per_run }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mdsim::TrajFrame;
    use crate::refpes::{lj7_structure, pseudo_methane_structure};

    fn traj(template: &Structure, frames: Vec<Vec<[f64; 3]>>) -> Trajectory {
        Trajectory {
            template: template.clone(),
            frames: frames
                .into_iter()
                .enumerate()
                .map(|(k, p)| TrajFrame {
                    step: k,
                    time: k as f64,
                    velocities: vec![[0.0; 3]; p.len()],
                    forces: vec![[0.0; 3]; p.len()],
                    positions: p,
                    epot: None,
                    ekin: 0.0,
                })
                .collect(),
            exploded: None,
        }
    }

    fn dimer_frames(lengths: &[f64]) -> (Structure, Trajectory) {
        let s = Structure::molecule(vec![1, 1], vec![[0.0; 3], [1.0, 0.0, 0.0]]).unwrap();
        let t = traj(&s, lengths.iter().map(|&l| vec![[0.0; 3], [l, 0.0, 0.0]]).collect());
        (s, t)
    }

    fn one_bond(length: f64) -> BondSet {
        BondSet { bonds: vec![Bond { i: 0, j: 1, length }] }
    }

    #[test]
    fn methane_bonds_from_spec() {
        let b = detect_bonds(
            &pseudo_methane_structure(1.09),
            Some(&RefPotentialSpec::pseudo_methane()),
            &BondRule::default(),
        )
        .unwrap();
        assert_eq!(b.bonds.len(), 4);
        assert!(b.bonds.iter().all(|b| b.length == 1.09 && b.i < b.j));
    }

    #[test]
    fn distant_helium_has_no_bonds() {
        let s = Structure::molecule(vec![2, 2], vec![[0.0; 3], [10.0, 0.0, 0.0]]).unwrap();
        assert!(matches!(detect_bonds(&s, None, &BondRule::default()), Err(Error::Bonds(_))));
    }

    #[test]
    fn lj7_distance_rule_matches_brute_force() {
        let spec = RefPotentialSpec::lj_argon();
        let rule = BondRule { factor: 1.9 };
        let got = detect_bonds(&lj7_structure(3.8), Some(&spec), &rule).unwrap();
        let relaxed = minimize(&spec, &lj7_structure(3.8), 1e-6, 50_000).unwrap();
        let p = relaxed.positions();
        let cut = 1.9 * 2.0 * covalent_radius(18).unwrap();
        let mut want = Vec::new();
        for i in 0..7 {
            for j in 0..7 {
                let d =
                    ((p[i][0] - p[j][0]).powi(2) + (p[i][1] - p[j][1]).powi(2) + (p[i][2] - p[j][2]).powi(2)).sqrt();
                if i < j && d < cut {
                    want.push((i, j, d));
                }
            }
        }
        let got: Vec<(usize, usize, f64)> = got.bonds.iter().map(|b| (b.i, b.j, b.length)).collect();
        assert!(!got.is_empty());
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert_eq!((a.0, a.1), (b.0, b.1));
            assert!((a.2 - b.2).abs() < 1e-12);
        }
    }

    #[test]
    fn static_equilibrium_is_stable() {
        let (_, t) = dimer_frames(&[1.0; 10]);
        assert_eq!(
            check_stability(&t, &one_bond(1.0), 0.5),
            StabilityResult { stable: true, first_violation_step: None }
        );
    }

    #[test]
    fn stretched_bond_flags_first_step() {
        let mut l = vec![1.0; 10];
        l[5] = 1.6;
        l[7] = 1.7;
        let (_, t) = dimer_frames(&l);
        assert_eq!(
            check_stability(&t, &one_bond(1.0), 0.5),
            StabilityResult { stable: false, first_violation_step: Some(5) }
        );
    }

    #[test]
    fn deviation_exactly_delta_is_stable() {
        let (_, t) = dimer_frames(&[1.0, 1.5, 0.5]);
        assert!(check_stability(&t, &one_bond(1.0), 0.5).stable);
    }

    #[test]
    fn exploded_run_is_unstable() {
        let (_, mut t) = dimer_frames(&[1.0; 3]);
        t.exploded = Some(3);
        assert_eq!(check_stability(&t, &one_bond(1.0), 0.5).first_violation_step, Some(3));
    }

    #[test]
    fn monotone_in_delta() {
        let (_, t) = dimer_frames(&[1.0, 1.3, 0.8, 1.45]);
        let deltas = [0.1, 0.2, 0.3, 0.44, 0.45, 0.5, 1.0];
        let flags: Vec<bool> = deltas.iter().map(|&d| check_stability(&t, &one_bond(1.0), d).stable).collect();
        assert!(flags.windows(2).all(|w| !w[0] || w[1]));
    }

    #[test]
    fn percentages() {
        let s = StabilityResult { stable: true, first_violation_step: None };
        let u = StabilityResult { stable: false, first_violation_step: Some(1) };
        assert_eq!(stability_percentage(&vec![s; 10]), 100.0);
        assert_eq!(stability_percentage(&vec![u; 10]), 0.0);
        let mut runs = vec![s; 17];
        runs.extend(vec![u; 83]);
        assert_eq!(stability_percentage(&runs), 17.0);
    }
}
