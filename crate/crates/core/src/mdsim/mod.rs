//! Molecular dynamics and trajectory-level checks.

mod hr;
mod stability;

pub use hr::{compute_hr, mae_hr, HrHistogram};
pub use stability::{
    check_stability, detect_bonds, stability_percentage, Bond, BondRule, BondSet, StabilityReport, StabilityResult,
};

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::extxyz::write_frame;
use crate::structure::{atomic_mass, dot, norm, symbol_to_z, ForceProvider, Structure, Vec3};
use crate::units::{ACCEL, KB, MVV_TO_EV};

/// Per-atom force magnitude (eV/Å) treated as a blow-up.
pub const MAX_FORCE: f64 = 1e3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Ensemble {
    Nve,
    /// Temperature in K, friction in fs⁻¹.
    Langevin {
        temperature: f64,
        friction: f64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdConfig {
    /// fs
    pub timestep: f64,
    pub n_steps: usize,
    pub ensemble: Ensemble,
    pub record_stride: usize,
    pub seed: u64,
    /// Mass overrides in amu keyed by element symbol.
    pub masses: BTreeMap<String, f64>,
    /// Maxwell-Boltzmann initialization temperature for NVE runs (K).
    pub init_temperature: Option<f64>,
}

impl Default for MdConfig {
    fn default() -> Self {
        MdConfig {
            timestep: 0.5,
            n_steps: 1000,
            ensemble: Ensemble::Langevin { temperature: 300.0, friction: 0.01 },
            record_stride: 10,
            seed: 0,
            masses: BTreeMap::new(),
            init_temperature: None,
        }
    }
}

impl MdConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.timestep > 0.0 && self.timestep <= 5.0) {
            return Err(Error::Config(format!("md timestep must lie in (0, 5] fs, got {}", self.timestep)));
        }
        if self.n_steps == 0 {
            return Err(Error::Config("md n_steps must be at least 1".into()));
        }
        if self.record_stride == 0 {
            return Err(Error::Config("md record_stride must be at least 1".into()));
        }
        if let Ensemble::Langevin { temperature, friction } = self.ensemble {
            if !(temperature > 0.0) {
                return Err(Error::Config(format!("langevin temperature must be positive, got {temperature}")));
            }
            if !(friction >= 0.0) {
                return Err(Error::Config(format!("langevin friction must be non-negative, got {friction}")));
            }
        }
        if let Some(t) = self.init_temperature {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("md init_temperature must be non-negative, got {t}")));
            }
        }
        for (sym, &m) in &self.masses {
            if symbol_to_z(sym).is_none() || !(m > 0.0) {
                return Err(Error::Config(format!("invalid mass override {sym} = {m}")));
            }
        }
        Ok(())
    }

    pub fn masses_for(&self, s: &Structure) -> Result<Vec<f64>> {
        let overrides: BTreeMap<u8, f64> =
            self.masses.iter().filter_map(|(k, &v)| symbol_to_z(k).map(|z| (z, v))).collect();
        s.species()
            .iter()
            .map(|&z| {
                overrides
                    .get(&z)
                    .copied()
                    .or_else(|| atomic_mass(z))
                    .ok_or_else(|| Error::Structure(format!("no mass for Z={z}")))
            })
            .collect()
    }

    fn start_temperature(&self) -> Option<f64> {
        match self.ensemble {
            Ensemble::Langevin { temperature, .. } => Some(temperature),
            Ensemble::Nve => self.init_temperature,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrajFrame {
    pub step: usize,
    /// fs
    pub time: f64,
    pub positions: Vec<Vec3>,
    /// Å/fs
    pub velocities: Vec<Vec3>,
    pub forces: Vec<Vec3>,
    /// eV; `None` for force-only models.
    pub epot: Option<f64>,
    /// eV
    pub ekin: f64,
}

impl TrajFrame {
    pub fn total_energy(&self) -> Option<f64> {
        self.epot.map(|e| e + self.ekin)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    pub template: Structure,
    pub frames: Vec<TrajFrame>,
    /// Step at which integration stopped on a blow-up.
    pub exploded: Option<usize>,
}

impl Trajectory {
    pub fn structures(&self) -> Result<Vec<Structure>> {
        self.frames.iter().map(|f| self.template.with_positions(f.positions.clone())).collect()
    }

    /// `max_t |E(t) − E(0)| / N` using the model's own energy.
    pub fn energy_drift_per_atom(&self) -> Option<f64> {
        let e0 = self.frames.first()?.total_energy()?;
        let mut worst: f64 = 0.0;
        for f in &self.frames {
            worst = worst.max((f.total_energy()? - e0).abs());
        }
        Some(worst / self.template.len() as f64)
    }

    /// Same drift measured with an external potential in place of the
    /// model energy.
    pub fn energy_drift_with(&self, epot: impl Fn(&Structure) -> Result<f64>) -> Result<f64> {
        let mut e0 = None;
        let mut worst: f64 = 0.0;
        for f in &self.frames {
            let e = epot(&self.template.with_positions(f.positions.clone())?)? + f.ekin;
            let base = *e0.get_or_insert(e);
            worst = worst.max((e - base).abs());
        }
        Ok(worst / self.template.len() as f64)
    }

    /// Extended-XYZ dump with `time_fs`, `epot_eV`, `ekin_eV` header keys.
    pub fn to_extxyz(&self) -> Result<String> {
        let mut out = String::new();
        for f in &self.frames {
            let s = self.template.with_positions(f.positions.clone())?;
            let extra = [
                ("time_fs", format!("{:.16e}", f.time)),
                ("epot_eV", f.epot.map_or("nan".to_string(), |e| format!("{e:.16e}"))),
                ("ekin_eV", format!("{:.16e}", f.ekin)),
                ("step", f.step.to_string()),
            ];
            write_frame(&mut out, &s, f.epot.unwrap_or(0.0), &f.forces, &extra);
        }
        Ok(out)
    }
}

pub fn kinetic_energy(v: &[Vec3], masses: &[f64]) -> f64 {
    0.5 * MVV_TO_EV * v.iter().zip(masses).map(|(v, m)| m * dot(*v, *v)).sum::<f64>()
}

/// Maxwell-Boltzmann velocities at `t` K with zero total momentum.
pub fn maxwell_boltzmann(masses: &[f64], t: f64, rng: &mut ChaCha8Rng) -> Vec<Vec3> {
    let mut v: Vec<Vec3> = masses
        .iter()
        .map(|&m| {
            let sd = (KB * t * ACCEL / m).sqrt();
            [0; 3].map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                sd * z
            })
        })
        .collect();
    if masses.len() > 1 {
        let total: f64 = masses.iter().sum();
        let mut p = [0.0; 3];
        for (vi, m) in v.iter().zip(masses) {
            for k in 0..3 {
                p[k] += m * vi[k];
            }
        }
        for vi in v.iter_mut() {
            for k in 0..3 {
                vi[k] -= p[k] / total;
            }
        }
    }
    v
}

enum Step {
    Ok(Vec<Vec3>, Option<f64>),
    Exploded,
}

fn forces_at(ff: &dyn ForceProvider, s: &Structure) -> Result<Step> {
    match ff.compute(s) {
        Ok(out) => {
            let bad = out.forces.iter().any(|f| !f.iter().all(|c| c.is_finite()) || norm(*f) > MAX_FORCE)
                || out.energy.is_some_and(|e| !e.is_finite());
            Ok(if bad { Step::Exploded } else { Step::Ok(out.forces, out.energy) })
        }
        Err(e) if e.is_numerical() => Ok(Step::Exploded),
        Err(e) => Err(e),
    }
}

pub fn run_md(ff: &dyn ForceProvider, init: &Structure, cfg: &MdConfig) -> Result<Trajectory> {
    run_md_with_velocities(ff, init, None, cfg)
}

/// Velocity Verlet (NVE) or BAOAB Langevin. Initial velocities are taken
/// from `velocities` when given, otherwise Maxwell-Boltzmann at the
/// configured temperature (zero for NVE without `init_temperature`).
pub fn run_md_with_velocities(
    ff: &dyn ForceProvider,
    init: &Structure,
    velocities: Option<Vec<Vec3>>,
    cfg: &MdConfig,
) -> Result<Trajectory> {
    cfg.validate()?;
    let n = init.len();
    let masses = cfg.masses_for(init)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut v = match velocities {
        Some(v) if v.len() != n => return Err(Error::Shape(format!("{} velocities for {n} atoms", v.len()))),
        Some(v) => v,
        None => match cfg.start_temperature() {
            Some(t) if t > 0.0 => maxwell_boltzmann(&masses, t, &mut rng),
            _ => vec![[0.0; 3]; n],
        },
    };
    let mut x = init.positions().to_vec();
    let dt = cfg.timestep;
    let mut traj = Trajectory { template: init.clone(), frames: Vec::new(), exploded: None };

    let (mut f, mut epot) = match forces_at(ff, init)? {
        Step::Ok(f, e) => (f, e),
        Step::Exploded => {
            traj.exploded = Some(0);
            return Ok(traj);
        }
    };
    let record = |traj: &mut Trajectory, step: usize, x: &[Vec3], v: &[Vec3], f: &[Vec3], epot: Option<f64>| {
        traj.frames.push(TrajFrame {
            step,
            time: step as f64 * dt,
            positions: x.to_vec(),
            velocities: v.to_vec(),
            forces: f.to_vec(),
            epot,
            ekin: kinetic_energy(v, &masses),
        });
    };
    record(&mut traj, 0, &x, &v, &f, epot);

    let inv_m: Vec<f64> = masses.iter().map(|m| ACCEL / m).collect();
    let ou = match cfg.ensemble {
        Ensemble::Langevin { temperature, friction } => {
            let c1 = (-friction * dt).exp();
            let c2 = (1.0 - c1 * c1).sqrt();
            let sd: Vec<f64> = masses.iter().map(|m| c2 * (KB * temperature * ACCEL / m).sqrt()).collect();
            Some((c1, sd))
        }
        Ensemble::Nve => None,
    };
    let drift = |x: &mut [Vec3], v: &[Vec3], h: f64| {
        for (xi, vi) in x.iter_mut().zip(v) {
            for k in 0..3 {
                xi[k] += h * vi[k];
            }
        }
    };
    let kick = |v: &mut [Vec3], f: &[Vec3], h: f64| {
        for ((vi, fi), a) in v.iter_mut().zip(f).zip(&inv_m) {
            for k in 0..3 {
                vi[k] += h * a * fi[k];
            }
        }
    };

    for step in 1..=cfg.n_steps {
        kick(&mut v, &f, 0.5 * dt);
        match &ou {
            None => drift(&mut x, &v, dt),
            Some((c1, sd)) => {
                drift(&mut x, &v, 0.5 * dt);
                for (vi, s) in v.iter_mut().zip(sd) {
                    for k in 0..3 {
                        let xi: f64 = StandardNormal.sample(&mut rng);
                        vi[k] = c1 * vi[k] + s * xi;
                    }
                }
                drift(&mut x, &v, 0.5 * dt);
            }
        }
        if x.iter().flatten().any(|c| !c.is_finite()) {
            traj.exploded = Some(step);
            return Ok(traj);
        }
        match forces_at(ff, &init.with_positions(x.clone())?)? {
            Step::Ok(nf, ne) => {
                f = nf;
                epot = ne;
            }
            Step::Exploded => {
                traj.exploded = Some(step);
                return Ok(traj);
            }
        }
        kick(&mut v, &f, 0.5 * dt);
        if step % cfg.record_stride == 0 {
            record(&mut traj, step, &x, &v, &f, epot);
        }
    }
    Ok(traj)
}

/// Independent replicas from the same start, replica `r` seeded with
/// `cfg.seed + r`. Runs in parallel on the current rayon pool.
pub fn run_replicas(
    ff: &dyn ForceProvider,
    init: &Structure,
    cfg: &MdConfig,
    replicas: usize,
) -> Result<Vec<Trajectory>> {
    use rayon::prelude::*;
    (0..replicas as u64)
        .into_par_iter()
        .map(|r| run_md(ff, init, &MdConfig { seed: cfg.seed.wrapping_add(r), ..cfg.clone() }))
        .collect()
}
