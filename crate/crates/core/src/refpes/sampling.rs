use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mdsim::{run_md, Ensemble, MdConfig};
use crate::structure::{symbol_to_z, Dataset, LabeledStructure, Structure, Vec3};

use super::{eval_ref, lj7_structure, minimize, pseudo_methane_structure, RefForceField, RefPotentialSpec};

/// Explicit starting geometry for sampling.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitStructure {
    pub symbols: Vec<String>,
    pub positions: Vec<Vec3>,
}

impl InitStructure {
    pub fn to_structure(&self) -> Result<Structure> {
        let species = self
            .symbols
            .iter()
            .map(|s| symbol_to_z(s).ok_or_else(|| Error::Config(format!("unknown element symbol '{s}'"))))
            .collect::<Result<Vec<_>>>()?;
        Structure::molecule(species, self.positions.clone())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SamplerSpec {
    /// K
    pub temperature: f64,
    /// fs
    pub timestep: f64,
    pub n_frames: usize,
    pub stride: usize,
    pub seed: u64,
    /// Langevin friction, fs⁻¹.
    pub friction: f64,
    /// Starting geometry; defaults to the relaxed geometry of the potential.
    pub init: Option<InitStructure>,
}

impl Default for SamplerSpec {
    fn default() -> Self {
        SamplerSpec {
            temperature: 300.0,
            timestep: 0.5,
            n_frames: 2222,
            stride: 50,
            seed: 1,
            friction: 0.01,
            init: None,
        }
    }
}

impl SamplerSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!("sampler.temperature must be positive, got {}", self.temperature)));
        }
        if !(self.timestep > 0.0 && self.timestep <= 5.0) {
            return Err(Error::Config(format!("sampler.timestep must lie in (0, 5] fs, got {}", self.timestep)));
        }
        if self.stride == 0 {
            return Err(Error::Config("sampler.stride must be at least 1".into()));
        }
        if self.n_frames == 0 {
            return Err(Error::Config("sampler.n_frames must be at least 1".into()));
        }
        if !(self.friction > 0.0) {
            return Err(Error::Config(format!("sampler.friction must be positive, got {}", self.friction)));
        }
        Ok(())
    }
}

/// Relaxed default geometry for a reference potential.
pub fn default_init(spec: &RefPotentialSpec) -> Result<Structure> {
    let guess = match spec {
        RefPotentialSpec::LjCluster { .. } => lj7_structure(3.8),
        RefPotentialSpec::PseudoMolecule { .. } => pseudo_methane_structure(1.09),
    };
    minimize(spec, &guess, 1e-8, 100_000)
}

fn recentred(s: &Structure) -> Result<Structure> {
    let com = s.center_of_mass()?;
    s.with_positions(s.positions().iter().map(|p| [p[0] - com[0], p[1] - com[1], p[2] - com[2]]).collect())
}

/// Langevin sampling under the reference potential; one labeled frame
/// every `stride` steps, recentred on the center of mass.
pub fn generate_dataset(p: &RefPotentialSpec, smp: &SamplerSpec) -> Result<Dataset> {
    smp.validate()?;
    p.validate()?;
    let init = match &smp.init {
        Some(i) => i.to_structure()?,
        None => default_init(p)?,
    };
    p.check_compatible(&init)?;
    let cfg = MdConfig {
        timestep: smp.timestep,
        n_steps: smp.n_frames * smp.stride,
        ensemble: Ensemble::Langevin { temperature: smp.temperature, friction: smp.friction },
        record_stride: smp.stride,
        seed: smp.seed,
        ..Default::default()
    };
    let traj = run_md(&RefForceField(p.clone()), &init, &cfg)?;
    if let Some(step) = traj.exploded {
        return Err(Error::Generation {
            step,
            msg: "force magnitude exceeded 1e3 eV/Å or state became non-finite".into(),
        });
    }

    let start = recentred(&init)?;
    let mut half = [0.0f64; 3];
    for k in 0..3 {
        let (lo, hi) =
            start.positions().iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), x| (a.min(x[k]), b.max(x[k])));
        // flat or single-atom boxes still get a finite allowance
        half[k] = (0.5 * (hi - lo)).max(0.5);
    }

    let mut items = Vec::with_capacity(smp.n_frames);
    for f in traj.frames.iter().skip(1) {
        let s = recentred(&init.with_positions(f.positions.clone())?)?;
        if let Some(x) = s.positions().iter().find(|x| (0..3).any(|k| x[k].abs() > 3.0 * half[k])) {
            return Err(Error::Generation {
                step: f.step,
                msg: format!("atom at {x:?} left 3x the initial bounding box"),
            });
        }
        let (e, forces) = eval_ref(p, &s)?;
        items.push(LabeledStructure::new(s, e, forces)?);
    }
    let name = match p {
        RefPotentialSpec::LjCluster { .. } => "lj_cluster",
        RefPotentialSpec::PseudoMolecule { .. } => "pseudo_molecule",
    };
    Ok(Dataset::new(name, items))
}
