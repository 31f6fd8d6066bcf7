//! Stage-1 surrogate force fields.
//!
//! Every base model is energy-first: a scalar energy is recorded on a
//! tape and forces, Hessian-vector products and dense Hessians all come
//! from differentiating that one scalar.

mod descriptors;
mod train;

pub use descriptors::{compute_descriptors, descriptors_on_tape, AngularTerm, DescriptorKind, DescriptorSpec};
pub use train::train_base;

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{EpochLog, Mlp, TrainHyper, Weights};
use crate::refpes::{self, RefPotentialSpec};
use crate::structure::{BasePrediction, Dataset, ForceOutput, ForceProvider, Structure, Vec3};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    #[default]
    Silu,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaseKind {
    #[default]
    Mlp,
    PerturbedAnalytic,
}

/// Multiplicative distortion of the reference potential.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Perturbation {
    pub epsilon_scale: f64,
    pub sigma_scale: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseModelSpec {
    pub id: String,
    #[serde(default)]
    pub descriptor: DescriptorSpec,
    #[serde(default = "default_hidden")]
    pub hidden: Vec<usize>,
    #[serde(default)]
    pub activation: Activation,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub kind: BaseKind,
    #[serde(default)]
    pub perturbation: Option<Perturbation>,
}

fn default_hidden() -> Vec<usize> {
    vec![24, 24]
}

impl BaseModelSpec {
    pub fn mlp(id: &str, descriptor: DescriptorSpec, hidden: &[usize], seed: u64) -> Self {
        BaseModelSpec {
            id: id.into(),
            descriptor,
            hidden: hidden.to_vec(),
            activation: Activation::Silu,
            seed,
            kind: BaseKind::Mlp,
            perturbation: None,
        }
    }

    pub fn perturbed(id: &str, epsilon_scale: f64, sigma_scale: f64) -> Self {
        BaseModelSpec {
            id: id.into(),
            descriptor: DescriptorSpec::default(),
            hidden: Vec::new(),
            activation: Activation::Silu,
            seed: 0,
            kind: BaseKind::PerturbedAnalytic,
            perturbation: Some(Perturbation { epsilon_scale, sigma_scale }),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.id.is_empty() {
            return Err(Error::Config("base model id is empty".into()));
        }
        match self.kind {
            BaseKind::Mlp => {
                if self.hidden.is_empty() || self.hidden.contains(&0) {
                    return Err(Error::Config(format!("base model '{}' needs non-empty hidden widths", self.id)));
                }
                self.descriptor.validate()
            }
            BaseKind::PerturbedAnalytic => match self.perturbation {
                Some(p) if p.epsilon_scale > 0.0 && p.sigma_scale > 0.0 => Ok(()),
                _ => Err(Error::Config(format!("base model '{}' needs positive perturbation scales", self.id))),
            },
        }
    }
}

/// Eight deliberately diverse members: two descriptor families with two
/// seeds each, a narrow and a wide network, a short cutoff, and a
/// reference potential with energies scaled by 1.03.
pub fn default_suite() -> Vec<BaseModelSpec> {
    let radial = DescriptorSpec::default();
    let angular = DescriptorSpec::radial_angular();
    let short = DescriptorSpec { cutoff: 1.5, ..DescriptorSpec::radial_angular() };
    vec![
        BaseModelSpec::mlp("radial_a", radial.clone(), &[24, 24], 1),
        BaseModelSpec::mlp("radial_b", radial.clone(), &[24, 24], 2),
        BaseModelSpec::mlp("angular_a", angular.clone(), &[24, 24], 1),
        BaseModelSpec::mlp("angular_b", angular.clone(), &[24, 24], 2),
        BaseModelSpec::mlp("narrow", angular.clone(), &[8, 8], 3),
        BaseModelSpec::mlp("wide", radial, &[48, 48], 4),
        BaseModelSpec::mlp("short_cutoff", short, &[24, 24], 5),
        BaseModelSpec::perturbed("perturbed", 1.03, 1.0),
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub hyper: TrainHyper,
    pub n_train: usize,
    pub n_val: usize,
    pub best_epoch: usize,
    pub best_val: f64,
    pub logs: Vec<EpochLog>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseModel {
    pub spec: BaseModelSpec,
    pub params: Vec<f64>,
    /// eV per atom
    pub energy_shift: f64,
    /// eV per atom
    pub energy_scale: f64,
    /// Atomic numbers seen in training; fixes descriptor and one-hot layout.
    pub elements: Vec<u8>,
    pub feat_mean: Vec<f64>,
    pub feat_std: Vec<f64>,
    /// Closed-form potential for the perturbed-analytic kind.
    pub analytic: Option<RefPotentialSpec>,
    pub train_meta: Option<TrainMeta>,
}

/// A recorded energy tape for one structure, reusable for several
/// Hessian-vector products.
pub struct BaseTape {
    tape: Tape,
    pos: Vec<Var>,
    energy: Var,
    forces: Vec<f64>,
}

impl BaseTape {
    pub fn energy(&self) -> f64 {
        self.tape.value(self.energy)
    }

    pub fn forces(&self) -> Vec<Vec3> {
        self.forces.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect()
    }

    pub fn prediction(&self) -> BasePrediction {
        BasePrediction { energy: self.energy(), forces: self.forces() }
    }

    /// `H g` with `H = ∇²E = −∇F`.
    pub fn hvp(&self, g: &[Vec3]) -> Result<Vec<Vec3>> {
        if g.len() * 3 != self.pos.len() {
            return Err(Error::Shape(format!("direction has {} atoms, structure has {}", g.len(), self.pos.len() / 3)));
        }
        let dir: Vec<(Var, f64)> = self.pos.iter().copied().zip(g.iter().flatten().copied()).collect();
        let so = self.tape.hvp(self.energy, &dir)?;
        Ok(so.hvps(&self.pos).chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect())
    }

    /// Dense `3N × 3N` Hessian, row-major.
    pub fn hessian(&self) -> Result<Vec<f64>> {
        let n = self.pos.len();
        let mut h = vec![0.0; n * n];
        for c in 0..n {
            let so = self.tape.hvp(self.energy, &[(self.pos[c], 1.0)])?;
            for (r, v) in so.hvps(&self.pos).into_iter().enumerate() {
                h[r * n + c] = v;
            }
        }
        // symmetrize away rounding
        for r in 0..n {
            for c in r + 1..n {
                let m = 0.5 * (h[r * n + c] + h[c * n + r]);
                h[r * n + c] = m;
                h[c * n + r] = m;
            }
        }
        Ok(h)
    }
}

impl BaseModel {
    pub fn id(&self) -> &str {
        &self.spec.id
    }

    /// Freshly initialized network with identity feature normalization.
    pub fn init(spec: &BaseModelSpec, elements: &[u8]) -> Result<Self> {
        spec.validate()?;
        if spec.kind != BaseKind::Mlp {
            return Err(Error::Config(format!("base model '{}' has no network to initialize", spec.id)));
        }
        let d = spec.descriptor.width(elements.len());
        let mut m = BaseModel {
            spec: spec.clone(),
            params: Vec::new(),
            energy_shift: 0.0,
            energy_scale: 1.0,
            elements: elements.to_vec(),
            feat_mean: vec![0.0; d],
            feat_std: vec![1.0; d],
            analytic: None,
            train_meta: None,
        };
        m.mlp().init(&mut m.params, 1.0, &mut ChaCha8Rng::seed_from_u64(spec.seed));
        Ok(m)
    }

    pub(crate) fn mlp(&self) -> Mlp {
        Mlp::new(self.spec.descriptor.width(self.elements.len()) + self.elements.len(), &self.spec.hidden, 1)
    }

    /// Records the total energy on `tape`; `pos` holds `3N` position variables.
    pub fn energy_on_tape(&self, s: &Structure, tape: &mut Tape, pos: &[Var]) -> Result<Var> {
        match self.spec.kind {
            BaseKind::PerturbedAnalytic => {
                let a = self
                    .analytic
                    .as_ref()
                    .ok_or_else(|| Error::Checkpoint(format!("analytic model '{}' has no potential", self.id())))?;
                refpes::energy_on_tape(a, s, tape, pos)
            }
            BaseKind::Mlp => {
                if let Some(d) = s.min_pair_distance() {
                    if d < refpes::MIN_PAIR_DISTANCE {
                        return Err(Error::Eval(format!(
                            "atoms closer than {} Å ({d:.4} Å)",
                            refpes::MIN_PAIR_DISTANCE
                        )));
                    }
                }
                let desc = descriptors_on_tape(&self.spec.descriptor, &self.elements, s, tape, pos)?;
                let mlp = self.mlp();
                let mut atoms = Vec::with_capacity(s.len());
                for (i, d) in desc.into_iter().enumerate() {
                    let mut x: Vec<Var> = d
                        .into_iter()
                        .enumerate()
                        .map(|(k, v)| {
                            let c = tape.shift(v, -self.feat_mean[k]);
                            tape.scale(c, 1.0 / self.feat_std[k])
                        })
                        .collect();
                    let z = s.species()[i];
                    for &e in &self.elements {
                        x.push(tape.constant(if e == z { 1.0 } else { 0.0 }));
                    }
                    debug_assert_eq!(x.len(), mlp.sizes[0]);
                    let o = mlp.forward(tape, Weights::Const(&self.params), 0, &x)[0];
                    let scaled = tape.scale(o, self.energy_scale);
                    atoms.push(tape.shift(scaled, self.energy_shift));
                }
                Ok(tape.sum(&atoms))
            }
        }
    }

    pub fn record(&self, s: &Structure) -> Result<BaseTape> {
        let mut tape = Tape::new();
        let pos = tape.inputs(&s.flat_positions());
        let energy = self.energy_on_tape(s, &mut tape, &pos)?;
        let adj = tape.gradient(energy)?;
        let forces = adj.collect(&pos).into_iter().map(|g| -g).collect();
        Ok(BaseTape { tape, pos, energy, forces })
    }

    pub fn predict(&self, s: &Structure) -> Result<BasePrediction> {
        Ok(self.record(s)?.prediction())
    }

    pub fn hessian(&self, s: &Structure) -> Result<Vec<f64>> {
        self.record(s)?.hessian()
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Checkpoint { format_version: CHECKPOINT_VERSION, model_type: "base".into(), model: self.clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Checkpoint<BaseModel> = serde_json::from_str(text)?;
        doc.check("base")?;
        if doc.model.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint(format!("model '{}' has non-finite parameters", doc.model.id())));
        }
        Ok(doc.model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Versioned checkpoint envelope shared by every model type.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Checkpoint<T> {
    pub format_version: u32,
    pub model_type: String,
    #[serde(flatten)]
    pub model: T,
}

impl<T> Checkpoint<T> {
    pub fn check(&self, model_type: &str) -> Result<()> {
        if self.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format_version {} (expected {CHECKPOINT_VERSION})",
                self.format_version
            )));
        }
        if self.model_type != model_type {
            return Err(Error::Checkpoint(format!(
                "expected a '{model_type}' checkpoint, found '{}'",
                self.model_type
            )));
        }
        Ok(())
    }
}

pub fn predict_base(m: &BaseModel, s: &Structure) -> Result<BasePrediction> {
    m.predict(s)
}

/// `gᵀ Hᵢ` with `Hᵢ = −∇ₓFᵢ`; the Hessian is symmetric so this is also `Hᵢ g`.
pub fn base_force_hvp(m: &BaseModel, s: &Structure, g: &[Vec3]) -> Result<Vec<Vec3>> {
    m.record(s)?.hvp(g)
}

impl ForceProvider for BaseModel {
    fn compute(&self, s: &Structure) -> Result<ForceOutput> {
        let p = self.predict(s)?;
        Ok(ForceOutput { energy: Some(p.energy), forces: p.forces })
    }

    fn label(&self) -> String {
        self.spec.id.clone()
    }
}

/// Trains every spec independently on up to `jobs` threads. Results keep
/// the order of `specs`.
pub fn build_ensemble(
    specs: &[BaseModelSpec],
    train: &Dataset,
    val: &Dataset,
    hyper: &TrainHyper,
    reference: Option<&RefPotentialSpec>,
    jobs: usize,
) -> Result<Vec<BaseModel>> {
    for (k, s) in specs.iter().enumerate() {
        if specs[..k].iter().any(|o| o.id == s.id) {
            return Err(Error::Config(format!("duplicate base model id '{}'", s.id)));
        }
        s.validate()?;
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    pool.install(|| {
        specs
            .par_iter()
            .map(|s| {
                let h = TrainHyper { seed: s.seed, ..hyper.clone() };
                log::info!("training base model '{}'", s.id);
                train_base(s, train, val, &h, reference)
            })
            .collect()
    })
}

/// Predictions of every model for every structure, `[structure][model]`.
pub fn predict_all(models: &[BaseModel], structures: &[&Structure]) -> Result<Vec<Vec<BasePrediction>>> {
    structures.par_iter().map(|s| models.iter().map(|m| m.predict(s)).collect::<Result<Vec<_>>>()).collect()
}

#[cfg(test)]
mod tests;
