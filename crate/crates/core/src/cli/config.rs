use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::basemodels::{default_suite, Activation, BaseModelSpec};
use crate::error::{Error, Result};
use crate::graph::GraphSpec;
use crate::mdsim::{BondRule, Ensemble, MdConfig};
use crate::meta_conserv::{ConservMode, ConservSpec};
use crate::meta_direct::{DirectSpec, JumpingKnowledge};
use crate::metrics::{validate_regions, MetaSpec, DEFAULT_PARITY_REGIONS};
use crate::nn::TrainHyper;
use crate::refpes::{RefPotentialSpec, SamplerSpec};
use crate::split::SplitSpec;

/// Environment variable that overrides `paths.workdir`.
pub const WORKDIR_ENV: &str = "FFSTACK_WORKDIR";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub ref_pes: RefPotentialSpec,
    pub sampler: SamplerSpec,
    pub split: SplitSpec,
    pub bases: Vec<BaseModelSpec>,
    pub base_training: TrainHyper,
    pub graph: GraphSpec,
    pub meta_direct: DirectSection,
    pub meta_conserv: ConservSection,
    pub md: MdSection,
    pub metrics: MetricsSection,
    pub paths: Paths,
    /// Worker threads for ensemble training, evaluation, replicas and scans.
    pub jobs: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            ref_pes: RefPotentialSpec::pseudo_methane(),
            sampler: SamplerSpec::default(),
            split: SplitSpec::default(),
            bases: default_suite(),
            base_training: TrainHyper::default(),
            graph: GraphSpec::default(),
            meta_direct: DirectSection::default(),
            meta_conserv: ConservSection::default(),
            md: MdSection::default(),
            metrics: MetricsSection::default(),
            paths: Paths::default(),
            jobs: 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectSection {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub activation: Activation,
    pub jk: JumpingKnowledge,
    pub training: TrainHyper,
}

impl Default for DirectSection {
    fn default() -> Self {
        let d = DirectSpec::default();
        DirectSection {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            head_hidden: d.head_hidden,
            activation: d.activation,
            jk: d.jk,
            training: TrainHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConservSection {
    pub layers: usize,
    pub hidden: usize,
    pub n_rbf: usize,
    /// Å
    pub cutoff: f64,
    pub mode: ConservMode,
    pub energy_embed_dim: usize,
    pub training: TrainHyper,
}

impl Default for ConservSection {
    fn default() -> Self {
        let c = ConservSpec::default();
        ConservSection {
            layers: c.layers,
            hidden: c.hidden,
            n_rbf: c.n_rbf,
            cutoff: c.cutoff,
            mode: c.mode,
            energy_embed_dim: c.energy_embed_dim,
            training: TrainHyper::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MdSection {
    pub run: MdConfig,
    pub replicas: usize,
    /// Å
    pub stability_delta: f64,
    pub bond_rule: BondRule,
    /// Å
    pub hr_r_max: f64,
    pub hr_bins: usize,
}

impl Default for MdSection {
    fn default() -> Self {
        MdSection {
            run: MdConfig {
                n_steps: 100_000,
                record_stride: 100,
                ensemble: Ensemble::Langevin { temperature: 300.0, friction: 0.01 },
                ..MdConfig::default()
            },
            replicas: 10,
            stability_delta: 0.5,
            bond_rule: BondRule::default(),
            hr_r_max: 6.0,
            hr_bins: 60,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScanMeta {
    #[default]
    Direct,
    Conserv,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SubsetScanSection {
    pub meta: ScanMeta,
    /// Falls back to the chosen meta-model's training section.
    pub training: Option<TrainHyper>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MetricsSection {
    /// eV/Å
    pub parity_regions: Vec<(f64, f64)>,
    pub subset_scan: SubsetScanSection,
}

impl Default for MetricsSection {
    fn default() -> Self {
        MetricsSection { parity_regions: DEFAULT_PARITY_REGIONS.to_vec(), subset_scan: SubsetScanSection::default() }
    }
}

/// Relative paths below `workdir` for `dataset` and `checkpoints`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub workdir: PathBuf,
    pub dataset: PathBuf,
    pub checkpoints: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Paths { workdir: "ffstack_run".into(), dataset: "dataset.extxyz".into(), checkpoints: "checkpoints".into() }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).map_err(|e| Error::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.ref_pes.validate()?;
        self.sampler.validate()?;
        self.split.validate()?;
        if self.bases.is_empty() {
            return Err(Error::Config("bases must list at least one model".into()));
        }
        for (k, b) in self.bases.iter().enumerate() {
            b.validate()?;
            if self.bases[..k].iter().any(|o| o.id == b.id) {
                return Err(Error::Config(format!("bases: duplicate id '{}'", b.id)));
            }
        }
        for (name, h) in [
            ("base_training", &self.base_training),
            ("meta_direct.training", &self.meta_direct.training),
            ("meta_conserv.training", &self.meta_conserv.training),
        ] {
            h.validate().map_err(|e| Error::Config(format!("{name}: {e}")))?;
        }
        if let Some(h) = &self.metrics.subset_scan.training {
            h.validate().map_err(|e| Error::Config(format!("metrics.subset_scan.training: {e}")))?;
        }
        self.graph.validate()?;
        self.direct_spec().validate()?;
        self.conserv_spec().validate()?;
        self.md.run.validate()?;
        if self.md.replicas == 0 {
            return Err(Error::Config("md.replicas must be at least 1".into()));
        }
        if !(self.md.stability_delta > 0.0) {
            return Err(Error::Config(format!("md.stability_delta must be positive, got {}", self.md.stability_delta)));
        }
        if !(self.md.hr_r_max > 0.0) || self.md.hr_bins == 0 {
            return Err(Error::Config("md.hr_r_max must be positive and md.hr_bins at least 1".into()));
        }
        validate_regions(&self.metrics.parity_regions)?;
        if self.jobs == 0 {
            return Err(Error::Config("jobs must be at least 1".into()));
        }
        Ok(())
    }

    /// Sets every run-level seed: sampling, split, MD and meta-model
    /// training. Base seeds stay per model so the suite stays diverse.
    pub fn apply_seed(&mut self, seed: u64) {
        self.sampler.seed = seed;
        self.split.seed = seed;
        self.md.run.seed = seed;
        self.meta_direct.training.seed = seed;
        self.meta_conserv.training.seed = seed;
        if let Some(h) = &mut self.metrics.subset_scan.training {
            h.seed = seed;
        }
    }

    pub fn direct_spec(&self) -> DirectSpec {
        let d = &self.meta_direct;
        DirectSpec {
            layers: d.layers,
            hidden: d.hidden,
            heads: d.heads,
            head_hidden: d.head_hidden,
            activation: d.activation,
            jk: d.jk,
            graph: self.graph.clone(),
        }
    }

    pub fn conserv_spec(&self) -> ConservSpec {
        let c = &self.meta_conserv;
        ConservSpec {
            layers: c.layers,
            hidden: c.hidden,
            n_rbf: c.n_rbf,
            cutoff: c.cutoff,
            mode: c.mode,
            energy_embed_dim: c.energy_embed_dim,
            elements: self.graph.elements.clone(),
        }
    }

    pub fn scan_spec(&self) -> (MetaSpec, TrainHyper) {
        let s = &self.metrics.subset_scan;
        match s.meta {
            ScanMeta::Direct => {
                (MetaSpec::Direct(self.direct_spec()), s.training.clone().unwrap_or(self.meta_direct.training.clone()))
            }
            ScanMeta::Conserv => (
                MetaSpec::Conserv(self.conserv_spec()),
                s.training.clone().unwrap_or(self.meta_conserv.training.clone()),
            ),
        }
    }
}
