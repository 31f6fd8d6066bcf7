//! Pipeline commands behind the `ffstack` binary. Every command reads one
//! [`RunConfig`] and writes only below its working directory.

mod config;

pub use config::{
    ConservSection, DirectSection, MdSection, MetricsSection, Paths, RunConfig, ScanMeta, SubsetScanSection,
    WORKDIR_ENV,
};

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::basemodels::{build_ensemble, train_base, BaseModel, TrainMeta};
use crate::error::{Error, Result};
use crate::extxyz::{parse_extxyz, write_extxyz};
use crate::mdsim::{
    check_stability, compute_hr, detect_bonds, mae_hr, run_replicas, HrHistogram, StabilityReport, Trajectory,
};
use crate::meta_conserv::{train_conserv, ConservEnsemble, ConservModel};
use crate::meta_direct::{train_direct, DirectEnsemble, DirectModel, MeanEnsemble};
use crate::metrics::{eval_forces, parity_data, subset_scan, EvalReport};
use crate::nn::{logs_to_csv, TrainHyper};
use crate::refpes::{default_init, eval_ref, generate_dataset, RefForceField};
use crate::split::split_dataset;
use crate::structure::{Dataset, ForceProvider};

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Validation(_) => 2,
        Error::MissingArtifact(_) => 3,
        e if e.is_numerical() => 4,
        _ => 1,
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

fn to_json<T: Serialize>(v: &T) -> Result<String> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s)
}

/// A model selected on the command line.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum ModelRef {
    Base(String),
    MeanBaseline,
    Direct,
    Conserv,
    Reference,
}

impl ModelRef {
    pub fn parse(s: &str) -> Result<Self> {
        Ok(match s {
            "mean_baseline" | "mean" => ModelRef::MeanBaseline,
            "direct" | "ensemble_direct" => ModelRef::Direct,
            "conserv" | "ensemble_conserv" => ModelRef::Conserv,
            "reference" => ModelRef::Reference,
            _ => match s.strip_prefix("base:") {
                Some(id) if !id.is_empty() => ModelRef::Base(id.to_string()),
                _ => {
                    return Err(Error::Config(format!(
                        "unknown model '{s}'; expected base:<id>, mean_baseline, direct, conserv or reference"
                    )))
                }
            },
        })
    }

    /// Artifact name used for output files.
    pub fn name(&self) -> String {
        match self {
            ModelRef::Base(id) => format!("base_{id}"),
            ModelRef::MeanBaseline => "mean_baseline".into(),
            ModelRef::Direct => "ensemble_direct".into(),
            ModelRef::Conserv => "ensemble_conserv".into(),
            ModelRef::Reference => "reference".into(),
        }
    }
}

/// Resolved configuration plus its working directory.
pub struct Workspace {
    pub cfg: RunConfig,
    pub root: PathBuf,
}

impl Workspace {
    /// Creates the working directory (`FFSTACK_WORKDIR` wins over the
    /// config) and writes the resolved config echo.
    pub fn open(mut cfg: RunConfig) -> Result<Self> {
        if let Ok(w) = std::env::var(WORKDIR_ENV) {
            if !w.is_empty() {
                cfg.paths.workdir = w.into();
            }
        }
        cfg.validate()?;
        let root = cfg.paths.workdir.clone();
        std::fs::create_dir_all(&root)?;
        let ws = Workspace { cfg, root };
        ws.write("config.echo.json", &to_json(&ws.cfg)?)?;
        Ok(ws)
    }

    pub fn path(&self, rel: impl AsRef<Path>) -> PathBuf {
        self.root.join(rel)
    }

    pub fn dataset_path(&self) -> PathBuf {
        self.path(&self.cfg.paths.dataset)
    }

    pub fn checkpoint(&self, name: &str) -> PathBuf {
        self.path(&self.cfg.paths.checkpoints).join(format!("{name}.json"))
    }

    /// Writes `text` below the workdir and records its hash in `manifest.json`.
    pub fn write(&self, rel: impl AsRef<Path>, text: &str) -> Result<PathBuf> {
        let path = self.path(rel.as_ref());
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        std::fs::write(&path, text)?;
        if rel.as_ref() != Path::new("manifest.json") {
            let manifest_path = self.path("manifest.json");
            let mut m: BTreeMap<String, String> = match std::fs::read_to_string(&manifest_path) {
                Ok(t) => serde_json::from_str(&t)?,
                Err(_) => BTreeMap::new(),
            };
            m.insert(rel.as_ref().to_string_lossy().replace('\\', "/"), sha256_hex(text.as_bytes()));
            std::fs::write(manifest_path, to_json(&m)?)?;
        }
        Ok(path)
    }

    fn relative(&self, p: &Path) -> PathBuf {
        p.strip_prefix(&self.root).map(Path::to_path_buf).unwrap_or_else(|_| p.to_path_buf())
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        let p = self.dataset_path();
        let text = std::fs::read_to_string(&p)
            .map_err(|_| Error::MissingArtifact(format!("dataset {} (run gen-data first)", p.display())))?;
        parse_extxyz(&text)
    }

    pub fn splits(&self) -> Result<(Dataset, Dataset, Dataset)> {
        split_dataset(&self.load_dataset()?, &self.cfg.split)
    }

    fn load_checkpoint<T>(&self, name: &str, parse: impl Fn(&str) -> Result<T>) -> Result<T> {
        let p = self.checkpoint(name);
        let text = std::fs::read_to_string(&p)
            .map_err(|_| Error::MissingArtifact(format!("checkpoint {} (train it first)", p.display())))?;
        parse(&text)
    }

    /// All configured bases, in config order.
    pub fn load_bases(&self) -> Result<Vec<BaseModel>> {
        let missing: Vec<&str> = self
            .cfg
            .bases
            .iter()
            .filter(|b| !self.checkpoint(&format!("base_{}", b.id)).exists())
            .map(|b| b.id.as_str())
            .collect();
        if !missing.is_empty() {
            return Err(Error::MissingArtifact(format!("base checkpoints for {missing:?} (train the ensemble first)")));
        }
        self.cfg.bases.iter().map(|b| self.load_checkpoint(&format!("base_{}", b.id), BaseModel::from_json)).collect()
    }

    pub fn provider(&self, m: &ModelRef) -> Result<Box<dyn ForceProvider + Send>> {
        Ok(match m {
            ModelRef::Base(id) => {
                if !self.cfg.bases.iter().any(|b| &b.id == id) {
                    return Err(Error::Config(format!("no base model '{id}' in the config")));
                }
                Box::new(self.load_checkpoint(&format!("base_{id}"), BaseModel::from_json)?)
            }
            ModelRef::MeanBaseline => Box::new(MeanEnsemble(self.load_bases()?)),
            ModelRef::Direct => {
                let model = self.load_checkpoint("direct", DirectModel::from_json)?;
                Box::new(DirectEnsemble::new(model, self.load_bases()?)?)
            }
            ModelRef::Conserv => {
                let model = self.load_checkpoint("conserv", ConservModel::from_json)?;
                Box::new(ConservEnsemble::new(model, self.load_bases()?)?)
            }
            ModelRef::Reference => Box::new(RefForceField(self.cfg.ref_pes.clone())),
        })
    }

    /// Every model compared in the consolidated report.
    pub fn report_models(&self) -> Vec<ModelRef> {
        let mut v: Vec<ModelRef> = self.cfg.bases.iter().map(|b| ModelRef::Base(b.id.clone())).collect();
        v.extend([ModelRef::MeanBaseline, ModelRef::Direct, ModelRef::Conserv]);
        v
    }
}

#[derive(Serialize)]
struct DatasetManifest {
    seed: u64,
    spec_hash: String,
    frame_count: usize,
    file_sha256: String,
}

pub fn cmd_gen_data(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let d = generate_dataset(&ws.cfg.ref_pes, &ws.cfg.sampler)?;
    let text = write_extxyz(&d);
    let spec = serde_json::json!({ "ref_pes": ws.cfg.ref_pes, "sampler": ws.cfg.sampler });
    let manifest = DatasetManifest {
        seed: ws.cfg.sampler.seed,
        spec_hash: sha256_hex(serde_json::to_string(&spec)?.as_bytes()),
        frame_count: d.len(),
        file_sha256: sha256_hex(text.as_bytes()),
    };
    let rel = ws.cfg.paths.dataset.clone();
    let a = ws.write(&rel, &text)?;
    let b = ws.write("dataset_manifest.json", &to_json(&manifest)?)?;
    log::info!("wrote {} frames to {}", d.len(), a.display());
    Ok(vec![a, b])
}

fn write_logs(ws: &Workspace, name: &str, meta: &Option<TrainMeta>) -> Result<Option<PathBuf>> {
    match meta {
        Some(m) => Ok(Some(ws.write(format!("logs/{name}.csv"), &logs_to_csv(&m.logs))?)),
        None => Ok(None),
    }
}

fn save_base(ws: &Workspace, m: &BaseModel) -> Result<Vec<PathBuf>> {
    let name = format!("base_{}", m.id());
    let ck = ws.relative(&ws.checkpoint(&name));
    let mut out = vec![ws.write(ck, &m.to_json()?)?];
    out.extend(write_logs(ws, &name, &m.train_meta)?);
    Ok(out)
}

/// `target` is `base:<id>`, `ensemble`, `direct` or `conserv`.
pub fn cmd_train(ws: &Workspace, target: &str) -> Result<Vec<PathBuf>> {
    let cfg = &ws.cfg;
    let base_id = target.strip_prefix("base:");
    if !matches!(target, "ensemble" | "direct" | "conserv") && base_id.is_none() {
        return Err(Error::Config(format!(
            "unknown train target '{target}'; expected base:<id>, ensemble, direct or conserv"
        )));
    }
    if let Some(id) = base_id {
        if !cfg.bases.iter().any(|b| b.id == id) {
            return Err(Error::Config(format!("no base model '{id}' in the config")));
        }
    }
    let (train, val, _) = ws.splits()?;
    let mut out = Vec::new();
    match target {
        "ensemble" => {
            let models = build_ensemble(&cfg.bases, &train, &val, &cfg.base_training, Some(&cfg.ref_pes), cfg.jobs)?;
            for m in &models {
                out.extend(save_base(ws, m)?);
            }
        }
        "direct" => {
            let bases = ws.load_bases()?;
            let m = train_direct(&cfg.direct_spec(), &bases, &train, &val, &cfg.meta_direct.training)?;
            out.push(ws.write(ws.relative(&ws.checkpoint("direct")), &m.to_json()?)?);
            out.extend(write_logs(ws, "direct", &m.train_meta)?);
        }
        "conserv" => {
            let bases = ws.load_bases()?;
            let m = train_conserv(&cfg.conserv_spec(), &bases, &train, &val, &cfg.meta_conserv.training)?;
            out.push(ws.write(ws.relative(&ws.checkpoint("conserv")), &m.to_json()?)?);
            out.extend(write_logs(ws, "conserv", &m.train_meta)?);
        }
        _ => {
            let spec = cfg.bases.iter().find(|b| Some(b.id.as_str()) == base_id).expect("validated above");
            let hyper = TrainHyper { seed: spec.seed, ..cfg.base_training.clone() };
            out.extend(save_base(ws, &train_base(spec, &train, &val, &hyper, Some(&cfg.ref_pes))?)?);
        }
    }
    Ok(out)
}

pub fn evaluate(ws: &Workspace, m: &ModelRef) -> Result<EvalReport> {
    let (_, _, test) = ws.splits()?;
    let p = ws.provider(m)?;
    let mut r = eval_forces(p.as_ref(), &test)?;
    r.model = m.name();
    Ok(r)
}

pub fn cmd_eval(ws: &Workspace, m: &ModelRef) -> Result<Vec<PathBuf>> {
    let (_, _, test) = ws.splits()?;
    let p = ws.provider(m)?;
    let mut report = eval_forces(p.as_ref(), &test)?;
    report.model = m.name();
    let parity = parity_data(p.as_ref(), &test, &ws.cfg.metrics.parity_regions)?;
    let name = m.name();
    Ok(vec![
        ws.write(format!("eval/{name}.csv"), &report.to_csv()?)?,
        ws.write(format!("eval/{name}.json"), &to_json(&report)?)?,
        ws.write(format!("eval/{name}_parity.csv"), &parity.to_csv()?)?,
        ws.write(format!("eval/{name}_parity_regions.json"), &to_json(&parity.regions)?)?,
    ])
}

#[derive(Clone, Debug, Serialize)]
pub struct ReplicaRow {
    pub replica: usize,
    pub seed: u64,
    pub stable: bool,
    pub first_violation_step: Option<usize>,
    pub exploded_step: Option<usize>,
    /// eV/atom from the model's own energy; absent for force-only models.
    pub drift_model_ev_per_atom: Option<f64>,
    /// eV/atom with the reference potential in place of the model energy.
    pub drift_reference_ev_per_atom: Option<f64>,
}

/// Replica trajectories and trajectory-level metrics for one model.
pub struct MdOutcome {
    pub trajectories: Vec<Trajectory>,
    pub stability: StabilityReport,
    pub rows: Vec<ReplicaRow>,
    pub hr: Option<HrHistogram>,
    /// Absent when a trajectory left the histogram range.
    pub hr_mae: Option<f64>,
}

fn histogram(ws: &Workspace, trajs: &[Trajectory]) -> Result<HrHistogram> {
    let mut frames = Vec::new();
    for t in trajs {
        frames.extend(t.structures()?);
    }
    compute_hr(&frames, ws.cfg.md.hr_r_max, ws.cfg.md.hr_bins)
}

fn reference_hr(ws: &Workspace) -> Result<HrHistogram> {
    let init = default_init(&ws.cfg.ref_pes)?;
    let ff = RefForceField(ws.cfg.ref_pes.clone());
    let trajs = run_replicas(&ff, &init, &ws.cfg.md.run, ws.cfg.md.replicas)?;
    histogram(ws, &trajs)
}

pub fn simulate(ws: &Workspace, m: &ModelRef, reference: Option<&HrHistogram>) -> Result<MdOutcome> {
    let cfg = &ws.cfg;
    let init = default_init(&cfg.ref_pes)?;
    let bonds = detect_bonds(&init, Some(&cfg.ref_pes), &cfg.md.bond_rule)?;
    let p = ws.provider(m)?;
    let trajs = run_replicas(p.as_ref(), &init, &cfg.md.run, cfg.md.replicas)?;
    let results: Vec<_> = trajs.iter().map(|t| check_stability(t, &bonds, cfg.md.stability_delta)).collect();
    let rows = trajs
        .iter()
        .zip(&results)
        .enumerate()
        .map(|(r, (t, s))| ReplicaRow {
            replica: r,
            seed: cfg.md.run.seed.wrapping_add(r as u64),
            stable: s.stable,
            first_violation_step: s.first_violation_step,
            exploded_step: t.exploded,
            drift_model_ev_per_atom: t.energy_drift_per_atom(),
            drift_reference_ev_per_atom: t.energy_drift_with(|s| eval_ref(&cfg.ref_pes, s).map(|(e, _)| e)).ok(),
        })
        .collect();
    let hr = histogram(ws, &trajs).ok();
    let hr_mae = match (&hr, reference) {
        (Some(h), Some(r)) => Some(mae_hr(r, h)?),
        _ => None,
    };
    Ok(MdOutcome { trajectories: trajs, stability: StabilityReport::new(results), rows, hr, hr_mae })
}

fn rows_csv<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).map_err(|e| Error::Io(std::io::Error::other(e)))?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

fn hr_csv(h: &HrHistogram) -> Result<String> {
    #[derive(Serialize)]
    struct Bin {
        r_lo: f64,
        r_hi: f64,
        density: f64,
    }
    let edges = h.bin_edges();
    let bins: Vec<Bin> =
        h.densities.iter().enumerate().map(|(k, &d)| Bin { r_lo: edges[k], r_hi: edges[k + 1], density: d }).collect();
    rows_csv(&bins)
}

pub fn cmd_md(ws: &Workspace, m: &ModelRef) -> Result<Vec<PathBuf>> {
    let reference = reference_hr(ws)?;
    let o = simulate(ws, m, Some(&reference))?;
    let dir = format!("md/{}", m.name());
    let mut out = Vec::new();
    for (r, t) in o.trajectories.iter().enumerate() {
        out.push(ws.write(format!("{dir}/replica_{r}.extxyz"), &t.to_extxyz()?)?);
    }
    out.push(ws.write(format!("{dir}/stability.json"), &to_json(&o.stability)?)?);
    out.push(ws.write(format!("{dir}/replicas.csv"), &rows_csv(&o.rows)?)?);
    if let Some(h) = &o.hr {
        out.push(ws.write(format!("{dir}/hr.csv"), &hr_csv(h)?)?);
    }
    out.push(ws.write("md/reference_hr.csv", &hr_csv(&reference)?)?);
    out.push(ws.write(format!("{dir}/hr_mae.json"), &to_json(&serde_json::json!({ "hr_mae": o.hr_mae }))?)?);
    Ok(out)
}

pub fn cmd_subset_scan(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let (train, val, test) = ws.splits()?;
    let bases = ws.load_bases()?;
    let (spec, hyper) = ws.cfg.scan_spec();
    let r = subset_scan(&bases, &spec, &train, &val, &test, &hyper, ws.cfg.jobs)?;
    Ok(vec![
        ws.write("subset_scan/rows.csv", &r.rows_csv()?)?,
        ws.write("subset_scan/summary.csv", &r.summary_csv()?)?,
        ws.write("subset_scan/result.json", &to_json(&r)?)?,
    ])
}

/// One row of the consolidated comparison.
#[derive(Clone, Debug, Serialize)]
pub struct ReportEntry {
    pub model: String,
    /// meV/Å
    pub force_rmse: f64,
    /// meV/Å
    pub force_mae: f64,
    /// meV/atom
    pub energy_mae: Option<f64>,
    pub stability_pct: f64,
    pub hr_mae: Option<f64>,
    /// Worst replica drift, eV/atom, reference energy plus kinetic energy.
    pub max_drift_reference_ev_per_atom: Option<f64>,
}

pub fn cmd_report(ws: &Workspace) -> Result<Vec<PathBuf>> {
    let reference = reference_hr(ws)?;
    let mut entries = Vec::new();
    for m in ws.report_models() {
        let e = evaluate(ws, &m)?;
        let o = simulate(ws, &m, Some(&reference))?;
        let drift = o
            .rows
            .iter()
            .map(|r| r.drift_reference_ev_per_atom)
            .collect::<Option<Vec<f64>>>()
            .map(|v| v.into_iter().fold(0.0, f64::max));
        entries.push(ReportEntry {
            model: m.name(),
            force_rmse: e.force_rmse,
            force_mae: e.force_mae,
            energy_mae: e.energy_mae,
            stability_pct: o.stability.stable_pct,
            hr_mae: o.hr_mae,
            max_drift_reference_ev_per_atom: drift,
        });
    }
    let doc = serde_json::json!({
        "columns": ["force_mae_mev_per_a", "stability_pct", "hr_mae"],
        "models": entries,
    });
    Ok(vec![ws.write("report.json", &to_json(&doc)?)?, ws.write("report.csv", &rows_csv(&entries)?)?])
}
