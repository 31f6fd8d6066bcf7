//! Force accuracy metrics, ensemble subset scans and parity analysis.
//! Forces are reported in meV/Å and energies in meV/atom.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basemodels::BaseModel;
use crate::error::{Error, Result};
use crate::meta_conserv::{train_conserv, ConservEnsemble, ConservSpec};
use crate::meta_direct::{cache_frames, direct_forward, train_direct_cached, CachedFrame, DirectSpec};
use crate::nn::TrainHyper;
use crate::structure::{Dataset, ForceProvider, Vec3};
use crate::units::MEV_PER_EV;

/// Residual statistics of one system, in meV/Å and meV/atom.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SystemScore {
    pub system: String,
    pub n_frames: usize,
    pub n_components: usize,
    pub force_rmse: f64,
    pub force_mae: f64,
    /// Absent when the model has no energy output.
    pub energy_mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub model: String,
    pub systems: Vec<SystemScore>,
    /// Mean over systems of the per-system values.
    pub force_rmse: f64,
    pub force_mae: f64,
    pub energy_mae: Option<f64>,
}

/// `(rmse, mae)` of a residual set, in the residuals' own units.
pub fn rmse_mae(residuals: &[f64]) -> (f64, f64) {
    if residuals.is_empty() {
        return (0.0, 0.0);
    }
    let n = residuals.len() as f64;
    let sq = residuals.iter().map(|r| r * r).sum::<f64>() / n;
    let abs = residuals.iter().map(|r| r.abs()).sum::<f64>() / n;
    (sq.sqrt(), abs)
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

impl EvalReport {
    pub fn from_systems(model: impl Into<String>, systems: Vec<SystemScore>) -> Self {
        let rmse: Vec<f64> = systems.iter().map(|s| s.force_rmse).collect();
        let mae: Vec<f64> = systems.iter().map(|s| s.force_mae).collect();
        let energy: Option<Vec<f64>> = systems.iter().map(|s| s.energy_mae).collect();
        EvalReport {
            model: model.into(),
            force_rmse: mean(&rmse),
            force_mae: mean(&mae),
            energy_mae: energy.map(|e| mean(&e)),
            systems,
        }
    }

    pub fn to_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            model: &'a str,
            system: &'a str,
            n_frames: usize,
            n_components: usize,
            force_rmse_mev_per_a: f64,
            force_mae_mev_per_a: f64,
            energy_mae_mev_per_atom: Option<f64>,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.systems {
            w.serialize(Row {
                model: &self.model,
                system: &s.system,
                n_frames: s.n_frames,
                n_components: s.n_components,
                force_rmse_mev_per_a: s.force_rmse,
                force_mae_mev_per_a: s.force_mae,
                energy_mae_mev_per_atom: s.energy_mae,
            })
            .map_err(csv_err)?;
        }
        finish(w)
    }
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String> {
    let bytes = w.into_inner().map_err(|e| Error::Io(std::io::Error::other(e.to_string())))?;
    String::from_utf8(bytes).map_err(|e| Error::Io(std::io::Error::other(e)))
}

/// Scores one system from predicted and reference frames.
pub fn score_system(system: &str, test: &Dataset, predicted: &[(Option<f64>, Vec<Vec3>)]) -> Result<SystemScore> {
    if predicted.len() != test.len() {
        return Err(Error::Shape(format!("{} predictions for {} frames", predicted.len(), test.len())));
    }
    let mut res = Vec::new();
    let mut energy = Some(Vec::with_capacity(test.len()));
    for ((e, f), it) in predicted.iter().zip(&test.items) {
        if f.len() != it.forces.len() {
            return Err(Error::Shape(format!("{} predicted forces for {} atoms", f.len(), it.forces.len())));
        }
        res.extend(f.iter().flatten().zip(it.forces.iter().flatten()).map(|(a, b)| a - b));
        energy = match (energy, e) {
            (Some(mut v), Some(e)) => {
                v.push((e - it.energy) / it.structure.len() as f64);
                Some(v)
            }
            _ => None,
        };
    }
    let (rmse, mae) = rmse_mae(&res);
    Ok(SystemScore {
        system: system.to_string(),
        n_frames: test.len(),
        n_components: res.len(),
        force_rmse: rmse * MEV_PER_EV,
        force_mae: mae * MEV_PER_EV,
        energy_mae: energy.map(|v| rmse_mae(&v).1 * MEV_PER_EV),
    })
}

/// Force and energy errors of `model` averaged over the given systems,
/// each dataset counting as one system.
pub fn eval_forces_multi(model: &dyn ForceProvider, systems: &[&Dataset]) -> Result<EvalReport> {
    let mut scores = Vec::with_capacity(systems.len());
    for d in systems {
        d.require_non_empty("test")?;
        let predicted = d
            .items
            .par_iter()
            .map(|it| model.compute(&it.structure).map(|o| (o.energy, o.forces)))
            .collect::<Result<Vec<_>>>()?;
        scores.push(score_system(&d.name, d, &predicted)?);
    }
    Ok(EvalReport::from_systems(model.label(), scores))
}

pub fn eval_forces(model: &dyn ForceProvider, test: &Dataset) -> Result<EvalReport> {
    eval_forces_multi(model, &[test])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum MetaSpec {
    Direct(DirectSpec),
    Conserv(ConservSpec),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetRow {
    /// Bit `m` set when base `m` is in the subset.
    pub mask: u32,
    pub k: usize,
    /// Test force RMSE, meV/Å; absent for failed trainings.
    pub rmse: Option<f64>,
    pub seed: u64,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SizeSummary {
    pub k: usize,
    pub n: usize,
    pub n_failed: usize,
    pub median: Option<f64>,
    pub iqr: Option<f64>,
    pub min: Option<f64>,
    pub max: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetScanResult {
    pub base_ids: Vec<String>,
    pub rows: Vec<SubsetRow>,
    pub summary: Vec<SizeSummary>,
}

/// Quantile with linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
}

pub fn summarize(rows: &[SubsetRow], m: usize) -> Vec<SizeSummary> {
    (1..=m)
        .map(|k| {
            let of_k: Vec<&SubsetRow> = rows.iter().filter(|r| r.k == k).collect();
            let mut v: Vec<f64> = of_k.iter().filter_map(|r| r.rmse).collect();
            v.sort_by(f64::total_cmp);
            let stat = |f: &dyn Fn(&[f64]) -> f64| if v.is_empty() { None } else { Some(f(&v)) };
            SizeSummary {
                k,
                n: of_k.len(),
                n_failed: of_k.len() - v.len(),
                median: stat(&|s| quantile(s, 0.5)),
                iqr: stat(&|s| quantile(s, 0.75) - quantile(s, 0.25)),
                min: stat(&|s| s[0]),
                max: stat(&|s| s[s.len() - 1]),
            }
        })
        .collect()
}

fn pick<'a>(frames: &[CachedFrame<'a>], mask: u32) -> Vec<CachedFrame<'a>> {
    frames
        .iter()
        .map(|f| CachedFrame {
            structure: f.structure,
            preds: f.preds.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, p)| p.clone()).collect(),
            forces: f.forces,
        })
        .collect()
}

fn direct_subset_rmse(
    spec: &DirectSpec,
    ids: &[String],
    mask: u32,
    caches: [&[CachedFrame]; 3],
    hyper: &TrainHyper,
) -> Result<f64> {
    let sub_ids: Vec<String> =
        ids.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, s)| s.clone()).collect();
    let (train, val, test) = (pick(caches[0], mask), pick(caches[1], mask), pick(caches[2], mask));
    let model = train_direct_cached(spec, &sub_ids, &train, &val, hyper)?;
    let mut res = Vec::new();
    for f in &test {
        let out = direct_forward(&model, &model.graph(f.structure, &f.preds)?)?;
        res.extend(out.iter().flatten().zip(f.forces.iter().flatten()).map(|(a, b)| a - b));
    }
    Ok(rmse_mae(&res).0 * MEV_PER_EV)
}

fn conserv_subset_rmse(
    spec: &ConservSpec,
    bases: &[BaseModel],
    mask: u32,
    data: [&Dataset; 3],
    hyper: &TrainHyper,
) -> Result<f64> {
    let sub: Vec<BaseModel> =
        bases.iter().enumerate().filter(|(k, _)| mask >> k & 1 == 1).map(|(_, b)| b.clone()).collect();
    let model = train_conserv(spec, &sub, data[0], data[1], hyper)?;
    let ens = ConservEnsemble::new(model, sub)?;
    Ok(eval_forces(&ens, data[2])?.force_rmse)
}

/// Trains a fresh meta-model on every non-empty subset of `bases` and
/// records its test force RMSE. Failed trainings become rows with an
/// error message; every subset uses `hyper.seed`.
pub fn subset_scan(
    bases: &[BaseModel],
    spec: &MetaSpec,
    train: &Dataset,
    val: &Dataset,
    test: &Dataset,
    hyper: &TrainHyper,
    jobs: usize,
) -> Result<SubsetScanResult> {
    let m = bases.len();
    if m == 0 || m > 8 {
        return Err(Error::Config(format!("subset scan needs 1 to 8 base models, got {m}")));
    }
    let ids: Vec<String> = bases.iter().map(|b| b.id().to_string()).collect();
    let masks: Vec<u32> = (1..(1u32 << m)).collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;

    let caches = match spec {
        MetaSpec::Direct(_) => Some(pool.install(|| -> Result<_> {
            Ok((cache_frames(bases, train)?, cache_frames(bases, val)?, cache_frames(bases, test)?))
        })?),
        MetaSpec::Conserv(_) => None,
    };
    let rows: Vec<SubsetRow> = pool.install(|| {
        masks
            .par_iter()
            .map(|&mask| {
                let r = match (spec, &caches) {
                    (MetaSpec::Direct(s), Some((a, b, c))) => direct_subset_rmse(s, &ids, mask, [a, b, c], hyper),
                    (MetaSpec::Conserv(s), _) => conserv_subset_rmse(s, bases, mask, [train, val, test], hyper),
                    (MetaSpec::Direct(_), None) => unreachable!("direct scans cache their frames"),
                };
                if let Err(e) = &r {
                    log::warn!("subset {mask:#b} failed: {e}");
                }
                SubsetRow {
                    mask,
                    k: mask.count_ones() as usize,
                    rmse: r.as_ref().ok().copied(),
                    seed: hyper.seed,
                    error: r.err().map(|e| e.to_string()),
                }
            })
            .collect()
    });
    let summary = summarize(&rows, m);
    Ok(SubsetScanResult { base_ids: ids, rows, summary })
}

impl SubsetScanResult {
    pub fn rows_csv(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Row<'a> {
            mask: u32,
            members: String,
            k: usize,
            rmse_mev_per_a: Option<f64>,
            seed: u64,
            error: Option<&'a str>,
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            let members: Vec<&str> = self
                .base_ids
                .iter()
                .enumerate()
                .filter(|(k, _)| r.mask >> k & 1 == 1)
                .map(|(_, s)| s.as_str())
                .collect();
            w.serialize(Row {
                mask: r.mask,
                members: members.join("+"),
                k: r.k,
                rmse_mev_per_a: r.rmse,
                seed: r.seed,
                error: r.error.as_deref(),
            })
            .map_err(csv_err)?;
        }
        finish(w)
    }

    pub fn summary_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for s in &self.summary {
            w.serialize(s).map_err(csv_err)?;
        }
        finish(w)
    }
}

pub const DEFAULT_PARITY_REGIONS: [(f64, f64); 2] = [(-1.0, 1.0), (4.0, 6.0)];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionMae {
    /// eV/Å, closed interval on the reference component.
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    /// meV/Å; absent when no reference component falls in the region.
    pub mae: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParityData {
    /// eV/Å
    pub reference: Vec<f64>,
    pub predicted: Vec<f64>,
    pub regions: Vec<RegionMae>,
}

pub fn validate_regions(regions: &[(f64, f64)]) -> Result<()> {
    let mut sorted = regions.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    for (lo, hi) in &sorted {
        if !(lo < hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::Config(format!("parity region [{lo}, {hi}] is not a valid interval")));
        }
    }
    if let Some(w) = sorted.windows(2).find(|w| w[1].0 <= w[0].1) {
        return Err(Error::Config(format!("parity regions {:?} and {:?} overlap", w[0], w[1])));
    }
    Ok(())
}

/// Region MAEs over flat (reference, predicted) component pairs.
pub fn region_maes(reference: &[f64], predicted: &[f64], regions: &[(f64, f64)]) -> Result<Vec<RegionMae>> {
    validate_regions(regions)?;
    Ok(regions
        .iter()
        .map(|&(lo, hi)| {
            let err: Vec<f64> = reference
                .iter()
                .zip(predicted)
                .filter(|(r, _)| (lo..=hi).contains(*r))
                .map(|(r, p)| (p - r).abs())
                .collect();
            RegionMae { lo, hi, count: err.len(), mae: (!err.is_empty()).then(|| mean(&err) * MEV_PER_EV) }
        })
        .collect())
}

pub fn parity_data(model: &dyn ForceProvider, test: &Dataset, regions: &[(f64, f64)]) -> Result<ParityData> {
    validate_regions(regions)?;
    let predicted: Vec<Vec<Vec3>> =
        test.items.par_iter().map(|it| model.compute(&it.structure).map(|o| o.forces)).collect::<Result<_>>()?;
    let reference: Vec<f64> = test.items.iter().flat_map(|it| it.forces.iter().flatten().copied()).collect();
    let predicted: Vec<f64> = predicted.iter().flat_map(|f| f.iter().flatten().copied()).collect();
    if predicted.len() != reference.len() {
        return Err(Error::Shape("predicted and reference force counts differ".into()));
    }
    let regions = region_maes(&reference, &predicted, regions)?;
    Ok(ParityData { reference, predicted, regions })
}

impl ParityData {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["reference_ev_per_a", "predicted_ev_per_a"]).map_err(csv_err)?;
        for (r, p) in self.reference.iter().zip(&self.predicted) {
            w.write_record([r.to_string(), p.to_string()]).map_err(csv_err)?;
        }
        finish(w)
    }
}

#[cfg(test)]
mod tests;
