use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::basemodels::{BaseModelSpec, DescriptorSpec};
use crate::refpes::{eval_ref, pseudo_methane_structure, RefForceField, RefPotentialSpec};
use crate::structure::{ForceOutput, LabeledStructure, Structure};

struct Zero;

impl ForceProvider for Zero {
    fn compute(&self, s: &Structure) -> Result<ForceOutput> {
        Ok(ForceOutput { energy: None, forces: vec![[0.0; 3]; s.len()] })
    }
}

fn dataset(name: &str, n: usize, seed: u64) -> Dataset {
    let spec = RefPotentialSpec::pseudo_methane();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = pseudo_methane_structure(1.09);
    let items = (0..n)
        .map(|_| {
            let p = base.positions().iter().map(|x| x.map(|v| v + rng.random_range(-0.1..0.1))).collect();
            let s = base.with_positions(p).unwrap();
            let (e, f) = eval_ref(&spec, &s).unwrap();
            LabeledStructure::new(s, e, f).unwrap()
        })
        .collect();
    Dataset::new(name, items)
}

#[test]
fn perfect_predictions_score_zero() {
    let d = dataset("a", 4, 1);
    let r = eval_forces(&RefForceField(RefPotentialSpec::pseudo_methane()), &d).unwrap();
    assert_eq!(r.force_rmse, 0.0);
    assert_eq!(r.force_mae, 0.0);
    assert_eq!(r.energy_mae, Some(0.0));
    assert_eq!(r.systems[0].n_components, 4 * 5 * 3);
}

#[test]
fn hand_arithmetic() {
    let (rmse, mae) = rmse_mae(&[3.0, 4.0]);
    assert_eq!(mae, 3.5);
    assert!((rmse - 12.5f64.sqrt()).abs() < 1e-15);

    let s = Structure::molecule(vec![1], vec![[0.0; 3]]).unwrap();
    let d = Dataset::new("one", vec![LabeledStructure::new(s, 0.0, vec![[0.0, 0.0, 0.0]]).unwrap()]);
    let score = score_system("one", &d, &[(Some(0.002), vec![[0.003, 0.004, 0.0]])]).unwrap();
    assert!((score.force_mae - 7.0 / 3.0).abs() < 1e-12);
    assert!((score.force_rmse - (25.0f64 / 3.0).sqrt()).abs() < 1e-12);
    assert!((score.energy_mae.unwrap() - 2.0).abs() < 1e-12);

    let sys = |name: &str, rmse: f64| SystemScore {
        system: name.into(),
        n_frames: 1,
        n_components: 3,
        force_rmse: rmse,
        force_mae: rmse / 2.0,
        energy_mae: None,
    };
    let r = EvalReport::from_systems("m", vec![sys("a", 1.0), sys("b", 3.0)]);
    assert_eq!(r.force_rmse, 2.0);
    assert_eq!(r.force_mae, 1.0);
    assert_eq!(r.energy_mae, None);
}

#[test]
fn eval_is_order_invariant_and_multi_system_averages() {
    let d = dataset("a", 6, 2);
    let mut rev = d.clone();
    rev.items.reverse();
    let a = eval_forces(&Zero, &d).unwrap();
    let b = eval_forces(&Zero, &rev).unwrap();
    assert!((a.force_rmse - b.force_rmse).abs() < 1e-12);
    assert!((a.force_mae - b.force_mae).abs() < 1e-12);
    assert_eq!(a.energy_mae, None);

    let e = dataset("b", 3, 3);
    let both = eval_forces_multi(&Zero, &[&d, &e]).unwrap();
    let second = eval_forces(&Zero, &e).unwrap();
    assert!((both.force_rmse - (a.force_rmse + second.force_rmse) / 2.0).abs() < 1e-12);
    let csv = both.to_csv().unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("model,system,"));
}

#[test]
fn parity_regions() {
    let reference: Vec<f64> = (0..=200).map(|k| 4.0 + 0.01 * k as f64).collect();
    let zeros = vec![0.0; reference.len()];
    let r = region_maes(&reference, &zeros, &DEFAULT_PARITY_REGIONS).unwrap();
    assert_eq!(r[0].mae, None);
    assert_eq!(r[0].count, 0);
    assert!((r[1].mae.unwrap() - 5000.0).abs() < 1e-9);
    assert_eq!(r[1].count, 201);

    let d = dataset("a", 3, 4);
    let p = parity_data(&RefForceField(RefPotentialSpec::pseudo_methane()), &d, &DEFAULT_PARITY_REGIONS).unwrap();
    assert_eq!(p.reference.len(), p.predicted.len());
    assert!(p.regions.iter().all(|r| r.mae.is_none() || r.mae == Some(0.0)));
    assert_eq!(p.to_csv().unwrap().lines().count(), p.reference.len() + 1);

    assert!(matches!(validate_regions(&[(0.0, 2.0), (1.0, 3.0)]), Err(Error::Config(_))));
    assert!(matches!(validate_regions(&[(2.0, 1.0)]), Err(Error::Config(_))));
}

#[test]
fn quantiles_and_summary() {
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0], 0.5), 2.5);
    assert_eq!(quantile(&[1.0, 2.0, 3.0, 4.0, 5.0], 0.25), 2.0);
    let rows: Vec<SubsetRow> = (1u32..8)
        .map(|mask| SubsetRow {
            mask,
            k: mask.count_ones() as usize,
            rmse: if mask == 3 { None } else { Some(mask as f64) },
            seed: 0,
            error: (mask == 3).then(|| "boom".into()),
        })
        .collect();
    let s = summarize(&rows, 3);
    assert_eq!(s.iter().map(|x| x.n).collect::<Vec<_>>(), [3, 3, 1]);
    assert_eq!(s[1].n_failed, 1);
    assert_eq!(s[1].median, Some(5.5));
    assert_eq!(s[0].iqr, Some(1.5));
    assert_eq!(s[2].min, Some(7.0));
}

fn tiny_bases(m: usize) -> Vec<BaseModel> {
    (0..m)
        .map(|k| {
            let mut b = BaseModel::init(
                &BaseModelSpec::mlp(&format!("b{k}"), DescriptorSpec::default(), &[4], k as u64),
                &[1, 6],
            )
            .unwrap();
            b.energy_scale = 0.2;
            b
        })
        .collect()
}

#[test]
fn subset_scan_counts_and_single_member() {
    let d = dataset("a", 6, 5);
    let hyper = TrainHyper { epochs: 2, batch_size: 3, ..Default::default() };
    let spec = DirectSpec { layers: 1, hidden: 4, heads: 2, head_hidden: 4, ..Default::default() };
    let three = subset_scan(&tiny_bases(3), &MetaSpec::Direct(spec.clone()), &d, &d, &d, &hyper, 2).unwrap();
    assert_eq!(three.rows.len(), 7);
    assert!(three.rows.iter().all(|r| r.rmse.is_some()));
    assert_eq!(three.summary.iter().map(|s| s.n).collect::<Vec<_>>(), [3, 3, 1]);
    assert_eq!(three.rows_csv().unwrap().lines().count(), 8);
    assert_eq!(three, subset_scan(&tiny_bases(3), &MetaSpec::Direct(spec.clone()), &d, &d, &d, &hyper, 1).unwrap());

    let one = tiny_bases(1);
    let single = subset_scan(&one, &MetaSpec::Direct(spec.clone()), &d, &d, &d, &hyper, 1).unwrap();
    assert_eq!(single.rows.len(), 1);
    let model = crate::meta_direct::train_direct(&spec, &one, &d, &d, &hyper).unwrap();
    let ens = crate::meta_direct::DirectEnsemble::new(model, one).unwrap();
    assert!((single.rows[0].rmse.unwrap() - eval_forces(&ens, &d).unwrap().force_rmse).abs() < 1e-9);
}

#[test]
fn failed_subset_trainings_are_rows() {
    let d = dataset("a", 4, 6);
    let bad = ConservSpec { layers: 0, ..Default::default() };
    let r = subset_scan(&tiny_bases(2), &MetaSpec::Conserv(bad), &d, &d, &d, &TrainHyper::default(), 1).unwrap();
    assert_eq!(r.rows.len(), 3);
    assert!(r.rows.iter().all(|row| row.rmse.is_none() && row.error.is_some()));
    assert!(r.summary.iter().all(|s| s.median.is_none()));
    assert!(matches!(
        subset_scan(&tiny_bases(9), &MetaSpec::Conserv(ConservSpec::default()), &d, &d, &d, &TrainHyper::default(), 1),
        Err(Error::Config(_))
    ));
}

proptest! {
    #[test]
    fn rmse_bounds_mae(res in prop::collection::vec(-5.0f64..5.0, 1..40)) {
        let (rmse, mae) = rmse_mae(&res);
        prop_assert!(rmse + 1e-12 >= mae);
        prop_assert!(mae >= 0.0);
    }
}
