use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::refpes::{eval_ref, pseudo_methane_structure, Bond, LjParams};
use crate::structure::{mat_vec, random_rotation, LabeledStructure};

fn jittered(seed: u64) -> Structure {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = pseudo_methane_structure(1.09);
    let p = s.positions().iter().map(|x| x.map(|v| v + rng.random_range(-0.1..0.1))).collect();
    s.with_positions(p).unwrap()
}

fn untrained(kind: DescriptorSpec, seed: u64) -> BaseModel {
    let mut m = BaseModel::init(&BaseModelSpec::mlp("u", kind, &[10, 10], seed), &[1, 6]).unwrap();
    m.energy_scale = 0.3;
    m.energy_shift = -1.0;
    m
}

fn flat(v: &[Vec3]) -> Vec<f64> {
    v.iter().flatten().copied().collect()
}

fn rel(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = b.iter().map(|y| y * y).sum::<f64>().sqrt().max(1e-12);
    num / den
}

fn dataset(n: usize, seed: u64) -> Dataset {
    let spec = RefPotentialSpec::pseudo_methane();
    let items = (0..n)
        .map(|k| {
            let s = jittered(seed * 1000 + k as u64);
            let (e, f) = eval_ref(&spec, &s).unwrap();
            LabeledStructure::new(s, e, f).unwrap()
        })
        .collect();
    Dataset::new("pseudo_molecule", items)
}

#[test]
fn forces_match_finite_differences() {
    for kind in [DescriptorSpec::default(), DescriptorSpec::radial_angular()] {
        let m = untrained(kind, 7);
        let s = jittered(1);
        let f = flat(&m.predict(&s).unwrap().forces);
        let x = s.flat_positions();
        let h = 1e-4;
        let fd: Vec<f64> = (0..x.len())
            .map(|k| {
                let mut xp = x.clone();
                let mut xm = x.clone();
                xp[k] += h;
                xm[k] -= h;
                let ep = m.predict(&s.from_flat(&xp).unwrap()).unwrap().energy;
                let em = m.predict(&s.from_flat(&xm).unwrap()).unwrap().energy;
                -(ep - em) / (2.0 * h)
            })
            .collect();
        assert!(rel(&f, &fd) <= 1e-5, "{}", rel(&f, &fd));
    }
}

#[test]
fn invariance_and_equivariance() {
    let m = untrained(DescriptorSpec::radial_angular(), 3);
    let s = jittered(2);
    let p0 = m.predict(&s).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);

    let t = m.predict(&s.transformed(&[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]], [3.0, -1.0, 2.0])).unwrap();
    assert!((t.energy - p0.energy).abs() < 1e-12);
    assert!(rel(&flat(&t.forces), &flat(&p0.forces)) < 1e-10);

    for _ in 0..5 {
        let r = random_rotation(&mut rng);
        let p = m.predict(&s.transformed(&r, [0.5, 0.2, -0.1])).unwrap();
        assert!((p.energy - p0.energy).abs() < 1e-9);
        for (a, b) in p.forces.iter().zip(&p0.forces) {
            let rb = mat_vec(&r, *b);
            for k in 0..3 {
                assert!((a[k] - rb[k]).abs() < 1e-9);
            }
        }
        let mut perm: Vec<usize> = (0..s.len()).collect();
        perm.shuffle(&mut rng);
        let q = m.predict(&s.permuted(&perm)).unwrap();
        assert!((q.energy - p0.energy).abs() < 1e-9);
        for (k, &o) in perm.iter().enumerate() {
            for c in 0..3 {
                assert!((q.forces[k][c] - p0.forces[o][c]).abs() < 1e-9);
            }
        }
    }
}

#[test]
fn overlapping_atoms_rejected() {
    let m = untrained(DescriptorSpec::default(), 1);
    let s = Structure::molecule(vec![6, 1], vec![[0.0; 3], [0.05, 0.0, 0.0]]).unwrap();
    assert!(matches!(m.predict(&s), Err(Error::Eval(_))));
}

#[test]
fn hvp_properties() {
    let m = untrained(DescriptorSpec::radial_angular(), 5);
    let s = jittered(3);
    let bt = m.record(&s).unwrap();
    let n = s.len();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut rand_dir =
        || -> Vec<Vec3> { (0..n).map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0))).collect() };
    let (g1, g2) = (rand_dir(), rand_dir());

    assert!(flat(&bt.hvp(&vec![[0.0; 3]; n]).unwrap()).iter().all(|v| *v == 0.0));

    let h1 = flat(&bt.hvp(&g1).unwrap());
    let h2 = flat(&bt.hvp(&g2).unwrap());
    let mix: Vec<Vec3> = g1.iter().zip(&g2).map(|(a, b)| std::array::from_fn(|k| 2.0 * a[k] - 3.0 * b[k])).collect();
    let hm = flat(&bt.hvp(&mix).unwrap());
    for k in 0..hm.len() {
        assert!((hm[k] - (2.0 * h1[k] - 3.0 * h2[k])).abs() < 1e-10);
    }
    let a: f64 = h1.iter().zip(flat(&g2)).map(|(x, y)| x * y).sum();
    let b: f64 = h2.iter().zip(flat(&g1)).map(|(x, y)| x * y).sum();
    assert!((a - b).abs() < 1e-8);

    // H g = −(F(x + hg) − F(x − hg)) / 2h
    let x = s.flat_positions();
    let g = flat(&g1);
    let h = 1e-4;
    let shifted = |sign: f64| {
        let y: Vec<f64> = x.iter().zip(&g).map(|(a, d)| a + sign * h * d).collect();
        flat(&m.predict(&s.from_flat(&y).unwrap()).unwrap().forces)
    };
    let (fp, fm) = (shifted(1.0), shifted(-1.0));
    let fd: Vec<f64> = fp.iter().zip(&fm).map(|(a, b)| -(a - b) / (2.0 * h)).collect();
    assert!(rel(&h1, &fd) <= 1e-5, "{}", rel(&h1, &fd));

    let dense = bt.hessian().unwrap();
    let nn = 3 * n;
    for r in 0..nn {
        let v: f64 = (0..nn).map(|c| dense[r * nn + c] * g[c]).sum();
        assert!((v - h1[r]).abs() < 1e-9);
    }
}

#[test]
fn harmonic_dimer_curvature() {
    let k = 12.5;
    let reference = RefPotentialSpec::PseudoMolecule {
        bonds: vec![Bond { i: 0, j: 1, k, r0: 1.2 }],
        angles: vec![],
        nonbonded: LjParams { epsilon: 0.0, sigma: 1.0, cutoff: 4.0 },
    };
    let spec = BaseModelSpec::perturbed("harm", 1.0, 1.0);
    let s = Structure::molecule(vec![1, 1], vec![[0.0; 3], [0.8, 0.6, 0.0]]).unwrap();
    let d = Dataset::new("d", vec![LabeledStructure::new(s.clone(), 0.0, vec![[0.0; 3]; 2]).unwrap()]);
    let m = train_base(&spec, &d, &d, &TrainHyper::default(), Some(&reference)).unwrap();
    // unit displacement of atom 1 along the bond axis
    let g = vec![[0.0; 3], [0.8, 0.6, 0.0]];
    let hg = base_force_hvp(&m, &s, &g).unwrap();
    let c: f64 = hg.iter().flatten().zip(g.iter().flatten()).map(|(a, b)| a * b).sum();
    assert!((c - k).abs() < 1e-10, "{c}");
}

#[test]
fn perturbed_model_scales_reference() {
    let reference = RefPotentialSpec::pseudo_methane();
    let d = dataset(2, 1);
    let m = train_base(&BaseModelSpec::perturbed("p", 1.03, 1.0), &d, &d, &TrainHyper::default(), Some(&reference))
        .unwrap();
    let s = jittered(4);
    let (e, f) = eval_ref(&reference, &s).unwrap();
    let p = m.predict(&s).unwrap();
    assert!((p.energy - 1.03 * e).abs() < 1e-12);
    for (a, b) in flat(&p.forces).iter().zip(flat(&f)) {
        assert!((a - 1.03 * b).abs() < 1e-10);
    }
    assert!(matches!(
        train_base(&BaseModelSpec::perturbed("p", 1.03, 1.0), &d, &d, &TrainHyper::default(), None),
        Err(Error::Config(_))
    ));
}

#[test]
fn memorizes_identical_frames() {
    let one = dataset(1, 2).items[0].clone();
    let d = Dataset::new("same", vec![one; 4]);
    let spec = BaseModelSpec::mlp("m", DescriptorSpec::radial_angular(), &[16], 1);
    let hyper =
        TrainHyper { lr: 1e-2, epochs: 6000, batch_size: 4, patience: 6000, lr_decay: 0.999, ..Default::default() };
    let m = train_base(&spec, &d, &d, &hyper, None).unwrap();
    let p = m.predict(&d.items[0].structure).unwrap();
    let mse =
        p.forces.iter().flatten().zip(d.items[0].forces.iter().flatten()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
            / (3 * p.forces.len()) as f64;
    assert!(mse < 1e-6, "{mse}");
}

#[test]
fn ensemble_seeds_and_singleton() {
    let d = dataset(8, 3);
    let hyper = TrainHyper { epochs: 3, batch_size: 4, ..Default::default() };
    let a = BaseModelSpec::mlp("a", DescriptorSpec::default(), &[6], 1);
    let b = BaseModelSpec { id: "b".into(), seed: 2, ..a.clone() };
    let single = build_ensemble(std::slice::from_ref(&a), &d, &d, &hyper, None, 1).unwrap();
    assert_eq!(single.len(), 1);
    let both = build_ensemble(&[a.clone(), b], &d, &d, &hyper, None, 2).unwrap();
    assert_ne!(both[0].params, both[1].params);
    assert!(both.iter().all(|m| m.params.iter().all(|p| p.is_finite())));
    assert_eq!(both[0].params, single[0].params);

    let dup = build_ensemble(&[a.clone(), a], &d, &d, &hyper, None, 1);
    assert!(matches!(dup, Err(Error::Config(m)) if m.contains("duplicate")));
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let d = dataset(4, 4);
    let hyper = TrainHyper { epochs: 2, batch_size: 2, ..Default::default() };
    let m =
        train_base(&BaseModelSpec::mlp("c", DescriptorSpec::radial_angular(), &[5], 1), &d, &d, &hyper, None).unwrap();
    let back = BaseModel::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back, m);
    let s = jittered(8);
    assert_eq!(back.predict(&s).unwrap(), m.predict(&s).unwrap());

    let bumped = m.to_json().unwrap().replace("\"format_version\": 1", "\"format_version\": 99");
    assert!(matches!(BaseModel::from_json(&bumped), Err(Error::Checkpoint(_))));
}

#[test]
fn default_suite_has_eight_unique_members() {
    let suite = default_suite();
    assert_eq!(suite.len(), 8);
    for (k, s) in suite.iter().enumerate() {
        s.validate().unwrap();
        assert!(suite[..k].iter().all(|o| o.id != s.id));
    }
}
