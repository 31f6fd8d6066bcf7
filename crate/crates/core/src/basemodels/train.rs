use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Dual, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{fit, Mlp, TrainHyper, Weights};
use crate::refpes::RefPotentialSpec;
use crate::structure::{Dataset, LabeledStructure};

use super::{descriptors_on_tape, BaseKind, BaseModel, BaseModelSpec, TrainMeta};

/// Descriptors and their position Jacobian for one labeled frame,
/// normalized with the training statistics.
struct Frame {
    n: usize,
    /// `N × D`
    feats: Vec<f64>,
    /// `(N·D) × 3N`, row-major
    jac: Vec<f64>,
    species: Vec<usize>,
    energy: f64,
    forces: Vec<f64>,
}

fn raw_frame(spec: &BaseModelSpec, elements: &[u8], item: &LabeledStructure) -> Result<Frame> {
    let s = &item.structure;
    let mut tape = Tape::new();
    let pos = tape.inputs(&s.flat_positions());
    let desc: Vec<Var> =
        descriptors_on_tape(&spec.descriptor, elements, s, &mut tape, &pos)?.into_iter().flatten().collect();
    let feats = tape.values(&desc);
    let n3 = pos.len();
    let mut jac = vec![0.0; desc.len() * n3];
    for (c, &p) in pos.iter().enumerate() {
        let t = tape.jvp(&[(p, 1.0)])?;
        for (r, d) in desc.iter().enumerate() {
            jac[r * n3 + c] = t[d.index()];
        }
    }
    let species =
        s.species().iter().map(|z| elements.iter().position(|e| e == z).expect("elements cover the dataset")).collect();
    Ok(Frame {
        n: s.len(),
        feats,
        jac,
        species,
        energy: item.energy,
        forces: item.forces.iter().flatten().copied().collect(),
    })
}

fn normalize(f: &mut Frame, mean: &[f64], std: &[f64]) {
    let d = mean.len();
    let n3 = 3 * f.n;
    for (r, v) in f.feats.iter_mut().enumerate() {
        let k = r % d;
        *v = (*v - mean[k]) / std[k];
        for j in &mut f.jac[r * n3..(r + 1) * n3] {
            *j /= std[k];
        }
    }
}

struct Problem<'a> {
    mlp: Mlp,
    d: usize,
    n_el: usize,
    shift: f64,
    scale: f64,
    hyper: &'a TrainHyper,
}

impl Problem<'_> {
    fn inputs(&self, tape: &mut Tape, f: &Frame, i: usize) -> (Vec<Var>, Vec<Var>) {
        let d = tape.inputs(&f.feats[i * self.d..(i + 1) * self.d]);
        let mut x = d.clone();
        for e in 0..self.n_el {
            x.push(tape.constant(if e == f.species[i] { 1.0 } else { 0.0 }));
        }
        (d, x)
    }

    /// Energy and forces from descriptor-space gradients: `F = −s Jᵀ ∇_d NN`.
    fn assemble(&self, f: &Frame, outputs: &[f64], grad_d: &[f64]) -> (f64, Vec<f64>) {
        let e = outputs.iter().map(|o| self.shift + self.scale * o).sum();
        let n3 = 3 * f.n;
        let mut forces = vec![0.0; n3];
        for (r, g) in grad_d.iter().enumerate() {
            if *g != 0.0 {
                for (fk, j) in forces.iter_mut().zip(&f.jac[r * n3..(r + 1) * n3]) {
                    *fk -= self.scale * g * j;
                }
            }
        }
        (e, forces)
    }

    fn frame_loss(&self, f: &Frame, e: f64, forces: &[f64]) -> f64 {
        let n = f.n as f64;
        let de = (e - f.energy) / n;
        let mse_f = forces.iter().zip(&f.forces).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (3.0 * n);
        self.hyper.lambda_e * de * de + self.hyper.lambda_f * mse_f
    }

    fn predict(&self, params: &[f64], f: &Frame) -> Result<(f64, Vec<f64>)> {
        let mut tape = Tape::new();
        let mut ds = Vec::new();
        let mut outs = Vec::new();
        for i in 0..f.n {
            let (d, x) = self.inputs(&mut tape, f, i);
            outs.push(self.mlp.forward(&mut tape, Weights::Const(params), 0, &x)[0]);
            ds.extend(d);
        }
        let seeds: Vec<(Var, f64)> = outs.iter().map(|&o| (o, 1.0)).collect();
        let adj = tape.gradient_seeded(&seeds)?;
        Ok(self.assemble(f, &tape.values(&outs), &adj.collect(&ds)))
    }

    fn val_loss(&self, params: &[f64], frames: &[Frame]) -> Result<f64> {
        let mut total = 0.0;
        for f in frames {
            let (e, forces) = self.predict(params, f)?;
            total += self.frame_loss(f, e, &forces);
        }
        Ok(total / frames.len() as f64)
    }

    /// Mean loss over a batch and its parameter gradient. The force term
    /// needs the mixed derivative `∂²NN/∂θ∂d`, obtained from one
    /// forward-over-reverse sweep with a descriptor-space tangent.
    fn batch(&self, params: &[f64], frames: &[&Frame]) -> Result<(f64, Vec<f64>)> {
        let b = frames.len() as f64;
        let mut tape = Tape::new();
        let pv = tape.inputs(params);
        let mut per_frame = Vec::with_capacity(frames.len());
        for f in frames {
            let mut ds = Vec::with_capacity(f.n * self.d);
            let mut outs = Vec::with_capacity(f.n);
            for i in 0..f.n {
                let (d, x) = self.inputs(&mut tape, f, i);
                outs.push(self.mlp.forward(&mut tape, Weights::Var(&pv), 0, &x)[0]);
                ds.extend(d);
            }
            per_frame.push((ds, outs));
        }
        let seeds: Vec<(Var, f64)> = per_frame.iter().flat_map(|(_, o)| o.iter().map(|&v| (v, 1.0))).collect();
        let adj = tape.gradient_seeded(&seeds)?;

        let mut loss = 0.0;
        let mut dual_seeds = Vec::with_capacity(seeds.len());
        let mut dir = Vec::new();
        for (f, (ds, outs)) in frames.iter().zip(&per_frame) {
            let (e, forces) = self.assemble(f, &tape.values(outs), &adj.collect(ds));
            loss += self.frame_loss(f, e, &forces);
            let n = f.n as f64;
            let de = 2.0 * self.hyper.lambda_e * (e - f.energy) / (n * n) * self.scale / b;
            for &o in outs {
                dual_seeds.push((o, Dual::new(1.0, de)));
            }
            let n3 = 3 * f.n;
            let r: Vec<f64> =
                forces.iter().zip(&f.forces).map(|(a, t)| 2.0 * self.hyper.lambda_f * (a - t) / (3.0 * n)).collect();
            for (row, &v) in ds.iter().enumerate() {
                let w: f64 = f.jac[row * n3..(row + 1) * n3].iter().zip(&r).map(|(j, r)| j * r).sum();
                dir.push((v, -self.scale * w / b));
            }
        }
        let so = tape.second_order(&dual_seeds, &dir)?;
        Ok((loss / b, so.hvps(&pv)))
    }
}

fn elements_of(a: &Dataset, b: &Dataset) -> Vec<u8> {
    let mut e = a.elements();
    e.extend(b.elements());
    e.sort_unstable();
    e.dedup();
    e
}

/// Fits one base model. `reference` supplies the closed-form potential
/// for the perturbed-analytic kind and is ignored otherwise.
pub fn train_base(
    spec: &BaseModelSpec,
    train: &Dataset,
    val: &Dataset,
    hyper: &TrainHyper,
    reference: Option<&RefPotentialSpec>,
) -> Result<BaseModel> {
    spec.validate()?;
    hyper.validate()?;
    train.require_non_empty("training")?;
    val.require_non_empty("validation")?;
    let elements = elements_of(train, val);

    if spec.kind == BaseKind::PerturbedAnalytic {
        let p = spec.perturbation.expect("validated");
        let r = reference.ok_or_else(|| {
            Error::Config(format!("perturbed_analytic model '{}' requires a reference potential", spec.id))
        })?;
        return Ok(BaseModel {
            spec: spec.clone(),
            params: Vec::new(),
            energy_shift: 0.0,
            energy_scale: 1.0,
            elements,
            feat_mean: Vec::new(),
            feat_std: Vec::new(),
            analytic: Some(r.scaled(p.epsilon_scale, p.sigma_scale)),
            train_meta: None,
        });
    }

    let mut train_frames = train.items.iter().map(|it| raw_frame(spec, &elements, it)).collect::<Result<Vec<_>>>()?;
    let mut val_frames = val.items.iter().map(|it| raw_frame(spec, &elements, it)).collect::<Result<Vec<_>>>()?;

    let d = spec.descriptor.width(elements.len());
    let mut mean = vec![0.0; d];
    let mut sq = vec![0.0; d];
    let mut count = 0usize;
    for f in &train_frames {
        for row in f.feats.chunks_exact(d) {
            for k in 0..d {
                mean[k] += row[k];
                sq[k] += row[k] * row[k];
            }
            count += 1;
        }
    }
    let std: Vec<f64> = (0..d)
        .map(|k| {
            mean[k] /= count as f64;
            let var = (sq[k] / count as f64 - mean[k] * mean[k]).max(0.0);
            if var.sqrt() > 1e-8 {
                var.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    for f in train_frames.iter_mut().chain(val_frames.iter_mut()) {
        normalize(f, &mean, &std);
    }

    let per_atom: Vec<f64> = train.items.iter().map(|it| it.energy / it.structure.len() as f64).collect();
    let shift = per_atom.iter().sum::<f64>() / per_atom.len() as f64;
    let e_sd = (per_atom.iter().map(|e| (e - shift).powi(2)).sum::<f64>() / per_atom.len() as f64).sqrt();
    let scale = if e_sd > 1e-8 { e_sd } else { 1.0 };

    let problem =
        Problem { mlp: Mlp::new(d + elements.len(), &spec.hidden, 1), d, n_el: elements.len(), shift, scale, hyper };
    let mut params = Vec::with_capacity(problem.mlp.n_params());
    problem.mlp.init(&mut params, 1.0, &mut ChaCha8Rng::seed_from_u64(spec.seed));

    let result = fit(
        params,
        train_frames.len(),
        hyper,
        |p, idx| {
            let batch: Vec<&Frame> = idx.iter().map(|&i| &train_frames[i]).collect();
            problem.batch(p, &batch)
        },
        |p| problem.val_loss(p, &val_frames),
    )?;
    log::info!("base model '{}': best val loss {:.4e} at epoch {}", spec.id, result.best_val, result.best_epoch);
    Ok(BaseModel {
        spec: spec.clone(),
        params: result.params,
        energy_shift: shift,
        energy_scale: scale,
        elements,
        feat_mean: mean,
        feat_std: std,
        analytic: None,
        train_meta: Some(TrainMeta {
            hyper: hyper.clone(),
            n_train: train.len(),
            n_val: val.len(),
            best_epoch: result.best_epoch,
            best_val: result.best_val,
            logs: result.logs,
        }),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::check_grad_with;
    use crate::basemodels::DescriptorSpec;
    use crate::refpes::{eval_ref, pseudo_methane_structure};

    fn tiny_dataset(n: usize) -> Dataset {
        let spec = RefPotentialSpec::pseudo_methane();
        let base = pseudo_methane_structure(1.09);
        let items = (0..n)
            .map(|k| {
                let p: Vec<_> = base
                    .positions()
                    .iter()
                    .enumerate()
                    .map(|(i, x)| {
                        let t = (k * 5 + i) as f64;
                        [x[0] + 0.05 * t.sin(), x[1] + 0.04 * (1.3 * t).cos(), x[2] - 0.03 * (0.7 * t).sin()]
                    })
                    .collect();
                let s = base.with_positions(p).unwrap();
                let (e, f) = eval_ref(&spec, &s).unwrap();
                LabeledStructure::new(s, e, f).unwrap()
            })
            .collect();
        Dataset::new("pseudo_molecule", items)
    }

    #[test]
    fn batch_gradient_matches_finite_differences() {
        let data = tiny_dataset(3);
        let spec = BaseModelSpec::mlp("t", DescriptorSpec::radial_angular(), &[6], 3);
        let elements = data.elements();
        let mut frames: Vec<Frame> = data.items.iter().map(|it| raw_frame(&spec, &elements, it).unwrap()).collect();
        let d = spec.descriptor.width(2);
        let mean = vec![0.1; d];
        let std = vec![0.7; d];
        for f in &mut frames {
            normalize(f, &mean, &std);
        }
        let hyper = TrainHyper::default();
        let problem = Problem { mlp: Mlp::new(d + 2, &[6], 1), d, n_el: 2, shift: -0.3, scale: 0.2, hyper: &hyper };
        let mut p = Vec::new();
        problem.mlp.init(&mut p, 1.0, &mut ChaCha8Rng::seed_from_u64(4));
        let refs: Vec<&Frame> = frames.iter().collect();
        let value = |q: &[f64]| problem.batch(q, &refs).unwrap().0;
        let gradient = |q: &[f64]| problem.batch(q, &refs).unwrap().1;
        assert!(check_grad_with(value, gradient, &p, 1e-5) < 1e-6);
    }

    #[test]
    fn cached_path_matches_direct_prediction() {
        let data = tiny_dataset(6);
        let spec = BaseModelSpec::mlp("t", DescriptorSpec::radial_angular(), &[5], 1);
        let hyper = TrainHyper { epochs: 2, ..Default::default() };
        let m = train_base(&spec, &data, &data, &hyper, None).unwrap();
        let frames: Vec<Frame> = data
            .items
            .iter()
            .map(|it| {
                let mut f = raw_frame(&spec, &m.elements, it).unwrap();
                normalize(&mut f, &m.feat_mean, &m.feat_std);
                f
            })
            .collect();
        let problem = Problem {
            mlp: m.mlp(),
            d: spec.descriptor.width(2),
            n_el: 2,
            shift: m.energy_shift,
            scale: m.energy_scale,
            hyper: &hyper,
        };
        for (f, it) in frames.iter().zip(&data.items) {
            let (e, forces) = problem.predict(&m.params, f).unwrap();
            let p = m.predict(&it.structure).unwrap();
            assert!((e - p.energy).abs() < 1e-10);
            for (a, b) in forces.iter().zip(p.forces.iter().flatten()) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }
}
