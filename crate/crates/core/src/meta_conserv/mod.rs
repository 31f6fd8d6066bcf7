//! Conservative meta-model: a learned invariant scalar θ over base
//! energies, base forces and coordinates. Forces follow from the
//! multivariate chain rule through all three inputs, so they are exactly
//! the negative gradient of the composed energy.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Dual, Tape, Var};
use crate::basemodels::{BaseModel, BaseTape, Checkpoint, TrainMeta, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::graph::neighbor_list;
use crate::meta_direct::mean_baseline;
use crate::nn::{dense_size, fit, init_dense, TrainHyper, Weights};
use crate::structure::{BasePrediction, Dataset, ForceOutput, ForceProvider, Structure, Vec3};

/// Smoothing added under the square root of force magnitudes.
const NORM_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConservMode {
    /// Chain rule through base energies, base forces (Hessian term) and coordinates.
    #[default]
    FullEq6,
    /// θ sees base energies and coordinates only; no Hessian term.
    AblationEq7,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConservSpec {
    pub layers: usize,
    pub hidden: usize,
    pub n_rbf: usize,
    /// Å
    pub cutoff: f64,
    pub mode: ConservMode,
    pub energy_embed_dim: usize,
    /// Atomic numbers spanned by the species one-hot.
    pub elements: Vec<u8>,
}

impl Default for ConservSpec {
    fn default() -> Self {
        ConservSpec {
            layers: 2,
            hidden: 32,
            n_rbf: 8,
            cutoff: 5.0,
            mode: ConservMode::FullEq6,
            energy_embed_dim: 16,
            elements: vec![1, 6, 18],
        }
    }
}

impl ConservSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.hidden == 0 {
            return Err(Error::Config("conserv.layers and conserv.hidden must be at least 1".into()));
        }
        if !(self.cutoff > 0.0) {
            return Err(Error::Config(format!("conserv.cutoff must be positive, got {}", self.cutoff)));
        }
        if self.n_rbf < 2 || self.energy_embed_dim == 0 || self.elements.is_empty() {
            return Err(Error::Config(
                "conserv needs n_rbf ≥ 2, energy_embed_dim ≥ 1 and a non-empty element table".into(),
            ));
        }
        Ok(())
    }

    /// Invariant features per atom for `m` bases.
    pub fn n_features(&self, m: usize) -> usize {
        let force = match self.mode {
            ConservMode::FullEq6 => 2 * m + m * (m - 1) / 2,
            ConservMode::AblationEq7 => 0,
        };
        self.elements.len() + self.energy_embed_dim + force
    }
}

#[derive(Clone, Debug)]
struct Layout {
    embed: usize,
    input: usize,
    layers: Vec<(usize, usize, usize)>,
    read1: usize,
    read2: usize,
    skip: usize,
    total: usize,
}

impl Layout {
    fn new(spec: &ConservSpec, m: usize) -> Self {
        let h = spec.hidden;
        let d_e = spec.energy_embed_dim;
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let embed = take(m * d_e + d_e);
        let input = take(dense_size(spec.n_features(m), h));
        let layers = (0..spec.layers)
            .map(|_| (take(dense_size(spec.n_rbf, h)), take(dense_size(h, h)), take(dense_size(h, h))))
            .collect();
        let read1 = take(dense_size(h, h));
        let read2 = take(dense_size(h, 1));
        let skip = take(m);
        Layout { embed, input, layers, read1, read2, skip, total: off }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConservModel {
    pub spec: ConservSpec,
    pub base_ids: Vec<String>,
    pub params: Vec<f64>,
    /// Per-atom base-energy normalization for the embedding, eV.
    pub energy_shift: f64,
    pub energy_scale: f64,
    /// eV/Å; base forces are divided by this before feature extraction.
    pub force_scale: f64,
    /// eV; multiplies the per-atom readout.
    pub readout_scale: f64,
    pub train_meta: Option<TrainMeta>,
}

/// Tape variables θ is recorded against.
pub struct ThetaInputs {
    pub pos: Vec<Var>,
    pub energies: Vec<Var>,
    /// `M × 3N`, base-major; empty in ablation mode.
    pub forces: Vec<Var>,
}

impl ThetaInputs {
    pub fn record(tape: &mut Tape, s: &Structure, preds: &[BasePrediction], with_forces: bool) -> Self {
        let pos = tape.inputs(&s.flat_positions());
        let energies: Vec<Var> = preds.iter().map(|p| tape.input(p.energy)).collect();
        let forces = if with_forces {
            preds
                .iter()
                .flat_map(|p| p.forces.iter().flatten().copied().collect::<Vec<_>>())
                .map(|v| tape.input(v))
                .collect()
        } else {
            Vec::new()
        };
        ThetaInputs { pos, energies, forces }
    }
}

/// Energy, forces and bookkeeping from one chain-rule evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct ConservOutput {
    pub energy: f64,
    pub forces: Vec<Vec3>,
    pub hvp_calls: usize,
}

/// Partial derivatives of θ with respect to its three input groups.
#[derive(Clone, Debug)]
pub struct ThetaPartials {
    pub energy: f64,
    pub d_x: Vec<f64>,
    pub d_e: Vec<f64>,
    /// `M × 3N`; empty in ablation mode.
    pub d_f: Vec<f64>,
}

impl ConservModel {
    /// Random message layers, zero per-atom readout and skip weights `1/M`,
    /// so an untrained model is the mean of the base energies.
    pub fn init(spec: &ConservSpec, base_ids: &[String], seed: u64) -> Result<Self> {
        spec.validate()?;
        if base_ids.is_empty() {
            return Err(Error::Config("conservative meta-model needs at least one base model".into()));
        }
        let m = base_ids.len();
        let h = spec.hidden;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::new();
        init_dense(&mut p, m, spec.energy_embed_dim, 1.0, &mut rng);
        // force-feature columns start at zero so both modes share their initial θ
        let shared = spec.elements.len() + spec.energy_embed_dim;
        let mut input = Vec::new();
        init_dense(&mut input, shared, h, 1.0, &mut rng);
        for row in input[..shared * h].chunks_exact(shared) {
            p.extend_from_slice(row);
            p.extend(std::iter::repeat_n(0.0, spec.n_features(m) - shared));
        }
        p.extend_from_slice(&input[shared * h..]);
        for _ in 0..spec.layers {
            init_dense(&mut p, spec.n_rbf, h, 1.0, &mut rng);
            init_dense(&mut p, h, h, 1.0, &mut rng);
            init_dense(&mut p, h, h, 1.0, &mut rng);
        }
        init_dense(&mut p, h, h, 1.0, &mut rng);
        init_dense(&mut p, h, 1, 0.0, &mut rng);
        p.extend(std::iter::repeat_n(1.0 / m as f64, m));
        debug_assert_eq!(p.len(), Layout::new(spec, m).total);
        Ok(ConservModel {
            spec: spec.clone(),
            base_ids: base_ids.to_vec(),
            params: p,
            energy_shift: 0.0,
            energy_scale: 1.0,
            force_scale: 1.0,
            readout_scale: 1.0,
            train_meta: None,
        })
    }

    pub fn n_bases(&self) -> usize {
        self.base_ids.len()
    }

    pub fn uses_forces(&self) -> bool {
        self.spec.mode == ConservMode::FullEq6
    }

    /// Sets the per-atom readout and skip weights to zero.
    pub fn zero_readout(&mut self) {
        let lay = Layout::new(&self.spec, self.n_bases());
        for v in &mut self.params[lay.read2..] {
            *v = 0.0;
        }
    }

    /// Makes θ exactly `Σ c_m E_m`.
    pub fn set_linear(&mut self, c: &[f64]) -> Result<()> {
        if c.len() != self.n_bases() {
            return Err(Error::Shape(format!("{} coefficients for {} bases", c.len(), self.n_bases())));
        }
        self.zero_readout();
        let lay = Layout::new(&self.spec, self.n_bases());
        self.params[lay.skip..].copy_from_slice(c);
        Ok(())
    }

    /// Records θ on `tape`. Neighbor sets are fixed at recording time; the
    /// cosine cutoff makes that choice smooth.
    pub fn theta_on_tape(&self, tape: &mut Tape, w: Weights, s: &Structure, inp: &ThetaInputs) -> Result<Var> {
        let m = self.n_bases();
        let n = s.len();
        let spec = &self.spec;
        let lay = Layout::new(spec, m);
        if inp.pos.len() != 3 * n || inp.energies.len() != m {
            return Err(Error::Shape(format!("θ inputs do not match {n} atoms and {m} bases")));
        }
        if self.uses_forces() != !inp.forces.is_empty() || (self.uses_forces() && inp.forces.len() != 3 * n * m) {
            return Err(Error::Shape("θ force inputs do not match the model mode".into()));
        }
        if w.len() != lay.total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", lay.total, w.len())));
        }
        let h = spec.hidden;
        let d_e = spec.energy_embed_dim;
        let rc = spec.cutoff;

        // edges with displacement and radial quantities on the tape
        let p = s.positions();
        let edges: Vec<_> =
            neighbor_list(s, rc)?.into_iter().filter(|e| e.src != e.dst || e.shift != [0.0; 3]).collect();
        let step = rc / (spec.n_rbf - 1) as f64;
        let gamma = 1.0 / (step * step);
        struct Geo {
            src: usize,
            dst: usize,
            v: [Var; 3],
            r: Var,
            fc: Var,
            rbf: Vec<Var>,
        }
        let mut geo = Vec::with_capacity(edges.len());
        for e in &edges {
            let v: [Var; 3] = std::array::from_fn(|k| {
                let shift = e.vector[k] - (p[e.dst][k] - p[e.src][k]);
                let d = tape.sub(inp.pos[3 * e.dst + k], inp.pos[3 * e.src + k]);
                if shift == 0.0 {
                    d
                } else {
                    tape.shift(d, shift)
                }
            });
            let r2 = tape.dot(&v, &v);
            let r = tape.sqrt(r2);
            let arg = tape.scale(r, std::f64::consts::PI / rc);
            let c = tape.cos(arg);
            let c1 = tape.shift(c, 1.0);
            let fc = tape.scale(c1, 0.5);
            let rbf = (0..spec.n_rbf)
                .map(|k| {
                    let d = tape.shift(r, -(k as f64) * step);
                    let sq = tape.square(d);
                    let a = tape.scale(sq, -gamma);
                    tape.exp(a)
                })
                .collect();
            geo.push(Geo { src: e.src, dst: e.dst, v, r, fc, rbf });
        }

        let per_atom: Vec<Var> = inp
            .energies
            .iter()
            .map(|&e| {
                let a = tape.scale(e, 1.0 / (n as f64 * self.energy_scale));
                tape.shift(a, -self.energy_shift / self.energy_scale)
            })
            .collect();
        let embed = w.dense(tape, lay.embed, &per_atom, d_e);

        let mut state: Vec<Vec<Var>> = Vec::with_capacity(n);
        for j in 0..n {
            let z = s.species()[j];
            let mut feat: Vec<Var> =
                spec.elements.iter().map(|&e| tape.constant(if e == z { 1.0 } else { 0.0 })).collect();
            if !spec.elements.contains(&z) {
                return Err(Error::Shape(format!("element Z={z} is not in the θ element table {:?}", spec.elements)));
            }
            feat.extend_from_slice(&embed);
            if self.uses_forces() {
                let fj: Vec<[Var; 3]> = (0..m)
                    .map(|b| {
                        std::array::from_fn(|k| tape.scale(inp.forces[b * 3 * n + 3 * j + k], 1.0 / self.force_scale))
                    })
                    .collect();
                for f in &fj {
                    let sq = tape.dot(f, f);
                    let sm = tape.shift(sq, NORM_EPS * NORM_EPS);
                    feat.push(tape.sqrt(sm));
                }
                for a in 0..m {
                    for b in a + 1..m {
                        feat.push(tape.dot(&fj[a], &fj[b]));
                    }
                }
                for f in &fj {
                    let mut terms = Vec::new();
                    for g in geo.iter().filter(|g| g.src == j) {
                        let fv = tape.dot(f, &g.v);
                        let proj = tape.div(fv, g.r);
                        terms.push(tape.mul(proj, g.fc));
                    }
                    feat.push(tape.sum(&terms));
                }
            }
            let x = w.dense(tape, lay.input, &feat, h);
            state.push(x.into_iter().map(|v| tape.silu(v)).collect());
        }

        for &(filt, value, update) in &lay.layers {
            let vals: Vec<Vec<Var>> = state.iter().map(|x| w.dense(tape, value, x, h)).collect();
            let mut msgs: Vec<Vec<Vec<Var>>> = vec![vec![Vec::new(); h]; n];
            for g in &geo {
                let f = w.dense(tape, filt, &g.rbf, h);
                for k in 0..h {
                    let fk = tape.mul(f[k], g.fc);
                    msgs[g.src][k].push(tape.mul(fk, vals[g.dst][k]));
                }
            }
            for j in 0..n {
                let msg: Vec<Var> = msgs[j].iter().map(|terms| tape.sum(terms)).collect();
                let u = w.dense(tape, update, &msg, h);
                for k in 0..h {
                    let a = tape.silu(u[k]);
                    state[j][k] = tape.add(state[j][k], a);
                }
            }
        }

        let mut atoms = Vec::with_capacity(n);
        for x in &state {
            let r = w.dense(tape, lay.read1, x, h);
            let r: Vec<Var> = r.into_iter().map(|v| tape.silu(v)).collect();
            atoms.push(w.dense(tape, lay.read2, &r, 1)[0]);
        }
        let local = tape.sum(&atoms);
        let local = tape.scale(local, self.readout_scale);
        let skip: Vec<Var> = (0..m).map(|k| w.scalar(tape, lay.skip + k)).collect();
        let mix = tape.dot(&skip, &inp.energies);
        Ok(tape.add(local, mix))
    }

    /// θ and its partials with respect to coordinates, base energies and
    /// (full mode) base forces, all from one reverse sweep.
    pub fn partials(&self, s: &Structure, preds: &[BasePrediction]) -> Result<ThetaPartials> {
        check_preds(s, preds, self.n_bases())?;
        let mut tape = Tape::new();
        let inp = ThetaInputs::record(&mut tape, s, preds, self.uses_forces());
        let out = self.theta_on_tape(&mut tape, Weights::Const(&self.params), s, &inp)?;
        let adj = tape.gradient(out).map_err(|e| Error::Eval(format!("θ is not finite: {e}")))?;
        let parts = ThetaPartials {
            energy: tape.value(out),
            d_x: adj.collect(&inp.pos),
            d_e: adj.collect(&inp.energies),
            d_f: adj.collect(&inp.forces),
        };
        for (name, v) in [("∂θ/∂x", &parts.d_x), ("∂θ/∂E", &parts.d_e), ("∂θ/∂F", &parts.d_f)] {
            if v.iter().any(|x| !x.is_finite()) {
                return Err(Error::Eval(format!("non-finite partial {name}")));
            }
        }
        Ok(parts)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Checkpoint { format_version: CHECKPOINT_VERSION, model_type: "conserv".into(), model: self.clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Checkpoint<ConservModel> = serde_json::from_str(text)?;
        doc.check("conserv")?;
        let m = doc.model;
        m.spec.validate()?;
        if m.params.len() != Layout::new(&m.spec, m.n_bases()).total || m.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint(format!(
                "conservative model parameters are inconsistent with mode {:?}",
                m.spec.mode
            )));
        }
        Ok(m)
    }
}

fn check_preds(s: &Structure, preds: &[BasePrediction], m: usize) -> Result<()> {
    if preds.len() != m {
        return Err(Error::Shape(format!("{} predictions for {m} bases", preds.len())));
    }
    if let Some(k) = preds.iter().position(|p| p.forces.len() != s.len()) {
        return Err(Error::Shape(format!("prediction {k} does not match the {} atoms of the structure", s.len())));
    }
    Ok(())
}

pub fn theta_energy(m: &ConservModel, s: &Structure, preds: &[BasePrediction]) -> Result<f64> {
    check_preds(s, preds, m.n_bases())?;
    let mut tape = Tape::new();
    let inp = ThetaInputs::record(&mut tape, s, preds, m.uses_forces());
    let out = m.theta_on_tape(&mut tape, Weights::Const(&m.params), s, &inp)?;
    Ok(tape.value(out))
}

fn check_bases(m: &ConservModel, bases: &[BaseModel]) -> Result<()> {
    let ids: Vec<&str> = bases.iter().map(|b| b.id()).collect();
    if ids != m.base_ids.iter().map(String::as_str).collect::<Vec<_>>() {
        return Err(Error::Shape(format!("meta-model expects bases {:?}, got {ids:?}", m.base_ids)));
    }
    Ok(())
}

/// `F = −∂θ/∂x + Σ (∂θ/∂E_m) F_m [+ Σ H_m (∂θ/∂F_m)]`.
pub(crate) fn assemble(
    m: &ConservModel,
    s: &Structure,
    bases: &[BaseModel],
    hessian_term: bool,
) -> Result<ConservOutput> {
    check_bases(m, bases)?;
    let tapes: Vec<BaseTape> = bases.iter().map(|b| b.record(s)).collect::<Result<_>>()?;
    let preds: Vec<BasePrediction> = tapes.iter().map(BaseTape::prediction).collect();
    let parts = m.partials(s, &preds)?;
    let n = s.len();
    let mut f: Vec<f64> = parts.d_x.iter().map(|g| -g).collect();
    for (k, p) in preds.iter().enumerate() {
        for (fi, bf) in f.iter_mut().zip(p.forces.iter().flatten()) {
            *fi += parts.d_e[k] * bf;
        }
    }
    let mut calls = 0;
    if hessian_term && !parts.d_f.is_empty() {
        for (k, t) in tapes.iter().enumerate() {
            let g: Vec<Vec3> =
                parts.d_f[k * 3 * n..(k + 1) * 3 * n].chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
            let hg = t.hvp(&g)?;
            calls += 1;
            for (fi, v) in f.iter_mut().zip(hg.iter().flatten()) {
                *fi += v;
            }
        }
    }
    if let Some(i) = f.iter().position(|v| !v.is_finite()) {
        return Err(Error::Eval(format!("non-finite total force component {i}")));
    }
    Ok(ConservOutput {
        energy: parts.energy,
        forces: f.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect(),
        hvp_calls: calls,
    })
}

/// Energy and chain-rule forces of the composed map `x ↦ θ(E(x), F(x), x)`.
pub fn conserv_forces(m: &ConservModel, s: &Structure, bases: &[BaseModel]) -> Result<ConservOutput> {
    assemble(m, s, bases, true)
}

/// Hessian-free forces for a model whose θ ignores base forces.
pub fn conserv_forces_ablation(m: &ConservModel, s: &Structure, bases: &[BaseModel]) -> Result<ConservOutput> {
    if m.spec.mode != ConservMode::AblationEq7 {
        return Err(Error::Config("Hessian-free forces require a model trained in ablation_eq7 mode".into()));
    }
    assemble(m, s, bases, false)
}

/// One training frame with frozen base outputs.
struct Frame<'a> {
    structure: &'a Structure,
    preds: Vec<BasePrediction>,
    /// Dense `3N × 3N` base Hessians, full mode only.
    hessians: Vec<Vec<f64>>,
    energy: f64,
    forces: Vec<f64>,
}

fn build_frames<'a>(m: &ConservModel, bases: &[BaseModel], d: &'a Dataset) -> Result<Vec<Frame<'a>>> {
    use rayon::prelude::*;
    d.items
        .par_iter()
        .map(|it| {
            let tapes: Vec<BaseTape> = bases.iter().map(|b| b.record(&it.structure)).collect::<Result<_>>()?;
            let hessians =
                if m.uses_forces() { tapes.iter().map(BaseTape::hessian).collect::<Result<_>>()? } else { Vec::new() };
            Ok(Frame {
                structure: &it.structure,
                preds: tapes.iter().map(BaseTape::prediction).collect(),
                hessians,
                energy: it.energy,
                forces: it.forces.iter().flatten().copied().collect(),
            })
        })
        .collect()
}

fn matvec(h: &[f64], g: &[f64]) -> Vec<f64> {
    let n = g.len();
    (0..n).map(|r| h[r * n..(r + 1) * n].iter().zip(g).map(|(a, b)| a * b).sum()).collect()
}

struct Objective<'a> {
    model: &'a ConservModel,
    hyper: &'a TrainHyper,
}

impl Objective<'_> {
    /// Total forces from the recorded partials and the cached Hessians.
    fn forces(&self, f: &Frame, d_x: &[f64], d_e: &[f64], d_f: &[f64]) -> Vec<f64> {
        let n3 = d_x.len();
        let mut out: Vec<f64> = d_x.iter().map(|g| -g).collect();
        for (k, p) in f.preds.iter().enumerate() {
            for (o, bf) in out.iter_mut().zip(p.forces.iter().flatten()) {
                *o += d_e[k] * bf;
            }
            if !d_f.is_empty() {
                for (o, v) in out.iter_mut().zip(matvec(&f.hessians[k], &d_f[k * n3..(k + 1) * n3])) {
                    *o += v;
                }
            }
        }
        out
    }

    fn frame_loss(&self, f: &Frame, e: f64, forces: &[f64]) -> f64 {
        let n = f.structure.len() as f64;
        let de = (e - f.energy) / n;
        let mse = forces.iter().zip(&f.forces).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / (3.0 * n);
        self.hyper.lambda_e * de * de + self.hyper.lambda_f * mse
    }

    fn val(&self, params: &[f64], frames: &[Frame]) -> Result<f64> {
        let mut total = 0.0;
        for f in frames {
            let mut tape = Tape::new();
            let inp = ThetaInputs::record(&mut tape, f.structure, &f.preds, self.model.uses_forces());
            let out = self.model.theta_on_tape(&mut tape, Weights::Const(params), f.structure, &inp)?;
            let adj = tape.gradient(out)?;
            let forces = self.forces(f, &adj.collect(&inp.pos), &adj.collect(&inp.energies), &adj.collect(&inp.forces));
            total += self.frame_loss(f, tape.value(out), &forces);
        }
        Ok(total / frames.len() as f64)
    }

    /// The force loss depends on first derivatives of θ, so its parameter
    /// gradient is a mixed second derivative: one forward-over-reverse
    /// sweep with tangent `(−r, F_m·r, H_m r)` on `(x, E_m, F_m)`.
    fn batch(&self, params: &[f64], frames: &[&Frame]) -> Result<(f64, Vec<f64>)> {
        let b = frames.len() as f64;
        let mut tape = Tape::new();
        let pv = tape.inputs(params);
        let mut recs = Vec::with_capacity(frames.len());
        for f in frames {
            let inp = ThetaInputs::record(&mut tape, f.structure, &f.preds, self.model.uses_forces());
            let out = self.model.theta_on_tape(&mut tape, Weights::Var(&pv), f.structure, &inp)?;
            recs.push((inp, out));
        }
        let seeds: Vec<(Var, f64)> = recs.iter().map(|(_, o)| (*o, 1.0)).collect();
        let adj = tape.gradient_seeded(&seeds)?;
        let mut loss = 0.0;
        let mut dual_seeds = Vec::with_capacity(recs.len());
        let mut dir = Vec::new();
        for (f, (inp, out)) in frames.iter().zip(&recs) {
            let d_f = adj.collect(&inp.forces);
            let e = tape.value(*out);
            let forces = self.forces(f, &adj.collect(&inp.pos), &adj.collect(&inp.energies), &d_f);
            loss += self.frame_loss(f, e, &forces);
            let n = f.structure.len() as f64;
            let ce = 2.0 * self.hyper.lambda_e * (e - f.energy) / (n * n) / b;
            dual_seeds.push((*out, Dual::new(1.0, ce)));
            let r: Vec<f64> = forces
                .iter()
                .zip(&f.forces)
                .map(|(a, t)| 2.0 * self.hyper.lambda_f * (a - t) / (3.0 * n) / b)
                .collect();
            dir.extend(inp.pos.iter().zip(&r).map(|(&v, &rk)| (v, -rk)));
            for (k, p) in f.preds.iter().enumerate() {
                let fr: f64 = p.forces.iter().flatten().zip(&r).map(|(a, b)| a * b).sum();
                dir.push((inp.energies[k], fr));
                if !inp.forces.is_empty() {
                    let n3 = r.len();
                    let hr = matvec(&f.hessians[k], &r);
                    dir.extend(inp.forces[k * n3..(k + 1) * n3].iter().zip(hr).map(|(&v, t)| (v, t)));
                }
            }
        }
        let so = tape.second_order(&dual_seeds, &dir)?;
        Ok((loss / b, so.hvps(&pv)))
    }
}

fn rms(values: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for v in values {
        s += v * v;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        (s / n as f64).sqrt()
    }
}

/// Base-force feature normalization: the mean base-Hessian diagonal times
/// the radial-basis spacing. With this scale a unit change in a force
/// feature moves the Hessian-pathway forces about as much as a unit change
/// in a distance feature moves the coordinate-pathway forces.
fn force_feature_scale(spec: &ConservSpec, frames: &[Frame]) -> f64 {
    let diag = rms(frames.iter().flat_map(|f| {
        f.hessians.iter().flat_map(move |h| {
            let n3 = 3 * f.structure.len();
            (0..n3).map(move |i| h[i * n3 + i])
        })
    }));
    let spacing = spec.cutoff / (spec.n_rbf - 1) as f64;
    if diag * spacing > 1e-8 {
        diag * spacing
    } else {
        1.0
    }
}

/// Fits θ with frozen bases.
pub fn train_conserv(
    spec: &ConservSpec,
    bases: &[BaseModel],
    train: &Dataset,
    val: &Dataset,
    hyper: &TrainHyper,
) -> Result<ConservModel> {
    hyper.validate()?;
    train.require_non_empty("training")?;
    val.require_non_empty("validation")?;
    let ids: Vec<String> = bases.iter().map(|b| b.id().to_string()).collect();
    let mut model = ConservModel::init(spec, &ids, hyper.seed)?;
    let train_f = build_frames(&model, bases, train)?;
    let val_f = build_frames(&model, bases, val)?;

    let per_atom: Vec<f64> =
        train_f.iter().flat_map(|f| f.preds.iter().map(move |p| p.energy / f.structure.len() as f64)).collect();
    let mean = per_atom.iter().sum::<f64>() / per_atom.len() as f64;
    let sd = rms(per_atom.iter().map(|e| e - mean));
    model.energy_shift = mean;
    model.energy_scale = if sd > 1e-8 { sd } else { 1.0 };
    model.force_scale = force_feature_scale(spec, &train_f);
    let mut resid = Vec::new();
    for f in &train_f {
        let mb = mean_baseline(&f.preds)?;
        resid.extend(mb.forces.iter().flatten().zip(&f.forces).map(|(a, b)| a - b));
    }
    let rs = rms(resid.into_iter());
    model.readout_scale = if rs > 1e-8 { rs } else { 1.0 };

    let obj = Objective { model: &model, hyper };
    let result = fit(
        model.params.clone(),
        train_f.len(),
        hyper,
        |p, idx| {
            let batch: Vec<&Frame> = idx.iter().map(|&i| &train_f[i]).collect();
            obj.batch(p, &batch)
        },
        |p| obj.val(p, &val_f),
    )?;
    log::info!(
        "conservative meta-model ({:?}): best val loss {:.4e} at epoch {}",
        spec.mode,
        result.best_val,
        result.best_epoch
    );
    model.params = result.params;
    model.train_meta = Some(TrainMeta {
        hyper: hyper.clone(),
        n_train: train.len(),
        n_val: val.len(),
        best_epoch: result.best_epoch,
        best_val: result.best_val,
        logs: result.logs,
    });
    Ok(model)
}

/// Conservative meta-model bundled with its base models.
#[derive(Clone, Debug)]
pub struct ConservEnsemble {
    pub model: ConservModel,
    pub bases: Vec<BaseModel>,
}

impl ConservEnsemble {
    pub fn new(model: ConservModel, bases: Vec<BaseModel>) -> Result<Self> {
        check_bases(&model, &bases)?;
        Ok(ConservEnsemble { model, bases })
    }

    pub fn evaluate(&self, s: &Structure) -> Result<ConservOutput> {
        match self.model.spec.mode {
            ConservMode::FullEq6 => conserv_forces(&self.model, s, &self.bases),
            ConservMode::AblationEq7 => conserv_forces_ablation(&self.model, s, &self.bases),
        }
    }
}

impl ForceProvider for ConservEnsemble {
    fn compute(&self, s: &Structure) -> Result<ForceOutput> {
        let o = self.evaluate(s)?;
        Ok(ForceOutput { energy: Some(o.energy), forces: o.forces })
    }

    fn label(&self) -> String {
        "ensemble_conserv".into()
    }
}
