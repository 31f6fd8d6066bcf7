//! Direct-force meta-model: residual graph attention with jumping
//! knowledge and a per-node force head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::basemodels::{predict_all, Activation, BaseModel, Checkpoint, TrainMeta, CHECKPOINT_VERSION};
use crate::error::{Error, Result};
use crate::graph::{build_graph, EnergyEmbedder, GraphSpec, MolecularGraph};
use crate::nn::{dense_size, fit, init_dense, TrainHyper, Weights};
use crate::structure::{BasePrediction, Dataset, ForceOutput, ForceProvider, Structure, Vec3};

/// Slope of the LeakyReLU applied to attention logits.
pub const ATTENTION_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JumpingKnowledge {
    #[default]
    Concat,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectSpec {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub head_hidden: usize,
    pub activation: Activation,
    pub jk: JumpingKnowledge,
    pub graph: GraphSpec,
}

impl Default for DirectSpec {
    fn default() -> Self {
        DirectSpec {
            layers: 4,
            hidden: 128,
            heads: 4,
            head_hidden: 64,
            activation: Activation::Silu,
            jk: JumpingKnowledge::Concat,
            graph: GraphSpec::default(),
        }
    }
}

impl DirectSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 {
            return Err(Error::Config("direct.layers must be at least 1".into()));
        }
        if self.hidden == 0 || self.heads == 0 || !self.hidden.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "direct.hidden ({}) must be a positive multiple of direct.heads ({})",
                self.hidden, self.heads
            )));
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("direct.head_hidden must be at least 1".into()));
        }
        self.graph.validate()
    }
}

/// Offsets of every parameter block in the flat vector.
#[derive(Clone, Debug)]
struct Layout {
    m: usize,
    width: usize,
    embed: usize,
    proj: usize,
    layers: Vec<Vec<HeadBlock>>,
    head1: usize,
    head2: usize,
    skip: usize,
    total: usize,
}

#[derive(Clone, Copy, Debug)]
struct HeadBlock {
    w: usize,
    a_dst: usize,
    a_src: usize,
}

impl Layout {
    fn new(spec: &DirectSpec, m: usize) -> Self {
        let d_e = spec.graph.energy_embed_dim;
        let h = spec.hidden;
        let width = spec.graph.feature_width(m);
        let mut off = 0;
        let mut take = |n: usize| {
            let o = off;
            off += n;
            o
        };
        let embed = take(m * d_e + d_e);
        let proj = take(dense_size(width, h));
        let layers = (0..spec.layers)
            .map(|_| {
                (0..spec.heads)
                    .map(|_| HeadBlock { w: take(dense_size(h, h)), a_dst: take(h), a_src: take(h) })
                    .collect()
            })
            .collect();
        let head1 = take(dense_size(spec.layers * h, spec.head_hidden));
        let head2 = take(dense_size(spec.head_hidden, 3));
        let skip = take(m);
        Layout { m, width, embed, proj, layers, head1, head2, skip, total: off }
    }
}

/// Intermediate values of one forward pass.
#[derive(Clone, Debug, Default)]
pub struct DirectTrace {
    /// `[layer] → N × hidden` node states after each residual layer.
    pub layers: Vec<Vec<f64>>,
    /// `[layer][head][node] → (neighbor, weight)`.
    pub attention: Vec<Vec<Vec<Vec<(usize, f64)>>>>,
    /// `N × (layers · hidden)` jumping-knowledge rows.
    pub jk: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DirectModel {
    pub spec: DirectSpec,
    pub base_ids: Vec<String>,
    pub params: Vec<f64>,
    /// Per-atom base-energy normalization applied before embedding.
    pub energy_shift: f64,
    pub energy_scale: f64,
    pub train_meta: Option<TrainMeta>,
}

impl DirectModel {
    /// Random attention weights, zero force head, and skip weights `1/M`,
    /// so an untrained model reproduces the mean of the base forces.
    pub fn init(spec: &DirectSpec, base_ids: &[String], seed: u64) -> Result<Self> {
        spec.validate()?;
        if base_ids.is_empty() {
            return Err(Error::Config("direct meta-model needs at least one base model".into()));
        }
        let m = base_ids.len();
        let lay = Layout::new(spec, m);
        let h = spec.hidden;
        let d_e = spec.graph.energy_embed_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Vec::with_capacity(lay.total);
        init_dense(&mut p, m, d_e, 1.0, &mut rng);
        init_dense(&mut p, lay.width, h, 1.0, &mut rng);
        let a_sd = 1.0 / (h as f64).sqrt();
        for _ in 0..spec.layers {
            for _ in 0..spec.heads {
                init_dense(&mut p, h, h, 1.0, &mut rng);
                for _ in 0..2 * h {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p.push(a_sd * z);
                }
            }
        }
        init_dense(&mut p, spec.layers * h, spec.head_hidden, 1.0, &mut rng);
        init_dense(&mut p, spec.head_hidden, 3, 0.0, &mut rng);
        p.extend(std::iter::repeat_n(1.0 / m as f64, m));
        debug_assert_eq!(p.len(), lay.total);
        Ok(DirectModel {
            spec: spec.clone(),
            base_ids: base_ids.to_vec(),
            params: p,
            energy_shift: 0.0,
            energy_scale: 1.0,
            train_meta: None,
        })
    }

    pub fn n_bases(&self) -> usize {
        self.base_ids.len()
    }

    pub fn embedder(&self) -> EnergyEmbedder {
        let m = self.n_bases();
        let d = self.spec.graph.energy_embed_dim;
        EnergyEmbedder {
            weight: self.params[..m * d].to_vec(),
            bias: self.params[m * d..m * d + d].to_vec(),
            shift: self.energy_shift,
            scale: self.energy_scale,
        }
    }

    pub fn graph(&self, s: &Structure, preds: &[BasePrediction]) -> Result<MolecularGraph> {
        build_graph(s, preds, &self.spec.graph, &self.embedder())
    }

    /// Zeroes the force head, base-force skip weights included.
    pub fn zero_head(&mut self) {
        let lay = Layout::new(&self.spec, self.n_bases());
        for v in &mut self.params[lay.head1..] {
            *v = 0.0;
        }
    }

    /// Records the per-node forces on `tape`.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        w: Weights,
        g: &MolecularGraph,
        mut trace: Option<&mut DirectTrace>,
    ) -> Result<Vec<[Var; 3]>> {
        let lay = Layout::new(&self.spec, self.n_bases());
        if g.n_bases != lay.m || g.width != lay.width {
            return Err(Error::Shape(format!(
                "graph has width {} for {} bases, model expects width {} for {} bases",
                g.width, g.n_bases, lay.width, lay.m
            )));
        }
        if w.len() != lay.total {
            return Err(Error::Shape(format!("expected {} parameters, got {}", lay.total, w.len())));
        }
        let n = g.n_nodes;
        let m = lay.m;
        let h = self.spec.hidden;
        let d_e = self.spec.graph.energy_embed_dim;

        let e_norm: Vec<Var> =
            g.energies_per_atom.iter().map(|e| tape.constant((e - self.energy_shift) / self.energy_scale)).collect();
        let embed = embed_on_tape(tape, w, lay.embed, &e_norm, d_e);

        let mut state: Vec<Vec<Var>> = (0..n)
            .map(|j| {
                let mut x: Vec<Var> = g.force_block(j).iter().map(|&v| tape.constant(v)).collect();
                x.extend_from_slice(&embed);
                x.extend(g.onehot_block(j, d_e).iter().map(|&v| tape.constant(v)));
                w.dense(tape, lay.proj, &x, h)
            })
            .collect();

        // in-neighbors of each node, self included exactly once
        let mut neigh: Vec<Vec<usize>> = vec![Vec::new(); n];
        for e in &g.edges {
            if e.src != e.dst {
                neigh[e.dst].push(e.src);
            }
        }
        for (i, nb) in neigh.iter_mut().enumerate() {
            nb.push(i);
            nb.sort_unstable();
        }

        let mut jk: Vec<Vec<Var>> = vec![Vec::with_capacity(self.spec.layers * h); n];
        for heads in &lay.layers {
            let mut att_layer = Vec::new();
            let mut sum: Vec<Vec<Var>> = vec![Vec::new(); n];
            for hb in heads {
                let z: Vec<Vec<Var>> = state.iter().map(|x| w.dense(tape, hb.w, x, h)).collect();
                let a_dst: Vec<Var> = (0..h).map(|k| w.scalar(tape, hb.a_dst + k)).collect();
                let a_src: Vec<Var> = (0..h).map(|k| w.scalar(tape, hb.a_src + k)).collect();
                let s_dst: Vec<Var> = z.iter().map(|zi| tape.dot(&a_dst, zi)).collect();
                let s_src: Vec<Var> = z.iter().map(|zi| tape.dot(&a_src, zi)).collect();
                let mut att_head = Vec::with_capacity(n);
                for i in 0..n {
                    let logits: Vec<Var> = neigh[i]
                        .iter()
                        .map(|&j| {
                            let e = tape.add(s_dst[i], s_src[j]);
                            tape.leaky_relu(e, ATTENTION_SLOPE)
                        })
                        .collect();
                    // the max shift cancels in the softmax; it only guards exp
                    let mx = logits.iter().map(|&l| tape.value(l)).fold(f64::NEG_INFINITY, f64::max);
                    let ex: Vec<Var> = logits
                        .iter()
                        .map(|&l| {
                            let s = tape.shift(l, -mx);
                            tape.exp(s)
                        })
                        .collect();
                    let total = tape.sum(&ex);
                    let alpha: Vec<Var> = ex.iter().map(|&x| tape.div(x, total)).collect();
                    if trace.is_some() {
                        att_head.push(neigh[i].iter().zip(&alpha).map(|(&j, &a)| (j, tape.value(a))).collect());
                    }
                    for k in 0..h {
                        let col: Vec<Var> = neigh[i].iter().map(|&j| z[j][k]).collect();
                        let mixed = tape.dot(&alpha, &col);
                        if sum[i].len() < h {
                            sum[i].push(mixed);
                        } else {
                            sum[i][k] = tape.add(sum[i][k], mixed);
                        }
                    }
                }
                att_layer.push(att_head);
            }
            let inv = 1.0 / heads.len() as f64;
            for i in 0..n {
                for k in 0..h {
                    let mean = tape.scale(sum[i][k], inv);
                    let act = tape.silu(mean);
                    state[i][k] = tape.add(state[i][k], act);
                }
                jk[i].extend_from_slice(&state[i]);
            }
            if let Some(t) = trace.as_deref_mut() {
                t.layers.push(state.iter().flat_map(|r| tape.values(r)).collect());
                t.attention.push(att_layer);
            }
        }
        if let Some(t) = trace {
            t.jk = jk.iter().flat_map(|r| tape.values(r)).collect();
        }

        let skip: Vec<Var> = (0..m).map(|k| w.scalar(tape, lay.skip + k)).collect();
        let mut out = Vec::with_capacity(n);
        for (i, row) in jk.iter().enumerate() {
            let hid = w.dense(tape, lay.head1, row, self.spec.head_hidden);
            let hid: Vec<Var> = hid.into_iter().map(|v| tape.silu(v)).collect();
            let f = w.dense(tape, lay.head2, &hid, 3);
            let fb = g.force_block(i);
            let mut comp = [f[0]; 3];
            for c in 0..3 {
                let col: Vec<Var> = (0..m).map(|k| tape.constant(fb[3 * k + c])).collect();
                let mix = tape.dot(&skip, &col);
                comp[c] = tape.add(f[c], mix);
            }
            out.push(comp);
        }
        Ok(out)
    }

    pub fn forward_traced(&self, g: &MolecularGraph) -> Result<(Vec<Vec3>, DirectTrace)> {
        let mut tape = Tape::new();
        let mut trace = DirectTrace::default();
        let out = self.forward_on_tape(&mut tape, Weights::Const(&self.params), g, Some(&mut trace))?;
        Ok((out.iter().map(|f| [tape.value(f[0]), tape.value(f[1]), tape.value(f[2])]).collect(), trace))
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = Checkpoint { format_version: CHECKPOINT_VERSION, model_type: "direct".into(), model: self.clone() };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: Checkpoint<DirectModel> = serde_json::from_str(text)?;
        doc.check("direct")?;
        let m = doc.model;
        m.spec.validate()?;
        if m.params.len() != Layout::new(&m.spec, m.n_bases()).total || m.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::Checkpoint("direct model parameters are inconsistent with its spec".into()));
        }
        Ok(m)
    }
}

/// `W x + b` for the energy embedding, where `W` is stored `M × d_E`.
fn embed_on_tape(tape: &mut Tape, w: Weights, offset: usize, x: &[Var], d: usize) -> Vec<Var> {
    let m = x.len();
    let mut xs = x.to_vec();
    xs.push(tape.constant(1.0));
    (0..d)
        .map(|k| {
            let mut col: Vec<Var> = (0..m).map(|j| w.scalar(tape, offset + j * d + k)).collect();
            col.push(w.scalar(tape, offset + m * d + k));
            tape.dot(&col, &xs)
        })
        .collect()
}

pub fn direct_forward(m: &DirectModel, g: &MolecularGraph) -> Result<Vec<Vec3>> {
    Ok(m.forward_traced(g)?.0)
}

/// Component-wise mean of base predictions.
pub fn mean_baseline(preds: &[BasePrediction]) -> Result<BasePrediction> {
    let first = preds.first().ok_or_else(|| Error::Shape("mean of zero predictions".into()))?;
    let n = first.forces.len();
    if preds.iter().any(|p| p.forces.len() != n) {
        return Err(Error::Shape("predictions disagree on atom count".into()));
    }
    let k = preds.len() as f64;
    let energy = preds.iter().map(|p| p.energy).sum::<f64>() / k;
    let forces =
        (0..n).map(|i| std::array::from_fn(|c| preds.iter().map(|p| p.forces[i][c]).sum::<f64>() / k)).collect();
    Ok(BasePrediction { energy, forces })
}

/// A frame with its cached base predictions.
pub struct CachedFrame<'a> {
    pub structure: &'a Structure,
    pub preds: Vec<BasePrediction>,
    pub forces: &'a [Vec3],
}

pub fn cache_frames<'a>(bases: &[BaseModel], d: &'a Dataset) -> Result<Vec<CachedFrame<'a>>> {
    let structures: Vec<&Structure> = d.items.iter().map(|it| &it.structure).collect();
    let preds = predict_all(bases, &structures)?;
    Ok(d.items
        .iter()
        .zip(preds)
        .map(|(it, p)| CachedFrame { structure: &it.structure, preds: p, forces: &it.forces })
        .collect())
}

type Sample<'a> = (MolecularGraph, &'a [Vec3]);

fn batch_loss(model: &DirectModel, params: &[f64], graphs: &[&Sample], grad: bool) -> Result<(f64, Vec<f64>)> {
    let mut tape = Tape::new();
    let pv;
    let w = if grad {
        pv = tape.inputs(params);
        Weights::Var(&pv)
    } else {
        pv = Vec::new();
        Weights::Const(params)
    };
    let mut terms = Vec::new();
    for (g, target) in graphs {
        let f = model.forward_on_tape(&mut tape, w, g, None)?;
        let mut sq = Vec::with_capacity(3 * f.len());
        for (fi, ti) in f.iter().zip(target.iter()) {
            for c in 0..3 {
                let d = tape.shift(fi[c], -ti[c]);
                sq.push(tape.square(d));
            }
        }
        let s = tape.sum(&sq);
        terms.push(tape.scale(s, 1.0 / sq.len() as f64));
    }
    let total = tape.sum(&terms);
    let loss = tape.scale(total, 1.0 / graphs.len() as f64);
    let value = tape.value(loss);
    if !grad {
        return Ok((value, Vec::new()));
    }
    let adj = tape.gradient(loss)?;
    Ok((value, adj.collect(&pv)))
}

fn energy_stats(frames: &[CachedFrame]) -> (f64, f64) {
    let v: Vec<f64> = frames.iter().flat_map(|f| f.preds.iter().map(|p| p.energy / f.structure.len() as f64)).collect();
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    let sd = (v.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    (mean, if sd > 1e-8 { sd } else { 1.0 })
}

/// Trains on cached predictions; `base_ids` names the prediction columns.
pub fn train_direct_cached<'a>(
    spec: &DirectSpec,
    base_ids: &[String],
    train: &'a [CachedFrame<'a>],
    val: &'a [CachedFrame<'a>],
    hyper: &TrainHyper,
) -> Result<DirectModel> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Validation("direct meta-model needs non-empty training and validation sets".into()));
    }
    let mut model = DirectModel::init(spec, base_ids, hyper.seed)?;
    let (shift, scale) = energy_stats(train);
    model.energy_shift = shift;
    model.energy_scale = scale;
    let graphs = |frames: &'a [CachedFrame<'a>]| -> Result<Vec<Sample<'a>>> {
        frames.iter().map(|f| Ok((model.graph(f.structure, &f.preds)?, f.forces))).collect()
    };
    let train_g = graphs(train)?;
    let val_g = graphs(val)?;
    let val_refs: Vec<&Sample> = val_g.iter().collect();
    let result = fit(
        model.params.clone(),
        train_g.len(),
        hyper,
        |p, idx| {
            let batch: Vec<&Sample> = idx.iter().map(|&i| &train_g[i]).collect();
            batch_loss(&model, p, &batch, true)
        },
        |p| Ok(batch_loss(&model, p, &val_refs, false)?.0),
    )?;
    log::info!("direct meta-model: best val MSE {:.4e} at epoch {}", result.best_val, result.best_epoch);
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

pub fn train_direct(
    spec: &DirectSpec,
    bases: &[BaseModel],
    train: &Dataset,
    val: &Dataset,
    hyper: &TrainHyper,
) -> Result<DirectModel> {
    train.require_non_empty("training")?;
    val.require_non_empty("validation")?;
    let ids: Vec<String> = bases.iter().map(|b| b.id().to_string()).collect();
    train_direct_cached(spec, &ids, &cache_frames(bases, train)?, &cache_frames(bases, val)?, hyper)
}

/// Direct meta-model bundled with its base models.
#[derive(Clone, Debug)]
pub struct DirectEnsemble {
    pub model: DirectModel,
    pub bases: Vec<BaseModel>,
}

impl DirectEnsemble {
    pub fn new(model: DirectModel, bases: Vec<BaseModel>) -> Result<Self> {
        let ids: Vec<&str> = bases.iter().map(|b| b.id()).collect();
        if ids != model.base_ids.iter().map(String::as_str).collect::<Vec<_>>() {
            return Err(Error::Checkpoint(format!("meta-model expects bases {:?}, got {ids:?}", model.base_ids)));
        }
        Ok(DirectEnsemble { model, bases })
    }
}

impl ForceProvider for DirectEnsemble {
    fn compute(&self, s: &Structure) -> Result<ForceOutput> {
        let preds = self.bases.iter().map(|b| b.predict(s)).collect::<Result<Vec<_>>>()?;
        let g = self.model.graph(s, &preds)?;
        Ok(ForceOutput { energy: None, forces: direct_forward(&self.model, &g)? })
    }

    fn label(&self) -> String {
        "ensemble_direct".into()
    }
}

/// Mean of the base models as a force provider.
#[derive(Clone, Debug)]
pub struct MeanEnsemble(pub Vec<BaseModel>);

impl ForceProvider for MeanEnsemble {
    fn compute(&self, s: &Structure) -> Result<ForceOutput> {
        let preds = self.0.iter().map(|b| b.predict(s)).collect::<Result<Vec<_>>>()?;
        let p = mean_baseline(&preds)?;
        Ok(ForceOutput { energy: Some(p.energy), forces: p.forces })
    }

    fn label(&self) -> String {
        "mean_baseline".into()
    }
}
