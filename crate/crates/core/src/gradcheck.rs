//! Central finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    /// Parameter name and flat index of the worst coordinate.
    pub worst: Option<(String, usize)>,
    pub checked: usize,
    /// Coordinates rejected as non-differentiable.
    pub skipped: usize,
}

impl GradCheckReport {
    pub fn passed(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

/// Compares tape gradients of the scalar built by `f` with central
/// differences at step `eps`.
///
/// Coordinates are sampled per parameter so that every tensor is covered:
/// each receives `ceil(samples / n_params)` coordinates (or all of them when
/// it is smaller). The error for one coordinate is
/// `|analytic - fd| / max(1, |analytic|, |fd|)`.
///
/// A coordinate whose forward and backward one-sided differences disagree
/// by more than [`KINK_TOL`] (relative) sits within `eps` of a point where
/// the objective is not differentiable, such as a ReLU kink or a change of
/// top-k selection. It is counted in `skipped` and replaced by another
/// coordinate of the same tensor.
pub fn grad_check<F>(
    store: &mut ParamStore,
    params: &[ParamId],
    eps: f64,
    samples: usize,
    seed: u64,
    mut f: F,
) -> Result<GradCheckReport>
where
    F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
{
    if !(eps > 0.0) {
        return Err(Error::Usage("eps must be positive".into()));
    }
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        tape.backward(loss)?
    };

    let mut eval = |store: &ParamStore| -> Result<f64> {
        let mut tape = Tape::new(store);
        let loss = f(&mut tape)?;
        let v = tape.scalar(loss);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::NonFinite("objective under perturbation".into()))
        }
    };

    let base = eval(store)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let per_param = samples.div_ceil(params.len().max(1));
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst: None,
        checked: 0,
        skipped: 0,
    };
    for &id in params {
        let n = store.get(id).numel();
        let grad = analytic.param(id);
        let mut accepted = 0;
        for i in sample(&mut rng, n, n) {
            if accepted == per_param {
                break;
            }
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + eps;
            let plus = eval(store);
            store.get_mut(id).data_mut()[i] = orig - eps;
            let minus = eval(store);
            store.get_mut(id).data_mut()[i] = orig;
            let (plus, minus) = (plus?, minus?);
            let (fwd, bwd) = ((plus - base) / eps, (base - minus) / eps);
            if (fwd - bwd).abs() > KINK_TOL * 1f64.max(fwd.abs()).max(bwd.abs()) {
                report.skipped += 1;
                continue;
            }
            accepted += 1;
            let numeric = (plus - minus) / (2.0 * eps);
            let exact = grad.map_or(0.0, |g| g[i]);
            let err = (exact - numeric).abs() / 1f64.max(exact.abs()).max(numeric.abs());
            report.checked += 1;
            if report.worst.is_none() || err > report.max_rel_err {
                report.max_rel_err = err;
                report.worst = Some((store.name(id).to_string(), i));
            }
        }
    }
    Ok(report)
}

/// Relative disagreement of one-sided differences that marks a
/// non-differentiable point.
pub const KINK_TOL: f64 = 1e-2;

/// Tolerance every built-in check must meet.
pub const TOLERANCE: f64 = 1e-4;
/// Minimum number of coordinates per built-in check.
pub const MIN_COORDS: usize = 100;

/// Step for the O(1)-loss layer checks; small enough that top-k selections
/// do not flip.
const EPS_LAYER: f64 = 1e-6;
/// Step for whole networks, whose mm²-scale losses need a larger step to
/// keep rounding error down.
const EPS_NET: f64 = 1e-5;
const SAMPLES: usize = 256;

/// Groups of built-in checks.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// Each layer type in isolation.
    Layers,
    /// Lifting networks: U-Net and both baselines.
    Unet,
    /// Stub encoder, refinement network and the full cascade loss.
    Pipeline,
}

impl Target {
    pub const ALL: [Target; 3] = [Target::Layers, Target::Unet, Target::Pipeline];

    pub fn name(self) -> &'static str {
        match self {
            Target::Layers => "layers",
            Target::Unet => "unet",
            Target::Pipeline => "pipeline",
        }
    }
}

impl std::str::FromStr for Target {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Target::ALL
            .into_iter()
            .find(|t| t.name() == s)
            .ok_or_else(|| Error::Usage(format!("unknown target {s:?} (expected layers, unet or pipeline)")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedReport {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl NamedReport {
    /// Within [`TOLERANCE`] over at least [`MIN_COORDS`] coordinates, with
    /// no more than one skipped coordinate per twenty scored.
    pub fn passed(&self) -> bool {
        self.report.passed(TOLERANCE)
            && self.report.checked >= MIN_COORDS
            && self.report.skipped * 20 <= self.report.checked
    }
}

/// Runs every check of `target`.
pub fn run_target(target: Target, seed: u64) -> Result<Vec<NamedReport>> {
    match target {
        Target::Layers => suite::layers(seed),
        Target::Unet => suite::unet(seed),
        Target::Pipeline => suite::pipeline(seed),
    }
}

mod suite {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::{grad_check, NamedReport, EPS_LAYER, EPS_NET, SAMPLES};
    use crate::error::Result;
    use crate::keypoints::{fixed_pool_groups, NUM_NODES};
    use crate::layers::{
        fixed_pool_forward, fixed_unpool_forward, topk_unpool, Activation, AdaptiveGraphConv,
        AdjacencyInit, GraphPool, GraphUnpool, NodePartition, TopKPool,
    };
    use crate::params::{ParamId, ParamStore};
    use crate::pipeline::{hope_loss, stack_rows, FeatureProvider, HopeLossWeights, Pipeline, PipelineConfig};
    use crate::synth::{generate_dataset, GraspSpec};
    use crate::tape::{Tape, Var};
    use crate::tensor::Tensor;
    use crate::unet::{GcnLifter, GraphUNet, Lifter, MlpLifter, UNetConfig};

    const BATCH: usize = 2;

    fn check<F>(
        name: &'static str,
        eps: f64,
        store: &mut ParamStore,
        ids: &[ParamId],
        seed: u64,
        f: F,
    ) -> Result<NamedReport>
    where
        F: for<'a> FnMut(&mut Tape<'a>) -> Result<Var>,
    {
        let report = grad_check(store, ids, eps, SAMPLES, seed, f)?;
        log::info!(
            "{name}: max rel err {:.3e} over {} coords ({} skipped)",
            report.max_rel_err,
            report.checked,
            report.skipped
        );
        Ok(NamedReport { name, report })
    }

    /// Regression loss against a fixed random target of the output's shape.
    fn mse_to_random(t: &mut Tape<'_>, y: Var, seed: u64) -> Result<Var> {
        let (r, c) = (t.value(y).rows(), t.value(y).cols());
        let target = Tensor::uniform(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let g = t.constant(target);
        t.mse(y, g)
    }

    pub(super) fn layers(seed: u64) -> Result<Vec<NamedReport>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = Vec::new();

        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(BATCH * NUM_NODES, 4, 1.0, &mut rng));
        let agc = AdaptiveGraphConv::new(&mut store, "agc", NUM_NODES, 4, 5, Activation::Relu, AdjacencyInit::Random, &mut rng);
        let ids = [x, agc.adj, agc.weight];
        out.push(check("adaptive_graph_conv", EPS_LAYER, &mut store, &ids, seed, |t| {
            let xv = t.param(x);
            let y = agc.forward(t, xv)?;
            mse_to_random(t, y, seed)
        })?);

        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(BATCH * NUM_NODES, 3, 1.0, &mut rng));
        let pool = GraphPool::new(&mut store, "pool", NUM_NODES, 15, &mut rng)?;
        let ids = [x, pool.0.matrix];
        out.push(check("graph_pool", EPS_LAYER, &mut store, &ids, seed, |t| {
            let xv = t.param(x);
            let y = pool.forward(t, xv)?;
            let y = t.sigmoid(y);
            mse_to_random(t, y, seed)
        })?);

        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(BATCH * 15, 3, 1.0, &mut rng));
        let unpool = GraphUnpool::new(&mut store, "unpool", 15, NUM_NODES, &mut rng)?;
        let ids = [x, unpool.0.matrix];
        out.push(check("graph_unpool", EPS_LAYER, &mut store, &ids, seed, |t| {
            let xv = t.param(x);
            let y = unpool.forward(t, xv)?;
            let y = t.sigmoid(y);
            mse_to_random(t, y, seed)
        })?);

        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(BATCH * NUM_NODES, 4, 1.0, &mut rng));
        let gpool = TopKPool::new(&mut store, "gpool", NUM_NODES, 15, 4, &mut rng)?;
        let ids = [x, gpool.projection];
        out.push(check("gpool", EPS_LAYER, &mut store, &ids, seed, |t| {
            let xv = t.param(x);
            let pooled = gpool.forward(t, xv)?;
            let y = topk_unpool(t, pooled.x, &pooled.selected, NUM_NODES)?;
            mse_to_random(t, y, seed)
        })?);

        let mut store = ParamStore::new();
        let x = store.add("x", Tensor::uniform(BATCH * NUM_NODES, 4, 1.0, &mut rng));
        let partition = NodePartition::new(NUM_NODES, fixed_pool_groups()[0].clone())?;
        out.push(check("fixed_pool", EPS_LAYER, &mut store, &[x], seed, |t| {
            let xv = t.param(x);
            let p = fixed_pool_forward(t, xv, &partition)?;
            let p = t.sigmoid(p);
            let y = fixed_unpool_forward(t, p, &partition)?;
            mse_to_random(t, y, seed)
        })?);
        Ok(out)
    }

    fn lifter_input(rng: &mut ChaCha8Rng) -> Tensor {
        let mut x = Tensor::uniform(BATCH * NUM_NODES, 2, 200.0, rng);
        x.data_mut().iter_mut().for_each(|v| *v += 320.0);
        x
    }

    fn lifter_check<L: Lifter>(
        name: &'static str,
        store: &mut ParamStore,
        net: &L,
        x: &Tensor,
        seed: u64,
    ) -> Result<NamedReport> {
        let ids = net.param_ids();
        let target = Tensor::uniform(BATCH * NUM_NODES, 3, 300.0, &mut ChaCha8Rng::seed_from_u64(seed));
        check(name, EPS_NET, store, &ids, seed, |t| {
            let xv = t.constant(x.clone());
            let y = net.forward(t, xv)?;
            let g = t.constant(target.clone());
            t.mse(y, g)
        })
    }

    /// Dense perturbation of every adjacency kernel. Sparse 0/1 kernels can
    /// isolate a node, putting its pre-activations exactly on the ReLU kink
    /// where central differences are meaningless.
    fn jitter_kernels(store: &mut ParamStore, rng: &mut ChaCha8Rng) {
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).ends_with(".adj") {
                let n = store.get(id).rows();
                let noise = Tensor::uniform(n, n, 0.1, rng);
                let t = store.get_mut(id);
                t.data_mut().iter_mut().zip(noise.data()).for_each(|(a, b)| *a += b);
            }
        }
    }

    pub(super) fn unet(seed: u64) -> Result<Vec<NamedReport>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = lifter_input(&mut rng);
        let cfg = UNetConfig {
            feature_schedule: vec![4, 5, 6, 7],
            ..UNetConfig::default()
        };
        let mut out = Vec::new();
        for pooling in crate::unet::PoolingKind::ALL {
            let mut store = ParamStore::new();
            let net = GraphUNet::new(&mut store, "unet", &UNetConfig { pooling, ..cfg.clone() }, &mut rng)?;
            let name = match pooling {
                crate::unet::PoolingKind::Trainable => "unet_trainable_pool",
                crate::unet::PoolingKind::Fixed => "unet_fixed_pool",
                crate::unet::PoolingKind::Gpool => "unet_gpool",
            };
            jitter_kernels(&mut store, &mut rng);
            out.push(lifter_check(name, &mut store, &net, &x, seed)?);
        }
        let mut store = ParamStore::new();
        let gcn = GcnLifter::new(&mut store, "gcn", 6, &cfg, &mut rng);
        jitter_kernels(&mut store, &mut rng);
        out.push(lifter_check("gcn_baseline", &mut store, &gcn, &x, seed)?);
        let mut store = ParamStore::new();
        let fc = MlpLifter::new(&mut store, "fc", 6, &cfg, &mut rng);
        out.push(lifter_check("fc_baseline", &mut store, &fc, &x, seed)?);
        Ok(out)
    }

    pub(super) fn pipeline(seed: u64) -> Result<Vec<NamedReport>> {
        let config = PipelineConfig {
            unet: UNetConfig {
                feature_schedule: vec![4, 5, 6, 7],
                ..UNetConfig::default()
            },
            raster: 4,
            refine_widths: [6, 5],
            ..PipelineConfig::default()
        };
        let mut p = Pipeline::new(config, seed)?;
        let records = generate_dataset(BATCH, seed, &GraspSpec::default())?;
        let refs: Vec<_> = records.iter().collect();
        let gt2d = stack_rows(&records.iter().map(|r| r.gt2d_tensor()).collect::<Vec<_>>().iter().collect::<Vec<_>>())?;
        let gt3d = stack_rows(&records.iter().map(|r| r.gt3d_tensor()).collect::<Vec<_>>().iter().collect::<Vec<_>>())?;
        let mut out = Vec::new();

        let encoder = p.encoder.clone();
        let ids = encoder.param_ids();
        out.push(check("stub_encoder", EPS_NET, &mut p.store, &ids, seed, |t| {
            let (_, init2d) = encoder.encode(t, &refs)?;
            let g = t.constant(gt2d.clone());
            t.mse(init2d, g)
        })?);

        let refine = p.refine.clone();
        let ids = refine.param_ids();
        out.push(check("refine_net", EPS_NET, &mut p.store, &ids, seed, |t| {
            let (features, init2d) = encoder.encode(t, &refs)?;
            let y = refine.forward(t, features, init2d)?;
            let g = t.constant(gt2d.clone());
            t.mse(y, g)
        })?);

        let ids: Vec<ParamId> = p.store.ids().collect();
        let net = p.clone();
        out.push(check("full_pipeline", EPS_NET, &mut p.store, &ids, seed, |t| {
            let o = net.forward(t, &refs)?;
            let (g2, g3) = (t.constant(gt2d.clone()), t.constant(gt3d.clone()));
            let terms = hope_loss(t, [o.init2d, o.refined2d, o.pred3d], g2, g3, HopeLossWeights::default())?;
            Ok(terms.total)
        })?);
        Ok(out)
    }
}
