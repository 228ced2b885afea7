//! Graph U-Net lifting 29×2 pixel coordinates to 29×3 millimetre
//! coordinates, plus the two non-pooling baselines used in ablations.
//!
//! Layout for a node schedule `n_0 > n_1 > … > n_L` and feature schedule
//! `f_0 … f_L`:
//!
//! ```text
//! enc_i   : AGC(n_i, f_{i-1} → f_i, relu)      (f_{-1} = 3)
//! pool_i  : n_i → n_{i+1}
//! bottleneck : AGC(n_L, f_{L-1} → f_L, relu)
//! unpool_i: n_{i+1} → n_i
//! dec_i   : AGC(n_i, width(unpooled) + f_i → f_i, relu)   (skip concat)
//! head    : AGC(n_0, f_0 → 3, linear)
//! ```
//!
//! Inputs are multiplied by `input_scale` and extended with a constant
//! channel (see [`node_input`]); the head output is multiplied by
//! `output_scale`. Both scales are fixed constants that keep activations
//! near unit range.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints::{self, NUM_NODES};
use crate::layers::{
    fixed_pool_forward, fixed_unpool_forward, topk_unpool, Activation, AdaptiveGraphConv,
    AdjacencyInit, GraphPool, GraphUnpool, NodePartition, TopKPool,
};
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Parameter count of [`build_default_unet`].
pub const DEFAULT_PARAM_COUNT: usize = 434_755;

/// How node counts shrink and grow between U-Net levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PoolingKind {
    /// Learned dense node maps.
    #[default]
    Trainable,
    /// Mean over fixed skeleton groups; only defined for `[29, 15, 8, 4]`.
    Fixed,
    /// Top-k scoring with sigmoid gating; unpooling scatters rows back.
    Gpool,
}

impl PoolingKind {
    pub const ALL: [PoolingKind; 3] = [PoolingKind::Trainable, PoolingKind::Fixed, PoolingKind::Gpool];

    pub fn name(self) -> &'static str {
        match self {
            PoolingKind::Trainable => "trainable",
            PoolingKind::Fixed => "fixed",
            PoolingKind::Gpool => "gpool",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct UNetConfig {
    pub node_schedule: Vec<usize>,
    pub feature_schedule: Vec<usize>,
    pub pooling: PoolingKind,
    pub adjacency_init: AdjacencyInit,
    pub input_scale: f64,
    pub output_scale: f64,
}

impl Default for UNetConfig {
    fn default() -> Self {
        Self {
            node_schedule: vec![29, 15, 8, 4],
            feature_schedule: vec![64, 128, 256, 512],
            pooling: PoolingKind::Trainable,
            adjacency_init: AdjacencyInit::Identity,
            input_scale: 1.0 / 320.0,
            output_scale: 100.0,
        }
    }
}

impl UNetConfig {
    /// Narrow widths for single-core training runs.
    pub fn compact() -> Self {
        Self {
            feature_schedule: vec![16, 32, 64, 128],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ns = &self.node_schedule;
        if ns.len() < 2 || ns[0] != NUM_NODES {
            return Err(Error::Usage(format!(
                "node schedule must start at {NUM_NODES} and have at least two levels, got {ns:?}"
            )));
        }
        if ns.windows(2).any(|w| w[1] >= w[0]) || ns.last() == Some(&0) {
            return Err(Error::Usage(format!(
                "node schedule must be strictly decreasing and positive, got {ns:?}"
            )));
        }
        if self.feature_schedule.len() != ns.len() || self.feature_schedule.contains(&0) {
            return Err(Error::Usage(format!(
                "feature schedule needs {} positive widths, got {:?}",
                ns.len(),
                self.feature_schedule
            )));
        }
        if self.pooling == PoolingKind::Fixed && ns[..] != [29, 15, 8, 4] {
            return Err(Error::Usage(
                "fixed pooling groups exist only for the [29, 15, 8, 4] schedule".into(),
            ));
        }
        if !(self.input_scale.is_finite() && self.input_scale > 0.0)
            || !(self.output_scale.is_finite() && self.output_scale > 0.0)
        {
            return Err(Error::Usage("input/output scales must be positive".into()));
        }
        Ok(())
    }
}

/// Per-node input width: scaled `u`, `v` and a constant 1.
pub const INPUT_FEATURES: usize = 3;

/// `[u·scale, v·scale, 1]` per node. The constant channel lets the
/// bias-free layers represent affine maps; without it the whole network is
/// positively homogeneous in its input.
pub fn node_input(t: &mut Tape<'_>, coords2d: Var, scale: f64) -> Result<Var> {
    let rows = t.value(coords2d).rows();
    let xy = t.scale(coords2d, scale);
    let one = t.constant(Tensor::full(rows, 1, 1.0));
    t.concat_cols(xy, one)
}

/// A network mapping stacked `(batch·29)×2` pixel coordinates to
/// `(batch·29)×3` millimetre coordinates.
pub trait Lifter {
    fn forward(&self, t: &mut Tape<'_>, coords2d: Var) -> Result<Var>;

    /// Every parameter the network reads.
    fn param_ids(&self) -> Vec<ParamId>;

    /// Parameters of pooling layers (empty when there are none).
    fn pool_param_ids(&self) -> Vec<ParamId> {
        Vec::new()
    }
}

macro_rules! forward_lifter {
    ($($ptr:ty),*) => {$(
        impl<L: Lifter + ?Sized> Lifter for $ptr {
            fn forward(&self, t: &mut Tape<'_>, coords2d: Var) -> Result<Var> {
                (**self).forward(t, coords2d)
            }

            fn param_ids(&self) -> Vec<ParamId> {
                (**self).param_ids()
            }

            fn pool_param_ids(&self) -> Vec<ParamId> {
                (**self).pool_param_ids()
            }
        }
    )*};
}

forward_lifter!(Box<L>, &L);

#[derive(Debug, Clone)]
enum Resample {
    Trainable(GraphPool, GraphUnpool),
    Fixed(NodePartition),
    TopK(TopKPool),
}

#[derive(Debug, Clone)]
pub struct GraphUNet {
    config: UNetConfig,
    encoders: Vec<AdaptiveGraphConv>,
    resample: Vec<Resample>,
    bottleneck: AdaptiveGraphConv,
    decoders: Vec<AdaptiveGraphConv>,
    head: AdaptiveGraphConv,
}

impl GraphUNet {
    /// Registers all parameters under `<prefix>.` in `store`.
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        config: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        config.validate()?;
        let ns = &config.node_schedule;
        let fs = &config.feature_schedule;
        let levels = ns.len() - 1;
        let init = config.adjacency_init;
        let fixed = keypoints::fixed_pool_groups();

        let mut encoders = Vec::with_capacity(levels);
        let mut resample = Vec::with_capacity(levels);
        let mut width = INPUT_FEATURES;
        for i in 0..levels {
            encoders.push(AdaptiveGraphConv::new(
                store,
                &format!("{prefix}.enc{i}"),
                ns[i],
                width,
                fs[i],
                Activation::Relu,
                init,
                rng,
            ));
            width = fs[i];
            resample.push(match config.pooling {
                PoolingKind::Trainable => Resample::Trainable(
                    GraphPool::new(store, &format!("{prefix}.pool{i}"), ns[i], ns[i + 1], rng)?,
                    GraphUnpool::new(store, &format!("{prefix}.unpool{i}"), ns[i + 1], ns[i], rng)?,
                ),
                PoolingKind::Fixed => Resample::Fixed(NodePartition::new(ns[i], fixed[i].clone())?),
                PoolingKind::Gpool => Resample::TopK(TopKPool::new(
                    store,
                    &format!("{prefix}.pool{i}"),
                    ns[i],
                    ns[i + 1],
                    width,
                    rng,
                )?),
            });
        }
        let bottleneck = AdaptiveGraphConv::new(
            store,
            &format!("{prefix}.bottleneck"),
            ns[levels],
            width,
            fs[levels],
            Activation::Relu,
            init,
            rng,
        );
        width = fs[levels];
        let mut decoders = Vec::with_capacity(levels);
        for i in (0..levels).rev() {
            decoders.push(AdaptiveGraphConv::new(
                store,
                &format!("{prefix}.dec{i}"),
                ns[i],
                width + fs[i],
                fs[i],
                Activation::Relu,
                init,
                rng,
            ));
            width = fs[i];
        }
        decoders.reverse();
        let head = AdaptiveGraphConv::new(
            store,
            &format!("{prefix}.head"),
            ns[0],
            width,
            3,
            Activation::Linear,
            init,
            rng,
        );
        Ok(Self {
            config: config.clone(),
            encoders,
            resample,
            bottleneck,
            decoders,
            head,
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    /// All graph convolutions in forward order.
    pub fn conv_layers(&self) -> Vec<&AdaptiveGraphConv> {
        let mut out: Vec<&AdaptiveGraphConv> = self.encoders.iter().collect();
        out.push(&self.bottleneck);
        out.extend(self.decoders.iter().rev());
        out.push(&self.head);
        out
    }
}

impl Lifter for GraphUNet {
    fn forward(&self, t: &mut Tape<'_>, coords2d: Var) -> Result<Var> {
        let x = t.value(coords2d);
        if x.cols() != 2 || x.rows() == 0 || !x.rows().is_multiple_of(NUM_NODES) {
            return Err(Error::shape(
                "unet_forward",
                format!("expected (batch*29)x2 input, got {}x{}", x.rows(), x.cols()),
            ));
        }
        let levels = self.encoders.len();
        let mut h = node_input(t, coords2d, self.config.input_scale)?;
        let mut skips = Vec::with_capacity(levels);
        let mut selections = Vec::with_capacity(levels);
        for (enc, rs) in self.encoders.iter().zip(&self.resample) {
            h = enc.forward(t, h)?;
            skips.push(h);
            h = match rs {
                Resample::Trainable(pool, _) => pool.forward(t, h)?,
                Resample::Fixed(part) => fixed_pool_forward(t, h, part)?,
                Resample::TopK(pool) => {
                    let out = pool.forward(t, h)?;
                    selections.push(out.selected);
                    out.x
                }
            };
        }
        h = self.bottleneck.forward(t, h)?;
        for i in (0..levels).rev() {
            h = match &self.resample[i] {
                Resample::Trainable(_, unpool) => unpool.forward(t, h)?,
                Resample::Fixed(part) => fixed_unpool_forward(t, h, part)?,
                Resample::TopK(pool) => topk_unpool(t, h, &selections[i], pool.n_in)?,
            };
            h = t.concat_cols(h, skips[i])?;
            h = self.decoders[i].forward(t, h)?;
        }
        let out = self.head.forward(t, h)?;
        Ok(t.scale(out, self.config.output_scale))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for conv in self.conv_layers() {
            ids.extend([conv.adj, conv.weight]);
        }
        ids.extend(self.pool_param_ids());
        ids.sort_unstable_by_key(|id| id.index());
        ids
    }

    fn pool_param_ids(&self) -> Vec<ParamId> {
        let mut ids = Vec::new();
        for rs in &self.resample {
            match rs {
                Resample::Trainable(p, u) => ids.extend([p.0.matrix, u.0.matrix]),
                Resample::Fixed(_) => {}
                Resample::TopK(p) => ids.push(p.projection),
            }
        }
        ids
    }
}

/// Parameters plus the network that reads them.
#[derive(Debug, Clone)]
pub struct Model<L> {
    pub store: ParamStore,
    pub net: L,
}

impl<L: Lifter> Model<L> {
    /// Inference on one `29×2` sample or a stacked batch.
    pub fn predict(&self, coords2d: &Tensor) -> Result<Tensor> {
        let mut t = Tape::new(&self.store);
        let x = t.constant(coords2d.clone());
        let y = self.net.forward(&mut t, x)?;
        Ok(t.value(y).clone())
    }
}

pub fn build_unet(config: &UNetConfig, seed: u64) -> Result<Model<GraphUNet>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let net = GraphUNet::new(&mut store, "unet", config, &mut rng)?;
    Ok(Model { store, net })
}

/// Default configuration: nodes `[29, 15, 8, 4]`, widths
/// `[64, 128, 256, 512]`, trainable pooling, identity adjacency init.
pub fn build_default_unet(seed: u64) -> Model<GraphUNet> {
    build_unet(&UNetConfig::default(), seed).expect("default config is valid")
}

/// Three adaptive graph convolutions on the full graph, no pooling.
#[derive(Debug, Clone)]
pub struct GcnLifter {
    layers: [AdaptiveGraphConv; 3],
    input_scale: f64,
    output_scale: f64,
}

impl GcnLifter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        config: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let init = config.adjacency_init;
        let mut layer = |i: usize, fin, fout, act| {
            AdaptiveGraphConv::new(store, &format!("{prefix}.gc{i}"), NUM_NODES, fin, fout, act, init, rng)
        };
        let layers = [
            layer(0, INPUT_FEATURES, hidden, Activation::Relu),
            layer(1, hidden, hidden, Activation::Relu),
            layer(2, hidden, 3, Activation::Linear),
        ];
        Self {
            layers,
            input_scale: config.input_scale,
            output_scale: config.output_scale,
        }
    }
}

impl Lifter for GcnLifter {
    fn forward(&self, t: &mut Tape<'_>, coords2d: Var) -> Result<Var> {
        let mut h = node_input(t, coords2d, self.input_scale)?;
        for l in &self.layers {
            h = l.forward(t, h)?;
        }
        Ok(t.scale(h, self.output_scale))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.adj, l.weight]).collect()
    }
}

/// Three dense layers with biases on the flattened 58-vector.
#[derive(Debug, Clone)]
pub struct MlpLifter {
    layers: [(ParamId, ParamId); 3],
    input_scale: f64,
    output_scale: f64,
}

impl MlpLifter {
    pub fn new(
        store: &mut ParamStore,
        prefix: &str,
        hidden: usize,
        config: &UNetConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let dims = [(2 * NUM_NODES, hidden), (hidden, hidden), (hidden, 3 * NUM_NODES)];
        let layers = std::array::from_fn(|i| {
            let (fin, fout) = dims[i];
            let bound = 1.0 / (fin as f64).sqrt();
            let w = store.add(format!("{prefix}.fc{i}.weight"), Tensor::uniform(fin, fout, bound, rng));
            let b = store.add(format!("{prefix}.fc{i}.bias"), Tensor::uniform(1, fout, bound, rng));
            (w, b)
        });
        Self {
            layers,
            input_scale: config.input_scale,
            output_scale: config.output_scale,
        }
    }
}

impl Lifter for MlpLifter {
    fn forward(&self, t: &mut Tape<'_>, coords2d: Var) -> Result<Var> {
        let rows = t.value(coords2d).rows();
        if !rows.is_multiple_of(NUM_NODES) || t.value(coords2d).cols() != 2 {
            return Err(Error::shape("mlp_forward", "expected (batch*29)x2 input"));
        }
        let batch = rows / NUM_NODES;
        let x = t.scale(coords2d, self.input_scale);
        let mut h = t.reshape(x, batch, 2 * NUM_NODES)?;
        for (i, &(w, b)) in self.layers.iter().enumerate() {
            let (w, b) = (t.param(w), t.param(b));
            let z = t.matmul(h, w)?;
            h = t.add_row_bias(z, b)?;
            if i < 2 {
                h = t.relu(h);
            }
        }
        let out = t.reshape(h, rows, 3)?;
        Ok(t.scale(out, self.output_scale))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|&(w, b)| [w, b]).collect()
    }
}
