//! The full cascade: feature provider → 2D refinement graph network →
//! Graph U-Net lifter, with the three-term loss and staged training.
//!
//! The feature provider here is [`StubEncoder`], which rasterizes the
//! ground-truth 2D keypoints onto a coarse occupancy grid instead of looking
//! at an image. Anything implementing [`FeatureProvider`] can replace it.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use log::{debug, info};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::error::{Error, Result};
use crate::keypoints::NUM_NODES;
use crate::layers::{Activation, AdaptiveGraphConv, AdjacencyInit};
use crate::optim::{Optimizer, OptimizerKind, SgdSchedule};
use crate::params::{ParamId, ParamStore};
use crate::synth::{add_noise_with, SampleRecord, TRAIN_NOISE_SIGMA};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::unet::{GraphUNet, Lifter, UNetConfig};

/// Width of the per-image feature vector.
pub const FEATURE_DIM: usize = 2048;

/// Maps samples to image features and initial 2D estimates.
pub trait FeatureProvider {
    /// Returns `batch × FEATURE_DIM` features and `(batch·29) × 2` initial
    /// coordinates in pixels.
    fn encode(&self, t: &mut Tape<'_>, samples: &[&SampleRecord]) -> Result<(Var, Var)>;

    fn param_ids(&self) -> Vec<ParamId>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub unet: UNetConfig,
    /// Side of the occupancy grid seen by the stub encoder.
    pub raster: usize,
    /// Image side in pixels; the grid covers `[0, image_size)²`.
    pub image_size: f64,
    /// Hidden widths of the refinement network (`2050 → w0 → w1 → 2`).
    pub refine_widths: [usize; 2],
    /// Pixel scale of 2D network outputs; refinement inputs are divided by it.
    pub coord_scale: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            unet: UNetConfig::default(),
            raster: 32,
            image_size: 640.0,
            refine_widths: [512, 128],
            coord_scale: 320.0,
        }
    }
}

impl PipelineConfig {
    /// Narrow graph networks for single-core runs.
    pub fn desk() -> Self {
        Self {
            unet: UNetConfig::compact(),
            refine_widths: [128, 32],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.unet.validate()?;
        if self.raster == 0 || self.refine_widths.contains(&0) {
            return Err(Error::Usage("raster size and refinement widths must be positive".into()));
        }
        if !(self.image_size > 0.0 && self.coord_scale > 0.0) {
            return Err(Error::Usage("image size and coordinate scale must be positive".into()));
        }
        Ok(())
    }
}

/// Binary occupancy grid of the keypoints, flattened row-major (`v` rows,
/// `u` columns). Points outside the image are clamped to the border cells.
pub fn rasterize(gt2d: &[[f64; 2]], raster: usize, image_size: f64) -> Vec<f64> {
    let mut grid = vec![0.0; raster * raster];
    let cell = |x: f64| ((x / image_size * raster as f64).floor().max(0.0) as usize).min(raster - 1);
    for p in gt2d {
        grid[cell(p[1]) * raster + cell(p[0])] = 1.0;
    }
    grid
}

fn dense<R: rand::Rng>(store: &mut ParamStore, name: &str, fin: usize, fout: usize, rng: &mut R) -> (ParamId, ParamId) {
    let bound = 1.0 / (fin as f64).sqrt();
    (
        store.add(format!("{name}.weight"), Tensor::uniform(fin, fout, bound, rng)),
        store.add(format!("{name}.bias"), Tensor::uniform(1, fout, bound, rng)),
    )
}

fn affine(t: &mut Tape<'_>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
    let (w, b) = (t.param(w), t.param(b));
    let xw = t.matmul(x, w)?;
    t.add_row_bias(xw, b)
}

/// Occupancy raster → linear map to [`FEATURE_DIM`] features → linear head
/// to 58 coordinates. Head outputs are scaled by `coord_scale` and offset
/// by the image centre.
#[derive(Debug, Clone)]
pub struct StubEncoder {
    pub feature: (ParamId, ParamId),
    pub head: (ParamId, ParamId),
    raster: usize,
    image_size: f64,
    coord_scale: f64,
}

impl StubEncoder {
    pub fn new<R: rand::Rng>(store: &mut ParamStore, prefix: &str, config: &PipelineConfig, rng: &mut R) -> Self {
        let cells = config.raster * config.raster;
        Self {
            feature: dense(store, &format!("{prefix}.feature"), cells, FEATURE_DIM, rng),
            head: dense(store, &format!("{prefix}.head"), FEATURE_DIM, 2 * NUM_NODES, rng),
            raster: config.raster,
            image_size: config.image_size,
            coord_scale: config.coord_scale,
        }
    }
}

impl FeatureProvider for StubEncoder {
    fn encode(&self, t: &mut Tape<'_>, samples: &[&SampleRecord]) -> Result<(Var, Var)> {
        let cells = self.raster * self.raster;
        let mut grid = Vec::with_capacity(samples.len() * cells);
        for s in samples {
            grid.extend(rasterize(&s.gt2d, self.raster, self.image_size));
        }
        let b = samples.len();
        let r = t.constant(Tensor::matrix(b, cells, grid)?);
        let features = affine(t, r, self.feature)?;
        let h = affine(t, features, self.head)?;
        let h = t.scale(h, self.coord_scale);
        let h = t.reshape(h, b * NUM_NODES, 2)?;
        let centre = t.constant(Tensor::full(b * NUM_NODES, 2, self.image_size / 2.0));
        Ok((features, t.add(h, centre)?))
    }

    fn param_ids(&self) -> Vec<ParamId> {
        vec![self.feature.0, self.feature.1, self.head.0, self.head.1]
    }
}

/// Three adaptive graph convolutions over node features
/// `[image features | initial 2D / coord_scale]`.
#[derive(Debug, Clone)]
pub struct RefineNet {
    pub layers: [AdaptiveGraphConv; 3],
    coord_scale: f64,
}

impl RefineNet {
    pub fn new(store: &mut ParamStore, prefix: &str, config: &PipelineConfig, rng: &mut ChaCha8Rng) -> Self {
        let [w0, w1] = config.refine_widths;
        let init = AdjacencyInit::Identity;
        let mut layer = |i: usize, fin, fout, act| {
            AdaptiveGraphConv::new(store, &format!("{prefix}.gc{i}"), NUM_NODES, fin, fout, act, init, rng)
        };
        Self {
            layers: [
                layer(0, FEATURE_DIM + 2, w0, Activation::Relu),
                layer(1, w0, w1, Activation::Relu),
                layer(2, w1, 2, Activation::Linear),
            ],
            coord_scale: config.coord_scale,
        }
    }

    /// The explicit `(batch·29) × 2050` node-feature matrix.
    pub fn node_features(&self, t: &mut Tape<'_>, features: Var, init2d: Var) -> Result<Var> {
        let xy = t.scale(init2d, 1.0 / self.coord_scale);
        let broadcast = t.repeat_rows(features, NUM_NODES);
        t.concat_cols(broadcast, xy)
    }

    /// Same result as running the first layer on [`Self::node_features`],
    /// without materializing the broadcast features.
    pub fn forward(&self, t: &mut Tape<'_>, features: Var, init2d: Var) -> Result<Var> {
        let (b, fd) = (t.value(features).rows(), t.value(features).cols());
        let (r, c) = (t.value(init2d).rows(), t.value(init2d).cols());
        if fd != FEATURE_DIM || c != 2 || r != b * NUM_NODES {
            return Err(Error::shape(
                "refine2d",
                format!("features {b}x{fd} with initial coordinates {r}x{c}"),
            ));
        }
        let first = &self.layers[0];
        let xy = t.scale(init2d, 1.0 / self.coord_scale);
        let w = t.param(first.weight);
        let w_img = t.slice_rows(w, 0, FEATURE_DIM)?;
        let w_xy = t.slice_rows(w, FEATURE_DIM, FEATURE_DIM + 2)?;
        let fw = t.matmul(features, w_img)?;
        let fw = t.repeat_rows(fw, NUM_NODES);
        let xw = t.matmul(xy, w_xy)?;
        let z = t.add(fw, xw)?;
        let a = t.param(first.adj);
        let z = t.node_mix(a, z)?;
        let mut h = t.relu(z);
        for l in &self.layers[1..] {
            h = l.forward(t, h)?;
        }
        Ok(t.scale(h, self.coord_scale))
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers.iter().flat_map(|l| [l.adj, l.weight]).collect()
    }
}

/// Weights of the two 2D terms of the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HopeLossWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl Default for HopeLossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.1,
            beta: 0.1,
        }
    }
}

impl HopeLossWeights {
    pub fn validate(&self) -> Result<()> {
        if self.alpha >= 0.0 && self.beta >= 0.0 {
            Ok(())
        } else {
            Err(Error::Usage(format!("loss weights must be non-negative, got {self:?}")))
        }
    }
}

/// Tape nodes of the individual loss terms and their weighted sum.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub init2d: Var,
    pub refined2d: Var,
    pub lift3d: Var,
    pub total: Var,
}

/// `α·MSE(init2d) + β·MSE(refined2d) + MSE(pred3d)`; 2D terms in px²,
/// the 3D term in mm².
pub fn hope_loss(
    t: &mut Tape<'_>,
    [init2d, refined2d, pred3d]: [Var; 3],
    gt2d: Var,
    gt3d: Var,
    w: HopeLossWeights,
) -> Result<LossTerms> {
    w.validate()?;
    let li = t.mse(init2d, gt2d)?;
    let lr = t.mse(refined2d, gt2d)?;
    let l3 = t.mse(pred3d, gt3d)?;
    let a = t.scale(li, w.alpha);
    let b = t.scale(lr, w.beta);
    let ab = t.add(a, b)?;
    let total = t.add(ab, l3)?;
    Ok(LossTerms {
        init2d: li,
        refined2d: lr,
        lift3d: l3,
        total,
    })
}

/// [`hope_loss`] on plain tensors.
pub fn hope_loss_value(
    init2d: &Tensor,
    refined2d: &Tensor,
    pred3d: &Tensor,
    gt2d: &Tensor,
    gt3d: &Tensor,
    w: HopeLossWeights,
) -> Result<f64> {
    let store = ParamStore::new();
    let mut t = Tape::new(&store);
    let vars = [init2d, refined2d, pred3d].map(|x| t.constant(x.clone()));
    let (g2, g3) = (t.constant(gt2d.clone()), t.constant(gt3d.clone()));
    let terms = hope_loss(&mut t, vars, g2, g3, w)?;
    Ok(t.scalar(terms.total))
}

/// Outputs of one cascade forward pass over a batch.
#[derive(Debug, Clone, Copy)]
pub struct CascadeOutputs {
    pub features: Var,
    pub init2d: Var,
    pub refined2d: Var,
    pub pred3d: Var,
}

#[derive(Debug, Clone)]
pub struct Pipeline {
    pub config: PipelineConfig,
    pub store: ParamStore,
    pub encoder: StubEncoder,
    pub refine: RefineNet,
    pub unet: GraphUNet,
}

impl Pipeline {
    pub fn new(config: PipelineConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let encoder = StubEncoder::new(&mut store, "encoder", &config, &mut rng);
        let refine = RefineNet::new(&mut store, "refine", &config, &mut rng);
        let unet = GraphUNet::new(&mut store, "unet", &config.unet, &mut rng)?;
        Ok(Self {
            config,
            store,
            encoder,
            refine,
            unet,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, samples: &[&SampleRecord]) -> Result<CascadeOutputs> {
        if samples.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let (features, init2d) = self.encoder.encode(t, samples)?;
        let refined2d = self.refine.forward(t, features, init2d)?;
        let pred3d = self.unet.forward(t, refined2d)?;
        Ok(CascadeOutputs {
            features,
            init2d,
            refined2d,
            pred3d,
        })
    }

    /// Refined 2D (29×2 px) and 3D (29×3 mm) for one sample.
    pub fn predict(&self, sample: &SampleRecord) -> Result<(Tensor, Tensor)> {
        Ok(self.predict_batch(std::slice::from_ref(sample))?.remove(0))
    }

    pub fn predict_batch(&self, samples: &[SampleRecord]) -> Result<Vec<(Tensor, Tensor)>> {
        let mut out = Vec::with_capacity(samples.len());
        for chunk in samples.chunks(64) {
            let refs: Vec<&SampleRecord> = chunk.iter().collect();
            let mut t = Tape::new(&self.store);
            let o = self.forward(&mut t, &refs)?;
            let r2 = split_rows(t.value(o.refined2d));
            let p3 = split_rows(t.value(o.pred3d));
            out.extend(r2.into_iter().zip(p3));
        }
        Ok(out)
    }

    /// Every adaptive graph convolution, refinement layers first, then the
    /// U-Net layers in forward order.
    pub fn conv_layers(&self) -> Vec<&AdaptiveGraphConv> {
        let mut v: Vec<&AdaptiveGraphConv> = self.refine.layers.iter().collect();
        v.extend(self.unet.conv_layers());
        v
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        checkpoint::save(dir, &self.store, &self.config)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let ck = checkpoint::load(dir)?;
        let config: PipelineConfig = serde_json::from_value(ck.config.clone())
            .map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;
        let mut p = Self::new(config, 0)?;
        ck.apply_to(&mut p.store)?;
        Ok(p)
    }
}

/// Splits stacked `(batch·29) × c` rows into per-sample tensors.
pub fn split_rows(x: &Tensor) -> Vec<Tensor> {
    let c = x.cols();
    x.data()
        .chunks(NUM_NODES * c)
        .map(|chunk| Tensor::from_raw(NUM_NODES, c, chunk.to_vec()))
        .collect()
}

/// Stacks equally wide tensors on top of one another.
pub fn stack_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let c = parts.first().map_or(0, |p| p.cols());
    let mut data = Vec::with_capacity(parts.iter().map(|p| p.numel()).sum());
    let mut rows = 0;
    for p in parts {
        if p.cols() != c {
            return Err(Error::shape("stack_rows", "column counts differ"));
        }
        rows += p.rows();
        data.extend_from_slice(p.data());
    }
    Tensor::matrix(rows, c, data)
}

/// Lifts every input with a trained network, in chunks.
pub fn lift_all<L: Lifter>(store: &ParamStore, net: &L, inputs: &[Tensor]) -> Result<Vec<Tensor>> {
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(128) {
        let parts: Vec<&Tensor> = chunk.iter().collect();
        let mut t = Tape::new(store);
        let x = t.constant(stack_rows(&parts)?);
        let y = net.forward(&mut t, x)?;
        out.extend(split_rows(t.value(y)));
    }
    Ok(out)
}

/// Length of one training stage, in epochs, and its learning-rate schedule
/// (stepped once per epoch).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageConfig {
    pub epochs: u64,
    pub schedule: SgdSchedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Desk,
    Paper,
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Preset::Desk),
            "paper" => Ok(Preset::Paper),
            other => Err(Error::Usage(format!("unknown preset {other:?} (expected desk or paper)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    /// Gaussian noise (px) added to ground-truth 2D inputs in stage 2.
    pub noise_sigma: f64,
    pub loss_weights: HopeLossWeights,
    /// Encoder + refinement, U-Net alone, end-to-end.
    pub stages: [StageConfig; 3],
    pub seed: u64,
}

/// Full-length stage schedule: 5000, 10000 and 5000 epochs.
pub const PAPER_EPOCHS: [u64; 3] = [5000, 10000, 5000];
/// Desk stage lengths.
pub const DESK_EPOCHS: [u64; 3] = [50, 200, 50];
/// Desk minibatch size. Small batches make up for the short schedule.
pub const DESK_BATCH: usize = 8;

impl TrainConfig {
    /// Stage lengths `epochs`, with the reference schedules compressed so
    /// the total decay over each stage is unchanged.
    pub fn with_epochs(epochs: [u64; 3]) -> Self {
        let base = [SgdSchedule::encoder(), SgdSchedule::graph(), SgdSchedule::graph()];
        let stages = std::array::from_fn(|i| StageConfig {
            epochs: epochs[i],
            schedule: base[i].compressed(PAPER_EPOCHS[i], epochs[i].max(1)),
        });
        Self {
            optimizer: OptimizerKind::Adam,
            batch_size: 32,
            noise_sigma: TRAIN_NOISE_SIGMA,
            loss_weights: HopeLossWeights::default(),
            stages,
            seed: 0,
        }
    }

    pub fn preset(p: Preset) -> Self {
        match p {
            Preset::Desk => Self {
                batch_size: DESK_BATCH,
                ..Self::with_epochs(DESK_EPOCHS)
            },
            Preset::Paper => Self::with_epochs(PAPER_EPOCHS),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Usage("batch size must be positive".into()));
        }
        if !(self.noise_sigma >= 0.0) {
            return Err(Error::Usage("noise sigma must be non-negative".into()));
        }
        self.loss_weights.validate()?;
        for s in &self.stages {
            s.schedule.validate()?;
        }
        Ok(())
    }
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRow {
    /// Epoch counter across all stages.
    pub step: u64,
    pub stage: u8,
    pub lr: f64,
    pub loss_init2d: Option<f64>,
    pub loss_2d: Option<f64>,
    pub loss_3d: Option<f64>,
    pub total: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub rows: Vec<LogRow>,
}

pub const LOG_HEADER: &str = "step,stage,lr,loss_init2d,loss_2d,loss_3d,total";

impl TrainLog {
    /// Terms that do not apply to a stage are left empty.
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |x| x.to_string());
        let mut s = format!("{LOG_HEADER}\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{},{},{},{},{},{}",
                r.step,
                r.stage,
                r.lr,
                opt(r.loss_init2d),
                opt(r.loss_2d),
                opt(r.loss_3d),
                r.total
            )
            .expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn stage_totals(&self, stage: u8) -> Vec<f64> {
        self.rows.iter().filter(|r| r.stage == stage).map(|r| r.total).collect()
    }
}

/// Paired 2D inputs (29×2 px) and 3D targets (29×3 mm).
#[derive(Debug, Clone)]
pub struct LiftData {
    pub inputs: Vec<Tensor>,
    pub targets: Vec<Tensor>,
}

impl LiftData {
    pub fn from_records(records: &[SampleRecord]) -> Self {
        Self {
            inputs: records.iter().map(SampleRecord::gt2d_tensor).collect(),
            targets: records.iter().map(SampleRecord::gt3d_tensor).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.inputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.inputs.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LiftTrainConfig {
    pub epochs: u64,
    pub schedule: SgdSchedule,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl LiftTrainConfig {
    /// Stage-2 settings of a pipeline training config.
    pub fn from_train(cfg: &TrainConfig) -> Self {
        Self {
            epochs: cfg.stages[1].epochs,
            schedule: cfg.stages[1].schedule,
            optimizer: cfg.optimizer,
            batch_size: cfg.batch_size,
            noise_sigma: cfg.noise_sigma,
            seed: cfg.seed,
        }
    }
}

/// Hooks into [`train_lifter`].
pub trait LiftObserver {
    /// Called after gradients are accumulated, before the update.
    fn on_step(&mut self, _epoch: u64, _store: &ParamStore) {}

    fn on_epoch(&mut self, _epoch: u64, _lr: f64, _loss: f64) {}
}

impl LiftObserver for () {}

fn diverged(stage: u8, epoch: u64, detail: impl Into<String>) -> Error {
    Error::Diverged {
        stage,
        epoch,
        detail: detail.into(),
    }
}

/// Trains `net` on `(noisy input → target)` pairs with MSE. Returns the mean
/// training loss of every epoch. On a non-finite loss or parameter the store
/// is rolled back to the start of the failing epoch.
pub fn train_lifter<L: Lifter>(
    store: &mut ParamStore,
    net: &L,
    data: &LiftData,
    cfg: &LiftTrainConfig,
    observer: &mut dyn LiftObserver,
) -> Result<Vec<f64>> {
    if data.is_empty() || data.inputs.len() != data.targets.len() {
        return Err(Error::Data("lifter training needs a non-empty paired dataset".into()));
    }
    if cfg.batch_size == 0 {
        return Err(Error::Usage("batch size must be positive".into()));
    }
    cfg.schedule.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = Optimizer::new(cfg.optimizer, store, net.param_ids());
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut losses = Vec::with_capacity(cfg.epochs as usize);
    for epoch in 0..cfg.epochs {
        let snapshot = store.snapshot();
        let lr = cfg.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut xs = Vec::with_capacity(batch.len());
            for &i in batch {
                xs.push(add_noise_with(&data.inputs[i], cfg.noise_sigma, &mut rng)?);
            }
            let x = stack_rows(&xs.iter().collect::<Vec<_>>())?;
            let y = stack_rows(&batch.iter().map(|&i| &data.targets[i]).collect::<Vec<_>>())?;
            let step = (|| {
                let mut t = Tape::new(store);
                let xv = t.constant(x);
                let pred = net.forward(&mut t, xv)?;
                let yv = t.constant(y);
                let loss = t.mse(pred, yv)?;
                Ok::<_, Error>((t.scalar(loss), t.backward(loss)?))
            })();
            let (loss, grads) = match step {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    store.restore(&snapshot);
                    return Err(diverged(2, epoch, e.to_string()));
                }
                Err(e) => return Err(e),
            };
            grads.accumulate_into(store);
            observer.on_step(epoch, store);
            opt.step(store, lr)?;
            sum += loss * batch.len() as f64;
        }
        if !store.all_finite() {
            store.restore(&snapshot);
            return Err(diverged(2, epoch, "non-finite parameter after update"));
        }
        let mean = sum / data.len() as f64;
        observer.on_epoch(epoch, lr, mean);
        debug!("lifter epoch {epoch}: lr {lr:.3e} loss {mean:.4}");
        losses.push(mean);
    }
    Ok(losses)
}

struct StageLogger<'a> {
    log: &'a mut TrainLog,
    offset: u64,
}

impl LiftObserver for StageLogger<'_> {
    fn on_epoch(&mut self, epoch: u64, lr: f64, loss: f64) {
        self.log.rows.push(LogRow {
            step: self.offset + epoch,
            stage: 2,
            lr,
            loss_init2d: None,
            loss_2d: None,
            loss_3d: Some(loss),
            total: loss,
        });
    }
}

/// Runs the three training stages in order, appending one row per epoch to
/// `log`. Stages with zero epochs are skipped. On divergence the pipeline
/// keeps the parameters from the start of the failing epoch.
pub fn train(pipeline: &mut Pipeline, data: &[SampleRecord], cfg: &TrainConfig, log: &mut TrainLog) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    cfg.validate()?;
    let mut offset = 0;

    info!("stage 1: encoder and refinement, {} epochs", cfg.stages[0].epochs);
    let params: Vec<ParamId> = pipeline
        .encoder
        .param_ids()
        .into_iter()
        .chain(pipeline.refine.param_ids())
        .collect();
    train_cascade(pipeline, data, cfg, 1, params, offset, log)?;
    offset += cfg.stages[0].epochs;

    info!("stage 2: lifter, {} epochs", cfg.stages[1].epochs);
    let lift = LiftData::from_records(data);
    let mut logger = StageLogger { log, offset };
    let Pipeline { store, unet, .. } = pipeline;
    train_lifter(store, unet, &lift, &LiftTrainConfig::from_train(cfg), &mut logger)?;
    offset += cfg.stages[1].epochs;

    info!("stage 3: end to end, {} epochs", cfg.stages[2].epochs);
    let params = pipeline.store.ids().collect();
    train_cascade(pipeline, data, cfg, 3, params, offset, log)
}

/// Stage 1 (`MSE(init2d) + MSE(refined2d)`) or stage 3 (full loss).
fn train_cascade(
    pipeline: &mut Pipeline,
    data: &[SampleRecord],
    cfg: &TrainConfig,
    stage: u8,
    params: Vec<ParamId>,
    offset: u64,
    log: &mut TrainLog,
) -> Result<()> {
    let sc = cfg.stages[stage as usize - 1];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(stage as u64));
    let mut opt = Optimizer::new(cfg.optimizer, &pipeline.store, params);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..sc.epochs {
        let snapshot = pipeline.store.snapshot();
        let lr = sc.schedule.lr(epoch);
        order.shuffle(&mut rng);
        let mut sums = [0.0; 4];
        for batch in order.chunks(cfg.batch_size) {
            let samples: Vec<&SampleRecord> = batch.iter().map(|&i| &data[i]).collect();
            let gt2d = stack_rows(&samples.iter().map(|s| s.gt2d_tensor()).collect::<Vec<_>>().iter().collect::<Vec<_>>())?;
            let gt3d = stack_rows(&samples.iter().map(|s| s.gt3d_tensor()).collect::<Vec<_>>().iter().collect::<Vec<_>>())?;
            let step = (|| {
                let mut t = Tape::new(&pipeline.store);
                let g2 = t.constant(gt2d);
                let (terms, total) = if stage == 1 {
                    let (features, init2d) = pipeline.encoder.encode(&mut t, &samples)?;
                    let refined = pipeline.refine.forward(&mut t, features, init2d)?;
                    let li = t.mse(init2d, g2)?;
                    let lr2 = t.mse(refined, g2)?;
                    let total = t.add(li, lr2)?;
                    ([t.scalar(li), t.scalar(lr2), f64::NAN], total)
                } else {
                    let o = pipeline.forward(&mut t, &samples)?;
                    let g3 = t.constant(gt3d);
                    let l = hope_loss(&mut t, [o.init2d, o.refined2d, o.pred3d], g2, g3, cfg.loss_weights)?;
                    ([t.scalar(l.init2d), t.scalar(l.refined2d), t.scalar(l.lift3d)], l.total)
                };
                Ok::<_, Error>((terms, t.scalar(total), t.backward(total)?))
            })();
            let (terms, total, grads) = match step {
                Ok(v) => v,
                Err(e @ Error::NonFinite(_)) => {
                    pipeline.store.restore(&snapshot);
                    return Err(diverged(stage, epoch, e.to_string()));
                }
                Err(e) => return Err(e),
            };
            grads.accumulate_into(&mut pipeline.store);
            opt.step(&mut pipeline.store, lr)?;
            if !pipeline.store.all_finite() {
                pipeline.store.restore(&snapshot);
                return Err(diverged(stage, epoch, "non-finite parameter after update"));
            }
            let w = batch.len() as f64;
            for (s, v) in sums.iter_mut().zip(terms.iter().chain([&total])) {
                *s += v * w;
            }
        }
        let n = data.len() as f64;
        let [li, l2, l3, total] = sums.map(|s| s / n);
        debug!("stage {stage} epoch {epoch}: lr {lr:.3e} total {total:.4}");
        log.rows.push(LogRow {
            step: offset + epoch,
            stage,
            lr,
            loss_init2d: Some(li),
            loss_2d: Some(l2),
            loss_3d: (stage == 3).then_some(l3),
            total,
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_dataset, GraspSpec};

    fn small_config() -> PipelineConfig {
        PipelineConfig {
            unet: UNetConfig {
                feature_schedule: vec![4, 5, 6, 7],
                ..UNetConfig::default()
            },
            raster: 8,
            refine_widths: [6, 5],
            ..PipelineConfig::default()
        }
    }

    #[test]
    fn loss_hand_example() {
        let gt2d = Tensor::full(29, 2, 100.0);
        let gt3d = Tensor::full(29, 3, 500.0);
        let mut init = gt2d.clone();
        for k in 0..29 {
            init.set(k, 0, 110.0);
        }
        let w = HopeLossWeights::default();
        let v = hope_loss_value(&init, &gt2d, &gt3d, &gt2d, &gt3d, w).unwrap();
        assert!((v - 5.0).abs() < 1e-12, "{v}");
        assert_eq!(hope_loss_value(&gt2d, &gt2d, &gt3d, &gt2d, &gt3d, w).unwrap(), 0.0);
        let pure = HopeLossWeights { alpha: 0.0, beta: 0.0 };
        let off3d = Tensor::full(29, 3, 502.0);
        assert_eq!(hope_loss_value(&init, &init, &off3d, &gt2d, &gt3d, pure).unwrap(), 4.0);
        assert!(hope_loss_value(&init, &gt2d, &gt3d, &gt2d, &gt3d, HopeLossWeights { alpha: -1.0, beta: 0.0 }).is_err());
    }

    #[test]
    fn raster_marks_cells() {
        let g = rasterize(&[[0.0, 0.0], [639.9, 639.9], [-5.0, 700.0], [330.0, 10.0]], 32, 640.0);
        assert_eq!(g.iter().sum::<f64>(), 4.0);
        assert_eq!(g[0], 1.0);
        assert_eq!(g[32 * 32 - 1], 1.0);
        assert_eq!(g[31 * 32], 1.0);
        assert_eq!(g[16], 1.0);
    }

    #[test]
    fn factorized_first_layer_matches_concat() {
        let p = Pipeline::new(small_config(), 1).unwrap();
        let data = generate_dataset(3, 2, &GraspSpec::default()).unwrap();
        let refs: Vec<&SampleRecord> = data.iter().collect();
        let mut t = Tape::new(&p.store);
        let (f, init) = p.encoder.encode(&mut t, &refs).unwrap();
        assert_eq!(t.value(f).shape(), &[3, FEATURE_DIM]);
        let fast = p.refine.forward(&mut t, f, init).unwrap();
        let x = p.refine.node_features(&mut t, f, init).unwrap();
        assert_eq!(t.value(x).shape(), &[3 * 29, 2050]);
        let mut h = x;
        for l in &p.refine.layers {
            h = l.forward(&mut t, h).unwrap();
        }
        let slow = t.scale(h, p.config.coord_scale);
        assert!(t.value(fast).max_abs_diff(t.value(slow)) < 1e-10);
    }

    #[test]
    fn predict_shapes_and_determinism() {
        let p = Pipeline::new(small_config(), 3).unwrap();
        let s = &generate_dataset(1, 4, &GraspSpec::default()).unwrap()[0];
        let (r2, p3) = p.predict(s).unwrap();
        assert_eq!((r2.shape(), p3.shape()), (&[29, 2][..], &[29, 3][..]));
        assert_eq!(p.predict(s).unwrap(), (r2, p3));
    }

    #[test]
    fn training_logs_every_epoch_and_is_reproducible() {
        let data = generate_dataset(6, 5, &GraspSpec::default()).unwrap();
        let mut cfg = TrainConfig::with_epochs([2, 3, 2]);
        cfg.batch_size = 4;
        let run = || {
            let mut p = Pipeline::new(small_config(), 6).unwrap();
            let mut log = TrainLog::default();
            train(&mut p, &data, &cfg, &mut log).unwrap();
            (p.store, log)
        };
        let (a, log) = run();
        let (b, log2) = run();
        assert_eq!(a, b);
        assert_eq!(log, log2);
        assert_eq!(log.rows.len(), 7);
        assert_eq!(log.rows.iter().map(|r| r.stage).collect::<Vec<_>>(), [1, 1, 2, 2, 2, 3, 3]);
        assert_eq!(log.rows.iter().map(|r| r.step).collect::<Vec<_>>(), (0..7).collect::<Vec<_>>());
        let csv = log.to_csv();
        assert!(csv.starts_with(LOG_HEADER));
        assert_eq!(csv.lines().nth(1).unwrap().split(',').nth(5), Some(""));
        let r = &log.rows[5];
        let w = cfg.loss_weights;
        let expect = w.alpha * r.loss_init2d.unwrap() + w.beta * r.loss_2d.unwrap() + r.loss_3d.unwrap();
        assert!((r.total - expect).abs() < 1e-9 * expect);
    }

    #[test]
    fn empty_dataset_rejected() {
        let mut p = Pipeline::new(small_config(), 0).unwrap();
        let err = train(&mut p, &[], &TrainConfig::preset(Preset::Desk), &mut TrainLog::default()).unwrap_err();
        assert!(matches!(err, Error::Data(_)));
    }

    #[test]
    fn divergence_restores_epoch_start() {
        let data = generate_dataset(4, 8, &GraspSpec::default()).unwrap();
        let mut p = Pipeline::new(small_config(), 9).unwrap();
        let mut cfg = TrainConfig::with_epochs([0, 3, 0]);
        cfg.optimizer = OptimizerKind::Sgd;
        cfg.stages[1].schedule = SgdSchedule::new(1e200, 1.0, 1).unwrap();
        let before = p.store.clone();
        let mut log = TrainLog::default();
        let err = train(&mut p, &data, &cfg, &mut log).unwrap_err();
        assert!(matches!(err, Error::Diverged { stage: 2, .. }), "{err}");
        assert!(p.store.all_finite());
        if let Error::Diverged { epoch: 0, .. } = err {
            assert_eq!(p.store, before);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Pipeline::new(small_config(), 10).unwrap();
        let dir = tempfile::tempdir().unwrap();
        p.save(dir.path()).unwrap();
        let q = Pipeline::load(dir.path()).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.store, p.store);
        assert_eq!(p.conv_layers().len(), 11);
    }

    #[test]
    fn presets_and_schedules() {
        let paper = TrainConfig::preset(Preset::Paper);
        assert_eq!(paper.stages.map(|s| s.epochs), PAPER_EPOCHS);
        assert_eq!(paper.stages[0].schedule, SgdSchedule::encoder());
        assert_eq!(paper.stages[1].schedule, SgdSchedule::graph());
        let desk = TrainConfig::preset(Preset::Desk);
        assert_eq!(desk.stages.map(|s| s.epochs), DESK_EPOCHS);
        assert_eq!(desk.stages.map(|s| s.schedule.decay_every), [1, 80, 40]);
        assert!("laptop".parse::<Preset>().is_err());
    }
}
