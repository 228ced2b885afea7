//! Graph layers: adaptive graph convolution, trainable node pooling and
//! unpooling, plus the top-k scored pooling and fixed mean pooling used as
//! baselines.
//!
//! Layer inputs are stacked node-feature matrices (`batch * nodes` rows, see
//! [`crate::tape`]); a single sample is simply a batch of one.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::keypoints;
use crate::params::{ParamId, ParamStore};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Square node-affinity matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct AdjacencyMatrix {
    entries: Tensor,
    pub trainable: bool,
}

impl AdjacencyMatrix {
    pub fn new(entries: Tensor, trainable: bool) -> Result<Self> {
        if entries.shape().len() != 2 || entries.rows() != entries.cols() {
            return Err(Error::shape(
                "adjacency",
                format!("expected square matrix, got {:?}", entries.shape()),
            ));
        }
        entries.ensure_finite("adjacency")?;
        Ok(Self { entries, trainable })
    }

    pub fn n(&self) -> usize {
        self.entries.rows()
    }

    pub fn entries(&self) -> &Tensor {
        &self.entries
    }

    pub fn into_entries(self) -> Tensor {
        self.entries
    }
}

/// `D^{-1/2} (A + I) D^{-1/2}` with `D` the degree matrix of `A + I`.
///
/// Only defined for non-negative raw adjacencies; learned kernels are used
/// as-is and never pass through here.
pub fn normalize_adjacency(raw: &AdjacencyMatrix) -> Result<AdjacencyMatrix> {
    let n = raw.n();
    let a = raw.entries();
    if a.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Domain(
            "normalize_adjacency requires non-negative entries".into(),
        ));
    }
    let mut hat = a.clone();
    for i in 0..n {
        hat.set(i, i, hat.get(i, i) + 1.0);
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| 1.0 / hat.row(i).iter().sum::<f64>().sqrt())
        .collect();
    let mut out = Tensor::zeros(n, n);
    for i in 0..n {
        for j in 0..n {
            out.set(i, j, inv_sqrt[i] * hat.get(i, j) * inv_sqrt[j]);
        }
    }
    AdjacencyMatrix::new(out, raw.trainable)
}

/// Starting value of a learned adjacency kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AdjacencyInit {
    Zeros,
    #[default]
    Identity,
    Ones,
    /// Symmetric random 0/1 connections with probability 1/2, no self loops.
    Random,
    /// Normalized skeleton graph on 29-node layers; identity (the normalized
    /// empty graph) on pooled layers, which have no skeleton.
    Skeleton,
}

impl AdjacencyInit {
    pub const ALL: [AdjacencyInit; 5] = [
        AdjacencyInit::Zeros,
        AdjacencyInit::Random,
        AdjacencyInit::Ones,
        AdjacencyInit::Skeleton,
        AdjacencyInit::Identity,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AdjacencyInit::Zeros => "zeros",
            AdjacencyInit::Identity => "identity",
            AdjacencyInit::Ones => "ones",
            AdjacencyInit::Random => "random",
            AdjacencyInit::Skeleton => "skeleton",
        }
    }

    pub fn build<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Tensor {
        match self {
            AdjacencyInit::Zeros => Tensor::zeros(n, n),
            AdjacencyInit::Identity => Tensor::eye(n),
            AdjacencyInit::Ones => Tensor::full(n, n, 1.0),
            AdjacencyInit::Random => {
                let mut a = Tensor::zeros(n, n);
                for i in 0..n {
                    for j in i + 1..n {
                        if rng.random_bool(0.5) {
                            a.set(i, j, 1.0);
                            a.set(j, i, 1.0);
                        }
                    }
                }
                a
            }
            AdjacencyInit::Skeleton => {
                let raw = if n == keypoints::NUM_NODES {
                    keypoints::skeleton_adjacency()
                } else {
                    Tensor::zeros(n, n)
                };
                normalize_adjacency(&AdjacencyMatrix::new(raw, false).expect("square"))
                    .expect("skeleton is non-negative")
                    .into_entries()
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Linear,
}

fn check_stacked(t: &Tape<'_>, x: Var, nodes: usize, width: usize, op: &'static str) -> Result<()> {
    let v = t.value(x);
    if !v.rows().is_multiple_of(nodes) || v.rows() == 0 || v.cols() != width {
        return Err(Error::shape(
            op,
            format!(
                "expected (batch*{nodes})x{width} input, got {}x{}",
                v.rows(),
                v.cols()
            ),
        ));
    }
    Ok(())
}

/// Graph convolution `σ(A X W)` whose kernel `A` is itself trainable.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptiveGraphConv {
    pub adj: ParamId,
    pub weight: ParamId,
    pub nodes: usize,
    pub in_features: usize,
    pub out_features: usize,
    pub activation: Activation,
}

impl AdaptiveGraphConv {
    /// Registers `<name>.adj` and `<name>.weight`; weights are uniform in
    /// `±1/sqrt(in_features)`.
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        nodes: usize,
        in_features: usize,
        out_features: usize,
        activation: Activation,
        init: AdjacencyInit,
        rng: &mut R,
    ) -> Self {
        let adj = store.add(format!("{name}.adj"), init.build(nodes, rng));
        let bound = 1.0 / (in_features.max(1) as f64).sqrt();
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::uniform(in_features, out_features, bound, rng),
        );
        Self {
            adj,
            weight,
            nodes,
            in_features,
            out_features,
            activation,
        }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        check_stacked(t, x, self.nodes, self.in_features, "agc_forward")?;
        let a = t.param(self.adj);
        let w = t.param(self.weight);
        // Mix along the narrower feature side first; the product is the same.
        let z = if self.in_features <= self.out_features {
            let ax = t.node_mix(a, x)?;
            t.matmul(ax, w)?
        } else {
            let xw = t.matmul(x, w)?;
            t.node_mix(a, xw)?
        };
        Ok(match self.activation {
            Activation::Relu => t.relu(z),
            Activation::Linear => z,
        })
    }

    pub fn adjacency(&self, store: &ParamStore) -> AdjacencyMatrix {
        AdjacencyMatrix::new(store.get(self.adj).clone(), true).expect("square kernel")
    }
}

/// Trainable node-axis linear map `X' = P X` with `P` of shape
/// `n_out × n_in`. Used for both pooling (`n_out < n_in`) and unpooling.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMap {
    pub matrix: ParamId,
    pub n_in: usize,
    pub n_out: usize,
}

impl NodeMap {
    fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (n_in as f64).sqrt();
        let matrix = store.add(
            format!("{name}.matrix"),
            Tensor::uniform(n_out, n_in, bound, rng),
        );
        Self { matrix, n_in, n_out }
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        let v = t.value(x);
        if v.rows() == 0 || !v.rows().is_multiple_of(self.n_in) {
            return Err(Error::shape(
                "node_map",
                format!("{} rows is not a multiple of {}", v.rows(), self.n_in),
            ));
        }
        let p = t.param(self.matrix);
        t.node_mix(p, x)
    }
}

/// Trainable pooling: a fully-connected map over the node axis.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphPool(pub NodeMap);

impl GraphPool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_out == 0 || n_out >= n_in {
            return Err(Error::Usage(format!(
                "pooling must shrink the graph, got {n_in} -> {n_out}"
            )));
        }
        Ok(Self(NodeMap::build(store, name, n_in, n_out, rng)))
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.0.forward(t, x)
    }
}

/// Trainable unpooling, the transpose-convolution counterpart of
/// [`GraphPool`].
#[derive(Debug, Clone, PartialEq)]
pub struct GraphUnpool(pub NodeMap);

impl GraphUnpool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        n_out: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if n_out <= n_in {
            return Err(Error::Usage(format!(
                "unpooling must grow the graph, got {n_in} -> {n_out}"
            )));
        }
        Ok(Self(NodeMap::build(store, name, n_in, n_out, rng)))
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<Var> {
        self.0.forward(t, x)
    }
}

/// Number of nodes kept by top-k pooling at `ratio` of `n`.
pub fn keep_count(n: usize, ratio: f64) -> Result<usize> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Usage(format!("pool ratio must lie in (0, 1), got {ratio}")));
    }
    // Tolerate representation error in ratios such as 15/29.
    let k = (ratio * n as f64 - 1e-9).ceil() as usize;
    Ok(k.clamp(1, n))
}

/// Indices of the `keep` largest scores, returned in ascending index order.
/// Equal scores prefer the lower index.
pub fn top_k(scores: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..keep.min(scores.len())].to_vec();
    picked.sort_unstable();
    picked
}

/// Output of [`TopKPool::forward`]: the gated rows and, per sample, the
/// selected node indices.
#[derive(Debug, Clone)]
pub struct TopKOutput {
    pub x: Var,
    pub selected: Vec<Vec<usize>>,
}

/// Top-k scored pooling with sigmoid gating (the gPool baseline).
///
/// Scores are `X p / ‖p‖`; the `keep` best nodes are kept and scaled by
/// `sigmoid(score)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TopKPool {
    pub projection: ParamId,
    pub n_in: usize,
    pub keep: usize,
    pub features: usize,
}

impl TopKPool {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        n_in: usize,
        keep: usize,
        features: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if keep == 0 || keep >= n_in {
            return Err(Error::Usage(format!("top-k pool must keep 1..{n_in} nodes, got {keep}")));
        }
        let bound = 1.0 / (features as f64).sqrt();
        let projection = store.add(
            format!("{name}.projection"),
            Tensor::uniform(features, 1, bound, rng),
        );
        Ok(Self {
            projection,
            n_in,
            keep,
            features,
        })
    }

    pub fn forward(&self, t: &mut Tape<'_>, x: Var) -> Result<TopKOutput> {
        check_stacked(t, x, self.n_in, self.features, "gpool_forward")?;
        let p = t.param(self.projection);
        gpool_select(t, x, p, self.n_in, self.keep)
    }
}

/// Scores, selects and gates the rows of stacked `x` (blocks of `n` rows)
/// using projection vector `p` (`k×1`).
pub fn gpool_select(t: &mut Tape<'_>, x: Var, p: Var, n: usize, keep: usize) -> Result<TopKOutput> {
    let unit = t.l2_normalize(p)?;
    let scores = t.matmul(x, unit)?;
    let blocks = t.value(x).rows() / n;
    let mut selected = Vec::with_capacity(blocks);
    let mut global = Vec::with_capacity(blocks * keep);
    {
        let s = t.value(scores).data();
        for b in 0..blocks {
            let idx = top_k(&s[b * n..(b + 1) * n], keep);
            global.extend(idx.iter().map(|i| b * n + i));
            selected.push(idx);
        }
    }
    let rows = t.gather_rows(x, global.clone())?;
    let picked = t.gather_rows(scores, global)?;
    let gate = t.sigmoid(picked);
    let out = t.mul_rows(rows, gate)?;
    Ok(TopKOutput { x: out, selected })
}

/// Single-sample top-k pooling at `ratio`, returning the gated rows and the
/// selected indices.
pub fn gpool_forward(
    t: &mut Tape<'_>,
    x: Var,
    projection: Var,
    ratio: f64,
) -> Result<(Var, Vec<usize>)> {
    let n = t.value(x).rows();
    if t.value(projection).rows() != t.value(x).cols() || t.value(projection).cols() != 1 {
        return Err(Error::shape(
            "gpool_forward",
            "projection length must equal the feature width",
        ));
    }
    let keep = keep_count(n, ratio)?;
    let out = gpool_select(t, x, projection, n, keep)?;
    Ok((out.x, out.selected.into_iter().next().unwrap_or_default()))
}

/// Inverse of top-k pooling: rows return to their original node slots and
/// every other slot is zero.
pub fn topk_unpool(t: &mut Tape<'_>, x: Var, selected: &[Vec<usize>], n_out: usize) -> Result<Var> {
    let keep = selected.first().map_or(0, Vec::len);
    let global = selected
        .iter()
        .enumerate()
        .flat_map(|(b, idx)| idx.iter().map(move |i| b * n_out + i))
        .collect::<Vec<_>>();
    if keep == 0 || t.value(x).rows() != global.len() {
        return Err(Error::shape("topk_unpool", "selection does not match input rows"));
    }
    t.scatter_rows(x, global, selected.len() * n_out)
}

/// A partition of nodes into groups, for fixed mean pooling.
#[derive(Debug, Clone, PartialEq)]
pub struct NodePartition {
    groups: Vec<Vec<usize>>,
    n_in: usize,
}

impl NodePartition {
    pub fn new(n_in: usize, groups: Vec<Vec<usize>>) -> Result<Self> {
        let mut seen = vec![false; n_in];
        for g in &groups {
            if g.is_empty() {
                return Err(Error::Usage("empty group in node partition".into()));
            }
            for &i in g {
                if i >= n_in || std::mem::replace(&mut seen[i], true) {
                    return Err(Error::Usage(format!(
                        "node {i} out of range or assigned twice"
                    )));
                }
            }
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::Usage(format!("node {missing} not covered by any group")));
        }
        Ok(Self { groups, n_in })
    }

    pub fn n_in(&self) -> usize {
        self.n_in
    }

    pub fn n_out(&self) -> usize {
        self.groups.len()
    }

    /// `n_out × n_in` averaging matrix.
    pub fn pool_matrix(&self) -> Tensor {
        let mut m = Tensor::zeros(self.n_out(), self.n_in);
        for (g, members) in self.groups.iter().enumerate() {
            let w = 1.0 / members.len() as f64;
            for &i in members {
                m.set(g, i, w);
            }
        }
        m
    }

    /// `n_in × n_out` membership matrix: every node copies its group's row.
    pub fn unpool_matrix(&self) -> Tensor {
        let mut m = Tensor::zeros(self.n_in, self.n_out());
        for (g, members) in self.groups.iter().enumerate() {
            for &i in members {
                m.set(i, g, 1.0);
            }
        }
        m
    }
}

/// Mean of each group's feature rows.
pub fn fixed_pool_forward(t: &mut Tape<'_>, x: Var, partition: &NodePartition) -> Result<Var> {
    let m = t.constant(partition.pool_matrix());
    t.node_mix(m, x)
}

/// Broadcasts each group's row back to its members.
pub fn fixed_unpool_forward(t: &mut Tape<'_>, x: Var, partition: &NodePartition) -> Result<Var> {
    let m = t.constant(partition.unpool_matrix());
    t.node_mix(m, x)
}

/// Writes `n` on the first line, then `n` comma-separated rows.
pub fn write_adjacency_csv(path: &Path, a: &Tensor) -> Result<()> {
    let n = a.rows();
    let mut out = Vec::new();
    writeln!(out, "{n}").expect("write to vec");
    for i in 0..n {
        let row: Vec<String> = a.row(i).iter().map(|v| v.to_string()).collect();
        writeln!(out, "{}", row.join(",")).expect("write to vec");
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_adjacency_csv(path: &Path) -> Result<Tensor> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines();
    let n: usize = lines
        .next()
        .ok_or_else(|| parse_err(1, "empty file".into()))?
        .trim()
        .parse()
        .map_err(|e| parse_err(1, format!("bad node count: {e}")))?;
    let mut data = Vec::with_capacity(n * n);
    for (k, line) in lines.enumerate() {
        let vals: Vec<f64> = line
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| parse_err(k + 2, e.to_string()))?;
        if vals.len() != n {
            return Err(parse_err(k + 2, format!("expected {n} values, got {}", vals.len())));
        }
        data.extend(vals);
    }
    if data.len() != n * n {
        return Err(parse_err(n + 1, format!("expected {n} rows")));
    }
    Tensor::matrix(n, n, data)
}
