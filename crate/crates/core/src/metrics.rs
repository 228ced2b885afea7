//! Keypoint error metrics: mean Euclidean error, PCP curves, AUC and
//! per-joint breakdowns.
//!
//! Every function takes matched lists of `29×D` tensors (`D` = 2 for pixels,
//! 3 for millimetres).

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::keypoints::{self, JointType, KeypointSubset, FINGER_NAMES, NUM_NODES};
use crate::tensor::Tensor;

fn check_pairs(op: &'static str, preds: &[Tensor], gts: &[Tensor]) -> Result<()> {
    if preds.len() != gts.len() {
        return Err(Error::shape(
            op,
            format!("{} predictions vs {} ground truths", preds.len(), gts.len()),
        ));
    }
    if preds.is_empty() {
        return Err(Error::Usage(format!("{op}: no samples")));
    }
    for (p, g) in preds.iter().zip(gts) {
        if p.shape() != g.shape() || p.rows() != NUM_NODES || !(2..=3).contains(&p.cols()) {
            return Err(Error::shape(
                op,
                format!("expected matching 29x2 or 29x3, got {:?} vs {:?}", p.shape(), g.shape()),
            ));
        }
    }
    Ok(())
}

fn node_distance(p: &Tensor, g: &Tensor, node: usize) -> f64 {
    p.row(node)
        .iter()
        .zip(g.row(node))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Per-sample mean keypoint distance over `subset`.
pub fn sample_errors(preds: &[Tensor], gts: &[Tensor], subset: KeypointSubset) -> Result<Vec<f64>> {
    check_pairs("sample_errors", preds, gts)?;
    let nodes = subset.nodes();
    let n = nodes.len() as f64;
    Ok(preds
        .iter()
        .zip(gts)
        .map(|(p, g)| nodes.clone().map(|k| node_distance(p, g, k)).sum::<f64>() / n)
        .collect())
}

/// Mean over samples of the per-sample mean keypoint distance.
pub fn mean_error(preds: &[Tensor], gts: &[Tensor], subset: KeypointSubset) -> Result<f64> {
    let e = sample_errors(preds, gts, subset)?;
    Ok(e.iter().sum::<f64>() / e.len() as f64)
}

/// Fraction of samples whose mean keypoint error is strictly below
/// `threshold`.
pub fn pcp(preds: &[Tensor], gts: &[Tensor], threshold: f64, subset: KeypointSubset) -> Result<f64> {
    if !(threshold > 0.0) {
        return Err(Error::Usage(format!("pcp threshold must be positive, got {threshold}")));
    }
    let e = sample_errors(preds, gts, subset)?;
    Ok(fraction_below(&e, threshold))
}

fn fraction_below(errors: &[f64], threshold: f64) -> f64 {
    errors.iter().filter(|&&e| e < threshold).count() as f64 / errors.len() as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PcpCurve {
    pub thresholds: Vec<f64>,
    pub fractions: Vec<f64>,
}

/// `0, 1, …, 50` (pixels or millimetres).
pub fn default_thresholds() -> Vec<f64> {
    (0..=50).map(f64::from).collect()
}

pub fn pcp_curve(
    preds: &[Tensor],
    gts: &[Tensor],
    thresholds: &[f64],
    subset: KeypointSubset,
) -> Result<PcpCurve> {
    check_ascending(thresholds)?;
    let e = sample_errors(preds, gts, subset)?;
    Ok(PcpCurve {
        thresholds: thresholds.to_vec(),
        fractions: thresholds.iter().map(|&t| fraction_below(&e, t)).collect(),
    })
}

fn check_ascending(thresholds: &[f64]) -> Result<()> {
    if thresholds.len() < 2 {
        return Err(Error::Usage("a PCP curve needs at least two thresholds".into()));
    }
    if thresholds.iter().any(|t| !t.is_finite()) || thresholds.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Usage("PCP thresholds must be finite and strictly ascending".into()));
    }
    Ok(())
}

/// Trapezoidal area under the curve divided by the threshold span.
pub fn auc(curve: &PcpCurve) -> Result<f64> {
    check_ascending(&curve.thresholds)?;
    if curve.fractions.len() != curve.thresholds.len() {
        return Err(Error::shape("auc", "thresholds and fractions differ in length"));
    }
    let t = &curve.thresholds;
    let f = &curve.fractions;
    let area: f64 = (1..t.len())
        .map(|i| 0.5 * (f[i] + f[i - 1]) * (t[i] - t[i - 1]))
        .sum();
    Ok(area / (t[t.len() - 1] - t[0]))
}

impl PcpCurve {
    /// Two columns, `threshold,fraction`, with a header line.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("threshold,fraction\n");
        for (t, f) in self.thresholds.iter().zip(&self.fractions) {
            writeln!(s, "{t},{f}").expect("write to string");
        }
        s
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut curve = PcpCurve {
            thresholds: Vec::new(),
            fractions: Vec::new(),
        };
        for (i, line) in text.lines().enumerate().skip(1) {
            let parsed = line
                .split_once(',')
                .and_then(|(a, b)| Some((a.trim().parse().ok()?, b.trim().parse().ok()?)));
            let (t, f) = parsed.ok_or_else(|| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg: format!("expected `threshold,fraction`, got {line:?}"),
            })?;
            curve.thresholds.push(t);
            curve.fractions.push(f);
        }
        Ok(curve)
    }
}

/// Mean distance of every node over a set of samples.
#[derive(Debug, Clone, PartialEq)]
pub struct JointErrors {
    pub per_node: Vec<f64>,
}

pub fn per_joint_errors(preds: &[Tensor], gts: &[Tensor]) -> Result<JointErrors> {
    check_pairs("per_joint_errors", preds, gts)?;
    let n = preds.len() as f64;
    let per_node = (0..NUM_NODES)
        .map(|k| preds.iter().zip(gts).map(|(p, g)| node_distance(p, g, k)).sum::<f64>() / n)
        .collect();
    Ok(JointErrors { per_node })
}

impl JointErrors {
    fn mean_of(&self, nodes: impl Iterator<Item = usize>) -> f64 {
        let (sum, count) = nodes.fold((0.0, 0usize), |(s, c), k| (s + self.per_node[k], c + 1));
        sum / count as f64
    }

    pub fn mean(&self) -> f64 {
        self.mean_of(0..NUM_NODES)
    }

    pub fn subset_mean(&self, subset: KeypointSubset) -> f64 {
        self.mean_of(subset.nodes())
    }

    /// Wrist, MCP, PIP, DIP, TIP means (finger joints averaged over fingers).
    pub fn by_joint_type(&self) -> Vec<(JointType, f64)> {
        JointType::ALL
            .iter()
            .map(|&jt| {
                let nodes = (0..keypoints::NUM_HAND).filter(move |&k| keypoints::joint_type(k) == Some(jt));
                (jt, self.mean_of(nodes))
            })
            .collect()
    }

    /// Mean over the four joints of each finger.
    pub fn by_finger(&self) -> Vec<(&'static str, f64)> {
        FINGER_NAMES
            .iter()
            .enumerate()
            .map(|(f, &name)| (name, self.mean_of((0..4).map(|j| keypoints::finger_joint(f, j)))))
            .collect()
    }

    /// `group,name,error_mm` rows: every node, then joint types, fingers and
    /// subsets.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("group,name,error\n");
        for (name, e) in keypoints::node_names().iter().zip(&self.per_node) {
            writeln!(s, "node,{name},{e}").expect("write to string");
        }
        for (jt, e) in self.by_joint_type() {
            writeln!(s, "joint_type,{},{e}", jt.name()).expect("write to string");
        }
        for (f, e) in self.by_finger() {
            writeln!(s, "finger,{f},{e}").expect("write to string");
        }
        for sub in [KeypointSubset::All, KeypointSubset::Hand, KeypointSubset::Object] {
            writeln!(s, "subset,{},{}", sub.name(), self.subset_mean(sub)).expect("write to string");
        }
        s
    }
}
