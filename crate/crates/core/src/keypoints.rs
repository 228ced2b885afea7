//! The 29-node hand-object keypoint graph.
//!
//! Node order: 0 is the wrist; nodes `1 + 4f .. 1 + 4f + 3` are the MCP, PIP,
//! DIP and TIP joints of finger `f` (thumb, index, middle, ring, pinky);
//! nodes 21..=28 are the object box corners `c0..c7`. Corner `c_i` sits at
//! the (−/+) extent of box axis `k` according to bit `k` of `i`, so `c0` is
//! (−,−,−) and `c7` is (+,+,+).

use crate::tensor::Tensor;

pub const NUM_NODES: usize = 29;
pub const NUM_HAND: usize = 21;
pub const NUM_OBJECT: usize = 8;
pub const WRIST: usize = 0;
pub const FIRST_CORNER: usize = 21;

pub const FINGER_NAMES: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];
pub const JOINT_NAMES: [&str; 4] = ["mcp", "pip", "dip", "tip"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum JointType {
    Wrist,
    Mcp,
    Pip,
    Dip,
    Tip,
}

impl JointType {
    pub const ALL: [JointType; 5] = [
        JointType::Wrist,
        JointType::Mcp,
        JointType::Pip,
        JointType::Dip,
        JointType::Tip,
    ];

    pub fn name(self) -> &'static str {
        match self {
            JointType::Wrist => "wrist",
            JointType::Mcp => "mcp",
            JointType::Pip => "pip",
            JointType::Dip => "dip",
            JointType::Tip => "tip",
        }
    }
}

/// Node index of joint `joint` (0 = MCP .. 3 = TIP) on finger `finger`.
pub const fn finger_joint(finger: usize, joint: usize) -> usize {
    1 + 4 * finger + joint
}

pub fn corner(i: usize) -> usize {
    FIRST_CORNER + i
}

pub fn node_names() -> Vec<String> {
    let mut names = vec!["wrist".to_string()];
    for f in FINGER_NAMES {
        for j in JOINT_NAMES {
            names.push(format!("{f}_{j}"));
        }
    }
    names.extend((0..NUM_OBJECT).map(|i| format!("c{i}")));
    names
}

/// Joint type of a hand node, `None` for box corners.
pub fn joint_type(node: usize) -> Option<JointType> {
    match node {
        WRIST => Some(JointType::Wrist),
        n if n < NUM_HAND => Some(match (n - 1) % 4 {
            0 => JointType::Mcp,
            1 => JointType::Pip,
            2 => JointType::Dip,
            _ => JointType::Tip,
        }),
        _ => None,
    }
}

/// Finger index of a non-wrist hand node.
pub fn finger_of(node: usize) -> Option<usize> {
    (1..NUM_HAND).contains(&node).then(|| (node - 1) / 4)
}

/// Undirected skeleton edges: wrist to each MCP, consecutive finger joints,
/// and the 12 edges of the box. No hand-object edges.
pub fn skeleton_edges() -> Vec<(usize, usize)> {
    let mut edges = Vec::with_capacity(32);
    for f in 0..5 {
        edges.push((WRIST, finger_joint(f, 0)));
        for j in 0..3 {
            edges.push((finger_joint(f, j), finger_joint(f, j + 1)));
        }
    }
    for a in 0..NUM_OBJECT {
        for bit in 0..3 {
            let b = a ^ (1 << bit);
            if a < b {
                edges.push((corner(a), corner(b)));
            }
        }
    }
    edges
}

/// Binary symmetric 29×29 skeleton adjacency (zero diagonal).
pub fn skeleton_adjacency() -> Tensor {
    let mut a = Tensor::zeros(NUM_NODES, NUM_NODES);
    for (i, j) in skeleton_edges() {
        a.set(i, j, 1.0);
        a.set(j, i, 1.0);
    }
    a
}

/// Node subsets used to split metrics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KeypointSubset {
    All,
    Hand,
    Object,
}

impl KeypointSubset {
    pub fn nodes(self) -> std::ops::Range<usize> {
        match self {
            KeypointSubset::All => 0..NUM_NODES,
            KeypointSubset::Hand => 0..NUM_HAND,
            KeypointSubset::Object => FIRST_CORNER..NUM_NODES,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            KeypointSubset::All => "all",
            KeypointSubset::Hand => "hand",
            KeypointSubset::Object => "object",
        }
    }
}

/// Skeleton-respecting node groupings for the fixed-pooling baseline,
/// one per pooling level of the default 29 → 15 → 8 → 4 schedule.
pub fn fixed_pool_groups() -> [Vec<Vec<usize>>; 3] {
    // 29 -> 15: wrist, (MCP,PIP) and (DIP,TIP) per finger, box corners
    // paired along the first box axis.
    let mut l0 = vec![vec![WRIST]];
    for f in 0..5 {
        l0.push(vec![finger_joint(f, 0), finger_joint(f, 1)]);
        l0.push(vec![finger_joint(f, 2), finger_joint(f, 3)]);
    }
    for pair in [0, 2, 4, 6] {
        l0.push(vec![corner(pair), corner(pair + 1)]);
    }
    // 15 -> 8: wrist, each finger whole, box halves.
    let mut l1 = vec![vec![0]];
    for f in 0..5 {
        l1.push(vec![1 + 2 * f, 2 + 2 * f]);
    }
    l1.push(vec![11, 12]);
    l1.push(vec![13, 14]);
    // 8 -> 4: wrist+thumb, index+middle, ring+pinky, box.
    let l2 = vec![vec![0, 1], vec![2, 3], vec![4, 5], vec![6, 7]];
    [l0, l1, l2]
}
