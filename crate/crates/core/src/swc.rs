//! SWC neuron morphology: parsing, validation, writing and segment geometry.
//!
//! Each data line holds seven whitespace-separated fields:
//! `id type x y z radius parent`, with `parent = -1` marking a root. Lines
//! starting with `#` are comments. Coordinates and radii are in voxel units.

use std::collections::HashMap;
use std::fmt::Write as _;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum SwcError {
    #[error("line {line}: {reason}")]
    MalformedLine { line: usize, reason: String },
    #[error("line {line}: duplicate node id {id}")]
    DuplicateId { line: usize, id: u64 },
    #[error("line {line}: node {id} references missing parent {parent}")]
    DanglingParent { line: usize, id: u64, parent: i64 },
    #[error("parent links of node {id} form a cycle")]
    CycleDetected { id: u64 },
    #[error("line {line}: node {id} has non-positive radius {radius}")]
    NonPositiveRadius { line: usize, id: u64, radius: f32 },
    #[error("morphology has no nodes")]
    EmptyMorphology,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SwcNode {
    pub id: u64,
    /// Structure type code, carried through verbatim.
    pub type_code: i64,
    pub x: f32,
    pub y: f32,
    pub z: f32,
    pub radius: f32,
    /// `-1` for roots.
    pub parent_id: i64,
}

impl SwcNode {
    pub fn position(&self) -> [f32; 3] {
        [self.x, self.y, self.z]
    }

    pub fn is_root(&self) -> bool {
        self.parent_id == -1
    }
}

/// Tapered cylinder with spherical caps between two node centers.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CapsuleSegment {
    pub p0: [f32; 3],
    pub p1: [f32; 3],
    pub r0: f32,
    pub r1: f32,
}

/// A validated forest of SWC nodes in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SwcMorphology {
    nodes: Vec<SwcNode>,
}

impl SwcMorphology {
    /// Validates ids, radii, parent references and acyclicity.
    pub fn new(nodes: Vec<SwcNode>) -> Result<Self, SwcError> {
        validate(&nodes, None)?;
        Ok(Self { nodes })
    }

    pub fn nodes(&self) -> &[SwcNode] {
        &self.nodes
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn roots(&self) -> impl Iterator<Item = &SwcNode> {
        self.nodes.iter().filter(|n| n.is_root())
    }

    /// One capsule per non-root node, from its parent to itself.
    pub fn segments(&self) -> Vec<CapsuleSegment> {
        let index: HashMap<u64, usize> = self.nodes.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
        self.nodes
            .iter()
            .filter(|n| !n.is_root())
            .map(|n| {
                let parent = &self.nodes[index[&(n.parent_id as u64)]];
                CapsuleSegment {
                    p0: parent.position(),
                    p1: n.position(),
                    r0: parent.radius,
                    r1: n.radius,
                }
            })
            .collect()
    }

    /// Axis-aligned box covering every node sphere, grown by `margin`.
    pub fn bounding_box(&self, margin: f32) -> Result<([f32; 3], [f32; 3]), SwcError> {
        if self.nodes.is_empty() {
            return Err(SwcError::EmptyMorphology);
        }
        let mut lo = [f32::INFINITY; 3];
        let mut hi = [f32::NEG_INFINITY; 3];
        for n in &self.nodes {
            for (a, c) in n.position().into_iter().enumerate() {
                lo[a] = lo[a].min(c - n.radius - margin);
                hi[a] = hi[a].max(c + n.radius + margin);
            }
        }
        Ok((lo, hi))
    }

    /// Concatenates morphologies, renumbering ids so they stay unique.
    pub fn merge(parts: &[SwcMorphology]) -> SwcMorphology {
        let mut nodes = Vec::new();
        let mut offset = 0u64;
        for part in parts {
            let max_id = part.nodes.iter().map(|n| n.id).max().unwrap_or(0);
            for n in &part.nodes {
                let mut n = *n;
                n.id += offset;
                if !n.is_root() {
                    n.parent_id += offset as i64;
                }
                nodes.push(n);
            }
            offset += max_id;
        }
        SwcMorphology { nodes }
    }
}

/// Parses SWC text. Nodes may precede their parents; validation runs after
/// every line has been read.
pub fn parse_swc(text: &str) -> Result<SwcMorphology, SwcError> {
    let mut nodes = Vec::new();
    let mut lines = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        nodes.push(parse_line(line, line_no)?);
        lines.push(line_no);
    }
    validate(&nodes, Some(&lines))?;
    Ok(SwcMorphology { nodes })
}

fn parse_line(line: &str, line_no: usize) -> Result<SwcNode, SwcError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    let malformed = |reason: String| SwcError::MalformedLine { line: line_no, reason };
    if fields.len() != 7 {
        return Err(malformed(format!("expected 7 fields, found {}", fields.len())));
    }
    let int = |s: &str, what: &str| -> Result<i64, SwcError> {
        s.parse::<i64>().map_err(|_| malformed(format!("invalid {what} '{s}'")))
    };
    let float = |s: &str, what: &str| -> Result<f32, SwcError> {
        match s.parse::<f32>() {
            Ok(v) if v.is_finite() => Ok(v),
            _ => Err(malformed(format!("invalid {what} '{s}'"))),
        }
    };
    let id = int(fields[0], "id")?;
    if id < 1 {
        return Err(malformed(format!("node id must be positive, got {id}")));
    }
    Ok(SwcNode {
        id: id as u64,
        type_code: int(fields[1], "type")?,
        x: float(fields[2], "x")?,
        y: float(fields[3], "y")?,
        z: float(fields[4], "z")?,
        radius: float(fields[5], "radius")?,
        parent_id: int(fields[6], "parent")?,
    })
}

fn validate(nodes: &[SwcNode], lines: Option<&[usize]>) -> Result<(), SwcError> {
    let line_of = |i: usize| lines.map_or(i + 1, |l| l[i]);
    let mut index = HashMap::with_capacity(nodes.len());
    for (i, n) in nodes.iter().enumerate() {
        if index.insert(n.id, i).is_some() {
            return Err(SwcError::DuplicateId {
                line: line_of(i),
                id: n.id,
            });
        }
    }
    for (i, n) in nodes.iter().enumerate() {
        if !n.radius.is_finite() || n.radius <= 0.0 {
            return Err(SwcError::NonPositiveRadius {
                line: line_of(i),
                id: n.id,
                radius: n.radius,
            });
        }
        if !n.is_root() && (n.parent_id < 1 || !index.contains_key(&(n.parent_id as u64))) {
            return Err(SwcError::DanglingParent {
                line: line_of(i),
                id: n.id,
                parent: n.parent_id,
            });
        }
    }
    // Walk parent chains, memoizing nodes already known to reach a root.
    #[derive(Clone, Copy, PartialEq)]
    enum Mark {
        Unseen,
        OnPath,
        Done,
    }
    let mut mark = vec![Mark::Unseen; nodes.len()];
    let mut path = Vec::new();
    for start in 0..nodes.len() {
        let mut cur = start;
        loop {
            match mark[cur] {
                Mark::Done => break,
                Mark::OnPath => return Err(SwcError::CycleDetected { id: nodes[cur].id }),
                Mark::Unseen => {
                    mark[cur] = Mark::OnPath;
                    path.push(cur);
                    let n = &nodes[cur];
                    if n.is_root() {
                        break;
                    }
                    cur = index[&(n.parent_id as u64)];
                }
            }
        }
        for p in path.drain(..) {
            mark[p] = Mark::Done;
        }
    }
    Ok(())
}

/// One line per node in stored order. Floats use the shortest decimal form
/// that parses back to the same `f32`.
pub fn write_swc(m: &SwcMorphology) -> String {
    let mut out = String::new();
    for n in &m.nodes {
        let _ = writeln!(
            out,
            "{} {} {} {} {} {} {}",
            n.id, n.type_code, n.x, n.y, n.z, n.radius, n.parent_id
        );
    }
    out
}
