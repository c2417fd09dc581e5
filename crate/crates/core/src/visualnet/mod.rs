//! Visual branch: face-landmark graph, landmark normalization and the
//! spatio-temporal graph-convolutional motion encoder.

mod encoder;
mod io;

pub use encoder::{encode_motion, landmarks_to_tensor, MotionFeatures, VisualEncoder, VisualEncoderConfig};
pub use io::{parse_landmarks_json, read_landmarks, write_landmarks};

use std::collections::BTreeSet;

use thiserror::Error;

use crate::numerics::{normalize_adjacency, NumericsError};

pub const NUM_LANDMARKS: usize = 68;
pub const LANDMARK_FPS: u32 = 25;

#[derive(Debug, Error)]
pub enum VisualError {
    #[error("expected {expected} landmarks per frame, got {actual}")]
    LandmarkCount { expected: usize, actual: usize },
    #[error("coordinate buffer holds {actual} values, expected {expected}")]
    BufferLength { expected: usize, actual: usize },
    #[error("landmark clip has {0} frames, expected a positive multiple of 100")]
    FrameCount(usize),
    #[error("non-finite landmark coordinate at frame {frame}, node {node}")]
    NonFinite { frame: usize, node: usize },
    #[error("landmarks have zero spread")]
    ZeroSpread,
    #[error("landmarks are not normalized")]
    NotNormalized,
    #[error("invalid graph: {0}")]
    Graph(String),
    #[error("landmark file: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

/// Per-frame 2-D landmark positions, stored `[frame][node][x, y]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LandmarkSequence {
    coords: Vec<f64>,
    frames: usize,
    n_nodes: usize,
}

impl LandmarkSequence {
    /// A clip of 68-point face landmarks.
    pub fn new(frames: usize, coords: Vec<f64>) -> Result<Self, VisualError> {
        Self::with_nodes(frames, NUM_LANDMARKS, coords)
    }

    /// A clip over an arbitrary point set (used for toy graphs).
    pub fn with_nodes(frames: usize, n_nodes: usize, coords: Vec<f64>) -> Result<Self, VisualError> {
        let expected = frames * n_nodes * 2;
        if coords.len() != expected {
            return Err(VisualError::BufferLength {
                expected,
                actual: coords.len(),
            });
        }
        if let Some(i) = coords.iter().position(|v| !v.is_finite()) {
            return Err(VisualError::NonFinite {
                frame: i / (2 * n_nodes),
                node: (i / 2) % n_nodes,
            });
        }
        Ok(Self {
            coords,
            frames,
            n_nodes,
        })
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn point(&self, frame: usize, node: usize) -> [f64; 2] {
        let i = (frame * self.n_nodes + node) * 2;
        [self.coords[i], self.coords[i + 1]]
    }

    /// Chunk multiplier `n` for a clip of `100·n` frames.
    pub fn chunk_n(&self) -> Result<usize, VisualError> {
        if self.frames == 0 || !self.frames.is_multiple_of(100) {
            return Err(VisualError::FrameCount(self.frames));
        }
        Ok(self.frames / 100)
    }

    /// Frames `[start, start + len)` as a new clip.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self, VisualError> {
        if start + len > self.frames {
            return Err(VisualError::FrameCount(self.frames));
        }
        let w = self.n_nodes * 2;
        Self::with_nodes(len, self.n_nodes, self.coords[start * w..(start + len) * w].to_vec())
    }

    /// Whether every frame is centred and the clip has unit coordinate spread.
    pub fn is_normalized(&self, tol: f64) -> bool {
        let (centroids, std) = self.stats();
        centroids.iter().all(|c| c[0].abs() <= tol && c[1].abs() <= tol) && (std - 1.0).abs() <= tol
    }

    /// Per-frame centroids and the clip-wide standard deviation of the
    /// centred coordinates.
    fn stats(&self) -> (Vec<[f64; 2]>, f64) {
        let v = self.n_nodes as f64;
        let centroids: Vec<[f64; 2]> = self
            .coords
            .chunks(self.n_nodes * 2)
            .map(|f| {
                let (sx, sy) = f.chunks(2).fold((0.0, 0.0), |(a, b), p| (a + p[0], b + p[1]));
                [sx / v, sy / v]
            })
            .collect();
        let mut sq = 0.0;
        for (f, c) in self.coords.chunks(self.n_nodes * 2).zip(&centroids) {
            for p in f.chunks(2) {
                sq += (p[0] - c[0]).powi(2) + (p[1] - c[1]).powi(2);
            }
        }
        let std = (sq / self.coords.len().max(1) as f64).sqrt();
        (centroids, std)
    }
}

/// Removes each frame's centroid and divides by the clip-wide standard
/// deviation of the coordinates.
pub fn normalize_landmarks(seq: &LandmarkSequence) -> Result<LandmarkSequence, VisualError> {
    let (centroids, std) = seq.stats();
    let scale = seq
        .coords
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    if !(std > 1e-12 * scale) {
        return Err(VisualError::ZeroSpread);
    }
    let mut coords = Vec::with_capacity(seq.coords.len());
    for (f, c) in seq.coords.chunks(seq.n_nodes * 2).zip(&centroids) {
        for p in f.chunks(2) {
            coords.push((p[0] - c[0]) / std);
            coords.push((p[1] - c[1]) / std);
        }
    }
    LandmarkSequence::with_nodes(seq.frames, seq.n_nodes, coords)
}

/// Undirected landmark graph without self-loops.
#[derive(Debug, Clone, PartialEq)]
pub struct FaceGraph {
    n_nodes: usize,
    edges: Vec<(usize, usize)>,
    adjacency: Vec<f64>,
}

fn chain(range: std::ops::RangeInclusive<usize>) -> impl Iterator<Item = (usize, usize)> {
    let (s, e) = (*range.start(), *range.end());
    (s..e).map(|i| (i, i + 1))
}

fn ring(range: std::ops::RangeInclusive<usize>) -> impl Iterator<Item = (usize, usize)> {
    let (s, e) = (*range.start(), *range.end());
    chain(range).chain(std::iter::once((e, s)))
}

/// Extra edges tying the iBUG-68 regions into one component.
pub const BRIDGE_EDGES: [(usize, usize); 12] = [
    (30, 33),
    (36, 17),
    (45, 26),
    (48, 31),
    (54, 35),
    (62, 66),
    (0, 17),
    (16, 26),
    (21, 27),
    (22, 27),
    (48, 60),
    (54, 64),
];

/// The iBUG-68 face topology: jaw, brows, nose, eye and lip contours plus
/// [`BRIDGE_EDGES`].
pub fn build_face_graph() -> FaceGraph {
    let edges: Vec<(usize, usize)> = chain(0..=16)
        .chain(chain(17..=21))
        .chain(chain(22..=26))
        .chain(chain(27..=30))
        .chain(chain(31..=35))
        .chain(ring(36..=41))
        .chain(ring(42..=47))
        .chain(ring(48..=59))
        .chain(ring(60..=67))
        .chain(BRIDGE_EDGES)
        .collect();
    FaceGraph::from_edges(NUM_LANDMARKS, &edges).expect("iBUG-68 graph is valid")
}

impl FaceGraph {
    /// Builds a graph from undirected edges; duplicates collapse, self-loops
    /// and disconnected graphs are rejected.
    pub fn from_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Self, VisualError> {
        if n_nodes == 0 {
            return Err(VisualError::Graph("empty graph".into()));
        }
        let mut set = BTreeSet::new();
        for &(a, b) in edges {
            if a >= n_nodes || b >= n_nodes {
                return Err(VisualError::Graph(format!("edge ({a}, {b}) out of range")));
            }
            if a == b {
                return Err(VisualError::Graph(format!("self-loop at {a}")));
            }
            set.insert((a.min(b), a.max(b)));
        }
        let mut adjacency = vec![0.0; n_nodes * n_nodes];
        for &(a, b) in &set {
            adjacency[a * n_nodes + b] = 1.0;
            adjacency[b * n_nodes + a] = 1.0;
        }
        let g = Self {
            n_nodes,
            edges: set.into_iter().collect(),
            adjacency,
        };
        if !g.is_connected() {
            return Err(VisualError::Graph("graph is not connected".into()));
        }
        Ok(g)
    }

    pub fn n_nodes(&self) -> usize {
        self.n_nodes
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn adjacency(&self) -> &[f64] {
        &self.adjacency
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node * self.n_nodes..(node + 1) * self.n_nodes]
            .iter()
            .filter(|&&a| a != 0.0)
            .count()
    }

    pub fn is_connected(&self) -> bool {
        let v = self.n_nodes;
        let mut seen = vec![false; v];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(i) = stack.pop() {
            for j in 0..v {
                if self.adjacency[i * v + j] != 0.0 && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            }
        }
        seen.into_iter().all(|s| s)
    }

    /// `D̃^{-1/2}(A + I)D̃^{-1/2}`.
    pub fn normalized_adjacency(&self) -> Vec<f64> {
        normalize_adjacency(&self.adjacency, self.n_nodes).expect("adjacency is symmetric")
    }

    /// Relabels nodes so that new node `i` is old node `perm[i]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self, VisualError> {
        let inv = invert_permutation(perm, self.n_nodes)?;
        let edges: Vec<(usize, usize)> = self.edges.iter().map(|&(a, b)| (inv[a], inv[b])).collect();
        Self::from_edges(self.n_nodes, &edges)
    }
}

fn invert_permutation(perm: &[usize], n: usize) -> Result<Vec<usize>, VisualError> {
    let mut inv = vec![usize::MAX; n];
    if perm.len() != n {
        return Err(VisualError::Graph("permutation length".into()));
    }
    for (i, &p) in perm.iter().enumerate() {
        if p >= n || inv[p] != usize::MAX {
            return Err(VisualError::Graph("not a permutation".into()));
        }
        inv[p] = i;
    }
    Ok(inv)
}
