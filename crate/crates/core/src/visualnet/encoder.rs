use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::{FaceGraph, LandmarkSequence, VisualError};
use crate::numerics::layers::{BatchNorm, ConvBn, Mode};
use crate::numerics::{BoundParams, ConvGeom, Graph, Init, ParamId, ParamStore, Scalar, Tensor, Var};

/// Fused-feature time steps per 4 s of input.
pub const FEATURES_PER_CHUNK: usize = 16;
const TEMPORAL_KERNEL: usize = 9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VisualEncoderConfig {
    pub channels: Vec<usize>,
    pub strides: Vec<usize>,
    /// Reject inputs that are not centred and unit-spread.
    pub require_normalized: bool,
}

impl VisualEncoderConfig {
    /// Five blocks ending at `out_channels`: `c/8, c/4, c/2, c, c` with
    /// temporal strides `1, 2, 2, 2, 1`.
    pub fn standard(out_channels: usize) -> Self {
        let c = out_channels;
        Self {
            channels: vec![(c / 8).max(1), (c / 4).max(1), (c / 2).max(1), c, c],
            strides: vec![1, 2, 2, 2, 1],
            require_normalized: true,
        }
    }

    pub fn out_channels(&self) -> usize {
        *self.channels.last().expect("at least one block")
    }
}

#[derive(Debug, Clone)]
struct StgcnBlock {
    gcn_weight: ParamId,
    gcn_bn: BatchNorm,
    tcn: ConvBn,
    residual: Option<ConvBn>,
}

impl StgcnBlock {
    fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &BoundParams,
        x: Var,
        adj: &Arc<Vec<T>>,
        mode: Mode,
    ) -> Result<Var, VisualError> {
        let h = g.graph_conv(x, p.var(self.gcn_weight), adj.clone())?;
        let h = self.gcn_bn.forward(g, store, p, h, mode)?;
        let h = g.relu(h);
        let h = self.tcn.forward(g, store, p, h, mode)?;
        let r = match &self.residual {
            Some(res) => res.forward(g, store, p, x, mode)?,
            None => x,
        };
        let s = g.add(h, r)?;
        Ok(g.relu(s))
    }
}

/// Stack of spatio-temporal graph blocks followed by node averaging and
/// adaptive temporal pooling. Works on any graph size.
#[derive(Debug, Clone)]
pub struct VisualEncoder {
    config: VisualEncoderConfig,
    blocks: Vec<StgcnBlock>,
}

impl VisualEncoder {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        config: VisualEncoderConfig,
    ) -> Result<Self, VisualError> {
        if config.channels.is_empty() || config.channels.len() != config.strides.len() {
            return Err(VisualError::Graph("channel and stride schedules must match".into()));
        }
        let mut blocks = Vec::with_capacity(config.channels.len());
        let mut c_in = 2;
        for (i, (&c, &s)) in config.channels.iter().zip(&config.strides).enumerate() {
            let name = format!("{prefix}.block{i}");
            let gcn_weight = store.add(&format!("{name}.gcn.weight"), &[c, c_in], Init::KaimingUniform { fan_in: c_in })?;
            let gcn_bn = BatchNorm::new(store, &format!("{name}.gcn.bn"), c)?;
            let tgeom = ConvGeom::new((TEMPORAL_KERNEL, 1), (s, 1), (TEMPORAL_KERNEL / 2, 0));
            let tcn = ConvBn::new(store, &format!("{name}.tcn"), (c, c), tgeom)?;
            let residual = if c_in == c && s == 1 {
                None
            } else {
                let rgeom = ConvGeom::new((1, 1), (s, 1), (0, 0));
                Some(ConvBn::new(store, &format!("{name}.res"), (c_in, c), rgeom)?)
            };
            blocks.push(StgcnBlock {
                gcn_weight,
                gcn_bn,
                tcn,
                residual,
            });
            c_in = c;
        }
        Ok(Self { config, blocks })
    }

    pub fn config(&self) -> &VisualEncoderConfig {
        &self.config
    }

    /// `[N, 2, frames, V]` landmarks to `[N, C, 1, out_len]` features.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &BoundParams,
        x: Var,
        graph: &FaceGraph,
        out_len: usize,
        mode: Mode,
    ) -> Result<Var, VisualError> {
        let [_, c, _, v] = g.value(x).dims4()?;
        if c != 2 || v != graph.n_nodes() {
            return Err(VisualError::LandmarkCount {
                expected: graph.n_nodes(),
                actual: v,
            });
        }
        let adj: Arc<Vec<T>> = Arc::new(
            graph
                .normalized_adjacency()
                .into_iter()
                .map(T::from_f64_lossy)
                .collect(),
        );
        let mut h = x;
        for block in &self.blocks {
            h = block.forward(g, store, p, h, &adj, mode)?;
        }
        let pooled = g.mean_last(h);
        let [n, c, t, _] = g.value(pooled).dims4()?;
        let r = g.reshape(pooled, &[n, c, 1, t])?;
        Ok(g.adaptive_avg_pool_last(r, out_len)?)
    }
}

/// Batches clips into an `[N, 2, frames, V]` tensor.
pub fn landmarks_to_tensor<T: Scalar>(seqs: &[&LandmarkSequence]) -> Result<Tensor<T>, VisualError> {
    let first = seqs.first().ok_or(VisualError::FrameCount(0))?;
    let (f, v) = (first.frames(), first.n_nodes());
    let mut data = vec![T::zero(); seqs.len() * 2 * f * v];
    for (i, s) in seqs.iter().enumerate() {
        if s.frames() != f || s.n_nodes() != v {
            return Err(VisualError::FrameCount(s.frames()));
        }
        for t in 0..f {
            for k in 0..v {
                let [x, y] = s.point(t, k);
                data[((i * 2) * f + t) * v + k] = T::from_f64_lossy(x);
                data[((i * 2 + 1) * f + t) * v + k] = T::from_f64_lossy(y);
            }
        }
    }
    Ok(Tensor::from_vec(&[seqs.len(), 2, f, v], data)?)
}

/// Encoded motion of one clip, `[C][1][16·n]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFeatures {
    pub features: Tensor<f32>,
}

impl MotionFeatures {
    pub fn channels(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn time_steps(&self) -> usize {
        self.features.shape()[2]
    }
}

/// Inference-mode encoding of a `100·n`-frame clip to `16·n` feature steps.
pub fn encode_motion(
    seq: &LandmarkSequence,
    graph: &FaceGraph,
    encoder: &VisualEncoder,
    store: &ParamStore<f32>,
) -> Result<MotionFeatures, VisualError> {
    let n = seq.chunk_n()?;
    if encoder.config.require_normalized && !seq.is_normalized(1e-6) {
        return Err(VisualError::NotNormalized);
    }
    let mut g = Graph::new();
    let p = store.bind_frozen(&mut g);
    let x = g.input(landmarks_to_tensor(&[seq])?);
    let y = encoder.forward(&mut g, store, &p, x, graph, FEATURES_PER_CHUNK * n, Mode::Eval)?;
    let t = g.value(y).shape()[3];
    let features = g.value(y).clone().reshape(&[encoder.config.out_channels(), 1, t])?;
    Ok(MotionFeatures { features })
}

#[cfg(test)]
mod tests {
    use super::super::{build_face_graph, normalize_landmarks};
    use super::*;
    use crate::numerics::gradcheck;

    fn clip(frames: usize, n_nodes: usize, seed: u64) -> LandmarkSequence {
        let coords = (0..frames * n_nodes * 2)
            .map(|i| ((i as f64 + 1.0) * 0.731 + seed as f64).sin() * 50.0 + 100.0)
            .collect();
        normalize_landmarks(&LandmarkSequence::with_nodes(frames, n_nodes, coords).unwrap()).unwrap()
    }

    fn standard_encoder() -> (VisualEncoder, ParamStore<f32>) {
        let mut store = ParamStore::new(5);
        let enc = VisualEncoder::new(&mut store, "visual", VisualEncoderConfig::standard(256)).unwrap();
        (enc, store)
    }

    #[test]
    fn standard_schedule() {
        let c = VisualEncoderConfig::standard(256);
        assert_eq!(c.channels, vec![32, 64, 128, 256, 256]);
        assert_eq!(c.strides, vec![1, 2, 2, 2, 1]);
    }

    #[test]
    fn output_shape_law() {
        let (enc, store) = standard_encoder();
        let graph = build_face_graph();
        for n in [1, 2] {
            let m = encode_motion(&clip(100 * n, 68, 1), &graph, &enc, &store).unwrap();
            assert_eq!(m.features.shape(), &[256, 1, 16 * n]);
            assert!(m.features.all_finite());
        }
    }

    #[test]
    fn temporal_schedule_reaches_thirteen() {
        let (enc, store) = standard_encoder();
        let mut g = Graph::<f32>::new();
        let p = store.bind_frozen(&mut g);
        let x = g.input(landmarks_to_tensor(&[&clip(100, 68, 2)]).unwrap());
        let adj = Arc::new(build_face_graph().normalized_adjacency().into_iter().map(|v| v as f32).collect());
        let mut h = x;
        let mut lens = vec![];
        for b in &enc.blocks {
            h = b.forward(&mut g, &store, &p, h, &adj, Mode::Eval).unwrap();
            lens.push(g.value(h).shape()[2]);
        }
        assert_eq!(lens, vec![100, 50, 25, 13, 13]);
    }

    #[test]
    fn rejects_bad_inputs() {
        let (enc, store) = standard_encoder();
        let graph = build_face_graph();
        assert!(matches!(
            encode_motion(&clip(90, 68, 1), &graph, &enc, &store),
            Err(VisualError::FrameCount(90))
        ));
        let raw = LandmarkSequence::new(100, vec![1.0; 100 * 136]).unwrap();
        assert!(matches!(
            encode_motion(&raw, &graph, &enc, &store),
            Err(VisualError::NotNormalized)
        ));
    }

    #[test]
    fn eval_mode_is_deterministic() {
        let (enc, store) = standard_encoder();
        let graph = build_face_graph();
        let c = clip(100, 68, 3);
        assert_eq!(
            encode_motion(&c, &graph, &enc, &store).unwrap(),
            encode_motion(&c, &graph, &enc, &store).unwrap()
        );
    }

    #[test]
    fn node_permutation_invariance() {
        let (enc, mut store) = standard_encoder();
        // Non-trivial running stats so eval mode is not an identity BN.
        let ids: Vec<_> = store
            .entries()
            .iter()
            .filter(|e| e.name.ends_with("running_mean"))
            .map(|e| store.id(&e.name).unwrap())
            .collect();
        for id in ids {
            store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 0.1);
        }
        let graph = build_face_graph();
        let c = clip(100, 68, 4);
        let perm: Vec<usize> = (0..68).map(|i| (i * 29 + 7) % 68).collect();
        let mut pc = Vec::new();
        for f in 0..100 {
            for &k in &perm {
                pc.extend(c.point(f, k));
            }
        }
        let pclip = LandmarkSequence::new(100, pc).unwrap();
        let pgraph = graph.permuted(&perm).unwrap();
        let a = encode_motion(&c, &graph, &enc, &store).unwrap();
        let b = encode_motion(&pclip, &pgraph, &enc, &store).unwrap();
        for (x, y) in a.features.data().iter().zip(b.features.data()) {
            assert!((x - y).abs() <= 1e-4 * x.abs().max(1.0), "{x} vs {y}");
        }
    }

    #[test]
    fn gradient_wrt_coordinates() {
        // Toy clip: 10 frames on a 4-node path graph, 64-bit.
        let graph = FaceGraph::from_edges(4, &[(0, 1), (1, 2), (2, 3)]).unwrap();
        let mut store = ParamStore::<f64>::new(9);
        let config = VisualEncoderConfig {
            channels: vec![3, 4, 4],
            strides: vec![1, 2, 1],
            require_normalized: false,
        };
        let enc = VisualEncoder::new(&mut store, "v", config).unwrap();
        let c = clip(10, 4, 5);
        let x = landmarks_to_tensor::<f64>(&[&c, &clip(10, 4, 6)]).unwrap();
        let proj: Vec<f64> = (0..2 * 4 * 3).map(|i| ((i * 7 % 11) as f64 - 5.0) / 5.0).collect();
        let errs = gradcheck::check(
            &[x],
            |g, v| {
                let p = store.bind_frozen(g);
                let y = enc
                    .forward(g, &store, &p, v[0], &graph, 3, Mode::Train)
                    .map_err(|e| match e {
                        VisualError::Numerics(n) => n,
                        other => panic!("{other}"),
                    })?;
                g.weighted_sum(y, Tensor::from_vec(&[2, 4, 1, 3], proj.clone())?)
            },
            1e-6,
            usize::MAX,
        )
        .unwrap();
        assert!(errs[0] <= 1e-4, "relative error {}", errs[0]);
    }
}
