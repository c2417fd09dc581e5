use super::{AudioError, ModelConfig, LEAKY_SLOPE, SPATIAL_BLOCKS};
use crate::dsp::ComplexSpectrogram;
use crate::maskmath::ComplexMask;
use crate::numerics::layers::{Conv, ConvBn, Mode};
use crate::numerics::{BoundParams, ConvGeom, Graph, ParamStore, Scalar, Tensor, Var};
use crate::visualnet::{FaceGraph, VisualEncoder, VisualEncoderConfig};

#[derive(Debug, Clone)]
struct EncoderBlock {
    conv1: ConvBn,
    conv2: ConvBn,
    down: ConvBn,
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    up: ConvBn,
    conv1: ConvBn,
    conv2: ConvBn,
}

/// Two 1×1 maps from visual features to per-channel, per-time FiLM
/// coefficients. Initialized so that `γ = 1`, `β = 0`.
#[derive(Debug, Clone)]
pub struct FilmMaps {
    pub gamma: Conv,
    pub beta: Conv,
}

impl FilmMaps {
    fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize) -> Result<Self, AudioError> {
        let geom = ConvGeom::new((1, 1), (1, 1), (0, 0));
        let gamma = Conv::new(store, "film.gamma", (channels, channels), geom, true)?;
        let beta = Conv::new(store, "film.beta", (channels, channels), geom, true)?;
        for w in [gamma.weight, beta.weight] {
            store.get_mut(w).data_mut().fill(T::zero());
        }
        store
            .get_mut(gamma.bias.expect("film bias"))
            .data_mut()
            .fill(T::one());
        Ok(Self { gamma, beta })
    }
}

/// `(γ, β)`, each `[N, C, 1, T]`, from visual features `[N, C, 1, T]`.
pub fn film_from_visual<T: Scalar>(
    g: &mut Graph<T>,
    maps: &FilmMaps,
    p: &BoundParams,
    visual: Var,
) -> Result<(Var, Var), AudioError> {
    Ok((maps.gamma.forward(g, p, visual)?, maps.beta.forward(g, p, visual)?))
}

/// Result of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOut {
    /// Bounded mask `[N, 2, F, T]`.
    pub mask: Var,
    /// Audio features at the fusion point, before modulation.
    pub fusion: Var,
    /// Visual features `[N, C, 1, T_fusion]` when the model is audio-visual.
    pub visual: Option<Var>,
}

/// Parameter layout and graph construction for the U-Net / Y-Net.
#[derive(Debug, Clone)]
pub struct YNet {
    config: ModelConfig,
    encoder: Vec<EncoderBlock>,
    decoder: Vec<DecoderBlock>,
    head: Conv,
    visual: Option<(VisualEncoder, FilmMaps)>,
}

impl YNet {
    /// Registers all parameters in `store`. Audio-path parameters are
    /// registered first so U-Net and Y-Net share their names and shapes.
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, config: ModelConfig) -> Result<Self, AudioError> {
        config.validate()?;
        let conv3 = ConvGeom::new((3, 3), (1, 1), (1, 1));
        let mut encoder = Vec::with_capacity(config.num_blocks);
        let mut c_in = 2;
        for i in 0..config.num_blocks {
            let c = config.block_channels(i);
            let name = format!("enc{i}");
            encoder.push(EncoderBlock {
                conv1: ConvBn::new(store, &format!("{name}.conv1"), (c_in, c), conv3)?,
                conv2: ConvBn::new(store, &format!("{name}.conv2"), (c, c), conv3)?,
                down: ConvBn::new(store, &format!("{name}.down"), (c, c), down_geom(&config, i))?,
            });
            c_in = c;
        }
        let mut decoder = Vec::with_capacity(config.num_blocks);
        for i in (0..config.num_blocks).rev() {
            let c = config.block_channels(i);
            let name = format!("dec{i}");
            decoder.push(DecoderBlock {
                up: ConvBn::new_transposed(store, &format!("{name}.up"), (c_in, c), down_geom(&config, i))?,
                conv1: ConvBn::new(store, &format!("{name}.conv1"), (2 * c, c), conv3)?,
                conv2: ConvBn::new(store, &format!("{name}.conv2"), (c, c), conv3)?,
            });
            c_in = c;
        }
        decoder.reverse();
        let head = Conv::new(
            store,
            "head",
            (config.base_channels, 2),
            ConvGeom::new((1, 1), (1, 1), (0, 0)),
            true,
        )?;
        let visual = if config.use_visual {
            let venc = VisualEncoder::new(
                store,
                "visual",
                VisualEncoderConfig::standard(config.bottleneck_channels),
            )?;
            Some((venc, FilmMaps::new(store, config.bottleneck_channels)?))
        } else {
            None
        };
        Ok(Self {
            config,
            encoder,
            decoder,
            head,
            visual,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn film_maps(&self) -> Option<&FilmMaps> {
        self.visual.as_ref().map(|(_, f)| f)
    }

    pub fn visual_encoder(&self) -> Option<&VisualEncoder> {
        self.visual.as_ref().map(|(v, _)| v)
    }

    /// Forward pass on a `[N, 2, F, T]` spectrogram tensor and, for the
    /// audio-visual model, `[N, 2, frames, V]` landmarks on `graph`.
    #[allow(clippy::too_many_arguments)]
    pub fn forward<T: Scalar>(
        &self,
        g: &mut Graph<T>,
        store: &ParamStore<T>,
        p: &BoundParams,
        spec: Var,
        landmarks: Option<(Var, &FaceGraph)>,
        mode: Mode,
    ) -> Result<ForwardOut, AudioError> {
        let [_, c, f, t] = g.value(spec).dims4()?;
        let (rf, rt) = self.config.total_reduction();
        if c != 2 || f % rf != 0 || t % rt != 0 || f == 0 || t == 0 {
            return Err(AudioError::Shape(format!(
                "spectrogram tensor {:?} must be [N, 2, F, T] with F divisible by {rf} and T by {rt}",
                g.value(spec).shape()
            )));
        }
        match (&self.visual, &landmarks) {
            (Some(_), None) => return Err(AudioError::Modality("landmarks are required".into())),
            (None, Some(_)) => return Err(AudioError::Modality("audio-only model got landmarks".into())),
            _ => {}
        }

        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = spec;
        let mut fusion = None;
        let mut visual_out = None;
        for (i, block) in self.encoder.iter().enumerate() {
            let a = block.conv1.forward(g, store, p, h, mode)?;
            let a = g.leaky_relu(a, LEAKY_SLOPE);
            let a = block.conv2.forward(g, store, p, a, mode)?;
            let a = g.leaky_relu(a, LEAKY_SLOPE);
            skips.push(a);
            let d = block.down.forward(g, store, p, a, mode)?;
            h = g.leaky_relu(d, LEAKY_SLOPE);
            if i + 1 == SPATIAL_BLOCKS {
                fusion = Some(h);
                if let (Some((venc, film)), Some((lm, graph))) = (&self.visual, &landmarks) {
                    let t_fuse = g.value(h).shape()[3];
                    let v = venc.forward(g, store, p, *lm, graph, t_fuse, mode)?;
                    let n_audio = g.value(h).shape()[0];
                    if g.value(v).shape()[0] != n_audio {
                        return Err(AudioError::Shape("audio and visual batch sizes differ".into()));
                    }
                    let (gamma, beta) = film_from_visual(g, film, p, v)?;
                    h = g.film(h, gamma, beta)?;
                    visual_out = Some(v);
                }
            }
        }

        for (block, skip) in self.decoder.iter().zip(skips).rev() {
            let u = block.up.forward(g, store, p, h, mode)?;
            let u = g.leaky_relu(u, LEAKY_SLOPE);
            let cat = g.concat(u, skip)?;
            let a = block.conv1.forward(g, store, p, cat, mode)?;
            let a = g.leaky_relu(a, LEAKY_SLOPE);
            let a = block.conv2.forward(g, store, p, a, mode)?;
            h = g.leaky_relu(a, LEAKY_SLOPE);
        }
        let logits = self.head.forward(g, p, h)?;
        Ok(ForwardOut {
            mask: g.tanh(logits),
            fusion: fusion.expect("at least four blocks"),
            visual: visual_out,
        })
    }
}

fn down_geom(config: &ModelConfig, i: usize) -> ConvGeom {
    match config.block_stride(i) {
        (2, 2) => ConvGeom::new((4, 4), (2, 2), (1, 1)),
        _ => ConvGeom::new((4, 3), (2, 1), (1, 1)),
    }
}

/// Stacks spectrograms into a `[N, 2, F, T]` tensor of real and imaginary
/// planes.
pub fn spec_to_tensor<T: Scalar>(specs: &[&ComplexSpectrogram]) -> Result<Tensor<T>, AudioError> {
    let first = specs.first().ok_or_else(|| AudioError::Shape("empty batch".into()))?;
    let (f, t) = first.shape();
    let plane = f * t;
    let mut data = Vec::with_capacity(specs.len() * 2 * plane);
    for s in specs {
        if s.shape() != (f, t) {
            return Err(AudioError::Shape(format!("batch mixes {:?} and {:?}", (f, t), s.shape())));
        }
        data.extend(s.data.iter().map(|c| T::from_f64_lossy(c.re)));
        data.extend(s.data.iter().map(|c| T::from_f64_lossy(c.im)));
    }
    Ok(Tensor::from_vec(&[specs.len(), 2, f, t], data)?)
}

/// Sample `index` of a `[N, 2, F, T]` tensor as a bounded mask.
/// Largest `f32` below one. `f32` tanh rounds to exactly ±1 beyond |x| ≈ 9,
/// so masks read from the network are clamped back into the open interval.
pub const MASK_LIMIT: f64 = 1.0 - f32::EPSILON as f64 / 2.0;

pub fn mask_from_tensor<T: Scalar>(tensor: &Tensor<T>, index: usize) -> Result<ComplexMask, AudioError> {
    let [n, c, f, t] = tensor.dims4()?;
    if c != 2 || index >= n {
        return Err(AudioError::Shape(format!("cannot read mask {index} from {:?}", tensor.shape())));
    }
    let plane = f * t;
    let base = index * 2 * plane;
    let d = tensor.data();
    let open = |v: &T| v.to_f64_lossy().clamp(-MASK_LIMIT, MASK_LIMIT);
    Ok(ComplexMask {
        real: d[base..base + plane].iter().map(open).collect(),
        imag: d[base + plane..base + 2 * plane].iter().map(open).collect(),
        n_freq: f,
        n_time: t,
        bounded: true,
    })
}
