//! Multi-level graph-convolutional encoder.
//!
//! Three GCN streams read DCT coefficients of the full body, the upper body
//! and the lower body. Each layer computes `σ(A·F·W)` with a learnable dense
//! adjacency `A` over the stream's joint channels. The two part streams are
//! fused into a local feature, the full-body stream into a global one, and a
//! final affine layer mixes both into `F_all`.

use ndarray::Array2;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, NodeId, ParamStore};
use crate::dct::DctBasis;
use crate::motion::{preprocess, split_parts, BodyPartition, MotionClip};
use crate::{Error, Result};

/// Which part streams feed the local branch. The full-body stream is always on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Streams {
    pub upper: bool,
    pub lower: bool,
}

impl Default for Streams {
    fn default() -> Self {
        Self {
            upper: true,
            lower: true,
        }
    }
}

impl Streams {
    pub fn any_local(&self) -> bool {
        self.upper || self.lower
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// GCN depth per stream.
    pub layers: usize,
    pub hidden: usize,
    /// Width of the last GCN layer.
    pub out_dim: usize,
    /// Width of every fused vector, and so of the flow.
    pub fuse_dim: usize,
    /// Retained DCT coefficients per trajectory.
    pub dct_coeffs: usize,
    pub streams: Streams,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            hidden: 128,
            out_dim: 16,
            fuse_dim: 128,
            dct_coeffs: 10,
            streams: Streams::default(),
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::Config("encoder.layers must be >= 2".into()));
        }
        if self.hidden == 0 || self.out_dim == 0 || self.fuse_dim == 0 || self.dct_coeffs == 0 {
            return Err(Error::Config(
                "encoder widths and dct_coeffs must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Identity,
}

/// `σ(A·F·W)`, multiplying in whichever order is cheaper.
pub fn gcn_layer_forward(
    g: &mut Graph,
    input: NodeId,
    adjacency: NodeId,
    weight: NodeId,
    activation: Activation,
) -> Result<NodeId> {
    let (d_in, d_out) = g.value(weight).dim();
    let pre = if d_in <= d_out {
        let af = g.matmul(adjacency, input)?;
        g.matmul(af, weight)?
    } else {
        let fw = g.matmul(input, weight)?;
        g.matmul(adjacency, fw)?
    };
    Ok(match activation {
        Activation::Tanh => g.tanh(pre),
        Activation::Identity => pre,
    })
}

/// Runs a stack of `(A, W)` layers: tanh on all but the last, identity on the last.
pub fn stream_forward(g: &mut Graph, coeffs: NodeId, layers: &[(NodeId, NodeId)]) -> Result<NodeId> {
    let mut f = coeffs;
    for (i, &(a, w)) in layers.iter().enumerate() {
        let act = if i + 1 == layers.len() {
            Activation::Identity
        } else {
            Activation::Tanh
        };
        f = gcn_layer_forward(g, f, a, w, act)?;
    }
    Ok(f)
}

/// DCT coefficients for each stream of one clip.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub full: Array2<f64>,
    pub upper: Array2<f64>,
    pub lower: Array2<f64>,
}

impl EncoderInput {
    /// Centres, splits and DCT-projects a clip with its own `H x M` basis.
    pub fn from_clip(clip: &MotionClip, partition: &BodyPartition, coeffs: usize) -> Result<Self> {
        if clip.frames() < coeffs {
            return Err(Error::TooShort {
                id: clip.id.clone(),
                frames: clip.frames(),
                coeffs,
            });
        }
        let traj = preprocess(clip);
        let (up, low) = split_parts(&traj, partition, clip.channels())?;
        let basis = DctBasis::new(clip.frames(), coeffs)?;
        Ok(Self {
            full: basis.forward(&traj)?.into_matrix(),
            upper: basis.forward(&up)?.into_matrix(),
            lower: basis.forward(&low)?.into_matrix(),
        })
    }
}

/// Node ids of one clip's fused features.
#[derive(Debug, Clone, Copy)]
pub struct MultiLevelFeatures {
    pub global: NodeId,
    pub upper: Option<NodeId>,
    pub lower: Option<NodeId>,
    pub local: Option<NodeId>,
    /// `1 x fuse_dim` row.
    pub all: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Full,
    Upper,
    Lower,
}

impl Stream {
    fn tag(self) -> &'static str {
        match self {
            Stream::Full => "gcn_full",
            Stream::Upper => "gcn_upper",
            Stream::Lower => "gcn_lower",
        }
    }
}

/// Encoder layout: config plus the node counts of each stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub full_rows: usize,
    pub upper_rows: usize,
    pub lower_rows: usize,
}

const PREFIX: &str = "encoder";

impl Encoder {
    pub fn new(config: EncoderConfig, partition: &BodyPartition, channels: usize) -> Result<Self> {
        config.validate()?;
        let upper_rows = partition.upper.len() * channels;
        let lower_rows = partition.lower.len() * channels;
        Ok(Self {
            config,
            full_rows: upper_rows + lower_rows,
            upper_rows,
            lower_rows,
        })
    }

    fn rows(&self, s: Stream) -> usize {
        match s {
            Stream::Full => self.full_rows,
            Stream::Upper => self.upper_rows,
            Stream::Lower => self.lower_rows,
        }
    }

    fn active_streams(&self) -> Vec<Stream> {
        let mut v = vec![Stream::Full];
        if self.config.streams.upper {
            v.push(Stream::Upper);
        }
        if self.config.streams.lower {
            v.push(Stream::Lower);
        }
        v
    }

    fn layer_name(s: Stream, layer: usize, which: &str) -> String {
        format!("{PREFIX}.{}.layer{}.{which}", s.tag(), layer + 1)
    }

    fn layer_widths(&self, layer: usize) -> (usize, usize) {
        let c = &self.config;
        let d_in = if layer == 0 { c.dct_coeffs } else { c.hidden };
        let d_out = if layer + 1 == c.layers { c.out_dim } else { c.hidden };
        (d_in, d_out)
    }

    fn local_in(&self) -> usize {
        let c = &self.config;
        let mut n = 0;
        if c.streams.upper {
            n += self.upper_rows * c.out_dim;
        }
        if c.streams.lower {
            n += self.lower_rows * c.out_dim;
        }
        n
    }

    /// Parameter names and shapes, in name order.
    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let c = &self.config;
        let mut out = Vec::new();
        for s in self.active_streams() {
            let p = self.rows(s);
            for l in 0..c.layers {
                out.push((Self::layer_name(s, l, "A"), (p, p)));
                out.push((Self::layer_name(s, l, "W"), self.layer_widths(l)));
            }
        }
        let fd = c.fuse_dim;
        out.push((format!("{PREFIX}.fuse_glb.W"), (self.full_rows * c.out_dim, fd)));
        out.push((format!("{PREFIX}.fuse_glb.b"), (1, fd)));
        let all_in = if c.streams.any_local() {
            out.push((format!("{PREFIX}.fuse_loc.W"), (self.local_in(), fd)));
            out.push((format!("{PREFIX}.fuse_loc.b"), (1, fd)));
            2 * fd
        } else {
            fd
        };
        out.push((format!("{PREFIX}.fuse_all.W"), (all_in, fd)));
        out.push((format!("{PREFIX}.fuse_all.b"), (1, fd)));
        out.sort();
        out
    }

    /// Registers freshly initialised parameters: entries of `A` and `W` are
    /// uniform in `±1/√fan`, fusion biases start at zero.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for (name, (r, c)) in self.param_shapes() {
            let value = if name.ends_with(".b") {
                Array2::zeros((r, c))
            } else {
                let bound = 1.0 / (r as f64).sqrt();
                Array2::from_shape_fn((r, c), |_| rng.gen_range(-bound..bound))
            };
            store.insert(name, value)?;
        }
        Ok(())
    }

    fn stream_layers(&self, b: &Binding, s: Stream) -> Result<Vec<(NodeId, NodeId)>> {
        (0..self.config.layers)
            .map(|l| {
                Ok((
                    b.get(&Self::layer_name(s, l, "A"))?,
                    b.get(&Self::layer_name(s, l, "W"))?,
                ))
            })
            .collect()
    }

    fn affine(g: &mut Graph, b: &Binding, net: &str, x: NodeId, tanh: bool) -> Result<NodeId> {
        let w = b.get(&format!("{PREFIX}.{net}.W"))?;
        let bias = b.get(&format!("{PREFIX}.{net}.b"))?;
        let xw = g.matmul(x, w)?;
        let y = g.add(xw, bias)?;
        Ok(if tanh { g.tanh(y) } else { y })
    }

    /// Fuses raw stream outputs into the multi-level features.
    pub fn fuse(
        &self,
        g: &mut Graph,
        b: &Binding,
        full: NodeId,
        upper: Option<NodeId>,
        lower: Option<NodeId>,
    ) -> Result<MultiLevelFeatures> {
        let glb_in = g.flatten(full);
        let global = Self::affine(g, b, "fuse_glb", glb_in, true)?;
        let upper = upper.map(|u| g.flatten(u));
        let lower = lower.map(|l| g.flatten(l));
        let parts: Vec<NodeId> = upper.iter().chain(lower.iter()).copied().collect();
        let local = if parts.is_empty() {
            None
        } else {
            let cat = g.concat_cols(&parts)?;
            Some(Self::affine(g, b, "fuse_loc", cat, true)?)
        };
        let all_in = match local {
            Some(l) => g.concat_cols(&[global, l])?,
            None => global,
        };
        let all = Self::affine(g, b, "fuse_all", all_in, false)?;
        Ok(MultiLevelFeatures {
            global,
            upper,
            lower,
            local,
            all,
        })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, input: &EncoderInput) -> Result<MultiLevelFeatures> {
        let run = |g: &mut Graph, s: Stream, coeffs: &Array2<f64>| -> Result<NodeId> {
            let c = g.constant(coeffs.clone());
            stream_forward(g, c, &self.stream_layers(b, s)?)
        };
        let full = run(g, Stream::Full, &input.full)?;
        let upper = match self.config.streams.upper {
            true => Some(run(g, Stream::Upper, &input.upper)?),
            false => None,
        };
        let lower = match self.config.streams.lower {
            true => Some(run(g, Stream::Lower, &input.lower)?),
            false => None,
        };
        let f = self.fuse(g, b, full, upper, lower)?;
        if g.value(f.all).iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("encoder output".into()));
        }
        Ok(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use crate::rng;
    use approx::assert_abs_diff_eq;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> (Encoder, ParamStore, EncoderInput) {
        let partition = BodyPartition {
            upper: vec![0],
            lower: vec![1],
        };
        let cfg = EncoderConfig {
            layers: 2,
            hidden: 4,
            out_dim: 2,
            fuse_dim: 3,
            dct_coeffs: 3,
            streams: Streams::default(),
        };
        let enc = Encoder::new(cfg, &partition, 3).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut rng::stream(3, rng::INIT)).unwrap();
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let full = Array2::from_shape_fn((6, 3), |_| r.gen_range(-1.0..1.0));
        let input = EncoderInput {
            upper: full.slice(ndarray::s![0..3, ..]).to_owned(),
            lower: full.slice(ndarray::s![3..6, ..]).to_owned(),
            full,
        };
        (enc, store, input)
    }

    #[test]
    fn identity_layer_passes_input_through() {
        let mut g = Graph::new();
        let f = g.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let a = g.constant(Array2::eye(2));
        let w = g.constant(Array2::eye(2));
        let y = gcn_layer_forward(&mut g, f, a, w, Activation::Identity).unwrap();
        assert_eq!(g.value(y), g.value(f));
    }

    #[test]
    fn scalar_tanh_layer() {
        let mut g = Graph::new();
        let f = g.constant(array![[1.0]]);
        let a = g.constant(array![[2.0]]);
        let w = g.constant(array![[0.5]]);
        let y = gcn_layer_forward(&mut g, f, a, w, Activation::Tanh).unwrap();
        assert_abs_diff_eq!(g.scalar(y), 0.761_594_155_955_764_9, epsilon = 1e-12);
    }

    #[test]
    fn tanh_layer_output_is_bounded() {
        let mut g = Graph::new();
        let f = g.constant(Array2::from_shape_fn((5, 3), |(i, j)| (i * 3 + j) as f64 - 7.0));
        let a = g.constant(Array2::from_elem((5, 5), 3.0));
        let w = g.constant(Array2::from_elem((3, 2), -2.0));
        let y = gcn_layer_forward(&mut g, f, a, w, Activation::Tanh).unwrap();
        assert!(g.value(y).iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn identity_stream_returns_coefficients() {
        let mut g = Graph::new();
        let c = g.constant(array![[1.0, -2.0], [0.5, 3.0]]);
        let i = g.constant(Array2::eye(2));
        // Identity activations on every layer make the stack exactly linear.
        let mut f = c;
        for _ in 0..2 {
            f = gcn_layer_forward(&mut g, f, i, i, Activation::Identity).unwrap();
        }
        assert_eq!(g.value(f), g.value(c));
    }

    #[test]
    fn stream_output_shape() {
        let partition = BodyPartition {
            upper: (0..16).collect(),
            lower: (16..24).collect(),
        };
        let enc = Encoder::new(EncoderConfig::default(), &partition, 3).unwrap();
        let mut store = ParamStore::new();
        enc.init_params(&mut store, &mut rng::stream(1, rng::INIT)).unwrap();
        let mut g = Graph::new();
        let b = g.bind(&store);
        let c = g.constant(Array2::zeros((72, 10)));
        let out = stream_forward(&mut g, c, &enc.stream_layers(&b, Stream::Full).unwrap()).unwrap();
        assert_eq!(g.value(out).dim(), (72, 16));
    }

    #[test]
    fn width_mismatch_is_an_error() {
        let mut g = Graph::new();
        let c = g.constant(Array2::zeros((2, 3)));
        let a = g.constant(Array2::eye(2));
        let w = g.constant(Array2::zeros((4, 4)));
        assert!(stream_forward(&mut g, c, &[(a, w)]).is_err());
    }

    #[test]
    fn stream_adjacency_gradient_matches_finite_differences() {
        let (enc, store, input) = small();
        let r = grad_check(
            &store,
            |g, b| {
                let c = g.constant(input.full.clone());
                let out = stream_forward(g, c, &enc.stream_layers(b, Stream::Full)?)?;
                Ok::<_, Error>(g.sum(out))
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
    }

    #[test]
    fn zero_fusion_gives_zero_features() {
        let (enc, store, _) = small();
        let mut zero = ParamStore::new();
        for (n, v) in store.iter() {
            zero.insert(n, Array2::zeros(v.dim())).unwrap();
        }
        let mut g = Graph::new();
        let b = g.bind(&zero);
        let f = g.constant(Array2::zeros((6, 2)));
        let u = g.constant(Array2::zeros((3, 2)));
        let l = g.constant(Array2::zeros((3, 2)));
        let out = enc.fuse(&mut g, &b, f, Some(u), Some(l)).unwrap();
        assert_eq!(g.value(out.all), &Array2::<f64>::zeros((1, 3)));
    }

    #[test]
    fn part_order_matters_in_local_fusion() {
        let (enc, store, _) = small();
        let mut g = Graph::new();
        let b = g.bind(&store);
        let f = g.constant(Array2::from_elem((6, 2), 0.3));
        let u = g.constant(array![[1.0, 0.0], [0.0, 0.5], [0.2, 0.1]]);
        let l = g.constant(array![[-1.0, 0.4], [0.3, 0.0], [0.0, 0.9]]);
        let a = enc.fuse(&mut g, &b, f, Some(u), Some(l)).unwrap();
        let s = enc.fuse(&mut g, &b, f, Some(l), Some(u)).unwrap();
        assert_ne!(g.value(a.local.unwrap()), g.value(s.local.unwrap()));
    }

    #[test]
    fn fusion_gradients_match_finite_differences() {
        let (enc, store, input) = small();
        let r = grad_check(
            &store,
            |g, b| {
                let f = enc.forward(g, b, &input)?;
                Ok::<_, Error>(g.sum(f.all))
            },
            1e-6,
            1e-6,
        )
        .unwrap();
        assert!(r.passed, "{r:?}");
        assert_eq!(r.checked, store.scalar_count());
    }

    #[test]
    fn zero_adjacency_makes_output_input_independent() {
        let (enc, mut store, input) = small();
        let names: Vec<String> = store.names().filter(|n| n.ends_with(".A")).map(String::from).collect();
        for n in names {
            store.get_mut(&n).unwrap().fill(0.0);
        }
        let eval = |inp: &EncoderInput| {
            let mut g = Graph::new();
            let b = g.bind(&store);
            let f = enc.forward(&mut g, &b, inp).unwrap();
            g.value(f.all).clone()
        };
        let mut other = input.clone();
        other.full.mapv_inplace(|v| v * 3.0 + 1.0);
        other.upper.mapv_inplace(|v| -v);
        other.lower.fill(7.0);
        assert_eq!(eval(&input), eval(&other));
    }

    #[test]
    fn forward_is_deterministic() {
        let (enc, store, input) = small();
        let run = || {
            let mut g = Graph::new();
            let b = g.bind(&store);
            let f = enc.forward(&mut g, &b, &input).unwrap();
            g.value(f.all).clone()
        };
        let (x, y) = (run(), run());
        assert!(x.iter().zip(y.iter()).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn full_only_layout_has_no_local_branch() {
        let partition = BodyPartition {
            upper: vec![0],
            lower: vec![1],
        };
        let cfg = EncoderConfig {
            streams: Streams {
                upper: false,
                lower: false,
            },
            ..EncoderConfig::default()
        };
        let enc = Encoder::new(cfg, &partition, 3).unwrap();
        let names: Vec<String> = enc.param_shapes().into_iter().map(|(n, _)| n).collect();
        assert!(names.iter().all(|n| !n.contains("gcn_upper") && !n.contains("fuse_loc")));
        let all = enc.param_shapes().into_iter().find(|(n, _)| n == "encoder.fuse_all.W").unwrap();
        assert_eq!(all.1, (128, 128));
    }

    #[test]
    fn short_clip_rejected() {
        let data = ndarray::Array3::zeros((4, 2, 3));
        let clip = MotionClip::new("s", "x", data).unwrap();
        let p = BodyPartition {
            upper: vec![0],
            lower: vec![1],
        };
        assert!(matches!(
            EncoderInput::from_clip(&clip, &p, 5),
            Err(Error::TooShort { frames: 4, coeffs: 5, .. })
        ));
    }
}
