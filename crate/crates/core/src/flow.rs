//! Invertible density model over fused features.
//!
//! The flow alternates affine layers `y = Q·R·x + b` with monotone PReLUs.
//! `Q` is a product of Householder reflections and `R` is upper triangular
//! with diagonal `exp(r_diag_log)`, so every affine layer is invertible and
//! contributes exactly `Σ r_diag_log` to `log|det J|`. A PReLU with slope
//! `a = exp(slope_log)` contributes `slope_log` per negative input.
//!
//! ```
//! use haad::autodiff::Graph;
//! use haad::flow::{nll, FlowNetwork};
//! use ndarray::array;
//!
//! let (net, store) = FlowNetwork::identity(2, 10);
//! let mut g = Graph::new();
//! let b = g.bind(&store);
//! let x = g.constant(array![[0.0], [0.0]]);
//! let out = net.forward(&mut g, &b, x).unwrap();
//! let loss = nll(&mut g, &out);
//! assert!((g.scalar(loss) - (2.0 * std::f64::consts::PI).ln()).abs() < 1e-12);
//! ```

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Binding, Graph, NodeId, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FlowConfig {
    /// Number of affine layers; one PReLU sits between each consecutive pair.
    pub layers: usize,
    /// Initial negative-side PReLU slope. At 1 every activation starts as the
    /// identity; smaller values let bias drift fold the training cluster onto
    /// the contracted side before the slopes can adapt.
    pub slope_init: f64,
}

impl Default for FlowConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            slope_init: 1.0,
        }
    }
}

/// Layout of the flow: feature width, depth and reflections per layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowNetwork {
    pub dim: usize,
    pub layers: usize,
    pub reflections: usize,
}

/// Per-graph handles for one affine layer.
#[derive(Debug, Clone, Copy)]
struct PreparedAffine {
    vs: NodeId,
    r: NodeId,
    bias: NodeId,
    logdet: NodeId,
}

/// Graph nodes shared by every sample that passes through the flow.
#[derive(Debug, Clone)]
pub struct PreparedFlow {
    affines: Vec<PreparedAffine>,
    /// `(slope_log, exp(slope_log))` per activation.
    slopes: Vec<(NodeId, NodeId)>,
    layer_logdet: NodeId,
}

/// Latent, log-determinant and penultimate feature for one sample.
#[derive(Debug, Clone, Copy)]
pub struct FlowOutput {
    /// `dim x 1`.
    pub u: NodeId,
    /// `1 x 1`.
    pub logdet: NodeId,
    /// `dim x 1`, taken after the last activation.
    pub v: NodeId,
}

impl PreparedFlow {
    /// `log|det|` of affine layer `i` (zero-based).
    pub fn affine_logdet(&self, i: usize) -> NodeId {
        self.affines[i].logdet
    }

    /// Sum over all affine layers.
    pub fn total_affine_logdet(&self) -> NodeId {
        self.layer_logdet
    }
}

fn affine_name(i: usize, field: &str) -> String {
    format!("flow.affine{:02}.{field}", i + 1)
}

fn prelu_name(i: usize) -> String {
    format!("flow.prelu{:02}.slope_log", i + 1)
}

fn strict_upper(d: usize) -> Array2<f64> {
    Array2::from_shape_fn((d, d), |(i, j)| if j > i { 1.0 } else { 0.0 })
}

impl FlowNetwork {
    pub fn new(dim: usize, config: &FlowConfig) -> Result<Self> {
        if config.layers < 2 {
            return Err(Error::Config("flow.layers must be >= 2".into()));
        }
        if dim == 0 {
            return Err(Error::Config("flow dimension must be >= 1".into()));
        }
        if !(config.slope_init > 0.0 && config.slope_init.is_finite()) {
            return Err(Error::Config("flow.slope_init must be positive".into()));
        }
        Ok(Self {
            dim,
            layers: config.layers,
            reflections: dim,
        })
    }

    /// A network that maps every input to itself, with its parameters.
    /// Reflections come in identical pairs so each `Q` is exactly `I`.
    pub fn identity(dim: usize, layers: usize) -> (Self, ParamStore) {
        let net = Self {
            dim,
            layers,
            reflections: dim + dim % 2,
        };
        let mut store = ParamStore::new();
        for (name, (r, c)) in net.param_shapes() {
            let value = if name.ends_with("householder") {
                Array2::from_shape_fn((r, c), |(_, j)| if j == 0 { 1.0 } else { 0.0 })
            } else {
                Array2::zeros((r, c))
            };
            store.insert(name, value).expect("unique names");
        }
        (net, store)
    }

    pub fn activations(&self) -> usize {
        self.layers - 1
    }

    pub fn param_shapes(&self) -> Vec<(String, (usize, usize))> {
        let d = self.dim;
        let mut out = Vec::new();
        for i in 0..self.layers {
            out.push((affine_name(i, "bias"), (d, 1)));
            out.push((affine_name(i, "householder"), (self.reflections, d)));
            out.push((affine_name(i, "r_diag_log"), (d, 1)));
            out.push((affine_name(i, "r_upper"), (d, d)));
        }
        for i in 0..self.activations() {
            out.push((prelu_name(i), (1, 1)));
        }
        out.sort();
        out
    }

    /// Random unit reflection vectors, `R = I`, zero bias, slopes at `slope_init`.
    pub fn init_params(&self, store: &mut ParamStore, rng: &mut impl Rng, slope_init: f64) -> Result<()> {
        for (name, (r, c)) in self.param_shapes() {
            let value = if name.ends_with("householder") {
                let mut m: Array2<f64> = Array2::from_shape_fn((r, c), |_| StandardNormal.sample(rng));
                for mut row in m.rows_mut() {
                    let n = row.dot(&row).sqrt();
                    row /= n;
                }
                m
            } else if name.ends_with("slope_log") {
                Array2::from_elem((1, 1), slope_init.ln())
            } else {
                Array2::zeros((r, c))
            };
            store.insert(name, value)?;
        }
        Ok(())
    }

    /// Builds the per-graph pieces: each `R`, each layer's log-determinant and
    /// each activation slope.
    pub fn prepare(&self, g: &mut Graph, b: &Binding) -> Result<PreparedFlow> {
        let mask = g.constant(strict_upper(self.dim));
        let mut affines = Vec::with_capacity(self.layers);
        let mut total: Option<NodeId> = None;
        for i in 0..self.layers {
            let diag_log = b.get(&affine_name(i, "r_diag_log"))?;
            let upper = b.get(&affine_name(i, "r_upper"))?;
            let diag = g.exp(diag_log);
            let diag = g.diag_embed(diag)?;
            let upper = g.mul(upper, mask)?;
            let r = g.add(diag, upper)?;
            let logdet = g.sum(diag_log);
            total = Some(match total {
                Some(t) => g.add(t, logdet)?,
                None => logdet,
            });
            affines.push(PreparedAffine {
                vs: b.get(&affine_name(i, "householder"))?,
                r,
                bias: b.get(&affine_name(i, "bias"))?,
                logdet,
            });
        }
        let slopes = (0..self.activations())
            .map(|i| {
                let s = b.get(&prelu_name(i))?;
                Ok((s, g.exp(s)))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PreparedFlow {
            affines,
            slopes,
            layer_logdet: total.expect("at least one layer"),
        })
    }

    /// Pushes one feature vector (`dim x 1` or `1 x dim`) through the flow.
    pub fn forward_prepared(&self, g: &mut Graph, p: &PreparedFlow, x: NodeId) -> Result<FlowOutput> {
        let mut x = match g.value(x).dim() {
            (r, 1) if r == self.dim => x,
            (1, c) if c == self.dim => g.transpose(x),
            other => {
                return Err(Error::Config(format!(
                    "flow input has shape {other:?}, expected {} x 1",
                    self.dim
                )))
            }
        };
        let mut logdet = p.layer_logdet;
        let mut v = x;
        for (i, layer) in p.affines.iter().enumerate() {
            let rx = g.matmul(layer.r, x)?;
            let qrx = g.householder(layer.vs, rx)?;
            x = g.add(qrx, layer.bias)?;
            check_finite(g, x, || format!("flow affine layer {}", i + 1))?;
            if let Some(&(slope_log, slope)) = p.slopes.get(i) {
                let negatives = g.value(x).iter().filter(|&&t| t < 0.0).count();
                x = g.prelu(x, slope)?;
                check_finite(g, x, || format!("flow activation {}", i + 1))?;
                if negatives > 0 {
                    let term = g.scale(slope_log, negatives as f64);
                    logdet = g.add(logdet, term)?;
                }
                v = x;
            }
        }
        Ok(FlowOutput { u: x, logdet, v })
    }

    pub fn forward(&self, g: &mut Graph, b: &Binding, x: NodeId) -> Result<FlowOutput> {
        let p = self.prepare(g, b)?;
        self.forward_prepared(g, &p, x)
    }

    /// Exact inverse `f⁻¹(u)` from stored parameter values.
    pub fn inverse(&self, store: &ParamStore, u: &Array1<f64>) -> Result<Array1<f64>> {
        if u.len() != self.dim {
            return Err(Error::Config(format!(
                "latent has length {}, expected {}",
                u.len(),
                self.dim
            )));
        }
        let mut y = u.clone();
        for i in (0..self.layers).rev() {
            if i < self.activations() {
                let a = store.get(&prelu_name(i))?[[0, 0]].exp();
                y.mapv_inplace(|t| if t >= 0.0 { t } else { t / a });
            }
            y -= &store.get(&affine_name(i, "bias"))?.column(0);
            // Qᵀ = H_k ... H_1, so reflection 1 is undone first.
            let vs = store.get(&affine_name(i, "householder"))?;
            for v in vs.rows() {
                let coef = 2.0 * v.dot(&y) / v.dot(&v);
                y.scaled_add(-coef, &v);
            }
            let diag = store.get(&affine_name(i, "r_diag_log"))?;
            let upper = store.get(&affine_name(i, "r_upper"))?;
            let mut x = Array1::zeros(self.dim);
            for r in (0..self.dim).rev() {
                let mut acc = y[r];
                for c in r + 1..self.dim {
                    acc -= upper[[r, c]] * x[c];
                }
                x[r] = acc / diag[[r, 0]].exp();
            }
            y = x;
        }
        Ok(y)
    }
}

fn check_finite(g: &Graph, id: NodeId, what: impl FnOnce() -> String) -> Result<()> {
    if g.value(id).iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what()))
    }
}

/// `(d/2)·ln(2π) + ½‖u‖² − logdet`.
pub fn nll(g: &mut Graph, out: &FlowOutput) -> NodeId {
    let d = g.value(out.u).len() as f64;
    let sq = g.mul(out.u, out.u).expect("same node");
    let half = g.sum(sq);
    let half = g.scale(half, 0.5);
    let with_const = g.add_scalar(half, 0.5 * d * (2.0 * std::f64::consts::PI).ln());
    g.sub(with_const, out.logdet).expect("both 1x1")
}
