//! Small multilayer networks used as certificates and controllers.
//!
//! A network supports a point forward pass, exact reverse-mode gradients
//! (for training), a forward-over-reverse pass for directional-derivative
//! objectives, and sound interval propagation for the verifier.

use crate::expr::{Hyperbox, Interval, IntervalError};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error("forward pass produced a non-finite value")]
    NonFiniteResult,
    #[error("relu activation is not supported by this operation")]
    ReluNotSupported,
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("weight file malformed: {0}")]
    Parse(String),
    #[error(transparent)]
    Interval(#[from] IntervalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
    Square,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
            Activation::Square => "square",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            "square" => Some(Activation::Square),
            _ => None,
        }
    }

    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::Square => z * z,
        }
    }

    /// First derivative; relu'(0) is defined as 0.
    fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Square => 2.0 * z,
        }
    }

    /// Second derivative; undefined for relu (callers reject it first).
    fn second_derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                -2.0 * t * (1.0 - t * t)
            }
            Activation::Relu => 0.0,
            Activation::Square => 2.0,
        }
    }

    fn apply_interval(self, v: &Interval) -> Result<Interval, IntervalError> {
        match self {
            Activation::Tanh => v.tanh(),
            // Exact on each monotone piece.
            Activation::Relu => Ok(Interval {
                lo: v.lo.max(0.0),
                hi: v.hi.max(0.0),
            }),
            Activation::Square => v.pow_int(2),
        }
    }

    /// Enclosure of the derivative over `v`.
    fn derivative_interval(self, v: &Interval) -> Result<Interval, IntervalError> {
        match self {
            Activation::Tanh => {
                // 1 - tanh(v)^2; tanh is monotone, squaring handles the sign
                // crossing, so the extremum at v = 0 is captured exactly.
                let t = v.tanh()?;
                Interval::point(1.0)?.sub(&t.pow_int(2)?)
            }
            Activation::Relu => Err(IntervalError::NonFiniteBound(f64::NAN, f64::NAN)),
            Activation::Square => v.scale(2.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum OutputTransform {
    Identity,
    /// Maps each output through `center + halfwidth * tanh(.)`, so outputs
    /// lie strictly inside the target box.
    BoxClamp(Hyperbox),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetworkShape {
    pub input_dim: usize,
    pub hidden: Vec<(usize, Activation)>,
    pub output_dim: usize,
    pub transform: OutputTransform,
}

impl NetworkShape {
    pub fn new(input_dim: usize, hidden: Vec<(usize, Activation)>, output_dim: usize) -> Self {
        Self {
            input_dim,
            hidden,
            output_dim,
            transform: OutputTransform::Identity,
        }
    }

    pub fn with_box_clamp(mut self, target: Hyperbox) -> Self {
        self.transform = OutputTransform::BoxClamp(target);
        self
    }

    pub fn uses_relu(&self) -> bool {
        self.hidden.iter().any(|(_, a)| *a == Activation::Relu)
    }

    fn validate_common(&self) -> Result<(), String> {
        if self.input_dim == 0 {
            return Err("input dimension must be positive".into());
        }
        if self.output_dim == 0 {
            return Err("output dimension must be positive".into());
        }
        if self.hidden.iter().any(|(w, _)| *w == 0) {
            return Err("hidden layer widths must be positive".into());
        }
        Ok(())
    }

    pub fn validate_certificate(&self, n_state: usize) -> Result<(), String> {
        self.validate_common()?;
        if self.input_dim != n_state {
            return Err(format!(
                "certificate input dimension {} does not match state dimension {}",
                self.input_dim, n_state
            ));
        }
        if self.output_dim != 1 {
            return Err("certificate networks are scalar-valued".into());
        }
        if self.transform != OutputTransform::Identity {
            return Err("certificate networks use the identity output transform".into());
        }
        Ok(())
    }

    pub fn validate_controller(
        &self,
        n_state: usize,
        n_input: usize,
        input_box: &Hyperbox,
    ) -> Result<(), String> {
        self.validate_common()?;
        if self.input_dim != n_state {
            return Err(format!(
                "controller input dimension {} does not match state dimension {}",
                self.input_dim, n_state
            ));
        }
        if self.output_dim != n_input {
            return Err(format!(
                "controller output dimension {} does not match input dimension {}",
                self.output_dim, n_input
            ));
        }
        match &self.transform {
            OutputTransform::BoxClamp(b) if b == input_box => Ok(()),
            OutputTransform::BoxClamp(_) => {
                Err("controller clamp box does not match the system input box".into())
            }
            OutputTransform::Identity => {
                Err("controller networks must clamp outputs into the input box".into())
            }
        }
    }
}

/// One affine layer; `activation` is `None` for the output layer.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// Row-major: `weights[row][col]`, rows = layer output width.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub activation: Option<Activation>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub shape: NetworkShape,
    pub layers: Vec<Layer>,
}

/// Gradients with the same shape as the network parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(net: &Network) -> Self {
        Self {
            layers: net
                .layers
                .iter()
                .map(|l| {
                    (
                        l.weights.iter().map(|r| vec![0.0; r.len()]).collect(),
                        vec![0.0; l.bias.len()],
                    )
                })
                .collect(),
        }
    }

    pub fn add_scaled(&mut self, other: &ParamGrads, s: f64) {
        for ((w, b), (ow, ob)) in self.layers.iter_mut().zip(&other.layers) {
            for (row, orow) in w.iter_mut().zip(ow) {
                for (v, ov) in row.iter_mut().zip(orow) {
                    *v += s * ov;
                }
            }
            for (v, ov) in b.iter_mut().zip(ob) {
                *v += s * ov;
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for (w, b) in &mut self.layers {
            for row in w {
                for v in row {
                    *v *= s;
                }
            }
            for v in b {
                *v *= s;
            }
        }
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|(w, b)| {
            w.iter().all(|r| r.iter().all(|v| v.is_finite())) && b.iter().all(|v| v.is_finite())
        })
    }

    pub fn max_abs(&self) -> f64 {
        let mut m = 0.0f64;
        for (w, b) in &self.layers {
            for row in w {
                for v in row {
                    m = m.max(v.abs());
                }
            }
            for v in b {
                m = m.max(v.abs());
            }
        }
        m
    }
}

/// Forward-pass intermediates for reverse mode.
struct Trace {
    /// Layer inputs: `post[0]` is the network input, `post[l]` the output of
    /// layer `l-1` after its activation.
    post: Vec<Vec<f64>>,
    /// Pre-activation values per layer.
    pre: Vec<Vec<f64>>,
}

/// Intermediates of the forward-over-tangent pass.
pub struct JvpTrace {
    post: Vec<Vec<f64>>,
    pre: Vec<Vec<f64>>,
    post_dot: Vec<Vec<f64>>,
    pre_dot: Vec<Vec<f64>>,
}

fn affine(layer: &Layer, z: &[f64]) -> Vec<f64> {
    layer
        .weights
        .iter()
        .zip(&layer.bias)
        .map(|(row, b)| row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>() + b)
        .collect()
}

fn matvec(layer: &Layer, z: &[f64]) -> Vec<f64> {
    layer
        .weights
        .iter()
        .map(|row| row.iter().zip(z).map(|(w, v)| w * v).sum::<f64>())
        .collect()
}

fn matvec_transpose(layer: &Layer, g: &[f64]) -> Vec<f64> {
    let cols = layer.weights.first().map_or(0, |r| r.len());
    let mut out = vec![0.0; cols];
    for (row, gi) in layer.weights.iter().zip(g) {
        for (w, o) in row.iter().zip(out.iter_mut()) {
            *o += w * gi;
        }
    }
    out
}

impl Network {
    /// Glorot-uniform weights, zero biases, deterministic per seed.
    pub fn init(shape: &NetworkShape, seed: u64) -> Network {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut widths = vec![shape.input_dim];
        widths.extend(shape.hidden.iter().map(|(w, _)| *w));
        widths.push(shape.output_dim);
        let mut layers = Vec::with_capacity(widths.len() - 1);
        for l in 0..widths.len() - 1 {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let weights = (0..fan_out)
                .map(|_| (0..fan_in).map(|_| rng.gen_range(-s..=s)).collect())
                .collect();
            let activation = shape.hidden.get(l).map(|(_, a)| *a);
            layers.push(Layer {
                weights,
                bias: vec![0.0; fan_out],
                activation,
            });
        }
        Network {
            shape: shape.clone(),
            layers,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.shape.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.shape.output_dim
    }

    fn apply_transform(&self, z: Vec<f64>) -> Vec<f64> {
        match &self.shape.transform {
            OutputTransform::Identity => z,
            OutputTransform::BoxClamp(target) => z
                .iter()
                .zip(target.intervals())
                .map(|(&v, iv)| iv.midpoint() + 0.5 * iv.width() * v.tanh())
                .collect(),
        }
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        if x.len() != self.shape.input_dim {
            return Err(NetError::DimensionMismatch(format!(
                "input has length {}, expected {}",
                x.len(),
                self.shape.input_dim
            )));
        }
        let mut z = x.to_vec();
        for layer in &self.layers {
            z = affine(layer, &z);
            if let Some(act) = layer.activation {
                for v in &mut z {
                    *v = act.apply(*v);
                }
            }
        }
        let out = self.apply_transform(z);
        if out.iter().all(|v| v.is_finite()) {
            Ok(out)
        } else {
            Err(NetError::NonFiniteResult)
        }
    }

    /// Scalar convenience for certificate networks.
    pub fn forward_scalar(&self, x: &[f64]) -> Result<f64, NetError> {
        Ok(self.forward(x)?[0])
    }

    fn forward_trace(&self, x: &[f64]) -> Trace {
        let mut post = vec![x.to_vec()];
        let mut pre = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let a = affine(layer, post.last().unwrap());
            let z = match layer.activation {
                Some(act) => a.iter().map(|&v| act.apply(v)).collect(),
                None => a.clone(),
            };
            pre.push(a);
            post.push(z);
        }
        post.pop();
        Trace { post, pre }
    }

    /// Exact reverse-mode derivatives of `upstream . forward(x)` with
    /// respect to the input and all parameters.
    pub fn backward(&self, x: &[f64], upstream: &[f64]) -> Result<(Vec<f64>, ParamGrads), NetError> {
        if upstream.len() != self.shape.output_dim {
            return Err(NetError::DimensionMismatch(
                "upstream length does not match output dimension".into(),
            ));
        }
        let trace = self.forward_trace(x);
        let mut grads = ParamGrads::zeros_like(self);
        let last = self.layers.len() - 1;
        // Adjoint of the final pre-transform value.
        let mut g: Vec<f64> = match &self.shape.transform {
            OutputTransform::Identity => upstream.to_vec(),
            OutputTransform::BoxClamp(target) => upstream
                .iter()
                .zip(&trace.pre[last])
                .zip(target.intervals())
                .map(|((&u, &z), iv)| {
                    let t = z.tanh();
                    u * 0.5 * iv.width() * (1.0 - t * t)
                })
                .collect(),
        };
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            // Through the activation (the output layer has none).
            if let Some(act) = layer.activation {
                for (gi, &z) in g.iter_mut().zip(&trace.pre[l]) {
                    *gi *= act.derivative(z);
                }
            }
            let (dw, db) = &mut grads.layers[l];
            for ((row, &gi), b) in dw.iter_mut().zip(&g).zip(db.iter_mut()) {
                for (v, &zin) in row.iter_mut().zip(&trace.post[l]) {
                    *v += gi * zin;
                }
                *b += gi;
            }
            g = matvec_transpose(layer, &g);
        }
        if g.iter().all(|v| v.is_finite()) && grads.is_finite() {
            Ok((g, grads))
        } else {
            Err(NetError::NonFiniteResult)
        }
    }

    /// Input gradient of a scalar network.
    pub fn input_gradient(&self, x: &[f64]) -> Result<Vec<f64>, NetError> {
        if self.shape.output_dim != 1 {
            return Err(NetError::DimensionMismatch(
                "input_gradient requires a scalar network".into(),
            ));
        }
        Ok(self.backward(x, &[1.0])?.0)
    }

    /// Forward pass carrying the tangent `dir`: returns the output, the
    /// directional derivative `J . dir`, and the trace needed by
    /// [`Network::jvp_backward`]. Identity transform, no relu.
    pub fn forward_jvp(&self, x: &[f64], dir: &[f64]) -> Result<(Vec<f64>, Vec<f64>, JvpTrace), NetError> {
        if self.shape.uses_relu() {
            return Err(NetError::ReluNotSupported);
        }
        if self.shape.transform != OutputTransform::Identity {
            return Err(NetError::DimensionMismatch(
                "forward_jvp supports the identity output transform only".into(),
            ));
        }
        let mut post = vec![x.to_vec()];
        let mut post_dot = vec![dir.to_vec()];
        let mut pre = Vec::new();
        let mut pre_dot = Vec::new();
        for layer in &self.layers {
            let a = affine(layer, post.last().unwrap());
            let a_dot = matvec(layer, post_dot.last().unwrap());
            let (z, z_dot) = match layer.activation {
                Some(act) => (
                    a.iter().map(|&v| act.apply(v)).collect::<Vec<_>>(),
                    a.iter()
                        .zip(&a_dot)
                        .map(|(&v, &vd)| act.derivative(v) * vd)
                        .collect(),
                ),
                None => (a.clone(), a_dot.clone()),
            };
            pre.push(a);
            pre_dot.push(a_dot);
            post.push(z);
            post_dot.push(z_dot);
        }
        let y = post.pop().unwrap();
        let y_dot = post_dot.pop().unwrap();
        if !y.iter().chain(&y_dot).all(|v| v.is_finite()) {
            return Err(NetError::NonFiniteResult);
        }
        Ok((
            y,
            y_dot,
            JvpTrace {
                post,
                pre,
                post_dot,
                pre_dot,
            },
        ))
    }

    /// Reverse pass through [`Network::forward_jvp`]: parameter gradients of
    /// `upstream . y_dot`, plus the gradient with respect to the tangent
    /// direction (which equals the input gradient of `upstream . forward`).
    pub fn jvp_backward(
        &self,
        trace: &JvpTrace,
        upstream: &[f64],
    ) -> Result<(ParamGrads, Vec<f64>), NetError> {
        let mut grads = ParamGrads::zeros_like(self);
        // Adjoints of (pre-activation value, pre-activation tangent).
        let mut g: Vec<f64> = vec![0.0; self.shape.output_dim];
        let mut g_dot: Vec<f64> = upstream.to_vec();
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            if let Some(act) = layer.activation {
                // z = act(a), z_dot = act'(a) * a_dot.
                let mut ga = vec![0.0; g.len()];
                let mut ga_dot = vec![0.0; g.len()];
                for i in 0..g.len() {
                    let a = trace.pre[l][i];
                    let a_dot = trace.pre_dot[l][i];
                    ga[i] = act.derivative(a) * g[i] + act.second_derivative(a) * a_dot * g_dot[i];
                    ga_dot[i] = act.derivative(a) * g_dot[i];
                }
                g = ga;
                g_dot = ga_dot;
            }
            let (dw, db) = &mut grads.layers[l];
            for i in 0..g.len() {
                for (v, (&zin, &zin_dot)) in dw[i]
                    .iter_mut()
                    .zip(trace.post[l].iter().zip(&trace.post_dot[l]))
                {
                    *v += g[i] * zin + g_dot[i] * zin_dot;
                }
                db[i] += g[i];
            }
            let gz = matvec_transpose(layer, &g);
            let gz_dot = matvec_transpose(layer, &g_dot);
            g = gz;
            g_dot = gz_dot;
        }
        if grads.is_finite() && g_dot.iter().all(|v| v.is_finite()) {
            Ok((grads, g_dot))
        } else {
            Err(NetError::NonFiniteResult)
        }
    }

    /// Sound interval enclosure of the forward pass over a box.
    pub fn interval_forward(&self, b: &Hyperbox) -> Result<Vec<Interval>, IntervalError> {
        let mut z: Vec<Interval> = b.intervals().to_vec();
        for layer in &self.layers {
            let mut a = Vec::with_capacity(layer.weights.len());
            for (row, &bias) in layer.weights.iter().zip(&layer.bias) {
                let mut acc = Interval::point(bias)?;
                for (&w, zi) in row.iter().zip(&z) {
                    acc = acc.add(&zi.scale(w)?)?;
                }
                a.push(acc);
            }
            if let Some(act) = layer.activation {
                for v in &mut a {
                    *v = act.apply_interval(v)?;
                }
            }
            z = a;
        }
        match &self.shape.transform {
            OutputTransform::Identity => Ok(z),
            OutputTransform::BoxClamp(target) => z
                .iter()
                .zip(target.intervals())
                .map(|(v, iv)| {
                    let t = v.tanh()?;
                    Interval::point(iv.midpoint())?.add(&t.scale(0.5 * iv.width())?)
                })
                .collect(),
        }
    }

    /// Sound enclosure of the input gradient of a scalar network over a box,
    /// via a forward-mode interval chain rule.
    pub fn interval_input_gradient(&self, b: &Hyperbox) -> Result<Vec<Interval>, NetError> {
        if self.shape.uses_relu() {
            return Err(NetError::ReluNotSupported);
        }
        if self.shape.output_dim != 1 || self.shape.transform != OutputTransform::Identity {
            return Err(NetError::DimensionMismatch(
                "interval_input_gradient requires a scalar identity-output network".into(),
            ));
        }
        let n = self.shape.input_dim;
        let mut val: Vec<Interval> = b.intervals().to_vec();
        // grad[j][k]: derivative of unit j with respect to input k.
        let mut grad: Vec<Vec<Interval>> = (0..n)
            .map(|j| {
                (0..n)
                    .map(|k| Interval {
                        lo: if j == k { 1.0 } else { 0.0 },
                        hi: if j == k { 1.0 } else { 0.0 },
                    })
                    .collect()
            })
            .collect();
        for layer in &self.layers {
            let rows = layer.weights.len();
            let mut a = Vec::with_capacity(rows);
            let mut ag = Vec::with_capacity(rows);
            for (row, &bias) in layer.weights.iter().zip(&layer.bias) {
                let mut acc = Interval::point(bias)?;
                let mut gacc = vec![Interval { lo: 0.0, hi: 0.0 }; n];
                for (j, &w) in row.iter().enumerate() {
                    acc = acc.add(&val[j].scale(w)?)?;
                    for k in 0..n {
                        gacc[k] = gacc[k].add(&grad[j][k].scale(w)?)?;
                    }
                }
                a.push(acc);
                ag.push(gacc);
            }
            if let Some(act) = layer.activation {
                for (v, gs) in a.iter_mut().zip(ag.iter_mut()) {
                    let d = act.derivative_interval(v)?;
                    for g in gs.iter_mut() {
                        *g = g.mul(&d)?;
                    }
                    *v = act.apply_interval(v)?;
                }
            }
            val = a;
            grad = ag;
        }
        Ok(grad.remove(0))
    }

    /// Textual weight format, round-trip exact.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str("certkit-network v1\n");
        s.push_str(&format!("inputs {}\n", self.shape.input_dim));
        s.push_str(&format!("outputs {}\n", self.shape.output_dim));
        match &self.shape.transform {
            OutputTransform::Identity => s.push_str("transform identity\n"),
            OutputTransform::BoxClamp(b) => {
                s.push_str("transform box_clamp");
                for iv in b.intervals() {
                    s.push_str(&format!(" {:.16e} {:.16e}", iv.lo, iv.hi));
                }
                s.push('\n');
            }
        }
        s.push_str(&format!("layers {}\n", self.layers.len()));
        for (i, layer) in self.layers.iter().enumerate() {
            let act = layer.activation.map_or("none", |a| a.name());
            s.push_str(&format!(
                "layer {} rows {} cols {} activation {}\n",
                i,
                layer.weights.len(),
                layer.weights.first().map_or(0, |r| r.len()),
                act
            ));
            s.push_str("bias");
            for v in &layer.bias {
                s.push_str(&format!(" {v:.16e}"));
            }
            s.push('\n');
            for row in &layer.weights {
                s.push_str("row");
                for v in row {
                    s.push_str(&format!(" {v:.16e}"));
                }
                s.push('\n');
            }
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Network, NetError> {
        let bad = |m: &str| NetError::Parse(m.to_string());
        let mut lines = text.lines();
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| NetError::Parse(format!("missing {what}")))
        };
        if next("header")? != "certkit-network v1" {
            return Err(bad("unrecognized header"));
        }
        let parse_kv = |line: &str, key: &str| -> Result<usize, NetError> {
            let rest = line
                .strip_prefix(key)
                .ok_or_else(|| NetError::Parse(format!("expected `{key}` line")))?;
            rest.trim()
                .parse()
                .map_err(|_| NetError::Parse(format!("malformed `{key}` line")))
        };
        let input_dim = parse_kv(next("inputs")?, "inputs")?;
        let output_dim = parse_kv(next("outputs")?, "outputs")?;
        let tline = next("transform")?;
        let transform = if tline == "transform identity" {
            OutputTransform::Identity
        } else if let Some(rest) = tline.strip_prefix("transform box_clamp") {
            let vals: Vec<f64> = rest
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("malformed clamp bound")))
                .collect::<Result<_, _>>()?;
            if vals.len() != 2 * output_dim {
                return Err(bad("clamp bound count does not match outputs"));
            }
            let bounds: Vec<(f64, f64)> = vals.chunks(2).map(|c| (c[0], c[1])).collect();
            OutputTransform::BoxClamp(Hyperbox::from_bounds(&bounds)?)
        } else {
            return Err(bad("unrecognized transform"));
        };
        let n_layers = parse_kv(next("layers")?, "layers")?;
        let mut layers = Vec::with_capacity(n_layers);
        let mut hidden = Vec::new();
        for i in 0..n_layers {
            let header = next("layer header")?;
            let toks: Vec<&str> = header.split_whitespace().collect();
            if toks.len() != 8 || toks[0] != "layer" || toks[2] != "rows" || toks[4] != "cols" {
                return Err(bad("malformed layer header"));
            }
            let rows: usize = toks[3].parse().map_err(|_| bad("malformed row count"))?;
            let cols: usize = toks[5].parse().map_err(|_| bad("malformed col count"))?;
            let activation = match toks[7] {
                "none" => None,
                name => Some(
                    Activation::from_name(name)
                        .ok_or_else(|| NetError::Parse(format!("unknown activation `{name}`")))?,
                ),
            };
            if i + 1 < n_layers {
                match activation {
                    Some(a) => hidden.push((rows, a)),
                    None => return Err(bad("hidden layer missing activation")),
                }
            } else if activation.is_some() {
                return Err(bad("output layer must not carry an activation"));
            }
            let parse_row = |line: &str, tag: &str, len: usize| -> Result<Vec<f64>, NetError> {
                let rest = line
                    .strip_prefix(tag)
                    .ok_or_else(|| NetError::Parse(format!("expected `{tag}` line")))?;
                let vals: Vec<f64> = rest
                    .split_whitespace()
                    .map(|t| t.parse().map_err(|_| NetError::Parse("malformed value".into())))
                    .collect::<Result<_, _>>()?;
                if vals.len() != len {
                    return Err(NetError::Parse(format!("expected {len} values")));
                }
                if !vals.iter().all(|v| v.is_finite()) {
                    return Err(NetError::Parse("non-finite parameter".into()));
                }
                Ok(vals)
            };
            let bias = parse_row(next("bias")?, "bias", rows)?;
            let mut weights = Vec::with_capacity(rows);
            for _ in 0..rows {
                weights.push(parse_row(next("row")?, "row", cols)?);
            }
            layers.push(Layer {
                weights,
                bias,
                activation,
            });
        }
        // Validate the dimension chain.
        let mut prev = input_dim;
        for layer in &layers {
            if layer.weights.iter().any(|r| r.len() != prev) {
                return Err(bad("layer dimensions do not chain"));
            }
            prev = layer.weights.len();
        }
        if prev != output_dim {
            return Err(bad("final layer width does not match outputs"));
        }
        Ok(Network {
            shape: NetworkShape {
                input_dim,
                hidden,
                output_dim,
                transform,
            },
            layers,
        })
    }
}
