use rand::Rng;

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Mish,
    Relu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Mish => x * tanh_softplus(x.exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Mish => {
                let w = x.exp();
                let t = tanh_softplus(w);
                let sigmoid = if w.is_finite() { w / (1.0 + w) } else { 1.0 };
                t + x * (1.0 - t * t) * sigmoid
            }
        }
    }
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Activation::Mish => "mish",
            Activation::Relu => "relu",
        })
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mish" => Ok(Activation::Mish),
            "relu" => Ok(Activation::Relu),
            other => Err(Error::param(format!("unknown activation `{other}`"))),
        }
    }
}

/// `tanh(ln(1 + w))` for `w = e^x`, i.e. `(w^2 + 2w) / (w^2 + 2w + 2)`.
fn tanh_softplus(w: f64) -> f64 {
    if w > 1e15 {
        return 1.0;
    }
    let n = w * (w + 2.0);
    n / (n + 2.0)
}

pub fn mish(x: f64) -> f64 {
    Activation::Mish.apply(x)
}

/// Layer sizes and activation of a fully connected network. The output layer
/// is affine.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub output_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(input_dim: usize, output_dim: usize, hidden: Vec<usize>, activation: Activation) -> Result<Self> {
        let spec = Self { input_dim, output_dim, hidden, activation };
        spec.validate()?;
        Ok(spec)
    }

    /// Three hidden Mish layers of width 64.
    pub fn desk(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, output_dim, hidden: vec![64, 64, 64], activation: Activation::Mish }
    }

    /// Three hidden Mish layers of width 256.
    pub fn full_scale(input_dim: usize, output_dim: usize) -> Self {
        Self { input_dim, output_dim, hidden: vec![256, 256, 256], activation: Activation::Mish }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden.contains(&0) {
            return Err(Error::param("network dimensions must be >= 1"));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden.len() + 1);
        let mut fan_in = self.input_dim;
        for &h in self.hidden.iter().chain(std::iter::once(&self.output_dim)) {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims
    }

    pub fn n_params(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

/// Location of one affine layer inside the flat parameter vector. Weights
/// are stored input-major: `w[i * fan_out + o]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LayerSlice {
    pub fan_in: usize,
    pub fan_out: usize,
    pub weight_offset: usize,
    pub bias_offset: usize,
}

pub fn layout(spec: &MlpSpec) -> Vec<LayerSlice> {
    let mut offset = 0;
    spec.layer_dims()
        .into_iter()
        .map(|(fan_in, fan_out)| {
            let slice = LayerSlice { fan_in, fan_out, weight_offset: offset, bias_offset: offset + fan_in * fan_out };
            offset += fan_in * fan_out + fan_out;
            slice
        })
        .collect()
}

/// Flat parameter vector of an [`MlpSpec`] network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    values: Vec<f64>,
}

impl ParamSet {
    pub fn zeros(spec: &MlpSpec) -> Self {
        Self { values: vec![0.0; spec.n_params()] }
    }

    /// Uniform fan-in initialisation `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` for
    /// weights and biases.
    pub fn init(spec: &MlpSpec, seed: u64) -> Self {
        let mut rng = rng::stream(seed, &[0x696e_6974]);
        let mut values = vec![0.0; spec.n_params()];
        for l in layout(spec) {
            let bound = 1.0 / (l.fan_in as f64).sqrt();
            for v in &mut values[l.weight_offset..l.bias_offset + l.fan_out] {
                *v = rng.random_range(-bound..bound);
            }
        }
        Self { values }
    }

    pub fn from_vec(spec: &MlpSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.n_params() {
            return Err(Error::Shape(format!("{} parameters, spec needs {}", values.len(), spec.n_params())));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn sup_distance(&self, other: &ParamSet) -> f64 {
        self.values.iter().zip(&other.values).fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// Row-major batch of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Batch {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!("{} values for a {rows}x{cols} batch", data.len())));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            if r.as_ref().len() != cols {
                return Err(Error::Shape("ragged rows".into()));
            }
            data.extend_from_slice(r.as_ref());
        }
        Ok(Self { rows: rows.len(), cols, data })
    }

    /// Concatenates batches column-wise.
    pub fn hconcat(parts: &[&Batch]) -> Result<Self> {
        let rows = parts.first().map_or(0, |p| p.rows);
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::Shape("hconcat row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Ok(Self { rows, cols, data })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// Columns `start..end` as a new batch.
    pub fn columns(&self, start: usize, end: usize) -> Batch {
        let mut out = Batch::zeros(self.rows, end - start);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[start..end]);
        }
        out
    }
}

/// Intermediate values of a forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Layer inputs; `inputs[0]` is the network input.
    inputs: Vec<Batch>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Batch>,
    output: Batch,
}

impl ForwardTrace {
    pub fn output(&self) -> &Batch {
        &self.output
    }
}

fn affine(x: &Batch, params: &[f64], l: &LayerSlice) -> Batch {
    let w = &params[l.weight_offset..l.bias_offset];
    let b = &params[l.bias_offset..l.bias_offset + l.fan_out];
    let mut out = Batch::zeros(x.rows, l.fan_out);
    for r in 0..x.rows {
        let y = out.row_mut(r);
        y.copy_from_slice(b);
        for (i, &xi) in x.row(r).iter().enumerate() {
            if xi == 0.0 {
                continue;
            }
            let wi = &w[i * l.fan_out..(i + 1) * l.fan_out];
            for (yo, &wo) in y.iter_mut().zip(wi) {
                *yo += xi * wo;
            }
        }
    }
    out
}

fn check_input(spec: &MlpSpec, params: &ParamSet, input: &Batch) -> Result<()> {
    if input.cols != spec.input_dim {
        return Err(Error::Shape(format!("input has {} columns, network expects {}", input.cols, spec.input_dim)));
    }
    if params.len() != spec.n_params() {
        return Err(Error::Shape(format!("{} parameters, spec needs {}", params.len(), spec.n_params())));
    }
    Ok(())
}

pub fn forward_trace(params: &ParamSet, spec: &MlpSpec, input: &Batch) -> Result<ForwardTrace> {
    check_input(spec, params, input)?;
    let layers = layout(spec);
    let mut inputs = Vec::with_capacity(layers.len());
    let mut pre = Vec::with_capacity(layers.len() - 1);
    let mut x = input.clone();
    for (k, l) in layers.iter().enumerate() {
        let z = affine(&x, &params.values, l);
        inputs.push(x);
        if k + 1 == layers.len() {
            return Ok(ForwardTrace { inputs, pre, output: z });
        }
        let a = Batch { data: z.data.iter().map(|&v| spec.activation.apply(v)).collect(), ..z };
        pre.push(z);
        x = a;
    }
    unreachable!("a network has at least one layer")
}

pub fn forward(params: &ParamSet, spec: &MlpSpec, input: &Batch) -> Result<Batch> {
    Ok(forward_trace(params, spec, input)?.output)
}

/// Gradients of a scalar objective with respect to parameters and inputs.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub params: Vec<f64>,
    pub input: Batch,
}

/// Reverse-mode pass given `upstream = dL/d(output)`.
pub fn backward_from_trace(
    params: &ParamSet,
    spec: &MlpSpec,
    trace: &ForwardTrace,
    upstream: &Batch,
) -> Result<Gradients> {
    if upstream.rows != trace.output.rows || upstream.cols != trace.output.cols {
        return Err(Error::Shape(format!(
            "upstream gradient is {}x{}, output is {}x{}",
            upstream.rows, upstream.cols, trace.output.rows, trace.output.cols
        )));
    }
    let layers = layout(spec);
    let mut grad = vec![0.0; params.len()];
    let mut delta = upstream.clone();
    for k in (0..layers.len()).rev() {
        let l = &layers[k];
        let x = &trace.inputs[k];
        // bias and weight gradients
        {
            let (gw, gb) = grad[l.weight_offset..l.bias_offset + l.fan_out].split_at_mut(l.fan_in * l.fan_out);
            for r in 0..x.rows {
                let d = delta.row(r);
                for (g, &dv) in gb.iter_mut().zip(d) {
                    *g += dv;
                }
                for (i, &xi) in x.row(r).iter().enumerate() {
                    if xi == 0.0 {
                        continue;
                    }
                    for (g, &dv) in gw[i * l.fan_out..(i + 1) * l.fan_out].iter_mut().zip(d) {
                        *g += xi * dv;
                    }
                }
            }
        }
        // gradient with respect to the layer input
        let w = &params.values[l.weight_offset..l.bias_offset];
        let mut dx = Batch::zeros(x.rows, l.fan_in);
        for r in 0..x.rows {
            let d = delta.row(r);
            for (i, out) in dx.row_mut(r).iter_mut().enumerate() {
                *out = w[i * l.fan_out..(i + 1) * l.fan_out].iter().zip(d).map(|(a, b)| a * b).sum();
            }
        }
        if k > 0 {
            let z = &trace.pre[k - 1];
            for (dv, &zv) in dx.data.iter_mut().zip(&z.data) {
                *dv *= spec.activation.derivative(zv);
            }
        }
        delta = dx;
    }
    Ok(Gradients { params: grad, input: delta })
}

pub fn backward(params: &ParamSet, spec: &MlpSpec, input: &Batch, upstream: &Batch) -> Result<Gradients> {
    let trace = forward_trace(params, spec, input)?;
    backward_from_trace(params, spec, &trace, upstream)
}

/// A network: spec plus parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: ParamSet,
}

impl Mlp {
    pub fn new(spec: MlpSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let params = ParamSet::init(&spec, seed);
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &Batch) -> Result<Batch> {
        forward(&self.params, &self.spec, input)
    }

    pub fn forward_trace(&self, input: &Batch) -> Result<ForwardTrace> {
        forward_trace(&self.params, &self.spec, input)
    }

    pub fn backward(&self, trace: &ForwardTrace, upstream: &Batch) -> Result<Gradients> {
        backward_from_trace(&self.params, &self.spec, trace, upstream)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mish_values() {
        assert_eq!(mish(0.0), 0.0);
        // tanh(ln(1 + e))
        let expected = (1f64 + 1f64.exp()).ln().tanh();
        assert!((mish(1.0) - expected).abs() < 1e-15);
        assert!((mish(1.0) - 0.86509).abs() < 1e-5);
        assert!((mish(50.0) - 50.0).abs() < 1e-12);
    }

    #[test]
    fn zero_network_outputs_zero() {
        let spec = MlpSpec::new(3, 2, vec![4, 4], Activation::Mish).unwrap();
        let x = Batch::from_rows(&[[1.0, -2.0, 3.0]]).unwrap();
        let y = forward(&ParamSet::zeros(&spec), &spec, &x).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
    }

    #[test]
    fn single_relu_layer_by_hand() {
        // y = relu(x W + b) W2 + b2 with identity-sized hidden layer
        let spec = MlpSpec::new(2, 2, vec![2], Activation::Relu).unwrap();
        let mut p = ParamSet::zeros(&spec);
        // hidden: w[i][o]
        p.values_mut()[..6].copy_from_slice(&[1.0, 2.0, 3.0, 4.0, 0.5, -0.5]);
        // output: identity, zero bias
        p.values_mut()[6..10].copy_from_slice(&[1.0, 0.0, 0.0, 1.0]);
        let x = Batch::from_rows(&[[1.0, 1.0]]).unwrap();
        let y = forward(&p, &spec, &x).unwrap();
        // h0 = 1*1 + 1*3 + 0.5 = 4.5, h1 = 1*2 + 1*4 - 0.5 = 5.5
        assert_eq!(y.data(), &[4.5, 5.5]);
    }

    #[test]
    fn shape_errors() {
        let spec = MlpSpec::desk(3, 1);
        let p = ParamSet::zeros(&spec);
        assert!(forward(&p, &spec, &Batch::zeros(2, 4)).is_err());
        let bad_up = Batch::zeros(2, 2);
        assert!(backward(&p, &spec, &Batch::zeros(2, 3), &bad_up).is_err());
        assert!(MlpSpec::new(0, 1, vec![], Activation::Relu).is_err());
    }

    #[test]
    fn linear_net_gradient_is_least_squares_gradient() {
        // no hidden layers: y = x w + b; L = 0.5 * sum (y - t)^2
        let spec = MlpSpec::new(2, 1, vec![], Activation::Relu).unwrap();
        let p = ParamSet::from_vec(&spec, vec![0.3, -0.7, 0.1]).unwrap();
        let x = Batch::from_rows(&[[1.0, 2.0], [-1.0, 0.5], [0.0, 3.0]]).unwrap();
        let t = [1.0, 0.0, -2.0];
        let y = forward(&p, &spec, &x).unwrap();
        let resid: Vec<f64> = (0..3).map(|r| y.get(r, 0) - t[r]).collect();
        let g = backward(&p, &spec, &x, &Batch::from_vec(3, 1, resid.clone()).unwrap()).unwrap();
        let expected_w0: f64 = (0..3).map(|r| resid[r] * x.get(r, 0)).sum();
        let expected_w1: f64 = (0..3).map(|r| resid[r] * x.get(r, 1)).sum();
        let expected_b: f64 = resid.iter().sum();
        assert!((g.params[0] - expected_w0).abs() < 1e-12);
        assert!((g.params[1] - expected_w1).abs() < 1e-12);
        assert!((g.params[2] - expected_b).abs() < 1e-12);
    }

    #[test]
    fn init_is_seeded_and_bounded() {
        let spec = MlpSpec::desk(4, 2);
        let a = ParamSet::init(&spec, 1);
        assert_eq!(a, ParamSet::init(&spec, 1));
        assert_ne!(a, ParamSet::init(&spec, 2));
        assert!(a.values().iter().all(|v| v.abs() <= 0.5));
    }

    #[test]
    fn hconcat_and_columns() {
        let a = Batch::from_rows(&[[1.0], [2.0]]).unwrap();
        let b = Batch::from_rows(&[[3.0, 4.0], [5.0, 6.0]]).unwrap();
        let c = Batch::hconcat(&[&a, &b]).unwrap();
        assert_eq!(c.data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        assert_eq!(c.columns(1, 3), b);
    }
}
