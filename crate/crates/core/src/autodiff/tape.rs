use crate::error::{Error, Result};
use crate::tensor::fft::{transform_2d, FftPath};
use crate::tensor::ops::{self, ConvGeom};
use crate::tensor::Tensor;
use std::collections::BTreeMap;
use std::rc::Rc;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Marks a gathered element that reads an implicit zero (padding).
pub const GATHER_ZERO: u32 = u32::MAX;

/// Adjoint of a user-defined unary op: `(x, y, grad_y) -> grad_x`.
pub type CustomBackward = Box<dyn Fn(&Tensor, &Tensor, &Tensor) -> Tensor>;

/// Added to `re^2 + im^2` in the phase adjoint so bins at the origin stay finite.
pub const ATAN2_GRAD_EPS: f64 = 1e-8;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    ScaleChannels { x: Var, gate: Var },
    MulScalar(Var, Var),
    Exp(Var),
    Square(Var),
    Sqrt(Var),
    Abs(Var),
    Cos(Var),
    Sin(Var),
    Gelu(Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    Magnitude { re: Var, im: Var },
    Atan2 { im: Var, re: Var },
    Sum(Var),
    Mean(Var),
    BatchMatMul { a: Var, b: Var, dims: [usize; 4], ta: bool, tb: bool },
    Linear { x: Var, w: Var },
    Conv { x: Var, w: Var, geom: ConvGeom },
    Depthwise { x: Var, w: Var, geom: ConvGeom },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gather { x: Var, map: Rc<Vec<u32>> },
    Reshape(Var),
    Slice { x: Var, offset: usize },
    Stack(Vec<Var>),
    ConcatLast(Vec<Var>),
    SpatialMean { x: Var, s: usize },
    Fft2 { x: Var, dims: (usize, usize, usize, usize) },
    Ifft2Re { z: Var, dims: (usize, usize, usize, usize) },
    SingularValues { m: Var, u: Vec<f64>, v: Vec<f64>, rows: usize, cols: usize },
    Custom { x: Var, backward: CustomBackward },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::ScaleChannels { .. } => "scale_channels",
            Op::MulScalar(..) => "mul_scalar",
            Op::Exp(_) => "exp",
            Op::Square(_) => "square",
            Op::Sqrt(_) => "sqrt",
            Op::Abs(_) => "abs",
            Op::Cos(_) => "cos",
            Op::Sin(_) => "sin",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softmax(_) => "softmax",
            Op::Magnitude { .. } => "magnitude",
            Op::Atan2 { .. } => "atan2",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Linear { .. } => "linear",
            Op::Conv { .. } => "conv2d",
            Op::Depthwise { .. } => "depthwise_conv2d",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::Slice { .. } => "slice",
            Op::Stack(_) => "stack",
            Op::ConcatLast(_) => "concat",
            Op::SpatialMean { .. } => "spatial_mean",
            Op::Fft2 { .. } => "fft2",
            Op::Ifft2Re { .. } => "ifft2",
            Op::SingularValues { .. } => "singular_values",
            Op::Custom { .. } => "custom",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Reverse-mode automatic differentiation tape.
///
/// Every op appends a node holding its output and whatever the adjoint
/// needs. [`Tape::backward`] walks the nodes in exact reverse order, so a
/// node's gradient is complete before it is propagated.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. `v`; `None` if `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::from_raw(self.shapes[v.0].clone(), g.clone()))
    }

    pub fn get_or_zeros(&self, v: Var) -> Tensor {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&delta) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(delta),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Records an input or parameter.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Count of recorded ops by kind.
    pub fn op_histogram(&self) -> BTreeMap<&'static str, usize> {
        let mut h = BTreeMap::new();
        for n in &self.nodes {
            *h.entry(n.op.name()).or_insert(0) += 1;
        }
        h
    }

    fn same_shape(&self, a: Var, b: Var) -> Result<()> {
        self.value(a).expect_same_shape(self.value(b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let y = self.value(x).map(f);
        self.push(y, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let y = self.value(a).add(self.value(b))?;
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let y = self.value(a).sub(self.value(b))?;
        Ok(self.push(y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b)?;
        let y = self.value(a).zip_map(self.value(b), |p, q| p * q)?;
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        self.unary(x, |v| v * s, Op::Scale(x, s))
    }

    /// Adds a per-channel bias `[C]` along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.value(bias).numel() != c {
            return Err(Error::dim(format!(
                "bias of {} entries for {c} channels",
                self.value(bias).numel()
            )));
        }
        let b = self.value(bias).data().to_vec();
        let mut y = self.value(x).clone();
        for row in y.data_mut().chunks_mut(c) {
            for (v, bv) in row.iter_mut().zip(&b) {
                *v += bv;
            }
        }
        Ok(self.push(y, Op::AddBias(x, bias)))
    }

    /// Multiplies `x` viewed as `[B, S, C]` by a per-batch channel gate `[B, C]`.
    pub fn scale_channels(&mut self, x: Var, gate: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        let gn = self.value(gate).numel();
        let xn = self.value(x).numel();
        if gn % c != 0 || xn % gn != 0 {
            return Err(Error::dim(format!(
                "gate {:?} does not broadcast over {:?}",
                self.shape(gate),
                self.shape(x)
            )));
        }
        let batches = gn / c;
        let per = xn / batches;
        let g = self.value(gate).data().to_vec();
        let mut y = self.value(x).clone();
        for (b, chunk) in y.data_mut().chunks_mut(per).enumerate() {
            let gb = &g[b * c..(b + 1) * c];
            for row in chunk.chunks_mut(c) {
                for (v, gv) in row.iter_mut().zip(gb) {
                    *v *= gv;
                }
            }
        }
        Ok(self.push(y, Op::ScaleChannels { x, gate }))
    }

    /// Multiplies every element by a single-element variable.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar needs a single-element factor"));
        }
        let sv = self.value(s).item();
        Ok(self.unary(x, |v| v * sv, Op::MulScalar(x, s)))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        if self.value(x).data().iter().any(|&v| v < 0.0) {
            return Err(Error::Numerical("sqrt of a negative value".into()));
        }
        Ok(self.unary(x, f64::sqrt, Op::Sqrt(x)))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, f64::abs, Op::Abs(x))
    }

    pub fn cos(&mut self, x: Var) -> Var {
        self.unary(x, f64::cos, Op::Cos(x))
    }

    pub fn sin(&mut self, x: Var) -> Var {
        self.unary(x, f64::sin, Op::Sin(x))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(x, ops::gelu_scalar, Op::Gelu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, ops::sigmoid_scalar, Op::Sigmoid(x))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let y = ops::softmax_last(self.value(x));
        self.push(y, Op::Softmax(x))
    }

    /// `sqrt(re^2 + im^2)` elementwise.
    pub fn magnitude(&mut self, re: Var, im: Var) -> Result<Var> {
        let y = self.value(re).zip_map(self.value(im), f64::hypot)?;
        Ok(self.push(y, Op::Magnitude { re, im }))
    }

    /// Two-argument arctangent `atan2(im, re)` elementwise.
    pub fn atan2(&mut self, im: Var, re: Var) -> Result<Var> {
        let y = self.value(im).zip_map(self.value(re), f64::atan2)?;
        Ok(self.push(y, Op::Atan2 { im, re }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let s = self.value(x).mean();
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Batched product `op(a) x op(b)` over `[B, *, *]` operands, where
    /// `op` transposes the last two axes when the flag is set.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (&[ba, ra, ca], &[bb, rb, cb]) = (sa.as_slice(), sb.as_slice()) else {
            return Err(Error::dim(format!("bmm expects rank-3 operands, got {sa:?} and {sb:?}")));
        };
        let (m, k) = if ta { (ca, ra) } else { (ra, ca) };
        let (k2, n) = if tb { (cb, rb) } else { (rb, cb) };
        if ba != bb || k != k2 {
            return Err(Error::dim(format!(
                "bmm operands do not agree: {sa:?} (t={ta}) x {sb:?} (t={tb})"
            )));
        }
        let mut out = vec![0.0; ba * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..ba {
                ops::gemm(
                    &ad[i * m * k..(i + 1) * m * k],
                    &bd[i * k * n..(i + 1) * k * n],
                    &mut out[i * m * n..(i + 1) * m * n],
                    m,
                    k,
                    n,
                    ta,
                    tb,
                );
            }
        }
        let y = Tensor::from_raw(vec![ba, m, n], out);
        Ok(self.push(y, Op::BatchMatMul { a, b, dims: [ba, m, k, n], ta, tb }))
    }

    /// Rank-2 matrix product.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::dim(format!("matmul expects rank-2 operands, got {sa:?} and {sb:?}")));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let y = self.bmm(a3, b3, false, false)?;
        self.reshape(y, &[sa[0], sb[1]])
    }

    /// Applies `w: [c_in, c_out]` to the last axis (pointwise convolution).
    pub fn linear(&mut self, x: Var, w: Var) -> Result<Var> {
        let y = ops::linear(self.value(x), self.value(w))?;
        Ok(self.push(y, Op::Linear { x, w }))
    }

    /// Dense "same" convolution with kernel `[kh, kw, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        self.conv_impl(x, w, dilation, 1)
    }

    /// Strided dense convolution, output extent `ceil(extent / stride)`.
    pub fn conv2d_strided(&mut self, x: Var, w: Var, stride: usize) -> Result<Var> {
        self.conv_impl(x, w, 1, stride)
    }

    fn conv_impl(&mut self, x: Var, w: Var, dil: usize, stride: usize) -> Result<Var> {
        let &[kh, kw, ci, co] = self.shape(w) else {
            return Err(Error::dim(format!(
                "conv kernel must be [kh,kw,ci,co], got {:?}",
                self.shape(w)
            )));
        };
        let geom = ConvGeom::new(self.shape(x), (kh, kw), co, dil, stride)?;
        if geom.ci != ci {
            return Err(Error::dim(format!(
                "conv input has {} channels, kernel expects {ci}",
                geom.ci
            )));
        }
        let out = ops::conv_full_forward(&geom, self.value(x).data(), self.value(w).data());
        let y = Tensor::from_raw(geom.out_shape(self.value(x).rank() == 4), out);
        Ok(self.push(y, Op::Conv { x, w, geom }))
    }

    /// Depthwise "same" convolution with kernel `[kh, kw, C]`.
    pub fn depthwise(&mut self, x: Var, w: Var, dilation: usize) -> Result<Var> {
        let &[kh, kw, c] = self.shape(w) else {
            return Err(Error::dim(format!(
                "depthwise kernel must be [kh,kw,c], got {:?}",
                self.shape(w)
            )));
        };
        let geom = ConvGeom::new(self.shape(x), (kh, kw), c, dilation, 1)?;
        if geom.ci != c {
            return Err(Error::dim(format!(
                "depthwise input has {} channels, kernel has {c}",
                geom.ci
            )));
        }
        let out = ops::depthwise_forward(&geom, self.value(x).data(), self.value(w).data());
        let y = Tensor::from_raw(self.shape(x).to_vec(), out);
        Ok(self.push(y, Op::Depthwise { x, w, geom }))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.value(gamma).numel() != c || self.value(beta).numel() != c {
            return Err(Error::dim(format!("layer norm affine parameters must have {c} entries")));
        }
        let (y, xhat, rstd) = ops::layer_norm_parts(
            self.value(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let y = Tensor::from_raw(self.shape(x).to_vec(), y);
        Ok(self.push(y, Op::LayerNorm { x, gamma, beta, xhat, rstd }))
    }

    /// `out[i] = x[map[i]]`, or zero where `map[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, map: Rc<Vec<u32>>, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != map.len() {
            return Err(Error::dim(format!(
                "gather map of {} entries for shape {shape:?}",
                map.len()
            )));
        }
        let xd = self.value(x).data();
        if let Some(&bad) = map.iter().find(|&&i| i != GATHER_ZERO && i as usize >= xd.len()) {
            return Err(Error::dim(format!("gather index {bad} out of range {}", xd.len())));
        }
        let data = map
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { xd[i as usize] })
            .collect();
        let y = Tensor::from_raw(shape.to_vec(), data);
        Ok(self.push(y, Op::Gather { x, map }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    /// Entry `i` along the first axis.
    pub fn index_outer(&mut self, x: Var, i: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if i >= shape[0] {
            return Err(Error::dim(format!("index {i} out of range for {shape:?}")));
        }
        let y = self.value(x).index_outer(i);
        let offset = i * y.numel();
        Ok(self.push(y, Op::Slice { x, offset }))
    }

    /// Stacks equally shaped values along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let ts: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let y = Tensor::stack(&ts)?;
        Ok(self.push(y, Op::Stack(parts.to_vec())))
    }

    /// Concatenates along the last axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::dim(format!("concat leading extents {s:?} vs {first:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let y = Tensor::from_raw(shape, data);
        Ok(self.push(y, Op::ConcatLast(parts.to_vec())))
    }

    /// Mean over the spatial axes of `[N, H, W, C]`, giving `[N, C]`.
    pub fn spatial_mean(&mut self, x: Var) -> Result<Var> {
        let &[n, h, w, c] = self.shape(x) else {
            return Err(Error::dim(format!(
                "spatial mean expects [N,H,W,C], got {:?}",
                self.shape(x)
            )));
        };
        let pooled = ops::global_avg_pool(self.value(x))?;
        let y = pooled.reshape(&[n, c])?;
        Ok(self.push(y, Op::SpatialMean { x, s: h * w }))
    }

    /// Forward 2-D DFT over the spatial axes. The result stacks the real and
    /// imaginary planes: `[2, ...shape(x)]`.
    pub fn fft2(&mut self, x: Var) -> Result<Var> {
        let dims = self.value(x).image_dims()?;
        let mut re = self.value(x).data().to_vec();
        let mut im = vec![0.0; re.len()];
        transform_2d(&mut re, &mut im, dims, false, FftPath::Auto);
        re.extend_from_slice(&im);
        let mut shape = vec![2];
        shape.extend_from_slice(self.shape(x));
        let y = Tensor::from_raw(shape, re);
        Ok(self.push(y, Op::Fft2 { x, dims }))
    }

    /// Real part of the normalized inverse 2-D DFT of a stacked `[2, ...]` spectrum.
    pub fn ifft2_re(&mut self, z: Var) -> Result<Var> {
        let shape = self.shape(z).to_vec();
        if shape[0] != 2 {
            return Err(Error::dim(format!("expected stacked [2, ...] spectrum, got {shape:?}")));
        }
        let inner = shape[1..].to_vec();
        let probe = Tensor::zeros(&inner);
        let dims = probe.image_dims()?;
        let half = probe.numel();
        let zd = self.value(z).data();
        let mut re = zd[..half].to_vec();
        let mut im = zd[half..].to_vec();
        transform_2d(&mut re, &mut im, dims, true, FftPath::Auto);
        let y = Tensor::from_raw(inner, re);
        Ok(self.push(y, Op::Ifft2Re { z, dims }))
    }

    /// Singular values (descending) of a `[rows, cols]` matrix.
    pub fn singular_values(&mut self, m: Var) -> Result<Var> {
        let &[rows, cols] = self.shape(m) else {
            return Err(Error::dim(format!(
                "singular values need a matrix, got {:?}",
                self.shape(m)
            )));
        };
        let svd = crate::train::wnnm::thin_svd(self.value(m))?;
        let y = Tensor::from_raw(vec![cols], svd.sigma.clone());
        Ok(self.push(
            y,
            Op::SingularValues { m, u: svd.u, v: svd.v, rows, cols },
        ))
    }

    /// Elementwise op with a caller-provided adjoint.
    pub fn custom_unary(
        &mut self,
        x: Var,
        forward: impl Fn(f64) -> f64,
        backward: CustomBackward,
    ) -> Var {
        let y = self.value(x).map(forward);
        self.push(y, Op::Custom { x, backward })
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::usage("loss is not recorded on this tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::usage(format!(
                "loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn val(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let y = self.nodes[i].value.data();
        let zip = |a: &[f64], f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            a.iter().zip(g).map(|(&x, &gv)| f(x, gv)).collect()
        };
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.to_vec());
                accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                accumulate(grads, *a, zip(self.val(*b), &|bv, gv| bv * gv));
                accumulate(grads, *b, zip(self.val(*a), &|av, gv| av * gv));
            }
            Op::Scale(x, s) => accumulate(grads, *x, g.iter().map(|v| v * s).collect()),
            Op::AddBias(x, b) => {
                let c = self.val(*b).len();
                let mut db = vec![0.0; c];
                for row in g.chunks(c) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *x, g.to_vec());
                accumulate(grads, *b, db);
            }
            Op::ScaleChannels { x, gate } => {
                let gd = self.val(*gate);
                let xd = self.val(*x);
                let c = *self.shape(*x).last().unwrap();
                let per = xd.len() / (gd.len() / c);
                let mut dx = vec![0.0; xd.len()];
                let mut dg = vec![0.0; gd.len()];
                for (idx, (&xv, &gv)) in xd.iter().zip(g).enumerate() {
                    let b = idx / per;
                    let ch = idx % c;
                    dx[idx] = gv * gd[b * c + ch];
                    dg[b * c + ch] += gv * xv;
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gate, dg);
            }
            Op::MulScalar(x, s) => {
                let sv = self.val(*s)[0];
                let ds: f64 = self.val(*x).iter().zip(g).map(|(a, b)| a * b).sum();
                accumulate(grads, *x, g.iter().map(|v| v * sv).collect());
                accumulate(grads, *s, vec![ds]);
            }
            Op::Exp(x) => accumulate(grads, *x, y.iter().zip(g).map(|(a, b)| a * b).collect()),
            Op::Square(x) => accumulate(grads, *x, zip(self.val(*x), &|a, gv| 2.0 * a * gv)),
            Op::Sqrt(x) => accumulate(
                grads,
                *x,
                y.iter()
                    .zip(g)
                    .map(|(&r, &gv)| if r > 0.0 { 0.5 * gv / r } else { 0.0 })
                    .collect(),
            ),
            Op::Abs(x) => accumulate(
                grads,
                *x,
                zip(self.val(*x), &|a, gv| if a > 0.0 { gv } else if a < 0.0 { -gv } else { 0.0 }),
            ),
            Op::Cos(x) => accumulate(grads, *x, zip(self.val(*x), &|a, gv| -a.sin() * gv)),
            Op::Sin(x) => accumulate(grads, *x, zip(self.val(*x), &|a, gv| a.cos() * gv)),
            Op::Gelu(x) => {
                accumulate(grads, *x, zip(self.val(*x), &|a, gv| ops::gelu_grad_scalar(a) * gv))
            }
            Op::Relu(x) => {
                accumulate(grads, *x, zip(self.val(*x), &|a, gv| if a > 0.0 { gv } else { 0.0 }))
            }
            Op::Sigmoid(x) => {
                accumulate(grads, *x, y.iter().zip(g).map(|(s, gv)| s * (1.0 - s) * gv).collect())
            }
            Op::Softmax(x) => {
                let c = *self.shape(*x).last().unwrap();
                let mut dx = vec![0.0; y.len()];
                for ((yr, gr), dr) in y.chunks(c).zip(g.chunks(c)).zip(dx.chunks_mut(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Magnitude { re, im } => {
                let (r, m) = (self.val(*re), self.val(*im));
                let mut dre = vec![0.0; y.len()];
                let mut dim = vec![0.0; y.len()];
                for k in 0..y.len() {
                    if y[k] > 0.0 {
                        dre[k] = g[k] * r[k] / y[k];
                        dim[k] = g[k] * m[k] / y[k];
                    }
                }
                accumulate(grads, *re, dre);
                accumulate(grads, *im, dim);
            }
            Op::Atan2 { im, re } => {
                let (r, m) = (self.val(*re), self.val(*im));
                let mut dre = vec![0.0; y.len()];
                let mut dim = vec![0.0; y.len()];
                for k in 0..y.len() {
                    let den = r[k] * r[k] + m[k] * m[k] + ATAN2_GRAD_EPS;
                    dre[k] = -g[k] * m[k] / den;
                    dim[k] = g[k] * r[k] / den;
                }
                accumulate(grads, *im, dim);
                accumulate(grads, *re, dre);
            }
            Op::Sum(x) => accumulate(grads, *x, vec![g[0]; self.val(*x).len()]),
            Op::Mean(x) => {
                let n = self.val(*x).len();
                accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::BatchMatMul { a, b, dims, ta, tb } => {
                let [bs, m, k, n] = *dims;
                let (ad, bd) = (self.val(*a), self.val(*b));
                let mut da = vec![0.0; bs * m * k];
                let mut db = vec![0.0; bs * k * n];
                for i in 0..bs {
                    let ai = &ad[i * m * k..(i + 1) * m * k];
                    let bi = &bd[i * k * n..(i + 1) * k * n];
                    let gi = &g[i * m * n..(i + 1) * m * n];
                    let dai = &mut da[i * m * k..(i + 1) * m * k];
                    if *ta {
                        ops::gemm(bi, gi, dai, k, n, m, *tb, true);
                    } else {
                        ops::gemm(gi, bi, dai, m, n, k, false, !*tb);
                    }
                    let dbi = &mut db[i * k * n..(i + 1) * k * n];
                    if *tb {
                        ops::gemm(gi, ai, dbi, n, m, k, true, *ta);
                    } else {
                        ops::gemm(ai, gi, dbi, k, m, n, !*ta, false);
                    }
                }
                accumulate(grads, *a, da);
                accumulate(grads, *b, db);
            }
            Op::Linear { x, w } => {
                let &[ci, co] = self.shape(*w) else { unreachable!() };
                let rows = self.val(*x).len() / ci;
                let mut dx = vec![0.0; rows * ci];
                let mut dw = vec![0.0; ci * co];
                ops::gemm(g, self.val(*w), &mut dx, rows, co, ci, false, true);
                ops::gemm(self.val(*x), g, &mut dw, ci, rows, co, true, false);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::Conv { x, w, geom } => {
                let (dx, dw) = ops::conv_full_backward(geom, self.val(*x), self.val(*w), g);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::Depthwise { x, w, geom } => {
                let (dx, dw) = ops::depthwise_backward(geom, self.val(*x), self.val(*w), g);
                accumulate(grads, *x, dx);
                accumulate(grads, *w, dw);
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = *self.shape(*x).last().unwrap();
                let gm = self.val(*gamma);
                let mut dx = vec![0.0; xhat.len()];
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for (r, &rs) in rstd.iter().enumerate() {
                    let xh = &xhat[r * c..(r + 1) * c];
                    let gr = &g[r * c..(r + 1) * c];
                    let mut mean_gy = 0.0;
                    let mut mean_gyx = 0.0;
                    for j in 0..c {
                        let gy = gr[j] * gm[j];
                        mean_gy += gy;
                        mean_gyx += gy * xh[j];
                        dgamma[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_gy /= c as f64;
                    mean_gyx /= c as f64;
                    for j in 0..c {
                        dx[r * c + j] = rs * (gr[j] * gm[j] - mean_gy - xh[j] * mean_gyx);
                    }
                }
                accumulate(grads, *x, dx);
                accumulate(grads, *gamma, dgamma);
                accumulate(grads, *beta, dbeta);
            }
            Op::Gather { x, map } => {
                let mut dx = vec![0.0; self.val(*x).len()];
                for (&idx, &gv) in map.iter().zip(g) {
                    if idx != GATHER_ZERO {
                        dx[idx as usize] += gv;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => accumulate(grads, *x, g.to_vec()),
            Op::Slice { x, offset } => {
                let mut dx = vec![0.0; self.val(*x).len()];
                dx[*offset..*offset + g.len()].copy_from_slice(g);
                accumulate(grads, *x, dx);
            }
            Op::Stack(parts) => {
                let n = g.len() / parts.len();
                for (k, &p) in parts.iter().enumerate() {
                    accumulate(grads, p, g[k * n..(k + 1) * n].to_vec());
                }
            }
            Op::ConcatLast(parts) => {
                let widths: Vec<usize> =
                    parts.iter().map(|&p| *self.shape(p).last().unwrap()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut outs: Vec<Vec<f64>> =
                    widths.iter().map(|&w| Vec::with_capacity(rows * w)).collect();
                for r in 0..rows {
                    let mut off = r * total;
                    for (o, &w) in outs.iter_mut().zip(&widths) {
                        o.extend_from_slice(&g[off..off + w]);
                        off += w;
                    }
                }
                for (&p, o) in parts.iter().zip(outs) {
                    accumulate(grads, p, o);
                }
            }
            Op::SpatialMean { x, s } => {
                let c = *self.shape(*x).last().unwrap();
                let n = g.len() / c;
                let mut dx = Vec::with_capacity(n * s * c);
                for b in 0..n {
                    for _ in 0..*s {
                        dx.extend(g[b * c..(b + 1) * c].iter().map(|v| v / *s as f64));
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Fft2 { x, dims } => {
                // adjoint of the unnormalized DFT: N * Re(IDFT(g_re + i g_im))
                let half = g.len() / 2;
                let mut re = g[..half].to_vec();
                let mut im = g[half..].to_vec();
                transform_2d(&mut re, &mut im, *dims, true, FftPath::Auto);
                let n = (dims.1 * dims.2) as f64;
                re.iter_mut().for_each(|v| *v *= n);
                accumulate(grads, *x, re);
            }
            Op::Ifft2Re { z, dims } => {
                // adjoint of Re(IDFT(z)): DFT(g) / N, split into planes
                let mut re = g.to_vec();
                let mut im = vec![0.0; g.len()];
                transform_2d(&mut re, &mut im, *dims, false, FftPath::Auto);
                let inv = 1.0 / (dims.1 * dims.2) as f64;
                re.extend_from_slice(&im);
                re.iter_mut().for_each(|v| *v *= inv);
                accumulate(grads, *z, re);
            }
            Op::SingularValues { m, u, v, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dm = vec![0.0; rows * cols];
                for k in 0..cols {
                    if g[k] == 0.0 {
                        continue;
                    }
                    let uk = &u[k * rows..(k + 1) * rows];
                    let vk = &v[k * cols..(k + 1) * cols];
                    for r in 0..rows {
                        let s = g[k] * uk[r];
                        if s == 0.0 {
                            continue;
                        }
                        for c in 0..cols {
                            dm[r * cols + c] += s * vk[c];
                        }
                    }
                }
                accumulate(grads, *m, dm);
            }
            Op::Custom { x, backward } => {
                let gy = Tensor::from_raw(self.nodes[i].value.shape().to_vec(), g.to_vec());
                let dx = backward(self.value(*x), &self.nodes[i].value, &gy);
                accumulate(grads, *x, dx.into_data());
            }
        }
    }
}
