//! Dense row-major tensors and the forward kernels used by the model.
//!
//! Values are held as `f64` and rounded to the tensor's storage
//! [`Precision`] after every kernel, so a 32-bit tensor only ever contains
//! values representable as `f32` while all accumulation happens at 64-bit.
//! Tensors are at most 2-D; a 1-D tensor of length `n` behaves as a `1 × n`
//! row wherever a matrix is expected.

use crate::error::{Error, Result};

/// Additive logit offset applied to masked attention entries.
pub const MASK_FILL: f64 = -1e9;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub enum Precision {
    #[default]
    F32,
    F64,
}

impl Precision {
    #[inline]
    pub fn round(self, x: f64) -> f64 {
        match self {
            Precision::F32 => x as f32 as f64,
            Precision::F64 => x,
        }
    }

    /// The wider of two precisions; mixed inputs compute at the wider one.
    pub fn wider(self, other: Precision) -> Precision {
        if self == Precision::F64 || other == Precision::F64 {
            Precision::F64
        } else {
            Precision::F32
        }
    }

    pub fn bits(self) -> u32 {
        match self {
            Precision::F32 => 32,
            Precision::F64 => 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    precision: Precision,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>, precision: Precision) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::dim("new", format!("zero-sized dimension in {shape:?}")));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::dim(
                "new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        if shape.len() > 2 {
            return Err(Error::dim("new", "only rank 1 and 2 tensors are supported"));
        }
        let data = data.into_iter().map(|v| precision.round(v)).collect();
        Ok(Tensor {
            shape,
            data,
            precision,
        })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>, precision: Precision) -> Result<Self> {
        Tensor::new(vec![rows, cols], data, precision)
    }

    pub fn vector(data: Vec<f64>, precision: Precision) -> Result<Self> {
        let n = data.len();
        Tensor::new(vec![n], data, precision)
    }

    pub fn scalar(value: f64, precision: Precision) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![precision.round(value)],
            precision,
        }
    }

    pub fn zeros(shape: &[usize], precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            precision,
        }
    }

    pub fn full(shape: &[usize], value: f64, precision: Precision) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![precision.round(value); n],
            precision,
        }
    }

    pub fn identity(n: usize, precision: Precision) -> Self {
        let mut t = Tensor::zeros(&[n, n], precision);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn from_rows(rows: &[Vec<f64>], precision: Precision) -> Result<Self> {
        let cols = rows.first().map(Vec::len).unwrap_or(0);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::dim("from_rows", "ragged rows"));
        }
        Tensor::matrix(rows.len(), cols, rows.concat(), precision)
    }

    /// Internal constructor for kernel outputs: rounds to `precision`.
    fn from_parts(shape: Vec<usize>, mut data: Vec<f64>, precision: Precision) -> Self {
        if precision == Precision::F32 {
            for v in &mut data {
                *v = *v as f32 as f64;
            }
        }
        Tensor {
            shape,
            data,
            precision,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// `(rows, cols)` treating rank-1 tensors as a single row.
    pub fn dims(&self) -> (usize, usize) {
        match self.shape.as_slice() {
            [n] => (1, *n),
            [r, c] => (*r, *c),
            _ => unreachable!("rank checked at construction"),
        }
    }

    pub fn rows(&self) -> usize {
        self.dims().0
    }

    pub fn cols(&self) -> usize {
        self.dims().1
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> f64 {
        self.data[0]
    }

    pub fn to_precision(&self, precision: Precision) -> Tensor {
        Tensor::from_parts(self.shape.clone(), self.data.clone(), precision)
    }

    pub fn reshape(&self, shape: Vec<usize>) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone(), self.precision)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.shape, other.shape);
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
            self.precision,
        )
    }

    fn same_shape(&self, other: &Tensor, op: &'static str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::dim(
                op,
                format!("{:?} vs {:?}", self.shape, other.shape),
            ));
        }
        Ok(())
    }

    fn zip_with(&self, other: &Tensor, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(other, op)?;
        Ok(Tensor::from_parts(
            self.shape.clone(),
            self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
            self.precision.wider(other.precision),
        ))
    }
}

/// Dense boolean matrix used for attention masks.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BoolMatrix {
    rows: usize,
    cols: usize,
    data: Vec<bool>,
}

impl BoolMatrix {
    pub fn new(rows: usize, cols: usize, value: bool) -> Self {
        BoolMatrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn from_fn(rows: usize, cols: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        BoolMatrix { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> bool {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: bool) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[bool] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn active_in_row(&self, r: usize) -> impl Iterator<Item = usize> + '_ {
        self.row(r)
            .iter()
            .enumerate()
            .filter_map(|(c, &b)| b.then_some(c))
    }

    /// Sub-matrix with the given rows and columns, in the given order.
    pub fn select(&self, rows: &[usize], cols: &[usize]) -> BoolMatrix {
        BoolMatrix::from_fn(rows.len(), cols.len(), |r, c| self.get(rows[r], cols[c]))
    }
}

// ---------------------------------------------------------------------------
// Kernels
// ---------------------------------------------------------------------------

pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    if k != k2 {
        return Err(Error::dim(
            "matmul",
            format!("{:?} x {:?}", a.shape(), b.shape()),
        ));
    }
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a.data[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b.data[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Ok(Tensor::from_parts(vec![m, n], out, a.precision.wider(b.precision)))
}

pub fn transpose(a: &Tensor) -> Tensor {
    let (r, c) = a.dims();
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a.data[i * c + j];
        }
    }
    Tensor::from_parts(vec![c, r], out, a.precision)
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "add", |x, y| x + y)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "sub", |x, y| x - y)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    a.zip_with(b, "mul", |x, y| x * y)
}

pub fn scale(a: &Tensor, s: f64) -> Tensor {
    a.map(|v| v * s)
}

/// Adds a length-`cols` bias to every row of `a`.
pub fn add_row(a: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (r, c) = a.dims();
    if bias.len() != c {
        return Err(Error::dim(
            "add_row",
            format!("bias of {} for {} columns", bias.len(), c),
        ));
    }
    let mut out = a.data.clone();
    for i in 0..r {
        for (o, &b) in out[i * c..(i + 1) * c].iter_mut().zip(&bias.data) {
            *o += b;
        }
    }
    Ok(Tensor::from_parts(a.shape.clone(), out, a.precision.wider(bias.precision)))
}

const FRAC_1_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Exact GELU, `x·Φ(x)`, with `erf` from a rational approximation (musl's,
/// max error below 1e-15, well inside the 1e-7 budget).
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2));
    let pdf = INV_SQRT_2PI * (-0.5 * x * x).exp();
    cdf + x * pdf
}

pub fn gelu(a: &Tensor) -> Tensor {
    a.map(gelu_scalar)
}

/// Per-row normalisation statistics kept for the backward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache {
    /// Normalised input before the affine transform.
    pub normalized: Vec<f64>,
    pub inv_std: Vec<f64>,
}

pub fn layer_norm(x: &Tensor, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<(Tensor, LayerNormCache)> {
    let (t, d) = x.dims();
    if gain.len() != d || bias.len() != d {
        return Err(Error::dim(
            "layer_norm",
            format!("gain {} / bias {} for width {d}", gain.len(), bias.len()),
        ));
    }
    if eps <= 0.0 {
        return Err(Error::Precondition("layer_norm eps must be > 0".into()));
    }
    let mut out = vec![0.0; t * d];
    let mut normalized = vec![0.0; t * d];
    let mut inv_std = vec![0.0; t];
    for i in 0..t {
        let row = &x.data[i * d..(i + 1) * d];
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let rs = 1.0 / (var + eps).sqrt();
        inv_std[i] = rs;
        for j in 0..d {
            let n = (row[j] - mean) * rs;
            normalized[i * d + j] = n;
            out[i * d + j] = n * gain.data[j] + bias.data[j];
        }
    }
    let precision = x.precision.wider(gain.precision);
    Ok((
        Tensor::from_parts(x.shape.clone(), out, precision),
        LayerNormCache {
            normalized,
            inv_std,
        },
    ))
}

/// Row-wise softmax with masked entries pushed to [`MASK_FILL`] before
/// normalisation. Masked entries come out as exactly zero.
pub fn masked_softmax(logits: &Tensor, mask: &BoolMatrix) -> Result<Tensor> {
    let (r, c) = logits.dims();
    if mask.rows() != r || mask.cols() != c {
        return Err(Error::dim(
            "masked_softmax",
            format!("logits {r}x{c} vs mask {}x{}", mask.rows(), mask.cols()),
        ));
    }
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        if !mask.row(i).iter().any(|&b| b) {
            return Err(Error::InvalidMask { row: i });
        }
        let row = &logits.data[i * c..(i + 1) * c];
        let orow = &mut out[i * c..(i + 1) * c];
        let mut max = f64::NEG_INFINITY;
        for j in 0..c {
            let z = if mask.get(i, j) { row[j] } else { row[j] + MASK_FILL };
            orow[j] = z;
            max = max.max(z);
        }
        let mut sum = 0.0;
        for z in orow.iter_mut() {
            *z = (*z - max).exp();
            sum += *z;
        }
        for z in orow.iter_mut() {
            *z /= sum;
        }
    }
    Ok(Tensor::from_parts(logits.shape.clone(), out, logits.precision))
}

pub fn slice_cols(a: &Tensor, start: usize, end: usize) -> Result<Tensor> {
    let (r, c) = a.dims();
    if start >= end || end > c {
        return Err(Error::dim("slice_cols", format!("{start}..{end} of {c}")));
    }
    let w = end - start;
    let mut out = Vec::with_capacity(r * w);
    for i in 0..r {
        out.extend_from_slice(&a.data[i * c + start..i * c + end]);
    }
    Ok(Tensor::from_parts(vec![r, w], out, a.precision))
}

pub fn concat_cols(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::dim("concat_cols", "no inputs"))?;
    let r = first.rows();
    if parts.iter().any(|p| p.rows() != r) {
        return Err(Error::dim("concat_cols", "row counts differ"));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut out = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            out.extend_from_slice(p.row(i));
        }
    }
    let precision = parts.iter().fold(first.precision, |acc, p| acc.wider(p.precision));
    Ok(Tensor::from_parts(vec![r, total], out, precision))
}

pub fn gather_rows(a: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (r, c) = a.dims();
    if idx.is_empty() {
        return Err(Error::dim("gather_rows", "empty index list"));
    }
    let mut out = Vec::with_capacity(idx.len() * c);
    for &i in idx {
        if i >= r {
            return Err(Error::dim("gather_rows", format!("row {i} of {r}")));
        }
        out.extend_from_slice(a.row(i));
    }
    Ok(Tensor::from_parts(vec![idx.len(), c], out, a.precision))
}

pub fn concat_rows(parts: &[&Tensor]) -> Result<Tensor> {
    let first = parts.first().ok_or_else(|| Error::dim("concat_rows", "no inputs"))?;
    let c = first.cols();
    if parts.iter().any(|p| p.cols() != c) {
        return Err(Error::dim("concat_rows", "column counts differ"));
    }
    let rows: usize = parts.iter().map(|p| p.rows()).sum();
    let mut out = Vec::with_capacity(rows * c);
    for p in parts {
        out.extend_from_slice(&p.data);
    }
    let precision = parts.iter().fold(first.precision, |acc, p| acc.wider(p.precision));
    Ok(Tensor::from_parts(vec![rows, c], out, precision))
}

pub fn sum(a: &Tensor) -> Tensor {
    Tensor::scalar(a.data.iter().sum(), a.precision)
}

pub fn mean_rows(a: &Tensor) -> Tensor {
    let (r, c) = a.dims();
    let mut out = vec![0.0; c];
    for i in 0..r {
        for (o, v) in out.iter_mut().zip(a.row(i)) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= r as f64;
    }
    Tensor::from_parts(vec![1, c], out, a.precision)
}

/// Mean token cross-entropy of `logits` (rows × classes) against `targets`.
/// Returns the scalar loss and the row softmax probabilities.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<(Tensor, Vec<f64>)> {
    let (r, c) = logits.dims();
    if targets.len() != r {
        return Err(Error::dim(
            "cross_entropy",
            format!("{} targets for {r} rows", targets.len()),
        ));
    }
    let mut probs = vec![0.0; r * c];
    let mut loss = 0.0;
    for i in 0..r {
        let t = targets[i];
        if t >= c {
            return Err(Error::dim("cross_entropy", format!("target {t} of {c} classes")));
        }
        let row = logits.row(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - max).exp()).sum::<f64>().ln() + max;
        loss += lse - row[t];
        for j in 0..c {
            probs[i * c + j] = (row[j] - lse).exp();
        }
    }
    Ok((Tensor::scalar(loss / r as f64, logits.precision), probs))
}
