//! Dense row-major tensors of `f64`.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, panicking if `data.len()` disagrees with `shape`.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Self {
        Self::try_new(shape, data).expect("tensor data length must match shape")
    }

    pub fn try_new(shape: Vec<usize>, data: Vec<f64>) -> Option<Self> {
        if shape.iter().product::<usize>() == data.len() {
            Some(Self { shape, data })
        } else {
            None
        }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::full(shape, 0.0)
    }

    pub fn ones(shape: &[usize]) -> Self {
        Self::full(shape, 1.0)
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![value; shape.iter().product()],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![1],
            data: vec![value],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// The single element of a one-element tensor.
    pub fn item(&self) -> Option<f64> {
        (self.data.len() == 1).then(|| self.data[0])
    }

    pub fn reshaped(mut self, shape: Vec<usize>) -> Option<Self> {
        if shape.iter().product::<usize>() != self.data.len() {
            return None;
        }
        self.shape = shape;
        Some(self)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        debug_assert_eq!(self.shape, other.shape);
        Self {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(items: &[&Tensor]) -> Option<Self> {
        let first = items.first()?;
        let inner = first.shape.clone();
        let mut data = Vec::with_capacity(items.len() * first.len());
        for t in items {
            if t.shape != inner {
                return None;
            }
            data.extend_from_slice(&t.data);
        }
        let mut shape = vec![items.len()];
        shape.extend(inner);
        Some(Self { shape, data })
    }
}

impl fmt::Debug for Tensor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        const PREVIEW: usize = 8;
        write!(f, "Tensor{:?} ", self.shape)?;
        if self.data.len() <= PREVIEW {
            write!(f, "{:?}", self.data)
        } else {
            write!(f, "{:?}..", &self.data[..PREVIEW])
        }
    }
}

// Raw kernels shared by forward and backward ops. Shapes are validated by the
// graph before these are called.

pub(crate) fn matmul(a: &[f64], b: &[f64], n: usize, k: usize, m: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = &mut out[i * m..(i + 1) * m];
        for (p, &aip) in a[i * k..(i + 1) * k].iter().enumerate() {
            if aip == 0.0 {
                continue;
            }
            let brow = &b[p * m..(p + 1) * m];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += aip * bv;
            }
        }
    }
    out
}

pub(crate) fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// Geometry of a valid-padding, unit-stride 2-D cross-correlation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub in_ch: usize,
    pub out_ch: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub k_h: usize,
    pub k_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.in_h + 1 - self.k_h
    }

    pub fn out_w(&self) -> usize {
        self.in_w + 1 - self.k_w
    }

    pub fn input_shape(&self) -> Vec<usize> {
        vec![self.batch, self.in_ch, self.in_h, self.in_w]
    }

    pub fn kernel_shape(&self) -> Vec<usize> {
        vec![self.out_ch, self.in_ch, self.k_h, self.k_w]
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h(), self.out_w()]
    }
}

/// y[n,o,i,j] = sum_{c,p,q} x[n,c,i+p,j+q] * k[o,c,p,q]
pub(crate) fn conv2d(x: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut y = vec![0.0; g.batch * g.out_ch * oh * ow];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let ybase = (n * g.out_ch + o) * oh * ow;
            for c in 0..g.in_ch {
                let xbase = (n * g.in_ch + c) * g.in_h * g.in_w;
                let kbase = (o * g.in_ch + c) * g.k_h * g.k_w;
                for p in 0..g.k_h {
                    for q in 0..g.k_w {
                        let kv = k[kbase + p * g.k_w + q];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let xrow = &x[xbase + (i + p) * g.in_w + q..][..ow];
                            let yrow = &mut y[ybase + i * ow..][..ow];
                            for (yv, &xv) in yrow.iter_mut().zip(xrow) {
                                *yv += kv * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input:
/// x[n,c,i+p,j+q] += sum_o g[n,o,i,j] * k[o,c,p,q]
pub(crate) fn conv2d_input_grad(gy: &[f64], k: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut x = vec![0.0; g.batch * g.in_ch * g.in_h * g.in_w];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let ybase = (n * g.out_ch + o) * oh * ow;
            for c in 0..g.in_ch {
                let xbase = (n * g.in_ch + c) * g.in_h * g.in_w;
                let kbase = (o * g.in_ch + c) * g.k_h * g.k_w;
                for p in 0..g.k_h {
                    for q in 0..g.k_w {
                        let kv = k[kbase + p * g.k_w + q];
                        if kv == 0.0 {
                            continue;
                        }
                        for i in 0..oh {
                            let grow = &gy[ybase + i * ow..][..ow];
                            let xrow = &mut x[xbase + (i + p) * g.in_w + q..][..ow];
                            for (xv, &gv) in xrow.iter_mut().zip(grow) {
                                *xv += kv * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// Adjoint of [`conv2d`] with respect to its kernel:
/// k[o,c,p,q] = sum_{n,i,j} x[n,c,i+p,j+q] * g[n,o,i,j]
pub(crate) fn conv2d_kernel_grad(x: &[f64], gy: &[f64], g: ConvGeom) -> Vec<f64> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let mut k = vec![0.0; g.out_ch * g.in_ch * g.k_h * g.k_w];
    for n in 0..g.batch {
        for o in 0..g.out_ch {
            let ybase = (n * g.out_ch + o) * oh * ow;
            for c in 0..g.in_ch {
                let xbase = (n * g.in_ch + c) * g.in_h * g.in_w;
                let kbase = (o * g.in_ch + c) * g.k_h * g.k_w;
                for p in 0..g.k_h {
                    for q in 0..g.k_w {
                        let mut acc = 0.0;
                        for i in 0..oh {
                            let grow = &gy[ybase + i * ow..][..ow];
                            let xrow = &x[xbase + (i + p) * g.in_w + q..][..ow];
                            for (&gv, &xv) in grow.iter().zip(xrow) {
                                acc += gv * xv;
                            }
                        }
                        k[kbase + p * g.k_w + q] += acc;
                    }
                }
            }
        }
    }
    k
}
