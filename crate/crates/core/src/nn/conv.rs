//! 3D convolution and transposed convolution with "same" zero padding.
//!
//! Both layers share one geometry: a convolution maps the large grid to the
//! small grid (`small = ceil(big / stride)`, symmetric padding `k / 2`), and
//! the transposed convolution is its exact adjoint, mapping small back to
//! `big = small * stride`. Work is done by unfolding patches into a column
//! matrix (im2col) slab by slab along x and multiplying with the weights.

use rand::Rng;

use super::direct::{self, Shape};
use super::tensor::{Scalar, Tensor4};
use crate::error::{Error, Result};

/// Upper bound on column-buffer elements per slab.
const COL_BUDGET: usize = 1 << 23;

/// Stride-1 convolutions with at most this many outputs skip im2col.
const DIRECT_COUT: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct Geometry {
    pub big: [usize; 3],
    pub small: [usize; 3],
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Geometry {
    pub fn conv(big: [usize; 3], k: usize, stride: usize) -> Self {
        let pad = k / 2;
        let small = big.map(|b| (b + 2 * pad - k) / stride + 1);
        Self { big, small, k, stride, pad }
    }

    pub fn deconv(small: [usize; 3], k: usize, stride: usize) -> Self {
        let big = small.map(|s| s * stride);
        let g = Self::conv(big, k, stride);
        debug_assert_eq!(g.small, small);
        g
    }

    fn small_plane(&self) -> usize {
        self.small[1] * self.small[2]
    }

    fn small_voxels(&self) -> usize {
        self.small.iter().product()
    }

    fn big_voxels(&self) -> usize {
        self.big.iter().product()
    }

    /// Valid output range along one axis for kernel tap `t`.
    fn valid(&self, axis: usize, t: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > t { (self.pad - t).div_ceil(s) } else { 0 };
        let top = self.big[axis] as isize - 1 + self.pad as isize - t as isize;
        let hi = if top < 0 { 0 } else { (top as usize / s + 1).min(self.small[axis]) };
        (lo.min(hi), hi)
    }

    fn slab_planes(&self, rows: usize) -> usize {
        (COL_BUDGET / (rows * self.small_plane()).max(1)).clamp(1, self.small[0])
    }

    /// Unfold patches of `src` (channels `ch`, big grid) for small-grid x in `x0..x1`.
    fn im2col<T: Scalar>(&self, src: &[T], ch: usize, x0: usize, x1: usize, col: &mut [T]) {
        let [bx, by, bz] = self.big;
        let [_, sy, sz] = self.small;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let n = (x1 - x0) * sy * sz;
        for ci in 0..ch {
            for a in 0..k {
                let (xlo, xhi) = self.valid(0, a);
                for b in 0..k {
                    let (ylo, yhi) = self.valid(1, b);
                    for c in 0..k {
                        let (zlo, zhi) = self.valid(2, c);
                        let row = ((ci * k + a) * k + b) * k + c;
                        let dst = &mut col[row * n..(row + 1) * n];
                        for ox in x0..x1 {
                            let plane = &mut dst[(ox - x0) * sy * sz..(ox - x0 + 1) * sy * sz];
                            if ox < xlo || ox >= xhi {
                                plane.fill(T::ZERO);
                                continue;
                            }
                            let ix = ox * s + a - p;
                            for oy in 0..sy {
                                let line = &mut plane[oy * sz..(oy + 1) * sz];
                                if oy < ylo || oy >= yhi {
                                    line.fill(T::ZERO);
                                    continue;
                                }
                                let iy = oy * s + b - p;
                                let base = ((ci * bx + ix) * by + iy) * bz + c;
                                line[..zlo].fill(T::ZERO);
                                line[zhi..].fill(T::ZERO);
                                if s == 1 {
                                    line[zlo..zhi].copy_from_slice(&src[base + zlo - p..base + zhi - p]);
                                } else {
                                    for (oz, v) in line.iter_mut().enumerate().take(zhi).skip(zlo) {
                                        *v = src[base + oz * s - p];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        let _ = bx;
    }

    /// Adjoint of [`Geometry::im2col`]: scatter-add columns into `dst` (big grid).
    fn col2im<T: Scalar>(&self, col: &[T], ch: usize, x0: usize, x1: usize, dst: &mut [T]) {
        let [bx, by, bz] = self.big;
        let [_, sy, sz] = self.small;
        let (k, s, p) = (self.k, self.stride, self.pad);
        let n = (x1 - x0) * sy * sz;
        for ci in 0..ch {
            for a in 0..k {
                let (xlo, xhi) = self.valid(0, a);
                for b in 0..k {
                    let (ylo, yhi) = self.valid(1, b);
                    for c in 0..k {
                        let (zlo, zhi) = self.valid(2, c);
                        let row = ((ci * k + a) * k + b) * k + c;
                        let src = &col[row * n..(row + 1) * n];
                        for ox in x0.max(xlo)..x1.min(xhi) {
                            let ix = ox * s + a - p;
                            for oy in ylo..yhi {
                                let iy = oy * s + b - p;
                                let base = ((ci * bx + ix) * by + iy) * bz + c;
                                let line = &src[((ox - x0) * sy + oy) * sz..((ox - x0) * sy + oy + 1) * sz];
                                if s == 1 {
                                    let out = &mut dst[base + zlo - p..base + zhi - p];
                                    for (o, &v) in out.iter_mut().zip(&line[zlo..zhi]) {
                                        *o += v;
                                    }
                                } else {
                                    for (oz, &v) in line.iter().enumerate().take(zhi).skip(zlo) {
                                        dst[base + oz * s - p] += v;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

fn glorot<T: Scalar>(rng: &mut impl Rng, len: usize, fan_in: usize, fan_out: usize) -> Vec<T> {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    (0..len)
        .map(|_| T::from_f64(rng.random_range(-limit..limit)))
        .collect()
}

/// Gradients of one layer's parameters (and optionally its input).
#[derive(Debug, Clone)]
pub struct LayerGrads<T> {
    pub input: Option<Tensor4<T>>,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

/// Strided 3D convolution (cross-correlation); weights are `[cout][cin][k][k][k]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv3d<T> {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv3d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let k3 = kernel.pow(3);
        Self {
            name: name.to_string(),
            cin,
            cout,
            kernel,
            stride,
            weights: glorot(rng, cout * cin * k3, cin * k3, cout * k3),
            bias: vec![T::ZERO; cout],
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.kernel.pow(3)
    }

    /// Shape for the direct kernel when this layer qualifies.
    fn direct(&self, input: &Tensor4<T>) -> Option<Shape> {
        (self.stride == 1 && self.cout <= DIRECT_COUT && direct::supported_kernel(self.kernel)).then(|| Shape {
            dims: input.spatial(),
            cin: self.cin,
            cout: self.cout,
            k: self.kernel,
        })
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        Geometry::conv(input, self.kernel, self.stride).small
    }

    fn check(&self, input: &Tensor4<T>) -> Result<Geometry> {
        if input.channels() != self.cin {
            return Err(Error::shape(
                &self.name,
                format!("expected {} input channels, got {}", self.cin, input.channels()),
            ));
        }
        if self.weights.len() != self.cout * self.rows() || self.bias.len() != self.cout {
            return Err(Error::shape(&self.name, "parameter length does not match layer shape"));
        }
        Ok(Geometry::conv(input.spatial(), self.kernel, self.stride))
    }

    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let geo = self.check(input)?;
        let [ox, oy, oz] = geo.small;
        let vol = geo.small_voxels();
        let mut out = Tensor4::zeros([self.cout, ox, oy, oz]);
        for (co, chunk) in out.data_mut().chunks_mut(vol).enumerate() {
            chunk.fill(self.bias[co]);
        }
        if let Some(lines) = self.direct(input) {
            direct::forward(lines, input.data(), &self.weights, out.data_mut());
            return Ok(out);
        }
        let rows = self.rows();
        let planes = geo.slab_planes(rows);
        let mut col = vec![T::ZERO; rows * planes * geo.small_plane()];
        let mut x0 = 0;
        while x0 < ox {
            let x1 = (x0 + planes).min(ox);
            let n = (x1 - x0) * geo.small_plane();
            geo.im2col(input.data(), self.cin, x0, x1, &mut col);
            // SAFETY: shapes follow from the geometry; `out` rows are channel volumes.
            unsafe {
                T::gemm(
                    self.cout,
                    rows,
                    n,
                    T::ONE,
                    self.weights.as_ptr(),
                    rows as isize,
                    1,
                    col.as_ptr(),
                    n as isize,
                    1,
                    T::ONE,
                    out.data_mut().as_mut_ptr().add(x0 * geo.small_plane()),
                    vol as isize,
                    1,
                );
            }
            x0 = x1;
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor4<T>, grad_out: &Tensor4<T>, need_input: bool) -> Result<LayerGrads<T>> {
        let geo = self.check(input)?;
        if grad_out.dims() != [self.cout, geo.small[0], geo.small[1], geo.small[2]] {
            return Err(Error::shape(
                &self.name,
                format!("gradient dims {:?} do not match output", grad_out.dims()),
            ));
        }
        let vol = geo.small_voxels();
        let rows = self.rows();
        let mut gw = vec![T::ZERO; self.weights.len()];
        let gb: Vec<T> = grad_out
            .data()
            .chunks(vol)
            .map(|c| c.iter().fold(T::ZERO, |a, &b| a + b))
            .collect();
        let mut gin = need_input.then(|| Tensor4::<T>::zeros(input.dims()));
        if let Some(lines) = self.direct(input) {
            direct::grad_weights(lines, input.data(), grad_out.data(), &mut gw);
            if let Some(gin) = gin.as_mut() {
                direct::grad_input(lines, grad_out.data(), &self.weights, gin.data_mut());
            }
            return Ok(LayerGrads { input: gin, weights: gw, bias: gb });
        }
        let planes = geo.slab_planes(rows);
        let mut col = vec![T::ZERO; rows * planes * geo.small_plane()];
        let mut x0 = 0;
        while x0 < geo.small[0] {
            let x1 = (x0 + planes).min(geo.small[0]);
            let n = (x1 - x0) * geo.small_plane();
            let gout = unsafe { grad_out.data().as_ptr().add(x0 * geo.small_plane()) };
            geo.im2col(input.data(), self.cin, x0, x1, &mut col);
            unsafe {
                // dW += dY * col^T
                T::gemm(self.cout, n, rows, T::ONE, gout, vol as isize, 1, col.as_ptr(), 1, n as isize, T::ONE, gw.as_mut_ptr(), rows as isize, 1);
            }
            if let Some(gin) = gin.as_mut() {
                unsafe {
                    // dcol = W^T * dY
                    T::gemm(rows, self.cout, n, T::ONE, self.weights.as_ptr(), 1, rows as isize, gout, vol as isize, 1, T::ZERO, col.as_mut_ptr(), n as isize, 1);
                }
                geo.col2im(&col, self.cin, x0, x1, gin.data_mut());
            }
            x0 = x1;
        }
        Ok(LayerGrads { input: gin, weights: gw, bias: gb })
    }
}

/// Transposed 3D convolution, the adjoint of [`Conv3d`] with the same kernel.
///
/// Weights are `[cin][cout][k][k][k]`: the layout of a convolution mapping
/// `cout` channels on the large grid to `cin` channels on the small grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Deconv3d<T> {
    pub name: String,
    pub cin: usize,
    pub cout: usize,
    pub kernel: usize,
    pub stride: usize,
    pub weights: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Deconv3d<T> {
    pub fn new(name: &str, cin: usize, cout: usize, kernel: usize, stride: usize, rng: &mut impl Rng) -> Self {
        assert!(kernel % 2 == 1, "kernel size must be odd");
        let k3 = kernel.pow(3);
        Self {
            name: name.to_string(),
            cin,
            cout,
            kernel,
            stride,
            weights: glorot(rng, cin * cout * k3, cin * k3, cout * k3),
            bias: vec![T::ZERO; cout],
        }
    }

    fn cols(&self) -> usize {
        self.cout * self.kernel.pow(3)
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        input.map(|d| d * self.stride)
    }

    fn check(&self, input: &Tensor4<T>) -> Result<Geometry> {
        if input.channels() != self.cin {
            return Err(Error::shape(
                &self.name,
                format!("expected {} input channels, got {}", self.cin, input.channels()),
            ));
        }
        if self.weights.len() != self.cin * self.cols() || self.bias.len() != self.cout {
            return Err(Error::shape(&self.name, "parameter length does not match layer shape"));
        }
        Ok(Geometry::deconv(input.spatial(), self.kernel, self.stride))
    }

    pub fn forward(&self, input: &Tensor4<T>) -> Result<Tensor4<T>> {
        let geo = self.check(input)?;
        let [bx, by, bz] = geo.big;
        let vin = geo.small_voxels();
        let mut out = Tensor4::zeros([self.cout, bx, by, bz]);
        let rows = self.cols();
        let planes = geo.slab_planes(rows);
        let mut col = vec![T::ZERO; rows * planes * geo.small_plane()];
        let mut x0 = 0;
        while x0 < geo.small[0] {
            let x1 = (x0 + planes).min(geo.small[0]);
            let n = (x1 - x0) * geo.small_plane();
            unsafe {
                // col = W^T * X
                T::gemm(rows, self.cin, n, T::ONE, self.weights.as_ptr(), 1, rows as isize, input.data().as_ptr().add(x0 * geo.small_plane()), vin as isize, 1, T::ZERO, col.as_mut_ptr(), n as isize, 1);
            }
            geo.col2im(&col, self.cout, x0, x1, out.data_mut());
            x0 = x1;
        }
        let vout = geo.big_voxels();
        for (co, chunk) in out.data_mut().chunks_mut(vout).enumerate() {
            let b = self.bias[co];
            chunk.iter_mut().for_each(|v| *v += b);
        }
        Ok(out)
    }

    pub fn backward(&self, input: &Tensor4<T>, grad_out: &Tensor4<T>, need_input: bool) -> Result<LayerGrads<T>> {
        let geo = self.check(input)?;
        if grad_out.dims() != [self.cout, geo.big[0], geo.big[1], geo.big[2]] {
            return Err(Error::shape(
                &self.name,
                format!("gradient dims {:?} do not match output", grad_out.dims()),
            ));
        }
        let vin = geo.small_voxels();
        let rows = self.cols();
        let mut gw = vec![T::ZERO; self.weights.len()];
        let gb: Vec<T> = grad_out
            .data()
            .chunks(geo.big_voxels())
            .map(|c| c.iter().fold(T::ZERO, |a, &b| a + b))
            .collect();
        let mut gin = need_input.then(|| Tensor4::<T>::zeros(input.dims()));
        let planes = geo.slab_planes(rows);
        let mut col = vec![T::ZERO; rows * planes * geo.small_plane()];
        let mut x0 = 0;
        while x0 < geo.small[0] {
            let x1 = (x0 + planes).min(geo.small[0]);
            let n = (x1 - x0) * geo.small_plane();
            geo.im2col(grad_out.data(), self.cout, x0, x1, &mut col);
            let xin = unsafe { input.data().as_ptr().add(x0 * geo.small_plane()) };
            unsafe {
                // dW += X * col^T
                T::gemm(self.cin, n, rows, T::ONE, xin, vin as isize, 1, col.as_ptr(), 1, n as isize, T::ONE, gw.as_mut_ptr(), rows as isize, 1);
            }
            if let Some(gin) = gin.as_mut() {
                unsafe {
                    // dX = W * col
                    T::gemm(self.cin, rows, n, T::ONE, self.weights.as_ptr(), rows as isize, 1, col.as_ptr(), n as isize, 1, T::ZERO, gin.data_mut().as_mut_ptr().add(x0 * geo.small_plane()), vin as isize, 1);
                }
            }
            x0 = x1;
        }
        Ok(LayerGrads { input: gin, weights: gw, bias: gb })
    }
}
