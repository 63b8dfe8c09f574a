//! Direct stride-1 convolution kernels for layers with few output channels.
//!
//! With only a handful of output channels the im2col matrix product is
//! starved on one dimension. These kernels work on a zero-padded copy of the
//! input and keep small register tiles of accumulators while sweeping input
//! channels and taps. Each kernel is compiled for AVX-512, AVX2 and a
//! baseline, picked at runtime; all use fused multiply-add so the three give
//! identical results.

use super::tensor::Scalar;

const LANES: usize = 16;
const BLOCK: usize = 4;
/// z-runs per forward tile.
const RUNS: usize = 2;
const ZSTEP: usize = LANES * RUNS;

/// Kernel sizes with a specialised implementation.
pub(crate) fn supported_kernel(k: usize) -> bool {
    matches!(k, 1 | 3 | 5)
}

#[inline(always)]
fn lanes<T: Scalar>(s: &[T], at: usize) -> &[T; LANES] {
    s[at..at + LANES].try_into().unwrap()
}

#[inline(always)]
fn fma<T: Scalar>(acc: &mut [T; LANES], a: &[T; LANES], b: &[T; LANES]) {
    for l in 0..LANES {
        acc[l] = a[l].mul_add(b[l], acc[l]);
    }
}

#[inline(always)]
fn fma_scalar<T: Scalar>(acc: &mut [T; LANES], w: T, v: &[T; LANES]) {
    for l in 0..LANES {
        acc[l] = v[l].mul_add(w, acc[l]);
    }
}

/// Stride-1 "same" convolution shape.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Shape {
    pub dims: [usize; 3],
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
}

impl Shape {
    fn zr(&self) -> usize {
        self.dims[2].div_ceil(ZSTEP) * ZSTEP
    }

    fn padded(&self) -> [usize; 3] {
        let p = self.k - 1;
        [self.dims[0] + p, self.dims[1] + p, self.zr() + p]
    }

    fn padded_vol(&self) -> usize {
        self.padded().iter().product()
    }

    fn vol(&self) -> usize {
        self.dims.iter().product()
    }

    fn blocks(&self) -> usize {
        self.cout.div_ceil(BLOCK)
    }
}

/// Copy channels into the padded layout: `k / 2` zeros before each axis,
/// zeros after, z rounded up to whole tiles.
fn pad<T: Scalar>(s: &Shape, src: &[T], ch: usize) -> Vec<T> {
    let [nx, ny, nz] = s.dims;
    let [px, py, pz] = s.padded();
    let h = s.k / 2;
    let mut out = vec![T::ZERO; ch * px * py * pz];
    for c in 0..ch {
        for x in 0..nx {
            for y in 0..ny {
                let from = ((c * nx + x) * ny + y) * nz;
                let to = ((c * px + x + h) * py + y + h) * pz + h;
                out[to..to + nz].copy_from_slice(&src[from..from + nz]);
            }
        }
    }
    out
}

/// Output channels grouped in blocks: `[block][ci][tap][channel-in-block]`.
fn block_weights<T: Scalar>(s: &Shape, weights: &[T]) -> Vec<T> {
    let k3 = s.k.pow(3);
    let mut out = vec![T::ZERO; s.blocks() * s.cin * k3 * BLOCK];
    for co in 0..s.cout {
        let (b, l) = (co / BLOCK, co % BLOCK);
        for ci in 0..s.cin {
            for t in 0..k3 {
                out[((b * s.cin + ci) * k3 + t) * BLOCK + l] = weights[(co * s.cin + ci) * k3 + t];
            }
        }
    }
    out
}

/// Gradient rows as `[block][x][y][channel-in-block][zr]`, zero beyond nz.
fn block_grad<T: Scalar>(s: &Shape, grad: &[T]) -> Vec<T> {
    let [nx, ny, nz] = s.dims;
    let zr = s.zr();
    let row_len = BLOCK * zr;
    let mut out = vec![T::ZERO; s.blocks() * nx * ny * row_len];
    for co in 0..s.cout {
        let (b, j) = (co / BLOCK, co % BLOCK);
        for x in 0..nx {
            for y in 0..ny {
                let from = ((co * nx + x) * ny + y) * nz;
                let to = ((b * nx + x) * ny + y) * row_len + j * zr;
                out[to..to + nz].copy_from_slice(&grad[from..from + nz]);
            }
        }
    }
    out
}

#[inline(always)]
fn forward_impl<T: Scalar, const K: usize>(s: Shape, padded: &[T], wb: &[T], out: &mut [T]) {
    let [nx, ny, nz] = s.dims;
    let [_, py, pz] = s.padded();
    let pplane = py * pz;
    let pvol = s.padded_vol();
    let k3 = K * K * K;
    let vol = s.vol();
    let wlen = s.cin * k3 * BLOCK;
    for b in 0..s.blocks() {
        let wblock = &wb[b * wlen..(b + 1) * wlen];
        for x in 0..nx {
            for y in 0..ny {
                for z0 in (0..nz).step_by(ZSTEP) {
                    let mut acc = [[[T::ZERO; LANES]; RUNS]; BLOCK];
                    for ci in 0..s.cin {
                        let chan = &padded[ci * pvol..(ci + 1) * pvol];
                        let wc = &wblock[ci * k3 * BLOCK..(ci + 1) * k3 * BLOCK];
                        for a in 0..K {
                            for bb in 0..K {
                                let row = (x + a) * pplane + (y + bb) * pz + z0;
                                let run = &chan[row..row + ZSTEP + K - 1];
                                let wt = &wc[(a * K + bb) * K * BLOCK..(a * K + bb + 1) * K * BLOCK];
                                for c in 0..K {
                                    let w: &[T; BLOCK] = wt[c * BLOCK..(c + 1) * BLOCK].try_into().unwrap();
                                    for r in 0..RUNS {
                                        let v = lanes(run, c + r * LANES);
                                        for j in 0..BLOCK {
                                            fma_scalar(&mut acc[j][r], w[j], v);
                                        }
                                    }
                                }
                            }
                        }
                    }
                    let len = ZSTEP.min(nz - z0);
                    for (j, a) in acc.iter().enumerate() {
                        let co = b * BLOCK + j;
                        if co >= s.cout {
                            break;
                        }
                        let at = co * vol + (x * ny + y) * nz + z0;
                        for (o, &v) in out[at..at + len].iter_mut().zip(a.iter().flatten()) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// `gw[co][ci][tap] += sum_v grad[co][v] * input[ci][v + tap - k/2]`.
#[inline(always)]
fn grad_weights_impl<T: Scalar, const K: usize>(s: Shape, padded: &[T], gb: &[T], gw: &mut [T]) {
    let [nx, ny, _] = s.dims;
    let [_, py, pz] = s.padded();
    let zr = s.zr();
    let pplane = py * pz;
    let pvol = s.padded_vol();
    let k3 = K * K * K;
    let row_len = BLOCK * zr;
    for b in 0..s.blocks() {
        let gblock = &gb[b * nx * ny * row_len..(b + 1) * nx * ny * row_len];
        for x in 0..nx {
            for ci in 0..s.cin {
                let chan = &padded[ci * pvol..(ci + 1) * pvol];
                for a in 0..K {
                    for bb in 0..K {
                        let mut acc = [[[T::ZERO; LANES]; K]; BLOCK];
                        for y in 0..ny {
                            let row = (x + a) * pplane + (y + bb) * pz;
                            let grow = &gblock[(x * ny + y) * row_len..(x * ny + y + 1) * row_len];
                            for z0 in (0..zr).step_by(LANES) {
                                let g: [&[T; LANES]; BLOCK] = std::array::from_fn(|j| lanes(grow, j * zr + z0));
                                for c in 0..K {
                                    let v = lanes(chan, row + z0 + c);
                                    for j in 0..BLOCK {
                                        fma(&mut acc[j][c], v, g[j]);
                                    }
                                }
                            }
                        }
                        for (j, acc) in acc.iter().enumerate() {
                            let co = b * BLOCK + j;
                            if co >= s.cout {
                                break;
                            }
                            for (c, lane) in acc.iter().enumerate() {
                                let mut sum = T::ZERO;
                                for &v in lane {
                                    sum += v;
                                }
                                gw[(co * s.cin + ci) * k3 + (a * K + bb) * K + c] += sum;
                            }
                        }
                    }
                }
            }
        }
    }
}

macro_rules! multiversion {
    ($name:ident, $impl:ident) => {
        fn $name<T: Scalar, const K: usize>(s: Shape, a: &[T], b: &[T], c: &mut [T]) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f,fma")]
                unsafe fn avx512<T: Scalar, const K: usize>(s: Shape, a: &[T], b: &[T], c: &mut [T]) {
                    $impl::<T, K>(s, a, b, c)
                }
                #[target_feature(enable = "avx2,fma")]
                unsafe fn avx2<T: Scalar, const K: usize>(s: Shape, a: &[T], b: &[T], c: &mut [T]) {
                    $impl::<T, K>(s, a, b, c)
                }
                if std::is_x86_feature_detected!("avx512f") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: features checked above.
                    return unsafe { avx512::<T, K>(s, a, b, c) };
                }
                if std::is_x86_feature_detected!("avx2") && std::is_x86_feature_detected!("fma") {
                    // SAFETY: features checked above.
                    return unsafe { avx2::<T, K>(s, a, b, c) };
                }
            }
            $impl::<T, K>(s, a, b, c)
        }
    };
}

multiversion!(forward_mv, forward_impl);
multiversion!(grad_weights_mv, grad_weights_impl);

type Kernel<T> = fn(Shape, &[T], &[T], &mut [T]);

fn by_kernel<T: Scalar>(s: Shape, a: &[T], b: &[T], c: &mut [T], kernels: [Kernel<T>; 3]) {
    match s.k {
        1 => kernels[0](s, a, b, c),
        3 => kernels[1](s, a, b, c),
        5 => kernels[2](s, a, b, c),
        k => panic!("no direct kernel for size {k}"),
    }
}

/// Accumulate the convolution of `input` into `out` (bias not included).
pub(crate) fn forward<T: Scalar>(s: Shape, input: &[T], weights: &[T], out: &mut [T]) {
    let padded = pad(&s, input, s.cin);
    let wb = block_weights(&s, weights);
    by_kernel(s, &padded, &wb, out, [forward_mv::<T, 1>, forward_mv::<T, 3>, forward_mv::<T, 5>]);
}

pub(crate) fn grad_weights<T: Scalar>(s: Shape, input: &[T], grad_out: &[T], gw: &mut [T]) {
    let padded = pad(&s, input, s.cin);
    let gb = block_grad(&s, grad_out);
    by_kernel(s, &padded, &gb, gw, [grad_weights_mv::<T, 1>, grad_weights_mv::<T, 3>, grad_weights_mv::<T, 5>]);
}

/// Accumulate the input gradient: a convolution of `grad_out` with the
/// kernel flipped on every axis and input/output channels swapped.
pub(crate) fn grad_input<T: Scalar>(s: Shape, grad_out: &[T], weights: &[T], gin: &mut [T]) {
    let k3 = s.k.pow(3);
    let swapped = Shape { cin: s.cout, cout: s.cin, ..s };
    let mut flipped = vec![T::ZERO; weights.len()];
    for co in 0..s.cout {
        for ci in 0..s.cin {
            for t in 0..k3 {
                flipped[(ci * s.cout + co) * k3 + (k3 - 1 - t)] = weights[(co * s.cin + ci) * k3 + t];
            }
        }
    }
    forward(swapped, grad_out, &flipped, gin);
}
