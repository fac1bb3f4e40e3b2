//! 2-D convolution without bias, lowered per sample to im2col + GEMM.
//!
//! Samples are independent in the forward pass and in the input gradient,
//! so those loops run on the rayon pool. The kernel gradient is reduced over
//! samples in index order, which keeps results identical for any thread
//! count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::graph::{Graph, Op, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug)]
struct Geometry {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    padding: usize,
}

impl Geometry {
    fn new(input: &[usize], kernel: &[usize], stride: usize, padding: usize) -> Result<Self> {
        if input.len() != 4 || kernel.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        let (n, cin, h, w) = (input[0], input[1], input[2], input[3]);
        let (cout, kcin, kh, kw) = (kernel[0], kernel[1], kernel[2], kernel[3]);
        if kcin != cin {
            return Err(Error::ShapeMismatch {
                op: "conv2d (input channels)",
                lhs: input.to_vec(),
                rhs: kernel.to_vec(),
            });
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::pre(format!("conv2d kernel extents must be odd, got {kh}x{kw}")));
        }
        if stride == 0 {
            return Err(Error::pre("conv2d stride must be >= 1"));
        }
        let span_h = h + 2 * padding;
        let span_w = w + 2 * padding;
        if span_h < kh || span_w < kw {
            return Err(Error::pre(format!(
                "conv2d output extent would be non-positive ({h}x{w}, pad {padding}, kernel {kh}x{kw})"
            )));
        }
        Ok(Geometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            oh: (span_h - kh) / stride + 1,
            ow: (span_w - kw) / stride + 1,
            stride,
            padding,
        })
    }

    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn out_plane(&self) -> usize {
        self.oh * self.ow
    }

    fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    fn out_sample(&self) -> usize {
        self.cout * self.out_plane()
    }

    /// Source pixel of output (oy, ox) under kernel tap (ki, kj), if inside.
    #[inline]
    fn source(&self, oy: usize, ox: usize, ki: usize, kj: usize) -> Option<(usize, usize)> {
        let y = (oy * self.stride + ki).checked_sub(self.padding)?;
        let x = (ox * self.stride + kj).checked_sub(self.padding)?;
        (y < self.h && x < self.w).then_some((y, x))
    }
}

/// `col[patch, out_plane]` for one sample.
fn im2col(g: &Geometry, x: &[f64], col: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        col[row + oy * g.ow + ox] = match g.source(oy, ox, ki, kj) {
                            Some((y, xx)) => x[(ci * g.h + y) * g.w + xx],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add(g: &Geometry, col: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    for ci in 0..g.cin {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = ((ci * g.kh + ki) * g.kw + kj) * plane;
                for oy in 0..g.oh {
                    for ox in 0..g.ow {
                        if let Some((y, xx)) = g.source(oy, ox, ki, kj) {
                            dx[(ci * g.h + y) * g.w + xx] += col[row + oy * g.ow + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Strided row-major view used to describe GEMM operands.
struct Mat<'a> {
    data: &'a [f64],
    rs: isize,
    cs: isize,
}

/// `c = a(m×k) · b(k×n) + beta·c`, with `c` row-major and contiguous.
fn gemm(m: usize, k: usize, n: usize, a: Mat, b: Mat, beta: f64, c: &mut [f64]) {
    assert!(c.len() >= m * n);
    assert!(a.data.len() >= m * k && b.data.len() >= k * n);
    // SAFETY: operand extents were checked above and strides describe
    // in-bounds views of those slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    padding: usize,
) -> Result<Tensor> {
    let g = Geometry::new(input.shape(), kernel.shape(), stride, padding)?;
    let mut out = vec![0.0; g.n * g.out_sample()];
    let (patch, plane) = (g.patch(), g.out_plane());
    let k = kernel.data();
    out.par_chunks_mut(g.out_sample())
        .zip(input.data().par_chunks(g.in_sample()))
        .for_each(|(o, x)| {
            let mut col = vec![0.0; patch * plane];
            im2col(&g, x, &mut col);
            let a = Mat {
                data: k,
                rs: patch as isize,
                cs: 1,
            };
            let b = Mat {
                data: &col,
                rs: plane as isize,
                cs: 1,
            };
            gemm(g.cout, patch, plane, a, b, 0.0, o);
        });
    Tensor::from_vec(&[g.n, g.cout, g.oh, g.ow], out)
}

/// Returns `(d input, d kernel)`.
pub fn conv2d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &[f64],
    stride: usize,
    padding: usize,
) -> (Vec<f64>, Vec<f64>) {
    let g = Geometry::new(input.shape(), kernel.shape(), stride, padding)
        .expect("geometry validated in forward");
    let (patch, plane) = (g.patch(), g.out_plane());
    let k = kernel.data();

    let mut dx = vec![0.0; input.numel()];
    dx.par_chunks_mut(g.in_sample())
        .zip(grad_out.par_chunks(g.out_sample()))
        .for_each(|(dxs, go)| {
            let mut dcol = vec![0.0; patch * plane];
            // kernelᵀ (patch × cout) · grad_out (cout × plane)
            let a = Mat {
                data: k,
                rs: 1,
                cs: patch as isize,
            };
            let b = Mat {
                data: go,
                rs: plane as isize,
                cs: 1,
            };
            gemm(patch, g.cout, plane, a, b, 0.0, &mut dcol);
            col2im_add(&g, &dcol, dxs);
        });

    let mut dk = vec![0.0; kernel.numel()];
    let mut col = vec![0.0; patch * plane];
    for (x, go) in input
        .data()
        .chunks(g.in_sample())
        .zip(grad_out.chunks(g.out_sample()))
    {
        im2col(&g, x, &mut col);
        // grad_out (cout × plane) · colᵀ (plane × patch)
        let a = Mat {
            data: go,
            rs: plane as isize,
            cs: 1,
        };
        let b = Mat {
            data: &col,
            rs: 1,
            cs: plane as isize,
        };
        gemm(g.cout, plane, patch, a, b, 1.0, &mut dk);
    }
    (dx, dk)
}

impl Graph {
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let out = conv2d_forward(self.value(input), self.value(kernel), stride, padding)?;
        Ok(self.push(
            out,
            Op::Conv2d {
                input,
                kernel,
                stride,
                padding,
            },
        ))
    }
}
