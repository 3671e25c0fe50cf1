//! Forward and adjoint kernels for the dense primitives on the tape.

/// Geometry of a 2D convolution over `(H, W, C)` buffers with a
/// `(K, K, C_in, C_out)` kernel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub h: usize,
    pub w: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    #[inline]
    fn tap(&self, o: usize, kk: usize, limit: usize) -> Option<usize> {
        let i = (o * self.stride + kk) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < limit).then_some(i as usize)
    }
}

pub fn conv2d(x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut y = vec![0.0; ho * wo * g.c_out];
    for oy in 0..ho {
        for ox in 0..wo {
            let out = &mut y[(oy * wo + ox) * g.c_out..][..g.c_out];
            for ky in 0..g.k {
                let Some(iy) = g.tap(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.tap(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.c_in..][..g.c_in];
                    let wbase = (ky * g.k + kx) * g.c_in * g.c_out;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let wrow = &w[wbase + ci * g.c_out..][..g.c_out];
                        for (o, &wv) in out.iter_mut().zip(wrow) {
                            *o += xv * wv;
                        }
                    }
                }
            }
        }
    }
    y
}

/// Adjoint of [`conv2d`] with respect to its input.
pub fn conv2d_input_adjoint(gy: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut gx = vec![0.0; g.h * g.w * g.c_in];
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &gy[(oy * wo + ox) * g.c_out..][..g.c_out];
            for ky in 0..g.k {
                let Some(iy) = g.tap(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.tap(ox, kx, g.w) else { continue };
                    let gxin = &mut gx[(iy * g.w + ix) * g.c_in..][..g.c_in];
                    let wbase = (ky * g.k + kx) * g.c_in * g.c_out;
                    for (ci, slot) in gxin.iter_mut().enumerate() {
                        let wrow = &w[wbase + ci * g.c_out..][..g.c_out];
                        *slot += wrow.iter().zip(go).map(|(a, b)| a * b).sum::<f64>();
                    }
                }
            }
        }
    }
    gx
}

/// Adjoint of [`conv2d`] with respect to its kernel.
pub fn conv2d_weight_adjoint(x: &[f64], gy: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut gw = vec![0.0; g.k * g.k * g.c_in * g.c_out];
    for oy in 0..ho {
        for ox in 0..wo {
            let go = &gy[(oy * wo + ox) * g.c_out..][..g.c_out];
            for ky in 0..g.k {
                let Some(iy) = g.tap(oy, ky, g.h) else { continue };
                for kx in 0..g.k {
                    let Some(ix) = g.tap(ox, kx, g.w) else { continue };
                    let xin = &x[(iy * g.w + ix) * g.c_in..][..g.c_in];
                    let wbase = (ky * g.k + kx) * g.c_in * g.c_out;
                    for (ci, &xv) in xin.iter().enumerate() {
                        if xv == 0.0 {
                            continue;
                        }
                        let grow = &mut gw[wbase + ci * g.c_out..][..g.c_out];
                        for (s, &gv) in grow.iter_mut().zip(go) {
                            *s += xv * gv;
                        }
                    }
                }
            }
        }
    }
    gw
}

/// `(m, k) × (k, n)` or, with `trans_b`, `(m, k) × (n, k)ᵀ`.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, trans_b: bool) -> Vec<f64> {
    let mut y = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let yrow = &mut y[i * n..][..n];
        if trans_b {
            for (j, slot) in yrow.iter_mut().enumerate() {
                let brow = &b[j * k..][..k];
                *slot = arow.iter().zip(brow).map(|(p, q)| p * q).sum();
            }
        } else {
            for (p, &av) in arow.iter().enumerate() {
                let brow = &b[p * n..][..n];
                for (slot, &bv) in yrow.iter_mut().zip(brow) {
                    *slot += av * bv;
                }
            }
        }
    }
    y
}

/// `aᵀ · c` for `a: (m, k)`, `c: (m, n)` giving `(k, n)`.
pub fn matmul_at(a: &[f64], c: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; k * n];
    for i in 0..m {
        let arow = &a[i * k..][..k];
        let crow = &c[i * n..][..n];
        for (p, &av) in arow.iter().enumerate() {
            let yrow = &mut y[p * n..][..n];
            for (slot, &cv) in yrow.iter_mut().zip(crow) {
                *slot += av * cv;
            }
        }
    }
    y
}

/// Block-diagonal complex matrix–vector product applied at every bin.
///
/// `z` is `(n_bins, c_in, 2)`, `w` is `(n_blocks, b_out, b_in, 2)`;
/// the result is `(n_bins, n_blocks·b_out, 2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockGeom {
    pub n_bins: usize,
    pub n_blocks: usize,
    pub b_in: usize,
    pub b_out: usize,
}

impl BlockGeom {
    pub fn c_in(&self) -> usize {
        self.n_blocks * self.b_in
    }
    pub fn c_out(&self) -> usize {
        self.n_blocks * self.b_out
    }
}

pub fn block_cmatmul(z: &[f64], w: &[f64], g: BlockGeom) -> Vec<f64> {
    let (ci, co) = (g.c_in(), g.c_out());
    let mut y = vec![0.0; g.n_bins * co * 2];
    for n in 0..g.n_bins {
        let zb = &z[n * ci * 2..][..ci * 2];
        let yb = &mut y[n * co * 2..][..co * 2];
        for blk in 0..g.n_blocks {
            for o in 0..g.b_out {
                let (mut re, mut im) = (0.0, 0.0);
                let wrow = &w[((blk * g.b_out + o) * g.b_in) * 2..][..g.b_in * 2];
                let zin = &zb[blk * g.b_in * 2..][..g.b_in * 2];
                for i in 0..g.b_in {
                    let (wr, wi) = (wrow[2 * i], wrow[2 * i + 1]);
                    let (zr, zi) = (zin[2 * i], zin[2 * i + 1]);
                    re += wr * zr - wi * zi;
                    im += wr * zi + wi * zr;
                }
                let idx = (blk * g.b_out + o) * 2;
                yb[idx] = re;
                yb[idx + 1] = im;
            }
        }
    }
    y
}

/// Adjoints of [`block_cmatmul`]: `(dz, dw)`.
pub fn block_cmatmul_adjoint(z: &[f64], w: &[f64], gy: &[f64], g: BlockGeom) -> (Vec<f64>, Vec<f64>) {
    let (ci, co) = (g.c_in(), g.c_out());
    let mut gz = vec![0.0; z.len()];
    let mut gw = vec![0.0; w.len()];
    for n in 0..g.n_bins {
        let zb = &z[n * ci * 2..][..ci * 2];
        let gyb = &gy[n * co * 2..][..co * 2];
        let gzb = &mut gz[n * ci * 2..][..ci * 2];
        for blk in 0..g.n_blocks {
            for o in 0..g.b_out {
                let idx = (blk * g.b_out + o) * 2;
                let (gr, gi) = (gyb[idx], gyb[idx + 1]);
                let wbase = ((blk * g.b_out + o) * g.b_in) * 2;
                for i in 0..g.b_in {
                    let (wr, wi) = (w[wbase + 2 * i], w[wbase + 2 * i + 1]);
                    let zoff = (blk * g.b_in + i) * 2;
                    let (zr, zi) = (zb[zoff], zb[zoff + 1]);
                    // dz += conj(w)·g ; dw += conj(z)·g
                    gzb[zoff] += wr * gr + wi * gi;
                    gzb[zoff + 1] += wr * gi - wi * gr;
                    gw[wbase + 2 * i] += zr * gr + zi * gi;
                    gw[wbase + 2 * i + 1] += zr * gi - zi * gr;
                }
            }
        }
    }
    (gz, gw)
}
