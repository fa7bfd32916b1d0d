//! Direct-loop 2-D convolution over `[batch, channels, height, width]` tensors.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

/// Static geometry of one convolution application.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Geometry {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub f: usize,
    pub k: usize,
    pub stride: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub oh: usize,
    pub ow: usize,
}

/// Output size and leading padding for one spatial axis, following the usual
/// `same`/`valid` conventions (`same` pads so that `out = ceil(n / stride)`,
/// extra padding going to the trailing edge).
pub(crate) fn axis(n: usize, k: usize, stride: usize, padding: Padding) -> Option<(usize, usize)> {
    match padding {
        Padding::Same => {
            let out = n.div_ceil(stride);
            let total = ((out - 1) * stride + k).saturating_sub(n);
            Some((out, total / 2))
        }
        Padding::Valid => {
            if n < k {
                None
            } else {
                Some(((n - k) / stride + 1, 0))
            }
        }
    }
}

impl Geometry {
    #[inline]
    fn in_index(&self, c: usize, y: usize, x: usize) -> usize {
        (c * self.h + y) * self.w + x
    }

    /// Maps output row `oy` and kernel row `ky` onto an input row, if inside.
    #[inline]
    fn src(&self, o: usize, kk: usize, pad: usize, n: usize) -> Option<usize> {
        let p = (o * self.stride + kk) as isize - pad as isize;
        (p >= 0 && (p as usize) < n).then_some(p as usize)
    }
}

pub(crate) fn forward(geo: &Geometry, x: &[f64], batch: usize, filters: &[f64], bias: &[f64], out: &mut [f64]) {
    let in_sz = geo.c_in * geo.h * geo.w;
    let out_sz = geo.f * geo.oh * geo.ow;
    let k = geo.k;
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let ob = &mut out[b * out_sz..(b + 1) * out_sz];
        for f in 0..geo.f {
            let wf = &filters[f * geo.c_in * k * k..(f + 1) * geo.c_in * k * k];
            for oy in 0..geo.oh {
                for ox in 0..geo.ow {
                    let mut acc = 0.0;
                    for c in 0..geo.c_in {
                        for ky in 0..k {
                            let Some(iy) = geo.src(oy, ky, geo.pad_top, geo.h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = geo.src(ox, kx, geo.pad_left, geo.w) else { continue };
                                acc += wf[(c * k + ky) * k + kx] * xb[geo.in_index(c, iy, ix)];
                            }
                        }
                    }
                    ob[(f * geo.oh + oy) * geo.ow + ox] = acc + bias[f];
                }
            }
        }
    }
}

/// Accumulates filter/bias gradients and, when `dx` is given, the input gradient.
#[allow(clippy::too_many_arguments)]
pub(crate) fn backward(
    geo: &Geometry,
    x: &[f64],
    g: &[f64],
    batch: usize,
    filters: &[f64],
    dfilters: &mut [f64],
    dbias: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let in_sz = geo.c_in * geo.h * geo.w;
    let out_sz = geo.f * geo.oh * geo.ow;
    let k = geo.k;
    dfilters.iter_mut().for_each(|v| *v = 0.0);
    dbias.iter_mut().for_each(|v| *v = 0.0);
    if let Some(dx) = dx.as_deref_mut() {
        dx.iter_mut().for_each(|v| *v = 0.0);
    }
    for b in 0..batch {
        let xb = &x[b * in_sz..(b + 1) * in_sz];
        let gb = &g[b * out_sz..(b + 1) * out_sz];
        for f in 0..geo.f {
            let base = f * geo.c_in * k * k;
            for oy in 0..geo.oh {
                for ox in 0..geo.ow {
                    let go = gb[(f * geo.oh + oy) * geo.ow + ox];
                    if go == 0.0 {
                        continue;
                    }
                    dbias[f] += go;
                    for c in 0..geo.c_in {
                        for ky in 0..k {
                            let Some(iy) = geo.src(oy, ky, geo.pad_top, geo.h) else { continue };
                            for kx in 0..k {
                                let Some(ix) = geo.src(ox, kx, geo.pad_left, geo.w) else { continue };
                                let wi = base + (c * k + ky) * k + kx;
                                let xi = geo.in_index(c, iy, ix);
                                dfilters[wi] += go * xb[xi];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[b * in_sz + xi] += go * filters[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
