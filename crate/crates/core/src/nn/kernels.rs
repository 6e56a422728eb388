//! Raw loops behind the tape primitives.

use rayon::prelude::*;

use super::Real;

#[inline]
pub(crate) fn axpy<F: Real>(out: &mut [F], a: F, x: &[F]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += a * v;
    }
}

#[inline]
pub(crate) fn dot<F: Real>(a: &[F], b: &[F]) -> F {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [F::zero(); 8];
    let chunks = n / 8;
    for c in 0..chunks {
        let (xa, xb) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += xa[l] * xb[l];
        }
    }
    let mut tail = F::zero();
    for i in chunks * 8..n {
        tail += a[i] * b[i];
    }
    let s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    s + tail
}

/// Geometry of a stride-1 2-D cross-correlation.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad_top: usize,
    pub pad_left: usize,
    pub hout: usize,
    pub wout: usize,
}

impl ConvGeom {
    /// Output column range `[j0, j1)` touched by kernel column `v`, and the
    /// matching first input column.
    #[inline]
    fn cols(&self, v: usize) -> Option<(usize, usize, usize)> {
        let j0 = self.pad_left.saturating_sub(v);
        let j1 = (self.w + self.pad_left).saturating_sub(v).min(self.wout);
        if j0 >= j1 {
            return None;
        }
        Some((j0, j1, j0 + v - self.pad_left))
    }

    #[inline]
    fn row(&self, i: usize, u: usize) -> Option<usize> {
        let r = (i + u).checked_sub(self.pad_top)?;
        (r < self.h).then_some(r)
    }
}

pub(crate) fn conv2d_forward<F: Real>(g: &ConvGeom, input: &[F], kernel: &[F], bias: Option<&[F]>) -> Vec<F> {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.hout * g.wout;
    let mut out = vec![F::zero(); g.batch * out_img];
    out.par_chunks_mut(out_img).zip(input.par_chunks(in_img)).for_each(|(out_b, in_b)| {
        for o in 0..g.cout {
            let plane = &mut out_b[o * g.hout * g.wout..(o + 1) * g.hout * g.wout];
            if let Some(b) = bias {
                plane.iter_mut().for_each(|x| *x = b[o]);
            }
            for c in 0..g.cin {
                let in_plane = &in_b[c * g.h * g.w..(c + 1) * g.h * g.w];
                for u in 0..g.kh {
                    for i in 0..g.hout {
                        let Some(r) = g.row(i, u) else { continue };
                        let out_row = &mut plane[i * g.wout..(i + 1) * g.wout];
                        let in_row = &in_plane[r * g.w..(r + 1) * g.w];
                        for v in 0..g.kw {
                            let Some((j0, j1, s)) = g.cols(v) else { continue };
                            let kv = kernel[((o * g.cin + c) * g.kh + u) * g.kw + v];
                            axpy(&mut out_row[j0..j1], kv, &in_row[s..s + (j1 - j0)]);
                        }
                    }
                }
            }
        }
    });
    out
}

/// Returns `(grad_input, grad_kernel, grad_bias)`; `grad_input` is skipped
/// when the input does not need it.
pub(crate) fn conv2d_backward<F: Real>(
    g: &ConvGeom,
    input: &[F],
    kernel: &[F],
    gout: &[F],
    want_input: bool,
) -> (Option<Vec<F>>, Vec<F>, Vec<F>) {
    let in_img = g.cin * g.h * g.w;
    let out_img = g.cout * g.hout * g.wout;
    let klen = kernel.len();

    // Per-image partial kernel gradients, reduced below in batch order so the
    // result does not depend on thread scheduling.
    let partials: Vec<(Vec<F>, Option<Vec<F>>)> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let in_b = &input[b * in_img..(b + 1) * in_img];
            let go_b = &gout[b * out_img..(b + 1) * out_img];
            let mut gk = vec![F::zero(); klen];
            let mut gi = want_input.then(|| vec![F::zero(); in_img]);
            for o in 0..g.cout {
                let plane = &go_b[o * g.hout * g.wout..(o + 1) * g.hout * g.wout];
                for c in 0..g.cin {
                    let in_plane = &in_b[c * g.h * g.w..(c + 1) * g.h * g.w];
                    for u in 0..g.kh {
                        for i in 0..g.hout {
                            let Some(r) = g.row(i, u) else { continue };
                            let go_row = &plane[i * g.wout..(i + 1) * g.wout];
                            let in_row = &in_plane[r * g.w..(r + 1) * g.w];
                            for v in 0..g.kw {
                                let Some((j0, j1, s)) = g.cols(v) else { continue };
                                let ki = ((o * g.cin + c) * g.kh + u) * g.kw + v;
                                gk[ki] += dot(&go_row[j0..j1], &in_row[s..s + (j1 - j0)]);
                                if let Some(gi) = gi.as_mut() {
                                    let base = c * g.h * g.w + r * g.w + s;
                                    axpy(&mut gi[base..base + (j1 - j0)], kernel[ki], &go_row[j0..j1]);
                                }
                            }
                        }
                    }
                }
            }
            (gk, gi)
        })
        .collect();

    let mut grad_kernel = vec![F::zero(); klen];
    let mut grad_input = want_input.then(|| Vec::with_capacity(g.batch * in_img));
    for (gk, gi) in partials {
        grad_kernel.iter_mut().zip(&gk).for_each(|(a, &b)| *a += b);
        if let (Some(acc), Some(gi)) = (grad_input.as_mut(), gi) {
            acc.extend_from_slice(&gi);
        }
    }
    let mut grad_bias = vec![F::zero(); g.cout];
    for b in 0..g.batch {
        for (o, gb) in grad_bias.iter_mut().enumerate() {
            let start = b * out_img + o * g.hout * g.wout;
            *gb += gout[start..start + g.hout * g.wout].iter().copied().sum::<F>();
        }
    }
    (grad_input, grad_kernel, grad_bias)
}
