//! Separable bilinear interpolation with half-pixel centres (no corner alignment).

#[derive(Clone, Copy, Debug)]
pub(crate) struct Tap {
    pub lo: usize,
    pub hi: usize,
    pub frac: f64,
}

pub(crate) fn taps(in_len: usize, out_len: usize) -> Vec<Tap> {
    let scale = in_len as f64 / out_len as f64;
    (0..out_len)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let lo = (src.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            Tap {
                lo,
                hi,
                frac: if hi == lo { 0.0 } else { src - lo as f64 },
            }
        })
        .collect()
}

/// `planes` independent `h×w` maps upsampled to `th×tw`.
pub(crate) fn forward(input: &[f64], planes: usize, h: usize, w: usize, th: usize, tw: usize) -> Vec<f64> {
    let ys = taps(h, th);
    let xs = taps(w, tw);
    let mut out = vec![0.0; planes * th * tw];
    for p in 0..planes {
        let src = &input[p * h * w..(p + 1) * h * w];
        let dst = &mut out[p * th * tw..(p + 1) * th * tw];
        for (oy, ty) in ys.iter().enumerate() {
            let r0 = &src[ty.lo * w..(ty.lo + 1) * w];
            let r1 = &src[ty.hi * w..(ty.hi + 1) * w];
            for (ox, tx) in xs.iter().enumerate() {
                let top = r0[tx.lo] * (1.0 - tx.frac) + r0[tx.hi] * tx.frac;
                let bottom = r1[tx.lo] * (1.0 - tx.frac) + r1[tx.hi] * tx.frac;
                dst[oy * tw + ox] = top * (1.0 - ty.frac) + bottom * ty.frac;
            }
        }
    }
    out
}

pub(crate) fn backward(grad_out: &[f64], planes: usize, h: usize, w: usize, th: usize, tw: usize, grad_in: &mut [f64]) {
    let ys = taps(h, th);
    let xs = taps(w, tw);
    for p in 0..planes {
        let go = &grad_out[p * th * tw..(p + 1) * th * tw];
        let gi = &mut grad_in[p * h * w..(p + 1) * h * w];
        for (oy, ty) in ys.iter().enumerate() {
            for (ox, tx) in xs.iter().enumerate() {
                let g = go[oy * tw + ox];
                let top = g * (1.0 - ty.frac);
                let bottom = g * ty.frac;
                gi[ty.lo * w + tx.lo] += top * (1.0 - tx.frac);
                gi[ty.lo * w + tx.hi] += top * tx.frac;
                gi[ty.hi * w + tx.lo] += bottom * (1.0 - tx.frac);
                gi[ty.hi * w + tx.hi] += bottom * tx.frac;
            }
        }
    }
}
