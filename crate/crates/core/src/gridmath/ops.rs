//! Differentiable tensor operations.
//!
//! Each op computes its value eagerly and registers a backward closure.
//! Closures recompute whatever intermediates they need from the parent
//! tensors (im2col buffers, argmax positions, softmax normalizers), so
//! the graph captures nothing but op configuration and stays light.
//!
//! Conventions shared by every op here:
//! - layout is N x C x H x W, row-major;
//! - reductions accumulate in f64, values are stored as f32;
//! - ops taking one tensor and no shape constraints return `Tensor`,
//!   everything that can be called with mismatched shapes returns
//!   `Result`.

use crate::error::{Error, Result};
use crate::gridmath::gemm;
use crate::gridmath::scratch;
use crate::gridmath::tensor::{Shape, Tensor};

fn shape_err(op: &str, a: Shape, b: Shape) -> Error {
    Error::Config(format!("{op}: incompatible shapes {a} and {b}"))
}

fn carry_fval(out: &Tensor, v: f64) {
    if out.shape() == Shape::scalar() {
        out.set_fval(v);
    }
}

// ---------------------------------------------------------------------------
// elementwise arithmetic
// ---------------------------------------------------------------------------

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("add", a.shape(), b.shape()));
    }
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x + y)
        .collect();
    let out = Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, ps| {
            ps[0].accumulate_grad(g);
            ps[1].accumulate_grad(g);
        }),
    );
    if a.shape() == Shape::scalar() {
        carry_fval(&out, a.item_f64() + b.item_f64());
    }
    Ok(out)
}

pub fn sub(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("sub", a.shape(), b.shape()));
    }
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x - y)
        .collect();
    let out = Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, ps| {
            ps[0].accumulate_grad(g);
            ps[1].with_grad_mut(|gb| {
                for (o, gi) in gb.iter_mut().zip(g) {
                    *o -= gi;
                }
            });
        }),
    );
    if a.shape() == Shape::scalar() {
        carry_fval(&out, a.item_f64() - b.item_f64());
    }
    Ok(out)
}

pub fn mul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(shape_err("mul", a.shape(), b.shape()));
    }
    let data: Vec<f32> = a
        .data()
        .iter()
        .zip(b.data().iter())
        .map(|(x, y)| x * y)
        .collect();
    let out = Tensor::from_op(
        a.shape(),
        data,
        vec![a.clone(), b.clone()],
        Box::new(|g, ps| {
            if ps[0].requires_grad() {
                let bd = ps[1].data();
                ps[0].with_grad_mut(|ga| {
                    for i in 0..g.len() {
                        ga[i] += g[i] * bd[i];
                    }
                });
            }
            if ps[1].requires_grad() {
                let ad = ps[0].data();
                ps[1].with_grad_mut(|gb| {
                    for i in 0..g.len() {
                        gb[i] += g[i] * ad[i];
                    }
                });
            }
        }),
    );
    if a.shape() == Shape::scalar() {
        carry_fval(&out, a.item_f64() * b.item_f64());
    }
    Ok(out)
}

/// Multiply by a constant. The factor is applied in f64 so loss weights
/// like 1/(L*W*N) do not pick up an extra rounding step.
pub fn scale(x: &Tensor, k: f64) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| (*v as f64 * k) as f32).collect();
    let out = Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(move |g, ps| {
            ps[0].with_grad_mut(|gx| {
                for (o, gi) in gx.iter_mut().zip(g) {
                    *o += (*gi as f64 * k) as f32;
                }
            });
        }),
    );
    if x.shape() == Shape::scalar() {
        carry_fval(&out, x.item_f64() * k);
    }
    out
}

pub fn add_scalar(x: &Tensor, k: f64) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| (*v as f64 + k) as f32).collect();
    let out = Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|g, ps| {
            ps[0].accumulate_grad(g);
        }),
    );
    if x.shape() == Shape::scalar() {
        carry_fval(&out, x.item_f64() + k);
    }
    out
}

pub fn abs(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| v.abs()).collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|g, ps| {
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for i in 0..g.len() {
                    let s = if xd[i] > 0.0 {
                        1.0
                    } else if xd[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    gx[i] += g[i] * s;
                }
            });
        }),
    )
}

pub fn square(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| v * v).collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|g, ps| {
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for i in 0..g.len() {
                    gx[i] += 2.0 * xd[i] * g[i];
                }
            });
        }),
    )
}

/// Elementwise e^x, evaluated in f64.
pub fn exp(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| (*v as f64).exp() as f32).collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|g, ps| {
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for i in 0..g.len() {
                    gx[i] += g[i] * ((xd[i] as f64).exp() as f32);
                }
            });
        }),
    )
}

/// Sum every element into a scalar, accumulating in f64. The exact f64
/// total rides along on the output (see [`Tensor::item_f64`]).
pub fn sum(x: &Tensor) -> Tensor {
    let mut acc = 0.0f64;
    for v in x.data().iter() {
        acc += *v as f64;
    }
    let out = Tensor::from_op(
        Shape::scalar(),
        vec![acc as f32],
        vec![x.clone()],
        Box::new(|g, ps| {
            let g0 = g[0];
            ps[0].with_grad_mut(|gx| {
                for o in gx.iter_mut() {
                    *o += g0;
                }
            });
        }),
    );
    out.set_fval(acc);
    out
}

// ---------------------------------------------------------------------------
// activations
// ---------------------------------------------------------------------------

pub fn leaky_relu(x: &Tensor, slope: f32) -> Tensor {
    let data: Vec<f32> = x
        .data()
        .iter()
        .map(|v| if *v > 0.0 { *v } else { slope * *v })
        .collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(move |g, ps| {
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for i in 0..g.len() {
                    gx[i] += if xd[i] > 0.0 { g[i] } else { slope * g[i] };
                }
            });
        }),
    )
}

const SIGMOID_LO: f64 = 1e-12;
// Largest f32 strictly below one.
const SIGMOID_HI: f64 = 1.0 - 1.0 / (1u64 << 24) as f64;

fn sigmoid_scalar(v: f32) -> f32 {
    let s = 1.0 / (1.0 + (-(v as f64)).exp());
    s.clamp(SIGMOID_LO, SIGMOID_HI) as f32
}

/// Logistic sigmoid, evaluated in f64 and clamped so the f32 result is
/// strictly inside (0, 1) even deep in the saturated tails.
pub fn sigmoid(x: &Tensor) -> Tensor {
    let data: Vec<f32> = x.data().iter().map(|v| sigmoid_scalar(*v)).collect();
    Tensor::from_op(
        x.shape(),
        data,
        vec![x.clone()],
        Box::new(|g, ps| {
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for i in 0..g.len() {
                    let s = sigmoid_scalar(xd[i]);
                    gx[i] += g[i] * s * (1.0 - s);
                }
            });
        }),
    )
}

// ---------------------------------------------------------------------------
// pooling and reductions over axes
// ---------------------------------------------------------------------------

/// Per-channel mean and max over the spatial extent, as a pair of
/// N x C x 1 x 1 tensors.
pub fn pool_channel_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    if s.h * s.w == 0 {
        return Err(Error::Config(format!(
            "pool_channel_stats: empty spatial extent in {s}"
        )));
    }
    Ok((global_avg_pool(x), global_max_pool(x)))
}

/// Per-position mean and max across channels, as a pair of
/// N x 1 x H x W tensors.
pub fn pool_spatial_stats(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let s = x.shape();
    if s.c == 0 {
        return Err(Error::Config(format!(
            "pool_spatial_stats: zero channels in {s}"
        )));
    }
    Ok((channel_mean(x), channel_max(x)))
}

/// Mean over the spatial extent: N x C x H x W -> N x C x 1 x 1.
pub fn global_avg_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.h * s.w;
    let planes = s.n * s.c;
    let mut out = vec![0.0f32; planes];
    {
        let xd = x.data();
        for i in 0..planes {
            let mut acc = 0.0f64;
            for v in &xd[i * hw..(i + 1) * hw] {
                acc += *v as f64;
            }
            out[i] = (acc / hw as f64) as f32;
        }
    }
    Tensor::from_op(
        Shape::new(s.n, s.c, 1, 1),
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            ps[0].with_grad_mut(|gx| {
                for (i, gi) in g.iter().enumerate() {
                    let spread = gi / hw as f32;
                    for o in gx[i * hw..(i + 1) * hw].iter_mut() {
                        *o += spread;
                    }
                }
            });
        }),
    )
}

/// Max over the spatial extent: N x C x H x W -> N x C x 1 x 1.
/// Ties route the gradient to the first maximum in row-major order.
pub fn global_max_pool(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.h * s.w;
    let planes = s.n * s.c;
    let argmax = |plane: &[f32]| -> usize {
        let mut best = 0;
        for (j, v) in plane.iter().enumerate() {
            if *v > plane[best] {
                best = j;
            }
        }
        best
    };
    let mut out = vec![0.0f32; planes];
    {
        let xd = x.data();
        for i in 0..planes {
            let plane = &xd[i * hw..(i + 1) * hw];
            out[i] = plane[argmax(plane)];
        }
    }
    Tensor::from_op(
        Shape::new(s.n, s.c, 1, 1),
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for (i, gi) in g.iter().enumerate() {
                    let plane = &xd[i * hw..(i + 1) * hw];
                    gx[i * hw + argmax(plane)] += gi;
                }
            });
        }),
    )
}

/// Mean across channels: N x C x H x W -> N x 1 x H x W.
pub fn channel_mean(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut out = vec![0.0f32; s.n * hw];
    {
        let xd = x.data();
        let mut acc = vec![0.0f64; hw];
        for n in 0..s.n {
            acc.fill(0.0);
            for c in 0..s.c {
                let plane = &xd[(n * s.c + c) * hw..(n * s.c + c + 1) * hw];
                for (a, v) in acc.iter_mut().zip(plane) {
                    *a += *v as f64;
                }
            }
            for (o, a) in out[n * hw..(n + 1) * hw].iter_mut().zip(&acc) {
                *o = (*a / s.c as f64) as f32;
            }
        }
    }
    Tensor::from_op(
        Shape::new(s.n, 1, s.h, s.w),
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            let (nc, c) = (s.n, s.c);
            ps[0].with_grad_mut(|gx| {
                for n in 0..nc {
                    let gp = &g[n * hw..(n + 1) * hw];
                    for ch in 0..c {
                        let o = &mut gx[(n * c + ch) * hw..(n * c + ch + 1) * hw];
                        for (oi, gi) in o.iter_mut().zip(gp) {
                            *oi += gi / c as f32;
                        }
                    }
                }
            });
        }),
    )
}

/// Max across channels: N x C x H x W -> N x 1 x H x W.
/// Ties route the gradient to the lowest channel index.
pub fn channel_max(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut out = vec![0.0f32; s.n * hw];
    {
        let xd = x.data();
        for n in 0..s.n {
            let o = &mut out[n * hw..(n + 1) * hw];
            o.copy_from_slice(&xd[n * s.c * hw..n * s.c * hw + hw]);
            for c in 1..s.c {
                let plane = &xd[(n * s.c + c) * hw..(n * s.c + c + 1) * hw];
                for (oi, v) in o.iter_mut().zip(plane) {
                    if *v > *oi {
                        *oi = *v;
                    }
                }
            }
        }
    }
    Tensor::from_op(
        Shape::new(s.n, 1, s.h, s.w),
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            let (nn, c) = (s.n, s.c);
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for n in 0..nn {
                    for i in 0..hw {
                        let mut best_c = 0;
                        let mut best = xd[n * c * hw + i];
                        for ch in 1..c {
                            let v = xd[(n * c + ch) * hw + i];
                            if v > best {
                                best = v;
                                best_c = ch;
                            }
                        }
                        gx[(n * c + best_c) * hw + i] += g[n * hw + i];
                    }
                }
            });
        }),
    )
}

/// Block-mean downsample by an integer factor. Produces a constant
/// tensor (no gradient); this is a data-pipeline op, used to pool fine
/// grids down to coarse ones and to build training targets.
pub fn area_avg_pool(x: &Tensor, factor: usize) -> Result<Tensor> {
    let s = x.shape();
    if factor == 0 || s.h % factor != 0 || s.w % factor != 0 {
        return Err(Error::Config(format!(
            "area_avg_pool: factor {factor} does not divide {}x{}",
            s.h, s.w
        )));
    }
    let (oh, ow) = (s.h / factor, s.w / factor);
    let mut out = vec![0.0f32; s.n * s.c * oh * ow];
    let xd = x.data();
    let inv = 1.0 / (factor * factor) as f64;
    for p in 0..s.n * s.c {
        let src = &xd[p * s.h * s.w..(p + 1) * s.h * s.w];
        let dst = &mut out[p * oh * ow..(p + 1) * oh * ow];
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = 0.0f64;
                for dy in 0..factor {
                    let row = (oy * factor + dy) * s.w + ox * factor;
                    for v in &src[row..row + factor] {
                        acc += *v as f64;
                    }
                }
                dst[oy * ow + ox] = (acc * inv) as f32;
            }
        }
    }
    drop(xd);
    Tensor::from_vec(Shape::new(s.n, s.c, oh, ow), out)
}

// ---------------------------------------------------------------------------
// broadcasting
// ---------------------------------------------------------------------------

/// Multiply with a broadcast mask: `m` is either N x C x 1 x 1 (spread
/// over the spatial extent) or N x 1 x H x W (spread across channels).
pub fn mul_broadcast(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ms = m.shape();
    let hw = xs.h * xs.w;
    if ms == Shape::new(xs.n, xs.c, 1, 1) {
        let mut out = vec![0.0f32; xs.numel()];
        {
            let xd = x.data();
            let md = m.data();
            for p in 0..xs.n * xs.c {
                let f = md[p];
                for (o, v) in out[p * hw..(p + 1) * hw].iter_mut().zip(&xd[p * hw..(p + 1) * hw]) {
                    *o = v * f;
                }
            }
        }
        Ok(Tensor::from_op(
            xs,
            out,
            vec![x.clone(), m.clone()],
            Box::new(move |g, ps| {
                if ps[0].requires_grad() {
                    let md = ps[1].data();
                    ps[0].with_grad_mut(|gx| {
                        for p in 0..xs.n * xs.c {
                            let f = md[p];
                            for (o, gi) in gx[p * hw..(p + 1) * hw].iter_mut().zip(&g[p * hw..(p + 1) * hw]) {
                                *o += gi * f;
                            }
                        }
                    });
                }
                if ps[1].requires_grad() {
                    let xd = ps[0].data();
                    ps[1].with_grad_mut(|gm| {
                        for p in 0..xs.n * xs.c {
                            let mut acc = 0.0f64;
                            for (gi, v) in g[p * hw..(p + 1) * hw].iter().zip(&xd[p * hw..(p + 1) * hw]) {
                                acc += *gi as f64 * *v as f64;
                            }
                            gm[p] += acc as f32;
                        }
                    });
                }
            }),
        ))
    } else if ms == Shape::new(xs.n, 1, xs.h, xs.w) {
        let mut out = vec![0.0f32; xs.numel()];
        {
            let xd = x.data();
            let md = m.data();
            for n in 0..xs.n {
                let mask = &md[n * hw..(n + 1) * hw];
                for c in 0..xs.c {
                    let base = (n * xs.c + c) * hw;
                    for i in 0..hw {
                        out[base + i] = xd[base + i] * mask[i];
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            xs,
            out,
            vec![x.clone(), m.clone()],
            Box::new(move |g, ps| {
                if ps[0].requires_grad() {
                    let md = ps[1].data();
                    ps[0].with_grad_mut(|gx| {
                        for n in 0..xs.n {
                            let mask = &md[n * hw..(n + 1) * hw];
                            for c in 0..xs.c {
                                let base = (n * xs.c + c) * hw;
                                for i in 0..hw {
                                    gx[base + i] += g[base + i] * mask[i];
                                }
                            }
                        }
                    });
                }
                if ps[1].requires_grad() {
                    let xd = ps[0].data();
                    ps[1].with_grad_mut(|gm| {
                        let mut acc = vec![0.0f64; hw];
                        for n in 0..xs.n {
                            acc.fill(0.0);
                            for c in 0..xs.c {
                                let base = (n * xs.c + c) * hw;
                                for i in 0..hw {
                                    acc[i] += g[base + i] as f64 * xd[base + i] as f64;
                                }
                            }
                            for (o, a) in gm[n * hw..(n + 1) * hw].iter_mut().zip(&acc) {
                                *o += *a as f32;
                            }
                        }
                    });
                }
            }),
        ))
    } else {
        Err(shape_err("mul_broadcast", xs, ms))
    }
}

/// Add an N x 1 x H x W map onto every channel of `x`.
pub fn add_broadcast_spatial(x: &Tensor, m: &Tensor) -> Result<Tensor> {
    let xs = x.shape();
    let ms = m.shape();
    if ms != Shape::new(xs.n, 1, xs.h, xs.w) {
        return Err(shape_err("add_broadcast_spatial", xs, ms));
    }
    let hw = xs.h * xs.w;
    let mut out = vec![0.0f32; xs.numel()];
    {
        let xd = x.data();
        let md = m.data();
        for n in 0..xs.n {
            let map = &md[n * hw..(n + 1) * hw];
            for c in 0..xs.c {
                let base = (n * xs.c + c) * hw;
                for i in 0..hw {
                    out[base + i] = xd[base + i] + map[i];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        xs,
        out,
        vec![x.clone(), m.clone()],
        Box::new(move |g, ps| {
            ps[0].accumulate_grad(g);
            ps[1].with_grad_mut(|gm| {
                let mut acc = vec![0.0f64; hw];
                for n in 0..xs.n {
                    acc.fill(0.0);
                    for c in 0..xs.c {
                        let base = (n * xs.c + c) * hw;
                        for i in 0..hw {
                            acc[i] += g[base + i] as f64;
                        }
                    }
                    for (o, a) in gm[n * hw..(n + 1) * hw].iter_mut().zip(&acc) {
                        *o += *a as f32;
                    }
                }
            });
        }),
    ))
}

/// Concatenate along the channel axis.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.n != sb.n || sa.h != sb.h || sa.w != sb.w {
        return Err(shape_err("concat_channels", sa, sb));
    }
    let hw = sa.h * sa.w;
    let (ca, cb) = (sa.c, sb.c);
    let cout = ca + cb;
    let mut out = vec![0.0f32; sa.n * cout * hw];
    {
        let ad = a.data();
        let bd = b.data();
        for n in 0..sa.n {
            out[n * cout * hw..n * cout * hw + ca * hw]
                .copy_from_slice(&ad[n * ca * hw..(n + 1) * ca * hw]);
            out[n * cout * hw + ca * hw..(n + 1) * cout * hw]
                .copy_from_slice(&bd[n * cb * hw..(n + 1) * cb * hw]);
        }
    }
    Ok(Tensor::from_op(
        Shape::new(sa.n, cout, sa.h, sa.w),
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |g, ps| {
            ps[0].with_grad_mut(|ga| {
                for n in 0..sa.n {
                    let src = &g[n * cout * hw..n * cout * hw + ca * hw];
                    for (o, gi) in ga[n * ca * hw..(n + 1) * ca * hw].iter_mut().zip(src) {
                        *o += gi;
                    }
                }
            });
            ps[1].with_grad_mut(|gb| {
                for n in 0..sa.n {
                    let src = &g[n * cout * hw + ca * hw..(n + 1) * cout * hw];
                    for (o, gi) in gb[n * cb * hw..(n + 1) * cb * hw].iter_mut().zip(src) {
                        *o += gi;
                    }
                }
            });
        }),
    ))
}

/// Pad both spatial axes by `p` cells on every side, repeating edge values.
/// Composed with a convolution and a matching crop this gives
/// replicate-padded convolution without touching the im2col path.
pub fn replicate_pad(x: &Tensor, p: usize) -> Result<Tensor> {
    let s = x.shape();
    if p == 0 {
        return Ok(x.clone());
    }
    let (ho, wo) = (s.h + 2 * p, s.w + 2 * p);
    let (hw, ohw) = (s.h * s.w, ho * wo);
    let planes = s.n * s.c;
    let mut out = vec![0.0f32; planes * ohw];
    {
        let xd = x.data();
        for pl in 0..planes {
            let src = &xd[pl * hw..(pl + 1) * hw];
            let dst = &mut out[pl * ohw..(pl + 1) * ohw];
            for oy in 0..ho {
                let iy = oy.saturating_sub(p).min(s.h - 1);
                for ox in 0..wo {
                    let ix = ox.saturating_sub(p).min(s.w - 1);
                    dst[oy * wo + ox] = src[iy * s.w + ix];
                }
            }
        }
    }
    Ok(Tensor::from_op(
        Shape::new(s.n, s.c, ho, wo),
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            ps[0].with_grad_mut(|gx| {
                for pl in 0..planes {
                    let gp = &g[pl * ohw..(pl + 1) * ohw];
                    let dst = &mut gx[pl * hw..(pl + 1) * hw];
                    for oy in 0..ho {
                        let iy = oy.saturating_sub(p).min(s.h - 1);
                        for ox in 0..wo {
                            let ix = ox.saturating_sub(p).min(s.w - 1);
                            dst[iy * s.w + ix] += gp[oy * wo + ox];
                        }
                    }
                }
            });
        }),
    ))
}

/// Take the spatial window of size `h` x `w` whose top-left corner sits at
/// (`top`, `left`).
pub fn crop_spatial(x: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Tensor> {
    let s = x.shape();
    if h == 0 || w == 0 || top + h > s.h || left + w > s.w {
        return Err(Error::Config(format!(
            "crop_spatial: window {h}x{w} at ({top}, {left}) does not fit in {}x{}",
            s.h, s.w
        )));
    }
    let (hw, ohw) = (s.h * s.w, h * w);
    let planes = s.n * s.c;
    let mut out = vec![0.0f32; planes * ohw];
    {
        let xd = x.data();
        for pl in 0..planes {
            let src = &xd[pl * hw..(pl + 1) * hw];
            let dst = &mut out[pl * ohw..(pl + 1) * ohw];
            for oy in 0..h {
                let src_row = (top + oy) * s.w + left;
                dst[oy * w..(oy + 1) * w].copy_from_slice(&src[src_row..src_row + w]);
            }
        }
    }
    Ok(Tensor::from_op(
        Shape::new(s.n, s.c, h, w),
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            ps[0].with_grad_mut(|gx| {
                for pl in 0..planes {
                    let gp = &g[pl * ohw..(pl + 1) * ohw];
                    let dst = &mut gx[pl * hw..(pl + 1) * hw];
                    for oy in 0..h {
                        let dst_row = (top + oy) * s.w + left;
                        for ox in 0..w {
                            dst[dst_row + ox] += gp[oy * w + ox];
                        }
                    }
                }
            });
        }),
    ))
}

// ---------------------------------------------------------------------------
// bilinear interpolation
// ---------------------------------------------------------------------------

fn axis_table(in_len: usize, out_len: usize) -> Vec<(usize, usize, f64)> {
    let step = if out_len > 1 {
        (in_len - 1) as f64 / (out_len - 1) as f64
    } else {
        0.0
    };
    (0..out_len)
        .map(|o| {
            let pos = o as f64 * step;
            let lo = (pos.floor() as usize).min(in_len - 1);
            let hi = (lo + 1).min(in_len - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear resampling of one plane with align-corners index mapping,
/// entirely in f64. This is the reference path: on affine fields it is
/// exact to within a few ulps.
pub fn bilinear_resize_plane_f64(
    src: &[f64],
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
) -> Vec<f64> {
    let ys = axis_table(h, oh);
    let xs = axis_table(w, ow);
    let mut out = vec![0.0f64; oh * ow];
    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
            let v00 = src[y0 * w + x0];
            let v01 = src[y0 * w + x1];
            let v10 = src[y1 * w + x0];
            let v11 = src[y1 * w + x1];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[oy * ow + ox] = top + (bot - top) * wy;
        }
    }
    out
}

/// Bilinear upsampling by an integer scale. Only the scales the model
/// family uses are accepted.
pub fn upsample_bilinear(x: &Tensor, scale: usize) -> Result<Tensor> {
    if !matches!(scale, 2 | 4 | 8) {
        return Err(Error::Config(format!(
            "upsample_bilinear: scale must be 2, 4 or 8, got {scale}"
        )));
    }
    let s = x.shape();
    bilinear_resize(x, s.h * scale, s.w * scale)
}

/// Bilinear resize with align-corners sampling, applied per plane.
/// Interpolation runs in f64; only the stored result is f32.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let s = x.shape();
    if oh == 0 || ow == 0 {
        return Err(Error::Config(format!(
            "bilinear_resize: empty output {oh}x{ow}"
        )));
    }
    let hw = s.h * s.w;
    let ohw = oh * ow;
    let ys = axis_table(s.h, oh);
    let xs = axis_table(s.w, ow);
    let mut out = vec![0.0f32; s.n * s.c * ohw];
    {
        let xd = x.data();
        for p in 0..s.n * s.c {
            let src = &xd[p * hw..(p + 1) * hw];
            let dst = &mut out[p * ohw..(p + 1) * ohw];
            for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                    let v00 = src[y0 * s.w + x0] as f64;
                    let v01 = src[y0 * s.w + x1] as f64;
                    let v10 = src[y1 * s.w + x0] as f64;
                    let v11 = src[y1 * s.w + x1] as f64;
                    let top = v00 + (v01 - v00) * wx;
                    let bot = v10 + (v11 - v10) * wx;
                    dst[oy * ow + ox] = (top + (bot - top) * wy) as f32;
                }
            }
        }
    }
    Ok(Tensor::from_op(
        Shape::new(s.n, s.c, oh, ow),
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            let ys = axis_table(s.h, oh);
            let xs = axis_table(s.w, ow);
            ps[0].with_grad_mut(|gx| {
                for p in 0..s.n * s.c {
                    let gp = &g[p * ohw..(p + 1) * ohw];
                    let dst = &mut gx[p * hw..(p + 1) * hw];
                    for (oy, &(y0, y1, wy)) in ys.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in xs.iter().enumerate() {
                            let gi = gp[oy * ow + ox] as f64;
                            dst[y0 * s.w + x0] += (gi * (1.0 - wy) * (1.0 - wx)) as f32;
                            dst[y0 * s.w + x1] += (gi * (1.0 - wy) * wx) as f32;
                            dst[y1 * s.w + x0] += (gi * wy * (1.0 - wx)) as f32;
                            dst[y1 * s.w + x1] += (gi * wy * wx) as f32;
                        }
                    }
                }
            });
        }),
    ))
}

// ---------------------------------------------------------------------------
// softmax over the spatial extent
// ---------------------------------------------------------------------------

fn plane_logsumexp(plane: &[f32]) -> f64 {
    let mut m = f64::NEG_INFINITY;
    for v in plane {
        m = m.max(*v as f64);
    }
    let mut acc = 0.0f64;
    for v in plane {
        acc += (*v as f64 - m).exp();
    }
    m + acc.ln()
}

/// Log of the softmax taken over H x W, independently per (n, c) plane.
pub fn log_softmax_spatial(x: &Tensor) -> Tensor {
    let s = x.shape();
    let hw = s.h * s.w;
    let mut out = vec![0.0f32; s.numel()];
    {
        let xd = x.data();
        for p in 0..s.n * s.c {
            let plane = &xd[p * hw..(p + 1) * hw];
            let lse = plane_logsumexp(plane);
            for (o, v) in out[p * hw..(p + 1) * hw].iter_mut().zip(plane) {
                *o = (*v as f64 - lse) as f32;
            }
        }
    }
    Tensor::from_op(
        s,
        out,
        vec![x.clone()],
        Box::new(move |g, ps| {
            let xd = ps[0].data();
            ps[0].with_grad_mut(|gx| {
                for p in 0..s.n * s.c {
                    let plane = &xd[p * hw..(p + 1) * hw];
                    let gp = &g[p * hw..(p + 1) * hw];
                    let lse = plane_logsumexp(plane);
                    let mut gsum = 0.0f64;
                    for gi in gp {
                        gsum += *gi as f64;
                    }
                    for i in 0..hw {
                        let prob = (plane[i] as f64 - lse).exp();
                        gx[p * hw + i] += (gp[i] as f64 - prob * gsum) as f32;
                    }
                }
            });
        }),
    )
}

// ---------------------------------------------------------------------------
// convolution
// ---------------------------------------------------------------------------

#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    p: usize,
    st: usize,
    ho: usize,
    wo: usize,
    col: &mut [f32],
) {
    col.fill(0.0);
    let plane = h * w;
    let ocols = ho * wo;
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * ocols;
                let shift = kw as isize - p as isize;
                for oy in 0..ho {
                    let iy = (oy * st + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src_row = ci * plane + iy as usize * w;
                    let dst_row = row + oy * wo;
                    if st == 1 {
                        let ox_start = (-shift).max(0) as usize;
                        let ox_end = (w as isize - shift).clamp(0, wo as isize) as usize;
                        if ox_end > ox_start {
                            let off = (ox_start as isize + shift) as usize;
                            col[dst_row + ox_start..dst_row + ox_end]
                                .copy_from_slice(&src[src_row + off..src_row + off + ox_end - ox_start]);
                        }
                    } else {
                        for ox in 0..wo {
                            let ix = (ox * st + kw) as isize - p as isize;
                            if ix >= 0 && ix < w as isize {
                                col[dst_row + ox] = src[src_row + ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f32],
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    p: usize,
    st: usize,
    ho: usize,
    wo: usize,
    dst: &mut [f32],
) {
    let plane = h * w;
    let ocols = ho * wo;
    for ci in 0..cin {
        for kh in 0..k {
            for kw in 0..k {
                let row = ((ci * k + kh) * k + kw) * ocols;
                for oy in 0..ho {
                    let iy = (oy * st + kh) as isize - p as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = ci * plane + iy as usize * w;
                    let src_row = row + oy * wo;
                    for ox in 0..wo {
                        let ix = (ox * st + kw) as isize - p as isize;
                        if ix >= 0 && ix < w as isize {
                            dst[dst_row + ix as usize] += col[src_row + ox];
                        }
                    }
                }
            }
        }
    }
}

/// 2-D convolution with same zero padding, square odd kernel, stride 1
/// or 2, and a per-output-channel bias. Weight layout is
/// Cout x Cin x K x K. Implemented as im2col + GEMM per sample.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: &Tensor, stride: usize) -> Result<Tensor> {
    let xs = input.shape();
    let ws = weight.shape();
    let (n, cin, h, w) = (xs.n, xs.c, xs.h, xs.w);
    let (cout, k) = (ws.n, ws.h);
    if ws.h != ws.w || ws.h % 2 == 0 {
        return Err(Error::Config(format!(
            "conv2d: kernel must be square with odd size, got {}x{}",
            ws.h, ws.w
        )));
    }
    if ws.c != cin {
        return Err(shape_err("conv2d", xs, ws));
    }
    if stride != 1 && stride != 2 {
        return Err(Error::Config(format!(
            "conv2d: stride must be 1 or 2, got {stride}"
        )));
    }
    if bias.shape() != Shape::new(1, cout, 1, 1) {
        return Err(Error::Config(format!(
            "conv2d: bias shape {} does not match {cout} output channels",
            bias.shape()
        )));
    }
    let p = (k - 1) / 2;
    let ho = (h + 2 * p - k) / stride + 1;
    let wo = (w + 2 * p - k) / stride + 1;
    let ocols = ho * wo;
    let ckk = cin * k * k;
    let chw = cin * h * w;
    let direct = k == 1 && stride == 1;

    let mut out = vec![0.0f32; n * cout * ocols];
    {
        let xd = input.data();
        let wd = weight.data();
        let bd = bias.data();
        let mut col = if direct { Vec::new() } else { scratch::take(ckk * ocols) };
        for s in 0..n {
            let o = &mut out[s * cout * ocols..(s + 1) * cout * ocols];
            for c in 0..cout {
                o[c * ocols..(c + 1) * ocols].fill(bd[c]);
            }
            if direct {
                gemm::gemm_nn(cout, ckk, ocols, &wd, &xd[s * chw..(s + 1) * chw], o);
            } else {
                im2col(&xd[s * chw..(s + 1) * chw], cin, h, w, k, p, stride, ho, wo, &mut col);
                gemm::gemm_nn(cout, ckk, ocols, &wd, &col, o);
            }
        }
        if !direct {
            scratch::give(col);
        }
    }

    Ok(Tensor::from_op(
        Shape::new(n, cout, ho, wo),
        out,
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(move |g, ps| {
            let (input, weight, bias) = (&ps[0], &ps[1], &ps[2]);
            bias.with_grad_mut(|gb| {
                for s in 0..n {
                    for c in 0..cout {
                        let row = &g[(s * cout + c) * ocols..(s * cout + c + 1) * ocols];
                        let mut acc = 0.0f64;
                        for v in row {
                            acc += *v as f64;
                        }
                        gb[c] += acc as f32;
                    }
                }
            });
            if weight.requires_grad() {
                let xd = input.data();
                weight.with_grad_mut(|gw| {
                    let mut col = if direct { Vec::new() } else { scratch::take(ckk * ocols) };
                    let mut colt = scratch::take(ckk * ocols);
                    for s in 0..n {
                        let x_s = &xd[s * chw..(s + 1) * chw];
                        let g_s = &g[s * cout * ocols..(s + 1) * cout * ocols];
                        if direct {
                            gemm::transpose(ckk, ocols, x_s, &mut colt);
                        } else {
                            im2col(x_s, cin, h, w, k, p, stride, ho, wo, &mut col);
                            gemm::transpose(ckk, ocols, &col, &mut colt);
                        }
                        gemm::gemm_nn(cout, ocols, ckk, g_s, &colt, gw);
                    }
                    scratch::give(colt);
                    if !direct {
                        scratch::give(col);
                    }
                });
            }
            if input.requires_grad() {
                let wd = weight.data();
                let mut wt = scratch::take(ckk * cout);
                gemm::transpose(cout, ckk, &wd, &mut wt);
                drop(wd);
                input.with_grad_mut(|gx| {
                    if direct {
                        for s in 0..n {
                            gemm::gemm_nn(
                                ckk,
                                cout,
                                ocols,
                                &wt,
                                &g[s * cout * ocols..(s + 1) * cout * ocols],
                                &mut gx[s * chw..(s + 1) * chw],
                            );
                        }
                    } else {
                        let mut dcol = scratch::take(ckk * ocols);
                        for s in 0..n {
                            dcol.fill(0.0);
                            gemm::gemm_nn(
                                ckk,
                                cout,
                                ocols,
                                &wt,
                                &g[s * cout * ocols..(s + 1) * cout * ocols],
                                &mut dcol,
                            );
                            col2im_add(&dcol, cin, h, w, k, p, stride, ho, wo, &mut gx[s * chw..(s + 1) * chw]);
                        }
                        scratch::give(dcol);
                    }
                });
                scratch::give(wt);
            }
        }),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Shape, data: Vec<f32>) -> Tensor {
        Tensor::from_vec(shape, data).unwrap()
    }

    fn v(shape: Shape, data: Vec<f32>) -> Tensor {
        Tensor::variable(shape, data).unwrap()
    }

    #[test]
    fn conv2d_same_padding_hand_values() {
        let x = t(Shape::new(1, 1, 3, 3), (1..=9).map(|i| i as f32).collect());
        let w = t(Shape::new(1, 1, 3, 3), vec![1.0; 9]);
        let b = t(Shape::new(1, 1, 1, 1), vec![0.5]);
        let y = conv2d(&x, &w, &b, 1).unwrap();
        let expect = [12.0, 21.0, 16.0, 27.0, 45.0, 33.0, 24.0, 39.0, 28.0];
        for (got, e) in y.data().iter().zip(expect) {
            assert!((got - (e + 0.5)).abs() < 1e-5, "got {got}, want {}", e + 0.5);
        }
    }

    #[test]
    fn conv2d_stride2_hand_values() {
        let x = t(Shape::new(1, 1, 4, 4), (1..=16).map(|i| i as f32).collect());
        let w = t(Shape::new(1, 1, 3, 3), vec![1.0; 9]);
        let b = t(Shape::new(1, 1, 1, 1), vec![0.0]);
        let y = conv2d(&x, &w, &b, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        let expect = [14.0, 30.0, 57.0, 99.0];
        for (got, e) in y.data().iter().zip(expect) {
            assert!((got - e).abs() < 1e-5, "got {got}, want {e}");
        }
    }

    #[test]
    fn conv2d_1x1_stride2_subsamples() {
        let x = t(Shape::new(1, 1, 4, 4), (1..=16).map(|i| i as f32).collect());
        let w = t(Shape::new(1, 1, 1, 1), vec![1.0]);
        let b = t(Shape::new(1, 1, 1, 1), vec![0.0]);
        let y = conv2d(&x, &w, &b, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 2, 2));
        assert_eq!(*y.data(), vec![1.0, 3.0, 9.0, 11.0]);
    }

    #[test]
    fn conv2d_output_size_is_ceil_of_stride_division() {
        let x = t(Shape::new(1, 1, 5, 7), vec![0.0; 35]);
        let w = t(Shape::new(2, 1, 3, 3), vec![0.0; 18]);
        let b = t(Shape::new(1, 2, 1, 1), vec![0.0; 2]);
        let y = conv2d(&x, &w, &b, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 2, 3, 4));
    }

    #[test]
    fn conv2d_rejects_bad_configs() {
        let x = t(Shape::new(1, 1, 3, 3), vec![0.0; 9]);
        let w_even = t(Shape::new(1, 1, 2, 2), vec![0.0; 4]);
        let b = t(Shape::new(1, 1, 1, 1), vec![0.0]);
        assert!(conv2d(&x, &w_even, &b, 1).is_err());
        let w = t(Shape::new(1, 1, 3, 3), vec![0.0; 9]);
        assert!(conv2d(&x, &w, &b, 3).is_err());
        let w_chan = t(Shape::new(1, 2, 3, 3), vec![0.0; 18]);
        assert!(conv2d(&x, &w_chan, &b, 1).is_err());
    }

    #[test]
    fn conv2d_multichannel_matches_direct_loop() {
        // 2 in, 3 out, 5x4, stride 1: compare against a naive convolution.
        let (cin, cout, h, w) = (2usize, 3usize, 5usize, 4usize);
        let mut seed = 1234u64;
        let mut next = move || {
            seed = seed.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((seed >> 33) as f32 / (1u64 << 31) as f32) - 0.5
        };
        let xd: Vec<f32> = (0..cin * h * w).map(|_| next()).collect();
        let wd: Vec<f32> = (0..cout * cin * 9).map(|_| next()).collect();
        let bd: Vec<f32> = (0..cout).map(|_| next()).collect();
        let x = t(Shape::new(1, cin, h, w), xd.clone());
        let wt = t(Shape::new(cout, cin, 3, 3), wd.clone());
        let bt = t(Shape::new(1, cout, 1, 1), bd.clone());
        let y = conv2d(&x, &wt, &bt, 1).unwrap();
        for co in 0..cout {
            for oy in 0..h {
                for ox in 0..w {
                    let mut acc = bd[co];
                    for ci in 0..cin {
                        for ky in 0..3usize {
                            for kx in 0..3usize {
                                let iy = oy as isize + ky as isize - 1;
                                let ix = ox as isize + kx as isize - 1;
                                if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                    acc += xd[(ci * h + iy as usize) * w + ix as usize]
                                        * wd[((co * cin + ci) * 3 + ky) * 3 + kx];
                                }
                            }
                        }
                    }
                    let got = y.data()[(co * h + oy) * w + ox];
                    assert!((got - acc).abs() < 1e-4, "({co},{oy},{ox}): {got} vs {acc}");
                }
            }
        }
    }

    #[test]
    fn global_max_pool_breaks_ties_toward_first_element() {
        let x = v(Shape::new(1, 1, 2, 2), vec![3.0, 7.0, 7.0, 1.0]);
        let y = global_max_pool(&x);
        assert_eq!(y.item(), 7.0);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.0, 1.0, 0.0, 0.0]);
    }

    #[test]
    fn channel_max_breaks_ties_toward_lowest_channel() {
        let x = v(Shape::new(1, 3, 1, 2), vec![2.0, 5.0, 2.0, 5.0, 1.0, 0.0]);
        let y = channel_max(&x);
        assert_eq!(*y.data(), vec![2.0, 5.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn global_avg_pool_and_channel_mean_values() {
        let x = t(Shape::new(1, 2, 2, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        assert_eq!(*global_avg_pool(&x).data(), vec![2.5, 6.5]);
        assert_eq!(*channel_mean(&x).data(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn area_avg_pool_blocks() {
        let x = t(Shape::new(1, 1, 4, 4), (1..=16).map(|i| i as f32).collect());
        let y = area_avg_pool(&x, 2).unwrap();
        assert_eq!(*y.data(), vec![3.5, 5.5, 11.5, 13.5]);
        assert!(area_avg_pool(&x, 3).is_err());
    }

    #[test]
    fn mul_broadcast_channel_and_spatial_modes() {
        let x = t(Shape::new(1, 2, 2, 2), (1..=8).map(|i| i as f32).collect());
        let mc = t(Shape::new(1, 2, 1, 1), vec![2.0, 3.0]);
        let yc = mul_broadcast(&x, &mc).unwrap();
        assert_eq!(*yc.data(), vec![2.0, 4.0, 6.0, 8.0, 15.0, 18.0, 21.0, 24.0]);
        let ms = t(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 2.0, 1.0]);
        let ys = mul_broadcast(&x, &ms).unwrap();
        assert_eq!(*ys.data(), vec![1.0, 0.0, 6.0, 4.0, 5.0, 0.0, 14.0, 8.0]);
    }

    #[test]
    fn mul_broadcast_mask_gradients() {
        let x = t(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let m = v(Shape::new(1, 2, 1, 1), vec![1.0, 1.0]);
        sum(&mul_broadcast(&x, &m).unwrap()).backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![3.0, 7.0]);
        let ms = v(Shape::new(1, 1, 1, 2), vec![1.0, 1.0]);
        sum(&mul_broadcast(&x, &ms).unwrap()).backward().unwrap();
        assert_eq!(ms.grad().unwrap(), vec![4.0, 6.0]);
    }

    #[test]
    fn add_broadcast_spatial_values_and_grads() {
        let x = t(Shape::new(1, 2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let m = v(Shape::new(1, 1, 1, 2), vec![10.0, 20.0]);
        let y = add_broadcast_spatial(&x, &m).unwrap();
        assert_eq!(*y.data(), vec![11.0, 22.0, 13.0, 24.0]);
        sum(&y).backward().unwrap();
        assert_eq!(m.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn concat_channels_roundtrip_and_grads() {
        let a = v(Shape::new(1, 1, 1, 2), vec![1.0, 2.0]);
        let b = v(Shape::new(1, 2, 1, 2), vec![3.0, 4.0, 5.0, 6.0]);
        let y = concat_channels(&a, &b).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 3, 1, 2));
        assert_eq!(*y.data(), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let wts = t(Shape::new(1, 3, 1, 2), vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        sum(&mul(&y, &wts).unwrap()).backward().unwrap();
        assert_eq!(a.grad().unwrap(), vec![1.0, 2.0]);
        assert_eq!(b.grad().unwrap(), vec![3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn bilinear_f64_reproduces_affine_fields_exactly() {
        let (h, w, oh, ow) = (7usize, 5usize, 23usize, 31usize);
        let f = |yn: f64, xn: f64| 0.3 + 0.7 * xn - 0.2 * yn;
        let src: Vec<f64> = (0..h * w)
            .map(|i| f((i / w) as f64 / (h - 1) as f64, (i % w) as f64 / (w - 1) as f64))
            .collect();
        let out = bilinear_resize_plane_f64(&src, h, w, oh, ow);
        for oy in 0..oh {
            for ox in 0..ow {
                let want = f(oy as f64 / (oh - 1) as f64, ox as f64 / (ow - 1) as f64);
                let got = out[oy * ow + ox];
                assert!((got - want).abs() <= 1e-12, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn bilinear_op_matches_affine_field_to_f32_precision() {
        let (h, w, oh, ow) = (9usize, 9usize, 33usize, 17usize);
        let f = |yn: f32, xn: f32| -1.5 + 2.0 * xn + 0.25 * yn;
        let src: Vec<f32> = (0..h * w)
            .map(|i| f((i / w) as f32 / (h - 1) as f32, (i % w) as f32 / (w - 1) as f32))
            .collect();
        let x = t(Shape::new(1, 1, h, w), src);
        let y = bilinear_resize(&x, oh, ow).unwrap();
        for oy in 0..oh {
            for ox in 0..ow {
                let want = f(oy as f32 / (oh - 1) as f32, ox as f32 / (ow - 1) as f32);
                let got = y.data()[oy * ow + ox];
                assert!((got - want).abs() <= 3e-6, "({oy},{ox}): {got} vs {want}");
            }
        }
    }

    #[test]
    fn bilinear_identity_resize_is_exact() {
        let src: Vec<f32> = (0..9 * 13).map(|i| (i as f32 * 0.37).sin()).collect();
        let x = t(Shape::new(1, 1, 9, 13), src.clone());
        let y = bilinear_resize(&x, 9, 13).unwrap();
        assert_eq!(*y.data(), src);
    }

    #[test]
    fn sigmoid_value_and_open_interval_bounds() {
        let x = t(Shape::new(1, 1, 1, 4), vec![4.0, 100.0, -100.0, 0.0]);
        let y = sigmoid(&x);
        let d = y.data();
        assert!((d[0] - 0.982_013_8).abs() < 1e-6);
        assert!(d[1] < 1.0 && d[1] > 0.999_999);
        assert!(d[2] > 0.0 && d[2] < 1e-9);
        assert_eq!(d[3], 0.5);
    }

    #[test]
    fn leaky_relu_forward_and_grad_at_zero() {
        let x = v(Shape::new(1, 1, 1, 3), vec![2.0, -4.0, 0.0]);
        let y = leaky_relu(&x, 0.01);
        assert_eq!(*y.data(), vec![2.0, -0.04, 0.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, 0.01, 0.01]);
    }

    #[test]
    fn log_softmax_spatial_normalizes_each_plane() {
        let x = t(Shape::new(1, 2, 2, 2), vec![0.0, 0.0, 0.0, 0.0, 1.0, 2.0, 3.0, 4.0]);
        let y = log_softmax_spatial(&x);
        let d = y.data();
        for i in 0..4 {
            assert!((d[i] - (-(4.0f32.ln()))).abs() < 1e-6);
        }
        let total: f64 = d[4..8].iter().map(|v| (*v as f64).exp()).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn sum_accumulates_in_f64() {
        // 1e7 copies of 0.1 summed in f32 drifts by ~1e1; in f64 the
        // result stays within f32 rounding of the true value.
        let n = 1_000_000usize;
        let x = t(Shape::new(1, 1, 1000, 1000), vec![0.1; n]);
        let s = sum(&x).item() as f64;
        assert!((s - 100_000.0).abs() < 0.01, "sum drifted: {s}");
    }

    #[test]
    fn scale_and_add_scalar() {
        let x = v(Shape::new(1, 1, 1, 2), vec![1.0, -2.0]);
        let y = add_scalar(&scale(&x, 0.5), 1.0);
        assert_eq!(*y.data(), vec![1.5, 0.0]);
        sum(&y).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn abs_and_square_grads() {
        let x = v(Shape::new(1, 1, 1, 3), vec![2.0, -3.0, 0.0]);
        sum(&abs(&x)).backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0, -1.0, 0.0]);
        let z = v(Shape::new(1, 1, 1, 2), vec![3.0, -2.0]);
        sum(&square(&z)).backward().unwrap();
        assert_eq!(z.grad().unwrap(), vec![6.0, -4.0]);
    }

    #[test]
    fn exp_value_and_grad() {
        let x = v(Shape::new(1, 1, 1, 3), vec![0.0, 1.0, -2.0]);
        let y = exp(&x);
        assert_eq!(y.data()[0], 1.0);
        assert!((y.data()[1] - std::f32::consts::E).abs() < 1e-6);
        assert!((y.data()[2] - (-2.0f32).exp()).abs() < 1e-7);
        sum(&y).backward().unwrap();
        // d/dx e^x = e^x, so the gradient equals the forward value.
        for (g, f) in x.grad().unwrap().iter().zip(y.data().iter()) {
            assert_eq!(g.to_bits(), f.to_bits());
        }
    }

    #[test]
    fn conv2d_all_ones_center_is_nine() {
        let x = t(Shape::new(1, 1, 3, 3), vec![1.0; 9]);
        let w = t(Shape::new(1, 1, 3, 3), vec![1.0; 9]);
        let b = t(Shape::new(1, 1, 1, 1), vec![0.0]);
        let y = conv2d(&x, &w, &b, 1).unwrap();
        assert_eq!(y.data()[4], 9.0);
        assert_eq!(y.data()[0], 4.0);
    }

    #[test]
    fn conv2d_identity_kernel_is_bitwise_identity() {
        let mut vals = Vec::with_capacity(64);
        let mut s = 99u64;
        for _ in 0..64 {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1);
            vals.push(((s >> 33) as f32 / (1u64 << 31) as f32) * 4.0 - 2.0);
        }
        let x = t(Shape::new(1, 1, 8, 8), vals.clone());
        let mut wk = vec![0.0f32; 9];
        wk[4] = 1.0;
        let w = t(Shape::new(1, 1, 3, 3), wk);
        let b = t(Shape::new(1, 1, 1, 1), vec![0.0]);
        let y = conv2d(&x, &w, &b, 1).unwrap();
        for (a, c) in y.data().iter().zip(vals.iter()) {
            assert_eq!(a.to_bits(), c.to_bits());
        }
    }

    #[test]
    fn pool_stats_pairs_and_validation() {
        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let (avg, max) = pool_channel_stats(&x).unwrap();
        assert_eq!(avg.item(), 2.5);
        assert_eq!(max.item(), 4.0);
        let (m, mx) = pool_spatial_stats(&x).unwrap();
        assert_eq!(*m.data(), vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(*mx.data(), vec![1.0, 2.0, 3.0, 4.0]);
        let empty = t(Shape::new(1, 1, 0, 2), vec![]);
        assert!(pool_channel_stats(&empty).is_err());
        let no_chan = t(Shape::new(1, 0, 2, 2), vec![]);
        assert!(pool_spatial_stats(&no_chan).is_err());
    }

    #[test]
    fn upsample_bilinear_scale2_rows() {
        let x = t(Shape::new(1, 1, 2, 2), vec![0.0, 1.0, 0.0, 1.0]);
        let y = upsample_bilinear(&x, 2).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        let third = 1.0f64 / 3.0;
        for r in 0..4 {
            let row = &y.data()[r * 4..r * 4 + 4];
            for (g, e) in row.iter().zip([0.0, third, 2.0 * third, 1.0]) {
                assert!((*g as f64 - e).abs() < 1e-7, "row {r}: {row:?}");
            }
        }
        assert!(upsample_bilinear(&x, 3).is_err());
        assert!(upsample_bilinear(&x, 8).is_ok());
    }

    #[test]
    fn replicate_pad_repeats_edges() {
        let x = t(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let y = replicate_pad(&x, 1).unwrap();
        assert_eq!(y.shape(), Shape::new(1, 1, 4, 4));
        #[rustfmt::skip]
        let want = [
            1.0, 1.0, 2.0, 2.0,
            1.0, 1.0, 2.0, 2.0,
            3.0, 3.0, 4.0, 4.0,
            3.0, 3.0, 4.0, 4.0,
        ];
        assert_eq!(&y.data()[..], &want);
        let same = replicate_pad(&x, 0).unwrap();
        assert_eq!(same.id(), x.id());
    }

    #[test]
    fn crop_undoes_padding_bitwise() {
        let vals: Vec<f32> = (0..2 * 3 * 4 * 5).map(|i| (i as f32).sin()).collect();
        let x = t(Shape::new(2, 3, 4, 5), vals);
        let back = crop_spatial(&replicate_pad(&x, 2).unwrap(), 2, 2, 4, 5).unwrap();
        assert_eq!(back.shape(), x.shape());
        for (a, b) in back.data().iter().zip(x.data().iter()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(crop_spatial(&x, 2, 0, 4, 5).is_err());
        assert!(crop_spatial(&x, 0, 0, 0, 5).is_err());
    }
}
