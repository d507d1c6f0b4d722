//! Reverse-mode autodiff over `ndarray` tensors.
//!
//! A [`Tape`] records every intermediate value of a forward pass together
//! with a backward closure; [`Tape::backward`] replays the tape in reverse
//! and accumulates gradients for every node. Nodes are `f64` throughout so
//! finite-difference checks resolve well below the tolerances the test
//! suite asserts.
//!
//! The op set is exactly what the pipeline needs: dense/1x1/depth-wise
//! convolutions, channel layer norm, bilinear up/rescale, Haar analysis and
//! synthesis (orthonormal, so the adjoint of one is the other), RoI-align
//! sampling, softmax/log-softmax, and the loss primitives.

use ndarray::{Array1, Array2, Array3, ArrayD, ArrayView1, ArrayView2, ArrayView3, Axis, IxDyn};

use crate::wavelet;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

type BackFn = Box<dyn Fn(&ArrayD<f64>, &mut dyn FnMut(usize, ArrayD<f64>))>;

struct Node {
    value: ArrayD<f64>,
    back: Option<BackFn>,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
    /// Gradient of `v`, or zeros of the given shape if `v` never received one.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> ArrayD<f64> {
        match self.get(v) {
            Some(g) => g.clone(),
            None => ArrayD::zeros(IxDyn(shape)),
        }
    }
}

fn a1(v: &ArrayD<f64>) -> ArrayView1<'_, f64> {
    v.view().into_dimensionality().expect("expected 1-d value")
}
fn a2(v: &ArrayD<f64>) -> ArrayView2<'_, f64> {
    v.view().into_dimensionality().expect("expected 2-d value")
}
fn a3(v: &ArrayD<f64>) -> ArrayView3<'_, f64> {
    v.view().into_dimensionality().expect("expected 3-d value")
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: ArrayD<f64>, back: Option<BackFn>) -> Var {
        self.nodes.push(Node { value, back });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients accumulate here; whether anyone reads them is
    /// the caller's business, so constants and parameters share this entry
    /// point.
    pub fn input<A: Into<ArrayD<f64>>>(&mut self, value: A) -> Var {
        self.push(value.into(), None)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.push(ArrayD::from_elem(IxDyn(&[]), x), None)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        *self.nodes[v.0].value.first().expect("empty node value")
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<ArrayD<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(ArrayD::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let g = match &grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            if let Some(back) = &self.nodes[i].back {
                back(&g, &mut |pid, contrib| {
                    match &mut grads[pid] {
                        Some(acc) => *acc += &contrib,
                        slot => *slot = Some(contrib),
                    };
                });
            }
        }
        Gradients { grads }
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value + &self.nodes[b.0].value;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, g.clone());
            })),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = &self.nodes[a.0].value - &self.nodes[b.0].value;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g.clone());
                sink(b.0, -g.clone());
            })),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let value = &av * &bv;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &bv);
                sink(b.0, g * &av);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = &self.nodes[a.0].value * c;
        self.push(
            value,
            Some(Box::new(move |g, sink| sink(a.0, g * c))),
        )
    }

    /// Broadcast multiply by a 0-d scalar node.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let sv = self.scalar_value(s);
        let value = &av * sv;
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * sv);
                let ds = (g * &av).sum();
                sink(s.0, ArrayD::from_elem(IxDyn(&[]), ds));
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::exp);
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, sink| sink(a.0, g * &out))),
        )
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let value = av.mapv(|x| 1.0 / x);
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &av.mapv(|x| -1.0 / (x * x)));
            })),
        )
    }

    /// Element-wise square root; callers must keep inputs positive.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(f64::sqrt);
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &out.mapv(|y| 0.5 / y));
            })),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.nodes[a.0].value.mapv(|x| 1.0 / (1.0 + (-x).exp()));
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &out.mapv(|y| y * (1.0 - y)));
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let value = av.mapv(|x| x.max(0.0));
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                sink(a.0, g * &av.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 }));
            })),
        )
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn max_elem(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.clone();
        let bv = self.nodes[b.0].value.clone();
        let mut value = av.clone();
        value.zip_mut_with(&bv, |x, &y| *x = x.max(y));
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let mut ga = g.clone();
                let mut gb = g.clone();
                ndarray::Zip::from(&mut ga).and(&av).and(&bv).for_each(|gi, &x, &y| {
                    if x < y {
                        *gi = 0.0;
                    }
                });
                ndarray::Zip::from(&mut gb).and(&av).and(&bv).for_each(|gi, &x, &y| {
                    if x >= y {
                        *gi = 0.0;
                    }
                });
                sink(a.0, ga);
                sink(b.0, gb);
            })),
        )
    }

    // ---- reductions ----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let shape: Vec<usize> = self.nodes[a.0].value.shape().to_vec();
        let value = ArrayD::from_elem(IxDyn(&[]), self.nodes[a.0].value.sum());
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gv = *g.first().unwrap();
                sink(a.0, ArrayD::from_elem(IxDyn(&shape), gv));
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len() as f64;
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n)
    }

    /// Global average pool: [C,H,W] -> [C].
    pub fn gap(&mut self, a: Var) -> Var {
        let av = a3(&self.nodes[a.0].value).to_owned();
        let (c, h, w) = av.dim();
        let n = (h * w) as f64;
        let value = av.map_axis(Axis(2), |r| r.sum()).map_axis(Axis(1), |r| r.sum()) / n;
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = a1(g);
                let mut out = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    out.index_axis_mut(Axis(0), ci).fill(g1[ci] / n);
                }
                sink(a.0, out.into_dyn());
            })),
        )
    }

    /// Mean over a row band `r0..r1` and all columns: [C,H,W] -> [C].
    pub fn row_band_mean(&mut self, a: Var, r0: usize, r1: usize) -> Var {
        let av = a3(&self.nodes[a.0].value).to_owned();
        let (c, h, w) = av.dim();
        assert!(r0 < r1 && r1 <= h, "row band out of bounds");
        let n = ((r1 - r0) * w) as f64;
        let mut value = Array1::<f64>::zeros(c);
        for ci in 0..c {
            let mut s = 0.0;
            for y in r0..r1 {
                for x in 0..w {
                    s += av[[ci, y, x]];
                }
            }
            value[ci] = s / n;
        }
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = a1(g);
                let mut out = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for y in r0..r1 {
                        for x in 0..w {
                            out[[ci, y, x]] = g1[ci] / n;
                        }
                    }
                }
                sink(a.0, out.into_dyn());
            })),
        )
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let av = a2(&self.nodes[a.0].value).to_owned();
        let bv = a2(&self.nodes[b.0].value).to_owned();
        let value = av.dot(&bv);
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = a2(g);
                sink(a.0, g2.dot(&bv.t()).into_dyn());
                sink(b.0, av.t().dot(&g2).into_dyn());
            })),
        )
    }

    /// y = W x, W: [m,k], x: [k] -> [m].
    pub fn linear(&mut self, w: Var, x: Var) -> Var {
        let wv = a2(&self.nodes[w.0].value).to_owned();
        let xv = a1(&self.nodes[x.0].value).to_owned();
        let value = wv.dot(&xv);
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = a1(g).to_owned();
                sink(w.0, outer(&g1, &xv).into_dyn());
                sink(x.0, wv.t().dot(&g1).into_dyn());
            })),
        )
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        let m = self.mul(a, b);
        self.sum_all(m)
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = a1(&self.nodes[x.0].value).to_owned();
        let norm = xv.dot(&xv).sqrt().max(1e-12);
        let value = &xv / norm;
        let out = value.clone();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = a1(g).to_owned();
                let gdot = g1.dot(&out);
                sink(x.0, ((&g1 - &(&out * gdot)) / norm).into_dyn());
            })),
        )
    }

    // ---- convolutions ----

    /// 1x1 convolution: w [Co,Ci], x [Ci,H,W] (+ optional bias [Co]).
    pub fn conv1x1(&mut self, w: Var, x: Var, bias: Option<Var>) -> Var {
        let wv = a2(&self.nodes[w.0].value).to_owned();
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let (ci, h, wd) = xv.dim();
        let co = wv.nrows();
        assert_eq!(wv.ncols(), ci, "conv1x1 channel mismatch");
        let xm = xv.into_shape_with_order((ci, h * wd)).unwrap();
        let mut ym = wv.dot(&xm);
        if let Some(b) = bias {
            let bv = a1(&self.nodes[b.0].value).to_owned();
            for c in 0..co {
                ym.row_mut(c).mapv_inplace(|v| v + bv[c]);
            }
        }
        let value = ym.into_shape_with_order((co, h, wd)).unwrap();
        let xm2 = a3(&self.nodes[x.0].value)
            .to_owned()
            .into_shape_with_order((ci, h * wd))
            .unwrap();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let gm = g3.into_shape_with_order((co, h * wd)).unwrap();
                sink(w.0, gm.dot(&xm2.t()).into_dyn());
                sink(
                    x.0,
                    wv.t()
                        .dot(&gm)
                        .into_shape_with_order((ci, h, wd))
                        .unwrap()
                        .into_dyn(),
                );
                if let Some(b) = bias {
                    sink(b.0, gm.sum_axis(Axis(1)).into_dyn());
                }
            })),
        )
    }

    /// Dense 2-d convolution with same padding, odd square kernel.
    /// w: [Co,Ci,K,K], x: [Ci,H,W].
    pub fn conv2d(&mut self, w: Var, x: Var, bias: Option<Var>) -> Var {
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .expect("conv2d weight must be 4-d")
            .to_owned();
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let (co, ci, k, _) = wv.dim();
        let (cix, h, wd) = xv.dim();
        assert_eq!(ci, cix, "conv2d channel mismatch");
        assert!(k % 2 == 1, "conv2d kernel must be odd");
        let p = (k / 2) as isize;
        let mut out = Array3::<f64>::zeros((co, h, wd));
        for o in 0..co {
            for c in 0..ci {
                for y in 0..h as isize {
                    for xp in 0..wd as isize {
                        let mut s = 0.0;
                        for dy in 0..k as isize {
                            for dx in 0..k as isize {
                                let sy = y + dy - p;
                                let sx = xp + dx - p;
                                if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                    s += wv[[o, c, dy as usize, dx as usize]]
                                        * xv[[c, sy as usize, sx as usize]];
                                }
                            }
                        }
                        out[[o, y as usize, xp as usize]] += s;
                    }
                }
            }
            if let Some(b) = bias {
                let bv = self.scalar_at(b, o);
                out.index_axis_mut(Axis(0), o).mapv_inplace(|v| v + bv);
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gw = ndarray::Array4::<f64>::zeros((co, ci, k, k));
                let mut gx = Array3::<f64>::zeros((ci, h, wd));
                for o in 0..co {
                    for c in 0..ci {
                        for y in 0..h as isize {
                            for xp in 0..wd as isize {
                                let gv = g3[[o, y as usize, xp as usize]];
                                if gv == 0.0 {
                                    continue;
                                }
                                for dy in 0..k as isize {
                                    for dx in 0..k as isize {
                                        let sy = y + dy - p;
                                        let sx = xp + dx - p;
                                        if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize
                                        {
                                            gw[[o, c, dy as usize, dx as usize]] +=
                                                gv * xv[[c, sy as usize, sx as usize]];
                                            gx[[c, sy as usize, sx as usize]] +=
                                                gv * wv[[o, c, dy as usize, dx as usize]];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                sink(w.0, gw.into_dyn());
                sink(x.0, gx.into_dyn());
                if let Some(b) = bias {
                    let gb = g3
                        .map_axis(Axis(2), |r| r.sum())
                        .map_axis(Axis(1), |r| r.sum());
                    sink(b.0, gb.into_dyn());
                }
            })),
        )
    }

    fn scalar_at(&self, v: Var, i: usize) -> f64 {
        a1(&self.nodes[v.0].value)[i]
    }

    /// Depth-wise convolution, same padding, odd square kernel.
    /// w: [C,K,K], x: [C,H,W].
    pub fn depthwise(&mut self, w: Var, x: Var, bias: Option<Var>) -> Var {
        let wv = a3(&self.nodes[w.0].value).to_owned();
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let (c, k, _) = wv.dim();
        let (cx, h, wd) = xv.dim();
        assert_eq!(c, cx, "depthwise channel mismatch");
        assert!(k % 2 == 1, "depthwise kernel must be odd");
        let p = (k / 2) as isize;
        let mut out = Array3::<f64>::zeros((c, h, wd));
        for ci in 0..c {
            for y in 0..h as isize {
                for xp in 0..wd as isize {
                    let mut s = 0.0;
                    for dy in 0..k as isize {
                        for dx in 0..k as isize {
                            let sy = y + dy - p;
                            let sx = xp + dx - p;
                            if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                s += wv[[ci, dy as usize, dx as usize]]
                                    * xv[[ci, sy as usize, sx as usize]];
                            }
                        }
                    }
                    out[[ci, y as usize, xp as usize]] = s;
                }
            }
            if let Some(b) = bias {
                let bv = self.scalar_at(b, ci);
                out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v + bv);
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gw = Array3::<f64>::zeros((c, k, k));
                let mut gx = Array3::<f64>::zeros((c, h, wd));
                for ci in 0..c {
                    for y in 0..h as isize {
                        for xp in 0..wd as isize {
                            let gv = g3[[ci, y as usize, xp as usize]];
                            if gv == 0.0 {
                                continue;
                            }
                            for dy in 0..k as isize {
                                for dx in 0..k as isize {
                                    let sy = y + dy - p;
                                    let sx = xp + dx - p;
                                    if sy >= 0 && sy < h as isize && sx >= 0 && sx < wd as isize {
                                        gw[[ci, dy as usize, dx as usize]] +=
                                            gv * xv[[ci, sy as usize, sx as usize]];
                                        gx[[ci, sy as usize, sx as usize]] +=
                                            gv * wv[[ci, dy as usize, dx as usize]];
                                    }
                                }
                            }
                        }
                    }
                }
                sink(w.0, gw.into_dyn());
                sink(x.0, gx.into_dyn());
                if let Some(b) = bias {
                    let gb = g3
                        .map_axis(Axis(2), |r| r.sum())
                        .map_axis(Axis(1), |r| r.sum());
                    sink(b.0, gb.into_dyn());
                }
            })),
        )
    }

    // ---- normalization / structure ----

    /// Layer norm over the channel axis at every spatial position,
    /// with learnable gain/bias of shape [C].
    pub fn layer_norm_ch(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let gv = a1(&self.nodes[gain.0].value).to_owned();
        let bv = a1(&self.nodes[bias.0].value).to_owned();
        let (c, h, w) = xv.dim();
        let cf = c as f64;
        let mut out = Array3::<f64>::zeros((c, h, w));
        let mut mu = Array2::<f64>::zeros((h, w));
        let mut inv_sd = Array2::<f64>::zeros((h, w));
        for y in 0..h {
            for xp in 0..w {
                let mut m = 0.0;
                for ci in 0..c {
                    m += xv[[ci, y, xp]];
                }
                m /= cf;
                let mut v = 0.0;
                for ci in 0..c {
                    let d = xv[[ci, y, xp]] - m;
                    v += d * d;
                }
                v /= cf;
                let isd = 1.0 / (v + eps).sqrt();
                mu[[y, xp]] = m;
                inv_sd[[y, xp]] = isd;
                for ci in 0..c {
                    out[[ci, y, xp]] = (xv[[ci, y, xp]] - m) * isd * gv[ci] + bv[ci];
                }
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                let mut gg = Array1::<f64>::zeros(c);
                let mut gb = Array1::<f64>::zeros(c);
                for y in 0..h {
                    for xp in 0..w {
                        let m = mu[[y, xp]];
                        let isd = inv_sd[[y, xp]];
                        // xhat_c = (x_c - m) * isd
                        let mut sum_gy = 0.0;
                        let mut sum_gy_xhat = 0.0;
                        for ci in 0..c {
                            let xhat = (xv[[ci, y, xp]] - m) * isd;
                            let gyc = g3[[ci, y, xp]] * gv[ci];
                            sum_gy += gyc;
                            sum_gy_xhat += gyc * xhat;
                            gg[ci] += g3[[ci, y, xp]] * xhat;
                            gb[ci] += g3[[ci, y, xp]];
                        }
                        for ci in 0..c {
                            let xhat = (xv[[ci, y, xp]] - m) * isd;
                            let gyc = g3[[ci, y, xp]] * gv[ci];
                            gx[[ci, y, xp]] =
                                isd * (gyc - sum_gy / cf - xhat * sum_gy_xhat / cf);
                        }
                    }
                }
                sink(x.0, gx.into_dyn());
                sink(gain.0, gg.into_dyn());
                sink(bias.0, gb.into_dyn());
            })),
        )
    }

    /// Bilinear x2 upsampling of [C,H,W] -> [C,2H,2W] (half-pixel centers).
    pub fn upsample2(&mut self, x: Var) -> Var {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let (c, h, w) = xv.dim();
        let taps = bilinear_up2_taps(h, w);
        let mut out = Array3::<f64>::zeros((c, 2 * h, 2 * w));
        for ci in 0..c {
            for (oy, ox, sy, sx, wt) in &taps {
                out[[ci, *oy, *ox]] += wt * xv[[ci, *sy, *sx]];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for (oy, ox, sy, sx, wt) in &taps {
                        gx[[ci, *sy, *sx]] += wt * g3[[ci, *oy, *ox]];
                    }
                }
                sink(x.0, gx.into_dyn());
            })),
        )
    }

    /// Orthonormal single-level 2-d Haar analysis; returns (LL, LH, HL, HH).
    pub fn dwt2(&mut self, x: Var) -> (Var, Var, Var, Var) {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let bands = wavelet::dwt2(&xv).expect("dwt2 on odd-sized grid inside tape");
        let mk = |tape: &mut Tape, band: Array3<f64>, which: usize| {
            tape.push(
                band.into_dyn(),
                Some(Box::new(move |g: &ArrayD<f64>, sink: &mut dyn FnMut(usize, ArrayD<f64>)| {
                    let g3 = a3(g).to_owned();
                    let z = Array3::<f64>::zeros(g3.dim());
                    let sel = |i: usize| if i == which { &g3 } else { &z };
                    let back = wavelet::idwt2(sel(0), sel(1), sel(2), sel(3))
                        .expect("idwt2 adjoint shape mismatch");
                    sink(x.0, back.into_dyn());
                })),
            )
        };
        let ll = mk(self, bands.ll, 0);
        let lh = mk(self, bands.lh, 1);
        let hl = mk(self, bands.hl, 2);
        let hh = mk(self, bands.hh, 3);
        (ll, lh, hl, hh)
    }

    /// Orthonormal single-level 2-d Haar synthesis from four bands.
    pub fn idwt2(&mut self, ll: Var, lh: Var, hl: Var, hh: Var) -> Var {
        let llv = a3(&self.nodes[ll.0].value).to_owned();
        let lhv = a3(&self.nodes[lh.0].value).to_owned();
        let hlv = a3(&self.nodes[hl.0].value).to_owned();
        let hhv = a3(&self.nodes[hh.0].value).to_owned();
        let value = wavelet::idwt2(&llv, &lhv, &hlv, &hhv).expect("idwt2 band shape mismatch");
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let bands = wavelet::dwt2(&g3).expect("dwt2 adjoint on odd grid");
                sink(ll.0, bands.ll.into_dyn());
                sink(lh.0, bands.lh.into_dyn());
                sink(hl.0, bands.hl.into_dyn());
                sink(hh.0, bands.hh.into_dyn());
            })),
        )
    }

    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Array3<f64>> = parts
            .iter()
            .map(|p| a3(&self.nodes[p.0].value).to_owned())
            .collect();
        let (_, h, w) = views[0].dim();
        let total: usize = views.iter().map(|v| v.dim().0).sum();
        let mut out = Array3::<f64>::zeros((total, h, w));
        let mut off = 0;
        let mut spans = Vec::new();
        for v in &views {
            let c = v.dim().0;
            out.slice_mut(ndarray::s![off..off + c, .., ..]).assign(v);
            spans.push((off, c));
            off += c;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g);
                for (i, (off, c)) in spans.iter().enumerate() {
                    sink(
                        ids[i],
                        g3.slice(ndarray::s![*off..*off + *c, .., ..]).to_owned().into_dyn(),
                    );
                }
            })),
        )
    }

    /// Concatenate 1-d vectors.
    pub fn concat_vec(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let views: Vec<Array1<f64>> = parts
            .iter()
            .map(|p| a1(&self.nodes[p.0].value).to_owned())
            .collect();
        let total: usize = views.iter().map(|v| v.len()).sum();
        let mut out = Array1::<f64>::zeros(total);
        let mut spans = Vec::new();
        let mut off = 0;
        for v in &views {
            out.slice_mut(ndarray::s![off..off + v.len()]).assign(v);
            spans.push((off, v.len()));
            off += v.len();
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = a1(g);
                for (i, (off, n)) in spans.iter().enumerate() {
                    sink(ids[i], g1.slice(ndarray::s![*off..*off + *n]).to_owned().into_dyn());
                }
            })),
        )
    }

    /// View a 0-d scalar as a length-1 vector.
    pub fn reshape_to_vec1(&mut self, s: Var) -> Var {
        let v = self.nodes[s.0].value.clone();
        assert_eq!(v.len(), 1, "reshape_to_vec1 expects a scalar");
        let shape = v.raw_dim();
        let out = v.into_shape_with_order(IxDyn(&[1])).expect("scalar reshape");
        self.push(
            out,
            Some(Box::new(move |g, sink| {
                sink(
                    s.0,
                    g.clone().into_shape_with_order(shape.clone()).expect("scalar reshape back"),
                );
            })),
        )
    }

    /// out[c,i,j] = x[c,i,j] * s[c].
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Var {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let sv = a1(&self.nodes[s.0].value).to_owned();
        let (c, h, w) = xv.dim();
        let mut out = xv.clone();
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ci).mapv_inplace(|v| v * sv[ci]);
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                let mut gs = Array1::<f64>::zeros(c);
                for ci in 0..c {
                    let gp = g3.index_axis(Axis(0), ci);
                    let xp = xv.index_axis(Axis(0), ci);
                    gx.index_axis_mut(Axis(0), ci).assign(&(&gp * sv[ci]));
                    gs[ci] = (&gp * &xp).sum();
                }
                sink(x.0, gx.into_dyn());
                sink(s.0, gs.into_dyn());
            })),
        )
    }

    /// out[c,i,j] = x[c,i,j] * m[i,j].
    pub fn spatial_scale(&mut self, x: Var, m: Var) -> Var {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let mv = a2(&self.nodes[m.0].value).to_owned();
        let (c, h, w) = xv.dim();
        let mut out = xv.clone();
        for ci in 0..c {
            out.index_axis_mut(Axis(0), ci).zip_mut_with(&mv, |v, &s| *v *= s);
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                let mut gm = Array2::<f64>::zeros((h, w));
                for ci in 0..c {
                    let gp = g3.index_axis(Axis(0), ci);
                    let xp = xv.index_axis(Axis(0), ci);
                    gx.index_axis_mut(Axis(0), ci).assign(&(&gp * &mv));
                    gm += &(&gp * &xp);
                }
                sink(x.0, gx.into_dyn());
                sink(m.0, gm.into_dyn());
            })),
        )
    }

    /// Stack [H,W] maps into [K,H,W].
    pub fn stack_maps(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let maps: Vec<Array2<f64>> = parts
            .iter()
            .map(|p| a2(&self.nodes[p.0].value).to_owned())
            .collect();
        let (h, w) = maps[0].dim();
        let k = maps.len();
        let mut out = Array3::<f64>::zeros((k, h, w));
        for (i, m) in maps.iter().enumerate() {
            out.index_axis_mut(Axis(0), i).assign(m);
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g);
                for (i, id) in ids.iter().enumerate() {
                    sink(*id, g3.index_axis(Axis(0), i).to_owned().into_dyn());
                }
            })),
        )
    }

    /// out[k] = x[k,:,:] as a [H,W] map.
    pub fn unstack_map(&mut self, x: Var, k: usize) -> Var {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let dim = xv.dim();
        let value = xv.index_axis(Axis(0), k).to_owned();
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g2 = a2(g);
                let mut gx = Array3::<f64>::zeros(dim);
                gx.index_axis_mut(Axis(0), k).assign(&g2);
                sink(x.0, gx.into_dyn());
            })),
        )
    }

    /// Softmax across axis 0 of [K,H,W] (per spatial position).
    pub fn softmax_axis0(&mut self, x: Var) -> Var {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let (k, h, w) = xv.dim();
        let mut out = Array3::<f64>::zeros((k, h, w));
        for y in 0..h {
            for xp in 0..w {
                let mut mx = f64::NEG_INFINITY;
                for ki in 0..k {
                    mx = mx.max(xv[[ki, y, xp]]);
                }
                let mut z = 0.0;
                for ki in 0..k {
                    let e = (xv[[ki, y, xp]] - mx).exp();
                    out[[ki, y, xp]] = e;
                    z += e;
                }
                for ki in 0..k {
                    out[[ki, y, xp]] /= z;
                }
            }
        }
        let sv = out.clone();
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gx = Array3::<f64>::zeros((k, h, w));
                for y in 0..h {
                    for xp in 0..w {
                        let mut dotp = 0.0;
                        for ki in 0..k {
                            dotp += g3[[ki, y, xp]] * sv[[ki, y, xp]];
                        }
                        for ki in 0..k {
                            gx[[ki, y, xp]] = sv[[ki, y, xp]] * (g3[[ki, y, xp]] - dotp);
                        }
                    }
                }
                sink(x.0, gx.into_dyn());
            })),
        )
    }

    /// Log-softmax of a logit vector [K].
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let xv = a1(&self.nodes[x.0].value).to_owned();
        let mx = xv.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let lse = mx + xv.mapv(|v| (v - mx).exp()).sum().ln();
        let value = &xv - lse;
        let probs = value.mapv(f64::exp);
        self.push(
            value.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g1 = a1(g).to_owned();
                let gsum = g1.sum();
                sink(x.0, (&g1 - &(&probs * gsum)).into_dyn());
            })),
        )
    }

    /// Negative log-likelihood: picks -logp[label] from a log-prob vector.
    pub fn nll(&mut self, logp: Var, label: usize) -> Var {
        let n = self.nodes[logp.0].value.len();
        let value = ArrayD::from_elem(IxDyn(&[]), -a1(&self.nodes[logp.0].value)[label]);
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gv = *g.first().unwrap();
                let mut out = Array1::<f64>::zeros(n);
                out[label] = -gv;
                sink(logp.0, out.into_dyn());
            })),
        )
    }

    pub fn cross_entropy(&mut self, logits: Var, label: usize) -> Var {
        let lp = self.log_softmax(logits);
        self.nll(lp, label)
    }

    /// Sum of per-coordinate smooth-L1 against a constant target (beta = 1).
    pub fn smooth_l1_sum(&mut self, pred: Var, target: &Array1<f64>) -> Var {
        let pv = a1(&self.nodes[pred.0].value).to_owned();
        let tv = target.clone();
        let mut s = 0.0;
        for (p, t) in pv.iter().zip(tv.iter()) {
            let d = (p - t).abs();
            s += if d < 1.0 { 0.5 * d * d } else { d - 0.5 };
        }
        let value = ArrayD::from_elem(IxDyn(&[]), s);
        self.push(
            value,
            Some(Box::new(move |g, sink| {
                let gv = *g.first().unwrap();
                let mut out = Array1::<f64>::zeros(pv.len());
                for i in 0..pv.len() {
                    let d = pv[i] - tv[i];
                    out[i] = gv * if d.abs() < 1.0 { d } else { d.signum() };
                }
                sink(pred.0, out.into_dyn());
            })),
        )
    }

    /// RoI-align crop: bilinear sampling of [C,H,W] at an `out_h` x `out_w`
    /// grid of bin centers inside `bbox` (feature-space coords).
    pub fn roi_align(
        &mut self,
        x: Var,
        bbox: (f64, f64, f64, f64),
        out_h: usize,
        out_w: usize,
    ) -> Var {
        let xv = a3(&self.nodes[x.0].value).to_owned();
        let (c, h, w) = xv.dim();
        let taps = roi_align_taps(bbox, out_h, out_w, h, w);
        let mut out = Array3::<f64>::zeros((c, out_h, out_w));
        for ci in 0..c {
            for t in &taps {
                out[[ci, t.oy, t.ox]] += t.weight * xv[[ci, t.sy, t.sx]];
            }
        }
        self.push(
            out.into_dyn(),
            Some(Box::new(move |g, sink| {
                let g3 = a3(g).to_owned();
                let mut gx = Array3::<f64>::zeros((c, h, w));
                for ci in 0..c {
                    for t in &taps {
                        gx[[ci, t.sy, t.sx]] += t.weight * g3[[ci, t.oy, t.ox]];
                    }
                }
                sink(x.0, gx.into_dyn());
            })),
        )
    }
}

fn outer(a: &Array1<f64>, b: &Array1<f64>) -> Array2<f64> {
    let mut out = Array2::<f64>::zeros((a.len(), b.len()));
    for i in 0..a.len() {
        for j in 0..b.len() {
            out[[i, j]] = a[i] * b[j];
        }
    }
    out
}

/// (out_y, out_x, src_y, src_x, weight) taps for half-pixel bilinear x2.
fn bilinear_up2_taps(h: usize, w: usize) -> Vec<(usize, usize, usize, usize, f64)> {
    let mut taps = Vec::new();
    for oy in 0..2 * h {
        for ox in 0..2 * w {
            let sy = (oy as f64 + 0.5) / 2.0 - 0.5;
            let sx = (ox as f64 + 0.5) / 2.0 - 0.5;
            for (y, x, wt) in bilinear_weights(sy, sx, h, w) {
                taps.push((oy, ox, y, x, wt));
            }
        }
    }
    taps
}

/// Bilinear interpolation taps at a continuous point, clamped to bounds.
pub(crate) fn bilinear_weights(sy: f64, sx: f64, h: usize, w: usize) -> Vec<(usize, usize, f64)> {
    let y0f = sy.floor();
    let x0f = sx.floor();
    let fy = sy - y0f;
    let fx = sx - x0f;
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let y0 = clamp(y0f as isize, h);
    let y1 = clamp(y0f as isize + 1, h);
    let x0 = clamp(x0f as isize, w);
    let x1 = clamp(x0f as isize + 1, w);
    vec![
        (y0, x0, (1.0 - fy) * (1.0 - fx)),
        (y0, x1, (1.0 - fy) * fx),
        (y1, x0, fy * (1.0 - fx)),
        (y1, x1, fy * fx),
    ]
}

pub(crate) struct RoiTap {
    pub oy: usize,
    pub ox: usize,
    pub sy: usize,
    pub sx: usize,
    pub weight: f64,
}

/// One bilinear sample per output bin, taken at the bin center.
pub(crate) fn roi_align_taps(
    bbox: (f64, f64, f64, f64),
    out_h: usize,
    out_w: usize,
    h: usize,
    w: usize,
) -> Vec<RoiTap> {
    let (x1, y1, x2, y2) = bbox;
    let bw = x2 - x1;
    let bh = y2 - y1;
    let mut taps = Vec::with_capacity(out_h * out_w * 4);
    for oy in 0..out_h {
        for ox in 0..out_w {
            let sy = y1 + (oy as f64 + 0.5) * bh / out_h as f64 - 0.5;
            let sx = x1 + (ox as f64 + 0.5) * bw / out_w as f64 - 0.5;
            for (y, x, wt) in bilinear_weights(sy, sx, h, w) {
                taps.push(RoiTap {
                    oy,
                    ox,
                    sy: y,
                    sx: x,
                    weight: wt,
                });
            }
        }
    }
    taps
}

pub mod check {
    //! Central finite-difference gradient checking.

    use super::{Tape, Var};
    use ndarray::ArrayD;

    /// Max relative error between the analytic gradient of `loss` w.r.t.
    /// each input and a central finite difference. `build` must construct
    /// the same scalar loss from the given input values every time.
    pub fn max_rel_error(
        inputs: &[ArrayD<f64>],
        build: &dyn Fn(&mut Tape, &[Var]) -> Var,
        eps: f64,
    ) -> f64 {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|a| tape.input(a.clone())).collect();
        let loss = build(&mut tape, &vars);
        assert!(tape.value(loss).ndim() == 0, "gradcheck loss must be scalar");
        let grads = tape.backward(loss);

        let eval = |xs: &[ArrayD<f64>]| -> f64 {
            let mut t = Tape::new();
            let vs: Vec<Var> = xs.iter().map(|a| t.input(a.clone())).collect();
            let l = build(&mut t, &vs);
            t.scalar_value(l)
        };

        let mut worst = 0.0f64;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[i], input.shape());
            let mut perturbed: Vec<ArrayD<f64>> = inputs.to_vec();
            for idx in 0..input.len() {
                let orig = perturbed[i].as_slice_mut().unwrap()[idx];
                perturbed[i].as_slice_mut().unwrap()[idx] = orig + eps;
                let fp = eval(&perturbed);
                perturbed[i].as_slice_mut().unwrap()[idx] = orig - eps;
                let fm = eval(&perturbed);
                perturbed[i].as_slice_mut().unwrap()[idx] = orig;
                let numeric = (fp - fm) / (2.0 * eps);
                let a = analytic.as_slice().unwrap()[idx];
                let denom = a.abs().max(numeric.abs()).max(1.0);
                worst = worst.max((a - numeric).abs() / denom);
            }
        }
        worst
    }
}

#[cfg(test)]
mod tests {
    use super::check::max_rel_error;
    use super::*;
    use ndarray::{arr1, arr2, Array3, Array4};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_fn(IxDyn(shape), |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn add_mul_values() {
        let mut t = Tape::new();
        let a = t.input(arr1(&[1.0, 2.0]).into_dyn());
        let b = t.input(arr1(&[3.0, 4.0]).into_dyn());
        let c = t.add(a, b);
        let d = t.mul(c, b);
        assert_eq!(t.value(d).as_slice().unwrap(), &[12.0, 24.0]);
    }

    #[test]
    fn grad_of_product_chain() {
        let worst = max_rel_error(
            &[rand_arr(&[3, 4], 1), rand_arr(&[3, 4], 2)],
            &|t, vs| {
                let m = t.mul(vs[0], vs[1]);
                let e = t.exp(m);
                t.sum_all(e)
            },
            1e-5,
        );
        assert!(worst < 1e-7, "worst rel err {worst}");
    }

    #[test]
    fn grad_conv_ops() {
        let w = rand_arr(&[3, 2], 3);
        let x = rand_arr(&[2, 4, 4], 4);
        let worst = max_rel_error(
            &[w, x],
            &|t, vs| {
                let y = t.conv1x1(vs[0], vs[1], None);
                let s = t.sigmoid(y);
                t.sum_all(s)
            },
            1e-5,
        );
        assert!(worst < 1e-7, "conv1x1 rel err {worst}");

        let w4 = Array4::<f64>::from_shape_fn((2, 2, 3, 3), |(a, b, c, d)| {
            ((a + 2 * b + 3 * c + 5 * d) as f64 * 0.7).sin()
        })
        .into_dyn();
        let worst = max_rel_error(
            &[w4, rand_arr(&[2, 5, 5], 5)],
            &|t, vs| {
                let y = t.conv2d(vs[0], vs[1], None);
                t.sum_all(y)
            },
            1e-5,
        );
        assert!(worst < 1e-7, "conv2d rel err {worst}");

        let worst = max_rel_error(
            &[rand_arr(&[2, 3, 3], 6), rand_arr(&[2, 5, 5], 7)],
            &|t, vs| {
                let y = t.depthwise(vs[0], vs[1], None);
                let y = t.relu(y);
                t.sum_all(y)
            },
            1e-5,
        );
        assert!(worst < 1e-6, "depthwise rel err {worst}");
    }

    #[test]
    fn grad_layer_norm_and_softmax() {
        let worst = max_rel_error(
            &[rand_arr(&[3, 2, 2], 8), rand_arr(&[3], 9), rand_arr(&[3], 10)],
            &|t, vs| {
                let y = t.layer_norm_ch(vs[0], vs[1], vs[2], 1e-5);
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            1e-5,
        );
        assert!(worst < 1e-6, "layer norm rel err {worst}");

        let worst = max_rel_error(
            &[rand_arr(&[4, 3, 3], 11), rand_arr(&[4, 3, 3], 12)],
            &|t, vs| {
                let s = t.softmax_axis0(vs[0]);
                let m = t.mul(s, vs[1]);
                t.sum_all(m)
            },
            1e-5,
        );
        assert!(worst < 1e-6, "softmax rel err {worst}");
    }

    #[test]
    fn grad_wavelet_roundtrip_ops() {
        let worst = max_rel_error(
            &[rand_arr(&[2, 4, 4], 13)],
            &|t, vs| {
                let (ll, lh, hl, hh) = t.dwt2(vs[0]);
                let lh2 = t.scale(lh, 0.3);
                let y = t.idwt2(ll, lh2, hl, hh);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-5,
        );
        assert!(worst < 1e-7, "wavelet rel err {worst}");
    }

    #[test]
    fn grad_upsample_roi_and_losses() {
        let worst = max_rel_error(
            &[rand_arr(&[2, 3, 3], 14)],
            &|t, vs| {
                let y = t.upsample2(vs[0]);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-5,
        );
        assert!(worst < 1e-7, "upsample rel err {worst}");

        let worst = max_rel_error(
            &[rand_arr(&[2, 6, 6], 15)],
            &|t, vs| {
                let y = t.roi_align(vs[0], (1.2, 0.8, 4.7, 5.1), 3, 3);
                let y = t.mul(y, y);
                t.sum_all(y)
            },
            1e-5,
        );
        assert!(worst < 1e-7, "roi_align rel err {worst}");

        let worst = max_rel_error(
            &[rand_arr(&[4], 16)],
            &|t, vs| t.cross_entropy(vs[0], 2),
            1e-5,
        );
        assert!(worst < 1e-8, "cross entropy rel err {worst}");

        let target = arr1(&[0.3, -2.0, 0.9, 0.0]);
        let worst = max_rel_error(
            &[rand_arr(&[4], 17)],
            &|t, vs| t.smooth_l1_sum(vs[0], &target),
            1e-5,
        );
        assert!(worst < 1e-7, "smooth l1 rel err {worst}");
    }

    #[test]
    fn grad_vector_ops() {
        let worst = max_rel_error(
            &[rand_arr(&[5], 18), rand_arr(&[5], 19)],
            &|t, vs| {
                let n = t.l2_normalize(vs[0]);
                t.dot(n, vs[1])
            },
            1e-6,
        );
        assert!(worst < 1e-6, "l2 normalize rel err {worst}");

        let worst = max_rel_error(
            &[rand_arr(&[3, 4], 20), rand_arr(&[4], 21)],
            &|t, vs| {
                let y = t.linear(vs[0], vs[1]);
                let y = t.sigmoid(y);
                t.sum_all(y)
            },
            1e-5,
        );
        assert!(worst < 1e-7, "linear rel err {worst}");
    }

    #[test]
    fn matmul_matches_ndarray() {
        let mut t = Tape::new();
        let a = t.input(arr2(&[[1.0, 2.0], [3.0, 4.0]]).into_dyn());
        let b = t.input(arr2(&[[5.0, 6.0], [7.0, 8.0]]).into_dyn());
        let c = t.matmul(a, b);
        assert_eq!(
            t.value(c).as_slice().unwrap(),
            &[19.0, 22.0, 43.0, 50.0]
        );
    }

    #[test]
    fn max_elem_routes_grads_to_winner() {
        let mut t = Tape::new();
        let a = t.input(arr1(&[1.0, 5.0]).into_dyn());
        let b = t.input(arr1(&[2.0, 3.0]).into_dyn());
        let m = t.max_elem(a, b);
        let s = t.sum_all(m);
        let g = t.backward(s);
        assert_eq!(g.get(a).unwrap().as_slice().unwrap(), &[0.0, 1.0]);
        assert_eq!(g.get(b).unwrap().as_slice().unwrap(), &[1.0, 0.0]);
    }

    #[test]
    fn constant_map_upsamples_to_constant() {
        let mut t = Tape::new();
        let x = t.input(Array3::from_elem((1, 3, 3), 2.5).into_dyn());
        let y = t.upsample2(x);
        for v in t.value(y).iter() {
            assert!((v - 2.5).abs() < 1e-12);
        }
    }
}
