//! Reverse-mode automatic differentiation over dense `f64` arrays.
//!
//! A [`Graph`] is a tape: every op appends a node holding its value and,
//! when any input requires a gradient, a closure computing the
//! vector-Jacobian product. Nodes are stored in creation order, so a single
//! reverse sweep in [`Graph::backward`] is a valid topological traversal.
//!
//! Feature maps use the `[batch, channels, height, width]` layout.

pub mod gradcheck;
pub mod kernels;

use ndarray::{concatenate, Array1, ArrayD, Axis, IxDyn, Slice, Zip};

use crate::error::{Error, Result};
use kernels::ConvGeom;

pub type Tensor = ArrayD<f64>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct Ctx<'a> {
    grad: &'a Tensor,
    inputs: Vec<&'a Tensor>,
    output: &'a Tensor,
    needs: Vec<bool>,
}

type BackwardFn = Box<dyn Fn(&Ctx<'_>) -> Vec<Option<Tensor>>>;

struct Node {
    value: Tensor,
    parents: Vec<usize>,
    backward: Option<BackwardFn>,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    macs: u64,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient for `v`, or zeros of `shape` if nothing reached it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(IxDyn(shape)))
    }
}

fn sum_to_shape(mut g: Tensor, shape: &[usize]) -> Tensor {
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (ax, &d) in shape.iter().enumerate() {
        if d == 1 && g.shape()[ax] != 1 {
            g = g.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
    }
    g
}

fn as_vec1(t: &Tensor) -> Array1<f64> {
    Array1::from_iter(t.iter().copied())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Multiply-adds spent in convolutions and correlations so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            parents: Vec::new(),
            backward: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A leaf that participates in differentiation.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Stop-gradient: the same value, cut from the tape.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Scalar value of a 0-d or single-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        let t = &self.nodes[v.0].value;
        debug_assert_eq!(t.len(), 1);
        t.iter().next().copied().unwrap_or(f64::NAN)
    }

    fn push(&mut self, value: Tensor, parents: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            parents: parents.iter().map(|p| p.0).collect(),
            backward: requires_grad.then_some(backward),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a single-element `loss`. Gradients are retained
    /// for leaves only.
    pub fn backward(&self, loss: Var) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(self.nodes[loss.0].value.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = node.backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].take() else {
                continue;
            };
            let ctx = Ctx {
                grad: &g,
                inputs: node.parents.iter().map(|&p| &self.nodes[p].value).collect(),
                output: &node.value,
                needs: node.parents.iter().map(|&p| self.nodes[p].requires_grad).collect(),
            };
            let out = bw(&ctx);
            for ((&p, gp), need) in node.parents.iter().zip(out).zip(ctx.needs.iter()) {
                let (Some(gp), true) = (gp, *need) else {
                    continue;
                };
                debug_assert_eq!(gp.shape(), self.nodes[p].value.shape());
                match &mut grads[p] {
                    Some(acc) => *acc += &gp,
                    slot => *slot = Some(gp),
                }
            }
        }
        Gradients { grads }
    }

    // ---------------------------------------------------------------- binary

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| sum_to_shape(c.grad.clone(), c.inputs[0].shape())),
                    c.needs[1].then(|| sum_to_shape(c.grad.clone(), c.inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| sum_to_shape(c.grad.clone(), c.inputs[0].shape())),
                    c.needs[1].then(|| sum_to_shape(-c.grad, c.inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|c| {
                vec![
                    c.needs[0].then(|| sum_to_shape(c.grad * c.inputs[1], c.inputs[0].shape())),
                    c.needs[1].then(|| sum_to_shape(c.grad * c.inputs[0], c.inputs[1].shape())),
                ]
            }),
        )
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) / self.value(b);
        self.push(
            value,
            &[a, b],
            Box::new(|c| {
                let ga = c.needs[0].then(|| sum_to_shape(c.grad / c.inputs[1], c.inputs[0].shape()));
                let gb = c.needs[1].then(|| {
                    // d(a/b)/db = -(a/b)/b
                    let t = c.grad * c.output / c.inputs[1];
                    sum_to_shape(-t, c.inputs[1].shape())
                });
                vec![ga, gb]
            }),
        )
    }

    fn select(&mut self, a: Var, b: Var, take_a: fn(f64, f64) -> bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut value = va + &(vb * 0.0);
        Zip::from(&mut value)
            .and_broadcast(va)
            .and_broadcast(vb)
            .for_each(|o, &x, &y| *o = if take_a(x, y) { x } else { y });
        self.push(
            value,
            &[a, b],
            Box::new(move |c| {
                let mut ma = c.grad.clone();
                let mut mb = c.grad.clone();
                Zip::from(&mut ma)
                    .and(&mut mb)
                    .and_broadcast(c.inputs[0])
                    .and_broadcast(c.inputs[1])
                    .for_each(|ga, gb, &x, &y| {
                        if take_a(x, y) {
                            *gb = 0.0;
                        } else {
                            *ga = 0.0;
                        }
                    });
                vec![
                    c.needs[0].then(|| sum_to_shape(ma, c.inputs[0].shape())),
                    c.needs[1].then(|| sum_to_shape(mb, c.inputs[1].shape())),
                ]
            }),
        )
    }

    /// Elementwise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        self.select(a, b, |x, y| x >= y)
    }

    /// Elementwise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.select(a, b, |x, y| x <= y)
    }

    // ----------------------------------------------------------------- unary

    fn unary(
        &mut self,
        a: Var,
        f: impl Fn(f64) -> f64,
        df: fn(f64, f64) -> f64, // (input, output) -> derivative
    ) -> Var {
        let value = self.value(a).mapv(f);
        self.push(
            value,
            &[a],
            Box::new(move |c| {
                let mut g = c.grad.clone();
                Zip::from(&mut g)
                    .and(c.inputs[0])
                    .and(c.output)
                    .for_each(|g, &x, &y| *g *= df(x, y));
                vec![Some(g)]
            }),
        )
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) * s;
        self.push(value, &[a], Box::new(move |c| vec![Some(c.grad * s)]))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a) + s;
        self.push(value, &[a], Box::new(|c| vec![Some(c.grad.clone())]))
    }

    /// `s - a`
    pub fn rsub_scalar(&mut self, s: f64, a: Var) -> Var {
        let value = self.value(a).mapv(|x| s - x);
        self.push(value, &[a], Box::new(|c| vec![Some(-c.grad)]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, |_, y| y * (1.0 - y))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), |x, _| if x > 0.0 { 1.0 } else { 0.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, |_, y| y)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, |x, _| 1.0 / x)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, |_, y| 0.5 / y)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, |x, _| 2.0 * x)
    }

    /// Clamp to `[lo, hi]`; zero gradient outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(
            value,
            &[a],
            Box::new(move |c| {
                let mut g = c.grad.clone();
                Zip::from(&mut g).and(c.inputs[0]).for_each(|g, &x| {
                    if x < lo || x > hi {
                        *g = 0.0;
                    }
                });
                vec![Some(g)]
            }),
        )
    }

    // ------------------------------------------------------------ reductions

    /// Sum over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let mut value = self.value(a).clone();
        for &ax in axes {
            value = value.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        self.push(
            value,
            &[a],
            Box::new(|c| {
                let g = c
                    .grad
                    .broadcast(c.inputs[0].raw_dim())
                    .expect("broadcast back to input")
                    .to_owned();
                vec![Some(g)]
            }),
        )
    }

    pub fn mean_axes(&mut self, a: Var, axes: &[usize]) -> Var {
        let count: usize = axes.iter().map(|&ax| self.shape(a)[ax]).product();
        let s = self.sum_axes(a, axes);
        self.scale(s, 1.0 / count as f64)
    }

    /// Sum of all elements as a 0-d tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = ArrayD::from_elem(IxDyn(&[]), self.value(a).sum());
        self.push(
            value,
            &[a],
            Box::new(|c| {
                let s = c.grad.iter().next().copied().unwrap_or(0.0);
                vec![Some(Tensor::from_elem(c.inputs[0].raw_dim(), s))]
            }),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Var {
        let mut value = self.value(a).clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let m = lane.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            lane.mapv_inplace(|x| (x - m).exp());
            let s = lane.sum();
            lane.mapv_inplace(|x| x / s);
        }
        self.push(
            value,
            &[a],
            Box::new(move |c| {
                // dx = y * (dy - sum(dy * y))
                let mut g = c.grad * c.output;
                let dot = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
                g = c.output * &(c.grad - &dot);
                vec![Some(g)]
            }),
        )
    }

    // ---------------------------------------------------------- shape plumbing

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let src = self.value(a);
        let value = src
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .map_err(|e| Error::shape(format!("reshape {:?} -> {shape:?}: {e}", src.shape())))?;
        Ok(self.push(
            value,
            &[a],
            Box::new(|c| {
                let g = c
                    .grad
                    .as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(c.inputs[0].raw_dim())
                    .expect("reshape gradient");
                vec![Some(g)]
            }),
        ))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value =
            concatenate(Axis(axis), &views).map_err(|e| Error::shape(format!("concat along axis {axis}: {e}")))?;
        let sizes: Vec<usize> = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        Ok(self.push(
            value,
            parts,
            Box::new(move |c| {
                let mut start = 0;
                sizes
                    .iter()
                    .zip(&c.needs)
                    .map(|(&len, &need)| {
                        let s = start;
                        start += len;
                        need.then(|| c.grad.slice_axis(Axis(axis), Slice::from(s..s + len)).to_owned())
                    })
                    .collect()
            }),
        ))
    }

    /// Slice `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Var {
        let value = self
            .value(a)
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        self.push(
            value,
            &[a],
            Box::new(move |c| {
                let mut g = Tensor::zeros(c.inputs[0].raw_dim());
                g.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(c.grad);
                vec![Some(g)]
            }),
        )
    }

    // ------------------------------------------------------------ convolution

    /// Dense 2-d convolution. `x: [N, Ci, H, W]`, `w: [Co, Ci, k, k]`,
    /// optional `bias: [Co]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(Error::shape(format!("conv2d input {xs:?} with weight {ws:?}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::shape(format!("conv2d bias {:?}", self.shape(b))));
            }
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let (n, co) = (xs[0], ws[0]);
        let (ho, wo) = (geom.out_height(), geom.out_width());
        let kk = geom.col_rows();
        let plane = ho * wo;
        self.macs += (n * co * plane * kk) as u64;

        let xv = self.value(x).as_standard_layout().into_owned();
        let wv = self.value(w).as_standard_layout().into_owned();
        let xsl = xv.as_slice().expect("standard layout");
        let wsl = wv.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * co * plane];
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * plane]
        };
        let in_size = xs[1] * xs[2] * xs[3];
        for i in 0..n {
            let xi = &xsl[i * in_size..(i + 1) * in_size];
            let src: &[f64] = if geom.is_pointwise() {
                xi
            } else {
                kernels::im2col(xi, &geom, &mut cols);
                &cols
            };
            let oi = &mut out[i * co * plane..(i + 1) * co * plane];
            kernels::gemm(co, kk, plane, 1.0, wsl, false, src, false, 0.0, oi);
        }
        if let Some(b) = bias {
            let bv = self.value(b);
            for i in 0..n {
                for (o, &bo) in bv.iter().enumerate() {
                    let base = (i * co + o) * plane;
                    out[base..base + plane].iter_mut().for_each(|e| *e += bo);
                }
            }
        }
        let value = Tensor::from_shape_vec(IxDyn(&[n, co, ho, wo]), out).expect("conv output");

        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |c| {
                let g = c.grad.as_standard_layout();
                let gsl = g.as_slice().expect("standard layout");
                let xv = c.inputs[0].as_standard_layout();
                let xsl = xv.as_slice().expect("standard layout");
                let wv = c.inputs[1].as_standard_layout();
                let wsl = wv.as_slice().expect("standard layout");
                let mut gw = vec![0.0; co * kk];
                let mut gx = c.needs[0].then(|| vec![0.0; n * in_size]);
                let mut cols = vec![0.0; kk * plane];
                for i in 0..n {
                    let gi = &gsl[i * co * plane..(i + 1) * co * plane];
                    if c.needs[1] {
                        let xi = &xsl[i * in_size..(i + 1) * in_size];
                        let src: &[f64] = if geom.is_pointwise() {
                            xi
                        } else {
                            kernels::im2col(xi, &geom, &mut cols);
                            &cols
                        };
                        kernels::gemm(co, plane, kk, 1.0, gi, false, src, true, 1.0, &mut gw);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let gxi = &mut gx[i * in_size..(i + 1) * in_size];
                        if geom.is_pointwise() {
                            kernels::gemm(kk, co, plane, 1.0, wsl, true, gi, false, 0.0, gxi);
                        } else {
                            kernels::gemm(kk, co, plane, 1.0, wsl, true, gi, false, 0.0, &mut cols);
                            kernels::col2im(&cols, &geom, gxi);
                        }
                    }
                }
                let mut res = vec![
                    gx.map(|v| Tensor::from_shape_vec(IxDyn(&xs), v).expect("gx")),
                    c.needs[1].then(|| Tensor::from_shape_vec(IxDyn(&ws), gw).expect("gw")),
                ];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut gb = vec![0.0; co];
                        for i in 0..n {
                            for (o, acc) in gb.iter_mut().enumerate() {
                                let base = (i * co + o) * plane;
                                *acc += gsl[base..base + plane].iter().sum::<f64>();
                            }
                        }
                        Tensor::from_shape_vec(IxDyn(&[co]), gb).expect("gb")
                    }));
                }
                res
            }),
        ))
    }

    /// Depthwise (per-channel) 2-d convolution. `x: [N, C, H, W]`,
    /// `w: [C, 1, k, k]`, optional `bias: [C]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[0] != xs[1] || ws[1] != 1 || ws[2] != ws[3] {
            return Err(Error::shape(format!("depthwise conv input {xs:?} with weight {ws:?}")));
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: ws[2],
            stride,
            pad,
        };
        let mut value = depthwise_forward(self.value(x), self.value(w), &geom);
        self.macs += (value.len() * geom.kernel * geom.kernel) as u64;
        if let Some(b) = bias {
            let bv = self.value(b).clone();
            for (ch, mut lane) in value.axis_iter_mut(Axis(1)).enumerate() {
                lane += bv[ch];
            }
        }
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            value,
            &parents,
            Box::new(move |c| {
                let (gx, gw) = depthwise_backward(c.grad, c.inputs[0], c.inputs[1], &geom, c.needs[0]);
                let mut res = vec![gx, c.needs[1].then_some(gw)];
                if c.inputs.len() == 3 {
                    res.push(c.needs[2].then(|| {
                        let mut gb = Tensor::zeros(IxDyn(&[geom.channels]));
                        for (ch, lane) in c.grad.axis_iter(Axis(1)).enumerate() {
                            gb[[ch]] = lane.sum();
                        }
                        gb
                    }));
                }
                res
            }),
        ))
    }

    /// Pixel-wise cross-correlation. Every template pixel vector acts as a
    /// 1x1 kernel over the search map:
    /// `out[n, i*wt + j, u, v] = scale * <t[n, :, i, j], s[n, :, u, v]>`.
    pub fn pixel_corr(&mut self, t: Var, s: Var, scale: f64) -> Result<Var> {
        let ts = self.shape(t).to_vec();
        let ss = self.shape(s).to_vec();
        if ts.len() != 4 || ss.len() != 4 || ts[0] != ss[0] || ts[1] != ss[1] {
            return Err(Error::shape(format!(
                "pixel correlation template {ts:?} vs search {ss:?}"
            )));
        }
        let (n, ch) = (ts[0], ts[1]);
        let p = ts[2] * ts[3];
        let q = ss[2] * ss[3];
        self.macs += (n * p * q * ch) as u64;
        let tv = self.value(t).as_standard_layout().into_owned();
        let sv = self.value(s).as_standard_layout().into_owned();
        let tsl = tv.as_slice().expect("standard layout");
        let ssl = sv.as_slice().expect("standard layout");
        let mut out = vec![0.0; n * p * q];
        for i in 0..n {
            kernels::gemm(
                p,
                ch,
                q,
                scale,
                &tsl[i * ch * p..(i + 1) * ch * p],
                true,
                &ssl[i * ch * q..(i + 1) * ch * q],
                false,
                0.0,
                &mut out[i * p * q..(i + 1) * p * q],
            );
        }
        let value = Tensor::from_shape_vec(IxDyn(&[n, p, ss[2], ss[3]]), out).expect("corr");
        Ok(self.push(
            value,
            &[t, s],
            Box::new(move |c| {
                let g = c.grad.as_standard_layout();
                let gsl = g.as_slice().expect("standard layout");
                let tv = c.inputs[0].as_standard_layout();
                let sv = c.inputs[1].as_standard_layout();
                let tsl = tv.as_slice().expect("standard layout");
                let ssl = sv.as_slice().expect("standard layout");
                let gt = c.needs[0].then(|| {
                    let mut gt = vec![0.0; n * ch * p];
                    for i in 0..n {
                        // dT (C x P) = S (C x Q) * G^T (Q x P)
                        kernels::gemm(
                            ch,
                            q,
                            p,
                            scale,
                            &ssl[i * ch * q..(i + 1) * ch * q],
                            false,
                            &gsl[i * p * q..(i + 1) * p * q],
                            true,
                            0.0,
                            &mut gt[i * ch * p..(i + 1) * ch * p],
                        );
                    }
                    Tensor::from_shape_vec(IxDyn(&ts), gt).expect("gt")
                });
                let gs = c.needs[1].then(|| {
                    let mut gs = vec![0.0; n * ch * q];
                    for i in 0..n {
                        // dS (C x Q) = T (C x P) * G (P x Q)
                        kernels::gemm(
                            ch,
                            p,
                            q,
                            scale,
                            &tsl[i * ch * p..(i + 1) * ch * p],
                            false,
                            &gsl[i * p * q..(i + 1) * p * q],
                            false,
                            0.0,
                            &mut gs[i * ch * q..(i + 1) * ch * q],
                        );
                    }
                    Tensor::from_shape_vec(IxDyn(&ss), gs).expect("gs")
                });
                vec![gt, gs]
            }),
        ))
    }

    // ------------------------------------------------------- normalization

    /// Batch normalization with batch statistics (training mode). Reduces
    /// over every axis except axis 1. Returns the output plus the batch mean
    /// and population variance for running-statistics bookkeeping.
    pub fn batch_norm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> (Var, Array1<f64>, Array1<f64>) {
        let (mean, var) = kernels::channel_moments(&self.value(x).view());
        let inv: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        let g1 = as_vec1(self.value(gamma));
        let b1 = as_vec1(self.value(beta));
        let value = kernels::bn_apply(&self.value(x).view(), &mean, &var, &g1, &b1, eps);
        let (m2, inv2) = (mean.clone(), inv);
        let out = self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |c| {
                let x = c.inputs[0];
                let gamma = c.inputs[1];
                let channels = x.shape()[1];
                let count = (x.len() / channels) as f64;
                let mut gx = c.needs[0].then(|| Tensor::zeros(x.raw_dim()));
                let mut gg = Tensor::zeros(gamma.raw_dim());
                let mut gb = Tensor::zeros(gamma.raw_dim());
                for ch in 0..channels {
                    let xl = x.index_axis(Axis(1), ch);
                    let gl = c.grad.index_axis(Axis(1), ch);
                    let (m, iv) = (m2[ch], inv2[ch]);
                    let mut sum_g = 0.0;
                    let mut sum_gx = 0.0;
                    Zip::from(&xl).and(&gl).for_each(|&xe, &ge| {
                        sum_g += ge;
                        sum_gx += ge * (xe - m) * iv;
                    });
                    gg[[ch]] = sum_gx;
                    gb[[ch]] = sum_g;
                    if let Some(gx) = gx.as_mut() {
                        let gam = gamma[[ch]];
                        let k = gam * iv / count;
                        let mut lane = gx.index_axis_mut(Axis(1), ch);
                        Zip::from(&mut lane).and(&xl).and(&gl).for_each(|o, &xe, &ge| {
                            let xh = (xe - m) * iv;
                            *o = k * (count * ge - sum_g - xh * sum_gx);
                        });
                    }
                }
                vec![gx, c.needs[1].then_some(gg), c.needs[2].then_some(gb)]
            }),
        );
        (out, mean, var)
    }

    /// Batch normalization with fixed statistics (inference mode).
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &Array1<f64>,
        var: &Array1<f64>,
        eps: f64,
    ) -> Var {
        let g1 = as_vec1(self.value(gamma));
        let b1 = as_vec1(self.value(beta));
        let value = kernels::bn_apply(&self.value(x).view(), mean, var, &g1, &b1, eps);
        let mean = mean.clone();
        let inv: Array1<f64> = var.mapv(|v| 1.0 / (v + eps).sqrt());
        self.push(
            value,
            &[x, gamma, beta],
            Box::new(move |c| {
                let x = c.inputs[0];
                let gamma = c.inputs[1];
                let channels = x.shape()[1];
                let mut gx = c.needs[0].then(|| c.grad.clone());
                let mut gg = Tensor::zeros(gamma.raw_dim());
                let mut gb = Tensor::zeros(gamma.raw_dim());
                for ch in 0..channels {
                    let xl = x.index_axis(Axis(1), ch);
                    let gl = c.grad.index_axis(Axis(1), ch);
                    let (m, iv) = (mean[ch], inv[ch]);
                    let mut sg = 0.0;
                    let mut sgx = 0.0;
                    Zip::from(&xl).and(&gl).for_each(|&xe, &ge| {
                        sg += ge;
                        sgx += ge * (xe - m) * iv;
                    });
                    gg[[ch]] = sgx;
                    gb[[ch]] = sg;
                    if let Some(gx) = gx.as_mut() {
                        let k = gamma[[ch]] * iv;
                        gx.index_axis_mut(Axis(1), ch).mapv_inplace(|e| e * k);
                    }
                }
                vec![gx, c.needs[1].then_some(gg), c.needs[2].then_some(gb)]
            }),
        )
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn depthwise_forward(x: &Tensor, w: &Tensor, g: &ConvGeom) -> Tensor {
    let n = x.shape()[0];
    let (ho, wo) = (g.out_height(), g.out_width());
    let xv = x.as_standard_layout();
    let wv = w.as_standard_layout();
    let xsl = xv.as_slice().expect("standard layout");
    let wsl = wv.as_slice().expect("standard layout");
    let k = g.kernel;
    let hw = g.height * g.width;
    let mut out = vec![0.0; n * g.channels * ho * wo];
    for i in 0..n {
        for ch in 0..g.channels {
            let src = &xsl[(i * g.channels + ch) * hw..(i * g.channels + ch + 1) * hw];
            let dst = &mut out[(i * g.channels + ch) * ho * wo..(i * g.channels + ch + 1) * ho * wo];
            for ki in 0..k {
                for kj in 0..k {
                    let wk = wsl[(ch * k + ki) * k + kj];
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let srow = &src[ih as usize * g.width..(ih as usize + 1) * g.width];
                        let drow = &mut dst[oh * wo..(oh + 1) * wo];
                        for (ow, d) in drow.iter_mut().enumerate() {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw >= 0 && iw < g.width as isize {
                                *d += wk * srow[iw as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    Tensor::from_shape_vec(IxDyn(&[n, g.channels, ho, wo]), out).expect("depthwise output")
}

fn depthwise_backward(grad: &Tensor, x: &Tensor, w: &Tensor, g: &ConvGeom, need_x: bool) -> (Option<Tensor>, Tensor) {
    let n = x.shape()[0];
    let (ho, wo) = (g.out_height(), g.out_width());
    let gv = grad.as_standard_layout();
    let xv = x.as_standard_layout();
    let wv = w.as_standard_layout();
    let gsl = gv.as_slice().expect("standard layout");
    let xsl = xv.as_slice().expect("standard layout");
    let wsl = wv.as_slice().expect("standard layout");
    let k = g.kernel;
    let hw = g.height * g.width;
    let mut gw = vec![0.0; g.channels * k * k];
    let mut gx = need_x.then(|| vec![0.0; xsl.len()]);
    for i in 0..n {
        for ch in 0..g.channels {
            let base_in = (i * g.channels + ch) * hw;
            let base_out = (i * g.channels + ch) * ho * wo;
            let src = &xsl[base_in..base_in + hw];
            let gout = &gsl[base_out..base_out + ho * wo];
            for ki in 0..k {
                for kj in 0..k {
                    let widx = (ch * k + ki) * k + kj;
                    let wk = wsl[widx];
                    let mut acc = 0.0;
                    for oh in 0..ho {
                        let ih = (oh * g.stride + ki) as isize - g.pad as isize;
                        if ih < 0 || ih >= g.height as isize {
                            continue;
                        }
                        let row = ih as usize * g.width;
                        for ow in 0..wo {
                            let iw = (ow * g.stride + kj) as isize - g.pad as isize;
                            if iw < 0 || iw >= g.width as isize {
                                continue;
                            }
                            let go = gout[oh * wo + ow];
                            acc += go * src[row + iw as usize];
                            if let Some(gx) = gx.as_mut() {
                                gx[base_in + row + iw as usize] += go * wk;
                            }
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        gx.map(|v| Tensor::from_shape_vec(x.raw_dim(), v).expect("gx")),
        Tensor::from_shape_vec(w.raw_dim(), gw).expect("gw"),
    )
}

#[cfg(test)]
mod tests;
