//! Reverse-mode differentiation over a flat list of tensor nodes.
//!
//! Nodes are appended in evaluation order, so a reverse sweep over the list is
//! a valid topological order. Each node may carry a backward closure that
//! reads forward values by index and accumulates into its parents' gradients.

use super::tensor::{matmul_nt, matmul_raw, matmul_tn, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

type Backward = Box<dyn Fn(&[Tensor], &[f64], &mut GradSink<'_>) + Send + Sync>;

pub struct GradSink<'a> {
    grads: &'a mut [Option<Vec<f64>>],
}

impl GradSink<'_> {
    fn slot(&mut self, v: Var, len: usize) -> &mut Vec<f64> {
        self.grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    pub fn add(&mut self, v: Var, g: &[f64]) {
        let slot = self.slot(v, g.len());
        for (s, x) in slot.iter_mut().zip(g) {
            *s += x;
        }
    }
}

pub const LN_EPS: f64 = 1e-5;

#[derive(Default)]
pub struct Tape {
    values: Vec<Tensor>,
    backward: Vec<Option<Backward>>,
    scopes: Vec<usize>,
    scope_names: Vec<String>,
}

/// Gradients of one backward sweep, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient with respect to `v`, or `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn wrt(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; len])
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

impl Tape {
    pub fn new() -> Self {
        let mut t = Tape::default();
        t.scope_names.push(String::new());
        t
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Tag subsequently created nodes with a layer path for diagnostics.
    pub fn set_scope(&mut self, path: &str) {
        if self.scope_names.last().map(String::as_str) != Some(path) {
            self.scope_names.push(path.to_string());
        }
    }

    fn push(&mut self, value: Tensor, backward: Option<Backward>) -> Var {
        self.values.push(value);
        self.backward.push(backward);
        self.scopes.push(self.scope_names.len() - 1);
        Var(self.values.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    /// Path of the first node holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<String> {
        self.values
            .iter()
            .position(|t| !t.all_finite())
            .map(|i| self.scope_names[self.scopes[i]].clone())
    }

    /// Input that receives gradients (a parameter or a differentiable input).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, None)
    }

    /// Backpropagate from `root` with the given seed gradient.
    pub fn backward_with(&self, root: Var, seed: Vec<f64>) -> Gradients {
        assert_eq!(seed.len(), self.values[root.0].len(), "seed length");
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.values.len()];
        grads[root.0] = Some(seed);
        for i in (0..=root.0).rev() {
            let Some(bw) = &self.backward[i] else { continue };
            let Some(g) = grads[i].take() else { continue };
            bw(&self.values, &g, &mut GradSink { grads: &mut grads });
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    /// Backpropagate from a scalar root. Fails if the root is not finite.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let v = self.value(root);
        if v.len() != 1 {
            return Err(Error::Shape(format!("backward root has {} values", v.len())));
        }
        if !v.all_finite() {
            let path = self.first_non_finite().unwrap_or_default();
            return Err(Error::NonFinite { path });
        }
        Ok(self.backward_with(root, vec![1.0]))
    }

    // ---- ops ---------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.values[a.0].dims2();
        let (k2, n) = self.values[b.0].dims2();
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let out = matmul_raw(&self.values[a.0].data, &self.values[b.0].data, m, k, n);
        self.push(
            Tensor { shape: vec![m, n], data: out },
            Some(Box::new(move |vals, g, sink| {
                let ga = matmul_nt(g, &vals[b.0].data, m, n, k);
                sink.add(a, &ga);
                let gb = matmul_tn(&vals[a.0].data, g, m, k, n);
                sink.add(b, &gb);
            })),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.values[a.0], &self.values[b.0]);
        assert_eq!(va.len(), vb.len(), "add length mismatch");
        let data = va.data.iter().zip(&vb.data).map(|(x, y)| x + y).collect();
        let shape = va.shape.clone();
        self.push(
            Tensor { shape, data },
            Some(Box::new(move |_, g, sink| {
                sink.add(a, g);
                sink.add(b, g);
            })),
        )
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0];
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|x| x * c).collect() };
        self.push(
            t,
            Some(Box::new(move |_, g, sink| {
                let ga: Vec<f64> = g.iter().map(|x| x * c).collect();
                sink.add(a, &ga);
            })),
        )
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = &self.values[a.0];
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|x| x + c).collect() };
        self.push(t, Some(Box::new(move |_, g, sink| sink.add(a, g))))
    }

    /// `x [m, n] + b [n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Var {
        let (m, n) = self.values[x.0].dims2();
        assert_eq!(self.values[b.0].len(), n, "add_row width");
        let bd = &self.values[b.0].data;
        let data = self.values[x.0]
            .data
            .chunks(n)
            .flat_map(|r| r.iter().zip(bd).map(|(a, b)| a + b))
            .collect();
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |_, g, sink| {
                sink.add(x, g);
                let mut gb = vec![0.0; n];
                for r in g.chunks(n) {
                    for (s, v) in gb.iter_mut().zip(r) {
                        *s += v;
                    }
                }
                sink.add(b, &gb);
            })),
        )
    }

    /// `x [m, n] * s [n]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Var {
        let (m, n) = self.values[x.0].dims2();
        assert_eq!(self.values[s.0].len(), n, "mul_row width");
        let sd = &self.values[s.0].data;
        let data = self.values[x.0]
            .data
            .chunks(n)
            .flat_map(|r| r.iter().zip(sd).map(|(a, b)| a * b))
            .collect();
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |vals, g, sink| {
                let sd = &vals[s.0].data;
                let xd = &vals[x.0].data;
                let gx: Vec<f64> = g.chunks(n).flat_map(|r| r.iter().zip(sd).map(|(a, b)| a * b)).collect();
                sink.add(x, &gx);
                let mut gs = vec![0.0; n];
                for (gr, xr) in g.chunks(n).zip(xd.chunks(n)) {
                    for j in 0..n {
                        gs[j] += gr[j] * xr[j];
                    }
                }
                sink.add(s, &gs);
            })),
        )
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| gelu(x)).collect() };
        self.push(
            t,
            Some(Box::new(move |vals, g, sink| {
                let ga: Vec<f64> = vals[a.0].data.iter().zip(g).map(|(&x, gv)| gv * gelu_grad(x)).collect();
                sink.add(a, &ga);
            })),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|&x| x.max(0.0)).collect() };
        self.push(
            t,
            Some(Box::new(move |vals, g, sink| {
                let ga: Vec<f64> =
                    vals[a.0].data.iter().zip(g).map(|(&x, gv)| if x > 0.0 { *gv } else { 0.0 }).collect();
                sink.add(a, &ga);
            })),
        )
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|x| x.exp()).collect() };
        let out = Var(self.values.len());
        self.push(
            t,
            Some(Box::new(move |vals, g, sink| {
                let ga: Vec<f64> = vals[out.0].data.iter().zip(g).map(|(y, gv)| y * gv).collect();
                sink.add(a, &ga);
            })),
        )
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let t = Tensor { shape: v.shape.clone(), data: v.data.iter().map(|x| x.ln()).collect() };
        self.push(
            t,
            Some(Box::new(move |vals, g, sink| {
                let ga: Vec<f64> = vals[a.0].data.iter().zip(g).map(|(x, gv)| gv / x).collect();
                sink.add(a, &ga);
            })),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let n = v.len();
        // shifted so that a constant input gives its value back exactly
        let x0 = v.data[0];
        let mean = x0 + v.data.iter().map(|x| x - x0).sum::<f64>() / n as f64;
        self.push(
            Tensor::scalar(mean),
            Some(Box::new(move |_, g, sink| {
                sink.add(a, &vec![g[0] / n as f64; n]);
            })),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let v = &self.values[a.0];
        let n = v.len();
        let s = v.data.iter().sum::<f64>();
        self.push(Tensor::scalar(s), Some(Box::new(move |_, g, sink| sink.add(a, &vec![g[0]; n]))))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let v = &self.values[a.0];
        assert_eq!(shape.iter().product::<usize>(), v.len(), "reshape size");
        let t = Tensor { shape: shape.to_vec(), data: v.data.clone() };
        self.push(t, Some(Box::new(move |_, g, sink| sink.add(a, g))))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        let d = &self.values[a.0].data;
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                data[j * m + i] = d[i * n + j];
            }
        }
        self.push(
            Tensor { shape: vec![n, m], data },
            Some(Box::new(move |_, g, sink| {
                let mut ga = vec![0.0; m * n];
                for j in 0..n {
                    for i in 0..m {
                        ga[i * n + j] = g[j * m + i];
                    }
                }
                sink.add(a, &ga);
            })),
        )
    }

    /// Columns `start..start + len` of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.values[a.0].dims2();
        assert!(start + len <= n, "slice_cols out of range");
        let d = &self.values[a.0].data;
        let data = (0..m).flat_map(|i| d[i * n + start..i * n + start + len].iter().copied()).collect();
        self.push(
            Tensor { shape: vec![m, len], data },
            Some(Box::new(move |_, g, sink| {
                let mut ga = vec![0.0; m * n];
                for i in 0..m {
                    ga[i * n + start..i * n + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                sink.add(a, &ga);
            })),
        )
    }

    /// Stack `[r_i, n]` tensors vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let n = self.values[parts[0].0].dims2().1;
        let mut data = Vec::new();
        let mut sizes = Vec::with_capacity(parts.len());
        for p in parts {
            let t = &self.values[p.0];
            assert_eq!(t.dims2().1, n, "concat_rows width mismatch");
            sizes.push(t.len());
            data.extend_from_slice(&t.data);
        }
        let rows = data.len() / n;
        let parts = parts.to_vec();
        self.push(
            Tensor { shape: vec![rows, n], data },
            Some(Box::new(move |_, g, sink| {
                let mut off = 0;
                for (p, &len) in parts.iter().zip(&sizes) {
                    sink.add(*p, &g[off..off + len]);
                    off += len;
                }
            })),
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.values[parts[0].0].dims2().0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|p| {
                let (r, c) = self.values[p.0].dims2();
                assert_eq!(r, m, "concat_cols row mismatch");
                c
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.values[p.0].data[i * w..(i + 1) * w]);
            }
        }
        let parts = parts.to_vec();
        self.push(
            Tensor { shape: vec![m, total], data },
            Some(Box::new(move |_, g, sink| {
                let mut off = 0;
                for (p, &w) in parts.iter().zip(&widths) {
                    let gp: Vec<f64> =
                        (0..m).flat_map(|i| g[i * total + off..i * total + off + w].iter().copied()).collect();
                    sink.add(*p, &gp);
                    off += w;
                }
            })),
        )
    }

    /// Column means of `[m, n]`, giving `[1, n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        let mut data = vec![0.0; n];
        for r in self.values[a.0].data.chunks(n) {
            for (s, v) in data.iter_mut().zip(r) {
                *s += v;
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        self.push(
            Tensor { shape: vec![1, n], data },
            Some(Box::new(move |_, g, sink| {
                let ga: Vec<f64> = (0..m).flat_map(|_| g.iter().map(|x| x / m as f64)).collect();
                sink.add(a, &ga);
            })),
        )
    }

    /// Per-row standardization (no affine parameters).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        let mut data = Vec::with_capacity(m * n);
        for r in self.values[a.0].data.chunks(n) {
            let (mu, inv) = row_stats(r);
            data.extend(r.iter().map(|x| (x - mu) * inv));
        }
        let out = Var(self.values.len());
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |vals, g, sink| {
                let mut ga = Vec::with_capacity(m * n);
                for ((xr, yr), gr) in vals[a.0].data.chunks(n).zip(vals[out.0].data.chunks(n)).zip(g.chunks(n)) {
                    let (_, inv) = row_stats(xr);
                    let mg = gr.iter().sum::<f64>() / n as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    ga.extend(gr.iter().zip(yr).map(|(gv, y)| inv * (gv - mg - y * mgy)));
                }
                sink.add(a, &ga);
            })),
        )
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        let mut data = Vec::with_capacity(m * n);
        for r in self.values[a.0].data.chunks(n) {
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = r.iter().map(|x| (x - mx).exp()).collect();
            let s: f64 = e.iter().sum();
            data.extend(e.into_iter().map(|v| v / s));
        }
        let out = Var(self.values.len());
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |vals, g, sink| {
                let mut ga = Vec::with_capacity(m * n);
                for (yr, gr) in vals[out.0].data.chunks(n).zip(g.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, gv)| y * (gv - dot)));
                }
                sink.add(a, &ga);
            })),
        )
    }

    /// Row-wise L2 normalization. Rows must be non-zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let (m, n) = self.values[a.0].dims2();
        let mut data = Vec::with_capacity(m * n);
        for r in self.values[a.0].data.chunks(n) {
            let norm = r.iter().map(|x| x * x).sum::<f64>().sqrt();
            data.extend(r.iter().map(|x| x / norm));
        }
        let out = Var(self.values.len());
        self.push(
            Tensor { shape: vec![m, n], data },
            Some(Box::new(move |vals, g, sink| {
                let mut ga = Vec::with_capacity(m * n);
                for ((xr, yr), gr) in vals[a.0].data.chunks(n).zip(vals[out.0].data.chunks(n)).zip(g.chunks(n)) {
                    let norm = xr.iter().map(|x| x * x).sum::<f64>().sqrt();
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    ga.extend(yr.iter().zip(gr).map(|(y, gv)| (gv - y * dot) / norm));
                }
                sink.add(a, &ga);
            })),
        )
    }

    /// Picks flat entries `idx` of `a` into a 1-D tensor.
    pub fn gather(&mut self, a: Var, idx: Vec<usize>) -> Var {
        let n = self.values[a.0].len();
        let data = idx.iter().map(|&i| self.values[a.0].data[i]).collect();
        let k = idx.len();
        self.push(
            Tensor { shape: vec![k], data },
            Some(Box::new(move |_, g, sink| {
                let mut ga = vec![0.0; n];
                for (&i, gv) in idx.iter().zip(g) {
                    ga[i] += gv;
                }
                sink.add(a, &ga);
            })),
        )
    }

    /// `out[k] = offsets[k] + sum_{(i, w) in terms[k]} w * a.flat[i]`.
    pub fn linear_comb(&mut self, a: Var, terms: Vec<Vec<(usize, f64)>>, offsets: Vec<f64>) -> Var {
        assert_eq!(terms.len(), offsets.len());
        let n = self.values[a.0].len();
        let src = &self.values[a.0].data;
        let data = terms
            .iter()
            .zip(&offsets)
            .map(|(t, c)| c + t.iter().map(|&(i, w)| w * src[i]).sum::<f64>())
            .collect();
        let k = terms.len();
        self.push(
            Tensor { shape: vec![k], data },
            Some(Box::new(move |_, g, sink| {
                let mut ga = vec![0.0; n];
                for (t, gv) in terms.iter().zip(g) {
                    for &(i, w) in t {
                        ga[i] += w * gv;
                    }
                }
                sink.add(a, &ga);
            })),
        )
    }

    /// 3x3 convolution, stride 2, zero padding 1.
    /// `x [C, H, W]`, `w [O, C, 3, 3]`, `b [O]` -> `[O, ceil(H/2), ceil(W/2)]`.
    pub fn conv3x3_s2(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xs = self.values[x.0].shape.clone();
        let ws = self.values[w.0].shape.clone();
        let (c, h, wd) = match xs.as_slice() {
            [c, h, w] => (*c, *h, *w),
            s => panic!("conv input must be [C, H, W], got {s:?}"),
        };
        assert_eq!(ws.len(), 4, "conv weight rank");
        let o = ws[0];
        assert_eq!(ws[1], c, "conv channel mismatch");
        let geo = ConvGeometry { c, h, w: wd, ho: h.div_ceil(2), wo: wd.div_ceil(2) };
        let cols = geo.im2col(&self.values[x.0].data);
        let p = geo.ho * geo.wo;
        let mut out = matmul_raw(&self.values[w.0].data, &cols, o, c * 9, p);
        let bd = &self.values[b.0].data;
        for (oc, row) in out.chunks_mut(p).enumerate() {
            for v in row {
                *v += bd[oc];
            }
        }
        self.push(
            Tensor { shape: vec![o, geo.ho, geo.wo], data: out },
            Some(Box::new(move |vals, g, sink| {
                let cols = geo.im2col(&vals[x.0].data);
                let gw = matmul_nt(g, &cols, o, p, c * 9);
                sink.add(w, &gw);
                let gb: Vec<f64> = g.chunks(p).map(|r| r.iter().sum()).collect();
                sink.add(b, &gb);
                let gcols = matmul_tn(&vals[w.0].data, g, o, c * 9, p);
                sink.add(x, &geo.col2im(&gcols));
            })),
        )
    }
}

fn row_stats(r: &[f64]) -> (f64, f64) {
    let n = r.len() as f64;
    let mu = r.iter().sum::<f64>() / n;
    let var = r.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

#[derive(Clone, Copy)]
struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeometry {
    /// `[C*9, Ho*Wo]` patch matrix.
    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut cols = vec![0.0; self.c * 9 * p];
        for ci in 0..self.c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            cols[row + oy * self.wo + ox] = x[(ci * self.h + iy as usize) * self.w + ix as usize];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let p = self.ho * self.wo;
        let mut x = vec![0.0; self.c * self.h * self.w];
        for ci in 0..self.c {
            for ky in 0..3 {
                for kx in 0..3 {
                    let row = (ci * 9 + ky * 3 + kx) * p;
                    for oy in 0..self.ho {
                        let iy = (2 * oy + ky) as isize - 1;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (2 * ox + kx) as isize - 1;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            x[(ci * self.h + iy as usize) * self.w + ix as usize] += cols[row + oy * self.wo + ox];
                        }
                    }
                }
            }
        }
        x
    }
}
