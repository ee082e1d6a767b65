//! Reverse-mode differentiation over a linear tape. Ops record a backward
//! closure; `backward` replays the tape once in reverse record order.
//! Leaves inserted with `leaf` receive gradients, `constant` leaves do not.

use crate::error::{Error, Result};
use crate::tensor::{broadcast_strides, matmul_f64, strides_of, Tensor};

/// Additive attention-mask sentinel for "key not visible".
pub const MASK_OFF: f64 = -1e30;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(&self) -> usize {
        self.0
    }
}

type BackFn = Box<dyn Fn(&Tape, Var, &Tensor) -> Vec<Tensor>>;

struct Node {
    value: Tensor,
    parents: Vec<Var>,
    back: Option<BackFn>,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

pub struct Grads {
    g: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.g.get(v.0).and_then(|o| o.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        match self.get(v) {
            Some(t) => t.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    debug_assert_eq!(dst.shape(), src.shape());
    let s = src.data();
    for (d, v) in dst.data_mut().iter_mut().zip(s) {
        *d += v;
    }
}

/// Sum `g` down to `shape` (inverse of a right-aligned broadcast).
fn reduce_to_shape(g: &Tensor, shape: &[usize]) -> Tensor {
    if g.shape() == shape {
        return g.clone();
    }
    let mut out = Tensor::zeros(shape);
    let g_shape = g.shape().to_vec();
    let b_str = broadcast_strides(&g_shape, shape).expect("reduce shapes must re-broadcast");
    let n = g.numel();
    let g_str = strides_of(&g_shape);
    let od = out.data_mut();
    let gd = g.data();
    // odometer over g's index space, tracking the (broadcast) offset into out
    let rank = g_shape.len();
    let mut idx = vec![0usize; rank];
    let mut b_off = 0usize;
    for i in 0..n {
        od[b_off] += gd[i];
        for d in (0..rank).rev() {
            idx[d] += 1;
            b_off += b_str[d];
            if idx[d] < g_shape[d] {
                break;
            }
            idx[d] = 0;
            b_off -= b_str[d] * g_shape[d];
        }
        let _ = g_str;
    }
    out
}

/// Elementwise combine with b broadcast into a's shape.
fn broadcast_zip(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        let data = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        return Tensor::new(a.shape().to_vec(), data);
    }
    let a_shape = a.shape().to_vec();
    let b_str = broadcast_strides(&a_shape, b.shape())?;
    let rank = a_shape.len();
    let ad = a.data();
    let bd = b.data();
    let mut out = vec![0f64; ad.len()];
    let mut idx = vec![0usize; rank];
    let mut b_off = 0usize;
    for i in 0..ad.len() {
        out[i] = f(ad[i], bd[b_off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            b_off += b_str[d];
            if idx[d] < a_shape[d] {
                break;
            }
            idx[d] = 0;
            b_off -= b_str[d] * a_shape[d];
        }
    }
    Tensor::new(a_shape, out)
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push_node(t, vec![], None, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, vec![], None, false)
    }

    pub fn leaf_if(&mut self, t: Tensor, trainable: bool) -> Var {
        if trainable {
            self.leaf(t)
        } else {
            self.constant(t)
        }
    }

    fn push_node(
        &mut self,
        value: Tensor,
        parents: Vec<Var>,
        back: Option<BackFn>,
        leaf_grad: bool,
    ) -> Var {
        let needs_grad =
            leaf_grad || parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, parents, back, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, parents: Vec<Var>, back: BackFn) -> Var {
        self.push_node(value, parents, Some(back), false)
    }

    // ---- elementwise -------------------------------------------------

    /// a + b, b broadcast into a (numpy right-aligned rules).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x + y)?;
        let b_shape = self.value(b).shape().to_vec();
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |_t, _o, g| vec![g.clone(), reduce_to_shape(g, &b_shape)]),
        ))
    }

    /// a * b elementwise, b broadcast into a.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = broadcast_zip(self.value(a), self.value(b), |x, y| x * y)?;
        let b_shape = self.value(b).shape().to_vec();
        Ok(self.push_op(
            out,
            vec![a, b],
            Box::new(move |t, o, g| {
                let (a, b) = (t.parent(o, 0), t.parent(o, 1));
                let da = broadcast_zip(g, b, |gv, bv| gv * bv).unwrap();
                // d/db = sum over broadcast of g * a
                let ga = broadcast_zip(g, a, |gv, av| gv * av).unwrap();
                vec![da, reduce_to_shape(&ga, &b_shape)]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| -v);
        self.push_op(out, vec![a], Box::new(|_t, _o, g| vec![g.map(|v| -v)]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push_op(out, vec![a], Box::new(move |_t, _o, g| vec![g.map(|v| v * c)]))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v + c);
        self.push_op(out, vec![a], Box::new(|_t, _o, g| vec![g.clone()]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| 1.0 / (1.0 + (-v).exp()));
        self.push_op(
            out,
            vec![a],
            Box::new(|t, o, g| {
                let y = t.value(o);
                let d = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * yv * (1.0 - yv))
                    .collect();
                vec![Tensor::new(y.shape().to_vec(), d).unwrap()]
            }),
        )
    }

    /// tanh-approximation GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        const C0: f64 = 0.7978845608; // sqrt(2/pi)
        const C1: f64 = 0.044715;
        let out = self
            .value(a)
            .map(|x| 0.5 * x * (1.0 + (C0 * (x + C1 * x * x * x)).tanh()));
        self.push_op(
            out,
            vec![a],
            Box::new(|t, o, g| {
                let x = t.parent(o, 0);
                let d = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&x, &gv)| {
                        let u = C0 * (x + C1 * x * x * x);
                        let th = u.tanh();
                        let du = C0 * (1.0 + 3.0 * C1 * x * x);
                        gv * (0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du)
                    })
                    .collect();
                vec![Tensor::new(x.shape().to_vec(), d).unwrap()]
            }),
        )
    }

    // ---- shape -------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshaped(shape)?;
        let a_shape = self.value(a).shape().to_vec();
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |_t, _o, g| vec![g.reshaped(&a_shape).unwrap()]),
        ))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let av = self.value(a);
        let rank = av.shape().len();
        if perm.len() != rank {
            return Err(Error::Dim(format!("permute rank {} vs {:?}", rank, perm)));
        }
        let out = permute_tensor(av, perm);
        let mut inv = vec![0usize; rank];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |_t, _o, g| vec![permute_tensor(g, &inv)]),
        ))
    }

    pub fn concat(&mut self, axis: usize, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != sb.len()
            || sa.iter().zip(sb).enumerate().any(|(d, (x, y))| d != axis && x != y)
        {
            return Err(Error::Dim(format!("concat {:?} / {:?} axis {}", sa, sb, axis)));
        }
        let outer: usize = sa[..axis].iter().product();
        let (la, lb) = (
            sa[axis..].iter().product::<usize>(),
            sb[axis..].iter().product::<usize>(),
        );
        let mut out_shape = sa.to_vec();
        out_shape[axis] += sb[axis];
        let mut data = Vec::with_capacity(av.numel() + bv.numel());
        for o in 0..outer {
            data.extend_from_slice(&av.data()[o * la..(o + 1) * la]);
            data.extend_from_slice(&bv.data()[o * lb..(o + 1) * lb]);
        }
        let (a_len, b_len) = (sa[axis], sb[axis]);
        Ok(self.push_op(
            Tensor::new(out_shape, data)?,
            vec![a, b],
            Box::new(move |t, o, g| {
                let ga = narrow_tensor(g, axis, 0, a_len);
                let gb = narrow_tensor(g, axis, a_len, b_len);
                let _ = t;
                let _ = o;
                vec![ga, gb]
            }),
        ))
    }

    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        let shape = av.shape().to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Dim(format!(
                "narrow {:?} axis {} [{}, {})",
                shape,
                axis,
                start,
                start + len
            )));
        }
        let out = narrow_tensor(av, axis, start, len);
        Ok(self.push_op(
            out,
            vec![a],
            Box::new(move |_t, _o, g| {
                let mut full = Tensor::zeros(&shape);
                scatter_narrow(&mut full, g, axis, start);
                vec![full]
            }),
        ))
    }

    // ---- matrix ------------------------------------------------------

    /// [m,k] x [k,n] -> [m,n]
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dim(format!("matmul {:?} x {:?}", sa, sb)));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0f64; m * n];
        matmul_f64(av.data(), bv.data(), m, k, n, false, false, &mut out);
        Ok(self.push_op(
            Tensor::new(vec![m, n], out)?,
            vec![a, b],
            Box::new(move |t, o, g| {
                let (av, bv) = (t.parent(o, 0), t.parent(o, 1));
                let mut da = vec![0f64; m * k];
                // dA = G * B^T  : [m,n] x [n,k]
                matmul_f64(g.data(), bv.data(), m, n, k, false, true, &mut da);
                let mut db = vec![0f64; k * n];
                // dB = A^T * G : [k,m] x [m,n]
                matmul_f64(av.data(), g.data(), k, m, n, true, false, &mut db);
                vec![
                    Tensor::new(vec![m, k], da).unwrap(),
                    Tensor::new(vec![k, n], db).unwrap(),
                ]
            }),
        ))
    }

    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n]
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(Error::Dim(format!("bmm {:?} x {:?}", sa, sb)));
        }
        let (bsz, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0f64; bsz * m * n];
        for i in 0..bsz {
            matmul_f64(
                &av.data()[i * m * k..(i + 1) * m * k],
                &bv.data()[i * k * n..(i + 1) * k * n],
                m,
                k,
                n,
                false,
                false,
                &mut out[i * m * n..(i + 1) * m * n],
            );
        }
        Ok(self.push_op(
            Tensor::new(vec![bsz, m, n], out)?,
            vec![a, b],
            Box::new(move |t, o, g| {
                let (av, bv) = (t.parent(o, 0), t.parent(o, 1));
                let mut da = vec![0f64; bsz * m * k];
                let mut db = vec![0f64; bsz * k * n];
                for i in 0..bsz {
                    matmul_f64(
                        &g.data()[i * m * n..(i + 1) * m * n],
                        &bv.data()[i * k * n..(i + 1) * k * n],
                        m,
                        n,
                        k,
                        false,
                        true,
                        &mut da[i * m * k..(i + 1) * m * k],
                    );
                    matmul_f64(
                        &av.data()[i * m * k..(i + 1) * m * k],
                        &g.data()[i * m * n..(i + 1) * m * n],
                        k,
                        m,
                        n,
                        true,
                        false,
                        &mut db[i * k * n..(i + 1) * k * n],
                    );
                }
                vec![
                    Tensor::new(vec![bsz, m, k], da).unwrap(),
                    Tensor::new(vec![bsz, k, n], db).unwrap(),
                ]
            }),
        ))
    }

    // ---- normalization & reductions ---------------------------------

    pub fn softmax_last(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let d = *av.shape().last().unwrap_or(&1);
        let rows = av.numel() / d.max(1);
        let mut out = vec![0f64; av.numel()];
        for r in 0..rows {
            let row = &av.data()[r * d..(r + 1) * d];
            let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
            let mut z = 0f64;
            for (j, &v) in row.iter().enumerate() {
                let e = ((v - mx) as f64).exp();
                out[r * d + j] = e as f64;
                z += e;
            }
            for j in 0..d {
                out[r * d + j] = (out[r * d + j] as f64 / z) as f64;
            }
        }
        self.push_op(
            Tensor::new(av.shape().to_vec(), out).unwrap(),
            vec![a],
            Box::new(move |t, o, g| {
                let y = t.value(o);
                let mut dx = vec![0f64; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let dot: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv as f64 * gv as f64)
                        .sum();
                    for j in 0..d {
                        dx[r * d + j] = (yr[j] as f64 * (gr[j] as f64 - dot)) as f64;
                    }
                }
                vec![Tensor::new(y.shape().to_vec(), dx).unwrap()]
            }),
        )
    }

    /// Normalize over the last axis (zero mean, unit variance, no affine).
    pub fn layernorm_last(&mut self, a: Var, eps: f64) -> Var {
        let av = self.value(a);
        let d = *av.shape().last().unwrap_or(&1);
        let rows = av.numel() / d.max(1);
        let mut out = vec![0f64; av.numel()];
        let mut inv_sigma = vec![0f64; rows];
        for r in 0..rows {
            let row = &av.data()[r * d..(r + 1) * d];
            let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var: f64 = row
                .iter()
                .map(|&v| {
                    let c = v as f64 - mean;
                    c * c
                })
                .sum::<f64>()
                / d as f64;
            let is = 1.0 / (var + eps as f64).sqrt();
            inv_sigma[r] = is as f64;
            for j in 0..d {
                out[r * d + j] = ((row[j] as f64 - mean) * is) as f64;
            }
        }
        self.push_op(
            Tensor::new(av.shape().to_vec(), out).unwrap(),
            vec![a],
            Box::new(move |t, o, g| {
                let y = t.value(o); // normalized values
                let mut dx = vec![0f64; y.numel()];
                for r in 0..rows {
                    let yr = &y.data()[r * d..(r + 1) * d];
                    let gr = &g.data()[r * d..(r + 1) * d];
                    let gm: f64 =
                        gr.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
                    let gy: f64 = yr
                        .iter()
                        .zip(gr)
                        .map(|(&yv, &gv)| yv as f64 * gv as f64)
                        .sum::<f64>()
                        / d as f64;
                    let is = inv_sigma[r] as f64;
                    for j in 0..d {
                        dx[r * d + j] =
                            ((gr[j] as f64 - gm - yr[j] as f64 * gy) * is) as f64;
                    }
                }
                vec![Tensor::new(y.shape().to_vec(), dx).unwrap()]
            }),
        )
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let s: f64 = av.data().iter().map(|&v| v as f64).sum();
        let shape = av.shape().to_vec();
        self.push_op(
            Tensor::scalar(s as f64),
            vec![a],
            Box::new(move |_t, _o, g| vec![Tensor::full(&shape, g.item())]),
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f64)
    }

    // ---- lookup & spatial -------------------------------------------

    /// Row gather from a [rows, width] table; backward scatter-adds.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let shape = tv.shape();
        if shape.len() != 2 {
            return Err(Error::Dim(format!("gather table must be 2-D, got {:?}", shape)));
        }
        let (rows, w) = (shape[0], shape[1]);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary(format!("id {} out of table of {}", id, rows)));
            }
        }
        let mut data = Vec::with_capacity(ids.len() * w);
        for &id in ids {
            data.extend_from_slice(&tv.data()[id * w..(id + 1) * w]);
        }
        let ids = ids.to_vec();
        Ok(self.push_op(
            Tensor::new(vec![ids.len(), w], data)?,
            vec![table],
            Box::new(move |_t, _o, g| {
                let mut dt = Tensor::zeros(&[rows, w]);
                for (i, &id) in ids.iter().enumerate() {
                    let dst = &mut dt.data_mut()[id * w..(id + 1) * w];
                    for (d, &s) in dst.iter_mut().zip(&g.data()[i * w..(i + 1) * w]) {
                        *d += s;
                    }
                }
                vec![dt]
            }),
        ))
    }

    /// Average pool non-overlapping p x p patches: [B,H,W,C] -> [B,H/p,W/p,C].
    pub fn avgpool_patch(&mut self, a: Var, p: usize) -> Result<Var> {
        let av = self.value(a);
        let s = av.shape();
        if s.len() != 4 || s[1] % p != 0 || s[2] % p != 0 {
            return Err(Error::Dim(format!("avgpool {:?} p={}", s, p)));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h / p, w / p);
        let mut out = vec![0f64; b * oh * ow * c];
        let inv = 1.0 / (p * p) as f64;
        let ad = av.data();
        for bi in 0..b {
            for oy in 0..oh {
                for ox in 0..ow {
                    for ch in 0..c {
                        let mut acc = 0f64;
                        for py in 0..p {
                            for px in 0..p {
                                acc += ad[((bi * h + oy * p + py) * w + ox * p + px) * c + ch]
                                    as f64;
                            }
                        }
                        out[((bi * oh + oy) * ow + ox) * c + ch] = (acc * inv) as f64;
                    }
                }
            }
        }
        Ok(self.push_op(
            Tensor::new(vec![b, oh, ow, c], out)?,
            vec![a],
            Box::new(move |_t, _o, g| {
                let mut dx = Tensor::zeros(&[b, h, w, c]);
                let gd = g.data();
                let scale = (1.0 / (p * p) as f64) as f64;
                let dd = dx.data_mut();
                for bi in 0..b {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            for ch in 0..c {
                                let gv = gd[((bi * oh + oy) * ow + ox) * c + ch] * scale;
                                for py in 0..p {
                                    for px in 0..p {
                                        dd[((bi * h + oy * p + py) * w + ox * p + px) * c
                                            + ch] += gv;
                                    }
                                }
                            }
                        }
                    }
                }
                vec![dx]
            }),
        ))
    }

    /// 2-D convolution, NCHW layout, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let (xs, ws) = (xv.shape(), wv.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(Error::Dim(format!("conv2d x {:?} w {:?}", xs, ws)));
        }
        let (b, cin, h, win) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (win + 2 * pad - kw) / stride + 1;
        let mut out = vec![0f64; b * cout * oh * ow];
        {
            let xd = xv.data();
            let wd = wv.data();
            for bi in 0..b {
                for co in 0..cout {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = 0f64;
                            for ci in 0..cin {
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= win as isize {
                                            continue;
                                        }
                                        acc += xd[((bi * cin + ci) * h + iy as usize) * win
                                            + ix as usize]
                                            as f64
                                            * wd[((co * cin + ci) * kh + ky) * kw + kx] as f64;
                                    }
                                }
                            }
                            out[((bi * cout + co) * oh + oy) * ow + ox] = acc as f64;
                        }
                    }
                }
            }
        }
        let mut parents = vec![x, w];
        if let Some(bv) = bias {
            let bshape = self.value(bv).shape();
            if bshape != [cout] {
                return Err(Error::Dim(format!("conv bias {:?} vs cout {}", bshape, cout)));
            }
            for bi in 0..b {
                for co in 0..cout {
                    let bval = self.value(bv).data()[co];
                    for i in 0..oh * ow {
                        out[(bi * cout + co) * oh * ow + i] += bval;
                    }
                }
            }
            parents.push(bv);
        }
        let has_bias = bias.is_some();
        Ok(self.push_op(
            Tensor::new(vec![b, cout, oh, ow], out)?,
            parents,
            Box::new(move |t, o, g| {
                let xv = t.parent(o, 0);
                let wv = t.parent(o, 1);
                let gd = g.data();
                let mut dx = Tensor::zeros(&[b, cin, h, win]);
                let mut dw = Tensor::zeros(&[cout, cin, kh, kw]);
                {
                    let xd = xv.data();
                    let wd = wv.data();
                    let dxd = dx.data_mut();
                    for bi in 0..b {
                        for co in 0..cout {
                            for oy in 0..oh {
                                for ox in 0..ow {
                                    let gv = gd[((bi * cout + co) * oh + oy) * ow + ox];
                                    if gv == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..cin {
                                        for ky in 0..kh {
                                            let iy =
                                                (oy * stride + ky) as isize - pad as isize;
                                            if iy < 0 || iy >= h as isize {
                                                continue;
                                            }
                                            for kx in 0..kw {
                                                let ix = (ox * stride + kx) as isize
                                                    - pad as isize;
                                                if ix < 0 || ix >= win as isize {
                                                    continue;
                                                }
                                                let xi = ((bi * cin + ci) * h + iy as usize)
                                                    * win
                                                    + ix as usize;
                                                let wi =
                                                    ((co * cin + ci) * kh + ky) * kw + kx;
                                                dxd[xi] += gv * wd[wi];
                                                dw.data_mut()[wi] += gv * xd[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                let mut grads = vec![dx, dw];
                if has_bias {
                    let mut db = Tensor::zeros(&[cout]);
                    for bi in 0..b {
                        for co in 0..cout {
                            let mut acc = 0f64;
                            for i in 0..oh * ow {
                                acc += gd[(bi * cout + co) * oh * ow + i] as f64;
                            }
                            db.data_mut()[co] += acc as f64;
                        }
                    }
                    grads.push(db);
                }
                grads
            }),
        ))
    }

    /// Bilinear resize, NCHW, half-pixel centers. Linear in x.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 {
            return Err(Error::Dim(format!("bilinear_resize expects NCHW, got {:?}", s)));
        }
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let taps_y = bilinear_taps(h, oh);
        let taps_x = bilinear_taps(w, ow);
        let mut out = vec![0f64; b * c * oh * ow];
        {
            let xd = xv.data();
            for bc in 0..b * c {
                let src = &xd[bc * h * w..(bc + 1) * h * w];
                let dst = &mut out[bc * oh * ow..(bc + 1) * oh * ow];
                for oy in 0..oh {
                    let (y0, y1, wy) = taps_y[oy];
                    for ox in 0..ow {
                        let (x0, x1, wx) = taps_x[ox];
                        let v = src[y0 * w + x0] * (1.0 - wy) * (1.0 - wx)
                            + src[y0 * w + x1] * (1.0 - wy) * wx
                            + src[y1 * w + x0] * wy * (1.0 - wx)
                            + src[y1 * w + x1] * wy * wx;
                        dst[oy * ow + ox] = v;
                    }
                }
            }
        }
        Ok(self.push_op(
            Tensor::new(vec![b, c, oh, ow], out)?,
            vec![x],
            Box::new(move |_t, _o, g| {
                let mut dx = Tensor::zeros(&[b, c, h, w]);
                let gd = g.data();
                let dd = dx.data_mut();
                for bc in 0..b * c {
                    let dst = &mut dd[bc * h * w..(bc + 1) * h * w];
                    let src = &gd[bc * oh * ow..(bc + 1) * oh * ow];
                    for oy in 0..oh {
                        let (y0, y1, wy) = taps_y[oy];
                        for ox in 0..ow {
                            let (x0, x1, wx) = taps_x[ox];
                            let gv = src[oy * ow + ox];
                            dst[y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            dst[y0 * w + x1] += gv * (1.0 - wy) * wx;
                            dst[y1 * w + x0] += gv * wy * (1.0 - wx);
                            dst[y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
                vec![dx]
            }),
        ))
    }

    // ---- attention ---------------------------------------------------

    /// Multi-head scaled-dot attention. q: [..,S,C], k,v: [..,S',C] with the
    /// same leading batch dims. `mask` is an additive [S,S'] pattern over
    /// keys (0 visible, MASK_OFF hidden); rows with no visible key yield
    /// zero output.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        mask: Option<&Tensor>,
        heads: usize,
    ) -> Result<Var> {
        let qs = self.value(q).shape().to_vec();
        let ks = self.value(k).shape().to_vec();
        let vs = self.value(v).shape().to_vec();
        if qs.len() < 2 || ks.len() != qs.len() || vs != ks {
            return Err(Error::Dim(format!("attention q {:?} k {:?} v {:?}", qs, ks, vs)));
        }
        let c = *qs.last().unwrap();
        let s = qs[qs.len() - 2];
        let sk = ks[ks.len() - 2];
        if *ks.last().unwrap() != c {
            return Err(Error::Dim("attention channel mismatch".into()));
        }
        if c % heads != 0 {
            return Err(Error::Dim(format!("C={} not divisible by {} heads", c, heads)));
        }
        if qs[..qs.len() - 2] != ks[..ks.len() - 2] {
            return Err(Error::Dim("attention batch dims differ".into()));
        }
        let batch: usize = qs[..qs.len() - 2].iter().product::<usize>().max(1);
        let d = c / heads;

        let split = |t: &mut Tape, x: Var, seq: usize| -> Result<Var> {
            let r = t.reshape(x, &[batch, seq, heads, d])?;
            let p = t.permute(r, &[0, 2, 1, 3])?;
            t.reshape(p, &[batch * heads, seq, d])
        };
        let qh = split(self, q, s)?;
        let kh = split(self, k, sk)?;
        let vh = split(self, v, sk)?;
        let kt = self.permute(kh, &[0, 2, 1])?;
        let scores = self.bmm(qh, kt)?;
        let mut scores = self.scale(scores, 1.0 / (d as f64).sqrt());
        let mut row_valid: Option<Tensor> = None;
        if let Some(m) = mask {
            if m.shape() != [s, sk] {
                return Err(Error::Dim(format!(
                    "attention mask {:?}, want [{}, {}]",
                    m.shape(),
                    s,
                    sk
                )));
            }
            let mc = self.constant(m.clone());
            scores = self.add(scores, mc)?;
            let valid = Tensor::from_fn(&[s, 1], |i| {
                let any = (0..sk).any(|j| m.data()[i * sk + j] > MASK_OFF / 2.0);
                if any {
                    1.0
                } else {
                    0.0
                }
            });
            row_valid = Some(valid);
        }
        let mut probs = self.softmax_last(scores);
        if let Some(valid) = row_valid {
            let vc = self.constant(valid);
            probs = self.mul(probs, vc)?;
        }
        let ctx = self.bmm(probs, vh)?;
        let r = self.reshape(ctx, &[batch, heads, s, d])?;
        let p = self.permute(r, &[0, 2, 1, 3])?;
        self.reshape(p, &qs)
    }

    // ---- backward ----------------------------------------------------

    fn parent(&self, o: Var, i: usize) -> &Tensor {
        let p = self.nodes[o.0].parents[i];
        &self.nodes[p.0].value
    }

    /// Reverse sweep from a scalar root. Visits each recorded op at most
    /// once, in reverse record order.
    pub fn backward(&self, root: Var) -> Result<Grads> {
        let rv = &self.nodes[root.0].value;
        if rv.numel() != 1 {
            return Err(Error::Dim(format!(
                "backward root must be scalar, got {:?}",
                rv.shape()
            )));
        }
        if !rv.item().is_finite() {
            return Err(Error::Numeric("backward from non-finite value".into()));
        }
        let mut g: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(Tensor::scalar(1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || node.back.is_none() {
                continue;
            }
            let grad_out = match g[i].take() {
                Some(t) => t,
                None => continue,
            };
            let back = node.back.as_ref().unwrap();
            let pgrads = back(self, Var(i), &grad_out);
            debug_assert_eq!(pgrads.len(), node.parents.len());
            for (p, pg) in node.parents.iter().zip(pgrads) {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut g[p.0] {
                    Some(acc) => accumulate(acc, &pg),
                    slot => *slot = Some(pg),
                }
            }
            g[i] = Some(grad_out);
        }
        Ok(Grads { g })
    }
}

fn permute_tensor(t: &Tensor, perm: &[usize]) -> Tensor {
    let shape = t.shape();
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_str = strides_of(shape);
    let mut mapped = vec![0usize; rank];
    for (i, &p) in perm.iter().enumerate() {
        mapped[i] = in_str[p];
    }
    let mut out = vec![0f64; t.numel()];
    let td = t.data();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = td[src];
        for d in (0..rank).rev() {
            idx[d] += 1;
            src += mapped[d];
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
            src -= mapped[d] * out_shape[d];
        }
    }
    Tensor::new(out_shape, out).unwrap()
}

fn narrow_tensor(t: &Tensor, axis: usize, start: usize, len: usize) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax = shape[axis];
    let mut out_shape = shape.to_vec();
    out_shape[axis] = len;
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = (o * ax + start) * inner;
        data.extend_from_slice(&t.data()[base..base + len * inner]);
    }
    Tensor::new(out_shape, data).unwrap()
}

fn scatter_narrow(full: &mut Tensor, part: &Tensor, axis: usize, start: usize) {
    let shape = full.shape().to_vec();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let ax = shape[axis];
    let len = part.shape()[axis];
    let pd = part.data();
    let fd = full.data_mut();
    for o in 0..outer {
        let base = (o * ax + start) * inner;
        let pbase = o * len * inner;
        fd[base..base + len * inner].copy_from_slice(&pd[pbase..pbase + len * inner]);
    }
}

fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let center = (o as f64 + 0.5) * scale - 0.5;
            let c = center.max(0.0).min((src - 1) as f64);
            let i0 = c.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, c - i0 as f64)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_stream;
    use rand::Rng;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = rng_stream(seed, "tape-test");
        Tensor::from_fn(shape, |_| rng.gen::<f64>() * 2.0 - 1.0)
    }

    #[test]
    fn attention_single_key_returns_value() {
        let mut t = Tape::new();
        let c = 8;
        let q = t.constant(Tensor::ones(&[1, c]));
        let k = t.constant(Tensor::ones(&[1, c]));
        let v = t.constant(randn(&[1, c], 1));
        let out = t.attention(q, k, v, None, 2).unwrap();
        assert!(t.value(out).max_abs_diff(t.value(v)) < 1e-6);
    }

    #[test]
    fn attention_identical_keys_average_values() {
        let mut t = Tape::new();
        let c = 8;
        let q = t.constant(randn(&[1, c], 2));
        let key = randn(&[1, c], 3);
        let mut kd = key.data().to_vec();
        kd.extend_from_slice(key.data());
        let k = t.constant(Tensor::new(vec![2, c], kd).unwrap());
        let va = randn(&[1, c], 4);
        let vb = randn(&[1, c], 5);
        let mut vd = va.data().to_vec();
        vd.extend_from_slice(vb.data());
        let v = t.constant(Tensor::new(vec![2, c], vd).unwrap());
        let out = t.attention(q, k, v, None, 2).unwrap();
        let avg = Tensor::from_fn(&[1, c], |i| 0.5 * (va.data()[i] + vb.data()[i]));
        assert!(t.value(out).max_abs_diff(&avg) < 1e-6);
    }

    /// Straight-line loop reimplementation of single-head blocks of
    /// multi-head attention, used as the oracle.
    fn attention_loop_oracle(
        q: &Tensor,
        k: &Tensor,
        v: &Tensor,
        mask: Option<&Tensor>,
        heads: usize,
    ) -> Tensor {
        let s = q.shape()[0];
        let sk = k.shape()[0];
        let c = q.shape()[1];
        let d = c / heads;
        let mut out = Tensor::zeros(&[s, c]);
        for h in 0..heads {
            for i in 0..s {
                let mut logits = vec![0f64; sk];
                for j in 0..sk {
                    let mut dot = 0f64;
                    for e in 0..d {
                        dot += q.data()[i * c + h * d + e] as f64
                            * k.data()[j * c + h * d + e] as f64;
                    }
                    logits[j] = dot / (d as f64).sqrt();
                    if let Some(m) = mask {
                        logits[j] += m.data()[i * sk + j] as f64;
                    }
                }
                let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = logits.iter().map(|&l| (l - mx).exp()).collect();
                let z: f64 = exps.iter().sum();
                let all_masked = mask
                    .map(|m| (0..sk).all(|j| m.data()[i * sk + j] <= MASK_OFF / 2.0))
                    .unwrap_or(false);
                for e in 0..d {
                    let mut acc = 0f64;
                    for j in 0..sk {
                        acc += exps[j] / z * v.data()[j * c + h * d + e] as f64;
                    }
                    out.data_mut()[i * c + h * d + e] =
                        if all_masked { 0.0 } else { acc as f64 };
                }
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut t = Tape::new();
        let (s, c) = (4, 8);
        let qv = randn(&[s, c], 10);
        let kv = randn(&[s, c], 11);
        let vv = randn(&[s, c], 12);
        let q = t.constant(qv.clone());
        let k = t.constant(kv.clone());
        let v = t.constant(vv.clone());
        let out = t.attention(q, k, v, None, 2).unwrap();
        let oracle = attention_loop_oracle(&qv, &kv, &vv, None, 2);
        assert!(t.value(out).max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn attention_masked_rows_zero() {
        let mut t = Tape::new();
        let (s, c) = (3, 8);
        let qv = randn(&[s, c], 20);
        let kv = randn(&[s, c], 21);
        let vv = randn(&[s, c], 22);
        // row 1 sees nothing
        let mask = Tensor::from_fn(&[s, s], |i| if i / s == 1 { MASK_OFF } else { 0.0 });
        let q = t.constant(qv.clone());
        let k = t.constant(kv.clone());
        let v = t.constant(vv.clone());
        let out = t.attention(q, k, v, Some(&mask), 2).unwrap();
        let ov = t.value(out);
        for j in 0..c {
            assert_eq!(ov.data()[c + j], 0.0);
        }
        let oracle = attention_loop_oracle(&qv, &kv, &vv, Some(&mask), 2);
        assert!(ov.max_abs_diff(&oracle) < 1e-6);
    }

    #[test]
    fn attention_shape_mismatch_errors() {
        let mut t = Tape::new();
        let q = t.constant(Tensor::zeros(&[4, 8]));
        let k = t.constant(Tensor::zeros(&[4, 6]));
        let v = t.constant(Tensor::zeros(&[4, 6]));
        assert!(t.attention(q, k, v, None, 2).is_err());
    }

    #[test]
    fn backward_visits_each_op_once() {
        // y = (x + x) * x; dy/dx = 4x
        let mut t = Tape::new();
        let x = t.leaf(Tensor::new(vec![2], vec![1.5, -0.5]).unwrap());
        let s = t.add(x, x).unwrap();
        let m = t.mul(s, x).unwrap();
        let y = t.sum_all(m);
        let g = t.backward(y).unwrap();
        let gx = g.get(x).unwrap();
        assert!((gx.data()[0] - 6.0).abs() < 1e-6);
        assert!((gx.data()[1] + 2.0).abs() < 1e-6);
    }

    #[test]
    fn constants_receive_no_grad() {
        let mut t = Tape::new();
        let x = t.leaf(Tensor::ones(&[3]));
        let c = t.constant(Tensor::ones(&[3]));
        let m = t.mul(x, c).unwrap();
        let y = t.sum_all(m);
        let g = t.backward(y).unwrap();
        assert!(g.get(c).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn broadcast_add_bias_backward() {
        let mut t = Tape::new();
        let x = t.leaf(randn(&[2, 3], 30));
        let b = t.leaf(randn(&[3], 31));
        let s = t.add(x, b).unwrap();
        let y = t.sum_all(s);
        let g = t.backward(y).unwrap();
        assert_eq!(g.get(b).unwrap().shape(), &[3]);
        for &v in g.get(b).unwrap().data() {
            assert!((v - 2.0).abs() < 1e-6);
        }
    }

    #[test]
    fn permute_roundtrip() {
        let x = randn(&[2, 3, 4], 40);
        let p = permute_tensor(&x, &[2, 0, 1]);
        assert_eq!(p.shape(), &[4, 2, 3]);
        let back = permute_tensor(&p, &[1, 2, 0]);
        assert_eq!(back, x);
    }

    #[test]
    fn concat_narrow_roundtrip() {
        let mut t = Tape::new();
        let a = t.leaf(randn(&[2, 3], 50));
        let b = t.leaf(randn(&[2, 2], 51));
        let c = t.concat(1, a, b).unwrap();
        assert_eq!(t.value(c).shape(), &[2, 5]);
        let a2 = t.narrow(c, 1, 0, 3).unwrap();
        assert_eq!(t.value(a2), t.value(a));
        let y = t.sum_all(a2);
        let g = t.backward(y).unwrap();
        // grads only flow to a
        for &v in g.get(a).unwrap().data() {
            assert_eq!(v, 1.0);
        }
        assert!(g.get(b).is_none() || g.get(b).unwrap().max_abs() == 0.0);
    }
}
