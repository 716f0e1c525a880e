use ndarray::linalg::general_mat_mul;
use ndarray::{s, Array2, ArrayView2, ArrayViewMut2, Axis, Dimension, Ix2, IxDyn};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

use super::fastexp::{exp_nonpos, exp_slice};
use super::{shape_err, NnError, ParamSet, Result};
use crate::audio::{self, Spectrogram};

/// Dense n-dimensional double-precision array.
pub type Tensor = ndarray::ArrayD<f64>;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

struct IstftPlan {
    spec: Spectrogram,
    window: Vec<f64>,
    wsum: Vec<f64>,
    pad: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBroadcast(Var, Var),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Tensor,
        rstd: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
    },
    ConcatLast(Vec<Var>),
    StackRows(Vec<Var>),
    Row {
        x: Var,
        index: usize,
    },
    SwapAxes01(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    Embed {
        feat: Array2<f64>,
        g: Var,
        w: Var,
        b: Var,
    },
    MaskedIstft {
        mask: Var,
        plan: Box<IstftPlan>,
    },
    SnrLoss {
        est: Var,
        clean: Vec<f64>,
        floored: bool,
        residual: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Computation record for one forward pass.
///
/// Gradients flow only into nodes that depend on a parameter bound with
/// [`Graph::param`]; constants and their descendants are skipped.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(String, Var)>,
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Adds `scale * dL/dparam` into every bound parameter of `ps`.
    pub fn accumulate_into(&self, graph: &Graph, ps: &mut ParamSet, scale: f64) -> Result<()> {
        for (name, var) in &graph.bindings {
            match self.get(*var) {
                Some(g) => ps.accumulate_grad(name, g, scale)?,
                None => {
                    let zeros = Tensor::zeros(graph.value(*var).raw_dim());
                    ps.accumulate_grad(name, &zeros, scale)?
                }
            }
        }
        Ok(())
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn to_2d(t: &Tensor, cols: usize) -> ArrayView2<'_, f64> {
    let rows = t.len().checked_div(cols).unwrap_or(0);
    t.view()
        .into_shape_with_order((rows, cols))
        .expect("standard-layout tensor")
}

/// Reshapes an owned array, copying into row-major order first if needed.
fn reshaped<D: ndarray::Dimension>(a: ndarray::Array<f64, D>, shape: IxDyn) -> Tensor {
    let a = if a.is_standard_layout() {
        a
    } else {
        a.as_standard_layout().into_owned()
    };
    a.into_shape_with_order(shape)
        .expect("element count preserved")
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// In-place numerically stable softmax over each row.
fn softmax_rows(mut m: ArrayViewMut2<'_, f64>) {
    for mut row in m.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let sum = match row.as_slice_mut() {
            Some(xs) => {
                xs.iter_mut().for_each(|v| *v -= max);
                exp_slice(xs)
            }
            None => {
                let mut sum = 0.0;
                row.mapv_inplace(|v| {
                    let e = exp_nonpos(v - max);
                    sum += e;
                    e
                });
                sum
            }
        };
        let inv = 1.0 / sum;
        row.mapv_inplace(|v| v * inv);
    }
}

/// Per-head attention probabilities `softmax(Q_h K_h^T / sqrt(d/h))` for one sequence.
pub fn attention_weights(
    q: ArrayView2<'_, f64>,
    k: ArrayView2<'_, f64>,
    heads: usize,
) -> Result<Vec<Array2<f64>>> {
    let d = q.ncols();
    if heads == 0 || !d.is_multiple_of(heads) {
        return Err(NnError::HeadsMismatch { d, heads });
    }
    if k.ncols() != d {
        return Err(shape_err("attention_weights", "q/k width differ"));
    }
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    Ok((0..heads)
        .map(|h| {
            let qh = q.slice(s![.., h * dh..(h + 1) * dh]);
            let kh = k.slice(s![.., h * dh..(h + 1) * dh]);
            let mut p = Array2::zeros((q.nrows(), k.nrows()));
            general_mat_mul(scale, &qh, &kh.t(), 0.0, &mut p);
            softmax_rows(p.view_mut());
            p
        })
        .collect())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// First element of a node's value, for scalar losses.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0]
            .value
            .iter()
            .next()
            .copied()
            .unwrap_or(f64::NAN)
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter as a differentiable leaf; binding twice returns the same node.
    pub fn param(&mut self, ps: &ParamSet, name: &str) -> Result<Var> {
        if let Some((_, v)) = self.bindings.iter().find(|(n, _)| n == name) {
            return Ok(*v);
        }
        let value = ps.value(name)?.as_standard_layout().into_owned();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bindings.push((name.to_string(), v));
        Ok(v)
    }

    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a) - self.value(b);
        Ok(self.push(value, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a) * self.value(b);
        Ok(self.push(value, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a) * factor;
        self.push(value, Op::Scale(a, factor), &[a])
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err("add_broadcast", format!("{sa:?} vs {sb:?}")));
        }
        let value = self.value(a) + self.value(b);
        Ok(self.push(value, Op::AddBroadcast(a, b), &[a, b]))
    }

    /// `x W (+ b)` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xv, wv) = (self.value(x), self.value(w));
        let ws = wv.shape();
        let xs = xv.shape();
        if ws.len() != 2 || xs.is_empty() || xs[xs.len() - 1] != ws[0] {
            return Err(shape_err("linear", format!("x {xs:?} with W {ws:?}")));
        }
        let (n_in, n_out) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.value(b).shape() != [n_out] {
                return Err(shape_err(
                    "linear",
                    format!("bias {:?} for {n_out} outputs", self.value(b).shape()),
                ));
            }
        }
        let x2 = to_2d(xv, n_in);
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let mut y = x2.dot(&w2);
        if let Some(b) = b {
            y += &self
                .value(b)
                .view()
                .into_dimensionality::<ndarray::Ix1>()
                .expect("rank 1");
        }
        let mut out_shape = xs.to_vec();
        *out_shape.last_mut().expect("non-empty") = n_out;
        let value = reshaped(y, IxDyn(&out_shape));
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(value, Op::Linear { x, w, b }, &parents))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(sigmoid);
        self.push(value, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(f64::tanh);
        self.push(value, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).mapv(|v| v.max(0.0));
        self.push(value, Op::Relu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(NnError::InvalidAxis {
                axis,
                rank: xv.ndim(),
            });
        }
        let mut value = xv.clone();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
            lane.mapv_inplace(|v| (v - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|v| v / sum);
        }
        Ok(self.push(value, Op::Softmax { x, axis }, &[x]))
    }

    /// Normalizes over the last axis, then scales by `gamma` and shifts by `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| shape_err("layer_norm", "rank 0"))?;
        if d == 0 || self.value(gamma).shape() != [d] || self.value(beta).shape() != [d] {
            return Err(shape_err(
                "layer_norm",
                format!(
                    "x {:?}, gamma {:?}, beta {:?}",
                    xv.shape(),
                    self.value(gamma).shape(),
                    self.value(beta).shape()
                ),
            ));
        }
        let x2 = to_2d(xv, d);
        let mut xhat = Array2::zeros(x2.raw_dim());
        let mut rstd = Vec::with_capacity(x2.nrows());
        for (row, mut out) in x2.rows().into_iter().zip(xhat.rows_mut()) {
            let mean = row.sum() / d as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            out.zip_mut_with(&row, |o, &v| *o = (v - mean) * r);
        }
        let g = self
            .value(gamma)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank 1");
        let b = self
            .value(beta)
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank 1");
        let y = &xhat * &g + b;
        let shape = xv.raw_dim();
        let value = y.into_shape_with_order(shape.clone()).expect("contiguous");
        let xhat = xhat.into_shape_with_order(shape).expect("contiguous");
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Scaled dot-product self-attention over `[B, L, d]` inputs split into `heads`.
    ///
    /// Probabilities are recomputed during the backward pass instead of stored.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        if qv.ndim() != 3 || qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(shape_err(
                "attention",
                format!("q {:?}, k {:?}, v {:?}", qv.shape(), kv.shape(), vv.shape()),
            ));
        }
        let (b_n, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        if heads == 0 || d % heads != 0 {
            return Err(NnError::HeadsMismatch { d, heads });
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Tensor::zeros(IxDyn(&[b_n, l, d]));
        let mut p = Array2::zeros((l, l));
        for b in 0..b_n {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![b, .., cols.clone()]);
                let kh = kv.slice(s![b, .., cols.clone()]);
                let vh = vv.slice(s![b, .., cols.clone()]);
                general_mat_mul(scale, &qh, &kh.t(), 0.0, &mut p);
                softmax_rows(p.view_mut());
                let mut oh = out.slice_mut(s![b, .., cols]);
                general_mat_mul(1.0, &p, &vh, 0.0, &mut oh);
            }
        }
        Ok(self.push(out, Op::Attention { q, k, v, heads }, &[q, k, v]))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or(NnError::EmptySequence)?;
        let lead = self.value(*first).shape()[..self.value(*first).ndim() - 1].to_vec();
        for p in parts {
            let s = self.value(*p).shape();
            if s[..s.len() - 1] != lead[..] {
                return Err(shape_err("concat_last", format!("{lead:?} vs {s:?}")));
            }
        }
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let axis = Axis(lead.len());
        let value = ndarray::concatenate(axis, &views)
            .map_err(|e| shape_err("concat_last", e.to_string()))?
            .as_standard_layout()
            .into_owned();
        Ok(self.push(value, Op::ConcatLast(parts.to_vec()), parts))
    }

    /// Stacks same-shape rows (`[n]` or `[1, n]`) into a `[T, n]` matrix.
    pub fn stack_rows(&mut self, rows: &[Var]) -> Result<Var> {
        let first = rows.first().ok_or(NnError::EmptySequence)?;
        let n = self.value(*first).len();
        let mut value = Tensor::zeros(IxDyn(&[rows.len(), n]));
        for (i, r) in rows.iter().enumerate() {
            let rv = self.value(*r);
            if rv.len() != n {
                return Err(shape_err(
                    "stack_rows",
                    format!("row {i} has {} values", rv.len()),
                ));
            }
            value
                .slice_mut(s![i, ..])
                .iter_mut()
                .zip(rv.iter())
                .for_each(|(o, v)| *o = *v);
        }
        Ok(self.push(value, Op::StackRows(rows.to_vec()), rows))
    }

    /// Row `index` of a `[T, n]` matrix as a `[1, n]` matrix.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() != 2 || index >= xv.shape()[0] {
            return Err(shape_err("row", format!("row {index} of {:?}", xv.shape())));
        }
        let value = xv.slice(s![index..index + 1, ..]).to_owned().into_dyn();
        Ok(self.push(value, Op::Row { x, index }, &[x]))
    }

    /// `[A, B, ...] -> [B, A, ...]`.
    pub fn swap_axes01(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if xv.ndim() < 2 {
            return Err(shape_err("swap_axes01", format!("rank {}", xv.ndim())));
        }
        let mut view = xv.view();
        view.swap_axes(0, 1);
        let value = view.as_standard_layout().into_owned();
        Ok(self.push(value, Op::SwapAxes01(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != shape.iter().product::<usize>() {
            return Err(shape_err(
                "reshape",
                format!("{:?} -> {shape:?}", xv.shape()),
            ));
        }
        let value = xv
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .expect("element count checked");
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::from_elem(IxDyn(&[]), self.value(x).sum());
        self.push(value, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let value = Tensor::from_elem(IxDyn(&[]), xv.sum() / xv.len().max(1) as f64);
        self.push(value, Op::Mean(x), &[x])
    }

    /// Per-bin embedding `e[t, f] = [feat[t, f], g[t]] W + b`, producing `[T, F, d]`.
    pub fn embed(&mut self, feat: Array2<f64>, g: Var, w: Var, b: Var) -> Result<Var> {
        let (t_n, f_n) = feat.dim();
        let (gv, wv, bv) = (self.value(g), self.value(w), self.value(b));
        let gs = gv.shape();
        let ws = wv.shape();
        if gs.len() != 2
            || gs[0] != t_n
            || ws.len() != 2
            || ws[0] != gs[1] + 1
            || bv.shape() != [ws[1]]
        {
            return Err(shape_err(
                "embed",
                format!(
                    "feat {:?}, g {gs:?}, W {ws:?}, b {:?}",
                    feat.dim(),
                    bv.shape()
                ),
            ));
        }
        let d = ws[1];
        let feat = feat.as_standard_layout().into_owned();
        let w2 = wv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let w_mag = w2.row(0);
        let w_rest = w2.slice(s![1.., ..]);
        let g2 = gv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let frame_part = g2.dot(&w_rest);
        let b1 = bv
            .view()
            .into_dimensionality::<ndarray::Ix1>()
            .expect("rank 1");
        let mut value = Tensor::zeros(IxDyn(&[t_n, f_n, d]));
        for t in 0..t_n {
            let base = &frame_part.row(t) + &b1;
            for f in 0..f_n {
                let m = feat[[t, f]];
                let mut out = value.slice_mut(s![t, f, ..]);
                ndarray::Zip::from(&mut out)
                    .and(&base)
                    .and(&w_mag)
                    .for_each(|o, &bb, &wm| *o = m * wm + bb);
            }
        }
        Ok(self.push(value, Op::Embed { feat, g, w, b }, &[g, w, b]))
    }

    /// Inverse STFT of `mask * spec`; `mask` is `[T, F]` real, `spec` stays constant.
    pub fn masked_istft(&mut self, mask: Var, spec: &Spectrogram) -> Result<Var> {
        let mv = self.value(mask);
        if mv.shape() != [spec.num_frames(), spec.num_bins()] {
            return Err(shape_err(
                "masked_istft",
                format!(
                    "mask {:?} for spectrogram {:?}",
                    mv.shape(),
                    spec.frames.dim()
                ),
            ));
        }
        let m2 = mv.view().into_dimensionality::<Ix2>().expect("rank 2");
        let mut masked = spec.clone();
        ndarray::Zip::from(&mut masked.frames)
            .and(&m2)
            .for_each(|c, &m| *c *= m);
        let wave = audio::istft(&masked)?;
        let window = audio::hann_window(spec.win_len)?;
        let wsum = audio::window_square_sum(&window, spec.hop, spec.num_frames());
        let pad = spec.win_len / 2;
        let value = Tensor::from_shape_vec(IxDyn(&[wave.len()]), wave.samples).expect("1-d");
        let plan = Box::new(IstftPlan {
            spec: spec.clone(),
            window,
            wsum,
            pad,
        });
        Ok(self.push(value, Op::MaskedIstft { mask, plan }, &[mask]))
    }

    /// Negative SNR in dB of `est` against a constant `clean`, floored at `-cap_db`.
    pub fn snr_loss(&mut self, clean: &[f64], est: Var, cap_db: f64, eps: f64) -> Result<Var> {
        let ev = self.value(est);
        if ev.len() != clean.len() || ev.ndim() != 1 {
            return Err(shape_err(
                "snr_loss",
                format!("clean {} vs estimate {:?}", clean.len(), ev.shape()),
            ));
        }
        let signal: f64 = clean.iter().map(|c| c * c).sum();
        if signal == 0.0 {
            return Err(NnError::SilentReference);
        }
        let residual: f64 = clean
            .iter()
            .zip(ev.iter())
            .map(|(c, e)| (c - e) * (c - e))
            .sum();
        let raw = -10.0 * (signal / (residual + eps)).log10();
        let floored = raw < -cap_db;
        let loss = if floored { -cap_db } else { raw };
        let value = Tensor::from_elem(IxDyn(&[]), loss);
        Ok(self.push(
            value,
            Op::SnrLoss {
                est,
                clean: clean.to_vec(),
                floored,
                residual: residual + eps,
            },
            &[est],
        ))
    }

    /// Hash of which side of every non-differentiable point the recorded
    /// values fall on: ReLU input signs and engaged loss floors.
    pub fn kink_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |bit: bool| {
            h ^= bit as u64 + 1;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => self.value(*x).iter().for_each(|&v| feed(v > 0.0)),
                Op::SnrLoss { floored, .. } => feed(*floored),
                _ => {}
            }
        }
        h
    }

    /// Reverse sweep from a scalar node; returns gradients of every leaf that
    /// requires one.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NnError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(lv.raw_dim()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let g = if g.is_standard_layout() {
            g
        } else {
            g.as_standard_layout().into_owned()
        };
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot @ None => *slot = Some(g),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::Scale(a, f) => self.accumulate(grads, *a, g * *f),
            Op::AddBroadcast(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.wants(*b) {
                    let bshape = self.value(*b).raw_dim();
                    let n = bshape.size();
                    let summed = to_2d(g, n).sum_axis(Axis(0));
                    self.accumulate(grads, *b, reshaped(summed, bshape));
                }
            }
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let (n_in, n_out) = (wv.shape()[0], wv.shape()[1]);
                let g2 = to_2d(g, n_out);
                let w2 = wv.view().into_dimensionality::<Ix2>().expect("rank 2");
                if self.wants(*x) {
                    let gx = g2.dot(&w2.t());
                    let shape = self.value(*x).raw_dim();
                    self.accumulate(grads, *x, reshaped(gx, shape));
                }
                if self.wants(*w) {
                    let x2 = to_2d(self.value(*x), n_in);
                    self.accumulate(grads, *w, x2.t().dot(&g2).into_dyn());
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        self.accumulate(grads, *b, g2.sum_axis(Axis(0)).into_dyn());
                    }
                }
            }
            Op::Sigmoid(x) => {
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &s| *gv *= s * (1.0 - s));
                self.accumulate(grads, *x, gx);
            }
            Op::Tanh(x) => {
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &t| *gv *= 1.0 - t * t);
                self.accumulate(grads, *x, gx);
            }
            Op::Relu(x) => {
                let mut gx = g.clone();
                gx.zip_mut_with(y, |gv, &r| {
                    if r <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(grads, *x, gx);
            }
            Op::Softmax { x, axis } => {
                let dot = (g * y).sum_axis(Axis(*axis)).insert_axis(Axis(*axis));
                let gx = y * &(g - &dot);
                self.accumulate(grads, *x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = rstd.len().max(1);
                let d = xhat.len() / d;
                let g2 = to_2d(g, d);
                let xh2 = to_2d(xhat, d);
                if self.wants(*gamma) {
                    self.accumulate(grads, *gamma, (&g2 * &xh2).sum_axis(Axis(0)).into_dyn());
                }
                if self.wants(*beta) {
                    self.accumulate(grads, *beta, g2.sum_axis(Axis(0)).into_dyn());
                }
                if self.wants(*x) {
                    let gam = self
                        .value(*gamma)
                        .view()
                        .into_dimensionality::<ndarray::Ix1>()
                        .expect("rank 1");
                    let mut gx = Array2::zeros(g2.raw_dim());
                    for (r, ((grow, xrow), mut out)) in g2
                        .rows()
                        .into_iter()
                        .zip(xh2.rows())
                        .zip(gx.rows_mut())
                        .enumerate()
                    {
                        let dxhat = &grow * &gam;
                        let mean_d = dxhat.sum() / d as f64;
                        let mean_dx = (&dxhat * &xrow).sum() / d as f64;
                        let rs = rstd[r];
                        ndarray::Zip::from(&mut out)
                            .and(&dxhat)
                            .and(&xrow)
                            .for_each(|o, &dh, &xh| *o = rs * (dh - mean_d - xh * mean_dx));
                    }
                    let shape = self.value(*x).raw_dim();
                    self.accumulate(grads, *x, reshaped(gx, shape));
                }
            }
            Op::Attention { q, k, v, heads } => {
                let (gq, gk, gv) = self.attention_backward(*q, *k, *v, *heads, g);
                self.accumulate(grads, *q, gq);
                self.accumulate(grads, *k, gk);
                self.accumulate(grads, *v, gv);
            }
            Op::ConcatLast(parts) => {
                let axis = Axis(g.ndim() - 1);
                let mut start = 0;
                for p in parts {
                    let width = *self.value(*p).shape().last().expect("rank >= 1");
                    if self.wants(*p) {
                        let piece = g
                            .slice_axis(axis, ndarray::Slice::from(start..start + width))
                            .as_standard_layout()
                            .into_owned();
                        self.accumulate(grads, *p, piece);
                    }
                    start += width;
                }
            }
            Op::StackRows(rows) => {
                for (r, v) in rows.iter().enumerate() {
                    if self.wants(*v) {
                        let shape = self.value(*v).raw_dim();
                        let piece = g
                            .slice(s![r, ..])
                            .to_owned()
                            .into_shape_with_order(shape)
                            .expect("row size");
                        self.accumulate(grads, *v, piece);
                    }
                }
            }
            Op::Row { x, index } => {
                let mut gx = Tensor::zeros(self.value(*x).raw_dim());
                gx.slice_mut(s![*index..*index + 1, ..]).assign(g);
                self.accumulate(grads, *x, gx);
            }
            Op::SwapAxes01(x) => {
                let mut view = g.view();
                view.swap_axes(0, 1);
                self.accumulate(grads, *x, view.as_standard_layout().into_owned());
            }
            Op::Reshape(x) => {
                let shape = self.value(*x).raw_dim();
                self.accumulate(grads, *x, reshaped(g.clone(), shape));
            }
            Op::Sum(x) => {
                let s = g.iter().next().copied().unwrap_or(0.0);
                self.accumulate(grads, *x, Tensor::from_elem(self.value(*x).raw_dim(), s));
            }
            Op::Mean(x) => {
                let xv = self.value(*x);
                let s = g.iter().next().copied().unwrap_or(0.0) / xv.len().max(1) as f64;
                self.accumulate(grads, *x, Tensor::from_elem(xv.raw_dim(), s));
            }
            Op::Embed {
                feat,
                g: gvar,
                w,
                b,
            } => {
                let (t_n, f_n) = feat.dim();
                let wv = self.value(*w);
                let d = wv.shape()[1];
                let g3 = g
                    .view()
                    .into_shape_with_order((t_n, f_n, d))
                    .expect("embed grad");
                // Sum over bins: gradient of the per-frame part.
                let frame_grad = g3.sum_axis(Axis(1));
                if self.wants(*b) {
                    self.accumulate(grads, *b, frame_grad.sum_axis(Axis(0)).into_dyn());
                }
                if self.wants(*w) {
                    let mut gw = Array2::zeros((wv.shape()[0], d));
                    let g_flat = g
                        .view()
                        .into_shape_with_order((t_n * f_n, d))
                        .expect("flat");
                    let feat_flat = feat.view().into_shape_with_order(t_n * f_n).expect("flat");
                    gw.row_mut(0).assign(&feat_flat.dot(&g_flat));
                    let g2 = self
                        .value(*gvar)
                        .view()
                        .into_dimensionality::<Ix2>()
                        .expect("rank 2");
                    gw.slice_mut(s![1.., ..]).assign(&g2.t().dot(&frame_grad));
                    self.accumulate(grads, *w, gw.into_dyn());
                }
                if self.wants(*gvar) {
                    let w2 = wv.view().into_dimensionality::<Ix2>().expect("rank 2");
                    let gg = frame_grad.dot(&w2.slice(s![1.., ..]).t());
                    self.accumulate(grads, *gvar, gg.into_dyn());
                }
            }
            Op::MaskedIstft { mask, plan } => {
                let gm = masked_istft_backward(plan, g);
                self.accumulate(grads, *mask, gm.into_dyn());
            }
            Op::SnrLoss {
                est,
                clean,
                floored,
                residual,
            } => {
                let ev = self.value(*est);
                let gs = g.iter().next().copied().unwrap_or(0.0);
                let gx = if *floored {
                    Tensor::zeros(ev.raw_dim())
                } else {
                    // d/de [10 log10(sum (c - e)^2 + eps)]
                    let k = gs * 10.0 / std::f64::consts::LN_10 / residual;
                    let vals: Vec<f64> = clean
                        .iter()
                        .zip(ev.iter())
                        .map(|(c, e)| -2.0 * k * (c - e))
                        .collect();
                    Tensor::from_shape_vec(ev.raw_dim(), vals).expect("same length")
                };
                self.accumulate(grads, *est, gx);
            }
        }
        Ok(())
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        g: &Tensor,
    ) -> (Tensor, Tensor, Tensor) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (b_n, l, d) = (qv.shape()[0], qv.shape()[1], qv.shape()[2]);
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut gq = Tensor::zeros(qv.raw_dim());
        let mut gk = Tensor::zeros(kv.raw_dim());
        let mut gv = Tensor::zeros(vv.raw_dim());
        let mut p = Array2::zeros((l, l));
        let mut dp = Array2::zeros((l, l));
        for b in 0..b_n {
            for h in 0..heads {
                let cols = h * dh..(h + 1) * dh;
                let qh = qv.slice(s![b, .., cols.clone()]);
                let kh = kv.slice(s![b, .., cols.clone()]);
                let vh = vv.slice(s![b, .., cols.clone()]);
                let go = g.slice(s![b, .., cols.clone()]);
                general_mat_mul(scale, &qh, &kh.t(), 0.0, &mut p);
                softmax_rows(p.view_mut());
                general_mat_mul(
                    1.0,
                    &p.t(),
                    &go,
                    0.0,
                    &mut gv.slice_mut(s![b, .., cols.clone()]),
                );
                general_mat_mul(1.0, &go, &vh.t(), 0.0, &mut dp);
                // dS = P * (dP - rowsum(dP * P)), folded with the 1/sqrt(dh) scale.
                for (mut drow, prow) in dp.rows_mut().into_iter().zip(p.rows()) {
                    let dot: f64 = drow.iter().zip(prow.iter()).map(|(a, b)| a * b).sum();
                    drow.zip_mut_with(&prow, |dv, &pv| *dv = pv * (*dv - dot) * scale);
                }
                general_mat_mul(
                    1.0,
                    &dp,
                    &kh,
                    0.0,
                    &mut gq.slice_mut(s![b, .., cols.clone()]),
                );
                general_mat_mul(1.0, &dp.t(), &qh, 0.0, &mut gk.slice_mut(s![b, .., cols]));
            }
        }
        (gq, gk, gv)
    }
}

/// Adjoint of `mask -> istft(mask * spec)`.
///
/// With `G_t[n] = w[n] g_pad[t hop + n] / D[t hop + n]`, the derivative is
/// `c_k / N * Re(S[t, k] * conj(FFT(G_t)[k]))`, `c_k = 1` at DC and Nyquist, 2 elsewhere.
fn masked_istft_backward(plan: &IstftPlan, g: &Tensor) -> Array2<f64> {
    let spec = &plan.spec;
    let n = spec.win_len;
    let half = n / 2;
    let mut gpad = vec![0.0; plan.wsum.len()];
    for (j, gv) in g.iter().enumerate() {
        gpad[plan.pad + j] = gv / plan.wsum[plan.pad + j];
    }
    let fft = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex64::new(0.0, 0.0); n];
    let mut out = Array2::zeros(spec.frames.dim());
    for t in 0..spec.num_frames() {
        let start = t * spec.hop;
        for (k, slot) in buf.iter_mut().enumerate() {
            *slot = Complex64::new(plan.window[k] * gpad[start + k], 0.0);
        }
        fft.process(&mut buf);
        for k in 0..=half {
            let c = if k == 0 || k == half { 1.0 } else { 2.0 };
            out[[t, k]] = c / n as f64 * (spec.frames[[t, k]] * buf[k].conj()).re;
        }
    }
    out
}
