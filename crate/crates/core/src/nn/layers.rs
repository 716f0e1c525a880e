use ndarray::IxDyn;

use super::params::{Init, ParamSpec};
use super::{Graph, NnError, ParamSet, Result, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// Bound GRU weights for one direction.
#[derive(Clone, Copy, Debug)]
pub struct GruParams {
    pub w_z: Var,
    pub w_r: Var,
    pub w_h: Var,
    pub u_z: Var,
    pub u_r: Var,
    pub u_h: Var,
    pub b_z: Var,
    pub b_r: Var,
    pub b_h: Var,
}

impl GruParams {
    pub fn specs(prefix: &str, input: usize, hidden: usize) -> Vec<ParamSpec> {
        let mut out = Vec::new();
        for gate in ["z", "r", "h"] {
            out.push(ParamSpec::new(
                format!("{prefix}.W_{gate}"),
                &[input, hidden],
                Init::Uniform,
            ));
            out.push(ParamSpec::new(
                format!("{prefix}.U_{gate}"),
                &[hidden, hidden],
                Init::Uniform,
            ));
            out.push(ParamSpec::new(
                format!("{prefix}.b_{gate}"),
                &[hidden],
                Init::Zeros,
            ));
        }
        out
    }

    pub fn bind(g: &mut Graph, ps: &ParamSet, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(ps, &format!("{prefix}.{n}"));
        Ok(Self {
            w_z: p("W_z")?,
            w_r: p("W_r")?,
            w_h: p("W_h")?,
            u_z: p("U_z")?,
            u_r: p("U_r")?,
            u_h: p("U_h")?,
            b_z: p("b_z")?,
            b_r: p("b_r")?,
            b_h: p("b_h")?,
        })
    }

    fn hidden(&self, g: &Graph) -> usize {
        g.value(self.u_z).shape()[0]
    }
}

/// One recurrence step given the input projections `x W + b` of the three gates.
fn gru_step(g: &mut Graph, xz: Var, xr: Var, xh: Var, h: Var, p: &GruParams) -> Result<Var> {
    let hz = g.linear(h, p.u_z, None)?;
    let z_pre = g.add(xz, hz)?;
    let z = g.sigmoid(z_pre);
    let hr = g.linear(h, p.u_r, None)?;
    let r_pre = g.add(xr, hr)?;
    let r = g.sigmoid(r_pre);
    let rh = g.mul(r, h)?;
    let hh = g.linear(rh, p.u_h, None)?;
    let cand_pre = g.add(xh, hh)?;
    let cand = g.tanh(cand_pre);
    // (1 - z) h + z cand, written as h + z (cand - h)
    let diff = g.sub(cand, h)?;
    let step = g.mul(z, diff)?;
    g.add(h, step)
}

/// Single GRU step on `[1, in]` input and `[1, H]` state.
pub fn gru_cell(g: &mut Graph, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let xz = g.linear(x, p.w_z, Some(p.b_z))?;
    let xr = g.linear(x, p.w_r, Some(p.b_r))?;
    let xh = g.linear(x, p.w_h, Some(p.b_h))?;
    gru_step(g, xz, xr, xh, h_prev, p)
}

/// Runs a GRU over the rows of `seq: [T, in]` from a zero state.
///
/// Returns one `[1, H]` state per input row, indexed by input position even
/// when `reverse` is set.
pub fn gru_sequence(g: &mut Graph, seq: Var, p: &GruParams, reverse: bool) -> Result<Vec<Var>> {
    let t_n = g.value(seq).shape().first().copied().unwrap_or(0);
    if t_n == 0 || g.value(seq).ndim() != 2 {
        return Err(NnError::EmptySequence);
    }
    let hidden = p.hidden(g);
    let xz = g.linear(seq, p.w_z, Some(p.b_z))?;
    let xr = g.linear(seq, p.w_r, Some(p.b_r))?;
    let xh = g.linear(seq, p.w_h, Some(p.b_h))?;
    let mut h = g.constant(Tensor::zeros(IxDyn(&[1, hidden])));
    let mut states = vec![h; t_n];
    let order: Vec<usize> = if reverse {
        (0..t_n).rev().collect()
    } else {
        (0..t_n).collect()
    };
    for t in order {
        let (rz, rr, rh) = (g.row(xz, t)?, g.row(xr, t)?, g.row(xh, t)?);
        h = gru_step(g, rz, rr, rh, h, p)?;
        states[t] = h;
    }
    Ok(states)
}

/// Bidirectional GRU: `[T, in] -> [T, 2H]`, forward half first.
pub fn bgru(g: &mut Graph, seq: Var, fwd: &GruParams, bwd: &GruParams) -> Result<Var> {
    let f = gru_sequence(g, seq, fwd, false)?;
    let b = gru_sequence(g, seq, bwd, true)?;
    let f = g.stack_rows(&f)?;
    let b = g.stack_rows(&b)?;
    g.concat_last(&[f, b])
}

/// Bound multi-head attention projections (no biases).
#[derive(Clone, Copy, Debug)]
pub struct AttentionParams {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

impl AttentionParams {
    pub fn specs(prefix: &str, d: usize) -> Vec<ParamSpec> {
        ["w_q", "w_k", "w_v", "w_o"]
            .iter()
            .map(|n| ParamSpec::new(format!("{prefix}.{n}"), &[d, d], Init::Uniform))
            .collect()
    }

    pub fn bind(g: &mut Graph, ps: &ParamSet, prefix: &str) -> Result<Self> {
        let mut p = |n: &str| g.param(ps, &format!("{prefix}.{n}"));
        Ok(Self {
            w_q: p("w_q")?,
            w_k: p("w_k")?,
            w_v: p("w_v")?,
            w_o: p("w_o")?,
        })
    }
}

/// Self-attention over `[L, d]` or batched `[B, L, d]` input.
pub fn multi_head_attention(
    g: &mut Graph,
    x: Var,
    p: &AttentionParams,
    heads: usize,
) -> Result<Var> {
    let shape = g.value(x).shape().to_vec();
    let x3 = match shape.len() {
        2 => g.reshape(x, &[1, shape[0], shape[1]])?,
        3 => x,
        _ => {
            return Err(super::shape_err(
                "multi_head_attention",
                format!("{shape:?}"),
            ))
        }
    };
    let q = g.linear(x3, p.w_q, None)?;
    let k = g.linear(x3, p.w_k, None)?;
    let v = g.linear(x3, p.w_v, None)?;
    let a = g.attention(q, k, v, heads)?;
    let o = g.linear(a, p.w_o, None)?;
    if shape.len() == 2 {
        g.reshape(o, &shape)
    } else {
        Ok(o)
    }
}

/// Bound pre-norm encoder layer parameters.
#[derive(Clone, Copy, Debug)]
pub struct TransformerParams {
    pub ln1_gamma: Var,
    pub ln1_beta: Var,
    pub attn: AttentionParams,
    pub ln2_gamma: Var,
    pub ln2_beta: Var,
    pub w1: Var,
    pub b1: Var,
    pub w2: Var,
    pub b2: Var,
}

impl TransformerParams {
    pub fn specs(prefix: &str, d: usize, d_ff: usize) -> Vec<ParamSpec> {
        let mut out = vec![
            ParamSpec::new(format!("{prefix}.ln1.gamma"), &[d], Init::Ones),
            ParamSpec::new(format!("{prefix}.ln1.beta"), &[d], Init::Zeros),
            ParamSpec::new(format!("{prefix}.ln2.gamma"), &[d], Init::Ones),
            ParamSpec::new(format!("{prefix}.ln2.beta"), &[d], Init::Zeros),
            ParamSpec::new(format!("{prefix}.ffn.w1"), &[d, d_ff], Init::Uniform),
            ParamSpec::new(format!("{prefix}.ffn.b1"), &[d_ff], Init::Zeros),
            ParamSpec::new(format!("{prefix}.ffn.w2"), &[d_ff, d], Init::Uniform),
            ParamSpec::new(format!("{prefix}.ffn.b2"), &[d], Init::Zeros),
        ];
        out.extend(AttentionParams::specs(&format!("{prefix}.attn"), d));
        out
    }

    pub fn bind(g: &mut Graph, ps: &ParamSet, prefix: &str) -> Result<Self> {
        let attn = AttentionParams::bind(g, ps, &format!("{prefix}.attn"))?;
        let mut p = |n: &str| g.param(ps, &format!("{prefix}.{n}"));
        Ok(Self {
            ln1_gamma: p("ln1.gamma")?,
            ln1_beta: p("ln1.beta")?,
            attn,
            ln2_gamma: p("ln2.gamma")?,
            ln2_beta: p("ln2.beta")?,
            w1: p("ffn.w1")?,
            b1: p("ffn.b1")?,
            w2: p("ffn.w2")?,
            b2: p("ffn.b2")?,
        })
    }
}

/// `X1 = X + MHA(LN(X + PE))`, `X2 = X1 + FFN(LN(X1))`.
///
/// `pe` (shape `[L, d]`) only enters the attention branch, so the residual
/// stream carries `X` unchanged and zero projections give the identity.
pub fn transformer_layer(
    g: &mut Graph,
    x: Var,
    p: &TransformerParams,
    heads: usize,
    pe: Option<Var>,
) -> Result<Var> {
    let src = match pe {
        Some(pe) => g.add_broadcast(x, pe)?,
        None => x,
    };
    let n1 = g.layer_norm(src, p.ln1_gamma, p.ln1_beta, LN_EPS)?;
    let a = multi_head_attention(g, n1, &p.attn, heads)?;
    let x1 = g.add(x, a)?;
    let n2 = g.layer_norm(x1, p.ln2_gamma, p.ln2_beta, LN_EPS)?;
    let h = g.linear(n2, p.w1, Some(p.b1))?;
    let h = g.relu(h);
    let f = g.linear(h, p.w2, Some(p.b2))?;
    g.add(x1, f)
}

/// Sinusoidal table: `PE[p, 2i] = sin(p / 10000^(2i/d))`, `PE[p, 2i+1] = cos(..)`.
pub fn positional_encoding(len: usize, d: usize) -> Result<Tensor> {
    if !d.is_multiple_of(2) {
        return Err(NnError::OddDimension(d));
    }
    Ok(Tensor::from_shape_fn(IxDyn(&[len, d]), |ix| {
        let (pos, j) = (ix[0] as f64, ix[1]);
        let i = (j / 2) as f64;
        let angle = pos / 10000f64.powf(2.0 * i / d as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    }))
}
