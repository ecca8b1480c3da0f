//! Forward passes for the three architecture stages.

use super::{Bound, CfreConfig, MlfeConfig, ModelError, ParamStore, TdseConfig};
use crate::tensor::{Tensor, TensorError};
use rand_chacha::ChaCha8Rng;

const BN_EPS: f64 = 1e-5;
const BN_MOMENTUM: f64 = 0.1;
const LN_EPS: f64 = 1e-5;

/// `x·W + b` over the trailing dimension.
pub(crate) fn linear<'t>(
    x: Tensor<'t>,
    w: Tensor<'t>,
    b: Tensor<'t>,
) -> Result<Tensor<'t>, TensorError> {
    x.matmul(w)?.add(b)
}

/// Batch-norm statistics source for one block invocation.
pub enum BnMode<'a> {
    /// Use batch statistics; the slot receives them for running updates.
    Train,
    /// Use the provided running (mean, var).
    Eval(&'a [f64], &'a [f64]),
}

/// Parameter handles for one residual conv block.
pub struct ResConvParams<'t> {
    pub conv_t_weight: Tensor<'t>,
    pub conv_t_bias: Tensor<'t>,
    pub conv_f_weight: Tensor<'t>,
    pub conv_f_bias: Tensor<'t>,
    pub bn_gamma: Tensor<'t>,
    pub bn_beta: Tensor<'t>,
    /// 1×1 projection, present iff the block changes channel count.
    pub shortcut: Option<(Tensor<'t>, Tensor<'t>)>,
}

/// One residual block over `(batch, channels, time)`:
/// `ReLU(BN(Conv_t(x) + Conv_f(x))) + Shortcut(x)`.
///
/// `Conv_t` uses `dilation` with padding `⌊k_t/2⌋·dilation`; `Conv_f`
/// is undilated with padding `⌊k_f/2⌋`; both preserve length. Returns
/// the block output plus the batch statistics when run in train mode.
pub fn res_conv_forward<'t>(
    x: Tensor<'t>,
    params: &ResConvParams<'t>,
    dilation: usize,
    bn: BnMode<'_>,
) -> Result<(Tensor<'t>, Option<(Vec<f64>, Vec<f64>)>), TensorError> {
    let k_t = params.conv_t_weight.shape()[2];
    let k_f = params.conv_f_weight.shape()[2];
    let p_t = (k_t / 2) * dilation;
    let p_f = k_f / 2;

    let x_t = x.conv1d(params.conv_t_weight, Some(params.conv_t_bias), 1, dilation, p_t, p_t)?;
    let x_f = x.conv1d(params.conv_f_weight, Some(params.conv_f_bias), 1, 1, p_f, p_f)?;
    let summed = x_t.add(x_f)?;

    let (normed, stats) = match bn {
        BnMode::Train => {
            let (y, mean, var) = summed.batchnorm_train(params.bn_gamma, params.bn_beta, BN_EPS)?;
            (y, Some((mean, var)))
        }
        BnMode::Eval(mean, var) => (
            summed.batchnorm_eval(params.bn_gamma, params.bn_beta, BN_EPS, mean, var)?,
            None,
        ),
    };
    let activated = normed.relu();

    let identity = match &params.shortcut {
        Some((w, b)) => x.conv1d(*w, Some(*b), 1, 1, 0, 0)?,
        None => x,
    };
    Ok((activated.add(identity)?, stats))
}

fn bound_block<'t>(bound: &Bound<'t>, prefix: &str, has_shortcut: bool) -> ResConvParams<'t> {
    ResConvParams {
        conv_t_weight: bound.get(&format!("{prefix}.conv_t.weight")),
        conv_t_bias: bound.get(&format!("{prefix}.conv_t.bias")),
        conv_f_weight: bound.get(&format!("{prefix}.conv_f.weight")),
        conv_f_bias: bound.get(&format!("{prefix}.conv_f.bias")),
        bn_gamma: bound.get(&format!("{prefix}.bn.gamma")),
        bn_beta: bound.get(&format!("{prefix}.bn.beta")),
        shortcut: has_shortcut.then(|| {
            (
                bound.get(&format!("{prefix}.shortcut.weight")),
                bound.get(&format!("{prefix}.shortcut.bias")),
            )
        }),
    }
}

/// CFRE: permute to `(b, c, T)`, three residual blocks with the extra
/// dilation in the middle one, permute back to `(b, T, d_m)`.
pub(crate) fn cfre_forward<'t>(
    x: Tensor<'t>,
    bound: &Bound<'t>,
    config: &CfreConfig,
    training: bool,
    store: &mut ParamStore,
) -> Result<Tensor<'t>, ModelError> {
    let widths = [
        config.in_channels,
        config.hidden.0,
        config.hidden.1,
        config.model_dim,
    ];
    let dilations = [1, config.dilation, 1];
    let mut cur = x.permute(&[0, 2, 1])?;
    for b in 0..3 {
        let prefix = format!("cfre.block{b}");
        let params = bound_block(bound, &prefix, widths[b] != widths[b + 1]);
        let (out, stats) = if training {
            res_conv_forward(cur, &params, dilations[b], BnMode::Train)?
        } else {
            let mean = store.buffer(&format!("{prefix}.bn.running_mean")).data().to_vec();
            let var = store.buffer(&format!("{prefix}.bn.running_var")).data().to_vec();
            res_conv_forward(cur, &params, dilations[b], BnMode::Eval(&mean, &var))?
        };
        if let Some((mean, var)) = stats {
            let rm = store.buffer_mut(&format!("{prefix}.bn.running_mean"));
            for (r, m) in rm.data_mut().iter_mut().zip(&mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = store.buffer_mut(&format!("{prefix}.bn.running_var"));
            for (r, v) in rv.data_mut().iter_mut().zip(&var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v;
            }
        }
        cur = out;
    }
    Ok(cur.permute(&[0, 2, 1])?)
}

/// TDSE: learnable positions, prepended class token, post-norm encoder
/// layers (attention → add&norm → FFN → add&norm, GELU feed-forward).
///
/// Returns `(x_enc (b,T+1,d), x_co (b,d), attention per layer)`.
pub(crate) fn tdse_forward<'t>(
    x: Tensor<'t>,
    bound: &Bound<'t>,
    config: &TdseConfig,
    training: bool,
    dropout_rng: &mut ChaCha8Rng,
) -> Result<(Tensor<'t>, Tensor<'t>, Vec<Tensor<'t>>), ModelError> {
    let shape = x.shape();
    let (b, t, d) = (shape[0], shape[1], shape[2]);
    if t > config.max_len {
        return Err(ModelError::SequenceTooLong {
            t,
            t_max: config.max_len,
        });
    }
    let heads = config.heads;
    let d_k = d / heads;
    let scale = 1.0 / (d_k as f64).sqrt();

    let pos = bound.get("tdse.pos").narrow(1, 0, t)?;
    let x_pos = x.add(pos)?;
    let cls = bound.get("tdse.cls").broadcast_to(&[b, 1, d])?;
    let mut seq = Tensor::concat(&[cls, x_pos], 1)?;
    let s = t + 1;

    let mut attention = Vec::with_capacity(config.layers);
    for l in 0..config.layers {
        let p = format!("tdse.layer{l}");
        let split_heads = |tensor: Tensor<'t>| -> Result<Tensor<'t>, TensorError> {
            tensor.reshape(&[b, s, heads, d_k])?.permute(&[0, 2, 1, 3])
        };
        let q = split_heads(linear(seq, bound.get(&format!("{p}.attn.wq")), bound.get(&format!("{p}.attn.bq")))?)?;
        let k = split_heads(linear(seq, bound.get(&format!("{p}.attn.wk")), bound.get(&format!("{p}.attn.bk")))?)?;
        let v = split_heads(linear(seq, bound.get(&format!("{p}.attn.wv")), bound.get(&format!("{p}.attn.bv")))?)?;

        let scores = q.matmul(k.permute(&[0, 1, 3, 2])?)?.scale(scale);
        let attn = scores.softmax(3)?;
        attention.push(attn);
        let ctx = attn
            .matmul(v)?
            .permute(&[0, 2, 1, 3])?
            .reshape(&[b, s, d])?;
        let mut projected = linear(ctx, bound.get(&format!("{p}.attn.wo")), bound.get(&format!("{p}.attn.bo")))?;
        if training && config.dropout > 0.0 {
            projected = projected.dropout(config.dropout, dropout_rng)?;
        }
        seq = seq.add(projected)?.layernorm(
            bound.get(&format!("{p}.ln1.gamma")),
            bound.get(&format!("{p}.ln1.beta")),
            LN_EPS,
        )?;

        let hidden = linear(seq, bound.get(&format!("{p}.ffn.w1")), bound.get(&format!("{p}.ffn.b1")))?.gelu();
        let mut ff = linear(hidden, bound.get(&format!("{p}.ffn.w2")), bound.get(&format!("{p}.ffn.b2")))?;
        if training && config.dropout > 0.0 {
            ff = ff.dropout(config.dropout, dropout_rng)?;
        }
        seq = seq.add(ff)?.layernorm(
            bound.get(&format!("{p}.ln2.gamma")),
            bound.get(&format!("{p}.ln2.beta")),
            LN_EPS,
        )?;
    }

    let x_co = seq.narrow(1, 0, 1)?.reshape(&[b, d])?;
    Ok((seq, x_co, attention))
}

/// MLFE: per layer, a selective scan driven by per-step `(Δ, B, C)`
/// projections of the input, gated by an expand → causal conv → SiLU →
/// project-back path. Output is mean-pooled over time for `x_co`.
pub(crate) fn mlfe_forward<'t>(
    x: Tensor<'t>,
    bound: &Bound<'t>,
    config: &MlfeConfig,
) -> Result<(Tensor<'t>, Tensor<'t>), ModelError> {
    let d = config.model_dim;
    let s_dim = config.state_dim;
    let mut cur = x;
    for l in 0..config.layers {
        let p = format!("mlfe.layer{l}");
        let dbc = linear(cur, bound.get(&format!("{p}.dbc.weight")), bound.get(&format!("{p}.dbc.bias")))?;
        let delta = dbc.narrow(2, 0, d)?.softplus();
        let b_seq = dbc.narrow(2, d, s_dim)?;
        let c_seq = dbc.narrow(2, d + s_dim, s_dim)?;
        let scanned = cur.selective_scan(delta, b_seq, c_seq, bound.get(&format!("{p}.a_diag")))?;

        // gate path: widen, causal conv along time, SiLU, project back
        let up = linear(cur, bound.get(&format!("{p}.up.weight")), bound.get(&format!("{p}.up.bias")))?;
        let conv = up
            .permute(&[0, 2, 1])?
            .conv1d(
                bound.get(&format!("{p}.conv.weight")),
                Some(bound.get(&format!("{p}.conv.bias"))),
                1,
                1,
                config.conv_kernel - 1,
                0,
            )?
            .permute(&[0, 2, 1])?
            .silu();
        let gate = linear(conv, bound.get(&format!("{p}.down.weight")), bound.get(&format!("{p}.down.bias")))?;
        cur = scanned.mul(gate)?;
    }
    let x_co = cur.mean_axis(1)?;
    Ok((cur, x_co))
}
