use super::{AttentionRecord, BoundParams, ModelConfig, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor, Var};

fn linear<'t>(tape: &mut Tape<'t>, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
    let y = tape.matmul(x, w)?;
    match bias {
        Some(b) => tape.add_row(y, b),
        None => Ok(y),
    }
}

fn norm<'t>(tape: &mut Tape<'t>, p: &BoundParams, prefix: &str, x: Var, eps: f64) -> Result<Var> {
    let g = p.get(&format!("{prefix}.gamma"))?;
    let b = p.get(&format!("{prefix}.beta"))?;
    tape.layer_norm(x, g, b, eps)
}

/// Scaled dot-product attention over `heads` column groups, per batch item.
///
/// `q` is `[B*R x width]`, `k`/`v` are `[B*C x width]`; `mask`, if given, is
/// `[B*R x C]`. Returns the concatenated head outputs and each head's weights.
fn multi_head<'t>(
    tape: &mut Tape<'t>,
    q: Var,
    k: Var,
    v: Var,
    heads: usize,
    batch: usize,
    mask: Option<&[bool]>,
) -> Result<(Var, Vec<Var>)> {
    let width = tape.value(q).cols();
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut weights = Vec::with_capacity(heads);
    for h in 0..heads {
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (
                tape.slice_cols(q, h * dh, dh)?,
                tape.slice_cols(k, h * dh, dh)?,
                tape.slice_cols(v, h * dh, dh)?,
            )
        };
        let scores = tape.batched_matmul(qh, kh, batch, true)?;
        let scores = tape.scale(scores, scale)?;
        let attn = tape.softmax_masked(scores, mask)?;
        outs.push(tape.batched_matmul(attn, vh, batch, false)?);
        weights.push(attn);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, weights))
}

/// Batched cross-attention: latents `[B*N x latent_dim]` query inputs
/// `[B*M x D]`. `input_mask` has one flag per input row.
pub(crate) fn cross_block<'t>(
    tape: &mut Tape<'t>,
    p: &BoundParams,
    block: usize,
    latent: Var,
    inputs: Var,
    input_mask: &[bool],
    batch: usize,
    config: &ModelConfig,
) -> Result<(Var, Vec<Var>)> {
    let pre = format!("blocks.{block}.cross");
    let eps = config.layer_norm_eps;
    let n = config.num_latents;
    let m = input_mask.len() / batch;
    for (b, row) in input_mask.chunks(m).enumerate() {
        if !row.iter().any(|&x| x) {
            return Err(Error::Data(format!("batch item {b} has no unmasked input")));
        }
    }
    let mut mask = Vec::with_capacity(batch * n * m);
    for row in input_mask.chunks(m) {
        for _ in 0..n {
            mask.extend_from_slice(row);
        }
    }

    let lq = norm(tape, p, &format!("{pre}.norm_latent"), latent, eps)?;
    let kv = norm(tape, p, &format!("{pre}.norm_input"), inputs, eps)?;
    let q = linear(tape, lq, p.get(&format!("{pre}.q"))?, None)?;
    let k = linear(tape, kv, p.get(&format!("{pre}.k"))?, None)?;
    let v = linear(tape, kv, p.get(&format!("{pre}.v"))?, None)?;
    let (mixed, attn) = multi_head(tape, q, k, v, config.cross_heads, batch, Some(&mask))?;
    let proj = linear(
        tape,
        mixed,
        p.get(&format!("{pre}.out"))?,
        Some(p.get(&format!("{pre}.out_bias"))?),
    )?;
    Ok((tape.add(latent, proj)?, attn))
}

/// Batched latent self-attention followed by the GELU MLP, both pre-norm residual.
pub(crate) fn latent_block<'t>(
    tape: &mut Tape<'t>,
    p: &BoundParams,
    block: usize,
    latent: Var,
    batch: usize,
    config: &ModelConfig,
) -> Result<Var> {
    let eps = config.layer_norm_eps;
    let pre = format!("blocks.{block}.self_attn");
    let x = norm(tape, p, &format!("{pre}.norm"), latent, eps)?;
    let q = linear(tape, x, p.get(&format!("{pre}.q"))?, None)?;
    let k = linear(tape, x, p.get(&format!("{pre}.k"))?, None)?;
    let v = linear(tape, x, p.get(&format!("{pre}.v"))?, None)?;
    let (mixed, _) = multi_head(tape, q, k, v, config.latent_heads, batch, None)?;
    let proj = linear(
        tape,
        mixed,
        p.get(&format!("{pre}.out"))?,
        Some(p.get(&format!("{pre}.out_bias"))?),
    )?;
    let latent = tape.add(latent, proj)?;

    let pre = format!("blocks.{block}.mlp");
    let x = norm(tape, p, &format!("{pre}.norm"), latent, eps)?;
    let h = linear(
        tape,
        x,
        p.get(&format!("{pre}.fc1"))?,
        Some(p.get(&format!("{pre}.fc1_bias"))?),
    )?;
    let h = tape.gelu(h)?;
    let out = linear(
        tape,
        h,
        p.get(&format!("{pre}.fc2"))?,
        Some(p.get(&format!("{pre}.fc2_bias"))?),
    )?;
    tape.add(latent, out)
}

/// Mean of per-head attention values, `[B*N x M]`.
pub(crate) fn head_average(tape: &Tape<'_>, heads: &[Var]) -> Tensor {
    let first = tape.value(heads[0]);
    if heads.len() == 1 {
        return first.clone();
    }
    let mut acc = vec![0.0; first.len()];
    for &h in heads {
        for (a, v) in acc.iter_mut().zip(tape.value(h).data()) {
            *a += v;
        }
    }
    let n = heads.len() as f64;
    acc.iter_mut().for_each(|a| *a /= n);
    Tensor::raw(first.shape().to_vec(), acc)
}

/// One cross-attention block on a single visit's latent and input arrays.
pub fn cross_attention_block(
    latent: &Tensor,
    inputs: &Tensor,
    input_mask: &[bool],
    weights: &ModelWeights,
    block_index: usize,
    config: &ModelConfig,
) -> Result<(Tensor, AttentionRecord)> {
    if input_mask.len() != inputs.rows() {
        return Err(Error::shape("cross_attention", inputs.shape(), &[input_mask.len()]));
    }
    let mut tape = Tape::new();
    let p = weights.bind(&mut tape)?;
    let l = tape.constant_ref(latent)?;
    let x = tape.constant_ref(inputs)?;
    let (out, attn) = cross_block(&mut tape, &p, block_index, l, x, input_mask, 1, config)?;
    let record = AttentionRecord {
        block_index,
        matrix: head_average(&tape, &attn),
        column_labels: config.column_labels(),
    };
    Ok((tape.value(out).clone(), record))
}

/// One latent transformer block on a single visit's latent array.
pub fn latent_transformer_block(
    latent: &Tensor,
    weights: &ModelWeights,
    block_index: usize,
    config: &ModelConfig,
) -> Result<Tensor> {
    let mut tape = Tape::new();
    let p = weights.bind(&mut tape)?;
    let l = tape.constant_ref(latent)?;
    let out = latent_block(&mut tape, &p, block_index, l, 1, config)?;
    Ok(tape.value(out).clone())
}
