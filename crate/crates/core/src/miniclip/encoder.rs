use super::{LayerIds, MiniClipModel, TowerIds};
use crate::error::{shape_err, Result};
use crate::numerics::{Tape, Tensor, Var};
use crate::params::{BoundParams, ParamId};

/// Indices of the `n_p` rows with the largest mean squared activation,
/// returned in their original order. Ties go to the lower index.
pub fn top_tokens(tokens: &Tensor, n_p: usize) -> Result<Vec<usize>> {
    let (n, _) = tokens.dims2();
    if n_p > n {
        return shape_err("top_tokens", format!("{n_p} of {n} rows"));
    }
    let score = |r: usize| {
        let row = tokens.row(r);
        row.iter().map(|x| x * x).sum::<f64>() / row.len() as f64
    };
    let scores: Vec<f64> = (0..n).map(score).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    let mut picked = order[..n_p].to_vec();
    picked.sort_unstable();
    Ok(picked)
}

/// Replaces the prompt rows of every sequence block with the token fusion
/// output `softmax(Z̃ᵥ·Zₚᵀ/√D)·Z̃ᵥ`, where `Z̃ᵥ` are the sequence's top
/// content tokens and `Zₚ` its current prompt rows.
///
/// `blocks` holds `(start, n_content)` per sequence; each block is laid out
/// as `n_content` content rows followed by `n_p` prompt rows.
pub fn fuse_prompt_tokens(
    tape: &mut Tape,
    z: Var,
    blocks: &[(usize, usize)],
    n_p: usize,
) -> Result<Var> {
    if n_p == 0 {
        return Ok(z);
    }
    let (total, dim) = tape.value(z).dims2();
    let mut sel_v = Vec::with_capacity(blocks.len() * n_p);
    let mut sel_p = Vec::with_capacity(blocks.len() * n_p);
    for &(start, n_content) in blocks {
        if start + n_content + n_p > total {
            return shape_err(
                "fuse_prompt_tokens",
                format!("block at {start} overruns {total} rows"),
            );
        }
        let content = Tensor::matrix(
            n_content,
            dim,
            tape.value(z).data()[start * dim..(start + n_content) * dim].to_vec(),
        )?;
        sel_v.extend(top_tokens(&content, n_p)?.into_iter().map(|i| start + i));
        sel_p.extend((0..n_p).map(|j| start + n_content + j));
    }
    let zv = tape.select_rows(z, sel_v)?;
    let zp = tape.select_rows(z, sel_p)?;
    let fused = tape.block_attention(
        zv,
        zp,
        zv,
        vec![n_p; blocks.len()],
        1.0 / (dim as f64).sqrt(),
    )?;
    let both = tape.concat(&[z, fused])?;
    let mut idx = Vec::with_capacity(total);
    for (b, &(start, n_content)) in blocks.iter().enumerate() {
        idx.extend(start..start + n_content);
        idx.extend((0..n_p).map(|j| total + b * n_p + j));
    }
    tape.select_rows(both, idx)
}

fn affine_norm(
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    g: ParamId,
    b: ParamId,
) -> Result<Var> {
    let h = tape.layer_norm(x)?;
    let h = tape.mul_row(h, bound.var(g))?;
    tape.add_row(h, bound.var(b))
}

fn block(
    tape: &mut Tape,
    bound: &BoundParams,
    ids: &LayerIds,
    z: Var,
    lens: &[usize],
    dim: usize,
) -> Result<Var> {
    let h = affine_norm(tape, bound, z, ids.ln1_g, ids.ln1_b)?;
    let q = tape.matmul(h, bound.var(ids.wq))?;
    let k = tape.matmul(h, bound.var(ids.wk))?;
    let v = tape.matmul(h, bound.var(ids.wv))?;
    let a = tape.block_attention(q, k, v, lens.to_vec(), 1.0 / (dim as f64).sqrt())?;
    let a = tape.matmul(a, bound.var(ids.wo))?;
    let z = tape.add(z, a)?;
    let h = affine_norm(tape, bound, z, ids.ln2_g, ids.ln2_b)?;
    let h = tape.matmul(h, bound.var(ids.w1))?;
    let h = tape.add_row(h, bound.var(ids.b1))?;
    let h = tape.gelu(h)?;
    let h = tape.matmul(h, bound.var(ids.w2))?;
    let h = tape.add_row(h, bound.var(ids.b2))?;
    tape.add(z, h)
}

/// Runs the transformer stack. With prompts, their rows are refreshed by
/// token fusion after every layer except the last.
fn run_layers(
    model: &MiniClipModel,
    tape: &mut Tape,
    bound: &BoundParams,
    tower: &TowerIds,
    mut z: Var,
    blocks: &[(usize, usize)],
    n_p: usize,
) -> Result<Var> {
    let lens: Vec<usize> = blocks.iter().map(|&(_, n)| n + n_p).collect();
    let dim = model.config.hidden_dim;
    let n_layers = tower.layers.len();
    for (l, ids) in tower.layers.iter().enumerate() {
        z = block(tape, bound, ids, z, &lens, dim)?;
        if n_p > 0 && l + 1 < n_layers {
            z = fuse_prompt_tokens(tape, z, blocks, n_p)?;
        }
    }
    Ok(z)
}

fn head(tape: &mut Tape, bound: &BoundParams, tower: &TowerIds, pooled: Var) -> Result<Var> {
    let h = affine_norm(tape, bound, pooled, tower.ln_g, tower.ln_b)?;
    let h = tape.matmul(h, bound.var(tower.proj))?;
    tape.row_normalize(h)
}

fn prompt_rows(model: &MiniClipModel, tape: &Tape, prompts: Option<Var>) -> Result<usize> {
    match prompts {
        None => Ok(0),
        Some(p) => {
            let (n, d) = tape.value(p).dims2();
            if d != model.config.hidden_dim {
                return shape_err(
                    "prompts",
                    format!("width {d}, expected {}", model.config.hidden_dim),
                );
            }
            Ok(n)
        }
    }
}

/// Interleaves per-sequence content rows of `content` with a shared copy of
/// the prompt rows.
fn append_prompts(
    tape: &mut Tape,
    content: Var,
    prompts: Var,
    lens: &[usize],
    n_p: usize,
) -> Result<(Var, Vec<(usize, usize)>)> {
    let total: usize = lens.iter().sum();
    let both = tape.concat(&[content, prompts])?;
    let mut idx = Vec::with_capacity(total + lens.len() * n_p);
    let mut blocks = Vec::with_capacity(lens.len());
    let mut src = 0;
    for &n in lens {
        blocks.push((idx.len(), n));
        idx.extend(src..src + n);
        idx.extend(total..total + n_p);
        src += n;
    }
    Ok((tape.select_rows(both, idx)?, blocks))
}

pub(super) fn image_tower(
    model: &MiniClipModel,
    tape: &mut Tape,
    bound: &BoundParams,
    x: Var,
    batch: usize,
    prompts: Option<Var>,
) -> Result<Var> {
    let ids = model.ids();
    let n_e = model.config.image_tokens;
    let n_p = prompt_rows(model, tape, prompts)?;
    let e = tape.matmul(x, bound.var(ids.patch_w))?;
    let e = tape.add_row(e, bound.var(ids.patch_b))?;
    let pos = tape.select_rows(
        bound.var(ids.visual.pos),
        (0..batch).flat_map(|_| 0..n_e).collect(),
    )?;
    let e = tape.add(e, pos)?;
    let lens = vec![n_e; batch];
    let (z0, blocks) = match prompts {
        Some(p) if n_p > 0 => append_prompts(tape, e, p, &lens, n_p)?,
        _ => (e, (0..batch).map(|b| (b * n_e, n_e)).collect()),
    };
    let z = run_layers(model, tape, bound, &ids.visual, z0, &blocks, n_p)?;
    let pooled = tape.segment_mean(z, vec![n_e + n_p; batch])?;
    head(tape, bound, &ids.visual, pooled)
}

pub(super) fn text_tower(
    model: &MiniClipModel,
    tape: &mut Tape,
    bound: &BoundParams,
    sequences: &[Vec<usize>],
    prompts: Option<Var>,
) -> Result<Var> {
    let ids = model.ids();
    let n_p = prompt_rows(model, tape, prompts)?;
    let tokens: Vec<usize> = sequences.iter().flatten().copied().collect();
    let positions: Vec<usize> = sequences.iter().flat_map(|s| 0..s.len()).collect();
    let e = tape.select_rows(bound.var(ids.token_embedding), tokens)?;
    let pos = tape.select_rows(bound.var(ids.text.pos), positions)?;
    let e = tape.add(e, pos)?;
    let lens: Vec<usize> = sequences.iter().map(Vec::len).collect();
    let (z0, blocks) = match prompts {
        Some(p) if n_p > 0 => append_prompts(tape, e, p, &lens, n_p)?,
        _ => {
            let mut start = 0;
            let blocks = lens
                .iter()
                .map(|&n| {
                    start += n;
                    (start - n, n)
                })
                .collect();
            (e, blocks)
        }
    };
    let z = run_layers(model, tape, bound, &ids.text, z0, &blocks, n_p)?;
    let last: Vec<usize> = blocks.iter().map(|&(s, n)| s + n - 1).collect();
    let pooled = tape.select_rows(z, last)?;
    head(tape, bound, &ids.text, pooled)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn top_tokens_keeps_original_order() {
        let t = Tensor::from_rows(&[
            vec![1.0, 0.0],
            vec![3.0, 0.0],
            vec![0.0, 0.0],
            vec![2.0, 2.0],
        ])
        .unwrap();
        assert_eq!(top_tokens(&t, 2).unwrap(), vec![1, 3]);
        assert_eq!(top_tokens(&t, 0).unwrap(), Vec::<usize>::new());
        assert!(top_tokens(&t, 5).is_err());
    }

    #[test]
    fn top_tokens_ties_prefer_lower_index() {
        let t = Tensor::from_rows(&[vec![1.0], vec![-1.0], vec![1.0]]).unwrap();
        assert_eq!(top_tokens(&t, 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn fusion_matches_dense_formula() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let (n_c, n_p, d) = (5, 2, 3);
        let z = Tensor::from_fn(n_c + n_p, d, |_, _| rng.random_range(-1.0..1.0));
        let mut tape = Tape::new();
        let zv = tape.constant(z.clone());
        let out = fuse_prompt_tokens(&mut tape, zv, &[(0, n_c)], n_p).unwrap();
        let out = tape.value(out).clone();
        let content =
            Tensor::from_rows(&(0..n_c).map(|r| z.row(r).to_vec()).collect::<Vec<_>>()).unwrap();
        let sel = top_tokens(&content, n_p).unwrap();
        for i in 0..n_p {
            let scores: Vec<f64> = (0..n_p)
                .map(|j| {
                    (0..d)
                        .map(|c| z.get(sel[i], c) * z.get(n_c + j, c))
                        .sum::<f64>()
                        / (d as f64).sqrt()
                })
                .collect();
            let w = crate::numerics::softmax(&scores);
            for c in 0..d {
                let expect: f64 = (0..n_p).map(|j| w[j] * z.get(sel[j], c)).sum();
                assert!((out.get(n_c + i, c) - expect).abs() < 1e-12);
            }
        }
        for r in 0..n_c {
            assert_eq!(out.row(r), z.row(r));
        }
    }
}
