//! Forward passes and hand-written backpropagation.
//!
//! Batch items are processed independently (in parallel); per-item results
//! are reduced in item order so every output is bit-reproducible.

use rayon::prelude::*;

use super::layers::*;
use super::EmbeddingBatch;
use super::{ConvSlot, ImageBatch, Layout, ModelError, ModelParams, PredictionMap, Result};
use crate::imagery::MaskBatch;
use crate::losses::{focal_terms, ntxent_loss};
use crate::real::Real;

pub use crate::losses::PROB_EPS;

struct LevelTrace<T> {
    input: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    size: usize,
}

struct EncoderTrace<T> {
    levels: Vec<LevelTrace<T>>,
    bottleneck: LevelTrace<T>,
}

struct DecoderTrace<T> {
    level: usize,
    /// Upsampled input of the up-convolution.
    upsampled: Vec<T>,
    up: Vec<T>,
    cat: Vec<T>,
    a: Vec<T>,
    b: Vec<T>,
    size: usize,
}

fn conv_relu<T: Real>(p: &[T], slot: &ConvSlot, x: &[T], size: usize) -> Vec<T> {
    let mut out = conv3x3_forward(
        x,
        slot.cin,
        size,
        size,
        &p[slot.w..slot.w + slot.cout * slot.cin * 9],
        &p[slot.b..slot.b + slot.cout],
        slot.cout,
    );
    relu_inplace(&mut out);
    out
}

/// Backward through `relu(conv(x))`: `g` is the gradient w.r.t. the relu
/// output `out` and is consumed. Returns the gradient w.r.t. `x` when asked.
#[allow(clippy::too_many_arguments)]
fn conv_relu_backward<T: Real>(
    p: &[T],
    grad: &mut [T],
    slot: &ConvSlot,
    x: &[T],
    out: &[T],
    mut g: Vec<T>,
    size: usize,
    want_input: bool,
) -> Option<Vec<T>> {
    relu_backward(out, &mut g);
    let wlen = slot.cout * slot.cin * 9;
    let mut gx = want_input.then(|| vec![T::zero(); slot.cin * size * size]);
    let (gw_part, gb_part) = split_two(grad, slot.w, wlen, slot.b, slot.cout);
    conv3x3_backward(
        x,
        slot.cin,
        size,
        size,
        &p[slot.w..slot.w + wlen],
        slot.cout,
        &g,
        gw_part,
        gb_part,
        gx.as_deref_mut(),
    );
    gx
}

/// Two disjoint mutable windows of one buffer.
fn split_two<T>(
    buf: &mut [T],
    a: usize,
    alen: usize,
    b: usize,
    blen: usize,
) -> (&mut [T], &mut [T]) {
    if a < b {
        let (lo, hi) = buf.split_at_mut(b);
        (&mut lo[a..a + alen], &mut hi[..blen])
    } else {
        let (lo, hi) = buf.split_at_mut(a);
        (&mut hi[..alen], &mut lo[b..b + blen])
    }
}

fn encode<T: Real>(params: &ModelParams<T>, x: &[T]) -> EncoderTrace<T> {
    let p = params.values();
    let layout = params.layout();
    let mut input = x.to_vec();
    let mut size = params.arch().tile;
    let mut levels = Vec::with_capacity(layout.enc.len());
    for [c1, c2] in &layout.enc {
        let a = conv_relu(p, c1, &input, size);
        let b = conv_relu(p, c2, &a, size);
        let pooled = avgpool2(&b, c2.cout, size, size);
        levels.push(LevelTrace { input, a, b, size });
        input = pooled;
        size /= 2;
    }
    let [c1, c2] = &layout.bottleneck;
    let a = conv_relu(p, c1, &input, size);
    let b = conv_relu(p, c2, &a, size);
    EncoderTrace {
        levels,
        bottleneck: LevelTrace { input, a, b, size },
    }
}

fn decode<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderTrace<T>,
) -> (Vec<DecoderTrace<T>>, Vec<T>) {
    let p = params.values();
    let layout = params.layout();
    let mut traces: Vec<DecoderTrace<T>> = Vec::with_capacity(layout.dec.len());
    for level in (0..layout.dec.len()).rev() {
        let slots = &layout.dec[level];
        let (x, size_in) = match traces.last() {
            Some(t) => (&t.b, t.size),
            None => (&enc.bottleneck.b, enc.bottleneck.size),
        };
        let size = size_in * 2;
        let upsampled = upsample2(x, slots.up.cin, size_in, size_in);
        let up = conv_relu(p, &slots.up, &upsampled, size);
        let skip = &enc.levels[level].b;
        let mut cat = Vec::with_capacity(skip.len() + up.len());
        cat.extend_from_slice(skip);
        cat.extend_from_slice(&up);
        let a = conv_relu(p, &slots.conv1, &cat, size);
        let b = conv_relu(p, &slots.conv2, &a, size);
        traces.push(DecoderTrace {
            level,
            upsampled,
            up,
            cat,
            a,
            b,
            size,
        });
    }
    let top = traces.last().expect("depth >= 1");
    let head = &layout.head;
    let hw = top.size * top.size;
    let logits = conv1x1_forward(
        &top.b,
        head.cin,
        hw,
        &p[head.w..head.w + head.cin],
        p[head.b],
    );
    (traces, logits)
}

/// Backward through the encoder. `g_bottleneck` is the gradient w.r.t. the
/// bottleneck output; `skips[l]` (if any) the gradient w.r.t. level `l`'s
/// skip output.
fn encode_backward<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderTrace<T>,
    g_bottleneck: Vec<T>,
    mut skips: Vec<Option<Vec<T>>>,
    grad: &mut [T],
) {
    let p = params.values();
    let layout = params.layout();
    let bt = &enc.bottleneck;
    let [b1, b2] = &layout.bottleneck;
    let g_a = conv_relu_backward(p, grad, b2, &bt.a, &bt.b, g_bottleneck, bt.size, true).unwrap();
    let mut g = conv_relu_backward(p, grad, b1, &bt.input, &bt.a, g_a, bt.size, true).unwrap();
    for level in (0..layout.enc.len()).rev() {
        let t = &enc.levels[level];
        let [c1, c2] = &layout.enc[level];
        let mut g_b = avgpool2_backward(&g, c2.cout, t.size, t.size);
        if let Some(Some(skip)) = skips.get_mut(level).map(Option::take) {
            for (d, s) in g_b.iter_mut().zip(skip) {
                *d += s;
            }
        }
        let g_a = conv_relu_backward(p, grad, c2, &t.a, &t.b, g_b, t.size, true).unwrap();
        match conv_relu_backward(p, grad, c1, &t.input, &t.a, g_a, t.size, level > 0) {
            Some(gx) => g = gx,
            None => break,
        }
    }
}

/// Backward from per-pixel logit gradients to every parameter.
fn segment_backward<T: Real>(
    params: &ModelParams<T>,
    enc: &EncoderTrace<T>,
    dec: &[DecoderTrace<T>],
    dlogits: &[T],
    grad: &mut [T],
) {
    let p = params.values();
    let layout: &Layout = params.layout();
    let head = &layout.head;
    let top = dec.last().expect("depth >= 1");
    let hw = top.size * top.size;
    let mut g = vec![T::zero(); head.cin * hw];
    {
        let (gw, gb) = split_two(grad, head.w, head.cin, head.b, 1);
        conv1x1_backward(
            &top.b,
            head.cin,
            hw,
            &p[head.w..head.w + head.cin],
            dlogits,
            gw,
            &mut gb[0],
            &mut g,
        );
    }
    let mut skips: Vec<Option<Vec<T>>> = (0..layout.enc.len()).map(|_| None).collect();
    for t in dec.iter().rev() {
        let slots = &layout.dec[t.level];
        let c = slots.conv2.cout;
        let g_a = conv_relu_backward(p, grad, &slots.conv2, &t.a, &t.b, g, t.size, true).unwrap();
        let mut g_cat =
            conv_relu_backward(p, grad, &slots.conv1, &t.cat, &t.a, g_a, t.size, true).unwrap();
        let g_up = g_cat.split_off(c * t.size * t.size);
        skips[t.level] = Some(g_cat);
        let g_upsampled =
            conv_relu_backward(p, grad, &slots.up, &t.upsampled, &t.up, g_up, t.size, true)
                .unwrap();
        g = upsample2_backward(&g_upsampled, slots.up.cin, t.size / 2, t.size / 2);
    }
    encode_backward(params, enc, g, skips, grad);
}

fn check_batch<T: Real>(params: &ModelParams<T>, batch: &ImageBatch<T>) -> Result<()> {
    let arch = params.arch();
    if batch.channels != arch.in_channels || batch.size != arch.tile {
        return Err(ModelError::DimensionMismatch(format!(
            "batch is {}x{}x{}, model expects {}x{}x{}",
            batch.channels, batch.size, batch.size, arch.in_channels, arch.tile, arch.tile
        )));
    }
    if batch.batch == 0 || batch.data.len() != batch.batch * batch.item_len() {
        return Err(ModelError::DimensionMismatch(format!(
            "batch of {} items has {} values",
            batch.batch,
            batch.data.len()
        )));
    }
    Ok(())
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn clamp_prob<T: Real>(s: T) -> T {
    let eps = T::of(PROB_EPS);
    s.max(eps).min(T::one() - eps)
}

/// Raw per-pixel logits, item-major.
pub fn forward_logits<T: Real>(params: &ModelParams<T>, batch: &ImageBatch<T>) -> Result<Vec<T>> {
    check_batch(params, batch)?;
    let per_item: Vec<Vec<T>> = (0..batch.batch)
        .into_par_iter()
        .map(|i| {
            let enc = encode(params, batch.item(i));
            decode(params, &enc).1
        })
        .collect();
    Ok(per_item.concat())
}

/// Per-pixel panel probabilities, clamped into `[PROB_EPS, 1 - PROB_EPS]`.
pub fn forward_segment<T: Real>(
    params: &ModelParams<T>,
    batch: &ImageBatch<T>,
) -> Result<PredictionMap<T>> {
    let logits = forward_logits(params, batch)?;
    Ok(PredictionMap {
        batch: batch.batch,
        height: batch.size,
        width: batch.size,
        probs: logits.into_iter().map(|l| clamp_prob(sigmoid(l))).collect(),
    })
}

struct EmbedTrace<T> {
    enc: EncoderTrace<T>,
    pooled: Vec<T>,
    hidden: Vec<T>,
    raw: Vec<T>,
    z: Vec<T>,
}

fn embed_item<T: Real>(params: &ModelParams<T>, x: &[T]) -> EmbedTrace<T> {
    let p = params.values();
    let layout = params.layout();
    let enc = encode(params, x);
    let bt = &enc.bottleneck;
    let hw = bt.size * bt.size;
    let inv = T::one() / T::of(hw as f64);
    let pooled: Vec<T> =
        bt.b.chunks(hw)
            .map(|ch| ch.iter().copied().sum::<T>() * inv)
            .collect();
    let (f1, f2) = (&layout.fc1, &layout.fc2);
    let mut hidden = linear_forward(
        &pooled,
        &p[f1.w..f1.w + f1.fin * f1.fout],
        &p[f1.b..f1.b + f1.fout],
        f1.fin,
        f1.fout,
    );
    relu_inplace(&mut hidden);
    let raw = linear_forward(
        &hidden,
        &p[f2.w..f2.w + f2.fin * f2.fout],
        &p[f2.b..f2.b + f2.fout],
        f2.fin,
        f2.fout,
    );
    let r = raw
        .iter()
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt()
        .max(T::of(1e-12));
    let z = raw.iter().map(|&v| v / r).collect();
    EmbedTrace {
        enc,
        pooled,
        hidden,
        raw,
        z,
    }
}

fn embed_backward<T: Real>(params: &ModelParams<T>, t: &EmbedTrace<T>, dz: &[T], grad: &mut [T]) {
    let p = params.values();
    let layout = params.layout();
    let r = t
        .raw
        .iter()
        .map(|&v| v * v)
        .sum::<T>()
        .sqrt()
        .max(T::of(1e-12));
    let zdz = t.z.iter().zip(dz).map(|(&a, &b)| a * b).sum::<T>();
    let draw: Vec<T> =
        t.z.iter()
            .zip(dz)
            .map(|(&z, &g)| (g - z * zdz) / r)
            .collect();
    let (f1, f2) = (layout.fc1, layout.fc2);
    let mut dhidden = {
        let (gw, gb) = split_two(grad, f2.w, f2.fin * f2.fout, f2.b, f2.fout);
        linear_backward(
            &t.hidden,
            &p[f2.w..f2.w + f2.fin * f2.fout],
            f2.fin,
            f2.fout,
            &draw,
            gw,
            gb,
        )
    };
    relu_backward(&t.hidden, &mut dhidden);
    let dpooled = {
        let (gw, gb) = split_two(grad, f1.w, f1.fin * f1.fout, f1.b, f1.fout);
        linear_backward(
            &t.pooled,
            &p[f1.w..f1.w + f1.fin * f1.fout],
            f1.fin,
            f1.fout,
            &dhidden,
            gw,
            gb,
        )
    };
    let bt = &t.enc.bottleneck;
    let hw = bt.size * bt.size;
    let inv = T::one() / T::of(hw as f64);
    let g_bottleneck: Vec<T> = dpooled
        .iter()
        .flat_map(|&g| std::iter::repeat_n(g * inv, hw))
        .collect();
    encode_backward(params, &t.enc, g_bottleneck, Vec::new(), grad);
}

/// Which output a rectifier pattern is taken for.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    /// Encoder and decoder units feeding the segmentation logits.
    Segment,
    /// Encoder and projection-head units feeding the embedding.
    Embed,
}

/// Activity (`true` where the input is positive) of every rectifier on the
/// path to `branch`, item by item. Finite differences only estimate a
/// derivative where this pattern is constant.
pub fn rectifier_pattern<T: Real>(
    params: &ModelParams<T>,
    batch: &ImageBatch<T>,
    branch: Branch,
) -> Result<Vec<bool>> {
    check_batch(params, batch)?;
    let mut out = Vec::new();
    for i in 0..batch.batch {
        let t = embed_item(params, batch.item(i));
        for l in t
            .enc
            .levels
            .iter()
            .chain(std::iter::once(&t.enc.bottleneck))
        {
            out.extend(l.a.iter().chain(&l.b).map(|&v| v > T::zero()));
        }
        match branch {
            Branch::Segment => {
                for d in &decode(params, &t.enc).0 {
                    out.extend(d.up.iter().chain(&d.a).chain(&d.b).map(|&v| v > T::zero()));
                }
            }
            Branch::Embed => out.extend(t.hidden.iter().map(|&v| v > T::zero())),
        }
    }
    Ok(out)
}

/// L2-normalized projections of every input row, in input order.
pub fn forward_embed<T: Real>(
    params: &ModelParams<T>,
    batch: &ImageBatch<T>,
) -> Result<EmbeddingBatch<T>> {
    check_batch(params, batch)?;
    let rows: Vec<Vec<T>> = (0..batch.batch)
        .into_par_iter()
        .map(|i| embed_item(params, batch.item(i)).z)
        .collect();
    Ok(EmbeddingBatch::new(
        batch.batch,
        params.arch().embed_dim,
        rows.concat(),
    ))
}

fn sum_in_order<T: Real>(len: usize, parts: Vec<Vec<T>>) -> Vec<T> {
    let mut total = vec![T::zero(); len];
    for part in parts {
        for (t, v) in total.iter_mut().zip(part) {
            *t += v;
        }
    }
    total
}

/// Focal loss of `forward_segment` (mean over every pixel of the batch) and
/// its gradient with respect to every parameter.
pub fn segment_loss_grad<T: Real>(
    params: &ModelParams<T>,
    batch: &ImageBatch<T>,
    targets: &MaskBatch,
    alpha: f64,
    gamma: f64,
) -> Result<(T, Vec<T>)> {
    check_batch(params, batch)?;
    if (targets.batch, targets.height, targets.width) != (batch.batch, batch.size, batch.size) {
        return Err(ModelError::DimensionMismatch(format!(
            "targets {}x{}x{} vs batch {}x{}x{}",
            targets.batch, targets.height, targets.width, batch.batch, batch.size, batch.size
        )));
    }
    let hw = batch.size * batch.size;
    let norm = (batch.batch * hw) as f64;
    let parts: Vec<Result<(f64, Vec<T>)>> = (0..batch.batch)
        .into_par_iter()
        .map(|i| {
            let enc = encode(params, batch.item(i));
            let (dec, logits) = decode(params, &enc);
            let sig: Vec<T> = logits.iter().map(|&l| sigmoid(l)).collect();
            let probs: Vec<T> = sig.iter().map(|&s| clamp_prob(s)).collect();
            let (loss, dprob) = focal_terms(&probs, targets.item(i), alpha, gamma, norm)?;
            let eps = T::of(PROB_EPS);
            let dlogits: Vec<T> = sig
                .iter()
                .zip(&dprob)
                .map(|(&s, &g)| {
                    if s < eps || s > T::one() - eps {
                        T::zero()
                    } else {
                        g * s * (T::one() - s)
                    }
                })
                .collect();
            let mut grad = vec![T::zero(); params.len()];
            segment_backward(params, &enc, &dec, &dlogits, &mut grad);
            Ok((loss, grad))
        })
        .collect();
    let mut loss = 0.0;
    let mut grads = Vec::with_capacity(parts.len());
    for part in parts {
        let (l, g) = part?;
        loss += l;
        grads.push(g);
    }
    Ok((T::of(loss), sum_in_order(params.len(), grads)))
}

/// NT-Xent loss of `forward_embed` and its gradient with respect to every
/// parameter. Rows `2k`, `2k + 1` of `batch` must be the views of item `k`.
pub fn embed_loss_grad<T: Real>(
    params: &ModelParams<T>,
    batch: &ImageBatch<T>,
    tau: f64,
) -> Result<(T, Vec<T>)> {
    check_batch(params, batch)?;
    let traces: Vec<EmbedTrace<T>> = (0..batch.batch)
        .into_par_iter()
        .map(|i| embed_item(params, batch.item(i)))
        .collect();
    let dim = params.arch().embed_dim;
    let z: Vec<T> = traces.iter().flat_map(|t| t.z.iter().copied()).collect();
    let (loss, dz) = ntxent_loss(&EmbeddingBatch::new(batch.batch, dim, z), tau)?;
    let grads: Vec<Vec<T>> = traces
        .par_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut grad = vec![T::zero(); params.len()];
            embed_backward(params, t, dz.row(i), &mut grad);
            grad
        })
        .collect();
    Ok((loss, sum_in_order(params.len(), grads)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_params, ArchConfig};
    use crate::rng::SplitMix64;

    fn batch<T: Real>(n: usize, size: usize, seed: u64) -> ImageBatch<T> {
        let mut rng = SplitMix64::new(seed);
        ImageBatch {
            batch: n,
            channels: 3,
            size,
            data: (0..n * 3 * size * size)
                .map(|_| T::of(rng.next_f64()))
                .collect(),
        }
    }

    fn small_arch() -> ArchConfig {
        ArchConfig {
            base_width: 4,
            depth: 2,
            embed_dim: 8,
            tile: 16,
            ..Default::default()
        }
    }

    #[test]
    fn segment_shape_and_range() {
        let p = init_params::<f32>(&small_arch(), 1).unwrap();
        let out = forward_segment(&p, &batch(3, 16, 2)).unwrap();
        assert_eq!((out.batch, out.height, out.width), (3, 16, 16));
        assert!(out.probs.iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn zero_head_gives_one_half() {
        let mut p = init_params::<f32>(&small_arch(), 1).unwrap();
        p.tensor_mut("head.weight").unwrap().fill(0.0);
        p.tensor_mut("head.bias").unwrap().fill(0.0);
        let out = forward_segment(&p, &batch(2, 16, 3)).unwrap();
        assert!(out.probs.iter().all(|&v| v == 0.5));
    }

    #[test]
    fn batch_order_is_respected() {
        let p = init_params::<f32>(&small_arch(), 4).unwrap();
        let b = batch::<f32>(3, 16, 5);
        let n = b.item_len();
        let mut swapped = b.clone();
        swapped.data[..n].copy_from_slice(b.item(2));
        swapped.data[2 * n..].copy_from_slice(b.item(0));
        let a = forward_segment(&p, &b).unwrap();
        let s = forward_segment(&p, &swapped).unwrap();
        assert_eq!(a.item(0), s.item(2));
        assert_eq!(a.item(1), s.item(1));
        assert_eq!(a.item(2), s.item(0));
    }

    #[test]
    fn wrong_tile_size_is_rejected() {
        let p = init_params::<f32>(&small_arch(), 1).unwrap();
        assert!(matches!(
            forward_segment(&p, &batch(1, 8, 1)),
            Err(ModelError::DimensionMismatch(_))
        ));
    }

    #[test]
    fn embeddings_are_unit_rows() {
        let p = init_params::<f64>(&small_arch(), 6).unwrap();
        let e = forward_embed(&p, &batch(4, 16, 7)).unwrap();
        for i in 0..4 {
            let n: f64 = e.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn duplicate_inputs_embed_identically() {
        let p = init_params::<f32>(&small_arch(), 8).unwrap();
        let mut b = batch::<f32>(2, 16, 9);
        let n = b.item_len();
        let first = b.item(0).to_vec();
        b.data[n..].copy_from_slice(&first);
        let e = forward_embed(&p, &b).unwrap();
        assert_eq!(e.row(0), e.row(1));
    }

    #[test]
    fn positive_scaling_of_final_projection_is_invisible() {
        let p = init_params::<f64>(&small_arch(), 10).unwrap();
        let mut scaled = p.clone();
        scaled
            .tensor_mut("proj.fc2.weight")
            .unwrap()
            .iter_mut()
            .for_each(|v| *v *= 3.5);
        scaled
            .tensor_mut("proj.fc2.bias")
            .unwrap()
            .iter_mut()
            .for_each(|v| *v *= 3.5);
        let b = batch(4, 16, 11);
        let e1 = forward_embed(&p, &b).unwrap();
        let e2 = forward_embed(&scaled, &b).unwrap();
        for (a, b) in e1.data.iter().zip(&e2.data) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn loss_grads_are_deterministic() {
        let p = init_params::<f32>(&small_arch(), 12).unwrap();
        let b = batch::<f32>(4, 16, 13);
        let t = MaskBatch::new(
            4,
            16,
            16,
            (0..4 * 256).map(|i| (i % 3 == 0) as u8).collect(),
        )
        .unwrap();
        let a = segment_loss_grad(&p, &b, &t, 0.4, 2.0).unwrap();
        let c = segment_loss_grad(&p, &b, &t, 0.4, 2.0).unwrap();
        assert_eq!(a.0.to_bits(), c.0.to_bits());
        assert_eq!(a.1, c.1);
        let e1 = embed_loss_grad(&p, &b, 0.5).unwrap();
        let e2 = embed_loss_grad(&p, &b, 0.5).unwrap();
        assert_eq!(e1.1, e2.1);
    }
}
