//! Multi-head softmax attention over long token sequences.
//!
//! `approximate_attention` sorts queries and keys per head by an angular
//! hash, attends exactly to the aligned key block of the sorted order and
//! its neighbours, and summarizes all remaining keys with a handful of
//! segment summaries (mean key of a run of blocks, weighted by the number of
//! keys it stands for). The value of a summary is the segment mean plus a
//! first-order correction in the query, `mean(l_j v_j) - mean(l) mean(v)`,
//! computed from the per-segment key/value outer-product sums. Memory grows
//! linearly with sequence length.

use haze_tensor::{no_grad, DType, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::config::ApproxParams;

/// Key blocks on either side of a query block that are attended exactly.
pub const REACH: usize = 1;

/// Query blocks evaluated together; bounds the transient logits.
pub const QUERY_CHUNK_BLOCKS: usize = 8;

/// Softmax attention for `q, k, v` of shape `[heads, T, d]`.
pub fn exact_attention(q: &Tensor, k: &Tensor, v: &Tensor) -> Tensor {
    let d = q.dim(2);
    q.matmul_t(k, false, true)
        .scale(1.0 / (d as f64).sqrt())
        .softmax()
        .matmul(v)
}

/// Rank of a bucket code in reflected Gray-code order, so neighbouring ranks
/// differ in a single hyperplane.
fn gray_rank(mut code: u32) -> u32 {
    let mut shift = 1;
    while shift < 32 {
        code ^= code >> shift;
        shift <<= 1;
    }
    code
}

fn hyperplanes(d: usize, bits: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..d * bits).map(|_| StandardNormal.sample(&mut rng)).collect()
}

/// Per-row sort order of `x` (`[T, d]` values) under the hash.
fn hash_order(x: &[f64], d: usize, planes: &[f64], bits: usize) -> Vec<usize> {
    let t = x.len() / d;
    let mut keys: Vec<(u32, f64, usize)> = (0..t)
        .map(|i| {
            let row = &x[i * d..(i + 1) * d];
            let mut code = 0u32;
            let mut first = 0.0;
            for b in 0..bits.max(1) {
                let p: f64 = row.iter().enumerate().map(|(j, &v)| v * planes[j * bits.max(1) + b]).sum();
                if b == 0 {
                    first = p;
                }
                if b < bits && p > 0.0 {
                    code |= 1 << b;
                }
            }
            (gray_rank(code), first, i)
        })
        .collect();
    keys.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)).then(a.2.cmp(&b.2)));
    keys.into_iter().map(|k| k.2).collect()
}

/// Block and segment geometry for a sequence of `t` tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Blocking {
    pub tokens: usize,
    pub block: usize,
    pub blocks: usize,
    /// Blocks per segment.
    pub group: usize,
    pub segments: usize,
}

impl Blocking {
    pub fn new(tokens: usize, params: &ApproxParams) -> Blocking {
        let block = params.block_size.max(1);
        let blocks = tokens.div_ceil(block);
        let group = blocks.div_ceil(params.low_rank.max(1)).max(1);
        Blocking {
            tokens,
            block,
            blocks,
            group,
            segments: blocks.div_ceil(group),
        }
    }

    pub fn padded(&self) -> usize {
        self.blocks * self.block
    }

    /// Real (non-padding) tokens in block `b`.
    fn block_count(&self, b: usize) -> usize {
        (self.tokens.saturating_sub(b * self.block)).min(self.block)
    }

    fn segment_count(&self, s: usize) -> usize {
        (s * self.group..((s + 1) * self.group).min(self.blocks))
            .map(|b| self.block_count(b))
            .sum()
    }
}

fn ln_count(c: usize) -> f64 {
    if c == 0 {
        f64::NEG_INFINITY
    } else {
        (c as f64).ln()
    }
}

/// Hash-blocked attention with segment summaries for `[heads, T, d]`
/// inputs. Sequences no longer than one block use [`exact_attention`].
pub fn approximate_attention(q: &Tensor, k: &Tensor, v: &Tensor, params: &ApproxParams) -> Tensor {
    let (h, t, d) = (q.dim(0), q.dim(1), q.dim(2));
    if t <= params.block_size {
        return exact_attention(q, k, v);
    }
    let dtype = q.dtype();
    let geo = Blocking::new(t, params);
    let (b, nb, g, ns, tp) = (geo.block, geo.blocks, geo.group, geo.segments, geo.padded());

    // Sort orders come from the values only; gradients flow through the
    // gathers below.
    let bits = params.hash_buckets.max(1).trailing_zeros() as usize;
    let planes = hyperplanes(d, bits.max(1), params.seed);
    let (qv, kv) = no_grad(|| (q.to_vec_f64(), k.to_vec_f64()));
    let mut q_idx = Vec::with_capacity(h * tp);
    let mut k_idx = Vec::with_capacity(h * tp);
    let mut out_idx = vec![0usize; h * t];
    for head in 0..h {
        let span = head * t * d..(head + 1) * t * d;
        let qo = hash_order(&qv[span.clone()], d, &planes, bits);
        let ko = hash_order(&kv[span], d, &planes, bits);
        for j in 0..tp {
            let src = if j < t { j } else { 0 };
            q_idx.push(head * t + qo[src]);
            k_idx.push(head * t + ko[src]);
        }
        for (j, &i) in qo.iter().enumerate() {
            out_idx[head * t + i] = head * tp + j;
        }
    }

    let flat = |x: &Tensor, idx: &[usize]| x.reshape(&[h * t, d]).gather(0, idx);
    let qs = flat(q, &q_idx).reshape(&[h, nb, b, d]);
    let ks = flat(k, &k_idx).reshape(&[h, nb, b, d]);
    let vs = flat(v, &k_idx).reshape(&[h, nb, b, d]);
    let scale = 1.0 / (d as f64).sqrt();

    let offsets: Vec<isize> = (-(REACH as isize)..=REACH as isize).collect();
    let nwin = offsets.len();
    let shifted = |blk: usize, o: isize| -> Option<usize> {
        let j = blk as isize + o;
        (0..nb as isize).contains(&j).then_some(j as usize)
    };
    let seg_of = |blk: usize| blk / g;
    // `[nb, ns]` indicator of the segment holding block `blk + o`.
    let near_onehot = |o: isize| -> Vec<f64> {
        (0..nb * ns)
            .map(|i| {
                let (blk, sg) = (i / ns, i % ns);
                match shifted(blk, o) {
                    Some(w) if seg_of(w) == sg => 1.0,
                    _ => 0.0,
                }
            })
            .collect()
    };
    let onehots: Vec<Vec<f64>> = offsets.iter().map(|&o| near_onehot(o)).collect();

    // Segment summaries, each excluding the blocks already attended exactly.
    let live: Vec<f64> = (0..nb * b).map(|j| if j < t { 1.0 } else { 0.0 }).collect();
    let live = Tensor::from_f64_as(live, &[1, nb, b, 1], dtype);
    let mut counts = Vec::with_capacity(nb * ns);
    for blk in 0..nb {
        for sg in 0..ns {
            let mut c = geo.segment_count(sg);
            for &o in &offsets {
                if let Some(w) = shifted(blk, o).filter(|&w| seg_of(w) == sg) {
                    c -= geo.block_count(w);
                }
            }
            counts.push(c);
        }
    }
    let inv: Vec<f64> = counts.iter().map(|&c| 1.0 / c.max(1) as f64).collect();
    let pad_segments = |x: Tensor, width: usize| {
        if ns * g > nb {
            Tensor::cat(&[x, Tensor::zeros(&[h, ns * g - nb, width], dtype)], 1)
        } else {
            x
        }
    };
    let summarize = |x: &Tensor| {
        let blocks = x.mul(&live).sum_axis(2).reshape(&[h, nb, d]);
        let segs = pad_segments(blocks.clone(), d).reshape(&[h, ns, g, d]).sum_axis(2).reshape(&[h, 1, ns, d]);
        let mut total = segs;
        for (oi, &o) in offsets.iter().enumerate() {
            let pick: Vec<usize> = (0..nb).map(|blk| shifted(blk, o).unwrap_or(blk)).collect();
            let onehot = Tensor::from_f64_as(onehots[oi].clone(), &[1, nb, ns, 1], dtype);
            let near = blocks.gather(1, &pick).reshape(&[h, nb, 1, d]);
            total = total.sub(&onehot.mul(&near));
        }
        total.mul(&Tensor::from_f64_as(inv.clone(), &[1, nb, ns, 1], dtype))
    };
    let (sk, sv) = (summarize(&ks), summarize(&vs));
    // `M_s = sum k v^T` over each segment gives `sum_j l_j v_j` for a whole
    // segment in one product with the query.
    let m_blocks = ks.mul(&live).matmul_t(&vs.mul(&live), true, false).reshape(&[h, nb, d * d]);
    let m_segs = pad_segments(m_blocks, d * d).reshape(&[h, ns, g, d * d]).sum_axis(2).reshape(&[h, ns, d, d]);

    // Query blocks are independent given the key-side tensors above, so
    // they are evaluated a chunk at a time.
    let query_blocks = |c0: usize, nc: usize| -> Tensor {
        let sub = |v: &[f64], per: usize| v[c0 * per..(c0 + nc) * per].to_vec();
        let qc = qs.narrow(1, c0, nc);

        // Exact logits against the key blocks within REACH of the query
        // block. Clamped duplicates at the ends and padded keys are masked.
        let mut win_idx = Vec::with_capacity(nc * nwin);
        let mut win_live = Vec::with_capacity(nc * nwin * b);
        for blk in c0..c0 + nc {
            for &o in &offsets {
                let src = shifted(blk, o);
                win_idx.push(src.unwrap_or(blk));
                for j in 0..b {
                    win_live.push(if src.is_some_and(|s| s * b + j < t) { 1.0 } else { 0.0 });
                }
            }
        }
        let win_mask: Vec<f64> = win_live.iter().map(|&l| if l > 0.0 { 0.0 } else { f64::NEG_INFINITY }).collect();
        let window = |x: &Tensor| x.gather(1, &win_idx).reshape(&[h * nc, nwin * b, d]);
        let (kw, vw) = (window(&ks), window(&vs));
        let win_raw = qc.reshape(&[h * nc, b, d]).matmul_t(&kw, false, true).reshape(&[h, nc, b, nwin * b]);
        let win_logits = win_raw
            .scale(scale)
            .add(&Tensor::from_f64_as(win_mask, &[1, nc, 1, nwin * b], dtype))
            .reshape(&[h * nc, b, nwin * b]);

        let (skc, svc) = (sk.narrow(1, c0, nc), sv.narrow(1, c0, nc));
        let bias: Vec<f64> = counts[c0 * ns..(c0 + nc) * ns].iter().map(|&c| ln_count(c)).collect();
        let mu = qc.matmul_t(&skc, false, true).scale(scale);
        let sum_logits = mu
            .add(&Tensor::from_f64_as(bias, &[1, nc, 1, ns], dtype))
            .reshape(&[h * nc, b, ns]);

        let probs = Tensor::cat(&[win_logits, sum_logits], 2).softmax();
        let exact_part = probs.narrow(2, 0, nwin * b).matmul(&vw).reshape(&[h, nc, b, d]);
        let p_sum = probs.narrow(2, nwin * b, ns).reshape(&[h, nc, b, ns]);
        let mean_part = p_sum.matmul(&svc);

        // First-order value correction: the window blocks are taken back out
        // of `M_s` with their exact logits.
        let w = p_sum.mul(&Tensor::from_f64_as(sub(&inv, ns), &[1, nc, 1, ns], dtype));
        let q3 = qc.reshape(&[h, nc * b, d]);
        let w3 = w.reshape(&[h, nc * b, ns]);
        let mut linear = Tensor::zeros(&[h, nc * b, d], dtype);
        for sg in 0..ns {
            let m = m_segs.narrow(1, sg, 1).reshape(&[h, d, d]);
            linear = linear.add(&q3.matmul(&m).mul(&w3.narrow(2, sg, 1)));
        }
        let mut linear = linear.scale(scale).reshape(&[h, nc, b, d]);
        let raw = win_raw.mul(&Tensor::from_f64_as(win_live, &[1, nc, 1, nwin * b], dtype));
        let vw4 = vw.reshape(&[h, nc, nwin * b, d]);
        for oi in 0..nwin {
            let onehot = Tensor::from_f64_as(sub(&onehots[oi], ns), &[1, nc, 1, ns], dtype);
            let w_o = w.mul(&onehot).sum_axis(3).reshape(&[h, nc, b, 1]);
            let contrib = raw.narrow(3, oi * b, b).matmul(&vw4.narrow(2, oi * b, b)).scale(scale);
            linear = linear.sub(&contrib.mul(&w_o));
        }
        let centred = p_sum.mul(&mu).matmul(&svc);
        exact_part.add(&mean_part).add(&linear.sub(&centred))
    };
    let chunks: Vec<Tensor> = (0..nb)
        .step_by(QUERY_CHUNK_BLOCKS)
        .map(|c0| query_blocks(c0, QUERY_CHUNK_BLOCKS.min(nb - c0)))
        .collect();
    let out = if chunks.len() == 1 {
        chunks.into_iter().next().expect("one chunk")
    } else {
        Tensor::cat(&chunks, 1)
    };
    out.reshape(&[h * tp, d]).gather(0, &out_idx).reshape(&[h, t, d])
}

/// Random `[h, t, d]` inputs drawn around `clusters` shared centres; queries
/// and keys of the same token share a centre. Used to exercise and test the
/// approximation on inputs with the clustered structure of real features.
pub fn clustered_qkv(
    heads: usize,
    tokens: usize,
    dim: usize,
    clusters: usize,
    spread: f64,
    seed: u64,
) -> (Tensor, Tensor, Tensor) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };
    let mut q = Vec::with_capacity(heads * tokens * dim);
    let mut k = Vec::with_capacity(heads * tokens * dim);
    let mut v = Vec::with_capacity(heads * tokens * dim);
    for _ in 0..heads {
        let centres: Vec<f64> = (0..clusters * dim).map(|_| normal()).collect();
        for i in 0..tokens {
            let c = &centres[(i % clusters) * dim..(i % clusters + 1) * dim];
            for &cj in c {
                q.push(cj + spread * normal());
            }
            for &cj in c {
                k.push(cj + spread * normal());
            }
            for _ in 0..dim {
                v.push(normal());
            }
        }
    }
    let shape = [heads, tokens, dim];
    (
        Tensor::from_f64_as(q, &shape, DType::F64),
        Tensor::from_f64_as(k, &shape, DType::F64),
        Tensor::from_f64_as(v, &shape, DType::F64),
    )
}

/// Attention inputs as the bottleneck sees them at initialization:
/// standard normal tokens `[tokens, width]` projected by separate
/// truncated-normal (0.02) query, key and value weights and split into
/// `heads`, giving `[heads, tokens, width / heads]` each.
pub fn projected_qkv(tokens: usize, width: usize, heads: usize, seed: u64) -> (Tensor, Tensor, Tensor) {
    let mut store = crate::params::ParamStore::new();
    let mut init = crate::params::Init::new(&mut store, seed);
    for name in ["q", "k", "v"] {
        init.trunc_normal(format!("{name}.weight"), &[width, width]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let x: Vec<f64> = (0..tokens * width).map(|_| StandardNormal.sample(&mut rng)).collect();
    let x = Tensor::from_f64_as(x, &[tokens, width], DType::F64);
    let p = store.bind(DType::F64, false);
    let split = |name: &str| {
        x.linear(p.get(&format!("{name}.weight")), None)
            .reshape(&[tokens, heads, width / heads])
            .permute(&[1, 0, 2])
    };
    (split("q"), split("k"), split("v"))
}

/// `||a - b||_F / ||b||_F`.
pub fn relative_frobenius(a: &Tensor, b: &Tensor) -> f64 {
    let (a, b) = (a.to_vec_f64(), b.to_vec_f64());
    let num: f64 = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use haze_tensor::meter;

    fn rand(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_f64((0..n).map(|_| StandardNormal.sample(&mut rng)).collect(), shape)
    }

    #[test]
    fn gray_ranks_are_a_permutation() {
        let mut r: Vec<u32> = (0..16).map(gray_rank).collect();
        r.sort();
        assert_eq!(r, (0..16).collect::<Vec<_>>());
        // Codes of adjacent ranks differ in one bit.
        let mut by_rank = [0u32; 16];
        for c in 0..16 {
            by_rank[gray_rank(c) as usize] = c;
        }
        for w in by_rank.windows(2) {
            assert_eq!((w[0] ^ w[1]).count_ones(), 1);
        }
    }

    #[test]
    fn short_sequences_fall_back_bit_exactly() {
        let p = ApproxParams::default();
        for t in [1, 17, 64] {
            let (q, k, v) = (rand(&[2, t, 8], 1), rand(&[2, t, 8], 2), rand(&[2, t, 8], 3));
            let a = approximate_attention(&q, &k, &v, &p).to_vec_f64();
            let e = exact_attention(&q, &k, &v).to_vec_f64();
            assert_eq!(a, e);
        }
    }

    #[test]
    fn equal_keys_give_the_mean_value() {
        let p = ApproxParams::default();
        let (h, t, d) = (2, 1000, 16);
        let q = rand(&[h, t, d], 4);
        let k = rand(&[h, 1, d], 5).broadcast_to(&[h, t, d]);
        let v = rand(&[h, t, d], 6);
        let vv = v.to_vec_f64();
        let mut mean = vec![0.0; h * d];
        for head in 0..h {
            for i in 0..t {
                for j in 0..d {
                    mean[head * d + j] += vv[(head * t + i) * d + j] / t as f64;
                }
            }
        }
        for out in [approximate_attention(&q, &k, &v, &p), exact_attention(&q, &k, &v)] {
            let o = out.to_vec_f64();
            for head in 0..h {
                for i in 0..t {
                    for j in 0..d {
                        let diff = (o[(head * t + i) * d + j] - mean[head * d + j]).abs();
                        assert!(diff <= 1e-5, "{diff}");
                    }
                }
            }
        }
    }

    #[test]
    fn blocking_geometry() {
        let p = ApproxParams::default();
        let g = Blocking::new(4096, &p);
        assert_eq!((g.blocks, g.group, g.segments), (64, 4, 16));
        let g = Blocking::new(1000, &p);
        assert_eq!((g.blocks, g.group, g.segments), (16, 1, 16));
        assert_eq!(g.block_count(15), 1000 - 15 * 64);
        assert_eq!((0..g.segments).map(|s| g.segment_count(s)).sum::<usize>(), 1000);
    }

    #[test]
    fn clustered_inputs_are_well_approximated() {
        let p = ApproxParams::default();
        let (q, k, v) = clustered_qkv(2, 512, 32, 8, 0.02, 7);
        let err = relative_frobenius(&approximate_attention(&q, &k, &v, &p), &exact_attention(&q, &k, &v));
        assert!(err <= 0.1, "{err}");
    }

    #[test]
    fn projected_tokens_are_well_approximated() {
        let p = ApproxParams::default();
        for t in [512, 1024, 2048, 4096] {
            let (q, k, v) = projected_qkv(t, 768, 8, 0x5eed);
            let err = relative_frobenius(&approximate_attention(&q, &k, &v, &p), &exact_attention(&q, &k, &v));
            eprintln!("t={t}: {err}");
            assert!(err <= 0.1, "t={t}: {err}");
        }
    }

    #[test]
    fn gradients_flow_through_the_approximation() {
        let p = ApproxParams {
            block_size: 8,
            low_rank: 3,
            ..ApproxParams::default()
        };
        let (q, k, v) = (rand(&[1, 40, 4], 1), rand(&[1, 40, 4], 2), rand(&[1, 40, 4], 3));
        let w = rand(&[1, 40, 4], 9);
        let f = |q: &Tensor, k: &Tensor, v: &Tensor| approximate_attention(q, k, v, &p).mul(&w).sum_all();
        let (qt, kt, vt) = (q.clone().requires_grad(), k.clone().requires_grad(), v.clone().requires_grad());
        let grads = haze_tensor::backward(&f(&qt, &kt, &vt));
        let eps = 1e-6;
        for (which, t) in [(0, &qt), (1, &kt), (2, &vt)] {
            let g = grads.get(t).unwrap().to_vec_f64();
            for idx in [0, 37, 101, 159] {
                let probe = |delta: f64| {
                    let mut xs = [q.to_vec_f64(), k.to_vec_f64(), v.to_vec_f64()];
                    xs[which][idx] += delta;
                    let m = |i: usize| Tensor::from_f64(xs[i].clone(), &[1, 40, 4]);
                    f(&m(0), &m(1), &m(2)).item()
                };
                let fd = (probe(eps) - probe(-eps)) / (2.0 * eps);
                assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "{which}/{idx}: {fd} vs {}", g[idx]);
            }
        }
    }

    #[test]
    fn memory_grows_linearly() {
        let p = ApproxParams::default();
        let peak = |t: usize| {
            let (q, k, v) = clustered_qkv(2, t, 32, 16, 0.1, 1);
            no_grad(|| {
                meter::reset_peak();
                let base = meter::current();
                let _ = approximate_attention(&q, &k, &v, &p);
                meter::peak() - base
            })
        };
        let (small, large) = (peak(1024), peak(4096));
        let ratio = large as f64 / small as f64;
        assert!(ratio <= 4.4, "{ratio}");
    }

    /// Per-query evaluation of the same approximation, written directly.
    fn naive(q: &Tensor, k: &Tensor, v: &Tensor, p: &ApproxParams) -> Vec<f64> {
        let (h, t, d) = (q.dim(0), q.dim(1), q.dim(2));
        let geo = Blocking::new(t, p);
        let bits = p.hash_buckets.max(1).trailing_zeros() as usize;
        let planes = hyperplanes(d, bits.max(1), p.seed);
        let (qv, kv, vv) = (q.to_vec_f64(), k.to_vec_f64(), v.to_vec_f64());
        let mut out = vec![0.0; h * t * d];
        let scale = 1.0 / (d as f64).sqrt();
        for head in 0..h {
            let span = head * t * d..(head + 1) * t * d;
            let qo = hash_order(&qv[span.clone()], d, &planes, bits);
            let ko = hash_order(&kv[span], d, &planes, bits);
            let row = |x: &Vec<f64>, i: usize| x[(head * t + i) * d..(head * t + i + 1) * d].to_vec();
            for (j, &qi) in qo.iter().enumerate() {
                let bq = j / geo.block;
                let qr = row(&qv, qi);
                let mut terms: Vec<(f64, Vec<f64>)> = Vec::new();
                let mut segs = vec![(vec![0.0; d], vec![0.0; d], 0usize, vec![0.0; d]); geo.segments];
                for (kpos, &ki) in ko.iter().enumerate() {
                    let bk = kpos / geo.block;
                    let kr = row(&kv, ki);
                    let vr = row(&vv, ki);
                    let l: f64 = qr.iter().zip(&kr).map(|(a, b)| a * b).sum::<f64>() * scale;
                    if (bk as isize - bq as isize).abs() <= REACH as isize {
                        terms.push((l, vr));
                    } else {
                        let s = &mut segs[bk / geo.group];
                        for x in 0..d { s.0[x] += kr[x]; s.1[x] += vr[x]; s.3[x] += l * vr[x]; }
                        s.2 += 1;
                    }
                }
                for (ks, vs, c, lv) in segs {
                    if c == 0 { continue; }
                    let cf = c as f64;
                    let km: Vec<f64> = ks.iter().map(|x| x / cf).collect();
                    let mu = qr.iter().zip(&km).map(|(a, b)| a * b).sum::<f64>() * scale;
                    let vm: Vec<f64> = (0..d).map(|x| vs[x] / cf + lv[x] / cf - mu * vs[x] / cf).collect();
                    terms.push((mu + cf.ln(), vm));
                }
                let m = terms.iter().map(|t| t.0).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = terms.iter().map(|t| (t.0 - m).exp()).sum();
                for (l, vr) in &terms {
                    let w = (l - m).exp() / z;
                    for x in 0..d { out[(head * t + qi) * d + x] += w * vr[x]; }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_evaluation() {
        let p = ApproxParams::default();
        for (t, seed) in [(300usize, 3u64), (1000, 4)] {
            let (q, k, v) = clustered_qkv(2, t, 16, 7, 0.3, seed);
            let a = approximate_attention(&q, &k, &v, &p).to_vec_f64();
            let r = naive(&q, &k, &v, &p);
            let m = a.iter().zip(&r).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(m <= 1e-12, "t={t}: {m}");
        }
    }
}
