//! Naive reference implementations used by the verification suite.
//!
//! Everything here recomputes a result with straight-line loops, without
//! touching the tape, the memory bookkeeping, or the training machinery it
//! cross-checks. Not used on any training path.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::memory::ReplayMemory;
use crate::nets::{Encoder, ModelState, SelfAttention};
use crate::tensor::{Scalar, Tensor};
use crate::trainer::TrainConfig;

/// Double-loop attention: keys/queries per position, plain exponential
/// normalization over source positions, value mixing, output transform.
pub fn naive_self_attention<F: Scalar>(
    sa: &SelfAttention<F>,
    f: &Tensor<F>,
) -> Result<Tensor<F>> {
    let s = f.shape();
    if s.len() != 4 {
        return Err(Error::Shape { op: "naive_self_attention", detail: format!("{s:?}") });
    }
    let (b, h, w, d) = (s[0], s[1], s[2], s[3]);
    let p = h * w;
    if p < 2 {
        return Err(Error::Shape {
            op: "naive_self_attention",
            detail: "needs at least 2 positions".into(),
        });
    }
    let d_k = sa.w_k.shape()[1];
    let d_v = sa.v_w.shape()[3];

    let fd = f.data();
    let feat = |bi: usize, pi: usize, c: usize| fd[(bi * p + pi) * d + c];

    let mut out = Tensor::zeros(&[b, h, w, d]);
    for bi in 0..b {
        // Per-position key/query/value projections.
        let mut keys = vec![F::zero(); p * d_k];
        let mut queries = vec![F::zero(); p * d_k];
        let mut values = vec![F::zero(); p * d_v];
        for pi in 0..p {
            for t in 0..d_k {
                let mut k_acc = F::zero();
                let mut q_acc = F::zero();
                for c in 0..d {
                    k_acc += feat(bi, pi, c) * sa.w_k.data()[c * d_k + t];
                    q_acc += feat(bi, pi, c) * sa.w_q.data()[c * d_k + t];
                }
                keys[pi * d_k + t] = k_acc;
                queries[pi * d_k + t] = q_acc;
            }
            for u in 0..d_v {
                let mut acc = sa.v_b.data()[u];
                for c in 0..d {
                    acc += feat(bi, pi, c) * sa.v_w.data()[c * d_v + u];
                }
                values[pi * d_v + u] = acc;
            }
        }

        // A[j, i] = exp(k_i . q_j) / sum_i exp(k_i . q_j)
        let mut attn = vec![F::zero(); p * p];
        for j in 0..p {
            let mut denom = F::zero();
            for i in 0..p {
                let mut dot = F::zero();
                for t in 0..d_k {
                    dot += keys[i * d_k + t] * queries[j * d_k + t];
                }
                let e = dot.exp();
                attn[j * p + i] = e;
                denom += e;
            }
            for i in 0..p {
                attn[j * p + i] = attn[j * p + i] / denom;
            }
        }

        // out_j = I(sum_i A[j,i] * V(f_i)) (+ optional residual)
        for j in 0..p {
            let mut mixed = vec![F::zero(); d_v];
            for i in 0..p {
                for u in 0..d_v {
                    mixed[u] += attn[j * p + i] * values[i * d_v + u];
                }
            }
            for c in 0..d {
                let mut acc = sa.i_b.data()[c];
                for u in 0..d_v {
                    acc += mixed[u] * sa.i_w.data()[u * d + c];
                }
                if sa.residual {
                    acc += feat(bi, j, c);
                }
                out.data_mut()[(bi * p + j) * d + c] = acc;
            }
        }
    }
    Ok(out)
}

// ── replay-memory trace oracle ───────────────────────────────────────

/// Shadow replay memory: no class-count bookkeeping, no incremental state;
/// every decision comes from a full scan over the stored list.
#[derive(Clone, Debug)]
pub struct NaiveReplayMemory {
    capacity: usize,
    samples: Vec<(u64, usize, f32)>, // (inserted_at, label, importance)
    next_id: u64,
}

impl NaiveReplayMemory {
    pub fn new(capacity: usize) -> Self {
        NaiveReplayMemory { capacity, samples: Vec::new(), next_id: 0 }
    }

    pub fn samples(&self) -> &[(u64, usize, f32)] {
        &self.samples
    }

    fn mean_importance(&self) -> f32 {
        if self.samples.is_empty() {
            return 0.0;
        }
        let sum: f64 = self.samples.iter().map(|(_, _, imp)| *imp as f64).sum();
        (sum / self.samples.len() as f64) as f32
    }

    pub fn insert(&mut self, label: usize) {
        let importance = self.mean_importance();
        self.samples.push((self.next_id, label, importance));
        self.next_id += 1;
        if self.samples.len() > self.capacity {
            self.evict();
        }
    }

    pub fn update(&mut self, indices: &[usize], before: &[f32], after: &[f32], beta: f32) {
        for (k, &i) in indices.iter().enumerate() {
            let imp = &mut self.samples[i].2;
            *imp = (1.0 - beta) * *imp + beta * (before[k] - after[k]);
        }
    }

    /// Min importance, then largest class count, then oldest — all by scan.
    pub fn evict(&mut self) -> (u64, usize, f32) {
        let mut min_imp = f32::INFINITY;
        for &(_, _, imp) in &self.samples {
            if imp < min_imp {
                min_imp = imp;
            }
        }
        let count_of = |label: usize| -> usize {
            self.samples.iter().filter(|(_, l, _)| *l == label).count()
        };
        let mut best: Option<usize> = None;
        let mut best_count = 0usize;
        for (i, &(id, label, imp)) in self.samples.iter().enumerate() {
            if imp != min_imp {
                continue;
            }
            let count = count_of(label);
            let better = match best {
                None => true,
                Some(b) => {
                    count > best_count || (count == best_count && id < self.samples[b].0)
                }
            };
            if better {
                best = Some(i);
                best_count = count;
            }
        }
        self.samples.remove(best.expect("evict on nonempty memory"))
    }
}

/// Drives the real replay memory and the naive shadow through one seeded
/// random trace of inserts, importance updates, and explicit evictions,
/// comparing the full contents (ids, labels, importance bits) and the
/// capacity bound after every event.
pub fn run_replay_trace(
    capacity: usize,
    events: usize,
    seed: u64,
) -> std::result::Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut real = ReplayMemory::new(capacity).map_err(|e| e.to_string())?;
    let mut naive = NaiveReplayMemory::new(capacity);
    let stub = Tensor::<f32>::full(&[1, 1, 1], 0.0);

    for event in 0..events {
        let roll: f64 = rng.gen();
        if roll < 0.7 || real.is_empty() {
            let label = rng.gen_range(0..10usize);
            real.insert(stub.clone(), label);
            naive.insert(label);
        } else if roll < 0.9 {
            let k = rng.gen_range(1..=8usize.min(real.len()));
            let indices: Vec<usize> = (0..k).map(|_| rng.gen_range(0..real.len())).collect();
            let before: Vec<f32> = (0..k).map(|_| rng.gen_range(0.0..2.0)).collect();
            let after: Vec<f32> = (0..k).map(|_| rng.gen_range(0.0..2.0)).collect();
            real.importance_update(&indices, &before, &after, 0.1).map_err(|e| e.to_string())?;
            naive.update(&indices, &before, &after, 0.1);
        } else {
            real.evict_least_important().map_err(|e| e.to_string())?;
            naive.evict();
        }

        if real.len() > capacity {
            return Err(format!("event {event}: capacity exceeded ({})", real.len()));
        }
        if real.len() != naive.samples().len() {
            return Err(format!(
                "event {event}: length diverged ({} vs {})",
                real.len(),
                naive.samples().len()
            ));
        }
        for (s, &(id, label, imp)) in real.samples().iter().zip(naive.samples()) {
            if s.inserted_at != id || s.label != label || s.importance.to_bits() != imp.to_bits() {
                return Err(format!(
                    "event {event}: sample diverged: real ({}, {}, {}) vs naive ({id}, {label}, {imp})",
                    s.inserted_at, s.label, s.importance
                ));
            }
        }
    }
    Ok(())
}

// ── straight-line experience-blending oracle ─────────────────────────

/// End state produced by [`straight_line_eb_step`].
pub struct EbOracleResult {
    pub model: ModelState<f32>,
    pub replay_importances: Vec<f32>,
    pub sbd_importances: Vec<f32>,
}

// The helpers below re-state the training arithmetic as flat loops with
// local accumulators, in the exact element and addend order the tape ops
// use, so results must agree bit for bit.

fn mirror_conv2d(
    input: &[f32],
    ishape: [usize; 4],
    kernel: &[f32],
    kshape: [usize; 4],
    stride: usize,
    padding: usize,
) -> (Vec<f32>, [usize; 4]) {
    let [bsz, h, w, cin] = ishape;
    let [kh, kw, _, cout] = kshape;
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0f32; bsz * oh * ow * cout];
    for b in 0..bsz {
        for oy in 0..oh {
            for ox in 0..ow {
                for oc in 0..cout {
                    let mut acc = 0.0f32;
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            for ic in 0..cin {
                                let iv = input[((b * h + iy as usize) * w + ix as usize) * cin + ic];
                                let kv = kernel[((ky * kw + kx) * cin + ic) * cout + oc];
                                acc += iv * kv;
                            }
                        }
                    }
                    out[((b * oh + oy) * ow + ox) * cout + oc] = acc;
                }
            }
        }
    }
    (out, [bsz, oh, ow, cout])
}

fn mirror_bias(x: &[f32], bias: &[f32]) -> Vec<f32> {
    let d = bias.len();
    x.iter().enumerate().map(|(i, v)| v + bias[i % d]).collect()
}

fn mirror_relu(x: &[f32]) -> Vec<f32> {
    x.iter().map(|v| if *v > 0.0 { *v } else { 0.0 }).collect()
}

fn mirror_matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut c = vec![0.0f32; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0f32;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            c[i * n + j] = acc;
        }
    }
    c
}

fn mirror_softmax_rows(x: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; x.len()];
    for r in 0..rows {
        let row = &x[r * cols..(r + 1) * cols];
        let mut mx = row[0];
        for v in &row[1..] {
            if *v > mx {
                mx = *v;
            }
        }
        let mut total = 0.0f32;
        for (j, v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            out[r * cols + j] = e;
            total += e;
        }
        for j in 0..cols {
            out[r * cols + j] /= total;
        }
    }
    out
}

fn mirror_per_sample_ce(logits: &[f32], b: usize, c: usize, labels: &[usize]) -> Vec<f32> {
    let mut out = Vec::with_capacity(b);
    for row in 0..b {
        let r = &logits[row * c..(row + 1) * c];
        let mut mx = r[0];
        for v in &r[1..] {
            if *v > mx {
                mx = *v;
            }
        }
        let mut total = 0.0f32;
        for v in r {
            total += (v - mx).exp();
        }
        out.push(mx + total.ln() - r[labels[row]]);
    }
    out
}

/// d(mean CE)/d(logits) = (softmax - onehot) / B.
fn mirror_ce_grad(logits: &[f32], b: usize, c: usize, labels: &[usize]) -> Vec<f32> {
    let probs = mirror_softmax_rows(logits, b, c);
    let inv_b = 1.0f32 / b as f32;
    let mut d = vec![0.0f32; b * c];
    for row in 0..b {
        for col in 0..c {
            let one_hot = if labels[row] == col { 1.0f32 } else { 0.0 };
            d[row * c + col] = (probs[row * c + col] - one_hot) * inv_b;
        }
    }
    d
}

/// Frozen r-path features: conv/bias/relu twice, then the attention layer
/// in the same step order as the recorded forward.
fn mirror_frozen_features(
    encoder: &Encoder<f32>,
    sa: &SelfAttention<f32>,
    images: &Tensor<f32>,
) -> (Vec<f32>, [usize; 4]) {
    let is = images.shape();
    let ishape = [is[0], is[1], is[2], is[3]];
    let k1 = encoder.conv1_w.shape();
    let (c1, s1) = mirror_conv2d(
        images.data(),
        ishape,
        encoder.conv1_w.data(),
        [k1[0], k1[1], k1[2], k1[3]],
        2,
        1,
    );
    let c1 = mirror_relu(&mirror_bias(&c1, encoder.conv1_b.data()));
    let k2 = encoder.conv2_w.shape();
    let (c2, s2) = mirror_conv2d(&c1, s1, encoder.conv2_w.data(), [k2[0], k2[1], k2[2], k2[3]], 2, 1);
    let f = mirror_relu(&mirror_bias(&c2, encoder.conv2_b.data()));

    let [b, h, w, d] = s2;
    let p = h * w;
    let d_k = sa.w_k.shape()[1];
    let d_v = sa.v_w.shape()[3];

    // keys/queries: one [b*p, d] x [d, d_k] product each
    let keys = mirror_matmul(&f, sa.w_k.data(), b * p, d, d_k);
    let queries = mirror_matmul(&f, sa.w_q.data(), b * p, d, d_k);

    // scores[b] = queries[b] ([p, d_k]) x keys[b]^T ([d_k, p])
    let mut scores = Vec::with_capacity(b * p * p);
    for bi in 0..b {
        let q = &queries[bi * p * d_k..(bi + 1) * p * d_k];
        let kk = &keys[bi * p * d_k..(bi + 1) * p * d_k];
        // transpose then multiply, as the recorded ops do
        let mut kt = vec![0.0f32; d_k * p];
        for i in 0..p {
            for j in 0..d_k {
                kt[j * p + i] = kk[i * d_k + j];
            }
        }
        scores.extend_from_slice(&mirror_matmul(q, &kt, p, d_k, p));
    }
    let attn = mirror_softmax_rows(&scores, b * p, p);

    let vw = sa.v_w.shape();
    let (values, _) = mirror_conv2d(&f, s2, sa.v_w.data(), [vw[0], vw[1], vw[2], vw[3]], 1, 0);
    let values = mirror_bias(&values, sa.v_b.data());

    let mut mixed = Vec::with_capacity(b * p * d_v);
    for bi in 0..b {
        let a = &attn[bi * p * p..(bi + 1) * p * p];
        let v = &values[bi * p * d_v..(bi + 1) * p * d_v];
        mixed.extend_from_slice(&mirror_matmul(a, v, p, p, d_v));
    }

    let iw = sa.i_w.shape();
    let (out, _) = mirror_conv2d(&mixed, [b, h, w, d_v], sa.i_w.data(), [iw[0], iw[1], iw[2], iw[3]], 1, 0);
    let mut out = mirror_bias(&out, sa.i_b.data());
    if sa.residual {
        out = out.iter().zip(&f).map(|(o, ff)| o + ff).collect();
    }
    (out, s2)
}

struct HeadPass {
    h_pre: Vec<f32>,
    h: Vec<f32>,
    logits: Vec<f32>,
}

fn mirror_head_forward(
    flat: &[f32],
    b: usize,
    in_dim: usize,
    w: &[f32],
    bias: &[f32],
    hidden: usize,
    cw: &[f32],
    cb: &[f32],
    classes: usize,
) -> HeadPass {
    let h_pre = mirror_bias(&mirror_matmul(flat, w, b, in_dim, hidden), bias);
    let h = mirror_relu(&h_pre);
    let logits = mirror_bias(&mirror_matmul(&h, cw, b, hidden, classes), cb);
    HeadPass { h_pre, h, logits }
}

struct HeadGrads {
    dw: Vec<f32>,
    db: Vec<f32>,
    dcw: Vec<f32>,
    dcb: Vec<f32>,
}

fn mirror_head_backward(
    flat: &[f32],
    b: usize,
    in_dim: usize,
    hidden: usize,
    classes: usize,
    pass: &HeadPass,
    cw: &[f32],
    dlogits: &[f32],
) -> HeadGrads {
    let mut dcb = vec![0.0f32; classes];
    for row in 0..b {
        for col in 0..classes {
            dcb[col] += dlogits[row * classes + col];
        }
    }
    let mut dcw = vec![0.0f32; hidden * classes];
    for j in 0..hidden {
        for col in 0..classes {
            let mut acc = 0.0f32;
            for row in 0..b {
                acc += pass.h[row * hidden + j] * dlogits[row * classes + col];
            }
            dcw[j * classes + col] = acc;
        }
    }
    let mut dh = vec![0.0f32; b * hidden];
    for row in 0..b {
        for j in 0..hidden {
            let mut acc = 0.0f32;
            for col in 0..classes {
                acc += dlogits[row * classes + col] * cw[j * classes + col];
            }
            dh[row * hidden + j] = acc;
        }
    }
    let dh_pre: Vec<f32> = dh
        .iter()
        .zip(&pass.h_pre)
        .map(|(g, pre)| if *pre > 0.0 { *g } else { 0.0 })
        .collect();
    let mut db = vec![0.0f32; hidden];
    for row in 0..b {
        for j in 0..hidden {
            db[j] += dh_pre[row * hidden + j];
        }
    }
    let mut dw = vec![0.0f32; in_dim * hidden];
    for p in 0..in_dim {
        for j in 0..hidden {
            let mut acc = 0.0f32;
            for row in 0..b {
                acc += flat[row * in_dim + p] * dh_pre[row * hidden + j];
            }
            dw[p * hidden + j] = acc;
        }
    }
    HeadGrads { dw, db, dcw, dcb }
}

fn mirror_sgd(p: &mut [f32], g: &[f32], lr: f32) {
    for (pv, gv) in p.iter_mut().zip(g) {
        *pv -= lr * *gv;
    }
}

fn mirror_blend(a: &[f32], b: &[f32], alpha: f64) -> Vec<f32> {
    if alpha == 0.0 {
        return a.to_vec();
    }
    if alpha == 1.0 {
        return b.to_vec();
    }
    let wa = (1.0 - alpha) as f32;
    let wb = alpha as f32;
    a.iter().zip(b).map(|(x, y)| wa * *x + wb * *y).collect()
}

fn stack(parts: &[Tensor<f32>], indices: &[usize]) -> Vec<f32> {
    let mut data = Vec::new();
    for &i in indices {
        data.extend_from_slice(parts[i].data());
    }
    data
}

/// Replays one experience-blending step as straight-line arithmetic: the
/// same memory draws from an identically seeded generator, per-sample
/// pre/post losses, both branch updates, the parameter blend, and the
/// importance smoothing. Assumes a frozen encoder and identity extractor
/// (the fixture the bitwise check runs on). The result must equal the
/// trainer's step bit for bit.
#[allow(clippy::too_many_arguments)]
pub fn straight_line_eb_step(
    encoder: &Encoder<f32>,
    sa: &SelfAttention<f32>,
    model: &ModelState<f32>,
    replay_images: &[Tensor<f32>],
    replay_labels: &[usize],
    replay_importances: &[f32],
    sbd_features: &[Tensor<f32>],
    sbd_labels: &[usize],
    sbd_importances: &[f32],
    rng: &mut ChaCha8Rng,
    cfg: &TrainConfig,
) -> Result<EbOracleResult> {
    let n_r = replay_images.len();
    let n_e = sbd_features.len();
    if n_r == 0 || n_e == 0 {
        return Err(Error::Empty { what: "straight_line_eb_step" });
    }
    let hidden = model.f_r_b.numel();
    let classes = model.c_b.numel();
    let in_dim = model.f_r_w.shape()[0];

    // branch copies of M (identity extractor carries no parameters)
    let mut rue_frw = model.f_r_w.data().to_vec();
    let mut rue_frb = model.f_r_b.data().to_vec();
    let mut rue_few = model.f_e_w.data().to_vec();
    let mut rue_feb = model.f_e_b.data().to_vec();
    let mut rue_cw = model.c_w.data().to_vec();
    let mut rue_cb = model.c_b.data().to_vec();
    let mut me_few = model.f_e_w.data().to_vec();
    let mut me_feb = model.f_e_b.data().to_vec();
    let mut me_cw = model.c_w.data().to_vec();
    let mut me_cb = model.c_b.data().to_vec();

    let draw = |rng: &mut ChaCha8Rng, len: usize, batch: usize| -> Vec<usize> {
        (0..batch.min(len)).map(|_| rng.gen_range(0..len)).collect()
    };

    // losses of a stacked image batch under given M params (frozen encoder)
    let r_losses = |imgs: &[usize], frw: &[f32], frb: &[f32], cw: &[f32], cb: &[f32]| -> Vec<f32> {
        let refs: Vec<&Tensor<f32>> = imgs.iter().map(|&i| &replay_images[i]).collect();
        let batch = Tensor::stack(&refs).expect("stackable replay images");
        let (fp, dims) = mirror_frozen_features(encoder, sa, &batch);
        let b = dims[0];
        let labels: Vec<usize> = imgs.iter().map(|&i| replay_labels[i]).collect();
        let pass = mirror_head_forward(&fp, b, in_dim, frw, frb, hidden, cw, cb, classes);
        mirror_per_sample_ce(&pass.logits, b, classes, &labels)
    };
    let e_losses = |idxs: &[usize], few: &[f32], feb: &[f32], cw: &[f32], cb: &[f32]| -> Vec<f32> {
        let flat = stack(sbd_features, idxs);
        let b = idxs.len();
        let labels: Vec<usize> = idxs.iter().map(|&i| sbd_labels[i]).collect();
        let pass = mirror_head_forward(&flat, b, in_dim, few, feb, hidden, cw, cb, classes);
        mirror_per_sample_ce(&pass.logits, b, classes, &labels)
    };

    let mut r_drawn: Vec<usize> = Vec::new();
    let mut r_before: Vec<f32> = Vec::new();
    let mut e_drawn: Vec<usize> = Vec::new();
    let mut e_before: Vec<f32> = Vec::new();

    for _ in 0..cfg.inner_steps {
        let r_idx = draw(rng, n_r, cfg.batch_size);
        let e_idx = draw(rng, n_e, cfg.batch_size);

        r_before.extend(r_losses(
            &r_idx,
            model.f_r_w.data(),
            model.f_r_b.data(),
            model.c_w.data(),
            model.c_b.data(),
        ));
        e_before.extend(e_losses(
            &e_idx,
            model.f_e_w.data(),
            model.f_e_b.data(),
            model.c_w.data(),
            model.c_b.data(),
        ));
        r_drawn.extend_from_slice(&r_idx);
        e_drawn.extend_from_slice(&e_idx);

        // branch a forward on the current M_{R∪E}
        let refs: Vec<&Tensor<f32>> = r_idx.iter().map(|&i| &replay_images[i]).collect();
        let r_batch = Tensor::stack(&refs)?;
        let (fp, dims) = mirror_frozen_features(encoder, sa, &r_batch);
        let b_r = dims[0];
        let r_labels_batch: Vec<usize> = r_idx.iter().map(|&i| replay_labels[i]).collect();
        let r_pass =
            mirror_head_forward(&fp, b_r, in_dim, &rue_frw, &rue_frb, hidden, &rue_cw, &rue_cb, classes);

        let e_flat = stack(sbd_features, &e_idx);
        let b_e = e_idx.len();
        let e_labels_batch: Vec<usize> = e_idx.iter().map(|&i| sbd_labels[i]).collect();
        let e_pass = mirror_head_forward(
            &e_flat, b_e, in_dim, &rue_few, &rue_feb, hidden, &rue_cw, &rue_cb, classes,
        );

        let dlogits_r = mirror_ce_grad(&r_pass.logits, b_r, classes, &r_labels_batch);
        let dlogits_e = mirror_ce_grad(&e_pass.logits, b_e, classes, &e_labels_batch);
        let gr = mirror_head_backward(&fp, b_r, in_dim, hidden, classes, &r_pass, &rue_cw, &dlogits_r);
        let ge =
            mirror_head_backward(&e_flat, b_e, in_dim, hidden, classes, &e_pass, &rue_cw, &dlogits_e);

        // shared classifier: the reverse sweep reaches the e-path first
        let g_cw: Vec<f32> = ge.dcw.iter().zip(&gr.dcw).map(|(e, r)| e + r).collect();
        let g_cb: Vec<f32> = ge.dcb.iter().zip(&gr.dcb).map(|(e, r)| e + r).collect();

        mirror_sgd(&mut rue_frw, &gr.dw, cfg.lr);
        mirror_sgd(&mut rue_frb, &gr.db, cfg.lr);
        mirror_sgd(&mut rue_few, &ge.dw, cfg.lr);
        mirror_sgd(&mut rue_feb, &ge.db, cfg.lr);
        mirror_sgd(&mut rue_cw, &g_cw, cfg.lr);
        mirror_sgd(&mut rue_cb, &g_cb, cfg.lr);

        // branch b on a fresh boundary draw
        let e2_idx = draw(rng, n_e, cfg.batch_size);
        let e2_flat = stack(sbd_features, &e2_idx);
        let b_e2 = e2_idx.len();
        let e2_labels: Vec<usize> = e2_idx.iter().map(|&i| sbd_labels[i]).collect();
        let e2_pass =
            mirror_head_forward(&e2_flat, b_e2, in_dim, &me_few, &me_feb, hidden, &me_cw, &me_cb, classes);
        let dlogits_e2 = mirror_ce_grad(&e2_pass.logits, b_e2, classes, &e2_labels);
        let ge2 = mirror_head_backward(
            &e2_flat, b_e2, in_dim, hidden, classes, &e2_pass, &me_cw, &dlogits_e2,
        );
        mirror_sgd(&mut me_few, &ge2.dw, cfg.lr);
        mirror_sgd(&mut me_feb, &ge2.db, cfg.lr);
        mirror_sgd(&mut me_cw, &ge2.dcw, cfg.lr);
        mirror_sgd(&mut me_cb, &ge2.dcb, cfg.lr);
    }

    // blend: M_E's F_R never moved, so it equals the original
    let blended = ModelState {
        f_r_w: Tensor::new(model.f_r_w.shape().to_vec(), mirror_blend(&rue_frw, model.f_r_w.data(), cfg.alpha))?,
        f_r_b: Tensor::new(model.f_r_b.shape().to_vec(), mirror_blend(&rue_frb, model.f_r_b.data(), cfg.alpha))?,
        f_e_w: Tensor::new(model.f_e_w.shape().to_vec(), mirror_blend(&rue_few, &me_few, cfg.alpha))?,
        f_e_b: Tensor::new(model.f_e_b.shape().to_vec(), mirror_blend(&rue_feb, &me_feb, cfg.alpha))?,
        c_w: Tensor::new(model.c_w.shape().to_vec(), mirror_blend(&rue_cw, &me_cw, cfg.alpha))?,
        c_b: Tensor::new(model.c_b.shape().to_vec(), mirror_blend(&rue_cb, &me_cb, cfg.alpha))?,
    };

    // post-step losses under the blended model, then importance smoothing
    let r_after = r_losses(
        &r_drawn,
        blended.f_r_w.data(),
        blended.f_r_b.data(),
        blended.c_w.data(),
        blended.c_b.data(),
    );
    let mut rep_imp = replay_importances.to_vec();
    for (k, &i) in r_drawn.iter().enumerate() {
        rep_imp[i] = (1.0 - cfg.beta) * rep_imp[i] + cfg.beta * (r_before[k] - r_after[k]);
    }
    let e_after = e_losses(
        &e_drawn,
        blended.f_e_w.data(),
        blended.f_e_b.data(),
        blended.c_w.data(),
        blended.c_b.data(),
    );
    let mut sbd_imp = sbd_importances.to_vec();
    for (k, &i) in e_drawn.iter().enumerate() {
        sbd_imp[i] = (1.0 - cfg.beta) * sbd_imp[i] + cfg.beta * (e_before[k] - e_after[k]);
    }

    Ok(EbOracleResult { model: blended, replay_importances: rep_imp, sbd_importances: sbd_imp })
}
