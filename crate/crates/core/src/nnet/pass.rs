//! Batched forward and backward passes.
//!
//! Every example may read its parameters from a different parameter set
//! (`groups[e]` indexes `sets`); batch-normalization statistics are always
//! pooled over the whole batch. The ordinary trainer uses one set; MAML's
//! outer step uses one adapted set per task.

use super::ops::{conv_backward_input, conv_backward_weight, conv_forward, maxpool};
use super::{s, Layout, Scalar, WeightSnapshot, BN_EPS};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm uses batch statistics.
    Train,
    /// Batchnorm uses running statistics.
    Eval,
}

#[derive(Debug, Clone, Copy)]
pub struct Example<'a, S> {
    pub image: &'a [S],
    pub task: usize,
    pub label: bool,
}

/// Per-channel batch statistics of every conv layer, concatenated.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    pub var_unbiased: Vec<S>,
}

#[derive(Debug, Clone)]
pub struct LossGrad<S> {
    pub loss: S,
    pub grad: Vec<S>,
    pub stats: BatchStats<S>,
}

struct ConvCache<S> {
    input: Vec<S>,
    z: Vec<S>,
    xhat: Vec<S>,
    inv_std: Vec<S>,
    argmax: Vec<u32>,
}

struct Trace<S> {
    conv: Vec<ConvCache<S>>,
    /// input activations of each fc layer; index 0 holds conv features only
    fc_in: Vec<Vec<S>>,
    /// pre-activations of each hidden fc layer
    fc_pre: Vec<Vec<S>>,
}

struct Forward<S> {
    logits: Vec<S>,
    trace: Option<Trace<S>>,
    stats: Option<BatchStats<S>>,
}

fn wide<S: Scalar>(x: S) -> f64 {
    x.to_f64().unwrap_or(f64::NAN)
}

fn forward_core<S: Scalar>(
    layout: &Layout,
    sets: &[&[S]],
    groups: &[usize],
    running: Option<(&[S], &[S])>,
    images: &[&[S]],
    tasks: &[usize],
    keep_trace: bool,
) -> Forward<S> {
    let b = images.len();
    let eps: S = s(BN_EPS);
    let mut x: Vec<S> = Vec::with_capacity(b * layout.image_len());
    for img in images {
        x.extend_from_slice(img);
    }
    let mut caches = Vec::new();
    let mut stats_mean = Vec::with_capacity(layout.n_bn);
    let mut stats_var = Vec::with_capacity(layout.n_bn);

    for (l, g) in layout.conv.iter().enumerate() {
        let (plane, in_len) = (g.h * g.w, g.cin * g.h * g.w);
        let out_len = g.cout * plane;
        let mut z = vec![S::zero(); b * out_len];
        for e in 0..b {
            let p = sets[groups[e]];
            let ze = &mut z[e * out_len..(e + 1) * out_len];
            for c in 0..g.cout {
                let mut bias = p[g.bias + c];
                if let Some((ml, tm)) = layout.task_mod {
                    if ml == l {
                        bias = bias + p[tm + tasks[e] * g.cout + c];
                    }
                }
                ze[c * plane..(c + 1) * plane].fill(bias);
            }
            conv_forward(
                &x[e * in_len..(e + 1) * in_len],
                g.cin,
                g.h,
                g.w,
                &p[g.weight..g.weight + g.cout * g.cin * 9],
                g.cout,
                ze,
            );
        }
        // ReLU then batchnorm
        let mut y: Vec<S> = z.iter().map(|&v| v.max(S::zero())).collect();
        let n = b * plane;
        let mut inv_std = vec![S::zero(); g.cout];
        let mut mean = vec![S::zero(); g.cout];
        match running {
            Some((rm, rv)) => {
                for c in 0..g.cout {
                    mean[c] = rm[g.bn + c];
                    inv_std[c] = S::one() / (rv[g.bn + c] + eps).sqrt();
                }
            }
            None => {
                let nf: S = s(n as f64);
                for c in 0..g.cout {
                    let mut sum = 0.0f64;
                    for e in 0..b {
                        let o = e * out_len + c * plane;
                        sum += wide(y[o..o + plane].iter().copied().sum::<S>());
                    }
                    let mu: S = s(sum / n as f64);
                    let mut acc = 0.0f64;
                    for e in 0..b {
                        let o = e * out_len + c * plane;
                        acc += wide(y[o..o + plane].iter().map(|&v| (v - mu) * (v - mu)).sum::<S>());
                    }
                    let sq: S = s(acc);
                    let var = sq / nf;
                    mean[c] = mu;
                    inv_std[c] = S::one() / (var + eps).sqrt();
                    stats_mean.push(mu);
                    let unbiased = if n > 1 { sq / s(n as f64 - 1.0) } else { var };
                    stats_var.push(unbiased);
                }
            }
        }
        let mut xhat = if keep_trace { vec![S::zero(); b * out_len] } else { Vec::new() };
        for e in 0..b {
            let p = sets[groups[e]];
            for c in 0..g.cout {
                let (gam, bet) = (p[g.gamma + c], p[g.beta + c]);
                let o = e * out_len + c * plane;
                for i in o..o + plane {
                    let xh = (y[i] - mean[c]) * inv_std[c];
                    if keep_trace {
                        xhat[i] = xh;
                    }
                    y[i] = gam * xh + bet;
                }
            }
        }
        let pooled_len = g.cout * g.ho * g.wo;
        let mut pooled = vec![S::zero(); b * pooled_len];
        let mut argmax = vec![0u32; b * pooled_len];
        for e in 0..b {
            maxpool(
                &y[e * out_len..(e + 1) * out_len],
                g.cout,
                g.h,
                g.w,
                &mut pooled[e * pooled_len..(e + 1) * pooled_len],
                &mut argmax[e * pooled_len..(e + 1) * pooled_len],
            );
        }
        let input = std::mem::replace(&mut x, pooled);
        if keep_trace {
            caches.push(ConvCache {
                input,
                z,
                xhat,
                inv_std,
                argmax,
            });
        }
    }

    // fully connected stack; the task one-hot occupies the trailing inputs of fc1
    let n_fc = layout.fc.len();
    let mut fc_in = Vec::new();
    let mut fc_pre = Vec::new();
    let mut act = x;
    let mut logits = vec![S::zero(); b];
    for (j, f) in layout.fc.iter().enumerate() {
        let last = j + 1 == n_fc;
        let width_in = if j == 0 { layout.features } else { f.nin };
        let mut pre = vec![S::zero(); b * f.nout];
        for e in 0..b {
            let p = sets[groups[e]];
            let a = &act[e * width_in..(e + 1) * width_in];
            for k in 0..f.nout {
                let row = &p[f.weight + k * f.nin..f.weight + k * f.nin + width_in];
                let mut acc = p[f.bias + k];
                for (&wv, &av) in row.iter().zip(a) {
                    acc = acc + wv * av;
                }
                if j == 0 {
                    acc = acc + p[f.weight + k * f.nin + layout.features + tasks[e]];
                }
                pre[e * f.nout + k] = acc;
            }
        }
        if last {
            logits.copy_from_slice(&pre);
            if keep_trace {
                fc_in.push(act);
            }
            break;
        }
        let next: Vec<S> = pre.iter().map(|&v| v.max(S::zero())).collect();
        if keep_trace {
            fc_in.push(std::mem::replace(&mut act, next));
            fc_pre.push(pre);
        } else {
            act = next;
        }
    }

    let stats = running.is_none().then_some(BatchStats {
        mean: stats_mean,
        var_unbiased: stats_var,
    });
    Forward {
        logits,
        trace: keep_trace.then_some(Trace {
            conv: caches,
            fc_in,
            fc_pre,
        }),
        stats,
    }
}

/// Numerically stable binary cross-entropy on a logit.
fn bce<S: Scalar>(logit: S, label: bool) -> S {
    let y = if label { S::one() } else { S::zero() };
    logit.max(S::zero()) - logit * y + (S::one() + (-logit.abs()).exp()).ln()
}

fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn check_batch<S: Scalar>(layout: &Layout, batch: &[Example<'_, S>]) -> Result<()> {
    if batch.is_empty() {
        return Err(Error::Shape("empty batch".into()));
    }
    for (i, ex) in batch.iter().enumerate() {
        if ex.image.len() != layout.image_len() {
            return Err(Error::Shape(format!(
                "example {i}: image has {} values, model expects {}",
                ex.image.len(),
                layout.image_len()
            )));
        }
        if ex.task >= layout.n_tasks {
            return Err(Error::Shape(format!("example {i}: task {} out of range", ex.task)));
        }
    }
    Ok(())
}

/// Single-example forward pass taking an explicit one-hot task vector.
pub fn forward<S: Scalar>(
    weights: &WeightSnapshot<S>,
    image: &[S],
    task_onehot: &[S],
    mode: Mode,
) -> Result<S> {
    let layout = weights.layout();
    if task_onehot.len() != layout.n_tasks {
        return Err(Error::Shape(format!(
            "task vector has length {}, expected {}",
            task_onehot.len(),
            layout.n_tasks
        )));
    }
    let ones: Vec<usize> = (0..task_onehot.len())
        .filter(|&i| task_onehot[i] == S::one())
        .collect();
    let zeros = task_onehot.iter().filter(|&&v| v == S::zero()).count();
    if ones.len() != 1 || zeros + 1 != task_onehot.len() {
        return Err(Error::Shape("task vector is not one-hot".into()));
    }
    let ex = Example {
        image,
        task: ones[0],
        label: false,
    };
    check_batch(&layout, &[ex])?;
    let running = match mode {
        Mode::Eval => Some((&weights.bn_mean[..], &weights.bn_var[..])),
        Mode::Train => None,
    };
    let out = forward_core(&layout, &[&weights.params], &[0], running, &[image], &[ex.task], false);
    Ok(out.logits[0])
}

/// Eval-mode logits for a batch of `(image, task)` pairs.
pub fn forward_batch_eval<S: Scalar>(
    weights: &WeightSnapshot<S>,
    images: &[&[S]],
    tasks: &[usize],
) -> Vec<S> {
    let layout = weights.layout();
    let groups = vec![0; images.len()];
    forward_core(
        &layout,
        &[&weights.params],
        &groups,
        Some((&weights.bn_mean, &weights.bn_var)),
        images,
        tasks,
        false,
    )
    .logits
}

/// Fraction of examples whose thresholded logit (`> 0` means yes) matches the label.
pub fn evaluate_accuracy<S: Scalar>(weights: &WeightSnapshot<S>, examples: &[Example<'_, S>]) -> f64 {
    if examples.is_empty() {
        return 0.0;
    }
    let mut correct = 0usize;
    for chunk in examples.chunks(64) {
        let images: Vec<&[S]> = chunk.iter().map(|e| e.image).collect();
        let tasks: Vec<usize> = chunk.iter().map(|e| e.task).collect();
        let logits = forward_batch_eval(weights, &images, &tasks);
        correct += logits
            .iter()
            .zip(chunk)
            .filter(|(&z, e)| (z > S::zero()) == e.label)
            .count();
    }
    correct as f64 / examples.len() as f64
}

/// Mean binary cross-entropy and its gradient, batchnorm in train mode.
pub fn loss_and_grad<S: Scalar>(
    weights: &WeightSnapshot<S>,
    batch: &[Example<'_, S>],
) -> Result<LossGrad<S>> {
    loss_and_pooled_grad(&[weights], &vec![0; batch.len()], batch)
}

/// Grouped pass whose gradients for all sets are accumulated into a single
/// vector, in the same order as [`loss_and_grad`] accumulates a batch.
pub fn loss_and_pooled_grad<S: Scalar>(
    sets: &[&WeightSnapshot<S>],
    groups: &[usize],
    batch: &[Example<'_, S>],
) -> Result<LossGrad<S>> {
    let (loss, mut grads, stats) = grouped_pass(sets, groups, batch, true)?;
    Ok(LossGrad {
        loss,
        grad: grads.pop().expect("one accumulator"),
        stats,
    })
}

/// Like [`loss_and_grad`], but example `e` is evaluated with parameter set
/// `sets[groups[e]]`. Returns one gradient per set; batchnorm statistics
/// are pooled over the whole batch.
pub fn loss_and_grad_grouped<S: Scalar>(
    sets: &[&WeightSnapshot<S>],
    groups: &[usize],
    batch: &[Example<'_, S>],
) -> Result<(S, Vec<Vec<S>>, BatchStats<S>)> {
    grouped_pass(sets, groups, batch, false)
}

fn grouped_pass<S: Scalar>(
    sets: &[&WeightSnapshot<S>],
    groups: &[usize],
    batch: &[Example<'_, S>],
    pooled: bool,
) -> Result<(S, Vec<Vec<S>>, BatchStats<S>)> {
    let layout = sets
        .first()
        .ok_or_else(|| Error::Shape("no parameter sets".into()))?
        .layout();
    check_batch(&layout, batch)?;
    if groups.len() != batch.len() || groups.iter().any(|&g| g >= sets.len()) {
        return Err(Error::Shape("group assignment does not match the batch".into()));
    }
    if sets.iter().any(|w| w.config != sets[0].config) {
        return Err(Error::Shape("parameter sets disagree on model config".into()));
    }
    let params: Vec<&[S]> = sets.iter().map(|w| &w.params[..]).collect();
    let images: Vec<&[S]> = batch.iter().map(|e| e.image).collect();
    let tasks: Vec<usize> = batch.iter().map(|e| e.task).collect();
    let fwd = forward_core(&layout, &params, groups, None, &images, &tasks, true);
    let trace = fwd.trace.expect("trace requested");
    let b = batch.len();
    let bf: S = s(b as f64);

    let mut loss = S::zero();
    let mut dlogit = vec![S::zero(); b];
    for (e, ex) in batch.iter().enumerate() {
        let z = fwd.logits[e];
        let l = bce(z, ex.label);
        if !l.is_finite() {
            return Err(Error::NonFinite { index: e });
        }
        loss = loss + l;
        let y = if ex.label { S::one() } else { S::zero() };
        dlogit[e] = (sigmoid(z) - y) / bf;
    }
    loss = loss / bf;

    let mut grads = vec![vec![S::zero(); layout.n_params]; if pooled { 1 } else { sets.len() }];
    let acc = |gi: usize| if pooled { 0 } else { gi };

    // fully connected stack, last layer first
    let mut dact = dlogit;
    for j in (0..layout.fc.len()).rev() {
        let f = layout.fc[j];
        let width_in = if j == 0 { layout.features } else { f.nin };
        let input = &trace.fc_in[j];
        let dpre: Vec<S> = if j + 1 == layout.fc.len() {
            dact
        } else {
            dact.iter()
                .zip(&trace.fc_pre[j])
                .map(|(&d, &p)| if p > S::zero() { d } else { S::zero() })
                .collect()
        };
        let mut din = vec![S::zero(); b * width_in];
        for e in 0..b {
            let (gi, p) = (groups[e], &params[groups[e]]);
            let a = &input[e * width_in..(e + 1) * width_in];
            let de = &mut din[e * width_in..(e + 1) * width_in];
            let gr = &mut grads[acc(gi)];
            for k in 0..f.nout {
                let d = dpre[e * f.nout + k];
                if d == S::zero() {
                    continue;
                }
                gr[f.bias + k] = gr[f.bias + k] + d;
                let row = f.weight + k * f.nin;
                for i in 0..width_in {
                    gr[row + i] = gr[row + i] + d * a[i];
                    de[i] = de[i] + d * p[row + i];
                }
                if j == 0 {
                    let t = row + layout.features + tasks[e];
                    gr[t] = gr[t] + d;
                }
            }
        }
        dact = din;
    }

    // conv blocks, last first; dact holds the gradient of the pooled output
    for (l, g) in layout.conv.iter().enumerate().rev() {
        let cache = &trace.conv[l];
        let plane = g.h * g.w;
        let out_len = g.cout * plane;
        let pooled_len = g.cout * g.ho * g.wo;
        let n: S = s((b * plane) as f64);

        let mut dy = vec![S::zero(); b * out_len];
        for e in 0..b {
            for c in 0..g.cout {
                for q in 0..g.ho * g.wo {
                    let o = e * pooled_len + c * g.ho * g.wo + q;
                    let at = e * out_len + c * plane + cache.argmax[o] as usize;
                    dy[at] = dy[at] + dact[o];
                }
            }
        }

        let mut dz = vec![S::zero(); b * out_len];
        for c in 0..g.cout {
            let mut s1 = 0.0f64;
            let mut s2 = 0.0f64;
            for e in 0..b {
                let gi = groups[e];
                let gam = params[gi][g.gamma + c];
                let o = e * out_len + c * plane;
                let mut dgam = S::zero();
                let mut dbet = S::zero();
                for i in o..o + plane {
                    let d = dy[i];
                    dgam = dgam + d * cache.xhat[i];
                    dbet = dbet + d;
                }
                s1 += wide(dbet * gam);
                s2 += wide(dgam * gam);
                grads[acc(gi)][g.gamma + c] = grads[acc(gi)][g.gamma + c] + dgam;
                grads[acc(gi)][g.beta + c] = grads[acc(gi)][g.beta + c] + dbet;
            }
            let (m1, m2): (S, S) = (s(s1 / wide(n)), s(s2 / wide(n)));
            let is = cache.inv_std[c];
            for e in 0..b {
                let gam = params[groups[e]][g.gamma + c];
                let o = e * out_len + c * plane;
                for i in o..o + plane {
                    if cache.z[i] > S::zero() {
                        dz[i] = is * (dy[i] * gam - m1 - cache.xhat[i] * m2);
                    }
                }
            }
        }

        let in_len = g.cin * plane;
        let mut dx = if l > 0 { vec![S::zero(); b * in_len] } else { Vec::new() };
        for e in 0..b {
            let gi = groups[e];
            let dze = &dz[e * out_len..(e + 1) * out_len];
            let gr = &mut grads[acc(gi)];
            for c in 0..g.cout {
                let sum: S = dze[c * plane..(c + 1) * plane].iter().copied().sum();
                gr[g.bias + c] = gr[g.bias + c] + sum;
                if let Some((ml, tm)) = layout.task_mod {
                    if ml == l {
                        let at = tm + tasks[e] * g.cout + c;
                        gr[at] = gr[at] + sum;
                    }
                }
            }
            let wlen = g.cout * g.cin * 9;
            conv_backward_weight(
                &cache.input[e * in_len..(e + 1) * in_len],
                g.cin,
                g.h,
                g.w,
                dze,
                g.cout,
                &mut gr[g.weight..g.weight + wlen],
            );
            if l > 0 {
                conv_backward_input(
                    dze,
                    g.cout,
                    g.h,
                    g.w,
                    &params[gi][g.weight..g.weight + wlen],
                    g.cin,
                    &mut dx[e * in_len..(e + 1) * in_len],
                );
            }
        }
        dact = dx;
    }

    Ok((loss, grads, fwd.stats.expect("train-mode statistics")))
}
