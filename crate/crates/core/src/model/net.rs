use ndarray::{Array1, Array2, Axis, Zip};
use rand::Rng;

use super::{
    LayerNormParams, ModelConfig, ModelError, ModelParams, Result, TemporalMode, LN_EPS,
    PROB_FLOOR,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone)]
struct NormCache {
    xhat: Array2<f64>,
    inv_std: Array1<f64>,
}

#[derive(Debug, Clone)]
struct AttentionCache {
    u: Array2<f64>,
    norm: NormCache,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    weights: Array2<f64>,
    mixed: Array2<f64>,
}

/// Output of a forward pass plus everything backprop needs.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `T x C` class probabilities.
    pub probs: Array2<f64>,
    pub mode: Mode,
    x: Array2<f64>,
    enc_pre: Array2<f64>,
    attention: Option<AttentionCache>,
    ctx: Array2<f64>,
    norm1: NormCache,
    n1: Array2<f64>,
    mask1: Option<Array2<f64>>,
    d1: Array2<f64>,
    norm2: NormCache,
    n2: Array2<f64>,
    mask2: Option<Array2<f64>>,
    d2: Array2<f64>,
}

impl ForwardTrace {
    pub fn len(&self) -> usize {
        self.probs.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.nrows() == 0
    }

    /// Per-frame weighted cross-entropy against `labels`.
    pub fn frame_losses(&self, labels: &[usize], alpha: &[f64]) -> Result<Vec<f64>> {
        if labels.len() != self.len() {
            return Err(ModelError::Shape(format!(
                "{} labels for {} frames",
                labels.len(),
                self.len()
            )));
        }
        labels
            .iter()
            .enumerate()
            .map(|(t, &y)| {
                let row = self.probs.row(t);
                super::weighted_ce(row.as_slice().expect("row-major"), y, alpha)
            })
            .collect()
    }
}

/// Sinusoidal encoding, `T x dim`.
pub fn positional_encoding(len: usize, dim: usize) -> Array2<f64> {
    Array2::from_shape_fn((len, dim), |(t, j)| {
        let i = (j / 2) as f64;
        let angle = t as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

fn relu(x: &Array2<f64>) -> Array2<f64> {
    x.mapv(|v| v.max(0.0))
}

fn layer_norm(x: &Array2<f64>, p: &LayerNormParams) -> (Array2<f64>, NormCache) {
    let n = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        row.mapv_inplace(|v| (v - mean) * *inv);
    }
    let out = &xhat * &p.gain + &p.bias;
    (out, NormCache { xhat, inv_std })
}

fn layer_norm_backward(
    g_out: &Array2<f64>,
    cache: &NormCache,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    grad.gain += &(g_out * &cache.xhat).sum_axis(Axis(0));
    grad.bias += &g_out.sum_axis(Axis(0));
    let g_xhat = g_out * &p.gain;
    let n = g_out.ncols() as f64;
    let mut g_in = Array2::zeros(g_out.raw_dim());
    for t in 0..g_out.nrows() {
        let gx = g_xhat.row(t);
        let xh = cache.xhat.row(t);
        let mean_g = gx.sum() / n;
        let mean_gx = gx.dot(&xh) / n;
        let inv = cache.inv_std[t];
        Zip::from(g_in.row_mut(t))
            .and(&gx)
            .and(&xh)
            .for_each(|o, &g, &x| *o = inv * (g - mean_g - x * mean_gx));
    }
    g_in
}

fn softmax_rows(z: &mut Array2<f64>) {
    for mut row in z.rows_mut() {
        let max = row.fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

fn dropout_mask<R: Rng>(rows: usize, cols: usize, rate: f64, rng: &mut R) -> Array2<f64> {
    let keep = 1.0 / (1.0 - rate);
    Array2::from_shape_simple_fn((rows, cols), || if rng.gen::<f64>() < rate { 0.0 } else { keep })
}

fn check_input(cfg: &ModelConfig, frames: &Array2<f64>) -> Result<()> {
    if frames.ncols() != cfg.feature_dim {
        return Err(ModelError::Shape(format!(
            "frames have {} columns, model expects {}",
            frames.ncols(),
            cfg.feature_dim
        )));
    }
    if frames.nrows() == 0 {
        return Err(ModelError::Shape("sequence has no frames".into()));
    }
    if frames.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::Numeric("non-finite input feature".into()));
    }
    Ok(())
}

/// Runs the network over a whole sequence. `rng` drives dropout and is left
/// untouched in eval mode.
pub fn forward<R: Rng>(
    params: &ModelParams,
    cfg: &ModelConfig,
    frames: &Array2<f64>,
    mode: Mode,
    rng: &mut R,
) -> Result<ForwardTrace> {
    check_input(cfg, frames)?;
    let t_len = frames.nrows();

    let enc_pre = frames.dot(&params.enc_w.t()) + &params.enc_b;
    let h = relu(&enc_pre);

    let (ctx, attention) = match (cfg.temporal_mode, &params.attention) {
        (TemporalMode::ContextFree, _) => (h, None),
        (TemporalMode::Attention, None) => {
            return Err(ModelError::Shape("attention mode without attention params".into()))
        }
        (TemporalMode::Attention, Some(ap)) => {
            let g = h + positional_encoding(t_len, cfg.hidden_dim);
            let (u, norm) = layer_norm(&g, &ap.norm);
            let q = u.dot(&ap.query.t());
            let k = u.dot(&ap.key.t());
            let v = u.dot(&ap.value.t());
            let scale = 1.0 / (cfg.attention_dim as f64).sqrt();
            let mut weights = q.dot(&k.t()) * scale;
            softmax_rows(&mut weights);
            let mixed = weights.dot(&v);
            let ctx = &g + &mixed.dot(&ap.output.t());
            (
                ctx,
                Some(AttentionCache { u, norm, q, k, v, weights, mixed }),
            )
        }
    };

    let z1 = ctx.dot(&params.w1.t()) + &params.b1;
    let (n1, norm1) = layer_norm(&z1, &params.ln1);
    let r1 = relu(&n1);
    let mask1 = (mode == Mode::Train && cfg.dropout_rates.0 > 0.0)
        .then(|| dropout_mask(t_len, cfg.head_dims.0, cfg.dropout_rates.0, rng));
    let d1 = match &mask1 {
        Some(m) => &r1 * m,
        None => r1,
    };

    let z2 = d1.dot(&params.w2.t()) + &params.b2;
    let (n2, norm2) = layer_norm(&z2, &params.ln2);
    let r2 = relu(&n2);
    let mask2 = (mode == Mode::Train && cfg.dropout_rates.1 > 0.0)
        .then(|| dropout_mask(t_len, cfg.head_dims.1, cfg.dropout_rates.1, rng));
    let d2 = match &mask2 {
        Some(m) => &r2 * m,
        None => r2,
    };

    let mut probs = d2.dot(&params.w3.t()) + &params.b3;
    softmax_rows(&mut probs);
    if probs.iter().any(|p| !p.is_finite()) {
        return Err(ModelError::Numeric("non-finite class probability".into()));
    }

    Ok(ForwardTrace {
        probs,
        mode,
        x: frames.clone(),
        enc_pre,
        attention,
        ctx,
        norm1,
        n1,
        mask1,
        d1,
        norm2,
        n2,
        mask2,
        d2,
    })
}

/// Eval-mode forward; consumes no randomness.
pub fn forward_eval(params: &ModelParams, cfg: &ModelConfig, frames: &Array2<f64>) -> Result<ForwardTrace> {
    forward(params, cfg, frames, Mode::Eval, &mut rand::rngs::mock::StepRng::new(0, 0))
}

fn relu_grad(g: &mut Array2<f64>, pre: &Array2<f64>) {
    Zip::from(g).and(pre).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
}

/// Mean weighted cross-entropy of `trace` and its exact gradient with respect
/// to every parameter.
pub fn backward(
    params: &ModelParams,
    trace: &ForwardTrace,
    labels: &[usize],
    alpha: &[f64],
) -> Result<(f64, ModelParams)> {
    let t_len = trace.len();
    let losses = trace.frame_losses(labels, alpha)?;
    let loss = losses.iter().sum::<f64>() / t_len as f64;

    let mut grad = params.zeros_like();

    // dL/dz = alpha_y / T * (p - onehot(y)); zero where the probability floor is active
    let mut g_z = trace.probs.clone();
    for (t, (mut row, &y)) in g_z.rows_mut().into_iter().zip(labels).enumerate() {
        if trace.probs[[t, y]] < PROB_FLOOR {
            row.fill(0.0);
            continue;
        }
        row[y] -= 1.0;
        row *= alpha[y] / t_len as f64;
    }

    grad.w3 = g_z.t().dot(&trace.d2);
    grad.b3 = g_z.sum_axis(Axis(0));
    let mut g = g_z.dot(&params.w3);
    if let Some(m) = &trace.mask2 {
        g *= m;
    }
    relu_grad(&mut g, &trace.n2);
    let g_z2 = layer_norm_backward(&g, &trace.norm2, &params.ln2, &mut grad.ln2);

    grad.w2 = g_z2.t().dot(&trace.d1);
    grad.b2 = g_z2.sum_axis(Axis(0));
    let mut g = g_z2.dot(&params.w2);
    if let Some(m) = &trace.mask1 {
        g *= m;
    }
    relu_grad(&mut g, &trace.n1);
    let g_z1 = layer_norm_backward(&g, &trace.norm1, &params.ln1, &mut grad.ln1);

    grad.w1 = g_z1.t().dot(&trace.ctx);
    grad.b1 = g_z1.sum_axis(Axis(0));
    let g_ctx = g_z1.dot(&params.w1);

    let mut g_h = match (&trace.attention, &params.attention, &mut grad.attention) {
        (Some(c), Some(ap), Some(ga)) => {
            ga.output = g_ctx.t().dot(&c.mixed);
            let g_mixed = g_ctx.dot(&ap.output);
            let g_weights = g_mixed.dot(&c.v.t());
            let g_v = c.weights.t().dot(&g_mixed);
            // softmax rows: dS = P * (dP - rowsum(dP * P))
            let row_dot = (&g_weights * &c.weights).sum_axis(Axis(1));
            let scale = 1.0 / (c.q.ncols() as f64).sqrt();
            let g_scores = (&g_weights - &row_dot.insert_axis(Axis(1))) * &c.weights * scale;
            let g_q = g_scores.dot(&c.k);
            let g_k = g_scores.t().dot(&c.q);
            ga.query = g_q.t().dot(&c.u);
            ga.key = g_k.t().dot(&c.u);
            ga.value = g_v.t().dot(&c.u);
            let g_u = g_q.dot(&ap.query) + g_k.dot(&ap.key) + g_v.dot(&ap.value);
            g_ctx + layer_norm_backward(&g_u, &c.norm, &ap.norm, &mut ga.norm)
        }
        (None, _, _) => g_ctx,
        _ => return Err(ModelError::Shape("attention cache and params disagree".into())),
    };

    relu_grad(&mut g_h, &trace.enc_pre);
    grad.enc_w = g_h.t().dot(&trace.x);
    grad.enc_b = g_h.sum_axis(Axis(0));

    Ok((loss, grad))
}

/// Forward followed by backward with the same dropout draw.
pub fn loss_and_grad<R: Rng>(
    params: &ModelParams,
    cfg: &ModelConfig,
    frames: &Array2<f64>,
    labels: &[usize],
    alpha: &[f64],
    mode: Mode,
    rng: &mut R,
) -> Result<(f64, ModelParams)> {
    if labels.len() != frames.nrows() {
        return Err(ModelError::Shape(format!(
            "{} labels for {} frames",
            labels.len(),
            frames.nrows()
        )));
    }
    if alpha.len() != cfg.num_classes {
        return Err(ModelError::Shape(format!(
            "{} class weights for {} classes",
            alpha.len(),
            cfg.num_classes
        )));
    }
    let trace = forward(params, cfg, frames, mode, rng)?;
    backward(params, &trace, labels, alpha)
}
