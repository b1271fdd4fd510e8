//! Forward pass, backpropagation through time and single-step inference.

use super::{GradientVector, LmParams};
use crate::tokenizer::{TokenId, TokenSeq};
use crate::{Error, Result};

/// Dot product with four independent accumulators.
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        acc[0] += x[0] * y[0];
        acc[1] += x[1] * y[1];
        acc[2] += x[2] * y[2];
        acc[3] += x[3] * y[3];
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for (x, y) in ra.iter().zip(rb) {
        s += x * y;
    }
    s
}

#[inline]
fn axpy(y: &mut [f64], a: f64, x: &[f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// In-place log-softmax; returns nothing, `row` holds log-probabilities.
pub(crate) fn log_softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    for x in row.iter_mut() {
        *x -= lse;
    }
}

/// One LSTM cell step. `z` is `[x; h_prev]`; writes activated gates and the
/// new cell/hidden state.
#[allow(clippy::too_many_arguments)]
#[inline]
fn cell(
    w: &[f64],
    b: &[f64],
    z: &[f64],
    h_dim: usize,
    c_prev: &[f64],
    gates: &mut [f64],
    c: &mut [f64],
    tanh_c: &mut [f64],
    h: &mut [f64],
) {
    let zl = z.len();
    for r in 0..4 * h_dim {
        gates[r] = dot(&w[r * zl..(r + 1) * zl], z) + b[r];
    }
    for j in 0..h_dim {
        let i = sigmoid(gates[j]);
        let f = sigmoid(gates[h_dim + j]);
        let g = gates[2 * h_dim + j].tanh();
        let o = sigmoid(gates[3 * h_dim + j]);
        gates[j] = i;
        gates[h_dim + j] = f;
        gates[2 * h_dim + j] = g;
        gates[3 * h_dim + j] = o;
        c[j] = f * c_prev[j] + i * g;
        tanh_c[j] = c[j].tanh();
        h[j] = o * tanh_c[j];
    }
}

struct LayerTrace {
    z: Vec<f64>,
    gates: Vec<f64>,
    /// `steps + 1` rows; row 0 is the zero initial state.
    c: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Activations for one sequence; `log_probs` row `k` predicts token `k + 1`.
struct Trace {
    steps: usize,
    layers: Vec<LayerTrace>,
    u: Vec<f64>,
    log_probs: Vec<f64>,
}

fn check_seq(params: &LmParams, ids: &[TokenId]) -> Result<()> {
    let cfg = params.config();
    if ids.len() < 2 {
        return Err(Error::InvalidArgument(
            "a sequence needs at least BOS and one target".into(),
        ));
    }
    if ids.len() > cfg.max_seq_len {
        return Err(Error::SequenceTooLong {
            len: ids.len(),
            max: cfg.max_seq_len,
        });
    }
    if let Some(&id) = ids.iter().find(|&&id| id as usize >= cfg.vocab_size) {
        return Err(Error::TokenOutOfRange {
            id,
            vocab_size: cfg.vocab_size,
        });
    }
    Ok(())
}

fn run(params: &LmParams, ids: &[TokenId]) -> Trace {
    let cfg = *params.config();
    let (v, e, hd) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
    let steps = ids.len() - 1;
    let data = params.as_slice();
    let emb = params.embedding();

    let mut layers: Vec<LayerTrace> = Vec::with_capacity(cfg.num_layers);
    for (l, ll) in params.layout.layers.iter().enumerate() {
        let zl = ll.in_dim + hd;
        let mut t = LayerTrace {
            z: vec![0.0; steps * zl],
            gates: vec![0.0; steps * 4 * hd],
            c: vec![0.0; (steps + 1) * hd],
            tanh_c: vec![0.0; steps * hd],
            h: vec![0.0; (steps + 1) * hd],
        };
        let w = &data[ll.w.clone()];
        let b = &data[ll.b.clone()];
        for k in 0..steps {
            let z = &mut t.z[k * zl..(k + 1) * zl];
            if l == 0 {
                let tok = ids[k] as usize;
                z[..e].copy_from_slice(&emb[tok * e..(tok + 1) * e]);
            } else {
                z[..hd].copy_from_slice(&layers[l - 1].h[(k + 1) * hd..(k + 2) * hd]);
            }
            z[ll.in_dim..].copy_from_slice(&t.h[k * hd..(k + 1) * hd]);
            let (c_prev, c_next) = t.c.split_at_mut((k + 1) * hd);
            let (_, h_next) = t.h.split_at_mut((k + 1) * hd);
            cell(
                w,
                b,
                &t.z[k * zl..(k + 1) * zl],
                hd,
                &c_prev[k * hd..],
                &mut t.gates[k * 4 * hd..(k + 1) * 4 * hd],
                &mut c_next[..hd],
                &mut t.tanh_c[k * hd..(k + 1) * hd],
                &mut h_next[..hd],
            );
        }
        layers.push(t);
    }

    let proj = &data[params.layout.proj.clone()];
    let bias = params.output_bias();
    let top = layers.last().expect("at least one layer");
    let mut u = vec![0.0; steps * e];
    let mut log_probs = vec![0.0; steps * v];
    for k in 0..steps {
        let h = &top.h[(k + 1) * hd..(k + 2) * hd];
        let uk = &mut u[k * e..(k + 1) * e];
        for (r, ur) in uk.iter_mut().enumerate() {
            *ur = dot(&proj[r * hd..(r + 1) * hd], h);
        }
        let row = &mut log_probs[k * v..(k + 1) * v];
        for (tok, x) in row.iter_mut().enumerate() {
            *x = dot(&emb[tok * e..(tok + 1) * e], uk) + bias[tok];
        }
        log_softmax_in_place(row);
    }
    Trace {
        steps,
        layers,
        u,
        log_probs,
    }
}

/// Total negative log-likelihood (nats) of tokens 2..n given their prefixes,
/// plus the log-probability of each target.
pub fn forward_nll(params: &LmParams, seq: &TokenSeq) -> Result<(f64, Vec<f64>)> {
    let ids = seq.ids();
    check_seq(params, ids)?;
    let tr = run(params, ids);
    let v = params.config().vocab_size;
    let per: Vec<f64> = (0..tr.steps)
        .map(|k| tr.log_probs[k * v + ids[k + 1] as usize])
        .collect();
    Ok((-per.iter().sum::<f64>(), per))
}

/// Full next-token log-distribution at every position: row `k` (length
/// `vocab_size`) conditions on tokens `0..=k`.
pub fn forward_log_probs(params: &LmParams, seq: &TokenSeq) -> Result<Vec<f64>> {
    check_seq(params, seq.ids())?;
    Ok(run(params, seq.ids()).log_probs)
}

/// Gradient of the mean sequence NLL over `batch`.
pub fn backward(params: &LmParams, batch: &[TokenSeq]) -> Result<GradientVector> {
    loss_and_gradient(params, batch).map(|(_, g)| g)
}

/// Mean sequence NLL over `batch` and its exact gradient.
pub fn loss_and_gradient(params: &LmParams, batch: &[TokenSeq]) -> Result<(f64, GradientVector)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    for s in batch {
        check_seq(params, s.ids())?;
    }
    let scale = 1.0 / batch.len() as f64;
    let mut grad = vec![0.0; params.num_params()];
    let mut loss = 0.0;
    for s in batch {
        loss += accumulate(params, s.ids(), scale, &mut grad);
    }
    Ok((loss * scale, GradientVector::from_vec(grad)))
}

/// Adds `scale · ∇NLL(ids)` into `grad` and returns the NLL.
fn accumulate(params: &LmParams, ids: &[TokenId], scale: f64, grad: &mut [f64]) -> f64 {
    let cfg = *params.config();
    let (v, e, hd) = (cfg.vocab_size, cfg.embed_dim, cfg.hidden_dim);
    let tr = run(params, ids);
    let steps = tr.steps;
    let data = params.as_slice();
    let layout = &params.layout;
    let emb = params.embedding();
    let proj = &data[layout.proj.clone()];

    let (g_emb, rest) = grad.split_at_mut(layout.embedding.end);
    let (g_core, g_bias) = rest.split_at_mut(layout.out_bias.start - layout.embedding.end);
    let core_off = layout.embedding.end;
    let proj_local = layout.proj.start - core_off..layout.proj.end - core_off;

    let mut nll = 0.0;
    // dL/dh of the top layer for every step.
    let mut dh_top = vec![0.0; steps * hd];
    let mut dz = vec![0.0; v];
    let mut du = vec![0.0; e];
    for k in 0..steps {
        let target = ids[k + 1] as usize;
        let row = &tr.log_probs[k * v..(k + 1) * v];
        nll -= row[target];
        for (d, &lp) in dz.iter_mut().zip(row) {
            *d = scale * lp.exp();
        }
        dz[target] -= scale;
        let uk = &tr.u[k * e..(k + 1) * e];
        du.iter_mut().for_each(|x| *x = 0.0);
        for tok in 0..v {
            let d = dz[tok];
            g_bias[tok] += d;
            axpy(&mut g_emb[tok * e..(tok + 1) * e], d, uk);
            axpy(&mut du, d, &emb[tok * e..(tok + 1) * e]);
        }
        let h = &tr.layers[cfg.num_layers - 1].h[(k + 1) * hd..(k + 2) * hd];
        let g_proj = &mut g_core[proj_local.clone()];
        let dhk = &mut dh_top[k * hd..(k + 1) * hd];
        for r in 0..e {
            axpy(&mut g_proj[r * hd..(r + 1) * hd], du[r], h);
            axpy(dhk, du[r], &proj[r * hd..(r + 1) * hd]);
        }
    }

    // Backpropagate through layers (top first) and time (last step first).
    let mut dh_from_above = dh_top;
    for l in (0..cfg.num_layers).rev() {
        let ll = &layout.layers[l];
        let zl = ll.in_dim + hd;
        let w = &data[ll.w.clone()];
        let t = &tr.layers[l];
        let w_local = ll.w.start - core_off..ll.w.end - core_off;
        let b_local = ll.b.start - core_off..ll.b.end - core_off;
        let mut dx_below = vec![0.0; steps * ll.in_dim];
        let mut dh_rec = vec![0.0; hd];
        let mut dc_rec = vec![0.0; hd];
        let mut da = vec![0.0; 4 * hd];
        let mut dzv = vec![0.0; zl];
        for k in (0..steps).rev() {
            let gates = &t.gates[k * 4 * hd..(k + 1) * 4 * hd];
            let c_prev = &t.c[k * hd..(k + 1) * hd];
            let tc = &t.tanh_c[k * hd..(k + 1) * hd];
            for j in 0..hd {
                let (i, f, g, o) = (gates[j], gates[hd + j], gates[2 * hd + j], gates[3 * hd + j]);
                let dh = dh_from_above[k * hd + j] + dh_rec[j];
                let dc = dh * o * (1.0 - tc[j] * tc[j]) + dc_rec[j];
                da[j] = dc * g * i * (1.0 - i);
                da[hd + j] = dc * c_prev[j] * f * (1.0 - f);
                da[2 * hd + j] = dc * i * (1.0 - g * g);
                da[3 * hd + j] = dh * tc[j] * o * (1.0 - o);
                dc_rec[j] = dc * f;
            }
            let z = &t.z[k * zl..(k + 1) * zl];
            dzv.iter_mut().for_each(|x| *x = 0.0);
            {
                let g_w = &mut g_core[w_local.clone()];
                for r in 0..4 * hd {
                    let d = da[r];
                    if d != 0.0 {
                        axpy(&mut g_w[r * zl..(r + 1) * zl], d, z);
                        axpy(&mut dzv, d, &w[r * zl..(r + 1) * zl]);
                    }
                }
            }
            let g_b = &mut g_core[b_local.clone()];
            for (gb, d) in g_b.iter_mut().zip(&da) {
                *gb += d;
            }
            dx_below[k * ll.in_dim..(k + 1) * ll.in_dim].copy_from_slice(&dzv[..ll.in_dim]);
            dh_rec.copy_from_slice(&dzv[ll.in_dim..]);
        }
        if l == 0 {
            for k in 0..steps {
                let tok = ids[k] as usize;
                axpy(&mut g_emb[tok * e..(tok + 1) * e], 1.0, &dx_below[k * e..(k + 1) * e]);
            }
        } else {
            dh_from_above = dx_below;
        }
    }
    nll
}

/// Recurrent state for incremental decoding.
#[derive(Debug, Clone)]
pub struct LstmState {
    h: Vec<Vec<f64>>,
    c: Vec<Vec<f64>>,
}

impl LstmState {
    pub fn new(params: &LmParams) -> Self {
        let cfg = params.config();
        LstmState {
            h: vec![vec![0.0; cfg.hidden_dim]; cfg.num_layers],
            c: vec![vec![0.0; cfg.hidden_dim]; cfg.num_layers],
        }
    }

    /// Consumes `token` and returns the next-token log-distribution.
    pub fn step(&mut self, params: &LmParams, token: TokenId) -> Result<Vec<f64>> {
        let cfg = *params.config();
        if token as usize >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id: token,
                vocab_size: cfg.vocab_size,
            });
        }
        let (e, hd) = (cfg.embed_dim, cfg.hidden_dim);
        let data = params.as_slice();
        let mut x = params.embedding_row(token as usize).to_vec();
        let mut gates = vec![0.0; 4 * hd];
        let mut tanh_c = vec![0.0; hd];
        for (l, ll) in params.layout.layers.iter().enumerate() {
            let mut z = x.clone();
            z.extend_from_slice(&self.h[l]);
            let c_prev = self.c[l].clone();
            cell(
                &data[ll.w.clone()],
                &data[ll.b.clone()],
                &z,
                hd,
                &c_prev,
                &mut gates,
                &mut self.c[l],
                &mut tanh_c,
                &mut self.h[l],
            );
            x = self.h[l].clone();
        }
        let proj = &data[params.layout.proj.clone()];
        let u: Vec<f64> = (0..e).map(|r| dot(&proj[r * hd..(r + 1) * hd], &x)).collect();
        let bias = params.output_bias();
        let mut logits: Vec<f64> = (0..cfg.vocab_size)
            .map(|tok| dot(params.embedding_row(tok), &u) + bias[tok])
            .collect();
        log_softmax_in_place(&mut logits);
        Ok(logits)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lm::{LmConfig, LmParams};

    fn cfg(vocab: usize, layers: usize) -> LmConfig {
        LmConfig {
            vocab_size: vocab,
            embed_dim: 4,
            hidden_dim: 5,
            num_layers: layers,
            max_seq_len: 12,
        }
    }

    fn seq(ids: &[u32]) -> TokenSeq {
        TokenSeq::from_ids(ids.to_vec())
    }

    #[test]
    fn zero_model_is_uniform() {
        let p = LmParams::zeros(cfg(9, 1)).unwrap();
        let (nll, per) = forward_nll(&p, &seq(&[0, 3, 4, 1])).unwrap();
        assert!((nll - 3.0 * 9f64.ln()).abs() < 1e-12);
        assert_eq!(per.len(), 3);
    }

    #[test]
    fn per_position_terms_sum_to_nll_and_rows_normalize() {
        let p = LmParams::init(cfg(9, 2), 1).unwrap();
        let s = seq(&[0, 5, 2, 7, 1]);
        let (nll, per) = forward_nll(&p, &s).unwrap();
        assert!((nll + per.iter().sum::<f64>()).abs() < 1e-12);
        let lp = forward_log_probs(&p, &s).unwrap();
        for row in lp.chunks(9) {
            let total: f64 = row.iter().map(|x| x.exp()).sum();
            assert!((total - 1.0).abs() < 1e-6);
        }
    }

    /// Hand-rolled forward for a 2-token vocabulary, 1x1 dimensions.
    #[test]
    fn hand_computed_two_token_model() {
        let c = LmConfig {
            vocab_size: 2,
            embed_dim: 1,
            hidden_dim: 1,
            num_layers: 1,
            max_seq_len: 4,
        };
        // embedding [0.5, -1.0]; W rows (i,f,g,o) over [x; h]; b; proj; bias
        let data = vec![
            0.5, -1.0, // embedding
            0.3, 0.1, -0.2, 0.4, 0.7, -0.5, 0.2, 0.6, // W
            0.0, 0.1, -0.1, 0.05, // b
            1.5,  // proj
            0.2, -0.3, // bias
        ];
        let p = LmParams::from_flat(c, data).unwrap();
        let sig = |x: f64| 1.0 / (1.0 + (-x).exp());
        let step = |x: f64, h: f64, cp: f64| {
            let i = sig(0.3 * x + 0.1 * h);
            let f = sig(-0.2 * x + 0.4 * h + 0.1);
            let g = (0.7 * x - 0.5 * h - 0.1).tanh();
            let o = sig(0.2 * x + 0.6 * h + 0.05);
            let c = f * cp + i * g;
            (o * c.tanh(), c)
        };
        let logp = |h: f64, target: usize| {
            let u = 1.5 * h;
            let z = [0.5 * u + 0.2, -u - 0.3];
            let lse = (z[0].exp() + z[1].exp()).ln();
            z[target] - lse
        };
        let (h1, c1) = step(0.5, 0.0, 0.0);
        let (h2, _) = step(-1.0, h1, c1);
        let expected = -(logp(h1, 1) + logp(h2, 0));
        let (nll, _) = forward_nll(&p, &seq(&[0, 1, 0])).unwrap();
        assert!((nll - expected).abs() < 1e-12, "{nll} vs {expected}");
    }

    #[test]
    fn rejects_long_short_and_out_of_range() {
        let p = LmParams::zeros(cfg(5, 1)).unwrap();
        assert!(matches!(
            forward_nll(&p, &seq(&[0; 13])),
            Err(Error::SequenceTooLong { .. })
        ));
        assert!(forward_nll(&p, &seq(&[0])).is_err());
        assert!(forward_nll(&p, &seq(&[0, 7])).is_err());
        assert!(backward(&p, &[]).is_err());
    }

    #[test]
    fn duplicated_batch_has_same_gradient() {
        let p = LmParams::init(cfg(6, 2), 2).unwrap();
        let s = seq(&[0, 2, 3, 1]);
        let g1 = backward(&p, std::slice::from_ref(&s)).unwrap();
        let g2 = backward(&p, &[s.clone(), s]).unwrap();
        for (a, b) in g1.values().iter().zip(g2.values()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        let mut p = LmParams::init(cfg(7, 2), 3).unwrap();
        let batch = [seq(&[0, 3, 6, 2, 1]), seq(&[0, 5, 1])];
        let g = backward(&p, &batch).unwrap();
        let mean_nll =
            |p: &LmParams| batch.iter().map(|s| forward_nll(p, s).unwrap().0).sum::<f64>() / batch.len() as f64;
        let h = 1e-5;
        let mut worst = 0.0f64;
        for i in 0..p.num_params() {
            let x = p.as_slice()[i];
            p.as_mut_slice()[i] = x + h;
            let up = mean_nll(&p);
            p.as_mut_slice()[i] = x - h;
            let down = mean_nll(&p);
            p.as_mut_slice()[i] = x;
            let fd = (up - down) / (2.0 * h);
            let a = g.values()[i];
            worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
        }
        assert!(worst < 1e-4, "{worst}");
    }

    #[test]
    fn incremental_steps_match_full_forward() {
        let p = LmParams::init(cfg(7, 2), 5).unwrap();
        let ids = [0u32, 3, 6, 2, 1];
        let full = forward_log_probs(&p, &seq(&ids)).unwrap();
        let mut st = LstmState::new(&p);
        for (k, &t) in ids[..4].iter().enumerate() {
            let row = st.step(&p, t).unwrap();
            for (a, b) in row.iter().zip(&full[k * 7..(k + 1) * 7]) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
