use rand::Rng;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Inputs for a batch of variable-length sequences run in lock-step.
///
/// Sequences are left-padded to a common length `steps`. Row `t * batch + i`
/// of the stacked input holds step `t` of sequence `i`; `active[t][i]` is 1
/// once sequence `i` has started. Inactive steps leave the state untouched,
/// so every sequence effectively starts from the zero state at its first
/// real element.
pub struct PaddedSteps {
    pub steps: usize,
    pub batch: usize,
    pub active: Vec<Vec<f64>>,
}

impl PaddedSteps {
    pub fn new(lengths: &[usize]) -> Self {
        let steps = lengths.iter().copied().max().unwrap_or(0);
        let active = (0..steps)
            .map(|t| lengths.iter().map(|&n| if t + n >= steps { 1.0 } else { 0.0 }).collect())
            .collect();
        Self {
            steps,
            batch: lengths.len(),
            active,
        }
    }

    /// Step at which element `j` of a sequence of length `n` is processed.
    pub fn step_of(&self, n: usize, j: usize) -> usize {
        self.steps - n + j
    }

    /// Stacked-row index of element `j` of sequence `i` with length `n`.
    pub fn row_of(&self, i: usize, n: usize, j: usize) -> usize {
        self.step_of(n, j) * self.batch + i
    }

    fn mask(&self, g: &mut Graph, t: usize) -> Var {
        g.constant(Tensor::column(self.active[t].clone()))
    }
}

/// `h + m * (new - h)` with `m` a 0/1 column.
fn masked_update(g: &mut Graph, h: Var, new: Var, m: Var) -> Result<Var> {
    let delta = g.sub(new, h)?;
    let delta = g.mul_col(delta, m)?;
    g.add(h, delta)
}

/// Gated recurrent unit: `z, r = sigmoid(..)`,
/// `n = tanh(x Wn + (r * h) Un + bn)`, `h' = z * h + (1 - z) * n`.
#[derive(Clone, Debug)]
pub struct Gru {
    pub dim: usize,
    /// Input weights for `[z | r | n]`, `d x 3d`.
    pub wx: ParamId,
    pub u_zr: ParamId,
    pub u_n: ParamId,
    pub b_zr: ParamId,
    pub b_n: ParamId,
}

impl Gru {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let s = cfg.init_scale;
        let mut w = |name: &str, r: usize, c: usize| store.add_uniform(format!("{prefix}.{name}"), r, c, s, rng);
        Ok(Self {
            dim: d,
            wx: w("wx", d, 3 * d)?,
            u_zr: w("u_zr", d, 2 * d)?,
            u_n: w("u_n", d, d)?,
            b_zr: w("b_zr", 1, 2 * d)?,
            b_n: w("b_n", 1, d)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![self.wx, self.u_zr, self.u_n, self.b_zr, self.b_n]
    }

    /// Runs the padded batch; returns the `batch x d` hidden state after each step.
    pub fn forward_padded(&self, g: &mut Graph, x: Var, pad: &PaddedSteps) -> Result<Vec<Var>> {
        let d = self.dim;
        let b = pad.batch;
        let (wx, u_zr, u_n, b_zr, b_n) = (
            g.param(self.wx),
            g.param(self.u_zr),
            g.param(self.u_n),
            g.param(self.b_zr),
            g.param(self.b_n),
        );
        let xw = g.matmul(x, wx)?;
        let mut h = g.constant(Tensor::zeros(b, d));
        let mut out = Vec::with_capacity(pad.steps);
        for t in 0..pad.steps {
            let xt = g.slice_rows(xw, t * b, b)?;
            let x_zr = g.slice_cols(xt, 0, 2 * d)?;
            let x_n = g.slice_cols(xt, 2 * d, d)?;
            let hu = g.matmul(h, u_zr)?;
            let zr = g.add(x_zr, hu)?;
            let zr = g.add_row(zr, b_zr)?;
            let zr = g.sigmoid(zr);
            let z = g.slice_cols(zr, 0, d)?;
            let r = g.slice_cols(zr, d, d)?;
            let rh = g.mul(r, h)?;
            let rhu = g.matmul(rh, u_n)?;
            let n = g.add(x_n, rhu)?;
            let n = g.add_row(n, b_n)?;
            let n = g.tanh(n);
            // z * h + (1 - z) * n = n + z * (h - n)
            let hn = g.sub(h, n)?;
            let zhn = g.mul(z, hn)?;
            let next = g.add(n, zhn)?;
            let m = pad.mask(g, t);
            h = masked_update(g, h, next, m)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Hidden states of the GRU over one sequence (`n x d` in, `n x d` out),
/// starting from the zero state.
pub fn gru_forward(g: &mut Graph, gru: &Gru, inputs: Var) -> Result<Var> {
    let n = g.shape(inputs)[0];
    if n == 0 {
        return Err(Error::Empty("gru_forward over an empty sequence".into()));
    }
    let pad = PaddedSteps::new(&[n]);
    let states = gru.forward_padded(g, inputs, &pad)?;
    g.concat_rows(&states)
}

/// LSTM with two time gates.
///
/// With `[i, f, g, o]` the usual gates computed from `x W + h U + b`:
///
/// ```text
/// T1 = sigmoid(x Wt1 + ln(1 + dt_prev)   * vt1 + bt1)
/// T2 = sigmoid(x Wt2 + ln(1 + dt_target) * vt2 + bt2)
/// c~ = f * c + i * T1 * g        h = o * tanh(c~)
/// c' = f * c + i * T2 * g
/// ```
///
/// `dt_prev` is the gap in seconds to the previous event (0 for the first)
/// and `dt_target` the gap to the prediction time. With both gates at 1 this
/// is a standard LSTM.
#[derive(Clone, Debug)]
pub struct Time4Lstm {
    pub dim: usize,
    /// `d x 4d` input weights for `[i | f | g | o]`.
    pub wx: ParamId,
    pub u: ParamId,
    pub b: ParamId,
    pub wt1: ParamId,
    pub vt1: ParamId,
    pub bt1: ParamId,
    pub wt2: ParamId,
    pub vt2: ParamId,
    pub bt2: ParamId,
}

/// Per-step log-scaled time features of one sequence.
pub fn time_features(timestamps: &[i64], target_time: i64) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut prev_gap = Vec::with_capacity(timestamps.len());
    let mut target_gap = Vec::with_capacity(timestamps.len());
    for (j, &t) in timestamps.iter().enumerate() {
        let dp = if j == 0 { 0 } else { t - timestamps[j - 1] };
        let dt = target_time - t;
        if dp < 0 || dt < 0 {
            return Err(Error::Invalid(format!("timestamps not monotone at position {j}")));
        }
        prev_gap.push((dp as f64).ln_1p());
        target_gap.push((dt as f64).ln_1p());
    }
    Ok((prev_gap, target_gap))
}

impl Time4Lstm {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let s = cfg.init_scale;
        let mut w = |name: &str, r: usize, c: usize| store.add_uniform(format!("{prefix}.{name}"), r, c, s, rng);
        Ok(Self {
            dim: d,
            wx: w("wx", d, 4 * d)?,
            u: w("u", d, 4 * d)?,
            b: w("b", 1, 4 * d)?,
            wt1: w("wt1", d, d)?,
            vt1: w("vt1", 1, d)?,
            bt1: w("bt1", 1, d)?,
            wt2: w("wt2", d, d)?,
            vt2: w("vt2", 1, d)?,
            bt2: w("bt2", 1, d)?,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        vec![
            self.wx, self.u, self.b, self.wt1, self.vt1, self.bt1, self.wt2, self.vt2, self.bt2,
        ]
    }

    fn time_gate(&self, g: &mut Graph, x: Var, feature: Vec<f64>, w: ParamId, v: ParamId, b: ParamId) -> Result<Var> {
        let n = feature.len();
        let (w, v, b) = (g.param(w), g.param(v), g.param(b));
        let xw = g.matmul(x, w)?;
        let vb = g.broadcast_rows(v, n)?;
        let f = g.constant(Tensor::column(feature));
        let tv = g.mul_col(vb, f)?;
        let pre = g.add(xw, tv)?;
        let pre = g.add_row(pre, b)?;
        Ok(g.sigmoid(pre))
    }

    /// Runs the padded batch. `prev_gap` and `target_gap` are the log-scaled
    /// features in stacked-row order. Returns `h` after each step.
    pub fn forward_padded(
        &self,
        g: &mut Graph,
        x: Var,
        prev_gap: Vec<f64>,
        target_gap: Vec<f64>,
        pad: &PaddedSteps,
    ) -> Result<Vec<Var>> {
        let d = self.dim;
        let bsz = pad.batch;
        let t1_all = self.time_gate(g, x, prev_gap, self.wt1, self.vt1, self.bt1)?;
        let t2_all = self.time_gate(g, x, target_gap, self.wt2, self.vt2, self.bt2)?;
        let (wx, u, b) = (g.param(self.wx), g.param(self.u), g.param(self.b));
        let xw = g.matmul(x, wx)?;
        let mut h = g.constant(Tensor::zeros(bsz, d));
        let mut c = h;
        let mut out = Vec::with_capacity(pad.steps);
        for t in 0..pad.steps {
            let xt = g.slice_rows(xw, t * bsz, bsz)?;
            let hu = g.matmul(h, u)?;
            let pre = g.add(xt, hu)?;
            let pre = g.add_row(pre, b)?;
            let i = g.slice_cols(pre, 0, d)?;
            let i = g.sigmoid(i);
            let f = g.slice_cols(pre, d, d)?;
            let f = g.sigmoid(f);
            let gg = g.slice_cols(pre, 2 * d, d)?;
            let gg = g.tanh(gg);
            let o = g.slice_cols(pre, 3 * d, d)?;
            let o = g.sigmoid(o);
            let t1 = g.slice_rows(t1_all, t * bsz, bsz)?;
            let t2 = g.slice_rows(t2_all, t * bsz, bsz)?;
            let fc = g.mul(f, c)?;
            let ig = g.mul(i, gg)?;
            let ig1 = g.mul(ig, t1)?;
            let ig2 = g.mul(ig, t2)?;
            let c_read = g.add(fc, ig1)?;
            let c_next = g.add(fc, ig2)?;
            let tc = g.tanh(c_read);
            let h_next = g.mul(o, tc)?;
            let m = pad.mask(g, t);
            h = masked_update(g, h, h_next, m)?;
            c = masked_update(g, c, c_next, m)?;
            out.push(h);
        }
        Ok(out)
    }
}

/// Hidden states over one event sequence (`n x d` inputs with their
/// timestamps), predicting at `target_time`.
pub fn time4lstm_forward(g: &mut Graph, lstm: &Time4Lstm, inputs: Var, timestamps: &[i64], target_time: i64) -> Result<Var> {
    let n = g.shape(inputs)[0];
    if n == 0 {
        return Err(Error::Empty("time4lstm_forward over an empty sequence".into()));
    }
    if timestamps.len() != n {
        return Err(Error::Shape {
            op: "time4lstm_forward",
            left: g.shape(inputs),
            right: [timestamps.len(), 1],
        });
    }
    let (prev, target) = time_features(timestamps, target_time)?;
    let pad = PaddedSteps::new(&[n]);
    let states = lstm.forward_padded(g, inputs, prev, target, &pad)?;
    g.concat_rows(&states)
}
