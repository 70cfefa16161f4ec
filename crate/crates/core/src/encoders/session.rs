use rand::Rng;

use super::{EncoderConfig, Embedder};
use crate::data::Event;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Segment, Tensor, Var};

const LN_EPS: f64 = 1e-5;

/// One post-norm transformer block followed by masked mean pooling.
///
/// Rows of different segments never attend to each other, so a batch of
/// sessions can be encoded on one tape without any cross-session leakage.
#[derive(Clone, Debug)]
pub struct SessionEncoder {
    pub heads: usize,
    pub positions: Option<ParamId>,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub ln1_gain: ParamId,
    pub ln1_bias: ParamId,
    pub ff1: ParamId,
    pub ff1_bias: ParamId,
    pub ff2: ParamId,
    pub ff2_bias: ParamId,
    pub ln2_gain: ParamId,
    pub ln2_bias: ParamId,
}

impl SessionEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim;
        let f = cfg.ffn_mult * d;
        let s = cfg.init_scale;
        let mut w = |name: &str, r: usize, c: usize, rng: &mut R| store.add_uniform(format!("{prefix}.{name}"), r, c, s, rng);
        let positions = if cfg.positions {
            Some(w("pos", cfg.max_positions, d, rng)?)
        } else {
            None
        };
        let wq = w("wq", d, d, rng)?;
        let wk = w("wk", d, d, rng)?;
        let wv = w("wv", d, d, rng)?;
        let wo = w("wo", d, d, rng)?;
        let bo = w("bo", 1, d, rng)?;
        let ff1 = w("ff1", d, f, rng)?;
        let ff1_bias = w("ff1_bias", 1, f, rng)?;
        let ff2 = w("ff2", f, d, rng)?;
        let ff2_bias = w("ff2_bias", 1, d, rng)?;
        let mut fixed = |name: &str, v: f64| store.add(format!("{prefix}.{name}"), Tensor::filled(1, d, v));
        Ok(Self {
            heads: cfg.heads,
            positions,
            wq,
            wk,
            wv,
            wo,
            bo,
            ln1_gain: fixed("ln1_gain", 1.0)?,
            ln1_bias: fixed("ln1_bias", 0.0)?,
            ff1,
            ff1_bias,
            ff2,
            ff2_bias,
            ln2_gain: fixed("ln2_gain", 1.0)?,
            ln2_bias: fixed("ln2_bias", 0.0)?,
        })
    }

    /// Every parameter of the block.
    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![
            self.wq,
            self.wk,
            self.wv,
            self.wo,
            self.bo,
            self.ln1_gain,
            self.ln1_bias,
            self.ff1,
            self.ff1_bias,
            self.ff2,
            self.ff2_bias,
            self.ln2_gain,
            self.ln2_bias,
        ];
        ids.extend(self.positions);
        ids
    }

    fn norm(&self, g: &mut Graph, x: Var, gain: ParamId, bias: ParamId) -> Result<Var> {
        let n = g.layer_norm_rows(x, LN_EPS);
        let gain = g.param(gain);
        let bias = g.param(bias);
        let n = g.mul_row(n, gain)?;
        g.add_row(n, bias)
    }

    /// Per-row block output for `x` (`n x d`). `positions[i]` is the index of
    /// row `i` within its session.
    pub fn block(&self, g: &mut Graph, x: Var, positions: &[usize], segs: &[Segment]) -> Result<Var> {
        let x = match self.positions {
            Some(p) => {
                let pe = g.embedding_lookup(p, positions)?;
                g.add(x, pe)?
            }
            None => x,
        };
        let (wq, wk, wv, wo, bo) = (
            g.param(self.wq),
            g.param(self.wk),
            g.param(self.wv),
            g.param(self.wo),
            g.param(self.bo),
        );
        let q = g.matmul(x, wq)?;
        let k = g.matmul(x, wk)?;
        let v = g.matmul(x, wv)?;
        let a = g.segment_attention(q, k, v, segs, self.heads)?;
        let a = g.matmul(a, wo)?;
        let a = g.add_row(a, bo)?;
        let h = g.add(x, a)?;
        let h = self.norm(g, h, self.ln1_gain, self.ln1_bias)?;
        let (f1, b1, f2, b2) = (
            g.param(self.ff1),
            g.param(self.ff1_bias),
            g.param(self.ff2),
            g.param(self.ff2_bias),
        );
        let f = g.matmul(h, f1)?;
        let f = g.add_row(f, b1)?;
        let f = g.relu(f);
        let f = g.matmul(f, f2)?;
        let f = g.add_row(f, b2)?;
        let out = g.add(h, f)?;
        self.norm(g, out, self.ln2_gain, self.ln2_bias)
    }

    /// Encodes each event slice to one pooled row: `sessions.len() x d`.
    /// Empty slices give a zero row.
    pub fn encode(&self, g: &mut Graph, emb: &Embedder, sessions: &[&[Event]]) -> Result<Var> {
        let packed = PackedSessions::new(sessions);
        if packed.events.is_empty() {
            return Ok(g.constant(Tensor::zeros(sessions.len(), emb.dim())));
        }
        let x = emb.embed(g, &packed.events)?;
        let out = self.block(g, x, &packed.positions, &packed.segs)?;
        g.segment_mean(out, &packed.segs)
    }
}

/// Event slices stacked row-wise with their segment bounds.
pub struct PackedSessions {
    pub events: Vec<Event>,
    pub positions: Vec<usize>,
    pub segs: Vec<Segment>,
}

impl PackedSessions {
    pub fn new(sessions: &[&[Event]]) -> Self {
        let mut events = Vec::new();
        let mut positions = Vec::new();
        let mut segs = Vec::with_capacity(sessions.len());
        for s in sessions {
            segs.push((events.len(), s.len()));
            events.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        Self { events, positions, segs }
    }
}

/// Encodes one session given as an embedded `l x d` matrix with a padding
/// mask (`true` = real event). Padded rows are dropped before the block, so
/// they cannot influence the result. Positions count unmasked rows only.
pub fn sess_enc_forward(g: &mut Graph, enc: &SessionEncoder, x: Var, pad_mask: &[bool]) -> Result<Var> {
    if pad_mask.len() != g.shape(x)[0] {
        return Err(Error::Shape {
            op: "sess_enc_forward",
            left: g.shape(x),
            right: [pad_mask.len(), 1],
        });
    }
    let keep: Vec<usize> = (0..pad_mask.len()).filter(|&i| pad_mask[i]).collect();
    if keep.is_empty() {
        return Err(Error::Empty("every position of the session is masked".into()));
    }
    let rows = g.gather_rows(x, &keep)?;
    let positions: Vec<usize> = (0..keep.len()).collect();
    let segs = [(0, keep.len())];
    let out = enc.block(g, rows, &positions, &segs)?;
    g.segment_mean(out, &segs)
}
