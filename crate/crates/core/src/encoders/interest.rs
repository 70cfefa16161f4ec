use rand::Rng;

use super::recurrent::{time_features, Gru, PaddedSteps, Time4Lstm};
use super::session::SessionEncoder;
use super::{EncoderConfig, Embedder};
use crate::data::Event;
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Segment, Tensor, Var};

/// Target-conditioned pooling `sum_i softmax_i(h_i W v^T) h_i` for a single
/// target row `v` (`1 x d`) over `items` (`n x d`).
pub fn attn_pool(g: &mut Graph, target: Var, items: Var, w: ParamId) -> Result<Var> {
    let n = g.shape(items)[0];
    if n == 0 {
        return Err(Error::Empty("attention pooling over no items".into()));
    }
    let w = g.param(w);
    // h W v^T = h . (v W^T)
    let q = g.matmul_nt(target, w)?;
    g.segment_attn_pool(items, &[(0, n)], q, &[0])
}

/// Long-term outputs for a batch. Row sets `intra` and `inter` are
/// instance-major and share `segs`; pooled rows follow the candidates.
pub struct LongTermOutput {
    pub intra: Var,
    pub inter: Var,
    pub segs: Vec<Segment>,
    pub pooled_intra: Var,
    pub pooled_inter: Var,
    pub long: Var,
}

/// Shared session encoder over historical sessions, a GRU across their
/// pooled representations, and two target-attention pools.
#[derive(Clone, Debug)]
pub struct LongTermEncoder {
    pub encoder: SessionEncoder,
    pub gru: Gru,
    pub att_intra: ParamId,
    pub att_inter: ParamId,
    /// Substitutes the long-term vector when there is no history.
    pub empty: ParamId,
}

impl LongTermEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let d = cfg.dim;
        let encoder = SessionEncoder::new(store, "long.sess", cfg, rng)?;
        let gru = Gru::new(store, "long.gru", cfg, rng)?;
        let att_intra = store.add_uniform("long.att_intra", d, d, cfg.init_scale, rng)?;
        let att_inter = store.add_uniform("long.att_inter", d, d, cfg.init_scale, rng)?;
        let empty = store.add_uniform("long.empty", 1, 2 * d, cfg.init_scale, rng)?;
        Ok(Self {
            encoder,
            gru,
            att_intra,
            att_inter,
            empty,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.gru.param_ids());
        ids.extend([self.att_intra, self.att_inter, self.empty]);
        ids
    }

    /// `histories[i]` lists the (non-empty) historical sessions of instance
    /// `i`, oldest first. `targets` holds one embedded candidate per row and
    /// `groups[j]` the instance of candidate `j`.
    pub fn forward(
        &self,
        g: &mut Graph,
        emb: &Embedder,
        histories: &[Vec<&[Event]>],
        targets: Var,
        groups: &[usize],
    ) -> Result<LongTermOutput> {
        let d = emb.dim();
        let m = groups.len();
        let lengths: Vec<usize> = histories.iter().map(Vec::len).collect();
        let flat: Vec<&[Event]> = histories.iter().flatten().copied().collect();
        if flat.iter().any(|s| s.is_empty()) {
            return Err(Error::Invalid("historical sessions must be non-empty".into()));
        }
        let mut segs = Vec::with_capacity(histories.len());
        let mut start = 0;
        for &n in &lengths {
            segs.push((start, n));
            start += n;
        }
        let total = flat.len();

        let (intra, inter, pooled_intra, pooled_inter) = if total == 0 {
            let z = g.constant(Tensor::zeros(0, d));
            let zm = g.constant(Tensor::zeros(m, d));
            (z, z, zm, zm)
        } else {
            let intra = self.encoder.encode(g, emb, &flat)?;
            let pad = PaddedSteps::new(&lengths);
            // step-major inputs; row `total` is a zero row for padding
            let zero = g.constant(Tensor::zeros(1, d));
            let src = g.concat_rows(&[intra, zero])?;
            let mut rows = vec![total; pad.steps * pad.batch];
            for (i, &(s, n)) in segs.iter().enumerate() {
                for j in 0..n {
                    rows[pad.row_of(i, n, j)] = s + j;
                }
            }
            let x = g.gather_rows(src, &rows)?;
            let states = self.gru.forward_padded(g, x, &pad)?;
            let stacked = g.concat_rows(&states)?;
            let back: Vec<usize> = segs
                .iter()
                .enumerate()
                .flat_map(|(i, &(_, n))| (0..n).map(move |j| (i, n, j)))
                .map(|(i, n, j)| pad.row_of(i, n, j))
                .collect();
            let inter = g.gather_rows(stacked, &back)?;
            let wi = g.param(self.att_intra);
            let qi = g.matmul_nt(targets, wi)?;
            let pooled_intra = g.segment_attn_pool(intra, &segs, qi, groups)?;
            let wh = g.param(self.att_inter);
            let qh = g.matmul_nt(targets, wh)?;
            let pooled_inter = g.segment_attn_pool(inter, &segs, qh, groups)?;
            (intra, inter, pooled_intra, pooled_inter)
        };
        let mut long = g.concat_cols(&[pooled_intra, pooled_inter])?;
        let empty_rows: Vec<f64> = groups
            .iter()
            .map(|&i| if lengths[i] == 0 { 1.0 } else { 0.0 })
            .collect();
        if empty_rows.iter().any(|&x| x > 0.0) {
            let e = g.param(self.empty);
            let e = g.broadcast_rows(e, m)?;
            let mask = g.constant(Tensor::column(empty_rows));
            let e = g.mul_col(e, mask)?;
            long = g.add(long, e)?;
        }
        Ok(LongTermOutput {
            intra,
            inter,
            segs,
            pooled_intra,
            pooled_inter,
            long,
        })
    }
}

/// Short-term outputs for a batch. `current` has one row per instance, the
/// rest one row per candidate.
pub struct ShortTermOutput {
    pub current: Var,
    pub recent: Var,
    pub short: Var,
}

/// Which short-term paths are computed; a disabled path yields zeros.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ShortTermPaths {
    pub recent: bool,
    pub current: bool,
}

impl Default for ShortTermPaths {
    fn default() -> Self {
        Self {
            recent: true,
            current: true,
        }
    }
}

/// Recent-event context of one instance: the events and the prediction time.
#[derive(Clone, Copy, Debug)]
pub struct RecentContext<'a> {
    pub events: &'a [Event],
    pub target_time: i64,
}

/// Second session encoder over the current session's past, plus a
/// time-aware LSTM over the latest events with target-attention pooling.
#[derive(Clone, Debug)]
pub struct ShortTermEncoder {
    pub encoder: SessionEncoder,
    pub lstm: Time4Lstm,
    pub att_recent: ParamId,
}

impl ShortTermEncoder {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: &EncoderConfig, rng: &mut R) -> Result<Self> {
        let encoder = SessionEncoder::new(store, "short.sess", cfg, rng)?;
        let lstm = Time4Lstm::new(store, "short.lstm", cfg, rng)?;
        let att_recent = store.add_uniform("short.att_recent", cfg.dim, cfg.dim, cfg.init_scale, rng)?;
        Ok(Self {
            encoder,
            lstm,
            att_recent,
        })
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.encoder.param_ids();
        ids.extend(self.lstm.param_ids());
        ids.push(self.att_recent);
        ids
    }

    /// Pooled current-session representation of each slice (`n x d`).
    pub fn encode_sessions(&self, g: &mut Graph, emb: &Embedder, sessions: &[&[Event]]) -> Result<Var> {
        self.encoder.encode(g, emb, sessions)
    }

    /// Time4LSTM states over every recent sequence, instance-major, with
    /// their segments.
    pub fn recent_states(&self, g: &mut Graph, emb: &Embedder, recents: &[RecentContext]) -> Result<(Var, Vec<Segment>)> {
        let lengths: Vec<usize> = recents.iter().map(|r| r.events.len()).collect();
        let pad = PaddedSteps::new(&lengths);
        let n_rows = pad.steps * pad.batch;
        let mut tokens = vec![None; n_rows];
        let mut prev = vec![0.0; n_rows];
        let mut target = vec![0.0; n_rows];
        for (i, r) in recents.iter().enumerate() {
            let n = r.events.len();
            let ts: Vec<i64> = r.events.iter().map(|e| e.timestamp).collect();
            let (p, t) = time_features(&ts, r.target_time)?;
            for j in 0..n {
                let row = pad.row_of(i, n, j);
                tokens[row] = Some(r.events[j]);
                prev[row] = p[j];
                target[row] = t[j];
            }
        }
        let present: Vec<Event> = tokens.iter().flatten().copied().collect();
        let x_present = emb.embed(g, &present)?;
        // scatter the embedded events into the padded layout
        let zero = g.constant(Tensor::zeros(1, emb.dim()));
        let src = g.concat_rows(&[x_present, zero])?;
        let mut next = 0;
        let rows: Vec<usize> = tokens
            .iter()
            .map(|t| match t {
                Some(_) => {
                    next += 1;
                    next - 1
                }
                None => present.len(),
            })
            .collect();
        let x = g.gather_rows(src, &rows)?;
        let states = self.lstm.forward_padded(g, x, prev, target, &pad)?;
        let stacked = g.concat_rows(&states)?;
        let mut segs = Vec::with_capacity(recents.len());
        let mut back = Vec::new();
        for (i, &n) in lengths.iter().enumerate() {
            segs.push((back.len(), n));
            back.extend((0..n).map(|j| pad.row_of(i, n, j)));
        }
        let h = g.gather_rows(stacked, &back)?;
        Ok((h, segs))
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        emb: &Embedder,
        pasts: &[&[Event]],
        recents: &[RecentContext],
        targets: Var,
        groups: &[usize],
        paths: ShortTermPaths,
    ) -> Result<ShortTermOutput> {
        let d = emb.dim();
        let m = groups.len();
        if pasts.len() != recents.len() {
            return Err(Error::Invalid("pasts and recents differ in batch size".into()));
        }
        if let Some(i) = (0..pasts.len()).find(|&i| pasts[i].is_empty() && recents[i].events.is_empty()) {
            return Err(Error::Empty(format!("instance {i} has neither past sub-session nor recent events")));
        }
        let current = if paths.current {
            self.encode_sessions(g, emb, pasts)?
        } else {
            g.constant(Tensor::zeros(pasts.len(), d))
        };
        let current_rows = g.gather_rows(current, groups)?;
        let any_recent = recents.iter().any(|r| !r.events.is_empty());
        let recent = if paths.recent && any_recent {
            let (h, segs) = self.recent_states(g, emb, recents)?;
            let w = g.param(self.att_recent);
            let q = g.matmul_nt(targets, w)?;
            g.segment_attn_pool(h, &segs, q, groups)?
        } else {
            g.constant(Tensor::zeros(m, d))
        };
        let short = g.concat_cols(&[recent, current_rows])?;
        Ok(ShortTermOutput { current, recent, short })
    }
}
