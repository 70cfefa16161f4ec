//! LSIDN: long/short-term encoders joined by an adaptive gate, an MLP
//! scoring head, and the main, contrastive and total losses.

mod batch;
mod loss;


use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

pub use batch::{
    make_views, prepare_scoring_batch, prepare_training_batch, ContrastiveViews, InstanceInput, PreparedBatch,
    ViewSpec,
};
pub use loss::{l2_penalty, main_loss, nt_xent_loss, total_loss, LossBundle, Similarity, SslDenominator};

use crate::data::Event;
use crate::encoders::{
    EncoderConfig, Embedder, InterestState, LongTermEncoder, RecentContext, ShortTermEncoder, ShortTermPaths,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// The full model and its six ablations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Variant {
    Full,
    /// No session division: the history is one pseudo-session.
    NoLd,
    /// No contrastive term.
    NoSd,
    /// No recent-interest path.
    NoRi,
    /// No current-session path (and hence no contrastive term).
    NoCi,
    /// No long-term interest; the gate is fixed to the short-term side.
    NoLi,
    /// No short-term interest; the gate is fixed to the long-term side.
    NoSi,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::NoLd,
        Variant::NoSd,
        Variant::NoRi,
        Variant::NoCi,
        Variant::NoLi,
        Variant::NoSi,
    ];

    /// Display name, as in the ablation table.
    pub fn label(self) -> &'static str {
        match self {
            Variant::Full => "LSIDN",
            Variant::NoLd => "w/o LD",
            Variant::NoSd => "w/o SD",
            Variant::NoRi => "w/o RI",
            Variant::NoCi => "w/o CI",
            Variant::NoLi => "w/o LI",
            Variant::NoSi => "w/o SI",
        }
    }

    /// Identifier used in configs and file names.
    pub fn slug(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::NoLd => "wo-ld",
            Variant::NoSd => "wo-sd",
            Variant::NoRi => "wo-ri",
            Variant::NoCi => "wo-ci",
            Variant::NoLi => "wo-li",
            Variant::NoSi => "wo-si",
        }
    }

    pub fn divides_history(self) -> bool {
        self != Variant::NoLd
    }

    pub fn uses_long(self) -> bool {
        self != Variant::NoLi
    }

    pub fn uses_short(self) -> bool {
        self != Variant::NoSi
    }

    pub fn short_paths(self) -> ShortTermPaths {
        ShortTermPaths {
            recent: self != Variant::NoRi,
            current: self != Variant::NoCi,
        }
    }

    pub fn uses_contrastive(self) -> bool {
        !matches!(self, Variant::NoSd | Variant::NoCi | Variant::NoSi)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.slug())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('/', "").replace([' ', '_'], "-");
        Variant::ALL
            .into_iter()
            .find(|v| v.slug() == norm || v.label().to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }
}

/// Model sizes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub item_rows: usize,
    /// Category embedding rows (including the mask row), or `None` to embed items only.
    pub category_rows: Option<usize>,
}

/// Losses and contrastive settings.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub lambda: f64,
    pub beta: f64,
    pub tau: f64,
    pub denominator: SslDenominator,
    pub similarity: Similarity,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            lambda: 0.1,
            beta: 0.1,
            tau: 0.2,
            denominator: SslDenominator::Standard,
            similarity: Similarity::Dot,
        }
    }
}

/// Parameter handles of the whole network.
#[derive(Clone, Debug)]
pub struct Lsidn {
    pub config: ModelConfig,
    pub embed: Embedder,
    pub long: LongTermEncoder,
    pub short: ShortTermEncoder,
    /// `5d x 1` gate weights over `[u_L, u_S, v_T]`.
    pub fuse_w: ParamId,
    pub fuse_b: ParamId,
    pub mlp_w1: ParamId,
    pub mlp_b1: ParamId,
    pub mlp_w2: ParamId,
    pub mlp_b2: ParamId,
}

/// Forward results, one row per scored candidate.
pub struct ForwardOutput {
    pub scores: Var,
    pub alpha: Var,
    pub long: Var,
    pub short: Var,
    pub fused: Var,
    pub targets: Var,
    pub intra: Option<Var>,
    pub inter: Option<Var>,
    pub pooled_intra: Option<Var>,
    pub pooled_inter: Option<Var>,
    pub current: Option<Var>,
    pub recent: Option<Var>,
}

/// `alpha = sigmoid([u_L, u_S, v_T] w + b)` and `alpha u_L + (1 - alpha) u_S`.
pub fn adaptive_fuse(g: &mut Graph, long: Var, short: Var, target: Var, w: ParamId, b: ParamId) -> Result<(Var, Var)> {
    if g.shape(long) != g.shape(short) {
        return Err(Error::Shape {
            op: "adaptive_fuse",
            left: g.shape(long),
            right: g.shape(short),
        });
    }
    let x = g.concat_cols(&[long, short, target])?;
    let w = g.param(w);
    let b = g.param(b);
    let pre = g.matmul(x, w)?;
    let pre = g.add_row(pre, b)?;
    let alpha = g.sigmoid(pre);
    let fused = convex_mix(g, alpha, long, short)?;
    Ok((alpha, fused))
}

fn convex_mix(g: &mut Graph, alpha: Var, long: Var, short: Var) -> Result<Var> {
    let one_minus = g.affine(alpha, -1.0, 1.0);
    let a = g.mul_col(long, alpha)?;
    let b = g.mul_col(short, one_minus)?;
    g.add(a, b)
}

/// Two-layer MLP with ReLU hidden layer on `[u_LS, v_T]`, then sigmoid.
pub fn predict(g: &mut Graph, fused: Var, target: Var, w1: ParamId, b1: ParamId, w2: ParamId, b2: ParamId) -> Result<Var> {
    let x = g.concat_cols(&[fused, target])?;
    let (w1, b1, w2, b2) = (g.param(w1), g.param(b1), g.param(w2), g.param(b2));
    let h = g.matmul(x, w1)?;
    let h = g.add_row(h, b1)?;
    let h = g.relu(h);
    let o = g.matmul(h, w2)?;
    let o = g.add_row(o, b2)?;
    Ok(g.sigmoid(o))
}

impl Lsidn {
    pub fn new<R: Rng>(store: &mut ParamStore, config: ModelConfig, rng: &mut R) -> Result<Self> {
        let enc = &config.encoder;
        enc.validate()?;
        let d = enc.dim;
        let s = enc.init_scale;
        let embed = Embedder::new(store, config.item_rows, config.category_rows, enc, rng)?;
        let long = LongTermEncoder::new(store, enc, rng)?;
        let short = ShortTermEncoder::new(store, enc, rng)?;
        let fuse_w = store.add_uniform("fuse.w", 5 * d, 1, s, rng)?;
        let fuse_b = store.add_uniform("fuse.b", 1, 1, s, rng)?;
        let mlp_w1 = store.add_uniform("mlp.w1", 3 * d, 2 * d, s, rng)?;
        let mlp_b1 = store.add_uniform("mlp.b1", 1, 2 * d, s, rng)?;
        let mlp_w2 = store.add_uniform("mlp.w2", 2 * d, 1, s, rng)?;
        let mlp_b2 = store.add_uniform("mlp.b2", 1, 1, s, rng)?;
        Ok(Self {
            config,
            embed,
            long,
            short,
            fuse_w,
            fuse_b,
            mlp_w1,
            mlp_b1,
            mlp_w2,
            mlp_b2,
        })
    }

    pub fn dim(&self) -> usize {
        self.config.encoder.dim
    }

    pub fn head_param_ids(&self) -> Vec<ParamId> {
        vec![self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2]
    }

    pub fn forward(&self, g: &mut Graph, batch: &PreparedBatch, variant: Variant) -> Result<ForwardOutput> {
        let d = self.dim();
        let m = batch.candidates.len();
        if m == 0 || batch.groups.len() != m {
            return Err(Error::Empty("batch has no scored candidates".into()));
        }
        let targets = self.embed.embed_pairs(g, &batch.candidates)?;
        let mut out = ForwardOutput {
            scores: targets,
            alpha: targets,
            long: targets,
            short: targets,
            fused: targets,
            targets,
            intra: None,
            inter: None,
            pooled_intra: None,
            pooled_inter: None,
            current: None,
            recent: None,
        };
        out.long = if variant.uses_long() {
            let histories: Vec<Vec<&[Event]>> = batch
                .inputs
                .iter()
                .map(|i| i.history.iter().map(Vec::as_slice).collect())
                .collect();
            let lo = self.long.forward(g, &self.embed, &histories, targets, &batch.groups)?;
            out.intra = Some(lo.intra);
            out.inter = Some(lo.inter);
            out.pooled_intra = Some(lo.pooled_intra);
            out.pooled_inter = Some(lo.pooled_inter);
            lo.long
        } else {
            g.constant(Tensor::zeros(m, 2 * d))
        };
        out.short = if variant.uses_short() {
            let pasts: Vec<&[Event]> = batch.inputs.iter().map(|i| i.past.as_slice()).collect();
            let recents: Vec<RecentContext> = batch
                .inputs
                .iter()
                .map(|i| RecentContext {
                    events: &i.recent,
                    target_time: i.target_time,
                })
                .collect();
            let so = self
                .short
                .forward(g, &self.embed, &pasts, &recents, targets, &batch.groups, variant.short_paths())?;
            out.current = Some(so.current);
            out.recent = Some(so.recent);
            so.short
        } else {
            g.constant(Tensor::zeros(m, 2 * d))
        };
        let (alpha, fused) = match variant {
            Variant::NoLi | Variant::NoSi => {
                let fixed = if variant == Variant::NoSi { 1.0 } else { 0.0 };
                let alpha = g.constant(Tensor::filled(m, 1, fixed));
                let fused = convex_mix(g, alpha, out.long, out.short)?;
                (alpha, fused)
            }
            _ => adaptive_fuse(g, out.long, out.short, targets, self.fuse_w, self.fuse_b)?,
        };
        out.alpha = alpha;
        out.fused = fused;
        out.scores = predict(g, fused, targets, self.mlp_w1, self.mlp_b1, self.mlp_w2, self.mlp_b2)?;
        Ok(out)
    }

    /// Contrastive loss over the batch's views, if the variant uses it and
    /// at least two instances have views.
    pub fn contrastive(&self, g: &mut Graph, batch: &PreparedBatch, variant: Variant, cfg: &LossConfig) -> Result<Option<Var>> {
        if !variant.uses_contrastive() {
            return Ok(None);
        }
        let Some(views) = &batch.views else { return Ok(None) };
        if views.len() < 2 {
            return Ok(None);
        }
        let a: Vec<&[Event]> = views.first.iter().map(Vec::as_slice).collect();
        let b: Vec<&[Event]> = views.second.iter().map(Vec::as_slice).collect();
        let za = self.short.encode_sessions(g, &self.embed, &a)?;
        let zb = self.short.encode_sessions(g, &self.embed, &b)?;
        nt_xent_loss(g, za, zb, cfg.tau, cfg.denominator, cfg.similarity)
    }

    /// Total training loss of a prepared batch.
    pub fn batch_loss(
        &self,
        g: &mut Graph,
        batch: &PreparedBatch,
        variant: Variant,
        cfg: &LossConfig,
    ) -> Result<(Var, LossBundle, ForwardOutput)> {
        let out = self.forward(g, batch, variant)?;
        let main = main_loss(g, out.scores, &batch.labels)?;
        let ssl = self.contrastive(g, batch, variant, cfg)?;
        let (total, bundle) = total_loss(g, main, ssl, cfg.lambda, cfg.beta)?;
        Ok((total, bundle, out))
    }

    /// Scores (and gate values) of a batch without building gradients.
    pub fn score(&self, store: &ParamStore, batch: &PreparedBatch, variant: Variant) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, batch, variant)?;
        Ok((g.value(out.scores).data().to_vec(), g.value(out.alpha).data().to_vec()))
    }

    /// Every intermediate vector for one instance scored against one item.
    pub fn interest_state(&self, store: &ParamStore, input: &InstanceInput, candidate: (u32, u32), variant: Variant) -> Result<InterestState> {
        let batch = PreparedBatch {
            inputs: vec![input.clone()],
            candidates: vec![candidate],
            groups: vec![0],
            labels: vec![1.0],
            views: None,
        };
        let mut g = Graph::new(store);
        let out = self.forward(&mut g, &batch, variant)?;
        let d = self.dim();
        let get = |v: Option<Var>, rows: usize| v.map_or_else(|| Tensor::zeros(rows, d), |v| g.value(v).clone());
        let k = input.history.len();
        let short = g.value(out.short).clone();
        Ok(InterestState {
            intra: get(out.intra, k),
            inter: get(out.inter, k),
            pooled_intra: get(out.pooled_intra, 1),
            pooled_inter: get(out.pooled_inter, 1),
            long: g.value(out.long).clone(),
            current: Tensor::row_vector(short.data()[d..].to_vec()),
            recent: Tensor::row_vector(short.data()[..d].to_vec()),
            short,
            alpha: g.scalar(out.alpha),
            fused: g.value(out.fused).clone(),
        })
    }
}
