//! Interest extraction: session encoder, GRU, attention pooling, Time4LSTM,
//! and the long- and short-term encoders built from them.

mod interest;
mod recurrent;
mod session;


use rand::Rng;

pub use interest::{
    attn_pool, LongTermEncoder, LongTermOutput, RecentContext, ShortTermEncoder, ShortTermOutput, ShortTermPaths,
};
pub use recurrent::{gru_forward, time4lstm_forward, time_features, Gru, PaddedSteps, Time4Lstm};
pub use session::{sess_enc_forward, PackedSessions, SessionEncoder};

use crate::data::{Event, MASK_ITEM};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Sizes shared by every encoder component.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub dim: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    /// Learned positional embeddings inside sessions.
    pub positions: bool,
    /// Rows of the positional table; must cover the longest encoded session.
    pub max_positions: usize,
    /// Weights are drawn from `[-init_scale, init_scale]`.
    pub init_scale: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            dim: 40,
            heads: 2,
            ffn_mult: 4,
            positions: true,
            max_positions: 50,
            init_scale: 0.01,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "dimension {} must be a positive multiple of {} heads",
                self.dim, self.heads
            )));
        }
        if self.ffn_mult == 0 || self.max_positions == 0 {
            return Err(Error::Config("ffn_mult and max_positions must be positive".into()));
        }
        Ok(())
    }
}

/// Item embeddings, optionally summed with a category embedding. Row 0 of
/// both tables is the mask token.
#[derive(Clone, Debug)]
pub struct Embedder {
    pub items: ParamId,
    pub categories: Option<ParamId>,
    dim: usize,
}

impl Embedder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        item_rows: usize,
        category_rows: Option<usize>,
        cfg: &EncoderConfig,
        rng: &mut R,
    ) -> Result<Self> {
        let items = store.add_uniform("embed.items", item_rows, cfg.dim, cfg.init_scale, rng)?;
        let categories = match category_rows {
            Some(n) => Some(store.add_uniform("embed.categories", n, cfg.dim, cfg.init_scale, rng)?),
            None => None,
        };
        Ok(Self {
            items,
            categories,
            dim: cfg.dim,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = vec![self.items];
        ids.extend(self.categories);
        ids
    }

    /// Embedding rows of `(item, category)` pairs. Categories shift by one
    /// because row 0 is reserved; a masked item also masks its category.
    pub fn embed_pairs(&self, g: &mut Graph, pairs: &[(u32, u32)]) -> Result<Var> {
        if pairs.is_empty() {
            return Ok(g.constant(Tensor::zeros(0, self.dim)));
        }
        let items: Vec<usize> = pairs.iter().map(|&(i, _)| i as usize).collect();
        let x = g.embedding_lookup(self.items, &items)?;
        match self.categories {
            Some(table) => {
                let cats: Vec<usize> = pairs
                    .iter()
                    .map(|&(i, c)| if i == MASK_ITEM { 0 } else { c as usize + 1 })
                    .collect();
                let c = g.embedding_lookup(table, &cats)?;
                g.add(x, c)
            }
            None => Ok(x),
        }
    }

    pub fn embed(&self, g: &mut Graph, events: &[Event]) -> Result<Var> {
        let pairs: Vec<(u32, u32)> = events.iter().map(|e| (e.item, e.category)).collect();
        self.embed_pairs(g, &pairs)
    }
}

/// Every intermediate interest vector for one instance and one candidate.
#[derive(Clone, Debug, PartialEq)]
pub struct InterestState {
    /// `h_n` per historical session, `k x d`.
    pub intra: Tensor,
    /// GRU states `h'_n`, `k x d`.
    pub inter: Tensor,
    pub pooled_intra: Tensor,
    pub pooled_inter: Tensor,
    /// `2d` long-term vector.
    pub long: Tensor,
    pub current: Tensor,
    pub recent: Tensor,
    /// `2d` short-term vector: recent then current.
    pub short: Tensor,
    pub alpha: f64,
    pub fused: Tensor,
}
