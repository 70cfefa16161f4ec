use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Graph, Tensor, Var};

/// Which terms the contrastive softmax denominator contains.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SslDenominator {
    /// Positive plus every in-batch negative.
    Standard,
    /// Negatives only in the denominator; the positive pair is left out.
    Literal,
}

impl FromStr for SslDenominator {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(Self::Standard),
            "literal" => Ok(Self::Literal),
            other => Err(Error::Config(format!("unknown ssl_denominator `{other}`"))),
        }
    }
}

impl fmt::Display for SslDenominator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Standard => "standard",
            Self::Literal => "literal",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Similarity {
    Dot,
    Cosine,
}

impl FromStr for Similarity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Self::Dot),
            "cosine" => Ok(Self::Cosine),
            other => Err(Error::Config(format!("unknown ssl_similarity `{other}`"))),
        }
    }
}

impl fmt::Display for Similarity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Dot => "dot",
            Self::Cosine => "cosine",
        })
    }
}

/// Mean binary cross-entropy over every scored item.
pub fn main_loss(g: &mut Graph, scores: Var, labels: &[f64]) -> Result<Var> {
    g.bce_mean(scores, labels)
}

/// NT-Xent over paired views `past` and `future` (`n x d` each).
///
/// Anchor `i` of either view has its counterpart as the positive and the
/// other `2(n - 1)` representations as negatives. The loss is averaged over
/// all `2n` anchors. Returns `None` when fewer than two pairs are given.
pub fn nt_xent_loss(
    g: &mut Graph,
    past: Var,
    future: Var,
    tau: f64,
    denominator: SslDenominator,
    similarity: Similarity,
) -> Result<Option<Var>> {
    if !(tau > 0.0) {
        return Err(Error::Invalid(format!("temperature must be positive, got {tau}")));
    }
    let [n, d] = g.shape(past);
    if g.shape(future) != [n, d] {
        return Err(Error::Shape {
            op: "nt_xent_loss",
            left: [n, d],
            right: g.shape(future),
        });
    }
    if n < 2 {
        return Ok(None);
    }
    let mut z = g.concat_rows(&[past, future])?;
    if similarity == Similarity::Cosine {
        z = g.l2_norm(z)?;
    }
    let sim = g.matmul_nt(z, z)?;
    let logits = g.scale(sim, 1.0 / tau);
    let m = 2 * n;
    let partner = |i: usize| (i + n) % m;
    let mut mask = vec![false; m * m];
    let mut pick = vec![0.0; m * m];
    for i in 0..m {
        for j in 0..m {
            let keep = match denominator {
                SslDenominator::Standard => j != i,
                SslDenominator::Literal => j != i && j != partner(i),
            };
            mask[i * m + j] = keep;
        }
        pick[i * m + partner(i)] = 1.0;
    }
    let lse = g.logsumexp_rows(logits, Some(&mask))?;
    let sel = g.constant(Tensor::new(m, m, pick)?);
    let pos = g.mul(logits, sel)?;
    let pos = g.sum_cols(pos);
    let per_anchor = g.sub(lse, pos)?;
    let total = g.sum_all(per_anchor);
    Ok(Some(g.scale(total, 1.0 / m as f64)))
}

/// Scalar values of one loss evaluation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub main: f64,
    pub ssl: Option<f64>,
    pub reg: f64,
    pub total: f64,
    pub lambda: f64,
    pub beta: f64,
}

impl LossBundle {
    /// `main + lambda * ssl + beta * reg`, dropping the ssl term when absent.
    pub fn compose(main: f64, ssl: Option<f64>, reg: f64, lambda: f64, beta: f64) -> Self {
        let total = main + ssl.map_or(0.0, |s| lambda * s) + beta * reg;
        Self {
            main,
            ssl,
            reg,
            total,
            lambda,
            beta,
        }
    }
}

/// Sum of squared entries of every parameter the graph has read so far.
pub fn l2_penalty(g: &mut Graph) -> Result<Var> {
    let ids = g.touched_params();
    let mut acc = g.constant(Tensor::scalar(0.0));
    for id in ids {
        let p = g.param(id);
        let s = g.sum_squares(p);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

/// Builds `main + lambda * ssl + beta * sum ||p||^2` on the graph. The
/// penalty covers the parameters read by the forward pass, so branches a
/// variant switches off are neither used nor regularized.
pub fn total_loss(g: &mut Graph, main: Var, ssl: Option<Var>, lambda: f64, beta: f64) -> Result<(Var, LossBundle)> {
    if lambda < 0.0 || beta < 0.0 {
        return Err(Error::Invalid("loss weights must be non-negative".into()));
    }
    let reg = l2_penalty(g)?;
    let mut total = main;
    if let Some(s) = ssl {
        let ws = g.scale(s, lambda);
        total = g.add(total, ws)?;
    }
    let wr = g.scale(reg, beta);
    total = g.add(total, wr)?;
    let bundle = LossBundle {
        main: g.scalar(main),
        ssl: ssl.map(|s| g.scalar(s)),
        reg: g.scalar(reg),
        total: g.scalar(total),
        lambda,
        beta,
    };
    Ok((total, bundle))
}
