//! Target attention over a variable-length sequence of embeddings.

use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Mlp, ParamStore, Var};
use crate::Rng;

/// How the interaction term between history and target enters the unit.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum AttOuter {
    /// Elementwise product, width `d`.
    #[default]
    Elementwise,
    /// Flattened outer product, width `d * d`.
    Full,
}

impl std::str::FromStr for AttOuter {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "elementwise" => Ok(AttOuter::Elementwise),
            "full" => Ok(AttOuter::Full),
            other => Err(format!("unknown att_outer {other:?}")),
        }
    }
}

impl std::fmt::Display for AttOuter {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            AttOuter::Elementwise => "elementwise",
            AttOuter::Full => "full",
        })
    }
}

#[derive(Clone, Debug)]
pub struct AttentionUnit {
    pub dim: usize,
    pub outer: AttOuter,
    /// Normalize weights per sample with a softmax.
    pub softmax: bool,
    pub mlp: Mlp,
}

/// Pairs of (history row, target row) belonging to samples.
#[derive(Clone, Debug)]
pub struct AttentionPairs {
    pub history: Rc<[usize]>,
    pub target: Rc<[usize]>,
    /// Sample of each pair.
    pub sample: Rc<[usize]>,
    pub samples: usize,
}

impl AttentionUnit {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dim: usize,
        hidden: usize,
        outer: AttOuter,
        softmax: bool,
        rng: &mut Rng,
    ) -> Self {
        let inter = match outer {
            AttOuter::Elementwise => dim,
            AttOuter::Full => dim * dim,
        };
        let mlp = Mlp::new(store, name, &[3 * dim + inter, hidden, 1], rng);
        AttentionUnit {
            dim,
            outer,
            softmax,
            mlp,
        }
    }

    /// Returns `(h, w)`: `h[n] = Σ w_r e_r` over the pairs of sample `n`
    /// (zero for samples without pairs) and the per-pair weights `[P, 1]`.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        history: Var,
        target: Var,
        pairs: &AttentionPairs,
    ) -> Result<(Var, Option<Var>)> {
        let d = g.value(history).cols();
        if d != self.dim || g.value(target).cols() != self.dim {
            return Err(Error::shape(
                "attention",
                format!("embedding width {d} vs unit width {}", self.dim),
            ));
        }
        if pairs.history.is_empty() {
            let zeros = g.constant(crate::tensor::Tensor::zeros(&[pairs.samples, d]));
            return Ok((zeros, None));
        }
        let e_r = g.gather_rows(history, pairs.history.clone())?;
        let e_t = g.gather_rows(target, pairs.target.clone())?;
        let inter = match self.outer {
            AttOuter::Elementwise => g.mul(e_r, e_t)?,
            AttOuter::Full => g.row_outer(e_r, e_t)?,
        };
        let diff = g.sub(e_r, e_t)?;
        let x = g.concat_cols(&[e_r, e_t, inter, diff])?;
        let mut unused = crate::rng_for(0, 0);
        let mut w = self.mlp.forward(g, store, x, 0.0, false, &mut unused)?;
        if self.softmax {
            w = g.segment_softmax(w, pairs.sample.clone())?;
        }
        let weighted = g.mul_col(e_r, w)?;
        let h = g.scatter_add_rows(weighted, pairs.sample.clone(), pairs.samples)?;
        Ok((h, Some(w)))
    }
}
