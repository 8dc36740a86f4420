//! Modal prompting: score-based token partition, token exchange in a
//! low-rank space, and reconstruction of the fused token stream.
//!
//! For the RGB stream `I` and the shared-embedding stream `F`:
//!
//! ```text
//! m_n, m_u, m_p = s(I)
//! I_l1 = σ_c(m_n·F + m_p·I)        uncertain rows are zero
//! I_l2 = σ_n(m_u·F + m_u·I)
//! I_l  = φ_P([I_l1, I_l2])
//! O    = Φ_P(I_l + F_l) (+ I)
//! ```
//!
//! `F_l` is produced the same way with the roles of `I` and `F` swapped and
//! with the `F` stream's own parameters. Masks are constants of the forward
//! pass; no gradient reaches the score layers.

use rand::Rng;

use crate::autodiff::params::join;
use crate::autodiff::{concat_cols, LinearLayer, Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// `⌈n·ρ⌉`, tolerant of fractions that are not exactly representable.
pub fn partition_count(n: usize, rho: f64) -> usize {
    ((n as f64) * rho - 1e-9).ceil().max(0.0) as usize
}

/// Negative / uncertain / positive token masks.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenPartition<S> {
    pub m_n: Vec<bool>,
    pub m_u: Vec<bool>,
    pub m_p: Vec<bool>,
    /// `[n, 1]`
    pub scores: Tensor<S>,
}

impl<S: Scalar> TokenPartition<S> {
    /// Top-`q` scores are positive, the lowest `q` of the rest negative.
    /// Equal scores resolve toward the lower index in both selections.
    pub fn from_scores(scores: &[S], q: usize) -> Result<Self> {
        let n = scores.len();
        if 2 * q > n {
            return Err(Error::Size(format!("2·{q} tokens exceed n = {n}")));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numeric("non-finite token score".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            scores[b]
                .partial_cmp(&scores[a])
                .expect("finite")
                .then(a.cmp(&b))
        });
        let mut m_p = vec![false; n];
        for &i in &order[..q] {
            m_p[i] = true;
        }
        let mut rest: Vec<usize> = (0..n).filter(|&i| !m_p[i]).collect();
        rest.sort_by(|&a, &b| {
            scores[a]
                .partial_cmp(&scores[b])
                .expect("finite")
                .then(a.cmp(&b))
        });
        let mut m_n = vec![false; n];
        for &i in &rest[..q] {
            m_n[i] = true;
        }
        let m_u = (0..n).map(|i| !m_p[i] && !m_n[i]).collect();
        Ok(Self {
            m_n,
            m_u,
            m_p,
            scores: Tensor::new(&[n, 1], scores.to_vec(), false)?,
        })
    }

    /// Arbitrary masks; they must be disjoint and cover every token.
    pub fn from_masks(m_n: Vec<bool>, m_u: Vec<bool>, m_p: Vec<bool>) -> Result<Self> {
        let n = m_n.len();
        if n == 0 || m_u.len() != n || m_p.len() != n {
            return Err(Error::Size("mask lengths differ or are empty".into()));
        }
        for i in 0..n {
            if (m_n[i] as u8 + m_u[i] as u8 + m_p[i] as u8) != 1 {
                return Err(Error::Domain(format!(
                    "token {i} is not in exactly one mask"
                )));
            }
        }
        Ok(Self {
            m_n,
            m_u,
            m_p,
            scores: Tensor::zeros(&[n, 1]),
        })
    }

    pub fn len(&self) -> usize {
        self.m_n.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m_n.is_empty()
    }

    pub fn indices(mask: &[bool]) -> Vec<usize> {
        mask.iter()
            .enumerate()
            .filter(|(_, &m)| m)
            .map(|(i, _)| i)
            .collect()
    }

    fn weights(mask: &[bool]) -> Vec<S> {
        mask.iter()
            .map(|&m| if m { S::one() } else { S::zero() })
            .collect()
    }
}

/// Parameters owned by one stream.
#[derive(Debug, Clone)]
pub struct StreamPrompt<S> {
    /// `[1, c]`
    pub score_layer: LinearLayer<S>,
    /// `[l, c]`
    pub sigma_c: LinearLayer<S>,
    /// `[l, c]`
    pub sigma_n: LinearLayer<S>,
    /// `[l, 2l]`
    pub phi_p: LinearLayer<S>,
}

impl<S: Scalar> StreamPrompt<S> {
    pub fn new<R: Rng + ?Sized>(width: usize, rank_l: usize, rng: &mut R) -> Self {
        Self {
            score_layer: LinearLayer::new(width, 1, true, rng),
            sigma_c: LinearLayer::new(width, rank_l, true, rng),
            sigma_n: LinearLayer::new(width, rank_l, true, rng),
            phi_p: LinearLayer::new(2 * rank_l, rank_l, true, rng),
        }
    }

    /// Scores are computed off the tape.
    pub fn score_tokens(&self, feat: &Tensor<S>, q: usize) -> Result<TokenPartition<S>> {
        let mut s = self.score_layer.apply(feat)?.into_data();
        s.iter_mut()
            .for_each(|v| *v = crate::autodiff::kernels::sigmoid(*v));
        TokenPartition::from_scores(&s, q)
    }

    /// `σ_c(m_n·other + m_p·own)`.
    pub fn lowrank_exchange<'t>(
        &self,
        tape: &'t Tape<S>,
        own: Var<'t, S>,
        other: Var<'t, S>,
        part: &TokenPartition<S>,
    ) -> Result<Var<'t, S>> {
        check_pair(own, other, part)?;
        let composite = other
            .row_scale(&TokenPartition::<S>::weights(&part.m_n))?
            .add(own.row_scale(&TokenPartition::<S>::weights(&part.m_p))?)?;
        self.sigma_c.forward(tape, composite)
    }

    /// `σ_n(m_u·(own + other))`.
    pub fn lowrank_uncertain<'t>(
        &self,
        tape: &'t Tape<S>,
        own: Var<'t, S>,
        other: Var<'t, S>,
        part: &TokenPartition<S>,
    ) -> Result<Var<'t, S>> {
        check_pair(own, other, part)?;
        let mixed = own
            .add(other)?
            .row_scale(&TokenPartition::<S>::weights(&part.m_u))?;
        self.sigma_n.forward(tape, mixed)
    }

    /// `φ_P([l1, l2])`.
    pub fn fuse_stream<'t>(
        &self,
        tape: &'t Tape<S>,
        l1: Var<'t, S>,
        l2: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        if l1.dims() != l2.dims() {
            return Err(Error::shape(format!(
                "fuse inputs differ: {:?} vs {:?}",
                l1.dims(),
                l2.dims()
            )));
        }
        self.phi_p.forward(tape, concat_cols(&[l1, l2])?)
    }

    /// Low-rank prompt of this stream, `[n, l]`.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        own: Var<'t, S>,
        other: Var<'t, S>,
        part: &TokenPartition<S>,
    ) -> Result<Var<'t, S>> {
        let l1 = self.lowrank_exchange(tape, own, other, part)?;
        let l2 = self.lowrank_uncertain(tape, own, other, part)?;
        self.fuse_stream(tape, l1, l2)
    }
}

fn check_pair<S: Scalar>(a: Var<'_, S>, b: Var<'_, S>, part: &TokenPartition<S>) -> Result<()> {
    if a.dims() != b.dims() || a.dims().len() != 2 {
        return Err(Error::shape(format!(
            "prompt streams differ: {:?} vs {:?}",
            a.dims(),
            b.dims()
        )));
    }
    if a.rows() != part.len() {
        return Err(Error::shape(format!(
            "partition covers {} tokens, stream has {}",
            part.len(),
            a.rows()
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PromptMode {
    /// Partition, exchange and reconstruct.
    Prompt,
    /// Stub replacement: `O = I + F`.
    Bypass,
}

#[derive(Debug, Clone)]
pub struct PromptBlock<S> {
    pub rgb: StreamPrompt<S>,
    pub shared: StreamPrompt<S>,
    /// `[c, l]`
    pub big_phi_p: LinearLayer<S>,
    pub rank_l: usize,
    pub percentile: f64,
    pub residual: bool,
    pub mode: PromptMode,
}

impl<S: Scalar> PromptBlock<S> {
    pub fn new<R: Rng + ?Sized>(
        width: usize,
        rank_l: usize,
        percentile: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if rank_l == 0 || rank_l >= width {
            return Err(Error::Rank(format!("rank {rank_l} must lie in 1..{width}")));
        }
        if !(percentile > 0.0 && percentile <= 0.5) {
            return Err(Error::Config(format!(
                "percentile {percentile} outside (0, 1/2]"
            )));
        }
        Ok(Self {
            rgb: StreamPrompt::new(width, rank_l, rng),
            shared: StreamPrompt::new(width, rank_l, rng),
            big_phi_p: LinearLayer::new(rank_l, width, true, rng),
            rank_l,
            percentile,
            residual: true,
            mode: PromptMode::Prompt,
        })
    }

    pub fn width(&self) -> usize {
        self.big_phi_p.out_features()
    }

    pub fn token_count(&self, n: usize) -> usize {
        partition_count(n, self.percentile)
    }

    /// Partitions of the `I` and `F` streams.
    pub fn partitions(
        &self,
        i_feat: &Tensor<S>,
        f_feat: &Tensor<S>,
    ) -> Result<(TokenPartition<S>, TokenPartition<S>)> {
        let q = self.token_count(i_feat.rows());
        Ok((
            self.rgb.score_tokens(i_feat, q)?,
            self.shared.score_tokens(f_feat, q)?,
        ))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        i_feat: Var<'t, S>,
        f_feat: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        if self.mode == PromptMode::Bypass {
            return i_feat.add(f_feat);
        }
        let (pi, pf) = self.partitions(&i_feat.to_tensor(), &f_feat.to_tensor())?;
        self.forward_with(tape, i_feat, f_feat, &pi, &pf)
    }

    /// Forward with externally fixed partitions.
    pub fn forward_with<'t>(
        &self,
        tape: &'t Tape<S>,
        i_feat: Var<'t, S>,
        f_feat: Var<'t, S>,
        part_i: &TokenPartition<S>,
        part_f: &TokenPartition<S>,
    ) -> Result<Var<'t, S>> {
        if self.mode == PromptMode::Bypass {
            return i_feat.add(f_feat);
        }
        let i_l = self.rgb.forward(tape, i_feat, f_feat, part_i)?;
        let f_l = self.shared.forward(tape, f_feat, i_feat, part_f)?;
        let o = self.big_phi_p.forward(tape, i_l.add(f_l)?)?;
        if self.residual {
            o.add(i_feat)
        } else {
            Ok(o)
        }
    }
}

impl<S: Scalar> Parameters<S> for StreamPrompt<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.score_layer.visit(&join(prefix, "score"), f);
        self.sigma_c.visit(&join(prefix, "sigma_c"), f);
        self.sigma_n.visit(&join(prefix, "sigma_n"), f);
        self.phi_p.visit(&join(prefix, "phi_p"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.score_layer.visit_mut(&join(prefix, "score"), f);
        self.sigma_c.visit_mut(&join(prefix, "sigma_c"), f);
        self.sigma_n.visit_mut(&join(prefix, "sigma_n"), f);
        self.phi_p.visit_mut(&join(prefix, "phi_p"), f);
    }
}

impl<S: Scalar> Parameters<S> for PromptBlock<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.rgb.visit(&join(prefix, "rgb"), f);
        self.shared.visit(&join(prefix, "shared"), f);
        self.big_phi_p.visit(&join(prefix, "big_phi_p"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.rgb.visit_mut(&join(prefix, "rgb"), f);
        self.shared.visit_mut(&join(prefix, "shared"), f);
        self.big_phi_p.visit_mut(&join(prefix, "big_phi_p"), f);
    }
}
