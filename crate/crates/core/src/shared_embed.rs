//! Shared embedding: in-domain low-rank approximation, edge-guided fusion,
//! and reconstruction of a modality-agnostic feature.
//!
//! For one sample carrying auxiliary modality `x`:
//!
//! ```text
//! x_k = σ_x(X)                                    per-modality down-projection
//! G_k = σ_g(G)
//! M_k = φ_R1([D_k, T_k, E_k]) + φ_R2(G_k)        absent slots are zero
//! F   = Φ_R(M_k) + G
//! ```
//!
//! `Φ_R` has no bias, so `F − G` always lies in a `k`-dimensional subspace.

use rand::Rng;

use crate::autodiff::params::join;
use crate::autodiff::{concat_cols, LinearLayer, Parameters, Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::modality::Modality;
use crate::scalar::Scalar;

/// Linear layer, optionally with one hidden relu layer.
#[derive(Debug, Clone)]
pub struct Mlp<S> {
    pub layers: Vec<LinearLayer<S>>,
}

impl<S: Scalar> Mlp<S> {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, hidden: bool, rng: &mut R) -> Self {
        let layers = if hidden {
            let h = input.max(output);
            vec![
                LinearLayer::new(input, h, true, rng),
                LinearLayer::new(h, output, true, rng),
            ]
        } else {
            vec![LinearLayer::new(input, output, true, rng)]
        };
        Self { layers }
    }

    pub fn single(layer: LinearLayer<S>) -> Self {
        Self {
            layers: vec![layer],
        }
    }

    pub fn in_features(&self) -> usize {
        self.layers[0].in_features()
    }

    pub fn out_features(&self) -> usize {
        self.layers.last().expect("non-empty").out_features()
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            if i > 0 {
                h = h.relu();
            }
            h = layer.forward(tape, h)?;
        }
        Ok(h)
    }
}

impl<S: Scalar> Parameters<S> for Mlp<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        if self.layers.len() == 1 {
            self.layers[0].visit(prefix, f);
        } else {
            self.layers.visit(prefix, f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        if self.layers.len() == 1 {
            self.layers[0].visit_mut(prefix, f);
        } else {
            self.layers.visit_mut(prefix, f);
        }
    }
}

/// Down to rank `r`, back up to width `c`.
#[derive(Debug, Clone)]
pub struct LowRankProjector<S> {
    pub down: LinearLayer<S>,
    pub up: LinearLayer<S>,
    pub rank: usize,
}

impl<S: Scalar> LowRankProjector<S> {
    pub fn new<R: Rng + ?Sized>(width: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank >= width {
            return Err(Error::Rank(format!("rank {rank} must lie in 1..{width}")));
        }
        Ok(Self {
            down: LinearLayer::new(width, rank, true, rng),
            up: LinearLayer::new(rank, width, true, rng),
            rank,
        })
    }

    pub fn forward<'t>(&self, tape: &'t Tape<S>, x: Var<'t, S>) -> Result<Var<'t, S>> {
        let z = self.down.forward(tape, x)?;
        self.up.forward(tape, z)
    }
}

impl<S: Scalar> Parameters<S> for LowRankProjector<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.down.visit(&join(prefix, "down"), f);
        self.up.visit(&join(prefix, "up"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.down.visit_mut(&join(prefix, "down"), f);
        self.up.visit_mut(&join(prefix, "up"), f);
    }
}

/// Input branches of the in-domain approximators.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Modality(Modality),
    Gradient,
}

/// Where an absent auxiliary modality is routed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AbsentRoute {
    /// Through the depth approximator, into the depth slot.
    Depth,
    /// Through a dedicated fourth approximator.
    Dedicated,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SharedEmbedConfig {
    pub width: usize,
    pub rank_k: usize,
    pub explicit_edge: bool,
    pub implicit_learning: bool,
    pub in_domain_approx: bool,
    pub absent_route: AbsentRoute,
    pub hidden_mlp: bool,
}

impl SharedEmbedConfig {
    pub fn new(width: usize, rank_k: usize) -> Self {
        Self {
            width,
            rank_k,
            explicit_edge: true,
            implicit_learning: true,
            in_domain_approx: true,
            absent_route: AbsentRoute::Depth,
            hidden_mlp: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SharedEmbedBlock<S> {
    pub config: SharedEmbedConfig,
    pub sigma_d: Mlp<S>,
    pub sigma_t: Mlp<S>,
    pub sigma_e: Mlp<S>,
    pub sigma_g: Mlp<S>,
    pub sigma_absent: Option<Mlp<S>>,
    /// Single approximator used when in-domain approximation is disabled.
    pub sigma_shared: Option<Mlp<S>>,
    pub phi_r1: Mlp<S>,
    pub phi_r2: Mlp<S>,
    pub big_phi_r: LinearLayer<S>,
}

impl<S: Scalar> SharedEmbedBlock<S> {
    pub fn new<R: Rng + ?Sized>(config: SharedEmbedConfig, rng: &mut R) -> Result<Self> {
        let (c, k, hid) = (config.width, config.rank_k, config.hidden_mlp);
        if k == 0 || k >= c {
            return Err(Error::Rank(format!("rank_k {k} must lie in 1..{c}")));
        }
        let sigma_d = Mlp::new(c, k, hid, rng);
        let sigma_t = Mlp::new(c, k, hid, rng);
        let sigma_e = Mlp::new(c, k, hid, rng);
        let sigma_g = Mlp::new(c, k, hid, rng);
        let sigma_absent =
            (config.absent_route == AbsentRoute::Dedicated).then(|| Mlp::new(c, k, hid, rng));
        let sigma_shared = (!config.in_domain_approx).then(|| Mlp::new(c, k, hid, rng));
        let phi_r1 = Mlp::new(3 * k, k, hid, rng);
        let phi_r2 = Mlp::new(k, k, hid, rng);
        let big_phi_r = LinearLayer::new(k, c, false, rng);
        Ok(Self {
            config,
            sigma_d,
            sigma_t,
            sigma_e,
            sigma_g,
            sigma_absent,
            sigma_shared,
            phi_r1,
            phi_r2,
            big_phi_r,
        })
    }

    pub fn rank_k(&self) -> usize {
        self.config.rank_k
    }

    /// Down-projection of `feat` by the approximator selected by `branch`.
    pub fn in_domain_lowrank<'t>(
        &self,
        tape: &'t Tape<S>,
        feat: Var<'t, S>,
        branch: Branch,
    ) -> Result<Var<'t, S>> {
        let sigma = match branch {
            Branch::Modality(Modality::Depth) => &self.sigma_d,
            Branch::Modality(Modality::Thermal) => &self.sigma_t,
            Branch::Modality(Modality::Event) => &self.sigma_e,
            Branch::Gradient => &self.sigma_g,
            Branch::Modality(Modality::Absent) => {
                return Err(Error::Domain("absent modality has no approximator".into()))
            }
        };
        sigma.forward(tape, feat)
    }

    /// `M_k = φ_R1([D_k, T_k, E_k]) + φ_R2(G_k)`.
    pub fn fuse_lowrank<'t>(
        &self,
        tape: &'t Tape<S>,
        dk: Var<'t, S>,
        tk: Var<'t, S>,
        ek: Var<'t, S>,
        gk: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let d = dk.dims();
        for (name, v) in [("T_k", tk), ("E_k", ek), ("G_k", gk)] {
            if v.dims() != d {
                return Err(Error::shape(format!("{name} {:?} vs D_k {d:?}", v.dims())));
            }
        }
        let joint = self.phi_r1.forward(tape, concat_cols(&[dk, tk, ek])?)?;
        joint.add(self.phi_r2.forward(tape, gk)?)
    }

    /// `F = Φ_R(M_k) + G`.
    pub fn reconstruct<'t>(
        &self,
        tape: &'t Tape<S>,
        mk: Var<'t, S>,
        g: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        if mk.cols() != self.rank_k() || g.cols() != self.config.width {
            return Err(Error::shape(format!(
                "reconstruct expects widths ({}, {}), got {:?} and {:?}",
                self.rank_k(),
                self.config.width,
                mk.dims(),
                g.dims()
            )));
        }
        self.big_phi_r.forward(tape, mk)?.add(g)
    }

    /// Full embedding for one sample. `aux_feat` is the tokenized auxiliary
    /// frame (ignored when `modality` is absent), `g` the gradient feature.
    pub fn forward<'t>(
        &self,
        tape: &'t Tape<S>,
        aux_feat: Var<'t, S>,
        modality: Modality,
        g: Var<'t, S>,
    ) -> Result<Var<'t, S>> {
        let cfg = &self.config;
        let n = g.rows();
        if aux_feat.dims() != g.dims() {
            return Err(Error::shape(format!(
                "auxiliary feature {:?} vs gradient feature {:?}",
                aux_feat.dims(),
                g.dims()
            )));
        }
        let g = if cfg.explicit_edge {
            g
        } else {
            tape.zeros(&[n, cfg.width])
        };
        if !cfg.implicit_learning {
            return Ok(g);
        }

        let feat = if modality == Modality::Absent {
            tape.zeros(&[n, cfg.width])
        } else {
            aux_feat
        };
        let gk = self.in_domain_lowrank(tape, g, Branch::Gradient)?;

        let mk = if let Some(shared) = &self.sigma_shared {
            shared
                .forward(tape, feat)?
                .add(self.phi_r2.forward(tape, gk)?)?
        } else {
            let zero = || tape.zeros(&[n, cfg.rank_k]);
            let (dk, tk, ek) = match modality {
                Modality::Depth => (
                    self.in_domain_lowrank(tape, feat, Branch::Modality(modality))?,
                    zero(),
                    zero(),
                ),
                Modality::Thermal => (
                    zero(),
                    self.in_domain_lowrank(tape, feat, Branch::Modality(modality))?,
                    zero(),
                ),
                Modality::Event => (
                    zero(),
                    zero(),
                    self.in_domain_lowrank(tape, feat, Branch::Modality(modality))?,
                ),
                Modality::Absent => {
                    let sigma = self.sigma_absent.as_ref().unwrap_or(&self.sigma_d);
                    (sigma.forward(tape, feat)?, zero(), zero())
                }
            };
            self.fuse_lowrank(tape, dk, tk, ek, gk)?
        };
        self.reconstruct(tape, mk, g)
    }

    /// Independent per-sample embedding of a mixed-modality batch.
    pub fn forward_batch<'t>(
        &self,
        tape: &'t Tape<S>,
        batch: &[(Var<'t, S>, Modality, Var<'t, S>)],
    ) -> Result<Vec<Var<'t, S>>> {
        batch
            .iter()
            .map(|&(feat, m, g)| self.forward(tape, feat, m, g))
            .collect()
    }
}

impl<S: Scalar> Parameters<S> for SharedEmbedBlock<S> {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor<S>)) {
        self.sigma_d.visit(&join(prefix, "sigma_d"), f);
        self.sigma_t.visit(&join(prefix, "sigma_t"), f);
        self.sigma_e.visit(&join(prefix, "sigma_e"), f);
        self.sigma_g.visit(&join(prefix, "sigma_g"), f);
        self.sigma_absent.visit(&join(prefix, "sigma_absent"), f);
        self.sigma_shared.visit(&join(prefix, "sigma_shared"), f);
        self.phi_r1.visit(&join(prefix, "phi_r1"), f);
        self.phi_r2.visit(&join(prefix, "phi_r2"), f);
        self.big_phi_r.visit(&join(prefix, "big_phi_r"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor<S>)) {
        self.sigma_d.visit_mut(&join(prefix, "sigma_d"), f);
        self.sigma_t.visit_mut(&join(prefix, "sigma_t"), f);
        self.sigma_e.visit_mut(&join(prefix, "sigma_e"), f);
        self.sigma_g.visit_mut(&join(prefix, "sigma_g"), f);
        self.sigma_absent
            .visit_mut(&join(prefix, "sigma_absent"), f);
        self.sigma_shared
            .visit_mut(&join(prefix, "sigma_shared"), f);
        self.phi_r1.visit_mut(&join(prefix, "phi_r1"), f);
        self.phi_r2.visit_mut(&join(prefix, "phi_r2"), f);
        self.big_phi_r.visit_mut(&join(prefix, "big_phi_r"), f);
    }
}

#[cfg(test)]
mod tests;
