//! Band-to-slot alignment by entropy-regularised optimal transport.
//!
//! Input channels are summarised by a shared embedder, scored against learnable
//! slot prototypes, and coupled to slots by log-domain Sinkhorn scaling with
//! uniform marginals. The resulting plan mixes channels into slot maps.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var, CHANNEL_STATS};
use crate::error::{Error, Result};
use crate::nn::Mlp;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Floor applied to Sinkhorn log-sums; the log-domain form of the `ε` guard.
pub const LOG_SUM_FLOOR: f64 = -60.0;

/// Channel-padded input plus its validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PaddedInput {
    pub tensor: Tensor,
    /// `true` for channels copied from the source, `false` for repeats.
    pub valid: Vec<bool>,
}

/// Pads `C₀×H×W` up to `channels` by cyclically repeating the source channels.
pub fn pad_channels(x: &Tensor, channels: usize) -> Result<PaddedInput> {
    if x.rank() != 3 {
        return Err(Error::shape("pad_channels", x.shape(), &[]));
    }
    let c0 = x.shape()[0];
    if c0 > channels {
        return Err(Error::config(format!(
            "input has {c0} channels, more than the unified count {channels}"
        )));
    }
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let mut data = Vec::with_capacity(channels * h * w);
    for c in 0..channels {
        data.extend_from_slice(x.channel(c % c0));
    }
    Ok(PaddedInput {
        tensor: Tensor::new(&[channels, h, w], data)?,
        valid: (0..channels).map(|c| c < c0).collect(),
    })
}

/// Shared per-channel embedder: six appearance statistics through a two-layer MLP.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ChannelEmbedder {
    pub mlp: Mlp,
    pub d_e: usize,
}

impl ChannelEmbedder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        hidden: usize,
        d_e: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            mlp: Mlp::init(store, name, CHANNEL_STATS, hidden, d_e, rng),
            d_e,
        }
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let mlp = Mlp::load(store, name)?;
        Ok(Self {
            d_e: mlp.second.d_out,
            mlp,
        })
    }
}

/// `E = f_emb(x)`: one `d_e` row per channel of `x`.
pub fn embed_channels<'t>(
    x: Var<'t>,
    embedder: &ChannelEmbedder,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let stats = x.channel_stats()?;
    embedder.mlp.forward(p, stats)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SlotBankDims {
    pub slots: usize,
    pub d_e: usize,
    pub d_p: usize,
    pub tau: f64,
}

/// Learnable slot prototypes with their score projections and temperature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlotBank {
    pub prototypes: ParamId,
    pub w_slot: ParamId,
    pub w_embed: ParamId,
    pub dims: SlotBankDims,
}

impl SlotBank {
    /// Prototypes and projections drawn i.i.d. normal with std `1/√d_e`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: SlotBankDims,
        rng: &mut R,
    ) -> Result<Self> {
        validate_dims(&dims)?;
        let std = 1.0 / (dims.d_e as f64).sqrt();
        Ok(Self {
            prototypes: store.add(
                format!("{name}.prototypes"),
                Tensor::randn(&[dims.slots, dims.d_e], std, rng),
            ),
            w_slot: store.add(
                format!("{name}.w_slot"),
                Tensor::randn(&[dims.d_e, dims.d_p], std, rng),
            ),
            w_embed: store.add(
                format!("{name}.w_embed"),
                Tensor::randn(&[dims.d_e, dims.d_p], std, rng),
            ),
            dims,
        })
    }

    pub fn load(store: &ParamStore, name: &str, dims: SlotBankDims) -> Result<Self> {
        validate_dims(&dims)?;
        let bank = Self {
            prototypes: store.require(&format!("{name}.prototypes"))?,
            w_slot: store.require(&format!("{name}.w_slot"))?,
            w_embed: store.require(&format!("{name}.w_embed"))?,
            dims,
        };
        let expect = [
            (bank.prototypes, [dims.slots, dims.d_e]),
            (bank.w_slot, [dims.d_e, dims.d_p]),
            (bank.w_embed, [dims.d_e, dims.d_p]),
        ];
        for (id, shape) in expect {
            if store.get(id).shape() != shape {
                return Err(Error::shape("slot bank", store.get(id).shape(), &shape));
            }
        }
        Ok(bank)
    }

    /// Writes the bank's tensors and a manifest listing `S`, `d_e`, `d_p`, `τ`.
    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        store.save_subset(
            dir,
            "slot_bank",
            serde_json::to_value(self.dims)?,
            &[self.prototypes, self.w_slot, self.w_embed],
        )
    }

    /// Reads a bank written by [`SlotBank::save`].
    pub fn read(dir: &Path) -> Result<(ParamStore, SlotBank)> {
        let (store, kind, meta) = ParamStore::load_bundle(dir)?;
        if kind != "slot_bank" {
            return Err(Error::input(format!("expected a slot_bank bundle, found {kind}")));
        }
        let dims: SlotBankDims = serde_json::from_value(meta)?;
        let name = store
            .name(store.ids().next().ok_or_else(|| Error::input("empty bundle"))?)
            .trim_end_matches(".prototypes")
            .to_string();
        let bank = SlotBank::load(&store, &name, dims)?;
        Ok((store, bank))
    }
}

fn validate_dims(d: &SlotBankDims) -> Result<()> {
    if d.slots == 0 || d.d_e == 0 || d.d_p == 0 {
        return Err(Error::config("slot bank dimensions must be positive"));
    }
    if !(d.tau > 0.0 && d.tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {}", d.tau)));
    }
    Ok(())
}

/// `L = (S·W_S)(E·W_E)ᵀ / √d_p`, shape `S×C`.
pub fn matching_logits<'t>(
    prototypes: Var<'t>,
    w_slot: Var<'t>,
    w_embed: Var<'t>,
    embeddings: Var<'t>,
) -> Result<Var<'t>> {
    let d_p = w_slot.shape()[1];
    if w_embed.shape()[1] != d_p {
        return Err(Error::shape("matching_logits", &w_slot.shape(), &w_embed.shape()));
    }
    let slots = prototypes.matmul(w_slot)?;
    let chans = embeddings.matmul(w_embed)?;
    Ok(slots.matmul(chans.transpose()?)?.scale(1.0 / (d_p as f64).sqrt()))
}

pub fn bank_logits<'t>(bank: &SlotBank, p: &Bound<'t>, embeddings: Var<'t>) -> Result<Var<'t>> {
    matching_logits(
        p[bank.prototypes],
        p[bank.w_slot],
        p[bank.w_embed],
        embeddings,
    )
}

/// Stopping rule for [`sinkhorn_log`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SinkhornStop {
    /// Exactly this many row/column updates.
    Fixed(usize),
    /// Stop once both marginal residuals fall below `tolerance`, or at `max_iters`.
    Converge { tolerance: f64, max_iters: usize },
}

/// Entropic transport plan with dual potentials and convergence diagnostics.
#[derive(Debug, Clone)]
pub struct TransportPlan<'t> {
    /// `P = diag(u)·K·diag(v)`, shape `S×C`.
    pub plan: Var<'t>,
    pub log_u: Var<'t>,
    pub log_v: Var<'t>,
    pub iterations: usize,
    /// Max-norm violation over both marginals.
    pub marginal_residual: f64,
}

impl TransportPlan<'_> {
    pub fn u(&self) -> Tensor {
        self.log_u.value().map(f64::exp)
    }

    pub fn v(&self) -> Tensor {
        self.log_v.value().map(f64::exp)
    }
}

pub fn uniform_marginal(n: usize) -> Vec<f64> {
    vec![1.0 / n as f64; n]
}

/// Max-norm violation of the row (`a`) and column (`b`) marginals of `plan`.
pub fn marginal_residual(plan: &Tensor, a: &[f64], b: &[f64]) -> f64 {
    let (s, c) = (plan.shape()[0], plan.shape()[1]);
    let mut worst: f64 = 0.0;
    for i in 0..s {
        worst = worst.max((plan.row(i).iter().sum::<f64>() - a[i]).abs());
    }
    for j in 0..c {
        let col: f64 = (0..s).map(|i| plan.data()[i * c + j]).sum();
        worst = worst.max((col - b[j]).abs());
    }
    worst
}

fn check_marginal(name: &str, m: &[f64]) -> Result<()> {
    if m.iter().any(|&x| !(x > 0.0 && x.is_finite())) {
        return Err(Error::config(format!("marginal {name} must be strictly positive")));
    }
    let total: f64 = m.iter().sum();
    if (total - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("marginal {name} sums to {total}, not 1")));
    }
    Ok(())
}

/// Log-domain Sinkhorn scaling of `K = exp(L/τ)` starting from `v⁽⁰⁾ = 1`.
///
/// Each iteration sets `log u = log a − lse(log K + log v)` over channels, then
/// `log v = log b − lse(log K + log u)` over slots, with both log-sums floored at
/// [`LOG_SUM_FLOOR`]. Every step is recorded on the tape, so the plan is
/// differentiable through the unrolled iterations.
pub fn sinkhorn_log<'t>(
    logits: Var<'t>,
    tau: f64,
    a: &[f64],
    b: &[f64],
    stop: SinkhornStop,
) -> Result<TransportPlan<'t>> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::config(format!("temperature must be positive, got {tau}")));
    }
    let shape = logits.shape();
    if shape.len() != 2 || shape[0] != a.len() || shape[1] != b.len() {
        return Err(Error::shape("sinkhorn_log", &shape, &[a.len(), b.len()]));
    }
    check_marginal("a", a)?;
    check_marginal("b", b)?;
    if !logits.value().all_finite() {
        return Err(Error::input("sinkhorn_log: non-finite logits"));
    }
    let (max_iters, tolerance) = match stop {
        SinkhornStop::Fixed(n) => (n, None),
        SinkhornStop::Converge {
            tolerance,
            max_iters,
        } => (max_iters, Some(tolerance)),
    };
    if max_iters == 0 {
        return Err(Error::config("sinkhorn needs at least one iteration"));
    }

    let tape: &Tape = logits.tape();
    let (s, c) = (shape[0], shape[1]);
    let log_k = logits.scale(1.0 / tau);
    let log_a = tape.constant(Tensor::from_vec(a.iter().map(|x| x.ln()).collect()));
    let log_b = tape.constant(Tensor::from_vec(b.iter().map(|x| x.ln()).collect()));
    let mut log_v = tape.constant(Tensor::zeros(&[c]));
    let mut log_u = tape.constant(Tensor::zeros(&[s]));
    let mut iterations = 0;

    for _ in 0..max_iters {
        let row_lse = log_k.add(log_v)?.logsumexp_lastdim().clamp_min(LOG_SUM_FLOOR);
        log_u = log_a.sub(row_lse)?;
        let col_lse = log_k
            .add(log_u.reshape(&[s, 1])?)?
            .transpose()?
            .logsumexp_lastdim()
            .clamp_min(LOG_SUM_FLOOR);
        log_v = log_b.sub(col_lse)?;
        iterations += 1;
        if let Some(tol) = tolerance {
            let p = plan_values(&log_u.value(), &log_k.value(), &log_v.value());
            if marginal_residual(&p, a, b) < tol {
                break;
            }
        }
    }

    let plan = log_u.reshape(&[s, 1])?.add(log_k)?.add(log_v)?.exp();
    let marginal_residual = marginal_residual(&plan.value(), a, b);
    Ok(TransportPlan {
        plan,
        log_u,
        log_v,
        iterations,
        marginal_residual,
    })
}

fn plan_values(log_u: &Tensor, log_k: &Tensor, log_v: &Tensor) -> Tensor {
    let (s, c) = (log_k.shape()[0], log_k.shape()[1]);
    let mut p = Tensor::zeros(&[s, c]);
    for i in 0..s {
        for j in 0..c {
            p.data_mut()[i * c + j] =
                (log_u.data()[i] + log_k.data()[i * c + j] + log_v.data()[j]).exp();
        }
    }
    p
}

/// `Z = P·x` along the channel mode, optionally rescaled by `S` so the average slot
/// carries the magnitude of the average channel.
pub fn route_channels<'t>(plan: Var<'t>, x: Var<'t>, rescale: bool) -> Result<Var<'t>> {
    let (ps, xs) = (plan.shape(), x.shape());
    if ps.len() != 2 || xs.len() != 3 || ps[1] != xs[0] {
        return Err(Error::shape("route_channels", &ps, &xs));
    }
    let (h, w) = (xs[1], xs[2]);
    let flat = x.reshape(&[xs[0], h * w])?;
    let z = plan.matmul(flat)?.reshape(&[ps[0], h, w])?;
    Ok(if rescale { z.scale(ps[0] as f64) } else { z })
}

/// Shannon entropy `−Σ P log P` of a plan (zero entries contribute nothing).
pub fn plan_entropy(plan: &Tensor) -> f64 {
    -plan
        .data()
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}
