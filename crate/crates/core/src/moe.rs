//! Fused mixture-of-experts operators: routed convolution, channel experts and
//! low-rank attention experts.
//!
//! Every operator merges the selected experts into one set of weights before
//! touching the feature map, so the cost of a forward pass does not grow with
//! `k`.

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::Linear;
use crate::params::{Bound, ParamId, ParamStore};
use crate::routing::RoutingDecision;
use crate::tensor::Tensor;

/// Std of the random LoRA factor at initialisation.
pub const LORA_INIT_STD: f64 = 0.02;

fn check_decision(decision: &RoutingDecision<'_>, experts: usize, op: &str) -> Result<()> {
    if decision.experts != experts || decision.indices.iter().any(|&e| e >= experts) {
        return Err(Error::input(format!(
            "{op}: routing decision over {} experts does not match an expert set of {experts}",
            decision.experts
        )));
    }
    Ok(())
}

/// `Σ_j α_j · items[indices_j]`.
fn mix<'t>(decision: &RoutingDecision<'t>, items: &[Var<'t>]) -> Result<Var<'t>> {
    let mut acc: Option<Var<'t>> = None;
    for (slot, &e) in decision.indices.iter().enumerate() {
        let term = items[e].mul(decision.weight(slot)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    acc.ok_or_else(|| Error::input("routing decision selects no experts"))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExpertSetDims {
    pub experts: usize,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
}

/// `E` convolution experts of identical shape.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvExpertSet {
    pub kernels: Vec<ParamId>,
    pub biases: Vec<ParamId>,
    pub dims: ExpertSetDims,
}

impl ConvExpertSet {
    /// He-normal kernels, zero biases.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: ExpertSetDims,
        rng: &mut R,
    ) -> Result<Self> {
        let std = (2.0 / (dims.c_in * dims.kernel * dims.kernel) as f64).sqrt();
        Self::init_with_std(store, name, dims, std, rng)
    }

    pub fn init_with_std<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: ExpertSetDims,
        std: f64,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.kernel % 2 == 0 {
            return Err(Error::config(format!(
                "conv experts need an odd kernel size, got {}",
                dims.kernel
            )));
        }
        let shape = [dims.c_out, dims.c_in, dims.kernel, dims.kernel];
        let mut kernels = Vec::with_capacity(dims.experts);
        let mut biases = Vec::with_capacity(dims.experts);
        for e in 0..dims.experts {
            kernels.push(store.add(format!("{name}.{e}.kernel"), Tensor::randn(&shape, std, rng)));
            biases.push(store.add(format!("{name}.{e}.bias"), Tensor::zeros(&[dims.c_out])));
        }
        Ok(Self {
            kernels,
            biases,
            dims,
        })
    }

    pub fn load(store: &ParamStore, name: &str, experts: usize) -> Result<Self> {
        let mut kernels = Vec::with_capacity(experts);
        let mut biases = Vec::with_capacity(experts);
        for e in 0..experts {
            kernels.push(store.require(&format!("{name}.{e}.kernel"))?);
            biases.push(store.require(&format!("{name}.{e}.bias"))?);
        }
        let first = store
            .get(*kernels.first().ok_or_else(|| Error::config("expert set needs E >= 1"))?)
            .shape()
            .to_vec();
        for &k in &kernels {
            if store.get(k).shape() != first.as_slice() {
                return Err(Error::input(format!("{name}: experts differ in kernel shape")));
            }
        }
        Ok(Self {
            kernels,
            biases,
            dims: ExpertSetDims {
                experts,
                c_out: first[0],
                c_in: first[1],
                kernel: first[2],
            },
        })
    }

    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        let ids: Vec<ParamId> = self
            .kernels
            .iter()
            .zip(&self.biases)
            .flat_map(|(&k, &b)| [k, b])
            .collect();
        store.save_subset(dir, "conv_expert_set", serde_json::to_value(self.dims)?, &ids)
    }

    /// Reads a set written by [`ConvExpertSet::save`].
    pub fn read(dir: &Path) -> Result<(ParamStore, ConvExpertSet)> {
        let (store, kind, meta) = ParamStore::load_bundle(dir)?;
        if kind != "conv_expert_set" {
            return Err(Error::input(format!("expected a conv expert set, found {kind}")));
        }
        let dims: ExpertSetDims = serde_json::from_value(meta)?;
        let name = store
            .name(store.ids().next().ok_or_else(|| Error::input("empty expert set"))?)
            .rsplitn(3, '.')
            .nth(2)
            .unwrap_or_default()
            .to_string();
        let set = ConvExpertSet::load(&store, &name, dims.experts)?;
        if set.dims != dims {
            return Err(Error::input("expert set manifest disagrees with its tensors"));
        }
        Ok((store, set))
    }
}

/// Routing-weighted kernel and bias: `W = Σ α_j W_j`, `b = Σ α_j b_j`.
pub fn fuse_conv_experts<'t>(
    decision: &RoutingDecision<'t>,
    set: &ConvExpertSet,
    p: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    check_decision(decision, set.dims.experts, "fuse_conv_experts")?;
    let kernels: Vec<Var<'t>> = set.kernels.iter().map(|&k| p[k]).collect();
    let biases: Vec<Var<'t>> = set.biases.iter().map(|&b| p[b]).collect();
    Ok((mix(decision, &kernels)?, mix(decision, &biases)?))
}

/// One convolution with the fused kernel.
pub fn conv_moe_forward<'t>(
    features: Var<'t>,
    decision: &RoutingDecision<'t>,
    set: &ConvExpertSet,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let (w, b) = fuse_conv_experts(decision, set, p)?;
    features.conv2d(w, b)
}

/// `E` channel-attention generators, each a linear map on pooled features.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelExpertSet {
    pub generators: Vec<Linear>,
    pub channels: usize,
}

impl ChannelExpertSet {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        experts: usize,
        channels: usize,
        rng: &mut R,
    ) -> Self {
        let std = 1.0 / (channels as f64).sqrt();
        Self {
            generators: (0..experts)
                .map(|e| Linear::init_with_std(store, &format!("{name}.{e}"), channels, channels, true, std, rng))
                .collect(),
            channels,
        }
    }

    pub fn load(store: &ParamStore, name: &str, experts: usize) -> Result<Self> {
        let generators = (0..experts)
            .map(|e| Linear::load(store, &format!("{name}.{e}")))
            .collect::<Result<Vec<_>>>()?;
        let channels = generators
            .first()
            .ok_or_else(|| Error::config("expert set needs E >= 1"))?
            .d_in;
        Ok(Self {
            generators,
            channels,
        })
    }

    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        let ids: Vec<ParamId> = self
            .generators
            .iter()
            .flat_map(|g| std::iter::once(g.weight).chain(g.bias))
            .collect();
        let meta = serde_json::json!({"experts": self.generators.len(), "channels": self.channels});
        store.save_subset(dir, "channel_expert_set", meta, &ids)
    }
}

/// Channel attention `(Σ α_j β_j) ⊙ F` with `β_e = sigmoid(linear_e(GAP(F)))`.
pub fn moce_forward<'t>(
    features: Var<'t>,
    decision: &RoutingDecision<'t>,
    set: &ChannelExpertSet,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    check_decision(decision, set.generators.len(), "moce_forward")?;
    let shape = features.shape();
    if shape.len() != 3 || shape[0] != set.channels {
        return Err(Error::shape("moce_forward", &shape, &[set.channels]));
    }
    let pooled = features.global_avg_pool()?;
    // only the selected generators are evaluated
    let mut betas: Vec<Option<Var<'t>>> = vec![None; set.generators.len()];
    for &e in &decision.indices {
        betas[e] = Some(set.generators[e].forward(p, pooled)?.sigmoid());
    }
    let mut acc: Option<Var<'t>> = None;
    for (slot, &e) in decision.indices.iter().enumerate() {
        let term = betas[e].expect("selected").mul(decision.weight(slot)?)?;
        acc = Some(match acc {
            Some(a) => a.add(term)?,
            None => term,
        });
    }
    let beta = acc
        .ok_or_else(|| Error::input("routing decision selects no experts"))?
        .reshape(&[set.channels, 1, 1])?;
    features.mul(beta)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MoraDims {
    pub experts: usize,
    /// Token width; also the query/key/value width.
    pub d: usize,
    pub rank: usize,
}

/// Single-head attention with shared query/key projections, per-expert value
/// projections and per-expert low-rank query/key adapters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MoraParams {
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: Vec<ParamId>,
    pub a_q: Vec<ParamId>,
    pub b_q: Vec<ParamId>,
    pub a_k: Vec<ParamId>,
    pub b_k: Vec<ParamId>,
    pub dims: MoraDims,
}

impl MoraParams {
    /// Base projections with std `1/√d`; adapters `A ~ N(0, 0.02²)`, `B = 0`.
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        dims: MoraDims,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.experts == 0 || dims.rank == 0 || dims.d == 0 {
            return Err(Error::config("MoRA needs E, r and d all positive"));
        }
        let (d, r) = (dims.d, dims.rank);
        let std = 1.0 / (d as f64).sqrt();
        let w_q = store.add(format!("{name}.w_q"), Tensor::randn(&[d, d], std, rng));
        let w_k = store.add(format!("{name}.w_k"), Tensor::randn(&[d, d], std, rng));
        let mut out = Self {
            w_q,
            w_k,
            w_v: Vec::new(),
            a_q: Vec::new(),
            b_q: Vec::new(),
            a_k: Vec::new(),
            b_k: Vec::new(),
            dims,
        };
        for e in 0..dims.experts {
            out.w_v.push(store.add(format!("{name}.{e}.w_v"), Tensor::randn(&[d, d], std, rng)));
            out.a_q.push(store.add(format!("{name}.{e}.a_q"), Tensor::randn(&[d, r], LORA_INIT_STD, rng)));
            out.b_q.push(store.add(format!("{name}.{e}.b_q"), Tensor::zeros(&[d, r])));
            out.a_k.push(store.add(format!("{name}.{e}.a_k"), Tensor::randn(&[d, r], LORA_INIT_STD, rng)));
            out.b_k.push(store.add(format!("{name}.{e}.b_k"), Tensor::zeros(&[d, r])));
        }
        Ok(out)
    }

    pub fn load(store: &ParamStore, name: &str, experts: usize) -> Result<Self> {
        let w_q = store.require(&format!("{name}.w_q"))?;
        let w_k = store.require(&format!("{name}.w_k"))?;
        let per = |suffix: &str| -> Result<Vec<ParamId>> {
            (0..experts)
                .map(|e| store.require(&format!("{name}.{e}.{suffix}")))
                .collect()
        };
        let a_q = per("a_q")?;
        let d = store.get(w_q).shape()[0];
        let rank = store
            .get(*a_q.first().ok_or_else(|| Error::config("MoRA needs E >= 1"))?)
            .shape()[1];
        Ok(Self {
            w_q,
            w_k,
            w_v: per("w_v")?,
            b_q: per("b_q")?,
            a_k: per("a_k")?,
            b_k: per("b_k")?,
            a_q,
            dims: MoraDims { experts, d, rank },
        })
    }

    pub fn adapter_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.a_q
            .iter()
            .chain(&self.b_q)
            .chain(&self.a_k)
            .chain(&self.b_k)
            .copied()
    }

    pub fn save(&self, store: &ParamStore, dir: &Path) -> Result<()> {
        let mut ids = vec![self.w_q, self.w_k];
        ids.extend(&self.w_v);
        ids.extend(self.adapter_ids());
        store.save_subset(dir, "mora_expert_set", serde_json::to_value(self.dims)?, &ids)
    }
}

fn check_tokens(tokens: Var<'_>, d: usize) -> Result<()> {
    let s = tokens.shape();
    if s.len() != 2 || s[1] != d {
        return Err(Error::shape("mora", &s, &[d]));
    }
    Ok(())
}

/// Low-rank update `F·A·Bᵀ`.
fn lora<'t>(tokens: Var<'t>, a: Var<'t>, b: Var<'t>) -> Result<Var<'t>> {
    tokens.matmul(a)?.matmul(b.transpose()?)
}

fn attention_map<'t>(q: Var<'t>, k: Var<'t>, d: usize) -> Result<Var<'t>> {
    Ok(q.matmul(k.transpose()?)?
        .scale(1.0 / (d as f64).sqrt())
        .softmax_lastdim())
}

/// Fused attention map and value matrix.
fn fused_parts<'t>(
    tokens: Var<'t>,
    decision: &RoutingDecision<'t>,
    mora: &MoraParams,
    p: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    check_decision(decision, mora.dims.experts, "mora_fused_attention")?;
    check_tokens(tokens, mora.dims.d)?;
    let mut dq = Vec::with_capacity(mora.dims.experts);
    let mut dk = Vec::with_capacity(mora.dims.experts);
    let mut wv = Vec::with_capacity(mora.dims.experts);
    for e in 0..mora.dims.experts {
        // unselected experts are never read by `mix`; keep placeholders cheap
        if decision.indices.contains(&e) {
            dq.push(lora(tokens, p[mora.a_q[e]], p[mora.b_q[e]])?);
            dk.push(lora(tokens, p[mora.a_k[e]], p[mora.b_k[e]])?);
        } else {
            dq.push(tokens);
            dk.push(tokens);
        }
        wv.push(p[mora.w_v[e]]);
    }
    let q = tokens.matmul(p[mora.w_q])?.add(mix(decision, &dq)?)?;
    let k = tokens.matmul(p[mora.w_k])?.add(mix(decision, &dk)?)?;
    let v = tokens.matmul(mix(decision, &wv)?)?;
    Ok((attention_map(q, k, mora.dims.d)?, v))
}

/// Attention map and values of a single expert.
fn expert_parts<'t>(
    tokens: Var<'t>,
    expert: usize,
    mora: &MoraParams,
    p: &Bound<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let q = tokens
        .matmul(p[mora.w_q])?
        .add(lora(tokens, p[mora.a_q[expert]], p[mora.b_q[expert]])?)?;
    let k = tokens
        .matmul(p[mora.w_k])?
        .add(lora(tokens, p[mora.a_k[expert]], p[mora.b_k[expert]])?)?;
    let v = tokens.matmul(p[mora.w_v[expert]])?;
    Ok((attention_map(q, k, mora.dims.d)?, v))
}

/// `softmax((Q₀+ΔQ)(K₀+ΔK)ᵀ/√d)·V` with routing-fused adapters and values.
/// `tokens` is `N×d`; so is the result.
pub fn mora_fused_attention<'t>(
    tokens: Var<'t>,
    decision: &RoutingDecision<'t>,
    mora: &MoraParams,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    let (attn, v) = fused_parts(tokens, decision, mora, p)?;
    attn.matmul(v)
}

/// Reference mixture `Σ α_j softmax(A_j)·V_j`, one full attention per expert.
pub fn per_expert_attention_oracle<'t>(
    tokens: Var<'t>,
    decision: &RoutingDecision<'t>,
    mora: &MoraParams,
    p: &Bound<'t>,
) -> Result<Var<'t>> {
    check_decision(decision, mora.dims.experts, "per_expert_attention_oracle")?;
    check_tokens(tokens, mora.dims.d)?;
    let mut outs = vec![tokens; mora.dims.experts];
    for &e in &decision.indices {
        let (attn, v) = expert_parts(tokens, e, mora, p)?;
        outs[e] = attn.matmul(v)?;
    }
    mix(decision, &outs)
}

/// Fused-vs-exact deviations at one adapter scale.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MoraErrorReport {
    pub epsilon: f64,
    /// `max |Y_fused − Y_multi|`.
    pub output_max_abs: f64,
    /// `max |Σα_j softmax(A_j) − softmax(A_fused)|`: the attention-map remainder.
    pub attention_max_abs: f64,
}

/// Scales every adapter factor by `√ε` and measures the fused-vs-exact gap on a
/// frozen copy of the parameters, once per requested `ε`.
pub fn mora_error_scaling(
    tokens: &Tensor,
    mix_weights: &[(usize, f64)],
    store: &ParamStore,
    mora: &MoraParams,
    epsilons: &[f64],
) -> Result<Vec<MoraErrorReport>> {
    let mut reports = Vec::with_capacity(epsilons.len());
    for &eps in epsilons {
        if !(eps >= 0.0) {
            return Err(Error::config(format!("adapter scale must be nonnegative, got {eps}")));
        }
        let mut scaled = store.clone();
        for id in mora.adapter_ids() {
            *scaled.get_mut(id) = store.get(id).scale(eps.sqrt());
        }
        let tape = Tape::new();
        let p = scaled.bind_frozen(&tape);
        let x = tape.constant(tokens.clone());
        let decision = RoutingDecision::fixed(&tape, mora.dims.experts, mix_weights)?;
        let fused = mora_fused_attention(x, &decision, mora, &p)?.value();
        let exact = per_expert_attention_oracle(x, &decision, mora, &p)?.value();
        let (fused_map, _) = fused_parts(x, &decision, mora, &p)?;
        let mut maps = vec![x; mora.dims.experts];
        for &e in &decision.indices {
            maps[e] = expert_parts(x, e, mora, &p)?.0;
        }
        let mixed_map = mix(&decision, &maps)?;
        reports.push(MoraErrorReport {
            epsilon: eps,
            output_max_abs: fused.max_abs_diff(&exact)?,
            attention_max_abs: mixed_map.value().max_abs_diff(&fused_map.value())?,
        });
    }
    Ok(reports)
}

/// Least-squares slope of `log err` against `log ε`, skipping zero errors.
pub fn log_log_slope(points: &[(f64, f64)]) -> Option<f64> {
    let pts: Vec<(f64, f64)> = points
        .iter()
        .filter(|(x, y)| *x > 0.0 && *y > 0.0)
        .map(|(x, y)| (x.ln(), y.ln()))
        .collect();
    if pts.len() < 2 {
        return None;
    }
    let n = pts.len() as f64;
    let mx = pts.iter().map(|p| p.0).sum::<f64>() / n;
    let my = pts.iter().map(|p| p.1).sum::<f64>() / n;
    let sxy: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let sxx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
    Some(sxy / sxx)
}

/// `C×H×W` feature map to `HW×C` tokens.
pub fn to_tokens(features: Var<'_>) -> Result<Var<'_>> {
    let s = features.shape();
    if s.len() != 3 {
        return Err(Error::shape("to_tokens", &s, &[]));
    }
    features.reshape(&[s[0], s[1] * s[2]])?.transpose()
}

/// Inverse of [`to_tokens`].
pub fn from_tokens(tokens: Var<'_>, height: usize, width: usize) -> Result<Var<'_>> {
    let c = tokens.shape()[1];
    tokens.transpose()?.reshape(&[c, height, width])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_all, FD_STEP};
    use crate::rng;
    use crate::routing::route_from_logits;

    fn conv_set(experts: usize, c_in: usize, c_out: usize, seed: u64) -> (ParamStore, ConvExpertSet) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, 0);
        let set = ConvExpertSet::init(
            &mut store,
            "conv",
            ExpertSetDims {
                experts,
                c_in,
                c_out,
                kernel: 3,
            },
            &mut r,
        )
        .unwrap();
        (store, set)
    }

    #[test]
    fn one_hot_routing_selects_expert() {
        let (store, set) = conv_set(4, 2, 3, 1);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let d = RoutingDecision::fixed(&tape, 4, &[(2, 1.0)]).unwrap();
        let (w, b) = fuse_conv_experts(&d, &set, &p).unwrap();
        assert_eq!(*w.value(), *store.get(set.kernels[2]));
        assert_eq!(*b.value(), *store.get(set.biases[2]));
    }

    #[test]
    fn identical_experts_fuse_to_themselves() {
        let (mut store, set) = conv_set(3, 2, 2, 2);
        let k0 = store.get(set.kernels[0]).clone();
        for &k in &set.kernels {
            *store.get_mut(k) = k0.clone();
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let d = RoutingDecision::fixed(&tape, 3, &[(1, 0.3), (2, 0.7)]).unwrap();
        let (w, _) = fuse_conv_experts(&d, &set, &p).unwrap();
        assert!(w.value().max_abs_diff(&k0).unwrap() < 1e-15);
    }

    #[test]
    fn mismatched_decision_is_rejected() {
        let (store, set) = conv_set(2, 1, 1, 3);
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let d = RoutingDecision::fixed(&tape, 3, &[(2, 1.0)]).unwrap();
        assert!(fuse_conv_experts(&d, &set, &p).is_err());
        let even = ConvExpertSet::init(
            &mut ParamStore::new(),
            "x",
            ExpertSetDims {
                experts: 1,
                c_in: 1,
                c_out: 1,
                kernel: 4,
            },
            &mut rng::stream(0, 0),
        );
        assert!(matches!(even, Err(Error::Config(_))));
    }

    #[test]
    fn conv_set_round_trip() {
        let (store, set) = conv_set(3, 2, 2, 4);
        let dir = tempfile::tempdir().unwrap();
        set.save(&store, dir.path()).unwrap();
        let (back_store, back) = ConvExpertSet::read(dir.path()).unwrap();
        assert_eq!(back.dims, set.dims);
        for (a, b) in set.kernels.iter().zip(&back.kernels) {
            assert_eq!(store.get(*a), back_store.get(*b));
        }
    }

    #[test]
    fn moce_saturated_gate_is_identity() {
        let mut store = ParamStore::new();
        let set = ChannelExpertSet::init(&mut store, "ca", 2, 3, &mut rng::stream(5, 0));
        for g in &set.generators {
            *store.get_mut(g.weight) = Tensor::zeros(&[3, 3]);
            *store.get_mut(g.bias.unwrap()) = Tensor::full(&[3], 50.0);
        }
        let tape = Tape::new();
        let p = store.bind_frozen(&tape);
        let x = Tensor::randn(&[3, 4, 4], 1.0, &mut rng::stream(6, 0));
        let d = RoutingDecision::fixed(&tape, 2, &[(0, 0.4), (1, 0.6)]).unwrap();
        let y = moce_forward(tape.constant(x.clone()), &d, &set, &p).unwrap();
        assert!(y.value().max_abs_diff(&x).unwrap() < 1e-12);
    }

    fn mora_setup(seed: u64, experts: usize, d: usize, rank: usize) -> (ParamStore, MoraParams) {
        let mut store = ParamStore::new();
        let mut r = rng::stream(seed, 0);
        let mora = MoraParams::init(&mut store, "attn", MoraDims { experts, d, rank }, &mut r).unwrap();
        for id in mora.adapter_ids().collect::<Vec<_>>() {
            let shape = store.get(id).shape().to_vec();
            *store.get_mut(id) = Tensor::randn(&shape, 1.0, &mut r);
        }
        (store, mora)
    }

    #[test]
    fn lora_init_makes_fused_exact() {
        let mut store = ParamStore::new();
        let mora = MoraParams::init(
            &mut store,
            "attn",
            MoraDims {
                experts: 3,
                d: 6,
                rank: 2,
            },
            &mut rng::stream(7, 0),
        )
        .unwrap();
        let x = Tensor::randn(&[5, 6], 1.0, &mut rng::stream(8, 0));
        let reps = mora_error_scaling(&x, &[(0, 0.5), (2, 0.5)], &store, &mora, &[1.0]).unwrap();
        assert!(reps[0].output_max_abs < 1e-12 && reps[0].attention_max_abs < 1e-12);
    }

    #[test]
    fn attention_remainder_is_second_order() {
        let (store, mora) = mora_setup(9, 4, 8, 2);
        let x = Tensor::randn(&[6, 8], 1.0, &mut rng::stream(10, 0));
        let reps = mora_error_scaling(&x, &[(1, 0.6), (3, 0.4)], &store, &mora, &[1e-3, 2e-3]).unwrap();
        let ratio = reps[1].attention_max_abs / reps[0].attention_max_abs;
        assert!((2.5..=6.0).contains(&ratio), "ratio {ratio}");
        let zero = mora_error_scaling(&x, &[(1, 0.6), (3, 0.4)], &store, &mora, &[0.0]).unwrap();
        assert!(zero[0].attention_max_abs < 1e-15);
    }

    #[test]
    fn slope_fit_recovers_power() {
        let pts: Vec<(f64, f64)> = [1e-3, 1e-2, 1e-1].iter().map(|&x| (x, 3.0 * x * x)).collect();
        assert!((log_log_slope(&pts).unwrap() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn mora_gradient_check() {
        let (store, mora) = mora_setup(11, 2, 3, 1);
        let x = Tensor::randn(&[4, 3], 1.0, &mut rng::stream(12, 0));
        let w = Tensor::randn(&[4, 3], 1.0, &mut rng::stream(13, 0));
        let mut inputs = vec![x];
        inputs.extend(store.ids().map(|id| store.get(id).clone()));
        let check = check_all(
            &inputs,
            |v| {
                let tape = v[0].tape();
                let p = Bound::from_vars(v[1..].to_vec());
                let logits = tape.constant(Tensor::from_vec(vec![0.2, -0.1]));
                let d = route_from_logits(logits, 2)?;
                let y = mora_fused_attention(v[0], &d, &mora, &p)?;
                Ok(y.mul(tape.constant(w.clone()))?.sum())
            },
            FD_STEP,
        )
        .unwrap();
        assert!(check.rel_error < 1e-6, "{check:?}");
    }

    #[test]
    fn token_layout_round_trip() {
        let tape = Tape::new();
        let x = Tensor::randn(&[3, 2, 4], 1.0, &mut rng::stream(14, 0));
        let t = to_tokens(tape.constant(x.clone())).unwrap();
        assert_eq!(t.shape(), vec![8, 3]);
        assert_eq!(t.value().at(&[5, 2]), x.at(&[2, 1, 1]));
        assert_eq!(*from_tokens(t, 2, 4).unwrap().value(), x);
    }
}
