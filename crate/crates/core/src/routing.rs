//! Task-conditioned routing: prompt, image and feature context fused into a route
//! token, then sparse top-k gating over experts.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::Rng;

use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{Linear, Mlp};
use crate::params::{Bound, ParamStore};
use crate::rng;
use crate::tensor::Tensor;
use crate::text::{fnv1a, tokenize};

pub const D_TEXT: usize = 64;
pub const D_IMAGE: usize = 64;

/// Evaluation prompts, one per task class; the position is the class label.
pub const FIXED_PROMPTS: [(&str, &str); 11] = [
    ("CR", "Clear the clouds from this satellite image to reveal the ground."),
    ("SR", "Increase the image's resolution for a more detailed view."),
    ("PS", "Combine panchromatic and multispectral images to produce a higher-resolution color image."),
    ("HR", "Dehaze this image to reveal the underlying surface features."),
    ("DN", "Enhance the image clarity by reducing the noise level."),
    ("DB", "Deblur the image to recover fine structure and detail."),
    ("DS", "Remove the banding effect to improve image appearance."),
    ("EQ", "Bring out details in shadows and highlights by equalizing the image's histogram."),
    ("LS", "Balance the image by adjusting levels linearly."),
    ("BE", "The image is a bit dim; increase brightness slightly."),
    ("STF", "Predict a high-resolution image at the target date using spatiotemporal fusion."),
];

pub const NUM_CLASSES: usize = FIXED_PROMPTS.len();

/// Seed of the frozen image-statistics projection. Fixed so that every model,
/// checkpoint and language binding sees the same image features.
const IMAGE_PROJECTION_SEED: u64 = 0x1D6E_5EED;

/// Hashed bag-of-words prompt embedding, L2-normalised.
pub fn encode_prompt(prompt: &str, d_text: usize) -> Result<Tensor> {
    let tokens = tokenize(prompt);
    if tokens.is_empty() {
        return Err(Error::input("prompt has no tokens"));
    }
    let mut counts = vec![0.0; d_text];
    for t in &tokens {
        counts[(fnv1a(t.as_bytes()) % d_text as u64) as usize] += 1.0;
    }
    let norm = counts.iter().map(|c| c * c).sum::<f64>().sqrt();
    Ok(Tensor::from_vec(counts.into_iter().map(|c| c / norm).collect()))
}

/// Per-channel (mean, std, min, max), flattened channel-major.
pub fn image_statistics(x: &Tensor) -> Result<Vec<f64>> {
    if x.rank() != 3 {
        return Err(Error::shape("image_statistics", x.shape(), &[]));
    }
    let mut out = Vec::with_capacity(4 * x.shape()[0]);
    for c in 0..x.shape()[0] {
        let p = x.channel(c);
        let n = p.len() as f64;
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = p.iter().copied().fold(f64::INFINITY, f64::min);
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        out.extend_from_slice(&[mean, var.sqrt(), min, max]);
    }
    Ok(out)
}

/// Frozen pooled-statistics image encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageEncoder {
    projection: Tensor,
}

impl ImageEncoder {
    pub fn new(channels: usize, d_image: usize) -> Self {
        let mut r = rng::stream(IMAGE_PROJECTION_SEED, channels as u64);
        let std = 1.0 / ((4 * channels) as f64).sqrt();
        Self {
            projection: Tensor::randn(&[4 * channels, d_image], std, &mut r),
        }
    }

    pub fn channels(&self) -> usize {
        self.projection.shape()[0] / 4
    }

    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 || x.shape()[0] != self.channels() {
            return Err(Error::shape("encode_image", x.shape(), &[self.channels()]));
        }
        let stats = Tensor::new(&[1, 4 * self.channels()], image_statistics(x)?)?;
        let d = self.projection.shape()[1];
        stats.matmul(&self.projection)?.reshape(&[d])
    }
}

/// Projections producing the three parts of a route token.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RouteEncoder {
    pub text: Linear,
    pub image: Linear,
    /// Pooled features to the context vector.
    pub context: Linear,
    pub feature: Linear,
    pub d: usize,
}

impl RouteEncoder {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        d_text: usize,
        d_image: usize,
        feature_channels: usize,
        d: usize,
        rng: &mut R,
    ) -> Self {
        Self {
            text: Linear::init(store, &format!("{name}.text"), d_text, d, true, rng),
            image: Linear::init(store, &format!("{name}.image"), d_image, d, true, rng),
            context: Linear::init(store, &format!("{name}.context"), feature_channels, d, true, rng),
            feature: Linear::init(store, &format!("{name}.feature"), d, d, true, rng),
            d,
        }
    }

    pub fn load(store: &ParamStore, name: &str) -> Result<Self> {
        let text = Linear::load(store, &format!("{name}.text"))?;
        Ok(Self {
            d: text.d_out,
            text,
            image: Linear::load(store, &format!("{name}.image"))?,
            context: Linear::load(store, &format!("{name}.context"))?,
            feature: Linear::load(store, &format!("{name}.feature"))?,
        })
    }
}

/// `z = [z_p ; z_x ; z_f]`, length `3d`.
#[derive(Debug, Clone, Copy)]
pub struct RouteToken<'t> {
    pub z: Var<'t>,
    pub d: usize,
}

pub fn build_route_token<'t>(
    enc: &RouteEncoder,
    p: &Bound<'t>,
    prompt_emb: Var<'t>,
    image_emb: Var<'t>,
    features: Var<'t>,
) -> Result<RouteToken<'t>> {
    let z_p = enc.text.forward(p, prompt_emb)?;
    let z_x = enc.image.forward(p, image_emb)?;
    let context = enc.context.forward(p, features.global_avg_pool()?)?;
    let z_f = enc.feature.forward(p, context)?;
    Ok(RouteToken {
        z: concat(&[z_p, z_x, z_f])?,
        d: enc.d,
    })
}

/// Two-layer gating MLP plus a linear head onto expert logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gate {
    pub mlp: Mlp,
    pub head: Linear,
    pub experts: usize,
    pub top_k: usize,
}

impl Gate {
    pub fn init<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        token_len: usize,
        hidden: usize,
        experts: usize,
        top_k: usize,
        rng: &mut R,
    ) -> Result<Self> {
        check_topk(experts, top_k)?;
        Ok(Self {
            mlp: Mlp::init(store, &format!("{name}.mlp"), token_len, hidden, hidden, rng),
            head: Linear::init(store, &format!("{name}.head"), hidden, experts, true, rng),
            experts,
            top_k,
        })
    }

    pub fn load(store: &ParamStore, name: &str, top_k: usize) -> Result<Self> {
        let head = Linear::load(store, &format!("{name}.head"))?;
        check_topk(head.d_out, top_k)?;
        Ok(Self {
            mlp: Mlp::load(store, &format!("{name}.mlp"))?,
            experts: head.d_out,
            head,
            top_k,
        })
    }
}

fn check_topk(experts: usize, k: usize) -> Result<()> {
    if k == 0 || k > experts {
        return Err(Error::config(format!(
            "top-k must satisfy 1 <= k <= E, got k={k}, E={experts}"
        )));
    }
    Ok(())
}

/// Selected experts and their normalised weights.
#[derive(Debug, Clone)]
pub struct RoutingDecision<'t> {
    /// Selected experts, best first.
    pub indices: Vec<usize>,
    /// Softmax over the selected logits, aligned with `indices`.
    pub weights: Var<'t>,
    /// Dense softmax over all gate logits (drives the balance loss).
    pub probs: Var<'t>,
    pub logits: Tensor,
    pub experts: usize,
}

impl<'t> RoutingDecision<'t> {
    /// A constant decision with explicit weights.
    pub fn fixed(tape: &'t Tape, experts: usize, mix: &[(usize, f64)]) -> Result<Self> {
        let mut seen = vec![false; experts];
        for &(e, w) in mix {
            if e >= experts || seen[e] {
                return Err(Error::input(format!("invalid or repeated expert index {e}")));
            }
            if w < 0.0 {
                return Err(Error::input("routing weights must be nonnegative"));
            }
            seen[e] = true;
        }
        let mut dense = vec![0.0; experts];
        for &(e, w) in mix {
            dense[e] = w;
        }
        Ok(Self {
            indices: mix.iter().map(|m| m.0).collect(),
            weights: tape.constant(Tensor::from_vec(mix.iter().map(|m| m.1).collect())),
            probs: tape.constant(Tensor::from_vec(dense.clone())),
            logits: Tensor::from_vec(dense),
            experts,
        })
    }

    /// `(expert, weight)` pairs.
    pub fn mixture(&self) -> Vec<(usize, f64)> {
        self.indices
            .iter()
            .copied()
            .zip(self.weights.value().data().iter().copied())
            .collect()
    }

    /// Weight of the `slot`-th selected expert as a one-element var.
    pub fn weight(&self, slot: usize) -> Result<Var<'t>> {
        self.weights.gather(&[slot])
    }
}

/// Indices of the `k` largest values, best first; ties go to the lower index.
pub fn select_topk(values: &[f64], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].total_cmp(&values[a]).then(a.cmp(&b)));
    order.truncate(k);
    order
}

/// Top-k selection on gate logits followed by a softmax over the selected ones.
pub fn route_from_logits<'t>(logits: Var<'t>, k: usize) -> Result<RoutingDecision<'t>> {
    let values = logits.value();
    let experts = values.len();
    check_topk(experts, k)?;
    let indices = select_topk(values.data(), k);
    let weights = logits.gather(&indices)?.softmax_lastdim();
    Ok(RoutingDecision {
        indices,
        weights,
        probs: logits.softmax_lastdim(),
        logits: (*values).clone(),
        experts,
    })
}

pub fn gate_topk<'t>(
    token: &RouteToken<'t>,
    gate: &Gate,
    p: &Bound<'t>,
) -> Result<RoutingDecision<'t>> {
    let h = gate.mlp.forward(p, token.z)?.relu();
    let logits = gate.head.forward(p, h)?;
    route_from_logits(logits, gate.top_k)
}

/// `(E/k)·Σ_e f_e·p_e` over a minibatch of decisions, where `f_e` is the fraction
/// of decisions selecting `e` and `p_e` the mean dense gate probability. Uniform
/// routing gives 1; total collapse onto one expert gives `E/k`.
pub fn load_balance_loss<'t>(decisions: &[RoutingDecision<'t>]) -> Result<Var<'t>> {
    let first = decisions
        .first()
        .ok_or_else(|| Error::input("load balance needs at least one decision"))?;
    let experts = first.experts;
    let k = first.indices.len();
    let n = decisions.len() as f64;
    let mut frac = vec![0.0; experts];
    let mut rows = Vec::with_capacity(decisions.len());
    for d in decisions {
        if d.experts != experts || d.indices.len() != k {
            return Err(Error::input("decisions disagree on expert count or k"));
        }
        for &e in &d.indices {
            frac[e] += 1.0 / n;
        }
        rows.push(d.probs.reshape(&[1, experts])?);
    }
    let tape = first.probs.tape();
    let mean_probs = concat(&rows)?.transpose()?.mean_lastdim();
    Ok(mean_probs
        .mul(tape.constant(Tensor::from_vec(frac)))?
        .sum()
        .scale(experts as f64 / k as f64))
}

/// Loads `{"task_id": ["prompt", ...]}`.
pub fn load_prompt_pools(path: &Path) -> Result<BTreeMap<String, Vec<String>>> {
    let pools: BTreeMap<String, Vec<String>> = serde_json::from_slice(&fs::read(path)?)?;
    if let Some((task, _)) = pools.iter().find(|(_, v)| v.is_empty()) {
        return Err(Error::input(format!("prompt pool for {task} is empty")));
    }
    Ok(pools)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{check_all, FD_STEP};

    #[test]
    fn prompt_encoding_is_deterministic_and_whitespace_blind() {
        let a = encode_prompt("remove the blur", D_TEXT).unwrap();
        assert_eq!(a, encode_prompt("remove the blur", D_TEXT).unwrap());
        assert_eq!(a, encode_prompt("  remove   the\tblur ", D_TEXT).unwrap());
        assert!((a.data().iter().map(|x| x * x).sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(matches!(encode_prompt("  ,, ", D_TEXT), Err(Error::Input(_))));
    }

    #[test]
    fn image_encoder_zero_and_scaling() {
        let enc = ImageEncoder::new(3, D_IMAGE);
        let z = enc.encode(&Tensor::zeros(&[3, 4, 4])).unwrap();
        assert!(z.data().iter().all(|&v| v == 0.0));

        let mut r = rng::stream(1, 0);
        let x = Tensor::uniform(&[3, 4, 4], 0.1, 0.5, &mut r);
        let s1 = image_statistics(&x).unwrap();
        let s2 = image_statistics(&x.scale(1.5)).unwrap();
        for c in 0..3 {
            assert!((s2[4 * c] - 1.5 * s1[4 * c]).abs() < 1e-12);
        }
        let e1 = enc.encode(&x).unwrap();
        let e2 = enc.encode(&x.scale(1.5)).unwrap();
        assert!(e2.max_abs_diff(&e1.scale(1.5)).unwrap() < 1e-12);
        assert!(enc.encode(&Tensor::zeros(&[2, 4, 4])).is_err());
    }

    #[test]
    fn zero_token_from_zero_inputs() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(2, 0);
        let enc = RouteEncoder::init(&mut store, "r", 5, 6, 3, 64, &mut r);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let tok = build_route_token(
            &enc,
            &p,
            tape.constant(Tensor::zeros(&[5])),
            tape.constant(Tensor::zeros(&[6])),
            tape.constant(Tensor::zeros(&[3, 2, 2])),
        )
        .unwrap();
        assert_eq!(tok.z.shape(), vec![192]);
        assert!(tok.z.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn route_token_gradient_check() {
        let mut store = ParamStore::new();
        let mut r = rng::stream(3, 0);
        let enc = RouteEncoder::init(&mut store, "r", 4, 3, 2, 5, &mut r);
        let ep = Tensor::randn(&[4], 1.0, &mut r);
        let ex = Tensor::randn(&[3], 1.0, &mut r);
        let f = Tensor::randn(&[2, 3, 3], 1.0, &mut r);
        let w = Tensor::randn(&[15], 1.0, &mut r);
        let mut inputs = vec![f];
        inputs.extend(store.ids().map(|id| store.get(id).clone()));
        let check = check_all(
            &inputs,
            |v| {
                let tape = v[0].tape();
                let p = Bound::from_vars(v[1..].to_vec());
                let tok = build_route_token(
                    &enc,
                    &p,
                    tape.constant(ep.clone()),
                    tape.constant(ex.clone()),
                    v[0],
                )?;
                Ok(tok.z.mul(tape.constant(w.clone()))?.sum())
            },
            FD_STEP,
        )
        .unwrap();
        assert!(check.rel_error < 1e-5, "{check:?}");
    }

    #[test]
    fn topk_softmax_over_selected() {
        let tape = Tape::new();
        let logits = tape.constant(Tensor::from_vec(vec![5.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0]));
        let d = route_from_logits(logits, 2).unwrap();
        assert_eq!(d.indices, vec![0, 1]);
        let w = d.weights.value();
        let expect0 = 1.0 / (1.0 + (-4.0f64).exp());
        assert!((w.data()[0] - expect0).abs() < 1e-12);
        assert!((w.data()[0] - 0.982).abs() < 5e-4 && (w.data()[1] - 0.018).abs() < 5e-4);
    }

    #[test]
    fn dense_when_k_equals_e() {
        let tape = Tape::new();
        let raw = vec![0.3, -1.0, 2.0];
        let d = route_from_logits(tape.constant(Tensor::from_vec(raw.clone())), 3).unwrap();
        let dense = crate::autodiff::softmax(&raw);
        for (slot, &e) in d.indices.iter().enumerate() {
            assert!((d.weights.value().data()[slot] - dense[e]).abs() < 1e-15);
        }
        assert!(matches!(
            route_from_logits(tape.constant(Tensor::from_vec(raw)), 4),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn balance_loss_extremes() {
        let tape = Tape::new();
        let e = 8;
        // uniform probabilities and selections spread evenly over experts
        let uniform: Vec<RoutingDecision> = (0..4)
            .map(|i| {
                let mut d = route_from_logits(tape.constant(Tensor::zeros(&[e])), 2).unwrap();
                d.indices = vec![2 * i, 2 * i + 1];
                d
            })
            .collect();
        let l = load_balance_loss(&uniform).unwrap().item();
        assert!((l - 1.0).abs() < 1e-12, "{l}");

        let mut hot = vec![-1e3; e];
        hot[0] = 0.0;
        let collapsed: Vec<RoutingDecision> = (0..3)
            .map(|_| route_from_logits(tape.constant(Tensor::from_vec(hot.clone())), 2).unwrap())
            .collect();
        let l = load_balance_loss(&collapsed).unwrap().item();
        assert!((l - e as f64 / 2.0).abs() < 1e-9, "{l}");
    }

    #[test]
    fn balance_loss_matches_loop_oracle() {
        let mut r = rng::stream(4, 0);
        let tape = Tape::new();
        let (e, k, n) = (6, 2, 5);
        let raw: Vec<Tensor> = (0..n).map(|_| Tensor::randn(&[e], 1.0, &mut r)).collect();
        let ds: Vec<RoutingDecision> = raw
            .iter()
            .map(|t| route_from_logits(tape.constant(t.clone()), k).unwrap())
            .collect();
        let mut oracle = 0.0;
        for ex in 0..e {
            let f = ds.iter().filter(|d| d.indices.contains(&ex)).count() as f64 / n as f64;
            let p: f64 = raw
                .iter()
                .map(|t| crate::autodiff::softmax(t.data())[ex])
                .sum::<f64>()
                / n as f64;
            oracle += f * p;
        }
        oracle *= e as f64 / k as f64;
        assert!((load_balance_loss(&ds).unwrap().item() - oracle).abs() < 1e-12);
    }

    #[test]
    fn fixed_prompts_encode_distinctly() {
        let embs: Vec<Tensor> = FIXED_PROMPTS
            .iter()
            .map(|(_, p)| encode_prompt(p, D_TEXT).unwrap())
            .collect();
        for i in 0..embs.len() {
            for j in i + 1..embs.len() {
                assert_ne!(embs[i], embs[j]);
            }
        }
    }

    #[test]
    fn prompt_pools_from_json() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pools.json");
        fs::write(&path, r#"{"denoise": ["remove the noise", "denoise it"]}"#).unwrap();
        let pools = load_prompt_pools(&path).unwrap();
        assert_eq!(pools["denoise"].len(), 2);
        fs::write(&path, r#"{"denoise": []}"#).unwrap();
        assert!(load_prompt_pools(&path).is_err());
    }
}
