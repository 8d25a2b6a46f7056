//! The desk-scale restoration network.
//!
//! pad → band-mean removal → band alignment → linear stem conv → stage 1 at full
//! resolution → 2× average pool → stage 2 → 2× upsample with skip → head, plus a
//! global residual of the padded input. Each stage routes once and applies the
//! fused conv experts, channel experts and low-rank attention experts in that
//! order.
//!
//! The head sees the scaled features concatenated with the centred input. Its
//! conv experts and per-band level offsets are indexed by task class and mixed
//! with the classifier posterior, so the task classification loss is what
//! conditions the restoration on the prompt.

use std::path::Path;

use crate::align::{
    bank_logits, embed_channels, pad_channels, route_channels, sinkhorn_log, uniform_marginal,
    ChannelEmbedder, SinkhornStop, SlotBank, SlotBankDims,
};
use crate::autodiff::{concat, Tape, Var};
use crate::error::{Error, Result};
use crate::moe::{
    conv_moe_forward, from_tokens, mora_fused_attention, moce_forward, to_tokens, ChannelExpertSet,
    ConvExpertSet, ExpertSetDims, MoraDims, MoraParams,
};
use crate::nn::Linear;
use crate::params::{Bound, ParamId, ParamStore};
use crate::routing::{
    build_route_token, encode_prompt, gate_topk, route_from_logits, Gate, ImageEncoder, RouteEncoder, RouteToken,
    RoutingDecision, D_IMAGE, D_TEXT, NUM_CLASSES,
};
use crate::rng;
use crate::tensor::Tensor;

use super::config::ExperimentConfig;

/// Hidden width of the channel-statistics embedder.
pub const EMBED_HIDDEN: usize = 32;
const STAGES: usize = 2;
const CHECKPOINT_KIND: &str = "slotmoe_model";
const HEAD_INIT_STD: f64 = 1e-3;

/// Subtracts each band's spatial mean; returns the centred image and the means.
fn centre_bands(x: &Tensor) -> Result<(Tensor, Tensor)> {
    let (bands, plane) = (x.shape()[0], x.shape()[1] * x.shape()[2]);
    let mut centred = x.clone();
    let mut means = Vec::with_capacity(bands);
    for b in 0..bands {
        let band = centred.channel_mut(b);
        let mean = band.iter().sum::<f64>() / plane as f64;
        band.iter_mut().for_each(|v| *v -= mean);
        means.push(mean);
    }
    Ok((centred, Tensor::from_vec(means)))
}

/// Splits a `d×H×W` map into its spatially centred part and per-channel means.
fn split_spatial_mean(features: Var<'_>) -> Result<(Var<'_>, Var<'_>)> {
    let s = features.shape();
    let flat = features.reshape(&[s[0], s[1] * s[2]])?;
    let mean = flat.mean_lastdim();
    let centred = flat.sub(mean.reshape(&[s[0], 1])?)?.reshape(&s)?;
    Ok((centred, mean))
}

#[derive(Debug, Clone, PartialEq)]
struct Stage {
    router: RouteEncoder,
    gate: Gate,
    conv: ConvExpertSet,
    channel: ChannelExpertSet,
    attention: MoraParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Conv {
    kernel: ParamId,
    bias: ParamId,
}

impl Conv {
    fn init(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, std: f64, r: &mut rng::DetRng) -> Self {
        Self {
            kernel: store.add(format!("{name}.kernel"), Tensor::randn(&[c_out, c_in, 3, 3], std, r)),
            bias: store.add(format!("{name}.bias"), Tensor::zeros(&[c_out])),
        }
    }

    fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        x.conv2d(p[self.kernel], p[self.bias])
    }
}

/// A built model: configuration, parameters and the layer layout over them.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    config: ExperimentConfig,
    store: ParamStore,
    image_encoder: ImageEncoder,
    embedder: ChannelEmbedder,
    bank: SlotBank,
    stem: Conv,
    stages: Vec<Stage>,
    /// One conv expert per task class.
    head: ConvExpertSet,
    classifier: Linear,
    /// Per-class band offsets from pooled features and input band means.
    level: Linear,
}

/// Everything one forward pass produces.
pub struct ForwardPass<'t> {
    /// Restored image with the unified channel count.
    pub output: Var<'t>,
    /// One routing decision per stage.
    pub decisions: Vec<RoutingDecision<'t>>,
    /// Route token of the first stage, used for task classification.
    pub token: RouteToken<'t>,
    /// Band-to-slot transport plan, `slots×channels`.
    pub plan: Var<'t>,
    pub plan_residual: f64,
}

impl Model {
    /// Deterministic initialisation from `config.seed`.
    pub fn build(config: &ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r = rng::stream(config.seed, 0x5EED);
        let (c, d) = (config.channels, config.d);
        let embedder = ChannelEmbedder::init(&mut store, "embed", EMBED_HIDDEN, config.d_e, &mut r);
        let bank = SlotBank::init(
            &mut store,
            "bank",
            SlotBankDims {
                slots: config.slots,
                d_e: config.d_e,
                d_p: config.d_p,
                tau: config.tau,
            },
            &mut r,
        )?;
        let stem = Conv::init(&mut store, "stem", config.slots, d, (2.0 / (9 * config.slots) as f64).sqrt(), &mut r);
        let mut stages = Vec::with_capacity(STAGES);
        for s in 0..STAGES {
            let name = format!("stage{s}");
            let router = RouteEncoder::init(&mut store, &format!("{name}.route"), D_TEXT, D_IMAGE, d, d, &mut r);
            let gate = Gate::init(&mut store, &format!("{name}.gate"), 3 * d, d, config.experts, config.top_k, &mut r)?;
            let conv = ConvExpertSet::init(
                &mut store,
                &format!("{name}.conv"),
                ExpertSetDims {
                    experts: config.experts,
                    c_in: d,
                    c_out: d,
                    kernel: 3,
                },
                &mut r,
            )?;
            let channel = ChannelExpertSet::init(&mut store, &format!("{name}.channel"), config.experts, d, &mut r);
            let attention = MoraParams::init(
                &mut store,
                &format!("{name}.attention"),
                MoraDims {
                    experts: config.experts,
                    d,
                    rank: config.rank,
                },
                &mut r,
            )?;
            stages.push(Stage {
                router,
                gate,
                conv,
                channel,
                attention,
            });
        }
        let head = ConvExpertSet::init_with_std(
            &mut store,
            "head",
            ExpertSetDims {
                experts: NUM_CLASSES,
                c_in: d + c,
                c_out: c,
                kernel: 3,
            },
            HEAD_INIT_STD,
            &mut r,
        )?;
        let level = Linear::init_with_std(&mut store, "level", d + 2 * c, NUM_CLASSES * c, true, HEAD_INIT_STD, &mut r);
        let classifier = Linear::init_with_std(&mut store, "classifier", 3 * d, NUM_CLASSES, false, 0.01, &mut r);
        Ok(Self {
            config: config.clone(),
            store,
            image_encoder: ImageEncoder::new(c, D_IMAGE),
            embedder,
            bank,
            stem,
            stages,
            head,
            classifier,
            level,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.numel()
    }

    pub fn classifier(&self) -> Linear {
        self.classifier
    }

    fn run_stage<'t>(
        &self,
        stage: &Stage,
        p: &Bound<'t>,
        features: Var<'t>,
        prompt_emb: Var<'t>,
        image_emb: Var<'t>,
    ) -> Result<(Var<'t>, RoutingDecision<'t>, RouteToken<'t>)> {
        let s = features.shape();
        let token = build_route_token(&stage.router, p, prompt_emb, image_emb, features)?;
        let decision = gate_topk(&token, &stage.gate, p)?;
        let h = conv_moe_forward(features, &decision, &stage.conv, p)?.relu();
        let h = moce_forward(h, &decision, &stage.channel, p)?;
        let attn = mora_fused_attention(to_tokens(h)?, &decision, &stage.attention, p)?;
        let h = h.add(from_tokens(attn, s[1], s[2])?)?;
        Ok((features.add(h)?, decision, token))
    }

    /// Forward pass on a `bands×H×W` input. The output has `channels` bands;
    /// padded bands repeat the source bands cyclically.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Tensor, prompt: &str) -> Result<ForwardPass<'t>> {
        let tape = p[self.stem.kernel].tape();
        let cfg = &self.config;
        if x.rank() != 3 || x.shape()[1] % 2 != 0 || x.shape()[2] % 2 != 0 {
            return Err(Error::shape("model input", x.shape(), &[]));
        }
        let padded = pad_channels(x, cfg.channels)?;
        let prompt_emb = tape.constant(encode_prompt(prompt, D_TEXT)?);
        let image_emb = tape.constant(self.image_encoder.encode(&padded.tensor)?);
        let (centred, band_means) = centre_bands(&padded.tensor)?;
        let xv = tape.constant(padded.tensor);

        let emb = embed_channels(xv, &self.embedder, p)?;
        let logits = bank_logits(&self.bank, p, emb)?;
        let plan = sinkhorn_log(
            logits,
            cfg.tau,
            &uniform_marginal(cfg.slots),
            &uniform_marginal(cfg.channels),
            SinkhornStop::Fixed(cfg.sinkhorn_iters),
        )?;
        let plan_var = plan.plan;
        let centred = tape.constant(centred);
        let slots = route_channels(plan_var, centred, cfg.slot_rescale)?;

        let f0 = self.stem.forward(p, slots)?;
        let (f1, d1, token) = self.run_stage(&self.stages[0], p, f0, prompt_emb, image_emb)?;
        let (f2, d2, _) = self.run_stage(&self.stages[1], p, f1.avg_pool2()?, prompt_emb, image_emb)?;
        let merged = f2.upsample2()?.add(f1)?;
        // Deep features scaled by 1/sqrt(d) so they do not dominate the head's
        // curvature next to the input skip.
        let merged = merged.scale(1.0 / (cfg.d as f64).sqrt());
        let (detail, pooled) = split_spatial_mean(concat(&[merged, centred])?)?;
        let class_logits = self.classifier.forward(p, token.z)?;
        let posterior = class_logits.softmax_lastdim().reshape(&[1, NUM_CLASSES])?;
        let level = posterior
            .matmul(
                self.level
                    .forward(p, concat(&[pooled, tape.constant(band_means)])?)?
                    .reshape(&[NUM_CLASSES, cfg.channels])?,
            )?
            .reshape(&[cfg.channels, 1, 1])?;
        let head_decision = route_from_logits(class_logits, NUM_CLASSES)?;
        let output = xv.add(conv_moe_forward(detail, &head_decision, &self.head, p)?)?.add(level)?;
        Ok(ForwardPass {
            output,
            decisions: vec![d1, d2],
            token,
            plan: plan_var,
            plan_residual: plan.marginal_residual,
        })
    }

    /// Inference on a fresh tape; returns the first `x.shape()[0]` output bands.
    pub fn predict(&self, x: &Tensor, prompt: &str) -> Result<Tensor> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let out = self.forward(&p, x, prompt)?.output.value();
        let bands = x.shape()[0];
        let plane = x.shape()[1] * x.shape()[2];
        Tensor::new(x.shape(), out.data()[..bands * plane].to_vec())
    }

    /// Selected expert sets per stage.
    pub fn route(&self, x: &Tensor, prompt: &str) -> Result<Vec<Vec<usize>>> {
        let tape = Tape::new();
        let p = self.store.bind_frozen(&tape);
        let pass = self.forward(&p, x, prompt)?;
        Ok(pass.decisions.iter().map(|d| d.indices.clone()).collect())
    }

    /// Writes a checkpoint bundle; the manifest carries the configuration.
    pub fn save(&self, dir: &Path) -> Result<()> {
        self.store.save_bundle(dir, CHECKPOINT_KIND, serde_json::to_value(&self.config)?)
    }

    /// Rebuilds the layout from the stored configuration, then overwrites every
    /// parameter from the bundle by name.
    pub fn load(dir: &Path) -> Result<Self> {
        let (stored, kind, meta) = ParamStore::load_bundle(dir)?;
        if kind != CHECKPOINT_KIND {
            return Err(Error::input(format!("{} is a {kind} bundle, not a model", dir.display())));
        }
        let config: ExperimentConfig = serde_json::from_value(meta)
            .map_err(|e| Error::config(format!("checkpoint config: {e}")))?;
        let mut model = Self::build(&config)?;
        if stored.len() != model.store.len() {
            return Err(Error::input("checkpoint parameter count does not match its config"));
        }
        for id in model.store.ids().collect::<Vec<_>>() {
            let name = model.store.name(id).to_string();
            let src = stored.require(&name)?;
            if stored.get(src).shape() != model.store.get(id).shape() {
                return Err(Error::input(format!("checkpoint tensor {name} has the wrong shape")));
            }
            *model.store.get_mut(id) = stored.get(src).clone();
        }
        Ok(model)
    }
}
