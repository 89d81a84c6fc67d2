//! Full model assembly: question encoder, attention mechanism, glimpse
//! integration, counter hook, and classifier.

pub mod checkpoint;
mod counter;
mod gru;

pub use counter::{column_max, select_top_channels, CounterPlugin, ThresholdCounter, ZeroCounter};
pub use gru::{gru_encode, GruParams};

use crate::attention::{
    ban_apply, bilinear_attention_map, bilinear_logits, co_attention, unitary_attention,
    AttentionMap, ChannelMask, CoAttentionParams, Form, GlimpseParams, MapScope, UnitaryParams,
};
use crate::error::{Error, Result};
use crate::tensor::{Tape, Tensor};
use crate::train::{dropout, WnParam};
use rand::{Rng, RngCore};
use std::path::Path;

const P_INIT_SCALE: f64 = 4.0;

/// How per-glimpse joint representations combine.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Integration {
    Residual,
    Sum,
    Concat,
}

impl Integration {
    pub fn label(self) -> &'static str {
        match self {
            Integration::Residual => "residual",
            Integration::Sum => "sum",
            Integration::Concat => "concat",
        }
    }
}

/// Which attention mechanism drives the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttentionKind {
    Bilinear,
    Unitary,
    Co,
}

impl AttentionKind {
    pub fn label(self) -> &'static str {
        match self {
            AttentionKind::Bilinear => "bilinear",
            AttentionKind::Unitary => "unitary",
            AttentionKind::Co => "co",
        }
    }
}

/// Full hyperparameter record for one model.
#[derive(Clone, Debug)]
pub struct BanStackConfig {
    pub vocab: usize,
    /// Word embedding width E.
    pub embed: usize,
    /// Question hidden size N. Residual integration requires N == K.
    pub question_hidden: usize,
    /// Visual feature size M.
    pub visual_dim: usize,
    /// Joint representation size K.
    pub joint: usize,
    /// Attention pooling rank K', three times K by default.
    pub att_rank: usize,
    /// Hidden rank of the unitary and co-attention baselines, slightly wider
    /// than K to roughly match parameter counts.
    pub uni_hidden: usize,
    pub classifier_hidden: usize,
    pub answers: usize,
    pub glimpses: usize,
    pub kind: AttentionKind,
    pub integration: Integration,
    pub map_scope: MapScope,
    pub form: Form,
    pub counter: bool,
    pub counter_top: usize,
    /// MFB window; widens the value factors to K * window and sum pools back.
    pub mfb_window: Option<usize>,
    pub dropout_hidden: f64,
    pub dropout_classifier: f64,
}

impl BanStackConfig {
    /// Desk-scale defaults. Paper-scale sizes (N=K=C=1024, K'=3072, M=2048)
    /// stay reachable through the public fields.
    pub fn toy(kind: AttentionKind, integration: Integration, glimpses: usize) -> Self {
        let k = 32;
        BanStackConfig {
            vocab: 0,
            embed: 16,
            question_hidden: k,
            visual_dim: 48,
            joint: k,
            att_rank: 3 * k,
            uni_hidden: k + k / 4,
            classifier_hidden: 2 * k,
            answers: 0,
            glimpses,
            kind,
            integration,
            map_scope: MapScope::Joint,
            form: Form::Relu,
            counter: false,
            counter_top: 10,
            mfb_window: None,
            dropout_hidden: 0.2,
            dropout_classifier: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (label, v) in [
            ("vocab", self.vocab),
            ("embed", self.embed),
            ("question_hidden", self.question_hidden),
            ("visual_dim", self.visual_dim),
            ("joint", self.joint),
            ("att_rank", self.att_rank),
            ("uni_hidden", self.uni_hidden),
            ("classifier_hidden", self.classifier_hidden),
            ("answers", self.answers),
            ("glimpses", self.glimpses),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("{label} must be positive")));
            }
        }
        if self.kind == AttentionKind::Bilinear
            && self.integration == Integration::Residual
            && self.question_hidden != self.joint
        {
            return Err(Error::Config(format!(
                "residual integration needs f_0 = X, so N must equal K; got N={} K={}",
                self.question_hidden, self.joint
            )));
        }
        if self.counter {
            if self.kind != AttentionKind::Bilinear || self.integration != Integration::Residual {
                return Err(Error::Config(
                    "the counter hook attaches to residual bilinear models only".into(),
                ));
            }
            if self.counter_top == 0 {
                return Err(Error::Config("counter_top must be positive".into()));
            }
        }
        if let Some(w) = self.mfb_window {
            if w == 0 {
                return Err(Error::Config("mfb window must be positive".into()));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_hidden)
            || !(0.0..1.0).contains(&self.dropout_classifier)
        {
            return Err(Error::Config("dropout rates must lie in [0, 1)".into()));
        }
        Ok(())
    }

    /// Width of the classifier input under this configuration.
    pub fn classifier_input(&self) -> usize {
        match (self.kind, self.integration) {
            (AttentionKind::Bilinear, Integration::Concat) => self.glimpses * self.joint,
            _ => self.joint,
        }
    }

    fn value_width(&self) -> usize {
        self.joint * self.mfb_window.unwrap_or(1)
    }
}

#[derive(Clone, Debug)]
pub struct ClassifierParams {
    pub w1: WnParam,
    pub b1: Tensor,
    pub w2: WnParam,
    pub b2: Tensor,
}

impl ClassifierParams {
    fn init(input: usize, hidden: usize, answers: usize, rng: &mut impl Rng) -> Self {
        ClassifierParams {
            w1: WnParam::init(hidden, input, rng),
            b1: Tensor::zeros(&[hidden]),
            w2: WnParam::init(answers, hidden, rng),
            b2: Tensor::zeros(&[answers]),
        }
    }

    fn apply(
        &self,
        tape: &mut Tape,
        input: &Tensor,
        config: &BanStackConfig,
        mode: &mut Mode,
    ) -> Result<Tensor> {
        let x = apply_dropout(tape, input, config.dropout_hidden, mode)?;
        let w1 = self.w1.apply(tape)?;
        let z1 = tape.matvec(&w1, &x)?;
        let z1 = tape.add(&z1, &self.b1)?;
        let h = tape.relu(&z1);
        let h = apply_dropout(tape, &h, config.dropout_classifier, mode)?;
        let w2 = self.w2.apply(tape)?;
        let z2 = tape.matvec(&w2, &h)?;
        tape.add(&z2, &self.b2)
    }
}

/// Per-glimpse linear embeddings for the counter hook outputs.
#[derive(Clone, Debug)]
pub struct CounterHookParams {
    pub embed: Vec<WnParam>,
    pub bias: Vec<Tensor>,
}

#[derive(Clone, Debug)]
pub struct BilinearParams {
    pub att_u: WnParam,
    pub att_v: WnParam,
    pub p: Vec<Tensor>,
    pub val_u: Vec<WnParam>,
    pub val_v: Vec<WnParam>,
    pub counter: Option<CounterHookParams>,
}

#[derive(Clone, Debug)]
pub struct UnitaryMechParams {
    pub att_u: WnParam,
    pub att_v: WnParam,
    pub att_p: WnParam,
    pub pool_u: WnParam,
    pub pool_v: WnParam,
    pub pool_p: WnParam,
}

#[derive(Clone, Debug)]
pub struct CoMechParams {
    pub self_u: WnParam,
    pub self_v: WnParam,
    pub self_w: Tensor,
    pub uni: UnitaryMechParams,
}

#[derive(Clone, Debug)]
pub enum MechanismParams {
    Bilinear(BilinearParams),
    Unitary(UnitaryMechParams),
    Co(CoMechParams),
}

/// Every trainable tensor of one model.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub embedding: Tensor,
    pub gru: GruParams,
    pub mech: MechanismParams,
    pub classifier: ClassifierParams,
}

impl ModelParams {
    pub fn init(config: &BanStackConfig, rng: &mut impl Rng) -> Result<Self> {
        config.validate()?;
        let (n, m, k, ka, d, g) = (
            config.question_hidden,
            config.visual_dim,
            config.value_width(),
            config.att_rank,
            config.uni_hidden,
            config.glimpses,
        );
        let embedding = Tensor::uniform(&[config.vocab, config.embed], -0.5, 0.5, rng);
        let gru = GruParams::init(n, config.embed, rng);
        // Warm pooling vectors: O(1) initial logit spread breaks the uniform
        // softmax plateau early at desk scale.
        let ba = P_INIT_SCALE * (6.0 / ka as f64).sqrt();
        let mech = match config.kind {
            AttentionKind::Bilinear => MechanismParams::Bilinear(BilinearParams {
                att_u: WnParam::init(ka, n, rng),
                att_v: WnParam::init(ka, m, rng),
                p: (0..g)
                    .map(|_| Tensor::uniform(&[ka], -ba, ba, rng))
                    .collect(),
                val_u: (0..g).map(|_| WnParam::init(k, n, rng)).collect(),
                val_v: (0..g).map(|_| WnParam::init(k, m, rng)).collect(),
                counter: config.counter.then(|| CounterHookParams {
                    embed: (0..g)
                        .map(|_| WnParam::init(config.joint, config.counter_top + 1, rng))
                        .collect(),
                    bias: (0..g).map(|_| Tensor::zeros(&[config.joint])).collect(),
                }),
            }),
            AttentionKind::Unitary => {
                MechanismParams::Unitary(init_unitary_mech(config, n, m, d, g, rng))
            }
            AttentionKind::Co => MechanismParams::Co(CoMechParams {
                self_u: WnParam::init(d, n, rng),
                self_v: WnParam::init(d, n, rng),
                self_w: Tensor::uniform(&[d], -(6.0 / d as f64).sqrt(), (6.0 / d as f64).sqrt(), rng),
                uni: init_unitary_mech(config, n, m, d, g, rng),
            }),
        };
        let classifier = ClassifierParams::init(
            config.classifier_input(),
            config.classifier_hidden,
            config.answers,
            rng,
        );
        Ok(ModelParams {
            embedding,
            gru,
            mech,
            classifier,
        })
    }

    /// Named views of every tensor, in the canonical checkpoint order.
    pub fn entries(&self) -> Vec<(String, &Tensor)> {
        let mut out: Vec<(String, &Tensor)> = Vec::new();
        out.push(("embedding".into(), &self.embedding));
        for (n, t) in [
            ("gru.w_r", &self.gru.w_r),
            ("gru.u_r", &self.gru.u_r),
            ("gru.b_r", &self.gru.b_r),
            ("gru.w_z", &self.gru.w_z),
            ("gru.u_z", &self.gru.u_z),
            ("gru.b_z", &self.gru.b_z),
            ("gru.w_h", &self.gru.w_h),
            ("gru.u_h", &self.gru.u_h),
            ("gru.b_h", &self.gru.b_h),
        ] {
            out.push((n.into(), t));
        }
        match &self.mech {
            MechanismParams::Bilinear(b) => {
                out.push(("att.u.dir".into(), &b.att_u.dir));
                out.push(("att.u.gain".into(), &b.att_u.gain));
                out.push(("att.v.dir".into(), &b.att_v.dir));
                out.push(("att.v.gain".into(), &b.att_v.gain));
                for (g, p) in b.p.iter().enumerate() {
                    out.push((format!("att.p{g}"), p));
                }
                for g in 0..b.val_u.len() {
                    out.push((format!("val{g}.u.dir"), &b.val_u[g].dir));
                    out.push((format!("val{g}.u.gain"), &b.val_u[g].gain));
                    out.push((format!("val{g}.v.dir"), &b.val_v[g].dir));
                    out.push((format!("val{g}.v.gain"), &b.val_v[g].gain));
                }
                if let Some(c) = &b.counter {
                    for g in 0..c.embed.len() {
                        out.push((format!("counter{g}.w.dir"), &c.embed[g].dir));
                        out.push((format!("counter{g}.w.gain"), &c.embed[g].gain));
                        out.push((format!("counter{g}.b"), &c.bias[g]));
                    }
                }
            }
            MechanismParams::Unitary(u) => push_unitary_entries(&mut out, u),
            MechanismParams::Co(c) => {
                out.push(("co.self_u.dir".into(), &c.self_u.dir));
                out.push(("co.self_u.gain".into(), &c.self_u.gain));
                out.push(("co.self_v.dir".into(), &c.self_v.dir));
                out.push(("co.self_v.gain".into(), &c.self_v.gain));
                out.push(("co.self_w".into(), &c.self_w));
                push_unitary_entries(&mut out, &c.uni);
            }
        }
        out.push(("cls.w1.dir".into(), &self.classifier.w1.dir));
        out.push(("cls.w1.gain".into(), &self.classifier.w1.gain));
        out.push(("cls.b1".into(), &self.classifier.b1));
        out.push(("cls.w2.dir".into(), &self.classifier.w2.dir));
        out.push(("cls.w2.gain".into(), &self.classifier.w2.gain));
        out.push(("cls.b2".into(), &self.classifier.b2));
        out
    }

    /// Mutable views, in the same order as [`ModelParams::entries`].
    pub fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out: Vec<(String, &mut Tensor)> = Vec::new();
        out.push(("embedding".into(), &mut self.embedding));
        for (n, t) in [
            ("gru.w_r", &mut self.gru.w_r),
            ("gru.u_r", &mut self.gru.u_r),
            ("gru.b_r", &mut self.gru.b_r),
            ("gru.w_z", &mut self.gru.w_z),
            ("gru.u_z", &mut self.gru.u_z),
            ("gru.b_z", &mut self.gru.b_z),
            ("gru.w_h", &mut self.gru.w_h),
            ("gru.u_h", &mut self.gru.u_h),
            ("gru.b_h", &mut self.gru.b_h),
        ] {
            out.push((n.into(), t));
        }
        match &mut self.mech {
            MechanismParams::Bilinear(b) => {
                out.push(("att.u.dir".into(), &mut b.att_u.dir));
                out.push(("att.u.gain".into(), &mut b.att_u.gain));
                out.push(("att.v.dir".into(), &mut b.att_v.dir));
                out.push(("att.v.gain".into(), &mut b.att_v.gain));
                for (g, p) in b.p.iter_mut().enumerate() {
                    out.push((format!("att.p{g}"), p));
                }
                for (g, (u, v)) in b.val_u.iter_mut().zip(b.val_v.iter_mut()).enumerate() {
                    out.push((format!("val{g}.u.dir"), &mut u.dir));
                    out.push((format!("val{g}.u.gain"), &mut u.gain));
                    out.push((format!("val{g}.v.dir"), &mut v.dir));
                    out.push((format!("val{g}.v.gain"), &mut v.gain));
                }
                if let Some(c) = &mut b.counter {
                    for (g, (w, bias)) in c.embed.iter_mut().zip(c.bias.iter_mut()).enumerate() {
                        out.push((format!("counter{g}.w.dir"), &mut w.dir));
                        out.push((format!("counter{g}.w.gain"), &mut w.gain));
                        out.push((format!("counter{g}.b"), bias));
                    }
                }
            }
            MechanismParams::Unitary(u) => push_unitary_entries_mut(&mut out, u),
            MechanismParams::Co(c) => {
                out.push(("co.self_u.dir".into(), &mut c.self_u.dir));
                out.push(("co.self_u.gain".into(), &mut c.self_u.gain));
                out.push(("co.self_v.dir".into(), &mut c.self_v.dir));
                out.push(("co.self_v.gain".into(), &mut c.self_v.gain));
                out.push(("co.self_w".into(), &mut c.self_w));
                push_unitary_entries_mut(&mut out, &mut c.uni);
            }
        }
        out.push(("cls.w1.dir".into(), &mut self.classifier.w1.dir));
        out.push(("cls.w1.gain".into(), &mut self.classifier.w1.gain));
        out.push(("cls.b1".into(), &mut self.classifier.b1));
        out.push(("cls.w2.dir".into(), &mut self.classifier.w2.dir));
        out.push(("cls.w2.gain".into(), &mut self.classifier.w2.gain));
        out.push(("cls.b2".into(), &mut self.classifier.b2));
        out
    }

    /// Copy with every tensor registered as a tracked leaf on `tape`.
    pub fn track(&self, tape: &mut Tape) -> ModelParams {
        let mut tracked = self.clone();
        for (_, t) in tracked.entries_mut() {
            *t = tape.leaf(t);
        }
        tracked
    }

    pub fn parameter_count(&self) -> usize {
        self.entries().iter().map(|(_, t)| t.numel()).sum()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let entries = self.entries();
        checkpoint::save(&entries, path)
    }

    /// Load a checkpoint into a structurally identical parameter set.
    pub fn load_into(&mut self, path: &Path) -> Result<()> {
        let loaded = checkpoint::load(path)?;
        let mut slots = self.entries_mut();
        if loaded.len() != slots.len() {
            return Err(Error::Parse(format!(
                "checkpoint holds {} tensors, model expects {}",
                loaded.len(),
                slots.len()
            )));
        }
        for ((name, tensor), (want_name, slot)) in loaded.into_iter().zip(slots.iter_mut()) {
            if &name != want_name {
                return Err(Error::Parse(format!(
                    "checkpoint tensor {name:?} does not match expected {want_name:?}"
                )));
            }
            if tensor.shape() != slot.shape() {
                return Err(Error::Parse(format!(
                    "checkpoint tensor {name}: shape {:?} does not match {:?}",
                    tensor.shape(),
                    slot.shape()
                )));
            }
            **slot = tensor;
        }
        Ok(())
    }
}

fn init_unitary_mech(
    config: &BanStackConfig,
    n: usize,
    m: usize,
    d: usize,
    g: usize,
    rng: &mut impl Rng,
) -> UnitaryMechParams {
    UnitaryMechParams {
        att_u: WnParam::init(d, n, rng),
        att_v: WnParam::init(d, m, rng),
        att_p: WnParam::init(g, d, rng),
        pool_u: WnParam::init(d, n, rng),
        pool_v: WnParam::init(d, g * m, rng),
        pool_p: WnParam::init(config.joint, d, rng),
    }
}

fn push_unitary_entries<'a>(out: &mut Vec<(String, &'a Tensor)>, u: &'a UnitaryMechParams) {
    for (n, w) in [
        ("uni.att_u", &u.att_u),
        ("uni.att_v", &u.att_v),
        ("uni.att_p", &u.att_p),
        ("uni.pool_u", &u.pool_u),
        ("uni.pool_v", &u.pool_v),
        ("uni.pool_p", &u.pool_p),
    ] {
        out.push((format!("{n}.dir"), &w.dir));
        out.push((format!("{n}.gain"), &w.gain));
    }
}

fn push_unitary_entries_mut<'a>(
    out: &mut Vec<(String, &'a mut Tensor)>,
    u: &'a mut UnitaryMechParams,
) {
    for (n, w) in [
        ("uni.att_u", &mut u.att_u),
        ("uni.att_v", &mut u.att_v),
        ("uni.att_p", &mut u.att_p),
        ("uni.pool_u", &mut u.pool_u),
        ("uni.pool_v", &mut u.pool_v),
        ("uni.pool_p", &mut u.pool_p),
    ] {
        out.push((format!("{n}.dir"), &mut w.dir));
        out.push((format!("{n}.gain"), &mut w.gain));
    }
}

/// Training applies dropout with the run's generator; evaluation is exact.
pub enum Mode<'a> {
    Train { rng: &'a mut dyn RngCore },
    Eval,
}

fn apply_dropout(tape: &mut Tape, t: &Tensor, p: f64, mode: &mut Mode) -> Result<Tensor> {
    match mode {
        Mode::Train { rng } => dropout(tape, t, p, &mut **rng, true),
        Mode::Eval => Ok(t.clone()),
    }
}

/// One example's inputs.
pub struct SampleInput<'a> {
    pub tokens: &'a [usize],
    /// [M x phi], padded channels zero filled.
    pub visual: &'a Tensor,
    pub mask: &'a ChannelMask,
    /// [4 x phi] box geometry, required when the counter hook is active.
    pub boxes: Option<&'a Tensor>,
}

pub struct ForwardOutput {
    /// Answer logits [answers].
    pub logits: Tensor,
    /// One attention map per glimpse. Baseline mechanisms report their
    /// distributions as 1 x phi maps.
    pub maps: Vec<AttentionMap>,
}

/// One glimpse of the BAN value chain, with the optional MFB sum pooling.
fn ban_glimpse(
    tape: &mut Tape,
    ban_x: &Tensor,
    y: &Tensor,
    map: &AttentionMap,
    val_u: &Tensor,
    val_v: &Tensor,
    form: Form,
    mfb_window: Option<usize>,
) -> Result<Tensor> {
    let wide = ban_apply(tape, ban_x, y, map, val_u, val_v, form)?;
    match mfb_window {
        Some(w) if w > 1 => tape.sum_pool(&wide, w),
        _ => Ok(wide),
    }
}

/// Residual glimpse update: f_{i+1} = BAN_i(f_i, Y; A_i) 1' + f_i.
/// Shape is preserved, so zeroed BAN parameters make this the identity.
pub fn residual_step(
    tape: &mut Tape,
    f_i: &Tensor,
    y: &Tensor,
    map: &AttentionMap,
    val_u: &Tensor,
    val_v: &Tensor,
    form: Form,
    mfb_window: Option<usize>,
) -> Result<Tensor> {
    let b = ban_glimpse(tape, f_i, y, map, val_u, val_v, form, mfb_window)?;
    let rho = f_i.dim(1)?;
    let bb = tape.outer_broadcast(&b, rho)?;
    tape.add(&bb, f_i)
}

/// Residual update with the counting hook:
/// f_{i+1} = (BAN_i(f_i, Y; A_i) + relu(W c_i + b)) 1' + f_i, where
/// c_i comes from the plugin on the top channels ranked by the column maxima
/// of the glimpse logits. No dropout touches the embedding input.
#[allow(clippy::too_many_arguments)]
pub fn residual_step_with_counter(
    tape: &mut Tape,
    f_i: &Tensor,
    y: &Tensor,
    map: &AttentionMap,
    val_u: &Tensor,
    val_v: &Tensor,
    boxes: &Tensor,
    plugin: &dyn CounterPlugin,
    embed_w: &Tensor,
    embed_b: &Tensor,
    top: usize,
    form: Form,
    mfb_window: Option<usize>,
) -> Result<Tensor> {
    let b = ban_glimpse(tape, f_i, y, map, val_u, val_v, form, mfb_window)?;
    let alpha = column_max(&map.logits)?;
    let (sel_boxes, sel_alpha) = select_top_channels(boxes, &alpha, top)?;
    let count = plugin.count(&sel_boxes, &sel_alpha);
    if count.numel() != top + 1 {
        return Err(Error::Config(format!(
            "counter plugin {} returned {} values, expected {}",
            plugin.name(),
            count.numel(),
            top + 1
        )));
    }
    let projected = tape.matvec(embed_w, &count)?;
    let projected = tape.add(&projected, embed_b)?;
    let injected = tape.relu(&projected);
    let combined = tape.add(&b, &injected)?;
    let rho = f_i.dim(1)?;
    let bb = tape.outer_broadcast(&combined, rho)?;
    tape.add(&bb, f_i)
}

/// Full forward pass: encode the question, attend, integrate glimpses, and
/// classify. `glimpse_limit` truncates the residual stack for ablation.
pub fn forward(
    tape: &mut Tape,
    params: &ModelParams,
    config: &BanStackConfig,
    sample: &SampleInput,
    plugin: Option<&dyn CounterPlugin>,
    mode: &mut Mode,
    glimpse_limit: Option<usize>,
) -> Result<ForwardOutput> {
    if let Some(limit) = glimpse_limit {
        if limit == 0 || limit > config.glimpses {
            return Err(Error::InvalidArgument {
                op: "forward",
                message: format!("glimpse limit {limit} out of 1..={}", config.glimpses),
            });
        }
        if config.integration != Integration::Residual || config.kind != AttentionKind::Bilinear {
            return Err(Error::Config(
                "glimpse ablation applies to residual bilinear models only".into(),
            ));
        }
    }
    // Question channels: embedding lookups through the GRU.
    let cols: Vec<Tensor> = sample
        .tokens
        .iter()
        .map(|&t| tape.row(&params.embedding, t))
        .collect::<Result<_>>()?;
    let embedded = tape.stack_cols(&cols)?;
    let question = gru_encode(tape, &embedded, &params.gru)?;
    let rho = question.dim(1)?;

    let (joint, maps) = match &params.mech {
        MechanismParams::Bilinear(b) => {
            let att_u = b.att_u.apply(tape)?;
            let att_v = b.att_v.apply(tape)?;
            let val_u: Vec<Tensor> = b.val_u.iter().map(|w| w.apply(tape)).collect::<Result<_>>()?;
            let val_v: Vec<Tensor> = b.val_v.iter().map(|w| w.apply(tape)).collect::<Result<_>>()?;
            let glimpse = GlimpseParams::new(att_u, att_v, b.p.clone(), val_u, val_v)?;
            let steps = glimpse_limit.unwrap_or(config.glimpses);

            let x_att = apply_dropout(tape, &question, config.dropout_hidden, mode)?;
            let y_att = apply_dropout(tape, sample.visual, config.dropout_hidden, mode)?;
            let mut maps = Vec::with_capacity(steps);
            for g in 0..steps {
                let logits = bilinear_logits(tape, &x_att, &y_att, &glimpse, g, config.form)?;
                maps.push(bilinear_attention_map(
                    tape,
                    &logits,
                    sample.mask,
                    config.map_scope,
                )?);
            }

            let joint = match config.integration {
                Integration::Residual => {
                    let hook = b.counter.as_ref();
                    if config.counter && plugin.is_none() {
                        return Err(Error::Config(
                            "counter hook enabled but no plugin supplied".into(),
                        ));
                    }
                    let mut f = question.clone();
                    for (g, map) in maps.iter().enumerate() {
                        let f_ban = apply_dropout(tape, &f, config.dropout_hidden, mode)?;
                        let y_ban =
                            apply_dropout(tape, sample.visual, config.dropout_hidden, mode)?;
                        f = match (hook, plugin) {
                            (Some(hook), Some(plugin)) => {
                                let boxes = sample.boxes.ok_or_else(|| {
                                    Error::Config("counter hook needs box geometry".into())
                                })?;
                                let w = hook.embed[g].apply(tape)?;
                                let b_out = ban_glimpse(
                                    tape,
                                    &f_ban,
                                    &y_ban,
                                    map,
                                    &glimpse.val_u[g],
                                    &glimpse.val_v[g],
                                    config.form,
                                    config.mfb_window,
                                )?;
                                let alpha = column_max(&map.logits)?;
                                let (sb, sa) =
                                    select_top_channels(boxes, &alpha, config.counter_top)?;
                                let count = plugin.count(&sb, &sa);
                                let proj = tape.matvec(&w, &count)?;
                                let proj = tape.add(&proj, &hook.bias[g])?;
                                let inj = tape.relu(&proj);
                                let combined = tape.add(&b_out, &inj)?;
                                let bb = tape.outer_broadcast(&combined, rho)?;
                                tape.add(&bb, &f)?
                            }
                            _ => {
                                let b_out = ban_glimpse(
                                    tape,
                                    &f_ban,
                                    &y_ban,
                                    map,
                                    &glimpse.val_u[g],
                                    &glimpse.val_v[g],
                                    config.form,
                                    config.mfb_window,
                                )?;
                                let bb = tape.outer_broadcast(&b_out, rho)?;
                                tape.add(&bb, &f)?
                            }
                        };
                    }
                    tape.reduce_sum(&f, 1)?
                }
                Integration::Sum | Integration::Concat => {
                    let mut parts = Vec::with_capacity(maps.len());
                    for (g, map) in maps.iter().enumerate() {
                        let x_ban = apply_dropout(tape, &question, config.dropout_hidden, mode)?;
                        let y_ban =
                            apply_dropout(tape, sample.visual, config.dropout_hidden, mode)?;
                        parts.push(ban_glimpse(
                            tape,
                            &x_ban,
                            &y_ban,
                            map,
                            &glimpse.val_u[g],
                            &glimpse.val_v[g],
                            config.form,
                            config.mfb_window,
                        )?);
                    }
                    if config.integration == Integration::Sum {
                        let mut acc = parts[0].clone();
                        for part in &parts[1..] {
                            acc = tape.add(&acc, part)?;
                        }
                        acc
                    } else {
                        tape.concat_vec(&parts)?
                    }
                }
            };
            (joint, maps)
        }
        MechanismParams::Unitary(u) => {
            let query = tape.col(&question, rho - 1)?;
            let (joint, maps) =
                unitary_pipeline(tape, u, &query, sample, config, mode)?;
            (joint, maps)
        }
        MechanismParams::Co(c) => {
            let self_u = c.self_u.apply(tape)?;
            let self_v = c.self_v.apply(tape)?;
            let co_params = CoAttentionParams {
                self_u,
                self_v,
                self_w: c.self_w.clone(),
                uni: UnitaryParams {
                    u: c.uni.att_u.apply(tape)?,
                    v: c.uni.att_v.apply(tape)?,
                    p: c.uni.att_p.apply(tape)?,
                },
            };
            let x_in = apply_dropout(tape, &question, config.dropout_hidden, mode)?;
            let y_in = apply_dropout(tape, sample.visual, config.dropout_hidden, mode)?;
            let out = co_attention(tape, &x_in, &y_in, &co_params, sample.mask, config.form)?;
            let joint = joint_pool(tape, &c.uni, &out.question, &out.attended, config, mode)?;
            let maps = alpha_maps(tape, &out.visual.alpha, &out.visual.logits, sample.mask)?;
            (joint, maps)
        }
    };

    let logits = params.classifier.apply(tape, &joint, config, mode)?;
    Ok(ForwardOutput { logits, maps })
}

fn unitary_pipeline(
    tape: &mut Tape,
    u: &UnitaryMechParams,
    query: &Tensor,
    sample: &SampleInput,
    config: &BanStackConfig,
    mode: &mut Mode,
) -> Result<(Tensor, Vec<AttentionMap>)> {
    let att = UnitaryParams {
        u: u.att_u.apply(tape)?,
        v: u.att_v.apply(tape)?,
        p: u.att_p.apply(tape)?,
    };
    let q_in = apply_dropout(tape, query, config.dropout_hidden, mode)?;
    let y_in = apply_dropout(tape, sample.visual, config.dropout_hidden, mode)?;
    let out = unitary_attention(tape, &q_in, &y_in, &att, sample.mask, config.form)?;
    let joint = joint_pool(tape, u, query, &out.attended, config, mode)?;
    let maps = alpha_maps(tape, &out.alpha, &out.logits, sample.mask)?;
    Ok((joint, maps))
}

/// Joint head shared by the baselines: f = P' (sigma(U x) o sigma(V yhat)).
fn joint_pool(
    tape: &mut Tape,
    u: &UnitaryMechParams,
    query: &Tensor,
    attended: &Tensor,
    config: &BanStackConfig,
    mode: &mut Mode,
) -> Result<Tensor> {
    let pu = u.pool_u.apply(tape)?;
    let pv = u.pool_v.apply(tape)?;
    let pp = u.pool_p.apply(tape)?;
    let q_in = apply_dropout(tape, query, config.dropout_hidden, mode)?;
    let a_in = apply_dropout(tape, attended, config.dropout_hidden, mode)?;
    let qh = tape.matvec(&pu, &q_in)?;
    let qh = config.form.apply(tape, &qh);
    let ah = tape.matvec(&pv, &a_in)?;
    let ah = config.form.apply(tape, &ah);
    let h = tape.hadamard(&qh, &ah)?;
    tape.matvec(&pp, &h)
}

/// Wrap per-glimpse attention rows as 1 x phi maps so entropy probes and
/// exports treat every mechanism uniformly.
fn alpha_maps(
    tape: &mut Tape,
    alpha: &Tensor,
    logits: &Tensor,
    mask: &ChannelMask,
) -> Result<Vec<AttentionMap>> {
    let (g, phi) = (alpha.dim(0)?, alpha.dim(1)?);
    let mut maps = Vec::with_capacity(g);
    for i in 0..g {
        let row = tape.row(alpha, i)?;
        let probs = tape.reshape(&row, &[1, phi])?;
        let lrow = tape.row(logits, i)?;
        let lgrid = tape.reshape(&lrow, &[1, phi])?;
        maps.push(AttentionMap {
            probs,
            logits: lgrid,
            valid_cols: mask.keep().to_vec(),
        });
    }
    Ok(maps)
}

/// Entropy of an attention map in nats, with 0 log 0 read as 0.
pub fn attention_entropy(map: &AttentionMap) -> f64 {
    distribution_entropy(map.probs.data())
}

pub fn distribution_entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Attention-map-as-output loss for grounding: elementwise binary cross
/// entropy between map probabilities and a target indicator grid, averaged
/// over valid cells, with probabilities floored at 1e-7.
pub fn phrase_localization_loss(
    tape: &mut Tape,
    map: &AttentionMap,
    targets: &Tensor,
) -> Result<Tensor> {
    let rho = map.probs.dim(0)?;
    let mut valid = Vec::with_capacity(rho * map.valid_cols.len());
    for _ in 0..rho {
        valid.extend_from_slice(&map.valid_cols);
    }
    tape.bce_on_probs(&map.probs, targets, Some(&valid), 1e-7)
}

/// Evaluate using only the first `n` glimpses of a trained residual model,
/// feeding f_n to the classifier.
pub fn ablate_eval(
    params: &ModelParams,
    config: &BanStackConfig,
    samples: &[crate::train::SyntheticSample],
    n: usize,
) -> Result<f64> {
    if n == 0 || n > config.glimpses {
        return Err(Error::InvalidArgument {
            op: "ablate_eval",
            message: format!("glimpse count {n} out of 1..={}", config.glimpses),
        });
    }
    let mut correct = 0usize;
    for sample in samples {
        let mut tape = Tape::inference();
        let out = forward(
            &mut tape,
            params,
            config,
            &sample.input(),
            None,
            &mut Mode::Eval,
            Some(n),
        )?;
        if argmax(out.logits.data()) == sample.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate() {
        if v > values[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests;
