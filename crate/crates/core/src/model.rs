//! The Decision Mamba network: Mamba blocks and layers, trajectory token
//! embedding and the action head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{
    causal_conv1d, channel_mlp, dropout, embed, join, layer_norm, linear, ChannelMlpParams,
    Conv1dParams, EmbeddingTable, LayerNormParams, LinearParams, Mode, Parameters,
};
use crate::rl::batch::Batch;
use crate::scan::ScanMode;
use crate::ssm::{compute_delta, selective_ssm, SsmParams};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ActionSpace {
    Continuous(usize),
    Discrete(usize),
}

impl ActionSpace {
    /// Width of the head output: action dimension or class count.
    pub fn head_dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous(d) | ActionSpace::Discrete(d) => d,
        }
    }

    /// Width of one action entry in a [`Batch`].
    pub fn input_dim(&self) -> usize {
        match *self {
            ActionSpace::Continuous(d) => d,
            ActionSpace::Discrete(_) => 1,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, ActionSpace::Discrete(_))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecisionMambaConfig {
    pub n_layers: usize,
    pub embed_dim: usize,
    pub ssm_state: usize,
    pub expand: usize,
    pub conv_kernel: usize,
    pub context_length: usize,
    pub dropout_p: f64,
    pub use_channel_mlp: bool,
    pub max_timestep: usize,
    pub action_space: ActionSpace,
    pub state_dim: usize,
    pub scan_mode: ScanMode,
}

impl Default for DecisionMambaConfig {
    fn default() -> Self {
        DecisionMambaConfig {
            n_layers: 2,
            embed_dim: 64,
            ssm_state: 16,
            expand: 2,
            conv_kernel: 4,
            context_length: 10,
            dropout_p: 0.1,
            use_channel_mlp: true,
            max_timestep: 1000,
            action_space: ActionSpace::Discrete(2),
            state_dim: 1,
            scan_mode: ScanMode::Sequential,
        }
    }
}

impl DecisionMambaConfig {
    pub fn inner_dim(&self) -> usize {
        self.expand * self.embed_dim
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("n_layers", self.n_layers),
            ("embed_dim", self.embed_dim),
            ("ssm_state", self.ssm_state),
            ("expand", self.expand),
            ("conv_kernel", self.conv_kernel),
            ("context_length", self.context_length),
            ("max_timestep", self.max_timestep),
            ("state_dim", self.state_dim),
            ("action_space", self.action_space.head_dim()),
        ];
        let bad: Vec<&str> = positive
            .iter()
            .filter(|(_, v)| *v == 0)
            .map(|(k, _)| *k)
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(format!(
                "must be positive: {}",
                bad.join(", ")
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_p) {
            return Err(Error::Config(format!(
                "dropout_p {} outside [0, 1)",
                self.dropout_p
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaBlockParams {
    pub in_proj_x: LinearParams,
    pub in_proj_z: LinearParams,
    pub conv: Conv1dParams,
    pub ssm: SsmParams,
    pub out_proj: LinearParams,
}

impl MambaBlockParams {
    pub fn init<R: Rng + ?Sized>(
        dim: usize,
        expand: usize,
        state: usize,
        kernel: usize,
        rng: &mut R,
    ) -> Self {
        let inner = expand * dim;
        MambaBlockParams {
            in_proj_x: LinearParams::init(dim, inner, false, rng),
            in_proj_z: LinearParams::init(dim, inner, false, rng),
            conv: Conv1dParams::init(inner, kernel, rng),
            ssm: SsmParams::init(inner, state, rng),
            out_proj: LinearParams::init(inner, dim, false, rng),
        }
    }

    pub fn expand(&self) -> usize {
        self.in_proj_x.out_features() / self.in_proj_x.in_features()
    }
}

impl Parameters for MambaBlockParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.in_proj_x.visit(&join(prefix, "in_proj_x"), f);
        self.in_proj_z.visit(&join(prefix, "in_proj_z"), f);
        self.conv.visit(&join(prefix, "conv"), f);
        self.ssm.visit(&join(prefix, "ssm"), f);
        self.out_proj.visit(&join(prefix, "out_proj"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.in_proj_x.visit_mut(&join(prefix, "in_proj_x"), f);
        self.in_proj_z.visit_mut(&join(prefix, "in_proj_z"), f);
        self.conv.visit_mut(&join(prefix, "conv"), f);
        self.ssm.visit_mut(&join(prefix, "ssm"), f);
        self.out_proj.visit_mut(&join(prefix, "out_proj"), f);
    }
}

/// Intermediate values of one block pass, kept for inspection.
#[derive(Clone, Copy, Debug)]
pub struct BlockTrace<'t> {
    pub x: Var<'t>,
    pub z: Var<'t>,
    pub b: Var<'t>,
    pub c: Var<'t>,
    pub delta: Var<'t>,
    pub y: Var<'t>,
    pub out: Var<'t>,
}

pub fn mamba_block_trace<'t>(
    x: Var<'t>,
    p: &MambaBlockParams,
    scan: ScanMode,
) -> Result<BlockTrace<'t>> {
    let tape = x.tape();
    let xi = linear(x, &p.in_proj_x)?;
    let z = linear(x, &p.in_proj_z)?;
    let xc = causal_conv1d(xi, &p.conv)?.silu();
    let b = linear(xc, &p.ssm.b_proj)?;
    let c = linear(xc, &p.ssm.c_proj)?;
    let delta = compute_delta(xc, &p.ssm)?;
    let a_log = tape.param(&p.ssm.a_log);
    let y = selective_ssm(xc, delta, a_log, b, c, scan)?;
    let gated = y.mul(z.silu())?;
    let out = linear(gated, &p.out_proj)?;
    Ok(BlockTrace {
        x: xc,
        z,
        b,
        c,
        delta,
        y,
        out,
    })
}

/// `[B, L, D] → [B, L, D]`: projection, causal conv, selective SSM, gate,
/// output projection.
pub fn mamba_block_forward<'t>(
    x: Var<'t>,
    p: &MambaBlockParams,
    scan: ScanMode,
) -> Result<Var<'t>> {
    Ok(mamba_block_trace(x, p, scan)?.out)
}

#[derive(Clone, Debug, PartialEq)]
pub struct MambaLayerParams {
    pub ln1: LayerNormParams,
    pub block: MambaBlockParams,
    pub ln2: LayerNormParams,
    pub mlp: Option<ChannelMlpParams>,
}

impl MambaLayerParams {
    pub fn init<R: Rng + ?Sized>(cfg: &DecisionMambaConfig, rng: &mut R) -> Self {
        let d = cfg.embed_dim;
        MambaLayerParams {
            ln1: LayerNormParams::new(d),
            block: MambaBlockParams::init(d, cfg.expand, cfg.ssm_state, cfg.conv_kernel, rng),
            ln2: LayerNormParams::new(d),
            mlp: cfg
                .use_channel_mlp
                .then(|| ChannelMlpParams::init(d, cfg.dropout_p, rng)),
        }
    }
}

impl Parameters for MambaLayerParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.ln1.visit(&join(prefix, "ln1"), f);
        self.block.visit(&join(prefix, "block"), f);
        if let Some(mlp) = &self.mlp {
            self.ln2.visit(&join(prefix, "ln2"), f);
            mlp.visit(&join(prefix, "mlp"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.ln1.visit_mut(&join(prefix, "ln1"), f);
        self.block.visit_mut(&join(prefix, "block"), f);
        if let Some(mlp) = &mut self.mlp {
            self.ln2.visit_mut(&join(prefix, "ln2"), f);
            mlp.visit_mut(&join(prefix, "mlp"), f);
        }
    }
}

/// `u = x + block(ln1(x))`, then `u + mlp(ln2(u))` when the channel MLP is
/// present.
pub fn mamba_layer_forward<'t, R: Rng + ?Sized>(
    x: Var<'t>,
    p: &MambaLayerParams,
    scan: ScanMode,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>> {
    let u = x.add(mamba_block_forward(layer_norm(x, &p.ln1)?, &p.block, scan)?)?;
    match &p.mlp {
        Some(mlp) => u.add(channel_mlp(layer_norm(u, &p.ln2)?, mlp, mode, rng)?),
        None => Ok(u),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActionEmbed {
    Linear(LinearParams),
    Table(EmbeddingTable),
}

impl Parameters for ActionEmbed {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        match self {
            ActionEmbed::Linear(p) => p.visit(prefix, f),
            ActionEmbed::Table(t) => t.visit(prefix, f),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        match self {
            ActionEmbed::Linear(p) => p.visit_mut(prefix, f),
            ActionEmbed::Table(t) => t.visit_mut(prefix, f),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecisionMambaParams {
    pub rtg_embed: LinearParams,
    pub state_embed: LinearParams,
    pub action_embed: ActionEmbed,
    pub time_embed: EmbeddingTable,
    pub embed_ln: LayerNormParams,
    pub layers: Vec<MambaLayerParams>,
    pub final_ln: LayerNormParams,
    pub head: LinearParams,
}

impl Parameters for DecisionMambaParams {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a Tensor)) {
        self.rtg_embed.visit(&join(prefix, "rtg_embed"), f);
        self.state_embed.visit(&join(prefix, "state_embed"), f);
        self.action_embed.visit(&join(prefix, "action_embed"), f);
        self.time_embed.visit(&join(prefix, "time_embed"), f);
        self.embed_ln.visit(&join(prefix, "embed_ln"), f);
        for (i, l) in self.layers.iter().enumerate() {
            l.visit(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_ln.visit(&join(prefix, "final_ln"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Tensor)) {
        self.rtg_embed.visit_mut(&join(prefix, "rtg_embed"), f);
        self.state_embed.visit_mut(&join(prefix, "state_embed"), f);
        self.action_embed
            .visit_mut(&join(prefix, "action_embed"), f);
        self.time_embed.visit_mut(&join(prefix, "time_embed"), f);
        self.embed_ln.visit_mut(&join(prefix, "embed_ln"), f);
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.visit_mut(&join(prefix, &format!("layers.{i}")), f);
        }
        self.final_ln.visit_mut(&join(prefix, "final_ln"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

pub fn init_params<R: Rng + ?Sized>(
    cfg: &DecisionMambaConfig,
    rng: &mut R,
) -> Result<DecisionMambaParams> {
    cfg.validate()?;
    let d = cfg.embed_dim;
    let action_embed = match cfg.action_space {
        ActionSpace::Continuous(a) => ActionEmbed::Linear(LinearParams::init(a, d, true, rng)),
        ActionSpace::Discrete(n) => ActionEmbed::Table(EmbeddingTable::init(n, d, rng)),
    };
    let rtg_embed = LinearParams::init(1, d, true, rng);
    let state_embed = LinearParams::init(cfg.state_dim, d, true, rng);
    let time_embed = EmbeddingTable::init(cfg.max_timestep, d, rng);
    let layers = (0..cfg.n_layers)
        .map(|_| MambaLayerParams::init(cfg, rng))
        .collect();
    let head = LinearParams::init(d, cfg.action_space.head_dim(), true, rng);
    Ok(DecisionMambaParams {
        rtg_embed,
        state_embed,
        action_embed,
        time_embed,
        embed_ln: LayerNormParams::new(d),
        layers,
        final_ln: LayerNormParams::new(d),
        head,
    })
}

fn check_batch(b: &Batch, cfg: &DecisionMambaConfig) -> Result<()> {
    let (n, k) = (b.batch_size(), b.context());
    let expect = [
        ("rtg", b.rtg.shape(), vec![n, k, 1]),
        ("states", b.states.shape(), vec![n, k, cfg.state_dim]),
        (
            "actions",
            b.actions.shape(),
            vec![n, k, cfg.action_space.input_dim()],
        ),
    ];
    for (what, got, want) in expect {
        if got != want.as_slice() {
            return Err(Error::shape(what, got, &want));
        }
    }
    if b.timesteps.len() != n * k {
        return Err(Error::invalid(format!(
            "{} timesteps for a {n}x{k} window",
            b.timesteps.len()
        )));
    }
    Ok(())
}

/// Token embeddings `[B, 3K, D]` ordered `(R̂ᵢ, sᵢ, aᵢ)` per step, each with
/// the step's time embedding added, before the embedding layer norm.
pub fn embed_tokens<'t>(
    tape: &'t Tape,
    b: &Batch,
    p: &DecisionMambaParams,
    cfg: &DecisionMambaConfig,
) -> Result<Var<'t>> {
    check_batch(b, cfg)?;
    let (n, k, d) = (b.batch_size(), b.context(), cfg.embed_dim);
    if let Some(&t) = b.timesteps.iter().find(|&&t| t >= cfg.max_timestep) {
        return Err(Error::Index {
            what: "timestep",
            index: t,
            size: cfg.max_timestep,
        });
    }
    let time = embed(tape, &p.time_embed, &b.timesteps, &[n, k])?;
    let r = linear(tape.constant(b.rtg.clone()), &p.rtg_embed)?;
    let s = linear(tape.constant(b.states.clone()), &p.state_embed)?;
    let a = match &p.action_embed {
        ActionEmbed::Linear(lp) => linear(tape.constant(b.actions.clone()), lp)?,
        ActionEmbed::Table(t) => {
            let ids = action_ids(&b.actions, t.vocab())?;
            embed(tape, t, &ids, &[n, k])?
        }
    };
    let parts = [r, s, a]
        .iter()
        .map(|v| v.add(time)?.reshape(&[n, k, 1, d]))
        .collect::<Result<Vec<_>>>()?;
    tape.concat(&parts, 2)?.reshape(&[n, 3 * k, d])
}

fn action_ids(actions: &Tensor, vocab: usize) -> Result<Vec<usize>> {
    actions
        .data()
        .iter()
        .map(|&v| {
            if v >= 0.0 && v.fract() == 0.0 && (v as usize) < vocab {
                Ok(v as usize)
            } else {
                Err(Error::invalid(format!(
                    "discrete action {v} outside 0..{vocab}"
                )))
            }
        })
        .collect()
}

/// Embedded, normalized token sequence `[B, 3K, D]` fed to the layer stack.
pub fn embed_trajectory<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    b: &Batch,
    p: &DecisionMambaParams,
    cfg: &DecisionMambaConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>> {
    let tokens = layer_norm(embed_tokens(tape, b, p, cfg)?, &p.embed_ln)?;
    dropout(tokens, cfg.dropout_p, mode, rng)
}

/// Action predictions `[B, K, head_dim]`: tanh-squashed for continuous
/// actions, raw logits for discrete ones.
pub fn forward<'t, R: Rng + ?Sized>(
    tape: &'t Tape,
    b: &Batch,
    p: &DecisionMambaParams,
    cfg: &DecisionMambaConfig,
    mode: Mode,
    rng: &mut R,
) -> Result<Var<'t>> {
    if p.layers.len() != cfg.n_layers {
        return Err(Error::invalid(format!(
            "{} layers for config with {}",
            p.layers.len(),
            cfg.n_layers
        )));
    }
    let (n, k, d) = (b.batch_size(), b.context(), cfg.embed_dim);
    let mut h = embed_trajectory(tape, b, p, cfg, mode, rng)?;
    for layer in &p.layers {
        h = mamba_layer_forward(h, layer, cfg.scan_mode, mode, rng)?;
    }
    let h = layer_norm(h, &p.final_ln)?;
    let states = h
        .reshape(&[n, k, 3, d])?
        .slice(2, 1, 2)?
        .reshape(&[n, k, d])?;
    let out = linear(states, &p.head)?;
    Ok(match cfg.action_space {
        ActionSpace::Continuous(_) => out.tanh(),
        ActionSpace::Discrete(_) => out,
    })
}

/// Evaluation-mode forward pass without gradient tracking.
pub fn predict(b: &Batch, p: &DecisionMambaParams, cfg: &DecisionMambaConfig) -> Result<Tensor> {
    let tape = Tape::inference();
    let mut unused = crate::rng::stream(0, crate::rng::Stream::Dropout);
    Ok(forward(&tape, b, p, cfg, Mode::Eval, &mut unused)?.to_tensor())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{self, DEFAULT_STEP};
    use crate::rng::{stream, Stream};

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = stream(seed, Stream::Data);
        Tensor::from_fn(shape.to_vec(), |_| rng.random_range(-1.0..1.0))
    }

    fn small_cfg(discrete: bool) -> DecisionMambaConfig {
        DecisionMambaConfig {
            n_layers: 1,
            embed_dim: 8,
            ssm_state: 4,
            context_length: 3,
            dropout_p: 0.0,
            max_timestep: 20,
            state_dim: 3,
            action_space: if discrete {
                ActionSpace::Discrete(3)
            } else {
                ActionSpace::Continuous(2)
            },
            ..Default::default()
        }
    }

    fn batch(cfg: &DecisionMambaConfig, n: usize, seed: u64) -> Batch {
        let k = cfg.context_length;
        let actions = match cfg.action_space {
            ActionSpace::Continuous(a) => random(&[n, k, a], seed + 2),
            ActionSpace::Discrete(c) => {
                Tensor::from_fn(vec![n, k, 1], |i| ((i * 7 + seed as usize) % c) as f64)
            }
        };
        Batch {
            rtg: random(&[n, k, 1], seed),
            states: random(&[n, k, cfg.state_dim], seed + 1),
            actions,
            timesteps: (0..n * k).map(|i| (i % k) + 2).collect(),
            mask: Tensor::ones(vec![n, k]),
        }
    }

    /// Scales every weight so the network is far from its near-linear init.
    fn amplify(p: &mut DecisionMambaParams, by: f64) {
        p.visit_mut("", &mut |name, t| {
            if name.ends_with("weight") || name.ends_with("table") {
                t.data_mut().iter_mut().for_each(|v| *v *= by);
            }
        });
    }

    #[test]
    fn block_shape_trace() {
        let mut rng = stream(1, Stream::Init);
        let p = MambaBlockParams::init(16, 2, 16, 4, &mut rng);
        let tape = Tape::new();
        let x = tape.constant(random(&[2, 12, 16], 2));
        let tr = mamba_block_trace(x, &p, ScanMode::Sequential).unwrap();
        assert_eq!(tr.x.shape(), [2, 12, 32]);
        assert_eq!(tr.z.shape(), [2, 12, 32]);
        assert_eq!(tr.b.shape(), [2, 12, 16]);
        assert_eq!(tr.c.shape(), [2, 12, 16]);
        assert_eq!(tr.delta.shape(), [2, 12, 32]);
        assert_eq!(tr.y.shape(), [2, 12, 32]);
        assert_eq!(tr.out.shape(), [2, 12, 16]);
        let d = crate::ssm::zoh_discretize(tr.delta, tape.param(&p.ssm.a_log), tr.b, tr.x).unwrap();
        assert_eq!(d.a_bar.shape(), [2, 12, 32, 16]);
        assert_eq!(d.b_bar_x.shape(), [2, 12, 32, 16]);
    }

    #[test]
    fn block_maps_zero_to_zero() {
        let p = MambaBlockParams::init(8, 2, 4, 4, &mut stream(3, Stream::Init));
        let tape = Tape::new();
        let y = mamba_block_forward(
            tape.constant(Tensor::zeros(vec![2, 5, 8])),
            &p,
            ScanMode::Parallel,
        )
        .unwrap();
        assert!(y.value().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn zeroed_residual_branches_give_identity() {
        let cfg = small_cfg(false);
        let mut p = MambaLayerParams::init(&cfg, &mut stream(4, Stream::Init));
        p.block.out_proj.weight = Tensor::zeros(vec![8, 16]).with_grad();
        let mlp = p.mlp.as_mut().unwrap();
        mlp.down.weight = Tensor::zeros(vec![8, 32]).with_grad();
        let x = random(&[2, 6, 8], 5);
        let tape = Tape::new();
        let y = mamba_layer_forward(
            tape.constant(x.clone()),
            &p,
            ScanMode::Sequential,
            Mode::Train,
            &mut stream(0, Stream::Dropout),
        )
        .unwrap();
        assert_eq!(y.value().data(), x.data());
    }

    #[test]
    fn rc_ablation_changes_output_and_size() {
        let cfg = small_cfg(false);
        let rc = DecisionMambaConfig {
            use_channel_mlp: false,
            ..cfg.clone()
        };
        let mut full = MambaLayerParams::init(&cfg, &mut stream(6, Stream::Init));
        full.mlp.as_mut().unwrap().visit_mut("", &mut |_, t| {
            t.data_mut().iter_mut().for_each(|v| *v += 0.3);
        });
        let mut bare = full.clone();
        bare.mlp = None;
        let x = random(&[1, 5, 8], 7);
        let tape = Tape::new();
        let mut r = stream(0, Stream::Dropout);
        let a = mamba_layer_forward(
            tape.constant(x.clone()),
            &full,
            ScanMode::Sequential,
            Mode::Eval,
            &mut r,
        )
        .unwrap();
        let b = mamba_layer_forward(
            tape.constant(x),
            &bare,
            ScanMode::Sequential,
            Mode::Eval,
            &mut r,
        )
        .unwrap();
        assert!(a.to_tensor().max_abs_diff(&b.to_tensor()) > 1e-3);

        let pf = init_params(&cfg, &mut stream(8, Stream::Init))
            .unwrap()
            .param_count();
        let pr = init_params(&rc, &mut stream(8, Stream::Init))
            .unwrap()
            .param_count();
        let pr2 = init_params(
            &DecisionMambaConfig { n_layers: 2, ..rc },
            &mut stream(8, Stream::Init),
        )
        .unwrap()
        .param_count();
        assert!(pr < pf);
        assert!(pr2 * 2 >= pf && pr2 <= 2 * pf, "{pf} {pr} {pr2}");
    }

    #[test]
    fn single_step_window_has_three_tokens() {
        let cfg = DecisionMambaConfig {
            context_length: 1,
            ..small_cfg(true)
        };
        let p = init_params(&cfg, &mut stream(9, Stream::Init)).unwrap();
        let tape = Tape::new();
        let t = embed_tokens(&tape, &batch(&cfg, 2, 10), &p, &cfg).unwrap();
        assert_eq!(t.shape(), [2, 3, 8]);
    }

    #[test]
    fn tokens_share_time_embedding() {
        let cfg = small_cfg(false);
        let p = init_params(&cfg, &mut stream(11, Stream::Init)).unwrap();
        let b = batch(&cfg, 2, 12);
        let tape = Tape::new();
        let tokens = embed_tokens(&tape, &b, &p, &cfg).unwrap().to_tensor();
        let (n, k, d) = (2, cfg.context_length, cfg.embed_dim);
        let modal = |w: &LinearParams, x: &[f64], j: usize| -> f64 {
            let inp = w.in_features();
            w.bias.as_ref().unwrap().data()[j]
                + (0..inp).map(|q| w.weight.at(&[j, q]) * x[q]).sum::<f64>()
        };
        let ActionEmbed::Linear(ae) = &p.action_embed else {
            unreachable!()
        };
        for bi in 0..n {
            for i in 0..k {
                let ts = b.timesteps[bi * k + i];
                let r = &b.rtg.data()[(bi * k + i)..(bi * k + i + 1)];
                let s = &b.states.data()[(bi * k + i) * 3..(bi * k + i + 1) * 3];
                let a = &b.actions.data()[(bi * k + i) * 2..(bi * k + i + 1) * 2];
                for j in 0..d {
                    let time = p.time_embed.table.at(&[ts, j]);
                    let got = [0, 1, 2].map(|m| tokens.at(&[bi, 3 * i + m, j]));
                    let parts = [
                        modal(&p.rtg_embed, r, j),
                        modal(&p.state_embed, s, j),
                        modal(ae, a, j),
                    ];
                    for m in 0..3 {
                        assert!((got[m] - parts[m] - time).abs() < 1e-14);
                    }
                }
            }
        }
    }

    #[test]
    fn zero_inputs_leave_time_embedding() {
        let cfg = small_cfg(false);
        let p = init_params(&cfg, &mut stream(13, Stream::Init)).unwrap();
        let mut b = batch(&cfg, 1, 14);
        b.rtg = Tensor::zeros(vec![1, 3, 1]);
        b.states = Tensor::zeros(vec![1, 3, 3]);
        b.actions = Tensor::zeros(vec![1, 3, 2]);
        let tape = Tape::new();
        let tokens = embed_tokens(&tape, &b, &p, &cfg).unwrap().to_tensor();
        for i in 0..3 {
            for m in 0..3 {
                for j in 0..8 {
                    assert_eq!(
                        tokens.at(&[0, 3 * i + m, j]),
                        p.time_embed.table.at(&[b.timesteps[i], j])
                    );
                }
            }
        }
    }

    #[test]
    fn timestep_overflow_is_rejected() {
        let cfg = small_cfg(true);
        let p = init_params(&cfg, &mut stream(15, Stream::Init)).unwrap();
        let mut b = batch(&cfg, 1, 16);
        b.timesteps[1] = cfg.max_timestep;
        assert!(predict(&b, &p, &cfg).is_err());
    }

    #[test]
    fn output_shapes_and_ranges() {
        for discrete in [false, true] {
            let cfg = small_cfg(discrete);
            let mut p = init_params(&cfg, &mut stream(17, Stream::Init)).unwrap();
            amplify(&mut p, 30.0);
            let y = predict(&batch(&cfg, 4, 18), &p, &cfg).unwrap();
            assert_eq!(y.shape(), [4, 3, cfg.action_space.head_dim()]);
            assert!(y.is_finite());
            if !discrete {
                assert!(y.data().iter().all(|v| v.abs() <= 1.0));
            }
        }
    }

    #[test]
    fn deterministic_forward() {
        let cfg = small_cfg(true);
        let p = init_params(&cfg, &mut stream(19, Stream::Init)).unwrap();
        let b = batch(&cfg, 2, 20);
        assert_eq!(
            predict(&b, &p, &cfg).unwrap(),
            predict(&b, &p, &cfg).unwrap()
        );
    }

    #[test]
    fn init_statistics() {
        let cfg = DecisionMambaConfig::default();
        let p = init_params(&cfg, &mut stream(21, Stream::Init)).unwrap();
        let mut vals = Vec::new();
        p.visit("", &mut |name, t| {
            if name.starts_with("layers") && name.ends_with("weight") {
                vals.extend_from_slice(t.data());
            }
        });
        assert!(vals.len() >= 100_000, "{}", vals.len());
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let std = (vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64).sqrt();
        assert!((std - 0.02).abs() < 0.002, "{std}");
        for l in &p.layers {
            assert!(l.ssm_a_ok());
        }
    }

    impl MambaLayerParams {
        fn ssm_a_ok(&self) -> bool {
            let a = self.block.ssm.a();
            let n = a.shape()[1];
            a.data()
                .iter()
                .enumerate()
                .all(|(i, v)| (v + ((i % n) as f64 + 1.0)).abs() < 1e-12)
        }
    }

    #[test]
    fn block_gradients() {
        let mut p = MambaBlockParams::init(8, 2, 4, 4, &mut stream(22, Stream::Init));
        p.visit_mut("", &mut |name, t| {
            if name.ends_with("weight") {
                t.data_mut().iter_mut().for_each(|v| *v *= 15.0);
            }
        });
        let x = random(&[1, 5, 8], 23);
        let r = gradcheck::check_with_params(&p, &[x], DEFAULT_STEP, |_, p, v| {
            mamba_block_forward(v[0], p, ScanMode::Sequential)
        })
        .unwrap();
        assert!(r.passes(1e-4), "{r:?}");
    }
}
