//! The miniature causal video decoder.
//!
//! Layout: `conv_in` lifts the latent to the first stage width, each stage
//! upsamples then runs residual blocks
//! (`norm -> silu -> conv -> norm -> silu -> conv` plus shortcut), and
//! `norm_out -> silu -> conv_out` produces the video.

mod config;
pub mod store;

use std::collections::{BTreeMap, BTreeSet};

pub use config::{gcd, DecoderConfig, OperatorKind, ShortcutKind, StageName, StageSpec};

use crate::autodiff::{Graph, Var};
use crate::error::{bail, Error, Result};
use crate::ops::{separable, DEFAULT_NORM_EPS};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// Channel space indexed by one axis of a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Space {
    Latent,
    /// Output of `conv_in`.
    Head,
    /// Output (and hidden) channels of the stage at this index.
    Stage(usize),
    Rgb,
    /// Singleton axis of a depthwise kernel.
    Unit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Weight,
    Bias,
    NormScale,
    NormShift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub role: ParamRole,
    pub axis0: Space,
    pub axis1: Option<Space>,
    pub fan_in: usize,
    /// Stage that owns the parameter, `None` for head and tail layers.
    pub stage: Option<usize>,
    /// True for the main-path convolutions whose form follows the stage
    /// operator kind.
    pub operator: bool,
}

fn conv_specs(
    out: &mut Vec<ParamSpec>,
    prefix: &str,
    kind: OperatorKind,
    k: usize,
    (cin, in_space): (usize, Space),
    (cout, out_space): (usize, Space),
    stage: Option<usize>,
    operator: bool,
) {
    let mut push = |suffix: &str, shape: Vec<usize>, role, axis0, axis1, fan_in| {
        out.push(ParamSpec {
            name: format!("{prefix}.{suffix}"),
            shape,
            role,
            axis0,
            axis1,
            fan_in,
            stage,
            operator,
        })
    };
    match kind {
        OperatorKind::Causal3d => {
            let fan = cin * k * k * k;
            push(
                "weight",
                vec![cout, cin, k, k, k],
                ParamRole::Weight,
                out_space,
                Some(in_space),
                fan,
            );
            push("bias", vec![cout], ParamRole::Bias, out_space, None, fan);
        }
        OperatorKind::Conv2d => {
            let fan = cin * k * k;
            push(
                "weight",
                vec![cout, cin, k, k],
                ParamRole::Weight,
                out_space,
                Some(in_space),
                fan,
            );
            push("bias", vec![cout], ParamRole::Bias, out_space, None, fan);
        }
        OperatorKind::Dwsep3d => {
            push(
                "dw",
                vec![cin, 1, k, k, k],
                ParamRole::Weight,
                in_space,
                Some(Space::Unit),
                k * k * k,
            );
            push(
                "pw",
                vec![cout, cin, 1, 1, 1],
                ParamRole::Weight,
                out_space,
                Some(in_space),
                cin,
            );
            push("bias", vec![cout], ParamRole::Bias, out_space, None, cin);
        }
    }
}

fn norm_specs(out: &mut Vec<ParamSpec>, prefix: &str, c: usize, space: Space, stage: Option<usize>) {
    for (suffix, role) in [("scale", ParamRole::NormScale), ("shift", ParamRole::NormShift)] {
        out.push(ParamSpec {
            name: format!("{prefix}.{suffix}"),
            shape: vec![c],
            role,
            axis0: space,
            axis1: None,
            fan_in: c,
            stage,
            operator: false,
        });
    }
}

/// Every parameter of a decoder with this configuration, in forward order.
pub fn param_specs(config: &DecoderConfig) -> Vec<ParamSpec> {
    let k = config.kernel;
    let mut out = Vec::new();
    let head = config.head_channels();
    conv_specs(
        &mut out,
        "conv_in",
        OperatorKind::Causal3d,
        k,
        (config.latent_channels, Space::Latent),
        (head, Space::Head),
        None,
        false,
    );
    let mut prev = (head, Space::Head);
    for (si, s) in config.stages.iter().enumerate() {
        let own = Space::Stage(si);
        for b in 0..s.num_blocks {
            let input = if b == 0 { prev } else { (s.channels_out, own) };
            let p = format!("{}.b{}", s.name, b);
            norm_specs(&mut out, &format!("{p}.norm1"), input.0, input.1, Some(si));
            conv_specs(
                &mut out,
                &format!("{p}.conv1"),
                s.operator,
                k,
                input,
                (s.channels_out, own),
                Some(si),
                true,
            );
            norm_specs(&mut out, &format!("{p}.norm2"), s.channels_out, own, Some(si));
            conv_specs(
                &mut out,
                &format!("{p}.conv2"),
                s.operator,
                k,
                (s.channels_out, own),
                (s.channels_out, own),
                Some(si),
                true,
            );
            if b == 0 && s.shortcut == ShortcutKind::Conv1x1 {
                out.push(ParamSpec {
                    name: format!("{p}.shortcut.weight"),
                    shape: vec![s.channels_out, input.0, 1, 1, 1],
                    role: ParamRole::Weight,
                    axis0: own,
                    axis1: Some(input.1),
                    fan_in: input.0,
                    stage: Some(si),
                    operator: false,
                });
                out.push(ParamSpec {
                    name: format!("{p}.shortcut.bias"),
                    shape: vec![s.channels_out],
                    role: ParamRole::Bias,
                    axis0: own,
                    axis1: None,
                    fan_in: input.0,
                    stage: Some(si),
                    operator: false,
                });
            }
        }
        prev = (s.channels_out, own);
    }
    norm_specs(&mut out, "norm_out", prev.0, prev.1, None);
    conv_specs(
        &mut out,
        "conv_out",
        OperatorKind::Causal3d,
        k,
        prev,
        (config.output_channels, Space::Rgb),
        None,
        false,
    );
    out
}

/// Seeded initialization: uniform in `±1/sqrt(fan_in)` for weights and
/// biases, unit scale and zero shift for normalizations.
pub(crate) fn init_param(spec: &ParamSpec, seed: u64) -> Tensor {
    match spec.role {
        ParamRole::NormScale => Tensor::full(&spec.shape, 1.0),
        ParamRole::NormShift => Tensor::zeros(&spec.shape),
        ParamRole::Weight | ParamRole::Bias => {
            let mut rng = derive_rng(seed, &spec.name);
            Tensor::uniform(&spec.shape, 1.0 / (spec.fan_in as f64).sqrt(), &mut rng)
        }
    }
}

/// Parameters of one forward pass, bound into a [`Graph`].
pub struct BoundParams {
    vars: BTreeMap<String, Var>,
}

impl BoundParams {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Contract(format!("parameter '{name}' is not bound")))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decoder {
    config: DecoderConfig,
    params: BTreeMap<String, Tensor>,
}

impl Decoder {
    pub fn build(config: DecoderConfig) -> Result<Self> {
        config.validate()?;
        let params = param_specs(&config)
            .iter()
            .map(|s| (s.name.clone(), init_param(s, config.seed)))
            .collect();
        Ok(Self { config, params })
    }

    /// Assembles a decoder from explicit parameters, checking every name and
    /// shape against the configuration.
    pub fn from_parts(config: DecoderConfig, mut params: BTreeMap<String, Tensor>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            bail!(
                Config,
                "configuration declares {} parameters, {} supplied",
                specs.len(),
                params.len()
            );
        }
        for s in &specs {
            match params.get(&s.name) {
                Some(t) if t.shape() == s.shape.as_slice() => {}
                Some(t) => bail!(
                    Config,
                    "parameter '{}' has shape {:?}, configuration expects {:?}",
                    s.name,
                    t.shape(),
                    s.shape
                ),
                None => bail!(Config, "parameter '{}' is missing", s.name),
            }
        }
        let params = std::mem::take(&mut params);
        Ok(Self { config, params })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.config
    }

    pub fn params(&self) -> &BTreeMap<String, Tensor> {
        &self.params
    }

    pub(crate) fn params_mut(&mut self) -> &mut BTreeMap<String, Tensor> {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))
    }

    pub fn specs(&self) -> Vec<ParamSpec> {
        param_specs(&self.config)
    }

    /// Replaces one parameter value; the shape must not change.
    pub fn set_param(&mut self, name: &str, value: Tensor) -> Result<()> {
        let slot = self
            .params
            .get_mut(name)
            .ok_or_else(|| Error::Contract(format!("no parameter named '{name}'")))?;
        if slot.shape() != value.shape() {
            bail!(
                Dimension,
                "parameter '{}' has shape {:?}, got {:?}",
                name,
                slot.shape(),
                value.shape()
            );
        }
        *slot = value;
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn stage_names(&self) -> Vec<StageName> {
        self.config.stages.iter().map(|s| s.name).collect()
    }

    pub fn bind(&self, g: &mut Graph, trainable: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|(n, t)| {
                let v = if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (n.clone(), v)
            })
            .collect();
        BoundParams { vars }
    }

    fn norm_act(&self, g: &mut Graph, p: &BoundParams, prefix: &str, x: Var) -> Result<Var> {
        if self.config.linear {
            return Ok(x);
        }
        let c = g.value(x).shape()[0];
        let scale = p.get(&format!("{prefix}.scale"))?;
        let shift = p.get(&format!("{prefix}.shift"))?;
        let y = g.group_norm(x, scale, shift, self.config.groups_for(c), DEFAULT_NORM_EPS)?;
        Ok(g.silu(y))
    }

    fn layer(&self, g: &mut Graph, p: &BoundParams, prefix: &str, kind: OperatorKind, x: Var) -> Result<Var> {
        match kind {
            OperatorKind::Causal3d | OperatorKind::Conv2d => {
                let w = p.get(&format!("{prefix}.weight"))?;
                let b = p.get(&format!("{prefix}.bias"))?;
                g.conv(x, w, Some(b), [1, 1, 1], 1)
            }
            OperatorKind::Dwsep3d => {
                let dw = p.get(&format!("{prefix}.dw"))?;
                let pw = p.get(&format!("{prefix}.pw"))?;
                let b = p.get(&format!("{prefix}.bias"))?;
                separable(g, x, dw, pw, b)
            }
        }
    }

    pub fn head(&self, g: &mut Graph, p: &BoundParams, latent: Var) -> Result<Var> {
        let c = g.value(latent).dims4()?[0];
        if c != self.config.latent_channels {
            bail!(
                Dimension,
                "latent has {} channels, decoder expects {}",
                c,
                self.config.latent_channels
            );
        }
        self.layer(g, p, "conv_in", OperatorKind::Causal3d, latent)
    }

    /// Upsampling plus residual blocks of the stage at `index`.
    pub fn stage_forward(&self, g: &mut Graph, p: &BoundParams, index: usize, x: Var) -> Result<Var> {
        let s = &self.config.stages[index];
        let mut x = if s.upsample == [1, 1, 1] {
            x
        } else {
            g.upsample(x, s.upsample)?
        };
        for b in 0..s.num_blocks {
            let prefix = format!("{}.b{}", s.name, b);
            let h = self.norm_act(g, p, &format!("{prefix}.norm1"), x)?;
            let h = self.layer(g, p, &format!("{prefix}.conv1"), s.operator, h)?;
            let h = self.norm_act(g, p, &format!("{prefix}.norm2"), h)?;
            let h = self.layer(g, p, &format!("{prefix}.conv2"), s.operator, h)?;
            let shortcut = if b == 0 && s.shortcut == ShortcutKind::Conv1x1 {
                let w = p.get(&format!("{prefix}.shortcut.weight"))?;
                let bias = p.get(&format!("{prefix}.shortcut.bias"))?;
                g.conv(x, w, Some(bias), [1, 1, 1], 1)?
            } else {
                x
            };
            x = g.add(shortcut, h)?;
        }
        Ok(x)
    }

    pub fn tail(&self, g: &mut Graph, p: &BoundParams, x: Var) -> Result<Var> {
        let h = self.norm_act(g, p, "norm_out", x)?;
        self.layer(g, p, "conv_out", OperatorKind::Causal3d, h)
    }

    /// Full forward pass on graph values. `capture` selects which stage
    /// outputs are returned; each is taken after the stage's last residual
    /// block, before the next stage upsamples.
    pub fn forward_graph(
        &self,
        g: &mut Graph,
        p: &BoundParams,
        latent: Var,
        capture: &BTreeSet<StageName>,
    ) -> Result<(Var, BTreeMap<StageName, Var>)> {
        for name in capture {
            self.config.stage_index(*name)?;
        }
        let mut x = self.head(g, p, latent)?;
        let mut feats = BTreeMap::new();
        for i in 0..self.config.stages.len() {
            x = self.stage_forward(g, p, i, x)?;
            let name = self.config.stages[i].name;
            if capture.contains(&name) {
                feats.insert(name, x);
            }
        }
        Ok((self.tail(g, p, x)?, feats))
    }

    pub fn forward(
        &self,
        latent: &Tensor,
        capture: &BTreeSet<StageName>,
    ) -> Result<(Tensor, BTreeMap<StageName, Tensor>)> {
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let l = g.constant(latent.clone());
        let (y, feats) = self.forward_graph(&mut g, &p, l, capture)?;
        let feats = feats.into_iter().map(|(k, v)| (k, g.value(v).clone())).collect();
        Ok((g.value(y).clone(), feats))
    }

    pub fn decode(&self, latent: &Tensor) -> Result<Tensor> {
        Ok(self.forward(latent, &BTreeSet::new())?.0)
    }

    /// Resumes a forward pass from the captured output of stage `after`.
    pub fn forward_from(&self, after: StageName, features: &Tensor) -> Result<Tensor> {
        let start = self.config.stage_index(after)? + 1;
        let mut g = Graph::new();
        let p = self.bind(&mut g, false);
        let mut x = g.constant(features.clone());
        for i in start..self.config.stages.len() {
            x = self.stage_forward(&mut g, &p, i, x)?;
        }
        let y = self.tail(&mut g, &p, x)?;
        Ok(g.value(y).clone())
    }

    /// New decoder whose listed stages use a different operator. Replaced
    /// main-path convolutions are freshly initialized from `seed`; every
    /// other parameter is copied.
    pub fn substitute_operators(&self, plan: &BTreeMap<StageName, OperatorKind>, seed: u64) -> Result<Decoder> {
        let mut config = self.config.clone();
        let mut changed = BTreeSet::new();
        for (name, kind) in plan {
            let idx = config.stage_index(*name)?;
            if config.stages[idx].operator != *kind {
                config.stages[idx].operator = *kind;
                changed.insert(idx);
            }
        }
        let mut params = BTreeMap::new();
        for spec in param_specs(&config) {
            let fresh = spec.operator && spec.stage.is_some_and(|s| changed.contains(&s));
            let value = if fresh {
                init_param(&spec, seed)
            } else {
                self.param(&spec.name)?.clone()
            };
            params.insert(spec.name, value);
        }
        Decoder::from_parts(config, params)
    }
}
