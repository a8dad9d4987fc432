//! Model: group-normalized pre-activation residual feature extractor plus a
//! classifier head, projector and predictor over the shared representation.
//!
//! Parameters are a named, ordered collection tagged by group. The classifier
//! output layer is the only `Head`-group entry: the hidden layer it shares
//! with the projector is tagged `Projector`, so it *is* updated during inner
//! adaptation while the classifier output layer stays frozen.

use indexmap::IndexMap;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::rng;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Group {
    #[serde(rename = "f")]
    Feature,
    #[serde(rename = "h")]
    Head,
    #[serde(rename = "p")]
    Projector,
    #[serde(rename = "q")]
    Predictor,
}

impl Group {
    pub fn tag(&self) -> &'static str {
        match self {
            Group::Feature => "f",
            Group::Head => "h",
            Group::Projector => "p",
            Group::Predictor => "q",
        }
    }

    /// The inner loop updates exactly {f, p, q}; the classifier head is frozen.
    pub fn inner_adaptable(&self) -> bool {
        !matches!(self, Group::Head)
    }
}

#[derive(Clone, Debug)]
pub struct ParamEntry<T> {
    pub tensor: Tensor<T>,
    pub group: Group,
}

/// Named, ordered, group-tagged trainable tensors.
#[derive(Clone, Debug, Default)]
pub struct ParameterSet<T> {
    entries: IndexMap<String, ParamEntry<T>>,
}

impl<T: Scalar> ParameterSet<T> {
    pub fn new() -> Self {
        ParameterSet {
            entries: IndexMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, group: Group, tensor: Tensor<T>) -> Result<()> {
        if self.entries.contains_key(name) {
            return Err(Error::InvalidArgument {
                op: "parameter-set",
                msg: format!("duplicate parameter name `{name}`"),
            });
        }
        self.entries
            .insert(name.to_string(), ParamEntry { tensor, group });
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry<T>> {
        self.entries.get(name)
    }

    pub fn tensor(&self, name: &str) -> &Tensor<T> {
        &self.entries[name].tensor
    }

    /// Replace a tensor, keeping name, order and group. Shape must match.
    pub fn set_tensor(&mut self, name: &str, tensor: Tensor<T>) -> Result<()> {
        let entry = self.entries.get_mut(name).ok_or(Error::InvalidArgument {
            op: "parameter-set",
            msg: format!("unknown parameter `{name}`"),
        })?;
        if entry.tensor.shape() != tensor.shape() {
            return Err(Error::ShapeMismatch {
                op: "parameter-set",
                lhs: entry.tensor.shape().to_vec(),
                rhs: tensor.shape().to_vec(),
            });
        }
        entry.tensor = tensor;
        Ok(())
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &ParamEntry<T>)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn has_group(&self, group: Group) -> bool {
        self.entries.values().any(|e| e.group == group)
    }

    pub fn total_elements(&self) -> usize {
        self.entries.values().map(|e| e.tensor.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParameterSet<U> {
        ParameterSet {
            entries: self
                .entries
                .iter()
                .map(|(k, e)| {
                    (
                        k.clone(),
                        ParamEntry {
                            tensor: e.tensor.cast::<U>(),
                            group: e.group,
                        },
                    )
                })
                .collect(),
        }
    }
}

/// Architecture description. `channel_widths` has one entry per stage.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub input_resolution: usize,
    pub channel_widths: Vec<usize>,
    pub blocks_per_stage: usize,
    pub gn_groups: usize,
    pub projector_hidden: usize,
    pub projection_dim: usize,
    pub class_count: usize,
    /// Projector/predictor heads present; the plain baseline drops them and
    /// owns its classifier hidden layer instead.
    pub with_byol_heads: bool,
}

impl ModelConfig {
    /// Full-scale preset: 26 weight layers, 32 initial filters, 16 groups.
    pub fn paper() -> Self {
        ModelConfig {
            input_resolution: 32,
            channel_widths: vec![32, 64, 128],
            blocks_per_stage: 4,
            gn_groups: 16,
            projector_hidden: 256,
            projection_dim: 128,
            class_count: 10,
            with_byol_heads: true,
        }
    }

    /// Desk-scale preset for fast end-to-end runs.
    pub fn toy() -> Self {
        ModelConfig {
            input_resolution: 32,
            channel_widths: vec![8, 16],
            blocks_per_stage: 2,
            gn_groups: 4,
            projector_hidden: 32,
            projection_dim: 16,
            class_count: 10,
            with_byol_heads: true,
        }
    }

    pub fn repr_width(&self) -> usize {
        *self.channel_widths.last().expect("at least one stage")
    }

    pub fn validate(&self) -> Result<()> {
        if self.channel_widths.is_empty()
            || self.blocks_per_stage == 0
            || self.channel_widths.iter().any(|&w| w == 0)
            || self.projector_hidden == 0
            || self.projection_dim == 0
            || self.class_count == 0
            || self.input_resolution < 8
        {
            return Err(Error::Config("model dimensions must be positive".into()));
        }
        for &w in &self.channel_widths {
            if w % self.gn_groups != 0 {
                return Err(Error::Config(format!(
                    "group count {} does not divide channel width {w}",
                    self.gn_groups
                )));
            }
        }
        Ok(())
    }

    /// Weight-layer audit: stem + two convs per block + the classifier
    /// output layer. The paper-scale preset must report exactly 26.
    pub fn weight_layer_count(&self) -> usize {
        1 + self.channel_widths.len() * self.blocks_per_stage * 2 + 1
    }
}

fn uniform_tensor<T: Scalar>(shape: &[usize], bound: f64, rng: &mut impl Rng) -> Tensor<T> {
    Tensor::from_fn(shape, |_| {
        T::from_f64(rng.random_range(-bound..bound))
    })
}

/// Fan-in-scaled uniform init for convs and linears, unit gain / zero bias
/// for normalization layers. Recorded in checkpoints as "uniform-fan-in".
pub const INIT_SCHEME: &str = "uniform-fan-in";

pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParameterSet<T>> {
    cfg.validate()?;
    let mut r = rng::stream(seed, &[0x696e6974]);
    let mut params = ParameterSet::new();
    let mut conv = |params: &mut ParameterSet<T>, name: &str, oc: usize, ic: usize, r: &mut rand_chacha::ChaCha8Rng| -> Result<()> {
        let fan_in = (ic * 9) as f64;
        params.insert(
            name,
            Group::Feature,
            uniform_tensor(&[oc, ic, 3, 3], (6.0 / fan_in).sqrt(), r),
        )
    };
    let mut linear = |params: &mut ParameterSet<T>, name: &str, group: Group, d_in: usize, d_out: usize, r: &mut rand_chacha::ChaCha8Rng| -> Result<()> {
        params.insert(
            &format!("{name}.w"),
            group,
            uniform_tensor(&[d_in, d_out], (6.0 / d_in as f64).sqrt(), r),
        )?;
        params.insert(&format!("{name}.b"), group, Tensor::zeros(&[d_out]))
    };
    let gn = |params: &mut ParameterSet<T>, name: &str, c: usize| -> Result<()> {
        params.insert(&format!("{name}.gain"), Group::Feature, Tensor::full(&[c], T::one()))?;
        params.insert(&format!("{name}.bias"), Group::Feature, Tensor::zeros(&[c]))
    };

    conv(&mut params, "f.stem.w", cfg.channel_widths[0], 3, &mut r)?;
    let mut c_in = cfg.channel_widths[0];
    for (si, &width) in cfg.channel_widths.iter().enumerate() {
        for bi in 0..cfg.blocks_per_stage {
            let prefix = format!("f.s{si}.b{bi}");
            gn(&mut params, &format!("{prefix}.gn1"), c_in)?;
            conv(&mut params, &format!("{prefix}.conv1.w"), width, c_in, &mut r)?;
            gn(&mut params, &format!("{prefix}.gn2"), width)?;
            conv(&mut params, &format!("{prefix}.conv2.w"), width, width, &mut r)?;
            c_in = width;
        }
    }
    gn(&mut params, "f.final.gn", c_in)?;

    let repr = cfg.repr_width();
    if cfg.with_byol_heads {
        linear(&mut params, "p.hidden", Group::Projector, repr, cfg.projector_hidden, &mut r)?;
        linear(&mut params, "p.out", Group::Projector, cfg.projector_hidden, cfg.projection_dim, &mut r)?;
        linear(&mut params, "q.hidden", Group::Predictor, cfg.projection_dim, cfg.projector_hidden, &mut r)?;
        linear(&mut params, "q.out", Group::Predictor, cfg.projector_hidden, cfg.projection_dim, &mut r)?;
        linear(&mut params, "h.out", Group::Head, cfg.projector_hidden, cfg.class_count, &mut r)?;
    } else {
        linear(&mut params, "h.hidden", Group::Head, repr, cfg.projector_hidden, &mut r)?;
        linear(&mut params, "h.out", Group::Head, cfg.projector_hidden, cfg.class_count, &mut r)?;
    }
    Ok(params)
}

/// Parameters as graph nodes: the same names and groups, mapped to whatever
/// node currently plays that role (leaves for the meta-model, update results
/// for a task-specific model).
#[derive(Clone, Debug)]
pub struct ParamVars {
    entries: IndexMap<String, (Var, Group)>,
}

impl ParamVars {
    /// Register every parameter as a named leaf of `g`.
    pub fn leaves<T: Scalar>(g: &Graph<T>, params: &ParameterSet<T>) -> Self {
        let entries = params
            .iter()
            .map(|(name, e)| (name.clone(), (g.param(name, e.tensor.clone()), e.group)))
            .collect();
        ParamVars { entries }
    }

    pub fn get(&self, name: &str) -> Var {
        self.entries[name].0
    }

    pub fn try_get(&self, name: &str) -> Option<Var> {
        self.entries.get(name).map(|&(v, _)| v)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, Var, Group)> {
        self.entries.iter().map(|(n, &(v, g))| (n, v, g))
    }

    pub fn vars_of(&self, pred: impl Fn(Group) -> bool) -> IndexMap<String, Var> {
        self.entries
            .iter()
            .filter(|(_, &(_, g))| pred(g))
            .map(|(n, &(v, _))| (n.clone(), v))
            .collect()
    }

    /// The inner-adaptable subset: groups {f, p, q}.
    pub fn adaptable(&self) -> IndexMap<String, Var> {
        self.vars_of(|g| g.inner_adaptable())
    }

    pub fn all_vars(&self) -> IndexMap<String, Var> {
        self.vars_of(|_| true)
    }

    /// New map with the given nodes substituted; untouched names (the frozen
    /// classifier head during adaptation) keep their existing nodes.
    pub fn with_updates(&self, updates: &IndexMap<String, Var>) -> Self {
        let entries = self
            .entries
            .iter()
            .map(|(n, &(v, g))| (n.clone(), (*updates.get(n).unwrap_or(&v), g)))
            .collect();
        ParamVars { entries }
    }

    /// Extract current values into a detached parameter set.
    pub fn to_parameter_set<T: Scalar>(&self, g: &Graph<T>) -> ParameterSet<T> {
        let mut out = ParameterSet::new();
        for (name, &(v, group)) in &self.entries {
            out.insert(name, group, g.value(v)).expect("unique names");
        }
        out
    }
}

/// Group normalization: per (sample, group) zero mean / unit variance before
/// a per-channel affine.
pub fn group_norm<T: Scalar>(
    g: &Graph<T>,
    x: Var,
    groups: usize,
    gain: Var,
    bias: Var,
    eps: f64,
) -> Result<Var> {
    let sx = g.shape(x);
    if sx.len() != 4 {
        return Err(Error::InvalidArgument {
            op: "group-norm",
            msg: format!("expected NCHW input, got {:?}", sx),
        });
    }
    let (n, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
    if groups == 0 || c % groups != 0 {
        return Err(Error::InvalidArgument {
            op: "group-norm",
            msg: format!("channel count {c} not divisible by {groups} groups"),
        });
    }
    if eps <= 0.0 {
        return Err(Error::InvalidArgument {
            op: "group-norm",
            msg: "eps must be positive".into(),
        });
    }
    let gw = c / groups * h * w;
    let xg = g.reshape(x, &[n * groups, gw])?;
    let mean = g.reduce_mean(xg, &[1], true)?;
    let centered = g.sub(xg, g.broadcast_to(mean, &[n * groups, gw])?)?;
    let sq = g.mul(centered, centered)?;
    let var = g.reduce_mean(sq, &[1], true)?;
    let inv = g.recip(g.sqrt(g.affine(var, 1.0, eps)));
    let xhat = g.mul(centered, g.broadcast_to(inv, &[n * groups, gw])?)?;
    let xhat = g.reshape(xhat, &sx)?;
    let gain4 = g.broadcast_to(g.reshape(gain, &[1, c, 1, 1])?, &sx)?;
    let bias4 = g.broadcast_to(g.reshape(bias, &[1, c, 1, 1])?, &sx)?;
    g.add(g.mul(xhat, gain4)?, bias4)
}

pub const GN_EPS: f64 = 1e-5;

fn linear_layer<T: Scalar>(g: &Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    let sy = g.shape(y);
    let b2 = g.reshape(b, &[1, sy[1]])?;
    g.add(y, g.broadcast_to(b2, &sy)?)
}

/// Feature extractor: stem conv, pre-activation residual stages with
/// parameter-free downsampling shortcuts (avg-pool + channel zero-pad, so the
/// weight-layer audit stays exact), final GN/relu, global average pool.
pub fn forward_features<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    x: Var,
) -> Result<Var> {
    let sx = g.shape(x);
    let r = cfg.input_resolution;
    if sx.len() != 4 || sx[1] != 3 || sx[2] != r || sx[3] != r {
        return Err(Error::InvalidArgument {
            op: "feature-extractor",
            msg: format!("expected [N,3,{r},{r}] input, got {:?}", sx),
        });
    }
    let mut h = g.conv2d(x, params.get("f.stem.w"), 1, 1)?;
    for (si, &width) in cfg.channel_widths.iter().enumerate() {
        for bi in 0..cfg.blocks_per_stage {
            let prefix = format!("f.s{si}.b{bi}");
            let downsample = si > 0 && bi == 0;
            let c_in = g.shape(h)[1];

            let t = group_norm(
                g,
                h,
                cfg.gn_groups,
                params.get(&format!("{prefix}.gn1.gain")),
                params.get(&format!("{prefix}.gn1.bias")),
                GN_EPS,
            )?;
            let t = g.relu(t);
            let t = g.conv2d(t, params.get(&format!("{prefix}.conv1.w")), if downsample { 2 } else { 1 }, 1)?;
            let t = group_norm(
                g,
                t,
                cfg.gn_groups,
                params.get(&format!("{prefix}.gn2.gain")),
                params.get(&format!("{prefix}.gn2.bias")),
                GN_EPS,
            )?;
            let t = g.relu(t);
            let t = g.conv2d(t, params.get(&format!("{prefix}.conv2.w")), 1, 1)?;

            let shortcut = if downsample {
                let pooled = g.avg_pool2d(h, 2, 2)?;
                let sp = g.shape(pooled);
                let ranges = [(0, sp[0]), (0, c_in), (0, sp[2]), (0, sp[3])];
                let full = [sp[0], width, sp[2], sp[3]];
                g.pad_zero(pooled, &ranges, &full)?
            } else {
                h
            };
            h = g.add(shortcut, t)?;
        }
    }
    let h = group_norm(
        g,
        h,
        cfg.gn_groups,
        params.get("f.final.gn.gain"),
        params.get("f.final.gn.bias"),
        GN_EPS,
    )?;
    let h = g.relu(h);
    g.reduce_mean(h, &[2, 3], false)
}

pub struct HeadOutputs {
    pub logits: Var,
    pub projection: Var,
    pub prediction: Var,
}

/// The three heads over the shared representation. The classifier shares the
/// projector's (post-relu) hidden layer; projector and predictor carry no
/// normalization layers.
pub fn heads<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    feat: Var,
) -> Result<HeadOutputs> {
    let sf = g.shape(feat);
    if sf.len() != 2 || sf[1] != cfg.repr_width() {
        return Err(Error::ShapeMismatch {
            op: "heads",
            lhs: sf,
            rhs: vec![0, cfg.repr_width()],
        });
    }
    let hidden = linear_layer(g, feat, params.get("p.hidden.w"), params.get("p.hidden.b"))?;
    let hidden = g.relu(hidden);
    let logits = linear_layer(g, hidden, params.get("h.out.w"), params.get("h.out.b"))?;
    let projection = linear_layer(g, hidden, params.get("p.out.w"), params.get("p.out.b"))?;
    let qh = linear_layer(g, projection, params.get("q.hidden.w"), params.get("q.hidden.b"))?;
    let qh = g.relu(qh);
    let prediction = linear_layer(g, qh, params.get("q.out.w"), params.get("q.out.b"))?;
    Ok(HeadOutputs {
        logits,
        projection,
        prediction,
    })
}

/// Classifier for the baseline variant (no projector/predictor present).
pub fn classify_baseline<T: Scalar>(
    g: &Graph<T>,
    params: &ParamVars,
    feat: Var,
) -> Result<Var> {
    let hidden = linear_layer(g, feat, params.get("h.hidden.w"), params.get("h.hidden.b"))?;
    let hidden = g.relu(hidden);
    linear_layer(g, hidden, params.get("h.out.w"), params.get("h.out.b"))
}

/// Logits under whichever head layout the parameter set carries.
pub fn classify<T: Scalar>(
    g: &Graph<T>,
    cfg: &ModelConfig,
    params: &ParamVars,
    feat: Var,
) -> Result<Var> {
    if params.try_get("p.hidden.w").is_some() {
        Ok(heads(g, cfg, params, feat)?.logits)
    } else {
        classify_baseline(g, params, feat)
    }
}

pub fn argmax_rows<T: Scalar>(t: &Tensor<T>) -> Vec<usize> {
    let cols = t.shape()[1];
    t.data()
        .chunks(cols)
        .map(|row| {
            row.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                .map(|(i, _)| i)
                .unwrap_or(0)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_preset_reports_26_weight_layers() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.weight_layer_count(), 26);
        assert_eq!(cfg.channel_widths[0], 32);
        assert_eq!(cfg.gn_groups, 16);
        assert_eq!(cfg.projector_hidden, 256);
        assert_eq!(cfg.projection_dim, 128);
        assert_eq!(cfg.class_count, 10);
    }

    #[test]
    fn toy_preset_representation_width_is_last_channel_count() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 3).unwrap();
        let g = Graph::<f32>::new();
        let vars = ParamVars::leaves(&g, &params);
        let x = g.constant(Tensor::from_fn(&[2, 3, 32, 32], |i| (i % 17) as f32 / 17.0));
        let feat = forward_features(&g, &cfg, &vars, x).unwrap();
        assert_eq!(g.shape(feat), vec![2, cfg.repr_width()]);
        let out = heads(&g, &cfg, &vars, feat).unwrap();
        assert_eq!(g.shape(out.logits), vec![2, cfg.class_count]);
        assert_eq!(g.shape(out.projection), vec![2, cfg.projection_dim]);
        assert_eq!(g.shape(out.prediction), vec![2, cfg.projection_dim]);
    }

    #[test]
    fn resolution_mismatch_is_an_error() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 3).unwrap();
        let g = Graph::<f32>::new();
        let vars = ParamVars::leaves(&g, &params);
        let x = g.constant(Tensor::zeros(&[1, 3, 16, 16]));
        assert!(forward_features(&g, &cfg, &vars, x).is_err());
    }

    #[test]
    fn group_norm_constant_input_yields_bias() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[2, 4, 3, 3], 0.7));
        let gain = g.constant(Tensor::full(&[4], 2.0));
        let bias = g.constant(Tensor::from_fn(&[4], |i| i as f64));
        let y = group_norm(&g, x, 2, gain, bias, 1e-5).unwrap();
        let v = g.value(y);
        // zero variance: normalized value 0, output = bias per channel
        for n in 0..2 {
            for c in 0..4 {
                for i in 0..9 {
                    let val = v.data()[n * 36 + c * 9 + i];
                    assert!((val - c as f64).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn group_norm_statistics_normalize_per_group() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_fn(&[3, 8, 4, 4], |i| {
            ((i * 2654435761) % 1000) as f64 / 250.0 - 2.0
        }));
        let gain = g.constant(Tensor::full(&[8], 1.0));
        let bias = g.constant(Tensor::zeros(&[8]));
        let y = group_norm(&g, x, 4, gain, bias, 1e-9).unwrap();
        let v = g.value(y);
        let gw = 2 * 16;
        for ng in 0..3 * 4 {
            let slice = &v.data()[ng * gw..(ng + 1) * gw];
            let mean: f64 = slice.iter().sum::<f64>() / gw as f64;
            let var: f64 = slice.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / gw as f64;
            assert!(mean.abs() < 1e-6, "group mean {mean}");
            assert!((var - 1.0).abs() < 1e-4, "group var {var}");
        }
    }

    #[test]
    fn group_norm_indivisible_channels_rejected() {
        let g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(&[1, 6, 2, 2]));
        let gain = g.constant(Tensor::full(&[6], 1.0));
        let bias = g.constant(Tensor::zeros(&[6]));
        assert!(group_norm(&g, x, 4, gain, bias, 1e-5).is_err());
    }

    #[test]
    fn shared_hidden_layer_feeds_both_heads() {
        let cfg = ModelConfig::toy();
        let base = init_params::<f64>(&cfg, 11).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 31 % 97) as f64) / 97.0);

        let run = |params: &ParameterSet<f64>| {
            let g = Graph::<f64>::new();
            let vars = ParamVars::leaves(&g, params);
            let xv = g.constant(x.clone());
            let feat = forward_features(&g, &cfg, &vars, xv).unwrap();
            let out = heads(&g, &cfg, &vars, feat).unwrap();
            (g.value(out.logits), g.value(out.projection))
        };

        let (logits0, proj0) = run(&base);

        // perturb the shared hidden layer: both logits and projection move
        let mut shared = base.clone();
        let bumped = shared.tensor("p.hidden.w").map(|v| v + 0.05);
        shared.set_tensor("p.hidden.w", bumped).unwrap();
        let (logits1, proj1) = run(&shared);
        assert_ne!(logits0.data(), logits1.data());
        assert_ne!(proj0.data(), proj1.data());

        // perturb the classifier output layer: only logits move
        let mut head = base.clone();
        let bumped = head.tensor("h.out.w").map(|v| v + 0.05);
        head.set_tensor("h.out.w", bumped).unwrap();
        let (logits2, proj2) = run(&head);
        assert_ne!(logits0.data(), logits2.data());
        assert_eq!(proj0.data(), proj2.data());
    }

    #[test]
    fn forward_is_pure_bitwise() {
        let cfg = ModelConfig::toy();
        let params = init_params::<f32>(&cfg, 5).unwrap();
        let x = Tensor::from_fn(&[2, 3, 32, 32], |i| ((i * 13 % 61) as f32) / 61.0);
        let run = || {
            let g = Graph::<f32>::new();
            let vars = ParamVars::leaves(&g, &params);
            let xv = g.constant(x.clone());
            let feat = forward_features(&g, &cfg, &vars, xv).unwrap();
            g.value(heads(&g, &cfg, &vars, feat).unwrap().logits)
        };
        let a = run();
        let b = run();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn zeroed_residual_branches_reduce_to_shortcut_path() {
        let cfg = ModelConfig::toy();
        let mut params = init_params::<f64>(&cfg, 7).unwrap();
        // zero every branch GN affine so each residual branch dies at its relu
        for si in 0..cfg.channel_widths.len() {
            for bi in 0..cfg.blocks_per_stage {
                for gn in ["gn1", "gn2"] {
                    let name = format!("f.s{si}.b{bi}.{gn}.gain");
                    let zero = Tensor::zeros(params.tensor(&name).shape());
                    params.set_tensor(&name, zero).unwrap();
                }
            }
        }
        let x = Tensor::from_fn(&[1, 3, 32, 32], |i| ((i % 7) as f64) / 7.0);

        let g = Graph::<f64>::new();
        let vars = ParamVars::leaves(&g, &params);
        let xv = g.constant(x.clone());
        let full = g.value(forward_features(&g, &cfg, &vars, xv).unwrap());

        // stem-path contribution only: stem conv, shortcut chain, final GN
        let g2 = Graph::<f64>::new();
        let vars2 = ParamVars::leaves(&g2, &params);
        let xv2 = g2.constant(x);
        let mut h = g2.conv2d(xv2, vars2.get("f.stem.w"), 1, 1).unwrap();
        for (si, &width) in cfg.channel_widths.iter().enumerate() {
            for bi in 0..cfg.blocks_per_stage {
                if si > 0 && bi == 0 {
                    let pooled = g2.avg_pool2d(h, 2, 2).unwrap();
                    let sp = g2.shape(pooled);
                    h = g2
                        .pad_zero(
                            pooled,
                            &[(0, sp[0]), (0, sp[1]), (0, sp[2]), (0, sp[3])],
                            &[sp[0], width, sp[2], sp[3]],
                        )
                        .unwrap();
                }
            }
        }
        let h = group_norm(
            &g2,
            h,
            cfg.gn_groups,
            vars2.get("f.final.gn.gain"),
            vars2.get("f.final.gn.bias"),
            GN_EPS,
        )
        .unwrap();
        let h = g2.relu(h);
        let stem_only = g2.value(g2.reduce_mean(h, &[2, 3], false).unwrap());

        for (a, b) in full.data().iter().zip(stem_only.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
