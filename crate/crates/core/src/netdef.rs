//! Network architecture: layer tables for the feature extractor, disparity
//! estimator, refiner and confidence-based merger, and the two-branch graph
//! that shares one encoder between the left-to-right and right-to-left paths.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{self, Activation};
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;
use crate::warp::WarpDirection;

/// Total downsampling of the feature extractor.
pub const ENCODER_STRIDE: usize = 64;
/// Standard deviation of the random-normal weight initialization.
pub const INIT_STD: f32 = 0.02;
/// Encoder layers whose activations feed the decoder skip connections.
pub const SKIP_LAYERS: [usize; 4] = [4, 8, 12, 24];
/// Channels fed to each merger: the DBP image plus its disparity.
pub const CBM_INPUT_CHANNELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LayerKind {
    Conv,
    DepthwiseConv,
    Upsample,
    Concat,
}

impl LayerKind {
    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv => "conv",
            LayerKind::DepthwiseConv => "depthwise_conv",
            LayerKind::Upsample => "upsample",
            LayerKind::Concat => "concat",
        }
    }
}

/// One row of an architecture table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub index: usize,
    pub kind: LayerKind,
    pub stride: usize,
    pub filters: Option<usize>,
    pub kernel: Option<(usize, usize)>,
    pub activation: Activation,
    pub concat_target: Option<usize>,
    /// Stage added on top of the table rows (parameter-free ×2 upsampling
    /// before the last decoder convolution).
    pub inserted: bool,
}

impl LayerSpec {
    pub const fn conv(
        index: usize,
        stride: usize,
        filters: usize,
        k: usize,
        activation: Activation,
    ) -> Self {
        LayerSpec {
            index,
            kind: LayerKind::Conv,
            stride,
            filters: Some(filters),
            kernel: Some((k, k)),
            activation,
            concat_target: None,
            inserted: false,
        }
    }

    pub const fn depthwise(index: usize, stride: usize, activation: Activation) -> Self {
        LayerSpec {
            index,
            kind: LayerKind::DepthwiseConv,
            stride,
            filters: None,
            kernel: Some((3, 3)),
            activation,
            concat_target: None,
            inserted: false,
        }
    }

    pub const fn upsample(index: usize) -> Self {
        LayerSpec {
            index,
            kind: LayerKind::Upsample,
            stride: 2,
            filters: None,
            kernel: None,
            activation: Activation::None,
            concat_target: None,
            inserted: false,
        }
    }

    pub const fn concat(index: usize, target: usize) -> Self {
        LayerSpec {
            index,
            kind: LayerKind::Concat,
            stride: 1,
            filters: None,
            kernel: None,
            activation: Activation::None,
            concat_target: Some(target),
            inserted: false,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match self.kind {
            LayerKind::Conv => self.filters.is_some() && self.kernel.is_some(),
            LayerKind::DepthwiseConv => self.filters.is_none() && self.kernel.is_some(),
            LayerKind::Upsample => {
                self.stride == 2 && self.kernel.is_none() && self.filters.is_none()
            }
            LayerKind::Concat => self.concat_target.is_some(),
        };
        if ok && self.stride > 0 {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!(
                "inconsistent layer spec {self}"
            )))
        }
    }

    /// Compact row encoding: `index|kind|stride|filters|kernel|activation|concat`.
    pub fn encode(&self) -> String {
        let opt = |v: Option<usize>| v.map_or("-".to_string(), |v| v.to_string());
        let kernel = self
            .kernel
            .map_or("-".to_string(), |(h, w)| format!("{h}x{w}"));
        format!(
            "{}{}|{}|{}|{}|{}|{}|{}",
            self.index,
            if self.inserted { "+" } else { "" },
            self.kind.name(),
            self.stride,
            opt(self.filters),
            kernel,
            self.activation.name(),
            opt(self.concat_target)
        )
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.encode())
    }
}

pub fn feature_extractor_table() -> Vec<LayerSpec> {
    use Activation::Relu6;
    let mut t = vec![
        LayerSpec::conv(1, 2, 32, 3, Relu6),
        LayerSpec::depthwise(2, 1, Relu6),
        LayerSpec::conv(3, 1, 64, 1, Relu6),
        LayerSpec::depthwise(4, 2, Relu6),
        LayerSpec::conv(5, 1, 128, 1, Relu6),
        LayerSpec::depthwise(6, 1, Relu6),
        LayerSpec::conv(7, 1, 128, 1, Relu6),
        LayerSpec::depthwise(8, 2, Relu6),
        LayerSpec::conv(9, 1, 256, 1, Relu6),
        LayerSpec::depthwise(10, 1, Relu6),
        LayerSpec::conv(11, 1, 256, 1, Relu6),
        LayerSpec::depthwise(12, 2, Relu6),
        LayerSpec::conv(13, 1, 512, 1, Relu6),
    ];
    for i in 0..5 {
        t.push(LayerSpec::depthwise(14 + 2 * i, 1, Relu6));
        t.push(LayerSpec::conv(15 + 2 * i, 1, 512, 1, Relu6));
    }
    t.extend([
        LayerSpec::depthwise(24, 2, Relu6),
        LayerSpec::conv(25, 1, 1024, 1, Relu6),
        LayerSpec::depthwise(26, 2, Relu6),
        LayerSpec::conv(27, 1, 1024, 1, Relu6),
    ]);
    t
}

pub fn disparity_estimator_table() -> Vec<LayerSpec> {
    use Activation::{Relu, Relu6};
    let mut extra = LayerSpec::upsample(46);
    extra.inserted = true;
    vec![
        LayerSpec::depthwise(28, 1, Relu6),
        LayerSpec::conv(29, 1, 512, 1, Relu6),
        LayerSpec::upsample(30),
        LayerSpec::concat(31, 24),
        LayerSpec::depthwise(32, 1, Relu6),
        LayerSpec::conv(33, 1, 512, 1, Relu6),
        LayerSpec::upsample(34),
        LayerSpec::concat(35, 12),
        LayerSpec::depthwise(36, 1, Relu6),
        LayerSpec::conv(37, 1, 256, 1, Relu6),
        LayerSpec::upsample(38),
        LayerSpec::concat(39, 8),
        LayerSpec::depthwise(40, 1, Relu6),
        LayerSpec::conv(41, 1, 128, 1, Relu6),
        LayerSpec::upsample(42),
        LayerSpec::concat(43, 4),
        LayerSpec::depthwise(44, 1, Relu6),
        LayerSpec::conv(45, 1, 64, 1, Relu6),
        LayerSpec::upsample(46),
        extra,
        LayerSpec::conv(47, 1, 1, 2, Relu),
    ]
}

pub fn refiner_table() -> Vec<LayerSpec> {
    let mut t: Vec<LayerSpec> = (48..=54)
        .map(|i| LayerSpec::conv(i, 1, 64, 3, Activation::Relu))
        .collect();
    t.push(LayerSpec::conv(55, 1, 3, 3, Activation::None));
    t
}

pub fn cbm_table() -> Vec<LayerSpec> {
    let mut t: Vec<LayerSpec> = (56..=59)
        .map(|i| LayerSpec::conv(i, 1, 32, 3, Activation::Relu))
        .collect();
    // single filter: the output is a per-pixel blending weight
    t.push(LayerSpec::conv(60, 1, 1, 3, Activation::Sigmoid));
    t
}

/// A table row resolved against concrete channel counts.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedLayer {
    pub spec: LayerSpec,
    pub in_channels: usize,
    pub out_channels: usize,
    /// log2 of the downsampling factor after this layer.
    pub level: i32,
    pub weight: Option<String>,
    pub bias: Option<String>,
}

impl ResolvedLayer {
    pub fn parameter_count(&self) -> usize {
        match (self.spec.kind, self.spec.kernel) {
            (LayerKind::Conv, Some((kh, kw))) => {
                kh * kw * self.in_channels * self.out_channels + self.out_channels
            }
            (LayerKind::DepthwiseConv, Some((kh, kw))) => {
                kh * kw * self.in_channels + self.in_channels
            }
            _ => 0,
        }
    }

    fn param_shapes(&self) -> Option<(Vec<usize>, Vec<usize>)> {
        let (kh, kw) = self.spec.kernel?;
        match self.spec.kind {
            LayerKind::Conv => Some((
                vec![self.out_channels, self.in_channels, kh, kw],
                vec![self.out_channels],
            )),
            LayerKind::DepthwiseConv => {
                Some((vec![self.in_channels, 1, kh, kw], vec![self.in_channels]))
            }
            _ => None,
        }
    }
}

/// Activations of the layers a component exposes, keyed by table index.
pub type Taps = BTreeMap<usize, Tensor<f32>>;

/// Channel count and downsampling level of an exposed activation.
pub type TapInfo = BTreeMap<usize, (usize, i32)>;

/// Saved activations of one training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Trace {
    pub input: Tensor<f32>,
    pub outputs: Vec<Tensor<f32>>,
}

impl Trace {
    pub fn output(&self) -> &Tensor<f32> {
        self.outputs.last().unwrap_or(&self.input)
    }

    /// Output of the table row `index`.
    pub fn tap(&self, layers: &[ResolvedLayer], index: usize) -> Option<&Tensor<f32>> {
        layers
            .iter()
            .position(|l| l.spec.index == index && !l.spec.inserted)
            .map(|i| &self.outputs[i])
    }
}

/// Gradients flowing out of a component's backward pass.
#[derive(Clone, Debug, Default)]
pub struct ComponentGrads {
    pub input: Option<Tensor<f32>>,
    /// Gradients for the skip activations consumed by concat layers.
    pub skips: Taps,
}

/// A differentiable sequence of layers whose parameters live in a [`ParamStore`]
/// under the prefix `name`.
#[derive(Clone, Debug, PartialEq)]
pub struct NetworkComponent {
    name: String,
    input_channels: usize,
    input_level: i32,
    layers: Vec<ResolvedLayer>,
}

impl NetworkComponent {
    fn from_table(
        name: &str,
        table: Vec<LayerSpec>,
        input_channels: usize,
        input_level: i32,
        skips: &TapInfo,
    ) -> Result<Self> {
        let mut layers = Vec::with_capacity(table.len());
        let (mut ch, mut level) = (input_channels, input_level);
        for spec in table {
            spec.validate()?;
            let in_ch = ch;
            match spec.kind {
                LayerKind::Conv => {
                    ch = spec.filters.unwrap();
                    level += spec.stride.trailing_zeros() as i32;
                }
                LayerKind::DepthwiseConv => level += spec.stride.trailing_zeros() as i32,
                LayerKind::Upsample => level -= 1,
                LayerKind::Concat => {
                    let target = spec.concat_target.unwrap();
                    let &(skip_ch, skip_level) = skips.get(&target).ok_or_else(|| {
                        Error::InvalidArgument(format!(
                            "layer {} concatenates unknown layer {target}",
                            spec.index
                        ))
                    })?;
                    if skip_level != level {
                        return Err(Error::shape(
                            "concat",
                            format!(
                                "1/{} resolution from layer {target}",
                                1u64 << skip_level.max(0)
                            ),
                            format!("1/{} at layer {}", 1u64 << level.max(0), spec.index),
                        ));
                    }
                    ch += skip_ch;
                }
            }
            if level < 0 {
                return Err(Error::InvalidArgument(format!(
                    "layer {} upsamples beyond input resolution",
                    spec.index
                )));
            }
            let has_params = matches!(spec.kind, LayerKind::Conv | LayerKind::DepthwiseConv);
            let key = format!("{name}.l{:02}", spec.index);
            layers.push(ResolvedLayer {
                spec,
                in_channels: in_ch,
                out_channels: ch,
                level,
                weight: has_params.then(|| format!("{key}.weight")),
                bias: has_params.then(|| format!("{key}.bias")),
            });
        }
        Ok(NetworkComponent {
            name: name.to_string(),
            input_channels,
            input_level,
            layers,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn input_channels(&self) -> usize {
        self.input_channels
    }

    pub fn output_channels(&self) -> usize {
        self.layers
            .last()
            .map_or(self.input_channels, |l| l.out_channels)
    }

    pub fn output_level(&self) -> i32 {
        self.layers.last().map_or(self.input_level, |l| l.level)
    }

    pub fn layers(&self) -> &[ResolvedLayer] {
        &self.layers
    }

    pub fn specs(&self) -> Vec<LayerSpec> {
        self.layers.iter().map(|l| l.spec).collect()
    }

    /// Channel count and level of each listed table row's output.
    pub fn tap_info(&self, indices: &[usize]) -> TapInfo {
        self.layers
            .iter()
            .filter(|l| indices.contains(&l.spec.index) && !l.spec.inserted)
            .map(|l| (l.spec.index, (l.out_channels, l.level)))
            .collect()
    }

    pub fn parameter_names(&self) -> impl Iterator<Item = &String> {
        self.layers
            .iter()
            .flat_map(|l| l.weight.iter().chain(l.bias.iter()))
    }

    pub fn owns(&self, param_name: &str) -> bool {
        param_name
            .strip_prefix(self.name.as_str())
            .is_some_and(|rest| rest.starts_with('.'))
    }

    /// Adds zero-initialized tensors for every parameter to `store`.
    pub fn register(&self, store: &mut ParamStore) {
        for l in &self.layers {
            if let (Some((ws, bs)), Some(w), Some(b)) = (l.param_shapes(), &l.weight, &l.bias) {
                store.insert(w.clone(), Param::zeros(ws));
                store.insert(b.clone(), Param::zeros(bs));
            }
        }
    }

    fn check_input(&self, input: &Tensor<f32>) -> Result<()> {
        if input.channels() != self.input_channels {
            return Err(Error::shape(
                "component input",
                format!("{} channels for {}", self.input_channels, self.name),
                input.shape(),
            ));
        }
        if self.input_level == 0 {
            let factor = 1usize << (self.layers.iter().map(|l| l.level).max().unwrap_or(0) as u32);
            if !input.height().is_multiple_of(factor) || !input.width().is_multiple_of(factor) {
                return Err(Error::NotDivisible {
                    height: input.height(),
                    width: input.width(),
                    factor,
                });
            }
        }
        Ok(())
    }

    fn apply_layer(
        &self,
        layer: &ResolvedLayer,
        params: &ParamStore,
        x: &Tensor<f32>,
        skips: &Taps,
    ) -> Result<Tensor<f32>> {
        let spec = &layer.spec;
        let mut out = match spec.kind {
            LayerKind::Conv => nn::conv2d(
                x,
                params.data(layer.weight.as_ref().unwrap()),
                params.data(layer.bias.as_ref().unwrap()),
                layer.out_channels,
                spec.kernel.unwrap(),
                spec.stride,
            ),
            LayerKind::DepthwiseConv => nn::depthwise_conv2d(
                x,
                params.data(layer.weight.as_ref().unwrap()),
                params.data(layer.bias.as_ref().unwrap()),
                spec.kernel.unwrap(),
                spec.stride,
            ),
            LayerKind::Upsample => nn::upsample2x(x),
            LayerKind::Concat => {
                let target = spec.concat_target.unwrap();
                let skip = skips.get(&target).ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "{}: skip activation of layer {target} not supplied",
                        self.name
                    ))
                })?;
                Tensor::concat_channels(&[x, skip])?
            }
        };
        spec.activation.apply(out.data_mut());
        Ok(out)
    }

    /// Inference forward pass. Returns the output and the requested taps.
    pub fn forward_with_taps(
        &self,
        params: &ParamStore,
        input: &Tensor<f32>,
        skips: &Taps,
        taps: &[usize],
    ) -> Result<(Tensor<f32>, Taps)> {
        self.check_input(input)?;
        let mut kept = Taps::new();
        let mut x = input.clone();
        for layer in &self.layers {
            x = self.apply_layer(layer, params, &x, skips)?;
            if taps.contains(&layer.spec.index) && !layer.spec.inserted {
                kept.insert(layer.spec.index, x.clone());
            }
        }
        Ok((x, kept))
    }

    pub fn forward(
        &self,
        params: &ParamStore,
        input: &Tensor<f32>,
        skips: &Taps,
    ) -> Result<Tensor<f32>> {
        Ok(self.forward_with_taps(params, input, skips, &[])?.0)
    }

    /// Forward pass that keeps every activation for [`NetworkComponent::backward`].
    pub fn forward_trace(
        &self,
        params: &ParamStore,
        input: &Tensor<f32>,
        skips: &Taps,
    ) -> Result<Trace> {
        self.check_input(input)?;
        let mut outputs: Vec<Tensor<f32>> = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let x = outputs.last().unwrap_or(input);
            let y = self.apply_layer(layer, params, x, skips)?;
            outputs.push(y);
        }
        Ok(Trace {
            input: input.clone(),
            outputs,
        })
    }

    /// Backpropagates `grad_out` through the traced pass.
    ///
    /// `injected` adds extra output gradients at exposed layers (the decoder's
    /// skip gradients). Parameter gradients are accumulated into `grads` when
    /// given; with `None` the component is treated as frozen.
    pub fn backward(
        &self,
        params: &ParamStore,
        trace: &Trace,
        grad_out: Tensor<f32>,
        injected: &Taps,
        mut grads: Option<&mut ParamStore>,
        want_input: bool,
    ) -> Result<ComponentGrads> {
        grad_out.expect_shape("component backward", trace.output().shape())?;
        let mut result = ComponentGrads::default();
        let mut g = grad_out;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let spec = &layer.spec;
            if !spec.inserted {
                if let Some(extra) = injected.get(&spec.index) {
                    g.add_assign(extra)?;
                }
            }
            spec.activation
                .backward(trace.outputs[i].data(), g.data_mut());
            let x = if i == 0 {
                &trace.input
            } else {
                &trace.outputs[i - 1]
            };
            let need_input = i > 0 || want_input;
            g = match spec.kind {
                LayerKind::Conv | LayerKind::DepthwiseConv => {
                    let (w_name, b_name) =
                        (layer.weight.as_ref().unwrap(), layer.bias.as_ref().unwrap());
                    let weight = params.data(w_name);
                    let (gw, gb) = match grads.as_deref_mut() {
                        Some(store) => {
                            // split borrow: take the two tensors out, then put them back
                            let gw = std::mem::take(
                                &mut store.get_mut(w_name).expect("grad tensor").data,
                            );
                            let gb = std::mem::take(
                                &mut store.get_mut(b_name).expect("grad tensor").data,
                            );
                            (Some(gw), Some(gb))
                        }
                        None => (None, None),
                    };
                    let (mut gw, mut gb) = (gw, gb);
                    let gin = if spec.kind == LayerKind::Conv {
                        nn::conv2d_backward(
                            x,
                            weight,
                            &g,
                            spec.kernel.unwrap(),
                            spec.stride,
                            gw.as_deref_mut(),
                            gb.as_deref_mut(),
                            need_input,
                        )
                    } else {
                        nn::depthwise_conv2d_backward(
                            x,
                            weight,
                            &g,
                            spec.kernel.unwrap(),
                            spec.stride,
                            gw.as_deref_mut(),
                            gb.as_deref_mut(),
                            need_input,
                        )
                    };
                    if let Some(store) = grads.as_deref_mut() {
                        store.get_mut(w_name).unwrap().data = gw.unwrap();
                        store.get_mut(b_name).unwrap().data = gb.unwrap();
                    }
                    match gin {
                        Some(t) => t,
                        None => break,
                    }
                }
                LayerKind::Upsample => nn::upsample2x_backward(&g),
                LayerKind::Concat => {
                    let own = x.channels();
                    let skip_ch = g.channels() - own;
                    result
                        .skips
                        .insert(spec.concat_target.unwrap(), g.slice_channels(own, skip_ch));
                    g.slice_channels(0, own)
                }
            };
            if i == 0 && want_input {
                result.input = Some(g.clone());
            }
        }
        Ok(result)
    }
}

/// Exact number of trainable scalars.
pub trait ParameterCount {
    fn parameter_count(&self) -> usize;
}

impl ParameterCount for NetworkComponent {
    fn parameter_count(&self) -> usize {
        self.layers.iter().map(ResolvedLayer::parameter_count).sum()
    }
}

impl ParameterCount for ModelGraph {
    /// Shared encoder tensors are stored, and therefore counted, once.
    fn parameter_count(&self) -> usize {
        self.params.scalar_count()
    }
}

pub fn count_parameters(component: &impl ParameterCount) -> usize {
    component.parameter_count()
}

pub fn build_feature_extractor(input_channels: usize) -> Result<NetworkComponent> {
    if input_channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "feature extractor expects 3 input channels, got {input_channels}"
        )));
    }
    NetworkComponent::from_table(
        "encoder",
        feature_extractor_table(),
        input_channels,
        0,
        &TapInfo::new(),
    )
}

fn build_decoder(name: &str, encoder: &NetworkComponent) -> Result<NetworkComponent> {
    let skips = encoder.tap_info(&SKIP_LAYERS);
    if skips.len() != SKIP_LAYERS.len() {
        return Err(Error::InvalidArgument(format!(
            "encoder does not expose all skip layers {SKIP_LAYERS:?}"
        )));
    }
    let dec = NetworkComponent::from_table(
        name,
        disparity_estimator_table(),
        encoder.output_channels(),
        encoder.output_level(),
        &skips,
    )?;
    if dec.output_level() != encoder.input_level {
        return Err(Error::InvalidArgument(format!(
            "disparity estimator ends at 1/{} resolution",
            1 << dec.output_level()
        )));
    }
    Ok(dec)
}

pub fn build_disparity_estimator(encoder: &NetworkComponent) -> Result<NetworkComponent> {
    build_decoder("decoder", encoder)
}

pub fn build_refiner() -> Result<NetworkComponent> {
    NetworkComponent::from_table("refiner", refiner_table(), 3, 0, &TapInfo::new())
}

pub fn build_cbm() -> Result<NetworkComponent> {
    NetworkComponent::from_table("cbm", cbm_table(), CBM_INPUT_CHANNELS, 0, &TapInfo::new())
}

/// Names of the graph's components, usable for freezing.
pub const COMPONENTS: [&str; 7] = [
    "encoder",
    "decoder_lr",
    "decoder_rl",
    "refiner_l",
    "refiner_r",
    "cbm_l",
    "cbm_r",
];

/// Components making up the disparity-based predictor.
pub const DBP_COMPONENTS: [&str; 3] = ["encoder", "decoder_lr", "decoder_rl"];

/// Two-branch network: one shared encoder, and per branch a decoder, a refiner and a merger.
///
/// The left-to-right branch (left input, right view out) uses `decoder_lr`,
/// `refiner_r` and `cbm_r`; the right-to-left branch uses `decoder_rl`,
/// `refiner_l` and `cbm_l`.
#[derive(Clone, Debug)]
pub struct ModelGraph {
    pub encoder: NetworkComponent,
    pub decoder_lr: NetworkComponent,
    pub decoder_rl: NetworkComponent,
    pub refiner_l: NetworkComponent,
    pub refiner_r: NetworkComponent,
    pub cbm_l: NetworkComponent,
    pub cbm_r: NetworkComponent,
    pub params: ParamStore,
}

/// Components used by one branch.
#[derive(Clone, Copy, Debug)]
pub struct BranchComponents<'a> {
    pub encoder: &'a NetworkComponent,
    pub decoder: &'a NetworkComponent,
    pub refiner: &'a NetworkComponent,
    pub cbm: &'a NetworkComponent,
}

impl ModelGraph {
    /// Graph with every parameter at zero.
    pub fn zeroed() -> Result<Self> {
        let encoder = build_feature_extractor(3)?;
        let graph = ModelGraph {
            decoder_lr: build_decoder("decoder_lr", &encoder)?,
            decoder_rl: build_decoder("decoder_rl", &encoder)?,
            refiner_l: NetworkComponent::from_table(
                "refiner_l",
                refiner_table(),
                3,
                0,
                &TapInfo::new(),
            )?,
            refiner_r: NetworkComponent::from_table(
                "refiner_r",
                refiner_table(),
                3,
                0,
                &TapInfo::new(),
            )?,
            cbm_l: NetworkComponent::from_table(
                "cbm_l",
                cbm_table(),
                CBM_INPUT_CHANNELS,
                0,
                &TapInfo::new(),
            )?,
            cbm_r: NetworkComponent::from_table(
                "cbm_r",
                cbm_table(),
                CBM_INPUT_CHANNELS,
                0,
                &TapInfo::new(),
            )?,
            encoder,
            params: ParamStore::new(),
        };
        let mut params = ParamStore::new();
        for c in graph.components() {
            c.register(&mut params);
        }
        Ok(ModelGraph { params, ..graph })
    }

    pub fn components(&self) -> [&NetworkComponent; 7] {
        [
            &self.encoder,
            &self.decoder_lr,
            &self.decoder_rl,
            &self.refiner_l,
            &self.refiner_r,
            &self.cbm_l,
            &self.cbm_r,
        ]
    }

    pub fn component(&self, name: &str) -> Result<&NetworkComponent> {
        self.components()
            .into_iter()
            .find(|c| c.name() == name)
            .ok_or_else(|| Error::UnknownComponent(name.to_string()))
    }

    pub fn branch(&self, direction: WarpDirection) -> BranchComponents<'_> {
        match direction {
            WarpDirection::LeftToRight => BranchComponents {
                encoder: &self.encoder,
                decoder: &self.decoder_lr,
                refiner: &self.refiner_r,
                cbm: &self.cbm_r,
            },
            WarpDirection::RightToLeft => BranchComponents {
                encoder: &self.encoder,
                decoder: &self.decoder_rl,
                refiner: &self.refiner_l,
                cbm: &self.cbm_l,
            },
        }
    }

    /// Parameter count of the encoder plus both decoders.
    pub fn dbp_parameter_count(&self) -> usize {
        DBP_COMPONENTS
            .iter()
            .map(|n| self.component(n).map(|c| c.parameter_count()).unwrap_or(0))
            .sum()
    }

    pub fn is_dbp_parameter(&self, name: &str) -> bool {
        DBP_COMPONENTS.iter().any(|c| {
            name.strip_prefix(c)
                .is_some_and(|rest| rest.starts_with('.'))
        })
    }
}

/// Builds the full graph with N(0, [`INIT_STD`]) weights and zero biases, optionally
/// overwriting the encoder with externally supplied weights.
pub fn build_model(seed: u64, encoder_weights: Option<&Path>) -> Result<ModelGraph> {
    let mut graph = ModelGraph::zeroed()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    graph.params.init_normal(INIT_STD, &mut rng);
    if let Some(dir) = encoder_weights {
        let file = ParamStore::load(dir)?;
        let encoder = graph.encoder.clone();
        graph.params.copy_from(&file, |n| encoder.owns(n))?;
    }
    Ok(graph)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    #[test]
    fn single_layer_counts() {
        let mut skips = TapInfo::new();
        skips.insert(0, (0, 0));
        let conv = NetworkComponent::from_table(
            "t",
            vec![LayerSpec::conv(1, 1, 32, 3, Activation::Relu)],
            3,
            0,
            &skips,
        )
        .unwrap();
        assert_eq!(count_parameters(&conv), 896);
        let dw = NetworkComponent::from_table(
            "t",
            vec![LayerSpec::depthwise(1, 1, Activation::Relu)],
            64,
            0,
            &skips,
        )
        .unwrap();
        assert_eq!(count_parameters(&dw), 640);
    }

    #[test]
    fn encoder_geometry() {
        let enc = build_feature_extractor(3).unwrap();
        assert_eq!(enc.layers().len(), 27);
        assert_eq!(enc.layers()[12].out_channels, 512);
        assert_eq!(enc.output_channels(), 1024);
        assert_eq!(enc.output_level(), 6);
        let strided: Vec<usize> = enc
            .layers()
            .iter()
            .filter(|l| l.spec.stride == 2)
            .map(|l| l.spec.index)
            .collect();
        assert_eq!(strided, vec![1, 4, 8, 12, 24, 26]);
        assert!(build_feature_extractor(4).is_err());
    }

    #[test]
    fn encoder_rejects_indivisible_input() {
        let g = ModelGraph::zeroed().unwrap();
        let x = Tensor::zeros(Shape::new(3, 96, 64));
        assert!(matches!(
            g.encoder.forward(&g.params, &x, &Taps::new()),
            Err(Error::NotDivisible { factor: 64, .. })
        ));
    }

    #[test]
    fn decoder_concat_mismatch_is_construction_error() {
        let enc = build_feature_extractor(3).unwrap();
        let mut skips = enc.tap_info(&SKIP_LAYERS);
        skips.insert(12, (256, 3));
        let r = NetworkComponent::from_table("d", disparity_estimator_table(), 1024, 6, &skips);
        assert!(r.is_err());
    }

    #[test]
    fn layer60_has_one_filter_and_sigmoid() {
        let cbm = build_cbm().unwrap();
        let last = cbm.layers().last().unwrap();
        assert_eq!(last.spec.index, 60);
        assert_eq!(last.out_channels, 1);
        assert_eq!(last.spec.activation, Activation::Sigmoid);
        assert_eq!(refiner_table().last().unwrap().activation, Activation::None);
    }

    #[test]
    fn component_ownership_is_prefix_exact() {
        let g = ModelGraph::zeroed().unwrap();
        assert!(g.refiner_l.owns("refiner_l.l48.weight"));
        assert!(!g.refiner_l.owns("refiner_lx.l48.weight"));
        assert!(g.is_dbp_parameter("decoder_rl.l47.bias"));
        assert!(!g.is_dbp_parameter("cbm_r.l60.bias"));
        assert!(g.component("nope").is_err());
    }
}
