//! Constructors for the coverage-prediction architectures.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::spec::{ModelSpec, Node, Op};
use crate::error::{NnError, Result};
use crate::ops::Activation;

/// Incremental graph assembly.
pub struct GraphBuilder {
    nodes: Vec<Node>,
    inception: bool,
}

impl GraphBuilder {
    pub fn new() -> Self {
        GraphBuilder {
            nodes: vec![Node {
                name: "input".into(),
                op: Op::Input,
                inception: false,
                label: None,
            }],
            inception: false,
        }
    }

    pub const INPUT: usize = 0;

    fn push(&mut self, name: String, op: Op) -> usize {
        let inception = self.inception && op.is_conv();
        self.nodes.push(Node {
            name,
            op,
            inception,
            label: None,
        });
        self.nodes.len() - 1
    }

    /// Subsequent convs are tagged as part of an inception structure.
    pub fn set_inception(&mut self, on: bool) {
        self.inception = on;
    }

    pub fn conv(&mut self, name: impl Into<String>, input: usize, out: usize, kernel: usize, stride: usize, act: Activation) -> usize {
        self.push(
            name.into(),
            Op::Conv {
                input,
                out_channels: out,
                kernel,
                stride,
                activation: act,
            },
        )
    }

    pub fn relu_conv(&mut self, name: impl Into<String>, input: usize, out: usize, kernel: usize) -> usize {
        self.conv(name, input, out, kernel, 1, Activation::Relu)
    }

    pub fn tconv(&mut self, name: impl Into<String>, input: usize, out: usize, kernel: usize, act: Activation) -> usize {
        self.push(
            name.into(),
            Op::TransposedConv {
                input,
                out_channels: out,
                kernel,
                stride: 2,
                activation: act,
            },
        )
    }

    pub fn maxpool(&mut self, name: impl Into<String>, input: usize) -> usize {
        self.push(name.into(), Op::MaxPool { input })
    }

    pub fn upsample(&mut self, name: impl Into<String>, input: usize) -> usize {
        self.push(name.into(), Op::Upsample { input })
    }

    pub fn concat(&mut self, name: impl Into<String>, inputs: Vec<usize>, skips: Vec<usize>) -> usize {
        self.push(name.into(), Op::Concat { inputs, skips })
    }

    pub fn label(&mut self, node: usize, label: impl Into<String>) {
        self.nodes[node].label = Some(label.into());
    }

    pub fn finish(self, meta: SpecMeta, output: usize) -> ModelSpec {
        ModelSpec {
            name: meta.name,
            input_channels: meta.input_channels,
            frame_size: meta.frame_size,
            base_width: meta.base_width,
            width_scale: meta.width_scale,
            kernel_sets: meta.kernel_sets,
            final_activation: Activation::Linear,
            flags: meta.flags,
            nodes: self.nodes,
            output,
        }
    }
}

impl Default for GraphBuilder {
    fn default() -> Self {
        Self::new()
    }
}

/// Descriptive fields of a [`ModelSpec`].
pub struct SpecMeta {
    pub name: String,
    pub input_channels: usize,
    pub frame_size: Option<usize>,
    pub base_width: usize,
    pub width_scale: f64,
    pub kernel_sets: Vec<Vec<usize>>,
    pub flags: BTreeMap<String, bool>,
}

fn scaled(width: usize, scale: f64) -> usize {
    ((width as f64 * scale).round() as usize).max(1)
}

fn check_scale(scale: f64) -> Result<()> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(NnError::InvalidArgument(format!("width_scale must be positive, got {scale}")));
    }
    Ok(())
}

/// Plain CNN: 23 ReLU convs of 32 filters and a linear `k x k` conv to one
/// channel, all same-padded.
pub fn baseline_cnn(kernel: usize, input_channels: usize, width_scale: f64) -> Result<ModelSpec> {
    check_scale(width_scale)?;
    if kernel % 2 == 0 {
        return Err(NnError::InvalidArgument(format!("cnn kernel must be odd, got {kernel}")));
    }
    let width = scaled(32, width_scale);
    let mut g = GraphBuilder::new();
    let mut x = GraphBuilder::INPUT;
    for i in 0..23 {
        x = g.relu_conv(format!("conv{}", i + 1), x, width, kernel);
    }
    let out = g.conv("conv24", x, 1, kernel, 1, Activation::Linear);
    Ok(g.finish(
        SpecMeta {
            name: format!("cnn-k{kernel}"),
            input_channels,
            frame_size: None,
            base_width: width,
            width_scale,
            kernel_sets: vec![vec![kernel]],
            flags: BTreeMap::new(),
        },
        out,
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Downsample {
    MaxPool,
    Strided,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UnetConfig {
    pub kernel: usize,
    pub depth: usize,
    pub base_width: usize,
    pub downsample: Downsample,
    pub input_channels: usize,
    pub width_scale: f64,
}

impl Default for UnetConfig {
    fn default() -> Self {
        UnetConfig {
            kernel: 3,
            depth: 4,
            base_width: 64,
            downsample: Downsample::MaxPool,
            input_channels: 2,
            width_scale: 1.0,
        }
    }
}

/// Encoder/decoder with two `k x k` convs per level, channel doubling,
/// 2x2 transposed up-convs and skip concatenation per level.
pub fn unet(cfg: &UnetConfig) -> Result<ModelSpec> {
    check_scale(cfg.width_scale)?;
    if cfg.depth == 0 || cfg.kernel == 0 {
        return Err(NnError::InvalidArgument("unet needs depth >= 1 and kernel >= 1".into()));
    }
    let base = scaled(cfg.base_width, cfg.width_scale);
    let k = cfg.kernel;
    let mut g = GraphBuilder::new();
    let mut x = GraphBuilder::INPUT;
    let mut skips = Vec::new();
    for level in 0..cfg.depth {
        let w = base << level;
        x = g.relu_conv(format!("enc{level}_conv1"), x, w, k);
        x = g.relu_conv(format!("enc{level}_conv2"), x, w, k);
        skips.push((x, w));
        x = match cfg.downsample {
            Downsample::MaxPool => g.maxpool(format!("enc{level}_pool"), x),
            Downsample::Strided => g.conv(format!("enc{level}_down"), x, w, k, 2, Activation::Relu),
        };
    }
    let wb = base << cfg.depth;
    x = g.relu_conv("bottleneck_conv1", x, wb, k);
    x = g.relu_conv("bottleneck_conv2", x, wb, k);
    for level in (0..cfg.depth).rev() {
        let (skip, w) = skips[level];
        let up = g.tconv(format!("dec{level}_up"), x, w, 2, Activation::Relu);
        x = g.concat(format!("dec{level}_cat"), vec![up, skip], vec![1]);
        x = g.relu_conv(format!("dec{level}_conv1"), x, w, k);
        x = g.relu_conv(format!("dec{level}_conv2"), x, w, k);
    }
    x = g.relu_conv("head_conv", x, 2, k);
    let out = g.conv("head_out", x, 1, 1, 1, Activation::Linear);
    let suffix = match cfg.downsample {
        Downsample::MaxPool => "",
        Downsample::Strided => "-strided",
    };
    Ok(g.finish(
        SpecMeta {
            name: format!("unet{suffix}-k{k}"),
            input_channels: cfg.input_channels,
            frame_size: None,
            base_width: base,
            width_scale: cfg.width_scale,
            kernel_sets: vec![vec![k]],
            flags: BTreeMap::new(),
        },
        out,
    ))
}

pub const UNET_SI_VARIANTS: [u32; 4] = [37, 65, 73, 91];

/// Per-variant layout of the UNET-SI family.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnetSiLayout {
    /// Stacked inception stages per encoder level.
    pub stages: [usize; 4],
    /// Levels with a 1x1 merge conv closing the inception structure.
    pub merges: [bool; 4],
    pub enc_convs: usize,
    pub down_convs: usize,
    pub bottleneck_convs: usize,
    pub dec_convs: usize,
}

impl UnetSiLayout {
    pub fn for_variant(variant: u32) -> Result<Self> {
        let l = match variant {
            37 => UnetSiLayout {
                stages: [1, 1, 1, 1],
                merges: [false, false, false, true],
                enc_convs: 1,
                down_convs: 1,
                bottleneck_convs: 2,
                dec_convs: 2,
            },
            65 => UnetSiLayout {
                stages: [1, 2, 2, 2],
                merges: [false, false, true, true],
                enc_convs: 3,
                down_convs: 1,
                bottleneck_convs: 4,
                dec_convs: 4,
            },
            73 => UnetSiLayout {
                stages: [1, 2, 2, 2],
                merges: [false, false, true, true],
                enc_convs: 4,
                down_convs: 2,
                bottleneck_convs: 4,
                dec_convs: 4,
            },
            91 => UnetSiLayout {
                stages: [1, 3, 3, 3],
                merges: [false, false, false, true],
                enc_convs: 5,
                down_convs: 1,
                bottleneck_convs: 6,
                dec_convs: 6,
            },
            other => return Err(NnError::UnknownVariant(format!("unet-si-{other}"))),
        };
        Ok(l)
    }
}

pub const UNET_SI_BASE_WIDTH: usize = 96;
pub const DEFAULT_KERNEL_SET: [usize; 3] = [1, 3, 5];

/// UNET with strided downsampling and inception blocks opening every
/// encoder level.
pub fn unet_si(variant: u32, kernel_set: &[usize], width_scale: f64, input_channels: usize) -> Result<ModelSpec> {
    check_scale(width_scale)?;
    let layout = UnetSiLayout::for_variant(variant)?;
    if kernel_set.is_empty() || kernel_set.iter().any(|&k| k % 2 == 0) {
        return Err(NnError::InvalidArgument(format!("inception kernels must be odd, got {kernel_set:?}")));
    }
    let base = scaled(UNET_SI_BASE_WIDTH, width_scale);
    let mut g = GraphBuilder::new();
    let mut x = GraphBuilder::INPUT;
    let mut skips = Vec::new();
    for level in 0..4 {
        let w = base << level;
        g.set_inception(true);
        for stage in 0..layout.stages[level] {
            let branches: Vec<usize> = kernel_set
                .iter()
                .map(|&k| g.relu_conv(format!("enc{level}_inc{stage}_k{k}"), x, w, k))
                .collect();
            x = g.concat(format!("enc{level}_inc{stage}_cat"), branches, vec![]);
        }
        if layout.merges[level] {
            x = g.relu_conv(format!("enc{level}_merge"), x, w, 1);
        }
        g.set_inception(false);
        for i in 0..layout.enc_convs {
            x = g.relu_conv(format!("enc{level}_conv{}", i + 1), x, w, 3);
        }
        skips.push((x, w));
        x = g.conv(format!("enc{level}_down"), x, w, 3, 2, Activation::Relu);
        for i in 1..layout.down_convs {
            x = g.relu_conv(format!("enc{level}_down{}", i + 1), x, w, 3);
        }
    }
    let wb = base << 4;
    for i in 0..layout.bottleneck_convs {
        x = g.relu_conv(format!("bottleneck_conv{}", i + 1), x, wb, 3);
    }
    for level in (0..4).rev() {
        let (skip, w) = skips[level];
        let up = g.tconv(format!("dec{level}_up"), x, w, 2, Activation::Relu);
        x = g.concat(format!("dec{level}_cat"), vec![up, skip], vec![1]);
        for i in 0..layout.dec_convs {
            x = g.relu_conv(format!("dec{level}_conv{}", i + 1), x, w, 3);
        }
    }
    x = g.relu_conv("head_conv", x, 2, 3);
    let out = g.conv("head_out", x, 1, 1, 1, Activation::Linear);
    Ok(g.finish(
        SpecMeta {
            name: format!("unet-si-{variant}"),
            input_channels,
            frame_size: None,
            base_width: base,
            width_scale,
            kernel_sets: vec![kernel_set.to_vec()],
            flags: BTreeMap::new(),
        },
        out,
    ))
}

pub const RADIOUNET_FRAME: usize = 256;

/// Expected output resolution of the labelled RadioUNET layers.
pub const RADIOUNET_RESOLUTIONS: [usize; 18] = [
    256, 256, 128, 64, 64, 32, 32, 16, 8, 16, 32, 32, 64, 64, 128, 256, 256, 256,
];

/// Expected channel widths of the labelled RadioUNET layers.
pub const RADIOUNET_CHANNELS: [usize; 18] = [2, 6, 40, 60, 80, 100, 120, 200, 400, 400, 240, 200, 160, 120, 80, 29, 32, 1];

/// Two cascaded U-nets on 256x256 frames. The first follows the layer
/// table (densely concatenated encoder columns, skip-concatenated decoder
/// columns); the second refines `input ++ first output`.
pub fn radiounet(input_channels: usize) -> Result<ModelSpec> {
    if input_channels != 2 {
        return Err(NnError::InvalidArgument(format!("radiounet takes 2 input channels, got {input_channels}")));
    }
    let mut g = GraphBuilder::new();
    let inp = GraphBuilder::INPUT;
    g.label(inp, "In");

    // Encoder: column = (pooled) previous column ++ new conv channels.
    let grow = |g: &mut GraphBuilder, name: &str, prev: usize, pool: bool, new: usize, k: usize| {
        let src = if pool { g.maxpool(format!("{name}_pool"), prev) } else { prev };
        let c = g.relu_conv(format!("{name}_conv"), src, new, k);
        let col = g.concat(name, vec![src, c], vec![]);
        g.label(col, name);
        col
    };
    let l1 = grow(&mut g, "L1", inp, false, 4, 3);
    let l2 = grow(&mut g, "L2", l1, true, 34, 5);
    let l3 = grow(&mut g, "L3", l2, true, 20, 5);
    let l4 = grow(&mut g, "L4", l3, false, 20, 5);
    let l5 = grow(&mut g, "L5", l4, true, 20, 5);
    let l6 = grow(&mut g, "L6", l5, false, 20, 3);
    let l7 = grow(&mut g, "L7", l6, true, 80, 5);
    let l8 = grow(&mut g, "L8", l7, true, 200, 5);
    let l9 = g.upsample("L9", l8);
    g.label(l9, "L9");

    // Decoder: column = up path ++ skip.
    let up = |g: &mut GraphBuilder, name: &str, prev: usize, out: usize, k: usize, tconv: bool, skip: usize| {
        let u = if tconv {
            g.tconv(format!("{name}_up"), prev, out, k, Activation::Relu)
        } else {
            g.relu_conv(format!("{name}_conv"), prev, out, k)
        };
        let col = g.concat(name, vec![u, skip], vec![1]);
        g.label(col, name);
        col
    };
    let l10 = up(&mut g, "L10", l9, 120, 4, true, l6);
    let l11 = up(&mut g, "L11", l10, 100, 3, false, l5);
    let l12 = up(&mut g, "L12", l11, 80, 6, true, l4);
    let l13 = up(&mut g, "L13", l12, 60, 5, false, l3);
    let l14 = up(&mut g, "L14", l13, 40, 6, true, l2);
    let l15 = up(&mut g, "L15", l14, 23, 6, true, l1);
    let l16 = up(&mut g, "L16", l15, 30, 5, false, inp);
    let first = g.conv("first_out", l16, 1, 2, 1, Activation::Linear);

    // Refinement U.
    let mut x = g.concat("refine_in", vec![inp, first], vec![]);
    let mut skips = Vec::new();
    for (level, w) in [16usize, 32, 64].into_iter().enumerate() {
        if level > 0 {
            x = g.maxpool(format!("refine_enc{level}_pool"), x);
        }
        for i in 0..3 {
            x = g.relu_conv(format!("refine_enc{level}_conv{}", i + 1), x, w, 3);
        }
        skips.push((x, w));
    }
    x = g.maxpool("refine_bottleneck_pool", x);
    for i in 0..3 {
        x = g.relu_conv(format!("refine_bottleneck_conv{}", i + 1), x, 128, 3);
    }
    for level in (0..3).rev() {
        let (skip, w) = skips[level];
        let u = g.tconv(format!("refine_dec{level}_up"), x, w, 2, Activation::Relu);
        x = g.concat(format!("refine_dec{level}_cat"), vec![u, skip], vec![1]);
        for i in 0..3 {
            x = g.relu_conv(format!("refine_dec{level}_conv{}", i + 1), x, w, 3);
        }
    }
    let out = g.conv("out", x, 1, 1, 1, Activation::Linear);
    g.label(out, "Out");
    let mut flags = BTreeMap::new();
    flags.insert("bottom_upsample".to_string(), true);
    flags.insert("refinement".to_string(), true);
    Ok(g.finish(
        SpecMeta {
            name: "radiounet".into(),
            input_channels,
            frame_size: Some(RADIOUNET_FRAME),
            base_width: 6,
            width_scale: 1.0,
            kernel_sets: vec![vec![3, 5, 5, 5, 5, 3, 5, 5, 4, 4, 3, 6, 5, 6, 6, 5, 2]],
            flags,
        },
        out,
    ))
}

/// Builds an architecture by name: `cnn`, `unet`, `unet-strided`,
/// `unet-si-{37,65,73,91}` or `radiounet`.
pub fn by_name(name: &str, kernel: usize, width_scale: f64, input_channels: usize) -> Result<ModelSpec> {
    match name {
        "cnn" => baseline_cnn(kernel, input_channels, width_scale),
        "unet" | "unet-strided" => unet(&UnetConfig {
            kernel,
            downsample: if name == "unet" { Downsample::MaxPool } else { Downsample::Strided },
            input_channels,
            width_scale,
            ..UnetConfig::default()
        }),
        "radiounet" => radiounet(input_channels),
        other => match other.strip_prefix("unet-si-").and_then(|v| v.parse::<u32>().ok()) {
            Some(v) => unet_si(v, &DEFAULT_KERNEL_SET, width_scale, input_channels),
            None => Err(NnError::UnknownVariant(other.to_string())),
        },
    }
}
