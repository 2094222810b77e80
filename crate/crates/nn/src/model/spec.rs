use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{NnError, Result};
use crate::ops::Activation;

/// One node of a model graph. Inputs always refer to earlier nodes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Op {
    Input,
    /// Same-padded convolution with a fused activation.
    Conv {
        input: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
    /// Transposed convolution; the output is `stride` times larger.
    TransposedConv {
        input: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        activation: Activation,
    },
    MaxPool {
        input: usize,
    },
    /// Nearest-neighbour 2x upsampling.
    Upsample {
        input: usize,
    },
    /// Channel concatenation. `skips` lists positions in `inputs` that are
    /// encoder-to-decoder skip connections.
    Concat {
        inputs: Vec<usize>,
        #[serde(default)]
        skips: Vec<usize>,
    },
    /// A zero tensor shaped like another node (stands in for a removed skip).
    Zeros {
        like: usize,
    },
}

impl Op {
    pub fn inputs(&self) -> Vec<usize> {
        match self {
            Op::Input => vec![],
            Op::Conv { input, .. }
            | Op::TransposedConv { input, .. }
            | Op::MaxPool { input }
            | Op::Upsample { input } => vec![*input],
            Op::Concat { inputs, .. } => inputs.clone(),
            Op::Zeros { like } => vec![*like],
        }
    }

    pub fn is_conv(&self) -> bool {
        matches!(self, Op::Conv { .. } | Op::TransposedConv { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Node {
    pub name: String,
    #[serde(flatten)]
    pub op: Op,
    /// Conv belongs to an inception structure.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub inception: bool,
    /// Marks a layer reported in the resolution trace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub name: String,
    pub input_channels: usize,
    /// Required input size, when the architecture is tied to one.
    #[serde(default)]
    pub frame_size: Option<usize>,
    pub base_width: usize,
    pub width_scale: f64,
    #[serde(default)]
    pub kernel_sets: Vec<Vec<usize>>,
    /// Applied to the output node.
    pub final_activation: Activation,
    #[serde(default)]
    pub flags: BTreeMap<String, bool>,
    pub nodes: Vec<Node>,
    pub output: usize,
}

/// Shape of a single sample at a node: channels, height, width.
pub type NodeShape = [usize; 3];

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(NnError::InvalidArgument(format!("model `{}`: {m}", self.name)));
        if self.nodes.is_empty() || self.nodes[0].op != Op::Input {
            return bad("node 0 must be the input".into());
        }
        if self.input_channels == 0 {
            return bad("zero input channels".into());
        }
        if self.output >= self.nodes.len() {
            return bad(format!("output node {} out of range", self.output));
        }
        for (i, n) in self.nodes.iter().enumerate() {
            if i > 0 && n.op == Op::Input {
                return bad(format!("node {i} is a second input"));
            }
            if n.op.inputs().iter().any(|&j| j >= i) {
                return bad(format!("node {i} (`{}`) references a later node", n.name));
            }
            match &n.op {
                Op::Conv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                }
                | Op::TransposedConv {
                    out_channels,
                    kernel,
                    stride,
                    ..
                } => {
                    if *out_channels == 0 || *kernel == 0 || *stride == 0 {
                        return bad(format!("node {i} (`{}`) has a zero dimension", n.name));
                    }
                }
                Op::Concat { inputs, skips } => {
                    if inputs.is_empty() || skips.iter().any(|&s| s >= inputs.len()) {
                        return bad(format!("node {i} (`{}`) has malformed concat inputs", n.name));
                    }
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Output channels of every node.
    pub fn channels(&self) -> Vec<usize> {
        let mut ch = Vec::with_capacity(self.nodes.len());
        for n in &self.nodes {
            let c = match &n.op {
                Op::Input => self.input_channels,
                Op::Conv { out_channels, .. } | Op::TransposedConv { out_channels, .. } => *out_channels,
                Op::MaxPool { input } | Op::Upsample { input } => ch[*input],
                Op::Concat { inputs, .. } => inputs.iter().map(|&j| ch[j]).sum(),
                Op::Zeros { like } => ch[*like],
            };
            ch.push(c);
        }
        ch
    }

    /// Per-node weight and bias shapes, `None` for parameter-free nodes.
    pub fn param_shapes(&self) -> Vec<Option<(Vec<usize>, Vec<usize>)>> {
        let ch = self.channels();
        self.nodes
            .iter()
            .map(|n| match &n.op {
                Op::Conv {
                    input,
                    out_channels,
                    kernel,
                    ..
                } => Some((vec![*out_channels, ch[*input], *kernel, *kernel], vec![*out_channels])),
                Op::TransposedConv {
                    input,
                    out_channels,
                    kernel,
                    ..
                } => Some((vec![ch[*input], *out_channels, *kernel, *kernel], vec![*out_channels])),
                _ => None,
            })
            .collect()
    }

    /// Flat parameter shapes in declaration order: weight, bias per conv.
    pub fn flat_param_shapes(&self) -> Vec<Vec<usize>> {
        self.param_shapes()
            .into_iter()
            .flatten()
            .flat_map(|(w, b)| [w, b])
            .collect()
    }

    pub fn count_params(&self) -> usize {
        self.flat_param_shapes()
            .iter()
            .map(|s| s.iter().product::<usize>())
            .sum()
    }

    /// `(total, in_inception)` counts of conv and transposed-conv layers.
    pub fn count_conv_layers(&self) -> (usize, usize) {
        let convs = self.nodes.iter().filter(|n| n.op.is_conv());
        let total = convs.clone().count();
        let inception = convs.filter(|n| n.inception).count();
        (total, inception)
    }

    pub fn count_maxpool_layers(&self) -> usize {
        self.nodes.iter().filter(|n| matches!(n.op, Op::MaxPool { .. })).count()
    }

    /// Spatial size must be divisible by this.
    pub fn required_divisor(&self) -> usize {
        let mut level = vec![0i32; self.nodes.len()];
        for (i, n) in self.nodes.iter().enumerate() {
            level[i] = match &n.op {
                Op::Input => 0,
                Op::Conv { input, stride, .. } => level[*input] + (*stride as f64).log2().round() as i32,
                Op::TransposedConv { input, stride, .. } => level[*input] - (*stride as f64).log2().round() as i32,
                Op::MaxPool { input } => level[*input] + 1,
                Op::Upsample { input } => level[*input] - 1,
                Op::Concat { inputs, .. } => inputs.iter().map(|&j| level[j]).max().unwrap_or(0),
                Op::Zeros { like } => level[*like],
            };
        }
        1usize << level.iter().copied().max().unwrap_or(0).max(0)
    }

    /// Checks that an `h x w` input with `channels` channels is acceptable.
    pub fn check_input(&self, channels: usize, h: usize, w: usize) -> Result<()> {
        if channels != self.input_channels {
            return Err(NnError::shape(
                "model input",
                format!("{} channels", self.input_channels),
                format!("{channels} channels"),
            ));
        }
        if let Some(s) = self.frame_size {
            if h != s || w != s {
                return Err(NnError::shape("model input", format!("{s}x{s} frame"), format!("{h}x{w}")));
            }
        }
        let d = self.required_divisor();
        if h == 0 || w == 0 || h % d != 0 || w % d != 0 {
            return Err(NnError::shape(
                "model input",
                format!("spatial dims divisible by {d} for `{}`", self.name),
                format!("{h}x{w}"),
            ));
        }
        Ok(())
    }

    /// Per-node `[C, H, W]` for an `h x w` input.
    pub fn infer_shapes(&self, h: usize, w: usize) -> Result<Vec<NodeShape>> {
        self.validate()?;
        self.check_input(self.input_channels, h, w)?;
        let ch = self.channels();
        let mut out: Vec<NodeShape> = Vec::with_capacity(self.nodes.len());
        for (i, n) in self.nodes.iter().enumerate() {
            let s = match &n.op {
                Op::Input => [ch[i], h, w],
                Op::Conv { input, stride, .. } => {
                    let [_, ih, iw] = out[*input];
                    if ih % stride != 0 || iw % stride != 0 {
                        return Err(NnError::shape(n.name_static(), format!("dims divisible by {stride}"), format!("{ih}x{iw}")));
                    }
                    [ch[i], ih / stride, iw / stride]
                }
                Op::TransposedConv { input, stride, .. } => {
                    let [_, ih, iw] = out[*input];
                    [ch[i], ih * stride, iw * stride]
                }
                Op::MaxPool { input } => {
                    let [c, ih, iw] = out[*input];
                    if ih % 2 != 0 || iw % 2 != 0 {
                        return Err(NnError::shape("maxpool", "even dims", format!("{ih}x{iw}")));
                    }
                    [c, ih / 2, iw / 2]
                }
                Op::Upsample { input } => {
                    let [c, ih, iw] = out[*input];
                    [c, ih * 2, iw * 2]
                }
                Op::Concat { inputs, .. } => {
                    let [_, ih, iw] = out[inputs[0]];
                    for &j in inputs {
                        if out[j][1] != ih || out[j][2] != iw {
                            return Err(NnError::shape(
                                "concat",
                                format!("{ih}x{iw} at `{}`", n.name),
                                format!("{}x{} from `{}`", out[j][1], out[j][2], self.nodes[j].name),
                            ));
                        }
                    }
                    [ch[i], ih, iw]
                }
                Op::Zeros { like } => out[*like],
            };
            out.push(s);
        }
        Ok(out)
    }

    /// Output spatial size of labelled layers, in node order.
    pub fn resolution_trace(&self, h: usize, w: usize) -> Result<Vec<(String, usize)>> {
        let shapes = self.infer_shapes(h, w)?;
        Ok(self
            .nodes
            .iter()
            .zip(&shapes)
            .filter_map(|(n, s)| n.label.clone().map(|l| (l, s[1])))
            .collect())
    }

    /// Skip edges as `(concat node, input position)`, in node order.
    pub fn skip_edges(&self) -> Vec<(usize, usize)> {
        let mut v = Vec::new();
        for (i, n) in self.nodes.iter().enumerate() {
            if let Op::Concat { skips, .. } = &n.op {
                v.extend(skips.iter().map(|&s| (i, s)));
            }
        }
        v
    }

    /// Copy of the spec with the `k`-th skip edge replaced by zeros.
    pub fn without_skip(&self, k: usize) -> Result<ModelSpec> {
        let edges = self.skip_edges();
        let &(node, pos) = edges
            .get(k)
            .ok_or_else(|| NnError::InvalidArgument(format!("model has {} skip edges, asked for {k}", edges.len())))?;
        let mut spec = self.clone();
        let Op::Concat { inputs, skips } = spec.nodes[node].op.clone() else {
            unreachable!()
        };
        // The zero node must precede its consumer; rebuild indices around the insertion.
        let zero = Node {
            name: format!("{}_ablated_skip", self.nodes[node].name),
            op: Op::Zeros { like: inputs[pos] },
            inception: false,
            label: None,
        };
        spec.nodes.insert(node, zero);
        let shift = |j: usize| if j >= node { j + 1 } else { j };
        for n in spec.nodes.iter_mut().skip(node + 1) {
            match &mut n.op {
                Op::Conv { input, .. }
                | Op::TransposedConv { input, .. }
                | Op::MaxPool { input }
                | Op::Upsample { input } => *input = shift(*input),
                Op::Concat { inputs, .. } => inputs.iter_mut().for_each(|j| *j = shift(*j)),
                Op::Zeros { like } => *like = shift(*like),
                Op::Input => {}
            }
        }
        let mut new_inputs: Vec<usize> = inputs.iter().map(|&j| shift(j)).collect();
        new_inputs[pos] = node;
        spec.nodes[node + 1].op = Op::Concat {
            inputs: new_inputs,
            skips: skips.into_iter().filter(|&s| s != pos).collect(),
        };
        spec.output = shift(spec.output);
        Ok(spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("model spec serializes")
    }

    pub fn from_json(text: &str) -> Result<ModelSpec> {
        let spec: ModelSpec = serde_json::from_str(text)?;
        spec.validate()?;
        Ok(spec)
    }

    /// SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

impl Node {
    fn name_static(&self) -> &'static str {
        match self.op {
            Op::Conv { .. } => "conv",
            Op::TransposedConv { .. } => "transposed_conv",
            _ => "layer",
        }
    }
}
