//! Layer graphs for UNet and its depthwise-separable variant, with parameter
//! and multiply-accumulate accounting.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub const TARGET_UNET_PARAMS: f64 = 31.04e6;
pub const TARGET_DSUNET_PARAMS: f64 = 6.01e6;
pub const TARGET_UNET_MACS: f64 = 62.51e9;
pub const TARGET_DSUNET_MACS: f64 = 9.56e9;
pub const TARGET_PARAM_RATIO: f64 = 5.16;
pub const TARGET_MAC_RATIO: f64 = 6.54;
pub const PARAM_TOLERANCE: f64 = 0.02;
pub const MAC_TOLERANCE: f64 = 0.05;

/// Input size (width, height) at which both MAC totals land within
/// tolerance; found by [`sweep_resolutions`] over square sizes.
pub const DOCUMENTED_RESOLUTION: (usize, usize) = (288, 288);

/// Pooling levels; inputs must be divisible by `2^POOL_LEVELS`.
pub const POOL_LEVELS: u32 = 4;
const ENCODER: [usize; 4] = [64, 128, 256, 512];
const BOTTLENECK: usize = 1024;
pub const DROPOUT_RATE: f64 = 0.5;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ArchError {
    #[error("inconsistent graph at layer {index} ({name}): {reason}")]
    InconsistentGraph {
        index: usize,
        name: String,
        reason: String,
    },
    #[error("input {0}x{1} is not divisible by 16")]
    IndivisibleResolution(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "type")]
pub enum LayerKind {
    /// Stride-1 convolution with spatial size preserved by padding.
    Conv {
        k: usize,
        cin: usize,
        cout: usize,
    },
    Depthwise {
        k: usize,
        ch: usize,
    },
    Pointwise {
        cin: usize,
        cout: usize,
    },
    /// 2×2, stride-2 transposed convolution.
    UpConv {
        cin: usize,
        cout: usize,
    },
    MaxPool,
    BatchNorm {
        ch: usize,
    },
    Dropout {
        rate: f64,
    },
    /// Channel concatenation with the output of an earlier layer.
    Concat {
        from: usize,
    },
}

impl LayerKind {
    pub fn is_conv(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv { .. }
                | LayerKind::Depthwise { .. }
                | LayerKind::Pointwise { .. }
                | LayerKind::UpConv { .. }
        )
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv { .. } => "conv",
            LayerKind::Depthwise { .. } => "depthwise",
            LayerKind::Pointwise { .. } => "pointwise",
            LayerKind::UpConv { .. } => "upconv",
            LayerKind::MaxPool => "maxpool",
            LayerKind::BatchNorm { .. } => "batchnorm",
            LayerKind::Dropout { .. } => "dropout",
            LayerKind::Concat { .. } => "concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetGraph {
    pub name: String,
    pub in_ch: usize,
    pub out_ch: usize,
    pub layers: Vec<Layer>,
}

/// Channels and pooling depth after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Shape {
    ch: usize,
    level: i32,
}

impl NetGraph {
    pub fn count_kind(&self, tag: &str) -> usize {
        self.layers.iter().filter(|l| l.kind.tag() == tag).count()
    }

    pub fn conv_layer_count(&self) -> usize {
        self.layers.iter().filter(|l| l.kind.is_conv()).count()
    }

    /// 3×3 standard convolutions.
    pub fn standard_3x3_count(&self) -> usize {
        self.layers
            .iter()
            .filter(|l| matches!(l.kind, LayerKind::Conv { k: 3, .. }))
            .count()
    }

    fn shapes(&self) -> Result<Vec<Shape>, ArchError> {
        let mut out: Vec<Shape> = Vec::with_capacity(self.layers.len());
        let mut cur = Shape {
            ch: self.in_ch,
            level: 0,
        };
        for (index, l) in self.layers.iter().enumerate() {
            let fail = |reason: String| ArchError::InconsistentGraph {
                index,
                name: l.name.clone(),
                reason,
            };
            let expect = |c: usize| {
                if c == cur.ch {
                    Ok(())
                } else {
                    Err(fail(format!("expects {c} input channels, got {}", cur.ch)))
                }
            };
            cur = match l.kind {
                LayerKind::Conv { cin, cout, k } => {
                    expect(cin)?;
                    if k == 0 {
                        return Err(fail("kernel size 0".into()));
                    }
                    Shape { ch: cout, ..cur }
                }
                LayerKind::Depthwise { ch, .. } | LayerKind::BatchNorm { ch } => {
                    expect(ch)?;
                    cur
                }
                LayerKind::Pointwise { cin, cout } => {
                    expect(cin)?;
                    Shape { ch: cout, ..cur }
                }
                LayerKind::UpConv { cin, cout } => {
                    expect(cin)?;
                    if cur.level == 0 {
                        return Err(fail("upsampling above input resolution".into()));
                    }
                    Shape {
                        ch: cout,
                        level: cur.level - 1,
                    }
                }
                LayerKind::MaxPool => Shape {
                    level: cur.level + 1,
                    ..cur
                },
                LayerKind::Dropout { rate } => {
                    if !(0.0..1.0).contains(&rate) {
                        return Err(fail("dropout rate outside [0, 1)".into()));
                    }
                    cur
                }
                LayerKind::Concat { from } => {
                    let src = out.get(from).copied().ok_or_else(|| {
                        fail(format!("skip source {from} is not an earlier layer"))
                    })?;
                    if src.level != cur.level {
                        return Err(fail("skip source has a different resolution".into()));
                    }
                    Shape {
                        ch: cur.ch + src.ch,
                        ..cur
                    }
                }
            };
            out.push(cur);
        }
        let last = out.last().copied().unwrap_or(Shape {
            ch: self.in_ch,
            level: 0,
        });
        if last.ch != self.out_ch || last.level != 0 {
            return Err(ArchError::InconsistentGraph {
                index: self.layers.len().saturating_sub(1),
                name: "output".into(),
                reason: format!(
                    "ends with {} channels at depth {}, expected {} at depth 0",
                    last.ch, last.level, self.out_ch
                ),
            });
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<(), ArchError> {
        self.shapes().map(|_| ())
    }
}

struct Builder {
    layers: Vec<Layer>,
    ch: usize,
    separable: bool,
    convs_3x3: usize,
}

impl Builder {
    fn push(&mut self, name: String, kind: LayerKind, bias: bool) {
        self.layers.push(Layer { name, kind, bias });
    }

    /// 3×3 conv (or its separable factorization after the first one), then
    /// batchnorm.
    fn conv_bn(&mut self, name: &str, cout: usize) {
        let cin = self.ch;
        if self.separable && self.convs_3x3 > 0 {
            self.push(
                format!("{name}.dw"),
                LayerKind::Depthwise { k: 3, ch: cin },
                true,
            );
            self.push(
                format!("{name}.pw"),
                LayerKind::Pointwise { cin, cout },
                true,
            );
        } else {
            self.push(
                format!("{name}.conv"),
                LayerKind::Conv { k: 3, cin, cout },
                true,
            );
        }
        self.push(
            format!("{name}.bn"),
            LayerKind::BatchNorm { ch: cout },
            false,
        );
        self.convs_3x3 += 1;
        self.ch = cout;
    }

    fn dropout(&mut self, name: &str) {
        if self.separable {
            self.push(
                format!("{name}.drop"),
                LayerKind::Dropout { rate: DROPOUT_RATE },
                false,
            );
        }
    }
}

fn build(name: &str, in_ch: usize, out_ch: usize, separable: bool) -> NetGraph {
    let mut b = Builder {
        layers: Vec::new(),
        ch: in_ch,
        separable,
        convs_3x3: 0,
    };
    let mut skips = Vec::new();
    for (i, &ch) in ENCODER.iter().enumerate() {
        let lvl = format!("enc{}", i + 1);
        b.conv_bn(&format!("{lvl}.1"), ch);
        b.conv_bn(&format!("{lvl}.2"), ch);
        if i + 1 == ENCODER.len() {
            b.dropout(&lvl);
        }
        skips.push(b.layers.len() - 1);
        b.push(format!("{lvl}.pool"), LayerKind::MaxPool, false);
    }
    b.conv_bn("mid.1", BOTTLENECK);
    b.conv_bn("mid.2", BOTTLENECK);
    b.dropout("mid");
    for (i, &ch) in ENCODER.iter().enumerate().rev() {
        let lvl = format!("dec{}", i + 1);
        let cin = b.ch;
        b.push(
            format!("{lvl}.up"),
            LayerKind::UpConv { cin, cout: ch },
            true,
        );
        b.push(
            format!("{lvl}.cat"),
            LayerKind::Concat { from: skips[i] },
            false,
        );
        b.ch = 2 * ch;
        b.conv_bn(&format!("{lvl}.1"), ch);
        b.conv_bn(&format!("{lvl}.2"), ch);
        if i + 1 == ENCODER.len() {
            b.dropout(&lvl);
        }
    }
    let cin = b.ch;
    b.push(
        "head.conv".into(),
        LayerKind::Conv {
            k: 1,
            cin,
            cout: out_ch,
        },
        true,
    );
    NetGraph {
        name: name.into(),
        in_ch,
        out_ch,
        layers: b.layers,
    }
}

/// Classic UNet with batchnorm after every 3×3 conv, 1 input and 2 output
/// channels.
pub fn unet_graph() -> NetGraph {
    unet_graph_io(1, 2)
}

pub fn unet_graph_io(in_ch: usize, out_ch: usize) -> NetGraph {
    build("UNet", in_ch, out_ch, false)
}

/// UNet with all 3×3 convs but the first factorized into depthwise and
/// pointwise pairs, and dropout at the three deepest levels; 3 input and 1
/// output channel.
pub fn dsunet_graph() -> NetGraph {
    dsunet_graph_io(3, 1)
}

pub fn dsunet_graph_io(in_ch: usize, out_ch: usize) -> NetGraph {
    build("DSUNet", in_ch, out_ch, true)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerCost {
    pub name: String,
    pub kind: String,
    pub out_ch: usize,
    /// Output spatial size (width, height) when a resolution was given.
    pub out_hw: Option<(usize, usize)>,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub graph: String,
    pub input_hw: Option<(usize, usize)>,
    pub params: u64,
    pub macs: u64,
    pub layers: Vec<LayerCost>,
}

/// Learnable parameters of one layer.
pub fn layer_params(l: &Layer) -> u64 {
    let bias = |c: usize| if l.bias { c as u64 } else { 0 };
    match l.kind {
        LayerKind::Conv { k, cin, cout } => (k * k * cin * cout) as u64 + bias(cout),
        LayerKind::Depthwise { k, ch } => (k * k * ch) as u64 + bias(ch),
        LayerKind::Pointwise { cin, cout } => (cin * cout) as u64 + bias(cout),
        LayerKind::UpConv { cin, cout } => (4 * cin * cout) as u64 + bias(cout),
        LayerKind::BatchNorm { ch } => 2 * ch as u64,
        LayerKind::MaxPool | LayerKind::Dropout { .. } | LayerKind::Concat { .. } => 0,
    }
}

/// Multiply-accumulates per output position. For the transposed conv each
/// output position receives one tap per input channel.
fn macs_per_position(kind: &LayerKind) -> u64 {
    match *kind {
        LayerKind::Conv { k, cin, cout } => (k * k * cin * cout) as u64,
        LayerKind::Depthwise { k, ch } => (k * k * ch) as u64,
        LayerKind::Pointwise { cin, cout } | LayerKind::UpConv { cin, cout } => (cin * cout) as u64,
        _ => 0,
    }
}

fn analyze(g: &NetGraph, input_hw: Option<(usize, usize)>) -> Result<CostReport, ArchError> {
    let div = 1usize << POOL_LEVELS;
    if let Some((w, h)) = input_hw {
        if w == 0 || h == 0 || w % div != 0 || h % div != 0 {
            return Err(ArchError::IndivisibleResolution(w, h));
        }
    }
    let shapes = g.shapes()?;
    let layers: Vec<LayerCost> = g
        .layers
        .iter()
        .zip(&shapes)
        .map(|(l, s)| {
            let out_hw = input_hw.map(|(w, h)| (w >> s.level, h >> s.level));
            let positions = out_hw.map_or(0, |(w, h)| (w * h) as u64);
            LayerCost {
                name: l.name.clone(),
                kind: l.kind.tag().into(),
                out_ch: s.ch,
                out_hw,
                params: layer_params(l),
                macs: macs_per_position(&l.kind) * positions,
            }
        })
        .collect();
    Ok(CostReport {
        graph: g.name.clone(),
        input_hw,
        params: layers.iter().map(|c| c.params).sum(),
        macs: layers.iter().map(|c| c.macs).sum(),
        layers,
    })
}

pub fn count_params(g: &NetGraph) -> Result<CostReport, ArchError> {
    analyze(g, None)
}

/// Costs at input size `(width, height)`; both must be divisible by 16.
pub fn count_macs(g: &NetGraph, input_hw: (usize, usize)) -> Result<CostReport, ArchError> {
    analyze(g, Some(input_hw))
}

pub fn write_breakdown_csv<W: Write>(report: &CostReport, w: W) -> Result<(), csv::Error> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record([
        "graph", "layer", "kind", "out_ch", "out_w", "out_h", "params", "macs",
    ])?;
    for l in &report.layers {
        let (ow, oh) = l.out_hw.map_or((String::new(), String::new()), |(w, h)| {
            (w.to_string(), h.to_string())
        });
        wtr.write_record([
            report.graph.as_str(),
            &l.name,
            &l.kind,
            &l.out_ch.to_string(),
            &ow,
            &oh,
            &l.params.to_string(),
            &l.macs.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn relative_error(value: f64, target: f64) -> f64 {
    (value - target) / target
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub width: usize,
    pub height: usize,
    pub unet_macs: u64,
    pub dsunet_macs: u64,
    pub unet_err: f64,
    pub dsunet_err: f64,
}

impl SweepRow {
    pub fn within_tolerance(&self) -> bool {
        self.unet_err.abs() <= MAC_TOLERANCE && self.dsunet_err.abs() <= MAC_TOLERANCE
    }

    pub fn worst_err(&self) -> f64 {
        self.unet_err.abs().max(self.dsunet_err.abs())
    }
}

/// 256×256, 640×480 and their halvings that stay divisible by 16.
pub fn candidate_resolutions() -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for (mut w, mut h) in [(256usize, 256usize), (640, 480)] {
        while w % 16 == 0 && h % 16 == 0 && w >= 16 {
            out.push((w, h));
            w /= 2;
            h /= 2;
        }
    }
    out
}

/// Square inputs from 64 to 640 in steps of 16.
pub fn square_resolutions() -> Vec<(usize, usize)> {
    (4..=40).map(|i| (16 * i, 16 * i)).collect()
}

/// MAC totals of both graphs (3 in, 1 out) at each resolution.
pub fn sweep_resolutions(candidates: &[(usize, usize)]) -> Result<Vec<SweepRow>, ArchError> {
    let u = unet_graph_io(3, 1);
    let d = dsunet_graph();
    candidates
        .iter()
        .map(|&(w, h)| {
            let um = count_macs(&u, (w, h))?.macs;
            let dm = count_macs(&d, (w, h))?.macs;
            Ok(SweepRow {
                width: w,
                height: h,
                unet_macs: um,
                dsunet_macs: dm,
                unet_err: relative_error(um as f64, TARGET_UNET_MACS),
                dsunet_err: relative_error(dm as f64, TARGET_DSUNET_MACS),
            })
        })
        .collect()
}

/// Row with the smallest worst-case relative error.
pub fn best_resolution(rows: &[SweepRow]) -> Option<SweepRow> {
    rows.iter()
        .copied()
        .min_by(|a, b| a.worst_err().total_cmp(&b.worst_err()))
}

/// Totals for both graphs: parameters at their own I/O, MACs at `input_hw`
/// with the DSUNet I/O (3 in, 1 out) for both.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchSummary {
    pub input_hw: (usize, usize),
    pub unet_params: u64,
    pub dsunet_params: u64,
    pub unet_macs: u64,
    pub dsunet_macs: u64,
    pub unet_conv_layers: usize,
    pub dsunet_conv_layers: usize,
}

impl ArchSummary {
    pub fn param_ratio(&self) -> f64 {
        self.unet_params as f64 / self.dsunet_params as f64
    }

    pub fn mac_ratio(&self) -> f64 {
        self.unet_macs as f64 / self.dsunet_macs as f64
    }
}

pub fn summarize(input_hw: (usize, usize)) -> Result<(ArchSummary, [CostReport; 2]), ArchError> {
    let unet = unet_graph();
    let dsunet = dsunet_graph();
    let unet_cost = count_macs(&unet_graph_io(3, 1), input_hw)?;
    let dsunet_cost = count_macs(&dsunet, input_hw)?;
    let s = ArchSummary {
        input_hw,
        unet_params: count_params(&unet)?.params,
        dsunet_params: dsunet_cost.params,
        unet_macs: unet_cost.macs,
        dsunet_macs: dsunet_cost.macs,
        unet_conv_layers: unet.conv_layer_count(),
        dsunet_conv_layers: dsunet.conv_layer_count(),
    };
    Ok((s, [unet_cost, dsunet_cost]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn census() {
        let u = unet_graph();
        u.validate().unwrap();
        assert_eq!(u.conv_layer_count(), 23);
        assert_eq!(u.standard_3x3_count(), 18);
        assert_eq!(u.count_kind("upconv"), 4);
        let deepest = u.layers.iter().find_map(|l| match l.kind {
            LayerKind::Conv {
                cin: 512,
                cout: 1024,
                ..
            } => Some(()),
            _ => None,
        });
        assert!(deepest.is_some());

        let d = dsunet_graph();
        d.validate().unwrap();
        assert_eq!(d.conv_layer_count(), 40);
        assert_eq!(d.count_kind("depthwise"), 17);
        assert_eq!(d.count_kind("pointwise"), 17);
        assert_eq!(d.standard_3x3_count(), 1);
        assert_eq!(d.count_kind("dropout"), 3);
        assert_eq!((d.in_ch, d.out_ch, u.in_ch, u.out_ch), (3, 1, 1, 2));
    }

    #[test]
    fn single_layer_counts() {
        let conv = Layer {
            name: "c".into(),
            kind: LayerKind::Conv {
                k: 3,
                cin: 3,
                cout: 64,
            },
            bias: true,
        };
        assert_eq!(layer_params(&conv), 1792);
        let dw = Layer {
            name: "d".into(),
            kind: LayerKind::Depthwise { k: 3, ch: 64 },
            bias: true,
        };
        let pw = Layer {
            name: "p".into(),
            kind: LayerKind::Pointwise { cin: 64, cout: 128 },
            bias: true,
        };
        assert_eq!((layer_params(&dw), layer_params(&pw)), (640, 8320));
        assert_eq!(macs_per_position(&conv.kind) * 320 * 240, 1728 * 76800);
    }

    #[test]
    fn totals() {
        assert_eq!(count_params(&unet_graph()).unwrap().params, 31_042_434);
        assert_eq!(count_params(&dsunet_graph()).unwrap().params, 6_001_473);
    }

    #[test]
    fn broken_graphs_rejected() {
        let mut g = unet_graph();
        g.layers[0].kind = LayerKind::Conv {
            k: 3,
            cin: 2,
            cout: 64,
        };
        assert!(matches!(
            g.validate(),
            Err(ArchError::InconsistentGraph { index: 0, .. })
        ));
        let mut g = unet_graph();
        g.out_ch = 3;
        assert!(g.validate().is_err());
        assert!(matches!(
            count_macs(&unet_graph(), (100, 64)),
            Err(ArchError::IndivisibleResolution(100, 64))
        ));
    }

    #[test]
    fn candidates_are_divisible() {
        let c = candidate_resolutions();
        assert!(c.contains(&(320, 240)) && c.contains(&(256, 256)) && c.contains(&(640, 480)));
        assert!(c.iter().all(|&(w, h)| w % 16 == 0 && h % 16 == 0));
    }
}
