//! Line-oriented model descriptions.
//!
//! A model file names its input size once and then lists layers top to
//! bottom, e.g.
//!
//! ```text
//! input 3 32 32
//! conv 16 3 1 same
//! batchnorm
//! relu
//! maxpool
//! flatten
//! dense 10
//! softmax
//! ```
//!
//! `resblock F S` is a composite layer: two 3x3 convs with batchnorm, a skip
//! connection (1x1 projection when shape changes), relu after the join.

use crate::error::{Error, Result};
use crate::tape::Padding;
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputSpec {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm,
    Relu,
    Sigmoid,
    MaxPool,
    GlobalAvgPool,
    Upsample,
    Flatten,
    Dense {
        units: usize,
    },
    Softmax,
    ResBlock {
        filters: usize,
        stride: usize,
    },
}

/// Activation shape between layers, excluding the batch dimension.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Spatial { c: usize, h: usize, w: usize },
    Flat { d: usize },
}

impl std::fmt::Display for Activation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Activation::Spatial { c, h, w } => write!(f, "{c}x{h}x{w}"),
            Activation::Flat { d } => write!(f, "{d}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input: InputSpec,
    pub layers: Vec<LayerSpec>,
}

/// A classifier cut at its first flatten or global-average-pool layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SplitModel {
    pub encoder: ModelSpec,
    pub head: ModelSpec,
}

impl ModelSpec {
    pub fn parse(text: &str) -> Result<Self> {
        let mut input: Option<InputSpec> = None;
        let mut layers = Vec::new();
        for (idx, raw) in text.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(pos) => &raw[..pos],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let mut tokens = line.split_whitespace();
            let keyword = tokens.next().unwrap();
            let args: Vec<&str> = tokens.collect();
            if keyword == "input" {
                if input.is_some() {
                    return Err(parse_err(line_no, "duplicate input line"));
                }
                if !layers.is_empty() {
                    return Err(parse_err(line_no, "input must come before any layer"));
                }
                let [c, h, w] = parse_args::<3>(line_no, "input", &args)?;
                input = Some(InputSpec {
                    channels: c,
                    height: h,
                    width: w,
                });
                continue;
            }
            if input.is_none() {
                return Err(parse_err(
                    line_no,
                    format!("expected an input line before '{keyword}'"),
                ));
            }
            let layer = match keyword {
                "conv" => {
                    if args.len() != 4 {
                        return Err(parse_err(
                            line_no,
                            format!("conv takes 4 arguments, got {}", args.len()),
                        ));
                    }
                    let filters = parse_num(line_no, "conv filters", args[0])?;
                    let kernel = parse_num(line_no, "conv kernel", args[1])?;
                    let stride = parse_num(line_no, "conv stride", args[2])?;
                    let padding = match args[3] {
                        "same" => Padding::Same,
                        "valid" => Padding::Valid,
                        other => {
                            return Err(parse_err(
                                line_no,
                                format!("conv padding must be 'same' or 'valid', got '{other}'"),
                            ))
                        }
                    };
                    LayerSpec::Conv {
                        filters,
                        kernel,
                        stride,
                        padding,
                    }
                }
                "dense" => {
                    let [units] = parse_args::<1>(line_no, "dense", &args)?;
                    LayerSpec::Dense { units }
                }
                "resblock" => {
                    let [filters, stride] = parse_args::<2>(line_no, "resblock", &args)?;
                    LayerSpec::ResBlock { filters, stride }
                }
                bare => {
                    if !args.is_empty() {
                        return Err(parse_err(
                            line_no,
                            format!("'{bare}' takes no arguments"),
                        ));
                    }
                    match bare {
                        "batchnorm" => LayerSpec::BatchNorm,
                        "relu" => LayerSpec::Relu,
                        "sigmoid" => LayerSpec::Sigmoid,
                        "maxpool" => LayerSpec::MaxPool,
                        "globalavgpool" => LayerSpec::GlobalAvgPool,
                        "upsample" => LayerSpec::Upsample,
                        "flatten" => LayerSpec::Flatten,
                        "softmax" => LayerSpec::Softmax,
                        other => {
                            return Err(parse_err(line_no, format!("unknown layer '{other}'")))
                        }
                    }
                }
            };
            layers.push(layer);
        }
        let Some(input) = input else {
            return Err(Error::InvalidModel("missing input line".into()));
        };
        let spec = ModelSpec { input, layers };
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "input {} {} {}\n",
            self.input.channels, self.input.height, self.input.width
        ));
        for layer in &self.layers {
            let line = match layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    padding,
                } => format!("conv {filters} {kernel} {stride} {padding}"),
                LayerSpec::BatchNorm => "batchnorm".into(),
                LayerSpec::Relu => "relu".into(),
                LayerSpec::Sigmoid => "sigmoid".into(),
                LayerSpec::MaxPool => "maxpool".into(),
                LayerSpec::GlobalAvgPool => "globalavgpool".into(),
                LayerSpec::Upsample => "upsample".into(),
                LayerSpec::Flatten => "flatten".into(),
                LayerSpec::Dense { units } => format!("dense {units}"),
                LayerSpec::Softmax => "softmax".into(),
                LayerSpec::ResBlock { filters, stride } => format!("resblock {filters} {stride}"),
            };
            out.push_str(&line);
            out.push('\n');
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.input.channels == 0 || self.input.height == 0 || self.input.width == 0 {
            return Err(Error::InvalidModel("input dimensions must be positive".into()));
        }
        if self.layers.is_empty() {
            return Err(Error::InvalidModel("model has no layers".into()));
        }
        for (i, layer) in self.layers.iter().enumerate() {
            match *layer {
                LayerSpec::Conv {
                    filters,
                    kernel,
                    stride,
                    ..
                } => {
                    if filters == 0 {
                        return Err(invalid_layer(i, "conv needs at least 1 filter"));
                    }
                    if !matches!(kernel, 1 | 3 | 5) {
                        return Err(invalid_layer(
                            i,
                            format!("conv kernel must be 1, 3, or 5, got {kernel}"),
                        ));
                    }
                    if !matches!(stride, 1 | 2) {
                        return Err(invalid_layer(
                            i,
                            format!("conv stride must be 1 or 2, got {stride}"),
                        ));
                    }
                }
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(invalid_layer(i, "dense needs at least 1 unit"));
                    }
                }
                LayerSpec::ResBlock { filters, stride } => {
                    if filters == 0 {
                        return Err(invalid_layer(i, "resblock needs at least 1 filter"));
                    }
                    if !matches!(stride, 1 | 2) {
                        return Err(invalid_layer(
                            i,
                            format!("resblock stride must be 1 or 2, got {stride}"),
                        ));
                    }
                }
                LayerSpec::Softmax => {
                    if i + 1 != self.layers.len() {
                        return Err(invalid_layer(i, "softmax is only valid as the last layer"));
                    }
                }
                _ => {}
            }
        }
        self.output_shapes()?;
        Ok(())
    }

    /// The activation shape after each layer, starting from the declared
    /// input. Fails on any shape mismatch, naming the offending layer.
    pub fn output_shapes(&self) -> Result<Vec<Activation>> {
        let mut shape = Activation::Spatial {
            c: self.input.channels,
            h: self.input.height,
            w: self.input.width,
        };
        let mut shapes = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            shape = apply_layer(shape, layer).map_err(|e| match e {
                Error::InvalidModel(msg) => invalid_layer(i, msg),
                other => other,
            })?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Activation> {
        Ok(*self.output_shapes()?.last().expect("validated nonempty"))
    }

    /// Total trainable parameter count (conv and dense weights and biases,
    /// batchnorm affine pairs). Running statistics are not counted.
    pub fn parameter_count(&self) -> Result<usize> {
        let mut shape = Activation::Spatial {
            c: self.input.channels,
            h: self.input.height,
            w: self.input.width,
        };
        let mut total = 0usize;
        for layer in &self.layers {
            total += match (*layer, shape) {
                (
                    LayerSpec::Conv {
                        filters, kernel, ..
                    },
                    Activation::Spatial { c, .. },
                ) => filters * c * kernel * kernel + filters,
                (LayerSpec::BatchNorm, Activation::Spatial { c, .. }) => 2 * c,
                (LayerSpec::Dense { units }, Activation::Flat { d }) => d * units + units,
                (LayerSpec::ResBlock { filters, stride }, Activation::Spatial { c, .. }) => {
                    let conv1 = filters * c * 9 + filters;
                    let conv2 = filters * filters * 9 + filters;
                    let bns = 2 * filters + 2 * filters;
                    let projection = if c != filters || stride != 1 {
                        filters * c + filters + 2 * filters
                    } else {
                        0
                    };
                    conv1 + conv2 + bns + projection
                }
                _ => 0,
            };
            shape = apply_layer(shape, layer)?;
        }
        Ok(total)
    }

    /// True when the last layer is `softmax`; training always drives the
    /// loss from the logits underneath it.
    pub fn has_trailing_softmax(&self) -> bool {
        matches!(self.layers.last(), Some(LayerSpec::Softmax))
    }

    /// Cuts the model at its first `flatten` or `globalavgpool`. Everything
    /// before is the feature extractor, that layer onward is the head.
    pub fn split(&self) -> Result<SplitModel> {
        let boundary = self
            .layers
            .iter()
            .position(|l| matches!(l, LayerSpec::Flatten | LayerSpec::GlobalAvgPool))
            .ok_or_else(|| {
                Error::Split("model has no flatten or globalavgpool boundary".into())
            })?;
        if boundary == 0 {
            return Err(Error::Split(
                "no feature layers before the classifier head".into(),
            ));
        }
        let encoder = ModelSpec {
            input: self.input,
            layers: self.layers[..boundary].to_vec(),
        };
        let bottleneck = match encoder.output_shape()? {
            Activation::Spatial { c, h, w } => InputSpec {
                channels: c,
                height: h,
                width: w,
            },
            Activation::Flat { .. } => {
                return Err(Error::Split(
                    "feature layers must produce a spatial activation".into(),
                ))
            }
        };
        let head = ModelSpec {
            input: bottleneck,
            layers: self.layers[boundary..].to_vec(),
        };
        Ok(SplitModel { encoder, head })
    }
}

impl SplitModel {
    pub fn bottleneck(&self) -> InputSpec {
        self.head.input
    }

    /// Encoder plus a synthesized mirror decoder, as one trainable model
    /// mapping images back to image-shaped outputs in `[0, 1]`.
    pub fn autoencoder(&self) -> Result<ModelSpec> {
        let decoder = synthesize_decoder(self.bottleneck(), self.encoder.input)?;
        let mut layers = self.encoder.layers.clone();
        layers.extend(decoder.layers);
        let spec = ModelSpec {
            input: self.encoder.input,
            layers,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Number of parameters in the encoder part, which is also the offset of
    /// the first decoder or head parameter in a combined model.
    pub fn encoder_parameter_count(&self) -> Result<usize> {
        self.encoder.parameter_count()
    }
}

/// Builds the upsampling mirror for an encoder that reduced `image` down to
/// `bottleneck`. Each halving of resolution becomes one upsample block;
/// widths halve from the bottleneck width with a floor of 16; a final 3x3
/// conv maps to the image channel count and a sigmoid pins outputs to
/// `[0, 1]`.
pub fn synthesize_decoder(bottleneck: InputSpec, image: InputSpec) -> Result<ModelSpec> {
    let (bh, bw) = (bottleneck.height, bottleneck.width);
    let (ih, iw) = (image.height, image.width);
    if bh == 0 || bw == 0 || ih % bh != 0 || iw % bw != 0 {
        return Err(Error::Synthesis(format!(
            "bottleneck {bh}x{bw} does not divide image {ih}x{iw}"
        )));
    }
    let ratio = ih / bh;
    if iw / bw != ratio || !ratio.is_power_of_two() {
        return Err(Error::Synthesis(format!(
            "image to bottleneck ratio must be the same power of two on both axes, got {}x and {}x",
            ih / bh,
            iw / bw
        )));
    }
    let levels = ratio.trailing_zeros() as usize;
    let mut layers = Vec::new();
    let mut width = bottleneck.channels;
    for _ in 0..levels {
        width = (width / 2).max(16);
        layers.push(LayerSpec::Upsample);
        layers.push(LayerSpec::Conv {
            filters: width,
            kernel: 3,
            stride: 1,
            padding: Padding::Same,
        });
        layers.push(LayerSpec::BatchNorm);
        layers.push(LayerSpec::Relu);
    }
    layers.push(LayerSpec::Conv {
        filters: image.channels,
        kernel: 3,
        stride: 1,
        padding: Padding::Same,
    });
    layers.push(LayerSpec::Sigmoid);
    let spec = ModelSpec {
        input: bottleneck,
        layers,
    };
    spec.validate()?;
    Ok(spec)
}

fn apply_layer(shape: Activation, layer: &LayerSpec) -> Result<Activation> {
    use Activation::*;
    let bad = |msg: String| Err(Error::InvalidModel(msg));
    Ok(match (*layer, shape) {
        (
            LayerSpec::Conv {
                filters,
                kernel,
                stride,
                padding,
            },
            Spatial { h, w, .. },
        ) => match padding {
            Padding::Same => Spatial {
                c: filters,
                h: h.div_ceil(stride),
                w: w.div_ceil(stride),
            },
            Padding::Valid => {
                if h < kernel || w < kernel {
                    return bad(format!("valid conv kernel {kernel} does not fit {h}x{w}"));
                }
                Spatial {
                    c: filters,
                    h: (h - kernel) / stride + 1,
                    w: (w - kernel) / stride + 1,
                }
            }
        },
        (LayerSpec::BatchNorm, s @ Spatial { .. }) => s,
        (LayerSpec::Relu, s) | (LayerSpec::Sigmoid, s) => s,
        (LayerSpec::MaxPool, Spatial { c, h, w }) => {
            if h % 2 != 0 || w % 2 != 0 {
                return bad(format!("maxpool needs even spatial dims, got {h}x{w}"));
            }
            Spatial {
                c,
                h: h / 2,
                w: w / 2,
            }
        }
        (LayerSpec::GlobalAvgPool, Spatial { c, .. }) => Spatial { c, h: 1, w: 1 },
        (LayerSpec::Upsample, Spatial { c, h, w }) => Spatial {
            c,
            h: 2 * h,
            w: 2 * w,
        },
        (LayerSpec::Flatten, Spatial { c, h, w }) => Flat { d: c * h * w },
        (LayerSpec::Dense { units }, Flat { .. }) => Flat { d: units },
        (LayerSpec::Softmax, s @ Flat { .. }) => s,
        (LayerSpec::ResBlock { filters, stride }, Spatial { h, w, .. }) => Spatial {
            c: filters,
            h: h.div_ceil(stride),
            w: w.div_ceil(stride),
        },
        (l, s) => {
            let kind = match s {
                Spatial { .. } => "spatial",
                Flat { .. } => "flat",
            };
            return bad(format!("{l:?} cannot follow a {kind} activation"));
        }
    })
}

fn parse_err(line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        line,
        message: message.into(),
    }
}

fn invalid_layer(index: usize, message: impl Into<String>) -> Error {
    Error::InvalidModel(format!("layer {}: {}", index + 1, message.into()))
}

fn parse_num(line: usize, what: &str, token: &str) -> Result<usize> {
    token
        .parse::<usize>()
        .map_err(|_| parse_err(line, format!("{what} must be a nonnegative integer, got '{token}'")))
}

fn parse_args<const N: usize>(line: usize, keyword: &str, args: &[&str]) -> Result<[usize; N]> {
    if args.len() != N {
        return Err(parse_err(
            line,
            format!("{keyword} takes {N} arguments, got {}", args.len()),
        ));
    }
    let mut out = [0usize; N];
    for (slot, token) in out.iter_mut().zip(args) {
        *slot = parse_num(line, keyword, token)?;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "\
# toy classifier
input 3 32 32
conv 8 3 2 same
batchnorm
relu
maxpool
flatten
dense 10
softmax
";

    #[test]
    fn parses_and_infers_shapes() {
        let spec = ModelSpec::parse(SMALL).unwrap();
        assert_eq!(spec.layers.len(), 7);
        let shapes = spec.output_shapes().unwrap();
        assert_eq!(shapes[0], Activation::Spatial { c: 8, h: 16, w: 16 });
        assert_eq!(shapes[3], Activation::Spatial { c: 8, h: 8, w: 8 });
        assert_eq!(shapes[4], Activation::Flat { d: 512 });
        assert_eq!(spec.output_shape().unwrap(), Activation::Flat { d: 10 });
    }

    #[test]
    fn serialization_round_trips() {
        let spec = ModelSpec::parse(SMALL).unwrap();
        let text = spec.to_text();
        assert_eq!(ModelSpec::parse(&text).unwrap(), spec);
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = ModelSpec::parse("input 3 32 32\nconv 8 2 1 same\n").unwrap_err();
        match err {
            Error::InvalidModel(msg) => assert!(msg.contains("kernel"), "{msg}"),
            other => panic!("unexpected {other:?}"),
        }
        let err = ModelSpec::parse("input 3 32 32\nconv 8 3 1 reflect\n").unwrap_err();
        match err {
            Error::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("reflect"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
        let err = ModelSpec::parse("input 3 32 32\nwibble\n").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn input_line_rules() {
        assert!(ModelSpec::parse("conv 8 3 1 same\n").is_err());
        assert!(ModelSpec::parse("input 3 32 32\ninput 3 32 32\nrelu\n").is_err());
        assert!(ModelSpec::parse("input 3 32\nrelu\n").is_err());
        assert!(ModelSpec::parse("").is_err());
        assert!(ModelSpec::parse("input 0 32 32\nrelu\n").is_err());
    }

    #[test]
    fn softmax_must_be_last() {
        let err = ModelSpec::parse("input 3 8 8\nflatten\nsoftmax\ndense 4\n").unwrap_err();
        assert!(matches!(err, Error::InvalidModel(_)));
    }

    #[test]
    fn shape_mismatches_are_rejected() {
        // dense on a spatial activation
        assert!(ModelSpec::parse("input 3 8 8\ndense 4\n").is_err());
        // maxpool on odd dims
        assert!(ModelSpec::parse("input 3 5 5\nmaxpool\n").is_err());
        // conv after flatten
        assert!(ModelSpec::parse("input 3 8 8\nflatten\nconv 4 3 1 same\n").is_err());
        // valid conv bigger than its input
        assert!(ModelSpec::parse("input 3 2 2\nconv 4 5 1 valid\n").is_err());
    }

    #[test]
    fn parameter_counts_by_hand() {
        // conv 8 3 1 same on 3 channels: 8*3*9 + 8 = 224
        // batchnorm on 8 channels: 16
        // dense 512 -> 10: 5130
        let spec = ModelSpec::parse(SMALL).unwrap();
        assert_eq!(spec.parameter_count().unwrap(), 224 + 16 + 512 * 10 + 10);
    }

    #[test]
    fn resblock_parameter_count_includes_projection_only_when_needed() {
        let same = ModelSpec::parse("input 16 8 8\nresblock 16 1\nflatten\n").unwrap();
        // two 3x3 convs 16->16 plus two batchnorms
        let expected = (16 * 16 * 9 + 16) * 2 + 32 + 32;
        assert_eq!(same.parameter_count().unwrap(), expected);

        let proj = ModelSpec::parse("input 16 8 8\nresblock 32 2\nflatten\n").unwrap();
        let expected = (32 * 16 * 9 + 32) + (32 * 32 * 9 + 32) + 64 + 64 + (32 * 16 + 32 + 64);
        assert_eq!(proj.parameter_count().unwrap(), expected);
    }

    #[test]
    fn split_produces_encoder_and_head() {
        let spec = ModelSpec::parse(SMALL).unwrap();
        let split = spec.split().unwrap();
        assert_eq!(split.encoder.layers.len(), 4);
        assert_eq!(
            split.bottleneck(),
            InputSpec {
                channels: 8,
                height: 8,
                width: 8
            }
        );
        assert!(matches!(split.head.layers[0], LayerSpec::Flatten));
        assert_eq!(split.head.output_shape().unwrap(), Activation::Flat { d: 10 });
    }

    #[test]
    fn split_needs_a_boundary_and_features() {
        let spec = ModelSpec::parse("input 3 8 8\nconv 4 3 1 same\nrelu\n").unwrap();
        assert!(matches!(spec.split(), Err(Error::Split(_))));
        let spec = ModelSpec::parse("input 3 8 8\nflatten\ndense 4\n").unwrap();
        assert!(matches!(spec.split(), Err(Error::Split(_))));
    }

    #[test]
    fn decoder_mirrors_the_reduction() {
        let bottleneck = InputSpec {
            channels: 64,
            height: 4,
            width: 4,
        };
        let image = InputSpec {
            channels: 3,
            height: 32,
            width: 32,
        };
        let decoder = synthesize_decoder(bottleneck, image).unwrap();
        assert_eq!(
            decoder.output_shape().unwrap(),
            Activation::Spatial { c: 3, h: 32, w: 32 }
        );
        let widths: Vec<usize> = decoder
            .layers
            .iter()
            .filter_map(|l| match l {
                LayerSpec::Conv { filters, .. } => Some(*filters),
                _ => None,
            })
            .collect();
        assert_eq!(widths, vec![32, 16, 16, 3]);
        assert!(matches!(decoder.layers.last(), Some(LayerSpec::Sigmoid)));
    }

    #[test]
    fn decoder_rejects_non_dyadic_ratios() {
        let image = InputSpec {
            channels: 3,
            height: 24,
            width: 24,
        };
        let bottleneck = InputSpec {
            channels: 32,
            height: 8,
            width: 8,
        };
        // ratio 3
        assert!(matches!(
            synthesize_decoder(bottleneck, image),
            Err(Error::Synthesis(_))
        ));
        let uneven = InputSpec {
            channels: 32,
            height: 12,
            width: 6,
        };
        assert!(synthesize_decoder(uneven, image).is_err());
    }

    #[test]
    fn autoencoder_reconstructs_input_shape() {
        let spec = ModelSpec::parse(SMALL).unwrap();
        let cae = spec.split().unwrap().autoencoder().unwrap();
        assert_eq!(
            cae.output_shape().unwrap(),
            Activation::Spatial { c: 3, h: 32, w: 32 }
        );
        assert_eq!(cae.input, spec.input);
    }
}
