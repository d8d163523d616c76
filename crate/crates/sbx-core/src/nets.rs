//! The model stack: image encoder, self-attention refinement, feature
//! extractor, and the two-path classifier.
//!
//! Feature maps are `[batch, height, width, channels]`. The classifier has
//! two input paths that share one output layer: the r-path consumes
//! attention-refined encodings of raw images, the e-path consumes stored
//! feature-space samples.

use rand::Rng;

use crate::error::{Error, Result};
use crate::optim::GradMap;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Architecture hyperparameters shared by every component.
#[derive(Clone, Debug, PartialEq)]
pub struct NetConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_c: usize,
    /// Channel width after the first encoder conv.
    pub conv1_channels: usize,
    /// Channel width `d` of the encoded feature maps.
    pub feature_channels: usize,
    /// Hidden width of the classifier paths.
    pub hidden: usize,
    pub num_classes: usize,
    pub extractor: ExtractorKind,
    /// Adds `f' + f` after the attention output (off by default).
    pub sa_residual: bool,
}

impl NetConfig {
    pub fn new(num_classes: usize) -> Self {
        NetConfig {
            input_h: 16,
            input_w: 16,
            input_c: 1,
            conv1_channels: 8,
            feature_channels: 16,
            hidden: 64,
            num_classes,
            extractor: ExtractorKind::Identity,
            sa_residual: false,
        }
    }

    fn conv_out(n: usize) -> usize {
        // kernel 3, stride 2, zero padding 1
        (n + 2 - 3) / 2 + 1
    }

    /// Spatial and channel dims `(h, w, d)` of the encoder output.
    pub fn feature_shape(&self) -> (usize, usize, usize) {
        let h = Self::conv_out(Self::conv_out(self.input_h));
        let w = Self::conv_out(Self::conv_out(self.input_w));
        (h, w, self.feature_channels)
    }

    /// Flattened feature length consumed by the classifier paths.
    pub fn feature_len(&self) -> usize {
        let (h, w, d) = self.feature_shape();
        h * w * d
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("input_c", self.input_c),
            ("conv1_channels", self.conv1_channels),
            ("feature_channels", self.feature_channels),
            ("hidden", self.hidden),
            ("num_classes", self.num_classes),
        ];
        for (name, v) in positives {
            if v == 0 {
                return Err(Error::InvalidConfig { detail: format!("{name} must be positive") });
            }
        }
        let (h, w, _) = self.feature_shape();
        if h < 2 || w < 2 {
            return Err(Error::InvalidConfig {
                detail: format!("encoder output {h}x{w} too small; attention needs at least 2x2"),
            });
        }
        Ok(())
    }
}

fn kaiming_uniform<F: Scalar>(rng: &mut impl Rng, shape: &[usize], fan_in: usize) -> Tensor<F> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let numel: usize = shape.iter().product();
    let data: Vec<F> =
        (0..numel).map(|_| F::from_f64(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).expect("init data matches shape")
}

fn blend_tensors<F: Scalar>(a: &Tensor<F>, b: &Tensor<F>, alpha: f64) -> Result<Tensor<F>> {
    if a.shape() != b.shape() {
        return Err(Error::StructureMismatch {
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    if alpha == 0.0 {
        return Ok(a.clone());
    }
    if alpha == 1.0 {
        return Ok(b.clone());
    }
    let wa = F::from_f64(1.0 - alpha);
    let wb = F::from_f64(alpha);
    let data = a.data().iter().zip(b.data()).map(|(x, y)| wa * *x + wb * *y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

fn bind_param<F: Scalar>(tape: &mut Tape<F>, t: &Tensor<F>, trainable: bool) -> Result<Var> {
    if trainable {
        tape.leaf(t.clone().with_grad())
    } else {
        tape.constant(t.clone())
    }
}

fn collect<F: Scalar>(
    out: &mut GradMap<F>,
    grads: &Gradients<F>,
    name: &str,
    var: Var,
) -> Result<()> {
    match grads.get(var) {
        Some(g) => {
            out.insert(name, g.clone());
            Ok(())
        }
        None => Err(Error::MissingGradient { name: name.into() }),
    }
}

// ── encoder ──────────────────────────────────────────────────────────

/// Two-layer strided CNN producing `[B, h, w, d]` feature maps.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<F: Scalar> {
    pub conv1_w: Tensor<F>,
    pub conv1_b: Tensor<F>,
    pub conv2_w: Tensor<F>,
    pub conv2_b: Tensor<F>,
    input_h: usize,
    input_w: usize,
    input_c: usize,
}

pub struct EncoderVars {
    pub conv1_w: Var,
    pub conv1_b: Var,
    pub conv2_w: Var,
    pub conv2_b: Var,
}

impl<F: Scalar> Encoder<F> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let c1 = cfg.conv1_channels;
        let d = cfg.feature_channels;
        Encoder {
            conv1_w: kaiming_uniform(rng, &[3, 3, cfg.input_c, c1], 9 * cfg.input_c),
            conv1_b: Tensor::zeros(&[c1]),
            conv2_w: kaiming_uniform(rng, &[3, 3, c1, d], 9 * c1),
            conv2_b: Tensor::zeros(&[d]),
            input_h: cfg.input_h,
            input_w: cfg.input_w,
            input_c: cfg.input_c,
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<EncoderVars> {
        Ok(EncoderVars {
            conv1_w: bind_param(tape, &self.conv1_w, trainable)?,
            conv1_b: bind_param(tape, &self.conv1_b, trainable)?,
            conv2_w: bind_param(tape, &self.conv2_w, trainable)?,
            conv2_b: bind_param(tape, &self.conv2_b, trainable)?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("encoder.conv1.weight".into(), &self.conv1_w),
            ("encoder.conv1.bias".into(), &self.conv1_b),
            ("encoder.conv2.weight".into(), &self.conv2_w),
            ("encoder.conv2.bias".into(), &self.conv2_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("encoder.conv1.weight".into(), &mut self.conv1_w),
            ("encoder.conv1.bias".into(), &mut self.conv1_b),
            ("encoder.conv2.weight".into(), &mut self.conv2_w),
            ("encoder.conv2.bias".into(), &mut self.conv2_b),
        ]
    }
}

impl EncoderVars {
    /// `images [B, H, W, C] -> features [B, h, w, d]`.
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, images: Var) -> Result<Var> {
        let h1 = tape.conv2d(images, self.conv1_w, 2, 1)?;
        let h1 = tape.bias_add(h1, self.conv1_b)?;
        let h1 = tape.relu(h1)?;
        let h2 = tape.conv2d(h1, self.conv2_w, 2, 1)?;
        let h2 = tape.bias_add(h2, self.conv2_b)?;
        tape.relu(h2)
    }

    pub fn collect_grads<F: Scalar>(
        &self,
        grads: &Gradients<F>,
        out: &mut GradMap<F>,
    ) -> Result<()> {
        collect(out, grads, "encoder.conv1.weight", self.conv1_w)?;
        collect(out, grads, "encoder.conv1.bias", self.conv1_b)?;
        collect(out, grads, "encoder.conv2.weight", self.conv2_w)?;
        collect(out, grads, "encoder.conv2.bias", self.conv2_b)
    }
}

/// Runs the encoder over images, checking the configured input size.
pub fn encode<F: Scalar>(
    encoder: &Encoder<F>,
    tape: &mut Tape<F>,
    images: Var,
    trainable: bool,
) -> Result<Var> {
    let s = tape.value(images).shape().to_vec();
    if s.len() != 4 || s[1] != encoder.input_h || s[2] != encoder.input_w || s[3] != encoder.input_c
    {
        return Err(Error::Shape {
            op: "encode",
            detail: format!(
                "expected [B, {}, {}, {}], got {s:?}",
                encoder.input_h, encoder.input_w, encoder.input_c
            ),
        });
    }
    let vars = encoder.bind(tape, trainable)?;
    vars.forward(tape, images)
}

// ── self-attention ───────────────────────────────────────────────────

/// Single-head self-attention over the `w*h` spatial positions of a
/// feature map, with key/query projections and 1x1-conv value and output
/// transforms. Attention weights for each query position normalize over
/// the key positions.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention<F: Scalar> {
    pub w_k: Tensor<F>,
    pub w_q: Tensor<F>,
    pub v_w: Tensor<F>,
    pub v_b: Tensor<F>,
    pub i_w: Tensor<F>,
    pub i_b: Tensor<F>,
    pub residual: bool,
    d: usize,
    d_k: usize,
    d_v: usize,
}

pub struct SelfAttentionVars {
    pub w_k: Var,
    pub w_q: Var,
    pub v_w: Var,
    pub v_b: Var,
    pub i_w: Var,
    pub i_b: Var,
    residual: bool,
}

impl<F: Scalar> SelfAttention<F> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let d = cfg.feature_channels;
        let d_k = (d / 8).max(1);
        let d_v = d;
        SelfAttention {
            w_k: kaiming_uniform(rng, &[d, d_k], d),
            w_q: kaiming_uniform(rng, &[d, d_k], d),
            v_w: kaiming_uniform(rng, &[1, 1, d, d_v], d),
            v_b: Tensor::zeros(&[d_v]),
            i_w: kaiming_uniform(rng, &[1, 1, d_v, d], d_v),
            i_b: Tensor::zeros(&[d]),
            residual: cfg.sa_residual,
            d,
            d_k,
            d_v,
        }
    }

    pub fn channels(&self) -> usize {
        self.d
    }

    pub fn key_dim(&self) -> usize {
        self.d_k
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<SelfAttentionVars> {
        Ok(SelfAttentionVars {
            w_k: bind_param(tape, &self.w_k, trainable)?,
            w_q: bind_param(tape, &self.w_q, trainable)?,
            v_w: bind_param(tape, &self.v_w, trainable)?,
            v_b: bind_param(tape, &self.v_b, trainable)?,
            i_w: bind_param(tape, &self.i_w, trainable)?,
            i_b: bind_param(tape, &self.i_b, trainable)?,
            residual: self.residual,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("sa.w_k".into(), &self.w_k),
            ("sa.w_q".into(), &self.w_q),
            ("sa.v.weight".into(), &self.v_w),
            ("sa.v.bias".into(), &self.v_b),
            ("sa.i.weight".into(), &self.i_w),
            ("sa.i.bias".into(), &self.i_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("sa.w_k".into(), &mut self.w_k),
            ("sa.w_q".into(), &mut self.w_q),
            ("sa.v.weight".into(), &mut self.v_w),
            ("sa.v.bias".into(), &mut self.v_b),
            ("sa.i.weight".into(), &mut self.i_w),
            ("sa.i.bias".into(), &mut self.i_b),
        ]
    }
}

impl SelfAttentionVars {
    /// Returns `(refined features, attention map)` where the map has shape
    /// `[B, w*h, w*h]` and rows (last axis) sum to one.
    pub fn forward_with_map<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        f: Var,
    ) -> Result<(Var, Var)> {
        let s = tape.value(f).shape().to_vec();
        let d = tape.value(self.w_k).shape()[0];
        if s.len() != 4 || s[3] != d {
            return Err(Error::Shape {
                op: "self_attention",
                detail: format!("expected [B, w, h, {d}], got {s:?}"),
            });
        }
        let (b, h, w) = (s[0], s[1], s[2]);
        let positions = h * w;
        if positions < 2 {
            return Err(Error::Shape {
                op: "self_attention",
                detail: "feature map must have at least 2 spatial positions".into(),
            });
        }
        let d_v = tape.value(self.v_w).shape()[3];

        // Project every position into key/query space.
        let flat = tape.reshape(f, &[b * positions, d])?;
        let keys = tape.matmul(flat, self.w_k)?;
        let queries = tape.matmul(flat, self.w_q)?;
        let d_k = tape.value(keys).shape()[1];
        let keys = tape.reshape(keys, &[b, positions, d_k])?;
        let queries = tape.reshape(queries, &[b, positions, d_k])?;

        // scores[b, j, i] = K(f_i) . Q(f_j); normalize over i.
        let keys_t = tape.transpose(keys)?;
        let scores = tape.bmm(queries, keys_t)?;
        let attn = tape.softmax(scores, 2)?;

        let values = tape.conv2d(f, self.v_w, 1, 0)?;
        let values = tape.bias_add(values, self.v_b)?;
        let values = tape.reshape(values, &[b, positions, d_v])?;

        let mixed = tape.bmm(attn, values)?;
        let mixed = tape.reshape(mixed, &[b, h, w, d_v])?;
        let out = tape.conv2d(mixed, self.i_w, 1, 0)?;
        let mut out = tape.bias_add(out, self.i_b)?;
        if self.residual {
            out = tape.add(out, f)?;
        }
        Ok((out, attn))
    }

    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, f: Var) -> Result<Var> {
        self.forward_with_map(tape, f).map(|(out, _)| out)
    }

    pub fn collect_grads<F: Scalar>(
        &self,
        grads: &Gradients<F>,
        out: &mut GradMap<F>,
    ) -> Result<()> {
        collect(out, grads, "sa.w_k", self.w_k)?;
        collect(out, grads, "sa.w_q", self.w_q)?;
        collect(out, grads, "sa.v.weight", self.v_w)?;
        collect(out, grads, "sa.v.bias", self.v_b)?;
        collect(out, grads, "sa.i.weight", self.i_w)?;
        collect(out, grads, "sa.i.bias", self.i_b)
    }
}

/// Attention-refines a feature map with the given parameters.
pub fn self_attention<F: Scalar>(
    sa: &SelfAttention<F>,
    tape: &mut Tape<F>,
    f: Var,
    trainable: bool,
) -> Result<Var> {
    let vars = sa.bind(tape, trainable)?;
    vars.forward(tape, f)
}

// ── extractor ────────────────────────────────────────────────────────

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ExtractorKind {
    /// Pass stored features through unchanged.
    Identity,
    /// Learnable 1x1 conv adapter `[d -> d]`.
    Conv1x1,
}

/// The e-path feature extractor applied to stored boundary samples.
#[derive(Clone, Debug, PartialEq)]
pub struct Extractor<F: Scalar> {
    pub kind: ExtractorKind,
    pub w: Option<Tensor<F>>,
    pub b: Option<Tensor<F>>,
}

pub struct ExtractorVars {
    w: Option<Var>,
    b: Option<Var>,
}

impl<F: Scalar> Extractor<F> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        match cfg.extractor {
            ExtractorKind::Identity => Extractor { kind: ExtractorKind::Identity, w: None, b: None },
            ExtractorKind::Conv1x1 => {
                let d = cfg.feature_channels;
                Extractor {
                    kind: ExtractorKind::Conv1x1,
                    w: Some(kaiming_uniform(rng, &[1, 1, d, d], d)),
                    b: Some(Tensor::zeros(&[d])),
                }
            }
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<ExtractorVars> {
        match self.kind {
            ExtractorKind::Identity => Ok(ExtractorVars { w: None, b: None }),
            ExtractorKind::Conv1x1 => Ok(ExtractorVars {
                w: Some(bind_param(tape, self.w.as_ref().expect("conv extractor weight"), trainable)?),
                b: Some(bind_param(tape, self.b.as_ref().expect("conv extractor bias"), trainable)?),
            }),
        }
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        match self.kind {
            ExtractorKind::Identity => vec![],
            ExtractorKind::Conv1x1 => vec![
                ("extractor.conv.weight".into(), self.w.as_ref().expect("weight")),
                ("extractor.conv.bias".into(), self.b.as_ref().expect("bias")),
            ],
        }
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        match self.kind {
            ExtractorKind::Identity => vec![],
            ExtractorKind::Conv1x1 => vec![
                ("extractor.conv.weight".into(), self.w.as_mut().expect("weight")),
                ("extractor.conv.bias".into(), self.b.as_mut().expect("bias")),
            ],
        }
    }

    /// Affine blend of two structurally identical extractors.
    pub fn blend(&self, other: &Extractor<F>, alpha: f64) -> Result<Extractor<F>> {
        if self.kind != other.kind {
            return Err(Error::StructureMismatch { detail: "extractor kinds differ".into() });
        }
        match self.kind {
            ExtractorKind::Identity => Ok(self.clone()),
            ExtractorKind::Conv1x1 => Ok(Extractor {
                kind: self.kind,
                w: Some(blend_tensors(
                    self.w.as_ref().expect("weight"),
                    other.w.as_ref().expect("weight"),
                    alpha,
                )?),
                b: Some(blend_tensors(
                    self.b.as_ref().expect("bias"),
                    other.b.as_ref().expect("bias"),
                    alpha,
                )?),
            }),
        }
    }
}

impl ExtractorVars {
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, e: Var) -> Result<Var> {
        match (self.w, self.b) {
            (None, None) => Ok(e),
            (Some(w), Some(b)) => {
                let out = tape.conv2d(e, w, 1, 0)?;
                tape.bias_add(out, b)
            }
            _ => unreachable!("extractor vars are all-or-nothing"),
        }
    }

    pub fn collect_grads<F: Scalar>(
        &self,
        grads: &Gradients<F>,
        out: &mut GradMap<F>,
    ) -> Result<()> {
        if let (Some(w), Some(b)) = (self.w, self.b) {
            collect(out, grads, "extractor.conv.weight", w)?;
            collect(out, grads, "extractor.conv.bias", b)?;
        }
        Ok(())
    }
}

// ── classifier model ─────────────────────────────────────────────────

/// The blended model `M`: per-path input layers `F_R`/`F_E` plus the shared
/// classifier `C`. The two input layers have identical shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelState<F: Scalar> {
    pub f_r_w: Tensor<F>,
    pub f_r_b: Tensor<F>,
    pub f_e_w: Tensor<F>,
    pub f_e_b: Tensor<F>,
    pub c_w: Tensor<F>,
    pub c_b: Tensor<F>,
}

pub struct ModelVars {
    pub f_r_w: Var,
    pub f_r_b: Var,
    pub f_e_w: Var,
    pub f_e_b: Var,
    pub c_w: Var,
    pub c_b: Var,
}

impl<F: Scalar> ModelState<F> {
    pub fn new(cfg: &NetConfig, rng: &mut impl Rng) -> Self {
        let flat = cfg.feature_len();
        let hidden = cfg.hidden;
        let classes = cfg.num_classes;
        ModelState {
            f_r_w: kaiming_uniform(rng, &[flat, hidden], flat),
            f_r_b: Tensor::zeros(&[hidden]),
            f_e_w: kaiming_uniform(rng, &[flat, hidden], flat),
            f_e_b: Tensor::zeros(&[hidden]),
            c_w: kaiming_uniform(rng, &[hidden, classes], hidden),
            c_b: Tensor::zeros(&[classes]),
        }
    }

    pub fn bind(&self, tape: &mut Tape<F>, trainable: bool) -> Result<ModelVars> {
        Ok(ModelVars {
            f_r_w: bind_param(tape, &self.f_r_w, trainable)?,
            f_r_b: bind_param(tape, &self.f_r_b, trainable)?,
            f_e_w: bind_param(tape, &self.f_e_w, trainable)?,
            f_e_b: bind_param(tape, &self.f_e_b, trainable)?,
            c_w: bind_param(tape, &self.c_w, trainable)?,
            c_b: bind_param(tape, &self.c_b, trainable)?,
        })
    }

    pub fn named_params(&self) -> Vec<(String, &Tensor<F>)> {
        vec![
            ("model.f_r.weight".into(), &self.f_r_w),
            ("model.f_r.bias".into(), &self.f_r_b),
            ("model.f_e.weight".into(), &self.f_e_w),
            ("model.f_e.bias".into(), &self.f_e_b),
            ("model.c.weight".into(), &self.c_w),
            ("model.c.bias".into(), &self.c_b),
        ]
    }

    pub fn named_params_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        vec![
            ("model.f_r.weight".into(), &mut self.f_r_w),
            ("model.f_r.bias".into(), &mut self.f_r_b),
            ("model.f_e.weight".into(), &mut self.f_e_w),
            ("model.f_e.bias".into(), &mut self.f_e_b),
            ("model.c.weight".into(), &mut self.c_w),
            ("model.c.bias".into(), &mut self.c_b),
        ]
    }

    /// Elementwise affine blend `(1-alpha)*self + alpha*other`.
    ///
    /// `alpha == 0` and `alpha == 1` reproduce the respective side bitwise.
    pub fn blend(&self, other: &ModelState<F>, alpha: f64) -> Result<ModelState<F>> {
        Ok(ModelState {
            f_r_w: blend_tensors(&self.f_r_w, &other.f_r_w, alpha)?,
            f_r_b: blend_tensors(&self.f_r_b, &other.f_r_b, alpha)?,
            f_e_w: blend_tensors(&self.f_e_w, &other.f_e_w, alpha)?,
            f_e_b: blend_tensors(&self.f_e_b, &other.f_e_b, alpha)?,
            c_w: blend_tensors(&self.c_w, &other.c_w, alpha)?,
            c_b: blend_tensors(&self.c_b, &other.c_b, alpha)?,
        })
    }
}

impl ModelVars {
    /// r-path: `flatten(f') -> F_R -> relu -> C`.
    pub fn classify_r_path<F: Scalar>(&self, tape: &mut Tape<F>, f_prime: Var) -> Result<Var> {
        let flat = tape.flatten(f_prime)?;
        let h = tape.matmul(flat, self.f_r_w)?;
        let h = tape.bias_add(h, self.f_r_b)?;
        let h = tape.relu(h)?;
        let logits = tape.matmul(h, self.c_w)?;
        tape.bias_add(logits, self.c_b)
    }

    /// e-path: `extractor(e) -> flatten -> F_E -> relu -> C`.
    pub fn classify_e_path<F: Scalar>(
        &self,
        tape: &mut Tape<F>,
        extractor: &ExtractorVars,
        e: Var,
    ) -> Result<Var> {
        let x = extractor.forward(tape, e)?;
        let flat = tape.flatten(x)?;
        let h = tape.matmul(flat, self.f_e_w)?;
        let h = tape.bias_add(h, self.f_e_b)?;
        let h = tape.relu(h)?;
        let logits = tape.matmul(h, self.c_w)?;
        tape.bias_add(logits, self.c_b)
    }

    pub fn collect_grads<F: Scalar>(
        &self,
        grads: &Gradients<F>,
        out: &mut GradMap<F>,
    ) -> Result<()> {
        collect(out, grads, "model.f_r.weight", self.f_r_w)?;
        collect(out, grads, "model.f_r.bias", self.f_r_b)?;
        collect(out, grads, "model.f_e.weight", self.f_e_w)?;
        collect(out, grads, "model.f_e.bias", self.f_e_b)?;
        collect(out, grads, "model.c.weight", self.c_w)?;
        collect(out, grads, "model.c.bias", self.c_b)
    }
}

/// Inference-mode r-path logits: images through encoder, attention, and
/// the classifier, with nothing recorded for gradients.
pub fn r_path_logits<F: Scalar>(
    encoder: &Encoder<F>,
    sa: &SelfAttention<F>,
    model: &ModelState<F>,
    images: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let x = tape.constant(images.clone())?;
    let f = encode(encoder, &mut tape, x, false)?;
    let fp = self_attention(sa, &mut tape, f, false)?;
    let m_vars = model.bind(&mut tape, false)?;
    let logits = m_vars.classify_r_path(&mut tape, fp)?;
    Ok(tape.value(logits).clone())
}

/// Inference-mode e-path logits over stored feature maps.
pub fn e_path_logits<F: Scalar>(
    extractor: &Extractor<F>,
    model: &ModelState<F>,
    features: &Tensor<F>,
) -> Result<Tensor<F>> {
    let mut tape = Tape::new();
    let e = tape.constant(features.clone())?;
    let ex_vars = extractor.bind(&mut tape, false)?;
    let m_vars = model.bind(&mut tape, false)?;
    let logits = m_vars.classify_e_path(&mut tape, &ex_vars, e)?;
    Ok(tape.value(logits).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff, max_relative_error};
    use crate::oracles;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_cfg() -> NetConfig {
        NetConfig {
            input_h: 8,
            input_w: 8,
            input_c: 1,
            conv1_channels: 4,
            feature_channels: 8,
            hidden: 8,
            num_classes: 3,
            extractor: ExtractorKind::Identity,
            sa_residual: false,
        }
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let numel: usize = shape.iter().product();
        let data: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn default_feature_shape_is_4x4x16() {
        let cfg = NetConfig::new(10);
        assert_eq!(cfg.feature_shape(), (4, 4, 16));
        assert_eq!(cfg.feature_len(), 256);
    }

    #[test]
    fn encoder_zero_image_gives_zero_features() {
        let cfg = NetConfig::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 16, 16, 1])).unwrap();
        let f = encode(&enc, &mut tape, x, false).unwrap();
        assert_eq!(tape.value(f).shape(), &[2, 4, 4, 16]);
        assert!(tape.value(f).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn encoder_rejects_wrong_input_size() {
        let cfg = NetConfig::new(10);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Encoder::<f32>::new(&cfg, &mut rng);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 8, 8, 1])).unwrap();
        assert!(encode(&enc, &mut tape, x, false).is_err());
    }

    #[test]
    fn encoder_rows_independent() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let enc = Encoder::<f64>::new(&cfg, &mut rng);
        let one = rand_tensor(&mut rng, &[1, 8, 8, 1]);
        let mut two = Tensor::zeros(&[2, 8, 8, 1]);
        two.data_mut()[..64].copy_from_slice(one.data());
        two.data_mut()[64..].copy_from_slice(one.data());

        let mut tape = Tape::new();
        let x = tape.constant(two).unwrap();
        let f = encode(&enc, &mut tape, x, false).unwrap();
        let out = tape.value(f);
        let half = out.numel() / 2;
        assert_eq!(out.data()[..half], out.data()[half..]);
    }

    #[test]
    fn attention_uniform_when_projections_zero() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sa = SelfAttention::<f64>::new(&cfg, &mut rng);
        sa.w_k = Tensor::zeros(sa.w_k.shape());
        sa.w_q = Tensor::zeros(sa.w_q.shape());
        let f = rand_tensor(&mut rng, &[1, 2, 2, 8]);
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        let vars = sa.bind(&mut tape, false).unwrap();
        let (_, attn) = vars.forward_with_map(&mut tape, fv).unwrap();
        for v in tape.value(attn).data() {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rejects_single_position() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let sa = SelfAttention::<f64>::new(&cfg, &mut rng);
        let mut tape = Tape::new();
        let f = tape.constant(Tensor::zeros(&[1, 1, 1, 8])).unwrap();
        assert!(self_attention(&sa, &mut tape, f, false).is_err());
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let sa = SelfAttention::<f64>::new(&cfg, &mut rng);
        let f = rand_tensor(&mut rng, &[2, 2, 2, 8]);
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        let vars = sa.bind(&mut tape, false).unwrap();
        let (_, attn) = vars.forward_with_map(&mut tape, fv).unwrap();
        for row in tape.value(attn).data().chunks(4) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
            assert!(row.iter().all(|v| *v >= 0.0));
        }
    }

    #[test]
    fn attention_matches_double_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let d = rng.gen_range(4..=16usize);
            let mut cfg = small_cfg();
            cfg.feature_channels = d;
            let sa = SelfAttention::<f64>::new(&cfg, &mut rng);
            let b = rng.gen_range(1..=3usize);
            let h = rng.gen_range(2..=4usize);
            let w = rng.gen_range(2..=4usize);
            let f = rand_tensor(&mut rng, &[b, h, w, d]);

            let mut tape = Tape::new();
            let fv = tape.constant(f.clone()).unwrap();
            let out = self_attention(&sa, &mut tape, fv, false).unwrap();

            let expected = oracles::naive_self_attention(&sa, &f).unwrap();
            for (a, e) in tape.value(out).data().iter().zip(expected.data()) {
                assert!((a - e).abs() <= 1e-6, "attention mismatch: {a} vs {e}");
            }
        }
    }

    #[test]
    fn attention_batch_permutation_equivariant() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let sa = SelfAttention::<f64>::new(&cfg, &mut rng);
        let f = rand_tensor(&mut rng, &[3, 2, 2, 8]);
        let perm = [2usize, 0, 1];
        let fp = f.gather_rows(&perm).unwrap();

        let run = |input: Tensor<f64>| {
            let mut tape = Tape::new();
            let fv = tape.constant(input).unwrap();
            let out = self_attention(&sa, &mut tape, fv, false).unwrap();
            tape.value(out).clone()
        };
        let a = run(f);
        let b = run(fp);
        let a_perm = a.gather_rows(&perm).unwrap();
        assert_eq!(a_perm.data(), b.data());
    }

    #[test]
    fn zero_classifier_weights_give_zero_logits() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut m = ModelState::<f64>::new(&cfg, &mut rng);
        m.c_w = Tensor::zeros(m.c_w.shape());
        m.c_b = Tensor::zeros(m.c_b.shape());
        let f = rand_tensor(&mut rng, &[2, 2, 2, 8]);
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        let vars = m.bind(&mut tape, false).unwrap();
        let logits = vars.classify_r_path(&mut tape, fv).unwrap();
        assert!(tape.value(logits).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn paths_differ_unless_input_layers_equal() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let m = ModelState::<f64>::new(&cfg, &mut rng);
        let extractor = Extractor::<f64>::new(&cfg, &mut rng);
        let f = rand_tensor(&mut rng, &[1, 2, 2, 8]);

        let mut tape = Tape::new();
        let fv = tape.constant(f.clone()).unwrap();
        let mv = m.bind(&mut tape, false).unwrap();
        let ev = extractor.bind(&mut tape, false).unwrap();
        let r = mv.classify_r_path(&mut tape, fv).unwrap();
        let e = mv.classify_e_path(&mut tape, &ev, fv).unwrap();
        assert_ne!(tape.value(r).data(), tape.value(e).data());

        // With F_R == F_E and identity extractor the paths agree.
        let mut same = m.clone();
        same.f_e_w = same.f_r_w.clone();
        same.f_e_b = same.f_r_b.clone();
        let mut tape = Tape::new();
        let fv = tape.constant(f).unwrap();
        let mv = same.bind(&mut tape, false).unwrap();
        let ev = extractor.bind(&mut tape, false).unwrap();
        let r = mv.classify_r_path(&mut tape, fv).unwrap();
        let e = mv.classify_e_path(&mut tape, &ev, fv).unwrap();
        assert_eq!(tape.value(r).data(), tape.value(e).data());
    }

    #[test]
    fn r_path_gradients_match_finite_diff() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let enc = Encoder::<f64>::new(&cfg, &mut rng);
        let sa = SelfAttention::<f64>::new(&cfg, &mut rng);
        let m = ModelState::<f64>::new(&cfg, &mut rng);
        let images = rand_tensor(&mut rng, &[2, 8, 8, 1]);
        let labels = [0usize, 2];

        // Analytic gradients through the whole r-path.
        let mut tape = Tape::new();
        let x = tape.constant(images.clone()).unwrap();
        let ev = enc.bind(&mut tape, true).unwrap();
        let sv = sa.bind(&mut tape, true).unwrap();
        let mv = m.bind(&mut tape, true).unwrap();
        let f = ev.forward(&mut tape, x).unwrap();
        let fp = sv.forward(&mut tape, f).unwrap();
        let logits = mv.classify_r_path(&mut tape, fp).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();

        // Finite differences over one tensor from each component.
        let checks: Vec<(&Tensor<f64>, Var)> = vec![
            (&enc.conv2_w, ev.conv2_w),
            (&sa.w_q, sv.w_q),
            (&m.f_r_w, mv.f_r_w),
            (&m.c_b, mv.c_b),
        ];
        for (param, var) in checks {
            let numeric = finite_diff(
                |probe| {
                    let mut enc2 = enc.clone();
                    let mut sa2 = sa.clone();
                    let mut m2 = m.clone();
                    if param.shape() == enc2.conv2_w.shape() && std::ptr::eq(param, &enc.conv2_w) {
                        enc2.conv2_w = probe.clone();
                    } else if std::ptr::eq(param, &sa.w_q) {
                        sa2.w_q = probe.clone();
                    } else if std::ptr::eq(param, &m.f_r_w) {
                        m2.f_r_w = probe.clone();
                    } else {
                        m2.c_b = probe.clone();
                    }
                    let mut tape = Tape::new();
                    let x = tape.constant(images.clone())?;
                    let f = encode(&enc2, &mut tape, x, false)?;
                    let fp = self_attention(&sa2, &mut tape, f, false)?;
                    let mv = m2.bind(&mut tape, false)?;
                    let logits = mv.classify_r_path(&mut tape, fp)?;
                    let loss = tape.cross_entropy(logits, &labels)?;
                    Ok(tape.value(loss).item())
                },
                param,
                1e-5,
            )
            .unwrap();
            let analytic = grads.get(var).unwrap();
            let err = max_relative_error(analytic, &numeric, 1e-6);
            assert!(err < 1e-4, "r-path gradient check failed: rel err {err}");
        }
    }

    #[test]
    fn e_path_gradients_match_finite_diff() {
        let mut cfg = small_cfg();
        cfg.extractor = ExtractorKind::Conv1x1;
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let extractor = Extractor::<f64>::new(&cfg, &mut rng);
        let m = ModelState::<f64>::new(&cfg, &mut rng);
        let e = rand_tensor(&mut rng, &[2, 2, 2, 8]);
        let labels = [1usize, 0];

        let mut tape = Tape::new();
        let evv = tape.constant(e.clone()).unwrap();
        let xv = extractor.bind(&mut tape, true).unwrap();
        let mv = m.bind(&mut tape, true).unwrap();
        let logits = mv.classify_e_path(&mut tape, &xv, evv).unwrap();
        let loss = tape.cross_entropy(logits, &labels).unwrap();
        let grads = tape.backward(loss).unwrap();

        let numeric = finite_diff(
            |probe| {
                let mut ex2 = extractor.clone();
                ex2.w = Some(probe.clone());
                let mut tape = Tape::new();
                let evv = tape.constant(e.clone())?;
                let xv = ex2.bind(&mut tape, false)?;
                let mv = m.bind(&mut tape, false)?;
                let logits = mv.classify_e_path(&mut tape, &xv, evv)?;
                let loss = tape.cross_entropy(logits, &labels)?;
                Ok(tape.value(loss).item())
            },
            extractor.w.as_ref().unwrap(),
            1e-5,
        )
        .unwrap();
        let analytic = grads.get(xv.w.unwrap()).unwrap();
        assert!(max_relative_error(analytic, &numeric, 1e-6) < 1e-4);

        // F_R is on the tape but unreachable from the e-path loss.
        assert!(grads.get(mv.f_r_w).unwrap().data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn blend_identities() {
        let cfg = small_cfg();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let a = ModelState::<f32>::new(&cfg, &mut rng);
        let b = ModelState::<f32>::new(&cfg, &mut rng);
        assert_eq!(a.blend(&b, 0.0).unwrap(), a);
        assert_eq!(a.blend(&b, 1.0).unwrap(), b);
        let half = a.blend(&a, 0.5).unwrap();
        for (x, y) in half.f_r_w.data().iter().zip(a.f_r_w.data()) {
            assert!((x - y).abs() <= f32::EPSILON * y.abs());
        }
    }

    #[test]
    fn blend_rejects_structure_mismatch() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = ModelState::<f32>::new(&small_cfg(), &mut rng);
        let mut other_cfg = small_cfg();
        other_cfg.hidden = 4;
        let b = ModelState::<f32>::new(&other_cfg, &mut rng);
        assert!(matches!(a.blend(&b, 0.5), Err(Error::StructureMismatch { .. })));
    }

    #[test]
    fn config_validation_catches_tiny_features() {
        let mut cfg = NetConfig::new(10);
        cfg.input_h = 4; // 4 -> 2 -> 1: single row of positions
        cfg.input_w = 4;
        assert!(cfg.validate().is_err());
        assert!(NetConfig::new(10).validate().is_ok());
    }
}
