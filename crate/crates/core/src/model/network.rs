use std::time::{Duration, Instant};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{ConcatMode, HyperFeature, InitScheme, Mode, ModelConfig, ModelError, Proposal, BACKBONE_BLOCKS};
use crate::anchors::generate_anchors;
use crate::geom::{clip_to_image, decode_delta, nms, BBox, BoxDelta, Detection};
use crate::tensor::{BatchNormMode, Element, Graph, NodeId, ParamStore, Tensor};

/// How a parameter is initialized; also fixes its role in a checkpoint.
#[derive(Clone, Copy, Debug, PartialEq)]
pub(crate) enum ParamKind {
    Weight { fan_in: usize, he: bool },
    Bias,
    Gamma,
    Beta,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

/// Name, shape and kind of every parameter the config implies, in the
/// canonical (checkpoint) order.
pub(crate) fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    let mut out = Vec::new();
    let he = cfg.dcn_init == InitScheme::He;
    let deepest = *cfg.fused_blocks().iter().max().expect("validated");
    let mut c_in = 3;
    for b in 1..=deepest {
        let c_out = cfg.backbone_widths[b - 1];
        out.push((format!("dcn.block{b}.weight"), vec![c_out, c_in, 3, 3], ParamKind::Weight { fan_in: c_in * 9, he }));
        out.push((format!("dcn.block{b}.bias"), vec![c_out], ParamKind::Bias));
        c_in = c_out;
    }
    for b in cfg.fused_blocks() {
        let c = cfg.backbone_widths[b - 1];
        for (suffix, kind) in [
            ("gamma", ParamKind::Gamma),
            ("beta", ParamKind::Beta),
            ("running_mean", ParamKind::RunningMean),
            ("running_var", ParamKind::RunningVar),
        ] {
            out.push((format!("dcn.norm{b}.{suffix}"), vec![c], kind));
        }
    }
    let hyper = cfg.hyper_channels();
    let k = cfg.head_kernel;
    let r2 = cfg.roi_size * cfg.roi_size;
    let mut layer = |prefix: &str, w_shape: Vec<usize>| {
        let fan_in = w_shape[1..].iter().product();
        let n_out = w_shape[0];
        out.push((format!("{prefix}.weight"), w_shape, ParamKind::Weight { fan_in, he: false }));
        out.push((format!("{prefix}.bias"), vec![n_out], ParamKind::Bias));
    };
    layer("pn.conv", vec![cfg.pn_conv_filters, hyper, k, k]);
    layer("pn.fc", vec![cfg.pn_fc_dim, cfg.pn_conv_filters * r2]);
    layer("pn.head", vec![5, cfg.pn_fc_dim]);
    layer("ftn.conv", vec![cfg.ftn_conv_filters, hyper, k, k]);
    layer("ftn.fc", vec![cfg.ftn_fc_dim, cfg.ftn_conv_filters * r2]);
    layer("ftn.head", vec![5, cfg.ftn_head_input()]);
    out
}

/// Detection-time knobs.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DetectOptions {
    pub score_threshold: f64,
    pub nms_threshold: f64,
    /// Run the FTN; when false, PN proposals are the final output.
    pub refine: bool,
}

impl DetectOptions {
    pub fn from_config(cfg: &ModelConfig) -> Self {
        Self {
            score_threshold: cfg.final_score_threshold,
            nms_threshold: cfg.ftn_nms_threshold,
            refine: true,
        }
    }
}

/// Wall-clock split of one detect call.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct StageTimes {
    pub dcn: Duration,
    pub pn: Duration,
    pub ftn: Duration,
}

impl StageTimes {
    pub fn total(&self) -> Duration {
        self.dcn + self.pn + self.ftn
    }
}

/// Graph handles produced by the backbone.
pub struct DcnNodes<T: Element> {
    pub hyper: NodeId,
    /// Per fused block: batch mean and variance observed in train mode.
    pub batch_stats: Vec<(usize, Vec<T>, Vec<T>)>,
}

/// Graph handles of the PN over every anchor.
#[derive(Clone, Copy, Debug)]
pub struct PnNodes {
    /// Post-ReLU fc activations, `[A, pn_fc_dim]`.
    pub fc: NodeId,
    pub deltas: NodeId,
    pub logits: NodeId,
}

/// Graph handles of the FTN over a proposal list.
#[derive(Clone, Copy, Debug)]
pub struct FtnNodes {
    /// Head input, `[P, ftn_head_input]`.
    pub features: NodeId,
    pub deltas: NodeId,
    pub logits: NodeId,
}

/// A configured detector: parameters plus its anchor lattice.
#[derive(Clone, Debug)]
pub struct Model<T: Element = f32> {
    config: ModelConfig,
    params: ParamStore<T>,
    anchors: Vec<BBox>,
}

impl Model<f32> {
    /// Fresh model with Gaussian weights, zero biases, unit gammas.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for (name, shape, kind) in param_layout(&config) {
            let n: usize = shape.iter().product();
            let data: Vec<f32> = match kind {
                ParamKind::Weight { fan_in, he } => {
                    let std = if he { (2.0 / fan_in as f64).sqrt() } else { config.init_std };
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| normal.sample(&mut rng) as f32).collect()
                }
                ParamKind::Bias | ParamKind::Beta | ParamKind::RunningMean => vec![0.0; n],
                ParamKind::Gamma | ParamKind::RunningVar => vec![1.0; n],
            };
            params.insert(name, Tensor::new(shape, data)?, kind.trainable());
        }
        Ok(Self::from_parts(config, params))
    }
}

/// Floor on the per-channel deviation used to standardize input images, so
/// flat images stay finite.
const MIN_PIXEL_STD: f64 = 0.02;

fn t<T: Element>(v: f64) -> T {
    T::from_f64_lossy(v)
}

impl<T: Element> Model<T> {
    pub(crate) fn from_parts(config: ModelConfig, params: ParamStore<T>) -> Self {
        let anchors = generate_anchors(&config.anchor_spec());
        Self { config, params, anchors }
    }

    /// Adopt externally supplied parameters after checking them against the
    /// config-derived layout.
    pub fn from_params(config: ModelConfig, params: ParamStore<T>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = param_layout(&config);
        for (name, shape, _) in &layout {
            let p = params.by_name(name).ok_or_else(|| ModelError::MissingParameter(name.clone()))?;
            if p.value.shape() != shape.as_slice() {
                return Err(ModelError::ShapeMismatch {
                    name: name.clone(),
                    expected: shape.clone(),
                    found: p.value.shape().to_vec(),
                });
            }
        }
        if let Some(extra) = params.iter().find(|p| !layout.iter().any(|(n, _, _)| *n == p.name)) {
            return Err(ModelError::UnexpectedParameter(extra.name.clone()));
        }
        Ok(Self::from_parts(config, params))
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn anchors(&self) -> &[BBox] {
        &self.anchors
    }

    pub fn cast<U: Element>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            params: self.params.cast(),
            anchors: self.anchors.clone(),
        }
    }

    /// Number of trainable scalars.
    pub fn parameter_count(&self) -> usize {
        self.params.trainable_elements()
    }

    fn p(&self, g: &mut Graph<T>, name: &str) -> NodeId {
        g.param_by_name(&self.params, name)
            .unwrap_or_else(|| panic!("parameter {name} absent from a validated model"))
    }

    fn values(&self, name: &str) -> &[T] {
        self.params.by_name(name).expect("validated parameter").value.data()
    }

    /// Standardizes each channel of the `[0,1]` image to zero mean and unit
    /// deviation and zero-pads to the backbone's pooling multiple.
    ///
    /// Training normalizes with single-image batch statistics, so the
    /// running averages used at inference only fit images whose overall
    /// brightness matches the recent training images. Removing the
    /// per-image level and contrast up front keeps night and day scenes on
    /// the same footing.
    fn prepare_image(&self, image: &Tensor<T>) -> Result<Tensor<T>, ModelError> {
        let (w, h) = (self.config.image_w as usize, self.config.image_h as usize);
        if image.shape() != [3, h, w] {
            return Err(ModelError::ImageShape {
                found: image.shape().to_vec(),
                h: self.config.image_h,
                w: self.config.image_w,
            });
        }
        let (ph, pw) = self.config.padded_size();
        let mut data = vec![T::zero(); 3 * ph * pw];
        for c in 0..3 {
            let plane = &image.data()[c * h * w..][..h * w];
            let n = (h * w) as f64;
            let mean = plane.iter().map(|v| v.to_f64().expect("float")).sum::<f64>() / n;
            let var = plane.iter().map(|v| (v.to_f64().expect("float") - mean).powi(2)).sum::<f64>() / n;
            let (mean, inv) = (t::<T>(mean), t::<T>(1.0 / var.sqrt().max(MIN_PIXEL_STD)));
            for y in 0..h {
                let src = &plane[y * w..][..w];
                let dst = &mut data[(c * ph + y) * pw..][..w];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = (s - mean) * inv;
                }
            }
        }
        Ok(Tensor::new(vec![3, ph, pw], data)?)
    }

    /// Backbone, per-layer resampling to the hyper resolution, per-layer
    /// batch normalization and channel concatenation.
    pub fn build_dcn(&self, g: &mut Graph<T>, image: &Tensor<T>, mode: Mode) -> Result<DcnNodes<T>, ModelError> {
        let cfg = &self.config;
        let fused = cfg.fused_blocks();
        let deepest = *fused.iter().max().expect("validated");
        let (fh, fw) = cfg.feature_size();
        let mut x = g.input(self.prepare_image(image)?);
        let mut parts = Vec::with_capacity(fused.len());
        let mut batch_stats = Vec::new();
        for b in 1..=deepest {
            let w = self.p(g, &format!("dcn.block{b}.weight"));
            let bias = self.p(g, &format!("dcn.block{b}.bias"));
            x = g.conv2d(x, w, bias, 1, 1)?;
            x = g.relu(x);
            if fused.contains(&b) {
                let aligned = g.resample_bilinear(x, fh, fw)?;
                let gamma = self.p(g, &format!("dcn.norm{b}.gamma"));
                let beta = self.p(g, &format!("dcn.norm{b}.beta"));
                let bn_mode = match mode {
                    Mode::Train => BatchNormMode::Train,
                    Mode::Infer => BatchNormMode::Infer {
                        mean: self.values(&format!("dcn.norm{b}.running_mean")),
                        var: self.values(&format!("dcn.norm{b}.running_var")),
                    },
                };
                let out = g.batchnorm(aligned, gamma, beta, bn_mode, cfg.bn_eps)?;
                if let Some((m, v)) = out.batch_stats {
                    batch_stats.push((b, m, v));
                }
                parts.push(out.node);
            }
            if b < BACKBONE_BLOCKS && b < deepest {
                x = g.maxpool2(x)?;
            }
        }
        let hyper = if parts.len() == 1 { parts[0] } else { g.concat_channels(&parts)? };
        Ok(DcnNodes { hyper, batch_stats })
    }

    /// Fold train-mode batch statistics into the running averages.
    pub fn update_running_stats(&mut self, stats: &[(usize, Vec<T>, Vec<T>)]) {
        let m: T = t(self.config.bn_momentum);
        for (b, mean, var) in stats {
            for (suffix, batch) in [("running_mean", mean), ("running_var", var)] {
                let id = self.params.id(&format!("dcn.norm{b}.{suffix}")).expect("validated parameter");
                for (r, &v) in self.params.get_mut(id).value.data_mut().iter_mut().zip(batch) {
                    *r = m * *r + (T::one() - m) * v;
                }
            }
        }
    }

    fn head_conv(&self, g: &mut Graph<T>, hyper: NodeId, prefix: &str) -> Result<NodeId, ModelError> {
        let w = self.p(g, &format!("{prefix}.conv.weight"));
        let b = self.p(g, &format!("{prefix}.conv.bias"));
        let x = g.conv2d(hyper, w, b, 1, self.config.head_kernel / 2)?;
        Ok(if self.config.head_relu { g.relu(x) } else { x })
    }

    fn pooled_fc(&self, g: &mut Graph<T>, map: NodeId, boxes: &[BBox], prefix: &str) -> Result<NodeId, ModelError> {
        let r = self.config.roi_size;
        let pooled = g.roi_maxpool(map, boxes, self.config.feature_stride(), r, r)?;
        let per_box = g.value(pooled).len() / boxes.len();
        let flat = g.reshape(pooled, &[boxes.len(), per_box])?;
        let w = self.p(g, &format!("{prefix}.fc.weight"));
        let b = self.p(g, &format!("{prefix}.fc.bias"));
        let fc = g.linear(flat, w, b)?;
        Ok(g.relu(fc))
    }

    fn head(&self, g: &mut Graph<T>, x: NodeId, prefix: &str) -> Result<(NodeId, NodeId), ModelError> {
        let w = self.p(g, &format!("{prefix}.head.weight"));
        let b = self.p(g, &format!("{prefix}.head.bias"));
        let out = g.linear(x, w, b)?;
        Ok((g.slice_cols(out, 0..4)?, g.slice_cols(out, 4..5)?))
    }

    /// conv6_1, ROI pooling of every anchor, fc and the 5-d head.
    pub fn build_pn(&self, g: &mut Graph<T>, hyper: NodeId) -> Result<PnNodes, ModelError> {
        let map = self.head_conv(g, hyper, "pn")?;
        let fc = self.pooled_fc(g, map, &self.anchors, "pn")?;
        let (deltas, logits) = self.head(g, fc, "pn")?;
        Ok(PnNodes { fc, deltas, logits })
    }

    /// conv6_2, ROI pooling of the proposal boxes, fc, optional concatenation
    /// with the proposals' PN features (`[P, pn_fc_dim]`), and the head.
    pub fn build_ftn(&self, g: &mut Graph<T>, hyper: NodeId, boxes: &[BBox], pn_features: Option<NodeId>) -> Result<FtnNodes, ModelError> {
        let map = self.head_conv(g, hyper, "ftn")?;
        let fc = self.pooled_fc(g, map, boxes, "ftn")?;
        let features = match self.config.concat_mode {
            ConcatMode::FtnOnly => fc,
            ConcatMode::PnPlusFtn => {
                let pn = pn_features.ok_or_else(|| ModelError::Config("pn-plus-ftn concat needs PN features".into()))?;
                g.concat_cols(fc, pn)?
            }
        };
        let (deltas, logits) = self.head(g, features, "ftn")?;
        Ok(FtnNodes { features, deltas, logits })
    }

    /// Decoded, clipped boxes and logistic scores for each reference box.
    pub fn decode(&self, g: &Graph<T>, deltas: NodeId, logits: NodeId, references: &[BBox]) -> Vec<Detection> {
        let d = g.value(deltas).data();
        let l = g.value(logits).data();
        references
            .iter()
            .enumerate()
            .map(|(i, reference)| {
                let v: Vec<f64> = d[4 * i..4 * i + 4].iter().map(|x| x.to_f64().expect("float")).collect();
                let bbox = decode_delta(&BoxDelta::from_slice(&v), reference);
                let logit = l[i].to_f64().expect("float");
                Detection::new(clip_to_image(&bbox, self.config.image_w, self.config.image_h), crate::tensor::sigmoid(logit))
            })
            .collect()
    }

    /// PN outputs as proposals; with `filter`, the inference path (score
    /// threshold, NMS, top-k).
    pub fn pn_proposals(&self, g: &Graph<T>, pn: &PnNodes, filter: bool) -> Vec<Proposal> {
        let dets = self.decode(g, pn.deltas, pn.logits, &self.anchors);
        let indices: Vec<usize> = if filter {
            let cfg = &self.config;
            let passing: Vec<usize> = (0..dets.len()).filter(|&i| dets[i].score >= cfg.pn_score_threshold).collect();
            let candidates: Vec<Detection> = passing.iter().map(|&i| dets[i]).collect();
            let mut kept = crate::geom::nms_indices(&candidates, cfg.pn_nms_threshold);
            kept.truncate(cfg.pn_keep);
            kept.into_iter().map(|k| passing[k]).collect()
        } else {
            (0..dets.len()).collect()
        };
        let fc = g.value(pn.fc);
        let dim = fc.shape()[1];
        indices
            .into_iter()
            .map(|i| Proposal {
                bbox: dets[i].bbox,
                score: dets[i].score,
                pn_feature: Tensor::from_vec(fc.data()[i * dim..(i + 1) * dim].iter().map(|v| v.to_f32().expect("float")).collect()),
                anchor_index: i,
            })
            .collect()
    }

    pub fn dcn_forward(&self, image: &Tensor<T>, mode: Mode) -> Result<HyperFeature<T>, ModelError> {
        let mut g = Graph::new();
        let dcn = self.build_dcn(&mut g, image, mode)?;
        Ok(HyperFeature {
            map: g.value(dcn.hyper).clone(),
            stride: self.config.feature_stride(),
        })
    }

    /// In [`Mode::Train`] every anchor yields one proposal, in anchor order.
    pub fn pn_forward(&self, hyper: &HyperFeature<T>, mode: Mode) -> Result<Vec<Proposal>, ModelError> {
        let mut g = Graph::new();
        let h = g.input(hyper.map.clone());
        let pn = self.build_pn(&mut g, h)?;
        Ok(self.pn_proposals(&g, &pn, mode == Mode::Infer))
    }

    /// Refines proposals one-to-one; no filtering.
    pub fn ftn_forward(&self, hyper: &HyperFeature<T>, proposals: &[Proposal]) -> Result<Vec<Detection>, ModelError> {
        if proposals.is_empty() {
            return Ok(Vec::new());
        }
        let mut g = Graph::new();
        let h = g.input(hyper.map.clone());
        let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
        let pn_features = match self.config.concat_mode {
            ConcatMode::FtnOnly => None,
            ConcatMode::PnPlusFtn => {
                let dim = self.config.pn_fc_dim;
                let mut data = Vec::with_capacity(proposals.len() * dim);
                for p in proposals {
                    if p.pn_feature.len() != dim {
                        return Err(ModelError::Config(format!("proposal feature of length {} for pn_fc_dim {dim}", p.pn_feature.len())));
                    }
                    data.extend(p.pn_feature.data().iter().map(|&v| t::<T>(v as f64)));
                }
                Some(g.input(Tensor::new(vec![proposals.len(), dim], data)?))
            }
        };
        let ftn = self.build_ftn(&mut g, h, &boxes, pn_features)?;
        Ok(self.decode(&g, ftn.deltas, ftn.logits, &boxes))
    }

    pub fn detect(&self, image: &Tensor<T>, opts: &DetectOptions) -> Result<Vec<Detection>, ModelError> {
        self.detect_timed(image, opts).map(|(d, _)| d)
    }

    /// Full pipeline with per-stage wall-clock times.
    pub fn detect_timed(&self, image: &Tensor<T>, opts: &DetectOptions) -> Result<(Vec<Detection>, StageTimes), ModelError> {
        let mut times = StageTimes::default();
        let mut g = Graph::new();
        let start = Instant::now();
        let dcn = self.build_dcn(&mut g, image, Mode::Infer)?;
        times.dcn = start.elapsed();

        let start = Instant::now();
        let pn = self.build_pn(&mut g, dcn.hyper)?;
        let proposals = self.pn_proposals(&g, &pn, true);
        times.pn = start.elapsed();

        let start = Instant::now();
        let raw = if !opts.refine || proposals.is_empty() {
            proposals.iter().map(|p| Detection::new(p.bbox, p.score)).collect()
        } else {
            let boxes: Vec<BBox> = proposals.iter().map(|p| p.bbox).collect();
            let rows: Vec<usize> = proposals.iter().map(|p| p.anchor_index).collect();
            let pn_features = match self.config.concat_mode {
                ConcatMode::FtnOnly => None,
                ConcatMode::PnPlusFtn => Some(g.gather_rows(pn.fc, &rows)?),
            };
            let ftn = self.build_ftn(&mut g, dcn.hyper, &boxes, pn_features)?;
            self.decode(&g, ftn.deltas, ftn.logits, &boxes)
        };
        let kept: Vec<Detection> = raw.into_iter().filter(|d| d.score >= opts.score_threshold).collect();
        let out = nms(&kept, opts.nms_threshold);
        times.ftn = start.elapsed();
        Ok((out, times))
    }
}
