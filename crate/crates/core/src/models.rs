//! Teacher and student networks: shared image backbone, context and depth
//! heads, lift-splat pooling into the BEV plane, a center heatmap head and
//! the fine-depth decoder.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::bev_masks::{GridSpec, HeightFilter};
use crate::error::{Error, Result};
use crate::geometry::{frustum_points, CameraRig, FrustumSpec};
use crate::metrics::Detection;
use crate::tensor::{Graph, ParamId, ParamStore, Tensor, Var, DROPPED};

/// Prior probability used to initialise the heatmap bias.
const HEATMAP_PRIOR: f64 = 0.1;
/// Initial fine-depth output in meters.
const FINE_DEPTH_INIT: f64 = 10.0;
const FINE_DEPTH_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Teacher,
    Student,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub role: Role,
    /// Output channels of the three backbone stages (strides 2, 2, 1).
    pub backbone_widths: [usize; 3],
    pub context_channels: usize,
    pub depth_bins: usize,
    pub image_h: usize,
    pub image_w: usize,
    pub feature_h: usize,
    pub feature_w: usize,
    /// Hidden widths of the fine-depth decoder; one 3x3 conv per entry,
    /// followed by a 1x1 projection to depth.
    pub decoder_widths: Vec<usize>,
    pub head_width: usize,
    pub classes: usize,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.context_channels < 2 || self.depth_bins < 2 {
            return Err(Error::Config(format!(
                "context channels and depth bins must be >= 2 (C={}, D={})",
                self.context_channels, self.depth_bins
            )));
        }
        if self.backbone_widths.contains(&0) || self.head_width == 0 || self.classes == 0 {
            return Err(Error::Config("layer widths must be positive".into()));
        }
        if self.decoder_widths.is_empty() || self.decoder_widths.contains(&0) {
            return Err(Error::Config(
                "fine-depth decoder needs at least one hidden layer".into(),
            ));
        }
        if self.image_h != 4 * self.feature_h || self.image_w != 4 * self.feature_w {
            return Err(Error::Config(format!(
                "backbone downsamples by 4: image {}x{} does not match features {}x{}",
                self.image_h, self.image_w, self.feature_h, self.feature_w
            )));
        }
        Ok(())
    }

    /// Exact number of scalars a model with this spec holds.
    pub fn param_count(&self) -> usize {
        let conv = |cin: usize, cout: usize, k: usize| cout * cin * k * k + cout;
        let [w1, w2, w3] = self.backbone_widths;
        let c = self.context_channels;
        let mut n = conv(INPUT_CHANNELS, w1, 3) + conv(w1, w2, 3) + conv(w2, w3, 3);
        n += conv(w3, c, 1) + conv(w3, self.depth_bins, 1);
        let mut prev = c;
        for &h in &self.decoder_widths {
            n += conv(prev, h, 3);
            prev = h;
        }
        n += conv(prev, 1, 1);
        n += conv(c, self.head_width, 3) + conv(self.head_width, self.classes, 1);
        n
    }
}

/// Checks the teacher/student capacity relation: widths at least as large
/// stage-wise, a deeper fine-depth decoder, and strictly more parameters.
pub fn validate_pair(teacher: &ModelSpec, student: &ModelSpec) -> Result<()> {
    teacher.validate()?;
    student.validate()?;
    if teacher.role != Role::Teacher || student.role != Role::Student {
        return Err(Error::Config("teacher/student roles are swapped".into()));
    }
    let shared = |a: &ModelSpec| {
        (
            a.context_channels,
            a.depth_bins,
            a.feature_h,
            a.feature_w,
            a.image_h,
            a.image_w,
            a.classes,
        )
    };
    if shared(teacher) != shared(student) {
        return Err(Error::Config(
            "teacher and student must share C, D, feature/image size and classes".into(),
        ));
    }
    if teacher
        .backbone_widths
        .iter()
        .zip(&student.backbone_widths)
        .any(|(t, s)| t < s)
    {
        return Err(Error::Config("teacher backbone narrower than student".into()));
    }
    if teacher.decoder_widths.len() <= student.decoder_widths.len() {
        return Err(Error::Config("teacher fine-depth decoder must be deeper".into()));
    }
    if teacher.param_count() <= student.param_count() {
        return Err(Error::Config(format!(
            "teacher has {} parameters, student {}",
            teacher.param_count(),
            student.param_count()
        )));
    }
    Ok(())
}

/// RGB plus two normalised pixel-coordinate channels.
const INPUT_CHANNELS: usize = 5;

#[derive(Clone, Copy, Debug)]
struct Conv {
    w: ParamId,
    b: ParamId,
    stride: usize,
    pad: usize,
}

#[derive(Clone, Debug)]
struct Layout {
    backbone: [Conv; 3],
    context: Conv,
    depth: Conv,
    decoder: Vec<Conv>,
    decoder_out: Conv,
    head_hidden: Conv,
    head_out: Conv,
}

#[derive(Clone, Debug)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: ParamStore,
    layout: Layout,
}

/// Graph handles of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardVars {
    /// `(K, C, Hf, Wf)`
    pub features: Var,
    /// `(K, D, Hf, Wf)`
    pub depth_logits: Var,
    /// `(K, D, Hf, Wf)`, softmax over `D`.
    pub depth_prob: Var,
    /// `(K, Hf, Wf)`, meters.
    pub fine_depth: Var,
    /// `(C, He, We)`
    pub bev: Var,
    /// `(classes, He, We)`
    pub heatmap_logits: Var,
    /// `(classes, He, We)`, in `(0, 1)`.
    pub heatmap: Var,
}

/// Detached copy of the forward values.
#[derive(Clone, Debug, PartialEq)]
pub struct ForwardOutput {
    pub features: Tensor,
    pub depth_logits: Tensor,
    pub depth_prob: Tensor,
    pub fine_depth: Tensor,
    pub bev: Tensor,
    pub heatmap: Tensor,
}

impl ForwardOutput {
    pub fn from_graph(g: &Graph, v: &ForwardVars) -> Self {
        Self {
            features: g.value(v.features).clone(),
            depth_logits: g.value(v.depth_logits).clone(),
            depth_prob: g.value(v.depth_prob).clone(),
            fine_depth: g.value(v.fine_depth).clone(),
            bev: g.value(v.bev).clone(),
            heatmap: g.value(v.heatmap).clone(),
        }
    }
}

fn inverse_softplus(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

impl Model {
    /// Builds a model with deterministic He-normal weights drawn from `seed`.
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self::build(spec, |shape, fan_in| {
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            Tensor::from_fn(shape, |_| normal.sample(&mut rng))
        })
    }

    /// All weights and biases zero.
    pub fn zeros(spec: ModelSpec) -> Result<Self> {
        let mut m = Self::build(spec, |shape, _| Tensor::zeros(shape))?;
        for p in m.params.iter_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        Ok(m)
    }

    fn build(spec: ModelSpec, mut init: impl FnMut(&[usize], usize) -> Tensor) -> Result<Self> {
        spec.validate()?;
        let mut params = ParamStore::new();
        let mut conv = |name: &str, cin: usize, cout: usize, k: usize, stride: usize, bias: f64| {
            let w = params.add(format!("{name}.weight"), init(&[cout, cin, k, k], cin * k * k));
            let b = params.add(format!("{name}.bias"), Tensor::full(&[cout], bias));
            Conv {
                w,
                b,
                stride,
                pad: k / 2,
            }
        };
        let [w1, w2, w3] = spec.backbone_widths;
        let c = spec.context_channels;
        let backbone = [
            conv("backbone.0", INPUT_CHANNELS, w1, 3, 2, 0.0),
            conv("backbone.1", w1, w2, 3, 2, 0.0),
            conv("backbone.2", w2, w3, 3, 1, 0.0),
        ];
        let context = conv("context", w3, c, 1, 1, 0.0);
        let depth = conv("depth", w3, spec.depth_bins, 1, 1, 0.0);
        let mut decoder = Vec::new();
        let mut prev = c;
        for (i, &h) in spec.decoder_widths.iter().enumerate() {
            decoder.push(conv(&format!("fine_depth.{i}"), prev, h, 3, 1, 0.0));
            prev = h;
        }
        let decoder_out = conv("fine_depth.out", prev, 1, 1, 1, inverse_softplus(FINE_DEPTH_INIT));
        let head_hidden = conv("head.0", c, spec.head_width, 3, 1, 0.0);
        let prior = (HEATMAP_PRIOR / (1.0 - HEATMAP_PRIOR)).ln();
        let head_out = conv("head.out", spec.head_width, spec.classes, 1, 1, prior);
        let layout = Layout {
            backbone,
            context,
            depth,
            decoder,
            decoder_out,
            head_hidden,
            head_out,
        };
        debug_assert_eq!(params.scalar_count(), spec.param_count());
        Ok(Self { spec, params, layout })
    }

    pub fn param_count(&self) -> usize {
        self.params.scalar_count()
    }

    fn conv(&self, g: &mut Graph, vars: &[Var], layer: Conv, x: Var) -> Result<Var> {
        g.conv2d(x, vars[layer.w.0], Some(vars[layer.b.0]), layer.stride, layer.pad)
    }

    /// Full forward pass over `images: (K, 3, H, W)` with values in `[0, 1]`.
    /// `vars` comes from `self.params.bind(..)` on the same graph.
    pub fn forward(
        &self,
        g: &mut Graph,
        vars: &[Var],
        images: &Tensor,
        projector: &BevProjector,
    ) -> Result<ForwardVars> {
        let s = &self.spec;
        let shape = images.shape();
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s.image_h || shape[3] != s.image_w {
            return Err(Error::shape("model forward", shape, &[0, 3, s.image_h, s.image_w]));
        }
        let k = shape[0];
        if projector.cameras != k
            || projector.depth_bins != s.depth_bins
            || projector.plane != s.feature_h * s.feature_w
        {
            return Err(Error::shape(
                "model forward projector",
                &[projector.cameras, projector.depth_bins, projector.plane],
                &[k, s.depth_bins, s.feature_h * s.feature_w],
            ));
        }
        let input = g.constant(with_coordinates(images));
        let mut x = input;
        for layer in self.layout.backbone {
            let y = self.conv(g, vars, layer, x)?;
            x = g.relu(y);
        }
        let features = self.conv(g, vars, self.layout.context, x)?;
        let depth_logits = self.conv(g, vars, self.layout.depth, x)?;
        let depth_prob = g.softmax(depth_logits, 1)?;

        let mut d = features;
        for &layer in &self.layout.decoder {
            let y = self.conv(g, vars, layer, d)?;
            d = g.relu(y);
        }
        let raw = self.conv(g, vars, self.layout.decoder_out, d)?;
        let sp = g.softplus(raw);
        let sp = g.affine(sp, 1.0, FINE_DEPTH_FLOOR);
        let fine_depth = g.reshape(sp, &[k, s.feature_h, s.feature_w])?;

        let bev = lift_splat(g, features, depth_prob, projector)?;
        let (rows, cols) = (projector.grid.rows, projector.grid.cols);
        let bev4 = g.reshape(bev, &[1, s.context_channels, rows, cols])?;
        let h = self.conv(g, vars, self.layout.head_hidden, bev4)?;
        let h = g.relu(h);
        let logits = self.conv(g, vars, self.layout.head_out, h)?;
        let heatmap_logits = g.reshape(logits, &[s.classes, rows, cols])?;
        let heatmap = g.sigmoid(heatmap_logits);
        Ok(ForwardVars {
            features,
            depth_logits,
            depth_prob,
            fine_depth,
            bev,
            heatmap_logits,
            heatmap,
        })
    }

    /// Forward pass with frozen weights, returning plain tensors.
    pub fn infer(&self, images: &Tensor, projector: &BevProjector) -> Result<ForwardOutput> {
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, false);
        let out = self.forward(&mut g, &vars, images, projector)?;
        Ok(ForwardOutput::from_graph(&g, &out))
    }
}

/// Appends normalised `u` and `v` coordinate planes to `(K, 3, H, W)` images
/// and rescales the color channels to roughly zero mean.
fn with_coordinates(images: &Tensor) -> Tensor {
    let s = images.shape();
    let (k, h, w) = (s[0], s[2], s[3]);
    let plane = h * w;
    let src = images.data();
    let mut out = Vec::with_capacity(k * INPUT_CHANNELS * plane);
    for kk in 0..k {
        out.extend(
            src[kk * 3 * plane..(kk + 1) * 3 * plane]
                .iter()
                .map(|v| (v - 0.5) * 4.0),
        );
        out.extend((0..plane).map(|i| 2.0 * ((i % w) as f64 + 0.5) / w as f64 - 1.0));
        out.extend((0..plane).map(|i| 2.0 * ((i / w) as f64 + 0.5) / h as f64 - 1.0));
    }
    Tensor::new(&[k, INPUT_CHANNELS, h, w], out).expect("coordinate planes")
}

/// Precomputed BEV cell of every frustum point of every camera.
#[derive(Clone, Debug)]
pub struct BevProjector {
    pub grid: GridSpec,
    pub cameras: usize,
    pub depth_bins: usize,
    pub plane: usize,
    /// Flat cell index per frustum point, camera-major then `(d, h, w)`;
    /// [`DROPPED`] marks points outside the grid or height band.
    pub cells: Arc<Vec<u32>>,
}

impl BevProjector {
    pub fn new(rig: &CameraRig, frustum: &FrustumSpec, grid: &GridSpec, filter: &HeightFilter) -> Result<Self> {
        grid.validate()?;
        let mut cells = Vec::with_capacity(rig.num_cameras() * frustum.num_points());
        for k in 0..rig.num_cameras() {
            for p in frustum_points(rig, frustum, k)? {
                let idx = if p.z >= filter.z_min && p.z < filter.z_max {
                    grid.flat_index(p.x, p.y).map_or(DROPPED, |i| i as u32)
                } else {
                    DROPPED
                };
                cells.push(idx);
            }
        }
        Ok(Self {
            grid: *grid,
            cameras: rig.num_cameras(),
            depth_bins: frustum.num_bins(),
            plane: frustum.feature_h * frustum.feature_w,
            cells: Arc::new(cells),
        })
    }

    pub fn kept_points(&self) -> usize {
        self.cells.iter().filter(|&&c| c != DROPPED).count()
    }
}

/// Lifts `features: (K, C, Hf, Wf)` by `depth: (K, D, Hf, Wf)` into the
/// frustum and sum-pools it into a `(C, rows, cols)` BEV map.
pub fn lift_splat(g: &mut Graph, features: Var, depth: Var, projector: &BevProjector) -> Result<Var> {
    g.lift_splat(
        features,
        depth,
        projector.cells.clone(),
        projector.grid.rows,
        projector.grid.cols,
    )
}

/// Peaks of a `(classes, rows, cols)` heatmap: cells that equal the maximum
/// of their 3x3 neighbourhood and exceed `threshold`, best first.
pub fn detect_decode(heatmap: &Tensor, grid: &GridSpec, threshold: f64, max_dets: usize) -> Result<Vec<Detection>> {
    let s = heatmap.shape();
    if s.len() != 3 || s[1] != grid.rows || s[2] != grid.cols {
        return Err(Error::shape("detect_decode", s, &[0, grid.rows, grid.cols]));
    }
    let (classes, rows, cols) = (s[0], s[1], s[2]);
    let v = heatmap.data();
    let mut dets = Vec::new();
    for c in 0..classes {
        let plane = &v[c * rows * cols..(c + 1) * rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let score = plane[i * cols + j];
                if !(score > threshold) {
                    continue;
                }
                let mut is_peak = true;
                'n: for di in -1i64..=1 {
                    for dj in -1i64..=1 {
                        let (ii, jj) = (i as i64 + di, j as i64 + dj);
                        if ii < 0 || jj < 0 || ii >= rows as i64 || jj >= cols as i64 {
                            continue;
                        }
                        if plane[ii as usize * cols + jj as usize] > score {
                            is_peak = false;
                            break 'n;
                        }
                    }
                }
                if is_peak {
                    let (x, y) = grid.cell_center(i, j);
                    dets.push(Detection { class: c, x, y, score });
                }
            }
        }
    }
    dets.sort_by(|a, b| b.score.total_cmp(&a.score));
    dets.truncate(max_dets);
    Ok(dets)
}
