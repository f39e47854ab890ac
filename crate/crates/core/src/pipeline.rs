//! Run configuration, dataset generation, training loops, evaluation and the
//! ablation harness behind the `lgkd` command.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bev_masks::{gaussian_smooth, split_view_masks, voxelize_occupancy, BevGrid, GridSpec, HeightFilter};
use crate::distill::{
    bev_distill_loss, center_focal_loss, coarse_depth_loss, depth_bin_bce_loss, depth_distill_loss, fine_depth_loss,
    scale_invariant_depth_loss, soft_label_loss, total_distill_loss, LossReport, LossWeights,
};
use crate::error::{Error, Result};
use crate::geometry::{CameraRig, FrustumSpec};
use crate::metrics::{
    eval_depth, eval_detection, eval_range_banded, metrics_csv, metrics_table, DepthEvalResult, DetEvalResult,
    FrameEval, DEPTH_MAX_RANGE, MATCH_RADII, RANGE_BANDS,
};
use crate::models::{detect_decode, validate_pair, BevProjector, ForwardOutput, Model, ModelSpec, Role};
use crate::synthworld::{
    generate_scene, list_split, load_sample, render_scene, scene_dir, scene_seed, write_scene, LidarPattern,
    PlacementSpec, Sample, Split,
};
use crate::tensor::{load_checkpoint, save_checkpoint, AdamW, Graph, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Dataset directory; defaults to `<out>/dataset`.
    pub dir: Option<PathBuf>,
    pub train: usize,
    pub val: usize,
    pub boxes_min: usize,
    pub boxes_max: usize,
    pub classes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            dir: None,
            train: 200,
            val: 50,
            boxes_min: 4,
            boxes_max: 9,
            classes: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RigConfig {
    pub cameras: usize,
    pub image_w: usize,
    pub image_h: usize,
    pub hfov_deg: f64,
    pub mount_radius: f64,
    pub mount_height: f64,
    pub lidar_height: f64,
    pub lidar_yaw_deg: f64,
    pub lidar_rings: usize,
    pub lidar_min_elevation_deg: f64,
    pub lidar_max_elevation_deg: f64,
    pub lidar_azimuth_step_deg: f64,
    pub lidar_max_range: f64,
}

impl Default for RigConfig {
    fn default() -> Self {
        Self {
            cameras: 6,
            image_w: 176,
            image_h: 64,
            hfov_deg: 70.0,
            mount_radius: 0.4,
            mount_height: 1.6,
            lidar_height: 1.8,
            lidar_yaw_deg: -90.0,
            lidar_rings: 16,
            lidar_min_elevation_deg: -16.0,
            lidar_max_elevation_deg: 2.0,
            lidar_azimuth_step_deg: 0.5,
            lidar_max_range: 80.0,
        }
    }
}

impl RigConfig {
    pub fn build(&self) -> Result<CameraRig> {
        let lidar = crate::geometry::LidarMount {
            rotation: crate::geometry::yaw_rotation(self.lidar_yaw_deg.to_radians()),
            translation: nalgebra::Vector3::new(0.0, 0.0, self.lidar_height),
        };
        CameraRig::surround(
            self.cameras,
            self.image_w,
            self.image_h,
            self.hfov_deg.to_radians(),
            self.mount_radius,
            self.mount_height,
            lidar,
        )
    }

    pub fn lidar_pattern(&self) -> LidarPattern {
        LidarPattern::uniform(
            self.lidar_rings,
            self.lidar_min_elevation_deg,
            self.lidar_max_elevation_deg,
            self.lidar_azimuth_step_deg,
            self.lidar_max_range,
        )
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrustumConfig {
    pub feature_h: usize,
    pub feature_w: usize,
    pub bins: usize,
    pub d_min: f64,
    pub d_max: f64,
}

impl Default for FrustumConfig {
    fn default() -> Self {
        Self {
            feature_h: 16,
            feature_w: 44,
            bins: 16,
            d_min: 1.0,
            d_max: 60.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridConfig {
    pub half_extent: f64,
    pub cells: usize,
}

impl Default for GridConfig {
    fn default() -> Self {
        Self {
            half_extent: 32.0,
            cells: 64,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MaskConfig {
    pub sigma: f64,
    pub z_min: f64,
    pub z_max: f64,
    pub remove_ground: bool,
    pub ground_clearance: f64,
}

impl Default for MaskConfig {
    fn default() -> Self {
        let f = HeightFilter::default();
        Self {
            sigma: 2.0,
            z_min: f.z_min,
            z_max: f.z_max,
            remove_ground: f.remove_ground,
            ground_clearance: f.ground_clearance,
        }
    }
}

impl MaskConfig {
    pub fn filter(&self) -> HeightFilter {
        HeightFilter {
            z_min: self.z_min,
            z_max: self.z_max,
            remove_ground: self.remove_ground,
            ground_clearance: self.ground_clearance,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub backbone: [usize; 3],
    pub decoder: Vec<usize>,
    pub head_width: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub context_channels: usize,
    pub teacher: NetConfig,
    pub student: NetConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            context_channels: 16,
            teacher: NetConfig {
                backbone: [32, 64, 96],
                decoder: vec![16, 16],
                head_width: 32,
            },
            student: NetConfig {
                backbone: [8, 16, 24],
                decoder: vec![16],
                head_width: 16,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub teacher_epochs: usize,
    pub student_epochs: usize,
    /// Samples whose gradients are accumulated per optimizer step.
    pub batch_size: usize,
    /// Cosine decay of the learning rate down to this fraction.
    pub final_lr_fraction: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            lr: 2e-3,
            weight_decay: 1e-7,
            teacher_epochs: 30,
            student_epochs: 40,
            batch_size: 1,
            final_lr_fraction: 0.05,
        }
    }
}

/// Which distillation terms are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Ablation {
    pub soft: bool,
    pub depth: bool,
    pub bev: bool,
    pub foreground_mask: bool,
    pub view_mask: bool,
}

impl Default for Ablation {
    fn default() -> Self {
        Self::FULL
    }
}

impl Ablation {
    pub const BASE: Self = Self {
        soft: false,
        depth: false,
        bev: false,
        foreground_mask: true,
        view_mask: true,
    };
    pub const FULL: Self = Self {
        soft: true,
        depth: true,
        bev: true,
        foreground_mask: true,
        view_mask: true,
    };

    pub fn any(&self) -> bool {
        self.soft || self.depth || self.bev
    }

    /// The five rows of the component ablation, in table order.
    pub fn component_rows() -> [(&'static str, Self); 5] {
        let with = |soft, depth, bev| Self {
            soft,
            depth,
            bev,
            ..Self::FULL
        };
        [
            ("base", Self::BASE),
            ("+soft", with(true, false, false)),
            ("+soft+depth", with(true, true, false)),
            ("+soft+depth+bev", Self::FULL),
            ("+depth+bev", with(false, true, true)),
        ]
    }

    /// BEV distillation variants differing only in how the feature loss is
    /// masked: unmasked, foreground only, foreground split by view.
    pub fn guidance_rows() -> [(&'static str, Self); 3] {
        let bev = |foreground_mask, view_mask| Self {
            foreground_mask,
            view_mask,
            ..Self::FULL
        };
        [
            ("direct", bev(false, false)),
            ("foreground", bev(true, false)),
            ("foreground+view", bev(true, true)),
        ]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub threshold: f64,
    pub max_dets: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.2,
            max_dets: 60,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out: Option<PathBuf>,
    pub data: DataConfig,
    pub rig: RigConfig,
    pub frustum: FrustumConfig,
    pub grid: GridConfig,
    pub masks: MaskConfig,
    pub model: ModelConfig,
    pub loss: LossWeights,
    pub optim: OptimConfig,
    pub ablation: Ablation,
    pub eval: EvalConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if self.data.boxes_min > self.data.boxes_max {
            return Err(Error::Config("data.boxes_min exceeds data.boxes_max".into()));
        }
        if self.optim.batch_size == 0 || !(self.optim.lr > 0.0) {
            return Err(Error::Config("optim.batch_size and optim.lr must be positive".into()));
        }
        if !(self.masks.sigma > 0.0) {
            return Err(Error::Config("masks.sigma must be positive".into()));
        }
        validate_pair(&self.model_spec(Role::Teacher), &self.model_spec(Role::Student))?;
        self.rig.build().map_err(|e| Error::Config(e.to_string()))?;
        self.frustum_spec().map_err(|e| Error::Config(e.to_string()))?;
        self.grid_spec().map_err(|e| Error::Config(e.to_string()))?;
        Ok(())
    }

    pub fn model_spec(&self, role: Role) -> ModelSpec {
        let net = match role {
            Role::Teacher => &self.model.teacher,
            Role::Student => &self.model.student,
        };
        ModelSpec {
            role,
            backbone_widths: net.backbone,
            context_channels: self.model.context_channels,
            depth_bins: self.frustum.bins,
            image_h: self.rig.image_h,
            image_w: self.rig.image_w,
            feature_h: self.frustum.feature_h,
            feature_w: self.frustum.feature_w,
            decoder_widths: net.decoder.clone(),
            head_width: net.head_width,
            classes: self.data.classes,
        }
    }

    pub fn frustum_spec(&self) -> Result<FrustumSpec> {
        let f = &self.frustum;
        FrustumSpec::uniform(f.feature_h, f.feature_w, f.bins, f.d_min, f.d_max)
    }

    pub fn grid_spec(&self) -> Result<GridSpec> {
        GridSpec::square(self.grid.half_extent, self.grid.cells)
    }

    pub fn out_dir(&self, cli: Option<&Path>) -> PathBuf {
        cli.map(Path::to_path_buf)
            .or_else(|| self.out.clone())
            .unwrap_or_else(|| PathBuf::from("lgkd-out"))
    }

    pub fn data_dir(&self, out: &Path) -> PathBuf {
        self.data.dir.clone().unwrap_or_else(|| out.join("dataset"))
    }
}

/// Writes the dataset and returns the written file paths.
pub fn gen_data(cfg: &RunConfig, root: &Path) -> Result<Vec<PathBuf>> {
    let rig = cfg.rig.build()?;
    let grid = cfg.grid_spec()?;
    let lidar = cfg.rig.lidar_pattern();
    let placement = PlacementSpec::new(grid);
    let scenes = root.join("scenes");
    if scenes.exists() {
        std::fs::remove_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
    }
    std::fs::create_dir_all(&scenes).map_err(|e| Error::io(&scenes, e))?;
    let mut paths = Vec::new();
    for index in 0..cfg.data.train + cfg.data.val {
        let split = if index < cfg.data.train {
            Split::Train
        } else {
            Split::Val
        };
        let seed = scene_seed(cfg.seed, index);
        let span = (cfg.data.boxes_max - cfg.data.boxes_min + 1) as u64;
        let n_boxes = cfg.data.boxes_min + (seed % span) as usize;
        let scene = generate_scene(seed, n_boxes, cfg.data.classes, &placement, &rig, &lidar)?;
        let files = render_scene(&scene, split)?;
        paths.extend(write_scene(&scene_dir(root, index), &files, &rig)?);
    }
    Ok(paths)
}

/// A loaded sample together with its LiDAR-derived distillation masks.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub sample: Sample,
    /// Binary occupancy `M`.
    pub occupancy: BevGrid,
    /// Smoothed foreground mask `M_g`.
    pub foreground: BevGrid,
    /// Per-camera view masks.
    pub views: Vec<BevGrid>,
    pub depth_bins: Vec<Option<usize>>,
}

impl PreparedSample {
    /// Masks weighting the BEV feature loss under `ablation`.
    pub fn bev_masks(&self, ablation: &Ablation) -> Vec<BevGrid> {
        let spec = self.foreground.spec;
        match (ablation.foreground_mask, ablation.view_mask) {
            (true, true) => self.views.clone(),
            (true, false) => vec![self.foreground.clone()],
            (false, false) => vec![BevGrid::filled(spec, 1.0)],
            (false, true) => {
                let ones = BevGrid::filled(spec, 1.0);
                split_view_masks(&ones, &self.sample.rig).expect("rig validated at load")
            }
        }
    }
}

/// Dataset, geometry and configuration shared by all training runs.
pub struct Experiment {
    pub cfg: RunConfig,
    pub frustum: FrustumSpec,
    pub grid: GridSpec,
    pub projector: BevProjector,
    pub train: Vec<PreparedSample>,
    pub val: Vec<PreparedSample>,
}

fn prepare(sample: Sample, cfg: &RunConfig, frustum: &FrustumSpec, grid: &GridSpec) -> Result<PreparedSample> {
    let occupancy = voxelize_occupancy(&sample.cloud, &sample.rig, grid, &cfg.masks.filter())?;
    let foreground = gaussian_smooth(&occupancy, cfg.masks.sigma)?;
    let views = split_view_masks(&foreground, &sample.rig)?;
    let depth_bins = sample
        .depth_gt
        .iter()
        .map(|&d| (d > 0.0).then(|| frustum.nearest_bin(d)))
        .collect();
    Ok(PreparedSample {
        sample,
        occupancy,
        foreground,
        views,
        depth_bins,
    })
}

impl Experiment {
    pub fn load(cfg: &RunConfig, data_dir: &Path) -> Result<Self> {
        let frustum = cfg.frustum_spec()?;
        let grid = cfg.grid_spec()?;
        let load_split = |split| -> Result<Vec<PreparedSample>> {
            list_split(data_dir, split)?
                .into_iter()
                .map(|i| {
                    let s = load_sample(&scene_dir(data_dir, i), i, &frustum, &grid, cfg.data.classes)?;
                    prepare(s, cfg, &frustum, &grid)
                })
                .collect()
        };
        let train = load_split(Split::Train)?;
        let val = load_split(Split::Val)?;
        let rig = match train.first().or(val.first()) {
            Some(s) => s.sample.rig.clone(),
            None => cfg.rig.build()?,
        };
        if train.iter().chain(&val).any(|s| s.sample.rig != rig) {
            return Err(Error::Config("scenes disagree on rig calibration".into()));
        }
        let projector = BevProjector::new(&rig, &frustum, &grid, &cfg.masks.filter())?;
        Ok(Self {
            cfg: cfg.clone(),
            frustum,
            grid,
            projector,
            train,
            val,
        })
    }

    pub fn split(&self, split: Split) -> &[PreparedSample] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
        }
    }

    fn task_loss(
        &self,
        g: &mut Graph,
        out: &crate::models::ForwardVars,
        s: &PreparedSample,
        r: &mut LossReport,
    ) -> Result<Var> {
        let w = &self.cfg.loss;
        let focal = center_focal_loss(g, out.heatmap, &s.sample.heatmap, w.focal_alpha, w.focal_beta)?;
        let depth_gt = Tensor::new(g.shape(out.fine_depth), s.sample.depth_gt.clone())?;
        let sil = scale_invariant_depth_loss(g, out.fine_depth, &depth_gt)?;
        let bce = depth_bin_bce_loss(g, out.depth_prob, &s.depth_bins)?;
        r.focal = g.value(focal).item()?;
        r.sil = g.value(sil).item()?;
        r.depth_bce = g.value(bce).item()?;
        let a = g.add(focal, sil)?;
        let t = g.add(a, bce)?;
        r.task = g.value(t).item()?;
        Ok(t)
    }

    fn lr_at(&self, step: usize, total: usize) -> f64 {
        let o = &self.cfg.optim;
        if total <= 1 {
            return o.lr;
        }
        let progress = step as f64 / (total - 1) as f64;
        let f =
            o.final_lr_fraction + (1.0 - o.final_lr_fraction) * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        o.lr * f
    }

    /// Trains `model` on the train split for `epochs`. `teacher` supplies
    /// cached teacher outputs per train sample when distilling.
    fn fit(
        &self,
        model: &mut Model,
        epochs: usize,
        seed: u64,
        teacher: Option<(&[ForwardOutput], Ablation)>,
        mut on_step: impl FnMut(usize, &LossReport),
    ) -> Result<Vec<LossReport>> {
        let n = self.train.len();
        let batch = self.cfg.optim.batch_size;
        let steps_per_epoch = n.div_ceil(batch);
        let total_steps = steps_per_epoch * epochs;
        let mut opt = AdamW::new(self.cfg.optim.lr, self.cfg.optim.weight_decay);
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5E_ED0F_5A3D);
        let mut order: Vec<usize> = (0..n).collect();
        let mut reports = Vec::with_capacity(total_steps);
        let mut step = 0;
        for _ in 0..epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(batch) {
                let mut grads = model.params.zero_grads();
                let mut report = LossReport::default();
                for &i in chunk {
                    let r = self.sample_step(model, i, teacher, &mut grads)?;
                    accumulate_report(&mut report, &r, chunk.len());
                }
                if !report.total.is_finite() {
                    return Err(Error::Numerical(format!("non-finite loss at step {step}: {report:?}")));
                }
                if chunk.len() > 1 {
                    let inv = 1.0 / chunk.len() as f64;
                    for g in &mut grads {
                        g.data_mut().iter_mut().for_each(|v| *v *= inv);
                    }
                }
                opt.lr = self.lr_at(step, total_steps);
                opt.step(&mut model.params, &grads).map_err(|e| match e {
                    Error::Numerical(m) => Error::Numerical(format!("step {step}: {m}")),
                    other => other,
                })?;
                on_step(step, &report);
                reports.push(report);
                step += 1;
            }
        }
        Ok(reports)
    }

    fn sample_step(
        &self,
        model: &Model,
        index: usize,
        teacher: Option<(&[ForwardOutput], Ablation)>,
        grads: &mut [Tensor],
    ) -> Result<LossReport> {
        let s = &self.train[index];
        let mut g = Graph::new();
        let vars = model.params.bind(&mut g, true);
        let out = model.forward(&mut g, &vars, &s.sample.images, &self.projector)?;
        let mut report = LossReport::default();
        let mut total = self.task_loss(&mut g, &out, s, &mut report)?;
        if let Some((cache, ablation)) = teacher.filter(|(_, a)| a.any()) {
            let t = &cache[index];
            let w = &self.cfg.loss;
            let zero = g.constant(Tensor::scalar(0.0));
            let soft = if ablation.soft {
                let v = soft_label_loss(&mut g, out.heatmap, &t.heatmap, w.soft_distance)?;
                report.soft = g.value(v).item()?;
                v
            } else {
                zero
            };
            let bev = if ablation.bev {
                let v = bev_distill_loss(&mut g, out.bev, &t.bev, &s.bev_masks(&ablation))?;
                report.bev = g.value(v).item()?;
                v
            } else {
                zero
            };
            let depth = if ablation.depth {
                let cd = coarse_depth_loss(&mut g, out.depth_logits, &t.depth_logits, w.temperature)?;
                let fd = fine_depth_loss(&mut g, out.fine_depth, &t.fine_depth)?;
                report.coarse = g.value(cd).item()?;
                report.fine = g.value(fd).item()?;
                let d = depth_distill_loss(&mut g, cd, fd, w.alpha)?;
                report.depth = g.value(d).item()?;
                d
            } else {
                zero
            };
            let kd = total_distill_loss(&mut g, soft, bev, depth, w)?;
            total = g.add(total, kd)?;
        }
        report.total = g.value(total).item()?;
        if !report.total.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss on sample {}: {report:?}",
                s.sample.index
            )));
        }
        let mut gr = g.backward(total)?;
        for (acc, v) in grads.iter_mut().zip(&vars) {
            if let Some(t) = gr.take(*v) {
                acc.add_assign(&t);
            }
        }
        Ok(report)
    }

    pub fn train_teacher(
        &self,
        seed: u64,
        on_step: impl FnMut(usize, &LossReport),
    ) -> Result<(Model, Vec<LossReport>)> {
        let mut model = Model::new(self.cfg.model_spec(Role::Teacher), seed_for(seed, Role::Teacher))?;
        let reports = self.fit(&mut model, self.cfg.optim.teacher_epochs, seed, None, on_step)?;
        Ok((model, reports))
    }

    /// Teacher outputs on every train sample, computed once with frozen
    /// weights.
    pub fn teacher_cache(&self, teacher: &Model) -> Result<Vec<ForwardOutput>> {
        self.train
            .iter()
            .map(|s| teacher.infer(&s.sample.images, &self.projector))
            .collect()
    }

    /// Trains a student from `init` (or a fresh seeded init). Without a
    /// teacher, or with every distillation switch off, this is the baseline.
    pub fn train_student(
        &self,
        seed: u64,
        init: Option<&Model>,
        teacher: Option<(&[ForwardOutput], Ablation)>,
        on_step: impl FnMut(usize, &LossReport),
    ) -> Result<(Model, Vec<LossReport>)> {
        let mut model = match init {
            Some(m) => m.clone(),
            None => Model::new(self.cfg.model_spec(Role::Student), seed_for(seed, Role::Student))?,
        };
        if let Some((cache, _)) = teacher {
            if cache.len() != self.train.len() {
                return Err(Error::Contract(format!(
                    "teacher cache has {} entries for {} train samples",
                    cache.len(),
                    self.train.len()
                )));
            }
        }
        let reports = self.fit(&mut model, self.cfg.optim.student_epochs, seed, teacher, on_step)?;
        Ok((model, reports))
    }

    pub fn evaluate(&self, model: &Model, split: Split) -> Result<EvalReport> {
        let samples = self.split(split);
        if samples.is_empty() {
            return Err(Error::Domain(format!("{} split is empty", split.as_str())));
        }
        let k = self.projector.cameras;
        let plane = self.frustum.feature_h * self.frustum.feature_w;
        let mut per_cam_pred = vec![Vec::new(); k];
        let mut per_cam_gt = vec![Vec::new(); k];
        let mut frames = Vec::with_capacity(samples.len());
        for s in samples {
            let out = model.infer(&s.sample.images, &self.projector)?;
            let depth = expected_depth(&out.depth_prob, &self.frustum.depth_bins);
            for kk in 0..k {
                per_cam_pred[kk].extend_from_slice(&depth[kk * plane..(kk + 1) * plane]);
                per_cam_gt[kk].extend_from_slice(&s.sample.depth_gt[kk * plane..(kk + 1) * plane]);
            }
            frames.push(FrameEval {
                preds: detect_decode(
                    &out.heatmap,
                    &self.grid,
                    self.cfg.eval.threshold,
                    self.cfg.eval.max_dets,
                )?,
                gts: s.sample.gt_boxes(),
            });
        }
        let per_camera = (0..k)
            .map(|kk| eval_depth(&per_cam_pred[kk], &per_cam_gt[kk], DEPTH_MAX_RANGE))
            .collect::<Result<Vec<_>>>()?;
        let depth = DepthEvalResult::average(&per_camera).expect("at least one camera");
        let detection = eval_detection(&frames, self.cfg.data.classes, &MATCH_RADII);
        let bands = eval_range_banded(&frames, self.cfg.data.classes, &MATCH_RADII, &RANGE_BANDS);
        Ok(EvalReport {
            depth,
            per_camera,
            detection,
            bands,
        })
    }
}

fn seed_for(seed: u64, role: Role) -> u64 {
    match role {
        Role::Teacher => seed.wrapping_mul(2).wrapping_add(0x7EAC),
        Role::Student => seed.wrapping_mul(2).wrapping_add(0x57D7),
    }
}

fn accumulate_report(acc: &mut LossReport, r: &LossReport, n: usize) {
    let w = 1.0 / n as f64;
    acc.focal += w * r.focal;
    acc.sil += w * r.sil;
    acc.depth_bce += w * r.depth_bce;
    acc.task += w * r.task;
    acc.soft += w * r.soft;
    acc.bev += w * r.bev;
    acc.coarse += w * r.coarse;
    acc.fine += w * r.fine;
    acc.depth += w * r.depth;
    acc.total += w * r.total;
}

/// Per-pixel expectation of the bin centers under `prob: (K, D, Hf, Wf)`.
pub fn expected_depth(prob: &Tensor, bins: &[f64]) -> Vec<f64> {
    let s = prob.shape();
    let (k, d, plane) = (s[0], s[1], s[2] * s[3]);
    let p = prob.data();
    let mut out = vec![0.0; k * plane];
    for kk in 0..k {
        for (dd, c) in bins.iter().enumerate().take(d) {
            let base = (kk * d + dd) * plane;
            for i in 0..plane {
                out[kk * plane + i] += p[base + i] * c;
            }
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// Average of the per-camera results.
    pub depth: DepthEvalResult,
    pub per_camera: Vec<DepthEvalResult>,
    pub detection: DetEvalResult,
    pub bands: Vec<(f64, Option<f64>)>,
}

impl EvalReport {
    pub fn per_camera_csv(&self) -> String {
        let mut s = String::from("camera,abs_rel,sq_rel,rmse,rmse_log,delta1,delta2,delta3\n");
        for (k, d) in self.per_camera.iter().enumerate() {
            let _ = writeln!(
                s,
                "{k},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
                d.abs_rel, d.sq_rel, d.rmse, d.rmse_log, d.delta1, d.delta2, d.delta3
            );
        }
        s
    }

    pub fn bands_csv(&self) -> String {
        let mut s = String::from("range_m,map\n");
        for (band, map) in &self.bands {
            match map {
                Some(m) => {
                    let _ = writeln!(s, "{band},{m:.6}");
                }
                None => {
                    let _ = writeln!(s, "{band},absent");
                }
            }
        }
        s
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn loss_csv(reports: &[LossReport]) -> String {
    let mut s = String::from(LossReport::CSV_HEADER);
    s.push('\n');
    for (i, r) in reports.iter().enumerate() {
        s.push_str(&r.csv_row(i));
        s.push('\n');
    }
    s
}

/// Hashes every file under `out` (except the manifest itself) into
/// `out/manifest.json`.
pub fn write_manifest(out: &Path) -> Result<PathBuf> {
    fn walk(dir: &Path, acc: &mut Vec<PathBuf>) -> Result<()> {
        let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        for entry in entries {
            let p = entry.map_err(|e| Error::io(dir, e))?.path();
            if p.is_dir() {
                walk(&p, acc)?;
            } else {
                acc.push(p);
            }
        }
        Ok(())
    }
    let mut files = Vec::new();
    walk(out, &mut files)?;
    let manifest = out.join("manifest.json");
    let mut map = BTreeMap::new();
    for f in files.into_iter().filter(|f| f != &manifest) {
        let bytes = std::fs::read(&f).map_err(|e| Error::io(&f, e))?;
        let rel = f.strip_prefix(out).unwrap_or(&f).to_string_lossy().replace('\\', "/");
        map.insert(rel, hex::encode(Sha256::digest(&bytes)));
    }
    let json = serde_json::json!({ "files": map });
    write_file(
        &manifest,
        serde_json::to_string_pretty(&json).expect("manifest serializes"),
    )?;
    Ok(manifest)
}

fn progress(label: &str, every: usize) -> impl FnMut(usize, &LossReport) + '_ {
    move |step, r| {
        if every > 0 && step % every == 0 {
            eprintln!("[{label}] step {step:>6}  task {:.4}  total {:.4}", r.task, r.total);
        }
    }
}

fn model_row(name: &str, report: &EvalReport) -> (String, DepthEvalResult, DetEvalResult) {
    (name.to_string(), report.depth, report.detection.clone())
}

/// Trains the teacher and writes its checkpoint, loss log and val metrics.
pub fn cmd_train_teacher(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let exp = Experiment::load(cfg, &cfg.data_dir(out))?;
    let (teacher, reports) = exp.train_teacher(cfg.seed, progress("teacher", 200))?;
    let ckpt = out.join("teacher.ckpt");
    write_file(&out.join("teacher_loss.csv"), loss_csv(&reports))?;
    save_checkpoint(&teacher.params, &ckpt)?;
    if !exp.val.is_empty() {
        let report = exp.evaluate(&teacher, Split::Val)?;
        let rows = [model_row("teacher", &report)];
        write_file(&out.join("teacher_metrics.csv"), metrics_csv(&rows))?;
        print!("{}", metrics_table(&rows));
    }
    write_manifest(out)?;
    Ok(ckpt)
}

pub fn cmd_train_student(cfg: &RunConfig, out: &Path, init: Option<&Path>) -> Result<PathBuf> {
    let exp = Experiment::load(cfg, &cfg.data_dir(out))?;
    let init = load_init(cfg, init)?;
    let (student, reports) = exp.train_student(cfg.seed, init.as_ref(), None, progress("student", 200))?;
    finish_student(&exp, out, "student", &student, &reports)
}

fn load_init(cfg: &RunConfig, init: Option<&Path>) -> Result<Option<Model>> {
    init.map(|p| {
        let mut m = Model::zeros(cfg.model_spec(Role::Student))?;
        load_checkpoint(&mut m.params, p)?;
        Ok(m)
    })
    .transpose()
}

fn finish_student(
    exp: &Experiment,
    out: &Path,
    name: &str,
    student: &Model,
    reports: &[LossReport],
) -> Result<PathBuf> {
    let ckpt = out.join(format!("{name}.ckpt"));
    save_checkpoint(&student.params, &ckpt)?;
    write_file(&out.join(format!("{name}_loss.csv")), loss_csv(reports))?;
    if !exp.val.is_empty() {
        let report = exp.evaluate(student, Split::Val)?;
        let rows = [model_row(name, &report)];
        write_file(&out.join(format!("{name}_metrics.csv")), metrics_csv(&rows))?;
        print!("{}", metrics_table(&rows));
    }
    write_manifest(out)?;
    Ok(ckpt)
}

fn load_teacher(cfg: &RunConfig, path: &Path) -> Result<Model> {
    let mut t = Model::zeros(cfg.model_spec(Role::Teacher))?;
    load_checkpoint(&mut t.params, path)?;
    Ok(t)
}

pub fn cmd_distill(cfg: &RunConfig, out: &Path, teacher_path: &Path, init: Option<&Path>) -> Result<PathBuf> {
    let exp = Experiment::load(cfg, &cfg.data_dir(out))?;
    let teacher = load_teacher(cfg, teacher_path)?;
    let cache = exp.teacher_cache(&teacher)?;
    let init = load_init(cfg, init)?;
    let (student, reports) = exp.train_student(
        cfg.seed,
        init.as_ref(),
        Some((&cache, cfg.ablation)),
        progress("distill", 200),
    )?;
    finish_student(&exp, out, "distilled", &student, &reports)
}

/// Runs the component ablation (and optionally the mask-guidance variants)
/// against one teacher, writing `ablation.csv` / `guidance.csv`.
pub fn cmd_ablate(cfg: &RunConfig, out: &Path, teacher_path: Option<&Path>, guidance: bool) -> Result<PathBuf> {
    let exp = Experiment::load(cfg, &cfg.data_dir(out))?;
    let teacher = match teacher_path {
        Some(p) => load_teacher(cfg, p)?,
        None => {
            let (t, reports) = exp.train_teacher(cfg.seed, progress("teacher", 200))?;
            save_checkpoint(&t.params, &out.join("teacher.ckpt"))?;
            write_file(&out.join("teacher_loss.csv"), loss_csv(&reports))?;
            t
        }
    };
    let cache = exp.teacher_cache(&teacher)?;
    let run_rows = |rows: &[(&'static str, Ablation)]| -> Result<Vec<(String, DepthEvalResult, DetEvalResult)>> {
        rows.iter()
            .map(|(name, ablation)| {
                let (m, _) = exp.train_student(cfg.seed, None, Some((&cache, *ablation)), progress(name, 0))?;
                let report = exp.evaluate(&m, Split::Val)?;
                eprintln!("[ablate] {name}: composite {:.4}", report.detection.composite);
                Ok(model_row(name, &report))
            })
            .collect()
    };
    let rows = run_rows(&Ablation::component_rows())?;
    let table = out.join("ablation.csv");
    write_file(&table, metrics_csv(&rows))?;
    print!("{}", metrics_table(&rows));
    if guidance {
        let rows = run_rows(&Ablation::guidance_rows())?;
        write_file(&out.join("guidance.csv"), metrics_csv(&rows))?;
        print!("{}", metrics_table(&rows));
    }
    write_manifest(out)?;
    Ok(table)
}

/// Evaluates a checkpoint of either role on `split`, writing metric CSVs
/// and PGM dumps of the masks and predicted depth of the first sample.
pub fn cmd_eval(cfg: &RunConfig, out: &Path, ckpt: &Path, split: Split) -> Result<EvalReport> {
    let exp = Experiment::load(cfg, &cfg.data_dir(out))?;
    let mut model = Model::zeros(cfg.model_spec(Role::Teacher))?;
    if load_checkpoint(&mut model.params, ckpt).is_err() {
        model = Model::zeros(cfg.model_spec(Role::Student))?;
        load_checkpoint(&mut model.params, ckpt)?;
    }
    let report = exp.evaluate(&model, split)?;
    let stem = ckpt.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    let dir = out.join(format!("eval_{stem}_{}", split.as_str()));
    let rows = [model_row(stem, &report)];
    write_file(&dir.join("metrics.csv"), metrics_csv(&rows))?;
    write_file(&dir.join("per_camera.csv"), report.per_camera_csv())?;
    write_file(&dir.join("range_bands.csv"), report.bands_csv())?;
    let first = &exp.split(split)[0];
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    first.occupancy.write_pgm(&dir.join("mask_occupancy.pgm"))?;
    first.foreground.write_pgm(&dir.join("mask_foreground.pgm"))?;
    for (k, m) in first.views.iter().enumerate() {
        m.write_pgm(&dir.join(format!("mask_view{k}.pgm")))?;
    }
    let pred = model.infer(&first.sample.images, &exp.projector)?;
    let depth = expected_depth(&pred.depth_prob, &exp.frustum.depth_bins);
    let (fh, fw) = (exp.frustum.feature_h, exp.frustum.feature_w);
    for k in 0..exp.projector.cameras {
        let plane = &depth[k * fh * fw..(k + 1) * fh * fw];
        write_file(
            &dir.join(format!("depth_cam{k}.pgm")),
            depth_pgm(plane, fw, fh, cfg.frustum.d_max),
        )?;
    }
    print!("{}", metrics_table(&rows));
    print!("{}", report.per_camera_csv());
    write_manifest(out)?;
    Ok(report)
}

/// 8-bit PGM of a depth map, near = bright.
fn depth_pgm(values: &[f64], width: usize, height: usize, max_depth: f64) -> Vec<u8> {
    let mut bytes = format!("P5\n{width} {height}\n255\n").into_bytes();
    bytes.extend(
        values
            .iter()
            .map(|d| ((1.0 - (d / max_depth).clamp(0.0, 1.0)) * 255.0).round() as u8),
    );
    bytes
}

pub fn cmd_gen_data(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let root = cfg.data_dir(out);
    let files = gen_data(cfg, &root)?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    eprintln!(
        "[gen-data] wrote {} files for {} scenes",
        files.len(),
        cfg.data.train + cfg.data.val
    );
    write_manifest(out)
}

/// Convenience for tests and the CLI: the desk-scale default configuration.
pub fn desk_config() -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.masks.remove_ground = true;
    cfg
}
