//! Run configuration and the training loops: source pretraining, oracle
//! training, region-mixing adaptation, frozen diagnostics and sweeps.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{
    self, backward_from_outputs, forward, loss_and_output_grad, DetectionLossConfig, DetectorConfig,
    LossWeights, Sgd, Target, ToyDetectorParams,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate_model, overlays_to_jsonl, ApReport, DetectConfig};
use crate::geometry::{Detection, GaussianBox};
use crate::losses::{consistency_weight, BoxLossConfig, GammaMode, Likelihood, DEFAULT_VAR_FLOOR};
use crate::mixing::{combine_labels, compose, plan_mix, MixStrategy};
use crate::nms::{nms, nms_indices};
use crate::schedule::{filter_pseudo, progress_ratio, shifting_weight, Blend, Clock, Schedule, ScheduleMode};
use crate::synth::{Benchmark, BenchmarkSpec, Dataset};

/// Environment variable the command-line tool reads to replace `output_dir`.
pub const OUTPUT_ROOT_ENV: &str = "MIXADAPT_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub data: DataConfig,
    pub detector: DetectorConfig,
    pub loss: LossSettings,
    pub train: TrainConfig,
    pub adapt: AdaptConfig,
    pub eval: DetectConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            output_dir: PathBuf::from("runs"),
            data: DataConfig::default(),
            detector: DetectorConfig::default(),
            loss: LossSettings::default(),
            train: TrainConfig::default(),
            adapt: AdaptConfig::default(),
            eval: DetectConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// Directory written by `gen-data`. When unset the benchmark is generated
    /// in memory from `benchmark`.
    pub dir: Option<PathBuf>,
    pub benchmark: BenchmarkSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossSettings {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    pub obj_pos_weight: f64,
    pub likelihood: Likelihood,
    pub var_floor: f64,
    /// Residual scale inside the box likelihood; defaults to the grid size so
    /// variances are in cell units.
    pub coord_scale: Option<f64>,
}

impl Default for LossSettings {
    fn default() -> Self {
        Self {
            box_weight: 1.0,
            obj_weight: 1.0,
            cls_weight: 1.0,
            obj_pos_weight: 8.0,
            likelihood: Likelihood::RawPdf,
            var_floor: DEFAULT_VAR_FLOOR,
            coord_scale: None,
        }
    }
}

impl LossSettings {
    pub fn resolve(&self, grid: usize) -> DetectionLossConfig {
        DetectionLossConfig {
            weights: LossWeights {
                box_weight: self.box_weight,
                obj_weight: self.obj_weight,
                cls_weight: self.cls_weight,
                obj_pos_weight: self.obj_pos_weight,
            },
            box_loss: BoxLossConfig {
                likelihood: self.likelihood,
                var_floor: self.var_floor,
                coord_scale: self.coord_scale.unwrap_or(grid as f64),
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub source_epochs: u64,
    pub adapt_epochs: u64,
    pub lr: f64,
    pub momentum: f64,
    /// The learning rate decays linearly over a run to `lr * lr_final_ratio`.
    pub lr_final_ratio: f64,
    /// Decay of the weight average that is evaluated and saved. 0 keeps
    /// the raw weights.
    pub ema_decay: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            source_epochs: 80,
            adapt_epochs: 25,
            lr: 1e-2,
            momentum: 0.9,
            lr_final_ratio: 0.1,
            ema_decay: 0.999,
        }
    }
}

impl TrainConfig {
    /// Learning rate for step `t` of `total`.
    pub fn lr_at(&self, t: u64, total: u64) -> f64 {
        if total == 0 {
            return self.lr;
        }
        let frac = t as f64 / total as f64;
        self.lr * (1.0 - (1.0 - self.lr_final_ratio) * frac)
    }
}

/// Which labels stand for the source image outside the pasted region.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SourceLabels {
    /// Filtered detector predictions on the source image.
    #[default]
    Predictions,
    GroundTruth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdaptConfig {
    pub conf_thresh: f64,
    pub gamma_thresh: f64,
    pub alpha: f64,
    pub schedule: ScheduleMode,
    pub strategy: MixStrategy,
    pub gamma: GammaMode,
    pub source_labels: SourceLabels,
    pub nms_iou: f64,
    /// Objectness positive weight inside the consistency loss. Pseudo
    /// positives are noisy, so the supervised up-weighting is not reused.
    pub cons_obj_pos_weight: f64,
    /// Skip parameter updates; used to inspect the schedule in isolation.
    pub frozen: bool,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.25,
            gamma_thresh: 0.5,
            alpha: 5.0,
            schedule: ScheduleMode::DetToCombDelta,
            strategy: MixStrategy::FourDivision,
            gamma: GammaMode::Dynamic,
            source_labels: SourceLabels::Predictions,
            nms_iou: 0.5,
            cons_obj_pos_weight: 1.0,
            frozen: false,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |name: &str, v: f64| {
            if (0.0..=1.0).contains(&v) {
                Ok(())
            } else {
                Err(Error::Config(format!("{name} = {v} is outside [0, 1]")))
            }
        };
        let a = &self.adapt;
        unit("adapt.conf_thresh", a.conf_thresh)?;
        unit("adapt.gamma_thresh", a.gamma_thresh)?;
        unit("adapt.nms_iou", a.nms_iou)?;
        unit("eval.conf_thresh", self.eval.conf_thresh)?;
        unit("eval.nms_iou", self.eval.nms_iou)?;
        unit("eval.match_iou", self.eval.match_iou)?;
        unit("train.momentum", self.train.momentum)?;
        unit("train.lr_final_ratio", self.train.lr_final_ratio)?;
        if !(0.0..1.0).contains(&self.train.ema_decay) {
            return Err(Error::Config(format!("train.ema_decay must lie in [0, 1), got {}", self.train.ema_decay)));
        }
        if let GammaMode::Constant(g) = a.gamma {
            unit("adapt.gamma", g)?;
        }
        if !(a.cons_obj_pos_weight > 0.0 && a.cons_obj_pos_weight.is_finite()) {
            return Err(Error::Config(format!("adapt.cons_obj_pos_weight must be positive, got {}", a.cons_obj_pos_weight)));
        }
        if !(a.alpha > 0.0 && a.alpha.is_finite()) {
            return Err(Error::Config(format!("adapt.alpha must be positive, got {}", a.alpha)));
        }
        if !(self.train.lr >= 0.0 && self.train.lr.is_finite()) {
            return Err(Error::Config(format!("train.lr must be non-negative, got {}", self.train.lr)));
        }
        if !(self.loss.var_floor > 0.0 && self.loss.var_floor < 1.0) {
            return Err(Error::Config("loss.var_floor must lie in (0, 1)".into()));
        }
        let scene = &self.data.benchmark.scene;
        let g = self.detector.grid;
        if g == 0 || scene.width % g != 0 || scene.height % g != 0 {
            return Err(Error::Config(format!(
                "grid {g} does not divide image size {}x{}",
                scene.width, scene.height
            )));
        }
        if self.detector.channels != 3 {
            return Err(Error::Config("synthetic data is RGB; detector.channels must be 3".into()));
        }
        if self.detector.num_classes != crate::synth::NUM_SHAPE_CLASSES {
            return Err(Error::Config(format!(
                "detector.num_classes must be {}",
                crate::synth::NUM_SHAPE_CLASSES
            )));
        }
        scene.validate()?;
        self.data.benchmark.shift.validate()?;
        if let Some(dir) = &self.data.dir {
            if !dir.exists() {
                return Err(Error::Config(format!("data.dir {} does not exist", dir.display())));
            }
        }
        Ok(())
    }

    pub fn loss_config(&self) -> DetectionLossConfig {
        self.loss.resolve(self.detector.grid)
    }

    /// Parse TOML text, apply `key=value` overrides, validate.
    /// Parse `text` layered over the defaults, then apply `key=value`
    /// overrides. Partial tables keep the defaults of their parent, so
    /// `data.benchmark.shift.fog = 0.3` leaves the other shift fields alone.
    pub fn from_toml_str(text: &str, overrides: &[String]) -> Result<Self> {
        let user: toml::Value = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        let mut value = toml::Value::try_from(RunConfig::default()).map_err(|e| Error::Config(e.to_string()))?;
        merge_toml(&mut value, user);
        for o in overrides {
            apply_override(&mut value, o)?;
        }
        let cfg: RunConfig = value.try_into().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml_str(&text, overrides)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

fn merge_toml(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge_toml(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Set a dotted key such as `adapt.alpha=3` inside a TOML document. The
/// value is read as a TOML literal when possible and as a bare string
/// otherwise.
pub fn apply_override(doc: &mut toml::Value, assignment: &str) -> Result<()> {
    let (key, raw) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not key=value")))?;
    let (key, raw) = (key.trim(), raw.trim());
    if key.is_empty() {
        return Err(Error::Config(format!("override `{assignment}` has an empty key")));
    }
    let value = toml::from_str::<toml::Table>(&format!("v = {raw}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));

    let parts: Vec<&str> = key.split('.').collect();
    let mut node = doc;
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override `{key}`: `{part}` is not a table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override `{key}` does not address a table")))?;
    table.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

/// Read the dataset directory if configured, otherwise generate in memory.
pub fn load_benchmark(cfg: &RunConfig) -> Result<Benchmark> {
    match &cfg.data.dir {
        Some(dir) => Benchmark::read(dir),
        None => Benchmark::generate(&cfg.data.benchmark),
    }
}

// rng stream ids; each consumer gets its own stream of the run seed
const STREAM_INIT: u64 = 1;
const STREAM_PRETRAIN: u64 = 2;
const STREAM_ADAPT_SOURCE: u64 = 3;
const STREAM_ADAPT_TARGET: u64 = 4;
const STREAM_MIX: u64 = 5;
const STREAM_ORACLE: u64 = 6;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Endless shuffled pass over `n` indices, reshuffled after each pass.
struct IndexStream {
    rng: ChaCha8Rng,
    order: Vec<usize>,
    pos: usize,
}

impl IndexStream {
    fn new(n: usize, rng: ChaCha8Rng) -> Self {
        Self {
            rng,
            order: (0..n).collect(),
            pos: n,
        }
    }

    fn next(&mut self) -> usize {
        if self.pos == self.order.len() {
            self.order.shuffle(&mut self.rng);
            self.pos = 0;
        }
        self.pos += 1;
        self.order[self.pos - 1]
    }
}

/// One row per epoch.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochRow {
    pub epoch: u64,
    pub iterations: u64,
    pub r: f64,
    pub delta: f64,
    pub l_det: f64,
    pub l_cons: f64,
    pub gamma_mean: f64,
    pub kept_pseudo: u64,
    pub no_mix: u64,
    pub source_map: f64,
    pub target_map: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsLog {
    pub rows: Vec<EpochRow>,
}

impl MetricsLog {
    pub const HEADER: &'static str =
        "epoch,iterations,r,delta,l_det,l_cons,gamma_mean,kept_pseudo,no_mix,source_map,target_map";

    pub fn to_csv(&self) -> String {
        let mut s = String::from(Self::HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{:.9},{:.9},{:.9},{:.9},{:.9},{},{},{:.9},{:.9}",
                r.epoch,
                r.iterations,
                r.r,
                r.delta,
                r.l_det,
                r.l_cons,
                r.gamma_mean,
                r.kept_pseudo,
                r.no_mix,
                r.source_map,
                r.target_map
            );
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRow> {
        self.rows.last()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunKind {
    Pretrain,
    Oracle,
    Adapt,
    SourceContinue,
}

impl RunKind {
    pub fn name(&self) -> &'static str {
        match self {
            RunKind::Pretrain => "pretrain",
            RunKind::Oracle => "oracle",
            RunKind::Adapt => "adapt",
            RunKind::SourceContinue => "source_continue",
        }
    }
}

#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub kind: RunKind,
    pub params: ToyDetectorParams,
    pub log: MetricsLog,
    pub source_report: ApReport,
    pub target_report: ApReport,
}

#[derive(Debug, Clone, Serialize)]
pub struct RunSummary<'a> {
    pub run: &'static str,
    pub seed: u64,
    pub epochs: usize,
    pub final_source_map: f64,
    pub final_target_map: f64,
    pub source_report: &'a ApReport,
    pub target_report: &'a ApReport,
    pub config: &'a RunConfig,
}

impl RunOutcome {
    pub fn summary<'a>(&'a self, cfg: &'a RunConfig) -> RunSummary<'a> {
        RunSummary {
            run: self.kind.name(),
            seed: cfg.seed,
            epochs: self.log.rows.len(),
            final_source_map: self.source_report.map,
            final_target_map: self.target_report.map,
            source_report: &self.source_report,
            target_report: &self.target_report,
            config: cfg,
        }
    }

    /// `checkpoint.txt`, `metrics.csv`, `summary.json` and `config.toml`.
    pub fn write(&self, dir: &Path, cfg: &RunConfig) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        detector::save_checkpoint(&self.params, &dir.join("checkpoint.txt"))?;
        write_file(&dir.join("metrics.csv"), &self.log.to_csv())?;
        write_file(
            &dir.join("summary.json"),
            &(serde_json::to_string_pretty(&self.summary(cfg))? + "\n"),
        )?;
        write_file(&dir.join("config.toml"), &cfg.to_toml()?)
    }
}

pub(crate) fn write_file(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn evaluate_pair(params: &ToyDetectorParams, bench: &Benchmark, cfg: &RunConfig) -> Result<(ApReport, ApReport)> {
    let (s, t) = rayon::join(
        || evaluate_model(params, &bench.source_test, &cfg.eval),
        || evaluate_model(params, &bench.target_test, &cfg.eval),
    );
    Ok((s?.0, t?.0))
}

fn init_params(cfg: &RunConfig) -> Result<ToyDetectorParams> {
    ToyDetectorParams::init(cfg.detector, &mut stream(cfg.seed, STREAM_INIT))
}

/// Exponential moving average of the weights.
#[derive(Debug, Clone)]
struct WeightAverage {
    decay: f64,
    params: ToyDetectorParams,
}

impl WeightAverage {
    fn new(decay: f64, init: &ToyDetectorParams) -> Self {
        Self { decay, params: init.clone() }
    }

    fn update(&mut self, live: &ToyDetectorParams) {
        let d = self.decay;
        for (a, &x) in self.params.values.iter_mut().zip(&live.values) {
            *a = d * *a + (1.0 - d) * x;
        }
    }
}

/// Plain supervised training, one image per step.
fn supervised(
    cfg: &RunConfig,
    bench: &Benchmark,
    train: &Dataset,
    kind: RunKind,
    order_stream: u64,
) -> Result<RunOutcome> {
    let mut params = init_params(cfg)?;
    let loss_cfg = cfg.loss_config();
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum, params.len());
    let mut avg = WeightAverage::new(cfg.train.ema_decay, &params);
    let mut rng = stream(cfg.seed, order_stream);
    let mut log = MetricsLog::default();
    let mut iterations = 0;
    if train.is_empty() && cfg.train.source_epochs > 0 {
        return Err(Error::EmptyDataset);
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    let total = cfg.train.source_epochs * train.len() as u64;
    for epoch in 0..cfg.train.source_epochs {
        order.shuffle(&mut rng);
        let mut l_det = 0.0;
        for &i in &order {
            let item = &train.items[i];
            let (loss, grads) = detector::backward(&params, &item.image, &item.objects, &loss_cfg)?;
            opt.lr = cfg.train.lr_at(iterations, total);
            opt.step(&mut params, &grads);
            avg.update(&params);
            l_det += loss.total;
            iterations += 1;
        }
        let (s, t) = evaluate_pair(&avg.params, bench, cfg)?;
        log.rows.push(EpochRow {
            epoch: epoch + 1,
            iterations,
            l_det: l_det / order.len() as f64,
            source_map: s.map,
            target_map: t.map,
            ..EpochRow::default()
        });
    }
    if !params.is_finite() {
        return Err(Error::Config("training diverged (non-finite parameters)".into()));
    }
    let (source_report, target_report) = evaluate_pair(&avg.params, bench, cfg)?;
    Ok(RunOutcome {
        kind,
        params: avg.params,
        log,
        source_report,
        target_report,
    })
}

/// Supervised training on labelled source images from random weights.
pub fn run_pretrain(cfg: &RunConfig, bench: &Benchmark) -> Result<RunOutcome> {
    supervised(cfg, bench, &bench.source_train, RunKind::Pretrain, STREAM_PRETRAIN)
}

/// Supervised training on labelled target images: the upper bound.
pub fn run_oracle(cfg: &RunConfig, bench: &Benchmark) -> Result<RunOutcome> {
    supervised(cfg, bench, &bench.target_train, RunKind::Oracle, STREAM_ORACLE)
}

/// Pseudo detections for one forward pass: NMS ranked by `c_det` at
/// `conf_thresh`, then the blended-confidence filter. Ranking by `c_det`
/// keeps the NMS survivors independent of the schedule, so a tighter blend
/// can only remove detections.
pub fn pseudo_detections(dets: &[Detection], adapt: &AdaptConfig, blend: Blend) -> Vec<Detection> {
    let kept = nms(dets, adapt.nms_iou, adapt.conf_thresh, |d| d.c_det);
    filter_pseudo(&kept, adapt.conf_thresh, blend)
}

/// Cell indices of [`pseudo_detections`], for set comparisons.
pub fn pseudo_indices(dets: &[Detection], adapt: &AdaptConfig, blend: Blend) -> Vec<usize> {
    nms_indices(dets, adapt.nms_iou, adapt.conf_thresh, |d| d.c_det)
        .into_iter()
        .filter(|&i| blend.confidence(&dets[i]) > adapt.conf_thresh)
        .collect()
}

fn to_targets(dets: &[Detection]) -> Vec<Target> {
    dets.iter()
        .map(|d| Target {
            bbox: *d.bbox(),
            class_id: d.class_id,
        })
        .collect()
}

fn ground_truth_detections(objects: &[Target]) -> Vec<Detection> {
    objects
        .iter()
        .map(|t| {
            let sigma = [f64::MIN_POSITIVE; 4];
            Detection::new(GaussianBox { mu: t.bbox, sigma }, t.class_id, 1.0)
        })
        .collect()
}

fn adapt_schedule(cfg: &RunConfig, batches: usize) -> Result<Schedule> {
    Schedule::new(cfg.adapt.alpha, cfg.train.adapt_epochs, batches as u64, cfg.adapt.schedule)
}

/// Region-mixing adaptation starting from `init`.
///
/// Each iteration pairs the next target image with the next image of an
/// independent source stream. The source image is supervised by its labels;
/// the mixed image is supervised by the merged pseudo labels with weight
/// gamma. When gamma is exactly zero the consistency gradient is skipped, so
/// the source stream and updates match [`run_source_continue`].
pub fn run_adapt(cfg: &RunConfig, bench: &Benchmark, init: &ToyDetectorParams) -> Result<RunOutcome> {
    let target = &bench.target_train;
    let source = &bench.source_train;
    if target.is_empty() || source.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let a = cfg.adapt;
    let loss_cfg = cfg.loss_config();
    let mut cons_cfg = loss_cfg.clone();
    cons_cfg.weights.obj_pos_weight = a.cons_obj_pos_weight;
    let mut params = init.clone();
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum, params.len());
    let mut avg = WeightAverage::new(cfg.train.ema_decay, &params);
    let mut src_stream = IndexStream::new(source.len(), stream(cfg.seed, STREAM_ADAPT_SOURCE));
    let mut tgt_rng = stream(cfg.seed, STREAM_ADAPT_TARGET);
    let mut mix_rng = stream(cfg.seed, STREAM_MIX);
    let mut log = MetricsLog::default();
    let mut clock = Clock::default();
    let nb = target.len();

    if cfg.train.adapt_epochs > 0 {
        let sched = adapt_schedule(cfg, nb)?;
        let mut order: Vec<usize> = (0..nb).collect();
        for epoch in 0..cfg.train.adapt_epochs {
            order.shuffle(&mut tgt_rng);
            let (mut l_det_sum, mut l_cons_sum, mut gamma_sum) = (0.0, 0.0, 0.0);
            let (mut kept, mut no_mix) = (0u64, 0u64);
            for &ti in &order {
                let si = src_stream.next();
                let (xs, ys) = (&source.items[si].image, &source.items[si].objects);
                let xt = &target.items[ti].image;
                let blend = sched.blend_at(clock);

                let fwd_s = forward(&params, xs)?;
                let fwd_t = forward(&params, xt)?;
                let pseudo_t = pseudo_detections(&fwd_t.detections(), &a, blend);
                kept += pseudo_t.len() as u64;
                let pseudo_s = match a.source_labels {
                    SourceLabels::Predictions => pseudo_detections(&fwd_s.detections(), &a, blend),
                    SourceLabels::GroundTruth => ground_truth_detections(ys),
                };

                let (det_loss, d_out_s) = loss_and_output_grad(&fwd_s, ys, &loss_cfg);
                let mut grads = vec![0.0; params.len()];
                backward_from_outputs(&params, &fwd_s, &d_out_s, 1.0, &mut grads);
                l_det_sum += det_loss.total;

                let plan = plan_mix(&pseudo_t, a.strategy, xt.width(), xt.height(), |d| blend.confidence(d), &mut mix_rng);
                if plan.no_mix {
                    no_mix += 1;
                } else {
                    let xm = compose(xs, xt, &plan.mask)?;
                    let merged = combine_labels(&pseudo_t, &pseudo_s, &plan);
                    let gamma = match a.gamma {
                        GammaMode::Dynamic => consistency_weight(&merged, a.gamma_thresh, blend),
                        GammaMode::Constant(g) => g,
                    };
                    let fwd_m = forward(&params, &xm)?;
                    let (cons_loss, d_out_m) = loss_and_output_grad(&fwd_m, &to_targets(&merged), &cons_cfg);
                    if gamma != 0.0 {
                        backward_from_outputs(&params, &fwd_m, &d_out_m, gamma, &mut grads);
                    }
                    l_cons_sum += cons_loss.total;
                    gamma_sum += gamma;
                }
                if !a.frozen {
                    opt.lr = cfg.train.lr_at(clock.t, sched.total_iterations());
                    opt.step(&mut params, &grads);
            avg.update(&params);
                }
                clock.advance();
            }
            let (s, t) = evaluate_pair(&avg.params, bench, cfg)?;
            let r = progress_ratio(clock, &sched);
            let mixed = (nb as u64 - no_mix).max(1) as f64;
            log.rows.push(EpochRow {
                epoch: epoch + 1,
                iterations: clock.t,
                r,
                delta: shifting_weight(r, a.alpha),
                l_det: l_det_sum / nb as f64,
                l_cons: l_cons_sum / mixed,
                gamma_mean: gamma_sum / mixed,
                kept_pseudo: kept,
                no_mix,
                source_map: s.map,
                target_map: t.map,
            });
        }
    }
    if !params.is_finite() {
        return Err(Error::Config("adaptation diverged (non-finite parameters)".into()));
    }
    let (source_report, target_report) = evaluate_pair(&avg.params, bench, cfg)?;
    Ok(RunOutcome {
        kind: RunKind::Adapt,
        params: avg.params,
        log,
        source_report,
        target_report,
    })
}

/// Continue supervised source training for as many iterations as
/// [`run_adapt`] would run, consuming the same source stream.
pub fn run_source_continue(cfg: &RunConfig, bench: &Benchmark, init: &ToyDetectorParams) -> Result<RunOutcome> {
    let source = &bench.source_train;
    let nb = bench.target_train.len();
    if source.is_empty() || nb == 0 {
        return Err(Error::EmptyDataset);
    }
    let loss_cfg = cfg.loss_config();
    let mut params = init.clone();
    let mut opt = Sgd::new(cfg.train.lr, cfg.train.momentum, params.len());
    let mut avg = WeightAverage::new(cfg.train.ema_decay, &params);
    let mut src_stream = IndexStream::new(source.len(), stream(cfg.seed, STREAM_ADAPT_SOURCE));
    let mut log = MetricsLog::default();
    let mut iterations = 0;
    let total = cfg.train.adapt_epochs * nb as u64;
    for epoch in 0..cfg.train.adapt_epochs {
        let mut l_det = 0.0;
        for _ in 0..nb {
            let item = &source.items[src_stream.next()];
            let (loss, grads) = detector::backward(&params, &item.image, &item.objects, &loss_cfg)?;
            opt.lr = cfg.train.lr_at(iterations, total);
            opt.step(&mut params, &grads);
            avg.update(&params);
            l_det += loss.total;
            iterations += 1;
        }
        let (s, t) = evaluate_pair(&avg.params, bench, cfg)?;
        log.rows.push(EpochRow {
            epoch: epoch + 1,
            iterations,
            l_det: l_det / nb as f64,
            source_map: s.map,
            target_map: t.map,
            ..EpochRow::default()
        });
    }
    let (source_report, target_report) = evaluate_pair(&avg.params, bench, cfg)?;
    Ok(RunOutcome {
        kind: RunKind::SourceContinue,
        params: avg.params,
        log,
        source_report,
        target_report,
    })
}

/// Kept pseudo detections of a frozen model over a full adaptation
/// schedule: `[epoch][target image]` -> kept cell indices. Each image is
/// scored at the clock value it would be visited at in the adaptation loop.
pub fn frozen_pseudo_sets(cfg: &RunConfig, target: &Dataset, params: &ToyDetectorParams) -> Result<Vec<Vec<Vec<usize>>>> {
    let nb = target.len();
    if nb == 0 {
        return Err(Error::EmptyDataset);
    }
    let sched = adapt_schedule(cfg, nb)?;
    let dets: Vec<Vec<Detection>> = target
        .items
        .par_iter()
        .map(|it| Ok(forward(params, &it.image)?.detections()))
        .collect::<Result<_>>()?;
    let mut rng = stream(cfg.seed, STREAM_ADAPT_TARGET);
    let mut order: Vec<usize> = (0..nb).collect();
    let mut clock = Clock::default();
    let mut out = Vec::with_capacity(cfg.train.adapt_epochs as usize);
    for _ in 0..cfg.train.adapt_epochs {
        order.shuffle(&mut rng);
        let mut sets = vec![Vec::new(); nb];
        for &ti in &order {
            sets[ti] = pseudo_indices(&dets[ti], &cfg.adapt, sched.blend_at(clock));
            clock.advance();
        }
        out.push(sets);
    }
    Ok(out)
}

/// Parameter varied by [`run_sweep`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Strategy,
    Schedule,
    Gamma,
    Alpha,
    ConfThresh,
    GammaThresh,
}

impl SweepAxis {
    pub const ALL: [SweepAxis; 6] = [
        SweepAxis::Strategy,
        SweepAxis::Schedule,
        SweepAxis::Gamma,
        SweepAxis::Alpha,
        SweepAxis::ConfThresh,
        SweepAxis::GammaThresh,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SweepAxis::Strategy => "strategy",
            SweepAxis::Schedule => "schedule",
            SweepAxis::Gamma => "gamma",
            SweepAxis::Alpha => "alpha",
            SweepAxis::ConfThresh => "conf_thresh",
            SweepAxis::GammaThresh => "gamma_thresh",
        }
    }

    /// Values swept when none are given.
    pub fn default_values(&self) -> Vec<String> {
        let v = |xs: &[&str]| xs.iter().map(|s| s.to_string()).collect();
        match self {
            SweepAxis::Strategy => MixStrategy::ALL.iter().map(|s| s.name().to_string()).collect(),
            SweepAxis::Schedule => ScheduleMode::ALL.iter().map(|s| s.name().to_string()).collect(),
            SweepAxis::Gamma => v(&["dynamic", "0", "0.25", "0.5", "1"]),
            SweepAxis::Alpha => v(&["1", "3", "5", "10"]),
            SweepAxis::ConfThresh => v(&["0.2", "0.25", "0.3", "0.4"]),
            SweepAxis::GammaThresh => v(&["0.3", "0.5", "0.7"]),
        }
    }

    pub fn apply(&self, cfg: &mut RunConfig, value: &str) -> Result<()> {
        let num = || {
            value
                .parse::<f64>()
                .map_err(|_| Error::Config(format!("{}: `{value}` is not a number", self.name())))
        };
        match self {
            SweepAxis::Strategy => cfg.adapt.strategy = value.parse()?,
            SweepAxis::Schedule => cfg.adapt.schedule = value.parse()?,
            SweepAxis::Gamma => cfg.adapt.gamma = value.parse()?,
            SweepAxis::Alpha => cfg.adapt.alpha = num()?,
            SweepAxis::ConfThresh => cfg.adapt.conf_thresh = num()?,
            SweepAxis::GammaThresh => cfg.adapt.gamma_thresh = num()?,
        }
        cfg.validate()
    }
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SweepAxis::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown sweep axis `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub value: String,
    pub target_map: f64,
    pub source_map: f64,
    pub final_kept_pseudo: u64,
    pub final_gamma_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub axis: SweepAxis,
    /// Best target mAP first; ties keep the order the values were given in.
    pub rows: Vec<SweepRow>,
}

impl SweepTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("rank,axis,value,target_map,source_map,final_kept_pseudo,final_gamma_mean\n");
        for (i, r) in self.rows.iter().enumerate() {
            let _ = writeln!(
                s,
                "{},{},{},{:.9},{:.9},{},{:.9}",
                i + 1,
                self.axis.name(),
                r.value,
                r.target_map,
                r.source_map,
                r.final_kept_pseudo,
                r.final_gamma_mean
            );
        }
        s
    }
}

/// One adaptation run per value, all from `init` under the same seed. Runs
/// are independent and execute in parallel; the table does not depend on
/// scheduling.
pub fn run_sweep(
    cfg: &RunConfig,
    bench: &Benchmark,
    init: &ToyDetectorParams,
    axis: SweepAxis,
    values: &[String],
) -> Result<SweepTable> {
    let configs = values
        .iter()
        .map(|v| {
            let mut c = cfg.clone();
            axis.apply(&mut c, v)?;
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut rows = configs
        .par_iter()
        .zip(values.par_iter())
        .map(|(c, v)| {
            let out = run_adapt(c, bench, init)?;
            let last = out.log.last().copied().unwrap_or_default();
            Ok(SweepRow {
                value: v.clone(),
                target_map: out.target_report.map,
                source_map: out.source_report.map,
                final_kept_pseudo: last.kept_pseudo,
                final_gamma_mean: last.gamma_mean,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    rows.sort_by(|a, b| b.target_map.partial_cmp(&a.target_map).unwrap_or(std::cmp::Ordering::Equal));
    Ok(SweepTable { axis, rows })
}

/// Evaluate a checkpoint on one dataset and write `ap.csv`,
/// `overlays.jsonl` and `report.json` into `dir`.
pub fn evaluate_to_dir(params: &ToyDetectorParams, data: &Dataset, cfg: &DetectConfig, dir: &Path) -> Result<ApReport> {
    let (report, overlays) = evaluate_model(params, data, cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_file(&dir.join("ap.csv"), &report.to_table())?;
    write_file(&dir.join("overlays.jsonl"), &overlays_to_jsonl(&overlays)?)?;
    write_file(&dir.join("report.json"), &(serde_json::to_string_pretty(&report)? + "\n"))?;
    Ok(report)
}
