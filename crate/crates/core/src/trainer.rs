//! Phased training: DBP (I), geometric restructuring (II), refiner and merger (III).
//!
//! Each phase runs Adam over its trainable components, validates after every
//! epoch with the phase loss, halves the learning rate after `lr_patience`
//! epochs without improvement, stops after `stop_patience`, and hands its
//! best parameters to the next phase. Optimizer moments are reset at every
//! phase boundary.
//!
//! Per-sample gradients may be computed on several threads; they are always
//! reduced in sample order, so results do not depend on the thread count.
//! `deterministic` additionally keeps everything on the calling thread.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::Serialize;

use crate::consistency::{
    blend, blend_backward, confidence_maps, ConsistencyParams, DEFAULT_GAMMA,
};
use crate::datapipe::{self, StereoSample, TrainingData};
use crate::error::{Error, Result};
use crate::losses::{self, BranchTerms, LossBreakdown, LossWeights};
use crate::model::cbm_input;
use crate::netdef::{
    ModelGraph, NetworkComponent, Taps, Trace, COMPONENTS, DBP_COMPONENTS, ENCODER_STRIDE,
    SKIP_LAYERS,
};
use crate::optim::{Adam, AdamConfig};
use crate::params::ParamStore;
use crate::tensor::{DisparityMap, ImageTensor, Tensor};
use crate::warp::{warp, warp_backward, WarpDirection};

/// Components trained after the DBP.
pub const MERGE_COMPONENTS: [&str; 4] = ["refiner_l", "refiner_r", "cbm_l", "cbm_r"];

/// Minimum decrease of the validation metric that counts as an improvement.
pub const MIN_IMPROVEMENT: f64 = 1e-6;

pub const LOG_FILE: &str = "train_log.jsonl";
pub const META_FILE: &str = "meta.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Phase {
    I,
    II,
    III,
}

impl Phase {
    pub fn number(self) -> usize {
        match self {
            Phase::I => 1,
            Phase::II => 2,
            Phase::III => 3,
        }
    }
}

/// One entry of a schedule; `end_to_end` only applies to phase III and
/// trains every component instead of freezing the DBP.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct PhaseRun {
    pub phase: Phase,
    pub end_to_end: bool,
}

impl PhaseRun {
    pub const I: PhaseRun = PhaseRun {
        phase: Phase::I,
        end_to_end: false,
    };
    pub const II: PhaseRun = PhaseRun {
        phase: Phase::II,
        end_to_end: false,
    };
    pub const III: PhaseRun = PhaseRun {
        phase: Phase::III,
        end_to_end: false,
    };
    pub const III_E2E: PhaseRun = PhaseRun {
        phase: Phase::III,
        end_to_end: true,
    };

    /// Component groups updated by this run, before user freezes.
    pub fn active_components(self) -> Vec<&'static str> {
        match (self.phase, self.end_to_end) {
            (Phase::III, false) => MERGE_COMPONENTS.to_vec(),
            (Phase::III, true) => COMPONENTS.to_vec(),
            _ => DBP_COMPONENTS.to_vec(),
        }
    }
}

impl fmt::Display for PhaseRun {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self.phase {
            Phase::I => "I",
            Phase::II => "II",
            Phase::III => "III",
        };
        if self.end_to_end {
            write!(f, "{name}-e2e")
        } else {
            f.write_str(name)
        }
    }
}

impl FromStr for PhaseRun {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "I" | "1" => Ok(PhaseRun::I),
            "II" | "2" => Ok(PhaseRun::II),
            "III" | "3" => Ok(PhaseRun::III),
            "III-e2e" | "3-e2e" | "e2e" => Ok(PhaseRun::III_E2E),
            other => Err(Error::InvalidArgument(format!("unknown phase `{other}`"))),
        }
    }
}

/// Ordered list of phase runs.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Schedule(pub Vec<PhaseRun>);

impl Schedule {
    pub fn full() -> Self {
        Schedule(vec![PhaseRun::I, PhaseRun::II, PhaseRun::III])
    }

    /// The five schedule variants compared in the ablation.
    pub fn ablations() -> Vec<Schedule> {
        vec![
            Schedule(vec![PhaseRun::I]),
            Schedule(vec![PhaseRun::I, PhaseRun::II]),
            Schedule::full(),
            Schedule(vec![PhaseRun::I, PhaseRun::III]),
            Schedule(vec![PhaseRun::III_E2E]),
        ]
    }

    /// File-name friendly tag such as `I+II+III`.
    pub fn tag(&self) -> String {
        self.0
            .iter()
            .map(ToString::to_string)
            .collect::<Vec<_>>()
            .join("+")
    }
}

impl FromStr for Schedule {
    type Err = Error;

    /// Accepts `all`, a single phase, or a comma/plus separated list.
    fn from_str(s: &str) -> Result<Self> {
        if s.trim() == "all" {
            return Ok(Schedule::full());
        }
        let runs = s
            .split([',', '+'])
            .filter(|p| !p.trim().is_empty())
            .map(PhaseRun::from_str)
            .collect::<Result<Vec<_>>>()?;
        if runs.is_empty() {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        Ok(Schedule(runs))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub adam: AdamConfig,
    pub batch_size: usize,
    pub lr_patience: usize,
    pub stop_patience: usize,
    pub lr_factor: f64,
    /// Per-phase epoch cap.
    pub max_epochs: Option<usize>,
    /// Per-phase optimizer step cap.
    pub max_steps: Option<usize>,
    pub seed: u64,
    pub loss_weights: LossWeights,
    pub gamma: f64,
    /// `(height, width)` of training crops.
    pub patch: (usize, usize),
    pub augment_fraction: f64,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            adam: AdamConfig::default(),
            batch_size: 16,
            lr_patience: 10,
            stop_patience: 20,
            lr_factor: 0.5,
            max_epochs: None,
            max_steps: None,
            seed: 0,
            loss_weights: LossWeights::default(),
            gamma: DEFAULT_GAMMA,
            patch: (256, 256),
            augment_fraction: 0.2,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if !(self.adam.lr > 0.0 && self.adam.lr.is_finite()) {
            return bad(format!(
                "learning rate must be positive, got {}",
                self.adam.lr
            ));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.lr_patience == 0 || self.stop_patience == 0 {
            return bad("patience values must be at least 1".into());
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if !(self.lr_factor > 0.0 && self.lr_factor < 1.0) {
            return bad(format!(
                "lr factor must lie in (0, 1), got {}",
                self.lr_factor
            ));
        }
        if !(0.0..=1.0).contains(&self.augment_fraction) {
            return bad(format!(
                "augment fraction {} outside [0, 1]",
                self.augment_fraction
            ));
        }
        let (h, w) = self.patch;
        if h == 0 || w == 0 || h % ENCODER_STRIDE != 0 || w % ENCODER_STRIDE != 0 {
            return Err(Error::NotDivisible {
                height: h,
                width: w,
                factor: ENCODER_STRIDE,
            });
        }
        self.loss_weights.validate()?;
        ConsistencyParams::new(self.gamma)?;
        Ok(())
    }

    fn consistency(&self) -> ConsistencyParams {
        ConsistencyParams::new(self.gamma).expect("validated")
    }
}

/// Outcome of observing one epoch's validation metric.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauEvent {
    Improved,
    Waiting,
    LrReduced,
    Stop,
}

/// Learning-rate halving and early stopping driven only by the metric history.
#[derive(Clone, Debug, PartialEq)]
pub struct Plateau {
    pub best: f64,
    pub lr: f64,
    /// Epochs without improvement since the last improvement or lr change.
    pub lr_wait: usize,
    /// Epochs without improvement since the last improvement.
    pub stop_wait: usize,
    lr_patience: usize,
    stop_patience: usize,
    factor: f64,
}

impl Plateau {
    pub fn new(cfg: &TrainConfig) -> Self {
        Plateau {
            best: f64::INFINITY,
            lr: cfg.adam.lr,
            lr_wait: 0,
            stop_wait: 0,
            lr_patience: cfg.lr_patience,
            stop_patience: cfg.stop_patience,
            factor: cfg.lr_factor,
        }
    }

    pub fn observe(&mut self, metric: f64) -> PlateauEvent {
        if metric < self.best - MIN_IMPROVEMENT {
            self.best = metric;
            self.lr_wait = 0;
            self.stop_wait = 0;
            return PlateauEvent::Improved;
        }
        self.lr_wait += 1;
        self.stop_wait += 1;
        if self.stop_wait >= self.stop_patience {
            PlateauEvent::Stop
        } else if self.lr_wait >= self.lr_patience {
            self.lr *= self.factor;
            self.lr_wait = 0;
            PlateauEvent::LrReduced
        } else {
            PlateauEvent::Waiting
        }
    }
}

/// Learning rate used in each epoch for a given metric history, truncated at
/// the epoch that triggers early stopping.
pub fn lr_schedule(history: &[f64], cfg: &TrainConfig) -> Vec<f64> {
    let mut p = Plateau::new(cfg);
    let mut out = Vec::new();
    for &m in history {
        out.push(p.lr);
        if p.observe(m) == PlateauEvent::Stop {
            break;
        }
    }
    out
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub schedule: String,
    pub phase: String,
    pub epoch: usize,
    pub steps: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub terms: Vec<(String, f64)>,
    pub val_metric: f64,
    pub event: PlateauEvent,
}

/// Parameters plus the state needed to continue a schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub adam: Adam,
    pub meta: CheckpointMeta,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointMeta {
    /// Last phase run that contributed to these parameters.
    pub phase: Option<PhaseRun>,
    pub epoch: usize,
    pub steps: usize,
    pub best_metric: f64,
    pub lr: f64,
    pub seed: u64,
    pub completed: Vec<PhaseRun>,
}

impl CheckpointMeta {
    fn render(&self) -> String {
        let completed: Vec<String> = self.completed.iter().map(ToString::to_string).collect();
        format!(
            "format = monoview-checkpoint 1\nphase = {}\nepoch = {}\nsteps = {}\nbest_metric = {:016x}\nlr = {:016x}\nseed = {}\ncompleted = {}\n",
            self.phase.map(|p| p.to_string()).unwrap_or_else(|| "-".into()),
            self.epoch,
            self.steps,
            self.best_metric.to_bits(),
            self.lr.to_bits(),
            self.seed,
            completed.join(","),
        )
    }

    fn parse(text: &str, path: &Path) -> Result<Self> {
        let bad = |reason: String| Error::Format {
            what: "checkpoint metadata",
            path: path.to_path_buf(),
            reason,
        };
        let mut kv = std::collections::BTreeMap::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| bad(format!("line without `=`: {line}")))?;
            kv.insert(k.trim().to_string(), v.trim().to_string());
        }
        if kv.get("format").map(String::as_str) != Some("monoview-checkpoint 1") {
            return Err(bad("missing or unsupported format line".into()));
        }
        let get = |k: &str| kv.get(k).ok_or_else(|| bad(format!("missing key `{k}`")));
        let num =
            |k: &str| -> Result<u64> { get(k)?.parse().map_err(|_| bad(format!("bad `{k}`"))) };
        let bits = |k: &str| -> Result<f64> {
            u64::from_str_radix(get(k)?, 16)
                .map(f64::from_bits)
                .map_err(|_| bad(format!("bad `{k}`")))
        };
        let phase = match get("phase")?.as_str() {
            "-" => None,
            p => Some(p.parse()?),
        };
        let completed = get("completed")?
            .split(',')
            .filter(|s| !s.is_empty())
            .map(PhaseRun::from_str)
            .collect::<Result<Vec<_>>>()?;
        Ok(CheckpointMeta {
            phase,
            epoch: num("epoch")? as usize,
            steps: num("steps")? as usize,
            best_metric: bits("best_metric")?,
            lr: bits("lr")?,
            seed: num("seed")?,
            completed,
        })
    }
}

impl Checkpoint {
    /// Writes `model/`, `optimizer/` and `meta.txt` under `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.params.save(&dir.join("model"))?;
        self.adam.to_store().save(&dir.join("optimizer"))?;
        let meta = format!("{}adam_step = {}\n", self.meta.render(), self.adam.step);
        let p = dir.join(META_FILE);
        fs::write(&p, meta).map_err(|e| Error::io(&p, e))
    }

    /// Loads a checkpoint directory, or a bare weight directory with default metadata.
    pub fn load(dir: &Path) -> Result<Self> {
        let meta_path = dir.join(META_FILE);
        if !meta_path.exists() {
            return Ok(Checkpoint {
                params: ParamStore::load(dir)?,
                adam: Adam::new(),
                meta: CheckpointMeta {
                    phase: None,
                    epoch: 0,
                    steps: 0,
                    best_metric: f64::INFINITY,
                    lr: AdamConfig::default().lr,
                    seed: 0,
                    completed: Vec::new(),
                },
            });
        }
        let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
        let meta = CheckpointMeta::parse(&text, &meta_path)?;
        let adam_step = text
            .lines()
            .find_map(|l| l.strip_prefix("adam_step = "))
            .and_then(|v| v.trim().parse().ok())
            .unwrap_or(0);
        Ok(Checkpoint {
            params: ParamStore::load(&dir.join("model"))?,
            adam: Adam::from_store(adam_step, &ParamStore::load(&dir.join("optimizer"))?),
            meta,
        })
    }

    /// Model directory inside a checkpoint, accepting bare weight directories too.
    pub fn model_dir(dir: &Path) -> PathBuf {
        if dir.join(META_FILE).exists() {
            dir.join("model")
        } else {
            dir.to_path_buf()
        }
    }
}

fn component_of(param: &str) -> &str {
    param.split('.').next().unwrap_or(param)
}

/// Traced forward of one DBP branch.
struct DbpPass {
    enc: Trace,
    dec: Trace,
}

impl DbpPass {
    fn run(graph: &ModelGraph, input: &ImageTensor, dir: WarpDirection) -> Result<Self> {
        let b = graph.branch(dir);
        let enc = b
            .encoder
            .forward_trace(&graph.params, input, &Taps::new())?;
        let skips = encoder_skips(b.encoder, &enc);
        let dec = b
            .decoder
            .forward_trace(&graph.params, enc.output(), &skips)?;
        Ok(DbpPass { enc, dec })
    }

    fn disparity(&self) -> &DisparityMap {
        self.dec.output()
    }
}

fn encoder_skips(encoder: &NetworkComponent, trace: &Trace) -> Taps {
    SKIP_LAYERS
        .iter()
        .map(|&i| {
            (
                i,
                trace.tap(encoder.layers(), i).expect("skip layer").clone(),
            )
        })
        .collect()
}

/// Gradient accumulation target per component; `None` for frozen ones.
struct GradSink<'a> {
    store: &'a mut ParamStore,
    trainable: &'a BTreeSet<String>,
}

impl GradSink<'_> {
    fn wants(&self, component: &str) -> bool {
        self.trainable.contains(component)
    }

    fn target(&mut self, component: &str) -> Option<&mut ParamStore> {
        if self.trainable.contains(component) {
            Some(&mut *self.store)
        } else {
            None
        }
    }
}

fn dbp_backward(
    graph: &ModelGraph,
    dir: WarpDirection,
    pass: &DbpPass,
    grad_disparity: DisparityMap,
    sink: &mut GradSink<'_>,
) -> Result<()> {
    let b = graph.branch(dir);
    let enc_trainable = sink.wants(b.encoder.name());
    if !sink.wants(b.decoder.name()) && !enc_trainable {
        return Ok(());
    }
    let dg = b.decoder.backward(
        &graph.params,
        &pass.dec,
        grad_disparity,
        &Taps::new(),
        sink.target(b.decoder.name()),
        enc_trainable,
    )?;
    if enc_trainable {
        let g = dg.input.expect("decoder input gradient");
        b.encoder.backward(
            &graph.params,
            &pass.enc,
            g,
            &dg.skips,
            sink.target(b.encoder.name()),
            false,
        )?;
    }
    Ok(())
}

fn add(a: &mut Tensor<f32>, b: &Tensor<f32>) -> Result<()> {
    a.add_assign(b)
}

fn to_f64(b: &LossBreakdown<f32>) -> (f64, Vec<(String, f64)>) {
    (
        b.total as f64,
        b.terms
            .iter()
            .map(|(n, v)| (n.to_string(), *v as f64))
            .collect(),
    )
}

fn check_finite(b: &LossBreakdown<f32>, run: PhaseRun, id: &str) -> Result<()> {
    if b.total.is_finite() {
        return Ok(());
    }
    let terms: Vec<String> = b.terms.iter().map(|(n, v)| format!("{n}={v}")).collect();
    Err(Error::Training(format!(
        "non-finite loss in phase {run} on sample `{id}` ({})",
        terms.join(", ")
    )))
}

/// Loss and parameter gradients of one stereo sample.
fn sample_gradients(
    graph: &ModelGraph,
    run: PhaseRun,
    trainable: &BTreeSet<String>,
    cfg: &TrainConfig,
    s: &StereoSample,
) -> Result<(LossBreakdown<f32>, ParamStore)> {
    let mut store = graph
        .params
        .filtered(|n| trainable.contains(component_of(n)));
    store.fill_zero();
    let mut sink = GradSink {
        store: &mut store,
        trainable,
    };
    let w = &cfg.loss_weights;
    let (l, r) = (&s.left, &s.right);
    let (lr, rl) = (WarpDirection::LeftToRight, WarpDirection::RightToLeft);

    let loss = match run.phase {
        Phase::I | Phase::II => {
            let p_lr = DbpPass::run(graph, l, lr)?;
            let p_rl = DbpPass::run(graph, r, rl)?;
            let r_dbp = warp(l, p_lr.disparity(), lr)?;
            let l_dbp = warp(r, p_rl.disparity(), rl)?;
            let (loss, g_r_dbp, g_l_dbp, mut g_dlr, mut g_drl) = if run.phase == Phase::I {
                let (loss, g) = losses::loss_phase1_grad(l, r, &l_dbp, &r_dbp, w)?;
                let zero = Tensor::zeros(p_lr.disparity().shape());
                (loss, g.r_dbp, g.l_dbp, zero.clone(), zero)
            } else {
                let (loss, g) = losses::loss_phase2_grad(
                    l,
                    r,
                    &l_dbp,
                    &r_dbp,
                    p_lr.disparity(),
                    p_rl.disparity(),
                    w,
                )?;
                (loss, g.r_dbp, g.l_dbp, g.d_lr, g.d_rl)
            };
            check_finite(&loss, run, &s.source_id)?;
            add(
                &mut g_dlr,
                &warp_backward(l, p_lr.disparity(), lr, &g_r_dbp)?.disparity,
            )?;
            add(
                &mut g_drl,
                &warp_backward(r, p_rl.disparity(), rl, &g_l_dbp)?.disparity,
            )?;
            dbp_backward(graph, lr, &p_lr, g_dlr, &mut sink)?;
            dbp_backward(graph, rl, &p_rl, g_drl, &mut sink)?;
            loss
        }
        Phase::III => {
            // traces are only needed when gradients reach the DBP
            let dbp_live = DBP_COMPONENTS.iter().any(|c| sink.wants(c));
            let (passes, d_lr, d_rl) = if dbp_live {
                let a = DbpPass::run(graph, l, lr)?;
                let b = DbpPass::run(graph, r, rl)?;
                let (da, db) = (a.disparity().clone(), b.disparity().clone());
                (Some((a, b)), da, db)
            } else {
                (
                    None,
                    graph.predict_disparity(l, lr)?,
                    graph.predict_disparity(r, rl)?,
                )
            };
            // confidence targets are constants of the objective
            let (c_lr, c_rl) = confidence_maps(&d_lr, &d_rl, cfg.consistency())?;
            let r_dbp = warp(l, &d_lr, lr)?;
            let l_dbp = warp(r, &d_rl, rl)?;

            let fwd = |dir: WarpDirection,
                       dbp: &ImageTensor,
                       d: &DisparityMap|
             -> Result<(Trace, Trace, ImageTensor)> {
                let br = graph.branch(dir);
                let rt = br.refiner.forward_trace(&graph.params, dbp, &Taps::new())?;
                let ct = br
                    .cbm
                    .forward_trace(&graph.params, &cbm_input(dbp, d)?, &Taps::new())?;
                let blended = blend(dbp, rt.output(), ct.output())?;
                Ok((rt, ct, blended))
            };
            let (rt_lr, ct_lr, bl_lr) = fwd(lr, &r_dbp, &d_lr)?;
            let (rt_rl, ct_rl, bl_rl) = fwd(rl, &l_dbp, &d_rl)?;
            let (loss, g) = losses::loss_phase3_grad(
                l,
                r,
                &BranchTerms {
                    refined: rt_lr.output(),
                    blended: &bl_lr,
                    v: ct_lr.output(),
                    c: &c_lr,
                },
                &BranchTerms {
                    refined: rt_rl.output(),
                    blended: &bl_rl,
                    v: ct_rl.output(),
                    c: &c_rl,
                },
                w,
            )?;
            check_finite(&loss, run, &s.source_id)?;

            let branches = [
                (lr, l, &r_dbp, &d_lr, &rt_lr, &ct_lr, g.lr),
                (rl, r, &l_dbp, &d_rl, &rt_rl, &ct_rl, g.rl),
            ];
            for (i, (dir, input, dbp, d, rt, ct, bg)) in branches.into_iter().enumerate() {
                let br = graph.branch(dir);
                let mix = blend_backward(dbp, rt.output(), ct.output(), &bg.blended)?;
                let mut g_ref = bg.refined;
                add(&mut g_ref, &mix.refined)?;
                let mut g_v = bg.v;
                add(&mut g_v, &mix.v)?;
                let rg = br.refiner.backward(
                    &graph.params,
                    rt,
                    g_ref,
                    &Taps::new(),
                    sink.target(br.refiner.name()),
                    dbp_live,
                )?;
                let cg = br.cbm.backward(
                    &graph.params,
                    ct,
                    g_v,
                    &Taps::new(),
                    sink.target(br.cbm.name()),
                    dbp_live,
                )?;
                if let Some((p_lr, p_rl)) = passes.as_ref() {
                    let g_in = cg.input.expect("cbm input gradient");
                    let mut g_dbp = mix.dbp;
                    add(&mut g_dbp, &rg.input.expect("refiner input gradient"))?;
                    add(&mut g_dbp, &g_in.slice_channels(0, 3))?;
                    let mut g_d = g_in.slice_channels(3, 1);
                    add(&mut g_d, &warp_backward(input, d, dir, &g_dbp)?.disparity)?;
                    let pass = if i == 0 { p_lr } else { p_rl };
                    dbp_backward(graph, dir, pass, g_d, &mut sink)?;
                }
            }
            loss
        }
    };
    Ok((loss, store))
}

/// Phase objective of one sample without gradients.
pub fn sample_loss(
    graph: &ModelGraph,
    run: PhaseRun,
    cfg: &TrainConfig,
    s: &StereoSample,
) -> Result<LossBreakdown<f32>> {
    let w = &cfg.loss_weights;
    let (l, r) = (&s.left, &s.right);
    let (lr, rl) = (WarpDirection::LeftToRight, WarpDirection::RightToLeft);
    let d_lr = graph.predict_disparity(l, lr)?;
    let d_rl = graph.predict_disparity(r, rl)?;
    let r_dbp = warp(l, &d_lr, lr)?;
    let l_dbp = warp(r, &d_rl, rl)?;
    match run.phase {
        Phase::I => losses::loss_phase1(l, r, &l_dbp, &r_dbp, w),
        Phase::II => losses::loss_phase2(l, r, &l_dbp, &r_dbp, &d_lr, &d_rl, w),
        Phase::III => {
            let (c_lr, c_rl) = confidence_maps(&d_lr, &d_rl, cfg.consistency())?;
            let m_lr = graph.refine_and_merge(lr, &r_dbp, &d_lr)?;
            let m_rl = graph.refine_and_merge(rl, &l_dbp, &d_rl)?;
            losses::loss_phase3(
                l,
                r,
                &BranchTerms {
                    refined: &m_lr.refined,
                    blended: &m_lr.blended,
                    v: &m_lr.v,
                    c: &c_lr,
                },
                &BranchTerms {
                    refined: &m_rl.refined,
                    blended: &m_rl.blended,
                    v: &m_rl.v,
                    c: &c_rl,
                },
                w,
            )
        }
    }
}

/// Result of [`Trainer::train_phase`].
#[derive(Clone, Debug)]
pub struct PhaseOutcome {
    pub checkpoint: Checkpoint,
    pub epochs: usize,
    pub steps: usize,
    /// Validation metric after each epoch.
    pub history: Vec<f64>,
}

/// Owns the model during training; the only path that mutates parameters.
#[derive(Debug)]
pub struct Trainer {
    pub graph: ModelGraph,
    pub cfg: TrainConfig,
    frozen: BTreeSet<String>,
    completed: Vec<PhaseRun>,
    log: Vec<LogRecord>,
    log_file: Option<PathBuf>,
    schedule_tag: String,
}

impl Trainer {
    pub fn new(graph: ModelGraph, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Trainer {
            graph,
            cfg,
            frozen: BTreeSet::new(),
            completed: Vec::new(),
            log: Vec::new(),
            log_file: None,
            schedule_tag: String::new(),
        })
    }

    /// Continues from a checkpoint, inheriting its completed phases.
    pub fn from_checkpoint(
        mut graph: ModelGraph,
        checkpoint: &Checkpoint,
        cfg: TrainConfig,
    ) -> Result<Self> {
        graph.params.copy_from(&checkpoint.params, |_| true)?;
        let mut t = Trainer::new(graph, cfg)?;
        t.completed = checkpoint.meta.completed.clone();
        Ok(t)
    }

    /// Appends every log record to `path` as JSON lines.
    pub fn log_to(&mut self, path: impl Into<PathBuf>) {
        self.log_file = Some(path.into());
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn completed(&self) -> &[PhaseRun] {
        &self.completed
    }

    fn resolve(&self, names: &[&str]) -> Result<Vec<String>> {
        let mut out = Vec::new();
        for &n in names {
            match n {
                "dbp" => out.extend(DBP_COMPONENTS.iter().map(|s| s.to_string())),
                "all" => out.extend(COMPONENTS.iter().map(|s| s.to_string())),
                _ => out.push(self.graph.component(n)?.name().to_string()),
            }
        }
        Ok(out)
    }

    /// Excludes components from every later update. `dbp` and `all` are accepted as groups.
    pub fn freeze(&mut self, names: &[&str]) -> Result<()> {
        let r = self.resolve(names)?;
        self.frozen.extend(r);
        Ok(())
    }

    pub fn unfreeze(&mut self, names: &[&str]) -> Result<()> {
        for n in self.resolve(names)? {
            self.frozen.remove(&n);
        }
        Ok(())
    }

    pub fn is_frozen(&self, component: &str) -> bool {
        self.frozen.contains(component)
    }

    /// Components updated by `run` after applying freezes.
    pub fn trainable(&self, run: PhaseRun) -> BTreeSet<String> {
        run.active_components()
            .into_iter()
            .filter(|c| !self.frozen.contains(*c))
            .map(str::to_string)
            .collect()
    }

    /// Batch-mean loss and gradients, reduced in sample order.
    pub fn batch_gradients(
        &self,
        run: PhaseRun,
        batch: &[StereoSample],
    ) -> Result<(LossBreakdown<f32>, ParamStore)> {
        let trainable = self.trainable(run);
        let per_sample =
            |s: &StereoSample| sample_gradients(&self.graph, run, &trainable, &self.cfg, s);
        let results: Vec<Result<(LossBreakdown<f32>, ParamStore)>> = if self.cfg.deterministic {
            batch.iter().map(per_sample).collect()
        } else {
            batch.par_iter().map(per_sample).collect()
        };
        let mut total: Option<(LossBreakdown<f32>, ParamStore)> = None;
        for r in results {
            let (loss, grads) = r?;
            match total.as_mut() {
                None => total = Some((loss, grads)),
                Some((tl, tg)) => {
                    tl.total += loss.total;
                    for (acc, (_, v)) in tl.terms.iter_mut().zip(loss.terms) {
                        acc.1 += v;
                    }
                    tg.accumulate(&grads);
                }
            }
        }
        let (mut loss, mut grads) = total.ok_or_else(|| Error::Training("empty batch".into()))?;
        let inv = 1.0 / batch.len() as f32;
        loss.total *= inv;
        for t in loss.terms.iter_mut() {
            t.1 *= inv;
        }
        grads.scale(inv);
        Ok((loss, grads))
    }

    /// One optimizer update on `batch`; returns the batch loss before the update.
    pub fn step(
        &mut self,
        run: PhaseRun,
        adam: &mut Adam,
        lr: f64,
        batch: &[StereoSample],
    ) -> Result<LossBreakdown<f32>> {
        let (loss, grads) = self.batch_gradients(run, batch)?;
        let trainable = self.trainable(run);
        let cfg = AdamConfig {
            lr,
            ..self.cfg.adam
        };
        adam.step(
            &mut self.graph.params,
            &grads,
            |n| trainable.contains(component_of(n)),
            &cfg,
        );
        Ok(loss)
    }

    /// Mean phase loss over `samples`, center-cropped to the training patch.
    pub fn evaluate(&self, run: PhaseRun, samples: &[StereoSample]) -> Result<f64> {
        if samples.is_empty() {
            return Err(Error::Training("no samples to evaluate".into()));
        }
        let one = |s: &StereoSample| -> Result<f64> {
            let s = datapipe::center_crop(s, self.cfg.patch)?;
            let b = sample_loss(&self.graph, run, &self.cfg, &s)?;
            check_finite(&b, run, &s.source_id)?;
            Ok(b.total as f64)
        };
        let vals: Vec<Result<f64>> = if self.cfg.deterministic {
            samples.iter().map(one).collect()
        } else {
            samples.par_iter().map(one).collect()
        };
        let mut sum = 0.0;
        for v in vals {
            sum += v?;
        }
        Ok(sum / samples.len() as f64)
    }

    fn check_prerequisites(&self, run: PhaseRun) -> Result<()> {
        let needs_dbp =
            matches!(run.phase, Phase::II) || (run.phase == Phase::III && !run.end_to_end);
        if needs_dbp && !self.completed.iter().any(|p| p.phase == Phase::I) {
            return Err(Error::Training(format!(
                "phase {run} needs a trained DBP; run phase I first or start from a phase I checkpoint"
            )));
        }
        Ok(())
    }

    fn record(&mut self, rec: LogRecord) -> Result<()> {
        if let Some(path) = &self.log_file {
            let mut f = fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(path)
                .map_err(|e| Error::io(path, e))?;
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(f, "{line}").map_err(|e| Error::io(path, e))?;
        }
        self.log.push(rec);
        Ok(())
    }

    /// Trains one phase to early stopping (or the configured caps) and leaves
    /// the best parameters in the graph.
    pub fn train_phase(
        &mut self,
        run: PhaseRun,
        data: &TrainingData,
        seed: u64,
    ) -> Result<PhaseOutcome> {
        self.check_prerequisites(run)?;
        if data.train.len() < self.cfg.batch_size {
            return Err(Error::Training(format!(
                "training split has {} samples, fewer than the batch size {}",
                data.train.len(),
                self.cfg.batch_size
            )));
        }
        let trainable = self.trainable(run);
        if trainable.is_empty() {
            return Err(Error::Training(format!(
                "every component of phase {run} is frozen"
            )));
        }
        let val: Vec<StereoSample> = data.val.iter().map(|s| s.load()).collect::<Result<_>>()?;

        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut adam = Adam::new();
        let mut plateau = Plateau::new(&self.cfg);
        let mut best: Option<Checkpoint> = None;
        let mut history = Vec::new();
        let mut steps = 0usize;
        let mut epoch = 0usize;
        let max_epochs = self.cfg.max_epochs.unwrap_or(usize::MAX);
        let max_steps = self.cfg.max_steps.unwrap_or(usize::MAX);

        while epoch < max_epochs && steps < max_steps {
            epoch += 1;
            let lr = plateau.lr;
            let (mut loss_sum, mut terms_sum, mut n_batches) =
                (0.0, Vec::<(String, f64)>::new(), 0usize);
            let mut train_seen = Vec::new();
            for idx in datapipe::batches(data.train.len(), self.cfg.batch_size, Some(&mut rng)) {
                if steps >= max_steps {
                    break;
                }
                let mut batch = Vec::with_capacity(idx.len());
                for i in idx {
                    let s = data.train[i].load()?;
                    let p = datapipe::extract_patch(&s, self.cfg.patch, &mut rng)?;
                    batch.push(datapipe::augment(&p, &mut rng, self.cfg.augment_fraction));
                    if val.is_empty() {
                        train_seen.push(s);
                    }
                }
                let loss = self.step(run, &mut adam, lr, &batch)?;
                steps += 1;
                n_batches += 1;
                let (t, terms) = to_f64(&loss);
                loss_sum += t;
                if terms_sum.is_empty() {
                    terms_sum = terms;
                } else {
                    for (acc, (_, v)) in terms_sum.iter_mut().zip(terms) {
                        acc.1 += v;
                    }
                }
            }
            // without a validation split, the epoch's training pairs stand in
            let metric = if val.is_empty() {
                self.evaluate(run, &train_seen)?
            } else {
                self.evaluate(run, &val)?
            };
            history.push(metric);
            let event = plateau.observe(metric);
            if event == PlateauEvent::Improved {
                best = Some(Checkpoint {
                    params: self.graph.params.clone(),
                    adam: adam.clone(),
                    meta: CheckpointMeta {
                        phase: Some(run),
                        epoch,
                        steps,
                        best_metric: metric,
                        lr,
                        seed: self.cfg.seed,
                        completed: Vec::new(),
                    },
                });
            }
            let nb = n_batches.max(1) as f64;
            self.record(LogRecord {
                schedule: self.schedule_tag.clone(),
                phase: run.to_string(),
                epoch,
                steps,
                lr,
                train_loss: loss_sum / nb,
                terms: terms_sum.into_iter().map(|(n, v)| (n, v / nb)).collect(),
                val_metric: metric,
                event,
            })?;
            if event == PlateauEvent::Stop {
                break;
            }
        }

        let mut checkpoint =
            best.ok_or_else(|| Error::Training(format!("phase {run} ran no epochs")))?;
        self.graph.params = checkpoint.params.clone();
        self.completed.push(run);
        checkpoint.meta.completed = self.completed.clone();
        Ok(PhaseOutcome {
            checkpoint,
            epochs: epoch,
            steps,
            history,
        })
    }

    /// Runs the phases of `schedule` not already completed, in order.
    ///
    /// With `out_dir`, writes `phase-<k>-<name>/` after each phase, `final/`
    /// at the end and appends the log to `train_log.jsonl`. Each phase draws
    /// its randomness from the seed and its position in the schedule, so a
    /// run resumed from a phase checkpoint matches an uninterrupted one.
    pub fn run_schedule(
        &mut self,
        schedule: &Schedule,
        data: &TrainingData,
        out_dir: Option<&Path>,
    ) -> Result<Checkpoint> {
        if schedule.0.is_empty() {
            return Err(Error::InvalidArgument("empty schedule".into()));
        }
        self.schedule_tag = schedule.tag();
        if let Some(dir) = out_dir {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
            if self.log_file.is_none() {
                self.log_file = Some(dir.join(LOG_FILE));
            }
        }
        let done = self.completed.len().min(schedule.0.len());
        if self.completed[..done] != schedule.0[..done] {
            return Err(Error::Training(format!(
                "checkpoint phases {:?} are not a prefix of schedule {}",
                self.completed
                    .iter()
                    .map(ToString::to_string)
                    .collect::<Vec<_>>(),
                schedule.tag()
            )));
        }
        let mut last = None;
        for (pos, &run) in schedule.0.iter().enumerate().skip(done) {
            let seed = self
                .cfg
                .seed
                .wrapping_add(0x9E37_79B9_7F4A_7C15u64.wrapping_mul(pos as u64 + 1));
            let outcome = self.train_phase(run, data, seed)?;
            if let Some(dir) = out_dir {
                let name = format!("phase-{}-{}", pos + 1, run);
                outcome.checkpoint.save(&dir.join(name))?;
            }
            last = Some(outcome.checkpoint);
        }
        let last = match last {
            Some(c) => c,
            None => Checkpoint {
                params: self.graph.params.clone(),
                adam: Adam::new(),
                meta: CheckpointMeta {
                    phase: self.completed.last().copied(),
                    epoch: 0,
                    steps: 0,
                    best_metric: f64::INFINITY,
                    lr: self.cfg.adam.lr,
                    seed: self.cfg.seed,
                    completed: self.completed.clone(),
                },
            },
        };
        if let Some(dir) = out_dir {
            last.save(&dir.join("final"))?;
        }
        Ok(last)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_lr_sequence() {
        let cfg = TrainConfig::default();
        let mut history = vec![1.0];
        history.extend(std::iter::repeat_n(1.0, 25));
        let lrs = lr_schedule(&history, &cfg);
        // one improving epoch, then 20 flat epochs until the stop
        assert_eq!(lrs.len(), 21);
        assert!(lrs[..11].iter().all(|&l| l == 1e-4));
        assert!(lrs[11..].iter().all(|&l| l == 5e-5));
    }

    #[test]
    fn plateau_tie_is_not_improvement() {
        let mut p = Plateau::new(&TrainConfig::default());
        assert_eq!(p.observe(1.0), PlateauEvent::Improved);
        assert_eq!(p.observe(1.0 - 5e-7), PlateauEvent::Waiting);
        assert_eq!(p.observe(0.9), PlateauEvent::Improved);
        assert_eq!(p.stop_wait, 0);
    }

    #[test]
    fn schedule_parsing() {
        assert_eq!("all".parse::<Schedule>().unwrap(), Schedule::full());
        assert_eq!("1,3".parse::<Schedule>().unwrap().tag(), "I+III");
        assert_eq!(
            "III-e2e".parse::<Schedule>().unwrap().0,
            vec![PhaseRun::III_E2E]
        );
        assert!("IV".parse::<Schedule>().is_err());
        let tags: BTreeSet<String> = Schedule::ablations().iter().map(Schedule::tag).collect();
        assert_eq!(tags.len(), 5);
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        let mut c = TrainConfig::default();
        c.adam.lr = 0.0;
        assert!(c.validate().is_err());
        let c = TrainConfig {
            lr_patience: 0,
            ..Default::default()
        };
        assert!(c.validate().is_err());
        let c = TrainConfig {
            patch: (100, 64),
            ..Default::default()
        };
        assert!(matches!(c.validate(), Err(Error::NotDivisible { .. })));
    }

    #[test]
    fn meta_round_trip() {
        let m = CheckpointMeta {
            phase: Some(PhaseRun::III_E2E),
            epoch: 4,
            steps: 9,
            best_metric: 0.1 + 0.2,
            lr: 5e-5,
            seed: 77,
            completed: vec![PhaseRun::I, PhaseRun::III_E2E],
        };
        let back = CheckpointMeta::parse(&m.render(), Path::new("m")).unwrap();
        assert_eq!(back, m);
    }

    #[test]
    fn freeze_rejects_unknown_components() {
        let mut t = Trainer::new(ModelGraph::zeroed().unwrap(), TrainConfig::default()).unwrap();
        assert!(matches!(
            t.freeze(&["decoder"]),
            Err(Error::UnknownComponent(_))
        ));
        t.freeze(&["dbp"]).unwrap();
        assert!(t.trainable(PhaseRun::I).is_empty());
        t.unfreeze(&["encoder"]).unwrap();
        assert_eq!(t.trainable(PhaseRun::I).len(), 1);
        assert_eq!(t.trainable(PhaseRun::III).len(), 4);
    }

    #[test]
    fn later_phases_need_phase_one() {
        let t = Trainer::new(ModelGraph::zeroed().unwrap(), TrainConfig::default()).unwrap();
        assert!(t.check_prerequisites(PhaseRun::II).is_err());
        assert!(t.check_prerequisites(PhaseRun::III).is_err());
        assert!(t.check_prerequisites(PhaseRun::III_E2E).is_ok());
    }
}
