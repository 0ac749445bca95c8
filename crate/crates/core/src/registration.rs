//! Pose recovery: initialization, Adam ascent on the similarity metric, and
//! the coarse-to-fine schedule.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{pose_to_euler, Chart, EulerPose, Intrinsics, Pose};
use crate::metrics::{full_report, ErrorReport};
use crate::render::{make_rays, render_trilinear, Image};
use crate::similarity::{combined, similarity_gradient_wrt_pose, SimilarityConfig};
use crate::volume::{FiducialSet, Volume};

/// Closed intervals for each Euler parameter (degrees, then mm).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ParamRanges {
    pub alpha: [f64; 2],
    pub beta: [f64; 2],
    pub gamma: [f64; 2],
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
}

impl ParamRanges {
    pub fn as_array(&self) -> [[f64; 2]; 6] {
        [self.alpha, self.beta, self.gamma, self.x, self.y, self.z]
    }

    pub fn validate(&self) -> Result<()> {
        for (name, [lo, hi]) in crate::similarity::AXES.iter().zip(self.as_array()) {
            if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
                return Err(Error::invalid(format!(
                    "range for {name} must satisfy min <= max, got [{lo}, {hi}]"
                )));
            }
        }
        Ok(())
    }

    pub fn contains(&self, e: &EulerPose) -> bool {
        self.as_array()
            .iter()
            .zip(e.to_array())
            .all(|([lo, hi], v)| *lo <= v && v <= *hi)
    }

    pub fn sample(&self, rng: &mut impl Rng) -> EulerPose {
        let r = self.as_array();
        EulerPose::from_array(std::array::from_fn(|i| {
            let [lo, hi] = r[i];
            if lo == hi {
                lo
            } else {
                rng.gen_range(lo..=hi)
            }
        }))
    }
}

/// Pose ranges from the training-distribution table, min/max ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Pelvis,
    Neurovasculature,
    Skull,
}

impl Preset {
    pub fn ranges(self) -> ParamRanges {
        match self {
            Preset::Pelvis => ParamRanges {
                alpha: [-45.0, 45.0],
                beta: [-45.0, 45.0],
                gamma: [-15.0, 15.0],
                x: [-150.0, 150.0],
                y: [-1000.0, -450.0],
                z: [-150.0, 150.0],
            },
            Preset::Neurovasculature => ParamRanges {
                alpha: [-45.0, 90.0],
                beta: [-5.0, 5.0],
                gamma: [-5.0, 5.0],
                x: [-25.0, 25.0],
                y: [700.0, 800.0],
                z: [-25.0, 25.0],
            },
            Preset::Skull => ParamRanges {
                alpha: [-125.0, 125.0],
                beta: [-45.0, 45.0],
                gamma: [-15.0, 15.0],
                x: [-200.0, 200.0],
                y: [-1000.0, -500.0],
                z: [-200.0, 200.0],
            },
        }
    }

    /// Detector layout matching the sign of the preset's depth range.
    pub fn orientation(self) -> crate::geometry::Orientation {
        match self {
            Preset::Neurovasculature => crate::geometry::Orientation::Pa,
            Preset::Pelvis | Preset::Skull => crate::geometry::Orientation::Ap,
        }
    }
}

impl std::str::FromStr for Preset {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pelvis" => Ok(Preset::Pelvis),
            "neurovasculature" => Ok(Preset::Neurovasculature),
            "skull" => Ok(Preset::Skull),
            _ => Err(Error::invalid(format!(
                "unknown preset {s:?} (pelvis, neurovasculature, skull)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitKind {
    Fixed,
    Multistart,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitStrategy {
    pub kind: InitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fixed_pose: Option<EulerPose>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ranges: Option<ParamRanges>,
    #[serde(default = "one")]
    pub n_starts: usize,
    #[serde(default)]
    pub seed: u64,
}

fn one() -> usize {
    1
}

impl InitStrategy {
    pub fn fixed(pose: EulerPose) -> Self {
        InitStrategy {
            kind: InitKind::Fixed,
            fixed_pose: Some(pose),
            ranges: None,
            n_starts: 1,
            seed: 0,
        }
    }

    pub fn multistart(ranges: ParamRanges, n_starts: usize, seed: u64) -> Self {
        InitStrategy {
            kind: InitKind::Multistart,
            fixed_pose: None,
            ranges: Some(ranges),
            n_starts,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.kind {
            InitKind::Fixed => {
                if self.fixed_pose.is_none() {
                    return Err(Error::invalid("fixed initialization requires fixed_pose"));
                }
            }
            InitKind::Multistart => {
                let r = self
                    .ranges
                    .ok_or_else(|| Error::invalid("multistart initialization requires ranges"))?;
                r.validate()?;
                if self.n_starts == 0 {
                    return Err(Error::invalid("n_starts must be >= 1"));
                }
            }
        }
        Ok(())
    }

    /// The candidate poses, before scoring.
    pub fn candidates(&self) -> Result<Vec<EulerPose>> {
        self.validate()?;
        Ok(match self.kind {
            InitKind::Fixed => vec![self.fixed_pose.unwrap()],
            InitKind::Multistart => {
                let r = self.ranges.unwrap();
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                (0..self.n_starts).map(|_| r.sample(&mut rng)).collect()
            }
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RefineConfig {
    /// Downsampling factors, coarse to fine, ending at 1.
    pub scales: Vec<usize>,
    pub lr_rot_deg: f64,
    pub lr_trans_mm: f64,
    /// Extra factor on the learning rate of the depth translation.
    pub depth_lr_multiplier: f64,
    /// Learning rates are multiplied by this at each finer scale.
    pub lr_scale_decay: f64,
    /// On a plateau, the learning rate is cut by `lr_reduction_factor` up to
    /// this many times before moving to the next scale.
    pub plateau_lr_reductions: usize,
    pub lr_reduction_factor: f64,
    pub adam: AdamConfig,
    pub plateau_window: usize,
    pub plateau_tol: f64,
    pub max_iters_per_scale: usize,
    pub chart: Chart,
    /// Quadrature samples per ray at each scale; `2 · max(N)` if absent.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub n_samples: Option<Vec<usize>>,
    pub similarity: SimilarityConfig,
}

impl Default for RefineConfig {
    fn default() -> Self {
        RefineConfig {
            scales: vec![8, 4, 2, 1],
            lr_rot_deg: 0.5,
            lr_trans_mm: 2.0,
            depth_lr_multiplier: 4.0,
            lr_scale_decay: 0.5,
            plateau_lr_reductions: 3,
            lr_reduction_factor: 0.25,
            adam: AdamConfig::default(),
            plateau_window: 10,
            plateau_tol: 1e-4,
            max_iters_per_scale: 150,
            chart: Chart::Se3,
            n_samples: None,
            similarity: SimilarityConfig::default(),
        }
    }
}

impl RefineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() || *self.scales.last().unwrap() != 1 {
            return Err(Error::invalid(format!(
                "scales must end at 1, got {:?}",
                self.scales
            )));
        }
        if self.scales.windows(2).any(|w| w[0] <= w[1]) {
            return Err(Error::invalid(format!(
                "scales must be strictly decreasing, got {:?}",
                self.scales
            )));
        }
        for (name, v) in [
            ("lr_rot_deg", self.lr_rot_deg),
            ("lr_trans_mm", self.lr_trans_mm),
            ("depth_lr_multiplier", self.depth_lr_multiplier),
            ("lr_scale_decay", self.lr_scale_decay),
            ("lr_reduction_factor", self.lr_reduction_factor),
            ("plateau_tol", self.plateau_tol),
            ("adam.epsilon", self.adam.epsilon),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(format!("{name} must be positive, got {v}")));
            }
        }
        for (name, b) in [
            ("adam.beta1", self.adam.beta1),
            ("adam.beta2", self.adam.beta2),
        ] {
            if !(b > 0.0 && b < 1.0) {
                return Err(Error::invalid(format!(
                    "{name} must lie in (0, 1), got {b}"
                )));
            }
        }
        if self.plateau_window == 0 {
            return Err(Error::invalid("plateau_window must be >= 1"));
        }
        if let Some(n) = &self.n_samples {
            if n.len() != self.scales.len() {
                return Err(Error::invalid("n_samples needs one entry per scale"));
            }
            if n.iter().any(|&m| m < 2) {
                return Err(Error::invalid("n_samples entries must be >= 2"));
            }
        }
        self.similarity.validate()
    }

    fn samples_at(&self, scale_index: usize, v: &Volume) -> usize {
        match &self.n_samples {
            Some(n) => n[scale_index],
            None => crate::render::default_samples(v),
        }
    }

    /// Per-parameter learning rates at the given scale index.
    fn learning_rates(&self, scale_index: usize, depth_axis: usize) -> [f64; 6] {
        let f = self.lr_scale_decay.powi(scale_index as i32);
        let mut lr = [
            self.lr_rot_deg,
            self.lr_rot_deg,
            self.lr_rot_deg,
            self.lr_trans_mm,
            self.lr_trans_mm,
            self.lr_trans_mm,
        ];
        lr[3 + depth_axis] *= self.depth_lr_multiplier;
        lr.map(|x| x * f)
    }
}

/// Registration settings as stored in a config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistrationConfig {
    #[serde(default)]
    pub refine: RefineConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub init: Option<InitStrategy>,
    #[serde(default = "one")]
    pub top_r: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AdamState {
    pub m: [f64; 6],
    pub v: [f64; 6],
    pub t: u32,
}

/// One bias-corrected Adam update for ascent; returns the increment to add
/// to the parameters.
pub fn adam_step(
    state: &mut AdamState,
    grad: &[f64; 6],
    lr: &[f64; 6],
    cfg: &AdamConfig,
) -> Result<[f64; 6]> {
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::Numerical(format!("non-finite gradient {grad:?}")));
    }
    state.t += 1;
    let b1t = 1.0 - cfg.beta1.powi(state.t as i32);
    let b2t = 1.0 - cfg.beta2.powi(state.t as i32);
    let mut inc = [0.0; 6];
    for i in 0..6 {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        let mh = state.m[i] / b1t;
        let vh = state.v[i] / b2t;
        inc[i] = lr[i] * mh / (vh.sqrt() + cfg.epsilon);
    }
    Ok(inc)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub scale: usize,
    pub iter: usize,
    pub metric: f64,
    pub pose: EulerPose,
    pub grad_norm: f64,
    pub ms: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The finest scale plateaued.
    Plateau,
    /// The finest scale ran out of iterations.
    MaxIters,
    /// Nothing to do (`max_iters_per_scale = 0`).
    NoIterations,
    /// The metric or its gradient became non-finite.
    NonFinite,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegistrationTrace {
    pub records: Vec<IterationRecord>,
    pub final_pose: Pose,
    pub final_metric: f64,
    pub final_grad_norm: f64,
    pub termination: Termination,
    /// Set when the Euler chart hit gimbal lock and se3 took over.
    pub chart_switched: bool,
    pub diagnostic: Option<String>,
}

pub const TRACE_CSV_HEADER: &str = "scale,iter,metric,alpha,beta,gamma,x,y,z,grad_norm,ms\n";

impl RegistrationTrace {
    pub fn to_csv(&self) -> String {
        let mut s = String::from(TRACE_CSV_HEADER);
        for r in &self.records {
            let [a, b, g, x, y, z] = r.pose.to_array();
            s.push_str(&format!(
                "{},{},{},{a},{b},{g},{x},{y},{z},{},{:.3}\n",
                r.scale, r.iter, r.metric, r.grad_norm, r.ms
            ));
        }
        s
    }
}

fn norm6(g: &[f64; 6]) -> f64 {
    g.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Tracks the plateau criterion: the best value has not improved by more
/// than `tol` over the last `window` iterations.
struct Plateau {
    best: f64,
    mark: f64,
    mark_iter: usize,
    window: usize,
    tol: f64,
}

impl Plateau {
    fn new(window: usize, tol: f64) -> Self {
        Plateau {
            best: f64::NEG_INFINITY,
            mark: f64::NEG_INFINITY,
            mark_iter: 0,
            window,
            tol,
        }
    }

    fn reset(&mut self, iter: usize) {
        self.mark = self.best;
        self.mark_iter = iter;
    }

    /// Records the metric at iteration `iter` (0-based) and reports whether
    /// the scale has plateaued.
    fn update(&mut self, iter: usize, value: f64) -> bool {
        self.best = self.best.max(value);
        if self.best > self.mark + self.tol {
            self.mark = self.best;
            self.mark_iter = iter;
        }
        iter >= self.mark_iter + self.window && iter >= self.window
    }
}

/// Multiscale Adam ascent of the similarity between `target` and renders
/// of `v`, starting at `init`.
pub fn refine(
    target: &Image,
    v: &Volume,
    k: &Intrinsics,
    init: &Pose,
    cfg: &RefineConfig,
) -> Result<(Pose, RegistrationTrace)> {
    cfg.validate()?;
    if target.height != k.height || target.width != k.width {
        return Err(Error::invalid(format!(
            "target is {}x{} but intrinsics describe {}x{}; canonicalize first",
            target.height, target.width, k.height, k.width
        )));
    }
    let mut trace = RegistrationTrace {
        records: Vec::new(),
        final_pose: *init,
        final_metric: f64::NAN,
        final_grad_norm: f64::NAN,
        termination: Termination::NoIterations,
        chart_switched: false,
        diagnostic: None,
    };
    if cfg.max_iters_per_scale == 0 {
        return Ok((*init, trace));
    }
    let mut chart = cfg.chart;
    let mut pose = *init;
    let depth_axis = k.orientation.depth_axis();
    let last = cfg.scales.len() - 1;
    // The starting pose competes too, so refine never returns anything worse.
    let start = combined(
        &render_trilinear(v, &make_rays(k, init), cfg.samples_at(last, v))?,
        target,
        &cfg.similarity.fitted_to(target.height, target.width),
    )?;
    let mut best = if start.is_finite() {
        (start, pose, f64::NAN)
    } else {
        (f64::NEG_INFINITY, pose, f64::NAN)
    };

    for (si, &scale) in cfg.scales.iter().enumerate() {
        let ks = k.downsample(scale)?;
        let ts = target.downsample(scale)?;
        let n_samples = cfg.samples_at(si, v);
        let sim = cfg.similarity.fitted_to(ts.height, ts.width);
        let base_lr = cfg.learning_rates(si, depth_axis);
        let mut lr_factor = 1.0;
        let mut reductions = 0;
        let mut adam = AdamState::default();
        let mut plateau = Plateau::new(cfg.plateau_window, cfg.plateau_tol);
        let mut finished = Termination::MaxIters;

        for iter in 0..cfg.max_iters_per_scale {
            let t0 = Instant::now();
            let evaluated =
                match similarity_gradient_wrt_pose(&ts, v, &ks, &pose, n_samples, &sim, chart) {
                    Err(Error::InvalidArgument(msg))
                        if chart == Chart::EulerZxy && msg.contains("gimbal") =>
                    {
                        log::warn!(
                            "Euler chart hit gimbal lock at scale {scale}; switching to se3"
                        );
                        chart = Chart::Se3;
                        trace.chart_switched = true;
                        adam = AdamState::default();
                        similarity_gradient_wrt_pose(&ts, v, &ks, &pose, n_samples, &sim, chart)
                    }
                    other => other,
                };
            let (value, grad) = match evaluated {
                Ok(r) => r,
                Err(Error::Numerical(msg)) => {
                    trace.termination = Termination::NonFinite;
                    trace.diagnostic = Some(msg);
                    let (m, p, g) = if best.0.is_finite() {
                        best
                    } else {
                        (f64::NAN, pose, f64::NAN)
                    };
                    trace.final_pose = p;
                    trace.final_metric = m;
                    trace.final_grad_norm = g;
                    return Ok((p, trace));
                }
                Err(e) => return Err(e),
            };
            let gn = norm6(&grad);
            if si == last && value > best.0 {
                best = (value, pose, gn);
            }
            trace.records.push(IterationRecord {
                scale,
                iter,
                metric: value,
                pose: pose_to_euler(&pose).euler,
                grad_norm: gn,
                ms: 0.0,
            });

            if plateau.update(iter, value) {
                if reductions < cfg.plateau_lr_reductions {
                    reductions += 1;
                    lr_factor *= cfg.lr_reduction_factor;
                    plateau.reset(iter);
                } else {
                    finished = Termination::Plateau;
                    trace.records.last_mut().unwrap().ms = t0.elapsed().as_secs_f64() * 1e3;
                    break;
                }
            }
            let lr = base_lr.map(|x| x * lr_factor);
            let inc = adam_step(&mut adam, &grad, &lr, &cfg.adam)?;
            pose = chart.perturb(&pose, &inc)?;
            trace.records.last_mut().unwrap().ms = t0.elapsed().as_secs_f64() * 1e3;
        }
        log::debug!(
            "scale {scale}: {:?} after {} records",
            finished,
            trace.records.len()
        );
        if si == last {
            trace.termination = finished;
        }
    }

    // The final iterate has not been scored yet at the finest scale.
    let n_last = cfg.samples_at(last, v);
    let sim = cfg.similarity.fitted_to(target.height, target.width);
    let value = combined(
        &render_trilinear(v, &make_rays(k, &pose), n_last)?,
        target,
        &sim,
    )?;
    if value > best.0 {
        best = (value, pose, f64::NAN);
    }
    trace.final_pose = best.1;
    trace.final_metric = best.0;
    trace.final_grad_norm = best.2;
    Ok((best.1, trace))
}

/// Candidate poses scored at the coarsest scale, best first.
pub fn initialize(
    strategy: &InitStrategy,
    target: &Image,
    v: &Volume,
    k: &Intrinsics,
    cfg: &RefineConfig,
) -> Result<Vec<(Pose, f64)>> {
    cfg.validate()?;
    let scale = cfg.scales[0];
    let ks = k.downsample(scale)?;
    let ts = target.downsample(scale)?;
    let n = cfg.samples_at(0, v);
    let sim = cfg.similarity.fitted_to(ts.height, ts.width);
    let mut scored = Vec::new();
    for e in strategy.candidates()? {
        let pose = e.to_pose()?;
        let img = render_trilinear(v, &make_rays(&ks, &pose), n)?;
        let value = combined(&img, &ts, &sim)?;
        scored.push((
            pose,
            if value.is_finite() {
                value
            } else {
                f64::NEG_INFINITY
            },
        ));
    }
    // Stable sort keeps the sampling order among ties.
    scored.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(scored)
}

#[derive(Debug, Clone)]
pub struct Registration {
    pub pose: Pose,
    pub metric: f64,
    pub report: Option<ErrorReport>,
    pub trace: RegistrationTrace,
    /// Index of the winning candidate in the initialization ranking.
    pub candidate: usize,
}

/// Refines the `top_r` best initial candidates and keeps the one with the
/// highest final metric (ties go to the smaller final gradient norm).
/// With `truth` and `fiducials`, the result carries an error report.
#[allow(clippy::too_many_arguments)]
pub fn register(
    target: &Image,
    v: &Volume,
    k: &Intrinsics,
    strategy: &InitStrategy,
    cfg: &RefineConfig,
    top_r: usize,
    truth: Option<&Pose>,
    fiducials: Option<&FiducialSet>,
) -> Result<Registration> {
    if top_r == 0 {
        return Err(Error::invalid("top_r must be >= 1"));
    }
    let candidates = initialize(strategy, target, v, k, cfg)?;
    if top_r > candidates.len() {
        return Err(Error::invalid(format!(
            "top_r = {top_r} exceeds the {} initial candidates",
            candidates.len()
        )));
    }
    let mut best: Option<Registration> = None;
    for (i, (init, _)) in candidates.iter().take(top_r).enumerate() {
        let (pose, trace) = refine(target, v, k, init, cfg)?;
        let metric = trace.final_metric;
        let better = match &best {
            None => true,
            Some(b) => {
                metric > b.metric
                    || (metric == b.metric
                        && trace
                            .final_grad_norm
                            .total_cmp(&b.trace.final_grad_norm)
                            .is_lt())
            }
        };
        if better {
            best = Some(Registration {
                pose,
                metric,
                report: None,
                trace,
                candidate: i,
            });
        }
    }
    let mut best = best.unwrap();
    if let Some(t) = truth {
        best.report = Some(full_report(t, &best.pose, k, fiducials)?);
    }
    Ok(best)
}
