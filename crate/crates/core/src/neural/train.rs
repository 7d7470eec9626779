//! Mini-batch training on 2.5D slices drawn from a censored training view.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::input::{input_stack_window, standardize, Window, DEFAULT_Z_SLICES};
use super::loss::{lopsided_loss, softmax2, LossConfig};
use super::optim::OptimizerState;
use super::{NetworkModel, Real, Tensor};
use crate::censor::HyperparameterPoint;
use crate::error::{Error, Result};
use crate::seeds::{self, tag};
use crate::volume::{MaskVolume, Volume};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainSchedule {
    pub steps: usize,
    pub batch_size: usize,
    /// Probability of drawing a slice that contains a visible lesion.
    pub lesion_slice_prob: f64,
    /// Square in-plane crop size; `None` trains on whole slices.
    pub crop: Option<usize>,
    pub z_slices: usize,
    pub sampling_seed: u64,
    /// Decay of the exponential moving average of the weights that is
    /// returned as the trained model; 0 returns the last iterate.
    pub weight_ema: f64,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            steps: 300,
            batch_size: 4,
            lesion_slice_prob: 0.5,
            crop: Some(32),
            z_slices: DEFAULT_Z_SLICES,
            sampling_seed: 0,
            weight_ema: 0.99,
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.lesion_slice_prob) {
            return Err(Error::Config("lesion_slice_prob must lie in [0, 1]".into()));
        }
        if self.z_slices.is_multiple_of(2) {
            return Err(Error::Config("z_slices must be odd".into()));
        }
        if self.crop == Some(0) {
            return Err(Error::Config("crop must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.weight_ema) {
            return Err(Error::Config(format!("weight_ema must lie in [0, 1), got {}", self.weight_ema)));
        }
        Ok(())
    }
}

/// One training patient: its image and the (possibly censored) labels the
/// network is allowed to see.
#[derive(Debug, Clone)]
pub struct ViewCase<'a> {
    pub patient_id: &'a str,
    pub image: &'a Volume,
    pub labels: MaskVolume,
}

#[derive(Debug, Clone, Default)]
pub struct TrainingView<'a> {
    pub cases: Vec<ViewCase<'a>>,
}

impl<'a> TrainingView<'a> {
    pub fn patient_ids(&self) -> impl Iterator<Item = &str> {
        self.cases.iter().map(|c| c.patient_id)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: NetworkModel,
    /// Mean batch loss per step.
    pub loss_trace: Vec<f64>,
}

/// Loss and parameter gradient of one labelled input.
pub fn backward<T: Real>(
    graph: &Graph,
    params: &[T],
    x: Tensor<T>,
    labels: &[u8],
    cfg: &LossConfig,
) -> Result<(f64, Vec<T>)> {
    let mut grads = vec![T::ZERO; graph.n_params()];
    let loss = accumulate_gradient(graph, params, x, labels, cfg, T::ONE, &mut grads)?;
    Ok((loss, grads))
}

fn accumulate_gradient<T: Real>(
    graph: &Graph,
    params: &[T],
    x: Tensor<T>,
    labels: &[u8],
    cfg: &LossConfig,
    scale: T,
    grads: &mut [T],
) -> Result<f64> {
    let trace = graph.forward(params, x)?;
    let logits = trace.output();
    if labels.len() != logits.plane() {
        return Err(Error::Shape(format!("{} labels for {} output pixels", labels.len(), logits.plane())));
    }
    let probs = softmax2(logits);
    let out = lopsided_loss(&probs.data, labels, cfg);
    let mut g = Tensor::from_vec(2, logits.h, logits.w, out.grad_logits);
    if scale != T::ONE {
        for v in &mut g.data {
            *v *= scale;
        }
    }
    graph.backward(params, &trace, g, grads)?;
    Ok(out.loss)
}

struct LesionSlice {
    case: usize,
    z: usize,
    /// In-plane `(x, y)` of visible foreground pixels.
    pixels: Vec<(usize, usize)>,
}

fn lesion_slices(view: &TrainingView) -> Vec<LesionSlice> {
    let mut out = Vec::new();
    for (ci, case) in view.cases.iter().enumerate() {
        let [nx, ny, nz] = case.labels.dims();
        for z in 0..nz {
            let mut pixels = Vec::new();
            for y in 0..ny {
                for x in 0..nx {
                    if case.labels.get(x, y, z) {
                        pixels.push((x, y));
                    }
                }
            }
            if !pixels.is_empty() {
                out.push(LesionSlice { case: ci, z, pixels });
            }
        }
    }
    out
}

fn window_labels(mask: &MaskVolume, z: usize, win: Window) -> Vec<u8> {
    let mut out = Vec::with_capacity(win.width * win.height);
    for y in win.y0..win.y0 + win.height {
        for x in win.x0..win.x0 + win.width {
            out.push(mask.get(x, y, z) as u8);
        }
    }
    out
}

/// Start of a `size`-wide window along an axis of length `n` that contains `at`.
fn covering_start<R: Rng>(rng: &mut R, at: usize, size: usize, n: usize) -> usize {
    let lo = at.saturating_sub(size - 1);
    let hi = at.min(n - size);
    rng.random_range(lo..=hi)
}

/// Runs `schedule.steps` optimizer steps. Deterministic given the model's
/// parameters and `schedule.sampling_seed`.
pub fn train(
    model: NetworkModel,
    view: &TrainingView,
    hp: &HyperparameterPoint,
    cfg: &LossConfig,
    schedule: &TrainSchedule,
) -> Result<TrainOutcome> {
    schedule.validate()?;
    if view.cases.is_empty() {
        return Err(Error::Config("training view is empty".into()));
    }
    let mut model = model;
    let mut loss_trace = Vec::with_capacity(schedule.steps);
    if schedule.steps == 0 {
        return Ok(TrainOutcome { model, loss_trace });
    }
    let [nx, ny, nz] = view.cases[0].image.dims();
    if view.cases.iter().any(|c| c.image.dims() != [nx, ny, nz] || c.labels.dims() != [nx, ny, nz]) {
        return Err(Error::Shape("training view mixes volume sizes".into()));
    }
    let crop = schedule.crop.map(|c| c.min(nx).min(ny));
    let multiple = model.arch.spatial_multiple();
    let (cw, ch) = crop.map_or((nx, ny), |c| (c, c));
    if cw % multiple != 0 || ch % multiple != 0 {
        return Err(Error::Config(format!("training window {cw}x{ch} is not a multiple of {multiple}")));
    }

    let graph = model.graph().clone();
    let images: Vec<Volume> = view.cases.iter().map(|c| standardize(c.image)).collect();
    let positives = lesion_slices(view);
    let mut rng = seeds::rng(schedule.sampling_seed, tag::SAMPLING, 0);
    let mut opt = OptimizerState::new(hp.optimizer, hp.learning_rate, hp.l2_lambda, model.param_count());
    let mut grads = vec![0.0f32; model.param_count()];
    let scale = 1.0 / schedule.batch_size as f32;
    let decay = schedule.weight_ema;
    let mut ema: Vec<f64> = model.params.iter().map(|&p| p as f64).collect();

    for step in 0..schedule.steps {
        grads.fill(0.0);
        let mut batch_loss = 0.0;
        for _ in 0..schedule.batch_size {
            let (ci, z, anchor) = if !positives.is_empty() && rng.random_bool(schedule.lesion_slice_prob) {
                let s = &positives[rng.random_range(0..positives.len())];
                (s.case, s.z, Some(s.pixels[rng.random_range(0..s.pixels.len())]))
            } else {
                (rng.random_range(0..view.cases.len()), rng.random_range(0..nz), None)
            };
            let win = match anchor {
                Some((ax, ay)) => Window {
                    x0: covering_start(&mut rng, ax, cw, nx),
                    y0: covering_start(&mut rng, ay, ch, ny),
                    width: cw,
                    height: ch,
                },
                None => Window {
                    x0: rng.random_range(0..=nx - cw),
                    y0: rng.random_range(0..=ny - ch),
                    width: cw,
                    height: ch,
                },
            };
            let x = input_stack_window(&images[ci], z, schedule.z_slices, win)?;
            let labels = window_labels(&view.cases[ci].labels, z, win);
            batch_loss += accumulate_gradient(&graph, &model.params, x, &labels, cfg, scale, &mut grads)?;
        }
        let loss = batch_loss / schedule.batch_size as f64;
        if !loss.is_finite() {
            return Err(Error::Divergence { step, loss });
        }
        loss_trace.push(loss);
        opt.step(&mut model.params, &grads);
        if decay > 0.0 {
            for (e, &p) in ema.iter_mut().zip(&model.params) {
                *e = decay * *e + (1.0 - decay) * p as f64;
            }
        }
    }
    if decay > 0.0 {
        for (p, e) in model.params.iter_mut().zip(&ema) {
            *p = *e as f32;
        }
    }
    Ok(TrainOutcome { model, loss_trace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::neural::arch::ArchSpec;
    use crate::neural::optim::OptimizerKind;
    use crate::synthgen::{generate_cohort, CohortSpec};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_graph() -> (Graph, Vec<f64>) {
        let m = NetworkModel::new(ArchSpec::encoder_decoder(0.25, 2, 4), 3).unwrap();
        (m.graph().clone(), m.params_as::<f64>())
    }

    fn random_input(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> Tensor<f64> {
        Tensor::from_vec(c, h, w, (0..c * h * w).map(|_| rng.random_range(-1.0..1.0)).collect())
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let (graph, mut params) = tiny_graph();
        let x = random_input(&mut rng, 4, 8, 8);
        let labels: Vec<u8> = (0..64).map(|_| rng.random_bool(0.3) as u8).collect();
        let cfg = LossConfig { alpha: 3.0, beta: 0.8 };
        let (_, g) = backward(&graph, &params, x.clone(), &labels, &cfg).unwrap();
        let h = 1e-5;
        let mut checked = 0;
        for _ in 0..60 {
            let i = rng.random_range(0..params.len());
            let orig = params[i];
            params[i] = orig + h;
            let lp = backward(&graph, &params, x.clone(), &labels, &cfg).unwrap().0;
            params[i] = orig - h;
            let lm = backward(&graph, &params, x.clone(), &labels, &cfg).unwrap().0;
            params[i] = orig;
            let fd = (lp - lm) / (2.0 * h);
            let denom = fd.abs().max(g[i].abs()).max(1e-8);
            assert!((fd - g[i]).abs() / denom < 1e-3 || (fd - g[i]).abs() < 1e-9, "param {i}: {fd} vs {}", g[i]);
            checked += 1;
        }
        assert_eq!(checked, 60);
    }

    #[test]
    fn zero_head_gives_softmax_ce_identity() {
        // With the 1x1 head zeroed, logits are 0 everywhere, p = (0.5, 0.5) and
        // the head-bias gradient is the pixel mean of p − onehot(y) when β = 1.
        let (graph, mut params) = tiny_graph();
        let head_len = 2 * 2 + 2; // cin = round(8·0.25) = 2, cout = 2, plus bias
        let n = params.len();
        params[n - head_len..].fill(0.0);
        let x = Tensor::from_vec(4, 4, 4, vec![0.3; 64]);
        let labels: Vec<u8> = (0..16).map(|i| (i % 4 == 0) as u8).collect();
        let (loss, g) = backward(&graph, &params, x, &labels, &LossConfig { alpha: 1.0, beta: 1.0 }).unwrap();
        assert!((loss - 2f64.ln()).abs() < 1e-12);
        let frac_pos = 4.0 / 16.0;
        assert!((g[n - 2] - (0.5 - (1.0 - frac_pos))).abs() < 1e-12);
        assert!((g[n - 1] - (0.5 - frac_pos)).abs() < 1e-12);
    }

    #[test]
    fn positive_branch_gradient_is_linear_in_alpha() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let (graph, params) = tiny_graph();
        let x = random_input(&mut rng, 4, 4, 4);
        let labels = vec![1u8; 16];
        let (_, g1) = backward(&graph, &params, x.clone(), &labels, &LossConfig { alpha: 1.0, beta: 0.5 }).unwrap();
        let (_, g3) = backward(&graph, &params, x, &labels, &LossConfig { alpha: 3.0, beta: 0.5 }).unwrap();
        for (a, b) in g1.iter().zip(&g3) {
            assert!((3.0 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    fn small_cohort() -> crate::synthgen::Cohort {
        generate_cohort(&CohortSpec {
            n_train: 4,
            n_test: 0,
            dims: [32, 32, 8],
            max_lesions: 11,
            min_separation_vox: 1,
            ..Default::default()
        })
        .unwrap()
    }

    fn full_view(c: &crate::synthgen::Cohort) -> TrainingView<'_> {
        TrainingView {
            cases: c
                .train
                .iter()
                .map(|p| ViewCase { patient_id: &p.id, image: &p.image, labels: p.truth.clone() })
                .collect(),
        }
    }

    fn hp() -> HyperparameterPoint {
        HyperparameterPoint { learning_rate: 3e-3, l2_lambda: 1e-3, optimizer: OptimizerKind::Adam }
    }

    #[test]
    fn zero_steps_leave_model_unchanged() {
        let c = small_cohort();
        let m = NetworkModel::new(ArchSpec::encoder_decoder(0.5, 2, 20), 1).unwrap();
        let sched = TrainSchedule { steps: 0, ..Default::default() };
        let out = train(m.clone(), &full_view(&c), &hp(), &LossConfig::default(), &sched).unwrap();
        assert_eq!(out.model, m);
        assert!(out.loss_trace.is_empty());
    }

    #[test]
    fn training_is_deterministic() {
        let c = small_cohort();
        let sched = TrainSchedule { steps: 5, batch_size: 2, crop: Some(16), sampling_seed: 9, ..Default::default() };
        let run = || {
            let m = NetworkModel::new(ArchSpec::encoder_decoder(0.5, 2, 20), 1).unwrap();
            train(m, &full_view(&c), &hp(), &LossConfig::default(), &sched).unwrap()
        };
        let (a, b) = (run(), run());
        assert_eq!(a.model, b.model);
        assert_eq!(a.loss_trace, b.loss_trace);
    }

    #[test]
    fn divergence_is_reported_with_step() {
        let c = small_cohort();
        let sched = TrainSchedule { steps: 50, batch_size: 1, crop: Some(16), ..Default::default() };
        let wild = HyperparameterPoint { learning_rate: 1e30, l2_lambda: 0.0, optimizer: OptimizerKind::Momentum };
        let m = NetworkModel::new(ArchSpec::encoder_decoder(0.5, 2, 20), 1).unwrap();
        let err = train(m, &full_view(&c), &wild, &LossConfig::default(), &sched).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. } | Error::NumericalInstability { .. }), "unexpected error {err}");
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn empty_view_and_bad_window_are_config_errors() {
        let c = small_cohort();
        let m = NetworkModel::new(ArchSpec::encoder_decoder(0.5, 3, 20), 1).unwrap();
        let sched = TrainSchedule { steps: 1, ..Default::default() };
        assert!(train(m.clone(), &TrainingView::default(), &hp(), &LossConfig::default(), &sched).is_err());
        let odd = TrainSchedule { steps: 1, crop: Some(10), ..Default::default() };
        assert!(matches!(train(m, &full_view(&c), &hp(), &LossConfig::default(), &odd), Err(Error::Config(_))));
    }
}
