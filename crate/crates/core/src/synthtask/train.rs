use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::generate::{generate_dataset, GenParams, SyntheticVideo};
use crate::backbone::{Model, ModelConfig, ModelState};
use crate::error::{config_err, Error, Result};
use crate::numerics::{Bound, Graph, LinearLayer, NormLayer, ParamSnapshot, ParamStore, Tensor, Var};
use crate::tdtb::StreamMode;

/// Per-frame head over the whole pyramid: each stage map is mean-pooled and
/// layer-normed, and the per-stage linear maps are summed into class
/// logits and the object centre in units of `cell` pixels.
#[derive(Clone, Debug)]
pub struct ToyHead {
    pub store: ParamStore,
    stages: Vec<(NormLayer, LinearLayer, LinearLayer)>,
    pub classes: usize,
    pub cell: f64,
}

impl ToyHead {
    pub fn new(dims: &[usize], classes: usize, cell: f64, std: f64, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let stages = dims
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let norm = NormLayer::new(&mut store, &format!("head{i}.norm"), d);
                let cls = LinearLayer::new(&mut store, &format!("head{i}.cls"), d, classes, true, std, &mut rng);
                let reg = LinearLayer::new(&mut store, &format!("head{i}.reg"), d, 2, true, std, &mut rng);
                (norm, cls, reg)
            })
            .collect();
        Self {
            store,
            stages,
            classes,
            cell,
        }
    }

    /// Head matching `model`'s stage widths.
    pub fn for_model(model: &Model, classes: usize, seed: u64) -> Self {
        let dims: Vec<usize> = model.stages().iter().map(|s| s.dim).collect();
        Self::new(&dims, classes, 8.0, model.config().init_std, seed)
    }

    /// `(logits, centre)` from the per-stage maps.
    pub fn forward(&self, g: &mut Graph, p: &Bound, features: &[Var]) -> Result<(Var, Var)> {
        if features.len() != self.stages.len() || features.is_empty() {
            return config_err(format!("head expects {} stage maps, got {}", self.stages.len(), features.len()));
        }
        let mut out: Option<(Var, Var)> = None;
        for ((norm, cls, reg), &f) in self.stages.iter().zip(features) {
            let mean = g.mean_rows(f);
            let pooled = norm.forward(g, p, mean)?;
            let (l, c) = (cls.forward(g, p, pooled)?, reg.forward(g, p, pooled)?);
            out = Some(match out {
                None => (l, c),
                Some((l0, c0)) => (g.add(l0, l)?, g.add(c0, c)?),
            });
        }
        Ok(out.expect("at least one stage"))
    }
}

/// Adam with bias correction.
#[derive(Clone, Debug)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
    t: i32,
}

impl Adam {
    pub fn new(lr: f64, store: &ParamStore) -> Self {
        let zeros: Vec<Tensor> = store.ids().map(|id| Tensor::zeros(store.get(id).shape())).collect();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &[Tensor]) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, id) in store.ids().collect::<Vec<_>>().into_iter().enumerate() {
            if self.lr == 0.0 {
                continue;
            }
            let p = store.get_mut(id);
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, (w, g)) in p.data_mut().iter_mut().zip(grads[i].data()).enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.eps);
            }
        }
    }
}

fn default_center_weight() -> f64 {
    0.1
}
fn default_lr() -> f64 {
    1e-3
}
fn default_steps() -> usize {
    150
}
fn default_batch() -> usize {
    4
}
fn recompute() -> StreamMode {
    StreamMode::Recompute
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Videos per step; gradients are averaged over them.
    #[serde(default = "default_batch")]
    pub batch: usize,
    #[serde(default = "default_lr")]
    pub lr: f64,
    /// Weight of the centre regression term.
    #[serde(default = "default_center_weight")]
    pub center_weight: f64,
    /// Seed of the video order.
    #[serde(default)]
    pub seed: u64,
    /// Stream mode during training; reuse would leave key/value weights
    /// without gradient between refreshes.
    #[serde(default = "recompute")]
    pub mode: StreamMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: default_steps(),
            batch: default_batch(),
            lr: default_lr(),
            center_weight: default_center_weight(),
            seed: 0,
            mode: StreamMode::Recompute,
        }
    }
}

fn center_target(video: &SyntheticVideo, f: usize, cell: f64) -> Tensor {
    let (cy, cx) = video.labels[f].center;
    Tensor::new(&[2], vec![cy as f64 / cell, cx as f64 / cell]).expect("two values")
}

/// Loss and parameter gradients (model then head) of one video, averaged
/// over frames. Reference features are constants, so each frame is its
/// own graph.
pub fn video_gradients(
    model: &Model,
    head: &ToyHead,
    video: &SyntheticVideo,
    center_weight: f64,
    mode: StreamMode,
) -> Result<(f64, Vec<Tensor>, Vec<Tensor>)> {
    let n = video.frames.len();
    if n == 0 {
        return config_err("video has no frames");
    }
    let mut state = model.new_state()?;
    model.seed(&mut state, &video.frames[0])?;
    let zeros = |s: &ParamStore| -> Vec<Tensor> { s.ids().map(|id| Tensor::zeros(s.get(id).shape())).collect() };
    let (mut gm, mut gh) = (zeros(&model.store), zeros(&head.store));
    let mut total = 0.0;
    for (f, frame) in video.frames.iter().enumerate() {
        let mut g = Graph::new();
        let pm = g.bind(&model.store, true);
        let ph = g.bind(&head.store, true);
        let x = g.constant(frame.clone());
        let outs = model.forward(&mut g, &pm, &mut state, x, mode)?;
        let (logits, center) = head.forward(&mut g, &ph, &outs)?;
        let ce = g.cross_entropy(logits, video.labels[f].class)?;
        let mse = g.mean_squared_error(center, center_target(video, f, head.cell))?;
        let mse = g.scale(mse, center_weight);
        let loss = g.add(ce, mse)?;
        let loss = g.scale(loss, 1.0 / n as f64);
        total += g.value(loss).data()[0];
        let grads = g.backward(loss)?;
        for (acc, gr) in gm.iter_mut().zip(grads.params(&pm, &model.store)) {
            acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b);
        }
        for (acc, gr) in gh.iter_mut().zip(grads.params(&ph, &head.store)) {
            acc.data_mut().iter_mut().zip(gr.data()).for_each(|(a, b)| *a += b);
        }
    }
    Ok((total, gm, gh))
}

/// One pass over `videos` in reverse draw order: classes take turns, and
/// videos within a class are shuffled.
fn balanced_order(videos: &[SyntheticVideo], rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut by_class: Vec<Vec<usize>> = Vec::new();
    for (i, v) in videos.iter().enumerate() {
        let c = v.labels.first().map_or(0, |l| l.class);
        if by_class.len() <= c {
            by_class.resize(c + 1, Vec::new());
        }
        by_class[c].push(i);
    }
    by_class.iter_mut().for_each(|g| g.shuffle(rng));
    let mut order = Vec::with_capacity(videos.len());
    for r in 0..by_class.iter().map(Vec::len).max().unwrap_or(0) {
        order.extend(by_class.iter().filter_map(|g| g.get(r)));
    }
    order.reverse();
    order
}

/// Adam on `cfg.batch` videos per step, drawn without replacement with the
/// classes taking turns. Returns the per-step mean loss.
pub fn train(model: &mut Model, head: &mut ToyHead, videos: &[SyntheticVideo], cfg: &TrainConfig) -> Result<Vec<f64>> {
    if videos.is_empty() {
        return config_err("training set is empty");
    }
    if cfg.batch == 0 {
        return config_err("batch must be at least 1");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = Vec::new();
    let mut opt_m = Adam::new(cfg.lr, &model.store);
    let mut opt_h = Adam::new(cfg.lr, &head.store);
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut acc: Option<(f64, Vec<Tensor>, Vec<Tensor>)> = None;
        for _ in 0..cfg.batch {
            if order.is_empty() {
                order = balanced_order(videos, &mut rng);
            }
            let v = &videos[order.pop().expect("refilled above")];
            let (loss, gm, gh) = video_gradients(model, head, v, cfg.center_weight, cfg.mode)?;
            acc = Some(match acc {
                None => (loss, gm, gh),
                Some((l, mut am, mut ah)) => {
                    for (a, g) in am.iter_mut().chain(ah.iter_mut()).zip(gm.iter().chain(&gh)) {
                        a.data_mut().iter_mut().zip(g.data()).for_each(|(a, b)| *a += b);
                    }
                    (l + loss, am, ah)
                }
            });
        }
        let (loss, mut gm, mut gh) = acc.expect("batch >= 1");
        let k = 1.0 / cfg.batch as f64;
        for g in gm.iter_mut().chain(gh.iter_mut()) {
            g.data_mut().iter_mut().for_each(|x| *x *= k);
        }
        let loss = loss * k;
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        opt_m.step(&mut model.store, &gm);
        opt_h.step(&mut head.store, &gh);
        losses.push(loss);
    }
    Ok(losses)
}

/// Per-frame predictions: `(class, centre in pixels)`, streaming in reuse
/// mode.
pub fn predict(model: &Model, head: &ToyHead, video: &SyntheticVideo) -> Result<Vec<(usize, (f64, f64))>> {
    predict_with(model, head, video, StreamMode::Reuse)
}

pub fn predict_with(
    model: &Model,
    head: &ToyHead,
    video: &SyntheticVideo,
    mode: StreamMode,
) -> Result<Vec<(usize, (f64, f64))>> {
    let mut state: ModelState = model.new_state()?;
    model.seed(&mut state, &video.frames[0])?;
    video
        .frames
        .iter()
        .map(|frame| {
            let mut g = Graph::new();
            let pm = g.bind(&model.store, false);
            let ph = g.bind(&head.store, false);
            let x = g.constant(frame.clone());
            let outs = model.forward(&mut g, &pm, &mut state, x, mode)?;
            let (logits, center) = head.forward(&mut g, &ph, &outs)?;
            let l = g.value(logits).data();
            let class = (0..l.len()).fold(0, |best, i| if l[i] > l[best] { i } else { best });
            let c = g.value(center).data();
            Ok((class, (c[0] * head.cell, c[1] * head.cell)))
        })
        .collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub frames: usize,
    pub occluded_frames: usize,
    pub accuracy: f64,
    pub occluded_accuracy: f64,
    pub visible_accuracy: f64,
    /// Mean Euclidean centre error in pixels.
    pub center_error: f64,
}

pub fn evaluate(model: &Model, head: &ToyHead, videos: &[SyntheticVideo]) -> Result<Metrics> {
    evaluate_with(model, head, videos, StreamMode::Reuse)
}

pub fn evaluate_with(model: &Model, head: &ToyHead, videos: &[SyntheticVideo], mode: StreamMode) -> Result<Metrics> {
    let (mut n, mut occ, mut hit, mut occ_hit, mut err) = (0usize, 0usize, 0usize, 0usize, 0.0);
    for v in videos {
        for ((class, (py, px)), l) in predict_with(model, head, v, mode)?.into_iter().zip(&v.labels) {
            let ok = class == l.class;
            n += 1;
            hit += usize::from(ok);
            if !l.visible {
                occ += 1;
                occ_hit += usize::from(ok);
            }
            err += ((py - l.center.0 as f64).powi(2) + (px - l.center.1 as f64).powi(2)).sqrt();
        }
    }
    let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
    Ok(Metrics {
        frames: n,
        occluded_frames: occ,
        accuracy: ratio(hit, n),
        occluded_accuracy: ratio(occ_hit, occ),
        visible_accuracy: ratio(hit - occ_hit, n - occ),
        center_error: if n == 0 { 0.0 } else { err / n as f64 },
    })
}

fn default_train_videos() -> usize {
    600
}

/// Short clips with frequent occlusions, so occluded frames carry a useful
/// share of the training signal.
pub fn experiment_data() -> GenParams {
    GenParams {
        frames: 8,
        occlusion_prob: 0.6,
        max_occlusion: 4,
        ..GenParams::default()
    }
}
fn default_test_videos() -> usize {
    32
}

/// Train a temporal model and its space-only twin on the same data and
/// evaluate both.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default = "ModelConfig::toy_t")]
    pub model: ModelConfig,
    #[serde(default = "experiment_data")]
    pub data: GenParams,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default = "default_train_videos")]
    pub train_videos: usize,
    #[serde(default = "default_test_videos")]
    pub test_videos: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            model: ModelConfig::toy_t(),
            data: experiment_data(),
            train: TrainConfig::default(),
            train_videos: default_train_videos(),
            test_videos: default_test_videos(),
        }
    }
}

/// Outcome of training one model.
#[derive(Clone, Debug)]
pub struct RunResult {
    pub name: String,
    pub losses: Vec<f64>,
    pub metrics: Metrics,
    pub model: Model,
    pub head: ToyHead,
}

impl RunResult {
    pub fn snapshot(&self) -> (ParamSnapshot, ParamSnapshot) {
        (self.model.store.to_snapshot(), self.head.store.to_snapshot())
    }
}

/// Train and evaluate one model configuration with everything derived from
/// `seed`: data, weights, head and video order.
/// Training and test videos of one seed; the two sets never share a
/// generator seed.
pub fn datasets(exp: &ExperimentConfig, seed: u64) -> Result<(Vec<SyntheticVideo>, Vec<SyntheticVideo>)> {
    Ok((
        generate_dataset(seed.wrapping_mul(2), exp.train_videos, &exp.data)?,
        generate_dataset(seed.wrapping_mul(2) + 1, exp.test_videos, &exp.data)?,
    ))
}

pub fn run_model(name: &str, model_cfg: &ModelConfig, exp: &ExperimentConfig, seed: u64) -> Result<RunResult> {
    let (train_set, test_set) = datasets(exp, seed)?;
    let mut model = Model::new(ModelConfig {
        seed,
        in_channels: 1,
        ..model_cfg.clone()
    })?;
    let mut head = ToyHead::for_model(&model, exp.data.classes, seed.wrapping_add(1));
    let tc = TrainConfig {
        seed,
        ..exp.train.clone()
    };
    let losses = train(&mut model, &mut head, &train_set, &tc)?;
    let metrics = evaluate(&model, &head, &test_set)?;
    Ok(RunResult {
        name: name.into(),
        losses,
        metrics,
        model,
        head,
    })
}

/// The temporal model and its space-only twin for one seed.
pub fn run_pair(exp: &ExperimentConfig, seed: u64) -> Result<(RunResult, RunResult)> {
    let temporal = run_model("tdvit", &exp.model, exp, seed)?;
    let baseline = ModelConfig {
        space_only: true,
        ..exp.model.clone()
    };
    let space = run_model("space_only", &baseline, exp, seed)?;
    Ok((temporal, space))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthtask::generate_class;

    fn small() -> ModelConfig {
        ModelConfig {
            dilations: vec![1, 2, 4, 8],
            ..ModelConfig::toy_t()
        }
    }

    fn video() -> SyntheticVideo {
        generate_class(3, 1, &GenParams { frames: 8, ..GenParams::default() }).unwrap()
    }

    #[test]
    fn zero_lr_leaves_parameters() {
        let mut m = Model::new(small()).unwrap();
        let mut h = ToyHead::for_model(&m, 4, 0);
        let before = (m.store.to_snapshot(), h.store.to_snapshot());
        let losses = train(&mut m, &mut h, &[video()], &TrainConfig { steps: 3, lr: 0.0, ..TrainConfig::default() }).unwrap();
        assert_eq!(before, (m.store.to_snapshot(), h.store.to_snapshot()));
        assert!(losses.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn training_is_reproducible() {
        let run = || {
            let mut m = Model::new(small()).unwrap();
            let mut h = ToyHead::for_model(&m, 4, 0);
            train(&mut m, &mut h, &[video()], &TrainConfig { steps: 3, ..TrainConfig::default() }).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn divergence_is_reported() {
        let mut m = Model::new(small()).unwrap();
        let mut h = ToyHead::for_model(&m, 4, 0);
        let mut v = video();
        v.frames[2].data_mut()[0] = f64::NAN;
        let r = train(&mut m, &mut h, &[v], &TrainConfig { steps: 2, ..TrainConfig::default() });
        assert!(matches!(r, Err(Error::Diverged { step: 0, .. })));
    }

    #[test]
    fn empty_training_set() {
        let mut m = Model::new(small()).unwrap();
        let mut h = ToyHead::for_model(&m, 4, 0);
        assert!(train(&mut m, &mut h, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = ParamStore::new();
        let id = s.add("w", Tensor::new(&[2], vec![1.0, -1.0]).unwrap());
        let mut opt = Adam::new(0.1, &s);
        opt.step(&mut s, &[Tensor::new(&[2], vec![3.0, -0.5]).unwrap()]);
        let w = s.get(id).data();
        assert!((w[0] - 0.9).abs() < 1e-7 && (w[1] + 0.9).abs() < 1e-7);
    }

    #[test]
    fn batches_cycle_through_classes() {
        let p = GenParams { frames: 8, ..GenParams::default() };
        let videos = crate::synthtask::generate_dataset(1, 10, &p).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut order = balanced_order(&videos, &mut rng);
        order.reverse();
        let classes: Vec<usize> = order.iter().map(|&i| videos[i].labels[0].class).collect();
        assert_eq!(classes, vec![0, 1, 2, 3, 0, 1, 2, 3, 0, 1]);
        order.sort_unstable();
        assert_eq!(order, (0..10).collect::<Vec<_>>());
    }

    #[test]
    fn head_reads_every_stage() {
        let m = Model::new(small()).unwrap();
        let h = ToyHead::for_model(&m, 4, 0);
        let mut st = m.new_state().unwrap();
        let v = video();
        m.seed(&mut st, &v.frames[0]).unwrap();
        let mut g = Graph::new();
        let pm = g.bind(&m.store, false);
        let ph = g.bind(&h.store, false);
        let x = g.constant(v.frames[0].clone());
        let outs = m.forward(&mut g, &pm, &mut st, x, StreamMode::Reuse).unwrap();
        let (logits, center) = h.forward(&mut g, &ph, &outs).unwrap();
        assert_eq!((g.value(logits).len(), g.value(center).len()), (4, 2));
        assert!(h.forward(&mut g, &ph, &outs[..3]).is_err());
    }
}
