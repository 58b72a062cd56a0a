//! Four-stage (or explicitly staged) backbone: patch embedding, patch
//! merging between stages, and per-stage stacks of space and temporal
//! blocks.

mod config;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use config::{
    build_stage, temporal_receptive_field, variant, BlockKind, ModelConfig, Scheme, StageConfig,
    StageSpec, VariantSpec, VARIANTS,
};

use crate::error::{usage_err, Result};
use crate::numerics::{linear, Bound, Graph, LayerParams, LinearLayer, ParamStore, Tensor, Var};
use crate::tdtb::{
    space_block, temporal_block, temporal_block_seed, BlockCounters, BlockWeights, SpaceState,
    StreamMode, TdtbState,
};

/// Gather indices that turn an `h × w` map into `p × p` patch tokens, each
/// flattened in `(py, px, channel)` order. Pixels past the border are zero.
pub fn patch_index(h: usize, w: usize, p: usize) -> (Vec<Option<usize>>, usize, usize) {
    let (hp, wp) = (h.div_ceil(p), w.div_ceil(p));
    let mut idx = Vec::with_capacity(hp * wp * p * p);
    for ty in 0..hp {
        for tx in 0..wp {
            for py in 0..p {
                for px in 0..p {
                    let (y, x) = (ty * p + py, tx * p + px);
                    idx.push((y < h && x < w).then_some(y * w + x));
                }
            }
        }
    }
    (idx, hp, wp)
}

/// Gather indices of 2 × 2 merging, in top-left, top-right, bottom-left,
/// bottom-right order.
pub fn merge_index(h: usize, w: usize) -> (Vec<Option<usize>>, usize, usize) {
    let (h2, w2) = (h.div_ceil(2), w.div_ceil(2));
    let mut idx = Vec::with_capacity(h2 * w2 * 4);
    for oy in 0..h2 {
        for ox in 0..w2 {
            for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                let (y, x) = (2 * oy + dy, 2 * ox + dx);
                idx.push((y < h && x < w).then_some(y * w + x));
            }
        }
    }
    (idx, h2, w2)
}

fn map_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, c] => Ok((h, w, c)),
        ref s => usage_err(format!("expected an H x W x C map, got {s:?}")),
    }
}

fn regroup(g: &mut Graph, x: Var, idx: Vec<Option<usize>>, group: usize, h: usize, w: usize) -> Result<Var> {
    let c = g.value(x).cols();
    g.gather(x, idx.into(), group, &[h, w, group * c])
}

fn embed_graph(g: &mut Graph, x: Var, p: usize) -> Result<Var> {
    let (h, w, _) = map_dims(g.value(x))?;
    let (idx, hp, wp) = patch_index(h, w, p);
    regroup(g, x, idx, p * p, hp, wp)
}

fn merge_graph(g: &mut Graph, x: Var) -> Result<Var> {
    let (h, w, _) = map_dims(g.value(x))?;
    let (idx, h2, w2) = merge_index(h, w);
    regroup(g, x, idx, 4, h2, w2)
}

fn on_graph(x: &Tensor, f: impl FnOnce(&mut Graph, Var) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(x.clone());
    let out = f(&mut g, v)?;
    Ok(g.value(out).clone())
}

/// Split `frame` into `patch × patch` tokens (zero padded) and embed each
/// linearly. `params.weight` is `(patch²·c) × C`.
pub fn patch_embed(frame: &Tensor, params: &LayerParams, patch: usize) -> Result<Tensor> {
    let tokens = on_graph(frame, |g, x| embed_graph(g, x, patch))?;
    linear(&tokens, params)
}

/// Concatenate 2 × 2 neighbourhoods (zero padded) and project `4d → d'`.
pub fn patch_merging(x: &Tensor, params: &LayerParams) -> Result<Tensor> {
    let tokens = on_graph(x, merge_graph)?;
    linear(&tokens, params)
}

/// Per-stream state of one block.
#[derive(Clone, Debug)]
pub enum BlockState {
    Space(SpaceState),
    Temporal(TdtbState),
}

impl BlockState {
    pub fn counters(&self) -> &BlockCounters {
        match self {
            BlockState::Space(s) => &s.counters,
            BlockState::Temporal(s) => &s.counters,
        }
    }

    pub fn temporal(&self) -> Option<&TdtbState> {
        match self {
            BlockState::Temporal(s) => Some(s),
            BlockState::Space(_) => None,
        }
    }
}

/// Everything a stream carries between frames. Cloning is cheap: memory
/// entries are shared.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub blocks: Vec<BlockState>,
    frames: i64,
    seeded: bool,
}

impl ModelState {
    /// Frames processed so far.
    pub fn frames(&self) -> i64 {
        self.frames
    }

    pub fn is_seeded(&self) -> bool {
        self.seeded
    }

    pub fn temporal_blocks(&self) -> impl Iterator<Item = &TdtbState> {
        self.blocks.iter().filter_map(BlockState::temporal)
    }

    pub fn total_counters(&self) -> BlockCounters {
        let mut c = BlockCounters::default();
        for b in &self.blocks {
            c.add(b.counters());
        }
        c
    }

    /// Drop every cached K/V pair, e.g. after a parameter update.
    pub fn invalidate_kv(&mut self) {
        for b in &mut self.blocks {
            if let BlockState::Temporal(s) = b {
                s.invalidate_kv();
            }
        }
    }
}

/// Location of a block in the model.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct BlockInfo {
    pub id: usize,
    pub stage: usize,
    pub kind: BlockKind,
    pub dilation: usize,
}

#[derive(Clone, Debug)]
pub struct Model {
    config: ModelConfig,
    stages: Vec<StageConfig>,
    pub store: ParamStore,
    embed: LinearLayer,
    merges: Vec<LinearLayer>,
    blocks: Vec<Vec<BlockWeights>>,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        let stages = config.resolve()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let std = config.init_std;
        let p = config.patch_size;
        let embed = LinearLayer::new(
            &mut store,
            "embed",
            p * p * config.in_channels,
            stages[0].dim,
            true,
            std,
            &mut rng,
        );
        let mut merges = Vec::new();
        let mut blocks = Vec::new();
        for (i, s) in stages.iter().enumerate() {
            if i > 0 {
                let d_in = 4 * stages[i - 1].dim;
                merges.push(LinearLayer::new(&mut store, &format!("merge{i}"), d_in, s.dim, true, std, &mut rng));
            }
            let stage_blocks = s
                .blocks
                .iter()
                .enumerate()
                .map(|(j, kind)| {
                    let cfg = match kind {
                        BlockKind::Space => &s.space_attention,
                        BlockKind::Temporal => &s.attention,
                    };
                    BlockWeights::new(&mut store, &format!("stage{i}.block{j}"), cfg, std, &mut rng)
                })
                .collect();
            blocks.push(stage_blocks);
        }
        Ok(Self {
            config,
            stages,
            store,
            embed,
            merges,
            blocks,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn stages(&self) -> &[StageConfig] {
        &self.stages
    }

    pub fn num_params(&self) -> usize {
        self.store.num_scalars()
    }

    /// Every block in execution order.
    pub fn block_infos(&self) -> Vec<BlockInfo> {
        let mut out = Vec::new();
        for (stage, s) in self.stages.iter().enumerate() {
            for &kind in &s.blocks {
                out.push(BlockInfo {
                    id: out.len(),
                    stage,
                    kind,
                    dilation: s.dilation,
                });
            }
        }
        out
    }

    /// Weights of block `id` (execution order).
    pub fn block_weights(&self, id: usize) -> Option<&BlockWeights> {
        self.blocks.iter().flatten().nth(id)
    }

    /// Closed-form temporal receptive field, one reference per temporal
    /// block. Earliest sampling reaches back a full memory, so each step is
    /// the dilation times `memory_factor`.
    pub fn temporal_receptive_field(&self) -> usize {
        let blocks: Vec<(usize, usize)> = self
            .block_infos()
            .iter()
            .filter(|b| b.kind == BlockKind::Temporal)
            .map(|b| (2, b.dilation * self.config.memory_factor))
            .collect();
        temporal_receptive_field(&blocks).expect("validated dilations")
    }

    pub fn new_state(&self) -> Result<ModelState> {
        let strategy = self.config.sampling_strategy();
        let blocks = self
            .block_infos()
            .into_iter()
            .map(|b| {
                Ok(match b.kind {
                    BlockKind::Space => BlockState::Space(SpaceState::new()),
                    BlockKind::Temporal => BlockState::Temporal(TdtbState::with_capacity(
                        b.id,
                        b.dilation,
                        b.dilation * self.config.memory_factor,
                        strategy,
                        self.config.memory_write,
                    )?),
                })
            })
            .collect::<Result<_>>()?;
        Ok(ModelState {
            blocks,
            frames: 0,
            seeded: false,
        })
    }

    fn check_frame(&self, frame: &Tensor) -> Result<()> {
        let (_, _, c) = map_dims(frame)?;
        if c != self.config.in_channels {
            return usage_err(format!(
                "frame has {c} channels, model expects {}",
                self.config.in_channels
            ));
        }
        Ok(())
    }

    fn run(
        &self,
        g: &mut Graph,
        p: &Bound,
        state: &mut ModelState,
        frame: Var,
        mode: StreamMode,
        seeding: bool,
    ) -> Result<Vec<Var>> {
        self.check_frame(g.value(frame))?;
        if state.blocks.len() != self.block_infos().len() {
            return usage_err("state was built for a different model");
        }
        let t = state.frames + 1;
        let mut x = embed_graph(g, frame, self.config.patch_size)?;
        x = self.embed.forward(g, p, x)?;
        let mut outs = Vec::with_capacity(self.stages.len());
        let mut id = 0;
        for (i, s) in self.stages.iter().enumerate() {
            if i > 0 {
                let m = merge_graph(g, x)?;
                x = self.merges[i - 1].forward(g, p, m)?;
            }
            for w in &self.blocks[i] {
                let v = w.vars(p);
                x = match &mut state.blocks[id] {
                    BlockState::Space(st) if seeding => space_block(g, &v, &s.space_attention, &mut st.clone(), x)?,
                    BlockState::Space(st) => space_block(g, &v, &s.space_attention, st, x)?,
                    BlockState::Temporal(st) if seeding => temporal_block_seed(g, &v, &s.attention, st, x)?,
                    BlockState::Temporal(st) => temporal_block(g, &v, &s.attention, st, x, t, mode)?,
                };
                id += 1;
            }
            outs.push(x);
        }
        Ok(outs)
    }

    /// Record one frame on `g` with parameters bound as `p`; returns the
    /// stage outputs. Memories must already be seeded.
    pub fn forward(
        &self,
        g: &mut Graph,
        p: &Bound,
        state: &mut ModelState,
        frame: Var,
        mode: StreamMode,
    ) -> Result<Vec<Var>> {
        let outs = self.run(g, p, state, frame, mode, false)?;
        state.frames += 1;
        Ok(outs)
    }

    /// Fill every temporal memory with copies of that block's input on
    /// `frame`. Only valid before the first frame.
    pub fn seed_graph(&self, g: &mut Graph, p: &Bound, state: &mut ModelState, frame: Var) -> Result<()> {
        if state.frames != 0 || state.seeded {
            return usage_err("memories can only be seeded before the first frame");
        }
        self.run(g, p, state, frame, StreamMode::Reuse, true)?;
        state.seeded = true;
        Ok(())
    }

    pub fn seed(&self, state: &mut ModelState, frame: &Tensor) -> Result<()> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let f = g.constant(frame.clone());
        self.seed_graph(&mut g, &p, state, f)
    }

    /// Inference on one frame: the pyramid of stage outputs.
    pub fn forward_frame(&self, state: &mut ModelState, frame: &Tensor, mode: StreamMode) -> Result<Vec<Tensor>> {
        let mut g = Graph::new();
        let p = g.bind(&self.store, false);
        let f = g.constant(frame.clone());
        let outs = self.forward(&mut g, &p, state, f, mode)?;
        Ok(outs.iter().map(|&o| g.value(o).clone()).collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::trunc_normal;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn patch_embed_shapes_and_zero() {
        let p = LayerParams {
            weight: trunc_normal(&[48, 10], 1.0, &mut rng(1)),
            bias: Tensor::zeros(&[10]),
        };
        let out = patch_embed(&trunc_normal(&[8, 8, 3], 1.0, &mut rng(2)), &p, 4).unwrap();
        assert_eq!(out.shape(), &[2, 2, 10]);
        assert!(patch_embed(&Tensor::zeros(&[8, 8, 3]), &p, 4).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(patch_embed(&Tensor::zeros(&[9, 7, 3]), &p, 4).unwrap().shape(), &[3, 2, 10]);
    }

    #[test]
    fn identity_embedding_flattens_patches() {
        let p = LayerParams {
            weight: Tensor::eye(48),
            bias: Tensor::zeros(&[48]),
        };
        let frame = Tensor::from_fn(&[8, 8, 3], |i| i as f64);
        let out = patch_embed(&frame, &p, 4).unwrap();
        for ty in 0..2 {
            for tx in 0..2 {
                for py in 0..4 {
                    for px in 0..4 {
                        for c in 0..3 {
                            let flat = (py * 4 + px) * 3 + c;
                            assert_eq!(out.at3(ty, tx, flat), frame.at3(ty * 4 + py, tx * 4 + px, c));
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn patch_merging_cases() {
        let x = trunc_normal(&[4, 4, 8], 1.0, &mut rng(3));
        let mut slice = Tensor::zeros(&[32, 16]);
        for c in 0..8 {
            slice.data_mut()[c * 16 + c] = 1.0;
        }
        let p = LayerParams {
            weight: slice,
            bias: Tensor::zeros(&[16]),
        };
        let out = patch_merging(&x, &p).unwrap();
        assert_eq!(out.shape(), &[2, 2, 16]);
        for oy in 0..2 {
            for ox in 0..2 {
                for c in 0..8 {
                    assert_eq!(out.at3(oy, ox, c), x.at3(2 * oy, 2 * ox, c));
                    assert_eq!(out.at3(oy, ox, 8 + c), 0.0);
                }
            }
        }
        assert!(patch_merging(&Tensor::zeros(&[4, 4, 8]), &p).unwrap().data().iter().all(|&v| v == 0.0));
        assert_eq!(patch_merging(&Tensor::zeros(&[3, 5, 8]), &p).unwrap().shape(), &[2, 3, 16]);
    }

    #[test]
    fn merge_order_is_tl_tr_bl_br() {
        let (idx, h2, w2) = merge_index(2, 2);
        assert_eq!((h2, w2), (1, 1));
        assert_eq!(idx, vec![Some(0), Some(1), Some(2), Some(3)]);
    }

    fn video(n: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng(seed);
        (0..n).map(|_| trunc_normal(&[32, 32, 1], 1.0, &mut r)).collect()
    }

    #[test]
    fn toy_t_pyramid() {
        let m = Model::new(ModelConfig::toy_t()).unwrap();
        let mut s = m.new_state().unwrap();
        let f = video(1, 4);
        m.seed(&mut s, &f[0]).unwrap();
        let outs = m.forward_frame(&mut s, &f[0], StreamMode::Reuse).unwrap();
        let shapes: Vec<_> = outs.iter().map(|o| o.shape().to_vec()).collect();
        assert_eq!(shapes, vec![vec![8, 8, 12], vec![4, 4, 24], vec![2, 2, 48], vec![1, 1, 96]]);
        assert_eq!(m.temporal_receptive_field(), 93);
        assert!(m.seed(&mut s, &f[0]).is_err());
    }

    #[test]
    fn independent_states_agree() {
        let m = Model::new(ModelConfig::toy_t()).unwrap();
        let f = video(5, 5);
        let run = || {
            let mut s = m.new_state().unwrap();
            m.seed(&mut s, &f[0]).unwrap();
            f.iter()
                .map(|x| m.forward_frame(&mut s, x, StreamMode::Reuse).unwrap())
                .collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn constant_video_is_a_fixed_point() {
        let m = Model::new(ModelConfig { init_std: 0.2, ..ModelConfig::toy_t() }).unwrap();
        let f = video(1, 6).remove(0);
        let mut s = m.new_state().unwrap();
        m.seed(&mut s, &f).unwrap();
        let first = m.forward_frame(&mut s, &f, StreamMode::Reuse).unwrap();
        for _ in 1..96 {
            let outs = m.forward_frame(&mut s, &f, StreamMode::Reuse).unwrap();
            assert_eq!(outs, first);
        }
    }

    #[test]
    fn parameter_counts() {
        let split = Model::new(ModelConfig::toy_t()).unwrap();
        let fact = Model::new(ModelConfig { scheme: Scheme::Factorised, ..ModelConfig::toy_t() }).unwrap();
        let space = Model::new(ModelConfig { space_only: true, ..ModelConfig::toy_t() }).unwrap();
        assert_eq!(split.num_params(), fact.num_params());
        assert_eq!(split.num_params(), space.num_params());
        assert!(space.block_infos().iter().all(|b| b.kind == BlockKind::Space));
    }

    #[test]
    fn frame_channel_mismatch() {
        let m = Model::new(ModelConfig::toy_t()).unwrap();
        let mut s = m.new_state().unwrap();
        assert!(matches!(m.seed(&mut s, &Tensor::zeros(&[32, 32, 3])), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn unseeded_forward_is_cold_start() {
        let m = Model::new(ModelConfig::toy_t()).unwrap();
        let mut s = m.new_state().unwrap();
        let r = m.forward_frame(&mut s, &video(1, 1)[0], StreamMode::Reuse);
        assert!(matches!(r, Err(crate::Error::ColdStart { .. })));
    }
}
