//! Transformer blocks over feature maps: the space-only block (self-attention
//! on the current frame) and the temporal dilated block, whose keys and
//! values come from a reference map sampled out of a per-block memory and
//! are reused for `dilation` consecutive frames.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{
    attend, local_pattern, project_kv, project_q, AttentionConfig, AttentionParams,
    AttentionWeights, AttnVars, LocalMode, ProjVars,
};
use crate::error::{config_err, usage_err, Result};
use crate::memory::{FeatureMemory, SamplingStrategy};
use crate::numerics::{
    AttentionPattern, Bound, Graph, LayerNormParams, MlpLayer, MlpParams, NormLayer, ParamStore,
    Tensor, Var, LN_EPS,
};

/// Which feature a temporal block stores in its memory after each frame.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryWrite {
    /// The feature entering the block. Reach through a block is then
    /// exactly one dilation step.
    #[default]
    BlockInput,
    /// The block's own output, which makes each block recurrent and its
    /// temporal reach unbounded.
    BlockOutput,
}

/// How temporal blocks obtain their reference keys and values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StreamMode {
    /// Sample every `dilation` frames, project once, reuse the cached K/V.
    #[default]
    Reuse,
    /// Same sampling schedule, K/V projected again on every frame.
    Recompute,
    /// Sample and project on every frame.
    RefreshEachStep,
}

/// Parameters of one block, owned by a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct BlockWeights {
    pub ln1: NormLayer,
    pub attn: AttentionWeights,
    pub ln2: NormLayer,
    pub mlp: MlpLayer,
}

/// Plain-tensor copy of a block's parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockParams {
    pub ln1: LayerNormParams,
    pub attn: AttentionParams,
    pub ln2: LayerNormParams,
    pub mlp: MlpParams,
}

#[derive(Clone, Copy, Debug)]
pub struct BlockVars {
    pub ln1: (Var, Var),
    pub attn: AttnVars,
    pub ln2: (Var, Var),
    pub fc1: ProjVars,
    pub fc2: ProjVars,
}

impl BlockWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.dim();
        Self {
            ln1: NormLayer::new(store, &format!("{name}.ln1"), d),
            attn: AttentionWeights::new(
                store,
                &format!("{name}.attn"),
                cfg,
                cfg.mode == LocalMode::Window,
                std,
                rng,
            ),
            ln2: NormLayer::new(store, &format!("{name}.ln2"), d),
            mlp: MlpLayer::new(store, &format!("{name}.mlp"), d, std, rng),
        }
    }

    pub fn vars(&self, p: &Bound) -> BlockVars {
        let proj = |l: &crate::numerics::LinearLayer| ProjVars {
            weight: p.var(l.weight),
            bias: l.bias.map(|b| p.var(b)),
        };
        BlockVars {
            ln1: (p.var(self.ln1.gamma), p.var(self.ln1.beta)),
            attn: self.attn.vars(p),
            ln2: (p.var(self.ln2.gamma), p.var(self.ln2.beta)),
            fc1: proj(&self.mlp.fc1),
            fc2: proj(&self.mlp.fc2),
        }
    }

    pub fn params(&self, store: &ParamStore) -> BlockParams {
        BlockParams {
            ln1: self.ln1.params(store),
            attn: self.attn.params(store),
            ln2: self.ln2.params(store),
            mlp: self.mlp.params(store),
        }
    }
}

impl BlockParams {
    pub fn to_graph(&self, g: &mut Graph, requires_grad: bool) -> BlockVars {
        let leaf = |t: &Tensor, g: &mut Graph| g.leaf(t.clone(), requires_grad);
        let ln1 = (leaf(&self.ln1.gamma, g), leaf(&self.ln1.beta, g));
        let attn = self.attn.to_graph(g, requires_grad);
        let ln2 = (leaf(&self.ln2.gamma, g), leaf(&self.ln2.beta, g));
        let fc1 = ProjVars {
            weight: leaf(&self.mlp.fc1.weight, g),
            bias: Some(leaf(&self.mlp.fc1.bias, g)),
        };
        let fc2 = ProjVars {
            weight: leaf(&self.mlp.fc2.weight, g),
            bias: Some(leaf(&self.mlp.fc2.bias, g)),
        };
        BlockVars {
            ln1,
            attn,
            ln2,
            fc1,
            fc2,
        }
    }

    /// Random block parameters; layer norms start at γ = 1, β = 0.
    pub fn random(cfg: &AttentionConfig, std: f64, rng: &mut impl Rng) -> Self {
        let mut store = ParamStore::new();
        let w = BlockWeights::new(&mut store, "b", cfg, std, rng);
        let mut p = w.params(&store);
        for b in [&mut p.attn.q.bias, &mut p.attn.k.bias, &mut p.attn.v.bias, &mut p.attn.out.bias] {
            *b = crate::numerics::trunc_normal(b.shape(), std, rng);
        }
        p
    }
}

/// Multiply-accumulate and projection counts of one block.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockCounters {
    pub frames: u64,
    pub q_projections: u64,
    pub kv_projections: u64,
    pub q_macs: u64,
    pub kv_macs: u64,
    /// `QKᵀ` plus `PV` multiply-accumulates.
    pub score_macs: u64,
}

impl BlockCounters {
    pub fn add(&mut self, o: &BlockCounters) {
        self.frames += o.frames;
        self.q_projections += o.q_projections;
        self.kv_projections += o.kv_projections;
        self.q_macs += o.q_macs;
        self.kv_macs += o.kv_macs;
        self.score_macs += o.score_macs;
    }

    pub fn total_macs(&self) -> u64 {
        self.q_macs + self.kv_macs + self.score_macs
    }

    fn count_q(&mut self, tokens: usize, d: usize) {
        self.frames += 1;
        self.q_projections += 1;
        self.q_macs += (tokens * d * d) as u64;
    }

    fn count_kv(&mut self, tokens: usize, d: usize) {
        self.kv_projections += 1;
        self.kv_macs += (2 * tokens * d * d) as u64;
    }

    fn count_scores(&mut self, pattern: &AttentionPattern, d: usize) {
        self.score_macs += (2 * pattern.nnz() * d) as u64;
    }
}

#[derive(Clone, Debug, Default)]
struct PatternCache(Option<(usize, usize, Arc<AttentionPattern>)>);

impl PatternCache {
    fn get(&mut self, h: usize, w: usize, cfg: &AttentionConfig) -> Result<Arc<AttentionPattern>> {
        if let Some((ch, cw, p)) = &self.0 {
            if (*ch, *cw) == (h, w) {
                return Ok(p.clone());
            }
        }
        let p = Arc::new(local_pattern(h, w, cfg)?);
        self.0 = Some((h, w, p.clone()));
        Ok(p)
    }
}

fn map_hw(g: &Graph, x: Var, d: usize) -> Result<(usize, usize)> {
    match *g.value(x).shape() {
        [h, w, c] if c == d => Ok((h, w)),
        ref s => usage_err(format!("block expects an H x W x {d} map, got {s:?}")),
    }
}

/// Attention residual and MLP residual, given projected keys and values.
fn finish(
    g: &mut Graph,
    v: &BlockVars,
    cfg: &AttentionConfig,
    x: Var,
    kv: (Var, Var),
    pattern: Arc<AttentionPattern>,
) -> Result<Var> {
    let xn = g.layer_norm(x, v.ln1.0, v.ln1.1, LN_EPS)?;
    let q = project_q(g, &v.attn, xn)?;
    let a = attend(g, &v.attn, q, kv.0, kv.1, pattern, cfg.num_heads)?;
    let f_hat = g.add(a, x)?;
    let hn = g.layer_norm(f_hat, v.ln2.0, v.ln2.1, LN_EPS)?;
    let h = g.linear(hn, v.fc1.weight, v.fc1.bias)?;
    let h = g.gelu(h);
    let h = g.linear(h, v.fc2.weight, v.fc2.bias)?;
    g.add(h, f_hat)
}

fn kv_of(g: &mut Graph, v: &BlockVars, src: Var) -> Result<(Var, Var)> {
    let n = g.layer_norm(src, v.ln1.0, v.ln1.1, LN_EPS)?;
    project_kv(g, &v.attn, n)
}

/// Space-only block state: counters and the attention pattern of the last
/// map size seen.
#[derive(Clone, Debug, Default)]
pub struct SpaceState {
    pub counters: BlockCounters,
    pattern: PatternCache,
}

impl SpaceState {
    pub fn new() -> Self {
        Self::default()
    }
}

/// Self-attention block on the current map.
pub fn space_block(
    g: &mut Graph,
    v: &BlockVars,
    cfg: &AttentionConfig,
    state: &mut SpaceState,
    x: Var,
) -> Result<Var> {
    let d = cfg.dim();
    let (h, w) = map_hw(g, x, d)?;
    let pattern = state.pattern.get(h, w, cfg)?;
    let kv = kv_of(g, v, x)?;
    state.counters.count_q(h * w, d);
    state.counters.count_kv(h * w, d);
    state.counters.count_scores(&pattern, d);
    finish(g, v, cfg, x, kv, pattern)
}

/// Per-stream state of one temporal block.
#[derive(Clone, Debug)]
pub struct TdtbState {
    pub block: usize,
    pub dilation: usize,
    pub strategy: SamplingStrategy,
    pub write: MemoryWrite,
    pub memory: FeatureMemory,
    pub counters: BlockCounters,
    /// Frames at which the reference map was (re)sampled.
    pub refresh_log: Vec<i64>,
    rng: ChaCha8Rng,
    cached_ref: Option<Arc<Tensor>>,
    cached_kv: Option<(Arc<Tensor>, Arc<Tensor>)>,
    steps_since_refresh: usize,
    pattern: PatternCache,
}

impl TdtbState {
    /// State with memory capacity equal to the dilation.
    pub fn new(block: usize, dilation: usize, strategy: SamplingStrategy, write: MemoryWrite) -> Result<Self> {
        Self::with_capacity(block, dilation, dilation, strategy, write)
    }

    pub fn with_capacity(
        block: usize,
        dilation: usize,
        capacity: usize,
        strategy: SamplingStrategy,
        write: MemoryWrite,
    ) -> Result<Self> {
        if dilation == 0 {
            return config_err("dilation must be at least 1");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(strategy.seed);
        rng.set_stream(block as u64);
        Ok(Self {
            block,
            dilation,
            strategy,
            write,
            memory: FeatureMemory::for_block(capacity, block)?,
            counters: BlockCounters::default(),
            refresh_log: Vec::new(),
            rng,
            cached_ref: None,
            cached_kv: None,
            steps_since_refresh: 0,
            pattern: PatternCache::default(),
        })
    }

    /// Current reference map, if one has been sampled.
    pub fn cached_ref(&self) -> Option<&Arc<Tensor>> {
        self.cached_ref.as_ref()
    }

    /// Cached projected keys and values (reuse mode only).
    pub fn cached_kv(&self) -> Option<&(Arc<Tensor>, Arc<Tensor>)> {
        self.cached_kv.as_ref()
    }

    pub fn steps_since_refresh(&self) -> usize {
        self.steps_since_refresh
    }

    /// Drop cached keys and values, e.g. after the weights changed. The
    /// reference map and schedule are kept.
    pub fn invalidate_kv(&mut self) {
        self.cached_kv = None;
    }

    /// Fill the empty memory with copies of `x`, back-dated to frames
    /// `1 − capacity ..= 0`.
    pub fn seed(&mut self, x: Arc<Tensor>) -> Result<()> {
        if self.counters.frames > 0 || !self.memory.is_empty() {
            return usage_err(format!("block {} is already running; seeding is only allowed before frame 1", self.block));
        }
        self.memory.fill(x, 0)
    }
}

/// Temporal block on frame `t`: (re)sample the reference map on schedule,
/// cross-attend from the current map to it, then write back to memory.
pub fn temporal_block(
    g: &mut Graph,
    v: &BlockVars,
    cfg: &AttentionConfig,
    state: &mut TdtbState,
    x: Var,
    t: i64,
    mode: StreamMode,
) -> Result<Var> {
    let d = cfg.dim();
    let (h, w) = map_hw(g, x, d)?;
    let due = state.cached_ref.is_none()
        || state.steps_since_refresh >= state.dilation
        || mode == StreamMode::RefreshEachStep;
    if due {
        let r = state.memory.sample(state.strategy.kind, &mut state.rng)?;
        if r.shape() != g.value(x).shape() {
            return usage_err(format!(
                "block {}: memory holds {:?} maps, frame is {:?}",
                state.block,
                r.shape(),
                g.value(x).shape()
            ));
        }
        state.cached_ref = Some(r);
        state.cached_kv = None;
        state.steps_since_refresh = 0;
        state.refresh_log.push(t);
    }
    let pattern = state.pattern.get(h, w, cfg)?;
    let kv = match (&state.cached_kv, mode) {
        (Some((k, vv)), StreamMode::Reuse) => (g.constant_shared(k.clone()), g.constant_shared(vv.clone())),
        _ => {
            let r = g.constant_shared(state.cached_ref.clone().expect("sampled above"));
            let kv = kv_of(g, v, r)?;
            state.counters.count_kv(h * w, d);
            if mode == StreamMode::Reuse {
                state.cached_kv = Some((g.shared_value(kv.0), g.shared_value(kv.1)));
            }
            kv
        }
    };
    state.counters.count_q(h * w, d);
    state.counters.count_scores(&pattern, d);
    let out = finish(g, v, cfg, x, kv, pattern)?;
    let stored = match state.write {
        MemoryWrite::BlockInput => g.shared_value(x),
        MemoryWrite::BlockOutput => g.shared_value(out),
    };
    state.memory.update_shared(stored, t)?;
    state.steps_since_refresh += 1;
    Ok(out)
}

/// Output of a temporal block on frame 1 when its memory holds only copies
/// of its own input. Used to seed memories; touches no state besides the
/// memory fill.
pub fn temporal_block_seed(
    g: &mut Graph,
    v: &BlockVars,
    cfg: &AttentionConfig,
    state: &mut TdtbState,
    x: Var,
) -> Result<Var> {
    let d = cfg.dim();
    let (h, w) = map_hw(g, x, d)?;
    state.seed(g.shared_value(x))?;
    let pattern = state.pattern.get(h, w, cfg)?;
    let kv = kv_of(g, v, x)?;
    finish(g, v, cfg, x, kv, pattern)
}

/// Temporal block on plain tensors, reusing cached K/V on schedule. The
/// cache assumes `params` does not change between calls.
pub fn tdtb_forward(
    state: &mut TdtbState,
    f_t: &Tensor,
    params: &BlockParams,
    cfg: &AttentionConfig,
    t: i64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = params.to_graph(&mut g, false);
    let x = g.constant(f_t.clone());
    let out = temporal_block(&mut g, &v, cfg, state, x, t, StreamMode::Reuse)?;
    Ok(g.value(out).clone())
}

/// Space-only block on a plain tensor.
pub fn space_block_forward(f_t: &Tensor, params: &BlockParams, cfg: &AttentionConfig) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = params.to_graph(&mut g, false);
    let x = g.constant(f_t.clone());
    let out = space_block(&mut g, &v, cfg, &mut SpaceState::new(), x)?;
    Ok(g.value(out).clone())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attention::{correlation_local_attention, window_local_attention};
    use crate::memory::SamplingKind;
    use crate::numerics::{layer_norm, mlp_forward, trunc_normal};

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn cfg(mode: LocalMode, region: usize) -> AttentionConfig {
        AttentionConfig::new(2, 4, mode, region).unwrap()
    }

    fn earliest() -> SamplingStrategy {
        SamplingStrategy::new(SamplingKind::Earliest, 0)
    }

    fn frames(n: usize, seed: u64) -> Vec<Tensor> {
        let mut r = rng(seed);
        (0..n).map(|_| trunc_normal(&[4, 4, 8], 1.0, &mut r)).collect()
    }

    fn zero_residual(p: &mut BlockParams) {
        for t in [
            &mut p.attn.out.weight,
            &mut p.attn.out.bias,
            &mut p.mlp.fc2.weight,
            &mut p.mlp.fc2.bias,
        ] {
            *t = Tensor::zeros(t.shape());
        }
    }

    #[test]
    fn zero_branches_give_identity() {
        let c = cfg(LocalMode::Window, 3);
        let mut p = BlockParams::random(&c, 0.5, &mut rng(1));
        zero_residual(&mut p);
        let f = frames(2, 2);
        assert_eq!(space_block_forward(&f[0], &p, &c).unwrap(), f[0]);
        let mut s = TdtbState::new(0, 2, earliest(), MemoryWrite::BlockInput).unwrap();
        s.seed(Arc::new(f[1].clone())).unwrap();
        assert_eq!(tdtb_forward(&mut s, &f[0], &p, &c, 1).unwrap(), f[0]);
    }

    #[test]
    fn seeded_reference_is_first_frame() {
        let c = cfg(LocalMode::Window, 3);
        let p = BlockParams::random(&c, 0.5, &mut rng(3));
        let f = frames(1, 4);
        let mut s = TdtbState::new(0, 4, earliest(), MemoryWrite::BlockInput).unwrap();
        s.seed(Arc::new(f[0].clone())).unwrap();
        assert_eq!(s.memory.timestamps(), vec![-3, -2, -1, 0]);
        tdtb_forward(&mut s, &f[0], &p, &c, 1).unwrap();
        assert_eq!(**s.cached_ref().unwrap(), f[0]);
        assert!(s.seed(Arc::new(f[0].clone())).is_err());
    }

    #[test]
    fn unseeded_memory_is_a_cold_start_error() {
        let c = cfg(LocalMode::Window, 3);
        let p = BlockParams::random(&c, 0.5, &mut rng(3));
        let mut s = TdtbState::new(7, 2, earliest(), MemoryWrite::BlockInput).unwrap();
        let r = tdtb_forward(&mut s, &frames(1, 1)[0], &p, &c, 1);
        assert!(matches!(r, Err(crate::Error::ColdStart { block: 7 })));
    }

    /// Independent no-cache oracle: explicit memory list, earliest sampling,
    /// plain tensor ops.
    fn oracle_block(
        frames: &[Tensor],
        p: &BlockParams,
        c: &AttentionConfig,
        dilation: usize,
        write_output: bool,
    ) -> Vec<Tensor> {
        let mut mem: Vec<Tensor> = vec![frames[0].clone(); dilation];
        let mut outs = Vec::new();
        let mut reference = None;
        for (i, f) in frames.iter().enumerate() {
            if i % dilation == 0 {
                reference = Some(mem[0].clone());
            }
            let fr = reference.as_ref().unwrap();
            let ln_f = layer_norm(f, &p.ln1.gamma, &p.ln1.beta, LN_EPS).unwrap();
            let ln_r = layer_norm(fr, &p.ln1.gamma, &p.ln1.beta, LN_EPS).unwrap();
            let a = match c.mode {
                LocalMode::Window => window_local_attention(&ln_f, &ln_r, &p.attn, c).unwrap(),
                LocalMode::Correlation => correlation_local_attention(&ln_f, &ln_r, &p.attn, c).unwrap(),
            };
            let f_hat = Tensor::new(f.shape(), a.data().iter().zip(f.data()).map(|(x, y)| x + y).collect()).unwrap();
            let m = mlp_forward(&layer_norm(&f_hat, &p.ln2.gamma, &p.ln2.beta, LN_EPS).unwrap(), &p.mlp).unwrap();
            let out = Tensor::new(f.shape(), m.data().iter().zip(f_hat.data()).map(|(x, y)| x + y).collect()).unwrap();
            mem.remove(0);
            mem.push(if write_output { out.clone() } else { f.clone() });
            outs.push(out);
        }
        outs
    }

    #[test]
    fn matches_no_cache_oracle() {
        for (mode, region, write) in [
            (LocalMode::Window, 3, MemoryWrite::BlockInput),
            (LocalMode::Correlation, 3, MemoryWrite::BlockInput),
            (LocalMode::Window, 3, MemoryWrite::BlockOutput),
        ] {
            let c = cfg(mode, region);
            let p = BlockParams::random(&c, 0.3, &mut rng(5));
            let f = frames(6, 6);
            let mut s = TdtbState::new(0, 2, earliest(), write).unwrap();
            s.seed(Arc::new(f[0].clone())).unwrap();
            let got: Vec<Tensor> = f
                .iter()
                .enumerate()
                .map(|(i, x)| tdtb_forward(&mut s, x, &p, &c, i as i64 + 1).unwrap())
                .collect();
            let want = oracle_block(&f, &p, &c, 2, write == MemoryWrite::BlockOutput);
            for (a, b) in got.iter().zip(&want) {
                assert!(a.max_abs_diff(b) < 1e-12, "{mode:?} {write:?}");
            }
        }
    }

    #[test]
    fn refresh_schedule_and_kv_reuse() {
        let c = cfg(LocalMode::Window, 3);
        let p = BlockParams::random(&c, 0.3, &mut rng(7));
        let f = frames(11, 8);
        let mut s = TdtbState::new(0, 4, earliest(), MemoryWrite::BlockInput).unwrap();
        s.seed(Arc::new(f[0].clone())).unwrap();
        let mut last_kv: Option<(Arc<Tensor>, Arc<Tensor>)> = None;
        for (i, x) in f.iter().enumerate() {
            tdtb_forward(&mut s, x, &p, &c, i as i64 + 1).unwrap();
            let kv = s.cached_kv().unwrap().clone();
            if i % 4 != 0 {
                let prev = last_kv.as_ref().unwrap();
                assert!(Arc::ptr_eq(&prev.0, &kv.0) && Arc::ptr_eq(&prev.1, &kv.1));
            }
            assert!(s.steps_since_refresh() <= s.dilation);
            last_kv = Some(kv);
        }
        assert_eq!(s.refresh_log, vec![1, 5, 9]);
        assert_eq!(s.counters.kv_projections, 3);
        assert_eq!(s.counters.q_projections, 11);
    }

    #[test]
    fn space_block_equals_temporal_block_on_current_frame() {
        let c = cfg(LocalMode::Window, 3);
        let p = BlockParams::random(&c, 0.4, &mut rng(9));
        let f = frames(1, 10);
        let mut s = TdtbState::new(0, 1, earliest(), MemoryWrite::BlockInput).unwrap();
        s.seed(Arc::new(f[0].clone())).unwrap();
        let mut g = Graph::new();
        let v = p.to_graph(&mut g, false);
        let x = g.constant(f[0].clone());
        let out = temporal_block(&mut g, &v, &c, &mut s, x, 1, StreamMode::RefreshEachStep).unwrap();
        let space = space_block_forward(&f[0], &p, &c).unwrap();
        assert!(g.value(out).max_abs_diff(&space) < 1e-15);
    }

    #[test]
    fn write_back_policy() {
        let c = cfg(LocalMode::Window, 3);
        let p = BlockParams::random(&c, 0.4, &mut rng(11));
        let f = frames(2, 12);
        for write in [MemoryWrite::BlockInput, MemoryWrite::BlockOutput] {
            let mut s = TdtbState::new(0, 3, earliest(), write).unwrap();
            s.seed(Arc::new(f[0].clone())).unwrap();
            let out = tdtb_forward(&mut s, &f[1], &p, &c, 1).unwrap();
            let (t, stored) = s.memory.entries().last().unwrap();
            assert_eq!(t, 1);
            let expect = if write == MemoryWrite::BlockInput { &f[1] } else { &out };
            assert_eq!(stored, expect);
        }
    }

    #[test]
    fn counters_follow_shapes() {
        let c = cfg(LocalMode::Window, 3);
        let p = BlockParams::random(&c, 0.4, &mut rng(13));
        let f = frames(1, 14);
        let mut g = Graph::new();
        let v = p.to_graph(&mut g, false);
        let x = g.constant(f[0].clone());
        let mut s = SpaceState::new();
        space_block(&mut g, &v, &c, &mut s, x).unwrap();
        // 4x4 map, 3x3 windows: effective window 3, window sizes 3x3, 3x1, 1x3, 1x1
        let nnz = 9 * 9 + 3 * 3 + 3 * 3 + 1;
        assert_eq!(
            s.counters,
            BlockCounters {
                frames: 1,
                q_projections: 1,
                kv_projections: 1,
                q_macs: 16 * 64,
                kv_macs: 2 * 16 * 64,
                score_macs: 2 * nnz * 8,
            }
        );
    }

    #[test]
    fn shape_mismatch_is_usage_error() {
        let c = cfg(LocalMode::Window, 3);
        let p = BlockParams::random(&c, 0.4, &mut rng(13));
        let mut s = TdtbState::new(0, 2, earliest(), MemoryWrite::BlockInput).unwrap();
        s.seed(Arc::new(Tensor::zeros(&[2, 2, 8]))).unwrap();
        let r = tdtb_forward(&mut s, &frames(1, 1)[0], &p, &c, 1);
        assert!(matches!(r, Err(crate::Error::Usage(_))));
        let r = space_block_forward(&Tensor::zeros(&[4, 4, 6]), &p, &c);
        assert!(matches!(r, Err(crate::Error::Usage(_))));
    }
}
