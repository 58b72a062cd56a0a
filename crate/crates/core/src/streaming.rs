//! Frame-by-frame driver: cold start, reuse scheduling, the recompute
//! oracle, perturbation-based receptive field measurement and cost tables.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use serde_json::json;

use crate::backbone::{BlockKind, BlockState, Model};
use crate::error::{usage_err, Result};
use crate::memory::SamplingKind;
use crate::numerics::{trunc_normal, Tensor};
use crate::tdtb::{BlockCounters, StreamMode};

pub use crate::backbone::ModelState as StreamState;

/// Per-block outcome of a stream.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct BlockReport {
    pub block: usize,
    pub stage: usize,
    pub kind: BlockKind,
    pub dilation: usize,
    pub counters: BlockCounters,
    /// Frames at which a temporal block resampled its reference.
    pub refresh_log: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StreamReport {
    pub mode: StreamMode,
    /// `outputs[frame][stage]`.
    pub outputs: Vec<Vec<Tensor>>,
    pub blocks: Vec<BlockReport>,
}

impl StreamReport {
    pub fn frames(&self) -> usize {
        self.outputs.len()
    }

    pub fn total(&self) -> BlockCounters {
        let mut c = BlockCounters::default();
        for b in &self.blocks {
            c.add(&b.counters);
        }
        c
    }

    /// Largest element-wise difference over every frame and stage.
    pub fn max_output_diff(&self, other: &StreamReport) -> f64 {
        self.outputs
            .iter()
            .flatten()
            .zip(other.outputs.iter().flatten())
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }

    /// One JSON record per frame (stage-output norms and the blocks that
    /// refreshed), then a summary record with the counters.
    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (i, stages) in self.outputs.iter().enumerate() {
            let t = i as i64 + 1;
            let refreshed: Vec<usize> = self
                .blocks
                .iter()
                .filter(|b| b.refresh_log.contains(&t))
                .map(|b| b.block)
                .collect();
            let norms: Vec<f64> = stages.iter().map(Tensor::norm_l2).collect();
            out.push_str(&json!({"frame": t, "stage_norms": norms, "refreshed": refreshed}).to_string());
            out.push('\n');
        }
        let summary = json!({
            "summary": {
                "mode": self.mode,
                "frames": self.frames(),
                "total": self.total(),
                "blocks": self.blocks,
            }
        });
        out.push_str(&summary.to_string());
        out.push('\n');
        out
    }
}

fn check_video(frames: &[Tensor]) -> Result<()> {
    let Some(first) = frames.first() else {
        return usage_err("video has no frames");
    };
    if let Some(i) = frames.iter().position(|f| f.shape() != first.shape()) {
        return usage_err(format!(
            "frame {} has shape {:?}, frame 1 has {:?}",
            i + 1,
            frames[i].shape(),
            first.shape()
        ));
    }
    Ok(())
}

/// Fill every temporal memory from the first frame. Only valid on a fresh
/// state.
pub fn seed_cold_start(model: &Model, state: &mut StreamState, first_frame: &Tensor) -> Result<()> {
    model.seed(state, first_frame)
}

fn report(model: &Model, state: &StreamState, mode: StreamMode, outputs: Vec<Vec<Tensor>>) -> StreamReport {
    let blocks = model
        .block_infos()
        .iter()
        .zip(&state.blocks)
        .map(|(info, st)| BlockReport {
            block: info.id,
            stage: info.stage,
            kind: info.kind,
            dilation: info.dilation,
            counters: *st.counters(),
            refresh_log: match st {
                BlockState::Temporal(s) => s.refresh_log.clone(),
                BlockState::Space(_) => Vec::new(),
            },
        })
        .collect();
    StreamReport {
        mode,
        outputs,
        blocks,
    }
}

/// Run a whole video from a cold start.
pub fn process_video(model: &Model, frames: &[Tensor], mode: StreamMode) -> Result<StreamReport> {
    check_video(frames)?;
    let mut state = model.new_state()?;
    seed_cold_start(model, &mut state, &frames[0])?;
    let outputs = frames
        .iter()
        .map(|f| model.forward_frame(&mut state, f, mode))
        .collect::<Result<Vec<_>>>()?;
    Ok(report(model, &state, mode, outputs))
}

/// Same sampling schedule as reuse mode, keys and values projected afresh
/// on every frame.
pub fn oracle_recompute(model: &Model, frames: &[Tensor]) -> Result<StreamReport> {
    process_video(model, frames, StreamMode::Recompute)
}

/// Final-stage output at the last frame, resuming from `state` at frame
/// index `start` (0-based).
fn final_output(model: &Model, mut state: StreamState, frames: &[Tensor], start: usize) -> Result<Tensor> {
    if start == 0 {
        seed_cold_start(model, &mut state, &frames[0])?;
    }
    let mut last = None;
    for f in &frames[start..] {
        last = model.forward_frame(&mut state, f, StreamMode::RefreshEachStep)?.pop();
    }
    Ok(last.expect("at least one frame"))
}

/// Frames that influence the final-stage output at the last frame:
/// `1 + max τ` such that perturbing frame `T − τ` by `probe` moves the
/// output by more than `1e-9`. Needs earliest sampling, and a video longer
/// than the reach.
pub fn measure_trf(model: &Model, frames: &[Tensor], probe: f64) -> Result<usize> {
    check_video(frames)?;
    if model.config().sampling != SamplingKind::Earliest {
        return usage_err("receptive field is measured with earliest sampling");
    }
    let n = frames.len();
    let mut snapshots = Vec::with_capacity(n);
    let mut state = model.new_state()?;
    snapshots.push(state.clone());
    seed_cold_start(model, &mut state, &frames[0])?;
    let mut base = None;
    for (i, f) in frames.iter().enumerate() {
        base = model.forward_frame(&mut state, f, StreamMode::RefreshEachStep)?.pop();
        if i + 1 < n {
            snapshots.push(state.clone());
        }
    }
    let base = base.expect("non-empty video");
    let mut work = frames.to_vec();
    for k in 0..n {
        let orig = work[k].clone();
        work[k] = orig.map(|v| v + probe);
        let out = final_output(model, snapshots[k].clone(), &work, k)?;
        work[k] = orig;
        if out.max_abs_diff(&base) > 1e-9 {
            if k == 0 {
                return usage_err(format!("first frame still reaches frame {n}; use a longer video"));
            }
            return Ok(n - k);
        }
    }
    usage_err("no frame influences the output")
}

/// [`measure_trf`] on `t` random `h × w` frames.
pub fn measure_trf_random(model: &Model, t: usize, h: usize, w: usize, probe: f64, seed: u64) -> Result<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = model.config().in_channels;
    let frames: Vec<Tensor> = (0..t).map(|_| trunc_normal(&[h, w, c], 1.0, &mut rng)).collect();
    measure_trf(model, &frames, probe)
}

/// One row of a cost table. `oracle_macs` is what the block would spend
/// projecting keys and values on every frame.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct CostRow {
    pub block: Option<usize>,
    pub kind: Option<BlockKind>,
    pub dilation: Option<usize>,
    pub frames: u64,
    pub q_count: u64,
    pub kv_count: u64,
    pub score_macs: u64,
    pub macs: u64,
    pub oracle_macs: u64,
    pub ratio: f64,
}

fn row(b: Option<&BlockReport>, c: &BlockCounters, oracle_macs: u64) -> CostRow {
    let macs = c.total_macs();
    CostRow {
        block: b.map(|b| b.block),
        kind: b.map(|b| b.kind),
        dilation: b.and_then(|b| (b.kind == BlockKind::Temporal).then_some(b.dilation)),
        frames: c.frames,
        q_count: c.q_projections,
        kv_count: c.kv_projections,
        score_macs: c.score_macs,
        macs,
        oracle_macs,
        ratio: if oracle_macs == 0 { 1.0 } else { macs as f64 / oracle_macs as f64 },
    }
}

/// Per-block cost rows plus a final total row (`block == None`).
pub fn cost_summary(report: &StreamReport) -> Vec<CostRow> {
    let mut rows = Vec::new();
    let mut total = BlockCounters::default();
    let mut total_oracle = 0;
    for b in &report.blocks {
        let c = &b.counters;
        let per_kv = if c.kv_projections == 0 { 0 } else { c.kv_macs / c.kv_projections };
        let oracle = c.q_macs + per_kv * c.frames + c.score_macs;
        rows.push(row(Some(b), c, oracle));
        total.add(c);
        total_oracle += oracle;
    }
    rows.push(row(None, &total, total_oracle));
    rows
}
