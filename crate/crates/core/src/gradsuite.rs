//! Finite-difference checks of every differentiable op and of the blocks
//! built from them. Each case is a small random instance; the scalar
//! checked is a fixed random projection of the output, so no case reduces
//! to a constant (a plain sum of a layer-norm output would).

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{attend, project_kv, project_q, window_pattern, correlation_pattern, AttnVars, ProjVars};
use crate::attention::{AttentionConfig, LocalMode};
use crate::error::{usage_err, Result};
use crate::memory::SamplingStrategy;
use crate::numerics::{
    analytic_gradients, compare_gradients, numeric_gradients, trunc_normal, AttentionPattern, Graph, Tensor,
    Var, LN_EPS,
};
use crate::tdtb::{space_block, temporal_block, BlockVars, MemoryWrite, SpaceState, StreamMode, TdtbState};

/// Step of the central differences.
pub const EPS: f64 = 1e-6;
pub const PRIMITIVE_TOL: f64 = 1e-5;
pub const COMPOSITE_TOL: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CaseKind {
    Primitive,
    Composite,
}

impl CaseKind {
    pub fn tolerance(self) -> f64 {
        match self {
            CaseKind::Primitive => PRIMITIVE_TOL,
            CaseKind::Composite => COMPOSITE_TOL,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradResult {
    pub op: String,
    pub kind: CaseKind,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub scalars: usize,
    pub passed: bool,
}

type CaseFn = fn(&mut Graph, &[Var]) -> Result<Var>;

struct Case {
    name: &'static str,
    kind: CaseKind,
    inputs: Vec<Tensor>,
    f: CaseFn,
}

pub const CASES: &[&str] = &[
    "linear",
    "add",
    "scale",
    "layer_norm",
    "gelu",
    "softmax",
    "gather",
    "reshape",
    "mean_rows",
    "cross_entropy",
    "mean_squared_error",
    "mlp",
    "mca",
    "window_attention",
    "correlation_attention",
    "space_block",
    "tdtb_window",
    "tdtb_correlation",
];

fn rand_t(shape: &[usize], std: f64, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    trunc_normal(shape, std, &mut rng)
}

fn gain(d: usize, seed: u64) -> Tensor {
    rand_t(&[d], 0.3, seed).map(|v| 1.0 + v)
}

/// `Σ out · P` for a fixed random `P` with three columns.
fn project(g: &mut Graph, out: Var) -> Result<Var> {
    let c = g.value(out).cols();
    let p = g.constant(rand_t(&[c, 3], 1.0, 999));
    let y = g.linear(out, p, None)?;
    Ok(g.sum(y))
}

const HEADS: usize = 2;
const HEAD_DIM: usize = 4;
const D: usize = HEADS * HEAD_DIM;

fn attn_inputs(seed: u64, region: Option<usize>) -> Vec<Tensor> {
    let mut v = Vec::new();
    for i in 0..4 {
        v.push(rand_t(&[D, D], 0.4, seed + 2 * i));
        v.push(rand_t(&[D], 0.2, seed + 2 * i + 1));
    }
    if let Some(r) = region {
        v.push(rand_t(&[(2 * r - 1) * (2 * r - 1), HEADS], 0.5, seed + 20));
    }
    v
}

fn attn_vars(p: &[Var]) -> AttnVars {
    let proj = |i: usize| ProjVars {
        weight: p[2 * i],
        bias: Some(p[2 * i + 1]),
    };
    AttnVars {
        q: proj(0),
        k: proj(1),
        v: proj(2),
        out: proj(3),
        rel_bias: p.get(8).copied(),
    }
}

fn block_inputs(seed: u64, region: Option<usize>) -> Vec<Tensor> {
    let mut v = vec![gain(D, seed), rand_t(&[D], 0.2, seed + 1)];
    v.extend(attn_inputs(seed + 10, region));
    v.extend([gain(D, seed + 40), rand_t(&[D], 0.2, seed + 41)]);
    v.extend([
        rand_t(&[D, 4 * D], 0.3, seed + 50),
        rand_t(&[4 * D], 0.2, seed + 51),
        rand_t(&[4 * D, D], 0.3, seed + 52),
        rand_t(&[D], 0.2, seed + 53),
    ]);
    v
}

fn block_vars(p: &[Var]) -> BlockVars {
    let n = p.len();
    let attn = attn_vars(&p[2..n - 6]);
    BlockVars {
        ln1: (p[0], p[1]),
        attn,
        ln2: (p[n - 6], p[n - 5]),
        fc1: ProjVars {
            weight: p[n - 4],
            bias: Some(p[n - 3]),
        },
        fc2: ProjVars {
            weight: p[n - 2],
            bias: Some(p[n - 1]),
        },
    }
}

fn local_attention(g: &mut Graph, v: &[Var], pattern: AttentionPattern) -> Result<Var> {
    let w = attn_vars(&v[2..]);
    let q = project_q(g, &w, v[0])?;
    let (k, vv) = project_kv(g, &w, v[1])?;
    let out = attend(g, &w, q, k, vv, Arc::new(pattern), HEADS)?;
    project(g, out)
}

/// The reference map is data, not an input: it enters the block as a
/// stop-gradient constant.
fn tdtb(g: &mut Graph, v: &[Var], mode: LocalMode) -> Result<Var> {
    let cfg = AttentionConfig::new(HEADS, HEAD_DIM, mode, 3)?;
    let mut state = TdtbState::new(0, 2, SamplingStrategy::default(), MemoryWrite::BlockInput)?;
    state.seed(Arc::new(rand_t(g.value(v[0]).shape(), 1.0, 77)))?;
    let out = temporal_block(g, &block_vars(&v[1..]), &cfg, &mut state, v[0], 1, StreamMode::Recompute)?;
    project(g, out)
}

fn build(name: &str) -> Result<Case> {
    use CaseKind::*;
    let (kind, inputs, f): (CaseKind, Vec<Tensor>, CaseFn) = match name {
        "linear" => (
            Primitive,
            vec![rand_t(&[3, 5], 1.0, 1), rand_t(&[5, 4], 1.0, 2), rand_t(&[4], 1.0, 3)],
            |g, v| {
                let y = g.linear(v[0], v[1], Some(v[2]))?;
                project(g, y)
            },
        ),
        "add" => (Primitive, vec![rand_t(&[3, 4], 1.0, 4), rand_t(&[3, 4], 1.0, 5)], |g, v| {
            let y = g.add(v[0], v[1])?;
            project(g, y)
        }),
        "scale" => (Primitive, vec![rand_t(&[3, 4], 1.0, 6)], |g, v| {
            let y = g.scale(v[0], -1.7);
            project(g, y)
        }),
        "layer_norm" => (
            Primitive,
            vec![rand_t(&[4, 6], 2.0, 7), gain(6, 8), rand_t(&[6], 1.0, 9)],
            |g, v| {
                let y = g.layer_norm(v[0], v[1], v[2], LN_EPS)?;
                project(g, y)
            },
        ),
        "gelu" => (Primitive, vec![rand_t(&[4, 5], 2.0, 10)], |g, v| {
            let y = g.gelu(v[0]);
            project(g, y)
        }),
        "softmax" => (Primitive, vec![rand_t(&[3, 6], 2.0, 11)], |g, v| {
            let y = g.softmax(v[0]);
            project(g, y)
        }),
        "gather" => (Primitive, vec![rand_t(&[4, 3], 1.0, 12)], |g, v| {
            let index: Arc<[Option<usize>]> = vec![Some(2), None, Some(0), Some(2), Some(3), Some(1)].into();
            let y = g.gather(v[0], index, 2, &[3, 6])?;
            project(g, y)
        }),
        "reshape" => (Primitive, vec![rand_t(&[2, 3, 4], 1.0, 13)], |g, v| {
            let y = g.reshape(v[0], &[6, 4])?;
            project(g, y)
        }),
        "mean_rows" => (Primitive, vec![rand_t(&[5, 3], 1.0, 14)], |g, v| {
            let y = g.mean_rows(v[0]);
            let y = g.reshape(y, &[1, 3])?;
            project(g, y)
        }),
        "cross_entropy" => (Primitive, vec![rand_t(&[5], 2.0, 15)], |g, v| g.cross_entropy(v[0], 3)),
        "mean_squared_error" => (Primitive, vec![rand_t(&[4], 1.0, 16)], |g, v| {
            g.mean_squared_error(v[0], rand_t(&[4], 1.0, 17))
        }),
        "mlp" => (
            Composite,
            vec![
                rand_t(&[3, 4], 1.0, 18),
                rand_t(&[4, 16], 0.5, 19),
                rand_t(&[16], 0.5, 20),
                rand_t(&[16, 4], 0.5, 21),
                rand_t(&[4], 0.5, 22),
            ],
            |g, v| {
                let h = g.linear(v[0], v[1], Some(v[2]))?;
                let h = g.gelu(h);
                let y = g.linear(h, v[3], Some(v[4]))?;
                project(g, y)
            },
        ),
        "mca" => {
            let mut inputs = vec![rand_t(&[3, D], 1.0, 23), rand_t(&[5, D], 1.0, 24)];
            inputs.extend(attn_inputs(30, None));
            (Composite, inputs, |g, v| local_attention(g, v, AttentionPattern::dense(3, 5)))
        }
        "window_attention" => {
            let mut inputs = vec![rand_t(&[4, 4, D], 1.0, 25), rand_t(&[4, 4, D], 1.0, 26)];
            inputs.extend(attn_inputs(50, Some(3)));
            (Composite, inputs, |g, v| local_attention(g, v, window_pattern(4, 4, 3)?))
        }
        "correlation_attention" => {
            let mut inputs = vec![rand_t(&[4, 3, D], 1.0, 27), rand_t(&[4, 3, D], 1.0, 28)];
            inputs.extend(attn_inputs(70, None));
            (Composite, inputs, |g, v| local_attention(g, v, correlation_pattern(4, 3, 3)?))
        }
        "space_block" => {
            let mut inputs = vec![rand_t(&[4, 4, D], 1.0, 29)];
            inputs.extend(block_inputs(100, Some(3)));
            (Composite, inputs, |g, v| {
                let cfg = AttentionConfig::new(HEADS, HEAD_DIM, LocalMode::Window, 3)?;
                let out = space_block(g, &block_vars(&v[1..]), &cfg, &mut SpaceState::new(), v[0])?;
                project(g, out)
            })
        }
        "tdtb_window" => {
            let mut inputs = vec![rand_t(&[4, 4, D], 1.0, 31)];
            inputs.extend(block_inputs(200, Some(3)));
            (Composite, inputs, |g, v| tdtb(g, v, LocalMode::Window))
        }
        "tdtb_correlation" => {
            let mut inputs = vec![rand_t(&[3, 4, D], 1.0, 33)];
            inputs.extend(block_inputs(300, None));
            (Composite, inputs, |g, v| tdtb(g, v, LocalMode::Correlation))
        }
        other => return usage_err(format!("unknown gradient case {other:?}; known: {}", CASES.join(", "))),
    };
    Ok(Case {
        name: CASES.iter().find(|c| **c == name).expect("matched above"),
        kind,
        inputs,
        f,
    })
}

/// Check one case. `corrupt` is added to the first analytic gradient entry
/// before comparison.
pub fn run_case(name: &str, corrupt: f64) -> Result<GradResult> {
    let case = build(name)?;
    let f = case.f;
    let mut analytic = analytic_gradients(&f, &case.inputs)?;
    analytic[0].data_mut()[0] += corrupt;
    let numeric = numeric_gradients(&f, &case.inputs, EPS)?;
    let err = compare_gradients(&analytic, &numeric);
    let tolerance = case.kind.tolerance();
    Ok(GradResult {
        op: case.name.into(),
        kind: case.kind,
        max_rel_error: err,
        tolerance,
        scalars: case.inputs.iter().map(Tensor::len).sum(),
        passed: err <= tolerance,
    })
}

/// Every case in [`CASES`], with `corrupt` applied to the named one.
pub fn run_suite(corrupt: Option<(&str, f64)>) -> Result<Vec<GradResult>> {
    if let Some((name, _)) = corrupt {
        build(name)?;
    }
    CASES
        .iter()
        .map(|&name| {
            let c = corrupt.filter(|(n, _)| *n == name).map_or(0.0, |(_, c)| c);
            run_case(name, c)
        })
        .collect()
}
