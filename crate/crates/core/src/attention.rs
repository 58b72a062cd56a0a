//! Multi-head cross-attention and the two local variants used on feature
//! maps: aligned windows, and a correlation neighbourhood centred on each
//! query location.
//!
//! Queries always come from one map and keys/values from another of the same
//! spatial size; passing the same map twice gives ordinary self-attention.

use std::sync::Arc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, Result};
use crate::numerics::{
    trunc_normal, AttentionPattern, Bound, Graph, LayerParams, LinearLayer, ParamId, ParamStore,
    Tensor, Var,
};

/// Which keys a query location may attend to.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LocalMode {
    /// Non-overlapping `region × region` windows; queries see the co-located
    /// window of the key map.
    Window,
    /// The `region × region` neighbourhood of the key map centred on the
    /// query, truncated at the borders.
    Correlation,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub num_heads: usize,
    pub head_dim: usize,
    pub mode: LocalMode,
    /// Odd side length of the local region.
    pub region: usize,
}

impl AttentionConfig {
    pub fn new(num_heads: usize, head_dim: usize, mode: LocalMode, region: usize) -> Result<Self> {
        let cfg = Self {
            num_heads,
            head_dim,
            mode,
            region,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn dim(&self) -> usize {
        self.num_heads * self.head_dim
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_heads == 0 || self.head_dim == 0 {
            return config_err("attention needs at least one head of width >= 1");
        }
        if self.region == 0 || self.region % 2 == 0 {
            return config_err(format!("local region must be odd and >= 1, got {}", self.region));
        }
        Ok(())
    }

    fn check_dim(&self, d: usize) -> Result<()> {
        if d != self.dim() {
            return config_err(format!(
                "embedding dim {d} != {} heads x {} channels",
                self.num_heads, self.head_dim
            ));
        }
        Ok(())
    }
}

/// Plain-tensor attention parameters: Q/K/V/output projections and an
/// optional `(2·region − 1)² × heads` relative-position bias table.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionParams {
    pub q: LayerParams,
    pub k: LayerParams,
    pub v: LayerParams,
    pub out: LayerParams,
    pub rel_bias: Option<Tensor>,
}

#[derive(Clone, Copy, Debug)]
pub struct ProjVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Attention parameters as graph nodes.
#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub q: ProjVars,
    pub k: ProjVars,
    pub v: ProjVars,
    pub out: ProjVars,
    pub rel_bias: Option<Var>,
}

impl AttentionParams {
    /// Insert the parameters into `g` as leaves.
    pub fn to_graph(&self, g: &mut Graph, requires_grad: bool) -> AttnVars {
        let proj = |p: &LayerParams, g: &mut Graph| ProjVars {
            weight: g.leaf(p.weight.clone(), requires_grad),
            bias: Some(g.leaf(p.bias.clone(), requires_grad)),
        };
        let q = proj(&self.q, g);
        let k = proj(&self.k, g);
        let v = proj(&self.v, g);
        let out = proj(&self.out, g);
        let rel_bias = self.rel_bias.as_ref().map(|b| g.leaf(b.clone(), requires_grad));
        AttnVars {
            q,
            k,
            v,
            out,
            rel_bias,
        }
    }

    /// Random parameters for tests and examples.
    pub fn random(dim: usize, cfg: &AttentionConfig, with_bias: bool, std: f64, rng: &mut impl Rng) -> Self {
        let lin = |rng: &mut _| LayerParams {
            weight: trunc_normal(&[dim, dim], std, rng),
            bias: trunc_normal(&[dim], std, rng),
        };
        let q = lin(rng);
        let k = lin(rng);
        let v = lin(rng);
        let out = lin(rng);
        let rel_bias =
            with_bias.then(|| trunc_normal(&[bias_table_rows(cfg.region), cfg.num_heads], std, rng));
        Self {
            q,
            k,
            v,
            out,
            rel_bias,
        }
    }
}

/// Attention projections owned by a model's [`ParamStore`].
#[derive(Clone, Debug)]
pub struct AttentionWeights {
    pub q: LinearLayer,
    pub k: LinearLayer,
    pub v: LinearLayer,
    pub out: LinearLayer,
    pub rel_bias: Option<ParamId>,
}

impl AttentionWeights {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        cfg: &AttentionConfig,
        with_bias: bool,
        std: f64,
        rng: &mut impl Rng,
    ) -> Self {
        let d = cfg.dim();
        let q = LinearLayer::new(store, &format!("{name}.q"), d, d, true, std, rng);
        let k = LinearLayer::new(store, &format!("{name}.k"), d, d, true, std, rng);
        let v = LinearLayer::new(store, &format!("{name}.v"), d, d, true, std, rng);
        let out = LinearLayer::new(store, &format!("{name}.out"), d, d, true, std, rng);
        let rel_bias = with_bias.then(|| {
            store.add(
                format!("{name}.rel_bias"),
                trunc_normal(&[bias_table_rows(cfg.region), cfg.num_heads], std, rng),
            )
        });
        Self {
            q,
            k,
            v,
            out,
            rel_bias,
        }
    }

    pub fn vars(&self, p: &Bound) -> AttnVars {
        let proj = |l: &LinearLayer| ProjVars {
            weight: p.var(l.weight),
            bias: l.bias.map(|b| p.var(b)),
        };
        AttnVars {
            q: proj(&self.q),
            k: proj(&self.k),
            v: proj(&self.v),
            out: proj(&self.out),
            rel_bias: self.rel_bias.map(|b| p.var(b)),
        }
    }

    pub fn params(&self, store: &ParamStore) -> AttentionParams {
        AttentionParams {
            q: self.q.params(store),
            k: self.k.params(store),
            v: self.v.params(store),
            out: self.out.params(store),
            rel_bias: self.rel_bias.map(|b| store.get(b).clone()),
        }
    }
}

fn bias_table_rows(region: usize) -> usize {
    (2 * region - 1) * (2 * region - 1)
}

/// Query projection of (already normalized) tokens.
pub fn project_q(g: &mut Graph, w: &AttnVars, x: Var) -> Result<Var> {
    g.linear(x, w.q.weight, w.q.bias)
}

/// Key and value projections of (already normalized) tokens.
pub fn project_kv(g: &mut Graph, w: &AttnVars, x: Var) -> Result<(Var, Var)> {
    Ok((g.linear(x, w.k.weight, w.k.bias)?, g.linear(x, w.v.weight, w.v.bias)?))
}

/// Attention over `pattern` followed by the output projection.
pub fn attend(
    g: &mut Graph,
    w: &AttnVars,
    q: Var,
    k: Var,
    v: Var,
    pattern: Arc<AttentionPattern>,
    heads: usize,
) -> Result<Var> {
    let bias = if pattern.bias_table_rows().is_some() {
        w.rel_bias
    } else {
        None
    };
    let a = g.attention(q, k, v, bias, pattern, heads)?;
    g.linear(a, w.out.weight, w.out.bias)
}

/// Side length of the windows actually used on an `h × w` map: the
/// configured region, shrunk to the map when the map is smaller.
pub fn effective_window(h: usize, w: usize, region: usize) -> usize {
    region.min(h.min(w))
}

/// Window pattern on an `h × w` map with relative-position bias rows.
/// Padding positions are never keys.
pub fn window_pattern(h: usize, w: usize, region: usize) -> Result<AttentionPattern> {
    if region == 0 {
        return config_err("window size must be positive");
    }
    let ws = effective_window(h, w, region);
    let side = 2 * region - 1;
    let mut lists = Vec::with_capacity(h * w);
    let mut bias = Vec::new();
    for y in 0..h {
        for x in 0..w {
            let (wy, wx) = (y / ws * ws, x / ws * ws);
            let mut keys = Vec::new();
            for ky in wy..(wy + ws).min(h) {
                for kx in wx..(wx + ws).min(w) {
                    keys.push(ky * w + kx);
                    let dy = y as isize - ky as isize + region as isize - 1;
                    let dx = x as isize - kx as isize + region as isize - 1;
                    bias.push(dy as usize * side + dx as usize);
                }
            }
            lists.push(keys);
        }
    }
    AttentionPattern::from_lists(h * w, lists)?.with_bias(bias, side * side)
}

/// Correlation pattern: each location sees the `r × r` neighbourhood around
/// it, clamped at the map borders.
pub fn correlation_pattern(h: usize, w: usize, r: usize) -> Result<AttentionPattern> {
    if r == 0 || r % 2 == 0 {
        return config_err(format!("correlation region must be odd, got {r}"));
    }
    if r > 2 * h.max(w) - 1 {
        return config_err(format!("correlation region {r} too large for a {h}x{w} map"));
    }
    let half = r / 2;
    let lists = (0..h * w)
        .map(|i| {
            let (y, x) = (i / w, i % w);
            let mut keys = Vec::new();
            for ky in y.saturating_sub(half)..=(y + half).min(h - 1) {
                for kx in x.saturating_sub(half)..=(x + half).min(w - 1) {
                    keys.push(ky * w + kx);
                }
            }
            keys
        })
        .collect();
    AttentionPattern::from_lists(h * w, lists)
}

/// Pattern for a local mode on an `h × w` map.
pub fn local_pattern(h: usize, w: usize, cfg: &AttentionConfig) -> Result<AttentionPattern> {
    match cfg.mode {
        LocalMode::Window => window_pattern(h, w, cfg.region),
        LocalMode::Correlation => correlation_pattern(h, w, cfg.region),
    }
}

fn map_dims(t: &Tensor) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [h, w, d] => Ok((h, w, d)),
        ref s => config_err(format!("expected an H x W x C feature map, got {s:?}")),
    }
}

/// Split an `H × W × d` map into row-major `w × w` windows, zero padding the
/// overhang. Each window is a `w² × d` token matrix.
pub fn window_partition(x: &Tensor, w: usize) -> Result<Vec<Tensor>> {
    if w == 0 {
        return config_err("window size must be positive");
    }
    let (h, wd, d) = map_dims(x)?;
    let (nh, nw) = (h.div_ceil(w), wd.div_ceil(w));
    let mut out = Vec::with_capacity(nh * nw);
    for by in 0..nh {
        for bx in 0..nw {
            let mut t = Tensor::zeros(&[w * w, d]);
            for iy in 0..w {
                for ix in 0..w {
                    let (y, xx) = (by * w + iy, bx * w + ix);
                    if y < h && xx < wd {
                        let src = &x.data()[(y * wd + xx) * d..(y * wd + xx + 1) * d];
                        t.data_mut()[(iy * w + ix) * d..(iy * w + ix + 1) * d].copy_from_slice(src);
                    }
                }
            }
            out.push(t);
        }
    }
    Ok(out)
}

/// Inverse of [`window_partition`]; padding is discarded.
pub fn window_unpartition(windows: &[Tensor], h: usize, wd: usize, w: usize) -> Result<Tensor> {
    if w == 0 {
        return config_err("window size must be positive");
    }
    let (nh, nw) = (h.div_ceil(w), wd.div_ceil(w));
    if windows.len() != nh * nw {
        return config_err(format!("expected {} windows, got {}", nh * nw, windows.len()));
    }
    let d = windows.first().map(|t| t.cols()).unwrap_or(0);
    let mut out = Tensor::zeros(&[h, wd, d]);
    for (i, win) in windows.iter().enumerate() {
        if win.shape() != [w * w, d] {
            return config_err(format!("window {i} has shape {:?}", win.shape()));
        }
        let (by, bx) = (i / nw, i % nw);
        for iy in 0..w {
            for ix in 0..w {
                let (y, xx) = (by * w + iy, bx * w + ix);
                if y < h && xx < wd {
                    out.data_mut()[(y * wd + xx) * d..(y * wd + xx + 1) * d]
                        .copy_from_slice(win.row(iy * w + ix));
                }
            }
        }
    }
    Ok(out)
}

fn run_plain(
    q_src: &Tensor,
    kv_src: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
    pattern: AttentionPattern,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let w = params.to_graph(&mut g, false);
    let qs = g.constant(q_src.clone());
    let ks = g.constant(kv_src.clone());
    let q = project_q(&mut g, &w, qs)?;
    let (k, v) = project_kv(&mut g, &w, ks)?;
    let out = attend(&mut g, &w, q, k, v, Arc::new(pattern), cfg.num_heads)?;
    Ok(g.value(out).clone())
}

/// Global multi-head cross-attention: queries from `query_src` (`n_q × d`),
/// keys and values from `kv_src` (`n_k × d`). No positional term.
pub fn mca(
    query_src: &Tensor,
    kv_src: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    cfg.check_dim(query_src.cols())?;
    cfg.check_dim(kv_src.cols())?;
    let pattern = AttentionPattern::dense(query_src.rows(), kv_src.rows());
    run_plain(query_src, kv_src, params, cfg, pattern)
}

fn check_maps(q_map: &Tensor, kv_map: &Tensor, cfg: &AttentionConfig) -> Result<(usize, usize)> {
    let (h, w, d) = map_dims(q_map)?;
    if q_map.shape() != kv_map.shape() {
        return config_err(format!(
            "query map {:?} and key map {:?} differ",
            q_map.shape(),
            kv_map.shape()
        ));
    }
    cfg.check_dim(d)?;
    Ok((h, w))
}

/// Window attention between co-located windows of two maps, with
/// relative-position bias.
pub fn window_local_attention(
    q_map: &Tensor,
    kv_map: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let (h, w) = check_maps(q_map, kv_map, cfg)?;
    if params.rel_bias.is_none() {
        return config_err("window attention needs a relative-position bias table");
    }
    run_plain(q_map, kv_map, params, cfg, window_pattern(h, w, cfg.region)?)
}

/// Correlation attention: each location attends to the clamped `r × r`
/// neighbourhood of the key map around it.
pub fn correlation_local_attention(
    q_map: &Tensor,
    kv_map: &Tensor,
    params: &AttentionParams,
    cfg: &AttentionConfig,
) -> Result<Tensor> {
    let (h, w) = check_maps(q_map, kv_map, cfg)?;
    run_plain(q_map, kv_map, params, cfg, correlation_pattern(h, w, cfg.region)?)
}
