//! Spatial and channel similarity graphs over a single feature map.
//!
//! The spatial branch squeezes channels, pools at several window sizes,
//! treats every grid position as a node connected to its window neighbours,
//! aggregates `(I + E) V` and reweights by a learnable per-node vector. The
//! channel branch does the same over spatially squeezed channel means. The
//! two results are multiplied into a full map, normalized, activated and
//! added back to the input.

use crate::error::{Error, Result};
use crate::nn::{self, BnStats, ObservedStats};
use crate::tape::{Tape, Var, VjpRule};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NeighborSpec {
    /// Odd side length of the square window on the grid.
    pub spatial_window: usize,
    /// Odd window length along the channel axis.
    pub channel_window: usize,
    /// Spacing between channel neighbours.
    pub channel_stride: usize,
}

impl Default for NeighborSpec {
    fn default() -> Self {
        Self { spatial_window: 3, channel_window: 3, channel_stride: 1 }
    }
}

impl NeighborSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [("spatial_window", self.spatial_window), ("channel_window", self.channel_window)] {
            if w < 3 || w % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd and >= 3, got {w}")));
            }
        }
        if self.channel_stride == 0 {
            return Err(Error::Config("channel_stride must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphKind {
    Spatial,
    Channel,
}

/// How edge weights are derived from node values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EdgeVariant {
    /// `E[i][j] = exp(V[j]) / sum_{j' in N(i)} exp(V[j'])`.
    #[default]
    NeighborSoftmax,
    /// `E[i][j] = exp(V[i]) / sum_{j' in N(i)} exp(V[j'])`.
    AsWritten,
}

/// Neighbour lists (ascending, self excluded) for every node.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Neighborhood {
    lists: Vec<Vec<usize>>,
}

impl Neighborhood {
    /// Grid neighbours inside a `window x window` square centred on each
    /// node of an `h x w` grid, clipped at the borders. Node index is
    /// `row * w + col`.
    pub fn spatial(h: usize, w: usize, window: usize) -> Self {
        let r = (window / 2) as isize;
        let mut lists = Vec::with_capacity(h * w);
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut list = Vec::new();
                for ny in (y - r).max(0)..=(y + r).min(h as isize - 1) {
                    for nx in (x - r).max(0)..=(x + r).min(w as isize - 1) {
                        if (ny, nx) != (y, x) {
                            list.push(ny as usize * w + nx as usize);
                        }
                    }
                }
                lists.push(list);
            }
        }
        Self { lists }
    }

    /// Channels `m + t * stride` for `1 <= |t| <= window / 2`, clipped.
    pub fn channel(c: usize, window: usize, stride: usize) -> Self {
        let r = (window / 2) as isize;
        let lists = (0..c as isize)
            .map(|m| {
                (-r..=r)
                    .filter(|&t| t != 0)
                    .map(|t| m + t * stride as isize)
                    .filter(|&j| j >= 0 && j < c as isize)
                    .map(|j| j as usize)
                    .collect()
            })
            .collect();
        Self { lists }
    }

    pub fn for_kind(kind: GraphKind, dims: (usize, usize, usize), spec: &NeighborSpec) -> Self {
        let (h, w, c) = dims;
        match kind {
            GraphKind::Spatial => Self::spatial(h, w, spec.spatial_window),
            GraphKind::Channel => Self::channel(c, spec.channel_window, spec.channel_stride),
        }
    }

    pub fn len(&self) -> usize {
        self.lists.len()
    }

    pub fn is_empty(&self) -> bool {
        self.lists.is_empty()
    }

    /// Number of directed neighbour pairs.
    pub fn edge_count(&self) -> usize {
        self.lists.iter().map(Vec::len).sum()
    }

    pub fn of(&self, node: usize) -> &[usize] {
        &self.lists[node]
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.lists[i].binary_search(&j).is_ok()
    }
}

/// Edge weights of node `i` towards each of its neighbours (aligned with
/// `nbrs`), max-subtracted for stability.
pub fn edge_row(v: &[f64], i: usize, nbrs: &[usize], variant: EdgeVariant) -> Vec<f64> {
    if nbrs.is_empty() {
        return Vec::new();
    }
    let mut shift = nbrs.iter().map(|&j| v[j]).fold(f64::NEG_INFINITY, f64::max);
    if variant == EdgeVariant::AsWritten {
        shift = shift.max(v[i]);
    }
    let exps: Vec<f64> = nbrs.iter().map(|&j| (v[j] - shift).exp()).collect();
    let z: f64 = exps.iter().sum();
    match variant {
        EdgeVariant::NeighborSoftmax => exps.iter().map(|e| e / z).collect(),
        EdgeVariant::AsWritten => {
            let own = (v[i] - shift).exp() / z;
            vec![own; nbrs.len()]
        }
    }
}

/// A node vector together with its neighbour-restricted edge matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct SimilarityGraph {
    pub kind: GraphKind,
    pub nodes: Vec<f64>,
    /// `d x d`, zero outside the neighbour mask.
    pub edges: Tensor,
}

impl SimilarityGraph {
    pub fn build(nodes: Vec<f64>, nbrs: &Neighborhood, kind: GraphKind, variant: EdgeVariant) -> Result<Self> {
        let d = nodes.len();
        if nbrs.len() != d {
            return Err(Error::ShapeMismatch { op: "build_edges", lhs: vec![d], rhs: vec![nbrs.len()] });
        }
        let mut edges = Tensor::zeros(&[d, d])?;
        for i in 0..d {
            let row = edge_row(&nodes, i, nbrs.of(i), variant);
            for (&j, e) in nbrs.of(i).iter().zip(row) {
                edges.data_mut()[i * d + j] = e;
            }
        }
        Ok(Self { kind, nodes, edges })
    }

    pub fn dim(&self) -> usize {
        self.nodes.len()
    }

    /// `U = (I + E) V`.
    pub fn aggregate(&self) -> Vec<f64> {
        let d = self.dim();
        let e = self.edges.data();
        (0..d)
            .map(|i| self.nodes[i] + (0..d).map(|j| e[i * d + j] * self.nodes[j]).sum::<f64>())
            .collect()
    }
}

struct BuildEdges {
    nbrs: Neighborhood,
    variant: EdgeVariant,
}

impl VjpRule for BuildEdges {
    fn name(&self) -> &'static str {
        "build_edges"
    }

    fn vjp(&self, inputs: &[&Tensor], out: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = inputs[0].shape();
        let (n, d) = (s[0], s[1]);
        let (v, e, g) = (inputs[0].data(), out.data(), grad.data());
        let mut dv = vec![0.0; n * d];
        for b in 0..n {
            let v = &v[b * d..(b + 1) * d];
            let dvb = &mut dv[b * d..(b + 1) * d];
            for i in 0..d {
                let nb = self.nbrs.of(i);
                if nb.is_empty() {
                    continue;
                }
                let row = (b * d + i) * d;
                match self.variant {
                    EdgeVariant::NeighborSoftmax => {
                        let dot: f64 = nb.iter().map(|&j| g[row + j] * e[row + j]).sum();
                        for &l in nb {
                            dvb[l] += e[row + l] * (g[row + l] - dot);
                        }
                    }
                    EdgeVariant::AsWritten => {
                        // every edge of row i equals r = exp(V_i) / Z_i
                        let r = e[row + nb[0]];
                        let gsum: f64 = nb.iter().map(|&j| g[row + j]).sum();
                        dvb[i] += gsum * r;
                        let shift = nb.iter().map(|&j| v[j]).fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = nb.iter().map(|&j| (v[j] - shift).exp()).sum();
                        for &l in nb {
                            dvb[l] -= gsum * r * (v[l] - shift).exp() / z;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(s.to_vec(), dv))]
    }
}

/// Edge matrices for a batch of node vectors: `[n, d] -> [n, d, d]`.
pub fn build_edges(tape: &mut Tape, v: Var, nbrs: &Neighborhood, variant: EdgeVariant) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 || s[1] != nbrs.len() {
        return Err(Error::ShapeMismatch { op: "build_edges", lhs: s, rhs: vec![nbrs.len()] });
    }
    if tape.value(v).data().iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidShape { shape: s, reason: "node values must be finite".into() });
    }
    let (n, d) = (s[0], s[1]);
    let vd = tape.value(v).data();
    let mut out = vec![0.0; n * d * d];
    for b in 0..n {
        let vb = &vd[b * d..(b + 1) * d];
        for i in 0..d {
            let row = edge_row(vb, i, nbrs.of(i), variant);
            for (&j, w) in nbrs.of(i).iter().zip(row) {
                out[(b * d + i) * d + j] = w;
            }
        }
    }
    Ok(tape.record(
        Tensor::from_parts(vec![n, d, d], out),
        &[v],
        BuildEdges { nbrs: nbrs.clone(), variant },
    ))
}

/// `U = V + E V` for `e: [n, d, d]`, `v: [n, d]`.
pub fn aggregate_nodes(tape: &mut Tape, e: Var, v: Var) -> Result<Var> {
    let s = tape.shape(v).to_vec();
    if s.len() != 2 {
        return Err(Error::InvalidShape { shape: s, reason: "node vectors must be [n, d]".into() });
    }
    let col = tape.reshape(v, &[s[0], s[1], 1])?;
    let ev = tape.batched_matmul(e, col)?;
    let ev = tape.reshape(ev, &s)?;
    tape.add(v, ev)
}

/// Elementwise node reweighting `U * theta`, `theta` shared over the batch.
pub fn apply_node_weights(tape: &mut Tape, u: Var, theta: Var) -> Result<Var> {
    let (su, st) = (tape.shape(u).to_vec(), tape.shape(theta).to_vec());
    if su.len() != 2 || st != [su[1]] {
        return Err(Error::ShapeMismatch { op: "apply_node_weights", lhs: su, rhs: st });
    }
    tape.mul(u, theta)
}

/// Mean over channels: `[n, h, w, c] -> [n, h, w]`.
pub fn channel_squeeze(tape: &mut Tape, x: Var) -> Result<Var> {
    expect_map(tape, x)?;
    tape.mean_axis(x, 3)
}

/// Mean over positions: `[n, h, w, c] -> [n, c]`.
pub fn spatial_squeeze(tape: &mut Tape, x: Var) -> Result<Var> {
    let s = expect_map(tape, x)?;
    let flat = tape.reshape(x, &[s[0], s[1] * s[2], s[3]])?;
    tape.mean_axis(flat, 1)
}

fn expect_map(tape: &Tape, x: Var) -> Result<Vec<usize>> {
    let s = tape.shape(x).to_vec();
    if s.len() != 4 {
        return Err(Error::InvalidShape { shape: s, reason: "expected [n, h, w, c]".into() });
    }
    Ok(s)
}

struct AvgPoolClipped {
    k: usize,
}

fn clipped_window(i: usize, k: usize, len: usize) -> std::ops::Range<usize> {
    i..(i + k).min(len)
}

impl VjpRule for AvgPoolClipped {
    fn name(&self) -> &'static str {
        "avg_pool"
    }
    fn vjp(&self, inputs: &[&Tensor], _: &Tensor, grad: &Tensor, _: &[bool]) -> Vec<Option<Tensor>> {
        let s = inputs[0].shape();
        let (n, h, w) = (s[0], s[1], s[2]);
        let g = grad.data();
        let mut out = vec![0.0; n * h * w];
        for b in 0..n {
            for i in 0..h {
                for j in 0..w {
                    let (rows, cols) = (clipped_window(i, self.k, h), clipped_window(j, self.k, w));
                    let share = g[(b * h + i) * w + j] / (rows.len() * cols.len()) as f64;
                    for y in rows {
                        for x in cols.clone() {
                            out[(b * h + y) * w + x] += share;
                        }
                    }
                }
            }
        }
        vec![Some(Tensor::from_parts(s.to_vec(), out))]
    }
}

/// Stride-1 `k x k` mean anchored at each position (window covers rows
/// `i..i+k` and columns `j..j+k`), clipped to the map and averaging only the
/// covered entries. Shape is preserved.
pub fn avg_pool_clipped(tape: &mut Tape, s: Var, k: usize) -> Result<Var> {
    let shape = tape.shape(s).to_vec();
    if k < 1 {
        return Err(Error::Config("pooling window must be >= 1".into()));
    }
    if shape.len() != 3 {
        return Err(Error::InvalidShape { shape, reason: "expected [n, h, w]".into() });
    }
    if k == 1 {
        return Ok(s);
    }
    let (n, h, w) = (shape[0], shape[1], shape[2]);
    let d = tape.value(s).data();
    let mut out = vec![0.0; n * h * w];
    for b in 0..n {
        for i in 0..h {
            for j in 0..w {
                let (rows, cols) = (clipped_window(i, k, h), clipped_window(j, k, w));
                let count = (rows.len() * cols.len()) as f64;
                let mut acc = 0.0;
                for y in rows {
                    for x in cols.clone() {
                        acc += d[(b * h + y) * w + x];
                    }
                }
                out[(b * h + i) * w + j] = acc / count;
            }
        }
    }
    Ok(tape.record(Tensor::from_parts(shape, out), &[s], AvgPoolClipped { k }))
}

/// Settings shared by both branches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GraphSettings {
    pub neighbors: NeighborSpec,
    pub variant: EdgeVariant,
    pub leaky_slope: f64,
}

impl Default for GraphSettings {
    fn default() -> Self {
        Self {
            neighbors: NeighborSpec::default(),
            variant: EdgeVariant::default(),
            leaky_slope: crate::ops::LEAKY_SLOPE,
        }
    }
}

/// Multi-scale spatial similarity graph: `[n, h, w, c] -> [n, h, w, 1]`.
/// `thetas[i]` (length `h * w`) weights the graph built at `scales[i]`.
pub fn spatial_branch(
    tape: &mut Tape,
    x: Var,
    settings: &GraphSettings,
    scales: &[usize],
    thetas: &[Var],
) -> Result<Var> {
    let s = expect_map(tape, x)?;
    let (n, h, w) = (s[0], s[1], s[2]);
    if scales.is_empty() || scales.len() != thetas.len() {
        return Err(Error::Config(format!(
            "{} scales but {} node-weight vectors",
            scales.len(),
            thetas.len()
        )));
    }
    let nbrs = Neighborhood::spatial(h, w, settings.neighbors.spatial_window);
    let squeezed = channel_squeeze(tape, x)?;
    let mut total: Option<Var> = None;
    for (&k, &theta) in scales.iter().zip(thetas) {
        let pooled = avg_pool_clipped(tape, squeezed, k)?;
        let nodes = tape.reshape(pooled, &[n, h * w])?;
        let edges = build_edges(tape, nodes, &nbrs, settings.variant)?;
        let u = aggregate_nodes(tape, edges, nodes)?;
        let a = apply_node_weights(tape, u, theta)?;
        total = Some(match total {
            None => a,
            Some(t) => tape.add(t, a)?,
        });
    }
    tape.reshape(total.expect("nonempty scales"), &[n, h, w, 1])
}

/// Channel similarity graph: `[n, h, w, c] -> [n, c]`.
pub fn channel_branch(tape: &mut Tape, x: Var, settings: &GraphSettings, delta: Var) -> Result<Var> {
    let s = expect_map(tape, x)?;
    let nbrs = Neighborhood::channel(s[3], settings.neighbors.channel_window, settings.neighbors.channel_stride);
    let nodes = spatial_squeeze(tape, x)?;
    let edges = build_edges(tape, nodes, &nbrs, settings.variant)?;
    let u = aggregate_nodes(tape, edges, nodes)?;
    apply_node_weights(tape, u, delta)
}

/// `X + LeakyReLU(BN(A_ms * A_c))` with `A_ms: [n, h, w, 1]` broadcast
/// against `A_c: [n, c]`.
#[allow(clippy::too_many_arguments)]
pub fn fuse_and_enhance(
    tape: &mut Tape,
    a_ms: Var,
    a_c: Var,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: BnStats<'_>,
    leaky_slope: f64,
) -> Result<(Var, Option<ObservedStats>)> {
    let o = enhance(tape, a_ms, a_c, x, gamma, beta, stats, leaky_slope)?;
    Ok((tape.add(o.0, x)?, o.1))
}

/// The residual branch `LeakyReLU(BN(A_ms * A_c))` alone.
#[allow(clippy::too_many_arguments)]
pub fn enhance(
    tape: &mut Tape,
    a_ms: Var,
    a_c: Var,
    x: Var,
    gamma: Var,
    beta: Var,
    stats: BnStats<'_>,
    leaky_slope: f64,
) -> Result<(Var, Option<ObservedStats>)> {
    let s = expect_map(tape, x)?;
    let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
    if tape.shape(a_ms) != [n, h, w, 1] || tape.shape(a_c) != [n, c] {
        return Err(Error::ShapeMismatch {
            op: "fuse_and_enhance",
            lhs: tape.shape(a_ms).to_vec(),
            rhs: tape.shape(a_c).to_vec(),
        });
    }
    let a_c = tape.reshape(a_c, &[n, 1, 1, c])?;
    let msc = tape.mul(a_ms, a_c)?;
    let (normed, observed) = nn::batch_norm(tape, msc, gamma, beta, stats)?;
    Ok((tape.leaky_relu(normed, leaky_slope), observed))
}
