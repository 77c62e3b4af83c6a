//! Region-restricted cross-attention from a learnable query grid onto the
//! multi-scale feature pyramid, plus the channel-concat fusion baseline.
//!
//! Each query token (a cell of an L×L grid) attends only to its mapped
//! k_s×k_s block in every scale, with keys and values stacked scale-major
//! and row-major inside each block. The output row is the projected query
//! plus the attention mix.

use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::math;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::pe;
use crate::pyramid::MultiScaleFeatures;
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// For each query token, the mapped sub-region index lists per scale.
#[derive(Debug, Clone, PartialEq)]
pub struct RegionMap {
    pub query_side: usize,
    pub scale_sides: Vec<usize>,
    pub ratios: Vec<usize>,
    /// `regions[i * num_scales + s]`: row-major token indices of the block
    /// of scale `s` mapped to query `i`.
    regions: Vec<Vec<usize>>,
}

impl RegionMap {
    pub fn num_queries(&self) -> usize {
        self.query_side * self.query_side
    }

    pub fn num_scales(&self) -> usize {
        self.scale_sides.len()
    }

    pub fn region(&self, query: usize, scale: usize) -> &[usize] {
        &self.regions[query * self.num_scales() + scale]
    }

    /// Keys/values seen by one query: sum of k_s² over scales.
    pub fn kv_len(&self) -> usize {
        self.ratios.iter().map(|k| k * k).sum()
    }

    /// Relabel query tokens: query `perm[i]` of the result maps to what
    /// query `i` mapped to before.
    pub fn permute_queries(&self, perm: &[usize]) -> RegionMap {
        assert_eq!(perm.len(), self.num_queries());
        let s = self.num_scales();
        let mut regions = self.regions.clone();
        for (i, &p) in perm.iter().enumerate() {
            for scale in 0..s {
                regions[p * s + scale] = self.regions[i * s + scale].clone();
            }
        }
        RegionMap {
            query_side: self.query_side,
            scale_sides: self.scale_sides.clone(),
            ratios: self.ratios.clone(),
            regions,
        }
    }
}

/// Build the query→block assignment. Every scale side must be an integer
/// multiple of the query side.
pub fn build_region_map(query_side: usize, scale_sides: &[usize]) -> Result<RegionMap> {
    if query_side == 0 || scale_sides.is_empty() {
        return Err(config_err!("region map needs a query grid and scales"));
    }
    let mut ratios = Vec::with_capacity(scale_sides.len());
    for &side in scale_sides {
        if side == 0 || side % query_side != 0 {
            return Err(config_err!(
                "scale side {side} is not a multiple of query side {query_side}"
            ));
        }
        ratios.push(side / query_side);
    }
    let l = query_side;
    let s = scale_sides.len();
    let mut regions = Vec::with_capacity(l * l * s);
    for qr in 0..l {
        for qc in 0..l {
            for (scale, &k) in ratios.iter().enumerate() {
                let side = scale_sides[scale];
                let mut idx = Vec::with_capacity(k * k);
                for dr in 0..k {
                    for dc in 0..k {
                        idx.push((qr * k + dr) * side + (qc * k + dc));
                    }
                }
                regions.push(idx);
            }
        }
    }
    Ok(RegionMap {
        query_side,
        scale_sides: scale_sides.to_vec(),
        ratios,
        regions,
    })
}

/// Query/key/value projections of one attention insertion.
pub struct AttendWeights {
    pub dim: usize,
    pub w_q: ParamId,
    pub w_k: Vec<ParamId>,
    pub w_v: Vec<ParamId>,
}

pub fn register_attend(
    store: &mut ParamStore,
    dim: usize,
    num_scales: usize,
    prefix: &str,
    group: ParamGroup,
    seed: u64,
) -> Result<AttendWeights> {
    let std = 1.0 / math::sqrt(dim as f64);
    let mat = |store: &mut ParamStore, name: &str| -> Result<ParamId> {
        let t = Tensor::randn(alloc::vec![dim, dim], std, &mut rng::seeded_for(seed, name));
        store.register(name, group, t)
    };
    let w_q = mat(store, &alloc::format!("{prefix}.w_q"))?;
    let mut w_k = Vec::new();
    let mut w_v = Vec::new();
    for s in 0..num_scales {
        w_k.push(mat(store, &alloc::format!("{prefix}.scale{s}.w_k"))?);
        w_v.push(mat(store, &alloc::format!("{prefix}.scale{s}.w_v"))?);
    }
    Ok(AttendWeights { dim, w_q, w_k, w_v })
}

/// The learnable query grid plus its projections.
pub struct FusionWeights {
    pub query: ParamId,
    pub attend: AttendWeights,
}

pub fn register_fusion(
    store: &mut ParamStore,
    query_side: usize,
    dim: usize,
    num_scales: usize,
    seed: u64,
) -> Result<FusionWeights> {
    let name = "fusion.query";
    let query = store.register(
        name,
        ParamGroup::Fusion,
        Tensor::randn(
            alloc::vec![query_side * query_side, dim],
            0.2,
            &mut rng::seeded_for(seed, name),
        ),
    )?;
    let attend = register_attend(store, dim, num_scales, "fusion", ParamGroup::Fusion, seed)?;
    Ok(FusionWeights { query, attend })
}

/// Add the fixed 2-D sinusoidal table for a `side×side` grid.
pub fn add_positional(features: &Tensor, side: usize) -> Result<Tensor> {
    if features.rows() != side * side {
        return Err(shape_err!(
            "{} tokens do not form a {side}×{side} grid",
            features.rows()
        ));
    }
    let table = pe::grid_table(side, features.cols());
    let data = features
        .data()
        .iter()
        .zip(table.data())
        .map(|(a, b)| a + b)
        .collect();
    Tensor::new(alloc::vec![features.rows(), features.cols()], data)
}

pub fn add_positional_graph(tape: &mut Tape, grid: NodeId, side: usize) -> NodeId {
    let (rows, dim) = tape.shape(grid);
    assert_eq!(rows, side * side, "token count vs grid side");
    let table = pe::grid_table(side, dim);
    let pe_node = tape.constant(rows, dim, table.data().to_vec());
    tape.add(grid, pe_node)
}

/// Record region-restricted attention on the tape.
///
/// `query_grid` and `feats` must already carry their positional encodings.
/// Per query row i: `out_i = q_i + softmax(q_i·K_iᵀ/√D)·V_i` with
/// `q_i = query_i·W_qᵀ` and K_i/V_i the per-scale projections of the mapped
/// region tokens, stacked scale-major.
pub fn region_attend_graph(
    tape: &mut Tape,
    query_grid: NodeId,
    weights: &AttendWeights,
    feats: &[NodeId],
    map: &RegionMap,
) -> NodeId {
    assert_eq!(feats.len(), map.num_scales(), "feature scales vs map");
    let d = weights.dim;
    let w_q = tape.param(weights.w_q);
    let q_proj = tape.matmul_nt(query_grid, w_q);
    let keys: Vec<NodeId> = feats
        .iter()
        .zip(&weights.w_k)
        .map(|(&f, &w)| {
            let w = tape.param(w);
            tape.matmul_nt(f, w)
        })
        .collect();
    let vals: Vec<NodeId> = feats
        .iter()
        .zip(&weights.w_v)
        .map(|(&f, &w)| {
            let w = tape.param(w);
            tape.matmul_nt(f, w)
        })
        .collect();
    let scale = 1.0 / math::sqrt(d as f64);
    let mut rows = Vec::with_capacity(map.num_queries());
    for i in 0..map.num_queries() {
        let qi = tape.slice_rows(q_proj, i, 1);
        let k_parts: Vec<NodeId> = (0..map.num_scales())
            .map(|s| tape.gather_rows(keys[s], map.region(i, s).to_vec()))
            .collect();
        let v_parts: Vec<NodeId> = (0..map.num_scales())
            .map(|s| tape.gather_rows(vals[s], map.region(i, s).to_vec()))
            .collect();
        let k_i = tape.concat_rows(&k_parts);
        let v_i = tape.concat_rows(&v_parts);
        let scores = tape.matmul_nt(qi, k_i);
        let scores = tape.scale(scores, scale);
        let probs = tape.softmax_rows(scores);
        let mix = tape.matmul(probs, v_i);
        rows.push(tape.add(qi, mix));
    }
    tape.concat_rows(&rows)
}

fn check_projected(feats: &MultiScaleFeatures, map: &RegionMap, dim: usize) -> Result<()> {
    if !feats.projected {
        return Err(shape_err!("fusion expects projected features"));
    }
    if feats.sides != map.scale_sides {
        return Err(shape_err!(
            "feature sides {:?} vs region map {:?}",
            feats.sides,
            map.scale_sides
        ));
    }
    for g in &feats.grids {
        if g.cols() != dim {
            return Err(shape_err!("feature width {} vs dim {dim}", g.cols()));
        }
    }
    Ok(())
}

/// Eager region-restricted attention over tensors.
pub fn region_attend(
    query_grid: &Tensor,
    store: &ParamStore,
    weights: &AttendWeights,
    feats: &MultiScaleFeatures,
    map: &RegionMap,
) -> Result<Tensor> {
    check_projected(feats, map, weights.dim)?;
    if query_grid.rows() != map.num_queries() || query_grid.cols() != weights.dim {
        return Err(shape_err!(
            "query grid {}×{} vs {} queries of dim {}",
            query_grid.rows(),
            query_grid.cols(),
            map.num_queries(),
            weights.dim
        ));
    }
    let mut tape = Tape::new(store);
    let q = tape.input(query_grid);
    let f: Vec<NodeId> = feats.grids.iter().map(|g| tape.input(g)).collect();
    let out = region_attend_graph(&mut tape, q, weights, &f, map);
    Tensor::new(
        alloc::vec![map.num_queries(), weights.dim],
        tape.value(out).to_vec(),
    )
}

/// Oracle: the same attention computed with plain scalar loops, one query
/// token and one region element at a time. Kept deliberately naive and
/// independent of the tape kernels.
pub fn region_attend_reference(
    query_grid: &Tensor,
    store: &ParamStore,
    weights: &AttendWeights,
    feats: &MultiScaleFeatures,
    map: &RegionMap,
) -> Result<Tensor> {
    check_projected(feats, map, weights.dim)?;
    let d = weights.dim;
    let nq = map.num_queries();
    if query_grid.rows() != nq || query_grid.cols() != d {
        return Err(shape_err!("query grid shape mismatch"));
    }
    let wq = store.get(weights.w_q).data();
    let mut out = Vec::with_capacity(nq * d);
    for i in 0..nq {
        // q = W_q · x_q(i)
        let xq = &query_grid.data()[i * d..(i + 1) * d];
        let mut q = alloc::vec![0.0; d];
        for r in 0..d {
            let mut acc = 0.0;
            for c in 0..d {
                acc += wq[r * d + c] * xq[c];
            }
            q[r] = acc;
        }
        // keys and values of the mapped regions, scale-major
        let mut key_rows: Vec<Vec<f64>> = Vec::new();
        let mut val_rows: Vec<Vec<f64>> = Vec::new();
        for s in 0..map.num_scales() {
            let wk = store.get(weights.w_k[s]).data();
            let wv = store.get(weights.w_v[s]).data();
            let grid = feats.grids[s].data();
            for &t in map.region(i, s) {
                let x = &grid[t * d..(t + 1) * d];
                let mut krow = alloc::vec![0.0; d];
                let mut vrow = alloc::vec![0.0; d];
                for r in 0..d {
                    let mut ka = 0.0;
                    let mut va = 0.0;
                    for c in 0..d {
                        ka += wk[r * d + c] * x[c];
                        va += wv[r * d + c] * x[c];
                    }
                    krow[r] = ka;
                    vrow[r] = va;
                }
                key_rows.push(krow);
                val_rows.push(vrow);
            }
        }
        // softmax(q·Kᵀ/√d)
        let inv = 1.0 / math::sqrt(d as f64);
        let mut logits: Vec<f64> = key_rows
            .iter()
            .map(|k| q.iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * inv)
            .collect();
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut norm = 0.0;
        for l in logits.iter_mut() {
            *l = math::exp(*l - max);
            norm += *l;
        }
        for l in logits.iter_mut() {
            *l /= norm;
        }
        debug_assert!((logits.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
        // out_i = q + Σ a_j v_j
        for r in 0..d {
            let mut acc = q[r];
            for (a, v) in logits.iter().zip(&val_rows) {
                acc += a * v[r];
            }
            out.push(acc);
        }
    }
    Tensor::new(alloc::vec![nq, d], out)
}

/// Mixing map of the concat baseline: all scales resampled to the query
/// grid, stacked along channels, then mapped back to `dim`.
pub struct ConcatWeights {
    pub dim: usize,
    pub mix: ParamId,
}

pub fn register_concat(
    store: &mut ParamStore,
    dim: usize,
    num_scales: usize,
    seed: u64,
) -> Result<ConcatWeights> {
    let name = "fusion.concat.mix";
    let fan_in = dim * num_scales;
    let mix = store.register(
        name,
        ParamGroup::Fusion,
        Tensor::randn(
            alloc::vec![dim, fan_in],
            1.0 / math::sqrt(fan_in as f64),
            &mut rng::seeded_for(seed, name),
        ),
    )?;
    Ok(ConcatWeights { dim, mix })
}

pub fn concat_fusion_graph(
    tape: &mut Tape,
    feats: &[NodeId],
    sides: &[usize],
    target_side: usize,
    weights: &ConcatWeights,
) -> NodeId {
    let resized: Vec<NodeId> = feats
        .iter()
        .zip(sides)
        .map(|(&f, &side)| tape.bilinear_resize(f, side, target_side))
        .collect();
    let stacked = tape.concat_cols(&resized);
    let mix = tape.param(weights.mix);
    tape.matmul_nt(stacked, mix)
}

/// Eager concat-fusion baseline.
pub fn concat_fusion(
    feats: &MultiScaleFeatures,
    target_side: usize,
    store: &ParamStore,
    weights: &ConcatWeights,
) -> Result<Tensor> {
    if !feats.projected {
        return Err(shape_err!("concat fusion expects projected features"));
    }
    let mut tape = Tape::new(store);
    let f: Vec<NodeId> = feats.grids.iter().map(|g| tape.input(g)).collect();
    let out = concat_fusion_graph(&mut tape, &f, &feats.sides, target_side, weights);
    Tensor::new(
        alloc::vec![target_side * target_side, weights.dim],
        tape.value(out).to_vec(),
    )
}
