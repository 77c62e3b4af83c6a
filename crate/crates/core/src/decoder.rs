//! A small pre-norm causal decoder with visual tokens prepended, low-rank
//! adapters on the attention query/value projections, and optional
//! region-attention re-alignment of the visual rows after selected layers.

use alloc::string::String;
use alloc::vec::Vec;

use crate::error::{config_err, numeric_err, shape_err, Error, Result};
use crate::fusion::{add_positional_graph, region_attend_graph, AttendWeights, RegionMap};
use crate::math;
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::pe;
use crate::rng::{self, Rng, StdRng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct LoraConfig {
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    /// Layers after which the visual rows re-attend to the cached features.
    pub realign_layers: Vec<usize>,
    /// Width of the projected features the realign attention runs in.
    pub fusion_dim: usize,
    pub lora: Option<LoraConfig>,
}

impl DecoderConfig {
    /// Default re-alignment placement: every ⌈n_layers/4⌉-th layer.
    pub fn default_realign_layers(n_layers: usize) -> Vec<usize> {
        let stride = n_layers.div_ceil(4);
        (0..n_layers).step_by(stride.max(1)).collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(config_err!("decoder dims must be positive"));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(config_err!(
                "n_heads {} must divide d_model {}",
                self.n_heads,
                self.d_model
            ));
        }
        if self
            .realign_layers
            .windows(2)
            .any(|w| w[1] <= w[0])
        {
            return Err(config_err!("realign layers must be strictly increasing"));
        }
        if self.realign_layers.iter().any(|&l| l >= self.n_layers) {
            return Err(config_err!("realign layer index out of range"));
        }
        if let Some(lora) = &self.lora {
            if lora.rank == 0 || lora.rank >= self.d_model {
                return Err(config_err!(
                    "lora rank {} must be in 1..{}",
                    lora.rank,
                    self.d_model
                ));
            }
            if !(0.0..1.0).contains(&lora.dropout) {
                return Err(config_err!("lora dropout {} outside [0,1)", lora.dropout));
            }
        }
        Ok(())
    }
}

/// A low-rank additive delta `(alpha/r)·B·A` on a frozen base matrix.
/// `b` starts at zero, so a fresh adapter is a no-op.
pub struct LoraAdapter {
    pub target: String,
    pub a: ParamId,
    pub b: ParamId,
    pub rank: usize,
    pub alpha: f64,
    pub dropout: f64,
}

impl LoraAdapter {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

pub fn register_lora(
    store: &mut ParamStore,
    target: &str,
    d_in: usize,
    d_out: usize,
    cfg: &LoraConfig,
    seed: u64,
) -> Result<LoraAdapter> {
    if cfg.rank == 0 || cfg.rank >= d_in.min(d_out) {
        return Err(config_err!(
            "lora rank {} must be below min({d_in},{d_out})",
            cfg.rank
        ));
    }
    let a_name = alloc::format!("lora.{target}.a");
    let a = store.register(
        &a_name,
        ParamGroup::Lora,
        Tensor::randn(
            alloc::vec![cfg.rank, d_in],
            1.0 / math::sqrt(d_in as f64),
            &mut rng::seeded_for(seed, &a_name),
        ),
    )?;
    let b = store.register(
        &alloc::format!("lora.{target}.b"),
        ParamGroup::Lora,
        Tensor::zeros(alloc::vec![d_out, cfg.rank]),
    )?;
    Ok(LoraAdapter {
        target: String::from(target),
        a,
        b,
        rank: cfg.rank,
        alpha: cfg.alpha,
        dropout: cfg.dropout,
    })
}

/// `x·(W + (alpha/r)·B·A)ᵀ` without touching the base matrix.
pub fn lora_apply(
    x: &Tensor,
    base: &Tensor,
    store: &ParamStore,
    adapter: &LoraAdapter,
) -> Result<Tensor> {
    let (d_out, d_in) = (base.rows(), base.cols());
    if x.cols() != d_in {
        return Err(shape_err!("input width {} vs base {}", x.cols(), d_in));
    }
    let a = store.get(adapter.a);
    let b = store.get(adapter.b);
    if a.dims() != [adapter.rank, d_in] || b.dims() != [d_out, adapter.rank] {
        return Err(shape_err!("adapter dims do not match base"));
    }
    let mut probe = ParamStore::new();
    let mut tape = Tape::new(&mut probe);
    let xn = tape.input(x);
    let wn = tape.input(base);
    let an = tape.input(a);
    let bn = tape.input(b);
    let y = tape.matmul_nt(xn, wn);
    let lo = tape.matmul_nt(xn, an);
    let lo = tape.matmul_nt(lo, bn);
    let lo = tape.scale(lo, adapter.scaling());
    let out = tape.add(y, lo);
    Tensor::new(alloc::vec![x.rows(), d_out], tape.value(out).to_vec())
}

/// Re-alignment block: visual rows are mapped into the fusion width, used
/// as the query grid of a region attention over the cached features, mapped
/// back, and added residually. `w_out` starts at zero so insertion does not
/// change behaviour.
pub struct RealignWeights {
    pub w_in: ParamId,
    pub attend: AttendWeights,
    pub w_out: ParamId,
}

pub struct LayerWeights {
    pub ln1_g: ParamId,
    pub ln1_b: ParamId,
    pub w_q: ParamId,
    pub w_k: ParamId,
    pub w_v: ParamId,
    pub w_o: ParamId,
    pub ln2_g: ParamId,
    pub ln2_b: ParamId,
    pub fc1: ParamId,
    pub fc2: ParamId,
    pub lora_q: Option<LoraAdapter>,
    pub lora_v: Option<LoraAdapter>,
    pub realign: Option<RealignWeights>,
}

pub struct DecoderWeights {
    /// Token embedding, also used as the tied output head.
    pub embed: ParamId,
    pub layers: Vec<LayerWeights>,
    pub ln_f_g: ParamId,
    pub ln_f_b: ParamId,
}

pub fn register_decoder(
    store: &mut ParamStore,
    config: &DecoderConfig,
    num_scales: usize,
    seed: u64,
) -> Result<DecoderWeights> {
    config.validate()?;
    let c = config.d_model;
    let d = config.fusion_dim;
    let residual_scale = 1.0 / math::sqrt(2.0 * config.n_layers as f64);
    let embed = store.register(
        "dec.embed",
        ParamGroup::Decoder,
        Tensor::randn(
            alloc::vec![config.vocab_size, c],
            0.08,
            &mut rng::seeded_for(seed, "dec.embed"),
        ),
    )?;
    let mat = |store: &mut ParamStore, name: &str, rows, cols, std| -> Result<ParamId> {
        store.register(
            name,
            ParamGroup::Decoder,
            Tensor::randn(alloc::vec![rows, cols], std, &mut rng::seeded_for(seed, name)),
        )
    };
    let ln = |store: &mut ParamStore, name: &str| -> Result<(ParamId, ParamId)> {
        let g = store.register(
            &alloc::format!("{name}.g"),
            ParamGroup::Decoder,
            Tensor::full(alloc::vec![1, c], 1.0),
        )?;
        let b = store.register(
            &alloc::format!("{name}.b"),
            ParamGroup::Decoder,
            Tensor::zeros(alloc::vec![1, c]),
        )?;
        Ok((g, b))
    };
    let xavier = 1.0 / math::sqrt(c as f64);
    let mut layers = Vec::with_capacity(config.n_layers);
    for li in 0..config.n_layers {
        let p = alloc::format!("dec.layer{li}");
        let (ln1_g, ln1_b) = ln(store, &alloc::format!("{p}.ln1"))?;
        let w_q = mat(store, &alloc::format!("{p}.attn.w_q"), c, c, xavier)?;
        let w_k = mat(store, &alloc::format!("{p}.attn.w_k"), c, c, xavier)?;
        let w_v = mat(store, &alloc::format!("{p}.attn.w_v"), c, c, xavier)?;
        let w_o = mat(
            store,
            &alloc::format!("{p}.attn.w_o"),
            c,
            c,
            xavier * residual_scale,
        )?;
        let (ln2_g, ln2_b) = ln(store, &alloc::format!("{p}.ln2"))?;
        let fc1 = mat(store, &alloc::format!("{p}.mlp.fc1"), 4 * c, c, xavier)?;
        let fc2 = mat(
            store,
            &alloc::format!("{p}.mlp.fc2"),
            c,
            4 * c,
            residual_scale / math::sqrt(4.0 * c as f64),
        )?;
        let (lora_q, lora_v) = match &config.lora {
            Some(lc) => (
                Some(register_lora(
                    store,
                    &alloc::format!("layer{li}.q"),
                    c,
                    c,
                    lc,
                    seed,
                )?),
                Some(register_lora(
                    store,
                    &alloc::format!("layer{li}.v"),
                    c,
                    c,
                    lc,
                    seed,
                )?),
            ),
            None => (None, None),
        };
        let realign = if config.realign_layers.contains(&li) {
            let rp = alloc::format!("realign.layer{li}");
            let w_in_name = alloc::format!("{rp}.w_in");
            let w_in = store.register(
                &w_in_name,
                ParamGroup::Realign,
                Tensor::randn(
                    alloc::vec![d, c],
                    xavier,
                    &mut rng::seeded_for(seed, &w_in_name),
                ),
            )?;
            let attend =
                crate::fusion::register_attend(store, d, num_scales, &rp, ParamGroup::Realign, seed)?;
            let w_out = store.register(
                &alloc::format!("{rp}.w_out"),
                ParamGroup::Realign,
                Tensor::zeros(alloc::vec![c, d]),
            )?;
            Some(RealignWeights { w_in, attend, w_out })
        } else {
            None
        };
        layers.push(LayerWeights {
            ln1_g,
            ln1_b,
            w_q,
            w_k,
            w_v,
            w_o,
            ln2_g,
            ln2_b,
            fc1,
            fc2,
            lora_q,
            lora_v,
            realign,
        });
    }
    let (ln_f_g, ln_f_b) = ln(store, "dec.ln_f")?;
    Ok(DecoderWeights {
        embed,
        layers,
        ln_f_g,
        ln_f_b,
    })
}

/// One training sequence: a visual block, text token ids, and the
/// supervision mask over the full (visual + text) sequence.
#[derive(Debug, Clone)]
pub struct SequenceBatch {
    pub visual: Tensor,
    pub text_ids: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl SequenceBatch {
    pub fn new(visual: Tensor, text_ids: Vec<usize>, loss_mask: Vec<bool>) -> Result<Self> {
        let n_v = visual.rows();
        let total = n_v + text_ids.len();
        if loss_mask.len() != total {
            return Err(shape_err!(
                "loss mask length {} vs sequence length {total}",
                loss_mask.len()
            ));
        }
        if loss_mask[..n_v].iter().any(|&m| m) {
            return Err(shape_err!("loss mask must be false at visual positions"));
        }
        // A supervised position predicts the next sequence element, which
        // must be a text token.
        for (t, &m) in loss_mask.iter().enumerate() {
            if m && (t + 1 >= total || t + 1 < n_v) {
                return Err(shape_err!("position {t} has no text successor to predict"));
            }
        }
        if !loss_mask.iter().any(|&m| m) {
            return Err(numeric_err!("loss mask supervises no position"));
        }
        Ok(SequenceBatch {
            visual,
            text_ids,
            loss_mask,
        })
    }

    pub fn n_visual(&self) -> usize {
        self.visual.rows()
    }

    pub fn total_len(&self) -> usize {
        self.n_visual() + self.text_ids.len()
    }

    /// Shift-by-one targets aligned with the sequence positions. Masked-off
    /// positions carry a dummy target of 0.
    pub fn shifted_targets(&self) -> (Vec<usize>, Vec<bool>) {
        let n_v = self.n_visual();
        let total = self.total_len();
        let mut targets = alloc::vec![0usize; total];
        for t in 0..total {
            if self.loss_mask[t] {
                targets[t] = self.text_ids[t + 1 - n_v];
            }
        }
        (targets, self.loss_mask.clone())
    }
}

/// Cached projected features for the realign layers.
pub struct FeatureCache<'f> {
    pub feats: &'f [NodeId],
    pub map: &'f RegionMap,
}

fn realign_graph(
    tape: &mut Tape,
    hidden: NodeId,
    n_v: usize,
    rw: &RealignWeights,
    cache: &FeatureCache,
) -> NodeId {
    let (total, _c) = tape.shape(hidden);
    let vis = tape.slice_rows(hidden, 0, n_v);
    let w_in = tape.param(rw.w_in);
    let q = tape.matmul_nt(vis, w_in);
    let q = add_positional_graph(tape, q, cache.map.query_side);
    let fused = region_attend_graph(tape, q, &rw.attend, cache.feats, cache.map);
    let w_out = tape.param(rw.w_out);
    let delta = tape.matmul_nt(fused, w_out);
    let vis_new = tape.add(vis, delta);
    let rest = tape.slice_rows(hidden, n_v, total - n_v);
    tape.concat_rows(&[vis_new, rest])
}

fn lora_linear(
    tape: &mut Tape,
    x: NodeId,
    base: ParamId,
    adapter: Option<&LoraAdapter>,
    dropout: &mut Option<&mut StdRng>,
) -> NodeId {
    let w = tape.param(base);
    let y = tape.matmul_nt(x, w);
    let Some(ad) = adapter else {
        return y;
    };
    let x_in = match dropout {
        Some(rng) if ad.dropout > 0.0 => {
            let (m, n) = tape.shape(x);
            let keep = 1.0 - ad.dropout;
            let mask: Vec<f64> = (0..m * n)
                .map(|_| {
                    if rng.random::<f64>() < ad.dropout {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect();
            tape.mul_mask(x, mask)
        }
        _ => x,
    };
    let a = tape.param(ad.a);
    let b = tape.param(ad.b);
    let lo = tape.matmul_nt(x_in, a);
    let lo = tape.matmul_nt(lo, b);
    let lo = tape.scale(lo, ad.scaling());
    tape.add(y, lo)
}

fn attention_graph(
    tape: &mut Tape,
    x: NodeId,
    lw: &LayerWeights,
    n_heads: usize,
    dropout: &mut Option<&mut StdRng>,
) -> NodeId {
    let (_t, c) = tape.shape(x);
    let hd = c / n_heads;
    let q = lora_linear(tape, x, lw.w_q, lw.lora_q.as_ref(), dropout);
    let wk = tape.param(lw.w_k);
    let k = tape.matmul_nt(x, wk);
    let v = lora_linear(tape, x, lw.w_v, lw.lora_v.as_ref(), dropout);
    let scale = 1.0 / math::sqrt(hd as f64);
    let heads: Vec<NodeId> = (0..n_heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            tape.causal_attend(qh, kh, vh, scale)
        })
        .collect();
    let merged = tape.concat_cols(&heads);
    let wo = tape.param(lw.w_o);
    tape.matmul_nt(merged, wo)
}

/// Record the decoder forward: visual block prepended to embedded text,
/// pre-norm blocks, re-alignment after the configured layers, tied-head
/// logits over the whole sequence.
pub fn decoder_forward_graph(
    tape: &mut Tape,
    visual: NodeId,
    text_ids: &[usize],
    config: &DecoderConfig,
    weights: &DecoderWeights,
    cache: Option<&FeatureCache>,
    mut dropout: Option<&mut StdRng>,
) -> Result<NodeId> {
    let (n_v, c) = tape.shape(visual);
    debug_assert_eq!(c, config.d_model);
    let total = n_v + text_ids.len();
    if total > config.max_seq_len {
        return Err(Error::Capacity(alloc::format!(
            "sequence length {total} exceeds max {}",
            config.max_seq_len
        )));
    }
    if let Some(&bad) = text_ids.iter().find(|&&id| id >= config.vocab_size) {
        return Err(shape_err!("token id {bad} outside vocab"));
    }
    let needs_cache = weights.layers.iter().any(|l| l.realign.is_some());
    if needs_cache && cache.is_none() {
        return Err(Error::State(String::from(
            "realign layers configured but no feature cache provided",
        )));
    }
    let embed = tape.param(weights.embed);
    let emb = tape.gather_rows(embed, text_ids.to_vec());
    let seq = tape.concat_rows(&[visual, emb]);
    let pe_table = pe::sequence_table(total, c);
    let pe_node = tape.constant(total, c, pe_table.data().to_vec());
    let mut h = tape.add(seq, pe_node);
    for lw in &weights.layers {
        let g1 = tape.param(lw.ln1_g);
        let b1 = tape.param(lw.ln1_b);
        let x = tape.layer_norm(h, g1, b1, 1e-5);
        let att = attention_graph(tape, x, lw, config.n_heads, &mut dropout);
        h = tape.add(h, att);
        let g2 = tape.param(lw.ln2_g);
        let b2 = tape.param(lw.ln2_b);
        let x2 = tape.layer_norm(h, g2, b2, 1e-5);
        let m = tape.param(lw.fc1);
        let mid = tape.matmul_nt(x2, m);
        let mid = tape.gelu(mid);
        let m2 = tape.param(lw.fc2);
        let mlp = tape.matmul_nt(mid, m2);
        h = tape.add(h, mlp);
        if let Some(rw) = &lw.realign {
            h = realign_graph(tape, h, n_v, rw, cache.expect("checked above"));
        }
    }
    let gf = tape.param(weights.ln_f_g);
    let bf = tape.param(weights.ln_f_b);
    let hf = tape.layer_norm(h, gf, bf, 1e-5);
    Ok(tape.matmul_nt(hf, embed))
}

/// Eager decoder forward over a prepared batch.
pub fn decoder_forward(
    batch: &SequenceBatch,
    cached: Option<(&crate::pyramid::MultiScaleFeatures, &RegionMap)>,
    config: &DecoderConfig,
    store: &ParamStore,
    weights: &DecoderWeights,
) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let visual = tape.input(&batch.visual);
    let nodes;
    let cache = match cached {
        Some((feats, map)) => {
            nodes = feats
                .grids
                .iter()
                .map(|g| tape.input(g))
                .collect::<Vec<_>>();
            Some(FeatureCache { feats: &nodes, map })
        }
        None => None,
    };
    let logits = decoder_forward_graph(
        &mut tape,
        visual,
        &batch.text_ids,
        config,
        weights,
        cache.as_ref(),
        None,
    )?;
    Tensor::new(
        alloc::vec![batch.total_len(), config.vocab_size],
        tape.value(logits).to_vec(),
    )
}

/// Mean next-token cross-entropy over the supervised positions.
pub fn next_token_loss(logits: &Tensor, batch: &SequenceBatch) -> Result<f64> {
    if logits.rows() != batch.total_len() {
        return Err(shape_err!(
            "logit rows {} vs sequence length {}",
            logits.rows(),
            batch.total_len()
        ));
    }
    let (targets, mask) = batch.shifted_targets();
    crate::ops::cross_entropy(logits, &targets, &mask)
}

/// Standalone multi-head causal self-attention over raw matrices.
pub fn causal_self_attention(
    hidden: &Tensor,
    w_q: &Tensor,
    w_k: &Tensor,
    w_v: &Tensor,
    w_o: &Tensor,
    n_heads: usize,
    max_seq_len: usize,
) -> Result<Tensor> {
    let (t, c) = (hidden.rows(), hidden.cols());
    if t > max_seq_len {
        return Err(Error::Capacity(alloc::format!(
            "sequence length {t} exceeds max {max_seq_len}"
        )));
    }
    if n_heads == 0 || c % n_heads != 0 {
        return Err(config_err!("n_heads {n_heads} must divide width {c}"));
    }
    for w in [w_q, w_k, w_v, w_o] {
        if w.rows() != c || w.cols() != c {
            return Err(shape_err!("projection must be {c}×{c}"));
        }
    }
    let store = ParamStore::new();
    let mut tape = Tape::new(&store);
    let x = tape.input(hidden);
    let hd = c / n_heads;
    let scale = 1.0 / math::sqrt(hd as f64);
    let (wq, wk, wv, wo) = (
        tape.input(w_q),
        tape.input(w_k),
        tape.input(w_v),
        tape.input(w_o),
    );
    let q = tape.matmul_nt(x, wq);
    let k = tape.matmul_nt(x, wk);
    let v = tape.matmul_nt(x, wv);
    let heads: Vec<NodeId> = (0..n_heads)
        .map(|h| {
            let qh = tape.slice_cols(q, h * hd, hd);
            let kh = tape.slice_cols(k, h * hd, hd);
            let vh = tape.slice_cols(v, h * hd, hd);
            tape.causal_attend(qh, kh, vh, scale)
        })
        .collect();
    let merged = tape.concat_cols(&heads);
    let out = tape.matmul_nt(merged, wo);
    Tensor::new(alloc::vec![t, c], tape.value(out).to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toy_config() -> DecoderConfig {
        DecoderConfig {
            n_layers: 2,
            d_model: 16,
            n_heads: 2,
            vocab_size: 11,
            max_seq_len: 16,
            realign_layers: vec![],
            fusion_dim: 8,
            lora: None,
        }
    }

    #[test]
    fn config_validation() {
        let mut c = toy_config();
        c.n_heads = 3;
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.realign_layers = vec![0, 0];
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.realign_layers = vec![5];
        assert!(c.validate().is_err());
        let mut c = toy_config();
        c.lora = Some(LoraConfig {
            rank: 16,
            alpha: 16.0,
            dropout: 0.0,
        });
        assert!(c.validate().is_err());
    }

    #[test]
    fn default_realign_placement() {
        assert_eq!(DecoderConfig::default_realign_layers(4), vec![0, 1, 2, 3]);
        assert_eq!(DecoderConfig::default_realign_layers(8), vec![0, 2, 4, 6]);
        assert_eq!(DecoderConfig::default_realign_layers(2), vec![0, 1]);
    }

    #[test]
    fn lora_zero_b_matches_base_exactly() {
        let mut store = ParamStore::new();
        let cfg = LoraConfig {
            rank: 4,
            alpha: 16.0,
            dropout: 0.0,
        };
        let ad = register_lora(&mut store, "t", 8, 8, &cfg, 3).unwrap();
        let mut r = rng::seeded(5);
        let x = Tensor::randn(vec![3, 8], 1.0, &mut r);
        let base = Tensor::randn(vec![8, 8], 1.0, &mut r);
        let with = lora_apply(&x, &base, &store, &ad).unwrap();
        let without = crate::ops::matmul(&x, &transpose(&base)).unwrap();
        assert_eq!(with.data(), without.data());
    }

    fn transpose(t: &Tensor) -> Tensor {
        let (r, c) = (t.rows(), t.cols());
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = t.data()[i * c + j];
            }
        }
        Tensor::new(vec![c, r], data).unwrap()
    }

    #[test]
    fn lora_published_scaling() {
        let mut store = ParamStore::new();
        let cfg = LoraConfig {
            rank: 64,
            alpha: 16.0,
            dropout: 0.05,
        };
        let ad = register_lora(&mut store, "big", 128, 128, &cfg, 3).unwrap();
        assert_eq!(ad.scaling(), 0.25);
    }

    #[test]
    fn lora_rank_must_stay_below_dims() {
        let mut store = ParamStore::new();
        let cfg = LoraConfig {
            rank: 8,
            alpha: 16.0,
            dropout: 0.0,
        };
        assert!(register_lora(&mut store, "t", 8, 16, &cfg, 3).is_err());
    }

    /// Numerical rank by Gaussian elimination with partial pivoting.
    fn numerical_rank(mut m: Vec<f64>, rows: usize, cols: usize, tol: f64) -> usize {
        let mut rank = 0;
        let mut row = 0;
        for col in 0..cols {
            let mut pivot = row;
            for r in row..rows {
                if m[r * cols + col].abs() > m[pivot * cols + col].abs() {
                    pivot = r;
                }
            }
            if m[pivot * cols + col].abs() <= tol {
                continue;
            }
            for c in 0..cols {
                m.swap(row * cols + c, pivot * cols + c);
            }
            for r in (row + 1)..rows {
                let f = m[r * cols + col] / m[row * cols + col];
                for c in 0..cols {
                    m[r * cols + c] -= f * m[row * cols + c];
                }
            }
            rank += 1;
            row += 1;
            if row == rows {
                break;
            }
        }
        rank
    }

    #[test]
    fn lora_delta_rank_is_bounded() {
        let mut store = ParamStore::new();
        let cfg = LoraConfig {
            rank: 2,
            alpha: 16.0,
            dropout: 0.0,
        };
        let ad = register_lora(&mut store, "t", 6, 5, &cfg, 9).unwrap();
        // fill B with random values; delta = (alpha/r)·B·A must have rank <= 2
        let mut r = rng::seeded(10);
        *store.get_mut(ad.b) = Tensor::randn(vec![5, 2], 1.0, &mut r);
        let a = store.get(ad.a).clone();
        let b = store.get(ad.b).clone();
        let delta = crate::ops::matmul(&b, &a).unwrap();
        let rank = numerical_rank(delta.data().to_vec(), 5, 6, 1e-9);
        assert!(rank <= 2, "rank {rank}");
    }

    #[test]
    fn single_token_attention_is_value_then_output_projection() {
        let mut r = rng::seeded(20);
        let c = 8;
        let x = Tensor::randn(vec![1, c], 1.0, &mut r);
        let wq = Tensor::randn(vec![c, c], 0.5, &mut r);
        let wk = Tensor::randn(vec![c, c], 0.5, &mut r);
        let wv = Tensor::randn(vec![c, c], 0.5, &mut r);
        let wo = Tensor::randn(vec![c, c], 0.5, &mut r);
        let out = causal_self_attention(&x, &wq, &wk, &wv, &wo, 2, 16).unwrap();
        let v = crate::ops::matmul(&x, &transpose(&wv)).unwrap();
        let expect = crate::ops::matmul(&v, &transpose(&wo)).unwrap();
        for (a, b) in out.data().iter().zip(expect.data()) {
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn overlength_sequence_is_capacity_error() {
        let mut r = rng::seeded(21);
        let c = 8;
        let x = Tensor::randn(vec![5, c], 1.0, &mut r);
        let w = Tensor::randn(vec![c, c], 0.5, &mut r);
        let err = causal_self_attention(&x, &w, &w, &w, &w, 2, 4).unwrap_err();
        assert!(matches!(err, Error::Capacity(_)));
    }

    /// Independent oracle: attention computed per position with plain loops.
    fn loop_attention(
        x: &Tensor,
        wq: &Tensor,
        wk: &Tensor,
        wv: &Tensor,
        wo: &Tensor,
        n_heads: usize,
    ) -> Vec<f64> {
        let (t_len, c) = (x.rows(), x.cols());
        let hd = c / n_heads;
        let proj = |w: &Tensor, row: &[f64]| -> Vec<f64> {
            (0..c)
                .map(|o| (0..c).map(|i| w.data()[o * c + i] * row[i]).sum())
                .collect()
        };
        let rows: Vec<&[f64]> = x.data().chunks(c).collect();
        let q: Vec<Vec<f64>> = rows.iter().map(|r| proj(wq, r)).collect();
        let k: Vec<Vec<f64>> = rows.iter().map(|r| proj(wk, r)).collect();
        let v: Vec<Vec<f64>> = rows.iter().map(|r| proj(wv, r)).collect();
        let mut merged = vec![0.0; t_len * c];
        for h in 0..n_heads {
            let lo = h * hd;
            for t in 0..t_len {
                let mut logits = Vec::new();
                for j in 0..=t {
                    let dot: f64 = (0..hd).map(|d| q[t][lo + d] * k[j][lo + d]).sum();
                    logits.push(dot / (hd as f64).sqrt());
                }
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
                let norm: f64 = weights.iter().sum();
                weights.iter_mut().for_each(|w| *w /= norm);
                for d in 0..hd {
                    merged[t * c + lo + d] =
                        weights.iter().enumerate().map(|(j, w)| w * v[j][lo + d]).sum();
                }
            }
        }
        let mut out = vec![0.0; t_len * c];
        for t in 0..t_len {
            for o in 0..c {
                out[t * c + o] = (0..c).map(|i| wo.data()[o * c + i] * merged[t * c + i]).sum();
            }
        }
        out
    }

    #[test]
    fn attention_matches_loop_oracle() {
        let mut r = rng::seeded(22);
        let c = 12;
        let x = Tensor::randn(vec![6, c], 1.0, &mut r);
        let wq = Tensor::randn(vec![c, c], 0.4, &mut r);
        let wk = Tensor::randn(vec![c, c], 0.4, &mut r);
        let wv = Tensor::randn(vec![c, c], 0.4, &mut r);
        let wo = Tensor::randn(vec![c, c], 0.4, &mut r);
        let fast = causal_self_attention(&x, &wq, &wk, &wv, &wo, 3, 16).unwrap();
        let slow = loop_attention(&x, &wq, &wk, &wv, &wo, 3);
        for (a, b) in fast.data().iter().zip(&slow) {
            assert!((a - b).abs() <= 1e-10, "{a} vs {b}");
        }
    }

    #[test]
    fn attention_causality_at_the_op_surface() {
        let mut r = rng::seeded(23);
        let c = 8;
        let mut x = Tensor::randn(vec![5, c], 1.0, &mut r);
        let w = Tensor::randn(vec![c, c], 0.4, &mut r);
        let base = causal_self_attention(&x, &w, &w, &w, &w, 2, 16).unwrap();
        for i in 0..c {
            x.data_mut()[3 * c + i] = 42.0; // perturb position 3
        }
        let pert = causal_self_attention(&x, &w, &w, &w, &w, 2, 16).unwrap();
        assert_eq!(&base.data()[..3 * c], &pert.data()[..3 * c]);
        assert_ne!(&base.data()[3 * c..], &pert.data()[3 * c..]);
    }

    #[test]
    fn sequence_batch_validation() {
        let visual = Tensor::zeros(vec![2, 4]);
        // mask true at a visual position
        assert!(SequenceBatch::new(
            visual.clone(),
            vec![1, 2],
            vec![true, false, true, false]
        )
        .is_err());
        // mask true at the final position (no successor)
        assert!(SequenceBatch::new(
            visual.clone(),
            vec![1, 2],
            vec![false, false, false, true]
        )
        .is_err_and(|e| matches!(e, Error::Shape(_))));
        // nothing supervised
        assert!(SequenceBatch::new(
            visual.clone(),
            vec![1, 2],
            vec![false, false, false, false]
        )
        .is_err());
        // well-formed
        let b = SequenceBatch::new(visual, vec![1, 2], vec![false, false, true, false]).unwrap();
        let (targets, mask) = b.shifted_targets();
        assert_eq!(targets[2], 2);
        assert_eq!(mask, vec![false, false, true, false]);
    }

    #[test]
    fn loss_uniform_logits_is_ln_v() {
        let visual = Tensor::zeros(vec![2, 4]);
        let b =
            SequenceBatch::new(visual, vec![1, 2, 3], vec![false, false, true, true, false])
                .unwrap();
        let logits = Tensor::zeros(vec![5, 7]);
        let loss = next_token_loss(&logits, &b).unwrap();
        assert_eq!(loss, math::ln(7.0));
    }

    #[test]
    fn loss_three_token_hand_example() {
        let visual = Tensor::zeros(vec![1, 4]);
        // sequence: [vis] a b c ; supervise positions 1 and 2 (predict b, c)
        let b = SequenceBatch::new(
            visual,
            vec![0, 1, 2],
            vec![false, true, true, false],
        )
        .unwrap();
        let mut logits = Tensor::zeros(vec![4, 3]);
        // position 1 row: [0.2, 1.0, -0.4], target 1
        logits.data_mut()[3..6].copy_from_slice(&[0.2, 1.0, -0.4]);
        // position 2 row: [0.0, 0.5, 2.0], target 2
        logits.data_mut()[6..9].copy_from_slice(&[0.0, 0.5, 2.0]);
        let lse1 = ((0.2f64).exp() + (1.0f64).exp() + (-0.4f64).exp()).ln();
        let lse2 = (1.0 + (0.5f64).exp() + (2.0f64).exp()).ln();
        let expect = ((lse1 - 1.0) + (lse2 - 2.0)) / 2.0;
        let got = next_token_loss(&logits, &b).unwrap();
        assert!((got - expect).abs() <= 1e-12);
    }
}
