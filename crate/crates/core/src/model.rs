//! The assembled pipeline: pyramid → projectors → fusion → decoder.

use alloc::string::String;
use alloc::vec::Vec;

use crate::data::{SceneSample, Vocab};
use crate::decoder::{
    decoder_forward_graph, register_decoder, DecoderConfig, DecoderWeights, FeatureCache,
    SequenceBatch,
};
use crate::error::{config_err, numeric_err, Result};
use crate::fusion::{
    add_positional_graph, build_region_map, concat_fusion_graph, region_attend_graph,
    register_concat, register_fusion, ConcatWeights, FusionWeights, RegionMap,
};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::pyramid::{
    extract_pyramid_graph, project_scales_graph, register_projectors, register_pyramid,
    MultiScaleFeatures, PyramidConfig, ProjectorWeights, PyramidWeights,
};
use crate::rng::{self, StdRng};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

/// Which multi-scale fusion front-end feeds the decoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FusionKind {
    /// Region-restricted cross-attention from the learnable query grid.
    Region,
    /// Resample-concat-mix baseline.
    Concat,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub pyramid: PyramidConfig,
    /// Side of the query grid; its L² rows become the visual tokens.
    pub query_side: usize,
    pub decoder: DecoderConfig,
    pub fusion_kind: FusionKind,
    /// Master seed for parameter initialization.
    pub init_seed: u64,
}

impl ModelConfig {
    /// Desk-scale defaults: 64² images, 4 scales, 16 visual tokens.
    pub fn toy(vocab_size: usize) -> Self {
        ModelConfig {
            pyramid: PyramidConfig {
                input_resolution: 64,
                channels: alloc::vec![8, 16, 32, 64],
                projected_dim: 32,
                projector_hidden: 32,
            },
            query_side: 4,
            decoder: DecoderConfig {
                n_layers: 4,
                d_model: 64,
                n_heads: 2,
                vocab_size,
                max_seq_len: 64,
                realign_layers: DecoderConfig::default_realign_layers(4),
                fusion_dim: 32,
                lora: Some(crate::decoder::LoraConfig {
                    rank: 8,
                    alpha: 16.0,
                    dropout: 0.0,
                }),
            },
            fusion_kind: FusionKind::Region,
            init_seed: 42,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.pyramid.validate()?;
        self.decoder.validate()?;
        if self.decoder.fusion_dim != self.pyramid.projected_dim {
            return Err(config_err!(
                "decoder fusion dim {} must equal projected dim {}",
                self.decoder.fusion_dim,
                self.pyramid.projected_dim
            ));
        }
        for &side in &self.pyramid.scale_sides() {
            if self.query_side == 0 || side % self.query_side != 0 {
                return Err(config_err!(
                    "scale side {side} is not a multiple of query side {}",
                    self.query_side
                ));
            }
        }
        let n_v = self.query_side * self.query_side;
        if n_v + 2 > self.decoder.max_seq_len {
            return Err(config_err!(
                "max_seq_len {} leaves no room for text after {n_v} visual tokens",
                self.decoder.max_seq_len
            ));
        }
        Ok(())
    }
}

enum FusionHead {
    Region(FusionWeights),
    Concat(ConcatWeights),
}

/// A fully registered model over one parameter store.
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub region_map: RegionMap,
    pyramid: PyramidWeights,
    projectors: ProjectorWeights,
    head: FusionHead,
    /// Fusion width → decoder width map applied to the fused visual tokens.
    to_decoder: ParamId,
    pub decoder: DecoderWeights,
}

/// An image encoded up to the visual block, reusable across decode steps.
pub struct EncodedImage {
    pub features: MultiScaleFeatures,
    pub visual: Tensor,
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut store = ParamStore::new();
        let seed = config.init_seed;
        let region_map = build_region_map(config.query_side, &config.pyramid.scale_sides())?;
        let pyramid = register_pyramid(&mut store, &config.pyramid, seed)?;
        let projectors = register_projectors(&mut store, &config.pyramid, seed)?;
        let d = config.pyramid.projected_dim;
        let s = config.pyramid.num_scales();
        let head = match config.fusion_kind {
            FusionKind::Region => FusionHead::Region(register_fusion(
                &mut store,
                config.query_side,
                d,
                s,
                seed,
            )?),
            FusionKind::Concat => FusionHead::Concat(register_concat(&mut store, d, s, seed)?),
        };
        let name = "fusion.to_decoder";
        let to_decoder = store.register(
            name,
            ParamGroup::Fusion,
            Tensor::randn(
                alloc::vec![config.decoder.d_model, d],
                1.0 / crate::math::sqrt(d as f64),
                &mut rng::seeded_for(seed, name),
            ),
        )?;
        let decoder = register_decoder(&mut store, &config.decoder, s, seed)?;
        Ok(Model {
            config,
            store,
            region_map,
            pyramid,
            projectors,
            head,
            to_decoder,
            decoder,
        })
    }

    pub fn n_visual(&self) -> usize {
        self.config.query_side * self.config.query_side
    }

    /// Projected, positionally-encoded feature nodes for one image.
    pub fn features_graph(&self, tape: &mut Tape, image: &Tensor) -> Vec<NodeId> {
        let img = tape.input(image);
        let raw = extract_pyramid_graph(tape, img, &self.config.pyramid, &self.pyramid);
        let projected = project_scales_graph(tape, &raw, &self.projectors);
        let sides = self.config.pyramid.scale_sides();
        projected
            .into_iter()
            .zip(sides)
            .map(|(p, side)| add_positional_graph(tape, p, side))
            .collect()
    }

    /// Fused visual block `[L², d_model]` from encoded feature nodes.
    pub fn visual_block_graph(&self, tape: &mut Tape, feats: &[NodeId]) -> NodeId {
        let fused = match &self.head {
            FusionHead::Region(fw) => {
                let query = tape.param(fw.query);
                let query = add_positional_graph(tape, query, self.config.query_side);
                region_attend_graph(tape, query, &fw.attend, feats, &self.region_map)
            }
            FusionHead::Concat(cw) => concat_fusion_graph(
                tape,
                feats,
                &self.config.pyramid.scale_sides(),
                self.config.query_side,
                cw,
            ),
        };
        let adapter = tape.param(self.to_decoder);
        tape.matmul_nt(fused, adapter)
    }

    /// Full forward to the scalar loss for one sample.
    /// Returns the loss node and the number of supervised positions.
    pub fn loss_graph(
        &self,
        tape: &mut Tape,
        image: &Tensor,
        text_ids: &[usize],
        loss_mask: &[bool],
        dropout: Option<&mut StdRng>,
    ) -> Result<(NodeId, usize)> {
        let feats = self.features_graph(tape, image);
        let visual = self.visual_block_graph(tape, &feats);
        let cache = FeatureCache {
            feats: &feats,
            map: &self.region_map,
        };
        let logits = decoder_forward_graph(
            tape,
            visual,
            text_ids,
            &self.config.decoder,
            &self.decoder,
            Some(&cache),
            dropout,
        )?;
        let n_v = self.n_visual();
        let total = n_v + text_ids.len();
        if loss_mask.len() != total {
            return Err(numeric_err!(
                "loss mask length {} vs sequence {total}",
                loss_mask.len()
            ));
        }
        let mut targets = alloc::vec![0usize; total];
        let mut count = 0usize;
        for (t, &m) in loss_mask.iter().enumerate() {
            if m {
                targets[t] = text_ids[t + 1 - n_v];
                count += 1;
            }
        }
        if count == 0 {
            return Err(numeric_err!("no supervised positions"));
        }
        let loss = tape.cross_entropy(logits, targets, loss_mask.to_vec());
        Ok((loss, count))
    }

    /// Eagerly encode an image: features plus the fused visual block.
    pub fn encode_image(&self, image: &Tensor) -> Result<EncodedImage> {
        let mut tape = Tape::new(&self.store);
        let feats = self.features_graph(&mut tape, image);
        let visual = self.visual_block_graph(&mut tape, &feats);
        let sides = self.config.pyramid.scale_sides();
        let d = self.config.pyramid.projected_dim;
        let grids = feats
            .iter()
            .zip(&sides)
            .map(|(&f, &side)| Tensor::new(alloc::vec![side * side, d], tape.value(f).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        let visual = Tensor::new(
            alloc::vec![self.n_visual(), self.config.decoder.d_model],
            tape.value(visual).to_vec(),
        )?;
        Ok(EncodedImage {
            features: MultiScaleFeatures {
                sides,
                grids,
                projected: true,
            },
            visual,
        })
    }

    /// Logits for a text prefix against an already-encoded image.
    pub fn prefix_logits(&self, enc: &EncodedImage, text_ids: &[usize]) -> Result<Tensor> {
        let mut tape = Tape::new(&self.store);
        let visual = tape.input(&enc.visual);
        let nodes: Vec<NodeId> = enc.features.grids.iter().map(|g| tape.input(g)).collect();
        let cache = FeatureCache {
            feats: &nodes,
            map: &self.region_map,
        };
        let logits = decoder_forward_graph(
            &mut tape,
            visual,
            text_ids,
            &self.config.decoder,
            &self.decoder,
            Some(&cache),
            None,
        )?;
        let total = self.n_visual() + text_ids.len();
        Tensor::new(
            alloc::vec![total, self.config.decoder.vocab_size],
            tape.value(logits).to_vec(),
        )
    }

    /// Greedy decode from the visual block until `<eos>` or the capacity
    /// limit. Ties break toward the lower token id.
    pub fn caption_ids(&self, enc: &EncodedImage) -> Result<Vec<usize>> {
        let mut ids = alloc::vec![Vocab::BOS];
        let budget = self.config.decoder.max_seq_len - self.n_visual() - 1;
        for _ in 0..budget {
            let logits = self.prefix_logits(enc, &ids)?;
            let v = self.config.decoder.vocab_size;
            let last = &logits.data()[(logits.rows() - 1) * v..];
            let mut best = 0usize;
            for (i, &x) in last.iter().enumerate() {
                if x > last[best] {
                    best = i;
                }
            }
            if best == Vocab::EOS {
                break;
            }
            ids.push(best);
        }
        Ok(ids[1..].to_vec())
    }

    /// Greedy caption as a string.
    pub fn caption(&self, image: &Tensor) -> Result<String> {
        let enc = self.encode_image(image)?;
        let ids = self.caption_ids(&enc)?;
        Ok(Vocab::decode(&ids))
    }

    /// Eager loss for one sample (used by evaluation).
    pub fn sample_loss(&self, sample: &SceneSample, stage: u8) -> Result<(f64, usize)> {
        let image = crate::data::image_tensor(&sample.pixels, self.config.pyramid.input_resolution)?;
        let (ids, mask) = self.stage_sequence(sample, stage)?;
        let mut tape = Tape::new(&self.store);
        let (loss, count) = self.loss_graph(&mut tape, &image, &ids, &mask, None)?;
        Ok((tape.scalar(loss), count))
    }

    /// Token ids and loss mask for a sample under the given stage's format.
    pub fn stage_sequence(&self, sample: &SceneSample, stage: u8) -> Result<(Vec<usize>, Vec<bool>)> {
        match stage {
            1 => crate::data::caption_sequence(sample, self.n_visual()),
            2 => crate::data::instruction_sequence(sample, self.n_visual()),
            other => Err(config_err!("stage must be 1 or 2, got {other}")),
        }
    }

    /// Convenience builder for decoder-surface tests.
    pub fn sequence_batch(&self, sample: &SceneSample, stage: u8) -> Result<SequenceBatch> {
        let image = crate::data::image_tensor(&sample.pixels, self.config.pyramid.input_resolution)?;
        let enc = self.encode_image(&image)?;
        let (ids, mask) = self.stage_sequence(sample, stage)?;
        SequenceBatch::new(enc.visual, ids, mask)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_dataset;

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            pyramid: PyramidConfig {
                input_resolution: 16,
                channels: alloc::vec![4, 6],
                projected_dim: 8,
                projector_hidden: 8,
            },
            query_side: 2,
            decoder: DecoderConfig {
                n_layers: 2,
                d_model: 16,
                n_heads: 2,
                vocab_size: Vocab::size(),
                max_seq_len: 40,
                realign_layers: alloc::vec![0],
                fusion_dim: 8,
                lora: Some(crate::decoder::LoraConfig {
                    rank: 2,
                    alpha: 16.0,
                    dropout: 0.0,
                }),
            },
            fusion_kind: FusionKind::Region,
            init_seed: 7,
        }
    }

    #[test]
    fn builds_and_runs_both_stages() {
        let model = Model::new(tiny_config()).unwrap();
        let data = make_dataset(2, 11, 16).unwrap();
        for stage in [1u8, 2] {
            let (loss, count) = model.sample_loss(&data[0], stage).unwrap();
            assert!(loss.is_finite() && loss > 0.0);
            assert!(count > 0);
        }
    }

    #[test]
    fn caption_tokens_are_in_vocabulary() {
        let model = Model::new(tiny_config()).unwrap();
        let data = make_dataset(1, 12, 16).unwrap();
        let image = crate::data::image_tensor(&data[0].pixels, 16).unwrap();
        let enc = model.encode_image(&image).unwrap();
        let ids = model.caption_ids(&enc).unwrap();
        assert!(ids.iter().all(|&i| i < Vocab::size()));
        // greedy decoding is deterministic
        assert_eq!(ids, model.caption_ids(&enc).unwrap());
    }

    #[test]
    fn incompatible_query_side_rejected() {
        let mut c = tiny_config();
        c.query_side = 3;
        assert!(Model::new(c).is_err());
    }

    #[test]
    fn fusion_dim_must_match_projection() {
        let mut c = tiny_config();
        c.decoder.fusion_dim = 9;
        assert!(Model::new(c).is_err());
    }
}
