//! Toy multi-scale image encoder and the per-scale projector stack.
//!
//! Stage 0 pools the image by 4 and maps 3 channels to `channels[0]`;
//! every following stage pools by 2 and widens the channels, so an input of
//! side `R` yields grids of sides `R/4, R/8, ...`. Each scale is then
//! projected to the shared width `projected_dim` by a two-layer MLP.

use alloc::vec::Vec;

use crate::error::{config_err, shape_err, Result};
use crate::params::{ParamGroup, ParamId, ParamStore};
use crate::rng;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct PyramidConfig {
    /// Input image side in pixels (images are square RGB).
    pub input_resolution: usize,
    /// Channel width per scale, strictly increasing.
    pub channels: Vec<usize>,
    /// Shared width all scales are projected to.
    pub projected_dim: usize,
    /// Hidden width of the two-layer projector MLPs.
    pub projector_hidden: usize,
}

impl PyramidConfig {
    /// The full-size configuration: 1024² input, four scales, widths
    /// [384, 768, 1536, 3072], unified projection to 1024.
    pub fn reference() -> Self {
        PyramidConfig {
            input_resolution: 1024,
            channels: alloc::vec![384, 768, 1536, 3072],
            projected_dim: 1024,
            projector_hidden: 1024,
        }
    }

    pub fn num_scales(&self) -> usize {
        self.channels.len()
    }

    /// Grid side per scale: `R/4` halved at each further stage.
    pub fn scale_sides(&self) -> Vec<usize> {
        (0..self.num_scales())
            .map(|s| self.input_resolution / 4 / (1 << s))
            .collect()
    }

    pub fn total_tokens(&self) -> usize {
        self.scale_sides().iter().map(|s| s * s).sum()
    }

    pub fn validate(&self) -> Result<()> {
        let s = self.num_scales();
        if s == 0 {
            return Err(config_err!("pyramid needs at least one scale"));
        }
        let divisor = 4usize << (s - 1);
        if self.input_resolution == 0 || self.input_resolution % divisor != 0 {
            return Err(config_err!(
                "input resolution {} not divisible by {divisor} for {s} scales",
                self.input_resolution
            ));
        }
        if self.channels.windows(2).any(|w| w[1] <= w[0]) {
            return Err(config_err!(
                "scale channels must be strictly increasing, got {:?}",
                self.channels
            ));
        }
        if self.projected_dim == 0 || self.projector_hidden == 0 {
            return Err(config_err!("projected/hidden dims must be positive"));
        }
        Ok(())
    }
}

/// Per-scale token grids, raw (per-scale channel width) or projected
/// (shared width).
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub sides: Vec<usize>,
    pub grids: Vec<Tensor>,
    pub projected: bool,
}

impl MultiScaleFeatures {
    pub fn token_count(&self, scale: usize) -> usize {
        self.sides[scale] * self.sides[scale]
    }
}

/// Encoder weights: stride-4 stem stage then stride-2 stages, each a pooled
/// linear channel map with GELU.
pub struct PyramidWeights {
    pub stage_w: Vec<ParamId>,
    pub stage_b: Vec<ParamId>,
}

pub fn register_pyramid(
    store: &mut ParamStore,
    config: &PyramidConfig,
    seed: u64,
) -> Result<PyramidWeights> {
    config.validate()?;
    let mut stage_w = Vec::new();
    let mut stage_b = Vec::new();
    let mut in_ch = 3usize;
    for (s, &out_ch) in config.channels.iter().enumerate() {
        let wname = alloc::format!("pyramid.stage{s}.w");
        let std = 1.0 / crate::math::sqrt(in_ch as f64);
        let w = Tensor::randn(
            alloc::vec![out_ch, in_ch],
            std,
            &mut rng::seeded_for(seed, &wname),
        );
        stage_w.push(store.register(&wname, ParamGroup::Pyramid, w)?);
        let bname = alloc::format!("pyramid.stage{s}.b");
        stage_b.push(store.register(
            &bname,
            ParamGroup::Pyramid,
            Tensor::zeros(alloc::vec![1, out_ch]),
        )?);
        in_ch = out_ch;
    }
    Ok(PyramidWeights { stage_w, stage_b })
}

/// Two-layer MLPs mapping each raw scale to the shared projected width.
pub struct ProjectorWeights {
    pub fc1_w: Vec<ParamId>,
    pub fc1_b: Vec<ParamId>,
    pub fc2_w: Vec<ParamId>,
    pub fc2_b: Vec<ParamId>,
}

pub fn register_projectors(
    store: &mut ParamStore,
    config: &PyramidConfig,
    seed: u64,
) -> Result<ProjectorWeights> {
    let (h, d) = (config.projector_hidden, config.projected_dim);
    let mut out = ProjectorWeights {
        fc1_w: Vec::new(),
        fc1_b: Vec::new(),
        fc2_w: Vec::new(),
        fc2_b: Vec::new(),
    };
    for (s, &c) in config.channels.iter().enumerate() {
        let n1 = alloc::format!("proj.scale{s}.fc1.w");
        let t1 = Tensor::randn(
            alloc::vec![h, c],
            1.0 / crate::math::sqrt(c as f64),
            &mut rng::seeded_for(seed, &n1),
        );
        out.fc1_w.push(store.register(&n1, ParamGroup::Fusion, t1)?);
        out.fc1_b.push(store.register(
            &alloc::format!("proj.scale{s}.fc1.b"),
            ParamGroup::Fusion,
            Tensor::zeros(alloc::vec![1, h]),
        )?);
        let n2 = alloc::format!("proj.scale{s}.fc2.w");
        let t2 = Tensor::randn(
            alloc::vec![d, h],
            1.0 / crate::math::sqrt(h as f64),
            &mut rng::seeded_for(seed, &n2),
        );
        out.fc2_w.push(store.register(&n2, ParamGroup::Fusion, t2)?);
        out.fc2_b.push(store.register(
            &alloc::format!("proj.scale{s}.fc2.b"),
            ParamGroup::Fusion,
            Tensor::zeros(alloc::vec![1, d]),
        )?);
    }
    Ok(out)
}

/// Record the encoder forward on the tape. `image` is an `[R², 3]` node.
pub fn extract_pyramid_graph(
    tape: &mut Tape,
    image: NodeId,
    config: &PyramidConfig,
    weights: &PyramidWeights,
) -> Vec<NodeId> {
    let sides = config.scale_sides();
    let mut feats = Vec::with_capacity(config.num_scales());
    let mut prev = image;
    let mut prev_side = config.input_resolution;
    for s in 0..config.num_scales() {
        let factor = if s == 0 { 4 } else { 2 };
        let pooled = tape.avg_pool(prev, prev_side, factor);
        let w = tape.param(weights.stage_w[s]);
        let b = tape.param(weights.stage_b[s]);
        let mapped = tape.matmul_nt(pooled, w);
        let biased = tape.add_bias(mapped, b);
        let act = tape.gelu(biased);
        feats.push(act);
        prev = act;
        prev_side = sides[s];
    }
    feats
}

/// Record the projector MLPs on the tape.
pub fn project_scales_graph(
    tape: &mut Tape,
    feats: &[NodeId],
    weights: &ProjectorWeights,
) -> Vec<NodeId> {
    feats
        .iter()
        .enumerate()
        .map(|(s, &f)| {
            let w1 = tape.param(weights.fc1_w[s]);
            let b1 = tape.param(weights.fc1_b[s]);
            let w2 = tape.param(weights.fc2_w[s]);
            let b2 = tape.param(weights.fc2_b[s]);
            let h = tape.matmul_nt(f, w1);
            let h = tape.add_bias(h, b1);
            let h = tape.gelu(h);
            let o = tape.matmul_nt(h, w2);
            tape.add_bias(o, b2)
        })
        .collect()
}

/// Eager encoder forward over an `[R, R, 3]` image tensor.
pub fn extract_pyramid(
    image: &Tensor,
    config: &PyramidConfig,
    store: &ParamStore,
    weights: &PyramidWeights,
) -> Result<MultiScaleFeatures> {
    config.validate()?;
    let r = config.input_resolution;
    if image.dims() != [r, r, 3] {
        return Err(shape_err!(
            "image dims {:?}, expected [{r}, {r}, 3]",
            image.dims()
        ));
    }
    let mut tape = Tape::new(store);
    let img = tape.input(image);
    let feats = extract_pyramid_graph(&mut tape, img, config, weights);
    let sides = config.scale_sides();
    let grids = feats
        .iter()
        .zip(config.channels.iter())
        .zip(sides.iter())
        .map(|((&f, &c), &side)| Tensor::new(alloc::vec![side * side, c], tape.value(f).to_vec()))
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiScaleFeatures {
        sides,
        grids,
        projected: false,
    })
}

/// Eager projector forward.
pub fn project_scales(
    features: &MultiScaleFeatures,
    config: &PyramidConfig,
    store: &ParamStore,
    weights: &ProjectorWeights,
) -> Result<MultiScaleFeatures> {
    if features.projected {
        return Err(shape_err!("features are already projected"));
    }
    for (s, grid) in features.grids.iter().enumerate() {
        if grid.cols() != config.channels[s] {
            return Err(shape_err!(
                "scale {s} width {} does not match projector input {}",
                grid.cols(),
                config.channels[s]
            ));
        }
    }
    let mut tape = Tape::new(store);
    let feat_nodes: Vec<NodeId> = features.grids.iter().map(|g| tape.input(g)).collect();
    let projected = project_scales_graph(&mut tape, &feat_nodes, weights);
    let grids = projected
        .iter()
        .zip(features.sides.iter())
        .map(|(&p, &side)| {
            Tensor::new(
                alloc::vec![side * side, config.projected_dim],
                tape.value(p).to_vec(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(MultiScaleFeatures {
        sides: features.sides.clone(),
        grids,
        projected: true,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn toy_config() -> PyramidConfig {
        PyramidConfig {
            input_resolution: 64,
            channels: vec![8, 16, 32, 64],
            projected_dim: 32,
            projector_hidden: 32,
        }
    }

    #[test]
    fn reference_config_matches_published_shape() {
        let c = PyramidConfig::reference();
        c.validate().unwrap();
        assert_eq!(c.scale_sides(), vec![256, 128, 64, 32]);
        assert_eq!(c.channels, vec![384, 768, 1536, 3072]);
        assert_eq!(c.projected_dim, 1024);
        assert_eq!(c.total_tokens(), 87040);
    }

    #[test]
    fn toy_config_halving_rule() {
        assert_eq!(toy_config().scale_sides(), vec![16, 8, 4, 2]);
    }

    #[test]
    fn indivisible_resolution_is_config_error() {
        let mut c = toy_config();
        c.input_resolution = 100;
        assert!(c.validate().is_err());
    }

    #[test]
    fn non_increasing_channels_rejected() {
        let mut c = toy_config();
        c.channels = vec![8, 8, 32, 64];
        assert!(c.validate().is_err());
    }

    #[test]
    fn extract_produces_configured_grids() {
        let c = toy_config();
        let mut store = ParamStore::new();
        let w = register_pyramid(&mut store, &c, 1).unwrap();
        let mut r = crate::rng::seeded(2);
        let img = Tensor::randn(vec![64, 64, 3], 0.3, &mut r);
        let f = extract_pyramid(&img, &c, &store, &w).unwrap();
        assert_eq!(f.sides, vec![16, 8, 4, 2]);
        for (s, g) in f.grids.iter().enumerate() {
            assert_eq!(g.dims(), &[f.sides[s] * f.sides[s], c.channels[s]]);
        }
        assert!(!f.projected);
    }

    #[test]
    fn wrong_image_shape_is_shape_error() {
        let c = toy_config();
        let mut store = ParamStore::new();
        let w = register_pyramid(&mut store, &c, 1).unwrap();
        let img = Tensor::zeros(vec![32, 32, 3]);
        assert!(extract_pyramid(&img, &c, &store, &w).is_err());
    }

    #[test]
    fn zero_projectors_give_zero_features() {
        let c = toy_config();
        let mut store = ParamStore::new();
        let pw = register_pyramid(&mut store, &c, 1).unwrap();
        let prw = register_projectors(&mut store, &c, 2).unwrap();
        for id in store.ids().collect::<Vec<_>>() {
            if store.name(id).starts_with("proj.") {
                store
                    .get_mut(id)
                    .data_mut()
                    .iter_mut()
                    .for_each(|v| *v = 0.0);
            }
        }
        let mut r = crate::rng::seeded(3);
        let img = Tensor::randn(vec![64, 64, 3], 0.3, &mut r);
        let raw = extract_pyramid(&img, &c, &store, &pw).unwrap();
        let proj = project_scales(&raw, &c, &store, &prw).unwrap();
        assert!(proj.projected);
        for g in &proj.grids {
            assert_eq!(g.cols(), 32);
            assert!(g.data().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn projection_preserves_row_major_token_order() {
        // The projector is a per-row map: changing raw token (r,c) may only
        // change the projected token at the same index.
        let c = PyramidConfig {
            input_resolution: 16,
            channels: vec![4, 6],
            projected_dim: 5,
            projector_hidden: 5,
        };
        let mut store = ParamStore::new();
        let _pw = register_pyramid(&mut store, &c, 4).unwrap();
        let prw = register_projectors(&mut store, &c, 5).unwrap();
        let mut r = crate::rng::seeded(6);
        let side = 4usize;
        let mut raw = MultiScaleFeatures {
            sides: vec![side, 2],
            grids: vec![
                Tensor::randn(vec![side * side, 4], 1.0, &mut r),
                Tensor::randn(vec![4, 6], 1.0, &mut r),
            ],
            projected: false,
        };
        let base = project_scales(&raw, &c, &store, &prw).unwrap();
        let token = 2 * side + 3; // grid position (2,3)
        raw.grids[0].data_mut()[token * 4] += 1.0;
        let bumped = project_scales(&raw, &c, &store, &prw).unwrap();
        for i in 0..side * side {
            let a = &base.grids[0].data()[i * 5..(i + 1) * 5];
            let b = &bumped.grids[0].data()[i * 5..(i + 1) * 5];
            if i == token {
                assert_ne!(a, b);
            } else {
                assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn double_projection_rejected() {
        let c = toy_config();
        let mut store = ParamStore::new();
        let pw = register_pyramid(&mut store, &c, 1).unwrap();
        let prw = register_projectors(&mut store, &c, 2).unwrap();
        let mut r = crate::rng::seeded(7);
        let img = Tensor::randn(vec![64, 64, 3], 0.3, &mut r);
        let raw = extract_pyramid(&img, &c, &store, &pw).unwrap();
        let proj = project_scales(&raw, &c, &store, &prw).unwrap();
        assert!(project_scales(&proj, &c, &store, &prw).is_err());
    }
}
