//! The full animation model: backbone + motion transformer + dense motion
//! network + generator, with configuration, checkpointing, and the shared
//! forward passes used by training and evaluation.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dense_motion::{BackgroundNet, DenseMotion, DenseMotionNet};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::generator::{Generator, GeneratorConfig};
use crate::losses::{PerceptualNet, DEFAULT_LAMBDA};
use crate::numerics::checkpoint::{Checkpoint, Dtype};
use crate::numerics::Tensor;
use crate::params::{Graph, ParamStore};
use crate::transformer::{AttentionMode, BlockForm, MotionTransformer, TransformerOut};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub image_size: usize,
    /// Number of motion tokens / parts K.
    pub num_parts: usize,
    /// Token dimension d.
    pub token_dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn_dim: usize,
    pub patch: usize,
    pub backbone_channels: usize,
    pub backbone_blocks: usize,
    pub pe_enabled: bool,
    pub attention_mode: AttentionMode,
    pub block_form: BlockForm,
    pub background_enabled: bool,
    pub mask_base_channels: usize,
    pub generator: GeneratorConfig,
    pub lambda: f64,
    /// Seed of the frozen perceptual feature net.
    pub phi_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_size: 64,
            num_parts: 10,
            token_dim: 192,
            layers: 12,
            heads: 3,
            ffn_dim: 768,
            patch: 4,
            backbone_channels: 64,
            backbone_blocks: 2,
            pe_enabled: true,
            attention_mode: AttentionMode::Unified,
            block_form: BlockForm::Standard,
            background_enabled: false,
            mask_base_channels: 32,
            generator: GeneratorConfig::default(),
            lambda: DEFAULT_LAMBDA,
            phi_seed: 7777,
        }
    }
}

impl ModelConfig {
    /// Reduced profile sized so a full training run finishes on a few CPU
    /// cores in minutes; the command-line trainer's default.
    pub fn desk() -> Self {
        ModelConfig {
            image_size: 64,
            num_parts: 6,
            token_dim: 48,
            layers: 4,
            heads: 3,
            ffn_dim: 96,
            patch: 4,
            backbone_channels: 24,
            backbone_blocks: 1,
            pe_enabled: true,
            attention_mode: AttentionMode::Unified,
            block_form: BlockForm::Standard,
            background_enabled: false,
            mask_base_channels: 12,
            generator: GeneratorConfig { base_channels: 12, stages: 2, res_blocks: 1 },
            lambda: DEFAULT_LAMBDA,
            phi_seed: 7777,
        }
    }
}

/// Everything produced by one source→driving reconstruction pass.
pub struct PairForward {
    pub generated: Tensor,
    pub dense: DenseMotion,
    /// [K,6] motion parameters of the source frame.
    pub src_params: Tensor,
    /// [K,6] motion parameters of the driving frame.
    pub drv_params: Tensor,
}

pub struct AnimationModel {
    pub store: ParamStore,
    pub cfg: ModelConfig,
    pub seed: u64,
    encoder: Encoder,
    transformer: MotionTransformer,
    dense: DenseMotionNet,
    background: Option<BackgroundNet>,
    generator: Generator,
    pub phi: PerceptualNet,
}

impl AnimationModel {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<AnimationModel> {
        if cfg.token_dim % cfg.heads != 0 {
            return Err(Error::Config(format!(
                "token dim {} not divisible by {} heads",
                cfg.token_dim, cfg.heads
            )));
        }
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let encoder = Encoder::new(
            &mut store,
            &mut rng,
            cfg.backbone_channels,
            cfg.backbone_blocks,
            cfg.patch,
            cfg.token_dim,
        );
        let transformer = MotionTransformer::new(
            &mut store,
            &mut rng,
            cfg.num_parts,
            cfg.token_dim,
            cfg.layers,
            cfg.heads,
            cfg.ffn_dim,
            cfg.attention_mode,
            cfg.block_form,
        );
        let dense = DenseMotionNet::new(&mut store, &mut rng, cfg.num_parts, cfg.mask_base_channels);
        let background = cfg
            .background_enabled
            .then(|| BackgroundNet::new(&mut store, &mut rng, cfg.mask_base_channels / 2));
        let generator = Generator::new(&mut store, &mut rng, cfg.generator);
        let phi = PerceptualNet::new(cfg.phi_seed);
        Ok(AnimationModel { store, cfg, seed, encoder, transformer, dense, background, generator, phi })
    }

    /// Motion parameters [K,6] (and optional per-layer attention maps) for
    /// one image; identity motions on a freshly initialized model.
    pub fn estimate_motion(
        &self,
        g: &Graph,
        image: &Tensor,
        want_attention: bool,
    ) -> Result<TransformerOut> {
        let tokens = self.encoder.tokens(g, image, self.cfg.pe_enabled)?;
        self.transformer.forward(g, &tokens.tokens, want_attention)
    }

    /// Patch-lattice shape of the image-token grid, for attention dumps.
    pub fn token_grid(&self, image: &Tensor) -> Result<(usize, usize)> {
        let t = {
            let g = Graph::new(&self.store);
            self.encoder.tokens(&g, image, self.cfg.pe_enabled)?
        };
        Ok((t.rows, t.cols))
    }

    /// Background affine [6] when background handling is on.
    pub fn background_params(&self, g: &Graph, source: &Tensor, driving: &Tensor) -> Result<Option<Tensor>> {
        match &self.background {
            Some(net) => Ok(Some(net.predict(g, source, driving)?)),
            None => Ok(None),
        }
    }

    /// Dense motion from already-estimated per-frame parameters.
    pub fn dense_motion(
        &self,
        g: &Graph,
        source: &Tensor,
        src_params: &Tensor,
        drv_params: &Tensor,
        bg_params: Option<&Tensor>,
    ) -> Result<DenseMotion> {
        self.dense.build(g, source, src_params, drv_params, bg_params)
    }

    pub fn generate(&self, g: &Graph, source: &Tensor, dm: Option<&DenseMotion>) -> Result<Tensor> {
        self.generator.generate(g, source, dm)
    }

    /// Full reconstruction pass: motion of both frames, dense flow, warp,
    /// decode.
    pub fn reconstruct_pair(&self, g: &Graph, source: &Tensor, driving: &Tensor) -> Result<PairForward> {
        let src_params = self.estimate_motion(g, source, false)?.params;
        let drv_params = self.estimate_motion(g, driving, false)?.params;
        let bg = self.background_params(g, source, driving)?;
        let dense = self.dense_motion(g, source, &src_params, &drv_params, bg.as_ref())?;
        let generated = self.generate(g, source, Some(&dense))?;
        Ok(PairForward { generated, dense, src_params, drv_params })
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Writes all weights plus config and seeds. `extra_meta` must be a JSON
    /// object; its fields are merged into the checkpoint header.
    pub fn save(&self, path: &Path, extra_meta: serde_json::Value) -> Result<()> {
        let mut meta = serde_json::json!({
            "format_version": 1,
            "config": self.cfg,
            "seed": self.seed,
        });
        if let (Some(base), Some(extra)) = (meta.as_object_mut(), extra_meta.as_object()) {
            for (k, v) in extra {
                base.insert(k.clone(), v.clone());
            }
        }
        let mut ckpt = Checkpoint::new(meta);
        for e in self.store.entries() {
            ckpt.push(e.name.clone(), &e.shape, e.data.clone(), Dtype::F64);
        }
        ckpt.save(path)
    }

    pub fn load(path: &Path) -> Result<AnimationModel> {
        let (model, _) = AnimationModel::load_with_meta(path)?;
        Ok(model)
    }

    /// Loads a checkpoint, returning the raw header too (training state and
    /// similar extra fields live there).
    pub fn load_with_meta(path: &Path) -> Result<(AnimationModel, serde_json::Value)> {
        let ckpt = Checkpoint::load(path)?;
        let cfg: ModelConfig = serde_json::from_value(
            ckpt.meta
                .get("config")
                .cloned()
                .ok_or_else(|| Error::Checkpoint("missing config in header".into()))?,
        )
        .map_err(|e| Error::Checkpoint(format!("bad config in header: {e}")))?;
        let seed = ckpt.meta.get("seed").and_then(|v| v.as_u64()).unwrap_or(0);
        let mut model = AnimationModel::new(cfg, seed)?;

        let mut problems = Vec::new();
        for i in 0..model.store.len() {
            let entry = model.store.entry_mut(i);
            match ckpt.find(&entry.name) {
                Some(saved) if saved.shape == entry.shape => {
                    entry.data.copy_from_slice(&saved.data);
                }
                Some(saved) => problems.push(format!(
                    "{}: shape {:?} in file, {:?} in model",
                    entry.name, saved.shape, entry.shape
                )),
                None => problems.push(format!("{}: missing from file", entry.name)),
            }
        }
        let known: std::collections::HashSet<&str> =
            model.store.entries().iter().map(|e| e.name.as_str()).collect();
        for e in &ckpt.entries {
            if !known.contains(e.name.as_str()) {
                problems.push(format!("{}: not part of this config", e.name));
            }
        }
        if !problems.is_empty() {
            return Err(Error::Checkpoint(format!(
                "checkpoint/config mismatch: {}",
                problems.join("; ")
            )));
        }
        Ok((model, ckpt.meta))
    }
}
