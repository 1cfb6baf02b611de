//! Tuned-prompt artifacts in the shared container format, bound to the
//! exact backbone they were trained against by its tensor checksum.

use crate::autodiff::Tensor;
use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::prompt::{assign_partition, Bridge, PartitionMap, PromptSet};
use crate::tune::TuneConfig;

const CONFIG_KEY: &str = "meta.tune";

/// Everything a prediction needs besides the backbone itself.
#[derive(Debug, Clone, PartialEq)]
pub struct TunedArtifact {
    pub prompts: PromptSet,
    pub partition: PartitionMap,
    pub config: TuneConfig,
    /// Tensor checksum of the owning backbone's checkpoint.
    pub backbone_checksum: u64,
}

impl TunedArtifact {
    /// Whether the manual template participates in the ensemble.
    pub fn manual_in_ensemble(&self) -> bool {
        self.prompts.manual.is_some()
    }

    /// Refuses to pair the artifact with a different backbone.
    pub fn ensure_backbone(&self, backbone_checksum: u64) -> Result<()> {
        if self.backbone_checksum != backbone_checksum {
            return Err(Error::BackboneMismatch {
                expected: self.backbone_checksum,
                found: backbone_checksum,
            });
        }
        Ok(())
    }
}

pub fn artifact_to_checkpoint(artifact: &TunedArtifact) -> Result<Checkpoint> {
    let mut ckpt = Checkpoint::new(artifact.backbone_checksum);
    for (i, ctx) in artifact.prompts.ctx.iter().enumerate() {
        ckpt.insert_f64(&format!("prompt.ctx.{i:02}"), ctx.shape().to_vec(), ctx.data())?;
    }
    for (i, bridge) in artifact.partition.bridges.iter().enumerate() {
        ckpt.insert_f64(&format!("bridge.w.{i:02}"), bridge.w.shape().to_vec(), bridge.w.data())?;
        ckpt.insert_f64(&format!("bridge.b.{i:02}"), bridge.b.shape().to_vec(), bridge.b.data())?;
    }
    let json = serde_json::to_string(&artifact.config)
        .map_err(|e| Error::Config(format!("tuning config does not serialize: {e}")))?;
    let bytes: Vec<f32> = json.bytes().map(f32::from).collect();
    ckpt.insert(CONFIG_KEY, vec![bytes.len()], bytes)?;
    Ok(ckpt)
}

pub fn artifact_from_checkpoint(ckpt: &Checkpoint) -> Result<TunedArtifact> {
    let (_, raw) = ckpt.get_f64(CONFIG_KEY)?;
    let json: String = raw
        .iter()
        .map(|&b| {
            if (0.0..256.0).contains(&b) && b.fract() == 0.0 {
                Ok(b as u8 as char)
            } else {
                Err(Error::Config("tuning config bytes are corrupt".into()))
            }
        })
        .collect::<Result<_>>()?;
    let config: TuneConfig = serde_json::from_str(&json)
        .map_err(|e| Error::Config(format!("tuning config does not parse: {e}")))?;
    let norm = config.clone().normalized();

    let fetch = |name: &str| -> Result<Tensor> {
        let (shape, data) = ckpt.get_f64(name)?;
        Tensor::new(shape, data)
    };

    let mut ctx = Vec::with_capacity(norm.n_prompts);
    for i in 0..norm.n_prompts {
        ctx.push(fetch(&format!("prompt.ctx.{i:02}"))?);
    }
    let prompts = PromptSet {
        ctx,
        manual: norm.manual.clone(),
    };

    let partition = if norm.depth == 0 {
        PartitionMap::empty()
    } else {
        let mut bridges = Vec::with_capacity(norm.depth);
        for i in 0..norm.depth {
            bridges.push(Bridge {
                w: fetch(&format!("bridge.w.{i:02}"))?,
                b: fetch(&format!("bridge.b.{i:02}"))?,
            });
        }
        PartitionMap {
            depth: norm.depth,
            assignment: assign_partition(norm.depth, norm.n_prompts)?,
            bridges,
            bias_enabled: norm.bridge_bias,
        }
    };

    Ok(TunedArtifact {
        prompts,
        partition,
        config,
        backbone_checksum: ckpt.backbone_checksum,
    })
}
