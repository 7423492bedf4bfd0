//! Multi-component checkpoints: the full policy stack and critic in the
//! core network format, plus a manifest of component names and frozen
//! flags. JSON round-trips are bit-exact for finite values.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};

use klrl_core::learner::FrozenSet;
use klrl_core::mlp::{MlpSpec, ParamVector};
use klrl_core::policy::PolicyStack;

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ComponentInfo {
    pub name: String,
    pub frozen: bool,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Checkpoint {
    pub version: u32,
    pub learner_kind: String,
    pub stack: PolicyStack,
    pub value_spec: MlpSpec,
    pub value_params: ParamVector,
    pub components: Vec<ComponentInfo>,
}

impl Checkpoint {
    pub fn new(
        learner_kind: &str,
        stack: &PolicyStack,
        value_spec: &MlpSpec,
        value_params: &ParamVector,
        frozen: &FrozenSet,
    ) -> Self {
        let components = vec![
            ComponentInfo { name: "hl".into(), frozen: frozen.hl },
            ComponentInfo { name: "ll".into(), frozen: frozen.ll },
            ComponentInfo { name: "default_hl".into(), frozen: frozen.default_hl },
            ComponentInfo { name: "default_ll".into(), frozen: frozen.default_ll },
            ComponentInfo { name: "value".into(), frozen: false },
        ];
        Checkpoint {
            version: CHECKPOINT_VERSION,
            learner_kind: learner_kind.to_string(),
            stack: stack.clone(),
            value_spec: value_spec.clone(),
            value_params: value_params.clone(),
            components,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string(self).context("serializing checkpoint")?;
        std::fs::write(path, json)
            .with_context(|| format!("writing checkpoint {}", path.display()))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading checkpoint {}", path.display()))?;
        let ckpt: Checkpoint = serde_json::from_str(&text).context("parsing checkpoint")?;
        if ckpt.version != CHECKPOINT_VERSION {
            bail!("unsupported checkpoint version {}", ckpt.version);
        }
        ckpt.stack.validate().map_err(|e| anyhow::anyhow!("invalid checkpoint stack: {e}"))?;
        Ok(ckpt)
    }
}
