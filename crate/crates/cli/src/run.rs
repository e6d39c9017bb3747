//! Rebuilding a run's frozen base from checkpoint metadata.

use std::collections::BTreeMap;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use symlora::adapters::{init_lora, init_symlora, AdaptedLinear, Adapter, AdapterKind};
use symlora::model::{build_model, pretrain_base, AdaptedModel, InjectionPolicy, TinyTransformerConfig};
use symlora::numerics::SeededRng;
use symlora::store::{AdapterCheckpoint, CheckpointMetadata};
use symlora::tasks::{make_planted_task, PlantedLinearTask, SequenceTaskKind, ToySequenceTask};
use symlora::training::{train, Learner, OptimizerKind, TrainConfig, TrainResult};

pub const RUN_KEY: &str = "run";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "lowercase")]
pub enum TaskSpec {
    Planted {
        symmetric: bool,
        dim: usize,
        rank: usize,
        noise_std: f64,
        seed: u64,
    },
    Sequence {
        kind: SequenceTaskKind,
        vocab_size: usize,
        seq_len: usize,
        n_classes: usize,
        seed: u64,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSpec {
    pub task: SequenceTaskKind,
    pub steps: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub task: TaskSpec,
    pub model: Option<TinyTransformerConfig>,
    pub pretrain: Option<PretrainSpec>,
    pub adapter: AdapterKind,
    pub rank: usize,
    pub alpha: f64,
    pub init_std: f64,
    pub tie_lambda: bool,
    pub train: TrainConfig,
}

pub enum Task {
    Planted(PlantedLinearTask<f64>),
    Sequence(ToySequenceTask),
}

pub enum Host {
    Layer(AdaptedLinear<f64>),
    Model(AdaptedModel<f64>),
}

impl TaskSpec {
    pub fn id(&self) -> String {
        match self {
            Self::Planted { symmetric: true, .. } => "planted-sym".into(),
            Self::Planted { .. } => "planted-asym".into(),
            Self::Sequence { kind, .. } => kind.as_str().into(),
        }
    }

    pub fn build(&self) -> Result<Task> {
        Ok(match *self {
            Self::Planted {
                symmetric,
                dim,
                rank,
                noise_std,
                seed,
            } => Task::Planted(make_planted_task(dim, rank, symmetric, noise_std, seed)?),
            Self::Sequence {
                kind,
                vocab_size,
                seq_len,
                n_classes,
                seed,
            } => Task::Sequence(ToySequenceTask::new(kind, vocab_size, seq_len, n_classes, seed)?),
        })
    }
}

impl RunSpec {
    pub fn from_metadata(meta: &CheckpointMetadata) -> Result<Self> {
        let raw = meta
            .params
            .get(RUN_KEY)
            .context("checkpoint metadata has no run description")?;
        serde_json::from_str(raw).context("parsing run description")
    }

    pub fn metadata(&self) -> Result<CheckpointMetadata> {
        let mut params = BTreeMap::new();
        params.insert(RUN_KEY.to_string(), serde_json::to_string(self)?);
        Ok(CheckpointMetadata {
            seed: self.train.seed,
            task_id: self.task.id(),
            steps: self.train.steps,
            params,
        })
    }

    /// The frozen base (pretrained if requested) with no adapters.
    pub fn base(&self, task: &Task) -> Result<Host> {
        match task {
            Task::Planted(t) => Ok(Host::Layer(t.base_layer())),
            Task::Sequence(t) => {
                let cfg = self.model.clone().context("sequence runs need a model config")?;
                if cfg.vocab_size != t.vocab_size || cfg.n_classes != t.n_classes {
                    bail!("model vocabulary/classes do not match the task");
                }
                let mut model = build_model::<f64>(&cfg)?;
                if let Some(p) = &self.pretrain {
                    let pretask = ToySequenceTask::new(p.task, t.vocab_size, t.seq_len, t.n_classes, p.seed)?;
                    let pcfg = TrainConfig {
                        learning_rate: p.learning_rate,
                        batch_size: self.train.batch_size,
                        steps: p.steps,
                        eval_every: p.steps.max(1),
                        seed: p.seed,
                        ..TrainConfig::default()
                    };
                    pretrain_base(&mut model, &pretask, &pcfg)?;
                }
                Ok(Host::Model(model))
            }
        }
    }

    pub fn attach(&self, host: &mut Host) -> Result<()> {
        let rng = SeededRng::new(self.train.seed).derive(0xADA);
        match host {
            Host::Layer(layer) => {
                let (n, m) = layer.base().weight().shape();
                let mut rng = rng;
                let adapter = match self.adapter {
                    AdapterKind::Lora => Adapter::Lora(init_lora(n, m, self.rank, self.alpha, self.init_std, &mut rng)?),
                    AdapterKind::Symlora => {
                        Adapter::SymLora(init_symlora(n, self.rank, self.alpha, self.init_std, &mut rng)?)
                    }
                    AdapterKind::None => bail!("training needs an adapter kind"),
                };
                layer.attach(adapter)?;
            }
            Host::Model(model) => {
                if self.adapter == AdapterKind::None {
                    bail!("training needs an adapter kind");
                }
                let policy = InjectionPolicy {
                    rank: self.rank,
                    alpha: self.alpha,
                    init_std: self.init_std,
                    tie_lambda: self.tie_lambda,
                    ..InjectionPolicy::new(self.adapter)
                };
                model.reset_head(&mut rng.derive(1));
                model.inject_adapters(&policy, &rng)?;
            }
        }
        Ok(())
    }
}

pub fn train_host(host: &mut Host, task: &Task, cfg: &TrainConfig) -> Result<TrainResult> {
    Ok(match (host, task) {
        (Host::Layer(l), Task::Planted(t)) => train(l, t, cfg)?,
        (Host::Model(m), Task::Sequence(t)) => train(m, t, cfg)?,
        _ => bail!("task and model do not match"),
    })
}

pub fn evaluate(host: &Host, task: &Task) -> Result<f64> {
    Ok(match (host, task) {
        (Host::Layer(l), Task::Planted(t)) => l.evaluate(t)?,
        (Host::Model(m), Task::Sequence(t)) => m.evaluate(t)?,
        _ => bail!("task and model do not match"),
    })
}

pub fn metric_name(task: &Task) -> &'static str {
    match task {
        Task::Planted(_) => "mse",
        Task::Sequence(_) => "accuracy",
    }
}

pub fn apply(ckpt: &AdapterCheckpoint, host: &mut Host) -> Result<()> {
    match host {
        Host::Layer(l) => ckpt.apply(l)?,
        Host::Model(m) => ckpt.apply(m)?,
    }
    Ok(())
}

pub fn capture(host: &Host, meta: CheckpointMetadata) -> Result<AdapterCheckpoint> {
    Ok(match host {
        Host::Layer(l) => AdapterCheckpoint::capture(l, meta)?,
        Host::Model(m) => AdapterCheckpoint::capture(m, meta)?,
    })
}

pub fn merged(host: &Host, meta: CheckpointMetadata) -> Result<AdapterCheckpoint> {
    Ok(match host {
        Host::Layer(l) => AdapterCheckpoint::merged(l, meta)?,
        Host::Model(m) => AdapterCheckpoint::merged(m, meta)?,
    })
}

/// Rebuilds the base a checkpoint was trained on and attaches it.
pub fn restore(ckpt: &AdapterCheckpoint) -> Result<(RunSpec, Task, Host)> {
    let spec = RunSpec::from_metadata(&ckpt.metadata)?;
    let task = spec.task.build()?;
    let mut host = spec.base(&task)?;
    apply(ckpt, &mut host)?;
    Ok((spec, task, host))
}

pub fn optimizer(name: &str) -> Result<OptimizerKind> {
    match name {
        "adam" => Ok(OptimizerKind::adam()),
        "sgd" => Ok(OptimizerKind::Sgd),
        other => bail!("unknown optimizer {other:?}"),
    }
}
