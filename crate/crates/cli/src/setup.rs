//! Builds generators, critics and judges from the run configuration.

use std::path::Path;

use recap_chat::{AuditLog, BlockingChat, ChatClient, ChatError, HttpGenerator, HttpJudge, PromptTemplate};
use recap_core::config::{ChatEndpointConfig, GeneratorKind, JudgeKind, PipelineConfig};
use recap_core::dataset::{read_all, CaptionRecord, DatasetManifest, LengthMode, Stage};
use recap_core::eval::{Judge, MockJudge, OracleJudge};
use recap_core::foundry::{CandidateGenerator, Critic, JudgeCritic, ToyGenerator, WorldCritic};
use recap_core::world::SyntheticWorld;
use recap_core::ToyPolicy;

use crate::error::{CliError, CliResult};

pub fn load_config(path: Option<&Path>) -> CliResult<PipelineConfig> {
    let config = match path {
        Some(p) => PipelineConfig::load(p).map_err(|e| CliError::config("config", e))?,
        None => PipelineConfig::default(),
    };
    config.validate().map_err(|e| CliError::config("config", e))?;
    Ok(config)
}

pub fn world(config: &PipelineConfig, stage: &'static str) -> CliResult<SyntheticWorld> {
    SyntheticWorld::generate(&config.toy.world, config.seed).map_err(|e| CliError::config(stage, e))
}

pub fn load_policy(path: &Path, stage: &'static str) -> CliResult<ToyPolicy> {
    ToyPolicy::load(path).map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))
}

pub fn load_template(path: &Path, required: &[&str], stage: &'static str) -> CliResult<PromptTemplate> {
    let t = PromptTemplate::load(path).map_err(|e| CliError::config(stage, e))?;
    t.require(required).map_err(|e| CliError::config(stage, e))?;
    Ok(t)
}

pub fn read_records(path: &Path, stage: &'static str) -> CliResult<(DatasetManifest, Vec<CaptionRecord>)> {
    read_all(path, Stage::Ingested).map_err(|e| CliError::runtime(stage, format!("{}: {e}", path.display())))
}

pub fn chat(endpoint: &ChatEndpointConfig, audit: Option<&Path>, stage: &'static str) -> CliResult<BlockingChat> {
    let mut client = ChatClient::new(endpoint).map_err(|e| match e {
        ChatError::MissingApiKey(_) | ChatError::Config(_) => CliError::config(stage, e),
        other => CliError::runtime(stage, other),
    })?;
    if let Some(p) = audit {
        let log = AuditLog::create(p).map_err(|e| CliError::runtime(stage, format!("{}: {e}", p.display())))?;
        client = client.with_audit(log);
    }
    BlockingChat::new(client).map_err(|e| CliError::runtime(stage, e))
}

fn endpoint<'a>(e: Option<&'a ChatEndpointConfig>, section: &str, stage: &'static str) -> CliResult<&'a ChatEndpointConfig> {
    e.ok_or_else(|| CliError::config(stage, format!("http_chat needs [{section}.endpoint]")))
}

/// A judge of the configured kind. The oracle needs the synthetic world.
pub fn judge<'w>(
    config: &PipelineConfig,
    kind: JudgeKind,
    world: Option<&'w SyntheticWorld>,
    audit: Option<&Path>,
    stage: &'static str,
) -> CliResult<Box<dyn Judge + 'w>> {
    let j = &config.judge;
    Ok(match kind {
        JudgeKind::Oracle => {
            let w = world.ok_or_else(|| CliError::config(stage, "the oracle judge needs the synthetic world"))?;
            Box::new(OracleJudge::new(w))
        }
        JudgeKind::Mock => match &j.mock_file {
            Some(p) => Box::new(MockJudge::from_file(p, j.fallback_halluc_rate).map_err(|e| CliError::config(stage, e))?),
            None => Box::new(MockJudge::new(j.fallback_halluc_rate)),
        },
        JudgeKind::HttpChat => {
            let chat = chat(endpoint(j.endpoint.as_ref(), "judge", stage)?, audit, stage)?;
            let template = load_template(&j.prompt, &HttpJudge::PLACEHOLDERS, stage)?;
            Box::new(HttpJudge::new(chat, template).map_err(|e| CliError::config(stage, e))?)
        }
    })
}

pub fn critic<'w>(
    config: &PipelineConfig,
    world: Option<&'w SyntheticWorld>,
    audit: Option<&Path>,
    stage: &'static str,
) -> CliResult<Box<dyn Critic + 'w>> {
    if config.judge.kind == JudgeKind::Oracle {
        let w = world.ok_or_else(|| CliError::config(stage, "the oracle critic needs the synthetic world"))?;
        return Ok(Box::new(WorldCritic { world: w, critic: w.critic() }));
    }
    let judge = judge(config, config.judge.kind, world, audit, stage)?;
    Ok(Box::new(JudgeCritic { judge, lambda_halluc: config.judge.lambda_halluc }))
}

pub enum Generator {
    Toy(ToyPolicy),
    Http(HttpGenerator),
}

impl Generator {
    pub fn from_config(
        config: &PipelineConfig,
        checkpoint: Option<&Path>,
        template: &Path,
        audit: Option<&Path>,
        stage: &'static str,
    ) -> CliResult<Self> {
        let g = &config.generator;
        match g.kind {
            GeneratorKind::ToyPolicy => {
                let path = checkpoint
                    .or(g.checkpoint.as_deref())
                    .ok_or_else(|| CliError::config(stage, "toy_policy generator needs --checkpoint"))?;
                Ok(Generator::Toy(load_policy(path, stage)?))
            }
            GeneratorKind::HttpChat => {
                let chat = chat(endpoint(g.endpoint.as_ref(), "generator", stage)?, audit, stage)?;
                let template = load_template(template, &[], stage)?;
                Ok(Generator::Http(HttpGenerator { chat, template }))
            }
        }
    }

    pub fn as_dyn(&self) -> Box<dyn CandidateGenerator + '_> {
        match self {
            Generator::Toy(policy) => Box::new(ToyGenerator { policy }),
            Generator::Http(h) => Box::new(HttpGeneratorRef(h)),
        }
    }

    pub fn length_mode(&self) -> LengthMode {
        match self {
            Generator::Toy(_) => LengthMode::ModelTokens,
            Generator::Http(_) => LengthMode::Whitespace,
        }
    }
}

struct HttpGeneratorRef<'a>(&'a HttpGenerator);

impl CandidateGenerator for HttpGeneratorRef<'_> {
    fn generate(
        &self,
        record: &CaptionRecord,
        params: &recap_core::SamplerParams,
        k: usize,
        rng: &mut recap_core::rng::StreamRng,
    ) -> Result<Vec<recap_core::dataset::Completion>, String> {
        self.0.generate(record, params, k, rng)
    }
}
