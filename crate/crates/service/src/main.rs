use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use chrono::{DateTime, Utc};
use clap::{Parser, Subcommand};
use mnemo_core::eval::{run_eval, EvalCorpus, EvalMode, EvalOptions};
use mnemo_core::{BudgetPolicy, ChannelSet, Engine, Role, UserMemory};
use mnemo_service::config::{ConfigError, ServiceConfig, CONFIG_ENV};
use mnemo_service::http::{profile_of, stats_of, AppState, UserStore};
use mnemo_service::snapshot;
use serde::Deserialize;

#[derive(Parser)]
#[command(name = "mnemo", version, about = "Long-term memory for conversational agents")]
struct Cli {
    /// TOML config file.
    #[arg(long, short, env = CONFIG_ENV, global = true)]
    config: Option<PathBuf>,

    /// Snapshot directory; overrides the config.
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Add turns to a user's memory, from --text or a file (one turn per
    /// line, or JSON lines with role/text/session_id/timestamp).
    Ingest {
        #[arg(long)]
        user: String,
        #[arg(long, conflicts_with = "file")]
        text: Option<String>,
        #[arg(long)]
        file: Option<PathBuf>,
        #[arg(long, default_value = "user")]
        role: Role,
        #[arg(long)]
        session: Option<String>,
    },
    /// Retrieve context for a query, optionally answering it.
    Query {
        #[arg(long)]
        user: String,
        #[arg(long)]
        text: String,
        #[arg(long, default_value = "wm,em,pm")]
        channels: ChannelSet,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        respond: bool,
        /// Print the whole bundle as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Print the persona facts and attributes as JSON.
    Profile {
        #[arg(long)]
        user: String,
    },
    /// Cluster and merge the user's attributes.
    Compact {
        #[arg(long)]
        user: String,
    },
    /// Print store sizes as JSON.
    Stats {
        #[arg(long)]
        user: String,
    },
    /// Run QA evaluation over a corpus.
    Eval {
        #[arg(long)]
        corpus: PathBuf,
        #[arg(long, default_value = "omem")]
        mode: EvalMode,
        #[arg(long, default_value = "wm,em,pm")]
        channels: ChannelSet,
        #[arg(long, conflicts_with = "no_budget")]
        budget: Option<usize>,
        #[arg(long)]
        no_budget: bool,
        #[arg(long, default_value = "eval-report.json")]
        out: PathBuf,
        /// Prefix every turn with its speaker name.
        #[arg(long)]
        speaker_prefix: bool,
    },
    /// Run the HTTP API.
    Serve {
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Deserialize)]
struct TurnLine {
    #[serde(default)]
    role: Option<Role>,
    text: String,
    #[serde(default)]
    session_id: Option<String>,
    #[serde(default)]
    timestamp: Option<DateTime<Utc>>,
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "warn".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 for configuration and input-file problems, 3 when a model or
/// embedding provider failed, 1 otherwise.
fn exit_code(e: &anyhow::Error) -> u8 {
    for cause in e.chain() {
        if cause.downcast_ref::<ConfigError>().is_some() {
            return 2;
        }
        if cause.downcast_ref::<mnemo_core::Error>().is_some_and(mnemo_core::Error::is_provider) {
            return 3;
        }
    }
    1
}

struct Ctx {
    config: ServiceConfig,
    data_dir: PathBuf,
}

impl Ctx {
    fn engine(&self) -> Result<Engine> {
        Ok(self.config.build_engine()?)
    }

    fn path(&self, user: &str) -> Result<PathBuf> {
        if !snapshot::valid_user_id(user) {
            bail!(ConfigError::Invalid(format!("bad user id {user:?}")));
        }
        Ok(snapshot::user_path(&self.data_dir, user))
    }

    fn load(&self, user: &str) -> Result<UserMemory> {
        let path = self.path(user)?;
        if !path.exists() {
            bail!("unknown user {user:?} (no snapshot at {})", path.display());
        }
        snapshot::load(&path).with_context(|| format!("loading {}", path.display()))
    }

    fn save(&self, mem: &UserMemory) -> Result<()> {
        std::fs::create_dir_all(&self.data_dir)
            .with_context(|| format!("creating {}", self.data_dir.display()))?;
        snapshot::save(mem, &self.path(mem.user_id())?)?;
        Ok(())
    }

    fn budget(&self, max: Option<usize>) -> Result<BudgetPolicy> {
        let order = self.config.engine.channel_order;
        Ok(BudgetPolicy::new(max.unwrap_or(self.config.engine.max_tokens), order)
            .map_err(|e| ConfigError::Invalid(e.to_string()))?)
    }
}

fn read_turns(path: &Path) -> Result<Vec<TurnLine>> {
    if !path.exists() {
        bail!(ConfigError::MissingFile(path.to_path_buf()));
    }
    let file = std::fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let jsonl = path.extension().is_some_and(|e| e == "jsonl");
    let mut turns = Vec::new();
    for (n, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        turns.push(if jsonl {
            serde_json::from_str(&line).map_err(|e| {
                ConfigError::Invalid(format!("{}:{}: {e}", path.display(), n + 1))
            })?
        } else {
            TurnLine { role: None, text: line, session_id: None, timestamp: None }
        });
    }
    Ok(turns)
}

fn run(cli: Cli) -> Result<()> {
    let config = ServiceConfig::load(cli.config.as_deref())?;
    let data_dir = cli
        .data_dir
        .clone()
        .or_else(|| config.server.data_dir.clone())
        .unwrap_or_else(|| PathBuf::from("mnemo-data"));
    let ctx = Ctx { config, data_dir };

    match cli.command {
        Command::Ingest { user, text, file, role, session } => {
            let turns = match (text, file) {
                (Some(t), None) => vec![TurnLine { role: Some(role), text: t, session_id: None, timestamp: None }],
                (None, Some(f)) => read_turns(&f)?,
                _ => bail!(ConfigError::Invalid("give exactly one of --text or --file".into())),
            };
            let engine = ctx.engine()?;
            let path = ctx.path(&user)?;
            let mut mem = if path.exists() { ctx.load(&user)? } else { UserMemory::new(&user)? };
            let mut result = Ok(());
            let mut added = 0;
            for t in turns {
                let outcome = engine.encode_interaction(
                    &mut mem,
                    t.role.unwrap_or(role),
                    &t.text,
                    t.timestamp.unwrap_or_else(Utc::now),
                    t.session_id.or_else(|| session.clone()),
                );
                match outcome {
                    Ok(o) => {
                        added += 1;
                        for w in o.warnings {
                            eprintln!("warning: interaction {}: {w}", o.interaction.id);
                        }
                    }
                    Err(e) => {
                        result = Err(anyhow::Error::new(e).context(format!("ingesting turn {}", added + 1)));
                        break;
                    }
                }
            }
            ctx.save(&mem)?;
            println!("{added} interaction(s) ingested for {user}; {} total", mem.interactions().len());
            result
        }
        Command::Query { user, text, channels, budget, respond, json } => {
            let engine = ctx.engine()?;
            let mem = ctx.load(&user)?;
            let budget = ctx.budget(budget)?;
            let (response, bundle) = if respond {
                let a = engine.answer(&mem, &text, channels, &budget).map_err(|e| e.error)?;
                (Some(a.response), a.bundle)
            } else {
                (None, engine.retrieve(&mem, &text, channels, &budget)?)
            };
            if json {
                let mut v = serde_json::to_value(&bundle)?;
                if let Some(r) = &response {
                    v["response"] = r.clone().into();
                }
                println!("{}", serde_json::to_string_pretty(&v)?);
            } else {
                println!("{}", bundle.merged_context);
                println!("-- {} tokens", bundle.token_count);
                if let Some(r) = response {
                    println!("{r}");
                }
            }
            Ok(())
        }
        Command::Profile { user } => {
            println!("{}", serde_json::to_string_pretty(&profile_of(&ctx.load(&user)?))?);
            Ok(())
        }
        Command::Compact { user } => {
            let engine = ctx.engine()?;
            let mut mem = ctx.load(&user)?;
            let report = engine.compact(&mut mem, Utc::now())?;
            ctx.save(&mem)?;
            println!("{}", serde_json::to_string_pretty(&report)?);
            Ok(())
        }
        Command::Stats { user } => {
            let s = stats_of(&ctx.load(&user)?);
            println!(
                "{}",
                serde_json::json!({
                    "interactions": s.interactions, "topics": s.topics, "clue_words": s.clue_words,
                    "facts": s.facts, "attributes": s.attributes, "snapshot_bytes": s.snapshot_bytes,
                })
            );
            Ok(())
        }
        Command::Eval { corpus, mode, channels, budget, no_budget, out, speaker_prefix } => {
            if !corpus.exists() {
                bail!(ConfigError::MissingFile(corpus));
            }
            let data = EvalCorpus::load(&corpus)
                .map_err(|e| ConfigError::Invalid(format!("{}: {e}", corpus.display())))?;
            let engine = ctx.engine()?;
            let budget = if no_budget {
                BudgetPolicy::unlimited(ctx.config.engine.channel_order)
            } else {
                ctx.budget(budget)?
            };
            let mut options = EvalOptions::new(mode, channels, budget);
            options.speaker_prefix = speaker_prefix;
            let report = run_eval(&data, &engine, &options)?;
            std::fs::write(&out, report.to_json()).with_context(|| format!("writing {}", out.display()))?;
            print!("{}", report.table());
            println!("report written to {}", out.display());
            if report.failures > 0 && report.failures == report.items.len() {
                bail!(mnemo_core::Error::Provider {
                    provider: engine.analyzer().id().to_string(),
                    message: "every question failed".into(),
                    retryable: true,
                    attempts: 0,
                });
            }
            Ok(())
        }
        Command::Serve { bind } => {
            let engine = Arc::new(ctx.engine()?);
            let store = Arc::new(UserStore::open(ctx.data_dir.clone())?);
            let bind = bind.unwrap_or_else(|| ctx.config.server.bind.clone());
            let state = AppState { engine, store, token: ctx.config.server.token.clone() };
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(mnemo_service::http::serve(state, &bind))?;
            Ok(())
        }
    }
}
