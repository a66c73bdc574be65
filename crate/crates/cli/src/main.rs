//! `sentinel`: run the gateway, check its configuration artifacts, manage
//! principals and permissions, and run the attack evaluation.

mod admin;
mod offline;
mod serve;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use sentinel_core::action_filter::load_registry;
use sentinel_core::gateway::GatewayConfig;
use sentinel_core::harness::{run_evaluation, AttackScenario, ScenarioKind};
use sentinel_core::ims::PrincipalKind;
use sentinel_core::keyfile::generate_key_file;
use sentinel_core::rules::{parse_rules_named, RuleError};

#[derive(Debug, Parser)]
#[command(name = "sentinel", version, about = "Layered security gateway for service backends")]
struct Cli {
    /// Gateway configuration file.
    #[arg(long, global = true, env = "SENTINEL_CONFIG")]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the public and admin listeners until interrupted.
    Serve,
    /// Parse a rule file and report the rule count or the first error.
    CheckRules { file: PathBuf },
    /// Parse an action registry file.
    CheckRegistry { file: PathBuf },
    /// Manage principals in the configured principals file.
    User {
        #[command(subcommand)]
        command: UserCommand,
    },
    /// Approve a service-to-service link on the running gateway.
    GrantLink {
        caller: String,
        callee: String,
        #[command(flatten)]
        operator: admin::Operator,
    },
    /// Grant or revoke a function permission on the running gateway.
    Permit {
        /// Function name, `<service>.<action>`.
        function: String,
        /// Principal class, e.g. `user`, `service`, `admin`.
        class: String,
        #[arg(long)]
        revoke: bool,
        #[command(flatten)]
        operator: admin::Operator,
    },
    /// Reconnect the data tier after a breaker trip.
    ResetBreaker {
        #[command(flatten)]
        operator: admin::Operator,
    },
    /// Show the running gateway's link state and artifact versions.
    Status {
        #[command(flatten)]
        operator: admin::Operator,
    },
    /// Run the attack scenarios against an in-process gateway.
    Eval(EvalArgs),
    /// Write a fresh 256-bit key file.
    Keygen { path: PathBuf },
}

#[derive(Debug, Subcommand)]
enum UserCommand {
    /// Enroll a principal. The secret is read from SENTINEL_SECRET or stdin.
    Add {
        id: String,
        #[arg(long, value_enum, default_value = "user")]
        kind: Kind,
    },
    /// Disable a principal; its certificates stop validating.
    Disable { id: String },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Kind {
    User,
    Service,
}

impl From<Kind> for PrincipalKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::User => PrincipalKind::User,
            Kind::Service => PrincipalKind::Service,
        }
    }
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Requests per scenario.
    #[arg(long, default_value_t = 1_000, value_parser = clap::value_parser!(u64).range(1..=1_000_000))]
    n: u64,
    /// Scenario to run; repeat for several. All scenarios by default.
    #[arg(long = "scenario", value_parser = parse_scenario)]
    scenarios: Vec<ScenarioKind>,
    /// Exit with status 1 if any scenario misses its expectation.
    #[arg(long = "assert")]
    assert: bool,
}

fn parse_scenario(s: &str) -> Result<ScenarioKind, String> {
    s.parse().map_err(|e| format!("{e}"))
}

fn load_config(path: Option<&Path>) -> Result<GatewayConfig> {
    let path = path.context("no configuration: pass --config or set SENTINEL_CONFIG")?;
    Ok(GatewayConfig::load(path)?)
}

fn check_rules(file: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(file).with_context(|| format!("cannot read {}", file.display()))?;
    let name = file.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default();
    match parse_rules_named(&name, &text) {
        Ok(set) => {
            println!("{} rules (version {})", set.len(), set.version());
            Ok(true)
        }
        Err(RuleError::Parse(e)) => {
            eprintln!("{}:{}:{}: {e}", file.display(), e.line, e.column);
            Ok(false)
        }
        Err(e) => {
            eprintln!("{}:{}: {e}", file.display(), e.line());
            Ok(false)
        }
    }
}

fn check_registry(file: &Path) -> Result<bool> {
    let text = std::fs::read_to_string(file).with_context(|| format!("cannot read {}", file.display()))?;
    match load_registry(&text) {
        Ok(reg) => {
            println!("{} actions (version {})", reg.len(), reg.version());
            Ok(true)
        }
        Err(e) => {
            eprintln!("{}:{}: {e}", file.display(), e.line);
            Ok(false)
        }
    }
}

fn eval(args: &EvalArgs) -> bool {
    let kinds = if args.scenarios.is_empty() {
        ScenarioKind::ALL.to_vec()
    } else {
        args.scenarios.clone()
    };
    let scenarios: Vec<AttackScenario> = kinds.into_iter().map(|k| AttackScenario::new(k, args.seed)).collect();
    let report = run_evaluation(&scenarios, args.n as usize);
    print!("{}", report.render());
    !args.assert || report.all_met()
}

fn run(cli: Cli) -> Result<bool> {
    let config = cli.config.as_deref();
    match cli.command {
        Command::Serve => {
            let path = config.context("no configuration: pass --config or set SENTINEL_CONFIG")?;
            serve::run(&load_config(Some(path))?, path).map(|()| true)
        }
        Command::CheckRules { file } => check_rules(&file),
        Command::CheckRegistry { file } => check_registry(&file),
        Command::User { command } => {
            let cfg = load_config(config)?;
            match command {
                UserCommand::Add { id, kind } => offline::add_user(&cfg, &id, kind.into())?,
                UserCommand::Disable { id } => offline::disable_user(&cfg, &id)?,
            }
            Ok(true)
        }
        Command::GrantLink { caller, callee, operator } => admin::call(
            &load_config(config)?,
            &operator,
            "grant_link",
            &[("caller", &caller), ("callee", &callee)],
        ),
        Command::Permit {
            function,
            class,
            revoke,
            operator,
        } => admin::call(
            &load_config(config)?,
            &operator,
            "set_permission",
            &[
                ("function", &function),
                ("class", &class),
                ("allowed", if revoke { "false" } else { "true" }),
            ],
        ),
        Command::ResetBreaker { operator } => admin::call(&load_config(config)?, &operator, "reset_breaker", &[]),
        Command::Status { operator } => admin::call(&load_config(config)?, &operator, "status", &[]),
        Command::Eval(args) => Ok(eval(&args)),
        Command::Keygen { path } => {
            if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
                std::fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
            }
            generate_key_file(&path)?;
            println!("wrote {}", path.display());
            Ok(true)
        }
    }
}

/// The error chain on one line. Library errors already embed their cause,
/// so a cause the previous message ends with is not repeated.
fn describe(e: &anyhow::Error) -> String {
    let mut out = String::new();
    for cause in e.chain() {
        let msg = cause.to_string();
        if out.ends_with(&msg) {
            continue;
        }
        if !out.is_empty() {
            out.push_str(": ");
        }
        out.push_str(&msg);
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("sentinel: {}", describe(&e));
            ExitCode::from(1)
        }
    }
}
