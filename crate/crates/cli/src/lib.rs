//! `refseg` command-line driver: dataset generation, splitting, statistics,
//! evaluation, the LGCE invariant suite and the curation server.

pub mod args;
pub mod commands;
pub mod config;
pub mod server;

use std::io::Write;
use std::net::{IpAddr, SocketAddr};

use anyhow::{Context, Result};

use args::{Cli, Command, ServeArgs};
use commands::Outcome;
use config::RunConfig;

pub fn run(cli: &Cli, out: &mut dyn Write) -> Result<Outcome> {
    let cfg = RunConfig::load_optional(cli.config.as_deref())?;
    match &cli.command {
        Command::Synth(a) => commands::synth(a, &cfg, out),
        Command::Tile(a) => commands::tile(a, &cfg, out),
        Command::Generate(a) => commands::generate(a, &cfg, out),
        Command::Split(a) => commands::split(a, &cfg, out),
        Command::Stats(a) => commands::stats(a, &cfg, out),
        Command::Evaluate(a) => commands::evaluate(a, &cfg, out),
        Command::LgceCheck(a) => commands::lgce_check(a, &cfg, out),
        Command::Serve(a) => serve(a, &cfg),
    }
}

pub fn server_options(args: &ServeArgs, cfg: &RunConfig) -> Result<server::ServerOptions> {
    let verdict_log = args.verdicts.clone().unwrap_or_else(|| {
        args.manifest
            .parent()
            .unwrap_or(std::path::Path::new("."))
            .join("verdicts.jsonl")
    });
    Ok(server::ServerOptions {
        manifest_path: args.manifest.clone(),
        verdict_log,
        taxonomy: cfg.taxonomy(args.taxonomy.as_deref())?,
        static_dir: args.static_dir.clone().or_else(|| cfg.server.static_dir.clone()),
        include_pending: !args.exclude_pending && cfg.server.include_pending.unwrap_or(true),
    })
}

fn serve(args: &ServeArgs, cfg: &RunConfig) -> Result<Outcome> {
    let bind = args
        .bind
        .clone()
        .or_else(|| cfg.server.bind.clone())
        .unwrap_or_else(|| "127.0.0.1".into());
    let ip: IpAddr = bind.parse().with_context(|| format!("invalid bind address {bind:?}"))?;
    let port = args.port.or(cfg.server.port).unwrap_or(8080);
    let state = server::AppState::load(server_options(args, cfg)?)?;
    tokio::runtime::Runtime::new()?.block_on(server::serve(state, SocketAddr::new(ip, port)))?;
    Ok(Outcome::Passed)
}
