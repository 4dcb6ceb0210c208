use std::io::Write;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::Arc;

use anyhow::{Context, Result};
use clap::{Args, Subcommand};

use mac_client::Client;
use mac_service::{build_service, ServiceConfig};

use crate::print_json;

#[derive(Args)]
pub struct ServeArgs {
    /// Service TOML.
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured address; port 0 picks a free one.
    #[arg(long)]
    bind: Option<SocketAddr>,
}

fn runtime() -> Result<tokio::runtime::Runtime> {
    Ok(tokio::runtime::Builder::new_multi_thread().enable_all().build()?)
}

pub fn serve(a: ServeArgs) -> Result<()> {
    let (mut cfg, base) = ServiceConfig::load(&a.config)?;
    if let Some(bind) = a.bind {
        cfg.bind = bind;
    }
    let service = Arc::new(build_service(&cfg, &base)?);
    runtime()?.block_on(async move {
        let listener = tokio::net::TcpListener::bind(cfg.bind)
            .await
            .with_context(|| format!("binding {}", cfg.bind))?;
        println!("listening on http://{}", listener.local_addr()?);
        std::io::stdout().flush()?;
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        mac_service::serve(service, listener, shutdown).await?;
        Ok(())
    })
}

#[derive(Args)]
pub struct ClientArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    url: String,
    #[command(subcommand)]
    call: Call,
}

#[derive(Subcommand)]
enum Call {
    /// Open a session.
    Session,
    /// Ask for a suggestion for the full draft.
    Complete {
        #[arg(long)]
        session: String,
        #[arg(long)]
        typed: String,
    },
    /// Accept characters of the outstanding suggestion.
    Accept {
        #[arg(long)]
        session: String,
        #[arg(long)]
        n: usize,
    },
    /// Rate the final message 0 to 9 and close the session.
    Rate {
        #[arg(long)]
        session: String,
        #[arg(long, allow_negative_numbers = true)]
        rating: i64,
    },
    /// Per-model study summary.
    Report,
}

pub fn client(a: ClientArgs) -> Result<()> {
    let client = Client::new(a.url)?;
    runtime()?.block_on(async move {
        match a.call {
            Call::Session => print_json(&client.start_session().await?),
            Call::Complete { session, typed } => print_json(&client.complete(&session, &typed).await?),
            Call::Accept { session, n } => print_json(&client.accept(&session, n).await?),
            Call::Rate { session, rating } => print_json(&client.rate(&session, rating).await?),
            Call::Report => print_json(&client.report().await?),
        }
    })
}
