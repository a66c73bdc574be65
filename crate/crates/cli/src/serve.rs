//! HTTP front end: one pipeline, two listeners. The admin listener must be
//! a loopback address.

use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use axum::body::to_bytes;
use axum::extract::{ConnectInfo, Request, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use sentinel_core::gateway::{Binding, Gateway, GatewayConfig};
use sentinel_core::RawRequest;
use tokio::net::TcpListener;
use tokio::sync::watch;

use crate::offline::now_ms;

/// Largest request body read off the wire.
const MAX_BODY: usize = 4 << 20;
const MAINTENANCE_EVERY: Duration = Duration::from_secs(60);

#[derive(Clone)]
struct App {
    gateway: Arc<Gateway>,
    binding: Binding,
}

fn text(status: StatusCode, body: impl Into<String>) -> Response {
    (status, [(header::CONTENT_TYPE, "text/plain; charset=utf-8")], body.into()).into_response()
}

async fn handle(State(app): State<App>, ConnectInfo(peer): ConnectInfo<SocketAddr>, req: Request) -> Response {
    let now = now_ms();
    let (parts, body) = req.into_parts();
    let Ok(body) = to_bytes(body, MAX_BODY).await else {
        return text(StatusCode::PAYLOAD_TOO_LARGE, "request too large\n");
    };
    let target = parts.uri.path_and_query().map_or("/", |pq| pq.as_str());
    let mut raw = RawRequest::new(peer.to_string(), target, now);
    for (name, value) in &parts.headers {
        raw = raw.header(name.as_str(), value.as_bytes());
    }
    let raw = raw.body(body.to_vec());
    let gateway = app.gateway.clone();
    let binding = app.binding;
    match tokio::task::spawn_blocking(move || gateway.handle_on(binding, &raw, now)).await {
        Ok(resp) => {
            let status = StatusCode::from_u16(resp.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
            let mut body = resp.body;
            if !body.ends_with('\n') {
                body.push('\n');
            }
            text(status, body)
        }
        Err(_) => text(StatusCode::INTERNAL_SERVER_ERROR, "internal error\n"),
    }
}

fn router(gateway: Arc<Gateway>, binding: Binding) -> Router {
    Router::new().fallback(handle).with_state(App { gateway, binding })
}

async fn stop_signal() {
    let ctrl_c = async {
        let _ = tokio::signal::ctrl_c().await;
    };
    #[cfg(unix)]
    let term = async {
        match tokio::signal::unix::signal(tokio::signal::unix::SignalKind::terminate()) {
            Ok(mut s) => {
                s.recv().await;
            }
            Err(_) => std::future::pending::<()>().await,
        }
    };
    #[cfg(not(unix))]
    let term = std::future::pending::<()>();
    tokio::select! {
        _ = ctrl_c => {},
        _ = term => {},
    }
}

#[cfg(unix)]
async fn reload_on_hangup(gateway: Arc<Gateway>, path: std::path::PathBuf) {
    use tokio::signal::unix::{signal, SignalKind};
    let Ok(mut hup) = signal(SignalKind::hangup()) else {
        return;
    };
    while hup.recv().await.is_some() {
        let result = GatewayConfig::load(&path)
            .map_err(anyhow::Error::from)
            .and_then(|cfg| gateway.reload(&cfg, now_ms()).map_err(anyhow::Error::from));
        match result {
            Ok(()) => eprintln!("sentinel: configuration reloaded"),
            Err(e) => eprintln!("sentinel: reload refused, keeping current configuration: {e:#}"),
        }
    }
}

#[cfg(not(unix))]
async fn reload_on_hangup(_: Arc<Gateway>, _: std::path::PathBuf) {}

async fn maintenance(gateway: Arc<Gateway>) {
    let mut tick = tokio::time::interval(MAINTENANCE_EVERY);
    loop {
        tick.tick().await;
        let now = now_ms();
        gateway.dos_guard().purge(now);
        gateway.ims().purge(now);
    }
}

async fn serve(gateway: Arc<Gateway>, cfg: &GatewayConfig, path: &Path) -> Result<()> {
    // Both listeners bind before either serves.
    let public = TcpListener::bind(cfg.listen_public)
        .await
        .with_context(|| format!("cannot bind public listener {}", cfg.listen_public))?;
    let admin = TcpListener::bind(cfg.listen_admin)
        .await
        .with_context(|| format!("cannot bind admin listener {}", cfg.listen_admin))?;
    eprintln!(
        "sentinel: public {} admin {}",
        public.local_addr()?,
        admin.local_addr()?
    );

    let (stop_tx, stop_rx) = watch::channel(false);
    let stopped = |mut rx: watch::Receiver<bool>| async move {
        let _ = rx.wait_for(|s| *s).await;
    };
    let public_srv = axum::serve(
        public,
        router(gateway.clone(), Binding::Public).into_make_service_with_connect_info::<SocketAddr>(),
    )
    .with_graceful_shutdown(stopped(stop_rx.clone()));
    let admin_srv = axum::serve(
        admin,
        router(gateway.clone(), Binding::Admin).into_make_service_with_connect_info::<SocketAddr>(),
    )
    .with_graceful_shutdown(stopped(stop_rx));

    let background = [
        tokio::spawn(reload_on_hangup(gateway.clone(), path.to_path_buf())),
        tokio::spawn(maintenance(gateway)),
    ];
    tokio::spawn(async move {
        stop_signal().await;
        let _ = stop_tx.send(true);
    });
    let (a, b) = tokio::join!(public_srv, admin_srv);
    for task in background {
        task.abort();
    }
    a.context("public listener")?;
    b.context("admin listener")?;
    eprintln!("sentinel: stopped");
    Ok(())
}

/// Validates everything, binds both listeners and serves until SIGINT or
/// SIGTERM. Any invalid artifact aborts before a socket is opened.
pub fn run(cfg: &GatewayConfig, path: &Path) -> Result<()> {
    if !cfg.listen_admin.ip().is_loopback() {
        bail!("listen.admin {} must be a loopback address", cfg.listen_admin);
    }
    let gateway = Arc::new(Gateway::from_config(cfg)?);
    let runtime = tokio::runtime::Runtime::new().context("starting runtime")?;
    runtime.block_on(serve(gateway, cfg, path))
}
