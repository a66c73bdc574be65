//! Principal management on the principals file. A running gateway picks the
//! change up on its next reload (SIGHUP).

use std::io::BufRead;
use std::path::PathBuf;
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{bail, Context, Result};
use sentinel_core::gateway::GatewayConfig;
use sentinel_core::ims::{Ims, PrincipalKind};
use sentinel_core::keyfile::read_key_file;
use sentinel_core::{AuditLog, ThreatEvent, ThreatKind};

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

fn principals_path(cfg: &GatewayConfig) -> Result<&PathBuf> {
    cfg.principals.as_ref().context("config has no ims.principals file")
}

/// Opens the audit log first so nothing changes unless the change can be
/// recorded.
fn audit(cfg: &GatewayConfig) -> Result<AuditLog> {
    let path = cfg
        .audit_file
        .as_ref()
        .context("config has no audit.file; principal changes must be audited")?;
    Ok(AuditLog::with_file(path)?)
}

fn load(cfg: &GatewayConfig) -> Result<(Ims, PathBuf)> {
    let path = principals_path(cfg)?.clone();
    let ims = Ims::new(read_key_file(&cfg.ims_key)?, cfg.ims.clone());
    if path.exists() {
        ims.load_principals(&path)?;
    }
    Ok((ims, path))
}

fn read_secret() -> Result<String> {
    if let Ok(s) = std::env::var("SENTINEL_SECRET") {
        return Ok(s);
    }
    let mut line = String::new();
    std::io::stdin().lock().read_line(&mut line).context("reading secret from stdin")?;
    let secret = line.trim_end_matches(['\n', '\r']).to_string();
    if secret.is_empty() {
        bail!("no secret: set SENTINEL_SECRET or pipe it on stdin");
    }
    Ok(secret)
}

fn record(log: &AuditLog, detail: String) -> Result<()> {
    log.append(ThreatEvent::new(now_ms(), ThreatKind::AdminChange, "cli", detail))?;
    Ok(())
}

pub fn add_user(cfg: &GatewayConfig, id: &str, kind: PrincipalKind) -> Result<()> {
    let log = audit(cfg)?;
    let (ims, path) = load(cfg)?;
    let secret = read_secret()?;
    ims.register_principal(id, &secret, kind)?;
    ims.save_principals(&path)?;
    record(&log, format!("principal {id} enrolled as {}", kind.as_str()))?;
    println!("enrolled {id} ({})", kind.as_str());
    Ok(())
}

pub fn disable_user(cfg: &GatewayConfig, id: &str) -> Result<()> {
    let log = audit(cfg)?;
    let (ims, path) = load(cfg)?;
    ims.set_enabled(id, false)?;
    ims.save_principals(&path)?;
    record(&log, format!("principal {id} disabled"))?;
    println!("disabled {id}");
    Ok(())
}
