//! Operator commands sent to the running gateway's loopback admin binding.

use anyhow::{bail, Context, Result};
use clap::Args;
use sentinel_core::gateway::{GatewayConfig, ADMIN_SERVICE, LOGIN_PATH};
use sentinel_core::{percent_encode, CERT_HEADER};

/// Certificates minted for one admin command live this long.
const COMMAND_TTL_MS: u64 = 60_000;

#[derive(Debug, Args)]
pub struct Operator {
    /// Operator principal. Its secret is read from SENTINEL_OPERATOR_SECRET.
    #[arg(long, env = "SENTINEL_OPERATOR")]
    operator: String,
}

fn form(pairs: &[(&str, &str)]) -> String {
    pairs
        .iter()
        .map(|(k, v)| format!("{}={}", percent_encode(k), percent_encode(v)))
        .collect::<Vec<_>>()
        .join("&")
}

/// Status and body of a response, whatever the status.
fn outcome(r: Result<ureq::Response, ureq::Error>) -> Result<(u16, String)> {
    let resp = match r {
        Ok(resp) => resp,
        Err(ureq::Error::Status(_, resp)) => resp,
        Err(e) => return Err(e).context("admin binding unreachable"),
    };
    let status = resp.status();
    Ok((status, resp.into_string().context("reading response")?))
}

/// Logs in on the admin binding, runs `admin/<action>` and prints the reply.
/// Returns whether the gateway accepted the command.
pub fn call(cfg: &GatewayConfig, op: &Operator, action: &str, params: &[(&str, &str)]) -> Result<bool> {
    if !cfg.listen_admin.ip().is_loopback() {
        bail!("admin listener {} is not a loopback address", cfg.listen_admin);
    }
    let secret = std::env::var("SENTINEL_OPERATOR_SECRET").context("SENTINEL_OPERATOR_SECRET is not set")?;
    let base = format!("http://{}", cfg.listen_admin);

    let login = form(&[
        ("id", &op.operator),
        ("secret", &secret),
        ("scope", ADMIN_SERVICE),
        ("ttl_ms", &COMMAND_TTL_MS.to_string()),
        ("single_use", "1"),
    ]);
    let (status, body) = outcome(
        ureq::post(&format!("{base}{LOGIN_PATH}"))
            .set("content-type", "application/x-www-form-urlencoded")
            .send_string(&login),
    )?;
    if status != 200 {
        eprintln!("login as {:?} failed: {}", op.operator, body.trim());
        return Ok(false);
    }
    let cert = body.trim();

    let mut url = format!("{base}/svc/{ADMIN_SERVICE}/{action}");
    if !params.is_empty() {
        url.push('?');
        url.push_str(&form(params));
    }
    let (status, body) = outcome(ureq::get(&url).set(CERT_HEADER, cert).call())?;
    if status == 200 {
        print!("{body}");
        Ok(true)
    } else {
        eprintln!("{action} failed ({status}): {}", body.trim());
        Ok(false)
    }
}
