use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

const BIN: &str = env!("CARGO_BIN_EXE_sentinel");

fn sentinel(args: &[&str]) -> Command {
    let mut cmd = Command::new(BIN);
    cmd.args(args)
        .env_remove("SENTINEL_CONFIG")
        .env_remove("SENTINEL_OPERATOR")
        .env_remove("SENTINEL_OPERATOR_SECRET")
        .env_remove("SENTINEL_SECRET");
    cmd
}

fn run(args: &[&str]) -> Output {
    sentinel(args).output().unwrap()
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn sample(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config").join(name)
}

#[test]
fn check_rules_reports_count_or_position() {
    let ok = run(&["check-rules", sample("rules.wsr").to_str().unwrap()]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    assert!(text(&ok.stdout).contains(" rules (version "));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.wsr");
    std::fs::write(&bad, "# header\nrule \"a\" target:body op:contains \"x\" action:deny severity:3\nrule \"b\" target:nowhere op:absent action:deny severity:3\n").unwrap();
    let out = run(&["check-rules", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    let err = text(&out.stderr);
    assert!(err.starts_with(&format!("{}:3:", bad.display())), "{err}");
}

#[test]
fn check_registry_reports_count_or_line() {
    let ok = run(&["check-registry", sample("actions.reg").to_str().unwrap()]);
    assert!(ok.status.success(), "{}", text(&ok.stderr));
    assert!(text(&ok.stdout).starts_with("11 actions"), "{}", text(&ok.stdout));

    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.reg");
    std::fs::write(&bad, "trading list_quotes\ntrading\n").unwrap();
    let out = run(&["check-registry", bad.to_str().unwrap()]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).starts_with(&format!("{}:2:", bad.display())));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--scenario", "nonsense"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--n", "0"]).status.code(), Some(2));
}

#[test]
fn missing_config_is_an_error() {
    let out = run(&["user", "disable", "alice"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("--config"));
}

#[test]
fn eval_is_deterministic_and_selectable() {
    let a = run(&["eval", "--seed", "3", "--n", "50", "--assert"]);
    let b = run(&["eval", "--seed", "3", "--n", "50", "--assert"]);
    assert!(a.status.success(), "{}", text(&a.stdout));
    assert_eq!(a.stdout, b.stdout);
    let c = run(&["eval", "--seed", "4", "--n", "50"]);
    assert_ne!(a.stdout, c.stdout);

    let flood = text(&run(&["eval", "--n", "40", "--scenario", "flood"]).stdout);
    assert!(flood.contains("Flood"));
    assert!(!flood.contains("Benign"));
}

#[test]
fn keygen_refuses_to_overwrite() {
    let dir = tempfile::tempdir().unwrap();
    let key = dir.path().join("keys/a.key");
    let out = run(&["keygen", key.to_str().unwrap()]);
    assert!(out.status.success(), "{}", text(&out.stderr));
    let first = std::fs::read_to_string(&key).unwrap();
    assert_eq!(first.trim().len(), 64);
    let again = run(&["keygen", key.to_str().unwrap()]);
    assert_eq!(again.status.code(), Some(1));
    assert_eq!(std::fs::read_to_string(&key).unwrap(), first);
}

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// A deployment directory built from the sample config, with fresh keys and
/// its own ports.
fn deployment() -> (tempfile::TempDir, PathBuf, u16, u16) {
    let dir = tempfile::tempdir().unwrap();
    let (public, admin) = (free_port(), free_port());
    std::fs::create_dir(dir.path().join("data")).unwrap();
    for f in ["rules.wsr", "actions.reg"] {
        std::fs::copy(sample(f), dir.path().join(f)).unwrap();
    }
    let conf = std::fs::read_to_string(sample("sentinel.conf"))
        .unwrap()
        .replace("127.0.0.1:8080", &format!("127.0.0.1:{public}"))
        .replace("127.0.0.1:8081", &format!("127.0.0.1:{admin}"))
        // Fast hashing keeps the test quick.
        + "ims.hash_rounds = 1000\n";
    let path = dir.path().join("sentinel.conf");
    std::fs::write(&path, conf).unwrap();
    for k in ["keys/ims.key", "keys/vault.key"] {
        assert!(run(&["keygen", dir.path().join(k).to_str().unwrap()]).status.success());
    }
    (dir, path, public, admin)
}

fn add_user(config: &Path, id: &str, secret: &str, kind: &str) -> Output {
    sentinel(&["--config", config.to_str().unwrap(), "user", "add", id, "--kind", kind])
        .env("SENTINEL_SECRET", secret)
        .output()
        .unwrap()
}

#[test]
fn user_add_and_disable_edit_the_principals_file() {
    let (dir, config, _, _) = deployment();
    let cfg = config.to_str().unwrap();
    assert!(add_user(&config, "alice", "alice-secret-long", "user").status.success());
    let out = sentinel(&["--config", cfg, "user", "add", "feed", "--kind", "service"])
        .stdin(Stdio::piped())
        .stdout(Stdio::piped())
        .spawn()
        .and_then(|mut c| {
            c.stdin.take().unwrap().write_all(b"feed-secret-long\n")?;
            c.wait_with_output()
        })
        .unwrap();
    assert!(out.status.success());
    let dup = add_user(&config, "alice", "another-secret", "user");
    assert_eq!(dup.status.code(), Some(1));

    let principals = std::fs::read_to_string(dir.path().join("data/principals.db")).unwrap();
    assert!(!principals.contains("alice-secret-long"));
    let line = |id: &str| principals.lines().find(|l| l.starts_with(&format!("{id}\t"))).unwrap().to_string();
    assert!(line("feed").contains("\tservice\t"));

    assert!(run(&["--config", cfg, "user", "disable", "alice"]).status.success());
    let after = std::fs::read_to_string(dir.path().join("data/principals.db")).unwrap();
    assert_ne!(after, principals);
    assert_eq!(run(&["--config", cfg, "user", "disable", "mallory"]).status.code(), Some(1));

    let audit = std::fs::read_to_string(dir.path().join("data/audit.log")).unwrap();
    let changes: Vec<_> = audit.lines().filter(|l| l.contains("AdminChange")).collect();
    assert_eq!(changes.len(), 3, "{audit}");
    assert!(changes[2].contains("alice disabled"));
}

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts the gateway and waits for `port`; the admin listener binds last.
fn serve(config: &Path, port: u16) -> Server {
    let child = sentinel(&["--config", config.to_str().unwrap(), "serve"])
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let server = Server(child);
    let deadline = Instant::now() + Duration::from_secs(10);
    while TcpStream::connect(("127.0.0.1", port)).is_err() {
        assert!(Instant::now() < deadline, "gateway did not start");
        std::thread::sleep(Duration::from_millis(20));
    }
    server
}

/// Minimal HTTP/1.1 exchange; returns status and body.
fn http(port: u16, method: &str, target: &str, headers: &[(&str, &str)], body: &str) -> (u16, String) {
    let mut s = TcpStream::connect(("127.0.0.1", port)).unwrap();
    let mut req = format!("{method} {target} HTTP/1.1\r\nhost: localhost\r\nconnection: close\r\ncontent-length: {}\r\n", body.len());
    for (k, v) in headers {
        req.push_str(&format!("{k}: {v}\r\n"));
    }
    req.push_str("\r\n");
    req.push_str(body);
    s.write_all(req.as_bytes()).unwrap();
    let mut resp = String::new();
    s.read_to_string(&mut resp).unwrap();
    let status = resp[9..12].parse().unwrap();
    let body = resp.split_once("\r\n\r\n").map(|(_, b)| b.to_string()).unwrap_or_default();
    (status, body)
}

#[test]
fn serve_filters_traffic_and_takes_admin_commands() {
    let (_dir, config, public, admin) = deployment();
    assert!(add_user(&config, "alice", "alice-secret-long", "user").status.success());
    assert!(add_user(&config, "feed", "feed-secret-long", "service").status.success());
    assert!(add_user(&config, "root", "root-secret-long", "user").status.success());
    let server = serve(&config, admin);

    let (status, cert) = http(
        public,
        "POST",
        "/ims/login",
        &[],
        "id=alice&secret=alice-secret-long&scope=trading",
    );
    assert_eq!(status, 200, "{cert}");
    let cert = cert.trim();
    let (status, body) = http(public, "GET", "/svc/trading/list_quotes", &[("x-ims-cert", cert)], "");
    assert_eq!(status, 200, "{body}");
    assert!(body.contains("ACME"));
    let (status, _) = http(public, "GET", "/svc/trading/search?q=%3Cscript%3E", &[("x-ims-cert", cert)], "");
    assert_eq!(status, 403);
    let (status, _) = http(public, "GET", "/svc/trading/list_quotes", &[], "");
    assert_eq!(status, 401);
    // Admin functions are not reachable on the public listener.
    let (status, _) = http(public, "GET", "/svc/admin/status", &[("x-ims-cert", cert)], "");
    assert_ne!(status, 200);

    let cfg = config.to_str().unwrap();
    let as_root = |args: &[&str]| {
        let mut full = vec!["--config", cfg];
        full.extend_from_slice(args);
        sentinel(&full)
            .env("SENTINEL_OPERATOR", "root")
            .env("SENTINEL_OPERATOR_SECRET", "root-secret-long")
            .output()
            .unwrap()
    };
    let status_out = as_root(&["status"]);
    assert!(status_out.status.success(), "{}", text(&status_out.stderr));
    assert!(text(&status_out.stdout).contains("link=connected"));

    // A service may not read balances until an operator permits it.
    let (_, feed) = http(public, "POST", "/ims/login", &[], "id=feed&secret=feed-secret-long&scope=banking");
    let feed = feed.trim().to_string();
    let balance = || http(public, "GET", "/svc/banking/get_balance?account=a1", &[("x-ims-cert", &feed)], "").0;
    assert_eq!(balance(), 403);
    assert!(as_root(&["permit", "banking.get_balance", "service"]).status.success());
    assert_ne!(balance(), 403);
    assert!(as_root(&["permit", "banking.get_balance", "service", "--revoke"]).status.success());
    assert_eq!(balance(), 403);

    // Principals enrolled while running take effect on SIGHUP.
    assert!(add_user(&config, "carol", "carol-secret-long", "user").status.success());
    let login = || http(public, "POST", "/ims/login", &[], "id=carol&secret=carol-secret-long&scope=trading").0;
    assert_eq!(login(), 401);
    let hup = Command::new("kill").args(["-HUP", &server.0.id().to_string()]).status().unwrap();
    assert!(hup.success());
    let deadline = Instant::now() + Duration::from_secs(10);
    while login() != 200 {
        assert!(Instant::now() < deadline, "reload did not pick up the new principal");
        std::thread::sleep(Duration::from_millis(20));
    }

    let wrong = sentinel(&["--config", cfg, "status"])
        .env("SENTINEL_OPERATOR", "alice")
        .env("SENTINEL_OPERATOR_SECRET", "alice-secret-long")
        .output()
        .unwrap();
    assert_eq!(wrong.status.code(), Some(1));
}

#[test]
fn serve_fails_closed_on_bad_artifacts() {
    let (dir, config, public, _) = deployment();
    std::fs::write(dir.path().join("rules.wsr"), "rule \"x\" target:body op:rx \"(\" action:deny severity:1\n").unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "serve"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("rules.wsr"), "{}", text(&out.stderr));
    assert!(TcpStream::connect(("127.0.0.1", public)).is_err());

    let conf = std::fs::read_to_string(&config).unwrap();
    let exposed = conf
        .lines()
        .map(|l| if l.starts_with("listen.admin") { "listen.admin = 0.0.0.0:9".to_string() } else { l.to_string() })
        .collect::<Vec<_>>()
        .join("\n");
    std::fs::write(&config, exposed).unwrap();
    let out = run(&["--config", config.to_str().unwrap(), "serve"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(text(&out.stderr).contains("loopback"));
}
