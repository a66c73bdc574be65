use std::collections::BTreeSet;
use std::sync::Arc;

use parking_lot::Mutex;
use sentinel_core::gateway::{
    banking, contracts, Binding, ClassDirectory, Gateway, PermissionTable, ServiceComponent, ServiceError,
    MSG_AUTH, MSG_INTERNAL, MSG_RATE, MSG_REFUSED, MSG_UNAVAILABLE, MSG_UPSTREAM,
};
use sentinel_core::harness::{Environment, EPOCH_MS};
use sentinel_core::ims::{Ims, ImsConfig, PrincipalKind};
use sentinel_core::dos_guard::RateLimitConfig;
use sentinel_core::sanitizer::SanitizationPolicy;
use sentinel_core::{Layer, RawRequest, ThreatKind, CERT_HEADER};

const T0: u64 = EPOCH_MS;

fn ims() -> Arc<Ims> {
    let ims = Ims::with_seed(
        [7; 32],
        ImsConfig {
            hash_rounds: 1_000,
            ..ImsConfig::default()
        },
        1,
    );
    ims.register_principal("alice", "alice-secret-1", PrincipalKind::User).unwrap();
    ims.register_principal("feed", "feed-secret-22", PrincipalKind::Service).unwrap();
    ims.register_principal("root", "root-secret-333", PrincipalKind::User).unwrap();
    Arc::new(ims)
}

fn cert(ims: &Ims, id: &str, scope: &[&str]) -> String {
    let secret = match id {
        "alice" => "alice-secret-1",
        "feed" => "feed-secret-22",
        _ => "root-secret-333",
    };
    ims.issue_certificate(id, secret, scope.iter().map(|s| s.to_string()).collect(), T0, 3_600_000, false)
        .unwrap()
        .encode()
}

fn get(source: &str, target: &str, cert: &str) -> RawRequest {
    RawRequest::new(source, target, 0).header(CERT_HEADER, cert)
}

/// A trading component that records the `q` value it receives.
fn capturing_trading(seen: Arc<Mutex<Vec<String>>>) -> ServiceComponent {
    ServiceComponent::new("trading", ["list_quotes", "get_quote", "search"], move |_, call| {
        let q = call.param("q").unwrap_or_default();
        seen.lock().push(q.clone());
        Ok(format!("q={q}\n"))
    })
}

#[test]
fn paper_compat_sanitizes_example_to_upper_alnum() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let ims = ims();
    let gw = Gateway::builder(ims.clone())
        .sanitization(SanitizationPolicy::paper_compat())
        .services(vec![capturing_trading(seen.clone()), contracts(), banking()])
        .build()
        .unwrap();
    let c = cert(&ims, "alice", &["trading"]);

    let r = gw.handle(&get("10.0.0.1:1", "/svc/trading/search?q=%23%40abc*", &c), T0 + 1);
    assert_eq!(r.status, 200, "{r:?}");
    assert_eq!(r.body, "q=ABC\n");
    assert_eq!(*seen.lock(), vec!["ABC".to_string()]);
}

#[test]
fn production_policy_keeps_printable_input() {
    let seen = Arc::new(Mutex::new(Vec::new()));
    let ims = ims();
    let gw = Gateway::builder(ims.clone())
        .services(vec![capturing_trading(seen.clone()), contracts(), banking()])
        .build()
        .unwrap();
    let c = cert(&ims, "alice", &["trading"]);
    let r = gw.handle(&get("10.0.0.1:1", "/svc/trading/search?q=%23%40abc*", &c), T0 + 1);
    assert_eq!(r.status, 200);
    assert_eq!(*seen.lock(), vec!["#@abc*".to_string()]);
}

/// Builds a gateway and a request that is denied at `layer`.
fn denied_at(layer: Layer) -> (Environment, RawRequest, u64) {
    let env = Environment::new(3);
    let now = T0 + 10_000;
    let alice = env.login("alice", &["trading", "banking"], T0, 3_600_000, false);
    let feed = env.login("quotes-feed", &["trading", "banking"], T0, 3_600_000, false);
    let req = match layer {
        Layer::DosGuard => {
            for i in 0..20 {
                let r = env.gateway.handle(&get("10.9.9.9:1", "/svc/trading/list_quotes", &alice), now - 100 + i);
                assert!(r.verdict.is_allow());
            }
            get("10.9.9.9:1", "/svc/trading/list_quotes", &alice)
        }
        Layer::Sanitizer => get("10.0.0.1:1", "/svc/../../etc/passwd", &alice),
        Layer::Ims => RawRequest::new("10.0.0.1:1", "/svc/trading/list_quotes", 0),
        Layer::RuleEngine => get("10.0.0.1:1", "/svc/trading/search?q=%3Cscript%3Ealert(1)", &alice),
        Layer::ActionFilter => get("10.0.0.1:1", "/svc/trading/export_all", &alice),
        Layer::Permission => get("10.0.0.1:1", "/svc/banking/get_balance?account=x", &feed),
        Layer::Breaker => {
            for i in 0..3 {
                let r = env.gateway.handle(&get(&format!("10.7.7.{i}:1"), "/svc/trading/list_quotes", "AAAA"), now - 50);
                assert_eq!(r.verdict.layer, Layer::Ims);
            }
            assert!(env.gateway.breaker().link().is_isolated());
            get("10.0.0.1:1", "/svc/banking/deposit?account=a&amount=5", &alice)
        }
    };
    (env, req, now)
}

#[test]
fn denial_at_each_layer_short_circuits() {
    for (i, layer) in Layer::ORDER.into_iter().enumerate() {
        let (env, req, now) = denied_at(layer);
        let before = env.gateway.invocation_counts();
        let audit_before = env.gateway.audit().len();
        let r = env.gateway.handle(&req, now);
        let after = env.gateway.invocation_counts();
        assert!(r.verdict.is_deny(), "{layer:?}: {r:?}");
        assert_eq!(r.verdict.layer, layer, "{r:?}");
        assert!(!r.verdict.reason.is_empty());
        assert_eq!(r.trace, Layer::ORDER[..=i].to_vec(), "{layer:?}");
        for (j, l) in Layer::ORDER.into_iter().enumerate() {
            let expected = u64::from(j <= i);
            assert_eq!(after[j] - before[j], expected, "denial at {layer:?}, counter {l:?}");
        }
        assert!(env.gateway.audit().len() > audit_before, "denial at {layer:?} not audited");
    }
}

#[test]
fn denial_messages_are_generic() {
    let expect = [
        (Layer::DosGuard, 429, MSG_RATE),
        (Layer::Sanitizer, 400, "bad request"),
        (Layer::Ims, 401, MSG_AUTH),
        (Layer::RuleEngine, 403, MSG_REFUSED),
        (Layer::ActionFilter, 403, MSG_REFUSED),
        (Layer::Permission, 403, MSG_REFUSED),
        (Layer::Breaker, 503, MSG_UNAVAILABLE),
    ];
    for (layer, status, msg) in expect {
        let (env, req, now) = denied_at(layer);
        let r = env.gateway.handle(&req, now);
        assert_eq!((r.status, r.body.as_str()), (status, msg), "{layer:?}");
    }
}

#[test]
fn injected_fault_in_any_layer_denies() {
    for (i, layer) in Layer::ORDER.into_iter().enumerate() {
        let env = Environment::new(5);
        let alice = env.login("alice", &["trading"], T0, 3_600_000, false);
        let req = get("10.0.0.1:1", "/svc/trading/list_quotes", &alice);
        env.gateway.inject_fault(layer);
        let r = env.gateway.handle(&req, T0 + 1);
        assert!(r.verdict.is_deny(), "{layer:?}: {r:?}");
        assert_eq!(r.verdict.layer, layer);
        assert_eq!((r.status, r.body.as_str()), (500, MSG_INTERNAL));
        assert_eq!(r.trace, Layer::ORDER[..=i].to_vec());
        env.gateway.clear_faults();
        let r = env.gateway.handle(&get("10.0.0.2:1", "/svc/trading/list_quotes", &alice), T0 + 2);
        assert_eq!(r.status, 200, "{layer:?} after clearing: {r:?}");
    }
}

#[test]
fn valid_request_reaches_the_mock() {
    let env = Environment::new(9);
    let alice = env.login("alice", &["trading"], T0, 3_600_000, false);
    let r = env.gateway.handle(&get("10.0.0.1:1", "/svc/trading/list_quotes", &alice), T0 + 1);
    assert_eq!(r.status, 200);
    assert!(r.verdict.is_allow());
    assert!(r.body.starts_with("ACME 101.25\n"));
    assert_eq!(r.trace, Layer::ORDER.to_vec());
}

#[test]
fn out_of_scope_certificate_is_refused_at_ims() {
    let env = Environment::new(9);
    let alice = env.login("alice", &["trading"], T0, 3_600_000, false);
    let r = env.gateway.handle(&get("10.0.0.1:1", "/svc/banking/get_balance?account=a", &alice), T0 + 1);
    assert_eq!((r.status, r.verdict.layer, r.verdict.reason.as_str()), (403, Layer::Ims, "out-of-scope"));
}

#[test]
fn handler_panic_is_a_generic_upstream_failure() {
    let ims = ims();
    let trading = ServiceComponent::new("trading", ["list_quotes", "get_quote", "search"], |_, _| {
        panic!("secret stack detail at /srv/app.rs:42")
    });
    let gw = Gateway::builder(ims.clone())
        .services(vec![trading, contracts(), banking()])
        .build()
        .unwrap();
    let c = cert(&ims, "alice", &["trading"]);
    let r = gw.handle(&get("10.0.0.1:1", "/svc/trading/list_quotes", &c), T0 + 1);
    assert_eq!((r.status, r.body.as_str()), (502, MSG_UPSTREAM));
    assert!(r.verdict.is_deny());
    assert!(!r.body.contains("secret"));
    assert_eq!(gw.audit().count(ThreatKind::UpstreamFailure), 1);
}

#[test]
fn handler_errors_map_to_statuses() {
    let ims = ims();
    let trading = ServiceComponent::new("trading", ["list_quotes", "get_quote", "search"], |action, _| {
        match action {
            "list_quotes" => Err(ServiceError::Failed("db password is hunter2".into())),
            "get_quote" => Err(ServiceError::NotFound),
            _ => Err(ServiceError::BadInput("q".into())),
        }
    });
    let gw = Gateway::builder(ims.clone())
        .services(vec![trading, contracts(), banking()])
        .build()
        .unwrap();
    let c = cert(&ims, "alice", &["trading"]);
    let r = gw.handle(&get("10.0.0.1:1", "/svc/trading/list_quotes", &c), T0 + 1);
    assert_eq!((r.status, r.body.as_str()), (502, MSG_UPSTREAM));
    let r = gw.handle(&get("10.0.0.1:1", "/svc/trading/get_quote", &c), T0 + 2);
    assert_eq!(r.status, 404);
    let r = gw.handle(&get("10.0.0.1:1", "/svc/trading/search", &c), T0 + 3);
    assert_eq!(r.status, 400);
}

#[test]
fn isolated_tier_refuses_banking_until_reset() {
    let env = Environment::new(4);
    let alice = env.login("alice", &["banking"], T0, 3_600_000, false);
    let deposit = |src: &str, now| env.gateway.handle(&get(src, "/svc/banking/deposit?account=a1&amount=5", &alice), now);
    assert_eq!(deposit("10.0.0.1:1", T0 + 1).status, 200);

    for i in 0..3 {
        env.gateway.handle(&get(&format!("10.6.6.{i}:1"), "/svc/banking/get_balance", "Zm9yZ2Vk"), T0 + 10 + i);
    }
    let link = env.gateway.breaker().link();
    assert!(link.is_isolated());
    let ops = env.gateway.breaker().tier2_operations();
    let r = deposit("10.0.0.2:1", T0 + 20);
    assert_eq!((r.status, r.body.as_str()), (503, MSG_UNAVAILABLE));
    assert_eq!(r.verdict.reason, "tier-isolated");
    assert_eq!(env.gateway.breaker().tier2_operations(), ops);
    assert_eq!(env.gateway.audit().count(ThreatKind::BreakerTrip), 1);
    assert_eq!(env.gateway.audit().count(ThreatKind::TierRefused), 1);

    // Trading does not touch the data tier and stays available.
    let trader = env.login("alice", &["trading"], T0, 3_600_000, false);
    let r = env.gateway.handle(&get("10.0.0.3:1", "/svc/trading/list_quotes", &trader), T0 + 21);
    assert_eq!(r.status, 200);

    assert!(env.gateway.reset_breaker("alice", T0 + 60_000).is_err());
    assert!(env.gateway.reset_breaker("root", T0 + 1_000).is_err());
    env.gateway.reset_breaker("root", T0 + 60_000).unwrap();
    let r = deposit("10.0.0.4:1", T0 + 60_001);
    assert_eq!(r.status, 200);
    assert!(r.body.contains("balance=10"), "{}", r.body);
}

#[test]
fn admin_functions_only_on_admin_binding() {
    let env = Environment::new(2);
    let root = env.login("root", &["admin"], T0, 3_600_000, false);
    let alice = env.login("alice", &["admin"], T0, 3_600_000, false);
    let status = get("127.0.0.1:5", "/svc/admin/status", &root);

    let r = env.gateway.handle_on(Binding::Public, &status, T0 + 1);
    assert_eq!((r.status, r.verdict.layer), (403, Layer::ActionFilter));
    let r = env.gateway.handle_on(Binding::Admin, &status, T0 + 2);
    assert_eq!(r.status, 200, "{r:?}");
    assert!(r.body.contains("link=connected"));

    let r = env.gateway.handle_on(Binding::Admin, &get("127.0.0.1:5", "/svc/admin/status", &alice), T0 + 3);
    assert_eq!((r.status, r.verdict.layer), (403, Layer::Permission));
}

#[test]
fn admin_binding_edits_permissions() {
    let env = Environment::new(2);
    let root = env.login("root", &["admin"], T0, 3_600_000, false);
    let feed = env.login("quotes-feed", &["banking"], T0, 3_600_000, false);
    let balance = || get("10.1.1.1:1", "/svc/banking/get_balance?account=z", &feed);
    let r = env.gateway.handle(&balance(), T0 + 1);
    assert_eq!(r.verdict.layer, Layer::Permission);

    let grant = get(
        "127.0.0.1:9",
        "/svc/admin/set_permission?function=banking.get_balance&class=service&allowed=true",
        &root,
    );
    let r = env.gateway.handle_on(Binding::Admin, &grant, T0 + 2);
    assert_eq!(r.status, 200, "{r:?}");
    let r = env.gateway.handle(&balance(), T0 + 3);
    assert!(r.verdict.is_allow(), "{r:?}");
    assert_eq!(r.status, 404);
    assert!(env.gateway.audit().count(ThreatKind::AdminChange) >= 1);
}

#[test]
fn set_permission_requires_admin_and_is_audited() {
    let env = Environment::new(1);
    let err = env.gateway.set_permission("reports.export", "user", true, "alice", T0).unwrap_err();
    assert_eq!(err.operator, "alice");
    assert!(!env.gateway.permits("alice", "reports.export"));
    assert_eq!(env.gateway.audit().count(ThreatKind::PermissionDenied), 1);

    let table = env.gateway.set_permission("reports.export", "user", true, "root", T0 + 1).unwrap();
    assert!(table.allows("reports.export", ["user"]));
    assert!(env.gateway.permits("alice", "reports.export"));
    assert!(!env.gateway.permits("quotes-feed", "reports.export"));
    assert!(!env.gateway.permits("alice", "reports.delete"));

    env.gateway.set_permission("reports.export", "user", false, "root", T0 + 2).unwrap();
    assert!(!env.gateway.permits("alice", "reports.export"));
    assert_eq!(env.gateway.audit().count(ThreatKind::AdminChange), 2);
}

#[test]
fn permission_layer_matches_table_membership_for_all_small_tables() {
    let pairs = [
        ("trading.list_quotes", "user"),
        ("trading.list_quotes", "service"),
        ("banking.get_balance", "user"),
        ("banking.get_balance", "service"),
        ("trading.search", "user"),
    ];
    let principals = [("alice", "user"), ("feed", "service")];
    let calls = [
        ("trading.list_quotes", "/svc/trading/list_quotes"),
        ("banking.get_balance", "/svc/banking/get_balance?account=q"),
        ("trading.search", "/svc/trading/search?q=acme"),
    ];
    let ims = ims();
    let certs: Vec<String> = principals.iter().map(|(p, _)| cert(&ims, p, &["trading", "banking"])).collect();
    let mut disagreements = 0;
    for mask in 0u32..(1 << pairs.len()) {
        let mut table = PermissionTable::new();
        for (i, (f, c)) in pairs.iter().enumerate() {
            if mask & (1 << i) != 0 {
                table.set(f, c, true);
            }
        }
        let gw = Gateway::builder(ims.clone()).permissions(table).build().unwrap();
        for (pi, (principal, class)) in principals.iter().enumerate() {
            for (ci, (function, path)) in calls.iter().enumerate() {
                let member = pairs
                    .iter()
                    .enumerate()
                    .any(|(i, (f, c))| mask & (1 << i) != 0 && f == function && c == class);
                let src = format!("10.{mask}.{pi}.{ci}:1");
                let r = gw.handle(&get(&src, path, &certs[pi]), T0 + 1);
                let passed = r.trace.len() > Layer::Permission as usize && r.verdict.layer != Layer::Permission;
                if passed != member || gw.permits(principal, function) != member {
                    disagreements += 1;
                }
                if !member {
                    assert_eq!(r.verdict.reason, "permission");
                }
            }
        }
    }
    assert_eq!(disagreements, 0);
}

#[test]
fn class_directory_grants_admin() {
    let ims = ims();
    let gw = Gateway::builder(ims.clone())
        .classes(ClassDirectory::new().with("admin", "root"))
        .build()
        .unwrap();
    assert_eq!(
        gw.classes_of("root"),
        BTreeSet::from(["admin".to_string(), "user".to_string()])
    );
    assert_eq!(gw.classes_of("feed"), BTreeSet::from(["service".to_string()]));
    assert!(gw.classes_of("nobody").is_empty());
}

#[test]
fn login_issues_usable_certificate() {
    let env = Environment::new(8);
    let login = RawRequest::new("10.0.0.1:1", "/ims/login", 0)
        .body(b"id=alice&secret=alice-secret-1&scope=trading&single_use=1".to_vec());
    let r = env.gateway.handle(&login, T0);
    assert_eq!(r.status, 200, "{r:?}");
    assert_eq!(r.trace, vec![Layer::DosGuard, Layer::Ims]);
    let cert = r.body.trim().to_string();
    let call = get("10.0.0.1:1", "/svc/trading/list_quotes", &cert);
    assert_eq!(env.gateway.handle(&call, T0 + 1).status, 200);
    let again = env.gateway.handle(&call, T0 + 2);
    assert_eq!((again.status, again.verdict.reason.as_str()), (401, "replayed"));

    let bad = RawRequest::new("10.0.0.2:1", "/ims/login", 0).body(b"id=alice&secret=nope".to_vec());
    let r = env.gateway.handle(&bad, T0 + 3);
    assert_eq!((r.status, r.body.as_str()), (401, MSG_AUTH));
    let unknown = RawRequest::new("10.0.0.2:1", "/ims/login", 0).body(b"id=mallory&secret=nope".to_vec());
    assert_eq!(env.gateway.handle(&unknown, T0 + 4).body, r.body);
}

#[test]
fn disabled_principal_is_refused() {
    let env = Environment::new(8);
    let alice = env.login("alice", &["trading"], T0, 3_600_000, false);
    env.ims.set_enabled("alice", false).unwrap();
    let r = env.gateway.handle(&get("10.0.0.1:1", "/svc/trading/list_quotes", &alice), T0 + 1);
    assert_eq!((r.status, r.verdict.layer), (401, Layer::Ims));
}

#[test]
fn concurrent_traffic_keeps_audit_gap_free() {
    let env = Environment::new(12);
    let alice = env.login("alice", &["trading"], T0, 3_600_000, false);
    std::thread::scope(|s| {
        for t in 0..8 {
            let env = &env;
            let alice = &alice;
            s.spawn(move || {
                for i in 0..50u64 {
                    let src = format!("10.{t}.{i}.1:1");
                    let req = if i % 2 == 0 {
                        get(&src, "/svc/trading/export", alice)
                    } else {
                        get(&src, "/svc/trading/list_quotes", alice)
                    };
                    env.gateway.handle(&req, T0 + i);
                }
            });
        }
    });
    let seqs: Vec<u64> = env.gateway.audit().entries().iter().map(|e| e.seq).collect();
    assert_eq!(seqs.len(), 200);
    assert!(seqs.windows(2).all(|w| w[1] == w[0] + 1));
    assert_eq!(env.gateway.invocations(Layer::DosGuard), 400);
    assert_eq!(env.gateway.invocations(Layer::Breaker), 200);
}

#[test]
fn rate_limited_source_is_banned_for_fixed_duration() {
    let ims = ims();
    let gw = Gateway::builder(ims.clone())
        .rate_limit(RateLimitConfig {
            max_requests: 2,
            window_ms: 1_000,
            ban_ms: 5_000,
            max_tracked_sources: 10,
        })
        .build()
        .unwrap();
    let c = cert(&ims, "alice", &["trading"]);
    let req = get("10.0.0.1:1", "/svc/trading/list_quotes", &c);
    assert_eq!(gw.handle(&req, T0).status, 200);
    assert_eq!(gw.handle(&req, T0 + 1).status, 200);
    assert_eq!(gw.handle(&req, T0 + 2).status, 429);
    assert_eq!(gw.handle(&req, T0 + 4_000).status, 429);
    assert_eq!(gw.handle(&req, T0 + 5_002).status, 200);
    // Other ports on the same host share the limit.
    assert_eq!(gw.handle(&get("10.0.0.1:2", "/svc/trading/list_quotes", &c), T0 + 5_003).status, 200);
    assert_eq!(gw.handle(&get("10.0.0.1:3", "/svc/trading/list_quotes", &c), T0 + 5_004).status, 429);
}
