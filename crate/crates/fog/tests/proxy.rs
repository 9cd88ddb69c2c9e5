use std::time::{Duration, Instant};

use fog::faultlink::FaultLink;
use fog::node::{Node, NodeConfig};
use fog::proxy::{ChannelEnd, ProxyConfig, ProxyEndpoint, TopicPolicy};
use fog::registry::{RegistryConfig, RegistryServer};
use fog_core::codec::{FrameKind, Origin};
use fog_core::discovery::Direction;
use fog_core::secure::DeploymentSecret;
use fog_core::TopicName;

struct Pair {
    edge_reg: RegistryServer,
    cloud_reg: RegistryServer,
    edge: ProxyEndpoint,
    cloud: ProxyEndpoint,
}

fn registry() -> RegistryServer {
    RegistryServer::spawn("127.0.0.1:0".parse().unwrap(), RegistryConfig::default()).unwrap()
}

fn pair_with(trace: bool, policy: TopicPolicy, relay: Option<&mut Option<FaultLink>>) -> Pair {
    let edge_reg = registry();
    let cloud_reg = registry();
    let secret = DeploymentSecret([9; 32]);
    let mut cc = ProxyConfig::new(
        Origin::Cloud,
        Some(cloud_reg.addr().to_string()),
        ChannelEnd::Listen("127.0.0.1:0".parse().unwrap()),
        secret.clone(),
    );
    cc.trace = trace;
    cc.policy = policy.clone();
    let cloud = ProxyEndpoint::spawn(cc).unwrap();
    let mut target = cloud.listen_addr().unwrap().to_string();
    if let Some(slot) = relay {
        let link = FaultLink::start(&target).unwrap();
        target = link.addr().to_string();
        *slot = Some(link);
    }
    let mut ec = ProxyConfig::new(
        Origin::Edge,
        Some(edge_reg.addr().to_string()),
        ChannelEnd::Connect(target),
        secret,
    );
    ec.trace = trace;
    ec.policy = policy;
    let edge = ProxyEndpoint::spawn(ec).unwrap();
    assert!(wait_for(|| edge.is_connected() && cloud.is_connected(), Duration::from_secs(5)));
    Pair {
        edge_reg,
        cloud_reg,
        edge,
        cloud,
    }
}

fn node(name: &str, reg: &RegistryServer, origin: Origin, trace: bool) -> Node {
    Node::start(
        NodeConfig::new(name, &reg.addr().to_string())
            .origin(origin)
            .trace(trace),
    )
    .unwrap()
}

fn wait_for(mut f: impl FnMut() -> bool, timeout: Duration) -> bool {
    let end = Instant::now() + timeout;
    while Instant::now() < end {
        if f() {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    f()
}

fn topic(s: &str) -> TopicName {
    s.parse().unwrap()
}

#[test]
fn edge_to_cloud_bridge_with_trace() {
    let p = pair_with(true, TopicPolicy::Auto, None);
    let talker = node("talker", &p.edge_reg, Origin::Edge, true);
    let listener = node("listener", &p.cloud_reg, Origin::Cloud, true);
    let publ = talker.advertise("/chatter").unwrap();
    let sub = listener.subscribe("/chatter", 1024).unwrap();
    assert!(wait_for(
        || p.edge.bridge_table().contains(&topic("/chatter"), Direction::EdgeToCloud)
            && p.cloud.bridge_table().contains(&topic("/chatter"), Direction::EdgeToCloud)
            && publ.connected_subscribers() == 1,
        Duration::from_secs(5)
    ));
    // The cloud proxy's publisher must be linked to the listener too.
    std::thread::sleep(Duration::from_millis(200));
    for i in 0..200u32 {
        publ.publish(&i.to_be_bytes()).unwrap();
    }
    for i in 0..200u64 {
        let env = sub.recv_timeout(Duration::from_secs(5)).expect("bridged message");
        assert_eq!(env.seq, i + 1);
        assert_eq!(env.publisher_id, talker.id());
        assert_eq!(env.origin, Origin::Edge);
        assert_eq!(env.trace, vec!["talker", "proxy:edge", "proxy:cloud"]);
    }
    drop(sub);
    assert!(wait_for(|| p.edge.bridge_table().is_empty(), Duration::from_secs(2)));
    let before = p.edge.counters().sent(FrameKind::Data);
    for _ in 0..20 {
        publ.publish(b"late").unwrap();
    }
    std::thread::sleep(Duration::from_millis(300));
    assert_eq!(p.edge.counters().sent(FrameKind::Data), before);
}

#[test]
fn explicit_policy_limits_topics() {
    let p = pair_with(false, TopicPolicy::Explicit(vec![topic("/a")]), None);
    let e = node("e", &p.edge_reg, Origin::Edge, false);
    let c = node("c", &p.cloud_reg, Origin::Cloud, false);
    let _pa = e.advertise("/a").unwrap();
    let _pb = e.advertise("/b").unwrap();
    let _sa = c.subscribe("/a", 4).unwrap();
    let _sb = c.subscribe("/b", 4).unwrap();
    assert!(wait_for(|| !p.edge.bridge_table().is_empty(), Duration::from_secs(3)));
    std::thread::sleep(Duration::from_millis(1200));
    let t = p.edge.bridge_table();
    assert_eq!(t.len(), 1);
    assert!(t.contains(&topic("/a"), Direction::EdgeToCloud));
}

#[test]
fn both_directions_cross_exactly_once() {
    let p = pair_with(false, TopicPolicy::Auto, None);
    let e = node("e", &p.edge_reg, Origin::Edge, false);
    let c = node("c", &p.cloud_reg, Origin::Cloud, false);
    let pe = e.advertise("/t").unwrap();
    let pc = c.advertise("/t").unwrap();
    let se = e.subscribe("/t", 1024).unwrap();
    let sc = c.subscribe("/t", 1024).unwrap();
    assert!(wait_for(|| p.edge.bridge_table().len() == 2 && p.cloud.bridge_table().len() == 2, Duration::from_secs(5)));
    std::thread::sleep(Duration::from_millis(300));
    let d0 = p.edge.counters();
    for _ in 0..50 {
        pe.publish(b"e").unwrap();
        pc.publish(b"c").unwrap();
    }
    std::thread::sleep(Duration::from_millis(800));
    let d1 = p.edge.counters();
    assert_eq!(d1.sent(FrameKind::Data) - d0.sent(FrameKind::Data), 50);
    assert_eq!(d1.received(FrameKind::Data) - d0.received(FrameKind::Data), 50);
    let count = |s: &fog::node::SubscriptionHandle| std::iter::from_fn(|| s.try_recv()).count();
    assert_eq!(count(&se), 100);
    assert_eq!(count(&sc), 100);
}

#[test]
fn idle_channel_carries_no_data_or_ping() {
    let p = pair_with(false, TopicPolicy::Auto, None);
    let e = node("e", &p.edge_reg, Origin::Edge, false);
    let _unmatched = e.advertise("/nobody").unwrap();
    std::thread::sleep(Duration::from_millis(500));
    let a = p.edge.counters();
    std::thread::sleep(Duration::from_secs(2));
    let b = p.edge.counters();
    assert_eq!(a.total(FrameKind::Data), b.total(FrameKind::Data));
    assert_eq!(b.total(FrameKind::Ping), 0);
    assert!(b.sent(FrameKind::Ctrl) > a.sent(FrameKind::Ctrl));
}

#[test]
fn latency_samples_when_subscribed() {
    let p = pair_with(false, TopicPolicy::Auto, None);
    let watcher = node("watcher", &p.edge_reg, Origin::Edge, false);
    let sub = watcher.subscribe(fog::netmon::LATENCY_TOPIC, 64).unwrap();
    let deadline = std::time::Instant::now() + Duration::from_secs(10);
    let stats = loop {
        let left = deadline.saturating_duration_since(std::time::Instant::now());
        let msg = sub.recv_timeout(left).expect("sample");
        let stats = fog_core::stats::NetworkStats::decode(&msg.payload).unwrap();
        if !stats.stale {
            break stats;
        }
    };
    assert!(stats.rtt_ms() > 0.0 && stats.rtt_ms() < 100.0, "{stats:?}");
    assert!(p.edge.counters().sent(FrameKind::Ping) >= 1);
}

#[test]
fn rejoin_after_channel_cut() {
    let mut relay = None;
    let p = pair_with(false, TopicPolicy::Auto, Some(&mut relay));
    let relay = relay.unwrap();
    let e = node("e", &p.edge_reg, Origin::Edge, false);
    let c = node("c", &p.cloud_reg, Origin::Cloud, false);
    let publ = e.advertise("/s").unwrap();
    let sub = c.subscribe("/s", 4096).unwrap();
    assert!(wait_for(|| p.cloud.bridge_table().len() == 1, Duration::from_secs(5)));
    std::thread::sleep(Duration::from_millis(300));
    let stop = std::sync::Arc::new(std::sync::atomic::AtomicBool::new(false));
    let st = stop.clone();
    let h = std::thread::spawn(move || {
        while !st.load(std::sync::atomic::Ordering::SeqCst) {
            publ.publish(b"tick").unwrap();
            std::thread::sleep(Duration::from_millis(10));
        }
        publ.last_seq()
    });
    std::thread::sleep(Duration::from_millis(500));
    relay.sever_for(Duration::from_secs(2));
    let cut = Instant::now();
    let mut last = 0;
    let mut resumed = None;
    while cut.elapsed() < Duration::from_secs(12) {
        if let Some(env) = sub.recv_timeout(Duration::from_millis(100)) {
            assert!(env.seq > last, "seq went from {last} to {}", env.seq);
            last = env.seq;
            if cut.elapsed() > Duration::from_secs(2) && resumed.is_none() {
                resumed = Some(cut.elapsed());
                break;
            }
        }
    }
    stop.store(true, std::sync::atomic::Ordering::SeqCst);
    h.join().unwrap();
    let resumed = resumed.expect("delivery resumed");
    assert!(resumed < Duration::from_secs(10), "{resumed:?}");
    assert!(p.edge.sessions() >= 2);
}
