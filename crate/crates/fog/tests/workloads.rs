use std::sync::Arc;
use std::time::{Duration, Instant};

use fog::node::{Node, NodeConfig};
use fog::registry::{RegistryConfig, RegistryServer};
use fog::signal::Signal;
use fog::workloads::{
    parallel_kernel, run_compute, run_sink, run_source, ComputeArgs, ComputeResult, Request, SinkArgs, SourceArgs,
    DEFAULT_FRAME_SIZE, REQUEST_TOPIC, RESULT_TOPIC, SENSOR_TOPIC,
};
use fog_core::kernel::{kernel_serial, DEFAULT_SEED};

fn registry() -> RegistryServer {
    RegistryServer::spawn("127.0.0.1:0".parse().unwrap(), RegistryConfig::default()).unwrap()
}

#[test]
fn source_keeps_its_rate() {
    let reg = registry();
    let addr = reg.addr().to_string();
    let sink_node = Node::start(NodeConfig::new("sink", &addr)).unwrap();
    let stop = Arc::new(Signal::default());
    let st = stop.clone();
    let sink = std::thread::spawn(move || {
        let mut times = Vec::new();
        run_sink(&sink_node, &SinkArgs { topic: "/frames".into(), count: 21 }, &st, |s| times.push(s.received_at)).unwrap();
        times
    });
    let src = Node::start(NodeConfig::new("source", &addr)).unwrap();
    std::thread::sleep(Duration::from_millis(300));
    let args = SourceArgs {
        topic: "/frames".into(),
        rate: 10.0,
        size: 1024,
        items: 0,
        count: 21,
    };
    let t0 = Instant::now();
    assert_eq!(run_source(&src, &args, &stop).unwrap(), 21);
    let elapsed = t0.elapsed().as_secs_f64();
    let times = sink.join().unwrap();
    assert!(times.len() >= 19, "{} frames", times.len());
    // 21 frames at 10 Hz span 2 s
    assert!((elapsed - 2.0).abs() < 0.2, "{elapsed}");
    let span = times.last().unwrap().duration_since(times[0]).as_secs_f64() / (times.len() - 1) as f64;
    assert!((span - 0.1).abs() < 0.02, "mean interval {span}");
}

#[test]
fn compute_answers_with_the_serial_value() {
    let reg = registry();
    let addr = reg.addr().to_string();
    let stop = Arc::new(Signal::default());
    let mut servers = Vec::new();
    for workers in [1u32, 8] {
        let node = Node::start(NodeConfig::new(&format!("compute{workers}"), &addr)).unwrap();
        let st = stop.clone();
        let args = ComputeArgs {
            input: format!("{REQUEST_TOPIC}{workers}"),
            output: format!("{RESULT_TOPIC}{workers}"),
            workers: Some(workers),
            items: 0,
            seed: DEFAULT_SEED,
        };
        servers.push(std::thread::spawn(move || run_compute(&node, &args, &st).unwrap()));
    }
    let client = Node::start(NodeConfig::new("client", &addr)).unwrap();
    let want = kernel_serial(DEFAULT_SEED, 5_000);
    for workers in [1u32, 8] {
        let p = client.advertise(&format!("{REQUEST_TOPIC}{workers}")).unwrap();
        let s = client.subscribe(&format!("{RESULT_TOPIC}{workers}"), 4).unwrap();
        let deadline = Instant::now() + Duration::from_secs(10);
        let res = loop {
            assert!(Instant::now() < deadline, "no answer from {workers} workers");
            p.publish(&Request { id: 9, items: 5_000 }.encode(64)).unwrap();
            if let Some(env) = s.recv_timeout(Duration::from_millis(300)) {
                break ComputeResult::decode(&env.payload).unwrap();
            }
        };
        assert_eq!((res.id, res.value, res.workers), (9, want, workers));
        assert!(res.compute_ns > 0);
    }
    assert_eq!(parallel_kernel(DEFAULT_SEED, 5_000, 8), want);
    stop.stop();
    for s in servers {
        assert!(s.join().unwrap() >= 1);
    }
}

#[test]
fn camera_frames_flow_through_compute_at_ten_hertz() {
    let reg = registry();
    let addr = reg.addr().to_string();
    let stop = Arc::new(Signal::default());
    let compute_node = Node::start(NodeConfig::new("compute", &addr)).unwrap();
    let st = stop.clone();
    let compute = std::thread::spawn(move || {
        let args = ComputeArgs {
            input: SENSOR_TOPIC.into(),
            output: RESULT_TOPIC.into(),
            workers: Some(1),
            items: 2_000,
            seed: DEFAULT_SEED,
        };
        run_compute(&compute_node, &args, &st).unwrap()
    });
    let sink_node = Node::start(NodeConfig::new("sink", &addr)).unwrap();
    let st = stop.clone();
    let sink = std::thread::spawn(move || {
        let mut times = Vec::new();
        run_sink(&sink_node, &SinkArgs { topic: RESULT_TOPIC.into(), count: 0 }, &st, |s| times.push(s.received_at))
            .unwrap();
        times
    });
    let src = Node::start(NodeConfig::new("source", &addr)).unwrap();
    std::thread::sleep(Duration::from_millis(500));
    let args = SourceArgs {
        topic: SENSOR_TOPIC.into(),
        rate: 10.0,
        size: DEFAULT_FRAME_SIZE,
        items: 0,
        count: 40,
    };
    run_source(&src, &args, &stop).unwrap();
    std::thread::sleep(Duration::from_millis(500));
    stop.stop();
    let times = sink.join().unwrap();
    compute.join().unwrap();
    // skip the first second while connections settle
    let t0 = times[0];
    let window: Vec<_> = times.iter().filter(|t| t.duration_since(t0) >= Duration::from_secs(1)).collect();
    let span = window.last().unwrap().duration_since(*window[0]).as_secs_f64();
    let per_s = (window.len() - 1) as f64 / span;
    assert!((9.0..=11.0).contains(&per_s), "{per_s} results/s");
}
