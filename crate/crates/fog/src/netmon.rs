//! Network condition topics, published only while someone listens.

use std::sync::Arc;
use std::time::{Duration, Instant};

use fog_core::stats::{Ewma, NetworkStats, DEFAULT_EWMA_ALPHA};
use fog_core::table::RegistryTable;
use fog_core::topic::TopicName;
use fog_core::NodeId;

use crate::channel::ChannelSlot;
use crate::net;
use crate::node::{Node, NodeError};
use crate::signal::Signal;

pub const LATENCY_TOPIC: &str = "/fogros/latency";
pub const THROUGHPUT_TOPIC: &str = "/fogros/throughput";

#[derive(Debug, Clone, Copy)]
pub struct MonitorConfig {
    pub interval: Duration,
    pub alpha: f64,
}

impl Default for MonitorConfig {
    fn default() -> Self {
        MonitorConfig {
            interval: Duration::from_secs(1),
            alpha: DEFAULT_EWMA_ALPHA,
        }
    }
}

/// True if a node other than `me` subscribes to `topic`.
pub fn has_subscribers(table: &RegistryTable, topic: &TopicName, me: NodeId) -> bool {
    table
        .get(topic)
        .is_some_and(|r| r.subscribers.keys().any(|id| *id != me))
}

/// Runs until `stop`. Each interval the registry is checked for monitor
/// subscribers; with none, nothing at all is sent over the channel.
pub fn run_monitor(
    node: Node,
    slot: Arc<ChannelSlot>,
    stop: Arc<Signal>,
    config: MonitorConfig,
) -> Result<(), NodeError> {
    let lat_topic = TopicName::new(LATENCY_TOPIC)?;
    let thr_topic = TopicName::new(THROUGHPUT_TOPIC)?;
    let lat_pub = node.advertise_topic(&lat_topic)?;
    let thr_pub = node.advertise_topic(&thr_topic)?;
    let mut ewma = Ewma::new(config.alpha);
    let mut next = Instant::now();
    loop {
        if stop.sleep_until(next) {
            return Ok(());
        }
        next += config.interval;
        let now = Instant::now();
        if next < now {
            next = now + config.interval;
        }
        let Ok(table) = node.snapshot() else { continue };
        let want_lat = has_subscribers(&table, &lat_topic, node.id());
        let want_thr = has_subscribers(&table, &thr_topic, node.id());
        if !want_lat && !want_thr {
            continue;
        }
        let stale = if want_lat {
            match slot.probe(config.interval.mul_f64(0.8)) {
                Some(rtt) => {
                    ewma.update(rtt.as_secs_f64() * 1e6);
                    false
                }
                None => true,
            }
        } else {
            !slot.is_up()
        };
        let ts = net::now_ns();
        let (rin, rout) = slot.counters().rates(ts);
        let stats = NetworkStats {
            rtt_us: ewma.value().unwrap_or(0.0).round() as u64,
            bytes_per_s_in: rin.round() as u64,
            bytes_per_s_out: rout.round() as u64,
            timestamp_ns: ts,
            stale,
        };
        let rec = stats.encode();
        if want_lat {
            lat_pub.publish(&rec)?;
        }
        if want_thr {
            thr_pub.publish(&rec)?;
        }
    }
}
