//! Discrete-event simulation of IoT devices feeding one gateway queue that
//! drains over a single uplink.
//!
//! A packet created at time `t` by a device passes the optional ingress
//! shaper, spends the processing delay at the gateway, waits in the bounded
//! queue, is transmitted at link rate and then propagates to the sink:
//!
//! ```text
//! created ── processing ──▶ enqueued ── queueing ──▶ served ── transmission ──▶ departed
//! ```
//!
//! Packets that do not conform to the shaper are held back at their source
//! and never enter the network; they are counted as `throttled`, separately
//! from gateway drops. Telemetry is summarized once per interval and handed
//! to an optional hook, whose returned action takes effect immediately.

mod arrivals;
mod queue;
mod shaper;

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;
use std::io::{self, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::controller::ControlAction;
use crate::error::{Error, Result};
use crate::telemetry::{CongestionLevel, TelemetryRecord};

pub use arrivals::{schedule_arrivals, Arrival};
pub use queue::{Discipline, EnqueueOutcome, GatewayQueue, Priority};
pub use shaper::TokenBucket;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scenario {
    Low,
    Medium,
    High,
}

impl Scenario {
    pub const ALL: [Scenario; 3] = [Scenario::Low, Scenario::Medium, Scenario::High];

    /// Aggregate offered load relative to link capacity.
    pub fn load_factor(self) -> f64 {
        match self {
            Scenario::Low => 0.4,
            Scenario::Medium => 0.8,
            Scenario::High => 1.25,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::Low => "low",
            Scenario::Medium => "medium",
            Scenario::High => "high",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.pad(self.as_str())
    }
}

impl FromStr for Scenario {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Scenario::ALL
            .into_iter()
            .find(|x| x.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| Error::InvalidArgument(format!("unknown scenario `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SizeDistribution {
    Fixed,
    Exponential,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub duration_s: f64,
    pub devices: u32,
    /// Per-device packet rate; when absent it follows from the scenario's
    /// load factor.
    pub device_rate_pps: Option<f64>,
    pub scenario: Scenario,
    /// Fixed size, or the mean of the exponential distribution.
    pub packet_size_bits: f64,
    pub size_distribution: SizeDistribution,
    pub link_capacity_bps: f64,
    pub buffer_packets: usize,
    pub propagation_delay_ms: f64,
    pub processing_delay_ms: f64,
    pub telemetry_interval_s: f64,
    /// Leading share of device indices that form the delay-sensitive class.
    pub priority_fraction: f64,
    /// Shaper rate as a fraction of link capacity.
    pub shaping_rate_fraction: f64,
    pub shaping_burst_packets: f64,
    /// Arrival seed; set per run from the master seed, never read from files.
    #[serde(skip)]
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            duration_s: 300.0,
            devices: 20,
            device_rate_pps: None,
            scenario: Scenario::Medium,
            packet_size_bits: 1000.0,
            size_distribution: SizeDistribution::Fixed,
            link_capacity_bps: 100_000.0,
            buffer_packets: 50,
            propagation_delay_ms: 5.0,
            processing_delay_ms: 1.0,
            telemetry_interval_s: 10.0,
            priority_fraction: 0.25,
            shaping_rate_fraction: 0.8,
            shaping_burst_packets: 10.0,
            seed: 0,
        }
    }
}

impl SimConfig {
    pub fn device_rate_pps(&self) -> f64 {
        self.device_rate_pps.unwrap_or_else(|| {
            self.scenario.load_factor() * self.link_capacity_bps / (f64::from(self.devices) * self.packet_size_bits)
        })
    }

    pub fn offered_load(&self) -> f64 {
        self.device_rate_pps() * f64::from(self.devices) * self.packet_size_bits / self.link_capacity_bps
    }

    pub fn intervals(&self) -> usize {
        (self.duration_s / self.telemetry_interval_s).round() as usize
    }

    pub fn priority_of(&self, device: u32) -> Priority {
        if f64::from(device) < self.priority_fraction * f64::from(self.devices) {
            Priority::High
        } else {
            Priority::Low
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("duration_s", self.duration_s),
            ("packet_size_bits", self.packet_size_bits),
            ("link_capacity_bps", self.link_capacity_bps),
            ("telemetry_interval_s", self.telemetry_interval_s),
            ("shaping_rate_fraction", self.shaping_rate_fraction),
            ("shaping_burst_packets", self.shaping_burst_packets),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be positive, got {v}")));
            }
        }
        for (name, v) in [
            ("propagation_delay_ms", self.propagation_delay_ms),
            ("processing_delay_ms", self.processing_delay_ms),
            ("device_rate_pps", self.device_rate_pps()),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::Config(format!("sim.{name} must be non-negative, got {v}")));
            }
        }
        if self.devices == 0 || self.buffer_packets == 0 {
            return Err(Error::Config("sim.devices and sim.buffer_packets must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.priority_fraction) || self.shaping_rate_fraction > 1.0 {
            return Err(Error::Config("sim fractions must lie in [0, 1]".into()));
        }
        let n = self.duration_s / self.telemetry_interval_s;
        if n < 1.0 || (n - n.round()).abs() > 1e-9 * n {
            return Err(Error::Config(format!(
                "telemetry interval {} s does not divide duration {} s",
                self.telemetry_interval_s, self.duration_s
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Disposition {
    Delivered,
    Dropped,
    /// Held back at the source by the shaper.
    Throttled,
    /// Still inside the gateway when the run ended.
    Pending,
}

impl Disposition {
    pub fn as_str(self) -> &'static str {
        match self {
            Disposition::Delivered => "delivered",
            Disposition::Dropped => "dropped",
            Disposition::Throttled => "throttled",
            Disposition::Pending => "pending",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Packet {
    pub id: u64,
    pub src: u32,
    pub size_bits: f64,
    pub created_s: f64,
    pub enqueued_s: Option<f64>,
    pub served_s: Option<f64>,
    pub departed_s: Option<f64>,
    pub priority: Priority,
    pub disposition: Disposition,
}

/// Per-packet delay components in milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DelayBreakdown {
    pub propagation_ms: f64,
    pub transmission_ms: f64,
    pub queueing_ms: f64,
    pub processing_ms: f64,
}

impl DelayBreakdown {
    /// Fixed summation order: propagation, transmission, queueing, processing.
    pub fn total_ms(&self) -> f64 {
        self.propagation_ms + self.transmission_ms + self.queueing_ms + self.processing_ms
    }
}

pub fn compute_packet_delay(packet: &Packet, config: &SimConfig) -> Result<DelayBreakdown> {
    match (packet.disposition, packet.enqueued_s, packet.served_s) {
        (Disposition::Delivered, Some(enqueued), Some(served)) => Ok(DelayBreakdown {
            propagation_ms: config.propagation_delay_ms,
            transmission_ms: packet.size_bits / config.link_capacity_bps * 1000.0,
            queueing_ms: (served - enqueued) * 1000.0,
            processing_ms: config.processing_delay_ms,
        }),
        _ => Err(Error::InvalidArgument(format!(
            "packet {} was not delivered ({})",
            packet.id,
            packet.disposition.as_str()
        ))),
    }
}

pub fn label_congestion(occupancy: f64) -> CongestionLevel {
    if occupancy < 0.4 {
        CongestionLevel::Low
    } else if occupancy < 0.7 {
        CongestionLevel::Medium
    } else {
        CongestionLevel::High
    }
}

/// Whole-run packet counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Counters {
    /// Packets admitted into the network.
    pub injected: u64,
    pub delivered: u64,
    pub dropped: u64,
    pub queued: u64,
    /// In gateway processing or on the wire.
    pub in_flight: u64,
    pub throttled: u64,
}

impl Counters {
    pub fn is_conserved(&self) -> bool {
        self.injected == self.delivered + self.dropped + self.queued + self.in_flight
    }
}

/// Raw accounting for one telemetry interval.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct IntervalCounters {
    pub index: usize,
    pub start_s: f64,
    pub end_s: f64,
    /// Packets admitted at the source during the interval.
    pub admitted: u64,
    pub admitted_bits: f64,
    pub throttled: u64,
    /// Gateway enqueue attempts, the denominator of interval loss.
    pub gateway_arrivals: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub delivered_bits: f64,
    pub delays: Vec<DelayBreakdown>,
    /// Delays of delivered packets from the delay-sensitive class, ms.
    pub high_priority_delays_ms: Vec<f64>,
    pub low_priority_delays_ms: Vec<f64>,
    pub occupancy: f64,
    pub action: ControlAction,
}

impl IntervalCounters {
    pub fn is_empty(&self) -> bool {
        self.delivered == 0
    }

    pub fn loss_rate(&self) -> f64 {
        if self.gateway_arrivals == 0 {
            0.0
        } else {
            self.dropped as f64 / self.gateway_arrivals as f64
        }
    }

    pub fn throughput_kbps(&self) -> f64 {
        self.delivered_bits / (self.end_s - self.start_s) / 1000.0
    }

    pub fn mean_delay_ms(&self) -> f64 {
        if self.delays.is_empty() {
            0.0
        } else {
            self.delays.iter().map(DelayBreakdown::total_ms).sum::<f64>() / self.delays.len() as f64
        }
    }
}

#[derive(Debug, Clone)]
pub struct SimOutput {
    pub telemetry: Vec<TelemetryRecord>,
    pub intervals: Vec<IntervalCounters>,
    pub packets: Vec<Packet>,
    pub counters: Counters,
    /// Event boundaries at which the conservation identity was checked.
    pub conservation_checks: u64,
    pub conservation_violations: u64,
}

impl SimOutput {
    pub fn loss_rate(&self) -> f64 {
        if self.counters.injected == 0 {
            0.0
        } else {
            self.counters.dropped as f64 / self.counters.injected as f64
        }
    }

    pub fn write_packet_log<W: Write>(&self, out: W) -> io::Result<()> {
        write_packet_log(out, &self.packets)
    }
}

pub const PACKET_LOG_HEADER: &str = "id,src,size_bits,created_s,enqueued_s,served_s,departed_s,priority,disposition";

pub fn write_packet_log<W: Write>(mut out: W, packets: &[Packet]) -> io::Result<()> {
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    writeln!(out, "{PACKET_LOG_HEADER}")?;
    for p in packets {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            p.id,
            p.src,
            p.size_bits,
            p.created_s,
            opt(p.enqueued_s),
            opt(p.served_s),
            opt(p.departed_s),
            p.priority.as_str(),
            p.disposition.as_str()
        )?;
    }
    out.flush()
}

pub fn write_packet_log_file(path: impl AsRef<Path>, packets: &[Packet]) -> Result<()> {
    let path = path.as_ref();
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_packet_log(io::BufWriter::new(file), packets).map_err(|e| Error::io(path, e))
}

/// Called at the end of every interval with its telemetry; the returned
/// action governs the following interval.
pub type IntervalHook<'a> = dyn FnMut(&TelemetryRecord) -> Result<ControlAction> + 'a;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum EventKind {
    Departure,
    Enqueue(u64),
    Tick(usize),
}

impl EventKind {
    /// Same-time ordering: departures, then gateway arrivals, then (outside
    /// the heap) source arrivals, then interval ticks.
    fn rank(self) -> u8 {
        match self {
            EventKind::Departure => 0,
            EventKind::Enqueue(_) => 1,
            EventKind::Tick(_) => 3,
        }
    }
}

const ARRIVAL_RANK: u8 = 2;

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Event {}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Event {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .time
            .total_cmp(&self.time)
            .then(other.kind.rank().cmp(&self.kind.rank()))
            .then(other.seq.cmp(&self.seq))
    }
}

struct Simulator<'c> {
    config: &'c SimConfig,
    now: f64,
    events: BinaryHeap<Event>,
    seq: u64,
    packets: Vec<Packet>,
    queue: GatewayQueue,
    in_service: Option<u64>,
    processing: u64,
    counters: Counters,
    action: ControlAction,
    shaper: Option<TokenBucket>,
    interval: IntervalCounters,
    area: f64,
    last_change: f64,
    checks: u64,
    violations: u64,
}

impl<'c> Simulator<'c> {
    fn new(config: &'c SimConfig) -> Self {
        Self {
            config,
            now: 0.0,
            events: BinaryHeap::new(),
            seq: 0,
            packets: Vec::new(),
            queue: GatewayQueue::new(config.buffer_packets),
            in_service: None,
            processing: 0,
            counters: Counters::default(),
            action: ControlAction::None,
            shaper: None,
            interval: IntervalCounters {
                end_s: config.telemetry_interval_s,
                ..IntervalCounters::default()
            },
            area: 0.0,
            last_change: 0.0,
            checks: 0,
            violations: 0,
        }
    }

    fn push(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event { time, seq: self.seq, kind });
    }

    fn discipline(&self) -> Discipline {
        match self.action {
            ControlAction::QoSAdjustment => Discipline::StrictPriority,
            _ => Discipline::Fifo,
        }
    }

    fn advance(&mut self, to: f64) {
        self.area += self.queue.len() as f64 * (to - self.last_change);
        self.last_change = to;
        self.now = to;
    }

    fn check(&mut self) {
        self.counters.queued = self.queue.len() as u64;
        self.counters.in_flight = self.processing + u64::from(self.in_service.is_some());
        self.checks += 1;
        if !self.counters.is_conserved() {
            self.violations += 1;
        }
    }

    fn apply_action(&mut self, action: ControlAction) {
        if action == self.action {
            return;
        }
        self.shaper = match action {
            ControlAction::TrafficShaping => Some(TokenBucket::new(
                self.config.shaping_rate_fraction * self.config.link_capacity_bps,
                self.config.shaping_burst_packets * self.config.packet_size_bits,
                self.now,
            )),
            _ => None,
        };
        self.action = action;
    }

    fn on_arrival(&mut self, a: Arrival) {
        let id = self.packets.len() as u64;
        let admitted = self.shaper.as_mut().is_none_or(|s| s.try_consume(a.time_s, a.size_bits));
        self.packets.push(Packet {
            id,
            src: a.device,
            size_bits: a.size_bits,
            created_s: a.time_s,
            enqueued_s: None,
            served_s: None,
            departed_s: None,
            priority: self.config.priority_of(a.device),
            disposition: if admitted { Disposition::Pending } else { Disposition::Throttled },
        });
        if !admitted {
            self.counters.throttled += 1;
            self.interval.throttled += 1;
            return;
        }
        self.counters.injected += 1;
        self.interval.admitted += 1;
        self.interval.admitted_bits += a.size_bits;
        self.processing += 1;
        self.push(a.time_s + self.config.processing_delay_ms / 1000.0, EventKind::Enqueue(id));
    }

    fn on_enqueue(&mut self, id: u64) {
        self.processing -= 1;
        self.interval.gateway_arrivals += 1;
        let discipline = self.discipline();
        let packet = &mut self.packets[id as usize];
        packet.enqueued_s = Some(self.now);
        match self.queue.enqueue(id, packet.priority, discipline) {
            EnqueueOutcome::Accepted => {}
            EnqueueOutcome::Dropped => self.drop_packet(id),
            EnqueueOutcome::Displaced { evicted } => self.drop_packet(evicted),
        }
        self.start_service();
    }

    fn drop_packet(&mut self, id: u64) {
        self.packets[id as usize].disposition = Disposition::Dropped;
        self.counters.dropped += 1;
        self.interval.dropped += 1;
    }

    fn start_service(&mut self) {
        if self.in_service.is_some() {
            return;
        }
        if let Some(id) = self.queue.dequeue(self.discipline()) {
            let packet = &mut self.packets[id as usize];
            packet.served_s = Some(self.now);
            let done = self.now + packet.size_bits / self.config.link_capacity_bps;
            self.in_service = Some(id);
            self.push(done, EventKind::Departure);
        }
    }

    fn on_departure(&mut self) {
        let id = self.in_service.take().expect("departure without a packet in service");
        let packet = &mut self.packets[id as usize];
        packet.departed_s = Some(self.now);
        packet.disposition = Disposition::Delivered;
        let delay = compute_packet_delay(packet, self.config).expect("delivered packet");
        let priority = packet.priority;
        self.counters.delivered += 1;
        self.interval.delivered += 1;
        self.interval.delivered_bits += packet.size_bits;
        self.interval.delays.push(delay);
        match priority {
            Priority::High => self.interval.high_priority_delays_ms.push(delay.total_ms()),
            Priority::Low => self.interval.low_priority_delays_ms.push(delay.total_ms()),
        }
        self.start_service();
    }

    /// Closes the current interval and returns its telemetry record.
    fn emit_telemetry(&mut self, index: usize) -> (TelemetryRecord, IntervalCounters) {
        let width = self.config.telemetry_interval_s;
        let mut done = std::mem::replace(
            &mut self.interval,
            IntervalCounters {
                index: index + 1,
                start_s: (index + 1) as f64 * width,
                end_s: (index + 2) as f64 * width,
                ..IntervalCounters::default()
            },
        );
        done.index = index;
        done.action = self.action;
        done.occupancy = (self.area / width / self.config.buffer_packets as f64).clamp(0.0, 1.0);
        self.area = 0.0;
        let record = TelemetryRecord {
            timestamp_s: done.end_s,
            throughput_kbps: done.throughput_kbps(),
            delay_ms: done.mean_delay_ms(),
            packet_loss_rate: done.loss_rate(),
            queue_occupancy: done.occupancy,
            active_devices: self.config.devices,
            label: label_congestion(done.occupancy),
        };
        (record, done)
    }
}

/// Runs the scenario with no controller.
pub fn run(config: &SimConfig) -> Result<SimOutput> {
    run_with_hook(config, None)
}

/// Runs the scenario, invoking `hook` at every interval boundary.
pub fn run_with_hook(config: &SimConfig, mut hook: Option<&mut IntervalHook<'_>>) -> Result<SimOutput> {
    config.validate()?;
    let arrivals = schedule_arrivals(config);
    let mut sim = Simulator::new(config);
    let intervals = config.intervals();
    for k in 0..intervals {
        sim.push((k + 1) as f64 * config.telemetry_interval_s, EventKind::Tick(k));
    }
    let mut telemetry = Vec::with_capacity(intervals);
    let mut interval_log = Vec::with_capacity(intervals);
    let mut next_arrival = 0;

    loop {
        let arrival = arrivals.get(next_arrival);
        let take_arrival = match (arrival, sim.events.peek()) {
            (None, None) => break,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(a), Some(e)) => match a.time_s.total_cmp(&e.time) {
                Ordering::Less => true,
                Ordering::Greater => false,
                Ordering::Equal => ARRIVAL_RANK < e.kind.rank(),
            },
        };
        if take_arrival {
            let a = *arrival.expect("checked");
            next_arrival += 1;
            sim.advance(a.time_s);
            sim.on_arrival(a);
        } else {
            let event = sim.events.pop().expect("checked");
            sim.advance(event.time);
            match event.kind {
                EventKind::Departure => sim.on_departure(),
                EventKind::Enqueue(id) => sim.on_enqueue(id),
                EventKind::Tick(k) => {
                    let (record, counters) = sim.emit_telemetry(k);
                    if let Some(h) = hook.as_deref_mut() {
                        let action = h(&record)?;
                        sim.apply_action(action);
                    }
                    telemetry.push(record);
                    interval_log.push(counters);
                    if k + 1 == intervals {
                        sim.check();
                        break;
                    }
                }
            }
        }
        sim.check();
    }

    Ok(SimOutput {
        telemetry,
        intervals: interval_log,
        counters: sim.counters,
        packets: sim.packets,
        conservation_checks: sim.checks,
        conservation_violations: sim.violations,
    })
}
