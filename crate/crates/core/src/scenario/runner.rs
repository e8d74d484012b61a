//! Builds the nodes of a scenario and drives the bus until all traffic is done.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attack::{BitModifier, BitModifierConfig, InjectionStrategy, Injector, InjectorConfig, Jammer};
use crate::bits::BitString;
use crate::bpmac::BpMacKeys;
use crate::bus::{BitTimingConfig, Bus, BusNode, BusTopology, DriveLevel, WireLevel, WireTrace};
use crate::cipher::key_from_hex;
use crate::node::{
    is_internal, AuthFrameLog, Authenticator, AuthenticatorConfig, Ecu, EcuConfig, NodeEvent,
};
use crate::node::recovery::RecoveryChannel;
use crate::secoc::GroupKey;

use super::config::{parse_id_key, AttackConfig, ConfigError, FaultType, Role, ScenarioConfig};
use super::metrics::{FlipCounts, FrameOutcome, FrameRecord, RunMetrics, ScenarioEvent};

/// A node of any role.
pub enum SimNode {
    Ecu(Ecu),
    Authenticator(Authenticator),
    Injector(Injector),
    BitModifier(BitModifier),
    Jammer(Jammer),
}

impl BusNode for SimNode {
    fn drive(&mut self) -> DriveLevel {
        match self {
            SimNode::Ecu(n) => n.drive(),
            SimNode::Authenticator(n) => n.drive(),
            SimNode::Injector(n) => n.drive(),
            SimNode::BitModifier(n) => n.drive(),
            SimNode::Jammer(n) => n.drive(),
        }
    }

    fn observe(&mut self, level: WireLevel) {
        match self {
            SimNode::Ecu(n) => n.observe(level),
            SimNode::Authenticator(n) => n.observe(level),
            SimNode::Injector(n) => n.observe(level),
            SimNode::BitModifier(n) => n.observe(level),
            SimNode::Jammer(n) => n.observe(level),
        }
    }

    fn may_erase(&self) -> bool {
        matches!(self, SimNode::Authenticator(_) | SimNode::BitModifier(_))
    }
}

impl SimNode {
    fn has_events(&self) -> bool {
        match self {
            SimNode::Ecu(n) => n.has_events(),
            SimNode::Authenticator(n) => n.has_events(),
            SimNode::Injector(n) => n.has_events(),
            _ => false,
        }
    }

    fn take_events(&mut self, out: &mut Vec<NodeEvent>) {
        match self {
            SimNode::Ecu(n) => out.extend(n.drain_events()),
            SimNode::Authenticator(n) => out.extend(n.drain_events()),
            SimNode::Injector(n) => out.extend(n.drain_events()),
            _ => {}
        }
    }

    fn is_quiet(&self) -> bool {
        match self {
            SimNode::Ecu(n) => n.is_quiet(),
            SimNode::Injector(n) => n.backlog() == 0 && n.controller().is_idle(),
            SimNode::Authenticator(n) => !n.is_connected() || n.controller().is_idle(),
            SimNode::BitModifier(_) => true,
            SimNode::Jammer(n) => !n.is_armed(),
        }
    }
}

/// Keys of one scenario: explicit hex keys where given, the rest derived from the seed.
#[derive(Debug, Clone)]
pub struct KeyStore {
    pub group: GroupKey,
    pub source: BTreeMap<u16, BpMacKeys>,
}

impl KeyStore {
    pub fn build(cfg: &ScenarioConfig) -> Result<Self, ConfigError> {
        let mut group = None;
        let mut explicit: BTreeMap<u16, (String, BpMacKeys)> = BTreeMap::new();
        for (i, n) in cfg.nodes.iter().enumerate() {
            let Some(keys) = &n.keys else { continue };
            if let Some(g) = &keys.group {
                let path = format!("nodes[{i}].keys.group");
                let k = key_from_hex(g).map_err(|e| ConfigError::new(&path, e.to_string()))?;
                match group {
                    Some(prev) if prev != k => return Err(ConfigError::new(path, "conflicts with another node's group key")),
                    _ => group = Some(k),
                }
            }
            for (id, v) in &keys.source {
                let path = format!("nodes[{i}].keys.source.{id}");
                let can_id = parse_id_key(id).ok_or_else(|| ConfigError::new(&path, "key is not a CAN ID"))?;
                let k1 = key_from_hex(&v.k1).map_err(|e| ConfigError::new(format!("{path}.k1"), e.to_string()))?;
                let k2 = key_from_hex(&v.k2).map_err(|e| ConfigError::new(format!("{path}.k2"), e.to_string()))?;
                let keys = BpMacKeys::new(k1, k2).map_err(|e| ConfigError::new(&path, e.to_string()))?;
                if let Some((prev_path, prev)) = explicit.get(&can_id) {
                    if *prev != keys {
                        return Err(ConfigError::new(path, format!("conflicts with {prev_path}")));
                    }
                }
                explicit.insert(can_id, (path, keys));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let group = GroupKey::new(group.unwrap_or_else(|| rng.gen()));
        let mut source = BTreeMap::new();
        for id in cfg.secured_ids() {
            let keys = match explicit.remove(&id) {
                Some((_, k)) => k,
                None => derive_source_keys(cfg.seed, id),
            };
            source.insert(id, keys);
        }
        Ok(Self { group, source })
    }
}

fn derive_source_keys(seed: u64, can_id: u16) -> BpMacKeys {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(can_id) + 1);
    loop {
        if let Ok(k) = BpMacKeys::new(rng.gen(), rng.gen()) {
            return k;
        }
    }
}

/// Options that do not change the simulated behavior.
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Records the resolved wire level at this bus position.
    pub trace_position_m: Option<f64>,
    pub collect_auth_logs: bool,
    /// Hard stop, in quanta.
    pub max_quanta: Option<u64>,
}

pub struct RunResult {
    pub metrics: RunMetrics,
    pub frames: Vec<FrameRecord>,
    pub events: Vec<ScenarioEvent>,
    pub auth_logs: Vec<AuthFrameLog>,
    pub trace: Option<WireTrace>,
    pub node_names: Vec<String>,
    /// Verdicts per receiver, in arrival order: `(node, can_id, accepted, counter)`.
    pub verdicts: Vec<(usize, u16, bool, Option<u64>)>,
}

struct Release {
    quantum: u64,
    stream: usize,
    node: usize,
    can_id: u16,
    secured: bool,
    data: BitString,
}

pub struct Scenario {
    cfg: ScenarioConfig,
    timing: BitTimingConfig,
    topology: BusTopology,
    keys: KeyStore,
}

impl Scenario {
    pub fn new(cfg: ScenarioConfig) -> Result<Self, ConfigError> {
        cfg.validate()?;
        let timing = cfg.timing()?;
        let topology = BusTopology {
            length_m: cfg.bus.length_m,
            signal_speed_ns_per_m: cfg.bus.signal_speed_ns_per_m,
            positions_m: cfg.nodes.iter().map(|n| n.position_m).collect(),
        };
        topology.validate().map_err(|e| ConfigError::new("bus", e.to_string()))?;
        let keys = KeyStore::build(&cfg)?;
        Ok(Self {
            cfg,
            timing,
            topology,
            keys,
        })
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.cfg
    }

    pub fn keys(&self) -> &KeyStore {
        &self.keys
    }

    fn recovery_channels(&self) -> Vec<RecoveryChannel> {
        self.cfg
            .nodes
            .iter()
            .filter(|n| n.role == Role::Transmitter)
            .filter_map(|n| {
                n.recovery.map(|r| RecoveryChannel {
                    pairwise_id: r.pairwise_id,
                    broadcast_id: r.broadcast_id,
                    ids: n.ids.clone(),
                })
            })
            .collect()
    }

    fn build_nodes(&self) -> Result<Vec<SimNode>, ConfigError> {
        let cfg = &self.cfg;
        let secured = cfg.secured_ids();
        let channels = self.recovery_channels();
        let mut nodes = Vec::with_capacity(cfg.nodes.len());
        let mut receivers = 0u8;
        for (i, n) in cfg.nodes.iter().enumerate() {
            let node = match n.role {
                Role::Transmitter | Role::Receiver | Role::Legacy => {
                    let mut e = EcuConfig::new(receivers, self.timing);
                    receivers += u8::from(n.role == Role::Receiver);
                    e.max_retransmissions = cfg.max_retransmissions;
                    e.tag_width = cfg.tag_width;
                    e.zero_source_tag = n.zero_source_tag;
                    match n.role {
                        Role::Transmitter => {
                            e.group_key = Some(self.keys.group.clone());
                            let mut ids: Vec<u16> = n.ids.clone();
                            if let Some(r) = n.recovery {
                                ids.push(r.broadcast_id);
                                e.recovery_tx = channels.iter().find(|c| c.pairwise_id == r.pairwise_id).cloned();
                            }
                            e.source_keys = ids.iter().map(|id| (*id, self.keys.source[id].clone())).collect();
                        }
                        Role::Receiver => {
                            e.group_key = Some(self.keys.group.clone());
                            e.listen_secured = n.ids.iter().copied().collect();
                            e.listen_plain = n.plain_ids.iter().copied().collect();
                            e.recovery_rx = channels
                                .iter()
                                .filter(|c| c.ids.iter().any(|id| e.listen_secured.contains(id)))
                                .cloned()
                                .collect();
                        }
                        _ => {}
                    }
                    let ecu = Ecu::new(n.name.clone(), e).map_err(|err| ConfigError::new(format!("nodes[{i}]"), err.to_string()))?;
                    SimNode::Ecu(ecu)
                }
                Role::Authenticator => {
                    let held: BTreeSet<u16> = if n.ids.is_empty() {
                        secured.clone()
                    } else {
                        n.ids.iter().copied().collect()
                    };
                    let ac = AuthenticatorConfig {
                        timing: self.timing,
                        id_to_key: held
                            .iter()
                            .filter_map(|id| self.keys.source.get(id).map(|k| (*id, k.clone())))
                            .collect(),
                        caiba_enabled: secured.clone(),
                        responsible_ids: if n.backup { BTreeSet::new() } else { held },
                        tag_width: cfg.tag_width,
                        recovery: channels.clone(),
                    };
                    let a = Authenticator::new(n.name.clone(), ac)
                        .map_err(|err| ConfigError::new(format!("nodes[{i}]"), err.to_string()))?;
                    SimNode::Authenticator(a)
                }
                Role::Attacker => {
                    let caps = n.capabilities.clone().unwrap_or_default();
                    let attack = n.attack.clone().expect("validated attacker");
                    let seed = cfg.seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(i as u64 + 1));
                    let injector = |target_id: u16, strategy: InjectionStrategy| {
                        SimNode::Injector(Injector::new(
                            n.name.clone(),
                            InjectorConfig {
                                timing: self.timing,
                                target_id,
                                strategy,
                                tag_width: cfg.tag_width,
                                group_key: caps.knows_group_key.then(|| self.keys.group.clone()),
                                source_keys: self
                                    .keys
                                    .source
                                    .iter()
                                    .filter(|(id, _)| caps.holds_source_key(**id))
                                    .map(|(id, k)| (*id, k.clone()))
                                    .collect(),
                                seed,
                            },
                        ))
                    };
                    match attack {
                        AttackConfig::Masquerade { target_id, guess } => {
                            injector(target_id, InjectionStrategy::Masquerade { guess })
                        }
                        AttackConfig::CompromisedAuthenticator { target_id } => {
                            injector(target_id, InjectionStrategy::CompromisedAuthenticator)
                        }
                        AttackConfig::Replay { target_id, lag } => injector(target_id, InjectionStrategy::Replay { lag }),
                        AttackConfig::BitModify { target_id, flip_indices } => SimNode::BitModifier(BitModifier::new(
                            n.name.clone(),
                            BitModifierConfig {
                                timing: self.timing,
                                target_id,
                                flip_indices,
                            },
                        )),
                        AttackConfig::Jam => SimNode::Jammer(Jammer::new(n.name.clone(), self.timing)),
                    }
                }
            };
            nodes.push(node);
        }
        Ok(nodes)
    }

    fn releases(&self) -> Vec<Release> {
        let cfg = &self.cfg;
        let qpb = u64::from(self.timing.quanta_per_bit);
        let mut out = Vec::new();
        for (s, t) in cfg.traffic.iter().enumerate() {
            let node = cfg.sender_of(t).expect("validated sender");
            let n = &cfg.nodes[node];
            let secured = n.role == Role::Attacker || (n.role == Role::Transmitter && n.ids.contains(&t.can_id));
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0x1_0000 + s as u64);
            let fixed = (t.payload != "random").then(|| hex::decode(&t.payload).expect("validated hex"));
            for j in 0..t.count {
                let data = match (&fixed, secured) {
                    (Some(b), true) => BitString::from_bytes(b).slice(0..t.app_bits),
                    (Some(b), false) => BitString::from_bytes(b),
                    (None, true) => BitString::from_uint(rng.gen::<u64>() & ((1u64 << t.app_bits) - 1), t.app_bits),
                    (None, false) => {
                        let bytes: Vec<u8> = (0..t.dlc).map(|_| rng.gen()).collect();
                        BitString::from_bytes(&bytes)
                    }
                };
                out.push(Release {
                    quantum: (t.offset_bits + j * t.period_bits) * qpb,
                    stream: s,
                    node,
                    can_id: t.can_id,
                    secured,
                    data,
                });
            }
        }
        out.sort_by_key(|r| (r.quantum, r.stream));
        out
    }

    pub fn run(&self, opts: &RunOptions) -> Result<RunResult, ConfigError> {
        let cfg = &self.cfg;
        let nodes = self.build_nodes()?;
        let names: Vec<String> = cfg.nodes.iter().map(|n| n.name.clone()).collect();
        let mut bus = Bus::new(nodes, &self.topology, &self.timing).map_err(|e| ConfigError::new("bus", e.to_string()))?;
        if let Some(p) = opts.trace_position_m {
            bus.enable_trace(&self.topology, &self.timing, p);
        }
        let releases = self.releases();
        let qpb = u64::from(self.timing.quanta_per_bit);

        let designated: HashMap<u16, Vec<usize>> = {
            let mut m: HashMap<u16, Vec<usize>> = HashMap::new();
            for (i, n) in cfg.nodes.iter().enumerate().filter(|(_, n)| n.role == Role::Receiver) {
                for id in n.ids.iter().chain(&n.plain_ids) {
                    m.entry(*id).or_default().push(i);
                }
            }
            m
        };

        let mut st = RunState {
            frames: Vec::with_capacity(releases.len()),
            metrics: RunMetrics::new(cfg),
            events: Vec::new(),
            auth_logs: Vec::new(),
            pending_verdicts: HashMap::new(),
            verdicts: Vec::new(),
            nonces: HashSet::new(),
            jams: HashMap::new(),
            handled_failures: BTreeSet::new(),
            outstanding: 0,
        };
        for f in &cfg.faults {
            if f.kind == FaultType::Jam {
                let node = cfg.node_index(f.node.as_deref().expect("validated")).expect("validated");
                st.jams.entry(f.at_frame).or_insert_with(Vec::new).push((node, f.offset_bits, f.bits));
            }
        }

        let last_release = releases.last().map_or(0, |r| r.quantum);
        let limit = opts.max_quanta.unwrap_or_else(|| {
            let frames = releases.len() as u64 + 16;
            last_release + frames * 4 * (cfg.max_retransmissions as u64 + 1) * 160 * qpb + 1000 * qpb
        });
        let mut next = 0usize;
        let mut buf = Vec::new();
        loop {
            let now = bus.now();
            while next < releases.len() && releases[next].quantum <= now {
                let handle = next as u64;
                self.apply_faults(handle, &mut bus, &mut st, now);
                let r = &releases[next];
                st.frames.push(FrameRecord::new(handle, r.can_id, names[r.node].clone(), cfg.nodes[r.node].role == Role::Attacker, now));
                st.outstanding += 1;
                let ok = match bus.node_mut(r.node) {
                    SimNode::Ecu(e) if r.secured => e.send_secured(handle, r.can_id, r.data.clone()).is_ok(),
                    SimNode::Ecu(e) => e.send_plain(handle, r.can_id, &r.data.to_bytes()).is_ok(),
                    SimNode::Injector(a) => {
                        a.inject(handle, r.data.clone());
                        true
                    }
                    _ => false,
                };
                if !ok {
                    st.finish(handle, FrameOutcome::Aborted, now);
                }
                next += 1;
            }
            bus.tick();
            let now = bus.now();
            for i in 0..bus.nodes().len() {
                if bus.nodes()[i].has_events() {
                    bus.node_mut(i).take_events(&mut buf);
                    for ev in buf.drain(..) {
                        self.on_event(i, ev, &mut bus, &mut st, &designated, opts, now);
                    }
                }
            }
            if next == releases.len() && st.outstanding == 0 && now % qpb == 0 && bus.nodes().iter().all(SimNode::is_quiet) {
                break;
            }
            if now >= limit {
                break;
            }
        }
        let now = bus.now();
        for f in st.frames.iter_mut().filter(|f| f.outcome.is_none()) {
            f.outcome = Some(FrameOutcome::Aborted);
            f.end_quantum = Some(now);
        }
        let mut metrics = st.metrics;
        metrics.quanta_simulated = now;
        metrics.multi_erase_quanta = bus.diagnostics().multi_erase_quanta;
        metrics.illegal_erase_quanta = bus.diagnostics().illegal_erase_quanta;
        let mut flips = FlipCounts::default();
        for n in bus.nodes() {
            if let SimNode::Authenticator(a) = n {
                let s = a.stats();
                flips.to_dominant += s.flips_to_dominant;
                flips.to_erase += s.flips_to_erase;
                flips.compensations += s.compensations;
            }
        }
        metrics.authenticator_flips = flips;
        metrics.tally(&st.frames);
        Ok(RunResult {
            metrics,
            frames: st.frames,
            events: st.events,
            auth_logs: st.auth_logs,
            trace: bus.take_trace(),
            node_names: names,
            verdicts: st.verdicts,
        })
    }

    fn apply_faults(&self, handle: u64, bus: &mut Bus<SimNode>, st: &mut RunState, now: u64) {
        for f in self.cfg.faults.iter().filter(|f| f.at_frame == handle) {
            match f.kind {
                FaultType::DisconnectAuthenticator => {
                    for (i, n) in self.cfg.nodes.iter().enumerate() {
                        let selected = f.node.as_ref().map_or(!n.backup, |name| *name == n.name);
                        if n.role != Role::Authenticator || !selected {
                            continue;
                        }
                        if let SimNode::Authenticator(a) = bus.node_mut(i) {
                            a.disconnect();
                            st.events.push(ScenarioEvent::new(now, &n.name, "authenticator_disconnected", String::new()));
                        }
                    }
                }
                FaultType::DesyncBurst => {
                    let i = self.cfg.node_index(f.node.as_deref().expect("validated")).expect("validated");
                    let can_id = f.can_id.expect("validated");
                    if let SimNode::Ecu(e) = bus.node_mut(i) {
                        e.desync(can_id, f.amount);
                        st.events.push(ScenarioEvent::new(
                            now,
                            &self.cfg.nodes[i].name,
                            "desync",
                            format!("can_id={can_id:#05x} amount={}", f.amount),
                        ));
                    }
                }
                FaultType::Jam => {}
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_event(
        &self,
        node: usize,
        ev: NodeEvent,
        bus: &mut Bus<SimNode>,
        st: &mut RunState,
        designated: &HashMap<u16, Vec<usize>>,
        opts: &RunOptions,
        now: u64,
    ) {
        let name = &self.cfg.nodes[node].name;
        match ev {
            NodeEvent::TxStarted { handle, .. } => {
                if is_internal(handle) {
                    return;
                }
                let f = &mut st.frames[handle as usize];
                f.attempts += 1;
                f.start_quantum = Some(now);
                if f.attempts == 1 {
                    if let Some(jams) = st.jams.remove(&handle) {
                        for (j, offset, bits) in jams {
                            if let SimNode::Jammer(jm) = bus.node_mut(j) {
                                jm.arm(offset, bits);
                                st.events.push(ScenarioEvent::new(now, &self.cfg.nodes[j].name, "jam_armed", format!("frame={handle}")));
                            }
                        }
                    }
                }
            }
            NodeEvent::TxAttemptFailed { handle, .. } => {
                st.metrics.error_frames += 1;
                if !is_internal(handle) {
                    st.frames[handle as usize].failed_attempts += 1;
                }
            }
            NodeEvent::ArbitrationLost { .. } | NodeEvent::RxError(_) => {}
            NodeEvent::TxDone {
                handle,
                can_id,
                delivered,
                stuff_bits,
            } => {
                let verdicts = st.pending_verdicts.remove(&can_id).unwrap_or_default();
                if delivered {
                    st.metrics.stuff_bits_total += stuff_bits as u64;
                }
                if is_internal(handle) {
                    return;
                }
                let outcome = if delivered {
                    let accepted = designated
                        .get(&can_id)
                        .map_or(true, |rs| rs.iter().all(|r| verdicts.iter().any(|&(v, ok)| v == *r && ok)));
                    if accepted {
                        FrameOutcome::Accepted
                    } else {
                        FrameOutcome::Rejected
                    }
                } else if st.frames[handle as usize].failed_attempts > 0 {
                    FrameOutcome::Rejected
                } else {
                    FrameOutcome::Aborted
                };
                st.frames[handle as usize].stuff_bits = stuff_bits;
                st.finish(handle, outcome, now);
            }
            NodeEvent::Verdict { can_id, accepted, counter } => {
                st.pending_verdicts.entry(can_id).or_default().push((node, accepted));
                st.verdicts.push((node, can_id, accepted, counter));
            }
            NodeEvent::TagsGenerated { handle, can_id, counter, .. } => {
                if !st.nonces.insert((can_id, counter)) {
                    st.metrics.nonce_reuse_violations += 1;
                }
                if !is_internal(handle) {
                    st.frames[handle as usize].counter = Some(counter);
                }
            }
            NodeEvent::AuthenticatorInactive { can_id } => {
                st.events.push(ScenarioEvent::new(now, name, "authenticator_inactive", format!("can_id={can_id:#05x}")));
                self.handover(can_id, bus, st, now);
            }
            NodeEvent::ResetRequested { can_id } => {
                st.metrics.reset_requests += 1;
                st.events.push(ScenarioEvent::new(now, name, "reset_requested", format!("can_id={can_id:#05x}")));
            }
            NodeEvent::RecoveryStarted { can_id, counter } => {
                st.metrics.recovery_events += 1;
                st.events.push(ScenarioEvent::new(
                    now,
                    name,
                    "recovery_started",
                    format!("can_id={can_id:#05x} counter={counter}"),
                ));
            }
            NodeEvent::RecoveryApplied { broadcast_id, counter } => {
                st.events.push(ScenarioEvent::new(
                    now,
                    name,
                    "recovery_applied",
                    format!("broadcast_id={broadcast_id:#05x} counter={counter}"),
                ));
            }
            NodeEvent::AnnouncementAccepted { pairwise_id, counter } => {
                st.events.push(ScenarioEvent::new(
                    now,
                    name,
                    "announcement_accepted",
                    format!("pairwise_id={pairwise_id:#05x} counter={counter}"),
                ));
            }
            NodeEvent::Authenticated(log) => {
                if opts.collect_auth_logs {
                    st.auth_logs.push(log);
                }
            }
        }
    }

    /// Moves the duties of a disconnected authenticator to the nearest
    /// connected one holding the same keys.
    fn handover(&self, can_id: u16, bus: &mut Bus<SimNode>, st: &mut RunState, now: u64) {
        let failed: Vec<usize> = bus
            .nodes()
            .iter()
            .enumerate()
            .filter_map(|(i, n)| match n {
                SimNode::Authenticator(a) if !a.is_connected() && a.responsible_ids().contains(&can_id) => Some(i),
                _ => None,
            })
            .filter(|i| !st.handled_failures.contains(i))
            .collect();
        for f in failed {
            st.handled_failures.insert(f);
            let SimNode::Authenticator(fa) = &bus.nodes()[f] else { unreachable!() };
            let ids: Vec<u16> = fa.responsible_ids().iter().copied().collect();
            let pos = self.cfg.nodes[f].position_m;
            let backup = bus
                .nodes()
                .iter()
                .enumerate()
                .filter_map(|(i, n)| match n {
                    SimNode::Authenticator(a) if a.is_connected() && ids.iter().all(|id| a.holds_key(*id)) => {
                        Some((i, (self.cfg.nodes[i].position_m - pos).abs()))
                    }
                    _ => None,
                })
                .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
            match backup {
                Some((b, _)) => {
                    if let SimNode::Authenticator(a) = bus.node_mut(b) {
                        a.take_over(ids);
                    }
                    st.metrics.handover_events += 1;
                    st.events.push(ScenarioEvent::new(
                        now,
                        &self.cfg.nodes[b].name,
                        "handover",
                        format!("from={}", self.cfg.nodes[f].name),
                    ));
                }
                None => {
                    st.metrics.fallback_events += 1;
                    st.events.push(ScenarioEvent::new(now, &self.cfg.nodes[f].name, "fallback_insecure", String::new()));
                }
            }
        }
    }
}

struct RunState {
    frames: Vec<FrameRecord>,
    metrics: RunMetrics,
    events: Vec<ScenarioEvent>,
    auth_logs: Vec<AuthFrameLog>,
    pending_verdicts: HashMap<u16, Vec<(usize, bool)>>,
    verdicts: Vec<(usize, u16, bool, Option<u64>)>,
    nonces: HashSet<(u16, u64)>,
    jams: HashMap<u64, Vec<(usize, usize, usize)>>,
    handled_failures: BTreeSet<usize>,
    outstanding: u64,
}

impl RunState {
    fn finish(&mut self, handle: u64, outcome: FrameOutcome, now: u64) {
        let f = &mut self.frames[handle as usize];
        if f.outcome.is_none() {
            f.outcome = Some(outcome);
            f.end_quantum = Some(now);
            self.outstanding -= 1;
        }
    }
}
