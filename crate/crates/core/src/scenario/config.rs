//! Scenario description loaded from JSON.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Deserializer, Serialize};
use thiserror::Error;

use crate::attack::{AttackerCapabilities, GuessMode};
use crate::bus::{BitTimingConfig, BusTopology};
use crate::frame::{secured_dlc_for, MAX_CAN_ID, MAX_DLC};
use crate::node::recovery::is_reset_request_id;
use crate::secoc::TagWidth;

/// Invalid scenario, located by a field path such as `nodes[2].ids[0]`.
#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("{path}: {message}")]
pub struct ConfigError {
    pub path: String,
    pub message: String,
}

impl ConfigError {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Self {
            path: path.into(),
            message: message.into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Transmitter,
    Receiver,
    Authenticator,
    Attacker,
    Legacy,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceKeyHex {
    pub k1: String,
    pub k2: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeKeys {
    #[serde(default)]
    pub group: Option<String>,
    /// Pairwise keys by CAN ID (decimal or `0x` hex).
    #[serde(default)]
    pub source: BTreeMap<String, SourceKeyHex>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecoveryIds {
    #[serde(deserialize_with = "de_id")]
    pub pairwise_id: u16,
    #[serde(deserialize_with = "de_id")]
    pub broadcast_id: u16,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum AttackConfig {
    Masquerade {
        #[serde(deserialize_with = "de_id")]
        target_id: u16,
        guess: GuessMode,
    },
    CompromisedAuthenticator {
        #[serde(deserialize_with = "de_id")]
        target_id: u16,
    },
    Replay {
        #[serde(deserialize_with = "de_id")]
        target_id: u16,
        #[serde(default)]
        lag: usize,
    },
    BitModify {
        #[serde(deserialize_with = "de_id")]
        target_id: u16,
        flip_indices: BTreeSet<usize>,
    },
    Jam,
}

impl AttackConfig {
    pub fn target_id(&self) -> Option<u16> {
        match *self {
            AttackConfig::Masquerade { target_id, .. }
            | AttackConfig::CompromisedAuthenticator { target_id }
            | AttackConfig::Replay { target_id, .. }
            | AttackConfig::BitModify { target_id, .. } => Some(target_id),
            AttackConfig::Jam => None,
        }
    }

    /// Whether the attacker transmits frames of its own.
    pub fn injects(&self) -> bool {
        matches!(
            self,
            AttackConfig::Masquerade { .. } | AttackConfig::CompromisedAuthenticator { .. } | AttackConfig::Replay { .. }
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub name: String,
    pub role: Role,
    #[serde(default)]
    pub position_m: f64,
    /// Transmitter: secured IDs sent. Legacy: plain IDs sent. Receiver:
    /// secured IDs verified. Authenticator: IDs it holds keys for (all
    /// secured IDs when empty).
    #[serde(default, deserialize_with = "de_ids")]
    pub ids: Vec<u16>,
    /// Plain IDs a transmitter sends or a receiver accepts.
    #[serde(default, deserialize_with = "de_ids")]
    pub plain_ids: Vec<u16>,
    #[serde(default)]
    pub keys: Option<NodeKeys>,
    #[serde(default)]
    pub recovery: Option<RecoveryIds>,
    /// Authenticator held in standby until a handover.
    #[serde(default)]
    pub backup: bool,
    #[serde(default)]
    pub capabilities: Option<AttackerCapabilities>,
    #[serde(default)]
    pub attack: Option<AttackConfig>,
    /// Test hook: transmit zero source tags.
    #[serde(default)]
    pub zero_source_tag: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficConfig {
    #[serde(deserialize_with = "de_id")]
    pub can_id: u16,
    /// Sending node; defaults to the node that owns `can_id`.
    #[serde(default)]
    pub sender: Option<String>,
    /// `"random"` or hex data.
    #[serde(default = "random_payload")]
    pub payload: String,
    /// Application bits of secured frames.
    #[serde(default = "default_app_bits")]
    pub app_bits: usize,
    /// Data length of random plain frames.
    #[serde(default = "default_dlc")]
    pub dlc: u8,
    pub count: u64,
    pub period_bits: u64,
    #[serde(default)]
    pub offset_bits: u64,
}

fn random_payload() -> String {
    "random".into()
}

fn default_app_bits() -> usize {
    36
}

fn default_dlc() -> u8 {
    8
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultType {
    DisconnectAuthenticator,
    Jam,
    DesyncBurst,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultConfig {
    #[serde(rename = "type")]
    pub kind: FaultType,
    /// Index of the logical frame (in release order) the fault is tied to.
    pub at_frame: u64,
    /// Target node: the authenticator, jammer or desynced receiver.
    #[serde(default)]
    pub node: Option<String>,
    #[serde(default, deserialize_with = "de_opt_id")]
    pub can_id: Option<u16>,
    #[serde(default = "default_desync")]
    pub amount: u64,
    #[serde(default = "default_jam_offset")]
    pub offset_bits: usize,
    #[serde(default = "default_jam_bits")]
    pub bits: usize,
}

fn default_desync() -> u64 {
    40
}

fn default_jam_offset() -> usize {
    30
}

fn default_jam_bits() -> usize {
    8
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusConfig {
    pub length_m: f64,
    #[serde(default = "default_speed")]
    pub signal_speed_ns_per_m: f64,
}

fn default_speed() -> f64 {
    BusTopology::DEFAULT_SIGNAL_SPEED
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub bitrate_bps: u32,
    #[serde(default = "default_qpb")]
    pub quanta_per_bit: u16,
    pub bus: BusConfig,
    pub nodes: Vec<NodeConfig>,
    pub traffic: Vec<TrafficConfig>,
    #[serde(default)]
    pub faults: Vec<FaultConfig>,
    #[serde(default)]
    pub tag_width: TagWidth,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_retx")]
    pub max_retransmissions: u32,
    /// Outcome checks applied by the scenario runner front end.
    #[serde(default)]
    pub expect: Expectations,
}

/// Bounds a run must meet; an unmet bound is reported, not an error.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expectations {
    #[serde(default)]
    pub min_reliability: Option<f64>,
    #[serde(default)]
    pub max_forgeries_accepted: Option<u64>,
    #[serde(default)]
    pub min_forgeries_attempted: Option<u64>,
    /// Wall-clock limit, checked by the caller.
    #[serde(default)]
    pub max_runtime_s: Option<f64>,
}

impl Expectations {
    /// Descriptions of every unmet bound.
    pub fn failures(&self, m: &super::RunMetrics) -> Vec<String> {
        let mut out = Vec::new();
        if let Some(min) = self.min_reliability {
            if m.reliability < min {
                out.push(format!("reliability {} below {min}", m.reliability));
            }
        }
        if let Some(max) = self.max_forgeries_accepted {
            if m.forgeries_accepted > max {
                out.push(format!("{} forgeries accepted, at most {max} allowed", m.forgeries_accepted));
            }
        }
        if let Some(min) = self.min_forgeries_attempted {
            if m.forgeries_attempted < min {
                out.push(format!("{} forgeries attempted, expected at least {min}", m.forgeries_attempted));
            }
        }
        out
    }
}

/// Tag widths a scenario may use.
pub const SCENARIO_TAG_WIDTHS: [u8; 3] = [8, 16, 24];

fn default_qpb() -> u16 {
    10
}

fn default_retx() -> u32 {
    crate::node::ControllerConfig::DEFAULT_MAX_RETRANSMISSIONS
}

fn parse_id(s: &str) -> Option<u16> {
    let s = s.trim();
    let v = match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(h) => u16::from_str_radix(h, 16).ok()?,
        None => s.parse().ok()?,
    };
    (v <= MAX_CAN_ID).then_some(v)
}

#[derive(Deserialize)]
#[serde(untagged)]
enum IdRepr {
    Num(u64),
    Str(String),
}

impl IdRepr {
    fn resolve<E: serde::de::Error>(self) -> Result<u16, E> {
        let v = match self {
            IdRepr::Num(n) => u16::try_from(n).ok().filter(|&v| v <= MAX_CAN_ID),
            IdRepr::Str(s) => parse_id(&s),
        };
        v.ok_or_else(|| E::custom("CAN ID must be an 11-bit number or 0x-prefixed hex string"))
    }
}

fn de_id<'de, D: Deserializer<'de>>(d: D) -> Result<u16, D::Error> {
    IdRepr::deserialize(d)?.resolve()
}

fn de_opt_id<'de, D: Deserializer<'de>>(d: D) -> Result<Option<u16>, D::Error> {
    Option::<IdRepr>::deserialize(d)?.map(IdRepr::resolve).transpose()
}

fn de_ids<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u16>, D::Error> {
    Vec::<IdRepr>::deserialize(d)?.into_iter().map(IdRepr::resolve).collect()
}

/// Parses a CAN ID written as a map key.
pub fn parse_id_key(s: &str) -> Option<u16> {
    parse_id(s)
}

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: Self = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            ConfigError::new(if path == "." { "$".into() } else { path }, e.into_inner().to_string())
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|e| ConfigError::new(path.display().to_string(), e.to_string()))?;
        Self::from_json(&text)
    }

    pub fn timing(&self) -> Result<BitTimingConfig, ConfigError> {
        BitTimingConfig::for_bitrate(self.bitrate_bps, self.quanta_per_bit)
            .map_err(|e| ConfigError::new("bitrate_bps", e.to_string()))
    }

    pub fn node_index(&self, name: &str) -> Option<usize> {
        self.nodes.iter().position(|n| n.name == name)
    }

    /// IDs sent as secured frames (data IDs and recovery broadcasts).
    pub fn secured_ids(&self) -> BTreeSet<u16> {
        let mut ids = BTreeSet::new();
        for n in self.nodes.iter().filter(|n| n.role == Role::Transmitter) {
            ids.extend(n.ids.iter().copied());
            if let Some(r) = n.recovery {
                ids.insert(r.broadcast_id);
            }
        }
        ids
    }

    /// Index of the node sending traffic stream `t`.
    pub fn sender_of(&self, t: &TrafficConfig) -> Option<usize> {
        match &t.sender {
            Some(name) => self.node_index(name),
            None => self.nodes.iter().position(|n| {
                matches!(n.role, Role::Transmitter | Role::Legacy) && (n.ids.contains(&t.can_id) || n.plain_ids.contains(&t.can_id))
            }),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        self.timing()?;
        if !SCENARIO_TAG_WIDTHS.contains(&self.tag_width.bits()) {
            return Err(ConfigError::new("tag_width", "must be 8, 16 or 24"));
        }
        if let Some(r) = self.expect.min_reliability {
            if !(0.0..=1.0).contains(&r) {
                return Err(ConfigError::new("expect.min_reliability", "must be within [0, 1]"));
            }
        }
        if let Some(t) = self.expect.max_runtime_s {
            if !(t.is_finite() && t > 0.0) {
                return Err(ConfigError::new("expect.max_runtime_s", "must be a positive number of seconds"));
            }
        }
        if !(self.bus.length_m.is_finite() && self.bus.length_m >= 0.0) {
            return Err(ConfigError::new("bus.length_m", "must be a non-negative length"));
        }
        if !(self.bus.signal_speed_ns_per_m.is_finite() && self.bus.signal_speed_ns_per_m >= 0.0) {
            return Err(ConfigError::new("bus.signal_speed_ns_per_m", "must be non-negative"));
        }
        if self.nodes.is_empty() {
            return Err(ConfigError::new("nodes", "at least one node is required"));
        }
        if self.nodes.len() > 64 {
            return Err(ConfigError::new("nodes", "at most 64 nodes are supported"));
        }
        let mut names = BTreeSet::new();
        let mut senders: BTreeMap<u16, usize> = BTreeMap::new();
        for (i, n) in self.nodes.iter().enumerate() {
            let p = format!("nodes[{i}]");
            if !names.insert(n.name.as_str()) {
                return Err(ConfigError::new(format!("{p}.name"), format!("duplicate node name {:?}", n.name)));
            }
            if !(n.position_m.is_finite() && (0.0..=self.bus.length_m).contains(&n.position_m)) {
                return Err(ConfigError::new(format!("{p}.position_m"), "position must lie on the bus"));
            }
            self.validate_keys(i, n)?;
            match n.role {
                Role::Transmitter | Role::Legacy => {
                    if n.role == Role::Legacy && !n.plain_ids.is_empty() {
                        return Err(ConfigError::new(format!("{p}.plain_ids"), "legacy nodes list their IDs in ids"));
                    }
                    for (j, id) in n.ids.iter().chain(&n.plain_ids).enumerate() {
                        if is_reset_request_id(*id) {
                            return Err(ConfigError::new(format!("{p}.ids[{j}]"), "ID is reserved for reset requests"));
                        }
                        if let Some(other) = senders.insert(*id, i) {
                            return Err(ConfigError::new(
                                format!("{p}.ids[{j}]"),
                                format!("ID {id:#05x} is already sent by {}", self.nodes[other].name),
                            ));
                        }
                    }
                    if let Some(r) = n.recovery {
                        if n.role == Role::Legacy {
                            return Err(ConfigError::new(format!("{p}.recovery"), "legacy nodes do not take part in recovery"));
                        }
                        for (field, id) in [("pairwise_id", r.pairwise_id), ("broadcast_id", r.broadcast_id)] {
                            if is_reset_request_id(id) {
                                return Err(ConfigError::new(format!("{p}.recovery.{field}"), "ID is reserved for reset requests"));
                            }
                            if let Some(other) = senders.insert(id, i) {
                                return Err(ConfigError::new(
                                    format!("{p}.recovery.{field}"),
                                    format!("ID {id:#05x} is already sent by {}", self.nodes[other].name),
                                ));
                            }
                        }
                    }
                }
                Role::Attacker => {
                    let Some(attack) = &n.attack else {
                        return Err(ConfigError::new(format!("{p}.attack"), "attackers need an attack"));
                    };
                    let caps = n.capabilities.clone().unwrap_or_default();
                    caps.validate().map_err(|e| ConfigError::new(format!("{p}.capabilities"), e.to_string()))?;
                    let need = match attack {
                        AttackConfig::Masquerade { .. } => (!caps.knows_group_key).then_some("masquerading needs knows_group_key"),
                        AttackConfig::CompromisedAuthenticator { .. } => {
                            (!caps.is_authenticator).then_some("needs is_authenticator")
                        }
                        AttackConfig::BitModify { .. } => (!caps.can_overwrite_bits).then_some("needs can_overwrite_bits"),
                        AttackConfig::Jam => (!caps.can_jam).then_some("needs can_jam"),
                        AttackConfig::Replay { .. } => None,
                    };
                    if let Some(msg) = need {
                        return Err(ConfigError::new(format!("{p}.capabilities"), msg));
                    }
                }
                Role::Receiver | Role::Authenticator => {}
            }
            if n.role != Role::Attacker && (n.attack.is_some() || n.capabilities.is_some()) {
                return Err(ConfigError::new(format!("{p}.attack"), "only attackers carry attacks and capabilities"));
            }
            if n.backup && n.role != Role::Authenticator {
                return Err(ConfigError::new(format!("{p}.backup"), "only authenticators can be backups"));
            }
        }
        let receivers = self.nodes.iter().filter(|n| n.role == Role::Receiver).count();
        if receivers > usize::from(crate::node::recovery::RESET_REQUEST_IDS) {
            return Err(ConfigError::new("nodes", "at most 16 receivers are supported"));
        }
        let secured = self.secured_ids();
        for (i, t) in self.traffic.iter().enumerate() {
            let p = format!("traffic[{i}]");
            let Some(s) = self.sender_of(t) else {
                return Err(ConfigError::new(format!("{p}.can_id"), format!("no node sends ID {:#05x}", t.can_id)));
            };
            let node = &self.nodes[s];
            match node.role {
                Role::Attacker => {
                    let attack = node.attack.as_ref().expect("validated");
                    if !attack.injects() || attack.target_id() != Some(t.can_id) {
                        return Err(ConfigError::new(format!("{p}.sender"), "attacker does not inject this ID"));
                    }
                }
                Role::Transmitter | Role::Legacy => {
                    if !node.ids.contains(&t.can_id) && !node.plain_ids.contains(&t.can_id) {
                        return Err(ConfigError::new(format!("{p}.sender"), "sender does not own this ID"));
                    }
                }
                _ => return Err(ConfigError::new(format!("{p}.sender"), "node cannot send traffic")),
            }
            let is_secured = node.role == Role::Attacker || (node.role == Role::Transmitter && node.ids.contains(&t.can_id));
            if is_secured {
                if t.app_bits > 36 || secured_dlc_for(t.app_bits).and_then(crate::frame::secured_app_bits) != Some(t.app_bits) {
                    return Err(ConfigError::new(format!("{p}.app_bits"), "must be 8*DLC-28 for a DLC in 4..=8"));
                }
            } else if t.dlc > MAX_DLC {
                return Err(ConfigError::new(format!("{p}.dlc"), "DLC above 8"));
            }
            if t.payload != "random" {
                let bytes = hex::decode(&t.payload).map_err(|e| ConfigError::new(format!("{p}.payload"), e.to_string()))?;
                let need = if is_secured { t.app_bits.div_ceil(8) } else { 0 };
                if is_secured && bytes.len() != need {
                    return Err(ConfigError::new(format!("{p}.payload"), format!("secured payload needs {need} bytes")));
                }
                if !is_secured && bytes.len() > usize::from(MAX_DLC) {
                    return Err(ConfigError::new(format!("{p}.payload"), "more than 8 data bytes"));
                }
            }
            if t.period_bits == 0 && t.count > 1 {
                return Err(ConfigError::new(format!("{p}.period_bits"), "must be positive"));
            }
            if is_secured && node.role == Role::Transmitter && !secured.contains(&t.can_id) {
                return Err(ConfigError::new(format!("{p}.can_id"), "not a secured ID"));
            }
        }
        for (i, f) in self.faults.iter().enumerate() {
            let p = format!("faults[{i}]");
            let role = match &f.node {
                Some(name) => match self.node_index(name) {
                    Some(k) => Some(&self.nodes[k]),
                    None => return Err(ConfigError::new(format!("{p}.node"), format!("unknown node {name:?}"))),
                },
                None => None,
            };
            match f.kind {
                FaultType::DisconnectAuthenticator => {
                    if role.is_some_and(|n| n.role != Role::Authenticator) {
                        return Err(ConfigError::new(format!("{p}.node"), "not an authenticator"));
                    }
                }
                FaultType::Jam => {
                    if !role.is_some_and(|n| matches!(n.attack, Some(AttackConfig::Jam))) {
                        return Err(ConfigError::new(format!("{p}.node"), "jam faults need a jamming attacker node"));
                    }
                }
                FaultType::DesyncBurst => {
                    if !role.is_some_and(|n| n.role == Role::Receiver) {
                        return Err(ConfigError::new(format!("{p}.node"), "desync needs a receiver node"));
                    }
                    if f.can_id.is_none() {
                        return Err(ConfigError::new(format!("{p}.can_id"), "desync needs a CAN ID"));
                    }
                }
            }
        }
        Ok(())
    }

    fn validate_keys(&self, i: usize, n: &NodeConfig) -> Result<(), ConfigError> {
        let Some(keys) = &n.keys else { return Ok(()) };
        let p = format!("nodes[{i}].keys");
        let allowed_group = matches!(n.role, Role::Transmitter | Role::Receiver)
            || (n.role == Role::Attacker && n.capabilities.as_ref().is_some_and(|c| c.knows_group_key));
        if keys.group.is_some() && !allowed_group {
            return Err(ConfigError::new(format!("{p}.group"), "this role does not hold the group key"));
        }
        if let Some(g) = &keys.group {
            crate::cipher::key_from_hex(g).map_err(|e| ConfigError::new(format!("{p}.group"), e.to_string()))?;
        }
        for (k, v) in &keys.source {
            let kp = format!("{p}.source.{k}");
            let id = parse_id(k).ok_or_else(|| ConfigError::new(&kp, "key is not a CAN ID"))?;
            let owned = match n.role {
                Role::Transmitter => n.ids.contains(&id) || n.recovery.is_some_and(|r| r.broadcast_id == id),
                Role::Authenticator => true,
                Role::Attacker => n.capabilities.as_ref().is_some_and(|c| c.holds_source_key(id)),
                Role::Receiver | Role::Legacy => false,
            };
            if !owned {
                return Err(ConfigError::new(&kp, "this node may not hold this pairwise key"));
            }
            for (field, hexkey) in [("k1", &v.k1), ("k2", &v.k2)] {
                crate::cipher::key_from_hex(hexkey).map_err(|e| ConfigError::new(format!("{kp}.{field}"), e.to_string()))?;
            }
        }
        Ok(())
    }
}
