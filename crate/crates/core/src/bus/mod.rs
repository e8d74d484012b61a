//! Physical bus model: wired-AND resolution with an erase state,
//! per-pair propagation delays in whole quanta, and a quantum scheduler.

pub mod timing;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use timing::{worst_case_overwrite_delay, BitClock, BitTimingConfig, ClockTick, TimingBudget, TimingError};

/// Level a node places on the bus during one quantum.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum DriveLevel {
    Dominant,
    /// Not driving; the termination pulls the bus recessive.
    PassiveRecessive,
    /// Actively discharges the bus to recessive, overriding dominant drivers.
    Erase,
}

/// Level a node observes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum WireLevel {
    Dominant,
    Recessive,
}

impl WireLevel {
    /// Logical bit value: dominant is 0.
    pub fn bit(self) -> bool {
        self == WireLevel::Recessive
    }

    pub fn from_bit(bit: bool) -> Self {
        if bit {
            WireLevel::Recessive
        } else {
            WireLevel::Dominant
        }
    }
}

impl DriveLevel {
    /// Drive that produces `bit` on an otherwise idle bus.
    pub fn for_bit(bit: bool) -> Self {
        if bit {
            DriveLevel::PassiveRecessive
        } else {
            DriveLevel::Dominant
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resolution {
    pub level: WireLevel,
    /// More than one node erased in the same quantum.
    pub multi_erase: bool,
}

/// Erase beats dominant beats recessive.
pub fn resolve_level<I: IntoIterator<Item = DriveLevel>>(drives: I) -> Resolution {
    let mut erases = 0;
    let mut dominant = false;
    for d in drives {
        match d {
            DriveLevel::Erase => erases += 1,
            DriveLevel::Dominant => dominant = true,
            DriveLevel::PassiveRecessive => {}
        }
    }
    let level = if erases == 0 && dominant {
        WireLevel::Dominant
    } else {
        WireLevel::Recessive
    };
    Resolution {
        level,
        multi_erase: erases > 1,
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BusError {
    #[error("node position {0} m lies outside the bus")]
    PositionOutOfRange(f64),
    #[error("signal speed must be positive")]
    SignalSpeed,
    #[error("node count {got} does not match {expected} positions")]
    NodeCount { got: usize, expected: usize },
    #[error(transparent)]
    Timing(#[from] TimingError),
}

/// Linear bus geometry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BusTopology {
    pub length_m: f64,
    pub signal_speed_ns_per_m: f64,
    pub positions_m: Vec<f64>,
}

impl BusTopology {
    pub const DEFAULT_SIGNAL_SPEED: f64 = 5.0;

    pub fn new(length_m: f64, positions_m: Vec<f64>) -> Result<Self, BusError> {
        let t = Self {
            length_m,
            signal_speed_ns_per_m: Self::DEFAULT_SIGNAL_SPEED,
            positions_m,
        };
        t.validate()?;
        Ok(t)
    }

    pub fn validate(&self) -> Result<(), BusError> {
        if !(self.signal_speed_ns_per_m > 0.0) {
            return Err(BusError::SignalSpeed);
        }
        for &p in &self.positions_m {
            if !(0.0..=self.length_m).contains(&p) {
                return Err(BusError::PositionOutOfRange(p));
            }
        }
        Ok(())
    }

    /// Delay between two positions in whole quanta, rounded up.
    pub fn propagation_delay_quanta(&self, a: f64, b: f64, quantum_ns: f64) -> u32 {
        let ns = (a - b).abs() * self.signal_speed_ns_per_m;
        // Tolerate float noise so exact multiples are not rounded up.
        (ns / quantum_ns - 1e-9).ceil().max(0.0) as u32
    }

    pub fn delay_matrix(&self, quantum_ns: f64) -> Vec<Vec<u32>> {
        let p = &self.positions_m;
        p.iter()
            .map(|&a| p.iter().map(|&b| self.propagation_delay_quanta(a, b, quantum_ns)).collect())
            .collect()
    }
}

/// A participant in the quantum scheduler.
pub trait BusNode {
    /// Drive for the current quantum, decided from state after the previous one.
    fn drive(&mut self) -> DriveLevel;
    /// Level resolved at this node's position for the current quantum.
    fn observe(&mut self, level: WireLevel);
    /// Whether the node's transceiver has an erase capability.
    fn may_erase(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct BusDiagnostics {
    /// Quanta in which some node saw more than one simultaneous erase.
    pub multi_erase_quanta: u64,
    /// Quanta in which a node without erase capability tried to erase.
    pub illegal_erase_quanta: u64,
}

/// Run of identical trace samples at the probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct TraceRun {
    pub start_quantum: u64,
    pub quanta: u64,
    pub level: WireLevel,
    /// Bit i set when node i drove non-passively, as seen at the probe.
    pub drivers: u64,
}

/// Run-length encoded wire trace at one probe position.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct WireTrace {
    pub runs: Vec<TraceRun>,
}

impl WireTrace {
    fn push(&mut self, quantum: u64, level: WireLevel, drivers: u64) {
        if let Some(last) = self.runs.last_mut() {
            if last.level == level && last.drivers == drivers && last.start_quantum + last.quanta == quantum {
                last.quanta += 1;
                return;
            }
        }
        self.runs.push(TraceRun {
            start_quantum: quantum,
            quanta: 1,
            level,
            drivers,
        });
    }

    /// Level and drivers at `quantum`, if recorded.
    pub fn at(&self, quantum: u64) -> Option<(WireLevel, u64)> {
        let i = self.runs.partition_point(|r| r.start_quantum + r.quanta <= quantum);
        let r = self.runs.get(i)?;
        (r.start_quantum <= quantum).then_some((r.level, r.drivers))
    }

    pub fn end_quantum(&self) -> u64 {
        self.runs.last().map_or(0, |r| r.start_quantum + r.quanta)
    }
}

struct Probe {
    delays: Vec<u32>,
    trace: WireTrace,
}

/// Quantum scheduler over a fixed set of nodes.
///
/// Each tick has two phases: every node produces its drive, then every node
/// observes the resolution of all drives delayed by the pairwise propagation
/// delay. Node order therefore never affects the outcome.
pub struct Bus<N: BusNode> {
    nodes: Vec<N>,
    delays: Vec<Vec<u32>>,
    ring: usize,
    history: Vec<Vec<DriveLevel>>,
    last_active: Vec<Option<u64>>,
    active: Vec<usize>,
    max_delay: u64,
    now: u64,
    diagnostics: BusDiagnostics,
    probe: Option<Probe>,
    drives: Vec<DriveLevel>,
}

impl<N: BusNode> Bus<N> {
    pub fn new(nodes: Vec<N>, topology: &BusTopology, timing: &BitTimingConfig) -> Result<Self, BusError> {
        topology.validate()?;
        timing.validate()?;
        if nodes.len() != topology.positions_m.len() {
            return Err(BusError::NodeCount {
                got: nodes.len(),
                expected: topology.positions_m.len(),
            });
        }
        let delays = topology.delay_matrix(timing.quantum_ns);
        let max_delay = delays.iter().flatten().copied().max().unwrap_or(0) as u64;
        let ring = (max_delay as usize + 1).next_power_of_two();
        let n = nodes.len();
        Ok(Self {
            nodes,
            delays,
            ring,
            history: vec![vec![DriveLevel::PassiveRecessive; ring]; n],
            last_active: vec![None; n],
            active: Vec::with_capacity(n),
            max_delay,
            now: 0,
            diagnostics: BusDiagnostics::default(),
            probe: None,
            drives: vec![DriveLevel::PassiveRecessive; n],
        })
    }

    /// Records a wire trace as seen at `position_m`.
    pub fn enable_trace(&mut self, topology: &BusTopology, timing: &BitTimingConfig, position_m: f64) {
        let delays = topology
            .positions_m
            .iter()
            .map(|&p| topology.propagation_delay_quanta(position_m, p, timing.quantum_ns))
            .collect();
        self.probe = Some(Probe {
            delays,
            trace: WireTrace::default(),
        });
    }

    pub fn trace(&self) -> Option<&WireTrace> {
        self.probe.as_ref().map(|p| &p.trace)
    }

    pub fn take_trace(&mut self) -> Option<WireTrace> {
        self.probe.take().map(|p| p.trace)
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn nodes_mut(&mut self) -> &mut [N] {
        &mut self.nodes
    }

    pub fn node_mut(&mut self, i: usize) -> &mut N {
        &mut self.nodes[i]
    }

    pub fn into_nodes(self) -> Vec<N> {
        self.nodes
    }

    pub fn diagnostics(&self) -> &BusDiagnostics {
        &self.diagnostics
    }

    pub fn delay(&self, observer: usize, driver: usize) -> u32 {
        self.delays[observer][driver]
    }

    fn delayed(&self, driver: usize, delay: u32) -> DriveLevel {
        let d = u64::from(delay);
        if d > self.now {
            return DriveLevel::PassiveRecessive;
        }
        self.history[driver][((self.now - d) as usize) & (self.ring - 1)]
    }

    /// Advances the bus by one quantum.
    pub fn tick(&mut self) {
        let slot = (self.now as usize) & (self.ring - 1);
        for (i, node) in self.nodes.iter_mut().enumerate() {
            let d = node.drive();
            if d == DriveLevel::Erase && !node.may_erase() {
                self.diagnostics.illegal_erase_quanta += 1;
            }
            self.drives[i] = d;
            self.history[i][slot] = d;
            if d != DriveLevel::PassiveRecessive {
                self.last_active[i] = Some(self.now);
            }
        }
        self.active.clear();
        for (i, la) in self.last_active.iter().enumerate() {
            if matches!(la, Some(t) if self.now - t <= self.max_delay) {
                self.active.push(i);
            }
        }

        let mut multi = false;
        for x in 0..self.nodes.len() {
            let res = resolve_level(self.active.iter().map(|&j| self.delayed(j, self.delays[x][j])));
            multi |= res.multi_erase;
            self.nodes[x].observe(res.level);
        }
        if let Some(probe) = &self.probe {
            let mut drivers = 0u64;
            let drives = self.active.iter().map(|&j| {
                let d = self.delayed(j, probe.delays[j]);
                if d != DriveLevel::PassiveRecessive && j < 64 {
                    drivers |= 1 << j;
                }
                d
            });
            let res = resolve_level(drives.collect::<Vec<_>>());
            multi |= res.multi_erase;
            let now = self.now;
            self.probe.as_mut().expect("probe").trace.push(now, res.level, drivers);
        }
        if multi {
            self.diagnostics.multi_erase_quanta += 1;
        }
        self.now += 1;
    }

    pub fn run(&mut self, quanta: u64) {
        for _ in 0..quanta {
            self.tick();
        }
    }

    /// Ticks until `done` holds or `limit` quanta have passed; returns whether `done` held.
    pub fn run_until(&mut self, limit: u64, mut done: impl FnMut(&[N]) -> bool) -> bool {
        let end = self.now + limit;
        while self.now < end {
            if done(&self.nodes) {
                return true;
            }
            self.tick();
        }
        done(&self.nodes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use DriveLevel::{Dominant as D, Erase as E, PassiveRecessive as P};

    #[test]
    fn resolution_table() {
        assert_eq!(resolve_level([]).level, WireLevel::Recessive);
        assert_eq!(resolve_level([P, P]).level, WireLevel::Recessive);
        assert_eq!(resolve_level([P, D]).level, WireLevel::Dominant);
        assert_eq!(resolve_level([D, E]).level, WireLevel::Recessive);
        assert_eq!(resolve_level([P, E]).level, WireLevel::Recessive);
        let r = resolve_level([E, D, E]);
        assert_eq!(r.level, WireLevel::Recessive);
        assert!(r.multi_erase);
    }

    #[test]
    fn delay_rounds_up() {
        let t = BusTopology::new(25.0, vec![0.0, 25.0]).unwrap();
        assert_eq!(t.propagation_delay_quanta(0.0, 25.0, 100.0), 2);
        assert_eq!(t.propagation_delay_quanta(0.0, 20.0, 100.0), 1);
        assert_eq!(t.propagation_delay_quanta(0.0, 20.1, 100.0), 2);
        assert_eq!(t.propagation_delay_quanta(3.0, 3.0, 100.0), 0);
    }

    #[test]
    fn topology_validation() {
        assert_eq!(BusTopology::new(10.0, vec![11.0]), Err(BusError::PositionOutOfRange(11.0)));
    }

    struct Scripted {
        script: Vec<DriveLevel>,
        seen: Vec<WireLevel>,
        erase: bool,
    }

    impl BusNode for Scripted {
        fn drive(&mut self) -> DriveLevel {
            self.script.get(self.seen.len()).copied().unwrap_or(P)
        }
        fn observe(&mut self, level: WireLevel) {
            self.seen.push(level);
        }
        fn may_erase(&self) -> bool {
            self.erase
        }
    }

    fn scripted(script: Vec<DriveLevel>) -> Scripted {
        Scripted {
            script,
            seen: vec![],
            erase: false,
        }
    }

    #[test]
    fn propagation_shifts_observation() {
        let timing = BitTimingConfig::for_bitrate(500_000, 10).unwrap();
        // 200 ns quanta, 100 m at 5 ns/m = 500 ns = 3 quanta.
        let topo = BusTopology::new(100.0, vec![0.0, 100.0]).unwrap();
        let mut bus = Bus::new(vec![scripted(vec![D, D, P]), scripted(vec![])], &topo, &timing).unwrap();
        bus.run(8);
        let far: Vec<_> = bus.nodes()[1].seen.iter().map(|l| l.bit()).collect();
        assert_eq!(far, vec![true, true, true, false, false, true, true, true]);
        let near: Vec<_> = bus.nodes()[0].seen.iter().map(|l| l.bit()).collect();
        assert_eq!(near, vec![false, false, true, true, true, true, true, true]);
    }

    #[test]
    fn erase_overrides_and_counts_diagnostics() {
        let timing = BitTimingConfig::for_bitrate(500_000, 10).unwrap();
        let topo = BusTopology::new(1.0, vec![0.0, 0.0, 0.0]).unwrap();
        let mut a = scripted(vec![E, E]);
        a.erase = true;
        let mut bus = Bus::new(vec![scripted(vec![D, D]), a, scripted(vec![P, E])], &topo, &timing).unwrap();
        bus.enable_trace(&topo, &timing, 0.0);
        bus.run(3);
        assert_eq!(bus.nodes()[0].seen[0], WireLevel::Recessive);
        assert_eq!(bus.diagnostics().multi_erase_quanta, 1);
        assert_eq!(bus.diagnostics().illegal_erase_quanta, 1);
        let tr = bus.trace().unwrap();
        assert_eq!(tr.at(0), Some((WireLevel::Recessive, 0b011)));
        assert_eq!(tr.at(2), Some((WireLevel::Recessive, 0)));
        assert_eq!(tr.end_quantum(), 3);
    }

    #[test]
    fn order_independence() {
        let timing = BitTimingConfig::for_bitrate(500_000, 10).unwrap();
        let topo = BusTopology::new(40.0, vec![0.0, 20.0, 40.0]).unwrap();
        let scripts = [vec![D, P, D, P], vec![P, E, P, P], vec![P, P, P, D]];
        let mut fwd = Bus::new(scripts.iter().cloned().map(scripted).collect(), &topo, &timing).unwrap();
        fwd.run(10);
        let rev_topo = BusTopology::new(40.0, vec![40.0, 20.0, 0.0]).unwrap();
        let mut rev = Bus::new(scripts.iter().rev().cloned().map(scripted).collect(), &rev_topo, &timing).unwrap();
        rev.run(10);
        for i in 0..3 {
            assert_eq!(fwd.nodes()[i].seen, rev.nodes()[2 - i].seen);
        }
    }
}
