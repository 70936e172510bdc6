//! Time-step simulation of the analog distribution chain.
//!
//! The engine replays compiled frames against an RC model of the chain:
//! first-order DAC settling, switch-resistance charging of the holding
//! capacitors, charge sharing between reservoir and output capacitors,
//! linear or resistive droop during hold intervals, per-transition charge
//! injection, and a committed-step crosstalk coupling matrix.
//!
//! Every substep uses the closed-form exponential solution of the active
//! one- or two-capacitor network, so integration is unconditionally stable
//! and a single slot matches the analytic [`drive_charge`] /
//! [`charge_share`] expressions exactly, independent of the oversampling
//! factor.

use std::collections::BTreeSet;

use thiserror::Error;

use crate::model::{CrosstalkMatrix, LeakageSpec, SwitchSpec, SystemConfig, ValidationErrors};
use crate::scheduler::{Frame, SlotPurpose};

/// Identifier of one circuit node.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    /// DAC + amplifier output (the demux input line).
    Dac,
    /// Stage-1 branch node of a two-stage tree (reservoir capacitor plus
    /// stage-2 switch on-capacitance).
    Branch(u32),
    /// Final output / electrode holding node.
    Channel(u32),
}

impl std::fmt::Display for NodeId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NodeId::Dac => write!(f, "dac"),
            NodeId::Branch(k) => write!(f, "s1_{k}"),
            NodeId::Channel(c) => write!(f, "ch_{c}"),
        }
    }
}

impl std::str::FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "dac" {
            return Ok(NodeId::Dac);
        }
        if let Some(k) = s.strip_prefix("s1_") {
            return k.parse().map(NodeId::Branch).map_err(|e| e.to_string());
        }
        if let Some(c) = s.strip_prefix("ch_") {
            return c.parse().map(NodeId::Channel).map_err(|e| e.to_string());
        }
        Err(format!("unknown node id {s:?}"))
    }
}

/// Capacitive circuit node with its present voltage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NodeState {
    pub id: NodeId,
    pub capacitance_f: f64,
    pub voltage_v: f64,
}

impl NodeState {
    pub fn new(id: NodeId, capacitance_f: f64, voltage_v: f64) -> Self {
        Self {
            id,
            capacitance_f,
            voltage_v,
        }
    }
}

/// Drives `node` toward a stiff source through `r_ohm` for `dt_s`:
/// `V' = source + (V - source) * exp(-dt / (r * C))`.
pub fn drive_charge(node: &mut NodeState, source_v: f64, r_ohm: f64, dt_s: f64) {
    if dt_s <= 0.0 {
        return;
    }
    let tau = r_ohm * node.capacitance_f;
    node.voltage_v = if tau <= 0.0 {
        source_v
    } else {
        source_v + (node.voltage_v - source_v) * (-dt_s / tau).exp()
    };
}

/// Shares charge between two capacitors through `r_ohm` for `dt_s`.
///
/// Both nodes approach the charge-conserving equilibrium
/// `V_inf = (Ca*Va + Cb*Vb) / (Ca + Cb)` with time constant
/// `r * Ca*Cb/(Ca+Cb)`; total charge is conserved at every substep.
pub fn charge_share(a: &mut NodeState, b: &mut NodeState, r_ohm: f64, dt_s: f64) {
    if dt_s <= 0.0 {
        return;
    }
    let (ca, cb) = (a.capacitance_f, b.capacitance_f);
    let total = ca + cb;
    if total <= 0.0 {
        return;
    }
    let v_inf = (ca * a.voltage_v + cb * b.voltage_v) / total;
    let tau = r_ohm * (ca * cb / total);
    let residual = if tau <= 0.0 { 0.0 } else { (-dt_s / tau).exp() };
    a.voltage_v = v_inf + (a.voltage_v - v_inf) * residual;
    b.voltage_v = v_inf + (b.voltage_v - v_inf) * residual;
}

/// Applies hold-interval leakage to a disconnected node.
///
/// Linear mode scales the fitted droop rate with `V / reference`; resistive
/// mode decays exponentially with `tau = R_leak * C`.
pub fn apply_droop(node: &mut NodeState, dt_s: f64, leak: &LeakageSpec) {
    match *leak {
        LeakageSpec::None => {}
        LeakageSpec::LinearDroop {
            droop_rate_v_per_s,
            reference_voltage_v,
        } => {
            if droop_rate_v_per_s != 0.0 {
                node.voltage_v +=
                    droop_rate_v_per_s * (node.voltage_v / reference_voltage_v) * dt_s;
            }
        }
        LeakageSpec::OffResistance { resistance_ohm } => {
            let tau = resistance_ohm * node.capacitance_f;
            if tau > 0.0 {
                node.voltage_v *= (-dt_s / tau).exp();
            }
        }
    }
}

/// Shifts a node by `q / C` for one OFF→ON transition of the switch that
/// connects it.
pub fn apply_charge_injection(node: &mut NodeState, sw: &SwitchSpec) {
    if sw.injected_charge_c != 0.0 && node.capacitance_f > 0.0 {
        node.voltage_v += sw.injected_charge_c / node.capacitance_f;
    }
}

/// Adds `sum_j coupling[victim][j] * dv[j]` to every victim, where `dv` is
/// the vector of committed channel voltage changes this substep.
pub fn apply_crosstalk(channels: &mut [NodeState], dv_aggressors: &[f64], xt: &CrosstalkMatrix) {
    for e in &xt.entries {
        let (v, a) = (e.victim as usize, e.aggressor as usize);
        if v < channels.len() && a < dv_aggressors.len() {
            channels[v].voltage_v += e.coupling * dv_aggressors[a];
        }
    }
}

/// Annotation on the shared time axis of a [`TraceSet`].
#[derive(Debug, Clone, PartialEq)]
pub enum EventMarker {
    SlotStart {
        tick: u64,
        frame: u32,
        slot: u32,
        purpose: SlotPurpose,
    },
    SwitchTransition {
        tick: u64,
        stage: u32,
        from: Option<u32>,
        to: Option<u32>,
    },
}

impl EventMarker {
    pub fn tick(&self) -> u64 {
        match self {
            EventMarker::SlotStart { tick, .. } | EventMarker::SwitchTransition { tick, .. } => {
                *tick
            }
        }
    }
}

/// Simulated voltage series of every probed node on one tick axis.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    /// Substep ticks per second: DAC update rate times the oversampling.
    pub tick_rate_hz: u64,
    pub oversampling: u32,
    /// Tick axis shared by every series; contiguous from 0.
    pub ticks: Vec<u64>,
    pub nodes: Vec<NodeId>,
    /// One voltage series per entry of `nodes`.
    pub series: Vec<Vec<f64>>,
    pub markers: Vec<EventMarker>,
}

impl TraceSet {
    pub fn time_s(&self, tick: u64) -> f64 {
        tick as f64 / self.tick_rate_hz as f64
    }

    pub fn series(&self, id: NodeId) -> Option<&[f64]> {
        let idx = self.nodes.iter().position(|n| *n == id)?;
        Some(&self.series[idx])
    }

    /// Voltage of `id` at a tick (ticks are contiguous from 0).
    pub fn value(&self, id: NodeId, tick: u64) -> Option<f64> {
        self.series(id)?.get(tick as usize).copied()
    }

    pub fn last_tick(&self) -> u64 {
        *self.ticks.last().unwrap_or(&0)
    }

    /// Ticks per DAC slot.
    pub fn ticks_per_slot(&self) -> u64 {
        self.oversampling as u64
    }
}

/// Simulation controls.
#[derive(Debug, Clone, PartialEq)]
pub struct SimOptions {
    /// Substeps per DAC slot; at least 4.
    pub oversampling: u32,
    /// Nodes to record; empty records every node.
    pub probe: BTreeSet<NodeId>,
    /// Reserved for noise hooks; participates in determinism checks only —
    /// no noise model ships.
    pub seed: u64,
    /// Node voltages to preload before the first slot, for characterization
    /// runs (droop, crosstalk, single-slot oracles).
    pub initial_voltages: Vec<(NodeId, f64)>,
}

impl Default for SimOptions {
    fn default() -> Self {
        Self {
            oversampling: 16,
            probe: BTreeSet::new(),
            seed: 0,
            initial_voltages: Vec::new(),
        }
    }
}

/// Simulation failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum SimError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(ValidationErrors),
    #[error("oversampling must be at least 4, got {0}")]
    OversamplingTooLow(u32),
    #[error("unknown node {0} in simulation options")]
    UnknownNode(String),
    #[error("node {node} reached {voltage_v:.3} V at tick {tick}, outside the ±{guard_v:.3} V guard band")]
    NumericalBlowup {
        node: String,
        tick: u64,
        voltage_v: f64,
        guard_v: f64,
    },
}

/// Transfer active during (part of) a slot.
#[derive(Debug, Clone, Copy)]
enum Transfer {
    /// DAC drives a branch reservoir through the stage-1 switch.
    DriveBranch { branch: usize, r_ohm: f64 },
    /// DAC drives an output node directly.
    DriveChannel { channel: usize, r_ohm: f64 },
    /// Branch reservoir shares into an output node.
    Share {
        branch: usize,
        channel: usize,
        r_ohm: f64,
    },
}

#[derive(Debug, Default)]
struct SlotPlan {
    /// Transfers active for the whole slot, or for the first half when
    /// `late` is non-empty.
    early: Vec<Transfer>,
    /// Transfers for the second half of a split slot (in-slot hand-off of
    /// the naive one-slot-per-channel sequence).
    late: Vec<Transfer>,
}

struct Engine<'a> {
    cfg: &'a SystemConfig,
    dac_v: f64,
    branches: Vec<NodeState>,
    channels: Vec<NodeState>,
    /// Conducting output per stage at the end of the previous slot.
    prev_states: Vec<Option<u32>>,
    /// Electrode offset applied to demux channel indices under zone routing.
    electrode_offset: usize,
}

impl<'a> Engine<'a> {
    fn new(cfg: &'a SystemConfig) -> Self {
        let branches = match cfg.topology.stages.len() {
            2 => {
                let c_branch = cfg.topology.branch_capacitance_f().unwrap();
                (0..cfg.topology.stages[0].outputs_used)
                    .map(|k| NodeState::new(NodeId::Branch(k), c_branch, 0.0))
                    .collect()
            }
            _ => Vec::new(),
        };
        let c_out = cfg.topology.output_capacitance_f();
        let channels = (0..cfg.electrode_count())
            .map(|c| NodeState::new(NodeId::Channel(c), c_out, 0.0))
            .collect();
        let electrode_offset = match &cfg.routing {
            Some(r) => (r.active_group * r.k_demux_outputs) as usize,
            None => 0,
        };
        Self {
            cfg,
            dac_v: 0.0,
            branches,
            channels,
            prev_states: vec![None; cfg.topology.stages.len()],
            electrode_offset,
        }
    }

    /// Electrode node index fed by demux channel `c`.
    fn electrode(&self, c: u32) -> usize {
        self.electrode_offset + c as usize
    }

    fn two_stage_channel(&self, branch: u32, output: u32) -> usize {
        let s2 = self.cfg.topology.stages[1].outputs_used;
        self.electrode(branch * s2 + output)
    }

    fn plan(&self, states: &[Option<u32>], purpose: SlotPurpose) -> SlotPlan {
        let mut plan = SlotPlan::default();
        if matches!(purpose, SlotPurpose::Idle) {
            return plan;
        }
        match self.cfg.topology.stages.len() {
            2 => {
                let r1 = self.cfg.topology.stages[0].switch.r_on_ohm;
                let r2 = self.cfg.topology.stages[1].switch.r_on_ohm;
                let s1_state = states.first().copied().flatten();
                let s2_state = states.get(1).copied().flatten();
                match purpose {
                    SlotPurpose::Stage1Charge => {
                        if let Some(k) = s1_state {
                            plan.early.push(Transfer::DriveBranch {
                                branch: k as usize,
                                r_ohm: r1,
                            });
                        }
                    }
                    SlotPurpose::Stage2Deliver => {
                        if let Some(j) = s2_state {
                            for k in 0..self.branches.len() as u32 {
                                plan.early.push(Transfer::Share {
                                    branch: k as usize,
                                    channel: self.two_stage_channel(k, j),
                                    r_ohm: r2,
                                });
                            }
                        }
                        // An assisted delivery keeps one branch source-driven.
                        if let Some(k) = s1_state {
                            plan.early.push(Transfer::DriveBranch {
                                branch: k as usize,
                                r_ohm: r1,
                            });
                        }
                    }
                    SlotPurpose::DirectDeliver => {
                        let (Some(k), Some(j)) = (s1_state, s2_state) else {
                            return plan;
                        };
                        let c_branch = self.cfg.topology.branch_capacitance_f().unwrap();
                        if c_branch <= 0.0 {
                            // No intermediate storage: the path is a plain
                            // series-RC drive through both switches.
                            plan.early.push(Transfer::DriveChannel {
                                channel: self.two_stage_channel(k, j),
                                r_ohm: r1 + r2,
                            });
                        } else {
                            // Charge the reservoir first, then hand off; the
                            // source is disconnected during the hand-off, so
                            // the output only receives the shared charge.
                            plan.early.push(Transfer::DriveBranch {
                                branch: k as usize,
                                r_ohm: r1,
                            });
                            for kb in 0..self.branches.len() as u32 {
                                plan.late.push(Transfer::Share {
                                    branch: kb as usize,
                                    channel: self.two_stage_channel(kb, j),
                                    r_ohm: r2,
                                });
                            }
                        }
                    }
                    SlotPurpose::Idle => {}
                }
            }
            _ => {
                if let Some(k) = states.first().copied().flatten() {
                    let r = self.cfg.topology.stages[0].switch.r_on_ohm;
                    plan.early.push(Transfer::DriveChannel {
                        channel: self.electrode(k),
                        r_ohm: r,
                    });
                }
            }
        }
        plan
    }

    /// Applies OFF→ON charge injection for this slot's transitions and
    /// records transition markers. Called once at the slot boundary.
    fn apply_transitions(
        &mut self,
        states: &[Option<u32>],
        tick: u64,
        markers: &mut Vec<EventMarker>,
    ) {
        for (stage_idx, (&new, &old)) in states.iter().zip(self.prev_states.iter()).enumerate() {
            if new != old {
                markers.push(EventMarker::SwitchTransition {
                    tick,
                    stage: stage_idx as u32,
                    from: old,
                    to: new,
                });
            }
            let Some(on) = new else { continue };
            if old == Some(on) {
                continue;
            }
            let sw = self.cfg.topology.stages[stage_idx].switch;
            match (self.cfg.topology.stages.len(), stage_idx) {
                (2, 0) => apply_charge_injection(&mut self.branches[on as usize], &sw),
                (2, 1) => {
                    // Every branch's stage-2 switch shares the address, so
                    // each output in the column sees one transition.
                    for k in 0..self.branches.len() as u32 {
                        let ch = self.two_stage_channel(k, on);
                        apply_charge_injection(&mut self.channels[ch], &sw);
                    }
                }
                _ => {
                    let ch = self.electrode(on);
                    apply_charge_injection(&mut self.channels[ch], &sw);
                }
            }
        }
        self.prev_states = states.to_vec();
    }

    fn integrate(&mut self, transfers: &[Transfer], dt_s: f64) {
        for t in transfers {
            match *t {
                Transfer::DriveBranch { branch, r_ohm } => {
                    drive_charge(&mut self.branches[branch], self.dac_v, r_ohm, dt_s);
                }
                Transfer::DriveChannel { channel, r_ohm } => {
                    drive_charge(&mut self.channels[channel], self.dac_v, r_ohm, dt_s);
                }
                Transfer::Share {
                    branch,
                    channel,
                    r_ohm,
                } => {
                    // Split borrow: branch and channel live in different vecs.
                    let b = &mut self.branches[branch];
                    let c = &mut self.channels[channel];
                    charge_share(b, c, r_ohm, dt_s);
                }
            }
        }
    }

    fn involved(&self, transfers: &[Transfer]) -> (BTreeSet<usize>, BTreeSet<usize>) {
        let mut branches = BTreeSet::new();
        let mut channels = BTreeSet::new();
        for t in transfers {
            match *t {
                Transfer::DriveBranch { branch, .. } => {
                    branches.insert(branch);
                }
                Transfer::DriveChannel { channel, .. } => {
                    channels.insert(channel);
                }
                Transfer::Share {
                    branch, channel, ..
                } => {
                    branches.insert(branch);
                    channels.insert(channel);
                }
            }
        }
        (branches, channels)
    }
}

/// Runs a compiled frame stream against the analog model.
///
/// Returns the voltage trace of every probed node, sampled once per substep
/// on a shared tick axis, with slot-boundary and switch-transition markers.
pub fn run(cfg: &SystemConfig, frames: &[Frame], opts: &SimOptions) -> Result<TraceSet, SimError> {
    crate::model::validate_config(cfg.clone()).map_err(SimError::InvalidConfig)?;
    if opts.oversampling < 4 {
        return Err(SimError::OversamplingTooLow(opts.oversampling));
    }

    let mut engine = Engine::new(cfg);
    for &(id, v) in &opts.initial_voltages {
        let node = match id {
            NodeId::Dac => {
                engine.dac_v = v;
                continue;
            }
            NodeId::Branch(k) => engine
                .branches
                .get_mut(k as usize)
                .ok_or_else(|| SimError::UnknownNode(id.to_string()))?,
            NodeId::Channel(c) => engine
                .channels
                .get_mut(c as usize)
                .ok_or_else(|| SimError::UnknownNode(id.to_string()))?,
        };
        node.voltage_v = v;
    }

    // Probed node list in deterministic order.
    let mut all_nodes = vec![NodeId::Dac];
    all_nodes.extend(engine.branches.iter().map(|b| b.id));
    all_nodes.extend(engine.channels.iter().map(|c| c.id));
    let nodes: Vec<NodeId> = if opts.probe.is_empty() {
        all_nodes.clone()
    } else {
        for p in &opts.probe {
            if !all_nodes.contains(p) {
                return Err(SimError::UnknownNode(p.to_string()));
            }
        }
        opts.probe.iter().copied().collect()
    };

    let os = opts.oversampling;
    let total_slots: usize = frames.iter().map(|f| f.slots.len()).sum();
    let total_ticks = total_slots * os as usize;
    let mut ticks = Vec::with_capacity(total_ticks + 1);
    let mut series: Vec<Vec<f64>> = nodes
        .iter()
        .map(|_| Vec::with_capacity(total_ticks + 1))
        .collect();
    let mut markers = Vec::new();

    let record = |engine: &Engine, series: &mut Vec<Vec<f64>>| {
        for (idx, node) in nodes.iter().enumerate() {
            let v = match node {
                NodeId::Dac => engine.dac_v,
                NodeId::Branch(k) => engine.branches[*k as usize].voltage_v,
                NodeId::Channel(c) => engine.channels[*c as usize].voltage_v,
            };
            series[idx].push(v);
        }
    };

    ticks.push(0);
    record(&engine, &mut series);

    let dt = cfg.dac.slot_duration_s() / os as f64;
    let guard_v = cfg.dac.full_scale_v + 1.0;
    let settle_tc = cfg.dac.settle_time_constant_s;
    let xt_active = !cfg.crosstalk.is_zero();
    let leak_active = !matches!(cfg.leakage, LeakageSpec::None);
    let mut tick: u64 = 0;

    for (frame_idx, frame) in frames.iter().enumerate() {
        for slot in &frame.slots {
            let slot_start = tick;
            markers.push(EventMarker::SlotStart {
                tick: slot_start,
                frame: frame_idx as u32,
                slot: slot.index,
                purpose: slot.purpose,
            });
            let plan = engine.plan(&slot.stage_states, slot.purpose);
            let split_at = if plan.late.is_empty() { os } else { os / 2 };
            let dac_target = cfg.dac.dequantize(slot.dac_code);

            let mut pre_slot = true;
            for sub in 0..os {
                let pre: Vec<f64> = if xt_active {
                    engine.channels.iter().map(|c| c.voltage_v).collect()
                } else {
                    Vec::new()
                };
                if pre_slot {
                    engine.apply_transitions(&slot.stage_states, slot_start, &mut markers);
                    pre_slot = false;
                }

                // DAC + amplifier first-order settling toward the slot code.
                if settle_tc > 0.0 {
                    engine.dac_v = dac_target + (engine.dac_v - dac_target) * (-dt / settle_tc).exp();
                } else {
                    engine.dac_v = dac_target;
                }

                let transfers = if sub < split_at { &plan.early } else { &plan.late };
                if leak_active {
                    let (busy_branches, busy_channels) = engine.involved(transfers);
                    for (k, b) in engine.branches.iter_mut().enumerate() {
                        if !busy_branches.contains(&k) {
                            apply_droop(b, dt, &cfg.leakage);
                        }
                    }
                    for (c, ch) in engine.channels.iter_mut().enumerate() {
                        if !busy_channels.contains(&c) {
                            apply_droop(ch, dt, &cfg.leakage);
                        }
                    }
                }
                engine.integrate(transfers, dt);

                if xt_active {
                    let dv: Vec<f64> = engine
                        .channels
                        .iter()
                        .zip(pre.iter())
                        .map(|(c, p)| c.voltage_v - p)
                        .collect();
                    apply_crosstalk(&mut engine.channels, &dv, &cfg.crosstalk);
                }

                tick += 1;
                for node in engine.branches.iter().chain(engine.channels.iter()) {
                    if !node.voltage_v.is_finite() || node.voltage_v.abs() > guard_v {
                        return Err(SimError::NumericalBlowup {
                            node: node.id.to_string(),
                            tick,
                            voltage_v: node.voltage_v,
                            guard_v,
                        });
                    }
                }
                ticks.push(tick);
                record(&engine, &mut series);
            }
        }
    }

    Ok(TraceSet {
        tick_rate_hz: cfg.dac.update_rate_hz * os as u64,
        oversampling: os,
        ticks,
        nodes,
        series,
        markers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{
        validate_config, CouplingEntry, CrosstalkMatrix, DacSpec, DemuxStage, DemuxTopology,
        LeakageSpec, SwitchSpec, SystemConfig, TimingPolicy,
    };
    use crate::scheduler::{compile_static_frame, VoltageProgram};

    fn node(c_f: f64, v: f64) -> NodeState {
        NodeState::new(NodeId::Channel(0), c_f, v)
    }

    #[test]
    fn drive_charge_identity_at_zero_dt() {
        let mut n = node(470e-12, 3.3);
        drive_charge(&mut n, 10.0, 100.0, 0.0);
        assert_eq!(n.voltage_v, 3.3);
    }

    #[test]
    fn drive_charge_one_tau_leaves_e_inverse() {
        let mut n = node(470e-12, 0.0);
        let r = 100.0;
        let tau = r * n.capacitance_f;
        drive_charge(&mut n, 10.0, r, tau);
        assert!((n.voltage_v - 10.0 * (1.0 - (-1.0f64).exp())).abs() < 1e-12);
    }

    #[test]
    fn drive_charge_five_tau_reaches_9_9326() {
        let mut n = node(470e-12, 0.0);
        let r = 100.0;
        let dt = 5.0 * r * n.capacitance_f;
        drive_charge(&mut n, 10.0, r, dt);
        assert!((n.voltage_v - 9.9326).abs() < 1e-4);
    }

    #[test]
    fn charge_share_equal_caps_meet_in_the_middle() {
        let mut a = node(1e-9, 10.0);
        let mut b = node(1e-9, 0.0);
        charge_share(&mut a, &mut b, 10.0, 1.0);
        assert!((a.voltage_v - 5.0).abs() < 1e-12);
        assert!((b.voltage_v - 5.0).abs() < 1e-12);
    }

    #[test]
    fn charge_share_reservoir_into_output() {
        // 2.7 nF at 10 V into 470 pF at 0 V -> 10 * 2700 / 3170.
        let mut a = node(2.7e-9, 10.0);
        let mut b = node(470e-12, 0.0);
        charge_share(&mut a, &mut b, 10.0, 1.0);
        let expected = 10.0 * 2.7e-9 / (2.7e-9 + 470e-12);
        assert!((a.voltage_v - expected).abs() < 1e-9);
        assert!((b.voltage_v - expected).abs() < 1e-9);
        assert!((expected - 8.517).abs() < 1e-3);
    }

    #[test]
    fn charge_share_on_capacitance_alone_undershoots() {
        // The voltage-division failure a stage-1 reservoir fixes.
        let mut a = node(185e-12, 10.0);
        let mut b = node(470e-12, 0.0);
        charge_share(&mut a, &mut b, 10.0, 1.0);
        let expected = 10.0 * 185.0 / 655.0;
        assert!((b.voltage_v - expected).abs() < 1e-9);
        assert!((expected - 2.824).abs() < 1e-3);
    }

    #[test]
    fn charge_is_conserved() {
        let mut a = node(2.7e-9, -7.5);
        let mut b = node(470e-12, 4.25);
        let q0 = a.capacitance_f * a.voltage_v + b.capacitance_f * b.voltage_v;
        for _ in 0..100 {
            charge_share(&mut a, &mut b, 50.0, 1e-9);
            let q = a.capacitance_f * a.voltage_v + b.capacitance_f * b.voltage_v;
            assert!((q - q0).abs() <= 1e-12 * q0.abs().max(1e-12));
        }
    }

    #[test]
    fn droop_examples() {
        let leak = LeakageSpec::LinearDroop {
            droop_rate_v_per_s: -19.2e-3,
            reference_voltage_v: 10.0,
        };
        let mut n = node(2.7e-9, 10.0);
        apply_droop(&mut n, 26.7e-6, &leak);
        let dv = n.voltage_v - 10.0;
        assert!((dv + 0.513e-6).abs() < 0.005e-6, "dv = {dv}");

        let mut zero = node(2.7e-9, 0.0);
        apply_droop(&mut zero, 26.7e-6, &leak);
        assert_eq!(zero.voltage_v, 0.0);

        let mut long = node(2.7e-9, 10.0);
        apply_droop(&mut long, 1.0, &leak);
        assert!((long.voltage_v - 9.9808).abs() < 1e-9);
    }

    #[test]
    fn injection_examples() {
        let mut sw = SwitchSpec {
            r_on_ohm: 10.0,
            c_on_f: 0.0,
            injected_charge_c: 0.0,
            off_leak_resistance_ohm: None,
        };
        let mut n = node(470e-12, 1.0);
        apply_charge_injection(&mut n, &sw);
        assert_eq!(n.voltage_v, 1.0);

        sw.injected_charge_c = 1e-12;
        apply_charge_injection(&mut n, &sw);
        assert!((n.voltage_v - 1.0 - 2.13e-3).abs() < 0.01e-3);

        sw.injected_charge_c = -1e-12;
        let mut big = node(2.7e-9, 0.0);
        apply_charge_injection(&mut big, &sw);
        assert!((big.voltage_v + 0.370e-3).abs() < 0.001e-3);
    }

    #[test]
    fn crosstalk_zero_row_leaves_victims_unchanged() {
        let mut channels = vec![node(470e-12, 1.0), node(470e-12, 2.0)];
        apply_crosstalk(&mut channels, &[5.0, 5.0], &CrosstalkMatrix::zero());
        assert_eq!(channels[0].voltage_v, 1.0);
        assert_eq!(channels[1].voltage_v, 2.0);
    }

    #[test]
    fn crosstalk_couples_committed_steps() {
        let xt = CrosstalkMatrix::from_entries(
            2,
            vec![CouplingEntry {
                victim: 1,
                aggressor: 0,
                coupling: 0.2512,
            }],
        );
        let mut channels = vec![node(470e-12, 10.0), node(470e-12, 0.0)];
        apply_crosstalk(&mut channels, &[10.0, 0.0], &xt);
        assert!((channels[1].voltage_v - 2.512).abs() < 1e-12);
    }

    fn ideal_single_stage(n: u32) -> SystemConfig {
        validate_config(SystemConfig {
            dac: DacSpec {
                update_rate_hz: 4_000_000,
                resolution_bits: 14,
                full_scale_v: 10.0,
                settle_time_constant_s: 0.0,
            },
            topology: DemuxTopology {
                stages: vec![DemuxStage {
                    fanout: n,
                    outputs_used: n,
                    switch: SwitchSpec {
                        r_on_ohm: 1e-6,
                        c_on_f: 0.0,
                        injected_charge_c: 0.0,
                        off_leak_resistance_ohm: None,
                    },
                    hold_capacitance_f: 120e-12,
                    has_decoder: false,
                }],
                total_channels: Some(n),
            },
            routing: None,
            leakage: LeakageSpec::None,
            crosstalk: CrosstalkMatrix::zero(),
            per_channel_rate_hz: 4_000_000 / n as u64,
            electrode_count: Some(n),
            two_step_charging: true,
            timing: TimingPolicy::default(),
        })
        .unwrap()
    }

    #[test]
    fn zero_programs_give_zero_traces() {
        let cfg = ideal_single_stage(4);
        let programs: Vec<VoltageProgram> = (0..4).map(|c| VoltageProgram::dc(c, 0.0)).collect();
        let frame = compile_static_frame(&cfg, &programs).unwrap();
        let trace = run(&cfg, &[frame], &SimOptions::default()).unwrap();
        for c in 0..4 {
            let series = trace.series(NodeId::Channel(c)).unwrap();
            assert!(series.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn ideal_chain_hits_targets_at_slot_boundaries() {
        let cfg = ideal_single_stage(4);
        let targets = [-10.0, -2.5, 2.5, 10.0];
        let programs: Vec<VoltageProgram> = targets
            .iter()
            .enumerate()
            .map(|(c, &v)| VoltageProgram::dc(c as u32, v))
            .collect();
        let frame = compile_static_frame(&cfg, &programs).unwrap();
        let trace = run(&cfg, &[frame], &SimOptions::default()).unwrap();
        let half_lsb = cfg.dac.lsb_v() / 2.0;
        for (c, &target) in targets.iter().enumerate() {
            let end = trace.last_tick();
            let v = trace.value(NodeId::Channel(c as u32), end).unwrap();
            assert!((v - target).abs() <= half_lsb + 1e-12, "ch {c}: {v} vs {target}");
        }
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let cfg = ideal_single_stage(4);
        let programs: Vec<VoltageProgram> =
            (0..4).map(|c| VoltageProgram::dc(c, c as f64 - 1.5)).collect();
        let frame = compile_static_frame(&cfg, &programs).unwrap();
        let a = run(&cfg, &[frame.clone()], &SimOptions::default()).unwrap();
        let b = run(&cfg, &[frame], &SimOptions::default()).unwrap();
        assert_eq!(a, b);
        for (sa, sb) in a.series.iter().zip(b.series.iter()) {
            for (x, y) in sa.iter().zip(sb.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn oversampling_below_four_is_rejected() {
        let cfg = ideal_single_stage(4);
        let opts = SimOptions {
            oversampling: 2,
            ..SimOptions::default()
        };
        assert!(matches!(
            run(&cfg, &[], &opts),
            Err(SimError::OversamplingTooLow(2))
        ));
    }

    #[test]
    fn markers_align_to_slot_boundaries() {
        let cfg = ideal_single_stage(4);
        let programs: Vec<VoltageProgram> = (0..4).map(|c| VoltageProgram::dc(c, 1.0)).collect();
        let frame = compile_static_frame(&cfg, &programs).unwrap();
        let os = 16;
        let trace = run(
            &cfg,
            &[frame],
            &SimOptions {
                oversampling: os,
                ..SimOptions::default()
            },
        )
        .unwrap();
        for m in &trace.markers {
            if let EventMarker::SlotStart { tick, .. } = m {
                assert_eq!(tick % os as u64, 0);
            }
        }
    }
}
