//! Hardware description of one TDM voltage-distribution chain.
//!
//! A [`SystemConfig`] captures everything the compiler and simulator need to
//! know about the signal path: the DAC and its output amplifier, the
//! demultiplexer tree with its holding capacitors and switch parasitics,
//! optional downstream zone routing, leakage, and the inter-channel coupling
//! matrix. Validation collects *every* violated invariant instead of stopping
//! at the first, and [`derive_timing`] turns the configuration into the slot
//! and settling budget the scheduler checks against.
//!
//! Timing quantities are exact rationals on the DAC update clock so that
//! frame lengths, effective rates, and select-line synchronization never
//! accumulate floating-point error.

use num::rational::Ratio;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Exact rational used for clock-derived quantities (seconds, hertz).
pub type Rational = Ratio<i64>;

/// DAC plus output-amplifier specification.
///
/// The amplifier is folded in as ideal gain: `full_scale_v` is the range at
/// the demultiplexer input, and `settle_time_constant_s` is the first-order
/// settling of the combined DAC + amplifier output.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DacSpec {
    /// Update rate in hertz. Integer so slot timing stays exact.
    pub update_rate_hz: u64,
    /// Converter resolution in bits. Valid range 8..=20.
    pub resolution_bits: u32,
    /// Symmetric output range: codes span `-full_scale_v..=+full_scale_v`.
    pub full_scale_v: f64,
    /// First-order settling time constant of the DAC + amplifier output.
    #[serde(default)]
    pub settle_time_constant_s: f64,
}

impl DacSpec {
    /// Width of one code step. The grid is symmetric mid-tread: code 0 maps
    /// to `-full_scale_v`, the top code to `+full_scale_v`, and the middle
    /// code to exactly 0 V (one code of headroom is unused for symmetry).
    pub fn lsb_v(&self) -> f64 {
        2.0 * self.full_scale_v / (self.max_code() as f64)
    }

    /// Largest valid code, `2^resolution_bits - 2`.
    pub fn max_code(&self) -> u32 {
        ((1u64 << self.resolution_bits) - 2) as u32
    }

    /// Nearest code for a target voltage, clamped to the code range.
    pub fn quantize(&self, volts: f64) -> u32 {
        let max = self.max_code() as f64;
        let code = ((volts + self.full_scale_v) * max / (2.0 * self.full_scale_v)).round();
        if code < 0.0 {
            0
        } else if code > max {
            self.max_code()
        } else {
            code as u32
        }
    }

    /// Voltage produced by a code.
    pub fn dequantize(&self, code: u32) -> f64 {
        let code = code.min(self.max_code());
        (code as f64 * 2.0 * self.full_scale_v) / self.max_code() as f64 - self.full_scale_v
    }

    /// Duration of one DAC update slot, `1 / update_rate`, in seconds.
    pub fn slot_duration(&self) -> Rational {
        Ratio::new(1, self.update_rate_hz as i64)
    }

    /// Slot duration as floating-point seconds.
    pub fn slot_duration_s(&self) -> f64 {
        1.0 / self.update_rate_hz as f64
    }
}

/// Analog-switch parasitics for one demultiplexer stage.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SwitchSpec {
    /// On-resistance of one conducting path.
    pub r_on_ohm: f64,
    /// On-capacitance lumped at the switch common node.
    #[serde(default)]
    pub c_on_f: f64,
    /// Signed charge dumped onto the newly connected node per OFF→ON
    /// transition.
    #[serde(default)]
    pub injected_charge_c: f64,
    /// Optional leakage resistance of an open switch. Mutually exclusive
    /// with a config-level linear droop model.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub off_leak_resistance_ohm: Option<f64>,
}

/// One stage of the demultiplexer tree.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DemuxStage {
    /// Electrical fanout of the switch part (e.g. 8 for an 8:1 mux).
    pub fanout: u32,
    /// Outputs actually wired, `1..=fanout`.
    pub outputs_used: u32,
    /// Switch characteristics of this stage.
    pub switch: SwitchSpec,
    /// Holding capacitance per wired output of this stage.
    pub hold_capacitance_f: f64,
    /// Decoder-addressed (address lines + enable) versus one control line
    /// per switch.
    pub has_decoder: bool,
}

impl DemuxStage {
    /// Number of digital lines this stage consumes, excluding any shared
    /// enable: `ceil(log2(fanout))` when decoder-addressed, `fanout` lines
    /// (one-hot) otherwise.
    pub fn select_line_count(&self) -> u32 {
        if self.has_decoder {
            ceil_log2(self.fanout)
        } else {
            self.fanout
        }
    }
}

/// Smallest `b` with `2^b >= n` (0 for n <= 1).
pub(crate) fn ceil_log2(n: u32) -> u32 {
    if n <= 1 {
        0
    } else {
        32 - (n - 1).leading_zeros()
    }
}

/// Ordered demultiplexer stages from the DAC toward the electrodes.
///
/// One or two stages are supported. In a two-stage tree, each wired output
/// of stage 1 is one *branch* feeding the common pin of a stage-2 switch:
/// the wired channel count is the product of per-stage `outputs_used`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DemuxTopology {
    pub stages: Vec<DemuxStage>,
    /// Redundant wired-channel count; when present it must equal the
    /// product of per-stage `outputs_used`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_channels: Option<u32>,
}

impl DemuxTopology {
    /// Wired channel count: product of per-stage `outputs_used`.
    pub fn channel_count(&self) -> u32 {
        self.stages.iter().map(|s| s.outputs_used).product::<u32>()
    }

    /// Total digital select lines: per-stage lines plus one shared enable
    /// when any stage is decoder-addressed.
    pub fn select_line_count(&self) -> u32 {
        let lines: u32 = self.stages.iter().map(|s| s.select_line_count()).sum();
        let enable = u32::from(self.stages.iter().any(|s| s.has_decoder));
        lines + enable
    }

    /// Capacitance sitting on one stage-1 branch node of a two-stage tree:
    /// the branch holding capacitor plus the stage-2 switch on-capacitance.
    pub fn branch_capacitance_f(&self) -> Option<f64> {
        if self.stages.len() == 2 {
            Some(self.stages[0].hold_capacitance_f + self.stages[1].switch.c_on_f)
        } else {
            None
        }
    }

    /// Holding capacitance at a final output node.
    pub fn output_capacitance_f(&self) -> f64 {
        self.stages
            .last()
            .map(|s| s.hold_capacitance_f)
            .unwrap_or(0.0)
    }
}

/// Zone routing behind the demultiplexer: a 1:M switch network per demux
/// output extends K outputs to K×M electrodes, one active zone at a time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DynamicRouting {
    /// Demux outputs feeding the routing network (K).
    pub k_demux_outputs: u32,
    /// Zones per output (M).
    pub m_switch_fanout: u32,
    /// Zone currently receiving the TDM stream, `0..m_switch_fanout`.
    pub active_group: u32,
}

/// Leakage model for holding nodes during hold intervals.
///
/// Either a linear droop rate referred to a reference voltage (matching a
/// linear fit of a slow discharge measurement) or an off-resistance giving
/// exponential decay. The two are alternative models, never combined.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "model", rename_all = "snake_case")]
pub enum LeakageSpec {
    #[default]
    None,
    LinearDroop {
        /// Signed droop rate observed at the reference voltage.
        droop_rate_v_per_s: f64,
        /// Voltage at which the rate was measured; droop scales as
        /// `V / reference`.
        reference_voltage_v: f64,
    },
    OffResistance {
        /// Leakage resistance; decay time constant is `R * C_node`.
        resistance_ohm: f64,
    },
}

/// Sparse victim/aggressor coupling matrix over channel outputs.
///
/// Entry `(victim, aggressor, c)` adds `c * dV_aggressor` to the victim for
/// every committed aggressor voltage step. The diagonal is implicitly zero.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct CrosstalkMatrix {
    /// Channel count the matrix is defined over. Zero means "no coupling"
    /// regardless of the system size.
    #[serde(default)]
    pub size: u32,
    #[serde(default)]
    pub entries: Vec<CouplingEntry>,
}

/// One off-diagonal coupling coefficient.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CouplingEntry {
    pub victim: u32,
    pub aggressor: u32,
    pub coupling: f64,
}

impl CrosstalkMatrix {
    /// Matrix with no coupling.
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn from_entries(size: u32, entries: Vec<CouplingEntry>) -> Self {
        Self { size, entries }
    }

    /// True when no entry can produce a nonzero kick.
    pub fn is_zero(&self) -> bool {
        self.entries.iter().all(|e| e.coupling == 0.0)
    }

    /// Coupling coefficient from `aggressor` into `victim` (0 if absent).
    pub fn coupling(&self, victim: u32, aggressor: u32) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.victim == victim && e.aggressor == aggressor)
            .map(|e| e.coupling)
            .sum()
    }
}

/// Settling-budget policy used by validation and timing checks.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingPolicy {
    /// DAC settle time constants reserved at the start of every slot before
    /// capacitor charging is assumed to begin.
    pub k_settle: f64,
    /// Target per-channel settling accuracy in volts; sets the number of RC
    /// time constants a transfer must fit, `n_tau = ln(full_swing / epsilon)`.
    pub epsilon_v: f64,
    /// Refreshes allowed for a charge-share delivery to converge from a
    /// full-swing step to within `epsilon_v`; delivery paths that cannot are
    /// flagged as voltage-division / charge-starvation failures.
    pub refresh_budget: u32,
}

impl Default for TimingPolicy {
    fn default() -> Self {
        Self {
            k_settle: 5.0,
            epsilon_v: 1e-3,
            refresh_budget: 8,
        }
    }
}

fn default_true() -> bool {
    true
}

/// Full description of one TDM chain.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub dac: DacSpec,
    pub topology: DemuxTopology,
    /// Optional K×M zone routing behind the demux outputs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub routing: Option<DynamicRouting>,
    #[serde(default)]
    pub leakage: LeakageSpec,
    #[serde(default)]
    pub crosstalk: CrosstalkMatrix,
    /// Required per-channel update rate `f` in hertz.
    pub per_channel_rate_hz: u64,
    /// Redundant electrode count; must equal the wired channel count (times
    /// M when routing is present) when given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub electrode_count: Option<u32>,
    /// Charge the stage-1 reservoir capacitors in dedicated slots before the
    /// stage-2 delivery slot (two-stage trees only). Disabling compiles the
    /// naive one-slot-per-channel schedule.
    #[serde(default = "default_true")]
    pub two_step_charging: bool,
    #[serde(default)]
    pub timing: TimingPolicy,
}

impl SystemConfig {
    /// Channels delivered by the demux tree itself (before zone routing).
    pub fn demux_channel_count(&self) -> u32 {
        self.topology.channel_count()
    }

    /// Electrodes ultimately controlled: demux channels, times the zone
    /// count when routing is present.
    pub fn electrode_count(&self) -> u32 {
        match &self.routing {
            Some(r) => self.topology.channel_count() * r.m_switch_fanout,
            None => self.topology.channel_count(),
        }
    }

    /// DAC slots one full refresh of every demux channel consumes under the
    /// configured charging sequence.
    pub fn scheduled_slots_per_refresh(&self) -> u32 {
        match self.topology.stages.len() {
            2 => {
                let s1 = self.topology.stages[0].outputs_used;
                let s2 = self.topology.stages[1].outputs_used;
                if self.two_step_charging {
                    (s1 + 1) * s2
                } else {
                    s1 * s2
                }
            }
            _ => self.demux_channel_count(),
        }
    }

    /// Refresh period `slots_per_refresh / update_rate` in seconds.
    pub fn refresh_period_s(&self) -> f64 {
        self.scheduled_slots_per_refresh() as f64 / self.dac.update_rate_hz as f64
    }

    /// The 32-channel two-stage reference board: 1.5 MHz 16-bit DAC into a
    /// decoder-addressed 4x8 tree with 2.7 nF reservoir and 470 pF output
    /// capacitors, 185 pF switch on-capacitance, and the measured linear
    /// droop. Switch on-resistance and DAC settling are modeling choices
    /// sized to meet the default 1 mV budget, not datasheet values.
    pub fn reference_static_32ch() -> Self {
        let switch = SwitchSpec {
            r_on_ohm: 10.0,
            c_on_f: 185e-12,
            injected_charge_c: 0.0,
            off_leak_resistance_ohm: None,
        };
        Self {
            dac: DacSpec {
                update_rate_hz: 1_500_000,
                resolution_bits: 16,
                full_scale_v: 10.0,
                settle_time_constant_s: 20e-9,
            },
            topology: DemuxTopology {
                stages: vec![
                    DemuxStage {
                        fanout: 8,
                        outputs_used: 4,
                        switch,
                        hold_capacitance_f: 2.7e-9,
                        has_decoder: true,
                    },
                    DemuxStage {
                        fanout: 8,
                        outputs_used: 8,
                        switch,
                        hold_capacitance_f: 470e-12,
                        has_decoder: true,
                    },
                ],
                total_channels: Some(32),
            },
            routing: None,
            leakage: LeakageSpec::LinearDroop {
                droop_rate_v_per_s: -19.2e-3,
                reference_voltage_v: 10.0,
            },
            crosstalk: CrosstalkMatrix::zero(),
            per_channel_rate_hz: 37_500,
            electrode_count: Some(32),
            two_step_charging: true,
            timing: TimingPolicy::default(),
        }
    }

    /// The four-channel single-stage reference board: 4 MHz 14-bit DAC into
    /// a decoderless 1:4 switch with 120 pF holding capacitors, giving a
    /// 1 MHz per-channel rate.
    pub fn reference_dynamic_4ch() -> Self {
        Self {
            dac: DacSpec {
                update_rate_hz: 4_000_000,
                resolution_bits: 14,
                full_scale_v: 10.0,
                settle_time_constant_s: 10e-9,
            },
            topology: DemuxTopology {
                stages: vec![DemuxStage {
                    fanout: 4,
                    outputs_used: 4,
                    switch: SwitchSpec {
                        r_on_ohm: 10.0,
                        c_on_f: 0.0,
                        injected_charge_c: 0.0,
                        off_leak_resistance_ohm: None,
                    },
                    hold_capacitance_f: 120e-12,
                    has_decoder: false,
                }],
                total_channels: Some(4),
            },
            routing: None,
            leakage: LeakageSpec::LinearDroop {
                droop_rate_v_per_s: -19.2e-3,
                reference_voltage_v: 10.0,
            },
            crosstalk: CrosstalkMatrix::zero(),
            per_channel_rate_hz: 1_000_000,
            electrode_count: Some(4),
            two_step_charging: true,
            timing: TimingPolicy::default(),
        }
    }
}

/// Category of a configuration violation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationKind {
    /// A scalar parameter is outside its admissible range.
    NegativeParameter,
    /// The demux tree, routing, or matrix shape is inconsistent.
    InvalidTopology,
    /// The requested rates cannot be met by the configured chain.
    InfeasibleTiming,
}

impl std::fmt::Display for ViolationKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            ViolationKind::NegativeParameter => "NegativeParameter",
            ViolationKind::InvalidTopology => "InvalidTopology",
            ViolationKind::InfeasibleTiming => "InfeasibleTiming",
        };
        f.write_str(name)
    }
}

/// One violated invariant with a human-readable message.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfigViolation {
    pub kind: ViolationKind,
    pub message: String,
}

impl std::fmt::Display for ConfigViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

/// Every invariant a configuration violates.
#[derive(Debug, Clone, PartialEq, Error)]
#[error("invalid configuration ({} violation{})", .0.len(), if .0.len() == 1 { "" } else { "s" })]
pub struct ValidationErrors(pub Vec<ConfigViolation>);

impl ValidationErrors {
    pub fn iter(&self) -> impl Iterator<Item = &ConfigViolation> {
        self.0.iter()
    }
}

struct Checker {
    violations: Vec<ConfigViolation>,
}

impl Checker {
    fn new() -> Self {
        Self {
            violations: Vec::new(),
        }
    }

    fn require(&mut self, ok: bool, kind: ViolationKind, message: impl Into<String>) {
        if !ok {
            self.violations.push(ConfigViolation {
                kind,
                message: message.into(),
            });
        }
    }
}

/// Validates every invariant of `cfg`, returning it unchanged when all hold
/// and the full violation list otherwise. Validation is idempotent.
pub fn validate_config(cfg: SystemConfig) -> Result<SystemConfig, ValidationErrors> {
    let mut c = Checker::new();
    use ViolationKind::*;

    // DAC
    c.require(cfg.dac.update_rate_hz > 0, NegativeParameter, "dac.update_rate_hz must be positive");
    c.require(
        (8..=20).contains(&cfg.dac.resolution_bits),
        NegativeParameter,
        format!("dac.resolution_bits must be in 8..=20, got {}", cfg.dac.resolution_bits),
    );
    c.require(
        cfg.dac.full_scale_v > 0.0 && cfg.dac.full_scale_v.is_finite(),
        NegativeParameter,
        "dac.full_scale_v must be positive and finite",
    );
    c.require(
        cfg.dac.settle_time_constant_s >= 0.0,
        NegativeParameter,
        "dac.settle_time_constant_s must be non-negative",
    );

    // Stages
    c.require(
        matches!(cfg.topology.stages.len(), 1 | 2),
        InvalidTopology,
        format!("topology must have 1 or 2 stages, got {}", cfg.topology.stages.len()),
    );
    for (i, stage) in cfg.topology.stages.iter().enumerate() {
        c.require(
            stage.fanout >= 1,
            InvalidTopology,
            format!("stage {i}: fanout must be at least 1"),
        );
        c.require(
            stage.outputs_used >= 1 && stage.outputs_used <= stage.fanout,
            InvalidTopology,
            format!(
                "stage {i}: outputs_used must be in 1..=fanout, got {} of {}",
                stage.outputs_used, stage.fanout
            ),
        );
        c.require(
            stage.switch.r_on_ohm > 0.0,
            NegativeParameter,
            format!("stage {i}: switch.r_on_ohm must be positive"),
        );
        c.require(
            stage.switch.c_on_f >= 0.0,
            NegativeParameter,
            format!("stage {i}: switch.c_on_f must be non-negative"),
        );
        c.require(
            stage.hold_capacitance_f >= 0.0,
            NegativeParameter,
            format!("stage {i}: hold_capacitance_f must be non-negative"),
        );
        if let Some(r) = stage.switch.off_leak_resistance_ohm {
            c.require(
                r > 0.0,
                NegativeParameter,
                format!("stage {i}: switch.off_leak_resistance_ohm must be positive when present"),
            );
        }
    }
    if let Some(total) = cfg.topology.total_channels {
        c.require(
            total == cfg.topology.channel_count(),
            InvalidTopology,
            format!(
                "topology.total_channels = {total} but per-stage outputs_used multiply to {}",
                cfg.topology.channel_count()
            ),
        );
    }
    // Final outputs must be able to hold a voltage between refreshes.
    if let Some(last) = cfg.topology.stages.last() {
        c.require(
            last.hold_capacitance_f > 0.0,
            InvalidTopology,
            "final stage hold_capacitance_f must be positive (outputs cannot hold otherwise)",
        );
    }
    // Two-step charging needs storage on the branch nodes.
    if cfg.topology.stages.len() == 2 && cfg.two_step_charging {
        c.require(
            cfg.topology.branch_capacitance_f().unwrap_or(0.0) > 0.0,
            InvalidTopology,
            "two-step charging requires nonzero stage-1 branch capacitance \
             (hold_capacitance_f or stage-2 switch c_on_f)",
        );
    }

    // Routing
    if let Some(r) = &cfg.routing {
        c.require(r.k_demux_outputs >= 1, InvalidTopology, "routing.k_demux_outputs must be at least 1");
        c.require(r.m_switch_fanout >= 1, InvalidTopology, "routing.m_switch_fanout must be at least 1");
        c.require(
            r.active_group < r.m_switch_fanout,
            InvalidTopology,
            format!(
                "routing.active_group = {} out of range for {} zones",
                r.active_group, r.m_switch_fanout
            ),
        );
        c.require(
            r.k_demux_outputs == cfg.topology.channel_count(),
            InvalidTopology,
            format!(
                "routing.k_demux_outputs = {} must equal the wired demux channel count {}",
                r.k_demux_outputs,
                cfg.topology.channel_count()
            ),
        );
    }

    // Leakage
    match cfg.leakage {
        LeakageSpec::None => {}
        LeakageSpec::LinearDroop {
            droop_rate_v_per_s,
            reference_voltage_v,
        } => {
            c.require(
                reference_voltage_v != 0.0 || droop_rate_v_per_s == 0.0,
                NegativeParameter,
                "leakage.reference_voltage_v must be nonzero when droop_rate_v_per_s is nonzero",
            );
            let has_off_leak = cfg
                .topology
                .stages
                .iter()
                .any(|s| s.switch.off_leak_resistance_ohm.is_some());
            c.require(
                !has_off_leak,
                NegativeParameter,
                "linear droop leakage and switch off_leak_resistance_ohm are mutually exclusive",
            );
        }
        LeakageSpec::OffResistance { resistance_ohm } => {
            c.require(
                resistance_ohm > 0.0,
                NegativeParameter,
                "leakage.resistance_ohm must be positive",
            );
        }
    }

    // Crosstalk matrix
    let n = cfg.electrode_count();
    c.require(
        cfg.crosstalk.size == 0 || cfg.crosstalk.size == n,
        InvalidTopology,
        format!(
            "crosstalk.size = {} must be 0 or match the electrode count {n}",
            cfg.crosstalk.size
        ),
    );
    for e in &cfg.crosstalk.entries {
        c.require(
            e.victim != e.aggressor,
            InvalidTopology,
            format!("crosstalk entry ({}, {}) is on the diagonal", e.victim, e.aggressor),
        );
        c.require(
            e.victim < n && e.aggressor < n,
            InvalidTopology,
            format!(
                "crosstalk entry ({}, {}) out of range for {n} channels",
                e.victim, e.aggressor
            ),
        );
        c.require(
            e.coupling.abs() < 1.0,
            NegativeParameter,
            format!(
                "crosstalk coupling ({}, {}) must satisfy |c| < 1, got {}",
                e.victim, e.aggressor, e.coupling
            ),
        );
    }

    // Electrode count consistency
    if let Some(count) = cfg.electrode_count {
        c.require(
            count == n,
            InvalidTopology,
            format!("electrode_count = {count} but the configured chain serves {n}"),
        );
    }

    // Rate feasibility: every demux channel must be refreshed at
    // per_channel_rate, so f * slots_per_refresh <= dac rate.
    c.require(cfg.per_channel_rate_hz > 0, NegativeParameter, "per_channel_rate_hz must be positive");
    if cfg.dac.update_rate_hz > 0 {
        let needed = cfg.per_channel_rate_hz as u128 * cfg.scheduled_slots_per_refresh() as u128;
        c.require(
            needed <= cfg.dac.update_rate_hz as u128,
            InfeasibleTiming,
            format!(
                "per_channel_rate {} Hz x {} slots/refresh needs {} Hz but the DAC updates at {} Hz",
                cfg.per_channel_rate_hz,
                cfg.scheduled_slots_per_refresh(),
                needed,
                cfg.dac.update_rate_hz
            ),
        );
        let t_charge =
            cfg.dac.slot_duration_s() - cfg.timing.k_settle * cfg.dac.settle_time_constant_s;
        c.require(
            t_charge > 0.0,
            InfeasibleTiming,
            format!(
                "slot duration {:.3e} s leaves no charge time after {} settle time constants",
                cfg.dac.slot_duration_s(),
                cfg.timing.k_settle
            ),
        );
    }

    if c.violations.is_empty() {
        Ok(cfg)
    } else {
        Err(ValidationErrors(c.violations))
    }
}

/// Settling budget of one charging step.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingEntry {
    /// Which node or transfer this row budgets.
    pub label: String,
    /// RC time constant of the transfer.
    pub tau_s: f64,
    /// Residual fraction of the step left after the charge window,
    /// `exp(-t_charge / tau)`.
    pub settle_fraction: f64,
}

/// Timing quantities derived from a validated configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingBudget {
    /// Exact slot duration in seconds.
    pub slot_duration: Rational,
    pub slot_duration_s: f64,
    /// Charge window after the reserved DAC settling, in seconds.
    pub t_charge_s: f64,
    pub per_node: Vec<TimingEntry>,
}

/// Derives slot duration, per-node time constants, and residual settle
/// fractions for each charging step of the configured chain.
pub fn derive_timing(cfg: &SystemConfig) -> Result<TimingBudget, ValidationErrors> {
    let slot_duration = cfg.dac.slot_duration();
    let slot_s = cfg.dac.slot_duration_s();
    let t_charge = slot_s - cfg.timing.k_settle * cfg.dac.settle_time_constant_s;
    if t_charge <= 0.0 {
        return Err(ValidationErrors(vec![ConfigViolation {
            kind: ViolationKind::InfeasibleTiming,
            message: format!(
                "slot duration {slot_s:.3e} s leaves no charge time after {} settle time constants",
                cfg.timing.k_settle
            ),
        }]));
    }

    let mut per_node = Vec::new();
    let mut push = |label: String, tau_s: f64| {
        let settle_fraction = if tau_s > 0.0 {
            (-t_charge / tau_s).exp()
        } else {
            0.0
        };
        per_node.push(TimingEntry {
            label,
            tau_s,
            settle_fraction,
        });
    };

    match cfg.topology.stages.len() {
        2 => {
            let s1 = &cfg.topology.stages[0];
            let s2 = &cfg.topology.stages[1];
            let c_branch = cfg.topology.branch_capacitance_f().unwrap();
            let c_out = s2.hold_capacitance_f;
            push("stage1 branch charge".into(), s1.switch.r_on_ohm * c_branch);
            if c_branch > 0.0 && c_out > 0.0 {
                let c_series = c_branch * c_out / (c_branch + c_out);
                push("stage2 delivery share".into(), s2.switch.r_on_ohm * c_series);
            } else {
                // Zero branch storage degenerates to a direct drive through
                // both switches in series.
                push(
                    "direct drive through both stages".into(),
                    (s1.switch.r_on_ohm + s2.switch.r_on_ohm) * c_out,
                );
            }
        }
        _ => {
            let stage = &cfg.topology.stages[0];
            push(
                "output charge".into(),
                stage.switch.r_on_ohm * stage.hold_capacitance_f,
            );
        }
    }

    Ok(TimingBudget {
        slot_duration,
        slot_duration_s: slot_s,
        t_charge_s: t_charge,
        per_node,
    })
}
