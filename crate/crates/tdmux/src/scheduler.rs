//! Compilation of voltage programs into TDM frames.
//!
//! A [`Frame`] is the unit the DAC and select lines replay: an ordered list
//! of [`Slot`]s, each carrying the quantized DAC code, the demultiplexer
//! switch states, and the encoded select word. Two-stage trees compile to
//! the two-step charging sequence (charge every stage-1 reservoir, then one
//! shared delivery slot per stage-2 address); disabling two-step charging
//! compiles the naive one-slot-per-channel schedule that exhibits the
//! voltage-division failure the reservoirs exist to prevent.
//!
//! Channel numbering is branch-major: channel `k * S2 + j` is output `j` of
//! the stage-2 switch on branch `k`, so each branch owns a contiguous block
//! of channel ids and the channels sharing one stage-2 address form the
//! refresh group `{j, S2 + j, 2*S2 + j, ...}`.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ceil_log2, Rational, SystemConfig};

/// Target for one channel: a held DC level or a sampled waveform replayed
/// at the per-channel rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ProgramKind {
    Dc { value_v: f64 },
    Waveform { samples_v: Vec<f64>, rate_hz: u64 },
}

/// Per-channel voltage program.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VoltageProgram {
    pub channel: u32,
    #[serde(flatten)]
    pub kind: ProgramKind,
}

impl VoltageProgram {
    pub fn dc(channel: u32, value_v: f64) -> Self {
        Self {
            channel,
            kind: ProgramKind::Dc { value_v },
        }
    }

    pub fn waveform(channel: u32, samples_v: Vec<f64>, rate_hz: u64) -> Self {
        Self {
            channel,
            kind: ProgramKind::Waveform { samples_v, rate_hz },
        }
    }

    /// Largest magnitude the program ever requests.
    pub fn peak_abs_v(&self) -> f64 {
        match &self.kind {
            ProgramKind::Dc { value_v } => value_v.abs(),
            ProgramKind::Waveform { samples_v, .. } => {
                samples_v.iter().fold(0.0, |m, v| m.max(v.abs()))
            }
        }
    }
}

/// What a slot accomplishes in the charging sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SlotPurpose {
    /// Nothing conducts; every holding node droops.
    Idle,
    /// The DAC charges one stage-1 reservoir capacitor.
    Stage1Charge,
    /// One stage-2 address conducts; every charged reservoir shares into its
    /// output for that address.
    Stage2Deliver,
    /// The DAC drives an output directly (single-stage trees, or the naive
    /// one-slot-per-channel sequence on two-stage trees).
    DirectDeliver,
}

impl SlotPurpose {
    pub fn as_str(&self) -> &'static str {
        match self {
            SlotPurpose::Idle => "idle",
            SlotPurpose::Stage1Charge => "stage1_charge",
            SlotPurpose::Stage2Deliver => "stage2_deliver",
            SlotPurpose::DirectDeliver => "direct_deliver",
        }
    }
}

/// Digital word driven onto the select lines for one slot.
///
/// Line `i` of the board maps to bit `i`; the string form prints line 0
/// first. For a decoder-addressed two-stage tree the layout is 3 low bits of
/// stage-1 address, then 3 bits of stage-2 address, then the shared enable
/// in the highest bit; decoderless stages use one-hot lines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectWord {
    pub bits: u64,
    pub len: u8,
}

impl SelectWord {
    pub fn line(&self, i: u8) -> bool {
        (self.bits >> i) & 1 == 1
    }

    /// Line-0-first bit string, e.g. `0101011` for stage-1 address 2,
    /// stage-2 address 5, enable high.
    pub fn to_bit_string(&self) -> String {
        (0..self.len)
            .map(|i| if self.line(i) { '1' } else { '0' })
            .collect()
    }

    /// Parses a line-0-first bit string.
    pub fn from_bit_string(s: &str) -> Result<Self, ScheduleError> {
        if s.len() > 64 || s.is_empty() {
            return Err(ScheduleError::WordLengthMismatch {
                expected: 0,
                got: s.len(),
            });
        }
        let mut bits = 0u64;
        for (i, ch) in s.chars().enumerate() {
            match ch {
                '1' => bits |= 1 << i,
                '0' => {}
                _ => {
                    return Err(ScheduleError::WordLengthMismatch {
                        expected: 0,
                        got: s.len(),
                    })
                }
            }
        }
        Ok(Self {
            bits,
            len: s.len() as u8,
        })
    }
}

impl std::fmt::Display for SelectWord {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.to_bit_string())
    }
}

/// One DAC update slot of a compiled frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Slot {
    /// Position within the frame, in DAC update periods.
    pub index: u32,
    /// Quantized DAC code driven during this slot.
    pub dac_code: u32,
    /// Requested (pre-quantization) target voltage.
    pub dac_target_v: f64,
    pub select_word: SelectWord,
    /// Conducting output per stage, `None` when the stage is off or parked.
    pub stage_states: Vec<Option<u32>>,
    pub purpose: SlotPurpose,
}

/// One full refresh (static) or one per-channel sample period (dynamic).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Frame {
    pub slots: Vec<Slot>,
    pub slots_per_refresh: u32,
    pub channels_covered: BTreeSet<u32>,
}

impl Frame {
    /// Channels refreshed per slot consumed, exact.
    pub fn efficiency(&self) -> Rational {
        Rational::new(
            self.channels_covered.len() as i64,
            self.slots_per_refresh as i64,
        )
    }
}

/// Effective and nominal per-channel update rates of a compiled frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RateReport {
    /// DAC rate divided by slots per refresh, exact.
    pub effective_hz: Rational,
    /// DAC rate divided by the channel count, exact.
    pub nominal_hz: Rational,
    pub slots_per_refresh: u32,
}

impl RateReport {
    pub fn effective_hz_f64(&self) -> f64 {
        *self.effective_hz.numer() as f64 / *self.effective_hz.denom() as f64
    }

    pub fn nominal_hz_f64(&self) -> f64 {
        *self.nominal_hz.numer() as f64 / *self.nominal_hz.denom() as f64
    }
}

/// Switch-network state under zone routing: which electrode each demux
/// output drives, and which electrodes are left holding.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingState {
    pub zone: u32,
    /// `(demux_output, electrode)` pairs for the active zone.
    pub connections: Vec<(u32, u32)>,
    /// Electrodes in idle zones, holding their last voltage.
    pub holding: Vec<u32>,
}

/// Compilation and encoding failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum ScheduleError {
    #[error("programs mix DC and waveform kinds; this path requires {expected}")]
    MixedProgramKinds { expected: &'static str },
    #[error("expected one program per channel for {expected} channels, got {got}")]
    ChannelCountMismatch { expected: u32, got: u32 },
    #[error("channel {channel} programmed more than once or out of range")]
    BadChannelSet { channel: u32 },
    #[error("channel {channel} target {value_v} V exceeds the ±{full_scale_v} V full scale")]
    TargetOutOfRange {
        channel: u32,
        value_v: f64,
        full_scale_v: f64,
    },
    #[error("channel {channel} waveform rate {got_hz} Hz does not match the configured per-channel rate {expected_hz} Hz")]
    SampleRateMismatch {
        channel: u32,
        expected_hz: u64,
        got_hz: u64,
    },
    #[error("horizon {horizon_s} s is not a whole number of per-channel sample periods")]
    HorizonNotSampleAligned { horizon_s: f64 },
    #[error("channel {channel} provides {got} samples, need {expected}")]
    SampleCountMismatch {
        channel: u32,
        expected: usize,
        got: usize,
    },
    #[error("select encoding unsupported: {reason}")]
    TopologyEncodingUnsupported { reason: String },
    #[error("select word has {got} lines, topology uses {expected}")]
    WordLengthMismatch { expected: u32, got: usize },
    #[error("decoderless select word must be one-hot, got {word}")]
    InvalidOneHot { word: String },
    #[error("select address {address} targets an unwired output (outputs_used = {outputs_used})")]
    InvalidAddress { address: u32, outputs_used: u32 },
    #[error("zone {zone} out of range for {zones} zones")]
    ZoneOutOfRange { zone: u32, zones: u32 },
    #[error("configuration has no dynamic routing network")]
    RoutingNotConfigured,
}

/// Channel id of stage-2 output `j` on branch `k` (branch-major numbering).
pub fn channel_id(cfg: &SystemConfig, branch: u32, output: u32) -> u32 {
    match cfg.topology.stages.len() {
        2 => branch * cfg.topology.stages[1].outputs_used + output,
        _ => output,
    }
}

fn check_dc_programs(
    cfg: &SystemConfig,
    programs: &[VoltageProgram],
) -> Result<Vec<f64>, ScheduleError> {
    let n = cfg.demux_channel_count();
    if programs.len() as u32 != n {
        return Err(ScheduleError::ChannelCountMismatch {
            expected: n,
            got: programs.len() as u32,
        });
    }
    let mut targets = vec![None; n as usize];
    for p in programs {
        let value_v = match p.kind {
            ProgramKind::Dc { value_v } => value_v,
            ProgramKind::Waveform { .. } => {
                return Err(ScheduleError::MixedProgramKinds { expected: "DC" })
            }
        };
        if p.channel >= n || targets[p.channel as usize].is_some() {
            return Err(ScheduleError::BadChannelSet { channel: p.channel });
        }
        if value_v.abs() > cfg.dac.full_scale_v {
            return Err(ScheduleError::TargetOutOfRange {
                channel: p.channel,
                value_v,
                full_scale_v: cfg.dac.full_scale_v,
            });
        }
        targets[p.channel as usize] = Some(value_v);
    }
    Ok(targets.into_iter().map(|t| t.unwrap()).collect())
}

pub(crate) fn make_slot(
    cfg: &SystemConfig,
    index: u32,
    target_v: f64,
    stage_states: Vec<Option<u32>>,
    purpose: SlotPurpose,
) -> Result<Slot, ScheduleError> {
    let select_word = encode_states(cfg, &stage_states)?;
    Ok(Slot {
        index,
        dac_code: cfg.dac.quantize(target_v),
        dac_target_v: target_v,
        select_word,
        stage_states,
        purpose,
    })
}

/// Compiles DC programs into one refresh frame.
///
/// Two-stage trees with two-step charging enabled emit, per stage-2 address
/// `j`, the `S1` reservoir charge slots followed by one shared delivery
/// slot: `(S1 + 1) * S2` slots per refresh (40 for the 4x8 tree). With
/// two-step charging disabled every channel gets a single slot in which the
/// reservoir is charged and handed off within the slot. Single-stage trees
/// emit one drive slot per channel.
pub fn compile_static_frame(
    cfg: &SystemConfig,
    programs: &[VoltageProgram],
) -> Result<Frame, ScheduleError> {
    let targets = check_dc_programs(cfg, programs)?;
    let n = cfg.demux_channel_count();
    let mut slots = Vec::new();

    match cfg.topology.stages.len() {
        2 => {
            let s1_used = cfg.topology.stages[0].outputs_used;
            let s2_used = cfg.topology.stages[1].outputs_used;
            let s1_fanout = cfg.topology.stages[0].fanout;
            for j in 0..s2_used {
                if cfg.two_step_charging {
                    // Charge every branch reservoir with its channel target,
                    // in ascending channel order within the group.
                    for k in 0..s1_used {
                        let target = targets[channel_id(cfg, k, j) as usize];
                        slots.push(make_slot(
                            cfg,
                            slots.len() as u32,
                            target,
                            vec![Some(k), None],
                            SlotPurpose::Stage1Charge,
                        )?);
                    }
                    // Delivery: stage 1 parks on an unwired address when one
                    // exists; otherwise it keeps driving the last branch at
                    // that branch's own target.
                    let (s1_state, target) = if s1_used < s1_fanout {
                        (None, 0.0)
                    } else {
                        let k = s1_used - 1;
                        (Some(k), targets[channel_id(cfg, k, j) as usize])
                    };
                    slots.push(make_slot(
                        cfg,
                        slots.len() as u32,
                        target,
                        vec![s1_state, Some(j)],
                        SlotPurpose::Stage2Deliver,
                    )?);
                } else {
                    for k in 0..s1_used {
                        let target = targets[channel_id(cfg, k, j) as usize];
                        slots.push(make_slot(
                            cfg,
                            slots.len() as u32,
                            target,
                            vec![Some(k), Some(j)],
                            SlotPurpose::DirectDeliver,
                        )?);
                    }
                }
            }
        }
        _ => {
            for ch in 0..n {
                slots.push(make_slot(
                    cfg,
                    ch,
                    targets[ch as usize],
                    vec![Some(ch)],
                    SlotPurpose::DirectDeliver,
                )?);
            }
        }
    }

    Ok(Frame {
        slots_per_refresh: slots.len() as u32,
        slots,
        channels_covered: (0..n).collect(),
    })
}

/// Compiles waveform programs into one frame per per-channel sample period.
///
/// Frame `r` delivers sample `r` of every channel, in ascending channel
/// order, so the slot stream is a deterministic function of
/// `(channel, sample index)` and recompilation is bit-identical.
pub fn compile_dynamic_stream(
    cfg: &SystemConfig,
    programs: &[VoltageProgram],
    horizon_s: f64,
) -> Result<Vec<Frame>, ScheduleError> {
    let n = cfg.demux_channel_count();
    if programs.len() as u32 != n {
        return Err(ScheduleError::ChannelCountMismatch {
            expected: n,
            got: programs.len() as u32,
        });
    }
    let f = cfg.per_channel_rate_hz;
    let samples_exact = horizon_s * f as f64;
    let sample_count = samples_exact.round();
    if sample_count < 1.0 || (samples_exact - sample_count).abs() > 1e-6 {
        return Err(ScheduleError::HorizonNotSampleAligned { horizon_s });
    }
    let sample_count = sample_count as usize;

    let mut per_channel = vec![None; n as usize];
    for p in programs {
        if p.channel >= n || per_channel[p.channel as usize].is_some() {
            return Err(ScheduleError::BadChannelSet { channel: p.channel });
        }
        let samples = match &p.kind {
            ProgramKind::Waveform { samples_v, rate_hz } => {
                if *rate_hz != f {
                    return Err(ScheduleError::SampleRateMismatch {
                        channel: p.channel,
                        expected_hz: f,
                        got_hz: *rate_hz,
                    });
                }
                if samples_v.len() != sample_count {
                    return Err(ScheduleError::SampleCountMismatch {
                        channel: p.channel,
                        expected: sample_count,
                        got: samples_v.len(),
                    });
                }
                samples_v.clone()
            }
            ProgramKind::Dc { .. } => {
                return Err(ScheduleError::MixedProgramKinds {
                    expected: "waveform",
                })
            }
        };
        if p.peak_abs_v() > cfg.dac.full_scale_v {
            return Err(ScheduleError::TargetOutOfRange {
                channel: p.channel,
                value_v: p.peak_abs_v(),
                full_scale_v: cfg.dac.full_scale_v,
            });
        }
        per_channel[p.channel as usize] = Some(samples);
    }
    let per_channel: Vec<Vec<f64>> = per_channel.into_iter().map(|s| s.unwrap()).collect();

    let mut frames = Vec::with_capacity(sample_count);
    for r in 0..sample_count {
        let mut slots = Vec::with_capacity(n as usize);
        for ch in 0..n {
            slots.push(make_slot(
                cfg,
                ch,
                per_channel[ch as usize][r],
                vec![Some(ch)],
                SlotPurpose::DirectDeliver,
            )?);
        }
        frames.push(Frame {
            slots_per_refresh: n,
            slots,
            channels_covered: (0..n).collect(),
        });
    }
    Ok(frames)
}

fn encode_states(
    cfg: &SystemConfig,
    states: &[Option<u32>],
) -> Result<SelectWord, ScheduleError> {
    let stages = &cfg.topology.stages;
    if states.len() != stages.len() {
        return Err(ScheduleError::WordLengthMismatch {
            expected: stages.len() as u32,
            got: states.len(),
        });
    }
    match stages.len() {
        1 => {
            let stage = &stages[0];
            if let Some(k) = states[0] {
                if k >= stage.outputs_used {
                    return Err(ScheduleError::InvalidAddress {
                        address: k,
                        outputs_used: stage.outputs_used,
                    });
                }
            }
            if stage.has_decoder {
                let addr_bits = ceil_log2(stage.fanout);
                let len = (addr_bits + 1) as u8;
                let bits = match states[0] {
                    Some(k) => (k as u64) | (1 << addr_bits),
                    None => 0,
                };
                Ok(SelectWord { bits, len })
            } else {
                let bits = match states[0] {
                    Some(k) => 1u64 << k,
                    None => 0,
                };
                Ok(SelectWord {
                    bits,
                    len: stage.fanout as u8,
                })
            }
        }
        2 => {
            let (s1, s2) = (&stages[0], &stages[1]);
            if !(s1.has_decoder && s2.has_decoder) {
                return Err(ScheduleError::TopologyEncodingUnsupported {
                    reason: "two-stage trees are only encodable when both stages are \
                             decoder-addressed"
                        .into(),
                });
            }
            let a1 = ceil_log2(s1.fanout);
            let a2 = ceil_log2(s2.fanout);
            let len = (a1 + a2 + 1) as u8;
            // Stage 1 is always addressed; "off" parks on the first unwired
            // address. The enable bit gates stage 2 only.
            let addr1 = match states[0] {
                Some(k) => {
                    if k >= s1.outputs_used {
                        return Err(ScheduleError::InvalidAddress {
                            address: k,
                            outputs_used: s1.outputs_used,
                        });
                    }
                    k as u64
                }
                None => {
                    if s1.outputs_used == s1.fanout {
                        return Err(ScheduleError::TopologyEncodingUnsupported {
                            reason: format!(
                                "stage 1 uses all {} outputs, leaving no parking address \
                                 to disconnect it",
                                s1.fanout
                            ),
                        });
                    }
                    s1.outputs_used as u64
                }
            };
            let (addr2, enable) = match states[1] {
                Some(j) => {
                    if j >= s2.outputs_used {
                        return Err(ScheduleError::InvalidAddress {
                            address: j,
                            outputs_used: s2.outputs_used,
                        });
                    }
                    (j as u64, 1u64)
                }
                None => (0, 0),
            };
            let bits = addr1 | (addr2 << a1) | (enable << (a1 + a2));
            Ok(SelectWord { bits, len })
        }
        _ => Err(ScheduleError::TopologyEncodingUnsupported {
            reason: format!("{} stages unsupported", stages.len()),
        }),
    }
}

/// Encodes a slot's switch states into the digital select word.
pub fn encode_select(cfg: &SystemConfig, slot: &Slot) -> Result<SelectWord, ScheduleError> {
    encode_states(cfg, &slot.stage_states)
}

/// Decodes a select word back into per-stage switch states; the inverse of
/// [`encode_select`] over every reachable slot state.
pub fn decode_select(
    cfg: &SystemConfig,
    word: SelectWord,
) -> Result<Vec<Option<u32>>, ScheduleError> {
    let stages = &cfg.topology.stages;
    match stages.len() {
        1 => {
            let stage = &stages[0];
            if stage.has_decoder {
                let addr_bits = ceil_log2(stage.fanout);
                let expected = addr_bits + 1;
                if word.len as u32 != expected {
                    return Err(ScheduleError::WordLengthMismatch {
                        expected,
                        got: word.len as usize,
                    });
                }
                let enable = (word.bits >> addr_bits) & 1 == 1;
                let addr = (word.bits & ((1 << addr_bits) - 1)) as u32;
                if !enable {
                    return Ok(vec![None]);
                }
                if addr >= stage.outputs_used {
                    return Err(ScheduleError::InvalidAddress {
                        address: addr,
                        outputs_used: stage.outputs_used,
                    });
                }
                Ok(vec![Some(addr)])
            } else {
                if word.len as u32 != stage.fanout {
                    return Err(ScheduleError::WordLengthMismatch {
                        expected: stage.fanout,
                        got: word.len as usize,
                    });
                }
                match word.bits.count_ones() {
                    0 => Ok(vec![None]),
                    1 => {
                        let k = word.bits.trailing_zeros();
                        if k >= stage.outputs_used {
                            return Err(ScheduleError::InvalidAddress {
                                address: k,
                                outputs_used: stage.outputs_used,
                            });
                        }
                        Ok(vec![Some(k)])
                    }
                    _ => Err(ScheduleError::InvalidOneHot {
                        word: word.to_bit_string(),
                    }),
                }
            }
        }
        2 => {
            let (s1, s2) = (&stages[0], &stages[1]);
            if !(s1.has_decoder && s2.has_decoder) {
                return Err(ScheduleError::TopologyEncodingUnsupported {
                    reason: "two-stage trees are only encodable when both stages are \
                             decoder-addressed"
                        .into(),
                });
            }
            let a1 = ceil_log2(s1.fanout);
            let a2 = ceil_log2(s2.fanout);
            let expected = a1 + a2 + 1;
            if word.len as u32 != expected {
                return Err(ScheduleError::WordLengthMismatch {
                    expected,
                    got: word.len as usize,
                });
            }
            let addr1 = (word.bits & ((1 << a1) - 1)) as u32;
            let addr2 = ((word.bits >> a1) & ((1 << a2) - 1)) as u32;
            let enable = (word.bits >> (a1 + a2)) & 1 == 1;
            // Any unwired stage-1 address means "parked", i.e. disconnected.
            let state1 = (addr1 < s1.outputs_used).then_some(addr1);
            let state2 = if enable {
                if addr2 >= s2.outputs_used {
                    return Err(ScheduleError::InvalidAddress {
                        address: addr2,
                        outputs_used: s2.outputs_used,
                    });
                }
                Some(addr2)
            } else {
                None
            };
            Ok(vec![state1, state2])
        }
        _ => Err(ScheduleError::TopologyEncodingUnsupported {
            reason: format!("{} stages unsupported", stages.len()),
        }),
    }
}

/// Resolves the routing-network state for one zone: demux output `k` drives
/// electrode `zone * K + k`; every other electrode holds.
pub fn route_dynamic(cfg: &SystemConfig, zone: u32) -> Result<RoutingState, ScheduleError> {
    let routing = cfg.routing.as_ref().ok_or(ScheduleError::RoutingNotConfigured)?;
    if zone >= routing.m_switch_fanout {
        return Err(ScheduleError::ZoneOutOfRange {
            zone,
            zones: routing.m_switch_fanout,
        });
    }
    let k = routing.k_demux_outputs;
    let connections: Vec<(u32, u32)> = (0..k).map(|out| (out, zone * k + out)).collect();
    let active: BTreeSet<u32> = connections.iter().map(|&(_, e)| e).collect();
    let holding = (0..cfg.electrode_count())
        .filter(|e| !active.contains(e))
        .collect();
    Ok(RoutingState {
        zone,
        connections,
        holding,
    })
}

/// Reason a slot cannot meet its settling budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ViolationCause {
    /// The reserved DAC settling alone exceeds the slot.
    SettleBudgetExceeded,
    /// The RC transfer needs more time constants than the charge window.
    RcTransientTooSlow,
    /// Charge-share delivery cannot converge within the refresh budget:
    /// the reservoir is too small against the output capacitance.
    VoltageDivision,
}

impl std::fmt::Display for ViolationCause {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ViolationCause::SettleBudgetExceeded => "settle budget exceeded",
            ViolationCause::RcTransientTooSlow => "RC transient too slow",
            ViolationCause::VoltageDivision => "voltage division / charge starvation",
        };
        f.write_str(s)
    }
}

/// One slot that cannot reach its target within the allotted time.
#[derive(Debug, Clone, PartialEq)]
pub struct TimingViolation {
    pub slot_index: u32,
    pub cause: ViolationCause,
    pub needed_s: f64,
    pub available_s: f64,
    pub message: String,
}

impl std::fmt::Display for TimingViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "slot {}: {} ({}; needs {:.3e} s, has {:.3e} s)",
            self.slot_index, self.cause, self.message, self.needed_s, self.available_s
        )
    }
}

/// Checks every slot of a frame against the settling budget: the reserved
/// DAC settling plus `n_tau = ln(full_swing / epsilon)` time constants of
/// the slot's transfer must fit in the slot, and share-based deliveries
/// must be able to converge within the refresh budget. Violations are data,
/// not errors.
pub fn check_timing(cfg: &SystemConfig, frame: &Frame) -> Vec<TimingViolation> {
    let slot_s = cfg.dac.slot_duration_s();
    let t_settle = cfg.timing.k_settle * cfg.dac.settle_time_constant_s;
    let t_charge = slot_s - t_settle;
    let full_swing = 2.0 * cfg.dac.full_scale_v;
    let n_tau = (full_swing / cfg.timing.epsilon_v).ln();
    let mut violations = Vec::new();

    for slot in &frame.slots {
        if matches!(slot.purpose, SlotPurpose::Idle) {
            continue;
        }
        if t_charge <= 0.0 {
            violations.push(TimingViolation {
                slot_index: slot.index,
                cause: ViolationCause::SettleBudgetExceeded,
                needed_s: t_settle,
                available_s: slot_s,
                message: format!(
                    "{} settle time constants leave no charge window",
                    cfg.timing.k_settle
                ),
            });
            continue;
        }

        let mut require_transient = |window_s: f64, tau_s: f64, what: &str| {
            let needed = n_tau * tau_s;
            if needed > window_s {
                violations.push(TimingViolation {
                    slot_index: slot.index,
                    cause: ViolationCause::RcTransientTooSlow,
                    needed_s: needed,
                    available_s: window_s,
                    message: format!(
                        "{what}: {n_tau:.2} time constants of tau = {tau_s:.3e} s"
                    ),
                });
            }
        };

        match (cfg.topology.stages.len(), slot.purpose) {
            (2, SlotPurpose::Stage1Charge) => {
                let tau = cfg.topology.stages[0].switch.r_on_ohm
                    * cfg.topology.branch_capacitance_f().unwrap();
                require_transient(t_charge, tau, "reservoir charge");
            }
            (2, SlotPurpose::Stage2Deliver) => {
                let c_src = cfg.topology.branch_capacitance_f().unwrap();
                let c_dst = cfg.topology.output_capacitance_f();
                let c_series = c_src * c_dst / (c_src + c_dst);
                let tau = cfg.topology.stages[1].switch.r_on_ohm * c_series;
                require_transient(t_charge, tau, "delivery share");
                check_share_starvation(cfg, slot, c_src, c_dst, &mut violations);
            }
            (2, SlotPurpose::DirectDeliver) => {
                let c_src = cfg.topology.branch_capacitance_f().unwrap();
                let c_dst = cfg.topology.output_capacitance_f();
                let r1 = cfg.topology.stages[0].switch.r_on_ohm;
                let r2 = cfg.topology.stages[1].switch.r_on_ohm;
                if c_src > 0.0 {
                    // Charge and hand-off each get half the slot.
                    let half = t_charge / 2.0;
                    require_transient(half, r1 * c_src, "in-slot reservoir charge");
                    let c_series = c_src * c_dst / (c_src + c_dst);
                    require_transient(half, r2 * c_series, "in-slot hand-off share");
                    check_share_starvation(cfg, slot, c_src, c_dst, &mut violations);
                } else {
                    require_transient(t_charge, (r1 + r2) * c_dst, "direct drive");
                }
            }
            (_, SlotPurpose::DirectDeliver) => {
                let stage = &cfg.topology.stages[0];
                let tau = stage.switch.r_on_ohm * stage.hold_capacitance_f;
                require_transient(t_charge, tau, "output charge");
            }
            _ => {}
        }
    }
    violations
}

/// Flags a share-based delivery whose per-refresh convergence ratio cannot
/// reach `epsilon_v` from a full-swing step inside the refresh budget.
fn check_share_starvation(
    cfg: &SystemConfig,
    slot: &Slot,
    c_src: f64,
    c_dst: f64,
    violations: &mut Vec<TimingViolation>,
) {
    let full_swing = 2.0 * cfg.dac.full_scale_v;
    let residual_per_refresh = c_dst / (c_src + c_dst);
    let budget = cfg.timing.refresh_budget.max(1);
    let residual = residual_per_refresh.powi(budget as i32);
    let target = cfg.timing.epsilon_v / full_swing;
    if residual > target {
        violations.push(TimingViolation {
            slot_index: slot.index,
            cause: ViolationCause::VoltageDivision,
            needed_s: 0.0,
            available_s: 0.0,
            message: format!(
                "share from {c_src:.3e} F into {c_dst:.3e} F keeps {:.1}% of the step per \
                 refresh; cannot reach {:.1e} V within {budget} refreshes",
                100.0 * residual_per_refresh,
                cfg.timing.epsilon_v
            ),
        });
    }
}

/// Effective per-channel update rate of a compiled frame, and the nominal
/// rate a one-slot-per-channel schedule would give.
pub fn effective_update_rate(cfg: &SystemConfig, frame: &Frame) -> RateReport {
    let rate = cfg.dac.update_rate_hz as i64;
    RateReport {
        effective_hz: Rational::new(rate, frame.slots_per_refresh as i64),
        nominal_hz: Rational::new(rate, cfg.demux_channel_count().max(1) as i64),
        slots_per_refresh: frame.slots_per_refresh,
    }
}
