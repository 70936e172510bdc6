//! Figures of merit computed from configs, frames, and traces.
//!
//! Covers the quantities a bring-up report cares about: effective versus
//! nominal per-channel update rates, settling error against the programmed
//! targets, hold-interval droop per refresh cycle, crosstalk levels in dB,
//! and the wiring-resource comparison against a one-line-per-electrode
//! scheme.

use thiserror::Error;

use crate::model::{LeakageSpec, SystemConfig, ValidationErrors};
use crate::scheduler::{
    self, channel_id, effective_update_rate, Frame, ScheduleError, Slot, SlotPurpose,
    VoltageProgram,
};
use crate::simulator::{run, NodeId, SimError, SimOptions, TraceSet};
use crate::waveforms::{WaveformKind, WaveformSpec};

/// Metrics failures.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum MetricsError {
    #[error("drive amplitude must be positive")]
    ZeroDrive,
    #[error("induced amplitude must be non-negative")]
    NegativeInduced,
    #[error("aggressor channel {0} is not addressable by the configured chain")]
    AggressorNotAddressable(u32),
    #[error("crosstalk drive must be a sine waveform with a positive frequency")]
    DriveNotPeriodic,
    #[error("drive duration {duration_s} s covers less than one full period")]
    MeasurementTooShort { duration_s: f64 },
    #[error("trace does not include node {0}")]
    NodeNotProbed(String),
    #[error("invalid configuration: {0}")]
    InvalidConfig(#[from] ValidationErrors),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Sim(#[from] SimError),
}

/// Crosstalk level of an induced amplitude relative to the drive amplitude,
/// `20 * log10(induced / drive)`. Zero induced returns `-inf`.
pub fn crosstalk_db(drive_amplitude_v: f64, induced_amplitude_v: f64) -> Result<f64, MetricsError> {
    if drive_amplitude_v <= 0.0 {
        return Err(MetricsError::ZeroDrive);
    }
    if induced_amplitude_v < 0.0 {
        return Err(MetricsError::NegativeInduced);
    }
    if induced_amplitude_v == 0.0 {
        return Ok(f64::NEG_INFINITY);
    }
    Ok(20.0 * (induced_amplitude_v / drive_amplitude_v).log10())
}

/// Measured level of one victim channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VictimLevel {
    pub channel: u32,
    pub induced_amplitude_v: f64,
    pub level_db: f64,
}

/// Result of an aggressor-driven crosstalk measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct CrosstalkMeasurement {
    pub aggressor: u32,
    /// Half the peak-to-peak excursion of the aggressor's own output.
    pub drive_amplitude_v: f64,
    pub victims: Vec<VictimLevel>,
}

fn half_peak_to_peak(series: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in series {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if hi > lo {
        (hi - lo) / 2.0
    } else {
        0.0
    }
}

/// Drives a large sinusoid on one channel while every other channel holds
/// its initial 0 V, then reports each victim's induced amplitude relative
/// to the drive, oscilloscope-style: half the peak-to-peak excursion.
///
/// The measurement schedule refreshes only the aggressor once per refresh
/// period; victims stay disconnected so their accumulated coupling is not
/// rewritten. On a two-stage tree the victims wired to the aggressor's own
/// stage-2 address are unavoidably re-driven by the shared delivery slot
/// and read low; the board's worst-case neighbor (the adjacent output on
/// the same branch) is unaffected.
pub fn measure_crosstalk(
    cfg: &SystemConfig,
    aggressor: u32,
    drive: &WaveformSpec,
    opts: &SimOptions,
) -> Result<CrosstalkMeasurement, MetricsError> {
    let cfg = crate::model::validate_config(cfg.clone())?;
    let WaveformKind::Sine { frequency_hz, .. } = drive.kind else {
        return Err(MetricsError::DriveNotPeriodic);
    };
    if frequency_hz <= 0.0 {
        return Err(MetricsError::DriveNotPeriodic);
    }
    if drive.duration_s * frequency_hz < 1.0 {
        return Err(MetricsError::MeasurementTooShort {
            duration_s: drive.duration_s,
        });
    }
    let n = cfg.electrode_count();
    if aggressor >= n {
        return Err(MetricsError::AggressorNotAddressable(aggressor));
    }

    // Map the aggressor electrode back to its demux coordinates. Under zone
    // routing only the active zone is reachable.
    let demux_channel = match &cfg.routing {
        Some(r) => {
            let base = r.active_group * r.k_demux_outputs;
            if aggressor < base || aggressor >= base + r.k_demux_outputs {
                return Err(MetricsError::AggressorNotAddressable(aggressor));
            }
            aggressor - base
        }
        None => aggressor,
    };

    let refresh_period_s = cfg.refresh_period_s();
    let frame_count = (drive.duration_s / refresh_period_s).round().max(1.0) as usize;
    let slots_per_refresh = cfg.scheduled_slots_per_refresh();

    let mut frames = Vec::with_capacity(frame_count);
    for r in 0..frame_count {
        let target = drive.value_at(r as f64 * refresh_period_s);
        let mut slots: Vec<Slot> = Vec::with_capacity(slots_per_refresh as usize);
        match cfg.topology.stages.len() {
            2 => {
                let s2 = cfg.topology.stages[1].outputs_used;
                let (k, j) = (demux_channel / s2, demux_channel % s2);
                slots.push(scheduler::make_slot(
                    &cfg,
                    0,
                    target,
                    vec![Some(k), None],
                    SlotPurpose::Stage1Charge,
                )?);
                slots.push(scheduler::make_slot(
                    &cfg,
                    1,
                    0.0,
                    vec![None, Some(j)],
                    SlotPurpose::Stage2Deliver,
                )?);
            }
            _ => {
                slots.push(scheduler::make_slot(
                    &cfg,
                    0,
                    target,
                    vec![Some(demux_channel)],
                    SlotPurpose::DirectDeliver,
                )?);
            }
        }
        while (slots.len() as u32) < slots_per_refresh {
            let states = vec![None; cfg.topology.stages.len()];
            slots.push(scheduler::make_slot(
                &cfg,
                slots.len() as u32,
                0.0,
                states,
                SlotPurpose::Idle,
            )?);
        }
        frames.push(Frame {
            slots_per_refresh,
            slots,
            channels_covered: [aggressor].into_iter().collect(),
        });
        let _ = r;
    }

    let trace = run(&cfg, &frames, opts)?;
    let agg_series = trace
        .series(NodeId::Channel(aggressor))
        .ok_or_else(|| MetricsError::NodeNotProbed(NodeId::Channel(aggressor).to_string()))?;
    let drive_amplitude_v = half_peak_to_peak(agg_series);
    if drive_amplitude_v <= 0.0 {
        return Err(MetricsError::ZeroDrive);
    }

    let mut victims = Vec::new();
    for ch in 0..n {
        if ch == aggressor {
            continue;
        }
        let series = trace
            .series(NodeId::Channel(ch))
            .ok_or_else(|| MetricsError::NodeNotProbed(NodeId::Channel(ch).to_string()))?;
        let induced = half_peak_to_peak(series);
        victims.push(VictimLevel {
            channel: ch,
            induced_amplitude_v: induced,
            level_db: crosstalk_db(drive_amplitude_v, induced)?,
        });
    }

    Ok(CrosstalkMeasurement {
        aggressor,
        drive_amplitude_v,
        victims,
    })
}

/// Voltage lost by a held node over one refresh period, evaluated at the
/// leakage model's reference point.
pub fn droop_per_refresh(cfg: &SystemConfig) -> f64 {
    let period = cfg.refresh_period_s();
    match cfg.leakage {
        LeakageSpec::None => 0.0,
        LeakageSpec::LinearDroop {
            droop_rate_v_per_s, ..
        } => droop_rate_v_per_s.abs() * period,
        LeakageSpec::OffResistance { resistance_ohm } => {
            let c = cfg.topology.output_capacitance_f();
            if c > 0.0 {
                cfg.dac.full_scale_v * (1.0 - (-period / (resistance_ohm * c)).exp())
            } else {
                0.0
            }
        }
    }
}

/// Peak-to-trough voltage of one node over a hold window of a trace.
pub fn measured_droop(
    trace: &TraceSet,
    node: NodeId,
    from_tick: u64,
    to_tick: u64,
) -> Result<f64, MetricsError> {
    let series = trace
        .series(node)
        .ok_or_else(|| MetricsError::NodeNotProbed(node.to_string()))?;
    let lo = from_tick as usize;
    let hi = (to_tick as usize).min(series.len().saturating_sub(1));
    if hi <= lo {
        return Ok(0.0);
    }
    let window = &series[lo..=hi];
    let max = window.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
    let min = window.iter().fold(f64::INFINITY, |m, &v| m.min(v));
    Ok(max - min)
}

/// Wiring and converter cost of the TDM chain versus one line per electrode.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Resources {
    pub feedthroughs_tdm: u32,
    pub feedthroughs_conventional: u32,
    pub dac_channels_tdm: u32,
    pub dac_channels_conventional: u32,
}

/// Counts feedthrough lines and DAC channels for the configured chain: one
/// analog line plus the digital select lines (plus one-hot zone lines when
/// routing is present) against `N` of each for a conventional scheme.
pub fn resource_comparison(cfg: &SystemConfig) -> Resources {
    let n = cfg.electrode_count();
    let routing_lines = cfg.routing.as_ref().map_or(0, |r| r.m_switch_fanout);
    Resources {
        feedthroughs_tdm: 1 + cfg.topology.select_line_count() + routing_lines,
        feedthroughs_conventional: n,
        dac_channels_tdm: 1,
        dac_channels_conventional: n,
    }
}

/// Per-channel settling error of a simulated run.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelSettle {
    pub channel: u32,
    /// Error at the end of the channel's delivery slot, one entry per
    /// refresh.
    pub per_refresh_v: Vec<f64>,
    pub max_error_v: f64,
    pub mean_error_v: f64,
    pub final_error_v: f64,
}

/// Settling errors of every channel across the simulated refreshes.
#[derive(Debug, Clone, PartialEq)]
pub struct SettleReport {
    pub per_channel: Vec<ChannelSettle>,
    /// Worst final-refresh error.
    pub max_final_v: f64,
    /// Mean final-refresh error.
    pub mean_final_v: f64,
}

fn delivery_slot_for(cfg: &SystemConfig, frame: &Frame, channel: u32) -> Option<u32> {
    let two_stage = cfg.topology.stages.len() == 2;
    let mut found = None;
    for slot in &frame.slots {
        let delivers = match slot.purpose {
            SlotPurpose::Stage2Deliver if two_stage => {
                slot.stage_states.get(1).copied().flatten().map_or(false, |j| {
                    (0..cfg.topology.stages[0].outputs_used)
                        .any(|k| channel_id(cfg, k, j) == channel)
                })
            }
            SlotPurpose::DirectDeliver if two_stage => {
                let (s1, s2) = (
                    slot.stage_states.first().copied().flatten(),
                    slot.stage_states.get(1).copied().flatten(),
                );
                matches!((s1, s2), (Some(k), Some(j)) if channel_id(cfg, k, j) == channel)
            }
            SlotPurpose::DirectDeliver => {
                slot.stage_states.first().copied().flatten() == Some(channel)
            }
            _ => false,
        };
        if delivers {
            found = Some(slot.index);
        }
    }
    found
}

/// Per-refresh target of a channel: the DC value, or sample `refresh` of
/// its waveform.
fn target_at(program: &VoltageProgram, refresh: usize) -> f64 {
    match &program.kind {
        scheduler::ProgramKind::Dc { value_v } => *value_v,
        scheduler::ProgramKind::Waveform { samples_v, .. } => {
            samples_v.get(refresh).copied().unwrap_or_else(|| {
                samples_v.last().copied().unwrap_or(0.0)
            })
        }
    }
}

/// Compares end-of-delivery-slot voltages against the programmed targets,
/// per channel and per refresh. With zone routing, program channel `c`
/// lands on the active zone's electrode.
pub fn settle_error(
    cfg: &SystemConfig,
    trace: &TraceSet,
    frames: &[Frame],
    programs: &[VoltageProgram],
) -> Result<SettleReport, MetricsError> {
    let electrode_offset = cfg
        .routing
        .as_ref()
        .map_or(0, |r| r.active_group * r.k_demux_outputs);
    let ticks_per_slot = trace.ticks_per_slot();
    let mut per_channel = Vec::with_capacity(programs.len());

    for program in programs {
        let electrode = NodeId::Channel(electrode_offset + program.channel);
        let series = trace
            .series(electrode)
            .ok_or_else(|| MetricsError::NodeNotProbed(electrode.to_string()))?;
        let mut per_refresh = Vec::with_capacity(frames.len());
        let mut slot_base: u64 = 0;
        for (refresh, frame) in frames.iter().enumerate() {
            if let Some(slot_idx) = delivery_slot_for(cfg, frame, program.channel) {
                let end_tick = (slot_base + slot_idx as u64 + 1) * ticks_per_slot;
                if let Some(&v) = series.get(end_tick as usize) {
                    per_refresh.push((v - target_at(program, refresh)).abs());
                }
            }
            slot_base += frame.slots.len() as u64;
        }
        let max = per_refresh.iter().fold(0.0_f64, |m, &e| m.max(e));
        let mean = if per_refresh.is_empty() {
            0.0
        } else {
            per_refresh.iter().sum::<f64>() / per_refresh.len() as f64
        };
        let final_error = per_refresh.last().copied().unwrap_or(0.0);
        per_channel.push(ChannelSettle {
            channel: program.channel,
            max_error_v: max,
            mean_error_v: mean,
            final_error_v: final_error,
            per_refresh_v: per_refresh,
        });
    }

    let max_final = per_channel.iter().fold(0.0_f64, |m, c| m.max(c.final_error_v));
    let mean_final = if per_channel.is_empty() {
        0.0
    } else {
        per_channel.iter().map(|c| c.final_error_v).sum::<f64>() / per_channel.len() as f64
    };
    Ok(SettleReport {
        per_channel,
        max_final_v: max_final,
        mean_final_v: mean_final,
    })
}

/// Configured coupling rendered in dB.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CouplingLevel {
    pub victim: u32,
    pub aggressor: u32,
    pub level_db: f64,
}

/// Full metrics block emitted after a simulation run.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub effective_rate_hz: f64,
    pub nominal_rate_hz: f64,
    pub slots_per_refresh: u32,
    pub per_channel_settle_error_v: Vec<f64>,
    pub settle_error_max_v: f64,
    pub settle_error_mean_v: f64,
    pub droop_per_refresh_v: f64,
    pub crosstalk_db_matrix: Vec<CouplingLevel>,
    pub resources: Resources,
}

/// Assembles the report for one simulated run.
pub fn build_report(
    cfg: &SystemConfig,
    frames: &[Frame],
    trace: &TraceSet,
    programs: &[VoltageProgram],
) -> Result<MetricsReport, MetricsError> {
    let first = frames.first().cloned().unwrap_or(Frame {
        slots: Vec::new(),
        slots_per_refresh: cfg.scheduled_slots_per_refresh(),
        channels_covered: Default::default(),
    });
    let rates = effective_update_rate(cfg, &first);
    let settle = settle_error(cfg, trace, frames, programs)?;
    let crosstalk_db_matrix = cfg
        .crosstalk
        .entries
        .iter()
        .map(|e| CouplingLevel {
            victim: e.victim,
            aggressor: e.aggressor,
            level_db: if e.coupling == 0.0 {
                f64::NEG_INFINITY
            } else {
                20.0 * e.coupling.abs().log10()
            },
        })
        .collect();
    Ok(MetricsReport {
        effective_rate_hz: rates.effective_hz_f64(),
        nominal_rate_hz: rates.nominal_hz_f64(),
        slots_per_refresh: rates.slots_per_refresh,
        per_channel_settle_error_v: settle.per_channel.iter().map(|c| c.final_error_v).collect(),
        settle_error_max_v: settle.max_final_v,
        settle_error_mean_v: settle.mean_final_v,
        droop_per_refresh_v: droop_per_refresh(cfg),
        crosstalk_db_matrix,
        resources: resource_comparison(cfg),
    })
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "effective_rate={}", self.effective_rate_hz)?;
        writeln!(f, "nominal_rate={}", self.nominal_rate_hz)?;
        writeln!(f, "slots_per_refresh={}", self.slots_per_refresh)?;
        writeln!(f, "settle_error_max_v={:.6e}", self.settle_error_max_v)?;
        writeln!(f, "settle_error_mean_v={:.6e}", self.settle_error_mean_v)?;
        writeln!(f, "droop_per_refresh_v={:.6e}", self.droop_per_refresh_v)?;
        writeln!(
            f,
            "resources: feedthroughs {} vs {}, dac_channels {} vs {}",
            self.resources.feedthroughs_tdm,
            self.resources.feedthroughs_conventional,
            self.resources.dac_channels_tdm,
            self.resources.dac_channels_conventional
        )?;
        for c in &self.crosstalk_db_matrix {
            writeln!(
                f,
                "coupling ch{} <- ch{}: {:.2} dB",
                c.victim, c.aggressor, c.level_db
            )?;
        }
        Ok(())
    }
}
