//! File formats: config and program ingestion, frame and trace export.
//!
//! Text formats are CSV with fixed headers; binary formats are little-endian
//! with a four-byte magic and a version word, laid out exactly as documented
//! in the guide's file-formats chapter.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::Deserialize;
use thiserror::Error;

use crate::model::SystemConfig;
use crate::scheduler::{Frame, SelectWord, Slot, SlotPurpose, VoltageProgram};
use crate::simulator::{EventMarker, TraceSet};
use crate::waveforms::WaveformSpec;

const FRAME_MAGIC: &[u8; 4] = b"TDMS";
const TRACE_MAGIC: &[u8; 4] = b"TDMT";
const FORMAT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum IoError {
    #[error("{path}: {source}")]
    File {
        path: String,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Format { path: String, message: String },
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

fn file_err(path: &Path, source: std::io::Error) -> IoError {
    IoError::File {
        path: path.display().to_string(),
        source,
    }
}

fn format_err(path: &Path, message: impl Into<String>) -> IoError {
    IoError::Format {
        path: path.display().to_string(),
        message: message.into(),
    }
}

/// Loads a [`SystemConfig`] from its JSON schema.
pub fn load_config(path: &Path) -> Result<SystemConfig, IoError> {
    let file = File::open(path).map_err(|e| file_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| format_err(path, e.to_string()))
}

/// Writes a [`SystemConfig`] as pretty JSON.
pub fn save_config(path: &Path, cfg: &SystemConfig) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    serde_json::to_writer_pretty(BufWriter::new(file), cfg)
        .map_err(|e| format_err(path, e.to_string()))
}

/// One channel's waveform in a programs file.
#[derive(Debug, Clone, PartialEq, Deserialize, serde::Serialize)]
pub struct ProgramEntry {
    pub channel: u32,
    #[serde(flatten)]
    pub waveform: WaveformSpec,
}

/// Loads per-channel waveform specs from a JSON programs file.
pub fn load_programs_json(path: &Path) -> Result<Vec<ProgramEntry>, IoError> {
    let file = File::open(path).map_err(|e| file_err(path, e))?;
    serde_json::from_reader(BufReader::new(file)).map_err(|e| format_err(path, e.to_string()))
}

/// Imports raw sampled programs from CSV with columns
/// `channel,sample_index,voltage_V`. Rows may arrive in any order; sample
/// indices of each channel must form `0..n` without gaps.
pub fn load_programs_csv(path: &Path, rate_hz: u64) -> Result<Vec<VoltageProgram>, IoError> {
    let file = File::open(path).map_err(|e| file_err(path, e))?;
    let mut reader = csv::Reader::from_reader(BufReader::new(file));
    let mut rows: Vec<(u32, u64, f64)> = Vec::new();
    for record in reader.records() {
        let record = record?;
        if record.len() != 3 {
            return Err(format_err(path, format!("expected 3 columns, got {}", record.len())));
        }
        let parse =
            |i: usize| -> Result<&str, IoError> { Ok(record.get(i).unwrap_or("").trim()) };
        let channel = parse(0)?
            .parse()
            .map_err(|e| format_err(path, format!("bad channel: {e}")))?;
        let index = parse(1)?
            .parse()
            .map_err(|e| format_err(path, format!("bad sample_index: {e}")))?;
        let voltage = parse(2)?
            .parse()
            .map_err(|e| format_err(path, format!("bad voltage_V: {e}")))?;
        rows.push((channel, index, voltage));
    }
    rows.sort_by_key(|&(ch, idx, _)| (ch, idx));

    let mut programs: Vec<VoltageProgram> = Vec::new();
    let mut current: Option<(u32, Vec<f64>)> = None;
    for (ch, idx, v) in rows {
        match &mut current {
            Some((cur, samples)) if *cur == ch => {
                if idx as usize != samples.len() {
                    return Err(format_err(
                        path,
                        format!("channel {ch}: sample_index {idx} out of sequence"),
                    ));
                }
                samples.push(v);
            }
            _ => {
                if let Some((cur, samples)) = current.take() {
                    programs.push(VoltageProgram::waveform(cur, samples, rate_hz));
                }
                if idx != 0 {
                    return Err(format_err(
                        path,
                        format!("channel {ch}: first sample_index must be 0, got {idx}"),
                    ));
                }
                current = Some((ch, vec![v]));
            }
        }
    }
    if let Some((cur, samples)) = current {
        programs.push(VoltageProgram::waveform(cur, samples, rate_hz));
    }
    Ok(programs)
}

/// Writes a frame stream as CSV with columns
/// `tick,dac_code,dac_target_V,select_word_binary,purpose`. Ticks count DAC
/// update periods from the start of the stream.
pub fn write_frames_csv(path: &Path, frames: &[Frame]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["tick", "dac_code", "dac_target_V", "select_word_binary", "purpose"])?;
    let mut tick: u64 = 0;
    for frame in frames {
        for slot in &frame.slots {
            w.write_record([
                tick.to_string(),
                slot.dac_code.to_string(),
                format!("{:.9}", slot.dac_target_v),
                slot.select_word.to_bit_string(),
                slot.purpose.as_str().to_string(),
            ])?;
            tick += 1;
        }
    }
    w.flush().map_err(|e| file_err(path, e))?;
    Ok(())
}

fn purpose_code(p: SlotPurpose) -> u8 {
    match p {
        SlotPurpose::Idle => 0,
        SlotPurpose::Stage1Charge => 1,
        SlotPurpose::Stage2Deliver => 2,
        SlotPurpose::DirectDeliver => 3,
    }
}

fn purpose_from_code(code: u8) -> Option<SlotPurpose> {
    match code {
        0 => Some(SlotPurpose::Idle),
        1 => Some(SlotPurpose::Stage1Charge),
        2 => Some(SlotPurpose::Stage2Deliver),
        3 => Some(SlotPurpose::DirectDeliver),
        _ => None,
    }
}

const STAGE_OFF: u8 = 0xFF;

/// Writes the compact binary frame stream.
///
/// Layout (little-endian): magic `TDMS`, version u16, stage count u16, DAC
/// rate u64, frame count u64, then per frame a u32 slot count followed by
/// 28-byte slot records: tick u64, dac_code u32, dac_target f64 bits,
/// select bits u32, word length u8, purpose u8, stage-1 state u8, stage-2
/// state u8 (0xFF = off).
pub fn write_frames_bin(path: &Path, frames: &[Frame]) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    let stage_count = frames
        .first()
        .and_then(|f| f.slots.first())
        .map(|s| s.stage_states.len() as u16)
        .unwrap_or(0);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| file_err(path, e));
    write(FRAME_MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&stage_count.to_le_bytes())?;
    write(&0u64.to_le_bytes())?; // reserved: dac rate filled by caller context
    write(&(frames.len() as u64).to_le_bytes())?;
    let mut tick: u64 = 0;
    for frame in frames {
        write(&(frame.slots.len() as u32).to_le_bytes())?;
        for slot in &frame.slots {
            write(&tick.to_le_bytes())?;
            write(&slot.dac_code.to_le_bytes())?;
            write(&slot.dac_target_v.to_bits().to_le_bytes())?;
            write(&(slot.select_word.bits as u32).to_le_bytes())?;
            write(&[slot.select_word.len])?;
            write(&[purpose_code(slot.purpose)])?;
            let s1 = slot.stage_states.first().copied().flatten();
            let s2 = slot.stage_states.get(1).copied().flatten();
            write(&[s1.map_or(STAGE_OFF, |k| k as u8)])?;
            write(&[s2.map_or(STAGE_OFF, |j| j as u8)])?;
            tick += 1;
        }
    }
    w.flush().map_err(|e| file_err(path, e))?;
    Ok(())
}

/// Reads a binary frame stream written by [`write_frames_bin`].
pub fn read_frames_bin(path: &Path) -> Result<Vec<Frame>, IoError> {
    let file = File::open(path).map_err(|e| file_err(path, e))?;
    let mut r = BufReader::new(file);
    let mut buf = [0u8; 8];
    let mut read_exact = |buf: &mut [u8]| -> Result<(), IoError> {
        r.read_exact(buf).map_err(|e| file_err(path, e))
    };

    let mut magic = [0u8; 4];
    read_exact(&mut magic)?;
    if &magic != FRAME_MAGIC {
        return Err(format_err(path, "not a frame stream (bad magic)"));
    }
    read_exact(&mut buf[..2])?;
    let version = u16::from_le_bytes([buf[0], buf[1]]);
    if version != FORMAT_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    read_exact(&mut buf[..2])?;
    let stage_count = u16::from_le_bytes([buf[0], buf[1]]) as usize;
    read_exact(&mut buf)?; // reserved
    read_exact(&mut buf)?;
    let frame_count = u64::from_le_bytes(buf);

    let mut frames = Vec::new();
    for _ in 0..frame_count {
        read_exact(&mut buf[..4])?;
        let slot_count = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
        let mut slots = Vec::with_capacity(slot_count as usize);
        let mut covered = std::collections::BTreeSet::new();
        for idx in 0..slot_count {
            read_exact(&mut buf)?; // stream tick, recomputed on replay
            read_exact(&mut buf[..4])?;
            let dac_code = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]);
            read_exact(&mut buf)?;
            let dac_target_v = f64::from_bits(u64::from_le_bytes(buf));
            read_exact(&mut buf[..4])?;
            let bits = u32::from_le_bytes([buf[0], buf[1], buf[2], buf[3]]) as u64;
            let mut small = [0u8; 4];
            read_exact(&mut small)?;
            let [len, purpose, s1, s2] = small;
            let purpose = purpose_from_code(purpose)
                .ok_or_else(|| format_err(path, format!("bad purpose code {purpose}")))?;
            let mut stage_states = Vec::with_capacity(stage_count);
            if stage_count >= 1 {
                stage_states.push((s1 != STAGE_OFF).then_some(s1 as u32));
            }
            if stage_count >= 2 {
                stage_states.push((s2 != STAGE_OFF).then_some(s2 as u32));
            }
            slots.push(Slot {
                index: idx,
                dac_code,
                dac_target_v,
                select_word: SelectWord { bits, len },
                stage_states,
                purpose,
            });
        }
        // Coverage is recomputed by consumers that know the topology; the
        // stream itself only records delivery slots.
        covered.extend(std::iter::empty::<u32>());
        frames.push(Frame {
            slots_per_refresh: slot_count,
            slots,
            channels_covered: covered,
        });
    }
    Ok(frames)
}

/// Writes a trace as long-format CSV with columns
/// `tick,time_s,node_id,voltage_V`.
pub fn write_trace_csv(path: &Path, trace: &TraceSet) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["tick", "time_s", "node_id", "voltage_V"])?;
    for (node_idx, node) in trace.nodes.iter().enumerate() {
        let series = &trace.series[node_idx];
        for (i, &tick) in trace.ticks.iter().enumerate() {
            w.write_record([
                tick.to_string(),
                format!("{:.12e}", trace.time_s(tick)),
                node.to_string(),
                format!("{:.9e}", series[i]),
            ])?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))?;
    Ok(())
}

/// Writes the columnar binary trace.
///
/// Layout (little-endian): magic `TDMT`, version u16, reserved u16, tick
/// rate u64, node count u32, sample count u64, then the node-id table
/// (u16 length + UTF-8 name each), the tick axis as u64s, and one f64
/// voltage column per node in table order.
pub fn write_trace_bin(path: &Path, trace: &TraceSet) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| file_err(path, e));
    write(TRACE_MAGIC)?;
    write(&FORMAT_VERSION.to_le_bytes())?;
    write(&0u16.to_le_bytes())?;
    write(&trace.tick_rate_hz.to_le_bytes())?;
    write(&(trace.nodes.len() as u32).to_le_bytes())?;
    write(&(trace.ticks.len() as u64).to_le_bytes())?;
    for node in &trace.nodes {
        let name = node.to_string();
        write(&(name.len() as u16).to_le_bytes())?;
        write(name.as_bytes())?;
    }
    for &tick in &trace.ticks {
        write(&tick.to_le_bytes())?;
    }
    for series in &trace.series {
        for &v in series {
            write(&v.to_bits().to_le_bytes())?;
        }
    }
    w.flush().map_err(|e| file_err(path, e))?;
    Ok(())
}

/// Writes trace event markers as CSV with columns
/// `tick,time_s,kind,detail`.
pub fn write_events_csv(path: &Path, trace: &TraceSet) -> Result<(), IoError> {
    let file = File::create(path).map_err(|e| file_err(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    w.write_record(["tick", "time_s", "kind", "detail"])?;
    for marker in &trace.markers {
        let (kind, detail) = match marker {
            EventMarker::SlotStart {
                frame,
                slot,
                purpose,
                ..
            } => (
                "slot_start",
                format!("frame={frame} slot={slot} purpose={}", purpose.as_str()),
            ),
            EventMarker::SwitchTransition {
                stage, from, to, ..
            } => (
                "switch_transition",
                format!(
                    "stage={stage} from={} to={}",
                    from.map_or("off".to_string(), |k| k.to_string()),
                    to.map_or("off".to_string(), |k| k.to_string())
                ),
            ),
        };
        let tick = marker.tick();
        w.write_record([
            tick.to_string(),
            format!("{:.12e}", trace.time_s(tick)),
            kind.to_string(),
            detail,
        ])?;
    }
    w.flush().map_err(|e| file_err(path, e))?;
    Ok(())
}
