//! Property suites over the compiler and simulator invariants.

use proptest::prelude::*;

use tdmux::metrics::crosstalk_db;
use tdmux::model::{
    validate_config, CrosstalkMatrix, DacSpec, DemuxStage, DemuxTopology, LeakageSpec, SwitchSpec,
    SystemConfig, TimingPolicy,
};
use tdmux::scheduler::{
    channel_id, compile_dynamic_stream, compile_static_frame, decode_select, encode_select,
    SlotPurpose, VoltageProgram,
};
use tdmux::simulator::{charge_share, drive_charge, run, NodeId, NodeState, SimOptions};
use tdmux::waveforms::{sample, zoh_reference, WaveformSpec};

fn switch(r_on_ohm: f64, c_on_f: f64) -> SwitchSpec {
    SwitchSpec {
        r_on_ohm,
        c_on_f,
        injected_charge_c: 0.0,
        off_leak_resistance_ohm: None,
    }
}

/// Single-stage chain with negligible switch resistance and no parasitics:
/// the ideal sample-and-hold.
fn ideal_chain(channels: u32) -> SystemConfig {
    validate_config(SystemConfig {
        dac: DacSpec {
            update_rate_hz: 4_000_000,
            resolution_bits: 14,
            full_scale_v: 10.0,
            settle_time_constant_s: 0.0,
        },
        topology: DemuxTopology {
            stages: vec![DemuxStage {
                fanout: channels,
                outputs_used: channels,
                switch: switch(1e-9, 0.0),
                hold_capacitance_f: 120e-12,
                has_decoder: false,
            }],
            total_channels: None,
        },
        routing: None,
        leakage: LeakageSpec::None,
        crosstalk: CrosstalkMatrix::zero(),
        per_channel_rate_hz: 4_000_000 / channels as u64,
        electrode_count: None,
        two_step_charging: true,
        timing: TimingPolicy::default(),
    })
    .unwrap()
}

fn two_stage(s1_used: u32, s2_used: u32, two_step: bool) -> SystemConfig {
    validate_config(SystemConfig {
        dac: DacSpec {
            update_rate_hz: 1_500_000,
            resolution_bits: 16,
            full_scale_v: 10.0,
            settle_time_constant_s: 0.0,
        },
        topology: DemuxTopology {
            stages: vec![
                DemuxStage {
                    fanout: 8,
                    outputs_used: s1_used,
                    switch: switch(10.0, 185e-12),
                    hold_capacitance_f: 2.7e-9,
                    has_decoder: true,
                },
                DemuxStage {
                    fanout: 8,
                    outputs_used: s2_used,
                    switch: switch(10.0, 185e-12),
                    hold_capacitance_f: 470e-12,
                    has_decoder: true,
                },
            ],
            total_channels: None,
        },
        routing: None,
        leakage: LeakageSpec::None,
        crosstalk: CrosstalkMatrix::zero(),
        per_channel_rate_hz: 1,
        electrode_count: None,
        two_step_charging: two_step,
        timing: TimingPolicy::default(),
    })
    .unwrap()
}

proptest! {
    /// Total charge is invariant under charge sharing to 1e-12 relative.
    #[test]
    fn charge_share_conserves_charge(
        ca in 1e-12f64..1e-8,
        cb in 1e-12f64..1e-8,
        va in -10.0f64..10.0,
        vb in -10.0f64..10.0,
        r in 1.0f64..1e3,
        dt in 1e-12f64..1e-3,
    ) {
        let mut a = NodeState::new(NodeId::Branch(0), ca, va);
        let mut b = NodeState::new(NodeId::Channel(0), cb, vb);
        let q0 = ca * va + cb * vb;
        charge_share(&mut a, &mut b, r, dt);
        let q1 = ca * a.voltage_v + cb * b.voltage_v;
        let scale = q0.abs().max(1e-15);
        prop_assert!((q1 - q0).abs() <= 1e-12 * scale, "dq = {}", (q1 - q0) / scale);
    }

    /// drive_charge approaches the source monotonically and never overshoots.
    #[test]
    fn drive_charge_is_monotone_without_overshoot(
        c in 1e-12f64..1e-8,
        v0 in -10.0f64..10.0,
        source in -10.0f64..10.0,
        r in 1.0f64..1e3,
        steps in 1usize..50,
    ) {
        let mut node = NodeState::new(NodeId::Channel(0), c, v0);
        let dt = r * c / 3.0;
        let mut last_gap = (v0 - source).abs();
        for _ in 0..steps {
            drive_charge(&mut node, source, r, dt);
            let gap = (node.voltage_v - source).abs();
            prop_assert!(gap <= last_gap + 1e-12);
            // Never crosses the source: the error keeps its sign.
            prop_assert!((node.voltage_v - source) * (v0 - source) >= -1e-12);
            last_gap = gap;
        }
    }

    /// Every channel is delivered exactly once per compiled static refresh.
    #[test]
    fn static_frame_covers_every_channel_once(
        s1 in 1u32..=8,
        s2 in 1u32..=8,
        two_step in any::<bool>(),
        seed in 0u64..1000,
    ) {
        let cfg = two_stage(s1, s2, two_step);
        let n = cfg.demux_channel_count();
        let programs: Vec<VoltageProgram> = (0..n)
            .map(|ch| VoltageProgram::dc(ch, ((ch as u64 * 2654435761 + seed) % 2000) as f64 / 100.0 - 10.0))
            .collect();
        let frame = compile_static_frame(&cfg, &programs).unwrap();
        prop_assert_eq!(frame.channels_covered.len() as u32, n);
        prop_assert_eq!(frame.slots_per_refresh as usize, frame.slots.len());

        // Count delivery slots per channel.
        let mut deliveries = vec![0u32; n as usize];
        for slot in &frame.slots {
            match slot.purpose {
                SlotPurpose::Stage2Deliver => {
                    let j = slot.stage_states[1].unwrap();
                    for k in 0..s1 {
                        deliveries[channel_id(&cfg, k, j) as usize] += 1;
                    }
                }
                SlotPurpose::DirectDeliver => {
                    let k = slot.stage_states[0].unwrap();
                    let j = slot.stage_states[1].unwrap();
                    deliveries[channel_id(&cfg, k, j) as usize] += 1;
                }
                _ => {}
            }
        }
        prop_assert!(deliveries.iter().all(|&d| d == 1), "{:?}", deliveries);
    }

    /// Dynamic frames deliver every channel exactly once per frame, and the
    /// stream is a deterministic function of (channel, sample index).
    #[test]
    fn dynamic_stream_is_deterministic_and_covering(
        channels in 1u32..=8,
        sample_count in 1usize..=16,
    ) {
        let mut cfg = ideal_chain(channels);
        cfg.per_channel_rate_hz = 1_000_000;
        let programs: Vec<VoltageProgram> = (0..channels)
            .map(|ch| {
                let samples: Vec<f64> = (0..sample_count)
                    .map(|k| (((ch as usize + 1) * (k + 1)) % 19) as f64 - 9.0)
                    .collect();
                VoltageProgram::waveform(ch, samples, 1_000_000)
            })
            .collect();
        let horizon = sample_count as f64 / 1e6;
        let a = compile_dynamic_stream(&cfg, &programs, horizon).unwrap();
        let b = compile_dynamic_stream(&cfg, &programs, horizon).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.len(), sample_count);
        for (r, frame) in a.iter().enumerate() {
            prop_assert_eq!(frame.channels_covered.len() as u32, channels);
            for (i, slot) in frame.slots.iter().enumerate() {
                prop_assert_eq!(slot.stage_states[0], Some(i as u32));
                let expected = match &programs[i].kind {
                    tdmux::scheduler::ProgramKind::Waveform { samples_v, .. } => samples_v[r],
                    _ => unreachable!(),
                };
                prop_assert_eq!(slot.dac_target_v, expected);
            }
        }
    }

    /// decode(encode(state)) is the identity over reachable switch states.
    #[test]
    fn select_roundtrip_two_stage(
        s1_used in 1u32..=7, // leave a parking address
        s2_used in 1u32..=8,
    ) {
        let cfg = two_stage(s1_used, s2_used, true);
        let mut states = vec![vec![None, None]];
        for k in 0..s1_used {
            states.push(vec![Some(k), None]);
            for j in 0..s2_used {
                states.push(vec![Some(k), Some(j)]);
            }
        }
        for j in 0..s2_used {
            states.push(vec![None, Some(j)]);
        }
        for state in states {
            let slot = tdmux::scheduler::Slot {
                index: 0,
                dac_code: 0,
                dac_target_v: 0.0,
                select_word: tdmux::scheduler::SelectWord { bits: 0, len: 0 },
                stage_states: state.clone(),
                purpose: SlotPurpose::Idle,
            };
            let word = encode_select(&cfg, &slot).unwrap();
            prop_assert_eq!(decode_select(&cfg, word).unwrap(), state);
        }
    }

    /// Same round-trip for decoderless single-stage words.
    #[test]
    fn select_roundtrip_one_hot(channels in 1u32..=16) {
        let cfg = ideal_chain(channels);
        let mut states = vec![vec![None]];
        for k in 0..channels {
            states.push(vec![Some(k)]);
        }
        for state in states {
            let slot = tdmux::scheduler::Slot {
                index: 0,
                dac_code: 0,
                dac_target_v: 0.0,
                select_word: tdmux::scheduler::SelectWord { bits: 0, len: 0 },
                stage_states: state.clone(),
                purpose: SlotPurpose::Idle,
            };
            let word = encode_select(&cfg, &slot).unwrap();
            prop_assert_eq!(word.len as u32, channels);
            prop_assert_eq!(decode_select(&cfg, word).unwrap(), state);
        }
    }

    /// DAC quantization stays within half an LSB across the full scale.
    #[test]
    fn quantizer_within_half_lsb(
        bits in 8u32..=20,
        v in -10.0f64..10.0,
    ) {
        let dac = DacSpec {
            update_rate_hz: 1_000_000,
            resolution_bits: bits,
            full_scale_v: 10.0,
            settle_time_constant_s: 0.0,
        };
        let err = (dac.dequantize(dac.quantize(v)) - v).abs();
        prop_assert!(err <= dac.lsb_v() / 2.0 + 1e-12);
    }

    /// With no parasitics, leakage, or crosstalk and negligible switch
    /// resistance, electrode traces equal the zero-order hold of their
    /// programs at slot boundaries, up to DAC quantization.
    #[test]
    fn ideal_chain_is_zoh_exact(
        targets in proptest::collection::vec(-10.0f64..10.0, 4),
    ) {
        let cfg = ideal_chain(4);
        let programs: Vec<VoltageProgram> = targets
            .iter()
            .enumerate()
            .map(|(c, &v)| VoltageProgram::dc(c as u32, v))
            .collect();
        let frame = compile_static_frame(&cfg, &programs).unwrap();
        let trace = run(&cfg, &[frame.clone()], &SimOptions::default()).unwrap();
        let half_lsb = cfg.dac.lsb_v() / 2.0;
        let ticks_per_slot = trace.ticks_per_slot();
        for (c, &target) in targets.iter().enumerate() {
            // After the channel's delivery slot, every boundary holds the value.
            let deliver_end = (c as u64 + 1) * ticks_per_slot;
            for boundary in (deliver_end..=trace.last_tick()).step_by(ticks_per_slot as usize) {
                let v = trace.value(NodeId::Channel(c as u32), boundary).unwrap();
                prop_assert!((v - target).abs() <= half_lsb + 1e-12);
            }
        }
    }

    /// Identical inputs give bit-identical traces.
    #[test]
    fn simulation_is_deterministic(
        targets in proptest::collection::vec(-10.0f64..10.0, 4),
        oversampling in 4u32..=32,
    ) {
        let cfg = ideal_chain(4);
        let programs: Vec<VoltageProgram> = targets
            .iter()
            .enumerate()
            .map(|(c, &v)| VoltageProgram::dc(c as u32, v))
            .collect();
        let frame = compile_static_frame(&cfg, &programs).unwrap();
        let opts = SimOptions { oversampling, ..SimOptions::default() };
        let a = run(&cfg, &[frame.clone()], &opts).unwrap();
        let b = run(&cfg, &[frame], &opts).unwrap();
        for (sa, sb) in a.series.iter().zip(b.series.iter()) {
            for (x, y) in sa.iter().zip(sb.iter()) {
                prop_assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    /// Validation is idempotent and survives serialization byte-for-byte.
    #[test]
    fn validation_idempotent_over_serialization(
        s1 in 1u32..=8,
        s2 in 1u32..=8,
        rate_khz in 100u64..=4000,
    ) {
        let mut cfg = two_stage(s1, s2, true);
        cfg.dac.update_rate_hz = rate_khz * 1000;
        let cfg = match validate_config(cfg) {
            Ok(c) => c,
            Err(_) => return Ok(()),
        };
        let json = serde_json::to_string(&cfg).unwrap();
        let back: SystemConfig = serde_json::from_str(&json).unwrap();
        prop_assert_eq!(&back, &cfg);
        let revalidated = validate_config(back).unwrap();
        prop_assert_eq!(&revalidated, &cfg);
    }

    /// Linear droop per refresh scales linearly with the refresh period.
    #[test]
    fn droop_is_linear_in_refresh_period(
        rate_mv_per_s in 0.1f64..100.0,
        slots in 1u32..=64,
    ) {
        let mut cfg = ideal_chain(4);
        cfg.leakage = LeakageSpec::LinearDroop {
            droop_rate_v_per_s: -rate_mv_per_s * 1e-3,
            reference_voltage_v: 10.0,
        };
        cfg.topology.stages[0].fanout = slots;
        cfg.topology.stages[0].outputs_used = slots;
        cfg.per_channel_rate_hz = 1;
        let one = tdmux::metrics::droop_per_refresh(&cfg);
        let period = cfg.refresh_period_s();
        prop_assert!((one - rate_mv_per_s * 1e-3 * period).abs() < 1e-18 + one * 1e-12);
    }

    /// 0 dB at equal amplitudes; strictly increasing in induced amplitude.
    #[test]
    fn crosstalk_db_properties(drive in 1e-3f64..10.0, a in 1e-6f64..1.0, b in 1e-6f64..1.0) {
        prop_assert_eq!(crosstalk_db(drive, drive).unwrap(), 0.0);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        prop_assume!(lo < hi);
        prop_assert!(crosstalk_db(drive, lo).unwrap() < crosstalk_db(drive, hi).unwrap());
    }

    /// Sampling a waveform then reconstructing with ZOH reproduces the
    /// samples at every sample instant.
    #[test]
    fn zoh_reconstruction_matches_samples(
        amplitude in 0.1f64..9.0,
        freq_khz in 1.0f64..100.0,
    ) {
        let spec = WaveformSpec::sine(amplitude, freq_khz * 1e3, 0.0, 0.0, 64e-6);
        let program = sample(&spec, 1_000_000, 10.0, 0).unwrap();
        let zoh = zoh_reference(&program);
        if let tdmux::scheduler::ProgramKind::Waveform { samples_v, .. } = &program.kind {
            for (k, &s) in samples_v.iter().enumerate() {
                let t = k as f64 / 1e6 + 1e-9;
                prop_assert!((zoh.value_at(t) - s).abs() < 1e-12);
            }
        }
    }
}
