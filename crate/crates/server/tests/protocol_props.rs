use conductor_core::beam::BeamConfig;
use conductor_server::osc;
use conductor_server::protocol::*;
use proptest::prelude::*;

fn finite() -> impl Strategy<Value = f64> {
    prop_oneof![
        -1e6..1e6f64,
        0.0..1.0f64,
        Just(0.0),
        Just(-0.0),
        Just(f64::MIN_POSITIVE),
        Just(1.0 / 3.0),
    ]
}

fn floats(max: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(finite(), 0..max)
}

fn decode_mode() -> impl Strategy<Value = DecodeMode> {
    prop_oneof![
        Just(DecodeMode::Sample),
        (1usize..100, 1usize..10, 1usize..129, 1usize..10, any::<bool>()).prop_map(
            |(width, depth, branch, commit, stochastic)| DecodeMode::Beam(BeamConfig {
                width,
                depth,
                branch,
                commit,
                stochastic
            })
        ),
    ]
}

fn stats() -> impl Strategy<Value = Option<ThroughputStats>> {
    prop::option::of((finite(), finite(), finite(), finite(), 0usize..9, any::<u64>()).prop_map(
        |(chars_per_sec, latency_p50_ms, latency_p95_ms, latency_max_ms, active_models, steps)| {
            ThroughputStats {
                chars_per_sec,
                latency_p50_ms,
                latency_p95_ms,
                latency_max_ms,
                active_models,
                steps,
            }
        },
    ))
}

fn row() -> impl Strategy<Value = WireRow> {
    (
        0usize..8,
        prop::collection::vec((0u8..128, finite()).prop_map(|(char, p)| TopEntry { char, p }), 0..16),
        finite(),
    )
        .prop_map(|(model, top, residual)| WireRow { model, top, residual })
}

fn message() -> impl Strategy<Value = WireMessage> {
    prop_oneof![
        floats(10).prop_map(|weights| WireMessage::SetWeights { weights }),
        any::<String>().prop_map(|text| WireMessage::Prime { text }),
        Just(WireMessage::Pause),
        Just(WireMessage::Resume),
        Just(WireMessage::Reset),
        finite().prop_map(|temperature| WireMessage::SetTemperature { temperature }),
        decode_mode().prop_map(|mode| WireMessage::SetDecodeMode { mode }),
        Just(WireMessage::ListModels),
        prop::collection::vec(
            (any::<String>(), prop::collection::vec(1usize..512, 1..4), any::<usize>(), any::<String>()),
            0..4
        )
        .prop_map(|ms| WireMessage::ModelList {
            models: ms
                .into_iter()
                .enumerate()
                .map(|(index, (name, layer_sizes, param_count, corpus))| ModelInfo {
                    index,
                    name,
                    layer_sizes,
                    param_count,
                    corpus
                })
                .collect()
        }),
        (
            any::<u64>(),
            0u8..128,
            floats(128),
            prop::collection::vec(row(), 0..4),
            floats(8),
            prop::collection::vec(0usize..8, 0..8),
            prop::option::of(any::<u64>())
        )
            .prop_map(|(step, char, rho, rows, weights, active, timestamp_ms)| {
                WireMessage::Event(WireEvent { step, char, rho, rows, weights, active, timestamp_ms })
            }),
        (
            prop_oneof![Just(RunState::Running), Just(RunState::Paused), Just(RunState::Stopped)],
            floats(8),
            finite(),
            decode_mode(),
            any::<u64>(),
            prop::option::of(any::<u64>()),
            stats()
        )
            .prop_map(|(state, weights, temperature, decode_mode, step, ack, throughput)| {
                WireMessage::Status(StatusInfo { state, weights, temperature, decode_mode, step, ack, throughput })
            }),
        (any::<String>(), any::<String>(), prop::option::of(any::<u64>()))
            .prop_map(|(code, message, ref_seq)| WireMessage::Error { code, message, ref_seq }),
    ]
}

fn envelope() -> impl Strategy<Value = Envelope> {
    (any::<String>(), any::<u64>(), message()).prop_map(|(s, seq, m)| Envelope::new(s, seq, m))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(512))]

    #[test]
    fn round_trip_is_identity(env in envelope()) {
        let frame = env.to_frame();
        let (parsed, used) = decode_frame(&frame).unwrap().unwrap();
        prop_assert_eq!(used, frame.len());
        let parsed = parsed.unwrap();
        prop_assert_eq!(&parsed, &env);
        prop_assert_eq!(parsed.to_frame(), frame);
    }

    #[test]
    fn concatenated_frames_split_cleanly(envs in prop::collection::vec(envelope(), 1..5)) {
        let stream: Vec<u8> = envs.iter().flat_map(|e| e.to_frame()).collect();
        let mut rest = &stream[..];
        let mut out = Vec::new();
        while let Some((e, used)) = decode_frame(rest).unwrap() {
            out.push(e.unwrap());
            rest = &rest[used..];
        }
        prop_assert!(rest.is_empty());
        prop_assert_eq!(out, envs);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..512)) {
        let _ = decode_frame(&bytes);
        let _ = parse_payload(&bytes);
        let _ = read_frame(&mut &bytes[..]);
        let _ = osc::parse_weights(&bytes);
    }

    #[test]
    fn mutated_frames_never_panic(
        env in envelope(),
        flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8),
        cut in any::<prop::sample::Index>(),
    ) {
        let mut frame = env.to_frame();
        for (i, b) in flips {
            let i = i.index(frame.len());
            frame[i] = b;
        }
        let _ = decode_frame(&frame);
        let _ = parse_payload(&frame[4..]);
        let cut = cut.index(frame.len());
        let _ = decode_frame(&frame[..cut]);
        let _ = read_frame(&mut &frame[..cut]);
    }

    #[test]
    fn mutated_osc_never_panics(
        w in prop::collection::vec(0.0..1.0f32, 0..10),
        flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 0..8),
        cut in any::<prop::sample::Index>(),
    ) {
        let mut bytes = osc::encode_weights(&w);
        for (i, b) in flips {
            let i = i.index(bytes.len());
            bytes[i] = b;
        }
        let cut = cut.index(bytes.len() + 1);
        let _ = osc::parse_weights(&bytes[..cut.min(bytes.len())]);
    }

    #[test]
    fn json_field_order_does_not_matter(w in floats(5), seq in any::<u64>()) {
        let json = serde_json::json!({"weights": w, "type": "set_weights", "seq": seq, "session": "x", "v": 1});
        let env = parse_payload(json.to_string().as_bytes()).unwrap();
        prop_assert_eq!(env.message, WireMessage::SetWeights { weights: w });
    }
}

#[test]
fn every_type_tag_is_listed() {
    let samples = [
        WireMessage::SetWeights { weights: vec![] },
        WireMessage::Prime { text: String::new() },
        WireMessage::Pause,
        WireMessage::Resume,
        WireMessage::Reset,
        WireMessage::SetTemperature { temperature: 1.0 },
        WireMessage::SetDecodeMode { mode: DecodeMode::Sample },
        WireMessage::ListModels,
        WireMessage::ModelList { models: vec![] },
        WireMessage::error("a", "b", None),
    ];
    for m in samples {
        let json = serde_json::to_value(Envelope::new("s", 0, m.clone())).unwrap();
        assert_eq!(json["type"], m.type_tag());
        assert!(MESSAGE_TYPES.contains(&m.type_tag()));
    }
}
